#pragma once

#include <atomic>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "adv2/defenses.hpp"
#include "adv2/metrics.hpp"

namespace adv2::experiment {

struct AttackEntry {
    std::string id;                     // unique within the experiment
    std::string kind = "adv2";          // pgd | adv2 | adv2_mask | stadv
    std::string target = "benign_self"; // benign_self | random_patch | random_class
    attack::AttackConfig config;
    attack::MaskAttackConfig mask_config;
    attack::StadvConfig stadv_config;
};

struct ExperimentSpec {
    std::string name = "experiment";
    // dataset: either a directory with labels.csv or a synthetic recipe
    std::string dataset_dir;
    std::optional<data::SynthConfig> synth;
    int synth_count = 1000;

    // classifier: checkpoint path or training recipe
    std::string checkpoint;
    std::string train_arch;  // non-empty -> train from scratch
    nn::TrainConfig train;
    int holdout = 200;

    std::string rts_masker_path;  // optional; trained on the fly when needed
    interp::RtsTrainConfig rts_train;
    int rts_train_subset = 1500;

    std::vector<interp::InterpreterId> interpreters;
    std::vector<AttackEntry> attacks;
    interp::MaskSolverConfig mask_solver;

    int batch_from = 0;
    int batch_count = 20;
    std::string output_dir = "out";
    std::uint64_t seed = 1;
    int workers = 2;
    bool export_maps = true;

    static ExperimentSpec from_json_text(const std::string& text, std::vector<std::string>* errors);
    std::string to_json_text() const;
    std::vector<std::string> validate() const;
};

// Parse + full validation; on failure returns nullopt and fills `errors`
// with one entry per violated field.
std::optional<ExperimentSpec> validate_spec(const std::string& json_text,
                                            std::vector<std::string>* errors);

struct RunResult {
    int exit_code = 0;
    std::string summary_path;
    std::string metrics_path;
};

// Cancellation flag is polled between images; partial metrics are already
// flushed when it fires.
RunResult run_experiment(const ExperimentSpec& spec, const std::atomic<bool>* cancel = nullptr);

// Simple horizontal-bar figure; values drawn in row order, sibling CSV
// carries the exact numbers.
void write_bar_chart(const std::string& png_path, const std::string& csv_path,
                     const std::vector<std::pair<std::string, double>>& rows,
                     const std::string& value_name);

}  // namespace adv2::experiment
