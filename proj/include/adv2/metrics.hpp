#pragma once

#include <optional>
#include <string>
#include <vector>

#include "adv2/attacks.hpp"

namespace adv2::metrics {

struct BatchStats {
    double asr = 0;
    std::optional<double> mean_mc;  // undefined when no trial succeeded
    int n = 0, n_success = 0;
};

BatchStats asr_mc(const std::vector<attack::AttackOutcome>& outcomes);

// p=1: mean |a-b|; p=2: |a-b|_2 / sqrt(pixel count)
double lp_distance(const Tensor& a, const Tensor& b, int p);

// Indices of the top-q fraction of pixels; ties broken by pixel index order.
std::vector<std::size_t> top_q_set(const Tensor& m, double q);
double iou_score(const Tensor& m, const Tensor& m0, double q = 0.2);

// adv_maps[src][tgt][image], benign_maps[tgt][image]; entry (src,tgt) is the
// mean L1 between adversarial and benign maps under the target interpreter.
Tensor transfer_matrix(const std::vector<std::vector<std::vector<Tensor>>>& adv_maps,
                       const std::vector<std::vector<Tensor>>& benign_maps);

Tensor random_patch_target(int h, int w, std::uint64_t seed,
                           double min_area = 0.05, double max_area = 0.40);

struct RandomClassTarget {
    Tensor map;
    int donor_class = -1;
    std::size_t donor_index = 0;
};
// Map of a random benign input from a class different from target_class.
RandomClassTarget random_class_target(const nn::Classifier& f,
                                      const std::vector<nn::Image>& dataset,
                                      interp::InterpreterId id, int target_class,
                                      std::uint64_t seed,
                                      const interp::RtsMasker* masker = nullptr,
                                      const interp::MaskSolverConfig* mask_cfg = nullptr);

struct MetricRecord {
    std::string image_id;
    std::string attack_id;
    std::string interpreter;
    bool asr_flag = false;
    double mc = 0, l1 = 0, l2 = 0, iou = 0;
    std::string detect_flags;  // semicolon-joined squeezer flags, may be empty
};

void write_metrics_csv(const std::string& path, const std::vector<MetricRecord>& rows);

}  // namespace adv2::metrics
