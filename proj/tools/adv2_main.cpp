#include <atomic>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "adv2/experiment.hpp"
#include "adv2/image_io.hpp"

namespace fs = std::filesystem;
using namespace adv2;

namespace {

std::atomic<bool> g_cancel{false};
void handle_sigint(int) { g_cancel.store(true); }

std::string read_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path);
    return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

void apply_out_root(experiment::ExperimentSpec& spec) {
    if (const char* root = std::getenv("ADV2_OUT"); root && *root) spec.output_dir = root;
}

int run_spec_file(const std::string& path) {
    std::vector<std::string> errors;
    auto spec = experiment::validate_spec(read_file(path), &errors);
    if (!spec) {
        for (const auto& e : errors) std::cerr << "spec error: " << e << "\n";
        return 2;
    }
    apply_out_root(*spec);
    std::signal(SIGINT, handle_sigint);
    auto rr = experiment::run_experiment(*spec, &g_cancel);
    if (rr.exit_code == 0) std::cout << "summary: " << rr.summary_path << "\n";
    return rr.exit_code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"adv2lab: dual prediction/interpretation attacks and defenses"};
    app.require_subcommand(1);

    // ---- make-dataset ----
    auto* mk = app.add_subcommand("make-dataset", "generate a synthetic labeled image set");
    std::string mk_kind = "gray28", mk_out = "dataset";
    int mk_count = 1000;
    std::uint64_t mk_seed = 1;
    double mk_amp = 0.16;
    mk->add_option("--kind", mk_kind, "gray28 or rgb32");
    mk->add_option("--count", mk_count);
    mk->add_option("--seed", mk_seed);
    mk->add_option("--amplitude", mk_amp, "class signal amplitude");
    mk->add_option("--out", mk_out)->required();

    // ---- train ----
    auto* tr = app.add_subcommand("train", "train a classifier on a dataset directory");
    std::string tr_data, tr_arch = "cnn_gray28", tr_out = "classifier.ckpt";
    int tr_epochs = 10, tr_holdout = 500;
    std::uint64_t tr_seed = 1;
    double tr_noise = 0.01;
    tr->add_option("--dataset", tr_data)->required();
    tr->add_option("--arch", tr_arch);
    tr->add_option("--epochs", tr_epochs);
    tr->add_option("--seed", tr_seed);
    tr->add_option("--holdout", tr_holdout);
    tr->add_option("--noise-aug", tr_noise);
    tr->add_option("--out", tr_out);

    // ---- attack / evaluate ----
    auto* at = app.add_subcommand("attack", "run an experiment spec (attacks + metrics)");
    std::string at_spec;
    at->add_option("--spec", at_spec, "experiment JSON")->required();

    auto* ev = app.add_subcommand("evaluate", "benign-map metrics for an experiment spec");
    std::string ev_spec;
    ev->add_option("--spec", ev_spec, "experiment JSON (attack list ignored)")->required();

    // ---- defend ----
    auto* df = app.add_subcommand("defend", "feature-squeezing detection report");
    std::string df_data, df_ckpt, df_adv, df_out = "detection.csv";
    int df_count = 100;
    double df_quantile = 0.95;
    df->add_option("--dataset", df_data)->required();
    df->add_option("--checkpoint", df_ckpt)->required();
    df->add_option("--adv-dir", df_adv, "directory of adversarial PNM images to score");
    df->add_option("--count", df_count, "benign calibration batch size");
    df->add_option("--quantile", df_quantile);
    df->add_option("--out", df_out);

    // ---- aid-train ----
    auto* ai = app.add_subcommand("aid-train", "adversarial-distillation training of the masker");
    std::string ai_data, ai_ckpt, ai_masker, ai_out = "rts_masker_aid.ckpt";
    int ai_rounds = 2, ai_subset = 200;
    std::uint64_t ai_seed = 1;
    ai->add_option("--dataset", ai_data)->required();
    ai->add_option("--checkpoint", ai_ckpt)->required();
    ai->add_option("--masker", ai_masker, "base masker (trained fresh when omitted)");
    ai->add_option("--rounds", ai_rounds);
    ai->add_option("--subset", ai_subset);
    ai->add_option("--seed", ai_seed);
    ai->add_option("--out", ai_out);

    // ---- report ----
    auto* rp = app.add_subcommand("report", "print a summary table for an experiment output dir");
    std::string rp_dir;
    rp->add_option("--exp-dir", rp_dir)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (mk->parsed()) {
            data::SynthConfig sc;
            sc.kind = mk_kind;
            sc.signal_amplitude = mk_amp;
            data::Dataset ds = data::make_synthetic(sc, mk_count, mk_seed);
            data::save_dataset(ds, mk_out);
            std::cout << "wrote " << ds.images.size() << " images to " << mk_out << "\n";
            return 0;
        }
        if (tr->parsed()) {
            data::Dataset ds = data::load_dataset(tr_data);
            int holdout = std::min<int>(tr_holdout, static_cast<int>(ds.images.size()) / 5);
            std::vector<nn::Image> train(ds.images.begin(), ds.images.end() - holdout);
            std::vector<nn::Image> hold(ds.images.end() - holdout, ds.images.end());
            nn::TrainConfig cfg;
            cfg.epochs = tr_epochs;
            cfg.seed = tr_seed;
            cfg.noise_aug = tr_noise;
            cfg.verbose = true;
            nn::TrainReport rep;
            nn::Classifier f = nn::train_classifier(train, nn::arch_preset(tr_arch), cfg, &rep, &hold);
            f.save(tr_out);
            std::cout << "holdout accuracy " << rep.holdout_accuracy << ", saved " << tr_out << "\n";
            return 0;
        }
        if (at->parsed()) return run_spec_file(at_spec);
        if (ev->parsed()) {
            std::vector<std::string> errors;
            auto spec = experiment::validate_spec(read_file(ev_spec), &errors);
            if (!spec) {
                for (const auto& e : errors) std::cerr << "spec error: " << e << "\n";
                return 2;
            }
            spec->attacks.clear();
            apply_out_root(*spec);
            std::signal(SIGINT, handle_sigint);
            return experiment::run_experiment(*spec, &g_cancel).exit_code;
        }
        if (df->parsed()) {
            data::Dataset ds = data::load_dataset(df_data);
            nn::Classifier f = nn::Classifier::load(df_ckpt);
            defense::DetectorConfig det = defense::default_detector();
            std::vector<nn::Image> benign = data::slice(ds, 0, static_cast<std::size_t>(df_count));
            det.threshold = defense::calibrate_threshold(f, benign, det.squeezers, df_quantile);
            std::vector<defense::DetectionRecord> rows;
            int flagged_benign = 0;
            for (std::size_t i = 0; i < benign.size(); ++i) {
                for (const auto& s : det.squeezers) {
                    double sc = defense::fs_score(f, benign[i], {s});
                    rows.push_back({"benign_" + std::to_string(i), s.name(), sc, sc > det.threshold});
                }
                if (defense::fs_detect(f, benign[i], det).flagged) ++flagged_benign;
            }
            int flagged_adv = 0, n_adv = 0;
            if (!df_adv.empty()) {
                for (const auto& e : fs::directory_iterator(df_adv)) {
                    if (e.path().extension() != ".pgm" && e.path().extension() != ".ppm") continue;
                    nn::Image im{io::read_pnm(e.path().string()), {}};
                    auto d = defense::fs_detect(f, im, det);
                    for (const auto& s : det.squeezers) {
                        double sc = defense::fs_score(f, im, {s});
                        rows.push_back({e.path().filename().string(), s.name(), sc,
                                        sc > det.threshold});
                    }
                    if (d.flagged) ++flagged_adv;
                    ++n_adv;
                }
            }
            defense::write_detection_csv(df_out, rows);
            std::cout << "threshold " << det.threshold << ", benign flagged " << flagged_benign << "/"
                      << benign.size();
            if (n_adv) std::cout << ", adversarial flagged " << flagged_adv << "/" << n_adv;
            std::cout << ", wrote " << df_out << "\n";
            return 0;
        }
        if (ai->parsed()) {
            data::Dataset ds = data::load_dataset(ai_data);
            nn::Classifier f = nn::Classifier::load(ai_ckpt);
            interp::RtsMasker base = ai_masker.empty()
                                         ? interp::rts_train_masker(
                                               f, data::slice(ds, 0, 1500), interp::RtsTrainConfig{})
                                         : interp::RtsMasker::load(ai_masker);
            defense::AidConfig cfg;
            cfg.rounds = ai_rounds;
            cfg.aid_subset = ai_subset;
            cfg.seed = ai_seed;
            cfg.attack.interpreter = interp::InterpreterId::rts;
            cfg.attack.n_total = 150;
            cfg.attack.n_warm = 60;
            interp::RtsMasker robust =
                defense::aid_train(f, data::slice(ds, 0, 1500), base, cfg);
            robust.save(ai_out);
            std::cout << "saved distilled masker to " << ai_out << "\n";
            return 0;
        }
        if (rp->parsed()) {
            std::ifstream is(fs::path(rp_dir) / "summary.json");
            if (!is) {
                std::cerr << "no summary.json under " << rp_dir << "\n";
                return 2;
            }
            nlohmann::json j = nlohmann::json::parse(is);
            std::cout << "experiment: " << j.value("name", std::string("?")) << "\n";
            if (j.contains("holdout_accuracy"))
                std::cout << "holdout accuracy: " << j["holdout_accuracy"].get<double>() << "\n";
            std::printf("%-18s %-10s %-12s %6s %8s %8s %8s %8s\n", "attack", "kind", "interpreter",
                        "asr", "mc", "l1", "l2", "iou");
            for (auto& [k, v] : j["attacks"].items()) {
                std::printf("%-18s %-10s %-12s %6.2f %8.3f %8.4f %8.4f %8.3f\n", k.c_str(),
                            v.value("kind", std::string("?")).c_str(),
                            v.value("interpreter", std::string("?")).c_str(),
                            v.value("asr", 0.0),
                            v["mean_mc"].is_null() ? 0.0 : v["mean_mc"].get<double>(),
                            v.value("mean_l1_benign", 0.0), v.value("mean_l2_benign", 0.0),
                            v.value("mean_iou_benign", 0.0));
            }
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
