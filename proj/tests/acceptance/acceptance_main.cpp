// Acceptance suite: exercises the full pipeline on a deterministic desk-scale
// dataset and prints one PASS/FAIL line per criterion. Heavyweight artifacts
// (datasets, trained models) are cached under --workdir so re-runs are cheap.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <thread>
#include <vector>

#include "adv2/defenses.hpp"
#include "adv2/experiment.hpp"
#include "adv2/image_io.hpp"
#include "adv2/metrics.hpp"

using namespace adv2;
using attack::AttackConfig;
using attack::AttackOutcome;
using attack::MaskAttackConfig;
using interp::InterpreterId;
using nn::Classifier;
using nn::Image;

namespace fs = std::filesystem;

namespace {

struct Options {
    std::string workdir = "acceptance_work";
    int batch = 100;
    int pgd_batch = 200;
    int workers = 2;
    bool quick = false;  // reduced batches for calibration runs
    double lambda_grad = 0.02;
    double lambda_cam = 0.05;
    double lambda_gradcam = 0.05;
    double lambda_rts = 0.05;
    double lambda_mask = 1.0;
    int only = 0;  // run a single criterion (0 = all)
};

struct Check {
    int criterion;
    std::string text;
    bool pass;
};

std::vector<Check> g_checks;

void report(int criterion, bool pass, const std::string& text) {
    g_checks.push_back({criterion, text, pass});
    std::printf("%s criterion %d: %s\n", pass ? "PASS" : "FAIL", criterion, text.c_str());
    std::fflush(stdout);
}

void note(const std::string& text) {
    std::printf("  - %s\n", text.c_str());
    std::fflush(stdout);
}

void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
    workers = std::max(1, workers);
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errs(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            try {
                for (;;) {
                    int i = next.fetch_add(1);
                    if (i >= n) return;
                    fn(i);
                }
            } catch (...) {
                errs[static_cast<std::size_t>(w)] = std::current_exception();
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errs)
        if (e) std::rethrow_exception(e);
}

// ------------------------------------------------------------ environment

struct Lab {
    Options opt;
    data::Dataset dataset;
    Classifier f;        // pipeline model
    interp::RtsMasker masker;
    interp::RtsMasker aid_masker;
    double baseline_accuracy = 0.0;  // 10k-train regression model

    std::vector<Image> eval_images;  // correctly classified
    std::vector<int> eval_targets;   // seeded random target classes
    std::vector<std::uint64_t> eval_seeds;

    interp::MaskSolverConfig solver;

    AttackConfig config_for(InterpreterId id) const {
        AttackConfig c;
        c.epsilon = 0.031;
        c.alpha = 1.0 / 255;
        c.interpreter = id;
        switch (id) {
            case InterpreterId::grad:
                c.n_total = 300;
                c.n_warm = 100;
                c.lambda_int = opt.lambda_grad;
                c.label_smoothing = true;
                break;
            case InterpreterId::cam:
                c.n_total = 300;
                c.n_warm = 100;
                c.lambda_int = opt.lambda_cam;
                break;
            case InterpreterId::gradcam:
                c.n_total = 300;
                c.n_warm = 100;
                c.lambda_int = opt.lambda_gradcam;
                break;
            case InterpreterId::rts:
                c.n_total = 250;
                c.n_warm = 100;
                c.lambda_int = opt.lambda_rts;
                c.lambda_enc = 0.1;
                break;
            case InterpreterId::mask:
                c.n_total = 150;
                c.n_warm = 50;
                c.lambda_int = opt.lambda_mask;
                break;
            default:
                break;
        }
        return c;
    }

    MaskAttackConfig mask_config() const {
        MaskAttackConfig mc;
        mc.base = config_for(InterpreterId::mask);
        mc.n_step = 4;
        mc.n_reset = 50;
        mc.alpha_max = 0.08;
        mc.n_bs = 12;
        mc.solver = solver;
        return mc;
    }
};

data::SynthConfig desk_dataset_config() {
    data::SynthConfig sc;
    sc.kind = "rgb32";
    sc.signal_amplitude = 0.12;
    sc.fine_amplitude = 0.14;
    sc.color_contrast = 0.15;
    return sc;
}

Lab prepare(const Options& opt) {
    Lab lab;
    lab.opt = opt;
    fs::create_directories(opt.workdir);
    lab.solver.iterations = 100;
    lab.solver.seed = 0;

    std::printf("setup: dataset (rgb32 two-scale textures, 12000 images)\n");
    lab.dataset = data::make_synthetic(desk_dataset_config(), 12000, 42);

    const fs::path fpipe = fs::path(opt.workdir) / "classifier_pipe.ckpt";
    if (fs::exists(fpipe)) {
        lab.f = Classifier::load(fpipe.string());
        std::printf("setup: pipeline classifier loaded from cache\n");
    } else {
        std::printf("setup: training pipeline classifier (2000 images, 15 epochs)\n");
        std::vector<Image> train(lab.dataset.images.begin(), lab.dataset.images.begin() + 2000);
        nn::TrainConfig cfg;
        cfg.epochs = 15;
        cfg.lr = 2e-3;
        cfg.seed = 5;
        lab.f = nn::train_classifier(train, nn::arch_preset("cnn_rgb32"), cfg);
        lab.f.save(fpipe.string());
    }
    {
        std::vector<Image> hold(lab.dataset.images.begin() + 9500, lab.dataset.images.begin() + 10000);
        std::printf("setup: pipeline model holdout accuracy %.3f\n", nn::accuracy(lab.f, hold));
    }

    const fs::path fbase = fs::path(opt.workdir) / "baseline_accuracy.txt";
    if (fs::exists(fbase)) {
        std::ifstream is(fbase);
        is >> lab.baseline_accuracy;
    } else {
        std::printf("setup: training regression-baseline classifier (9500 images, 10 epochs)\n");
        std::vector<Image> train(lab.dataset.images.begin(), lab.dataset.images.begin() + 9500);
        std::vector<Image> hold(lab.dataset.images.begin() + 9500, lab.dataset.images.begin() + 10000);
        nn::TrainConfig cfg;
        cfg.epochs = 10;
        cfg.lr = 2e-3;
        cfg.seed = 7;
        nn::TrainReport rep;
        nn::train_classifier(train, nn::arch_preset("cnn_rgb32"), cfg, &rep, &hold);
        lab.baseline_accuracy = rep.holdout_accuracy;
        std::ofstream os(fbase);
        os << lab.baseline_accuracy << "\n";
    }
    std::printf("setup: 10k-train baseline holdout accuracy %.3f (floor 0.95)\n",
                lab.baseline_accuracy);

    const fs::path fmask = fs::path(opt.workdir) / "rts_masker.ckpt";
    if (fs::exists(fmask)) {
        lab.masker = interp::RtsMasker::load(fmask.string());
        std::printf("setup: rts masker loaded from cache\n");
    } else {
        std::printf("setup: training rts masker (1500 images, 3 epochs)\n");
        std::vector<Image> sub(lab.dataset.images.begin(), lab.dataset.images.begin() + 1500);
        interp::RtsTrainConfig cfg;
        cfg.epochs = 3;
        cfg.seed = 9;
        lab.masker = interp::rts_train_masker(lab.f, sub, cfg);
        lab.masker.save(fmask.string());
    }

    const fs::path faid = fs::path(opt.workdir) / "rts_masker_aid.ckpt";
    if (fs::exists(faid)) {
        lab.aid_masker = interp::RtsMasker::load(faid.string());
        std::printf("setup: distilled masker loaded from cache\n");
    } else {
        std::printf("setup: adversarial-distillation training of the masker\n");
        defense::AidConfig cfg;
        cfg.rounds = 2;
        cfg.int_epochs = 1;
        cfg.aid_epochs = 1;
        cfg.aid_subset = opt.quick ? 40 : 150;
        cfg.seed = 11;
        cfg.attack = lab.config_for(InterpreterId::rts);
        cfg.attack.n_total = 150;
        cfg.attack.n_warm = 60;
        cfg.rts.epochs = 1;
        cfg.rts.seed = 13;
        std::vector<Image> sub(lab.dataset.images.begin(), lab.dataset.images.begin() + 600);
        lab.aid_masker = defense::aid_train(lab.f, sub, lab.masker, cfg);
        lab.aid_masker.save(faid.string());
    }

    // evaluation pool: unseen images, correctly classified, seeded targets
    Rng rng(Rng::derive(42, 0xEBA7));
    for (std::size_t i = 10000; i < lab.dataset.images.size(); ++i) {
        if (static_cast<int>(lab.eval_images.size()) >= std::max(opt.batch, opt.pgd_batch)) break;
        const Image& im = lab.dataset.images[i];
        if (nn::predict_class(lab.f, im) != *im.label) continue;
        int c = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(lab.f.num_classes() - 1)));
        if (c >= *im.label) ++c;
        lab.eval_images.push_back(im);
        lab.eval_targets.push_back(c);
        lab.eval_seeds.push_back(Rng::derive(42, 0xA55 + i));
    }
    std::printf("setup: evaluation batch ready (%zu images)\n\n", lab.eval_images.size());
    return lab;
}

// ------------------------------------------------------------ batch helpers

std::vector<Tensor> interpret_batch(const Lab& lab, const std::vector<Image>& images,
                                    InterpreterId id, std::uint64_t seed_tag) {
    std::vector<Tensor> maps(images.size());
    parallel_for(static_cast<int>(images.size()), lab.opt.workers, [&](int i) {
        interp::MaskSolverConfig mc = lab.solver;
        mc.seed = Rng::derive(seed_tag, static_cast<std::uint64_t>(i));
        int c = nn::predict_class(lab.f, images[static_cast<std::size_t>(i)]);
        maps[static_cast<std::size_t>(i)] =
            interp::compute_map(lab.f, images[static_cast<std::size_t>(i)], id, c, &lab.masker, &mc)
                .values;
    });
    return maps;
}

struct Adv2Batch {
    std::vector<AttackOutcome> outcomes;
    std::vector<Tensor> maps;     // interpreter map of the crafted input
    std::vector<Tensor> targets;  // target maps used
};

enum class TargetMode { benign_self, random_patch, random_class };

Adv2Batch run_adv2_batch(const Lab& lab, InterpreterId id, TargetMode mode, int count,
                         const std::vector<Tensor>* benign_maps,
                         const interp::RtsMasker* masker_override = nullptr) {
    const interp::RtsMasker* masker = masker_override ? masker_override : &lab.masker;
    Adv2Batch out;
    out.outcomes.resize(static_cast<std::size_t>(count));
    out.maps.resize(static_cast<std::size_t>(count));
    out.targets.resize(static_cast<std::size_t>(count));
    parallel_for(count, lab.opt.workers, [&](int i) {
        const Image& x0 = lab.eval_images[static_cast<std::size_t>(i)];
        int c_t = lab.eval_targets[static_cast<std::size_t>(i)];
        std::uint64_t seed = lab.eval_seeds[static_cast<std::size_t>(i)];

        Tensor m_t;
        interp::MaskSolverConfig mc = lab.solver;
        mc.seed = Rng::derive(seed, 0x7A6);
        switch (mode) {
            case TargetMode::benign_self:
                m_t = (*benign_maps)[static_cast<std::size_t>(i)];
                break;
            case TargetMode::random_patch:
                m_t = metrics::random_patch_target(x0.pixels.dim(1), x0.pixels.dim(2), seed);
                break;
            case TargetMode::random_class:
                m_t = metrics::random_class_target(lab.f, lab.dataset.images, id, c_t, seed, masker,
                                                   &mc)
                          .map;
                break;
        }

        AttackConfig cfg = lab.config_for(id);
        cfg.target_class = c_t;
        cfg.seed = seed;
        AttackOutcome o;
        if (id == InterpreterId::mask) {
            MaskAttackConfig mcfg = lab.mask_config();
            mcfg.base = cfg;
            o = attack::adv2_mask_attack(lab.f, x0, c_t, m_t, mcfg);
        } else {
            o = attack::adv2_pgd(lab.f, x0, c_t, m_t, cfg, masker);
        }
        int cstar = nn::predict_class(lab.f, o.x_star);
        interp::MaskSolverConfig mc2 = lab.solver;
        mc2.seed = Rng::derive(seed, 0xF1A1);
        out.maps[static_cast<std::size_t>(i)] =
            interp::compute_map(lab.f, o.x_star, id, cstar, masker, &mc2).values;
        out.targets[static_cast<std::size_t>(i)] = m_t;
        out.outcomes[static_cast<std::size_t>(i)] = std::move(o);
    });
    return out;
}

double mean_l1(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += metrics::lp_distance(a[i], b[i], 1);
    return s / a.size();
}

double mean_iou(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += metrics::iou_score(a[i], b[i]);
    return s / a.size();
}

std::string iname(InterpreterId id) { return interp::to_string(id); }

}  // namespace

// ---------------------------------------------------------------- criteria

int main(int argc, char** argv) {
    Options opt;
    for (int i = 1; i < argc; ++i) {
        std::string a = argv[i];
        auto next = [&](double& v) { v = std::atof(argv[++i]); };
        if (a == "--workdir" && i + 1 < argc) opt.workdir = argv[++i];
        else if (a == "--batch" && i + 1 < argc) opt.batch = std::atoi(argv[++i]);
        else if (a == "--pgd-batch" && i + 1 < argc) opt.pgd_batch = std::atoi(argv[++i]);
        else if (a == "--workers" && i + 1 < argc) opt.workers = std::atoi(argv[++i]);
        else if (a == "--only" && i + 1 < argc) opt.only = std::atoi(argv[++i]);
        else if (a == "--lambda-grad" && i + 1 < argc) next(opt.lambda_grad);
        else if (a == "--lambda-cam" && i + 1 < argc) next(opt.lambda_cam);
        else if (a == "--lambda-gradcam" && i + 1 < argc) next(opt.lambda_gradcam);
        else if (a == "--lambda-rts" && i + 1 < argc) next(opt.lambda_rts);
        else if (a == "--lambda-mask" && i + 1 < argc) next(opt.lambda_mask);
        else if (a == "--quick") {
            opt.quick = true;
            opt.batch = 12;
            opt.pgd_batch = 24;
        }
    }
    auto run = [&](int c) { return opt.only == 0 || opt.only == c; };

    Lab lab = prepare(opt);
    const int nb = std::min<int>(opt.batch, static_cast<int>(lab.eval_images.size()));
    const int npgd = std::min<int>(opt.pgd_batch, static_cast<int>(lab.eval_images.size()));

    std::vector<InterpreterId> families = {InterpreterId::grad, InterpreterId::cam,
                                           InterpreterId::gradcam, InterpreterId::rts,
                                           InterpreterId::mask};
    std::vector<InterpreterId> transfer_set = {InterpreterId::grad, InterpreterId::cam,
                                               InterpreterId::rts, InterpreterId::mask};

    // shared precomputation: benign maps per interpreter
    std::vector<Image> batch_images(lab.eval_images.begin(), lab.eval_images.begin() + nb);
    std::map<InterpreterId, std::vector<Tensor>> benign;
    for (auto id : families) benign[id] = interpret_batch(lab, batch_images, id, 0xBE319);

    // ---- criterion 1: pgd baseline
    std::vector<AttackOutcome> pgd(static_cast<std::size_t>(npgd));
    {
        parallel_for(npgd, opt.workers, [&](int i) {
            AttackConfig cfg;
            cfg.epsilon = 0.031;
            cfg.alpha = 1.0 / 255;
            cfg.n_total = 400;
            pgd[static_cast<std::size_t>(i)] =
                attack::pgd_attack(lab.f, lab.eval_images[static_cast<std::size_t>(i)],
                                   lab.eval_targets[static_cast<std::size_t>(i)], cfg);
        });
        metrics::BatchStats st = metrics::asr_mc(pgd);
        char buf[256];
        std::snprintf(buf, sizeof buf,
                      "pgd baseline: asr %.3f (floor 0.95), mean mc %.3f (floor 0.9), n=%d",
                      st.asr, st.mean_mc.value_or(0.0), npgd);
        if (run(1))
            report(1, st.asr >= 0.95 && st.mean_mc.value_or(0.0) >= 0.9, buf);
    }

    // pgd maps per interpreter over the first nb outcomes
    std::vector<Image> pgd_images;
    for (int i = 0; i < nb; ++i) pgd_images.push_back(pgd[static_cast<std::size_t>(i)].x_star);
    std::map<InterpreterId, std::vector<Tensor>> pgd_maps;
    for (auto id : families) pgd_maps[id] = interpret_batch(lab, pgd_images, id, 0x96D);
    double pgd_asr_nb;
    {
        std::vector<AttackOutcome> head(pgd.begin(), pgd.begin() + nb);
        pgd_asr_nb = metrics::asr_mc(head).asr;
    }

    // ---- criteria 2 + 3 (+ inputs for 5 and 8)
    std::map<InterpreterId, Adv2Batch> self_batches;
    bool c2 = true, c3 = true;
    for (auto id : families) {
        self_batches[id] = run_adv2_batch(lab, id, TargetMode::benign_self, nb, &benign[id]);
        const Adv2Batch& b = self_batches[id];
        metrics::BatchStats st = metrics::asr_mc(b.outcomes);
        double l1 = mean_l1(b.maps, benign[id]);
        double l1p = mean_l1(pgd_maps[id], benign[id]);
        double iou = mean_iou(b.maps, benign[id]);
        bool ok2 = st.asr >= 0.90 && st.asr >= pgd_asr_nb - 0.05;
        bool ok3 = l1 <= 0.5 * l1p && iou >= 0.5;
        c2 = c2 && ok2;
        c3 = c3 && ok3;
        char buf[256];
        std::snprintf(buf, sizeof buf,
                      "%s: asr %.3f mc %.3f | l1 %.4f (pgd %.4f, ratio %.2f) iou %.3f%s%s",
                      iname(id).c_str(), st.asr, st.mean_mc.value_or(0.0), l1, l1p,
                      l1p > 0 ? l1 / l1p : 0.0, iou, ok2 ? "" : " [asr miss]",
                      ok3 ? "" : " [map miss]");
        note(buf);
    }
    if (run(2))
        report(2, c2, "adv2 prediction parity: asr within 5 points of pgd and >= 0.90 per interpreter");
    if (run(3))
        report(3, c3, "adv2 interpretation quality: l1 <= 0.5x pgd and iou >= 0.5 per interpreter");

    // ---- criterion 4: random targets
    if (run(4)) {
        bool ok = true;
        for (auto id : transfer_set) {
            for (TargetMode mode : {TargetMode::random_patch, TargetMode::random_class}) {
                Adv2Batch b = run_adv2_batch(lab, id, mode, nb, &benign[id]);
                metrics::BatchStats st = metrics::asr_mc(b.outcomes);
                double to_target = mean_l1(b.maps, b.targets);
                double to_benign = mean_l1(b.maps, benign[id]);
                bool good = st.asr >= 0.90 && to_target < to_benign;
                ok = ok && good;
                char buf[256];
                std::snprintf(buf, sizeof buf, "%s %s: asr %.3f, l1 to target %.4f vs benign %.4f%s",
                              iname(id).c_str(),
                              mode == TargetMode::random_patch ? "patch" : "class", st.asr,
                              to_target, to_benign, good ? "" : " [miss]");
                note(buf);
            }
        }
        report(4, ok, "random-target feasibility: asr >= 0.90 and target-l1 < benign-l1");
    }

    // ---- criterion 5: transferability
    if (run(5)) {
        std::vector<std::vector<std::vector<Tensor>>> adv_maps(transfer_set.size());
        std::vector<std::vector<Tensor>> benign_maps(transfer_set.size());
        for (std::size_t t = 0; t < transfer_set.size(); ++t)
            benign_maps[t] = benign[transfer_set[t]];
        for (std::size_t s = 0; s < transfer_set.size(); ++s) {
            std::vector<Image> crafted;
            for (int i = 0; i < nb; ++i)
                crafted.push_back(self_batches[transfer_set[s]].outcomes[static_cast<std::size_t>(i)].x_star);
            adv_maps[s].resize(transfer_set.size());
            for (std::size_t t = 0; t < transfer_set.size(); ++t)
                adv_maps[s][t] = s == t ? self_batches[transfer_set[s]].maps
                                        : interpret_batch(lab, crafted, transfer_set[t],
                                                          0x77A + 31 * s + t);
        }
        Tensor M = metrics::transfer_matrix(adv_maps, benign_maps);
        bool ok = true;
        for (std::size_t s = 0; s < transfer_set.size(); ++s) {
            double diag = M[s * transfer_set.size() + s];
            double off = 0;
            for (std::size_t t = 0; t < transfer_set.size(); ++t)
                if (t != s) off += M[s * transfer_set.size() + t];
            off /= transfer_set.size() - 1;
            char buf[160];
            std::snprintf(buf, sizeof buf, "%s row: diag %.4f vs off-diag mean %.4f",
                          iname(transfer_set[s]).c_str(), diag, off);
            note(buf);
            ok = ok && diag < off;
        }
        report(5, ok, "transferability: every diagonal entry below its row's off-diagonal mean");
    }

    // ---- criterion 6: path-integral coupling bound
    if (run(6)) {
        Rng rng(0x6a6);
        bool ok = true;
        double max_violation = -1e9;
        int steps = 256;
        for (int t = 0; t < 50; ++t) {
            const Image& x0 = lab.eval_images[static_cast<std::size_t>(t % nb)];
            Tensor xs = x0.pixels;
            for (std::size_t i = 0; i < xs.size(); ++i)
                xs[i] = std::clamp(xs[i] + rng.uniform(-0.031, 0.031), 0.0, 1.0);
            int c = nn::predict_class(lab.f, x0);
            Tensor diff = xs - x0.pixels;
            Tensor v(xs.shape());
            for (int k = 0; k < steps; ++k) {
                double tt = (k + 0.5) / steps;
                Tensor xt = x0.pixels;
                axpy(xt, tt, diff);
                Tensor g = nn::input_gradient(lab.f, Image{xt, {}}, c, {});
                axpy(v, 1.0 / steps, g);
            }
            double l_prd = 0, l_int = 0;
            for (std::size_t i = 0; i < v.size(); ++i) {
                l_prd += diff[i] * v[i];
                l_int += std::fabs(diff[i] * v[i]);
            }
            max_violation = std::max(max_violation, l_prd - l_int);
            ok = ok && l_prd <= l_int + 1e-4;
        }
        char buf[160];
        std::snprintf(buf, sizeof buf,
                      "path-integral bound: max(l_prd - l_int) = %.2e over 50 pairs (limit 1e-4)",
                      max_violation);
        report(6, ok, buf);
    }

    // ---- criterion 7: bilevel gradient identity
    if (run(7)) {
        Rng rng(0x7a7);
        bool ok = true;
        double worst = 0;
        for (int inst = 0; inst < 20; ++inst) {
            const std::size_t n = 3;
            std::vector<std::vector<double>> Q(n, std::vector<double>(n, 0.0)), B(n, std::vector<double>(n));
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    Q[i][j] = rng.uniform(-0.3, 0.3);
                    B[i][j] = rng.uniform(-1.0, 1.0);
                }
                Q[i][i] += 2.0;
            }
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < i; ++j) Q[i][j] = Q[j][i];
            auto fxy = [&](const std::vector<double>& x, const std::vector<double>& y) {
                double s = 0;
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < n; ++j) s += 0.5 * y[i] * Q[i][j] * y[j];
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < n; ++j) s -= y[i] * B[i][j] * x[j];
                return s;
            };
            auto inner = [&](const std::vector<double>& x) {
                std::vector<double> rhs(n, 0.0);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < n; ++j) rhs[i] += B[i][j] * x[j];
                std::vector<std::vector<double>> M = Q;
                for (std::size_t c = 0; c < n; ++c) {
                    std::size_t piv = c;
                    for (std::size_t r = c + 1; r < n; ++r)
                        if (std::fabs(M[r][c]) > std::fabs(M[piv][c])) piv = r;
                    std::swap(M[piv], M[c]);
                    std::swap(rhs[piv], rhs[c]);
                    for (std::size_t r = 0; r < n; ++r) {
                        if (r == c) continue;
                        double fct = M[r][c] / M[c][c];
                        for (std::size_t k = c; k < n; ++k) M[r][k] -= fct * M[c][k];
                        rhs[r] -= fct * rhs[c];
                    }
                }
                for (std::size_t i = 0; i < n; ++i) rhs[i] /= M[i][i];
                return rhs;
            };
            std::vector<double> x0(n), g0(n);
            for (auto& v : x0) v = rng.uniform(-1.0, 1.0);
            for (auto& v : g0) v = rng.uniform(-1.0, 1.0);
            std::vector<double> y0 = inner(x0);
            std::vector<double> got = attack::lookahead_gradient(fxy, x0, y0, g0);
            auto G = [&](const std::vector<double>& x) {
                std::vector<double> y = inner(x);
                double s = 0;
                for (std::size_t i = 0; i < n; ++i) s += 0.5 * (y[i] - g0[i]) * (y[i] - g0[i]);
                return s;
            };
            const double h = 1e-5;
            for (std::size_t j = 0; j < n; ++j) {
                auto xp = x0, xm = x0;
                xp[j] += h;
                xm[j] -= h;
                double fd = (G(xp) - G(xm)) / (2 * h);
                worst = std::max(worst, std::fabs(fd - got[j]));
                ok = ok && std::fabs(fd - got[j]) < 1e-4;
            }
        }
        char buf[160];
        std::snprintf(buf, sizeof buf,
                      "bilevel gradient identity: worst |fd - formula| = %.2e over 20 instances",
                      worst);
        report(7, ok, buf);
    }

    // ---- criterion 8: feature squeezing, basic vs adaptive
    if (run(8)) {
        auto det = defense::default_detector();
        const Adv2Batch& basic = self_batches.at(InterpreterId::rts);
        double basic_iou = mean_iou(basic.maps, benign[InterpreterId::rts]);
        bool ok = true;
        for (const auto& s : det.squeezers) {
            // per-squeezer threshold: benign 95th percentile
            std::vector<double> bs;
            for (const auto& im : batch_images) bs.push_back(defense::fs_score(lab.f, im, {s}));
            std::sort(bs.begin(), bs.end());
            double thr = bs[static_cast<std::size_t>(std::floor(0.95 * (bs.size() - 1)))];

            int basic_hits = 0;
            for (const auto& o : basic.outcomes)
                if (defense::fs_score(lab.f, o.x_star, {s}) > thr) ++basic_hits;

            std::vector<AttackOutcome> adapt(static_cast<std::size_t>(nb));
            std::vector<Tensor> adapt_maps(static_cast<std::size_t>(nb));
            parallel_for(nb, opt.workers, [&](int i) {
                const Image& x0 = lab.eval_images[static_cast<std::size_t>(i)];
                int c_t = lab.eval_targets[static_cast<std::size_t>(i)];
                AttackConfig cfg = lab.config_for(InterpreterId::rts);
                cfg.seed = lab.eval_seeds[static_cast<std::size_t>(i)];
                cfg.target_class = c_t;
                const Tensor& m_t = benign[InterpreterId::rts][static_cast<std::size_t>(i)];
                AttackOutcome o;
                if (s.kind == defense::SqueezerKind::bit_depth)
                    o = defense::adaptive_adv2_bitdepth(lab.f, x0, c_t, m_t, s.bits, cfg, 2.0,
                                                        &lab.masker)
                            .outcome;
                else
                    o = defense::adaptive_adv2_smoothing(lab.f, x0, c_t, m_t, s, cfg, 1.0,
                                                         &lab.masker);
                int cstar = nn::predict_class(lab.f, o.x_star);
                adapt_maps[static_cast<std::size_t>(i)] =
                    interp::compute_map(lab.f, o.x_star, InterpreterId::rts, cstar, &lab.masker)
                        .values;
                adapt[static_cast<std::size_t>(i)] = std::move(o);
            });
            int adapt_hits = 0;
            for (const auto& o : adapt)
                if (defense::fs_score(lab.f, o.x_star, {s}) > thr) ++adapt_hits;
            double adapt_iou = mean_iou(adapt_maps, benign[InterpreterId::rts]);
            bool good = adapt_hits < basic_hits && adapt_iou >= basic_iou - 0.1;
            ok = ok && good;
            char buf[200];
            std::snprintf(buf, sizeof buf,
                          "%s: basic detection %d/%d, adaptive %d/%d, iou %.3f vs basic %.3f%s",
                          s.name().c_str(), basic_hits, nb, adapt_hits, nb, adapt_iou, basic_iou,
                          good ? "" : " [miss]");
            note(buf);
        }
        report(8, ok, "adaptive evasion: detection strictly below basic, iou degradation <= 0.1");
    }

    // ---- criterion 9: adversarial interpretation distillation
    if (run(9)) {
        std::vector<Tensor> aid_benign(static_cast<std::size_t>(nb));
        parallel_for(nb, opt.workers, [&](int i) {
            aid_benign[static_cast<std::size_t>(i)] =
                interp::rts_map(lab.aid_masker, batch_images[static_cast<std::size_t>(i)]).values;
        });
        double drift = mean_l1(aid_benign, benign[InterpreterId::rts]);

        Adv2Batch vs_aid =
            run_adv2_batch(lab, InterpreterId::rts, TargetMode::benign_self, nb, &aid_benign,
                           &lab.aid_masker);
        double iou_aid = mean_iou(vs_aid.maps, aid_benign);
        double iou_van = mean_iou(self_batches.at(InterpreterId::rts).maps,
                                  benign[InterpreterId::rts]);
        bool ok = iou_aid <= iou_van - 0.15 && drift <= 0.1;
        char buf[200];
        std::snprintf(buf, sizeof buf,
                      "distilled masker: attack iou %.3f vs vanilla %.3f (gap floor 0.15), "
                      "benign drift %.4f (cap 0.1)",
                      iou_aid, iou_van, drift);
        report(9, ok, buf);
    }

    // ---- criterion 10: unit/property bundle
    if (run(10)) {
        bool ok = true;

        // IG completeness on 10 eval images
        for (int i = 0; i < std::min(10, nb); ++i) {
            const Image& im = batch_images[static_cast<std::size_t>(i)];
            int c = nn::predict_class(lab.f, im);
            Image black{Tensor(im.pixels.shape()), {}};
            interp::IgResult r = interp::integrated_gradients(lab.f, im, black, c, 256);
            double want = r.fc_x - r.fc_base;
            if (std::fabs(r.raw_sum - want) > 0.02 * std::fabs(want)) {
                ok = false;
                note("ig completeness violated at image " + std::to_string(i));
            }
        }

        // CAM spatial-sum identity on 50 images
        for (int i = 0; i < std::min(50, nb); ++i) {
            const Image& im = batch_images[static_cast<std::size_t>(i % nb)];
            int c = lab.eval_targets[static_cast<std::size_t>(i % nb)];
            Tensor raw = interp::cam_map_raw(lab.f, im, c);
            nn::Forward fw = nn::forward_graph(lab.f, ag::constant(im.pixels));
            double z = fw.logits->value[static_cast<std::size_t>(c)];
            double b = lab.f.head_bias()[static_cast<std::size_t>(c)];
            if (std::fabs(raw.sum() - (z - b)) > 1e-4) {
                ok = false;
                note("cam spatial-sum identity violated at image " + std::to_string(i));
            }
        }

        // warp identity + integer shift oracle
        {
            const Tensor& img = batch_images[0].pixels;
            Tensor zero({2, img.dim(1), img.dim(2)});
            Image w0 = attack::spatial_warp(Image{img, {}}, zero);
            for (std::size_t i = 0; i < img.size(); ++i)
                if (w0.pixels[i] != img[i]) { ok = false; break; }
            Tensor shift = Tensor::full({2, img.dim(1), img.dim(2)}, 0.0);
            for (int i = 0; i < img.dim(1) * img.dim(2); ++i) shift[static_cast<std::size_t>(i)] = 1.0;
            Image w1 = attack::spatial_warp(Image{img, {}}, shift);
            for (int y = 0; y + 1 < img.dim(1); ++y)
                for (int x = 0; x < img.dim(2); ++x)
                    if (w1.pixels.at(0, y, x) != img.at(0, y + 1, x)) { ok = false; }
        }

        // flow-loss brute-force oracle
        {
            Rng rng(0xF10);
            Tensor fl({2, 6, 7});
            for (std::size_t i = 0; i < fl.size(); ++i) fl[i] = rng.uniform(-2.0, 2.0);
            double brute = 0;
            static const int dy[4] = {1, -1, 0, 0}, dx[4] = {0, 0, 1, -1};
            for (int y = 0; y < 6; ++y)
                for (int x = 0; x < 7; ++x)
                    for (int k = 0; k < 4; ++k) {
                        int ny = y + dy[k], nx = x + dx[k];
                        if (ny < 0 || ny >= 6 || nx < 0 || nx >= 7) continue;
                        double a = fl[static_cast<std::size_t>(0) * 42 + y * 7 + x] -
                                   fl[static_cast<std::size_t>(0) * 42 + ny * 7 + nx];
                        double b = fl[static_cast<std::size_t>(1) * 42 + y * 7 + x] -
                                   fl[static_cast<std::size_t>(1) * 42 + ny * 7 + nx];
                        brute += std::sqrt(a * a + b * b);
                    }
            if (std::fabs(attack::flow_loss(fl) - brute) > 1e-9) {
                ok = false;
                note("flow loss oracle mismatch");
            }
        }

        // ball and range invariants over every outcome this run produced
        {
            int checked = 0;
            auto check_outcome = [&](const AttackOutcome& o, const Image& x0) {
                if (linf_dist(o.x_star.pixels, x0.pixels) > 0.031 + 1e-6) ok = false;
                if (o.x_star.pixels.min() < 0.0 || o.x_star.pixels.max() > 1.0) ok = false;
                ++checked;
            };
            for (int i = 0; i < npgd; ++i)
                check_outcome(pgd[static_cast<std::size_t>(i)], lab.eval_images[static_cast<std::size_t>(i)]);
            for (auto& [id, b] : self_batches)
                for (int i = 0; i < nb; ++i)
                    check_outcome(b.outcomes[static_cast<std::size_t>(i)],
                                  lab.eval_images[static_cast<std::size_t>(i)]);
            note("ball/range invariants checked on " + std::to_string(checked) + " outcomes");
        }

        // determinism: a small experiment reproduces its summary byte-for-byte
        {
            auto spec_text = [&](const std::string& out) {
                return std::string(R"({
                  "name": "det",
                  "dataset_synth": {"kind": "gray28", "count": 140, "signal_amplitude": 0.2},
                  "classifier": {"train": {"arch": "cnn_gray28", "epochs": 2, "seed": 3, "holdout": 28}},
                  "interpreters": ["grad"],
                  "attacks": [{"id": "adv2_grad", "kind": "adv2",
                               "config": {"n_total": 30, "n_warm": 15, "lambda_int": 0.05,
                                          "interpreter": "grad"}}],
                  "images": {"from": 0, "count": 2},
                  "output_dir": ")") + out + R"(", "seed": 4, "workers": 2})";
            };
            fs::path o1 = fs::path(opt.workdir) / "det1";
            fs::path o2 = fs::path(opt.workdir) / "det2";
            fs::remove_all(o1);
            fs::remove_all(o2);
            std::vector<std::string> errs;
            auto s1 = experiment::validate_spec(spec_text(o1.string()), &errs);
            auto s2 = experiment::validate_spec(spec_text(o2.string()), &errs);
            if (!s1 || !s2) {
                ok = false;
            } else {
                s2->workers = 1;
                auto r1 = experiment::run_experiment(*s1);
                auto r2 = experiment::run_experiment(*s2);
                auto bytes = [](const std::string& p) {
                    std::ifstream is(p, std::ios::binary);
                    return std::string(std::istreambuf_iterator<char>(is),
                                       std::istreambuf_iterator<char>());
                };
                if (r1.exit_code != 0 || r2.exit_code != 0 ||
                    bytes(r1.summary_path) != bytes(r2.summary_path)) {
                    ok = false;
                    note("determinism check failed");
                }
            }
        }

        report(10, ok,
               "unit/property bundle: ig completeness, cam identity, warp/flow oracles, "
               "ball+range invariants, summary determinism");
    }

    // regression baseline from the training-scale example
    std::printf("\nprecondition: 10k-train baseline accuracy %.3f (floor 0.95) -> %s\n",
                lab.baseline_accuracy, lab.baseline_accuracy >= 0.95 ? "ok" : "MISS");

    int failures = 0;
    for (const auto& c : g_checks)
        if (!c.pass) ++failures;
    if (lab.baseline_accuracy < 0.95) ++failures;
    std::printf("acceptance: %zu checks, %d failures\n", g_checks.size(), failures);
    return failures == 0 ? 0 : 1;
}
