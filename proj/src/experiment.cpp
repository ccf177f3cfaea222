#include "adv2/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>

#include <json.hpp>

#include "adv2/image_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace adv2::experiment {

using attack::AttackConfig;
using attack::AttackOutcome;
using interp::InterpreterId;
using nn::Classifier;
using nn::Image;

namespace {

AttackConfig attack_config_from_json(const json& j) {
    return AttackConfig::from_json(j.dump());
}

json attack_config_to_json(const AttackConfig& c) { return json::parse(c.to_json()); }

void parallel_for(int n, int workers, const std::atomic<bool>* cancel,
                  const std::function<void(int)>& fn) {
    workers = std::max(1, workers);
    if (workers == 1) {
        for (int i = 0; i < n; ++i) {
            if (cancel && cancel->load()) return;
            fn(i);
        }
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            try {
                for (;;) {
                    if (cancel && cancel->load()) return;
                    int i = next.fetch_add(1);
                    if (i >= n) return;
                    fn(i);
                }
            } catch (...) {
                errors[static_cast<std::size_t>(w)] = std::current_exception();
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace

ExperimentSpec ExperimentSpec::from_json_text(const std::string& text,
                                              std::vector<std::string>* errors) {
    ExperimentSpec s;
    json j;
    try {
        j = json::parse(text);
    } catch (const std::exception& e) {
        if (errors) errors->push_back(std::string("json parse error: ") + e.what());
        return s;
    }
    auto err = [&](const std::string& m) {
        if (errors) errors->push_back(m);
    };
    try {
        s.name = j.value("name", s.name);
        s.dataset_dir = j.value("dataset", std::string());
        if (j.contains("dataset_synth")) {
            data::SynthConfig sc;
            const json& d = j["dataset_synth"];
            sc.kind = d.value("kind", sc.kind);
            sc.num_classes = d.value("num_classes", sc.num_classes);
            sc.signal_amplitude = d.value("signal_amplitude", sc.signal_amplitude);
            sc.fine_amplitude = d.value("fine_amplitude", sc.fine_amplitude);
            sc.fine_period = d.value("fine_period", sc.fine_period);
            sc.background_amplitude = d.value("background_amplitude", sc.background_amplitude);
            sc.pixel_noise = d.value("pixel_noise", sc.pixel_noise);
            sc.color_contrast = d.value("color_contrast", sc.color_contrast);
            sc.object_lift = d.value("object_lift", sc.object_lift);
            sc.distractors = d.value("distractors", sc.distractors);
            s.synth = sc;
            s.synth_count = d.value("count", s.synth_count);
        }
        if (j.contains("classifier")) {
            const json& c = j["classifier"];
            s.checkpoint = c.value("checkpoint", std::string());
            if (c.contains("train")) {
                const json& t = c["train"];
                s.train_arch = t.value("arch", std::string("cnn_gray28"));
                s.train.epochs = t.value("epochs", s.train.epochs);
                s.train.batch_size = t.value("batch_size", s.train.batch_size);
                s.train.lr = t.value("lr", s.train.lr);
                s.train.noise_aug = t.value("noise_aug", s.train.noise_aug);
                s.train.seed = t.value("seed", s.train.seed);
                s.holdout = t.value("holdout", s.holdout);
            }
        }
        s.rts_masker_path = j.value("rts_masker", std::string());
        if (j.contains("rts_train")) {
            const json& r = j["rts_train"];
            s.rts_train.epochs = r.value("epochs", s.rts_train.epochs);
            s.rts_train.lr = r.value("lr", s.rts_train.lr);
            s.rts_train.seed = r.value("seed", s.rts_train.seed);
            s.rts_train_subset = r.value("subset", s.rts_train_subset);
        }
        for (const auto& name : j.value("interpreters", std::vector<std::string>{}))
            s.interpreters.push_back(interp::interpreter_from_string(name));
        if (j.contains("mask_solver")) {
            const json& m = j["mask_solver"];
            s.mask_solver.lambda_tv = m.value("lambda_tv", s.mask_solver.lambda_tv);
            s.mask_solver.lambda_sparsity = m.value("lambda_sparsity", s.mask_solver.lambda_sparsity);
            s.mask_solver.noise_sigma = m.value("noise_sigma", s.mask_solver.noise_sigma);
            s.mask_solver.jitter = m.value("jitter", s.mask_solver.jitter);
            s.mask_solver.jitter_count = m.value("jitter_count", s.mask_solver.jitter_count);
            s.mask_solver.iterations = m.value("iterations", s.mask_solver.iterations);
            s.mask_solver.step_size = m.value("step_size", s.mask_solver.step_size);
        }
        for (const auto& a : j.value("attacks", json::array())) {
            AttackEntry e;
            e.id = a.value("id", std::string());
            e.kind = a.value("kind", e.kind);
            e.target = a.value("target", e.target);
            if (a.contains("config")) e.config = attack_config_from_json(a["config"]);
            if (e.kind == "pgd") e.config.n_warm = 0;  // warm phase is meaningless here
            if (e.kind == "adv2_mask") {
                e.mask_config.base = e.config;
                if (a.contains("mask")) {
                    const json& m = a["mask"];
                    e.mask_config.n_step = m.value("n_step", e.mask_config.n_step);
                    e.mask_config.n_reset = m.value("n_reset", e.mask_config.n_reset);
                    e.mask_config.xi = m.value("xi", e.mask_config.xi);
                    e.mask_config.alpha_max = m.value("alpha_max", e.mask_config.alpha_max);
                    e.mask_config.n_bs = m.value("n_bs", e.mask_config.n_bs);
                }
                e.mask_config.solver = s.mask_solver;
            }
            if (e.kind == "stadv") {
                attack::StadvConfig sc;
                sc.interpreter = e.config.interpreter;
                sc.lambda_int = e.config.lambda_int;
                sc.seed = e.config.seed;
                if (a.contains("stadv")) {
                    const json& t = a["stadv"];
                    sc.tau_flow = t.value("tau_flow", sc.tau_flow);
                    sc.n_total = t.value("n_total", sc.n_total);
                    sc.adam_lr = t.value("adam_lr", sc.adam_lr);
                }
                sc.solver = s.mask_solver;
                e.stadv_config = sc;
            }
            s.attacks.push_back(std::move(e));
        }
        if (j.contains("images")) {
            s.batch_from = j["images"].value("from", s.batch_from);
            s.batch_count = j["images"].value("count", s.batch_count);
        }
        s.output_dir = j.value("output_dir", s.output_dir);
        s.seed = j.value("seed", s.seed);
        s.workers = j.value("workers", s.workers);
        s.export_maps = j.value("export_maps", s.export_maps);
    } catch (const std::exception& e) {
        err(std::string("spec field error: ") + e.what());
    }
    return s;
}

std::string ExperimentSpec::to_json_text() const {
    ordered_json j;
    j["name"] = name;
    if (!dataset_dir.empty()) j["dataset"] = dataset_dir;
    if (synth) {
        j["dataset_synth"] = {{"kind", synth->kind},
                              {"count", synth_count},
                              {"num_classes", synth->num_classes},
                              {"signal_amplitude", synth->signal_amplitude},
                              {"fine_amplitude", synth->fine_amplitude},
                              {"fine_period", synth->fine_period},
                              {"background_amplitude", synth->background_amplitude},
                              {"pixel_noise", synth->pixel_noise},
                              {"color_contrast", synth->color_contrast},
                              {"object_lift", synth->object_lift},
                              {"distractors", synth->distractors}};
    }
    ordered_json c;
    if (!checkpoint.empty()) c["checkpoint"] = checkpoint;
    if (!train_arch.empty())
        c["train"] = {{"arch", train_arch},     {"epochs", train.epochs},
                      {"batch_size", train.batch_size}, {"lr", train.lr},
                      {"noise_aug", train.noise_aug},   {"seed", train.seed},
                      {"holdout", holdout}};
    j["classifier"] = c;
    if (!rts_masker_path.empty()) j["rts_masker"] = rts_masker_path;
    std::vector<std::string> iname;
    for (auto id : interpreters) iname.push_back(interp::to_string(id));
    j["interpreters"] = iname;
    j["attacks"] = json::array();
    for (const auto& a : attacks) {
        ordered_json e;
        e["id"] = a.id;
        e["kind"] = a.kind;
        e["target"] = a.target;
        e["config"] = attack_config_to_json(a.config);
        j["attacks"].push_back(e);
    }
    j["images"] = {{"from", batch_from}, {"count", batch_count}};
    j["output_dir"] = output_dir;
    j["seed"] = seed;
    j["workers"] = workers;
    j["export_maps"] = export_maps;
    return j.dump(2);
}

std::vector<std::string> ExperimentSpec::validate() const {
    std::vector<std::string> errors;
    if (dataset_dir.empty() && !synth)
        errors.push_back("dataset: missing (set 'dataset' path or 'dataset_synth')");
    if (!dataset_dir.empty() && !fs::exists(fs::path(dataset_dir)))
        errors.push_back("dataset: path does not exist: " + dataset_dir);
    if (checkpoint.empty() && train_arch.empty())
        errors.push_back("classifier: missing (set 'checkpoint' or 'train')");
    if (!checkpoint.empty() && !fs::exists(fs::path(checkpoint)))
        errors.push_back("classifier.checkpoint: file does not exist: " + checkpoint);
    if (!rts_masker_path.empty() && !fs::exists(fs::path(rts_masker_path)))
        errors.push_back("rts_masker: file does not exist: " + rts_masker_path);
    if (interpreters.empty()) errors.push_back("interpreters: empty list");
    std::vector<std::string> seen;
    for (const auto& a : attacks) {
        if (a.id.empty()) errors.push_back("attack: missing id");
        if (std::find(seen.begin(), seen.end(), a.id) != seen.end())
            errors.push_back("attack " + a.id + ": duplicate id");
        seen.push_back(a.id);
        if (a.kind != "pgd" && a.kind != "adv2" && a.kind != "adv2_mask" && a.kind != "stadv")
            errors.push_back("attack " + a.id + ": unknown kind " + a.kind);
        if (a.target != "benign_self" && a.target != "random_patch" && a.target != "random_class")
            errors.push_back("attack " + a.id + ": unknown target " + a.target);
        if (a.kind != "pgd" &&
            std::find(interpreters.begin(), interpreters.end(), a.config.interpreter) ==
                interpreters.end())
            errors.push_back("attack " + a.id + ": interpreter " +
                             interp::to_string(a.config.interpreter) +
                             " not in the interpreter list");
        if (a.config.epsilon < 0 || a.config.epsilon > 1)
            errors.push_back("attack " + a.id + ": epsilon out of [0,1]");
        if (a.config.n_warm > a.config.n_total)
            errors.push_back("attack " + a.id + ": n_warm exceeds n_total");
    }
    if (batch_count < 1) errors.push_back("images.count: must be >= 1");
    if (workers < 1) errors.push_back("workers: must be >= 1");
    if (output_dir.empty()) errors.push_back("output_dir: empty");
    return errors;
}

std::optional<ExperimentSpec> validate_spec(const std::string& json_text,
                                            std::vector<std::string>* errors) {
    std::vector<std::string> errs;
    ExperimentSpec s = ExperimentSpec::from_json_text(json_text, &errs);
    if (errs.empty()) {
        auto more = s.validate();
        errs.insert(errs.end(), more.begin(), more.end());
    }
    if (errors) *errors = errs;
    if (!errs.empty()) return std::nullopt;
    return s;
}

// --------------------------------------------------------------- figures

void write_bar_chart(const std::string& png_path, const std::string& csv_path,
                     const std::vector<std::pair<std::string, double>>& rows,
                     const std::string& value_name) {
    std::ofstream csv(csv_path);
    csv << "label," << value_name << "\n";
    double vmax = 1e-12;
    for (const auto& [k, v] : rows) {
        csv << k << "," << v << "\n";
        vmax = std::max(vmax, std::fabs(v));
    }
    const int row_h = 14, gap = 4, width = 420, left = 8;
    int height = gap + static_cast<int>(rows.size()) * (row_h + gap);
    Tensor img = Tensor::full({3, std::max(height, row_h), width}, 1.0);
    static const double palette[6][3] = {{0.22, 0.49, 0.72}, {0.89, 0.47, 0.27},
                                         {0.30, 0.69, 0.29}, {0.60, 0.31, 0.64},
                                         {0.85, 0.37, 0.55}, {0.40, 0.40, 0.40}};
    for (std::size_t r = 0; r < rows.size(); ++r) {
        int y0 = gap + static_cast<int>(r) * (row_h + gap);
        int len = static_cast<int>((width - left - 8) * std::fabs(rows[r].second) / vmax);
        const double* col = palette[r % 6];
        for (int y = y0; y < y0 + row_h; ++y)
            for (int x = left; x < left + std::max(1, len); ++x)
                for (int ch = 0; ch < 3; ++ch) img.at(ch, y, x) = col[ch];
    }
    for (int y = 0; y < img.dim(1); ++y)
        for (int ch = 0; ch < 3; ++ch) img.at(ch, y, left - 1) = 0.0;
    io::write_png(png_path, img);
}

namespace {

Tensor to_rgb_tile(const Tensor& t) {
    if (t.rank() == 2) {
        Tensor r({3, t.dim(0), t.dim(1)});
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < t.dim(0); ++y)
                for (int x = 0; x < t.dim(1); ++x) r.at(c, y, x) = t.at(y, x);
        return r;
    }
    if (t.dim(0) == 3) return t;
    Tensor r({3, t.dim(1), t.dim(2)});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < t.dim(1); ++y)
            for (int x = 0; x < t.dim(2); ++x) r.at(c, y, x) = t.at(0, y, x);
    return r;
}

void write_map_grid(const std::string& png_path, const std::string& csv_path,
                    const std::vector<std::vector<Tensor>>& panels,
                    const std::vector<std::string>& col_names) {
    if (panels.empty() || panels[0].empty()) return;
    int H = panels[0][0].rank() == 2 ? panels[0][0].dim(0) : panels[0][0].dim(1);
    int W = panels[0][0].rank() == 2 ? panels[0][0].dim(1) : panels[0][0].dim(2);
    int rows = static_cast<int>(panels.size());
    int cols = static_cast<int>(panels[0].size());
    const int pad = 2;
    Tensor grid = Tensor::full({3, rows * (H + pad) + pad, cols * (W + pad) + pad}, 1.0);
    std::ofstream csv(csv_path);
    csv << "row,col,panel,y,x,value\n";
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            Tensor tile = to_rgb_tile(panels[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)]);
            const Tensor& orig = panels[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    for (int ch = 0; ch < 3; ++ch)
                        grid.at(ch, pad + r * (H + pad) + y, pad + c * (W + pad) + x) =
                            tile.at(ch, y, x);
                    double v = orig.rank() == 2 ? orig.at(y, x) : orig.at(0, y, x);
                    csv << r << "," << c << "," << col_names[static_cast<std::size_t>(c)] << "," << y
                        << "," << x << "," << v << "\n";
                }
        }
    io::write_png(png_path, grid);
}

struct PreparedModels {
    data::Dataset dataset;
    Classifier f;
    std::optional<interp::RtsMasker> masker;
    double holdout_accuracy = 0.0;
};

PreparedModels prepare(const ExperimentSpec& spec) {
    PreparedModels pm;
    if (!spec.dataset_dir.empty())
        pm.dataset = data::load_dataset(spec.dataset_dir);
    else
        pm.dataset = data::make_synthetic(*spec.synth, spec.synth_count, spec.seed);

    if (!spec.checkpoint.empty()) {
        pm.f = Classifier::load(spec.checkpoint);
    } else {
        auto& ds = pm.dataset;
        int holdout = std::min<int>(spec.holdout, static_cast<int>(ds.images.size()) / 5);
        std::vector<Image> train(ds.images.begin(), ds.images.end() - holdout);
        std::vector<Image> hold(ds.images.end() - holdout, ds.images.end());
        nn::TrainReport rep;
        pm.f = nn::train_classifier(train, nn::arch_preset(spec.train_arch), spec.train, &rep, &hold);
        pm.holdout_accuracy = rep.holdout_accuracy;
    }

    bool needs_rts = false;
    for (auto id : spec.interpreters)
        if (id == InterpreterId::rts) needs_rts = true;
    for (const auto& a : spec.attacks)
        if (a.kind != "pgd" && a.config.interpreter == InterpreterId::rts) needs_rts = true;
    if (needs_rts) {
        if (!spec.rts_masker_path.empty()) {
            pm.masker = interp::RtsMasker::load(spec.rts_masker_path);
        } else {
            std::vector<Image> sub(pm.dataset.images.begin(),
                                   pm.dataset.images.begin() +
                                       std::min<std::size_t>(pm.dataset.images.size(),
                                                             static_cast<std::size_t>(spec.rts_train_subset)));
            pm.masker = interp::rts_train_masker(pm.f, sub, spec.rts_train);
        }
    }
    return pm;
}

}  // namespace

RunResult run_experiment(const ExperimentSpec& spec, const std::atomic<bool>* cancel) {
    RunResult rr;
    auto errors = spec.validate();
    if (!errors.empty()) {
        for (const auto& e : errors) std::fprintf(stderr, "spec error: %s\n", e.c_str());
        rr.exit_code = 2;
        return rr;
    }

    fs::path out = fs::path(spec.output_dir) / spec.name;
    fs::create_directories(out / "maps");
    fs::create_directories(out / "traces");
    fs::create_directories(out / "figures");

    PreparedModels pm = prepare(spec);
    const Classifier& f = pm.f;
    const interp::RtsMasker* masker = pm.masker ? &*pm.masker : nullptr;
    if (spec.checkpoint.empty()) pm.f.save((out / "classifier.ckpt").string());
    if (pm.masker && spec.rts_masker_path.empty()) pm.masker->save((out / "rts_masker.ckpt").string());

    // evaluation batch: correctly classified images starting at batch_from
    std::vector<Image> batch;
    std::vector<int> batch_src;
    for (std::size_t i = static_cast<std::size_t>(spec.batch_from);
         i < pm.dataset.images.size() && batch.size() < static_cast<std::size_t>(spec.batch_count);
         ++i) {
        const Image& im = pm.dataset.images[i];
        if (!im.label) continue;
        if (nn::predict_class(f, im) == *im.label) {
            batch.push_back(im);
            batch_src.push_back(static_cast<int>(i));
        }
    }
    const int nb = static_cast<int>(batch.size());

    // benign maps per interpreter
    std::vector<std::vector<Tensor>> benign(spec.interpreters.size(),
                                            std::vector<Tensor>(static_cast<std::size_t>(nb)));
    for (std::size_t gi = 0; gi < spec.interpreters.size(); ++gi) {
        InterpreterId id = spec.interpreters[gi];
        interp::MaskSolverConfig mc = spec.mask_solver;
        mc.seed = Rng::derive(spec.seed, 0xBE319 + gi);
        parallel_for(nb, spec.workers, cancel, [&](int i) {
            int c = nn::predict_class(f, batch[static_cast<std::size_t>(i)]);
            benign[gi][static_cast<std::size_t>(i)] =
                interp::compute_map(f, batch[static_cast<std::size_t>(i)], id, c, masker, &mc)
                    .values;
        });
    }

    std::ofstream metrics_csv(out / "metrics.csv");
    metrics_csv << "image_id,attack_id,interpreter,asr_flag,mc,l1,l2,iou,detect_flags\n";
    metrics_csv.flush();

    ordered_json summary;
    summary["name"] = spec.name;
    summary["seed"] = spec.seed;
    summary["batch_size"] = nb;
    if (spec.checkpoint.empty()) summary["holdout_accuracy"] = pm.holdout_accuracy;
    summary["attacks"] = ordered_json::object();

    // benign rows
    for (std::size_t gi = 0; gi < spec.interpreters.size(); ++gi) {
        for (int i = 0; i < nb; ++i) {
            Tensor p = nn::predict_proba(f, batch[static_cast<std::size_t>(i)]);
            metrics_csv << batch_src[static_cast<std::size_t>(i)] << ",benign,"
                        << interp::to_string(spec.interpreters[gi]) << ",0," << p.max()
                        << ",0,0,1,\n";
        }
    }
    metrics_csv.flush();

    struct PerAttack {
        std::vector<AttackOutcome> outcomes;
        std::vector<Tensor> final_maps;
        std::vector<Tensor> targets;
        std::vector<int> target_classes;
    };

    for (const auto& entry : spec.attacks) {
        if (cancel && cancel->load()) break;
        InterpreterId gid = entry.config.interpreter;
        auto git = std::find(spec.interpreters.begin(), spec.interpreters.end(), gid);
        std::size_t gidx = git == spec.interpreters.end()
                               ? 0
                               : static_cast<std::size_t>(git - spec.interpreters.begin());

        PerAttack pa;
        pa.outcomes.resize(static_cast<std::size_t>(nb));
        pa.final_maps.resize(static_cast<std::size_t>(nb));
        pa.targets.resize(static_cast<std::size_t>(nb));
        pa.target_classes.resize(static_cast<std::size_t>(nb));

        interp::MaskSolverConfig mc = spec.mask_solver;
        parallel_for(nb, spec.workers, cancel, [&](int i) {
            const Image& x0 = batch[static_cast<std::size_t>(i)];
            std::uint64_t iseed = Rng::derive(spec.seed, 0xA77 + static_cast<std::uint64_t>(i) * 131 +
                                                             std::hash<std::string>{}(entry.id));
            Rng rng(iseed);
            int pred = nn::predict_class(f, x0);
            int c_t = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(f.num_classes() - 1)));
            if (c_t >= pred) ++c_t;

            Tensor m_t;
            if (entry.kind == "pgd") {
                m_t = benign[gidx][static_cast<std::size_t>(i)];
            } else if (entry.target == "benign_self") {
                m_t = benign[gidx][static_cast<std::size_t>(i)];
            } else if (entry.target == "random_patch") {
                m_t = metrics::random_patch_target(x0.pixels.dim(1), x0.pixels.dim(2), iseed);
            } else {
                m_t = metrics::random_class_target(f, pm.dataset.images, gid, c_t, iseed, masker, &mc)
                          .map;
            }

            AttackConfig cfg = entry.config;
            cfg.target_class = c_t;
            cfg.seed = iseed;
            AttackOutcome o;
            if (entry.kind == "pgd") {
                o = attack::pgd_attack(f, x0, c_t, cfg);
            } else if (entry.kind == "adv2") {
                o = attack::adv2_pgd(f, x0, c_t, m_t, cfg, masker);
            } else if (entry.kind == "adv2_mask") {
                attack::MaskAttackConfig mcfg = entry.mask_config;
                mcfg.base = cfg;
                mcfg.solver = mc;
                o = attack::adv2_mask_attack(f, x0, c_t, m_t, mcfg);
            } else {
                attack::StadvConfig scfg = entry.stadv_config;
                scfg.seed = iseed;
                o = attack::adv2_stadv(f, x0, c_t, m_t, scfg, masker);
            }
            int cstar = nn::predict_class(f, o.x_star);
            interp::MaskSolverConfig mc2 = mc;
            mc2.seed = Rng::derive(iseed, 0xF1A1);
            o.trace.shrink_to_fit();
            pa.final_maps[static_cast<std::size_t>(i)] =
                interp::compute_map(f, o.x_star, gid, cstar, masker, &mc2).values;
            pa.targets[static_cast<std::size_t>(i)] = m_t;
            pa.target_classes[static_cast<std::size_t>(i)] = c_t;
            pa.outcomes[static_cast<std::size_t>(i)] = std::move(o);
        });
        if (cancel && cancel->load()) break;

        // aggregate + persist (single writer)
        double l1 = 0, l2 = 0, iou = 0, l1t = 0;
        for (int i = 0; i < nb; ++i) {
            const auto& o = pa.outcomes[static_cast<std::size_t>(i)];
            const Tensor& ben = benign[gidx][static_cast<std::size_t>(i)];
            const Tensor& adv = pa.final_maps[static_cast<std::size_t>(i)];
            double v1 = metrics::lp_distance(adv, ben, 1);
            double v2 = metrics::lp_distance(adv, ben, 2);
            double vi = metrics::iou_score(adv, ben);
            double vt = metrics::lp_distance(adv, pa.targets[static_cast<std::size_t>(i)], 1);
            l1 += v1;
            l2 += v2;
            iou += vi;
            l1t += vt;
            metrics_csv << batch_src[static_cast<std::size_t>(i)] << "," << entry.id << ","
                        << interp::to_string(gid) << "," << (o.success ? 1 : 0) << ","
                        << o.confidence << "," << v1 << "," << v2 << "," << vi << ",\n";

            attack::write_trace_csv(
                (out / "traces" / (entry.id + "_" + std::to_string(batch_src[static_cast<std::size_t>(i)]) +
                                   ".csv"))
                    .string(),
                o);
            if (spec.export_maps && i < 16) {
                std::string stem = entry.id + "_" + std::to_string(batch_src[static_cast<std::size_t>(i)]);
                io::write_png((out / "maps" / (stem + "_map.png")).string(), adv);
                io::write_map_raw((out / "maps" / (stem + "_map.f32")).string(), adv,
                                  interp::to_string(gid));
                io::write_png((out / "maps" / (stem + "_x.png")).string(), o.x_star.pixels);
            }
        }
        metrics_csv.flush();

        metrics::BatchStats st = metrics::asr_mc(pa.outcomes);
        ordered_json aj;
        aj["kind"] = entry.kind;
        aj["interpreter"] = interp::to_string(gid);
        aj["target"] = entry.target;
        aj["asr"] = st.asr;
        if (st.mean_mc)
            aj["mean_mc"] = *st.mean_mc;
        else
            aj["mean_mc"] = nullptr;
        aj["mean_l1_benign"] = l1 / nb;
        aj["mean_l2_benign"] = l2 / nb;
        aj["mean_iou_benign"] = iou / nb;
        aj["mean_l1_target"] = l1t / nb;
        summary["attacks"][entry.id] = aj;

        // figure: small grid of benign / adversarial pairs
        std::vector<std::vector<Tensor>> panels;
        for (int i = 0; i < std::min(nb, 6); ++i)
            panels.push_back({batch[static_cast<std::size_t>(i)].pixels,
                              benign[gidx][static_cast<std::size_t>(i)],
                              pa.outcomes[static_cast<std::size_t>(i)].x_star.pixels,
                              pa.final_maps[static_cast<std::size_t>(i)]});
        write_map_grid((out / "figures" / (entry.id + "_grid.png")).string(),
                       (out / "figures" / (entry.id + "_grid.csv")).string(), panels,
                       {"input", "benign_map", "adversarial", "adversarial_map"});
    }

    // summary bar charts
    std::vector<std::pair<std::string, double>> l1_rows, iou_rows;
    for (auto& [k, v] : summary["attacks"].items()) {
        l1_rows.emplace_back(k, v["mean_l1_benign"].get<double>());
        iou_rows.emplace_back(k, v["mean_iou_benign"].get<double>());
    }
    if (!l1_rows.empty()) {
        write_bar_chart((out / "figures" / "l1_benign.png").string(),
                        (out / "figures" / "l1_benign.csv").string(), l1_rows, "mean_l1");
        write_bar_chart((out / "figures" / "iou_benign.png").string(),
                        (out / "figures" / "iou_benign.csv").string(), iou_rows, "mean_iou");
    }

    std::ofstream sj(out / "summary.json");
    sj << summary.dump(2) << "\n";
    rr.summary_path = (out / "summary.json").string();
    rr.metrics_path = (out / "metrics.csv").string();
    rr.exit_code = cancel && cancel->load() ? 130 : 0;
    return rr;
}

}  // namespace adv2::experiment
