#include "adv2/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "adv2/rng.hpp"

namespace adv2::attack {

using namespace adv2::ag;
using interp::InterpreterId;
using nn::Classifier;
using nn::Forward;
using nn::Image;

Tensor project_ball(const Tensor& x, const Tensor& x0, double eps) {
    Tensor r = x;
    for (std::size_t i = 0; i < r.size(); ++i) {
        double lo = std::max(0.0, x0[i] - eps);
        double hi = std::min(1.0, x0[i] + eps);
        r[i] = std::clamp(r[i], lo, hi);
    }
    return r;
}

void write_trace_csv(const std::string& path, const AttackOutcome& o) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("write_trace_csv: cannot open " + path);
    os << "iteration,l_prd,l_int,l_adv,confidence\n";
    for (const auto& row : o.trace)
        os << row.iteration << "," << row.l_prd << "," << row.l_int << "," << row.l_adv << ","
           << row.confidence << "\n";
}

std::string AttackConfig::to_json() const {
    nlohmann::ordered_json j;
    j["epsilon"] = epsilon;
    j["alpha"] = alpha;
    j["lambda_int"] = lambda_int;
    j["n_total"] = n_total;
    j["n_warm"] = n_warm;
    j["label_smoothing"] = label_smoothing;
    j["rho_start"] = rho_start;
    j["rho_end"] = rho_end;
    j["kappa"] = kappa;
    j["lambda_enc"] = lambda_enc;
    j["tau_relu"] = tau_relu;
    j["interpreter"] = interp::to_string(interpreter);
    j["target_class"] = target_class;
    j["seed"] = seed;
    if (!target_map.empty()) {
        j["target_map_h"] = target_map.dim(0);
        j["target_map_w"] = target_map.dim(1);
        j["target_map"] = std::vector<double>(target_map.data(), target_map.data() + target_map.size());
    }
    return j.dump(2);
}

AttackConfig AttackConfig::from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    AttackConfig c;
    c.epsilon = j.value("epsilon", c.epsilon);
    c.alpha = j.value("alpha", c.alpha);
    c.lambda_int = j.value("lambda_int", c.lambda_int);
    c.n_total = j.value("n_total", c.n_total);
    c.n_warm = j.value("n_warm", c.n_warm);
    c.label_smoothing = j.value("label_smoothing", c.label_smoothing);
    c.rho_start = j.value("rho_start", c.rho_start);
    c.rho_end = j.value("rho_end", c.rho_end);
    c.kappa = j.value("kappa", c.kappa);
    c.lambda_enc = j.value("lambda_enc", c.lambda_enc);
    c.tau_relu = j.value("tau_relu", c.tau_relu);
    if (j.contains("interpreter"))
        c.interpreter = interp::interpreter_from_string(j["interpreter"].get<std::string>());
    c.target_class = j.value("target_class", c.target_class);
    c.seed = j.value("seed", c.seed);
    if (j.contains("target_map")) {
        int h = j.at("target_map_h").get<int>(), w = j.at("target_map_w").get<int>();
        std::vector<double> v = j.at("target_map").get<std::vector<double>>();
        c.target_map = Tensor({h, w}, std::move(v));
    }
    return c;
}

namespace {

void check_preconditions(const AttackConfig& cfg) {
    if (!(cfg.alpha > 0.0) || cfg.alpha > cfg.epsilon + 1e-12 || cfg.epsilon > 1.0) {
        if (cfg.epsilon == 0.0 && cfg.alpha > 0.0) return;  // degenerate ball allowed
        throw std::invalid_argument("attack config: need 0 < alpha <= epsilon <= 1");
    }
    if (cfg.n_warm > cfg.n_total)
        throw std::invalid_argument("attack config: n_warm must not exceed n_total");
}

struct BestTracker {
    bool have = false;
    double l_adv = 0;
    Tensor x;
    double conf = 0;

    void offer(bool success, double ladv, const Tensor& cand, double confidence) {
        if (!success) return;
        if (!have || ladv < l_adv) {
            have = true;
            l_adv = ladv;
            x = cand;
            conf = confidence;
        }
    }
};

// Smoothed target distribution for one iteration; rho linearly decayed.
Tensor smoothed_targets(int num_classes, int c_t, double rho, Rng& rng) {
    Tensor y({num_classes});
    double y_t = rng.uniform(1.0 - rho, 1.0);
    double rest = (1.0 - y_t) / (num_classes - 1);
    for (int c = 0; c < num_classes; ++c) y[static_cast<std::size_t>(c)] = c == c_t ? y_t : rest;
    return y;
}

struct StepEval {
    double l_prd = 0, conf = 0;
    int pred = -1;
    Tensor grad;  // d l_prd / d x
};

StepEval prediction_step_eval(const Classifier& f, const Tensor& x, int c_t,
                              const Tensor* smooth_y) {
    Val xl = leaf(x);
    Forward fw = nn::forward_graph(f, xl);
    Val lprd = smooth_y ? neg(dot(constant(*smooth_y), fw.log_probs))
                        : neg(pick(fw.log_probs, c_t));
    StepEval ev;
    ev.l_prd = scalar_of(lprd);
    ev.conf = fw.probs->value[static_cast<std::size_t>(c_t)];
    const Tensor& p = fw.probs->value;
    ev.pred = static_cast<int>(std::max_element(p.data(), p.data() + p.size()) - p.data());
    ev.grad = gradients(lprd, {xl})[0]->value;
    return ev;
}

AttackOutcome finalize(const Classifier& f, const Tensor& x0, const Tensor& last,
                       const BestTracker& best, int c_t, std::vector<TraceRow> trace) {
    AttackOutcome out;
    Tensor chosen = best.have ? best.x : last;
    out.x_star = Image{chosen, {}};
    Tensor p = nn::predict_proba(f, out.x_star);
    out.predicted = static_cast<int>(std::max_element(p.data(), p.data() + p.size()) - p.data());
    out.confidence = p[static_cast<std::size_t>(c_t)];
    out.success = out.predicted == c_t;
    out.linf = linf_dist(chosen, x0);
    out.trace = std::move(trace);
    out.x_final_iterate = last;
    return out;
}

}  // namespace

AttackOutcome pgd_attack(const Classifier& f, const Image& x0, int c_t, const AttackConfig& cfg) {
    check_preconditions(cfg);
    Tensor x = x0.pixels;
    BestTracker best;
    std::vector<TraceRow> trace;
    trace.reserve(static_cast<std::size_t>(cfg.n_total));
    for (int it = 0; it < cfg.n_total; ++it) {
        StepEval ev = prediction_step_eval(f, x, c_t, nullptr);
        trace.push_back({it, ev.l_prd, 0.0, ev.l_prd, ev.conf});
        best.offer(ev.pred == c_t, ev.l_prd, x, ev.conf);
        axpy(x, -cfg.alpha, sign(ev.grad));
        x = project_ball(x, x0.pixels, cfg.epsilon);
    }
    StepEval ev = prediction_step_eval(f, x, c_t, nullptr);
    trace.push_back({cfg.n_total, ev.l_prd, 0.0, ev.l_prd, ev.conf});
    best.offer(ev.pred == c_t, ev.l_prd, x, ev.conf);
    return finalize(f, x0.pixels, x, best, c_t, std::move(trace));
}

Adv2Losses adv2_loss(const Classifier& f, const Image& x, int c_t, const Tensor& m_t,
                     double lambda, InterpreterId id, const interp::RtsMasker* masker,
                     const interp::MaskSolverConfig* mask_cfg) {
    Adv2Losses out;
    Tensor p = nn::predict_proba(f, x);
    out.l_prd = -std::log(std::max(1e-300, p[static_cast<std::size_t>(c_t)]));
    interp::AttributionMap m = interp::compute_map(f, x, id, c_t, masker, mask_cfg);
    Tensor d = m.values - m_t;
    double s = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) s += d[i] * d[i];
    out.l_int = s;
    out.l_adv = out.l_prd + lambda * out.l_int;
    return out;
}

AttackOutcome adv2_pgd(const Classifier& f, const Image& x0, int c_t, const Tensor& m_t,
                       const AttackConfig& cfg, const interp::RtsMasker* masker) {
    check_preconditions(cfg);
    if (cfg.interpreter == InterpreterId::mask)
        throw std::invalid_argument("adv2_pgd: use adv2_mask_attack for the mask interpreter");
    if (cfg.interpreter == InterpreterId::rts && !masker)
        throw std::invalid_argument("adv2_pgd: rts interpreter needs a masker");

    Rng rng(Rng::derive(cfg.seed, 0xADf2));
    ReluRule smooth{ReluMode::smooth_h, cfg.tau_relu};
    Tensor x = x0.pixels;
    BestTracker best;
    std::vector<TraceRow> trace;
    trace.reserve(static_cast<std::size_t>(cfg.n_total) + 1);

    const bool plain = cfg.lambda_int == 0.0 && !cfg.label_smoothing;

    // warm phase: projected gradient steps on the prediction loss. For the
    // dual attack the steps are shaped by the target map so the confidence
    // basin grows where the map should light up; the plain (pgd-equivalent)
    // path keeps uniform steps. Warm iterates are only candidates when the
    // attack reduces to pgd; otherwise their l_adv lacks the interpretation
    // term and would always undercut the dual-phase iterates.
    Tensor warm_w;
    if (!plain && !m_t.empty()) {
        warm_w = Tensor(m_t.shape());
        for (std::size_t i = 0; i < warm_w.size(); ++i) warm_w[i] = 0.25 + 0.75 * m_t[i];
    }
    int ch = x0.pixels.dim(0), hw = x0.pixels.dim(1) * x0.pixels.dim(2);
    for (int it = 0; it < cfg.n_warm; ++it) {
        StepEval ev = prediction_step_eval(f, x, c_t, nullptr);
        trace.push_back({it, ev.l_prd, 0.0, ev.l_prd, ev.conf});
        if (plain) best.offer(ev.pred == c_t, ev.l_prd, x, ev.conf);
        if (warm_w.empty()) {
            axpy(x, -cfg.alpha, sign(ev.grad));
        } else {
            for (int c = 0; c < ch; ++c)
                for (int i = 0; i < hw; ++i) {
                    std::size_t k = static_cast<std::size_t>(c) * hw + i;
                    double s = ev.grad[k] > 0 ? 1.0 : (ev.grad[k] < 0 ? -1.0 : 0.0);
                    x[k] -= cfg.alpha * warm_w[static_cast<std::size_t>(i)] * s;
                }
        }
        x = project_ball(x, x0.pixels, cfg.epsilon);
    }
    Tensor proto;
    if (cfg.interpreter == InterpreterId::rts) {
        int fd = masker->prototypes.dim(1);
        proto = Tensor({fd});
        for (int j = 0; j < fd; ++j)
            proto[static_cast<std::size_t>(j)] =
                masker->prototypes[static_cast<std::size_t>(c_t) * fd + j];
    }

    for (int it = cfg.n_warm; it < cfg.n_total; ++it) {
        if (plain) {
            StepEval ev = prediction_step_eval(f, x, c_t, nullptr);
            trace.push_back({it, ev.l_prd, 0.0, ev.l_prd, ev.conf});
            best.offer(ev.pred == c_t, ev.l_prd, x, ev.conf);
            axpy(x, -cfg.alpha, sign(ev.grad));
            x = project_ball(x, x0.pixels, cfg.epsilon);
            continue;
        }
        Val xl = leaf(x);
        Forward fw = nn::forward_graph(f, xl);
        Val lprd;
        if (cfg.label_smoothing) {
            double span = cfg.n_total > cfg.n_warm
                              ? static_cast<double>(it - cfg.n_warm) / (cfg.n_total - cfg.n_warm)
                              : 0.0;
            double rho = cfg.rho_start + (cfg.rho_end - cfg.rho_start) * span;
            Tensor y = smoothed_targets(f.num_classes(), c_t, rho, rng);
            lprd = neg(dot(constant(y), fw.log_probs));
        } else {
            lprd = neg(pick(fw.log_probs, c_t));
        }
        Val map = interp::attack_map_graph(f, xl, cfg.interpreter, c_t, smooth, masker);
        Val lint = sum_all(square(sub(map, constant(m_t))));
        Val ladv = add(lprd, mul_scalar(lint, cfg.lambda_int));
        if (cfg.interpreter == InterpreterId::rts) {
            Val enc = interp::rts_encoder_features(masker->encoder, xl);
            Val lenc = sum_all(square(sub(enc, constant(proto))));
            ladv = add(ladv, mul_scalar(lenc, cfg.lambda_enc));
        }
        double conf = fw.probs->value[static_cast<std::size_t>(c_t)];
        const Tensor& p = fw.probs->value;
        int pred = static_cast<int>(std::max_element(p.data(), p.data() + p.size()) - p.data());
        trace.push_back({it, scalar_of(lprd), scalar_of(lint), scalar_of(ladv), conf});
        best.offer(pred == c_t, scalar_of(ladv), x, conf);
        Tensor g = gradients(ladv, {xl})[0]->value;
        double step = cfg.alpha;
        if (cfg.alpha_decay) {
            double span = cfg.n_total > cfg.n_warm
                              ? static_cast<double>(it - cfg.n_warm) / (cfg.n_total - cfg.n_warm)
                              : 0.0;
            step *= span < 0.5 ? 1.0 : (span < 0.8 ? 0.5 : 0.25);
        }
        axpy(x, -step, sign(g));
        x = project_ball(x, x0.pixels, cfg.epsilon);
    }

    // score the final iterate
    {
        StepEval ev = prediction_step_eval(f, x, c_t, nullptr);
        double lint = 0.0;
        if (!plain) {
            Adv2Losses ls{};
            ls.l_prd = ev.l_prd;
            if (cfg.interpreter != InterpreterId::mask) {
                Val xl = constant(x);
                Val map = interp::attack_map_graph(f, xl, cfg.interpreter, c_t, smooth, masker);
                Val li = sum_all(square(sub(map, constant(m_t))));
                lint = scalar_of(li);
            }
            (void)ls;
        }
        double ladv = ev.l_prd + cfg.lambda_int * lint;
        trace.push_back({cfg.n_total, ev.l_prd, lint, ladv, ev.conf});
        best.offer(ev.pred == c_t, ladv, x, ev.conf);
    }
    return finalize(f, x0.pixels, x, best, c_t, std::move(trace));
}

// ----------------------------------------------------------- mask attack

namespace {

double mask_lint(const Tensor& m, const Tensor& m_t) {
    double s = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) {
        double d = (1.0 - m[i]) - m_t[i];
        s += d * d;
    }
    return s;
}

}  // namespace

AttackOutcome adv2_mask_attack(const Classifier& f, const Image& x0, int c_t, const Tensor& m_t,
                               const MaskAttackConfig& cfg) {
    check_preconditions(cfg.base);
    if (cfg.n_step < 1 || cfg.n_reset < 1)
        throw std::invalid_argument("mask attack: n_step and n_reset must be >= 1");
    const AttackConfig& bc = cfg.base;
    Rng rng(Rng::derive(bc.seed, 0x3A5C));
    Tensor x = x0.pixels;
    BestTracker best;
    std::vector<TraceRow> trace;

    // Prediction steps are shaped by the target map: evidence written where
    // the map should light up keeps the solver's deletion test aligned.
    Tensor shape_w(m_t.shape());
    int ch = x0.pixels.dim(0), hw = x0.pixels.dim(1) * x0.pixels.dim(2);
    for (std::size_t i = 0; i < shape_w.size(); ++i) shape_w[i] = 0.25 + 0.75 * m_t[i];
    auto shaped_step = [&](Tensor& xx, const Tensor& grad) {
        for (int c = 0; c < ch; ++c)
            for (int i = 0; i < hw; ++i) {
                std::size_t k = static_cast<std::size_t>(c) * hw + i;
                double s = grad[k] > 0 ? 1.0 : (grad[k] < 0 ? -1.0 : 0.0);
                xx[k] -= bc.alpha * shape_w[static_cast<std::size_t>(i)] * s;
            }
        xx = project_ball(xx, x0.pixels, bc.epsilon);
    };

    // warm start with shaped projected gradient steps; these iterates carry
    // no interpretation term and are not returned-candidate material
    for (int it = 0; it < bc.n_warm; ++it) {
        StepEval ev = prediction_step_eval(f, x, c_t, nullptr);
        trace.push_back({it, ev.l_prd, 0.0, ev.l_prd, ev.conf});
        shaped_step(x, ev.grad);
    }

    interp::MaskSolverConfig solver = cfg.solver;
    solver.seed = Rng::derive(bc.seed, 0x50f7);
    Tensor m = interp::mask_solve(f, Image{x0.pixels, {}}, solver).mask;
    auto noises = interp::mask_noise_bank(solver, x0.pixels.shape());
    nn::Adam meta(solver.step_size);
    int n_outer = bc.n_total - bc.n_warm;
    int last_reset_iter = -1;
    Tensor last_reset_mask, last_reset_x;

    for (int it = 0; it < n_outer; ++it) {
        std::vector<std::pair<int, int>> jit;
        if (solver.jitter > 0)
            for (int j = 0; j < std::max(1, solver.jitter_count); ++j)
                jit.emplace_back(rng.uniform_int(-solver.jitter, solver.jitter),
                                 rng.uniform_int(-solver.jitter, solver.jitter));
        else
            jit.emplace_back(0, 0);

        // (i) inner descent on the mask objective, Adam as meta-learner;
        // the interpretation loss aggregated over the inner sequence then
        // drives one averaged-gradient update of the mask estimate.
        Val xc = constant(x);
        double agg_lint = 0.0;
        Tensor pull(m.shape());
        for (int s = 0; s < cfg.n_step; ++s) {
            Val ml = leaf(m);
            Val obj = interp::mask_objective_graph(f, xc, ml, c_t, solver, jit, noises);
            Tensor gm = gradients(obj, {ml})[0]->value;
            meta.step(m, gm);
            m = clamp(m, 0.0, 1.0);
            agg_lint += mask_lint(m, m_t);
            // d/dm |(1-m) - m_t|^2 accumulated along the sequence
            for (std::size_t i = 0; i < pull.size(); ++i)
                pull[i] += -2.0 * ((1.0 - m[i]) - m_t[i]);
        }
        agg_lint /= cfg.n_step;
        // averaged-gradient pull toward the target map, damped so the
        // estimate keeps tracking the solver
        for (std::size_t i = 0; i < pull.size(); ++i) pull[i] *= cfg.pull_weight / cfg.n_step;
        if (cfg.pull_weight > 0) {
            meta.step(m, pull);
            m = clamp(m, 0.0, 1.0);
        }

        // (ii) x update, two sub-steps; the prediction step idles while the
        // confidence sits safely above the floor (a sign step on a saturated
        // loss is pure noise and wrecks the sculpted interpretation steps)
        StepEval ev = prediction_step_eval(f, x, c_t, nullptr);
        if (ev.conf < 0.5 + 0.5 * bc.kappa) shaped_step(x, ev.grad);

        // interpretation sub-step through the single-step unrolled mask;
        // the lookahead is taken both at the running estimate and at the
        // solver's initialization, so the virtual step also anticipates
        // where a fresh solve will land
        Val xl = leaf(x);
        Val mc = constant(m);
        Val obj = interp::mask_objective_graph(f, xl, mc, c_t, solver, jit, noises);
        Val gm_graph = gradients(obj, {mc})[0];
        double xi = cfg.xi;
        if (xi < 0) {
            // scale the raw mask gradient to the optimizer's step magnitude
            double rms = l2_norm(gm_graph->value) / std::sqrt(static_cast<double>(m.size()));
            xi = solver.step_size / (rms + 1e-12);
        }
        Val m_la = sub(mc, mul_scalar(gm_graph, xi));
        Val ones = constant(Tensor::full(m.shape(), 1.0));
        Val lint_la = sum_all(square(sub(sub(ones, m_la), constant(m_t))));
        Tensor gx = gradients(lint_la, {xl})[0]->value;
        Tensor gs;
        if (cfg.xi != 0.0) {
            // anticipate a fresh solve: the retention-gradient field at a
            // lightly blended mask predicts where the solver will dig, so
            // align its shape with the target map (scale-free)
            std::vector<std::pair<int, int>> center{{0, 0}};
            Val m0 = constant(Tensor::full(m.shape(), 0.75));
            Val obj0 = interp::mask_objective_graph(f, xl, m0, c_t, solver, center, noises);
            Val g0 = gradients(obj0, {m0})[0];
            Val centered = sub(g0, mean_all(g0));
            Val unit = div(centered, add_scalar(sqrt_(sum_all(square(centered))), 1e-12));
            Tensor mt_hat = m_t;
            double mu = mt_hat.mean();
            for (std::size_t i = 0; i < mt_hat.size(); ++i) mt_hat[i] -= mu;
            double nrm = l2_norm(mt_hat);
            if (nrm > 0)
                for (std::size_t i = 0; i < mt_hat.size(); ++i) mt_hat[i] /= nrm;
            Val fresh = neg(dot(unit, constant(mt_hat)));
            gs = gradients(fresh, {xl})[0]->value;
        }
        // combine the two signals at equal footing, keeping spatial structure
        Tensor dir = gx;
        double gmax = dir.abs_max();
        if (gmax > 0)
            for (std::size_t i = 0; i < dir.size(); ++i) dir[i] /= gmax;
        if (!gs.empty()) {
            double smax = gs.abs_max();
            if (smax > 0)
                for (std::size_t i = 0; i < dir.size(); ++i) dir[i] += 2.0 * gs[i] / smax;
        }
        for (std::size_t i = 0; i < dir.size(); ++i) dir[i] = -dir[i];

        double lo = 0.0, hi = cfg.alpha_max;
        for (int b = 0; b < cfg.n_bs; ++b) {
            double mid = 0.5 * (lo + hi);
            Tensor cand = x;
            axpy(cand, mid, dir);
            cand = project_ball(cand, x0.pixels, bc.epsilon);
            double conf = nn::predict_proba(f, Image{cand, {}})[static_cast<std::size_t>(c_t)];
            if (conf >= bc.kappa)
                lo = mid;
            else
                hi = mid;
        }
        if (lo > 0.0) {
            axpy(x, lo, dir);
            x = project_ball(x, x0.pixels, bc.epsilon);
        }

        StepEval ev2 = prediction_step_eval(f, x, c_t, nullptr);
        double ladv = ev2.l_prd + bc.lambda_int * agg_lint;
        trace.push_back({bc.n_warm + it, ev2.l_prd, agg_lint, ladv, ev2.conf});
        best.offer(ev2.pred == c_t, ladv, x, ev2.conf);

        // periodic reset: replace the running estimate with a fresh solve
        if ((it + 1) % cfg.n_reset == 0 && it + 1 < n_outer) {
            interp::MaskSolverConfig rs = cfg.solver;
            rs.seed = Rng::derive(bc.seed, 0xBE5E7 + static_cast<std::uint64_t>(it + 1));
            m = interp::mask_solve(f, Image{x, {}}, rs).mask;
            meta.reset();
            last_reset_iter = it + 1;
            last_reset_mask = m;
            last_reset_x = x;
        }
    }

    AttackOutcome out = finalize(f, x0.pixels, x, best, c_t, std::move(trace));
    out.mask_state = m;
    out.last_reset_iter = last_reset_iter;
    out.last_reset_mask = last_reset_mask;
    out.last_reset_x = last_reset_x;
    return out;
}

// ----------------------------------------------------- bilevel lookahead

namespace {

std::vector<double> solve_dense(std::vector<std::vector<double>> A, std::vector<double> b) {
    const std::size_t n = b.size();
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::fabs(A[r][col]) > std::fabs(A[piv][col])) piv = r;
        if (std::fabs(A[piv][col]) < 1e-10)
            throw std::invalid_argument("lookahead_gradient: singular inner Hessian");
        std::swap(A[piv], A[col]);
        std::swap(b[piv], b[col]);
        for (std::size_t r = 0; r < n; ++r) {
            if (r == col) continue;
            double factor = A[r][col] / A[col][col];
            for (std::size_t k = col; k < n; ++k) A[r][k] -= factor * A[col][k];
            b[r] -= factor * b[col];
        }
    }
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = b[i] / A[i][i];
    return out;
}

}  // namespace

std::vector<double> lookahead_gradient(const BilevelFn& f, const std::vector<double>& x0,
                                       const std::vector<double>& y0,
                                       const std::vector<double>& g0, double h) {
    const std::size_t m = x0.size(), n = y0.size();
    if (g0.size() != n) throw std::invalid_argument("lookahead_gradient: g0 dimension mismatch");

    auto feval = [&](const std::vector<double>& x, const std::vector<double>& y) { return f(x, y); };

    // Hessian in y by central second differences
    std::vector<std::vector<double>> Hy(n, std::vector<double>(n, 0.0));
    double f00 = feval(x0, y0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i; j < n; ++j) {
            double v;
            if (i == j) {
                auto yp = y0, ym = y0;
                yp[i] += h;
                ym[i] -= h;
                v = (feval(x0, yp) - 2 * f00 + feval(x0, ym)) / (h * h);
            } else {
                auto ypp = y0, ypm = y0, ymp = y0, ymm = y0;
                ypp[i] += h; ypp[j] += h;
                ypm[i] += h; ypm[j] -= h;
                ymp[i] -= h; ymp[j] += h;
                ymm[i] -= h; ymm[j] -= h;
                v = (feval(x0, ypp) - feval(x0, ypm) - feval(x0, ymp) + feval(x0, ymm)) / (4 * h * h);
            }
            Hy[i][j] = Hy[j][i] = v;
        }

    // cross block d2f/dx_i dy_j
    std::vector<std::vector<double>> Hxy(m, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            auto xpp = x0, xpm = x0, xmp = x0, xmm = x0;
            auto ypp = y0, ypm = y0, ymp = y0, ymm = y0;
            xpp[i] += h; ypp[j] += h;
            xpm[i] += h; ypm[j] -= h;
            xmp[i] -= h; ymp[j] += h;
            xmm[i] -= h; ymm[j] -= h;
            Hxy[i][j] = (feval(xpp, ypp) - feval(xpm, ypm) - feval(xmp, ymp) + feval(xmm, ymm)) / (4 * h * h);
        }

    std::vector<double> rhs(n);
    for (std::size_t j = 0; j < n; ++j) rhs[j] = y0[j] - g0[j];  // g(x0) = y0 at the minimizer
    std::vector<double> s = solve_dense(Hy, rhs);

    std::vector<double> out(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += Hxy[i][j] * s[j];
        out[i] = -acc;
    }
    return out;
}

// ----------------------------------------------------------------- stadv

Image spatial_warp(const Image& x, const Tensor& flow) {
    Val w = warp_bilinear(constant(x.pixels), constant(flow));
    return Image{w->value, x.label};
}

double flow_loss(const Tensor& flow) {
    int H = flow.dim(1), W = flow.dim(2);
    auto du = [&](int y, int x) { return flow[static_cast<std::size_t>(0) * H * W + y * W + x]; };
    auto dv = [&](int y, int x) { return flow[static_cast<std::size_t>(1) * H * W + y * W + x]; };
    static const int dy[4] = {1, -1, 0, 0};
    static const int dx[4] = {0, 0, 1, -1};
    double total = 0.0;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int k = 0; k < 4; ++k) {
                int ny = y + dy[k], nx = x + dx[k];
                if (ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
                double a = du(y, x) - du(ny, nx);
                double b = dv(y, x) - dv(ny, nx);
                total += std::sqrt(a * a + b * b);
            }
    return total;
}

Val flow_loss_graph(const Val& flow) {
    // border-clamped shifts make out-of-range neighbor terms vanish
    Val total;
    static const int dy[4] = {1, -1, 0, 0};
    static const int dx[4] = {0, 0, 1, -1};
    for (int k = 0; k < 4; ++k) {
        Val shifted = translate_clamp(flow, dy[k], dx[k]);
        Val d = sub(flow, shifted);
        Val comp = sum_channels(square(d));  // du^2 + dv^2 per pixel
        Val term = sum_all(sqrt_(add_scalar(comp, 1e-12)));
        total = total ? add(total, term) : term;
    }
    return total;
}

AttackOutcome adv2_stadv(const Classifier& f, const Image& x0, int c_t, const Tensor& m_t,
                         const StadvConfig& cfg, const interp::RtsMasker* masker) {
    int H = x0.pixels.dim(1), W = x0.pixels.dim(2);
    Rng rng(Rng::derive(cfg.seed, 0x57AD));
    ReluRule smooth{ReluMode::smooth_h, cfg.tau_relu};
    Tensor flow({2, H, W});
    nn::Adam opt(cfg.adam_lr, cfg.adam_b1, cfg.adam_b2);
    BestTracker best;
    Tensor best_flow = flow;
    std::vector<TraceRow> trace;

    const bool mask_mode = cfg.interpreter == InterpreterId::mask;
    interp::MaskSolverConfig solver = cfg.solver;
    solver.seed = Rng::derive(cfg.seed, 0x50f7);
    Tensor m;
    std::vector<Tensor> noises;
    nn::Adam meta(solver.step_size);
    if (mask_mode) {
        m = interp::mask_solve(f, x0, solver).mask;
        noises = interp::mask_noise_bank(solver, x0.pixels.shape());
    }
    Tensor proto;
    if (cfg.interpreter == InterpreterId::rts) {
        if (!masker) throw std::invalid_argument("adv2_stadv: rts interpreter needs a masker");
        int fd = masker->prototypes.dim(1);
        proto = Tensor({fd});
        for (int j = 0; j < fd; ++j)
            proto[static_cast<std::size_t>(j)] =
                masker->prototypes[static_cast<std::size_t>(c_t) * fd + j];
    }

    for (int it = 0; it < cfg.n_total; ++it) {
        std::vector<std::pair<int, int>> jit;
        if (mask_mode) {
            if (solver.jitter > 0)
                for (int j = 0; j < std::max(1, solver.jitter_count); ++j)
                    jit.emplace_back(rng.uniform_int(-solver.jitter, solver.jitter),
                                     rng.uniform_int(-solver.jitter, solver.jitter));
            else
                jit.emplace_back(0, 0);
            Tensor xw = spatial_warp(x0, flow).pixels;
            Val xc = constant(xw);
            Tensor pull(m.shape());
            for (int s = 0; s < cfg.n_step; ++s) {
                Val ml = leaf(m);
                Val obj = interp::mask_objective_graph(f, xc, ml, c_t, solver, jit, noises);
                Tensor gm = gradients(obj, {ml})[0]->value;
                meta.step(m, gm);
                m = clamp(m, 0.0, 1.0);
                for (std::size_t i = 0; i < pull.size(); ++i)
                    pull[i] += -2.0 * ((1.0 - m[i]) - m_t[i]);
            }
            for (std::size_t i = 0; i < pull.size(); ++i) pull[i] *= cfg.pull_weight / cfg.n_step;
            if (cfg.pull_weight > 0) {
                meta.step(m, pull);
                m = clamp(m, 0.0, 1.0);
            }
        }

        Val fl = leaf(flow);
        Val xw = warp_bilinear(constant(x0.pixels), fl);
        Forward fw = nn::forward_graph(f, xw);
        Val lprd;
        if (cfg.label_smoothing) {
            double span = cfg.n_total > 0 ? static_cast<double>(it) / cfg.n_total : 0.0;
            double rho = cfg.rho_start + (cfg.rho_end - cfg.rho_start) * span;
            Tensor y = smoothed_targets(f.num_classes(), c_t, rho, rng);
            lprd = neg(dot(constant(y), fw.log_probs));
        } else {
            lprd = neg(pick(fw.log_probs, c_t));
        }
        Val lint;
        if (cfg.lambda_int != 0.0) {
            if (mask_mode) {
                Val mc = constant(m);
                Val obj = interp::mask_objective_graph(f, xw, mc, c_t, solver, jit, noises);
                Val gm_graph = gradients(obj, {mc})[0];
                double xi = cfg.xi;
                if (xi < 0) {
                    double rms = l2_norm(gm_graph->value) / std::sqrt(static_cast<double>(m.size()));
                    xi = solver.step_size / (rms + 1e-12);
                }
                Val m_la = sub(mc, mul_scalar(gm_graph, xi));
                Val ones = constant(Tensor::full(m.shape(), 1.0));
                lint = sum_all(square(sub(sub(ones, m_la), constant(m_t))));
            } else {
                Val map = interp::attack_map_graph(f, xw, cfg.interpreter, c_t, smooth, masker);
                lint = sum_all(square(sub(map, constant(m_t))));
            }
        }
        Val lflow = flow_loss_graph(fl);
        Val loss = lprd;
        if (lint) loss = add(loss, mul_scalar(lint, cfg.lambda_int));
        loss = add(loss, mul_scalar(lflow, cfg.tau_flow));
        if (cfg.interpreter == InterpreterId::rts) {
            Val enc = interp::rts_encoder_features(masker->encoder, xw);
            loss = add(loss, mul_scalar(sum_all(square(sub(enc, constant(proto)))), cfg.lambda_enc));
        }

        double conf = fw.probs->value[static_cast<std::size_t>(c_t)];
        const Tensor& p = fw.probs->value;
        int pred = static_cast<int>(std::max_element(p.data(), p.data() + p.size()) - p.data());
        double li = lint ? scalar_of(lint) : 0.0;
        trace.push_back({it, scalar_of(lprd), li, scalar_of(loss), conf});
        if (pred == c_t && (!best.have || scalar_of(loss) < best.l_adv)) best_flow = flow;
        best.offer(pred == c_t, scalar_of(loss), spatial_warp(x0, flow).pixels, conf);

        Tensor g = gradients(loss, {fl})[0]->value;
        opt.step(flow, g);

        if (mask_mode && (it + 1) % cfg.n_reset == 0 && it + 1 < cfg.n_total) {
            interp::MaskSolverConfig rs = cfg.solver;
            rs.seed = Rng::derive(cfg.seed, 0xBE5E7 + static_cast<std::uint64_t>(it + 1));
            m = interp::mask_solve(f, spatial_warp(x0, flow), rs).mask;
            meta.reset();
        }
    }

    Tensor last = spatial_warp(x0, flow).pixels;
    AttackOutcome out = finalize(f, x0.pixels, last, best, c_t, std::move(trace));
    out.flow = best.have ? best_flow : flow;
    out.linf = linf_dist(out.x_star.pixels, x0.pixels);  // informational for warps
    if (mask_mode) out.mask_state = m;
    return out;
}

}  // namespace adv2::attack
