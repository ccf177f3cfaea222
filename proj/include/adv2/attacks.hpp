#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "adv2/interpreters.hpp"
#include "adv2/nn.hpp"

namespace adv2::attack {

struct AttackConfig {
    double epsilon = 0.031;
    double alpha = 1.0 / 255;
    double lambda_int = 0.05;
    int n_total = 300;
    int n_warm = 100;
    bool label_smoothing = false;       // on for the grad interpreter
    double rho_start = 0.05, rho_end = 0.01;
    double kappa = 0.8;                 // confidence floor for step search
    double lambda_enc = 0.1;            // rts encoder term
    double tau_relu = 1e-4;             // smooth backward constant
    bool alpha_decay = false;           // quarter the step over the dual phase
    interp::InterpreterId interpreter = interp::InterpreterId::grad;
    int target_class = -1;
    Tensor target_map;                  // (H,W); empty means caller fills it
    std::uint64_t seed = 0;

    std::string to_json() const;
    static AttackConfig from_json(const std::string& text);
};

struct MaskAttackConfig {
    AttackConfig base;
    int n_step = 4;     // inner gradient steps per iteration
    int n_reset = 50;   // iterations per map reset
    double xi = -1.0;   // lookahead step; <0 scales to the optimizer step
    double alpha_max = 0.08;
    int n_bs = 12;
    double pull_weight = 0.3;  // damping of the averaged target-map gradient
    interp::MaskSolverConfig solver;
};

struct TraceRow {
    int iteration = 0;
    double l_prd = 0, l_int = 0, l_adv = 0, confidence = 0;
};

struct AttackOutcome {
    nn::Image x_star;
    int predicted = -1;
    double confidence = 0;  // probability of the target class (MC)
    bool success = false;
    double linf = 0;        // |x_star - x0|_inf
    std::vector<TraceRow> trace;
    // mask-attack internals, exposed for fidelity checks
    Tensor mask_state;
    Tensor x_final_iterate;
    Tensor flow;  // spatial-transform attacks only
    int last_reset_iter = -1;  // outer iteration count at the last map reset
    Tensor last_reset_mask;
    Tensor last_reset_x;
};

void write_trace_csv(const std::string& path, const AttackOutcome& o);

// Projection onto the epsilon ball around x0 intersected with [0,1].
Tensor project_ball(const Tensor& x, const Tensor& x0, double eps);

AttackOutcome pgd_attack(const nn::Classifier& f, const nn::Image& x0, int target_class,
                         const AttackConfig& cfg);

struct Adv2Losses {
    double l_prd = 0, l_int = 0, l_adv = 0;
};
Adv2Losses adv2_loss(const nn::Classifier& f, const nn::Image& x, int target_class,
                     const Tensor& target_map, double lambda, interp::InterpreterId id,
                     const interp::RtsMasker* masker = nullptr,
                     const interp::MaskSolverConfig* mask_cfg = nullptr);

AttackOutcome adv2_pgd(const nn::Classifier& f, const nn::Image& x0, int target_class,
                       const Tensor& target_map, const AttackConfig& cfg,
                       const interp::RtsMasker* masker = nullptr);

AttackOutcome adv2_mask_attack(const nn::Classifier& f, const nn::Image& x0, int target_class,
                               const Tensor& target_map, const MaskAttackConfig& cfg);

// Gradient of G(x) = 0.5 |g(x) - g0|^2 at x0, where g(x) is the inner
// minimizer of f(x, .). Explicit small-matrix algebra over finite-difference
// second derivatives; test-harness utility.
using BilevelFn = std::function<double(const std::vector<double>&, const std::vector<double>&)>;
std::vector<double> lookahead_gradient(const BilevelFn& f, const std::vector<double>& x0,
                                       const std::vector<double>& y0,
                                       const std::vector<double>& g0, double fd_step = 1e-4);

// ---- spatial transformation framework ----

nn::Image spatial_warp(const nn::Image& x, const Tensor& flow);  // flow (2,H,W)
double flow_loss(const Tensor& flow);
ag::Val flow_loss_graph(const ag::Val& flow);

struct StadvConfig {
    double lambda_int = 0.05;
    double tau_flow = 0.05;
    int n_total = 300;
    double adam_lr = 0.01, adam_b1 = 0.9, adam_b2 = 0.999;
    bool label_smoothing = false;
    double rho_start = 0.05, rho_end = 0.01;
    double lambda_enc = 0.1;
    double tau_relu = 1e-4;
    interp::InterpreterId interpreter = interp::InterpreterId::cam;
    std::uint64_t seed = 0;
    // mask interpreter internals
    int n_step = 4;
    int n_reset = 50;
    double xi = -1.0;
    double pull_weight = 0.3;
    interp::MaskSolverConfig solver;
};

AttackOutcome adv2_stadv(const nn::Classifier& f, const nn::Image& x0, int target_class,
                         const Tensor& target_map, const StadvConfig& cfg,
                         const interp::RtsMasker* masker = nullptr);

}  // namespace adv2::attack
