#pragma once

#include <string>
#include <utility>
#include <vector>

#include "adv2/dataset.hpp"
#include "adv2/nn.hpp"

namespace adv2::interp {

enum class InterpreterId { grad, ig, cam, gradcam, mask, rts };

std::string to_string(InterpreterId id);
InterpreterId interpreter_from_string(const std::string& s);

struct AttributionMap {
    Tensor values;  // (H,W) in [0,1]
    InterpreterId interpreter = InterpreterId::grad;
};

// (raw - min) / (max - min); all-constant raw maps to all-zeros.
Tensor normalize_map(const Tensor& raw);

// ---- back-propagation guided ----

AttributionMap grad_saliency(const nn::Classifier& f, const nn::Image& x, int c,
                             const ag::ReluRule& rule = {});

struct IgResult {
    AttributionMap map;
    Tensor raw;        // (C,H,W) signed attributions
    double raw_sum;    // sum of raw attributions
    double fc_x;       // f_c(x)
    double fc_base;    // f_c(baseline)
};
IgResult integrated_gradients(const nn::Classifier& f, const nn::Image& x,
                              const nn::Image& baseline, int c, int steps);

// ---- representation guided ----

// Low-resolution weighted feature sum, pre-clip pre-normalize. Its spatial
// sum equals the class logit minus bias on the pooled-head architectures.
Tensor cam_map_raw(const nn::Classifier& f, const nn::Image& x, int c);
AttributionMap cam_map(const nn::Classifier& f, const nn::Image& x, int c);

Tensor gradcam_weights(const nn::Classifier& f, const nn::Image& x, int c);  // (K)
AttributionMap gradcam_map(const nn::Classifier& f, const nn::Image& x, int c);

// ---- perturbation guided (MASK) ----

struct MaskSolverConfig {
    double lambda_tv = 0.08;         // total-variation weight
    double lambda_sparsity = 0.003;  // weight on |1-m|_1 (deleted area)
    double noise_sigma = 0.2;
    double init_value = 0.5;  // starting mask level (keeps f unsaturated)
    int jitter = 2;           // max translation in px; 0 disables E_tau
    int jitter_count = 4;     // translations drawn per step
    int iterations = 100;
    double step_size = 0.05;
    enum class Opt { gd, adam } optimizer = Opt::adam;
    std::uint64_t seed = 0;
};

struct MaskSolution {
    AttributionMap map;  // normalized 1-m (deletion importance)
    Tensor mask;         // m in [0,1], 1 = retained
    std::vector<double> objective;  // value at each recorded iterate
};

MaskSolution mask_solve(const nn::Classifier& f, const nn::Image& x, const MaskSolverConfig& cfg);

// The mask objective as a graph in (m, x): lambda_tv*TV(m) +
// lambda_sparsity*sum(1-m) + mean_j f_c(phi(translate(x,j); m)).
// Callers supply the jitters and per-slot noise images so the attack can
// rebuild the exact objective the solver used.
ag::Val mask_objective_graph(const nn::Classifier& f, const ag::Val& x, const ag::Val& m,
                             int c, const MaskSolverConfig& cfg,
                             const std::vector<std::pair<int, int>>& jitters,
                             const std::vector<Tensor>& noises);

std::vector<Tensor> mask_noise_bank(const MaskSolverConfig& cfg, const std::vector<int>& shape);

// ---- model guided (RTS) ----

struct RtsWeights {
    double lambda_tv = 1.0;
    double lambda_av = 1.0;
    double lambda_destroy = 1.0;
    double destroy_exponent = 2.0;  // lambda4
};

struct RtsMasker {
    nn::Classifier encoder;       // trained classifier trunk, frozen
    std::vector<Tensor> params;   // decoder parameters
    Tensor prototypes;            // (num_classes, feat) mean encoder outputs
    RtsWeights weights;

    void save(const std::string& path) const;
    static RtsMasker load(const std::string& path);
};

struct RtsTrainConfig {
    int epochs = 3;
    double lr = 1e-3;
    RtsWeights weights;
    std::uint64_t seed = 1;
    bool verbose = false;
};

RtsMasker rts_init_masker(const nn::Classifier& f, std::uint64_t seed);
RtsMasker rts_train_masker(const nn::Classifier& f, const std::vector<nn::Image>& train,
                           const RtsTrainConfig& cfg);
// Continue training an existing masker for a number of epochs on the
// standard objective (used by the distillation alternation).
void rts_train_epochs(RtsMasker& masker, const std::vector<nn::Image>& train,
                      const RtsTrainConfig& cfg, int epochs, nn::Adam& opt, Rng& rng);

AttributionMap rts_map(const RtsMasker& masker, const nn::Image& x);
// Masker forward as a graph; leaves for the decoder params when requested.
ag::Val rts_mask_graph(const RtsMasker& masker, const ag::Val& x,
                       std::vector<ag::Val>* param_leaves = nullptr);
ag::Val rts_encoder_features(const nn::Classifier& encoder, const ag::Val& x);  // pooled (C)
// Mean objective value over a batch (used for trained-vs-untrained checks).
double rts_objective(const RtsMasker& masker, const std::vector<nn::Image>& batch,
                     std::uint64_t seed);

// ---- attack-facing dispatch ----

// Differentiable map graph for the gradient-based attacks.
// grad_rule applies to the inner backward pass of the grad interpreter.
ag::Val attack_map_graph(const nn::Classifier& f, const ag::Val& x, InterpreterId id, int c,
                         const ag::ReluRule& grad_rule, const RtsMasker* masker);

// Numeric map for metrics. MASK uses cfg (required), RTS uses masker.
AttributionMap compute_map(const nn::Classifier& f, const nn::Image& x, InterpreterId id, int c,
                           const RtsMasker* masker = nullptr,
                           const MaskSolverConfig* mask_cfg = nullptr);

Tensor gaussian_blur(const Tensor& chw, int kernel, double sigma);

}  // namespace adv2::interp
