#pragma once

#include <string>
#include <vector>

#include "adv2/attacks.hpp"

namespace adv2::defense {

enum class SqueezerKind { bit_depth, local_smooth, nonlocal_smooth };

struct Squeezer {
    SqueezerKind kind = SqueezerKind::bit_depth;
    int bits = 2;  // bit_depth
    int nl_search = 11, nl_patch = 3;
    double nl_strength = 4.0;
    std::string name() const;
};

Tensor squeeze(const Tensor& x, const Squeezer& s);
// Differentiable-through squeezer graph (median: straight-through;
// non-local means: similarity weights treated as constants).
ag::Val squeeze_graph(const ag::Val& x, const Squeezer& s);

struct DetectorConfig {
    std::vector<Squeezer> squeezers;
    double threshold = 1.0;
};

DetectorConfig default_detector();  // 2-bit, 3-bit, 3x3 median, 11-3-4 non-local

struct Detection {
    bool flagged = false;
    double score = 0;  // max over squeezers of |f(x)-f(squeeze(x))|_1
};

double fs_score(const nn::Classifier& f, const nn::Image& x, const std::vector<Squeezer>& sq);
Detection fs_detect(const nn::Classifier& f, const nn::Image& x, const DetectorConfig& cfg);
double calibrate_threshold(const nn::Classifier& f, const std::vector<nn::Image>& benign,
                           const std::vector<Squeezer>& sq, double quantile = 0.95);

struct DetectionRecord {
    std::string image_id;
    std::string squeezer;
    double score = 0;
    bool flagged = false;
};
void write_detection_csv(const std::string& path, const std::vector<DetectionRecord>& rows);

// ---- adaptive attacks ----

// ADV2 with the extra cross-entropy term between original and squeezed
// predictions (smoothing squeezers only).
attack::AttackOutcome adaptive_adv2_smoothing(const nn::Classifier& f, const nn::Image& x0,
                                              int target_class, const Tensor& target_map,
                                              const Squeezer& s, const attack::AttackConfig& cfg,
                                              double lambda_sqz,
                                              const interp::RtsMasker* masker = nullptr);

struct BitdepthOutcome {
    attack::AttackOutcome outcome;
    bool stage1_success = false;
    Tensor x_plus;  // squeezed-space adversarial anchor (on the quantized grid)
};

// Two-stage attack: search on the quantized grid reachable from the epsilon
// ball, then match its prediction vector from inside the ball while pinning
// every pixel to the anchor's quantization bin.
BitdepthOutcome adaptive_adv2_bitdepth(const nn::Classifier& f, const nn::Image& x0,
                                       int target_class, const Tensor& target_map, int bits,
                                       const attack::AttackConfig& cfg, double lambda_prob,
                                       const interp::RtsMasker* masker = nullptr,
                                       int stage1_iters = 60);

// ---- adversarial interpretation distillation ----

struct AidConfig {
    int rounds = 2;       // interpretation/distillation alternations
    int int_epochs = 1;   // masker objective epochs per round
    int aid_epochs = 1;   // distillation epochs per round
    int aid_subset = 200; // samples re-attacked per distillation epoch
    double lr = 5e-4;
    attack::AttackConfig attack;      // reduced-budget rts attack
    interp::RtsTrainConfig rts;
    std::uint64_t seed = 1;
};

interp::RtsMasker aid_train(const nn::Classifier& f, const std::vector<nn::Image>& train,
                            const interp::RtsMasker& base, const AidConfig& cfg);

// Smallest noise level whose injection causes at least `target_rate`
// misclassification on the batch (binary search; normal or uniform noise).
double calibrate_noise_level(const nn::Classifier& f, const std::vector<nn::Image>& batch,
                             double target_rate, bool uniform, std::uint64_t seed);

Tensor add_noise(const Tensor& x, double level, bool uniform, Rng& rng);

}  // namespace adv2::defense
