#pragma once

#include <optional>
#include <string>
#include <vector>

#include "adv2/autograd.hpp"
#include "adv2/rng.hpp"
#include "adv2/tensor.hpp"

namespace adv2::nn {

using ag::ReluMode;
using ag::ReluRule;
using ag::Val;

// h(z): smoothed replacement for the relu backward step function.
// Two branches: 1 + z/sqrt(z^2+tau) for z<0, z/sqrt(z^2+tau) for z>=0.
double h_smooth(double z, double tau);

struct Image {
    Tensor pixels;  // (C,H,W), values in [0,1]
    std::optional<int> label;
};

struct ConvSpec {
    int out_channels = 8;
    int kernel = 3;
    int stride = 1;
    int pad = 1;
};

enum class HeadKind { gap, flatten };

struct Architecture {
    std::string name;           // preset id, e.g. "cnn_gray28"
    int in_channels = 1;
    int in_h = 28, in_w = 28;
    std::vector<ConvSpec> convs;  // each conv is followed by relu
    HeadKind head = HeadKind::gap;
    int num_classes = 10;
};

Architecture arch_preset(const std::string& name);

class Classifier {
public:
    Classifier() = default;
    Classifier(Architecture arch, std::uint64_t init_seed);

    const Architecture& arch() const { return arch_; }
    int num_classes() const { return arch_.num_classes; }
    bool has_conv() const { return !arch_.convs.empty(); }

    // parameters: per conv block {weight, bias}, then head {W, b}
    std::vector<Tensor>& params() { return params_; }
    const std::vector<Tensor>& params() const { return params_; }
    const Tensor& head_weight() const;
    const Tensor& head_bias() const;

    std::uint64_t param_hash() const;

    void save(const std::string& path) const;
    static Classifier load(const std::string& path);

private:
    Architecture arch_;
    std::vector<Tensor> params_;
};

// Forward pass as a graph. `taps`, when non-null, receives the post-relu
// activation of every conv block (multi-scale features; the last entry is
// the input to the pooling head).
struct Forward {
    Val logits;
    Val log_probs;
    Val probs;
    std::vector<Val> conv_taps;
};

Forward forward_graph(const Classifier& f, const Val& x, const ReluRule& rule = {},
                      bool want_taps = false, std::vector<Val>* param_leaves = nullptr);

// Numeric conveniences -------------------------------------------------------

Tensor predict_proba(const Classifier& f, const Image& x);
int predict_class(const Classifier& f, const Image& x);

// d f_c(x) / d x under the selected relu backward rule; f_c is the softmax
// probability of class c.
Tensor input_gradient(const Classifier& f, const Image& x, int c, const ReluRule& rule = {});

// Post-relu activations of the last conv block. Throws if the architecture
// has no conv layer.
Tensor feature_maps(const Classifier& f, const Image& x);

// Training -------------------------------------------------------------------

struct TrainConfig {
    int epochs = 10;
    int batch_size = 32;
    double lr = 1e-3;          // Adam
    double noise_aug = 0.01;   // per-sample gaussian noise, 0 disables
    double label_smooth = 0.0; // mass spread to non-target classes
    double squeeze_aug = 0.0;  // chance of median/bit-depth augmentation
    std::uint64_t seed = 1;
    bool verbose = false;
};

struct TrainReport {
    double final_loss = 0.0;
    double holdout_accuracy = 0.0;  // on the caller-provided holdout
};

class Dataset;  // fwd from dataset.hpp

Classifier train_classifier(const std::vector<Image>& train, const Architecture& arch,
                            const TrainConfig& cfg, TrainReport* report = nullptr,
                            const std::vector<Image>* holdout = nullptr);

double accuracy(const Classifier& f, const std::vector<Image>& images);

// Adam over a flat parameter list (shared by training loops and attacks).
class Adam {
public:
    Adam(double lr = 0.01, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

    void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads);
    void step(Tensor& param, const Tensor& grad);
    void reset();

    int t() const { return t_; }

private:
    void ensure(const std::vector<Tensor>& params);
    double lr_, b1_, b2_, eps_;
    int t_ = 0;
    std::vector<Tensor> m_, v_;
};

}  // namespace adv2::nn
