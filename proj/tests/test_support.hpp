#pragma once

#include "adv2/dataset.hpp"
#include "adv2/interpreters.hpp"
#include "adv2/nn.hpp"

namespace testsup {

using namespace adv2;

inline data::SynthConfig gray_config() {
    data::SynthConfig sc;
    sc.kind = "gray28";
    sc.signal_amplitude = 0.18;
    sc.fine_amplitude = 0.06;
    return sc;
}

inline data::Dataset& gray_data() {
    static data::Dataset ds = data::make_synthetic(gray_config(), 700, 11);
    return ds;
}

// One small trained classifier shared across the test binary.
inline const nn::Classifier& tiny_classifier() {
    static nn::Classifier f = [] {
        auto& ds = gray_data();
        std::vector<nn::Image> train(ds.images.begin(), ds.images.begin() + 500);
        nn::TrainConfig cfg;
        cfg.epochs = 12;
        cfg.lr = 2e-3;
        cfg.seed = 5;
        return nn::train_classifier(train, nn::arch_preset("cnn_gray28"), cfg);
    }();
    return f;
}

inline std::vector<nn::Image> holdout_batch(std::size_t n) {
    auto& ds = gray_data();
    std::vector<nn::Image> out(ds.images.end() - static_cast<long>(n), ds.images.end());
    return out;
}

// A small architecture for gradient checks (cheap forward).
inline nn::Architecture micro_arch(int in_ch = 1, int hw = 9, int classes = 3) {
    nn::Architecture a;
    a.name = "micro";
    a.in_channels = in_ch;
    a.in_h = a.in_w = hw;
    a.convs = {{4, 3, 1, 1}, {6, 3, 2, 1}, {6, 3, 1, 1}};
    a.head = nn::HeadKind::gap;
    a.num_classes = classes;
    return a;
}

inline Tensor random_image(std::vector<int> shape, adv2::Rng& rng) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(0.05, 0.95);
    return t;
}

}  // namespace testsup
