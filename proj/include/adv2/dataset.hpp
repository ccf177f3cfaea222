#pragma once

#include <string>
#include <vector>

#include "adv2/nn.hpp"

namespace adv2::data {

struct Dataset {
    std::vector<nn::Image> images;
    int num_classes = 10;
    std::string kind;  // "gray28" | "rgb32"
};

// Procedurally generated texture/shape datasets. Each sample carries one
// localized object whose interior holds a class-specific oriented grating;
// the label is the grating class. Deterministic given (kind, n, seed).
// Class evidence appears at two scales inside one luminance-lifted object:
// a coarse oriented grating (robust to mild filtering) and a fine grating
// (large perturbations of the classifier live here). Background distractor
// patches carry random-class textures without the lift, so a trained model
// must gate on the object context rather than pooling texture globally.
struct SynthConfig {
    std::string kind = "gray28";
    int num_classes = 10;
    double signal_amplitude = 0.14;       // coarse grating
    double fine_amplitude = 0.05;         // fine grating
    double fine_period = 2.4;             // pixels, near the sampling limit
    double fine_dropout = 0.3;  // fraction of samples with attenuated fine detail
    double background_amplitude = 0.05;
    double pixel_noise = 0.01;
    double color_contrast = 0.15;   // rgb kinds: per-class hue separation
    double object_lift = 0.15;      // luminance offset marking the object
    int distractors = 2;            // background patches with random textures
};

Dataset make_synthetic(const SynthConfig& cfg, int n, std::uint64_t seed);

// Directory layout: <dir>/labels.csv with header "path,label"; image paths
// are relative to <dir>. Images are 8-bit PGM/PPM.
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

std::vector<nn::Image> slice(const Dataset& ds, std::size_t from, std::size_t count);

}  // namespace adv2::data
