#pragma once

#include <string>

#include "adv2/tensor.hpp"

namespace adv2::io {

// 8-bit binary PGM/PPM. Tensors are (1,H,W) or (3,H,W) in [0,1].
void write_pnm(const std::string& path, const Tensor& chw);
Tensor read_pnm(const std::string& path);

// Minimal PNG writer (stored-deflate); accepts (H,W), (1,H,W) or (3,H,W).
void write_png(const std::string& path, const Tensor& img);

// Attribution map export: raw little-endian float32, row-major, plus a JSON
// sidecar {"h":..,"w":..,"interpreter":..} at path + ".json".
void write_map_raw(const std::string& path, const Tensor& map_hw, const std::string& interpreter);
Tensor read_map_raw(const std::string& path);

}  // namespace adv2::io
