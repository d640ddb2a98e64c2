#pragma once

#include "mtl/tensor.hpp"

#include <filesystem>

namespace mtl {

/// 8-bit grayscale or RGB PNG as a CHW tensor in [0, 1].
Tensor read_png(const std::filesystem::path& path);

/// Writes a CHW tensor (1 or 3 channels, values in [0, 1]) as 8-bit PNG.
void write_png(const std::filesystem::path& path, const Tensor& chw);

}  // namespace mtl
