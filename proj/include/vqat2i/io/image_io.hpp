#pragma once

#include "vqat2i/core/tensor.hpp"

#include <filesystem>

namespace vqat2i::io {

/// PNG round-trip for images stored as [3,H,W] tensors with values in [-1,1].
void save_png(const std::filesystem::path& file, const Tensor& chw);
Tensor load_png(const std::filesystem::path& file);

/// Tiles a batch [N,3,H,W] into a grid image with `cols` columns.
Tensor tile_grid(const Tensor& batch, index_t cols);

}  // namespace vqat2i::io
