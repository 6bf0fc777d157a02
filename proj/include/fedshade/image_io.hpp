#pragma once

#include <filesystem>
#include <string>

#include "fedshade/tensor.hpp"

namespace fedshade {

// Netpbm readers/writers (P2/P3 ascii, P5/P6 binary). Images are tensors of
// shape [C,H,W] with values in [0,1].
ad::Tensor read_image(const std::filesystem::path& file);
void write_image(const std::filesystem::path& file, const ad::Tensor& img);

// Nearest-neighbour resize to res x res.
ad::Tensor resize_image(const ad::Tensor& img, int64_t res);

}  // namespace fedshade
