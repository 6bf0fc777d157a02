#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedshade/task_model.hpp"
#include "fedshade/tensor.hpp"

namespace fedshade {

struct SaliencyMap {
    ad::Tensor map;      // [B, H, W], nonnegative, detached
    bool zero_warning = false;  // some sample produced an all-zero map (dead layer)
};

// Grad-CAM++ on a conv layer, target class = per-sample label, bilinearly
// upsampled to the input resolution.
SaliencyMap cam_saliency(TaskModel& model, const ad::Tensor& batch,
                         const std::vector<int64_t>& labels, const std::string& layer);

// nearest-neighbour-free bilinear resize of a [B, h, w] map to [B, H, W]
ad::Tensor upsample_bilinear(const ad::Tensor& maps, int64_t out_h, int64_t out_w);

}  // namespace fedshade
