#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "fedshade/saliency.hpp"
#include "fedshade/task_model.hpp"
#include "fedshade/tensor.hpp"

namespace fedshade {

struct ImageMetrics {
    double mse = 0;
    double psnr = 0;  // dB, capped at 100
    double ssim = 0;
    double perceptual = 0;
};

using PerceptualFn = std::function<double(const ad::Tensor&, const ad::Tensor&)>;

// Activation distance on a frozen reference classifier; stands in for LPIPS.
PerceptualFn make_perceptual(const TaskModel& reference);

double ssim(const ad::Tensor& a, const ad::Tensor& b, double peak = 1.0);

ImageMetrics image_metrics(const ad::Tensor& a, const ad::Tensor& b, double peak = 1.0,
                           const PerceptualFn& perceptual = {});

// Each reconstruction matched to the original with the highest SSIM.
std::vector<int64_t> best_match(const std::vector<ad::Tensor>& recons,
                                const std::vector<ad::Tensor>& originals);

// Metrics restricted to the bounding box of the top-fraction saliency pixels
// (expanded to at least 8x8).
ImageMetrics target_region_metrics(const ad::Tensor& recon, const ad::Tensor& original,
                                   const ad::Tensor& saliency, double top_fraction,
                                   double peak = 1.0, const PerceptualFn& perceptual = {});

double rdlv_value(double ssim_recon, double ssim_prior);  // Relative Data Leakage Value
std::optional<double> rdlv(const ad::Tensor& x, const ad::Tensor& x_s,
                           const ad::Tensor& prior);

// Penultimate-layer embedding of one [C,H,W] image under the reference model.
std::vector<double> embed(TaskModel& reference, const ad::Tensor& image);

// Fraction of reconstructions whose true source appears in the top-k training
// images by cosine similarity of embeddings.
double iip(const std::vector<std::vector<double>>& recon_embeddings,
           const std::vector<std::vector<double>>& train_embeddings,
           const std::vector<int64_t>& source_ids, int64_t k);

}  // namespace fedshade
