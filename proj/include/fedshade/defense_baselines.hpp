#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "fedshade/fl_engine.hpp"
#include "fedshade/tensor.hpp"

namespace fedshade {

struct DefenseConfig {
    std::string kind = "none";
    std::map<std::string, double> parameters;
    uint64_t seed = 0;
};

// Throws ConfigError for unknown kinds and for reserved-but-unimplemented
// ones (soteria, outpost, censor).
void validate_defense(const DefenseConfig& config);

// Per-layer L2 clipping followed by Gaussian noise of std sigma * clip_norm.
ClientUpdate dp_gradient(const ClientUpdate& update, double clip_norm, double sigma,
                         uint64_t seed);

// Keep the global top keep_ratio fraction of coordinates by magnitude.
ClientUpdate gradient_sparsify(const ClientUpdate& update, double keep_ratio);

// Elementwise clamp to [-threshold, threshold].
ClientUpdate gradient_clip(const ClientUpdate& update, double threshold);

// Pixel-space Gaussian noise; the "strong" preset is 4x the weak sigma.
ad::Tensor dp_image(const ad::Tensor& batch, double sigma, uint64_t seed);

constexpr double kDpImageWeakSigma = 0.05;
constexpr double kDpImageStrongSigma = 4.0 * kDpImageWeakSigma;

}  // namespace fedshade
