#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fedshade/tensor.hpp"

namespace fedshade {

struct ShadowGeneratorSpec {
    int64_t latent_dim = 32;
    int64_t style_dim = 64;
    int64_t base_channels = 16;
    int64_t out_channels = 1;
    int64_t image_size = 16;
};

// Latent mapper MLP followed by a transposed-conv image decoder. The split
// matters: fine-tuning during federated rounds touches only the decoder.
class ShadowGenerator {
  public:
    ShadowGenerator() = default;
    ShadowGenerator(ShadowGeneratorSpec spec, uint64_t seed);

    // z: [B, latent_dim] -> images [B, C, H, W]
    ad::Tensor generate(const ad::Tensor& z);

    const std::vector<std::string>& param_names() const { return names_; }
    std::vector<ad::Tensor>& params() { return params_; }
    const std::vector<ad::Tensor>& params() const { return params_; }
    ad::Tensor& param(const std::string& name);

    // decoder ("gen.") parameters only, in name order
    std::vector<ad::Tensor> generator_params();
    std::vector<std::string> generator_param_names() const;
    std::vector<ad::Tensor> mapper_params();

    ShadowGenerator clone() const;
    const ShadowGeneratorSpec& spec() const { return spec_; }

    void load_parameters(const std::map<std::string, std::vector<double>>& values);
    std::map<std::string, std::vector<double>> dump_parameters() const;

  private:
    ShadowGeneratorSpec spec_;
    std::vector<std::string> names_;
    std::vector<ad::Tensor> params_;
    std::map<std::string, size_t> index_;
};

// Joint reconstruction pretraining of decoder+mapper with per-sample latents
// on a public split; returns the trained generator. Images are expected in
// the space the defense operates in (normalized).
ShadowGenerator pretrain_shadow(const ShadowGenerator& generator,
                                const std::vector<ad::Tensor>& public_images, int64_t steps,
                                uint64_t seed, double lr = 1e-2,
                                std::vector<double>* loss_history = nullptr);

}  // namespace fedshade
