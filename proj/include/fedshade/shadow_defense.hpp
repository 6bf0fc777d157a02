#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "fedshade/client_update.hpp"
#include "fedshade/dataset.hpp"
#include "fedshade/saliency.hpp"
#include "fedshade/shadow_generator.hpp"
#include "fedshade/task_model.hpp"
#include "fedshade/tensor.hpp"

namespace fedshade {

struct ShadowLossWeights {
    double w_dist = 1.0;
    double w_tv = 1e-2;
    double w_bn = 1e-2;
    double w_l2 = 1e-4;
    double w_mse = 1.0;
};

// Per-client shadow model state: generator, per-sample latent codes, and the
// most recent reconstructions (reused once fine-tuning terminates).
struct ShadowState {
    ShadowGenerator generator;
    std::map<int64_t, ad::Tensor> latents;  // sample id -> [latent_dim]
    double ema_alpha_shadow = 0.5;
    int64_t r_shadow = 0;  // terminal round for shadow updates
    int64_t finetune_epochs = 5;
    std::map<int64_t, ad::Tensor> last_reconstructions;  // sample id -> [C,H,W]
};

// Per-sample noise pipeline state; all maps are H x W.
struct NoiseState {
    ad::Tensor n1, n2, n3, n4, n;
    ad::Tensor l_cam;
    bool has_n3 = false;
};

struct ShadowDefenseConfig {
    double lr = 0.1;
    int64_t local_rounds = 1;
    uint64_t seed = 0;
    double temperature = 0.5;   // T for both the foreground and noise softmax
    double top_fraction = 0.3;  // CAM percentile
    double alpha_n = 0.19;
    std::string schedule = "increase";  // increase | fix | decrease
    double ema_alpha_noise = 0.9;
    double alpha_cam_min = 0.1;
    double alpha_cam_max = 0.5;
    double pixel_min = 0.0;
    double pixel_max = 1.0;
    ShadowLossWeights weights;
};

// Optimize per-sample latents against the frozen generator; stops early after
// early_stop epochs without improvement.
void pretrain_latents(ShadowState& state, const ClientDataset& client, int64_t steps,
                      int64_t early_stop, uint64_t seed, double lr = 5e-2,
                      std::vector<double>* loss_history = nullptr);

// Clean local pass on a throwaway copy; the global model is never mutated.
ClientUpdate pseudo_local_train(const ClientDataset& client, const TaskModel& global_model,
                                double lr, int64_t local_rounds, int64_t round,
                                uint64_t seed);

// One round of Eq.-style shadow fine-tuning: only decoder parameters move;
// returns the fine-tuned generator and per-sample reconstructions.
std::pair<ShadowGenerator, std::map<int64_t, ad::Tensor>> finetune_shadow(
    const ShadowState& state, const ClientUpdate& victim, const ClientDataset& client,
    const TaskModel& global_model, const ShadowLossWeights& weights, int64_t round,
    std::vector<double>* loss_history = nullptr);

// Momentum merge of the fine-tuned decoder into the kept shadow model.
void ema_shadow(ShadowState& state, const ShadowGenerator& finetuned);

// L_CAM: softmax((mask * saliency) / T) over all pixels, mask = top fraction.
ad::Tensor foreground_map(const ad::Tensor& saliency, double top_fraction, double T,
                          bool* zero_warning = nullptr);

// N1: reciprocal softmax of the channel-mean squared reconstruction error.
ad::Tensor relative_noise(const ad::Tensor& x, const ad::Tensor& x_rec, double T);

// Cumulative-histogram equalization onto 256 levels (pre-softmax values).
ad::Tensor histogram_equalize(const ad::Tensor& n1);
// N2 = softmax(histogram_equalize(N1)); entries >= 0, sum to 1.
ad::Tensor equalize_noise(const ad::Tensor& n1);

// N3 momentum update; pass has_prev=false on the first round.
ad::Tensor ema_noise(const ad::Tensor& n3_prev, bool has_prev, const ad::Tensor& n2,
                     double alpha);

double alpha_cam(int64_t r, int64_t R, double alpha_min, double alpha_max);
ad::Tensor attenuate_foreground(const ad::Tensor& n3, const ad::Tensor& l_cam, int64_t r,
                                int64_t R, double alpha_min, double alpha_max);

double noise_amplitude(double alpha_n, int64_t r, int64_t R, const std::string& schedule);
// N = |max(x)/max(N4) * w_N| * N4; zero map -> zero noise with warning.
ad::Tensor scale_noise(const ad::Tensor& n4, const ad::Tensor& x, double alpha_n, int64_t r,
                       int64_t R, const std::string& schedule, bool* zero_warning = nullptr);

// Full per-round pipeline; returns the protected update and mutates states.
ClientUpdate defend_round(const ClientDataset& client, const TaskModel& global_model,
                          ShadowState& shadow, std::map<int64_t, NoiseState>& noise,
                          int64_t r, int64_t R, const ShadowDefenseConfig& config);

}  // namespace fedshade
