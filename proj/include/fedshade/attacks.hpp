#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "fedshade/client_update.hpp"
#include "fedshade/shadow_generator.hpp"
#include "fedshade/task_model.hpp"
#include "fedshade/tensor.hpp"

namespace fedshade {

struct AttackConfig {
    std::string kind = "optimization";  // or "model_based"
    int64_t iterations = 2000;
    double lr = 0.1;
    double tv_weight = 1e-3;
    double bn_weight = 1e-3;
    double l2_weight = 1e-5;
    std::string distance;  // "l2" | "cosine"; empty = per-kind default
    int64_t restarts = 3;
    uint64_t seed = 0;
    int64_t batch_size = 0;  // 0: assume sample_count images
    double pixel_min = 0.0;
    double pixel_max = 1.0;
};

struct LabelGuess {
    std::vector<int64_t> labels;
    bool low_confidence = false;
    bool heuristic = false;  // batch > 1 uses the row-sum heuristic
};

struct AttackResult {
    std::vector<ad::Tensor> reconstructions;  // each [C, H, W]
    std::vector<int64_t> inferred_labels;
    bool low_confidence = false;
    double final_loss = 0.0;
    std::vector<double> restart_losses;
    double stage1_loss = 0.0;  // model-based attack only
    double stage2_loss = 0.0;
};

// iDLG-style label inference from the FC weight-gradient row signs.
LabelGuess infer_labels(const ClientUpdate& update, int64_t classes, int64_t batch_size,
                        const std::string& fc_weight_name = "fc.weight");

// anisotropic total variation: mean |neighbor difference| over valid pairs
ad::Tensor tv_regularizer(const ad::Tensor& image);

// sum over layers of ||mu_dummy - mu_target||^2 + ||var_dummy - var_target||^2
ad::Tensor bn_regularizer(
    const std::map<std::string, std::pair<ad::Tensor, ad::Tensor>>& dummy_stats,
    const BNStats& target);

// D(g, g_hat): "l2" squared distance or "cosine" distance over flattened grads
ad::Tensor gradient_distance(const GradientSet& target, const std::vector<std::string>& names,
                             const std::vector<ad::Tensor>& dummy, const std::string& kind);

// Generic restarted pixel-space driver: minimizes loss_fn over a clamped
// image tensor of the given shape. Returns (best images, best loss).
std::pair<ad::Tensor, double> optimize_images(
    const ad::Shape& shape, const std::function<ad::Tensor(const ad::Tensor&)>& loss_fn,
    const AttackConfig& config, std::vector<double>* restart_losses = nullptr);

AttackResult optimization_gia(const ClientUpdate& update, const TaskModel& model_arch,
                              const AttackConfig& config);

AttackResult model_gia(const ClientUpdate& update, const TaskModel& model_arch,
                       const ShadowGenerator& attacker_generator, const AttackConfig& config);

}  // namespace fedshade
