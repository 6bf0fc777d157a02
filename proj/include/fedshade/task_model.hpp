#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fedshade/tensor.hpp"

namespace fedshade {

// Named gradients, ordered by parameter name for deterministic reduction.
using GradientSet = std::map<std::string, ad::Tensor>;

struct TaskModelSpec {
    int64_t in_channels = 1;
    int64_t image_size = 16;
    int64_t classes = 2;
    std::vector<int64_t> conv_widths = {8, 16};
    double bn_momentum = 0.1;
    double bn_eps = 1e-5;
};

struct BNLayerStats {
    std::vector<double> running_mean;
    std::vector<double> running_var;
};

struct BNStats {
    std::map<std::string, BNLayerStats> layers;
    double momentum = 0.1;
};

// Two conv+BN+ReLU+pool blocks and a linear head. Small enough that the
// inversion attacks can differentiate through its gradient computation.
class TaskModel {
  public:
    TaskModel() = default;
    TaskModel(TaskModelSpec spec, uint64_t seed);

    struct Forward {
        ad::Tensor logits;
        // post-ReLU conv activations by layer name ("conv1", "conv2")
        std::vector<std::pair<std::string, ad::Tensor>> conv_activations;
        ad::Tensor penultimate;  // pooled features feeding the head
        // graph-connected batch statistics per BN layer (training mode)
        std::map<std::string, std::pair<ad::Tensor, ad::Tensor>> batch_stats;
    };

    Forward forward(const ad::Tensor& batch, bool training, bool update_running = true);
    ad::Tensor loss(const ad::Tensor& batch, const std::vector<int64_t>& labels, bool training,
                    bool update_running = true);
    GradientSet gradients(const ad::Tensor& batch, const std::vector<int64_t>& labels);

    const std::vector<std::string>& param_names() const { return names_; }
    std::vector<ad::Tensor>& params() { return params_; }
    const std::vector<ad::Tensor>& params() const { return params_; }
    ad::Tensor& param(const std::string& name);
    int64_t param_count() const;

    BNStats bn_statistics() const;
    void set_bn_statistics(const BNStats& stats);
    std::vector<std::string> bn_layers() const { return {"bn1", "bn2"}; }
    std::vector<std::string> conv_layers() const { return {"conv1", "conv2"}; }
    const std::string& fc_weight_name() const { return fc_weight_name_; }

    TaskModel clone() const;
    const TaskModelSpec& spec() const { return spec_; }

    void load_parameters(const std::map<std::string, std::vector<double>>& values);
    std::map<std::string, std::vector<double>> dump_parameters() const;

  private:
    ad::Tensor bn_forward(const ad::Tensor& x, const std::string& layer, bool training,
                          bool update_running, Forward& rec);

    TaskModelSpec spec_;
    std::vector<std::string> names_;
    std::vector<ad::Tensor> params_;
    std::map<std::string, size_t> index_;
    std::map<std::string, BNLayerStats> running_;
    std::string fc_weight_name_ = "fc.weight";
};

}  // namespace fedshade
