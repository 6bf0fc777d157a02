#include "fedshade/task_model.hpp"

#include <cmath>

#include "fedshade/errors.hpp"

namespace fedshade {

using namespace ad;

TaskModel::TaskModel(TaskModelSpec spec, uint64_t seed) : spec_(std::move(spec)) {
    if (spec_.conv_widths.size() != 2) throw ConfigError("task model expects two conv widths");
    if (spec_.image_size % 4 != 0) throw ConfigError("image size must be divisible by 4");
    std::mt19937_64 rng(seed);
    auto add_param = [&](const std::string& name, Shape s, double stddev) {
        index_[name] = params_.size();
        names_.push_back(name);
        Tensor t = stddev > 0 ? Tensor::randn(s, rng, stddev, true) : Tensor::zeros(s, true);
        params_.push_back(t);
    };
    int64_t c0 = spec_.in_channels, c1 = spec_.conv_widths[0], c2 = spec_.conv_widths[1];
    add_param("conv1.weight", {c1, c0, 3, 3}, std::sqrt(2.0 / (c0 * 9)));
    add_param("conv1.bias", {c1}, 0.0);
    add_param("bn1.weight", {c1}, 0.0);
    for (auto& v : param("bn1.weight").raw()) v = 1.0;
    add_param("bn1.bias", {c1}, 0.0);
    add_param("conv2.weight", {c2, c1, 3, 3}, std::sqrt(2.0 / (c1 * 9)));
    add_param("conv2.bias", {c2}, 0.0);
    add_param("bn2.weight", {c2}, 0.0);
    for (auto& v : param("bn2.weight").raw()) v = 1.0;
    add_param("bn2.bias", {c2}, 0.0);
    int64_t feat = c2 * (spec_.image_size / 4) * (spec_.image_size / 4);
    add_param("fc.weight", {spec_.classes, feat}, std::sqrt(1.0 / feat));
    add_param("fc.bias", {spec_.classes}, 0.0);

    running_["bn1"] = {std::vector<double>(c1, 0.0), std::vector<double>(c1, 1.0)};
    running_["bn2"] = {std::vector<double>(c2, 0.0), std::vector<double>(c2, 1.0)};
}

Tensor& TaskModel::param(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter " + name);
    return params_[it->second];
}

int64_t TaskModel::param_count() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
}

Tensor TaskModel::bn_forward(const Tensor& x, const std::string& layer, bool training,
                             bool update_running, Forward& rec) {
    auto& stats = running_.at(layer);
    int64_t C = x.shape()[1];
    Tensor gamma = reshape(param(layer + ".weight"), {1, C, 1, 1});
    Tensor beta = reshape(param(layer + ".bias"), {1, C, 1, 1});
    Tensor mu, var;
    if (training) {
        mu = mean(x, {0, 2, 3}, true);
        Tensor centered = sub(x, mu);
        var = mean(mul(centered, centered), {0, 2, 3}, true);
        rec.batch_stats[layer] = {reshape(mu, {C}), reshape(var, {C})};
        if (update_running) {
            double m = spec_.bn_momentum;
            for (int64_t c = 0; c < C; ++c) {
                stats.running_mean[c] = (1 - m) * stats.running_mean[c] + m * mu.data()[c];
                stats.running_var[c] = (1 - m) * stats.running_var[c] + m * var.data()[c];
            }
        }
    } else {
        mu = Tensor::from(stats.running_mean, {1, C, 1, 1});
        var = Tensor::from(stats.running_var, {1, C, 1, 1});
    }
    Tensor xhat = div(sub(x, mu), sqrt(add_scalar(var, spec_.bn_eps)));
    return add(mul(gamma, xhat), beta);
}

TaskModel::Forward TaskModel::forward(const Tensor& batch, bool training, bool update_running) {
    const Shape& s = batch.shape();
    if (s.size() != 4 || s[1] != spec_.in_channels || s[2] != spec_.image_size ||
        s[3] != spec_.image_size)
        throw ConfigError("input shape " + shape_str(s) + " does not match model spec");
    Forward rec;
    Tensor h = conv2d(batch, param("conv1.weight"), param("conv1.bias"), 1, 1);
    h = relu(bn_forward(h, "bn1", training, update_running, rec));
    rec.conv_activations.push_back({"conv1", h});
    h = avg_pool2d(h, 2);
    h = conv2d(h, param("conv2.weight"), param("conv2.bias"), 1, 1);
    h = relu(bn_forward(h, "bn2", training, update_running, rec));
    rec.conv_activations.push_back({"conv2", h});
    h = avg_pool2d(h, 2);
    rec.penultimate = reshape(h, {s[0], -1});
    rec.logits = linear(rec.penultimate, param("fc.weight"), param("fc.bias"));
    return rec;
}

Tensor TaskModel::loss(const Tensor& batch, const std::vector<int64_t>& labels, bool training,
                       bool update_running) {
    Forward f = forward(batch, training, update_running);
    return cross_entropy(f.logits, labels);
}

GradientSet TaskModel::gradients(const Tensor& batch, const std::vector<int64_t>& labels) {
    Tensor l = loss(batch, labels, true, false);
    if (!l.all_finite()) throw NumericError("non-finite loss");
    auto gs = grad(l, params_);
    GradientSet out;
    for (size_t i = 0; i < names_.size(); ++i) out[names_[i]] = gs[i].detach();
    return out;
}

BNStats TaskModel::bn_statistics() const {
    BNStats s;
    s.momentum = spec_.bn_momentum;
    s.layers = running_;  // copy: later training never mutates the snapshot
    return s;
}

void TaskModel::set_bn_statistics(const BNStats& stats) {
    for (const auto& [k, v] : stats.layers) {
        if (!running_.count(k)) throw ProtocolError("unknown BN layer " + k);
        running_[k] = v;
    }
}

TaskModel TaskModel::clone() const {
    TaskModel m(spec_, 0);
    for (size_t i = 0; i < params_.size(); ++i) m.params_[i].raw() = params_[i].data();
    m.running_ = running_;
    return m;
}

void TaskModel::load_parameters(const std::map<std::string, std::vector<double>>& values) {
    for (const auto& [name, v] : values) {
        Tensor& p = param(name);
        if (v.size() != p.data().size()) throw ConfigError("parameter size mismatch for " + name);
        p.raw() = v;
    }
}

std::map<std::string, std::vector<double>> TaskModel::dump_parameters() const {
    std::map<std::string, std::vector<double>> out;
    for (size_t i = 0; i < names_.size(); ++i) out[names_[i]] = params_[i].data();
    return out;
}

}  // namespace fedshade
