#include "fedshade/shadow_generator.hpp"

#include <cmath>

#include "fedshade/errors.hpp"
#include "fedshade/optim.hpp"

namespace fedshade {

using namespace ad;

ShadowGenerator::ShadowGenerator(ShadowGeneratorSpec spec, uint64_t seed) : spec_(std::move(spec)) {
    if (spec_.image_size % 4 != 0) throw ConfigError("generator image size must be divisible by 4");
    std::mt19937_64 rng(seed);
    auto add_param = [&](const std::string& name, Shape s, double stddev) {
        index_[name] = params_.size();
        names_.push_back(name);
        params_.push_back(stddev > 0 ? Tensor::randn(s, rng, stddev, true)
                                     : Tensor::zeros(s, true));
    };
    int64_t L = spec_.latent_dim, S = spec_.style_dim, G = spec_.base_channels;
    int64_t side = spec_.image_size / 4;
    add_param("map.fc1.weight", {S, L}, std::sqrt(2.0 / L));
    add_param("map.fc1.bias", {S}, 0.0);
    add_param("map.fc2.weight", {S, S}, std::sqrt(2.0 / S));
    add_param("map.fc2.bias", {S}, 0.0);
    add_param("gen.fc.weight", {G * side * side, S}, std::sqrt(2.0 / S));
    add_param("gen.fc.bias", {G * side * side}, 0.0);
    add_param("gen.up1.weight", {G, G / 2, 4, 4}, std::sqrt(2.0 / (G * 16)));
    add_param("gen.up1.bias", {G / 2}, 0.0);
    add_param("gen.up2.weight", {G / 2, spec_.out_channels, 4, 4}, std::sqrt(2.0 / (G * 8)));
    add_param("gen.up2.bias", {spec_.out_channels}, 0.0);
}

Tensor& ShadowGenerator::param(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown generator parameter " + name);
    return params_[it->second];
}

Tensor ShadowGenerator::generate(const Tensor& z) {
    const Shape& zs = z.shape();
    if (zs.size() != 2 || zs[1] != spec_.latent_dim)
        throw ConfigError("latent shape " + shape_str(zs) + " does not match latent_dim");
    int64_t B = zs[0], G = spec_.base_channels, side = spec_.image_size / 4;
    Tensor style = relu(linear(z, param("map.fc1.weight"), param("map.fc1.bias")));
    style = linear(style, param("map.fc2.weight"), param("map.fc2.bias"));
    Tensor h = relu(linear(style, param("gen.fc.weight"), param("gen.fc.bias")));
    h = reshape(h, {B, G, side, side});
    h = relu(conv_transpose2d(h, param("gen.up1.weight"), param("gen.up1.bias"), 2, 1));
    h = conv_transpose2d(h, param("gen.up2.weight"), param("gen.up2.bias"), 2, 1);
    return h;
}

std::vector<Tensor> ShadowGenerator::generator_params() {
    std::vector<Tensor> out;
    for (size_t i = 0; i < names_.size(); ++i)
        if (names_[i].rfind("gen.", 0) == 0) out.push_back(params_[i]);
    return out;
}

std::vector<std::string> ShadowGenerator::generator_param_names() const {
    std::vector<std::string> out;
    for (const auto& n : names_)
        if (n.rfind("gen.", 0) == 0) out.push_back(n);
    return out;
}

std::vector<Tensor> ShadowGenerator::mapper_params() {
    std::vector<Tensor> out;
    for (size_t i = 0; i < names_.size(); ++i)
        if (names_[i].rfind("map.", 0) == 0) out.push_back(params_[i]);
    return out;
}

ShadowGenerator ShadowGenerator::clone() const {
    ShadowGenerator g(spec_, 0);
    for (size_t i = 0; i < params_.size(); ++i) g.params_[i].raw() = params_[i].data();
    return g;
}

void ShadowGenerator::load_parameters(const std::map<std::string, std::vector<double>>& values) {
    for (const auto& [name, v] : values) {
        Tensor& p = param(name);
        if (v.size() != p.data().size())
            throw ConfigError("generator parameter size mismatch for " + name);
        p.raw() = v;
    }
}

std::map<std::string, std::vector<double>> ShadowGenerator::dump_parameters() const {
    std::map<std::string, std::vector<double>> out;
    for (size_t i = 0; i < names_.size(); ++i) out[names_[i]] = params_[i].data();
    return out;
}

ShadowGenerator pretrain_shadow(const ShadowGenerator& generator,
                                const std::vector<Tensor>& public_images, int64_t steps,
                                uint64_t seed, double lr, std::vector<double>* loss_history) {
    ShadowGenerator g = generator.clone();
    if (steps == 0) return g;
    if (public_images.empty()) throw TrainingError("no public images for pretraining");
    int64_t B = static_cast<int64_t>(public_images.size());
    std::mt19937_64 rng(seed);
    Tensor z = Tensor::randn({B, g.spec().latent_dim}, rng, 1.0, true);
    // stack targets
    const Shape& is = public_images[0].shape();
    std::vector<double> tv;
    for (const auto& img : public_images) tv.insert(tv.end(), img.data().begin(), img.data().end());
    Tensor target = Tensor::from(std::move(tv), {B, is[0], is[1], is[2]});

    std::vector<Tensor> vars = g.params();
    vars.push_back(z);
    Adam opt(lr);
    for (int64_t step = 0; step < steps; ++step) {
        Tensor diff = sub(g.generate(z), target);
        Tensor loss = mean_all(mul(diff, diff));
        if (!loss.all_finite() || loss.item() > 1e3)
            throw TrainingError("shadow pretraining diverged at step " + std::to_string(step));
        if (loss_history) loss_history->push_back(loss.item());
        auto grads = grad(loss, vars);
        opt.step(vars, grads);
    }
    return g;
}

}  // namespace fedshade
