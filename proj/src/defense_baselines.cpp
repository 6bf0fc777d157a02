#include "fedshade/defense_baselines.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "fedshade/errors.hpp"

namespace fedshade {

using namespace ad;

void validate_defense(const DefenseConfig& config) {
    static const std::set<std::string> known = {"none",        "dp_gradient", "dp_image_weak",
                                               "dp_image_strong", "sparsify", "clip",
                                               "shadow"};
    static const std::set<std::string> reserved = {"soteria", "outpost", "censor"};
    if (reserved.count(config.kind))
        throw ConfigError("defense kind '" + config.kind + "' is not implemented");
    if (!known.count(config.kind))
        throw ConfigError("unknown defense kind '" + config.kind + "'");
    auto check_range = [&](const std::string& key, double lo, double hi) {
        auto it = config.parameters.find(key);
        if (it != config.parameters.end() && (it->second < lo || it->second > hi))
            throw ConfigError("defense parameter " + key + " out of range");
    };
    check_range("keep_ratio", 1e-12, 1.0);
    check_range("sigma", 0.0, 1e9);
    check_range("clip_norm", 1e-12, 1e9);
    check_range("threshold", 1e-12, 1e9);
}

ClientUpdate dp_gradient(const ClientUpdate& update, double clip_norm, double sigma,
                         uint64_t seed) {
    if (clip_norm <= 0) throw ConfigError("clip_norm must be positive");
    if (sigma < 0) throw ConfigError("sigma must be nonnegative");
    ClientUpdate out = update;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, sigma * clip_norm);
    for (auto& [name, g] : out.gradients) {
        double sq = 0;
        for (double v : g.data()) sq += v * v;
        double scale = std::min(1.0, clip_norm / std::max(std::sqrt(sq), 1e-300));
        std::vector<double> v = g.data();
        for (auto& x : v) {
            x *= scale;
            if (sigma > 0) x += noise(rng);
        }
        out.gradients[name] = Tensor::from(std::move(v), g.shape());
    }
    return out;
}

ClientUpdate gradient_sparsify(const ClientUpdate& update, double keep_ratio) {
    if (keep_ratio <= 0 || keep_ratio > 1) throw ConfigError("keep_ratio must be in (0,1]");
    struct Coord {
        double mag;
        const std::string* name;
        int64_t idx;
    };
    std::vector<Coord> coords;
    for (const auto& [name, g] : update.gradients)
        for (int64_t i = 0; i < g.size(); ++i)
            coords.push_back({std::abs(g.data()[i]), &name, i});
    int64_t k = static_cast<int64_t>(std::ceil(keep_ratio * double(coords.size())));
    // ties broken by parameter-name order then index (map iteration is sorted)
    std::sort(coords.begin(), coords.end(), [](const Coord& a, const Coord& b) {
        if (a.mag != b.mag) return a.mag > b.mag;
        if (*a.name != *b.name) return *a.name < *b.name;
        return a.idx < b.idx;
    });
    std::map<std::string, std::set<int64_t>> keep;
    for (int64_t i = 0; i < k && i < int64_t(coords.size()); ++i)
        keep[*coords[i].name].insert(coords[i].idx);

    ClientUpdate out = update;
    for (auto& [name, g] : out.gradients) {
        std::vector<double> v(g.size(), 0.0);
        const auto& ks = keep[name];
        for (int64_t i : ks) v[i] = g.data()[i];
        out.gradients[name] = Tensor::from(std::move(v), g.shape());
    }
    return out;
}

ClientUpdate gradient_clip(const ClientUpdate& update, double threshold) {
    if (threshold <= 0) throw ConfigError("threshold must be positive");
    ClientUpdate out = update;
    for (auto& [name, g] : out.gradients) {
        std::vector<double> v = g.data();
        for (auto& x : v) x = std::clamp(x, -threshold, threshold);
        out.gradients[name] = Tensor::from(std::move(v), g.shape());
    }
    return out;
}

Tensor dp_image(const Tensor& batch, double sigma, uint64_t seed) {
    if (sigma < 0) throw ConfigError("sigma must be nonnegative");
    if (sigma == 0) return batch.clone();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, sigma);
    std::vector<double> v = batch.data();
    for (auto& x : v) x += noise(rng);
    return Tensor::from(std::move(v), batch.shape());
}

}  // namespace fedshade
