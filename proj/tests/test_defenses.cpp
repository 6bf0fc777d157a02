#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fedshade/defense_baselines.hpp"
#include "fedshade/errors.hpp"

using namespace fedshade;
using namespace fedshade::ad;

namespace {
ClientUpdate make_update(std::map<std::string, std::vector<double>> grads) {
    ClientUpdate u;
    u.sample_count = 4;
    u.round = 3;
    u.client_id = 2;
    u.bn_stats.layers["bn1"] = {{0.5}, {1.5}};
    for (auto& [name, v] : grads) {
        Shape s{int64_t(v.size())};
        u.gradients[name] = Tensor::from(std::move(v), std::move(s));
    }
    return u;
}

void check_metadata_preserved(const ClientUpdate& in, const ClientUpdate& out) {
    CHECK(out.sample_count == in.sample_count);
    CHECK(out.round == in.round);
    CHECK(out.client_id == in.client_id);
    CHECK(out.bn_stats.layers.at("bn1").running_mean ==
          in.bn_stats.layers.at("bn1").running_mean);
}
}  // namespace

TEST_CASE("dp_gradient clips by layer norm and preserves metadata") {
    // layer with L2 norm 2 gets scaled by clip/norm = 0.5 exactly
    auto u = make_update({{"a", {2.0, 0.0}}, {"b", {0.3, 0.4}}});  // norms 2 and 0.5
    auto out = dp_gradient(u, 1.0, 0.0, 1);
    CHECK(out.gradients.at("a").data() == std::vector<double>{1.0, 0.0});
    CHECK(out.gradients.at("b").data() == std::vector<double>{0.3, 0.4});  // within clip
    check_metadata_preserved(u, out);

    CHECK_THROWS_AS(dp_gradient(u, 0.0, 0.1, 1), ConfigError);
    CHECK_THROWS_AS(dp_gradient(u, 1.0, -0.1, 1), ConfigError);
}

TEST_CASE("dp_gradient noise is centered on the clipped gradient") {
    auto u = make_update({{"a", {2.0, 0.0}}});
    const double sigma = 0.3, clip = 1.0;
    const int trials = 10000;
    std::vector<double> mean(2, 0.0);
    for (int t = 0; t < trials; ++t) {
        auto out = dp_gradient(u, clip, sigma, 1000 + t);
        for (int i = 0; i < 2; ++i) mean[i] += out.gradients.at("a").data()[i] / trials;
    }
    // Monte-Carlo bound: 3 * (sigma*clip) / sqrt(trials)
    double bound = 3.0 * sigma * clip / 100.0;
    CHECK(std::abs(mean[0] - 1.0) < bound);
    CHECK(std::abs(mean[1] - 0.0) < bound);

    auto a = dp_gradient(u, clip, sigma, 42);
    auto b = dp_gradient(u, clip, sigma, 42);
    CHECK(a.gradients.at("a").data() == b.gradients.at("a").data());
}

TEST_CASE("gradient_sparsify keeps the top magnitudes globally") {
    auto u = make_update({{"a", {0.1, -0.5, 0.02, 0.3}}});
    auto out = gradient_sparsify(u, 0.5);
    CHECK(out.gradients.at("a").data() == std::vector<double>{0.0, -0.5, 0.0, 0.3});
    check_metadata_preserved(u, out);

    auto ident = gradient_sparsify(u, 1.0);
    CHECK(ident.gradients.at("a").data() == u.gradients.at("a").data());

    // tie-free input: exactly ceil(ratio*d) nonzeros, split across layers
    auto u2 = make_update({{"a", {0.11, 0.07, 0.05}}, {"b", {0.09, 0.03}}});
    auto out2 = gradient_sparsify(u2, 0.6);  // ceil(3) = 3 survivors
    int nonzero = 0;
    for (const auto& [name, g] : out2.gradients)
        for (double v : g.data()) nonzero += v != 0.0;
    CHECK(nonzero == 3);
    CHECK(out2.gradients.at("a").data()[0] == 0.11);
    CHECK(out2.gradients.at("b").data()[0] == 0.09);
    CHECK(out2.gradients.at("a").data()[2] == 0.0);

    // idempotence: sparsify twice with the same ratio changes nothing
    auto twice = gradient_sparsify(out2, 0.6);
    for (const auto& [name, g] : twice.gradients)
        CHECK(g.data() == out2.gradients.at(name).data());

    CHECK_THROWS_AS(gradient_sparsify(u, 0.0), ConfigError);
    CHECK_THROWS_AS(gradient_sparsify(u, 1.5), ConfigError);
}

TEST_CASE("gradient_clip clamps elementwise") {
    auto u = make_update({{"a", {5.0, -3.0, 0.2}}});
    auto out = gradient_clip(u, 1.0);
    CHECK(out.gradients.at("a").data() == std::vector<double>{1.0, -1.0, 0.2});
    check_metadata_preserved(u, out);

    auto small = make_update({{"a", {0.1, -0.3}}});
    auto ident = gradient_clip(small, 1.0);
    CHECK(ident.gradients.at("a").data() == small.gradients.at("a").data());

    // contraction in max-norm
    double mx = 0;
    for (double v : out.gradients.at("a").data()) mx = std::max(mx, std::abs(v));
    CHECK(mx <= 1.0);
    CHECK_THROWS_AS(gradient_clip(u, 0.0), ConfigError);
}

TEST_CASE("dp_image adds reproducible pixel noise of the requested std") {
    Tensor batch = Tensor::full({4, 1, 100, 250}, 0.5);  // 1e5 pixels
    CHECK(dp_image(batch, 0.0, 1).data() == batch.data());

    const double sigma = 0.1;
    auto noised = dp_image(batch, sigma, 7);
    double sum = 0, sumsq = 0;
    for (int64_t i = 0; i < noised.size(); ++i) {
        double d = noised.data()[i] - 0.5;
        sum += d;
        sumsq += d * d;
    }
    double n = double(noised.size());
    double emp = std::sqrt(sumsq / n - (sum / n) * (sum / n));
    CHECK(std::abs(emp - sigma) / sigma < 0.02);

    CHECK(dp_image(batch, sigma, 7).data() == noised.data());
    CHECK(dp_image(batch, sigma, 8).data() != noised.data());
    CHECK(kDpImageStrongSigma == doctest::Approx(4.0 * kDpImageWeakSigma));
}

TEST_CASE("defense kind validation") {
    DefenseConfig ok;
    ok.kind = "sparsify";
    ok.parameters["keep_ratio"] = 0.4;
    validate_defense(ok);

    DefenseConfig bad = ok;
    bad.parameters["keep_ratio"] = 1.5;
    CHECK_THROWS_AS(validate_defense(bad), ConfigError);

    for (const std::string& kind : {"soteria", "outpost", "censor"}) {
        DefenseConfig r;
        r.kind = kind;
        CHECK_THROWS_WITH_AS(validate_defense(r),
                             doctest::Contains("not implemented"), ConfigError);
    }
    DefenseConfig unknown;
    unknown.kind = "quantize";
    CHECK_THROWS_AS(validate_defense(unknown), ConfigError);
}
