#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "fedshade/checkpoint.hpp"
#include "fedshade/dataset.hpp"
#include "fedshade/errors.hpp"
#include "fedshade/saliency.hpp"
#include "fedshade/shadow_generator.hpp"
#include "fedshade/task_model.hpp"

using namespace fedshade;
using namespace fedshade::ad;

namespace {
double rel_err(double got, double want) {
    double denom = std::max({std::abs(got), std::abs(want), 1e-6});
    return std::abs(got - want) / denom;
}
}  // namespace

TEST_CASE("parameter count matches the closed form") {
    TaskModelSpec spec;  // c1=8, c2=16, 16x16, 2 classes
    TaskModel m(spec, 1);
    int64_t c0 = 1, c1 = 8, c2 = 16, feat = c2 * 4 * 4;
    int64_t expect = (c1 * c0 * 9 + c1) + 2 * c1 + (c2 * c1 * 9 + c2) + 2 * c2 +
                     (2 * feat + 2);
    CHECK(m.param_count() == expect);
    CHECK(expect == 1810);
}

TEST_CASE("model gradients match central finite differences") {
    TaskModelSpec spec;
    spec.image_size = 8;
    spec.conv_widths = {4, 6};
    TaskModel m(spec, 3);
    REQUIRE(m.param_count() < 10000);

    std::mt19937_64 rng(9);
    Tensor batch = Tensor::randn({3, 1, 8, 8}, rng);
    std::vector<int64_t> labels = {0, 1, 0};
    auto gs = m.gradients(batch, labels);

    const double eps = 1e-4;
    std::mt19937_64 pick(4);
    for (const auto& name : m.param_names()) {
        Tensor& p = m.param(name);
        for (int rep = 0; rep < 3; ++rep) {
            int64_t i = std::uniform_int_distribution<int64_t>(0, p.size() - 1)(pick);
            double orig = p.raw()[i];
            p.raw()[i] = orig + eps;
            double lp = m.loss(batch, labels, true, false).item();
            p.raw()[i] = orig - eps;
            double lm = m.loss(batch, labels, true, false).item();
            p.raw()[i] = orig;
            double fd = (lp - lm) / (2 * eps);
            double an = gs.at(name).data()[i];
            if (std::abs(fd) > 1e-7 || std::abs(an) > 1e-7)
                CHECK(rel_err(an, fd) < 1e-3);
        }
    }
}

TEST_CASE("BN running stats update by momentum and snapshots stay immutable") {
    TaskModel m(TaskModelSpec{}, 5);
    std::mt19937_64 rng(2);
    Tensor batch = Tensor::randn({4, 1, 16, 16}, rng);

    BNStats before = m.bn_statistics();
    // batch statistics from a non-updating training pass
    auto fwd = m.forward(batch, true, false);
    BNStats still = m.bn_statistics();
    for (const auto& layer : m.bn_layers()) {
        CHECK(still.layers.at(layer).running_mean == before.layers.at(layer).running_mean);
        CHECK(still.layers.at(layer).running_var == before.layers.at(layer).running_var);
    }

    m.forward(batch, true, true);  // one updating step
    BNStats after = m.bn_statistics();
    double mom = m.spec().bn_momentum;
    for (const auto& layer : m.bn_layers()) {
        const auto& mu = fwd.batch_stats.at(layer).first.data();
        const auto& var = fwd.batch_stats.at(layer).second.data();
        for (size_t c = 0; c < mu.size(); ++c) {
            double want_m = (1 - mom) * before.layers.at(layer).running_mean[c] + mom * mu[c];
            double want_v = (1 - mom) * before.layers.at(layer).running_var[c] + mom * var[c];
            CHECK(after.layers.at(layer).running_mean[c] == doctest::Approx(want_m).epsilon(1e-12));
            CHECK(after.layers.at(layer).running_var[c] == doctest::Approx(want_v).epsilon(1e-12));
        }
        // the earlier snapshot must not have moved
        CHECK(before.layers.at(layer).running_mean == std::vector<double>(mu.size(), 0.0));
    }
}

TEST_CASE("generator directional derivatives match finite differences") {
    ShadowGeneratorSpec spec;
    spec.image_size = 8;
    spec.base_channels = 8;
    ShadowGenerator g(spec, 7);
    std::mt19937_64 rng(11);
    Tensor z = Tensor::randn({2, spec.latent_dim}, rng, 1.0, true);
    Tensor probe = Tensor::randn({2, spec.out_channels, 8, 8}, rng);

    std::vector<Tensor> vars = g.params();
    vars.push_back(z);
    Tensor s = sum_all(mul(g.generate(z), probe));
    auto grads = grad(s, vars);

    // random direction v over all variables
    std::vector<std::vector<double>> dirs;
    double dot = 0;
    for (size_t i = 0; i < vars.size(); ++i) {
        std::vector<double> v(vars[i].size());
        for (auto& x : v) x = std::normal_distribution<double>()(rng);
        for (int64_t j = 0; j < vars[i].size(); ++j) dot += grads[i].data()[j] * v[j];
        dirs.push_back(std::move(v));
    }
    const double eps = 1e-5;
    auto eval_at = [&](double t) {
        for (size_t i = 0; i < vars.size(); ++i)
            for (int64_t j = 0; j < vars[i].size(); ++j) vars[i].raw()[j] += t * dirs[i][j];
        double val = sum_all(mul(g.generate(z), probe)).item();
        for (size_t i = 0; i < vars.size(); ++i)
            for (int64_t j = 0; j < vars[i].size(); ++j) vars[i].raw()[j] -= t * dirs[i][j];
        return val;
    };
    double fd = (eval_at(eps) - eval_at(-eps)) / (2 * eps);
    CHECK(rel_err(dot, fd) < 1e-3);
}

TEST_CASE("shadow pretraining reduces the reconstruction loss") {
    auto d = generate_synthetic_dataset(8, 16, 1, 2, 21);
    std::vector<Tensor> imgs;
    for (auto& s : d) imgs.push_back(reshape(s.image, {1, 16, 16}));

    ShadowGenerator g(ShadowGeneratorSpec{}, 13);

    auto unchanged = pretrain_shadow(g, imgs, 0, 1);
    CHECK(unchanged.dump_parameters() == g.dump_parameters());

    std::vector<double> hist;
    auto trained = pretrain_shadow(g, imgs, 200, 1, 1e-2, &hist);
    REQUIRE(hist.size() == 200);
    CHECK(hist.back() < hist.front());
    double head = 0, tail = 0;
    for (int i = 0; i < 10; ++i) {
        head += hist[i];
        tail += hist[hist.size() - 10 + i];
    }
    CHECK(tail < head);

    auto trained2 = pretrain_shadow(g, imgs, 200, 1);
    CHECK(trained.dump_parameters() == trained2.dump_parameters());
}

TEST_CASE("grad-cam++ maps are nonnegative and logit-shift invariant") {
    TaskModel m(TaskModelSpec{}, 17);
    auto d = generate_synthetic_dataset(4, 16, 1, 2, 5);
    std::vector<double> flat;
    std::vector<int64_t> labels;
    for (auto& s : d) {
        flat.insert(flat.end(), s.image.data().begin(), s.image.data().end());
        labels.push_back(s.label);
    }
    Tensor batch = Tensor::from(flat, {4, 1, 16, 16});

    auto sal = cam_saliency(m, batch, labels, "conv2");
    CHECK(sal.map.shape() == Shape{4, 16, 16});
    for (double v : sal.map.data()) CHECK(v >= 0.0);

    // shifting every class score by a constant leaves the map unchanged
    for (auto& b : m.param("fc.bias").raw()) b += 3.7;
    auto shifted = cam_saliency(m, batch, labels, "conv2");
    for (int64_t i = 0; i < sal.map.size(); ++i)
        CHECK(shifted.map.data()[i] == doctest::Approx(sal.map.data()[i]).epsilon(1e-9));

    CHECK_THROWS_AS(cam_saliency(m, batch, labels, "fc"), ConfigError);
}

TEST_CASE("grad-cam++ localizes a bright blob on a pass-through model") {
    TaskModel m(TaskModelSpec{}, 1);
    // zero everything, then wire channel 0 straight through with center taps
    for (const auto& name : m.param_names())
        for (auto& v : m.param(name).raw()) v = 0.0;
    for (auto& v : m.param("bn1.weight").raw()) v = 1.0;
    for (auto& v : m.param("bn2.weight").raw()) v = 1.0;
    {
        Tensor& w1 = m.param("conv1.weight");  // [8,1,3,3]
        w1.raw()[0 * 9 + 4] = 1.0;
        Tensor& w2 = m.param("conv2.weight");  // [16,8,3,3]
        w2.raw()[0 * 8 * 9 + 0 * 9 + 4] = 1.0;
        Tensor& fc = m.param("fc.weight");  // [2, 256]
        for (int64_t j = 0; j < 256; ++j) fc.raw()[j] = 1.0;
    }
    // blob covering rows/cols 2..5
    std::vector<double> img(16 * 16, 0.0);
    for (int r = 2; r <= 5; ++r)
        for (int c = 2; c <= 5; ++c) img[r * 16 + c] = 1.0;
    Tensor batch = Tensor::from(img, {1, 1, 16, 16});

    auto sal = cam_saliency(m, batch, {0}, "conv2");
    CHECK_FALSE(sal.zero_warning);
    int64_t arg = 0;
    for (int64_t i = 1; i < sal.map.size(); ++i)
        if (sal.map.data()[i] > sal.map.data()[arg]) arg = i;
    int64_t r = arg / 16, c = arg % 16;
    CHECK(r >= 2);
    CHECK(r <= 5);
    CHECK(c >= 2);
    CHECK(c <= 5);

    // a dead head produces an all-zero map and a warning
    for (auto& v : m.param("fc.weight").raw()) v = 0.0;
    auto dead = cam_saliency(m, batch, {0}, "conv2");
    CHECK(dead.zero_warning);
    CHECK(dead.map.max_abs() == 0.0);
}

TEST_CASE("bilinear upsample interpolates a ramp exactly") {
    // linear ramp stays linear under bilinear interpolation
    Tensor small = Tensor::from({0.0, 1.0, 2.0, 3.0}, {1, 1, 4});
    Tensor up = upsample_bilinear(small, 1, 7);
    for (int64_t i = 0; i < 7; ++i)
        CHECK(up.data()[i] == doctest::Approx(i * 3.0 / 6.0).epsilon(1e-12));
}

TEST_CASE("checkpoints round trip and reject corrupt files") {
    namespace fs = std::filesystem;
    fs::path f = fs::temp_directory_path() / "fedshade_ckpt_test.bin";

    TaskModel m(TaskModelSpec{}, 23);
    Checkpoint ck;
    ck.manifest = {{"kind", "task_model"}, {"image_size", 16}};
    for (const auto& name : m.param_names())
        ck.arrays[name] = {m.param(name).shape(), m.param(name).data()};
    save_checkpoint(f, ck);

    Checkpoint back = load_checkpoint(f);
    CHECK(back.manifest == ck.manifest);
    REQUIRE(back.arrays.size() == ck.arrays.size());
    for (const auto& [name, sv] : ck.arrays) {
        CHECK(back.arrays.at(name).first == sv.first);
        CHECK(back.arrays.at(name).second == sv.second);  // bit-exact doubles
    }

    std::ofstream junk(f, std::ios::binary);
    junk << "definitely not an archive";
    junk.close();
    CHECK_THROWS_AS(load_checkpoint(f), DataError);
    fs::remove(f);
    CHECK_THROWS_AS(load_checkpoint(f), DataError);
}
