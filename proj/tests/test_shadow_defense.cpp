#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <complex>

#include "fedshade/dataset.hpp"
#include "fedshade/errors.hpp"
#include "fedshade/fl_engine.hpp"
#include "fedshade/shadow_defense.hpp"

using namespace fedshade;
using namespace fedshade::ad;

namespace {
ClientDataset make_client(int64_t id, int64_t n, int64_t batch, uint64_t seed) {
    ClientDataset c;
    c.client_id = id;
    c.batch_size = batch;
    c.samples = generate_synthetic_dataset(std::max<int64_t>(n, 2), 16, 1, 2, seed);
    c.samples.resize(n);
    return c;
}

// smooth gaussian blob plus a checkerboard texture the decoder cannot fit
ClientDataset make_blob_client(int64_t id, int64_t n, uint64_t seed) {
    ClientDataset c;
    c.client_id = id;
    c.batch_size = n;
    std::mt19937_64 rng(seed);
    for (int64_t i = 0; i < n; ++i) {
        std::vector<double> img(256);
        double cy = 5 + 6 * std::uniform_real_distribution<double>()(rng);
        double cx = 5 + 6 * std::uniform_real_distribution<double>()(rng);
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x) {
                double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                double v = 0.7 * std::exp(-d2 / 18.0) + 0.15 * ((x + y) % 2 ? 1 : -1) + 0.15;
                img[y * 16 + x] = std::clamp(v, 0.0, 1.0);
            }
        c.samples.push_back({Tensor::from(std::move(img), {1, 16, 16}), i % 2, 9000 + i});
    }
    return c;
}

ShadowState make_shadow(const ClientDataset& client, uint64_t seed, int64_t r_shadow) {
    auto pub = generate_synthetic_dataset(8, 16, 1, 2, seed + 500);
    std::vector<Tensor> pub_imgs;
    for (auto& s : pub) pub_imgs.push_back(reshape(s.image, {1, 16, 16}));
    ShadowState st;
    st.generator =
        pretrain_shadow(ShadowGenerator(ShadowGeneratorSpec{}, seed), pub_imgs, 200, seed);
    st.r_shadow = r_shadow;
    pretrain_latents(st, client, 150, 5, seed + 1);
    return st;
}

double recon_error(const ShadowState& st, const Sample& s) {
    NoGradGuard ng;
    ShadowState& mut = const_cast<ShadowState&>(st);
    Tensor z = reshape(mut.latents.at(s.id), {1, st.generator.spec().latent_dim});
    Tensor out = mut.generator.generate(z);
    double e = 0;
    for (int64_t i = 0; i < s.image.size(); ++i) {
        double d = out.data()[i] - s.image.data()[i];
        e += d * d;
    }
    return e / double(s.image.size());
}

// radial band energies of the 2D DFT of a [H,W] residual
std::pair<double, double> band_energies(const std::vector<double>& img, int64_t H,
                                        int64_t W) {
    using cd = std::complex<double>;
    double low = 0, high = 0;
    double rmax = std::sqrt(double((H / 2) * (H / 2) + (W / 2) * (W / 2)));
    for (int64_t u = 0; u < H; ++u)
        for (int64_t v = 0; v < W; ++v) {
            cd f = 0;
            for (int64_t y = 0; y < H; ++y)
                for (int64_t x = 0; x < W; ++x)
                    f += img[y * W + x] *
                         std::exp(cd(0, -2 * M_PI * (double(u * y) / H + double(v * x) / W)));
            double fu = std::min<int64_t>(u, H - u), fv = std::min<int64_t>(v, W - v);
            double r = std::sqrt(fu * fu + fv * fv);
            if (r < rmax * 0.25) low += std::norm(f);
            if (r > rmax * 0.75) high += std::norm(f);
        }
    return {low, high};
}

double cosine_between(const GradientSet& a, const GradientSet& b) {
    double dot = 0, na = 0, nb = 0;
    for (const auto& [name, ga] : a) {
        const auto& gb = b.at(name);
        for (int64_t i = 0; i < ga.size(); ++i) {
            dot += ga.data()[i] * gb.data()[i];
            na += ga.data()[i] * ga.data()[i];
            nb += gb.data()[i] * gb.data()[i];
        }
    }
    return dot / std::max(std::sqrt(na) * std::sqrt(nb), 1e-300);
}
}  // namespace

TEST_CASE("latent pretraining improves every sample and captures low frequencies") {
    auto client = make_client(0, 4, 4, 41);
    auto pub = generate_synthetic_dataset(8, 16, 1, 2, 541);
    std::vector<Tensor> pub_imgs;
    for (auto& s : pub) pub_imgs.push_back(reshape(s.image, {1, 16, 16}));
    ShadowState st;
    st.generator =
        pretrain_shadow(ShadowGenerator(ShadowGeneratorSpec{}, 41), pub_imgs, 200, 41);

    // steps=0 seeds latents but leaves them untouched afterwards
    pretrain_latents(st, client, 0, 5, 7);
    auto z0 = st.latents;
    pretrain_latents(st, client, 0, 5, 7);
    for (auto& [id, z] : st.latents) CHECK(z.data() == z0.at(id).data());

    std::vector<double> init_err;
    for (auto& s : client.samples) init_err.push_back(recon_error(st, s));
    std::vector<double> hist;
    pretrain_latents(st, client, 300, 10, 7, 5e-2, &hist);
    for (size_t i = 0; i < client.samples.size(); ++i)
        CHECK(recon_error(st, client.samples[i]) < init_err[i]);
    CHECK(hist.back() < hist.front());

    // residual spectrum on blob images: the smooth blob is reconstructed, the
    // checkerboard texture is not, so the residual lives in high frequencies
    auto blobs = make_blob_client(9, 4, 77);
    std::vector<Tensor> blob_imgs;
    for (auto& s : blobs.samples) blob_imgs.push_back(s.image);
    ShadowState bst;
    bst.generator =
        pretrain_shadow(ShadowGenerator(ShadowGeneratorSpec{}, 77), blob_imgs, 400, 77);
    pretrain_latents(bst, blobs, 500, 20, 78);
    double low = 0, high = 0;
    for (auto& s : blobs.samples) {
        NoGradGuard ng;
        Tensor z = reshape(bst.latents.at(s.id), {1, bst.generator.spec().latent_dim});
        Tensor rec = bst.generator.generate(z);
        std::vector<double> resid(256);
        for (int64_t i = 0; i < 256; ++i) resid[i] = s.image.data()[i] - rec.data()[i];
        auto [l, h] = band_energies(resid, 16, 16);
        low += l;
        high += h;
    }
    CHECK(low < high);
}

TEST_CASE("pseudo local training is isolated and repeatable") {
    auto client = make_client(1, 4, 2, 43);
    TaskModel global(TaskModelSpec{}, 43);
    auto before = global.dump_parameters();
    auto bn_before = global.bn_statistics();

    auto up = pseudo_local_train(client, global, 0.1, 1, 3, 9);
    CHECK(global.dump_parameters() == before);  // bit-identical
    for (const auto& layer : global.bn_layers())
        CHECK(global.bn_statistics().layers.at(layer).running_mean ==
              bn_before.layers.at(layer).running_mean);

    TaskModel clean = global.clone();
    auto direct = local_train(client, clean, 0.1, 1, 3, 9);
    for (const auto& [name, g] : up.gradients)
        CHECK(g.data() == direct.gradients.at(name).data());

    auto again = pseudo_local_train(client, global, 0.1, 1, 3, 9);
    for (const auto& [name, g] : up.gradients)
        CHECK(g.data() == again.gradients.at(name).data());
}

TEST_CASE("shadow fine-tuning updates only the decoder and lowers its loss") {
    auto client = make_client(2, 1, 1, 47);
    auto st = make_shadow(client, 47, 10);
    TaskModel global(TaskModelSpec{}, 47);
    auto victim = pseudo_local_train(client, global, 0.05, 1, 1, 3);

    std::vector<double> hist;
    auto [gen, recons] = finetune_shadow(st, victim, client, global, ShadowLossWeights{}, 1,
                                         &hist);
    REQUIRE(hist.size() == size_t(st.finetune_epochs));
    for (size_t i = 1; i < hist.size(); ++i) CHECK(hist[i] < hist[i - 1]);
    REQUIRE(recons.count(client.samples[0].id) == 1);
    CHECK(recons.at(client.samples[0].id).shape() == Shape{1, 16, 16});

    // mapper untouched, decoder moved
    for (const auto& name : st.generator.param_names()) {
        ShadowGenerator& g2 = gen;
        if (name.rfind("map.", 0) == 0)
            CHECK(g2.param(name).data() == st.generator.param(name).data());
    }
    bool decoder_moved = false;
    for (const auto& name : st.generator.generator_param_names())
        if (gen.param(name).data() != st.generator.param(name).data()) decoder_moved = true;
    CHECK(decoder_moved);

    // distance-only objective still reduces D below its initial value
    ShadowLossWeights dist_only;
    dist_only.w_tv = dist_only.w_bn = dist_only.w_l2 = dist_only.w_mse = 0;
    std::vector<double> dhist;
    finetune_shadow(st, victim, client, global, dist_only, 1, &dhist);
    CHECK(dhist.back() < dhist.front());

    CHECK_THROWS_AS(finetune_shadow(st, victim, client, global, ShadowLossWeights{}, 11),
                    ProtocolError);
}

TEST_CASE("shadow EMA endpoints and midpoint") {
    auto client = make_client(3, 1, 1, 53);
    ShadowState st;
    st.generator = ShadowGenerator(ShadowGeneratorSpec{}, 53);
    ShadowGenerator other(ShadowGeneratorSpec{}, 99);

    auto orig = st.generator.dump_parameters();
    st.ema_alpha_shadow = 1.0;  // alpha=1 keeps theta_s
    ema_shadow(st, other);
    CHECK(st.generator.dump_parameters() == orig);

    st.ema_alpha_shadow = 0.0;  // alpha=0 adopts theta'_s (decoder only)
    ema_shadow(st, other);
    for (const auto& name : st.generator.generator_param_names())
        CHECK(st.generator.param(name).data() == other.param(name).data());

    // alpha=0.5 on 0 and 2 gives 1
    ShadowState mid;
    mid.generator = ShadowGenerator(ShadowGeneratorSpec{}, 1);
    ShadowGenerator two(ShadowGeneratorSpec{}, 1);
    const std::string probe = mid.generator.generator_param_names()[0];
    for (auto& v : mid.generator.param(probe).raw()) v = 0.0;
    for (auto& v : two.param(probe).raw()) v = 2.0;
    mid.ema_alpha_shadow = 0.5;
    ema_shadow(mid, two);
    for (double v : mid.generator.param(probe).data()) CHECK(v == doctest::Approx(1.0));
}

TEST_CASE("foreground map mask size, normalization, and degenerate input") {
    // 10-pixel map with distinct values: exactly ceil(0.3*10)=3 pixels masked
    Tensor sal = Tensor::from({1, 2, 3, 4, 5, 6, 7, 8, 9, 10}, {2, 5});
    Tensor l = foreground_map(sal, 0.3, 0.5);
    double total = 0;
    int elevated = 0;
    double base = l.data()[0];  // all unmasked pixels share exp(0)
    for (double v : l.data()) {
        total += v;
        if (v > base * 1.0001) ++elevated;
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(elevated == 3);

    bool warn = true;
    Tensor uni = foreground_map(Tensor::full({4, 4}, 3.0), 0.3, 0.5, &warn);
    CHECK_FALSE(warn);
    for (double v : uni.data()) CHECK(v == doctest::Approx(1.0 / 16).epsilon(1e-12));

    Tensor zero = foreground_map(Tensor::zeros({4, 4}), 0.3, 0.5, &warn);
    CHECK(warn);
    for (double v : zero.data()) CHECK(v == doctest::Approx(1.0 / 16).epsilon(1e-12));
}

TEST_CASE("relative noise fixture and monotonicity") {
    const double T = 0.5;
    // perfect reconstruction: uniform softmax, N1 constant = H*W
    Tensor x = Tensor::full({1, 4, 4}, 0.3);
    Tensor n1 = relative_noise(x, x, T);
    for (double v : n1.data()) CHECK(v == doctest::Approx(16.0).epsilon(1e-12));

    // 2-pixel fixture M = (0, T ln 3) -> softmax (1/4, 3/4) -> N1 = (4, 4/3)
    Tensor a = Tensor::from({0.0, std::sqrt(T * std::log(3.0))}, {1, 1, 2});
    Tensor b = Tensor::zeros({1, 1, 2});
    Tensor fix = relative_noise(a, b, T);
    CHECK(fix.data()[0] == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(fix.data()[1] == doctest::Approx(4.0 / 3.0).epsilon(1e-12));
    CHECK(fix.data()[1] < fix.data()[0]);  // worst pixel gets least noise
}

TEST_CASE("histogram equalization CDF fixture and softmax normalization") {
    // half the pixels at the low level, half at the high level
    std::vector<double> two(16, 0.0);
    for (int i = 8; i < 16; ++i) two[i] = 1.0;
    Tensor g = histogram_equalize(Tensor::from(two, {4, 4}));
    for (int i = 0; i < 8; ++i) CHECK(g.data()[i] == doctest::Approx(127.5).epsilon(1e-12));
    for (int i = 8; i < 16; ++i) CHECK(g.data()[i] == doctest::Approx(255.0).epsilon(1e-12));

    // G is monotone over levels for arbitrary input
    std::mt19937_64 rng(5);
    Tensor rnd = Tensor::randn({8, 8}, rng);
    Tensor gr = histogram_equalize(rnd);
    for (int64_t i = 0; i < rnd.size(); ++i)
        for (int64_t j = 0; j < rnd.size(); ++j)
            if (rnd.data()[i] <= rnd.data()[j]) CHECK(gr.data()[i] <= gr.data()[j] + 1e-9);

    Tensor n2 = equalize_noise(rnd);
    double total = 0;
    for (double v : n2.data()) {
        CHECK(v >= 0.0);
        total += v;
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));

    Tensor flat = equalize_noise(Tensor::full({4, 4}, 2.5));
    for (double v : flat.data()) CHECK(v == doctest::Approx(1.0 / 16).epsilon(1e-12));
}

TEST_CASE("noise EMA recurrence") {
    Tensor n2 = Tensor::full({2, 2}, 1.0);
    Tensor first = ema_noise({}, false, n2, 0.9);
    CHECK(first.data() == n2.data());  // first round adopts N2

    Tensor prev = Tensor::zeros({2, 2});
    Tensor one = ema_noise(prev, true, n2, 0.9);
    for (double v : one.data()) CHECK(v == doctest::Approx(0.1).epsilon(1e-12));

    // |N3_k - N2| = alpha^k |N3_0 - N2| under constant N2
    Tensor n3 = prev.clone();
    for (int k = 1; k <= 5; ++k) {
        n3 = ema_noise(n3, true, n2, 0.9);
        CHECK(std::abs(n3.data()[0] - 1.0) ==
              doctest::Approx(std::pow(0.9, k)).epsilon(1e-12));
    }
}

TEST_CASE("foreground attenuation clamp endpoints") {
    CHECK(alpha_cam(0, 10, 0.1, 0.5) == doctest::Approx(0.1));
    CHECK(alpha_cam(10, 10, 0.1, 0.5) == doctest::Approx(0.5));
    CHECK(alpha_cam(3, 10, 0.1, 0.5) == doctest::Approx(0.3));
    // alpha_cam is non-decreasing in r
    double prev = -1;
    for (int64_t r = 0; r <= 10; ++r) {
        double a = alpha_cam(r, 10, 0.1, 0.5);
        CHECK(a >= prev);
        prev = a;
    }

    Tensor n3 = Tensor::from({0.5, -0.5, 0.0, 0.25}, {2, 2});
    Tensor zero_cam = Tensor::zeros({2, 2});
    CHECK(attenuate_foreground(n3, zero_cam, 5, 10, 0.1, 0.5).data() == n3.data());

    Tensor cam = Tensor::full({2, 2}, 0.1);
    Tensor n4 = attenuate_foreground(n3, cam, 10, 10, 0.1, 0.5);  // alpha 0.5
    CHECK(n4.data()[0] == doctest::Approx(0.45).epsilon(1e-12));
    CHECK(n4.data()[1] == doctest::Approx(-0.45).epsilon(1e-12));
    CHECK(n4.data()[2] == doctest::Approx(0.0));
}

TEST_CASE("noise amplitude schedules") {
    CHECK(noise_amplitude(0.19, 0, 10, "increase") == doctest::Approx(0.19).epsilon(1e-12));
    CHECK(noise_amplitude(0.19, 10, 10, "increase") ==
          doctest::Approx(0.19 * std::exp(1.0)).epsilon(1e-12));
    double prev_i = 0, prev_d = 1e9;
    for (int64_t r = 0; r <= 10; ++r) {
        double wi = noise_amplitude(0.19, r, 10, "increase");
        double wf = noise_amplitude(0.19, r, 10, "fix");
        double wd = noise_amplitude(0.19, r, 10, "decrease");
        CHECK(wi > prev_i);
        CHECK(wf == 0.19);
        CHECK(wd < prev_d);
        prev_i = wi;
        prev_d = wd;
    }
    CHECK_THROWS_AS(noise_amplitude(0.19, 0, 10, "ramp"), ConfigError);
}

TEST_CASE("noise scaling identity") {
    // max(x)=1, max(N4)=0.25, w=0.19 -> scale 0.76, max(N)=0.19
    Tensor x = Tensor::from({1.0, 0.2, 0.1, 0.0}, {1, 2, 2});
    Tensor n4 = Tensor::from({0.25, 0.1, 0.05, 0.0}, {2, 2});
    Tensor n = scale_noise(n4, x, 0.19, 0, 10, "increase");
    CHECK(n.data()[0] == doctest::Approx(0.19).epsilon(1e-12));
    CHECK(n.data()[1] == doctest::Approx(0.76 * 0.1).epsilon(1e-12));
    // max|N| = w_N * max(x) exactly for nonnegative maps
    CHECK(n.max_abs() == doctest::Approx(0.19 * 1.0).epsilon(1e-12));

    bool warn = false;
    Tensor z = scale_noise(Tensor::zeros({2, 2}), x, 0.19, 0, 10, "increase", &warn);
    CHECK(warn);
    CHECK(z.max_abs() == 0.0);
}

TEST_CASE("defend_round: zero amplitude, termination, and protection") {
    auto client = make_client(8, 1, 1, 61);
    TaskModel global(TaskModelSpec{}, 61);
    auto st = make_shadow(client, 61, 2);
    std::map<int64_t, NoiseState> noise;

    ShadowDefenseConfig cfg;
    cfg.lr = 0.05;
    cfg.seed = 3;
    cfg.alpha_n = 0.0;  // zero noise: protected update equals the clean one
    auto protected_up = defend_round(client, global, st, noise, 1, 10, cfg);
    TaskModel clean = global.clone();
    auto clean_up = local_train(client, clean, cfg.lr, 1, 1, cfg.seed);
    for (const auto& [name, g] : protected_up.gradients)
        CHECK(g.data() == clean_up.gradients.at(name).data());

    // past r_shadow the generator is frozen
    auto frozen = st.generator.dump_parameters();
    defend_round(client, global, st, noise, 3, 10, cfg);
    CHECK(st.generator.dump_parameters() == frozen);

    // with the default amplitude the upload visibly departs from the victim
    ShadowDefenseConfig strong = cfg;
    strong.alpha_n = 0.19;
    std::map<int64_t, NoiseState> noise2;
    auto st2 = make_shadow(client, 61, 2);
    auto victim = pseudo_local_train(client, global, strong.lr, 1, 1, strong.seed);
    auto defended = defend_round(client, global, st2, noise2, 1, 10, strong);
    CHECK(cosine_between(defended.gradients, victim.gradients) < 1.0 - 1e-6);
    CHECK(noise2.at(client.samples[0].id).has_n3);
    // N2 is a distribution
    double total = 0;
    for (double v : noise2.at(client.samples[0].id).n2.data()) total += v;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
}
