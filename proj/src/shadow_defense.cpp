#include "fedshade/shadow_defense.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "fedshade/attacks.hpp"
#include "fedshade/errors.hpp"
#include "fedshade/fl_engine.hpp"
#include "fedshade/optim.hpp"

namespace fedshade {

using namespace ad;

namespace {
Tensor stack_client_images(const ClientDataset& client) {
    const Shape& is = client.samples[0].image.shape();
    std::vector<double> v;
    for (const auto& s : client.samples)
        v.insert(v.end(), s.image.data().begin(), s.image.data().end());
    return Tensor::from(std::move(v), {int64_t(client.samples.size()), is[0], is[1], is[2]});
}

Tensor stack_latents(const ShadowState& state, const ClientDataset& client) {
    std::vector<double> v;
    int64_t L = 0;
    for (const auto& s : client.samples) {
        auto it = state.latents.find(s.id);
        if (it == state.latents.end())
            throw ProtocolError("no latent for sample " + std::to_string(s.id));
        L = it->second.size();
        v.insert(v.end(), it->second.data().begin(), it->second.data().end());
    }
    return Tensor::from(std::move(v), {int64_t(client.samples.size()), L});
}
}  // namespace

void pretrain_latents(ShadowState& state, const ClientDataset& client, int64_t steps,
                      int64_t early_stop, uint64_t seed, double lr,
                      std::vector<double>* loss_history) {
    if (client.samples.empty()) throw ConfigError("client has no samples");
    std::mt19937_64 rng(seed);
    int64_t L = state.generator.spec().latent_dim;
    for (const auto& s : client.samples)
        if (!state.latents.count(s.id))
            state.latents[s.id] = Tensor::randn({L}, rng, 1.0);
    if (steps == 0) return;

    Tensor z = stack_latents(state, client);
    z.set_requires_grad(true);
    Tensor target = stack_client_images(client);

    Adam opt(lr);
    double best = std::numeric_limits<double>::infinity();
    Tensor z_best = z.clone();
    int64_t since_improved = 0;
    for (int64_t t = 0; t < steps; ++t) {
        Tensor diff = sub(state.generator.generate(z), target);
        Tensor loss = mean_all(mul(diff, diff));
        if (!loss.all_finite() || loss.item() > 1e3)
            throw TrainingError("latent pretraining diverged");
        if (loss_history) loss_history->push_back(loss.item());
        if (loss.item() < best - 1e-12) {
            best = loss.item();
            z_best = z.clone();
            since_improved = 0;
        } else if (++since_improved >= early_stop) {
            break;
        }
        auto g = grad(loss, {z});
        std::vector<Tensor> vars = {z};
        opt.step(vars, g);
    }
    for (size_t i = 0; i < client.samples.size(); ++i) {
        std::vector<double> v(z_best.data().begin() + int64_t(i) * L,
                              z_best.data().begin() + int64_t(i + 1) * L);
        state.latents[client.samples[i].id] = Tensor::from(std::move(v), {L});
    }
}

ClientUpdate pseudo_local_train(const ClientDataset& client, const TaskModel& global_model,
                                double lr, int64_t local_rounds, int64_t round,
                                uint64_t seed) {
    TaskModel scratch = global_model.clone();
    return local_train(client, scratch, lr, local_rounds, round, seed);
}

std::pair<ShadowGenerator, std::map<int64_t, Tensor>> finetune_shadow(
    const ShadowState& state, const ClientUpdate& victim, const ClientDataset& client,
    const TaskModel& global_model, const ShadowLossWeights& weights, int64_t round,
    std::vector<double>* loss_history) {
    if (round > state.r_shadow)
        throw ProtocolError("shadow fine-tuning past terminal round " +
                            std::to_string(state.r_shadow));
    if (weights.w_dist <= 0) throw ConfigError("w_dist must be positive");

    ShadowGenerator gen = state.generator.clone();
    TaskModel model = global_model.clone();
    Tensor z = stack_latents(state, client);  // frozen
    Tensor x = stack_client_images(client);
    std::vector<int64_t> labels;
    for (const auto& s : client.samples) labels.push_back(s.label);

    auto gen_vars = gen.generator_params();
    Adam opt(1e-2);
    for (int64_t epoch = 0; epoch < state.finetune_epochs; ++epoch) {
        Tensor xs = gen.generate(z);
        auto fwd = model.forward(xs, true, false);
        Tensor ce = cross_entropy(fwd.logits, labels);
        auto ghat = grad(ce, model.params(), /*create_graph=*/true);
        Tensor loss = mul_scalar(
            gradient_distance(victim.gradients, model.param_names(), ghat, "cosine"),
            weights.w_dist);
        if (weights.w_tv > 0)
            loss = add(loss, mul_scalar(tv_regularizer(xs), weights.w_tv));
        if (weights.w_bn > 0)
            loss = add(loss, mul_scalar(bn_regularizer(fwd.batch_stats, victim.bn_stats),
                                        weights.w_bn));
        if (weights.w_l2 > 0)
            loss = add(loss, mul_scalar(mean_all(mul(xs, xs)), weights.w_l2));
        if (weights.w_mse > 0) {
            Tensor d = sub(xs, x);
            loss = add(loss, mul_scalar(mean_all(mul(d, d)), weights.w_mse));
        }
        if (!loss.all_finite()) throw TrainingError("shadow fine-tuning loss not finite");
        if (loss_history) loss_history->push_back(loss.item());
        auto g = grad(loss, gen_vars);
        opt.step(gen_vars, g);
    }

    std::map<int64_t, Tensor> recons;
    {
        NoGradGuard ng;
        Tensor xs = gen.generate(z);
        const Shape& s = xs.shape();
        for (size_t i = 0; i < client.samples.size(); ++i) {
            int64_t b = int64_t(i);
            recons[client.samples[i].id] = reshape(
                slice(xs, {b, 0, 0, 0}, {b + 1, s[1], s[2], s[3]}), {s[1], s[2], s[3]});
        }
    }
    return {std::move(gen), std::move(recons)};
}

void ema_shadow(ShadowState& state, const ShadowGenerator& finetuned) {
    double a = state.ema_alpha_shadow;
    if (a < 0 || a > 1) throw ConfigError("ema_alpha_shadow must be in [0,1]");
    auto names = state.generator.generator_param_names();
    ShadowGenerator trained = finetuned.clone();
    for (const auto& name : names) {
        auto& kept = state.generator.param(name).raw();
        const auto& next = trained.param(name).data();
        if (kept.size() != next.size()) throw ProtocolError("shadow shape mismatch");
        for (size_t i = 0; i < kept.size(); ++i) kept[i] = a * kept[i] + (1 - a) * next[i];
    }
}

Tensor foreground_map(const Tensor& saliency, double top_fraction, double T,
                      bool* zero_warning) {
    if (top_fraction <= 0 || top_fraction > 1)
        throw ConfigError("top_fraction must be in (0,1]");
    if (T <= 0) throw ConfigError("temperature must be positive");
    const Shape& s = saliency.shape();
    if (s.size() != 2) throw ConfigError("saliency must be H x W");
    int64_t n = numel(s);

    double lo = saliency.data()[0], hi = lo;
    for (double v : saliency.data()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (zero_warning) *zero_warning = hi == 0.0 && lo == 0.0;
    if (hi == lo) return Tensor::full(s, 1.0 / double(n));  // no information: uniform

    int64_t k = int64_t(std::ceil(top_fraction * double(n)));
    std::vector<int64_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
        return saliency.data()[a] > saliency.data()[b];
    });
    std::vector<double> masked(n, 0.0);
    for (int64_t i = 0; i < k; ++i) masked[idx[i]] = saliency.data()[idx[i]] / T;

    NoGradGuard ng;
    Tensor sm = softmax(Tensor::from(std::move(masked), {1, n}), 1);
    return reshape(sm, {s[0], s[1]});
}

Tensor relative_noise(const Tensor& x, const Tensor& x_rec, double T) {
    if (x.shape() != x_rec.shape()) throw DataError("relative_noise shape mismatch");
    if (T <= 0) throw ConfigError("temperature must be positive");
    const Shape& s = x.shape();
    if (s.size() != 3) throw DataError("relative_noise expects [C,H,W]");
    int64_t C = s[0], H = s[1], W = s[2];
    std::vector<double> m(H * W, 0.0);
    for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < H * W; ++i) {
            double d = x.data()[c * H * W + i] - x_rec.data()[c * H * W + i];
            m[i] += d * d / double(C);
        }
    for (auto& v : m) v /= T;
    NoGradGuard ng;
    Tensor sm = softmax(Tensor::from(std::move(m), {1, H * W}), 1);
    std::vector<double> n1(H * W);
    for (int64_t i = 0; i < H * W; ++i) n1[i] = 1.0 / sm.data()[i];
    return Tensor::from(std::move(n1), {H, W});
}

Tensor histogram_equalize(const Tensor& n1) {
    if (!n1.all_finite()) throw NumericError("equalize_noise on non-finite input");
    constexpr int kLevels = 256;
    const auto& v = n1.data();
    double lo = v[0], hi = v[0];
    for (double x : v) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    std::vector<int64_t> hist(kLevels, 0);
    std::vector<int> level(v.size(), 0);
    for (size_t i = 0; i < v.size(); ++i) {
        int l = hi > lo ? int(std::lround((v[i] - lo) / (hi - lo) * (kLevels - 1))) : 0;
        level[i] = std::clamp(l, 0, kLevels - 1);
        hist[level[i]]++;
    }
    // G(z) = (N_gray - 1) * CDF(z)
    std::vector<double> g(kLevels, 0.0);
    double cum = 0;
    for (int l = 0; l < kLevels; ++l) {
        cum += double(hist[l]) / double(v.size());
        g[l] = (kLevels - 1) * cum;
    }
    std::vector<double> out(v.size());
    for (size_t i = 0; i < v.size(); ++i) out[i] = g[level[i]];
    return Tensor::from(std::move(out), n1.shape());
}

Tensor equalize_noise(const Tensor& n1) {
    Tensor g = histogram_equalize(n1);
    NoGradGuard ng;
    const Shape s = g.shape();
    Tensor sm = softmax(reshape(g, {1, g.size()}), 1);
    return reshape(sm, s);
}

Tensor ema_noise(const Tensor& n3_prev, bool has_prev, const Tensor& n2, double alpha) {
    if (alpha < 0 || alpha > 1) throw ConfigError("ema alpha must be in [0,1]");
    if (!has_prev) return n2.clone();
    if (n3_prev.shape() != n2.shape()) throw DataError("ema_noise shape mismatch");
    std::vector<double> out(n2.size());
    for (int64_t i = 0; i < n2.size(); ++i)
        out[i] = alpha * n3_prev.data()[i] + (1 - alpha) * n2.data()[i];
    return Tensor::from(std::move(out), n2.shape());
}

double alpha_cam(int64_t r, int64_t R, double alpha_min, double alpha_max) {
    if (R < 1 || r < 0 || r > R) throw ConfigError("round outside [0, R]");
    return std::clamp(double(r) / double(R), alpha_min, alpha_max);
}

Tensor attenuate_foreground(const Tensor& n3, const Tensor& l_cam, int64_t r, int64_t R,
                            double alpha_min, double alpha_max) {
    if (n3.shape() != l_cam.shape()) throw DataError("attenuate shape mismatch");
    double a = alpha_cam(r, R, alpha_min, alpha_max);
    std::vector<double> out(n3.size());
    for (int64_t i = 0; i < n3.size(); ++i) {
        double v = n3.data()[i];
        double sign = v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0);
        out[i] = v - a * sign * l_cam.data()[i];
    }
    return Tensor::from(std::move(out), n3.shape());
}

double noise_amplitude(double alpha_n, int64_t r, int64_t R, const std::string& schedule) {
    if (R < 1) throw ConfigError("horizon must be >= 1");
    double frac = double(r) / double(R);
    if (schedule == "increase") return alpha_n * std::exp(frac);
    if (schedule == "fix") return alpha_n;
    // mirror of "increase" normalized to start at alpha_n: alpha_n * e^{-r/R}
    if (schedule == "decrease") return alpha_n * std::exp(-frac);
    throw ConfigError("unknown noise schedule '" + schedule + "'");
}

Tensor scale_noise(const Tensor& n4, const Tensor& x, double alpha_n, int64_t r, int64_t R,
                   const std::string& schedule, bool* zero_warning) {
    double w = noise_amplitude(alpha_n, r, R, schedule);
    double mx = x.max_value();
    double mn4 = n4.max_value();
    if (zero_warning) *zero_warning = mn4 == 0.0;
    if (mn4 == 0.0) return Tensor::zeros(n4.shape());
    double scale = std::abs(mx / mn4 * w);
    std::vector<double> out(n4.size());
    for (int64_t i = 0; i < n4.size(); ++i) out[i] = scale * n4.data()[i];
    return Tensor::from(std::move(out), n4.shape());
}

ClientUpdate defend_round(const ClientDataset& client, const TaskModel& global_model,
                          ShadowState& shadow, std::map<int64_t, NoiseState>& noise,
                          int64_t r, int64_t R, const ShadowDefenseConfig& config) {
    if (client.samples.empty()) throw ConfigError("client has no samples");
    ClientUpdate victim = pseudo_local_train(client, global_model, config.lr,
                                             config.local_rounds, r, config.seed);
    if (r <= shadow.r_shadow) {
        auto [gen, recons] = finetune_shadow(shadow, victim, client, global_model,
                                             config.weights, r);
        ema_shadow(shadow, gen);
        shadow.last_reconstructions = std::move(recons);
    }

    TaskModel cam_model = global_model.clone();
    Tensor batch = stack_client_images(client);
    std::vector<int64_t> labels;
    for (const auto& s : client.samples) labels.push_back(s.label);
    auto sal = cam_saliency(cam_model, batch, labels, cam_model.conv_layers().back());

    ClientDataset noised = client;
    const Shape& is = client.samples[0].image.shape();
    int64_t C = is[0], H = is[1], W = is[2];
    for (size_t i = 0; i < client.samples.size(); ++i) {
        const Sample& s = client.samples[i];
        auto it = shadow.last_reconstructions.find(s.id);
        if (it == shadow.last_reconstructions.end())
            throw ProtocolError("no shadow reconstruction for sample " +
                                std::to_string(s.id));
        NoiseState& ns = noise[s.id];
        int64_t b = int64_t(i);
        Tensor smap;
        {
            NoGradGuard ng;
            smap = reshape(slice(sal.map, {b, 0, 0}, {b + 1, H, W}), {H, W});
        }
        ns.l_cam = foreground_map(smap, config.top_fraction, config.temperature);
        ns.n1 = relative_noise(s.image, it->second, config.temperature);
        ns.n2 = equalize_noise(ns.n1);
        ns.n3 = ema_noise(ns.n3, ns.has_n3, ns.n2, config.ema_alpha_noise);
        ns.has_n3 = true;
        ns.n4 = attenuate_foreground(ns.n3, ns.l_cam, r, R, config.alpha_cam_min,
                                     config.alpha_cam_max);
        ns.n = scale_noise(ns.n4, s.image, config.alpha_n, r, R, config.schedule);

        std::vector<double> img = s.image.data();
        for (int64_t c = 0; c < C; ++c)
            for (int64_t p = 0; p < H * W; ++p)
                img[c * H * W + p] = std::clamp(img[c * H * W + p] + ns.n.data()[p],
                                                config.pixel_min, config.pixel_max);
        noised.samples[i].image = Tensor::from(std::move(img), is);
    }

    TaskModel local = global_model.clone();
    return local_train(noised, local, config.lr, config.local_rounds, r, config.seed);
}

}  // namespace fedshade
