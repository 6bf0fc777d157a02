#include "fedshade/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "fedshade/errors.hpp"
#include "fedshade/optim.hpp"

namespace fedshade {

using namespace ad;

namespace {
double lr_decay(int64_t t, int64_t total) {
    if (t >= (85 * total) / 100) return 0.1;
    if (t >= (60 * total) / 100) return 0.3;
    return 1.0;
}

void clamp_raw(Tensor& x, double lo, double hi) {
    for (auto& v : x.raw()) v = std::clamp(v, lo, hi);
}
}  // namespace

LabelGuess infer_labels(const ClientUpdate& update, int64_t classes, int64_t batch_size,
                        const std::string& fc_weight_name) {
    auto it = update.gradients.find(fc_weight_name);
    if (it == update.gradients.end())
        throw ProtocolError("update lacks FC gradient " + fc_weight_name);
    const Tensor& g = it->second;
    if (g.shape().size() != 2 || g.shape()[0] != classes)
        throw ProtocolError("FC gradient shape mismatch");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    int64_t feat = g.shape()[1];

    std::vector<double> row_sum(classes, 0.0);
    int negatives = 0;
    for (int64_t c = 0; c < classes; ++c) {
        for (int64_t j = 0; j < feat; ++j) row_sum[c] += g.data()[c * feat + j];
        if (row_sum[c] < 0) ++negatives;
    }
    std::vector<int64_t> order(classes);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int64_t a, int64_t b) { return row_sum[a] < row_sum[b]; });

    LabelGuess out;
    out.heuristic = batch_size > 1;
    bool all_zero = g.max_abs() == 0.0;
    out.low_confidence = all_zero || (batch_size == 1 && negatives != 1);
    for (int64_t i = 0; i < batch_size; ++i) out.labels.push_back(order[i % classes]);
    std::sort(out.labels.begin(), out.labels.end());
    return out;
}

Tensor tv_regularizer(const Tensor& image) {
    const Shape& s = image.shape();
    if (s.size() < 2) throw ConfigError("tv_regularizer needs spatial dimensions");
    size_t nd = s.size();
    int64_t H = s[nd - 2], W = s[nd - 1];
    std::vector<int64_t> zeros(nd, 0), ends(s.begin(), s.end());

    Tensor total = Tensor::scalar(0.0);
    int64_t pairs = 0;
    if (W > 1) {
        auto a_end = ends, b_start = zeros;
        a_end[nd - 1] = W - 1;
        b_start[nd - 1] = 1;
        Tensor dh = sub(slice(image, b_start, ends), slice(image, zeros, a_end));
        total = add(total, sum_all(abs(dh)));
        pairs += numel(s) / W * (W - 1);
    }
    if (H > 1) {
        auto a_end = ends, b_start = zeros;
        a_end[nd - 2] = H - 1;
        b_start[nd - 2] = 1;
        Tensor dv = sub(slice(image, b_start, ends), slice(image, zeros, a_end));
        total = add(total, sum_all(abs(dv)));
        pairs += numel(s) / H * (H - 1);
    }
    if (pairs == 0) return Tensor::scalar(0.0);
    return mul_scalar(total, 1.0 / double(pairs));
}

Tensor bn_regularizer(const std::map<std::string, std::pair<Tensor, Tensor>>& dummy_stats,
                      const BNStats& target) {
    if (dummy_stats.size() != target.layers.size())
        throw ProtocolError("BN layer sets differ");
    Tensor total = Tensor::scalar(0.0);
    for (const auto& [layer, mv] : dummy_stats) {
        auto it = target.layers.find(layer);
        if (it == target.layers.end()) throw ProtocolError("missing BN layer " + layer);
        Tensor tm = Tensor::from(it->second.running_mean,
                                 {int64_t(it->second.running_mean.size())});
        Tensor tv = Tensor::from(it->second.running_var,
                                 {int64_t(it->second.running_var.size())});
        Tensor dm = sub(mv.first, tm);
        Tensor dv = sub(mv.second, tv);
        total = add(total, add(sum_all(mul(dm, dm)), sum_all(mul(dv, dv))));
    }
    return total;
}

Tensor gradient_distance(const GradientSet& target, const std::vector<std::string>& names,
                         const std::vector<Tensor>& dummy, const std::string& kind) {
    if (names.size() != dummy.size()) throw ProtocolError("gradient list size mismatch");
    if (kind == "l2") {
        Tensor total = Tensor::scalar(0.0);
        for (size_t i = 0; i < names.size(); ++i) {
            Tensor d = sub(dummy[i], target.at(names[i]).detach());
            total = add(total, sum_all(mul(d, d)));
        }
        return total;
    }
    if (kind == "cosine") {
        Tensor dot = Tensor::scalar(0.0), dd = Tensor::scalar(0.0);
        double tt = 0;
        for (size_t i = 0; i < names.size(); ++i) {
            Tensor t = target.at(names[i]).detach();
            dot = add(dot, sum_all(mul(dummy[i], t)));
            dd = add(dd, sum_all(mul(dummy[i], dummy[i])));
            for (double v : t.data()) tt += v * v;
        }
        Tensor denom = sqrt(add_scalar(mul_scalar(dd, tt), 1e-24));
        return sub(Tensor::scalar(1.0), div(dot, denom));
    }
    throw ConfigError("unknown gradient distance '" + kind + "'");
}

std::pair<Tensor, double> optimize_images(
    const Shape& shape, const std::function<Tensor(const Tensor&)>& loss_fn,
    const AttackConfig& config, std::vector<double>* restart_losses) {
    if (config.iterations < 1) throw ConfigError("iterations must be >= 1");
    double mid = 0.5 * (config.pixel_min + config.pixel_max);
    double spread = 0.25 * (config.pixel_max - config.pixel_min);

    Tensor best;
    double best_loss = std::numeric_limits<double>::infinity();
    std::string last_error;
    for (int64_t r = 0; r < config.restarts; ++r) {
        std::mt19937_64 rng(config.seed * 0x9e3779b97f4a7c15ULL + uint64_t(r) + 1);
        Tensor x = Tensor::randn(shape, rng, spread, true);
        for (auto& v : x.raw()) v = std::clamp(v + mid, config.pixel_min, config.pixel_max);

        Adam opt(config.lr);
        Tensor local_best;
        double local_loss = std::numeric_limits<double>::infinity();
        for (int64_t t = 0; t < config.iterations; ++t) {
            opt.set_lr(config.lr * lr_decay(t, config.iterations));
            Tensor l = loss_fn(x);
            if (!l.all_finite()) {
                last_error = "non-finite attack loss at iteration " + std::to_string(t);
                break;
            }
            if (l.item() < local_loss) {
                local_loss = l.item();
                local_best = x.clone();
            }
            auto g = grad(l, {x});
            std::vector<Tensor> vars = {x};
            opt.step(vars, g);
            clamp_raw(x, config.pixel_min, config.pixel_max);
        }
        if (restart_losses) restart_losses->push_back(local_loss);
        if (local_best.defined() && local_loss < best_loss) {
            best_loss = local_loss;
            best = local_best;
        }
    }
    if (!best.defined())
        throw TrainingError("all attack restarts failed: " + last_error);
    return {best, best_loss};
}

namespace {
std::function<Tensor(const Tensor&)> make_objective(const ClientUpdate& update,
                                                    TaskModel& model,
                                                    const std::vector<int64_t>& labels,
                                                    const AttackConfig& config,
                                                    const std::string& dist) {
    return [&update, &model, labels, config, dist](const Tensor& x) {
        auto fwd = model.forward(x, true, false);
        Tensor ce = cross_entropy(fwd.logits, labels);
        auto ghat = grad(ce, model.params(), /*create_graph=*/true);
        Tensor total = gradient_distance(update.gradients, model.param_names(), ghat, dist);
        if (config.tv_weight > 0)
            total = add(total, mul_scalar(tv_regularizer(x), config.tv_weight));
        if (config.bn_weight > 0)
            total = add(total,
                        mul_scalar(bn_regularizer(fwd.batch_stats, update.bn_stats),
                                   config.bn_weight));
        if (config.l2_weight > 0)
            total = add(total, mul_scalar(mean_all(mul(x, x)), config.l2_weight));
        return total;
    };
}

std::vector<Tensor> split_batch(const Tensor& batch) {
    const Shape& s = batch.shape();
    std::vector<Tensor> out;
    for (int64_t b = 0; b < s[0]; ++b) {
        std::vector<int64_t> starts = {b, 0, 0, 0}, ends = {b + 1, s[1], s[2], s[3]};
        out.push_back(reshape(slice(batch, starts, ends), {s[1], s[2], s[3]}).detach());
    }
    return out;
}
}  // namespace

AttackResult optimization_gia(const ClientUpdate& update, const TaskModel& model_arch,
                              const AttackConfig& config) {
    int64_t B = config.batch_size > 0 ? config.batch_size : update.sample_count;
    TaskModel model = model_arch.clone();
    auto guess = infer_labels(update, model.spec().classes, B, model.fc_weight_name());
    std::string dist = config.distance.empty() ? "l2" : config.distance;

    AttackResult result;
    result.inferred_labels = guess.labels;
    result.low_confidence = guess.low_confidence;
    auto objective = make_objective(update, model, guess.labels, config, dist);
    Shape shape = {B, model.spec().in_channels, model.spec().image_size,
                   model.spec().image_size};
    auto [best, loss] = optimize_images(shape, objective, config, &result.restart_losses);
    result.final_loss = loss;
    result.reconstructions = split_batch(best);
    return result;
}

AttackResult model_gia(const ClientUpdate& update, const TaskModel& model_arch,
                       const ShadowGenerator& attacker_generator, const AttackConfig& config) {
    int64_t B = config.batch_size > 0 ? config.batch_size : update.sample_count;
    TaskModel model = model_arch.clone();
    auto guess = infer_labels(update, model.spec().classes, B, model.fc_weight_name());
    std::string dist = config.distance.empty() ? "cosine" : config.distance;
    auto objective = make_objective(update, model, guess.labels, config, dist);

    int64_t stage_iters = std::max<int64_t>(1, config.iterations / 2);
    AttackResult result;
    result.inferred_labels = guess.labels;
    result.low_confidence = guess.low_confidence;

    Tensor best_images;
    double best_loss = std::numeric_limits<double>::infinity();
    std::string last_error;
    for (int64_t r = 0; r < config.restarts; ++r) {
        ShadowGenerator gen = attacker_generator.clone();
        std::mt19937_64 rng(config.seed * 0x9e3779b97f4a7c15ULL + uint64_t(r) + 17);
        Tensor z = Tensor::randn({B, gen.spec().latent_dim}, rng, 1.0, true);

        // stage 1: latent search with the generator frozen
        Adam opt_z(config.lr);
        Tensor z_best = z.clone();
        double stage1 = std::numeric_limits<double>::infinity();
        Tensor img_best;
        for (int64_t t = 0; t < stage_iters; ++t) {
            opt_z.set_lr(config.lr * lr_decay(t, stage_iters));
            Tensor imgs = gen.generate(z);
            Tensor l = objective(imgs);
            if (!l.all_finite()) {
                last_error = "stage-1 loss diverged";
                break;
            }
            if (l.item() < stage1) {
                stage1 = l.item();
                z_best = z.clone();
                img_best = imgs.detach();
            }
            auto g = grad(l, {z});
            std::vector<Tensor> vars = {z};
            opt_z.step(vars, g);
        }
        if (!img_best.defined()) continue;
        z = z_best;
        z.set_requires_grad(false);

        // stage 2: decoder fine-tuning with z frozen; best-so-far starts at
        // the stage-1 optimum so the stage-2 loss can only improve on it
        double stage2 = stage1;
        auto vars = gen.generator_params();
        Adam opt_g(config.lr * 0.1);
        for (int64_t t = 0; t < stage_iters; ++t) {
            Tensor imgs = gen.generate(z);
            Tensor l = objective(imgs);
            if (!l.all_finite()) {
                last_error = "stage-2 loss diverged";
                break;
            }
            if (l.item() < stage2) {
                stage2 = l.item();
                img_best = imgs.detach();
            }
            auto g = grad(l, vars);
            opt_g.step(vars, g);
        }
        result.restart_losses.push_back(stage2);
        if (stage2 < best_loss) {
            best_loss = stage2;
            best_images = img_best;
            result.stage1_loss = stage1;
            result.stage2_loss = stage2;
        }
    }
    if (!best_images.defined())
        throw TrainingError("all model-based attack restarts failed: " + last_error);

    Tensor clamped = best_images.clone();
    clamp_raw(clamped, config.pixel_min, config.pixel_max);
    result.final_loss = best_loss;
    result.reconstructions = split_batch(clamped);
    return result;
}

}  // namespace fedshade
