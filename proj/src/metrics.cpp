#include "fedshade/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fedshade/errors.hpp"

namespace fedshade {

using namespace ad;

namespace {
constexpr int64_t kWindow = 8;

double window_ssim(const double* a, const double* b, int64_t W, int64_t y0, int64_t x0,
                   int64_t wh, int64_t ww, double peak) {
    double ma = 0, mb = 0;
    int64_t n = wh * ww;
    for (int64_t y = 0; y < wh; ++y)
        for (int64_t x = 0; x < ww; ++x) {
            ma += a[(y0 + y) * W + x0 + x];
            mb += b[(y0 + y) * W + x0 + x];
        }
    ma /= n;
    mb /= n;
    double va = 0, vb = 0, cov = 0;
    for (int64_t y = 0; y < wh; ++y)
        for (int64_t x = 0; x < ww; ++x) {
            double da = a[(y0 + y) * W + x0 + x] - ma;
            double db = b[(y0 + y) * W + x0 + x] - mb;
            va += da * da;
            vb += db * db;
            cov += da * db;
        }
    va /= n;
    vb /= n;
    cov /= n;
    double c1 = 0.01 * peak, c2 = 0.03 * peak;
    c1 *= c1;
    c2 *= c2;
    return ((2 * ma * mb + c1) * (2 * cov + c2)) /
           ((ma * ma + mb * mb + c1) * (va + vb + c2));
}
}  // namespace

double ssim(const Tensor& a, const Tensor& b, double peak) {
    if (a.shape() != b.shape()) throw DataError("ssim shape mismatch");
    const Shape& s = a.shape();
    if (s.size() != 3) throw DataError("ssim expects [C,H,W] images");
    int64_t C = s[0], H = s[1], W = s[2];
    int64_t wh = std::min(kWindow, H), ww = std::min(kWindow, W);
    double total = 0;
    int64_t count = 0;
    for (int64_t c = 0; c < C; ++c) {
        const double* pa = a.data().data() + c * H * W;
        const double* pb = b.data().data() + c * H * W;
        for (int64_t y = 0; y + wh <= H; ++y)
            for (int64_t x = 0; x + ww <= W; ++x) {
                total += window_ssim(pa, pb, W, y, x, wh, ww, peak);
                ++count;
            }
    }
    return total / double(count);
}

PerceptualFn make_perceptual(const TaskModel& reference) {
    auto ref = std::make_shared<TaskModel>(reference.clone());
    return [ref](const Tensor& a, const Tensor& b) {
        NoGradGuard ng;
        const Shape& s = a.shape();
        if (s != b.shape()) throw DataError("perceptual shape mismatch");
        auto feats = [&](const Tensor& img) {
            auto fwd = ref->forward(reshape(img, {1, s[0], s[1], s[2]}), false, false);
            std::vector<double> v;
            for (auto& [name, act] : fwd.conv_activations)
                v.insert(v.end(), act.data().begin(), act.data().end());
            v.insert(v.end(), fwd.penultimate.data().begin(), fwd.penultimate.data().end());
            return v;
        };
        auto fa = feats(a), fb = feats(b);
        double sq = 0;
        for (size_t i = 0; i < fa.size(); ++i) sq += (fa[i] - fb[i]) * (fa[i] - fb[i]);
        return std::sqrt(sq / double(fa.size()));
    };
}

ImageMetrics image_metrics(const Tensor& a, const Tensor& b, double peak,
                           const PerceptualFn& perceptual) {
    if (a.shape() != b.shape()) throw DataError("image_metrics shape mismatch");
    ImageMetrics m;
    for (int64_t i = 0; i < a.size(); ++i) {
        double d = a.data()[i] - b.data()[i];
        m.mse += d * d;
    }
    m.mse /= double(a.size());
    m.psnr = m.mse < peak * peak * 1e-10 ? 100.0
                                         : 10.0 * std::log10(peak * peak / m.mse);
    m.ssim = ssim(a, b, peak);
    m.perceptual = perceptual ? perceptual(a, b) : 0.0;
    return m;
}

std::vector<int64_t> best_match(const std::vector<Tensor>& recons,
                                const std::vector<Tensor>& originals) {
    if (recons.empty() || originals.empty()) throw DataError("best_match on empty lists");
    std::vector<int64_t> out;
    for (const auto& r : recons) {
        int64_t best = 0;
        double best_s = -2;
        for (size_t j = 0; j < originals.size(); ++j) {
            double s = ssim(r, originals[j]);
            if (s > best_s) {  // strict: ties keep the lowest index
                best_s = s;
                best = int64_t(j);
            }
        }
        out.push_back(best);
    }
    return out;
}

ImageMetrics target_region_metrics(const Tensor& recon, const Tensor& original,
                                   const Tensor& saliency, double top_fraction, double peak,
                                   const PerceptualFn& perceptual) {
    if (recon.shape() != original.shape()) throw DataError("target region shape mismatch");
    const Shape& s = recon.shape();
    int64_t C = s[0], H = s[1], W = s[2];
    if (saliency.shape() != Shape{H, W}) throw DataError("saliency shape mismatch");
    if (top_fraction <= 0 || top_fraction > 1)
        throw ConfigError("top_fraction must be in (0,1]");

    int64_t k = int64_t(std::ceil(top_fraction * double(H * W)));
    std::vector<int64_t> idx(H * W);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
        return saliency.data()[a] > saliency.data()[b];
    });
    int64_t y0 = H, y1 = -1, x0 = W, x1 = -1;
    for (int64_t i = 0; i < k; ++i) {
        int64_t y = idx[i] / W, x = idx[i] % W;
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
    }
    // grow a degenerate box to at least 8x8 (clipped to the image)
    auto expand = [](int64_t& lo, int64_t& hi, int64_t limit) {
        int64_t need = std::min<int64_t>(8, limit) - (hi - lo + 1);
        while (need > 0) {
            if (lo > 0) {
                --lo;
                --need;
            }
            if (need > 0 && hi < limit - 1) {
                ++hi;
                --need;
            }
        }
    };
    expand(y0, y1, H);
    expand(x0, x1, W);

    std::vector<int64_t> starts = {0, y0, x0}, ends = {C, y1 + 1, x1 + 1};
    NoGradGuard ng;
    Tensor rc = slice(recon, starts, ends);
    Tensor oc = slice(original, starts, ends);
    return image_metrics(rc, oc, peak, perceptual);
}

double rdlv_value(double ssim_recon, double ssim_prior) {
    return (ssim_recon - ssim_prior) / ssim_prior;
}

std::optional<double> rdlv(const Tensor& x, const Tensor& x_s, const Tensor& prior) {
    double sp = ssim(x_s, prior);
    if (sp == 0.0) return std::nullopt;
    return rdlv_value(ssim(x, x_s), sp);
}

std::vector<double> embed(TaskModel& reference, const Tensor& image) {
    NoGradGuard ng;
    const Shape& s = image.shape();
    auto fwd = reference.forward(reshape(image, {1, s[0], s[1], s[2]}), false, false);
    return fwd.penultimate.data();
}

double iip(const std::vector<std::vector<double>>& recon_embeddings,
           const std::vector<std::vector<double>>& train_embeddings,
           const std::vector<int64_t>& source_ids, int64_t k) {
    int64_t n = int64_t(train_embeddings.size());
    if (k < 1 || k > n) throw ConfigError("iip k out of range");
    if (recon_embeddings.size() != source_ids.size())
        throw ConfigError("iip source list size mismatch");
    if (recon_embeddings.empty()) throw ConfigError("iip needs reconstructions");

    auto cosine = [](const std::vector<double>& a, const std::vector<double>& b) {
        double dot = 0, na = 0, nb = 0;
        for (size_t i = 0; i < a.size(); ++i) {
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        return dot / std::max(std::sqrt(na) * std::sqrt(nb), 1e-300);
    };
    int hits = 0;
    for (size_t r = 0; r < recon_embeddings.size(); ++r) {
        std::vector<double> sims(n);
        for (int64_t j = 0; j < n; ++j) sims[j] = cosine(recon_embeddings[r], train_embeddings[j]);
        std::vector<int64_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](int64_t a, int64_t b) { return sims[a] > sims[b]; });
        for (int64_t j = 0; j < k; ++j)
            if (order[j] == source_ids[r]) {
                ++hits;
                break;
            }
    }
    return double(hits) / double(recon_embeddings.size());
}

}  // namespace fedshade
