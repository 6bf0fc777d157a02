#include "fedshade/saliency.hpp"

#include <algorithm>
#include <cmath>

#include "fedshade/errors.hpp"

namespace fedshade {

using namespace ad;

Tensor upsample_bilinear(const Tensor& maps, int64_t out_h, int64_t out_w) {
    const Shape& s = maps.shape();
    if (s.size() != 3) throw ConfigError("upsample expects [B, h, w]");
    int64_t B = s[0], h = s[1], w = s[2];
    std::vector<double> out(B * out_h * out_w);
    const auto& src = maps.data();
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t y = 0; y < out_h; ++y) {
            // align-corners mapping; degenerate axis maps everywhere to row 0
            double fy = (h > 1 && out_h > 1) ? double(y) * (h - 1) / (out_h - 1) : 0.0;
            int64_t y0 = std::min<int64_t>(int64_t(fy), h - 1);
            int64_t y1 = std::min<int64_t>(y0 + 1, h - 1);
            double ty = fy - y0;
            for (int64_t x = 0; x < out_w; ++x) {
                double fx = (w > 1 && out_w > 1) ? double(x) * (w - 1) / (out_w - 1) : 0.0;
                int64_t x0 = std::min<int64_t>(int64_t(fx), w - 1);
                int64_t x1 = std::min<int64_t>(x0 + 1, w - 1);
                double tx = fx - x0;
                const double* p = src.data() + b * h * w;
                double v = (1 - ty) * ((1 - tx) * p[y0 * w + x0] + tx * p[y0 * w + x1]) +
                           ty * ((1 - tx) * p[y1 * w + x0] + tx * p[y1 * w + x1]);
                out[(b * out_h + y) * out_w + x] = v;
            }
        }
    }
    return Tensor::from(std::move(out), {B, out_h, out_w});
}

SaliencyMap cam_saliency(TaskModel& model, const Tensor& batch,
                         const std::vector<int64_t>& labels, const std::string& layer) {
    const Shape& bs = batch.shape();
    if (bs.size() != 4) throw ConfigError("cam_saliency expects a [B,C,H,W] batch");
    int64_t B = bs[0], H = bs[2], W = bs[3];
    if (static_cast<int64_t>(labels.size()) != B)
        throw ConfigError("label count does not match batch");
    auto convs = model.conv_layers();
    if (std::find(convs.begin(), convs.end(), layer) == convs.end())
        throw ConfigError("layer " + layer + " is not a conv layer");

    Tensor x = batch.detach();
    x.set_requires_grad(true);
    auto fwd = model.forward(x, /*training=*/false, /*update_running=*/false);
    Tensor act;
    for (auto& [name, a] : fwd.conv_activations)
        if (name == layer) act = a;
    // class score Y^c summed over the batch; each sample's activations only
    // feed its own logit, so the gradient separates per sample
    int64_t classes = fwd.logits.shape()[1];
    std::vector<double> sel(B * classes, 0.0);
    for (int64_t b = 0; b < B; ++b) sel[b * classes + labels[b]] = 1.0;
    Tensor score = sum_all(mul(fwd.logits, Tensor::from(std::move(sel), {B, classes})));
    Tensor g = grad(score, {act})[0];

    const Shape& as = act.shape();  // [B, K, h, w]
    int64_t K = as[1], h = as[2], w = as[3];
    const auto& A = act.data();
    const auto& G = g.data();
    std::vector<double> cam(B * h * w, 0.0);
    bool warn = false;
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t k = 0; k < K; ++k) {
            const double* a = A.data() + (b * K + k) * h * w;
            const double* gr = G.data() + (b * K + k) * h * w;
            double sum_ag3 = 0.0;
            for (int64_t i = 0; i < h * w; ++i) sum_ag3 += a[i] * gr[i] * gr[i] * gr[i];
            double wk = 0.0;
            for (int64_t i = 0; i < h * w; ++i) {
                double g2 = gr[i] * gr[i];
                double denom = 2.0 * g2 + sum_ag3;
                double alpha = denom != 0.0 ? g2 / denom : 0.0;
                wk += alpha * std::max(gr[i], 0.0);
            }
            for (int64_t i = 0; i < h * w; ++i) cam[b * h * w + i] += wk * a[i];
        }
        double mx = 0.0;
        for (int64_t i = 0; i < h * w; ++i) {
            cam[b * h * w + i] = std::max(cam[b * h * w + i], 0.0);
            mx = std::max(mx, cam[b * h * w + i]);
        }
        if (mx == 0.0) warn = true;
    }
    SaliencyMap out;
    out.map = upsample_bilinear(Tensor::from(std::move(cam), {B, h, w}), H, W);
    out.zero_warning = warn;
    return out;
}

}  // namespace fedshade
