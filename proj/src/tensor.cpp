#include "fedshade/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include "fedshade/errors.hpp"

namespace fedshade::ad {

namespace {

thread_local bool g_grad_enabled = true;

std::shared_ptr<Node> make_leaf(std::vector<double> v, Shape s, bool rg) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->shape = std::move(s);
    n->requires_grad = rg;
    return n;
}

// Record an op node. Parents/vjp are only kept when the graph is being traced.
Tensor make_op(std::vector<double> v, Shape s, std::vector<Tensor> parents,
               std::function<std::vector<Tensor>(const Tensor&)> vjp) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->shape = std::move(s);
    if (g_grad_enabled) {
        bool rg = false;
        for (const auto& p : parents) rg = rg || p.requires_grad();
        if (rg) {
            n->requires_grad = true;
            n->parents = std::move(parents);
            n->vjp = std::move(vjp);
        }
    }
    return Tensor(n);
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
    Shape out(std::max(a.size(), b.size()));
    for (size_t i = 0; i < out.size(); ++i) {
        int64_t da = i < out.size() - a.size() ? 1 : a[i - (out.size() - a.size())];
        int64_t db = i < out.size() - b.size() ? 1 : b[i - (out.size() - b.size())];
        if (da != db && da != 1 && db != 1)
            throw NumericError("broadcast mismatch " + shape_str(a) + " vs " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

std::vector<int64_t> strides_of(const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (int64_t i = static_cast<int64_t>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
    return st;
}

using UnaryFwd = double (*)(double);

Tensor elementwise_same(const Tensor& a, const Tensor& b,
                        double (*fwd)(double, double),
                        std::function<std::vector<Tensor>(const Tensor&, const Tensor&,
                                                          const Tensor&)> vjp2) {
    const auto& av = a.data();
    const auto& bv = b.data();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
    return make_op(std::move(out), a.shape(), {a, b},
                   [a, b, vjp2](const Tensor& g) { return vjp2(g, a, b); });
}

}  // namespace

int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
    return r + "]";
}

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }

Tensor Tensor::from(std::vector<double> v, Shape s, bool requires_grad) {
    if (static_cast<int64_t>(v.size()) != numel(s))
        throw NumericError("tensor data does not match shape " + shape_str(s));
    return Tensor(make_leaf(std::move(v), std::move(s), requires_grad));
}

Tensor Tensor::zeros(Shape s, bool rg) { return full(std::move(s), 0.0, rg); }

Tensor Tensor::full(Shape s, double v, bool rg) {
    const int64_t n = numel(s);
    return Tensor(make_leaf(std::vector<double>(static_cast<size_t>(n), v), std::move(s), rg));
}

Tensor Tensor::scalar(double v) { return full({1}, v); }

Tensor Tensor::randn(const Shape& s, std::mt19937_64& rng, double stddev, bool rg) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(numel(s));
    for (auto& x : v) x = dist(rng);
    return from(std::move(v), s, rg);
}

double Tensor::item() const {
    if (size() != 1) throw NumericError("item() on tensor of size " + std::to_string(size()));
    return node_->value[0];
}

double Tensor::max_abs() const {
    double m = 0;
    for (double v : node_->value) m = std::max(m, std::abs(v));
    return m;
}

double Tensor::max_value() const {
    double m = -std::numeric_limits<double>::infinity();
    for (double v : node_->value) m = std::max(m, v);
    return m;
}

bool Tensor::all_finite() const {
    for (double v : node_->value)
        if (!std::isfinite(v)) return false;
    return true;
}

Tensor Tensor::detach() const { return Tensor(make_leaf(node_->value, node_->shape, false)); }

Tensor Tensor::clone() const { return detach(); }

// ---------------- elementwise ----------------

Tensor add(const Tensor& a, const Tensor& b) {
    Shape s = broadcast_shape(a.shape(), b.shape());
    Tensor ab = broadcast_to(a, s), bb = broadcast_to(b, s);
    return elementwise_same(
        ab, bb, [](double x, double y) { return x + y; },
        [](const Tensor& g, const Tensor&, const Tensor&) { return std::vector<Tensor>{g, g}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    Shape s = broadcast_shape(a.shape(), b.shape());
    Tensor ab = broadcast_to(a, s), bb = broadcast_to(b, s);
    return elementwise_same(
        ab, bb, [](double x, double y) { return x - y; },
        [](const Tensor& g, const Tensor&, const Tensor&) {
            return std::vector<Tensor>{g, neg(g)};
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    Shape s = broadcast_shape(a.shape(), b.shape());
    Tensor ab = broadcast_to(a, s), bb = broadcast_to(b, s);
    return elementwise_same(
        ab, bb, [](double x, double y) { return x * y; },
        [](const Tensor& g, const Tensor& x, const Tensor& y) {
            return std::vector<Tensor>{mul(g, y), mul(g, x)};
        });
}

Tensor div(const Tensor& a, const Tensor& b) {
    Shape s = broadcast_shape(a.shape(), b.shape());
    Tensor ab = broadcast_to(a, s), bb = broadcast_to(b, s);
    return elementwise_same(
        ab, bb, [](double x, double y) { return x / y; },
        [](const Tensor& g, const Tensor& x, const Tensor& y) {
            Tensor gx = div(g, y);
            Tensor gy = neg(mul(g, div(x, mul(y, y))));
            return std::vector<Tensor>{gx, gy};
        });
}

namespace {
Tensor unary(const Tensor& a, UnaryFwd fwd,
             std::function<Tensor(const Tensor& g, const Tensor& x)> vjp1) {
    std::vector<double> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(a.data()[i]);
    return make_op(std::move(out), a.shape(), {a},
                   [a, vjp1](const Tensor& g) { return std::vector<Tensor>{vjp1(g, a)}; });
}
}  // namespace

Tensor neg(const Tensor& a) {
    return unary(a, [](double x) { return -x; },
                 [](const Tensor& g, const Tensor&) { return neg(g); });
}

Tensor exp(const Tensor& a) {
    return unary(a, [](double x) { return std::exp(x); },
                 [](const Tensor& g, const Tensor& x) { return mul(g, exp(x)); });
}

Tensor log(const Tensor& a) {
    return unary(a, [](double x) { return std::log(x); },
                 [](const Tensor& g, const Tensor& x) { return div(g, x); });
}

Tensor sqrt(const Tensor& a) {
    return unary(a, [](double x) { return std::sqrt(x); },
                 [](const Tensor& g, const Tensor& x) {
                     return div(g, mul_scalar(sqrt(x), 2.0));
                 });
}

Tensor abs(const Tensor& a) {
    return unary(a, [](double x) { return std::abs(x); },
                 [](const Tensor& g, const Tensor& x) {
                     // sign is treated as locally constant
                     std::vector<double> sv(x.size());
                     for (int64_t i = 0; i < x.size(); ++i)
                         sv[i] = x.data()[i] > 0 ? 1.0 : (x.data()[i] < 0 ? -1.0 : 0.0);
                     return mul(g, Tensor::from(std::move(sv), x.shape()));
                 });
}

Tensor relu(const Tensor& a) {
    return unary(a, [](double x) { return x > 0 ? x : 0.0; },
                 [](const Tensor& g, const Tensor& x) {
                     std::vector<double> mv(x.size());
                     for (int64_t i = 0; i < x.size(); ++i) mv[i] = x.data()[i] > 0 ? 1.0 : 0.0;
                     return mul(g, Tensor::from(std::move(mv), x.shape()));
                 });
}

Tensor pow_scalar(const Tensor& a, double p) {
    std::vector<double> out(a.size());
    for (int64_t i = 0; i < a.size(); ++i) out[i] = std::pow(a.data()[i], p);
    return make_op(std::move(out), a.shape(), {a}, [a, p](const Tensor& g) {
        return std::vector<Tensor>{mul(g, mul_scalar(pow_scalar(a, p - 1.0), p))};
    });
}

Tensor mul_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.size());
    for (int64_t i = 0; i < a.size(); ++i) out[i] = a.data()[i] * s;
    return make_op(std::move(out), a.shape(), {a}, [s](const Tensor& g) {
        return std::vector<Tensor>{mul_scalar(g, s)};
    });
}

Tensor add_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.size());
    for (int64_t i = 0; i < a.size(); ++i) out[i] = a.data()[i] + s;
    return make_op(std::move(out), a.shape(), {a},
                   [](const Tensor& g) { return std::vector<Tensor>{g}; });
}

// ---------------- shape ops ----------------

Tensor reshape(const Tensor& a, Shape s) {
    // one -1 wildcard allowed
    int64_t known = 1, wild = -1;
    for (size_t i = 0; i < s.size(); ++i) {
        if (s[i] == -1) wild = static_cast<int64_t>(i);
        else known *= s[i];
    }
    if (wild >= 0) s[wild] = a.size() / known;
    if (numel(s) != a.size())
        throw NumericError("reshape " + shape_str(a.shape()) + " -> " + shape_str(s));
    Shape prev = a.shape();
    return make_op(a.data(), std::move(s), {a}, [prev](const Tensor& g) {
        return std::vector<Tensor>{reshape(g, prev)};
    });
}

Tensor broadcast_to(const Tensor& a, const Shape& s) {
    if (a.shape() == s) return a;
    Shape as = a.shape();
    size_t off = s.size() - as.size();
    auto sst = strides_of(s);
    auto ast = strides_of(as);
    std::vector<int64_t> eff(s.size(), 0);  // effective source stride per out dim
    for (size_t i = 0; i < s.size(); ++i) {
        if (i < off) continue;
        int64_t ad = as[i - off];
        if (ad != 1 && ad != s[i]) throw NumericError("broadcast_to mismatch");
        if (ad == s[i]) eff[i] = ast[i - off];
    }
    int64_t n = numel(s);
    std::vector<double> out(n);
    const auto& av = a.data();
    for (int64_t idx = 0; idx < n; ++idx) {
        int64_t rem = idx, src = 0;
        for (size_t i = 0; i < s.size(); ++i) {
            int64_t c = rem / sst[i];
            rem -= c * sst[i];
            src += c * eff[i];
        }
        out[idx] = av[src];
    }
    Shape prev = as;
    return make_op(std::move(out), s, {a}, [prev](const Tensor& g) {
        return std::vector<Tensor>{sum_to(g, prev)};
    });
}

Tensor sum_to(const Tensor& a, const Shape& s) {
    if (a.shape() == s) return a;
    size_t off = a.shape().size() - s.size();
    std::vector<int64_t> axes;
    for (size_t i = 0; i < a.shape().size(); ++i) {
        if (i < off) axes.push_back(static_cast<int64_t>(i));
        else if (s[i - off] == 1 && a.shape()[i] != 1) axes.push_back(static_cast<int64_t>(i));
    }
    Tensor r = axes.empty() ? a : sum(a, axes, true);
    return reshape(r, s);
}

Tensor sum(const Tensor& a, std::vector<int64_t> axes, bool keepdim) {
    Shape as = a.shape();
    for (auto& ax : axes)
        if (ax < 0) ax += static_cast<int64_t>(as.size());
    std::sort(axes.begin(), axes.end());
    std::vector<bool> reduced(as.size(), false);
    for (auto ax : axes) reduced[static_cast<size_t>(ax)] = true;
    Shape keep = as;
    for (auto ax : axes) keep[static_cast<size_t>(ax)] = 1;
    Shape outs;
    for (size_t i = 0; i < as.size(); ++i)
        if (keepdim) outs.push_back(keep[i]);
        else if (!reduced[i]) outs.push_back(as[i]);
    if (outs.empty()) outs = {1};

    auto ast = strides_of(as);
    auto kst = strides_of(keep);
    int64_t n = numel(as);
    std::vector<double> out(numel(keep), 0.0);
    const auto& av = a.data();
    for (int64_t idx = 0; idx < n; ++idx) {
        int64_t rem = idx, dst = 0;
        for (size_t i = 0; i < as.size(); ++i) {
            int64_t c = rem / ast[i];
            rem -= c * ast[i];
            if (!reduced[i]) dst += c * kst[i];
        }
        out[dst] += av[idx];
    }
    Shape keep_copy = keep;
    Shape as_copy = as;
    return make_op(std::move(out), outs, {a}, [keep_copy, as_copy](const Tensor& g) {
        return std::vector<Tensor>{broadcast_to(reshape(g, keep_copy), as_copy)};
    });
}

Tensor sum_all(const Tensor& a) {
    std::vector<int64_t> axes(a.shape().size());
    std::iota(axes.begin(), axes.end(), 0);
    return sum(a, axes, false);
}

Tensor mean_all(const Tensor& a) { return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.size())); }

Tensor mean(const Tensor& a, std::vector<int64_t> axes, bool keepdim) {
    Shape as = a.shape();
    double cnt = 1;
    for (auto ax : axes) {
        int64_t i = ax < 0 ? ax + static_cast<int64_t>(as.size()) : ax;
        cnt *= static_cast<double>(as[static_cast<size_t>(i)]);
    }
    return mul_scalar(sum(a, std::move(axes), keepdim), 1.0 / cnt);
}

Tensor slice(const Tensor& a, const std::vector<int64_t>& starts,
             const std::vector<int64_t>& ends) {
    const Shape& as = a.shape();
    if (starts.size() != as.size() || ends.size() != as.size())
        throw NumericError("slice rank mismatch");
    Shape outs(as.size());
    for (size_t i = 0; i < as.size(); ++i) {
        if (starts[i] < 0 || ends[i] > as[i] || starts[i] >= ends[i])
            throw NumericError("slice range out of bounds");
        outs[i] = ends[i] - starts[i];
    }
    auto ast = strides_of(as);
    auto ost = strides_of(outs);
    int64_t n = numel(outs);
    std::vector<double> out(n);
    const auto& av = a.data();
    for (int64_t idx = 0; idx < n; ++idx) {
        int64_t rem = idx, src = 0;
        for (size_t i = 0; i < outs.size(); ++i) {
            int64_t c = rem / ost[i];
            rem -= c * ost[i];
            src += (c + starts[i]) * ast[i];
        }
        out[idx] = av[src];
    }
    Shape as_copy = as;
    auto st = starts;
    return make_op(std::move(out), outs, {a}, [as_copy, st](const Tensor& g) {
        return std::vector<Tensor>{scatter_into(g, as_copy, st)};
    });
}

// Places `g` into a zero tensor of shape `full_shape` at offset `starts`.
// Linear adjoint of slice, so its own vjp is a slice.
Tensor scatter_into(const Tensor& g, const Shape& full_shape,
                    const std::vector<int64_t>& starts) {
    const Shape& gs = g.shape();
    auto fst = strides_of(full_shape);
    auto gst = strides_of(gs);
    std::vector<double> full(numel(full_shape), 0.0);
    const auto& gv = g.data();
    for (int64_t idx = 0; idx < static_cast<int64_t>(gv.size()); ++idx) {
        int64_t rem = idx, dst = 0;
        for (size_t i = 0; i < gs.size(); ++i) {
            int64_t c = rem / gst[i];
            rem -= c * gst[i];
            dst += (c + starts[i]) * fst[i];
        }
        full[dst] = gv[idx];
    }
    Shape gsh = gs;
    auto st = starts;
    return make_op(std::move(full), full_shape, {g}, [gsh, st](const Tensor& gg) {
        std::vector<int64_t> ends(st.size());
        for (size_t i = 0; i < st.size(); ++i) ends[i] = st[i] + gsh[i];
        return std::vector<Tensor>{slice(gg, st, ends)};
    });
}

Tensor transpose_last2(const Tensor& a) {
    Shape as = a.shape();
    if (as.size() < 2) throw NumericError("transpose_last2 needs rank >= 2");
    Shape outs = as;
    std::swap(outs[outs.size() - 1], outs[outs.size() - 2]);
    int64_t rows = as[as.size() - 2], cols = as[as.size() - 1];
    int64_t batch = numel(as) / (rows * cols);
    std::vector<double> out(a.size());
    const auto& av = a.data();
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < cols; ++c)
                out[b * rows * cols + c * rows + r] = av[b * rows * cols + r * cols + c];
    return make_op(std::move(out), outs, {a}, [](const Tensor& g) {
        return std::vector<Tensor>{transpose_last2(g)};
    });
}

// ---------------- bmm ----------------

Tensor bmm(const Tensor& a, const Tensor& b) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if ((as.size() != 2 && as.size() != 3) || (bs.size() != 2 && bs.size() != 3))
        throw NumericError("bmm expects rank 2 or 3");
    int64_t Ba = as.size() == 3 ? as[0] : 1;
    int64_t Bb = bs.size() == 3 ? bs[0] : 1;
    int64_t m = as[as.size() - 2], k = as[as.size() - 1];
    int64_t k2 = bs[bs.size() - 2], n = bs[bs.size() - 1];
    if (k != k2) throw NumericError("bmm inner dim mismatch");
    if (Ba != Bb && Ba != 1 && Bb != 1) throw NumericError("bmm batch mismatch");
    int64_t B = std::max(Ba, Bb);
    bool batched_out = as.size() == 3 || bs.size() == 3;
    Shape outs = batched_out ? Shape{B, m, n} : Shape{m, n};
    std::vector<double> out(B * m * n, 0.0);
    const auto& av = a.data();
    const auto& bv = b.data();
    for (int64_t bi = 0; bi < B; ++bi) {
        const double* ap = av.data() + (Ba == 1 ? 0 : bi * m * k);
        const double* bp = bv.data() + (Bb == 1 ? 0 : bi * k * n);
        double* op = out.data() + bi * m * n;
        for (int64_t i = 0; i < m; ++i)
            for (int64_t kk = 0; kk < k; ++kk) {
                double aik = ap[i * k + kk];
                if (aik == 0.0) continue;
                const double* brow = bp + kk * n;
                double* orow = op + i * n;
                for (int64_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
            }
    }
    Shape ash = as, bsh = bs;
    return make_op(std::move(out), outs, {a, b}, [a, b, ash, bsh](const Tensor& g) {
        Tensor ga = bmm(g, transpose_last2(b));
        Tensor gb = bmm(transpose_last2(a), g);
        if (ga.shape() != ash) ga = sum_to(ga, ash);
        if (gb.shape() != bsh) gb = sum_to(gb, bsh);
        return std::vector<Tensor>{ga, gb};
    });
}

// ---------------- im2col / col2im ----------------

namespace {
struct ConvGeom {
    int64_t C, H, W, kh, kw, stride, pad, OH, OW;
};

ConvGeom geom(int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw, int64_t stride,
              int64_t pad) {
    ConvGeom gm{C, H, W, kh, kw, stride, pad, 0, 0};
    gm.OH = (H + 2 * pad - kh) / stride + 1;
    gm.OW = (W + 2 * pad - kw) / stride + 1;
    if (gm.OH <= 0 || gm.OW <= 0) throw NumericError("conv output size <= 0");
    return gm;
}
}  // namespace

Tensor im2col(const Tensor& x, int64_t kh, int64_t kw, int64_t stride, int64_t pad) {
    const Shape& xs = x.shape();
    if (xs.size() != 4) throw NumericError("im2col expects [B,C,H,W]");
    int64_t B = xs[0];
    auto gm = geom(xs[1], xs[2], xs[3], kh, kw, stride, pad);
    int64_t L = gm.OH * gm.OW;
    int64_t K = gm.C * kh * kw;
    std::vector<double> out(B * K * L, 0.0);
    const auto& xv = x.data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < gm.C; ++c)
            for (int64_t i = 0; i < kh; ++i)
                for (int64_t j = 0; j < kw; ++j) {
                    int64_t krow = (c * kh + i) * kw + j;
                    for (int64_t oy = 0; oy < gm.OH; ++oy) {
                        int64_t iy = oy * stride - pad + i;
                        if (iy < 0 || iy >= gm.H) continue;
                        for (int64_t ox = 0; ox < gm.OW; ++ox) {
                            int64_t ix = ox * stride - pad + j;
                            if (ix < 0 || ix >= gm.W) continue;
                            out[(b * K + krow) * L + oy * gm.OW + ox] =
                                xv[((b * gm.C + c) * gm.H + iy) * gm.W + ix];
                        }
                    }
                }
    int64_t C = gm.C, H = gm.H, W = gm.W;
    return make_op(std::move(out), {B, K, L}, {x},
                   [C, H, W, kh, kw, stride, pad](const Tensor& g) {
                       return std::vector<Tensor>{col2im(g, C, H, W, kh, kw, stride, pad)};
                   });
}

Tensor col2im(const Tensor& cols, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
              int64_t stride, int64_t pad) {
    const Shape& cs = cols.shape();
    if (cs.size() != 3) throw NumericError("col2im expects [B,K,L]");
    int64_t B = cs[0];
    auto gm = geom(C, H, W, kh, kw, stride, pad);
    int64_t L = gm.OH * gm.OW;
    int64_t K = C * kh * kw;
    if (cs[1] != K || cs[2] != L) throw NumericError("col2im shape mismatch");
    std::vector<double> out(B * C * H * W, 0.0);
    const auto& cv = cols.data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t i = 0; i < kh; ++i)
                for (int64_t j = 0; j < kw; ++j) {
                    int64_t krow = (c * kh + i) * kw + j;
                    for (int64_t oy = 0; oy < gm.OH; ++oy) {
                        int64_t iy = oy * stride - pad + i;
                        if (iy < 0 || iy >= H) continue;
                        for (int64_t ox = 0; ox < gm.OW; ++ox) {
                            int64_t ix = ox * stride - pad + j;
                            if (ix < 0 || ix >= W) continue;
                            out[((b * C + c) * H + iy) * W + ix] +=
                                cv[(b * K + krow) * L + oy * gm.OW + ox];
                        }
                    }
                }
    return make_op(std::move(out), {B, C, H, W}, {cols},
                   [kh, kw, stride, pad](const Tensor& g) {
                       return std::vector<Tensor>{im2col(g, kh, kw, stride, pad)};
                   });
}

// ---------------- conv / pool / linear ----------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int64_t stride, int64_t pad) {
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();  // [O, C, kh, kw]
    if (xs.size() != 4 || ws.size() != 4) throw NumericError("conv2d shapes");
    if (xs[1] != ws[1]) throw NumericError("conv2d channel mismatch");
    int64_t B = xs[0], O = ws[0], kh = ws[2], kw = ws[3];
    auto gm = geom(xs[1], xs[2], xs[3], kh, kw, stride, pad);
    Tensor cols = im2col(x, kh, kw, stride, pad);                      // [B, C*kh*kw, L]
    Tensor wm = reshape(w, {O, ws[1] * kh * kw});                      // [O, K]
    Tensor out = reshape(bmm(wm, cols), {B, O, gm.OH, gm.OW});
    if (bias.defined()) out = add(out, reshape(bias, {1, O, 1, 1}));
    return out;
}

Tensor conv_transpose2d(const Tensor& y, const Tensor& w, const Tensor& bias, int64_t stride,
                        int64_t pad) {
    const Shape& ys = y.shape();  // [B, Cin, Ho, Wo]
    const Shape& ws = w.shape();  // [Cin, Cout, kh, kw]
    if (ys.size() != 4 || ws.size() != 4) throw NumericError("conv_transpose2d shapes");
    if (ys[1] != ws[0]) throw NumericError("conv_transpose2d channel mismatch");
    int64_t B = ys[0], Cin = ws[0], Cout = ws[1], kh = ws[2], kw = ws[3];
    int64_t H = (ys[2] - 1) * stride - 2 * pad + kh;
    int64_t W = (ys[3] - 1) * stride - 2 * pad + kw;
    // adjoint of conv2d(x[B,Cout,H,W], w') where w'[Cin,Cout,kh,kw]
    Tensor wm = reshape(w, {Cin, Cout * kh * kw});          // [Cin, K]
    Tensor yf = reshape(y, {B, Cin, ys[2] * ys[3]});        // [B, Cin, L]
    Tensor cols = bmm(transpose_last2(wm), yf);             // [B, K, L]
    Tensor out = col2im(cols, Cout, H, W, kh, kw, stride, pad);
    if (bias.defined()) out = add(out, reshape(bias, {1, Cout, 1, 1}));
    return out;
}

Tensor avg_pool2d(const Tensor& x, int64_t k) {
    const Shape& xs = x.shape();
    int64_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    if (H % k != 0 || W % k != 0) throw NumericError("avg_pool2d size not divisible");
    Tensor cols = im2col(x, k, k, k, 0);                         // [B, C*k*k, L]
    Tensor r = reshape(cols, {B, C, k * k, (H / k) * (W / k)});
    Tensor m = mean(r, {2}, false);                              // [B, C, L]
    return reshape(m, {B, C, H / k, W / k});
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    Tensor out = bmm(x, transpose_last2(w));  // [B,I]x[I,O]
    if (b.defined()) out = add(out, b);
    return out;
}

// ---------------- composites ----------------

Tensor softmax(const Tensor& logits, int64_t axis) {
    Tensor ls = log_softmax(logits, axis);
    return exp(ls);
}

Tensor log_softmax(const Tensor& logits, int64_t axis) {
    if (axis < 0) axis += static_cast<int64_t>(logits.shape().size());
    // max over axis as a detached constant for numerical stability
    Shape keep = logits.shape();
    keep[static_cast<size_t>(axis)] = 1;
    auto st = strides_of(logits.shape());
    auto kst = strides_of(keep);
    std::vector<double> mx(numel(keep), -std::numeric_limits<double>::infinity());
    const auto& lv = logits.data();
    for (int64_t idx = 0; idx < logits.size(); ++idx) {
        int64_t rem = idx, dst = 0;
        for (size_t i = 0; i < keep.size(); ++i) {
            int64_t c = rem / st[i];
            rem -= c * st[i];
            if (static_cast<int64_t>(i) != axis) dst += c * kst[i];
        }
        mx[dst] = std::max(mx[dst], lv[idx]);
    }
    Tensor mxt = Tensor::from(std::move(mx), keep);
    Tensor shifted = sub(logits, mxt);
    Tensor lse = log(sum(exp(shifted), {axis}, true));
    return sub(shifted, lse);
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& labels) {
    const Shape& s = logits.shape();
    if (s.size() != 2) throw NumericError("cross_entropy expects [B,K] logits");
    int64_t B = s[0], K = s[1];
    if (static_cast<int64_t>(labels.size()) != B) throw DataError("label count mismatch");
    std::vector<double> oh(B * K, 0.0);
    for (int64_t i = 0; i < B; ++i) {
        if (labels[i] < 0 || labels[i] >= K)
            throw DataError("label " + std::to_string(labels[i]) + " out of range");
        oh[i * K + labels[i]] = 1.0;
    }
    Tensor onehot = Tensor::from(std::move(oh), {B, K});
    Tensor ls = log_softmax(logits, 1);
    return mul_scalar(sum_all(mul(onehot, ls)), -1.0 / static_cast<double>(B));
}

// ---------------- backward ----------------

std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& inputs,
                         bool create_graph, Tensor grad_output) {
    if (!output.defined()) throw NumericError("grad on undefined tensor");
    if (!grad_output.defined()) {
        if (output.size() != 1) throw NumericError("grad output must be scalar or have grad_output");
        grad_output = Tensor::scalar(1.0);
    }
    // topological order
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    std::unordered_map<Node*, Tensor> node_of;  // keep shared_ptrs alive
    stack.push_back({output.node(), 0});
    node_of.emplace(output.node(), output);
    while (!stack.empty()) {
        auto& [n, ci] = stack.back();
        if (ci < n->parents.size()) {
            Node* p = n->parents[ci].node();
            Tensor pt = n->parents[ci];
            ++ci;
            if (p->requires_grad && !visited.count(p) ) {
                bool on_stack = false;
                for (auto& fr : stack)
                    if (fr.first == p) { on_stack = true; break; }
                if (!on_stack) {
                    node_of.emplace(p, pt);
                    stack.push_back({p, 0});
                }
            }
        } else {
            if (!visited.count(n)) {
                visited.insert(n);
                order.push_back(n);
            }
            stack.pop_back();
        }
    }
    // reverse topological: order has children after parents? DFS postorder puts
    // parents (dependencies) first; we need to process output first, so iterate
    // in reverse.
    std::unordered_map<Node*, Tensor> grads;
    grads[output.node()] = grad_output;
    bool prev = grad_enabled();
    set_grad_enabled(create_graph);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        auto gi = grads.find(n);
        if (gi == grads.end() || !n->vjp) continue;
        std::vector<Tensor> pgrads = n->vjp(gi->second);
        for (size_t i = 0; i < n->parents.size(); ++i) {
            Node* p = n->parents[i].node();
            if (!p->requires_grad) continue;
            if (!pgrads[i].defined()) continue;
            auto ex = grads.find(p);
            if (ex == grads.end()) grads[p] = pgrads[i];
            else ex->second = add(ex->second, pgrads[i]);
        }
    }
    set_grad_enabled(prev);
    std::vector<Tensor> result;
    result.reserve(inputs.size());
    for (const auto& in : inputs) {
        auto gi = grads.find(in.node());
        if (gi != grads.end()) result.push_back(gi->second);
        else result.push_back(Tensor::zeros(in.shape()));
    }
    return result;
}

}  // namespace fedshade::ad
