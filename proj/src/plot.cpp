#include "fedshade/plot.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "fedshade/errors.hpp"
#include "fedshade/image_io.hpp"

namespace fedshade {

using namespace ad;

namespace {

struct Rgb {
    double r, g, b;
};

// palette loosely matching matplotlib's default cycle
const Rgb kPalette[] = {
    {0.12, 0.47, 0.71}, {1.00, 0.50, 0.05}, {0.17, 0.63, 0.17},
    {0.84, 0.15, 0.16}, {0.58, 0.40, 0.74}, {0.55, 0.34, 0.29},
};

struct Canvas {
    int64_t w, h;
    std::vector<double> px;  // 3 planes, row-major

    Canvas(int64_t width, int64_t height) : w(width), h(height), px(3 * width * height, 1.0) {}

    void set(int64_t x, int64_t y, const Rgb& c) {
        if (x < 0 || x >= w || y < 0 || y >= h) return;
        px[0 * w * h + y * w + x] = c.r;
        px[1 * w * h + y * w + x] = c.g;
        px[2 * w * h + y * w + x] = c.b;
    }

    void line(double x0, double y0, double x1, double y1, const Rgb& c) {
        double dx = x1 - x0, dy = y1 - y0;
        int64_t steps = int64_t(std::ceil(std::max(std::abs(dx), std::abs(dy)))) + 1;
        for (int64_t i = 0; i <= steps; ++i) {
            double t = double(i) / double(steps);
            set(int64_t(std::lround(x0 + t * dx)), int64_t(std::lround(y0 + t * dy)), c);
        }
    }

    Tensor tensor() const { return Tensor::from(std::vector<double>(px), {3, h, w}); }
};

}  // namespace

Tensor render_line_plot(const std::vector<LineSeries>& series, int64_t width, int64_t height) {
    if (width < 64 || height < 48) throw ConfigError("plot canvas too small");
    Canvas cv(width, height);
    const int64_t ml = 10, mr = 8, mt = 8, mb = 10;  // margins
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0;
    double y0 = x0, y1 = -x0;
    for (const auto& s : series) {
        for (size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
            if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
            x0 = std::min(x0, s.x[i]);
            x1 = std::max(x1, s.x[i]);
            y0 = std::min(y0, s.y[i]);
            y1 = std::max(y1, s.y[i]);
        }
    }
    if (!std::isfinite(x0)) {  // nothing plottable: axes only
        x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    }
    if (x1 - x0 < 1e-12) x1 = x0 + 1;
    if (y1 - y0 < 1e-12) y1 = y0 + 1;

    auto px = [&](double x) {
        return ml + (x - x0) / (x1 - x0) * double(width - ml - mr - 1);
    };
    auto py = [&](double y) {
        return double(height - mb - 1) - (y - y0) / (y1 - y0) * double(height - mt - mb - 1);
    };

    Rgb axis{0.25, 0.25, 0.25};
    cv.line(ml, mt, ml, height - mb - 1, axis);
    cv.line(ml, height - mb - 1, width - mr - 1, height - mb - 1, axis);

    for (size_t si = 0; si < series.size(); ++si) {
        const auto& s = series[si];
        Rgb c = kPalette[si % (sizeof(kPalette) / sizeof(kPalette[0]))];
        bool have_prev = false;
        double prev_x = 0, prev_y = 0;
        for (size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
            if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) {
                have_prev = false;
                continue;
            }
            double cx = px(s.x[i]), cy = py(s.y[i]);
            if (have_prev) cv.line(prev_x, prev_y, cx, cy, c);
            cv.set(int64_t(std::lround(cx)), int64_t(std::lround(cy)), c);
            prev_x = cx, prev_y = cy;
            have_prev = true;
        }
        // legend swatch in the top-right corner, one row per series
        int64_t ly = mt + 2 + int64_t(si) * 4;
        for (int64_t lx = width - mr - 10; lx < width - mr - 2; ++lx) cv.set(lx, ly, c);
    }
    return cv.tensor();
}

void write_line_plot(const std::filesystem::path& file, const std::vector<LineSeries>& series,
                     int64_t width, int64_t height) {
    write_image(file, render_line_plot(series, width, height));
}

Tensor render_contact_sheet(const std::vector<std::vector<Tensor>>& rows) {
    if (rows.empty() || rows[0].empty()) throw ConfigError("empty contact sheet");
    const Shape ts = rows[0][0].shape();
    if (ts.size() != 3) throw ConfigError("contact sheet tiles must be [C,H,W]");
    int64_t cols = 0;
    for (const auto& r : rows) {
        cols = std::max(cols, int64_t(r.size()));
        for (const auto& t : r)
            if (t.shape() != ts) throw ConfigError("contact sheet tiles differ in shape");
    }
    const int64_t g = 2, th = ts[1], tw = ts[2];
    int64_t H = g + int64_t(rows.size()) * (th + g);
    int64_t W = g + cols * (tw + g);
    std::vector<double> out(ts[0] * H * W, 0.05);
    for (size_t r = 0; r < rows.size(); ++r) {
        for (size_t c = 0; c < rows[r].size(); ++c) {
            const auto& tile = rows[r][c].data();
            int64_t oy = g + int64_t(r) * (th + g), ox = g + int64_t(c) * (tw + g);
            for (int64_t ch = 0; ch < ts[0]; ++ch)
                for (int64_t y = 0; y < th; ++y)
                    for (int64_t x = 0; x < tw; ++x)
                        out[(ch * H + oy + y) * W + ox + x] =
                            std::clamp(tile[(ch * th + y) * tw + x], 0.0, 1.0);
        }
    }
    return Tensor::from(std::move(out), {ts[0], H, W});
}

void write_contact_sheet(const std::filesystem::path& file,
                         const std::vector<std::vector<Tensor>>& rows) {
    write_image(file, render_contact_sheet(rows));
}

}  // namespace fedshade
