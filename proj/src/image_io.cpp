#include "fedshade/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "fedshade/errors.hpp"

namespace fedshade {

using ad::Shape;
using ad::Tensor;

namespace {

int next_token(std::istream& in) {
    // skips whitespace and '#' comments
    while (true) {
        int c = in.peek();
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(c)) {
            in.get();
        } else {
            break;
        }
    }
    int v;
    if (!(in >> v)) throw DataError("malformed netpbm header");
    return v;
}

}  // namespace

Tensor read_image(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw DataError("cannot open image " + file.string());
    std::string magic;
    in >> magic;
    bool ascii = magic == "P2" || magic == "P3";
    bool binary = magic == "P5" || magic == "P6";
    if (!ascii && !binary) throw DataError("unsupported image format in " + file.string());
    int64_t C = (magic == "P3" || magic == "P6") ? 3 : 1;
    int64_t W = next_token(in);
    int64_t H = next_token(in);
    int64_t maxv = next_token(in);
    if (maxv <= 0 || maxv > 65535) throw DataError("bad maxval in " + file.string());
    std::vector<double> pix(C * H * W);
    if (binary) {
        in.get();  // single whitespace after header
        int bytes = maxv > 255 ? 2 : 1;
        std::vector<unsigned char> buf(H * W * C * bytes);
        in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (!in) throw DataError("truncated image " + file.string());
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x)
                for (int64_t c = 0; c < C; ++c) {
                    size_t o = static_cast<size_t>(((y * W + x) * C + c) * bytes);
                    int v = bytes == 2 ? (buf[o] << 8) | buf[o + 1] : buf[o];
                    pix[(c * H + y) * W + x] = static_cast<double>(v) / maxv;
                }
    } else {
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x)
                for (int64_t c = 0; c < C; ++c)
                    pix[(c * H + y) * W + x] = static_cast<double>(next_token(in)) / maxv;
    }
    return Tensor::from(std::move(pix), {C, H, W});
}

void write_image(const std::filesystem::path& file, const Tensor& img) {
    const Shape& s = img.shape();
    if (s.size() != 3) throw DataError("write_image expects [C,H,W]");
    int64_t C = s[0], H = s[1], W = s[2];
    if (C != 1 && C != 3) throw DataError("write_image supports 1 or 3 channels");
    std::ofstream out(file, std::ios::binary);
    if (!out) throw DataError("cannot write image " + file.string());
    out << (C == 1 ? "P5" : "P6") << "\n" << W << " " << H << "\n255\n";
    std::vector<unsigned char> buf(C * H * W);
    const auto& v = img.data();
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x)
            for (int64_t c = 0; c < C; ++c) {
                double p = std::clamp(v[(c * H + y) * W + x], 0.0, 1.0);
                buf[(y * W + x) * C + c] = static_cast<unsigned char>(std::lround(p * 255.0));
            }
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

Tensor resize_image(const Tensor& img, int64_t res) {
    const Shape& s = img.shape();
    int64_t C = s[0], H = s[1], W = s[2];
    if (H == res && W == res) return img;
    std::vector<double> out(C * res * res);
    const auto& v = img.data();
    for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < res; ++y)
            for (int64_t x = 0; x < res; ++x) {
                int64_t sy = std::min(H - 1, y * H / res);
                int64_t sx = std::min(W - 1, x * W / res);
                out[(c * res + y) * res + x] = v[(c * H + sy) * W + sx];
            }
    return Tensor::from(std::move(out), {C, res, res});
}

}  // namespace fedshade
