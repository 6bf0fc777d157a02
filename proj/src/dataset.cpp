#include "fedshade/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

#include "fedshade/errors.hpp"
#include "fedshade/image_io.hpp"

namespace fedshade {

using ad::Shape;
using ad::Tensor;

PartitionSpec default_partition_spec() {
    PartitionSpec spec;
    spec.client_sizes = {8, 8, 8, 8, 16, 16, 16, 16, 1};
    spec.batch_sizes = {4, 4, 4, 4, 8, 8, 8, 8, 1};
    spec.label_skew = 0.0;
    return spec;
}

std::vector<Sample> generate_synthetic_dataset(int64_t n, int64_t resolution, int64_t channels,
                                               int64_t classes, uint64_t seed) {
    if (resolution < 8) throw ConfigError("resolution must be >= 8");
    if (channels != 1 && channels != 3) throw ConfigError("channels must be 1 or 3");
    if (classes < 1 || n < classes) throw ConfigError("need n >= classes >= 1");

    std::mt19937_64 rng(seed);
    // balanced label multiset, shuffled so class order is not positional
    std::vector<int64_t> labels(n);
    for (int64_t i = 0; i < n; ++i) labels[i] = i % classes;
    std::shuffle(labels.begin(), labels.end(), rng);

    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::vector<Sample> out;
    out.reserve(n);
    const double R = static_cast<double>(resolution);
    for (int64_t i = 0; i < n; ++i) {
        int64_t k = labels[i];
        // class geometry: one ellipse, eccentricity grows with class index
        double ecc = 1.0 + 1.2 * static_cast<double>(k);
        double a = R * 0.28;
        double b = a / ecc;
        double cy = R * (0.35 + 0.3 * uni(rng));
        double cx = R * (0.35 + 0.3 * uni(rng));
        double bright = 0.55 + 0.35 * uni(rng);
        double grad_dir = uni(rng) < 0.5 ? 1.0 : -1.0;
        double phase = uni(rng) * 6.283185307179586;
        std::vector<double> img(channels * resolution * resolution);
        for (int64_t c = 0; c < channels; ++c)
            for (int64_t y = 0; y < resolution; ++y)
                for (int64_t x = 0; x < resolution; ++x) {
                    double bg = 0.15 + 0.2 * (grad_dir > 0 ? y / R : (R - 1 - y) / R);
                    double dy = (y - cy) / b, dx = (x - cx) / a;
                    double d2 = dx * dx + dy * dy;
                    double organ = d2 < 1.0 ? bright * (1.0 - 0.5 * d2) : 0.0;
                    double texture = 0.04 * std::sin(0.9 * x + phase) * std::cos(1.1 * y);
                    double v = bg + organ + texture + 0.02 * uni(rng);
                    img[(c * resolution + y) * resolution + x] = std::clamp(v, 0.0, 1.0);
                }
        Sample s;
        s.image = Tensor::from(std::move(img), {channels, resolution, resolution});
        s.label = k;
        s.id = i;
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<Sample> load_image_folder(const std::filesystem::path& path, int64_t resolution) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(path)) throw DataError("not a directory: " + path.string());
    std::vector<fs::path> class_dirs;
    for (const auto& e : fs::directory_iterator(path))
        if (e.is_directory()) class_dirs.push_back(e.path());
    std::sort(class_dirs.begin(), class_dirs.end());
    if (class_dirs.empty()) throw DataError("no class subdirectories in " + path.string());

    std::vector<Sample> out;
    int64_t id = 0;
    for (size_t k = 0; k < class_dirs.size(); ++k) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(class_dirs[k]))
            if (e.is_regular_file()) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            Tensor img;
            try {
                img = read_image(f);
            } catch (const std::exception& ex) {
                throw DataError("failed to read " + f.string() + ": " + ex.what());
            }
            Sample s;
            s.image = resize_image(img, resolution);
            s.label = static_cast<int64_t>(k);
            s.id = id++;
            out.push_back(std::move(s));
        }
    }
    if (out.empty()) throw DataError("no images found under " + path.string());
    return out;
}

std::vector<ClientDataset> partition_clients(const std::vector<Sample>& samples,
                                             const PartitionSpec& spec, uint64_t seed) {
    if (spec.client_sizes.size() != spec.batch_sizes.size())
        throw ConfigError("client_sizes and batch_sizes length mismatch");
    if (spec.label_skew < 0.0 || spec.label_skew > 1.0)
        throw ConfigError("label_skew must be in [0,1]");
    int64_t total = std::accumulate(spec.client_sizes.begin(), spec.client_sizes.end(),
                                    static_cast<int64_t>(0));
    if (total > static_cast<int64_t>(samples.size()))
        throw ConfigError("partition requests more samples than available");

    // per-label queues, each deterministically shuffled
    std::map<int64_t, std::deque<size_t>> by_label;
    {
        std::vector<size_t> order(samples.size());
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 rng(seed);
        std::shuffle(order.begin(), order.end(), rng);
        for (size_t idx : order) by_label[samples[idx].label].push_back(idx);
    }
    std::vector<int64_t> label_list;
    for (auto& [l, q] : by_label) label_list.push_back(l);
    const int64_t K = static_cast<int64_t>(label_list.size());

    auto pop_label = [&](int64_t label) -> int64_t {
        auto& q = by_label[label];
        if (q.empty()) return -1;
        int64_t idx = static_cast<int64_t>(q.front());
        q.pop_front();
        return idx;
    };
    auto pop_any = [&](int64_t start) -> int64_t {
        for (int64_t t = 0; t < K; ++t) {
            int64_t idx = pop_label(label_list[(start + t) % K]);
            if (idx >= 0) return idx;
        }
        return -1;
    };

    std::vector<ClientDataset> clients(spec.client_sizes.size());
    int64_t rr = 0;  // global round-robin cursor over labels for the mixed part
    for (size_t c = 0; c < clients.size(); ++c) {
        clients[c].client_id = static_cast<int64_t>(c) + 1;
        clients[c].batch_size = spec.batch_sizes[c];
        int64_t m = spec.client_sizes[c];
        if (m < 1 || spec.batch_sizes[c] < 1) throw ConfigError("sizes must be positive");
        int64_t preferred = static_cast<int64_t>(c) % K;
        int64_t n_pref = static_cast<int64_t>(std::llround(spec.label_skew * m));
        for (int64_t j = 0; j < m; ++j) {
            int64_t idx;
            if (j < n_pref) {
                idx = pop_label(label_list[preferred]);
                if (idx < 0) {
                    if (spec.label_skew >= 1.0)
                        throw ConfigError("label skew infeasible: class " +
                                          std::to_string(label_list[preferred]) + " exhausted");
                    idx = pop_any(rr++);
                }
            } else {
                idx = pop_any(rr++);
            }
            if (idx < 0) throw ConfigError("ran out of samples during partition");
            clients[c].samples.push_back(samples[static_cast<size_t>(idx)]);
        }
        if (clients[c].batch_size > m && m != 1)
            throw ConfigError("batch size exceeds client size");
    }
    return clients;
}

Tensor normalize(const Tensor& image, const std::vector<double>& mean,
                 const std::vector<double>& stddev) {
    const Shape& s = image.shape();
    int64_t C = s[0], HW = s[1] * s[2];
    if (static_cast<int64_t>(mean.size()) != C || static_cast<int64_t>(stddev.size()) != C)
        throw DataError("normalize: channel count mismatch");
    std::vector<double> out(image.data().size());
    for (int64_t c = 0; c < C; ++c) {
        if (stddev[c] <= 0.0) throw NumericError("normalize: std must be > 0");
        for (int64_t i = 0; i < HW; ++i)
            out[c * HW + i] = (image.data()[c * HW + i] - mean[c]) / stddev[c];
    }
    return Tensor::from(std::move(out), s);
}

Tensor denormalize(const Tensor& image, const std::vector<double>& mean,
                   const std::vector<double>& stddev) {
    const Shape& s = image.shape();
    int64_t C = s[0], HW = s[1] * s[2];
    std::vector<double> out(image.data().size());
    for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < HW; ++i)
            out[c * HW + i] = image.data()[c * HW + i] * stddev[c] + mean[c];
    return Tensor::from(std::move(out), s);
}

void dataset_statistics(const std::vector<Sample>& samples, std::vector<double>& mean,
                        std::vector<double>& stddev) {
    if (samples.empty()) throw DataError("empty sample set");
    int64_t C = samples[0].image.shape()[0];
    int64_t HW = samples[0].image.shape()[1] * samples[0].image.shape()[2];
    mean.assign(C, 0.0);
    stddev.assign(C, 0.0);
    double n = static_cast<double>(samples.size() * HW);
    for (const auto& s : samples)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t i = 0; i < HW; ++i) mean[static_cast<size_t>(c)] += s.image.data()[c * HW + i];
    for (auto& m : mean) m /= n;
    for (const auto& s : samples)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t i = 0; i < HW; ++i) {
                double d = s.image.data()[c * HW + i] - mean[static_cast<size_t>(c)];
                stddev[static_cast<size_t>(c)] += d * d;
            }
    for (auto& v : stddev) v = std::sqrt(v / n);
}

void write_manifest(const std::filesystem::path& file,
                    const std::vector<ClientDataset>& clients) {
    std::ofstream out(file);
    if (!out) throw DataError("cannot write manifest " + file.string());
    out << "# id label client\n";
    for (const auto& c : clients)
        for (const auto& s : c.samples) out << s.id << " " << s.label << " " << c.client_id << "\n";
}

}  // namespace fedshade
