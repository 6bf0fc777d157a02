#include "fedshade/fl_engine.hpp"

#include <algorithm>
#include <cstring>
#include <numeric>
#include <sstream>

#include "fedshade/errors.hpp"
#include "fedshade/optim.hpp"

namespace fedshade {

using namespace ad;

namespace {
uint64_t mix_seed(uint64_t seed, int64_t client_id, int64_t round) {
    uint64_t h = seed ^ 0x9e3779b97f4a7c15ULL;
    for (uint64_t v : {uint64_t(client_id), uint64_t(round)}) {
        h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
        h *= 0xff51afd7ed558ccdULL;
    }
    return h;
}

Tensor stack_images(const std::vector<Sample>& samples, const std::vector<int64_t>& idx) {
    const Shape& is = samples[0].image.shape();
    std::vector<double> v;
    v.reserve(idx.size() * numel(is));
    for (int64_t i : idx)
        v.insert(v.end(), samples[i].image.data().begin(), samples[i].image.data().end());
    return Tensor::from(std::move(v), {int64_t(idx.size()), is[0], is[1], is[2]});
}
}  // namespace

ClientUpdate local_train(const ClientDataset& client, TaskModel& model, double lr,
                         int64_t local_rounds, int64_t round, uint64_t seed) {
    if (client.samples.empty()) throw ConfigError("client has no samples");
    if (lr <= 0) throw ConfigError("learning rate must be positive");
    auto before = model.dump_parameters();
    std::mt19937_64 rng(mix_seed(seed, client.client_id, round));

    Sgd opt(lr);
    std::vector<int64_t> order(client.samples.size());
    std::iota(order.begin(), order.end(), 0);
    for (int64_t epoch = 0; epoch < local_rounds; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (size_t start = 0; start < order.size(); start += client.batch_size) {
            std::vector<int64_t> idx(order.begin() + start,
                                     order.begin() +
                                         std::min(order.size(), start + client.batch_size));
            Tensor batch = stack_images(client.samples, idx);
            std::vector<int64_t> labels;
            for (int64_t i : idx) labels.push_back(client.samples[i].label);
            Tensor loss = model.loss(batch, labels, true, true);
            if (!loss.all_finite())
                throw TrainingError("non-finite loss on client " +
                                    std::to_string(client.client_id));
            auto grads = grad(loss, model.params());
            opt.step(model.params(), grads);
        }
    }

    ClientUpdate up;
    up.sample_count = static_cast<int64_t>(client.samples.size());
    up.round = round;
    up.client_id = client.client_id;
    up.bn_stats = model.bn_statistics();
    auto after = model.dump_parameters();
    for (const auto& [name, b] : before) {
        std::vector<double> g(b.size());
        const auto& a = after.at(name);
        for (size_t i = 0; i < b.size(); ++i) g[i] = (b[i] - a[i]) / lr;
        up.gradients[name] = Tensor::from(std::move(g), model.param(name).shape());
    }
    return up;
}

void aggregate(const std::vector<ClientUpdate>& updates, TaskModel& model, double lr) {
    if (updates.empty()) throw ProtocolError("aggregate called with no updates");
    std::vector<const ClientUpdate*> ordered;
    for (const auto& u : updates) ordered.push_back(&u);
    std::sort(ordered.begin(), ordered.end(),
              [](const ClientUpdate* a, const ClientUpdate* b) {
                  return a->client_id < b->client_id;
              });
    int64_t round = ordered.front()->round;
    double total = 0;
    for (const auto* u : ordered) {
        if (u->round != round) throw ProtocolError("updates span multiple rounds");
        if (u->sample_count < 1) throw ProtocolError("sample_count must be >= 1");
        total += double(u->sample_count);
    }

    for (const auto& name : model.param_names()) {
        Tensor& p = model.param(name);
        std::vector<double> mean(p.size(), 0.0);
        for (const auto* u : ordered) {
            const auto& g = u->gradients.at(name);
            if (g.shape() != p.shape())
                throw ProtocolError("gradient shape mismatch for " + name);
            double w = double(u->sample_count) / total;
            for (int64_t i = 0; i < p.size(); ++i) mean[i] += w * g.data()[i];
        }
        for (int64_t i = 0; i < p.size(); ++i) p.raw()[i] -= lr * mean[i];
    }

    BNStats agg = ordered.front()->bn_stats;
    for (auto& [layer, st] : agg.layers) {
        std::fill(st.running_mean.begin(), st.running_mean.end(), 0.0);
        std::fill(st.running_var.begin(), st.running_var.end(), 0.0);
        for (const auto* u : ordered) {
            double w = double(u->sample_count) / total;
            const auto& cs = u->bn_stats.layers.at(layer);
            for (size_t i = 0; i < st.running_mean.size(); ++i) {
                st.running_mean[i] += w * cs.running_mean[i];
                st.running_var[i] += w * cs.running_var[i];
            }
        }
    }
    model.set_bn_statistics(agg);
}

EvalMetrics evaluate(TaskModel& model, const std::vector<Sample>& test_samples) {
    if (test_samples.empty()) throw ConfigError("empty test set");
    int64_t classes = model.spec().classes;
    std::vector<std::vector<int64_t>> confusion(classes, std::vector<int64_t>(classes, 0));
    NoGradGuard ng;
    const size_t chunk = 16;
    for (size_t start = 0; start < test_samples.size(); start += chunk) {
        size_t end = std::min(test_samples.size(), start + chunk);
        std::vector<int64_t> idx;
        for (size_t i = start; i < end; ++i) idx.push_back(int64_t(i));
        Tensor logits = model.forward(stack_images(test_samples, idx), false, false).logits;
        for (size_t i = start; i < end; ++i) {
            const double* row = logits.data().data() + (i - start) * classes;
            int64_t pred = 0;  // ties resolve to the lowest class index
            for (int64_t c = 1; c < classes; ++c)
                if (row[c] > row[pred]) pred = c;
            confusion[test_samples[i].label][pred]++;
        }
    }
    int64_t correct = 0;
    double f1_sum = 0;
    for (int64_t c = 0; c < classes; ++c) {
        correct += confusion[c][c];
        int64_t tp = confusion[c][c], fp = 0, fn = 0;
        for (int64_t o = 0; o < classes; ++o) {
            if (o != c) {
                fp += confusion[o][c];
                fn += confusion[c][o];
            }
        }
        double denom = double(2 * tp + fp + fn);
        f1_sum += denom > 0 ? 2.0 * tp / denom : 0.0;
    }
    EvalMetrics m;
    m.accuracy = double(correct) / double(test_samples.size());
    m.macro_f1 = f1_sum / double(classes);
    return m;
}

std::string params_digest(const TaskModel& model) {
    uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a over parameter bytes
    for (const auto& [name, v] : model.dump_parameters()) {
        for (char c : name) h = (h ^ uint8_t(c)) * 0x100000001b3ULL;
        for (double d : v) {
            uint64_t bits;
            std::memcpy(&bits, &d, 8);
            for (int i = 0; i < 8; ++i) h = (h ^ ((bits >> (8 * i)) & 0xff)) * 0x100000001b3ULL;
        }
    }
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

TrainingTrace run_federated(const FLConfig& config, const std::vector<ClientDataset>& clients,
                            const std::vector<Sample>& test_samples, TaskModel& model,
                            const DefenseHook& defense) {
    if (clients.empty()) throw ConfigError("no clients configured");
    if (config.global_rounds < 0) throw ConfigError("negative round count");
    TrainingTrace trace;
    RoundRecord init;
    init.round = 0;
    init.eval = evaluate(model, test_samples);
    init.params_digest = params_digest(model);
    if (config.retain_params) {
        init.params = model.dump_parameters();
        init.bn_stats = model.bn_statistics();
    }
    trace.rounds.push_back(std::move(init));

    for (int64_t r = 1; r <= config.global_rounds; ++r) {
        std::vector<ClientUpdate> updates;
        for (const auto& client : clients) {
            if (defense) {
                TaskModel local = model.clone();
                updates.push_back(defense(client, local, r));
            } else {
                TaskModel local = model.clone();
                updates.push_back(
                    local_train(client, local, config.lr, config.local_rounds, r, config.seed));
            }
        }
        aggregate(updates, model, config.lr);
        RoundRecord rec;
        rec.round = r;
        rec.eval = evaluate(model, test_samples);
        rec.params_digest = params_digest(model);
        if (config.retain_params) {
            rec.params = model.dump_parameters();
            rec.bn_stats = model.bn_statistics();
        }
        if (config.retain_updates) rec.updates = std::move(updates);
        trace.rounds.push_back(std::move(rec));
    }
    return trace;
}

}  // namespace fedshade
