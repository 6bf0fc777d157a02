#include "fedshade/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>

#include "fedshade/checkpoint.hpp"
#include "fedshade/errors.hpp"
#include "fedshade/image_io.hpp"
#include "fedshade/plot.hpp"
#include "fedshade/saliency.hpp"
#include "fedshade/shadow_defense.hpp"

namespace fedshade {

namespace fs = std::filesystem;
using namespace ad;
using nlohmann::json;

namespace {

uint64_t mix(uint64_t seed, uint64_t a, uint64_t b) {
    uint64_t h = seed ^ 0x9e3779b97f4a7c15ULL;
    for (uint64_t v : {a, b}) {
        h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
        h *= 0xff51afd7ed558ccdULL;
    }
    return h;
}

// fixed formatting so repeated runs emit byte-identical CSVs
std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be an object");
    for (const auto& [k, v] : j.items()) {
        bool ok = false;
        for (const char* a : allowed)
            if (k == a) ok = true;
        if (!ok) throw ConfigError("unknown key '" + k + "' in " + where);
    }
}

PartitionSpec resolve_partition(const ExperimentConfig& c) {
    return c.partition.client_sizes.empty() ? default_partition_spec() : c.partition;
}

std::vector<int64_t> resolve_attack_rounds(const ExperimentConfig& c) {
    if (!c.attack_rounds.empty()) return c.attack_rounds;
    std::set<int64_t> s;
    for (double f : {0.25, 0.5, 0.75, 1.0})
        s.insert(std::clamp<int64_t>(int64_t(std::llround(f * double(c.rounds))), 1, c.rounds));
    s.insert(1);
    return {s.begin(), s.end()};
}

std::vector<int64_t> resolve_metric_rounds(const ExperimentConfig& c) {
    return c.metric_rounds.empty() ? resolve_attack_rounds(c) : c.metric_rounds;
}

std::vector<int64_t> resolve_attack_clients(const ExperimentConfig& c) {
    if (!c.attack_clients.empty()) return c.attack_clients;
    std::vector<int64_t> ids;
    for (size_t i = 0; i < resolve_partition(c).client_sizes.size(); ++i)
        ids.push_back(int64_t(i) + 1);
    return ids;
}

double param_or(const std::map<std::string, double>& p, const std::string& key, double dflt) {
    auto it = p.find(key);
    return it == p.end() ? dflt : it->second;
}

void write_text(const fs::path& file, const std::string& text) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw DataError("cannot write " + file.string());
    out << text;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw DataError("cannot read " + file.string());
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) rows.push_back(split_csv_line(line));
    return rows;
}

struct DataBundle {
    std::vector<Sample> train;
    std::vector<ClientDataset> clients;
    std::vector<Sample> public_split;
    std::vector<Sample> test;
};

DataBundle load_data(const ExperimentConfig& c) {
    const DatasetSpec& d = c.dataset;
    DataBundle b;
    if (d.kind == "synthetic") {
        b.train = generate_synthetic_dataset(d.samples, d.resolution, d.channels, d.classes,
                                             c.seeds.data);
        b.public_split =
            generate_synthetic_dataset(std::max(c.public_samples, d.classes), d.resolution,
                                       d.channels, d.classes, c.seeds.data + 1000003);
        b.test = generate_synthetic_dataset(std::max(c.test_samples, d.classes), d.resolution,
                                            d.channels, d.classes, c.seeds.data + 2000003);
    } else {
        auto all = load_image_folder(d.path, d.resolution);
        if (int64_t(all.size()) < d.samples + c.public_samples + c.test_samples)
            throw ConfigError("image folder too small for requested splits");
        std::mt19937_64 rng(c.seeds.data);
        std::shuffle(all.begin(), all.end(), rng);
        b.test.assign(all.begin(), all.begin() + c.test_samples);
        b.public_split.assign(all.begin() + c.test_samples,
                              all.begin() + c.test_samples + c.public_samples);
        b.train.assign(all.begin() + c.test_samples + c.public_samples, all.end());
    }
    b.clients = partition_clients(b.train, resolve_partition(c), c.seeds.data);
    return b;
}

TaskModelSpec resolve_model_spec(const ExperimentConfig& c) {
    TaskModelSpec spec = c.model;
    spec.in_channels = c.dataset.channels;
    spec.image_size = c.dataset.resolution;
    spec.classes = c.dataset.classes;
    return spec;
}

TaskModel train_reference(const ExperimentConfig& c, const std::vector<Sample>& pub) {
    TaskModel model(resolve_model_spec(c), c.seeds.model + 17);
    ClientDataset cd;
    cd.client_id = 0;
    cd.samples = pub;
    cd.batch_size = std::min<int64_t>(8, int64_t(pub.size()));
    for (int64_t e = 1; e <= c.pretrain.reference_epochs; ++e)
        local_train(cd, model, c.lr, 1, e, c.seeds.model + 17);
    return model;
}

ShadowDefenseConfig shadow_config(const ExperimentConfig& c) {
    const auto& p = c.defense.parameters;
    ShadowDefenseConfig sc;
    sc.lr = c.lr;
    sc.local_rounds = c.local_rounds;
    sc.seed = c.seeds.model;  // batch order matches the undefended run
    sc.temperature = param_or(p, "temperature", sc.temperature);
    sc.top_fraction = param_or(p, "top_fraction", sc.top_fraction);
    sc.alpha_n = param_or(p, "alpha_n", sc.alpha_n);
    sc.schedule = c.schedule;
    sc.ema_alpha_noise = param_or(p, "ema_alpha_noise", sc.ema_alpha_noise);
    sc.alpha_cam_min = param_or(p, "alpha_cam_min", sc.alpha_cam_min);
    sc.alpha_cam_max = param_or(p, "alpha_cam_max", sc.alpha_cam_max);
    return sc;
}

struct ShadowRuntime {
    std::map<int64_t, ShadowState> shadows;                   // client_id keyed
    std::map<int64_t, std::map<int64_t, NoiseState>> noise;   // client_id keyed
};

DefenseHook make_defense_hook(const ExperimentConfig& c,
                              const std::shared_ptr<ShadowRuntime>& rt) {
    const std::string kind = c.defense.kind;
    if (kind == "none") return {};
    const auto p = c.defense.parameters;
    const double lr = c.lr;
    const int64_t local_rounds = c.local_rounds;
    const uint64_t train_seed = c.seeds.model;
    const uint64_t def_seed = c.seeds.defense;
    if (kind == "dp_gradient") {
        double clip_norm = param_or(p, "clip_norm", 1.0);
        double sigma = param_or(p, "sigma", 0.01);
        return [=](const ClientDataset& cl, TaskModel& m, int64_t r) {
            auto up = local_train(cl, m, lr, local_rounds, r, train_seed);
            return dp_gradient(up, clip_norm, sigma, mix(def_seed, cl.client_id, r));
        };
    }
    if (kind == "sparsify") {
        double keep = param_or(p, "keep_ratio", 0.1);
        return [=](const ClientDataset& cl, TaskModel& m, int64_t r) {
            return gradient_sparsify(local_train(cl, m, lr, local_rounds, r, train_seed), keep);
        };
    }
    if (kind == "clip") {
        double threshold = param_or(p, "threshold", 0.05);
        return [=](const ClientDataset& cl, TaskModel& m, int64_t r) {
            return gradient_clip(local_train(cl, m, lr, local_rounds, r, train_seed),
                                 threshold);
        };
    }
    if (kind == "dp_image_weak" || kind == "dp_image_strong") {
        double sigma = param_or(p, "sigma", kind == "dp_image_weak" ? kDpImageWeakSigma
                                                                    : kDpImageStrongSigma);
        return [=](const ClientDataset& cl, TaskModel& m, int64_t r) {
            ClientDataset noised = cl;
            for (size_t i = 0; i < noised.samples.size(); ++i) {
                auto& img = noised.samples[i].image;
                const Shape& s = img.shape();
                Tensor batch = dp_image(reshape(img, {1, s[0], s[1], s[2]}), sigma,
                                        mix(def_seed, cl.client_id * 1000 + int64_t(i), r));
                img = reshape(batch, s).detach();
            }
            return local_train(noised, m, lr, local_rounds, r, train_seed);
        };
    }
    if (kind == "shadow") {
        ShadowDefenseConfig sc = shadow_config(c);
        int64_t R = c.rounds;
        return [=](const ClientDataset& cl, TaskModel& m, int64_t r) {
            return defend_round(cl, m, rt->shadows.at(cl.client_id),
                                rt->noise[cl.client_id], r, R, sc);
        };
    }
    throw ConfigError("unknown defense kind '" + kind + "'");
}

std::string leakage_csv(const std::vector<LeakageRow>& rows) {
    std::ostringstream out;
    out << "attack,round,client,sample,scope,mse,psnr,ssim,perceptual,rdlv\n";
    for (const auto& r : rows) {
        out << r.attack << "," << r.round << "," << r.client << "," << r.sample << ","
            << r.scope << "," << fmt(r.metrics.mse) << "," << fmt(r.metrics.psnr) << ","
            << fmt(r.metrics.ssim) << "," << fmt(r.metrics.perceptual) << ","
            << (r.rdlv ? fmt(*r.rdlv) : "") << "\n";
    }
    return out.str();
}

std::string iip_csv(const std::vector<IipRow>& rows) {
    std::ostringstream out;
    out << "attack,round,k,iip\n";
    for (const auto& r : rows)
        out << r.attack << "," << r.round << "," << r.k << "," << fmt(r.value) << "\n";
    return out.str();
}

std::string trace_csv(const TrainingTrace& trace) {
    std::ostringstream out;
    out << "round,accuracy,macro_f1,params_digest\n";
    for (const auto& rec : trace.rounds)
        out << rec.round << "," << fmt(rec.eval.accuracy) << "," << fmt(rec.eval.macro_f1)
            << "," << rec.params_digest << "\n";
    return out.str();
}

// Table-1-style aggregation over the metric rounds: one row per
// (attack method, scope, metric) with mean and population std.
std::string summary_csv(const std::vector<LeakageRow>& rows,
                        const std::vector<int64_t>& metric_rounds) {
    static const char* metric_names[] = {"mse", "psnr", "ssim", "perceptual"};
    std::set<int64_t> wanted(metric_rounds.begin(), metric_rounds.end());
    std::vector<std::string> methods;
    for (const auto& r : rows)
        if (std::find(methods.begin(), methods.end(), r.attack) == methods.end())
            methods.push_back(r.attack);
    std::ostringstream out;
    out << "method,scope,metric,mean,std\n";
    for (const auto& method : methods) {
        for (const char* scope : {"whole", "target"}) {
            for (size_t mi = 0; mi < 4; ++mi) {
                std::vector<double> vals;
                for (const auto& r : rows) {
                    if (r.attack != method || r.scope != scope || !wanted.count(r.round))
                        continue;
                    double v[] = {r.metrics.mse, r.metrics.psnr, r.metrics.ssim,
                                  r.metrics.perceptual};
                    vals.push_back(v[mi]);
                }
                double mean = 0, sd = 0;
                if (!vals.empty()) {
                    for (double v : vals) mean += v;
                    mean /= double(vals.size());
                    for (double v : vals) sd += (v - mean) * (v - mean);
                    sd = std::sqrt(sd / double(vals.size()));
                }
                out << method << "," << scope << "," << metric_names[mi] << "," << fmt(mean)
                    << "," << fmt(sd) << "\n";
            }
        }
    }
    return out.str();
}

std::string recon_name(const std::string& attack, int64_t round, int64_t client,
                       int64_t sample) {
    std::ostringstream os;
    os << attack << "_r" << round << "_c" << client << "_" << sample << ".pgm";
    return os.str();
}

json checkpoint_model_manifest(const TaskModelSpec& spec) {
    json m;
    m["in_channels"] = spec.in_channels;
    m["image_size"] = spec.image_size;
    m["classes"] = spec.classes;
    m["conv_widths"] = spec.conv_widths;
    m["bn_momentum"] = spec.bn_momentum;
    m["bn_eps"] = spec.bn_eps;
    return m;
}

TaskModelSpec model_spec_from_manifest(const json& m) {
    TaskModelSpec spec;
    spec.in_channels = m.at("in_channels").get<int64_t>();
    spec.image_size = m.at("image_size").get<int64_t>();
    spec.classes = m.at("classes").get<int64_t>();
    spec.conv_widths = m.at("conv_widths").get<std::vector<int64_t>>();
    spec.bn_momentum = m.at("bn_momentum").get<double>();
    spec.bn_eps = m.at("bn_eps").get<double>();
    return spec;
}

void save_update_snapshot(const fs::path& file, const ClientUpdate& up,
                          const std::map<std::string, std::vector<double>>& base_params,
                          const BNStats& base_bn, const TaskModelSpec& spec, double lr) {
    Checkpoint ck;
    ck.manifest["kind"] = "client_update";
    ck.manifest["round"] = up.round;
    ck.manifest["client"] = up.client_id;
    ck.manifest["sample_count"] = up.sample_count;
    ck.manifest["lr"] = lr;
    ck.manifest["model"] = checkpoint_model_manifest(spec);
    for (const auto& [name, g] : up.gradients)
        ck.arrays["grad/" + name] = {g.shape(), g.data()};
    for (const auto& [layer, st] : up.bn_stats.layers) {
        ck.arrays["bn_mean/" + layer] = {{int64_t(st.running_mean.size())}, st.running_mean};
        ck.arrays["bn_var/" + layer] = {{int64_t(st.running_var.size())}, st.running_var};
    }
    TaskModel probe(spec, 0);  // shapes for the base parameter arrays
    for (const auto& [name, v] : base_params)
        ck.arrays["base/" + name] = {probe.param(name).shape(), v};
    for (const auto& [layer, st] : base_bn.layers) {
        ck.arrays["base_bn_mean/" + layer] = {{int64_t(st.running_mean.size())},
                                              st.running_mean};
        ck.arrays["base_bn_var/" + layer] = {{int64_t(st.running_var.size())},
                                             st.running_var};
    }
    save_checkpoint(file, ck);
}

void save_generator_checkpoint(const fs::path& file, const ShadowGenerator& gen) {
    Checkpoint ck;
    ck.manifest["kind"] = "shadow_generator";
    const auto& spec = gen.spec();
    ck.manifest["latent_dim"] = spec.latent_dim;
    ck.manifest["style_dim"] = spec.style_dim;
    ck.manifest["base_channels"] = spec.base_channels;
    ck.manifest["out_channels"] = spec.out_channels;
    ck.manifest["image_size"] = spec.image_size;
    ShadowGenerator copy = gen.clone();
    for (const auto& name : copy.param_names())
        ck.arrays[name] = {copy.param(name).shape(), copy.param(name).data()};
    save_checkpoint(file, ck);
}

ShadowGenerator load_generator_checkpoint(const fs::path& file) {
    Checkpoint ck = load_checkpoint(file);
    if (ck.manifest.value("kind", "") != "shadow_generator")
        throw DataError("not a generator checkpoint: " + file.string());
    ShadowGeneratorSpec spec;
    spec.latent_dim = ck.manifest.at("latent_dim").get<int64_t>();
    spec.style_dim = ck.manifest.at("style_dim").get<int64_t>();
    spec.base_channels = ck.manifest.at("base_channels").get<int64_t>();
    spec.out_channels = ck.manifest.at("out_channels").get<int64_t>();
    spec.image_size = ck.manifest.at("image_size").get<int64_t>();
    ShadowGenerator gen(spec, 0);
    std::map<std::string, std::vector<double>> values;
    for (const auto& [name, arr] : ck.arrays) values[name] = arr.second;
    gen.load_parameters(values);
    return gen;
}

}  // namespace

ExperimentConfig parse_experiment_config(const json& j) {
    try {
        check_keys(j,
                   {"dataset", "partition", "model", "defense", "attacks", "rounds",
                    "local_rounds", "lr", "attack_rounds", "metric_rounds", "attack_clients",
                    "public_samples", "test_samples", "pretrain", "seeds", "out"},
                   "config");
        ExperimentConfig c;
        if (j.contains("dataset")) {
            const json& d = j["dataset"];
            check_keys(d, {"kind", "samples", "resolution", "channels", "classes", "path"},
                       "dataset");
            c.dataset.kind = d.value("kind", c.dataset.kind);
            c.dataset.samples = d.value("samples", c.dataset.samples);
            c.dataset.resolution = d.value("resolution", c.dataset.resolution);
            c.dataset.channels = d.value("channels", c.dataset.channels);
            c.dataset.classes = d.value("classes", c.dataset.classes);
            c.dataset.path = d.value("path", c.dataset.path);
        }
        if (j.contains("partition")) {
            const json& p = j["partition"];
            check_keys(p, {"client_sizes", "batch_sizes", "label_skew"}, "partition");
            c.partition.client_sizes =
                p.value("client_sizes", std::vector<int64_t>{});
            c.partition.batch_sizes = p.value("batch_sizes", std::vector<int64_t>{});
            c.partition.label_skew = p.value("label_skew", 0.0);
        }
        if (j.contains("model")) {
            const json& m = j["model"];
            check_keys(m, {"conv_widths", "bn_momentum", "bn_eps"}, "model");
            c.model.conv_widths = m.value("conv_widths", c.model.conv_widths);
            c.model.bn_momentum = m.value("bn_momentum", c.model.bn_momentum);
            c.model.bn_eps = m.value("bn_eps", c.model.bn_eps);
        }
        if (j.contains("defense")) {
            const json& d = j["defense"];
            check_keys(d, {"kind", "parameters", "schedule"}, "defense");
            c.defense.kind = d.value("kind", c.defense.kind);
            if (d.contains("parameters")) {
                for (const auto& [k, v] : d["parameters"].items())
                    c.defense.parameters[k] = v.get<double>();
            }
            c.schedule = d.value("schedule", c.schedule);
        }
        if (j.contains("attacks")) {
            for (const json& a : j["attacks"]) {
                check_keys(a,
                           {"kind", "iterations", "lr", "tv_weight", "bn_weight", "l2_weight",
                            "distance", "restarts", "batch_size", "pixel_min", "pixel_max"},
                           "attack");
                AttackConfig ac;
                ac.kind = a.value("kind", ac.kind);
                ac.iterations = a.value("iterations", ac.iterations);
                ac.lr = a.value("lr", ac.lr);
                ac.tv_weight = a.value("tv_weight", ac.tv_weight);
                ac.bn_weight = a.value("bn_weight", ac.bn_weight);
                ac.l2_weight = a.value("l2_weight", ac.l2_weight);
                ac.distance = a.value("distance", ac.distance);
                ac.restarts = a.value("restarts", ac.restarts);
                ac.batch_size = a.value("batch_size", ac.batch_size);
                ac.pixel_min = a.value("pixel_min", ac.pixel_min);
                ac.pixel_max = a.value("pixel_max", ac.pixel_max);
                c.attacks.push_back(std::move(ac));
            }
        }
        c.rounds = j.value("rounds", c.rounds);
        c.local_rounds = j.value("local_rounds", c.local_rounds);
        c.lr = j.value("lr", c.lr);
        c.attack_rounds = j.value("attack_rounds", c.attack_rounds);
        c.metric_rounds = j.value("metric_rounds", c.metric_rounds);
        c.attack_clients = j.value("attack_clients", c.attack_clients);
        c.public_samples = j.value("public_samples", c.public_samples);
        c.test_samples = j.value("test_samples", c.test_samples);
        if (j.contains("pretrain")) {
            const json& p = j["pretrain"];
            check_keys(p, {"generator_steps", "latent_steps", "reference_epochs"}, "pretrain");
            c.pretrain.generator_steps = p.value("generator_steps", c.pretrain.generator_steps);
            c.pretrain.latent_steps = p.value("latent_steps", c.pretrain.latent_steps);
            c.pretrain.reference_epochs =
                p.value("reference_epochs", c.pretrain.reference_epochs);
        }
        if (j.contains("seeds")) {
            const json& s = j["seeds"];
            check_keys(s, {"data", "model", "defense", "attack"}, "seeds");
            c.seeds.data = s.value("data", c.seeds.data);
            c.seeds.model = s.value("model", c.seeds.model);
            c.seeds.defense = s.value("defense", c.seeds.defense);
            c.seeds.attack = s.value("attack", c.seeds.attack);
        }
        if (j.contains("out")) c.out = j["out"].get<std::string>();
        return c;
    } catch (const json::exception& ex) {
        throw ConfigError(std::string("malformed config: ") + ex.what());
    }
}

ExperimentConfig load_experiment_config(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot open config file " + file.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& ex) {
        throw ConfigError("invalid JSON in " + file.string() + ": " + ex.what());
    }
    return parse_experiment_config(j);
}

void validate_experiment(const ExperimentConfig& c) {
    if (c.rounds < 1) throw ConfigError("rounds must be >= 1");
    if (c.local_rounds < 1) throw ConfigError("local_rounds must be >= 1");
    if (c.lr <= 0) throw ConfigError("lr must be positive");
    if (c.dataset.kind != "synthetic" && c.dataset.kind != "image_folder")
        throw ConfigError("unknown dataset kind '" + c.dataset.kind + "'");
    if (c.dataset.kind == "image_folder" && c.dataset.path.empty())
        throw ConfigError("image_folder dataset needs a path");
    if (c.dataset.samples < c.dataset.classes)
        throw ConfigError("dataset too small for class count");
    validate_defense(c.defense);
    if (c.schedule != "increase" && c.schedule != "fix" && c.schedule != "decrease")
        throw ConfigError("unknown schedule '" + c.schedule + "'");
    for (const auto& a : c.attacks) {
        if (a.kind != "optimization" && a.kind != "model_based")
            throw ConfigError("unknown attack kind '" + a.kind + "'");
        if (a.iterations < 1 || a.restarts < 1)
            throw ConfigError("attack iterations/restarts must be >= 1");
        if (!a.distance.empty() && a.distance != "l2" && a.distance != "cosine")
            throw ConfigError("unknown gradient distance '" + a.distance + "'");
    }
    auto rounds = resolve_attack_rounds(c);
    for (int64_t r : rounds)
        if (r < 1 || r > c.rounds) throw ConfigError("attack round out of range");
    std::set<int64_t> rs(rounds.begin(), rounds.end());
    for (int64_t r : resolve_metric_rounds(c))
        if (!rs.count(r)) throw ConfigError("metric rounds must be attack rounds");
    auto part = resolve_partition(c);
    int64_t total = 0;
    for (int64_t n : part.client_sizes) total += n;
    if (total > c.dataset.samples)
        throw ConfigError("partition requests more samples than the dataset holds");
    for (int64_t id : resolve_attack_clients(c))
        if (id < 1 || id > int64_t(part.client_sizes.size()))
            throw ConfigError("attack client id out of range");
    if (c.out.empty()) throw ConfigError("output directory not set");
}

json resolved_config(const ExperimentConfig& c) {
    json j;
    j["dataset"] = {{"kind", c.dataset.kind},       {"samples", c.dataset.samples},
                    {"resolution", c.dataset.resolution}, {"channels", c.dataset.channels},
                    {"classes", c.dataset.classes}, {"path", c.dataset.path}};
    auto part = resolve_partition(c);
    j["partition"] = {{"client_sizes", part.client_sizes},
                      {"batch_sizes", part.batch_sizes},
                      {"label_skew", part.label_skew}};
    // only the user-settable fields: in_channels / image_size / classes are
    // derived from the dataset block, and emitting them here would make the
    // resolved config fail the strict parse on re-run
    j["model"] = {{"conv_widths", c.model.conv_widths},
                  {"bn_momentum", c.model.bn_momentum},
                  {"bn_eps", c.model.bn_eps}};
    j["defense"] = {{"kind", c.defense.kind},
                    {"parameters", c.defense.parameters},
                    {"schedule", c.schedule}};
    j["attacks"] = json::array();
    for (const auto& a : c.attacks) {
        std::string dist = a.distance;
        if (dist.empty()) dist = a.kind == "model_based" ? "cosine" : "l2";
        j["attacks"].push_back({{"kind", a.kind},
                                {"iterations", a.iterations},
                                {"lr", a.lr},
                                {"tv_weight", a.tv_weight},
                                {"bn_weight", a.bn_weight},
                                {"l2_weight", a.l2_weight},
                                {"distance", dist},
                                {"restarts", a.restarts},
                                {"batch_size", a.batch_size},
                                {"pixel_min", a.pixel_min},
                                {"pixel_max", a.pixel_max}});
    }
    j["rounds"] = c.rounds;
    j["local_rounds"] = c.local_rounds;
    j["lr"] = c.lr;
    j["attack_rounds"] = resolve_attack_rounds(c);
    j["metric_rounds"] = resolve_metric_rounds(c);
    j["attack_clients"] = resolve_attack_clients(c);
    j["public_samples"] = c.public_samples;
    j["test_samples"] = c.test_samples;
    j["pretrain"] = {{"generator_steps", c.pretrain.generator_steps},
                     {"latent_steps", c.pretrain.latent_steps},
                     {"reference_epochs", c.pretrain.reference_epochs}};
    j["seeds"] = {{"data", c.seeds.data},
                  {"model", c.seeds.model},
                  {"defense", c.seeds.defense},
                  {"attack", c.seeds.attack}};
    return j;
}

std::string config_hash(const json& resolved) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char ch : resolved.dump()) h = (h ^ uint8_t(ch)) * 0x100000001b3ULL;
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

ShadowGenerator pretrain_public_generator(const ExperimentConfig& config, uint64_t seed,
                                          std::vector<Tensor>* public_images) {
    DataBundle data = load_data(config);
    std::vector<Tensor> images;
    for (const auto& s : data.public_split) images.push_back(s.image);
    ShadowGeneratorSpec spec;
    spec.out_channels = config.dataset.channels;
    spec.image_size = config.dataset.resolution;
    ShadowGenerator gen(spec, seed);
    gen = pretrain_shadow(gen, images, config.pretrain.generator_steps, seed);
    if (public_images) *public_images = std::move(images);
    return gen;
}

RunArtifacts run_experiment(const ExperimentConfig& config) {
    validate_experiment(config);
    const fs::path out = config.out;
    for (const char* sub : {"", "trace", "updates", "recon", "metrics", "plots"})
        fs::create_directories(out / sub);

    RunArtifacts art;
    json resolved = resolved_config(config);
    art.manifest["format"] = 1;
    art.manifest["config"] = resolved;
    art.manifest["config_hash"] = config_hash(resolved);
    art.manifest["csv_schema"] = {
        {"trace", "round,accuracy,macro_f1,params_digest"},
        {"leakage", "attack,round,client,sample,scope,mse,psnr,ssim,perceptual,rdlv"},
        {"iip", "attack,round,k,iip"},
        {"summary", "method,scope,metric,mean,std"}};
    art.manifest["status"] = "running";
    write_text(out / "manifest.json", art.manifest.dump(2) + "\n");

    try {
        DataBundle data = load_data(config);
        TaskModelSpec spec = resolve_model_spec(config);
        TaskModel model(spec, config.seeds.model);

        // defender-side shadow machinery
        auto rt = std::make_shared<ShadowRuntime>();
        if (config.defense.kind == "shadow") {
            std::vector<Tensor> pub;
            ShadowGenerator gen = pretrain_public_generator(config, config.seeds.defense, &pub);
            int64_t r_shadow =
                int64_t(param_or(config.defense.parameters, "r_shadow", double(config.rounds)));
            for (const auto& cl : data.clients) {
                ShadowState st;
                st.generator = gen.clone();
                st.r_shadow = r_shadow;
                st.finetune_epochs = int64_t(
                    param_or(config.defense.parameters, "finetune_epochs", 5.0));
                st.ema_alpha_shadow =
                    param_or(config.defense.parameters, "ema_alpha_shadow", 0.5);
                pretrain_latents(st, cl, config.pretrain.latent_steps, 50,
                                 mix(config.seeds.defense, cl.client_id, 0));
                rt->shadows.emplace(cl.client_id, std::move(st));
            }
        }

        // attacker-side resources
        bool model_attack = false;
        for (const auto& a : config.attacks)
            if (a.kind == "model_based") model_attack = true;
        ShadowGenerator attacker_gen;
        if (model_attack) {
            attacker_gen = pretrain_public_generator(config, config.seeds.attack);
            save_generator_checkpoint(out / "updates" / "attacker_generator.ckpt",
                                      attacker_gen);
            art.files.push_back("updates/attacker_generator.ckpt");
        }
        TaskModel reference = train_reference(config, data.public_split);

        FLConfig fl;
        fl.model = spec;
        fl.lr = config.lr;
        fl.local_rounds = config.local_rounds;
        fl.global_rounds = config.rounds;
        fl.seed = config.seeds.model;
        fl.retain_updates = !config.attacks.empty();
        fl.retain_params = !config.attacks.empty();
        art.trace = run_federated(fl, data.clients, data.test, model,
                                  make_defense_hook(config, rt));

        write_text(out / "trace" / "trace.csv", trace_csv(art.trace));
        art.files.push_back("trace/trace.csv");

        auto attack_rounds = resolve_attack_rounds(config);
        auto attack_clients = resolve_attack_clients(config);
        PerceptualFn perceptual = make_perceptual(reference);
        // the reference net is fixed-resolution; target-region crops get
        // resized back up before the activation distance
        int64_t res = config.dataset.resolution;
        PerceptualFn crop_perceptual = [perceptual, res](const Tensor& a, const Tensor& b) {
            return perceptual(resize_image(a, res), resize_image(b, res));
        };

        // embeddings of every training image, in global sample-id order
        std::vector<std::vector<double>> train_embeddings;
        std::map<int64_t, int64_t> id_to_embedding;
        for (const auto& cl : data.clients) {
            for (const auto& s : cl.samples) {
                id_to_embedding[s.id] = int64_t(train_embeddings.size());
                train_embeddings.push_back(embed(reference, s.image));
            }
        }

        for (size_t ai = 0; ai < config.attacks.size(); ++ai) {
            AttackConfig ac = config.attacks[ai];
            for (int64_t r : attack_rounds) {
                const RoundRecord& rec = art.trace.rounds.at(size_t(r));
                const RoundRecord& base = art.trace.rounds.at(size_t(r) - 1);
                std::vector<std::vector<double>> recon_embeddings;
                std::vector<int64_t> source_ids;
                for (int64_t cid : attack_clients) {
                    const ClientUpdate* up = nullptr;
                    for (const auto& u : rec.updates)
                        if (u.client_id == cid) up = &u;
                    if (!up) throw ProtocolError("missing update for attacked client");
                    const ClientDataset* client = nullptr;
                    for (const auto& cl : data.clients)
                        if (cl.client_id == cid) client = &cl;

                    TaskModel victim(spec, config.seeds.model);
                    victim.load_parameters(base.params);
                    victim.set_bn_statistics(base.bn_stats);

                    ac.seed = mix(config.seeds.attack, uint64_t(ai) * 10007 + uint64_t(cid),
                                  uint64_t(r));
                    if (ai == 0)
                        save_update_snapshot(
                            out / "updates" /
                                ("r" + std::to_string(r) + "_c" + std::to_string(cid) +
                                 ".ckpt"),
                            *up, base.params, base.bn_stats, spec, config.lr);
                    AttackResult res = ac.kind == "model_based"
                                           ? model_gia(*up, victim, attacker_gen, ac)
                                           : optimization_gia(*up, victim, ac);

                    std::vector<Tensor> originals;
                    for (const auto& s : client->samples) originals.push_back(s.image);
                    auto match = best_match(res.reconstructions, originals);

                    // per-client prior for RDLV: the mean training image
                    Tensor prior = Tensor::zeros(originals[0].shape());
                    for (const auto& o : originals)
                        for (int64_t i = 0; i < prior.size(); ++i)
                            prior.raw()[i] += o.data()[i] / double(originals.size());

                    for (size_t si = 0; si < res.reconstructions.size(); ++si) {
                        const Tensor& recon = res.reconstructions[si];
                        const Sample& src = client->samples[size_t(match[si])];
                        write_image(out / "recon" /
                                        recon_name(ac.kind, r, cid, int64_t(si)),
                                    recon);
                        art.files.push_back("recon/" +
                                            recon_name(ac.kind, r, cid, int64_t(si)));

                        LeakageRow whole;
                        whole.attack = ac.kind;
                        whole.round = r;
                        whole.client = cid;
                        whole.sample = int64_t(si);
                        whole.scope = "whole";
                        whole.metrics = image_metrics(recon, src.image, 1.0, perceptual);
                        whole.rdlv = rdlv(src.image, recon, prior);
                        art.leakage.push_back(whole);

                        const Shape& is = src.image.shape();
                        auto sal = cam_saliency(victim,
                                                reshape(src.image, {1, is[0], is[1], is[2]}),
                                                {src.label}, victim.conv_layers().back());
                        LeakageRow target = whole;
                        target.scope = "target";
                        target.rdlv.reset();
                        target.metrics = target_region_metrics(
                            recon, src.image,
                            reshape(sal.map, {is[1], is[2]}), 0.3, 1.0, crop_perceptual);
                        art.leakage.push_back(target);

                        recon_embeddings.push_back(embed(reference, recon));
                        source_ids.push_back(id_to_embedding.at(src.id));
                    }
                }
                int64_t n = int64_t(train_embeddings.size());
                for (int64_t k : {int64_t(1), int64_t(3), int64_t(5)}) {
                    if (k > n || recon_embeddings.empty()) continue;
                    art.iip_rows.push_back(
                        {ac.kind, r, k,
                         iip(recon_embeddings, train_embeddings, source_ids, k)});
                }
            }
        }

        write_text(out / "metrics" / "leakage.csv", leakage_csv(art.leakage));
        write_text(out / "metrics" / "iip.csv", iip_csv(art.iip_rows));
        write_text(out / "metrics" / "summary.csv",
                   summary_csv(art.leakage, resolve_metric_rounds(config)));
        art.files.push_back("metrics/leakage.csv");
        art.files.push_back("metrics/iip.csv");
        art.files.push_back("metrics/summary.csv");

        art.manifest["status"] = "complete";
        art.manifest["files"] = art.files;
        write_text(out / "manifest.json", art.manifest.dump(2) + "\n");
        emit_report(out);
        return art;
    } catch (const std::exception& ex) {
        art.manifest["status"] = "failed";
        art.manifest["error"] = ex.what();
        art.manifest["files"] = art.files;
        write_text(out / "manifest.json", art.manifest.dump(2) + "\n");
        throw;
    }
}

void emit_report(const fs::path& run_dir) {
    std::ifstream mf(run_dir / "manifest.json");
    if (!mf) throw DataError("no manifest in " + run_dir.string());
    json manifest;
    try {
        mf >> manifest;
    } catch (const json::exception& ex) {
        throw DataError("corrupt manifest in " + run_dir.string() + ": " + ex.what());
    }
    fs::create_directories(run_dir / "plots");
    fs::create_directories(run_dir / "metrics");
    std::vector<std::string> gaps;

    // F1 curve from the trace
    if (fs::exists(run_dir / "trace" / "trace.csv")) {
        auto rows = read_csv(run_dir / "trace" / "trace.csv");
        LineSeries f1;
        f1.label = manifest["config"]["defense"].value("kind", "unknown");
        for (size_t i = 1; i < rows.size(); ++i) {
            f1.x.push_back(std::stod(rows[i][0]));
            f1.y.push_back(std::stod(rows[i][2]));
        }
        write_line_plot(run_dir / "plots" / "f1.ppm", {f1});
    } else {
        gaps.push_back("trace/trace.csv missing: no F1 plot");
    }

    bool have_attacks =
        manifest.contains("config") && !manifest["config"]["attacks"].empty();
    if (have_attacks && fs::exists(run_dir / "metrics" / "leakage.csv")) {
        auto rows = read_csv(run_dir / "metrics" / "leakage.csv");
        // summary table regenerated from the persisted per-sample rows
        std::vector<LeakageRow> leakage;
        for (size_t i = 1; i < rows.size(); ++i) {
            LeakageRow lr;
            lr.attack = rows[i][0];
            lr.round = std::stoll(rows[i][1]);
            lr.client = std::stoll(rows[i][2]);
            lr.sample = std::stoll(rows[i][3]);
            lr.scope = rows[i][4];
            lr.metrics.mse = std::stod(rows[i][5]);
            lr.metrics.psnr = std::stod(rows[i][6]);
            lr.metrics.ssim = std::stod(rows[i][7]);
            lr.metrics.perceptual = std::stod(rows[i][8]);
            if (!rows[i][9].empty()) lr.rdlv = std::stod(rows[i][9]);
            leakage.push_back(lr);
        }
        auto metric_rounds =
            manifest["config"]["metric_rounds"].get<std::vector<int64_t>>();
        write_text(run_dir / "metrics" / "summary.csv",
                   summary_csv(leakage, metric_rounds));

        // RDLV per client over rounds (whole scope, mean over samples)
        std::map<int64_t, std::map<int64_t, std::pair<double, int64_t>>> rdlv_acc;
        for (const auto& lr : leakage) {
            if (lr.scope != "whole" || !lr.rdlv) continue;
            auto& [sum, n] = rdlv_acc[lr.client][lr.round];
            sum += *lr.rdlv;
            n += 1;
        }
        std::vector<LineSeries> rdlv_series;
        for (const auto& [client, per_round] : rdlv_acc) {
            LineSeries s;
            s.label = "client " + std::to_string(client);
            for (const auto& [round, acc] : per_round) {
                s.x.push_back(double(round));
                s.y.push_back(acc.first / double(acc.second));
            }
            rdlv_series.push_back(std::move(s));
        }
        if (!rdlv_series.empty())
            write_line_plot(run_dir / "plots" / "rdlv.ppm", rdlv_series);
        else
            gaps.push_back("no RDLV values: rdlv plot skipped");

        // contact sheets: rows = attack rounds, cols = attacked clients
        auto attack_rounds = manifest["config"]["attack_rounds"].get<std::vector<int64_t>>();
        auto attack_clients =
            manifest["config"]["attack_clients"].get<std::vector<int64_t>>();
        std::set<std::string> kinds;
        for (const auto& a : manifest["config"]["attacks"]) kinds.insert(a["kind"]);
        for (const auto& kind : kinds) {
            std::vector<std::vector<Tensor>> grid;
            Shape tile_shape;
            bool any = false;
            for (int64_t r : attack_rounds) {
                std::vector<Tensor> row;
                for (int64_t cid : attack_clients) {
                    fs::path f = run_dir / "recon" / recon_name(kind, r, cid, 0);
                    if (fs::exists(f)) {
                        row.push_back(read_image(f));
                        tile_shape = row.back().shape();
                        any = true;
                    } else {
                        row.push_back(Tensor());  // placeholder, filled below
                        gaps.push_back("missing reconstruction " + f.string());
                    }
                }
                grid.push_back(std::move(row));
            }
            if (!any) continue;
            for (auto& row : grid)
                for (auto& t : row)
                    if (!t.defined()) t = Tensor::zeros(tile_shape);
            write_contact_sheet(run_dir / "plots" / ("recon_" + kind + ".ppm"), grid);
        }
    } else if (have_attacks) {
        gaps.push_back("metrics/leakage.csv missing: no leakage report");
    }

    std::ostringstream gap_text;
    for (const auto& g : gaps) gap_text << g << "\n";
    write_text(run_dir / "metrics" / "report_gaps.txt", gap_text.str());
}

void compare_runs(const std::vector<fs::path>& run_dirs, const fs::path& out_csv) {
    if (run_dirs.empty()) throw ConfigError("compare needs at least one run");
    static const char* metric_names[] = {"mse", "psnr", "ssim", "perceptual"};
    std::ostringstream out;
    out << "method,scope,metric,mean,std\n";
    for (const auto& dir : run_dirs) {
        std::ifstream mf(dir / "manifest.json");
        if (!mf) throw DataError("no manifest in " + dir.string());
        json manifest;
        mf >> manifest;
        std::string method = manifest["config"]["defense"].value("kind", "unknown");
        auto rows = read_csv(dir / "metrics" / "leakage.csv");
        std::set<int64_t> wanted;
        for (int64_t r : manifest["config"]["metric_rounds"].get<std::vector<int64_t>>())
            wanted.insert(r);
        for (const char* scope : {"whole", "target"}) {
            for (size_t mi = 0; mi < 4; ++mi) {
                std::vector<double> vals;
                for (size_t i = 1; i < rows.size(); ++i) {
                    if (rows[i][4] != scope || !wanted.count(std::stoll(rows[i][1])))
                        continue;
                    vals.push_back(std::stod(rows[i][5 + mi]));
                }
                double mean = 0, sd = 0;
                if (!vals.empty()) {
                    for (double v : vals) mean += v;
                    mean /= double(vals.size());
                    for (double v : vals) sd += (v - mean) * (v - mean);
                    sd = std::sqrt(sd / double(vals.size()));
                }
                out << method << "," << scope << "," << metric_names[mi] << "," << fmt(mean)
                    << "," << fmt(sd) << "\n";
            }
        }
    }
    fs::create_directories(out_csv.parent_path().empty() ? "." : out_csv.parent_path());
    write_text(out_csv, out.str());
}

AttackResult attack_snapshot(const fs::path& update_file, const AttackConfig& config,
                             const fs::path& generator_ckpt) {
    Checkpoint ck = load_checkpoint(update_file);
    if (ck.manifest.value("kind", "") != "client_update")
        throw DataError("not an update snapshot: " + update_file.string());
    TaskModelSpec spec = model_spec_from_manifest(ck.manifest.at("model"));
    TaskModel model(spec, 0);

    ClientUpdate up;
    up.round = ck.manifest.at("round").get<int64_t>();
    up.client_id = ck.manifest.at("client").get<int64_t>();
    up.sample_count = ck.manifest.at("sample_count").get<int64_t>();
    std::map<std::string, std::vector<double>> base;
    BNStats base_bn = model.bn_statistics();
    for (const auto& [name, arr] : ck.arrays) {
        if (name.rfind("grad/", 0) == 0)
            up.gradients[name.substr(5)] = Tensor::from(std::vector<double>(arr.second),
                                                        arr.first);
        else if (name.rfind("bn_mean/", 0) == 0)
            up.bn_stats.layers[name.substr(8)].running_mean = arr.second;
        else if (name.rfind("bn_var/", 0) == 0)
            up.bn_stats.layers[name.substr(7)].running_var = arr.second;
        else if (name.rfind("base_bn_mean/", 0) == 0)
            base_bn.layers.at(name.substr(13)).running_mean = arr.second;
        else if (name.rfind("base_bn_var/", 0) == 0)
            base_bn.layers.at(name.substr(12)).running_var = arr.second;
        else if (name.rfind("base/", 0) == 0)
            base[name.substr(5)] = arr.second;
    }
    model.load_parameters(base);
    model.set_bn_statistics(base_bn);

    if (config.kind == "model_based") {
        if (generator_ckpt.empty())
            throw ConfigError("model_based attack needs a generator checkpoint");
        ShadowGenerator gen = load_generator_checkpoint(generator_ckpt);
        return model_gia(up, model, gen, config);
    }
    return optimization_gia(up, model, config);
}

}  // namespace fedshade
