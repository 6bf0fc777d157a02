#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedshade/attacks.hpp"
#include "fedshade/dataset.hpp"
#include "fedshade/defense_baselines.hpp"
#include "fedshade/fl_engine.hpp"
#include "fedshade/metrics.hpp"
#include "fedshade/shadow_generator.hpp"

namespace fedshade {

struct DatasetSpec {
    std::string kind = "synthetic";  // synthetic | image_folder
    int64_t samples = 64;
    int64_t resolution = 16;
    int64_t channels = 1;
    int64_t classes = 2;
    std::string path;  // image_folder only
};

struct SeedSet {
    uint64_t data = 1;
    uint64_t model = 2;
    uint64_t defense = 3;
    uint64_t attack = 4;
};

struct PretrainSpec {
    int64_t generator_steps = 400;
    int64_t latent_steps = 300;
    int64_t reference_epochs = 40;
};

struct ExperimentConfig {
    DatasetSpec dataset;
    PartitionSpec partition;  // empty sizes -> default_partition_spec()
    TaskModelSpec model;
    DefenseConfig defense;
    std::string schedule = "increase";  // shadow amplitude schedule
    std::vector<AttackConfig> attacks;
    int64_t rounds = 16;
    int64_t local_rounds = 1;
    double lr = 0.1;
    std::vector<int64_t> attack_rounds;   // empty -> {1, R/4, R/2, 3R/4, R}
    std::vector<int64_t> metric_rounds;   // empty -> attack rounds
    std::vector<int64_t> attack_clients;  // empty -> every client
    int64_t public_samples = 32;
    int64_t test_samples = 32;
    PretrainSpec pretrain;
    SeedSet seeds;
    std::filesystem::path out;
};

// Strict parse: unknown keys are configuration errors.
ExperimentConfig parse_experiment_config(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& file);
void validate_experiment(const ExperimentConfig& config);

// Every default made explicit; this is what lands in the manifest.
nlohmann::json resolved_config(const ExperimentConfig& config);
std::string config_hash(const nlohmann::json& resolved);

struct LeakageRow {
    std::string attack;
    int64_t round = 0, client = 0, sample = 0;
    std::string scope;  // whole | target
    ImageMetrics metrics;
    std::optional<double> rdlv;  // whole scope only; absent if undefined
};

struct IipRow {
    std::string attack;
    int64_t round = 0;
    int64_t k = 0;
    double value = 0;
};

struct RunArtifacts {
    nlohmann::json manifest;
    TrainingTrace trace;
    std::vector<LeakageRow> leakage;
    std::vector<IipRow> iip_rows;
    std::vector<std::string> files;  // inventory, relative to the run directory
};

// Full pipeline: train, snapshot, attack, score, persist, report. On error a
// failure-marked manifest is left behind before the exception propagates.
RunArtifacts run_experiment(const ExperimentConfig& config);

// Regenerates plots, contact sheets, and the summary table from a persisted
// run directory; missing pieces are noted in report_gaps.txt, never fatal.
void emit_report(const std::filesystem::path& run_dir);

// Table-1-style aggregation of several runs into one CSV.
void compare_runs(const std::vector<std::filesystem::path>& run_dirs,
                  const std::filesystem::path& out_csv);

// Shared by `pretrain` and `run`: decoder trained on the public split.
ShadowGenerator pretrain_public_generator(const ExperimentConfig& config, uint64_t seed,
                                          std::vector<ad::Tensor>* public_images = nullptr);

// Re-attack a persisted update snapshot (privacy boundary: no samples touch
// this path). generator_ckpt is required for model-based attacks.
AttackResult attack_snapshot(const std::filesystem::path& update_file,
                             const AttackConfig& config,
                             const std::filesystem::path& generator_ckpt = {});

}  // namespace fedshade
