#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fedshade/client_update.hpp"
#include "fedshade/dataset.hpp"
#include "fedshade/task_model.hpp"

namespace fedshade {

struct EvalMetrics {
    double accuracy = 0.0;
    double macro_f1 = 0.0;
};

struct RoundRecord {
    int64_t round = 0;  // 0 = initial evaluation before any training
    EvalMetrics eval;
    std::string params_digest;
    std::vector<ClientUpdate> updates;  // retained only when configured
    std::map<std::string, std::vector<double>> params;  // snapshot, if retained
    BNStats bn_stats;
};

struct TrainingTrace {
    std::vector<RoundRecord> rounds;
};

struct FLConfig {
    TaskModelSpec model;
    double lr = 0.1;
    int64_t local_rounds = 1;
    int64_t global_rounds = 100;
    uint64_t seed = 0;
    bool retain_updates = false;
    bool retain_params = false;
};

// One client's local pass. Batches are drawn from a per-(client, round)
// seeded stream; the returned gradients follow the update-as-gradient
// convention (theta_before - theta_after) / lr.
ClientUpdate local_train(const ClientDataset& client, TaskModel& model, double lr,
                         int64_t local_rounds, int64_t round, uint64_t seed);

// Weighted FedAvg step applied in place; reduction ordered by client_id.
void aggregate(const std::vector<ClientUpdate>& updates, TaskModel& model, double lr);

EvalMetrics evaluate(TaskModel& model, const std::vector<Sample>& test_samples);

std::string params_digest(const TaskModel& model);

// Replaces plain local training for a client when a defense is active.
using DefenseHook =
    std::function<ClientUpdate(const ClientDataset&, TaskModel& model, int64_t round)>;

TrainingTrace run_federated(const FLConfig& config, const std::vector<ClientDataset>& clients,
                            const std::vector<Sample>& test_samples, TaskModel& model,
                            const DefenseHook& defense = {});

}  // namespace fedshade
