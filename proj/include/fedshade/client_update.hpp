#pragma once

#include <cstdint>

#include "fedshade/task_model.hpp"

namespace fedshade {

// The payload a client uploads: update-as-gradient plus BN running stats.
// Deliberately free of any raw-sample types; attack code sees only this.
struct ClientUpdate {
    GradientSet gradients;
    BNStats bn_stats;
    int64_t sample_count = 0;
    int64_t round = 0;
    int64_t client_id = 0;
};

}  // namespace fedshade
