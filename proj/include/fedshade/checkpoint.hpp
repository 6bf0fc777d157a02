#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedshade/tensor.hpp"

namespace fedshade {

// Versioned named-array archive: magic + version + JSON manifest + raw doubles.
struct Checkpoint {
    nlohmann::json manifest;  // architecture and origin metadata
    std::map<std::string, std::pair<ad::Shape, std::vector<double>>> arrays;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace fedshade
