#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "fedshade/tensor.hpp"

namespace fedshade {

struct Sample {
    ad::Tensor image;  // [C,H,W] in [0,1]
    int64_t label = 0;
    int64_t id = 0;
};

struct ClientDataset {
    int64_t client_id = 0;
    std::vector<Sample> samples;
    int64_t batch_size = 1;
};

struct PartitionSpec {
    std::vector<int64_t> client_sizes;
    std::vector<int64_t> batch_sizes;
    double label_skew = 0.0;  // 0 = near-uniform mix, 1 = single-label clients
};

// Desk-scale stand-in for the 9-client layout: sizes
// (8,8,8,8,16,16,16,16,1) with batches (4,4,4,4,8,8,8,8,1); the last client
// holds a single image.
PartitionSpec default_partition_spec();

std::vector<Sample> generate_synthetic_dataset(int64_t n, int64_t resolution, int64_t channels,
                                               int64_t classes, uint64_t seed);

std::vector<Sample> load_image_folder(const std::filesystem::path& path, int64_t resolution);

std::vector<ClientDataset> partition_clients(const std::vector<Sample>& samples,
                                             const PartitionSpec& spec, uint64_t seed);

// Channel-wise (image - mean) / std.
ad::Tensor normalize(const ad::Tensor& image, const std::vector<double>& mean,
                     const std::vector<double>& stddev);
ad::Tensor denormalize(const ad::Tensor& image, const std::vector<double>& mean,
                       const std::vector<double>& stddev);

// Per-channel mean and std over a sample set.
void dataset_statistics(const std::vector<Sample>& samples, std::vector<double>& mean,
                        std::vector<double>& stddev);

// Plain-text manifest: one "id label client" line per sample.
void write_manifest(const std::filesystem::path& file,
                    const std::vector<ClientDataset>& clients);

}  // namespace fedshade
