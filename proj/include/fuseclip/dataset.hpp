#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "fuseclip/world.hpp"

namespace fuseclip {

enum class DatasetKind : std::uint32_t { Main = 0, Guided = 1 };

// What the training code sees of a record.
struct TrainingSample {
    std::vector<double> x0;
    std::vector<TokenId> caption;
    std::vector<double> reference;  // all zeros for guided records
};

// Generative factors behind a record. Evaluation-only: the training loop never reads this.
struct GroundTruth {
    int identity = -1;  // -1 = anonymous
    std::vector<std::size_t> slots;
};

struct DatasetHeader {
    std::uint32_t version = 1;
    DatasetKind kind = DatasetKind::Main;
    std::uint32_t d_x = 0;
    std::uint32_t d_face = 0;
    std::uint32_t caption_len = 0;
    std::uint32_t n_slots = 0;
    std::uint64_t world_seed = 0;
    std::uint64_t generation_seed = 0;
    bool operator==(const DatasetHeader&) const = default;
};

struct Dataset {
    DatasetHeader header;
    std::vector<TrainingSample> samples;
    std::vector<GroundTruth> truth;

    std::size_t size() const { return samples.size(); }
    bool operator==(const Dataset& other) const;
};

inline constexpr std::uint32_t kDatasetVersion = 1;

Dataset generate_main_dataset(const World& world, std::size_t n_samples, std::uint64_t seed);
Dataset generate_guided_dataset(const World& world, std::size_t n_samples, std::uint64_t seed);

std::vector<std::uint8_t> encode_dataset(const Dataset& ds);
Dataset decode_dataset(std::span<const std::uint8_t> bytes);
void write_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

// Throws CompatibilityError if the dataset was not generated for this world's shape.
void check_dataset_matches(const Dataset& ds, const World& world);

}  // namespace fuseclip
