#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fuseclip/optim.hpp"

namespace fuseclip {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointKind : std::uint32_t { Pretrain = 0, Diffusion = 1 };

struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    CheckpointKind kind = CheckpointKind::Pretrain;
    std::uint64_t world_seed = 0;
    std::uint64_t step = 0;
    std::string config_json;  // effective run config
    std::string rng_state;
    ParamList tensors;                   // every module tensor, keyed by module path
    std::vector<std::string> trainable;  // optimizer order, names into `tensors`
    OptimizerState optimizer;
};

// Layout: 16-byte magic "FUSECLIP-CK", u32 version, u32 section count, then
// sections of (4-byte tag, u64 length, payload, u64 FNV-1a of payload).
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck);
// Throws IoError on truncation or checksum mismatch, CompatibilityError on a version mismatch.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

const Tensor* find_tensor(const ParamList& list, const std::string& name);
// Copies values for every destination name from `src`; missing names or shape
// mismatches raise CompatibilityError.
void copy_parameters(ParamList& dst, const ParamList& src);

}  // namespace fuseclip
