#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "fuseclip/diffusion.hpp"
#include "fuseclip/frozen_encoders.hpp"
#include "fuseclip/losses.hpp"
#include "fuseclip/world.hpp"

namespace fuseclip {

using Json = nlohmann::ordered_json;

struct DataConfig {
    std::string dir = "data";
    std::uint64_t seed = 7;
    std::size_t n_main = 4000;
    std::size_t n_guided = 4000;
};

struct PretrainConfig {
    AlignmentLossConfig loss;
    LossVariant variant = LossVariant::L3;
    std::size_t batch = 64;
    std::size_t steps = 1500;
    double lr = 1e-3;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double clip_norm = 1.0;
    std::uint64_t seed = 11;
    std::size_t log_every = 10;
    std::size_t checkpoint_every = 500;
    std::size_t stop_after = 0;  // stop this invocation early at this step (0 = run to `steps`)
};

struct DiffusionTrainConfig {
    std::string encoder_checkpoint = "untrained";
    bool encoder_trainable = false;
    bool force_encoder_trainable = false;
    bool use_guided = false;
    std::size_t schedule_steps = 100;
    std::size_t batch = 64;
    std::size_t steps = 1000;
    double lr = 1e-3;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double clip_norm = 1.0;
    std::uint64_t seed = 23;
    std::size_t log_every = 10;
    std::size_t checkpoint_every = 1000;
    std::size_t stop_after = 0;
    DenoiserConfig denoiser;
};

struct EvalConfig {
    std::uint64_t seed = 31;
    std::vector<std::string> metrics;  // empty: every family the model supports
    std::size_t n_zero_shot = 2000;
    std::size_t n_ids = 20;
    std::size_t n_per_id = 25;
    std::size_t n_generate = 200;
    std::size_t n_bootstrap = 2000;
};

struct RunConfig {
    WorldConfig world;
    EncoderConfig encoder;
    DataConfig data;
    PretrainConfig pretrain;
    DiffusionTrainConfig diffusion;
    EvalConfig eval;

    void validate() const;
};

Json to_json(const RunConfig& cfg);
// Strict: unknown keys anywhere in the tree raise ConfigError. Missing keys keep defaults.
RunConfig run_config_from_json(const Json& j);

// Applies "a.b.c=value" (value parsed as JSON, else taken as a string) to a config tree.
void apply_override(Json& tree, const std::string& assignment);

Json world_to_json(const WorldConfig& w);
Json encoder_to_json(const EncoderConfig& e);

}  // namespace fuseclip
