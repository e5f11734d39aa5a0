#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "fuseclip/checkpoint.hpp"
#include "fuseclip/config.hpp"
#include "fuseclip/dataset.hpp"
#include "fuseclip/diffusion.hpp"
#include "fuseclip/fusion.hpp"
#include "fuseclip/world.hpp"

namespace fuseclip {

// Frozen-encoder outputs for every record of a dataset, computed once.
struct FeatureCache {
    std::size_t n = 0, length = 0, width = 0, face_len = 0, text_dim = 0, face_dim = 0, d_x = 0;
    std::vector<double> text_patches;  // n x L x d
    std::vector<std::uint8_t> mask;    // n x L
    std::vector<double> text_cls;      // n x d_t
    std::vector<double> face_patches;  // n x L_r x d
    std::vector<double> face_cls;      // n x d_r
    std::vector<double> image;         // n x d_t
    std::vector<double> x0;            // n x d_x
};

FeatureCache build_feature_cache(const FrozenEncoders& frozen, const Dataset& ds);

// Per-slot source choice for one batch: guided with probability lambda.
struct BatchPlan {
    std::vector<std::uint8_t> guided;
    std::vector<std::size_t> index;
    std::size_t guided_count() const;
};

BatchPlan draw_batch_plan(Rng& rng, std::size_t batch, double lambda, std::size_t n_main, std::size_t n_guided);

using MetricsSink = std::function<void(const Json&)>;
using CheckpointSink = std::function<void(const Checkpoint&)>;

// Stage 1: alignment pre-training of the fusion module and projection heads.
class Pretrainer {
public:
    // `guided` may be null when lambda = 0.
    Pretrainer(const RunConfig& cfg, const Dataset& main, const Dataset* guided);

    void restore(const Checkpoint& ck);
    // One optimizer step; returns the step record. Throws NumericError on a non-finite loss.
    Json step();
    // Runs until pretrain.steps (or stop_after); emits a record every log_every steps
    // and a checkpoint every checkpoint_every steps plus one at the end.
    void run(const MetricsSink& metrics, const CheckpointSink& checkpoints);

    Checkpoint checkpoint() const;
    std::uint64_t current_step() const { return step_; }
    const FaceClipEncoder& encoder() const { return *encoder_; }
    FaceClipEncoder& encoder() { return *encoder_; }
    const World& world() const { return world_; }
    std::uint64_t frozen_hash() const { return frozen_->hash(); }
    std::size_t slots_drawn() const { return slots_drawn_; }
    std::size_t guided_drawn() const { return guided_drawn_; }
    const Json& diagnostics() const { return diagnostics_; }
    const ParamList& trainable() const { return trainable_; }

private:
    Json step_impl();

    RunConfig cfg_;
    World world_;
    std::shared_ptr<const FrozenEncoders> frozen_;
    std::unique_ptr<FaceClipEncoder> encoder_;
    std::optional<Tensor> log_scale_;
    FeatureCache main_, guided_;
    std::vector<double> null_face_patches_, null_face_cls_;
    Rng rng_;
    OptimizerState opt_;
    ParamList trainable_;
    std::uint64_t step_ = 0;
    std::uint64_t initial_frozen_hash_ = 0;
    std::size_t slots_drawn_ = 0, guided_drawn_ = 0;
    Json diagnostics_;
};

// Stage 2: conditional denoiser over the joint embedding. With
// encoder_trainable the fusion module is optimized by the diffusion loss too.
class DiffusionTrainer {
public:
    // `encoder_ck` is the pre-training checkpoint, or null for an untrained encoder.
    DiffusionTrainer(const RunConfig& cfg, const Dataset& main, const Dataset* guided, const Checkpoint* encoder_ck);

    void restore(const Checkpoint& ck);
    Json step();
    void run(const MetricsSink& metrics, const CheckpointSink& checkpoints);

    Checkpoint checkpoint() const;
    std::uint64_t current_step() const { return step_; }
    const FaceClipEncoder& encoder() const { return *encoder_; }
    const Denoiser& denoiser() const { return *denoiser_; }
    const NoiseSchedule& schedule() const { return schedule_; }
    std::uint64_t frozen_hash() const { return frozen_->hash(); }
    const Json& diagnostics() const { return diagnostics_; }

private:
    Json step_impl();
    Condition batch_condition(const std::vector<std::size_t>& rows, const std::vector<std::uint8_t>& from_guided) const;

    RunConfig cfg_;
    World world_;
    std::shared_ptr<const FrozenEncoders> frozen_;
    std::unique_ptr<FaceClipEncoder> encoder_;
    std::unique_ptr<Denoiser> denoiser_;
    NoiseSchedule schedule_;
    FeatureCache main_, guided_;
    // Cached encoder outputs when the encoder is frozen.
    std::vector<double> main_e_, guided_e_;
    Rng rng_;
    OptimizerState opt_;
    ParamList trainable_;
    std::uint64_t step_ = 0;
    std::uint64_t initial_frozen_hash_ = 0, initial_encoder_hash_ = 0;
    Json diagnostics_;
};

// Everything needed to evaluate a checkpoint.
struct LoadedModel {
    RunConfig config;
    std::unique_ptr<World> world;
    std::shared_ptr<const FrozenEncoders> frozen;
    std::unique_ptr<FaceClipEncoder> encoder;
    std::unique_ptr<Denoiser> denoiser;  // only for diffusion checkpoints
    NoiseSchedule schedule;
};

// Rebuilds world, frozen encoders (verified against the stored copies) and trained modules.
LoadedModel load_model(const Checkpoint& ck);

}  // namespace fuseclip
