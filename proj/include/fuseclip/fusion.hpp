#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "fuseclip/frozen_encoders.hpp"
#include "fuseclip/optim.hpp"
#include "fuseclip/tensor.hpp"

namespace fuseclip {

class Rng;

struct LayerNormParams {
    Tensor gain, bias;
    static LayerNormParams make(std::size_t d);
    Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }
};

// Pre-norm attention sublayer: returns W_o * Attn(LN_q(q), LN_kv(kv)) + b_o,
// without the residual. Used for both cross- and self-attention.
struct AttentionSublayer {
    LayerNormParams norm_q, norm_kv;
    Tensor wq, wk, wv, wo, bo;
    std::size_t heads = 1;

    static AttentionSublayer make(std::size_t d, std::size_t heads, Rng& rng);
    Tensor forward(const Tensor& query_stream, const Tensor& kv_stream, const Mask* key_mask) const;
    void collect(ParamList& out, const std::string& prefix) const;
};

struct FeedForward {
    LayerNormParams norm;
    Tensor w1, b1, w2, b2;

    static FeedForward make(std::size_t d, std::size_t hidden, Rng& rng);
    Tensor forward(const Tensor& x) const;  // without the residual
    void collect(ParamList& out, const std::string& prefix) const;
};

struct StreamPair {
    Tensor text;  // [B, L, d]
    Tensor face;  // [B, L_r, d]
};

// Text queries over face patches and face queries over text tokens.
struct DualCrossAttention {
    AttentionSublayer text_from_face, face_from_text;
    bool sequential = false;  // face update sees the already-updated text stream

    StreamPair forward(const Tensor& text, const Tensor& face, const Mask& text_mask) const;
    void collect(ParamList& out, const std::string& prefix) const;
};

struct FeatureFusionBlock {
    DualCrossAttention dca;
    AttentionSublayer text_self, face_self;
    FeedForward text_ffn, face_ffn;

    StreamPair forward(const Tensor& text, const Tensor& face, const Mask& text_mask) const;
    void collect(ParamList& out, const std::string& prefix) const;
};

struct FusionModule {
    std::vector<FeatureFusionBlock> blocks;
    LayerNormParams final_norm;

    // Returns the fused text stream after the last block and final norm; pad rows are zero.
    Tensor forward(const Tensor& text_patches, const Tensor& face_patches, const Mask& text_mask) const;
    void collect(ParamList& out, const std::string& prefix) const;
};

struct ProjectionHeads {
    Tensor to_text_w, to_text_b, to_face_w, to_face_b;
    void collect(ParamList& out, const std::string& prefix) const;
};

// The trainable joint identity-text encoder over frozen text and face encoders.
class FaceClipEncoder {
public:
    FaceClipEncoder(std::shared_ptr<const FrozenEncoders> frozen, std::uint64_t init_seed);

    const FrozenEncoders& frozen() const { return *frozen_; }
    std::shared_ptr<const FrozenEncoders> frozen_ptr() const { return frozen_; }
    const EncoderConfig& dims() const { return frozen_->dims; }

    // Joint embedding e [B, L, d_c] from captions and reference faces (zeros allowed).
    Tensor encode(const TokenBatch& tokens, const Tensor& references) const;
    // Same, from precomputed frozen features.
    Tensor fuse(const Tensor& text_patches, const Tensor& face_patches, const Mask& text_mask) const;

    Tensor pool(const Tensor& e, const Mask& text_mask) const { return masked_mean(e, text_mask); }
    Tensor project_to_text(const Tensor& e, const Mask& text_mask) const;  // [B, d_t]
    Tensor project_to_face(const Tensor& e, const Mask& text_mask) const;  // [B, d_r]

    ParamList parameters() const;
    std::uint64_t hash() const { return content_hash(parameters()); }

    FusionModule& fusion() { return fusion_; }
    const FusionModule& fusion() const { return fusion_; }
    ProjectionHeads& heads() { return heads_; }
    const ProjectionHeads& heads() const { return heads_; }
    // Randomizes every zero-initialized output projection (tests only need this
    // to exercise non-degenerate fusion paths).
    void randomize_output_projections(std::uint64_t seed, double stddev);

private:
    std::shared_ptr<const FrozenEncoders> frozen_;
    FusionModule fusion_;
    ProjectionHeads heads_;
};

// Look up a named tensor within a parameter list.
Tensor& find_param(ParamList& params, const std::string& name);

}  // namespace fuseclip
