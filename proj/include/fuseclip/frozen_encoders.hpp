#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "fuseclip/optim.hpp"
#include "fuseclip/tensor.hpp"
#include "fuseclip/world.hpp"

namespace fuseclip {

// Widths shared by the frozen encoders and the trainable fusion encoder.
struct EncoderConfig {
    std::size_t width = 32;        // d = d_c, patch/token feature width
    std::size_t text_dim = 32;     // d_t
    std::size_t face_dim = 32;     // d_r
    std::size_t face_patches = 4;  // L_r
    std::size_t face_hidden = 64;
    std::size_t blocks = 2;
    std::size_t heads = 1;
    std::size_t ffn_mult = 2;
    bool sequential_dca = false;
    bool operator==(const EncoderConfig&) const = default;
};

// A caption batch, row-major [batch, length].
struct TokenBatch {
    std::size_t batch = 0;
    std::size_t length = 0;
    std::vector<TokenId> ids;

    static TokenBatch from_captions(const std::vector<std::vector<TokenId>>& captions);
    Mask mask() const;  // non-pad positions
};

struct FaceFeatures {
    Tensor cls;      // [B, d_r]
    Tensor patches;  // [B, L_r, d]
};

struct TextFeatures {
    Tensor cls;      // [B, d_t]
    Tensor patches;  // [B, L, d], pad rows zero
    Mask mask;
};

// Stand-in for a face recognition backbone.
// cls = tanh(r W1) W2 (odd in r, so the zero face maps to the zero class vector);
// patch j = C_j + r M_j.
struct FaceEncoder {
    Tensor w1, w2, patch_const, patch_mod;
};

// Token table plus one frozen pre-norm self-attention block. The class
// embedding is a fixed linear read-out of the pooled raw token embeddings,
// built so that it lands in the same attribute subspace as the image features.
struct TextEncoder {
    Tensor token_table, positions;
    Tensor ln_gain, ln_bias, wq, wk, wv, wo;
    Tensor cls_proj;
};

// Linear read-out of the attribute (and, weakly, identity) factors of an image.
struct ImageEncoder {
    Tensor proj, bias;
};

struct FrozenEncoders {
    EncoderConfig dims;
    std::size_t d_x = 0, d_face = 0, caption_len = 0, vocab = 0;
    FaceEncoder face;
    TextEncoder text;
    ImageEncoder image;

    ParamList parameters() const;
    std::uint64_t hash() const { return content_hash(parameters()); }
};

// Seed-deterministic construction from the world (shares its attribute geometry).
std::shared_ptr<const FrozenEncoders> build_frozen_encoders(const World& world, const EncoderConfig& dims);

FaceFeatures encode_face(const FrozenEncoders& enc, const Tensor& references);  // [B, d_face]
TextFeatures encode_text(const FrozenEncoders& enc, const TokenBatch& tokens);
Tensor encode_image(const FrozenEncoders& enc, const Tensor& images);           // [B, d_x] -> [B, d_t]

Tensor rows_to_tensor(const std::vector<std::vector<double>>& rows);
Tensor sinusoidal_positions(std::size_t length, std::size_t width);

}  // namespace fuseclip
