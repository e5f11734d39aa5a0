#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>

#include "fuseclip/tensor.hpp"

namespace fuseclip {

enum class LossVariant { L1, L2, L3 };

std::string to_string(LossVariant v);
LossVariant parse_loss_variant(const std::string& s);

// Which contrastive terms enter the pre-training objective.
struct TermMask {
    bool image = true;  // e_{c->t} vs image features
    bool id = true;     // e_{c->r} vs face class embedding
    bool text = true;   // e_{c->t} vs text class embedding

    static TermMask from_variant(LossVariant v);
    bool operator==(const TermMask&) const = default;
};

struct AlignmentLossConfig {
    double temperature = 0.07;
    bool learnable_temperature = false;
    TermMask mask;
    double guided_probability = 0.3;  // lambda

    void validate() const;
};

// Symmetric InfoNCE between row-aligned batches: rows are L2-normalized,
// logits = A B^T / tau, loss = mean of row-wise and column-wise cross-entropy
// against the diagonal.
Tensor contrastive_loss(const Tensor& a, const Tensor& b, double temperature);
// Variant with a tracked inverse-temperature factor (logits scaled by exp(log_scale)).
Tensor contrastive_loss(const Tensor& a, const Tensor& b, const Tensor& log_scale);

struct AlignmentTerms {
    Tensor total;
    double image = 0.0, id = 0.0, text = 0.0;
    std::size_t id_rows = 0;  // rows that entered the identity term
};

// Sum of the mask-selected contrastive terms. Rows flagged as guided are
// left out of the identity term (their face input is null); if fewer than
// two identity rows remain the term contributes 0.
AlignmentTerms alignment_loss(const AlignmentLossConfig& cfg, const Tensor& to_text, const Tensor& to_face,
                              const Tensor& image_emb, const Tensor& face_cls, const Tensor& text_cls,
                              std::span<const std::uint8_t> guided, const Tensor* log_scale = nullptr);

}  // namespace fuseclip
