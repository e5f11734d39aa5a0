#include "fuseclip/losses.hpp"

#include <cmath>
#include <numeric>

#include "fuseclip/errors.hpp"

namespace fuseclip {

std::string to_string(LossVariant v) {
    switch (v) {
        case LossVariant::L1: return "L1";
        case LossVariant::L2: return "L2";
        case LossVariant::L3: return "L3";
    }
    return "?";
}

LossVariant parse_loss_variant(const std::string& s) {
    if (s == "L1") return LossVariant::L1;
    if (s == "L2") return LossVariant::L2;
    if (s == "L3") return LossVariant::L3;
    throw ConfigError("unknown loss mask '" + s + "' (expected L1, L2 or L3)");
}

TermMask TermMask::from_variant(LossVariant v) {
    switch (v) {
        case LossVariant::L1: return {true, false, false};
        case LossVariant::L2: return {true, true, false};
        case LossVariant::L3: return {true, true, true};
    }
    return {};
}

void AlignmentLossConfig::validate() const {
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
    if (!(guided_probability >= 0.0 && guided_probability <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
    if (!mask.image && !mask.id && !mask.text) throw ConfigError("loss mask selects no terms");
}

namespace {

Tensor symmetric_cross_entropy(const Tensor& logits) {
    const std::size_t n = logits.dim(0);
    std::vector<std::size_t> diag(n);
    std::iota(diag.begin(), diag.end(), std::size_t{0});
    auto rows = cross_entropy(logits, diag);
    auto cols = cross_entropy(transpose(logits), diag);
    return scale(add(rows, cols), 0.5);
}

void check_pair(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape() != b.shape())
        throw DimensionError("contrastive_loss: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    if (a.dim(0) < 2) throw ContractError("contrastive_loss needs a batch of at least 2");
}

}  // namespace

Tensor contrastive_loss(const Tensor& a, const Tensor& b, double temperature) {
    check_pair(a, b);
    if (!(temperature > 0.0)) throw ContractError("contrastive_loss: temperature must be positive");
    auto logits = scale(matmul(l2_normalize_rows(a), transpose(l2_normalize_rows(b))), 1.0 / temperature);
    return symmetric_cross_entropy(logits);
}

Tensor contrastive_loss(const Tensor& a, const Tensor& b, const Tensor& log_scale) {
    check_pair(a, b);
    auto logits = mul_scalar(matmul(l2_normalize_rows(a), transpose(l2_normalize_rows(b))), exp(log_scale));
    return symmetric_cross_entropy(logits);
}

AlignmentTerms alignment_loss(const AlignmentLossConfig& cfg, const Tensor& to_text, const Tensor& to_face,
                              const Tensor& image_emb, const Tensor& face_cls, const Tensor& text_cls,
                              std::span<const std::uint8_t> guided, const Tensor* log_scale) {
    cfg.validate();
    const std::size_t b = to_text.dim(0);
    if (guided.size() != b || to_face.dim(0) != b || image_emb.dim(0) != b || face_cls.dim(0) != b ||
        text_cls.dim(0) != b)
        throw DimensionError("alignment_loss: inputs are not batch-aligned");
    auto term = [&](const Tensor& x, const Tensor& y) {
        return log_scale ? contrastive_loss(x, y, *log_scale) : contrastive_loss(x, y, cfg.temperature);
    };

    AlignmentTerms out;
    std::optional<Tensor> total;
    auto accumulate = [&](const Tensor& t) { total = total ? add(*total, t) : t; };
    if (cfg.mask.image) {
        auto t = term(to_text, image_emb);
        out.image = t.item();
        accumulate(t);
    }
    if (cfg.mask.id) {
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < b; ++i)
            if (!guided[i]) rows.push_back(i);
        out.id_rows = rows.size();
        if (rows.size() >= 2) {
            auto t = rows.size() == b ? term(to_face, face_cls) : term(select_rows(to_face, rows), select_rows(face_cls, rows));
            out.id = t.item();
            accumulate(t);
        } else {
            out.id_rows = 0;
        }
    }
    if (cfg.mask.text) {
        auto t = term(to_text, text_cls);
        out.text = t.item();
        accumulate(t);
    }
    out.total = total ? *total : Tensor::scalar(0.0);
    return out;
}

}  // namespace fuseclip
