#include "fuseclip/fusion.hpp"

#include <cmath>

#include "fuseclip/errors.hpp"
#include "fuseclip/rng.hpp"

namespace fuseclip {

namespace {

Tensor gaussian_param(Rng& rng, Shape shape, double stddev) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), rng.normal_vector(n, stddev), true);
}

Tensor zeros_param(Shape shape) { return Tensor::zeros(std::move(shape), true); }

void push(ParamList& out, const std::string& name, const Tensor& t) { out.push_back({name, t}); }

}  // namespace

LayerNormParams LayerNormParams::make(std::size_t d) {
    return {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true)};
}

AttentionSublayer AttentionSublayer::make(std::size_t d, std::size_t heads, Rng& rng) {
    if (heads == 0 || d % heads != 0) throw ConfigError("attention heads must divide the width");
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    AttentionSublayer a;
    a.norm_q = LayerNormParams::make(d);
    a.norm_kv = LayerNormParams::make(d);
    a.wq = gaussian_param(rng, {d, d}, sd);
    a.wk = gaussian_param(rng, {d, d}, sd);
    a.wv = gaussian_param(rng, {d, d}, sd);
    a.wo = zeros_param({d, d});
    a.bo = zeros_param({d});
    a.heads = heads;
    return a;
}

Tensor AttentionSublayer::forward(const Tensor& query_stream, const Tensor& kv_stream, const Mask* key_mask) const {
    const std::size_t d = wq.dim(0);
    if (query_stream.rank() != 3 || kv_stream.rank() != 3 || query_stream.dim(2) != d || kv_stream.dim(2) != d ||
        query_stream.dim(0) != kv_stream.dim(0))
        throw ContractError("attention sublayer: stream widths must match " + std::to_string(d) + " (" +
                            shape_str(query_stream.shape()) + " vs " + shape_str(kv_stream.shape()) + ")");
    auto qn = norm_q(query_stream);
    auto kvn = query_stream.same_node(kv_stream) ? qn : norm_kv(kv_stream);
    auto q = split_heads(linear(qn, wq), heads);
    auto k = split_heads(linear(kvn, wk), heads);
    auto v = split_heads(linear(kvn, wv), heads);
    Mask repeated;
    const Mask* mask = key_mask;
    if (key_mask && heads > 1) {
        repeated = key_mask->repeat_batch(heads);
        mask = &repeated;
    }
    auto ctx = merge_heads(attention(q, k, v, mask), heads);
    return linear(ctx, wo, bo);
}

void AttentionSublayer::collect(ParamList& out, const std::string& prefix) const {
    push(out, prefix + ".norm_q.gain", norm_q.gain);
    push(out, prefix + ".norm_q.bias", norm_q.bias);
    push(out, prefix + ".norm_kv.gain", norm_kv.gain);
    push(out, prefix + ".norm_kv.bias", norm_kv.bias);
    push(out, prefix + ".wq", wq);
    push(out, prefix + ".wk", wk);
    push(out, prefix + ".wv", wv);
    push(out, prefix + ".wo", wo);
    push(out, prefix + ".bo", bo);
}

FeedForward FeedForward::make(std::size_t d, std::size_t hidden, Rng& rng) {
    FeedForward f;
    f.norm = LayerNormParams::make(d);
    f.w1 = gaussian_param(rng, {d, hidden}, 1.0 / std::sqrt(static_cast<double>(d)));
    f.b1 = zeros_param({hidden});
    f.w2 = zeros_param({hidden, d});
    f.b2 = zeros_param({d});
    return f;
}

Tensor FeedForward::forward(const Tensor& x) const { return linear(gelu(linear(norm(x), w1, b1)), w2, b2); }

void FeedForward::collect(ParamList& out, const std::string& prefix) const {
    push(out, prefix + ".norm.gain", norm.gain);
    push(out, prefix + ".norm.bias", norm.bias);
    push(out, prefix + ".w1", w1);
    push(out, prefix + ".b1", b1);
    push(out, prefix + ".w2", w2);
    push(out, prefix + ".b2", b2);
}

StreamPair DualCrossAttention::forward(const Tensor& text, const Tensor& face, const Mask& text_mask) const {
    // Pad text positions neither query nor act as keys.
    auto text_out = add(text, mask_rows(text_from_face.forward(text, face, nullptr), text_mask));
    const Tensor& text_keys = sequential ? text_out : text;
    auto face_out = add(face, face_from_text.forward(face, text_keys, &text_mask));
    return {text_out, face_out};
}

void DualCrossAttention::collect(ParamList& out, const std::string& prefix) const {
    text_from_face.collect(out, prefix + ".text_from_face");
    face_from_text.collect(out, prefix + ".face_from_text");
}

StreamPair FeatureFusionBlock::forward(const Tensor& text, const Tensor& face, const Mask& text_mask) const {
    auto mixed = dca.forward(text, face, text_mask);
    auto t = add(mixed.text, mask_rows(text_self.forward(mixed.text, mixed.text, &text_mask), text_mask));
    t = add(t, mask_rows(text_ffn.forward(t), text_mask));
    auto f = add(mixed.face, face_self.forward(mixed.face, mixed.face, nullptr));
    f = add(f, face_ffn.forward(f));
    return {t, f};
}

void FeatureFusionBlock::collect(ParamList& out, const std::string& prefix) const {
    dca.collect(out, prefix + ".dca");
    // Self-attention layers normalize queries and keys with one shared norm.
    ParamList tmp;
    text_self.collect(tmp, prefix + ".text_self");
    face_self.collect(tmp, prefix + ".face_self");
    for (auto& p : tmp)
        if (p.name.find(".norm_kv.") == std::string::npos) out.push_back(p);
    text_ffn.collect(out, prefix + ".text_ffn");
    face_ffn.collect(out, prefix + ".face_ffn");
}

Tensor FusionModule::forward(const Tensor& text_patches, const Tensor& face_patches, const Mask& text_mask) const {
    if (blocks.empty()) throw ContractError("fusion module needs at least one block");
    if (text_patches.rank() != 3 || face_patches.rank() != 3 || text_patches.dim(2) != face_patches.dim(2))
        throw ContractError("fusion: stream widths must match (" + shape_str(text_patches.shape()) + " vs " +
                            shape_str(face_patches.shape()) + ")");
    StreamPair s{text_patches, face_patches};
    for (const auto& block : blocks) s = block.forward(s.text, s.face, text_mask);
    return mask_rows(final_norm(s.text), text_mask);
}

void FusionModule::collect(ParamList& out, const std::string& prefix) const {
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(out, prefix + ".block" + std::to_string(i));
    push(out, prefix + ".final_norm.gain", final_norm.gain);
    push(out, prefix + ".final_norm.bias", final_norm.bias);
}

void ProjectionHeads::collect(ParamList& out, const std::string& prefix) const {
    push(out, prefix + ".to_text.w", to_text_w);
    push(out, prefix + ".to_text.b", to_text_b);
    push(out, prefix + ".to_face.w", to_face_w);
    push(out, prefix + ".to_face.b", to_face_b);
}

FaceClipEncoder::FaceClipEncoder(std::shared_ptr<const FrozenEncoders> frozen, std::uint64_t init_seed)
    : frozen_(std::move(frozen)) {
    const auto& dims = frozen_->dims;
    if (dims.blocks == 0) throw ConfigError("encoder.blocks must be at least 1");
    if (dims.ffn_mult == 0) throw ConfigError("encoder.ffn_mult must be positive");
    const std::size_t d = dims.width;
    Rng rng(init_seed);
    for (std::size_t i = 0; i < dims.blocks; ++i) {
        FeatureFusionBlock b;
        b.dca.text_from_face = AttentionSublayer::make(d, dims.heads, rng);
        b.dca.face_from_text = AttentionSublayer::make(d, dims.heads, rng);
        b.dca.sequential = dims.sequential_dca;
        b.text_self = AttentionSublayer::make(d, dims.heads, rng);
        b.face_self = AttentionSublayer::make(d, dims.heads, rng);
        b.text_ffn = FeedForward::make(d, dims.ffn_mult * d, rng);
        b.face_ffn = FeedForward::make(d, dims.ffn_mult * d, rng);
        fusion_.blocks.push_back(std::move(b));
    }
    fusion_.final_norm = LayerNormParams::make(d);
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    heads_.to_text_w = gaussian_param(rng, {d, dims.text_dim}, sd);
    heads_.to_text_b = zeros_param({dims.text_dim});
    heads_.to_face_w = gaussian_param(rng, {d, dims.face_dim}, sd);
    heads_.to_face_b = zeros_param({dims.face_dim});
}

Tensor FaceClipEncoder::encode(const TokenBatch& tokens, const Tensor& references) const {
    if (references.rank() != 2 || references.dim(0) != tokens.batch)
        throw ContractError("encode: references must have one row per caption");
    auto text = encode_text(*frozen_, tokens);
    auto face = encode_face(*frozen_, references);
    return fuse(text.patches, face.patches, text.mask);
}

Tensor FaceClipEncoder::fuse(const Tensor& text_patches, const Tensor& face_patches, const Mask& text_mask) const {
    return fusion_.forward(text_patches, face_patches, text_mask);
}

Tensor FaceClipEncoder::project_to_text(const Tensor& e, const Mask& text_mask) const {
    return linear(pool(e, text_mask), heads_.to_text_w, heads_.to_text_b);
}

Tensor FaceClipEncoder::project_to_face(const Tensor& e, const Mask& text_mask) const {
    return linear(pool(e, text_mask), heads_.to_face_w, heads_.to_face_b);
}

ParamList FaceClipEncoder::parameters() const {
    ParamList out;
    fusion_.collect(out, "encoder.fusion");
    heads_.collect(out, "encoder.heads");
    return out;
}

void FaceClipEncoder::randomize_output_projections(std::uint64_t seed, double stddev) {
    Rng rng(seed);
    auto fill = [&](Tensor& t) {
        for (double& v : t.mutable_data()) v = stddev * rng.normal();
    };
    for (auto& b : fusion_.blocks) {
        for (auto* a : {&b.dca.text_from_face, &b.dca.face_from_text, &b.text_self, &b.face_self}) {
            fill(a->wo);
            fill(a->bo);
        }
        for (auto* f : {&b.text_ffn, &b.face_ffn}) {
            fill(f->w2);
            fill(f->b2);
        }
    }
}

Tensor& find_param(ParamList& params, const std::string& name) {
    for (auto& p : params)
        if (p.name == name) return p.tensor;
    throw ContractError("no parameter named " + name);
}

}  // namespace fuseclip
