#include "fuseclip/frozen_encoders.hpp"

#include <cmath>

#include "fuseclip/errors.hpp"
#include "fuseclip/rng.hpp"

namespace fuseclip {

namespace {

Tensor gaussian(Rng& rng, Shape shape, double stddev) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), rng.normal_vector(n, stddev));
}

Tensor from_matrix(const Eigen::MatrixXd& m) {
    std::vector<double> v(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) v[static_cast<std::size_t>(i * m.cols() + j)] = m(i, j);
    return Tensor({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())}, std::move(v));
}

}  // namespace

TokenBatch TokenBatch::from_captions(const std::vector<std::vector<TokenId>>& captions) {
    if (captions.empty()) throw ContractError("empty caption batch");
    TokenBatch tb;
    tb.batch = captions.size();
    tb.length = captions.front().size();
    for (const auto& c : captions) {
        if (c.size() != tb.length) throw DimensionError("captions in a batch must share a length");
        tb.ids.insert(tb.ids.end(), c.begin(), c.end());
    }
    return tb;
}

Mask TokenBatch::mask() const {
    Mask m(batch, length, 0);
    for (std::size_t i = 0; i < ids.size(); ++i) m.valid[i] = ids[i] != kPadToken;
    return m;
}

Tensor rows_to_tensor(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) throw ContractError("rows_to_tensor: no rows");
    const std::size_t d = rows.front().size();
    std::vector<double> flat;
    flat.reserve(rows.size() * d);
    for (const auto& r : rows) {
        if (r.size() != d) throw DimensionError("rows_to_tensor: ragged rows");
        flat.insert(flat.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), d}, std::move(flat));
}

Tensor sinusoidal_positions(std::size_t length, std::size_t width) {
    std::vector<double> v(length * width);
    for (std::size_t p = 0; p < length; ++p)
        for (std::size_t i = 0; i < width; ++i) {
            const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(width));
            v[p * width + i] = (i % 2 == 0) ? std::sin(static_cast<double>(p) * freq) : std::cos(static_cast<double>(p) * freq);
        }
    return Tensor({length, width}, std::move(v));
}

ParamList FrozenEncoders::parameters() const {
    return {{"frozen.face.w1", face.w1},
            {"frozen.face.w2", face.w2},
            {"frozen.face.patch_const", face.patch_const},
            {"frozen.face.patch_mod", face.patch_mod},
            {"frozen.text.token_table", text.token_table},
            {"frozen.text.positions", text.positions},
            {"frozen.text.ln_gain", text.ln_gain},
            {"frozen.text.ln_bias", text.ln_bias},
            {"frozen.text.wq", text.wq},
            {"frozen.text.wk", text.wk},
            {"frozen.text.wv", text.wv},
            {"frozen.text.wo", text.wo},
            {"frozen.text.cls_proj", text.cls_proj},
            {"frozen.image.proj", image.proj},
            {"frozen.image.bias", image.bias}};
}

std::shared_ptr<const FrozenEncoders> build_frozen_encoders(const World& world, const EncoderConfig& dims) {
    const auto& wc = world.config();
    const std::size_t d = dims.width;
    if (d < 2 || dims.text_dim == 0 || dims.face_dim == 0 || dims.face_patches == 0 || dims.face_hidden == 0)
        throw ConfigError("encoder dims must be positive (width >= 2)");
    auto enc = std::make_shared<FrozenEncoders>();
    enc->dims = dims;
    enc->d_x = wc.d_x;
    enc->d_face = wc.d_face;
    enc->caption_len = wc.caption_len;
    enc->vocab = world.vocab_size();

    Rng rng(derive_seed(wc.seed, 10));

    // Squared reference norms are about 4 by construction of the face matrix.
    const double ref_norm2 = 4.0;
    // The recognizer only sees the part of a reference orthogonal to the photo nuisance.
    {
        Eigen::MatrixXd w1(static_cast<Eigen::Index>(wc.d_face), static_cast<Eigen::Index>(dims.face_hidden));
        for (Eigen::Index i = 0; i < w1.rows(); ++i)
            for (Eigen::Index j = 0; j < w1.cols(); ++j) w1(i, j) = rng.normal() / std::sqrt(ref_norm2);
        const auto& nuis = world.reference_nuisance();
        if (nuis.cols() > 0) {
            Eigen::MatrixXd q = nuis.householderQr().householderQ() * Eigen::MatrixXd::Identity(nuis.rows(), nuis.cols());
            w1 -= q * (q.transpose() * w1);
        }
        enc->face.w1 = from_matrix(w1);
    }
    enc->face.w2 = gaussian(rng, {dims.face_hidden, dims.face_dim}, std::sqrt(1.0 / static_cast<double>(dims.face_hidden)));
    enc->face.patch_const = gaussian(rng, {dims.face_patches * d}, std::sqrt(0.5));
    enc->face.patch_mod = gaussian(rng, {wc.d_face, dims.face_patches * d}, std::sqrt(0.5 / ref_norm2));

    // Token embeddings: orthogonal directions when the vocabulary fits the width,
    // so an unseen word cannot be inferred from the words seen in training.
    const std::size_t vocab = world.vocab_size();
    Eigen::MatrixXd table = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(vocab), static_cast<Eigen::Index>(d));
    {
        Eigen::MatrixXd g(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(vocab - 1));
        for (Eigen::Index i = 0; i < g.rows(); ++i)
            for (Eigen::Index j = 0; j < g.cols(); ++j) g(i, j) = rng.normal();
        if (vocab - 1 <= d) {
            Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
            Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(g.rows(), g.cols());
            g = q * std::sqrt(static_cast<double>(d));
        }
        table.bottomRows(static_cast<Eigen::Index>(vocab - 1)) = g.transpose();
    }
    enc->text.token_table = from_matrix(table);
    enc->text.positions = sinusoidal_positions(wc.caption_len, d);
    enc->text.ln_gain = Tensor::full({d}, 1.0);
    enc->text.ln_bias = Tensor::zeros({d});
    const double sd = std::sqrt(1.0 / static_cast<double>(d));
    enc->text.wq = gaussian(rng, {d, d}, sd);
    enc->text.wk = gaussian(rng, {d, d}, sd);
    enc->text.wv = gaussian(rng, {d, d}, sd);
    enc->text.wo = gaussian(rng, {d, d}, 0.5 * sd);

    // Shared attribute read-out G (d_t x d_attr) and identity read-out H (d_t x d_id).
    const auto d_attr = static_cast<Eigen::Index>(wc.d_attr());
    const auto d_id = static_cast<Eigen::Index>(wc.d_id);
    const auto d_t = static_cast<Eigen::Index>(dims.text_dim);
    Eigen::MatrixXd shared(d_t, d_attr), ident(d_t, d_id);
    for (Eigen::Index i = 0; i < d_t; ++i)
        for (Eigen::Index j = 0; j < d_attr; ++j) shared(i, j) = rng.normal() / std::sqrt(static_cast<double>(d_attr));
    for (Eigen::Index i = 0; i < d_t; ++i)
        for (Eigen::Index j = 0; j < d_id; ++j) ident(i, j) = rng.normal();

    // Text read-out W with table_row(word) * W = G_k code(k, v) for attribute words, 0 for glue.
    Eigen::MatrixXd targets = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(vocab), d_t);
    for (std::size_t k = 0; k < wc.n_slots(); ++k)
        for (std::size_t v = 0; v < wc.vocab_sizes[k]; ++v) {
            const auto& code = world.attribute_code(k, v);
            Eigen::VectorXd full = Eigen::VectorXd::Zero(d_attr);
            for (std::size_t j = 0; j < wc.code_dim; ++j) full(static_cast<Eigen::Index>(k * wc.code_dim + j)) = code[j];
            targets.row(world.attribute_token(k, v)) = (shared * full).transpose();
        }
    Eigen::MatrixXd readout = table.completeOrthogonalDecomposition().solve(targets);
    enc->text.cls_proj = from_matrix(readout);

    // Image read-out through the world's factor recovery: e_I = G attr + beta H id + b.
    Eigen::MatrixXd basis = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(wc.d_x), static_cast<Eigen::Index>(wc.d_x));
    Eigen::MatrixXd proj(static_cast<Eigen::Index>(wc.d_x), d_t);
    for (Eigen::Index i = 0; i < basis.cols(); ++i) {
        std::vector<double> e(basis.col(i).data(), basis.col(i).data() + basis.rows());
        auto [id_hat, attr_hat] = world.recover_factors(e);
        proj.row(i) = (shared * attr_hat + wc.image_identity_weight * ident * id_hat).transpose();
    }
    enc->image.proj = from_matrix(proj);
    enc->image.bias = gaussian(rng, {dims.text_dim}, 0.1);
    return enc;
}

FaceFeatures encode_face(const FrozenEncoders& enc, const Tensor& references) {
    if (references.rank() != 2 || references.dim(1) != enc.d_face)
        throw ContractError("encode_face: references must be [B, " + std::to_string(enc.d_face) + "], got " +
                            shape_str(references.shape()));
    const std::size_t b = references.dim(0);
    FaceFeatures f;
    f.cls = linear(tanh(linear(references, enc.face.w1)), enc.face.w2);
    f.patches = linear(references, enc.face.patch_mod, enc.face.patch_const)
                    .reshape({b, enc.dims.face_patches, enc.dims.width});
    return f;
}

TextFeatures encode_text(const FrozenEncoders& enc, const TokenBatch& tokens) {
    if (tokens.length != enc.caption_len) throw ContractError("encode_text: caption length mismatch");
    const std::size_t b = tokens.batch, len = tokens.length, d = enc.dims.width;
    TextFeatures out;
    out.mask = tokens.mask();
    for (std::size_t i = 0; i < b; ++i)
        if (out.mask.count(i) == 0) throw ContractError("encode_text: empty caption (all pad)");

    std::vector<double> emb(b * len * d), with_pos(b * len * d);
    auto table = enc.text.token_table.data();
    auto pos = enc.text.positions.data();
    for (std::size_t i = 0; i < b * len; ++i) {
        const TokenId t = tokens.ids[i];
        if (t >= enc.vocab) throw ContractError("encode_text: token id " + std::to_string(t) + " outside vocabulary");
        for (std::size_t j = 0; j < d; ++j) {
            emb[i * d + j] = table[t * d + j];
            with_pos[i * d + j] = t == kPadToken ? 0.0 : table[t * d + j] + pos[(i % len) * d + j];
        }
    }
    Tensor raw({b, len, d}, std::move(emb));
    Tensor x({b, len, d}, std::move(with_pos));
    auto h = layer_norm(x, enc.text.ln_gain, enc.text.ln_bias);
    auto att = attention(linear(h, enc.text.wq), linear(h, enc.text.wk), linear(h, enc.text.wv), &out.mask);
    out.patches = mask_rows(add(x, linear(att, enc.text.wo)), out.mask);
    out.cls = linear(masked_mean(raw, out.mask), enc.text.cls_proj);
    return out;
}

Tensor encode_image(const FrozenEncoders& enc, const Tensor& images) {
    if (images.rank() != 2 || images.dim(1) != enc.d_x)
        throw ContractError("encode_image: images must be [B, " + std::to_string(enc.d_x) + "], got " +
                            shape_str(images.shape()));
    return linear(images, enc.image.proj, enc.image.bias);
}

}  // namespace fuseclip
