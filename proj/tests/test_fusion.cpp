#include <cmath>
#include <cstring>
#include <set>

#include "doctest.h"
#include "support.hpp"

#include "fuseclip/fusion.hpp"
#include "fuseclip/losses.hpp"

using namespace fuseclip;

namespace {

struct Fixture {
    World world{test::tiny_world_config()};
    std::shared_ptr<const FrozenEncoders> frozen = build_frozen_encoders(world, test::tiny_encoder_config());

    TokenBatch captions(std::size_t n, std::uint64_t seed) const {
        Rng rng(seed);
        std::vector<std::vector<TokenId>> caps;
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<std::size_t> slots;
            for (auto v : world.config().vocab_sizes) slots.push_back(rng.uniform_index(v));
            caps.push_back(caption_of(world, world.attribute(slots), rng.uniform_index(world.templates().size())));
        }
        return TokenBatch::from_captions(caps);
    }
    Tensor references(std::size_t n, std::uint64_t seed) const {
        Rng rng(seed);
        std::vector<std::vector<double>> refs;
        for (std::size_t i = 0; i < n; ++i)
            refs.push_back(render_reference(world, world.identity(rng.uniform_index(world.n_identities())),
                                            rng.next_u64()));
        return rows_to_tensor(refs);
    }
};

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::size_t i = 0; i < a.numel(); ++i)
        if (std::memcmp(&a.data()[i], &b.data()[i], sizeof(double)) != 0) return false;
    return true;
}

}  // namespace

TEST_CASE("freshly initialized encoder output is bitwise independent of the reference") {
    Fixture f;
    FaceClipEncoder enc(f.frozen, 5);
    const auto tokens = f.captions(4, 1);
    const auto zeros = Tensor::zeros({4, f.world.config().d_face});
    const auto base = enc.encode(tokens, zeros);
    for (std::uint64_t trial = 0; trial < 25; ++trial)  // 25 batches of 4 = 100 references
        CHECK(bitwise_equal(enc.encode(tokens, f.references(4, 100 + trial)), base));
}

TEST_CASE("randomized output projections make the reference matter") {
    Fixture f;
    FaceClipEncoder enc(f.frozen, 5);
    enc.randomize_output_projections(9, 0.2);
    const auto tokens = f.captions(2, 1);
    const auto a = enc.encode(tokens, f.references(2, 1));
    const auto b = enc.encode(tokens, f.references(2, 2));
    CHECK_FALSE(bitwise_equal(a, b));
}

TEST_CASE("encoder parameters are uniquely named and hashed") {
    Fixture f;
    FaceClipEncoder a(f.frozen, 1), b(f.frozen, 1), c(f.frozen, 2);
    std::set<std::string> names;
    for (const auto& p : a.parameters()) {
        CHECK(p.name.rfind("encoder.", 0) == 0);
        CHECK(p.tensor.requires_grad());
        names.insert(p.name);
    }
    CHECK(names.size() == a.parameters().size());
    CHECK(a.hash() == b.hash());
    CHECK(a.hash() != c.hash());
}

TEST_CASE("pad positions of the joint embedding are zero") {
    Fixture f;
    FaceClipEncoder enc(f.frozen, 3);
    enc.randomize_output_projections(4, 0.2);
    const auto tokens = f.captions(3, 7);
    const auto e = enc.encode(tokens, f.references(3, 7));
    const Mask m = tokens.mask();
    const std::size_t d = enc.dims().width;
    for (std::size_t b = 0; b < tokens.batch; ++b)
        for (std::size_t i = 0; i < tokens.length; ++i)
            if (!m(b, i))
                for (std::size_t k = 0; k < d; ++k) CHECK(e.at((b * tokens.length + i) * d + k) == 0.0);
}

TEST_CASE("sequential and parallel DCA differ once the fusion is active") {
    Fixture f;
    // With one block the face-stream update never reaches the text output.
    auto dims = test::tiny_encoder_config();
    dims.blocks = 2;
    auto frozen_par = build_frozen_encoders(f.world, dims);
    dims.sequential_dca = true;
    auto frozen_seq = build_frozen_encoders(f.world, dims);
    FaceClipEncoder par(frozen_par, 3), seq(frozen_seq, 3);
    par.randomize_output_projections(4, 0.3);
    seq.randomize_output_projections(4, 0.3);
    const auto tokens = f.captions(2, 3);
    const auto refs = f.references(2, 3);
    CHECK_FALSE(bitwise_equal(par.encode(tokens, refs), seq.encode(tokens, refs)));
}

TEST_CASE("encoder plus alignment loss passes finite differences") {
    Fixture f;
    FaceClipEncoder enc(f.frozen, 11);
    enc.randomize_output_projections(12, 0.3);
    const std::size_t b = 4;
    const auto tokens = f.captions(b, 2);
    const auto refs = f.references(b, 2);
    const auto text = encode_text(*f.frozen, tokens);
    const auto face = encode_face(*f.frozen, refs);
    const auto image = test::random_tensor({b, f.frozen->dims.text_dim}, 3, 1.0, false);
    AlignmentLossConfig cfg;
    cfg.temperature = 0.5;
    const std::vector<std::uint8_t> guided{0, 1, 0, 0};
    auto loss = [&] {
        auto e = enc.fuse(text.patches, face.patches, text.mask);
        return alignment_loss(cfg, enc.project_to_text(e, text.mask), enc.project_to_face(e, text.mask), image,
                              face.cls, text.cls, guided)
            .total;
    };
    std::vector<Tensor> leaves;
    for (const auto& p : enc.parameters()) leaves.push_back(p.tensor);
    const auto r = test::grad_check(loss, leaves, 1e-5, 6);
    INFO("coordinates checked: " << r.checked);
    CHECK(r.rel_error < 1e-5);
}
