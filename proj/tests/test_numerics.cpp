#include <cmath>

#include "doctest.h"
#include "support.hpp"

#include "fuseclip/errors.hpp"
#include "fuseclip/optim.hpp"
#include "fuseclip/tensor.hpp"

using namespace fuseclip;
using fuseclip::test::grad_check;
using fuseclip::test::random_tensor;
using fuseclip::test::weighted_sum;

namespace {

constexpr double kTol = 1e-5;

Mask ragged_mask(std::size_t b, std::size_t l) {
    Mask m(b, l);
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = l - (i % l); j < l; ++j) m.valid[i * l + j] = 0;
    m.valid[0] = 1;
    return m;
}

}  // namespace

TEST_CASE("elementwise ops pass finite differences") {
    auto a = random_tensor({3, 4}, 1);
    auto b = random_tensor({3, 4}, 2);
    auto row = random_tensor({4}, 3);
    auto s = random_tensor({1}, 4);
    CHECK(grad_check([&] { return weighted_sum(add(a, b)); }, {a, b}).rel_error < kTol);
    CHECK(grad_check([&] { return weighted_sum(sub(a, b)); }, {a, b}).rel_error < kTol);
    CHECK(grad_check([&] { return weighted_sum(mul(a, b)); }, {a, b}).rel_error < kTol);
    CHECK(grad_check([&] { return weighted_sum(scale(a, -1.7)); }, {a}).rel_error < kTol);
    CHECK(grad_check([&] { return weighted_sum(mul_scalar(a, s)); }, {a, s}).rel_error < kTol);
    CHECK(grad_check([&] { return weighted_sum(add_row(a, row)); }, {a, row}).rel_error < kTol);
    CHECK(grad_check([&] { return weighted_sum(exp(scale(a, 0.5))); }, {a}).rel_error < kTol);
    CHECK(grad_check([&] { return weighted_sum(tanh(a)); }, {a}).rel_error < kTol);
    CHECK(grad_check([&] { return weighted_sum(gelu(a)); }, {a}).rel_error < kTol);
}

TEST_CASE("reductions pass finite differences") {
    auto a = random_tensor({2, 3, 2}, 5);
    auto b = random_tensor({2, 3, 2}, 6);
    CHECK(grad_check([&] { return sum(mul(a, a)); }, {a}).rel_error < kTol);
    CHECK(grad_check([&] { return scale(mean(mul(a, b)), 3.0); }, {a, b}).rel_error < kTol);
    CHECK(grad_check([&] { return mse(a, b); }, {a, b}).rel_error < kTol);
}

TEST_CASE("linear algebra passes finite differences") {
    auto a = random_tensor({3, 4}, 7);
    auto w = random_tensor({4, 5}, 8);
    auto bias = random_tensor({5}, 9);
    auto x3 = random_tensor({2, 3, 4}, 10);
    auto p = random_tensor({2, 3, 4}, 11);
    auto q = random_tensor({2, 4, 5}, 12);
    auto r = random_tensor({2, 5, 4}, 13);
    CHECK(grad_check([&] { return weighted_sum(matmul(a, w)); }, {a, w}).rel_error < kTol);
    CHECK(grad_check([&] { return weighted_sum(transpose(a)); }, {a}).rel_error < kTol);
    CHECK(grad_check([&] { return weighted_sum(linear(x3, w)); }, {x3, w}).rel_error < kTol);
    CHECK(grad_check([&] { return weighted_sum(linear(x3, w, bias)); }, {x3, w, bias}).rel_error < kTol);
    CHECK(grad_check([&] { return weighted_sum(bmm(p, q)); }, {p, q}).rel_error < kTol);
    CHECK(grad_check([&] { return weighted_sum(bmm_nt(p, r)); }, {p, r}).rel_error < kTol);
}

TEST_CASE("normalization and probability ops pass finite differences") {
    auto x = random_tensor({3, 5}, 14);
    auto x3 = random_tensor({2, 3, 4}, 15);
    auto gain = random_tensor({4}, 16);
    auto bias = random_tensor({4}, 17);
    const std::vector<std::size_t> targets{4, 0, 2};
    const Mask km = ragged_mask(2, 4);
    CHECK(grad_check([&] { return weighted_sum(softmax(x, 1)); }, {x}).rel_error < kTol);
    CHECK(grad_check([&] { return weighted_sum(softmax(x, 0)); }, {x}).rel_error < kTol);
    CHECK(grad_check([&] { return weighted_sum(softmax(x3, 2)); }, {x3}).rel_error < kTol);
    CHECK(grad_check([&] { return weighted_sum(masked_softmax(x3, km)); }, {x3}).rel_error < kTol);
    CHECK(grad_check([&] { return weighted_sum(layer_norm(x3, gain, bias)); }, {x3, gain, bias}).rel_error < kTol);
    CHECK(grad_check([&] { return weighted_sum(l2_normalize_rows(x)); }, {x}).rel_error < kTol);
    CHECK(grad_check([&] { return cross_entropy(x, targets); }, {x}).rel_error < kTol);
}

TEST_CASE("sequence helpers and attention pass finite differences") {
    auto x = random_tensor({2, 4, 6}, 18);
    auto q = random_tensor({2, 3, 6}, 19);
    auto k = random_tensor({2, 4, 6}, 20);
    auto v = random_tensor({2, 4, 5}, 21);
    auto sq = random_tensor({3, 6}, 22);
    auto sk = random_tensor({4, 6}, 23);
    auto sv = random_tensor({4, 2}, 24);
    auto rows = random_tensor({5, 3}, 25);
    const Mask mask = ragged_mask(2, 4);
    const std::vector<std::size_t> pick{4, 1, 1, 0};
    CHECK(grad_check([&] { return weighted_sum(masked_mean(x, mask)); }, {x}).rel_error < kTol);
    CHECK(grad_check([&] { return weighted_sum(mask_rows(x, mask)); }, {x}).rel_error < kTol);
    CHECK(grad_check([&] { return weighted_sum(select_rows(rows, pick)); }, {rows}).rel_error < kTol);
    CHECK(grad_check([&] { return weighted_sum(split_heads(x, 3)); }, {x}).rel_error < kTol);
    CHECK(grad_check([&] { return weighted_sum(merge_heads(split_heads(x, 2), 2)); }, {x}).rel_error < kTol);
    CHECK(grad_check([&] { return weighted_sum(scaled_dot_attention(sq, sk, sv)); }, {sq, sk, sv}).rel_error < kTol);
    CHECK(grad_check([&] { return weighted_sum(attention(q, k, v, &mask)); }, {q, k, v}).rel_error < kTol);
    CHECK(grad_check([&] { return weighted_sum(attention(q, k, v)); }, {q, k, v}).rel_error < kTol);
}

TEST_CASE("reused inputs accumulate their gradient contributions") {
    auto a = random_tensor({2, 3}, 26);
    auto f = [&] { return sum(mul(tanh(a), add(a, exp(scale(a, 0.3))))); };
    CHECK(grad_check(f, {a}).rel_error < kTol);
}

TEST_CASE("matmul, softmax and attention agree with explicit loops") {
    auto a = random_tensor({3, 4}, 30, 1.0, false);
    auto b = random_tensor({4, 2}, 31, 1.0, false);
    auto c = matmul(a, b);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < 4; ++k) s += a.at(i * 4 + k) * b.at(k * 2 + j);
            CHECK(c.at(i * 2 + j) == doctest::Approx(s).epsilon(1e-14));
        }

    auto x = random_tensor({2, 5}, 32, 3.0, false);
    auto sm = softmax(x, 1);
    for (std::size_t i = 0; i < 2; ++i) {
        double z = 0.0;
        for (std::size_t j = 0; j < 5; ++j) z += std::exp(x.at(i * 5 + j));
        for (std::size_t j = 0; j < 5; ++j) CHECK(sm.at(i * 5 + j) == doctest::Approx(std::exp(x.at(i * 5 + j)) / z));
    }

    // attention vs a direct loop: out_i = sum_j softmax_j(q_i.k_j / sqrt(d)) v_j over valid keys
    const std::size_t B = 2, M = 3, N = 4, D = 5, E = 2;
    auto q = random_tensor({B, M, D}, 33, 1.0, false);
    auto k = random_tensor({B, N, D}, 34, 1.0, false);
    auto v = random_tensor({B, N, E}, 35, 1.0, false);
    const Mask mask = ragged_mask(B, N);
    auto out = attention(q, k, v, &mask);
    for (std::size_t bb = 0; bb < B; ++bb)
        for (std::size_t i = 0; i < M; ++i) {
            std::vector<double> w(N, 0.0);
            double z = 0.0;
            for (std::size_t j = 0; j < N; ++j) {
                if (!mask(bb, j)) continue;
                double s = 0.0;
                for (std::size_t t = 0; t < D; ++t) s += q.at((bb * M + i) * D + t) * k.at((bb * N + j) * D + t);
                w[j] = std::exp(s / std::sqrt(static_cast<double>(D)));
                z += w[j];
            }
            for (std::size_t e = 0; e < E; ++e) {
                double o = 0.0;
                for (std::size_t j = 0; j < N; ++j) o += w[j] / z * v.at((bb * N + j) * E + e);
                CHECK(out.at((bb * M + i) * E + e) == doctest::Approx(o).epsilon(1e-12));
            }
        }
}

TEST_CASE("layer norm and cross entropy agree with explicit loops") {
    auto x = random_tensor({2, 6}, 40, 2.0, false);
    auto gain = random_tensor({6}, 41, 1.0, false);
    auto bias = random_tensor({6}, 42, 1.0, false);
    auto y = layer_norm(x, gain, bias);
    for (std::size_t r = 0; r < 2; ++r) {
        double mu = 0.0, var = 0.0;
        for (std::size_t i = 0; i < 6; ++i) mu += x.at(r * 6 + i) / 6.0;
        for (std::size_t i = 0; i < 6; ++i) var += (x.at(r * 6 + i) - mu) * (x.at(r * 6 + i) - mu) / 6.0;
        for (std::size_t i = 0; i < 6; ++i)
            CHECK(y.at(r * 6 + i) ==
                  doctest::Approx((x.at(r * 6 + i) - mu) / std::sqrt(var + 1e-5) * gain.at(i) + bias.at(i)));
    }
    auto logits = random_tensor({3, 4}, 43, 1.0, false);
    const std::vector<std::size_t> t{1, 3, 0};
    double expect = 0.0;
    for (std::size_t r = 0; r < 3; ++r) {
        double z = 0.0;
        for (std::size_t j = 0; j < 4; ++j) z += std::exp(logits.at(r * 4 + j));
        expect += (std::log(z) - logits.at(r * 4 + t[r])) / 3.0;
    }
    CHECK(cross_entropy(logits, t).item() == doctest::Approx(expect).epsilon(1e-13));
}

TEST_CASE("softmax and cross entropy stay finite for extreme logits") {
    Tensor big({1, 3}, {1000.0, 1001.0, 999.0});
    auto p = softmax(big, 1);
    for (double v : p.data()) CHECK(std::isfinite(v));
    const double z = std::exp(-1.0) + 1.0 + std::exp(-2.0);
    CHECK(p.at(1) == doctest::Approx(1.0 / z));
    Tensor neg({1, 3}, {-1000.0, -1001.0, -999.0});
    const std::vector<std::size_t> t{0};
    CHECK(std::isfinite(cross_entropy(neg, t).item()));
    CHECK(cross_entropy(neg, t).item() == doctest::Approx(1.0 + std::log(z)));
}

TEST_CASE("fully masked keys are rejected rather than producing NaN") {
    auto q = random_tensor({1, 2, 3}, 50, 1.0, false);
    auto k = random_tensor({1, 2, 3}, 51, 1.0, false);
    Mask none(1, 2, 0);
    CHECK_THROWS(attention(q, k, k, &none));
}

TEST_CASE("shape mismatches raise DimensionError") {
    auto a = random_tensor({2, 3}, 60, 1.0, false);
    auto b = random_tensor({2, 4}, 61, 1.0, false);
    CHECK_THROWS_AS(add(a, b), DimensionError);
    CHECK_THROWS_AS(matmul(a, a), DimensionError);
    CHECK_THROWS_AS(bmm(a, b), DimensionError);
}

TEST_CASE("untracked inputs record no tape") {
    auto a = random_tensor({2, 2}, 70, 1.0, false);
    auto y = matmul(a, a);
    CHECK_FALSE(y.requires_grad());
    CHECK(y.node()->inputs.empty());
}

TEST_CASE("leaf gradients accumulate across backward calls") {
    auto a = random_tensor({3}, 80);
    backward(sum(mul(a, a)));
    const std::vector<double> once(a.grad().begin(), a.grad().end());
    backward(sum(mul(a, a)));
    for (std::size_t i = 0; i < 3; ++i) CHECK(a.grad()[i] == doctest::Approx(2.0 * once[i]));
    a.zero_grad();
    CHECK_FALSE(a.has_grad());
}

TEST_CASE("gradient clipping rescales to the global norm") {
    auto a = random_tensor({4}, 90);
    ParamList params{{"a", a}};
    auto g = a.mutable_grad();
    g[0] = 3.0;
    g[1] = 4.0;
    g[2] = 0.0;
    g[3] = 0.0;
    CHECK(clip_grad_norm(params, 1.0) == doctest::Approx(5.0));
    CHECK(a.grad()[0] == doctest::Approx(0.6));
    CHECK(a.grad()[1] == doctest::Approx(0.8));
    CHECK(clip_grad_norm(params, 10.0) == doctest::Approx(1.0));
    CHECK(a.grad()[1] == doctest::Approx(0.8));
}

TEST_CASE("AdamW first step moves each weight by about the learning rate") {
    Tensor w({2}, {1.0, -2.0}, true);
    ParamList params{{"w", w}};
    auto g = w.mutable_grad();
    g[0] = 0.5;
    g[1] = -3.0;
    OptimizerState st;
    st.learning_rate = 0.1;
    st.weight_decay = 0.0;
    optimizer_step(params, st);
    CHECK(w.at(0) == doctest::Approx(0.9).epsilon(1e-6));
    CHECK(w.at(1) == doctest::Approx(-1.9).epsilon(1e-6));
    CHECK_FALSE(w.has_grad());
    CHECK(st.step == 1);
}

TEST_CASE("content hash reacts to values and names") {
    auto a = random_tensor({3}, 100, 1.0, false);
    ParamList p{{"a", a}};
    const auto h = content_hash(p);
    ParamList renamed{{"b", a}};
    CHECK(content_hash(renamed) != h);
    a.mutable_data()[1] += 1e-12;
    CHECK(content_hash(p) != h);
}

TEST_CASE("rng draws are reproducible and derive_seed separates streams") {
    Rng a(5), b(5);
    for (int i = 0; i < 100; ++i) CHECK(a.normal() == b.normal());
    CHECK(derive_seed(1, 0) != derive_seed(1, 1));
    CHECK(derive_seed(1, 0) != derive_seed(2, 0));
    Rng c(9);
    const auto state = c.serialize();
    const double x = c.uniform();
    Rng d;
    d.deserialize(state);
    CHECK(d.uniform() == x);
    Rng e(3);
    std::vector<int> counts(7, 0);
    for (int i = 0; i < 7000; ++i) ++counts[e.uniform_index(7)];
    for (int n : counts) CHECK(std::abs(n - 1000) < 150);
}
