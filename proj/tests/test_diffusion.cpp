#include <cmath>

#include "doctest.h"
#include "support.hpp"

#include "fuseclip/diffusion.hpp"
#include "fuseclip/errors.hpp"

using namespace fuseclip;
using test::random_tensor;

namespace {

Condition random_condition(std::size_t b, std::size_t len, std::size_t d, std::uint64_t seed) {
    Mask m(b, len);
    for (std::size_t i = 0; i < b; ++i) m.valid[i * len + len - 1] = 0;
    return Condition{random_tensor({b, len, d}, seed, 1.0, false), m};
}

}  // namespace

TEST_CASE("cosine schedule is a proper decreasing signal level") {
    const auto s = NoiseSchedule::cosine(100);
    REQUIRE(s.steps() == 100);
    CHECK(s.alpha_bar[0] == 1.0);
    CHECK(s.beta[0] == 0.0);
    for (std::size_t t = 1; t <= 100; ++t) {
        CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
        CHECK(s.beta[t] > 0.0);
        CHECK(s.beta[t] <= 0.999);
        CHECK(s.alpha_bar[t] == doctest::Approx(s.alpha_bar[t - 1] * (1.0 - s.beta[t])).epsilon(1e-12));
    }
    CHECK(s.alpha_bar[100] < 1e-3);
}

TEST_CASE("noising is exact at the end points of the signal level") {
    const auto s = NoiseSchedule::from_alpha_bar({1.0, 1.0, 0.0});
    auto x0 = random_tensor({3, 5}, 1, 1.0, false);
    auto eps = random_tensor({3, 5}, 2, 1.0, false);
    const std::vector<std::size_t> clean{1, 1, 1}, pure{2, 2, 2};
    const auto a = ddpm_noising(x0, clean, eps, s);
    const auto b = ddpm_noising(x0, pure, eps, s);
    for (std::size_t i = 0; i < x0.numel(); ++i) {
        CHECK(a.at(i) == x0.at(i));
        CHECK(b.at(i) == eps.at(i));
    }
}

TEST_CASE("noised energy follows the interpolation formula") {
    const auto s = NoiseSchedule::cosine(50);
    const std::size_t n = 10000, d = 8;
    auto x0 = random_tensor({1, d}, 3, 2.0, false);
    double x0_sq = 0.0;
    for (double v : x0.data()) x0_sq += v * v;
    Rng rng(4);
    for (std::size_t t : {std::size_t{5}, std::size_t{25}, std::size_t{45}}) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            Tensor eps({1, d}, rng.normal_vector(d));
            const std::vector<std::size_t> tt{t};
            const auto xt = ddpm_noising(x0, tt, eps, s);
            for (double v : xt.data()) acc += v * v;
        }
        const double expect = s.alpha_bar[t] * x0_sq + (1.0 - s.alpha_bar[t]) * static_cast<double>(d);
        CHECK(std::abs(acc / n - expect) / expect < 0.05);
    }
}

TEST_CASE("noising gradient flows to x0") {
    const auto s = NoiseSchedule::cosine(10);
    auto x0 = random_tensor({2, 3}, 5);
    auto eps = random_tensor({2, 3}, 6, 1.0, false);
    const std::vector<std::size_t> t{3, 7};
    CHECK(test::grad_check([&] { return test::weighted_sum(ddpm_noising(x0, t, eps, s)); }, {x0}).rel_error < 1e-5);
}

TEST_CASE("zero-initialized denoiser predicts zeros, so the first loss is about one") {
    const std::size_t b = 64, dx = 64;
    Denoiser den(DenoiserConfig{}, dx, 16, 7);
    const auto cond = random_condition(b, 6, 16, 8);
    auto x0 = random_tensor({b, dx}, 9, 1.0, false);
    const std::vector<std::size_t> t(b, 10);
    const auto pred = den.forward(x0, t, cond);
    for (double v : pred.data()) CHECK(v == 0.0);
    Rng rng(10);
    const double loss = diffusion_loss(den.predictor(), x0, cond, NoiseSchedule::cosine(100), rng).item();
    CHECK(std::abs(loss - 1.0) < 0.06);  // mean of 4096 chi-square(1) draws: sd ~ 0.022
}

TEST_CASE("denoiser gradients pass finite differences") {
    Denoiser den(DenoiserConfig{16, 8, 2, 8, 1}, 6, 8, 11);
    // Move the zero output head so every path carries gradient.
    auto params = den.parameters();
    Rng rng(12);
    for (auto& p : params)
        if (p.name.find("out") != std::string::npos)
            for (auto& v : p.tensor.mutable_data()) v = 0.3 * rng.normal();
    const auto cond = random_condition(3, 4, 8, 13);
    auto x = random_tensor({3, 6}, 14, 1.0, false);
    const std::vector<std::size_t> t{1, 5, 9};
    std::vector<Tensor> leaves;
    for (auto& p : params) leaves.push_back(p.tensor);
    auto f = [&] { return test::weighted_sum(den.forward(x, t, cond)); };
    CHECK(test::grad_check(f, leaves, 1e-5, 8).rel_error < 1e-5);
}

TEST_CASE("the conditioning sequence reaches the prediction") {
    Denoiser den(DenoiserConfig{16, 8, 2, 8, 1}, 6, 8, 11);
    auto params = den.parameters();
    Rng rng(12);
    for (auto& p : params)
        if (p.name.find("out") != std::string::npos)
            for (auto& v : p.tensor.mutable_data()) v = 0.3 * rng.normal();
    auto x = random_tensor({2, 6}, 14, 1.0, false);
    const std::vector<std::size_t> t{3, 3};
    const auto a = den.forward(x, t, random_condition(2, 4, 8, 1));
    const auto b = den.forward(x, t, random_condition(2, 4, 8, 2));
    double diff = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) diff += std::abs(a.at(i) - b.at(i));
    CHECK(diff > 1e-6);
}

TEST_CASE("timestep features are bounded and distinguish steps") {
    const std::vector<std::size_t> t{1, 2, 50};
    const auto f = timestep_features(t, 16);
    for (double v : f.data()) CHECK(std::abs(v) <= 1.0);
    double d12 = 0.0;
    for (std::size_t i = 0; i < 16; ++i) d12 += std::abs(f.at(i) - f.at(16 + i));
    CHECK(d12 > 1e-3);
}

TEST_CASE("ancestral sampling with an oracle predictor recovers a point mass") {
    // If every x0 equals c, the ideal epsilon prediction is (x_t - sqrt(ab) c) / sqrt(1 - ab).
    const auto s = NoiseSchedule::cosine(60);
    const std::vector<double> c{1.5, -0.5, 0.25};
    EpsilonPredictor oracle = [&](const Tensor& x_t, std::span<const std::size_t> t, const Condition&) {
        std::vector<double> out(x_t.numel());
        for (std::size_t r = 0; r < t.size(); ++r) {
            const double ab = s.alpha_bar[t[r]];
            for (std::size_t k = 0; k < 3; ++k)
                out[r * 3 + k] = (x_t.at(r * 3 + k) - std::sqrt(ab) * c[k]) / std::sqrt(1.0 - ab);
        }
        return Tensor(x_t.shape(), std::move(out));
    };
    Rng rng(15);
    const auto cond = random_condition(4, 2, 2, 16);
    const auto x = ddpm_sample(oracle, cond, s, rng, 3);
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t k = 0; k < 3; ++k) CHECK(x.at(r * 3 + k) == doctest::Approx(c[k]).epsilon(1e-6));
}

TEST_CASE("sampling is seed deterministic") {
    Denoiser den(DenoiserConfig{16, 8, 2, 8, 1}, 6, 8, 11);
    const auto s = NoiseSchedule::cosine(20);
    const auto cond = random_condition(2, 4, 8, 1);
    Rng a(5), b(5);
    const auto xa = ddpm_sample(den.predictor(), cond, s, a, 6);
    const auto xb = ddpm_sample(den.predictor(), cond, s, b, 6);
    for (std::size_t i = 0; i < xa.numel(); ++i) CHECK(xa.at(i) == xb.at(i));
}
