#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "fuseclip/optim.hpp"
#include "fuseclip/rng.hpp"
#include "fuseclip/tensor.hpp"

namespace fuseclip {

// Cumulative signal levels alpha_bar[t] for t = 0..T, with alpha_bar[0] = 1.
struct NoiseSchedule {
    std::vector<double> alpha_bar;
    std::vector<double> beta;  // beta[0] = 0

    std::size_t steps() const { return alpha_bar.size() - 1; }
    static NoiseSchedule cosine(std::size_t steps, double offset = 0.008, double max_beta = 0.999);
    static NoiseSchedule from_alpha_bar(std::vector<double> alpha_bar);
};

// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps, one t per row of [B, d].
Tensor ddpm_noising(const Tensor& x0, std::span<const std::size_t> t, const Tensor& eps, const NoiseSchedule& schedule);

// Conditioning sequence consumed by the denoiser.
struct Condition {
    Tensor e;  // [B, L, d_c]
    Mask mask;
};

using EpsilonPredictor = std::function<Tensor(const Tensor& x_t, std::span<const std::size_t> t, const Condition&)>;

// Draws t ~ U{1..T} per row, then eps ~ N(0, I) row-major, and returns
// mean((eps - predictor(x_t, t, e))^2).
Tensor diffusion_loss(const EpsilonPredictor& predictor, const Tensor& x0, const Condition& cond,
                      const NoiseSchedule& schedule, Rng& rng);

// Ancestral sampling from x_T ~ N(0, I) down to x_0 with posterior variance
// beta_tilde_t = (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t.
Tensor ddpm_sample(const EpsilonPredictor& predictor, const Condition& cond, const NoiseSchedule& schedule, Rng& rng,
                   std::size_t d_x);

struct DenoiserConfig {
    std::size_t hidden = 128;
    std::size_t attn_dim = 64;
    std::size_t heads = 4;
    std::size_t time_dim = 32;
    std::size_t blocks = 2;
    bool operator==(const DenoiserConfig&) const = default;
};

// epsilon_phi(x_t, t, e): time embedding, one cross-attention read of e from
// the hidden state, a residual MLP trunk, and a zero-initialized output head.
class Denoiser {
public:
    Denoiser(const DenoiserConfig& cfg, std::size_t d_x, std::size_t d_cond, std::uint64_t init_seed);

    Tensor forward(const Tensor& x_t, std::span<const std::size_t> t, const Condition& cond) const;
    EpsilonPredictor predictor() const;
    ParamList parameters() const;
    const DenoiserConfig& config() const { return cfg_; }

private:
    struct Block {
        Tensor norm_gain, norm_bias, w1, b1, w2, b2;
    };
    DenoiserConfig cfg_;
    std::size_t d_x_, d_cond_;
    Tensor time_w1_, time_b1_, time_w2_, time_b2_;
    Tensor in_w_, in_b_;
    Tensor q_norm_gain_, q_norm_bias_, wq_, wk_, wv_, wo_, bo_;
    std::vector<Block> blocks_;
    Tensor out_norm_gain_, out_norm_bias_, out_w_, out_b_;
};

Tensor timestep_features(std::span<const std::size_t> t, std::size_t dim);

}  // namespace fuseclip
