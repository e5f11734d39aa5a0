#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "fuseclip/config.hpp"
#include "fuseclip/rng.hpp"
#include "fuseclip/tensor.hpp"
#include "fuseclip/world.hpp"

namespace fuseclip::test {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double sd = 1.0, bool track = true) {
    Rng rng(seed);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = sd * rng.normal();
    return Tensor(std::move(shape), std::move(v), track);
}

// Collapses a tensor to a scalar with fixed random weights so every entry of
// the output contributes a distinct gradient.
inline Tensor weighted_sum(const Tensor& y, std::uint64_t seed = 99) {
    return sum(mul(y, random_tensor(y.shape(), seed, 1.0, false)));
}

struct GradCheck {
    double rel_error = 0.0;
    std::size_t checked = 0;
};

// Central differences against reverse mode. The error is
// |g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|) on the stacked
// gradient vector. At most `per_leaf` coordinates of each leaf are probed.
inline GradCheck grad_check(const std::function<Tensor()>& f, std::vector<Tensor> leaves, double h = 1e-5,
                            std::size_t per_leaf = 0, std::uint64_t seed = 1) {
    for (auto& l : leaves) l.zero_grad();
    backward(f());
    std::vector<double> analytic, numeric;
    Rng rng(seed);
    for (auto& leaf : leaves) {
        std::vector<std::size_t> idx(leaf.numel());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        if (per_leaf > 0 && idx.size() > per_leaf) {
            for (std::size_t i = 0; i < per_leaf; ++i) std::swap(idx[i], idx[i + rng.uniform_index(idx.size() - i)]);
            idx.resize(per_leaf);
        }
        const std::vector<double> g(leaf.grad().begin(), leaf.grad().end());
        for (auto i : idx) {
            auto data = leaf.mutable_data();
            const double orig = data[i];
            data[i] = orig + h;
            const double up = f().item();
            data[i] = orig - h;
            const double down = f().item();
            data[i] = orig;
            analytic.push_back(g.empty() ? 0.0 : g[i]);
            numeric.push_back((up - down) / (2.0 * h));
        }
    }
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
        na += analytic[i] * analytic[i];
        nn += numeric[i] * numeric[i];
    }
    const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
    return {std::sqrt(diff) / denom, analytic.size()};
}

// A world small enough for exhaustive checks.
inline WorldConfig tiny_world_config() {
    WorldConfig w;
    w.n_identities = 4;
    w.d_id = 4;
    w.vocab_sizes = {6, 2};
    w.code_dim = 3;
    w.main_slot0_values = 3;
    w.d_x = 16;
    w.d_face = 10;
    w.ref_nuisance_dim = 2;
    w.caption_len = 8;
    return w;
}

inline EncoderConfig tiny_encoder_config() {
    EncoderConfig e;
    e.width = 16;
    e.text_dim = 8;
    e.face_dim = 6;
    e.face_patches = 2;
    e.face_hidden = 8;
    e.blocks = 1;
    e.heads = 2;
    return e;
}

// Small but complete run config for quick training tests.
inline RunConfig quick_run_config() {
    RunConfig c;
    c.world = tiny_world_config();
    c.encoder = tiny_encoder_config();
    c.data.n_main = 200;
    c.data.n_guided = 200;
    c.pretrain.batch = 16;
    c.pretrain.steps = 20;
    c.pretrain.log_every = 5;
    c.pretrain.checkpoint_every = 10;
    c.diffusion.batch = 16;
    c.diffusion.steps = 20;
    c.diffusion.log_every = 5;
    c.diffusion.checkpoint_every = 10;
    c.diffusion.schedule_steps = 20;
    c.diffusion.denoiser = DenoiserConfig{32, 16, 2, 8, 1};
    c.eval.n_zero_shot = 100;
    c.eval.n_ids = 4;
    c.eval.n_per_id = 5;
    c.eval.n_generate = 20;
    c.eval.n_bootstrap = 200;
    return c;
}

}  // namespace fuseclip::test
