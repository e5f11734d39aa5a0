#include "fuseclip/diffusion.hpp"

#include <cmath>

#include "fuseclip/errors.hpp"

namespace fuseclip {

NoiseSchedule NoiseSchedule::cosine(std::size_t steps, double offset, double max_beta) {
    if (steps == 0) throw ConfigError("noise schedule needs at least one step");
    auto f = [&](double t) {
        const double c = std::cos((t / static_cast<double>(steps) + offset) / (1.0 + offset) * 1.5707963267948966);
        return c * c;
    };
    NoiseSchedule s;
    s.alpha_bar.assign(steps + 1, 1.0);
    s.beta.assign(steps + 1, 0.0);
    const double f0 = f(0.0);
    for (std::size_t t = 1; t <= steps; ++t) {
        const double ratio = (f(static_cast<double>(t)) / f0) / (f(static_cast<double>(t - 1)) / f0);
        s.beta[t] = std::min(1.0 - ratio, max_beta);
        s.alpha_bar[t] = s.alpha_bar[t - 1] * (1.0 - s.beta[t]);
    }
    return s;
}

NoiseSchedule NoiseSchedule::from_alpha_bar(std::vector<double> alpha_bar) {
    if (alpha_bar.size() < 2) throw ConfigError("schedule needs alpha_bar for t = 0..T with T >= 1");
    NoiseSchedule s;
    s.beta.assign(alpha_bar.size(), 0.0);
    for (std::size_t t = 1; t < alpha_bar.size(); ++t)
        s.beta[t] = alpha_bar[t - 1] > 0.0 ? 1.0 - alpha_bar[t] / alpha_bar[t - 1] : 1.0;
    s.alpha_bar = std::move(alpha_bar);
    return s;
}

Tensor ddpm_noising(const Tensor& x0, std::span<const std::size_t> t, const Tensor& eps, const NoiseSchedule& schedule) {
    if (x0.rank() != 2 || eps.shape() != x0.shape()) throw DimensionError("ddpm_noising: eps must match x0 [B, d]");
    if (t.size() != x0.dim(0)) throw DimensionError("ddpm_noising: one timestep per row required");
    const std::size_t d = x0.dim(1);
    std::vector<double> a(x0.numel()), s(x0.numel());
    for (std::size_t b = 0; b < t.size(); ++b) {
        if (t[b] > schedule.steps()) throw ContractError("ddpm_noising: timestep out of range");
        const double ab = schedule.alpha_bar[t[b]];
        std::fill_n(a.begin() + b * d, d, std::sqrt(ab));
        std::fill_n(s.begin() + b * d, d, std::sqrt(1.0 - ab));
    }
    return add(mul(x0, Tensor(x0.shape(), std::move(a))), mul(eps, Tensor(x0.shape(), std::move(s))));
}

Tensor diffusion_loss(const EpsilonPredictor& predictor, const Tensor& x0, const Condition& cond,
                      const NoiseSchedule& schedule, Rng& rng) {
    const std::size_t batch = x0.dim(0);
    std::vector<std::size_t> t(batch);
    for (auto& v : t) v = 1 + rng.uniform_index(schedule.steps());
    Tensor eps(x0.shape(), rng.normal_vector(x0.numel()));
    auto x_t = ddpm_noising(x0.detach(), t, eps, schedule);
    return mse(predictor(x_t, t, cond), eps);
}

Tensor ddpm_sample(const EpsilonPredictor& predictor, const Condition& cond, const NoiseSchedule& schedule, Rng& rng,
                   std::size_t d_x) {
    const std::size_t batch = cond.e.dim(0);
    std::vector<double> x = rng.normal_vector(batch * d_x);
    for (std::size_t step = schedule.steps(); step >= 1; --step) {
        std::vector<std::size_t> t(batch, step);
        Tensor xt({batch, d_x}, x);
        const Tensor eps_t = predictor(xt, t, cond);
        const auto eps = eps_t.data();
        const double beta = schedule.beta[step];
        const double ab = schedule.alpha_bar[step];
        const double ab_prev = schedule.alpha_bar[step - 1];
        const double coef = beta / std::sqrt(1.0 - ab);
        const double inv_sqrt_alpha = 1.0 / std::sqrt(1.0 - beta);
        const double sigma = step > 1 ? std::sqrt((1.0 - ab_prev) / (1.0 - ab) * beta) : 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = inv_sqrt_alpha * (x[i] - coef * eps[i]);
        if (step > 1)
            for (double& v : x) v += sigma * rng.normal();
    }
    return Tensor({batch, d_x}, std::move(x));
}

Tensor timestep_features(std::span<const std::size_t> t, std::size_t dim) {
    std::vector<double> v(t.size() * dim);
    const std::size_t half = dim / 2;
    for (std::size_t b = 0; b < t.size(); ++b)
        for (std::size_t i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
            v[b * dim + i] = std::sin(static_cast<double>(t[b]) * freq);
            v[b * dim + half + i] = std::cos(static_cast<double>(t[b]) * freq);
        }
    return Tensor({t.size(), dim}, std::move(v));
}

namespace {
Tensor gaussian_param(Rng& rng, Shape shape, double stddev) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), rng.normal_vector(n, stddev), true);
}
double fan_in(std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); }
}  // namespace

Denoiser::Denoiser(const DenoiserConfig& cfg, std::size_t d_x, std::size_t d_cond, std::uint64_t init_seed)
    : cfg_(cfg), d_x_(d_x), d_cond_(d_cond) {
    if (cfg.hidden < 2 || cfg.attn_dim == 0 || cfg.heads == 0 || cfg.attn_dim % cfg.heads != 0 || cfg.time_dim < 2 ||
        cfg.time_dim % 2 != 0)
        throw ConfigError("invalid denoiser dims");
    Rng rng(init_seed);
    const std::size_t h = cfg.hidden, a = cfg.attn_dim;
    time_w1_ = gaussian_param(rng, {cfg.time_dim, h}, fan_in(cfg.time_dim));
    time_b1_ = Tensor::zeros({h}, true);
    time_w2_ = gaussian_param(rng, {h, h}, fan_in(h));
    time_b2_ = Tensor::zeros({h}, true);
    in_w_ = gaussian_param(rng, {d_x, h}, fan_in(d_x));
    in_b_ = Tensor::zeros({h}, true);
    q_norm_gain_ = Tensor::full({h}, 1.0, true);
    q_norm_bias_ = Tensor::zeros({h}, true);
    wq_ = gaussian_param(rng, {h, a}, fan_in(h));
    wk_ = gaussian_param(rng, {d_cond, a}, fan_in(d_cond));
    wv_ = gaussian_param(rng, {d_cond, a}, fan_in(d_cond));
    wo_ = gaussian_param(rng, {a, h}, fan_in(a));
    bo_ = Tensor::zeros({h}, true);
    for (std::size_t i = 0; i < cfg.blocks; ++i) {
        Block b;
        b.norm_gain = Tensor::full({h}, 1.0, true);
        b.norm_bias = Tensor::zeros({h}, true);
        b.w1 = gaussian_param(rng, {h, 2 * h}, fan_in(h));
        b.b1 = Tensor::zeros({2 * h}, true);
        b.w2 = gaussian_param(rng, {2 * h, h}, fan_in(2 * h));
        b.b2 = Tensor::zeros({h}, true);
        blocks_.push_back(std::move(b));
    }
    out_norm_gain_ = Tensor::full({h}, 1.0, true);
    out_norm_bias_ = Tensor::zeros({h}, true);
    out_w_ = Tensor::zeros({h, d_x}, true);
    out_b_ = Tensor::zeros({d_x}, true);
}

Tensor Denoiser::forward(const Tensor& x_t, std::span<const std::size_t> t, const Condition& cond) const {
    if (x_t.rank() != 2 || x_t.dim(1) != d_x_) throw ContractError("denoiser: x_t must be [B, d_x]");
    if (cond.e.rank() != 3 || cond.e.dim(0) != x_t.dim(0) || cond.e.dim(2) != d_cond_)
        throw ContractError("denoiser: condition must be [B, L, d_c] aligned with x_t");
    const std::size_t batch = x_t.dim(0);
    auto temb = linear(gelu(linear(timestep_features(t, cfg_.time_dim), time_w1_, time_b1_)), time_w2_, time_b2_);
    auto h = add(linear(x_t, in_w_, in_b_), temb);

    auto q = linear(layer_norm(h, q_norm_gain_, q_norm_bias_), wq_).reshape({batch, 1, cfg_.attn_dim});
    auto k = linear(cond.e, wk_);
    auto v = linear(cond.e, wv_);
    Mask mask = cfg_.heads > 1 ? cond.mask.repeat_batch(cfg_.heads) : cond.mask;
    auto ctx = merge_heads(attention(split_heads(q, cfg_.heads), split_heads(k, cfg_.heads),
                                     split_heads(v, cfg_.heads), &mask),
                           cfg_.heads);
    h = add(h, linear(ctx.reshape({batch, cfg_.attn_dim}), wo_, bo_));

    for (const auto& b : blocks_)
        h = add(h, linear(gelu(linear(layer_norm(h, b.norm_gain, b.norm_bias), b.w1, b.b1)), b.w2, b.b2));
    return linear(layer_norm(h, out_norm_gain_, out_norm_bias_), out_w_, out_b_);
}

EpsilonPredictor Denoiser::predictor() const {
    return [this](const Tensor& x_t, std::span<const std::size_t> t, const Condition& cond) {
        return forward(x_t, t, cond);
    };
}

ParamList Denoiser::parameters() const {
    ParamList out{{"denoiser.time.w1", time_w1_}, {"denoiser.time.b1", time_b1_},
                  {"denoiser.time.w2", time_w2_}, {"denoiser.time.b2", time_b2_},
                  {"denoiser.in.w", in_w_},       {"denoiser.in.b", in_b_},
                  {"denoiser.cross.norm.gain", q_norm_gain_}, {"denoiser.cross.norm.bias", q_norm_bias_},
                  {"denoiser.cross.wq", wq_},     {"denoiser.cross.wk", wk_},
                  {"denoiser.cross.wv", wv_},     {"denoiser.cross.wo", wo_},
                  {"denoiser.cross.bo", bo_}};
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const auto p = "denoiser.block" + std::to_string(i);
        const auto& b = blocks_[i];
        out.push_back({p + ".norm.gain", b.norm_gain});
        out.push_back({p + ".norm.bias", b.norm_bias});
        out.push_back({p + ".w1", b.w1});
        out.push_back({p + ".b1", b.b1});
        out.push_back({p + ".w2", b.w2});
        out.push_back({p + ".b2", b.b2});
    }
    out.push_back({"denoiser.out.norm.gain", out_norm_gain_});
    out.push_back({"denoiser.out.norm.bias", out_norm_bias_});
    out.push_back({"denoiser.out.w", out_w_});
    out.push_back({"denoiser.out.b", out_b_});
    return out;
}

}  // namespace fuseclip
