#include "fuseclip/optim.hpp"

#include <cmath>
#include <cstring>

#include "fuseclip/errors.hpp"

namespace fuseclip {

void optimizer_step(ParamList& params, OptimizerState& state) {
    if (state.first_moment.empty()) {
        for (const auto& p : params) {
            state.first_moment.emplace_back(p.tensor.numel(), 0.0);
            state.second_moment.emplace_back(p.tensor.numel(), 0.0);
        }
    }
    if (state.first_moment.size() != params.size())
        throw ContractError("optimizer state tracks " + std::to_string(state.first_moment.size()) +
                            " parameters, got " + std::to_string(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i].tensor.has_grad()) throw ContractError("missing gradient on parameter " + params[i].name);
        if (state.first_moment[i].size() != params[i].tensor.numel())
            throw ContractError("moment shape mismatch for parameter " + params[i].name);
    }

    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(state.beta1, t);
    const double bc2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto value = params[i].tensor.mutable_data();
        auto grad = params[i].tensor.grad();
        auto& m = state.first_moment[i];
        auto& v = state.second_moment[i];
        for (std::size_t j = 0; j < value.size(); ++j) {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * grad[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * grad[j] * grad[j];
            const double m_hat = m[j] / bc1;
            const double v_hat = v[j] / bc2;
            value[j] -= state.learning_rate * state.weight_decay * value[j];
            value[j] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
        }
        params[i].tensor.zero_grad();
    }
}

double clip_grad_norm(ParamList& params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params)
        for (double g : p.tensor.grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double f = max_norm / norm;
        for (auto& p : params)
            if (p.tensor.has_grad())
                for (double& g : p.tensor.mutable_grad()) g *= f;
    }
    return norm;
}

void zero_grad(ParamList& params) {
    for (auto& p : params) p.tensor.zero_grad();
}

namespace {
constexpr std::uint64_t kFnvOffset = 1469598103934665603ull;
constexpr std::uint64_t kFnvPrime = 1099511628211ull;

void fnv_bytes(std::uint64_t& h, const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= kFnvPrime;
    }
}
}  // namespace

std::uint64_t content_hash(const ParamList& params) {
    std::uint64_t h = kFnvOffset;
    for (const auto& p : params) {
        fnv_bytes(h, p.name.data(), p.name.size());
        for (auto e : p.tensor.shape()) {
            std::uint64_t v = e;
            fnv_bytes(h, &v, sizeof v);
        }
        auto d = p.tensor.data();
        fnv_bytes(h, d.data(), d.size() * sizeof(double));
    }
    return h;
}

}  // namespace fuseclip
