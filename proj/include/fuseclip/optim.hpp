#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fuseclip/tensor.hpp"

namespace fuseclip {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};
using ParamList = std::vector<NamedTensor>;

// Adaptive-moment optimizer state with decoupled weight decay.
struct OptimizerState {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.01;
    std::uint64_t step = 0;
    std::vector<std::vector<double>> first_moment;
    std::vector<std::vector<double>> second_moment;
};

// One AdamW update over `params`, then clears their gradients.
// Moments are allocated lazily on the first call and must keep matching shapes.
void optimizer_step(ParamList& params, OptimizerState& state);

// Rescales all gradients so their joint L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_grad_norm(ParamList& params, double max_norm);

void zero_grad(ParamList& params);

// FNV-1a over names, shapes and raw value bytes.
std::uint64_t content_hash(const ParamList& params);

}  // namespace fuseclip
