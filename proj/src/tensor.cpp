#include "fuseclip/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "fuseclip/errors.hpp"

namespace fuseclip {

using detail::TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

Tensor::Tensor() : node_(std::make_shared<TensorNode>()) {}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : node_(std::make_shared<TensorNode>()) {
    for (auto e : shape) {
        if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape));
    }
    if (shape_numel(shape) != values.size()) {
        throw DimensionError("shape " + shape_str(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= rank()) throw DimensionError("axis out of range for " + shape_str(shape()));
    return node_->shape[axis];
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->value[0];
}

void Tensor::set_requires_grad(bool flag) {
    if (node_->backward_fn) throw ContractError("requires_grad can only be toggled on leaves");
    node_->requires_grad = flag;
}

Tensor Tensor::detach() const { return Tensor(shape(), node_->value, false); }

std::size_t Mask::count(std::size_t b) const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < length; ++i) n += valid[b * length + i] != 0;
    return n;
}

Mask Mask::repeat_batch(std::size_t times) const {
    Mask out(batch * times, length);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t r = 0; r < times; ++r)
            std::copy_n(valid.begin() + b * length, length, out.valid.begin() + (b * times + r) * length);
    return out;
}

namespace {

Tensor make_result(Shape shape, std::vector<double> value, std::vector<NodePtr> inputs,
                   std::function<void(TensorNode&)> backward_fn) {
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    bool tracked = std::any_of(inputs.begin(), inputs.end(), [](const NodePtr& p) { return p->requires_grad; });
    if (tracked) {
        node->requires_grad = true;
        node->inputs = std::move(inputs);
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(node));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

std::size_t last_dim(const Tensor& t) { return t.shape().back(); }

// C[m,n] (+)= A[m,k] * B[k,n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] += A[m,k] * B[n,k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            c[i * n + j] += acc;
        }
    }
}

// C[k,n] += A[m,k]^T * B[m,n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <class F, class D>
Tensor unary(const Tensor& a, F forward, D derivative) {
    std::vector<double> out(a.numel());
    auto in = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(in[i]);
    return make_result(a.shape(), std::move(out), {a.node()}, [derivative](TensorNode& self) {
        auto& src = *self.inputs[0];
        if (!src.requires_grad) return;
        auto& g = src.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * derivative(src.value[i], self.value[i]);
    });
}

}  // namespace

std::vector<TensorNode*> topological_order(const Tensor& root) {
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    if (!root.requires_grad()) return order;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            TensorNode* child = node->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

void backward(const Tensor& loss) {
    if (loss.numel() != 1) throw ContractError("backward requires a scalar loss, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) throw ContractError("backward on a tensor with no tracked inputs");
    auto order = topological_order(loss);
    loss.node()->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* node = *it;
        if (node->backward_fn) {
            node->ensure_grad();
            node->backward_fn(*node);
        }
    }
    // Intermediate gradients are scratch; only leaves keep theirs.
    for (TensorNode* node : order)
        if (node->backward_fn) node->grad.clear();
}

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
    return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [](TensorNode& self) {
        for (auto& in : self.inputs) {
            if (!in->requires_grad) continue;
            auto& g = in->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
    return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [](TensorNode& self) {
        for (std::size_t k = 0; k < 2; ++k) {
            auto& in = self.inputs[k];
            if (!in->requires_grad) continue;
            const double sign = k == 0 ? 1.0 : -1.0;
            auto& g = in->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
    return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [](TensorNode& self) {
        auto& x = *self.inputs[0];
        auto& y = *self.inputs[1];
        if (x.requires_grad) {
            auto& g = x.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y.value[i];
        }
        if (y.requires_grad) {
            auto& g = y.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * x.value[i];
        }
    });
}

Tensor scale(const Tensor& a, double factor) {
    return unary(a, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor mul_scalar(const Tensor& a, const Tensor& s) {
    if (s.numel() != 1) throw DimensionError("mul_scalar: factor must have one element");
    const double f = s.item();
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * f;
    return make_result(a.shape(), std::move(out), {a.node(), s.node()}, [](TensorNode& self) {
        auto& x = *self.inputs[0];
        auto& f = *self.inputs[1];
        if (x.requires_grad) {
            auto& g = x.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * f.value[0];
        }
        if (f.requires_grad) {
            double acc = 0.0;
            for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * x.value[i];
            f.ensure_grad()[0] += acc;
        }
    });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
    if (row.rank() != 1 || row.dim(0) != last_dim(a))
        throw DimensionError("add_row: row " + shape_str(row.shape()) + " vs " + shape_str(a.shape()));
    const std::size_t n = row.dim(0);
    std::vector<double> out(a.data().begin(), a.data().end());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += row.at(i % n);
    return make_result(a.shape(), std::move(out), {a.node(), row.node()}, [n](TensorNode& self) {
        auto& x = *self.inputs[0];
        auto& r = *self.inputs[1];
        if (x.requires_grad) {
            auto& g = x.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (r.requires_grad) {
            auto& g = r.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
        }
    });
}

Tensor exp(const Tensor& a) {
    return unary(a, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor tanh(const Tensor& a) {
    return unary(a, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor gelu(const Tensor& a) {
    // tanh approximation
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    return unary(
        a,
        [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x))); },
        [](double x, double) {
            const double u = c * (x + 0.044715 * x * x * x);
            const double t = std::tanh(u);
            const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
            return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
        });
}

// ---- reductions -----------------------------------------------------------

Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    return make_result({1}, {acc}, {a.node()}, [](TensorNode& self) {
        auto& x = *self.inputs[0];
        auto& g = x.ensure_grad();
        for (auto& v : g) v += self.grad[0];
    });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor mse(const Tensor& a, const Tensor& b) {
    auto d = sub(a, b);
    return mean(mul(d, d));
}

// ---- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n, 0.0);
    gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
    return make_result({m, n}, std::move(out), {a.node(), b.node()}, [m, k, n](TensorNode& self) {
        auto& x = *self.inputs[0];
        auto& y = *self.inputs[1];
        if (x.requires_grad) gemm_nt(self.grad.data(), y.value.data(), x.ensure_grad().data(), m, n, k);
        if (y.requires_grad) gemm_tn(x.value.data(), self.grad.data(), y.ensure_grad().data(), m, k, n);
    });
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw DimensionError("transpose expects rank 2, got " + shape_str(a.shape()));
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.at(i * n + j);
    return make_result({n, m}, std::move(out), {a.node()}, [m, n](TensorNode& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
    });
}

Tensor linear(const Tensor& x, const Tensor& weight) {
    if (weight.rank() != 2 || x.rank() < 1 || last_dim(x) != weight.dim(0))
        throw DimensionError("linear: input " + shape_str(x.shape()) + " weight " + shape_str(weight.shape()));
    const std::size_t in = weight.dim(0), outd = weight.dim(1), rows = x.numel() / in;
    Shape shape = x.shape();
    shape.back() = outd;
    std::vector<double> out(rows * outd, 0.0);
    gemm_nn(x.data().data(), weight.data().data(), out.data(), rows, in, outd);
    return make_result(std::move(shape), std::move(out), {x.node(), weight.node()},
                       [rows, in, outd](TensorNode& self) {
                           auto& a = *self.inputs[0];
                           auto& w = *self.inputs[1];
                           if (a.requires_grad)
                               gemm_nt(self.grad.data(), w.value.data(), a.ensure_grad().data(), rows, outd, in);
                           if (w.requires_grad)
                               gemm_tn(a.value.data(), self.grad.data(), w.ensure_grad().data(), rows, in, outd);
                       });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) { return add_row(linear(x, weight), bias); }

namespace {

Tensor batched(const Tensor& a, const Tensor& b, bool transpose_b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0))
        throw DimensionError("bmm: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
    const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
    if ((transpose_b ? b.dim(2) : b.dim(1)) != k)
        throw DimensionError("bmm inner dims: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    std::vector<double> out(batch * m * n, 0.0);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (std::size_t i = 0; i < batch; ++i) {
        if (transpose_b)
            gemm_nt(pa + i * m * k, pb + i * n * k, out.data() + i * m * n, m, k, n);
        else
            gemm_nn(pa + i * m * k, pb + i * k * n, out.data() + i * m * n, m, k, n);
    }
    return make_result({batch, m, n}, std::move(out), {a.node(), b.node()},
                       [batch, m, k, n, transpose_b](TensorNode& self) {
                           auto& x = *self.inputs[0];
                           auto& y = *self.inputs[1];
                           const double* g = self.grad.data();
                           if (x.requires_grad) {
                               double* gx = x.ensure_grad().data();
                               for (std::size_t i = 0; i < batch; ++i) {
                                   // dA = dC * B^T  (or dC * B when B was transposed)
                                   if (transpose_b)
                                       gemm_nn(g + i * m * n, y.value.data() + i * n * k, gx + i * m * k, m, n, k);
                                   else
                                       gemm_nt(g + i * m * n, y.value.data() + i * k * n, gx + i * m * k, m, n, k);
                               }
                           }
                           if (y.requires_grad) {
                               double* gy = y.ensure_grad().data();
                               for (std::size_t i = 0; i < batch; ++i) {
                                   if (transpose_b)  // dB[n,k] = dC^T * A
                                       gemm_tn(g + i * m * n, x.value.data() + i * m * k, gy + i * n * k, m, n, k);
                                   else  // dB[k,n] = A^T * dC
                                       gemm_tn(x.value.data() + i * m * k, g + i * m * n, gy + i * k * n, m, k, n);
                               }
                           }
                       });
}

}  // namespace

Tensor bmm(const Tensor& a, const Tensor& b) { return batched(a, b, false); }
Tensor bmm_nt(const Tensor& a, const Tensor& b) { return batched(a, b, true); }

// ---- normalization / probability ------------------------------------------

Tensor softmax(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) throw DimensionError("softmax axis out of range for " + shape_str(x.shape()));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    const std::size_t len = x.dim(axis);
    std::vector<double> out(x.numel());
    auto in = x.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < inner; ++j) {
            const std::size_t base = o * len * inner + j;
            double mx = -INFINITY;
            for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, in[base + i * inner]);
            double z = 0.0;
            for (std::size_t i = 0; i < len; ++i) z += out[base + i * inner] = std::exp(in[base + i * inner] - mx);
            for (std::size_t i = 0; i < len; ++i) out[base + i * inner] /= z;
        }
    }
    return make_result(x.shape(), std::move(out), {x.node()}, [outer, inner, len](TensorNode& self) {
        auto& g = self.inputs[0]->ensure_grad();
        const auto& y = self.value;
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t j = 0; j < inner; ++j) {
                const std::size_t base = o * len * inner + j;
                double dot = 0.0;
                for (std::size_t i = 0; i < len; ++i) dot += self.grad[base + i * inner] * y[base + i * inner];
                for (std::size_t i = 0; i < len; ++i) {
                    const std::size_t p = base + i * inner;
                    g[p] += y[p] * (self.grad[p] - dot);
                }
            }
        }
    });
}

Tensor masked_softmax(const Tensor& x, const Mask& key_mask) {
    if (x.rank() != 3 || key_mask.batch != x.dim(0) || key_mask.length != x.dim(2))
        throw DimensionError("masked_softmax: scores " + shape_str(x.shape()) + " vs mask [" +
                             std::to_string(key_mask.batch) + "," + std::to_string(key_mask.length) + "]");
    const std::size_t batch = x.dim(0), rows = x.dim(1), len = x.dim(2);
    for (std::size_t b = 0; b < batch; ++b)
        if (key_mask.count(b) == 0) throw ContractError("masked_softmax: every key is masked");
    std::vector<double> out(x.numel(), 0.0);
    auto in = x.data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t base = (b * rows + r) * len;
            double mx = -INFINITY;
            for (std::size_t i = 0; i < len; ++i)
                if (key_mask(b, i)) mx = std::max(mx, in[base + i]);
            double z = 0.0;
            for (std::size_t i = 0; i < len; ++i)
                if (key_mask(b, i)) z += out[base + i] = std::exp(in[base + i] - mx);
            for (std::size_t i = 0; i < len; ++i) out[base + i] /= z;
        }
    }
    return make_result(x.shape(), std::move(out), {x.node()}, [len](TensorNode& self) {
        auto& g = self.inputs[0]->ensure_grad();
        const auto& y = self.value;
        const std::size_t nrows = y.size() / len;
        for (std::size_t r = 0; r < nrows; ++r) {
            const std::size_t base = r * len;
            double dot = 0.0;
            for (std::size_t i = 0; i < len; ++i) dot += self.grad[base + i] * y[base + i];
            for (std::size_t i = 0; i < len; ++i) g[base + i] += y[base + i] * (self.grad[base + i] - dot);
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const std::size_t d = last_dim(x);
    if (d < 2) throw DimensionError("layer_norm needs a feature width of at least 2");
    if (gain.shape() != Shape{d} || bias.shape() != Shape{d})
        throw DimensionError("layer_norm: affine params must be [" + std::to_string(d) + "]");
    const std::size_t rows = x.numel() / d;
    std::vector<double> out(x.numel()), xhat(x.numel()), inv_std(rows);
    auto in = x.data();
    auto gv = gain.data();
    auto bv = bias.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = in.data() + r * d;
        double mu = 0.0;
        for (std::size_t i = 0; i < d; ++i) mu += row[i];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
        var /= static_cast<double>(d);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t i = 0; i < d; ++i) {
            xhat[r * d + i] = (row[i] - mu) * inv_std[r];
            out[r * d + i] = xhat[r * d + i] * gv[i] + bv[i];
        }
    }
    return make_result(x.shape(), std::move(out), {x.node(), gain.node(), bias.node()},
                       [d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorNode& self) {
                           auto& xs = *self.inputs[0];
                           auto& gn = *self.inputs[1];
                           auto& bs = *self.inputs[2];
                           const double* gy = self.grad.data();
                           if (gn.requires_grad) {
                               auto& gg = gn.ensure_grad();
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t i = 0; i < d; ++i) gg[i] += gy[r * d + i] * xhat[r * d + i];
                           }
                           if (bs.requires_grad) {
                               auto& gb = bs.ensure_grad();
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t i = 0; i < d; ++i) gb[i] += gy[r * d + i];
                           }
                           if (xs.requires_grad) {
                               auto& gx = xs.ensure_grad();
                               const double inv_d = 1.0 / static_cast<double>(d);
                               for (std::size_t r = 0; r < rows; ++r) {
                                   double s1 = 0.0, s2 = 0.0;
                                   for (std::size_t i = 0; i < d; ++i) {
                                       const double gh = gy[r * d + i] * gn.value[i];
                                       s1 += gh;
                                       s2 += gh * xhat[r * d + i];
                                   }
                                   for (std::size_t i = 0; i < d; ++i) {
                                       const double gh = gy[r * d + i] * gn.value[i];
                                       gx[r * d + i] += inv_std[r] * (gh - inv_d * s1 - xhat[r * d + i] * inv_d * s2);
                                   }
                               }
                           }
                       });
}

Tensor l2_normalize_rows(const Tensor& x) {
    if (x.rank() != 2) throw DimensionError("l2_normalize_rows expects rank 2");
    const std::size_t n = x.dim(0), d = x.dim(1);
    std::vector<double> out(x.numel()), norms(n);
    for (std::size_t r = 0; r < n; ++r) {
        double s = 0.0;
        for (std::size_t i = 0; i < d; ++i) s += x.at(r * d + i) * x.at(r * d + i);
        if (!std::isfinite(s)) throw NumericError("l2_normalize_rows: non-finite row " + std::to_string(r));
        if (!(s > 0.0)) throw ContractError("l2_normalize_rows: zero row " + std::to_string(r));
        norms[r] = std::sqrt(s);
        for (std::size_t i = 0; i < d; ++i) out[r * d + i] = x.at(r * d + i) / norms[r];
    }
    return make_result(x.shape(), std::move(out), {x.node()}, [n, d, norms = std::move(norms)](TensorNode& self) {
        auto& g = self.inputs[0]->ensure_grad();
        const auto& y = self.value;
        for (std::size_t r = 0; r < n; ++r) {
            double dot = 0.0;
            for (std::size_t i = 0; i < d; ++i) dot += self.grad[r * d + i] * y[r * d + i];
            for (std::size_t i = 0; i < d; ++i)
                g[r * d + i] += (self.grad[r * d + i] - y[r * d + i] * dot) / norms[r];
        }
    });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
    if (logits.rank() != 2 || targets.size() != logits.dim(0))
        throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                             std::to_string(targets.size()) + " targets");
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    std::vector<double> probs(n * c);
    std::vector<std::size_t> tgt(targets.begin(), targets.end());
    double loss = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        if (tgt[r] >= c) throw ContractError("cross_entropy: target out of range");
        double mx = -INFINITY;
        for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, logits.at(r * c + j));
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += probs[r * c + j] = std::exp(logits.at(r * c + j) - mx);
        for (std::size_t j = 0; j < c; ++j) probs[r * c + j] /= z;
        loss += -(logits.at(r * c + tgt[r]) - mx - std::log(z));
    }
    loss /= static_cast<double>(n);
    return make_result({1}, {loss}, {logits.node()},
                       [n, c, probs = std::move(probs), tgt = std::move(tgt)](TensorNode& self) {
                           auto& g = self.inputs[0]->ensure_grad();
                           const double s = self.grad[0] / static_cast<double>(n);
                           for (std::size_t r = 0; r < n; ++r)
                               for (std::size_t j = 0; j < c; ++j)
                                   g[r * c + j] += s * (probs[r * c + j] - (j == tgt[r] ? 1.0 : 0.0));
                       });
}

// ---- sequence helpers -----------------------------------------------------

namespace {
void require_sequence_mask(const Tensor& x, const Mask& mask, const char* op) {
    if (x.rank() != 3 || mask.batch != x.dim(0) || mask.length != x.dim(1))
        throw DimensionError(std::string(op) + ": input " + shape_str(x.shape()) + " vs mask [" +
                             std::to_string(mask.batch) + "," + std::to_string(mask.length) + "]");
}
}  // namespace

Tensor masked_mean(const Tensor& x, const Mask& mask) {
    require_sequence_mask(x, mask, "masked_mean");
    const std::size_t batch = x.dim(0), len = x.dim(1), d = x.dim(2);
    std::vector<double> out(batch * d, 0.0), inv_count(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t cnt = mask.count(b);
        if (cnt == 0) throw ContractError("masked_mean: no valid positions");
        inv_count[b] = 1.0 / static_cast<double>(cnt);
        for (std::size_t i = 0; i < len; ++i) {
            if (!mask(b, i)) continue;
            for (std::size_t j = 0; j < d; ++j) out[b * d + j] += x.at((b * len + i) * d + j);
        }
        for (std::size_t j = 0; j < d; ++j) out[b * d + j] *= inv_count[b];
    }
    return make_result({batch, d}, std::move(out), {x.node()},
                       [mask, len, d, inv_count = std::move(inv_count)](TensorNode& self) {
                           auto& g = self.inputs[0]->ensure_grad();
                           for (std::size_t b = 0; b < mask.batch; ++b)
                               for (std::size_t i = 0; i < len; ++i) {
                                   if (!mask(b, i)) continue;
                                   for (std::size_t j = 0; j < d; ++j)
                                       g[(b * len + i) * d + j] += self.grad[b * d + j] * inv_count[b];
                               }
                       });
}

Tensor mask_rows(const Tensor& x, const Mask& mask) {
    require_sequence_mask(x, mask, "mask_rows");
    const std::size_t len = x.dim(1), d = x.dim(2);
    std::vector<double> out(x.data().begin(), x.data().end());
    for (std::size_t b = 0; b < mask.batch; ++b)
        for (std::size_t i = 0; i < len; ++i)
            if (!mask(b, i)) std::fill_n(out.begin() + (b * len + i) * d, d, 0.0);
    return make_result(x.shape(), std::move(out), {x.node()}, [mask, len, d](TensorNode& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t b = 0; b < mask.batch; ++b)
            for (std::size_t i = 0; i < len; ++i) {
                if (!mask(b, i)) continue;
                for (std::size_t j = 0; j < d; ++j) g[(b * len + i) * d + j] += self.grad[(b * len + i) * d + j];
            }
    });
}

Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows) {
    if (x.rank() != 2) throw DimensionError("select_rows expects rank 2");
    if (rows.empty()) throw ContractError("select_rows: empty selection");
    const std::size_t d = x.dim(1);
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    std::vector<double> out(idx.size() * d);
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= x.dim(0)) throw ContractError("select_rows: index out of range");
        std::copy_n(x.data().begin() + idx[r] * d, d, out.begin() + r * d);
    }
    const std::size_t n = idx.size();
    return make_result({n, d}, std::move(out), {x.node()}, [d, idx = std::move(idx)](TensorNode& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t j = 0; j < d; ++j) g[idx[r] * d + j] += self.grad[r * d + j];
    });
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
    if (x.rank() != 3 || heads == 0 || x.dim(2) % heads != 0)
        throw DimensionError("split_heads: " + shape_str(x.shape()) + " with " + std::to_string(heads) + " heads");
    if (heads == 1) return x;
    const std::size_t batch = x.dim(0), len = x.dim(1), e = x.dim(2) / heads;
    std::vector<double> out(x.numel());
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < len; ++i)
                std::copy_n(x.data().begin() + (b * len + i) * heads * e + h * e, e,
                            out.begin() + ((b * heads + h) * len + i) * e);
    return make_result({batch * heads, len, e}, std::move(out), {x.node()},
                       [batch, heads, len, e](TensorNode& self) {
                           auto& g = self.inputs[0]->ensure_grad();
                           for (std::size_t b = 0; b < batch; ++b)
                               for (std::size_t h = 0; h < heads; ++h)
                                   for (std::size_t i = 0; i < len; ++i)
                                       for (std::size_t j = 0; j < e; ++j)
                                           g[(b * len + i) * heads * e + h * e + j] +=
                                               self.grad[((b * heads + h) * len + i) * e + j];
                       });
}

Tensor merge_heads(const Tensor& x, std::size_t heads) {
    if (x.rank() != 3 || heads == 0 || x.dim(0) % heads != 0)
        throw DimensionError("merge_heads: " + shape_str(x.shape()) + " with " + std::to_string(heads) + " heads");
    if (heads == 1) return x;
    const std::size_t batch = x.dim(0) / heads, len = x.dim(1), e = x.dim(2);
    std::vector<double> out(x.numel());
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < len; ++i)
                std::copy_n(x.data().begin() + ((b * heads + h) * len + i) * e, e,
                            out.begin() + (b * len + i) * heads * e + h * e);
    return make_result({batch, len, heads * e}, std::move(out), {x.node()},
                       [batch, heads, len, e](TensorNode& self) {
                           auto& g = self.inputs[0]->ensure_grad();
                           for (std::size_t b = 0; b < batch; ++b)
                               for (std::size_t h = 0; h < heads; ++h)
                                   for (std::size_t i = 0; i < len; ++i)
                                       for (std::size_t j = 0; j < e; ++j)
                                           g[((b * heads + h) * len + i) * e + j] +=
                                               self.grad[(b * len + i) * heads * e + h * e + j];
                       });
}

Tensor Tensor::reshape(Shape shape) const {
    if (shape_numel(shape) != numel())
        throw DimensionError("reshape " + shape_str(this->shape()) + " -> " + shape_str(shape));
    std::vector<double> out(node_->value);
    return make_result(std::move(shape), std::move(out), {node_}, [](TensorNode& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
        throw DimensionError("scaled_dot_attention expects rank-2 operands");
    if (q.shape().empty() || k.dim(0) != v.dim(0) || q.dim(1) != k.dim(1))
        throw DimensionError("scaled_dot_attention: q " + shape_str(q.shape()) + " k " + shape_str(k.shape()) +
                             " v " + shape_str(v.shape()));
    auto q3 = q.reshape({1, q.dim(0), q.dim(1)});
    auto k3 = k.reshape({1, k.dim(0), k.dim(1)});
    auto v3 = v.reshape({1, v.dim(0), v.dim(1)});
    auto out = attention(q3, k3, v3);
    return out.reshape({q.dim(0), v.dim(1)});
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const Mask* key_mask) {
    if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3)
        throw DimensionError("attention expects [B,L,d] operands");
    if (k.dim(0) != q.dim(0) || v.dim(0) != q.dim(0) || k.dim(1) != v.dim(1) || k.dim(2) != q.dim(2))
        throw DimensionError("attention: q " + shape_str(q.shape()) + " k " + shape_str(k.shape()) + " v " +
                             shape_str(v.shape()));
    auto scores = scale(bmm_nt(q, k), 1.0 / std::sqrt(static_cast<double>(q.dim(2))));
    auto weights = key_mask ? masked_softmax(scores, *key_mask) : softmax(scores, 2);
    return bmm(weights, v);
}

}  // namespace fuseclip
