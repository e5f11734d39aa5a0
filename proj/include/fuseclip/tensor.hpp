#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace fuseclip {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until a gradient is accumulated
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> inputs;
    std::function<void(TensorNode&)> backward_fn;

    std::vector<double>& ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

}  // namespace detail

// Dense row-major float64 array with optional reverse-mode gradient tracking.
//
// A Tensor is a handle; copies share storage. Operations that consume a
// tracked tensor record themselves on an implicit tape (the input links of
// the result), which `backward` walks in reverse topological order.
class Tensor {
public:
    Tensor();
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t axis) const;
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }

    std::span<const double> data() const { return node_->value; }
    // Direct write access, intended for initialization and optimizer updates.
    std::span<double> mutable_data() { return node_->value; }
    double item() const;
    double at(std::size_t flat_index) const { return node_->value[flat_index]; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool flag);
    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const double> grad() const { return node_->grad; }
    std::span<double> mutable_grad() { return node_->ensure_grad(); }
    void zero_grad() { node_->grad.clear(); }

    // Fresh untracked tensor holding a copy of the values.
    Tensor detach() const;
    Tensor reshape(Shape shape) const;

    bool same_node(const Tensor& other) const { return node_ == other.node_; }
    const std::shared_ptr<detail::TensorNode>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::TensorNode> node_;
};

// Per-position validity flags for a [batch, length] layout (1 = valid).
struct Mask {
    std::size_t batch = 0;
    std::size_t length = 0;
    std::vector<std::uint8_t> valid;

    Mask() = default;
    Mask(std::size_t b, std::size_t l, std::uint8_t fill = 1) : batch(b), length(l), valid(b * l, fill) {}
    bool operator()(std::size_t b, std::size_t i) const { return valid[b * length + i] != 0; }
    std::size_t count(std::size_t b) const;
    Mask repeat_batch(std::size_t times) const;  // each row repeated `times` consecutively
};

// Nodes reachable from `root` through tracked inputs, inputs before consumers.
std::vector<detail::TensorNode*> topological_order(const Tensor& root);

// Populates gradients of every tracked tensor reachable from a scalar loss.
// Leaf gradients accumulate across calls until zero_grad().
void backward(const Tensor& loss);

// ---- elementwise ----------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor mul_scalar(const Tensor& a, const Tensor& s);  // s has one element
Tensor add_row(const Tensor& a, const Tensor& row);   // row broadcast over leading dims
Tensor exp(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor gelu(const Tensor& a);

// ---- reductions -----------------------------------------------------------
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mse(const Tensor& a, const Tensor& b);

// ---- linear algebra -------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k]x[k,n]
Tensor transpose(const Tensor& a);                    // [m,n] -> [n,m]
Tensor linear(const Tensor& x, const Tensor& weight); // x[...,in] * w[in,out]
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor bmm(const Tensor& a, const Tensor& b);         // [B,m,k]x[B,k,n]
Tensor bmm_nt(const Tensor& a, const Tensor& b);      // [B,m,k]x[B,n,k]^T

// ---- normalization / probability ------------------------------------------
Tensor softmax(const Tensor& x, std::size_t axis);
// Softmax over the last axis of [B,M,N]; key positions with mask 0 get weight 0.
Tensor masked_softmax(const Tensor& x, const Mask& key_mask);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor l2_normalize_rows(const Tensor& x);
// Mean cross-entropy of rows of logits[n,c] against integer targets.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);

// ---- sequence helpers -----------------------------------------------------
Tensor masked_mean(const Tensor& x, const Mask& mask);  // [B,L,d] -> [B,d]
Tensor mask_rows(const Tensor& x, const Mask& mask);    // zero invalid [B,L,d] rows
Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows);
Tensor split_heads(const Tensor& x, std::size_t heads);  // [B,L,h*e] -> [B*h,L,e]
Tensor merge_heads(const Tensor& x, std::size_t heads);  // [B*h,L,e] -> [B,L,h*e]

// softmax(q k^T / sqrt(d)) v on single sequences.
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v);
// Batched form over [B,Lq,d], [B,Lk,d], [B,Lk,dv]; keys with mask 0 are ignored.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const Mask* key_mask = nullptr);

}  // namespace fuseclip
