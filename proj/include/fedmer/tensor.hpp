#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedmer {

using Shape = std::vector<std::size_t>;

struct TensorError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// shape mismatch between operands, names the op and the shapes involved
struct DimensionError : TensorError {
    using TensorError::TensorError;
};
// NaN/Inf produced by an op
struct NumericError : TensorError {
    using TensorError::TensorError;
};
// violated precondition (non-scalar loss, missing grad, ...)
struct ContractError : TensorError {
    using TensorError::TensorError;
};

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace detail {

// One node of the computation graph. Tensors share nodes; an op's output
// node keeps shared_ptrs to its input nodes plus a closure that pushes the
// output gradient back into them. Reverse topological order over `parents`
// is the backward pass.
struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated lazily, same length as value
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;  // may be empty (leaf)

    std::size_t numel() const { return value.size(); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

}  // namespace detail

// Reverse-mode gradient recording is on by default; evaluation paths disable
// it with NoGradGuard so forward passes do not retain graphs.
bool grad_enabled();
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// Dense row-major tensor of 64-bit floats with an optional gradient slot.
// Value semantics over a shared graph node.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double fill);
    static Tensor from(Shape shape, std::vector<double> data);
    static Tensor scalar(double v);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t numel() const { return node_->value.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }

    const std::vector<double>& value() const { return node_->value; }
    std::vector<double>& value() { return node_->value; }
    double* data() { return node_->value.data(); }
    const double* data() const { return node_->value.data(); }

    bool has_grad() const { return node_->grad.size() == node_->value.size(); }
    const std::vector<double>& grad() const;
    std::vector<double>& grad_mutable();
    void zero_grad();

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool on);

    // scalar access; throws ContractError when not a scalar
    double item() const;

    double at(std::initializer_list<std::size_t> idx) const;

    std::shared_ptr<detail::Node> node() const { return node_; }
    static Tensor wrap(std::shared_ptr<detail::Node> node) {
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

private:
    std::shared_ptr<detail::Node> node_;
};

// Backward pass from a scalar loss: visits every reachable node exactly once
// in reverse topological order and accumulates into parameter grads.
// Repeated calls without zero_grad accumulate.
void backward(const Tensor& loss);

// throws NumericError if any value is NaN/Inf; every op calls this on its output
void check_finite(const Tensor& t, const char* op);

}  // namespace fedmer
