#include "fedmer/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace fedmer {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << ")";
    return os.str();
}

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor Tensor::zeros(Shape shape) {
    auto node = std::make_shared<detail::Node>();
    node->value.assign(shape_numel(shape), 0.0);
    node->shape = std::move(shape);
    return wrap(std::move(node));
}

Tensor Tensor::full(Shape shape, double fill) {
    auto node = std::make_shared<detail::Node>();
    node->value.assign(shape_numel(shape), fill);
    node->shape = std::move(shape);
    return wrap(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> data) {
    if (data.size() != shape_numel(shape)) {
        throw DimensionError("tensor: data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    return wrap(std::move(node));
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

const std::vector<double>& Tensor::grad() const {
    if (!has_grad()) throw ContractError("tensor: gradient not populated");
    return node_->grad;
}

std::vector<double>& Tensor::grad_mutable() {
    node_->ensure_grad();
    return node_->grad;
}

void Tensor::zero_grad() {
    if (has_grad()) node_->grad.assign(node_->value.size(), 0.0);
}

Tensor& Tensor::set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
}

double Tensor::item() const {
    if (numel() != 1) {
        throw ContractError("item: tensor has " + std::to_string(numel()) + " elements, expected 1");
    }
    return node_->value[0];
}

double Tensor::at(std::initializer_list<std::size_t> idx) const {
    const Shape& s = node_->shape;
    if (idx.size() != s.size()) throw DimensionError("at: index rank mismatch");
    std::size_t flat = 0;
    std::size_t i = 0;
    for (std::size_t v : idx) {
        if (v >= s[i]) throw DimensionError("at: index out of range");
        flat = flat * s[i] + v;
        ++i;
    }
    return node_->value[flat];
}

void check_finite(const Tensor& t, const char* op) {
    for (double v : t.value()) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string(op) + ": non-finite value in output");
        }
    }
}

void backward(const Tensor& loss) {
    if (!loss.defined()) throw ContractError("backward: undefined loss tensor");
    if (loss.numel() != 1) {
        throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }

    // iterative post-order DFS -> topological order
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    struct Frame {
        detail::Node* node;
        std::size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.node().get(), 0});
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            detail::Node* p = f.node->parents[f.next_parent++].get();
            if (seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    // intermediate grads are scratch; only leaf grads accumulate across calls
    for (detail::Node* n : order) {
        if (n->backprop) n->grad.assign(n->value.size(), 0.0);
    }
    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (n->backprop) {
            n->ensure_grad();
            n->backprop(*n);
        }
    }
}

}  // namespace fedmer
