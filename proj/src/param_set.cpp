#include "fedmer/param_set.hpp"

#include "fedmer/ops.hpp"

namespace fedmer {

Tensor ParamSet::add(const std::string& name, Tensor t, bool trainable) {
    if (index_.count(name)) throw ContractError("param_set: duplicate name " + name);
    if (trainable) t.set_requires_grad(true);
    index_[name] = entries_.size();
    entries_.push_back({name, t, trainable});
    return t;
}

Tensor& ParamSet::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("param_set: unknown name " + name);
    return entries_[it->second].tensor;
}

const Tensor& ParamSet::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("param_set: unknown name " + name);
    return entries_[it->second].tensor;
}

bool ParamSet::conforms(const ParamSet& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (entries_[i].name != other.entries_[i].name) return false;
        if (entries_[i].tensor.shape() != other.entries_[i].tensor.shape()) return false;
    }
    return true;
}

ParamSet ParamSet::clone_values() const {
    ParamSet out;
    for (const Entry& e : entries_) {
        out.add(e.name, Tensor::from(e.tensor.shape(), e.tensor.value()), e.trainable);
    }
    return out;
}

void ParamSet::assign_values(const ParamSet& src) {
    if (!conforms(src)) throw ContractError("param_set: assign between nonconforming sets");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        entries_[i].tensor.value() = src.entries_[i].tensor.value();
    }
}

void ParamSet::zero_grads() {
    for (Entry& e : entries_) e.tensor.zero_grad();
}

std::size_t ParamSet::total_values() const {
    std::size_t n = 0;
    for (const Entry& e : entries_) n += e.tensor.numel();
    return n;
}

ParamSet ParamSet::weighted_sum(const std::vector<const ParamSet*>& sets,
                                const std::vector<double>& weights) {
    if (sets.empty() || sets.size() != weights.size()) {
        throw ContractError("weighted_sum: need matching non-empty sets and weights");
    }
    for (std::size_t i = 1; i < sets.size(); ++i) {
        if (!sets[0]->conforms(*sets[i])) {
            throw ContractError("weighted_sum: nonconforming param sets");
        }
    }
    ParamSet out;
    for (std::size_t e = 0; e < sets[0]->entries().size(); ++e) {
        const auto& ref = sets[0]->entries()[e];
        std::vector<double> v(ref.tensor.numel(), 0.0);
        for (std::size_t s = 0; s < sets.size(); ++s) {
            const auto& src = sets[s]->entries()[e].tensor.value();
            const double w = weights[s];
            for (std::size_t i = 0; i < v.size(); ++i) v[i] += w * src[i];
        }
        out.add(ref.name, Tensor::from(ref.tensor.shape(), std::move(v)), ref.trainable);
    }
    return out;
}

Sgd::Sgd(double lr, double momentum) : lr_(lr), momentum_(momentum) {
    if (lr <= 0.0) throw ContractError("sgd: learning rate must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ContractError("sgd: momentum must be in [0,1)");
}

void Sgd::step(ParamSet& params) {
    for (auto& e : params.entries()) {
        if (!e.trainable) continue;
        if (!e.tensor.has_grad()) {
            throw ContractError("sgd: missing gradient for parameter " + e.name);
        }
        auto& v = velocity_[e.name];
        if (v.size() != e.tensor.numel()) v.assign(e.tensor.numel(), 0.0);
        const auto& g = e.tensor.grad();
        auto& w = e.tensor.value();
        for (std::size_t i = 0; i < w.size(); ++i) {
            v[i] = momentum_ * v[i] + g[i];
            w[i] -= lr_ * v[i];
        }
    }
}

void Sgd::reset() { velocity_.clear(); }

Tensor proximal_penalty(ParamSet& params, const ParamSet& anchor, double alpha4) {
    if (!params.conforms(anchor)) {
        throw ContractError("proximal_penalty: anchor does not conform to params");
    }
    Tensor total = Tensor::scalar(0.0);
    for (std::size_t i = 0; i < params.entries().size(); ++i) {
        auto& e = params.entries()[i];
        if (!e.trainable) continue;
        const auto& a = anchor.entries()[i].tensor;
        Tensor anchor_const = Tensor::from(a.shape(), a.value());
        total = add(total, sum_squares(sub(e.tensor, anchor_const)));
    }
    return mul_scalar(total, 0.5 * alpha4);
}

}  // namespace fedmer
