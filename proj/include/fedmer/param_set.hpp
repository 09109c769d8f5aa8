#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "fedmer/tensor.hpp"

namespace fedmer {

// Ordered, named map of parameter tensors. Order is insertion order, which is
// fixed by model construction; two sets built from the same config conform.
// Buffers (batch-norm running stats) live here too so they travel with the
// model through serialization and aggregation, but the optimizer skips them.
class ParamSet {
public:
    struct Entry {
        std::string name;
        Tensor tensor;
        bool trainable = true;
    };

    // returns a handle sharing the stored tensor's node
    Tensor add(const std::string& name, Tensor t, bool trainable = true);
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;

    std::size_t size() const { return entries_.size(); }
    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<Entry>& entries() { return entries_; }

    // true when names, shapes, and order all match
    bool conforms(const ParamSet& other) const;

    // deep copy with fresh graph-free tensors
    ParamSet clone_values() const;
    // copies values from a conforming set into this set's tensors
    void assign_values(const ParamSet& src);

    void zero_grads();
    std::size_t total_values() const;

    // sum_i weights[i] * sets[i], per entry; sets must conform
    static ParamSet weighted_sum(const std::vector<const ParamSet*>& sets,
                                 const std::vector<double>& weights);

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

// SGD with classical momentum: v = mu*v + g; w -= lr*v.
// Velocity buffers are kept per parameter name.
class Sgd {
public:
    Sgd(double lr, double momentum);

    // updates every trainable entry in place; grads are left untouched
    void step(ParamSet& params);
    void reset();

    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }

private:
    double lr_;
    double momentum_;
    std::map<std::string, std::vector<double>> velocity_;
};

// differentiable (alpha4/2)*||params - anchor||^2 over trainable entries;
// anchor values are treated as constants
Tensor proximal_penalty(ParamSet& params, const ParamSet& anchor, double alpha4);

}  // namespace fedmer
