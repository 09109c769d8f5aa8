#pragma once

#include <cstdint>
#include <vector>

#include "fedmer/tensor.hpp"

namespace fedmer {

// N x N counts, rows = true class, columns = predicted class
struct ConfusionMatrix {
    std::size_t n = 0;
    std::vector<std::uint64_t> counts;

    ConfusionMatrix() = default;
    explicit ConfusionMatrix(std::size_t classes) : n(classes), counts(classes * classes, 0) {}

    void record(std::size_t true_class, std::size_t predicted);
    std::uint64_t at(std::size_t true_class, std::size_t predicted) const {
        return counts[true_class * n + predicted];
    }
    std::uint64_t total() const;
    ConfusionMatrix& operator+=(const ConfusionMatrix& other);
};

struct MetricResult {
    double value = 0.0;
    std::vector<std::size_t> zero_support_classes;  // contributed 0, flagged
};

// unweighted mean over classes of 2*TP / (2*TP + FP + FN)
MetricResult uf1(const ConfusionMatrix& cm);
// unweighted mean over classes of TP / row-sum
MetricResult uar(const ConfusionMatrix& cm);

}  // namespace fedmer
