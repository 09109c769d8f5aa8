#include "fedmer/metrics.hpp"

namespace fedmer {

void ConfusionMatrix::record(std::size_t true_class, std::size_t predicted) {
    if (true_class >= n || predicted >= n) {
        throw ContractError("confusion: class index out of range");
    }
    ++counts[true_class * n + predicted];
}

std::uint64_t ConfusionMatrix::total() const {
    std::uint64_t t = 0;
    for (std::uint64_t c : counts) t += c;
    return t;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
    if (n == 0) {
        *this = other;
        return *this;
    }
    if (other.n != n) throw ContractError("confusion: dimension mismatch in accumulate");
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
    return *this;
}

MetricResult uf1(const ConfusionMatrix& cm) {
    if (cm.n < 2) throw ContractError("uf1: need at least 2 classes");
    MetricResult r;
    double sum = 0.0;
    for (std::size_t c = 0; c < cm.n; ++c) {
        const double tp = static_cast<double>(cm.at(c, c));
        double fp = 0.0, fn = 0.0;
        for (std::size_t k = 0; k < cm.n; ++k) {
            if (k == c) continue;
            fp += static_cast<double>(cm.at(k, c));
            fn += static_cast<double>(cm.at(c, k));
        }
        const double denom = 2.0 * tp + fp + fn;
        if (denom == 0.0) {
            r.zero_support_classes.push_back(c);
            continue;  // contributes 0
        }
        sum += 2.0 * tp / denom;
    }
    r.value = sum / static_cast<double>(cm.n);
    return r;
}

MetricResult uar(const ConfusionMatrix& cm) {
    if (cm.n < 2) throw ContractError("uar: need at least 2 classes");
    MetricResult r;
    double sum = 0.0;
    for (std::size_t c = 0; c < cm.n; ++c) {
        double row = 0.0;
        for (std::size_t k = 0; k < cm.n; ++k) row += static_cast<double>(cm.at(c, k));
        if (row == 0.0) {
            r.zero_support_classes.push_back(c);
            continue;
        }
        sum += static_cast<double>(cm.at(c, c)) / row;
    }
    r.value = sum / static_cast<double>(cm.n);
    return r;
}

}  // namespace fedmer
