#pragma once

#include <cstddef>
#include <utility>
#include <vector>

// Brute-force UF1/UAR from raw (true, predicted) lists: per-class counting
// loops, no confusion-matrix arithmetic shared with the implementation.
namespace fedmer::test {

inline double uf1_reference(const std::vector<std::pair<int, int>>& pairs, int classes) {
    double sum = 0.0;
    for (int c = 0; c < classes; ++c) {
        long tp = 0, fp = 0, fn = 0;
        for (const auto& [t, p] : pairs) {
            if (t == c && p == c) ++tp;
            if (t != c && p == c) ++fp;
            if (t == c && p != c) ++fn;
        }
        const double denom = static_cast<double>(2 * tp + fp + fn);
        if (denom > 0.0) sum += 2.0 * static_cast<double>(tp) / denom;
    }
    return sum / static_cast<double>(classes);
}

inline double uar_reference(const std::vector<std::pair<int, int>>& pairs, int classes) {
    double sum = 0.0;
    for (int c = 0; c < classes; ++c) {
        long tp = 0, total = 0;
        for (const auto& [t, p] : pairs) {
            if (t == c) {
                ++total;
                if (p == c) ++tp;
            }
        }
        if (total > 0) sum += static_cast<double>(tp) / static_cast<double>(total);
    }
    return sum / static_cast<double>(classes);
}

}  // namespace fedmer::test
