#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "servesim/error.hpp"

namespace servesim {

// Percentile convention, fixed repo-wide: nearest-rank, i.e. the
// ceil(q*n)-th order statistic (1-indexed) of the sorted sample.
inline double percentile(std::span<const double> samples, double q) {
    require(!samples.empty(), "percentile: empty sample set");
    require(q > 0.0 && q <= 1.0, "percentile: q must be in (0, 1]");
    std::vector<double> sorted(samples.begin(), samples.end());
    std::sort(sorted.begin(), sorted.end());
    auto n = static_cast<double>(sorted.size());
    auto rank = static_cast<std::size_t>(std::ceil(q * n));
    if (rank < 1) rank = 1;
    return sorted[rank - 1];
}

inline double percentile(const std::vector<double>& samples, double q) {
    return percentile(std::span<const double>(samples), q);
}

inline double mean(std::span<const double> samples) {
    require(!samples.empty(), "mean: empty sample set");
    double s = 0.0;
    for (double v : samples) s += v;
    return s / static_cast<double>(samples.size());
}

/// Population standard deviation (divisor N).
inline double stddev(std::span<const double> samples) {
    double m = mean(samples);
    double acc = 0.0;
    for (double v : samples) acc += (v - m) * (v - m);
    return std::sqrt(acc / static_cast<double>(samples.size()));
}

}  // namespace servesim
