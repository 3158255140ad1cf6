#pragma once

#include <cstddef>
#include <span>

namespace relabund {

/// Pairwise (tree) summation with a fixed split rule. The split points depend
/// only on the length, so the result is reproducible bit for bit.
inline double pairwise_sum(std::span<const double> xs)
{
    constexpr std::size_t leaf = 16;
    if (xs.size() <= leaf) {
        double acc = 0.0;
        for (double x : xs) acc += x;
        return acc;
    }
    const std::size_t half = xs.size() / 2;
    return pairwise_sum(xs.first(half)) + pairwise_sum(xs.subspan(half));
}

} // namespace relabund
