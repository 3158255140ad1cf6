#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <span>
#include <vector>

#include <unsupported/Eigen/FFT>

namespace relabund {

/// Linear-interpolation quantile of sorted data (Hyndman-Fan type 7).
inline double quantile_sorted(std::span<const double> sorted, double p)
{
    if (sorted.empty()) return std::numeric_limits<double>::quiet_NaN();
    const double pos = p * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

inline double quantile(std::vector<double> xs, double p)
{
    std::sort(xs.begin(), xs.end());
    return quantile_sorted(xs, p);
}

inline double mean_of(std::span<const double> xs)
{
    double s = 0.0;
    for (double x : xs) s += x;
    return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

inline double variance_of(std::span<const double> xs)
{
    if (xs.size() < 2) return 0.0;
    const double m = mean_of(xs);
    double s = 0.0;
    for (double x : xs) s += (x - m) * (x - m);
    return s / static_cast<double>(xs.size() - 1);
}

namespace detail {

struct ChainMoments {
    double within = 0.0;  // W
    double var_plus = 0.0; // pooled variance estimate
};

inline ChainMoments chain_moments(const std::vector<std::span<const double>>& chains)
{
    const auto m = static_cast<double>(chains.size());
    const auto n = static_cast<double>(chains.front().size());
    double w = 0.0, grand = 0.0;
    std::vector<double> means;
    for (auto ch : chains) {
        means.push_back(mean_of(ch));
        w += variance_of(ch);
        grand += means.back();
    }
    w /= m;
    grand /= m;
    double b = 0.0;
    for (double mu : means) b += (mu - grand) * (mu - grand);
    b = chains.size() > 1 ? n * b / (m - 1.0) : 0.0;
    return {w, (n - 1.0) / n * w + b / n};
}

} // namespace detail

/// Split R-hat: every chain is cut into two halves before comparing
/// between- and within-chain variance.
inline double split_rhat(const std::vector<std::span<const double>>& chains)
{
    if (chains.empty() || chains.front().size() < 4) return std::numeric_limits<double>::quiet_NaN();
    const std::size_t half = chains.front().size() / 2;
    std::vector<std::span<const double>> halves;
    for (auto ch : chains) {
        halves.push_back(ch.first(half));
        halves.push_back(ch.subspan(ch.size() - half, half));
    }
    const auto mom = detail::chain_moments(halves);
    if (mom.within <= 0.0) return mom.var_plus <= 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
    return std::sqrt(mom.var_plus / mom.within);
}

/// Effective sample size from the multi-chain autocorrelation, truncated at
/// the first negative sum of an adjacent pair of lags (Geyer).
inline double effective_sample_size(const std::vector<std::span<const double>>& chains)
{
    if (chains.empty() || chains.front().size() < 4) return std::numeric_limits<double>::quiet_NaN();
    const std::size_t n = chains.front().size();
    const double total = static_cast<double>(n * chains.size());
    const auto mom = detail::chain_moments(chains);
    if (mom.var_plus <= 0.0) return total;

    // Autocovariance of every chain through one zero-padded FFT each.
    std::size_t padded = 1;
    while (padded < 2 * n) padded <<= 1;
    std::vector<double> acov(n, 0.0);
    Eigen::FFT<double> fft;
    std::vector<double> buf(padded);
    std::vector<std::complex<double>> spec;
    std::vector<double> back;
    for (auto ch : chains) {
        const double mu = mean_of(ch);
        std::fill(buf.begin(), buf.end(), 0.0);
        for (std::size_t t = 0; t < n; ++t) buf[t] = ch[t] - mu;
        fft.fwd(spec, buf);
        for (auto& z : spec) z = std::norm(z);
        fft.inv(back, spec);
        for (std::size_t lag = 0; lag < n; ++lag) acov[lag] += back[lag] / static_cast<double>(n);
    }
    for (auto& a : acov) a /= static_cast<double>(chains.size());
    auto mean_autocov = [&](std::size_t lag) { return acov[lag]; };
    auto rho = [&](std::size_t lag) { return 1.0 - (mom.within - mean_autocov(lag)) / mom.var_plus; };

    double pair_sum_total = 0.0;
    for (std::size_t t = 0; t + 1 < n; t += 2) {
        const double pair = (t == 0 ? 1.0 : rho(t)) + rho(t + 1);
        if (pair < 0.0) break;
        pair_sum_total += pair;
    }
    const double tau = std::max(-1.0 + 2.0 * pair_sum_total, 1.0 / std::log10(total));
    return total / tau;
}

} // namespace relabund
