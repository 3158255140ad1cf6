#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <deque>
#include <exception>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "relabund/diagnostics.hpp"
#include "relabund/errors.hpp"
#include "relabund/model.hpp"
#include "relabund/reparam.hpp"
#include "relabund/survey.hpp"

namespace relabund {

struct PriorBounds {
    double lo = -20.0;
    double hi = 20.0;
};

struct InferenceConfig {
    int n_chains = 4;
    int n_warmup = 5000;
    int n_samples = 10000; // post-warmup sweeps per chain; every `thin`-th is kept
    int thin = 5;
    std::uint64_t rng_seed = 1;
    std::array<PriorBounds, 5> prior{}; // uniform on each log block, indexed by Block
    int map_max_iter = 2000;
    double map_tol = 1e-8;
    bool force = false;     // skip the identifiability gate
    int threads = 1;        // concurrent chains
    bool keep_draws = false;
    double init_jitter = 0.05;
    int reference_site = 0;

    const PriorBounds& bounds(Block b) const { return prior[static_cast<std::size_t>(b)]; }

    void validate() const
    {
        if (n_chains < 1) throw std::invalid_argument("n_chains must be positive");
        if (n_warmup < 0 || n_samples < 0) throw std::invalid_argument("chain lengths must be non-negative");
        if (thin < 1) throw std::invalid_argument("thin must be positive");
        for (const auto& b : prior)
            if (!(b.lo < b.hi)) throw std::invalid_argument("prior bounds need lo < hi");
        if (map_max_iter < 0 || !(map_tol > 0.0)) throw std::invalid_argument("invalid MAP settings");
    }
};

struct MapResult {
    TildeParams params;
    double log_lik = 0.0;
    bool converged = false;
    int iterations = 0;
    double grad_sup_norm = 0.0;
};

struct ParamSummary {
    std::string name;
    double mean = 0.0, median = 0.0, sd = 0.0, q025 = 0.0, q975 = 0.0;
    double rhat = 1.0, ess = 0.0;
};

/// Elementwise posterior summary of a matrix-valued quantity.
struct QuantitySummary {
    Eigen::MatrixXd mean, median, lower, upper; // lower/upper: 2.5% and 97.5%
};

struct DrawSet {
    std::vector<std::string> names;
    std::vector<Eigen::MatrixXd> chains; // retained draws x free params
    int warmup = 0;
    int thin = 1;
};

struct PosteriorSummary {
    Variant variant = Variant::opp_stand_hab;
    bool sampled = false;
    int n_chains = 0;
    int n_retained_per_chain = 0;
    std::vector<ParamSummary> params;
    TildeParams map;
    double map_log_lik = 0.0;
    bool map_converged = false;
    int map_iterations = 0;
    TildeParams posterior_mean;   // log of the natural-scale posterior mean
    TildeParams posterior_median;
    double bic = 0.0;
    int n_free = 0;
    int n_obs = 0;
    int reference_site = 0;
    QuantitySummary relative_abundance; // N_ij / N_i,ref, I x J
    QuantitySummary selection;          // S~_ih, I x H
    std::map<std::string, double> acceptance;
    double max_rhat = 1.0;
    std::vector<std::string> warnings;
    std::optional<DrawSet> draws;
};

inline double compute_bic(const PoissonModel& model, const TildeParams& params)
{
    const double ll = model.log_likelihood(params);
    if (!std::isfinite(ll)) throw DataError("log-likelihood is not finite; BIC undefined");
    return -2.0 * ll + static_cast<double>(model.n_free()) * std::log(static_cast<double>(model.n_obs()));
}

inline double compute_bic(const ModelVariant& v, const SurveyDesign& d, const CountTable& x, const TildeParams& params,
                          const AlphaWeights& alpha = std::nullopt)
{
    return compute_bic(PoissonModel(v, d, x, alpha), params);
}

namespace detail {

inline Eigen::VectorXd lower_bounds(const ParamLayout& layout, const InferenceConfig& cfg)
{
    Eigen::VectorXd lo(layout.size());
    for (int k = 0; k < layout.size(); ++k) lo(k) = cfg.bounds(layout.params()[k].block).lo;
    return lo;
}

inline Eigen::VectorXd upper_bounds(const ParamLayout& layout, const InferenceConfig& cfg)
{
    Eigen::VectorXd hi(layout.size());
    for (int k = 0; k < layout.size(); ++k) hi(k) = cfg.bounds(layout.params()[k].block).hi;
    return hi;
}

/// Closed-form coordinate maximization for the purely multiplicative blocks
/// (log_N, log_E1, log_P): theta <- theta + log(sum X / sum lambda).
inline void multiplicative_sweeps(const PoissonModel& m, TildeParams& p, const InferenceConfig& cfg, int sweeps)
{
    const auto& d = m.design();
    const auto& L = m.layout();
    const int I = d.n_species, C = d.n_cells();
    const int n_cols = m.variant().one_quadrat() ? 1 : d.n_sites;
    const auto& X = m.counts();
    auto clamp_to = [&](double v, Block b) { return std::clamp(v, cfg.bounds(b).lo, cfg.bounds(b).hi); };

    Eigen::MatrixXd lam(I, C);
    auto refresh = [&] {
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < I; ++i) lam(i, c) = m.intensity(p, i, c);
    };
    for (int s = 0; s < sweeps; ++s) {
        refresh();
        Eigen::MatrixXd sx = Eigen::MatrixXd::Zero(I, n_cols), sl = Eigen::MatrixXd::Zero(I, n_cols);
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < I; ++i)
                if (m.scoped(i, c)) {
                    sx(i, m.abundance_column(c)) += X(i, c);
                    sl(i, m.abundance_column(c)) += lam(i, c);
                }
        for (int i = 0; i < I; ++i)
            for (int j = 0; j < n_cols; ++j) {
                if (L.n_index(i, j) < 0 || !(sl(i, j) > 0.0)) continue;
                const double next = sx(i, j) > 0.0 ? p.log_N(i, j) + std::log(sx(i, j) / sl(i, j))
                                                   : cfg.bounds(Block::log_N).lo;
                const double v = clamp_to(next, Block::log_N);
                if (m.variant().one_quadrat()) p.log_N.row(i).setConstant(v);
                else p.log_N(i, j) = v;
            }
        if (!m.variant().uses_opportunistic()) continue;

        refresh();
        for (int c = 0; c < C; ++c) {
            const int slot = m.slot(c);
            if (slot < 0 || L.e_index(slot) < 0) continue;
            double ssx = 0.0, ssl = 0.0;
            for (int i = 0; i < I; ++i)
                if (m.scoped(i, c)) {
                    ssx += X(i, c);
                    ssl += lam(i, c);
                }
            if (ssl > 0.0)
                p.log_E1(slot) = clamp_to(ssx > 0.0 ? p.log_E1(slot) + std::log(ssx / ssl) : cfg.bounds(Block::log_E1).lo,
                                          Block::log_E1);
        }
        refresh();
        for (int i = 0; i < I; ++i) {
            if (L.p_index(i) < 0) continue;
            double ssx = 0.0, ssl = 0.0;
            for (int c = 0; c < C; ++c)
                if (m.slot(c) >= 0 && m.scoped(i, c)) {
                    ssx += X(i, c);
                    ssl += lam(i, c);
                }
            if (ssl > 0.0)
                p.log_P(i) = clamp_to(ssx > 0.0 ? p.log_P(i) + std::log(ssx / ssl) : cfg.bounds(Block::log_P).lo,
                                      Block::log_P);
        }
    }
}

inline TildeParams initial_point(const PoissonModel& m, const InferenceConfig& cfg)
{
    TildeParams p = TildeParams::zeros(m.design());
    // Start at zero or the nearest admissible value of each block.
    const auto& L = m.layout();
    Eigen::VectorXd theta = L.pack(p);
    theta = theta.cwiseMax(lower_bounds(L, cfg)).cwiseMin(upper_bounds(L, cfg));
    L.unpack(theta, p);
    multiplicative_sweeps(m, p, cfg, 25);
    return p;
}

inline Eigen::VectorXd projected_gradient(const Eigen::VectorXd& x, const Eigen::VectorXd& g, const Eigen::VectorXd& lo,
                                          const Eigen::VectorXd& hi)
{
    Eigen::VectorXd pg = g;
    for (Eigen::Index k = 0; k < x.size(); ++k)
        if ((x(k) <= lo(k) && g(k) < 0.0) || (x(k) >= hi(k) && g(k) > 0.0)) pg(k) = 0.0;
    return pg;
}

} // namespace detail

/// Maximizes the log-posterior (log-likelihood on the prior box) by projected
/// quasi-Newton ascent with an Armijo backtracking line search.
inline MapResult fit_map(const PoissonModel& model, const InferenceConfig& cfg)
{
    cfg.validate();
    const auto& L = model.layout();
    const Eigen::VectorXd lo = detail::lower_bounds(L, cfg), hi = detail::upper_bounds(L, cfg);

    TildeParams p = detail::initial_point(model, cfg);
    double f = model.log_likelihood(p);
    if (!std::isfinite(f)) throw DataError("log-likelihood is not finite at the initial point");

    Eigen::VectorXd x = L.pack(p), fisher;
    Eigen::VectorXd g = model.gradient(p, &fisher);
    const int n = L.size();
    constexpr int memory = 12;
    std::deque<std::pair<Eigen::VectorXd, Eigen::VectorXd>> pairs; // (s, y) with y = -(g_new - g_old)

    MapResult res;
    auto eval = [&](const Eigen::VectorXd& at, TildeParams& out) {
        L.unpack(at, out);
        return model.log_likelihood(out);
    };

    int iter = 0;
    for (; iter < cfg.map_max_iter; ++iter) {
        const Eigen::VectorXd pg = detail::projected_gradient(x, g, lo, hi);
        res.grad_sup_norm = n > 0 ? pg.cwiseAbs().maxCoeff() : 0.0;
        if (res.grad_sup_norm < cfg.map_tol) {
            res.converged = true;
            break;
        }
        std::vector<bool> active(static_cast<std::size_t>(n));
        for (int k = 0; k < n; ++k) active[static_cast<std::size_t>(k)] = pg(k) == 0.0 && g(k) != 0.0;
        auto mask = [&](Eigen::VectorXd v) {
            for (int k = 0; k < n; ++k)
                if (active[static_cast<std::size_t>(k)]) v(k) = 0.0;
            return v;
        };
        const Eigen::VectorXd h0 = fisher.cwiseMax(1e-8).cwiseInverse();

        // Two-loop recursion on the masked gradient.
        auto lbfgs_direction = [&]() {
            Eigen::VectorXd q = mask(g);
            std::vector<double> alpha(pairs.size());
            for (std::size_t t = pairs.size(); t-- > 0;) {
                const auto& [s, y] = pairs[t];
                alpha[t] = s.dot(q) / y.dot(s);
                q -= alpha[t] * y;
            }
            Eigen::VectorXd r = h0.cwiseProduct(q);
            if (!pairs.empty()) {
                const auto& [s, y] = pairs.back();
                const double gamma = s.dot(y) / y.dot(h0.cwiseProduct(y));
                if (gamma > 0.0 && std::isfinite(gamma)) r *= gamma;
            }
            for (std::size_t t = 0; t < pairs.size(); ++t) {
                const auto& [s, y] = pairs[t];
                const double beta = y.dot(r) / y.dot(s);
                r += s * (alpha[t] - beta);
            }
            return mask(r);
        };

        bool stepped = false;
        for (int attempt = 0; attempt < 2 && !stepped; ++attempt) {
            Eigen::VectorXd dir = attempt == 0 && !pairs.empty() ? lbfgs_direction() : mask(h0.cwiseProduct(g));
            if (!(dir.dot(g) > 0.0)) dir = mask(h0.cwiseProduct(g));
            const double biggest = dir.cwiseAbs().maxCoeff();
            double t = biggest > 5.0 ? 5.0 / biggest : 1.0;
            for (int bt = 0; bt < 60; ++bt, t *= 0.5) {
                const Eigen::VectorXd xn = (x + t * dir).cwiseMax(lo).cwiseMin(hi);
                TildeParams pn = p;
                const double fn = eval(xn, pn);
                if (std::isfinite(fn) && fn >= f + 1e-4 * g.dot(xn - x) && fn >= f) {
                    Eigen::VectorXd fisher_n;
                    const Eigen::VectorXd gn = model.gradient(pn, &fisher_n);
                    const Eigen::VectorXd s = xn - x, y = -(gn - g);
                    if (s.dot(y) > 1e-12 * s.norm() * y.norm()) {
                        pairs.emplace_back(s, y);
                        if (pairs.size() > memory) pairs.pop_front();
                    }
                    const bool moved = (xn - x).cwiseAbs().maxCoeff() > 0.0;
                    x = xn;
                    p = std::move(pn);
                    f = fn;
                    g = gn;
                    fisher = fisher_n;
                    stepped = moved;
                    break;
                }
            }
            if (!stepped) pairs.clear();
        }
        if (!stepped) break;
    }
    const Eigen::VectorXd pg = detail::projected_gradient(x, g, lo, hi);
    res.grad_sup_norm = n > 0 ? pg.cwiseAbs().maxCoeff() : 0.0;
    res.converged = res.grad_sup_norm < cfg.map_tol;
    res.iterations = iter;
    res.params = std::move(p);
    res.log_lik = f;
    return res;
}

// ---------------------------------------------------------------------------
// Metropolis-within-Gibbs

namespace detail {

/// Which (species, cell) pairs each update touches, and the count sums that
/// make the multiplicative updates O(touched pairs).
struct SamplerIndex {
    int n_cols = 0;
    std::vector<std::vector<int>> abundance_cells; // by species * n_cols + col
    std::vector<double> abundance_sumx;
    std::vector<int> effort_cell;                  // by opportunistic slot
    std::vector<std::vector<int>> effort_species;
    std::vector<double> effort_sumx;
    std::vector<std::vector<int>> report_cells;    // by species, opportunistic only
    std::vector<double> report_sumx;
    std::vector<std::vector<int>> species_cells;   // every scoped cell of a species
    std::vector<std::vector<int>> species_std_cells;
    std::vector<int> opp_cells;
    std::vector<int> std_cells;
    std::vector<std::vector<int>> column_cells;    // by abundance column
    std::vector<std::vector<int>> column_slots;

    explicit SamplerIndex(const PoissonModel& m)
    {
        const auto& d = m.design();
        const int I = d.n_species, C = d.n_cells();
        const auto& X = m.counts();
        const auto n_opp = static_cast<std::size_t>(d.n_opportunistic_cells());
        n_cols = m.variant().one_quadrat() ? 1 : d.n_sites;
        abundance_cells.resize(static_cast<std::size_t>(I * n_cols));
        abundance_sumx.assign(static_cast<std::size_t>(I * n_cols), 0.0);
        effort_cell.assign(n_opp, -1);
        effort_species.resize(n_opp);
        effort_sumx.assign(n_opp, 0.0);
        report_cells.resize(static_cast<std::size_t>(I));
        report_sumx.assign(static_cast<std::size_t>(I), 0.0);
        species_cells.resize(static_cast<std::size_t>(I));
        species_std_cells.resize(static_cast<std::size_t>(I));
        column_cells.resize(static_cast<std::size_t>(n_cols));
        column_slots.resize(static_cast<std::size_t>(n_cols));
        for (int c = 0; c < C; ++c) {
            const int slot = m.slot(c);
            const auto col = static_cast<std::size_t>(m.abundance_column(c));
            column_cells[col].push_back(c);
            if (slot >= 0) {
                effort_cell[static_cast<std::size_t>(slot)] = c;
                opp_cells.push_back(c);
                column_slots[col].push_back(slot);
            } else {
                std_cells.push_back(c);
            }
            for (int i = 0; i < I; ++i) {
                if (!m.scoped(i, c)) continue;
                const auto a = static_cast<std::size_t>(i) * static_cast<std::size_t>(n_cols) + col;
                abundance_cells[a].push_back(c);
                abundance_sumx[a] += X(i, c);
                species_cells[static_cast<std::size_t>(i)].push_back(c);
                if (slot >= 0) {
                    effort_species[static_cast<std::size_t>(slot)].push_back(i);
                    effort_sumx[static_cast<std::size_t>(slot)] += X(i, c);
                    report_cells[static_cast<std::size_t>(i)].push_back(c);
                    report_sumx[static_cast<std::size_t>(i)] += X(i, c);
                } else {
                    species_std_cells[static_cast<std::size_t>(i)].push_back(c);
                }
            }
        }
    }
};

enum class Move { abundance, effort, report, selection, preference, site_ridge, species_ridge, habitat_ridge, preference_shear };

inline const char* move_name(Move m)
{
    switch (m) {
    case Move::abundance: return "log_N";
    case Move::effort: return "log_E1";
    case Move::report: return "log_P";
    case Move::selection: return "log_S";
    case Move::preference: return "log_q";
    case Move::site_ridge: return "ridge_site";
    case Move::species_ridge: return "ridge_species";
    case Move::habitat_ridge: return "ridge_habitat";
    case Move::preference_shear: return "shear_preference";
    }
    return "?";
}

struct UpdateUnit {
    Move move;
    int target = 0;            // abundance slot, opportunistic slot, species, column or habitat
    std::vector<int> free_idx; // layout indices moved together
    double log_step = 0.0;
    double accept_rate = 0.44;
    long proposals = 0;
    long accepted = 0;
    long post_proposals = 0;
    long post_accepted = 0;
};

struct ChainOutput {
    Eigen::MatrixXd draws;     // retained x free
    Eigen::MatrixXd relative;  // retained x (I*J), column-major (i + I*j)
    Eigen::MatrixXd selection; // retained x (I*H)
    std::map<std::string, std::pair<long, long>> acceptance;
};

/// One chain. Besides the coordinate blocks it proposes moves along the
/// directions that leave the opportunistic intensities unchanged (abundance
/// against effort, abundance against reporting, selection against
/// preference); those are informed by standardized data alone and would
/// otherwise mix slowly. A shear move shifts log_q while rescaling each
/// opportunistic effort by its change in habitat-weighted area.
class Chain {
public:
    Chain(const PoissonModel& m, const SamplerIndex& idx, const InferenceConfig& cfg, const Eigen::VectorXd& fisher,
          TildeParams start, std::mt19937_64 rng)
        : m_(m), idx_(idx), cfg_(cfg), L_(m.layout()), p_(std::move(start)), rng_(std::move(rng)),
          lo_(lower_bounds(L_, cfg)), hi_(upper_bounds(L_, cfg))
    {
        const auto& d = m_.design();
        const int I = d.n_species, H = d.n_habitats, C = d.n_cells();
        s_nat_ = p_.log_S.array().exp().matrix();
        q_nat_ = p_.log_q.array().exp().matrix();
        base_ = Eigen::MatrixXd::Zero(I, C);
        mix_ = Eigen::MatrixXd::Zero(I, C);
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < I; ++i)
                if (m_.scoped(i, c)) {
                    refresh_base(i, c);
                    mix_(i, c) = mix_with(i, c, s_nat_, q_nat_);
                }

        auto initial_step = [&](const std::vector<int>& free) {
            double info = 0.0;
            for (int k : free) info = std::max(info, fisher(k));
            const double scale = free.size() == 1 ? 2.4 : 2.4 / std::sqrt(static_cast<double>(free.size()));
            return std::log(std::clamp(scale / std::sqrt(std::max(info, 1e-4)), 1e-5, 5.0));
        };
        auto add = [&](Move mv, int target, std::vector<int> free, double log_step) {
            if (free.empty()) return;
            UpdateUnit u;
            u.move = mv;
            u.target = target;
            u.accept_rate = free.size() == 1 || mv >= Move::site_ridge ? 0.44 : 0.234;
            u.log_step = log_step;
            u.free_idx = std::move(free);
            units_.push_back(std::move(u));
        };
        auto add_block = [&](Move mv, int target, std::vector<int> free) {
            const double st = free.empty() ? 0.0 : initial_step(free);
            add(mv, target, std::move(free), st);
        };
        const int n_cols = idx_.n_cols;
        for (int i = 0; i < I; ++i)
            for (int j = 0; j < n_cols; ++j)
                if (const int k = L_.n_index(i, j); k >= 0) add_block(Move::abundance, i * n_cols + j, {k});
        for (int i = 0; i < I; ++i) {
            std::vector<int> free;
            for (int h = 1; h < H; ++h)
                if (L_.s_index(i, h) >= 0) free.push_back(L_.s_index(i, h));
            add_block(Move::selection, i, std::move(free));
        }
        {
            std::vector<int> free;
            for (int h = 1; h < H; ++h)
                if (L_.q_index(h) >= 0) free.push_back(L_.q_index(h));
            add_block(Move::preference, 0, std::move(free));
        }
        for (int i = 0; i < I; ++i)
            if (L_.p_index(i) >= 0) add_block(Move::report, i, {L_.p_index(i)});
        for (int s = 0; s < d.n_opportunistic_cells(); ++s)
            if (L_.e_index(s) >= 0) add_block(Move::effort, s, {L_.e_index(s)});

        if (!m_.variant().uses_opportunistic()) return;
        auto ridge_step = [](double info) { return std::log(std::clamp(1.0 / std::sqrt(std::max(info, 1e-4)), 1e-5, 2.0)); };
        for (int col = 0; col < n_cols; ++col) {
            std::vector<int> free;
            double info = 0.0;
            for (int i = 0; i < I; ++i)
                if (L_.n_index(i, col) >= 0) free.push_back(L_.n_index(i, col));
            for (int slot : idx_.column_slots[static_cast<std::size_t>(col)])
                if (L_.e_index(slot) >= 0) free.push_back(L_.e_index(slot));
            for (int c : idx_.column_cells[static_cast<std::size_t>(col)])
                if (m_.slot(c) < 0)
                    for (int i = 0; i < I; ++i)
                        if (m_.scoped(i, c)) info += lambda(i, c);
            if (!idx_.column_slots[static_cast<std::size_t>(col)].empty()) add(Move::site_ridge, col, std::move(free), ridge_step(info));
        }
        for (int i = 0; i < I; ++i) {
            if (L_.p_index(i) < 0) continue;
            std::vector<int> free{L_.p_index(i)};
            for (int col = 0; col < n_cols; ++col)
                if (L_.n_index(i, col) >= 0) free.push_back(L_.n_index(i, col));
            double info = 0.0;
            for (int c : idx_.species_std_cells[static_cast<std::size_t>(i)]) info += lambda(i, c);
            add(Move::species_ridge, i, std::move(free), ridge_step(info));
        }
        for (int h = 1; h < H; ++h) {
            if (L_.q_index(h) < 0) continue;
            std::vector<int> free{L_.q_index(h)};
            for (int i = 0; i < I; ++i)
                if (L_.s_index(i, h) >= 0) free.push_back(L_.s_index(i, h));
            double info = 0.0;
            for (int c : idx_.std_cells)
                for (int i = 0; i < I; ++i)
                    if (m_.scoped(i, c)) info += 0.25 * lambda(i, c);
            add(Move::habitat_ridge, h, std::move(free), ridge_step(info));
        }
        std::vector<int> shear;
        for (int h = 1; h < H; ++h)
            if (L_.q_index(h) >= 0) shear.push_back(L_.q_index(h));
        if (!shear.empty()) {
            const double st = initial_step(shear);
            add(Move::preference_shear, 0, std::move(shear), st);
        }
    }

    ChainOutput run()
    {
        const auto& d = m_.design();
        const int I = d.n_species, J = d.n_sites, H = d.n_habitats;
        const int retained = cfg_.n_samples / cfg_.thin;
        ChainOutput out;
        out.draws.resize(retained, L_.size());
        out.relative.resize(retained, I * J);
        out.selection.resize(retained, I * H);
        int row = 0;
        for (int it = 0; it < cfg_.n_warmup + cfg_.n_samples; ++it) {
            const bool warmup = it < cfg_.n_warmup;
            for (auto& u : units_) step(u, warmup);
            if (!warmup && (it - cfg_.n_warmup + 1) % cfg_.thin == 0 && row < retained) {
                out.draws.row(row) = L_.pack(p_).transpose();
                const Eigen::MatrixXd rel = relative_abundances(p_, d, cfg_.reference_site);
                out.relative.row(row) = Eigen::Map<const Eigen::RowVectorXd>(rel.data(), rel.size());
                out.selection.row(row) = Eigen::Map<const Eigen::RowVectorXd>(s_nat_.data(), s_nat_.size());
                ++row;
            }
        }
        for (const auto& u : units_) {
            auto& acc = out.acceptance[move_name(u.move)];
            acc.first += u.post_accepted;
            acc.second += u.post_proposals;
        }
        return out;
    }

private:
    double mix_with(int i, int c, const Eigen::MatrixXd& s, const Eigen::VectorXd& q) const
    {
        const auto& rec = m_.design().cells[c];
        const bool hab = m_.variant().habitat();
        const auto& alpha = m_.alpha();
        double mix = 0.0;
        for (Eigen::Index h = 0; h < rec.habitat_area.size(); ++h) {
            const double qq = (hab && rec.dataset == kOpportunistic) ? q(h) : 1.0;
            const double ss = hab ? s(i, h) : 1.0;
            const double a = alpha ? (*alpha)(h, rec.dataset) : 1.0;
            mix += a * qq * ss * rec.habitat_area(h);
        }
        return mix;
    }

    void refresh_base(int i, int c) { base_(i, c) = std::exp(m_.log_base(p_, i, c)); }
    double lambda(int i, int c) const { return base_(i, c) * mix_(i, c); }

    bool accept(double log_ratio)
    {
        if (log_ratio >= 0.0) return true;
        return std::log(uniform_(rng_)) < log_ratio;
    }

    bool in_box(int k, double v) const { return v >= lo_(k) && v <= hi_(k); }

    void step(UpdateUnit& u, bool warmup)
    {
        bool ok = false;
        switch (u.move) {
        case Move::abundance: ok = update_abundance(u); break;
        case Move::effort: ok = update_effort(u); break;
        case Move::report: ok = update_report(u); break;
        case Move::selection: ok = update_selection(u); break;
        case Move::preference: ok = update_preference(u); break;
        case Move::site_ridge: ok = update_site_ridge(u); break;
        case Move::species_ridge: ok = update_species_ridge(u); break;
        case Move::habitat_ridge: ok = update_habitat_ridge(u); break;
        case Move::preference_shear: ok = update_preference_shear(u); break;
        }
        ++u.proposals;
        if (ok) ++u.accepted;
        if (warmup) {
            const double gamma = std::pow(static_cast<double>(u.proposals) + 1.0, -0.6);
            u.log_step += gamma * ((ok ? 1.0 : 0.0) - u.accept_rate);
            u.log_step = std::clamp(u.log_step, std::log(1e-6), std::log(10.0));
        } else {
            ++u.post_proposals;
            if (ok) ++u.post_accepted;
        }
    }

    double draw_step(const UpdateUnit& u) { return std::exp(u.log_step) * normal_(rng_); }

    /// Log acceptance ratio when every listed intensity is scaled by exp(delta).
    double scaled_ratio(double delta, double sum_x, double sum_lambda) const
    {
        return delta * sum_x - std::expm1(delta) * sum_lambda;
    }

    void set_abundance(int i, int col, double v)
    {
        if (m_.variant().one_quadrat()) p_.log_N.row(i).setConstant(v);
        else p_.log_N(i, col) = v;
    }

    bool update_abundance(UpdateUnit& u)
    {
        const int k = u.free_idx.front();
        const int i = u.target / idx_.n_cols, col = u.target % idx_.n_cols;
        const double delta = draw_step(u);
        const double prop = p_.log_N(i, col) + delta;
        if (!in_box(k, prop)) return false;
        const auto& cells = idx_.abundance_cells[static_cast<std::size_t>(u.target)];
        double sum_lambda = 0.0;
        for (int c : cells) sum_lambda += lambda(i, c);
        if (!accept(scaled_ratio(delta, idx_.abundance_sumx[static_cast<std::size_t>(u.target)], sum_lambda))) return false;
        set_abundance(i, col, prop);
        for (int c : cells) refresh_base(i, c);
        return true;
    }

    bool update_effort(UpdateUnit& u)
    {
        const int k = u.free_idx.front(), slot = u.target;
        const double delta = draw_step(u);
        const double prop = p_.log_E1(slot) + delta;
        if (!in_box(k, prop)) return false;
        const int c = idx_.effort_cell[static_cast<std::size_t>(slot)];
        const auto& species = idx_.effort_species[static_cast<std::size_t>(slot)];
        double sum_lambda = 0.0;
        for (int i : species) sum_lambda += lambda(i, c);
        if (!accept(scaled_ratio(delta, idx_.effort_sumx[static_cast<std::size_t>(slot)], sum_lambda))) return false;
        p_.log_E1(slot) = prop;
        for (int i : species) refresh_base(i, c);
        return true;
    }

    bool update_report(UpdateUnit& u)
    {
        const int k = u.free_idx.front(), i = u.target;
        const double delta = draw_step(u);
        const double prop = p_.log_P(i) + delta;
        if (!in_box(k, prop)) return false;
        const auto& cells = idx_.report_cells[static_cast<std::size_t>(i)];
        double sum_lambda = 0.0;
        for (int c : cells) sum_lambda += lambda(i, c);
        if (!accept(scaled_ratio(delta, idx_.report_sumx[static_cast<std::size_t>(i)], sum_lambda))) return false;
        p_.log_P(i) = prop;
        for (int c : cells) refresh_base(i, c);
        return true;
    }

    /// Log ratio for new habitat mixes of one species over a set of cells;
    /// the new mixes are left in scratch_.
    template <class MixFn>
    double mix_ratio(int i, const std::vector<int>& cells, const MixFn& new_mix)
    {
        const auto& X = m_.counts();
        scratch_.resize(static_cast<Eigen::Index>(cells.size()));
        double lr = 0.0;
        for (std::size_t n = 0; n < cells.size(); ++n) {
            const int c = cells[n];
            const double mnew = new_mix(c), mold = mix_(i, c);
            scratch_(static_cast<Eigen::Index>(n)) = mnew;
            const double x = X(i, c);
            lr += (x > 0.0 ? x * std::log(mnew / mold) : 0.0) - base_(i, c) * (mnew - mold);
        }
        return lr;
    }

    bool update_selection(UpdateUnit& u)
    {
        const int i = u.target;
        Eigen::RowVectorXd log_row = p_.log_S.row(i);
        for (int k : u.free_idx) {
            const int h = L_.params()[static_cast<std::size_t>(k)].col;
            log_row(h) += draw_step(u);
            if (!in_box(k, log_row(h))) return false;
        }
        Eigen::MatrixXd& s = s_prop_;
        s = s_nat_;
        s.row(i) = log_row.array().exp().matrix();
        const auto& cells = idx_.species_cells[static_cast<std::size_t>(i)];
        const double lr = mix_ratio(i, cells, [&](int c) { return mix_with(i, c, s, q_nat_); });
        if (!accept(lr)) return false;
        p_.log_S.row(i) = log_row;
        s_nat_.row(i) = s.row(i);
        for (std::size_t n = 0; n < cells.size(); ++n) mix_(i, cells[n]) = scratch_(static_cast<Eigen::Index>(n));
        return true;
    }

    bool update_preference(UpdateUnit& u)
    {
        Eigen::VectorXd log_q = p_.log_q;
        for (int k : u.free_idx) {
            const int h = L_.params()[static_cast<std::size_t>(k)].row;
            log_q(h) += draw_step(u);
            if (!in_box(k, log_q(h))) return false;
        }
        const Eigen::VectorXd q = log_q.array().exp().matrix();
        const int I = m_.design().n_species;
        const auto& X = m_.counts();
        Eigen::MatrixXd& fresh = fresh_;
        fresh.resize(I, static_cast<Eigen::Index>(idx_.opp_cells.size()));
        double lr = 0.0;
        for (std::size_t n = 0; n < idx_.opp_cells.size(); ++n) {
            const int c = idx_.opp_cells[n];
            for (int i = 0; i < I; ++i) {
                if (!m_.scoped(i, c)) continue;
                const double mnew = mix_with(i, c, s_nat_, q), mold = mix_(i, c);
                fresh(i, static_cast<Eigen::Index>(n)) = mnew;
                const double x = X(i, c);
                lr += (x > 0.0 ? x * std::log(mnew / mold) : 0.0) - base_(i, c) * (mnew - mold);
            }
        }
        if (!accept(lr)) return false;
        p_.log_q = log_q;
        q_nat_ = q;
        for (std::size_t n = 0; n < idx_.opp_cells.size(); ++n) {
            const int c = idx_.opp_cells[n];
            for (int i = 0; i < I; ++i)
                if (m_.scoped(i, c)) mix_(i, c) = fresh(i, static_cast<Eigen::Index>(n));
        }
        return true;
    }

    /// log_N[., col] - delta, log_E1 of the column's opportunistic cells + delta.
    bool update_site_ridge(UpdateUnit& u)
    {
        const int col = u.target, I = m_.design().n_species;
        const double delta = draw_step(u);
        for (int i = 0; i < I; ++i)
            if (const int k = L_.n_index(i, col); k >= 0 && !in_box(k, p_.log_N(i, col) - delta)) return false;
        for (int slot : idx_.column_slots[static_cast<std::size_t>(col)])
            if (const int k = L_.e_index(slot); k >= 0 && !in_box(k, p_.log_E1(slot) + delta)) return false;
        const auto& X = m_.counts();
        double sum_x = 0.0, sum_lambda = 0.0;
        for (int c : idx_.column_cells[static_cast<std::size_t>(col)]) {
            if (m_.slot(c) >= 0) continue;
            for (int i = 0; i < I; ++i)
                if (m_.scoped(i, c) && L_.n_index(i, col) >= 0) {
                    sum_x += X(i, c);
                    sum_lambda += lambda(i, c);
                }
        }
        if (!accept(scaled_ratio(-delta, sum_x, sum_lambda))) return false;
        for (int i = 0; i < I; ++i)
            if (L_.n_index(i, col) >= 0) set_abundance(i, col, p_.log_N(i, col) - delta);
        for (int slot : idx_.column_slots[static_cast<std::size_t>(col)])
            if (L_.e_index(slot) >= 0) p_.log_E1(slot) += delta;
        for (int c : idx_.column_cells[static_cast<std::size_t>(col)])
            for (int i = 0; i < I; ++i)
                if (m_.scoped(i, c)) refresh_base(i, c);
        return true;
    }

    /// log_P[i] + delta, log_N[i, .] - delta.
    bool update_species_ridge(UpdateUnit& u)
    {
        const int i = u.target;
        const double delta = draw_step(u);
        if (!in_box(L_.p_index(i), p_.log_P(i) + delta)) return false;
        for (int col = 0; col < idx_.n_cols; ++col)
            if (const int k = L_.n_index(i, col); k >= 0 && !in_box(k, p_.log_N(i, col) - delta)) return false;
        const auto& X = m_.counts();
        double sum_x = 0.0, sum_lambda = 0.0;
        for (int c : idx_.species_std_cells[static_cast<std::size_t>(i)]) {
            sum_x += X(i, c);
            sum_lambda += lambda(i, c);
        }
        if (!accept(scaled_ratio(-delta, sum_x, sum_lambda))) return false;
        p_.log_P(i) += delta;
        for (int col = 0; col < idx_.n_cols; ++col)
            if (L_.n_index(i, col) >= 0) set_abundance(i, col, p_.log_N(i, col) - delta);
        for (int c : idx_.species_cells[static_cast<std::size_t>(i)]) refresh_base(i, c);
        return true;
    }

    /// log_q[h] + delta, log_S[., h] - delta.
    bool update_habitat_ridge(UpdateUnit& u)
    {
        const int h = u.target, I = m_.design().n_species;
        const double delta = draw_step(u);
        if (!in_box(L_.q_index(h), p_.log_q(h) + delta)) return false;
        for (int i = 0; i < I; ++i)
            if (const int k = L_.s_index(i, h); k >= 0 && !in_box(k, p_.log_S(i, h) - delta)) return false;
        Eigen::MatrixXd& s = s_prop_;
        s = s_nat_;
        Eigen::MatrixXd log_s = p_.log_S;
        for (int i = 0; i < I; ++i)
            if (L_.s_index(i, h) >= 0) {
                log_s(i, h) -= delta;
                s(i, h) = std::exp(log_s(i, h));
            }
        const auto& X = m_.counts();
        double lr = 0.0;
        for (int c : idx_.std_cells)
            for (int i = 0; i < I; ++i) {
                if (!m_.scoped(i, c)) continue;
                const double mnew = mix_with(i, c, s, q_nat_), mold = mix_(i, c);
                const double x = X(i, c);
                lr += (x > 0.0 ? x * std::log(mnew / mold) : 0.0) - base_(i, c) * (mnew - mold);
            }
        if (!accept(lr)) return false;
        p_.log_S = log_s;
        s_nat_ = s;
        p_.log_q(h) += delta;
        q_nat_(h) = std::exp(p_.log_q(h));
        for (int c = 0; c < m_.design().n_cells(); ++c)
            for (int i = 0; i < I; ++i)
                if (m_.scoped(i, c)) mix_(i, c) = mix_with(i, c, s_nat_, q_nat_);
        return true;
    }

    static double preference_area(const CellRecord& rec, const Eigen::VectorXd& q)
    {
        double a = 0.0;
        for (Eigen::Index h = 0; h < rec.habitat_area.size(); ++h) a += q(h) * rec.habitat_area(h);
        return a;
    }

    /// log_q + delta, log_E1[c] - log(sum_h q'_h V_hc / sum_h q_h V_hc).
    /// The map is a unit-Jacobian shear, so the proposal stays symmetric.
    bool update_preference_shear(UpdateUnit& u)
    {
        Eigen::VectorXd log_q = p_.log_q;
        for (int k : u.free_idx) {
            const int h = L_.params()[static_cast<std::size_t>(k)].row;
            log_q(h) += draw_step(u);
            if (!in_box(k, log_q(h))) return false;
        }
        const Eigen::VectorXd q = log_q.array().exp().matrix();
        const auto& d = m_.design();
        const int I = d.n_species;
        Eigen::VectorXd log_e = p_.log_E1;
        for (int c : idx_.opp_cells) {
            const int slot = m_.slot(c);
            if (L_.e_index(slot) < 0) continue;
            log_e(slot) -= std::log(preference_area(d.cells[c], q) / preference_area(d.cells[c], q_nat_));
            if (!in_box(L_.e_index(slot), log_e(slot))) return false;
        }
        const auto& X = m_.counts();
        Eigen::MatrixXd& fresh = fresh_;
        fresh.resize(I, static_cast<Eigen::Index>(idx_.opp_cells.size()));
        double lr = 0.0;
        for (std::size_t n = 0; n < idx_.opp_cells.size(); ++n) {
            const int c = idx_.opp_cells[n];
            const double shift = log_e(m_.slot(c)) - p_.log_E1(m_.slot(c));
            for (int i = 0; i < I; ++i) {
                if (!m_.scoped(i, c)) continue;
                const double mnew = mix_with(i, c, s_nat_, q);
                fresh(i, static_cast<Eigen::Index>(n)) = mnew;
                const double lnew = base_(i, c) * std::exp(shift) * mnew;
                const double x = X(i, c);
                lr += (x > 0.0 ? x * (shift + std::log(mnew / mix_(i, c))) : 0.0) - (lnew - lambda(i, c));
            }
        }
        if (!accept(lr)) return false;
        p_.log_q = log_q;
        q_nat_ = q;
        p_.log_E1 = log_e;
        for (std::size_t n = 0; n < idx_.opp_cells.size(); ++n) {
            const int c = idx_.opp_cells[n];
            for (int i = 0; i < I; ++i)
                if (m_.scoped(i, c)) {
                    mix_(i, c) = fresh(i, static_cast<Eigen::Index>(n));
                    refresh_base(i, c);
                }
        }
        return true;
    }

    const PoissonModel& m_;
    const SamplerIndex& idx_;
    const InferenceConfig& cfg_;
    const ParamLayout& L_;
    TildeParams p_;
    std::mt19937_64 rng_;
    Eigen::VectorXd lo_, hi_;
    Eigen::MatrixXd s_nat_, s_prop_;
    Eigen::VectorXd q_nat_;
    Eigen::MatrixXd base_; // exp(log N E P) per scoped pair
    Eigen::MatrixXd mix_;  // habitat mix per scoped pair
    Eigen::MatrixXd fresh_;
    Eigen::VectorXd scratch_;
    std::vector<UpdateUnit> units_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

inline std::mt19937_64 chain_rng(std::uint64_t seed, int chain)
{
    std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(chain), 0x9e3779b9u};
    return std::mt19937_64(seq);
}

inline QuantitySummary summarize_columns(const std::vector<const Eigen::MatrixXd*>& chains, Eigen::Index rows,
                                         Eigen::Index cols)
{
    QuantitySummary q{Eigen::MatrixXd(rows, cols), Eigen::MatrixXd(rows, cols), Eigen::MatrixXd(rows, cols),
                      Eigen::MatrixXd(rows, cols)};
    std::vector<double> pooled;
    for (Eigen::Index k = 0; k < rows * cols; ++k) {
        pooled.clear();
        for (const auto* ch : chains)
            for (Eigen::Index r = 0; r < ch->rows(); ++r) pooled.push_back((*ch)(r, k));
        const double mu = mean_of(pooled);
        std::sort(pooled.begin(), pooled.end());
        const Eigen::Index i = k % rows, j = k / rows;
        q.mean(i, j) = mu;
        q.median(i, j) = quantile_sorted(pooled, 0.5);
        q.lower(i, j) = quantile_sorted(pooled, 0.025);
        q.upper(i, j) = quantile_sorted(pooled, 0.975);
    }
    return q;
}

inline QuantitySummary point_quantity(const Eigen::MatrixXd& value) { return {value, value, value, value}; }

inline void add_data_warnings(const PoissonModel& m, std::vector<std::string>& warnings)
{
    const auto& d = m.design();
    for (int i = 0; i < d.n_species; ++i) {
        bool scoped_any = false;
        double total = 0.0;
        for (int c = 0; c < d.n_cells(); ++c)
            if (m.scoped(i, c)) {
                scoped_any = true;
                total += m.counts()(i, c);
            }
        if (scoped_any && total == 0.0)
            warnings.push_back("species " + std::to_string(i) +
                               " has no observations; its posterior is dominated by the prior");
    }
}

} // namespace detail

/// Summary of a MAP-only fit (no sampling); every posterior point equals the MAP.
inline PosteriorSummary summarize_map(const PoissonModel& model, const MapResult& map, const InferenceConfig& cfg)
{
    PosteriorSummary s;
    s.variant = model.variant().tag;
    s.map = map.params;
    s.map_log_lik = map.log_lik;
    s.map_converged = map.converged;
    s.map_iterations = map.iterations;
    s.posterior_mean = map.params;
    s.posterior_median = map.params;
    s.n_free = model.n_free();
    s.n_obs = model.n_obs();
    s.bic = compute_bic(model, map.params);
    s.reference_site = cfg.reference_site;
    s.relative_abundance = detail::point_quantity(relative_abundances(map.params, model.design(), cfg.reference_site));
    s.selection = detail::point_quantity(map.params.log_S.array().exp().matrix());
    const auto& L = model.layout();
    for (int k = 0; k < L.size(); ++k) {
        const double v = L.get(map.params, k);
        s.params.push_back({L.name(k), v, v, 0.0, v, v, std::numeric_limits<double>::quiet_NaN(), 0.0});
    }
    if (!map.converged)
        s.warnings.push_back("MAP search stopped before the gradient tolerance was reached (sup-norm " +
                             std::to_string(map.grad_sup_norm) + ")");
    detail::add_data_warnings(model, s.warnings);
    return s;
}

inline PosteriorSummary fit_mcmc(const PoissonModel& model, const InferenceConfig& cfg)
{
    cfg.validate();
    if (cfg.n_samples / cfg.thin >= 1 && cfg.n_chains < 2)
        throw std::invalid_argument("sampling needs at least 2 chains for diagnostics");
    const auto& d = model.design();
    if (cfg.reference_site < 0 || cfg.reference_site >= d.n_sites) throw std::invalid_argument("reference site out of range");
    const MapResult map = fit_map(model, cfg);
    PosteriorSummary s = summarize_map(model, map, cfg);
    if (cfg.n_samples / cfg.thin < 1) return s;

    const auto& L = model.layout();
    const Eigen::VectorXd lo = detail::lower_bounds(L, cfg), hi = detail::upper_bounds(L, cfg);
    Eigen::VectorXd fisher;
    model.gradient(map.params, &fisher);
    const detail::SamplerIndex index(model);
    const Eigen::VectorXd theta_map = L.pack(map.params);

    std::vector<detail::ChainOutput> outputs(static_cast<std::size_t>(cfg.n_chains));
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(cfg.n_chains));
    auto run_chain = [&](int chain) {
        auto rng = detail::chain_rng(cfg.rng_seed, chain);
        std::normal_distribution<double> jitter(0.0, cfg.init_jitter);
        for (int attempt = 0; attempt < 20; ++attempt) {
            Eigen::VectorXd theta = theta_map;
            for (Eigen::Index k = 0; k < theta.size(); ++k) theta(k) += jitter(rng);
            theta = theta.cwiseMax(lo).cwiseMin(hi);
            TildeParams start = map.params;
            L.unpack(theta, start);
            if (!std::isfinite(model.log_likelihood(start))) continue;
            detail::Chain ch(model, index, cfg, fisher, std::move(start), std::move(rng));
            outputs[static_cast<std::size_t>(chain)] = ch.run();
            return;
        }
        throw DataError("chain " + std::to_string(chain) + " could not be initialized");
    };
    std::atomic<int> next{0};
    auto worker = [&] {
        for (int c = next++; c < cfg.n_chains; c = next++) {
            try {
                run_chain(c);
            } catch (...) {
                errors[static_cast<std::size_t>(c)] = std::current_exception();
            }
        }
    };
    const int workers = std::clamp(cfg.threads, 1, cfg.n_chains);
    if (workers == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    int failed = 0;
    for (const auto& e : errors) failed += e ? 1 : 0;
    if (failed == cfg.n_chains) std::rethrow_exception(errors.front());
    std::vector<const detail::ChainOutput*> good;
    for (std::size_t c = 0; c < outputs.size(); ++c)
        if (!errors[c]) good.push_back(&outputs[c]);
    if (failed > 0) s.warnings.push_back(std::to_string(failed) + " chain(s) failed to initialize and were dropped");

    s.sampled = true;
    s.n_chains = static_cast<int>(good.size());
    s.n_retained_per_chain = static_cast<int>(good.front()->draws.rows());
    s.params.clear();
    s.max_rhat = 1.0;
    Eigen::VectorXd mean_theta(L.size()), median_theta(L.size());
    std::vector<double> pooled;
    int high_rhat = 0;
    std::string worst;
    for (int k = 0; k < L.size(); ++k) {
        std::vector<std::span<const double>> spans;
        pooled.clear();
        for (const auto* o : good) {
            spans.emplace_back(o->draws.col(k).data(), static_cast<std::size_t>(o->draws.rows()));
            pooled.insert(pooled.end(), spans.back().begin(), spans.back().end());
        }
        ParamSummary ps;
        ps.name = L.name(k);
        ps.mean = mean_of(pooled);
        ps.sd = std::sqrt(variance_of(pooled));
        const double top = *std::max_element(pooled.begin(), pooled.end());
        double acc = 0.0;
        for (double v : pooled) acc += std::exp(v - top);
        mean_theta(k) = top + std::log(acc / static_cast<double>(pooled.size()));
        std::sort(pooled.begin(), pooled.end());
        ps.median = quantile_sorted(pooled, 0.5);
        ps.q025 = quantile_sorted(pooled, 0.025);
        ps.q975 = quantile_sorted(pooled, 0.975);
        median_theta(k) = ps.median;
        ps.rhat = split_rhat(spans);
        ps.ess = effective_sample_size(spans);
        if (std::isfinite(ps.rhat) && ps.rhat > s.max_rhat) {
            s.max_rhat = ps.rhat;
            worst = ps.name;
        }
        if (!(ps.rhat <= 1.05)) ++high_rhat;
        s.params.push_back(std::move(ps));
    }
    if (high_rhat > 0)
        s.warnings.push_back(std::to_string(high_rhat) + " parameter(s) have split R-hat above 1.05 (worst " + worst +
                             ")");
    s.posterior_mean = map.params;
    L.unpack(mean_theta, s.posterior_mean);
    s.posterior_median = map.params;
    L.unpack(median_theta, s.posterior_median);

    std::vector<const Eigen::MatrixXd*> rel, sel;
    for (const auto* o : good) {
        rel.push_back(&o->relative);
        sel.push_back(&o->selection);
    }
    s.relative_abundance = detail::summarize_columns(rel, d.n_species, d.n_sites);
    s.selection = detail::summarize_columns(sel, d.n_species, d.n_habitats);

    std::map<std::string, std::pair<long, long>> acc;
    for (const auto* o : good)
        for (const auto& [block, a] : o->acceptance) {
            acc[block].first += a.first;
            acc[block].second += a.second;
        }
    for (const auto& [block, a] : acc)
        s.acceptance[block] = a.second > 0 ? static_cast<double>(a.first) / static_cast<double>(a.second) : 0.0;

    if (cfg.keep_draws) {
        DrawSet ds;
        for (int k = 0; k < L.size(); ++k) ds.names.push_back(L.name(k));
        for (const auto* o : good) ds.chains.push_back(o->draws);
        ds.warmup = cfg.n_warmup;
        ds.thin = cfg.thin;
        s.draws = std::move(ds);
    }
    return s;
}

/// Refuses designs that fail the rank check unless the config forces the fit.
inline void require_identifiable(const SurveyDesign& d, const InferenceConfig& cfg)
{
    if (cfg.force) return;
    const auto rep = check_identifiability(d);
    if (rep.identifiable) return;
    std::string cols;
    for (const auto& c : rep.deficient_columns) cols += (cols.empty() ? "" : ", ") + c;
    throw IdentifiabilityError("design is not identifiable: rank " + std::to_string(rep.rank) + " < required " +
                               std::to_string(rep.required) + " (deficient columns: " + cols + ")");
}

inline MapResult fit_map(const ModelVariant& v, const SurveyDesign& d, const CountTable& x, const InferenceConfig& cfg,
                         const AlphaWeights& alpha = std::nullopt)
{
    require_identifiable(d, cfg);
    return fit_map(PoissonModel(v, d, x, alpha), cfg);
}

inline PosteriorSummary fit_mcmc(const ModelVariant& v, const SurveyDesign& d, const CountTable& x,
                                 const InferenceConfig& cfg, const AlphaWeights& alpha = std::nullopt)
{
    require_identifiable(d, cfg);
    return fit_mcmc(PoissonModel(v, d, x, alpha), cfg);
}

} // namespace relabund
