#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "relabund/errors.hpp"
#include "relabund/model.hpp"
#include "relabund/reparam.hpp"
#include "relabund/survey.hpp"
#include "relabund/validation.hpp"

namespace relabund {

struct Range {
    double lo = 0.0;
    double hi = 1.0;
};

enum class HabitatRule {
    dirichlet,      // every opportunistic cell draws symmetric Dirichlet(1) shares
    site_clustered, // each site draws a composition; its cells draw around it
};

inline std::string_view to_string(HabitatRule r) { return r == HabitatRule::dirichlet ? "dirichlet" : "site-clustered"; }

inline std::optional<HabitatRule> parse_habitat_rule(std::string_view s)
{
    if (s == "dirichlet") return HabitatRule::dirichlet;
    if (s == "site-clustered") return HabitatRule::site_clustered;
    return std::nullopt;
}

struct SimConfig {
    int n_species = 20;
    int n_sites = 30;
    int n_habitats = 2;
    int cells_std_per_site = 10;
    int cells_opp_per_site = 30;
    std::uint64_t seed = 1;
    Range abundance{20.0, 200.0};
    Range reporting{0.1, 1.0};
    Range opp_effort{0.5, 5.0};
    Range preference{0.1, 1.0};
    Range selection{0.1, 1.0};
    double std_effort = 1.0;
    double cell_area = 1.0;
    double max_remainder_share = 0.5; // unvisited share of a site, drawn U(0, max)
    HabitatRule habitat_rule = HabitatRule::dirichlet;
    double cluster_concentration = 10.0; // site_clustered only
    bool uniform_selection = false;      // S == 1
    int n_opp_only_species = 0;          // the last species are monitored only opportunistically
    AlphaWeights alpha;                  // H x 2 detectability multipliers used when drawing counts
    int max_redraws = 100;

    void validate() const
    {
        if (n_species < 1 || n_sites < 1 || n_habitats < 1 || cells_std_per_site < 1 || cells_opp_per_site < 0)
            throw std::invalid_argument("simulation dimensions must be positive");
        for (const Range* r : {&abundance, &reporting, &opp_effort, &preference, &selection})
            if (!(r->lo > 0.0) || !(r->hi >= r->lo) || !std::isfinite(r->hi))
                throw std::invalid_argument("simulation ranges must lie in (0, inf) with lo <= hi");
        if (!(std_effort > 0.0) || !(cell_area > 0.0)) throw std::invalid_argument("efforts and areas must be positive");
        if (!(max_remainder_share >= 0.0) || !(max_remainder_share < 1.0))
            throw std::invalid_argument("max_remainder_share must lie in [0, 1)");
        if (n_opp_only_species < 0 || n_opp_only_species >= n_species)
            throw std::invalid_argument("at least one species must be monitored in both datasets");
        if (n_opp_only_species > 0 && cells_opp_per_site == 0)
            throw std::invalid_argument("opportunistic-only species need opportunistic cells");
        if (!(cluster_concentration > 0.0)) throw std::invalid_argument("cluster_concentration must be positive");
        if (alpha && (alpha->rows() != n_habitats || alpha->cols() != 2 || (alpha->array() <= 0.0).any()))
            throw std::invalid_argument("alpha must be a positive H x 2 table");
        if (max_redraws < 1) throw std::invalid_argument("max_redraws must be positive");
    }
};

struct SimResult {
    SurveyDesign design;
    CountTable counts;
    RawParams truth;
    int redraws = 0;
};

namespace detail {

inline Eigen::VectorXd dirichlet(std::mt19937_64& rng, const Eigen::VectorXd& conc)
{
    Eigen::VectorXd g(conc.size());
    double total = 0.0;
    do {
        total = 0.0;
        for (Eigen::Index h = 0; h < conc.size(); ++h) {
            std::gamma_distribution<double> gamma(conc(h), 1.0);
            g(h) = gamma(rng);
            total += g(h);
        }
    } while (!(total > 0.0));
    return g / total;
}

inline SurveyDesign draw_design(const SimConfig& cfg, std::mt19937_64& rng)
{
    const int I = cfg.n_species, J = cfg.n_sites, H = cfg.n_habitats;
    SurveyDesign d;
    d.n_species = I;
    d.n_sites = J;
    d.n_habitats = H;
    d.monitored.assign(static_cast<std::size_t>(I), {true, true});
    for (int i = I - cfg.n_opp_only_species; i < I; ++i) d.monitored[static_cast<std::size_t>(i)] = {false, true};
    d.site_habitat_area = Eigen::MatrixXd::Zero(J, H);

    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const Eigen::VectorXd flat = Eigen::VectorXd::Ones(H);
    int next_id = 0;
    for (int j = 0; j < J; ++j) {
        const Eigen::VectorXd site_mix = cfg.habitat_rule == HabitatRule::site_clustered ? dirichlet(rng, flat) : flat / H;
        Eigen::VectorXd std_sum = Eigen::VectorXd::Zero(H), opp_sum = Eigen::VectorXd::Zero(H);
        for (int n = 0; n < cfg.cells_std_per_site; ++n) {
            // Single-habitat cell: draw its habitat from the site composition.
            const double u = unit(rng);
            int h = 0;
            double acc = site_mix(0);
            while (h + 1 < H && u >= acc) acc += site_mix(++h);
            CellRecord c{next_id++, kStandardized, j, Eigen::VectorXd::Zero(H), cfg.std_effort};
            c.habitat_area(h) = cfg.cell_area;
            std_sum += c.habitat_area;
            d.cells.push_back(std::move(c));
        }
        for (int n = 0; n < cfg.cells_opp_per_site; ++n) {
            const Eigen::VectorXd conc =
                cfg.habitat_rule == HabitatRule::site_clustered ? Eigen::VectorXd(cfg.cluster_concentration * site_mix) : flat;
            CellRecord c{next_id++, kOpportunistic, j, cfg.cell_area * dirichlet(rng, conc), std::nullopt};
            opp_sum += c.habitat_area;
            d.cells.push_back(std::move(c));
        }
        const Eigen::VectorXd visited = std_sum.cwiseMax(opp_sum);
        const double share = cfg.max_remainder_share * unit(rng);
        const double remainder = visited.sum() * share / (1.0 - share);
        d.site_habitat_area.row(j) = (visited + remainder * dirichlet(rng, flat)).transpose();
    }
    return d;
}

inline double draw_uniform(std::mt19937_64& rng, const Range& r)
{
    return std::uniform_real_distribution<double>(r.lo, r.hi)(rng);
}

} // namespace detail

/// Draws a design, raw parameters and Poisson counts. Designs failing the
/// validity or identifiability checks are redrawn.
inline SimResult simulate(const SimConfig& cfg)
{
    cfg.validate();
    std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed & 0xffffffffu), static_cast<std::uint32_t>(cfg.seed >> 32),
                      0x51u};
    std::mt19937_64 rng(seq);
    const int I = cfg.n_species, J = cfg.n_sites, H = cfg.n_habitats;

    SimResult out;
    for (;; ++out.redraws) {
        if (out.redraws >= cfg.max_redraws) throw DataError("could not draw an identifiable design");
        out.design = detail::draw_design(cfg, rng);
        if (validate_design(out.design).empty() && check_identifiability(out.design).identifiable) break;
    }
    const auto& d = out.design;

    RawParams& raw = out.truth;
    raw.N.resize(I, J);
    for (int i = 0; i < I; ++i)
        for (int j = 0; j < J; ++j) raw.N(i, j) = detail::draw_uniform(rng, cfg.abundance);
    raw.P = Eigen::MatrixXd::Zero(I, 2);
    for (int i = 0; i < I; ++i)
        for (int k = 0; k < 2; ++k) {
            const double p = detail::draw_uniform(rng, cfg.reporting);
            if (d.is_monitored(i, k)) raw.P(i, k) = p;
        }
    raw.q.resize(H, 2);
    for (int h = 0; h < H; ++h)
        for (int k = 0; k < 2; ++k) raw.q(h, k) = detail::draw_uniform(rng, cfg.preference);
    raw.S.resize(I, H);
    for (int i = 0; i < I; ++i)
        for (int h = 0; h < H; ++h) {
            const double s = detail::draw_uniform(rng, cfg.selection);
            raw.S(i, h) = cfg.uniform_selection ? 1.0 : s;
        }
    raw.E.resize(d.n_cells());
    for (int c = 0; c < d.n_cells(); ++c) {
        const double e = detail::draw_uniform(rng, cfg.opp_effort);
        raw.E(c) = d.cells[c].dataset == kStandardized ? cfg.std_effort : e;
    }

    std::vector<CountEntry> entries;
    for (int c = 0; c < d.n_cells(); ++c)
        for (int i = 0; i < I; ++i) {
            if (!d.is_monitored(i, d.cells[c].dataset)) continue;
            const double lambda = raw_intensity(raw, d, i, c, cfg.alpha);
            const std::int64_t x = lambda > 0.0 ? std::poisson_distribution<std::int64_t>(lambda)(rng) : 0;
            entries.push_back({i, d.cells[c].cell_id, x});
        }
    out.counts = CountTable(d, std::move(entries));
    return out;
}

struct HoldoutConfig {
    int quadrats_per_site = 1;
    int points_per_quadrat = 5;
    double point_area = 1.0;
    Range effort{1.0, 4.0};    // e.g. years of observation per point
    Range detection{0.1, 1.0}; // per-species holdout detection
    std::uint64_t seed = 1;

    void validate() const
    {
        if (quadrats_per_site < 1 || points_per_quadrat < 1) throw std::invalid_argument("holdout dimensions must be positive");
        if (!(point_area > 0.0)) throw std::invalid_argument("holdout point area must be positive");
        for (const Range* r : {&effort, &detection})
            if (!(r->lo > 0.0) || !(r->hi >= r->lo) || !std::isfinite(r->hi))
                throw std::invalid_argument("holdout ranges must lie in (0, inf) with lo <= hi");
    }
};

/// Independent point-count survey over the design's sites: each point lies in
/// one habitat drawn in proportion to the site's habitat areas, and counts
/// follow the true density N_ij S_ih / sum_h' S_ih' V_h'j.
inline HoldoutSurvey simulate_holdout(const SurveyDesign& d, const RawParams& truth, const HoldoutConfig& cfg)
{
    cfg.validate();
    std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed & 0xffffffffu), static_cast<std::uint32_t>(cfg.seed >> 32),
                      0x68u};
    std::mt19937_64 rng(seq);
    const int I = d.n_species, H = d.n_habitats;
    HoldoutSurvey h;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int j = 0; j < d.n_sites; ++j)
        for (int k = 0; k < cfg.quadrats_per_site; ++k) {
            HoldoutQuadrat quad{static_cast<int>(h.quadrats.size()), j, {}};
            const double total = d.site_area(j);
            for (int n = 0; n < cfg.points_per_quadrat; ++n) {
                const double u = unit(rng) * total;
                int hab = 0;
                double acc = d.site_habitat_area(j, 0);
                while (hab + 1 < H && u >= acc) acc += d.site_habitat_area(j, ++hab);
                quad.points.push_back({hab, cfg.point_area, detail::draw_uniform(rng, cfg.effort)});
            }
            h.quadrats.push_back(std::move(quad));
        }
    Eigen::VectorXd detect(I);
    for (int i = 0; i < I; ++i) detect(i) = detail::draw_uniform(rng, cfg.detection);
    h.counts = Eigen::MatrixXd::Zero(I, static_cast<Eigen::Index>(h.quadrats.size()));
    for (int i = 0; i < I; ++i)
        for (const auto& quad : h.quadrats) {
            const int j = quad.site_id;
            double norm = 0.0;
            for (int k = 0; k < H; ++k) norm += truth.S(i, k) * d.site_habitat_area(j, k);
            for (const auto& p : quad.points) {
                const double lambda = detect(i) * truth.N(i, j) * p.effort * truth.S(i, p.habitat) * p.area / norm;
                h.counts(i, quad.quadrat_id) += static_cast<double>(std::poisson_distribution<std::int64_t>(lambda)(rng));
            }
        }
    return h;
}

/// N_ij / N_ij0.
inline Eigen::MatrixXd truth_relative_abundances(const RawParams& raw, int reference_site)
{
    if (reference_site < 0 || reference_site >= raw.N.cols()) throw std::invalid_argument("reference site out of range");
    Eigen::MatrixXd out(raw.N.rows(), raw.N.cols());
    for (Eigen::Index i = 0; i < raw.N.rows(); ++i)
        for (Eigen::Index j = 0; j < raw.N.cols(); ++j)
            out(i, j) = j == reference_site ? 1.0 : raw.N(i, j) / raw.N(i, reference_site);
    return out;
}

} // namespace relabund
