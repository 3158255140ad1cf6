#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "relabund/errors.hpp"
#include "relabund/summation.hpp"
#include "relabund/survey.hpp"

namespace relabund {

enum class Variant { opp_stand_hab, stand_only_hab, opp_stand_no_hab, one_quadrat_hab };

inline std::string_view to_string(Variant v)
{
    switch (v) {
    case Variant::opp_stand_hab: return "opp-stand-hab";
    case Variant::stand_only_hab: return "stand-only-hab";
    case Variant::opp_stand_no_hab: return "opp-stand-no-hab";
    case Variant::one_quadrat_hab: return "one-quadrat-hab";
    }
    return "unknown";
}

inline std::optional<Variant> parse_variant(std::string_view s)
{
    for (auto v : {Variant::opp_stand_hab, Variant::stand_only_hab, Variant::opp_stand_no_hab, Variant::one_quadrat_hab})
        if (to_string(v) == s) return v;
    return std::nullopt;
}

struct ModelVariant {
    Variant tag = Variant::opp_stand_hab;
    Eigen::VectorXd total_habitat_area; // V_h; used by the one-quadrat model

    static ModelVariant make(Variant tag, const SurveyDesign& design)
    {
        return ModelVariant{tag, design.total_habitat_area()};
    }

    bool uses_dataset(int k) const { return k == kStandardized || tag != Variant::stand_only_hab; }
    bool uses_opportunistic() const { return tag != Variant::stand_only_hab; }
    bool habitat() const { return tag != Variant::opp_stand_no_hab; }
    bool one_quadrat() const { return tag == Variant::one_quadrat_hab; }
};

/// Identifiable parameters, all in log space. Anchored entries (log_P of the
/// reference species, log_q[0], log_S[:,0]) stay at exactly 0.
struct TildeParams {
    Eigen::MatrixXd log_N;  // I x J
    Eigen::VectorXd log_P;  // I, dataset 1 reporting ratio
    Eigen::VectorXd log_E1; // one entry per opportunistic cell, in cell order
    Eigen::VectorXd log_q;  // H, dataset 1 observer preference
    Eigen::MatrixXd log_S;  // I x H

    static TildeParams zeros(const SurveyDesign& d)
    {
        return TildeParams{Eigen::MatrixXd::Zero(d.n_species, d.n_sites), Eigen::VectorXd::Zero(d.n_species),
                           Eigen::VectorXd::Zero(d.n_opportunistic_cells()), Eigen::VectorXd::Zero(d.n_habitats),
                           Eigen::MatrixXd::Zero(d.n_species, d.n_habitats)};
    }

    bool operator==(const TildeParams& o) const
    {
        return log_N == o.log_N && log_P == o.log_P && log_E1 == o.log_E1 && log_q == o.log_q && log_S == o.log_S;
    }
};

inline void check_dimensions(const TildeParams& p, const SurveyDesign& d)
{
    if (p.log_N.rows() != d.n_species || p.log_N.cols() != d.n_sites)
        throw DimensionError("log_N must be " + std::to_string(d.n_species) + " x " + std::to_string(d.n_sites));
    if (p.log_P.size() != d.n_species) throw DimensionError("log_P must have one entry per species");
    if (p.log_E1.size() != d.n_opportunistic_cells())
        throw DimensionError("log_E1 must have one entry per opportunistic cell");
    if (p.log_q.size() != d.n_habitats) throw DimensionError("log_q must have one entry per habitat");
    if (p.log_S.rows() != d.n_species || p.log_S.cols() != d.n_habitats)
        throw DimensionError("log_S must be " + std::to_string(d.n_species) + " x " + std::to_string(d.n_habitats));
}

/// Habitat detectability weights alpha_hk (H x 2); all ones when absent.
using AlphaWeights = std::optional<Eigen::MatrixXd>;

inline void check_alpha(const AlphaWeights& alpha, const SurveyDesign& d)
{
    if (alpha && (alpha->rows() != d.n_habitats || alpha->cols() != 2))
        throw DimensionError("alpha must be H x 2");
}

namespace detail {

/// log of the known standardized effort in tilde scale, E_c0 / V_c.
inline double log_known_effort(const CellRecord& cell) { return std::log(*cell.known_effort / cell.area()); }

/// sum_h alpha_hk q_hk S_ih V_hc with q_h0 = 1 and, without habitat, q = S = 1.
inline double habitat_mix(const TildeParams& p, const ModelVariant& v, const CellRecord& cell, int species,
                          const AlphaWeights& alpha)
{
    const bool hab = v.habitat();
    double mix = 0.0;
    for (Eigen::Index h = 0; h < cell.habitat_area.size(); ++h) {
        const double q = (hab && cell.dataset == kOpportunistic) ? std::exp(p.log_q(h)) : 1.0;
        const double s = hab ? std::exp(p.log_S(species, h)) : 1.0;
        const double a = alpha ? (*alpha)(h, cell.dataset) : 1.0;
        mix += a * q * s * cell.habitat_area(h);
    }
    return mix;
}

} // namespace detail

inline bool in_scope(const ModelVariant& v, const SurveyDesign& d, int species, int cell)
{
    const int k = d.cells[cell].dataset;
    return v.uses_dataset(k) && d.is_monitored(species, k);
}

/// Poisson mean of X_ick; zero for pairs outside the variant's scope.
inline double intensity(const TildeParams& p, const ModelVariant& v, const SurveyDesign& d, int species, int cell,
                        const AlphaWeights& alpha = std::nullopt)
{
    check_dimensions(p, d);
    check_alpha(alpha, d);
    if (species < 0 || species >= d.n_species || cell < 0 || cell >= d.n_cells())
        throw DimensionError("species or cell index out of range");
    if (!in_scope(v, d, species, cell)) return 0.0;
    const auto& rec = d.cells[cell];
    const int col = v.one_quadrat() ? 0 : rec.site_id;
    double log_lambda = p.log_N(species, col);
    if (rec.dataset == kStandardized) {
        log_lambda += detail::log_known_effort(rec);
    } else {
        log_lambda += p.log_E1(d.opportunistic_slots()[cell]) + p.log_P(species);
    }
    return std::exp(log_lambda + std::log(detail::habitat_mix(p, v, rec, species, alpha)));
}

// ---------------------------------------------------------------------------

enum class Block { log_N, log_P, log_E1, log_q, log_S };

inline std::string_view to_string(Block b)
{
    switch (b) {
    case Block::log_N: return "log_N";
    case Block::log_P: return "log_P";
    case Block::log_E1: return "log_E1";
    case Block::log_q: return "log_q";
    case Block::log_S: return "log_S";
    }
    return "?";
}

struct FreeParam {
    Block block;
    int row; // species, opportunistic slot or habitat
    int col; // site or habitat; 0 for vector blocks
};

/// Which tilde coordinates are free for a variant, and their order in the
/// flat parameter vector.
class ParamLayout {
public:
    ParamLayout(const ModelVariant& v, const SurveyDesign& d)
        : one_quadrat_(v.one_quadrat()),
          n_index_(Eigen::MatrixXi::Constant(d.n_species, d.n_sites, -1)),
          p_index_(Eigen::VectorXi::Constant(d.n_species, -1)),
          e_index_(Eigen::VectorXi::Constant(d.n_opportunistic_cells(), -1)),
          q_index_(Eigen::VectorXi::Constant(d.n_habitats, -1)),
          s_index_(Eigen::MatrixXi::Constant(d.n_species, d.n_habitats, -1))
    {
        const int I = d.n_species, H = d.n_habitats;
        const int reference = d.reference_species();
        for (int c = 0; c < d.n_cells(); ++c)
            if (d.cells[c].dataset == kOpportunistic) opp_cell_ids_.push_back(d.cells[c].cell_id);

        auto species_in_scope = [&](int i) {
            return (d.monitored[i][0] && v.uses_dataset(0)) || (d.monitored[i][1] && v.uses_dataset(1));
        };
        auto add = [&](Block b, int r, int c) {
            params_.push_back({b, r, c});
            return static_cast<int>(params_.size()) - 1;
        };

        const int n_cols = one_quadrat_ ? 1 : d.n_sites;
        for (int i = 0; i < I; ++i)
            if (species_in_scope(i))
                for (int j = 0; j < n_cols; ++j) n_index_(i, j) = add(Block::log_N, i, j);
        if (v.habitat())
            for (int i = 0; i < I; ++i)
                if (species_in_scope(i))
                    for (int h = 1; h < H; ++h) s_index_(i, h) = add(Block::log_S, i, h);
        if (v.uses_opportunistic()) {
            if (v.habitat())
                for (int h = 1; h < H; ++h) q_index_(h) = add(Block::log_q, h, 0);
            for (int i = 0; i < I; ++i)
                if (i != reference && d.monitored[i][0] && d.monitored[i][1]) p_index_(i) = add(Block::log_P, i, 0);
            for (int m = 0; m < e_index_.size(); ++m) e_index_(m) = add(Block::log_E1, m, 0);
        }
    }

    int size() const { return static_cast<int>(params_.size()); }
    const std::vector<FreeParam>& params() const { return params_; }

    int n_index(int i, int j) const { return n_index_(i, one_quadrat_ ? 0 : j); }
    int p_index(int i) const { return p_index_(i); }
    int e_index(int slot) const { return e_index_(slot); }
    int q_index(int h) const { return q_index_(h); }
    int s_index(int i, int h) const { return s_index_(i, h); }
    bool one_quadrat() const { return one_quadrat_; }

    std::string name(int k) const
    {
        const auto& f = params_[k];
        const std::string b(to_string(f.block));
        switch (f.block) {
        case Block::log_N: return b + "[" + std::to_string(f.row) + "," + std::to_string(f.col) + "]";
        case Block::log_S: return b + "[" + std::to_string(f.row) + "," + std::to_string(f.col) + "]";
        case Block::log_E1: return b + "[" + std::to_string(opp_cell_ids_[f.row]) + "]";
        default: return b + "[" + std::to_string(f.row) + "]";
        }
    }

    double get(const TildeParams& p, int k) const
    {
        const auto& f = params_[k];
        switch (f.block) {
        case Block::log_N: return p.log_N(f.row, f.col);
        case Block::log_P: return p.log_P(f.row);
        case Block::log_E1: return p.log_E1(f.row);
        case Block::log_q: return p.log_q(f.row);
        case Block::log_S: return p.log_S(f.row, f.col);
        }
        return 0.0;
    }

    Eigen::VectorXd pack(const TildeParams& p) const
    {
        Eigen::VectorXd theta(size());
        for (int k = 0; k < size(); ++k) theta(k) = get(p, k);
        return theta;
    }

    /// Writes the free coordinates into `p`. The one-quadrat abundance is
    /// replicated across every site column.
    void unpack(const Eigen::Ref<const Eigen::VectorXd>& theta, TildeParams& p) const
    {
        for (int k = 0; k < size(); ++k) {
            const auto& f = params_[k];
            switch (f.block) {
            case Block::log_N:
                if (one_quadrat_) p.log_N.row(f.row).setConstant(theta(k));
                else p.log_N(f.row, f.col) = theta(k);
                break;
            case Block::log_P: p.log_P(f.row) = theta(k); break;
            case Block::log_E1: p.log_E1(f.row) = theta(k); break;
            case Block::log_q: p.log_q(f.row) = theta(k); break;
            case Block::log_S: p.log_S(f.row, f.col) = theta(k); break;
            }
        }
    }

private:
    bool one_quadrat_;
    std::vector<FreeParam> params_;
    std::vector<int> opp_cell_ids_;
    Eigen::MatrixXi n_index_;
    Eigen::VectorXi p_index_;
    Eigen::VectorXi e_index_;
    Eigen::VectorXi q_index_;
    Eigen::MatrixXi s_index_;
};

inline int count_free_params(const ModelVariant& v, const SurveyDesign& d) { return ParamLayout(v, d).size(); }

// ---------------------------------------------------------------------------

/// The likelihood of one variant bound to a design and its counts.
class PoissonModel {
public:
    PoissonModel(ModelVariant variant, SurveyDesign design, const CountTable& counts, AlphaWeights alpha = std::nullopt)
        : variant_(std::move(variant)), design_(std::move(design)), alpha_(std::move(alpha)), layout_(variant_, design_)
    {
        check_alpha(alpha_, design_);
        if (design_.reference_species() < 0) throw DataError("no species is monitored in both datasets");
        const int I = design_.n_species, C = design_.n_cells();
        counts_ = counts.dense();
        if (counts_.rows() != I || counts_.cols() != C) throw DimensionError("count table does not match the design");
        slot_ = design_.opportunistic_slots();
        scope_.assign(static_cast<std::size_t>(I) * C, 0);
        log_fact_ = Eigen::MatrixXd::Zero(I, C);
        log_known_effort_ = Eigen::VectorXd::Zero(C);
        for (int c = 0; c < C; ++c) {
            if (design_.cells[c].dataset == kStandardized) log_known_effort_(c) = detail::log_known_effort(design_.cells[c]);
            for (int i = 0; i < I; ++i) {
                if (!in_scope(variant_, design_, i, c)) continue;
                scope_[index(i, c)] = 1;
                log_fact_(i, c) = std::lgamma(counts_(i, c) + 1.0);
                ++n_obs_;
            }
        }
    }

    const ModelVariant& variant() const { return variant_; }
    const SurveyDesign& design() const { return design_; }
    const ParamLayout& layout() const { return layout_; }
    const Eigen::MatrixXd& counts() const { return counts_; }
    const AlphaWeights& alpha() const { return alpha_; }
    int n_obs() const { return n_obs_; }
    int n_free() const { return layout_.size(); }
    bool scoped(int species, int cell) const { return scope_[index(species, cell)] != 0; }
    int slot(int cell) const { return slot_[cell]; }
    double log_fact(int species, int cell) const { return log_fact_(species, cell); }

    /// Column of log_N used for a cell.
    int abundance_column(int cell) const { return variant_.one_quadrat() ? 0 : design_.cells[cell].site_id; }

    /// log(N * E * P) for an in-scope pair, without the habitat mix.
    double log_base(const TildeParams& p, int species, int cell) const
    {
        const auto& rec = design_.cells[cell];
        double a = p.log_N(species, abundance_column(cell));
        if (rec.dataset == kStandardized) a += log_known_effort_(cell);
        else a += p.log_E1(slot_[cell]) + p.log_P(species);
        return a;
    }

    double mix(const TildeParams& p, int species, int cell) const
    {
        return detail::habitat_mix(p, variant_, design_.cells[cell], species, alpha_);
    }

    double intensity(const TildeParams& p, int species, int cell) const
    {
        if (!scoped(species, cell)) return 0.0;
        return std::exp(log_base(p, species, cell) + std::log(mix(p, species, cell)));
    }

    /// Sum of Poisson log-pmfs over in-scope pairs; per-cell partial sums are
    /// combined by a fixed pairwise reduction.
    double log_likelihood(const TildeParams& p) const
    {
        check_dimensions(p, design_);
        const int I = design_.n_species, C = design_.n_cells();
        std::vector<double> partial(static_cast<std::size_t>(C), 0.0);
        for (int c = 0; c < C; ++c) {
            double acc = 0.0;
            for (int i = 0; i < I; ++i) {
                if (!scoped(i, c)) continue;
                const double x = counts_(i, c);
                const double log_lambda = log_base(p, i, c) + std::log(mix(p, i, c));
                const double lambda = std::exp(log_lambda);
                if (lambda == 0.0) {
                    if (x > 0.0) return -std::numeric_limits<double>::infinity();
                    continue;
                }
                acc += (x > 0.0 ? x * log_lambda : 0.0) - lambda - log_fact_(i, c);
            }
            partial[static_cast<std::size_t>(c)] = acc;
        }
        return pairwise_sum(partial);
    }

    /// Gradient over the free coordinates. Optionally returns the diagonal of
    /// the expected information, sum of lambda * w^2.
    Eigen::VectorXd gradient(const TildeParams& p, Eigen::VectorXd* fisher_diag = nullptr) const
    {
        check_dimensions(p, design_);
        const int I = design_.n_species, C = design_.n_cells(), H = design_.n_habitats;
        Eigen::VectorXd g = Eigen::VectorXd::Zero(layout_.size());
        if (fisher_diag) *fisher_diag = Eigen::VectorXd::Zero(layout_.size());
        const bool hab = variant_.habitat();
        Eigen::VectorXd term(H);
        for (int c = 0; c < C; ++c) {
            const auto& rec = design_.cells[c];
            const bool opp = rec.dataset == kOpportunistic;
            for (int i = 0; i < I; ++i) {
                if (!scoped(i, c)) continue;
                double m = 0.0;
                for (int h = 0; h < H; ++h) {
                    const double q = (hab && opp) ? std::exp(p.log_q(h)) : 1.0;
                    const double s = hab ? std::exp(p.log_S(i, h)) : 1.0;
                    const double a = alpha_ ? (*alpha_)(h, rec.dataset) : 1.0;
                    term(h) = a * q * s * rec.habitat_area(h);
                    m += term(h);
                }
                const double lambda = std::exp(log_base(p, i, c) + std::log(m));
                const double r = counts_(i, c) - lambda;
                auto bump = [&](int idx, double w) {
                    if (idx < 0) return;
                    g(idx) += r * w;
                    if (fisher_diag) (*fisher_diag)(idx) += lambda * w * w;
                };
                bump(layout_.n_index(i, rec.site_id), 1.0);
                if (opp) {
                    bump(layout_.e_index(slot_[c]), 1.0);
                    bump(layout_.p_index(i), 1.0);
                }
                if (hab && m > 0.0) {
                    for (int h = 1; h < H; ++h) {
                        const double w = term(h) / m;
                        bump(layout_.s_index(i, h), w);
                        if (opp) bump(layout_.q_index(h), w);
                    }
                }
            }
        }
        return g;
    }

private:
    std::size_t index(int species, int cell) const
    {
        return static_cast<std::size_t>(cell) * static_cast<std::size_t>(design_.n_species) + static_cast<std::size_t>(species);
    }

    ModelVariant variant_;
    SurveyDesign design_;
    AlphaWeights alpha_;
    ParamLayout layout_;
    Eigen::MatrixXd counts_;
    Eigen::MatrixXd log_fact_;
    Eigen::VectorXd log_known_effort_;
    std::vector<int> slot_;
    std::vector<char> scope_;
    int n_obs_ = 0;
};

inline double log_likelihood(const TildeParams& p, const ModelVariant& v, const SurveyDesign& d, const CountTable& x,
                             const AlphaWeights& alpha = std::nullopt)
{
    return PoissonModel(v, d, x, alpha).log_likelihood(p);
}

inline Eigen::VectorXd grad_log_likelihood(const TildeParams& p, const ModelVariant& v, const SurveyDesign& d,
                                           const CountTable& x, const AlphaWeights& alpha = std::nullopt)
{
    return PoissonModel(v, d, x, alpha).gradient(p);
}

} // namespace relabund
