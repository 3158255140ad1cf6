#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "relabund/errors.hpp"
#include "relabund/model.hpp"
#include "relabund/survey.hpp"

namespace relabund {

/// Parameters of the habitat model in their original (non-identifiable)
/// scale. Used by the simulator and as an oracle for the tilde form.
struct RawParams {
    Eigen::MatrixXd N; // I x J abundances
    Eigen::MatrixXd P; // I x 2 detection/reporting, 0 where unmonitored
    Eigen::VectorXd E; // per cell effort E_ck
    Eigen::MatrixXd q; // H x 2 observer preferences
    Eigen::MatrixXd S; // I x H habitat selection
};

/// N_ij E_ck P_ik sum_h [q_hk / sum_h' q_h'k V_h'c] [S_ih / sum_h' S_ih' V_h'j] alpha_hk V_hc
inline double raw_intensity(const RawParams& raw, const SurveyDesign& d, int species, int cell,
                            const AlphaWeights& alpha = std::nullopt)
{
    const auto& rec = d.cells[cell];
    const int k = rec.dataset, j = rec.site_id;
    if (!d.is_monitored(species, k)) return 0.0;
    const int H = d.n_habitats;
    double q_norm = 0.0, s_norm = 0.0;
    for (int h = 0; h < H; ++h) {
        q_norm += raw.q(h, k) * rec.habitat_area(h);
        s_norm += raw.S(species, h) * d.site_habitat_area(j, h);
    }
    double sum = 0.0;
    for (int h = 0; h < H; ++h) {
        const double a = alpha ? (*alpha)(h, k) : 1.0;
        sum += a * (raw.q(h, k) / q_norm) * (raw.S(species, h) / s_norm) * rec.habitat_area(h);
    }
    return raw.N(species, j) * raw.E(cell) * raw.P(species, k) * sum;
}

namespace detail {

inline void require_positive(const Eigen::MatrixXd& m, const char* what)
{
    if (!m.allFinite() || (m.array() <= 0.0).any()) throw DataError(std::string("raw ") + what + " must be positive");
}

inline bool single_habitat(const CellRecord& c) { return (c.habitat_area.array() > 0.0).count() <= 1; }

} // namespace detail

/// Change of variables to the identifiable parameters. The reference species
/// is the first one monitored in both datasets; the reference effort is fixed
/// by the design's known standardized efforts.
inline TildeParams to_tilde(const RawParams& raw, const SurveyDesign& d)
{
    const int I = d.n_species, J = d.n_sites, H = d.n_habitats;
    if (raw.N.rows() != I || raw.N.cols() != J || raw.P.rows() != I || raw.P.cols() != 2 ||
        raw.E.size() != d.n_cells() || raw.q.rows() != H || raw.q.cols() != 2 || raw.S.rows() != I || raw.S.cols() != H)
        throw DimensionError("raw parameters do not match the design");
    detail::require_positive(raw.N, "abundances");
    detail::require_positive(raw.E, "efforts");
    detail::require_positive(raw.q, "observer preferences");
    detail::require_positive(raw.S, "selection probabilities");
    for (int i = 0; i < I; ++i)
        for (int k = 0; k < 2; ++k)
            if (d.is_monitored(i, k) && !(raw.P(i, k) > 0.0))
                throw DataError("raw reporting probability of monitored species " + std::to_string(i) + " must be positive");

    const int r = d.reference_species();
    if (r < 0) throw DataError("no species is monitored in both datasets");

    const auto std_cells = d.cells_of_dataset(kStandardized);
    if (std_cells.empty()) throw DataError("design has no standardized cell");
    const int c_ref = std_cells.front();
    const double e_ref = raw.E(c_ref) / *d.cells[c_ref].known_effort;
    const bool q0_constant = (raw.q.col(0).array() == raw.q(0, 0)).all();
    for (int c : std_cells) {
        const auto& rec = d.cells[c];
        const double implied = raw.E(c) / *rec.known_effort;
        if (std::abs(implied - e_ref) > 1e-9 * e_ref)
            throw DataError("known effort of cell " + std::to_string(rec.cell_id) + " is not proportional to its raw effort");
        if (!q0_constant && !detail::single_habitat(rec))
            throw DataError("standardized cell " + std::to_string(rec.cell_id) +
                            " mixes habitats while standardized observer preferences vary");
    }

    TildeParams t = TildeParams::zeros(d);
    const double log_pr0 = std::log(raw.P(r, 0)), log_pr1 = std::log(raw.P(r, 1));
    for (int i = 0; i < I; ++i) {
        const double log_rho =
            d.is_monitored(i, 0) ? std::log(raw.P(i, 0)) : std::log(raw.P(i, 1)) + log_pr0 - log_pr1;
        for (int h = 1; h < H; ++h) t.log_S(i, h) = std::log(raw.S(i, h)) - std::log(raw.S(i, 0));
        for (int j = 0; j < J; ++j) {
            double denom = 0.0;
            for (int h = 0; h < H; ++h) denom += (raw.S(i, h) / raw.S(i, 0)) * d.site_habitat_area(j, h);
            t.log_N(i, j) = std::log(raw.N(i, j)) + log_rho + std::log(e_ref) - std::log(denom);
        }
        if (i != r && d.is_monitored(i, 0) && d.is_monitored(i, 1))
            t.log_P(i) = std::log(raw.P(i, 1)) + log_pr0 - log_rho - log_pr1;
    }
    for (int h = 1; h < H; ++h) t.log_q(h) = std::log(raw.q(h, 1)) - std::log(raw.q(0, 1));
    const auto slots = d.opportunistic_slots();
    for (int c = 0; c < d.n_cells(); ++c) {
        if (slots[c] < 0) continue;
        const auto& rec = d.cells[c];
        double denom = 0.0;
        for (int h = 0; h < H; ++h) denom += (raw.q(h, 1) / raw.q(0, 1)) * rec.habitat_area(h);
        t.log_E1(slots[c]) = std::log(raw.E(c)) + log_pr1 - log_pr0 - std::log(e_ref) - std::log(denom);
    }
    return t;
}

/// N_ij / N_ij0 recovered from the tilde abundances and selection ratios.
inline double relative_abundance(const TildeParams& t, const SurveyDesign& d, int species, int site, int reference_site)
{
    check_dimensions(t, d);
    double num = 0.0, den = 0.0;
    for (int h = 0; h < d.n_habitats; ++h) {
        const double s = std::exp(t.log_S(species, h));
        num += s * d.site_habitat_area(site, h);
        den += s * d.site_habitat_area(reference_site, h);
    }
    if (!(num > 0.0) || !(den > 0.0)) throw DataError("zero habitat-weighted area in relative_abundance");
    if (site == reference_site) return 1.0;
    return std::exp(t.log_N(species, site) - t.log_N(species, reference_site)) * num / den;
}

inline Eigen::MatrixXd relative_abundances(const TildeParams& t, const SurveyDesign& d, int reference_site)
{
    Eigen::MatrixXd out(d.n_species, d.n_sites);
    for (int i = 0; i < d.n_species; ++i)
        for (int j = 0; j < d.n_sites; ++j) out(i, j) = relative_abundance(t, d, i, j, reference_site);
    return out;
}

// ---------------------------------------------------------------------------
// Identifiability of the standardized design

/// argmax_h V_hc, ties to the lowest index.
inline int dominant_habitat(const CellRecord& c)
{
    Eigen::Index best = 0;
    for (Eigen::Index h = 1; h < c.habitat_area.size(); ++h)
        if (c.habitat_area(h) > c.habitat_area(best)) best = h;
    return static_cast<int>(best);
}

struct IdentMatrix {
    Eigen::MatrixXd Y; // C0 x (J + H - 1)
    int rank = 0;
};

inline Eigen::MatrixXd build_ident_matrix(const SurveyDesign& d)
{
    const auto std_cells = d.cells_of_dataset(kStandardized);
    const int J = d.n_sites, H = d.n_habitats;
    Eigen::MatrixXd Y = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(std_cells.size()), J + H - 1);
    for (std::size_t r = 0; r < std_cells.size(); ++r) {
        const auto& c = d.cells[std_cells[r]];
        const auto row = static_cast<Eigen::Index>(r);
        Y(row, c.site_id) = 1.0;
        const int h = dominant_habitat(c);
        if (h > 0) Y(row, J + h - 1) = 1.0;
    }
    return Y;
}

/// Numerical rank: singular values below rel_tol * sigma_max count as zero.
inline int matrix_rank(const Eigen::MatrixXd& m, double rel_tol = 1e-9)
{
    if (m.size() == 0) return 0;
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
    const auto& sv = svd.singularValues();
    if (sv.size() == 0 || sv(0) == 0.0) return 0;
    return static_cast<int>((sv.array() > rel_tol * sv(0)).count());
}

struct IdentReport {
    int rank = 0;
    int required = 0;
    bool identifiable = false;
    std::vector<std::string> deficient_columns;
    std::vector<std::string> warnings;
};

inline std::string ident_column_name(const SurveyDesign& d, int col)
{
    return col < d.n_sites ? "site:" + std::to_string(col) : "habitat:" + std::to_string(col - d.n_sites + 1);
}

inline IdentReport check_identifiability(const SurveyDesign& d)
{
    IdentReport rep;
    const int J = d.n_sites, H = d.n_habitats;
    rep.required = J + H - 1;
    const Eigen::MatrixXd Y = build_ident_matrix(d);

    Eigen::VectorXd sv = Eigen::VectorXd::Zero(rep.required);
    Eigen::MatrixXd V = Eigen::MatrixXd::Identity(rep.required, rep.required);
    if (Y.rows() > 0) {
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(Y, Eigen::ComputeFullV);
        sv.head(svd.singularValues().size()) = svd.singularValues();
        V = svd.matrixV();
    }
    const double cut = sv.size() > 0 && sv(0) > 0.0 ? 1e-9 * sv(0) : 0.0;
    rep.rank = sv.size() > 0 && sv(0) > 0.0 ? static_cast<int>((sv.array() > cut).count()) : 0;
    rep.identifiable = rep.rank == rep.required;

    if (!rep.identifiable) {
        // Columns touched by any null-space direction.
        std::vector<bool> hit(static_cast<std::size_t>(rep.required), false);
        for (int k = rep.rank; k < rep.required; ++k)
            for (int col = 0; col < rep.required; ++col)
                if (std::abs(V(col, k)) > 1e-8) hit[static_cast<std::size_t>(col)] = true;
        for (int col = 0; col < rep.required; ++col)
            if (hit[static_cast<std::size_t>(col)]) rep.deficient_columns.push_back(ident_column_name(d, col));
    }

    for (const auto& c : d.cells)
        if (c.dataset == kStandardized && !detail::single_habitat(c))
            rep.warnings.push_back("standardized cell " + std::to_string(c.cell_id) +
                                   " spans several habitats; using its dominant habitat " +
                                   std::to_string(dominant_habitat(c)));
    if (d.n_opportunistic_cells() > 0) {
        Eigen::VectorXd visited = Eigen::VectorXd::Zero(H);
        for (const auto& c : d.cells)
            if (c.dataset == kOpportunistic && c.habitat_area.size() == H) visited += c.habitat_area;
        for (int h = 0; h < H; ++h)
            if (!(visited(h) > 0.0))
                rep.warnings.push_back("opportunistic cells never visit habitat " + std::to_string(h) +
                                       "; its observer preference is unconstrained");
    }
    return rep;
}

} // namespace relabund
