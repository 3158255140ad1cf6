#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "relabund/csv.hpp"
#include "relabund/diagnostics.hpp"
#include "relabund/errors.hpp"
#include "relabund/model.hpp"
#include "relabund/reparam.hpp"
#include "relabund/survey.hpp"

namespace relabund {

struct HoldoutPoint {
    int habitat = 0;
    double area = 0.0;
    double effort = 0.0;
};

/// A holdout quadrat lies in one design site and holds several observation points.
struct HoldoutQuadrat {
    int quadrat_id = 0;
    int site_id = 0;
    std::vector<HoldoutPoint> points;
};

struct HoldoutSurvey {
    std::vector<HoldoutQuadrat> quadrats; // quadrat_id == position
    Eigen::MatrixXd counts;               // I x quadrats, summed over points
};

inline void check_holdout(const HoldoutSurvey& h, const SurveyDesign& d)
{
    for (std::size_t q = 0; q < h.quadrats.size(); ++q) {
        const auto& quad = h.quadrats[q];
        if (quad.quadrat_id != static_cast<int>(q)) throw DataError("holdout quadrat ids must be 0..Q-1 in order");
        if (quad.site_id < 0 || quad.site_id >= d.n_sites)
            throw DataError("holdout quadrat " + std::to_string(q) + " refers to unknown site " + std::to_string(quad.site_id));
        for (const auto& p : quad.points) {
            if (p.habitat < 0 || p.habitat >= d.n_habitats)
                throw DataError("holdout quadrat " + std::to_string(q) + " has habitat " + std::to_string(p.habitat) +
                                " outside 0.." + std::to_string(d.n_habitats - 1));
            if (!(p.effort > 0.0)) throw DataError("holdout efforts must be positive");
            if (!(p.area >= 0.0)) throw DataError("holdout areas must be non-negative");
        }
    }
    if (h.counts.size() > 0 && (h.counts.rows() != d.n_species || h.counts.cols() != static_cast<Eigen::Index>(h.quadrats.size())))
        throw DimensionError("holdout counts must be I x quadrats");
}

// ---------------------------------------------------------------------------
// Predictors. Each takes abundance estimates on the scale of the model's N.

namespace detail {

inline Eigen::RowVectorXd unit_max_row(const Eigen::MatrixXd& s, int i)
{
    Eigen::RowVectorXd row = s.row(i);
    const double top = row.maxCoeff();
    if (!(top > 0.0)) throw DataError("selection estimates must be positive");
    for (Eigen::Index h = 0; h < row.size(); ++h) row(h) = row(h) / top;
    return row;
}

inline Eigen::MatrixXd habitat_predictor(const Eigen::MatrixXd& n_hat, const Eigen::MatrixXd& s_hat,
                                         const HoldoutSurvey& h, const auto& habitat_area_of)
{
    const auto I = n_hat.rows();
    const auto Q = static_cast<Eigen::Index>(h.quadrats.size());
    Eigen::MatrixXd out(I, Q);
    for (Eigen::Index i = 0; i < I; ++i) {
        // Selection is only defined up to a factor; a unit maximum keeps a
        // uniform row exactly equal to one.
        const Eigen::RowVectorXd s = unit_max_row(s_hat, static_cast<int>(i));
        for (Eigen::Index q = 0; q < Q; ++q) {
            const auto& quad = h.quadrats[static_cast<std::size_t>(q)];
            const Eigen::RowVectorXd v = habitat_area_of(quad);
            double denom = 0.0;
            for (Eigen::Index k = 0; k < v.size(); ++k) denom += s(k) * v(k);
            double sum = 0.0;
            for (const auto& p : quad.points) sum += p.effort * (s(p.habitat) * p.area) / denom;
            out(i, q) = n_hat(i, quad.site_id) * sum;
        }
    }
    return out;
}

} // namespace detail

/// X^_ij = N^_ij sum_c E_c S^_ih(c) V_c / sum_h' S^_ih' V_h'j
inline Eigen::MatrixXd predict_habitat(const Eigen::MatrixXd& n_hat, const Eigen::MatrixXd& s_hat, const SurveyDesign& d,
                                       const HoldoutSurvey& h)
{
    check_holdout(h, d);
    return detail::habitat_predictor(n_hat, s_hat, h, [&](const HoldoutQuadrat& q) {
        return Eigen::RowVectorXd(d.site_habitat_area.row(q.site_id));
    });
}

/// X^_ij = N^_i sum_c E_c S^_ih(c) V_c / sum_h' S^_ih' V_h', with V_h' the whole-region totals.
inline Eigen::MatrixXd predict_one_quadrat(const Eigen::VectorXd& n_hat, const Eigen::MatrixXd& s_hat,
                                           const SurveyDesign& d, const HoldoutSurvey& h)
{
    check_holdout(h, d);
    const Eigen::RowVectorXd total = d.total_habitat_area().transpose();
    const Eigen::MatrixXd wide = n_hat.replicate(1, d.n_sites);
    return detail::habitat_predictor(wide, s_hat, h, [&](const HoldoutQuadrat&) { return total; });
}

/// X^_ij = N^_ij sum_c E_c V_c / V_j
inline Eigen::MatrixXd predict_no_habitat(const Eigen::MatrixXd& n_hat, const SurveyDesign& d, const HoldoutSurvey& h)
{
    check_holdout(h, d);
    const auto I = n_hat.rows();
    const auto Q = static_cast<Eigen::Index>(h.quadrats.size());
    Eigen::MatrixXd out(I, Q);
    for (Eigen::Index i = 0; i < I; ++i)
        for (Eigen::Index q = 0; q < Q; ++q) {
            const auto& quad = h.quadrats[static_cast<std::size_t>(q)];
            double v_j = 0.0;
            for (Eigen::Index k = 0; k < d.n_habitats; ++k) v_j += d.site_habitat_area(quad.site_id, k);
            double sum = 0.0;
            for (const auto& p : quad.points) sum += p.effort * p.area / v_j;
            out(i, q) = n_hat(i, quad.site_id) * sum;
        }
    return out;
}

/// Abundance on the model's own scale recovered from tilde parameters, up
/// to a per-species constant that correlations ignore.
inline Eigen::MatrixXd abundance_estimates(const TildeParams& p, const ModelVariant& v, const SurveyDesign& d)
{
    check_dimensions(p, d);
    const int I = d.n_species, J = d.n_sites, H = d.n_habitats;
    Eigen::MatrixXd n(I, J);
    const Eigen::VectorXd total = v.total_habitat_area.size() == H ? v.total_habitat_area : d.total_habitat_area();
    for (int i = 0; i < I; ++i)
        for (int j = 0; j < J; ++j) {
            double w = 0.0;
            for (int h = 0; h < H; ++h) {
                const double s = v.habitat() ? std::exp(p.log_S(i, h)) : 1.0;
                w += s * (v.one_quadrat() ? total(h) : d.site_habitat_area(j, h));
            }
            n(i, j) = std::exp(p.log_N(i, v.one_quadrat() ? 0 : j)) * w;
        }
    return n;
}

inline Eigen::MatrixXd predict_holdout(const TildeParams& p, const ModelVariant& v, const SurveyDesign& d,
                                       const HoldoutSurvey& h)
{
    const Eigen::MatrixXd n_hat = abundance_estimates(p, v, d);
    if (!v.habitat()) return predict_no_habitat(n_hat, d, h);
    const Eigen::MatrixXd s_hat = p.log_S.array().exp().matrix();
    if (v.one_quadrat()) return predict_one_quadrat(n_hat.col(0), s_hat, d, h);
    return predict_habitat(n_hat, s_hat, d, h);
}

// ---------------------------------------------------------------------------

/// Pearson correlation; empty when either vector is constant.
inline std::optional<double> pearson(const Eigen::Ref<const Eigen::VectorXd>& x, const Eigen::Ref<const Eigen::VectorXd>& y)
{
    if (x.size() != y.size()) throw DimensionError("pearson needs vectors of equal length");
    if (x.size() < 2) throw DataError("pearson needs at least two quadrats");
    const double mx = x.mean(), my = y.mean();
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (Eigen::Index k = 0; k < x.size(); ++k) {
        const double a = x(k) - mx, b = y(k) - my;
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    if (!(sxx > 0.0) || !(syy > 0.0)) return std::nullopt;
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

struct CorrelationSummary {
    double median = std::numeric_limits<double>::quiet_NaN();
    double q1 = std::numeric_limits<double>::quiet_NaN();
    double q3 = std::numeric_limits<double>::quiet_NaN();
    int n_used = 0;
    int n_excluded = 0;
};

struct SpeciesCorrelation {
    int species = 0;
    std::optional<double> r;
    bool monitored_standardized = false;
};

struct PearsonReport {
    std::vector<SpeciesCorrelation> species;
    CorrelationSummary all, monitored, not_monitored;
};

inline CorrelationSummary summarize_correlations(const std::vector<SpeciesCorrelation>& rs, const auto& keep)
{
    CorrelationSummary s;
    std::vector<double> vals;
    for (const auto& r : rs) {
        if (!keep(r)) continue;
        if (r.r) vals.push_back(*r.r);
        else ++s.n_excluded;
    }
    s.n_used = static_cast<int>(vals.size());
    if (!vals.empty()) {
        std::sort(vals.begin(), vals.end());
        s.median = quantile_sorted(vals, 0.5);
        s.q1 = quantile_sorted(vals, 0.25);
        s.q3 = quantile_sorted(vals, 0.75);
    }
    return s;
}

/// Per-species r between predicted and observed quadrat counts, summarized
/// over all species and split by standardized monitoring.
inline PearsonReport pearson_by_species(const Eigen::MatrixXd& predicted, const Eigen::MatrixXd& observed,
                                        const std::vector<bool>& monitored_standardized)
{
    if (predicted.rows() != observed.rows() || predicted.cols() != observed.cols())
        throw DimensionError("predicted and observed counts differ in shape");
    if (static_cast<Eigen::Index>(monitored_standardized.size()) != predicted.rows())
        throw DimensionError("monitoring flags must cover every species");
    PearsonReport rep;
    for (Eigen::Index i = 0; i < predicted.rows(); ++i)
        rep.species.push_back({static_cast<int>(i), pearson(predicted.row(i).transpose(), observed.row(i).transpose()),
                               monitored_standardized[static_cast<std::size_t>(i)]});
    rep.all = summarize_correlations(rep.species, [](const SpeciesCorrelation&) { return true; });
    rep.monitored = summarize_correlations(rep.species, [](const SpeciesCorrelation& r) { return r.monitored_standardized; });
    rep.not_monitored =
        summarize_correlations(rep.species, [](const SpeciesCorrelation& r) { return !r.monitored_standardized; });
    return rep;
}

inline std::vector<bool> standardized_flags(const SurveyDesign& d)
{
    std::vector<bool> f;
    for (int i = 0; i < d.n_species; ++i) f.push_back(d.is_monitored(i, kStandardized));
    return f;
}

// ---------------------------------------------------------------------------

struct RelativeErrors {
    Eigen::MatrixXd diff; // (fitted - truth) / truth; NaN in the reference column
    double median_abs = 0.0;
};

inline RelativeErrors relative_abundance_errors(const Eigen::MatrixXd& fitted, const Eigen::MatrixXd& truth,
                                                int reference_site)
{
    if (fitted.rows() != truth.rows() || fitted.cols() != truth.cols())
        throw DimensionError("fitted and true relative abundances differ in shape");
    if (reference_site < 0 || reference_site >= truth.cols()) throw std::invalid_argument("reference site out of range");
    RelativeErrors e;
    e.diff = Eigen::MatrixXd::Constant(truth.rows(), truth.cols(), std::numeric_limits<double>::quiet_NaN());
    std::vector<double> abs_vals;
    for (Eigen::Index i = 0; i < truth.rows(); ++i)
        for (Eigen::Index j = 0; j < truth.cols(); ++j) {
            if (j == reference_site) continue;
            if (truth(i, j) == 0.0)
                throw DataError("true relative abundance is zero for species " + std::to_string(i) + " at site " +
                                std::to_string(j));
            e.diff(i, j) = (fitted(i, j) - truth(i, j)) / truth(i, j);
            abs_vals.push_back(std::abs(e.diff(i, j)));
        }
    e.median_abs = abs_vals.empty() ? 0.0 : quantile(abs_vals, 0.5);
    return e;
}

/// N^_ij V_j0 / (N^_ij0 V_j), I x J.
inline Eigen::MatrixXd relative_density_map(const TildeParams& p, const SurveyDesign& d, int reference_site)
{
    Eigen::MatrixXd rel = relative_abundances(p, d, reference_site);
    const double v_ref = d.site_area(reference_site);
    for (int j = 0; j < d.n_sites; ++j)
        if (j != reference_site) rel.col(j) *= v_ref / d.site_area(j);
    return rel;
}

// ---------------------------------------------------------------------------
// Holdout files: JSON quadrat list plus a species_id,quadrat_id,count CSV.

inline nlohmann::json holdout_to_json(const HoldoutSurvey& h)
{
    nlohmann::json j;
    j["quadrats"] = nlohmann::json::array();
    for (const auto& q : h.quadrats) {
        nlohmann::json pts = nlohmann::json::array();
        for (const auto& p : q.points) pts.push_back({{"habitat", p.habitat}, {"area", p.area}, {"effort", p.effort}});
        j["quadrats"].push_back({{"quadrat_id", q.quadrat_id}, {"site_id", q.site_id}, {"points", pts}});
    }
    return j;
}

inline HoldoutSurvey holdout_from_json(const nlohmann::json& j, const std::string& where = "holdout")
{
    HoldoutSurvey h;
    try {
        for (const auto& q : j.at("quadrats")) {
            HoldoutQuadrat quad{q.at("quadrat_id").get<int>(), q.at("site_id").get<int>(), {}};
            for (const auto& p : q.at("points"))
                quad.points.push_back({p.at("habitat").get<int>(), p.at("area").get<double>(), p.at("effort").get<double>()});
            h.quadrats.push_back(std::move(quad));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(where + ": " + e.what());
    }
    std::sort(h.quadrats.begin(), h.quadrats.end(),
              [](const HoldoutQuadrat& a, const HoldoutQuadrat& b) { return a.quadrat_id < b.quadrat_id; });
    return h;
}

inline Eigen::MatrixXd parse_holdout_counts(std::istream& in, const std::string& source, int n_species, int n_quadrats)
{
    Eigen::MatrixXd x = Eigen::MatrixXd::Zero(n_species, n_quadrats);
    std::set<std::pair<int, int>> seen;
    csv::read_rows(in, source, {"species_id", "quadrat_id", "count"}, 0,
                   [&](const std::vector<std::string_view>& f, std::size_t line) {
                       const int i = csv::parse_number<int>(f[0], source, line, "species_id");
                       const int q = csv::parse_number<int>(f[1], source, line, "quadrat_id");
                       const auto n = csv::parse_number<std::int64_t>(f[2], source, line, "count");
                       if (i < 0 || i >= n_species) throw ParseError(source, line, "unknown species " + std::string(f[0]));
                       if (q < 0 || q >= n_quadrats) throw ParseError(source, line, "unknown quadrat " + std::string(f[1]));
                       if (n < 0) throw ParseError(source, line, "negative count");
                       if (!seen.insert({i, q}).second) throw ParseError(source, line, "duplicate species/quadrat pair");
                       x(i, q) = static_cast<double>(n);
                   });
    return x;
}

inline std::string holdout_counts_to_string(const Eigen::MatrixXd& counts)
{
    std::ostringstream out;
    out << "species_id,quadrat_id,count\n";
    for (Eigen::Index i = 0; i < counts.rows(); ++i)
        for (Eigen::Index q = 0; q < counts.cols(); ++q)
            out << i << ',' << q << ',' << static_cast<std::int64_t>(counts(i, q)) << '\n';
    return out.str();
}

inline HoldoutSurvey load_holdout(const std::filesystem::path& json_path, const std::filesystem::path& counts_path,
                                  const SurveyDesign& d)
{
    const std::string text = detail::read_file(json_path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(json_path.string(), detail::line_of_offset(text, e.byte), e.what());
    }
    HoldoutSurvey h = holdout_from_json(j, json_path.string());
    auto in = csv::open_input(counts_path);
    h.counts = parse_holdout_counts(in, counts_path.string(), d.n_species, static_cast<int>(h.quadrats.size()));
    check_holdout(h, d);
    return h;
}

} // namespace relabund
