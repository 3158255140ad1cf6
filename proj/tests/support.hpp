#pragma once

// Fixtures and independent oracles shared by the test binaries.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "relabund.hpp"
#include "relabund/cli.hpp"

namespace fixture {

using namespace relabund;

inline double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

inline int uniform_int(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

struct DesignShape {
    int species = 3;
    int sites = 2;
    int habitats = 2;
    int std_per_site = 2;
    int opp_per_site = 2;
    int opp_only = 0;     // trailing species monitored only opportunistically
    int std_only = 0;     // species before them monitored only in the standardized data
    bool mixed_std = false; // standardized cells may span habitats
};

/// Random valid design. Standardized cells rotate through the habitats so
/// every habitat is visited whenever there are enough cells.
inline SurveyDesign random_design(std::mt19937_64& rng, const DesignShape& s)
{
    SurveyDesign d;
    d.n_species = s.species;
    d.n_sites = s.sites;
    d.n_habitats = s.habitats;
    d.monitored.assign(static_cast<std::size_t>(s.species), {true, true});
    for (int k = 0; k < s.opp_only; ++k) d.monitored[static_cast<std::size_t>(s.species - 1 - k)] = {false, true};
    for (int k = 0; k < s.std_only; ++k) d.monitored[static_cast<std::size_t>(s.species - 1 - s.opp_only - k)] = {true, false};
    d.site_habitat_area = Eigen::MatrixXd::Zero(s.sites, s.habitats);
    int id = 0, rotation = 0;
    for (int j = 0; j < s.sites; ++j) {
        Eigen::VectorXd used_std = Eigen::VectorXd::Zero(s.habitats), used_opp = Eigen::VectorXd::Zero(s.habitats);
        for (int n = 0; n < s.std_per_site; ++n) {
            CellRecord c{id++, kStandardized, j, Eigen::VectorXd::Zero(s.habitats), uniform(rng, 0.5, 2.0)};
            if (s.mixed_std) {
                for (int h = 0; h < s.habitats; ++h) c.habitat_area(h) = uniform(rng, 0.1, 1.0);
            } else {
                c.habitat_area(rotation++ % s.habitats) = uniform(rng, 0.5, 1.5);
            }
            used_std += c.habitat_area;
            d.cells.push_back(std::move(c));
        }
        for (int n = 0; n < s.opp_per_site; ++n) {
            CellRecord c{id++, kOpportunistic, j, Eigen::VectorXd::Zero(s.habitats), std::nullopt};
            for (int h = 0; h < s.habitats; ++h) c.habitat_area(h) = uniform(rng, 0.05, 1.0);
            used_opp += c.habitat_area;
            d.cells.push_back(std::move(c));
        }
        for (int h = 0; h < s.habitats; ++h)
            d.site_habitat_area(j, h) = std::max(used_std(h), used_opp(h)) + uniform(rng, 0.0, 1.0);
    }
    return d;
}

inline TildeParams random_tilde(std::mt19937_64& rng, const SurveyDesign& d, double spread = 1.0)
{
    TildeParams p = TildeParams::zeros(d);
    for (Eigen::Index k = 0; k < p.log_N.size(); ++k) p.log_N.data()[k] = uniform(rng, 0.5, 3.0);
    for (Eigen::Index k = 0; k < p.log_P.size(); ++k) p.log_P(k) = uniform(rng, -spread, spread);
    for (Eigen::Index k = 0; k < p.log_E1.size(); ++k) p.log_E1(k) = uniform(rng, -spread, spread);
    for (Eigen::Index h = 1; h < p.log_q.size(); ++h) p.log_q(h) = uniform(rng, -spread, spread);
    for (Eigen::Index i = 0; i < p.log_S.rows(); ++i)
        for (Eigen::Index h = 1; h < p.log_S.cols(); ++h) p.log_S(i, h) = uniform(rng, -spread, spread);
    const int r = d.reference_species();
    if (r >= 0) p.log_P(r) = 0.0;
    return p;
}

/// Counts drawn from the given intensities, only for in-scope pairs of the full model.
inline CountTable poisson_counts(std::mt19937_64& rng, const SurveyDesign& d, const std::function<double(int, int)>& lambda)
{
    std::vector<CountEntry> e;
    for (int c = 0; c < d.n_cells(); ++c)
        for (int i = 0; i < d.n_species; ++i) {
            if (!d.is_monitored(i, d.cells[c].dataset)) continue;
            const double l = lambda(i, c);
            e.push_back({i, c, l > 0.0 ? std::poisson_distribution<std::int64_t>(l)(rng) : 0});
        }
    return CountTable(d, std::move(e));
}

/// Raw parameters consistent with the design's known efforts.
inline RawParams random_raw(std::mt19937_64& rng, const SurveyDesign& d, double effort_scale = 1.0)
{
    const int I = d.n_species, J = d.n_sites, H = d.n_habitats;
    RawParams r;
    r.N.resize(I, J);
    for (Eigen::Index k = 0; k < r.N.size(); ++k) r.N.data()[k] = uniform(rng, 5.0, 50.0);
    r.P = Eigen::MatrixXd::Zero(I, 2);
    for (int i = 0; i < I; ++i)
        for (int k = 0; k < 2; ++k)
            if (d.is_monitored(i, k)) r.P(i, k) = uniform(rng, 0.1, 1.0);
    r.q.resize(H, 2);
    for (Eigen::Index k = 0; k < r.q.size(); ++k) r.q.data()[k] = uniform(rng, 0.1, 1.0);
    r.S.resize(I, H);
    for (Eigen::Index k = 0; k < r.S.size(); ++k) r.S.data()[k] = uniform(rng, 0.1, 1.0);
    r.E.resize(d.n_cells());
    for (int c = 0; c < d.n_cells(); ++c)
        r.E(c) = d.cells[c].dataset == kStandardized ? effort_scale * *d.cells[c].known_effort : uniform(rng, 0.5, 5.0);
    return r;
}

// ---------------------------------------------------------------------------
// Oracles

/// Habitat model on raw parameters, written out term by term:
/// N_ij E_ck P_ik sum_h (q_hk / sum_h' q_h'k V_h'c) (S_ih / sum_h' S_ih' V_h'j) V_hc.
inline double oracle_raw_intensity(const RawParams& r, const SurveyDesign& d, int i, int c)
{
    const auto& cell = d.cells[c];
    const int k = cell.dataset, j = cell.site_id;
    if (!d.monitored[i][k]) return 0.0;
    double qv = 0.0, sv = 0.0;
    for (int h = 0; h < d.n_habitats; ++h) qv += r.q(h, k) * cell.habitat_area(h);
    for (int h = 0; h < d.n_habitats; ++h) sv += r.S(i, h) * d.site_habitat_area(j, h);
    double total = 0.0;
    for (int h = 0; h < d.n_habitats; ++h) {
        const double observer = r.q(h, k) / qv;
        const double species = r.S(i, h) / sv;
        total += observer * species * cell.habitat_area(h);
    }
    return r.N(i, j) * r.E(c) * r.P(i, k) * total;
}

inline double poisson_log_pmf(double x, double lambda) { return x * std::log(lambda) - lambda - std::lgamma(x + 1.0); }

/// Central finite differences of f along every free coordinate.
inline Eigen::VectorXd finite_difference(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x,
                                         double step = 1e-5)
{
    Eigen::VectorXd g(x.size());
    for (Eigen::Index k = 0; k < x.size(); ++k) {
        Eigen::VectorXd a = x, b = x;
        a(k) += step;
        b(k) -= step;
        g(k) = (f(a) - f(b)) / (2.0 * step);
    }
    return g;
}

/// Row reduction with partial pivoting. Suited to small integer matrices.
inline int gaussian_rank(Eigen::MatrixXd m)
{
    const Eigen::Index rows = m.rows(), cols = m.cols();
    int rank = 0;
    for (Eigen::Index col = 0; col < cols && rank < rows; ++col) {
        Eigen::Index pivot = rank;
        for (Eigen::Index r = rank + 1; r < rows; ++r)
            if (std::abs(m(r, col)) > std::abs(m(pivot, col))) pivot = r;
        if (std::abs(m(pivot, col)) < 1e-9) continue;
        m.row(pivot).swap(m.row(rank));
        for (Eigen::Index r = 0; r < rows; ++r) {
            if (r == rank) continue;
            const double f = m(r, col) / m(rank, col);
            if (f != 0.0) m.row(r) -= f * m.row(rank);
        }
        ++rank;
    }
    return rank;
}

/// Y matrix rebuilt from the design: site indicator plus habitat indicator for h > 0.
inline Eigen::MatrixXd oracle_ident_matrix(const SurveyDesign& d)
{
    std::vector<Eigen::RowVectorXd> rows;
    for (const auto& c : d.cells) {
        if (c.dataset != kStandardized) continue;
        Eigen::RowVectorXd r = Eigen::RowVectorXd::Zero(d.n_sites + d.n_habitats - 1);
        r(c.site_id) = 1.0;
        int best = 0;
        for (int h = 1; h < d.n_habitats; ++h)
            if (c.habitat_area(h) > c.habitat_area(best)) best = h;
        if (best > 0) r(d.n_sites + best - 1) = 1.0;
        rows.push_back(r);
    }
    Eigen::MatrixXd y(static_cast<Eigen::Index>(rows.size()), d.n_sites + d.n_habitats - 1);
    for (std::size_t k = 0; k < rows.size(); ++k) y.row(static_cast<Eigen::Index>(k)) = rows[k];
    return y;
}

/// Pearson r by the textbook computational formula.
inline double oracle_pearson(const std::vector<double>& x, const std::vector<double>& y)
{
    const double n = static_cast<double>(x.size());
    double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
    for (std::size_t k = 0; k < x.size(); ++k) {
        sx += x[k];
        sy += y[k];
        sxx += x[k] * x[k];
        syy += y[k] * y[k];
        sxy += x[k] * y[k];
    }
    return (n * sxy - sx * sy) / std::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy));
}

/// Linear-interpolation quantile on sorted data (spreadsheet PERCENTILE).
inline double oracle_percentile(std::vector<double> v, double p)
{
    std::sort(v.begin(), v.end());
    const double pos = p * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline double relative_error(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); }

// ---------------------------------------------------------------------------
// Files

inline std::filesystem::path scratch_dir(const std::string& name)
{
    auto dir = std::filesystem::temp_directory_path() / ("relabund-test-" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline std::string slurp(const std::filesystem::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void spit(const std::filesystem::path& p, const std::string& text)
{
    std::ofstream out(p, std::ios::binary);
    out << text;
}

/// Runs the CLI in-process and captures both streams.
struct CliResult {
    int code = 0;
    std::string out, err;
};

inline CliResult run_cli(std::vector<std::string> args)
{
    args.insert(args.begin(), "relabund");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    CliResult r;
    r.code = relabund::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

} // namespace fixture
