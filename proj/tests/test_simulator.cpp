#include <gtest/gtest.h>

#include "support.hpp"

using namespace relabund;

namespace {

SimConfig small_config(std::uint64_t seed)
{
    SimConfig c;
    c.n_species = 6;
    c.n_sites = 8;
    c.cells_std_per_site = 5;
    c.cells_opp_per_site = 10;
    c.seed = seed;
    return c;
}

} // namespace

TEST(Simulator, DefaultShape)
{
    const SimResult sim = simulate(SimConfig{});
    const auto& d = sim.design;
    EXPECT_EQ(d.n_species, 20);
    EXPECT_EQ(d.n_sites, 30);
    EXPECT_EQ(d.n_habitats, 2);
    EXPECT_EQ(d.n_cells(), 1200);
    EXPECT_TRUE(validate_design(d).empty());
    EXPECT_TRUE(check_identifiability(d).identifiable);
    for (const auto& c : d.cells) {
        EXPECT_NEAR(c.area(), 1.0, 1e-12);
        if (c.dataset == kStandardized) {
            EXPECT_EQ(*c.known_effort, 1.0);
            EXPECT_EQ((c.habitat_area.array() > 0.0).count(), 1);
        }
    }
    const auto& t = sim.truth;
    EXPECT_GE(t.N.minCoeff(), 20.0);
    EXPECT_LE(t.N.maxCoeff(), 200.0);
    EXPECT_GE(t.S.minCoeff(), 0.1);
    EXPECT_LE(t.S.maxCoeff(), 1.0);
    EXPECT_GE(t.q.minCoeff(), 0.1);
    EXPECT_LE(t.q.maxCoeff(), 1.0);
}

TEST(Simulator, SiteAreaCoversVisitedCells)
{
    const SimResult sim = simulate(small_config(2));
    const auto& d = sim.design;
    for (int j = 0; j < d.n_sites; ++j)
        for (int k = 0; k < 2; ++k) {
            Eigen::VectorXd used = Eigen::VectorXd::Zero(d.n_habitats);
            for (const auto& c : d.cells)
                if (c.site_id == j && c.dataset == k) used += c.habitat_area;
            EXPECT_TRUE((used.array() <= d.site_habitat_area.row(j).transpose().array() + 1e-12).all());
        }
}

TEST(Simulator, SameSeedSameOutput)
{
    const SimResult a = simulate(small_config(7));
    const SimResult b = simulate(small_config(7));
    const SimResult c = simulate(small_config(8));
    EXPECT_TRUE(a.design == b.design);
    EXPECT_TRUE(a.counts.same_counts(b.counts));
    EXPECT_TRUE(a.truth.N == b.truth.N);
    EXPECT_EQ(counts_to_string(a.counts), counts_to_string(b.counts));
    EXPECT_FALSE(a.truth.N == c.truth.N);
}

TEST(Simulator, CountsFollowTheRawIntensity)
{
    // Totals and Pearson dispersion against the independently coded intensity.
    SimConfig cfg = small_config(11);
    cfg.n_species = 10;
    cfg.n_sites = 20;
    double dispersion = 0.0, total_x = 0.0, total_lambda = 0.0;
    int n = 0;
    for (std::uint64_t seed = 11; seed < 16; ++seed) {
        cfg.seed = seed;
        const SimResult sim = simulate(cfg);
        const auto& d = sim.design;
        for (int i = 0; i < d.n_species; ++i)
            for (int c = 0; c < d.n_cells(); ++c) {
                const double lambda = fixture::oracle_raw_intensity(sim.truth, d, i, c);
                if (lambda == 0.0) continue;
                const double x = sim.counts.at(i, c);
                dispersion += (x - lambda) * (x - lambda) / lambda;
                total_x += x;
                total_lambda += lambda;
                ++n;
            }
    }
    EXPECT_LT(std::abs(total_x - total_lambda), 4.0 * std::sqrt(total_lambda));
    EXPECT_GT(dispersion / n, 0.9);
    EXPECT_LT(dispersion / n, 1.1);
}

TEST(Simulator, OpportunisticOnlySpeciesHaveNoStandardizedCounts)
{
    SimConfig cfg = small_config(3);
    cfg.n_opp_only_species = 2;
    const SimResult sim = simulate(cfg);
    const auto& d = sim.design;
    EXPECT_FALSE(d.is_monitored(5, kStandardized));
    EXPECT_EQ(sim.truth.P(5, kStandardized), 0.0);
    for (const auto& e : sim.counts.entries()) EXPECT_TRUE(d.is_monitored(e.species_id, d.cells[e.cell_id].dataset));
    for (int c : d.cells_of_dataset(kStandardized)) EXPECT_EQ(sim.counts.at(4, c), 0.0);
}

TEST(Simulator, UniformSelectionAndAlpha)
{
    SimConfig cfg = small_config(4);
    cfg.uniform_selection = true;
    EXPECT_TRUE((simulate(cfg).truth.S.array() == 1.0).all());

    // Doubling detectability doubles every intensity, so the sum of counts
    // roughly doubles.
    SimConfig base = small_config(5);
    SimConfig doubled = base;
    doubled.alpha = Eigen::MatrixXd::Constant(2, 2, 2.0);
    const SimResult a = simulate(base), b = simulate(doubled);
    EXPECT_TRUE(a.truth.N == b.truth.N);
    double sa = 0.0, sb = 0.0;
    for (const auto& e : a.counts.entries()) sa += static_cast<double>(e.count);
    for (const auto& e : b.counts.entries()) sb += static_cast<double>(e.count);
    EXPECT_NEAR(sb / sa, 2.0, 0.1);
}

TEST(Simulator, SiteClusteredRuleIsValid)
{
    SimConfig cfg = small_config(6);
    cfg.habitat_rule = HabitatRule::site_clustered;
    cfg.n_habitats = 3;
    const SimResult sim = simulate(cfg);
    EXPECT_TRUE(validate_design(sim.design).empty());
    EXPECT_EQ(parse_habitat_rule("site-clustered"), HabitatRule::site_clustered);
    EXPECT_EQ(parse_habitat_rule("dirichlet"), HabitatRule::dirichlet);
    EXPECT_FALSE(parse_habitat_rule("other"));
}

TEST(Simulator, RejectsBadConfig)
{
    SimConfig cfg;
    cfg.n_sites = 0;
    EXPECT_THROW(simulate(cfg), std::invalid_argument);
    cfg = SimConfig{};
    cfg.selection = {0.0, 1.0};
    EXPECT_THROW(simulate(cfg), std::invalid_argument);
    cfg = SimConfig{};
    cfg.n_opp_only_species = cfg.n_species;
    EXPECT_THROW(simulate(cfg), std::invalid_argument);
    cfg = SimConfig{};
    cfg.alpha = Eigen::MatrixXd::Ones(3, 2);
    EXPECT_THROW(simulate(cfg), std::invalid_argument);
}

TEST(Simulator, TruthRelativeAbundancesMatchTildeRoute)
{
    const SimResult sim = simulate(small_config(9));
    const Eigen::MatrixXd a = truth_relative_abundances(sim.truth, 2);
    const Eigen::MatrixXd b = relative_abundances(to_tilde(sim.truth, sim.design), sim.design, 2);
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < a.cols(); ++j) EXPECT_LT(fixture::relative_error(a(i, j), b(i, j)), 1e-12);
    EXPECT_TRUE((a.col(2).array() == 1.0).all());
    EXPECT_THROW(truth_relative_abundances(sim.truth, 99), std::invalid_argument);
}

TEST(Simulator, HoldoutSurvey)
{
    const SimResult sim = simulate(small_config(10));
    HoldoutConfig hc;
    hc.quadrats_per_site = 2;
    hc.points_per_quadrat = 4;
    const HoldoutSurvey h = simulate_holdout(sim.design, sim.truth, hc);
    EXPECT_EQ(h.quadrats.size(), 16u);
    EXPECT_EQ(h.counts.rows(), 6);
    EXPECT_EQ(h.counts.cols(), 16);
    EXPECT_NO_THROW(check_holdout(h, sim.design));
    for (std::size_t q = 0; q < h.quadrats.size(); ++q) {
        EXPECT_EQ(h.quadrats[q].quadrat_id, static_cast<int>(q));
        EXPECT_EQ(h.quadrats[q].points.size(), 4u);
        for (const auto& p : h.quadrats[q].points) {
            EXPECT_GE(p.effort, 1.0);
            EXPECT_LE(p.effort, 4.0);
            EXPECT_GT(sim.design.site_habitat_area(h.quadrats[q].site_id, p.habitat), 0.0);
        }
    }
    const HoldoutSurvey again = simulate_holdout(sim.design, sim.truth, hc);
    EXPECT_TRUE(again.counts == h.counts);
    EXPECT_EQ(holdout_to_json(again).dump(), holdout_to_json(h).dump());
}
