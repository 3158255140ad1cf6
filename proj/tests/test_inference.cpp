#include <gtest/gtest.h>

#include <numeric>

#include "support.hpp"

using namespace relabund;
using fixture::DesignShape;

namespace {

SurveyDesign single_cell_design()
{
    SurveyDesign d;
    d.n_species = 1;
    d.n_sites = 1;
    d.n_habitats = 1;
    d.site_habitat_area = Eigen::MatrixXd::Constant(1, 1, 1.0);
    d.monitored = {{true, true}};
    d.cells.push_back({0, kStandardized, 0, Eigen::VectorXd::Constant(1, 1.0), 1.0});
    d.cells.push_back({1, kOpportunistic, 0, Eigen::VectorXd::Constant(1, 1.0), std::nullopt});
    return d;
}

InferenceConfig short_config()
{
    InferenceConfig cfg;
    cfg.n_chains = 2;
    cfg.n_warmup = 300;
    cfg.n_samples = 600;
    cfg.thin = 3;
    return cfg;
}

} // namespace

TEST(Inference, ConfigValidation)
{
    InferenceConfig cfg;
    EXPECT_NO_THROW(cfg.validate());
    cfg.thin = 0;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = InferenceConfig{};
    cfg.prior[0] = {1.0, 1.0};
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = InferenceConfig{};
    EXPECT_EQ(cfg.n_chains, 4);
    EXPECT_EQ(cfg.n_warmup, 5000);
    EXPECT_EQ(cfg.n_samples, 10000);
    EXPECT_EQ(cfg.thin, 5);
    EXPECT_EQ(cfg.bounds(Block::log_S).lo, -20.0);
    EXPECT_EQ(cfg.bounds(Block::log_S).hi, 20.0);
}

TEST(Inference, MapSingleCellPoissonMean)
{
    const SurveyDesign d = single_cell_design();
    const CountTable x(d, {{0, 0, 5}});
    const MapResult r = fit_map(ModelVariant::make(Variant::stand_only_hab, d), d, x, InferenceConfig{});
    EXPECT_TRUE(r.converged);
    EXPECT_NEAR(std::exp(r.params.log_N(0, 0)), 5.0, 1e-8);
    EXPECT_NEAR(r.log_lik, 5.0 * std::log(5.0) - 5.0 - std::lgamma(6.0), 1e-10);
}

TEST(Inference, MapAllZeroCountsPinsAbundanceToLowerBound)
{
    std::mt19937_64 rng(50);
    const SurveyDesign d = fixture::random_design(rng, DesignShape{});
    const CountTable x(d, {});
    InferenceConfig cfg;
    const MapResult r = fit_map(ModelVariant::make(Variant::stand_only_hab, d), d, x, cfg);
    EXPECT_TRUE(r.converged);
    for (Eigen::Index k = 0; k < r.params.log_N.size(); ++k) EXPECT_EQ(r.params.log_N.data()[k], -20.0);
}

TEST(Inference, MapDominatesTruthOnSimulatedData)
{
    SimConfig sc;
    sc.n_species = 8;
    sc.n_sites = 10;
    sc.seed = 3;
    const SimResult sim = simulate(sc);
    const auto v = ModelVariant::make(Variant::opp_stand_hab, sim.design);
    const PoissonModel m(v, sim.design, sim.counts);
    const MapResult r = fit_map(m, InferenceConfig{});
    EXPECT_TRUE(r.converged) << r.grad_sup_norm;
    EXPECT_GE(r.log_lik, m.log_likelihood(to_tilde(sim.truth, sim.design)));
}

TEST(Inference, MapIgnoresCountOrder)
{
    SimConfig sc;
    sc.n_species = 5;
    sc.n_sites = 6;
    sc.seed = 4;
    const SimResult sim = simulate(sc);
    auto entries = sim.counts.entries();
    std::reverse(entries.begin(), entries.end());
    const CountTable shuffled(sim.design, entries);
    const auto v = ModelVariant::make(Variant::opp_stand_hab, sim.design);
    const MapResult a = fit_map(v, sim.design, sim.counts, InferenceConfig{});
    const MapResult b = fit_map(v, sim.design, shuffled, InferenceConfig{});
    const ParamLayout L(v, sim.design);
    EXPECT_LE((L.pack(a.params) - L.pack(b.params)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Inference, IdentifiabilityGate)
{
    std::mt19937_64 rng(51);
    SurveyDesign d = fixture::random_design(rng, DesignShape{});
    for (auto& c : d.cells)
        if (c.dataset == kStandardized) c.habitat_area = Eigen::Vector2d(0.5, 0.0);
    const CountTable x = fixture::poisson_counts(rng, d, [](int, int) { return 2.0; });
    InferenceConfig cfg;
    const auto v = ModelVariant::make(Variant::opp_stand_hab, d);
    try {
        fit_map(v, d, x, cfg);
        FAIL();
    } catch (const IdentifiabilityError& e) {
        EXPECT_NE(std::string(e.what()).find("rank"), std::string::npos);
    }
    cfg.force = true;
    EXPECT_NO_THROW(fit_map(v, d, x, cfg));
}

TEST(Inference, BicDefinition)
{
    std::mt19937_64 rng(52);
    const SurveyDesign d = fixture::random_design(rng, DesignShape{});
    const TildeParams p = fixture::random_tilde(rng, d);
    const auto v = ModelVariant::make(Variant::opp_stand_hab, d);
    const CountTable x = fixture::poisson_counts(rng, d, [&](int i, int c) { return intensity(p, v, d, i, c); });
    const PoissonModel m(v, d, x);
    const double expect = -2.0 * m.log_likelihood(p) + m.n_free() * std::log(static_cast<double>(m.n_obs()));
    EXPECT_DOUBLE_EQ(compute_bic(v, d, x, p), expect);
    // n_obs counts every in-scope pair, structural zeros included.
    EXPECT_EQ(m.n_obs(), d.n_species * d.n_cells());
}

TEST(Inference, BicPrefersHabitatModelOnHabitatData)
{
    SimConfig sc;
    sc.n_species = 10;
    sc.n_sites = 10;
    sc.seed = 5;
    const SimResult sim = simulate(sc);
    const auto hab = ModelVariant::make(Variant::opp_stand_hab, sim.design);
    const auto nohab = ModelVariant::make(Variant::opp_stand_no_hab, sim.design);
    const MapResult a = fit_map(hab, sim.design, sim.counts, InferenceConfig{});
    const MapResult b = fit_map(nohab, sim.design, sim.counts, InferenceConfig{});
    EXPECT_LT(compute_bic(hab, sim.design, sim.counts, a.params), compute_bic(nohab, sim.design, sim.counts, b.params));
}

TEST(Inference, McmcIsDeterministic)
{
    SimConfig sc;
    sc.n_species = 4;
    sc.n_sites = 4;
    sc.cells_std_per_site = 4;
    sc.cells_opp_per_site = 6;
    const SimResult sim = simulate(sc);
    InferenceConfig cfg = short_config();
    cfg.keep_draws = true;
    const auto v = ModelVariant::make(Variant::opp_stand_hab, sim.design);
    const PosteriorSummary a = fit_mcmc(v, sim.design, sim.counts, cfg);
    cfg.threads = 2;
    const PosteriorSummary b = fit_mcmc(v, sim.design, sim.counts, cfg);
    ASSERT_TRUE(a.draws && b.draws);
    ASSERT_EQ(a.draws->chains.size(), b.draws->chains.size());
    for (std::size_t c = 0; c < a.draws->chains.size(); ++c) EXPECT_TRUE(a.draws->chains[c] == b.draws->chains[c]);
    EXPECT_EQ(summary_to_json(a).dump(), summary_to_json(b).dump());
}

TEST(Inference, DrawsRespectPriorBounds)
{
    const SurveyDesign d = single_cell_design();
    const CountTable x(d, {});
    InferenceConfig cfg = short_config();
    cfg.prior[static_cast<std::size_t>(Block::log_N)] = {-3.0, 2.0};
    cfg.keep_draws = true;
    const PosteriorSummary s = fit_mcmc(ModelVariant::make(Variant::stand_only_hab, d), d, x, cfg);
    for (const auto& ch : s.draws->chains) {
        EXPECT_GE(ch.minCoeff(), -3.0);
        EXPECT_LE(ch.maxCoeff(), 2.0);
    }
    ASSERT_FALSE(s.warnings.empty());
    bool prior_dominated = false;
    for (const auto& w : s.warnings) prior_dominated = prior_dominated || w.find("prior") != std::string::npos;
    EXPECT_TRUE(prior_dominated);
}

TEST(Inference, TwoParameterMomentsMatchQuadrature)
{
    // Species 0 is counted in a standardized cell (lambda = N) and an
    // opportunistic cell (lambda = N * E). The posterior over (log N, log E)
    // on a flat box is evaluated on a grid.
    const SurveyDesign d = single_cell_design();
    const CountTable x(d, {{0, 0, 6}, {0, 1, 3}});
    InferenceConfig cfg;
    cfg.n_chains = 4;
    cfg.n_warmup = 2000;
    cfg.n_samples = 20000;
    cfg.thin = 5;
    cfg.keep_draws = true;
    const Block blocks[] = {Block::log_N, Block::log_E1};
    for (Block b : blocks) cfg.prior[static_cast<std::size_t>(b)] = {-4.0, 4.0};
    const PosteriorSummary s = fit_mcmc(ModelVariant::make(Variant::opp_stand_hab, d), d, x, cfg);
    ASSERT_EQ(s.params.size(), 2u);

    const int n = 800;
    const double lo = -4.0, hi = 4.0, h = (hi - lo) / n;
    double z = 0, m1[2] = {0, 0}, m2[2] = {0, 0};
    for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b) {
            const double u = lo + (a + 0.5) * h, w = lo + (b + 0.5) * h;
            const double l0 = std::exp(u), l1 = std::exp(u + w);
            const double dens = std::exp(6.0 * u - l0 + 3.0 * (u + w) - l1);
            z += dens;
            m1[0] += dens * u;
            m1[1] += dens * w;
            m2[0] += dens * u * u;
            m2[1] += dens * w * w;
        }
    for (int k = 0; k < 2; ++k) {
        const double mean = m1[k] / z, sd = std::sqrt(m2[k] / z - mean * mean);
        const auto& ps = s.params[static_cast<std::size_t>(k)];
        const double mcse = ps.sd / std::sqrt(ps.ess);
        EXPECT_LT(std::abs(ps.mean - mean), 3.0 * mcse + 1e-3) << ps.name;
        EXPECT_NEAR(ps.sd, sd, 0.05 * sd) << ps.name;
    }
}

TEST(Inference, SummaryShapes)
{
    SimConfig sc;
    sc.n_species = 4;
    sc.n_sites = 5;
    sc.cells_std_per_site = 4;
    sc.cells_opp_per_site = 6;
    sc.seed = 9;
    const SimResult sim = simulate(sc);
    const auto v = ModelVariant::make(Variant::opp_stand_hab, sim.design);
    const PosteriorSummary s = fit_mcmc(v, sim.design, sim.counts, short_config());
    EXPECT_TRUE(s.sampled);
    EXPECT_EQ(s.n_chains, 2);
    EXPECT_EQ(s.n_retained_per_chain, 200);
    EXPECT_EQ(static_cast<int>(s.params.size()), s.n_free);
    EXPECT_EQ(s.relative_abundance.mean.rows(), 4);
    EXPECT_EQ(s.relative_abundance.mean.cols(), 5);
    for (int i = 0; i < 4; ++i) EXPECT_EQ(s.relative_abundance.median(i, 0), 1.0);
    for (const auto& p : s.params) {
        EXPECT_TRUE(std::isfinite(p.rhat)) << p.name;
        EXPECT_GT(p.ess, 0.0) << p.name;
        EXPECT_LE(p.q025, p.median);
        EXPECT_LE(p.median, p.q975);
    }
    EXPECT_DOUBLE_EQ(s.bic, compute_bic(v, sim.design, sim.counts, s.map));
    for (const auto& [name, rate] : s.acceptance) {
        EXPECT_GT(rate, 0.05) << name;
        EXPECT_LT(rate, 0.95) << name;
    }
}

TEST(Inference, SamplingNeedsTwoChains)
{
    const SurveyDesign d = single_cell_design();
    const CountTable x(d, {{0, 0, 2}});
    InferenceConfig cfg = short_config();
    cfg.n_chains = 1;
    EXPECT_THROW(fit_mcmc(ModelVariant::make(Variant::stand_only_hab, d), d, x, cfg), std::invalid_argument);
}

TEST(Inference, DiagnosticsOnKnownSeries)
{
    std::mt19937_64 rng(53);
    std::normal_distribution<double> z;
    std::vector<std::vector<double>> iid(4, std::vector<double>(2000));
    for (auto& c : iid)
        for (auto& v : c) v = z(rng);
    std::vector<std::span<const double>> spans(iid.begin(), iid.end());
    EXPECT_NEAR(split_rhat(spans), 1.0, 0.01);
    const double ess = effective_sample_size(spans);
    EXPECT_GT(ess, 6000.0);
    EXPECT_LE(ess, 8000.0 * 1.2);

    // AR(1) with phi = 0.9: ESS per draw is (1 - phi) / (1 + phi).
    std::vector<std::vector<double>> ar(4, std::vector<double>(20000));
    for (auto& c : ar) {
        double prev = 0.0;
        for (auto& v : c) v = prev = 0.9 * prev + z(rng);
    }
    std::vector<std::span<const double>> ar_spans(ar.begin(), ar.end());
    const double ratio = effective_sample_size(ar_spans) / 80000.0;
    EXPECT_NEAR(ratio, 0.1 / 1.9, 0.015);

    std::vector<std::vector<double>> shifted = iid;
    for (auto& v : shifted[0]) v += 3.0;
    std::vector<std::span<const double>> sh(shifted.begin(), shifted.end());
    EXPECT_GT(split_rhat(sh), 1.1);

    EXPECT_DOUBLE_EQ(quantile({1.0, 2.0, 3.0, 4.0}, 0.25), fixture::oracle_percentile({1.0, 2.0, 3.0, 4.0}, 0.25));
}
