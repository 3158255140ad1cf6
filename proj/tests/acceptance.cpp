// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

#include <chrono>
#include <cstdio>
#include <iostream>
#include <map>

#include "support.hpp"

using namespace relabund;
using fixture::DesignShape;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args)
{
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double median_of(std::vector<double> v) { return fixture::oracle_percentile(std::move(v), 0.5); }

// ---------------------------------------------------------------------------

Outcome gradient_check()
{
    std::mt19937_64 rng(1001);
    const Variant tags[] = {Variant::opp_stand_hab, Variant::stand_only_hab, Variant::opp_stand_no_hab, Variant::one_quadrat_hab};
    double worst = 0.0;
    int components = 0;
    for (int rep = 0; rep < 50; ++rep) {
        DesignShape s;
        s.species = fixture::uniform_int(rng, 1, 5);
        s.sites = fixture::uniform_int(rng, 1, 5);
        s.habitats = fixture::uniform_int(rng, 1, 5);
        s.std_per_site = fixture::uniform_int(rng, 1, 3);
        s.opp_per_site = fixture::uniform_int(rng, 1, 3);
        s.opp_only = s.species > 1 ? rep % 2 : 0;
        s.mixed_std = rep % 3 == 0;
        const SurveyDesign d = fixture::random_design(rng, s);
        const auto v = ModelVariant::make(tags[rep % 4], d);
        const TildeParams truth = fixture::random_tilde(rng, d);
        const CountTable x = fixture::poisson_counts(rng, d, [&](int i, int c) { return intensity(truth, v, d, i, c); });
        const PoissonModel m(v, d, x);
        const TildeParams at = fixture::random_tilde(rng, d);
        const Eigen::VectorXd g = m.gradient(at);
        const Eigen::VectorXd fd = fixture::finite_difference(
            [&](const Eigen::VectorXd& th) {
                TildeParams q = at;
                m.layout().unpack(th, q);
                return m.log_likelihood(q);
            },
            m.layout().pack(at), 1e-5);
        for (Eigen::Index k = 0; k < g.size(); ++k)
            worst = std::max(worst, std::abs(g(k) - fd(k)) / std::max({std::abs(g(k)), std::abs(fd(k)), 1.0}));
        components += static_cast<int>(g.size());
    }
    return {worst < 1e-6, fmt("max relative error %.2e over %d components", worst, components)};
}

Outcome reparam_check()
{
    std::mt19937_64 rng(1002);
    double worst = 0.0;
    int zero_mismatch = 0, n = 0;
    for (int rep = 0; rep < 100; ++rep) {
        DesignShape s;
        s.species = fixture::uniform_int(rng, 1, 5);
        s.sites = fixture::uniform_int(rng, 1, 5);
        s.habitats = fixture::uniform_int(rng, 1, 4);
        s.std_per_site = fixture::uniform_int(rng, 1, 3);
        s.opp_only = s.species > 1 ? rep % 2 : 0;
        s.mixed_std = rep % 4 == 0;
        const SurveyDesign d = fixture::random_design(rng, s);
        RawParams raw = fixture::random_raw(rng, d, fixture::uniform(rng, 0.2, 5.0));
        // Mixed standardized cells are only representable with a flat standardized preference.
        if (s.mixed_std) raw.q.col(0).setConstant(fixture::uniform(rng, 0.1, 1.0));
        const TildeParams t = to_tilde(raw, d);
        const auto v = ModelVariant::make(Variant::opp_stand_hab, d);
        for (int i = 0; i < d.n_species; ++i)
            for (int c = 0; c < d.n_cells(); ++c) {
                const double a = fixture::oracle_raw_intensity(raw, d, i, c), b = intensity(t, v, d, i, c);
                ++n;
                if (a == 0.0 || b == 0.0) {
                    zero_mismatch += (a != b);
                    continue;
                }
                worst = std::max(worst, fixture::relative_error(a, b));
            }
    }
    return {worst < 1e-12 && zero_mismatch == 0, fmt("max relative error %.2e over %d intensities", worst, n)};
}

Outcome reduction_check()
{
    std::mt19937_64 rng(1003);
    std::vector<SurveyDesign> fixtures;
    for (int rep = 0; rep < 30; ++rep) {
        DesignShape s;
        s.species = fixture::uniform_int(rng, 1, 6);
        s.sites = fixture::uniform_int(rng, 1, 6);
        s.habitats = fixture::uniform_int(rng, 1, 4);
        s.std_per_site = fixture::uniform_int(rng, 1, 4);
        s.opp_only = s.species > 1 ? rep % 2 : 0;
        s.mixed_std = rep % 3 == 0;
        fixtures.push_back(fixture::random_design(rng, s));
    }
    fixtures.push_back(simulate(SimConfig{}).design);
    int unequal = 0;
    for (const auto& d : fixtures) {
        TildeParams p = fixture::random_tilde(rng, d);
        p.log_S.setZero();
        p.log_q.setZero();
        const auto hab = ModelVariant::make(Variant::opp_stand_hab, d);
        const auto nohab = ModelVariant::make(Variant::opp_stand_no_hab, d);
        const CountTable x = fixture::poisson_counts(rng, d, [&](int i, int c) { return intensity(p, hab, d, i, c); });
        const double a = PoissonModel(hab, d, x).log_likelihood(p);
        const double b = PoissonModel(nohab, d, x).log_likelihood(p);
        if (!(a == b)) ++unequal;
    }
    return {unequal == 0, fmt("%d of %zu fixtures differ bitwise", unequal, fixtures.size())};
}

Outcome identifiability_check()
{
    std::mt19937_64 rng(1004);
    std::string detail;
    bool ok = true;

    DesignShape one;
    one.habitats = 1;
    one.sites = 6;
    const SurveyDesign a = fixture::random_design(rng, one);
    const IdentReport ra = check_identifiability(a);
    const int oa = fixture::gaussian_rank(fixture::oracle_ident_matrix(a));
    ok = ok && ra.rank == 6 && oa == 6 && ra.identifiable;
    detail += fmt("single habitat rank %d (oracle %d)", ra.rank, oa);

    DesignShape two;
    SurveyDesign b = fixture::random_design(rng, two);
    for (auto& c : b.cells)
        if (c.dataset == kStandardized) c.habitat_area = Eigen::Vector2d(0.5, 0.0);
    const IdentReport rb = check_identifiability(b);
    const int ob = fixture::gaussian_rank(fixture::oracle_ident_matrix(b));
    ok = ok && rb.rank == ob && rb.rank < rb.required && !rb.identifiable;
    detail += fmt("; unvisited habitat rank %d of %d (oracle %d)", rb.rank, rb.required, ob);

    const SurveyDesign c = simulate(SimConfig{}).design;
    const IdentReport rc = check_identifiability(c);
    const int oc = fixture::gaussian_rank(fixture::oracle_ident_matrix(c));
    ok = ok && rc.rank == 31 && oc == 31 && rc.identifiable;
    detail += fmt("; default simulation rank %d (oracle %d)", rc.rank, oc);
    return {ok, detail};
}

Outcome sampler_check()
{
    // One species, one standardized cell with unit effort and area, X = 5:
    // the posterior of u = log N is proportional to exp(5u - e^u) on the prior box.
    SurveyDesign d;
    d.n_species = 1;
    d.n_sites = 1;
    d.n_habitats = 1;
    d.site_habitat_area = Eigen::MatrixXd::Constant(1, 1, 1.0);
    d.monitored = {{true, true}};
    d.cells.push_back({0, kStandardized, 0, Eigen::VectorXd::Constant(1, 1.0), 1.0});
    d.cells.push_back({1, kOpportunistic, 0, Eigen::VectorXd::Constant(1, 1.0), std::nullopt});
    const CountTable x(d, {{0, 0, 5}});
    InferenceConfig cfg;
    cfg.n_chains = 2;
    cfg.n_warmup = 5000;
    cfg.n_samples = 50000;
    cfg.thin = 10;
    cfg.keep_draws = true;
    const PosteriorSummary s = fit_mcmc(ModelVariant::make(Variant::stand_only_hab, d), d, x, cfg);
    std::vector<double> draws;
    for (const auto& ch : s.draws->chains)
        for (Eigen::Index r = 0; r < ch.rows(); ++r) draws.push_back(ch(r, 0));
    std::sort(draws.begin(), draws.end());

    const auto [lo, hi] = cfg.bounds(Block::log_N);
    const int m = 400000;
    const double h = (hi - lo) / m;
    std::vector<double> cdf(m + 1, 0.0);
    auto dens = [](double u) { return std::exp(5.0 * u - std::exp(u)); };
    for (int k = 1; k <= m; ++k) cdf[k] = cdf[k - 1] + 0.5 * h * (dens(lo + (k - 1) * h) + dens(lo + k * h));
    for (auto& v : cdf) v /= cdf[m];
    auto exact = [&](double u) {
        const double pos = std::clamp((u - lo) / h, 0.0, static_cast<double>(m));
        const auto k = std::min(static_cast<int>(pos), m - 1);
        return cdf[k] + (pos - k) * (cdf[k + 1] - cdf[k]);
    };
    const double n = static_cast<double>(draws.size());
    double ks = 0.0;
    for (std::size_t k = 0; k < draws.size(); ++k) {
        const double f = exact(draws[k]);
        ks = std::max({ks, std::abs(f - k / n), std::abs(f - (k + 1) / n)});
    }
    return {ks < 0.02 && draws.size() == 10000, fmt("KS %.4f with %zu draws", ks, draws.size())};
}

Outcome recovery_check()
{
    const SimResult sim = simulate(SimConfig{});
    const auto& d = sim.design;
    const Eigen::MatrixXd truth = truth_relative_abundances(sim.truth, 0);
    const TildeParams true_tilde = to_tilde(sim.truth, d);
    std::map<Variant, double> med;
    double coverage = 0.0, s_err = 0.0, max_rhat = 0.0;
    for (Variant tag : {Variant::opp_stand_hab, Variant::stand_only_hab, Variant::opp_stand_no_hab}) {
        const auto t0 = Clock::now();
        const PosteriorSummary s = fit_mcmc(ModelVariant::make(tag, d), d, sim.counts, InferenceConfig{});
        med[tag] = relative_abundance_errors(s.relative_abundance.mean, truth, 0).median_abs;
        std::cout << fmt("  %s: median |rel diff| %.4f, max R-hat %.3f, %.0f s\n", std::string(to_string(tag)).c_str(),
                         med[tag], s.max_rhat, seconds_since(t0))
                  << std::flush;
        if (tag != Variant::opp_stand_hab) continue;
        max_rhat = s.max_rhat;
        int inside = 0, total = 0;
        for (int i = 0; i < d.n_species; ++i)
            for (int j = 1; j < d.n_sites; ++j) {
                ++total;
                inside += s.relative_abundance.lower(i, j) <= truth(i, j) && truth(i, j) <= s.relative_abundance.upper(i, j);
            }
        coverage = static_cast<double>(inside) / total;
        std::vector<double> errs;
        for (int i = 0; i < d.n_species; ++i) errs.push_back(std::abs(s.selection.mean(i, 1) - std::exp(true_tilde.log_S(i, 1))));
        s_err = median_of(errs);
    }
    const bool ordering = med[Variant::opp_stand_hab] < med[Variant::stand_only_hab] &&
                          med[Variant::opp_stand_hab] < med[Variant::opp_stand_no_hab];
    return {coverage >= 0.9 && ordering && s_err < 0.15,
            fmt("coverage %.3f; median |rel diff| hab %.4f, stand-only %.4f, no-hab %.4f; S2 median abs error %.4f; "
                "max R-hat %.3f",
                coverage, med[Variant::opp_stand_hab], med[Variant::stand_only_hab], med[Variant::opp_stand_no_hab], s_err,
                max_rhat)};
}

double map_bic(Variant tag, const SimResult& sim, const AlphaWeights& alpha = std::nullopt)
{
    const auto v = ModelVariant::make(tag, sim.design);
    const MapResult r = fit_map(v, sim.design, sim.counts, InferenceConfig{}, alpha);
    return compute_bic(v, sim.design, sim.counts, r.params, alpha);
}

Outcome bic_check()
{
    int negative = 0;
    std::vector<double> flat;
    for (int rep = 0; rep < 20; ++rep) {
        SimConfig cfg;
        cfg.seed = 2000 + static_cast<std::uint64_t>(rep);
        const SimResult sim = simulate(cfg);
        negative += map_bic(Variant::opp_stand_hab, sim) - map_bic(Variant::opp_stand_no_hab, sim) < 0.0;

        cfg.seed = 3000 + static_cast<std::uint64_t>(rep);
        cfg.uniform_selection = true;
        const SimResult uni = simulate(cfg);
        flat.push_back(map_bic(Variant::opp_stand_no_hab, uni) - map_bic(Variant::opp_stand_hab, uni));
    }
    const double med = median_of(flat);
    return {negative >= 18 && med <= 0.0,
            fmt("habitat data: hab preferred in %d/20; uniform selection: median dBIC(no-hab - hab) %.1f", negative, med)};
}

Outcome predictor_check()
{
    std::mt19937_64 rng(1008);
    int unequal = 0, compared = 0;
    for (int rep = 0; rep < 20; ++rep) {
        DesignShape s;
        s.species = fixture::uniform_int(rng, 1, 5);
        s.sites = rep % 2 == 0 ? 1 : fixture::uniform_int(rng, 2, 5);
        s.habitats = fixture::uniform_int(rng, 1, 4);
        s.std_per_site = fixture::uniform_int(rng, 1, 3);
        const SurveyDesign d = fixture::random_design(rng, s);
        HoldoutSurvey h;
        for (int j = 0; j < d.n_sites; ++j)
            for (int k = 0; k < 3; ++k) {
                HoldoutQuadrat q{static_cast<int>(h.quadrats.size()), j, {}};
                for (int n = 0; n < 4; ++n)
                    q.points.push_back({fixture::uniform_int(rng, 0, d.n_habitats - 1), fixture::uniform(rng, 0.1, 1.0),
                                        fixture::uniform(rng, 1.0, 4.0)});
                h.quadrats.push_back(std::move(q));
            }
        Eigen::MatrixXd n_hat(d.n_species, d.n_sites);
        for (Eigen::Index k = 0; k < n_hat.size(); ++k) n_hat.data()[k] = fixture::uniform(rng, 0.5, 50.0);
        const Eigen::MatrixXd s_hat = Eigen::MatrixXd::Constant(d.n_species, d.n_habitats, fixture::uniform(rng, 0.1, 2.0));
        const Eigen::MatrixXd a = predict_habitat(n_hat, s_hat, d, h);
        const Eigen::MatrixXd b = predict_no_habitat(n_hat, d, h);
        ++compared;
        unequal += !(a == b);
        if (d.n_sites == 1) {
            ++compared;
            unequal += !(predict_one_quadrat(n_hat.col(0), s_hat, d, h) == a);
        }
    }

    // Five species over six quadrats; r written out by hand from centred sums.
    Eigen::MatrixXd pred(5, 6), obs(5, 6);
    pred << 1, 2, 3, 4, 5, 6,      //
        2.5, 1, 4, 3, 6, 5,        //
        10, 8, 6, 4, 2, 1,         //
        0.3, 0.9, 0.1, 0.7, 0.5, 1.1, //
        3, 3, 4, 4, 5, 5;
    obs << 2, 1, 4, 3, 6, 5,       //
        0, 1, 0, 2, 3, 2,          //
        1, 2, 3, 5, 8, 13,         //
        5, 0, 7, 1, 2, 0,          //
        9, 7, 5, 3, 1, 0;
    double worst = 0.0;
    const PearsonReport rep = pearson_by_species(pred, obs, std::vector<bool>(5, true));
    for (int i = 0; i < 5; ++i) {
        long double mx = 0, my = 0;
        for (int q = 0; q < 6; ++q) {
            mx += pred(i, q);
            my += obs(i, q);
        }
        mx /= 6;
        my /= 6;
        long double sxy = 0, sxx = 0, syy = 0;
        for (int q = 0; q < 6; ++q) {
            sxy += (pred(i, q) - mx) * (obs(i, q) - my);
            sxx += (pred(i, q) - mx) * (pred(i, q) - mx);
            syy += (obs(i, q) - my) * (obs(i, q) - my);
        }
        const double r = static_cast<double>(sxy / std::sqrt(sxx * syy));
        worst = std::max(worst, std::abs(*rep.species[static_cast<std::size_t>(i)].r - r));
    }
    return {unequal == 0 && worst < 1e-12,
            fmt("%d of %d predictor reductions inexact; pearson max abs error %.1e", unequal, compared, worst)};
}

Outcome alpha_check()
{
    std::mt19937_64 rng(1009);
    bool first_is_one = true;
    for (int rep = 0; rep < 100; ++rep) {
        const int H = fixture::uniform_int(rng, 1, 5), K = fixture::uniform_int(rng, 1, 2);
        DistanceBinnedCounts b{Eigen::MatrixXd(H, K), Eigen::MatrixXd(H, K), std::nullopt};
        for (Eigen::Index k = 0; k < b.near.size(); ++k) {
            b.near.data()[k] = fixture::uniform_int(rng, 1, 200);
            b.total.data()[k] = b.near.data()[k] + fixture::uniform_int(rng, 0, 300);
        }
        const AlphaTable t = compute_alpha(b);
        first_is_one = first_is_one && (t.alpha.row(0).array() == 1.0).all();
    }

    double worst = 0.0;
    for (int rep = 0; rep < 50; ++rep) {
        DesignShape s;
        s.species = fixture::uniform_int(rng, 1, 5);
        s.sites = fixture::uniform_int(rng, 1, 4);
        s.habitats = fixture::uniform_int(rng, 1, 4);
        s.mixed_std = true;
        const SurveyDesign d = fixture::random_design(rng, s);
        const auto v = ModelVariant::make(Variant::opp_stand_hab, d);
        const TildeParams p = fixture::random_tilde(rng, d);
        Eigen::MatrixXd alpha(d.n_habitats, 2);
        for (Eigen::Index k = 0; k < alpha.size(); ++k) alpha.data()[k] = fixture::uniform(rng, 0.2, 3.0);
        alpha.row(0).setOnes();
        const TildeParams q = absorb_alpha(p, v, alpha);
        for (int i = 0; i < d.n_species; ++i)
            for (int c = 0; c < d.n_cells(); ++c) {
                const double a = intensity_with_alpha(p, v, d, alpha, i, c), b = intensity(q, v, d, i, c);
                if (a != 0.0 || b != 0.0) worst = std::max(worst, fixture::relative_error(a, b));
            }
    }

    // Counts drawn with habitat 1 detected 1.5 times as readily as habitat 0.
    const Eigen::MatrixXd true_alpha = (Eigen::MatrixXd(2, 2) << 1.0, 1.0, 1.5, 1.5).finished();
    int improved = 0;
    std::string errs;
    for (int rep = 0; rep < 10; ++rep) {
        SimConfig cfg;
        cfg.seed = 4000 + static_cast<std::uint64_t>(rep);
        cfg.alpha = true_alpha;
        const SimResult sim = simulate(cfg);
        const TildeParams truth = to_tilde(sim.truth, sim.design);
        const auto v = ModelVariant::make(Variant::opp_stand_hab, sim.design);
        auto s_error = [&](const AlphaWeights& alpha) {
            const MapResult r = fit_map(v, sim.design, sim.counts, InferenceConfig{}, alpha);
            std::vector<double> e;
            for (int i = 0; i < sim.design.n_species; ++i)
                e.push_back(std::abs(std::exp(r.params.log_S(i, 1)) - std::exp(truth.log_S(i, 1))));
            return median_of(e);
        };
        const double with = s_error(true_alpha), without = s_error(std::nullopt);
        improved += with < without;
        if (rep < 3) errs += fmt(" %.3f<%.3f", with, without);
    }
    return {first_is_one && worst < 1e-12 && improved == 10,
            fmt("alpha_0 == 1: %s; absorb max relative error %.1e; true alpha improved S2 error in %d/10 (e.g.%s)",
                first_is_one ? "yes" : "no", worst, improved, errs.c_str())};
}

// ---------------------------------------------------------------------------

std::map<std::string, std::string> snapshot(const fs::path& root)
{
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (!e.is_regular_file()) continue;
        std::string text = fixture::slurp(e.path());
        if (e.path().filename() == "manifest.json") {
            nlohmann::json j = nlohmann::json::parse(text);
            for (auto& [key, entry] : j.items()) entry.erase("wall_clock");
            text = j.dump();
        }
        files[fs::relative(e.path(), root).string()] = std::move(text);
    }
    return files;
}

Outcome determinism_check()
{
    const fs::path root = fixture::scratch_dir("acceptance-cli");
    const std::string r = root.string();
    const std::string sim = r + "/sim", fits = r + "/fits";
    fs::create_directories(fits);
    fixture::spit(root / "bins.csv", "# near_threshold_m=30\nhabitat_id,total_count,near_count\n0,75,50\n1,60,30\n");
    const std::vector<std::string> chain{"--chains", "2", "--warmup", "300", "--samples", "600", "--thin", "3"};
    auto cat = [](std::vector<std::string> a, const std::vector<std::string>& b) {
        a.insert(a.end(), b.begin(), b.end());
        return a;
    };
    const std::vector<std::pair<std::string, std::vector<std::string>>> commands{
        {"simulate", {"simulate", "--seed", "17", "--species", "6", "--sites", "6", "--std-cells", "5", "--opp-cells", "8",
                      "--holdout-quadrats", "2", "--out", sim}},
        {"check-ident", {"check-ident", "--design", sim + "/design.json", "--out", r + "/ident.json"}},
        {"alpha", {"alpha", "--bins", r + "/bins.csv", "--out", r + "/alpha.json"}},
        {"fit", cat({"fit", "--design", sim + "/design.json", "--counts", sim + "/counts.csv", "--out", fits + "/hab.json",
                     "--draws-out", fits + "/hab.draws.csv", "--threads", "2"},
                    chain)},
        {"fit (map only)", {"fit", "--variant", "opp-stand-no-hab", "--design", sim + "/design.json", "--counts",
                                   sim + "/counts.csv", "--out", fits + "/nohab.json", "--map-only"}},
        {"predict", {"predict", "--fit", fits + "/hab.json", "--design", sim + "/design.json", "--holdout",
                     sim + "/holdout.json", "--out", r + "/pred.csv", "--density-out", r + "/density.csv"}},
        {"validate", {"validate", "--fit", fits + "/hab.json", fits + "/nohab.json", "--design", sim + "/design.json",
                      "--holdout", sim + "/holdout.json", "--holdout-counts", sim + "/holdout_counts.csv", "--truth",
                      sim + "/truth.json", "--out", r + "/validate.json", "--table", r + "/validate.csv"}},
        {"compare", {"compare", "--fit", fits + "/hab.json", fits + "/nohab.json", "--out", r + "/compare.json"}},
    };
    std::vector<std::string> failed;
    for (const auto& [label, args] : commands) {
        const auto first = fixture::run_cli(args);
        const auto files = snapshot(root);
        const auto second = fixture::run_cli(args);
        if (first.code != 0 || second.code != 0 || first.out != second.out || first.err != second.err ||
            snapshot(root) != files) {
            failed.push_back(label + (first.code != 0 ? " (exit " + std::to_string(first.code) + ": " + first.err + ")" : ""));
        }
    }
    std::string detail = fmt("%zu subcommand runs repeated", commands.size());
    for (const auto& f : failed) detail += "; differs: " + f;
    return {failed.empty(), detail};
}

} // namespace

int main()
{
    struct Criterion {
        int id;
        const char* name;
        Outcome (*run)();
        double limit_s; // 0: none
    };
    const Criterion criteria[] = {
        {1, "gradient vs finite differences", gradient_check, 10.0},
        {2, "raw vs tilde intensity", reparam_check, 1.0},
        {3, "habitat model reduces to no-habitat model", reduction_check, 0.0},
        {4, "identifiability rank vs elimination oracle", identifiability_check, 0.0},
        {5, "sampler vs quadrature posterior", sampler_check, 30.0},
        {6, "simulation recovery", recovery_check, 1800.0},
        {7, "BIC signs", bic_check, 0.0},
        {8, "predictor algebra and pearson", predictor_check, 0.0},
        {9, "detectability weights", alpha_check, 0.0},
        {10, "CLI determinism", determinism_check, 0.0},
    };
    int failures = 0;
    for (const auto& c : criteria) {
        const auto t0 = Clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double took = seconds_since(t0);
        if (c.limit_s > 0.0 && took >= c.limit_s) {
            o.pass = false;
            o.detail += fmt("; over the %.0f s limit", c.limit_s);
        }
        failures += !o.pass;
        std::cout << "criterion " << c.id << ": " << (o.pass ? "PASS" : "FAIL") << " " << c.name << " (" << o.detail
                  << fmt(", %.2f s)", took) << std::endl;
    }
    std::cout << (failures == 0 ? "all criteria passed" : fmt("%d criteria failed", failures)) << std::endl;
    return failures == 0 ? 0 : 1;
}
