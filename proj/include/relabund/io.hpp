#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "relabund/errors.hpp"
#include "relabund/inference.hpp"
#include "relabund/model.hpp"
#include "relabund/reparam.hpp"
#include "relabund/simulator.hpp"
#include "relabund/survey.hpp"

namespace relabund {

inline nlohmann::json number_or_null(double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); }

inline double number_from(const nlohmann::json& j)
{
    return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

inline nlohmann::json tilde_to_json(const TildeParams& p)
{
    return {{"log_N", detail::from_matrix(p.log_N)},   {"log_P", detail::from_vector(p.log_P)},
            {"log_E1", detail::from_vector(p.log_E1)}, {"log_q", detail::from_vector(p.log_q)},
            {"log_S", detail::from_matrix(p.log_S)}};
}

inline TildeParams tilde_from_json(const nlohmann::json& j, const SurveyDesign& d, const std::string& where)
{
    if (!j.is_object()) throw DataError(where + " must be an object");
    auto field = [&](const char* key) -> const nlohmann::json& {
        if (!j.contains(key)) throw DataError(where + ": missing field '" + key + "'");
        return j.at(key);
    };
    TildeParams p{detail::to_matrix(field("log_N"), "log_N"), detail::to_vector(field("log_P"), "log_P"),
                  detail::to_vector(field("log_E1"), "log_E1"), detail::to_vector(field("log_q"), "log_q"),
                  detail::to_matrix(field("log_S"), "log_S")};
    try {
        check_dimensions(p, d);
    } catch (const DimensionError& e) {
        throw DataError(where + ": " + e.what());
    }
    return p;
}

inline nlohmann::json raw_to_json(const RawParams& r)
{
    return {{"N", detail::from_matrix(r.N)}, {"P", detail::from_matrix(r.P)}, {"E", detail::from_vector(r.E)},
            {"q", detail::from_matrix(r.q)}, {"S", detail::from_matrix(r.S)}};
}

inline RawParams raw_from_json(const nlohmann::json& j, const std::string& where)
{
    for (const char* key : {"N", "P", "E", "q", "S"})
        if (!j.contains(key)) throw DataError(where + ": missing field '" + key + "'");
    return RawParams{detail::to_matrix(j.at("N"), "N"), detail::to_matrix(j.at("P"), "P"), detail::to_vector(j.at("E"), "E"),
                     detail::to_matrix(j.at("q"), "q"), detail::to_matrix(j.at("S"), "S")};
}

inline nlohmann::json range_to_json(const Range& r) { return nlohmann::json::array({r.lo, r.hi}); }

inline nlohmann::json sim_config_to_json(const SimConfig& c)
{
    nlohmann::json j{{"n_species", c.n_species},
                     {"n_sites", c.n_sites},
                     {"n_habitats", c.n_habitats},
                     {"cells_std_per_site", c.cells_std_per_site},
                     {"cells_opp_per_site", c.cells_opp_per_site},
                     {"seed", c.seed},
                     {"abundance", range_to_json(c.abundance)},
                     {"reporting", range_to_json(c.reporting)},
                     {"opp_effort", range_to_json(c.opp_effort)},
                     {"preference", range_to_json(c.preference)},
                     {"selection", range_to_json(c.selection)},
                     {"std_effort", c.std_effort},
                     {"cell_area", c.cell_area},
                     {"max_remainder_share", c.max_remainder_share},
                     {"habitat_rule", std::string(to_string(c.habitat_rule))},
                     {"cluster_concentration", c.cluster_concentration},
                     {"uniform_selection", c.uniform_selection},
                     {"n_opp_only_species", c.n_opp_only_species},
                     {"max_redraws", c.max_redraws}};
    j["alpha"] = c.alpha ? detail::from_matrix(*c.alpha) : nlohmann::json(nullptr);
    return j;
}

inline nlohmann::json quantity_to_json(const QuantitySummary& q)
{
    return {{"mean", detail::from_matrix(q.mean)},
            {"median", detail::from_matrix(q.median)},
            {"lower", detail::from_matrix(q.lower)},
            {"upper", detail::from_matrix(q.upper)}};
}

inline QuantitySummary quantity_from_json(const nlohmann::json& j)
{
    return {detail::to_matrix(j.at("mean"), "mean"), detail::to_matrix(j.at("median"), "median"),
            detail::to_matrix(j.at("lower"), "lower"), detail::to_matrix(j.at("upper"), "upper")};
}

inline nlohmann::json summary_to_json(const PosteriorSummary& s)
{
    nlohmann::json j;
    j["variant"] = std::string(to_string(s.variant));
    j["sampled"] = s.sampled;
    j["n_chains"] = s.n_chains;
    j["n_retained_per_chain"] = s.n_retained_per_chain;
    j["map"] = tilde_to_json(s.map);
    j["map_log_lik"] = number_or_null(s.map_log_lik);
    j["map_converged"] = s.map_converged;
    j["map_iterations"] = s.map_iterations;
    j["bic"] = number_or_null(s.bic);
    j["n_free"] = s.n_free;
    j["n_obs"] = s.n_obs;
    j["posterior_mean"] = tilde_to_json(s.posterior_mean);
    j["posterior_median"] = tilde_to_json(s.posterior_median);
    auto params = nlohmann::json::array();
    for (const auto& p : s.params)
        params.push_back({{"name", p.name},
                          {"mean", number_or_null(p.mean)},
                          {"median", number_or_null(p.median)},
                          {"sd", number_or_null(p.sd)},
                          {"q025", number_or_null(p.q025)},
                          {"q975", number_or_null(p.q975)},
                          {"rhat", number_or_null(p.rhat)},
                          {"ess", number_or_null(p.ess)}});
    j["params"] = std::move(params);
    j["reference_site"] = s.reference_site;
    j["relative_abundance"] = quantity_to_json(s.relative_abundance);
    j["selection"] = quantity_to_json(s.selection);
    j["acceptance"] = s.acceptance;
    j["max_rhat"] = number_or_null(s.max_rhat);
    j["warnings"] = s.warnings;
    return j;
}

/// Reads back the parts of a summary that downstream commands use.
inline PosteriorSummary summary_from_json(const nlohmann::json& j, const SurveyDesign& d, const std::string& where)
{
    PosteriorSummary s;
    try {
        const auto v = parse_variant(j.at("variant").get<std::string>());
        if (!v) throw DataError(where + ": unknown variant");
        s.variant = *v;
        s.sampled = j.at("sampled").get<bool>();
        s.n_chains = j.at("n_chains").get<int>();
        s.n_retained_per_chain = j.at("n_retained_per_chain").get<int>();
        s.map = tilde_from_json(j.at("map"), d, where + ": map");
        s.map_log_lik = number_from(j.at("map_log_lik"));
        s.map_converged = j.at("map_converged").get<bool>();
        s.map_iterations = j.at("map_iterations").get<int>();
        s.bic = number_from(j.at("bic"));
        s.n_free = j.at("n_free").get<int>();
        s.n_obs = j.at("n_obs").get<int>();
        s.posterior_mean = tilde_from_json(j.at("posterior_mean"), d, where + ": posterior_mean");
        s.posterior_median = tilde_from_json(j.at("posterior_median"), d, where + ": posterior_median");
        for (const auto& p : j.at("params"))
            s.params.push_back({p.at("name").get<std::string>(), number_from(p.at("mean")), number_from(p.at("median")),
                                number_from(p.at("sd")), number_from(p.at("q025")), number_from(p.at("q975")),
                                number_from(p.at("rhat")), number_from(p.at("ess"))});
        s.reference_site = j.at("reference_site").get<int>();
        s.relative_abundance = quantity_from_json(j.at("relative_abundance"));
        s.selection = quantity_from_json(j.at("selection"));
        s.acceptance = j.at("acceptance").get<std::map<std::string, double>>();
        s.max_rhat = number_from(j.at("max_rhat"));
        s.warnings = j.at("warnings").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(where + ": " + e.what());
    }
    return s;
}

} // namespace relabund
