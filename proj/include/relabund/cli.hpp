#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include "relabund/detectability.hpp"
#include "relabund/errors.hpp"
#include "relabund/inference.hpp"
#include "relabund/io.hpp"
#include "relabund/model.hpp"
#include "relabund/reparam.hpp"
#include "relabund/simulator.hpp"
#include "relabund/survey.hpp"
#include "relabund/validation.hpp"
#include "relabund/version.hpp"

namespace relabund::cli {

namespace fs = std::filesystem;

/// Bad flag combinations discovered after parsing; exit code 2.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::string sha256_hex(std::string_view bytes)
{
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("SHA-256 failed");
    std::ostringstream out;
    for (unsigned int k = 0; k < len; ++k) out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[k]);
    return out.str();
}

inline std::string format_double(double x)
{
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, res.ptr);
}

/// Writes through a sibling temporary file and renames it into place.
inline void write_atomic(const fs::path& path, const std::string& content)
{
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write " + tmp.string());
        out << content;
        out.flush();
        if (!out) throw DataError("failed writing " + tmp.string());
    }
    fs::rename(tmp, path);
}

inline std::string json_text(const nlohmann::json& j) { return j.dump(1) + "\n"; }

// ---------------------------------------------------------------------------
// Run manifests

/// Inputs are hashed from the exact bytes each command reads.
class InputLog {
public:
    std::string read(const fs::path& path)
    {
        std::string bytes = detail::read_file(path);
        digests_[path.string()] = sha256_hex(bytes);
        return bytes;
    }

    const std::map<std::string, std::string>& digests() const { return digests_; }

    /// One digest over every input, in path order.
    std::string combined() const
    {
        std::string all;
        for (const auto& [path, d] : digests_) all += d;
        return sha256_hex(all);
    }

private:
    std::map<std::string, std::string> digests_;
};

struct RunContext {
    std::string command;
    std::vector<std::string> argv;
    nlohmann::json config;
    nlohmann::json seeds = nlohmann::json::object();
    InputLog inputs;
    std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();
    std::time_t started_wall = std::time(nullptr);
};

/// Merges this run's entry into `<dir>/manifest.json`, keyed by the primary output file.
inline void write_manifest(const RunContext& ctx, const fs::path& dir, const std::string& primary,
                           const std::vector<std::string>& outputs)
{
    const fs::path path = dir / "manifest.json";
    nlohmann::json manifest = nlohmann::json::object();
    if (fs::exists(path)) {
        try {
            manifest = nlohmann::json::parse(detail::read_file(path));
        } catch (const nlohmann::json::exception&) {
            manifest = nlohmann::json::object();
        }
        if (!manifest.is_object()) manifest = nlohmann::json::object();
    }
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&ctx.started_wall));
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - ctx.started).count();
    manifest[primary] = {{"command", ctx.command},
                         {"argv", ctx.argv},
                         {"config", ctx.config},
                         {"seeds", ctx.seeds},
                         {"inputs", ctx.inputs.digests()},
                         {"outputs", outputs},
                         {"version", kVersion},
                         {"wall_clock", {{"started_utc", stamp}, {"elapsed_s", elapsed}}}};
    write_atomic(path, json_text(manifest));
}

inline fs::path output_dir(const fs::path& file) { return file.has_parent_path() ? file.parent_path() : fs::path("."); }

// ---------------------------------------------------------------------------
// JSON config files: a flat object of flag names (without dashes) to values.

class JsonConfig : public CLI::Config {
public:
    std::string section; // subcommand the keys belong to

    std::string to_config(const CLI::App*, bool, bool, std::string) const override { return "{}\n"; }

    std::vector<CLI::ConfigItem> from_config(std::istream& in) const override
    {
        std::stringstream ss;
        ss << in.rdbuf();
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(ss.str());
        } catch (const nlohmann::json::parse_error& e) {
            throw CLI::ConversionError(std::string("config file is not valid JSON: ") + e.what());
        }
        if (!j.is_object()) throw CLI::ConversionError("config file must hold a JSON object");
        std::vector<CLI::ConfigItem> items;
        for (const auto& [key, value] : j.items()) {
            if (value.is_null()) continue;
            CLI::ConfigItem item;
            if (!section.empty()) item.parents = {section};
            item.name = key;
            if (value.is_object()) throw CLI::ConversionError("config key '" + key + "' must not be an object");
            auto scalar = [](const nlohmann::json& v) {
                if (v.is_string()) return v.get<std::string>();
                if (v.is_boolean()) return std::string(v.get<bool>() ? "true" : "false");
                return v.dump();
            };
            if (value.is_array()) {
                for (const auto& v : value) item.inputs.push_back(scalar(v));
            } else {
                item.inputs.push_back(scalar(value));
            }
            items.push_back(std::move(item));
        }
        return items;
    }
};

// ---------------------------------------------------------------------------
// Model comparison

struct FitRecord {
    std::string label;
    Variant variant;
    double bic;
    std::string data_digest;
};

struct BicDelta {
    std::string a, b;
    double delta; // BIC(a) - BIC(b)
};

inline std::vector<BicDelta> compare_models(const std::vector<FitRecord>& fits)
{
    if (fits.size() < 2) throw UsageError("compare needs at least two fits");
    for (const auto& f : fits)
        if (f.data_digest != fits.front().data_digest)
            throw DataError("fits '" + fits.front().label + "' and '" + f.label + "' were made on different data");
    std::vector<BicDelta> out;
    for (std::size_t x = 0; x < fits.size(); ++x)
        for (std::size_t y = x + 1; y < fits.size(); ++y)
            out.push_back({fits[x].label, fits[y].label, fits[x].bic - fits[y].bic});
    return out;
}

// ---------------------------------------------------------------------------
// Subcommands

struct SimulateOpts {
    std::uint64_t seed = 1;
    std::string out;
    int species = 20, sites = 30, habitats = 2, std_cells = 10, opp_cells = 30;
    std::vector<double> abundance{20.0, 200.0}, reporting{0.1, 1.0}, effort{0.5, 5.0}, preference{0.1, 1.0},
        selection{0.1, 1.0};
    double cell_area = 1.0, remainder = 0.5, concentration = 10.0;
    std::string habitat_rule = "dirichlet";
    bool uniform_selection = false;
    int opp_only = 0;
    std::string alpha;
    int holdout_quadrats = 0, holdout_points = 5;

    nlohmann::json to_json() const
    {
        return {{"seed", seed},
                {"holdout-quadrats", holdout_quadrats},
                {"holdout-points", holdout_points},
                {"out", out},
                {"species", species},
                {"sites", sites},
                {"habitats", habitats},
                {"std-cells", std_cells},
                {"opp-cells", opp_cells},
                {"abundance-range", abundance},
                {"reporting-range", reporting},
                {"effort-range", effort},
                {"preference-range", preference},
                {"selection-range", selection},
                {"cell-area", cell_area},
                {"remainder-share", remainder},
                {"habitat-rule", habitat_rule},
                {"cluster-concentration", concentration},
                {"uniform-selection", uniform_selection},
                {"opp-only-species", opp_only},
                {"alpha", alpha.empty() ? nlohmann::json(nullptr) : nlohmann::json(alpha)}};
    }
};

struct FitOpts {
    std::string variant = "opp-stand-hab", design, counts, out, draws_out, alpha;
    int chains = 4, warmup = 5000, samples = 10000, thin = 5, threads = 0, reference_site = 0;
    std::uint64_t seed = 1;
    double prior_lo = -20.0, prior_hi = 20.0;
    int map_max_iter = 2000;
    double map_tol = 1e-8;
    bool force = false, map_only = false;

    nlohmann::json to_json() const
    {
        auto opt = [](const std::string& s) { return s.empty() ? nlohmann::json(nullptr) : nlohmann::json(s); };
        return {{"variant", variant},     {"design", design},
                {"counts", counts},       {"out", out},
                {"draws-out", opt(draws_out)}, {"alpha", opt(alpha)},
                {"chains", chains},       {"warmup", warmup},
                {"samples", samples},     {"thin", thin},
                {"threads", threads},     {"reference-site", reference_site},
                {"seed", seed},           {"prior-lo", prior_lo},
                {"prior-hi", prior_hi},   {"map-max-iter", map_max_iter},
                {"map-tol", map_tol},     {"force", force},
                {"map-only", map_only}};
    }
};

inline AlphaWeights load_alpha_weights(InputLog& log, const std::string& path, const SurveyDesign& d)
{
    if (path.empty()) return std::nullopt;
    const std::string text = log.read(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(path, detail::line_of_offset(text, e.byte), e.what());
    }
    const AlphaTable t = alpha_from_json(j, path);
    if (t.alpha.rows() != d.n_habitats)
        throw DataError(path + ": alpha has " + std::to_string(t.alpha.rows()) + " habitats, design has " +
                        std::to_string(d.n_habitats));
    return t.weights();
}

inline std::pair<SurveyDesign, CountTable> load_data(InputLog& log, const std::string& design_path,
                                                     const std::string& counts_path)
{
    SurveyDesign d = parse_design(log.read(design_path), design_path);
    require_valid(d);
    std::istringstream in(log.read(counts_path));
    CountTable x(d, parse_counts(in, counts_path));
    return {std::move(d), std::move(x)};
}

inline SurveyDesign load_design_only(InputLog& log, const std::string& design_path)
{
    SurveyDesign d = parse_design(log.read(design_path), design_path);
    require_valid(d);
    return d;
}

inline Range to_range(const std::vector<double>& v) { return {v.at(0), v.at(1)}; }

inline int cmd_simulate(const SimulateOpts& o, RunContext& ctx, std::ostream& out)
{
    SimConfig cfg;
    cfg.seed = o.seed;
    cfg.n_species = o.species;
    cfg.n_sites = o.sites;
    cfg.n_habitats = o.habitats;
    cfg.cells_std_per_site = o.std_cells;
    cfg.cells_opp_per_site = o.opp_cells;
    cfg.abundance = to_range(o.abundance);
    cfg.reporting = to_range(o.reporting);
    cfg.opp_effort = to_range(o.effort);
    cfg.preference = to_range(o.preference);
    cfg.selection = to_range(o.selection);
    cfg.cell_area = o.cell_area;
    cfg.max_remainder_share = o.remainder;
    cfg.cluster_concentration = o.concentration;
    const auto rule = parse_habitat_rule(o.habitat_rule);
    if (!rule) throw UsageError("unknown habitat rule '" + o.habitat_rule + "'");
    cfg.habitat_rule = *rule;
    cfg.uniform_selection = o.uniform_selection;
    cfg.n_opp_only_species = o.opp_only;
    if (!o.alpha.empty()) {
        const std::string text = ctx.inputs.read(o.alpha);
        const AlphaTable t = alpha_from_json(nlohmann::json::parse(text, nullptr, false), o.alpha);
        if (t.alpha.rows() != o.habitats) throw DataError(o.alpha + ": alpha does not match --habitats");
        cfg.alpha = t.weights();
    }
    try {
        cfg.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    ctx.seeds["seed"] = o.seed;

    const SimResult sim = simulate(cfg);
    const fs::path dir(o.out);
    nlohmann::json truth;
    truth["config"] = sim_config_to_json(cfg);
    truth["redraws"] = sim.redraws;
    truth["raw"] = raw_to_json(sim.truth);
    truth["tilde"] = tilde_to_json(to_tilde(sim.truth, sim.design));
    truth["reference_site"] = 0;
    truth["relative_abundance"] = detail::from_matrix(truth_relative_abundances(sim.truth, 0));
    write_atomic(dir / "design.json", design_to_string(sim.design));
    write_atomic(dir / "counts.csv", counts_to_string(sim.counts));
    write_atomic(dir / "truth.json", json_text(truth));
    std::vector<std::string> outputs{"design.json", "counts.csv", "truth.json"};
    if (o.holdout_quadrats > 0) {
        HoldoutConfig hc;
        hc.quadrats_per_site = o.holdout_quadrats;
        hc.points_per_quadrat = o.holdout_points;
        hc.seed = o.seed;
        try {
            hc.validate();
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }
        const HoldoutSurvey h = simulate_holdout(sim.design, sim.truth, hc);
        write_atomic(dir / "holdout.json", json_text(holdout_to_json(h)));
        write_atomic(dir / "holdout_counts.csv", holdout_counts_to_string(h.counts));
        outputs.push_back("holdout.json");
        outputs.push_back("holdout_counts.csv");
    }
    write_manifest(ctx, dir, "design.json", outputs);
    out << "wrote";
    for (const auto& f : outputs) out << ' ' << (dir / f).string();
    out << " (" << sim.design.n_cells() << " cells, " << sim.counts.entries().size() << " counts)\n";
    return 0;
}

inline int cmd_check_ident(const std::string& design_path, const std::string& out_path, RunContext& ctx, std::ostream& out)
{
    const SurveyDesign d = load_design_only(ctx.inputs, design_path);
    const IdentReport rep = check_identifiability(d);
    const nlohmann::json j{{"rank", rep.rank},
                           {"required", rep.required},
                           {"identifiable", rep.identifiable},
                           {"deficient_columns", rep.deficient_columns},
                           {"warnings", rep.warnings}};
    out << json_text(j);
    if (!out_path.empty()) {
        write_atomic(out_path, json_text(j));
        write_manifest(ctx, output_dir(out_path), fs::path(out_path).filename().string(),
                       {fs::path(out_path).filename().string()});
    }
    return 0;
}

inline std::string draws_csv(const PosteriorSummary& s)
{
    std::ostringstream out;
    out << "chain,iter,param_name,value\n";
    const auto& ds = *s.draws;
    for (std::size_t c = 0; c < ds.chains.size(); ++c)
        for (Eigen::Index r = 0; r < ds.chains[c].rows(); ++r)
            for (Eigen::Index k = 0; k < ds.chains[c].cols(); ++k)
                out << c << ',' << ds.warmup + (r + 1) * ds.thin << ',' << ds.names[static_cast<std::size_t>(k)] << ','
                    << format_double(ds.chains[c](r, k)) << '\n';
    return out.str();
}

inline int cmd_fit(const FitOpts& o, RunContext& ctx, std::ostream& out, std::ostream& err)
{
    const auto tag = parse_variant(o.variant);
    if (!tag) throw UsageError("unknown variant '" + o.variant + "'");
    auto [d, x] = load_data(ctx.inputs, o.design, o.counts);
    const AlphaWeights alpha = load_alpha_weights(ctx.inputs, o.alpha, d);

    InferenceConfig cfg;
    cfg.n_chains = o.chains;
    cfg.n_warmup = o.warmup;
    cfg.n_samples = o.map_only ? 0 : o.samples;
    cfg.thin = o.thin;
    cfg.rng_seed = o.seed;
    for (auto& b : cfg.prior) b = {o.prior_lo, o.prior_hi};
    cfg.map_max_iter = o.map_max_iter;
    cfg.map_tol = o.map_tol;
    cfg.force = o.force;
    cfg.threads = o.threads > 0 ? o.threads : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    cfg.keep_draws = !o.draws_out.empty();
    cfg.reference_site = o.reference_site;
    try {
        cfg.validate();
        if (!o.map_only && o.chains < 2) throw std::invalid_argument("sampling needs --chains >= 2");
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    if (o.reference_site < 0 || o.reference_site >= d.n_sites) throw UsageError("--reference-site out of range");
    if (o.map_only && !o.draws_out.empty()) throw UsageError("--draws-out needs sampling; drop --map-only");
    ctx.seeds["seed"] = o.seed;

    require_identifiable(d, cfg);
    const PoissonModel model(ModelVariant::make(*tag, d), d, x, alpha);
    const PosteriorSummary s = o.map_only ? summarize_map(model, fit_map(model, cfg), cfg) : fit_mcmc(model, cfg);

    nlohmann::json j = summary_to_json(s);
    j["data_digest"] = ctx.inputs.combined();
    j["alpha"] = alpha ? detail::from_matrix(*alpha) : nlohmann::json(nullptr);
    j["config"] = ctx.config;
    std::vector<std::string> outputs{fs::path(o.out).filename().string()};
    write_atomic(o.out, json_text(j));
    if (!o.draws_out.empty()) {
        write_atomic(o.draws_out, draws_csv(s));
        outputs.push_back(fs::path(o.draws_out).filename().string());
    }
    write_manifest(ctx, output_dir(o.out), outputs.front(), outputs);
    for (const auto& w : s.warnings) err << "warning: " << w << '\n';
    out << o.variant << ": logL(MAP) " << format_double(s.map_log_lik) << ", BIC " << format_double(s.bic);
    if (s.sampled) out << ", max R-hat " << format_double(s.max_rhat);
    out << '\n';
    return 0;
}

struct LoadedFit {
    std::string path;
    PosteriorSummary summary;
    std::string data_digest;
};

inline LoadedFit load_fit(InputLog& log, const std::string& path, const SurveyDesign& d)
{
    const std::string text = log.read(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(path, detail::line_of_offset(text, e.byte), e.what());
    }
    LoadedFit f{path, summary_from_json(j, d, path), j.value("data_digest", std::string())};
    return f;
}

inline const TildeParams& pick_estimate(const PosteriorSummary& s, const std::string& estimate)
{
    if (estimate == "mean") return s.posterior_mean;
    if (estimate == "median") return s.posterior_median;
    if (estimate == "map") return s.map;
    throw UsageError("--estimate must be mean, median or map");
}

inline Eigen::MatrixXd pick_relative(const PosteriorSummary& s, const SurveyDesign& d, const std::string& estimate,
                                     int reference_site)
{
    if (reference_site == s.reference_site) {
        if (estimate == "mean") return s.relative_abundance.mean;
        if (estimate == "median") return s.relative_abundance.median;
    }
    return relative_abundances(pick_estimate(s, estimate), d, reference_site);
}

inline HoldoutSurvey load_holdout_logged(InputLog& log, const std::string& json_path, const std::string& counts_path,
                                         const SurveyDesign& d)
{
    const std::string text = log.read(json_path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(json_path, detail::line_of_offset(text, e.byte), e.what());
    }
    HoldoutSurvey h = holdout_from_json(j, json_path);
    if (!counts_path.empty()) {
        std::istringstream in(log.read(counts_path));
        h.counts = parse_holdout_counts(in, counts_path, d.n_species, static_cast<int>(h.quadrats.size()));
    }
    check_holdout(h, d);
    return h;
}

inline int cmd_predict(const std::string& fit_path, const std::string& design_path, const std::string& holdout_path,
                       const std::string& out_path, const std::string& estimate, const std::string& density_out,
                       const std::vector<int>& species, RunContext& ctx, std::ostream& out)
{
    if (out_path.empty() && density_out.empty()) throw UsageError("predict needs --out and/or --density-out");
    if (!out_path.empty() && holdout_path.empty()) throw UsageError("--out needs --holdout");
    const SurveyDesign d = load_design_only(ctx.inputs, design_path);
    for (int i : species)
        if (i < 0 || i >= d.n_species) throw UsageError("--species " + std::to_string(i) + " is not in the design");
    auto wanted = [&](Eigen::Index i) {
        return species.empty() || std::find(species.begin(), species.end(), static_cast<int>(i)) != species.end();
    };
    const LoadedFit fit = load_fit(ctx.inputs, fit_path, d);
    const TildeParams& p = pick_estimate(fit.summary, estimate);
    const ModelVariant v = ModelVariant::make(fit.summary.variant, d);
    std::vector<std::string> outputs;
    std::string primary = out_path.empty() ? density_out : out_path;
    if (!out_path.empty()) {
        const HoldoutSurvey h = load_holdout_logged(ctx.inputs, holdout_path, "", d);
        const Eigen::MatrixXd xhat = predict_holdout(p, v, d, h);
        std::ostringstream csv;
        csv << "species_id,quadrat_id,predicted\n";
        for (Eigen::Index i = 0; i < xhat.rows(); ++i)
            if (wanted(i))
                for (Eigen::Index q = 0; q < xhat.cols(); ++q) csv << i << ',' << q << ',' << format_double(xhat(i, q)) << '\n';
        write_atomic(out_path, csv.str());
        outputs.push_back(fs::path(out_path).filename().string());
    }
    if (!density_out.empty()) {
        const Eigen::MatrixXd dens = relative_density_map(p, d, fit.summary.reference_site);
        std::ostringstream csv;
        csv << "species_id,site_id,relative_density\n";
        for (Eigen::Index i = 0; i < dens.rows(); ++i)
            if (wanted(i))
                for (Eigen::Index j = 0; j < dens.cols(); ++j) csv << i << ',' << j << ',' << format_double(dens(i, j)) << '\n';
        write_atomic(density_out, csv.str());
        if (output_dir(density_out) != output_dir(primary))
            write_manifest(ctx, output_dir(density_out), fs::path(density_out).filename().string(),
                           {fs::path(density_out).filename().string()});
        else
            outputs.push_back(fs::path(density_out).filename().string());
    }
    write_manifest(ctx, output_dir(primary), fs::path(primary).filename().string(), outputs);
    out << "wrote " << primary << '\n';
    return 0;
}

inline nlohmann::json correlation_json(const CorrelationSummary& c)
{
    return {{"median", number_or_null(c.median)},
            {"q1", number_or_null(c.q1)},
            {"q3", number_or_null(c.q3)},
            {"n_used", c.n_used},
            {"n_excluded", c.n_excluded}};
}

struct ValidateOpts {
    std::vector<std::string> fits;
    std::string design, holdout, holdout_counts, truth, out, table, estimate = "mean";
    int reference_site = -1;
};

inline int cmd_validate(const ValidateOpts& o, RunContext& ctx, std::ostream& out)
{
    if (o.holdout.empty() && o.truth.empty()) throw UsageError("validate needs --holdout or --truth");
    if (!o.holdout.empty() && o.holdout_counts.empty()) throw UsageError("--holdout needs --holdout-counts");
    if (!o.table.empty() && o.truth.empty()) throw UsageError("--table needs --truth");
    const SurveyDesign d = load_design_only(ctx.inputs, o.design);
    std::optional<HoldoutSurvey> holdout;
    if (!o.holdout.empty()) holdout = load_holdout_logged(ctx.inputs, o.holdout, o.holdout_counts, d);
    std::optional<Eigen::MatrixXd> truth_n;
    int truth_ref = 0;
    if (!o.truth.empty()) {
        const std::string text = ctx.inputs.read(o.truth);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(text);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError(o.truth, detail::line_of_offset(text, e.byte), e.what());
        }
        if (!j.contains("raw")) throw DataError(o.truth + ": missing field 'raw'");
        const RawParams raw = raw_from_json(j.at("raw"), o.truth);
        if (raw.N.rows() != d.n_species || raw.N.cols() != d.n_sites) throw DataError(o.truth + ": truth does not match design");
        truth_n = raw.N;
        truth_ref = j.value("reference_site", 0);
    }
    const int ref = o.reference_site >= 0 ? o.reference_site : truth_ref;
    if (ref >= d.n_sites) throw UsageError("--reference-site out of range");

    nlohmann::json report;
    report["estimate"] = o.estimate;
    report["reference_site"] = ref;
    report["fits"] = nlohmann::json::array();
    std::ostringstream table;
    table << "variant,species_id,site_id,truth,estimate,rel_diff\n";
    out << std::left << std::setw(20) << "variant";
    if (truth_n) out << std::setw(22) << "median |rel diff|";
    if (holdout) out << "median r (q1, q3)";
    out << '\n';
    for (const auto& path : o.fits) {
        const LoadedFit fit = load_fit(ctx.inputs, path, d);
        const std::string name(to_string(fit.summary.variant));
        nlohmann::json fj{{"file", path}, {"variant", name}};
        out << std::setw(20) << name;
        if (truth_n) {
            RawParams raw;
            raw.N = *truth_n;
            const Eigen::MatrixXd truth_rel = truth_relative_abundances(raw, ref);
            const Eigen::MatrixXd est = pick_relative(fit.summary, d, o.estimate, ref);
            const RelativeErrors e = relative_abundance_errors(est, truth_rel, ref);
            fj["relative_errors"] = {{"median_abs", e.median_abs}};
            for (Eigen::Index i = 0; i < e.diff.rows(); ++i)
                for (Eigen::Index j = 0; j < e.diff.cols(); ++j)
                    if (j != ref)
                        table << name << ',' << i << ',' << j << ',' << format_double(truth_rel(i, j)) << ','
                              << format_double(est(i, j)) << ',' << format_double(e.diff(i, j)) << '\n';
            out << std::setw(22) << format_double(e.median_abs);
        }
        if (holdout) {
            const Eigen::MatrixXd xhat =
                predict_holdout(pick_estimate(fit.summary, o.estimate), ModelVariant::make(fit.summary.variant, d), d, *holdout);
            const PearsonReport pr = pearson_by_species(xhat, holdout->counts, standardized_flags(d));
            auto per = nlohmann::json::array();
            for (const auto& r : pr.species)
                per.push_back({{"species", r.species},
                               {"r", r.r ? nlohmann::json(*r.r) : nlohmann::json(nullptr)},
                               {"monitored_standardized", r.monitored_standardized}});
            fj["pearson"] = {{"species", per},
                             {"all", correlation_json(pr.all)},
                             {"monitored_standardized", correlation_json(pr.monitored)},
                             {"not_monitored_standardized", correlation_json(pr.not_monitored)}};
            out << format_double(pr.all.median) << " (" << format_double(pr.all.q1) << ", " << format_double(pr.all.q3)
                << ")";
        }
        out << '\n';
        report["fits"].push_back(std::move(fj));
    }
    std::vector<std::string> outputs;
    std::string primary;
    if (!o.out.empty()) {
        write_atomic(o.out, json_text(report));
        primary = o.out;
        outputs.push_back(fs::path(o.out).filename().string());
    }
    if (!o.table.empty()) {
        write_atomic(o.table, table.str());
        if (primary.empty()) primary = o.table;
        if (output_dir(o.table) == output_dir(primary)) outputs.push_back(fs::path(o.table).filename().string());
        else write_manifest(ctx, output_dir(o.table), fs::path(o.table).filename().string(), {fs::path(o.table).filename().string()});
    }
    if (!primary.empty()) write_manifest(ctx, output_dir(primary), fs::path(primary).filename().string(), outputs);
    return 0;
}

inline int cmd_alpha(const std::string& bins_path, const std::string& out_path, RunContext& ctx, std::ostream& out)
{
    std::istringstream in(ctx.inputs.read(bins_path));
    const AlphaTable t = compute_alpha(parse_distance_bins(in, bins_path));
    const nlohmann::json j = alpha_to_json(t);
    out << json_text(j);
    if (!out_path.empty()) {
        write_atomic(out_path, json_text(j));
        write_manifest(ctx, output_dir(out_path), fs::path(out_path).filename().string(),
                       {fs::path(out_path).filename().string()});
    }
    return 0;
}

inline int cmd_compare(const std::vector<std::string>& paths, const std::string& out_path, RunContext& ctx,
                       std::ostream& out)
{
    std::vector<FitRecord> fits;
    for (const auto& path : paths) {
        const std::string text = ctx.inputs.read(path);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(text);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError(path, detail::line_of_offset(text, e.byte), e.what());
        }
        const auto v = parse_variant(j.value("variant", std::string()));
        if (!v || !j.contains("bic") || !j.at("bic").is_number()) throw DataError(path + ": not a fit summary");
        fits.push_back({std::string(to_string(*v)), *v, j.at("bic").get<double>(), j.value("data_digest", std::string())});
    }
    const auto deltas = compare_models(fits);
    nlohmann::json j;
    j["fits"] = nlohmann::json::array();
    for (std::size_t k = 0; k < fits.size(); ++k) j["fits"].push_back({{"file", paths[k]}, {"variant", fits[k].label}, {"bic", fits[k].bic}});
    j["delta_bic"] = nlohmann::json::array();
    for (const auto& dlt : deltas) {
        j["delta_bic"].push_back({{"a", dlt.a}, {"b", dlt.b}, {"delta", dlt.delta}});
        out << "BIC(" << dlt.a << ") - BIC(" << dlt.b << ") = " << format_double(dlt.delta) << '\n';
    }
    if (!out_path.empty()) {
        write_atomic(out_path, json_text(j));
        write_manifest(ctx, output_dir(out_path), fs::path(out_path).filename().string(),
                       {fs::path(out_path).filename().string()});
    }
    return 0;
}

// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr)
{
    CLI::App app{"Relative abundance estimation from standardized and opportunistic survey counts", "relabund"};
    app.set_version_flag("--version", std::string(kVersion));
    app.require_subcommand(1);
    const auto formatter = std::make_shared<JsonConfig>();
    app.config_formatter(formatter);
    app.allow_config_extras(CLI::config_extras_mode::error);
    app.set_config("--config", "", "JSON file of flag values for the subcommand; command-line flags win");

    auto add_sub = [&](const char* name, const char* desc) {
        return app.add_subcommand(name, desc);
    };

    SimulateOpts sim;
    CLI::App* s = add_sub("simulate", "Draw a synthetic design, counts and ground truth");
    s->add_option("--seed", sim.seed, "Random seed")->capture_default_str();
    s->add_option("--out", sim.out, "Output directory")->required();
    s->add_option("--species", sim.species)->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--sites", sim.sites)->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--habitats", sim.habitats)->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--std-cells", sim.std_cells, "Standardized cells per site")->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--opp-cells", sim.opp_cells, "Opportunistic cells per site")->capture_default_str()->check(CLI::NonNegativeNumber);
    s->add_option("--abundance-range", sim.abundance)->expected(2)->capture_default_str();
    s->add_option("--reporting-range", sim.reporting)->expected(2)->capture_default_str();
    s->add_option("--effort-range", sim.effort, "Opportunistic effort range")->expected(2)->capture_default_str();
    s->add_option("--preference-range", sim.preference)->expected(2)->capture_default_str();
    s->add_option("--selection-range", sim.selection)->expected(2)->capture_default_str();
    s->add_option("--cell-area", sim.cell_area)->capture_default_str();
    s->add_option("--remainder-share", sim.remainder, "Upper bound of the unvisited share of a site")->capture_default_str();
    s->add_option("--habitat-rule", sim.habitat_rule, "dirichlet or site-clustered")->capture_default_str();
    s->add_option("--cluster-concentration", sim.concentration)->capture_default_str();
    s->add_flag("--uniform-selection", sim.uniform_selection, "Set every selection probability to 1");
    s->add_option("--opp-only-species", sim.opp_only, "Species monitored only opportunistically")->capture_default_str();
    s->add_option("--alpha", sim.alpha, "Alpha JSON applied when drawing counts");
    s->add_option("--holdout-quadrats", sim.holdout_quadrats, "Holdout quadrats per site; 0 writes no holdout survey")
        ->capture_default_str()
        ->check(CLI::NonNegativeNumber);
    s->add_option("--holdout-points", sim.holdout_points, "Observation points per holdout quadrat")->capture_default_str();

    std::string ci_design, ci_out;
    CLI::App* ci = add_sub("check-ident", "Report the rank of the standardized design");
    ci->add_option("--design", ci_design)->required();
    ci->add_option("--out", ci_out, "Also write the report here");

    FitOpts fit;
    CLI::App* f = add_sub("fit", "MAP fit and posterior sampling");
    f->add_option("--variant", fit.variant, "opp-stand-hab, stand-only-hab, opp-stand-no-hab or one-quadrat-hab")
        ->capture_default_str();
    f->add_option("--design", fit.design)->required();
    f->add_option("--counts", fit.counts)->required();
    f->add_option("--out", fit.out, "Summary JSON")->required();
    f->add_option("--draws-out", fit.draws_out, "CSV of thinned draws");
    f->add_option("--alpha", fit.alpha, "Alpha JSON from the alpha command");
    f->add_option("--chains", fit.chains)->capture_default_str()->check(CLI::PositiveNumber);
    f->add_option("--warmup", fit.warmup)->capture_default_str()->check(CLI::NonNegativeNumber);
    f->add_option("--samples", fit.samples)->capture_default_str()->check(CLI::NonNegativeNumber);
    f->add_option("--thin", fit.thin)->capture_default_str()->check(CLI::PositiveNumber);
    f->add_option("--seed", fit.seed)->capture_default_str();
    f->add_option("--threads", fit.threads, "Concurrent chains; 0 uses every core")->capture_default_str();
    f->add_option("--reference-site", fit.reference_site)->capture_default_str();
    f->add_option("--prior-lo", fit.prior_lo, "Lower bound of every log parameter")->capture_default_str();
    f->add_option("--prior-hi", fit.prior_hi, "Upper bound of every log parameter")->capture_default_str();
    f->add_option("--map-max-iter", fit.map_max_iter)->capture_default_str();
    f->add_option("--map-tol", fit.map_tol)->capture_default_str();
    f->add_flag("--force", fit.force, "Fit even if the design fails the identifiability check");
    f->add_flag("--map-only", fit.map_only, "Skip sampling");

    std::string pr_fit, pr_design, pr_holdout, pr_out, pr_estimate = "mean", pr_density;
    std::vector<int> pr_species;
    CLI::App* p = add_sub("predict", "Predict holdout quadrat counts and relative densities");
    p->add_option("--fit", pr_fit, "Summary JSON from fit")->required();
    p->add_option("--design", pr_design)->required();
    p->add_option("--holdout", pr_holdout, "Holdout quadrat JSON");
    p->add_option("--out", pr_out, "Predicted counts CSV");
    p->add_option("--estimate", pr_estimate, "mean, median or map")->capture_default_str();
    p->add_option("--density-out", pr_density, "Per-site relative densities CSV");
    p->add_option("--species", pr_species, "Restrict the outputs to these species ids");

    ValidateOpts val;
    CLI::App* v = add_sub("validate", "Score fits against holdout counts or simulated truth");
    v->add_option("--fit", val.fits, "Summary JSON(s) from fit")->required()->expected(1, -1);
    v->add_option("--design", val.design)->required();
    v->add_option("--holdout", val.holdout);
    v->add_option("--holdout-counts", val.holdout_counts);
    v->add_option("--truth", val.truth, "truth.json from simulate");
    v->add_option("--estimate", val.estimate, "mean, median or map")->capture_default_str();
    v->add_option("--reference-site", val.reference_site, "Defaults to the truth's reference site");
    v->add_option("--out", val.out, "Report JSON");
    v->add_option("--table", val.table, "Relative-difference CSV");

    std::string al_bins, al_out;
    CLI::App* a = add_sub("alpha", "Habitat detectability multipliers from distance-binned counts");
    a->add_option("--bins", al_bins, "CSV habitat_id,total_count,near_count[,dataset]")->required();
    a->add_option("--out", al_out, "Alpha JSON");

    std::vector<std::string> cmp_fits;
    std::string cmp_out;
    CLI::App* c = add_sub("compare", "Pairwise BIC differences of fits on the same data");
    c->add_option("--fit", cmp_fits)->required()->expected(2, -1);
    c->add_option("--out", cmp_out, "Table JSON");

    // --config may follow the subcommand; the root app owns it.
    std::vector<std::string> args(argv + 1, argv + argc);
    auto sub_pos = args.begin();
    while (sub_pos != args.end() && (sub_pos->empty() || (*sub_pos)[0] == '-'))
        sub_pos += (*sub_pos == "--config" && sub_pos + 1 != args.end()) ? 2 : 1;
    if (sub_pos != args.end()) {
        formatter->section = *sub_pos;
        for (auto it = sub_pos + 1; it != args.end(); ++it) {
            if (*it == "--config" && it + 1 != args.end()) {
                std::vector<std::string> moved{*it, *(it + 1)};
                args.erase(it, it + 2);
                args.insert(args.begin(), moved.begin(), moved.end());
                break;
            }
            if (it->rfind("--config=", 0) == 0) {
                std::string moved = *it;
                args.erase(it);
                args.insert(args.begin(), moved);
                break;
            }
        }
    }
    std::reverse(args.begin(), args.end());

    try {
        app.parse(args);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return 2;
    }

    RunContext ctx;
    for (int k = 1; k < argc; ++k) ctx.argv.emplace_back(argv[k]);
    try {
        if (s->parsed()) {
            ctx.command = "simulate";
            ctx.config = sim.to_json();
            return cmd_simulate(sim, ctx, out);
        }
        if (ci->parsed()) {
            ctx.command = "check-ident";
            ctx.config = {{"design", ci_design}, {"out", ci_out}};
            return cmd_check_ident(ci_design, ci_out, ctx, out);
        }
        if (f->parsed()) {
            ctx.command = "fit";
            ctx.config = fit.to_json();
            return cmd_fit(fit, ctx, out, err);
        }
        if (p->parsed()) {
            ctx.command = "predict";
            ctx.config = {{"fit", pr_fit},         {"design", pr_design},   {"holdout", pr_holdout},
                          {"out", pr_out},         {"estimate", pr_estimate}, {"density-out", pr_density}, {"species", pr_species}};
            return cmd_predict(pr_fit, pr_design, pr_holdout, pr_out, pr_estimate, pr_density, pr_species, ctx, out);
        }
        if (v->parsed()) {
            ctx.command = "validate";
            ctx.config = {{"fit", val.fits},           {"design", val.design}, {"holdout", val.holdout},
                          {"holdout-counts", val.holdout_counts}, {"truth", val.truth}, {"estimate", val.estimate},
                          {"reference-site", val.reference_site}, {"out", val.out}, {"table", val.table}};
            return cmd_validate(val, ctx, out);
        }
        if (a->parsed()) {
            ctx.command = "alpha";
            ctx.config = {{"bins", al_bins}, {"out", al_out}};
            return cmd_alpha(al_bins, al_out, ctx, out);
        }
        if (c->parsed()) {
            ctx.command = "compare";
            ctx.config = {{"fit", cmp_fits}, {"out", cmp_out}};
            return cmd_compare(cmp_fits, cmp_out, ctx, out);
        }
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}

} // namespace relabund::cli
