#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "relabund/csv.hpp"
#include "relabund/errors.hpp"

namespace relabund {

inline constexpr int kStandardized = 0;
inline constexpr int kOpportunistic = 1;

/// One (cell, dataset) observation unit.
struct CellRecord {
    int cell_id = 0;
    int dataset = kStandardized;
    int site_id = 0;
    Eigen::VectorXd habitat_area;       // V_hc, length H
    std::optional<double> known_effort; // relative standardized effort; dataset 0 only

    double area() const { return habitat_area.sum(); }

    bool operator==(const CellRecord& o) const
    {
        return cell_id == o.cell_id && dataset == o.dataset && site_id == o.site_id &&
               habitat_area == o.habitat_area && known_effort == o.known_effort;
    }
};

/// Sites, cells and habitat areas shared by both datasets. Cell ids are the
/// positions 0..C-1 of `cells`.
struct SurveyDesign {
    int n_species = 0;
    int n_sites = 0;
    int n_habitats = 0;
    std::vector<CellRecord> cells;
    Eigen::MatrixXd site_habitat_area;      // V_hj, J x H
    std::vector<std::array<bool, 2>> monitored; // I x 2

    int n_cells() const { return static_cast<int>(cells.size()); }

    double site_area(int j) const { return site_habitat_area.row(j).sum(); }

    /// Total area of each habitat over all sites (V_h).
    Eigen::VectorXd total_habitat_area() const { return site_habitat_area.colwise().sum().transpose(); }

    bool is_monitored(int species, int dataset) const { return monitored[species][dataset]; }

    /// First species monitored in both datasets; anchors the reporting ratios.
    int reference_species() const
    {
        for (int i = 0; i < n_species; ++i)
            if (monitored[i][0] && monitored[i][1]) return i;
        return -1;
    }

    std::vector<int> cells_of_dataset(int dataset) const
    {
        std::vector<int> out;
        for (int c = 0; c < n_cells(); ++c)
            if (cells[c].dataset == dataset) out.push_back(c);
        return out;
    }

    /// Position of each opportunistic cell in the opportunistic-effort vector,
    /// -1 for standardized cells.
    std::vector<int> opportunistic_slots() const
    {
        std::vector<int> slot(cells.size(), -1);
        int next = 0;
        for (int c = 0; c < n_cells(); ++c)
            if (cells[c].dataset == kOpportunistic) slot[c] = next++;
        return slot;
    }

    int n_opportunistic_cells() const
    {
        return static_cast<int>(std::count_if(cells.begin(), cells.end(),
                                              [](const CellRecord& c) { return c.dataset == kOpportunistic; }));
    }

    bool operator==(const SurveyDesign& o) const
    {
        return n_species == o.n_species && n_sites == o.n_sites && n_habitats == o.n_habitats &&
               cells == o.cells && site_habitat_area == o.site_habitat_area && monitored == o.monitored;
    }
};

struct CountEntry {
    int species_id = 0;
    int cell_id = 0;
    std::int64_t count = 0;
};

/// Sparse counts X_ick with a dense view. Pairs absent from the table are zero.
class CountTable {
public:
    CountTable() = default;

    CountTable(const SurveyDesign& design, std::vector<CountEntry> entries)
        : entries_(std::move(entries)), dense_(Eigen::MatrixXd::Zero(design.n_species, design.n_cells()))
    {
        std::set<std::pair<int, int>> seen;
        for (const auto& e : entries_) {
            if (e.species_id < 0 || e.species_id >= design.n_species)
                throw DataError("count refers to unknown species " + std::to_string(e.species_id));
            if (e.cell_id < 0 || e.cell_id >= design.n_cells())
                throw DataError("count refers to unknown cell " + std::to_string(e.cell_id));
            if (e.count < 0)
                throw DataError("negative count for species " + std::to_string(e.species_id) + " in cell " +
                                std::to_string(e.cell_id));
            if (!seen.insert({e.species_id, e.cell_id}).second)
                throw DataError("duplicate count for species " + std::to_string(e.species_id) + " in cell " +
                                std::to_string(e.cell_id));
            const int k = design.cells[e.cell_id].dataset;
            if (e.count > 0 && !design.is_monitored(e.species_id, k))
                throw DataError("species " + std::to_string(e.species_id) + " is not monitored in dataset " +
                                std::to_string(k) + " but has a count in cell " + std::to_string(e.cell_id));
            dense_(e.species_id, e.cell_id) = static_cast<double>(e.count);
        }
    }

    const std::vector<CountEntry>& entries() const { return entries_; }

    /// I x C matrix of counts as doubles.
    const Eigen::MatrixXd& dense() const { return dense_; }

    double at(int species, int cell) const { return dense_(species, cell); }

    /// Same counts, ignoring entry order and explicit zeros.
    bool same_counts(const CountTable& o) const { return dense_ == o.dense_; }

private:
    std::vector<CountEntry> entries_;
    Eigen::MatrixXd dense_;
};

/// Every violated invariant of the design, one description per rule instance.
inline std::vector<std::string> validate_design(const SurveyDesign& d)
{
    std::vector<std::string> v;
    if (d.n_species < 1) v.push_back("n_species must be at least 1");
    if (d.n_sites < 1) v.push_back("n_sites must be at least 1");
    if (d.n_habitats < 1) v.push_back("n_habitats must be at least 1");
    if (!v.empty()) return v;

    const int I = d.n_species, J = d.n_sites, H = d.n_habitats;
    const bool area_shape_ok = d.site_habitat_area.rows() == J && d.site_habitat_area.cols() == H;
    if (!area_shape_ok) {
        v.push_back("site_habitat_area must be " + std::to_string(J) + " x " + std::to_string(H));
    } else {
        for (int j = 0; j < J; ++j) {
            const auto row = d.site_habitat_area.row(j);
            if (!row.allFinite() || (row.array() < 0.0).any())
                v.push_back("site " + std::to_string(j) + " has a negative or non-finite habitat area");
            else if (!(row.sum() > 0.0))
                v.push_back("site " + std::to_string(j) + " has zero total area");
        }
    }

    if (static_cast<int>(d.monitored.size()) != I) {
        v.push_back("monitored must have " + std::to_string(I) + " rows");
    } else {
        bool any_both = false;
        for (int i = 0; i < I; ++i) {
            if (!d.monitored[i][0] && !d.monitored[i][1])
                v.push_back("species " + std::to_string(i) + " is monitored in neither dataset");
            any_both = any_both || (d.monitored[i][0] && d.monitored[i][1]);
        }
        if (!any_both) v.push_back("no species is monitored in both datasets (joint-monitoring rule)");
    }

    // Per (site, dataset) coverage and accumulated cell areas.
    std::vector<std::array<int, 2>> n_cells_of_site(J, {0, 0});
    std::vector<std::array<Eigen::VectorXd, 2>> covered(
        J, {Eigen::VectorXd::Zero(H), Eigen::VectorXd::Zero(H)});
    for (int c = 0; c < d.n_cells(); ++c) {
        const auto& cell = d.cells[c];
        const std::string tag = "cell " + std::to_string(cell.cell_id);
        if (cell.cell_id != c) {
            v.push_back(tag + " is at position " + std::to_string(c) + "; cell ids must be 0..C-1 in order");
            continue;
        }
        if (cell.dataset != kStandardized && cell.dataset != kOpportunistic) {
            v.push_back(tag + " has dataset " + std::to_string(cell.dataset) + " (expected 0 or 1)");
            continue;
        }
        if (cell.site_id < 0 || cell.site_id >= J) {
            v.push_back(tag + " refers to unknown site " + std::to_string(cell.site_id));
            continue;
        }
        if (cell.habitat_area.size() != H) {
            v.push_back(tag + " has " + std::to_string(cell.habitat_area.size()) + " habitat areas, expected " +
                        std::to_string(H));
            continue;
        }
        if (!cell.habitat_area.allFinite() || (cell.habitat_area.array() < 0.0).any())
            v.push_back(tag + " has a negative or non-finite habitat area");
        else if (!(cell.area() > 0.0))
            v.push_back(tag + " has zero total area");
        if (cell.dataset == kStandardized) {
            if (!cell.known_effort)
                v.push_back(tag + " is standardized but has no known_effort");
            else if (!(*cell.known_effort > 0.0) || !std::isfinite(*cell.known_effort))
                v.push_back(tag + " has a non-positive known_effort");
        } else if (cell.known_effort) {
            v.push_back(tag + " is opportunistic but carries a known_effort");
        }
        ++n_cells_of_site[cell.site_id][cell.dataset];
        covered[cell.site_id][cell.dataset] += cell.habitat_area;
    }

    for (int j = 0; j < J; ++j) {
        if (n_cells_of_site[j][kStandardized] == 0) v.push_back("site " + std::to_string(j) + " has no standardized cell");
        if (n_cells_of_site[j][kOpportunistic] == 0) v.push_back("site " + std::to_string(j) + " has no opportunistic cell");
        if (!area_shape_ok) continue;
        for (int k = 0; k < 2; ++k)
            for (int h = 0; h < H; ++h) {
                const double cap = d.site_habitat_area(j, h);
                if (covered[j][k](h) > cap * (1.0 + 1e-9) + 1e-12)
                    v.push_back("site " + std::to_string(j) + " dataset " + std::to_string(k) + " habitat " +
                                std::to_string(h) + ": cell areas exceed the site area");
            }
    }
    return v;
}

inline void require_valid(const SurveyDesign& d)
{
    const auto violations = validate_design(d);
    if (violations.empty()) return;
    std::string msg = "invalid design: " + violations.front();
    if (violations.size() > 1) msg += " (and " + std::to_string(violations.size() - 1) + " more)";
    throw DataError(msg);
}

// ---------------------------------------------------------------------------
// File formats

namespace detail {

inline std::size_t line_of_offset(const std::string& text, std::size_t offset)
{
    offset = std::min(offset, text.size());
    return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(offset), '\n'));
}

inline std::string read_file(const std::filesystem::path& path)
{
    auto in = csv::open_input(path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline Eigen::VectorXd to_vector(const nlohmann::json& j, const std::string& what)
{
    if (!j.is_array()) throw DataError(what + " must be an array");
    Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t k = 0; k < j.size(); ++k) {
        if (!j[k].is_number()) throw DataError(what + " must contain numbers");
        v(static_cast<Eigen::Index>(k)) = j[k].get<double>();
    }
    return v;
}

inline Eigen::MatrixXd to_matrix(const nlohmann::json& j, const std::string& what)
{
    if (!j.is_array()) throw DataError(what + " must be an array of rows");
    const auto rows = static_cast<Eigen::Index>(j.size());
    const auto cols = rows == 0 ? Eigen::Index{0} : static_cast<Eigen::Index>(j[0].size());
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const auto row = to_vector(j[static_cast<std::size_t>(r)], what);
        if (row.size() != cols) throw DataError(what + " rows have unequal lengths");
        m.row(r) = row.transpose();
    }
    return m;
}

inline nlohmann::json from_matrix(const Eigen::MatrixXd& m)
{
    auto out = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        auto row = nlohmann::json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        out.push_back(std::move(row));
    }
    return out;
}

inline nlohmann::json from_vector(const Eigen::VectorXd& v)
{
    auto out = nlohmann::json::array();
    for (Eigen::Index k = 0; k < v.size(); ++k) out.push_back(v(k));
    return out;
}

template <class T>
T required(const nlohmann::json& j, const char* key, const std::string& where)
{
    if (!j.contains(key)) throw DataError(where + ": missing field '" + key + "'");
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw DataError(where + ": field '" + key + "' has the wrong type");
    }
}

} // namespace detail

inline nlohmann::json design_to_json(const SurveyDesign& d)
{
    nlohmann::json j;
    j["n_species"] = d.n_species;
    j["n_sites"] = d.n_sites;
    j["n_habitats"] = d.n_habitats;
    j["site_habitat_area"] = detail::from_matrix(d.site_habitat_area);
    auto mon = nlohmann::json::array();
    for (const auto& m : d.monitored) mon.push_back({m[0], m[1]});
    j["monitored"] = std::move(mon);
    auto cells = nlohmann::json::array();
    for (const auto& c : d.cells) {
        nlohmann::json cj;
        cj["cell_id"] = c.cell_id;
        cj["dataset"] = c.dataset;
        cj["site_id"] = c.site_id;
        cj["habitat_area"] = detail::from_vector(c.habitat_area);
        if (c.known_effort) cj["known_effort"] = *c.known_effort;
        cells.push_back(std::move(cj));
    }
    j["cells"] = std::move(cells);
    return j;
}

/// Builds a design from its JSON form. Structural problems throw; semantic
/// invariants are left to validate_design.
inline SurveyDesign design_from_json(const nlohmann::json& j, const std::string& where = "design")
{
    if (!j.is_object()) throw DataError(where + ": top level must be an object");
    SurveyDesign d;
    d.n_species = detail::required<int>(j, "n_species", where);
    d.n_sites = detail::required<int>(j, "n_sites", where);
    d.n_habitats = detail::required<int>(j, "n_habitats", where);
    if (!j.contains("site_habitat_area")) throw DataError(where + ": missing field 'site_habitat_area'");
    d.site_habitat_area = detail::to_matrix(j.at("site_habitat_area"), "site_habitat_area");
    if (!j.contains("monitored") || !j.at("monitored").is_array())
        throw DataError(where + ": missing array 'monitored'");
    for (const auto& row : j.at("monitored")) {
        if (!row.is_array() || row.size() != 2) throw DataError(where + ": monitored rows must have 2 entries");
        auto as_bool = [&](const nlohmann::json& x) {
            if (x.is_boolean()) return x.get<bool>();
            if (x.is_number_integer()) return x.get<int>() != 0;
            throw DataError(where + ": monitored entries must be booleans");
        };
        d.monitored.push_back({as_bool(row[0]), as_bool(row[1])});
    }
    if (!j.contains("cells") || !j.at("cells").is_array()) throw DataError(where + ": missing array 'cells'");
    for (const auto& cj : j.at("cells")) {
        CellRecord c;
        const std::string cw = where + ": cell";
        c.cell_id = detail::required<int>(cj, "cell_id", cw);
        c.dataset = detail::required<int>(cj, "dataset", cw);
        c.site_id = detail::required<int>(cj, "site_id", cw);
        if (!cj.contains("habitat_area")) throw DataError(cw + " " + std::to_string(c.cell_id) + ": missing habitat_area");
        c.habitat_area = detail::to_vector(cj.at("habitat_area"), "habitat_area");
        if (cj.contains("known_effort") && !cj.at("known_effort").is_null())
            c.known_effort = detail::required<double>(cj, "known_effort", cw);
        d.cells.push_back(std::move(c));
    }
    std::stable_sort(d.cells.begin(), d.cells.end(),
                     [](const CellRecord& a, const CellRecord& b) { return a.cell_id < b.cell_id; });
    return d;
}

inline SurveyDesign parse_design(const std::string& text, const std::string& source)
{
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(source, detail::line_of_offset(text, e.byte), e.what());
    }
    return design_from_json(j, source);
}

inline std::vector<CountEntry> parse_counts(std::istream& in, const std::string& source)
{
    std::vector<CountEntry> entries;
    csv::read_rows(in, source, {"species_id", "cell_id", "count"}, 0,
                   [&](const std::vector<std::string_view>& f, std::size_t line) {
                       CountEntry e;
                       e.species_id = csv::parse_number<int>(f[0], source, line, "species_id");
                       e.cell_id = csv::parse_number<int>(f[1], source, line, "cell_id");
                       e.count = csv::parse_number<std::int64_t>(f[2], source, line, "count");
                       if (e.count < 0) throw ParseError(source, line, "negative count");
                       entries.push_back(e);
                   });
    return entries;
}

/// Reads and validates a design JSON and a counts CSV.
inline std::pair<SurveyDesign, CountTable> load_design(const std::filesystem::path& design_file,
                                                       const std::filesystem::path& counts_file)
{
    auto design = parse_design(detail::read_file(design_file), design_file.string());
    require_valid(design);
    auto in = csv::open_input(counts_file);
    auto entries = parse_counts(in, counts_file.string());
    CountTable counts(design, std::move(entries));
    return {std::move(design), std::move(counts)};
}

inline std::string design_to_string(const SurveyDesign& d) { return design_to_json(d).dump(1) + "\n"; }

inline std::string counts_to_string(const CountTable& counts)
{
    std::ostringstream out;
    out << "species_id,cell_id,count\n";
    for (const auto& e : counts.entries()) out << e.species_id << ',' << e.cell_id << ',' << e.count << '\n';
    return out.str();
}

inline void write_design(const SurveyDesign& d, const std::filesystem::path& path)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << design_to_string(d);
}

inline void write_counts(const CountTable& counts, const std::filesystem::path& path)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << counts_to_string(counts);
}

} // namespace relabund
