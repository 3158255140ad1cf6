#pragma once

#include <charconv>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "relabund/csv.hpp"
#include "relabund/errors.hpp"
#include "relabund/model.hpp"
#include "relabund/survey.hpp"

namespace relabund {

/// Observed individuals per habitat, in total and within the near-distance band.
struct DistanceBinnedCounts {
    Eigen::MatrixXd total; // H x 1 (shared) or H x 2 (per dataset)
    Eigen::MatrixXd near;
    std::optional<double> near_threshold; // metres, from the file's metadata
};

struct AlphaTable {
    Eigen::MatrixXd alpha; // H x 1 or H x 2; alpha(0, k) == 1
    std::optional<double> near_threshold;

    bool shared() const { return alpha.cols() == 1; }

    /// H x 2 weights as consumed by the likelihood.
    Eigen::MatrixXd weights() const { return shared() ? Eigen::MatrixXd(alpha.replicate(1, 2)) : alpha; }
};

/// alpha_h = (Y_h / Y_1h) / (Y_1 / Y_11), computed per column.
inline AlphaTable compute_alpha(const DistanceBinnedCounts& bins)
{
    const auto H = bins.total.rows();
    if (H < 1 || bins.near.rows() != H || bins.near.cols() != bins.total.cols() || bins.total.cols() < 1 ||
        bins.total.cols() > 2)
        throw DimensionError("distance-binned counts must be H x 1 or H x 2 with matching near counts");
    AlphaTable t{Eigen::MatrixXd::Ones(H, bins.total.cols()), bins.near_threshold};
    std::string undefined;
    for (Eigen::Index k = 0; k < bins.total.cols(); ++k) {
        for (Eigen::Index h = 0; h < H; ++h) {
            const double y = bins.total(h, k), y1 = bins.near(h, k);
            if (!(y1 >= 0.0) || !(y >= y1)) throw DataError("near counts must satisfy 0 <= near <= total");
            if (!(y1 > 0.0)) undefined += (undefined.empty() ? "" : ", ") + std::to_string(h);
        }
    }
    if (!undefined.empty()) throw DataError("alpha is undefined for habitat(s) " + undefined + ": no near-band observations");
    for (Eigen::Index k = 0; k < bins.total.cols(); ++k) {
        const double ref = bins.total(0, k) / bins.near(0, k);
        for (Eigen::Index h = 1; h < H; ++h) t.alpha(h, k) = (bins.total(h, k) / bins.near(h, k)) / ref;
    }
    return t;
}

/// Intensity of the habitat-detectability-corrected model.
inline double intensity_with_alpha(const TildeParams& p, const ModelVariant& v, const SurveyDesign& d,
                                   const Eigen::MatrixXd& alpha, int species, int cell)
{
    return intensity(p, v, d, species, cell, AlphaWeights(alpha));
}

/// Folds alpha into the selection and preference parameters: the dataset-0
/// column into S~, the dataset-1 to dataset-0 ratio into q~.
inline TildeParams absorb_alpha(const TildeParams& p, const ModelVariant& v, const Eigen::MatrixXd& alpha)
{
    if (!v.habitat()) throw std::invalid_argument("alpha can only be absorbed by a habitat variant");
    if (alpha.rows() != p.log_S.cols() || alpha.cols() != 2) throw DimensionError("alpha must be H x 2");
    TildeParams out = p;
    for (Eigen::Index h = 0; h < alpha.rows(); ++h) {
        out.log_S.col(h).array() += std::log(alpha(h, 0));
        out.log_q(h) += std::log(alpha(h, 1)) - std::log(alpha(h, 0));
    }
    return out;
}

/// CSV `habitat_id,total_count,near_count[,dataset]`; a `# near_threshold_m=<x>`
/// comment records the near band.
inline DistanceBinnedCounts parse_distance_bins(std::istream& in, const std::string& source)
{
    std::map<std::pair<int, int>, std::pair<double, double>> rows;
    std::optional<double> threshold;
    bool per_dataset = false;
    csv::read_rows(
        in, source, {"habitat_id", "total_count", "near_count"}, 1,
        [&](const std::vector<std::string_view>& f, std::size_t line) {
            const int h = csv::parse_number<int>(f[0], source, line, "habitat_id");
            const auto total = csv::parse_number<std::int64_t>(f[1], source, line, "total_count");
            const auto near = csv::parse_number<std::int64_t>(f[2], source, line, "near_count");
            int k = 0;
            if (f.size() == 4) {
                per_dataset = true;
                k = csv::parse_number<int>(f[3], source, line, "dataset");
                if (k != 0 && k != 1) throw ParseError(source, line, "dataset must be 0 or 1");
            }
            if (h < 0) throw ParseError(source, line, "negative habitat_id");
            if (total < 0 || near < 0 || near > total) throw ParseError(source, line, "need 0 <= near_count <= total_count");
            if (!rows.emplace(std::pair{h, k}, std::pair{static_cast<double>(total), static_cast<double>(near)}).second)
                throw ParseError(source, line, "duplicate habitat row");
        },
        [&](std::string_view comment) {
            const auto pos = comment.find("near_threshold_m=");
            if (pos == std::string_view::npos) return;
            auto value = csv::trim(comment.substr(pos + 17));
            double x = 0.0;
            const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), x);
            if (ec == std::errc{} && ptr == value.data() + value.size()) threshold = x;
        });
    int H = 0;
    for (const auto& [key, _] : rows) H = std::max(H, key.first + 1);
    const int K = per_dataset ? 2 : 1;
    if (rows.size() != static_cast<std::size_t>(H * K))
        throw DataError(source + ": every habitat 0.." + std::to_string(H - 1) + " needs a row" +
                        (per_dataset ? " per dataset" : ""));
    DistanceBinnedCounts b{Eigen::MatrixXd(H, K), Eigen::MatrixXd(H, K), threshold};
    for (const auto& [key, v] : rows) {
        b.total(key.first, key.second) = v.first;
        b.near(key.first, key.second) = v.second;
    }
    return b;
}

inline DistanceBinnedCounts load_distance_bins(const std::filesystem::path& path)
{
    auto in = csv::open_input(path);
    return parse_distance_bins(in, path.string());
}

inline nlohmann::json alpha_to_json(const AlphaTable& t)
{
    nlohmann::json j;
    if (t.shared()) {
        j["alpha"] = detail::from_vector(t.alpha.col(0));
    } else {
        j["alpha"] = detail::from_matrix(t.alpha);
    }
    j["shared"] = t.shared();
    j["near_threshold_m"] = t.near_threshold ? nlohmann::json(*t.near_threshold) : nlohmann::json(nullptr);
    return j;
}

inline AlphaTable alpha_from_json(const nlohmann::json& j, const std::string& where = "alpha")
{
    if (!j.is_object() || !j.contains("alpha")) throw DataError(where + ": missing field 'alpha'");
    const auto& a = j.at("alpha");
    AlphaTable t;
    if (!a.empty() && a[0].is_array()) {
        t.alpha = detail::to_matrix(a, "alpha");
    } else {
        t.alpha = detail::to_vector(a, "alpha");
    }
    if (t.alpha.rows() < 1 || t.alpha.cols() < 1 || t.alpha.cols() > 2 || (t.alpha.array() <= 0.0).any() ||
        !t.alpha.allFinite())
        throw DataError(where + ": alpha must be a positive H-vector or H x 2 table");
    if (j.contains("near_threshold_m") && j.at("near_threshold_m").is_number())
        t.near_threshold = j.at("near_threshold_m").get<double>();
    return t;
}

} // namespace relabund
