#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "relabund/errors.hpp"

namespace relabund::csv {

inline std::string_view trim(std::string_view s)
{
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

inline std::vector<std::string_view> split(std::string_view line)
{
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(',', start);
        out.push_back(trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

template <class T>
T parse_number(std::string_view field, const std::string& source, std::size_t line, std::string_view column)
{
    T value{};
    const auto* first = field.data();
    const auto* last = field.data() + field.size();
    const auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc{} || ptr != last || field.empty())
        throw ParseError(source, line, "cannot parse " + std::string(column) + " from '" + std::string(field) + "'");
    return value;
}

/// Streams the rows of a headed CSV. Blank lines and lines starting with '#'
/// are skipped; `on_comment` sees the latter. The header must match exactly.
inline void read_rows(std::istream& in, const std::string& source,
                      const std::vector<std::string>& required_header,
                      std::size_t optional_trailing,
                      const std::function<void(const std::vector<std::string_view>&, std::size_t)>& on_row,
                      const std::function<void(std::string_view)>& on_comment = {})
{
    std::string line;
    std::size_t lineno = 0;
    bool have_header = false;
    std::size_t width = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto t = trim(line);
        if (t.empty()) continue;
        if (t.front() == '#') {
            if (on_comment) on_comment(t);
            continue;
        }
        auto fields = split(t);
        if (!have_header) {
            if (fields.size() < required_header.size() || fields.size() > required_header.size() + optional_trailing)
                throw ParseError(source, lineno, "unexpected header '" + std::string(t) + "'");
            for (std::size_t k = 0; k < required_header.size(); ++k)
                if (fields[k] != required_header[k])
                    throw ParseError(source, lineno, "expected column '" + required_header[k] + "', found '" +
                                                         std::string(fields[k]) + "'");
            width = fields.size();
            have_header = true;
            continue;
        }
        if (fields.size() != width)
            throw ParseError(source, lineno, "expected " + std::to_string(width) + " fields, found " +
                                                 std::to_string(fields.size()));
        on_row(fields, lineno);
    }
    if (!have_header) throw ParseError(source, lineno == 0 ? 1 : lineno, "missing header");
}

inline std::ifstream open_input(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    return in;
}

} // namespace relabund::csv
