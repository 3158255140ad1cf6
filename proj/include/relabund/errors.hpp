#pragma once

#include <stdexcept>
#include <string>

namespace relabund {

/// Malformed input or a violated data invariant.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Input that fails to parse; carries the 1-based line of the failure.
class ParseError : public DataError {
public:
    ParseError(const std::string& source, std::size_t line, const std::string& what)
        : DataError(source + ":" + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// Parameter blocks whose shapes do not match the design.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// The standardized design does not pin down the habitat-selection parameters.
class IdentifiabilityError : public DataError {
public:
    using DataError::DataError;
};

} // namespace relabund
