#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace cryoar {

// Error categories map one-to-one onto the CLI exit codes (2, 3, 4).

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class NumericalError : public std::runtime_error {
public:
    explicit NumericalError(const std::string& what, std::optional<std::size_t> index = std::nullopt)
        : std::runtime_error(index ? what + " (particle " + std::to_string(*index) + ")" : what),
          index_(index) {}

    std::optional<std::size_t> index() const { return index_; }

private:
    std::optional<std::size_t> index_;
};

/// Weighted cross-covariance of rank < 2: the rotation is not determined.
class DegenerateGeometryError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

}  // namespace cryoar
