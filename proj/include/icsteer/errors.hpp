#pragma once
#include <stdexcept>
#include <string>

namespace icsteer {

// Bad or inconsistent configuration (unknown field, wrong type, invalid value).
// CLI maps this to exit code 2.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Missing or hash-mismatched artifact (checkpoint, cache, dataset).
// CLI maps this to exit code 3.
struct ArtifactError : std::runtime_error {
    explicit ArtifactError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical failure (non-finite loss, divergence, invalid numeric input).
// CLI maps this to exit code 4.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace icsteer
