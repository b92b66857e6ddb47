#pragma once

#include <stdexcept>
#include <string>

namespace omat {

// Shape or dimensionality violations (mismatched operands, bad extents).
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Value outside an operation's documented domain.
struct DomainError : std::runtime_error {
    explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

// Diverged or produced non-finite values; carries the offending step where known.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad configuration file or unknown key.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Upstream artifact missing or digest mismatch on resume.
struct ArtifactError : std::runtime_error {
    explicit ArtifactError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace omat
