#pragma once

#include <stdexcept>
#include <string>

namespace autofed {

// Bad configuration: invalid shapes, parameter values, incompatible presets.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad runtime input: malformed samples, labels outside their domain.
struct InputError : std::runtime_error {
    explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

// Violated numeric or structural invariant (NaN/Inf values, broken postconditions).
struct InvariantError : std::runtime_error {
    explicit InvariantError(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem and serialization failures.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace autofed
