#pragma once

#include <stdexcept>
#include <string>

namespace fedmerge {

// Structural mismatch between parameter containers (block name/shape/order).
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

// Malformed serialized data (bad magic, truncation, checksum, unparseable CSV).
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

// Invalid user-facing configuration, rejected before any work starts.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// A mathematical precondition that the pipeline itself guarantees was violated,
// e.g. c > min(a, b) reaching the mixing-weight solver.
struct InvariantError : std::runtime_error {
    explicit InvariantError(const std::string& what) : std::runtime_error(what) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

} // namespace fedmerge
