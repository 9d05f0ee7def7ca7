#pragma once

#include <stdexcept>
#include <string>

namespace edglab {

/// Invalid experiment, dataset or command configuration. Maps to CLI exit code 2.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed on-disk input (IDX files, caches, checkpoints).
class IngestionError : public std::runtime_error {
public:
    IngestionError(const std::string& path, std::size_t offset, const std::string& what)
        : std::runtime_error(path + " @ offset " + std::to_string(offset) + ": " + what),
          path_(path),
          offset_(offset) {}

    const std::string& path() const noexcept { return path_; }
    std::size_t offset() const noexcept { return offset_; }

private:
    std::string path_;
    std::size_t offset_;
};

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Non-finite gradient or parameter; the owning trial is aborted.
class OptimizerError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class SplitError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Not enough per-class samples to draw an episode without replacement.
class SamplingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// KL(P||Q) with Q(z) = 0 < P(z).
class AbsoluteContinuityViolation : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

}  // namespace edglab
