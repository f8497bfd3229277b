#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace papc {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Invalid argument / precondition violation (non-finite input, bad shape, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

/// Configuration file / schema violations.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Optimizer failures (non-finite rollout, regularization exhausted).
class SolverError : public Error {
public:
    using Error::Error;
};

/// Point too close to or behind the camera near plane.
class BehindCameraError : public Error {
public:
    using Error::Error;
};

/// Degenerate geometry (rank-deficient fit, too few visible points).
class GeometryError : public Error {
public:
    using Error::Error;
};

/// Malformed file contents.
class ParseError : public Error {
public:
    using Error::Error;
};

/// Training-time failures (divergence, non-finite gradients).
class TrainError : public Error {
public:
    using Error::Error;
};

/// Dataset generation / loading failures.
class DatasetError : public Error {
public:
    using Error::Error;
};

constexpr double kPi = 3.14159265358979323846;

/// Wrap an angle to (-pi, pi].
inline double wrap_angle(double a) {
    double r = std::remainder(a, 2.0 * kPi);
    if (r <= -kPi) r += 2.0 * kPi;
    return r;
}

/// splitmix64; used to derive independent sub-seeds from one master seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace papc
