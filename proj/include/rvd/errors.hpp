#pragma once

#include <stdexcept>
#include <string>

namespace rvd {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid datum or run configuration; carries the offending field path.
struct ConfigError : Error {
    std::string field;
    ConfigError(std::string field_path, const std::string& msg)
        : Error(field_path + ": " + msg), field(std::move(field_path)) {}
};

// eps = 0 with a target coinciding with a source.
struct SingularEvalError : Error {
    using Error::Error;
};

// Exponent ordering of the interpolation inequality violated.
struct InvalidExponentsError : Error {
    using Error::Error;
};

// Gridded source support touches the grid boundary.
struct SupportOverflowError : Error {
    using Error::Error;
};

// Fixed-point iteration exhausted max_iter; carries the last residual.
struct NonConvergenceError : Error {
    double residual;
    int iterations;
    NonConvergenceError(double res, int iters)
        : Error("self-consistent A iteration did not converge (residual " + std::to_string(res) +
                " after " + std::to_string(iters) + " iterations)"),
          residual(res),
          iterations(iters) {}
};

// Field bundle evaluated against an ensemble state it was not solved for.
struct ConsistencyError : Error {
    using Error::Error;
};

// Not enough stored probe samples for time differencing.
struct HistoryError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

}  // namespace rvd
