#pragma once

#include <stdexcept>
#include <string>

namespace ntklab {

// Shape/size violations (non-square input, mismatched operands, bad layouts).
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Flat-parameter layout mismatches (wrong theta length, misaligned gradients).
struct LayoutError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Infeasible configuration (session arithmetic, bad hyperparameters).
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Episode/batch sampling cannot be satisfied by the dataset.
struct SamplingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Numerical failure: Cholesky pivot breakdown, rank deficiency, divergence.
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Mathematically infeasible request (quantity leaves its admissible domain).
struct DomainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace ntklab
