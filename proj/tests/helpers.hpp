#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "ntklab/matrix.hpp"
#include "ntklab/network.hpp"

namespace testutil {

using ntklab::Matrix;

inline double rel_err(double got, double want) {
    return std::abs(got - want) / std::max(1.0, std::abs(want));
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) m = std::max(m, std::abs(a(i, j) - b(i, j)));
    return m;
}

// Central finite difference of a scalar functional over one theta entry.
inline double fd_theta(ntklab::ModelParams& p, std::size_t i,
                       const std::function<double()>& value, double h = 1e-4) {
    const double keep = p.theta[i];
    p.theta[i] = keep + h;
    const double up = value();
    p.theta[i] = keep - h;
    const double down = value();
    p.theta[i] = keep;
    return (up - down) / (2.0 * h);
}

// Central finite difference over one matrix entry.
inline double fd_entry(Matrix& m, std::size_t i, std::size_t j,
                       const std::function<double()>& value, double h = 1e-4) {
    const double keep = m(i, j);
    m(i, j) = keep + h;
    const double up = value();
    m(i, j) = keep - h;
    const double down = value();
    m(i, j) = keep;
    return (up - down) / (2.0 * h);
}

// Smallest |pre-activation| across all ReLU nodes; differencing across a kink
// would poison finite-difference checks, so tests resample until it is safe.
inline double relu_margin(const ntklab::ModelParams& p, const Matrix& x) {
    const ntklab::ForwardTrace t = ntklab::forward_trace(p, x);
    double m = 1e300;
    for (const Matrix& pre : t.conv_pre)
        for (const double v : pre.data()) m = std::min(m, std::abs(v));
    for (std::size_t l = 0; l + 1 < t.dense_pre.size(); ++l)
        for (const double v : t.dense_pre[l].data()) m = std::min(m, std::abs(v));
    return m;
}

inline Matrix safe_gaussian_input(const ntklab::ModelParams& p, std::size_t batch,
                                  ntklab::Rng& rng) {
    for (int attempt = 0; attempt < 64; ++attempt) {
        Matrix x = Matrix::gaussian(batch, p.spec.input_dim, rng);
        if (relu_margin(p, x) > 5e-3) return x;
    }
    throw std::runtime_error("could not find an input clear of ReLU kinks");
}

}  // namespace testutil
