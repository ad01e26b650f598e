#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

#include "ntklab/errors.hpp"
#include "ntklab/io.hpp"

namespace ntklab {

// Expected test loss of kernel ridgeless regression in the eigenbasis of the
// kernel's integral operator. Inputs are the operator spectrum, the target's
// coefficients in that basis, the sample count, and the label noise level.
struct SpectralProblem {
    std::vector<double> eigenvalues;  // descending, strictly positive
    std::vector<double> weights;      // target coefficient per eigendirection
    std::size_t n = 0;                // training sample count
    double noise_variance = 0.0;

    void validate() const {
        if (eigenvalues.empty()) throw ConfigError("spectral problem: no eigenvalues");
        if (weights.size() != eigenvalues.size())
            throw ConfigError("spectral problem: " + std::to_string(weights.size()) +
                              " weights for " + std::to_string(eigenvalues.size()) +
                              " eigenvalues");
        if (n == 0) throw ConfigError("spectral problem: sample count must be positive");
        if (noise_variance < 0.0)
            throw ConfigError("spectral problem: noise variance must be >= 0");
        for (std::size_t i = 0; i < eigenvalues.size(); ++i) {
            if (!(eigenvalues[i] > 0.0))
                throw ConfigError("spectral problem: eigenvalue " + std::to_string(i) +
                                  " = " + format_double(eigenvalues[i]) +
                                  " is not strictly positive");
            if (i > 0 && eigenvalues[i] > eigenvalues[i - 1])
                throw ConfigError("spectral problem: eigenvalues not sorted descending at " +
                                  std::to_string(i));
        }
    }
};

namespace detail {

// g(beta) = sum_i lambda_i / (beta + N lambda_i) - 1. Strictly decreasing in
// beta on (-N lambda_min, inf), from +inf down to -1, so the root is unique.
inline double beta_gap(const SpectralProblem& p, double beta) {
    double sum = 0.0;
    const double n = static_cast<double>(p.n);
    for (double lam : p.eigenvalues) sum += lam / (beta + n * lam);
    return sum - 1.0;
}

}  // namespace detail

// Unique root of sum_i lambda_i / (beta + N lambda_i) = 1 on
// (-N lambda_min, inf). Bisection runs until the bracket collapses to
// adjacent doubles, so the answer is exact to roundoff.
inline double solve_beta(const SpectralProblem& p) {
    p.validate();
    const double n = static_cast<double>(p.n);
    const double lam_min = p.eigenvalues.back();

    const std::size_t cap = 10000;

    // Left edge: g -> +inf as beta -> -N lambda_min from above. Walk toward
    // the pole until g goes positive.
    double lo = -n * lam_min;
    double step = std::max(1.0, std::abs(lo)) * 1e-3;
    for (std::size_t it = 0;; ++it) {
        if (detail::beta_gap(p, lo + step) > 0.0) break;
        step *= 0.5;
        if (it >= cap || lo + step == lo)
            throw NumericalError("solve_beta: no positive gap approaching the pole (bracket [" +
                                 format_double(lo) + ", " + format_double(lo + step) + "])");
    }
    lo += step;

    // Right edge: g -> -1 at infinity, double until negative.
    double hi = std::max(1.0, std::abs(lo)) * 2.0;
    for (std::size_t it = 0;; ++it) {
        if (detail::beta_gap(p, hi) < 0.0) break;
        hi *= 2.0;
        if (it >= cap || !std::isfinite(hi))
            throw NumericalError("solve_beta: no sign change found (bracket [" +
                                 format_double(lo) + ", " + format_double(hi) + "])");
    }

    // Bisect until the bracket collapses to adjacent doubles.
    for (std::size_t it = 0; it <= cap; ++it) {
        const double mid = lo + 0.5 * (hi - lo);
        if (mid == lo || mid == hi) break;
        if (detail::beta_gap(p, mid) > 0.0)
            lo = mid;
        else
            hi = mid;
    }
    return lo + 0.5 * (hi - lo);
}

// epsilon = sum_i N lambda_i^2 / (beta + N lambda_i)^2. The loss formula has
// a 1/(1 - epsilon) prefactor, so epsilon >= 1 is outside the regime where
// the expression means anything.
inline double compute_epsilon(const SpectralProblem& p, double beta) {
    const double n = static_cast<double>(p.n);
    double eps = 0.0;
    for (double lam : p.eigenvalues) {
        const double denom = beta + n * lam;
        eps += n * lam * lam / (denom * denom);
    }
    if (eps >= 1.0)
        throw DomainError("generalization loss undefined: epsilon = " + format_double(eps) +
                          " >= 1");
    return eps;
}

struct GenLossReport {
    double beta = 0.0;
    double epsilon = 0.0;
    double loss = 0.0;
    double term_bias = 0.0;   // weight-dependent part
    double term_noise = 0.0;  // noise-variance part
    double residual = 0.0;    // self-consistency gap at the solved beta
};

// loss = 1/(1-eps) sum_i lambda_i w_i^2 (beta / (beta + N lambda_i))^2
//      + eps/(1-eps) sigma^2
inline GenLossReport generalization_loss(const SpectralProblem& p) {
    GenLossReport r;
    r.beta = solve_beta(p);
    r.residual = detail::beta_gap(p, r.beta);
    if (std::abs(r.residual) > 1e-10)
        throw NumericalError("generalization_loss: beta residual " + format_double(r.residual) +
                             " exceeds 1e-10");
    r.epsilon = compute_epsilon(p, r.beta);

    const double n = static_cast<double>(p.n);
    double bias = 0.0;
    for (std::size_t i = 0; i < p.eigenvalues.size(); ++i) {
        const double lam = p.eigenvalues[i];
        const double shrink = r.beta / (r.beta + n * lam);
        bias += lam * p.weights[i] * p.weights[i] * shrink * shrink;
    }
    r.term_bias = bias / (1.0 - r.epsilon);
    r.term_noise = r.epsilon / (1.0 - r.epsilon) * p.noise_variance;
    r.loss = r.term_bias + r.term_noise;
    return r;
}

inline nlohmann::json genloss_report_json(const SpectralProblem& p, const GenLossReport& r) {
    return nlohmann::json{{"modes", p.eigenvalues.size()},
                          {"samples", p.n},
                          {"noise_variance", p.noise_variance},
                          {"beta", r.beta},
                          {"epsilon", r.epsilon},
                          {"loss", r.loss},
                          {"residual", r.residual},
                          {"term_bias", r.term_bias},
                          {"term_noise", r.term_noise}};
}

}  // namespace ntklab
