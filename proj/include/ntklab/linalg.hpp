#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "ntklab/matrix.hpp"

namespace ntklab {

// Eigenvalues descending; column j of `eigenvectors` pairs with eigenvalues[j].
struct EigenDecomposition {
    std::vector<double> eigenvalues;
    Matrix eigenvectors;
};

// Symmetric eigendecomposition by cyclic Jacobi rotations. Chosen over a
// faster tridiagonal route on purpose: the sweep order is fixed, every step is
// elementary arithmetic, and results are reproducible to the last bit across
// platforms. Quadratic convergence keeps desk-scale inputs cheap anyway.
inline EigenDecomposition sym_eig(const Matrix& m, double symmetry_tol = 1e-10) {
    if (m.rows() != m.cols()) throw DimensionError("sym_eig: matrix must be square");
    if (m.empty()) throw DimensionError("sym_eig: matrix must be non-empty");
    const std::size_t n = m.rows();
    if (max_asymmetry(m) > symmetry_tol)
        throw DimensionError("sym_eig: matrix is not symmetric within tolerance");

    Matrix a = m;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double v = 0.5 * (a(i, j) + a(j, i));
            a(i, j) = v;
            a(j, i) = v;
        }
    Matrix v = Matrix::identity(n);

    const auto off_norm = [&]() {
        double s = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) s += a(p, q) * a(p, q);
        return std::sqrt(2.0 * s);
    };

    const double stop = 1e-15 * std::max(1.0, frobenius_norm(a));
    for (int sweep = 0; sweep < 128 && off_norm() > stop; ++sweep) {
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (std::abs(apq) <= 1e-300) {
                    a(p, q) = 0.0;
                    a(q, p) = 0.0;
                    continue;
                }
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                double t;
                if (std::abs(theta) > 1e12) {
                    t = 1.0 / (2.0 * theta);
                } else {
                    t = 1.0 / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                    if (theta < 0.0) t = -t;
                }
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                const double tau = s / (1.0 + c);

                a(p, p) -= t * apq;
                a(q, q) += t * apq;
                a(p, q) = 0.0;
                a(q, p) = 0.0;
                for (std::size_t r = 0; r < n; ++r) {
                    if (r == p || r == q) continue;
                    const double arp = a(r, p);
                    const double arq = a(r, q);
                    a(r, p) = arp - s * (arq + tau * arp);
                    a(p, r) = a(r, p);
                    a(r, q) = arq + s * (arp - tau * arq);
                    a(q, r) = a(r, q);
                }
                for (std::size_t r = 0; r < n; ++r) {
                    const double vrp = v(r, p);
                    const double vrq = v(r, q);
                    v(r, p) = vrp - s * (vrq + tau * vrp);
                    v(r, q) = vrq + s * (vrp - tau * vrq);
                }
            }
        }
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });

    EigenDecomposition out;
    out.eigenvalues.resize(n);
    out.eigenvectors = Matrix(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        out.eigenvalues[j] = a(order[j], order[j]);
        for (std::size_t r = 0; r < n; ++r) out.eigenvectors(r, j) = v(r, order[j]);
    }
    require_finite(out.eigenvectors, "sym_eig");
    return out;
}

// Singular values descending, computed from the smaller Gram matrix. Negative
// Gram eigenvalues are roundoff and clamp to zero before the square root.
inline std::vector<double> svd_singular_values(const Matrix& m) {
    if (m.empty()) throw DimensionError("svd_singular_values: matrix must be non-empty");
    const Matrix gram = (m.cols() <= m.rows()) ? multiply_tn(m, m) : multiply_nt(m, m);
    EigenDecomposition e = sym_eig(gram);
    std::vector<double> sv(e.eigenvalues.size());
    for (std::size_t i = 0; i < sv.size(); ++i) sv[i] = std::sqrt(std::max(0.0, e.eigenvalues[i]));
    return sv;
}

// Extreme singular triplets of a rectangular matrix. The vector on the Gram
// side comes from the eigendecomposition; the opposite side is recovered as
// A v / sigma and is empty when sigma is too small to divide by.
struct SvdExtremes {
    double sigma_max = 0.0;
    double sigma_min = 0.0;
    std::vector<double> u_max, v_max;
    std::vector<double> u_min, v_min;
};

inline SvdExtremes svd_extremes(const Matrix& m) {
    if (m.empty()) throw DimensionError("svd_extremes: matrix must be non-empty");
    const bool gram_right = m.cols() <= m.rows();
    const Matrix gram = gram_right ? multiply_tn(m, m) : multiply_nt(m, m);
    EigenDecomposition e = sym_eig(gram);
    const std::size_t k = e.eigenvalues.size();

    SvdExtremes out;
    out.sigma_max = std::sqrt(std::max(0.0, e.eigenvalues.front()));
    out.sigma_min = std::sqrt(std::max(0.0, e.eigenvalues.back()));

    const auto column = [&](std::size_t j) {
        std::vector<double> c(k);
        for (std::size_t r = 0; r < k; ++r) c[r] = e.eigenvectors(r, j);
        return c;
    };
    const auto other_side = [&](const std::vector<double>& g, double sigma) {
        std::vector<double> o;
        if (sigma <= 1e-12) return o;
        const std::size_t on = gram_right ? m.rows() : m.cols();
        o.assign(on, 0.0);
        for (std::size_t i = 0; i < m.rows(); ++i)
            for (std::size_t j = 0; j < m.cols(); ++j) {
                if (gram_right)
                    o[i] += m(i, j) * g[j];
                else
                    o[j] += m(i, j) * g[i];
            }
        for (double& x : o) x /= sigma;
        return o;
    };

    std::vector<double> g_max = column(0);
    std::vector<double> g_min = column(k - 1);
    if (gram_right) {
        out.v_max = g_max;
        out.v_min = g_min;
        out.u_max = other_side(g_max, out.sigma_max);
        out.u_min = other_side(g_min, out.sigma_min);
    } else {
        out.u_max = g_max;
        out.u_min = g_min;
        out.v_max = other_side(g_max, out.sigma_max);
        out.v_min = other_side(g_min, out.sigma_min);
    }
    return out;
}

// Cholesky solve for symmetric positive definite systems, multi-RHS.
inline Matrix solve_spd(const Matrix& a, const Matrix& b) {
    if (a.rows() != a.cols()) throw DimensionError("solve_spd: matrix must be square");
    if (a.rows() != b.rows()) throw DimensionError("solve_spd: rhs row count disagrees");
    const std::size_t n = a.rows();

    Matrix l(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        double d = a(j, j);
        for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
        if (!(d > 0.0))
            throw NumericalError("solve_spd: Cholesky pivot " + std::to_string(j) +
                                 " is not positive; matrix is not positive definite");
        l(j, j) = std::sqrt(d);
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = a(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            l(i, j) = s / l(j, j);
        }
    }

    Matrix x = b;
    for (std::size_t c = 0; c < b.cols(); ++c) {
        for (std::size_t i = 0; i < n; ++i) {
            double s = x(i, c);
            for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * x(k, c);
            x(i, c) = s / l(i, i);
        }
        for (std::size_t ii = n; ii > 0; --ii) {
            const std::size_t i = ii - 1;
            double s = x(i, c);
            for (std::size_t k = i + 1; k < n; ++k) s -= l(k, i) * x(k, c);
            x(i, c) = s / l(i, i);
        }
    }
    require_finite(x, "solve_spd");
    return x;
}

inline std::vector<double> solve_spd(const Matrix& a, const std::vector<double>& b) {
    Matrix rhs(b.size(), 1);
    for (std::size_t i = 0; i < b.size(); ++i) rhs(i, 0) = b[i];
    Matrix x = solve_spd(a, rhs);
    std::vector<double> out(b.size());
    for (std::size_t i = 0; i < b.size(); ++i) out[i] = x(i, 0);
    return out;
}

}  // namespace ntklab
