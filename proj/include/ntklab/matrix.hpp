#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "ntklab/errors.hpp"
#include "ntklab/rng.hpp"

namespace ntklab {

// Dense row-major matrix of doubles. This is deliberately a small value type:
// the whole laboratory runs at desk scale, so clarity beats BLAS plumbing.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    static Matrix gaussian(std::size_t rows, std::size_t cols, Rng& rng) {
        Matrix m(rows, cols);
        for (double& v : m.data_) v = rng.normal();
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    double* row(std::size_t i) { return data_.data() + i * cols_; }
    const double* row(std::size_t i) const { return data_.data() + i * cols_; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    Matrix row_block(std::size_t first, std::size_t count) const {
        if (first + count > rows_) throw DimensionError("row_block: range out of bounds");
        Matrix out(count, cols_);
        for (std::size_t i = 0; i < count; ++i)
            for (std::size_t j = 0; j < cols_; ++j) out(i, j) = (*this)(first + i, j);
        return out;
    }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline void require_finite(const Matrix& m, const char* what) {
    if (!m.all_finite()) throw NumericalError(std::string(what) + ": non-finite entries");
}

inline Matrix vstack(const Matrix& top, const Matrix& bottom) {
    if (top.empty()) return bottom;
    if (bottom.empty()) return top;
    if (top.cols() != bottom.cols()) throw DimensionError("vstack: column counts disagree");
    Matrix out(top.rows() + bottom.rows(), top.cols());
    for (std::size_t i = 0; i < top.rows(); ++i)
        for (std::size_t j = 0; j < top.cols(); ++j) out(i, j) = top(i, j);
    for (std::size_t i = 0; i < bottom.rows(); ++i)
        for (std::size_t j = 0; j < bottom.cols(); ++j) out(top.rows() + i, j) = bottom(i, j);
    return out;
}

// C = A * B
inline Matrix multiply(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw DimensionError("multiply: inner dimensions disagree");
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* ci = c.row(i);
        const double* ai = a.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = ai[k];
            if (aik == 0.0) continue;
            const double* bk = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) ci[j] += aik * bk[j];
        }
    }
    return c;
}

// C = A * B^T; both operands stream row-wise, the workhorse product here.
inline Matrix multiply_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) throw DimensionError("multiply_nt: column counts disagree");
    Matrix c(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* ai = a.row(i);
        for (std::size_t j = 0; j < b.rows(); ++j) {
            const double* bj = b.row(j);
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += ai[k] * bj[k];
            c(i, j) = s;
        }
    }
    return c;
}

// C = A^T * B
inline Matrix multiply_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) throw DimensionError("multiply_tn: row counts disagree");
    Matrix c(a.cols(), b.cols());
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const double* ak = a.row(k);
        const double* bk = b.row(k);
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = ak[i];
            if (aki == 0.0) continue;
            double* ci = c.row(i);
            for (std::size_t j = 0; j < b.cols(); ++j) ci[j] += aki * bk[j];
        }
    }
    return c;
}

inline Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

inline Matrix add_scaled(const Matrix& a, const Matrix& b, double scale) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw DimensionError("add_scaled: shapes disagree");
    Matrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] += scale * b.data()[i];
    return c;
}

inline void scale_in_place(Matrix& a, double s) {
    for (double& v : a.data()) v *= s;
}

inline double frobenius_norm(const Matrix& a) {
    double s = 0.0;
    for (double v : a.data()) s += v * v;
    return std::sqrt(s);
}

inline double frobenius_distance(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw DimensionError("frobenius_distance: shapes disagree");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a.data()[i] - b.data()[i];
        s += d * d;
    }
    return std::sqrt(s);
}

inline double max_abs(const Matrix& a) {
    double m = 0.0;
    for (double v : a.data()) m = std::max(m, std::abs(v));
    return m;
}

inline double max_asymmetry(const Matrix& a) {
    if (a.rows() != a.cols()) throw DimensionError("max_asymmetry: matrix not square");
    double m = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = i + 1; j < a.cols(); ++j)
            m = std::max(m, std::abs(a(i, j) - a(j, i)));
    return m;
}

inline double dot(const double* a, const double* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t k = 0; k < n; ++k) s += a[k] * b[k];
    return s;
}

inline double norm2(const double* a, std::size_t n) { return std::sqrt(dot(a, a, n)); }

}  // namespace ntklab
