#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ntklab/io.hpp"
#include "ntklab/linalg.hpp"
#include "ntklab/matrix.hpp"
#include "ntklab/network.hpp"
#include "ntklab/parallel.hpp"

namespace ntklab {

// Which parameter block the tangent kernel ranges over.
enum class NtkRestriction { AllParams, LinearHead };

inline NtkRestriction parse_restriction(const std::string& s) {
    if (s == "all") return NtkRestriction::AllParams;
    if (s == "linear") return NtkRestriction::LinearHead;
    throw ConfigError("restriction must be 'all' or 'linear', got '" + s + "'");
}

// Symmetric PSD tangent-kernel Gram matrix. Symmetry is checked (1e-9
// absolute) and then enforced exactly; positive semidefiniteness is checked
// when the spectrum is first requested (eigenvalues above -1e-8).
class NtkMatrix {
public:
    NtkMatrix() = default;

    explicit NtkMatrix(Matrix gram, double width_scale = 1.0)
        : gram_(std::move(gram)), width_scale_(width_scale) {
        if (gram_.rows() != gram_.cols())
            throw DimensionError("NtkMatrix: gram matrix must be square");
        require_finite(gram_, "NtkMatrix");
        if (max_asymmetry(gram_) > 1e-9)
            throw NumericalError("NtkMatrix: gram matrix is not symmetric within 1e-9");
        for (std::size_t i = 0; i < gram_.rows(); ++i)
            for (std::size_t j = i + 1; j < gram_.cols(); ++j) {
                const double v = 0.5 * (gram_(i, j) + gram_(j, i));
                gram_(i, j) = v;
                gram_(j, i) = v;
            }
    }

    const Matrix& gram() const { return gram_; }
    std::size_t size() const { return gram_.rows(); }
    double width_scale() const { return width_scale_; }

    const EigenDecomposition& spectrum() const {
        if (!spectrum_) {
            spectrum_ = sym_eig(gram_);
            if (spectrum_->eigenvalues.back() < -1e-8)
                throw NumericalError("NtkMatrix: kernel is not positive semidefinite (lambda_min " +
                                     format_double(spectrum_->eigenvalues.back()) + ")");
        }
        return *spectrum_;
    }

    double lambda_max() const { return spectrum().eigenvalues.front(); }
    double lambda_min() const { return spectrum().eigenvalues.back(); }

    double condition_number() const { return lambda_max() / std::max(lambda_min(), 1e-12); }

private:
    Matrix gram_;
    double width_scale_ = 1.0;
    mutable std::optional<EigenDecomposition> spectrum_;
};

namespace detail {

// Multi-output kernels reduce over output coordinates:
//   K(a, b) = sum_q < d f_q(a)/d theta , d f_q(b)/d theta >.
inline Matrix ntk_from_jacobians(const Matrix& ja, const Matrix& jb, std::size_t pdim) {
    const std::size_t na = ja.rows() / pdim;
    const std::size_t nb = jb.rows() / pdim;
    Matrix k(na, nb);
    parallel_for(na, [&](std::size_t i) {
        for (std::size_t j = 0; j < nb; ++j) {
            double s = 0.0;
            for (std::size_t q = 0; q < pdim; ++q)
                s += dot(ja.row(i * pdim + q), jb.row(j * pdim + q), ja.cols());
            k(i, j) = s;
        }
    });
    return k;
}

// Restricted to the final dense layer, the per-output gradient is the scaled
// embedding in that output's weight row plus sigma_b in its bias entry, so
// the kernel collapses to an affine function of the embedding Gram matrix:
//   K(a, b) = p * (sigma_w^2 / Z) * <e_a, e_b> + p * sigma_b^2.
inline Matrix linear_head_gram(const ModelParams& params, const Matrix& ea, const Matrix& eb) {
    const double z = static_cast<double>(params.spec.embedding_dim());
    const double p = static_cast<double>(params.spec.output_dim);
    const double cw = p * params.spec.sigma_w * params.spec.sigma_w / z;
    const double cb = p * params.spec.sigma_b * params.spec.sigma_b;
    Matrix k = multiply_nt(ea, eb);
    for (double& v : k.data()) v = cw * v + cb;
    return k;
}

}  // namespace detail

// Tangent kernel of the model at its current parameters over one sample set.
// width_normalize divides by |theta|, giving the per-parameter convention;
// the default is the raw Gram of Jacobians.
inline NtkMatrix empirical_ntk(const ModelParams& params, const Matrix& x,
                               NtkRestriction restrict_to = NtkRestriction::AllParams,
                               bool width_normalize = false) {
    if (x.rows() == 0) throw DimensionError("empirical_ntk: empty sample set");
    Matrix k;
    if (restrict_to == NtkRestriction::LinearHead) {
        const ForwardTrace t = forward_trace(params, x);
        const Matrix& e = t.embedding(params.spec);
        k = detail::linear_head_gram(params, e, e);
    } else {
        const Matrix j = jacobian(params, x);
        k = detail::ntk_from_jacobians(j, j, params.spec.output_dim);
    }
    double scale = 1.0;
    if (width_normalize) {
        scale = 1.0 / static_cast<double>(params.layout.total);
        scale_in_place(k, scale);
    }
    // Exact symmetry can still be off in the last bit when row blocks are
    // assembled independently; fold before the invariant check.
    for (std::size_t i = 0; i < k.rows(); ++i)
        for (std::size_t j = i + 1; j < k.cols(); ++j) {
            const double v = 0.5 * (k(i, j) + k(j, i));
            k(i, j) = v;
            k(j, i) = v;
        }
    return NtkMatrix(std::move(k), scale);
}

// Rectangular kernel block between two sample sets (rows: xa, cols: xb).
inline Matrix empirical_ntk_cross(const ModelParams& params, const Matrix& xa, const Matrix& xb,
                                  NtkRestriction restrict_to = NtkRestriction::AllParams,
                                  bool width_normalize = false) {
    if (xa.rows() == 0 || xb.rows() == 0)
        throw DimensionError("empirical_ntk_cross: empty sample set");
    Matrix k;
    if (restrict_to == NtkRestriction::LinearHead) {
        const ForwardTrace ta = forward_trace(params, xa);
        const ForwardTrace tb = forward_trace(params, xb);
        k = detail::linear_head_gram(params, ta.embedding(params.spec), tb.embedding(params.spec));
    } else {
        const Matrix ja = jacobian(params, xa);
        const Matrix jb = jacobian(params, xb);
        k = detail::ntk_from_jacobians(ja, jb, params.spec.output_dim);
    }
    if (width_normalize) scale_in_place(k, 1.0 / static_cast<double>(params.layout.total));
    return k;
}

// Closed-form prediction of the fully trained function under frozen-kernel
// dynamics: f(x) = f0(x) + K(x, X) (K(X, X) + ridge I)^{-1} (Y - f0(X)).
inline Matrix ntk_regression_predict(const NtkMatrix& k_train, const Matrix& k_cross,
                                     const Matrix& f0_train, const Matrix& f0_test,
                                     const Matrix& y_train, double ridge = 1e-6) {
    const std::size_t n = k_train.size();
    if (!(ridge >= 0.0)) throw ConfigError("ntk_regression_predict: ridge must be >= 0");
    if (k_cross.cols() != n) throw DimensionError("ntk_regression_predict: cross block width");
    if (y_train.rows() != n || f0_train.rows() != n)
        throw DimensionError("ntk_regression_predict: train row counts disagree");
    if (f0_test.rows() != k_cross.rows() || f0_test.cols() != y_train.cols() ||
        f0_train.cols() != y_train.cols())
        throw DimensionError("ntk_regression_predict: output shapes disagree");

    Matrix system = k_train.gram();
    for (std::size_t i = 0; i < n; ++i) system(i, i) += ridge;
    const Matrix residual = add_scaled(y_train, f0_train, -1.0);
    Matrix coeff;
    try {
        coeff = solve_spd(system, residual);
    } catch (const NumericalError& e) {
        if (ridge == 0.0)
            throw NumericalError(std::string(e.what()) +
                                 "; kernel system is singular, retry with a positive ridge");
        throw;
    }
    return add_scaled(f0_test, multiply(k_cross, coeff), 1.0);
}

namespace detail {

// Apply T(K, time) = K^{-1} (I - exp(-rate * K * time)) to a matrix of
// columns, through the eigenbasis of K + ridge I. The ratio has a finite
// limit rate * time as an eigenvalue approaches zero; evaluate by series
// there so near-singular kernels stay exact instead of blowing up.
inline Matrix inverse_expm1_apply(const Matrix& kernel, double rate, double time, double ridge,
                                  const Matrix& rhs) {
    if (kernel.rows() != kernel.cols()) throw DimensionError("operator kernel must be square");
    if (kernel.rows() != rhs.rows()) throw DimensionError("operator rhs rows disagree");
    Matrix system = kernel;
    for (std::size_t i = 0; i < system.rows(); ++i) system(i, i) += ridge;
    const EigenDecomposition e = sym_eig(system);
    const double top = std::max(1.0, std::abs(e.eigenvalues.front()));
    if (ridge == 0.0 && e.eigenvalues.back() <= 1e-12 * top)
        throw NumericalError(
            "meta kernel operator: kernel block is singular, retry with a positive ridge");
    const Matrix vt_rhs = multiply_tn(e.eigenvectors, rhs);
    Matrix scaled = vt_rhs;
    for (std::size_t i = 0; i < scaled.rows(); ++i) {
        const double lam = e.eigenvalues[i];
        const double xarg = rate * lam * time;
        double ratio;
        if (std::abs(xarg) < 1e-8) {
            ratio = rate * time * (1.0 - 0.5 * xarg);
        } else {
            ratio = (1.0 - std::exp(-xarg)) / lam;
        }
        for (std::size_t j = 0; j < scaled.cols(); ++j) scaled(i, j) *= ratio;
    }
    return multiply(e.eigenvectors, scaled);
}

}  // namespace detail

// Kernel evaluator between two sample sets; plugs either an empirical
// tangent kernel or an analytic one into the meta predictor.
using KernelFn = std::function<Matrix(const Matrix&, const Matrix&)>;

// Labelled task from the meta-training bank.
struct MetaTask {
    Matrix query_x;
    Matrix query_y;
    Matrix support_x;
    Matrix support_y;
};

// Meta-output of an inner-loop-adapted learner after outer training:
//   F(query) = G_tau(query | support)
//            + [ K(eval, bank) T(K(bank, bank), t) (Y_bank - G_tau(bank)) ]_query
// where G_tau(a | S) = K(a, S) T(K(S, S), tau) Y_S is the inner adaptation
// run for time tau, the bank stacks the task's query points over its support
// points, eval stacks the requested queries over the current support, and
// only the query rows of the correction are returned. t = 0 leaves the inner
// predictor untouched; tau = 0 leaves only the outer correction.
inline Matrix meta_ntk_predict(const KernelFn& phi, const Matrix& query_x,
                               const Matrix& support_x, const Matrix& support_y,
                               const MetaTask& bank, double tau, double train_time, double rate,
                               double ridge = 1e-6) {
    if (support_x.rows() != support_y.rows())
        throw DimensionError("meta_ntk_predict: support labels disagree with support points");
    if (bank.query_x.rows() != bank.query_y.rows() ||
        bank.support_x.rows() != bank.support_y.rows())
        throw DimensionError("meta_ntk_predict: task bank labels disagree with its points");
    if (support_y.cols() != bank.query_y.cols() || support_y.cols() != bank.support_y.cols())
        throw DimensionError("meta_ntk_predict: label widths disagree");
    if (!(rate > 0.0)) throw ConfigError("meta_ntk_predict: rate must be positive");
    if (!(tau >= 0.0) || !(train_time >= 0.0))
        throw ConfigError("meta_ntk_predict: times must be non-negative");

    const auto inner = [&](const Matrix& at_x, const Matrix& sx, const Matrix& sy) {
        const Matrix coeff = detail::inverse_expm1_apply(phi(sx, sx), rate, tau, ridge, sy);
        return multiply(phi(at_x, sx), coeff);
    };

    const std::size_t nq = query_x.rows();

    // Stack bank query over bank support; predictions and labels line up row-wise.
    const Matrix bank_x = vstack(bank.query_x, bank.support_x);
    const Matrix bank_y = vstack(bank.query_y, bank.support_y);
    const Matrix bank_residual =
        add_scaled(bank_y, inner(bank_x, bank.support_x, bank.support_y), -1.0);

    const Matrix eval_x = vstack(query_x, support_x);

    const Matrix outer_coeff = detail::inverse_expm1_apply(phi(bank_x, bank_x), rate, train_time,
                                                           ridge, bank_residual);
    const Matrix correction = multiply(phi(eval_x, bank_x), outer_coeff);

    Matrix out = inner(query_x, support_x, support_y);
    for (std::size_t i = 0; i < nq; ++i)
        for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += correction(i, j);
    return out;
}

// ----- convergence bound --------------------------------------------------

struct ConvergenceStep {
    std::size_t step = 0;
    double loss = 0.0;
    double bound = 0.0;
    bool satisfied = false;
};

// Checks an observed squared-loss trace against the spectral decay bound
//   L_t <= (1 - eta0 * sigma_min / 3)^(2t) * R^2 / 2,
// with eta0 = 2 / (sigma_min + sigma_max) from the initial kernel spectrum
// and R the initial residual 2-norm. A zero sigma_min degenerates the bound
// to the constant R^2 / 2.
struct ConvergenceCheck {
    double eta0 = 0.0;
    double sigma_min = 0.0;
    double sigma_max = 0.0;
    double initial_residual = 0.0;
    std::vector<ConvergenceStep> steps;

    bool all_satisfied() const {
        for (const ConvergenceStep& s : steps)
            if (!s.satisfied) return false;
        return true;
    }
};

inline ConvergenceCheck convergence_bound_check(const std::vector<double>& losses,
                                                const NtkMatrix& ntk0, double initial_residual) {
    if (losses.empty()) throw ConfigError("convergence_bound_check: empty loss trace");
    ConvergenceCheck out;
    out.sigma_max = ntk0.lambda_max();
    out.sigma_min = ntk0.lambda_min();
    out.initial_residual = initial_residual;
    if (!(out.sigma_min + out.sigma_max > 0.0))
        throw NumericalError("convergence_bound_check: spectrum sums to zero, no step size");
    out.eta0 = 2.0 / (out.sigma_min + out.sigma_max);

    const double sigma_floor = std::max(0.0, out.sigma_min);
    const double factor = 1.0 - out.eta0 * sigma_floor / 3.0;
    const double r2_half = 0.5 * initial_residual * initial_residual;
    out.steps.reserve(losses.size());
    for (std::size_t t = 0; t < losses.size(); ++t) {
        ConvergenceStep s;
        s.step = t;
        s.loss = losses[t];
        s.bound = std::pow(factor, 2.0 * static_cast<double>(t)) * r2_half;
        s.satisfied = s.loss <= s.bound + 1e-9 * std::max(1.0, s.bound);
        out.steps.push_back(s);
    }
    return out;
}

// ----- spectrum tracing ---------------------------------------------------

struct SpectrumRecord {
    std::size_t step = 0;
    double lambda_min = 0.0;
    double lambda_max = 0.0;
    double condition_number = 0.0;
    double base_accuracy = 0.0;
};

struct SpectrumTrace {
    std::vector<SpectrumRecord> records;
};

inline SpectrumRecord spectrum_snapshot(const NtkMatrix& ntk, std::size_t step,
                                        double base_accuracy) {
    SpectrumRecord r;
    r.step = step;
    r.lambda_min = ntk.lambda_min();
    r.lambda_max = ntk.lambda_max();
    r.condition_number = ntk.condition_number();
    r.base_accuracy = base_accuracy;
    return r;
}

inline std::string spectrum_trace_csv(const SpectrumTrace& trace) {
    std::string out = "step,lambda_min,lambda_max,condition_number,base_accuracy\n";
    for (const SpectrumRecord& r : trace.records) {
        out += std::to_string(r.step);
        out += ',';
        out += format_double(r.lambda_min);
        out += ',';
        out += format_double(r.lambda_max);
        out += ',';
        out += format_double(r.condition_number);
        out += ',';
        out += format_double(r.base_accuracy);
        out += '\n';
    }
    return out;
}

inline SpectrumTrace parse_spectrum_trace_csv(const std::string& text) {
    SpectrumTrace trace;
    std::istringstream ss(text);
    std::string line;
    bool header = true;
    while (std::getline(ss, line)) {
        if (line.empty()) continue;
        if (header) {
            header = false;
            continue;
        }
        const std::vector<std::string> f = split_csv_line(line);
        if (f.size() != 5) throw ConfigError("spectrum trace: malformed line '" + line + "'");
        SpectrumRecord r;
        r.step = static_cast<std::size_t>(parse_double(f[0]));
        r.lambda_min = parse_double(f[1]);
        r.lambda_max = parse_double(f[2]);
        r.condition_number = parse_double(f[3]);
        r.base_accuracy = parse_double(f[4]);
        trace.records.push_back(r);
    }
    return trace;
}

// Eigenvalues one per line, descending: the exchange format between the
// kernel inspection command and the generalization-loss solver.
inline std::string eigenvalues_csv(const std::vector<double>& eigenvalues) {
    std::string out;
    for (double v : eigenvalues) {
        out += format_double(v);
        out += '\n';
    }
    return out;
}

}  // namespace ntklab
