#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "helpers.hpp"
#include "ntklab/ntk.hpp"

using namespace ntklab;
using testutil::max_abs_diff;

namespace {

NetworkSpec dense_spec(std::size_t in, std::vector<std::size_t> hidden, std::size_t out,
                       double sw = 1.0, double sb = 0.1) {
    NetworkSpec spec;
    spec.input_dim = in;
    spec.hidden_widths = std::move(hidden);
    spec.output_dim = out;
    spec.sigma_w = sw;
    spec.sigma_b = sb;
    return spec;
}

// Trace-reduced Gram of Jacobian rows, written out longhand.
Matrix jjt_oracle(const Matrix& j, std::size_t pdim, std::size_t n) {
    Matrix k(n, n);
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = 0; b < n; ++b) {
            double s = 0.0;
            for (std::size_t q = 0; q < pdim; ++q)
                for (std::size_t c = 0; c < j.cols(); ++c)
                    s += j(a * pdim + q, c) * j(b * pdim + q, c);
            k(a, b) = s;
        }
    return k;
}

// Matrix exponential by scaling and squaring over a plain Taylor series;
// independent of the eigenbasis route used by the library.
Matrix expm_oracle(Matrix a) {
    const std::size_t n = a.rows();
    double bound = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < n; ++j) row += std::abs(a(i, j));
        bound = std::max(bound, row);
    }
    int squarings = 0;
    while (bound > 0.5) {
        scale_in_place(a, 0.5);
        bound *= 0.5;
        ++squarings;
    }
    Matrix result = Matrix::identity(n);
    Matrix term = Matrix::identity(n);
    for (int k = 1; k <= 24; ++k) {
        term = multiply(term, a);
        scale_in_place(term, 1.0 / k);
        result = add_scaled(result, term, 1.0);
    }
    for (int s = 0; s < squarings; ++s) result = multiply(result, result);
    return result;
}

Matrix random_spd(std::size_t n, Rng& rng, double shift) {
    const Matrix g = Matrix::gaussian(n, n, rng);
    Matrix a = multiply_tn(g, g);
    for (std::size_t i = 0; i < n; ++i) a(i, i) += shift;
    return a;
}

}  // namespace

TEST_CASE("empirical kernel equals the jacobian gram") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(4000 + seed);
        const NetworkSpec spec = dense_spec(4, {8, 6}, 3, 1.2, 0.2);
        const ModelParams p = init_params(spec, rng);
        const Matrix x = Matrix::gaussian(5, 4, rng);

        const NtkMatrix k = empirical_ntk(p, x);
        const Matrix j = jacobian(p, x);
        const Matrix want = jjt_oracle(j, 3, 5);
        REQUIRE(frobenius_distance(k.gram(), want) < 1e-10);
        REQUIRE(max_asymmetry(k.gram()) == 0.0);
        REQUIRE(k.lambda_min() >= -1e-8);
    }
}

TEST_CASE("head-restricted kernel matches the head columns of the jacobian") {
    Rng rng(4100);
    const NetworkSpec spec = dense_spec(4, {7}, 3, 1.3, 0.4);
    const ModelParams p = init_params(spec, rng);
    const Matrix x = Matrix::gaussian(6, 4, rng);

    const NtkMatrix k = empirical_ntk(p, x, NtkRestriction::LinearHead);

    const Matrix j = jacobian(p, x);
    const ParamSlice& hw = p.head_weight_slice();
    const ParamSlice& hb = p.head_bias_slice();
    Matrix want(6, 6);
    for (std::size_t a = 0; a < 6; ++a)
        for (std::size_t b = 0; b < 6; ++b) {
            double s = 0.0;
            for (std::size_t q = 0; q < 3; ++q)
                for (const ParamSlice* sl : {&hw, &hb})
                    for (std::size_t c = sl->offset; c < sl->offset + sl->count(); ++c)
                        s += j(a * 3 + q, c) * j(b * 3 + q, c);
            want(a, b) = s;
        }
    REQUIRE(frobenius_distance(k.gram(), want) < 1e-10 * std::max(1.0, frobenius_norm(want)));
}

TEST_CASE("head-restricted kernel ignores the head weights themselves") {
    Rng rng(4200);
    const NetworkSpec spec = dense_spec(4, {6}, 2);
    ModelParams p = init_params(spec, rng);
    const Matrix x = Matrix::gaussian(5, 4, rng);
    const Matrix before = empirical_ntk(p, x, NtkRestriction::LinearHead).gram();

    const ParamSlice& hw = p.head_weight_slice();
    for (std::size_t i = 0; i < hw.count(); ++i) p.theta[hw.offset + i] = rng.normal();
    const ParamSlice& hb = p.head_bias_slice();
    for (std::size_t i = 0; i < hb.count(); ++i) p.theta[hb.offset + i] = rng.normal();

    const Matrix after = empirical_ntk(p, x, NtkRestriction::LinearHead).gram();
    REQUIRE(max_abs_diff(before, after) == 0.0);
}

TEST_CASE("headless network has the affine closed-form kernel") {
    // With no hidden stack every parameter is the head, so both restrictions
    // agree and equal p * (sw^2/d <a,b> + sb^2).
    Rng rng(4300);
    const NetworkSpec spec = dense_spec(5, {}, 3, 1.4, 0.3);
    const ModelParams p = init_params(spec, rng);
    const Matrix x = Matrix::gaussian(4, 5, rng);

    const Matrix all = empirical_ntk(p, x).gram();
    const Matrix lin = empirical_ntk(p, x, NtkRestriction::LinearHead).gram();
    REQUIRE(frobenius_distance(all, lin) < 1e-10 * frobenius_norm(all));

    for (std::size_t a = 0; a < 4; ++a)
        for (std::size_t b = 0; b < 4; ++b) {
            double d = 0.0;
            for (std::size_t c = 0; c < 5; ++c) d += x(a, c) * x(b, c);
            const double want = 3.0 * (1.4 * 1.4 / 5.0 * d + 0.3 * 0.3);
            REQUIRE(lin(a, b) == Catch::Approx(want).margin(1e-12));
        }
}

TEST_CASE("cross blocks transpose consistently and match the square kernel") {
    Rng rng(4400);
    const NetworkSpec spec = dense_spec(4, {6}, 2);
    const ModelParams p = init_params(spec, rng);
    const Matrix xa = Matrix::gaussian(4, 4, rng);
    const Matrix xb = Matrix::gaussian(3, 4, rng);

    for (NtkRestriction r : {NtkRestriction::AllParams, NtkRestriction::LinearHead}) {
        const Matrix ab = empirical_ntk_cross(p, xa, xb, r);
        const Matrix ba = empirical_ntk_cross(p, xb, xa, r);
        REQUIRE(max_abs_diff(ab, transpose(ba)) < 1e-10);
        const Matrix square = empirical_ntk_cross(p, xa, xa, r);
        REQUIRE(max_abs_diff(square, empirical_ntk(p, xa, r).gram()) < 1e-10);
    }
    REQUIRE_THROWS_AS(empirical_ntk_cross(p, Matrix(0, 4), xb), DimensionError);
    REQUIRE_THROWS_AS(empirical_ntk(p, Matrix(0, 4)), DimensionError);
}

TEST_CASE("width normalization divides by the parameter count") {
    Rng rng(4500);
    const NetworkSpec spec = dense_spec(3, {8}, 2);
    const ModelParams p = init_params(spec, rng);
    const Matrix x = Matrix::gaussian(4, 3, rng);
    const Matrix raw = empirical_ntk(p, x).gram();
    const NtkMatrix norm = empirical_ntk(p, x, NtkRestriction::AllParams, true);
    const double n = static_cast<double>(p.layout.total);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j)
            REQUIRE(norm.gram()(i, j) == Catch::Approx(raw(i, j) / n).margin(1e-15));
    REQUIRE(norm.width_scale() == Catch::Approx(1.0 / n));
}

TEST_CASE("kernels of independent inits agree more as width grows") {
    const Matrix x = [&] {
        Rng r(4600);
        return Matrix::gaussian(8, 6, r);
    }();
    const auto distance_at = [&](std::size_t width) {
        const NetworkSpec spec = dense_spec(6, {width}, 2);
        Rng r1(91), r2(92);
        const ModelParams p1 = init_params(spec, r1);
        const ModelParams p2 = init_params(spec, r2);
        const Matrix k1 = empirical_ntk(p1, x, NtkRestriction::AllParams, true).gram();
        const Matrix k2 = empirical_ntk(p2, x, NtkRestriction::AllParams, true).gram();
        return frobenius_distance(k1, k2) / frobenius_norm(k1);
    };
    const double d64 = distance_at(64);
    const double d256 = distance_at(256);
    const double d1024 = distance_at(1024);
    REQUIRE(d64 > d256);
    REQUIRE(d256 > d1024);
}

TEST_CASE("kernel regression interpolates the training data") {
    Rng rng(4700);
    const NetworkSpec spec = dense_spec(4, {12}, 2);
    const ModelParams p = init_params(spec, rng);
    const Matrix x = Matrix::gaussian(6, 4, rng);
    const Matrix y = Matrix::gaussian(6, 2, rng);

    const NtkMatrix k = empirical_ntk(p, x);
    const Matrix cross = empirical_ntk_cross(p, x, x);
    const Matrix f0 = forward(p, x);
    const Matrix pred = ntk_regression_predict(k, cross, f0, f0, y, 0.0);
    REQUIRE(max_abs_diff(pred, y) < 1e-6);
}

TEST_CASE("kernel regression with matching labels returns the prior mean") {
    Rng rng(4800);
    const NetworkSpec spec = dense_spec(3, {8}, 2);
    const ModelParams p = init_params(spec, rng);
    const Matrix x = Matrix::gaussian(5, 3, rng);
    const Matrix xt = Matrix::gaussian(4, 3, rng);
    const Matrix f0 = forward(p, x);
    const Matrix f0t = forward(p, xt);

    const Matrix pred = ntk_regression_predict(empirical_ntk(p, x),
                                               empirical_ntk_cross(p, xt, x), f0, f0t, f0);
    REQUIRE(max_abs_diff(pred, f0t) < 1e-12);
}

TEST_CASE("singular kernel at zero ridge advises a positive ridge") {
    // Exactly rank-one kernel: the second Cholesky pivot vanishes.
    Matrix ones(2, 2);
    for (double& v : ones.data()) v = 1.0;
    const NtkMatrix k(ones);
    const Matrix cross = ones;
    const Matrix f0(2, 1);
    Matrix y(2, 1);
    y(0, 0) = 1.0;
    y(1, 0) = -1.0;
    REQUIRE_THROWS_WITH(ntk_regression_predict(k, cross, f0, f0, y, 0.0),
                        Catch::Matchers::ContainsSubstring("ridge"));
    // A positive ridge recovers.
    const Matrix pred = ntk_regression_predict(k, cross, f0, f0, y, 1e-6);
    REQUIRE(pred.rows() == 2);
    for (double v : pred.data()) REQUIRE(std::isfinite(v));
}

TEST_CASE("ntk matrix rejects malformed grams") {
    REQUIRE_THROWS_AS(NtkMatrix(Matrix(2, 3)), DimensionError);
    Matrix asym(2, 2);
    asym(0, 0) = 1.0;
    asym(1, 1) = 1.0;
    asym(0, 1) = 0.5;
    asym(1, 0) = 0.5 + 1e-6;
    REQUIRE_THROWS_AS(NtkMatrix(asym), NumericalError);

    Matrix indef(2, 2);
    indef(0, 0) = 1.0;
    indef(1, 1) = 1.0;
    indef(0, 1) = 2.0;
    indef(1, 0) = 2.0;
    NtkMatrix k(indef);
    REQUIRE_THROWS_AS(k.spectrum(), NumericalError);
}

TEST_CASE("condition number clamps a vanishing bottom eigenvalue") {
    Matrix ones(2, 2);
    for (double& v : ones.data()) v = 1.0;
    NtkMatrix k(ones);
    REQUIRE(k.lambda_max() == Catch::Approx(2.0));
    REQUIRE(std::abs(k.lambda_min()) < 1e-12);
    REQUIRE(k.condition_number() == Catch::Approx(2.0 / 1e-12));

    Matrix single(1, 1);
    single(0, 0) = 3.5;
    NtkMatrix one(single);
    REQUIRE(one.condition_number() == Catch::Approx(1.0));
}

TEST_CASE("inverse expm1 operator matches a series oracle") {
    Rng rng(5000);
    const std::size_t n = 6;
    const Matrix k = random_spd(n, rng, 0.5);
    const Matrix rhs = Matrix::gaussian(n, 2, rng);
    const double rate = 0.8, time = 0.7;

    const Matrix got = detail::inverse_expm1_apply(k, rate, time, 0.0, rhs);

    Matrix neg = k;
    scale_in_place(neg, -rate * time);
    const Matrix decay = expm_oracle(neg);
    const Matrix residual = add_scaled(rhs, multiply(decay, rhs), -1.0);
    const Matrix want = solve_spd(k, residual);
    REQUIRE(max_abs_diff(got, want) < 1e-8);
}

TEST_CASE("inverse expm1 operator handles near-zero eigenvalues by series") {
    // A rank-one kernel has a zero eigenvalue; the ratio limit there is
    // rate * time, so the operator must stay finite with a ridge of zero
    // denied and a tiny ridge accepted.
    Matrix k(2, 2);
    k(0, 0) = 1.0;
    k(0, 1) = 1.0;
    k(1, 0) = 1.0;
    k(1, 1) = 1.0;
    Matrix rhs(2, 1);
    rhs(0, 0) = 1.0;
    rhs(1, 0) = -1.0;
    REQUIRE_THROWS_AS(detail::inverse_expm1_apply(k, 1.0, 2.0, 0.0, rhs), NumericalError);

    const Matrix got = detail::inverse_expm1_apply(k, 1.0, 2.0, 1e-300, rhs);
    // rhs lies in the null space: the action is the zero-eigenvalue limit.
    REQUIRE(got(0, 0) == Catch::Approx(2.0).epsilon(1e-7));
    REQUIRE(got(1, 0) == Catch::Approx(-2.0).epsilon(1e-7));
}

namespace {

KernelFn dot_kernel() {
    return [](const Matrix& a, const Matrix& b) {
        return multiply_nt(a, b);
    };
}

MetaTask small_bank(Rng& rng, std::size_t dim, std::size_t width) {
    MetaTask bank;
    bank.query_x = Matrix::gaussian(4, dim, rng);
    bank.query_y = Matrix::gaussian(4, width, rng);
    bank.support_x = Matrix::gaussian(3, dim, rng);
    bank.support_y = Matrix::gaussian(3, width, rng);
    return bank;
}

}  // namespace

TEST_CASE("meta predictor with zero outer time is the inner predictor") {
    Rng rng(5100);
    const KernelFn phi = dot_kernel();
    const Matrix qx = Matrix::gaussian(3, 4, rng);
    const Matrix sx = Matrix::gaussian(5, 4, rng);
    const Matrix sy = Matrix::gaussian(5, 2, rng);
    const MetaTask bank = small_bank(rng, 4, 2);

    const double tau = 0.9, rate = 1.2, ridge = 1e-6;
    const Matrix got = meta_ntk_predict(phi, qx, sx, sy, bank, tau, 0.0, rate, ridge);

    const Matrix coeff = detail::inverse_expm1_apply(phi(sx, sx), rate, tau, ridge, sy);
    const Matrix want = multiply(phi(qx, sx), coeff);
    REQUIRE(max_abs_diff(got, want) < 1e-12);
}

TEST_CASE("meta predictor with zero inner time is the outer correction alone") {
    Rng rng(5200);
    const KernelFn phi = dot_kernel();
    const Matrix qx = Matrix::gaussian(2, 3, rng);
    const Matrix sx = Matrix::gaussian(4, 3, rng);
    const Matrix sy = Matrix::gaussian(4, 2, rng);
    const MetaTask bank = small_bank(rng, 3, 2);

    const double t = 1.5, rate = 0.7, ridge = 1e-6;
    const Matrix got = meta_ntk_predict(phi, qx, sx, sy, bank, 0.0, t, rate, ridge);

    const Matrix bank_x = vstack(bank.query_x, bank.support_x);
    const Matrix bank_y = vstack(bank.query_y, bank.support_y);
    const Matrix coeff = detail::inverse_expm1_apply(phi(bank_x, bank_x), rate, t, ridge, bank_y);
    const Matrix eval_x = vstack(qx, sx);
    const Matrix correction = multiply(phi(eval_x, bank_x), coeff);
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j)
            REQUIRE(got(i, j) == Catch::Approx(correction(i, j)).margin(1e-12));
}

TEST_CASE("meta predictor at long inner time matches ridge kernel regression") {
    Rng rng(5300);
    const KernelFn phi = dot_kernel();
    const Matrix qx = Matrix::gaussian(3, 5, rng);
    const Matrix sx = Matrix::gaussian(6, 5, rng);
    const Matrix sy = Matrix::gaussian(6, 2, rng);
    const MetaTask bank = small_bank(rng, 5, 2);

    const double ridge = 1e-6;
    const Matrix got = meta_ntk_predict(phi, qx, sx, sy, bank, 1e8, 0.0, 1.0, ridge);

    Matrix system = phi(sx, sx);
    for (std::size_t i = 0; i < 6; ++i) system(i, i) += ridge;
    const Matrix want = multiply(phi(qx, sx), solve_spd(system, sy));
    REQUIRE(max_abs_diff(got, want) < 1e-8);
}

TEST_CASE("meta predictor scalar case agrees with the closed form") {
    const KernelFn phi = dot_kernel();
    Matrix qx(1, 1), sx(1, 1), sy(1, 1);
    qx(0, 0) = 1.5;
    sx(0, 0) = 2.0;
    sy(0, 0) = 3.0;
    MetaTask bank;
    bank.query_x = Matrix(1, 1);
    bank.query_x(0, 0) = 1.0;
    bank.query_y = Matrix(1, 1);
    bank.query_y(0, 0) = 0.5;
    bank.support_x = Matrix(1, 1);
    bank.support_x(0, 0) = -1.0;
    bank.support_y = Matrix(1, 1);
    bank.support_y(0, 0) = 0.25;

    // The bank gram of a one-dimensional dot kernel is rank one, so a ridge
    // is required; it enters the closed form through the support gram.
    const double tau = 0.3, rate = 0.5, ridge = 1e-9;
    const Matrix got = meta_ntk_predict(phi, qx, sx, sy, bank, tau, 0.0, rate, ridge);
    // k(q,s) * (1 - exp(-rate (k(s,s)+ridge) tau)) / (k(s,s)+ridge) * y
    const double kss = 4.0 + ridge;
    const double want = 3.0 * (1.0 - std::exp(-rate * kss * tau)) / kss * 3.0;
    REQUIRE(got(0, 0) == Catch::Approx(want).margin(1e-12));
}

TEST_CASE("meta predictor validates its inputs") {
    const KernelFn phi = dot_kernel();
    Rng rng(5400);
    const Matrix qx = Matrix::gaussian(2, 3, rng);
    const Matrix sx = Matrix::gaussian(3, 3, rng);
    const Matrix sy = Matrix::gaussian(2, 2, rng);  // wrong row count
    const MetaTask bank = small_bank(rng, 3, 2);
    REQUIRE_THROWS_AS(meta_ntk_predict(phi, qx, sx, sy, bank, 1.0, 1.0, 1.0), DimensionError);

    const Matrix sy_ok = Matrix::gaussian(3, 2, rng);
    REQUIRE_THROWS_AS(meta_ntk_predict(phi, qx, sx, sy_ok, bank, 1.0, 1.0, 0.0), ConfigError);
    REQUIRE_THROWS_AS(meta_ntk_predict(phi, qx, sx, sy_ok, bank, -1.0, 1.0, 1.0), ConfigError);
}

TEST_CASE("convergence bound check reproduces the spectral decay curve") {
    Matrix gram(2, 2);
    gram(0, 0) = 4.0;
    gram(1, 1) = 1.0;
    const NtkMatrix k(gram);
    // sigma_min 1, sigma_max 4: eta0 = 2/5, factor = 1 - (2/5)/3 = 13/15.
    const double r = 3.0;
    const double factor = 13.0 / 15.0;
    std::vector<double> losses;
    for (int t = 0; t < 5; ++t) losses.push_back(0.9 * std::pow(factor, 2.0 * t) * 4.5);

    const ConvergenceCheck c = convergence_bound_check(losses, k, r);
    REQUIRE(c.eta0 == Catch::Approx(0.4));
    REQUIRE(c.sigma_min == Catch::Approx(1.0));
    REQUIRE(c.sigma_max == Catch::Approx(4.0));
    REQUIRE(c.steps.size() == 5);
    for (const ConvergenceStep& s : c.steps) {
        REQUIRE(s.bound == Catch::Approx(std::pow(factor, 2.0 * s.step) * 4.5));
        REQUIRE(s.satisfied);
    }
    REQUIRE(c.all_satisfied());

    // Equality at step zero is allowed; anything above trips the check.
    REQUIRE(convergence_bound_check({4.5}, k, r).all_satisfied());
    REQUIRE_FALSE(convergence_bound_check({4.6}, k, r).all_satisfied());
    REQUIRE_THROWS_AS(convergence_bound_check({}, k, r), ConfigError);
}

TEST_CASE("convergence bound degenerates to a constant when sigma_min is zero") {
    Matrix gram(2, 2);
    gram(0, 0) = 1.0;
    gram(0, 1) = 1.0;
    gram(1, 0) = 1.0;
    gram(1, 1) = 1.0;
    const NtkMatrix k(gram);
    const ConvergenceCheck c = convergence_bound_check({0.5, 0.5, 0.5}, k, 1.0);
    for (const ConvergenceStep& s : c.steps) {
        REQUIRE(s.bound == Catch::Approx(0.5));
        REQUIRE(s.satisfied);
    }
}

TEST_CASE("spectrum traces round-trip through csv") {
    SpectrumTrace trace;
    for (int i = 0; i < 3; ++i) {
        SpectrumRecord r;
        r.step = i * 10;
        r.lambda_min = 0.1 / (i + 1);
        r.lambda_max = 7.25 * (i + 1);
        r.condition_number = r.lambda_max / r.lambda_min;
        r.base_accuracy = 0.5 + 0.01 * i;
        trace.records.push_back(r);
    }
    const std::string csv = spectrum_trace_csv(trace);
    const SpectrumTrace back = parse_spectrum_trace_csv(csv);
    REQUIRE(back.records.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        REQUIRE(back.records[i].step == trace.records[i].step);
        REQUIRE(back.records[i].lambda_min == trace.records[i].lambda_min);
        REQUIRE(back.records[i].lambda_max == trace.records[i].lambda_max);
        REQUIRE(back.records[i].condition_number == trace.records[i].condition_number);
        REQUIRE(back.records[i].base_accuracy == trace.records[i].base_accuracy);
    }
    REQUIRE_THROWS_AS(parse_spectrum_trace_csv("step\n1,2\n"), ConfigError);
}

TEST_CASE("eigenvalue listings round-trip") {
    const std::vector<double> vals{3.5, 1.0 / 3.0, 2.2e-15};
    const std::string csv = eigenvalues_csv(vals);
    std::istringstream ss(csv);
    std::string line;
    std::size_t i = 0;
    while (std::getline(ss, line)) {
        REQUIRE(parse_double(line) == vals[i]);
        ++i;
    }
    REQUIRE(i == vals.size());
}

TEST_CASE("restriction names parse") {
    REQUIRE(parse_restriction("all") == NtkRestriction::AllParams);
    REQUIRE(parse_restriction("linear") == NtkRestriction::LinearHead);
    REQUIRE_THROWS_AS(parse_restriction("bogus"), ConfigError);
}
