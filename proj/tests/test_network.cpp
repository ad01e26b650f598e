#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "helpers.hpp"
#include "ntklab/network.hpp"

using namespace ntklab;
using testutil::max_abs_diff;
using testutil::rel_err;

namespace {

// Layer-by-layer forward written independently of forward_trace: plain loops,
// no shared code beyond the parameter layout.
Matrix dense_forward_oracle(const ModelParams& p, const Matrix& x) {
    const NetworkSpec& spec = p.spec;
    Matrix h = x;
    for (std::size_t l = 0; l < spec.dense_layer_count(); ++l) {
        const std::size_t in = spec.dense_in_dim(l), out = spec.dense_out_dim(l);
        const ParamSlice& ws = p.layout.find(ParamKind::DenseWeight, l);
        const ParamSlice& bs = p.layout.find(ParamKind::DenseBias, l);
        const double* w = p.slice_data(ws);
        const double* b = p.slice_data(bs);
        Matrix next(h.rows(), out);
        for (std::size_t s = 0; s < h.rows(); ++s)
            for (std::size_t r = 0; r < out; ++r) {
                double u = 0.0;
                for (std::size_t c = 0; c < in; ++c) u += w[r * in + c] * h(s, c);
                u = spec.sigma_w * u / std::sqrt(static_cast<double>(in)) + spec.sigma_b * b[r];
                if (l + 1 < spec.dense_layer_count() && u < 0.0) u = 0.0;
                next(s, r) = u;
            }
        h = std::move(next);
    }
    return h;
}

double cotangent_value(const ModelParams& p, const Matrix& x, const Matrix* cot_out,
                       const Matrix* cot_emb) {
    const ForwardTrace t = forward_trace(p, x);
    double v = 0.0;
    if (cot_out) {
        const Matrix& f = t.output();
        for (std::size_t i = 0; i < f.rows(); ++i)
            for (std::size_t j = 0; j < f.cols(); ++j) v += (*cot_out)(i, j) * f(i, j);
    }
    if (cot_emb) {
        const Matrix& e = t.embedding(p.spec);
        for (std::size_t i = 0; i < e.rows(); ++i)
            for (std::size_t j = 0; j < e.cols(); ++j) v += (*cot_emb)(i, j) * e(i, j);
    }
    return v;
}

using testutil::safe_gaussian_input;

NetworkSpec small_conv_spec() {
    NetworkSpec spec;
    ConvLayerSpec c;
    c.out_channels = 2;
    c.in_channels = 1;
    c.kernel_h = 2;
    c.kernel_w = 2;
    c.image_h = 3;
    c.image_w = 3;
    spec.conv_front = {c};
    spec.input_dim = c.input_size();
    spec.hidden_widths = {4};
    spec.output_dim = 2;
    spec.sigma_w = 1.1;
    spec.sigma_b = 0.2;
    return spec;
}

}  // namespace

TEST_CASE("param_count matches hand counts") {
    NetworkSpec spec;
    spec.input_dim = 2;
    spec.hidden_widths = {4};
    spec.output_dim = 3;
    // dense0: 4x2 + 4 = 12, head: 3x4 + 3 = 15.
    REQUIRE(spec.param_count() == 27);
    REQUIRE(spec.embedding_dim() == 4);

    const NetworkSpec conv = small_conv_spec();
    // conv: 2x4 + 2 = 10, dense0: 4x8 + 4 = 36, head: 2x4 + 2 = 10.
    REQUIRE(conv.param_count() == 56);
    REQUIRE(build_layout(conv).total == conv.param_count());
}

TEST_CASE("layout tiles theta contiguously and pins the head") {
    const NetworkSpec spec = small_conv_spec();
    const ParamLayout layout = build_layout(spec);
    std::size_t expect = 0;
    for (const ParamSlice& s : layout.slices) {
        REQUIRE(s.offset == expect);
        expect += s.count();
    }
    REQUIRE(expect == layout.total);

    const ParamSlice& hw = layout.slices[layout.head_weight];
    REQUIRE(hw.kind == ParamKind::DenseWeight);
    REQUIRE(hw.rows == spec.output_dim);
    REQUIRE(hw.cols == spec.embedding_dim());
    const ParamSlice& hb = layout.slices[layout.head_bias];
    REQUIRE(hb.kind == ParamKind::DenseBias);
    REQUIRE(hb.rows == spec.output_dim);
}

TEST_CASE("dense forward matches an independent loop oracle") {
    NetworkSpec spec;
    spec.input_dim = 5;
    spec.hidden_widths = {7, 6};
    spec.output_dim = 3;
    spec.sigma_w = 1.3;
    spec.sigma_b = 0.25;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(1000 + seed);
        const ModelParams p = init_params(spec, rng);
        const Matrix x = Matrix::gaussian(4, 5, rng);
        REQUIRE(max_abs_diff(forward(p, x), dense_forward_oracle(p, x)) < 1e-12);
    }
}

TEST_CASE("zero hidden layers reduce to a scaled affine map") {
    NetworkSpec spec;
    spec.input_dim = 3;
    spec.hidden_widths = {};
    spec.output_dim = 2;
    spec.sigma_w = 2.0;
    spec.sigma_b = 0.5;
    Rng rng(2000);
    const ModelParams p = init_params(spec, rng);
    const Matrix x = Matrix::gaussian(3, 3, rng);
    const Matrix f = forward(p, x);
    const double* w = p.slice_data(p.head_weight_slice());
    const double* b = p.slice_data(p.head_bias_slice());
    for (std::size_t s = 0; s < 3; ++s)
        for (std::size_t r = 0; r < 2; ++r) {
            double u = 0.0;
            for (std::size_t c = 0; c < 3; ++c) u += w[r * 3 + c] * x(s, c);
            u = 2.0 * u / std::sqrt(3.0) + 0.5 * b[r];
            REQUIRE(f(s, r) == Catch::Approx(u).margin(1e-14));
        }
    // Embedding of a headless-stack network is the input itself.
    const ForwardTrace t = forward_trace(p, x);
    REQUIRE(max_abs_diff(t.embedding(spec), x) == 0.0);
}

TEST_CASE("relu stack is positively homogeneous in sigma_w") {
    NetworkSpec spec;
    spec.input_dim = 4;
    spec.hidden_widths = {6, 5};
    spec.output_dim = 2;
    spec.sigma_w = 1.0;
    spec.sigma_b = 0.0;
    Rng rng(2100);
    const ModelParams p = init_params(spec, rng);
    NetworkSpec doubled = spec;
    doubled.sigma_w = 2.0;
    const ModelParams p2 = init_params(doubled, p.theta);
    const Matrix x = Matrix::gaussian(3, 4, rng);
    const Matrix f = forward(p, x);
    const Matrix f2 = forward(p2, x);
    // Three affine maps, each linear in sigma_w with zero bias: factor 2^3.
    for (std::size_t i = 0; i < f.rows(); ++i)
        for (std::size_t j = 0; j < f.cols(); ++j)
            REQUIRE(f2(i, j) == Catch::Approx(8.0 * f(i, j)).margin(1e-12));
}

TEST_CASE("conv stage matches a direct convolution") {
    const NetworkSpec spec = small_conv_spec();
    const ConvLayerSpec& c = spec.conv_front[0];
    Rng rng(2200);
    const ModelParams p = init_params(spec, rng);
    const Matrix x = Matrix::gaussian(2, spec.input_dim, rng);
    const ForwardTrace t = forward_trace(p, x);

    const double* w = p.slice_data(p.layout.find(ParamKind::ConvWeight, 0));
    const double* b = p.slice_data(p.layout.find(ParamKind::ConvBias, 0));
    const double scale = spec.sigma_w / std::sqrt(static_cast<double>(c.fan_in()));
    for (std::size_t s = 0; s < 2; ++s)
        for (std::size_t ch = 0; ch < c.out_channels; ++ch)
            for (std::size_t oy = 0; oy < c.out_h(); ++oy)
                for (std::size_t ox = 0; ox < c.out_w(); ++ox) {
                    double u = 0.0;
                    for (std::size_t ic = 0; ic < c.in_channels; ++ic)
                        for (std::size_t ky = 0; ky < c.kernel_h; ++ky)
                            for (std::size_t kx = 0; kx < c.kernel_w; ++kx) {
                                const double wv =
                                    w[ch * c.fan_in() +
                                      (ic * c.kernel_h + ky) * c.kernel_w + kx];
                                const double xv =
                                    x(s, (ic * c.image_h + oy + ky) * c.image_w + ox + kx);
                                u += wv * xv;
                            }
                    u = scale * u + spec.sigma_b * b[ch];
                    const double want = u > 0.0 ? u : 0.0;
                    const double got =
                        t.conv_act[0](s, (ch * c.out_h() + oy) * c.out_w() + ox);
                    REQUIRE(got == Catch::Approx(want).margin(1e-12));
                }
}

TEST_CASE("im2col and col2im_add are adjoint") {
    ConvLayerSpec c;
    c.out_channels = 3;
    c.in_channels = 2;
    c.kernel_h = 2;
    c.kernel_w = 3;
    c.image_h = 5;
    c.image_w = 6;
    Rng rng(2300);
    const Matrix img = Matrix::gaussian(1, c.input_size(), rng);
    Matrix patches(c.out_h() * c.out_w(), c.fan_in());
    detail::im2col(c, img.row(0), patches);

    const Matrix d = Matrix::gaussian(patches.rows(), patches.cols(), rng);
    Matrix back(1, c.input_size());
    detail::col2im_add(c, d, back.row(0));

    double lhs = 0.0;
    for (std::size_t i = 0; i < patches.rows(); ++i)
        for (std::size_t j = 0; j < patches.cols(); ++j) lhs += patches(i, j) * d(i, j);
    double rhs = 0.0;
    for (std::size_t j = 0; j < c.input_size(); ++j) rhs += img(0, j) * back(0, j);
    REQUIRE(lhs == Catch::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("jacobian matches central differences") {
    std::vector<NetworkSpec> specs;
    {
        NetworkSpec a;
        a.input_dim = 3;
        a.hidden_widths = {6, 5};
        a.output_dim = 2;
        a.sigma_w = 1.2;
        a.sigma_b = 0.3;
        specs.push_back(a);
        specs.push_back(small_conv_spec());
        NetworkSpec c;
        c.input_dim = 4;
        c.hidden_widths = {};
        c.output_dim = 3;
        specs.push_back(c);
    }
    for (std::size_t si = 0; si < specs.size(); ++si) {
        Rng rng(3000 + si);
        ModelParams p = init_params(specs[si], rng);
        const Matrix x = safe_gaussian_input(p, 3, rng);
        const Matrix j = jacobian(p, x);
        REQUIRE(j.rows() == 3 * specs[si].output_dim);
        REQUIRE(j.cols() == p.layout.total);
        for (std::size_t i = 0; i < p.layout.total; ++i)
            for (std::size_t s = 0; s < 3; ++s)
                for (std::size_t q = 0; q < specs[si].output_dim; ++q) {
                    const double fd = testutil::fd_theta(
                        p, i, [&] { return forward(p, x)(s, q); });
                    REQUIRE(rel_err(j(s * specs[si].output_dim + q, i), fd) < 1e-4);
                }
    }
}

TEST_CASE("backward contracts cotangents like the jacobian does") {
    const NetworkSpec spec = small_conv_spec();
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        Rng rng(3100 + seed);
        ModelParams p = init_params(spec, rng);
        const Matrix x = safe_gaussian_input(p, 2, rng);
        const Matrix cot_out = Matrix::gaussian(2, spec.output_dim, rng);
        const Matrix cot_emb = Matrix::gaussian(2, spec.embedding_dim(), rng);
        const ForwardTrace t = forward_trace(p, x);

        const std::vector<double> g_out = backward(p, t, &cot_out, nullptr);
        const std::vector<double> g_emb = backward(p, t, nullptr, &cot_emb);
        const std::vector<double> g_both = backward(p, t, &cot_out, &cot_emb);
        for (std::size_t i = 0; i < p.layout.total; ++i) {
            const double fd_out =
                testutil::fd_theta(p, i, [&] { return cotangent_value(p, x, &cot_out, nullptr); });
            const double fd_emb =
                testutil::fd_theta(p, i, [&] { return cotangent_value(p, x, nullptr, &cot_emb); });
            REQUIRE(rel_err(g_out[i], fd_out) < 1e-4);
            REQUIRE(rel_err(g_emb[i], fd_emb) < 1e-4);
            REQUIRE(std::abs(g_both[i] - (g_out[i] + g_emb[i])) < 1e-12);
        }
    }
}

TEST_CASE("jacobian predicts small parameter moves") {
    NetworkSpec spec;
    spec.input_dim = 4;
    spec.hidden_widths = {16, 16};
    spec.output_dim = 3;
    Rng rng(3200);
    ModelParams p = init_params(spec, rng);
    const Matrix x = safe_gaussian_input(p, 5, rng);
    const Matrix j = jacobian(p, x);
    const Matrix f0 = forward(p, x);

    std::vector<double> delta(p.layout.total);
    double norm = 0.0;
    for (double& d : delta) {
        d = rng.normal();
        norm += d * d;
    }
    norm = std::sqrt(norm);
    for (double& d : delta) d *= 1e-3 / norm;

    Matrix predicted(5, 3);
    for (std::size_t r = 0; r < j.rows(); ++r) {
        double s = 0.0;
        for (std::size_t k = 0; k < j.cols(); ++k) s += j(r, k) * delta[k];
        predicted(r / 3, r % 3) = s;
    }
    for (std::size_t i = 0; i < p.layout.total; ++i) p.theta[i] += delta[i];
    const Matrix moved = add_scaled(forward(p, x), f0, -1.0);
    REQUIRE(frobenius_distance(moved, predicted) <
            1e-2 * std::max(frobenius_norm(predicted), 1e-12));
}

TEST_CASE("zero parameters leave only the head bias path alive") {
    NetworkSpec spec;
    spec.input_dim = 3;
    spec.hidden_widths = {4};
    spec.output_dim = 2;
    spec.sigma_b = 0.7;
    ModelParams p = init_params(spec, std::vector<double>(spec.param_count(), 0.0));
    Rng rng(3300);
    const Matrix x = Matrix::gaussian(2, 3, rng);
    const ForwardTrace t = forward_trace(p, x);
    REQUIRE(max_abs(t.output()) == 0.0);

    Matrix cot(2, 2);
    cot(0, 0) = 1.0;
    cot(1, 1) = 2.0;
    const std::vector<double> g = backward(p, t, &cot, nullptr);
    const ParamSlice& hb = p.head_bias_slice();
    for (std::size_t i = 0; i < p.layout.total; ++i) {
        const bool in_head_bias = i >= hb.offset && i < hb.offset + hb.count();
        if (in_head_bias)
            REQUIRE(g[i] == Catch::Approx(0.7 * (i == hb.offset ? 1.0 : 2.0)));
        else
            REQUIRE(g[i] == 0.0);  // ReLU subgradient at exactly 0 is 0
    }
}

TEST_CASE("checkpoints round-trip bit-exact") {
    const NetworkSpec spec = small_conv_spec();
    Rng rng(3400);
    const ModelParams p = init_params(spec, rng);
    const std::string path = "test_ckpt_roundtrip.bin";
    save_checkpoint(path, p);
    const ModelParams q = load_checkpoint(path);
    REQUIRE(q.spec == p.spec);
    REQUIRE(q.theta.size() == p.theta.size());
    for (std::size_t i = 0; i < p.theta.size(); ++i) REQUIRE(q.theta[i] == p.theta[i]);
    std::remove(path.c_str());
}

TEST_CASE("checkpoint loader rejects foreign and truncated files") {
    {
        std::ofstream os("test_ckpt_bad.bin", std::ios::binary);
        os << "JUNKJUNKJUNKJUNK";
    }
    REQUIRE_THROWS_AS(load_checkpoint("test_ckpt_bad.bin"), ConfigError);
    {
        std::ofstream os("test_ckpt_trunc.bin", std::ios::binary);
        os << "NTKP";
    }
    REQUIRE_THROWS_AS(load_checkpoint("test_ckpt_trunc.bin"), NumericalError);
    REQUIRE_THROWS_AS(load_checkpoint("test_ckpt_missing.bin"), NumericalError);
    std::remove("test_ckpt_bad.bin");
    std::remove("test_ckpt_trunc.bin");
}

TEST_CASE("init_params validates the external weight source") {
    NetworkSpec spec;
    spec.input_dim = 2;
    spec.hidden_widths = {3};
    spec.output_dim = 1;
    REQUIRE_THROWS_AS(init_params(spec, std::vector<double>(5, 0.0)), LayoutError);
}

TEST_CASE("forward validates the input width") {
    NetworkSpec spec;
    spec.input_dim = 4;
    spec.output_dim = 2;
    Rng rng(3500);
    const ModelParams p = init_params(spec, rng);
    REQUIRE_THROWS_AS(forward(p, Matrix(2, 3)), DimensionError);
}

TEST_CASE("spec validation rejects inconsistent conv chains") {
    NetworkSpec spec = small_conv_spec();
    spec.input_dim += 1;  // conv no longer covers the input
    REQUIRE_THROWS_AS(spec.validate(), ConfigError);

    NetworkSpec zero;
    zero.input_dim = 0;
    zero.output_dim = 2;
    REQUIRE_THROWS_AS(zero.validate(), ConfigError);
}
