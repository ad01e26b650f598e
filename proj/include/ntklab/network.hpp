#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "ntklab/matrix.hpp"
#include "ntklab/parallel.hpp"
#include "ntklab/rng.hpp"

namespace ntklab {

// Valid-padding convolution stage; image_h/image_w describe the incoming
// feature map, so a chain of these must agree layer to layer.
struct ConvLayerSpec {
    std::size_t out_channels = 0;
    std::size_t in_channels = 0;
    std::size_t kernel_h = 0;
    std::size_t kernel_w = 0;
    std::size_t image_h = 0;
    std::size_t image_w = 0;

    std::size_t out_h() const { return image_h - kernel_h + 1; }
    std::size_t out_w() const { return image_w - kernel_w + 1; }
    std::size_t fan_in() const { return in_channels * kernel_h * kernel_w; }
    std::size_t input_size() const { return in_channels * image_h * image_w; }
    std::size_t output_size() const { return out_channels * out_h() * out_w(); }

    bool operator==(const ConvLayerSpec&) const = default;
};

// Fully described architecture: optional conv front, ReLU hidden stack,
// identity output layer. Every affine map is scaled as
//   u = sigma_w * W h / sqrt(fan_in) + sigma_b * b
// so that N(0,1) parameter entries give width-independent signal scale.
struct NetworkSpec {
    std::size_t input_dim = 0;
    std::vector<std::size_t> hidden_widths;
    std::size_t output_dim = 0;
    double sigma_w = 1.0;
    double sigma_b = 0.1;
    std::vector<ConvLayerSpec> conv_front;

    void validate() const {
        if (input_dim == 0) throw ConfigError("NetworkSpec: input_dim must be positive");
        if (output_dim == 0) throw ConfigError("NetworkSpec: output_dim must be positive");
        for (std::size_t w : hidden_widths)
            if (w == 0) throw ConfigError("NetworkSpec: hidden widths must be positive");
        if (!(sigma_w >= 0.0) || !(sigma_b >= 0.0))
            throw ConfigError("NetworkSpec: sigma_w and sigma_b must be non-negative");
        for (std::size_t i = 0; i < conv_front.size(); ++i) {
            const ConvLayerSpec& c = conv_front[i];
            if (c.out_channels == 0 || c.in_channels == 0 || c.kernel_h == 0 || c.kernel_w == 0)
                throw ConfigError("NetworkSpec: conv layer " + std::to_string(i) +
                                  " has a zero dimension");
            if (c.kernel_h > c.image_h || c.kernel_w > c.image_w)
                throw ConfigError("NetworkSpec: conv layer " + std::to_string(i) +
                                  " kernel exceeds image");
            const std::size_t expect_in = (i == 0) ? input_dim : conv_front[i - 1].output_size();
            if (c.input_size() != expect_in)
                throw ConfigError("NetworkSpec: conv layer " + std::to_string(i) +
                                  " expects input size " + std::to_string(c.input_size()) +
                                  " but receives " + std::to_string(expect_in));
            if (i > 0 && (c.in_channels != conv_front[i - 1].out_channels ||
                          c.image_h != conv_front[i - 1].out_h() ||
                          c.image_w != conv_front[i - 1].out_w()))
                throw ConfigError("NetworkSpec: conv layer " + std::to_string(i) +
                                  " shape does not chain from the previous layer");
        }
    }

    std::size_t dense_input_dim() const {
        return conv_front.empty() ? input_dim : conv_front.back().output_size();
    }

    std::size_t dense_layer_count() const { return hidden_widths.size() + 1; }

    std::size_t dense_in_dim(std::size_t layer) const {
        return layer == 0 ? dense_input_dim() : hidden_widths[layer - 1];
    }

    std::size_t dense_out_dim(std::size_t layer) const {
        return layer == hidden_widths.size() ? output_dim : hidden_widths[layer];
    }

    // Width of the penultimate activation, the representation used downstream.
    std::size_t embedding_dim() const { return dense_in_dim(dense_layer_count() - 1); }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const ConvLayerSpec& c : conv_front) n += c.out_channels * c.fan_in() + c.out_channels;
        for (std::size_t l = 0; l < dense_layer_count(); ++l)
            n += dense_out_dim(l) * dense_in_dim(l) + dense_out_dim(l);
        return n;
    }

    bool operator==(const NetworkSpec&) const = default;
};

enum class ParamKind { ConvWeight, ConvBias, DenseWeight, DenseBias };

// One contiguous block of theta. Weights are (rows x cols) row-major; biases
// are (rows x 1). Conv weights are matricized as out_channels x fan_in.
struct ParamSlice {
    ParamKind kind;
    std::size_t layer;
    std::size_t offset;
    std::size_t rows;
    std::size_t cols;

    std::size_t count() const { return rows * cols; }
};

struct ParamLayout {
    std::vector<ParamSlice> slices;
    std::size_t total = 0;
    // Final dense layer, i.e. the linear head restricted kernels refer to.
    std::size_t head_weight = 0;
    std::size_t head_bias = 0;

    const ParamSlice& find(ParamKind kind, std::size_t layer) const {
        for (const ParamSlice& s : slices)
            if (s.kind == kind && s.layer == layer) return s;
        throw LayoutError("ParamLayout: no such slice");
    }
};

inline ParamLayout build_layout(const NetworkSpec& spec) {
    spec.validate();
    ParamLayout layout;
    std::size_t offset = 0;
    const auto push = [&](ParamKind kind, std::size_t layer, std::size_t rows, std::size_t cols) {
        layout.slices.push_back(ParamSlice{kind, layer, offset, rows, cols});
        offset += rows * cols;
    };
    for (std::size_t i = 0; i < spec.conv_front.size(); ++i) {
        const ConvLayerSpec& c = spec.conv_front[i];
        push(ParamKind::ConvWeight, i, c.out_channels, c.fan_in());
        push(ParamKind::ConvBias, i, c.out_channels, 1);
    }
    for (std::size_t l = 0; l < spec.dense_layer_count(); ++l) {
        push(ParamKind::DenseWeight, l, spec.dense_out_dim(l), spec.dense_in_dim(l));
        push(ParamKind::DenseBias, l, spec.dense_out_dim(l), 1);
    }
    layout.total = offset;
    layout.head_weight = layout.slices.size() - 2;
    layout.head_bias = layout.slices.size() - 1;
    return layout;
}

struct ModelParams {
    NetworkSpec spec;
    ParamLayout layout;
    std::vector<double> theta;

    const double* slice_data(const ParamSlice& s) const { return theta.data() + s.offset; }
    double* slice_data(const ParamSlice& s) { return theta.data() + s.offset; }

    const ParamSlice& head_weight_slice() const { return layout.slices[layout.head_weight]; }
    const ParamSlice& head_bias_slice() const { return layout.slices[layout.head_bias]; }
};

// Every theta entry i.i.d. standard normal, drawn in layout order.
inline ModelParams init_params(const NetworkSpec& spec, Rng& rng) {
    ModelParams p;
    p.spec = spec;
    p.layout = build_layout(spec);
    p.theta.resize(p.layout.total);
    for (double& v : p.theta) v = rng.normal();
    return p;
}

// External weight source; the provided vector must cover theta exactly.
inline ModelParams init_params(const NetworkSpec& spec, const std::vector<double>& weights) {
    ModelParams p;
    p.spec = spec;
    p.layout = build_layout(spec);
    if (weights.size() != p.layout.total)
        throw LayoutError("init_params: weight source has " + std::to_string(weights.size()) +
                          " entries, layout expects " + std::to_string(p.layout.total));
    p.theta = weights;
    return p;
}

namespace detail {

// Patch matrix for one sample: rows = output positions, cols = fan_in.
inline void im2col(const ConvLayerSpec& c, const double* image, Matrix& patches) {
    const std::size_t oh = c.out_h(), ow = c.out_w();
    for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
            double* prow = patches.row(oy * ow + ox);
            std::size_t col = 0;
            for (std::size_t ch = 0; ch < c.in_channels; ++ch)
                for (std::size_t ky = 0; ky < c.kernel_h; ++ky) {
                    const double* src = image + (ch * c.image_h + oy + ky) * c.image_w + ox;
                    for (std::size_t kx = 0; kx < c.kernel_w; ++kx) prow[col++] = src[kx];
                }
        }
}

inline void col2im_add(const ConvLayerSpec& c, const Matrix& dpatches, double* dimage) {
    const std::size_t oh = c.out_h(), ow = c.out_w();
    for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
            const double* prow = dpatches.row(oy * ow + ox);
            std::size_t col = 0;
            for (std::size_t ch = 0; ch < c.in_channels; ++ch)
                for (std::size_t ky = 0; ky < c.kernel_h; ++ky) {
                    double* dst = dimage + (ch * c.image_h + oy + ky) * c.image_w + ox;
                    for (std::size_t kx = 0; kx < c.kernel_w; ++kx) dst[kx] += prow[col++];
                }
        }
}

}  // namespace detail

// Activations retained for reverse-mode passes. Hidden activations use ReLU
// with subgradient 0 at exactly 0; the output layer is identity.
struct ForwardTrace {
    Matrix input;
    std::vector<Matrix> conv_pre;
    std::vector<Matrix> conv_act;
    std::vector<Matrix> dense_pre;
    std::vector<Matrix> dense_act;

    const Matrix& output() const { return dense_act.back(); }

    const Matrix& embedding(const NetworkSpec& spec) const {
        if (!spec.hidden_widths.empty()) return dense_act[spec.hidden_widths.size() - 1];
        if (!spec.conv_front.empty()) return conv_act.back();
        return input;
    }
};

inline ForwardTrace forward_trace(const ModelParams& p, const Matrix& x) {
    const NetworkSpec& spec = p.spec;
    if (x.cols() != spec.input_dim)
        throw DimensionError("forward: input has " + std::to_string(x.cols()) +
                             " features, spec expects " + std::to_string(spec.input_dim));
    const std::size_t batch = x.rows();

    ForwardTrace t;
    t.input = x;

    const Matrix* cur = &t.input;
    for (std::size_t i = 0; i < spec.conv_front.size(); ++i) {
        const ConvLayerSpec& c = spec.conv_front[i];
        const double scale = spec.sigma_w / std::sqrt(static_cast<double>(c.fan_in()));
        const ParamSlice& ws = p.layout.find(ParamKind::ConvWeight, i);
        const ParamSlice& bs = p.layout.find(ParamKind::ConvBias, i);
        const double* w = p.slice_data(ws);
        const double* b = p.slice_data(bs);
        const std::size_t positions = c.out_h() * c.out_w();

        Matrix pre(batch, c.output_size());
        Matrix patches(positions, c.fan_in());
        for (std::size_t s = 0; s < batch; ++s) {
            detail::im2col(c, cur->row(s), patches);
            double* out = pre.row(s);
            for (std::size_t ch = 0; ch < c.out_channels; ++ch) {
                const double* wch = w + ch * c.fan_in();
                const double bias = spec.sigma_b * b[ch];
                for (std::size_t pos = 0; pos < positions; ++pos)
                    out[ch * positions + pos] =
                        scale * dot(patches.row(pos), wch, c.fan_in()) + bias;
            }
        }
        Matrix act = pre;
        for (double& v : act.data()) v = v > 0.0 ? v : 0.0;
        t.conv_pre.push_back(std::move(pre));
        t.conv_act.push_back(std::move(act));
        cur = &t.conv_act.back();
    }

    for (std::size_t l = 0; l < spec.dense_layer_count(); ++l) {
        const std::size_t in = spec.dense_in_dim(l), out = spec.dense_out_dim(l);
        const double scale = spec.sigma_w / std::sqrt(static_cast<double>(in));
        const ParamSlice& ws = p.layout.find(ParamKind::DenseWeight, l);
        const ParamSlice& bs = p.layout.find(ParamKind::DenseBias, l);
        const double* w = p.slice_data(ws);
        const double* b = p.slice_data(bs);

        Matrix pre(batch, out);
        for (std::size_t s = 0; s < batch; ++s) {
            const double* hin = cur->row(s);
            double* u = pre.row(s);
            for (std::size_t r = 0; r < out; ++r)
                u[r] = scale * dot(w + r * in, hin, in) + spec.sigma_b * b[r];
        }
        const bool is_output = (l == spec.dense_layer_count() - 1);
        Matrix act = pre;
        if (!is_output)
            for (double& v : act.data()) v = v > 0.0 ? v : 0.0;
        t.dense_pre.push_back(std::move(pre));
        t.dense_act.push_back(std::move(act));
        cur = &t.dense_act.back();
    }

    require_finite(t.output(), "forward");
    return t;
}

inline Matrix forward(const ModelParams& p, const Matrix& x) {
    ForwardTrace t = forward_trace(p, x);
    return std::move(t.dense_act.back());
}

// Reverse-mode accumulation of d(scalar)/d(theta) from cotangents on the
// network output and/or on the embedding node. Either cotangent may be null.
inline std::vector<double> backward(const ModelParams& p, const ForwardTrace& t,
                                    const Matrix* d_output, const Matrix* d_embedding) {
    const NetworkSpec& spec = p.spec;
    const std::size_t batch = t.input.rows();
    if (d_output && (d_output->rows() != batch || d_output->cols() != spec.output_dim))
        throw DimensionError("backward: output cotangent shape disagrees");
    if (d_embedding &&
        (d_embedding->rows() != batch || d_embedding->cols() != spec.embedding_dim()))
        throw DimensionError("backward: embedding cotangent shape disagrees");

    std::vector<double> grad(p.layout.total, 0.0);
    const std::size_t n_dense = spec.dense_layer_count();

    // delta carries dL/d(activation) entering the layer below.
    Matrix delta;

    for (std::size_t li = n_dense; li-- > 0;) {
        const std::size_t in = spec.dense_in_dim(li), out = spec.dense_out_dim(li);
        const double scale = spec.sigma_w / std::sqrt(static_cast<double>(in));
        const ParamSlice& ws = p.layout.find(ParamKind::DenseWeight, li);
        const ParamSlice& bs = p.layout.find(ParamKind::DenseBias, li);
        const double* w = p.slice_data(ws);
        const bool is_output = (li == n_dense - 1);

        Matrix dpre(batch, out);
        if (is_output) {
            if (d_output)
                dpre = *d_output;
            // else stays zero: gradient seeded at the embedding only.
        } else {
            const Matrix& pre = t.dense_pre[li];
            for (std::size_t s = 0; s < batch; ++s)
                for (std::size_t r = 0; r < out; ++r)
                    dpre(s, r) = pre(s, r) > 0.0 ? delta(s, r) : 0.0;
        }

        const Matrix& below =
            (li == 0) ? (spec.conv_front.empty() ? t.input : t.conv_act.back())
                      : t.dense_act[li - 1];
        double* gw = grad.data() + ws.offset;
        double* gb = grad.data() + bs.offset;
        for (std::size_t s = 0; s < batch; ++s) {
            const double* hin = below.row(s);
            const double* d = dpre.row(s);
            for (std::size_t r = 0; r < out; ++r) {
                const double dr = d[r];
                if (dr == 0.0) continue;
                double* gwr = gw + r * in;
                const double sdr = scale * dr;
                for (std::size_t c = 0; c < in; ++c) gwr[c] += sdr * hin[c];
                gb[r] += spec.sigma_b * dr;
            }
        }

        Matrix dbelow(batch, in);
        for (std::size_t s = 0; s < batch; ++s) {
            const double* d = dpre.row(s);
            double* db = dbelow.row(s);
            for (std::size_t r = 0; r < out; ++r) {
                const double sdr = scale * d[r];
                if (sdr == 0.0) continue;
                const double* wr = w + r * in;
                for (std::size_t c = 0; c < in; ++c) db[c] += sdr * wr[c];
            }
        }
        // The embedding node is the input of the final dense layer.
        if (is_output && d_embedding) {
            for (std::size_t s = 0; s < batch; ++s)
                for (std::size_t c = 0; c < in; ++c) dbelow(s, c) += (*d_embedding)(s, c);
        }
        delta = std::move(dbelow);
    }

    for (std::size_t ci = spec.conv_front.size(); ci-- > 0;) {
        const ConvLayerSpec& c = spec.conv_front[ci];
        const double scale = spec.sigma_w / std::sqrt(static_cast<double>(c.fan_in()));
        const ParamSlice& ws = p.layout.find(ParamKind::ConvWeight, ci);
        const ParamSlice& bs = p.layout.find(ParamKind::ConvBias, ci);
        const double* w = p.slice_data(ws);
        double* gw = grad.data() + ws.offset;
        double* gb = grad.data() + bs.offset;
        const std::size_t positions = c.out_h() * c.out_w();
        const Matrix& pre = t.conv_pre[ci];
        const Matrix& below = (ci == 0) ? t.input : t.conv_act[ci - 1];

        Matrix dbelow(batch, c.input_size());
        Matrix patches(positions, c.fan_in());
        Matrix dpatches(positions, c.fan_in());
        for (std::size_t s = 0; s < batch; ++s) {
            const double* d = delta.row(s);
            const double* u = pre.row(s);
            detail::im2col(c, below.row(s), patches);
            for (double& v : dpatches.data()) v = 0.0;
            for (std::size_t ch = 0; ch < c.out_channels; ++ch) {
                const double* wch = w + ch * c.fan_in();
                double* gwch = gw + ch * c.fan_in();
                double gbias = 0.0;
                for (std::size_t pos = 0; pos < positions; ++pos) {
                    const std::size_t idx = ch * positions + pos;
                    const double dpre = u[idx] > 0.0 ? d[idx] : 0.0;
                    if (dpre == 0.0) continue;
                    const double sd = scale * dpre;
                    const double* prow = patches.row(pos);
                    double* dprow = dpatches.row(pos);
                    for (std::size_t k = 0; k < c.fan_in(); ++k) {
                        gwch[k] += sd * prow[k];
                        dprow[k] += sd * wch[k];
                    }
                    gbias += dpre;
                }
                gb[ch] += spec.sigma_b * gbias;
            }
            detail::col2im_add(c, dpatches, dbelow.row(s));
        }
        delta = std::move(dbelow);
    }

    return grad;
}

// Exact Jacobian of the batch outputs with respect to theta.
// Row (sample * output_dim + q) holds d(output_q(sample)) / d(theta).
inline Matrix jacobian(const ModelParams& p, const Matrix& x) {
    const ForwardTrace t = forward_trace(p, x);
    const std::size_t batch = x.rows();
    const std::size_t pdim = p.spec.output_dim;
    Matrix j(batch * pdim, p.layout.total);
    parallel_for(batch * pdim, [&](std::size_t row) {
        const std::size_t s = row / pdim;
        const std::size_t q = row % pdim;
        Matrix seed(batch, pdim);
        seed(s, q) = 1.0;
        const std::vector<double> g = backward(p, t, &seed, nullptr);
        double* dst = j.row(row);
        for (std::size_t k = 0; k < g.size(); ++k) dst[k] = g[k];
    });
    return j;
}

// ----- checkpoint format -------------------------------------------------
//
// Little-endian binary: magic "NTKP", u32 version, architecture fields, then
// theta as raw IEEE-754 doubles. Loading refuses anything with a bad magic,
// unknown version, or a theta length that disagrees with the architecture.

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_f64(std::ostream& os, double d) {
    std::uint64_t v;
    std::memcpy(&v, &d, 8);
    put_u64(os, v);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw NumericalError("checkpoint: truncated file");
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

inline std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw NumericalError("checkpoint: truncated file");
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

inline double get_f64(std::istream& is) {
    const std::uint64_t v = get_u64(is);
    double d;
    std::memcpy(&d, &v, 8);
    return d;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ModelParams& p) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw NumericalError("save_checkpoint: cannot open " + path);
    os.write("NTKP", 4);
    detail::put_u32(os, 1);
    detail::put_u64(os, p.spec.input_dim);
    detail::put_u64(os, p.spec.hidden_widths.size());
    for (std::size_t w : p.spec.hidden_widths) detail::put_u64(os, w);
    detail::put_u64(os, p.spec.output_dim);
    detail::put_f64(os, p.spec.sigma_w);
    detail::put_f64(os, p.spec.sigma_b);
    detail::put_u64(os, p.spec.conv_front.size());
    for (const ConvLayerSpec& c : p.spec.conv_front) {
        detail::put_u64(os, c.out_channels);
        detail::put_u64(os, c.in_channels);
        detail::put_u64(os, c.kernel_h);
        detail::put_u64(os, c.kernel_w);
        detail::put_u64(os, c.image_h);
        detail::put_u64(os, c.image_w);
    }
    detail::put_u64(os, p.theta.size());
    for (double v : p.theta) detail::put_f64(os, v);
    if (!os) throw NumericalError("save_checkpoint: write failed for " + path);
}

inline ModelParams load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw NumericalError("load_checkpoint: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "NTKP", 4) != 0)
        throw ConfigError("load_checkpoint: " + path + " is not a checkpoint (bad magic)");
    const std::uint32_t version = detail::get_u32(is);
    if (version != 1)
        throw ConfigError("load_checkpoint: unsupported version " + std::to_string(version));

    NetworkSpec spec;
    spec.input_dim = detail::get_u64(is);
    const std::uint64_t nh = detail::get_u64(is);
    spec.hidden_widths.resize(nh);
    for (std::uint64_t i = 0; i < nh; ++i) spec.hidden_widths[i] = detail::get_u64(is);
    spec.output_dim = detail::get_u64(is);
    spec.sigma_w = detail::get_f64(is);
    spec.sigma_b = detail::get_f64(is);
    const std::uint64_t nc = detail::get_u64(is);
    spec.conv_front.resize(nc);
    for (std::uint64_t i = 0; i < nc; ++i) {
        ConvLayerSpec& c = spec.conv_front[i];
        c.out_channels = detail::get_u64(is);
        c.in_channels = detail::get_u64(is);
        c.kernel_h = detail::get_u64(is);
        c.kernel_w = detail::get_u64(is);
        c.image_h = detail::get_u64(is);
        c.image_w = detail::get_u64(is);
    }
    const std::uint64_t tn = detail::get_u64(is);
    std::vector<double> theta(tn);
    for (std::uint64_t i = 0; i < tn; ++i) theta[i] = detail::get_f64(is);
    return init_params(spec, theta);
}

}  // namespace ntklab
