#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ntklab/io.hpp"
#include "ntklab/linalg.hpp"
#include "ntklab/matrix.hpp"
#include "ntklab/network.hpp"
#include "ntklab/ntk.hpp"

namespace ntklab {

// A differentiable scalar paired with its gradient. The gradient is aligned
// with whatever space the producing op documents: the regularizers emit
// theta-aligned gradients, the classification losses emit gradients over
// their direct inputs, which the trainer chains through the network.
struct LossValue {
    double value = 0.0;
    std::vector<double> gradient;
};

inline LossValue combine_loss(const LossValue& a, const LossValue& b, double weight,
                              const char* what) {
    if (a.gradient.size() != b.gradient.size())
        throw LayoutError(std::string(what) + ": gradient lengths disagree (" +
                          std::to_string(a.gradient.size()) + " vs " +
                          std::to_string(b.gradient.size()) + ")");
    LossValue out;
    out.value = a.value + weight * b.value;
    out.gradient.resize(a.gradient.size());
    for (std::size_t i = 0; i < out.gradient.size(); ++i)
        out.gradient[i] = a.gradient[i] + weight * b.gradient[i];
    return out;
}

// total = logits + gamma * embeddings
inline LossValue classification_loss(const LossValue& logit_loss, const LossValue& emb_loss,
                                     double gamma) {
    return combine_loss(logit_loss, emb_loss, gamma, "classification_loss");
}

// total = conv + linear
inline LossValue regularization_loss(const LossValue& conv_reg, const LossValue& linear_reg) {
    return combine_loss(conv_reg, linear_reg, 1.0, "regularization_loss");
}

// ----- curricular margin softmax -------------------------------------------

struct MarginConfig {
    double s = 15.0;           // logit scale
    double m = 0.1;            // angular margin
    double t_ema = 0.0;        // curriculum temperature, EMA of mean true-class cosine
    double ema_momentum = 0.99;
};

struct MarginLossResult {
    LossValue loss;        // gradient over the cosine matrix, row-major
    MarginConfig updated;  // t_ema advanced by this batch
};

// Margin softmax with curriculum-weighted negatives. For sample i with true
// class y, eps_j = cos(theta_y + m) - cos(theta_j) splits negatives into easy
// (eps_j >= 0, kept as plain cosines) and hard (scaled by t + cos(theta_j)).
// The positive logit follows the majority of its negatives: the easy form
// cos(theta_y) cos m - cos^2(theta_y) sin m, or the hard form
// cos(theta_y + m) + m sin m; ties count as easy. With m = 0 and t = 0 and
// every negative easy, the whole thing collapses to plain scaled-cosine
// cross-entropy. t_ema tracks the mean true-class cosine so later batches
// weight hard negatives more as the embedding sharpens.
inline MarginLossResult curricular_margin_loss(const Matrix& cosines,
                                               const std::vector<std::size_t>& labels,
                                               const MarginConfig& cfg) {
    const std::size_t batch = cosines.rows();
    const std::size_t classes = cosines.cols();
    if (batch == 0) throw DimensionError("curricular_margin_loss: empty batch");
    if (labels.size() != batch)
        throw DimensionError("curricular_margin_loss: label count disagrees with batch");
    if (!(cfg.s > 0.0)) throw ConfigError("curricular_margin_loss: scale s must be positive");
    if (!(cfg.m >= 0.0)) throw ConfigError("curricular_margin_loss: margin m must be >= 0");
    if (!(cfg.ema_momentum > 0.0 && cfg.ema_momentum < 1.0))
        throw ConfigError("curricular_margin_loss: ema momentum outside (0,1)");
    for (std::size_t i = 0; i < batch; ++i) {
        if (labels[i] >= classes)
            throw ConfigError("curricular_margin_loss: label " + std::to_string(labels[i]) +
                              " outside " + std::to_string(classes) + " classes");
        for (std::size_t j = 0; j < classes; ++j)
            if (std::abs(cosines(i, j)) > 1.0 + 1e-9)
                throw DomainError("curricular_margin_loss: cosine (" + std::to_string(i) + "," +
                                  std::to_string(j) + ") = " + std::to_string(cosines(i, j)) +
                                  " outside [-1,1]");
    }

    const double cos_m = std::cos(cfg.m);
    const double sin_m = std::sin(cfg.m);

    MarginLossResult out;
    out.loss.gradient.assign(batch * classes, 0.0);

    double mean_true_cos = 0.0;
    std::vector<double> z(classes), dz_dc(classes);
    for (std::size_t i = 0; i < batch; ++i) {
        const std::size_t y = labels[i];
        const double cy = std::min(1.0, std::max(-1.0, cosines(i, y)));
        mean_true_cos += cy;
        const double sin_y = std::sqrt(std::max(0.0, 1.0 - cy * cy));
        const double cos_ym = cy * cos_m - sin_y * sin_m;

        std::size_t easy = 0, hard = 0;
        for (std::size_t j = 0; j < classes; ++j) {
            if (j == y) continue;
            const double cj = cosines(i, j);
            const double eps = cos_ym - cj;
            if (eps >= 0.0) {
                ++easy;
                z[j] = cfg.s * cj;
                dz_dc[j] = cfg.s;
            } else {
                ++hard;
                z[j] = cfg.s * cj * (cfg.t_ema + cj);
                dz_dc[j] = cfg.s * (cfg.t_ema + 2.0 * cj);
            }
        }
        if (easy >= hard) {
            z[y] = cfg.s * (cy * cos_m - cy * cy * sin_m);
            dz_dc[y] = cfg.s * (cos_m - 2.0 * cy * sin_m);
        } else {
            z[y] = cfg.s * (cos_ym + cfg.m * sin_m);
            // d cos(theta_y + m) / d cos(theta_y); the sin floor only guards
            // the derivative at the |cos| = 1 corner.
            dz_dc[y] = cfg.s * (cos_m + sin_m * cy / std::max(sin_y, 1e-8));
        }

        double zmax = z[0];
        for (std::size_t j = 1; j < classes; ++j) zmax = std::max(zmax, z[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < classes; ++j) sum += std::exp(z[j] - zmax);
        const double lse = zmax + std::log(sum);
        out.loss.value += lse - z[y];

        double* grad = out.loss.gradient.data() + i * classes;
        for (std::size_t j = 0; j < classes; ++j) {
            const double p = std::exp(z[j] - lse);
            grad[j] = (p - (j == y ? 1.0 : 0.0)) * dz_dc[j];
        }
    }

    const double inv_batch = 1.0 / static_cast<double>(batch);
    out.loss.value *= inv_batch;
    for (double& g : out.loss.gradient) g *= inv_batch;

    mean_true_cos *= inv_batch;
    out.updated = cfg;
    out.updated.t_ema = cfg.ema_momentum * cfg.t_ema + (1.0 - cfg.ema_momentum) * mean_true_cos;
    return out;
}

// ----- adaptability (pseudo-label) loss -------------------------------------

// Cross-entropy of cosine pseudo-labels against subdomain labels. Supports
// are way-major (shots rows per way); prototypes are plain support means.
// The gradient covers both inputs: query rows first, support rows after,
// each row-major.
inline LossValue adaptability_loss(const Matrix& query_emb, const Matrix& support_emb,
                                   std::size_t ways, std::size_t shots,
                                   const std::vector<std::size_t>& query_subdomain) {
    if (ways == 0 || shots == 0)
        throw ConfigError("adaptability_loss: ways and shots must be positive");
    if (support_emb.rows() != ways * shots)
        throw DimensionError("adaptability_loss: support rows disagree with ways x shots");
    if (query_emb.cols() != support_emb.cols())
        throw DimensionError("adaptability_loss: embedding widths disagree");
    if (query_subdomain.size() != query_emb.rows())
        throw DimensionError("adaptability_loss: subdomain labels disagree with queries");
    for (std::size_t l : query_subdomain)
        if (l >= ways) throw ConfigError("adaptability_loss: subdomain label outside ways");

    const std::size_t nq = query_emb.rows();
    const std::size_t d = query_emb.cols();

    Matrix proto(ways, d);
    std::vector<double> proto_norm(ways);
    for (std::size_t w = 0; w < ways; ++w) {
        for (std::size_t s = 0; s < shots; ++s)
            for (std::size_t j = 0; j < d; ++j) proto(w, j) += support_emb(w * shots + s, j);
        for (std::size_t j = 0; j < d; ++j) proto(w, j) /= static_cast<double>(shots);
        proto_norm[w] = norm2(proto.row(w), d);
        if (proto_norm[w] == 0.0)
            throw NumericalError("adaptability_loss: zero-norm prototype for way " +
                                 std::to_string(w));
    }

    LossValue out;
    out.gradient.assign((nq + support_emb.rows()) * d, 0.0);
    double* gq = out.gradient.data();
    double* gs = out.gradient.data() + nq * d;

    Matrix dproto(ways, d);
    std::vector<double> cosv(ways), soft(ways);
    for (std::size_t i = 0; i < nq; ++i) {
        const double* q = query_emb.row(i);
        const double qn = norm2(q, d);
        if (qn == 0.0)
            throw NumericalError("adaptability_loss: zero-norm query embedding at row " +
                                 std::to_string(i));
        for (std::size_t w = 0; w < ways; ++w)
            cosv[w] = dot(q, proto.row(w), d) / (qn * proto_norm[w]);

        double zmax = cosv[0];
        for (std::size_t w = 1; w < ways; ++w) zmax = std::max(zmax, cosv[w]);
        double sum = 0.0;
        for (std::size_t w = 0; w < ways; ++w) sum += std::exp(cosv[w] - zmax);
        const double lse = zmax + std::log(sum);
        const std::size_t y = query_subdomain[i];
        out.value += lse - cosv[y];

        for (std::size_t w = 0; w < ways; ++w) {
            soft[w] = std::exp(cosv[w] - lse) - (w == y ? 1.0 : 0.0);
            // d cos(q, p) / dq = p / (|q||p|) - cos * q / |q|^2, and symmetrically for p.
            const double* pw = proto.row(w);
            const double a = 1.0 / (qn * proto_norm[w]);
            const double bq = cosv[w] / (qn * qn);
            const double bp = cosv[w] / (proto_norm[w] * proto_norm[w]);
            double* gqi = gq + i * d;
            double* dpw = dproto.row(w);
            for (std::size_t j = 0; j < d; ++j) {
                gqi[j] += soft[w] * (pw[j] * a - bq * q[j]);
                dpw[j] += soft[w] * (q[j] * a - bp * pw[j]);
            }
        }
    }

    const double inv_nq = 1.0 / static_cast<double>(nq);
    out.value *= inv_nq;
    for (std::size_t i = 0; i < nq * d; ++i) gq[i] *= inv_nq;
    // Prototype means spread their gradient evenly over their shots.
    const double inv = inv_nq / static_cast<double>(shots);
    for (std::size_t w = 0; w < ways; ++w)
        for (std::size_t s = 0; s < shots; ++s)
            for (std::size_t j = 0; j < d; ++j) gs[(w * shots + s) * d + j] += inv * dproto(w, j);
    return out;
}

// ----- conv spectral regularizer --------------------------------------------

// alpha * sum over conv layers of sigma_max / sigma_min of the matricized
// kernel (out_channels x fan_in). Gradient via the singular-vector outer
// products d sigma = u v^T; theta-aligned, zero outside conv weight blocks.
// The ratio is invariant under positive rescaling of the weights, so the raw
// theta block stands in for the effective (scaled) kernel.
inline LossValue conv_spectral_reg(const ModelParams& params, double alpha) {
    if (params.spec.conv_front.empty())
        throw ConfigError("conv_spectral_reg: network has no conv front");
    if (!(alpha >= 0.0)) throw ConfigError("conv_spectral_reg: alpha must be >= 0");

    LossValue out;
    out.gradient.assign(params.layout.total, 0.0);
    for (std::size_t ci = 0; ci < params.spec.conv_front.size(); ++ci) {
        const ParamSlice& ws = params.layout.find(ParamKind::ConvWeight, ci);
        Matrix w(ws.rows, ws.cols);
        for (std::size_t i = 0; i < ws.count(); ++i) w.data()[i] = params.theta[ws.offset + i];

        const SvdExtremes sv = svd_extremes(w);
        if (sv.sigma_min <= 1e-12)
            throw NumericalError("conv_spectral_reg: conv layer " + std::to_string(ci) +
                                 " is rank deficient (sigma_min = " +
                                 format_double(sv.sigma_min) + ")");
        out.value += alpha * sv.sigma_max / sv.sigma_min;

        const double smin2 = sv.sigma_min * sv.sigma_min;
        double* g = out.gradient.data() + ws.offset;
        for (std::size_t i = 0; i < ws.rows; ++i)
            for (std::size_t j = 0; j < ws.cols; ++j)
                g[i * ws.cols + j] = alpha *
                                     (sv.sigma_min * sv.u_max[i] * sv.v_max[j] -
                                      sv.sigma_max * sv.u_min[i] * sv.v_min[j]) /
                                     smin2;
    }
    return out;
}

// ----- linear-head kernel regularizer ---------------------------------------

struct LinearNtkRegResult {
    LossValue loss;  // theta-aligned
    double new_range = 0.0;
};

// beta_hyper * (current eigenvalue range of the head-restricted kernel) /
// (previous batch's range). The previous range is a frozen constant, so the
// gradient is beta / prev * d(lambda_max - lambda_min)/d theta. The first
// batch bootstraps against its own range (value exactly beta_hyper); a batch
// whose kernel has no spread (1x1) keeps the ratio defined as 1.
//
// The restricted kernel is an affine image of the embedding Gram matrix
// (see linear_head_gram), so d lambda / d theta for eigenvector v flows
// entirely through the embeddings: d lambda / d E = 2 c v (E^T v)^T.
inline LinearNtkRegResult linear_ntk_reg(const ModelParams& params, const Matrix& batch_x,
                                         double prev_range, double beta_hyper) {
    if (!(beta_hyper >= 0.0)) throw ConfigError("linear_ntk_reg: beta_hyper must be >= 0");
    if (batch_x.rows() == 0) throw DimensionError("linear_ntk_reg: empty batch");

    const ForwardTrace trace = forward_trace(params, batch_x);
    const Matrix& emb = trace.embedding(params.spec);
    const Matrix kernel = detail::linear_head_gram(params, emb, emb);
    const EigenDecomposition eig = sym_eig(kernel);
    const std::size_t n = kernel.rows();
    const double range = eig.eigenvalues.front() - eig.eigenvalues.back();

    LinearNtkRegResult out;
    out.new_range = range;
    out.loss.gradient.assign(params.layout.total, 0.0);

    const bool bootstrap = !(prev_range > 1e-12);
    const double prev = bootstrap ? range : prev_range;
    if (!(prev > 1e-12)) {
        // No spread in either batch: flat ratio, nothing to push against.
        out.loss.value = beta_hyper;
        return out;
    }
    out.loss.value = beta_hyper * range / prev;

    const double z = static_cast<double>(params.spec.embedding_dim());
    const double p = static_cast<double>(params.spec.output_dim);
    const double cw = p * params.spec.sigma_w * params.spec.sigma_w / z;
    const double coeff = 2.0 * cw * beta_hyper / prev;

    // d range / d E = 2 c (v+ w+^T - v- w-^T), w = E^T v.
    Matrix demb(n, emb.cols());
    for (int which = 0; which < 2; ++which) {
        const std::size_t col = which == 0 ? 0 : n - 1;
        const double sign = which == 0 ? 1.0 : -1.0;
        std::vector<double> v(n), w(emb.cols(), 0.0);
        for (std::size_t i = 0; i < n; ++i) v[i] = eig.eigenvectors(i, col);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < emb.cols(); ++j) w[j] += v[i] * emb(i, j);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < emb.cols(); ++j)
                demb(i, j) += sign * coeff * v[i] * w[j];
    }
    out.loss.gradient = backward(params, trace, nullptr, &demb);
    return out;
}

// ----- cosine classifier glue ------------------------------------------------

// Cosine of every embedding row against every prototype row; the prototype
// matrix is the raw final-layer weight block, whose row scale cancels.
inline Matrix cosine_logits(const Matrix& emb, const Matrix& prototypes) {
    if (emb.cols() != prototypes.cols())
        throw DimensionError("cosine_logits: embedding and prototype widths disagree");
    const std::size_t n = emb.rows(), c = prototypes.rows(), d = emb.cols();
    std::vector<double> en(n), pn(c);
    for (std::size_t i = 0; i < n; ++i) {
        en[i] = norm2(emb.row(i), d);
        if (en[i] == 0.0)
            throw NumericalError("cosine_logits: zero-norm embedding at row " + std::to_string(i));
    }
    for (std::size_t j = 0; j < c; ++j) {
        pn[j] = norm2(prototypes.row(j), d);
        if (pn[j] == 0.0)
            throw NumericalError("cosine_logits: zero-norm prototype at row " + std::to_string(j));
    }
    Matrix out(n, c);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j)
            out(i, j) = dot(emb.row(i), prototypes.row(j), d) / (en[i] * pn[j]);
    return out;
}

// Chain rule through cosine_logits: given dL/dcos, produce dL/demb and
// dL/dprototypes.
inline void cosine_logits_backward(const Matrix& emb, const Matrix& prototypes,
                                   const Matrix& cosines, const Matrix& dcos, Matrix& demb,
                                   Matrix& dproto) {
    const std::size_t n = emb.rows(), c = prototypes.rows(), d = emb.cols();
    if (dcos.rows() != n || dcos.cols() != c)
        throw DimensionError("cosine_logits_backward: cotangent shape disagrees");
    std::vector<double> en(n), pn(c);
    for (std::size_t i = 0; i < n; ++i) en[i] = norm2(emb.row(i), d);
    for (std::size_t j = 0; j < c; ++j) pn[j] = norm2(prototypes.row(j), d);

    demb = Matrix(n, d);
    dproto = Matrix(c, d);
    for (std::size_t i = 0; i < n; ++i) {
        const double* e = emb.row(i);
        double* de = demb.row(i);
        for (std::size_t j = 0; j < c; ++j) {
            const double g = dcos(i, j);
            if (g == 0.0) continue;
            const double* w = prototypes.row(j);
            double* dw = dproto.row(j);
            const double a = 1.0 / (en[i] * pn[j]);
            const double be = cosines(i, j) / (en[i] * en[i]);
            const double bw = cosines(i, j) / (pn[j] * pn[j]);
            for (std::size_t k = 0; k < d; ++k) {
                de[k] += g * (w[k] * a - be * e[k]);
                dw[k] += g * (e[k] * a - bw * w[k]);
            }
        }
    }
}

}  // namespace ntklab
