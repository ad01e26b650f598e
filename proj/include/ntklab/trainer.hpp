#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ntklab/dataset.hpp"
#include "ntklab/losses.hpp"
#include "ntklab/matrix.hpp"
#include "ntklab/network.hpp"
#include "ntklab/ntk.hpp"

namespace ntklab {

// Borrows the params: the returned function must not outlive them. Rows are
// penultimate activations normalized to unit length, the representation every
// prototype comparison in this codebase runs on.
inline EmbedFn make_embed_fn(const ModelParams& params) {
    return [&params](const Matrix& x) {
        ForwardTrace t = forward_trace(params, x);
        Matrix e = t.embedding(params.spec);
        for (std::size_t i = 0; i < e.rows(); ++i) {
            const double n = norm2(e.row(i), e.cols());
            if (n == 0.0)
                throw NumericalError("embed: zero-norm embedding at row " + std::to_string(i));
            double* r = e.row(i);
            for (std::size_t j = 0; j < e.cols(); ++j) r[j] /= n;
        }
        return e;
    };
}

// ----- squared-loss gradient descent ----------------------------------------

struct FitConfig {
    std::size_t steps = 100;
    double lr = 0.0;  // <= 0 derives the step from the initial kernel spectrum
};

struct FitResult {
    ModelParams params;
    std::vector<double> losses;  // losses[t] after t steps; losses[0] is initial
    double lr = 0.0;
    ConvergenceCheck check;
};

// Full-batch gradient descent on L = 1/2 |f(X) - Y|_F^2. The automatic step
// is 2 / (sigma_min + sigma_max) of the kernel at initialization, and the
// returned check compares the observed trace against the spectral decay
// bound for that step. A caller-supplied lr still gets checked against the
// automatic-step bound.
inline FitResult fit_gd(ModelParams params, const Matrix& x, const Matrix& y,
                        const FitConfig& cfg) {
    if (cfg.steps == 0) throw ConfigError("fit_gd: step count must be positive");
    if (y.rows() != x.rows()) throw DimensionError("fit_gd: sample and label rows disagree");
    if (y.cols() != params.spec.output_dim)
        throw DimensionError("fit_gd: label width disagrees with network output");

    FitResult out;
    const NtkMatrix k0 = empirical_ntk(params, x, NtkRestriction::AllParams);
    if (!(k0.lambda_min() + k0.lambda_max() > 0.0))
        throw NumericalError("fit_gd: initial spectrum sums to zero, no step size");
    out.lr = cfg.lr > 0.0 ? cfg.lr : 2.0 / (k0.lambda_min() + k0.lambda_max());

    const auto loss_of = [&](const Matrix& f) {
        double sum = 0.0;
        for (std::size_t i = 0; i < f.rows(); ++i)
            for (std::size_t j = 0; j < f.cols(); ++j) {
                const double d = f(i, j) - y(i, j);
                sum += d * d;
            }
        return 0.5 * sum;
    };

    out.losses.reserve(cfg.steps + 1);
    out.losses.push_back(loss_of(forward(params, x)));
    const double initial_residual = std::sqrt(2.0 * out.losses[0]);

    for (std::size_t t = 0; t < cfg.steps; ++t) {
        const ForwardTrace trace = forward_trace(params, x);
        Matrix dout = trace.output();
        for (std::size_t i = 0; i < dout.rows(); ++i)
            for (std::size_t j = 0; j < dout.cols(); ++j) dout(i, j) -= y(i, j);
        const std::vector<double> grad = backward(params, trace, &dout, nullptr);
        for (std::size_t i = 0; i < params.theta.size(); ++i)
            params.theta[i] -= out.lr * grad[i];

        const double l = loss_of(forward(params, x));
        if (!std::isfinite(l))
            throw NumericalError("fit_gd: non-finite loss at step " + std::to_string(t + 1));
        out.losses.push_back(l);
    }

    out.check = convergence_bound_check(out.losses, k0, initial_residual);
    out.params = std::move(params);
    return out;
}

// ----- episodic base-session training ----------------------------------------

struct TrainConfig {
    std::size_t steps = 200;
    std::size_t batch_size = 1;  // episodes averaged per gradient step
    double lr = 0.05;
    bool auto_eta0 = false;  // derive lr from the initial probe kernel instead
    std::size_t ways = 5, shots = 5, queries = 5;
    double mix_alpha = 0.2;  // Beta(alpha, alpha) blending
    MarginConfig margin;
    double gamma = 0.5;        // pseudo-label loss weight
    double alpha = 1e-3;       // conv condition-number weight, 0 disables
    double beta_hyper = 1e-3;  // head-kernel range weight, 0 disables
    std::size_t spectrum_every = 10;
    std::size_t probe_size = 32;
    std::uint64_t seed = 1;
    double divergence_threshold = 1e6;

    void validate() const {
        if (batch_size == 0) throw ConfigError("train config: batch_size must be positive");
        if (!auto_eta0 && !(lr > 0.0))
            throw ConfigError("train config: lr must be positive unless auto-eta0 is chosen");
        if (ways == 0 || shots == 0 || queries == 0)
            throw ConfigError("train config: episode shape must be positive");
        if (spectrum_every < 1) throw ConfigError("train config: spectrum_every must be >= 1");
        if (probe_size < 2) throw ConfigError("train config: probe_size must be >= 2");
        if (!(mix_alpha > 0.0)) throw ConfigError("train config: mix_alpha must be positive");
        if (!(gamma >= 0.0) || !(alpha >= 0.0) || !(beta_hyper >= 0.0))
            throw ConfigError("train config: loss weights must be >= 0");
    }
};

struct LossBreakdown {
    std::size_t step = 0;
    double total = 0.0;
    double margin = 0.0;
    double adaptability = 0.0;
    double conv_reg = 0.0;
    double linear_reg = 0.0;
};

struct TrainState {
    ModelParams params;
    std::size_t step = 0;
    MarginConfig margin_cfg;
    double prev_lin_range = 0.0;
    SpectrumTrace spectrum_trace;
    std::vector<LossBreakdown> loss_trace;  // one record per completed step
    ConvergenceCheck convergence;  // populated by the squared-loss path only
    double lr = 0.0;
};

inline std::string loss_trace_csv(const std::vector<LossBreakdown>& rows) {
    std::string out = "step,total_loss,margin_loss,adaptability_loss,conv_reg,linear_reg\n";
    for (const LossBreakdown& r : rows) {
        out += std::to_string(r.step);
        out += ',';
        out += format_double(r.total);
        out += ',';
        out += format_double(r.margin);
        out += ',';
        out += format_double(r.adaptability);
        out += ',';
        out += format_double(r.conv_reg);
        out += ',';
        out += format_double(r.linear_reg);
        out += '\n';
    }
    return out;
}

namespace detail {

inline Matrix head_prototypes(const ModelParams& params) {
    const ParamSlice& ws = params.head_weight_slice();
    Matrix w(ws.rows, ws.cols);
    const double* src = params.slice_data(ws);
    for (std::size_t i = 0; i < ws.count(); ++i) w.data()[i] = src[i];
    return w;
}

inline Matrix probe_inputs(const FscilDataset& ds, std::size_t probe_size, Rng& rng) {
    std::vector<std::size_t> pool;
    for (std::size_t c = 0; c < ds.base_classes; ++c)
        for (std::size_t idx : ds.train_by_class[c]) pool.push_back(idx);
    if (pool.size() < probe_size)
        throw SamplingError("probe_inputs: base split holds " + std::to_string(pool.size()) +
                            " samples, probe wants " + std::to_string(probe_size));
    const std::vector<std::size_t> order = rng.permutation(pool.size());
    Matrix probe(probe_size, ds.dim());
    for (std::size_t i = 0; i < probe_size; ++i)
        for (std::size_t j = 0; j < ds.dim(); ++j) probe(i, j) = ds.features(pool[order[i]], j);
    return probe;
}

}  // namespace detail

// One gradient step per iteration over batch_size episodes: each episode is
// extended with blended virtual classes for the margin softmax over the head
// rows, the pseudo-label loss reads the clean episode, the head-kernel
// regularizer reads the episode's query set, and the conv regularizer is
// data-free. Substreams keep the draw order stable: fork 0 initializes theta,
// 1 feeds episodes, 2 feeds blending, 3 picks the probe set, so changing the
// probe size cannot shift the training draws. The convergence field stays
// empty here; the squared-loss decay bound belongs to fit_gd's dynamics, not
// to descent on the margin objective.
inline TrainState train_base_session(const FscilDataset& ds, const NetworkSpec& spec,
                                     const TrainConfig& cfg, const ModelParams* init = nullptr) {
    cfg.validate();
    if (spec.input_dim != ds.dim())
        throw ConfigError("train_base_session: network input " + std::to_string(spec.input_dim) +
                          " disagrees with feature dim " + std::to_string(ds.dim()));
    if (spec.output_dim != extended_class_count(ds.base_classes))
        throw ConfigError("train_base_session: network output " + std::to_string(spec.output_dim) +
                          " must cover " + std::to_string(extended_class_count(ds.base_classes)) +
                          " extended classes");

    Rng master(cfg.seed);
    Rng init_rng = master.fork(0);
    Rng episode_rng = master.fork(1);
    Rng mix_rng = master.fork(2);
    Rng probe_rng = master.fork(3);

    TrainState out;
    if (init) {
        if (init->spec != spec)
            throw ConfigError("train_base_session: initial weights were built for a different "
                              "network shape");
        out.params = *init;
    } else {
        out.params = init_params(spec, init_rng);
    }
    out.margin_cfg = cfg.margin;

    const Matrix probe = detail::probe_inputs(ds, cfg.probe_size, probe_rng);

    out.lr = cfg.lr;
    if (cfg.auto_eta0) {
        const NtkMatrix k0 = empirical_ntk(out.params, probe, NtkRestriction::LinearHead);
        if (!(k0.lambda_min() + k0.lambda_max() > 0.0))
            throw NumericalError("train_base_session: probe spectrum sums to zero, no step size");
        out.lr = 2.0 / (k0.lambda_min() + k0.lambda_max());
    }

    const EmbedFn embed = make_embed_fn(out.params);
    const auto snapshot = [&](std::size_t step) {
        const NtkMatrix k = empirical_ntk(out.params, probe, NtkRestriction::LinearHead);
        const double acc = ncm_evaluate(embed, ds, 0).accuracy;
        out.spectrum_trace.records.push_back(spectrum_snapshot(k, step, acc));
    };
    snapshot(0);

    const std::size_t nq = cfg.ways * cfg.queries;
    const std::size_t ns = cfg.ways * cfg.shots;
    const double inv_batch = 1.0 / static_cast<double>(cfg.batch_size);

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        LossValue cls_total;
        cls_total.gradient.assign(out.params.layout.total, 0.0);
        double margin_value = 0.0, adapt_value = 0.0;
        Matrix step_queries;

        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            const Episode ep = sample_episode(ds, cfg.ways, cfg.shots, cfg.queries, episode_rng);
            // Query rows first, support after: the order the pseudo-label
            // gradient comes back in.
            const Matrix batch_x = vstack(ep.query_x, ep.support_x);
            std::vector<std::size_t> batch_labels(nq + ns);
            for (std::size_t i = 0; i < nq; ++i)
                batch_labels[i] = ep.class_ids[ep.query_subdomain[i]];
            for (std::size_t i = 0; i < ns; ++i)
                batch_labels[nq + i] = ep.class_ids[ep.support_subdomain[i]];

            const MixBatch mix =
                mixup_extend(batch_x, batch_labels, cfg.mix_alpha, ds.base_classes, mix_rng);

            // Margin softmax over head rows, on the blended batch.
            const ForwardTrace mix_trace = forward_trace(out.params, mix.mixed_x);
            const Matrix& mix_emb = mix_trace.embedding(spec);
            const Matrix prototypes = detail::head_prototypes(out.params);
            const Matrix cosines = cosine_logits(mix_emb, prototypes);
            const MarginLossResult mres =
                curricular_margin_loss(cosines, mix.mixed_labels, out.margin_cfg);
            out.margin_cfg = mres.updated;

            Matrix dcos(cosines.rows(), cosines.cols());
            for (std::size_t i = 0; i < dcos.rows() * dcos.cols(); ++i)
                dcos.data()[i] = mres.loss.gradient[i];
            Matrix demb, dproto;
            cosine_logits_backward(mix_emb, prototypes, cosines, dcos, demb, dproto);
            LossValue margin_theta;
            margin_theta.value = mres.loss.value;
            margin_theta.gradient = backward(out.params, mix_trace, nullptr, &demb);
            {
                const ParamSlice& ws = out.params.head_weight_slice();
                for (std::size_t i = 0; i < ws.count(); ++i)
                    margin_theta.gradient[ws.offset + i] += dproto.data()[i];
            }

            // Pseudo-label loss on the clean episode.
            const ForwardTrace ep_trace = forward_trace(out.params, batch_x);
            const Matrix& ep_emb = ep_trace.embedding(spec);
            const LossValue ad =
                adaptability_loss(ep_emb.row_block(0, nq), ep_emb.row_block(nq, ns), cfg.ways,
                                  cfg.shots, ep.query_subdomain);
            Matrix demb_ad(nq + ns, ep_emb.cols());
            for (std::size_t i = 0; i < demb_ad.rows() * demb_ad.cols(); ++i)
                demb_ad.data()[i] = ad.gradient[i];
            LossValue adapt_theta;
            adapt_theta.value = ad.value;
            adapt_theta.gradient = backward(out.params, ep_trace, nullptr, &demb_ad);

            const LossValue cls = classification_loss(margin_theta, adapt_theta, cfg.gamma);
            cls_total = combine_loss(cls_total, cls, inv_batch, "episode average");
            margin_value += inv_batch * mres.loss.value;
            adapt_value += inv_batch * ad.value;

            step_queries = b == 0 ? ep.query_x : vstack(step_queries, ep.query_x);
        }

        LossValue conv;
        conv.gradient.assign(out.params.layout.total, 0.0);
        if (cfg.alpha > 0.0 && !spec.conv_front.empty())
            conv = conv_spectral_reg(out.params, cfg.alpha);
        LossValue lin;
        lin.gradient.assign(out.params.layout.total, 0.0);
        if (cfg.beta_hyper > 0.0) {
            const LinearNtkRegResult lres =
                linear_ntk_reg(out.params, step_queries, out.prev_lin_range, cfg.beta_hyper);
            lin = lres.loss;
            out.prev_lin_range = lres.new_range;
        }
        const LossValue reg = regularization_loss(conv, lin);
        const LossValue total = combine_loss(cls_total, reg, 1.0, "total_loss");

        if (!std::isfinite(total.value) || total.value > cfg.divergence_threshold)
            throw NumericalError("train_base_session: diverged at step " + std::to_string(step) +
                                 " (loss " + format_double(total.value) + ")");

        for (std::size_t i = 0; i < out.params.theta.size(); ++i)
            out.params.theta[i] -= out.lr * total.gradient[i];
        out.step = step + 1;

        out.loss_trace.push_back(
            LossBreakdown{step, total.value, margin_value, adapt_value, conv.value, lin.value});
        if ((step + 1) % cfg.spectrum_every == 0) snapshot(step + 1);
    }
    if (cfg.steps % cfg.spectrum_every != 0) snapshot(cfg.steps);
    return out;
}

// ----- session protocol -------------------------------------------------------

// Prototype-only session growth: each incremental session adds its few-shot
// classes as prototypes and the frozen embedding is re-evaluated over
// everything seen so far. Base and incremental accuracies in the report are
// the final session's split by class group.
inline SessionReport run_protocol(const TrainState& state, const FscilDataset& ds) {
    const EmbedFn embed = make_embed_fn(state.params);
    std::vector<double> accs;
    NcmResult last;
    for (std::size_t s = 0; s < ds.total_sessions(); ++s) {
        last = ncm_evaluate(embed, ds, s);
        accs.push_back(last.accuracy);
    }
    return finalize_report(accs, last.base_accuracy, last.incremental_accuracy);
}

}  // namespace ntklab
