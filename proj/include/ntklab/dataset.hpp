#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <json.hpp>
#include <string>
#include <utility>
#include <vector>

#include "ntklab/io.hpp"
#include "ntklab/matrix.hpp"
#include "ntklab/parallel.hpp"
#include "ntklab/rng.hpp"

namespace ntklab {

// Class-incremental dataset: session 0 holds the base classes, then
// `incremental_sessions` further sessions of `ways` unseen classes each.
// Incremental train splits are exactly `shots` samples per class.
struct FscilDataset {
    Matrix features;
    std::vector<std::size_t> labels;
    std::size_t classes = 0;
    std::size_t base_classes = 0;
    std::size_t incremental_sessions = 0;
    std::size_t ways = 0;
    std::size_t shots = 0;
    std::vector<std::uint8_t> is_test;

    std::vector<std::vector<std::size_t>> train_by_class;
    std::vector<std::vector<std::size_t>> test_by_class;

    std::size_t dim() const { return features.cols(); }
    std::size_t samples() const { return features.rows(); }
    std::size_t total_sessions() const { return incremental_sessions + 1; }

    std::size_t class_session(std::size_t cls) const {
        if (cls >= classes) throw ConfigError("class_session: class id out of range");
        return cls < base_classes ? 0 : 1 + (cls - base_classes) / ways;
    }

    void rebuild_index() {
        train_by_class.assign(classes, {});
        test_by_class.assign(classes, {});
        for (std::size_t i = 0; i < samples(); ++i) {
            if (labels[i] >= classes) throw ConfigError("dataset: label out of range");
            (is_test[i] ? test_by_class : train_by_class)[labels[i]].push_back(i);
        }
    }

    void validate() const {
        if (classes != base_classes + incremental_sessions * ways)
            throw ConfigError("dataset: class count disagrees with session layout");
        if (labels.size() != samples() || is_test.size() != samples())
            throw ConfigError("dataset: per-sample arrays disagree with feature rows");
        for (std::size_t c = base_classes; c < classes; ++c)
            if (train_by_class[c].size() != shots)
                throw ConfigError("dataset: incremental class " + std::to_string(c) + " has " +
                                  std::to_string(train_by_class[c].size()) +
                                  " train samples, expected " + std::to_string(shots));
    }
};

struct SyntheticSpec {
    std::size_t classes = 100;
    std::size_t per_class = 30;
    std::size_t dim = 64;
    double spread = 0.35;
    std::size_t sessions = 8;  // incremental sessions
    std::size_t ways = 5;
    std::size_t shots = 5;
    std::uint64_t seed = 1;
};

// Gaussian blobs around unit-norm class means. Base classes keep roughly a
// fifth of their samples for test; incremental classes keep everything past
// their `shots` training samples.
inline FscilDataset make_synthetic(const SyntheticSpec& s) {
    if (s.ways == 0 || s.sessions == 0) throw ConfigError("make_synthetic: ways and sessions must be positive");
    if (s.classes <= s.sessions * s.ways)
        throw ConfigError("make_synthetic: " + std::to_string(s.classes) + " classes cannot fill " +
                          std::to_string(s.sessions) + " sessions of " + std::to_string(s.ways) +
                          " ways and keep a base session");
    if (s.dim == 0) throw ConfigError("make_synthetic: dim must be positive");
    if (s.shots == 0) throw ConfigError("make_synthetic: shots must be positive");
    if (s.per_class < 2 || s.per_class <= s.shots)
        throw ConfigError("make_synthetic: per_class must exceed shots and leave a test sample");
    if (!(s.spread > 0.0)) throw ConfigError("make_synthetic: spread must be positive");

    FscilDataset ds;
    ds.classes = s.classes;
    ds.base_classes = s.classes - s.sessions * s.ways;
    ds.incremental_sessions = s.sessions;
    ds.ways = s.ways;
    ds.shots = s.shots;

    Rng rng(s.seed);
    Matrix means(s.classes, s.dim);
    for (std::size_t c = 0; c < s.classes; ++c) {
        double n2 = 0.0;
        do {
            for (std::size_t j = 0; j < s.dim; ++j) means(c, j) = rng.normal();
            n2 = norm2(means.row(c), s.dim);
        } while (n2 == 0.0);
        for (std::size_t j = 0; j < s.dim; ++j) means(c, j) /= n2;
    }

    const std::size_t total = s.classes * s.per_class;
    ds.features = Matrix(total, s.dim);
    ds.labels.resize(total);
    ds.is_test.resize(total);
    std::size_t row = 0;
    for (std::size_t c = 0; c < s.classes; ++c) {
        const bool base = c < ds.base_classes;
        const std::size_t test_count =
            base ? std::max<std::size_t>(1, s.per_class / 5) : s.per_class - s.shots;
        const std::size_t train_count = s.per_class - test_count;
        for (std::size_t k = 0; k < s.per_class; ++k, ++row) {
            for (std::size_t j = 0; j < s.dim; ++j)
                ds.features(row, j) = means(c, j) + s.spread * rng.normal();
            ds.labels[row] = c;
            ds.is_test[row] = k >= train_count ? 1 : 0;
        }
    }
    ds.rebuild_index();
    ds.validate();
    return ds;
}

// ----- episodes -------------------------------------------------------------

// n-way m-shot episode with k queries per way, drawn from the base session
// train split. Rows are way-major; subdomain labels reindex the drawn classes
// bijectively to 0..n-1 and the one-hot labels live in that subdomain space.
struct Episode {
    Matrix support_x, query_x;
    Matrix support_y, query_y;
    std::vector<std::size_t> support_subdomain, query_subdomain;
    std::vector<std::size_t> class_ids;
    std::size_t ways = 0, shots = 0, queries = 0;
};

inline Episode sample_episode(const FscilDataset& ds, std::size_t n, std::size_t m, std::size_t k,
                              Rng& rng) {
    if (n == 0 || m == 0) throw ConfigError("sample_episode: ways and shots must be positive");
    if (k == 0) throw ConfigError("sample_episode: query count k must be positive");

    std::vector<std::size_t> eligible;
    for (std::size_t c = 0; c < ds.base_classes; ++c)
        if (ds.train_by_class[c].size() >= m + k) eligible.push_back(c);
    if (eligible.size() < n)
        throw SamplingError("sample_episode: only " + std::to_string(eligible.size()) +
                            " base classes hold " + std::to_string(m + k) +
                            " train samples, need " + std::to_string(n));

    const std::vector<std::size_t> class_order = rng.permutation(eligible.size());

    Episode ep;
    ep.ways = n;
    ep.shots = m;
    ep.queries = k;
    ep.support_x = Matrix(n * m, ds.dim());
    ep.query_x = Matrix(n * k, ds.dim());
    ep.support_y = Matrix(n * m, n);
    ep.query_y = Matrix(n * k, n);
    ep.support_subdomain.resize(n * m);
    ep.query_subdomain.resize(n * k);
    ep.class_ids.resize(n);

    for (std::size_t w = 0; w < n; ++w) {
        const std::size_t cls = eligible[class_order[w]];
        ep.class_ids[w] = cls;
        const std::vector<std::size_t>& pool = ds.train_by_class[cls];
        const std::vector<std::size_t> order = rng.permutation(pool.size());
        for (std::size_t i = 0; i < m; ++i) {
            const std::size_t src = pool[order[i]];
            const std::size_t dst = w * m + i;
            for (std::size_t j = 0; j < ds.dim(); ++j) ep.support_x(dst, j) = ds.features(src, j);
            ep.support_y(dst, w) = 1.0;
            ep.support_subdomain[dst] = w;
        }
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t src = pool[order[m + i]];
            const std::size_t dst = w * k + i;
            for (std::size_t j = 0; j < ds.dim(); ++j) ep.query_x(dst, j) = ds.features(src, j);
            ep.query_y(dst, w) = 1.0;
            ep.query_subdomain[dst] = w;
        }
    }
    return ep;
}

// ----- mixup class extension ------------------------------------------------

inline std::size_t extended_class_count(std::size_t real_classes) {
    return real_classes + real_classes * (real_classes - 1) / 2;
}

// Unordered pair {a, b} of distinct real classes -> stable virtual id in
// [real_classes, extended_class_count). Upper-triangle row-major order.
inline std::size_t virtual_pair_id(std::size_t a, std::size_t b, std::size_t real_classes) {
    if (a == b) throw ConfigError("virtual_pair_id: pair members must differ");
    if (a >= real_classes || b >= real_classes)
        throw ConfigError("virtual_pair_id: member outside real class range");
    const std::size_t i = std::min(a, b), j = std::max(a, b);
    return real_classes + i * (2 * real_classes - i - 1) / 2 + (j - i - 1);
}

inline std::pair<std::size_t, std::size_t> virtual_pair_members(std::size_t id,
                                                                std::size_t real_classes) {
    if (id < real_classes || id >= extended_class_count(real_classes))
        throw ConfigError("virtual_pair_members: id outside virtual range");
    std::size_t rest = id - real_classes;
    for (std::size_t i = 0; i + 1 < real_classes; ++i) {
        const std::size_t row = real_classes - i - 1;
        if (rest < row) return {i, i + rest + 1};
        rest -= row;
    }
    throw ConfigError("virtual_pair_members: unreachable id");
}

struct MixBatch {
    Matrix mixed_x;
    std::vector<std::size_t> mixed_labels;  // extended ids
    std::vector<double> lambdas;
    std::vector<std::size_t> partner;  // row paired with row i
    std::size_t real_class_count = 0;
    std::size_t virtual_class_count = 0;  // distinct virtual ids present
    bool degenerate = false;              // single-class batch, kept as-is
};

// Deterministic core: rows blend with their partner at the given lambdas.
// Equal-class pairs keep the real label; lambda exactly 0 or 1 keeps the
// label of the surviving sample; everything else becomes the virtual class
// of the unordered label pair.
inline MixBatch mixup_apply(const Matrix& x, const std::vector<std::size_t>& labels,
                            const std::vector<std::size_t>& partner,
                            const std::vector<double>& lambdas, std::size_t real_class_count) {
    const std::size_t rows = x.rows();
    if (labels.size() != rows || partner.size() != rows || lambdas.size() != rows)
        throw DimensionError("mixup_apply: per-row arrays disagree with batch");
    for (std::size_t l : labels)
        if (l >= real_class_count) throw ConfigError("mixup_apply: label outside real class range");

    MixBatch out;
    out.real_class_count = real_class_count;
    out.mixed_x = Matrix(rows, x.cols());
    out.mixed_labels.resize(rows);
    out.lambdas = lambdas;
    out.partner = partner;

    std::vector<std::size_t> seen;
    for (std::size_t i = 0; i < rows; ++i) {
        const std::size_t p = partner[i];
        if (p >= rows) throw DimensionError("mixup_apply: partner index out of range");
        const double lam = lambdas[i];
        if (!(lam >= 0.0 && lam <= 1.0)) throw ConfigError("mixup_apply: lambda outside [0,1]");
        for (std::size_t j = 0; j < x.cols(); ++j)
            out.mixed_x(i, j) = lam * x(i, j) + (1.0 - lam) * x(p, j);
        const std::size_t la = labels[i], lb = labels[p];
        if (la == lb || lam == 1.0)
            out.mixed_labels[i] = la;
        else if (lam == 0.0)
            out.mixed_labels[i] = lb;
        else
            out.mixed_labels[i] = virtual_pair_id(la, lb, real_class_count);
        if (out.mixed_labels[i] >= real_class_count) seen.push_back(out.mixed_labels[i]);
    }
    std::sort(seen.begin(), seen.end());
    out.virtual_class_count = std::unique(seen.begin(), seen.end()) - seen.begin();
    return out;
}

// Blends each row with a random partner, Beta(alpha, alpha) coefficients.
// A single-class batch cannot produce virtual classes; it degenerates to the
// identity and says so in the flag.
inline MixBatch mixup_extend(const Matrix& x, const std::vector<std::size_t>& labels,
                             double alpha, std::size_t real_class_count, Rng& rng) {
    if (!(alpha > 0.0)) throw ConfigError("mixup_extend: alpha must be positive");
    if (x.rows() == 0) throw DimensionError("mixup_extend: empty batch");
    for (std::size_t l : labels)
        if (l >= real_class_count)
            throw ConfigError("mixup_extend: label outside real class range");

    bool single_class = true;
    for (std::size_t i = 1; i < labels.size(); ++i)
        if (labels[i] != labels[0]) {
            single_class = false;
            break;
        }
    if (single_class) {
        MixBatch out;
        out.mixed_x = x;
        out.mixed_labels = labels;
        out.lambdas.assign(x.rows(), 1.0);
        out.partner.resize(x.rows());
        for (std::size_t i = 0; i < x.rows(); ++i) out.partner[i] = i;
        out.real_class_count = real_class_count;
        out.degenerate = true;
        return out;
    }

    const std::vector<std::size_t> partner = rng.permutation(x.rows());
    std::vector<double> lambdas(x.rows());
    for (double& l : lambdas) l = rng.beta_sample(alpha, alpha);
    return mixup_apply(x, labels, partner, lambdas, real_class_count);
}

// ----- nearest class mean -------------------------------------------------

using EmbedFn = std::function<Matrix(const Matrix&)>;

struct NcmResult {
    double accuracy = 0.0;
    std::size_t correct = 0, total = 0;
    double base_accuracy = 0.0;
    double incremental_accuracy = 0.0;
    std::size_t base_total = 0, incremental_total = 0;
};

// Cosine nearest-class-mean over every class seen up to and including
// upto_session. Prototypes are mean embeddings of each class's train split;
// ties break to the lowest class id.
inline NcmResult ncm_evaluate(const EmbedFn& embed, const FscilDataset& ds,
                              std::size_t upto_session) {
    if (upto_session >= ds.total_sessions())
        throw ConfigError("ncm_evaluate: session " + std::to_string(upto_session) +
                          " out of range, dataset has " + std::to_string(ds.total_sessions()));

    std::vector<std::size_t> active;
    for (std::size_t c = 0; c < ds.classes; ++c)
        if (ds.class_session(c) <= upto_session) active.push_back(c);

    // Embed every train sample of the active classes in one pass.
    std::vector<std::size_t> proto_rows;
    for (std::size_t c : active)
        for (std::size_t idx : ds.train_by_class[c]) proto_rows.push_back(idx);
    if (proto_rows.empty()) throw SamplingError("ncm_evaluate: no train samples in range");

    Matrix proto_in(proto_rows.size(), ds.dim());
    for (std::size_t i = 0; i < proto_rows.size(); ++i)
        for (std::size_t j = 0; j < ds.dim(); ++j) proto_in(i, j) = ds.features(proto_rows[i], j);
    const Matrix proto_emb = embed(proto_in);
    const std::size_t edim = proto_emb.cols();

    for (std::size_t i = 0; i < proto_rows.size(); ++i)
        if (norm2(proto_emb.row(i), edim) == 0.0)
            throw NumericalError("ncm_evaluate: zero-norm embedding for sample " +
                                 std::to_string(proto_rows[i]));

    Matrix prototypes(active.size(), edim);
    std::size_t cursor = 0;
    for (std::size_t a = 0; a < active.size(); ++a) {
        const std::size_t count = ds.train_by_class[active[a]].size();
        for (std::size_t i = 0; i < count; ++i, ++cursor)
            for (std::size_t j = 0; j < edim; ++j) prototypes(a, j) += proto_emb(cursor, j);
        double n2 = 0.0;
        for (std::size_t j = 0; j < edim; ++j) {
            prototypes(a, j) /= static_cast<double>(count);
            n2 += prototypes(a, j) * prototypes(a, j);
        }
        if (n2 == 0.0)
            throw NumericalError("ncm_evaluate: zero-norm prototype for class " +
                                 std::to_string(active[a]));
        n2 = std::sqrt(n2);
        for (std::size_t j = 0; j < edim; ++j) prototypes(a, j) /= n2;
    }

    std::vector<std::size_t> test_rows;
    for (std::size_t c : active)
        for (std::size_t idx : ds.test_by_class[c]) test_rows.push_back(idx);
    if (test_rows.empty()) throw SamplingError("ncm_evaluate: no test samples in range");

    Matrix test_in(test_rows.size(), ds.dim());
    for (std::size_t i = 0; i < test_rows.size(); ++i)
        for (std::size_t j = 0; j < ds.dim(); ++j) test_in(i, j) = ds.features(test_rows[i], j);
    const Matrix test_emb = embed(test_in);

    std::vector<std::uint8_t> hit(test_rows.size(), 0);
    parallel_for(test_rows.size(), [&](std::size_t i) {
        const double qn = norm2(test_emb.row(i), edim);
        if (qn == 0.0)
            throw NumericalError("ncm_evaluate: zero-norm embedding for sample " +
                                 std::to_string(test_rows[i]));
        double best = -2.0;
        std::size_t best_class = 0;
        for (std::size_t a = 0; a < active.size(); ++a) {
            const double cos = dot(test_emb.row(i), prototypes.row(a), edim) / qn;
            if (cos > best) {
                best = cos;
                best_class = active[a];
            }
        }
        hit[i] = best_class == ds.labels[test_rows[i]] ? 1 : 0;
    });

    NcmResult r;
    r.total = test_rows.size();
    std::size_t base_hit = 0, inc_hit = 0;
    for (std::size_t i = 0; i < test_rows.size(); ++i) {
        const bool base = ds.labels[test_rows[i]] < ds.base_classes;
        r.correct += hit[i];
        if (base) {
            ++r.base_total;
            base_hit += hit[i];
        } else {
            ++r.incremental_total;
            inc_hit += hit[i];
        }
    }
    r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.total);
    r.base_accuracy =
        r.base_total ? static_cast<double>(base_hit) / static_cast<double>(r.base_total) : 0.0;
    r.incremental_accuracy =
        r.incremental_total ? static_cast<double>(inc_hit) / static_cast<double>(r.incremental_total)
                            : 0.0;
    return r;
}

// ----- session metrics ------------------------------------------------------

struct SessionReport {
    std::vector<double> session_accuracy;
    double pd = 0.0;
    double base_accuracy = 0.0;
    double incremental_accuracy = 0.0;
    double harmonic_mean = 0.0;
};

// pd is the exact drop from first to last session; the harmonic mean balances
// base-class against incremental-class accuracy at the final session.
inline SessionReport finalize_report(const std::vector<double>& session_accuracy,
                                     double base_accuracy, double incremental_accuracy) {
    if (session_accuracy.empty()) throw ConfigError("finalize_report: no session accuracies");
    for (double a : session_accuracy)
        if (!(a >= 0.0 && a <= 1.0))
            throw ConfigError("finalize_report: accuracy outside [0,1]");
    SessionReport r;
    r.session_accuracy = session_accuracy;
    r.pd = session_accuracy.front() - session_accuracy.back();
    r.base_accuracy = base_accuracy;
    r.incremental_accuracy = incremental_accuracy;
    const double s = base_accuracy + incremental_accuracy;
    r.harmonic_mean = s > 0.0 ? 2.0 * base_accuracy * incremental_accuracy / s : 0.0;
    return r;
}

inline nlohmann::json session_report_json(const SessionReport& r) {
    nlohmann::json j;
    j["session_accuracy"] = r.session_accuracy;
    j["pd"] = r.pd;
    j["base_accuracy"] = r.base_accuracy;
    j["incremental_accuracy"] = r.incremental_accuracy;
    j["harmonic_mean"] = r.harmonic_mean;
    return j;
}

inline SessionReport session_report_from_json(const nlohmann::json& j) {
    SessionReport r;
    r.session_accuracy = j.at("session_accuracy").get<std::vector<double>>();
    r.pd = j.at("pd").get<double>();
    r.base_accuracy = j.at("base_accuracy").get<double>();
    r.incremental_accuracy = j.at("incremental_accuracy").get<double>();
    r.harmonic_mean = j.at("harmonic_mean").get<double>();
    return r;
}

// ----- dataset files --------------------------------------------------------

// CSV: header "label,f0,...,f{d-1}", one sample per row, %.17g features.
// Manifest JSON carries the session layout and the train/test assignment.
inline void save_dataset(const FscilDataset& ds, const std::string& csv_path,
                         const std::string& manifest_path,
                         const nlohmann::json& generator = nlohmann::json::object()) {
    std::string csv = "label";
    for (std::size_t j = 0; j < ds.dim(); ++j) csv += ",f" + std::to_string(j);
    csv += '\n';
    for (std::size_t i = 0; i < ds.samples(); ++i) {
        csv += std::to_string(ds.labels[i]);
        for (std::size_t j = 0; j < ds.dim(); ++j) {
            csv += ',';
            csv += format_double(ds.features(i, j));
        }
        csv += '\n';
    }
    write_text_file(csv_path, csv);

    nlohmann::json m;
    m["format_version"] = 1;
    m["classes"] = ds.classes;
    m["base_classes"] = ds.base_classes;
    m["sessions"] = ds.incremental_sessions;
    m["ways"] = ds.ways;
    m["shots"] = ds.shots;
    m["dim"] = ds.dim();
    m["samples"] = ds.samples();
    m["is_test"] = ds.is_test;
    if (!generator.empty()) m["generator"] = generator;
    write_text_file(manifest_path, m.dump(2) + "\n");
}

inline FscilDataset load_dataset(const std::string& csv_path, const std::string& manifest_path) {
    nlohmann::json m;
    try {
        m = nlohmann::json::parse(read_text_file(manifest_path));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("load_dataset: manifest is not valid JSON: " + std::string(e.what()));
    }
    FscilDataset ds;
    try {
        if (m.at("format_version").get<int>() != 1)
            throw ConfigError("load_dataset: unsupported manifest version");
        ds.classes = m.at("classes").get<std::size_t>();
        ds.base_classes = m.at("base_classes").get<std::size_t>();
        ds.incremental_sessions = m.at("sessions").get<std::size_t>();
        ds.ways = m.at("ways").get<std::size_t>();
        ds.shots = m.at("shots").get<std::size_t>();
        ds.is_test = m.at("is_test").get<std::vector<std::uint8_t>>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("load_dataset: manifest missing fields: " + std::string(e.what()));
    }
    const std::size_t dim = m.at("dim").get<std::size_t>();
    const std::size_t samples = m.at("samples").get<std::size_t>();

    const std::string csv = read_text_file(csv_path);
    std::istringstream ss(csv);
    std::string line;
    if (!std::getline(ss, line)) throw ConfigError("load_dataset: empty CSV");
    ds.features = Matrix(samples, dim);
    ds.labels.resize(samples);
    std::size_t row = 0;
    while (std::getline(ss, line)) {
        if (line.empty()) continue;
        if (row >= samples) throw ConfigError("load_dataset: more CSV rows than manifest samples");
        const std::vector<std::string> f = split_csv_line(line);
        if (f.size() != dim + 1)
            throw ConfigError("load_dataset: row " + std::to_string(row) + " has " +
                              std::to_string(f.size()) + " fields, expected " +
                              std::to_string(dim + 1));
        ds.labels[row] = static_cast<std::size_t>(parse_double(f[0]));
        for (std::size_t j = 0; j < dim; ++j) ds.features(row, j) = parse_double(f[j + 1]);
        ++row;
    }
    if (row != samples) throw ConfigError("load_dataset: fewer CSV rows than manifest samples");
    ds.rebuild_index();
    ds.validate();
    return ds;
}

}  // namespace ntklab
