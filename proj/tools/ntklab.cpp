// Command-line front end: synthetic dataset generation, base-session
// training, kernel spectrum inspection, the spectral generalization-loss
// solver, checkpoint evaluation, and report pretty-printing.
//
// Exit codes: 0 success, 1 runtime failure (IO, sampling, numerical),
// 2 bad arguments or config, 3 mathematically infeasible request.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "ntklab/ntklab.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ntklab;

namespace {

constexpr const char* kVersion = "0.1.0";

// Datasets live in a directory holding exactly these two files.
constexpr const char* kDatasetCsv = "dataset.csv";
constexpr const char* kManifest = "manifest.json";

FscilDataset load_dataset_dir(const std::string& dir) {
    return load_dataset((fs::path(dir) / kDatasetCsv).string(),
                        (fs::path(dir) / kManifest).string());
}

void reject_unknown_keys(const json& j, const std::string& where,
                         std::initializer_list<const char*> allowed) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : allowed)
            if (it.key() == k) known = true;
        if (!known)
            throw ConfigError("config: unknown key '" + it.key() + "' in " + where);
    }
}

template <class T>
T get_or(const json& j, const char* key, T fallback) {
    return j.contains(key) ? j.at(key).get<T>() : fallback;
}

// ----- gen-data -------------------------------------------------------------

struct GenDataArgs {
    SyntheticSpec spec;
    std::string out;
};

int cmd_gen_data(const GenDataArgs& a) {
    const FscilDataset ds = make_synthetic(a.spec);

    json generator;
    generator["tool_version"] = kVersion;
    generator["classes"] = a.spec.classes;
    generator["per_class"] = a.spec.per_class;
    generator["dim"] = a.spec.dim;
    generator["spread"] = a.spec.spread;
    generator["sessions"] = a.spec.sessions;
    generator["ways"] = a.spec.ways;
    generator["shots"] = a.spec.shots;
    generator["seed"] = a.spec.seed;

    fs::create_directories(a.out);
    save_dataset(ds, (fs::path(a.out) / kDatasetCsv).string(),
                 (fs::path(a.out) / kManifest).string(), generator);

    std::cout << "wrote " << a.out << ": " << ds.samples() << " samples, " << ds.classes
              << " classes (" << ds.base_classes << " base + " << ds.incremental_sessions << "x"
              << ds.ways << " incremental)\n";
    return 0;
}

// ----- train ----------------------------------------------------------------

struct TrainArgs {
    std::string config_path;
    std::string out_override;
    std::string init_weights;
    double gamma = -1.0;  // negative: keep the config value
    double alpha = -1.0;
    double beta_hyper = -1.0;
};

json resolve_train_config(const json& in, const TrainArgs& a, std::string* dataset_dir,
                          NetworkSpec* net_partial, TrainConfig* tc, std::string* out_dir) {
    reject_unknown_keys(in, "top level", {"dataset", "network", "train", "out"});
    if (!in.contains("dataset")) throw ConfigError("config: missing 'dataset'");
    if (!in.contains("out") && a.out_override.empty())
        throw ConfigError("config: missing 'out' (or pass --out)");
    *dataset_dir = in.at("dataset").get<std::string>();
    *out_dir = a.out_override.empty() ? in.at("out").get<std::string>() : a.out_override;

    const json net = in.contains("network") ? in.at("network") : json::object();
    reject_unknown_keys(net, "'network'", {"hidden", "sigma_w", "sigma_b", "conv"});
    net_partial->hidden_widths = get_or<std::vector<std::size_t>>(net, "hidden", {});
    net_partial->sigma_w = get_or<double>(net, "sigma_w", net_partial->sigma_w);
    net_partial->sigma_b = get_or<double>(net, "sigma_b", net_partial->sigma_b);
    if (net.contains("conv")) {
        for (const json& c : net.at("conv")) {
            reject_unknown_keys(c, "'network.conv' entry",
                                {"out_channels", "in_channels", "kernel_h", "kernel_w", "image_h",
                                 "image_w"});
            ConvLayerSpec layer;
            layer.out_channels = c.at("out_channels").get<std::size_t>();
            layer.in_channels = c.at("in_channels").get<std::size_t>();
            layer.kernel_h = c.at("kernel_h").get<std::size_t>();
            layer.kernel_w = c.at("kernel_w").get<std::size_t>();
            layer.image_h = c.at("image_h").get<std::size_t>();
            layer.image_w = c.at("image_w").get<std::size_t>();
            net_partial->conv_front.push_back(layer);
        }
    }

    const json tr = in.contains("train") ? in.at("train") : json::object();
    reject_unknown_keys(tr, "'train'",
                        {"steps", "batch_size", "lr", "auto_eta0", "ways", "shots", "queries",
                         "mix_alpha", "margin_s", "margin_m", "margin_t", "ema_momentum", "gamma",
                         "alpha", "beta_hyper", "spectrum_every", "probe_size", "seed",
                         "divergence_threshold"});
    tc->steps = get_or<std::size_t>(tr, "steps", tc->steps);
    tc->batch_size = get_or<std::size_t>(tr, "batch_size", tc->batch_size);
    tc->lr = get_or<double>(tr, "lr", tc->lr);
    tc->auto_eta0 = get_or<bool>(tr, "auto_eta0", tc->auto_eta0);
    tc->ways = get_or<std::size_t>(tr, "ways", tc->ways);
    tc->shots = get_or<std::size_t>(tr, "shots", tc->shots);
    tc->queries = get_or<std::size_t>(tr, "queries", tc->queries);
    tc->mix_alpha = get_or<double>(tr, "mix_alpha", tc->mix_alpha);
    tc->margin.s = get_or<double>(tr, "margin_s", tc->margin.s);
    tc->margin.m = get_or<double>(tr, "margin_m", tc->margin.m);
    tc->margin.t_ema = get_or<double>(tr, "margin_t", tc->margin.t_ema);
    tc->margin.ema_momentum = get_or<double>(tr, "ema_momentum", tc->margin.ema_momentum);
    tc->gamma = get_or<double>(tr, "gamma", tc->gamma);
    tc->alpha = get_or<double>(tr, "alpha", tc->alpha);
    tc->beta_hyper = get_or<double>(tr, "beta_hyper", tc->beta_hyper);
    tc->spectrum_every = get_or<std::size_t>(tr, "spectrum_every", tc->spectrum_every);
    tc->probe_size = get_or<std::size_t>(tr, "probe_size", tc->probe_size);
    tc->seed = get_or<std::uint64_t>(tr, "seed", tc->seed);
    tc->divergence_threshold = get_or<double>(tr, "divergence_threshold", tc->divergence_threshold);

    // Command-line ablation switches win over the file.
    if (a.gamma >= 0.0) tc->gamma = a.gamma;
    if (a.alpha >= 0.0) tc->alpha = a.alpha;
    if (a.beta_hyper >= 0.0) tc->beta_hyper = a.beta_hyper;

    json resolved;
    resolved["tool_version"] = kVersion;
    resolved["dataset"] = *dataset_dir;
    resolved["out"] = *out_dir;
    resolved["network"]["hidden"] = net_partial->hidden_widths;
    resolved["network"]["sigma_w"] = net_partial->sigma_w;
    resolved["network"]["sigma_b"] = net_partial->sigma_b;
    if (!net_partial->conv_front.empty()) {
        json conv = json::array();
        for (const ConvLayerSpec& c : net_partial->conv_front) {
            json e;
            e["out_channels"] = c.out_channels;
            e["in_channels"] = c.in_channels;
            e["kernel_h"] = c.kernel_h;
            e["kernel_w"] = c.kernel_w;
            e["image_h"] = c.image_h;
            e["image_w"] = c.image_w;
            conv.push_back(e);
        }
        resolved["network"]["conv"] = conv;
    }
    json& t = resolved["train"];
    t["steps"] = tc->steps;
    t["batch_size"] = tc->batch_size;
    t["lr"] = tc->lr;
    t["auto_eta0"] = tc->auto_eta0;
    t["ways"] = tc->ways;
    t["shots"] = tc->shots;
    t["queries"] = tc->queries;
    t["mix_alpha"] = tc->mix_alpha;
    t["margin_s"] = tc->margin.s;
    t["margin_m"] = tc->margin.m;
    t["margin_t"] = tc->margin.t_ema;
    t["ema_momentum"] = tc->margin.ema_momentum;
    t["gamma"] = tc->gamma;
    t["alpha"] = tc->alpha;
    t["beta_hyper"] = tc->beta_hyper;
    t["spectrum_every"] = tc->spectrum_every;
    t["probe_size"] = tc->probe_size;
    t["seed"] = tc->seed;
    t["divergence_threshold"] = tc->divergence_threshold;
    if (!a.init_weights.empty()) resolved["init_weights"] = a.init_weights;
    return resolved;
}

int cmd_train(const TrainArgs& a) {
    const json in = json::parse(read_text_file(a.config_path));

    std::string dataset_dir, out_dir;
    NetworkSpec spec;
    TrainConfig tc;
    const json resolved = resolve_train_config(in, a, &dataset_dir, &spec, &tc, &out_dir);

    const FscilDataset ds = load_dataset_dir(dataset_dir);
    spec.input_dim = ds.dim();
    spec.output_dim = extended_class_count(ds.base_classes);

    ModelParams init;
    const ModelParams* init_ptr = nullptr;
    if (!a.init_weights.empty()) {
        init = load_checkpoint(a.init_weights);
        init_ptr = &init;
    }

    const TrainState state = train_base_session(ds, spec, tc, init_ptr);
    const SessionReport report = run_protocol(state, ds);

    fs::create_directories(out_dir);
    const fs::path out(out_dir);
    save_checkpoint((out / "checkpoint.bin").string(), state.params);
    write_text_file((out / "loss_trace.csv").string(), loss_trace_csv(state.loss_trace));
    write_text_file((out / "spectrum_trace.csv").string(),
                    spectrum_trace_csv(state.spectrum_trace));
    write_text_file((out / "report.json").string(), session_report_json(report).dump(2) + "\n");
    write_text_file((out / "config.json").string(), resolved.dump(2) + "\n");

    std::cout << "run " << out_dir << ": " << state.step << " steps, lr " << format_double(state.lr)
              << "\n";
    std::cout << "sessions";
    for (double acc : report.session_accuracy) std::cout << ' ' << format_double(acc);
    std::cout << "\npd " << format_double(report.pd) << ", harmonic mean "
              << format_double(report.harmonic_mean) << "\n";
    return 0;
}

// ----- ntk ------------------------------------------------------------------

struct NtkArgs {
    std::string checkpoint;
    std::string dataset;
    std::string out;
    std::size_t probe = 32;
    std::string restrict_str = "linear";
    std::uint64_t seed = 1;
};

int cmd_ntk(const NtkArgs& a) {
    const ModelParams params = load_checkpoint(a.checkpoint);
    const FscilDataset ds = load_dataset_dir(a.dataset);
    const NtkRestriction restriction = parse_restriction(a.restrict_str);

    if (a.probe == 0) throw ConfigError("ntk: --probe must be positive");
    std::size_t pool = 0;
    for (std::size_t c = 0; c < ds.base_classes; ++c) pool += ds.train_by_class[c].size();
    if (a.probe > pool)
        throw ConfigError("ntk: --probe " + std::to_string(a.probe) + " exceeds the " +
                          std::to_string(pool) + " base training samples");
    if (params.spec.input_dim != ds.dim())
        throw ConfigError("ntk: checkpoint expects input width " +
                          std::to_string(params.spec.input_dim) + ", dataset provides " +
                          std::to_string(ds.dim()));

    Rng rng(a.seed);
    const Matrix probe = detail::probe_inputs(ds, a.probe, rng);
    const NtkMatrix k = empirical_ntk(params, probe, restriction);

    fs::create_directories(a.out);
    const fs::path out(a.out);
    save_matrix((out / "gram.bin").string(), k.gram());
    write_text_file((out / "eigenvalues.csv").string(),
                    eigenvalues_csv(k.spectrum().eigenvalues));

    json summary;
    summary["tool_version"] = kVersion;
    summary["checkpoint"] = a.checkpoint;
    summary["dataset"] = a.dataset;
    summary["probe"] = a.probe;
    summary["restriction"] = a.restrict_str;
    summary["seed"] = a.seed;
    summary["lambda_min"] = k.lambda_min();
    summary["lambda_max"] = k.lambda_max();
    summary["condition_number"] = k.condition_number();
    write_text_file((out / "ntk_summary.json").string(), summary.dump(2) + "\n");

    std::cout << "probe " << a.probe << " (" << a.restrict_str << "): lambda in ["
              << format_double(k.lambda_min()) << ", " << format_double(k.lambda_max())
              << "], condition number " << format_double(k.condition_number()) << "\n";
    return 0;
}

// ----- genloss ----------------------------------------------------------------

struct GenLossArgs {
    std::string spectrum_csv;
    std::string weights = "unit";
    std::string out;
    std::size_t n = 0;
    double noise = 0.0;
};

std::vector<double> read_value_lines(const std::string& path) {
    std::vector<double> values;
    std::istringstream ss(read_text_file(path));
    std::string line;
    while (std::getline(ss, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        values.push_back(parse_double(line));
    }
    return values;
}

int cmd_genloss(const GenLossArgs& a) {
    const std::vector<double> raw = read_value_lines(a.spectrum_csv);
    std::vector<double> weights;
    if (a.weights == "unit") {
        weights.assign(raw.size(), 1.0);
    } else {
        weights = read_value_lines(a.weights);
        if (weights.size() != raw.size())
            throw ConfigError("genloss: " + std::to_string(weights.size()) + " weights for " +
                              std::to_string(raw.size()) + " eigenvalues");
    }

    // Empirical spectra carry numerically-zero tail values; the solver's
    // domain is strictly positive modes, so those rows are dropped as noise.
    SpectralProblem problem;
    std::size_t dropped = 0;
    for (std::size_t i = 0; i < raw.size(); ++i) {
        if (raw[i] > 0.0) {
            problem.eigenvalues.push_back(raw[i]);
            problem.weights.push_back(weights[i]);
        } else {
            ++dropped;
        }
    }
    if (dropped > 0)
        std::cerr << "note: dropped " << dropped << " non-positive eigenvalues of " << raw.size()
                  << "\n";
    problem.n = a.n;
    problem.noise_variance = a.noise;

    const GenLossReport report = generalization_loss(problem);
    json j = genloss_report_json(problem, report);
    j["tool_version"] = kVersion;
    j["spectrum"] = a.spectrum_csv;
    if (dropped > 0) j["dropped_modes"] = dropped;

    const std::string text = j.dump(2) + "\n";
    std::cout << text;
    if (!a.out.empty()) write_text_file(a.out, text);
    return 0;
}

// ----- eval -------------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint;
    std::string dataset;
    std::string out;
};

int cmd_eval(const EvalArgs& a) {
    TrainState state;
    state.params = load_checkpoint(a.checkpoint);
    const FscilDataset ds = load_dataset_dir(a.dataset);
    if (state.params.spec.input_dim != ds.dim())
        throw ConfigError("eval: checkpoint expects input width " +
                          std::to_string(state.params.spec.input_dim) + ", dataset provides " +
                          std::to_string(ds.dim()));

    const SessionReport report = run_protocol(state, ds);
    std::cout << "sessions";
    for (double acc : report.session_accuracy) std::cout << ' ' << format_double(acc);
    std::cout << "\npd " << format_double(report.pd) << ", harmonic mean "
              << format_double(report.harmonic_mean) << "\n";
    if (!a.out.empty()) write_text_file(a.out, session_report_json(report).dump(2) + "\n");
    return 0;
}

// ----- report -------------------------------------------------------------------

int cmd_report(const std::vector<std::string>& paths) {
    for (const std::string& path : paths) {
        const SessionReport r = session_report_from_json(json::parse(read_text_file(path)));
        std::cout << path << "\n  sessions";
        for (double acc : r.session_accuracy) std::cout << ' ' << format_double(acc);
        std::cout << "\n  pd " << format_double(r.pd) << ", base "
                  << format_double(r.base_accuracy) << ", incremental "
                  << format_double(r.incremental_accuracy) << ", harmonic mean "
                  << format_double(r.harmonic_mean) << "\n";
    }
    return 0;
}

int guarded(const std::function<int()>& body) {
    try {
        return body();
    } catch (const DomainError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const json::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {  // config, dimension, layout
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {  // sampling, numerical, IO
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"kernel-regime training laboratory"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kVersion));

    GenDataArgs gen;
    CLI::App* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic session dataset");
    gen_cmd->add_option("--classes", gen.spec.classes, "total class count");
    gen_cmd->add_option("--per-class", gen.spec.per_class, "samples per class");
    gen_cmd->add_option("--dim", gen.spec.dim, "feature dimension");
    gen_cmd->add_option("--spread", gen.spec.spread, "within-class standard deviation");
    gen_cmd->add_option("--sessions", gen.spec.sessions, "incremental session count");
    gen_cmd->add_option("--ways", gen.spec.ways, "classes per incremental session");
    gen_cmd->add_option("--shots", gen.spec.shots, "train samples per incremental class");
    gen_cmd->add_option("--seed", gen.spec.seed, "generator seed");
    gen_cmd->add_option("--out", gen.out, "output directory")->required();

    TrainArgs train;
    CLI::App* train_cmd = app.add_subcommand("train", "train a base session and run the protocol");
    train_cmd->add_option("config", train.config_path, "experiment config JSON")->required();
    train_cmd->add_option("--out", train.out_override, "run directory (overrides config)");
    train_cmd->add_option("--init-weights", train.init_weights, "checkpoint to start from");
    train_cmd->add_option("--gamma", train.gamma, "pseudo-label loss weight override");
    train_cmd->add_option("--alpha", train.alpha, "conv condition-number weight override");
    train_cmd->add_option("--beta-hyper", train.beta_hyper, "head-kernel range weight override");

    NtkArgs ntk;
    CLI::App* ntk_cmd = app.add_subcommand("ntk", "kernel spectrum of a checkpoint on a dataset");
    ntk_cmd->add_option("checkpoint", ntk.checkpoint, "checkpoint file")->required();
    ntk_cmd->add_option("dataset", ntk.dataset, "dataset directory")->required();
    ntk_cmd->add_option("--out", ntk.out, "output directory")->required();
    ntk_cmd->add_option("--probe", ntk.probe, "probe sample count");
    ntk_cmd->add_option("--restrict", ntk.restrict_str, "'linear' (head only) or 'all'");
    ntk_cmd->add_option("--seed", ntk.seed, "probe sampling seed");

    GenLossArgs gl;
    CLI::App* gl_cmd = app.add_subcommand("genloss", "spectral generalization-loss solve");
    gl_cmd->add_option("spectrum", gl.spectrum_csv, "eigenvalue CSV, one per line, descending")
        ->required();
    gl_cmd->add_option("--n", gl.n, "training sample count")->required();
    gl_cmd->add_option("--noise", gl.noise, "label noise variance");
    gl_cmd->add_option("--weights", gl.weights, "'unit' or a file of target weights");
    gl_cmd->add_option("--out", gl.out, "also write the report JSON here");

    EvalArgs ev;
    CLI::App* eval_cmd = app.add_subcommand("eval", "score a checkpoint over all sessions");
    eval_cmd->add_option("checkpoint", ev.checkpoint, "checkpoint file")->required();
    eval_cmd->add_option("dataset", ev.dataset, "dataset directory")->required();
    eval_cmd->add_option("--out", ev.out, "write the report JSON here");

    std::vector<std::string> report_paths;
    CLI::App* report_cmd = app.add_subcommand("report", "pretty-print session report files");
    report_cmd->add_option("reports", report_paths, "report JSON files")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;  // help/version exit clean, bad flags exit 2
    }

    if (gen_cmd->parsed()) return guarded([&] { return cmd_gen_data(gen); });
    if (train_cmd->parsed()) return guarded([&] { return cmd_train(train); });
    if (ntk_cmd->parsed()) return guarded([&] { return cmd_ntk(ntk); });
    if (gl_cmd->parsed()) return guarded([&] { return cmd_genloss(gl); });
    if (eval_cmd->parsed()) return guarded([&] { return cmd_eval(ev); });
    if (report_cmd->parsed()) return guarded([&] { return cmd_report(report_paths); });
    return 2;
}
