// edg-lab: command-line driver for data generation, training, evaluation,
// sweeps, the interpolation study, bound certification and report rebuilding.
//
// Exit codes: 0 success, 1 experiment failure, 2 configuration or usage error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "edglab/baselines.hpp"
#include "edglab/divergence_lab.hpp"
#include "edglab/dpnets.hpp"
#include "edglab/harness.hpp"
#include "edglab/synthetic_data.hpp"
#include "edglab/tensor_nn.hpp"

namespace fs = std::filesystem;
using Json = nlohmann::json;
using namespace edglab;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;

// Flags shared by every subcommand. Unset optionals leave the config file value alone.
struct Common {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out = "edg-out";
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> workers;
    bool quiet = false;
    std::string cache_dir;
    std::optional<std::string> dataset;
    std::string mnist_dir;
};

Json default_config(const std::string& dataset) {
    return {{"dataset", dataset},
            {"seed", 0},
            {"workers", 1},
            {"env", Json::object()},
            {"algorithm", "dpnets"},
            {"hparams", Json::object()},
            {"space", Json::object()},
            {"search", {{"trials", 20}, {"seeds", 5}, {"selection", "training-domain-validation"}, {"holdout", 0.2}}},
            {"sweep", {{"axis", "none"}, {"values", Json::array()}, {"algorithms", {"dpnets", "erm"}}}},
            {"interp", {{"counts", {5, 7, 9, 11}}}}};
}

Json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    try {
        return Json::parse(in);
    } catch (const Json::exception& e) {
        throw ConfigError("config file " + path + ": " + e.what());
    }
}

/// key.path=value; the value is parsed as JSON when possible, otherwise kept as a string.
void apply_override(Json& cfg, const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + kv + "'");
    const std::string key = kv.substr(0, eq);
    const std::string raw = kv.substr(eq + 1);
    Json value;
    try {
        value = Json::parse(raw);
    } catch (const Json::exception&) {
        value = raw;
    }
    Json* node = &cfg;
    std::stringstream ks(key);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ks, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        auto& next = (*node)[parts[i]];
        if (!next.is_object()) next = Json::object();
        node = &next;
    }
    (*node)[parts.back()] = value;
}

template <class T>
std::vector<T> parse_list(const std::string& csv, T (*conv)(const std::string&)) {
    std::vector<T> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(conv(item));
    return out;
}

double to_double(const std::string& s) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("not a number: '" + s + "'");
    }
}

std::string to_str(const std::string& s) { return s; }

/// Defaults, then the config file, then --set, then explicit flags.
Json merged_config(const Common& c, const std::string& default_dataset = "evolcircle") {
    Json cfg = default_config(default_dataset);
    if (!c.config_path.empty()) cfg.merge_patch(read_json_file(c.config_path));
    for (const auto& kv : c.overrides) apply_override(cfg, kv);
    if (c.seed) cfg["seed"] = *c.seed;
    if (c.workers) cfg["workers"] = *c.workers;
    if (c.dataset) cfg["dataset"] = *c.dataset;
    return cfg;
}

data::EnvironmentSpec env_spec(const Json& cfg, const Common& c) {
    const auto kind = data::parse_env_kind(cfg.at("dataset").get<std::string>());
    Json j = data::to_json(data::EnvironmentSpec::defaults(kind));
    j["seed"] = cfg.at("seed");
    j.merge_patch(cfg.at("env"));
    j["kind"] = std::string(data::to_string(kind));
    auto spec = data::spec_from_json(j);
    if (kind == data::EnvKind::RotatedMNIST) {
        if (!c.mnist_dir.empty()) spec.extra.mnist_dir = c.mnist_dir;
        if (spec.extra.mnist_dir.empty()) {
            const char* env = std::getenv("EDG_MNIST_DIR");
            spec.extra.mnist_dir = env ? env : "data/mnist";
        }
    }
    data::validate(spec);
    return spec;
}

harness::Logger make_logger(bool quiet) {
    if (quiet) return {};
    return [](const Json& ev) { std::cerr << ev.dump() << '\n'; };
}

harness::SearchConfig search_config(const Json& cfg, const Common& c) {
    const auto& s = cfg.at("search");
    harness::SearchConfig sc;
    sc.n_trials = s.at("trials").get<std::size_t>();
    sc.n_seeds = s.at("seeds").get<std::size_t>();
    sc.strategy = harness::parse_selection(s.at("selection").get<std::string>());
    sc.master_seed = cfg.at("seed").get<std::uint64_t>();
    sc.workers = cfg.at("workers").get<std::size_t>();
    sc.log = make_logger(c.quiet);
    return sc;
}

harness::HParamSpace space_config(const Json& cfg, data::EnvKind kind) {
    return harness::hparam_space_from_json(cfg.at("space"), harness::HParamSpace::for_env(kind));
}

void write_json(const fs::path& p, const Json& j) {
    fs::create_directories(p.parent_path());
    harness::write_text(p, j.dump(2) + "\n");
}

// ------------------------------------------------------------------ commands

int cmd_gen_data(const Common& c) {
    const auto cfg = merged_config(c);
    const auto spec = env_spec(cfg, c);
    const auto domains = data::generate_cached(spec, c.cache_dir);
    fs::create_directories(c.out);
    const auto path = fs::path(c.out) / "domains.jsonl";
    data::save_domains_jsonl(path.string(), spec, domains);
    std::size_t n = 0;
    for (const auto& d : domains) n += d.samples.size();
    std::cout << "gen-data: " << data::to_string(spec.kind) << ", " << domains.size() << " domains, " << n
              << " samples -> " << path.string() << '\n';
    return kExitOk;
}

int cmd_train(const Common& c, const std::optional<std::string>& algo_flag) {
    auto cfg = merged_config(c);
    if (algo_flag) cfg["algorithm"] = *algo_flag;
    const auto spec = env_spec(cfg, c);
    const auto algo = harness::parse_algorithm(cfg.at("algorithm").get<std::string>());
    auto h = harness::hparams_from_json(cfg.at("hparams"));
    if (!cfg.at("hparams").contains("embed_dim")) h.embed_dim = harness::HParamSpace::for_env(spec.kind).embed_dim;
    if (spec.kind == data::EnvKind::RotatedMNIST) {
        if (!cfg.at("hparams").contains("hidden")) h.hidden = {256};
        if (!cfg.at("hparams").contains("n_b")) h.n_b = 10;
    }
    harness::validate(h);
    const auto seed = cfg.at("seed").get<std::uint64_t>();
    const auto domains = data::generate_cached(spec, c.cache_dir);
    const auto env = harness::prepare_extrapolation(domains, 0.0, spec.seed);
    auto log = make_logger(c.quiet);

    fs::create_directories(c.out);
    const auto ckpt = fs::path(c.out) / "model.ckpt";
    Json sidecar{{"algorithm", harness::to_string(algo)}, {"hparams", harness::to_json(h)}, {"env", data::to_json(spec)},
                 {"seed", seed}};
    double target_acc = 0.0;
    if (harness::is_episodic(algo)) {
        const auto mode =
            algo == harness::Algorithm::DPNets ? dpnets::EpisodeMode::Directional : dpnets::EpisodeMode::SameDomain;
        dpnets::TrainConfig tc;
        tc.steps = h.steps;
        tc.n_b = std::min(h.n_b, harness::max_episode_n_b(env.train, mode));
        tc.optimizer.lr = h.lr;
        tc.seed = seed;
        tc.mode = mode;
        if (log)
            tc.progress = [&](std::size_t step, double loss, double acc) {
                if ((step + 1) % 100 == 0) log({{"event", "step"}, {"step", step + 1}, {"loss", loss}, {"query_acc", acc}});
            };
        std::vector<std::size_t> dims{env.train.front().feature_dim()};
        dims.insert(dims.end(), h.hidden.begin(), h.hidden.end());
        dims.push_back(h.embed_dim);
        const auto K = env.train.front().num_classes;
        auto tr = algo == harness::Algorithm::DPNets ? dpnets::train(dpnets::make_model(dims, K, seed), env.train, tc)
                                                     : baselines::train_proto_vanilla(env.train, dims, tc);
        dpnets::save_model(ckpt.string(), tr.model);
        sidecar["model"] = dpnets::sidecar_json(tr.model);
        target_acc = harness::proto_accuracy(tr.model, env.sources.back(), env.target);
    } else {
        baselines::ErmConfig ec;
        ec.steps = h.steps;
        ec.batch_size = 2 * env.train.front().num_classes * h.n_b;
        ec.hidden = h.hidden;
        ec.optimizer.lr = h.lr;
        ec.seed = seed;
        if (log)
            ec.progress = [&](std::size_t step, double loss) {
                if ((step + 1) % 100 == 0) log({{"event", "step"}, {"step", step + 1}, {"loss", loss}});
            };
        const auto model = baselines::train_erm(env.train, ec, harness::index_mode_of(algo), harness::last_k_of(algo));
        const std::vector<nn::MlpParams> nets{model.net};
        nn::save_checkpoint(ckpt.string(), nets);
        sidecar["model"] = {{"architecture", model.net.dims()},
                            {"index_mode", baselines::to_string(model.index_mode)},
                            {"num_domains_seen", model.num_domains_seen},
                            {"feature_dim", model.feature_dim},
                            {"num_classes", model.num_classes}};
        target_acc = harness::accuracy_of(
            baselines::predict_erm_batch(model, env.target.samples, model.num_domains_seen), env.target.samples);
    }
    sidecar["target_acc"] = target_acc;
    write_json(fs::path(c.out) / "model.json", sidecar);
    std::ifstream in(ckpt, std::ios::binary);
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    char hash[32];
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(nn::fnv1a64(bytes)));
    std::cout << "train: " << harness::to_string(algo) << " on " << data::to_string(spec.kind)
              << ", target accuracy " << harness::format_cell(target_acc, 0.0).substr(0, 4) << "%, checkpoint "
              << ckpt.string() << " fnv1a64=" << hash << '\n';
    return kExitOk;
}

int cmd_eval(const Common& c, const std::string& model_dir) {
    const auto sidecar = read_json_file((fs::path(model_dir) / "model.json").string());
    const auto ckpt = (fs::path(model_dir) / "model.ckpt").string();
    auto spec = data::spec_from_json(sidecar.at("env"));
    if (spec.kind == data::EnvKind::RotatedMNIST && !c.mnist_dir.empty()) spec.extra.mnist_dir = c.mnist_dir;
    const auto algo = harness::parse_algorithm(sidecar.at("algorithm").get<std::string>());
    const auto env = harness::prepare_extrapolation(data::generate_cached(spec, c.cache_dir), 0.0, spec.seed);
    double acc = 0.0;
    if (harness::is_episodic(algo)) {
        const auto model = dpnets::load_model(ckpt, sidecar.at("model"));
        acc = harness::proto_accuracy(model, env.sources.back(), env.target);
    } else {
        auto nets = nn::load_checkpoint(ckpt);
        if (nets.size() != 1) throw IngestionError(ckpt, 12, "expected one network");
        const auto& m = sidecar.at("model");
        baselines::ErmModel model{std::move(nets[0]), harness::index_mode_of(algo),
                                  m.at("num_domains_seen").get<std::size_t>(), m.at("feature_dim").get<std::size_t>(),
                                  m.at("num_classes").get<std::size_t>()};
        acc = harness::accuracy_of(baselines::predict_erm_batch(model, env.target.samples, model.num_domains_seen),
                                   env.target.samples);
    }
    const Json result{{"algorithm", harness::to_string(algo)},
                      {"dataset", data::to_string(spec.kind)},
                      {"target_index", env.target_index},
                      {"target_acc", acc}};
    write_json(fs::path(c.out) / "eval.json", result);
    std::cout << result.dump() << '\n';
    return kExitOk;
}

int finish_report(const std::vector<harness::Cell>& cells, const Common& c, const std::string& title) {
    const auto paths = harness::emit_report(cells, c.out, title);
    std::cout << title << ": " << cells.size() << " cells -> " << paths.markdown.string() << ", " << paths.csv.string()
              << ", " << paths.raw_dir.string() << '\n';
    if (harness::any_failed(cells)) {
        std::cerr << "one or more cells failed; see " << paths.csv.string() << '\n';
        return kExitFailure;
    }
    return kExitOk;
}

struct SweepFlags {
    std::optional<std::string> axis;
    std::optional<std::string> values;
    std::optional<std::string> algos;
    std::optional<std::size_t> trials;
    std::optional<std::size_t> seeds;
    std::optional<std::string> selection;
    std::optional<double> holdout;
    std::optional<std::string> counts;
};

void apply_search_flags(Json& cfg, const SweepFlags& f) {
    if (f.trials) cfg["search"]["trials"] = *f.trials;
    if (f.seeds) cfg["search"]["seeds"] = *f.seeds;
    if (f.selection) cfg["search"]["selection"] = *f.selection;
    if (f.holdout) cfg["search"]["holdout"] = *f.holdout;
}

int cmd_sweep(const Common& c, const SweepFlags& f) {
    auto cfg = merged_config(c);
    apply_search_flags(cfg, f);
    if (f.axis) cfg["sweep"]["axis"] = *f.axis;
    if (f.values) cfg["sweep"]["values"] = parse_list<double>(*f.values, to_double);
    if (f.algos) cfg["sweep"]["algorithms"] = parse_list<std::string>(*f.algos, to_str);

    harness::SweepConfig sc;
    sc.base = env_spec(cfg, c);
    sc.axis = harness::parse_axis(cfg.at("sweep").at("axis").get<std::string>());
    sc.values = cfg.at("sweep").at("values").get<std::vector<double>>();
    sc.algorithms.clear();
    for (const auto& a : cfg.at("sweep").at("algorithms")) sc.algorithms.push_back(harness::parse_algorithm(a.get<std::string>()));
    sc.space = space_config(cfg, sc.base.kind);
    sc.search = search_config(cfg, c);
    sc.holdout = cfg.at("search").at("holdout").get<double>();
    sc.cache_dir = c.cache_dir;
    const auto cells = harness::run_sweep(sc);
    return finish_report(cells, c, std::string("sweep (") + std::string(data::to_string(sc.base.kind)) + ", axis " +
                                       std::string(harness::to_string(sc.axis)) + ")");
}

int cmd_interp(const Common& c, const SweepFlags& f) {
    auto cfg = merged_config(c, "rotated-cloud");
    apply_search_flags(cfg, f);
    if (f.counts) {
        Json counts = Json::array();
        for (double v : parse_list<double>(*f.counts, to_double)) counts.push_back(static_cast<std::size_t>(v));
        cfg["interp"]["counts"] = counts;
    }
    harness::InterpolationConfig ic;
    ic.base = env_spec(cfg, c);
    ic.domain_counts = cfg.at("interp").at("counts").get<std::vector<std::size_t>>();
    ic.space = space_config(cfg, ic.base.kind);
    ic.search = search_config(cfg, c);
    ic.holdout = cfg.at("search").at("holdout").get<double>();
    ic.cache_dir = c.cache_dir;
    const auto cells = harness::run_interpolation_study(ic);
    return finish_report(cells, c, std::string("interpolation study (") + std::string(data::to_string(ic.base.kind)) + ")");
}

int cmd_verify_bounds(const Common& c, std::size_t instances, const std::string& coefficient) {
    const auto cfg = merged_config(c);
    divergence::CertifyConfig cc;
    cc.bound_instances = instances;
    cc.decomposition_instances = 10 * instances;
    cc.seed = cfg.at("seed").get<std::uint64_t>();
    cc.threads = cfg.at("workers").get<std::size_t>();
    Json out = Json::object();
    std::vector<divergence::JsCoefficient> which;
    if (coefficient == "inv-sqrt2" || coefficient == "both") which.push_back(divergence::JsCoefficient::InvSqrt2);
    if (coefficient == "sqrt2" || coefficient == "both") which.push_back(divergence::JsCoefficient::Sqrt2);
    std::string md = "# Bound certification\n\n";
    for (auto k : which) {
        cc.coefficient = k;
        const auto rep = divergence::certify(cc);
        out[k == divergence::JsCoefficient::InvSqrt2 ? "inv_sqrt2" : "sqrt2"] = divergence::to_json(rep);
        md += divergence::summary_markdown(rep) + "\n";
    }
    out["seed"] = cc.seed;
    out["bound_instances"] = cc.bound_instances;
    out["decomposition_instances"] = cc.decomposition_instances;
    write_json(fs::path(c.out) / "bounds.json", out);
    harness::write_text(fs::path(c.out) / "bounds.md", md);
    std::cout << out.dump(2) << '\n';
    return kExitOk;
}

int cmd_report(const Common& c, const std::string& in_dir, const std::string& title) {
    const auto cells = harness::load_raw_cells(fs::path(in_dir) / "raw");
    const auto out = c.out.empty() ? in_dir : c.out;
    fs::create_directories(out);
    harness::write_text(fs::path(out) / "results.md", harness::render_markdown(cells, title));
    harness::write_text(fs::path(out) / "results.csv", harness::render_csv(cells));
    std::cout << "report: " << cells.size() << " cells -> " << (fs::path(out) / "results.md").string() << ", "
              << (fs::path(out) / "results.csv").string() << '\n';
    return harness::any_failed(cells) ? kExitFailure : kExitOk;
}

void add_common(CLI::App* app, Common& c) {
    app->add_option("--config", c.config_path, "JSON experiment config (overridden by --set and flags)")
        ->check(CLI::ExistingFile);
    app->add_option("--set", c.overrides, "Config override key.path=value (repeatable)");
    app->add_option("--out", c.out, "Output directory")->capture_default_str();
    app->add_option("--seed", c.seed, "Master seed");
    app->add_option("--workers", c.workers, "Worker threads");
    app->add_flag("--quiet", c.quiet, "Plain output: no JSON progress events on stderr");
    app->add_option("--cache-dir", c.cache_dir, "Dataset cache directory")->envname("EDG_CACHE_DIR");
    app->add_option("--dataset", c.dataset, "evolcircle | rplate | rotated-cloud | rmnist");
    app->add_option("--mnist-dir", c.mnist_dir, "Directory with MNIST IDX files (default $EDG_MNIST_DIR or data/mnist)");
}

void add_search_flags(CLI::App* app, SweepFlags& f) {
    app->add_option("--trials", f.trials, "Random-search trials per cell");
    app->add_option("--seeds", f.seeds, "Seeds per trial");
    app->add_option("--selection", f.selection, "training-domain-validation | oracle-max-query");
    app->add_option("--holdout", f.holdout, "Validation fraction of each source domain");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"edg-lab: evolving domain generalization workbench"};
    app.require_subcommand(1);
    Common common;

    auto* gen = app.add_subcommand("gen-data", "Generate (or load) a dataset and write it as JSON lines");
    add_common(gen, common);

    std::optional<std::string> algo;
    auto* train = app.add_subcommand("train", "Train one model on the source domains and save a checkpoint");
    add_common(train, common);
    train->add_option("--algo", algo,
                      "dpnets | erm | erm_scalar | erm_onehot | erm_outer | erm_last1 | erm_last2 | erm_last3 | proto");

    std::string model_dir;
    auto* eval = app.add_subcommand("eval", "Score a saved model on its target domain");
    add_common(eval, common);
    eval->add_option("--model", model_dir, "Directory written by train")->required();

    SweepFlags sweep_flags;
    auto* sweep = app.add_subcommand("sweep", "Random search per (axis value, algorithm) cell");
    add_common(sweep, common);
    add_search_flags(sweep, sweep_flags);
    sweep->add_option("--axis", sweep_flags.axis, "none | count | distance");
    sweep->add_option("--values", sweep_flags.values, "Comma-separated axis values");
    sweep->add_option("--algos", sweep_flags.algos, "Comma-separated algorithms");

    SweepFlags interp_flags;
    auto* interp = app.add_subcommand("interp-study", "Extrapolation vs interpolation over domain counts");
    add_common(interp, common);
    add_search_flags(interp, interp_flags);
    interp->add_option("--counts", interp_flags.counts, "Comma-separated domain counts");

    std::size_t instances = 1000;
    std::string coefficient = "both";
    auto* verify = app.add_subcommand("verify-bounds", "Randomised certification of the risk bounds");
    add_common(verify, common);
    verify->add_option("--instances", instances, "Instances per bound (decomposition uses 10x)")->capture_default_str();
    verify->add_option("--coefficient", coefficient, "inv-sqrt2 | sqrt2 | both")
        ->check(CLI::IsMember({"inv-sqrt2", "sqrt2", "both"}))
        ->capture_default_str();

    std::string in_dir;
    std::string title = "results";
    auto* report = app.add_subcommand("report", "Rebuild results.md / results.csv from raw/*.json");
    add_common(report, common);
    report->add_option("--in", in_dir, "Directory containing raw/")->required();
    report->add_option("--title", title, "Markdown title")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*gen) return cmd_gen_data(common);
        if (*train) return cmd_train(common, algo);
        if (*eval) return cmd_eval(common, model_dir);
        if (*sweep) return cmd_sweep(common, sweep_flags);
        if (*interp) return cmd_interp(common, interp_flags);
        if (*verify) return cmd_verify_bounds(common, instances, coefficient);
        if (*report) {
            if (common.out == "edg-out") common.out = in_dir;
            return cmd_report(common, in_dir, title);
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const Json::exception& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitFailure;
    }
    return kExitConfig;
}
