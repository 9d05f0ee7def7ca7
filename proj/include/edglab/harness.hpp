#pragma once

// Experiment orchestration: random hyperparameter search over seeded trials,
// model selection, sweeps over an environment axis, the interpolation study,
// and Markdown / CSV / raw JSON reports.
//
// Every random draw derives from the master seed, and every run writes into a
// slot fixed by its (trial, seed) index, so results do not depend on the
// number of worker threads.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "edglab/baselines.hpp"
#include "edglab/dpnets.hpp"
#include "edglab/error.hpp"
#include "edglab/rng.hpp"
#include "edglab/synthetic_data.hpp"
#include "edglab/tensor_nn.hpp"

namespace edglab::harness {

using data::DomainData;
using data::EnvKind;
using data::EnvironmentSpec;
using data::Sample;
using Json = nlohmann::json;
using Logger = std::function<void(const Json&)>;

// ----------------------------------------------------------------- algorithms

enum class Algorithm { DPNets, Erm, ErmScalar, ErmOneHot, ErmOuter, ErmLast1, ErmLast2, ErmLast3, ProtoVanilla };

inline constexpr std::array kAllAlgorithms{Algorithm::DPNets,    Algorithm::Erm,      Algorithm::ErmScalar,
                                           Algorithm::ErmOneHot, Algorithm::ErmOuter, Algorithm::ErmLast1,
                                           Algorithm::ErmLast2,  Algorithm::ErmLast3, Algorithm::ProtoVanilla};

inline std::string_view to_string(Algorithm a) {
    switch (a) {
        case Algorithm::DPNets: return "dpnets";
        case Algorithm::Erm: return "erm";
        case Algorithm::ErmScalar: return "erm_scalar";
        case Algorithm::ErmOneHot: return "erm_onehot";
        case Algorithm::ErmOuter: return "erm_outer";
        case Algorithm::ErmLast1: return "erm_last1";
        case Algorithm::ErmLast2: return "erm_last2";
        case Algorithm::ErmLast3: return "erm_last3";
        case Algorithm::ProtoVanilla: return "proto";
    }
    return "?";
}

inline Algorithm parse_algorithm(std::string_view s) {
    for (auto a : kAllAlgorithms)
        if (to_string(a) == s) return a;
    throw ConfigError("unknown algorithm '" + std::string(s) + "'");
}

inline bool is_episodic(Algorithm a) { return a == Algorithm::DPNets || a == Algorithm::ProtoVanilla; }

inline baselines::IndexMode index_mode_of(Algorithm a) {
    switch (a) {
        case Algorithm::ErmScalar: return baselines::IndexMode::ScalarConcat;
        case Algorithm::ErmOneHot: return baselines::IndexMode::OneHotConcat;
        case Algorithm::ErmOuter: return baselines::IndexMode::OuterProduct;
        default: return baselines::IndexMode::None;
    }
}

inline std::optional<std::size_t> last_k_of(Algorithm a) {
    switch (a) {
        case Algorithm::ErmLast1: return 1;
        case Algorithm::ErmLast2: return 2;
        case Algorithm::ErmLast3: return 3;
        default: return std::nullopt;
    }
}

// ----------------------------------------------------------------- hparams

struct HParams {
    double lr = 1e-2;
    std::size_t steps = 1000;
    std::size_t n_b = 16;
    std::vector<std::size_t> hidden;  // empty = linear
    std::size_t embed_dim = 16;

    friend bool operator==(const HParams&, const HParams&) = default;
};

inline Json to_json(const HParams& h) {
    return {{"lr", h.lr}, {"steps", h.steps}, {"n_b", h.n_b}, {"hidden", h.hidden}, {"embed_dim", h.embed_dim}};
}

inline HParams hparams_from_json(const Json& j) {
    HParams h;
    h.lr = j.value("lr", h.lr);
    h.steps = j.value("steps", h.steps);
    h.n_b = j.value("n_b", h.n_b);
    h.hidden = j.value("hidden", h.hidden);
    h.embed_dim = j.value("embed_dim", h.embed_dim);
    return h;
}

inline void validate(const HParams& h) {
    if (!(h.lr > 0.0) || !std::isfinite(h.lr)) throw ConfigError("hparams: lr must be positive");
    if (h.steps == 0) throw ConfigError("hparams: steps must be positive");
    if (h.n_b == 0) throw ConfigError("hparams: n_b must be positive");
    if (h.embed_dim == 0) throw ConfigError("hparams: embed_dim must be positive");
    for (auto w : h.hidden)
        if (w == 0) throw ConfigError("hparams: zero-width hidden layer");
}

struct HParamSpace {
    double lr_lo = 1e-4;
    double lr_hi = 1e-1;
    std::vector<std::size_t> steps{500, 1000, 2000};
    std::vector<std::size_t> n_b{8, 16, 32};
    std::vector<std::vector<std::size_t>> hidden{{}};
    std::size_t embed_dim = 16;

    /// Linear heads for the 2-D benchmarks, one- or two-layer MLPs for RMNIST.
    static HParamSpace for_env(EnvKind kind) {
        HParamSpace s;
        if (kind == EnvKind::RotatedMNIST) {
            s.hidden = {{128}, {256, 128}};
            s.embed_dim = 128;
        }
        return s;
    }

    void validate() const {
        if (!(lr_lo > 0.0) || !(lr_hi >= lr_lo)) throw ConfigError("hparam space: need 0 < lr_lo <= lr_hi");
        if (steps.empty() || n_b.empty() || hidden.empty()) throw ConfigError("hparam space: empty choice list");
    }

    /// lr log-uniform on [lr_lo, lr_hi]; the rest uniform over their choices.
    HParams sample(Rng& rng) const {
        validate();
        HParams h;
        h.lr = std::exp(rng.uniform(std::log(lr_lo), std::log(lr_hi)));
        h.steps = steps[rng.below(steps.size())];
        h.n_b = n_b[rng.below(n_b.size())];
        h.hidden = hidden[rng.below(hidden.size())];
        h.embed_dim = embed_dim;
        harness::validate(h);
        return h;
    }
};

inline Json to_json(const HParamSpace& s) {
    return {{"lr_lo", s.lr_lo},     {"lr_hi", s.lr_hi},   {"steps", s.steps},
            {"n_b", s.n_b},         {"hidden", s.hidden}, {"embed_dim", s.embed_dim}};
}

inline HParamSpace hparam_space_from_json(const Json& j, HParamSpace base) {
    base.lr_lo = j.value("lr_lo", base.lr_lo);
    base.lr_hi = j.value("lr_hi", base.lr_hi);
    base.steps = j.value("steps", base.steps);
    base.n_b = j.value("n_b", base.n_b);
    base.hidden = j.value("hidden", base.hidden);
    base.embed_dim = j.value("embed_dim", base.embed_dim);
    base.validate();
    return base;
}

// ----------------------------------------------------------------- environment

/// Source domains (train and validation halves) plus the held-out target.
struct PreparedEnv {
    std::vector<DomainData> sources;  // full source domains, in order
    std::vector<DomainData> train;    // training halves (== sources when holdout is 0)
    std::vector<DomainData> val;      // validation halves (empty when holdout is 0)
    DomainData target;
    std::size_t target_index = 0;  // position of the target in the original sequence

    bool has_validation() const { return !val.empty(); }
};

/// Removes `target_index` from the sequence; the remaining domains, in order, are the sources.
inline PreparedEnv prepare(const std::vector<DomainData>& domains, std::size_t target_index, double holdout,
                           std::uint64_t split_seed) {
    if (domains.size() < 3) throw ConfigError("prepare: need at least two sources and a target");
    if (target_index >= domains.size()) throw ConfigError("prepare: target index out of range");
    if (!(holdout >= 0.0 && holdout < 1.0)) throw ConfigError("prepare: holdout must lie in [0, 1)");
    PreparedEnv e;
    e.target_index = target_index;
    for (std::size_t i = 0; i < domains.size(); ++i) {
        if (i == target_index) {
            e.target = domains[i];
            continue;
        }
        e.sources.push_back(domains[i]);
    }
    if (holdout == 0.0) {
        e.train = e.sources;
        return e;
    }
    for (const auto& d : e.sources) {
        auto [v, t] = data::split_train_val(d, holdout, split_seed);
        e.train.push_back(std::move(t));
        e.val.push_back(std::move(v));
    }
    return e;
}

inline PreparedEnv prepare_extrapolation(const std::vector<DomainData>& domains, double holdout, std::uint64_t seed) {
    return prepare(domains, domains.size() - 1, holdout, seed);
}

/// Middle of the sequence; the lower median for an even count.
inline std::size_t interpolation_target(std::size_t num_domains) { return (num_domains - 1) / 2; }

// ----------------------------------------------------------------- evaluation

inline double evaluate_accuracy(const std::function<std::size_t(const Sample&)>& predict, const DomainData& domain) {
    if (domain.samples.empty()) throw ConfigError("evaluate_accuracy: empty domain");
    std::size_t correct = 0;
    for (const auto& s : domain.samples)
        if (predict(s) == s.y) ++correct;
    return static_cast<double>(correct) / static_cast<double>(domain.samples.size());
}

inline double accuracy_of(std::span<const std::size_t> predicted, std::span<const Sample> truth) {
    if (truth.empty() || predicted.size() != truth.size()) throw ConfigError("accuracy_of: size mismatch or empty");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < truth.size(); ++i)
        if (predicted[i] == truth[i].y) ++correct;
    return static_cast<double>(correct) / static_cast<double>(truth.size());
}

/// Classifies `queries` against prototypes of `support` (f_phi) with the f_psi query encoder.
inline double proto_accuracy(const dpnets::DPNetModel& m, const DomainData& support, const DomainData& queries) {
    return accuracy_of(dpnets::predict_target(m, support, queries.samples), queries.samples);
}

// ----------------------------------------------------------------- single run

struct RunResult {
    double target_acc = std::numeric_limits<double>::quiet_NaN();
    double val_acc = std::numeric_limits<double>::quiet_NaN();
    std::vector<double> loss_trace;
    std::size_t effective_n_b = 0;
    std::optional<std::string> error;

    bool ok() const { return !error.has_value(); }
};

/// Largest N_B every source domain can serve for the episode mode.
inline std::size_t max_episode_n_b(const std::vector<DomainData>& domains, dpnets::EpisodeMode mode) {
    std::size_t lo = std::numeric_limits<std::size_t>::max();
    for (const auto& d : domains)
        for (auto c : d.class_counts()) lo = std::min(lo, c);
    return mode == dpnets::EpisodeMode::SameDomain ? lo / 2 : lo;
}

namespace detail {

inline std::vector<std::size_t> encoder_dims(std::size_t in, const HParams& h) {
    std::vector<std::size_t> dims{in};
    dims.insert(dims.end(), h.hidden.begin(), h.hidden.end());
    dims.push_back(h.embed_dim);
    return dims;
}

inline RunResult run_episodic(Algorithm algo, const HParams& h, const PreparedEnv& env, std::uint64_t seed) {
    RunResult r;
    const auto mode = algo == Algorithm::DPNets ? dpnets::EpisodeMode::Directional : dpnets::EpisodeMode::SameDomain;
    const auto cap = max_episode_n_b(env.train, mode);
    if (cap == 0) throw SamplingError("a source class is too small to form an episode");
    dpnets::TrainConfig cfg;
    cfg.steps = h.steps;
    cfg.n_b = std::min(h.n_b, cap);
    cfg.optimizer.lr = h.lr;
    cfg.seed = seed;
    cfg.mode = mode;
    r.effective_n_b = cfg.n_b;
    const auto dims = encoder_dims(env.train.front().feature_dim(), h);
    const auto K = env.train.front().num_classes;
    dpnets::TrainResult tr = algo == Algorithm::DPNets
                                 ? dpnets::train(dpnets::make_model(dims, K, seed), env.train, cfg)
                                 : baselines::train_proto_vanilla(env.train, dims, cfg);
    r.loss_trace = std::move(tr.loss_trace);
    const auto& model = tr.model;
    if (algo == Algorithm::DPNets) {
        r.target_acc = proto_accuracy(model, env.sources.back(), env.target);
        if (env.has_validation()) {
            double s = 0.0;
            for (std::size_t i = 1; i < env.val.size(); ++i) s += proto_accuracy(model, env.train[i - 1], env.val[i]);
            r.val_acc = s / static_cast<double>(env.val.size() - 1);
        }
    } else {
        r.target_acc = proto_accuracy(model, env.sources.back(), env.target);
        if (env.has_validation()) {
            double s = 0.0;
            for (std::size_t i = 0; i < env.val.size(); ++i) s += proto_accuracy(model, env.train[i], env.val[i]);
            r.val_acc = s / static_cast<double>(env.val.size());
        }
    }
    return r;
}

inline RunResult run_erm(Algorithm algo, const HParams& h, const PreparedEnv& env, std::uint64_t seed) {
    RunResult r;
    const auto K = env.train.front().num_classes;
    baselines::ErmConfig cfg;
    cfg.steps = h.steps;
    cfg.batch_size = 2 * K * h.n_b;
    cfg.hidden = h.hidden;
    cfg.optimizer.lr = h.lr;
    cfg.seed = seed;
    const auto mode = index_mode_of(algo);
    const auto last_k = last_k_of(algo);
    auto tr = baselines::train_erm_traced(env.train, cfg, mode, last_k);
    r.loss_trace = std::move(tr.loss_trace);
    const auto& model = tr.model;
    // The target sits one step past the last domain the model has seen.
    r.target_acc = accuracy_of(baselines::predict_erm_batch(model, env.target.samples, model.num_domains_seen),
                               env.target.samples);
    if (env.has_validation()) {
        const std::size_t m = env.val.size();
        const std::size_t first = m - model.num_domains_seen;
        std::size_t correct = 0;
        std::size_t total = 0;
        for (std::size_t i = first; i < m; ++i) {
            const auto pred = baselines::predict_erm_batch(model, env.val[i].samples, i - first);
            for (std::size_t j = 0; j < pred.size(); ++j) correct += pred[j] == env.val[i].samples[j].y ? 1 : 0;
            total += pred.size();
        }
        r.val_acc = static_cast<double>(correct) / static_cast<double>(total);
    }
    return r;
}

}  // namespace detail

/// Trains one model and scores it. Failures (divergence, bad sampling) are captured in `error`.
inline RunResult run_once(Algorithm algo, const HParams& h, const PreparedEnv& env, std::uint64_t seed) {
    try {
        validate(h);
        return is_episodic(algo) ? detail::run_episodic(algo, h, env, seed) : detail::run_erm(algo, h, env, seed);
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        RunResult r;
        r.error = e.what();
        return r;
    }
}

// ----------------------------------------------------------------- trials

struct Trial {
    Algorithm algorithm = Algorithm::DPNets;
    std::size_t index = 0;
    HParams hparams;
    std::vector<std::uint64_t> seeds;
    std::vector<double> target_acc;  // per seed
    std::vector<double> val_acc;     // per seed (NaN without a validation split)
    std::vector<std::vector<double>> loss_traces;
    std::vector<std::string> errors;  // per seed, empty string on success

    bool complete() const {
        return std::all_of(errors.begin(), errors.end(), [](const std::string& e) { return e.empty(); });
    }
};

inline double mean(std::span<const double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

/// Sample standard deviation (n-1 denominator); 0 for a single value.
inline double sample_std(std::span<const double> v) {
    if (v.size() < 2) return 0.0;
    const double mu = mean(v);
    double s = 0.0;
    for (double x : v) s += (x - mu) * (x - mu);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

enum class SelectionStrategy { TrainingDomainValidation, OracleMaxQuery };

inline std::string_view to_string(SelectionStrategy s) {
    return s == SelectionStrategy::OracleMaxQuery ? "oracle-max-query" : "training-domain-validation";
}

inline SelectionStrategy parse_selection(std::string_view s) {
    if (s == "oracle-max-query" || s == "oracle") return SelectionStrategy::OracleMaxQuery;
    if (s == "training-domain-validation" || s == "tdv") return SelectionStrategy::TrainingDomainValidation;
    throw ConfigError("unknown selection strategy '" + std::string(s) + "'");
}

/// Index of the selected complete trial; ties go to the lowest trial index.
inline std::optional<std::size_t> select_trial(const std::vector<Trial>& trials, SelectionStrategy s) {
    std::optional<std::size_t> best;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < trials.size(); ++t) {
        if (!trials[t].complete()) continue;
        const double score =
            mean(s == SelectionStrategy::OracleMaxQuery ? trials[t].target_acc : trials[t].val_acc);
        if (std::isnan(score)) throw ConfigError("training-domain validation needs a holdout split (holdout > 0)");
        if (score > best_score) {
            best_score = score;
            best = t;
        }
    }
    return best;
}

struct SearchConfig {
    std::size_t n_trials = 20;
    std::size_t n_seeds = 5;
    SelectionStrategy strategy = SelectionStrategy::TrainingDomainValidation;
    std::uint64_t master_seed = 0;
    std::size_t workers = 1;
    Logger log;
};

struct SearchResult {
    std::vector<Trial> trials;
    std::optional<std::size_t> best;
    SelectionStrategy strategy = SelectionStrategy::TrainingDomainValidation;

    double mean_acc() const {
        return best ? mean(trials[*best].target_acc) : std::numeric_limits<double>::quiet_NaN();
    }
    double std_acc() const {
        return best ? sample_std(trials[*best].target_acc) : std::numeric_limits<double>::quiet_NaN();
    }
};

/// Runs `fn(i)` for i in [0, n) on up to `workers` threads.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
    workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(n, 1));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) fn(i);
        });
}

inline std::uint64_t trial_seed(std::uint64_t master, std::size_t trial) { return derive_seed({master, trial}); }
inline std::uint64_t run_seed(std::uint64_t master, std::size_t trial, std::size_t seed_idx) {
    return derive_seed({master, trial, seed_idx});
}

/// n_trials hparam draws x n_seeds runs each, then selection.
inline SearchResult random_search(const HParamSpace& space, Algorithm algo, const PreparedEnv& env,
                                  const SearchConfig& cfg) {
    if (cfg.n_trials == 0 || cfg.n_seeds == 0) throw ConfigError("random_search: need >= 1 trial and >= 1 seed");
    if (cfg.strategy == SelectionStrategy::TrainingDomainValidation && !env.has_validation())
        throw ConfigError("training-domain validation needs a holdout split (holdout > 0)");
    SearchResult out;
    out.strategy = cfg.strategy;
    out.trials.resize(cfg.n_trials);
    for (std::size_t t = 0; t < cfg.n_trials; ++t) {
        Rng rng(trial_seed(cfg.master_seed, t));
        auto& tr = out.trials[t];
        tr.algorithm = algo;
        tr.index = t;
        tr.hparams = space.sample(rng);
        for (std::size_t s = 0; s < cfg.n_seeds; ++s) tr.seeds.push_back(run_seed(cfg.master_seed, t, s));
    }
    std::vector<RunResult> runs(cfg.n_trials * cfg.n_seeds);
    std::mutex log_mu;
    parallel_for(runs.size(), cfg.workers, [&](std::size_t i) {
        const auto t = i / cfg.n_seeds;
        const auto s = i % cfg.n_seeds;
        runs[i] = run_once(algo, out.trials[t].hparams, env, out.trials[t].seeds[s]);
        if (cfg.log) {
            Json ev{{"event", "run"}, {"algorithm", to_string(algo)}, {"trial", t}, {"seed_index", s}};
            if (runs[i].ok()) {
                ev["target_acc"] = runs[i].target_acc;
                if (runs[i].effective_n_b != 0 && runs[i].effective_n_b != out.trials[t].hparams.n_b)
                    ev["n_b_clamped_to"] = runs[i].effective_n_b;
            } else {
                ev["error"] = *runs[i].error;
            }
            std::lock_guard lock(log_mu);
            cfg.log(ev);
        }
    });
    for (std::size_t i = 0; i < runs.size(); ++i) {
        auto& tr = out.trials[i / cfg.n_seeds];
        auto& r = runs[i];
        tr.target_acc.push_back(r.target_acc);
        tr.val_acc.push_back(r.val_acc);
        tr.loss_traces.push_back(std::move(r.loss_trace));
        tr.errors.push_back(r.error.value_or(""));
    }
    out.best = select_trial(out.trials, cfg.strategy);
    return out;
}

// ----------------------------------------------------------------- sweeps

enum class Axis { None, DomainCount, DomainDistance };

inline std::string_view to_string(Axis a) {
    switch (a) {
        case Axis::None: return "none";
        case Axis::DomainCount: return "count";
        case Axis::DomainDistance: return "distance";
    }
    return "?";
}

inline Axis parse_axis(std::string_view s) {
    if (s == "none") return Axis::None;
    if (s == "count") return Axis::DomainCount;
    if (s == "distance") return Axis::DomainDistance;
    throw ConfigError("unknown axis '" + std::string(s) + "' (expected none, count or distance)");
}

/// One (axis value, method) result.
struct Cell {
    std::string axis = "none";
    double axis_value = 0.0;
    std::string label;  // method name as shown in reports
    SearchResult result;

    std::string status() const { return result.best ? "ok" : "failed"; }
};

struct SweepConfig {
    Axis axis = Axis::None;
    std::vector<double> values;
    EnvironmentSpec base;
    std::vector<Algorithm> algorithms{Algorithm::DPNets, Algorithm::Erm};
    std::optional<HParamSpace> space;  // default: HParamSpace::for_env(base.kind)
    SearchConfig search;
    double holdout = 0.2;
    std::string cache_dir;

    void validate() const {
        if (axis != Axis::None && values.size() < 2) throw ConfigError("sweep: need at least two axis values");
        if (algorithms.empty()) throw ConfigError("sweep: no algorithms");
    }
};

inline EnvironmentSpec apply_axis(EnvironmentSpec spec, Axis axis, double value) {
    if (axis == Axis::DomainCount) {
        if (!(value >= 3.0) || value != std::floor(value)) throw ConfigError("domain count must be an integer >= 3");
        spec.num_domains = static_cast<std::size_t>(value);
    } else if (axis == Axis::DomainDistance) {
        spec.domain_distance = value;
    }
    return spec;
}

/// One random search per (axis value, algorithm) cell, in that order.
inline std::vector<Cell> run_sweep(const SweepConfig& cfg) {
    cfg.validate();
    const std::vector<double> values = cfg.axis == Axis::None ? std::vector<double>{0.0} : cfg.values;
    const auto space = cfg.space.value_or(HParamSpace::for_env(cfg.base.kind));
    std::vector<Cell> cells;
    for (double v : values) {
        const auto spec = apply_axis(cfg.base, cfg.axis, v);
        data::validate(spec);
        const auto env = prepare_extrapolation(data::generate_cached(spec, cfg.cache_dir), cfg.holdout, spec.seed);
        for (auto algo : cfg.algorithms) {
            if (cfg.search.log)
                cfg.search.log({{"event", "cell"}, {"axis", to_string(cfg.axis)}, {"value", v},
                                {"algorithm", to_string(algo)}});
            Cell c{std::string(to_string(cfg.axis)), v, std::string(to_string(algo)),
                   random_search(space, algo, env, cfg.search)};
            cells.push_back(std::move(c));
        }
    }
    return cells;
}

struct InterpolationConfig {
    EnvironmentSpec base;
    std::vector<std::size_t> domain_counts{5, 7, 9, 11};
    std::optional<HParamSpace> space;
    SearchConfig search;
    double holdout = 0.2;
    std::string cache_dir;
};

/// DPNets and ERM with the last domain as target, and ERM with the middle
/// domain as target, for each domain count.
inline std::vector<Cell> run_interpolation_study(const InterpolationConfig& cfg) {
    if (cfg.domain_counts.empty()) throw ConfigError("interp-study: no domain counts");
    const auto space = cfg.space.value_or(HParamSpace::for_env(cfg.base.kind));
    std::vector<Cell> cells;
    for (auto n : cfg.domain_counts) {
        auto spec = cfg.base;
        spec.num_domains = n;
        data::validate(spec);
        const auto domains = data::generate_cached(spec, cfg.cache_dir);
        const auto extrap = prepare_extrapolation(domains, cfg.holdout, spec.seed);
        const auto interp = prepare(domains, interpolation_target(n), cfg.holdout, spec.seed);
        const double v = static_cast<double>(n);
        cells.push_back({"count", v, "dpnets-extrap", random_search(space, Algorithm::DPNets, extrap, cfg.search)});
        cells.push_back({"count", v, "erm-extrap", random_search(space, Algorithm::Erm, extrap, cfg.search)});
        cells.push_back({"count", v, "erm-interp", random_search(space, Algorithm::Erm, interp, cfg.search)});
    }
    return cells;
}

// ----------------------------------------------------------------- reports

/// "94.2 ± 0.9" from fractions; "failed" when there is no selected trial.
inline std::string format_cell(double mean_acc, double std_acc) {
    if (std::isnan(mean_acc)) return "failed";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.1f ± %.1f", 100.0 * mean_acc, 100.0 * std_acc);
    return buf;
}

/// Shortest-exact decimal form: parses back to the same double.
inline std::string exact(double v) {
    if (std::isnan(v)) return "nan";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string format_axis_value(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

inline Json to_json(const Trial& t) {
    Json errors = Json::array();
    for (const auto& e : t.errors) errors.push_back(e.empty() ? Json() : Json(e));
    auto nan_to_null = [](const std::vector<double>& v) {
        Json a = Json::array();
        for (double x : v) a.push_back(std::isnan(x) ? Json() : Json(x));
        return a;
    };
    return {{"algorithm", to_string(t.algorithm)},
            {"trial", t.index},
            {"hparams", to_json(t.hparams)},
            {"seeds", t.seeds},
            {"target_acc", nan_to_null(t.target_acc)},
            {"val_acc", nan_to_null(t.val_acc)},
            {"errors", errors},
            {"loss_traces", t.loss_traces}};
}

inline Trial trial_from_json(const Json& j) {
    auto null_to_nan = [](const Json& a) {
        std::vector<double> v;
        for (const auto& x : a) v.push_back(x.is_null() ? std::numeric_limits<double>::quiet_NaN() : x.get<double>());
        return v;
    };
    Trial t;
    t.algorithm = parse_algorithm(j.at("algorithm").get<std::string>());
    t.index = j.at("trial").get<std::size_t>();
    t.hparams = hparams_from_json(j.at("hparams"));
    t.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    t.target_acc = null_to_nan(j.at("target_acc"));
    t.val_acc = null_to_nan(j.at("val_acc"));
    for (const auto& e : j.at("errors")) t.errors.push_back(e.is_null() ? "" : e.get<std::string>());
    t.loss_traces = j.value("loss_traces", std::vector<std::vector<double>>{});
    return t;
}

inline Json to_json(const Cell& c) {
    Json trials = Json::array();
    for (const auto& t : c.result.trials) trials.push_back(to_json(t));
    return {{"axis", c.axis},
            {"axis_value", c.axis_value},
            {"label", c.label},
            {"selection", to_string(c.result.strategy)},
            {"best_trial", c.result.best ? Json(*c.result.best) : Json()},
            {"trials", trials}};
}

inline Cell cell_from_json(const Json& j) {
    try {
        Cell c;
        c.axis = j.at("axis").get<std::string>();
        c.axis_value = j.at("axis_value").get<double>();
        c.label = j.at("label").get<std::string>();
        c.result.strategy = parse_selection(j.at("selection").get<std::string>());
        for (const auto& t : j.at("trials")) c.result.trials.push_back(trial_from_json(t));
        // selection is recomputed from the per-seed values rather than trusted
        c.result.best = select_trial(c.result.trials, c.result.strategy);
        return c;
    } catch (const Json::exception& e) {
        throw ConfigError(std::string("raw cell json: ") + e.what());
    }
}

struct CsvRow {
    std::string axis;
    double axis_value = 0.0;
    std::string algorithm;
    std::string selection;
    double mean_acc = 0.0;
    double std_acc = 0.0;
    std::size_t n_seeds = 0;
    std::string formatted;
    std::string status;
};

inline const char* kCsvHeader = "axis,axis_value,algorithm,selection,mean_acc,std_acc,n_seeds,formatted,status";

inline CsvRow csv_row(const Cell& c) {
    return {c.axis,
            c.axis_value,
            c.label,
            std::string(to_string(c.result.strategy)),
            c.result.mean_acc(),
            c.result.std_acc(),
            c.result.best ? c.result.trials[*c.result.best].target_acc.size() : 0,
            format_cell(c.result.mean_acc(), c.result.std_acc()),
            c.status()};
}

inline std::string render_csv(const std::vector<Cell>& cells) {
    std::ostringstream os;
    os << kCsvHeader << '\n';
    for (const auto& c : cells) {
        const auto r = csv_row(c);
        os << r.axis << ',' << exact(r.axis_value) << ',' << r.algorithm << ',' << r.selection << ','
           << exact(r.mean_acc) << ',' << exact(r.std_acc) << ',' << r.n_seeds << ",\"" << r.formatted << "\","
           << r.status << '\n';
    }
    return os.str();
}

/// Parses render_csv output (the formatted column is the only quoted field).
inline std::vector<CsvRow> parse_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line != kCsvHeader) throw ConfigError("results.csv: unexpected header");
    std::vector<CsvRow> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::string cur;
        bool quoted = false;
        for (char ch : line) {
            if (ch == '"') {
                quoted = !quoted;
            } else if (ch == ',' && !quoted) {
                f.push_back(cur);
                cur.clear();
            } else {
                cur += ch;
            }
        }
        f.push_back(cur);
        if (f.size() != 9) throw ConfigError("results.csv: expected 9 fields, got " + std::to_string(f.size()));
        rows.push_back({f[0], std::stod(f[1]), f[2], f[3], std::stod(f[4]), std::stod(f[5]),
                        static_cast<std::size_t>(std::stoull(f[6])), f[7], f[8]});
    }
    return rows;
}

/// Methods as rows, axis values as columns, best mean per column in bold.
inline std::string render_markdown(const std::vector<Cell>& cells, const std::string& title) {
    std::vector<double> cols;
    std::vector<std::string> rows;
    for (const auto& c : cells) {
        if (std::find(cols.begin(), cols.end(), c.axis_value) == cols.end()) cols.push_back(c.axis_value);
        if (std::find(rows.begin(), rows.end(), c.label) == rows.end()) rows.push_back(c.label);
    }
    std::map<std::pair<std::string, double>, const Cell*> at;
    for (const auto& c : cells) at[{c.label, c.axis_value}] = &c;
    std::map<double, double> best;
    for (const auto& c : cells) {
        const double m = c.result.mean_acc();
        if (std::isnan(m)) continue;
        auto it = best.find(c.axis_value);
        if (it == best.end() || m > it->second) best[c.axis_value] = m;
    }
    std::set<std::string> strategies;
    for (const auto& c : cells) strategies.insert(std::string(to_string(c.result.strategy)));
    std::string sel;
    for (const auto& s : strategies) sel += (sel.empty() ? "" : ", ") + s;

    const std::string axis = cells.empty() ? "none" : cells.front().axis;
    std::ostringstream os;
    os << "# " << title << "\n\n";
    os << "Target accuracy (%), mean ± std over seeds. Model selection: " << sel << ".\n\n";
    os << "| method |";
    for (double v : cols) os << ' ' << (axis == "none" ? std::string("target") : axis + " = " + format_axis_value(v)) << " |";
    os << "\n|---|";
    for (std::size_t i = 0; i < cols.size(); ++i) os << "---|";
    os << '\n';
    for (const auto& r : rows) {
        os << "| " << r << " |";
        for (double v : cols) {
            auto it = at.find({r, v});
            if (it == at.end()) {
                os << "  |";
                continue;
            }
            const auto& res = it->second->result;
            const auto text = format_cell(res.mean_acc(), res.std_acc());
            const bool bold = !std::isnan(res.mean_acc()) && res.mean_acc() == best[v];
            os << ' ' << (bold ? "**" + text + "**" : text) << " |";
        }
        os << '\n';
    }
    return os.str();
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + p.string() + " for writing");
    f << text;
    if (!f) throw std::runtime_error("write failed: " + p.string());
}

inline std::string raw_file_name(const Cell& c, std::size_t position) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%03zu", position);
    return std::string(buf) + "_" + c.axis + "_" + format_axis_value(c.axis_value) + "_" + c.label + ".json";
}

struct ReportPaths {
    std::filesystem::path markdown;
    std::filesystem::path csv;
    std::filesystem::path raw_dir;
};

/// Writes results.md, results.csv and raw/NNN_<axis>_<value>_<method>.json under `out_dir`.
inline ReportPaths emit_report(const std::vector<Cell>& cells, const std::filesystem::path& out_dir,
                               const std::string& title) {
    ReportPaths p{out_dir / "results.md", out_dir / "results.csv", out_dir / "raw"};
    std::filesystem::create_directories(p.raw_dir);
    write_text(p.markdown, render_markdown(cells, title));
    write_text(p.csv, render_csv(cells));
    for (std::size_t i = 0; i < cells.size(); ++i)
        write_text(p.raw_dir / raw_file_name(cells[i], i), to_json(cells[i]).dump(1) + "\n");
    return p;
}

/// Re-reads raw/*.json (in file-name order) so reports can be regenerated from per-seed data.
inline std::vector<Cell> load_raw_cells(const std::filesystem::path& raw_dir) {
    if (!std::filesystem::is_directory(raw_dir)) throw ConfigError("no raw directory at " + raw_dir.string());
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(raw_dir))
        if (e.path().extension() == ".json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::vector<Cell> cells;
    for (const auto& f : files) {
        std::ifstream in(f);
        Json j;
        try {
            j = Json::parse(in);
        } catch (const Json::exception& e) {
            throw IngestionError(f.string(), 0, e.what());
        }
        cells.push_back(cell_from_json(j));
    }
    return cells;
}

inline bool any_failed(const std::vector<Cell>& cells) {
    return std::any_of(cells.begin(), cells.end(), [](const Cell& c) { return !c.result.best.has_value(); });
}

}  // namespace edglab::harness
