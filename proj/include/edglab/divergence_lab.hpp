#pragma once

// Exact finite-distribution machinery for the evolving-domain risk bounds.
//
// Distributions are joints p[x][y] over a finite X x Y. All divergences are in
// nats with 0 log 0 = 0. The "synthetic" domain of a map g is the pushforward
// g(D) on x with labels untouched.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "edglab/error.hpp"
#include "edglab/rng.hpp"

namespace edglab::divergence {

inline constexpr double kMassTolerance = 1e-12;

class DiscreteJoint {
public:
    DiscreteJoint() = default;

    /// `p` is row-major nx x ny. Throws ConfigError unless p >= 0 and sums to 1 +- 1e-12.
    DiscreteJoint(std::size_t nx, std::size_t ny, std::vector<double> p) : nx_(nx), ny_(ny), p_(std::move(p)) {
        if (nx_ == 0 || ny_ == 0) throw ConfigError("DiscreteJoint: empty support");
        if (p_.size() != nx_ * ny_) throw ConfigError("DiscreteJoint: table size != nx*ny");
        double s = 0.0;
        for (double v : p_) {
            if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("DiscreteJoint: negative or non-finite mass");
            s += v;
        }
        if (std::abs(s - 1.0) > kMassTolerance) throw ConfigError("DiscreteJoint: total mass " + std::to_string(s));
    }

    /// Normalises arbitrary non-negative weights.
    static DiscreteJoint from_weights(std::size_t nx, std::size_t ny, std::vector<double> w) {
        double s = 0.0;
        for (double v : w) s += v;
        if (!(s > 0.0)) throw ConfigError("DiscreteJoint::from_weights: zero total weight");
        for (auto& v : w) v /= s;
        // absorb the rounding residue into the largest cell so the sum check is tight
        double t = 0.0;
        for (double v : w) t += v;
        *std::max_element(w.begin(), w.end()) += 1.0 - t;
        return DiscreteJoint(nx, ny, std::move(w));
    }

    std::size_t nx() const noexcept { return nx_; }
    std::size_t ny() const noexcept { return ny_; }
    double operator()(std::size_t x, std::size_t y) const { return p_[x * ny_ + y]; }
    std::span<const double> flat() const noexcept { return p_; }

    std::vector<double> label_marginal() const {
        std::vector<double> m(ny_, 0.0);
        for (std::size_t x = 0; x < nx_; ++x)
            for (std::size_t y = 0; y < ny_; ++y) m[y] += (*this)(x, y);
        return m;
    }

    /// D(x | y); nullopt when D(y) = 0.
    std::optional<std::vector<double>> conditional_given_label(std::size_t y) const {
        double my = 0.0;
        for (std::size_t x = 0; x < nx_; ++x) my += (*this)(x, y);
        if (!(my > 0.0)) return std::nullopt;
        std::vector<double> c(nx_);
        for (std::size_t x = 0; x < nx_; ++x) c[x] = (*this)(x, y) / my;
        return c;
    }

    friend bool operator==(const DiscreteJoint&, const DiscreteJoint&) = default;

private:
    std::size_t nx_ = 0;
    std::size_t ny_ = 0;
    std::vector<double> p_;
};

/// Deterministic feature map g: X -> X.
struct MappingFn {
    std::vector<std::size_t> table;

    static MappingFn identity(std::size_t nx) {
        MappingFn g;
        for (std::size_t x = 0; x < nx; ++x) g.table.push_back(x);
        return g;
    }

    friend bool operator==(const MappingFn&, const MappingFn&) = default;
};

/// Ordered domains: sources D_1..D_m followed by the target as the last entry.
struct DiscreteEnv {
    std::vector<DiscreteJoint> domains;
    std::vector<MappingFn> candidate_maps;

    std::size_t num_sources() const { return domains.empty() ? 0 : domains.size() - 1; }
    const DiscreteJoint& target() const { return domains.back(); }
    const DiscreteJoint& last_source() const { return domains[domains.size() - 2]; }
};

inline void validate(const DiscreteEnv& env) {
    if (env.domains.size() < 2) throw ConfigError("DiscreteEnv: need at least one source and a target");
    const auto nx = env.domains.front().nx();
    const auto ny = env.domains.front().ny();
    for (const auto& d : env.domains)
        if (d.nx() != nx || d.ny() != ny) throw ConfigError("DiscreteEnv: domains disagree on support size");
    for (const auto& g : env.candidate_maps) {
        if (g.table.size() != nx) throw ConfigError("DiscreteEnv: map is not total on X");
        for (auto v : g.table)
            if (v >= nx) throw ConfigError("DiscreteEnv: map leaves X");
    }
}

/// Classifier table h: X -> Y and loss table loss[pred][y].
struct LossSpec {
    std::vector<std::size_t> classifier;
    std::vector<std::vector<double>> loss;

    double g_range() const {
        double lo = std::numeric_limits<double>::infinity();
        double hi = -lo;
        for (const auto& row : loss)
            for (double v : row) {
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
        return hi - lo;
    }

    static LossSpec zero_one(std::vector<std::size_t> classifier, std::size_t ny) {
        LossSpec s{std::move(classifier), std::vector<std::vector<double>>(ny, std::vector<double>(ny, 1.0))};
        for (std::size_t k = 0; k < ny; ++k) s.loss[k][k] = 0.0;
        return s;
    }
};

// ------------------------------------------------------------- divergences

inline double kl(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw ConfigError("kl: support sizes differ");
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0) continue;
        if (q[i] <= 0.0)
            throw AbsoluteContinuityViolation("kl: Q(z)=0 < P(z) at cell " + std::to_string(i));
        s += p[i] * std::log(p[i] / q[i]);
    }
    return s;
}

inline double kl(const DiscreteJoint& p, const DiscreteJoint& q) { return kl(p.flat(), q.flat()); }

/// Jensen-Shannon divergence, in [0, ln 2].
inline double js(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw ConfigError("js: support sizes differ");
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double m = 0.5 * (p[i] + q[i]);
        if (p[i] > 0.0) s += 0.5 * p[i] * std::log(p[i] / m);
        if (q[i] > 0.0) s += 0.5 * q[i] * std::log(q[i] / m);
    }
    return std::clamp(s, 0.0, std::numbers::ln2);
}

inline double js(const DiscreteJoint& p, const DiscreteJoint& q) { return js(p.flat(), q.flat()); }

/// Pushforward of x through g; labels untouched.
inline DiscreteJoint apply_map(const DiscreteJoint& d, const MappingFn& g) {
    if (g.table.size() != d.nx()) throw ConfigError("apply_map: map is not total on X");
    std::vector<double> out(d.nx() * d.ny(), 0.0);
    for (std::size_t x = 0; x < d.nx(); ++x)
        for (std::size_t y = 0; y < d.ny(); ++y) out[g.table[x] * d.ny() + y] += d(x, y);
    double s = 0.0;
    for (double v : out) s += v;
    if (std::abs(s - 1.0) > kMassTolerance) return DiscreteJoint::from_weights(d.nx(), d.ny(), std::move(out));
    return DiscreteJoint(d.nx(), d.ny(), std::move(out));
}

/// Expected loss of the classifier under d.
inline double risk(const LossSpec& h, const DiscreteJoint& d) {
    if (h.classifier.size() != d.nx()) throw ConfigError("risk: classifier is not total on X");
    double r = 0.0;
    for (std::size_t x = 0; x < d.nx(); ++x)
        for (std::size_t y = 0; y < d.ny(); ++y) r += d(x, y) * h.loss.at(h.classifier[x]).at(y);
    return r;
}

// ---------------------------------------------------------------- consistency

struct ConsistencyReport {
    MappingFn g_star;
    std::size_t g_star_index = 0;
    /// js(g*(D_{i-1}) || D_i) for consecutive source pairs i = 2..m (1-based).
    std::vector<double> source_divergences;
    /// js(g*(D_m) || D_t); needs the target, so not observable in practice.
    double target_divergence = 0.0;
    /// Largest pairwise gap among source_divergences.
    double lambda = 0.0;
    /// Same gap with the target pair included.
    double lambda_full = 0.0;
};

inline std::vector<double> consecutive_divergences(const DiscreteEnv& env, const MappingFn& g) {
    std::vector<double> d;
    const auto m = env.num_sources();
    for (std::size_t i = 1; i < m; ++i) d.push_back(js(apply_map(env.domains[i - 1], g), env.domains[i]));
    return d;
}

inline double max_gap(std::span<const double> v) {
    if (v.empty()) return 0.0;
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    return *hi - *lo;
}

/// Minimax map over the candidate family: smallest worst-case consecutive
/// divergence over the sources. Ties go to the earliest candidate.
inline ConsistencyReport find_g_star(const DiscreteEnv& env) {
    validate(env);
    if (env.candidate_maps.empty()) throw ConfigError("find_g_star: empty candidate family");
    if (env.num_sources() < 2) throw ConfigError("find_g_star: need at least two source domains");
    ConsistencyReport best;
    double best_worst = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < env.candidate_maps.size(); ++c) {
        auto d = consecutive_divergences(env, env.candidate_maps[c]);
        const double worst = *std::max_element(d.begin(), d.end());
        if (worst < best_worst) {
            best_worst = worst;
            best.g_star = env.candidate_maps[c];
            best.g_star_index = c;
            best.source_divergences = std::move(d);
        }
    }
    best.lambda = max_gap(best.source_divergences);
    best.target_divergence = js(apply_map(env.last_source(), best.g_star), env.target());
    auto all = best.source_divergences;
    all.push_back(best.target_divergence);
    best.lambda_full = max_gap(all);
    return best;
}

// ---------------------------------------------------------------- bounds

/// Coefficient in front of G * sqrt(js) in the synthetic-domain risk bound.
///
/// InvSqrt2 is the coefficient the bound is usually written with (G / sqrt 2).
/// It does not hold in general: two point masses on different cells with a
/// unit-range loss give a risk gap of 1 against a bound term of sqrt(ln 2 / 2).
/// Sqrt2 (G * sqrt 2) is what optimising the change-of-measure inequality over
/// its free parameter actually yields, and it is always valid.
enum class JsCoefficient { InvSqrt2, Sqrt2 };

inline double coefficient(JsCoefficient c, double g_range) {
    return c == JsCoefficient::InvSqrt2 ? g_range / std::numbers::sqrt2 : g_range * std::numbers::sqrt2;
}

struct SlackReport {
    double target_risk = 0.0;
    double synthetic_risk = 0.0;
    double bound = 0.0;
    double slack = 0.0;  // bound - target_risk
};

inline constexpr double kSlackTolerance = 1e-9;

/// Risk on the target against risk on g(D_m) plus the divergence penalty.
inline SlackReport verify_lemma1(const DiscreteEnv& env, const MappingFn& g, const LossSpec& h,
                                 JsCoefficient c = JsCoefficient::InvSqrt2) {
    validate(env);
    const auto synthetic = apply_map(env.last_source(), g);
    SlackReport r;
    r.target_risk = risk(h, env.target());
    r.synthetic_risk = risk(h, synthetic);
    r.bound = r.synthetic_risk + coefficient(c, h.g_range()) * std::sqrt(js(synthetic, env.target()));
    r.slack = r.bound - r.target_risk;
    return r;
}

/// R_syn + coef / sqrt(m-1) * (sqrt(sum d_i) + sqrt((m-1) lambda)); `divergences` holds the m-1 source terms.
inline double theorem1_bound(double synthetic_risk, std::span<const double> divergences, double lambda,
                             double g_range, JsCoefficient c = JsCoefficient::InvSqrt2) {
    if (divergences.empty()) throw ConfigError("theorem1_bound: need at least one consecutive source pair");
    const double n = static_cast<double>(divergences.size());
    double sum = 0.0;
    for (double d : divergences) sum += d;
    return synthetic_risk + coefficient(c, g_range) / std::sqrt(n) * (std::sqrt(sum) + std::sqrt(n * lambda));
}

inline SlackReport verify_theorem1(const DiscreteEnv& env, const ConsistencyReport& report, const LossSpec& h,
                                   JsCoefficient c = JsCoefficient::InvSqrt2) {
    validate(env);
    SlackReport r;
    r.target_risk = risk(h, env.target());
    r.synthetic_risk = risk(h, apply_map(env.last_source(), report.g_star));
    r.bound = theorem1_bound(r.synthetic_risk, report.source_divergences, report.lambda_full, h.g_range(), c);
    r.slack = r.bound - r.target_risk;
    return r;
}

struct CorollaryTerms {
    double label_term = 0.0;             // I
    double synthetic_weighted_term = 0.0;  // II, expectation under the synthetic label marginal
    double real_weighted_term = 0.0;       // III, expectation under the real label marginal
};

struct CorollaryReport {
    SlackReport slack;
    CorollaryTerms terms;
    double theorem_bound = 0.0;
};

namespace detail {

/// E_{y ~ weights} js(P(x|y) || Q(x|y)); labels with zero mass on either side contribute 0.
inline double expected_conditional_js(const DiscreteJoint& p, const DiscreteJoint& q, std::span<const double> weights) {
    double s = 0.0;
    for (std::size_t y = 0; y < p.ny(); ++y) {
        if (!(weights[y] > 0.0)) continue;
        const auto cp = p.conditional_given_label(y);
        const auto cq = q.conditional_given_label(y);
        if (!cp || !cq) continue;
        s += weights[y] * js(*cp, *cq);
    }
    return s;
}

}  // namespace detail

/// Label-shift / conditional-shift split of the consecutive divergences.
inline CorollaryReport verify_corollary1(const DiscreteEnv& env, const ConsistencyReport& report, const LossSpec& h,
                                         JsCoefficient c = JsCoefficient::InvSqrt2) {
    validate(env);
    const auto m = env.num_sources();
    if (m < 2) throw ConfigError("verify_corollary1: need at least two source domains");
    double sum_label = 0.0;
    double sum_syn = 0.0;
    double sum_real = 0.0;
    for (std::size_t i = 1; i < m; ++i) {
        const auto synthetic = apply_map(env.domains[i - 1], report.g_star);
        const auto& real = env.domains[i];
        const auto my_syn = synthetic.label_marginal();
        const auto my_real = real.label_marginal();
        sum_label += js(my_syn, my_real);
        sum_syn += detail::expected_conditional_js(synthetic, real, my_syn);
        sum_real += detail::expected_conditional_js(synthetic, real, my_real);
    }
    CorollaryReport out;
    out.terms = {std::sqrt(sum_label), std::sqrt(sum_syn), std::sqrt(sum_real)};
    const double n = static_cast<double>(m - 1);
    out.slack.target_risk = risk(h, env.target());
    out.slack.synthetic_risk = risk(h, apply_map(env.last_source(), report.g_star));
    out.slack.bound = out.slack.synthetic_risk +
                      coefficient(c, h.g_range()) / std::sqrt(n) *
                          (out.terms.label_term + std::sqrt(n * report.lambda_full) + out.terms.synthetic_weighted_term +
                           out.terms.real_weighted_term);
    out.slack.slack = out.slack.bound - out.slack.target_risk;
    out.theorem_bound =
        theorem1_bound(out.slack.synthetic_risk, report.source_divergences, report.lambda_full, h.g_range(), c);
    return out;
}

/// RHS - LHS of js(P(x,y)||Q(x,y)) <= js(P(y)||Q(y)) + E_{P(y)} js(P(x|y)||Q(x|y)) + E_{Q(y)} js(...).
inline double js_decomposition_gap(const DiscreteJoint& p, const DiscreteJoint& q) {
    if (p.nx() != q.nx() || p.ny() != q.ny()) throw ConfigError("js_decomposition_gap: support sizes differ");
    const auto py = p.label_marginal();
    const auto qy = q.label_marginal();
    const double rhs =
        js(py, qy) + detail::expected_conditional_js(p, q, py) + detail::expected_conditional_js(p, q, qy);
    return rhs - js(p, q);
}

/// KL(Q||P) + log E_P exp(lambda (f - E_P f)) - lambda (E_Q f - E_P f).
inline double verify_change_of_measure(std::span<const double> p, std::span<const double> q, std::span<const double> f,
                                       double lambda) {
    if (p.size() != q.size() || p.size() != f.size()) throw ConfigError("change of measure: size mismatch");
    const double kl_qp = kl(q, p);  // throws if Q is not absolutely continuous w.r.t. P
    double ep = 0.0;
    double eq = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] > 0.0) ep += p[i] * f[i];
        if (q[i] > 0.0) eq += q[i] * f[i];
    }
    // log sum_i p_i exp(a_i), shifted by the max exponent
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < p.size(); ++i)
        if (p[i] > 0.0) mx = std::max(mx, std::log(p[i]) + lambda * (f[i] - ep));
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i)
        if (p[i] > 0.0) s += std::exp(std::log(p[i]) + lambda * (f[i] - ep) - mx);
    const double log_mgf = mx + std::log(s);
    return kl_qp + log_mgf - lambda * (eq - ep);
}

/// f = (1/lambda) log(dQ/dP), the choice that turns the inequality into an equality.
/// Requires Q > 0 wherever P > 0; cells with P = 0 get f = 0.
inline std::vector<double> change_of_measure_equality_witness(std::span<const double> p, std::span<const double> q,
                                                              double lambda) {
    if (lambda == 0.0) throw ConfigError("equality witness needs lambda != 0");
    std::vector<double> f(p.size(), 0.0);
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (!(p[i] > 0.0)) continue;
        if (!(q[i] > 0.0)) throw ConfigError("equality witness needs Q > 0 on the support of P");
        f[i] = std::log(q[i] / p[i]) / lambda;
    }
    return f;
}

// ---------------------------------------------------------- random instances

/// Random joint: exponential weights raised to a random power, with some cells zeroed.
inline DiscreteJoint random_joint(std::size_t nx, std::size_t ny, Rng& rng, double zero_prob = 0.15) {
    const double power = rng.uniform() < 0.5 ? 1.0 : 3.0;
    std::vector<double> w(nx * ny);
    for (auto& v : w) {
        double u = rng.uniform();
        while (u <= 0.0) u = rng.uniform();
        v = std::pow(-std::log(u), power);
        if (rng.uniform() < zero_prob) v = 0.0;
    }
    if (std::all_of(w.begin(), w.end(), [](double v) { return v == 0.0; })) w[rng.below(w.size())] = 1.0;
    return DiscreteJoint::from_weights(nx, ny, std::move(w));
}

inline MappingFn random_map(std::size_t nx, Rng& rng) {
    MappingFn g;
    for (std::size_t x = 0; x < nx; ++x) g.table.push_back(static_cast<std::size_t>(rng.below(nx)));
    return g;
}

/// Every map X -> X for nx <= 4 (identity first); otherwise the identity plus random maps, 256 in total.
inline std::vector<MappingFn> candidate_family(std::size_t nx, Rng& rng) {
    std::vector<MappingFn> out{MappingFn::identity(nx)};
    if (nx <= 4) {
        std::size_t total = 1;
        for (std::size_t i = 0; i < nx; ++i) total *= nx;
        for (std::size_t code = 0; code < total; ++code) {
            MappingFn g;
            std::size_t c = code;
            for (std::size_t x = 0; x < nx; ++x) {
                g.table.push_back(c % nx);
                c /= nx;
            }
            if (g != out.front()) out.push_back(std::move(g));
        }
        return out;
    }
    while (out.size() < 256) out.push_back(random_map(nx, rng));
    return out;
}

/// Random evolving environment with `num_sources` sources plus a target. Half of
/// the draws follow a hidden map with per-step noise, the rest are unstructured.
inline DiscreteEnv random_env(std::size_t num_sources, std::size_t nx, std::size_t ny, Rng& rng) {
    DiscreteEnv env;
    const bool structured = rng.uniform() < 0.5;
    const auto hidden = random_map(nx, rng);
    env.domains.push_back(random_joint(nx, ny, rng));
    for (std::size_t i = 1; i <= num_sources; ++i) {
        if (!structured) {
            env.domains.push_back(random_joint(nx, ny, rng));
            continue;
        }
        const auto moved = apply_map(env.domains.back(), hidden);
        const auto noise = random_joint(nx, ny, rng, 0.0);
        const double eps = rng.uniform(0.0, 0.3);
        std::vector<double> w(nx * ny);
        for (std::size_t c = 0; c < w.size(); ++c) w[c] = (1.0 - eps) * moved.flat()[c] + eps * noise.flat()[c];
        env.domains.push_back(DiscreteJoint::from_weights(nx, ny, std::move(w)));
    }
    env.candidate_maps = candidate_family(nx, rng);
    return env;
}

/// Random classifier with either 0-1 loss or a random bounded loss table.
inline LossSpec random_loss(std::size_t nx, std::size_t ny, Rng& rng) {
    std::vector<std::size_t> h(nx);
    for (auto& v : h) v = static_cast<std::size_t>(rng.below(ny));
    if (rng.uniform() < 0.5) return LossSpec::zero_one(std::move(h), ny);
    LossSpec s{std::move(h), std::vector<std::vector<double>>(ny, std::vector<double>(ny))};
    for (auto& row : s.loss)
        for (auto& v : row) v = rng.uniform(0.0, 3.0);
    return s;
}

// ---------------------------------------------------------------- certification

struct CheckSummary {
    std::size_t instances = 0;
    double min_slack = std::numeric_limits<double>::infinity();
    std::size_t argmin = 0;
    std::size_t violations = 0;  // slack < -kSlackTolerance

    void add(std::size_t idx, double slack) {
        ++instances;
        if (slack < min_slack || (slack == min_slack && idx < argmin)) {
            min_slack = slack;
            argmin = idx;
        }
        if (slack < -kSlackTolerance) ++violations;
    }

    void merge(const CheckSummary& o) {
        instances += o.instances;
        violations += o.violations;
        if (o.min_slack < min_slack || (o.min_slack == min_slack && o.argmin < argmin)) {
            min_slack = o.min_slack;
            argmin = o.argmin;
        }
    }

    bool passed() const { return violations == 0; }
};

struct CertifyConfig {
    std::size_t bound_instances = 1000;          // lemma 1, theorem 1, corollary 1, change of measure
    std::size_t decomposition_instances = 10000;  // js decomposition
    std::uint64_t seed = 1;
    std::size_t threads = 1;
    JsCoefficient coefficient = JsCoefficient::InvSqrt2;
};

struct CertificationReport {
    JsCoefficient coefficient = JsCoefficient::InvSqrt2;
    CheckSummary lemma1;
    CheckSummary theorem1;
    CheckSummary corollary1;
    CheckSummary decomposition;
    CheckSummary change_of_measure;
    double max_abs_attainment_slack = 0.0;
    std::size_t relaxation_violations = 0;  // corollary bound < theorem bound

    bool passed() const {
        return lemma1.passed() && theorem1.passed() && corollary1.passed() && decomposition.passed() &&
               change_of_measure.passed() && max_abs_attainment_slack <= kSlackTolerance && relaxation_violations == 0;
    }
};

namespace detail {

inline void certify_bound_instance(std::size_t idx, const CertifyConfig& cfg, CertificationReport& r) {
    Rng rng(derive_seed({cfg.seed, 0xB0, idx}));
    const auto m = 2 + static_cast<std::size_t>(rng.below(4));
    const auto nx = 2 + static_cast<std::size_t>(rng.below(5));
    const auto ny = 2 + static_cast<std::size_t>(rng.below(2));
    const auto env = random_env(m, nx, ny, rng);
    const auto h = random_loss(nx, ny, rng);
    const auto g = rng.uniform() < 0.5 ? random_map(nx, rng) : env.candidate_maps[rng.below(env.candidate_maps.size())];
    r.lemma1.add(idx, verify_lemma1(env, g, h, cfg.coefficient).slack);
    const auto rep = find_g_star(env);
    r.theorem1.add(idx, verify_theorem1(env, rep, h, cfg.coefficient).slack);
    const auto cor = verify_corollary1(env, rep, h, cfg.coefficient);
    r.corollary1.add(idx, cor.slack.slack);
    // relaxation ordering, with a rounding allowance
    if (cor.slack.bound < cor.theorem_bound - kSlackTolerance) ++r.relaxation_violations;

    // change of measure: Q must be absolutely continuous w.r.t. P
    const std::size_t n = nx * ny;
    const auto p = random_joint(nx, ny, rng);
    std::vector<double> qw(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        if (p.flat()[i] > 0.0) qw[i] = -std::log(std::max(rng.uniform(), 1e-300));
    const auto q = DiscreteJoint::from_weights(nx, ny, std::move(qw));
    std::vector<double> f(n);
    for (auto& v : f) v = rng.uniform(-3.0, 3.0);
    const double lambda = rng.uniform(-4.0, 4.0);
    r.change_of_measure.add(idx, verify_change_of_measure(p.flat(), q.flat(), f, lambda));
    const double lam_eq = lambda == 0.0 ? 1.0 : lambda;
    const auto witness = change_of_measure_equality_witness(p.flat(), q.flat(), lam_eq);
    const double eq_slack = verify_change_of_measure(p.flat(), q.flat(), witness, lam_eq);
    r.max_abs_attainment_slack = std::max(r.max_abs_attainment_slack, std::abs(eq_slack));
}

inline void certify_decomposition_instance(std::size_t idx, const CertifyConfig& cfg, CertificationReport& r) {
    Rng rng(derive_seed({cfg.seed, 0xDE, idx}));
    const auto nx = 2 + static_cast<std::size_t>(rng.below(5));
    const auto ny = 2 + static_cast<std::size_t>(rng.below(2));
    const auto p = random_joint(nx, ny, rng);
    const auto q = random_joint(nx, ny, rng);
    r.decomposition.add(idx, js_decomposition_gap(p, q));
}

inline void merge_into(CertificationReport& into, const CertificationReport& part) {
    into.lemma1.merge(part.lemma1);
    into.theorem1.merge(part.theorem1);
    into.corollary1.merge(part.corollary1);
    into.decomposition.merge(part.decomposition);
    into.change_of_measure.merge(part.change_of_measure);
    into.max_abs_attainment_slack = std::max(into.max_abs_attainment_slack, part.max_abs_attainment_slack);
    into.relaxation_violations += part.relaxation_violations;
}

}  // namespace detail

/// Randomised certification of every bound. Instances are sharded by index
/// across threads; the merged report does not depend on the thread count.
inline CertificationReport certify(const CertifyConfig& cfg) {
    const std::size_t threads = std::max<std::size_t>(1, cfg.threads);
    std::vector<CertificationReport> parts(threads);
    auto work = [&](std::size_t t) {
        parts[t].coefficient = cfg.coefficient;
        for (std::size_t i = t; i < cfg.bound_instances; i += threads) detail::certify_bound_instance(i, cfg, parts[t]);
        for (std::size_t i = t; i < cfg.decomposition_instances; i += threads)
            detail::certify_decomposition_instance(i, cfg, parts[t]);
    };
    if (threads == 1) {
        work(0);
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t);
    }
    CertificationReport out;
    out.coefficient = cfg.coefficient;
    for (const auto& p : parts) detail::merge_into(out, p);
    return out;
}

// ---------------------------------------------------------------- JSON

inline nlohmann::json to_json(const DiscreteEnv& env) {
    nlohmann::json j;
    j["nx"] = env.domains.front().nx();
    j["ny"] = env.domains.front().ny();
    j["domains"] = nlohmann::json::array();
    for (const auto& d : env.domains) {
        nlohmann::json rows = nlohmann::json::array();
        for (std::size_t x = 0; x < d.nx(); ++x) {
            std::vector<double> row(d.ny());
            for (std::size_t y = 0; y < d.ny(); ++y) row[y] = d(x, y);
            rows.push_back(row);
        }
        j["domains"].push_back(rows);
    }
    j["maps"] = nlohmann::json::array();
    for (const auto& g : env.candidate_maps) j["maps"].push_back(g.table);
    return j;
}

inline DiscreteEnv env_from_json(const nlohmann::json& j) {
    DiscreteEnv env;
    try {
        const auto nx = j.at("nx").get<std::size_t>();
        const auto ny = j.at("ny").get<std::size_t>();
        for (const auto& rows : j.at("domains")) {
            std::vector<double> flat;
            for (const auto& row : rows)
                for (const auto& v : row) flat.push_back(v.get<double>());
            env.domains.emplace_back(nx, ny, std::move(flat));
        }
        for (const auto& m : j.value("maps", nlohmann::json::array()))
            env.candidate_maps.push_back({m.get<std::vector<std::size_t>>()});
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("environment json: ") + e.what());
    }
    validate(env);
    return env;
}

inline nlohmann::json to_json(const CheckSummary& s) {
    return {{"instances", s.instances},
            {"min_slack", s.min_slack},
            {"argmin_instance", s.argmin},
            {"violations", s.violations},
            {"passed", s.passed()}};
}

inline nlohmann::json to_json(const CertificationReport& r) {
    return {{"coefficient", r.coefficient == JsCoefficient::InvSqrt2 ? "G/sqrt2" : "G*sqrt2"},
            {"tolerance", kSlackTolerance},
            {"lemma1", to_json(r.lemma1)},
            {"theorem1", to_json(r.theorem1)},
            {"corollary1", to_json(r.corollary1)},
            {"js_decomposition", to_json(r.decomposition)},
            {"change_of_measure", to_json(r.change_of_measure)},
            {"change_of_measure_attainment_max_abs_slack", r.max_abs_attainment_slack},
            {"relaxation_violations", r.relaxation_violations},
            {"passed", r.passed()}};
}

/// One row per check: instances, violations, minimum slack.
inline std::string summary_markdown(const CertificationReport& r) {
    auto row = [](const char* name, const CheckSummary& c) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "| %s | %zu | %zu | %.3e | %s |\n", name, c.instances, c.violations, c.min_slack,
                      c.passed() ? "pass" : "FAIL");
        return std::string(buf);
    };
    std::string out = std::string("Coefficient ") + (r.coefficient == JsCoefficient::InvSqrt2 ? "G/sqrt2" : "G*sqrt2") +
                      ", tolerance 1e-9.\n\n| check | instances | violations | min slack | result |\n|---|---|---|---|---|\n";
    out += row("lemma1", r.lemma1);
    out += row("theorem1", r.theorem1);
    out += row("corollary1", r.corollary1);
    out += row("js_decomposition", r.decomposition);
    out += row("change_of_measure", r.change_of_measure);
    char buf[200];
    std::snprintf(buf, sizeof buf, "\nEquality case max |slack|: %.3e. Corollary bound below theorem bound: %zu instance(s).\n",
                  r.max_abs_attainment_slack, r.relaxation_violations);
    return out + buf;
}

}  // namespace edglab::divergence
