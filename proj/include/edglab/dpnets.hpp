#pragma once

// Directional prototypical networks.
//
// Prototypes of domain i are built with f_phi, queries from domain i+1 are
// embedded with f_psi, and the class distribution is a softmax over negative
// squared Euclidean distances to the prototypes. At test time the last source
// domain provides the support set for the unseen target.

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "edglab/error.hpp"
#include "edglab/rng.hpp"
#include "edglab/synthetic_data.hpp"
#include "edglab/tensor_nn.hpp"

namespace edglab::dpnets {

using data::DomainData;
using data::Sample;
using nn::Mat;
using nn::MlpParams;

struct DPNetModel {
    MlpParams f_phi;  // support / prototype encoder
    MlpParams f_psi;  // query encoder
    std::size_t embed_dim = 0;
    std::size_t num_classes = 0;
    bool shared_encoder = false;  // vanilla prototypical network: f_phi == f_psi

    friend bool operator==(const DPNetModel&, const DPNetModel&) = default;
};

inline void validate(const DPNetModel& m) {
    nn::check_chain(m.f_phi);
    nn::check_chain(m.f_psi);
    if (m.f_phi.dims() != m.f_psi.dims()) throw ShapeError("DPNetModel: f_phi and f_psi architectures differ");
    if (m.f_phi.out_dim() != m.embed_dim) throw ShapeError("DPNetModel: encoder output != embed_dim");
    if (m.num_classes < 2) throw ShapeError("DPNetModel: need at least two classes");
}

/// Two independently initialised encoders with identical layer widths `dims`
/// (input first, embedding last).
inline DPNetModel make_model(std::span<const std::size_t> dims, std::size_t num_classes, std::uint64_t seed) {
    Rng rng(derive_seed({seed, 0xD9E7}));
    DPNetModel m;
    m.f_phi = nn::make_mlp(dims, rng);
    m.f_psi = nn::make_mlp(dims, rng);
    m.embed_dim = dims.back();
    m.num_classes = num_classes;
    validate(m);
    return m;
}

inline DPNetModel make_shared_model(std::span<const std::size_t> dims, std::size_t num_classes, std::uint64_t seed) {
    Rng rng(derive_seed({seed, 0x5A7ED}));
    DPNetModel m;
    m.f_phi = nn::make_mlp(dims, rng);
    m.f_psi = m.f_phi;
    m.embed_dim = dims.back();
    m.num_classes = num_classes;
    m.shared_encoder = true;
    validate(m);
    return m;
}

struct Prototypes {
    std::vector<std::vector<double>> centers;  // one per class, length embed_dim

    std::size_t num_classes() const { return centers.size(); }
};

struct EpisodeBatch {
    std::vector<std::vector<Sample>> support;  // per class, from domain source_index
    std::vector<std::vector<Sample>> query;    // per class, from domain query_index
    std::size_t source_index = 0;
    std::size_t query_index = 0;
};

inline Mat stack_features(std::span<const Sample> samples) {
    if (samples.empty()) return {};
    Mat m(samples.size(), samples.front().x.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].x.size() != m.cols()) throw ShapeError("stack_features: mixed feature dimensions");
        std::copy(samples[i].x.begin(), samples[i].x.end(), m.row(i).begin());
    }
    return m;
}

inline Mat stack_features(const std::vector<std::vector<double>>& xs) {
    if (xs.empty()) return {};
    return Mat::from_rows(xs);
}

/// c[k] = mean over the class-k support set of f_phi(x).
inline Prototypes compute_prototypes(const DPNetModel& model, const std::vector<std::vector<Sample>>& support) {
    if (support.size() != model.num_classes) throw ShapeError("compute_prototypes: one support list per class required");
    Prototypes p;
    for (std::size_t k = 0; k < support.size(); ++k) {
        if (support[k].empty()) throw ShapeError("compute_prototypes: class " + std::to_string(k) + " has no support");
        const auto [z, cache] = nn::mlp_forward(model.f_phi, stack_features(support[k]));
        std::vector<double> c(z.cols(), 0.0);
        for (std::size_t i = 0; i < z.rows(); ++i)
            for (std::size_t j = 0; j < z.cols(); ++j) c[j] += z(i, j);
        for (auto& v : c) v /= static_cast<double>(z.rows());
        p.centers.push_back(std::move(c));
    }
    return p;
}

/// Groups a labelled domain by class and computes its prototypes.
inline Prototypes compute_prototypes(const DPNetModel& model, const DomainData& support_domain) {
    std::vector<std::vector<Sample>> per_class(model.num_classes);
    for (const auto& s : support_domain.samples) per_class.at(s.y).push_back(s);
    return compute_prototypes(model, per_class);
}

namespace detail {

inline std::vector<double> neg_dists(std::span<const double> z, const Prototypes& p) {
    std::vector<double> out(p.num_classes());
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = -nn::sq_euclidean(z, p.centers[k]);
    return out;
}

}  // namespace detail

/// Log of the predictive distribution for every row of an embedded query batch.
inline std::vector<std::vector<double>> log_predictive(const Mat& query_embeddings, const Prototypes& p) {
    std::vector<std::vector<double>> out;
    out.reserve(query_embeddings.rows());
    for (std::size_t i = 0; i < query_embeddings.rows(); ++i)
        out.push_back(nn::log_softmax_from_neg_dists(detail::neg_dists(query_embeddings.row(i), p)));
    return out;
}

inline std::vector<double> predictive_distribution(const DPNetModel& model, const Prototypes& p,
                                                   std::span<const double> x) {
    Mat q(1, x.size());
    std::copy(x.begin(), x.end(), q.row(0).begin());
    const auto [z, cache] = nn::mlp_forward(model.f_psi, q);
    auto lp = log_predictive(z, p).front();
    for (auto& v : lp) v = std::exp(v);
    return lp;
}

struct EpisodeLoss {
    double loss = 0.0;
    nn::Grads grad_phi;
    nn::Grads grad_psi;
    double query_accuracy = 0.0;
};

/// Mean negative log-probability of the true class over the query set, with
/// gradients through both the query encoder and the prototype encoder.
inline EpisodeLoss episode_loss(const DPNetModel& model, const EpisodeBatch& batch) {
    const std::size_t K = model.num_classes;
    if (batch.support.size() != K || batch.query.size() != K)
        throw ShapeError("episode_loss: batch must hold one support and one query list per class");

    // Support forward pass, remembering which rows belong to which class.
    std::vector<Sample> support_flat;
    std::vector<std::size_t> support_class;
    for (std::size_t k = 0; k < K; ++k) {
        if (batch.support[k].empty()) throw ShapeError("episode_loss: empty support for class " + std::to_string(k));
        for (const auto& s : batch.support[k]) {
            support_flat.push_back(s);
            support_class.push_back(k);
        }
    }
    std::vector<Sample> query_flat;
    for (std::size_t k = 0; k < K; ++k)
        for (const auto& s : batch.query[k]) query_flat.push_back({s.x, k});
    if (query_flat.empty()) throw ShapeError("episode_loss: empty query set");

    const auto [zs, cache_s] = nn::mlp_forward(model.f_phi, stack_features(support_flat));
    const auto [zq, cache_q] = nn::mlp_forward(model.f_psi, stack_features(query_flat));
    const std::size_t D = zs.cols();

    Prototypes protos;
    protos.centers.assign(K, std::vector<double>(D, 0.0));
    std::vector<double> count(K, 0.0);
    for (std::size_t i = 0; i < zs.rows(); ++i) {
        const auto k = support_class[i];
        count[k] += 1.0;
        for (std::size_t j = 0; j < D; ++j) protos.centers[k][j] += zs(i, j);
    }
    for (std::size_t k = 0; k < K; ++k)
        for (auto& v : protos.centers[k]) v /= count[k];

    const std::size_t nq = zq.rows();
    const double inv_nq = 1.0 / static_cast<double>(nq);
    Mat dzq(nq, D);
    std::vector<std::vector<double>> dc(K, std::vector<double>(D, 0.0));
    double loss = 0.0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < nq; ++i) {
        const auto y = query_flat[i].y;
        const auto neg = detail::neg_dists(zq.row(i), protos);
        const auto lp = nn::log_softmax_from_neg_dists(neg);
        // d(y) + log sum_k' exp(-d(k'))
        loss += -lp[y];
        if (nn::argmax(lp) == y) ++correct;
        for (std::size_t k = 0; k < K; ++k) {
            // dJ/dd_k = (1[k=y] - p_k) / nq ; dd_k/dz = 2 (z - c_k)
            const double g = ((k == y ? 1.0 : 0.0) - std::exp(lp[k])) * inv_nq;
            for (std::size_t j = 0; j < D; ++j) {
                const double diff = 2.0 * (zq(i, j) - protos.centers[k][j]);
                dzq(i, j) += g * diff;
                dc[k][j] -= g * diff;
            }
        }
    }
    Mat dzs(zs.rows(), D);
    for (std::size_t i = 0; i < zs.rows(); ++i) {
        const auto k = support_class[i];
        for (std::size_t j = 0; j < D; ++j) dzs(i, j) = dc[k][j] / count[k];
    }

    EpisodeLoss out;
    out.loss = loss * inv_nq;
    out.query_accuracy = static_cast<double>(correct) * inv_nq;
    out.grad_phi = nn::mlp_backward(model.f_phi, cache_s, dzs, false).first;
    out.grad_psi = nn::mlp_backward(model.f_psi, cache_q, dzq, false).first;
    return out;
}

enum class EpisodeMode {
    Directional,  // support from domain i, query from domain i+1
    SameDomain,   // support and query are disjoint draws from one domain
};

/// Draws one training episode from the source domains.
inline EpisodeBatch sample_episode(std::span<const DomainData> domains, std::size_t n_b, Rng& rng,
                                   EpisodeMode mode = EpisodeMode::Directional) {
    if (n_b == 0) throw SamplingError("sample_episode: N_B must be positive");
    const std::size_t m = domains.size();
    if (mode == EpisodeMode::Directional && m < 2) throw SamplingError("sample_episode: need >= 2 source domains");
    if (m == 0) throw SamplingError("sample_episode: no domains");
    const std::size_t K = domains.front().num_classes;

    EpisodeBatch b;
    b.support.resize(K);
    b.query.resize(K);
    if (mode == EpisodeMode::Directional) {
        b.source_index = static_cast<std::size_t>(rng.below(m - 1));
        b.query_index = b.source_index + 1;
        const auto sup_groups = domains[b.source_index].class_indices();
        const auto qry_groups = domains[b.query_index].class_indices();
        for (std::size_t k = 0; k < K; ++k) {
            if (sup_groups[k].size() < n_b || qry_groups[k].size() < n_b)
                throw SamplingError("sample_episode: class " + std::to_string(k) + " has fewer than " +
                                    std::to_string(n_b) + " samples in domain " + std::to_string(b.source_index) +
                                    " or " + std::to_string(b.query_index));
            for (auto i : rng.sample_without_replacement(sup_groups[k], n_b))
                b.support[k].push_back(domains[b.source_index].samples[i]);
            for (auto i : rng.sample_without_replacement(qry_groups[k], n_b))
                b.query[k].push_back(domains[b.query_index].samples[i]);
        }
    } else {
        b.source_index = static_cast<std::size_t>(rng.below(m));
        b.query_index = b.source_index;
        const auto groups = domains[b.source_index].class_indices();
        for (std::size_t k = 0; k < K; ++k) {
            if (groups[k].size() < 2 * n_b)
                throw SamplingError("sample_episode: class " + std::to_string(k) + " has fewer than " +
                                    std::to_string(2 * n_b) + " samples in domain " + std::to_string(b.source_index));
            const auto picked = rng.sample_without_replacement(groups[k], 2 * n_b);
            for (std::size_t j = 0; j < n_b; ++j) b.support[k].push_back(domains[b.source_index].samples[picked[j]]);
            for (std::size_t j = n_b; j < 2 * n_b; ++j)
                b.query[k].push_back(domains[b.source_index].samples[picked[j]]);
        }
    }
    return b;
}

struct TrainConfig {
    std::size_t steps = 1000;
    std::size_t n_b = 16;
    nn::OptimConfig optimizer{};
    std::uint64_t seed = 0;
    EpisodeMode mode = EpisodeMode::Directional;
    /// Called after every step with (step, loss, query accuracy).
    std::function<void(std::size_t, double, double)> progress;
};

struct TrainResult {
    DPNetModel model;
    std::vector<double> loss_trace;
    std::vector<double> accuracy_trace;  // query accuracy of each episode
};

/// Episodic training on the source domains (the target must not be included).
inline TrainResult train(DPNetModel model, std::span<const DomainData> sources, const TrainConfig& cfg) {
    validate(model);
    Rng rng(derive_seed({cfg.seed, 0x7EA1}));
    auto st_phi = nn::make_optim_state(cfg.optimizer, model.f_phi);
    auto st_psi = nn::make_optim_state(cfg.optimizer, model.f_psi);
    TrainResult r;
    r.loss_trace.reserve(cfg.steps);
    r.accuracy_trace.reserve(cfg.steps);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const auto batch = sample_episode(sources, cfg.n_b, rng, cfg.mode);
        auto out = episode_loss(model, batch);
        if (!std::isfinite(out.loss))
            throw OptimizerError("dpnets::train: non-finite loss at step " + std::to_string(step));
        if (model.shared_encoder) {
            nn::accumulate(out.grad_phi, out.grad_psi);
            nn::optim_step(st_phi, model.f_phi, out.grad_phi);
            model.f_psi = model.f_phi;
        } else {
            if (!nn::all_finite(out.grad_phi) || !nn::all_finite(out.grad_psi))
                throw OptimizerError("dpnets::train: non-finite gradient at step " + std::to_string(step));
            nn::optim_step(st_phi, model.f_phi, out.grad_phi);
            nn::optim_step(st_psi, model.f_psi, out.grad_psi);
        }
        r.loss_trace.push_back(out.loss);
        r.accuracy_trace.push_back(out.query_accuracy);
        if (cfg.progress) cfg.progress(step, out.loss, out.query_accuracy);
    }
    r.model = std::move(model);
    return r;
}

/// Labels for `queries`: prototypes of `last_source` via f_phi, queries via f_psi,
/// argmax of the predictive distribution (ties to the lowest class).
inline std::vector<std::size_t> predict_target(const DPNetModel& model, const DomainData& last_source,
                                               std::span<const Sample> queries) {
    const auto protos = compute_prototypes(model, last_source);
    if (queries.empty()) return {};
    const auto [z, cache] = nn::mlp_forward(model.f_psi, stack_features(queries));
    std::vector<std::size_t> labels;
    labels.reserve(queries.size());
    for (const auto& lp : log_predictive(z, protos)) labels.push_back(nn::argmax(lp));
    return labels;
}

inline nlohmann::json sidecar_json(const DPNetModel& m) {
    return {{"architecture", m.f_phi.dims()},
            {"embed_dim", m.embed_dim},
            {"num_classes", m.num_classes},
            {"shared_encoder", m.shared_encoder}};
}

inline void save_model(const std::string& checkpoint_path, const DPNetModel& m) {
    const std::vector<MlpParams> nets{m.f_phi, m.f_psi};
    nn::save_checkpoint(checkpoint_path, nets);
}

inline DPNetModel load_model(const std::string& checkpoint_path, const nlohmann::json& sidecar) {
    auto nets = nn::load_checkpoint(checkpoint_path);
    if (nets.size() != 2) throw IngestionError(checkpoint_path, 12, "expected two encoders");
    DPNetModel m{std::move(nets[0]), std::move(nets[1]), sidecar.at("embed_dim").get<std::size_t>(),
                 sidecar.at("num_classes").get<std::size_t>(), sidecar.value("shared_encoder", false)};
    validate(m);
    return m;
}

}  // namespace edglab::dpnets
