#pragma once

// Comparison methods on the same kernel: pooled ERM, ERM on the k most recent
// domains, ERM with the domain index injected into the input, and the vanilla
// prototypical network (one shared encoder, support and query from one domain).

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "edglab/dpnets.hpp"
#include "edglab/error.hpp"
#include "edglab/rng.hpp"
#include "edglab/synthetic_data.hpp"
#include "edglab/tensor_nn.hpp"

namespace edglab::baselines {

using data::DomainData;
using data::Sample;

enum class IndexMode { None, ScalarConcat, OneHotConcat, OuterProduct };

inline std::string_view to_string(IndexMode m) {
    switch (m) {
        case IndexMode::None: return "none";
        case IndexMode::ScalarConcat: return "scalar";
        case IndexMode::OneHotConcat: return "onehot";
        case IndexMode::OuterProduct: return "outer";
    }
    return "?";
}

inline std::size_t augmented_dim(std::size_t feature_dim, IndexMode mode, std::size_t m) {
    switch (mode) {
        case IndexMode::None: return feature_dim;
        case IndexMode::ScalarConcat: return feature_dim + 1;
        case IndexMode::OneHotConcat: return feature_dim + m;
        case IndexMode::OuterProduct: return feature_dim * m;
    }
    return feature_dim;
}

/// Appends (or multiplies in) the index of the domain `x` came from, out of `m` domains.
inline std::vector<double> augment_with_index(std::span<const double> x, std::size_t i, IndexMode mode, std::size_t m) {
    if (i >= m) throw ConfigError("augment_with_index: index " + std::to_string(i) + " >= m=" + std::to_string(m));
    std::vector<double> out;
    out.reserve(augmented_dim(x.size(), mode, m));
    switch (mode) {
        case IndexMode::None:
            out.assign(x.begin(), x.end());
            break;
        case IndexMode::ScalarConcat:
            out.assign(x.begin(), x.end());
            out.push_back(m > 1 ? static_cast<double>(i) / static_cast<double>(m - 1) : 0.0);
            break;
        case IndexMode::OneHotConcat:
            out.assign(x.begin(), x.end());
            for (std::size_t j = 0; j < m; ++j) out.push_back(j == i ? 1.0 : 0.0);
            break;
        case IndexMode::OuterProduct:
            // flatten(x (x) e_i), row-major over x
            for (double v : x)
                for (std::size_t j = 0; j < m; ++j) out.push_back(j == i ? v : 0.0);
            break;
    }
    return out;
}

struct ErmModel {
    nn::MlpParams net;  // ends in num_classes logits
    IndexMode index_mode = IndexMode::None;
    std::size_t num_domains_seen = 1;
    std::size_t feature_dim = 0;
    std::size_t num_classes = 0;
};

/// Input row for a sample from domain `domain_index`. Indices >= m denote the unseen
/// target: the scalar code extrapolates to i/(m-1), one-hot and outer-product codes
/// reuse the last seen index m-1.
inline std::vector<double> erm_input(const ErmModel& model, std::span<const double> x, std::size_t domain_index) {
    if (x.size() != model.feature_dim) throw ShapeError("erm_input: feature dimension mismatch");
    const std::size_t m = model.num_domains_seen;
    if (domain_index < m || model.index_mode == IndexMode::None)
        return augment_with_index(x, std::min(domain_index, m - 1), model.index_mode, m);
    if (model.index_mode == IndexMode::ScalarConcat) {
        std::vector<double> out(x.begin(), x.end());
        out.push_back(m > 1 ? static_cast<double>(domain_index) / static_cast<double>(m - 1) : 0.0);
        return out;
    }
    return augment_with_index(x, m - 1, model.index_mode, m);
}

inline std::vector<double> erm_logits(const ErmModel& model, std::span<const double> x, std::size_t domain_index) {
    const auto in = erm_input(model, x, domain_index);
    nn::Mat row(1, in.size());
    std::copy(in.begin(), in.end(), row.row(0).begin());
    const auto [out, cache] = nn::mlp_forward(model.net, row);
    return {out.row(0).begin(), out.row(0).end()};
}

/// argmax of the logits, ties to class 0 side (lowest index).
inline std::size_t predict_erm(const ErmModel& model, std::span<const double> x, std::size_t domain_index) {
    return nn::argmax(erm_logits(model, x, domain_index));
}

/// Batched prediction for every sample of a domain seen as `domain_index`.
inline std::vector<std::size_t> predict_erm_batch(const ErmModel& model, std::span<const Sample> xs,
                                                  std::size_t domain_index) {
    if (xs.empty()) return {};
    nn::Mat in(xs.size(), augmented_dim(model.feature_dim, model.index_mode, model.num_domains_seen));
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const auto row = erm_input(model, xs[i].x, domain_index);
        std::copy(row.begin(), row.end(), in.row(i).begin());
    }
    const auto [out, cache] = nn::mlp_forward(model.net, in);
    std::vector<std::size_t> labels(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) labels[i] = nn::argmax(out.row(i));
    return labels;
}

struct ErmConfig {
    std::size_t steps = 1000;
    std::size_t batch_size = 64;
    std::vector<std::size_t> hidden;  // empty = linear classifier
    nn::OptimConfig optimizer{};
    std::uint64_t seed = 0;
    std::function<void(std::size_t, double)> progress;
};

struct ErmTrainResult {
    ErmModel model;
    std::vector<double> loss_trace;
};

/// Mini-batch cross-entropy on pooled (index-augmented) source samples. With
/// `last_k`, only the final k source domains are used and re-indexed 0..k-1.
inline ErmTrainResult train_erm_traced(std::span<const DomainData> domains, const ErmConfig& cfg, IndexMode mode,
                                       std::optional<std::size_t> last_k = std::nullopt) {
    if (domains.empty()) throw ConfigError("train_erm: need at least one source domain");
    if (last_k) {
        if (*last_k == 0) throw ConfigError("train_erm: last_k must be >= 1");
        if (*last_k < domains.size()) domains = domains.subspan(domains.size() - *last_k);
    }
    if (cfg.batch_size == 0) throw ConfigError("train_erm: batch_size must be positive");
    const std::size_t m = domains.size();
    const std::size_t d = domains.front().feature_dim();
    const std::size_t K = domains.front().num_classes;

    std::vector<std::vector<double>> inputs;
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < m; ++i)
        for (const auto& s : domains[i].samples) {
            inputs.push_back(augment_with_index(s.x, i, mode, m));
            labels.push_back(s.y);
        }

    std::vector<std::size_t> dims{augmented_dim(d, mode, m)};
    dims.insert(dims.end(), cfg.hidden.begin(), cfg.hidden.end());
    dims.push_back(K);
    Rng init_rng(derive_seed({cfg.seed, 0xE5A1}));
    ErmTrainResult r;
    r.model = ErmModel{nn::make_mlp(dims, init_rng), mode, m, d, K};
    auto state = nn::make_optim_state(cfg.optimizer, r.model.net);

    Rng rng(derive_seed({cfg.seed, 0xBA7C}));
    std::vector<std::size_t> order(inputs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::size_t cursor = order.size();
    const std::size_t bs = std::min(cfg.batch_size, inputs.size());
    r.loss_trace.reserve(cfg.steps);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        nn::Mat x(bs, dims.front());
        std::vector<std::size_t> y(bs);
        for (std::size_t b = 0; b < bs; ++b) {
            if (cursor == order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            const auto idx = order[cursor++];
            std::copy(inputs[idx].begin(), inputs[idx].end(), x.row(b).begin());
            y[b] = labels[idx];
        }
        const auto [logits, cache] = nn::mlp_forward(r.model.net, x);
        const auto [loss, dlogits] = nn::cross_entropy(logits, y);
        if (!std::isfinite(loss)) throw OptimizerError("train_erm: non-finite loss at step " + std::to_string(step));
        const auto grads = nn::mlp_backward(r.model.net, cache, dlogits, false).first;
        nn::optim_step(state, r.model.net, grads);
        r.loss_trace.push_back(loss);
        if (cfg.progress) cfg.progress(step, loss);
    }
    return r;
}

inline ErmModel train_erm(std::span<const DomainData> domains, const ErmConfig& cfg, IndexMode mode,
                          std::optional<std::size_t> last_k = std::nullopt) {
    return train_erm_traced(domains, cfg, mode, last_k).model;
}

/// Vanilla prototypical network: one encoder, same-domain episodes.
inline dpnets::TrainResult train_proto_vanilla(std::span<const DomainData> domains, std::span<const std::size_t> dims,
                                               dpnets::TrainConfig cfg) {
    if (domains.empty()) throw ConfigError("train_proto_vanilla: no source domains");
    auto model = dpnets::make_shared_model(dims, domains.front().num_classes, cfg.seed);
    cfg.mode = dpnets::EpisodeMode::SameDomain;
    return dpnets::train(std::move(model), domains, cfg);
}

}  // namespace edglab::baselines
