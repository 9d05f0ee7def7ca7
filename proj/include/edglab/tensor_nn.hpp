#pragma once

// Dense f64 kernel: row-major matrices, ReLU MLPs with exact reverse-mode
// gradients, stable softmax helpers, SGD/Adam and a portable checkpoint format.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "edglab/error.hpp"
#include "edglab/rng.hpp"

namespace edglab::nn {

class Mat {
public:
    Mat() = default;
    Mat(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static Mat from_rows(const std::vector<std::vector<double>>& rows) {
        const std::size_t c = rows.empty() ? 0 : rows.front().size();
        Mat m(rows.size(), c);
        for (std::size_t r = 0; r < rows.size(); ++r) {
            if (rows[r].size() != c) throw ShapeError("Mat::from_rows: ragged rows");
            std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
        }
        return m;
    }

    static Mat identity(std::size_t n) {
        Mat m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::vector<double>& values() noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    friend bool operator==(const Mat&, const Mat&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// One affine map; `weight` is out x in.
struct Layer {
    Mat weight;
    std::vector<double> bias;

    friend bool operator==(const Layer&, const Layer&) = default;
};

/// ReLU on every hidden layer, identity on the last one.
struct MlpParams {
    std::vector<Layer> layers;

    std::size_t in_dim() const { return layers.front().weight.cols(); }
    std::size_t out_dim() const { return layers.back().weight.rows(); }

    std::vector<std::size_t> dims() const {
        std::vector<std::size_t> d;
        if (layers.empty()) return d;
        d.push_back(in_dim());
        for (const auto& l : layers) d.push_back(l.weight.rows());
        return d;
    }

    friend bool operator==(const MlpParams&, const MlpParams&) = default;
};

/// Gradient with the exact layout of the MlpParams it was computed for.
struct Grads {
    std::vector<Layer> layers;

    friend bool operator==(const Grads&, const Grads&) = default;
};

/// Per-layer inputs and pre-activations recorded by mlp_forward.
struct ForwardCache {
    std::vector<Mat> inputs;
    std::vector<Mat> pre_activations;
};

inline void check_chain(const MlpParams& p) {
    if (p.layers.empty()) throw ShapeError("MlpParams: at least one layer required");
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const auto& layer = p.layers[l];
        if (layer.bias.size() != layer.weight.rows())
            throw ShapeError("MlpParams: bias length does not match layer " + std::to_string(l));
        if (l > 0 && layer.weight.cols() != p.layers[l - 1].weight.rows())
            throw ShapeError("MlpParams: layer " + std::to_string(l) + " does not chain");
    }
}

/// Kaiming-uniform (bound sqrt(6/fan_in)) for layers feeding a ReLU, and
/// sqrt(3/fan_in) for the identity output layer. Biases start at zero.
inline MlpParams make_mlp(std::span<const std::size_t> dims, Rng& rng) {
    if (dims.size() < 2) throw ShapeError("make_mlp: need at least input and output dims");
    MlpParams p;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        const std::size_t in = dims[l];
        const std::size_t out = dims[l + 1];
        const bool hidden = l + 2 < dims.size();
        const double bound = std::sqrt((hidden ? 6.0 : 3.0) / static_cast<double>(in));
        Layer layer{Mat(out, in), std::vector<double>(out, 0.0)};
        for (auto& w : layer.weight.values()) w = rng.uniform(-bound, bound);
        p.layers.push_back(std::move(layer));
    }
    return p;
}

inline MlpParams make_mlp(std::initializer_list<std::size_t> dims, Rng& rng) {
    const std::vector<std::size_t> d(dims);
    return make_mlp(std::span<const std::size_t>(d), rng);
}

inline Grads zeros_like(const MlpParams& p) {
    Grads g;
    for (const auto& l : p.layers)
        g.layers.push_back({Mat(l.weight.rows(), l.weight.cols()), std::vector<double>(l.bias.size(), 0.0)});
    return g;
}

inline void accumulate(Grads& into, const Grads& other) {
    if (into.layers.size() != other.layers.size()) throw ShapeError("accumulate: layer count mismatch");
    for (std::size_t l = 0; l < into.layers.size(); ++l) {
        auto& a = into.layers[l];
        const auto& b = other.layers[l];
        if (a.weight.size() != b.weight.size() || a.bias.size() != b.bias.size())
            throw ShapeError("accumulate: layer shape mismatch");
        for (std::size_t i = 0; i < a.weight.size(); ++i) a.weight.values()[i] += b.weight.values()[i];
        for (std::size_t i = 0; i < a.bias.size(); ++i) a.bias[i] += b.bias[i];
    }
}

inline bool all_finite(const Grads& g) {
    for (const auto& l : g.layers) {
        for (double v : l.weight.values())
            if (!std::isfinite(v)) return false;
        for (double v : l.bias)
            if (!std::isfinite(v)) return false;
    }
    return true;
}

namespace detail {

// Below this many rows the cost of transposing w outweighs the axpy layout.
inline constexpr std::size_t kAffineTransposeMinRows = 8;

// out = x * w^T + b, with w (out x in). The transpose keeps the inner loop a
// contiguous axpy.
inline Mat affine(const Mat& x, const Layer& layer) {
    const std::size_t n = x.rows();
    const std::size_t in = layer.weight.cols();
    const std::size_t out = layer.weight.rows();
    if (n < kAffineTransposeMinRows) {
        // few rows: dot products straight off the row-major weights, no transpose
        Mat y(n, out);
        for (std::size_t i = 0; i < n; ++i) {
            const double* xr = x.row(i).data();
            for (std::size_t o = 0; o < out; ++o) {
                const double* wr = layer.weight.row(o).data();
                double s = layer.bias[o];
                for (std::size_t k = 0; k < in; ++k) s += wr[k] * xr[k];
                y(i, o) = s;
            }
        }
        return y;
    }
    Mat wt(in, out);
    for (std::size_t o = 0; o < out; ++o)
        for (std::size_t k = 0; k < in; ++k) wt(k, o) = layer.weight(o, k);
    Mat y(n, out);
    for (std::size_t i = 0; i < n; ++i) {
        double* yr = y.row(i).data();
        std::copy(layer.bias.begin(), layer.bias.end(), yr);
        const double* xr = x.row(i).data();
        for (std::size_t k = 0; k < in; ++k) {
            const double xv = xr[k];
            if (xv == 0.0) continue;
            const double* wr = wt.row(k).data();
            for (std::size_t o = 0; o < out; ++o) yr[o] += xv * wr[o];
        }
    }
    return y;
}

}  // namespace detail

inline std::pair<Mat, ForwardCache> mlp_forward(const MlpParams& params, const Mat& batch) {
    check_chain(params);
    if (batch.cols() != params.in_dim())
        throw ShapeError("mlp_forward: batch has " + std::to_string(batch.cols()) + " columns, network expects " +
                         std::to_string(params.in_dim()));
    ForwardCache cache;
    Mat h = batch;
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        Mat z = detail::affine(h, params.layers[l]);
        cache.inputs.push_back(std::move(h));
        h = z;
        if (l + 1 < params.layers.size())
            for (auto& v : h.values()) v = v > 0.0 ? v : 0.0;
        cache.pre_activations.push_back(std::move(z));
    }
    return {std::move(h), std::move(cache)};
}

/// Reverse pass for mlp_forward; returns parameter gradients and d(loss)/d(input).
/// With `want_input_grad` false the input gradient is left empty, which saves
/// the widest product of the pass.
inline std::pair<Grads, Mat> mlp_backward(const MlpParams& params, const ForwardCache& cache, const Mat& output_grad,
                                          bool want_input_grad = true) {
    check_chain(params);
    const std::size_t depth = params.layers.size();
    if (cache.inputs.size() != depth || cache.pre_activations.size() != depth)
        throw ShapeError("mlp_backward: cache does not match network depth");
    const std::size_t n = cache.inputs.front().rows();
    if (output_grad.rows() != n || output_grad.cols() != params.out_dim())
        throw ShapeError("mlp_backward: output gradient shape mismatch");

    Grads grads = zeros_like(params);
    Mat delta = output_grad;
    for (std::size_t l = depth; l-- > 0;) {
        const Layer& layer = params.layers[l];
        const Mat& x = cache.inputs[l];
        const std::size_t in = layer.weight.cols();
        const std::size_t out = layer.weight.rows();
        if (l + 1 < depth) {
            const Mat& z = cache.pre_activations[l];
            for (std::size_t i = 0; i < delta.size(); ++i)
                if (!(z.values()[i] > 0.0)) delta.values()[i] = 0.0;
        }
        Layer& g = grads.layers[l];
        const bool need_dx = l > 0 || want_input_grad;
        Mat dx = need_dx ? Mat(n, in) : Mat();
        std::vector<std::size_t> nz;
        for (std::size_t i = 0; i < n; ++i) {
            const double* dr = delta.row(i).data();
            const double* xr = x.row(i).data();
            double* dxr = need_dx ? dx.row(i).data() : nullptr;
            // sparse inputs (post-ReLU activations, image pixels) only touch their non-zero columns
            nz.clear();
            for (std::size_t k = 0; k < in; ++k)
                if (xr[k] != 0.0) nz.push_back(k);
            const bool sparse = 2 * nz.size() < in;
            for (std::size_t o = 0; o < out; ++o) {
                const double d = dr[o];
                if (d == 0.0) continue;
                g.bias[o] += d;
                double* gw = g.weight.row(o).data();
                if (sparse) {
                    for (auto k : nz) gw[k] += d * xr[k];
                } else {
                    for (std::size_t k = 0; k < in; ++k) gw[k] += d * xr[k];
                }
                if (need_dx) {
                    const double* w = layer.weight.row(o).data();
                    for (std::size_t k = 0; k < in; ++k) dxr[k] += d * w[k];
                }
            }
        }
        delta = std::move(dx);
    }
    return {std::move(grads), std::move(delta)};
}

inline double sq_euclidean(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw ShapeError("sq_euclidean: lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
    double s = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) {
        const double d = a[j] - b[j];
        s += d * d;
    }
    return s;
}

/// log-softmax with max subtraction.
inline std::vector<double> log_softmax(std::span<const double> logits) {
    std::vector<double> out(logits.size());
    if (logits.empty()) return out;
    const double mx = *std::max_element(logits.begin(), logits.end());
    double s = 0.0;
    for (double v : logits) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    for (std::size_t k = 0; k < logits.size(); ++k) out[k] = logits[k] - lse;
    return out;
}

/// The inputs are already negated distances, -d(z, c_k).
inline std::vector<double> log_softmax_from_neg_dists(std::span<const double> neg_dists) {
    return log_softmax(neg_dists);
}

/// Mean cross-entropy of row-wise logits; returns (loss, d loss / d logits).
inline std::pair<double, Mat> cross_entropy(const Mat& logits, std::span<const std::size_t> labels) {
    if (labels.size() != logits.rows()) throw ShapeError("cross_entropy: label count mismatch");
    const double inv_n = 1.0 / static_cast<double>(logits.rows());
    Mat grad(logits.rows(), logits.cols());
    double loss = 0.0;
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        if (labels[i] >= logits.cols()) throw ShapeError("cross_entropy: label out of range");
        const auto lp = log_softmax(logits.row(i));
        loss -= lp[labels[i]];
        for (std::size_t k = 0; k < lp.size(); ++k)
            grad(i, k) = (std::exp(lp[k]) - (k == labels[i] ? 1.0 : 0.0)) * inv_n;
    }
    return {loss * inv_n, std::move(grad)};
}

/// Index of the largest entry; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> v) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < v.size(); ++k)
        if (v[k] > v[best]) best = k;
    return best;
}

enum class OptimKind { Sgd, Adam };

struct OptimConfig {
    OptimKind kind = OptimKind::Adam;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct OptimState {
    OptimConfig config;
    Grads first;   // Adam only
    Grads second;  // Adam only
    long step_count = 0;
};

inline OptimState make_optim_state(const OptimConfig& config, const MlpParams& params) {
    if (!(config.lr > 0.0) || !std::isfinite(config.lr)) throw ConfigError("optimizer: lr must be positive");
    OptimState s{config, {}, {}, 0};
    if (config.kind == OptimKind::Adam) {
        s.first = zeros_like(params);
        s.second = zeros_like(params);
    }
    return s;
}

inline void optim_step(OptimState& state, MlpParams& params, const Grads& grads) {
    if (grads.layers.size() != params.layers.size()) throw ShapeError("optim_step: gradient depth mismatch");
    for (std::size_t l = 0; l < params.layers.size(); ++l)
        if (grads.layers[l].weight.size() != params.layers[l].weight.size() ||
            grads.layers[l].bias.size() != params.layers[l].bias.size())
            throw ShapeError("optim_step: gradient shape mismatch at layer " + std::to_string(l));
    if (!all_finite(grads)) throw OptimizerError("optim_step: non-finite gradient");

    const auto& c = state.config;
    ++state.step_count;
    auto update = [&](std::vector<double>& p, const std::vector<double>& g, std::vector<double>* m,
                      std::vector<double>* v) {
        if (c.kind == OptimKind::Sgd) {
            for (std::size_t i = 0; i < p.size(); ++i) p[i] -= c.lr * g[i];
            return;
        }
        const double t = static_cast<double>(state.step_count);
        const double bc1 = 1.0 - std::pow(c.beta1, t);
        const double bc2 = 1.0 - std::pow(c.beta2, t);
        for (std::size_t i = 0; i < p.size(); ++i) {
            (*m)[i] = c.beta1 * (*m)[i] + (1.0 - c.beta1) * g[i];
            (*v)[i] = c.beta2 * (*v)[i] + (1.0 - c.beta2) * g[i] * g[i];
            const double mhat = (*m)[i] / bc1;
            const double vhat = (*v)[i] / bc2;
            p[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
        }
    };
    const bool adam = c.kind == OptimKind::Adam;
    if (adam && state.first.layers.size() != params.layers.size())
        throw ShapeError("optim_step: optimizer state does not match parameters");
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        update(params.layers[l].weight.values(), grads.layers[l].weight.values(),
               adam ? &state.first.layers[l].weight.values() : nullptr,
               adam ? &state.second.layers[l].weight.values() : nullptr);
        update(params.layers[l].bias, grads.layers[l].bias, adam ? &state.first.layers[l].bias : nullptr,
               adam ? &state.second.layers[l].bias : nullptr);
    }
}

// Checkpoint layout (all integers little-endian):
//   "EDGCKPT\0" | u32 version | u32 network count
//   per network: u32 layer count, per layer: u32 out, u32 in, f64[out*in] weight, f64[out] bias
inline constexpr char kCheckpointMagic[8] = {'E', 'D', 'G', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xFF));
}

inline void put_f64(std::string& out, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
}

class ByteReader {
public:
    ByteReader(const std::string& bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

    std::uint32_t u32() {
        need(4, "u32");
        std::uint32_t v = 0;
        for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + b])) << (8 * b);
        pos_ += 4;
        return v;
    }

    double f64() {
        need(8, "f64");
        std::uint64_t v = 0;
        for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + b])) << (8 * b);
        pos_ += 8;
        return std::bit_cast<double>(v);
    }

    void expect(std::span<const char> magic) {
        need(magic.size(), "magic");
        if (std::memcmp(bytes_.data() + pos_, magic.data(), magic.size()) != 0)
            throw IngestionError(source_, pos_, "bad checkpoint magic");
        pos_ += magic.size();
    }

    std::size_t pos() const { return pos_; }
    bool done() const { return pos_ == bytes_.size(); }
    const std::string& source() const { return source_; }

private:
    void need(std::size_t n, const char* what) {
        if (pos_ + n > bytes_.size()) throw IngestionError(source_, pos_, std::string("truncated while reading ") + what);
    }

    const std::string& bytes_;
    std::string source_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(std::span<const MlpParams> networks) {
    std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(networks.size()));
    for (const auto& net : networks) {
        detail::put_u32(out, static_cast<std::uint32_t>(net.layers.size()));
        for (const auto& l : net.layers) {
            detail::put_u32(out, static_cast<std::uint32_t>(l.weight.rows()));
            detail::put_u32(out, static_cast<std::uint32_t>(l.weight.cols()));
            for (double v : l.weight.values()) detail::put_f64(out, v);
            for (double v : l.bias) detail::put_f64(out, v);
        }
    }
    return out;
}

inline std::vector<MlpParams> decode_checkpoint(const std::string& bytes, const std::string& source = "<memory>") {
    detail::ByteReader in(bytes, source);
    in.expect(kCheckpointMagic);
    const auto version_at = in.pos();
    if (in.u32() != kCheckpointVersion) throw IngestionError(source, version_at, "unsupported checkpoint version");
    const auto count = in.u32();
    std::vector<MlpParams> nets;
    for (std::uint32_t n = 0; n < count; ++n) {
        MlpParams p;
        const auto depth = in.u32();
        for (std::uint32_t l = 0; l < depth; ++l) {
            const auto out = in.u32();
            const auto inn = in.u32();
            Layer layer{Mat(out, inn), std::vector<double>(out)};
            for (auto& v : layer.weight.values()) v = in.f64();
            for (auto& v : layer.bias) v = in.f64();
            p.layers.push_back(std::move(layer));
        }
        try {
            check_chain(p);
        } catch (const ShapeError& e) {
            throw IngestionError(source, in.pos(), e.what());
        }
        nets.push_back(std::move(p));
    }
    if (!in.done()) throw IngestionError(source, in.pos(), "trailing bytes after checkpoint");
    return nets;
}

inline void save_checkpoint(const std::string& path, std::span<const MlpParams> networks) {
    std::ofstream f(path, std::ios::binary);
    const auto bytes = encode_checkpoint(networks);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("cannot write checkpoint " + path);
}

inline std::vector<MlpParams> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IngestionError(path, 0, "cannot open checkpoint");
    std::ostringstream ss;
    ss << f.rdbuf();
    return decode_checkpoint(ss.str(), path);
}

/// FNV-1a 64, used for checkpoint fingerprints.
inline std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

}  // namespace edglab::nn
