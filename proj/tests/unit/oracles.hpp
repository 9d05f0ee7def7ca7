#pragma once

// Independent reference implementations used by the tests. Nothing here calls
// the library's numeric kernels; only the parameter containers are shared.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "edglab/tensor_nn.hpp"

namespace oracle {

using edglab::nn::Mat;
using edglab::nn::MlpParams;

// Row-by-row triple loop, ReLU between layers.
inline std::vector<double> forward_row(const MlpParams& p, std::vector<double> x) {
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const auto& L = p.layers[l];
        std::vector<double> y(L.weight.rows());
        for (std::size_t o = 0; o < L.weight.rows(); ++o) {
            long double acc = L.bias[o];
            for (std::size_t k = 0; k < L.weight.cols(); ++k) acc += static_cast<long double>(L.weight(o, k)) * x[k];
            y[o] = static_cast<double>(acc);
            if (l + 1 < p.layers.size()) y[o] = std::max(0.0, y[o]);
        }
        x = std::move(y);
    }
    return x;
}

inline Mat forward(const MlpParams& p, const Mat& batch) {
    Mat out;
    for (std::size_t i = 0; i < batch.rows(); ++i) {
        const auto y = forward_row(p, {batch.row(i).begin(), batch.row(i).end()});
        if (i == 0) out = Mat(batch.rows(), y.size());
        std::copy(y.begin(), y.end(), out.row(i).begin());
    }
    return out;
}

inline double log_sum_exp_naive(const std::vector<double>& v) {
    long double s = 0.0L;
    for (double x : v) s += std::exp(static_cast<long double>(x));
    return static_cast<double>(std::log(s));
}

// Relative error with a floor so that gradients that are zero up to rounding compare sanely.
inline constexpr double kRelFloor = 1e-6;

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), kRelFloor}); }

/// Central finite differences of `loss` with respect to every parameter of `net`;
/// returns the largest relative error against the analytic gradient `g`.
inline double max_fd_error(MlpParams& net, const edglab::nn::Grads& g, const std::function<double()>& loss,
                           double h = 1e-5) {
    double worst = 0.0;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        auto probe = [&](double& param, double analytic) {
            const double keep = param;
            param = keep + h;
            const double up = loss();
            param = keep - h;
            const double down = loss();
            param = keep;
            worst = std::max(worst, rel_err((up - down) / (2.0 * h), analytic));
        };
        auto& W = net.layers[l].weight.values();
        for (std::size_t i = 0; i < W.size(); ++i) probe(W[i], g.layers[l].weight.values()[i]);
        auto& b = net.layers[l].bias;
        for (std::size_t i = 0; i < b.size(); ++i) probe(b[i], g.layers[l].bias[i]);
    }
    return worst;
}

inline double sample_std(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace oracle
