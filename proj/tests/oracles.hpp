// SPDX-License-Identifier: Apache-2.0
#pragma once

// Straight-line double-precision reference computations written from the
// feature table and update rule, without reusing any engine code paths.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lopt/engine.hpp"

namespace oracle {

inline constexpr double kEps = 1e-12;
inline constexpr double kEpsNorm = 1e-5;
inline const double kTimeXs[11] = {1, 3, 10, 30, 100, 300, 1000, 3000, 1e4, 3e4, 1e5};

/// Feature vector for flat element idx, in table order.
inline std::vector<double> features(std::size_t idx, const lopt::ParamTensor& w, const lopt::ParamTensor& g,
                                    const lopt::OptState& s, bool small_fc_lopt) {
    const std::size_t n = w.cols();
    const std::size_t a = idx / n;
    const std::size_t b = idx % n;
    const double W = w.data()[idx];
    const double G = g.data()[idx];
    double M[3], r[3], c[3], mean_r[3];
    for (int i = 0; i < 3; ++i) {
        M[i] = s.momentum[i].data()[idx];
        r[i] = s.row_factor[i].data()[a];
        c[i] = s.col_factor[i].data()[b];
        double sum = 0;
        for (float x : s.row_factor[i].data()) sum += x;
        mean_r[i] = sum / double(w.rows());
    }
    const double V = s.second_moment.data()[idx];
    std::vector<double> f;
    for (int i = 0; i < 3; ++i) f.push_back(M[i]);
    f.push_back(V);
    for (int i = 0; i < 3; ++i) f.push_back(r[i]);
    for (int i = 0; i < 3; ++i) f.push_back(c[i]);
    for (int i = 0; i < 3; ++i) f.push_back(M[i] / std::sqrt(V + kEps));
    f.push_back(1.0 / std::sqrt(V + kEps));
    for (int i = 0; i < 3; ++i) f.push_back(1.0 / std::sqrt(r[i] + kEps));
    for (int i = 0; i < 3; ++i) f.push_back(1.0 / std::sqrt(c[i] + kEps));
    for (int i = 0; i < 3; ++i) f.push_back(G * std::sqrt(mean_r[i] / (r[i] * c[i] + kEps)));
    for (int i = 0; i < 3; ++i) f.push_back(M[i] * std::sqrt(mean_r[i] / (r[i] * c[i] + kEps)));
    if (small_fc_lopt)
        for (double x : kTimeXs) f.push_back(std::tanh(double(s.step) / x));
    f.push_back(W);
    f.push_back(G);
    if (!small_fc_lopt) f.push_back(std::min(0.1, std::max(-0.1, G)));
    return f;
}

/// Column sums of squares over every element.
inline std::vector<double> sumsq(const lopt::ParamTensor& w, const lopt::ParamTensor& g, const lopt::OptState& s,
                                 bool small_fc_lopt) {
    std::vector<double> out;
    for (std::size_t idx = 0; idx < w.size(); ++idx) {
        const auto f = features(idx, w, g, s, small_fc_lopt);
        out.resize(f.size(), 0.0);
        for (std::size_t k = 0; k < f.size(); ++k) out[k] += f[k] * f[k];
    }
    return out;
}

/// (direction, magnitude) by explicit dot products.
inline std::pair<double, double> mlp(const std::vector<double>& x, const lopt::LoptWeights& w) {
    std::vector<double> h = x;
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        const auto& L = w.layers[l];
        std::vector<double> next(std::size_t(L.weight.rows()));
        for (std::size_t j = 0; j < next.size(); ++j) {
            double acc = L.bias[Eigen::Index(j)];
            for (std::size_t k = 0; k < h.size(); ++k) acc += double(L.weight(Eigen::Index(j), Eigen::Index(k))) * h[k];
            next[j] = (l + 1 < w.layers.size()) ? std::max(acc, 0.0) : acc;
        }
        h = std::move(next);
    }
    return {h[0], h[1]};
}

inline double update(double theta, double direction, double magnitude, double alpha, double beta_out, double lr = 1.0) {
    return theta - lr * direction * std::exp(magnitude * alpha) * beta_out;
}

/// Whole engine step, state already advanced.
inline std::vector<double> step(const lopt::ParamTensor& w, const lopt::ParamTensor& g, const lopt::OptState& s,
                                const lopt::LoptWeights& weights, bool small_fc_lopt, double lr = 1.0) {
    const auto sq = sumsq(w, g, s, small_fc_lopt);
    const double count = double(w.size());
    std::vector<double> out(w.size());
    for (std::size_t idx = 0; idx < w.size(); ++idx) {
        auto f = features(idx, w, g, s, small_fc_lopt);
        for (std::size_t k = 0; k < f.size(); ++k) f[k] /= std::sqrt(sq[k] / count + kEpsNorm);
        const auto [d, m] = mlp(f, weights);
        out[idx] = update(w.data()[idx], d, m, weights.alpha, weights.beta_out, lr);
    }
    return out;
}

inline double rel_dev(double got, double want) { return std::abs(got - want) / (1.0 + std::abs(want)); }

} // namespace oracle
