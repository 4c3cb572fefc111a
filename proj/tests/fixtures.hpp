// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <random>
#include <string>
#include <vector>

#include "lopt/engine.hpp"

namespace fixtures {

inline lopt::ParamTensor random_tensor(std::size_t m, std::size_t n, std::mt19937_64& rng, float scale = 1.0f) {
    std::normal_distribution<float> normal(0.0f, scale);
    lopt::ParamTensor t(m, n);
    for (float& x : t.data()) x = normal(rng);
    return t;
}

/// Parameters, the latest gradient, and a state advanced by `steps` random
/// gradients ending with that one.
struct Instance {
    lopt::ParamTensor w;
    lopt::ParamTensor g;
    lopt::OptState state;
};

inline Instance random_instance(std::size_t m, std::size_t n, std::uint64_t seed, int steps = 3,
                                const lopt::BetaConfig& betas = {}) {
    std::mt19937_64 rng(seed);
    Instance in{random_tensor(m, n, rng), lopt::ParamTensor(m, n), lopt::OptState::zeros({m, n})};
    for (int s = 0; s < steps; ++s) {
        in.g = random_tensor(m, n, rng, 0.5f);
        lopt::state_step_inplace(in.state, in.g, betas);
    }
    return in;
}

inline lopt::LoptWeights random_weights(const lopt::FeatureSetSpec& spec, std::uint64_t seed,
                                        std::vector<std::size_t> topology = {}) {
    if (topology.empty()) topology = lopt::LoptWeights::default_topology(spec);
    return lopt::LoptWeights::random(topology, spec, seed);
}

/// Random weights whose last layer is zero.
inline lopt::LoptWeights zero_output_weights(const lopt::FeatureSetSpec& spec, std::uint64_t seed) {
    auto w = random_weights(spec, seed);
    w.layers.back().weight.setZero();
    w.layers.back().bias.setZero();
    return w;
}

} // namespace fixtures
