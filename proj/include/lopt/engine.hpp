// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lopt/features.hpp"
#include "lopt/scratch.hpp"
#include "lopt/state.hpp"
#include "lopt/tensor_file.hpp"

namespace lopt {

enum class ExecutionPath { Naive, Fused };
std::string to_string(ExecutionPath p);
ExecutionPath parse_path(const std::string& s);

/// Sign applied to direction * exp(magnitude * alpha) * beta_out. Subtract
/// matches the shipped kernels; Add matches the textbook theta + delta form.
enum class UpdateSign { Subtract, Add };

struct DenseLayer {
    Eigen::MatrixXf weight; // out x in
    Eigen::VectorXf bias;   // out
};

/// Learned-optimizer MLP: ReLU between layers, identity on the last, two
/// outputs (direction, magnitude).
struct LoptWeights {
    std::vector<DenseLayer> layers;
    double alpha = 0.01;
    double beta_out = 0.01;
    BetaConfig betas;
    std::string feature_set = "small_fc_lopt";
    UpdateSign update_sign = UpdateSign::Subtract;

    std::size_t input_dim() const;
    std::size_t output_dim() const;
    std::size_t max_width() const;
    std::vector<std::size_t> topology() const;

    /// Throws ShapeMismatch unless dims chain and end in 2.
    void validate() const;

    /// {d_feat, 32, 32, 2}
    static std::vector<std::size_t> default_topology(const FeatureSetSpec& spec);
    static LoptWeights zeros(const std::vector<std::size_t>& topology, const FeatureSetSpec& spec);
    /// Gaussian weights scaled by 1/sqrt(fan_in), zero biases.
    static LoptWeights random(const std::vector<std::size_t>& topology, const FeatureSetSpec& spec,
                              std::uint64_t seed);

    void save_into(NamedTensorFile& file, const std::string& prefix = "lopt/") const;
    static LoptWeights load_from(const NamedTensorFile& file, const std::string& prefix = "lopt/");
    NamedTensorFile to_file() const;
};

/// Single-element forward pass. Returns (direction, magnitude).
std::pair<float, float> mlp_forward(std::span<const float> feat, const LoptWeights& w);

/// theta - direction * exp(magnitude * alpha) * beta_out (or + for UpdateSign::Add).
/// Throws NonFinite on overflow.
float apply_update(float theta, float direction, float magnitude, double alpha, double beta_out,
                   UpdateSign sign = UpdateSign::Subtract);

struct EngineConfig {
    std::size_t workers = 1;
    std::uint64_t scratch_cap_bytes = ScratchTracker::kUnlimited;
    std::size_t naive_block_rows = 4096;
};

/// Bulk passes over per-element data, the CPU analogue of kernel launches.
struct KernelCount {
    std::uint64_t accumulator_updates = 10;
    std::uint64_t feature_passes = 0;
    std::uint64_t reduction_passes = 0;
    std::uint64_t normalize_passes = 0;
    std::uint64_t mlp_passes = 0;
    std::uint64_t apply_passes = 0;

    std::uint64_t parameter_passes() const {
        return feature_passes + reduction_passes + normalize_passes + mlp_passes + apply_passes;
    }
    std::uint64_t total() const { return accumulator_updates + parameter_passes(); }
};

KernelCount count_kernel_equivalents(ExecutionPath path, const FeatureSetSpec& spec, std::size_t mlp_layers = 3);

struct UpdateReport {
    std::string tensor;
    ExecutionPath path = ExecutionPath::Fused;
    std::uint64_t elements = 0;
    float max_abs_update = 0.0f;
    double stats_ms = 0.0;
    double apply_ms = 0.0;
    KernelCount kernels;
    std::uint64_t scratch_high_water_bytes = 0;

    static std::string csv_header();
    std::string csv_row() const;
};

/// Engine step over one block. `out` receives the updated parameters for
/// block.range and may alias block.param. `lr` scales the learned update.
/// Scratch is reserved through `tracker`.
UpdateReport step_naive(const ElementBlock& block, std::span<float> out, const LoptWeights& weights,
                        const FeatureSetSpec& spec, const EngineConfig& config, ScratchTracker& tracker,
                        float lr = 1.0f);
UpdateReport step_fused(const ElementBlock& block, std::span<float> out, const LoptWeights& weights,
                        const FeatureSetSpec& spec, const EngineConfig& config, ScratchTracker& tracker,
                        float lr = 1.0f);
UpdateReport engine_step(ExecutionPath path, const ElementBlock& block, std::span<float> out,
                         const LoptWeights& weights, const FeatureSetSpec& spec, const EngineConfig& config,
                         ScratchTracker& tracker, float lr = 1.0f);

/// Value-returning forms. `state` must already be advanced for `g`.
std::pair<ParamTensor, UpdateReport> step_naive(const ParamTensor& w, const ParamTensor& g, const OptState& state,
                                                const LoptWeights& weights, const FeatureSetSpec& spec,
                                                const EngineConfig& config = {});
std::pair<ParamTensor, UpdateReport> step_fused(const ParamTensor& w, const ParamTensor& g, const OptState& state,
                                                const LoptWeights& weights, const FeatureSetSpec& spec,
                                                const EngineConfig& config = {});

// The two halves of the fused path, exposed for sharded execution.

/// Pass 1: per-worker partial sums merged by a fixed binary tree.
FeatureStats fused_stats(const ElementBlock& block, const FeatureContext& ctx, const EngineConfig& config,
                         ScratchTracker& tracker);

struct ApplyResult {
    float max_abs_update = 0.0f;
};

/// Pass 2: recompute, normalize with `factors`, run the MLP, write `out`.
/// Tiles and activations live on each worker's stack; only networks wider
/// than 256 borrow from `tracker`.
ApplyResult fused_apply(const ElementBlock& block, const FeatureContext& ctx, std::span<const float> factors,
                        const LoptWeights& weights, float lr, std::span<float> out, const EngineConfig& config,
                        ScratchTracker& tracker);

} // namespace lopt
