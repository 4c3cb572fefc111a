// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lopt/engine.hpp"

namespace lopt {

enum class ScheduleKind { Constant, Cosine };

/// Linear warmup from 0 to max_lr over warmup_steps, then either max_lr
/// (Constant) or a half cosine down to min_lr at total_steps (Cosine).
struct ScheduleConfig {
    ScheduleKind kind = ScheduleKind::Constant;
    double max_lr = 1.0;
    double min_lr = 0.0;
    std::uint64_t warmup_steps = 0;
    std::uint64_t total_steps = 0;

    void validate() const;
    static ScheduleConfig constant(double lr) { return {ScheduleKind::Constant, lr, lr, 0, 0}; }
    static ScheduleConfig cosine(double max_lr, double min_lr, std::uint64_t warmup, std::uint64_t total) {
        return {ScheduleKind::Cosine, max_lr, min_lr, warmup, total};
    }
};

std::string to_string(ScheduleKind k);
ScheduleKind parse_schedule_kind(const std::string& s);

/// Learning rate for `step`. Warmup end and total_steps return max_lr and
/// min_lr exactly; steps past total_steps clamp to min_lr.
double schedule_lr(const ScheduleConfig& cfg, std::uint64_t step);

/// theta <- theta * (1 - lr * lambda), the multiplier rounded once to f32.
void apply_weight_decay(ParamTensor& theta, double lr, double lambda);
ParamTensor apply_weight_decay(const ParamTensor& theta, double lr, double lambda);

/// Multi-tensor learned optimizer.
///
/// A step runs, per tensor: accumulator update, engine step with the learned
/// update scaled by schedule_lr(step + 1), decoupled weight decay at the same
/// lr. Tensors are stepped in order; each engine step uses engine.workers.
///
/// The loss passed to opt_step is recorded in last_loss and nothing else; it
/// does not change the update.
struct OptimizerHandle {
    std::vector<std::string> names;
    std::vector<ParamTensor> params;
    std::vector<OptState> states;
    LoptWeights weights;
    std::map<std::string, LoptWeights> per_tensor_weights;
    ScheduleConfig schedule;
    double weight_decay = 0.0;
    ExecutionPath path = ExecutionPath::Fused;
    EngineConfig engine;
    std::uint64_t step = 0;
    std::optional<float> last_loss;
    std::vector<UpdateReport> last_reports;

    OptimizerHandle() = default;
    OptimizerHandle(std::vector<std::string> names, std::vector<ParamTensor> params, LoptWeights weights);

    const LoptWeights& weights_for(std::size_t i) const;
    std::size_t find(const std::string& name) const;
    /// Throws unless names/params/states line up and every state.step == step.
    void validate() const;
};

/// One tensor's share of opt_step at learning rate `lr`.
UpdateReport step_tensor(ParamTensor& param, OptState& state, const ParamTensor& grad, const LoptWeights& weights,
                         const FeatureSetSpec& spec, ExecutionPath path, const EngineConfig& engine, double lr,
                         double weight_decay, ScratchTracker& tracker);

void opt_step(OptimizerHandle& h, const std::vector<ParamTensor>& grads, std::optional<float> loss = std::nullopt);

struct AdamResult {
    ParamTensor theta;
    ParamTensor m;
    ParamTensor v;
};

/// Bias-corrected Adam; t counts from 1.
AdamResult adam_step(const ParamTensor& theta, const ParamTensor& g, const ParamTensor& m, const ParamTensor& v,
                     float beta1, float beta2, float lr, float eps, std::uint64_t t);
void adam_step_inplace(ParamTensor& theta, const ParamTensor& g, ParamTensor& m, ParamTensor& v, float beta1,
                       float beta2, float lr, float eps, std::uint64_t t);

/// Adafactor without momentum, update clipping or relative step size:
///
///   r <- beta2 r + (1 - beta2) row_mean(g^2 + eps1)
///   c <- beta2 c + (1 - beta2) col_mean(g^2 + eps1)
///   V = r c^T / mean(r)
///   theta <- theta - lr g / sqrt(V)
///
/// r is m x 1, c is 1 x n.
struct AdafactorResult {
    ParamTensor theta;
    ParamTensor r;
    ParamTensor c;
};

AdafactorResult adafactor_step(const ParamTensor& theta, const ParamTensor& g, const ParamTensor& r,
                               const ParamTensor& c, float beta2, float lr, float eps1 = 1e-30f);
void adafactor_step_inplace(ParamTensor& theta, const ParamTensor& g, ParamTensor& r, ParamTensor& c, float beta2,
                            float lr, float eps1 = 1e-30f);
/// V = r c^T / mean(r).
ParamTensor adafactor_second_moment(const ParamTensor& r, const ParamTensor& c);

/// Metadata: kind=checkpoint, step, feature_set, schedule, weight decay, path.
NamedTensorFile checkpoint_save(const OptimizerHandle& h);
/// Throws FeatureSetMismatch if `expected_feature_set` is given and differs,
/// SchemaMismatch if the file is not a checkpoint or is inconsistent.
OptimizerHandle checkpoint_load(const NamedTensorFile& file,
                                const std::optional<std::string>& expected_feature_set = std::nullopt);

} // namespace lopt
