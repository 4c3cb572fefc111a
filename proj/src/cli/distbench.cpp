// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include "lopt/cli.hpp"

namespace lopt::cli {

DistBenchResult run_distbench(const DistBenchConfig& cfg) {
    require(cfg.workers >= 1, ErrorCode::InvalidArgument, "workers must be positive");
    const auto shapes = workload_shapes(Workload::MlpSweep, cfg.width, cfg.depth, 0);
    const LoptWeights weights = resolve_weights(cfg.weights_path, "small_fc_lopt", cfg.seed);
    const FeatureSetSpec spec = FeatureSetSpec::from_name(weights.feature_set);

    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<float> normal;
    std::vector<std::string> names;
    std::vector<ParamTensor> params;
    for (std::size_t t = 0; t < shapes.size(); ++t) {
        names.push_back("p" + std::to_string(t));
        ParamTensor p(shapes[t].rows, shapes[t].cols);
        for (float& x : p.data()) x = 0.1f * normal(rng);
        params.push_back(std::move(p));
    }
    std::vector<std::vector<ParamTensor>> grads(cfg.workers);
    for (auto& g : grads) {
        for (const auto& s : shapes) {
            ParamTensor t(s.rows, s.cols);
            for (float& x : t.data()) x = 0.01f * normal(rng);
            g.push_back(std::move(t));
        }
    }

    OptimizerHandle reference(names, params, weights);
    std::vector<ParamTensor> mean;
    for (std::size_t t = 0; t < shapes.size(); ++t) {
        ParamTensor sum = grads[0][t];
        for (std::size_t w = 1; w < cfg.workers; ++w) sum.matrix() += grads[w][t].matrix();
        sum.matrix() /= float(cfg.workers);
        mean.push_back(std::move(sum));
    }
    opt_step(reference, mean);

    OptimizerHandle h(names, params, weights);
    DistBenchResult result;
    result.trace = run_distributed_step(h, grads, ShardPlan::make(cfg.strategy, cfg.workers, shapes)).trace;
    for (std::size_t t = 0; t < shapes.size(); ++t) {
        for (std::size_t i = 0; i < h.params[t].size(); ++i) {
            const double want = reference.params[t].data()[i];
            const double dev = std::abs(h.params[t].data()[i] - want) / (1.0 + std::abs(want));
            result.max_rel_deviation = std::max(result.max_rel_deviation, dev);
        }
    }
    require(result.max_rel_deviation <= 1e-6, ErrorCode::SchemaMismatch,
            to_string(cfg.strategy) + " deviates from the single-device step by " +
                std::to_string(result.max_rel_deviation));
    validate_trace(result.trace, shapes, spec.d_feat);
    if (cfg.cost_model) {
        result.trace.apply_cost_model(CommCostModel{});
        for (auto& r : result.trace.records)
            if (r.phase != "optimizer_step") r.time_ms = r.model_ms;
    }
    return result;
}

} // namespace lopt::cli
