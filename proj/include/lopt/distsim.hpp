// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "lopt/optim.hpp"

namespace lopt {

enum class Strategy { AllReduce, ReduceScatter, FsdpA2A };

std::string to_string(Strategy s);
/// Accepts allreduce|rs|a2a as well as the full names.
Strategy parse_strategy(const std::string& s);

/// Where each tensor's optimizer work happens.
///
/// AllReduce: every tensor replicated on every worker.
/// ReduceScatter: shards[t][w] is worker w's contiguous element range of t.
/// FsdpA2A: owner[t] steps all of t; largest tensors are placed first on the
/// least-loaded worker (ties to the lower index).
struct ShardPlan {
    Strategy strategy = Strategy::AllReduce;
    std::size_t workers = 1;
    std::vector<Shape> shapes;
    std::vector<std::vector<ElementRange>> shards;
    std::vector<std::size_t> owner;

    static ShardPlan make(Strategy strategy, std::size_t workers, const std::vector<Shape>& shapes);
    /// Throws SchemaMismatch on overlap, gaps, or shapes differing from `shapes`.
    void validate(const std::vector<Shape>& shapes) const;

    /// Elements whose optimizer step runs on each worker.
    std::vector<std::uint64_t> stepped_elements() const;
    /// Optimizer-state bytes resident on each worker.
    std::vector<std::uint64_t> state_bytes_per_worker() const;
};

/// Bytes here are modelled with ring collectives and count every byte sent
/// by any worker: with P parameters (4 bytes each),
///
///   all-reduce        2 (N - 1) P * 4
///   reduce-scatter      (N - 1) P * 4
///   all-gather          (N - 1) P * 4   (zero for all-reduce: replicas already agree)
///   all-to-all          (N - 1) P * 4   (each tensor sent by its N - 1 non-owners)
///   stats all-reduce  2 (N - 1) sum_t (m_t + n_t + d_feat) * 8
///
/// time_ms is measured wall time (slowest worker); model_ms comes from the
/// optional cost model.
struct CommRecord {
    std::string phase;
    std::uint64_t bytes = 0;
    double time_ms = 0.0;
    double model_ms = 0.0;
};

struct CommCostModel {
    double bandwidth_bytes_per_ms = 25e6; // 25 GB/s
    double latency_ms = 0.01;
    /// Time for one collective moving `bytes` in total across `workers`.
    double collective_ms(std::uint64_t bytes, std::size_t workers) const;
};

struct CommTrace {
    Strategy strategy = Strategy::AllReduce;
    std::size_t workers = 1;
    std::vector<CommRecord> records;

    const CommRecord& phase(const std::string& name) const;
    void apply_cost_model(const CommCostModel& model);

    static std::string csv_header(); // strategy,N,phase,bytes,time_ms
    std::string csv_rows() const;
};

/// Expected bytes for each phase of a strategy.
std::vector<CommRecord> expected_trace_bytes(Strategy strategy, std::size_t workers, const std::vector<Shape>& shapes,
                                             std::size_t d_feat);
/// Throws SchemaMismatch unless phases and byte counts match the formulas.
void validate_trace(const CommTrace& trace, const std::vector<Shape>& shapes, std::size_t d_feat);

struct DistResult {
    CommTrace trace;
    std::vector<std::uint64_t> stepped_elements;
    std::vector<std::uint64_t> state_bytes;
};

/// Simulated data-parallel step. per_worker_grads[w][t] is worker w's
/// gradient for tensor t. The gradient used is the mean over workers, summed
/// in worker order. On return h holds the gathered parameters and states
/// and h.step has advanced by one.
///
/// ReduceScatter always runs the two-pass path on shards, merging row/column
/// sums and feature statistics across shards.
DistResult run_allreduce_step(OptimizerHandle& h, const std::vector<std::vector<ParamTensor>>& per_worker_grads);
DistResult run_reduce_scatter_step(OptimizerHandle& h, const std::vector<std::vector<ParamTensor>>& per_worker_grads,
                                   const ShardPlan& plan);
DistResult run_fsdp_a2a_step(OptimizerHandle& h, const std::vector<std::vector<ParamTensor>>& per_worker_grads,
                             const ShardPlan& plan);
DistResult run_distributed_step(OptimizerHandle& h, const std::vector<std::vector<ParamTensor>>& per_worker_grads,
                                const ShardPlan& plan);

/// Sum of partial statistics in list order.
FeatureStats normalization_across_shards(const std::vector<FeatureStats>& partials);

/// Unbounded multi-producer queue used as a worker inbox.
template <typename T>
class Channel {
public:
    void send(T value) {
        {
            std::lock_guard<std::mutex> lock(mu_);
            queue_.push_back(std::move(value));
        }
        cv_.notify_one();
    }
    T receive() {
        std::unique_lock<std::mutex> lock(mu_);
        cv_.wait(lock, [&] { return !queue_.empty(); });
        T value = std::move(queue_.front());
        queue_.pop_front();
        return value;
    }

private:
    std::mutex mu_;
    std::condition_variable cv_;
    std::deque<T> queue_;
};

} // namespace lopt
