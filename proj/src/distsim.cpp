// SPDX-License-Identifier: Apache-2.0
#include "lopt/distsim.hpp"

#include <algorithm>
#include <chrono>
#include <exception>
#include <numeric>
#include <sstream>
#include <thread>

#include "lopt/parallel.hpp"

namespace lopt {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

struct Message {
    std::size_t from = 0;
    std::size_t tensor = 0;
    std::vector<float> floats;
    std::vector<double> doubles;
    std::vector<std::uint64_t> counts;
};

using Inbox = Channel<Message>;

std::uint64_t total_params(const std::vector<Shape>& shapes) {
    std::uint64_t p = 0;
    for (const auto& s : shapes) p += s.size();
    return p;
}

std::vector<Shape> shapes_of(const OptimizerHandle& h) {
    std::vector<Shape> out;
    for (const auto& p : h.params) out.push_back(p.shape());
    return out;
}

std::size_t check_inputs(const OptimizerHandle& h, const std::vector<std::vector<ParamTensor>>& grads) {
    h.validate();
    require(!grads.empty(), ErrorCode::InvalidArgument, "distributed step needs at least one worker");
    for (std::size_t w = 0; w < grads.size(); ++w) {
        require(grads[w].size() == h.params.size(), ErrorCode::ShapeMismatch,
                "worker " + std::to_string(w) + " sent " + std::to_string(grads[w].size()) + " gradients");
        for (std::size_t t = 0; t < h.params.size(); ++t) {
            require_same_shape(grads[w][t].shape(), h.params[t].shape(),
                               "worker " + std::to_string(w) + " gradient of '" + h.names[t] + "'");
            require_finite(grads[w][t].data(), "worker " + std::to_string(w) + " gradient of '" + h.names[t] + "'");
        }
    }
    return grads.size();
}

// out[e] = (src[0][e] + src[1][e] + ... + src[N-1][e]) / N, summed in worker order.
void mean_in_worker_order(const std::vector<const float*>& src, std::size_t n, float* out) {
    const float inv_count = static_cast<float>(src.size());
    for (std::size_t e = 0; e < n; ++e) {
        float acc = src[0][e];
        for (std::size_t w = 1; w < src.size(); ++w) acc += src[w][e];
        out[e] = acc / inv_count;
    }
}

std::vector<float> flatten(const std::vector<ParamTensor>& tensors) {
    std::vector<float> flat;
    for (const auto& t : tensors) flat.insert(flat.end(), t.data().begin(), t.data().end());
    return flat;
}

// Runs body(w) on N threads alongside coordinator() on the calling thread.
// Worker exceptions are rethrown after every thread has finished; the
// workers are expected to keep to the message protocol after a failure.
template <typename Body, typename Coord>
void run_workers(std::size_t n, Body&& body, Coord&& coordinator) {
    std::vector<std::exception_ptr> errors(n);
    std::vector<std::thread> threads;
    threads.reserve(n);
    for (std::size_t w = 0; w < n; ++w)
        threads.emplace_back([&, w] {
            try {
                body(w);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    std::exception_ptr coord_error;
    try {
        coordinator();
    } catch (...) {
        coord_error = std::current_exception();
    }
    for (auto& t : threads) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    if (coord_error) std::rethrow_exception(coord_error);
}

// Per-phase wall times, one slot per worker.
struct PhaseClock {
    std::vector<std::string> phases;
    std::vector<std::vector<double>> ms;

    PhaseClock(std::vector<std::string> names, std::size_t workers)
        : phases(std::move(names)), ms(phases.size(), std::vector<double>(workers, 0.0)) {}

    void add(std::size_t phase, std::size_t worker, double t) { ms[phase][worker] += t; }

    CommTrace trace(Strategy s, std::size_t workers, const std::vector<CommRecord>& expected) const {
        CommTrace tr;
        tr.strategy = s;
        tr.workers = workers;
        for (std::size_t p = 0; p < phases.size(); ++p) {
            CommRecord r = expected[p];
            r.time_ms = *std::max_element(ms[p].begin(), ms[p].end());
            tr.records.push_back(r);
        }
        return tr;
    }
};

void require_replicas_equal(const std::vector<std::vector<ParamTensor>>& replicas, const std::vector<std::string>& names) {
    for (std::size_t w = 1; w < replicas.size(); ++w)
        for (std::size_t t = 0; t < names.size(); ++t)
            require(replicas[w][t].bit_equal(replicas[0][t]), ErrorCode::SchemaMismatch,
                    "replica " + std::to_string(w) + " diverged on '" + names[t] + "'");
}

} // namespace

std::string to_string(Strategy s) {
    switch (s) {
    case Strategy::AllReduce: return "allreduce";
    case Strategy::ReduceScatter: return "rs";
    case Strategy::FsdpA2A: return "a2a";
    }
    return "?";
}

Strategy parse_strategy(const std::string& s) {
    if (s == "allreduce" || s == "all_reduce" || s == "ALL_REDUCE") return Strategy::AllReduce;
    if (s == "rs" || s == "reduce_scatter" || s == "REDUCE_SCATTER") return Strategy::ReduceScatter;
    if (s == "a2a" || s == "fsdp_a2a" || s == "FSDP_A2A") return Strategy::FsdpA2A;
    throw Error(ErrorCode::InvalidArgument, "unknown strategy '" + s + "' (allreduce|rs|a2a)");
}

// ---- plan -------------------------------------------------------------------

ShardPlan ShardPlan::make(Strategy strategy, std::size_t workers, const std::vector<Shape>& shapes) {
    require(workers >= 1, ErrorCode::InvalidArgument, "plan needs at least one worker");
    ShardPlan plan;
    plan.strategy = strategy;
    plan.workers = workers;
    plan.shapes = shapes;
    plan.shards.resize(shapes.size());
    plan.owner.assign(shapes.size(), 0);
    for (std::size_t t = 0; t < shapes.size(); ++t) {
        const ElementRange full{0, shapes[t].size()};
        if (strategy == Strategy::ReduceScatter)
            plan.shards[t] = split_range(full, workers);
        else
            plan.shards[t].assign(workers, full);
    }
    if (strategy == Strategy::FsdpA2A) {
        std::vector<std::size_t> order(shapes.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return shapes[a].size() > shapes[b].size(); });
        std::vector<std::uint64_t> load(workers, 0);
        for (std::size_t t : order) {
            const std::size_t w = std::size_t(std::min_element(load.begin(), load.end()) - load.begin());
            plan.owner[t] = w;
            load[w] += state_bytes(shapes[t]);
            for (std::size_t v = 0; v < workers; ++v)
                if (v != w) plan.shards[t][v] = {0, 0};
        }
    }
    return plan;
}

void ShardPlan::validate(const std::vector<Shape>& expected) const {
    require(workers >= 1, ErrorCode::SchemaMismatch, "plan has no workers");
    require(shapes == expected, ErrorCode::SchemaMismatch, "plan was made for different tensors");
    require(shards.size() == shapes.size() && owner.size() == shapes.size(), ErrorCode::SchemaMismatch,
            "plan does not cover every tensor");
    for (std::size_t t = 0; t < shapes.size(); ++t) {
        const auto& s = shards[t];
        const std::size_t n = shapes[t].size();
        require(s.size() == workers, ErrorCode::SchemaMismatch, "tensor " + std::to_string(t) + " shard count");
        switch (strategy) {
        case Strategy::AllReduce:
            for (const auto& r : s)
                require(r == ElementRange{0, n}, ErrorCode::SchemaMismatch, "all-reduce shards must be whole");
            break;
        case Strategy::ReduceScatter: {
            std::size_t at = 0, lo = n, hi = 0;
            for (const auto& r : s) {
                require(r.begin == at && r.end >= r.begin, ErrorCode::SchemaMismatch,
                        "tensor " + std::to_string(t) + " shards overlap or leave a gap");
                at = r.end;
                lo = std::min(lo, r.size());
                hi = std::max(hi, r.size());
            }
            require(at == n, ErrorCode::SchemaMismatch, "tensor " + std::to_string(t) + " shards do not cover it");
            require(hi - lo <= 1, ErrorCode::SchemaMismatch, "tensor " + std::to_string(t) + " shards are uneven");
            break;
        }
        case Strategy::FsdpA2A:
            require(owner[t] < workers, ErrorCode::SchemaMismatch, "tensor " + std::to_string(t) + " owner");
            for (std::size_t w = 0; w < workers; ++w)
                require(s[w] == (w == owner[t] ? ElementRange{0, n} : ElementRange{0, 0}), ErrorCode::SchemaMismatch,
                        "tensor " + std::to_string(t) + " must be whole on its owner only");
            break;
        }
    }
}

std::vector<std::uint64_t> ShardPlan::stepped_elements() const {
    std::vector<std::uint64_t> out(workers, 0);
    for (const auto& s : shards)
        for (std::size_t w = 0; w < workers; ++w) out[w] += s[w].size();
    return out;
}

std::vector<std::uint64_t> ShardPlan::state_bytes_per_worker() const {
    std::vector<std::uint64_t> out(workers, 0);
    for (std::size_t t = 0; t < shapes.size(); ++t) {
        const Shape sh = shapes[t];
        for (std::size_t w = 0; w < workers; ++w) {
            switch (strategy) {
            case Strategy::AllReduce: out[w] += state_bytes(sh); break;
            case Strategy::ReduceScatter:
                out[w] += (4 * std::uint64_t(shards[t][w].size()) + 3 * std::uint64_t(sh.rows + sh.cols)) * 4;
                break;
            case Strategy::FsdpA2A:
                if (w == owner[t]) out[w] += state_bytes(sh);
                break;
            }
        }
    }
    return out;
}

// ---- traces -----------------------------------------------------------------

double CommCostModel::collective_ms(std::uint64_t bytes, std::size_t workers) const {
    if (bytes == 0 || workers <= 1) return 0.0;
    return 2.0 * double(workers - 1) * latency_ms + double(bytes) / double(workers) / bandwidth_bytes_per_ms;
}

const CommRecord& CommTrace::phase(const std::string& name) const {
    for (const auto& r : records)
        if (r.phase == name) return r;
    throw Error(ErrorCode::SchemaMismatch, "trace has no phase '" + name + "'");
}

void CommTrace::apply_cost_model(const CommCostModel& model) {
    for (auto& r : records) r.model_ms = model.collective_ms(r.bytes, workers);
}

std::string CommTrace::csv_header() { return "strategy,N,phase,bytes,time_ms"; }

std::string CommTrace::csv_rows() const {
    std::ostringstream os;
    for (const auto& r : records)
        os << to_string(strategy) << ',' << workers << ',' << r.phase << ',' << r.bytes << ',' << r.time_ms << '\n';
    return os.str();
}

std::vector<CommRecord> expected_trace_bytes(Strategy strategy, std::size_t workers, const std::vector<Shape>& shapes,
                                             std::size_t d_feat) {
    const std::uint64_t p = total_params(shapes);
    const std::uint64_t n1 = workers - 1;
    switch (strategy) {
    case Strategy::AllReduce:
        return {{"grad_allreduce", 2 * n1 * p * 4}, {"optimizer_step", 0}, {"param_allgather", 0}};
    case Strategy::ReduceScatter: {
        std::uint64_t stats = 0;
        for (const auto& s : shapes) stats += (s.rows + s.cols + d_feat) * 8;
        return {{"grad_reduce_scatter", n1 * p * 4},
                {"stats_allreduce", 2 * n1 * stats},
                {"optimizer_step", 0},
                {"param_allgather", n1 * p * 4}};
    }
    case Strategy::FsdpA2A:
        return {{"grad_all_to_all", n1 * p * 4}, {"optimizer_step", 0}, {"param_allgather", n1 * p * 4}};
    }
    return {};
}

void validate_trace(const CommTrace& trace, const std::vector<Shape>& shapes, std::size_t d_feat) {
    const auto expected = expected_trace_bytes(trace.strategy, trace.workers, shapes, d_feat);
    require(trace.records.size() == expected.size(), ErrorCode::SchemaMismatch, "trace phase count");
    for (std::size_t i = 0; i < expected.size(); ++i) {
        require(trace.records[i].phase == expected[i].phase, ErrorCode::SchemaMismatch,
                "trace phase " + std::to_string(i) + " is '" + trace.records[i].phase + "', expected '" +
                    expected[i].phase + "'");
        require(trace.records[i].bytes == expected[i].bytes, ErrorCode::SchemaMismatch,
                "phase '" + expected[i].phase + "' moved " + std::to_string(trace.records[i].bytes) +
                    " bytes, formula gives " + std::to_string(expected[i].bytes));
    }
}

FeatureStats normalization_across_shards(const std::vector<FeatureStats>& partials) {
    require(!partials.empty(), ErrorCode::InvalidArgument, "no partial statistics to merge");
    FeatureStats merged = partials.front();
    for (std::size_t i = 1; i < partials.size(); ++i) {
        require(partials[i].sumsq.size() == merged.sumsq.size(), ErrorCode::ShapeMismatch, "partial stats width");
        merged += partials[i];
    }
    return merged;
}

// ---- all-reduce -------------------------------------------------------------

DistResult run_allreduce_step(OptimizerHandle& h, const std::vector<std::vector<ParamTensor>>& grads) {
    const std::size_t n = check_inputs(h, grads);
    const std::vector<Shape> shapes = shapes_of(h);
    const std::size_t d_feat = FeatureSetSpec::from_name(h.weights.feature_set).d_feat;
    const std::uint64_t p = total_params(shapes);

    std::vector<Inbox> inbox(n);
    Inbox coord;
    std::vector<OptimizerHandle> replica(n, h);
    PhaseClock clock({"grad_allreduce", "optimizer_step", "param_allgather"}, n);

    auto worker = [&](std::size_t w) {
        auto t0 = Clock::now();
        coord.send({w, 0, flatten(grads[w]), {}, {}});
        Message mean = inbox[w].receive();
        clock.add(0, w, ms_since(t0));

        t0 = Clock::now();
        std::vector<ParamTensor> g;
        std::size_t at = 0;
        for (const auto& s : shapes) {
            g.push_back(ParamTensor::from_span(s, std::span<const float>(mean.floats).subspan(at, s.size())));
            at += s.size();
        }
        opt_step(replica[w], g);
        clock.add(1, w, ms_since(t0));
    };
    auto coordinator = [&] {
        std::vector<Message> got(n);
        for (std::size_t i = 0; i < n; ++i) {
            Message m = coord.receive();
            got[m.from] = std::move(m);
        }
        std::vector<const float*> src;
        for (const auto& m : got) src.push_back(m.floats.data());
        std::vector<float> mean(p);
        mean_in_worker_order(src, p, mean.data());
        for (std::size_t w = 0; w < n; ++w) inbox[w].send({n, 0, mean, {}, {}});
    };
    run_workers(n, worker, coordinator);

    std::vector<std::vector<ParamTensor>> params;
    for (const auto& r : replica) params.push_back(r.params);
    require_replicas_equal(params, h.names);
    h = std::move(replica[0]);

    const ShardPlan plan = ShardPlan::make(Strategy::AllReduce, n, shapes);
    DistResult result;
    result.trace = clock.trace(Strategy::AllReduce, n, expected_trace_bytes(Strategy::AllReduce, n, shapes, d_feat));
    result.stepped_elements = plan.stepped_elements();
    result.state_bytes = plan.state_bytes_per_worker();
    return result;
}

// ---- reduce-scatter ---------------------------------------------------------

namespace {

// One worker's slice of one tensor.
struct ShardState {
    ElementRange range;
    std::vector<float> param;
    std::vector<float> grad;
    std::array<std::vector<float>, kNumMomenta> momentum;
    std::vector<float> second_moment;
    std::array<std::vector<float>, kNumFactors> row_factor;
    std::array<std::vector<float>, kNumFactors> col_factor;
    std::uint64_t step = 0;

    ShardState(const ParamTensor& p, const OptState& s, ElementRange r) : range(r), step(s.step) {
        auto cut = [&](std::span<const float> full) {
            return std::vector<float>(full.begin() + std::ptrdiff_t(r.begin), full.begin() + std::ptrdiff_t(r.end));
        };
        param = cut(p.data());
        for (std::size_t i = 0; i < kNumMomenta; ++i) momentum[i] = cut(s.momentum[i].data());
        second_moment = cut(s.second_moment.data());
        for (std::size_t i = 0; i < kNumFactors; ++i) {
            row_factor[i].assign(s.row_factor[i].data().begin(), s.row_factor[i].data().end());
            col_factor[i].assign(s.col_factor[i].data().begin(), s.col_factor[i].data().end());
        }
    }

    ElementBlock block(Shape shape) const {
        ElementBlock b;
        b.shape = shape;
        b.range = range;
        b.param = param;
        b.grad = grad;
        for (std::size_t i = 0; i < kNumMomenta; ++i) b.momentum[i] = momentum[i];
        b.second_moment = second_moment;
        for (std::size_t i = 0; i < kNumFactors; ++i) {
            b.row_factor[i] = row_factor[i];
            b.col_factor[i] = col_factor[i];
        }
        b.step = step;
        return b;
    }
};

} // namespace

DistResult run_reduce_scatter_step(OptimizerHandle& h, const std::vector<std::vector<ParamTensor>>& grads,
                                   const ShardPlan& plan) {
    const std::size_t n = check_inputs(h, grads);
    const std::vector<Shape> shapes = shapes_of(h);
    require(plan.strategy == Strategy::ReduceScatter && plan.workers == n, ErrorCode::SchemaMismatch,
            "plan is not a reduce-scatter plan for " + std::to_string(n) + " workers");
    plan.validate(shapes);
    const FeatureSetSpec spec = FeatureSetSpec::from_name(h.weights.feature_set);
    const std::size_t d = spec.d_feat;
    const std::size_t nt = shapes.size();
    const double lr = schedule_lr(h.schedule, h.step + 1);
    const float keep = static_cast<float>(1.0 - lr * h.weight_decay);

    std::vector<Inbox> inbox(n);
    Inbox coord;
    std::vector<std::vector<ShardState>> local(n);
    for (std::size_t w = 0; w < n; ++w)
        for (std::size_t t = 0; t < nt; ++t) local[w].emplace_back(h.params[t], h.states[t], plan.shards[t][w]);
    std::vector<ParamTensor> gathered = h.params;
    PhaseClock clock({"grad_reduce_scatter", "stats_allreduce", "optimizer_step", "param_allgather"}, n);

    auto worker = [&](std::size_t w) {
        auto& mine = local[w];
        ScratchTracker tracker(h.engine.scratch_cap_bytes);
        std::exception_ptr failure;
        auto guarded = [&](auto&& fn) {
            if (failure) return;
            try {
                fn();
            } catch (...) {
                failure = std::current_exception();
            }
        };

        auto t0 = Clock::now();
        coord.send({w, 0, flatten(grads[w]), {}, {}});
        Message shard_grads = inbox[w].receive();
        clock.add(0, w, ms_since(t0));

        // Element-wise accumulators and this shard's share of the row/column sums.
        t0 = Clock::now();
        std::vector<double> sums_msg;
        {
            std::size_t at = 0;
            for (std::size_t t = 0; t < nt; ++t) {
                ShardState& s = mine[t];
                s.grad.assign(shard_grads.floats.begin() + std::ptrdiff_t(at),
                              shard_grads.floats.begin() + std::ptrdiff_t(at + s.range.size()));
                at += s.range.size();
                const BetaConfig& b = h.weights_for(t).betas;
                for (std::size_t i = 0; i < kNumMomenta; ++i) ema_momentum(s.momentum[i], s.grad, b.momentum[i]);
                ema_second_moment(s.second_moment, s.grad, b.second_moment);
                SquareSums sums(shapes[t]);
                accumulate_square_sums(shapes[t], s.range, s.grad, sums);
                sums_msg.insert(sums_msg.end(), sums.rows.begin(), sums.rows.end());
                sums_msg.insert(sums_msg.end(), sums.cols.begin(), sums.cols.end());
            }
        }
        clock.add(2, w, ms_since(t0));

        t0 = Clock::now();
        coord.send({w, 0, {}, std::move(sums_msg), {}});
        Message merged_sums = inbox[w].receive();
        clock.add(1, w, ms_since(t0));

        t0 = Clock::now();
        std::vector<FeatureContext> ctx(nt);
        std::vector<double> stats_msg;
        std::vector<std::uint64_t> count_msg;
        {
            std::size_t at = 0;
            for (std::size_t t = 0; t < nt; ++t) {
                ShardState& s = mine[t];
                const Shape sh = shapes[t];
                const std::span<const double> rows(merged_sums.doubles.data() + at, sh.rows);
                const std::span<const double> cols(merged_sums.doubles.data() + at + sh.rows, sh.cols);
                at += sh.rows + sh.cols;
                const BetaConfig& b = h.weights_for(t).betas;
                for (std::size_t i = 0; i < kNumFactors; ++i) {
                    ema_factor(s.row_factor[i], rows, double(sh.cols), b.adafactor[i]);
                    ema_factor(s.col_factor[i], cols, double(sh.rows), b.adafactor[i]);
                }
                ++s.step;
                FeatureStats partial(d);
                if (!s.range.empty()) {
                    guarded([&] {
                        const ElementBlock block = s.block(sh);
                        ctx[t] = make_context(block, spec);
                        partial = fused_stats(block, ctx[t], h.engine, tracker);
                    });
                }
                stats_msg.insert(stats_msg.end(), partial.sumsq.begin(), partial.sumsq.end());
                count_msg.push_back(partial.count);
            }
        }
        clock.add(2, w, ms_since(t0));

        t0 = Clock::now();
        coord.send({w, 0, {}, std::move(stats_msg), std::move(count_msg)});
        Message merged_stats = inbox[w].receive();
        clock.add(1, w, ms_since(t0));

        t0 = Clock::now();
        std::vector<float> params_msg;
        for (std::size_t t = 0; t < nt; ++t) {
            ShardState& s = mine[t];
            if (!s.range.empty()) {
                guarded([&] {
                    FeatureStats stats(d);
                    std::copy_n(merged_stats.doubles.begin() + std::ptrdiff_t(t * d), d, stats.sumsq.begin());
                    stats.count = merged_stats.counts[t];
                    const auto factors = normalization_factors(stats, spec.eps_norm);
                    fused_apply(s.block(shapes[t]), ctx[t], factors, h.weights_for(t), static_cast<float>(lr),
                                s.param, h.engine, tracker);
                    if (h.weight_decay != 0.0)
                        for (float& x : s.param) x *= keep;
                });
            }
            params_msg.insert(params_msg.end(), s.param.begin(), s.param.end());
        }
        clock.add(2, w, ms_since(t0));

        t0 = Clock::now();
        coord.send({w, 0, std::move(params_msg), {}, {}});
        inbox[w].receive();
        clock.add(3, w, ms_since(t0));
        if (failure) std::rethrow_exception(failure);
    };

    auto gather = [&] {
        std::vector<Message> got(n);
        for (std::size_t i = 0; i < n; ++i) {
            Message m = coord.receive();
            got[m.from] = std::move(m);
        }
        return got;
    };
    auto coordinator = [&] {
        // Reduce-scatter of the mean gradient.
        {
            auto got = gather();
            std::vector<std::vector<float>> out(n);
            std::size_t base = 0;
            for (std::size_t t = 0; t < nt; ++t) {
                for (std::size_t w = 0; w < n; ++w) {
                    const ElementRange r = plan.shards[t][w];
                    std::vector<const float*> src;
                    for (const auto& m : got) src.push_back(m.floats.data() + base + r.begin);
                    const std::size_t at = out[w].size();
                    out[w].resize(at + r.size());
                    mean_in_worker_order(src, r.size(), out[w].data() + at);
                }
                base += shapes[t].size();
            }
            for (std::size_t w = 0; w < n; ++w) inbox[w].send({n, 0, std::move(out[w]), {}, {}});
        }
        // All-reduce of row/column square sums, then of feature statistics.
        for (int round = 0; round < 2; ++round) {
            auto got = gather();
            Message merged{n, 0, {}, got[0].doubles, got[0].counts};
            if (round == 1) {
                for (std::size_t t = 0; t < nt; ++t) {
                    std::vector<FeatureStats> partials;
                    for (const auto& m : got) {
                        FeatureStats f(d);
                        std::copy_n(m.doubles.begin() + std::ptrdiff_t(t * d), d, f.sumsq.begin());
                        f.count = m.counts[t];
                        if (f.count > 0) partials.push_back(std::move(f));
                    }
                    const FeatureStats m = normalization_across_shards(partials);
                    std::copy(m.sumsq.begin(), m.sumsq.end(), merged.doubles.begin() + std::ptrdiff_t(t * d));
                    merged.counts[t] = m.count;
                }
            } else {
                for (std::size_t w = 1; w < n; ++w)
                    for (std::size_t k = 0; k < merged.doubles.size(); ++k) merged.doubles[k] += got[w].doubles[k];
            }
            for (std::size_t w = 0; w < n; ++w) inbox[w].send(merged);
        }
        // All-gather of the updated parameters.
        {
            auto got = gather();
            std::vector<std::size_t> at(n, 0);
            std::vector<float> flat;
            for (std::size_t t = 0; t < nt; ++t) {
                auto dst = gathered[t].data();
                for (std::size_t w = 0; w < n; ++w) {
                    const ElementRange r = plan.shards[t][w];
                    std::copy_n(got[w].floats.begin() + std::ptrdiff_t(at[w]), r.size(),
                                dst.begin() + std::ptrdiff_t(r.begin));
                    at[w] += r.size();
                }
                flat.insert(flat.end(), dst.begin(), dst.end());
            }
            for (std::size_t w = 0; w < n; ++w) inbox[w].send({n, 0, flat, {}, {}});
        }
    };
    run_workers(n, worker, coordinator);

    // Reassemble the states from their shards.
    for (std::size_t t = 0; t < nt; ++t) {
        OptState& st = h.states[t];
        for (std::size_t w = 0; w < n; ++w) {
            const ShardState& s = local[w][t];
            auto put = [&](ParamTensor& dst, const std::vector<float>& src) {
                std::copy(src.begin(), src.end(), dst.data().begin() + std::ptrdiff_t(s.range.begin));
            };
            for (std::size_t i = 0; i < kNumMomenta; ++i) put(st.momentum[i], s.momentum[i]);
            put(st.second_moment, s.second_moment);
        }
        for (std::size_t i = 0; i < kNumFactors; ++i) {
            std::copy(local[0][t].row_factor[i].begin(), local[0][t].row_factor[i].end(), st.row_factor[i].data().begin());
            std::copy(local[0][t].col_factor[i].begin(), local[0][t].col_factor[i].end(), st.col_factor[i].data().begin());
        }
        st.step = local[0][t].step;
        require(gathered[t].all_finite(), ErrorCode::NonFinite, "parameter '" + h.names[t] + "' after step");
    }
    h.params = std::move(gathered);
    ++h.step;
    h.last_reports.clear();

    DistResult result;
    result.trace = clock.trace(Strategy::ReduceScatter, n, expected_trace_bytes(Strategy::ReduceScatter, n, shapes, d));
    result.stepped_elements = plan.stepped_elements();
    result.state_bytes = plan.state_bytes_per_worker();
    return result;
}

// ---- FSDP all-to-all --------------------------------------------------------

DistResult run_fsdp_a2a_step(OptimizerHandle& h, const std::vector<std::vector<ParamTensor>>& grads,
                             const ShardPlan& plan) {
    const std::size_t n = check_inputs(h, grads);
    const std::vector<Shape> shapes = shapes_of(h);
    require(plan.strategy == Strategy::FsdpA2A && plan.workers == n, ErrorCode::SchemaMismatch,
            "plan is not an all-to-all plan for " + std::to_string(n) + " workers");
    plan.validate(shapes);
    const FeatureSetSpec spec = FeatureSetSpec::from_name(h.weights.feature_set);
    const std::size_t nt = shapes.size();
    const double lr = schedule_lr(h.schedule, h.step + 1);

    std::vector<Inbox> grad_inbox(n), param_inbox(n);
    // Worker-resident model copies; states only for owned tensors.
    std::vector<std::vector<ParamTensor>> model(n, h.params);
    std::vector<std::vector<std::optional<OptState>>> states(n, std::vector<std::optional<OptState>>(nt));
    for (std::size_t t = 0; t < nt; ++t) states[plan.owner[t]][t] = h.states[t];
    std::vector<std::vector<UpdateReport>> reports(n);
    PhaseClock clock({"grad_all_to_all", "optimizer_step", "param_allgather"}, n);

    auto worker = [&](std::size_t w) {
        std::size_t owned = 0;
        for (std::size_t t = 0; t < nt; ++t) owned += plan.owner[t] == w;

        auto t0 = Clock::now();
        for (std::size_t t = 0; t < nt; ++t)
            if (plan.owner[t] != w)
                grad_inbox[plan.owner[t]].send({w, t, {grads[w][t].data().begin(), grads[w][t].data().end()}, {}, {}});
        std::vector<std::vector<std::vector<float>>> slot(nt, std::vector<std::vector<float>>(n));
        for (std::size_t i = 0; i < owned * (n - 1); ++i) {
            Message m = grad_inbox[w].receive();
            slot[m.tensor][m.from] = std::move(m.floats);
        }
        std::vector<std::optional<ParamTensor>> mean(nt);
        for (std::size_t t = 0; t < nt; ++t) {
            if (plan.owner[t] != w) continue;
            std::vector<const float*> src;
            for (std::size_t v = 0; v < n; ++v) src.push_back(v == w ? grads[w][t].data().data() : slot[t][v].data());
            ParamTensor g(shapes[t].rows, shapes[t].cols);
            mean_in_worker_order(src, shapes[t].size(), g.data().data());
            mean[t] = std::move(g);
        }
        clock.add(0, w, ms_since(t0));

        t0 = Clock::now();
        std::exception_ptr failure;
        ScratchTracker tracker(h.engine.scratch_cap_bytes);
        for (std::size_t t = 0; t < nt && !failure; ++t) {
            if (plan.owner[t] != w) continue;
            try {
                UpdateReport r = step_tensor(model[w][t], *states[w][t], *mean[t], h.weights_for(t), spec, h.path,
                                             h.engine, lr, h.weight_decay, tracker);
                r.tensor = h.names[t];
                reports[w].push_back(std::move(r));
            } catch (...) {
                failure = std::current_exception();
            }
        }
        clock.add(1, w, ms_since(t0));

        t0 = Clock::now();
        for (std::size_t t = 0; t < nt; ++t)
            if (plan.owner[t] == w)
                for (std::size_t v = 0; v < n; ++v)
                    if (v != w) param_inbox[v].send({w, t, {model[w][t].data().begin(), model[w][t].data().end()}, {}, {}});
        for (std::size_t i = 0; i < nt - owned; ++i) {
            Message m = param_inbox[w].receive();
            model[w][m.tensor] = ParamTensor::from_span(shapes[m.tensor], m.floats);
        }
        clock.add(2, w, ms_since(t0));
        if (failure) std::rethrow_exception(failure);
    };
    run_workers(n, worker, [] {});

    require_replicas_equal(model, h.names);
    h.params = std::move(model[0]);
    h.last_reports.clear();
    for (std::size_t t = 0; t < nt; ++t) {
        h.states[t] = std::move(*states[plan.owner[t]][t]);
        for (const auto& r : reports[plan.owner[t]])
            if (r.tensor == h.names[t]) h.last_reports.push_back(r);
    }
    ++h.step;

    DistResult result;
    result.trace =
        clock.trace(Strategy::FsdpA2A, n, expected_trace_bytes(Strategy::FsdpA2A, n, shapes, spec.d_feat));
    result.stepped_elements = plan.stepped_elements();
    result.state_bytes = plan.state_bytes_per_worker();
    return result;
}

DistResult run_distributed_step(OptimizerHandle& h, const std::vector<std::vector<ParamTensor>>& grads,
                                const ShardPlan& plan) {
    switch (plan.strategy) {
    case Strategy::AllReduce: return run_allreduce_step(h, grads);
    case Strategy::ReduceScatter: return run_reduce_scatter_step(h, grads, plan);
    case Strategy::FsdpA2A: return run_fsdp_a2a_step(h, grads, plan);
    }
    throw Error(ErrorCode::InvalidArgument, "unknown strategy");
}

} // namespace lopt
