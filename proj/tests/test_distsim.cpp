// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "lopt/distsim.hpp"
#include "oracles.hpp"

namespace {

using namespace lopt;

const FeatureSetSpec kSmall = FeatureSetSpec::small_fc_lopt();

std::vector<Shape> eight_equal() { return std::vector<Shape>(8, Shape{24, 40}); }

OptimizerHandle make_handle(const std::vector<Shape>& shapes, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<std::string> names;
    std::vector<ParamTensor> params;
    for (std::size_t t = 0; t < shapes.size(); ++t) {
        names.push_back("t" + std::to_string(t));
        params.push_back(fixtures::random_tensor(shapes[t].rows, shapes[t].cols, rng));
    }
    OptimizerHandle h(std::move(names), std::move(params), fixtures::random_weights(kSmall, seed + 1));
    h.weight_decay = 0.01;
    h.schedule = ScheduleConfig::cosine(1.0, 0.1, 1, 10);
    return h;
}

using WorkerGrads = std::vector<std::vector<ParamTensor>>;

WorkerGrads make_grads(const std::vector<Shape>& shapes, std::size_t workers, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    WorkerGrads out(workers);
    for (auto& g : out)
        for (const auto& s : shapes) g.push_back(fixtures::random_tensor(s.rows, s.cols, rng, 0.4f));
    return out;
}

std::vector<ParamTensor> mean_grads(const WorkerGrads& g) {
    std::vector<ParamTensor> out;
    for (std::size_t t = 0; t < g[0].size(); ++t) {
        ParamTensor sum = g[0][t];
        for (std::size_t w = 1; w < g.size(); ++w) sum.matrix() += g[w][t].matrix();
        sum.matrix() /= float(g.size());
        out.push_back(std::move(sum));
    }
    return out;
}

double max_rel_dev(const OptimizerHandle& a, const OptimizerHandle& b) {
    double worst = 0;
    for (std::size_t t = 0; t < a.params.size(); ++t)
        for (std::size_t i = 0; i < a.params[t].size(); ++i)
            worst = std::max(worst, oracle::rel_dev(a.params[t].data()[i], b.params[t].data()[i]));
    return worst;
}

TEST(Strategy, Parse) {
    EXPECT_EQ(parse_strategy("allreduce"), Strategy::AllReduce);
    EXPECT_EQ(parse_strategy("rs"), Strategy::ReduceScatter);
    EXPECT_EQ(parse_strategy("a2a"), Strategy::FsdpA2A);
    EXPECT_THROW(parse_strategy("ring"), Error);
}

TEST(Plan, ReduceScatterEven) {
    const std::vector<Shape> shapes{{7, 13}, {1, 1}, {100, 3}};
    const auto plan = ShardPlan::make(Strategy::ReduceScatter, 4, shapes);
    EXPECT_NO_THROW(plan.validate(shapes));
    for (std::size_t t = 0; t < shapes.size(); ++t) {
        std::size_t lo = SIZE_MAX, hi = 0, next = 0;
        for (const auto& r : plan.shards[t]) {
            EXPECT_EQ(r.begin, next);
            next = r.end;
            lo = std::min(lo, r.size());
            hi = std::max(hi, r.size());
        }
        EXPECT_EQ(next, shapes[t].size());
        EXPECT_LE(hi - lo, 1u);
    }
    const auto stepped = plan.stepped_elements();
    const auto [lo, hi] = std::minmax_element(stepped.begin(), stepped.end());
    EXPECT_LE(*hi - *lo, (91 + 1 + 300 + 3) / 4);
}

TEST(Plan, EightEqualTensorsTwoPerWorker) {
    const auto plan = ShardPlan::make(Strategy::ReduceScatter, 4, eight_equal());
    for (auto e : plan.stepped_elements()) EXPECT_EQ(e, 2u * 24 * 40);
    const auto a2a = ShardPlan::make(Strategy::FsdpA2A, 4, eight_equal());
    for (auto e : a2a.stepped_elements()) EXPECT_EQ(e, 2u * 24 * 40);
}

TEST(Plan, FsdpStatePartition) {
    const std::vector<Shape> shapes{{30, 20}, {10, 5}};
    const auto plan = ShardPlan::make(Strategy::FsdpA2A, 2, shapes);
    EXPECT_EQ(plan.owner[0], 0u);
    EXPECT_EQ(plan.owner[1], 1u);
    const auto bytes = plan.state_bytes_per_worker();
    EXPECT_EQ(bytes[0], state_bytes(shapes[0]));
    EXPECT_EQ(bytes[0] + bytes[1], state_bytes(shapes[0]) + state_bytes(shapes[1]));
}

TEST(Plan, AllReduceReplicatesState) {
    const auto shapes = eight_equal();
    const auto plan = ShardPlan::make(Strategy::AllReduce, 4, shapes);
    std::uint64_t total = 0;
    for (const auto& s : shapes) total += state_bytes(s);
    for (auto b : plan.state_bytes_per_worker()) EXPECT_EQ(b, total);
}

TEST(Plan, ValidateRejectsGaps) {
    const std::vector<Shape> shapes{{4, 4}};
    auto plan = ShardPlan::make(Strategy::ReduceScatter, 2, shapes);
    plan.shards[0][1].begin += 1;
    EXPECT_THROW(plan.validate(shapes), Error);
    EXPECT_THROW(ShardPlan::make(Strategy::ReduceScatter, 2, shapes).validate({{4, 5}}), Error);
}

TEST(Distributed, SingleWorkerEqualsOptStep) {
    const auto shapes = eight_equal();
    const auto grads = make_grads(shapes, 1, 2);
    auto ref = make_handle(shapes, 3);
    opt_step(ref, grads[0]);
    for (auto strategy : {Strategy::AllReduce, Strategy::ReduceScatter, Strategy::FsdpA2A}) {
        auto h = make_handle(shapes, 3);
        const auto result = run_distributed_step(h, grads, ShardPlan::make(strategy, 1, shapes));
        EXPECT_EQ(h.step, 1u);
        for (std::size_t t = 0; t < shapes.size(); ++t) EXPECT_TRUE(h.params[t].bit_equal(ref.params[t])) << t;
        EXPECT_NO_THROW(validate_trace(result.trace, shapes, 39));
    }
}

TEST(Distributed, IdenticalGradsMatchSingleWorker) {
    const auto shapes = eight_equal();
    const auto one = make_grads(shapes, 1, 4);
    const WorkerGrads four(4, one[0]);
    auto a = make_handle(shapes, 5);
    auto b = make_handle(shapes, 5);
    run_allreduce_step(a, one);
    run_allreduce_step(b, four);
    EXPECT_EQ(max_rel_dev(a, b), 0.0);
}

TEST(Distributed, AllStrategiesMatchMeanGradientOracle) {
    const auto shapes = eight_equal();
    for (std::size_t n : {1, 2, 4}) {
        const auto grads = make_grads(shapes, n, 10 + n);
        auto oracle_h = make_handle(shapes, 6);
        opt_step(oracle_h, mean_grads(grads));
        for (auto strategy : {Strategy::AllReduce, Strategy::ReduceScatter, Strategy::FsdpA2A}) {
            auto h = make_handle(shapes, 6);
            const auto plan = ShardPlan::make(strategy, n, shapes);
            const auto result = run_distributed_step(h, grads, plan);
            EXPECT_LE(max_rel_dev(h, oracle_h), 1e-6) << to_string(strategy) << " N=" << n;
            EXPECT_NO_THROW(validate_trace(result.trace, shapes, 39));
            for (std::size_t t = 0; t < shapes.size(); ++t)
                for (std::size_t i = 0; i < h.states[t].second_moment.size(); ++i)
                    EXPECT_NEAR(h.states[t].second_moment.data()[i], oracle_h.states[t].second_moment.data()[i],
                                1e-6 * (1 + oracle_h.states[t].second_moment.data()[i]));
        }
    }
}

TEST(Distributed, UnevenShapesStillMatch) {
    const std::vector<Shape> shapes{{33, 17}, {1, 90}, {5, 1}, {64, 64}, {2, 3}};
    const auto grads = make_grads(shapes, 3, 20);
    auto oracle_h = make_handle(shapes, 21);
    opt_step(oracle_h, mean_grads(grads));
    for (auto strategy : {Strategy::AllReduce, Strategy::ReduceScatter, Strategy::FsdpA2A}) {
        auto h = make_handle(shapes, 21);
        run_distributed_step(h, grads, ShardPlan::make(strategy, 3, shapes));
        EXPECT_LE(max_rel_dev(h, oracle_h), 1e-6) << to_string(strategy);
    }
}

TEST(Distributed, FsdpStateIsOneNth) {
    const auto shapes = eight_equal();
    std::uint64_t total = 0;
    for (const auto& s : shapes) total += state_bytes(s);
    for (std::size_t n : {1, 2, 4}) {
        auto h = make_handle(shapes, 7);
        const auto result = run_fsdp_a2a_step(h, make_grads(shapes, n, 8), ShardPlan::make(Strategy::FsdpA2A, n, shapes));
        std::uint64_t sum = 0;
        for (auto b : result.state_bytes) {
            EXPECT_LE(b > total / n ? b - total / n : total / n - b, 4u);
            sum += b;
        }
        EXPECT_EQ(sum, total);
    }
}

TEST(Distributed, ShapeMismatchAcrossWorkers) {
    const auto shapes = eight_equal();
    auto grads = make_grads(shapes, 2, 9);
    grads[1][3] = ParamTensor(2, 2);
    auto h = make_handle(shapes, 10);
    EXPECT_THROW(run_allreduce_step(h, grads), Error);
    EXPECT_EQ(h.step, 0u);
}

TEST(Trace, BytesFormula) {
    const std::vector<Shape> shapes{{10, 20}, {3, 3}};
    const std::uint64_t p = 209;
    const auto ar = expected_trace_bytes(Strategy::AllReduce, 4, shapes, 39);
    EXPECT_EQ(ar[0].phase, "grad_allreduce");
    EXPECT_EQ(ar[0].bytes, 2 * 3 * p * 4);
    EXPECT_EQ(ar.back().bytes, 0u);
    const auto rs = expected_trace_bytes(Strategy::ReduceScatter, 4, shapes, 39);
    EXPECT_EQ(rs[0].bytes, 3 * p * 4);
    EXPECT_EQ(rs[1].phase, "stats_allreduce");
    EXPECT_EQ(rs[1].bytes, 2u * 3 * ((10 + 20 + 39) + (3 + 3 + 39)) * 8);
    const auto a2a = expected_trace_bytes(Strategy::FsdpA2A, 4, shapes, 39);
    EXPECT_EQ(a2a[0].bytes, 3 * p * 4);
    for (const auto& r : expected_trace_bytes(Strategy::AllReduce, 1, shapes, 39)) EXPECT_EQ(r.bytes, 0u);
}

TEST(Trace, ValidatorRejectsWrongBytes) {
    const auto shapes = eight_equal();
    auto h = make_handle(shapes, 11);
    auto result = run_allreduce_step(h, make_grads(shapes, 2, 12));
    EXPECT_NO_THROW(validate_trace(result.trace, shapes, 39));
    result.trace.records[0].bytes += 1;
    EXPECT_THROW(validate_trace(result.trace, shapes, 39), Error);
}

TEST(Trace, CsvAndCostModel) {
    const auto shapes = eight_equal();
    auto h = make_handle(shapes, 13);
    auto result = run_reduce_scatter_step(h, make_grads(shapes, 2, 14),
                                          ShardPlan::make(Strategy::ReduceScatter, 2, shapes));
    EXPECT_EQ(CommTrace::csv_header(), "strategy,N,phase,bytes,time_ms");
    const auto rows = result.trace.csv_rows();
    EXPECT_EQ(std::count(rows.begin(), rows.end(), '\n'), 4);
    CommCostModel model;
    result.trace.apply_cost_model(model);
    EXPECT_GT(result.trace.phase("grad_reduce_scatter").model_ms, 0.0);
    EXPECT_EQ(model.collective_ms(0, 2), 0.0);
}

TEST(Merge, SingleShardIdentity) {
    FeatureStats s(3);
    s.sumsq = {1, 2, 3};
    s.count = 5;
    const auto m = normalization_across_shards({s});
    EXPECT_EQ(m.sumsq, s.sumsq);
    EXPECT_EQ(m.count, 5u);
    EXPECT_THROW(normalization_across_shards({}), Error);
}

TEST(Merge, ConstantHalvesExact) {
    const ParamTensor w(4, 6, 0.5f), g(4, 6, -0.25f);
    auto s = OptState::zeros({4, 6});
    state_step_inplace(s, g, {});
    const auto block = make_block(w, g, s);
    const auto ctx = make_context(block, kSmall);
    FeatureStats a(39), b(39);
    accumulate_feature_squares(block, ctx, {0, 12}, a.sumsq);
    accumulate_feature_squares(block, ctx, {12, 24}, b.sumsq);
    a.count = b.count = 12;
    const auto merged = normalization_across_shards({a, b});
    const auto whole = compute_squared_average(block, kSmall);
    EXPECT_EQ(merged.sumsq, whole.sumsq);
    EXPECT_EQ(merged.count, whole.count);
}

TEST(Merge, FourRandomShards) {
    const auto in = fixtures::random_instance(37, 53, 15);
    const auto block = make_block(in.w, in.g, in.state);
    const auto ctx = make_context(block, kSmall);
    const auto whole = compute_squared_average(block, kSmall);
    std::vector<FeatureStats> parts;
    const std::size_t cuts[] = {0, 301, 777, 1500, in.w.size()};
    for (int p = 0; p < 4; ++p) {
        FeatureStats s(39);
        accumulate_feature_squares(block, ctx, {cuts[p], cuts[p + 1]}, s.sumsq);
        s.count = cuts[p + 1] - cuts[p];
        parts.push_back(std::move(s));
    }
    const auto merged = normalization_across_shards(parts);
    EXPECT_EQ(merged.count, whole.count);
    for (std::size_t k = 0; k < 39; ++k)
        EXPECT_LE(std::abs(merged.sumsq[k] - whole.sumsq[k]), 1e-6 * std::abs(whole.sumsq[k])) << k;
}

TEST(Channel, FifoAcrossThreads) {
    Channel<int> ch;
    std::thread producer([&] {
        for (int i = 0; i < 100; ++i) ch.send(i);
    });
    for (int i = 0; i < 100; ++i) EXPECT_EQ(ch.receive(), i);
    producer.join();
}

} // namespace
