// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>

#include "fixtures.hpp"
#include "lopt/cli.hpp"
#include "lopt/tensor_file.hpp"

namespace {

using namespace lopt;
using namespace lopt::cli;

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("lopt_cli_test_" + name);
}

std::filesystem::path zero_weights_file() {
    const auto spec = FeatureSetSpec::small_fc_lopt();
    const auto path = temp_path("zero.pylo");
    file_save(LoptWeights::zeros(LoptWeights::default_topology(spec), spec).to_file(), path);
    return path;
}

std::vector<std::vector<std::string>> without_timing(const CsvTable& t) {
    const std::size_t cols[] = {t.column("median_ms"), t.column("p10_ms"), t.column("p90_ms")};
    auto rows = t.rows;
    for (auto& r : rows)
        for (auto c : cols) r[c].clear();
    return rows;
}

TEST(Bench, ValidatesConfig) {
    BenchConfig cfg;
    cfg.repeats = 2;
    EXPECT_THROW(run_bench(cfg), Error);
    cfg.repeats = 3;
    cfg.warmup = 0;
    EXPECT_THROW(run_bench(cfg), Error);
}

TEST(Bench, DeterministicExceptTiming) {
    BenchConfig cfg;
    cfg.widths = {24, 40};
    cfg.depths = {1, 2};
    cfg.repeats = 3;
    cfg.seed = 5;
    const auto a = run_bench(cfg);
    const auto b = run_bench(cfg);
    EXPECT_EQ(a.header, b.header);
    EXPECT_EQ(a.rows.size(), 2u * 2 * 4);
    EXPECT_EQ(without_timing(a), without_timing(b));
    EXPECT_EQ(a.rows[0][a.column("optimizer")], "adam");
    EXPECT_EQ(a.rows[3][a.column("optimizer")], "lopt_fused");
    EXPECT_EQ(a.rows[0][a.column("schema")], kBenchSchema);
}

TEST(Bench, FusedFasterThanNaive) {
    BenchConfig cfg;
    cfg.widths = {256};
    cfg.depths = {1};
    cfg.optimizers = {"lopt_naive", "lopt_fused"};
    cfg.repeats = 5;
    const auto t = run_bench(cfg);
    const auto median = t.column("median_ms");
    EXPECT_LT(std::stod(t.rows[1][median]), std::stod(t.rows[0][median]));
}

TEST(Bench, ScratchCapGivesOomRowForNaiveOnly) {
    BenchConfig cfg;
    cfg.widths = {128};
    cfg.depths = {2};
    cfg.optimizers = {"lopt_naive", "lopt_fused"};
    cfg.repeats = 3;
    cfg.scratch_cap_bytes = 64 * 1024;
    const auto t = run_bench(cfg);
    EXPECT_EQ(t.rows[0][t.column("status")], "OOM");
    EXPECT_EQ(t.rows[0][t.column("median_ms")], "");
    EXPECT_EQ(t.rows[1][t.column("status")], "ok");
    EXPECT_LE(std::stoull(t.rows[1][t.column("scratch_bytes")]), cfg.scratch_cap_bytes);
}

TEST(Bench, TransformerProxyShapes) {
    const auto shapes = workload_shapes(Workload::TransformerProxy, 64, 2, 1000);
    // embeddings, 2 x (4 norms + 4 attention + 2 MLP), final norm pair
    EXPECT_EQ(shapes.size(), 2u + 2 * 10 + 2);
    EXPECT_EQ(shapes[0], (Shape{1000, 64}));
    std::uint64_t total = 0;
    for (const auto& s : shapes) total += s.size();
    EXPECT_EQ(total, 1000u * 64 + 1024 * 64 + 2 * (4 * 64 + 4 * 64 * 64 + 2 * 64 * 256) + 2 * 64);
}

TEST(Bench, Percentile) {
    EXPECT_EQ(percentile({3, 1, 2}, 0.5), 2.0);
    EXPECT_DOUBLE_EQ(percentile({0, 10}, 0.1), 1.0);
    EXPECT_EQ(percentile({4}, 0.9), 4.0);
}

TEST(Train, AdamQuadraticStrictlyDecreases) {
    TrainConfig cfg;
    cfg.steps = 40;
    cfg.lr = 0.1;
    const auto r = run_train(cfg);
    ASSERT_EQ(r.losses.size(), 41u);
    for (std::size_t i = 1; i < r.losses.size(); ++i) EXPECT_LT(r.losses[i], r.losses[i - 1]) << i;
    EXPECT_FALSE(r.diverged);
}

TEST(Train, ZeroNetworkKeepsLossConstant) {
    TrainConfig cfg;
    cfg.optimizer = "lopt";
    cfg.task = Task::TwoMoonsMlp;
    cfg.steps = 10;
    cfg.weights_path = zero_weights_file();
    const auto r = run_train(cfg);
    for (double l : r.losses) EXPECT_EQ(l, r.losses[0]);
}

TEST(Train, PathsGiveSameLossCurve) {
    TrainConfig cfg;
    cfg.optimizer = "lopt";
    cfg.task = Task::TwoMoonsMlp;
    cfg.steps = 25;
    cfg.seed = 3;
    cfg.path = ExecutionPath::Naive;
    const auto naive = run_train(cfg);
    cfg.path = ExecutionPath::Fused;
    const auto fused = run_train(cfg);
    ASSERT_EQ(naive.losses.size(), fused.losses.size());
    for (std::size_t i = 0; i < naive.losses.size(); ++i)
        EXPECT_LE(std::abs(naive.losses[i] - fused.losses[i]), 1e-5 * (1 + std::abs(naive.losses[i])));
    for (double l : fused.losses) EXPECT_TRUE(std::isfinite(l));
}

TEST(Train, AdafactorRuns) {
    TrainConfig cfg;
    cfg.optimizer = "adafactor";
    cfg.task = Task::TwoMoonsMlp;
    cfg.steps = 30;
    const auto r = run_train(cfg);
    EXPECT_LT(r.losses.back(), r.losses.front());
}

TEST(Train, RejectsBadInput) {
    TrainConfig cfg;
    cfg.steps = 0;
    EXPECT_THROW(run_train(cfg), Error);
    cfg.steps = 1;
    cfg.optimizer = "sgd";
    EXPECT_THROW(run_train(cfg), Error);
}

TEST(Train, DivergenceReported) {
    TrainConfig cfg;
    cfg.optimizer = "adafactor";
    cfg.lr = 1e38;
    cfg.steps = 5;
    const auto r = run_train(cfg);
    EXPECT_TRUE(r.diverged);
}

TEST(DistBench, SingleWorkerTrivialTrace) {
    DistBenchConfig cfg;
    cfg.workers = 1;
    cfg.width = 16;
    cfg.depth = 2;
    const auto r = run_distbench(cfg);
    for (const auto& rec : r.trace.records) EXPECT_EQ(rec.bytes, 0u);
    EXPECT_EQ(r.max_rel_deviation, 0.0);
}

TEST(DistBench, FourWorkersEveryStrategy) {
    for (auto s : {Strategy::AllReduce, Strategy::ReduceScatter, Strategy::FsdpA2A}) {
        DistBenchConfig cfg;
        cfg.workers = 4;
        cfg.strategy = s;
        cfg.width = 48;
        cfg.depth = 3;
        const auto r = run_distbench(cfg);
        EXPECT_LE(r.max_rel_deviation, 1e-6);
        const auto shapes = workload_shapes(Workload::MlpSweep, 48, 3, 0);
        const auto want = expected_trace_bytes(s, 4, shapes, 39);
        ASSERT_EQ(r.trace.records.size(), want.size());
        for (std::size_t i = 0; i < want.size(); ++i) EXPECT_EQ(r.trace.records[i].bytes, want[i].bytes);
    }
}

TEST(DistBench, CostModelFillsTimes) {
    DistBenchConfig cfg;
    cfg.workers = 2;
    cfg.width = 16;
    cfg.depth = 1;
    cfg.cost_model = true;
    const auto r = run_distbench(cfg);
    const auto& rec = r.trace.phase("grad_reduce_scatter");
    EXPECT_EQ(rec.time_ms, rec.model_ms);
}

TEST(Plot, EmptyCsvIsError) {
    const auto path = temp_path("empty.csv");
    { std::ofstream(path) << ""; }
    EXPECT_THROW(read_csv(path), Error);
    CsvTable header_only{{"schema", "task", "optimizer", "step", "loss"}, {}};
    EXPECT_THROW(render_plot(header_only, PlotKind::LossCurve), Error);
}

TEST(Plot, SingleSeriesOneLine) {
    CsvTable t{{"schema", "task", "optimizer", "step", "loss"},
               {{kTrainSchema, "quadratic", "adam", "0", "3"}, {kTrainSchema, "quadratic", "adam", "1", "2"}}};
    const auto svg = render_plot(t, PlotKind::LossCurve);
    std::size_t lines = 0;
    for (std::size_t at = svg.find("<polyline"); at != std::string::npos; at = svg.find("<polyline", at + 1)) ++lines;
    EXPECT_EQ(lines, 1u);
}

TEST(Plot, UnknownVersionRejected) {
    CsvTable t{{"schema", "task", "optimizer", "step", "loss"}, {{"train/2", "quadratic", "adam", "0", "3"}}};
    try {
        render_plot(t, PlotKind::LossCurve);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::SchemaMismatch);
    }
}

TEST(Plot, BenchCsvRoundTrip) {
    BenchConfig cfg;
    cfg.widths = {16, 32};
    cfg.depths = {1};
    cfg.repeats = 3;
    const auto csv = temp_path("bench.csv");
    write_csv(csv, run_bench(cfg));
    const auto table = read_csv(csv);
    const auto svg_path = temp_path("bench.svg");
    { std::ofstream(svg_path) << render_plot(table, PlotKind::StepTimeVsWidth); }
    EXPECT_GT(std::filesystem::file_size(svg_path), 0u);
    EXPECT_NO_THROW(render_plot(table, PlotKind::StepTimeVsDepth));
    EXPECT_THROW(render_plot(table, PlotKind::LossCurve), Error);
}

TEST(Weights, InspectZeroFile) {
    const auto report = inspect_weights(file_load(zero_weights_file()));
    EXPECT_NE(report.find("39 -> 32 -> 32 -> 2"), std::string::npos);
    EXPECT_NE(report.find("feature_set: small_fc_lopt"), std::string::npos);
    EXPECT_NE(report.find("betas:"), std::string::npos);
}

TEST(Weights, ConvertRoundTrip) {
    const auto in = zero_weights_file();
    const auto out = temp_path("converted.pylo");
    convert_weights(in, out);
    EXPECT_EQ(inspect_weights(file_load(in)), inspect_weights(file_load(out)));
}

TEST(Weights, CorruptedHeaderTypedError) {
    auto bytes = encode_tensor_file(file_load(zero_weights_file()));
    bytes[17] = std::byte{'!'};
    try {
        LoptWeights::load_from(decode_tensor_file(bytes));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::MalformedHeader);
    }
}

TEST(Weights, EnvironmentVariable) {
    const auto path = zero_weights_file();
    setenv("LOPT_WEIGHTS", path.c_str(), 1);
    const auto w = resolve_weights(std::nullopt, "small_fc_lopt", 1);
    unsetenv("LOPT_WEIGHTS");
    EXPECT_EQ(w.layers.back().weight.squaredNorm(), 0.0f);
    const auto r = resolve_weights(std::nullopt, "small_fc_lopt", 1);
    EXPECT_GT(r.layers.back().weight.squaredNorm(), 0.0f);
}

} // namespace
