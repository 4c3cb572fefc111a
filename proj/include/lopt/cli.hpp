// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "lopt/distsim.hpp"

namespace lopt::cli {

// Schema tags, stored in the first column of every bench/train CSV row.
inline constexpr const char* kBenchSchema = "bench/1";
inline constexpr const char* kTrainSchema = "train/1";

/// Header row and data rows; every row has header.size() cells.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(const std::string& name) const; // throws SchemaMismatch
};

/// Comma-separated, no quoting. Throws SchemaMismatch on ragged rows or an
/// empty file.
CsvTable read_csv(const std::filesystem::path& path);
void write_csv(const std::filesystem::path& path, const CsvTable& table);

// ---- weights -----------------------------------------------------------------

/// Weights from `explicit_path`, else $LOPT_WEIGHTS, else seeded random
/// weights for `feature_set` with the default topology.
LoptWeights resolve_weights(const std::optional<std::filesystem::path>& explicit_path, const std::string& feature_set,
                            std::uint64_t seed);

/// Layer shapes, feature set, alpha/beta_out, EMA betas, update sign.
std::string inspect_weights(const NamedTensorFile& file);
/// Decode and re-encode at the current container version.
void convert_weights(const std::filesystem::path& in, const std::filesystem::path& out);

// ---- bench ---------------------------------------------------------------------

enum class Workload { MlpSweep, TransformerProxy };
Workload parse_workload(const std::string& s);
std::string to_string(Workload w);

struct BenchConfig {
    Workload workload = Workload::MlpSweep;
    std::vector<std::size_t> widths{256};
    std::vector<std::size_t> depths{1};
    /// Any of adam, adafactor, lopt_naive, lopt_fused.
    std::vector<std::string> optimizers{"adam", "adafactor", "lopt_naive", "lopt_fused"};
    std::size_t repeats = 5;
    std::size_t warmup = 1;
    std::uint64_t seed = 0;
    std::size_t workers = 1;
    std::uint64_t scratch_cap_bytes = ScratchTracker::kUnlimited;
    std::size_t vocab = 50257; // transformer_proxy embedding rows
    std::optional<std::filesystem::path> weights_path;

    /// Throws InvalidArgument unless repeats >= 3, warmup >= 1, lists non-empty.
    void validate() const;
};

/// Tensor shapes stepped for one (workload, width, depth) point.
///
/// mlp_sweep: depth x (width x width weight, width x 1 bias).
/// transformer_proxy: vocab x width embedding, 1024 x width positions, then
/// per block two layer norms (1 x width gain and bias each), four width x width
/// attention matrices, width x 4 width and 4 width x width MLP matrices, and a
/// final layer norm.
std::vector<Shape> workload_shapes(Workload w, std::size_t width, std::size_t depth, std::size_t vocab);

/// Timing columns are median_ms, p10_ms, p90_ms; all others are determined
/// by the config. status is "ok" or "OOM".
CsvTable run_bench(const BenchConfig& cfg, std::ostream* log = nullptr);

/// Percentile of sorted samples with linear interpolation, q in [0, 1].
double percentile(std::vector<double> samples, double q);

// ---- train ---------------------------------------------------------------------

enum class Task { Quadratic, TwoMoonsMlp };
Task parse_task(const std::string& s);
std::string to_string(Task t);

struct TrainConfig {
    Task task = Task::Quadratic;
    /// adam, adafactor, or lopt.
    std::string optimizer = "adam";
    ExecutionPath path = ExecutionPath::Fused;
    std::size_t steps = 100;
    std::uint64_t seed = 0;
    /// Defaults to 0.1 for adam and adafactor, 1.0 for lopt.
    std::optional<double> lr;
    std::size_t workers = 1;
    std::optional<std::filesystem::path> weights_path;
};

struct TrainResult {
    CsvTable metrics; // schema,task,optimizer,step,loss
    std::vector<double> losses;
    bool diverged = false;
};

/// Loss is logged before each step and once after the last (steps + 1 rows).
/// A non-finite loss stops the run and sets diverged.
TrainResult run_train(const TrainConfig& cfg);

// ---- distbench -----------------------------------------------------------------

struct DistBenchConfig {
    std::size_t workers = 4;
    Strategy strategy = Strategy::ReduceScatter;
    std::size_t width = 256;
    std::size_t depth = 4;
    std::uint64_t seed = 0;
    std::optional<std::filesystem::path> weights_path;
    /// Replace measured communication times with CommCostModel{} estimates.
    bool cost_model = false;
};

struct DistBenchResult {
    CommTrace trace;
    double max_rel_deviation = 0.0;
};

/// Runs the strategy on an mlp_sweep model with per-worker random gradients,
/// checks it against the single-device step on the mean gradient (1e-6
/// relative) and the byte formulas. Throws SchemaMismatch if either fails.
DistBenchResult run_distbench(const DistBenchConfig& cfg);

// ---- plot ----------------------------------------------------------------------

enum class PlotKind { StepTimeVsWidth, StepTimeVsDepth, LossCurve };
PlotKind parse_plot_kind(const std::string& s);

/// Renders an SVG line chart, one series per optimizer (per optimizer and
/// fixed depth/width for step-time plots). OOM rows are skipped. Throws
/// SchemaMismatch for empty tables, missing columns or an unknown schema.
std::string render_plot(const CsvTable& table, PlotKind kind);

} // namespace lopt::cli
