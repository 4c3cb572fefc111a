// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <chrono>
#include <random>
#include <sstream>

#include "lopt/cli.hpp"

namespace lopt::cli {

namespace {

using Clock = std::chrono::steady_clock;

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
}

std::vector<ParamTensor> random_tensors(const std::vector<Shape>& shapes, std::mt19937_64& rng, float scale) {
    std::normal_distribution<float> normal(0.0f, scale);
    std::vector<ParamTensor> out;
    out.reserve(shapes.size());
    for (const auto& s : shapes) {
        ParamTensor t(s.rows, s.cols);
        for (float& x : t.data()) x = normal(rng);
        out.push_back(std::move(t));
    }
    return out;
}

struct Measurement {
    std::vector<double> samples_ms;
    std::uint64_t scratch_bytes = 0;
    std::optional<std::uint64_t> kernel_passes;
};

template <typename StepFn>
std::vector<double> time_steps(const BenchConfig& cfg, StepFn&& step) {
    for (std::size_t i = 0; i < cfg.warmup; ++i) step();
    std::vector<double> samples;
    for (std::size_t i = 0; i < cfg.repeats; ++i) {
        const auto t0 = Clock::now();
        step();
        samples.push_back(std::chrono::duration<double, std::milli>(Clock::now() - t0).count());
    }
    return samples;
}

Measurement measure(const BenchConfig& cfg, const std::string& optimizer, const std::vector<ParamTensor>& params,
                    const std::vector<ParamTensor>& grads, const LoptWeights& weights) {
    Measurement m;
    if (optimizer == "adam") {
        std::vector<ParamTensor> theta = params, mom, vel;
        for (const auto& p : params) {
            mom.emplace_back(p.rows(), p.cols());
            vel.emplace_back(p.rows(), p.cols());
        }
        std::uint64_t t = 0;
        m.samples_ms = time_steps(cfg, [&] {
            ++t;
            for (std::size_t i = 0; i < theta.size(); ++i)
                adam_step_inplace(theta[i], grads[i], mom[i], vel[i], 0.9f, 0.999f, 1e-3f, 1e-8f, t);
        });
        return m;
    }
    if (optimizer == "adafactor") {
        std::vector<ParamTensor> theta = params, r, c;
        for (const auto& p : params) {
            r.emplace_back(p.rows(), 1);
            c.emplace_back(1, p.cols());
        }
        m.samples_ms = time_steps(cfg, [&] {
            for (std::size_t i = 0; i < theta.size(); ++i)
                adafactor_step_inplace(theta[i], grads[i], r[i], c[i], 0.999f, 1e-3f);
        });
        return m;
    }
    require(optimizer == "lopt_naive" || optimizer == "lopt_fused", ErrorCode::InvalidArgument,
            "unknown optimizer '" + optimizer + "'");
    std::vector<std::string> names;
    for (std::size_t i = 0; i < params.size(); ++i) names.push_back("p" + std::to_string(i));
    OptimizerHandle h(std::move(names), params, weights);
    h.path = optimizer == "lopt_naive" ? ExecutionPath::Naive : ExecutionPath::Fused;
    h.engine.workers = cfg.workers;
    h.engine.scratch_cap_bytes = cfg.scratch_cap_bytes;
    m.samples_ms = time_steps(cfg, [&] { opt_step(h, grads); });
    std::uint64_t passes = 0;
    for (const auto& r : h.last_reports) {
        m.scratch_bytes = std::max(m.scratch_bytes, r.scratch_high_water_bytes);
        passes += r.kernels.total();
    }
    m.kernel_passes = passes;
    return m;
}

} // namespace

Workload parse_workload(const std::string& s) {
    if (s == "mlp_sweep") return Workload::MlpSweep;
    if (s == "transformer_proxy") return Workload::TransformerProxy;
    throw Error(ErrorCode::InvalidArgument, "unknown workload '" + s + "'");
}

std::string to_string(Workload w) { return w == Workload::MlpSweep ? "mlp_sweep" : "transformer_proxy"; }

void BenchConfig::validate() const {
    require(repeats >= 3, ErrorCode::InvalidArgument, "repeats must be at least 3");
    require(warmup >= 1, ErrorCode::InvalidArgument, "warmup must be at least 1");
    require(!widths.empty() && !depths.empty() && !optimizers.empty(), ErrorCode::InvalidArgument,
            "widths, depths and optimizers must be non-empty");
    for (auto w : widths) require(w >= 1, ErrorCode::InvalidArgument, "width must be positive");
    for (auto d : depths) require(d >= 1, ErrorCode::InvalidArgument, "depth must be positive");
    require(workers >= 1, ErrorCode::InvalidArgument, "workers must be positive");
}

std::vector<Shape> workload_shapes(Workload w, std::size_t width, std::size_t depth, std::size_t vocab) {
    std::vector<Shape> shapes;
    if (w == Workload::MlpSweep) {
        for (std::size_t l = 0; l < depth; ++l) {
            shapes.push_back({width, width});
            shapes.push_back({width, 1});
        }
        return shapes;
    }
    const Shape norm{1, width};
    shapes.push_back({vocab, width});
    shapes.push_back({1024, width});
    for (std::size_t l = 0; l < depth; ++l) {
        shapes.insert(shapes.end(), {norm, norm});
        shapes.insert(shapes.end(), 4, Shape{width, width});
        shapes.insert(shapes.end(), {norm, norm});
        shapes.push_back({width, 4 * width});
        shapes.push_back({4 * width, width});
    }
    shapes.insert(shapes.end(), {norm, norm});
    return shapes;
}

double percentile(std::vector<double> samples, double q) {
    require(!samples.empty(), ErrorCode::InvalidArgument, "percentile of no samples");
    std::sort(samples.begin(), samples.end());
    const double pos = q * double(samples.size() - 1);
    const std::size_t lo = std::size_t(pos);
    const std::size_t hi = std::min(lo + 1, samples.size() - 1);
    return samples[lo] + (pos - double(lo)) * (samples[hi] - samples[lo]);
}

CsvTable run_bench(const BenchConfig& cfg, std::ostream* log) {
    cfg.validate();
    const LoptWeights weights = resolve_weights(cfg.weights_path, "small_fc_lopt", cfg.seed);
    CsvTable table;
    table.header = {"schema",  "workload", "width",  "depth",  "optimizer",     "workers",      "tensors",
                    "params",  "status",   "median_ms", "p10_ms", "p90_ms", "scratch_bytes", "kernel_passes"};
    for (auto width : cfg.widths) {
        for (auto depth : cfg.depths) {
            const auto shapes = workload_shapes(cfg.workload, width, depth, cfg.vocab);
            std::uint64_t total = 0;
            for (const auto& s : shapes) total += s.size();
            std::mt19937_64 rng(cfg.seed ^ (std::uint64_t(width) << 20) ^ depth);
            const auto params = random_tensors(shapes, rng, 0.1f);
            const auto grads = random_tensors(shapes, rng, 0.01f);
            for (const auto& opt : cfg.optimizers) {
                std::vector<std::string> row{kBenchSchema,
                                             to_string(cfg.workload),
                                             std::to_string(width),
                                             std::to_string(depth),
                                             opt,
                                             std::to_string(cfg.workers),
                                             std::to_string(shapes.size()),
                                             std::to_string(total)};
                try {
                    const Measurement m = measure(cfg, opt, params, grads, weights);
                    row.insert(row.end(), {"ok", fmt(percentile(m.samples_ms, 0.5)), fmt(percentile(m.samples_ms, 0.1)),
                                           fmt(percentile(m.samples_ms, 0.9)), std::to_string(m.scratch_bytes),
                                           m.kernel_passes ? std::to_string(*m.kernel_passes) : ""});
                } catch (const Error& e) {
                    if (e.code() != ErrorCode::OutOfScratch) throw;
                    row.insert(row.end(), {"OOM", "", "", "", "", ""});
                }
                if (log) {
                    *log << to_string(cfg.workload) << " width=" << width << " depth=" << depth << ' ' << opt << ": "
                         << row[8];
                    if (row[8] == "ok") *log << " median " << row[9] << " ms";
                    *log << '\n';
                }
                table.rows.push_back(std::move(row));
            }
        }
    }
    return table;
}

} // namespace lopt::cli
