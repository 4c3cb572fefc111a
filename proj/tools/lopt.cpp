// SPDX-License-Identifier: Apache-2.0
// lopt: benchmark sweeps, toy training, distributed traces, plots and
// weights-file tools for the learned-optimizer step engine.

#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "lopt/cli.hpp"
#include "lopt/tensor_file.hpp"

namespace {

using namespace lopt;
using namespace lopt::cli;

void write_text(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") {
        std::cout << text;
        return;
    }
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path);
    out << text;
}

void emit_csv(const std::string& path, const CsvTable& table) {
    if (path.empty() || path == "-") {
        std::ostringstream os;
        for (std::size_t i = 0; i < table.header.size(); ++i) os << (i ? "," : "") << table.header[i];
        os << '\n';
        for (const auto& r : table.rows) {
            for (std::size_t i = 0; i < r.size(); ++i) os << (i ? "," : "") << r[i];
            os << '\n';
        }
        std::cout << os.str();
    } else {
        write_csv(path, table);
    }
}

std::optional<std::filesystem::path> opt_path(const std::string& s) {
    if (s.empty()) return std::nullopt;
    return std::filesystem::path(s);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Learned-optimizer step engine tools"};
    app.require_subcommand(1);

    // bench
    BenchConfig bench;
    std::string bench_workload = "mlp_sweep", bench_out, bench_path, bench_weights;
    std::vector<std::string> bench_opts;
    auto* b = app.add_subcommand("bench", "Time optimizer steps over width/depth sweeps");
    b->add_option("--workload", bench_workload, "mlp_sweep | transformer_proxy")->capture_default_str();
    b->add_option("--widths", bench.widths, "Comma-separated widths")->delimiter(',');
    b->add_option("--depths", bench.depths, "Comma-separated depths")->delimiter(',');
    b->add_option("--optimizer", bench_opts, "adam, adafactor, lopt_naive, lopt_fused, or lopt with --path")
        ->delimiter(',');
    b->add_option("--path", bench_path, "naive | fused; turns 'lopt' into lopt_<path>");
    b->add_option("--repeats", bench.repeats, "Timed steps per point (>= 3)")->capture_default_str();
    b->add_option("--warmup", bench.warmup, "Untimed steps per point (>= 1)")->capture_default_str();
    b->add_option("--workers", bench.workers, "Engine worker threads")->capture_default_str();
    b->add_option("--seed", bench.seed)->capture_default_str();
    b->add_option("--scratch-cap-bytes", bench.scratch_cap_bytes, "Scratch allocation cap");
    b->add_option("--vocab", bench.vocab, "transformer_proxy embedding rows")->capture_default_str();
    b->add_option("--weights", bench_weights, "Weights file (default $LOPT_WEIGHTS, else random)");
    b->add_option("--out", bench_out, "CSV path (default stdout)");

    // train
    TrainConfig train;
    std::string train_task = "quadratic", train_path = "fused", train_out, train_weights;
    double train_lr = 0.0;
    auto* t = app.add_subcommand("train", "Toy training run with per-step loss");
    t->add_option("--task", train_task, "quadratic | two_moons_mlp")->capture_default_str();
    t->add_option("--optimizer", train.optimizer, "adam | adafactor | lopt")->capture_default_str();
    t->add_option("--path", train_path, "naive | fused (lopt only)")->capture_default_str();
    t->add_option("--steps", train.steps)->capture_default_str();
    t->add_option("--seed", train.seed)->capture_default_str();
    auto* lr_opt = t->add_option("--lr", train_lr, "Learning rate (default 0.1, or 1.0 for lopt)");
    t->add_option("--workers", train.workers)->capture_default_str();
    t->add_option("--weights", train_weights, "Weights file (default $LOPT_WEIGHTS, else random)");
    t->add_option("--out", train_out, "CSV path (default stdout)");

    // distbench
    DistBenchConfig dist;
    std::string dist_strategy = "rs", dist_out, dist_weights;
    auto* d = app.add_subcommand("distbench", "Simulated data-parallel step with communication trace");
    d->add_option("--workers", dist.workers, "Simulated devices N")->capture_default_str();
    d->add_option("--strategy", dist_strategy, "allreduce | rs | a2a")->capture_default_str();
    d->add_option("--width", dist.width)->capture_default_str();
    d->add_option("--depth", dist.depth)->capture_default_str();
    d->add_option("--seed", dist.seed)->capture_default_str();
    d->add_flag("--cost-model", dist.cost_model, "Report modelled communication times");
    d->add_option("--weights", dist_weights, "Weights file (default $LOPT_WEIGHTS, else random)");
    d->add_option("--out", dist_out, "CSV path (default stdout)");

    // plot
    std::string plot_in, plot_kind, plot_out;
    auto* p = app.add_subcommand("plot", "Render a bench or train CSV as SVG");
    p->add_option("csv", plot_in, "Input CSV")->required();
    p->add_option("--kind", plot_kind, "step_time_vs_width | step_time_vs_depth | loss_curve")->required();
    p->add_option("--out", plot_out, "SVG path")->required();

    // weights
    auto* w = app.add_subcommand("weights", "Inspect, convert or create weights files");
    w->require_subcommand(1);
    std::string inspect_path, convert_in, convert_out, init_out, init_fs = "small_fc_lopt";
    std::vector<std::size_t> init_topology;
    bool init_zero = false;
    std::uint64_t init_seed = 0;
    auto* wi = w->add_subcommand("inspect", "Print layer shapes, feature set and betas");
    wi->add_option("path", inspect_path)->required();
    auto* wc = w->add_subcommand("convert", "Re-serialize at the current container version");
    wc->add_option("in", convert_in)->required();
    wc->add_option("out", convert_out)->required();
    auto* wn = w->add_subcommand("init", "Write zero or seeded random weights");
    wn->add_option("--feature-set", init_fs, "small_fc_lopt | velo_mlp")->capture_default_str();
    wn->add_option("--topology", init_topology, "Layer widths, e.g. 39,32,32,2")->delimiter(',');
    wn->add_flag("--zero", init_zero, "All weights and biases zero");
    wn->add_option("--seed", init_seed)->capture_default_str();
    wn->add_option("--out", init_out)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*b) {
            bench.workload = parse_workload(bench_workload);
            if (!bench_opts.empty()) bench.optimizers.clear();
            for (auto& o : bench_opts) {
                if (o == "lopt") {
                    require(!bench_path.empty(), ErrorCode::InvalidArgument, "--optimizer lopt needs --path");
                    o = "lopt_" + to_string(parse_path(bench_path));
                }
                bench.optimizers.push_back(o);
            }
            if (bench_opts.empty() && !bench_path.empty())
                bench.optimizers = {"lopt_" + to_string(parse_path(bench_path))};
            bench.weights_path = opt_path(bench_weights);
            emit_csv(bench_out, run_bench(bench, &std::cerr));
        } else if (*t) {
            train.task = parse_task(train_task);
            train.path = parse_path(train_path);
            if (lr_opt->count()) train.lr = train_lr;
            train.weights_path = opt_path(train_weights);
            const auto result = run_train(train);
            emit_csv(train_out, result.metrics);
            if (result.diverged) std::cerr << "warning: loss became non-finite; run stopped early\n";
        } else if (*d) {
            dist.strategy = parse_strategy(dist_strategy);
            dist.weights_path = opt_path(dist_weights);
            const auto result = run_distbench(dist);
            write_text(dist_out, CommTrace::csv_header() + "\n" + result.trace.csv_rows());
            std::cerr << "max relative deviation from single-device step: " << result.max_rel_deviation << '\n';
        } else if (*p) {
            write_text(plot_out, render_plot(read_csv(plot_in), parse_plot_kind(plot_kind)));
        } else if (*wi) {
            std::cout << inspect_weights(file_load(inspect_path));
        } else if (*wc) {
            convert_weights(convert_in, convert_out);
        } else if (*wn) {
            const auto spec = FeatureSetSpec::from_name(init_fs);
            if (init_topology.empty()) init_topology = LoptWeights::default_topology(spec);
            const auto weights = init_zero ? LoptWeights::zeros(init_topology, spec)
                                           : LoptWeights::random(init_topology, spec, init_seed);
            file_save(weights.to_file(), init_out);
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
