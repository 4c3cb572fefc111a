// SPDX-License-Identifier: Apache-2.0
// Acceptance checks. One PASS/FAIL line per criterion; exit status is the
// number of failures.
//
//   acceptance [--speed-margin X] [--only N]
//
// LOPT_SPEED_MARGIN overrides the default fused-vs-naive margin of 2.0.

#include <sys/mman.h>

#include <chrono>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>

#include "fixtures.hpp"
#include "lopt/cli.hpp"
#include "lopt/tensor_file.hpp"
#include "oracles.hpp"

namespace {

using namespace lopt;
using Clock = std::chrono::steady_clock;

struct Verdict {
    bool pass = false;
    std::string detail;
};

struct Criterion {
    int id;
    std::string name;
    double budget_s;
    std::function<Verdict()> run;
};

std::string str(double v, int precision = 6) {
    std::ostringstream os;
    os.precision(precision);
    os << v;
    return os.str();
}

const FeatureSetSpec kSmall = FeatureSetSpec::small_fc_lopt();
const FeatureSetSpec kVelo = FeatureSetSpec::velo_mlp();

// 1
Verdict feature_counts() {
    const auto in = fixtures::random_instance(3, 5, 1);
    const std::size_t small = construct_features_at(7, in.w, in.g, in.state, kSmall).size();
    const std::size_t velo = construct_features_at(7, in.w, in.g, in.state, kVelo).size();
    const bool ok = small == 39 && velo == 29 && kSmall.d_feat == 39 && kVelo.d_feat == 29 &&
                    kSmall.column_names().size() == 39 && kVelo.column_names().size() == 29;
    return {ok, "small_fc_lopt=" + std::to_string(small) + " velo_mlp=" + std::to_string(velo)};
}

// 2
Verdict cross_path() {
    constexpr double kTol = 1e-5;
    constexpr int kInstances = 120;
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<std::size_t> dim(1, 512);
    double worst = 0.0;
    std::size_t elements = 0;
    for (int i = 0; i < kInstances; ++i) {
        const std::size_t m = i % 10 == 0 ? 512 : dim(rng);
        const std::size_t n = i % 10 == 0 ? 512 : dim(rng);
        const auto& spec = i % 3 == 2 ? kVelo : kSmall;
        const auto in = fixtures::random_instance(m, n, rng(), 1 + int(rng() % 5));
        const auto w = fixtures::random_weights(spec, rng());
        EngineConfig cfg;
        cfg.workers = 1 + rng() % 4;
        const auto naive = step_naive(in.w, in.g, in.state, w, spec, cfg).first;
        const auto fused = step_fused(in.w, in.g, in.state, w, spec, cfg).first;
        for (std::size_t k = 0; k < naive.size(); ++k)
            worst = std::max(worst, oracle::rel_dev(fused.data()[k], naive.data()[k]));
        elements += naive.size();
    }
    return {worst <= kTol, std::to_string(kInstances) + " instances, " + std::to_string(elements) +
                               " elements, max |fused-naive|/(1+|naive|) = " + str(worst) + " (tol " + str(kTol) + ")"};
}

// 3
Verdict zero_network() {
    bool ok = true;
    for (auto path : {ExecutionPath::Naive, ExecutionPath::Fused}) {
        for (const auto& spec : {kSmall, kVelo}) {
            std::mt19937_64 rng(3);
            std::vector<ParamTensor> params{fixtures::random_tensor(40, 30, rng), fixtures::random_tensor(7, 1, rng)};
            OptimizerHandle h({"w", "b"}, params, fixtures::zero_output_weights(spec, 4));
            h.path = path;
            h.weight_decay = 0.0;
            for (int s = 0; s < 3; ++s)
                opt_step(h, {fixtures::random_tensor(40, 30, rng), fixtures::random_tensor(7, 1, rng)});
            ok = ok && h.params[0].bit_equal(params[0]) && h.params[1].bit_equal(params[1]);
        }
    }
    return {ok, "3 opt_steps, lambda=0, naive+fused, both feature sets: parameters bitwise unchanged"};
}

// 4
Verdict update_spot() {
    constexpr double kTol = 1e-9;
    const double scalar = std::abs(double(apply_update(0.0f, 1.0f, 0.0f, 0.01, 0.01)));
    // Network whose outputs are the constant (1, 0) for every element.
    auto w = LoptWeights::zeros(LoptWeights::default_topology(kSmall), kSmall);
    w.layers.back().bias[0] = 1.0f;
    const auto in = fixtures::random_instance(16, 16, 5);
    const ParamTensor zero(16, 16);
    double worst = std::abs(scalar - 0.01);
    const auto naive = step_naive(zero, in.g, in.state, w, kSmall).first;
    const auto fused = step_fused(zero, in.g, in.state, w, kSmall).first;
    for (std::size_t k = 0; k < zero.size(); ++k) {
        worst = std::max(worst, std::abs(std::abs(double(naive.data()[k])) - 0.01));
        worst = std::max(worst, std::abs(std::abs(double(fused.data()[k])) - 0.01));
    }
    return {worst <= kTol, "|dtheta| = " + str(scalar, 12) + ", max deviation from 0.01 over both paths " +
                               str(worst) + " (tol " + str(kTol) + ")"};
}

// 5
Verdict normalization() {
    double lo = 1.0, hi = 0.0;
    std::size_t checked = 0;
    for (int i = 0; i < 24; ++i) {
        const auto& spec = i % 2 ? kVelo : kSmall;
        const auto in = fixtures::random_instance(20 + 7 * i, 31 + 5 * i, 600 + i, 1 + i % 6);
        const auto block = make_block(in.w, in.g, in.state);
        const auto stats = compute_squared_average(block, spec);
        const auto ctx = make_context(block, spec);
        std::vector<double> sq(spec.d_feat, 0.0);
        std::vector<float> f(spec.d_feat);
        for (std::size_t idx = 0; idx < in.w.size(); ++idx) {
            construct_features_at(idx, block, ctx, f);
            const auto nf = normalize_features(f, stats, spec);
            for (std::size_t k = 0; k < nf.size(); ++k) sq[k] += double(nf[k]) * nf[k];
        }
        for (std::size_t k = 0; k < spec.d_feat; ++k) {
            if (stats.sumsq[k] / double(stats.count) < 1e3 * spec.eps_norm) continue;
            const double mean = sq[k] / double(stats.count);
            lo = std::min(lo, mean);
            hi = std::max(hi, mean);
            ++checked;
        }
    }
    return {checked > 0 && lo >= 0.999 && hi <= 1.0,
            std::to_string(checked) + " columns, E[f^2] in [" + str(lo, 9) + ", " + str(hi, 9) + "] (want [0.999, 1])"};
}

// 6
struct Mapping {
    void* ptr = MAP_FAILED;
    std::size_t bytes = 0;
    Mapping(std::size_t b, int prot) : bytes(b) {
        ptr = mmap(nullptr, bytes, prot, MAP_PRIVATE | MAP_ANONYMOUS | MAP_NORESERVE, -1, 0);
    }
    ~Mapping() {
        if (ptr != MAP_FAILED) munmap(ptr, bytes);
    }
    float* data() const { return static_cast<float*>(ptr); }
};

Verdict memory_property() {
    constexpr std::size_t kDim = 16384;
    constexpr std::uint64_t kCap = std::uint64_t(1) << 30;
    const std::size_t n = kDim * kDim;
    // W is written in place; gradient and accumulators are read-only zero
    // pages, which cost no resident memory.
    Mapping params(n * sizeof(float), PROT_READ | PROT_WRITE);
    Mapping zeros(n * sizeof(float), PROT_READ);
    if (params.ptr == MAP_FAILED || zeros.ptr == MAP_FAILED) return {false, "could not map 2 GiB of address space"};
    std::mt19937_64 rng(6);
    std::normal_distribution<float> normal;
    for (std::size_t i = 0; i < n; ++i) params.data()[i] = normal(rng);

    std::vector<std::vector<float>> rows(3, std::vector<float>(kDim)), cols(3, std::vector<float>(kDim));
    std::uniform_real_distribution<float> pos(0.01f, 1.0f);
    for (auto& v : rows)
        for (float& x : v) x = pos(rng);
    for (auto& v : cols)
        for (float& x : v) x = pos(rng);

    ElementBlock block;
    block.shape = {kDim, kDim};
    block.range = {0, n};
    const std::span<const float> z(zeros.data(), n);
    block.param = {params.data(), n};
    block.grad = z;
    block.momentum = {z, z, z};
    block.second_moment = z;
    for (int i = 0; i < 3; ++i) {
        block.row_factor[i] = rows[i];
        block.col_factor[i] = cols[i];
    }
    block.step = 1;
    const auto w = fixtures::random_weights(kSmall, 7);
    EngineConfig cfg;
    cfg.scratch_cap_bytes = kCap;

    std::string naive_outcome = "completed";
    bool naive_oom = false;
    {
        ScratchTracker tracker(kCap);
        try {
            step_naive(block, {params.data(), n}, w, kSmall, cfg, tracker);
        } catch (const Error& e) {
            naive_oom = e.code() == ErrorCode::OutOfScratch;
            naive_outcome = naive_oom ? "OutOfScratch" : e.what();
        }
    }
    bool fused_ok = false;
    std::uint64_t fused_scratch = 0;
    std::string fused_outcome = "completed";
    {
        ScratchTracker tracker(kCap);
        try {
            const auto report = step_fused(block, {params.data(), n}, w, kSmall, cfg, tracker);
            fused_scratch = report.scratch_high_water_bytes;
            fused_ok = fused_scratch <= kCap;
        } catch (const Error& e) {
            fused_outcome = e.what();
        }
    }
    return {naive_oom && fused_ok, "16384x16384, cap 1 GiB, naive needs " + str(double(n) * 39 * 4 / (1 << 30), 4) +
                                       " GiB: naive " + naive_outcome + ", fused " + fused_outcome + " with " +
                                       std::to_string(fused_scratch) + " B scratch"};
}

// 7
double speed_margin = 2.0;

Verdict speed_direction() {
    constexpr std::size_t kRepeats = 7;
    const auto in = fixtures::random_instance(1000, 1000, 8, 2);
    const auto w = fixtures::random_weights(kSmall, 9);
    const auto block = make_block(in.w, in.g, in.state);
    std::vector<float> out(in.w.size());
    auto time = [&](ExecutionPath path) {
        ScratchTracker tracker;
        engine_step(path, block, out, w, kSmall, {}, tracker);
        std::vector<double> samples;
        for (std::size_t r = 0; r < kRepeats; ++r) {
            const auto t0 = Clock::now();
            engine_step(path, block, out, w, kSmall, {}, tracker);
            samples.push_back(std::chrono::duration<double, std::milli>(Clock::now() - t0).count());
        }
        return cli::percentile(samples, 0.5);
    };
    const double naive = time(ExecutionPath::Naive);
    const double fused = time(ExecutionPath::Fused);
    return {fused < naive && naive >= speed_margin * fused,
            "1000x1000, median of " + std::to_string(kRepeats) + ": naive " + str(naive, 4) + " ms, fused " +
                str(fused, 4) + " ms, ratio " + str(naive / fused, 3) + " (need >= " + str(speed_margin, 3) + ")"};
}

// 8
Verdict distributed() {
    constexpr double kTol = 1e-6;
    const std::vector<Shape> shapes(8, Shape{48, 64});
    std::uint64_t total_state = 0;
    for (const auto& s : shapes) total_state += state_bytes(s);
    double worst = 0.0;
    bool state_ok = true;
    for (std::size_t n : {1, 2, 4}) {
        std::mt19937_64 rng(10 + n);
        std::vector<std::vector<ParamTensor>> grads(n);
        for (auto& g : grads)
            for (const auto& s : shapes) g.push_back(fixtures::random_tensor(s.rows, s.cols, rng, 0.3f));
        auto make = [&] {
            std::mt19937_64 prng(99);
            std::vector<std::string> names;
            std::vector<ParamTensor> params;
            for (std::size_t t = 0; t < shapes.size(); ++t) {
                names.push_back("t" + std::to_string(t));
                params.push_back(fixtures::random_tensor(shapes[t].rows, shapes[t].cols, prng));
            }
            OptimizerHandle h(names, params, fixtures::random_weights(kSmall, 98));
            h.weight_decay = 0.01;
            return h;
        };
        auto ref = make();
        std::vector<ParamTensor> mean;
        for (std::size_t t = 0; t < shapes.size(); ++t) {
            ParamTensor sum = grads[0][t];
            for (std::size_t w = 1; w < n; ++w) sum.matrix() += grads[w][t].matrix();
            sum.matrix() /= float(n);
            mean.push_back(std::move(sum));
        }
        opt_step(ref, mean);
        for (auto strategy : {Strategy::AllReduce, Strategy::ReduceScatter, Strategy::FsdpA2A}) {
            auto h = make();
            const auto result = run_distributed_step(h, grads, ShardPlan::make(strategy, n, shapes));
            validate_trace(result.trace, shapes, 39);
            for (std::size_t t = 0; t < shapes.size(); ++t)
                for (std::size_t i = 0; i < h.params[t].size(); ++i)
                    worst = std::max(worst, oracle::rel_dev(h.params[t].data()[i], ref.params[t].data()[i]));
            if (strategy == Strategy::FsdpA2A) {
                for (auto b : result.state_bytes) {
                    const std::uint64_t want = total_state / n;
                    state_ok = state_ok && (b > want ? b - want : want - b) <= sizeof(float);
                }
            }
        }
    }
    return {worst <= kTol && state_ok, "N in {1,2,4} x {allreduce, rs, a2a}, 8 tensors: max rel dev " + str(worst) +
                                           " (tol " + str(kTol) + "), FSDP state per worker = total/N: " +
                                           (state_ok ? "yes" : "no")};
}

// 9
Verdict stats_merge() {
    constexpr double kTol = 1e-6;
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto in = fixtures::random_instance(97 + seed, 131, 700 + seed, 3);
        const auto block = make_block(in.w, in.g, in.state);
        const auto ctx = make_context(block, kSmall);
        const auto whole = compute_squared_average(block, kSmall);
        std::mt19937_64 rng(seed);
        std::vector<std::size_t> cuts{0, in.w.size()};
        for (int c = 0; c < 3; ++c) cuts.push_back(1 + rng() % (in.w.size() - 1));
        std::sort(cuts.begin(), cuts.end());
        std::vector<FeatureStats> parts;
        for (int p = 0; p < 4; ++p) {
            FeatureStats s(39);
            accumulate_feature_squares(block, ctx, {cuts[p], cuts[p + 1]}, s.sumsq);
            s.count = cuts[p + 1] - cuts[p];
            parts.push_back(std::move(s));
        }
        const auto merged = normalization_across_shards(parts);
        if (merged.count != whole.count) return {false, "merged count differs"};
        for (std::size_t k = 0; k < 39; ++k)
            worst = std::max(worst, std::abs(merged.sumsq[k] - whole.sumsq[k]) / std::abs(whole.sumsq[k]));
    }
    return {worst <= kTol, "5 tensors x 4 random shards: max rel dev " + str(worst) + " (tol " + str(kTol) + ")"};
}

// 10
Verdict resume() {
    const auto weights = fixtures::random_weights(kSmall, 11);
    const auto file = std::filesystem::temp_directory_path() / "lopt_acceptance_checkpoint.pylo";
    auto run = [&](bool interrupt) {
        std::mt19937_64 rng(12);
        std::vector<ParamTensor> params{fixtures::random_tensor(64, 48, rng), fixtures::random_tensor(48, 1, rng),
                                        fixtures::random_tensor(10, 64, rng)};
        OptimizerHandle h({"w1", "b1", "w2"}, params, weights);
        h.schedule = ScheduleConfig::cosine(1.0, 0.1, 3, 10);
        h.weight_decay = 0.01;
        h.engine.workers = 2;
        for (int s = 0; s < 10; ++s) {
            if (interrupt && s == 5) {
                file_save(checkpoint_save(h), file);
                h = checkpoint_load(file_load(file), "small_fc_lopt");
                h.engine.workers = 2;
            }
            std::vector<ParamTensor> g;
            for (const auto& p : h.params) g.push_back(fixtures::random_tensor(p.rows(), p.cols(), rng, 0.2f));
            opt_step(h, g);
        }
        return h;
    };
    const auto a = run(false);
    const auto b = run(true);
    std::filesystem::remove(file);
    bool same = a.step == 10 && b.step == 10;
    for (std::size_t i = 0; i < a.params.size(); ++i)
        same = same && a.params[i].bit_equal(b.params[i]) && a.states[i].bit_equal(b.states[i]);
    return {same, "checkpoint file at step 5 of 10, workers=2: parameters and states bitwise identical"};
}

// 11
Verdict schedule_decay() {
    const auto cfg = ScheduleConfig::cosine(0.3, 0.02, 10, 50);
    const bool endpoints = schedule_lr(cfg, 10) == 0.3 && schedule_lr(cfg, 50) == 0.02;
    std::mt19937_64 rng(13);
    const auto theta = fixtures::random_tensor(20, 20, rng);
    const bool identity = apply_weight_decay(theta, 0.7, 0.0).bit_equal(theta);

    OptimizerHandle h({"w"}, {theta}, fixtures::zero_output_weights(kSmall, 14));
    h.weight_decay = 0.1;
    h.schedule = ScheduleConfig::constant(1.0);
    opt_step(h, {fixtures::random_tensor(20, 20, rng)});
    bool decay = true;
    for (std::size_t i = 0; i < theta.size(); ++i) decay = decay && h.params[0].data()[i] == 0.9f * theta.data()[i];
    return {endpoints && identity && decay, std::string("warmup end -> max_lr, total -> min_lr: ") +
                                                (endpoints ? "exact" : "NOT exact") + "; lambda=0 identity: " +
                                                (identity ? "yes" : "no") + "; zero net + lambda=0.1 gives 0.9 theta: " +
                                                (decay ? "exact" : "NOT exact")};
}

// 12
Verdict baseline() {
    constexpr double kTol = 1e-6;
    const float lr = 1e-3f;
    const auto r = adam_step(ParamTensor(1, 1), ParamTensor(1, 1, 1.0f), ParamTensor(1, 1), ParamTensor(1, 1), 0.9f,
                             0.999f, lr, 1e-8f, 1);
    const double dev = std::abs(std::abs(double(r.theta(0, 0))) - lr);
    cli::TrainConfig cfg;
    cfg.steps = 100;
    cfg.lr = 0.1;
    const auto run = cli::run_train(cfg);
    bool monotone = !run.diverged;
    for (std::size_t i = 1; i < run.losses.size(); ++i) monotone = monotone && run.losses[i] <= run.losses[i - 1];
    return {dev <= kTol && monotone, "adam t=1 |update| - lr = " + str(dev) + " (tol " + str(kTol) +
                                         "); quadratic loss over 100 adam steps " +
                                         (monotone ? "monotone" : "NOT monotone") + ", " + str(run.losses.front(), 5) +
                                         " -> " + str(run.losses.back(), 5)};
}

} // namespace

int main(int argc, char** argv) {
    int only = 0;
    if (const char* env = std::getenv("LOPT_SPEED_MARGIN")) speed_margin = std::atof(env);
    for (int i = 1; i + 1 < argc; i += 2) {
        if (std::strcmp(argv[i], "--speed-margin") == 0) speed_margin = std::atof(argv[i + 1]);
        else if (std::strcmp(argv[i], "--only") == 0) only = std::atoi(argv[i + 1]);
    }

    const std::vector<Criterion> criteria{
        {1, "feature-count conformance", 1, feature_counts},
        {2, "cross-path oracle", 120, cross_path},
        {3, "zero-network no-op", 1, zero_network},
        {4, "update-formula spot values", 1, update_spot},
        {5, "normalization self-consistency", 10, normalization},
        {6, "memory property", 60, memory_property},
        {7, "speed direction", 120, speed_direction},
        {8, "distributed equivalence", 60, distributed},
        {9, "stats-merge additivity", 5, stats_merge},
        {10, "resume determinism", 30, resume},
        {11, "schedule/decay endpoints", 1, schedule_decay},
        {12, "baseline sanity", 10, baseline},
    };

    int failures = 0;
    for (const auto& c : criteria) {
        if (only && c.id != only) continue;
        const auto t0 = Clock::now();
        Verdict v;
        try {
            v = c.run();
        } catch (const std::exception& e) {
            v = {false, std::string("threw: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
        const bool in_budget = secs <= c.budget_s;
        const bool pass = v.pass && in_budget;
        failures += !pass;
        std::cout << (pass ? "PASS" : "FAIL") << "  " << c.id << ". " << c.name << ": " << v.detail << " ["
                  << str(secs, 3) << " s, budget " << c.budget_s << " s" << (in_budget ? "" : ", OVER BUDGET") << "]"
                  << std::endl;
    }
    return failures;
}
