// SPDX-License-Identifier: Apache-2.0
#include "lopt/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <optional>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "lopt/parallel.hpp"

namespace lopt {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

constexpr std::size_t kMaxStackWidth = 256;
constexpr std::size_t kLanes = std::size_t(kTileWidth);

using Packet = typename Eigen::internal::packet_traits<float>::type;
constexpr std::size_t kPacket = std::size_t(Eigen::internal::packet_traits<float>::size);
constexpr std::size_t kPackets = kLanes / kPacket;
static_assert(kLanes % kPacket == 0);

// y[j][:] = bias[j] + sum_k w[j][k] * x[k][:] over kLanes lanes. `x` holds
// one kLanes run per input, located at x + offset[k] (offset == nullptr means
// k * kLanes). w is row-major out x in.
template <bool Relu>
void dense_tile(const float* x, const std::size_t* offset, std::size_t in, const float* w, const float* bias,
                std::size_t out, float* y) {
    using namespace Eigen::internal;
    constexpr std::size_t kBlock = kPackets >= 8 ? 1 : 8 / kPackets;
    const Packet zero = pset1<Packet>(0.0f);
    auto xk = [&](std::size_t k) { return x + (offset ? offset[k] : k * kLanes); };
    auto store = [&](float* dst, Packet v) { pstoreu(dst, Relu ? pmax(v, zero) : v); };
    std::size_t j = 0;
    for (; j + kBlock <= out; j += kBlock) {
        Packet acc[kBlock][kPackets];
        for (std::size_t jj = 0; jj < kBlock; ++jj)
            for (std::size_t q = 0; q < kPackets; ++q) acc[jj][q] = pset1<Packet>(bias[j + jj]);
        const float* wr = w + j * in;
        for (std::size_t k = 0; k < in; ++k) {
            const float* xv = xk(k);
            Packet xp[kPackets];
            for (std::size_t q = 0; q < kPackets; ++q) xp[q] = ploadu<Packet>(xv + q * kPacket);
            for (std::size_t jj = 0; jj < kBlock; ++jj) {
                const Packet wv = pset1<Packet>(wr[jj * in + k]);
                for (std::size_t q = 0; q < kPackets; ++q) acc[jj][q] = pmadd(wv, xp[q], acc[jj][q]);
            }
        }
        for (std::size_t jj = 0; jj < kBlock; ++jj)
            for (std::size_t q = 0; q < kPackets; ++q) store(y + (j + jj) * kLanes + q * kPacket, acc[jj][q]);
    }
    for (; j < out; ++j) {
        Packet acc[kPackets];
        for (std::size_t q = 0; q < kPackets; ++q) acc[q] = pset1<Packet>(bias[j]);
        for (std::size_t k = 0; k < in; ++k) {
            const float* xv = xk(k);
            const Packet wv = pset1<Packet>(w[j * in + k]);
            for (std::size_t q = 0; q < kPackets; ++q) acc[q] = pmadd(wv, ploadu<Packet>(xv + q * kPacket), acc[q]);
        }
        for (std::size_t q = 0; q < kPackets; ++q) store(y + j * kLanes + q * kPacket, acc[q]);
    }
}

// The MLP rearranged for one tensor step: normalization factors multiplied
// into the first layer, and the columns that are constant over a row (row
// factors) or over the whole tensor (time features) moved into the bias.
struct PackedMlp {
    struct Layer {
        std::vector<float> weight; // row-major out x in
        std::vector<float> bias;
        std::size_t in = 0;
        std::size_t out = 0;
    };
    std::vector<Layer> layers;
    std::vector<std::size_t> element_offsets; // tile offsets of per-element columns
    std::vector<std::size_t> row_columns;
    std::vector<float> row_weight; // out x row_columns.size()

    PackedMlp(const LoptWeights& w, const FeatureContext& ctx, std::span<const float> factors) {
        const DenseLayer& first = w.layers.front();
        const std::size_t out = std::size_t(first.weight.rows());
        std::vector<std::size_t> element_columns;
        std::vector<float> bias(first.bias.data(), first.bias.data() + out);
        for (std::size_t k = 0; k < ctx.d_feat; ++k) {
            const bool row_bcast = (k >= column::kRowFactor && k < column::kRowFactor + kNumFactors) ||
                                   (k >= column::kRsqrtRowFactor && k < column::kRsqrtRowFactor + kNumFactors);
            const bool constant = ctx.time_features && k >= column::kTime && k < column::kTime + kNumTimeFeatures;
            if (constant) {
                const float x = ctx.time_values[k - column::kTime] * factors[k];
                for (std::size_t j = 0; j < out; ++j) bias[j] += first.weight(Eigen::Index(j), Eigen::Index(k)) * x;
            } else if (row_bcast) {
                row_columns.push_back(k);
            } else {
                element_columns.push_back(k);
                element_offsets.push_back(k * kLanes);
            }
        }
        Layer l0;
        l0.in = element_columns.size();
        l0.out = out;
        l0.bias = std::move(bias);
        l0.weight.resize(out * l0.in);
        row_weight.resize(out * row_columns.size());
        for (std::size_t j = 0; j < out; ++j) {
            for (std::size_t q = 0; q < l0.in; ++q) {
                const std::size_t k = element_columns[q];
                l0.weight[j * l0.in + q] = first.weight(Eigen::Index(j), Eigen::Index(k)) * factors[k];
            }
            for (std::size_t q = 0; q < row_columns.size(); ++q) {
                const std::size_t k = row_columns[q];
                row_weight[j * row_columns.size() + q] = first.weight(Eigen::Index(j), Eigen::Index(k)) * factors[k];
            }
        }
        layers.push_back(std::move(l0));
        for (std::size_t i = 1; i < w.layers.size(); ++i) {
            const DenseLayer& d = w.layers[i];
            Layer l;
            l.in = std::size_t(d.weight.cols());
            l.out = std::size_t(d.weight.rows());
            l.weight.resize(l.in * l.out);
            Eigen::Map<MatrixXf>(l.weight.data(), Eigen::Index(l.out), Eigen::Index(l.in)) = d.weight;
            l.bias.assign(d.bias.data(), d.bias.data() + l.out);
            layers.push_back(std::move(l));
        }
    }

    /// Runs the network on one tile. `ping`/`pong` each hold max_width x kLanes
    /// floats; returns the buffer holding the 2 x kLanes output.
    const float* run(const FeatureTile& tile, float* ping, float* pong, float* row_bias) const {
        const Layer& l0 = layers.front();
        const std::size_t nr = row_columns.size();
        for (std::size_t j = 0; j < l0.out; ++j) {
            float b = l0.bias[j];
            for (std::size_t q = 0; q < nr; ++q) b += row_weight[j * nr + q] * tile(0, Eigen::Index(row_columns[q]));
            row_bias[j] = b;
        }
        const bool single = layers.size() == 1;
        if (single)
            dense_tile<false>(tile.data(), element_offsets.data(), l0.in, l0.weight.data(), row_bias, l0.out, ping);
        else
            dense_tile<true>(tile.data(), element_offsets.data(), l0.in, l0.weight.data(), row_bias, l0.out, ping);
        float* cur = ping;
        float* next = pong;
        for (std::size_t i = 1; i < layers.size(); ++i) {
            const Layer& l = layers[i];
            if (i + 1 < layers.size())
                dense_tile<true>(cur, nullptr, l.in, l.weight.data(), l.bias.data(), l.out, next);
            else
                dense_tile<false>(cur, nullptr, l.in, l.weight.data(), l.bias.data(), l.out, next);
            std::swap(cur, next);
        }
        return cur;
    }
};

// Writes theta -/+ lr * direction * exp(magnitude * alpha) * beta_out for n
// elements. Returns max |delta|; sets `overflow` on non-finite deltas.
float write_updates(const float* direction, const float* magnitude, std::size_t n, const LoptWeights& w, float lr,
                    const float* theta, float* out, bool& overflow) {
    using Chunk = Eigen::Array<float, Eigen::Dynamic, 1, 0, kTileWidth, 1>;
    using In = Eigen::Map<const Eigen::ArrayXf>;
    const float alpha = static_cast<float>(w.alpha);
    const float scale = static_cast<float>(w.beta_out * double(lr));
    float max_abs = 0.0f;
    Chunk delta;
    for (std::size_t b = 0; b < n; b += kLanes) {
        const Eigen::Index len = Eigen::Index(std::min(kLanes, n - b));
        delta = In(direction + b, len) * (In(magnitude + b, len) * alpha).exp() * scale;
        if (!delta.allFinite()) overflow = true;
        Eigen::Map<Eigen::ArrayXf> o(out + b, len);
        if (w.update_sign == UpdateSign::Subtract)
            o = In(theta + b, len) - delta;
        else
            o = In(theta + b, len) + delta;
        max_abs = std::max(max_abs, delta.abs().maxCoeff());
    }
    return max_abs;
}

void check_weights(const LoptWeights& weights, const FeatureSetSpec& spec) {
    weights.validate();
    require(weights.input_dim() == spec.d_feat, ErrorCode::ShapeMismatch,
            "optimizer MLP expects " + std::to_string(weights.input_dim()) + " inputs, feature set '" + spec.name() +
                "' provides " + std::to_string(spec.d_feat));
}

void check_out(const ElementBlock& block, std::span<float> out) {
    block.validate();
    require(out.size() == block.range.size(), ErrorCode::ShapeMismatch, "output slice length");
    require(block.range.size() > 0, ErrorCode::ShapeMismatch, "engine step on empty tensor");
}

} // namespace

std::string to_string(ExecutionPath p) { return p == ExecutionPath::Naive ? "naive" : "fused"; }

ExecutionPath parse_path(const std::string& s) {
    if (s == "naive") return ExecutionPath::Naive;
    if (s == "fused") return ExecutionPath::Fused;
    throw Error(ErrorCode::InvalidArgument, "unknown execution path '" + s + "'");
}

// ---- LoptWeights -----------------------------------------------------------

std::size_t LoptWeights::input_dim() const { return layers.empty() ? 0 : std::size_t(layers.front().weight.cols()); }
std::size_t LoptWeights::output_dim() const { return layers.empty() ? 0 : std::size_t(layers.back().weight.rows()); }

std::size_t LoptWeights::max_width() const {
    std::size_t w = 0;
    for (const auto& l : layers) w = std::max(w, std::size_t(l.weight.rows()));
    return w;
}

std::vector<std::size_t> LoptWeights::topology() const {
    std::vector<std::size_t> t;
    if (layers.empty()) return t;
    t.push_back(input_dim());
    for (const auto& l : layers) t.push_back(std::size_t(l.weight.rows()));
    return t;
}

void LoptWeights::validate() const {
    require(!layers.empty(), ErrorCode::ShapeMismatch, "optimizer MLP has no layers");
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& layer = layers[l];
        require(layer.bias.size() == layer.weight.rows(), ErrorCode::ShapeMismatch,
                "layer " + std::to_string(l) + " bias length");
        if (l > 0)
            require(layer.weight.cols() == layers[l - 1].weight.rows(), ErrorCode::ShapeMismatch,
                    "layer " + std::to_string(l) + " input width does not chain");
        require(layer.weight.allFinite() && layer.bias.allFinite(), ErrorCode::NonFinite,
                "layer " + std::to_string(l) + " parameters");
    }
    require(output_dim() == 2, ErrorCode::ShapeMismatch, "optimizer MLP must end in 2 outputs");
    require(std::isfinite(alpha) && std::isfinite(beta_out), ErrorCode::NonFinite, "alpha / beta_out");
    betas.validate();
}

std::vector<std::size_t> LoptWeights::default_topology(const FeatureSetSpec& spec) {
    return {spec.d_feat, 32, 32, 2};
}

LoptWeights LoptWeights::zeros(const std::vector<std::size_t>& topology, const FeatureSetSpec& spec) {
    require(topology.size() >= 2, ErrorCode::InvalidArgument, "topology needs at least input and output");
    LoptWeights w;
    w.feature_set = spec.name();
    for (std::size_t l = 0; l + 1 < topology.size(); ++l)
        w.layers.push_back({Eigen::MatrixXf::Zero(Eigen::Index(topology[l + 1]), Eigen::Index(topology[l])),
                            Eigen::VectorXf::Zero(Eigen::Index(topology[l + 1]))});
    w.validate();
    return w;
}

LoptWeights LoptWeights::random(const std::vector<std::size_t>& topology, const FeatureSetSpec& spec,
                                std::uint64_t seed) {
    LoptWeights w = zeros(topology, spec);
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    for (auto& layer : w.layers) {
        const float s = 1.0f / std::sqrt(float(layer.weight.cols()));
        for (Eigen::Index i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = s * normal(rng);
    }
    return w;
}

void LoptWeights::save_into(NamedTensorFile& file, const std::string& prefix) const {
    validate();
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const std::string base = prefix + "layers/" + std::to_string(l) + "/";
        file.add(base + "weight", TensorEntry::from_tensor(ParamTensor(MatrixXf(layers[l].weight))));
        file.add(base + "bias", TensorEntry::from_tensor(ParamTensor(MatrixXf(layers[l].bias))));
    }
    const auto b = betas.as_array();
    nlohmann::json betas_json(std::vector<float>(b.begin(), b.end()));
    char buf[64];
    file.metadata[prefix + "num_layers"] = std::to_string(layers.size());
    std::snprintf(buf, sizeof buf, "%.17g", alpha);
    file.metadata[prefix + "alpha"] = buf;
    std::snprintf(buf, sizeof buf, "%.17g", beta_out);
    file.metadata[prefix + "beta_out"] = buf;
    file.metadata[prefix + "betas"] = betas_json.dump();
    file.metadata[prefix + "update_sign"] = update_sign == UpdateSign::Subtract ? "subtract" : "add";
    file.metadata["feature_set"] = feature_set;
    if (file.feature_set.empty()) file.feature_set = feature_set;
}

LoptWeights LoptWeights::load_from(const NamedTensorFile& file, const std::string& prefix) {
    auto meta = [&](const std::string& key) -> const std::string& {
        auto it = file.metadata.find(prefix + key);
        if (it == file.metadata.end()) throw Error(ErrorCode::MalformedHeader, "missing metadata '" + prefix + key + "'");
        return it->second;
    };
    LoptWeights w;
    try {
        const std::size_t n = std::stoul(meta("num_layers"));
        for (std::size_t l = 0; l < n; ++l) {
            const std::string base = prefix + "layers/" + std::to_string(l) + "/";
            const ParamTensor weight = file.at(base + "weight").to_tensor();
            const ParamTensor bias = file.at(base + "bias").to_tensor();
            require(bias.cols() == 1, ErrorCode::ShapeMismatch, "bias of layer " + std::to_string(l));
            w.layers.push_back({Eigen::MatrixXf(weight.matrix()), Eigen::VectorXf(bias.matrix())});
        }
        w.alpha = std::stod(meta("alpha"));
        w.beta_out = std::stod(meta("beta_out"));
        const auto b = nlohmann::json::parse(meta("betas")).get<std::vector<float>>();
        require(b.size() == 7, ErrorCode::MalformedHeader, "betas must list 7 coefficients");
        std::array<float, 7> arr{};
        std::copy(b.begin(), b.end(), arr.begin());
        w.betas = BetaConfig::from_array(arr);
        const std::string& sign = meta("update_sign");
        require(sign == "subtract" || sign == "add", ErrorCode::MalformedHeader, "update_sign '" + sign + "'");
        w.update_sign = sign == "subtract" ? UpdateSign::Subtract : UpdateSign::Add;
    } catch (const std::logic_error& e) {
        throw Error(ErrorCode::MalformedHeader, std::string("optimizer weights metadata: ") + e.what());
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::MalformedHeader, std::string("optimizer betas: ") + e.what());
    }
    auto fs = file.metadata.find("feature_set");
    w.feature_set = fs != file.metadata.end() ? fs->second : file.feature_set;
    FeatureSetSpec::from_name(w.feature_set);
    w.validate();
    return w;
}

NamedTensorFile LoptWeights::to_file() const {
    NamedTensorFile file;
    file.metadata["kind"] = "weights";
    save_into(file);
    return file;
}

// ---- single element --------------------------------------------------------

std::pair<float, float> mlp_forward(std::span<const float> feat, const LoptWeights& w) {
    w.validate();
    require(feat.size() == w.input_dim(), ErrorCode::ShapeMismatch,
            "feature vector of " + std::to_string(feat.size()) + " for MLP input " + std::to_string(w.input_dim()));
    Eigen::VectorXf h = Eigen::Map<const Eigen::VectorXf>(feat.data(), Eigen::Index(feat.size()));
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        Eigen::VectorXf next = w.layers[l].weight * h + w.layers[l].bias;
        if (l + 1 < w.layers.size()) next = next.cwiseMax(0.0f);
        h = std::move(next);
    }
    return {h[0], h[1]};
}

float apply_update(float theta, float direction, float magnitude, double alpha, double beta_out, UpdateSign sign) {
    require(std::isfinite(theta) && std::isfinite(direction) && std::isfinite(magnitude), ErrorCode::NonFinite,
            "apply_update inputs");
    const float delta = direction * std::exp(magnitude * static_cast<float>(alpha)) * static_cast<float>(beta_out);
    require(std::isfinite(delta), ErrorCode::NonFinite, "update overflowed");
    return sign == UpdateSign::Subtract ? theta - delta : theta + delta;
}

// ---- reports and pass counts ----------------------------------------------

KernelCount count_kernel_equivalents(ExecutionPath path, const FeatureSetSpec& spec, std::size_t mlp_layers) {
    KernelCount k;
    if (path == ExecutionPath::Naive) {
        k.feature_passes = spec.d_feat;
        k.reduction_passes = spec.d_feat;
        k.normalize_passes = 1;
        k.mlp_passes = mlp_layers;
        k.apply_passes = 1;
    } else {
        k.feature_passes = 1; // statistics pass
        k.apply_passes = 1;   // recompute + normalize + MLP + write
    }
    return k;
}

std::string UpdateReport::csv_header() {
    return "tensor,path,elements,max_abs_update,stats_ms,apply_ms,kernel_equivalents,scratch_bytes";
}

std::string UpdateReport::csv_row() const {
    std::ostringstream os;
    os << tensor << ',' << to_string(path) << ',' << elements << ',' << max_abs_update << ',' << stats_ms << ','
       << apply_ms << ',' << kernels.total() << ',' << scratch_high_water_bytes;
    return os.str();
}

// ---- naive path ------------------------------------------------------------

UpdateReport step_naive(const ElementBlock& block, std::span<float> out, const LoptWeights& weights,
                        const FeatureSetSpec& spec, const EngineConfig& config, ScratchTracker& tracker, float lr) {
    check_out(block, out);
    check_weights(weights, spec);
    const std::size_t n = block.range.size();
    const std::size_t d = spec.d_feat;
    const std::uint64_t live_before = tracker.live_bytes();
    tracker.reset_high_water();

    UpdateReport report;
    report.path = ExecutionPath::Naive;
    report.elements = n;
    report.kernels = count_kernel_equivalents(ExecutionPath::Naive, spec, weights.layers.size());

    auto t0 = Clock::now();
    const FeatureContext ctx = make_context(block, spec);
    if (n > std::numeric_limits<std::size_t>::max() / d)
        throw Error(ErrorCode::OutOfScratch, "feature matrix size overflows");
    ScratchBuffer<float> features(tracker, n * d, "naive feature matrix");
    materialize_features(block, ctx, features.span(), tracker);
    Eigen::Map<Eigen::MatrixXf> x(features.data(), Eigen::Index(n), Eigen::Index(d));

    FeatureStats stats(d);
    stats.count = n;
    for (std::size_t k = 0; k < d; ++k) stats.sumsq[k] = x.col(Eigen::Index(k)).cast<double>().squaredNorm();
    report.stats_ms = ms_since(t0);

    t0 = Clock::now();
    const auto factors = normalization_factors(stats, spec.eps_norm);
    for (std::size_t k = 0; k < d; ++k) x.col(Eigen::Index(k)) *= factors[k];

    const std::size_t rows = std::max<std::size_t>(1, std::min(config.naive_block_rows, n));
    const std::size_t width = weights.max_width();
    ScratchBuffer<float> ping_buf(tracker, rows * width, "naive MLP activations");
    ScratchBuffer<float> pong_buf(tracker, rows * width, "naive MLP activations");
    bool overflow = false;
    float max_abs = 0.0f;
    for (std::size_t b = 0; b < n; b += rows) {
        const std::size_t len = std::min(rows, n - b);
        // Activations for this row block live in the tracked buffers.
        Eigen::Map<Eigen::MatrixXf> ping(ping_buf.data(), Eigen::Index(len), Eigen::Index(width));
        Eigen::Map<Eigen::MatrixXf> pong(pong_buf.data(), Eigen::Index(len), Eigen::Index(width));
        const auto xb = x.middleRows(Eigen::Index(b), Eigen::Index(len));
        const std::size_t L = weights.layers.size();
        Eigen::Map<Eigen::MatrixXf>* cur = &ping;
        Eigen::Map<Eigen::MatrixXf>* nxt = &pong;
        for (std::size_t l = 0; l < L; ++l) {
            const auto& layer = weights.layers[l];
            const Eigen::Index outw = layer.weight.rows();
            auto dst = nxt->leftCols(outw);
            if (l == 0)
                dst.noalias() = xb * layer.weight.transpose();
            else
                dst.noalias() = cur->leftCols(layer.weight.cols()) * layer.weight.transpose();
            dst.rowwise() += layer.bias.transpose();
            if (l + 1 < L) dst = dst.cwiseMax(0.0f);
            std::swap(cur, nxt);
        }
        const float m = write_updates(cur->col(0).data(), cur->col(1).data(), len, weights, lr,
                                      block.param.data() + b, out.data() + b, overflow);
        max_abs = std::max(max_abs, m);
    }
    report.apply_ms = ms_since(t0);
    report.max_abs_update = max_abs;
    report.scratch_high_water_bytes = tracker.high_water_bytes() - live_before;
    require(!overflow, ErrorCode::NonFinite, "learned update overflowed");
    return report;
}

// ---- fused path ------------------------------------------------------------

FeatureStats fused_stats(const ElementBlock& block, const FeatureContext& ctx, const EngineConfig& config,
                         ScratchTracker& tracker) {
    const std::size_t d = ctx.d_feat;
    const std::size_t workers = std::max<std::size_t>(1, config.workers);
    const auto parts = split_range(block.range, workers);
    ScratchBuffer<double> partials(tracker, workers * d, "fused per-worker statistics");

    run_partitions(workers, [&](std::size_t p) {
        std::array<double, kMaxFeatures> acc{};
        accumulate_feature_squares(block, ctx, parts[p], std::span<double>(acc.data(), d));
        std::copy_n(acc.begin(), d, partials.data() + p * d);
    });

    // Fixed binary tree over worker partials.
    for (std::size_t stride = 1; stride < workers; stride *= 2)
        for (std::size_t p = 0; p + stride < workers; p += 2 * stride)
            for (std::size_t k = 0; k < d; ++k) partials[p * d + k] += partials[(p + stride) * d + k];

    FeatureStats stats(d);
    std::copy_n(partials.data(), d, stats.sumsq.begin());
    stats.count = block.range.size();
    return stats;
}

ApplyResult fused_apply(const ElementBlock& block, const FeatureContext& ctx, std::span<const float> factors,
                        const LoptWeights& weights, float lr, std::span<float> out, const EngineConfig& config,
                        ScratchTracker& tracker) {
    require(factors.size() == ctx.d_feat, ErrorCode::ShapeMismatch, "normalization factor count");
    const std::size_t workers = std::max<std::size_t>(1, config.workers);
    const auto parts = split_range(block.range, workers);
    std::vector<float> worker_max(workers, 0.0f);
    std::vector<char> worker_overflow(workers, 0);
    const PackedMlp mlp(weights, ctx, factors);
    const std::size_t width = std::max<std::size_t>(weights.max_width(), 2);
    const bool on_stack = width <= kMaxStackWidth;

    run_partitions(workers, [&](std::size_t p) {
        FeatureTile tile;
        alignas(64) float stack_ping[kMaxStackWidth * kLanes];
        alignas(64) float stack_pong[kMaxStackWidth * kLanes];
        float row_bias[kMaxStackWidth];
        std::optional<ScratchBuffer<float>> heap;
        float* ping = stack_ping;
        float* pong = stack_pong;
        float* bias = row_bias;
        if (!on_stack) {
            heap.emplace(tracker, width * (2 * kLanes + 1), "fused MLP activations");
            ping = heap->data();
            pong = ping + width * kLanes;
            bias = pong + width * kLanes;
        }
        float local_max = 0.0f;
        bool overflow = false;
        for_each_tile(block.shape, parts[p], [&](std::size_t idx, std::size_t len) {
            construct_feature_tile(idx, len, block, ctx, tile);
            const float* y = mlp.run(tile, ping, pong, bias);
            const std::size_t off = idx - block.range.begin;
            local_max = std::max(local_max, write_updates(y, y + kLanes, len, weights, lr, block.param.data() + off,
                                                          out.data() + off, overflow));
        });
        worker_max[p] = local_max;
        worker_overflow[p] = overflow;
    });

    ApplyResult result;
    for (std::size_t p = 0; p < workers; ++p) {
        require(!worker_overflow[p], ErrorCode::NonFinite, "learned update overflowed");
        result.max_abs_update = std::max(result.max_abs_update, worker_max[p]);
    }
    return result;
}

UpdateReport step_fused(const ElementBlock& block, std::span<float> out, const LoptWeights& weights,
                        const FeatureSetSpec& spec, const EngineConfig& config, ScratchTracker& tracker, float lr) {
    check_out(block, out);
    check_weights(weights, spec);
    const std::uint64_t live_before = tracker.live_bytes();
    tracker.reset_high_water();

    UpdateReport report;
    report.path = ExecutionPath::Fused;
    report.elements = block.range.size();
    report.kernels = count_kernel_equivalents(ExecutionPath::Fused, spec, weights.layers.size());

    auto t0 = Clock::now();
    const FeatureContext ctx = make_context(block, spec);
    const FeatureStats stats = fused_stats(block, ctx, config, tracker);
    report.stats_ms = ms_since(t0);

    t0 = Clock::now();
    const auto factors = normalization_factors(stats, spec.eps_norm);
    const ApplyResult applied = fused_apply(block, ctx, factors, weights, lr, out, config, tracker);
    report.apply_ms = ms_since(t0);
    report.max_abs_update = applied.max_abs_update;
    report.scratch_high_water_bytes = tracker.high_water_bytes() - live_before;
    return report;
}

UpdateReport engine_step(ExecutionPath path, const ElementBlock& block, std::span<float> out,
                         const LoptWeights& weights, const FeatureSetSpec& spec, const EngineConfig& config,
                         ScratchTracker& tracker, float lr) {
    return path == ExecutionPath::Naive ? step_naive(block, out, weights, spec, config, tracker, lr)
                                        : step_fused(block, out, weights, spec, config, tracker, lr);
}

namespace {

template <typename StepFn>
std::pair<ParamTensor, UpdateReport> step_value(StepFn&& fn, const ParamTensor& w, const ParamTensor& g,
                                                const OptState& state, const EngineConfig& config) {
    const ElementBlock block = make_block(w, g, state);
    ScratchTracker tracker(config.scratch_cap_bytes);
    MatrixXf next = w.matrix();
    UpdateReport report = fn(block, std::span<float>(next.data(), w.size()), tracker);
    return {ParamTensor(std::move(next)), report};
}

} // namespace

std::pair<ParamTensor, UpdateReport> step_naive(const ParamTensor& w, const ParamTensor& g, const OptState& state,
                                                const LoptWeights& weights, const FeatureSetSpec& spec,
                                                const EngineConfig& config) {
    return step_value(
        [&](const ElementBlock& b, std::span<float> out, ScratchTracker& t) {
            return step_naive(b, out, weights, spec, config, t);
        },
        w, g, state, config);
}

std::pair<ParamTensor, UpdateReport> step_fused(const ParamTensor& w, const ParamTensor& g, const OptState& state,
                                                const LoptWeights& weights, const FeatureSetSpec& spec,
                                                const EngineConfig& config) {
    return step_value(
        [&](const ElementBlock& b, std::span<float> out, ScratchTracker& t) {
            return step_fused(b, out, weights, spec, config, t);
        },
        w, g, state, config);
}

} // namespace lopt
