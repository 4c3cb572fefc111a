// SPDX-License-Identifier: Apache-2.0
#include "lopt/features.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>

namespace lopt {

namespace {

using ConstSegment = Eigen::Map<const Eigen::ArrayXf>;

ConstSegment segment(std::span<const float> s, std::size_t offset, std::size_t len) {
    return {s.data() + offset, Eigen::Index(len)};
}

// The scalar formulas below and the array expressions in
// construct_feature_tile perform the same IEEE operations in the same order.

inline float normalized_momentum(float m, float v, float eps) { return m / std::sqrt(v + eps); }
inline float rsqrt_guarded(float x, float eps) { return 1.0f / std::sqrt(x + eps); }
inline float factored_scale(float mean_r, float r, float c, float eps) { return std::sqrt(mean_r / (r * c + eps)); }

} // namespace

FeatureSetSpec FeatureSetSpec::small_fc_lopt() { return FeatureSetSpec{}; }

FeatureSetSpec FeatureSetSpec::velo_mlp() {
    FeatureSetSpec s;
    s.id = FeatureSetId::VeloMlp;
    s.d_feat = 29;
    return s;
}

FeatureSetSpec FeatureSetSpec::from_name(const std::string& name) {
    if (name == "small_fc_lopt") return small_fc_lopt();
    if (name == "velo_mlp") return velo_mlp();
    throw Error(ErrorCode::FeatureSetMismatch, "unknown feature set '" + name + "'");
}

std::string FeatureSetSpec::name() const { return id == FeatureSetId::SmallFcLopt ? "small_fc_lopt" : "velo_mlp"; }

std::vector<std::string> FeatureSetSpec::column_names() const {
    std::vector<std::string> names;
    for (int i = 1; i <= 3; ++i) names.push_back("M" + std::to_string(i));
    names.push_back("V");
    for (int i = 1; i <= 3; ++i) names.push_back("r" + std::to_string(i));
    for (int i = 1; i <= 3; ++i) names.push_back("c" + std::to_string(i));
    for (int i = 1; i <= 3; ++i) names.push_back("M" + std::to_string(i) + "/sqrt(V)");
    names.push_back("1/sqrt(V)");
    for (int i = 1; i <= 3; ++i) names.push_back("1/sqrt(r" + std::to_string(i) + ")");
    for (int i = 1; i <= 3; ++i) names.push_back("1/sqrt(c" + std::to_string(i) + ")");
    for (int i = 1; i <= 3; ++i) names.push_back("g*adafactor" + std::to_string(i));
    for (int i = 1; i <= 3; ++i) names.push_back("M" + std::to_string(i) + "*adafactor" + std::to_string(i));
    if (has_time_features()) {
        for (double x : time_xs) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "tanh(t/%g)", x);
            names.emplace_back(buf);
        }
    }
    names.push_back("W");
    names.push_back("g");
    if (!has_time_features()) names.push_back("clip(g)");
    assert(names.size() == d_feat);
    return names;
}

void ElementBlock::validate() const {
    const std::size_t n = range.size();
    require(range.begin <= range.end && range.end <= shape.size(), ErrorCode::ShapeMismatch,
            "element range outside tensor " + to_string(shape));
    require(param.size() == n && grad.size() == n && second_moment.size() == n, ErrorCode::ShapeMismatch,
            "element block slice lengths");
    for (const auto& m : momentum) require(m.size() == n, ErrorCode::ShapeMismatch, "momentum slice length");
    for (std::size_t i = 0; i < kNumFactors; ++i) {
        require(row_factor[i].size() == shape.rows, ErrorCode::ShapeMismatch, "row factor length");
        require(col_factor[i].size() == shape.cols, ErrorCode::ShapeMismatch, "column factor length");
    }
}

ElementBlock ElementBlock::subrange(ElementRange sub) const {
    require(sub.begin >= range.begin && sub.end <= range.end && sub.begin <= sub.end, ErrorCode::ShapeMismatch,
            "subrange outside block");
    const std::size_t off = sub.begin - range.begin;
    const std::size_t len = sub.size();
    ElementBlock b = *this;
    b.range = sub;
    b.param = param.subspan(off, len);
    b.grad = grad.subspan(off, len);
    for (std::size_t i = 0; i < kNumMomenta; ++i) b.momentum[i] = momentum[i].subspan(off, len);
    b.second_moment = second_moment.subspan(off, len);
    return b;
}

ElementBlock make_block(const ParamTensor& w, const ParamTensor& g, const OptState& state) {
    require_same_shape(w.shape(), g.shape(), "gradient");
    require_same_shape(w.shape(), state.shape(), "optimizer state");
    ElementBlock b;
    b.shape = w.shape();
    b.range = {0, w.size()};
    b.param = w.data();
    b.grad = g.data();
    for (std::size_t i = 0; i < kNumMomenta; ++i) b.momentum[i] = state.momentum[i].data();
    b.second_moment = state.second_moment.data();
    for (std::size_t i = 0; i < kNumFactors; ++i) {
        b.row_factor[i] = state.row_factor[i].data();
        b.col_factor[i] = state.col_factor[i].data();
    }
    b.step = state.step;
    b.validate();
    return b;
}

FeatureContext make_context(const ElementBlock& block, const FeatureSetSpec& spec) {
    require(spec.d_feat == (spec.has_time_features() ? 39u : 29u), ErrorCode::FeatureSetMismatch,
            "feature count does not match feature set");
    require(block.shape.rows > 0 && block.shape.cols > 0, ErrorCode::ShapeMismatch, "empty tensor");
    FeatureContext ctx;
    for (std::size_t i = 0; i < kNumFactors; ++i) {
        double sum = 0.0;
        for (float r : block.row_factor[i]) sum += r;
        ctx.mean_row_factor[i] = static_cast<float>(sum / double(block.shape.rows));
    }
    for (std::size_t k = 0; k < kNumTimeFeatures; ++k)
        ctx.time_values[k] = static_cast<float>(std::tanh(double(block.step) / spec.time_xs[k]));
    ctx.eps = spec.eps_recip;
    ctx.clip = spec.clip_bound;
    ctx.d_feat = spec.d_feat;
    ctx.time_features = spec.has_time_features();
    return ctx;
}

FeatureStats& FeatureStats::operator+=(const FeatureStats& other) {
    require(sumsq.size() == other.sumsq.size(), ErrorCode::ShapeMismatch, "feature stats width");
    for (std::size_t k = 0; k < sumsq.size(); ++k) sumsq[k] += other.sumsq[k];
    count += other.count;
    return *this;
}

void construct_features_at(std::size_t idx, const ElementBlock& block, const FeatureContext& ctx,
                           std::span<float> out) {
    require(idx >= block.range.begin && idx < block.range.end, ErrorCode::InvalidArgument,
            "element index outside block");
    require(out.size() == ctx.d_feat, ErrorCode::ShapeMismatch, "feature output length");
    const std::size_t local = idx - block.range.begin;
    const std::size_t row = idx / block.shape.cols;
    const std::size_t col = idx % block.shape.cols;
    const float eps = ctx.eps;
    const float g = block.grad[local];
    const float v = block.second_moment[local];
    float m[kNumMomenta];
    for (std::size_t j = 0; j < kNumMomenta; ++j) m[j] = block.momentum[j][local];

    std::size_t k = 0;
    for (std::size_t j = 0; j < kNumMomenta; ++j) out[k++] = m[j];
    out[k++] = v;
    for (std::size_t i = 0; i < kNumFactors; ++i) out[k++] = block.row_factor[i][row];
    for (std::size_t i = 0; i < kNumFactors; ++i) out[k++] = block.col_factor[i][col];
    for (std::size_t j = 0; j < kNumMomenta; ++j) out[k++] = normalized_momentum(m[j], v, eps);
    out[k++] = rsqrt_guarded(v, eps);
    for (std::size_t i = 0; i < kNumFactors; ++i) out[k++] = rsqrt_guarded(block.row_factor[i][row], eps);
    for (std::size_t i = 0; i < kNumFactors; ++i) out[k++] = rsqrt_guarded(block.col_factor[i][col], eps);
    float scale[kNumFactors];
    for (std::size_t i = 0; i < kNumFactors; ++i)
        scale[i] = factored_scale(ctx.mean_row_factor[i], block.row_factor[i][row], block.col_factor[i][col], eps);
    for (std::size_t i = 0; i < kNumFactors; ++i) out[k++] = g * scale[i];
    for (std::size_t i = 0; i < kNumFactors; ++i) out[k++] = m[i] * scale[i];
    if (ctx.time_features)
        for (float tv : ctx.time_values) out[k++] = tv;
    out[k++] = block.param[local];
    out[k++] = g;
    if (!ctx.time_features) out[k++] = std::clamp(g, -ctx.clip, ctx.clip);
    assert(k == ctx.d_feat);
}

std::vector<float> construct_features_at(std::size_t idx, const ParamTensor& w, const ParamTensor& g,
                                         const OptState& state, const FeatureSetSpec& spec) {
    const ElementBlock block = make_block(w, g, state);
    const FeatureContext ctx = make_context(block, spec);
    std::vector<float> out(spec.d_feat);
    construct_features_at(idx, block, ctx, out);
    for (float x : out) require(std::isfinite(x), ErrorCode::NonFinite, "feature value");
    return out;
}

void construct_feature_tile(std::size_t idx, std::size_t len, const ElementBlock& block, const FeatureContext& ctx,
                            FeatureTile& tile) {
    assert(len >= 1 && len <= std::size_t(kTileWidth));
    const std::size_t local = idx - block.range.begin;
    const std::size_t row = idx / block.shape.cols;
    const std::size_t col = idx % block.shape.cols;
    assert(col + len <= block.shape.cols);
    const float eps = ctx.eps;
    const Eigen::Index n = Eigen::Index(len);
    tile.resize(kTileWidth, Eigen::Index(ctx.d_feat));
    auto put = [&](std::size_t k) { return tile.col(Eigen::Index(k)).head(n).array(); };

    const auto g = segment(block.grad, local, len);
    const auto v = segment(block.second_moment, local, len);

    for (std::size_t j = 0; j < kNumMomenta; ++j)
        put(column::kMomentum + j) = segment(block.momentum[j], local, len);
    put(column::kSecondMoment) = v;
    for (std::size_t i = 0; i < kNumFactors; ++i) {
        put(column::kRowFactor + i).setConstant(block.row_factor[i][row]);
        put(column::kColFactor + i) = segment(block.col_factor[i], col, len);
    }
    for (std::size_t j = 0; j < kNumMomenta; ++j)
        put(column::kNormalizedMomentum + j) = segment(block.momentum[j], local, len) / (v + eps).sqrt();
    put(column::kRsqrtSecondMoment) = (v + eps).sqrt().inverse();
    for (std::size_t i = 0; i < kNumFactors; ++i) {
        put(column::kRsqrtRowFactor + i).setConstant(rsqrt_guarded(block.row_factor[i][row], eps));
        put(column::kRsqrtColFactor + i) = (segment(block.col_factor[i], col, len) + eps).sqrt().inverse();
    }
    for (std::size_t i = 0; i < kNumFactors; ++i) {
        const float r = block.row_factor[i][row];
        const Eigen::Array<float, Eigen::Dynamic, 1, 0, kTileWidth, 1> scale =
            (ctx.mean_row_factor[i] / (r * segment(block.col_factor[i], col, len) + eps)).sqrt();
        put(column::kAdafactorGrad + i) = g * scale;
        put(column::kAdafactorMomentum + i) = segment(block.momentum[i], local, len) * scale;
    }
    std::size_t k = column::kTime;
    if (ctx.time_features)
        for (float tv : ctx.time_values) put(k++).setConstant(tv);
    put(k++) = segment(block.param, local, len);
    put(k++) = g;
    if (!ctx.time_features) put(k++) = g.max(-ctx.clip).min(ctx.clip);
    assert(k == ctx.d_feat);
    if (n < kTileWidth) tile.bottomRows(kTileWidth - n).setZero();
}

void materialize_features(const ElementBlock& block, const FeatureContext& ctx, std::span<float> x,
                          ScratchTracker& tracker) {
    const std::size_t n = block.range.size();
    require(x.size() == n * ctx.d_feat, ErrorCode::ShapeMismatch, "feature matrix size");
    const float eps = ctx.eps;
    const Eigen::Index len = Eigen::Index(n);
    auto col = [&](std::size_t k) { return Eigen::Map<Eigen::ArrayXf>(x.data() + k * n, len); };
    auto all = [&](std::span<const float> s) { return ConstSegment(s.data(), len); };

    // Calls fn(offset_in_block, row, first_col, run_length) per row run.
    auto each_row = [&](auto&& fn) {
        std::size_t idx = block.range.begin;
        while (idx < block.range.end) {
            const std::size_t row = idx / block.shape.cols;
            const std::size_t c0 = idx % block.shape.cols;
            const std::size_t run = std::min(block.shape.cols - c0, block.range.end - idx);
            fn(idx - block.range.begin, row, c0, run);
            idx += run;
        }
    };

    const auto g = all(block.grad);
    const auto v = all(block.second_moment);
    for (std::size_t j = 0; j < kNumMomenta; ++j) col(column::kMomentum + j) = all(block.momentum[j]);
    col(column::kSecondMoment) = v;
    for (std::size_t i = 0; i < kNumFactors; ++i) {
        auto dst = col(column::kRowFactor + i);
        each_row([&](std::size_t off, std::size_t row, std::size_t, std::size_t run) {
            dst.segment(Eigen::Index(off), Eigen::Index(run)).setConstant(block.row_factor[i][row]);
        });
    }
    for (std::size_t i = 0; i < kNumFactors; ++i) {
        auto dst = col(column::kColFactor + i);
        each_row([&](std::size_t off, std::size_t, std::size_t c0, std::size_t run) {
            dst.segment(Eigen::Index(off), Eigen::Index(run)) = segment(block.col_factor[i], c0, run);
        });
    }
    for (std::size_t j = 0; j < kNumMomenta; ++j)
        col(column::kNormalizedMomentum + j) = all(block.momentum[j]) / (v + eps).sqrt();
    col(column::kRsqrtSecondMoment) = (v + eps).sqrt().inverse();
    for (std::size_t i = 0; i < kNumFactors; ++i) {
        auto dst = col(column::kRsqrtRowFactor + i);
        each_row([&](std::size_t off, std::size_t row, std::size_t, std::size_t run) {
            dst.segment(Eigen::Index(off), Eigen::Index(run)).setConstant(rsqrt_guarded(block.row_factor[i][row], eps));
        });
    }
    for (std::size_t i = 0; i < kNumFactors; ++i) {
        auto dst = col(column::kRsqrtColFactor + i);
        each_row([&](std::size_t off, std::size_t, std::size_t c0, std::size_t run) {
            dst.segment(Eigen::Index(off), Eigen::Index(run)) = (segment(block.col_factor[i], c0, run) + eps).sqrt().inverse();
        });
    }
    ScratchBuffer<float> scale_buf(tracker, n, "adafactor scale temporary");
    Eigen::Map<Eigen::ArrayXf> scale(scale_buf.data(), len);
    for (std::size_t i = 0; i < kNumFactors; ++i) {
        const float mean_r = ctx.mean_row_factor[i];
        each_row([&](std::size_t off, std::size_t row, std::size_t c0, std::size_t run) {
            const float r = block.row_factor[i][row];
            scale.segment(Eigen::Index(off), Eigen::Index(run)) =
                (mean_r / (r * segment(block.col_factor[i], c0, run) + eps)).sqrt();
        });
        col(column::kAdafactorGrad + i) = g * scale;
        col(column::kAdafactorMomentum + i) = all(block.momentum[i]) * scale;
    }
    std::size_t k = column::kTime;
    if (ctx.time_features)
        for (float tv : ctx.time_values) col(k++).setConstant(tv);
    col(k++) = all(block.param);
    col(k++) = g;
    if (!ctx.time_features) col(k++) = g.max(-ctx.clip).min(ctx.clip);
    assert(k == ctx.d_feat);
}

void accumulate_feature_squares(const ElementBlock& block, const FeatureContext& ctx, ElementRange sub,
                                std::span<double> sums) {
    require(sums.size() == ctx.d_feat, ErrorCode::ShapeMismatch, "stats accumulator width");
    // Lane-wise accumulators; padded lanes of a short tile are zero.
    FeatureTile tile;
    Eigen::Matrix<double, kTileWidth, Eigen::Dynamic, Eigen::ColMajor, kTileWidth, int(kMaxFeatures)> acc =
        Eigen::MatrixXd::Zero(kTileWidth, Eigen::Index(ctx.d_feat));
    for_each_tile(block.shape, sub, [&](std::size_t idx, std::size_t len) {
        construct_feature_tile(idx, len, block, ctx, tile);
        acc.array() += tile.cast<double>().array().square();
    });
    for (std::size_t k = 0; k < ctx.d_feat; ++k) sums[k] += acc.col(Eigen::Index(k)).sum();
}

FeatureStats compute_squared_average(const ElementBlock& block, const FeatureSetSpec& spec) {
    block.validate();
    require(block.range.size() > 0, ErrorCode::ShapeMismatch, "compute_squared_average on empty tensor");
    const FeatureContext ctx = make_context(block, spec);
    FeatureStats stats(spec.d_feat);
    accumulate_feature_squares(block, ctx, block.range, stats.sumsq);
    stats.count = block.range.size();
    return stats;
}

std::vector<float> normalization_factors(const FeatureStats& stats, double eps_norm) {
    require(stats.count > 0, ErrorCode::InvalidArgument, "normalization with zero count");
    std::vector<float> factors(stats.sumsq.size());
    constexpr double kShrink = 1.0 - 0x1p-23;
    for (std::size_t k = 0; k < factors.size(); ++k) {
        const double exact = kShrink / std::sqrt(stats.sumsq[k] / double(stats.count) + eps_norm);
        float f = static_cast<float>(exact);
        if (double(f) > exact) f = std::nextafter(f, 0.0f);
        factors[k] = f;
    }
    return factors;
}

std::vector<float> normalize_features(std::span<const float> feat, const FeatureStats& stats,
                                      const FeatureSetSpec& spec) {
    require(feat.size() == spec.d_feat && stats.sumsq.size() == spec.d_feat, ErrorCode::ShapeMismatch,
            "normalize_features width");
    const auto factors = normalization_factors(stats, spec.eps_norm);
    std::vector<float> out(feat.size());
    for (std::size_t k = 0; k < feat.size(); ++k) out[k] = feat[k] * factors[k];
    return out;
}

ParamTensor adafactor_scale(std::span<const float> r, std::span<const float> c, float eps) {
    require(!r.empty() && !c.empty(), ErrorCode::ShapeMismatch, "adafactor_scale on empty factors");
    double sum = 0.0;
    for (float x : r) sum += x;
    const float mean_r = static_cast<float>(sum / double(r.size()));
    MatrixXf s(Eigen::Index(r.size()), Eigen::Index(c.size()));
    for (std::size_t a = 0; a < r.size(); ++a)
        for (std::size_t b = 0; b < c.size(); ++b) s(Eigen::Index(a), Eigen::Index(b)) = factored_scale(mean_r, r[a], c[b], eps);
    return ParamTensor(std::move(s));
}

} // namespace lopt
