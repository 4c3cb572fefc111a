// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lopt/scratch.hpp"
#include "lopt/state.hpp"
#include "lopt/tensor.hpp"

namespace lopt {

enum class FeatureSetId { SmallFcLopt, VeloMlp };

inline constexpr std::size_t kMaxFeatures = 39;
inline constexpr std::size_t kNumTimeFeatures = 11;

/// Describes the per-element input columns of the optimizer MLP.
///
/// Column layout (both sets share columns 0..25):
///
///    0..2   momenta M1..M3
///    3      second moment V
///    4..6   row factors r1..r3, broadcast along the row
///    7..9   column factors c1..c3, broadcast along the column
///   10..12  M_j / sqrt(V + eps)
///   13      1 / sqrt(V + eps)
///   14..16  1 / sqrt(r_i + eps)
///   17..19  1 / sqrt(c_i + eps)
///   20..22  g   * sqrt(mean(r_i) / (r_i c_i + eps))
///   23..25  M_i * sqrt(mean(r_i) / (r_i c_i + eps))
///
/// small_fc_lopt (39): 26..36 tanh(t / x) for the eleven horizons, 37 W, 38 g.
/// VeLO MLP (29):      26 W, 27 g, 28 clip(g, -0.1, 0.1).
struct FeatureSetSpec {
    FeatureSetId id = FeatureSetId::SmallFcLopt;
    std::size_t d_feat = 39;
    std::array<double, kNumTimeFeatures> time_xs{1, 3, 10, 30, 100, 300, 1000, 3000, 1e4, 3e4, 1e5};
    float clip_bound = 0.1f;
    float eps_recip = 1e-12f;
    double eps_norm = 1e-5;

    static FeatureSetSpec small_fc_lopt();
    static FeatureSetSpec velo_mlp();
    /// Accepts "small_fc_lopt" or "velo_mlp"; throws FeatureSetMismatch.
    static FeatureSetSpec from_name(const std::string& name);

    std::string name() const;
    bool has_time_features() const noexcept { return id == FeatureSetId::SmallFcLopt; }
    std::size_t param_column() const noexcept { return has_time_features() ? 37 : 26; }
    std::size_t grad_column() const noexcept { return param_column() + 1; }
    std::vector<std::string> column_names() const;
};

namespace column {
inline constexpr std::size_t kMomentum = 0;
inline constexpr std::size_t kSecondMoment = 3;
inline constexpr std::size_t kRowFactor = 4;
inline constexpr std::size_t kColFactor = 7;
inline constexpr std::size_t kNormalizedMomentum = 10;
inline constexpr std::size_t kRsqrtSecondMoment = 13;
inline constexpr std::size_t kRsqrtRowFactor = 14;
inline constexpr std::size_t kRsqrtColFactor = 17;
inline constexpr std::size_t kAdafactorGrad = 20;
inline constexpr std::size_t kAdafactorMomentum = 23;
inline constexpr std::size_t kTime = 26;
} // namespace column

/// Read-only view of one tensor's step inputs over a range of flat elements.
/// param/grad/momentum/second_moment hold exactly range.size() values
/// starting at flat index range.begin; the factor vectors are always whole.
struct ElementBlock {
    Shape shape;
    ElementRange range;
    std::span<const float> param;
    std::span<const float> grad;
    std::array<std::span<const float>, kNumMomenta> momentum;
    std::span<const float> second_moment;
    std::array<std::span<const float>, kNumFactors> row_factor;
    std::array<std::span<const float>, kNumFactors> col_factor;
    std::uint64_t step = 0;

    void validate() const;
    ElementBlock subrange(ElementRange sub) const;
};

ElementBlock make_block(const ParamTensor& w, const ParamTensor& g, const OptState& state);

/// Per-tensor scalars every element's features need: the row-factor means
/// and the time features. Computed once per step.
struct FeatureContext {
    std::array<float, kNumFactors> mean_row_factor{};
    std::array<float, kNumTimeFeatures> time_values{};
    float eps = 1e-12f;
    float clip = 0.1f;
    std::size_t d_feat = 0;
    bool time_features = true;
};

FeatureContext make_context(const ElementBlock& block, const FeatureSetSpec& spec);

/// Sum over elements of each feature squared, plus the element count.
struct FeatureStats {
    std::vector<double> sumsq;
    std::uint64_t count = 0;

    FeatureStats() = default;
    explicit FeatureStats(std::size_t d_feat) : sumsq(d_feat, 0.0) {}
    FeatureStats& operator+=(const FeatureStats& other);
};

/// Features for one flat element index (absolute, within block.range).
void construct_features_at(std::size_t idx, const ElementBlock& block, const FeatureContext& ctx,
                           std::span<float> out);
std::vector<float> construct_features_at(std::size_t idx, const ParamTensor& w, const ParamTensor& g,
                                         const OptState& state, const FeatureSetSpec& spec);

inline constexpr int kTileWidth = 32;

/// kTileWidth x d_feat, one element per row, column-major so each feature is
/// a contiguous run of kTileWidth lanes. Stack resident.
using FeatureTile = Eigen::Matrix<float, kTileWidth, Eigen::Dynamic, Eigen::ColMajor, kTileWidth, int(kMaxFeatures)>;

/// Features for `len` consecutive elements of one row, starting at flat index
/// `idx`, in rows 0..len-1; rows past len are zero. Bitwise identical to
/// construct_features_at per element.
void construct_feature_tile(std::size_t idx, std::size_t len, const ElementBlock& block, const FeatureContext& ctx,
                            FeatureTile& tile);

/// Calls fn(idx, len) for row-contained runs of at most kTileWidth elements
/// covering `range` in order.
template <typename Fn>
void for_each_tile(Shape shape, ElementRange range, Fn&& fn) {
    std::size_t idx = range.begin;
    while (idx < range.end) {
        const std::size_t row_end = (idx / shape.cols + 1) * shape.cols;
        const std::size_t stop = row_end < range.end ? row_end : range.end;
        while (idx < stop) {
            const std::size_t len = stop - idx < std::size_t(kTileWidth) ? stop - idx : std::size_t(kTileWidth);
            fn(idx, len);
            idx += len;
        }
    }
}

/// Writes the block's full feature matrix into `x` (range.size() x d_feat,
/// column-major), one bulk pass per column. Per-element values are bitwise
/// identical to construct_features_at. Borrows one range-sized temporary
/// from `tracker`.
void materialize_features(const ElementBlock& block, const FeatureContext& ctx, std::span<float> x,
                          ScratchTracker& tracker);

/// Adds feature squares for elements of `sub` (inside block.range) into sums.
void accumulate_feature_squares(const ElementBlock& block, const FeatureContext& ctx, ElementRange sub,
                                std::span<double> sums);

/// Single-accumulator streaming reduction over the whole block.
FeatureStats compute_squared_average(const ElementBlock& block, const FeatureSetSpec& spec);

/// Per-column multipliers approximating 1 / sqrt(sumsq / count + eps_norm).
/// Each is the largest float not above (1 - 2^-23) times the exact value, so
/// the second moment of a normalized column never exceeds one.
std::vector<float> normalization_factors(const FeatureStats& stats, double eps_norm);

std::vector<float> normalize_features(std::span<const float> feat, const FeatureStats& stats,
                                      const FeatureSetSpec& spec);

/// S[a, b] = sqrt(mean(r) / (r[a] c[b] + eps)).
ParamTensor adafactor_scale(std::span<const float> r, std::span<const float> c, float eps);

} // namespace lopt
