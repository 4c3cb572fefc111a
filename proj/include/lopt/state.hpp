// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lopt/tensor.hpp"
#include "lopt/tensor_file.hpp"

namespace lopt {

inline constexpr std::size_t kNumMomenta = 3;
inline constexpr std::size_t kNumFactors = 3;

/// EMA coefficients for the accumulators. Defaults are placeholders; real
/// values come with the optimizer weights.
struct BetaConfig {
    std::array<float, kNumMomenta> momentum{0.1f, 0.5f, 0.9f};
    float second_moment = 0.999f;
    std::array<float, kNumFactors> adafactor{0.9f, 0.99f, 0.999f};

    /// Throws InvalidArgument unless every coefficient is in [0, 1].
    void validate() const;
    std::array<float, 7> as_array() const;
    static BetaConfig from_array(const std::array<float, 7>& b);
    bool operator==(const BetaConfig&) const = default;
};

/// Accumulators for one parameter tensor of shape m x n.
///
/// row_factor[i] is m x 1 and col_factor[i] is 1 x n. `step` counts completed
/// state_step calls; a fresh state has step 0.
struct OptState {
    std::array<ParamTensor, kNumMomenta> momentum;
    ParamTensor second_moment;
    std::array<ParamTensor, kNumFactors> row_factor;
    std::array<ParamTensor, kNumFactors> col_factor;
    std::uint64_t step = 0;

    static OptState zeros(Shape shape);

    Shape shape() const noexcept { return second_moment.shape(); }
    bool bit_equal(const OptState& other) const;
};

/// Bytes of f32 accumulator storage for a tensor of this shape.
std::uint64_t state_bytes(Shape shape);

ParamTensor update_momentum(const ParamTensor& m_prev, const ParamTensor& g, float beta);
ParamTensor update_second_moment(const ParamTensor& v_prev, const ParamTensor& g, float beta);
std::pair<ParamTensor, ParamTensor> update_adafactor(const ParamTensor& r_prev, const ParamTensor& c_prev,
                                                     const ParamTensor& g, float beta);

/// Advances every accumulator by one gradient and increments step.
OptState state_step(const OptState& state, const ParamTensor& g, const BetaConfig& betas);
void state_step_inplace(OptState& state, const ParamTensor& g, const BetaConfig& betas);

// Range-level building blocks, shared by the whole-tensor update above and
// the sharded steps in distsim.

/// m <- beta * m + (1 - beta) * g
void ema_momentum(std::span<float> m, std::span<const float> g, float beta);
/// v <- beta * v + (1 - beta) * g^2
void ema_second_moment(std::span<float> v, std::span<const float> g, float beta);

/// Per-row and per-column sums of g^2 in double precision.
struct SquareSums {
    std::vector<double> rows;
    std::vector<double> cols;

    explicit SquareSums(Shape shape) : rows(shape.rows, 0.0), cols(shape.cols, 0.0) {}
    SquareSums& operator+=(const SquareSums& other);
};

/// Adds g^2 for elements [range) into sums. `grad` holds exactly those
/// elements (grad[0] is flat element range.begin).
void accumulate_square_sums(Shape shape, ElementRange range, std::span<const float> grad, SquareSums& sums);

/// f <- beta * f + (1 - beta) * (sums / count)
void ema_factor(std::span<float> factor, std::span<const double> sums, double count, float beta);

/// Throws NonFinite naming `what` if any gradient entry is NaN/Inf.
void require_finite(std::span<const float> g, const std::string& what);

void save_state(NamedTensorFile& file, const std::string& tensor_name, const OptState& state);
OptState load_state(const NamedTensorFile& file, const std::string& tensor_name);

} // namespace lopt
