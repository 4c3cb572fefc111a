// SPDX-License-Identifier: Apache-2.0
#include "lopt/state.hpp"

#include <algorithm>
#include <cmath>

namespace lopt {

namespace {

using ArrayMap = Eigen::Map<Eigen::ArrayXf>;
using ConstArrayMap = Eigen::Map<const Eigen::ArrayXf>;

ArrayMap as_array(std::span<float> s) { return {s.data(), Eigen::Index(s.size())}; }
ConstArrayMap as_array(std::span<const float> s) { return {s.data(), Eigen::Index(s.size())}; }

void check_beta(float beta, const char* what) {
    if (!(beta >= 0.0f && beta <= 1.0f))
        throw Error(ErrorCode::InvalidArgument, std::string(what) + " beta " + std::to_string(beta) + " not in [0,1]");
}

} // namespace

void BetaConfig::validate() const {
    for (float b : momentum) check_beta(b, "momentum");
    check_beta(second_moment, "second moment");
    for (float b : adafactor) check_beta(b, "adafactor");
}

std::array<float, 7> BetaConfig::as_array() const {
    return {momentum[0], momentum[1], momentum[2], second_moment, adafactor[0], adafactor[1], adafactor[2]};
}

BetaConfig BetaConfig::from_array(const std::array<float, 7>& b) {
    BetaConfig c;
    c.momentum = {b[0], b[1], b[2]};
    c.second_moment = b[3];
    c.adafactor = {b[4], b[5], b[6]};
    c.validate();
    return c;
}

OptState OptState::zeros(Shape shape) {
    OptState s;
    for (auto& m : s.momentum) m = ParamTensor(shape.rows, shape.cols, 0.0f);
    s.second_moment = ParamTensor(shape.rows, shape.cols, 0.0f);
    for (auto& r : s.row_factor) r = ParamTensor(shape.rows, 1, 0.0f);
    for (auto& c : s.col_factor) c = ParamTensor(1, shape.cols, 0.0f);
    return s;
}

bool OptState::bit_equal(const OptState& other) const {
    if (step != other.step || !second_moment.bit_equal(other.second_moment)) return false;
    for (std::size_t i = 0; i < kNumMomenta; ++i)
        if (!momentum[i].bit_equal(other.momentum[i])) return false;
    for (std::size_t i = 0; i < kNumFactors; ++i)
        if (!row_factor[i].bit_equal(other.row_factor[i]) || !col_factor[i].bit_equal(other.col_factor[i]))
            return false;
    return true;
}

std::uint64_t state_bytes(Shape shape) {
    return (4 * std::uint64_t(shape.size()) + kNumFactors * std::uint64_t(shape.rows + shape.cols)) * sizeof(float);
}

void ema_momentum(std::span<float> m, std::span<const float> g, float beta) {
    as_array(m) = beta * as_array(m) + (1.0f - beta) * as_array(g);
}

void ema_second_moment(std::span<float> v, std::span<const float> g, float beta) {
    as_array(v) = beta * as_array(v) + (1.0f - beta) * as_array(g).square();
}

SquareSums& SquareSums::operator+=(const SquareSums& other) {
    require(rows.size() == other.rows.size() && cols.size() == other.cols.size(), ErrorCode::ShapeMismatch,
            "square sums");
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] += other.rows[i];
    for (std::size_t j = 0; j < cols.size(); ++j) cols[j] += other.cols[j];
    return *this;
}

void accumulate_square_sums(Shape shape, ElementRange range, std::span<const float> grad, SquareSums& sums) {
    require(grad.size() == range.size(), ErrorCode::ShapeMismatch, "gradient slice length");
    std::size_t idx = range.begin;
    while (idx < range.end) {
        const std::size_t row = idx / shape.cols;
        const std::size_t col0 = idx % shape.cols;
        const std::size_t len = std::min(shape.cols - col0, range.end - idx);
        const float* gp = grad.data() + (idx - range.begin);
        double row_sum = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
            const double sq = double(gp[j]) * double(gp[j]);
            row_sum += sq;
            sums.cols[col0 + j] += sq;
        }
        sums.rows[row] += row_sum;
        idx += len;
    }
}

void ema_factor(std::span<float> factor, std::span<const double> sums, double count, float beta) {
    require(factor.size() == sums.size(), ErrorCode::ShapeMismatch, "factor length");
    for (std::size_t i = 0; i < factor.size(); ++i) {
        const float mean = static_cast<float>(sums[i] / count);
        factor[i] = beta * factor[i] + (1.0f - beta) * mean;
    }
}

void require_finite(std::span<const float> g, const std::string& what) {
    if (!as_array(g).allFinite()) throw Error(ErrorCode::NonFinite, what);
}

ParamTensor update_momentum(const ParamTensor& m_prev, const ParamTensor& g, float beta) {
    require_same_shape(m_prev.shape(), g.shape(), "update_momentum");
    check_beta(beta, "momentum");
    require_finite(g.data(), "gradient passed to update_momentum");
    ParamTensor out = m_prev;
    ema_momentum(out.data(), g.data(), beta);
    return out;
}

ParamTensor update_second_moment(const ParamTensor& v_prev, const ParamTensor& g, float beta) {
    require_same_shape(v_prev.shape(), g.shape(), "update_second_moment");
    check_beta(beta, "second moment");
    require_finite(g.data(), "gradient passed to update_second_moment");
    ParamTensor out = v_prev;
    ema_second_moment(out.data(), g.data(), beta);
    return out;
}

std::pair<ParamTensor, ParamTensor> update_adafactor(const ParamTensor& r_prev, const ParamTensor& c_prev,
                                                     const ParamTensor& g, float beta) {
    const Shape shape = g.shape();
    require(shape.rows > 0 && shape.cols > 0, ErrorCode::ShapeMismatch, "update_adafactor on empty tensor");
    require_same_shape(r_prev.shape(), {shape.rows, 1}, "row factor");
    require_same_shape(c_prev.shape(), {1, shape.cols}, "column factor");
    check_beta(beta, "adafactor");
    require_finite(g.data(), "gradient passed to update_adafactor");
    SquareSums sums(shape);
    accumulate_square_sums(shape, {0, shape.size()}, g.data(), sums);
    ParamTensor r = r_prev;
    ParamTensor c = c_prev;
    ema_factor(r.data(), sums.rows, double(shape.cols), beta);
    ema_factor(c.data(), sums.cols, double(shape.rows), beta);
    return {std::move(r), std::move(c)};
}

void state_step_inplace(OptState& state, const ParamTensor& g, const BetaConfig& betas) {
    const Shape shape = state.shape();
    require_same_shape(shape, g.shape(), "state_step gradient");
    require(shape.size() > 0, ErrorCode::ShapeMismatch, "state_step on empty tensor");
    betas.validate();
    require_finite(g.data(), "gradient passed to state_step");

    for (std::size_t i = 0; i < kNumMomenta; ++i) ema_momentum(state.momentum[i].data(), g.data(), betas.momentum[i]);
    ema_second_moment(state.second_moment.data(), g.data(), betas.second_moment);

    SquareSums sums(shape);
    accumulate_square_sums(shape, {0, shape.size()}, g.data(), sums);
    for (std::size_t i = 0; i < kNumFactors; ++i) {
        ema_factor(state.row_factor[i].data(), sums.rows, double(shape.cols), betas.adafactor[i]);
        ema_factor(state.col_factor[i].data(), sums.cols, double(shape.rows), betas.adafactor[i]);
    }
    ++state.step;
}

OptState state_step(const OptState& state, const ParamTensor& g, const BetaConfig& betas) {
    OptState next = state;
    state_step_inplace(next, g, betas);
    return next;
}

void save_state(NamedTensorFile& file, const std::string& tensor_name, const OptState& state) {
    const std::string prefix = "state/" + tensor_name + "/";
    for (std::size_t i = 0; i < kNumMomenta; ++i)
        file.add(prefix + "M" + std::to_string(i), TensorEntry::from_tensor(state.momentum[i]));
    file.add(prefix + "V", TensorEntry::from_tensor(state.second_moment));
    for (std::size_t i = 0; i < kNumFactors; ++i)
        file.add(prefix + "r" + std::to_string(i), TensorEntry::from_tensor(state.row_factor[i]));
    for (std::size_t i = 0; i < kNumFactors; ++i)
        file.add(prefix + "c" + std::to_string(i), TensorEntry::from_tensor(state.col_factor[i]));
    file.add(prefix + "t", TensorEntry::from_i64(static_cast<std::int64_t>(state.step)));
}

OptState load_state(const NamedTensorFile& file, const std::string& tensor_name) {
    const std::string prefix = "state/" + tensor_name + "/";
    OptState s;
    for (std::size_t i = 0; i < kNumMomenta; ++i)
        s.momentum[i] = file.at(prefix + "M" + std::to_string(i)).to_tensor();
    s.second_moment = file.at(prefix + "V").to_tensor();
    for (std::size_t i = 0; i < kNumFactors; ++i) {
        s.row_factor[i] = file.at(prefix + "r" + std::to_string(i)).to_tensor();
        s.col_factor[i] = file.at(prefix + "c" + std::to_string(i)).to_tensor();
    }
    const auto t = file.at(prefix + "t").to_i64();
    require(t >= 0, ErrorCode::MalformedHeader, "negative step counter for " + tensor_name);
    s.step = static_cast<std::uint64_t>(t);

    const Shape shape = s.shape();
    for (const auto& m : s.momentum) require_same_shape(m.shape(), shape, "momentum of " + tensor_name);
    for (std::size_t i = 0; i < kNumFactors; ++i) {
        require_same_shape(s.row_factor[i].shape(), {shape.rows, 1}, "row factor of " + tensor_name);
        require_same_shape(s.col_factor[i].shape(), {1, shape.cols}, "column factor of " + tensor_name);
    }
    return s;
}

} // namespace lopt
