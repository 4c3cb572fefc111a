// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>

#include "lopt/error.hpp"

namespace lopt {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatrixXf = RowMatrix<float>;
using MatrixView = Eigen::Map<MatrixXf>;
using ConstMatrixView = Eigen::Map<const MatrixXf>;

struct Shape {
    std::size_t rows = 0;
    std::size_t cols = 0;

    std::size_t size() const noexcept { return rows * cols; }
    bool operator==(const Shape&) const = default;
};

std::string to_string(Shape s);

/// Half-open range of flat (row-major) element indices.
struct ElementRange {
    std::size_t begin = 0;
    std::size_t end = 0;

    std::size_t size() const noexcept { return end - begin; }
    bool empty() const noexcept { return end <= begin; }
    bool operator==(const ElementRange&) const = default;
};

/// Dense rank<=2 f32 array. Vectors are m x 1, scalars 1 x 1.
///
/// Every constructor rejects non-finite data; mutation goes through data()
/// and callers that write are expected to re-check with all_finite().
class ParamTensor {
public:
    ParamTensor() = default;
    ParamTensor(std::size_t rows, std::size_t cols, float fill = 0.0f);
    explicit ParamTensor(MatrixXf values);

    static ParamTensor from_span(Shape shape, std::span<const float> values);

    Shape shape() const noexcept {
        return {static_cast<std::size_t>(values_.rows()), static_cast<std::size_t>(values_.cols())};
    }
    std::size_t rows() const noexcept { return static_cast<std::size_t>(values_.rows()); }
    std::size_t cols() const noexcept { return static_cast<std::size_t>(values_.cols()); }
    std::size_t size() const noexcept { return static_cast<std::size_t>(values_.size()); }

    std::span<float> data() noexcept { return {values_.data(), size()}; }
    std::span<const float> data() const noexcept { return {values_.data(), size()}; }

    float& operator()(std::size_t r, std::size_t c) { return values_(Eigen::Index(r), Eigen::Index(c)); }
    float operator()(std::size_t r, std::size_t c) const { return values_(Eigen::Index(r), Eigen::Index(c)); }

    MatrixXf& matrix() noexcept { return values_; }
    const MatrixXf& matrix() const noexcept { return values_; }

    bool all_finite() const { return values_.allFinite(); }

    /// Bitwise comparison of shape and payload.
    bool bit_equal(const ParamTensor& other) const;

private:
    MatrixXf values_;
};

/// Throws SizeOverflow if rows * cols does not fit in size_t.
ParamTensor tensor_new(std::size_t rows, std::size_t cols, float fill);

/// Throws ShapeMismatch naming `what` if shapes differ.
void require_same_shape(Shape a, Shape b, const std::string& what);

} // namespace lopt
