// SPDX-License-Identifier: Apache-2.0
#include "lopt/tensor.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <utility>

namespace lopt {

std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
    case ErrorCode::InvalidArgument: return "invalid argument";
    case ErrorCode::ShapeMismatch: return "shape mismatch";
    case ErrorCode::SizeOverflow: return "size overflow";
    case ErrorCode::NonFinite: return "non-finite value";
    case ErrorCode::OutOfScratch: return "out of scratch memory";
    case ErrorCode::Io: return "i/o error";
    case ErrorCode::BadMagic: return "bad magic";
    case ErrorCode::VersionMismatch: return "version mismatch";
    case ErrorCode::Truncated: return "truncated payload";
    case ErrorCode::MalformedHeader: return "malformed header";
    case ErrorCode::DuplicateName: return "duplicate name";
    case ErrorCode::FeatureSetMismatch: return "feature set mismatch";
    case ErrorCode::SchemaMismatch: return "schema mismatch";
    }
    return "unknown";
}

std::string to_string(Shape s) {
    return std::to_string(s.rows) + "x" + std::to_string(s.cols);
}

namespace {

std::size_t checked_size(std::size_t rows, std::size_t cols) {
    if (cols != 0 && rows > std::numeric_limits<std::size_t>::max() / cols)
        throw Error(ErrorCode::SizeOverflow, std::to_string(rows) + " x " + std::to_string(cols));
    const std::size_t n = rows * cols;
    if (n > static_cast<std::size_t>(std::numeric_limits<Eigen::Index>::max()) / sizeof(float))
        throw Error(ErrorCode::SizeOverflow, std::to_string(rows) + " x " + std::to_string(cols));
    return n;
}

} // namespace

ParamTensor::ParamTensor(std::size_t rows, std::size_t cols, float fill) {
    checked_size(rows, cols);
    require(std::isfinite(fill), ErrorCode::NonFinite, "tensor fill value");
    values_.setConstant(Eigen::Index(rows), Eigen::Index(cols), fill);
}

ParamTensor::ParamTensor(MatrixXf values) : values_(std::move(values)) {
    require(values_.allFinite(), ErrorCode::NonFinite, "tensor constructed from non-finite data");
}

ParamTensor ParamTensor::from_span(Shape shape, std::span<const float> values) {
    const std::size_t n = checked_size(shape.rows, shape.cols);
    require(values.size() == n, ErrorCode::ShapeMismatch,
            "buffer of " + std::to_string(values.size()) + " floats for shape " + to_string(shape));
    MatrixXf m(Eigen::Index(shape.rows), Eigen::Index(shape.cols));
    if (n != 0) std::memcpy(m.data(), values.data(), n * sizeof(float));
    return ParamTensor(std::move(m));
}

bool ParamTensor::bit_equal(const ParamTensor& other) const {
    return shape() == other.shape() &&
           (size() == 0 || std::memcmp(values_.data(), other.values_.data(), size() * sizeof(float)) == 0);
}

ParamTensor tensor_new(std::size_t rows, std::size_t cols, float fill) {
    return ParamTensor(rows, cols, fill);
}

void require_same_shape(Shape a, Shape b, const std::string& what) {
    if (!(a == b))
        throw Error(ErrorCode::ShapeMismatch, what + ": " + to_string(a) + " vs " + to_string(b));
}

} // namespace lopt
