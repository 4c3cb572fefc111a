// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lopt/tensor.hpp"

namespace lopt {

enum class DType { F32, I64 };

std::string_view dtype_name(DType d) noexcept;
std::size_t dtype_size(DType d) noexcept;

/// One stored array: dtype, shape, and the raw little-endian payload.
struct TensorEntry {
    DType dtype = DType::F32;
    std::vector<std::uint64_t> shape;
    std::vector<std::byte> payload;

    std::uint64_t element_count() const;
    bool operator==(const TensorEntry&) const = default;

    static TensorEntry from_tensor(const ParamTensor& t);
    static TensorEntry from_i64(std::int64_t value);
    ParamTensor to_tensor() const;
    std::int64_t to_i64() const;
};

/// Named-tensor container. On disk:
///
///   "PYLO" | u32 version | u64 header_len | UTF-8 JSON header | payload
///
/// All integers little-endian. The header lists name, dtype, shape, offset
/// and byte length of each entry; offsets are relative to the payload start
/// and 8-byte aligned, and the payload itself starts on an 8-byte boundary.
struct NamedTensorFile {
    static constexpr std::uint32_t kVersion = 1;

    std::string feature_set;
    std::map<std::string, std::string> metadata;
    std::vector<std::pair<std::string, TensorEntry>> entries;

    /// Throws DuplicateName.
    void add(std::string name, TensorEntry entry);
    const TensorEntry* find(const std::string& name) const;
    const TensorEntry& at(const std::string& name) const;
    bool operator==(const NamedTensorFile&) const = default;
};

std::vector<std::byte> encode_tensor_file(const NamedTensorFile& file);
NamedTensorFile decode_tensor_file(std::span<const std::byte> bytes);

void file_save(const NamedTensorFile& file, const std::filesystem::path& path);
NamedTensorFile file_load(const std::filesystem::path& path);

} // namespace lopt
