// SPDX-License-Identifier: Apache-2.0
#include "lopt/tensor_file.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

namespace lopt {

namespace {

constexpr char kMagic[4] = {'P', 'Y', 'L', 'O'};
constexpr std::size_t kPrefixBytes = 16;

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
void put_le(std::vector<std::byte>& out, T value) {
    for (std::size_t i = 0; i < sizeof(T); ++i)
        out.push_back(static_cast<std::byte>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xffu));
}

template <typename T>
T get_le(const std::byte* p) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return static_cast<T>(v);
}

// Payloads are stored little-endian; on big-endian hosts each element is
// byte-reversed in place.
void to_little_endian(std::span<std::byte> bytes, std::size_t width) {
    if constexpr (std::endian::native == std::endian::big) {
        for (std::size_t i = 0; i + width <= bytes.size(); i += width)
            std::reverse(bytes.begin() + i, bytes.begin() + i + width);
    } else {
        (void)bytes;
        (void)width;
    }
}

std::size_t align8(std::size_t n) { return (n + 7u) & ~std::size_t(7); }

std::optional<DType> parse_dtype(const std::string& s) {
    if (s == "f32") return DType::F32;
    if (s == "i64") return DType::I64;
    return std::nullopt;
}

[[noreturn]] void malformed(const std::string& what) { throw Error(ErrorCode::MalformedHeader, what); }

} // namespace

std::string_view dtype_name(DType d) noexcept { return d == DType::F32 ? "f32" : "i64"; }
std::size_t dtype_size(DType d) noexcept { return d == DType::F32 ? 4 : 8; }

std::uint64_t TensorEntry::element_count() const {
    std::uint64_t n = 1;
    for (auto s : shape) {
        if (s != 0 && n > UINT64_MAX / s) throw Error(ErrorCode::SizeOverflow, "tensor entry shape");
        n *= s;
    }
    return n;
}

TensorEntry TensorEntry::from_tensor(const ParamTensor& t) {
    TensorEntry e;
    e.dtype = DType::F32;
    e.shape = {t.rows(), t.cols()};
    e.payload.resize(t.size() * sizeof(float));
    if (!e.payload.empty()) std::memcpy(e.payload.data(), t.data().data(), e.payload.size());
    to_little_endian(e.payload, sizeof(float));
    return e;
}

TensorEntry TensorEntry::from_i64(std::int64_t value) {
    TensorEntry e;
    e.dtype = DType::I64;
    e.shape = {1, 1};
    e.payload.resize(sizeof(value));
    std::memcpy(e.payload.data(), &value, sizeof(value));
    to_little_endian(e.payload, sizeof(value));
    return e;
}

ParamTensor TensorEntry::to_tensor() const {
    require(dtype == DType::F32, ErrorCode::InvalidArgument, "entry is not f32");
    require(shape.size() <= 2, ErrorCode::ShapeMismatch, "entry rank exceeds 2");
    Shape s{shape.size() > 0 ? shape[0] : 1, shape.size() > 1 ? shape[1] : 1};
    require(payload.size() == s.size() * sizeof(float), ErrorCode::ShapeMismatch, "entry payload length");
    std::vector<std::byte> bytes = payload;
    to_little_endian(bytes, sizeof(float));
    std::vector<float> values(s.size());
    if (!bytes.empty()) std::memcpy(values.data(), bytes.data(), bytes.size());
    return ParamTensor::from_span(s, values);
}

std::int64_t TensorEntry::to_i64() const {
    require(dtype == DType::I64 && payload.size() == sizeof(std::int64_t), ErrorCode::InvalidArgument,
            "entry is not an i64 scalar");
    return get_le<std::int64_t>(payload.data());
}

void NamedTensorFile::add(std::string name, TensorEntry entry) {
    if (find(name)) throw Error(ErrorCode::DuplicateName, name);
    entries.emplace_back(std::move(name), std::move(entry));
}

const TensorEntry* NamedTensorFile::find(const std::string& name) const {
    auto it = std::find_if(entries.begin(), entries.end(), [&](const auto& e) { return e.first == name; });
    return it == entries.end() ? nullptr : &it->second;
}

const TensorEntry& NamedTensorFile::at(const std::string& name) const {
    const TensorEntry* e = find(name);
    if (!e) throw Error(ErrorCode::InvalidArgument, "no entry named '" + name + "'");
    return *e;
}

std::vector<std::byte> encode_tensor_file(const NamedTensorFile& file) {
    nlohmann::json header;
    header["format"] = "pylo-tensors";
    header["version"] = NamedTensorFile::kVersion;
    header["feature_set"] = file.feature_set;
    header["metadata"] = file.metadata;
    header["tensors"] = nlohmann::json::array();

    std::set<std::string> seen;
    std::size_t offset = 0;
    for (const auto& [name, entry] : file.entries) {
        if (!seen.insert(name).second) throw Error(ErrorCode::DuplicateName, name);
        if (entry.payload.size() != entry.element_count() * dtype_size(entry.dtype))
            throw Error(ErrorCode::ShapeMismatch, "entry '" + name + "' payload length disagrees with shape");
        header["tensors"].push_back({{"name", name},
                                     {"dtype", dtype_name(entry.dtype)},
                                     {"shape", entry.shape},
                                     {"offset", offset},
                                     {"nbytes", entry.payload.size()}});
        offset = align8(offset + entry.payload.size());
    }

    std::string text = header.dump();
    text.resize(align8(kPrefixBytes + text.size()) - kPrefixBytes, ' ');

    std::vector<std::byte> out;
    out.reserve(kPrefixBytes + text.size() + offset);
    for (char c : kMagic) out.push_back(static_cast<std::byte>(c));
    put_le<std::uint32_t>(out, NamedTensorFile::kVersion);
    put_le<std::uint64_t>(out, text.size());
    for (char c : text) out.push_back(static_cast<std::byte>(c));
    const std::size_t payload_start = out.size();
    out.resize(payload_start + offset, std::byte{0});
    std::size_t pos = 0;
    for (const auto& [name, entry] : file.entries) {
        if (!entry.payload.empty())
            std::memcpy(out.data() + payload_start + pos, entry.payload.data(), entry.payload.size());
        pos = align8(pos + entry.payload.size());
    }
    return out;
}

NamedTensorFile decode_tensor_file(std::span<const std::byte> bytes) {
    if (bytes.size() < kPrefixBytes) throw Error(ErrorCode::Truncated, "file shorter than fixed prefix");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw Error(ErrorCode::BadMagic, "expected 'PYLO'");
    const auto version = get_le<std::uint32_t>(bytes.data() + 4);
    if (version != NamedTensorFile::kVersion)
        throw Error(ErrorCode::VersionMismatch, "file version " + std::to_string(version) + ", supported " +
                                                    std::to_string(NamedTensorFile::kVersion));
    const auto header_len = get_le<std::uint64_t>(bytes.data() + 8);
    if (header_len > bytes.size() - kPrefixBytes) throw Error(ErrorCode::Truncated, "header runs past end of file");

    const auto* hp = reinterpret_cast<const char*>(bytes.data() + kPrefixBytes);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hp, hp + header_len);
    } catch (const nlohmann::json::exception& e) {
        malformed(std::string("header is not valid JSON: ") + e.what());
    }

    NamedTensorFile file;
    const std::size_t payload_start = kPrefixBytes + header_len;
    try {
        if (!header.is_object() || header.value("format", "") != "pylo-tensors") malformed("missing format tag");
        if (header.at("version").get<std::uint32_t>() != version)
            malformed("header version disagrees with prefix");
        file.feature_set = header.value("feature_set", "");
        if (header.contains("metadata"))
            file.metadata = header.at("metadata").get<std::map<std::string, std::string>>();
        for (const auto& t : header.at("tensors")) {
            auto name = t.at("name").get<std::string>();
            auto dtype = parse_dtype(t.at("dtype").get<std::string>());
            if (!dtype) malformed("unknown dtype for '" + name + "'");
            TensorEntry entry;
            entry.dtype = *dtype;
            entry.shape = t.at("shape").get<std::vector<std::uint64_t>>();
            const auto offset = t.at("offset").get<std::uint64_t>();
            const auto nbytes = t.at("nbytes").get<std::uint64_t>();
            if (offset % 8 != 0) malformed("unaligned offset for '" + name + "'");
            if (nbytes != entry.element_count() * dtype_size(entry.dtype))
                malformed("byte length of '" + name + "' disagrees with its shape");
            if (offset > bytes.size() - payload_start || nbytes > bytes.size() - payload_start - offset)
                throw Error(ErrorCode::Truncated, "payload of '" + name + "' runs past end of file");
            const auto* p = bytes.data() + payload_start + offset;
            entry.payload.assign(p, p + nbytes);
            file.add(std::move(name), std::move(entry));
        }
    } catch (const nlohmann::json::exception& e) {
        malformed(std::string("header field: ") + e.what());
    }
    return file;
}

void file_save(const NamedTensorFile& file, const std::filesystem::path& path) {
    const auto bytes = encode_tensor_file(file);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::Io, "cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::Io, "write to '" + path.string() + "' failed");
}

NamedTensorFile file_load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::Io, "cannot open '" + path.string() + "'");
    std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw Error(ErrorCode::Io, "read of '" + path.string() + "' failed");
    return decode_tensor_file(std::as_bytes(std::span<const char>(raw)));
}

} // namespace lopt
