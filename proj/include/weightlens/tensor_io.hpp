// SPDX-License-Identifier: Apache-2.0
//
// Reader and writer for the safetensors wire format:
//
//   [u64 little-endian header length N][N bytes UTF-8 JSON][data buffer]
//
// JSON keys are tensor names; each value carries "dtype", "shape" and
// "data_offsets" ([begin, end] relative to the data buffer). The reserved
// key "__metadata__" holds an optional string-to-string map. Files are
// memory-mapped where possible so that per-tensor processing never needs
// the whole checkpoint in RAM; headers preserve tensor order end to end.
//
// All payloads decode to 64-bit floats for analysis regardless of storage
// precision. Unsupported (integer, bool, fp8) tensors can be iterated as
// skip notices and copied verbatim, but never decoded.

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <regex>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <variant>
#include <vector>

#if defined(__unix__) || defined(__APPLE__)
#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>
#define WEIGHTLENS_HAVE_MMAP 1
#endif

#include <nlohmann/json.hpp>

#include "weightlens/dtype.hpp"

namespace weightlens {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace weightlens

namespace weightlens::io {

struct MalformedHeader : Error { using Error::Error; };
struct UnknownTensor : Error { using Error::Error; };
struct UnsupportedDType : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct NonFiniteValue : Error { using Error::Error; };

struct TensorMeta {
    std::string name;
    DType dtype;
    std::vector<std::uint64_t> shape;
    std::uint64_t begin = 0;  // byte offsets relative to the data buffer
    std::uint64_t end = 0;

    std::uint64_t numel() const {
        std::uint64_t n = 1;
        for (auto d : shape) n *= d;
        return n;
    }
    std::uint64_t nbytes() const { return end - begin; }
};

// A named tensor decoded to 64-bit floats, row-major.
struct TensorRecord {
    std::string name;
    std::vector<std::uint64_t> shape;
    std::vector<double> values;
    DType source_dtype;
    bool has_nonfinite = false;

    std::uint64_t numel() const {
        std::uint64_t n = 1;
        for (auto d : shape) n *= d;
        return n;
    }
};

namespace detail {

class FileBuffer {
public:
    explicit FileBuffer(const std::filesystem::path& path) {
#ifdef WEIGHTLENS_HAVE_MMAP
        int fd = ::open(path.c_str(), O_RDONLY);
        if (fd >= 0) {
            struct stat st{};
            if (::fstat(fd, &st) == 0 && st.st_size >= 0) {
                size_ = static_cast<std::size_t>(st.st_size);
                if (size_ > 0) {
                    void* p = ::mmap(nullptr, size_, PROT_READ, MAP_PRIVATE, fd, 0);
                    if (p != MAP_FAILED) {
                        data_ = static_cast<const std::byte*>(p);
                        mapped_ = true;
                    }
                }
                ::close(fd);
                if (mapped_ || size_ == 0) return;
            } else {
                ::close(fd);
            }
        }
#endif
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open file: " + path.string());
        in.seekg(0, std::ios::end);
        const auto len = in.tellg();
        if (len < 0) throw IoError("cannot stat file: " + path.string());
        in.seekg(0);
        owned_.resize(static_cast<std::size_t>(len));
        if (len > 0 && !in.read(reinterpret_cast<char*>(owned_.data()), len))
            throw IoError("short read: " + path.string());
        data_ = owned_.data();
        size_ = owned_.size();
    }

    ~FileBuffer() {
#ifdef WEIGHTLENS_HAVE_MMAP
        if (mapped_) ::munmap(const_cast<std::byte*>(data_), size_);
#endif
    }

    FileBuffer(const FileBuffer&) = delete;
    FileBuffer& operator=(const FileBuffer&) = delete;

    const std::byte* data() const { return data_; }
    std::size_t size() const { return size_; }

private:
    const std::byte* data_ = nullptr;
    std::size_t size_ = 0;
    bool mapped_ = false;
    std::vector<std::byte> owned_;
};

}  // namespace detail

// Immutable view of one checkpoint: parsed header plus the backing byte
// buffer. Copies share the mapping; safe to use from multiple threads.
class ModelIndex {
public:
    ModelIndex() = default;

    const std::vector<TensorMeta>& metas() const { return metas_; }
    const std::map<std::string, std::string>& metadata() const { return metadata_; }
    const std::filesystem::path& path() const { return path_; }
    std::uint64_t data_size() const { return data_size_; }

    const TensorMeta* find(std::string_view name) const {
        auto it = by_name_.find(std::string(name));
        return it == by_name_.end() ? nullptr : &metas_[it->second];
    }

    std::span<const std::byte> payload(const TensorMeta& meta) const {
        return {buffer_->data() + data_begin_ + meta.begin, meta.nbytes()};
    }

    friend ModelIndex read_header(const std::filesystem::path& path);

private:
    std::shared_ptr<detail::FileBuffer> buffer_;
    std::filesystem::path path_;
    std::vector<TensorMeta> metas_;
    std::unordered_map<std::string, std::size_t> by_name_;
    std::map<std::string, std::string> metadata_;
    std::uint64_t data_begin_ = 0;
    std::uint64_t data_size_ = 0;
};

// Parses the header and validates every byte range against the data buffer.
inline ModelIndex read_header(const std::filesystem::path& path) {
    ModelIndex idx;
    idx.buffer_ = std::make_shared<detail::FileBuffer>(path);
    idx.path_ = path;
    const auto* base = idx.buffer_->data();
    const std::size_t file_size = idx.buffer_->size();

    if (file_size < 8) throw MalformedHeader("file too small for header length: " + path.string());
    std::uint64_t header_len = 0;
    for (int i = 7; i >= 0; --i)
        header_len = (header_len << 8) | std::uint64_t(std::to_integer<std::uint8_t>(base[i]));
    if (header_len > file_size - 8)
        throw MalformedHeader("declared header length exceeds file size: " + path.string());

    idx.data_begin_ = 8 + header_len;
    idx.data_size_ = file_size - idx.data_begin_;

    nlohmann::ordered_json header;
    try {
        header = nlohmann::ordered_json::parse(
            reinterpret_cast<const char*>(base + 8),
            reinterpret_cast<const char*>(base + 8 + header_len));
    } catch (const nlohmann::json::exception& e) {
        throw MalformedHeader("invalid JSON header in " + path.string() + ": " + e.what());
    }
    if (!header.is_object()) throw MalformedHeader("header is not a JSON object: " + path.string());

    for (const auto& [key, value] : header.items()) {
        if (key == "__metadata__") {
            if (!value.is_object())
                throw MalformedHeader("__metadata__ is not an object in " + path.string());
            for (const auto& [mk, mv] : value.items()) {
                if (!mv.is_string())
                    throw MalformedHeader("__metadata__ value for '" + mk + "' is not a string");
                idx.metadata_[mk] = mv.get<std::string>();
            }
            continue;
        }
        if (!value.is_object() || !value.contains("dtype") || !value.contains("shape") ||
            !value.contains("data_offsets"))
            throw MalformedHeader("tensor '" + key + "' is missing dtype/shape/data_offsets");

        TensorMeta meta;
        meta.name = key;
        if (!value["dtype"].is_string())
            throw MalformedHeader("tensor '" + key + "' has a non-string dtype");
        meta.dtype = DType::from_wire(value["dtype"].get<std::string>());
        if (!value["shape"].is_array())
            throw MalformedHeader("tensor '" + key + "' has a non-array shape");
        for (const auto& d : value["shape"]) {
            if (!d.is_number_unsigned())
                throw MalformedHeader("tensor '" + key + "' has a negative or non-integer dim");
            meta.shape.push_back(d.get<std::uint64_t>());
        }
        const auto& offs = value["data_offsets"];
        if (!offs.is_array() || offs.size() != 2 || !offs[0].is_number_unsigned() ||
            !offs[1].is_number_unsigned())
            throw MalformedHeader("tensor '" + key + "' has malformed data_offsets");
        meta.begin = offs[0].get<std::uint64_t>();
        meta.end = offs[1].get<std::uint64_t>();

        std::uint64_t numel = 1;
        for (auto d : meta.shape) {
            if (d != 0 && numel > std::numeric_limits<std::uint64_t>::max() / d)
                throw MalformedHeader("tensor '" + key + "' has an overflowing shape");
            numel *= d;
        }
        if (meta.end < meta.begin)
            throw MalformedHeader("tensor '" + key + "' has end < begin");
        if (meta.end > idx.data_size_)
            throw MalformedHeader("tensor '" + key + "' extends past end of file");
        const std::size_t width = meta.dtype.byte_width();
        if (width != 0 && meta.nbytes() != numel * width)
            throw MalformedHeader("tensor '" + key + "' byte range does not match shape x dtype");

        idx.by_name_.emplace(meta.name, idx.metas_.size());
        idx.metas_.push_back(std::move(meta));
    }

    // Byte ranges of distinct tensors must not overlap.
    std::vector<const TensorMeta*> sorted;
    sorted.reserve(idx.metas_.size());
    for (const auto& m : idx.metas_) sorted.push_back(&m);
    std::sort(sorted.begin(), sorted.end(),
              [](const TensorMeta* a, const TensorMeta* b) { return a->begin < b->begin; });
    for (std::size_t i = 1; i < sorted.size(); ++i) {
        if (sorted[i]->begin < sorted[i - 1]->end)
            throw MalformedHeader("tensors '" + sorted[i - 1]->name + "' and '" +
                                  sorted[i]->name + "' have overlapping byte ranges");
    }
    return idx;
}

namespace detail {

inline std::uint16_t load_u16_le(const std::byte* p) {
    return static_cast<std::uint16_t>(std::to_integer<std::uint8_t>(p[0]) |
                                      (std::to_integer<std::uint8_t>(p[1]) << 8));
}

inline std::uint32_t load_u32_le(const std::byte* p) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | std::to_integer<std::uint8_t>(p[i]);
    return v;
}

inline std::uint64_t load_u64_le(const std::byte* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | std::to_integer<std::uint8_t>(p[i]);
    return v;
}

}  // namespace detail

inline TensorRecord load_tensor(const ModelIndex& index, std::string_view name) {
    const TensorMeta* meta = index.find(name);
    if (!meta) throw UnknownTensor("no tensor named '" + std::string(name) + "'");
    if (!meta->dtype.supported())
        throw UnsupportedDType("tensor '" + meta->name + "' has unsupported dtype " +
                               meta->dtype.wire_name);

    TensorRecord rec;
    rec.name = meta->name;
    rec.shape = meta->shape;
    rec.source_dtype = meta->dtype;
    const std::uint64_t n = meta->numel();
    rec.values.resize(n);
    const std::byte* p = index.payload(*meta).data();

    switch (meta->dtype.tag) {
        case DTypeTag::F64:
            for (std::uint64_t i = 0; i < n; ++i)
                rec.values[i] = std::bit_cast<double>(detail::load_u64_le(p + 8 * i));
            break;
        case DTypeTag::F32:
            for (std::uint64_t i = 0; i < n; ++i)
                rec.values[i] = decode_f32(detail::load_u32_le(p + 4 * i));
            break;
        case DTypeTag::F16:
            for (std::uint64_t i = 0; i < n; ++i)
                rec.values[i] = decode_f16(detail::load_u16_le(p + 2 * i));
            break;
        case DTypeTag::BF16:
            for (std::uint64_t i = 0; i < n; ++i)
                rec.values[i] = decode_bf16(detail::load_u16_le(p + 2 * i));
            break;
        case DTypeTag::Unsupported:
            break;  // unreachable, checked above
    }
    for (double v : rec.values) {
        if (!std::isfinite(v)) {
            rec.has_nonfinite = true;
            break;
        }
    }
    return rec;
}

// Unsupported-dtype tensors are reported, never silently dropped.
struct SkipNotice {
    std::string name;
    std::string dtype_name;
};

using TensorEntry = std::variant<TensorRecord, SkipNotice>;

// Visits tensors in header order, optionally filtered by a regular
// expression (search semantics). Decoding happens lazily per tensor.
inline void iter_tensors(const ModelIndex& index,
                         const std::optional<std::string>& name_pattern,
                         const std::function<void(TensorEntry)>& sink) {
    std::optional<std::regex> re;
    if (name_pattern) re.emplace(*name_pattern);
    for (const auto& meta : index.metas()) {
        if (re && !std::regex_search(meta.name, *re)) continue;
        if (!meta.dtype.supported()) {
            sink(SkipNotice{meta.name, meta.dtype.wire_name});
            continue;
        }
        sink(load_tensor(index, meta.name));
    }
}

// Incremental writer. Tensors appear in the output header in insertion
// order; offsets are assigned contiguously.
class ModelWriter {
public:
    explicit ModelWriter(bool forbid_nonfinite = false)
        : forbid_nonfinite_(forbid_nonfinite) {}

    void set_metadata(std::map<std::string, std::string> m) { metadata_ = std::move(m); }

    void add(const TensorRecord& rec, const DType& target) {
        if (!target.supported())
            throw UnsupportedDType("cannot encode tensor '" + rec.name + "' as " +
                                   target.wire_name);
        if (rec.values.size() != rec.numel())
            throw IoError("tensor '" + rec.name + "' value count does not match its shape");
        Entry e;
        e.name = rec.name;
        e.dtype_name = target.wire_name;
        e.shape = rec.shape;
        e.bytes = encode(rec, target);
        entries_.push_back(std::move(e));
    }

    void add_raw(std::string name, std::string dtype_name, std::vector<std::uint64_t> shape,
                 std::vector<std::byte> bytes) {
        entries_.push_back(Entry{std::move(name), std::move(dtype_name), std::move(shape),
                                 std::move(bytes)});
    }

    void write_file(const std::filesystem::path& path) const {
        nlohmann::ordered_json header = nlohmann::ordered_json::object();
        if (!metadata_.empty()) {
            nlohmann::ordered_json m = nlohmann::ordered_json::object();
            for (const auto& [k, v] : metadata_) m[k] = v;
            header["__metadata__"] = std::move(m);
        }
        std::uint64_t offset = 0;
        for (const auto& e : entries_) {
            nlohmann::ordered_json t;
            t["dtype"] = e.dtype_name;
            t["shape"] = e.shape;
            t["data_offsets"] = {offset, offset + e.bytes.size()};
            header[e.name] = std::move(t);
            offset += e.bytes.size();
        }
        std::string js = header.dump();
        while (js.size() % 8 != 0) js.push_back(' ');  // keep the data buffer 8-byte aligned

        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open for writing: " + path.string());
        const std::uint64_t n = js.size();
        char len[8];
        for (int i = 0; i < 8; ++i) len[i] = static_cast<char>((n >> (8 * i)) & 0xFF);
        out.write(len, 8);
        out.write(js.data(), static_cast<std::streamsize>(js.size()));
        for (const auto& e : entries_)
            out.write(reinterpret_cast<const char*>(e.bytes.data()),
                      static_cast<std::streamsize>(e.bytes.size()));
        if (!out) throw IoError("write failed: " + path.string());
    }

private:
    struct Entry {
        std::string name;
        std::string dtype_name;
        std::vector<std::uint64_t> shape;
        std::vector<std::byte> bytes;
    };

    std::vector<std::byte> encode(const TensorRecord& rec, const DType& target) const {
        if (forbid_nonfinite_) {
            for (double v : rec.values)
                if (!std::isfinite(v))
                    throw NonFiniteValue("tensor '" + rec.name + "' contains a non-finite value");
        }
        std::vector<std::byte> out(rec.values.size() * target.byte_width());
        std::byte* p = out.data();
        switch (target.tag) {
            case DTypeTag::F64:
                for (double v : rec.values) {
                    const auto b = std::bit_cast<std::uint64_t>(v);
                    for (int i = 0; i < 8; ++i) *p++ = std::byte((b >> (8 * i)) & 0xFF);
                }
                break;
            case DTypeTag::F32:
                for (double v : rec.values) {
                    const std::uint32_t b = encode_f32(v);
                    for (int i = 0; i < 4; ++i) *p++ = std::byte((b >> (8 * i)) & 0xFF);
                }
                break;
            case DTypeTag::F16:
                for (double v : rec.values) {
                    const std::uint16_t b = encode_f16(v);
                    *p++ = std::byte(b & 0xFF);
                    *p++ = std::byte(b >> 8);
                }
                break;
            case DTypeTag::BF16:
                for (double v : rec.values) {
                    const std::uint16_t b = encode_bf16(v);
                    *p++ = std::byte(b & 0xFF);
                    *p++ = std::byte(b >> 8);
                }
                break;
            case DTypeTag::Unsupported:
                break;  // unreachable
        }
        return out;
    }

    bool forbid_nonfinite_;
    std::map<std::string, std::string> metadata_;
    std::vector<Entry> entries_;
};

// One-shot convenience: every record re-encoded at the paired target dtype.
inline void write_model(const std::vector<TensorRecord>& tensors,
                        const std::vector<DType>& targets,
                        const std::filesystem::path& path,
                        bool forbid_nonfinite = false) {
    if (tensors.size() != targets.size())
        throw IoError("write_model: one target dtype per tensor required");
    ModelWriter w(forbid_nonfinite);
    for (std::size_t i = 0; i < tensors.size(); ++i) w.add(tensors[i], targets[i]);
    w.write_file(path);
}

}  // namespace weightlens::io
