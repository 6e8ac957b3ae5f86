// Copyright (c) 2026, The ckptmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
#include "ckptmerge/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cstring>
#include <fstream>
#include <system_error>

#include <Eigen/Core>
#include <fmt/core.h>
#include <nlohmann/json.hpp>

#include "ckptmerge/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint buffers are read and written in host byte order");

namespace ckptmerge {

std::size_t dtype_size(DType dtype) {
    switch (dtype) {
        case DType::F16: return 2;
        case DType::BF16: return 2;
        case DType::F32: return 4;
        case DType::F64: return 8;
    }
    return 0;
}

std::string_view dtype_tag(DType dtype) {
    switch (dtype) {
        case DType::F16: return "F16";
        case DType::BF16: return "BF16";
        case DType::F32: return "F32";
        case DType::F64: return "F64";
    }
    return "?";
}

std::optional<DType> parse_dtype(std::string_view tag) {
    std::string upper(tag);
    std::transform(upper.begin(), upper.end(), upper.begin(),
                   [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
    if (upper == "F16") return DType::F16;
    if (upper == "BF16") return DType::BF16;
    if (upper == "F32") return DType::F32;
    if (upper == "F64") return DType::F64;
    return std::nullopt;
}

std::uint64_t element_count(const Shape& shape) {
    std::uint64_t n = 1;
    for (auto d : shape) {
        if (__builtin_mul_overflow(n, d, &n)) {
            throw FormatError("tensor shape " + shape_to_string(shape) + " overflows element count");
        }
    }
    return n;
}

std::string shape_to_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

// TensorData

TensorData::TensorData(std::string name, DType dtype, Shape shape, std::vector<std::byte> data)
    : name_(std::move(name)), dtype_(dtype), shape_(std::move(shape)), data_(std::move(data)) {
    const std::uint64_t n = element_count(shape_);
    std::uint64_t expected = 0;
    if (__builtin_mul_overflow(n, static_cast<std::uint64_t>(dtype_size(dtype_)), &expected) ||
        expected != data_.size()) {
        throw FormatError(fmt::format("tensor '{}': {} bytes for shape {} of {}", name_,
                                      data_.size(), shape_to_string(shape_), dtype_tag(dtype_)));
    }
}

TensorData TensorData::from_values(std::string name, DType dtype, Shape shape,
                                   std::span<const double> values) {
    const std::uint64_t n = element_count(shape);
    if (n != values.size()) {
        throw StructureMismatch(fmt::format("tensor '{}': {} values for shape {}", name,
                                            values.size(), shape_to_string(shape)));
    }
    std::vector<std::byte> data(n * dtype_size(dtype));
    auto* out = data.data();
    switch (dtype) {
        case DType::F16:
            for (std::size_t i = 0; i < n; ++i) {
                const auto bits = Eigen::numext::bit_cast<std::uint16_t>(
                    Eigen::half(static_cast<float>(values[i])));
                std::memcpy(out + 2 * i, &bits, 2);
            }
            break;
        case DType::BF16:
            for (std::size_t i = 0; i < n; ++i) {
                const auto bits = Eigen::numext::bit_cast<std::uint16_t>(
                    Eigen::bfloat16(static_cast<float>(values[i])));
                std::memcpy(out + 2 * i, &bits, 2);
            }
            break;
        case DType::F32:
            for (std::size_t i = 0; i < n; ++i) {
                const float v = static_cast<float>(values[i]);
                std::memcpy(out + 4 * i, &v, 4);
            }
            break;
        case DType::F64:
            if (n) std::memcpy(out, values.data(), 8 * n);
            break;
    }
    return TensorData(std::move(name), dtype, std::move(shape), std::move(data));
}

std::vector<double> TensorData::to_double() const {
    const std::size_t n = size();
    std::vector<double> out(n);
    const auto* in = data_.data();
    switch (dtype_) {
        case DType::F16:
            for (std::size_t i = 0; i < n; ++i) {
                std::uint16_t bits;
                std::memcpy(&bits, in + 2 * i, 2);
                out[i] = static_cast<float>(Eigen::numext::bit_cast<Eigen::half>(bits));
            }
            break;
        case DType::BF16:
            for (std::size_t i = 0; i < n; ++i) {
                std::uint16_t bits;
                std::memcpy(&bits, in + 2 * i, 2);
                out[i] = static_cast<float>(Eigen::numext::bit_cast<Eigen::bfloat16>(bits));
            }
            break;
        case DType::F32:
            for (std::size_t i = 0; i < n; ++i) {
                float v;
                std::memcpy(&v, in + 4 * i, 4);
                out[i] = v;
            }
            break;
        case DType::F64:
            if (n) std::memcpy(out.data(), in, 8 * n);
            break;
    }
    return out;
}

// Checkpoint

void Checkpoint::add(TensorData tensor) {
    const std::string name = tensor.name();
    auto [it, inserted] = tensors_.try_emplace(name, std::move(tensor));
    if (!inserted) throw StructureMismatch("duplicate tensor name '" + name + "'");
}

void Checkpoint::put(TensorData tensor) {
    const std::string name = tensor.name();
    tensors_.insert_or_assign(name, std::move(tensor));
}

const TensorData* Checkpoint::find(std::string_view name) const {
    auto it = tensors_.find(name);
    return it == tensors_.end() ? nullptr : &it->second;
}

const TensorData& Checkpoint::at(std::string_view name) const {
    const auto* t = find(name);
    if (!t) throw StructureMismatch(fmt::format("no tensor named '{}'", name));
    return *t;
}

namespace {

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

void fnv_mix(std::uint64_t& h, std::span<const std::byte> bytes) {
    for (auto b : bytes) {
        h ^= static_cast<std::uint64_t>(b);
        h *= kFnvPrime;
    }
}

void fnv_mix(std::uint64_t& h, std::string_view s) {
    fnv_mix(h, std::as_bytes(std::span(s.data(), s.size())));
}

void fnv_mix(std::uint64_t& h, std::uint64_t v) {
    fnv_mix(h, std::as_bytes(std::span(&v, 1)));
}

}  // namespace

std::string Checkpoint::fingerprint() const {
    std::uint64_t h = kFnvOffset;
    fnv_mix(h, static_cast<std::uint64_t>(tensors_.size()));
    for (const auto& [name, t] : tensors_) {
        fnv_mix(h, static_cast<std::uint64_t>(name.size()));
        fnv_mix(h, name);
        fnv_mix(h, dtype_tag(t.dtype()));
        fnv_mix(h, static_cast<std::uint64_t>(t.shape().size()));
        for (auto d : t.shape()) fnv_mix(h, d);
    }
    return fmt::format("{:016x}", h);
}

std::string content_hash(std::span<const std::byte> bytes) {
    std::uint64_t h = kFnvOffset;
    fnv_mix(h, bytes);
    return fmt::format("{:016x}", h);
}

CompatibilityReport check_compatibility(const Checkpoint& a, const Checkpoint& b) {
    CompatibilityReport report;
    auto ia = a.tensors().begin();
    auto ib = b.tensors().begin();
    const auto ea = a.tensors().end();
    const auto eb = b.tensors().end();
    while (ia != ea || ib != eb) {
        if (ib == eb || (ia != ea && ia->first < ib->first)) {
            report.mismatches.push_back({ia->first, "missing in b"});
            ++ia;
        } else if (ia == ea || ib->first < ia->first) {
            report.mismatches.push_back({ib->first, "missing in a"});
            ++ib;
        } else {
            const auto& ta = ia->second;
            const auto& tb = ib->second;
            if (ta.dtype() != tb.dtype()) {
                report.mismatches.push_back(
                    {ia->first, fmt::format("dtype {} vs {}", dtype_tag(ta.dtype()), dtype_tag(tb.dtype()))});
            } else if (ta.shape() != tb.shape()) {
                report.mismatches.push_back(
                    {ia->first, fmt::format("shape {} vs {}", shape_to_string(ta.shape()),
                                            shape_to_string(tb.shape()))});
            }
            ++ia;
            ++ib;
        }
    }
    report.compatible = report.mismatches.empty();
    return report;
}

void require_compatible(const Checkpoint& a, const Checkpoint& b, std::string_view what) {
    const auto report = check_compatibility(a, b);
    if (report.compatible) return;
    std::string msg = fmt::format("{}: {} mismatched tensor(s)", what, report.mismatches.size());
    const std::size_t shown = std::min<std::size_t>(report.mismatches.size(), 5);
    for (std::size_t i = 0; i < shown; ++i) {
        msg += fmt::format("; '{}' {}", report.mismatches[i].name, report.mismatches[i].reason);
    }
    throw StructureMismatch(msg);
}

// Container format

namespace {

std::uint64_t json_u64(const nlohmann::json& j, const std::string& ctx) {
    if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<std::int64_t>() >= 0)) {
        throw FormatError(ctx + ": expected a non-negative integer");
    }
    return j.get<std::uint64_t>();
}

struct Entry {
    std::string name;
    DType dtype;
    Shape shape;
    std::uint64_t begin;
    std::uint64_t end;
};

}  // namespace

Checkpoint parse_checkpoint(std::span<const std::byte> file_bytes) {
    if (file_bytes.size() < 8) throw FormatError("file shorter than the 8-byte header length");
    std::uint64_t header_len = 0;
    std::memcpy(&header_len, file_bytes.data(), 8);
    if (header_len > file_bytes.size() - 8) {
        throw FormatError(fmt::format("header length {} exceeds file size {}", header_len,
                                      file_bytes.size()));
    }
    const auto* header_begin = reinterpret_cast<const char*>(file_bytes.data() + 8);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_begin, header_begin + header_len);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed header JSON: ") + e.what());
    }
    if (!header.is_object()) throw FormatError("header is not a JSON object");

    const auto buffer = file_bytes.subspan(8 + header_len);
    Checkpoint ckpt;
    std::vector<Entry> entries;
    for (const auto& [key, value] : header.items()) {
        if (key == "__metadata__") {
            if (!value.is_object()) throw FormatError("__metadata__ is not an object");
            for (const auto& [mk, mv] : value.items()) {
                if (!mv.is_string()) throw FormatError("__metadata__ value for '" + mk + "' is not a string");
                ckpt.metadata().emplace(mk, mv.get<std::string>());
            }
            continue;
        }
        const std::string ctx = "tensor '" + key + "'";
        if (!value.is_object()) throw FormatError(ctx + ": entry is not an object");
        for (const auto& [field, _] : value.items()) {
            if (field != "dtype" && field != "shape" && field != "data_offsets") {
                throw FormatError(ctx + ": unexpected field '" + field + "'");
            }
        }
        if (!value.contains("dtype") || !value["dtype"].is_string()) throw FormatError(ctx + ": missing dtype");
        if (!value.contains("shape") || !value["shape"].is_array()) throw FormatError(ctx + ": missing shape");
        const auto& offsets = value.contains("data_offsets") ? value["data_offsets"] : nlohmann::json();
        if (!offsets.is_array() || offsets.size() != 2) throw FormatError(ctx + ": missing data_offsets pair");

        const auto tag = value["dtype"].get<std::string>();
        const auto dtype = parse_dtype(tag);
        if (!dtype) throw UnsupportedDtype(ctx + ": dtype '" + tag + "'");

        Entry e{key, *dtype, {}, json_u64(offsets[0], ctx), json_u64(offsets[1], ctx)};
        for (const auto& d : value["shape"]) e.shape.push_back(json_u64(d, ctx + " shape"));
        if (e.end < e.begin || e.end > buffer.size()) {
            throw FormatError(fmt::format("{}: offsets [{}, {}) outside buffer of {} bytes", ctx, e.begin,
                                          e.end, buffer.size()));
        }
        std::uint64_t nbytes = 0;
        if (__builtin_mul_overflow(element_count(e.shape), dtype_size(e.dtype), &nbytes) ||
            nbytes != e.end - e.begin) {
            throw FormatError(fmt::format("{}: {} bytes declared for shape {} of {}", ctx, e.end - e.begin,
                                          shape_to_string(e.shape), tag));
        }
        entries.push_back(std::move(e));
    }

    std::vector<const Entry*> by_offset;
    for (const auto& e : entries) by_offset.push_back(&e);
    std::sort(by_offset.begin(), by_offset.end(), [](const Entry* a, const Entry* b) {
        return a->begin != b->begin ? a->begin < b->begin : a->end < b->end;
    });
    std::uint64_t covered = 0;
    for (const auto* e : by_offset) {
        if (e->begin == e->end) continue;
        if (e->begin < covered) throw FormatError("tensor '" + e->name + "': data overlaps another tensor");
        covered = e->end;
    }

    for (auto& e : entries) {
        auto span = buffer.subspan(e.begin, e.end - e.begin);
        ckpt.add(TensorData(e.name, e.dtype, std::move(e.shape), {span.begin(), span.end()}));
    }
    return ckpt;
}

std::vector<std::byte> serialize_checkpoint(const Checkpoint& ckpt) {
    nlohmann::json header = nlohmann::json::object();
    if (!ckpt.metadata().empty()) {
        auto& meta = header["__metadata__"] = nlohmann::json::object();
        for (const auto& [k, v] : ckpt.metadata()) meta[k] = v;
    }
    std::uint64_t offset = 0;
    for (const auto& [name, t] : ckpt.tensors()) {
        const std::uint64_t end = offset + t.bytes().size();
        header[name] = {{"dtype", dtype_tag(t.dtype())}, {"shape", t.shape()}, {"data_offsets", {offset, end}}};
        offset = end;
    }
    std::string text = header.dump();
    // Pad with spaces so the buffer starts 8-byte aligned.
    text.append((8 - text.size() % 8) % 8, ' ');

    std::vector<std::byte> out(8 + text.size() + offset);
    const std::uint64_t header_len = text.size();
    std::memcpy(out.data(), &header_len, 8);
    std::memcpy(out.data() + 8, text.data(), text.size());
    auto* cursor = out.data() + 8 + text.size();
    for (const auto& [name, t] : ckpt.tensors()) {
        if (!t.bytes().empty()) std::memcpy(cursor, t.bytes().data(), t.bytes().size());
        cursor += t.bytes().size();
    }
    return out;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    const auto size = static_cast<std::size_t>(in.tellg());
    std::vector<std::byte> bytes(size);
    in.seekg(0);
    if (size && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size))) {
        throw IoError("short read from '" + path.string() + "'");
    }
    try {
        return parse_checkpoint(bytes);
    } catch (const Error& e) {
        rethrow_with_context(e, path.string());
    }
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const auto bytes = serialize_checkpoint(ckpt);
    auto tmp = path;
    tmp += ".partial";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            std::error_code ec;
            std::filesystem::remove(tmp, ec);
            throw IoError("write to '" + tmp.string() + "' failed");
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw IoError("cannot move output into '" + path.string() + "'");
    }
}

}  // namespace ckptmerge
