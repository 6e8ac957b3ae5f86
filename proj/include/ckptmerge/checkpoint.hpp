// Copyright (c) 2026, The ckptmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Tensor containers and the safetensors-layout checkpoint reader/writer.
//
// File layout: an 8-byte little-endian header length N, N bytes of UTF-8 JSON
// mapping each tensor name to {"dtype", "shape", "data_offsets"} plus an
// optional "__metadata__" string map, then the raw byte buffer the offsets
// address. Element data is row-major and little-endian.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ckptmerge {

enum class DType { F16, BF16, F32, F64 };

std::size_t dtype_size(DType dtype);
/// Tag written to the file header ("F16", "BF16", "F32", "F64").
std::string_view dtype_tag(DType dtype);
/// Accepts header tags case-insensitively; nullopt for anything else.
std::optional<DType> parse_dtype(std::string_view tag);

using Shape = std::vector<std::uint64_t>;

std::uint64_t element_count(const Shape& shape);
std::string shape_to_string(const Shape& shape);

class TensorData {
public:
    /// Throws FormatError when `data` does not hold exactly
    /// element_count(shape) elements of `dtype`.
    TensorData(std::string name, DType dtype, Shape shape, std::vector<std::byte> data);

    /// Encodes `values` (row-major) into `dtype`, rounding to nearest-even.
    static TensorData from_values(std::string name, DType dtype, Shape shape,
                                  std::span<const double> values);

    const std::string& name() const noexcept { return name_; }
    DType dtype() const noexcept { return dtype_; }
    const Shape& shape() const noexcept { return shape_; }
    std::span<const std::byte> bytes() const noexcept { return data_; }
    std::uint64_t size() const noexcept { return element_count(shape_); }

    /// Elements promoted to double.
    std::vector<double> to_double() const;

    bool operator==(const TensorData&) const = default;

private:
    std::string name_;
    DType dtype_;
    Shape shape_;
    std::vector<std::byte> data_;
};

class Checkpoint {
public:
    using TensorMap = std::map<std::string, TensorData, std::less<>>;
    using Metadata = std::map<std::string, std::string, std::less<>>;

    Checkpoint() = default;

    /// Throws StructureMismatch if a tensor with the same name already exists.
    void add(TensorData tensor);
    /// Inserts or replaces.
    void put(TensorData tensor);

    const TensorMap& tensors() const noexcept { return tensors_; }
    const TensorData* find(std::string_view name) const;
    const TensorData& at(std::string_view name) const;
    bool empty() const noexcept { return tensors_.empty(); }
    std::size_t size() const noexcept { return tensors_.size(); }

    Metadata& metadata() noexcept { return metadata_; }
    const Metadata& metadata() const noexcept { return metadata_; }

    /// Structural hash over (name, dtype, shape) of every tensor, as 16 hex
    /// digits. Independent of tensor values and metadata.
    std::string fingerprint() const;

    bool operator==(const Checkpoint&) const = default;

private:
    TensorMap tensors_;
    Metadata metadata_;
};

struct Mismatch {
    std::string name;
    std::string reason;

    bool operator==(const Mismatch&) const = default;
};

struct CompatibilityReport {
    bool compatible = true;
    std::vector<Mismatch> mismatches;
};

/// Compatible iff both hold the same names with equal dtype and shape per
/// name. Never throws; every violating name is listed once, in name order.
CompatibilityReport check_compatibility(const Checkpoint& a, const Checkpoint& b);

/// Throws StructureMismatch naming the first few mismatches when `b` is not
/// compatible with `a`.
void require_compatible(const Checkpoint& a, const Checkpoint& b, std::string_view what);

Checkpoint parse_checkpoint(std::span<const std::byte> file_bytes);
std::vector<std::byte> serialize_checkpoint(const Checkpoint& ckpt);

Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Writes through a sibling temporary file and renames it into place.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);

/// 64-bit FNV-1a, hex-encoded.
std::string content_hash(std::span<const std::byte> bytes);

}  // namespace ckptmerge
