// Copyright (c) 2026, The ckptmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Task vectors: per-tensor deltas between a fine-tuned checkpoint and its base.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ckptmerge/checkpoint.hpp"

namespace ckptmerge {

/// Promoted (double precision) tensor values, row-major.
struct DenseTensor {
    Shape shape;
    std::vector<double> values;

    bool operator==(const DenseTensor&) const = default;
};

class TaskVector {
public:
    using DeltaMap = std::map<std::string, DenseTensor, std::less<>>;

    TaskVector() = default;
    TaskVector(DeltaMap deltas, std::string base_fingerprint, std::string label)
        : deltas_(std::move(deltas)), base_fingerprint_(std::move(base_fingerprint)), label_(std::move(label)) {}

    const DeltaMap& deltas() const noexcept { return deltas_; }
    DeltaMap& deltas() noexcept { return deltas_; }
    const DenseTensor& at(std::string_view name) const;

    const std::string& base_fingerprint() const noexcept { return base_fingerprint_; }
    const std::string& label() const noexcept { return label_; }
    void set_label(std::string label) { label_ = std::move(label); }

private:
    DeltaMap deltas_;
    std::string base_fingerprint_;
    std::string label_;
};

enum class TensorKind { Matrix2D, FoldedND, Vector1D, Scalar0D };

std::string_view tensor_kind_name(TensorKind kind);

struct TensorClass {
    TensorKind kind = TensorKind::Scalar0D;
    // Matrix view used by subspace methods; only meaningful for matrix kinds.
    std::uint64_t rows = 0;
    std::uint64_t cols = 0;

    bool is_matrix() const noexcept { return kind == TensorKind::Matrix2D || kind == TensorKind::FoldedND; }
};

/// 2-D keeps its shape; N-D folds to [dim0, product(rest)]; 1-D and 0-D are
/// handled element-wise by subspace methods.
TensorClass classify_tensor(const Shape& shape);
inline TensorClass classify_tensor(const TensorData& t) { return classify_tensor(t.shape()); }

/// tau = theta_t - theta_0 in double precision. Throws StructureMismatch when
/// the checkpoints are not compatible.
TaskVector compute_task_vector(const Checkpoint& theta_t, const Checkpoint& theta_0, std::string label);

/// theta_0 + lambda * tau, written in theta_0's dtype unless `out_dtype` is
/// given. Throws BaseMismatch when tau was computed against another base.
Checkpoint apply_task_vector(const Checkpoint& theta_0, const TaskVector& tau, double lambda,
                             std::optional<DType> out_dtype = std::nullopt);

/// sum_t weights[t] * taus[t].
TaskVector linear_combine(std::span<const TaskVector> taus, std::span<const double> weights);

/// Throws EmptyInput for an empty list and BaseMismatch unless every task
/// vector shares `base_fingerprint`.
void require_same_base(std::span<const TaskVector> taus, std::string_view base_fingerprint);

/// Persists deltas as F32 (F64 where the base tensor is F64) with the
/// "base_fingerprint" and "label" metadata keys.
Checkpoint task_vector_to_checkpoint(const TaskVector& tau, const Checkpoint& theta_0);
/// Throws FormatError when the "base_fingerprint" metadata key is absent.
TaskVector task_vector_from_checkpoint(const Checkpoint& ckpt);

void save_task_vector(const TaskVector& tau, const Checkpoint& theta_0, const std::filesystem::path& path);
TaskVector load_task_vector(const std::filesystem::path& path);

}  // namespace ckptmerge
