// Copyright (c) 2026, The ckptmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
#include "ckptmerge/taskvec.hpp"

#include <fmt/core.h>

#include "ckptmerge/errors.hpp"

namespace ckptmerge {

namespace {

constexpr const char* kFingerprintKey = "base_fingerprint";
constexpr const char* kLabelKey = "label";

}  // namespace

const DenseTensor& TaskVector::at(std::string_view name) const {
    auto it = deltas_.find(name);
    if (it == deltas_.end()) throw StructureMismatch(fmt::format("task vector has no tensor '{}'", name));
    return it->second;
}

std::string_view tensor_kind_name(TensorKind kind) {
    switch (kind) {
        case TensorKind::Matrix2D: return "matrix";
        case TensorKind::FoldedND: return "folded";
        case TensorKind::Vector1D: return "vector";
        case TensorKind::Scalar0D: return "scalar";
    }
    return "?";
}

TensorClass classify_tensor(const Shape& shape) {
    switch (shape.size()) {
        case 0: return {TensorKind::Scalar0D, 0, 0};
        case 1: return {TensorKind::Vector1D, 0, 0};
        case 2: return {TensorKind::Matrix2D, shape[0], shape[1]};
        default: {
            std::uint64_t rest = 1;
            for (std::size_t i = 1; i < shape.size(); ++i) rest *= shape[i];
            return {TensorKind::FoldedND, shape[0], rest};
        }
    }
}

TaskVector compute_task_vector(const Checkpoint& theta_t, const Checkpoint& theta_0, std::string label) {
    require_compatible(theta_0, theta_t, "task vector '" + label + "'");
    TaskVector::DeltaMap deltas;
    for (const auto& [name, base] : theta_0.tensors()) {
        auto values = theta_t.at(name).to_double();
        const auto base_values = base.to_double();
        for (std::size_t i = 0; i < values.size(); ++i) values[i] -= base_values[i];
        deltas.emplace(name, DenseTensor{base.shape(), std::move(values)});
    }
    return TaskVector(std::move(deltas), theta_0.fingerprint(), std::move(label));
}

Checkpoint apply_task_vector(const Checkpoint& theta_0, const TaskVector& tau, double lambda,
                             std::optional<DType> out_dtype) {
    if (tau.base_fingerprint() != theta_0.fingerprint()) {
        throw BaseMismatch(fmt::format("task vector '{}' was computed against base {}, not {}", tau.label(),
                                       tau.base_fingerprint(), theta_0.fingerprint()));
    }
    Checkpoint out;
    out.metadata() = theta_0.metadata();
    for (const auto& [name, base] : theta_0.tensors()) {
        const auto& delta = tau.at(name);
        if (delta.shape != base.shape()) {
            throw StructureMismatch(fmt::format("task vector tensor '{}' has shape {}, base has {}", name,
                                                shape_to_string(delta.shape), shape_to_string(base.shape())));
        }
        auto values = base.to_double();
        for (std::size_t i = 0; i < values.size(); ++i) values[i] += lambda * delta.values[i];
        out.add(TensorData::from_values(name, out_dtype.value_or(base.dtype()), base.shape(), values));
    }
    return out;
}

void require_same_base(std::span<const TaskVector> taus, std::string_view base_fingerprint) {
    if (taus.empty()) throw EmptyInput("no task vectors given");
    for (const auto& tau : taus) {
        if (tau.base_fingerprint() != base_fingerprint) {
            throw BaseMismatch(fmt::format("task vector '{}' has base {}, expected {}", tau.label(),
                                           tau.base_fingerprint(), base_fingerprint));
        }
    }
}

TaskVector linear_combine(std::span<const TaskVector> taus, std::span<const double> weights) {
    if (taus.empty()) throw EmptyInput("linear_combine: no task vectors");
    if (taus.size() != weights.size()) {
        throw InvalidParameter(fmt::format("linear_combine: {} task vectors but {} weights", taus.size(),
                                           weights.size()));
    }
    require_same_base(taus, taus.front().base_fingerprint());
    TaskVector::DeltaMap out;
    for (const auto& [name, first] : taus.front().deltas()) {
        DenseTensor acc{first.shape, std::vector<double>(first.values.size(), 0.0)};
        for (std::size_t t = 0; t < taus.size(); ++t) {
            const auto& d = taus[t].at(name);
            if (d.shape != acc.shape) throw StructureMismatch("linear_combine: shape mismatch at '" + name + "'");
            for (std::size_t i = 0; i < d.values.size(); ++i) acc.values[i] += weights[t] * d.values[i];
        }
        out.emplace(name, std::move(acc));
    }
    for (const auto& tau : taus) {
        if (tau.deltas().size() != out.size()) throw StructureMismatch("linear_combine: tensor sets differ");
    }
    return TaskVector(std::move(out), taus.front().base_fingerprint(), "combined");
}

Checkpoint task_vector_to_checkpoint(const TaskVector& tau, const Checkpoint& theta_0) {
    if (tau.base_fingerprint() != theta_0.fingerprint()) {
        throw BaseMismatch("task vector '" + tau.label() + "' does not belong to this base");
    }
    Checkpoint out;
    out.metadata()[kFingerprintKey] = tau.base_fingerprint();
    out.metadata()[kLabelKey] = tau.label();
    for (const auto& [name, delta] : tau.deltas()) {
        const DType dtype = theta_0.at(name).dtype() == DType::F64 ? DType::F64 : DType::F32;
        out.add(TensorData::from_values(name, dtype, delta.shape, delta.values));
    }
    return out;
}

TaskVector task_vector_from_checkpoint(const Checkpoint& ckpt) {
    auto fp = ckpt.metadata().find(kFingerprintKey);
    if (fp == ckpt.metadata().end()) throw FormatError("not a task vector: no 'base_fingerprint' metadata");
    auto label = ckpt.metadata().find(kLabelKey);
    TaskVector::DeltaMap deltas;
    for (const auto& [name, t] : ckpt.tensors()) deltas.emplace(name, DenseTensor{t.shape(), t.to_double()});
    return TaskVector(std::move(deltas), fp->second, label == ckpt.metadata().end() ? "" : label->second);
}

void save_task_vector(const TaskVector& tau, const Checkpoint& theta_0, const std::filesystem::path& path) {
    save_checkpoint(task_vector_to_checkpoint(tau, theta_0), path);
}

TaskVector load_task_vector(const std::filesystem::path& path) {
    return task_vector_from_checkpoint(load_checkpoint(path));
}

}  // namespace ckptmerge
