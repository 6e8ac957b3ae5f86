// Copyright (c) 2026, The ckptmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Per-tensor merge plumbing shared by the three method families.
//
// Every method is a TensorKernel: it sees one tensor's promoted base values
// and member values (fine-tuned parameters or task deltas, depending on the
// family) and returns the merged parameter values plus a report record. The
// drivers below feed kernels from checkpoints or task vectors, tensor by
// tensor in name order, and assemble the output checkpoint.
#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ckptmerge/checkpoint.hpp"
#include "ckptmerge/report.hpp"
#include "ckptmerge/taskvec.hpp"

namespace ckptmerge {

struct TensorJob {
    std::string_view name;
    const Shape& shape;
    TensorClass cls;
    std::span<const double> base;  // empty when merging without a base
    std::vector<std::span<const double>> members;
    bool has_base = false;
};

struct TensorOutcome {
    std::vector<double> values;
    TensorRecord record;
    std::vector<std::string> warnings;
};

using TensorKernel = std::function<TensorOutcome(const TensorJob&)>;

struct MergeResult {
    Checkpoint model;
    MergeReport report;
};

/// What kernels receive as members.
enum class MemberKind { Parameters, Deltas };

struct DriverOptions {
    std::string method;
    std::optional<DType> out_dtype;
    unsigned threads = 1;  // 0 = hardware concurrency
};

/// Feeds `kernel` from checkpoints. With MemberKind::Deltas the members are
/// theta_t - theta_0 (a base is then required). Output dtypes follow the base,
/// or the first model when there is none, unless overridden. Errors are
/// rethrown with the tensor name prepended; results do not depend on the
/// thread count.
MergeResult run_on_checkpoints(const Checkpoint* base, std::span<const Checkpoint* const> models, MemberKind kind,
                               const TensorKernel& kernel, const DriverOptions& options);

/// Feeds `kernel` with task-vector deltas against `base`.
MergeResult run_on_task_vectors(const Checkpoint& base, std::span<const TaskVector> taus, const TensorKernel& kernel,
                                const DriverOptions& options);

/// Outcome that returns the base unchanged, used when every delta is zero.
TensorOutcome base_passthrough(const TensorJob& job, std::string handling);

/// base + lambda * mean(members); members are deltas.
std::vector<double> base_plus_scaled_mean(const TensorJob& job, double lambda);

bool all_zero(std::span<const std::span<const double>> members);

TensorRecord make_record(const TensorJob& job, std::string handling);

}  // namespace ckptmerge
