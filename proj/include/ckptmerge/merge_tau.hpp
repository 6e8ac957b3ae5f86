// Copyright (c) 2026, The ckptmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Task-vector-space merging on flattened per-tensor deltas.
#pragma once

#include <optional>
#include <span>
#include <vector>

#include "ckptmerge/merge.hpp"

namespace ckptmerge {

enum class TauMethod { TaskArithmetic, Ties, Pcb, Sce };

struct TauMergeConfig {
    TauMethod method = TauMethod::TaskArithmetic;
    double lambda = 0.4;
    double density = 0.2;          // TIES: fraction kept by magnitude
    double retain_fraction = 0.1;  // PCB: fraction kept by score
    double select_fraction = 0.1;  // SCE: fraction kept by cross-task variance
    double temperature = 1.0;      // PCB softmax temperature
    double epsilon = 1e-12;
    std::optional<DType> out_dtype;
    unsigned threads = 1;
};

/// Published defaults: TA lambda 0.4; TIES density 0.2 and lambda 1;
/// PCB retain 0.1, temperature 1 and lambda 1; SCE select 0.1 and lambda 1.
TauMergeConfig default_tau_config(TauMethod method);

/// Throws InvalidParameter for fractions outside (0, 1], a non-positive
/// temperature or epsilon, or a non-finite lambda.
void validate(const TauMergeConfig& cfg);

TensorKernel tau_kernel(const TauMergeConfig& cfg);

/// base + lambda * sum_t tau_t.
MergeResult task_arithmetic(const Checkpoint& base, std::span<const TaskVector> taus, double lambda,
                            TauMergeConfig cfg = default_tau_config(TauMethod::TaskArithmetic));
/// Trim to the top-density magnitudes per task, elect the sign of the summed
/// trimmed deltas, average the agreeing entries.
MergeResult ties(const Checkpoint& base, std::span<const TaskVector> taus,
                 TauMergeConfig cfg = default_tau_config(TauMethod::Ties));
/// Score-weighted average with intra-task and inter-task softmax balancing
/// and score-based masking.
MergeResult pcb(const Checkpoint& base, std::span<const TaskVector> taus,
                TauMergeConfig cfg = default_tau_config(TauMethod::Pcb));
/// Variance-based coordinate selection, energy-proportional task weights and
/// sign-consistent erasure. Needs at least two task vectors.
MergeResult sce(const Checkpoint& base, std::span<const TaskVector> taus,
                TauMergeConfig cfg = default_tau_config(TauMethod::Sce));

namespace tau {

/// Mask of the k largest scores; equal scores go to the lower index.
std::vector<char> top_k_mask(std::span<const double> scores, std::size_t k);

/// max(1, floor(fraction * n)), capped at n (0 when n is 0).
std::size_t kept_count(std::size_t n, double fraction);

/// Merged deltas (before lambda). Members are one tensor's task deltas.
std::vector<double> ties_merge(std::span<const std::span<const double>> taus, double density,
                               std::size_t* sign_conflicts = nullptr);
std::vector<double> pcb_merge(std::span<const std::span<const double>> taus, double retain_fraction,
                              double temperature, double epsilon);
std::vector<double> sce_merge(std::span<const std::span<const double>> taus, double select_fraction,
                              double epsilon);

}  // namespace tau

}  // namespace ckptmerge
