// Copyright (c) 2026, The ckptmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Subspace merging on the matrix view of each task-vector tensor.
//
// Matrix and folded tensors go through truncated SVD factors; vectors and
// scalars fall back to base + lambda * mean(deltas).
#pragma once

#include <optional>
#include <span>

#include "ckptmerge/linalg.hpp"
#include "ckptmerge/merge.hpp"

namespace ckptmerge {

enum class SubspaceMethod { TsvM, BoostedTsvM, IsoC, IsoCts };
enum class Orthogonalizer { Procrustes, NewtonSchulz };
enum class NsSchedule { Quintic, Simple };

struct SubspaceMergeConfig {
    SubspaceMethod method = SubspaceMethod::TsvM;
    double lambda = 1.0;
    // Per-task retained share of min(m, n); unset means 1 / T.
    std::optional<double> rank_fraction;
    double beta = 0.3;
    double epsilon = 1e-12;
    Orthogonalizer orthogonalizer = Orthogonalizer::NewtonSchulz;
    int ns_iterations = 5;
    NsSchedule ns_schedule = NsSchedule::Quintic;
    double common_fraction = 0.5;
    double min_condition = 1e-8;  // Procrustes conditioning threshold
    std::optional<DType> out_dtype;
    unsigned threads = 1;
};

SubspaceMergeConfig default_subspace_config(SubspaceMethod method);

std::span<const linalg::NsCoefficients> resolved_schedule(const SubspaceMergeConfig& cfg);

/// Throws InvalidParameter for out-of-range fractions, beta outside [0, 1],
/// non-positive epsilon or ns_iterations < 1.
void validate(const SubspaceMergeConfig& cfg);

TensorKernel subspace_kernel(const SubspaceMergeConfig& cfg);

/// Truncate each task's SVD, concatenate the factors, whiten U and V
/// separately and reconstruct. Throws InvalidParameter when an explicit
/// rank_fraction gives more than min(m, n) directions in total.
MergeResult tsv_merge(const Checkpoint& base, std::span<const TaskVector> taus,
                      SubspaceMergeConfig cfg = default_subspace_config(SubspaceMethod::TsvM));
/// tsv_merge with every truncated spectrum boosted before concatenation.
MergeResult boosted_tsv_merge(const Checkpoint& base, std::span<const TaskVector> taus,
                              SubspaceMergeConfig cfg = default_subspace_config(SubspaceMethod::BoostedTsvM));
/// mean(sigma) * U V^T of the summed task matrix.
MergeResult iso_c(const Checkpoint& base, std::span<const TaskVector> taus,
                  SubspaceMergeConfig cfg = default_subspace_config(SubspaceMethod::IsoC));
/// Common directions of the summed task matrix plus per-task directions
/// outside them, whitened and given the isotropic spectrum of iso_c.
MergeResult iso_cts(const Checkpoint& base, std::span<const TaskVector> taus,
                    SubspaceMergeConfig cfg = default_subspace_config(SubspaceMethod::IsoCts));

/// Matrix-level kernels (deltas in, merged delta out), for tests and the
/// synthetic harness.
namespace subspace {

struct MatrixMerge {
    linalg::Matrix merged;
    linalg::Index retained_rank = 0;
    double energy_captured = 1.0;
    double ortho_residual = 0.0;
    std::vector<std::int64_t> s_star;
    std::optional<double> boost_energy_ratio;
    std::optional<int> iterations;
};

/// Per-task rank for T tasks on a matrix with min(m, n) = r.
linalg::Index per_task_rank(linalg::Index r, std::size_t tasks, const SubspaceMergeConfig& cfg);

/// Orthonormal-column projection of x with the configured orthogonalizer.
/// Inputs that already have orthonormal columns are returned unchanged.
linalg::Matrix whiten(const linalg::Matrix& x, const SubspaceMergeConfig& cfg);

MatrixMerge tsv(std::span<const linalg::Matrix> taus, const SubspaceMergeConfig& cfg);
MatrixMerge iso_c(std::span<const linalg::Matrix> taus, const SubspaceMergeConfig& cfg);
MatrixMerge iso_cts(std::span<const linalg::Matrix> taus, const SubspaceMergeConfig& cfg);

}  // namespace subspace

}  // namespace ckptmerge
