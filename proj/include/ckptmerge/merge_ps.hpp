// Copyright (c) 2026, The ckptmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Parameter-space merging: methods that combine the full parameters of each
// tensor directly, treating every tensor as one flattened vector.
#pragma once

#include <optional>
#include <span>
#include <vector>

#include "ckptmerge/merge.hpp"

namespace ckptmerge {

enum class PsMethod { Soup, ModelStock, Karcher, MultiSlerp };

struct PsMergeConfig {
    PsMethod method = PsMethod::Soup;
    // Count the base as one more member (Soup, Karcher, MultiSlerp).
    bool include_base = false;
    // Per-member weights, models first and the base last when included.
    // Empty means uniform.
    std::vector<double> weights;
    double tolerance = 1e-5;
    int max_iterations = 10;
    std::optional<DType> out_dtype;
    unsigned threads = 1;
};

/// Throws InvalidParameter for negative or mis-sized weights, a non-positive
/// tolerance or max_iterations < 1.
void validate(const PsMergeConfig& cfg, std::size_t member_count);

/// Per-tensor kernel; members are fine-tuned parameters and the job base is
/// the base model's parameters (or empty).
TensorKernel ps_kernel(const PsMergeConfig& cfg);

/// Element-wise (weighted) mean of the models, with the base as one more
/// member when given.
MergeResult soup(std::span<const Checkpoint> models, const Checkpoint* base, PsMergeConfig cfg = {});

/// base + t * mean(tau), t = k cos / (1 + (k - 1) cos) from the mean pairwise
/// cosine of the task vectors (clamped to [0, 1]), k = model count. Requires
/// at least two models.
MergeResult model_stock(std::span<const Checkpoint> models, const Checkpoint& base, PsMergeConfig cfg = {});

/// Spherical (Karcher) mean of the normalized tensors by tangent-space
/// fixed-point iteration, rescaled to the mean input norm. `base` joins as a
/// member when cfg.include_base is set.
MergeResult karcher_mean(std::span<const Checkpoint> models, const Checkpoint* base, PsMergeConfig cfg = {});

/// One tangent-space average at the normalized Euclidean mean direction,
/// mapped back to the sphere and rescaled to the mean input norm.
MergeResult multi_slerp(std::span<const Checkpoint> models, const Checkpoint* base, PsMergeConfig cfg = {});

/// Pure kernels on flattened vectors, exposed for tests and the synthetic
/// harness.
namespace sphere {

struct SphereMean {
    std::vector<double> values;
    int iterations = 0;
    bool converged = true;
    double tangent_norm = 0.0;
};

SphereMean karcher(std::span<const std::span<const double>> points, std::span<const double> weights,
                   double tolerance, int max_iterations);
SphereMean multi_slerp(std::span<const std::span<const double>> points, std::span<const double> weights);

}  // namespace sphere

/// k cos / (1 + (k - 1) cos) with cos clamped to [0, 1].
double model_stock_ratio(double mean_cosine, std::size_t k);

}  // namespace ckptmerge
