// Copyright (c) 2026, The ckptmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic task-vector suite with known ground-truth subspaces.
//
// Task t gets tau_t = U_t diag(decay^0, ..., decay^(rank-1)) V_t^T plus
// Gaussian noise of spectral scale ~ noise. With overlap 0 the U_t (and V_t)
// span disjoint blocks of one random orthogonal basis; overlap o mixes in a
// shared block, U_t = orth(sqrt(o) S + sqrt(1 - o) B_t), so o = 1 gives
// identical subspaces.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ckptmerge/linalg.hpp"

namespace ckptmerge {

struct SynthSpec {
    int tasks = 4;
    int rows = 64;
    int cols = 64;
    int rank = 4;
    double decay = 0.7;
    double overlap = 0.0;
    double noise = 0.05;
    int seeds = 20;
    std::uint64_t seed = 1;  // first seed; runs use seed, seed + 1, ...
    std::vector<std::string> methods = {"ta", "tsvm", "boosted_tsvm"};
    std::vector<double> betas = {1.0, 0.6, 0.3, 0.05};
    double lambda = 1.0;
    // Subspace methods' rank_fraction; unset means rank / min(rows, cols).
    std::optional<double> rank_fraction;
};

/// Throws InvalidParameter for an infeasible spec (rank * tasks > min(rows,
/// cols)) or out-of-range values and UnknownMethod for unknown names.
void validate(const SynthSpec& spec);

/// YAML mapping with the SynthSpec field names; unknown keys are rejected.
SynthSpec parse_synth_spec(std::string_view text);

struct SynthTask {
    linalg::Matrix clean;  // noiseless low-rank part
    linalg::Matrix tau;    // clean + noise
    linalg::Matrix u;      // rows x rank ground-truth left basis
    linalg::Matrix v;      // cols x rank ground-truth right basis
};

std::vector<SynthTask> generate_tasks(const SynthSpec& spec, std::uint64_t seed);

/// Retention metrics of one merged matrix against the tasks that produced it.
struct SynthMetrics {
    double stable_rank = 0.0;
    // Mean over tasks of the mean squared cosine of the principal angles
    // between the task's right subspace and the leading min(T * rank,
    // min(rows, cols)) right singular vectors of the merged matrix.
    double retention = 0.0;
    // Mean over tasks of the largest of those angles, in degrees.
    double max_angle_deg = 0.0;
    // ||merged - sum_t clean_t||_F / ||sum_t clean_t||_F.
    double recon_error = 0.0;
};

SynthMetrics evaluate_merge(const linalg::Matrix& merged, const std::vector<SynthTask>& tasks);

/// Merged delta of one method on raw task matrices (zero base).
linalg::Matrix merge_matrices(std::string_view method, const std::vector<linalg::Matrix>& taus,
                              const SynthSpec& spec, std::optional<double> beta);

struct SynthRow {
    std::string method;
    std::optional<double> beta;  // boosted_tsvm only
    SynthMetrics metrics;        // averaged over seeds
};

/// One row per method, or per beta for boosted_tsvm, in spec order.
std::vector<SynthRow> synth_eval(const SynthSpec& spec);

/// Header: method,beta,stable_rank,retention,max_angle_deg,recon_error.
std::string format_synth_csv(const std::vector<SynthRow>& rows);

}  // namespace ckptmerge
