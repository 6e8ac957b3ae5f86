// Copyright (c) 2026, The ckptmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace ckptmerge {

/// Diagnostics for one merged tensor. Optional fields are absent where the
/// method does not produce them (e.g. no rank for element-wise methods).
struct TensorRecord {
    std::string name;
    std::string kind;      // matrix, folded, vector, scalar
    std::string handling;  // how the tensor was merged, e.g. "subspace", "mean_fallback"
    std::optional<std::int64_t> retained_rank;
    std::optional<double> energy_captured;
    std::optional<double> ortho_residual;
    std::vector<std::int64_t> s_star;  // one entry per task (boosted merges)
    std::optional<double> boost_energy_ratio;
    std::optional<int> iterations;
    bool fallback_used = false;
    // Method-specific scalars, written as `key=value` after the fixed fields.
    std::vector<std::pair<std::string, double>> extras;
};

struct MergeReport {
    std::string method;
    std::vector<TensorRecord> per_tensor;
    std::vector<std::string> warnings;
    double wall_time_s = 0.0;

    std::size_t fallback_count() const;
    std::size_t subspace_count() const;
};

/// Line-oriented text: a header line, a summary line, one tab-separated
/// `tensor` record per merged tensor and one `warning` line per warning.
/// Wall time is left out so identical runs give identical files.
std::string serialize_report(const MergeReport& report);
void save_report(const MergeReport& report, const std::filesystem::path& path);

}  // namespace ckptmerge
