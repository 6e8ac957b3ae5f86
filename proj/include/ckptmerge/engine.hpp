// Copyright (c) 2026, The ckptmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Recipe execution and checkpoint inspection.
#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ckptmerge/recipe.hpp"
#include "ckptmerge/report.hpp"

namespace ckptmerge {

struct RunOptions {
    // Relative recipe paths resolve against this directory.
    std::filesystem::path working_dir;
    // Overrides the recipe's out_dtype.
    std::optional<DType> out_dtype;
};

/// Path of the report written next to a merged checkpoint.
std::filesystem::path report_path_for(const std::filesystem::path& output);

/// Loads the inputs, merges, writes the output checkpoint and its report.
/// Models may be fine-tuned checkpoints or saved task vectors. On failure no
/// output or report is left behind and the error carries tensor context.
MergeReport run_merge(const MergeRecipe& recipe, const RunOptions& options = {});

struct SpectrumSummary {
    std::string name;
    Shape shape;
    std::string kind;
    std::vector<double> top_sigma;
    double stable_rank = 0.0;
    // c(s) for s = 1..top_sigma.size(): share of the singular value sum held
    // by the leading s values.
    std::vector<double> energy;
};

/// Spectra of every matrix or folded tensor, in name order.
std::vector<SpectrumSummary> inspect(const Checkpoint& ckpt, std::size_t top_k);
std::vector<SpectrumSummary> inspect(const std::filesystem::path& path, std::size_t top_k);
std::string format_inspection(const std::vector<SpectrumSummary>& spectra);

}  // namespace ckptmerge
