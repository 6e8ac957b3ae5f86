// Copyright (c) 2026, The ckptmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Merge recipes: a YAML document naming the method, its inputs and every
// hyperparameter.
//
//   method: boosted_tsvm
//   base: base.safetensors
//   models:
//     - path: asr_en.safetensors
//       label: en
//     - asr_de.safetensors
//   output: merged.safetensors
//   params:
//     lambda: 1.0
//     beta: 0.3
#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ckptmerge/checkpoint.hpp"
#include "ckptmerge/merge_ps.hpp"
#include "ckptmerge/merge_subspace.hpp"
#include "ckptmerge/merge_tau.hpp"

namespace ckptmerge {

enum class MethodFamily { ParameterSpace, TaskSpace, Subspace };

/// soup, model_stock, karcher, multi_slerp, ta, ties, pcb, sce, tsvm,
/// boosted_tsvm, iso_c, iso_cts.
std::span<const std::string_view> method_names();
bool is_known_method(std::string_view method);
/// Throws UnknownMethod.
MethodFamily method_family(std::string_view method);

struct ModelRef {
    std::string path;
    std::string label;

    bool operator==(const ModelRef&) const = default;
};

/// Every hyperparameter a recipe may set. Only the ones a method uses are
/// accepted when parsing and written when serializing.
struct RecipeParams {
    double lambda = 1.0;
    std::optional<double> rank_fraction;  // unset: 1 / T
    double beta = 0.3;
    double epsilon = 1e-12;
    Orthogonalizer orthogonalizer = Orthogonalizer::NewtonSchulz;
    int ns_iterations = 5;
    NsSchedule ns_schedule = NsSchedule::Quintic;
    double min_condition = 1e-8;
    double common_fraction = 0.5;
    double density = 0.2;
    double retain_fraction = 0.1;
    double select_fraction = 0.1;
    double temperature = 1.0;
    bool include_base = true;
    std::vector<double> weights;
    double tolerance = 1e-5;
    int max_iterations = 10;
    std::optional<DType> out_dtype;
    unsigned threads = 1;

    bool operator==(const RecipeParams&) const = default;
};

struct MergeRecipe {
    std::string method;
    std::string base_path;
    std::vector<ModelRef> models;
    std::string output_path;
    RecipeParams params;

    /// rank_fraction, or 1 / T when unset.
    double effective_rank_fraction() const;

    bool operator==(const MergeRecipe&) const = default;
};

/// Method defaults, e.g. lambda 0.4 for ta and include_base off for
/// model_stock.
RecipeParams default_params(std::string_view method);

/// Parameter names accepted for a method.
std::span<const std::string_view> accepted_params(std::string_view method);

/// Parses and validates a recipe and fills in defaults. Throws FormatError
/// for malformed YAML or unknown keys, UnknownMethod, MissingField for
/// absent paths and InvalidParameter for out-of-range values.
MergeRecipe parse_recipe(std::string_view text);
MergeRecipe load_recipe(const std::filesystem::path& path);

/// Canonical YAML with every accepted parameter spelled out.
std::string serialize_recipe(const MergeRecipe& recipe);

/// Method configs built from a recipe.
PsMergeConfig ps_config(const MergeRecipe& recipe);
TauMergeConfig tau_config(const MergeRecipe& recipe);
SubspaceMergeConfig subspace_config(const MergeRecipe& recipe);

/// Range checks on the method config (run by parse_recipe).
void validate(const MergeRecipe& recipe);

std::string_view orthogonalizer_name(Orthogonalizer o);
std::string_view ns_schedule_name(NsSchedule s);

}  // namespace ckptmerge
