// Copyright (c) 2026, The ckptmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
// ckptmerge command-line front end.
//
//   ckptmerge merge <recipe> [--out-dtype f32]
//   ckptmerge diff <base> <tuned> -o <tau>
//   ckptmerge inspect <path> [--top-k N]
//   ckptmerge synth-eval <spec> [-o metrics.csv]
//   ckptmerge validate <recipe>
//
// Exit status: 0 on success, 1 for invalid input, 2 for numerical failures.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/core.h>

#include "ckptmerge/engine.hpp"
#include "ckptmerge/errors.hpp"
#include "ckptmerge/synth.hpp"
#include "ckptmerge/taskvec.hpp"

namespace {

using namespace ckptmerge;
namespace fs = std::filesystem;

constexpr int kExitInvalid = 1;
constexpr int kExitNumerical = 2;

int exit_code(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Numerical:
        case ErrorKind::IllConditioned:
        case ErrorKind::DegenerateInput: return kExitNumerical;
        default: return kExitInvalid;
    }
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(fmt::format("cannot open '{}'", path.string()));
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::optional<DType> dtype_option(const std::string& s) {
    if (s.empty()) return std::nullopt;
    const auto d = parse_dtype(s);
    if (!d) throw InvalidParameter(fmt::format("unknown dtype '{}' (f16, bf16, f32, f64)", s));
    return d;
}

void print_report_summary(const MergeReport& report, const fs::path& output) {
    fmt::print("merged {} tensors with {} ({} subspace, {} fallback)\n", report.per_tensor.size(), report.method,
               report.subspace_count(), report.fallback_count());
    for (const auto& w : report.warnings) fmt::print("warning: {}\n", w);
    fmt::print("output: {}\nreport: {}\nwall time: {:.3f} s\n", output.string(), report_path_for(output).string(),
               report.wall_time_s);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Merge fine-tuned checkpoints that share a base model"};
    app.require_subcommand(1);

    std::string recipe_path, out_dtype;
    auto* merge = app.add_subcommand("merge", "Run a merge recipe");
    merge->add_option("recipe", recipe_path, "Recipe file")->required();
    merge->add_option("--out-dtype", out_dtype, "Output dtype override (f16, bf16, f32, f64)");

    std::string base_path, tuned_path, tau_path, label;
    auto* diff = app.add_subcommand("diff", "Save the task vector tuned - base");
    diff->add_option("base", base_path, "Base checkpoint")->required();
    diff->add_option("tuned", tuned_path, "Fine-tuned checkpoint")->required();
    diff->add_option("-o,--output", tau_path, "Task vector output")->required();
    diff->add_option("--label", label, "Task label stored with the task vector");

    std::string inspect_path;
    std::size_t top_k = 8;
    auto* inspect_cmd = app.add_subcommand("inspect", "Print singular spectra of matrix tensors");
    inspect_cmd->add_option("path", inspect_path, "Checkpoint or task vector")->required();
    inspect_cmd->add_option("--top-k", top_k, "Singular values per tensor")->check(CLI::PositiveNumber);

    std::string spec_path, csv_path;
    auto* synth = app.add_subcommand("synth-eval", "Run the synthetic retention suite");
    synth->add_option("spec", spec_path, "Synthetic suite spec (YAML)")->required();
    synth->add_option("-o,--output", csv_path, "Write the CSV here instead of stdout");

    std::string validate_path;
    auto* validate_cmd = app.add_subcommand("validate", "Parse and check a recipe without merging");
    validate_cmd->add_option("recipe", validate_path, "Recipe file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitInvalid;
    }

    try {
        if (*merge) {
            const auto recipe = load_recipe(recipe_path);
            RunOptions options;
            options.working_dir = fs::path(recipe_path).parent_path();
            options.out_dtype = dtype_option(out_dtype);
            const auto report = run_merge(recipe, options);
            auto output = fs::path(recipe.output_path);
            if (output.is_relative() && !options.working_dir.empty()) output = options.working_dir / output;
            print_report_summary(report, output);
        } else if (*diff) {
            const auto base = load_checkpoint(base_path);
            const auto tuned = load_checkpoint(tuned_path);
            const auto tau = compute_task_vector(tuned, base, label.empty() ? fs::path(tuned_path).stem().string() : label);
            save_task_vector(tau, base, tau_path);
            fmt::print("wrote task vector with {} tensors to {}\n", tau.deltas().size(), tau_path);
        } else if (*inspect_cmd) {
            fmt::print("{}", format_inspection(inspect(fs::path(inspect_path), top_k)));
        } else if (*synth) {
            const auto csv = format_synth_csv(synth_eval(parse_synth_spec(read_text(spec_path))));
            if (csv_path.empty()) {
                fmt::print("{}", csv);
            } else {
                std::ofstream out(csv_path, std::ios::binary | std::ios::trunc);
                if (!out || !(out << csv)) throw IoError(fmt::format("cannot write '{}'", csv_path));
            }
        } else if (*validate_cmd) {
            const auto recipe = load_recipe(validate_path);
            fmt::print("{}", serialize_recipe(recipe));
        }
    } catch (const Error& e) {
        fmt::print(stderr, "error [{}]: {}\n", error_kind_name(e.kind()), e.what());
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return kExitInvalid;
    }
    return 0;
}
