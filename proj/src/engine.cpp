// Copyright (c) 2026, The ckptmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
#include "ckptmerge/engine.hpp"

#include <algorithm>
#include <chrono>

#include <fmt/core.h>
#include <fmt/ranges.h>

#include "ckptmerge/errors.hpp"
#include "ckptmerge/linalg.hpp"

namespace ckptmerge {

namespace fs = std::filesystem;

namespace {

fs::path resolve(const fs::path& dir, const std::string& p) {
    const fs::path path(p);
    if (path.is_absolute() || dir.empty()) return path;
    return dir / path;
}

bool is_task_vector_file(const Checkpoint& ckpt) { return ckpt.metadata().contains("base_fingerprint"); }

std::string label_for(const ModelRef& ref, std::size_t index) {
    if (!ref.label.empty()) return ref.label;
    return fmt::format("model{}", index);
}

MergeResult dispatch(const MergeRecipe& recipe, const Checkpoint& base, const fs::path& dir,
                     std::optional<DType> out_dtype) {
    const auto family = method_family(recipe.method);
    if (family == MethodFamily::ParameterSpace) {
        std::vector<Checkpoint> models;
        for (std::size_t i = 0; i < recipe.models.size(); ++i) {
            const auto path = resolve(dir, recipe.models[i].path);
            auto ckpt = load_checkpoint(path);
            if (is_task_vector_file(ckpt)) ckpt = apply_task_vector(base, task_vector_from_checkpoint(ckpt), 1.0);
            models.push_back(std::move(ckpt));
        }
        auto cfg = ps_config(recipe);
        if (out_dtype) cfg.out_dtype = out_dtype;
        const Checkpoint* b = cfg.include_base ? &base : nullptr;
        switch (cfg.method) {
            case PsMethod::Soup: return soup(models, b, cfg);
            case PsMethod::ModelStock: return model_stock(models, base, cfg);
            case PsMethod::Karcher: return karcher_mean(models, b, cfg);
            case PsMethod::MultiSlerp: return multi_slerp(models, b, cfg);
        }
    }

    std::vector<TaskVector> taus;
    for (std::size_t i = 0; i < recipe.models.size(); ++i) {
        const auto& ref = recipe.models[i];
        const auto path = resolve(dir, ref.path);
        auto ckpt = load_checkpoint(path);
        if (is_task_vector_file(ckpt)) {
            auto tau = task_vector_from_checkpoint(ckpt);
            if (!ref.label.empty()) tau.set_label(ref.label);
            taus.push_back(std::move(tau));
        } else {
            try {
                taus.push_back(compute_task_vector(ckpt, base, label_for(ref, i)));
            } catch (const Error& e) {
                rethrow_with_context(e, path.string());
            }
        }
    }
    if (family == MethodFamily::TaskSpace) {
        auto cfg = tau_config(recipe);
        if (out_dtype) cfg.out_dtype = out_dtype;
        switch (cfg.method) {
            case TauMethod::TaskArithmetic: return task_arithmetic(base, taus, cfg.lambda, cfg);
            case TauMethod::Ties: return ties(base, taus, cfg);
            case TauMethod::Pcb: return pcb(base, taus, cfg);
            case TauMethod::Sce: return sce(base, taus, cfg);
        }
    }
    auto cfg = subspace_config(recipe);
    if (out_dtype) cfg.out_dtype = out_dtype;
    switch (cfg.method) {
        case SubspaceMethod::TsvM: return tsv_merge(base, taus, cfg);
        case SubspaceMethod::BoostedTsvM: return boosted_tsv_merge(base, taus, cfg);
        case SubspaceMethod::IsoC: return iso_c(base, taus, cfg);
        case SubspaceMethod::IsoCts: return iso_cts(base, taus, cfg);
    }
    throw UnknownMethod(recipe.method);
}

void remove_quietly(const fs::path& p) {
    std::error_code ec;
    fs::remove(p, ec);
}

}  // namespace

fs::path report_path_for(const fs::path& output) {
    auto p = output;
    p += ".report.txt";
    return p;
}

MergeReport run_merge(const MergeRecipe& recipe, const RunOptions& options) {
    const auto start = std::chrono::steady_clock::now();
    validate(recipe);
    const auto output = resolve(options.working_dir, recipe.output_path);
    const auto report_path = report_path_for(output);

    const auto base = load_checkpoint(resolve(options.working_dir, recipe.base_path));
    auto result = dispatch(recipe, base, options.working_dir, options.out_dtype);
    result.model.metadata()["merge_method"] = recipe.method;

    bool wrote_output = false;
    try {
        save_checkpoint(result.model, output);
        wrote_output = true;
        save_report(result.report, report_path);
    } catch (...) {
        if (wrote_output) remove_quietly(output);
        remove_quietly(report_path);
        throw;
    }
    result.report.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result.report;
}

std::vector<SpectrumSummary> inspect(const Checkpoint& ckpt, std::size_t top_k) {
    std::vector<SpectrumSummary> out;
    for (const auto& [name, t] : ckpt.tensors()) {
        const auto cls = classify_tensor(t);
        if (!cls.is_matrix()) continue;
        SpectrumSummary s;
        s.name = name;
        s.shape = t.shape();
        s.kind = std::string(tensor_kind_name(cls.kind));
        const auto values = t.to_double();
        const auto rows = static_cast<linalg::Index>(cls.rows);
        const auto cols = static_cast<linalg::Index>(cls.cols);
        const linalg::Matrix m = Eigen::Map<const linalg::RowMajorMatrix>(values.data(), rows, cols);
        const auto svd = linalg::svd(m);
        const auto k = std::min<linalg::Index>(static_cast<linalg::Index>(top_k), svd.sigma.size());
        const double total = svd.sigma.sum();
        double prefix = 0.0;
        for (linalg::Index i = 0; i < k; ++i) {
            s.top_sigma.push_back(svd.sigma[i]);
            prefix += svd.sigma[i];
            s.energy.push_back(total > 0.0 ? prefix / total : 0.0);
        }
        s.stable_rank = linalg::stable_rank(m);
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<SpectrumSummary> inspect(const fs::path& path, std::size_t top_k) {
    return inspect(load_checkpoint(path), top_k);
}

std::string format_inspection(const std::vector<SpectrumSummary>& spectra) {
    std::string out;
    for (const auto& s : spectra) {
        out += fmt::format("{}\tshape={}\tkind={}\tstable_rank={:.6g}\n", s.name, shape_to_string(s.shape), s.kind,
                           s.stable_rank);
        std::vector<std::string> sig, cum;
        for (double v : s.top_sigma) sig.push_back(fmt::format("{:.6g}", v));
        for (double v : s.energy) cum.push_back(fmt::format("{:.4f}", v));
        out += fmt::format("  sigma  {}\n", fmt::join(sig, " "));
        out += fmt::format("  c(s)   {}\n", fmt::join(cum, " "));
    }
    return out;
}

}  // namespace ckptmerge
