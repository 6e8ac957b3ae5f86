// Copyright (c) 2026, The ckptmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
#include "ckptmerge/merge_subspace.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/core.h>

#include "ckptmerge/errors.hpp"

namespace ckptmerge {

using linalg::Index;
using linalg::Matrix;
using linalg::Vector;

namespace {

constexpr double kOrthonormalTolerance = 1e-12;

const char* method_name(SubspaceMethod m) {
    switch (m) {
        case SubspaceMethod::TsvM: return "tsvm";
        case SubspaceMethod::BoostedTsvM: return "boosted_tsvm";
        case SubspaceMethod::IsoC: return "iso_c";
        case SubspaceMethod::IsoCts: return "iso_cts";
    }
    return "?";
}

Matrix to_matrix(std::span<const double> values, Index rows, Index cols) {
    return Eigen::Map<const linalg::RowMajorMatrix>(values.data(), rows, cols);
}

std::vector<double> to_values(const Matrix& m) {
    const linalg::RowMajorMatrix rm = m;
    return {rm.data(), rm.data() + rm.size()};
}

double squared_sum(const Vector& v) { return v.squaredNorm(); }

}  // namespace

SubspaceMergeConfig default_subspace_config(SubspaceMethod method) {
    SubspaceMergeConfig cfg;
    cfg.method = method;
    return cfg;
}

std::span<const linalg::NsCoefficients> resolved_schedule(const SubspaceMergeConfig& cfg) {
    return cfg.ns_schedule == NsSchedule::Quintic ? linalg::quintic_schedule() : linalg::simple_schedule();
}

void validate(const SubspaceMergeConfig& cfg) {
    if (!std::isfinite(cfg.lambda)) throw InvalidParameter("lambda must be finite");
    if (cfg.rank_fraction && !(*cfg.rank_fraction > 0.0 && *cfg.rank_fraction <= 1.0)) {
        throw InvalidParameter(fmt::format("rank_fraction {} outside (0, 1]", *cfg.rank_fraction));
    }
    if (!(cfg.beta >= 0.0 && cfg.beta <= 1.0)) throw InvalidParameter(fmt::format("beta {} outside [0, 1]", cfg.beta));
    if (!(cfg.epsilon > 0.0)) throw InvalidParameter("epsilon must be positive");
    if (cfg.ns_iterations < 1) throw InvalidParameter("ns_iterations must be at least 1");
    if (!(cfg.common_fraction > 0.0 && cfg.common_fraction <= 1.0)) {
        throw InvalidParameter(fmt::format("common_fraction {} outside (0, 1]", cfg.common_fraction));
    }
    if (!(cfg.min_condition >= 0.0)) throw InvalidParameter("min_condition must be non-negative");
}

namespace subspace {

Index per_task_rank(Index r, std::size_t tasks, const SubspaceMergeConfig& cfg) {
    const auto t = static_cast<Index>(tasks);
    if (!cfg.rank_fraction) {
        if (r < t) return 0;
        return linalg::truncated_rank(r, 1.0 / static_cast<double>(tasks));
    }
    const Index k = linalg::truncated_rank(r, *cfg.rank_fraction);
    if (k * t > r) {
        throw InvalidParameter(fmt::format("{} tasks x rank {} exceeds min(m, n) = {}; reduce rank_fraction", tasks,
                                           k, r));
    }
    return k;
}

Matrix whiten(const Matrix& x, const SubspaceMergeConfig& cfg) {
    if (x.cols() == 0 || linalg::orthogonality_residual(x) <= kOrthonormalTolerance) return x;
    if (cfg.orthogonalizer == Orthogonalizer::Procrustes) {
        return linalg::procrustes_orthogonalize(x, cfg.min_condition);
    }
    return linalg::newton_schulz_orthogonalize(x, cfg.ns_iterations, resolved_schedule(cfg));
}

namespace {

struct Whitened {
    Matrix u;
    Matrix v_t;
    double residual = 0.0;
};

Whitened whiten_pair(const Matrix& u, const Matrix& v_t, const SubspaceMergeConfig& cfg) {
    Whitened w;
    w.u = whiten(u, cfg);
    w.v_t = whiten(v_t.transpose(), cfg).transpose();
    w.residual = std::max(linalg::orthogonality_residual(w.u), linalg::orthogonality_residual(w.v_t.transpose()));
    return w;
}

std::optional<int> ns_iterations(const SubspaceMergeConfig& cfg) {
    if (cfg.orthogonalizer == Orthogonalizer::NewtonSchulz) return cfg.ns_iterations;
    return std::nullopt;
}

Matrix summed(std::span<const Matrix> taus) {
    Matrix total = taus.front();
    for (std::size_t t = 1; t < taus.size(); ++t) total += taus[t];
    return total;
}

}  // namespace

MatrixMerge tsv(std::span<const Matrix> taus, const SubspaceMergeConfig& cfg) {
    if (taus.empty()) throw EmptyInput("no task matrices");
    const Index r = std::min(taus.front().rows(), taus.front().cols());
    const Index k = per_task_rank(r, taus.size(), cfg);
    if (k == 0) throw InvalidParameter(fmt::format("min(m, n) = {} is below the task count {}", r, taus.size()));
    const bool boosted = cfg.method == SubspaceMethod::BoostedTsvM;

    MatrixMerge out;
    std::vector<linalg::TruncatedSvd> parts;
    parts.reserve(taus.size());
    double kept = 0.0, total = 0.0, original = 0.0, raised = 0.0;
    for (const auto& tau : taus) {
        const auto full = linalg::svd(tau);
        // Null directions carry no signal; keeping them would only feed
        // arbitrary singular vectors into the whitening step.
        auto part = linalg::truncate_to(full, std::min(k, linalg::numerical_rank(full)));
        total += squared_sum(full.sigma);
        kept += squared_sum(part.sigma);
        if (part.retained_rank() == 0) {
            if (boosted) out.s_star.push_back(0);
            continue;
        }
        if (boosted) {
            auto b = linalg::boost_singular_values(part.sigma, cfg.beta, cfg.epsilon);
            original += squared_sum(part.sigma);
            raised += squared_sum(b.values);
            out.s_star.push_back(b.s_star);
            part.sigma = std::move(b.values);
        }
        parts.push_back(std::move(part));
    }
    const auto cat = linalg::block_concat(parts);
    const auto w = whiten_pair(cat.u_cat, cat.v_cat_t, cfg);
    out.merged = linalg::reconstruct(w.u, cat.sigma_block, w.v_t);
    out.retained_rank = cat.width();
    out.energy_captured = total > 0.0 ? kept / total : 1.0;
    out.ortho_residual = w.residual;
    if (boosted) out.boost_energy_ratio = original > 0.0 ? raised / original : 1.0;
    out.iterations = ns_iterations(cfg);
    return out;
}

MatrixMerge iso_c(std::span<const Matrix> taus, const SubspaceMergeConfig& /*cfg*/) {
    if (taus.empty()) throw EmptyInput("no task matrices");
    const auto s = linalg::svd(summed(taus));
    MatrixMerge out;
    const double mean_sigma = s.sigma.size() > 0 ? s.sigma.mean() : 0.0;
    out.merged = mean_sigma * (s.u * s.v_t);
    out.retained_rank = s.retained_rank();
    out.ortho_residual = std::max(linalg::orthogonality_residual(s.u), linalg::orthogonality_residual(s.v_t.transpose()));
    return out;
}

MatrixMerge iso_cts(std::span<const Matrix> taus, const SubspaceMergeConfig& cfg) {
    if (taus.empty()) throw EmptyInput("no task matrices");
    const auto T = static_cast<Index>(taus.size());
    const auto s = linalg::svd(summed(taus));
    const Index r = s.total_rank;
    const Index k_common = linalg::truncated_rank(r, cfg.common_fraction);
    const auto k_task = static_cast<Index>(
        std::floor((1.0 - cfg.common_fraction) * static_cast<double>(r) / static_cast<double>(T) + 1e-9));
    const Index width = k_common + T * k_task;
    if (width > r) {
        throw InvalidParameter(fmt::format("{} accumulated directions exceed min(m, n) = {}", width, r));
    }
    const auto common = linalg::truncate_to(s, k_common);

    std::vector<linalg::TruncatedSvd> blocks{common};
    Index used = k_common;
    if (k_task > 0) {
        for (Index t = 0; t < T; ++t) {
            const Matrix& tau = taus[static_cast<std::size_t>(t)];
            const Matrix residual = tau - common.u * (common.u.transpose() * tau);
            const auto res = linalg::svd(residual);
            const Index keep = std::min(k_task, linalg::numerical_rank(res, s.sigma.size() ? s.sigma[0] : 0.0));
            if (keep == 0) continue;
            blocks.push_back(linalg::truncate_to(res, keep));
            used += keep;
        }
    }
    Matrix u(s.rows(), used), v_t(used, s.cols());
    Index at = 0;
    for (const auto& b : blocks) {
        u.middleCols(at, b.retained_rank()) = b.u;
        v_t.middleRows(at, b.retained_rank()) = b.v_t;
        at += b.retained_rank();
    }
    const auto w = whiten_pair(u, v_t, cfg);
    const double mean_sigma = s.sigma.size() > 0 ? s.sigma.mean() : 0.0;
    MatrixMerge out;
    out.merged = mean_sigma * (w.u * w.v_t);
    out.retained_rank = used;
    out.ortho_residual = w.residual;
    out.iterations = ns_iterations(cfg);
    out.energy_captured = s.sigma.squaredNorm() > 0.0
                              ? common.sigma.squaredNorm() / s.sigma.squaredNorm()
                              : 1.0;
    return out;
}

}  // namespace subspace

TensorKernel subspace_kernel(const SubspaceMergeConfig& cfg) {
    validate(cfg);
    return [cfg](const TensorJob& job) -> TensorOutcome {
        if (job.members.empty()) throw EmptyInput("no task vectors");
        if (all_zero(job.members)) return base_passthrough(job, "zero_delta");

        TensorOutcome out;
        auto fallback = [&](std::string reason) {
            out.record = make_record(job, "mean_fallback");
            out.record.fallback_used = true;
            out.values = base_plus_scaled_mean(job, cfg.lambda);
            if (!reason.empty()) out.warnings.push_back(fmt::format("{}: {}", job.name, reason));
            return out;
        };
        if (!job.cls.is_matrix()) return fallback("");

        const auto rows = static_cast<Index>(job.cls.rows);
        const auto cols = static_cast<Index>(job.cls.cols);
        const Index r = std::min(rows, cols);
        const bool tsv_family = cfg.method == SubspaceMethod::TsvM || cfg.method == SubspaceMethod::BoostedTsvM;
        if (tsv_family && subspace::per_task_rank(r, job.members.size(), cfg) == 0) {
            return fallback(fmt::format("min(m, n) = {} is below the task count {}, used the mean of deltas", r,
                                        job.members.size()));
        }

        std::vector<Matrix> taus;
        taus.reserve(job.members.size());
        for (const auto& m : job.members) taus.push_back(to_matrix(m, rows, cols));

        subspace::MatrixMerge mm;
        switch (cfg.method) {
            case SubspaceMethod::TsvM:
            case SubspaceMethod::BoostedTsvM: mm = subspace::tsv(taus, cfg); break;
            case SubspaceMethod::IsoC: mm = subspace::iso_c(taus, cfg); break;
            case SubspaceMethod::IsoCts: mm = subspace::iso_cts(taus, cfg); break;
        }
        if (!mm.merged.allFinite()) throw NumericalError("merged matrix is not finite");

        out.record = make_record(job, "subspace");
        out.record.retained_rank = mm.retained_rank;
        out.record.energy_captured = mm.energy_captured;
        out.record.ortho_residual = mm.ortho_residual;
        out.record.s_star = std::move(mm.s_star);
        out.record.boost_energy_ratio = mm.boost_energy_ratio;
        out.record.iterations = mm.iterations;

        auto delta = to_values(mm.merged);
        out.values.assign(job.base.begin(), job.base.end());
        for (std::size_t i = 0; i < delta.size(); ++i) out.values[i] += cfg.lambda * delta[i];
        return out;
    };
}

namespace {

MergeResult run_subspace(const Checkpoint& base, std::span<const TaskVector> taus, const SubspaceMergeConfig& cfg) {
    if (taus.empty()) throw EmptyInput(std::string(method_name(cfg.method)) + ": no task vectors");
    return run_on_task_vectors(base, taus, subspace_kernel(cfg), {method_name(cfg.method), cfg.out_dtype, cfg.threads});
}

}  // namespace

MergeResult tsv_merge(const Checkpoint& base, std::span<const TaskVector> taus, SubspaceMergeConfig cfg) {
    cfg.method = SubspaceMethod::TsvM;
    return run_subspace(base, taus, cfg);
}

MergeResult boosted_tsv_merge(const Checkpoint& base, std::span<const TaskVector> taus, SubspaceMergeConfig cfg) {
    cfg.method = SubspaceMethod::BoostedTsvM;
    return run_subspace(base, taus, cfg);
}

MergeResult iso_c(const Checkpoint& base, std::span<const TaskVector> taus, SubspaceMergeConfig cfg) {
    cfg.method = SubspaceMethod::IsoC;
    return run_subspace(base, taus, cfg);
}

MergeResult iso_cts(const Checkpoint& base, std::span<const TaskVector> taus, SubspaceMergeConfig cfg) {
    cfg.method = SubspaceMethod::IsoCts;
    return run_subspace(base, taus, cfg);
}

}  // namespace ckptmerge
