// Copyright (c) 2026, The ckptmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
#include "ckptmerge/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include <fmt/core.h>
#include <yaml-cpp/yaml.h>

#include "ckptmerge/errors.hpp"
#include "ckptmerge/merge_ps.hpp"
#include "ckptmerge/merge_subspace.hpp"
#include "ckptmerge/merge_tau.hpp"
#include "ckptmerge/recipe.hpp"

namespace ckptmerge {

using linalg::Index;
using linalg::Matrix;

namespace {

Matrix gaussian(Index rows, Index cols, std::mt19937_64& rng) {
    std::normal_distribution<double> n01(0.0, 1.0);
    Matrix g(rows, cols);
    for (Index j = 0; j < cols; ++j) {
        for (Index i = 0; i < rows; ++i) g(i, j) = n01(rng);
    }
    return g;
}

// Thin Q factor of a full-column-rank matrix.
Matrix orth(const Matrix& a) {
    Eigen::HouseholderQR<Matrix> qr(a);
    return qr.householderQ() * Matrix::Identity(a.rows(), a.cols());
}

std::vector<double> flatten(const Matrix& m) {
    const linalg::RowMajorMatrix rm = m;
    return {rm.data(), rm.data() + rm.size()};
}

template <class T>
T get(const YAML::Node& node, const std::string& key) {
    try {
        return node.as<T>();
    } catch (const YAML::Exception&) {
        throw InvalidParameter(fmt::format("synthetic spec '{}' has an invalid value", key));
    }
}

}  // namespace

void validate(const SynthSpec& s) {
    if (s.tasks < 1 || s.rows < 1 || s.cols < 1 || s.rank < 1) {
        throw InvalidParameter("tasks, rows, cols and rank must be positive");
    }
    if (static_cast<long long>(s.rank) * s.tasks > std::min(s.rows, s.cols)) {
        throw InvalidParameter(fmt::format("rank {} x tasks {} exceeds min(rows, cols) = {}", s.rank, s.tasks,
                                           std::min(s.rows, s.cols)));
    }
    if (!(s.decay > 0.0 && s.decay <= 1.0)) throw InvalidParameter("decay must be in (0, 1]");
    if (!(s.overlap >= 0.0 && s.overlap <= 1.0)) throw InvalidParameter("overlap must be in [0, 1]");
    if (!(s.noise >= 0.0)) throw InvalidParameter("noise must be non-negative");
    if (s.seeds < 1) throw InvalidParameter("seeds must be positive");
    if (!std::isfinite(s.lambda)) throw InvalidParameter("lambda must be finite");
    if (s.rank_fraction && !(*s.rank_fraction > 0.0 && *s.rank_fraction <= 1.0)) {
        throw InvalidParameter("rank_fraction must be in (0, 1]");
    }
    if (s.methods.empty()) throw InvalidParameter("no methods listed");
    for (const auto& m : s.methods) {
        if (!is_known_method(m)) throw UnknownMethod(fmt::format("unknown method '{}'", m));
        if (m == "boosted_tsvm" && s.betas.empty()) throw InvalidParameter("boosted_tsvm needs a beta grid");
    }
    for (double b : s.betas) {
        if (!(b >= 0.0 && b <= 1.0)) throw InvalidParameter(fmt::format("beta {} outside [0, 1]", b));
    }
}

SynthSpec parse_synth_spec(std::string_view text) {
    YAML::Node root;
    try {
        root = YAML::Load(std::string(text));
    } catch (const YAML::Exception& e) {
        throw FormatError(fmt::format("synthetic spec is not valid YAML: {}", e.what()));
    }
    SynthSpec s;
    if (root.IsNull()) {
        validate(s);
        return s;
    }
    if (!root.IsMap()) throw FormatError("synthetic spec must be a mapping");
    for (const auto& kv : root) {
        const auto key = kv.first.as<std::string>();
        const auto& v = kv.second;
        if (key == "tasks") s.tasks = get<int>(v, key);
        else if (key == "rows") s.rows = get<int>(v, key);
        else if (key == "cols") s.cols = get<int>(v, key);
        else if (key == "rank") s.rank = get<int>(v, key);
        else if (key == "decay") s.decay = get<double>(v, key);
        else if (key == "overlap") s.overlap = get<double>(v, key);
        else if (key == "noise") s.noise = get<double>(v, key);
        else if (key == "seeds") s.seeds = get<int>(v, key);
        else if (key == "seed") s.seed = get<std::uint64_t>(v, key);
        else if (key == "methods") s.methods = get<std::vector<std::string>>(v, key);
        else if (key == "betas") s.betas = get<std::vector<double>>(v, key);
        else if (key == "lambda") s.lambda = get<double>(v, key);
        else if (key == "rank_fraction") s.rank_fraction = get<double>(v, key);
        else throw FormatError(fmt::format("unknown synthetic spec key '{}'", key));
    }
    validate(s);
    return s;
}

std::vector<SynthTask> generate_tasks(const SynthSpec& spec, std::uint64_t seed) {
    validate(spec);
    std::mt19937_64 rng(seed);
    const Index m = spec.rows, n = spec.cols, r = spec.rank;
    const Matrix left = orth(gaussian(m, m, rng));
    const Matrix right = orth(gaussian(n, n, rng));
    const Matrix shared_u = orth(gaussian(m, r, rng));
    const Matrix shared_v = orth(gaussian(n, r, rng));
    const double a = std::sqrt(spec.overlap), b = std::sqrt(1.0 - spec.overlap);

    linalg::Vector sigma(r);
    for (Index j = 0; j < r; ++j) sigma[j] = std::pow(spec.decay, static_cast<double>(j));

    std::vector<SynthTask> tasks;
    for (Index t = 0; t < spec.tasks; ++t) {
        SynthTask task;
        task.u = orth(a * shared_u + b * left.middleCols(t * r, r));
        task.v = orth(a * shared_v + b * right.middleCols(t * r, r));
        task.clean = task.u * sigma.asDiagonal() * task.v.transpose();
        task.tau = task.clean + (spec.noise / std::sqrt(static_cast<double>(m))) * gaussian(m, n, rng);
        tasks.push_back(std::move(task));
    }
    return tasks;
}

SynthMetrics evaluate_merge(const Matrix& merged, const std::vector<SynthTask>& tasks) {
    SynthMetrics out;
    out.stable_rank = linalg::stable_rank(merged);
    Matrix ideal = Matrix::Zero(merged.rows(), merged.cols());
    for (const auto& t : tasks) ideal += t.clean;
    const double ideal_norm = ideal.norm();
    out.recon_error = ideal_norm > 0.0 ? (merged - ideal).norm() / ideal_norm : merged.norm();

    const auto svd = linalg::svd(merged);
    const Index total_rank = std::min(merged.rows(), merged.cols());
    Index width = 0;
    for (const auto& t : tasks) width += t.v.cols();
    width = std::min(width, total_rank);
    if (out.stable_rank == 0.0) {
        out.max_angle_deg = 90.0;
        return out;
    }
    const Matrix top_v = svd.v_t.topRows(width).transpose();
    for (const auto& t : tasks) {
        const auto angles = linalg::principal_angles(t.v, top_v);
        out.retention += angles.array().cos().square().mean();
        out.max_angle_deg += angles.maxCoeff() * 180.0 / std::numbers::pi;
    }
    out.retention /= static_cast<double>(tasks.size());
    out.max_angle_deg /= static_cast<double>(tasks.size());
    return out;
}

Matrix merge_matrices(std::string_view method, const std::vector<Matrix>& taus, const SynthSpec& spec,
                      std::optional<double> beta) {
    if (taus.empty()) throw EmptyInput("no task matrices");
    MergeRecipe recipe;
    recipe.method = std::string(method);
    recipe.base_path = "synthetic";
    recipe.output_path = "synthetic";
    recipe.models.resize(taus.size(), ModelRef{"synthetic", ""});
    recipe.params = default_params(method);

    const Index rows = taus.front().rows(), cols = taus.front().cols();
    const Shape shape{static_cast<std::uint64_t>(rows), static_cast<std::uint64_t>(cols)};
    std::vector<std::vector<double>> flat;
    for (const auto& t : taus) flat.push_back(flatten(t));
    const std::vector<double> zeros(static_cast<std::size_t>(rows * cols), 0.0);

    TensorKernel kernel;
    bool has_base = true;
    switch (method_family(method)) {
        case MethodFamily::ParameterSpace: {
            auto cfg = ps_config(recipe);
            cfg.include_base = false;
            has_base = cfg.method == PsMethod::ModelStock;
            kernel = ps_kernel(cfg);
            break;
        }
        case MethodFamily::TaskSpace: {
            recipe.params.lambda = spec.lambda;
            kernel = tau_kernel(tau_config(recipe));
            break;
        }
        case MethodFamily::Subspace: {
            recipe.params.lambda = spec.lambda;
            recipe.params.rank_fraction =
                spec.rank_fraction.value_or(static_cast<double>(spec.rank) / static_cast<double>(std::min(rows, cols)));
            if (beta) recipe.params.beta = *beta;
            kernel = subspace_kernel(subspace_config(recipe));
            break;
        }
    }
    TensorJob job{"synthetic", shape, classify_tensor(shape), {}, {}, has_base};
    if (has_base) job.base = zeros;
    for (const auto& f : flat) job.members.push_back(f);
    const auto outcome = kernel(job);
    return Eigen::Map<const linalg::RowMajorMatrix>(outcome.values.data(), rows, cols);
}

std::vector<SynthRow> synth_eval(const SynthSpec& spec) {
    validate(spec);
    std::vector<SynthRow> rows;
    for (const auto& m : spec.methods) {
        if (m == "boosted_tsvm") {
            for (double b : spec.betas) rows.push_back({m, b, {}});
        } else {
            rows.push_back({m, std::nullopt, {}});
        }
    }
    for (int s = 0; s < spec.seeds; ++s) {
        const auto tasks = generate_tasks(spec, spec.seed + static_cast<std::uint64_t>(s));
        std::vector<Matrix> taus;
        for (const auto& t : tasks) taus.push_back(t.tau);
        for (auto& row : rows) {
            const auto metrics = evaluate_merge(merge_matrices(row.method, taus, spec, row.beta), tasks);
            row.metrics.stable_rank += metrics.stable_rank;
            row.metrics.retention += metrics.retention;
            row.metrics.max_angle_deg += metrics.max_angle_deg;
            row.metrics.recon_error += metrics.recon_error;
        }
    }
    const auto count = static_cast<double>(spec.seeds);
    for (auto& row : rows) {
        row.metrics.stable_rank /= count;
        row.metrics.retention /= count;
        row.metrics.max_angle_deg /= count;
        row.metrics.recon_error /= count;
    }
    return rows;
}

std::string format_synth_csv(const std::vector<SynthRow>& rows) {
    std::string out = "method,beta,stable_rank,retention,max_angle_deg,recon_error\n";
    for (const auto& r : rows) {
        out += fmt::format("{},{},{:.6f},{:.6f},{:.4f},{:.6f}\n", r.method, r.beta ? fmt::format("{}", *r.beta) : "",
                           r.metrics.stable_rank, r.metrics.retention, r.metrics.max_angle_deg, r.metrics.recon_error);
    }
    return out;
}

}  // namespace ckptmerge
