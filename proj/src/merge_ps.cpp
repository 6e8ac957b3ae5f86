// Copyright (c) 2026, The ckptmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
#include "ckptmerge/merge_ps.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <fmt/core.h>

#include "ckptmerge/errors.hpp"

namespace ckptmerge {

namespace {

using Points = std::span<const std::span<const double>>;

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

std::vector<double> normalized_weights(std::span<const double> weights, std::size_t n) {
    std::vector<double> w(n, 1.0 / static_cast<double>(n));
    if (!weights.empty()) {
        double total = 0.0;
        for (double x : weights) total += x;
        for (std::size_t i = 0; i < n; ++i) w[i] = weights[i] / total;
    }
    return w;
}

// Log map at mu of unit vector p; throws for (near-)antipodal pairs.
void log_map_accumulate(std::span<const double> mu, std::span<const double> p, double weight,
                        std::vector<double>& acc) {
    const double c = std::clamp(dot(mu, p), -1.0, 1.0);
    const double theta = std::acos(c);
    if (theta > std::numbers::pi - 1e-6) {
        throw DegenerateInput("antipodal points: the log map is undefined");
    }
    std::vector<double> u(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) u[i] = p[i] - c * mu[i];
    const double un = norm(u);
    // For tiny angles theta / sin(theta) -> 1 and u is already the tangent.
    const double scale = (un > 1e-15 && theta > 1e-12) ? theta / un : 1.0;
    for (std::size_t i = 0; i < p.size(); ++i) acc[i] += weight * scale * u[i];
}

void exp_map(std::vector<double>& mu, std::span<const double> v) {
    const double vn = norm(v);
    if (vn == 0.0) return;
    const double c = std::cos(vn);
    const double s = std::sin(vn) / vn;
    for (std::size_t i = 0; i < mu.size(); ++i) mu[i] = c * mu[i] + s * v[i];
    const double mn = norm(mu);
    for (auto& x : mu) x /= mn;
}

struct UnitPoints {
    std::vector<std::vector<double>> points;
    std::vector<double> norms;
    bool all_zero = false;
};

UnitPoints to_sphere(Points points) {
    UnitPoints out;
    std::size_t zeros = 0;
    for (const auto& p : points) {
        const double n = norm(p);
        out.norms.push_back(n);
        if (n == 0.0) ++zeros;
    }
    if (zeros == points.size()) {
        out.all_zero = true;
        return out;
    }
    if (zeros > 0) throw DegenerateInput(fmt::format("{} of {} inputs have zero norm", zeros, points.size()));
    for (std::size_t k = 0; k < points.size(); ++k) {
        std::vector<double> u(points[k].begin(), points[k].end());
        for (auto& x : u) x /= out.norms[k];
        out.points.push_back(std::move(u));
    }
    return out;
}

std::vector<double> mean_direction(const UnitPoints& up, std::span<const double> w) {
    const std::size_t n = up.points.front().size();
    std::vector<double> mu(n, 0.0);
    for (std::size_t k = 0; k < up.points.size(); ++k) {
        for (std::size_t i = 0; i < n; ++i) mu[i] += w[k] * up.points[k][i];
    }
    const double mn = norm(mu);
    if (mn < 1e-12) throw DegenerateInput("inputs cancel: mean direction undefined");
    for (auto& x : mu) x /= mn;
    return mu;
}

double weighted_norm(const UnitPoints& up, std::span<const double> w) {
    double r = 0.0;
    for (std::size_t k = 0; k < up.norms.size(); ++k) r += w[k] * up.norms[k];
    return r;
}

}  // namespace

namespace sphere {

SphereMean karcher(Points points, std::span<const double> weights, double tolerance, int max_iterations) {
    SphereMean out;
    if (points.empty()) throw EmptyInput("karcher: no points");
    const std::size_t n = points.front().size();
    if (n == 0) return out;
    const auto up = to_sphere(points);
    if (up.all_zero) {
        out.values.assign(n, 0.0);
        return out;
    }
    const auto w = normalized_weights(weights, points.size());
    auto mu = mean_direction(up, w);
    auto best = mu;
    double best_norm = std::numeric_limits<double>::infinity();
    out.converged = false;
    for (int it = 1; it <= max_iterations; ++it) {
        std::vector<double> v(n, 0.0);
        for (std::size_t k = 0; k < up.points.size(); ++k) log_map_accumulate(mu, up.points[k], w[k], v);
        const double vn = norm(v);
        out.iterations = it;
        if (vn < best_norm) {
            best_norm = vn;
            best = mu;
        }
        if (vn < tolerance) {
            out.converged = true;
            break;
        }
        exp_map(mu, v);
    }
    out.tangent_norm = best_norm;
    const double r = weighted_norm(up, w);
    out.values = std::move(best);
    for (auto& x : out.values) x *= r;
    return out;
}

SphereMean multi_slerp(Points points, std::span<const double> weights) {
    SphereMean out;
    if (points.empty()) throw EmptyInput("multi_slerp: no points");
    const std::size_t n = points.front().size();
    if (n == 0) return out;
    const auto up = to_sphere(points);
    if (up.all_zero) {
        out.values.assign(n, 0.0);
        return out;
    }
    const auto w = normalized_weights(weights, points.size());
    auto mu = mean_direction(up, w);
    std::vector<double> v(n, 0.0);
    for (std::size_t k = 0; k < up.points.size(); ++k) log_map_accumulate(mu, up.points[k], w[k], v);
    out.tangent_norm = norm(v);
    out.iterations = 1;
    exp_map(mu, v);
    const double r = weighted_norm(up, w);
    out.values = std::move(mu);
    for (auto& x : out.values) x *= r;
    return out;
}

}  // namespace sphere

double model_stock_ratio(double mean_cosine, std::size_t k) {
    const double c = std::clamp(mean_cosine, 0.0, 1.0);
    const double kd = static_cast<double>(k);
    return kd * c / (1.0 + (kd - 1.0) * c);
}

void validate(const PsMergeConfig& cfg, std::size_t member_count) {
    if (!cfg.weights.empty()) {
        if (cfg.weights.size() != member_count) {
            throw InvalidParameter(fmt::format("{} weights for {} members", cfg.weights.size(), member_count));
        }
        double total = 0.0;
        for (double w : cfg.weights) {
            if (!(w >= 0.0) || !std::isfinite(w)) throw InvalidParameter(fmt::format("weight {} is negative", w));
            total += w;
        }
        if (!(total > 0.0)) throw InvalidParameter("weights sum to zero");
    }
    if (!(cfg.tolerance > 0.0)) throw InvalidParameter("tolerance must be positive");
    if (cfg.max_iterations < 1) throw InvalidParameter("max_iterations must be at least 1");
}

namespace {

std::vector<std::span<const double>> members_with_base(const TensorJob& job) {
    auto members = job.members;
    if (job.has_base) members.push_back(job.base);
    return members;
}

TensorOutcome soup_tensor(const TensorJob& job, const PsMergeConfig& cfg) {
    const auto members = members_with_base(job);
    TensorOutcome out;
    out.record = make_record(job, "mean");
    const std::size_t n = members.front().size();
    out.values.assign(n, 0.0);
    if (cfg.weights.empty()) {
        const auto count = static_cast<double>(members.size());
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (const auto& m : members) s += m[i];
            out.values[i] = s / count;
        }
    } else {
        const auto w = normalized_weights(cfg.weights, members.size());
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t k = 0; k < members.size(); ++k) s += w[k] * members[k][i];
            out.values[i] = s;
        }
    }
    return out;
}

TensorOutcome model_stock_tensor(const TensorJob& job) {
    const std::size_t k = job.members.size();
    const std::size_t n = job.base.size();
    std::vector<std::vector<double>> taus(k, std::vector<double>(n));
    for (std::size_t t = 0; t < k; ++t) {
        for (std::size_t i = 0; i < n; ++i) taus[t][i] = job.members[t][i] - job.base[i];
    }
    std::vector<std::span<const double>> spans(taus.begin(), taus.end());
    if (all_zero(spans)) return base_passthrough(job, "zero_delta");

    TensorOutcome out;
    out.record = make_record(job, "model_stock");
    std::vector<double> norms;
    for (const auto& t : taus) norms.push_back(norm(t));
    double ratio = 1.0;
    if (std::any_of(norms.begin(), norms.end(), [](double x) { return x == 0.0; })) {
        out.record.handling = "mean_fallback";
        out.record.fallback_used = true;
        out.warnings.push_back(fmt::format("tensor '{}': zero-norm task vector, used base + mean delta", job.name));
    } else {
        double cos_sum = 0.0;
        std::size_t pairs = 0;
        for (std::size_t a = 0; a < k; ++a) {
            for (std::size_t b = a + 1; b < k; ++b) {
                cos_sum += dot(taus[a], taus[b]) / (norms[a] * norms[b]);
                ++pairs;
            }
        }
        const double mean_cos = cos_sum / static_cast<double>(pairs);
        ratio = model_stock_ratio(mean_cos, k);
        out.record.extras = {{"mean_cos", mean_cos}, {"ratio", ratio}};
    }
    out.values.assign(job.base.begin(), job.base.end());
    const auto count = static_cast<double>(k);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (const auto& t : taus) s += t[i];
        out.values[i] += ratio * (s / count);
    }
    return out;
}

TensorOutcome sphere_tensor(const TensorJob& job, const PsMergeConfig& cfg) {
    const auto members = members_with_base(job);
    const bool karcher = cfg.method == PsMethod::Karcher;
    auto mean = karcher ? sphere::karcher(members, cfg.weights, cfg.tolerance, cfg.max_iterations)
                        : sphere::multi_slerp(members, cfg.weights);
    TensorOutcome out;
    out.record = make_record(job, karcher ? "karcher" : "multi_slerp");
    out.record.iterations = mean.iterations;
    out.record.extras = {{"tangent_norm", mean.tangent_norm}};
    if (mean.values.empty() && members.front().size() != 0) mean.values.assign(members.front().size(), 0.0);
    out.values = std::move(mean.values);
    if (!mean.converged) {
        out.warnings.push_back(fmt::format(
            "tensor '{}': karcher mean not converged after {} iterations (tangent norm {:.3g}); used best iterate",
            job.name, mean.iterations, mean.tangent_norm));
    }
    return out;
}

MergeResult run_ps(std::span<const Checkpoint> models, const Checkpoint* base, const PsMergeConfig& cfg,
                   const char* name) {
    if (models.empty()) throw EmptyInput(std::string(name) + ": no models");
    validate(cfg, models.size() + (base ? 1 : 0));
    std::vector<const Checkpoint*> ptrs;
    for (const auto& m : models) ptrs.push_back(&m);
    return run_on_checkpoints(base, ptrs, MemberKind::Parameters, ps_kernel(cfg), {name, cfg.out_dtype, cfg.threads});
}

bool all_identical(std::span<const std::span<const double>> members) {
    for (std::size_t k = 1; k < members.size(); ++k) {
        if (!std::equal(members[k].begin(), members[k].end(), members[0].begin(), members[0].end())) return false;
    }
    return true;
}

// Equal members merge to themselves exactly, whatever the method.
TensorOutcome identical_members(const TensorJob& job, std::span<const double> values) {
    TensorOutcome out;
    out.record = make_record(job, "identical");
    out.values.assign(values.begin(), values.end());
    return out;
}

}  // namespace

TensorKernel ps_kernel(const PsMergeConfig& cfg) {
    return [cfg](const TensorJob& job) -> TensorOutcome {
        if (cfg.method == PsMethod::ModelStock) {
            if (all_identical(job.members)) return identical_members(job, job.members.front());
        } else if (const auto members = members_with_base(job); all_identical(members)) {
            return identical_members(job, members.front());
        }
        switch (cfg.method) {
            case PsMethod::Soup: return soup_tensor(job, cfg);
            case PsMethod::ModelStock: return model_stock_tensor(job);
            case PsMethod::Karcher:
            case PsMethod::MultiSlerp: return sphere_tensor(job, cfg);
        }
        throw InvalidParameter("unknown parameter-space method");
    };
}

MergeResult soup(std::span<const Checkpoint> models, const Checkpoint* base, PsMergeConfig cfg) {
    cfg.method = PsMethod::Soup;
    return run_ps(models, base, cfg, "soup");
}

MergeResult model_stock(std::span<const Checkpoint> models, const Checkpoint& base, PsMergeConfig cfg) {
    cfg.method = PsMethod::ModelStock;
    if (models.size() < 2) throw InvalidParameter("model_stock needs at least two models");
    cfg.weights.clear();
    return run_ps(models, &base, cfg, "model_stock");
}

MergeResult karcher_mean(std::span<const Checkpoint> models, const Checkpoint* base, PsMergeConfig cfg) {
    cfg.method = PsMethod::Karcher;
    return run_ps(models, base, cfg, "karcher");
}

MergeResult multi_slerp(std::span<const Checkpoint> models, const Checkpoint* base, PsMergeConfig cfg) {
    cfg.method = PsMethod::MultiSlerp;
    return run_ps(models, base, cfg, "multi_slerp");
}

}  // namespace ckptmerge
