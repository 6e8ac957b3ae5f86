// Copyright (c) 2026, The ckptmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
#include "ckptmerge/merge_tau.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/core.h>

#include "ckptmerge/errors.hpp"

namespace ckptmerge {

namespace {

using Deltas = std::span<const std::span<const double>>;

int sign_of(double v) { return (v > 0.0) - (v < 0.0); }

void check_fraction(double f, const char* what) {
    if (!(f > 0.0 && f <= 1.0)) throw InvalidParameter(fmt::format("{} {} outside (0, 1]", what, f));
}

// In-place softmax with max subtraction.
void softmax(std::span<double> x) {
    if (x.empty()) return;
    const double m = *std::max_element(x.begin(), x.end());
    double total = 0.0;
    for (auto& v : x) {
        v = std::exp(v - m);
        total += v;
    }
    for (auto& v : x) v /= total;
}

}  // namespace

namespace tau {

std::size_t kept_count(std::size_t n, double fraction) {
    if (n == 0) return 0;
    const auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
    return std::clamp<std::size_t>(k, 1, n);
}

std::vector<char> top_k_mask(std::span<const double> scores, std::size_t k) {
    std::vector<char> mask(scores.size(), 0);
    k = std::min(k, scores.size());
    if (k == scores.size()) {
        std::fill(mask.begin(), mask.end(), 1);
        return mask;
    }
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    auto before = [&](std::size_t a, std::size_t b) {
        return scores[a] != scores[b] ? scores[a] > scores[b] : a < b;
    };
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), before);
    for (std::size_t i = 0; i < k; ++i) mask[idx[i]] = 1;
    return mask;
}

std::vector<double> ties_merge(Deltas taus, double density, std::size_t* sign_conflicts) {
    const std::size_t n = taus.front().size();
    const std::size_t k = kept_count(n, density);
    std::vector<std::vector<double>> trimmed;
    trimmed.reserve(taus.size());
    for (const auto& t : taus) {
        std::vector<double> mag(n);
        for (std::size_t i = 0; i < n; ++i) mag[i] = std::abs(t[i]);
        const auto mask = top_k_mask(mag, k);
        std::vector<double> kept(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            if (mask[i]) kept[i] = t[i];
        }
        trimmed.push_back(std::move(kept));
    }
    std::vector<double> merged(n, 0.0);
    std::size_t conflicts = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double total = 0.0;
        bool pos = false, neg = false;
        for (const auto& t : trimmed) {
            total += t[i];
            pos |= t[i] > 0.0;
            neg |= t[i] < 0.0;
        }
        if (pos && neg) ++conflicts;
        const int elected = sign_of(total);
        if (elected == 0) continue;
        double sum = 0.0;
        std::size_t count = 0;
        for (const auto& t : trimmed) {
            if (sign_of(t[i]) == elected) {
                sum += t[i];
                ++count;
            }
        }
        merged[i] = sum / static_cast<double>(count);
    }
    if (sign_conflicts) *sign_conflicts = conflicts;
    return merged;
}

std::vector<double> pcb_merge(Deltas taus, double retain_fraction, double temperature, double epsilon) {
    const std::size_t T = taus.size();
    const std::size_t n = taus.front().size();
    const double inv_temp = 1.0 / temperature;

    std::vector<std::vector<double>> score(T, std::vector<double>(n));
    for (std::size_t t = 0; t < T; ++t) {
        double peak = 0.0;
        for (double v : taus[t]) peak = std::max(peak, std::abs(v));
        auto& s = score[t];
        for (std::size_t i = 0; i < n; ++i) {
            const double u = peak > 0.0 ? taus[t][i] / peak : 0.0;
            s[i] = static_cast<double>(T) * u * u * inv_temp;
        }
        softmax(s);
    }
    std::vector<double> inter(T);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t t = 0; t < T; ++t) inter[t] = taus[t][i] * inv_temp;
        softmax(inter);
        for (std::size_t t = 0; t < T; ++t) score[t][i] *= inter[t];
    }
    const std::size_t k = kept_count(n, retain_fraction);
    std::vector<double> num(n, 0.0), den(n, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        const auto mask = top_k_mask(score[t], k);
        for (std::size_t i = 0; i < n; ++i) {
            if (!mask[i]) continue;
            num[i] += score[t][i] * taus[t][i];
            den[i] += score[t][i];
        }
    }
    std::vector<double> merged(n);
    for (std::size_t i = 0; i < n; ++i) merged[i] = num[i] / std::max(den[i], epsilon);
    return merged;
}

std::vector<double> sce_merge(Deltas taus, double select_fraction, double epsilon) {
    const std::size_t T = taus.size();
    const std::size_t n = taus.front().size();
    std::vector<double> variance(n);
    for (std::size_t i = 0; i < n; ++i) {
        double mean = 0.0;
        for (const auto& t : taus) mean += t[i];
        mean /= static_cast<double>(T);
        double var = 0.0;
        for (const auto& t : taus) var += (t[i] - mean) * (t[i] - mean);
        variance[i] = var / static_cast<double>(T);
    }
    const auto selected = top_k_mask(variance, kept_count(n, select_fraction));

    std::vector<double> energy(T, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t i = 0; i < n; ++i) {
            if (selected[i]) energy[t] += taus[t][i] * taus[t][i];
        }
    }
    const double total_energy = std::accumulate(energy.begin(), energy.end(), 0.0);
    std::vector<double> merged(n, 0.0);
    if (!(total_energy > epsilon)) return merged;
    std::vector<double> eta(T);
    for (std::size_t t = 0; t < T; ++t) eta[t] = energy[t] / total_energy;

    for (std::size_t i = 0; i < n; ++i) {
        if (!selected[i]) continue;
        double total = 0.0;
        for (std::size_t t = 0; t < T; ++t) total += eta[t] * taus[t][i];
        const int elected = sign_of(total);
        if (elected == 0) continue;
        double num = 0.0, den = 0.0;
        for (std::size_t t = 0; t < T; ++t) {
            if (sign_of(taus[t][i]) != elected) continue;
            num += eta[t] * taus[t][i];
            den += eta[t];
        }
        merged[i] = num / std::max(den, epsilon);
    }
    return merged;
}

}  // namespace tau

TauMergeConfig default_tau_config(TauMethod method) {
    TauMergeConfig cfg;
    cfg.method = method;
    cfg.lambda = method == TauMethod::TaskArithmetic ? 0.4 : 1.0;
    return cfg;
}

void validate(const TauMergeConfig& cfg) {
    if (!std::isfinite(cfg.lambda)) throw InvalidParameter("lambda must be finite");
    check_fraction(cfg.density, "density");
    check_fraction(cfg.retain_fraction, "retain_fraction");
    check_fraction(cfg.select_fraction, "select_fraction");
    if (!(cfg.temperature > 0.0)) throw InvalidParameter("temperature must be positive");
    if (!(cfg.epsilon > 0.0)) throw InvalidParameter("epsilon must be positive");
}

TensorKernel tau_kernel(const TauMergeConfig& cfg) {
    validate(cfg);
    return [cfg](const TensorJob& job) -> TensorOutcome {
        if (job.members.empty()) throw EmptyInput("no task vectors");
        if (cfg.method == TauMethod::Sce && job.members.size() < 2) {
            throw InvalidParameter("sce needs at least two task vectors");
        }
        if (job.base.empty() || all_zero(job.members)) return base_passthrough(job, "zero_delta");

        TensorOutcome out;
        std::vector<double> merged;
        switch (cfg.method) {
            case TauMethod::TaskArithmetic: {
                out.record = make_record(job, "sum");
                merged.assign(job.base.size(), 0.0);
                for (const auto& t : job.members) {
                    for (std::size_t i = 0; i < merged.size(); ++i) merged[i] += t[i];
                }
                break;
            }
            case TauMethod::Ties: {
                out.record = make_record(job, "ties");
                std::size_t conflicts = 0;
                merged = tau::ties_merge(job.members, cfg.density, &conflicts);
                out.record.extras = {{"sign_conflicts", static_cast<double>(conflicts)}};
                break;
            }
            case TauMethod::Pcb:
                out.record = make_record(job, "pcb");
                merged = tau::pcb_merge(job.members, cfg.retain_fraction, cfg.temperature, cfg.epsilon);
                break;
            case TauMethod::Sce:
                out.record = make_record(job, "sce");
                merged = tau::sce_merge(job.members, cfg.select_fraction, cfg.epsilon);
                break;
        }
        out.values.assign(job.base.begin(), job.base.end());
        for (std::size_t i = 0; i < merged.size(); ++i) out.values[i] += cfg.lambda * merged[i];
        return out;
    };
}

namespace {

const char* method_name(TauMethod m) {
    switch (m) {
        case TauMethod::TaskArithmetic: return "ta";
        case TauMethod::Ties: return "ties";
        case TauMethod::Pcb: return "pcb";
        case TauMethod::Sce: return "sce";
    }
    return "?";
}

MergeResult run_tau(const Checkpoint& base, std::span<const TaskVector> taus, const TauMergeConfig& cfg) {
    if (taus.empty()) throw EmptyInput(std::string(method_name(cfg.method)) + ": no task vectors");
    if (cfg.method == TauMethod::Sce && taus.size() < 2) throw InvalidParameter("sce needs at least two task vectors");
    return run_on_task_vectors(base, taus, tau_kernel(cfg), {method_name(cfg.method), cfg.out_dtype, cfg.threads});
}

}  // namespace

MergeResult task_arithmetic(const Checkpoint& base, std::span<const TaskVector> taus, double lambda,
                            TauMergeConfig cfg) {
    cfg.method = TauMethod::TaskArithmetic;
    cfg.lambda = lambda;
    return run_tau(base, taus, cfg);
}

MergeResult ties(const Checkpoint& base, std::span<const TaskVector> taus, TauMergeConfig cfg) {
    cfg.method = TauMethod::Ties;
    return run_tau(base, taus, cfg);
}

MergeResult pcb(const Checkpoint& base, std::span<const TaskVector> taus, TauMergeConfig cfg) {
    cfg.method = TauMethod::Pcb;
    return run_tau(base, taus, cfg);
}

MergeResult sce(const Checkpoint& base, std::span<const TaskVector> taus, TauMergeConfig cfg) {
    cfg.method = TauMethod::Sce;
    return run_tau(base, taus, cfg);
}

}  // namespace ckptmerge
