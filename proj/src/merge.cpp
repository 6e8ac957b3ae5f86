// Copyright (c) 2026, The ckptmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
#include "ckptmerge/merge.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <exception>
#include <thread>

#include <fmt/core.h>

#include "ckptmerge/errors.hpp"

namespace ckptmerge {

namespace {

// Runs fn(i) for i in [0, n). The exception of the lowest failing index is
// rethrown so failures are reproducible.
template <class Fn>
void parallel_for(std::size_t n, unsigned threads, Fn&& fn) {
    if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
    threads = static_cast<unsigned>(std::min<std::size_t>(threads, n));
    std::vector<std::exception_ptr> errors(n);
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
                break;
            }
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::atomic<bool> failed{false};
        std::vector<std::jthread> pool;
        for (unsigned t = 0; t < threads; ++t) {
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < n && !failed; i = next++) {
                    try {
                        fn(i);
                    } catch (...) {
                        errors[i] = std::current_exception();
                        failed = true;
                    }
                }
            });
        }
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

struct Slot {
    std::string name;
    const TensorData* base = nullptr;
    std::vector<const TensorData*> models;
    std::vector<const DenseTensor*> deltas;
};

MergeResult assemble(std::vector<Slot>& slots, const TensorKernel& kernel, const DriverOptions& options,
                     MemberKind kind, const Checkpoint::Metadata& metadata) {
    const auto start = std::chrono::steady_clock::now();
    std::vector<TensorOutcome> outcomes(slots.size());
    parallel_for(slots.size(), options.threads, [&](std::size_t i) {
        const Slot& slot = slots[i];
        const TensorData& reference = slot.base ? *slot.base : *slot.models.front();
        try {
            std::vector<double> base_values;
            if (slot.base) base_values = slot.base->to_double();
            std::vector<std::vector<double>> owned;
            std::vector<std::span<const double>> members;
            if (!slot.deltas.empty()) {
                for (const auto* d : slot.deltas) members.emplace_back(d->values);
            } else {
                owned.reserve(slot.models.size());
                for (const auto* m : slot.models) {
                    owned.push_back(m->to_double());
                    if (kind == MemberKind::Deltas) {
                        auto& v = owned.back();
                        for (std::size_t j = 0; j < v.size(); ++j) v[j] -= base_values[j];
                    }
                    members.emplace_back(owned.back());
                }
            }
            TensorJob job{slot.name, reference.shape(), classify_tensor(reference.shape()), base_values,
                          std::move(members), slot.base != nullptr};
            outcomes[i] = kernel(job);
            if (outcomes[i].values.size() != reference.size()) {
                throw NumericalError(fmt::format("kernel produced {} values for {}", outcomes[i].values.size(),
                                                 reference.size()));
            }
        } catch (const Error& e) {
            rethrow_with_context(e, "tensor '" + slot.name + "'");
        }
    });

    MergeResult result;
    result.model.metadata() = metadata;
    result.report.method = options.method;
    for (std::size_t i = 0; i < slots.size(); ++i) {
        const TensorData& reference = slots[i].base ? *slots[i].base : *slots[i].models.front();
        result.model.add(TensorData::from_values(slots[i].name, options.out_dtype.value_or(reference.dtype()),
                                                 reference.shape(), outcomes[i].values));
        result.report.per_tensor.push_back(std::move(outcomes[i].record));
        for (auto& w : outcomes[i].warnings) result.report.warnings.push_back(std::move(w));
    }
    const auto fallbacks = result.report.fallback_count();
    if (fallbacks > 0) {
        result.report.warnings.push_back(fmt::format("{} tensor(s) used the element-wise mean fallback", fallbacks));
    }
    result.report.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

}  // namespace

MergeResult run_on_checkpoints(const Checkpoint* base, std::span<const Checkpoint* const> models, MemberKind kind,
                               const TensorKernel& kernel, const DriverOptions& options) {
    if (models.empty()) throw EmptyInput("no models to merge");
    if (kind == MemberKind::Deltas && !base) throw InvalidParameter(options.method + " requires a base model");
    const Checkpoint& reference = base ? *base : *models.front();
    for (std::size_t i = 0; i < models.size(); ++i) {
        require_compatible(reference, *models[i], fmt::format("model {}", i));
    }
    std::vector<Slot> slots;
    for (const auto& [name, t] : reference.tensors()) {
        Slot slot{name, base ? &t : nullptr, {}, {}};
        for (const auto* m : models) slot.models.push_back(&m->at(name));
        slots.push_back(std::move(slot));
    }
    return assemble(slots, kernel, options, kind, reference.metadata());
}

MergeResult run_on_task_vectors(const Checkpoint& base, std::span<const TaskVector> taus, const TensorKernel& kernel,
                                const DriverOptions& options) {
    require_same_base(taus, base.fingerprint());
    std::vector<Slot> slots;
    for (const auto& [name, t] : base.tensors()) {
        Slot slot{name, &t, {}, {}};
        for (const auto& tau : taus) {
            const auto& d = tau.at(name);
            if (d.shape != t.shape()) throw StructureMismatch("task vector shape differs at '" + name + "'");
            slot.deltas.push_back(&d);
        }
        slots.push_back(std::move(slot));
    }
    return assemble(slots, kernel, options, MemberKind::Deltas, base.metadata());
}

TensorRecord make_record(const TensorJob& job, std::string handling) {
    TensorRecord r;
    r.name = std::string(job.name);
    r.kind = std::string(tensor_kind_name(job.cls.kind));
    r.handling = std::move(handling);
    return r;
}

TensorOutcome base_passthrough(const TensorJob& job, std::string handling) {
    TensorOutcome out;
    out.values.assign(job.base.begin(), job.base.end());
    out.record = make_record(job, std::move(handling));
    return out;
}

std::vector<double> base_plus_scaled_mean(const TensorJob& job, double lambda) {
    std::vector<double> out(job.base.begin(), job.base.end());
    const auto count = static_cast<double>(job.members.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        double sum = 0.0;
        for (const auto& m : job.members) sum += m[i];
        out[i] += lambda * (sum / count);
    }
    return out;
}

bool all_zero(std::span<const std::span<const double>> members) {
    for (const auto& m : members) {
        if (std::any_of(m.begin(), m.end(), [](double v) { return v != 0.0; })) return false;
    }
    return true;
}

}  // namespace ckptmerge
