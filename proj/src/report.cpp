// Copyright (c) 2026, The ckptmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
#include "ckptmerge/report.hpp"

#include <algorithm>
#include <fstream>

#include <fmt/core.h>

#include "ckptmerge/errors.hpp"

namespace ckptmerge {

std::size_t MergeReport::fallback_count() const {
    return static_cast<std::size_t>(
        std::count_if(per_tensor.begin(), per_tensor.end(), [](const auto& r) { return r.fallback_used; }));
}

std::size_t MergeReport::subspace_count() const {
    return static_cast<std::size_t>(std::count_if(per_tensor.begin(), per_tensor.end(),
                                                  [](const auto& r) { return r.handling == "subspace"; }));
}

namespace {

template <class T>
std::string opt(const std::optional<T>& v) {
    if (!v) return "-";
    if constexpr (std::is_floating_point_v<T>) {
        return fmt::format("{:.9g}", *v);
    } else {
        return fmt::format("{}", *v);
    }
}

std::string join(const std::vector<std::int64_t>& v) {
    if (v.empty()) return "-";
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
    return out;
}

std::string one_line(std::string s) {
    std::replace(s.begin(), s.end(), '\n', ' ');
    std::replace(s.begin(), s.end(), '\t', ' ');
    return s;
}

}  // namespace

std::string serialize_report(const MergeReport& report) {
    std::string out = "# ckptmerge merge report v1\n";
    out += fmt::format("summary\tmethod={}\ttensors={}\tsubspace={}\tfallback={}\twarnings={}\n", report.method,
                       report.per_tensor.size(), report.subspace_count(), report.fallback_count(),
                       report.warnings.size());
    for (const auto& r : report.per_tensor) {
        out += fmt::format(
            "tensor\tname={}\tkind={}\thandling={}\tretained_rank={}\tenergy={}\tortho_residual={}\ts_star={}"
            "\tboost_ratio={}\titerations={}\tfallback={}\n",
            one_line(r.name), r.kind, r.handling, opt(r.retained_rank), opt(r.energy_captured),
            opt(r.ortho_residual), join(r.s_star), opt(r.boost_energy_ratio), opt(r.iterations),
            r.fallback_used ? 1 : 0);
        out.pop_back();
        for (const auto& [key, value] : r.extras) out += fmt::format("\t{}={:.9g}", key, value);
        out += "\n";
    }
    for (const auto& w : report.warnings) out += "warning\t" + one_line(w) + "\n";
    return out;
}

void save_report(const MergeReport& report, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open report '" + path.string() + "'");
    out << serialize_report(report);
    if (!out) throw IoError("write to report '" + path.string() + "' failed");
}

}  // namespace ckptmerge
