// Copyright (c) 2026, The ckptmerge Authors
// SPDX-License-Identifier: Apache-2.0
//
#include "ckptmerge/recipe.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <sstream>

#include <fmt/core.h>
#include <fmt/ranges.h>
#include <yaml-cpp/yaml.h>

#include "ckptmerge/errors.hpp"

namespace ckptmerge {

namespace {

using namespace std::string_view_literals;

constexpr std::array kMethods = {"soup"sv, "model_stock"sv, "karcher"sv, "multi_slerp"sv, "ta"sv, "ties"sv,
                                 "pcb"sv,  "sce"sv,         "tsvm"sv,    "boosted_tsvm"sv, "iso_c"sv, "iso_cts"sv};

constexpr std::array kSoupParams = {"include_base"sv, "weights"sv, "out_dtype"sv, "threads"sv};
constexpr std::array kModelStockParams = {"out_dtype"sv, "threads"sv};
constexpr std::array kKarcherParams = {"include_base"sv, "weights"sv,   "tolerance"sv,
                                       "max_iterations"sv, "out_dtype"sv, "threads"sv};
constexpr std::array kTaParams = {"lambda"sv, "out_dtype"sv, "threads"sv};
constexpr std::array kTiesParams = {"lambda"sv, "density"sv, "out_dtype"sv, "threads"sv};
constexpr std::array kPcbParams = {"lambda"sv,  "retain_fraction"sv, "temperature"sv,
                                   "epsilon"sv, "out_dtype"sv,       "threads"sv};
constexpr std::array kSceParams = {"lambda"sv, "select_fraction"sv, "epsilon"sv, "out_dtype"sv, "threads"sv};
constexpr std::array kTsvParams = {"lambda"sv,      "rank_fraction"sv, "orthogonalizer"sv, "ns_iterations"sv,
                                   "ns_schedule"sv, "min_condition"sv, "out_dtype"sv,      "threads"sv};
constexpr std::array kBoostedParams = {"lambda"sv,        "rank_fraction"sv, "beta"sv,          "epsilon"sv,
                                       "orthogonalizer"sv, "ns_iterations"sv, "ns_schedule"sv, "min_condition"sv,
                                       "out_dtype"sv,      "threads"sv};
constexpr std::array kIsoCParams = {"lambda"sv, "out_dtype"sv, "threads"sv};
constexpr std::array kIsoCtsParams = {"lambda"sv,      "common_fraction"sv, "orthogonalizer"sv, "ns_iterations"sv,
                                      "ns_schedule"sv, "min_condition"sv,   "out_dtype"sv,      "threads"sv};

constexpr std::array kTopLevel = {"method"sv, "base"sv, "models"sv, "output"sv, "params"sv};

bool contains(std::span<const std::string_view> keys, std::string_view key) {
    return std::find(keys.begin(), keys.end(), key) != keys.end();
}

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
}

template <class T>
T scalar_as(const YAML::Node& node, std::string_view key) {
    if (!node.IsScalar()) throw InvalidParameter(fmt::format("'{}' must be a scalar", key));
    try {
        return node.as<T>();
    } catch (const YAML::Exception&) {
        throw InvalidParameter(fmt::format("'{}' has an invalid value '{}'", key, node.Scalar()));
    }
}

std::string required_path(const YAML::Node& root, const char* key) {
    const auto node = root[key];
    if (!node || node.IsNull()) throw MissingField(fmt::format("recipe field '{}' is missing", key));
    if (!node.IsScalar()) throw FormatError(fmt::format("recipe field '{}' must be a path", key));
    auto value = node.as<std::string>();
    if (value.empty()) throw MissingField(fmt::format("recipe field '{}' is empty", key));
    return value;
}

std::vector<ModelRef> parse_models(const YAML::Node& node) {
    if (!node || node.IsNull()) throw MissingField("recipe field 'models' is missing");
    if (!node.IsSequence()) throw FormatError("'models' must be a list");
    std::vector<ModelRef> models;
    for (const auto& item : node) {
        ModelRef ref;
        if (item.IsScalar()) {
            ref.path = item.as<std::string>();
        } else if (item.IsMap()) {
            for (const auto& kv : item) {
                const auto key = kv.first.as<std::string>();
                if (key != "path" && key != "label") throw FormatError(fmt::format("unknown model key '{}'", key));
            }
            if (item["path"]) ref.path = item["path"].as<std::string>();
            if (item["label"]) ref.label = item["label"].as<std::string>();
        } else {
            throw FormatError("model entries must be a path or a {path, label} map");
        }
        if (ref.path.empty()) throw MissingField(fmt::format("model {} has no path", models.size()));
        models.push_back(std::move(ref));
    }
    if (models.empty()) throw MissingField("recipe lists no models");
    return models;
}

Orthogonalizer parse_orthogonalizer(const std::string& s) {
    const auto v = lower(s);
    if (v == "procrustes") return Orthogonalizer::Procrustes;
    if (v == "newton_schulz" || v == "ns") return Orthogonalizer::NewtonSchulz;
    throw InvalidParameter(fmt::format("unknown orthogonalizer '{}' (procrustes, newton_schulz)", s));
}

NsSchedule parse_schedule(const std::string& s) {
    const auto v = lower(s);
    if (v == "quintic") return NsSchedule::Quintic;
    if (v == "simple") return NsSchedule::Simple;
    throw InvalidParameter(fmt::format("unknown ns_schedule '{}' (quintic, simple)", s));
}

DType parse_out_dtype(const std::string& s) {
    const auto d = parse_dtype(s);
    if (!d) throw InvalidParameter(fmt::format("unknown out_dtype '{}' (f16, bf16, f32, f64)", s));
    return *d;
}

void apply_param(RecipeParams& p, std::string_view key, const YAML::Node& v) {
    if (key == "lambda") p.lambda = scalar_as<double>(v, key);
    else if (key == "rank_fraction") p.rank_fraction = scalar_as<double>(v, key);
    else if (key == "beta") p.beta = scalar_as<double>(v, key);
    else if (key == "epsilon") p.epsilon = scalar_as<double>(v, key);
    else if (key == "orthogonalizer") p.orthogonalizer = parse_orthogonalizer(scalar_as<std::string>(v, key));
    else if (key == "ns_iterations") p.ns_iterations = scalar_as<int>(v, key);
    else if (key == "ns_schedule") p.ns_schedule = parse_schedule(scalar_as<std::string>(v, key));
    else if (key == "min_condition") p.min_condition = scalar_as<double>(v, key);
    else if (key == "common_fraction") p.common_fraction = scalar_as<double>(v, key);
    else if (key == "density") p.density = scalar_as<double>(v, key);
    else if (key == "retain_fraction") p.retain_fraction = scalar_as<double>(v, key);
    else if (key == "select_fraction") p.select_fraction = scalar_as<double>(v, key);
    else if (key == "temperature") p.temperature = scalar_as<double>(v, key);
    else if (key == "include_base") p.include_base = scalar_as<bool>(v, key);
    else if (key == "tolerance") p.tolerance = scalar_as<double>(v, key);
    else if (key == "max_iterations") p.max_iterations = scalar_as<int>(v, key);
    else if (key == "out_dtype") p.out_dtype = parse_out_dtype(scalar_as<std::string>(v, key));
    else if (key == "threads") {
        const int t = scalar_as<int>(v, key);
        if (t < 0) throw InvalidParameter("threads must be non-negative");
        p.threads = static_cast<unsigned>(t);
    } else if (key == "weights") {
        if (!v.IsSequence()) throw InvalidParameter("'weights' must be a list");
        p.weights.clear();
        for (const auto& w : v) p.weights.push_back(scalar_as<double>(w, "weights"));
    }
}

PsMethod ps_method(std::string_view m) {
    if (m == "soup") return PsMethod::Soup;
    if (m == "model_stock") return PsMethod::ModelStock;
    if (m == "karcher") return PsMethod::Karcher;
    return PsMethod::MultiSlerp;
}

TauMethod tau_method(std::string_view m) {
    if (m == "ta") return TauMethod::TaskArithmetic;
    if (m == "ties") return TauMethod::Ties;
    if (m == "pcb") return TauMethod::Pcb;
    return TauMethod::Sce;
}

SubspaceMethod subspace_method(std::string_view m) {
    if (m == "tsvm") return SubspaceMethod::TsvM;
    if (m == "boosted_tsvm") return SubspaceMethod::BoostedTsvM;
    if (m == "iso_c") return SubspaceMethod::IsoC;
    return SubspaceMethod::IsoCts;
}

std::string yaml_quoted(std::string_view s) {
    std::string out = "\"";
    for (char c : s) {
        if (c == '"' || c == '\\') out += '\\';
        out += c;
    }
    return out + "\"";
}

std::string number(double v) { return fmt::format("{}", v); }

}  // namespace

std::span<const std::string_view> method_names() { return kMethods; }

bool is_known_method(std::string_view method) { return contains(kMethods, method); }

MethodFamily method_family(std::string_view m) {
    if (m == "soup" || m == "model_stock" || m == "karcher" || m == "multi_slerp") return MethodFamily::ParameterSpace;
    if (m == "ta" || m == "ties" || m == "pcb" || m == "sce") return MethodFamily::TaskSpace;
    if (m == "tsvm" || m == "boosted_tsvm" || m == "iso_c" || m == "iso_cts") return MethodFamily::Subspace;
    throw UnknownMethod(fmt::format("unknown method '{}'", m));
}

std::span<const std::string_view> accepted_params(std::string_view m) {
    if (m == "soup" || m == "multi_slerp") return kSoupParams;
    if (m == "model_stock") return kModelStockParams;
    if (m == "karcher") return kKarcherParams;
    if (m == "ta") return kTaParams;
    if (m == "ties") return kTiesParams;
    if (m == "pcb") return kPcbParams;
    if (m == "sce") return kSceParams;
    if (m == "tsvm") return kTsvParams;
    if (m == "boosted_tsvm") return kBoostedParams;
    if (m == "iso_c") return kIsoCParams;
    if (m == "iso_cts") return kIsoCtsParams;
    throw UnknownMethod(fmt::format("unknown method '{}'", m));
}

RecipeParams default_params(std::string_view method) {
    RecipeParams p;
    switch (method_family(method)) {
        case MethodFamily::ParameterSpace:
            p.include_base = method != "model_stock";
            break;
        case MethodFamily::TaskSpace:
            p.lambda = default_tau_config(tau_method(method)).lambda;
            break;
        case MethodFamily::Subspace: {
            const auto cfg = default_subspace_config(subspace_method(method));
            p.lambda = cfg.lambda;
            p.beta = cfg.beta;
            p.orthogonalizer = cfg.orthogonalizer;
            p.ns_iterations = cfg.ns_iterations;
            p.common_fraction = cfg.common_fraction;
            break;
        }
    }
    return p;
}

double MergeRecipe::effective_rank_fraction() const {
    return params.rank_fraction.value_or(1.0 / static_cast<double>(std::max<std::size_t>(models.size(), 1)));
}

PsMergeConfig ps_config(const MergeRecipe& r) {
    PsMergeConfig cfg;
    cfg.method = ps_method(r.method);
    cfg.include_base = r.params.include_base;
    cfg.weights = r.params.weights;
    cfg.tolerance = r.params.tolerance;
    cfg.max_iterations = r.params.max_iterations;
    cfg.out_dtype = r.params.out_dtype;
    cfg.threads = r.params.threads;
    return cfg;
}

TauMergeConfig tau_config(const MergeRecipe& r) {
    auto cfg = default_tau_config(tau_method(r.method));
    cfg.lambda = r.params.lambda;
    cfg.density = r.params.density;
    cfg.retain_fraction = r.params.retain_fraction;
    cfg.select_fraction = r.params.select_fraction;
    cfg.temperature = r.params.temperature;
    cfg.epsilon = r.params.epsilon;
    cfg.out_dtype = r.params.out_dtype;
    cfg.threads = r.params.threads;
    return cfg;
}

SubspaceMergeConfig subspace_config(const MergeRecipe& r) {
    auto cfg = default_subspace_config(subspace_method(r.method));
    cfg.lambda = r.params.lambda;
    cfg.rank_fraction = r.params.rank_fraction;
    cfg.beta = r.params.beta;
    cfg.epsilon = r.params.epsilon;
    cfg.orthogonalizer = r.params.orthogonalizer;
    cfg.ns_iterations = r.params.ns_iterations;
    cfg.ns_schedule = r.params.ns_schedule;
    cfg.min_condition = r.params.min_condition;
    cfg.common_fraction = r.params.common_fraction;
    cfg.out_dtype = r.params.out_dtype;
    cfg.threads = r.params.threads;
    return cfg;
}

void validate(const MergeRecipe& r) {
    if (r.base_path.empty()) throw MissingField("recipe field 'base' is empty");
    if (r.output_path.empty()) throw MissingField("recipe field 'output' is empty");
    if (r.models.empty()) throw MissingField("recipe lists no models");
    switch (method_family(r.method)) {
        case MethodFamily::ParameterSpace: {
            const auto cfg = ps_config(r);
            validate(cfg, r.models.size() + (cfg.include_base ? 1 : 0));
            if (cfg.method == PsMethod::ModelStock && r.models.size() < 2) {
                throw InvalidParameter("model_stock needs at least two models");
            }
            break;
        }
        case MethodFamily::TaskSpace: {
            const auto cfg = tau_config(r);
            validate(cfg);
            if (cfg.method == TauMethod::Sce && r.models.size() < 2) {
                throw InvalidParameter("sce needs at least two models");
            }
            break;
        }
        case MethodFamily::Subspace:
            validate(subspace_config(r));
            break;
    }
}

MergeRecipe parse_recipe(std::string_view text) {
    YAML::Node root;
    try {
        root = YAML::Load(std::string(text));
    } catch (const YAML::Exception& e) {
        throw FormatError(fmt::format("recipe is not valid YAML: {}", e.what()));
    }
    if (!root.IsMap()) throw FormatError("recipe must be a mapping");
    for (const auto& kv : root) {
        const auto key = kv.first.as<std::string>();
        if (!contains(kTopLevel, key)) throw FormatError(fmt::format("unknown recipe key '{}'", key));
    }
    if (!root["method"] || !root["method"].IsScalar()) throw MissingField("recipe field 'method' is missing");

    MergeRecipe r;
    r.method = root["method"].as<std::string>();
    if (!is_known_method(r.method)) throw UnknownMethod(fmt::format("unknown method '{}'", r.method));
    r.base_path = required_path(root, "base");
    r.models = parse_models(root["models"]);
    r.output_path = required_path(root, "output");
    r.params = default_params(r.method);

    if (const auto params = root["params"]; params && !params.IsNull()) {
        if (!params.IsMap()) throw FormatError("'params' must be a mapping");
        const auto accepted = accepted_params(r.method);
        for (const auto& kv : params) {
            const auto key = kv.first.as<std::string>();
            if (!contains(accepted, key)) {
                throw FormatError(fmt::format("parameter '{}' is not used by method '{}'", key, r.method));
            }
            apply_param(r.params, key, kv.second);
        }
    }
    validate(r);
    return r;
}

MergeRecipe load_recipe(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(fmt::format("cannot open recipe '{}'", path.string()));
    std::ostringstream ss;
    ss << in.rdbuf();
    try {
        return parse_recipe(ss.str());
    } catch (const Error& e) {
        rethrow_with_context(e, path.string());
    }
}

std::string_view orthogonalizer_name(Orthogonalizer o) {
    return o == Orthogonalizer::Procrustes ? "procrustes" : "newton_schulz";
}

std::string_view ns_schedule_name(NsSchedule s) { return s == NsSchedule::Quintic ? "quintic" : "simple"; }

std::string serialize_recipe(const MergeRecipe& r) {
    std::string out;
    out += fmt::format("method: {}\n", r.method);
    out += fmt::format("base: {}\n", yaml_quoted(r.base_path));
    out += "models:\n";
    for (const auto& m : r.models) {
        if (m.label.empty()) {
            out += fmt::format("  - {}\n", yaml_quoted(m.path));
        } else {
            out += fmt::format("  - path: {}\n    label: {}\n", yaml_quoted(m.path), yaml_quoted(m.label));
        }
    }
    out += fmt::format("output: {}\n", yaml_quoted(r.output_path));

    const auto& p = r.params;
    std::string params;
    for (const auto key : accepted_params(r.method)) {
        std::string value;
        if (key == "lambda") value = number(p.lambda);
        else if (key == "rank_fraction") {
            if (!p.rank_fraction) continue;
            value = number(*p.rank_fraction);
        } else if (key == "beta") value = number(p.beta);
        else if (key == "epsilon") value = number(p.epsilon);
        else if (key == "orthogonalizer") value = orthogonalizer_name(p.orthogonalizer);
        else if (key == "ns_iterations") value = std::to_string(p.ns_iterations);
        else if (key == "ns_schedule") value = ns_schedule_name(p.ns_schedule);
        else if (key == "min_condition") value = number(p.min_condition);
        else if (key == "common_fraction") value = number(p.common_fraction);
        else if (key == "density") value = number(p.density);
        else if (key == "retain_fraction") value = number(p.retain_fraction);
        else if (key == "select_fraction") value = number(p.select_fraction);
        else if (key == "temperature") value = number(p.temperature);
        else if (key == "include_base") value = p.include_base ? "true" : "false";
        else if (key == "tolerance") value = number(p.tolerance);
        else if (key == "max_iterations") value = std::to_string(p.max_iterations);
        else if (key == "out_dtype") {
            if (!p.out_dtype) continue;
            value = lower(std::string(dtype_tag(*p.out_dtype)));
        } else if (key == "threads") value = std::to_string(p.threads);
        else if (key == "weights") {
            if (p.weights.empty()) continue;
            std::vector<std::string> parts;
            for (double w : p.weights) parts.push_back(number(w));
            value = "[" + fmt::format("{}", fmt::join(parts, ", ")) + "]";
        }
        params += fmt::format("  {}: {}\n", key, value);
    }
    if (!params.empty()) out += "params:\n" + params;
    return out;
}

}  // namespace ckptmerge
