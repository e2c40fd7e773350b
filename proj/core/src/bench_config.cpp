// Copyright (c) 2026, The OPLoRA C++ Authors
// SPDX-License-Identifier: Apache-2.0
//

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "oplora/bench.hpp"

namespace oplora::bench {

using nlohmann::json;

namespace {

// Reads fields of one JSON object, remembering which keys were consumed so
// that leftovers can be reported as unknown.
class ObjectReader {
public:
    ObjectReader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
        if (!obj_.is_object()) {
            throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
        }
    }

    std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    const json* find(const std::string& key) {
        seen_.insert(key);
        auto it = obj_.find(key);
        return it == obj_.end() ? nullptr : &*it;
    }

    const json& require(const std::string& key) {
        const json* j = find(key);
        if (j == nullptr) {
            throw ConfigError(field(key), "missing required field");
        }
        return *j;
    }

    template <typename T>
    void read(const std::string& key, T& out) {
        if (const json* j = find(key)) {
            out = convert<T>(*j, field(key));
        }
    }

    // Accepts either a scalar or a nonempty array of scalars.
    template <typename T>
    void read_list(const std::string& key, std::vector<T>& out) {
        const json* j = find(key);
        if (j == nullptr) {
            return;
        }
        out.clear();
        if (j->is_array()) {
            if (j->empty()) {
                throw ConfigError(field(key), "list must not be empty");
            }
            for (std::size_t i = 0; i < j->size(); ++i) {
                out.push_back(convert<T>((*j)[i], fmt::format("{}[{}]", field(key), i)));
            }
        } else {
            out.push_back(convert<T>(*j, field(key)));
        }
    }

    void finish() const {
        for (auto it = obj_.begin(); it != obj_.end(); ++it) {
            if (!seen_.count(it.key())) {
                throw ConfigError(field(it.key()), "unknown key");
            }
        }
    }

    template <typename T>
    static T convert(const json& j, const std::string& name) {
        if constexpr (std::is_same_v<T, bool>) {
            if (!j.is_boolean()) {
                throw ConfigError(name, "expected a boolean");
            }
            return j.get<bool>();
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!j.is_string()) {
                throw ConfigError(name, "expected a string");
            }
            return j.get<std::string>();
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!j.is_number()) {
                throw ConfigError(name, "expected a number");
            }
            const double v = j.get<double>();
            if (!std::isfinite(v)) {
                throw ConfigError(name, "must be finite");
            }
            return v;
        } else {
            static_assert(std::is_integral_v<T>);
            if (!j.is_number_integer()) {
                throw ConfigError(name, "expected an integer");
            }
            if constexpr (std::is_unsigned_v<T>) {
                if (j.is_number_integer() && !j.is_number_unsigned() && j.get<long long>() < 0) {
                    throw ConfigError(name, "must be nonnegative");
                }
            }
            return j.get<T>();
        }
    }

private:
    const json& obj_;
    std::string path_;
    std::set<std::string> seen_;
};

template <typename E>
E parse_enum(const std::string& s, const std::string& field, std::initializer_list<std::pair<const char*, E>> table) {
    std::string allowed;
    for (const auto& [name, value] : table) {
        if (s == name) {
            return value;
        }
        allowed += allowed.empty() ? name : fmt::format(", {}", name);
    }
    throw ConfigError(field, fmt::format("'{}' is not one of {}", s, allowed));
}

template <typename E>
const char* enum_name(E value, std::initializer_list<std::pair<const char*, E>> table) {
    for (const auto& [name, v] : table) {
        if (v == value) {
            return name;
        }
    }
    return "?";
}

constexpr std::initializer_list<std::pair<const char*, TaskKind>> kTaskKinds{{"linear", TaskKind::linear},
                                                                             {"mlp", TaskKind::mlp}};
constexpr std::initializer_list<std::pair<const char*, InitKind>> kInits{{"random_svd", InitKind::random_svd},
                                                                         {"svd_init", InitKind::svd_init}};
constexpr std::initializer_list<std::pair<const char*, TargetSpec::Kind>> kTargets{
    {"gaussian", TargetSpec::Kind::gaussian}, {"spectrum", TargetSpec::Kind::spectrum}};
constexpr std::initializer_list<std::pair<const char*, Nonlinearity>> kNonlinearities{{"tanh", Nonlinearity::tanh},
                                                                                      {"relu", Nonlinearity::relu}};
constexpr std::initializer_list<std::pair<const char*, LossKind>> kLosses{{"mse", LossKind::mse},
                                                                          {"cross_entropy", LossKind::cross_entropy}};
constexpr std::initializer_list<std::pair<const char*, StartTurn>> kStartTurns{{"in_first", StartTurn::in_first},
                                                                               {"out_first", StartTurn::out_first}};
constexpr std::initializer_list<std::pair<const char*, LorsumMode>> kModes{{"alternating", LorsumMode::alternating},
                                                                           {"simultaneous", LorsumMode::simultaneous}};
constexpr std::initializer_list<std::pair<const char*, Method>> kMethods{
    {"lora_sgd", Method::lora_sgd},       {"lora_adamw", Method::lora_adamw},
    {"prec_lora", Method::prec_lora},     {"oplora", Method::oplora},
    {"oplora_proj", Method::oplora_proj}, {"oplora_scaled", Method::oplora_scaled},
    {"svdlora", Method::svdlora},         {"full", Method::full}};

template <typename E>
void read_enum(ObjectReader& r, const std::string& key, E& out,
               std::initializer_list<std::pair<const char*, E>> table) {
    std::string s;
    if (r.find(key) == nullptr) {
        return;
    }
    r.read(key, s);
    out = parse_enum(s, r.field(key), table);
}

TaskConfig parse_task(const json& j) {
    TaskConfig t;
    ObjectReader r(j, "task");
    read_enum(r, "kind", t.kind, kTaskKinds);
    r.read("task_seed", t.task_seed);
    r.read("fixed_init", t.fixed_init);
    r.read("batch_size", t.batch_size);
    if (t.kind == TaskKind::linear) {
        r.read("d_out", t.d_out);
        r.read("d_in", t.d_in);
        read_enum(r, "init", t.init, kInits);
        if (const json* tj = r.find("target")) {
            ObjectReader tr(*tj, "task.target");
            read_enum(tr, "kind", t.target.kind, kTargets);
            tr.read_list("singular_values", t.target.singular_values);
            tr.finish();
        }
    } else {
        r.read_list("dims", t.dims);
        read_enum(r, "nonlinearity", t.nonlinearity, kNonlinearities);
        read_enum(r, "loss", t.loss, kLosses);
        r.read("samples", t.samples);
    }
    r.finish();
    return t;
}

json task_to_json(const TaskConfig& t) {
    json j;
    j["kind"] = enum_name(t.kind, kTaskKinds);
    j["task_seed"] = t.task_seed;
    j["fixed_init"] = t.fixed_init;
    j["batch_size"] = t.batch_size;
    if (t.kind == TaskKind::linear) {
        j["d_out"] = t.d_out;
        j["d_in"] = t.d_in;
        j["init"] = enum_name(t.init, kInits);
        json target;
        target["kind"] = enum_name(t.target.kind, kTargets);
        if (t.target.kind == TargetSpec::Kind::spectrum) {
            target["singular_values"] = t.target.singular_values;
        }
        j["target"] = target;
    } else {
        j["dims"] = t.dims;
        j["nonlinearity"] = enum_name(t.nonlinearity, kNonlinearities);
        j["loss"] = enum_name(t.loss, kLosses);
        j["samples"] = t.samples;
    }
    return j;
}

} // namespace

std::string_view to_string(Method m) noexcept { return enum_name(m, kMethods); }

std::optional<Method> parse_method(std::string_view s) noexcept {
    for (const auto& [name, value] : kMethods) {
        if (s == name) {
            return value;
        }
    }
    return std::nullopt;
}

bool on_eta_grid(double eta) noexcept {
    if (!(eta > 0.0) || !std::isfinite(eta)) {
        return false;
    }
    const double k = std::floor(std::log10(eta));
    const double mantissa = eta / std::pow(10.0, k);
    for (double m : {1.0, 2.0, 5.0, 10.0}) {
        if (std::abs(mantissa - m) <= 1e-9 * m) {
            return true;
        }
    }
    return false;
}

void validate(const ExperimentConfig& cfg, bool sweep) {
    if (cfg.schema_version != kSchemaVersion) {
        throw ConfigError("schema_version", fmt::format("unsupported version {}, expected {}", cfg.schema_version,
                                                        kSchemaVersion));
    }
    const TaskConfig& t = cfg.task;
    if (t.kind == TaskKind::linear) {
        if (t.d_out == 0 || t.d_in == 0) {
            throw ConfigError("task.d_out", "dimensions must be positive");
        }
        if (t.batch_size > t.d_in) {
            throw ConfigError("task.batch_size", "exceeds the number of columns d_in");
        }
        if (cfg.rank == 0 || cfg.rank > std::min(t.d_out, t.d_in)) {
            throw ConfigError("rank", "must lie in [1, min(d_out, d_in)]");
        }
        for (double s : t.target.singular_values) {
            if (s < 0.0) {
                throw ConfigError("task.target.singular_values", "must be nonnegative");
            }
        }
    } else {
        if (t.dims.size() < 2) {
            throw ConfigError("task.dims", "needs at least an input and an output width");
        }
        for (std::size_t d : t.dims) {
            if (d == 0) {
                throw ConfigError("task.dims", "widths must be positive");
            }
        }
        if (cfg.rank == 0) {
            throw ConfigError("rank", "must be positive");
        }
        if (t.samples == 0 || t.batch_size > t.samples) {
            throw ConfigError("task.batch_size", "must not exceed task.samples");
        }
        if (cfg.track_oracle) {
            throw ConfigError("track_oracle", "only supported on the linear task");
        }
    }
    for (int k : cfg.num_iters) {
        if (k < 1) {
            throw ConfigError("num_iters", "must be at least 1");
        }
    }
    for (double eta : cfg.eta) {
        if (!(eta > 0.0)) {
            throw ConfigError("eta", "must be positive");
        }
        if (sweep && !on_eta_grid(eta)) {
            throw ConfigError("eta", fmt::format("{} is not on the {{1, 2, 5}} x 10^k grid", eta));
        }
    }
    if (cfg.eta.empty()) {
        throw ConfigError("eta", "grid must not be empty");
    }
    if (!(cfg.alpha >= 0.0 && cfg.alpha < 1.0)) {
        throw ConfigError("alpha", "must lie in [0, 1)");
    }
    if (!(cfg.lambda >= 0.0)) {
        throw ConfigError("lambda", "must be nonnegative");
    }
    if (!(cfg.beta > 0.0 && cfg.beta <= 1.0)) {
        throw ConfigError("beta", "must lie in (0, 1]");
    }
    if (!(cfg.delta > 0.0)) {
        throw ConfigError("delta", "must be positive");
    }
    if (!(cfg.tracking_lambda >= 0.0)) {
        throw ConfigError("tracking_lambda", "must be nonnegative");
    }
    if (cfg.steps == 0) {
        throw ConfigError("steps", "must be positive");
    }
    if (cfg.seeds.empty()) {
        throw ConfigError("seeds", "must not be empty");
    }
    std::vector<std::uint64_t> sorted = cfg.seeds;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
        throw ConfigError("seeds", "must be distinct");
    }
    if (cfg.bootstrap_resamples == 0) {
        throw ConfigError("bootstrap.resamples", "must be positive");
    }
    if (cfg.output_dir.empty()) {
        throw ConfigError("output_dir", "must not be empty");
    }
}

ExperimentConfig parse_config(std::string_view json_text) {
    json root;
    try {
        root = json::parse(json_text.begin(), json_text.end());
    } catch (const json::parse_error& e) {
        throw ConfigError("<document>", fmt::format("invalid JSON: {}", e.what()));
    }

    ExperimentConfig cfg;
    ObjectReader r(root, "");
    cfg.schema_version = ObjectReader::convert<int>(r.require("schema_version"), "schema_version");
    if (cfg.schema_version != kSchemaVersion) {
        throw ConfigError("schema_version", fmt::format("unsupported version {}", cfg.schema_version));
    }
    r.read("name", cfg.name);
    if (const json* tj = r.find("task")) {
        cfg.task = parse_task(*tj);
    }
    const std::string method = ObjectReader::convert<std::string>(r.require("method"), "method");
    cfg.method = parse_enum(method, "method", kMethods);
    r.read("rank", cfg.rank);
    r.read_list("num_iters", cfg.num_iters);
    r.read_list("momentum_rank", cfg.momentum_rank);
    r.require("eta");
    r.read_list("eta", cfg.eta);
    r.read("alpha", cfg.alpha);
    r.read("lambda", cfg.lambda);
    r.read("beta", cfg.beta);
    r.read("delta", cfg.delta);
    r.read("metric_rank", cfg.metric_rank);
    read_enum(r, "start_turn", cfg.start_turn, kStartTurns);
    read_enum(r, "mode", cfg.mode, kModes);
    r.read("tracking_lambda", cfg.tracking_lambda);
    if (const json* aj = r.find("adam")) {
        ObjectReader ar(*aj, "adam");
        ar.read("beta1", cfg.adam.beta1);
        ar.read("beta2", cfg.adam.beta2);
        ar.read("eps", cfg.adam.eps);
        ar.read("weight_decay", cfg.adam.weight_decay);
        ar.finish();
    }
    r.read("steps", cfg.steps);
    r.read_list("seeds", cfg.seeds);
    r.read("track_oracle", cfg.track_oracle);
    r.read("record_wall_time", cfg.record_wall_time);
    if (const json* bj = r.find("bootstrap")) {
        ObjectReader br(*bj, "bootstrap");
        br.read("resamples", cfg.bootstrap_resamples);
        br.read("seed", cfg.bootstrap_seed);
        br.finish();
    }
    r.read("output_dir", cfg.output_dir);
    r.finish();

    validate(cfg);
    return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("<file>", fmt::format("cannot open {}", path.string()));
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

std::string to_json(const ExperimentConfig& cfg) {
    json j;
    j["schema_version"] = cfg.schema_version;
    j["name"] = cfg.name;
    j["task"] = task_to_json(cfg.task);
    j["method"] = std::string(to_string(cfg.method));
    j["rank"] = cfg.rank;
    j["num_iters"] = cfg.num_iters;
    j["momentum_rank"] = cfg.momentum_rank;
    j["eta"] = cfg.eta;
    j["alpha"] = cfg.alpha;
    j["lambda"] = cfg.lambda;
    j["beta"] = cfg.beta;
    j["delta"] = cfg.delta;
    j["metric_rank"] = cfg.metric_rank;
    j["start_turn"] = enum_name(cfg.start_turn, kStartTurns);
    j["mode"] = enum_name(cfg.mode, kModes);
    j["tracking_lambda"] = cfg.tracking_lambda;
    j["adam"] = {{"beta1", cfg.adam.beta1},
                 {"beta2", cfg.adam.beta2},
                 {"eps", cfg.adam.eps},
                 {"weight_decay", cfg.adam.weight_decay}};
    j["steps"] = cfg.steps;
    j["seeds"] = cfg.seeds;
    j["track_oracle"] = cfg.track_oracle;
    j["record_wall_time"] = cfg.record_wall_time;
    j["bootstrap"] = {{"resamples", cfg.bootstrap_resamples}, {"seed", cfg.bootstrap_seed}};
    j["output_dir"] = cfg.output_dir;
    return j.dump(2) + "\n";
}

} // namespace oplora::bench
