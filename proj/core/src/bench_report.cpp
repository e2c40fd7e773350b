// Copyright (c) 2026, The OPLoRA C++ Authors
// SPDX-License-Identifier: Apache-2.0
//

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "oplora/bench.hpp"

namespace oplora::bench {

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();
constexpr double kInf = std::numeric_limits<double>::infinity();

std::vector<std::string> split_csv_row(const std::string& line) {
    std::vector<std::string> cells(1);
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cells.back() += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cells.back() += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            cells.emplace_back();
        } else {
            cells.back() += c;
        }
    }
    return cells;
}

struct ManifestEntry {
    std::string variant;
    double eta = 0.0;
    std::uint64_t seed = 0;
    RunStatus status = RunStatus::ok;
    std::string file;
};

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.csv");
    if (!in) {
        throw ReportError(fmt::format("{}: no manifest.csv", dir.string()));
    }
    std::string line;
    std::getline(in, line);
    if (line != kManifestHeader) {
        throw ReportError(fmt::format("{}: unexpected manifest header", dir.string()));
    }
    std::vector<ManifestEntry> out;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        const auto cells = split_csv_row(line);
        if (cells.size() != 7) {
            throw ReportError(fmt::format("{}: malformed manifest row '{}'", dir.string(), line));
        }
        ManifestEntry e;
        e.variant = cells[1];
        try {
            e.eta = std::stod(cells[2]);
            e.seed = std::stoull(cells[3]);
        } catch (const std::logic_error&) {
            throw ReportError(fmt::format("{}: malformed manifest row '{}'", dir.string(), line));
        }
        e.status = cells[4] == "ok" ? RunStatus::ok : cells[4] == "diverged" ? RunStatus::diverged : RunStatus::failed;
        e.file = cells[6];
        out.push_back(std::move(e));
    }
    return out;
}

nlohmann::json read_config_json(const std::filesystem::path& dir) {
    std::ifstream in(dir / "config.json");
    if (!in) {
        throw ReportError(fmt::format("{}: no config.json", dir.string()));
    }
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ReportError(fmt::format("{}: unreadable config.json: {}", dir.string(), e.what()));
    }
}

// Final loss and mean per-step oracle distance of one run.
struct RunSummary {
    double final_loss = kNan;
    double mean_distance = kNan;
};

std::optional<RunSummary> summarize(const std::filesystem::path& dir, const ManifestEntry& e) {
    if (e.status == RunStatus::failed) {
        return std::nullopt;
    }
    const auto records = read_run_csv(dir / e.file);
    RunSummary s;
    if (e.status == RunStatus::diverged || records.empty()) {
        s.final_loss = kInf;
        return s;
    }
    s.final_loss = records.back().loss;
    double sum = 0.0;
    for (std::size_t i = 1; i < records.size(); ++i) {
        sum += records[i].oracle_gap;
    }
    s.mean_distance = records.size() > 1 ? sum / double(records.size() - 1) : kNan;
    return s;
}

struct Key {
    std::string variant;
    double eta;
    bool operator<(const Key& o) const { return std::tie(variant, eta) < std::tie(o.variant, o.eta); }
};

std::pair<int, std::size_t> parse_variant(const std::string& v) {
    int k = 0;
    std::size_t mr = 0;
    if (std::sscanf(v.c_str(), "k%d_mr%zu", &k, &mr) != 2) {
        throw ReportError(fmt::format("unrecognized variant label '{}'", v));
    }
    return {k, mr};
}

bool nonincreasing(const std::vector<double>& xs) {
    for (std::size_t i = 1; i < xs.size(); ++i) {
        if (std::isnan(xs[i]) || std::isnan(xs[i - 1])) {
            return false;
        }
        if (xs[i] > xs[i - 1] + 1e-12 * std::max(1.0, std::abs(xs[i - 1]))) {
            return false;
        }
    }
    return true;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw ReportError(fmt::format("cannot write {}", path.string()));
    }
    out << text;
}

} // namespace

GapReport gap_report(const std::filesystem::path& runs_dir, const std::filesystem::path& baseline_dir,
                     const std::optional<std::filesystem::path>& out_dir) {
    const auto cfg_a = read_config_json(runs_dir);
    const auto cfg_b = read_config_json(baseline_dir);
    for (const char* field : {"task", "steps"}) {
        if (cfg_a.value(field, nlohmann::json()) != cfg_b.value(field, nlohmann::json())) {
            throw ReportError(fmt::format("config mismatch in '{}'", field));
        }
    }
    auto as_set = [](const nlohmann::json& j, const char* field) {
        std::set<std::string> s;
        for (const auto& x : j.value(field, nlohmann::json::array())) {
            s.insert(x.dump());
        }
        return s;
    };
    for (const char* field : {"eta", "seeds"}) {
        if (as_set(cfg_a, field) != as_set(cfg_b, field)) {
            throw ReportError(fmt::format("config mismatch in '{}'", field));
        }
    }
    const std::size_t adapter_rank = cfg_a.value("rank", std::size_t{0});

    const auto manifest_a = read_manifest(runs_dir);
    const auto manifest_b = read_manifest(baseline_dir);

    std::map<Key, std::map<std::uint64_t, std::optional<RunSummary>>> runs;
    std::map<Key, std::map<std::uint64_t, std::optional<RunSummary>>> base;
    std::set<std::string> base_variants;
    for (const auto& e : manifest_a) {
        runs[{e.variant, e.eta}][e.seed] = summarize(runs_dir, e);
    }
    for (const auto& e : manifest_b) {
        base[{e.variant, e.eta}][e.seed] = summarize(baseline_dir, e);
        base_variants.insert(e.variant);
    }

    GapReport report;
    for (const auto& [key, seeds] : runs) {
        // Matching variant if the baseline has it, otherwise its only variant.
        std::string base_variant = key.variant;
        if (!base_variants.count(base_variant)) {
            if (base_variants.size() != 1) {
                throw ReportError(fmt::format("baseline has no variant '{}' and more than one to choose from",
                                              key.variant));
            }
            base_variant = *base_variants.begin();
        }
        const auto it = base.find({base_variant, key.eta});
        if (it == base.end()) {
            throw ReportError(fmt::format("baseline has no runs at eta {}", key.eta));
        }

        std::vector<double> finals;
        std::vector<double> base_finals;
        std::vector<double> gaps;
        std::vector<double> distances;
        for (const auto& [seed, summary] : seeds) {
            const auto b = it->second.find(seed);
            if (b == it->second.end()) {
                throw ReportError(fmt::format("baseline has no run for seed {}", seed));
            }
            if (summary) {
                finals.push_back(summary->final_loss);
                distances.push_back(summary->mean_distance);
            }
            if (b->second) {
                base_finals.push_back(b->second->final_loss);
            }
            if (summary && b->second) {
                gaps.push_back(std::abs(summary->final_loss - b->second->final_loss));
            }
        }
        const auto [k, mr] = parse_variant(key.variant);
        GapRow row;
        row.variant = key.variant;
        row.num_iters = k;
        row.momentum_rank = mr == 0 ? adapter_rank : mr;
        row.eta = key.eta;
        const double m = median(finals);
        const double mb = median(base_finals);
        row.final_loss_ratio = m == mb ? 1.0 : m / mb;
        row.final_loss_gap = median(gaps);
        const bool tracked = std::none_of(distances.begin(), distances.end(), [](double d) { return std::isnan(d); });
        row.mean_distance = tracked ? median(distances) : kNan;
        report.rows.push_back(row);
    }

    // Monotonicity along each axis with the other one held fixed.
    auto verdicts_along = [&](const std::string& axis) {
        const bool along_k = axis == "num_iters";
        std::map<std::pair<double, std::size_t>, std::vector<const GapRow*>> lines;
        for (const GapRow& r : report.rows) {
            lines[{r.eta, along_k ? r.momentum_rank : std::size_t(r.num_iters)}].push_back(&r);
        }
        for (auto& [fixed, members] : lines) {
            if (members.size() < 2) {
                continue;
            }
            std::sort(members.begin(), members.end(), [&](const GapRow* a, const GapRow* b) {
                return along_k ? a->num_iters < b->num_iters : a->momentum_rank < b->momentum_rank;
            });
            const bool use_distance =
                along_k && std::none_of(members.begin(), members.end(),
                                        [](const GapRow* r) { return std::isnan(r->mean_distance); });
            std::vector<double> xs;
            for (const GapRow* r : members) {
                xs.push_back(use_distance ? r->mean_distance : r->final_loss_gap);
            }
            GapVerdict v;
            v.axis = axis;
            v.metric = use_distance ? "mean_distance" : "final_loss_gap";
            v.fixed = along_k ? fmt::format("momentum_rank={}", fixed.second) : fmt::format("num_iters={}", fixed.second);
            v.eta = fixed.first;
            v.nonincreasing = nonincreasing(xs);
            report.verdicts.push_back(v);
        }
    };
    verdicts_along("num_iters");
    verdicts_along("momentum_rank");

    if (out_dir) {
        std::filesystem::create_directories(*out_dir);
        std::ostringstream rows;
        rows << "variant,num_iters,momentum_rank,eta,final_loss_ratio,final_loss_gap,mean_distance\n";
        for (const GapRow& r : report.rows) {
            rows << r.variant << ',' << r.num_iters << ',' << r.momentum_rank << ',' << format_double(r.eta) << ','
                 << format_double(r.final_loss_ratio) << ',' << format_double(r.final_loss_gap) << ','
                 << format_double(r.mean_distance) << '\n';
        }
        write_file(*out_dir / "gap_report.csv", rows.str());
        std::ostringstream verdicts;
        verdicts << "axis,metric,fixed,eta,nonincreasing\n";
        for (const GapVerdict& v : report.verdicts) {
            verdicts << v.axis << ',' << v.metric << ',' << v.fixed << ',' << format_double(v.eta) << ','
                     << (v.nonincreasing ? "yes" : "no") << '\n';
        }
        write_file(*out_dir / "gap_verdicts.csv", verdicts.str());
    }
    return report;
}

} // namespace oplora::bench
