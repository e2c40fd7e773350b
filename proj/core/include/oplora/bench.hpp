// Copyright (c) 2026, The OPLoRA C++ Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "oplora/errors.hpp"
#include "oplora/lorsum.hpp"
#include "oplora/nets.hpp"
#include "oplora/optim.hpp"

// Experiment harness: JSON configs, seeded runs, CSV output, multi-seed
// aggregation, learning-rate sweeps and the OPLoRA-vs-SVDLoRA gap report.
namespace oplora::bench {

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kRunCsvHeader = "step,loss,oracle_gap,flops,wall_ms";
inline constexpr const char* kManifestHeader = "method,variant,eta,seed,status,message,file";
inline constexpr const char* kAggregateHeader =
    "step,n,loss_median,loss_ci_low,loss_ci_high,oracle_gap_median,oracle_gap_ci_low,oracle_gap_ci_high";

class SweepError : public Error {
public:
    using Error::Error;
};

class ReportError : public Error {
public:
    using Error::Error;
};

enum class TaskKind { linear, mlp };
enum class Method { lora_sgd, lora_adamw, prec_lora, oplora, oplora_proj, oplora_scaled, svdlora, full };

std::string_view to_string(Method m) noexcept;
std::optional<Method> parse_method(std::string_view s) noexcept;

struct TaskConfig {
    TaskKind kind = TaskKind::linear;
    std::uint64_t task_seed = 0;
    /// Draw the initial adapter from task_seed instead of the run seed, so
    /// every seed starts from the same point.
    bool fixed_init = false;
    /// 0 = full batch (linear) or all samples (mlp).
    std::size_t batch_size = 0;

    // linear
    std::size_t d_out = 120;
    std::size_t d_in = 40;
    InitKind init = InitKind::random_svd;
    TargetSpec target;

    // mlp
    std::vector<std::size_t> dims;
    Nonlinearity nonlinearity = Nonlinearity::tanh;
    LossKind loss = LossKind::mse;
    std::size_t samples = 256;
};

struct ExperimentConfig {
    int schema_version = kSchemaVersion;
    std::string name = "experiment";
    TaskConfig task;
    Method method = Method::oplora;
    std::size_t rank = 8;
    /// Variant axes: every (num_iters, momentum_rank) pair is a variant.
    std::vector<int> num_iters{1};
    /// 0 = adapter rank.
    std::vector<std::size_t> momentum_rank{0};
    std::vector<double> eta{0.1};

    double alpha = 0.0;
    double lambda = 1e-3;
    double beta = 0.95;
    double delta = 1e-4;
    std::size_t metric_rank = 0;
    StartTurn start_turn = StartTurn::in_first;
    LorsumMode mode = LorsumMode::alternating;
    double tracking_lambda = 1e-10;
    AdamHyper adam;

    std::size_t steps = 200;
    std::vector<std::uint64_t> seeds{0};
    /// Shadow SVDLoRA run per seed; fills the oracle_gap column (linear task only).
    bool track_oracle = false;
    /// Off by default so that repeated runs produce byte-identical CSVs.
    bool record_wall_time = false;
    std::size_t bootstrap_resamples = 10000;
    std::uint64_t bootstrap_seed = 20260101;
    std::string output_dir = "runs";
};

/// Parses and validates a JSON document. Errors carry the offending field path.
ExperimentConfig parse_config(std::string_view json_text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Canonical JSON (all fields, fixed key order).
std::string to_json(const ExperimentConfig& cfg);
/// `sweep` additionally requires every eta on the {1, 2, 5} x 10^k grid.
void validate(const ExperimentConfig& cfg, bool sweep = false);
bool on_eta_grid(double eta) noexcept;

struct RunSpec {
    Method method = Method::oplora;
    int num_iters = 1;
    std::size_t momentum_rank = 0;
    double eta = 0.1;
    std::uint64_t seed = 0;

    std::string variant() const;
    std::string file_name() const;
};

/// Cartesian product variants x eta x seeds in a fixed order.
std::vector<RunSpec> expand_runs(const ExperimentConfig& cfg);

struct RunRecord {
    std::size_t step = 0;
    double loss = 0.0;
    /// ||U V^T - W_svdlora||_F against the shadow run, NaN when not tracked.
    double oracle_gap = 0.0;
    /// Cumulative flops of gradient and optimizer work (evaluation excluded).
    std::uint64_t flops = 0;
    double wall_ms = 0.0;
};

enum class RunStatus { ok, failed, diverged };
std::string_view to_string(RunStatus s) noexcept;

struct RunResult {
    RunSpec spec;
    RunStatus status = RunStatus::ok;
    std::string message;
    /// Row 0 is the initial point; row t follows the t-th update.
    std::vector<RunRecord> records;
    /// Scalars of optimizer state kept between steps, and adapter parameters.
    std::size_t state_scalars = 0;
    std::size_t adapter_parameters = 0;
};

/// One training run, no I/O. Optimizer errors are caught and reported in the result.
RunResult run_single(const ExperimentConfig& cfg, const RunSpec& spec);

void write_run_csv(std::ostream& os, const std::vector<RunRecord>& records);
std::vector<RunRecord> read_run_csv(const std::filesystem::path& path);

struct AggregateRow {
    std::size_t step = 0;
    std::size_t n = 0;
    double loss_median = 0.0;
    double loss_ci_low = 0.0;
    double loss_ci_high = 0.0;
    double gap_median = 0.0;
    double gap_ci_low = 0.0;
    double gap_ci_high = 0.0;
};

/// Median of the values and the bootstrap 95% percentile interval of the median.
struct MedianCi {
    double median = 0.0;
    double low = 0.0;
    double high = 0.0;
};
MedianCi bootstrap_median_ci(const std::vector<double>& values, std::size_t resamples, std::uint64_t seed);
double median(std::vector<double> values);

/// Per-step aggregate across runs. Diverged runs count as +inf after their
/// last row; failed runs are skipped.
std::vector<AggregateRow> aggregate(const std::vector<const RunResult*>& runs, std::size_t steps,
                                    std::size_t resamples, std::uint64_t seed);

struct RunOptions {
    std::optional<std::filesystem::path> out_dir;
    std::optional<std::uint64_t> seed_override;
    bool quiet = true;
    std::ostream* log = nullptr;
};

struct ExperimentSummary {
    ExperimentConfig config;
    std::filesystem::path output_dir;
    std::vector<RunResult> runs;

    bool all_ok() const noexcept;
};

/// Runs every (variant, eta, seed) and writes runs/*.csv, manifest.csv,
/// aggregate/*.csv and config.json under the output directory.
ExperimentSummary run_experiment(ExperimentConfig cfg, const RunOptions& opts = {});

struct SweepEntry {
    Method method = Method::oplora;
    std::string variant;
    double eta = 0.0;
    /// Mean over the last 10% of steps of the median-across-seeds loss; +inf if non-finite.
    double score = 0.0;
    bool selected = false;
};

struct SweepResult {
    ExperimentSummary experiment;
    /// Sorted by score, ties toward smaller eta.
    std::vector<SweepEntry> entries;
};

/// Runs the grid and writes sweep_summary.csv. Throws SweepError if every run failed.
SweepResult lr_sweep(ExperimentConfig cfg, const RunOptions& opts = {});
double sweep_score(const std::vector<AggregateRow>& rows);

struct GapRow {
    std::string variant;
    int num_iters = 1;
    std::size_t momentum_rank = 0;
    double eta = 0.0;
    /// median final loss / median baseline final loss
    double final_loss_ratio = 0.0;
    /// median over seeds of |final loss - baseline final loss|
    double final_loss_gap = 0.0;
    /// median over seeds of the mean per-step oracle_gap (NaN if not tracked)
    double mean_distance = 0.0;
};

struct GapVerdict {
    /// "num_iters" or "momentum_rank"
    std::string axis;
    /// "mean_distance" or "final_loss_gap"
    std::string metric;
    std::string fixed;
    double eta = 0.0;
    bool nonincreasing = true;
};

struct GapReport {
    std::vector<GapRow> rows;
    std::vector<GapVerdict> verdicts;
};

/// Compares an OPLoRA output directory against a baseline one (usually
/// SVDLoRA). Both must share the task, eta values and seeds. Writes
/// gap_report.csv and gap_verdicts.csv into out_dir when given.
GapReport gap_report(const std::filesystem::path& runs_dir, const std::filesystem::path& baseline_dir,
                     const std::optional<std::filesystem::path>& out_dir = std::nullopt);

/// 17 significant digits.
std::string format_double(double x);

} // namespace oplora::bench
