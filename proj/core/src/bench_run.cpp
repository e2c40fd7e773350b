// Copyright (c) 2026, The OPLoRA C++ Authors
// SPDX-License-Identifier: Apache-2.0
//

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fmt/format.h>
#include <fstream>
#include <limits>
#include <map>
#include <ostream>
#include <random>
#include <sstream>

#include "oplora/bench.hpp"
#include "oplora/instrument.hpp"

namespace oplora::bench {

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();
constexpr double kInf = std::numeric_limits<double>::infinity();

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Independent streams derived from one seed.
std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) { return splitmix64(splitmix64(seed) ^ stream); }

enum Stream : std::uint64_t { kTaskStream = 1, kInitStream = 2, kBatchStream = 3, kOptimStream = 4 };

Mat dense_gradient(const LoraLinear& layer) { return matmul(layer.captured_s(), layer.captured_x(), true, false); }

// Method dispatch for one layer. Each step consumes the layer's captures.
class LayerStepper {
public:
    LayerStepper(const ExperimentConfig& cfg, const RunSpec& spec, const LoraLinear& layer, std::uint64_t seed)
        : method_(spec.method), eta_(spec.eta), cfg_(cfg) {
        switch (method_) {
        case Method::oplora:
        case Method::oplora_scaled: {
            OploraHyper h;
            h.eta = spec.eta;
            h.alpha = cfg.alpha;
            h.lambda = cfg.lambda;
            h.beta = method_ == Method::oplora_scaled ? cfg.beta : 1.0;
            h.delta = cfg.delta;
            h.num_iters = spec.num_iters;
            h.momentum_rank = spec.momentum_rank;
            h.metric_rank = cfg.metric_rank;
            h.start_turn = cfg.start_turn;
            h.mode = cfg.mode;
            h.tracking_lambda = cfg.tracking_lambda;
            h.seed = seed;
            oplora_ = OploraState(h);
            break;
        }
        case Method::prec_lora:
        case Method::oplora_proj:
            factor_momentum_.alpha = cfg.alpha;
            break;
        case Method::svdlora:
            svd_ = SvdLoraState(layer.adapter());
            break;
        case Method::full:
            dense_buffer_ = Mat(layer.d_out(), layer.d_in());
            break;
        default:
            break;
        }
    }

    void step(LoraLinear& layer) {
        switch (method_) {
        case Method::lora_sgd:
            layer.set_adapter(sgd_step(layer.adapter(), layer.factor_grads(), eta_, cfg_.alpha, sgd_));
            break;
        case Method::lora_adamw:
            layer.set_adapter(adamw_step(layer.adapter(), layer.factor_grads(), eta_, cfg_.adam, adam_));
            break;
        case Method::prec_lora:
            if (cfg_.alpha == 0.0) {
                prec_lora_step(layer, eta_, cfg_.lambda);
            } else {
                apply_factor_momentum(
                    layer, momentum_update_naive(factor_momentum_, layer.adapter(), layer.factor_grads(), cfg_.lambda));
            }
            break;
        case Method::oplora_proj:
            apply_factor_momentum(
                layer, momentum_update_proj(factor_momentum_, layer.adapter(), layer.factor_grads(), cfg_.lambda));
            break;
        case Method::oplora:
        case Method::oplora_scaled:
            oplora_step(layer, oplora_);
            break;
        case Method::svdlora:
            layer.set_adapter(svdlora_step(svd_, dense_gradient(layer), eta_, cfg_.alpha, layer.rank()));
            break;
        case Method::full:
            dense_sgd_step(layer.base_weight(), dense_buffer_, dense_gradient(layer), eta_, cfg_.alpha);
            break;
        }
        layer.clear_capture();
    }

    std::size_t state_scalars() const {
        switch (method_) {
        case Method::lora_sgd:
            return sgd_.buffer ? sgd_.buffer->parameter_count() : 0;
        case Method::lora_adamw:
            return (adam_.m ? adam_.m->parameter_count() : 0) + (adam_.v ? adam_.v->parameter_count() : 0);
        case Method::prec_lora:
        case Method::oplora_proj:
            return factor_momentum_.scalar_count();
        case Method::oplora:
        case Method::oplora_scaled:
            return oplora_.scalar_count();
        case Method::svdlora:
            return svd_.dense_weight.size() + svd_.dense_momentum.size();
        case Method::full:
            return dense_buffer_.size();
        }
        return 0;
    }

private:
    void apply_factor_momentum(LoraLinear& layer, const FactorPair& m) {
        FactorPair next = layer.adapter();
        next.u.add_scaled(-eta_, m.u);
        next.v.add_scaled(-eta_, m.v);
        layer.set_adapter(std::move(next));
    }

    Method method_;
    double eta_;
    const ExperimentConfig& cfg_;
    SgdState sgd_;
    AdamState adam_;
    FactorMomentumState factor_momentum_;
    OploraState oplora_;
    SvdLoraState svd_;
    Mat dense_buffer_;
};

// Weight actually applied by a linear-task layer (base plus adapter).
Mat effective_weight(const LoraLinear& layer) {
    return layer.w0() + matmul(layer.adapter().u, layer.adapter().v, false, true);
}

struct Clock {
    bool enabled;
    double total_ms = 0.0;
    std::chrono::steady_clock::time_point start;

    void begin() {
        if (enabled) {
            start = std::chrono::steady_clock::now();
        }
    }
    void end() {
        if (enabled) {
            total_ms += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
        }
    }
};

void run_linear(const ExperimentConfig& cfg, const RunSpec& spec, RunResult& result) {
    const TaskConfig& tc = cfg.task;
    std::mt19937_64 task_rng(stream_seed(tc.task_seed, kTaskStream));
    const LinearTask task(make_target(tc.d_out, tc.d_in, tc.target, task_rng), tc.batch_size);

    std::mt19937_64 init_rng(stream_seed(tc.fixed_init ? tc.task_seed : spec.seed, kInitStream));
    const FactorPair init = init_linear_adapter(task, cfg.rank, tc.init, init_rng);
    std::mt19937_64 batch_rng(stream_seed(spec.seed, kBatchStream));

    LoraLinear layer(Mat(tc.d_out, tc.d_in), init);
    LayerStepper stepper(cfg, spec, layer, stream_seed(spec.seed, kOptimStream));
    std::optional<SvdLoraState> shadow;
    if (cfg.track_oracle) {
        shadow.emplace(init);
    }
    result.adapter_parameters = init.parameter_count();

    auto evaluate = [&](std::size_t t, std::uint64_t flops, double wall_ms) {
        RunRecord rec;
        rec.step = t;
        rec.loss = spec.method == Method::full ? linear_task_dense_loss(task, effective_weight(layer))
                                               : linear_task_loss(task, layer.adapter());
        rec.oracle_gap = shadow ? frobenius_distance(effective_weight(layer), shadow->dense_weight) : kNan;
        rec.flops = flops;
        rec.wall_ms = wall_ms;
        result.records.push_back(rec);
        return std::isfinite(rec.loss);
    };

    Clock clock{cfg.record_wall_time, 0.0, {}};
    std::uint64_t flops = 0;
    if (!evaluate(0, 0, 0.0)) {
        result.status = RunStatus::diverged;
        result.message = "non-finite initial loss";
        return;
    }
    for (std::size_t t = 1; t <= cfg.steps; ++t) {
        const std::vector<std::size_t> idx = sample_batch(task, batch_rng);
        clock.begin();
        {
            instrument::Scope scope;
            linear_task_forward_backward(task, layer, idx);
            stepper.step(layer);
            flops += scope.delta().flops;
        }
        clock.end();
        if (shadow) {
            const DenseGrad g = linear_task_dense_grad(task, shadow->dense_weight, idx);
            svdlora_step(*shadow, g.grad, spec.eta, cfg.alpha, cfg.rank);
        }
        result.state_scalars = stepper.state_scalars();
        if (!evaluate(t, flops, clock.total_ms)) {
            result.status = RunStatus::diverged;
            result.message = fmt::format("non-finite loss at step {}", t);
            return;
        }
    }
}

void run_mlp(const ExperimentConfig& cfg, const RunSpec& spec, RunResult& result) {
    const TaskConfig& tc = cfg.task;
    std::mt19937_64 task_rng(stream_seed(tc.task_seed, kTaskStream));
    const MlpTask task = make_mlp_task(tc.dims, tc.nonlinearity, tc.loss, tc.samples, task_rng);

    std::mt19937_64 init_rng(stream_seed(tc.fixed_init ? tc.task_seed : spec.seed, kInitStream));
    MlpModel model = make_mlp_model(task, cfg.rank, init_rng);
    std::mt19937_64 batch_rng(stream_seed(spec.seed, kBatchStream));

    std::vector<LayerStepper> steppers;
    steppers.reserve(model.layers.size());
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        steppers.emplace_back(cfg, spec, model.layers[l], stream_seed(spec.seed, kOptimStream + 16 * l));
        result.adapter_parameters += model.layers[l].adapter().parameter_count();
    }
    std::vector<std::size_t> all(task.samples);
    for (std::size_t i = 0; i < all.size(); ++i) {
        all[i] = i;
    }

    auto evaluate = [&](std::size_t t, std::uint64_t flops, double wall_ms) {
        RunRecord rec{t, mlp_loss(task, model, all), kNan, flops, wall_ms};
        result.records.push_back(rec);
        return std::isfinite(rec.loss);
    };

    Clock clock{cfg.record_wall_time, 0.0, {}};
    std::uint64_t flops = 0;
    if (!evaluate(0, 0, 0.0)) {
        result.status = RunStatus::diverged;
        result.message = "non-finite initial loss";
        return;
    }
    for (std::size_t t = 1; t <= cfg.steps; ++t) {
        const std::vector<std::size_t> batch = sample_rows(task.samples, tc.batch_size, batch_rng);
        clock.begin();
        {
            instrument::Scope scope;
            mlp_forward_backward(task, model, batch);
            for (std::size_t l = 0; l < model.layers.size(); ++l) {
                steppers[l].step(model.layers[l]);
            }
            flops += scope.delta().flops;
        }
        clock.end();
        result.state_scalars = 0;
        for (const auto& s : steppers) {
            result.state_scalars += s.state_scalars();
        }
        if (!evaluate(t, flops, clock.total_ms)) {
            result.status = RunStatus::diverged;
            result.message = fmt::format("non-finite loss at step {}", t);
            return;
        }
    }
}

double percentile(const std::vector<double>& sorted, double q) {
    if (sorted.size() == 1) {
        return sorted.front();
    }
    const double pos = q * double(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - double(lo);
    if (frac == 0.0 || sorted[lo] == sorted[hi]) {
        return sorted[lo];
    }
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw Error(fmt::format("cannot write {}", path.string()));
    }
    out << text;
}

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) {
        return s;
    }
    std::string out = "\"";
    for (char c : s) {
        out += c == '"' ? std::string("\"\"") : std::string(1, c == '\n' ? ' ' : c);
    }
    return out + "\"";
}

std::string aggregate_file_name(Method m, const std::string& variant, double eta) {
    return fmt::format("{}_{}_eta{}.csv", to_string(m), variant, eta);
}

void log_line(const RunOptions& opts, const std::string& line) {
    if (!opts.quiet && opts.log != nullptr) {
        *opts.log << line << '\n';
    }
}

} // namespace

std::string format_double(double x) {
    if (std::isnan(x)) {
        return "nan";
    }
    if (std::isinf(x)) {
        return x > 0 ? "inf" : "-inf";
    }
    return fmt::format("{:.17g}", x);
}

std::string_view to_string(RunStatus s) noexcept {
    switch (s) {
    case RunStatus::ok:
        return "ok";
    case RunStatus::failed:
        return "failed";
    case RunStatus::diverged:
        return "diverged";
    }
    return "?";
}

std::string RunSpec::variant() const { return fmt::format("k{}_mr{}", num_iters, momentum_rank); }

std::string RunSpec::file_name() const {
    return fmt::format("{}_{}_eta{}_seed{}.csv", to_string(method), variant(), eta, seed);
}

std::vector<RunSpec> expand_runs(const ExperimentConfig& cfg) {
    std::vector<RunSpec> out;
    for (int k : cfg.num_iters) {
        for (std::size_t mr : cfg.momentum_rank) {
            for (double eta : cfg.eta) {
                for (std::uint64_t seed : cfg.seeds) {
                    out.push_back(RunSpec{cfg.method, k, mr, eta, seed});
                }
            }
        }
    }
    return out;
}

RunResult run_single(const ExperimentConfig& cfg, const RunSpec& spec) {
    RunResult result;
    result.spec = spec;
    try {
        if (cfg.task.kind == TaskKind::linear) {
            run_linear(cfg, spec, result);
        } else {
            run_mlp(cfg, spec, result);
        }
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        result.status = RunStatus::failed;
        result.message = e.what();
    }
    return result;
}

void write_run_csv(std::ostream& os, const std::vector<RunRecord>& records) {
    os << kRunCsvHeader << '\n';
    for (const RunRecord& r : records) {
        os << r.step << ',' << format_double(r.loss) << ',' << format_double(r.oracle_gap) << ',' << r.flops << ','
           << format_double(r.wall_ms) << '\n';
    }
}

std::vector<RunRecord> read_run_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ReportError(fmt::format("cannot open {}", path.string()));
    }
    std::string line;
    std::getline(in, line);
    if (line != kRunCsvHeader) {
        throw ReportError(fmt::format("{}: unexpected header '{}'", path.string(), line));
    }
    std::vector<RunRecord> out;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            cells.push_back(cell);
        }
        if (cells.size() != 5) {
            throw ReportError(fmt::format("{}: malformed row '{}'", path.string(), line));
        }
        try {
            RunRecord r;
            r.step = std::stoull(cells[0]);
            r.loss = std::stod(cells[1]);
            r.oracle_gap = std::stod(cells[2]);
            r.flops = std::stoull(cells[3]);
            r.wall_ms = std::stod(cells[4]);
            if (!out.empty() && r.step <= out.back().step) {
                throw ReportError(fmt::format("{}: step indices not increasing", path.string()));
            }
            out.push_back(r);
        } catch (const std::logic_error&) {
            throw ReportError(fmt::format("{}: malformed row '{}'", path.string(), line));
        }
    }
    return out;
}

double median(std::vector<double> values) {
    if (values.empty()) {
        return kNan;
    }
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    if (n % 2 == 1) {
        return values[n / 2];
    }
    const double a = values[n / 2 - 1];
    const double b = values[n / 2];
    return a == b ? a : 0.5 * (a + b);
}

MedianCi bootstrap_median_ci(const std::vector<double>& values, std::size_t resamples, std::uint64_t seed) {
    MedianCi ci;
    ci.median = median(values);
    if (values.size() <= 1 || std::isnan(ci.median)) {
        ci.low = ci.high = ci.median;
        return ci;
    }
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, values.size() - 1);
    std::vector<double> medians(resamples);
    std::vector<double> sample(values.size());
    for (std::size_t b = 0; b < resamples; ++b) {
        for (double& s : sample) {
            s = values[pick(rng)];
        }
        medians[b] = median(sample);
    }
    std::sort(medians.begin(), medians.end());
    ci.low = percentile(medians, 0.025);
    ci.high = percentile(medians, 0.975);
    return ci;
}

std::vector<AggregateRow> aggregate(const std::vector<const RunResult*>& runs, std::size_t steps,
                                    std::size_t resamples, std::uint64_t seed) {
    std::vector<const RunResult*> usable;
    for (const RunResult* r : runs) {
        if (r->status != RunStatus::failed && !r->records.empty()) {
            usable.push_back(r);
        }
    }
    std::vector<AggregateRow> rows;
    if (usable.empty()) {
        return rows;
    }
    for (std::size_t t = 0; t <= steps; ++t) {
        std::vector<double> loss;
        std::vector<double> gap;
        for (const RunResult* r : usable) {
            // A diverged run stays at +inf after its last recorded step.
            if (t < r->records.size()) {
                loss.push_back(std::isfinite(r->records[t].loss) ? r->records[t].loss : kInf);
                gap.push_back(r->records[t].oracle_gap);
            } else {
                loss.push_back(kInf);
                gap.push_back(kNan);
            }
        }
        const std::uint64_t step_seed = stream_seed(seed, t);
        const MedianCi l = bootstrap_median_ci(loss, resamples, step_seed);
        std::vector<double> finite_gap;
        for (double g : gap) {
            if (!std::isnan(g)) {
                finite_gap.push_back(g);
            }
        }
        const MedianCi g = bootstrap_median_ci(finite_gap, resamples, step_seed ^ 0x5bd1e995ULL);
        rows.push_back(AggregateRow{t, usable.size(), l.median, l.low, l.high, g.median, g.low, g.high});
    }
    return rows;
}

bool ExperimentSummary::all_ok() const noexcept {
    return std::all_of(runs.begin(), runs.end(), [](const RunResult& r) { return r.status == RunStatus::ok; });
}

ExperimentSummary run_experiment(ExperimentConfig cfg, const RunOptions& opts) {
    if (opts.seed_override) {
        cfg.seeds = {*opts.seed_override};
    }
    if (opts.out_dir) {
        cfg.output_dir = opts.out_dir->string();
    }
    validate(cfg);

    ExperimentSummary summary;
    summary.config = cfg;
    summary.output_dir = cfg.output_dir;
    const auto runs_dir = summary.output_dir / "runs";
    const auto agg_dir = summary.output_dir / "aggregate";
    std::filesystem::create_directories(runs_dir);
    std::filesystem::create_directories(agg_dir);
    write_text(summary.output_dir / "config.json", to_json(cfg));

    std::ostringstream manifest;
    manifest << kManifestHeader << '\n';
    for (const RunSpec& spec : expand_runs(cfg)) {
        RunResult result = run_single(cfg, spec);
        std::ostringstream csv;
        write_run_csv(csv, result.records);
        write_text(runs_dir / spec.file_name(), csv.str());
        manifest << to_string(spec.method) << ',' << spec.variant() << ',' << fmt::format("{}", spec.eta) << ','
                 << spec.seed << ',' << to_string(result.status) << ',' << csv_escape(result.message) << ",runs/"
                 << spec.file_name() << '\n';
        log_line(opts, fmt::format("{} {} eta={} seed={}: {}{}{}", to_string(spec.method), spec.variant(), spec.eta,
                                   spec.seed, to_string(result.status), result.message.empty() ? "" : " - ",
                                   result.message));
        summary.runs.push_back(std::move(result));
    }
    write_text(summary.output_dir / "manifest.csv", manifest.str());

    // One aggregate per (variant, eta).
    std::map<std::pair<std::string, double>, std::vector<const RunResult*>> groups;
    for (const RunResult& r : summary.runs) {
        groups[{r.spec.variant(), r.spec.eta}].push_back(&r);
    }
    for (const auto& [key, members] : groups) {
        const auto rows = aggregate(members, cfg.steps, cfg.bootstrap_resamples, cfg.bootstrap_seed);
        std::ostringstream out;
        out << kAggregateHeader << '\n';
        for (const AggregateRow& a : rows) {
            out << a.step << ',' << a.n << ',' << format_double(a.loss_median) << ',' << format_double(a.loss_ci_low)
                << ',' << format_double(a.loss_ci_high) << ',' << format_double(a.gap_median) << ','
                << format_double(a.gap_ci_low) << ',' << format_double(a.gap_ci_high) << '\n';
        }
        write_text(agg_dir / aggregate_file_name(cfg.method, key.first, key.second), out.str());
    }
    return summary;
}

double sweep_score(const std::vector<AggregateRow>& rows) {
    if (rows.size() < 2) {
        return kInf;
    }
    // Rows after step 0; the last ceil(10%) of them.
    const std::size_t steps = rows.size() - 1;
    const std::size_t tail = std::max<std::size_t>(1, (steps + 9) / 10);
    double sum = 0.0;
    for (std::size_t i = rows.size() - tail; i < rows.size(); ++i) {
        sum += rows[i].loss_median;
    }
    const double score = sum / double(tail);
    return std::isfinite(score) ? score : kInf;
}

SweepResult lr_sweep(ExperimentConfig cfg, const RunOptions& opts) {
    validate(cfg, /*sweep=*/true);
    SweepResult result;
    result.experiment = run_experiment(std::move(cfg), opts);
    const ExperimentConfig& c = result.experiment.config;

    const bool any_ok = std::any_of(result.experiment.runs.begin(), result.experiment.runs.end(),
                                    [](const RunResult& r) { return r.status != RunStatus::failed; });
    if (!any_ok) {
        throw SweepError("lr_sweep: every run failed");
    }

    std::map<std::pair<std::string, double>, std::vector<const RunResult*>> groups;
    for (const RunResult& r : result.experiment.runs) {
        groups[{r.spec.variant(), r.spec.eta}].push_back(&r);
    }
    for (const auto& [key, members] : groups) {
        const auto rows = aggregate(members, c.steps, 1, c.bootstrap_seed);
        result.entries.push_back(SweepEntry{c.method, key.first, key.second, sweep_score(rows), false});
    }
    std::stable_sort(result.entries.begin(), result.entries.end(), [](const SweepEntry& a, const SweepEntry& b) {
        if (a.score != b.score) {
            return a.score < b.score;
        }
        return a.eta < b.eta;
    });
    // Best eta per variant.
    std::map<std::string, bool> chosen;
    for (SweepEntry& e : result.entries) {
        if (!chosen[e.variant] && std::isfinite(e.score)) {
            e.selected = true;
            chosen[e.variant] = true;
        }
    }

    std::ostringstream out;
    out << "method,variant,eta,score,selected\n";
    for (const SweepEntry& e : result.entries) {
        out << to_string(e.method) << ',' << e.variant << ',' << fmt::format("{}", e.eta) << ','
            << format_double(e.score) << ',' << (e.selected ? 1 : 0) << '\n';
    }
    write_text(result.experiment.output_dir / "sweep_summary.csv", out.str());
    for (const SweepEntry& e : result.entries) {
        if (e.selected) {
            log_line(opts, fmt::format("best eta for {} {}: {} (score {})", to_string(e.method), e.variant, e.eta,
                                       format_double(e.score)));
        }
    }
    return result;
}

} // namespace oplora::bench
