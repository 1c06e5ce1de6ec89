#pragma once

// Command-level drivers behind ftfl-lab: run, ablate, probe, aggregate,
// dump-buffer. Each run owns its CSV and config snapshot, so seeds and
// cells run concurrently without sharing anything writable.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <fmt/format.h>

#include "ftfl/config.hpp"
#include "ftfl/diagnostics.hpp"
#include "ftfl/dyna.hpp"
#include "ftfl/error.hpp"
#include "ftfl/replay.hpp"

namespace ftfl {

namespace fs = std::filesystem;

inline constexpr const char* kMetricsHeader = "step,eval_return,q_mean,reward_bias,variance_diag,alpha,critic_loss";
inline constexpr const char* kProbeHeader = "reveal_k,reward_bias,variance_diag,holdout_mse,reward_rmse";
inline constexpr const char* kAggregateHeader = "algo,env,iqm,ci_low,ci_high,pct_of_sac";

/// Shortest text that parses back to the same double; "nan" for NaN.
inline std::string csv_number(double v) {
    if (std::isnan(v)) return "nan";
    return fmt::format("{}", v);
}

inline double parse_csv_number(const std::string& s) {
    if (s == "nan" || s == "-nan") return std::numeric_limits<double>::quiet_NaN();
    std::size_t pos = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &pos);
    } catch (const std::exception&) {
        throw IoError("csv: bad number '" + s + "'");
    }
    if (pos != s.size()) throw IoError("csv: bad number '" + s + "'");
    return v;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline std::string metrics_line(const MetricsRow& r) {
    return fmt::format("{},{},{},{},{},{},{}", r.step, csv_number(r.eval_return), csv_number(r.q_mean),
                       csv_number(r.reward_bias), csv_number(r.variance_diag), csv_number(r.alpha),
                       csv_number(r.critic_loss));
}

inline std::string probe_line(const ProbeRow& r) {
    return fmt::format("{},{},{},{},{}", r.reveal_k, csv_number(r.reward_bias), csv_number(r.variance_diag),
                       csv_number(r.holdout_mse), csv_number(r.reward_rmse));
}

inline std::string metrics_file_name(const std::string& algo, const std::string& env, std::uint64_t seed) {
    return algo + "_" + env + "_s" + std::to_string(seed) + ".csv";
}

/// Inverse of metrics_file_name. Algo labels never contain '_'; env names may.
struct RunKey {
    std::string algo;
    std::string env;
    std::uint64_t seed = 0;
};

inline bool parse_metrics_file_name(const std::string& name, RunKey& key) {
    if (name.size() < 4 || name.substr(name.size() - 4) != ".csv") return false;
    const std::string stem = name.substr(0, name.size() - 4);
    const auto first = stem.find('_');
    const auto last = stem.rfind("_s");
    if (first == std::string::npos || last == std::string::npos || last <= first) return false;
    const std::string seed = stem.substr(last + 2);
    if (seed.empty() || seed.find_first_not_of("0123456789") != std::string::npos) return false;
    key.algo = stem.substr(0, first);
    key.env = stem.substr(first + 1, last - first - 1);
    key.seed = std::stoull(seed);
    const auto& envs = env_names();
    return key.algo != "probe" && std::find(envs.begin(), envs.end(), key.env) != envs.end();
}

inline RunRecord read_metrics_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != kMetricsHeader) throw IoError(path.string() + ": not a metrics CSV");
    RunRecord rec;
    RunKey key;
    if (parse_metrics_file_name(path.filename().string(), key)) {
        rec.algo = key.algo;
        rec.env = key.env;
        rec.seed = key.seed;
    }
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        if (cells.size() != 7) throw IoError(path.string() + ": expected 7 columns in '" + line + "'");
        MetricsRow r;
        r.step = static_cast<std::size_t>(parse_csv_number(cells[0]));
        r.eval_return = parse_csv_number(cells[1]);
        r.q_mean = parse_csv_number(cells[2]);
        r.reward_bias = parse_csv_number(cells[3]);
        r.variance_diag = parse_csv_number(cells[4]);
        r.alpha = parse_csv_number(cells[5]);
        r.critic_loss = parse_csv_number(cells[6]);
        if (!rec.rows.empty() && r.step <= rec.rows.back().step)
            throw IoError(path.string() + ": steps are not strictly increasing");
        rec.rows.push_back(r);
    }
    return rec;
}

inline std::vector<ProbeRow> read_probe_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != kProbeHeader) throw IoError(path.string() + ": not a probe CSV");
    std::vector<ProbeRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto c = split_csv_line(line);
        if (c.size() != 5) throw IoError(path.string() + ": expected 5 columns");
        rows.push_back(ProbeRow{static_cast<std::size_t>(parse_csv_number(c[0])), parse_csv_number(c[1]),
                                parse_csv_number(c[4]), parse_csv_number(c[2]), parse_csv_number(c[3])});
    }
    return rows;
}

// ---------------------------------------------------------------------------

/// FTFL_THREADS if set to a positive integer, else the hardware count.
inline std::size_t thread_limit() {
    if (const char* env = std::getenv("FTFL_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
    }
    return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

/// Runs jobs[0..n) on up to `threads` workers. The first exception thrown by
/// any job is rethrown after all workers have joined.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& job) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex m;
    auto worker = [&] {
        for (std::size_t i; (i = next++) < n;) {
            try {
                job(i);
            } catch (...) {
                std::lock_guard lock(m);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    }
    if (failure) std::rethrow_exception(failure);
}

inline void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

inline void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("write failed for " + path.string());
}

struct RunOutcome {
    RunResult result;
    fs::path csv;
};

/// One run: config snapshot, then metrics rows streamed to the CSV as they
/// are produced so a non-finite abort leaves the partial file behind.
inline RunOutcome run_one(const ExperimentConfig& config, const fs::path& out_dir) {
    const std::string base = metrics_file_name(config.label(), config.env_name, config.seed);
    RunOutcome o;
    o.csv = out_dir / base;
    write_text(out_dir / (base.substr(0, base.size() - 4) + ".ini"), to_ini(config));
    std::ofstream csv(o.csv, std::ios::binary | std::ios::trunc);
    if (!csv) throw IoError("cannot write " + o.csv.string());
    csv << kMetricsHeader << '\n';
    o.result = run_training(config, [&](const MetricsRow& r) { csv << metrics_line(r) << '\n' << std::flush; });
    if (!csv) throw IoError("write failed for " + o.csv.string());
    return o;
}

inline std::vector<RunOutcome> run_many(const std::vector<ExperimentConfig>& configs, const fs::path& out_dir) {
    ensure_dir(out_dir);
    std::vector<RunOutcome> outcomes(configs.size());
    parallel_for(configs.size(), thread_limit(), [&](std::size_t i) { outcomes[i] = run_one(configs[i], out_dir); });
    return outcomes;
}

inline ExitCode outcome_code(const std::vector<RunOutcome>& outcomes, std::ostream& log) {
    ExitCode code = ExitCode::ok;
    for (const auto& o : outcomes) {
        if (o.result.aborted) {
            log << "run aborted (" << o.csv.filename().string() << "): " << o.result.abort_reason << '\n';
            code = ExitCode::runtime_abort;
        }
    }
    return code;
}

inline ExperimentConfig with_seed(ExperimentConfig c, std::uint64_t seed) {
    c.seed = seed;
    return c;
}

// ---------------------------------------------------------------------------

struct AggregateRow {
    std::string algo;
    std::string env;
    double iqm = 0.0;
    Interval ci;
    double pct_of_sac = std::numeric_limits<double>::quiet_NaN();
    std::size_t n_runs = 0;
};

/// Groups records by (algo, env); per group the IQM over seeds of each
/// run's final-window performance, a bootstrap CI, and the percentage of
/// the SAC group on the same env when there is one. Groups with one run get
/// a degenerate interval at the point value.
inline std::vector<AggregateRow> aggregate_records(const std::vector<RunRecord>& records, std::size_t window,
                                                   std::uint64_t seed = 0) {
    std::map<std::pair<std::string, std::string>, std::vector<double>> groups;
    for (const auto& r : records) groups[{r.algo, r.env}].push_back(final_performance(r, window));
    std::vector<AggregateRow> rows;
    Rng rng(seed);
    for (const auto& [key, perf] : groups) {
        AggregateRow row;
        row.algo = key.first;
        row.env = key.second;
        row.iqm = iqm(perf);
        row.n_runs = perf.size();
        row.ci = perf.size() >= 2 ? bootstrap_ci(perf, rng) : Interval{row.iqm, row.iqm};
        rows.push_back(row);
    }
    for (auto& row : rows) {
        for (const auto& base : rows) {
            if (base.algo == "sac" && base.env == row.env && std::abs(base.iqm) >= 1e-9)
                row.pct_of_sac = percent_of_baseline(row.iqm, base.iqm);
        }
    }
    return rows;
}

inline std::string aggregate_csv(const std::vector<AggregateRow>& rows) {
    std::string s = std::string(kAggregateHeader) + "\n";
    for (const auto& r : rows)
        s += fmt::format("{},{},{},{},{},{}\n", r.algo, r.env, csv_number(r.iqm), csv_number(r.ci.low),
                         csv_number(r.ci.high), csv_number(r.pct_of_sac));
    return s;
}

/// Every metrics CSV directly inside `dir`, sorted by name.
inline std::vector<RunRecord> load_metrics_dir(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        RunKey key;
        if (e.is_regular_file() && parse_metrics_file_name(e.path().filename().string(), key)) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::vector<RunRecord> records;
    for (const auto& f : files) records.push_back(read_metrics_csv(f));
    return records;
}

// ---------------------------------------------------------------------------
// Commands. Each returns the process exit code; configuration, I/O and
// non-finite failures surface as exceptions mapped by exit_code_for().

inline ExitCode cmd_run(const ExperimentConfig& base, const std::vector<std::uint64_t>& seeds, const fs::path& out,
                        std::ostream& log) {
    if (seeds.empty()) throw ConfigError("run: --seeds must not be empty");
    std::vector<ExperimentConfig> configs;
    for (auto s : seeds) configs.push_back(with_seed(base, s));
    return outcome_code(run_many(configs, out), log);
}

/// The four (target mode, norm) cells per seed, then an aggregate summary
/// of the grid in ablation_summary.csv.
inline ExitCode cmd_ablate(const ExperimentConfig& base, const std::vector<std::uint64_t>& seeds, const fs::path& out,
                           std::ostream& log) {
    if (seeds.empty()) throw ConfigError("ablate: --seeds must not be empty");
    std::vector<ExperimentConfig> configs;
    for (auto mode : {TargetMode::residual, TargetMode::direct}) {
        for (bool norm : {false, true}) {
            for (auto s : seeds) {
                ExperimentConfig c = with_seed(base, s);
                c.algo = Algo::ablation;
                c.ensemble.target_mode = mode;
                c.ensemble.target_norm = norm;
                c.validate();
                configs.push_back(c);
            }
        }
    }
    const auto outcomes = run_many(configs, out);
    const ExitCode code = outcome_code(outcomes, log);
    std::vector<RunRecord> records;
    for (const auto& o : outcomes)
        if (o.result.record.rows.size() >= base.final_window) records.push_back(o.result.record);
    if (!records.empty()) write_text(out / "ablation_summary.csv", aggregate_csv(aggregate_records(records, base.final_window)));
    return code;
}

inline std::string probe_file_name(const ExperimentConfig& c) {
    return "probe_" + cell_label(c.ensemble.target_mode, c.ensemble.target_norm) + "_" + c.env_name + "_s" +
           std::to_string(c.seed) + ".csv";
}

/// Pseudo-online probe of the dump at `buffer_path`, one probe CSV per seed.
/// The dump is only read.
inline ExitCode cmd_probe(const ExperimentConfig& base, const std::vector<std::uint64_t>& seeds,
                          const fs::path& buffer_path, const fs::path& out, std::ostream& log) {
    if (seeds.empty()) throw ConfigError("probe: --seeds must not be empty");
    const ReplayBuffer loaded = read_dump(buffer_path);
    const EnvSpec spec = make_env(base.env_name, base.env_params)->spec();
    if (spec.d_s != loaded.state_dim() || spec.d_a != loaded.action_dim())
        throw ConfigError("probe: dump dims (" + std::to_string(loaded.state_dim()) + ", " +
                          std::to_string(loaded.action_dim()) + ") do not match env " + base.env_name);
    ensure_dir(out);
    parallel_for(seeds.size(), thread_limit(), [&](std::size_t i) {
        const ExperimentConfig c = with_seed(base, seeds[i]);
        ReplayBuffer buffer = loaded;
        const fs::path path = out / probe_file_name(c);
        write_text(out / (path.stem().string() + ".ini"), to_ini(c));
        std::ofstream csv(path, std::ios::binary | std::ios::trunc);
        if (!csv) throw IoError("cannot write " + path.string());
        csv << kProbeHeader << '\n';
        run_pseudo_online(c, buffer, c.reveal_step, [&](const ProbeRow& r) { csv << probe_line(r) << '\n'; });
        if (!csv) throw IoError("write failed for " + path.string());
    });
    log << "probe: " << seeds.size() << " seed(s) on " << loaded.size() << " transitions\n";
    return ExitCode::ok;
}

inline ExitCode cmd_aggregate(const fs::path& in_dir, const fs::path& out, std::size_t window, std::ostream& log) {
    const auto records = load_metrics_dir(in_dir);
    if (records.empty()) throw IoError("aggregate: no metrics CSVs in " + in_dir.string());
    ensure_dir(out);
    const auto rows = aggregate_records(records, window);
    write_text(out / "aggregate.csv", aggregate_csv(rows));
    log << "aggregate: " << records.size() << " run(s), " << rows.size() << " group(s)\n";
    return ExitCode::ok;
}

inline std::string dump_file_name(const std::string& env) { return "buffer_" + env + ".bin"; }

/// Trains one SAC agent per seed, keeps the buffer of the run with the
/// highest final-window IQM and writes it in the dump format.
inline ExitCode cmd_dump_buffer(const ExperimentConfig& base, const std::vector<std::uint64_t>& seeds,
                                const fs::path& out, std::ostream& log) {
    if (seeds.empty()) throw ConfigError("dump-buffer: --seeds must not be empty");
    std::vector<ExperimentConfig> configs;
    for (auto s : seeds) {
        ExperimentConfig c = with_seed(base, s);
        c.algo = Algo::sac;
        configs.push_back(c);
    }
    const auto outcomes = run_many(configs, out);
    if (outcome_code(outcomes, log) != ExitCode::ok) return ExitCode::runtime_abort;
    std::size_t best = 0;
    double best_perf = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
        const double p = final_performance(outcomes[i].result.record, base.final_window);
        if (p > best_perf) {
            best_perf = p;
            best = i;
        }
    }
    const fs::path path = out / dump_file_name(base.env_name);
    write_dump(*outcomes[best].result.real_buffer, path);
    log << "dump-buffer: seed " << configs[best].seed << " selected (final IQM " << csv_number(best_perf) << "), "
        << outcomes[best].result.real_buffer->size() << " transitions -> " << path.string() << '\n';
    return ExitCode::ok;
}

inline ExitCode exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const DimensionError*>(&e)) return ExitCode::config_error;
    if (dynamic_cast<const IoError*>(&e)) return ExitCode::io_error;
    return ExitCode::runtime_abort;
}

}  // namespace ftfl
