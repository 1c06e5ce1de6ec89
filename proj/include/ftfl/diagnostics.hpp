#pragma once

// Evaluation statistics (IQM, bootstrap intervals, baseline-relative
// percentages) and online probes of the critic.

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ftfl/error.hpp"
#include "ftfl/sac.hpp"

namespace ftfl {

/// Interquartile mean: sort, drop floor(n/4) values from each end, average
/// the rest.
inline double iqm(std::vector<double> values) {
    if (values.empty()) throw ConfigError("iqm: empty list");
    std::sort(values.begin(), values.end());
    const std::size_t trim = values.size() / 4;
    double sum = 0.0;
    for (std::size_t i = trim; i < values.size() - trim; ++i) sum += values[i];
    return sum / static_cast<double>(values.size() - 2 * trim);
}

struct Interval {
    double low = 0.0;
    double high = 0.0;
};

/// Percentile bootstrap interval of the IQM from `resamples` draws with
/// replacement.
inline Interval bootstrap_ci(const std::vector<double>& values, Rng& rng, std::size_t resamples = 2000,
                             double level = 0.95) {
    if (values.size() < 2) throw ConfigError("bootstrap_ci: need at least 2 values");
    if (resamples == 0) throw ConfigError("bootstrap_ci: resamples must be >= 1");
    if (!(level > 0.0 && level < 1.0)) throw ConfigError("bootstrap_ci: level must be in (0, 1)");
    std::uniform_int_distribution<std::size_t> pick(0, values.size() - 1);
    std::vector<double> stats(resamples), draw(values.size());
    for (auto& s : stats) {
        for (auto& d : draw) d = values[pick(rng)];
        s = iqm(draw);
    }
    std::sort(stats.begin(), stats.end());
    // Outer order statistics around each percentile, so both ends are
    // actual resample values.
    const double last = static_cast<double>(stats.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor((1.0 - level) / 2.0 * last));
    const auto hi = static_cast<std::size_t>(std::ceil((1.0 + level) / 2.0 * last));
    return Interval{stats[lo], stats[hi]};
}

inline double percent_of_baseline(double x, double baseline) {
    if (!(std::abs(baseline) >= 1e-9)) throw ConfigError("percent_of_baseline: baseline is zero");
    return 100.0 * x / baseline;
}

/// Mean over states of min(Q1, Q2)(s, a) with a drawn from the actor.
inline double critic_probe(const SacAgent& agent, const Mat& states, Rng& rng) {
    if (states.cols() == 0) throw StateError("critic_probe: no states");
    const ActorSample a = actor_sample_batch(agent, states, rng, false);
    return critic_values(agent.q1, states, a.actions).cwiseMin(critic_values(agent.q2, states, a.actions)).mean();
}

struct MetricsRow {
    std::size_t step = 0;
    double eval_return = 0.0;
    double q_mean = 0.0;
    double reward_bias = 0.0;
    double variance_diag = 0.0;
    double alpha = 0.0;
    double critic_loss = 0.0;
};

struct RunRecord {
    std::string algo;
    std::string env;
    std::uint64_t seed = 0;
    std::vector<MetricsRow> rows;

    std::vector<double> eval_returns() const {
        std::vector<double> out;
        for (const auto& r : rows) out.push_back(r.eval_return);
        return out;
    }
};

/// IQM of the last `window` evaluation returns.
inline double final_performance(const RunRecord& record, std::size_t window = 10) {
    if (window == 0) throw ConfigError("final_performance: window must be >= 1");
    if (record.rows.size() < window)
        throw StateError("final_performance: run has " + std::to_string(record.rows.size()) + " evaluations, need " +
                         std::to_string(window));
    std::vector<double> tail;
    for (std::size_t i = record.rows.size() - window; i < record.rows.size(); ++i)
        tail.push_back(record.rows[i].eval_return);
    return iqm(tail);
}

/// Least-squares slope of y against x.
inline double linear_slope(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw ConfigError("linear_slope: need >= 2 paired points");
    const double n = static_cast<double>(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
    }
    if (sxx == 0.0) throw ConfigError("linear_slope: x values are all equal");
    return sxy / sxx;
}

}  // namespace ftfl
