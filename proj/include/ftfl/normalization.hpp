#pragma once

// Per-dimension unit normalization. Statistics are recomputed from the full
// dataset each time they are fitted; there is no streaming update.

#include <cmath>
#include <cstddef>
#include <string>

#include "ftfl/error.hpp"
#include "ftfl/nn.hpp"

namespace ftfl {

struct RunningStats {
    static constexpr double kDefaultEpsFloor = 1e-8;

    Vec mean;
    Vec std;
    std::size_t count = 0;
    double eps_floor = kDefaultEpsFloor;

    std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }

    /// Identity transform of the given width (mean 0, std 1).
    static RunningStats identity(std::size_t d) {
        RunningStats s;
        s.mean = Vec::Zero(static_cast<Eigen::Index>(d));
        s.std = Vec::Ones(static_cast<Eigen::Index>(d));
        s.count = 1;
        return s;
    }
};

/// Column statistics of a (d x n) matrix whose columns are samples: mean and
/// population standard deviation, floored at eps_floor.
inline RunningStats fit_stats(const Mat& samples, double eps_floor = RunningStats::kDefaultEpsFloor) {
    if (samples.cols() == 0) throw StateError("fit_stats: no rows to fit");
    if (!(eps_floor > 0.0)) throw ConfigError("fit_stats: eps_floor must be positive");
    const double n = static_cast<double>(samples.cols());
    RunningStats s;
    s.eps_floor = eps_floor;
    s.count = static_cast<std::size_t>(samples.cols());
    s.mean = samples.rowwise().sum() / n;
    const Mat centered = samples.colwise() - s.mean;
    s.std = (centered.array().square().rowwise().sum() / n).sqrt().max(eps_floor).matrix();
    return s;
}

inline void check_dim(const RunningStats& stats, Eigen::Index rows, const char* what) {
    if (static_cast<std::size_t>(rows) != stats.dim())
        throw DimensionError(std::string(what) + ": length " + std::to_string(rows) + " vs stats " +
                             std::to_string(stats.dim()));
}

inline Vec normalize(const Vec& x, const RunningStats& stats) {
    check_dim(stats, x.size(), "normalize");
    return ((x - stats.mean).array() / stats.std.array()).matrix();
}

inline Vec denormalize(const Vec& z, const RunningStats& stats) {
    check_dim(stats, z.size(), "denormalize");
    return (z.array() * stats.std.array()).matrix() + stats.mean;
}

/// Column-batch versions.
inline Mat normalize(const Mat& x, const RunningStats& stats) {
    check_dim(stats, x.rows(), "normalize");
    return ((x.colwise() - stats.mean).array().colwise() / stats.std.array()).matrix();
}

inline Mat denormalize(const Mat& z, const RunningStats& stats) {
    check_dim(stats, z.rows(), "denormalize");
    return (z.array().colwise() * stats.std.array()).matrix().colwise() + stats.mean;
}

}  // namespace ftfl
