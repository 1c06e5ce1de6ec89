#include <algorithm>
#include <random>

#include <gtest/gtest.h>

#include "ftfl/diagnostics.hpp"

using namespace ftfl;

namespace {

// Sort, cut floor(n/4) from each end, average what is left.
double brute_iqm(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t cut = v.size() / 4;
    std::vector<double> mid(v.begin() + static_cast<std::ptrdiff_t>(cut), v.end() - static_cast<std::ptrdiff_t>(cut));
    double s = 0.0;
    for (double x : mid) s += x;
    return s / static_cast<double>(mid.size());
}

RunRecord record_of(const std::vector<double>& returns) {
    RunRecord r;
    for (std::size_t i = 0; i < returns.size(); ++i) r.rows.push_back(MetricsRow{(i + 1) * 500, returns[i]});
    return r;
}

}  // namespace

TEST(Iqm, Examples) {
    EXPECT_EQ(iqm({4.0, 4.0, 4.0}), 4.0);
    EXPECT_EQ(iqm({1, 2, 3, 4}), 2.5);
    EXPECT_EQ(iqm({7.0}), 7.0);
    EXPECT_THROW(iqm({}), ConfigError);
}

TEST(Iqm, MatchesBruteForceOracle) {
    Rng rng(1);
    std::normal_distribution<double> n(0.0, 10.0);
    for (std::size_t len = 1; len <= 50; ++len) {
        std::vector<double> v(len);
        for (auto& x : v) x = n(rng);
        EXPECT_EQ(iqm(v), brute_iqm(v)) << len;
    }
}

TEST(Iqm, Properties) {
    Rng rng(2);
    std::uniform_real_distribution<double> u(-5.0, 5.0);
    for (int k = 0; k < 100; ++k) {
        std::vector<double> v(static_cast<std::size_t>(1 + k % 17));
        for (auto& x : v) x = u(rng);
        const double q = iqm(v);
        EXPECT_GE(q, *std::min_element(v.begin(), v.end()));
        EXPECT_LE(q, *std::max_element(v.begin(), v.end()));
        std::vector<double> shuffled = v, shifted = v;
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        EXPECT_NEAR(iqm(shuffled), q, 1e-12);
        for (auto& x : shifted) x += 3.25;
        EXPECT_NEAR(iqm(shifted), q + 3.25, 1e-12);
    }
}

TEST(Bootstrap, ConstantDataAndOrdering) {
    Rng rng(3);
    const Interval c = bootstrap_ci({2.0, 2.0, 2.0, 2.0}, rng);
    EXPECT_EQ(c.low, 2.0);
    EXPECT_EQ(c.high, 2.0);
    const std::vector<double> v{1, 5, 2, 8, 3, 9};
    const Interval i = bootstrap_ci(v, rng, 200);
    EXPECT_LE(i.low, i.high);
    EXPECT_GE(i.low, 1.0);
    EXPECT_LE(i.high, 9.0);
    EXPECT_THROW(bootstrap_ci({1.0}, rng), ConfigError);
}

TEST(Bootstrap, DeterministicGivenSeed) {
    const std::vector<double> v{1, 5, 2, 8, 3, 9, 4};
    Rng a(4), b(4);
    const Interval x = bootstrap_ci(v, a), y = bootstrap_ci(v, b);
    EXPECT_EQ(x.low, y.low);
    EXPECT_EQ(x.high, y.high);
}

TEST(Bootstrap, GaussianMeanCoverage) {
    Rng rng(5);
    std::normal_distribution<double> n(3.0, 1.0);
    int hits = 0;
    const int reps = 500;
    for (int r = 0; r < reps; ++r) {
        std::vector<double> v(30);
        for (auto& x : v) x = n(rng);
        const Interval i = bootstrap_ci(v, rng, 2000);
        hits += (i.low <= 3.0 && 3.0 <= i.high) ? 1 : 0;
    }
    const double coverage = static_cast<double>(hits) / reps;
    EXPECT_GE(coverage, 0.90);
    EXPECT_LE(coverage, 0.99);
}

TEST(Percent, ExamplesAndGuard) {
    EXPECT_DOUBLE_EQ(percent_of_baseline(3.5, 3.5), 100.0);
    EXPECT_DOUBLE_EQ(percent_of_baseline(7.0, 3.5), 200.0);
    EXPECT_DOUBLE_EQ(percent_of_baseline(-6.0, -3.0), 200.0);
    EXPECT_NEAR(percent_of_baseline(2.0 * 1.7, 2.0 * 4.1), percent_of_baseline(1.7, 4.1), 1e-12);
    EXPECT_THROW(percent_of_baseline(1.0, 0.0), ConfigError);
    EXPECT_THROW(percent_of_baseline(1.0, 1e-12), ConfigError);
}

TEST(FinalPerformance, WindowRules) {
    EXPECT_EQ(final_performance(record_of(std::vector<double>(12, 4.5))), 4.5);
    const std::vector<double> r{1, 9, 3, 7, 2, 8, 6, 5, 4, 10, 11, 0};
    EXPECT_EQ(final_performance(record_of(r), 1), 0.0);
    EXPECT_EQ(final_performance(record_of(r), 10), iqm(std::vector<double>(r.begin() + 2, r.end())));
    EXPECT_THROW(final_performance(record_of({1, 2}), 10), StateError);
    EXPECT_THROW(final_performance(record_of({1, 2}), 0), ConfigError);
}

TEST(Slope, LeastSquares) {
    EXPECT_NEAR(linear_slope({0, 1, 2, 3}, {1, 3, 5, 7}), 2.0, 1e-12);
    EXPECT_NEAR(linear_slope({1, 2, 3}, {5, 5, 5}), 0.0, 1e-12);
    EXPECT_THROW(linear_slope({1, 1}, {0, 1}), ConfigError);
    EXPECT_THROW(linear_slope({1}, {0}), ConfigError);
}

TEST(CriticProbe, FiniteAndDeterministic) {
    SacConfig cfg;
    cfg.hidden_dims = {8};
    Rng init(6);
    SacAgent agent(2, 1, cfg, init);
    const Mat zeros = Mat::Zero(2, 64);
    Rng a(7), b(7);
    const double x = critic_probe(agent, zeros, a), y = critic_probe(agent, zeros, b);
    EXPECT_TRUE(std::isfinite(x));
    EXPECT_EQ(x, y);
    EXPECT_THROW(critic_probe(agent, Mat(2, 0), a), StateError);
}
