#include <random>

#include <gtest/gtest.h>

#include "ftfl/normalization.hpp"

using namespace ftfl;

TEST(FitStats, ConstantColumnFloorsStd) {
    const Mat m = Mat::Constant(1, 6, 5.0);
    const RunningStats s = fit_stats(m);
    EXPECT_DOUBLE_EQ(s.mean[0], 5.0);
    EXPECT_DOUBLE_EQ(s.std[0], RunningStats::kDefaultEpsFloor);
    EXPECT_TRUE(normalize(Vec{{5.0}}, s).isZero());
    EXPECT_TRUE(normalize(m, s).isZero());
}

TEST(FitStats, PopulationStd) {
    const RunningStats s = fit_stats(Mat{{1.0, 3.0}});
    EXPECT_DOUBLE_EQ(s.mean[0], 2.0);
    EXPECT_DOUBLE_EQ(s.std[0], 1.0);
    EXPECT_EQ(s.count, 2u);
}

TEST(FitStats, Errors) {
    EXPECT_THROW(fit_stats(Mat(2, 0)), StateError);
    EXPECT_THROW(fit_stats(Mat::Ones(1, 2), 0.0), ConfigError);
}

TEST(Normalize, MeanAndOneStd) {
    const RunningStats s = fit_stats(Mat{{1.0, 3.0, 8.0}, {-2.0, 4.0, 0.5}});
    EXPECT_LE(normalize(s.mean, s).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LE((normalize(Vec(s.mean + s.std), s) - Vec::Ones(2)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ(denormalize(Vec(Vec::Zero(2)), s), s.mean);
    EXPECT_LE((denormalize(Vec(Vec::Ones(2)), s) - (s.mean + s.std)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Normalize, DimensionMismatch) {
    const RunningStats s = RunningStats::identity(2);
    EXPECT_THROW(normalize(Vec(Vec::Zero(3)), s), DimensionError);
    EXPECT_THROW(denormalize(Mat(Mat::Zero(1, 4)), s), DimensionError);
}

TEST(Normalize, RoundtripAndFittedMoments) {
    Rng rng(4);
    std::normal_distribution<double> n(0.0, 1.0);
    Mat data(4, 500);
    const Vec scale{{1e-3, 1.0, 100.0, 1e4}}, shift{{5.0, -3.0, 0.0, 2e5}};
    for (Eigen::Index j = 0; j < data.cols(); ++j)
        for (Eigen::Index i = 0; i < 4; ++i) data(i, j) = shift[i] + scale[i] * n(rng);
    const RunningStats s = fit_stats(data);
    for (int k = 0; k < 1000; ++k) {
        Vec x(4);
        for (Eigen::Index i = 0; i < 4; ++i) x[i] = shift[i] + 3.0 * scale[i] * n(rng);
        const Vec back = denormalize(normalize(x, s), s);
        for (Eigen::Index i = 0; i < 4; ++i) EXPECT_LE(std::abs(back[i] - x[i]), 1e-6 * std::abs(x[i]) + 1e-300);
    }
    const Mat z = normalize(data, s);
    const Vec mean = z.rowwise().mean();
    const Vec sd = ((z.colwise() - mean).array().square().rowwise().mean()).sqrt();
    EXPECT_LE(mean.cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LE((sd.array() - 1.0).abs().maxCoeff(), 1e-6);
}
