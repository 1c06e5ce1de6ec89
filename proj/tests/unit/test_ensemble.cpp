#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "ftfl/ensemble.hpp"
#include "ftfl/envs.hpp"

using namespace ftfl;

namespace {

ReplayBuffer random_buffer(const std::string& env_name, std::size_t n, std::uint64_t seed, const EnvParams& p = {}) {
    auto env = make_env(env_name, p);
    ReplayBuffer b(env->spec().d_s, env->spec().d_a, n);
    Rng rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Vec obs = env->reset(rng);
    for (std::size_t t = 0; t < n; ++t) {
        const Vec a = Vec::Constant(static_cast<Eigen::Index>(env->spec().d_a), u(rng));
        const StepResult r = env->step(a);
        b.push(Transition{obs, a, r.reward, r.next_obs, false});
        obs = r.truncated ? env->reset(rng) : r.next_obs;
    }
    return b;
}

EnsembleConfig small_config() {
    EnsembleConfig c;
    c.hidden_dims = {32, 32};
    c.batch_size = 64;
    return c;
}

// Oracle world model that reads the true scale_mismatch dynamics.
struct TrueScaleModel final : WorldModel {
    EnvParams p = ScaleMismatch::defaults();
    bool ready() const override { return true; }
    ModelStep predict_batch(const Mat& s, const Mat& a, Rng&, bool) const override {
        ModelStep out{Mat(s.rows(), s.cols()), Vec(s.cols())};
        for (Eigen::Index j = 0; j < s.cols(); ++j) {
            const ScaleMismatch::State x = ScaleMismatch::transition(p, s.col(j), a(0, j));
            out.next_states.col(j) = x;
            out.rewards[j] = ScaleMismatch::reward(p, x);
        }
        return out;
    }
};

struct ZeroRewardModel final : WorldModel {
    bool ready() const override { return true; }
    ModelStep predict_batch(const Mat& s, const Mat&, Rng&, bool) const override { return {s, Vec::Zero(s.cols())}; }
};

}  // namespace

TEST(Targets, StaticResidualIsZeroDirectIsVerbatim) {
    const ReplayBuffer b = random_buffer("static", 50, 1);
    const TransitionBatch all = b.all();
    const Mat res = build_targets(all, TargetMode::residual, false, fit_target_stats(all, TargetMode::residual));
    EXPECT_TRUE(res.topRows(2).isZero());
    EXPECT_EQ(Vec(res.row(2).transpose()), all.rewards);
    const Mat dir = build_targets(all, TargetMode::direct, false, fit_target_stats(all, TargetMode::direct));
    EXPECT_EQ(Mat(dir.topRows(2)), all.next_states);
}

TEST(Targets, NormalizedColumnsMatchFitStats) {
    const ReplayBuffer b = random_buffer("scale_mismatch", 3, 2);
    const TransitionBatch all = b.all();
    for (auto mode : {TargetMode::residual, TargetMode::direct}) {
        const TargetStats st = fit_target_stats(all, mode);
        const Mat t = build_targets(all, mode, true, st);
        const Mat raw_state = mode == TargetMode::residual ? Mat(all.next_states - all.states) : all.next_states;
        const RunningStats ss = fit_stats(raw_state), rs = fit_stats(Mat(all.rewards.transpose()));
        for (Eigen::Index j = 0; j < 3; ++j) {
            for (Eigen::Index i = 0; i < 2; ++i) EXPECT_NEAR(t(i, j), (raw_state(i, j) - ss.mean[i]) / ss.std[i], 1e-12);
            EXPECT_NEAR(t(2, j), (all.rewards[j] - rs.mean[0]) / rs.std[0], 1e-12);
        }
    }
    EXPECT_THROW(build_targets(all, TargetMode::direct, true, fit_target_stats(all, TargetMode::residual)), ConfigError);
}

TEST(Targets, ScaleEquivariantUnderStateScaling) {
    const ReplayBuffer b = random_buffer("scale_mismatch", 200, 3);
    TransitionBatch all = b.all();
    TransitionBatch scaled = all;
    scaled.states *= 37.0;
    scaled.next_states *= 37.0;
    for (auto mode : {TargetMode::residual, TargetMode::direct}) {
        const Mat a = build_targets(all, mode, true, fit_target_stats(all, mode));
        const Mat c = build_targets(scaled, mode, true, fit_target_stats(scaled, mode));
        EXPECT_LE((a - c).cwiseAbs().maxCoeff(), 1e-6);
        // And so the initial loss of an identically initialized member.
        EnsembleConfig cfg = small_config();
        cfg.target_mode = mode;
        cfg.target_norm = true;
        Rng r1(4), r2(4);
        DynamicsEnsemble e1(2, 1, cfg, r1), e2(2, 1, cfg, r2);
        e1.refit_stats(all);
        e2.refit_stats(scaled);
        const double l1 = e1.mean_nll(all), l2 = e2.mean_nll(scaled);
        EXPECT_NEAR(l1, l2, 1e-6 * std::abs(l1));
    }
}

TEST(Nll, KnownValues) {
    EXPECT_EQ(gaussian_nll({Vec{{1.0, 2.0}}, Vec::Zero(2)}, Vec{{1.0, 2.0}}), 0.0);
    EXPECT_EQ(gaussian_nll({Vec{{2.0}}, Vec::Zero(1)}, Vec{{1.0}}), 1.0);
    const NllParts p = gaussian_nll_parts({Vec{{0.0, 0.0}}, Vec{{1.0, -1.0}}}, Vec{{1.0, 2.0}});
    EXPECT_NEAR(p.error, (std::exp(-1.0) + 4.0 * std::exp(1.0)) / 2.0, 1e-15);
    EXPECT_EQ(p.variance, 0.0);
    EXPECT_THROW(gaussian_nll({Vec::Zero(2), Vec::Zero(2)}, Vec::Zero(3)), DimensionError);
    EXPECT_THROW(gaussian_nll({Vec{{NAN}}, Vec::Zero(1)}, Vec::Zero(1)), NonFiniteError);
}

TEST(Nll, BatchMatchesPerDimScalarEvaluation) {
    Rng rng(5);
    std::normal_distribution<double> n(0.0, 2.0);
    const double lo = -10.0, hi = 0.5;
    for (int k = 0; k < 20; ++k) {
        Mat mu(3, 4), raw(3, 4), t(3, 4);
        for (Eigen::Index i = 0; i < mu.size(); ++i) {
            mu(i) = n(rng);
            raw(i) = n(rng);
            t(i) = n(rng);
        }
        double expect = 0.0;
        for (Eigen::Index i = 0; i < mu.size(); ++i) {
            const double l = bound_logvar(raw(i), lo, hi);
            expect += (mu(i) - t(i)) * (mu(i) - t(i)) * std::exp(-l) + l;
        }
        expect /= 12.0;
        EXPECT_NEAR(gaussian_nll_batch(mu, raw, t, lo, hi).loss, expect, 1e-10);
        double cols = 0.0;
        for (Eigen::Index j = 0; j < 4; ++j)
            cols += gaussian_nll({mu.col(j), bound_logvar(Vec(raw.col(j)), lo, hi)}, t.col(j));
        EXPECT_NEAR(cols / 4.0, expect, 1e-10);
    }
}

TEST(Nll, GradientThroughBoundAndForwardMatchesFiniteDifferences) {
    Rng rng(6);
    std::normal_distribution<double> n(0.0, 1.0);
    MlpSpec spec{3, {8, 8}, 6, Activation::swish, OutputActivation::identity, false};
    const double lo = -10.0, hi = 0.5, h = 1e-5;
    double worst = 0.0;
    for (int probe = 0; probe < 50; ++probe) {
        Mlp net = Mlp::random(spec, rng);
        const Mat x = Mat::Random(3, 5), t = Mat::Random(3, 5);
        auto loss = [&](const Mlp& m) {
            const Mat out = m.forward(x);
            return gaussian_nll_batch(out.topRows(3), out.bottomRows(3), t, lo, hi).loss;
        };
        MlpCache cache;
        const Mat out = net.forward(x, &cache);
        const NllGrad g = gaussian_nll_batch(out.topRows(3), out.bottomRows(3), t, lo, hi);
        Mat up(6, 5);
        up.topRows(3) = g.d_mean;
        up.bottomRows(3) = g.d_rawvar;
        Vec grad;
        net.backward(cache, up, grad);
        std::uniform_int_distribution<Eigen::Index> pick(0, grad.size() - 1);
        for (int k = 0; k < 4; ++k) {
            const Eigen::Index i = pick(rng);
            Mlp a = net, b = net;
            a.params().values[i] += h;
            b.params().values[i] -= h;
            const double fd = (loss(a) - loss(b)) / (2 * h);
            worst = std::max(worst, std::abs(fd - grad[i]) / std::max(1e-3, std::max(std::abs(fd), std::abs(grad[i]))));
        }
    }
    EXPECT_LE(worst, 1e-4);
}

TEST(BoundLogvar, MidpointAsymptotesAndRange) {
    EXPECT_LT(std::abs(bound_logvar(0.0, -10.0, 10.0)), 1e-4);
    EXPECT_NEAR(bound_logvar(1e6, -10.0, 0.5), 0.5 + std::log1p(std::exp(-10.5)), 1e-12);
    EXPECT_NEAR(bound_logvar(-1e6, -10.0, 0.5), -10.0, 1e-12);
    // The outer softplus can lift the result above hi by at most
    // log(1 + exp(lo - hi)).
    const double overshoot = std::log1p(std::exp(-10.5));
    for (double r = -40.0; r <= 40.0; r += 0.37) {
        const double l = bound_logvar(r, -10.0, 0.5);
        EXPECT_GT(l, -10.0);
        EXPECT_LE(l, 0.5 + overshoot + 1e-15);
        const double fd = (bound_logvar(r + 1e-6, -10.0, 0.5) - bound_logvar(r - 1e-6, -10.0, 0.5)) / 2e-6;
        EXPECT_NEAR(bound_logvar_derivative(r, -10.0, 0.5), fd, 1e-6);
    }
}

TEST(Elites, SelectionRules) {
    EXPECT_EQ(select_elites({3, 1, 2}, 2), (std::vector<std::size_t>{1, 2}));
    EXPECT_EQ(select_elites({4, 4, 4, 4}, 3), (std::vector<std::size_t>{0, 1, 2}));
    EXPECT_EQ(select_elites({9, 1, 5}, 3), (std::vector<std::size_t>{0, 1, 2}));
    EXPECT_THROW(select_elites({1, 2}, 3), ConfigError);
    EXPECT_THROW(select_elites({1, NAN}, 1), NonFiniteError);
}

TEST(Train, TooSmallBufferAndUntrainedPredictThrow) {
    const ReplayBuffer b = random_buffer("scale_mismatch", 100, 7);
    Rng rng(1);
    DynamicsEnsemble e(2, 1, small_config(), rng);
    EXPECT_FALSE(e.ready());
    EXPECT_THROW(e.predict_step(Vec::Zero(2), Vec::Zero(1), rng, true), StateError);
    EXPECT_THROW(e.train(b, rng), StateError);
}

TEST(Train, ReportsFiveElitesOfSevenAndIsDeterministic) {
    const ReplayBuffer b = random_buffer("pendulum_swingup", 600, 8);
    auto run = [&] {
        Rng init(3), rng(4);
        DynamicsEnsemble e(3, 1, small_config(), init);
        return e.train(b, rng);
    };
    const TrainReport a = run(), c = run();
    EXPECT_EQ(a.elites.size(), 5u);
    EXPECT_EQ(a.holdout_mse.size(), 7u);
    EXPECT_EQ(a, c);
    EXPECT_EQ(a.elites, select_elites(a.holdout_mse, 5));
}

TEST(Train, LinearGaussianNearLeastSquaresOracle) {
    // s' = A s + B a + noise, r = c . s' + noise; inputs uniform.
    Eigen::Matrix2d A;
    A << 0.9, -0.2, 0.3, 0.8;
    const Eigen::Vector2d B(0.5, -0.4), c(0.7, -0.3);
    const double sigma = 0.1;
    Rng rng(9);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::normal_distribution<double> n(0.0, sigma);
    auto sample = [&] {
        Transition t{Vec{{u(rng), u(rng)}}, Vec{{u(rng)}}, 0.0, Vec(2), false};
        t.next_state = A * t.state + B * t.action[0] + Eigen::Vector2d(n(rng), n(rng));
        t.reward = c.dot(t.next_state) + n(rng);
        return t;
    };
    ReplayBuffer train(2, 1, 3000);
    for (int i = 0; i < 3000; ++i) train.push(sample());
    ReplayBuffer test(2, 1, 20000);
    for (int i = 0; i < 20000; ++i) test.push(sample());

    EnsembleConfig cfg = small_config();
    cfg.max_epochs = 60;
    cfg.patience = 60;
    Rng init(10), trng(11);
    DynamicsEnsemble e(2, 1, cfg, init);
    const TrainReport report = e.train(train, trng);

    // Least squares on [s, a, 1] -> residual targets, fitted on the training buffer.
    const TransitionBatch tr = train.all(), te = test.all();
    auto design = [](const TransitionBatch& b) {
        Mat X(static_cast<Eigen::Index>(b.size()), 4);
        X.leftCols(2) = b.states.transpose();
        X.col(2) = b.actions.row(0).transpose();
        X.col(3).setOnes();
        return X;
    };
    auto targets = [](const TransitionBatch& b) {
        Mat Y(static_cast<Eigen::Index>(b.size()), 3);
        Y.leftCols(2) = (b.next_states - b.states).transpose();
        Y.col(2) = b.rewards;
        return Y;
    };
    const Mat W = design(tr).colPivHouseholderQr().solve(targets(tr));
    const double oracle = (design(te) * W - targets(te)).array().square().mean();

    const Mat x = e.normalized_inputs(te.states, te.actions);
    const Mat y = build_targets(te, TargetMode::residual, false, e.target_stats());
    double elite = 0.0;
    for (auto m : report.elites) elite += (e.member_outputs(m, x).first - y).array().square().mean();
    elite /= static_cast<double>(report.elites.size());
    EXPECT_LT(elite, 1.1 * oracle) << "oracle " << oracle;
}

TEST(Predict, DeterministicDecodeMatchesDefinition) {
    const ReplayBuffer b = random_buffer("scale_mismatch", 400, 12);
    for (auto mode : {TargetMode::residual, TargetMode::direct}) {
        for (bool norm : {false, true}) {
            EnsembleConfig cfg = small_config();
            cfg.n_members = 1;
            cfg.n_elites = 1;
            cfg.max_epochs = 1;
            cfg.target_mode = mode;
            cfg.target_norm = norm;
            Rng init(1), rng(2);
            DynamicsEnsemble e(2, 1, cfg, init);
            e.train(b, rng);
            const Vec s{{40.0, -10.0}}, a{{0.3}};
            const auto [next, r] = e.predict_step(s, a, rng, true);
            const EnsemblePrediction p = e.member_prediction(0, s, a);
            Vec state = p.mean.head(2);
            double rew = p.mean[2];
            if (norm) {
                state = denormalize(state, e.target_stats().state);
                rew = denormalize(Vec{{rew}}, e.target_stats().reward)[0];
            }
            if (mode == TargetMode::residual) state += s;
            EXPECT_LE((next - state).cwiseAbs().maxCoeff(), 1e-9);
            EXPECT_NEAR(r, rew, 1e-12);
        }
    }
}

TEST(Predict, StochasticMeanWithinThreeStandardErrors) {
    const ReplayBuffer b = random_buffer("scale_mismatch", 600, 13);
    EnsembleConfig cfg = small_config();
    cfg.n_members = 1;
    cfg.n_elites = 1;
    cfg.target_mode = TargetMode::direct;
    cfg.target_norm = true;
    Rng init(1), rng(2);
    DynamicsEnsemble e(2, 1, cfg, init);
    e.train(b, rng);
    const Vec s{{20.0, 5.0}}, a{{-0.4}};
    const auto [mu, r_mu] = e.predict_step(s, a, rng, true);
    const int N = 10000;
    Mat draws(3, N);
    for (int i = 0; i < N; ++i) {
        const auto [x, r] = e.predict_step(s, a, rng, false);
        draws.col(i) << x, r;
    }
    const Vec mean = draws.rowwise().mean();
    const Vec sd = ((draws.colwise() - mean).array().square().rowwise().mean()).sqrt();
    const Vec expect{{mu[0], mu[1], r_mu}};
    for (Eigen::Index i = 0; i < 3; ++i) EXPECT_LE(std::abs(mean[i] - expect[i]), 3.0 * sd[i] / std::sqrt(double(N)));
}

TEST(Variance, AtFloorAndSingleMemberUnit) {
    const ReplayBuffer b = random_buffer("scale_mismatch", 300, 14);
    EnsembleConfig cfg = small_config();
    cfg.max_epochs = 1;
    Rng init(1), rng(2);
    DynamicsEnsemble e(2, 1, cfg, init);
    e.train(b, rng);
    for (auto& m : e.members()) {
        const auto layout = param_layout(m.spec());
        const auto& last = layout.back();
        m.params().values.segment(static_cast<Eigen::Index>(last.weight), static_cast<Eigen::Index>(32 * 6)).setZero();
        m.params().values.segment(static_cast<Eigen::Index>(last.bias + 3), 3).setConstant(-1e4);
    }
    EXPECT_NEAR(e.variance_diagnostic(b.all()), std::exp(cfg.logvar_min), 1e-12);

    cfg.n_members = 1;
    cfg.n_elites = 1;
    Rng init2(1), rng2(2);
    DynamicsEnsemble one(2, 1, cfg, init2);
    one.train(b, rng2);
    const double lo = cfg.logvar_min, hi = cfg.logvar_max;
    // Pick the raw value that bounds to exactly 0.
    double raw_lo = -50.0, raw_hi = 50.0;
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (raw_lo + raw_hi);
        (bound_logvar(mid, lo, hi) < 0.0 ? raw_lo : raw_hi) = mid;
    }
    auto& m = one.members()[0];
    const auto last = param_layout(m.spec()).back();
    m.params().values.segment(static_cast<Eigen::Index>(last.weight), static_cast<Eigen::Index>(32 * 6)).setZero();
    m.params().values.segment(static_cast<Eigen::Index>(last.bias + 3), 3).setConstant(raw_lo);
    EXPECT_NEAR(one.variance_diagnostic(b.all()), 1.0, 1e-9);
    EXPECT_THROW(one.variance_diagnostic(TransitionBatch(2, 1, 0)), StateError);
}

TEST(ModeEquivalence, StaticEnvFitsEquallyWell) {
    const ReplayBuffer b = random_buffer("static", 2000, 15);
    std::vector<double> mse;
    for (auto mode : {TargetMode::residual, TargetMode::direct}) {
        EnsembleConfig cfg = small_config();
        cfg.hidden_dims = {64, 64};
        cfg.target_mode = mode;
        cfg.target_norm = true;
        cfg.max_epochs = 60;
        cfg.patience = 60;
        Rng init(1), rng(2);
        DynamicsEnsemble e(2, 1, cfg, init);
        mse.push_back(e.train(b, rng).elite_mse());
    }
    const double ratio = std::max(mse[0], mse[1]) / std::min(mse[0], mse[1]);
    EXPECT_LE(ratio, 2.0) << mse[0] << " vs " << mse[1];
}

TEST(RewardBias, OracleAndZeroPredictor) {
    const ReplayBuffer b = random_buffer("scale_mismatch", 500, 16);
    Rng rng(1);
    const RewardBiasReport exact = reward_bias_probe(TrueScaleModel{}, b, 256, rng);
    EXPECT_NEAR(exact.mean_bias, 0.0, 1e-12);
    EXPECT_NEAR(exact.rmse, 0.0, 1e-12);
    EXPECT_EQ(exact.pairs.size(), 256u);
    Rng r1(2), r2(2);
    const RewardBiasReport zero = reward_bias_probe(ZeroRewardModel{}, b, 256, r1);
    const TransitionBatch same = b.sample_batch(256, r2);
    EXPECT_NEAR(zero.mean_bias, -same.rewards.mean(), 1e-12);
    ReplayBuffer empty(2, 1, 4);
    EXPECT_THROW(reward_bias_probe(TrueScaleModel{}, empty, 4, rng), StateError);
}
