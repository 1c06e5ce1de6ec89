#include <cmath>

#include <gtest/gtest.h>

#include "ftfl/dyna.hpp"

using namespace ftfl;

namespace {

ReplayBuffer tagged(double reward, std::size_t n) {
    ReplayBuffer b(2, 1, n);
    for (std::size_t i = 0; i < n; ++i)
        b.push(Transition{Vec::Constant(2, static_cast<double>(i)), Vec::Zero(1), reward, Vec::Zero(2), false});
    return b;
}

std::pair<int, int> composition(const TransitionBatch& b) {
    int synth = 0, real = 0;
    for (Eigen::Index i = 0; i < b.rewards.size(); ++i) (b.rewards[i] < 0 ? synth : real)++;
    return {synth, real};
}

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

ExperimentConfig tiny(Algo algo) {
    ExperimentConfig c;
    c.algo = algo;
    if (algo == Algo::ftfl) {
        c.ensemble.target_mode = TargetMode::direct;
        c.ensemble.target_norm = true;
    }
    c.total_env_steps = 600;
    c.sac.hidden_dims = {16, 16};
    c.sac.batch_size = 32;
    c.sac.updates_per_step = 1;
    c.sac.warmup_steps = 0;
    c.ensemble.hidden_dims = {16, 16};
    c.ensemble.batch_size = 100;
    c.ensemble.max_epochs = 2;
    c.rollouts_per_step = 20;
    c.synthetic_capacity = 4000;
    c.eval_interval = 200;
    c.eval_episodes = 1;
    c.probe_samples = 32;
    return c;
}

}  // namespace

TEST(MixBatch, Composition) {
    const ReplayBuffer real = tagged(1.0, 50), synth = tagged(-1.0, 50);
    Rng rng(1);
    EXPECT_EQ(composition(mix_batch(real, synth, 256, 0.95, rng)), std::make_pair(243, 13));
    EXPECT_EQ(composition(mix_batch(real, synth, 256, 0.0, rng)), std::make_pair(0, 256));
    EXPECT_EQ(composition(mix_batch(real, synth, 256, 1.0, rng)), std::make_pair(256, 0));
    const ReplayBuffer none(2, 1, 4);
    EXPECT_EQ(composition(mix_batch(real, none, 256, 0.95, rng)), std::make_pair(0, 256));
    EXPECT_THROW(mix_batch(real, synth, 0, 0.5, rng), ConfigError);
    EXPECT_THROW(mix_batch(none, none, 8, 0.5, rng), StateError);
}

TEST(MixBatch, IsShuffled) {
    const ReplayBuffer real = tagged(1.0, 50), synth = tagged(-1.0, 50);
    Rng rng(2);
    const TransitionBatch b = mix_batch(real, synth, 256, 0.95, rng);
    // Real rows are not all parked at the front.
    int front_real = 0;
    for (Eigen::Index i = 0; i < 13; ++i) front_real += b.rewards[i] > 0 ? 1 : 0;
    EXPECT_LT(front_real, 13);
}

TEST(Rollouts, CountStartStatesAndOracleExactness) {
    auto env = make_env("scale_mismatch");
    Rng rng(3);
    ReplayBuffer real(2, 1, 1000);
    Vec obs = env->reset(rng);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int t = 0; t < 300; ++t) {
        const Vec a{{u(rng)}};
        const StepResult r = env->step(a);
        real.push(Transition{obs, a, r.reward, r.next_obs, false});
        obs = r.next_obs;
    }
    SacConfig sc;
    sc.hidden_dims = {8};
    SacAgent agent(2, 1, sc, rng);
    ReplayBuffer synth(2, 1, 10000);
    EXPECT_EQ(generate_rollouts(TrueScaleModel{}, agent, real, synth, 400, rng), 400u);
    ASSERT_EQ(synth.size(), 400u);
    const TransitionBatch all_real = real.all();
    ScaleMismatch check;
    for (std::size_t i = 0; i < synth.size(); ++i) {
        const Transition t = synth.at(i);
        EXPECT_FALSE(t.terminal);
        bool found = false;
        for (Eigen::Index j = 0; j < all_real.states.cols() && !found; ++j) found = all_real.states.col(j) == t.state;
        EXPECT_TRUE(found);
        check.set_state(t.state);
        const StepResult r = check.step(t.action);
        EXPECT_EQ(r.next_obs, t.next_state);
        EXPECT_EQ(r.reward, t.reward);
    }
}

TEST(Rollouts, UntrainedModelRejected) {
    Rng rng(4);
    EnsembleConfig ec;
    ec.hidden_dims = {8};
    DynamicsEnsemble model(2, 1, ec, rng);
    SacConfig sc;
    sc.hidden_dims = {8};
    SacAgent agent(2, 1, sc, rng);
    ReplayBuffer real = tagged(1.0, 10), synth(2, 1, 10);
    EXPECT_THROW(generate_rollouts(model, agent, real, synth, 5, rng), StateError);
}

TEST(RunTraining, SacNeverBuildsModelAndLogsEveryInterval) {
    const RunResult r = run_training(tiny(Algo::sac));
    EXPECT_FALSE(r.aborted);
    EXPECT_EQ(r.retrains, 0u);
    EXPECT_EQ(r.synthetic_pushed, 0u);
    ASSERT_EQ(r.record.rows.size(), 3u);
    EXPECT_EQ(r.record.rows[0].step, 200u);
    EXPECT_TRUE(std::isnan(r.record.rows[0].reward_bias));
    EXPECT_EQ(r.real_buffer->size(), 600u);
}

TEST(RunTraining, FirstRetrainAtIntervalAndProvenance) {
    const RunResult r = run_training(tiny(Algo::mbpo));
    EXPECT_FALSE(r.aborted) << r.abort_reason;
    EXPECT_EQ(r.first_retrain_step, 250u);
    EXPECT_EQ(r.retrains, 2u);
    EXPECT_EQ(r.synthetic_pushed, (600u - 250u + 1u) * 20u);
    EXPECT_EQ(r.real_buffer->size(), 600u);
    EXPECT_TRUE(std::isfinite(r.record.rows.back().reward_bias));
    EXPECT_TRUE(std::isfinite(r.record.rows.back().variance_diag));
}

TEST(RunTraining, DefaultWarmupDelaysFirstRetrain) {
    ExperimentConfig c = tiny(Algo::ftfl);
    c.sac.warmup_steps = 1000;
    c.total_env_steps = 1250;
    c.eval_interval = 1250;
    const RunResult r = run_training(c);
    EXPECT_EQ(r.first_retrain_step, 1000u);
    EXPECT_EQ(r.retrains, 2u);
}

TEST(RunTraining, SameSeedIdenticalRows) {
    const ExperimentConfig c = tiny(Algo::ftfl);
    const RunResult a = run_training(c), b = run_training(c);
    ASSERT_EQ(a.record.rows.size(), b.record.rows.size());
    // rows before the first retrain carry NaN model diagnostics
    auto same = [](double x, double y) { return (std::isnan(x) && std::isnan(y)) || x == y; };
    for (std::size_t i = 0; i < a.record.rows.size(); ++i) {
        EXPECT_EQ(a.record.rows[i].eval_return, b.record.rows[i].eval_return);
        EXPECT_EQ(a.record.rows[i].q_mean, b.record.rows[i].q_mean);
        EXPECT_TRUE(same(a.record.rows[i].reward_bias, b.record.rows[i].reward_bias)) << i;
        EXPECT_EQ(a.record.rows[i].critic_loss, b.record.rows[i].critic_loss);
    }
}

TEST(RunTraining, MbpoAtRatioZeroMatchesSac) {
    ExperimentConfig m = tiny(Algo::mbpo), s = tiny(Algo::sac);
    m.synthetic_ratio = 0.0;
    m.sac.critic_layer_norm = s.sac.critic_layer_norm = true;
    const RunResult a = run_training(m), b = run_training(s);
    EXPECT_GT(a.retrains, 0u);
    ASSERT_EQ(a.record.rows.size(), b.record.rows.size());
    for (std::size_t i = 0; i < a.record.rows.size(); ++i) {
        EXPECT_EQ(a.record.rows[i].eval_return, b.record.rows[i].eval_return);
        EXPECT_EQ(a.record.rows[i].q_mean, b.record.rows[i].q_mean);
        EXPECT_EQ(a.record.rows[i].alpha, b.record.rows[i].alpha);
        EXPECT_EQ(a.record.rows[i].critic_loss, b.record.rows[i].critic_loss);
    }
}

TEST(RunTraining, RowCallbackSeesEveryRow) {
    std::vector<std::size_t> steps;
    const RunResult r = run_training(tiny(Algo::sac), [&](const MetricsRow& row) { steps.push_back(row.step); });
    EXPECT_EQ(steps, (std::vector<std::size_t>{200, 400, 600}));
}

TEST(Config, AliasInvariants) {
    ExperimentConfig c = tiny(Algo::ftfl);
    c.ensemble.target_norm = false;
    EXPECT_THROW(c.validate(), ConfigError);
    c = tiny(Algo::mbpo);
    c.ensemble.target_mode = TargetMode::direct;
    EXPECT_THROW(c.validate(), ConfigError);
    c = tiny(Algo::mbpo);
    c.model_horizon = 2;
    EXPECT_THROW(c.validate(), ConfigError);
    c = tiny(Algo::ablation);
    c.ensemble.target_mode = TargetMode::direct;
    c.ensemble.target_norm = true;
    EXPECT_EQ(c.label(), "dir+norm");
}

TEST(PseudoOnline, RoundCountNanPrefixAndDeterminism) {
    ReplayBuffer src(2, 1, 1100);
    {
        auto env = make_env("scale_mismatch");
        Rng rng(5);
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        Vec obs = env->reset(rng);
        for (int t = 0; t < 1100; ++t) {
            const Vec a{{u(rng)}};
            const StepResult r = env->step(a);
            src.push(Transition{obs, a, r.reward, r.next_obs, false});
            obs = r.truncated ? env->reset(rng) : r.next_obs;
        }
    }
    ExperimentConfig c = tiny(Algo::ablation);
    const std::string bytes = encode_dump(src);
    ReplayBuffer b1 = decode_dump(bytes), b2 = decode_dump(bytes);
    const auto rows = run_pseudo_online(c, b1, 150);
    ASSERT_EQ(rows.size(), 1100u / 150u);
    EXPECT_TRUE(std::isnan(rows[0].reward_bias));  // 150 < 2 * batch
    EXPECT_TRUE(std::isfinite(rows[1].reward_bias));
    EXPECT_EQ(rows.back().reveal_k, 1050u);
    const auto again = run_pseudo_online(c, b2, 150);
    EXPECT_EQ(rows.back().reward_bias, again.back().reward_bias);
    EXPECT_EQ(rows.back().variance_diag, again.back().variance_diag);
}
