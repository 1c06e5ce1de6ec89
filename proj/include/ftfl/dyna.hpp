#pragma once

// Dyna orchestration: scheduled ensemble retrains, one-step synthetic
// rollouts branched from real states, and mixed real/synthetic batches for
// every actor-critic update.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "ftfl/diagnostics.hpp"
#include "ftfl/ensemble.hpp"
#include "ftfl/envs.hpp"
#include "ftfl/error.hpp"
#include "ftfl/replay.hpp"
#include "ftfl/sac.hpp"

namespace ftfl {

enum class Algo { sac, mbpo, ftfl, ablation };

inline const char* to_string(Algo a) {
    switch (a) {
    case Algo::sac: return "sac";
    case Algo::mbpo: return "mbpo";
    case Algo::ftfl: return "ftfl";
    case Algo::ablation: return "ablation";
    }
    return "?";
}

/// Cell label of a (target mode, target norm) combination.
inline std::string cell_label(TargetMode mode, bool norm) {
    return std::string(mode == TargetMode::residual ? "res" : "dir") + (norm ? "+norm" : "");
}

struct ExperimentConfig {
    Algo algo = Algo::mbpo;
    std::string env_name = "scale_mismatch";
    EnvParams env_params;
    std::size_t total_env_steps = 20000;
    std::uint64_t seed = 0;
    SacConfig sac;
    EnsembleConfig ensemble;
    double synthetic_ratio = 0.95;
    std::size_t rollouts_per_step = 400;
    std::size_t model_horizon = 1;
    std::size_t replay_capacity = 1000000;
    std::size_t synthetic_capacity = 400000;
    std::size_t eval_interval = 500;
    std::size_t eval_episodes = 5;
    std::size_t final_window = 10;
    /// Transitions drawn for the reward-bias, variance and critic probes.
    std::size_t probe_samples = 256;
    /// Prefix growth per round of pseudo-online probing.
    std::size_t reveal_step = 250;

    bool uses_model() const { return algo != Algo::sac; }

    /// Name used in output files: sac, mbpo, ftfl, or the ablation cell label.
    std::string label() const {
        if (algo == Algo::ablation) return cell_label(ensemble.target_mode, ensemble.target_norm);
        return to_string(algo);
    }

    void validate() const {
        sac.validate();
        ensemble.validate();
        if (!(synthetic_ratio >= 0.0 && synthetic_ratio <= 1.0)) throw ConfigError("dyna.synthetic_ratio must be in [0, 1]");
        if (model_horizon != 1) throw ConfigError("dyna.model_horizon must be 1");
        if (total_env_steps == 0) throw ConfigError("dyna.total_env_steps must be >= 1");
        if (replay_capacity == 0 || synthetic_capacity == 0) throw ConfigError("dyna: buffer capacities must be >= 1");
        if (eval_interval == 0) throw ConfigError("eval.interval must be >= 1");
        if (eval_episodes == 0) throw ConfigError("eval.episodes must be >= 1");
        if (final_window == 0) throw ConfigError("eval.final_window must be >= 1");
        if (probe_samples == 0) throw ConfigError("eval.probe_samples must be >= 1");
        if (reveal_step == 0) throw ConfigError("dyna.reveal_step must be >= 1");
        if (algo == Algo::ftfl && !(ensemble.target_mode == TargetMode::direct && ensemble.target_norm))
            throw ConfigError("algo ftfl requires direct targets with target normalization");
        if (algo == Algo::mbpo && !(ensemble.target_mode == TargetMode::residual && !ensemble.target_norm))
            throw ConfigError("algo mbpo requires residual targets without target normalization");
    }
};

/// Independent random streams of one run. Keeping them apart makes the
/// agent's trajectory independent of whatever the model consumes.
struct RunStreams {
    Rng agent_init, act, model, env, eval, diag;

    explicit RunStreams(std::uint64_t seed)
        : agent_init(stream(seed, 1)), act(stream(seed, 2)), model(stream(seed, 3)), env(stream(seed, 4)),
          eval(stream(seed, 5)), diag(stream(seed, 6)) {}

    static Rng stream(std::uint64_t seed, std::uint32_t id) {
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), id};
        return Rng(seq);
    }
};

// ---------------------------------------------------------------------------

/// Branches n one-step rollouts from uniformly drawn real states using the
/// current stochastic policy; pushes them to `synthetic` with d = 0.
inline std::size_t generate_rollouts(const WorldModel& model, const SacAgent& agent, const ReplayBuffer& real,
                                     ReplayBuffer& synthetic, std::size_t n, Rng& rng) {
    if (!model.ready()) throw StateError("generate_rollouts: model has not been trained");
    if (n == 0) return 0;
    const TransitionBatch start = real.sample_batch(n, rng);
    const ActorSample act = actor_sample_batch(agent, start.states, rng, false);
    const ModelStep pred = model.predict_batch(start.states, act.actions, rng, false);
    Transition t;
    for (std::size_t i = 0; i < n; ++i) {
        const auto c = static_cast<Eigen::Index>(i);
        t.state = start.states.col(c);
        t.action = act.actions.col(c);
        t.reward = pred.rewards[c];
        t.next_state = pred.next_states.col(c);
        t.terminal = false;
        if (!t.next_state.allFinite() || !std::isfinite(t.reward))
            throw NonFiniteError("generate_rollouts: model produced a non-finite transition");
        synthetic.push(t);
    }
    return n;
}

/// floor(ratio * batch_size) synthetic plus the rest real, shuffled. Falls
/// back to all-real when the synthetic buffer is empty.
inline TransitionBatch mix_batch(const ReplayBuffer& real, const ReplayBuffer& synthetic, std::size_t batch_size,
                                 double ratio, Rng& rng) {
    if (batch_size == 0) throw ConfigError("mix_batch: batch_size must be >= 1");
    if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("mix_batch: ratio must be in [0, 1]");
    std::size_t n_synth = synthetic.effective_size() == 0
                              ? 0
                              : static_cast<std::size_t>(std::floor(ratio * static_cast<double>(batch_size)));
    if (real.effective_size() == 0) {
        if (n_synth == 0 && synthetic.effective_size() == 0) throw StateError("mix_batch: both buffers are empty");
        n_synth = batch_size;
    }
    const std::size_t n_real = batch_size - n_synth;
    const TransitionBatch r = n_real ? real.sample_batch(n_real, rng) : TransitionBatch();
    const TransitionBatch s = n_synth ? synthetic.sample_batch(n_synth, rng) : TransitionBatch();
    std::vector<std::size_t> order(batch_size);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    TransitionBatch out(real.state_dim(), real.action_dim(), batch_size);
    for (std::size_t j = 0; j < batch_size; ++j) {
        const std::size_t k = order[j];
        if (k < n_real) out.copy_column(j, r, k);
        else out.copy_column(j, s, k - n_real);
    }
    return out;
}

// ---------------------------------------------------------------------------

struct RunResult {
    RunRecord record;
    bool aborted = false;
    std::string abort_reason;
    std::size_t retrains = 0;
    std::size_t first_retrain_step = 0;  // 0 when the model never trained
    std::size_t synthetic_pushed = 0;
    std::shared_ptr<ReplayBuffer> real_buffer;
};

using RowCallback = std::function<void(const MetricsRow&)>;

namespace detail {

inline double evaluate_policy(const SacAgent& agent, Environment& env, std::size_t episodes, Rng& rng) {
    double total = 0.0;
    for (std::size_t e = 0; e < episodes; ++e) {
        Vec obs = env.reset(rng);
        for (;;) {
            const auto [a, logp] = actor_sample(agent, obs, rng, true);
            const StepResult r = env.step(a);
            total += r.reward;
            obs = r.next_obs;
            if (r.terminal || r.truncated) break;
        }
    }
    return total / static_cast<double>(episodes);
}

}  // namespace detail

/// Runs one seed of SAC, MBPO, FTFL or an ablation cell. Each evaluation row
/// is passed to `on_row` as soon as it is produced. A non-finite loss stops
/// the run; the rows logged so far are kept and `aborted` is set.
inline RunResult run_training(const ExperimentConfig& config, const RowCallback& on_row = {}) {
    config.validate();
    RunStreams rs(config.seed);
    auto env = make_env(config.env_name, config.env_params);
    auto eval_env = env->clone();
    const std::size_t d_s = env->spec().d_s, d_a = env->spec().d_a;

    SacAgent agent(d_s, d_a, config.sac, rs.agent_init);
    std::optional<DynamicsEnsemble> model;
    if (config.uses_model()) model.emplace(d_s, d_a, config.ensemble, rs.model);

    RunResult result;
    result.record.algo = config.label();
    result.record.env = config.env_name;
    result.record.seed = config.seed;
    result.real_buffer = std::make_shared<ReplayBuffer>(d_s, d_a, config.replay_capacity);
    ReplayBuffer& real = *result.real_buffer;
    ReplayBuffer synthetic(d_s, d_a, config.synthetic_capacity);

    const SacConfig& sc = agent.config();
    double last_critic_loss = std::numeric_limits<double>::quiet_NaN();
    std::uniform_real_distribution<double> uniform_action(-1.0, 1.0);
    Vec obs = env->reset(rs.env);
    const double nan = std::numeric_limits<double>::quiet_NaN();

    try {
        for (std::size_t t = 1; t <= config.total_env_steps; ++t) {
            Vec action(static_cast<Eigen::Index>(d_a));
            if (t <= sc.warmup_steps) {
                for (auto& v : action) v = uniform_action(rs.act);
            } else {
                action = actor_sample(agent, obs, rs.act, false).first;
            }
            const StepResult step = env->step(action);
            real.push(Transition{obs, action, step.reward, step.next_obs, step.terminal});
            obs = (step.terminal || step.truncated) ? env->reset(rs.env) : step.next_obs;

            if (model && t >= sc.warmup_steps && t % config.ensemble.retrain_interval == 0 &&
                real.effective_size() >= 2 * config.ensemble.batch_size) {
                model->train(real, rs.model);
                if (result.retrains++ == 0) result.first_retrain_step = t;
            }

            if (t >= sc.warmup_steps) {
                const bool model_ready = model && model->ready();
                if (model_ready)
                    result.synthetic_pushed +=
                        generate_rollouts(*model, agent, real, synthetic, config.rollouts_per_step, rs.model);
                const double ratio = model_ready ? config.synthetic_ratio : 0.0;
                for (std::size_t u = 0; u < sc.updates_per_step; ++u) {
                    const TransitionBatch batch = mix_batch(real, synthetic, sc.batch_size, ratio, rs.act);
                    last_critic_loss = sac_update(agent, batch, rs.act).critic_loss;
                }
            }

            if (t % config.eval_interval == 0) {
                MetricsRow row;
                row.step = t;
                row.eval_return = detail::evaluate_policy(agent, *eval_env, config.eval_episodes, rs.eval);
                row.q_mean = critic_probe(agent, real.sample_batch(config.probe_samples, rs.eval).states, rs.eval);
                if (model && model->ready()) {
                    row.reward_bias = reward_bias_probe(*model, real, config.probe_samples, rs.diag).mean_bias;
                    row.variance_diag = model->variance_diagnostic(real.sample_batch(config.probe_samples, rs.diag));
                } else {
                    row.reward_bias = nan;
                    row.variance_diag = nan;
                }
                row.alpha = agent.alpha();
                row.critic_loss = last_critic_loss;
                if (!std::isfinite(row.eval_return) || !std::isfinite(row.q_mean))
                    throw NonFiniteError("evaluation produced a non-finite value at step " + std::to_string(t));
                result.record.rows.push_back(row);
                if (on_row) on_row(row);
            }
        }
    } catch (const NonFiniteError& e) {
        result.aborted = true;
        result.abort_reason = e.what();
    }
    return result;
}

// ---------------------------------------------------------------------------

struct ProbeRow {
    std::size_t reveal_k = 0;
    double reward_bias = 0.0;
    double reward_rmse = 0.0;
    double variance_diag = 0.0;
    double holdout_mse = 0.0;  // mean over elites, training target space
};

/// Pseudo-online model probing: reveals the buffer in prefixes of
/// reveal_step, retrains the ensemble (warm start) on each prefix and
/// records reward-bias and variance diagnostics. Prefixes too small to train
/// on produce a row of NaNs. No agent updates and no environment steps.
inline std::vector<ProbeRow> run_pseudo_online(const ExperimentConfig& config, ReplayBuffer& buffer,
                                               std::size_t reveal_step,
                                               const std::function<void(const ProbeRow&)>& on_row = {}) {
    if (reveal_step == 0) throw ConfigError("pseudo-online: reveal_step must be >= 1");
    config.ensemble.validate();
    RunStreams rs(config.seed);
    DynamicsEnsemble model(buffer.state_dim(), buffer.action_dim(), config.ensemble, rs.model);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    const std::size_t rounds = buffer.size() / reveal_step;
    std::vector<ProbeRow> rows;
    for (std::size_t r = 1; r <= rounds; ++r) {
        const std::size_t k = r * reveal_step;
        buffer.reveal_prefix(k);
        ProbeRow row{k, nan, nan, nan, nan};
        if (k >= 2 * config.ensemble.batch_size) {
            const TrainReport report = model.train(buffer, rs.model);
            const RewardBiasReport bias = reward_bias_probe(model, buffer, config.probe_samples, rs.diag);
            row.reward_bias = bias.mean_bias;
            row.reward_rmse = bias.rmse;
            row.variance_diag = model.variance_diagnostic(buffer.sample_batch(config.probe_samples, rs.diag));
            row.holdout_mse = report.elite_mse();
        }
        rows.push_back(row);
        if (on_row) on_row(row);
    }
    return rows;
}

}  // namespace ftfl
