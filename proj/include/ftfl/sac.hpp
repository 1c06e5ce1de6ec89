#pragma once

// Soft Actor-Critic: tanh-squashed Gaussian actor, twin critics with Polyak
// targets, learned entropy temperature.

#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <string>

#include "ftfl/error.hpp"
#include "ftfl/nn.hpp"
#include "ftfl/replay.hpp"

namespace ftfl {

struct SacConfig {
    double gamma = 0.99;
    /// Retain fraction: target <- tau * target + (1 - tau) * online.
    double tau = 0.995;
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1.5e-4;
    std::size_t batch_size = 256;
    std::size_t updates_per_step = 20;
    std::size_t warmup_steps = 1000;
    double init_alpha = 1.0;
    /// NaN selects the default -action_dim.
    double target_entropy = std::numeric_limits<double>::quiet_NaN();
    bool critic_layer_norm = false;
    std::vector<std::size_t> hidden_dims{256, 256};
    Activation activation = Activation::relu;
    double log_std_min = -5.0;
    double log_std_max = 2.0;

    void validate() const {
        if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("sac.gamma must be in (0, 1)");
        if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("sac.tau must be in [0, 1]");
        if (!(lr > 0.0)) throw ConfigError("sac.lr must be positive");
        if (batch_size == 0) throw ConfigError("sac.batch_size must be >= 1");
        if (!(init_alpha > 0.0)) throw ConfigError("sac.init_alpha must be positive");
        if (!(log_std_min < log_std_max)) throw ConfigError("sac.log_std_min must be < log_std_max");
        if (hidden_dims.empty()) throw ConfigError("sac.hidden_dims must be nonempty");
        for (auto h : hidden_dims)
            if (h == 0) throw ConfigError("sac.hidden_dims must be >= 1");
    }
};

struct ActorSample {
    Mat actions;  // d_a x n, strictly inside (-1, 1)
    Vec logp;     // n
};

struct SacMetrics {
    double critic_loss = 0.0;
    double actor_loss = 0.0;
    double alpha = 0.0;
    double q_mean = 0.0;
};

class SacAgent {
public:
    SacAgent(std::size_t state_dim, std::size_t action_dim, SacConfig config, Rng& init_rng)
        : d_s_(state_dim), d_a_(action_dim), config_(std::move(config)) {
        config_.validate();
        if (std::isnan(config_.target_entropy)) config_.target_entropy = -static_cast<double>(d_a_);
        MlpSpec actor_spec{d_s_, config_.hidden_dims, 2 * d_a_, config_.activation, OutputActivation::identity, false};
        MlpSpec critic_spec{d_s_ + d_a_, config_.hidden_dims, 1, config_.activation, OutputActivation::identity,
                            config_.critic_layer_norm};
        actor = Mlp::random(actor_spec, init_rng);
        q1 = Mlp::random(critic_spec, init_rng);
        q2 = Mlp::random(critic_spec, init_rng);
        q1_target = q1;
        q2_target = q2;
        log_alpha = std::log(config_.init_alpha);
        auto opt = [&](const Mlp& m) {
            return AdamState(m.params().total_count(), config_.lr, config_.beta1, config_.beta2, config_.eps);
        };
        actor_opt = opt(actor);
        q1_opt = opt(q1);
        q2_opt = opt(q2);
        alpha_opt = AdamState(1, config_.lr, config_.beta1, config_.beta2, config_.eps);
    }

    const SacConfig& config() const { return config_; }
    std::size_t state_dim() const { return d_s_; }
    std::size_t action_dim() const { return d_a_; }
    double alpha() const { return std::exp(log_alpha); }

    Mlp actor, q1, q2, q1_target, q2_target;
    double log_alpha = 0.0;
    AdamState actor_opt, q1_opt, q2_opt, alpha_opt;

private:
    std::size_t d_s_;
    std::size_t d_a_;
    SacConfig config_;
};

// ---------------------------------------------------------------------------
// Actor

/// Pre-squash Gaussian parameters. The raw log-std output is mapped smoothly
/// into [log_std_min, log_std_max] through tanh.
struct ActorHead {
    Mat mean;
    Mat raw_log_std;
    Mat log_std;
};

inline ActorHead actor_head(const Mlp& actor, const SacConfig& cfg, const Mat& states, MlpCache* cache = nullptr) {
    const Mat out = actor.forward(states, cache);
    const auto d_a = out.rows() / 2;
    ActorHead h{out.topRows(d_a), out.bottomRows(d_a), Mat()};
    const double half = 0.5 * (cfg.log_std_max - cfg.log_std_min);
    h.log_std = ((h.raw_log_std.array().tanh() + 1.0) * half + cfg.log_std_min).matrix();
    return h;
}

/// log(1 - tanh(u)^2), stable for large |u|.
inline double log1m_tanh_sq(double u) { return 2.0 * (std::numbers::ln2 - u - softplus(-2.0 * u)); }

/// a = tanh(mean + std * noise); logp = Gaussian log-density minus the
/// change-of-variables term sum log(1 - a^2).
inline ActorSample squash(const ActorHead& head, const Mat& noise) {
    const Mat u = head.mean + (head.log_std.array().exp() * noise.array()).matrix();
    ActorSample s;
    s.actions = u.array().tanh().matrix();
    const double c = 0.5 * std::log(2.0 * std::numbers::pi);
    const Eigen::ArrayXXd log_gauss = -0.5 * noise.array().square() - head.log_std.array() - c;
    const Eigen::ArrayXXd jac = u.unaryExpr([](double x) { return log1m_tanh_sq(x); }).array();
    s.logp = (log_gauss - jac).colwise().sum().transpose().matrix();
    // tanh rounds to +-1 for |u| > ~19; keep the open-interval guarantee.
    s.actions = s.actions.cwiseMax(-1.0 + 1e-12).cwiseMin(1.0 - 1e-12);
    return s;
}

inline Mat standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Mat m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = normal(rng);
    return m;
}

/// Batched policy sample. Deterministic mode returns tanh(mean) and the
/// log-density at zero noise.
inline ActorSample actor_sample_batch(const SacAgent& agent, const Mat& states, Rng& rng, bool deterministic) {
    const ActorHead head = actor_head(agent.actor, agent.config(), states);
    const Mat noise = deterministic ? Mat(Mat::Zero(head.mean.rows(), head.mean.cols()))
                                    : standard_normal(head.mean.rows(), head.mean.cols(), rng);
    ActorSample s = squash(head, noise);
    if (deterministic) s.actions = head.mean.array().tanh().matrix();
    return s;
}

inline std::pair<Vec, double> actor_sample(const SacAgent& agent, const Vec& state, Rng& rng, bool deterministic) {
    const ActorSample s = actor_sample_batch(agent, Mat(state), rng, deterministic);
    return {s.actions.col(0), s.logp[0]};
}

// ---------------------------------------------------------------------------
// Critics

inline Mat critic_input(const Mat& states, const Mat& actions) {
    Mat x(states.rows() + actions.rows(), states.cols());
    x.topRows(states.rows()) = states;
    x.bottomRows(actions.rows()) = actions;
    return x;
}

inline Vec critic_values(const Mlp& q, const Mat& states, const Mat& actions) {
    return q.forward(critic_input(states, actions)).row(0).transpose();
}

/// Soft Bellman targets y = r + gamma (1 - d) (min Qbar(s', a') - alpha logpi(a'|s')).
inline Vec critic_targets(const SacAgent& agent, const TransitionBatch& batch, Rng& rng) {
    const ActorSample next = actor_sample_batch(agent, batch.next_states, rng, false);
    const Vec qmin = critic_values(agent.q1_target, batch.next_states, next.actions)
                         .cwiseMin(critic_values(agent.q2_target, batch.next_states, next.actions));
    const Vec soft = qmin - agent.alpha() * next.logp;
    return batch.rewards + agent.config().gamma * ((1.0 - batch.terminals.array()) * soft.array()).matrix();
}

inline double critic_target(const SacAgent& agent, double reward, bool terminal, const Vec& next_state, Rng& rng) {
    TransitionBatch b(agent.state_dim(), agent.action_dim(), 1);
    b.rewards[0] = reward;
    b.terminals[0] = terminal ? 1.0 : 0.0;
    b.next_states.col(0) = next_state;
    return critic_targets(agent, b, rng)[0];
}

struct LossGrad {
    double loss = 0.0;
    Vec grad;
};

/// mean_i (Q(s_i, a_i) - y_i)^2 and its parameter gradient.
inline LossGrad critic_loss(const Mlp& q, const Mat& states, const Mat& actions, const Vec& y) {
    MlpCache cache;
    const Mat out = q.forward(critic_input(states, actions), &cache);
    const Eigen::RowVectorXd diff = out.row(0) - y.transpose();
    const double n = static_cast<double>(y.size());
    LossGrad r;
    r.loss = diff.squaredNorm() / n;
    r.grad = Vec::Zero(static_cast<Eigen::Index>(q.params().total_count()));
    q.backward(cache, Mat(2.0 * diff / n), r.grad);
    return r;
}

struct ActorLoss {
    double loss = 0.0;
    Vec grad;  // actor parameters
    Vec logp;  // per-sample log-density of the sampled actions
};

/// mean_i [alpha logpi(a_i|s_i) - min(Q1, Q2)(s_i, a_i)] with reparameterized
/// a_i = tanh(mean + std * noise_i); gradient with respect to actor params only.
inline ActorLoss actor_loss(const SacAgent& agent, const Mat& states, const Mat& noise) {
    const SacConfig& cfg = agent.config();
    MlpCache actor_cache;
    const ActorHead head = actor_head(agent.actor, cfg, states, &actor_cache);
    const ActorSample smp = squash(head, noise);
    const Mat& a = smp.actions;
    const double n = static_cast<double>(states.cols());
    const double alpha = agent.alpha();

    MlpCache c1, c2;
    const Mat x = critic_input(states, a);
    const Eigen::RowVectorXd v1 = agent.q1.forward(x, &c1).row(0);
    const Eigen::RowVectorXd v2 = agent.q2.forward(x, &c2).row(0);
    Eigen::RowVectorXd up1(v1.size()), up2(v1.size());
    for (Eigen::Index i = 0; i < v1.size(); ++i) {
        const bool first = v1[i] <= v2[i];
        up1[i] = first ? -1.0 / n : 0.0;
        up2[i] = first ? 0.0 : -1.0 / n;
    }
    Vec scratch1, scratch2;
    const Mat gx1 = agent.q1.backward(c1, Mat(up1), scratch1);
    const Mat gx2 = agent.q2.backward(c2, Mat(up2), scratch2);
    const auto d_a = a.rows();
    const Eigen::ArrayXXd g_a = (gx1.bottomRows(d_a) + gx2.bottomRows(d_a)).array();

    const Eigen::ArrayXXd sigma = head.log_std.array().exp();
    const Eigen::ArrayXXd one_m_a2 = 1.0 - a.array().square();
    const Eigen::ArrayXXd d_mean = (alpha / n) * 2.0 * a.array() + g_a * one_m_a2;
    const Eigen::ArrayXXd d_log_std =
        (alpha / n) * (-1.0 + 2.0 * a.array() * sigma * noise.array()) + g_a * one_m_a2 * sigma * noise.array();
    const double half = 0.5 * (cfg.log_std_max - cfg.log_std_min);
    const Eigen::ArrayXXd d_raw = d_log_std * half * (1.0 - head.raw_log_std.array().tanh().square());

    Mat upstream(2 * d_a, states.cols());
    upstream.topRows(d_a) = d_mean.matrix();
    upstream.bottomRows(d_a) = d_raw.matrix();
    ActorLoss r;
    r.grad = Vec::Zero(static_cast<Eigen::Index>(agent.actor.params().total_count()));
    agent.actor.backward(actor_cache, upstream, r.grad);
    r.loss = (alpha * smp.logp.transpose() - v1.cwiseMin(v2)).mean();
    r.logp = smp.logp;
    return r;
}

/// -log_alpha * mean(logp + target_entropy), logp treated as a constant.
inline LossGrad alpha_loss(double log_alpha, const Vec& logp, double target_entropy) {
    const double m = (logp.array() + target_entropy).mean();
    return LossGrad{-log_alpha * m, Vec::Constant(1, -m)};
}

/// target <- tau * target + (1 - tau) * online.
inline void polyak(ParamSet& target, const ParamSet& online, double tau) {
    if (target.total_count() != online.total_count()) throw DimensionError("polyak: shape mismatch");
    target.values = tau * target.values + (1.0 - tau) * online.values;
}

/// One gradient step on each critic, the actor and the temperature, then a
/// Polyak update of both target critics.
inline SacMetrics sac_update(SacAgent& agent, const TransitionBatch& batch, Rng& rng) {
    if (batch.size() == 0) throw StateError("sac_update: empty batch");
    const SacConfig& cfg = agent.config();
    SacMetrics m;

    const Vec y = critic_targets(agent, batch, rng);
    const LossGrad l1 = critic_loss(agent.q1, batch.states, batch.actions, y);
    const LossGrad l2 = critic_loss(agent.q2, batch.states, batch.actions, y);
    m.q_mean = critic_values(agent.q1, batch.states, batch.actions).mean();
    m.critic_loss = 0.5 * (l1.loss + l2.loss);
    if (!std::isfinite(m.critic_loss) || !std::isfinite(m.q_mean))
        throw NonFiniteError("sac_update: non-finite critic loss");
    adam_step(agent.q1_opt, agent.q1.params().values, l1.grad);
    adam_step(agent.q2_opt, agent.q2.params().values, l2.grad);

    const Mat noise = standard_normal(static_cast<Eigen::Index>(agent.action_dim()), batch.states.cols(), rng);
    const ActorLoss la = actor_loss(agent, batch.states, noise);
    m.actor_loss = la.loss;
    if (!std::isfinite(m.actor_loss)) throw NonFiniteError("sac_update: non-finite actor loss");
    adam_step(agent.actor_opt, agent.actor.params().values, la.grad);

    const LossGrad lt = alpha_loss(agent.log_alpha, la.logp, cfg.target_entropy);
    Vec la_vec = Vec::Constant(1, agent.log_alpha);
    adam_step(agent.alpha_opt, la_vec, lt.grad);
    agent.log_alpha = la_vec[0];
    m.alpha = agent.alpha();

    polyak(agent.q1_target.params(), agent.q1.params(), cfg.tau);
    polyak(agent.q2_target.params(), agent.q2.params(), cfg.tau);
    return m;
}

}  // namespace ftfl
