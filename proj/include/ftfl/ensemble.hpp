#pragma once

// Probabilistic ensemble world model. Each member regresses the vector
// [state target | reward] with a diagonal Gaussian head (mean, log-variance)
// trained by heteroskedastic negative log-likelihood.
//
// Two switches control the regression target:
//   target_mode  residual (s' - s) or direct (s')
//   target_norm  unit-normalize state and reward targets with their own stats

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "ftfl/error.hpp"
#include "ftfl/nn.hpp"
#include "ftfl/normalization.hpp"
#include "ftfl/replay.hpp"

namespace ftfl {

enum class TargetMode { residual, direct };

inline const char* to_string(TargetMode m) { return m == TargetMode::residual ? "residual" : "direct"; }

struct EnsembleConfig {
    std::size_t n_members = 7;
    std::size_t n_elites = 5;
    std::vector<std::size_t> hidden_dims{200, 200};
    Activation activation = Activation::swish;
    TargetMode target_mode = TargetMode::residual;
    bool target_norm = false;
    double logvar_min = -5.0;
    double logvar_max = 0.5;
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1.5e-4;
    std::size_t retrain_interval = 250;
    std::size_t batch_size = 256;
    double holdout_fraction = 0.1;
    std::size_t max_epochs = 8;
    std::size_t patience = 1;
    /// Relative holdout-MSE improvement below which an epoch counts as stalled.
    double min_improvement = 1e-3;
    /// Cap on minibatches per epoch; 0 means one full pass over the training split.
    std::size_t max_batches_per_epoch = 0;

    void validate() const {
        if (n_members == 0) throw ConfigError("ensemble.n_members must be >= 1");
        if (n_elites == 0 || n_elites > n_members) throw ConfigError("ensemble.n_elites must be in [1, n_members]");
        if (!(logvar_min < logvar_max)) throw ConfigError("ensemble.logvar_min must be < logvar_max");
        if (!(holdout_fraction > 0.0 && holdout_fraction < 0.5))
            throw ConfigError("ensemble.holdout_fraction must be in (0, 0.5)");
        if (batch_size == 0) throw ConfigError("ensemble.batch_size must be >= 1");
        if (max_epochs == 0) throw ConfigError("ensemble.max_epochs must be >= 1");
        if (patience == 0) throw ConfigError("ensemble.patience must be >= 1");
        if (retrain_interval == 0) throw ConfigError("ensemble.retrain_interval must be >= 1");
        if (!(lr > 0.0)) throw ConfigError("ensemble.lr must be positive");
        for (auto h : hidden_dims)
            if (h == 0) throw ConfigError("ensemble.hidden_dims must be >= 1");
        if (hidden_dims.empty()) throw ConfigError("ensemble.hidden_dims must be nonempty");
    }
};

/// One Gaussian prediction over [state target | reward] in target space.
struct EnsemblePrediction {
    Vec mean;
    Vec logvar;
};

// ---------------------------------------------------------------------------
// Targets

/// State-target statistics are only meaningful for the mode they were fitted on.
struct TargetStats {
    TargetMode mode = TargetMode::residual;
    RunningStats state;
    RunningStats reward;
};

inline Mat raw_state_targets(const TransitionBatch& batch, TargetMode mode) {
    return mode == TargetMode::residual ? Mat(batch.next_states - batch.states) : batch.next_states;
}

inline TargetStats fit_target_stats(const TransitionBatch& batch, TargetMode mode) {
    return TargetStats{mode, fit_stats(raw_state_targets(batch, mode)), fit_stats(Mat(batch.rewards.transpose()))};
}

/// Rows of the returned (d_s + 1) x n matrix are [state target | reward].
inline Mat build_targets(const TransitionBatch& batch, TargetMode mode, bool norm, const TargetStats& stats) {
    if (stats.mode != mode) throw ConfigError("build_targets: stats were fitted for a different target mode");
    const auto d_s = batch.states.rows();
    const auto n = static_cast<Eigen::Index>(batch.size());
    Mat state_t = raw_state_targets(batch, mode);
    Mat reward_t = batch.rewards.transpose();
    if (norm) {
        state_t = normalize(state_t, stats.state);
        reward_t = normalize(reward_t, stats.reward);
    }
    Mat out(d_s + 1, n);
    out.topRows(d_s) = state_t;
    out.bottomRows(1) = reward_t;
    return out;
}

// ---------------------------------------------------------------------------
// Loss

/// Soft clamp into (lo, hi): l = hi - softplus(hi - raw); l = lo + softplus(l - lo).
inline double bound_logvar(double raw, double lo, double hi) {
    const double upper = hi - softplus(hi - raw);
    return lo + softplus(upper - lo);
}

/// d bound_logvar / d raw.
inline double bound_logvar_derivative(double raw, double lo, double hi) {
    const double upper = hi - softplus(hi - raw);
    return sigmoid(hi - raw) * sigmoid(upper - lo);
}

inline Vec bound_logvar(const Vec& raw, double lo, double hi) {
    return raw.unaryExpr([=](double r) { return bound_logvar(r, lo, hi); });
}

inline Mat bound_logvar(const Mat& raw, double lo, double hi) {
    return raw.unaryExpr([=](double r) { return bound_logvar(r, lo, hi); });
}

/// Per-dimension loss split: error term (mu - t)^2 exp(-l), variance term l.
struct NllParts {
    double error = 0.0;
    double variance = 0.0;
    double total() const { return error + variance; }
};

/// Mean over dimensions of (mu - t)^2 exp(-l) + l. The ln(2 pi) constant is dropped.
inline NllParts gaussian_nll_parts(const EnsemblePrediction& pred, const Vec& target) {
    if (pred.mean.size() != target.size() || pred.logvar.size() != target.size())
        throw DimensionError("gaussian_nll: length mismatch");
    if (!pred.mean.allFinite() || !pred.logvar.allFinite() || !target.allFinite())
        throw NonFiniteError("gaussian_nll: non-finite input");
    const double d = static_cast<double>(target.size());
    NllParts p;
    p.error = ((pred.mean - target).array().square() * (-pred.logvar.array()).exp()).sum() / d;
    p.variance = pred.logvar.sum() / d;
    return p;
}

inline double gaussian_nll(const EnsemblePrediction& pred, const Vec& target) {
    return gaussian_nll_parts(pred, target).total();
}

struct NllGrad {
    double loss = 0.0;
    Mat d_mean;    // same shape as the means
    Mat d_rawvar;  // gradient with respect to the unbounded log-variance
};

/// Batched NLL (mean over dims and samples) through the log-variance bound,
/// with gradients. `mean` and `raw_logvar` are (D x n).
inline NllGrad gaussian_nll_batch(const Mat& mean, const Mat& raw_logvar, const Mat& target, double lo, double hi) {
    if (mean.rows() != target.rows() || mean.cols() != target.cols() || raw_logvar.rows() != mean.rows() ||
        raw_logvar.cols() != mean.cols())
        throw DimensionError("gaussian_nll_batch: shape mismatch");
    const double scale = 1.0 / static_cast<double>(mean.size());
    const Mat logvar = bound_logvar(raw_logvar, lo, hi);
    const Eigen::ArrayXXd inv_var = (-logvar.array()).exp();
    const Eigen::ArrayXXd diff = (mean - target).array();
    NllGrad g;
    g.loss = ((diff.square() * inv_var) + logvar.array()).sum() * scale;
    g.d_mean = (2.0 * diff * inv_var * scale).matrix();
    const Eigen::ArrayXXd dl = (1.0 - diff.square() * inv_var) * scale;
    g.d_rawvar = (dl * raw_logvar.unaryExpr([=](double r) { return bound_logvar_derivative(r, lo, hi); }).array()).matrix();
    if (!std::isfinite(g.loss)) throw NonFiniteError("ensemble: non-finite NLL");
    return g;
}

// ---------------------------------------------------------------------------
// Elites

/// Indices of the k smallest values, ties broken by lower index; returned ascending.
inline std::vector<std::size_t> select_elites(const std::vector<double>& holdout_mse, std::size_t k) {
    if (k > holdout_mse.size()) throw ConfigError("select_elites: k exceeds member count");
    for (double v : holdout_mse)
        if (!std::isfinite(v)) throw NonFiniteError("select_elites: non-finite holdout MSE");
    std::vector<std::size_t> order(holdout_mse.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return holdout_mse[a] < holdout_mse[b]; });
    order.resize(k);
    std::sort(order.begin(), order.end());
    return order;
}

// ---------------------------------------------------------------------------
// Model interface used by rollouts and probes.

struct ModelStep {
    Mat next_states;  // d_s x n
    Vec rewards;      // n
};

class WorldModel {
public:
    virtual ~WorldModel() = default;
    virtual bool ready() const = 0;
    /// One-step predictions for each column of (states, actions).
    virtual ModelStep predict_batch(const Mat& states, const Mat& actions, Rng& rng, bool deterministic) const = 0;
};

struct TrainReport {
    std::vector<double> holdout_mse;  // per member, in the training target space
    std::vector<std::size_t> epochs;  // per member
    std::vector<std::size_t> elites;
    std::size_t n_train = 0;
    std::size_t n_holdout = 0;

    std::size_t epochs_run() const { return epochs.empty() ? 0 : *std::max_element(epochs.begin(), epochs.end()); }
    double elite_mse() const {
        double s = 0.0;
        for (auto e : elites) s += holdout_mse[e];
        return elites.empty() ? 0.0 : s / static_cast<double>(elites.size());
    }
    bool operator==(const TrainReport&) const = default;
};

class DynamicsEnsemble final : public WorldModel {
public:
    DynamicsEnsemble(std::size_t state_dim, std::size_t action_dim, EnsembleConfig config, Rng& init_rng)
        : d_s_(state_dim), d_a_(action_dim), config_(std::move(config)) {
        config_.validate();
        MlpSpec spec;
        spec.input_dim = d_s_ + d_a_;
        spec.hidden_dims = config_.hidden_dims;
        spec.output_dim = 2 * (d_s_ + 1);
        spec.activation = config_.activation;
        for (std::size_t m = 0; m < config_.n_members; ++m) {
            members_.push_back(Mlp::random(spec, init_rng));
            optimizers_.emplace_back(members_.back().params().total_count(), config_.lr, config_.beta1, config_.beta2,
                                     config_.eps);
        }
        elites_.resize(config_.n_elites);
        std::iota(elites_.begin(), elites_.end(), 0);
    }

    const EnsembleConfig& config() const { return config_; }
    std::size_t state_dim() const { return d_s_; }
    std::size_t action_dim() const { return d_a_; }
    std::size_t target_dim() const { return d_s_ + 1; }
    bool ready() const override { return trained_; }
    const std::vector<std::size_t>& elites() const { return elites_; }
    const std::vector<Mlp>& members() const { return members_; }
    std::vector<Mlp>& members() { return members_; }
    const RunningStats& state_input_stats() const { return state_in_; }
    const RunningStats& action_input_stats() const { return action_in_; }
    const TargetStats& target_stats() const { return target_stats_; }

    /// Refits all statistics from the buffer's effective contents, then
    /// trains every member (warm start) with improvement-based early stopping
    /// and reselects elites. Statistics stay frozen for the whole call.
    TrainReport train(const ReplayBuffer& buffer, Rng& rng) {
        const std::size_t n = buffer.effective_size();
        if (n < 2 * config_.batch_size)
            throw StateError("train_ensemble: need at least " + std::to_string(2 * config_.batch_size) +
                             " transitions, have " + std::to_string(n));
        const TransitionBatch data = buffer.all();
        refit_stats(data);
        const Mat inputs = normalized_inputs(data.states, data.actions);
        const Mat targets = build_targets(data, config_.target_mode, config_.target_norm, target_stats_);

        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        const std::size_t n_hold =
            std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(config_.holdout_fraction * static_cast<double>(n))));
        const std::vector<std::size_t> hold(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_hold));
        const std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_hold), order.end());
        const Mat hold_x = columns(inputs, hold), hold_y = columns(targets, hold);

        std::size_t batches = (train.size() + config_.batch_size - 1) / config_.batch_size;
        if (config_.max_batches_per_epoch > 0) batches = std::min(batches, config_.max_batches_per_epoch);

        TrainReport report;
        report.n_train = train.size();
        report.n_holdout = n_hold;
        std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
        std::vector<std::size_t> idx(config_.batch_size);
        for (std::size_t m = 0; m < members_.size(); ++m) {
            double best = holdout_mse(m, hold_x, hold_y);
            std::size_t stalled = 0, epoch = 0;
            while (epoch < config_.max_epochs) {
                ++epoch;
                for (std::size_t b = 0; b < batches; ++b) {
                    for (auto& i : idx) i = train[pick(rng)];
                    gradient_step(m, columns(inputs, idx), columns(targets, idx));
                }
                const double mse = holdout_mse(m, hold_x, hold_y);
                if (best - mse < config_.min_improvement * best) {
                    ++stalled;
                } else {
                    stalled = 0;
                }
                best = std::min(best, mse);
                if (stalled >= config_.patience) break;
            }
            report.epochs.push_back(epoch);
            report.holdout_mse.push_back(holdout_mse(m, hold_x, hold_y));
        }
        elites_ = select_elites(report.holdout_mse, config_.n_elites);
        report.elites = elites_;
        trained_ = true;
        return report;
    }

    /// Raw network outputs (target space) of one member for normalized inputs.
    std::pair<Mat, Mat> member_outputs(std::size_t m, const Mat& norm_inputs) const {
        const Mat out = members_.at(m).forward(norm_inputs);
        const auto D = static_cast<Eigen::Index>(target_dim());
        return {out.topRows(D), bound_logvar(Mat(out.bottomRows(D)), config_.logvar_min, config_.logvar_max)};
    }

    /// Gaussian prediction of one member for a single (s, a), in target space.
    EnsemblePrediction member_prediction(std::size_t m, const Vec& s, const Vec& a) const {
        auto [mu, lv] = member_outputs(m, normalized_inputs(Mat(s), Mat(a)));
        return EnsemblePrediction{mu.col(0), lv.col(0)};
    }

    Mat normalized_inputs(const Mat& states, const Mat& actions) const {
        if (static_cast<std::size_t>(states.rows()) != d_s_ || static_cast<std::size_t>(actions.rows()) != d_a_ ||
            states.cols() != actions.cols())
            throw DimensionError("ensemble: input shape mismatch");
        Mat x(static_cast<Eigen::Index>(d_s_ + d_a_), states.cols());
        x.topRows(static_cast<Eigen::Index>(d_s_)) = normalize(states, state_in_);
        x.bottomRows(static_cast<Eigen::Index>(d_a_)) = normalize(actions, action_in_);
        return x;
    }

    /// Maps target-space samples back to (s', r).
    ModelStep decode(const Mat& states, const Mat& z) const {
        const auto ds = static_cast<Eigen::Index>(d_s_);
        Mat state_part = z.topRows(ds);
        Mat reward_part = z.bottomRows(1);
        if (config_.target_norm) {
            state_part = denormalize(state_part, target_stats_.state);
            reward_part = denormalize(reward_part, target_stats_.reward);
        }
        if (config_.target_mode == TargetMode::residual) state_part += states;
        return ModelStep{state_part, reward_part.row(0).transpose()};
    }

    /// Each column uses one elite drawn uniformly; z ~ N(mu, exp(l)) elementwise
    /// (z = mu when deterministic).
    ModelStep predict_batch(const Mat& states, const Mat& actions, Rng& rng, bool deterministic) const override {
        if (!trained_) throw StateError("ensemble: predict called before first training");
        const Mat x = normalized_inputs(states, actions);
        const auto n = x.cols();
        std::uniform_int_distribution<std::size_t> pick(0, elites_.size() - 1);
        std::vector<std::size_t> choice(static_cast<std::size_t>(n));
        for (auto& c : choice) c = pick(rng);

        const auto D = static_cast<Eigen::Index>(target_dim());
        Mat mu(D, n), lv(D, n);
        std::vector<std::size_t> cols;
        for (std::size_t e = 0; e < elites_.size(); ++e) {
            cols.clear();
            for (Eigen::Index j = 0; j < n; ++j)
                if (choice[static_cast<std::size_t>(j)] == e) cols.push_back(static_cast<std::size_t>(j));
            if (cols.empty()) continue;
            auto [m, l] = member_outputs(elites_[e], columns(x, cols));
            for (std::size_t k = 0; k < cols.size(); ++k) {
                mu.col(static_cast<Eigen::Index>(cols[k])) = m.col(static_cast<Eigen::Index>(k));
                lv.col(static_cast<Eigen::Index>(cols[k])) = l.col(static_cast<Eigen::Index>(k));
            }
        }
        Mat z = mu;
        if (!deterministic) {
            std::normal_distribution<double> normal(0.0, 1.0);
            for (Eigen::Index j = 0; j < n; ++j)
                for (Eigen::Index i = 0; i < D; ++i) z(i, j) += std::exp(0.5 * lv(i, j)) * normal(rng);
        }
        return decode(states, z);
    }

    /// One-step prediction for a single (s, a).
    std::pair<Vec, double> predict_step(const Vec& s, const Vec& a, Rng& rng, bool deterministic) const {
        const ModelStep step = predict_batch(Mat(s), Mat(a), rng, deterministic);
        return {step.next_states.col(0), step.rewards[0]};
    }

    /// Mean predicted variance exp(l) over every target dim, every member
    /// (elites and non-elites) and every row of the batch.
    double variance_diagnostic(const TransitionBatch& batch) const {
        if (batch.size() == 0) throw StateError("variance_diagnostic: empty batch");
        if (!trained_) throw StateError("variance_diagnostic: ensemble not trained");
        const Mat x = normalized_inputs(batch.states, batch.actions);
        double total = 0.0;
        for (std::size_t m = 0; m < members_.size(); ++m) total += member_outputs(m, x).second.array().exp().mean();
        return total / static_cast<double>(members_.size());
    }

    /// Mean NLL of each member on a batch, in the current target space.
    double mean_nll(const TransitionBatch& batch) const {
        const Mat x = normalized_inputs(batch.states, batch.actions);
        const Mat y = build_targets(batch, config_.target_mode, config_.target_norm, target_stats_);
        double total = 0.0;
        for (std::size_t m = 0; m < members_.size(); ++m) {
            const Mat out = members_[m].forward(x);
            const auto D = static_cast<Eigen::Index>(target_dim());
            total += gaussian_nll_batch(out.topRows(D), out.bottomRows(D), y, config_.logvar_min, config_.logvar_max).loss;
        }
        return total / static_cast<double>(members_.size());
    }

    /// Refits input and target statistics on `data` (normally the whole
    /// effective buffer).
    void refit_stats(const TransitionBatch& data) {
        state_in_ = fit_stats(data.states);
        action_in_ = fit_stats(data.actions);
        target_stats_ = fit_target_stats(data, config_.target_mode);
    }

    /// One Adam step of member m on a (normalized-input, target) minibatch;
    /// returns the loss before the step.
    double gradient_step(std::size_t m, const Mat& x, const Mat& y) {
        Mlp& net = members_.at(m);
        MlpCache cache;
        const Mat out = net.forward(x, &cache);
        const auto D = static_cast<Eigen::Index>(target_dim());
        const NllGrad g = gaussian_nll_batch(out.topRows(D), out.bottomRows(D), y, config_.logvar_min, config_.logvar_max);
        Mat upstream(out.rows(), out.cols());
        upstream.topRows(D) = g.d_mean;
        upstream.bottomRows(D) = g.d_rawvar;
        Vec grad = Vec::Zero(static_cast<Eigen::Index>(net.params().total_count()));
        net.backward(cache, upstream, grad);
        adam_step(optimizers_[m], net.params().values, grad);
        return g.loss;
    }

    static Mat columns(const Mat& m, const std::vector<std::size_t>& idx) {
        Mat out(m.rows(), static_cast<Eigen::Index>(idx.size()));
        for (std::size_t j = 0; j < idx.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = m.col(static_cast<Eigen::Index>(idx[j]));
        return out;
    }

private:
    double holdout_mse(std::size_t m, const Mat& x, const Mat& y) const {
        const Mat mu = member_outputs(m, x).first;
        return (mu - y).array().square().mean();
    }

    std::size_t d_s_;
    std::size_t d_a_;
    EnsembleConfig config_;
    std::vector<Mlp> members_;
    std::vector<AdamState> optimizers_;
    std::vector<std::size_t> elites_;
    RunningStats state_in_;
    RunningStats action_in_;
    TargetStats target_stats_;
    bool trained_ = false;
};

// ---------------------------------------------------------------------------
// Probes

struct RewardBiasReport {
    double mean_bias = 0.0;  // mean(r_hat - r)
    double rmse = 0.0;
    std::vector<std::pair<double, double>> pairs;  // (real r, predicted r)
};

/// Compares deterministic one-step reward predictions with n rewards drawn
/// uniformly from the buffer's effective contents.
inline RewardBiasReport reward_bias_probe(const WorldModel& model, const ReplayBuffer& buffer, std::size_t n, Rng& rng) {
    if (buffer.effective_size() == 0) throw StateError("reward_bias_probe: empty buffer");
    if (n == 0) throw ConfigError("reward_bias_probe: n must be >= 1");
    const TransitionBatch batch = buffer.sample_batch(n, rng);
    const ModelStep pred = model.predict_batch(batch.states, batch.actions, rng, true);
    RewardBiasReport r;
    const Vec err = pred.rewards - batch.rewards;
    r.mean_bias = err.mean();
    r.rmse = std::sqrt(err.array().square().mean());
    r.pairs.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
        r.pairs.emplace_back(batch.rewards[static_cast<Eigen::Index>(i)], pred.rewards[static_cast<Eigen::Index>(i)]);
    return r;
}

}  // namespace ftfl
