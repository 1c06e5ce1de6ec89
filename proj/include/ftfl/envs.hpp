#pragma once

// Desk-scale continuous-control environments.
//
// Each environment keeps an internal physical state separate from the
// observation it emits. Stepping is a pure function of (state, action); all
// randomness lives in reset(). Actions outside [-1, 1] are clipped.

#include <cmath>
#include <map>
#include <memory>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "ftfl/error.hpp"
#include "ftfl/nn.hpp"

namespace ftfl {

using EnvParams = std::map<std::string, double>;

struct EnvSpec {
    std::string name;
    std::size_t d_s = 0;
    std::size_t d_a = 0;
    std::size_t horizon = 200;
    double dt = 0.02;
    EnvParams params;
};

struct StepResult {
    Vec next_obs;
    double reward = 0.0;
    bool terminal = false;
    bool truncated = false;
};

class Environment {
public:
    virtual ~Environment() = default;

    const EnvSpec& spec() const { return spec_; }

    template <typename Rng>
    Vec reset(Rng& rng) {
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        std::vector<double> draws(reset_draws());
        for (auto& d : draws) d = u(rng);
        steps_ = 0;
        reset_from(draws);
        return observe();
    }

    StepResult step(const Vec& action) {
        if (static_cast<std::size_t>(action.size()) != spec_.d_a)
            throw DimensionError("env step: action has wrong length");
        const Vec a = action.cwiseMax(-1.0).cwiseMin(1.0);
        StepResult r;
        r.reward = advance(a);
        r.next_obs = observe();
        ++steps_;
        r.terminal = false;
        r.truncated = steps_ >= spec_.horizon;
        return r;
    }

    std::size_t steps() const { return steps_; }
    virtual Vec observe() const = 0;
    virtual std::unique_ptr<Environment> clone() const = 0;

protected:
    explicit Environment(EnvSpec spec) : spec_(std::move(spec)) {}

    // Number of U(-1, 1) draws consumed by reset_from.
    virtual std::size_t reset_draws() const = 0;
    virtual void reset_from(const std::vector<double>& draws) = 0;
    // Moves the physical state one step; returns the reward.
    virtual double advance(const Vec& clipped_action) = 0;

    double param(const std::string& key) const { return spec_.params.at(key); }

    EnvSpec spec_;
    std::size_t steps_ = 0;
};

namespace detail {

inline EnvParams merge_params(const std::string& env, EnvParams defaults, const EnvParams& overrides) {
    for (const auto& [k, v] : overrides) {
        auto it = defaults.find(k);
        if (it == defaults.end()) throw ConfigError("env " + env + ": unknown parameter '" + k + "'");
        if (!std::isfinite(v)) throw ConfigError("env " + env + ": parameter '" + k + "' must be finite");
        it->second = v;
    }
    return defaults;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Pendulum swing-up. theta = 0 is upright; obs = (cos, sin, theta_dot);
// reward (1 + cos theta) / 2.
class PendulumSwingup final : public Environment {
public:
    struct State {
        double theta = std::numbers::pi;
        double theta_dot = 0.0;
    };

    static EnvParams defaults() {
        return {{"g", 9.81}, {"l", 1.0}, {"m", 1.0}, {"u_max", 2.0}, {"damping", 0.1}};
    }

    explicit PendulumSwingup(const EnvParams& overrides = {})
        : Environment(EnvSpec{"pendulum_swingup", 3, 1, 200, 0.02,
                              detail::merge_params("pendulum_swingup", defaults(), overrides)}) {}

    /// Semi-implicit Euler step.
    static State transition(const EnvParams& p, double dt, const State& s, double a) {
        const double g = p.at("g"), l = p.at("l"), m = p.at("m");
        const double acc = (g / l) * std::sin(s.theta) + a * p.at("u_max") / (m * l * l) - p.at("damping") * s.theta_dot;
        State n;
        n.theta_dot = s.theta_dot + dt * acc;
        n.theta = s.theta + dt * n.theta_dot;
        return n;
    }

    static double reward(const State& s) { return 0.5 * (1.0 + std::cos(s.theta)); }

    Vec observe() const override { return Vec{{std::cos(state_.theta), std::sin(state_.theta), state_.theta_dot}}; }
    std::unique_ptr<Environment> clone() const override { return std::make_unique<PendulumSwingup>(*this); }

    const State& state() const { return state_; }
    void set_state(const State& s) { state_ = s; }

protected:
    std::size_t reset_draws() const override { return 1; }
    void reset_from(const std::vector<double>& d) override { state_ = State{std::numbers::pi + 0.1 * d[0], 0.0}; }
    double advance(const Vec& a) override {
        state_ = transition(spec_.params, spec_.dt, state_, a[0]);
        return reward(state_);
    }

private:
    State state_;
};

// ---------------------------------------------------------------------------
// Linear system whose states live at magnitude O(S) while the reward stays in
// (0, 1]:  x' = A x + B (a S) + bias S,  A = rho * rotation(angle).
// obs = x; reward = exp(-(x1/S - 1)^2 / 0.25).
class ScaleMismatch final : public Environment {
public:
    using State = Eigen::Vector2d;

    static EnvParams defaults() {
        return {{"S", 100.0},   {"rho", 0.95},  {"angle", 0.2}, {"b1", 0.3},
                {"b2", -0.2},   {"bias1", 0.01}, {"bias2", 0.0}};
    }

    explicit ScaleMismatch(const EnvParams& overrides = {})
        : Environment(EnvSpec{"scale_mismatch", 2, 1, 200, 0.02,
                              detail::merge_params("scale_mismatch", defaults(), overrides)}) {
        if (!(param("S") > 0.0)) throw ConfigError("env scale_mismatch: S must be positive");
        if (!(std::abs(param("rho")) < 1.0)) throw ConfigError("env scale_mismatch: |rho| must be < 1");
    }

    static Eigen::Matrix2d dynamics_matrix(const EnvParams& p) {
        const double r = p.at("rho"), c = std::cos(p.at("angle")), s = std::sin(p.at("angle"));
        Eigen::Matrix2d A;
        A << r * c, -r * s, r * s, r * c;
        return A;
    }

    static State transition(const EnvParams& p, const State& x, double a) {
        const double S = p.at("S");
        const Eigen::Vector2d B(p.at("b1"), p.at("b2"));
        const Eigen::Vector2d bias(p.at("bias1"), p.at("bias2"));
        return dynamics_matrix(p) * x + B * (a * S) + bias * S;
    }

    static double reward(const EnvParams& p, const State& x) {
        const double u = x[0] / p.at("S") - 1.0;
        return std::exp(-(u * u) / 0.25);
    }

    Vec observe() const override { return Vec(state_); }
    std::unique_ptr<Environment> clone() const override { return std::make_unique<ScaleMismatch>(*this); }

    const State& state() const { return state_; }
    void set_state(const State& s) { state_ = s; }

protected:
    std::size_t reset_draws() const override { return 2; }
    void reset_from(const std::vector<double>& d) override {
        const double S = param("S");
        state_ = State(0.01 * S * d[0], 0.01 * S * d[1]);
    }
    double advance(const Vec& a) override {
        state_ = transition(spec_.params, state_, a[0]);
        return reward(spec_.params, state_);
    }

private:
    State state_ = State::Zero();
};

// ---------------------------------------------------------------------------
// Vertical hopper with a stiff penalty-spring ground. The contact channel
// c = k * max(0, -h) is exactly zero while airborne.
// obs = (h, v, c), or (h, v) without the contact sensor.
class ContactHopperLite final : public Environment {
public:
    struct State {
        double h = 1.0;
        double v = 0.0;
    };

    static EnvParams defaults() {
        return {{"g", 9.81},      {"u_max", 20.0},   {"k", 1000.0},          {"ground_damping", 30.0},
                {"h_target", 1.0}, {"include_contact", 1.0}};
    }

    explicit ContactHopperLite(const EnvParams& overrides = {})
        : Environment(make_spec(overrides)) {}

    static State transition(const EnvParams& p, double dt, const State& s, double a) {
        double acc = a * p.at("u_max") - p.at("g");
        if (s.h < 0.0) acc += p.at("k") * (-s.h) - p.at("ground_damping") * s.v;
        State n;
        n.v = s.v + dt * acc;
        n.h = s.h + dt * n.v;
        return n;
    }

    static double contact(const EnvParams& p, const State& s) { return p.at("k") * std::max(0.0, -s.h); }

    static double reward(const EnvParams& p, const State& s) {
        const double e = s.h - p.at("h_target");
        return std::exp(-(e * e) / 0.1);
    }

    bool include_contact() const { return param("include_contact") != 0.0; }

    Vec observe() const override {
        if (include_contact()) return Vec{{state_.h, state_.v, contact(spec_.params, state_)}};
        return Vec{{state_.h, state_.v}};
    }
    std::unique_ptr<Environment> clone() const override { return std::make_unique<ContactHopperLite>(*this); }

    const State& state() const { return state_; }
    void set_state(const State& s) { state_ = s; }

protected:
    std::size_t reset_draws() const override { return 1; }
    void reset_from(const std::vector<double>& d) override { state_ = State{param("h_target") + 0.05 * d[0], 0.0}; }
    double advance(const Vec& a) override {
        state_ = transition(spec_.params, spec_.dt, state_, a[0]);
        return reward(spec_.params, state_);
    }

private:
    static EnvSpec make_spec(const EnvParams& overrides) {
        auto p = detail::merge_params("contact_hopper_lite", defaults(), overrides);
        const double ic = p.at("include_contact");
        if (ic != 0.0 && ic != 1.0) throw ConfigError("env contact_hopper_lite: include_contact must be 0 or 1");
        return EnvSpec{"contact_hopper_lite", ic != 0.0 ? 3u : 2u, 1, 200, 0.02, std::move(p)};
    }

    State state_;
};

// ---------------------------------------------------------------------------
// 1-D runner with quadratic drag and an unbounded velocity reward.
// obs = (v, sin(omega x), cos(omega x)); reward = v' - 0.1 a^2.
class GymLikeRunner final : public Environment {
public:
    struct State {
        double x = 0.0;
        double v = 0.0;
    };

    static EnvParams defaults() { return {{"u_max", 10.0}, {"drag", 0.5}, {"omega", 1.0}}; }

    explicit GymLikeRunner(const EnvParams& overrides = {})
        : Environment(EnvSpec{"gym_like_runner", 3, 1, 200, 0.02,
                              detail::merge_params("gym_like_runner", defaults(), overrides)}) {
        if (!(param("drag") > 0.0)) throw ConfigError("env gym_like_runner: drag must be positive");
    }

    static State transition(const EnvParams& p, double dt, const State& s, double a) {
        State n;
        n.v = s.v + dt * (a * p.at("u_max") - p.at("drag") * s.v * std::abs(s.v));
        n.x = s.x + dt * n.v;
        return n;
    }

    static double reward(double next_v, double a) { return next_v - 0.1 * a * a; }

    Vec observe() const override {
        const double w = param("omega");
        return Vec{{state_.v, std::sin(w * state_.x), std::cos(w * state_.x)}};
    }
    std::unique_ptr<Environment> clone() const override { return std::make_unique<GymLikeRunner>(*this); }

    const State& state() const { return state_; }
    void set_state(const State& s) { state_ = s; }

protected:
    std::size_t reset_draws() const override { return 1; }
    void reset_from(const std::vector<double>& d) override { state_ = State{0.1 * d[0], 0.0}; }
    double advance(const Vec& a) override {
        state_ = transition(spec_.params, spec_.dt, state_, a[0]);
        return reward(state_.v, a[0]);
    }

private:
    State state_;
};

// ---------------------------------------------------------------------------
// Trivial env whose state never changes: s' = s, reward (1 + s1) / 2.
class StaticEnv final : public Environment {
public:
    explicit StaticEnv(const EnvParams& overrides = {})
        : Environment(EnvSpec{"static", 2, 1, 200, 0.02, detail::merge_params("static", {}, overrides)}) {}

    Vec observe() const override { return state_; }
    std::unique_ptr<Environment> clone() const override { return std::make_unique<StaticEnv>(*this); }

protected:
    std::size_t reset_draws() const override { return 2; }
    void reset_from(const std::vector<double>& d) override { state_ = Vec{{d[0], d[1]}}; }
    double advance(const Vec&) override { return 0.5 * (1.0 + state_[0]); }

private:
    Vec state_ = Vec::Zero(2);
};

inline const std::vector<std::string>& env_names() {
    static const std::vector<std::string> names{"pendulum_swingup", "scale_mismatch", "contact_hopper_lite",
                                                "gym_like_runner", "static"};
    return names;
}

/// Environments whose rewards are bounded in [0, 1].
inline bool is_bounded_reward_env(const std::string& name) { return name != "gym_like_runner"; }

inline std::unique_ptr<Environment> make_env(const std::string& name, const EnvParams& params = {}) {
    if (name == "pendulum_swingup") return std::make_unique<PendulumSwingup>(params);
    if (name == "scale_mismatch") return std::make_unique<ScaleMismatch>(params);
    if (name == "contact_hopper_lite") return std::make_unique<ContactHopperLite>(params);
    if (name == "gym_like_runner") return std::make_unique<GymLikeRunner>(params);
    if (name == "static") return std::make_unique<StaticEnv>(params);
    throw ConfigError("unknown env '" + name + "'");
}

/// Parameter names accepted by an environment.
inline std::set<std::string> env_param_names(const std::string& name) {
    EnvParams d;
    if (name == "pendulum_swingup") d = PendulumSwingup::defaults();
    else if (name == "scale_mismatch") d = ScaleMismatch::defaults();
    else if (name == "contact_hopper_lite") d = ContactHopperLite::defaults();
    else if (name == "gym_like_runner") d = GymLikeRunner::defaults();
    else if (name != "static") throw ConfigError("unknown env '" + name + "'");
    std::set<std::string> out;
    for (const auto& [k, v] : d) out.insert(k);
    return out;
}

}  // namespace ftfl
