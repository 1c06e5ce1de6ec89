#pragma once

// Small fully-connected networks with exact reverse-mode gradients and Adam.
//
// Batches are column-major: an input matrix is (input_dim x n) and every
// column is one sample. All math is double precision.

#include <cmath>
#include <cstddef>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ftfl/error.hpp"

namespace ftfl {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Engine used for every stochastic component; seeded streams are
/// reproducible bit-for-bit within one build.
using Rng = std::mt19937_64;

enum class Activation { relu, swish, tanh };
enum class OutputActivation { identity, tanh };

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// log(1 + exp(x)) without overflow.
inline double softplus(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double activation_apply(Activation kind, double x) {
    switch (kind) {
    case Activation::relu: return x > 0.0 ? x : 0.0;
    case Activation::swish: return x * sigmoid(x);
    case Activation::tanh: return std::tanh(x);
    }
    return x;
}

// Derivative with respect to the pre-activation.
inline double activation_derivative(Activation kind, double x) {
    switch (kind) {
    case Activation::relu: return x > 0.0 ? 1.0 : 0.0;
    case Activation::swish: {
        const double s = sigmoid(x);
        return s * (1.0 + x * (1.0 - s));
    }
    case Activation::tanh: {
        const double t = std::tanh(x);
        return 1.0 - t * t;
    }
    }
    return 1.0;
}

struct MlpSpec {
    std::size_t input_dim = 1;
    std::vector<std::size_t> hidden_dims{1};
    std::size_t output_dim = 1;
    Activation activation = Activation::relu;
    OutputActivation output_activation = OutputActivation::identity;
    /// Standardize every hidden layer's post-activation with a learned gain
    /// and shift.
    bool layer_norm = false;

    void validate() const {
        if (input_dim == 0 || output_dim == 0) throw ConfigError("mlp: dims must be >= 1");
        if (hidden_dims.empty()) throw ConfigError("mlp: hidden_dims must be nonempty");
        for (auto h : hidden_dims)
            if (h == 0) throw ConfigError("mlp: hidden dims must be >= 1");
    }

    std::size_t layer_count() const { return hidden_dims.size() + 1; }
    std::size_t layer_in(std::size_t l) const { return l == 0 ? input_dim : hidden_dims[l - 1]; }
    std::size_t layer_out(std::size_t l) const {
        return l + 1 == layer_count() ? output_dim : hidden_dims[l];
    }
    bool is_hidden(std::size_t l) const { return l + 1 < layer_count(); }
};

/// Offsets of each layer's blocks inside the flat parameter vector.
struct LayerOffsets {
    std::size_t weight = 0;  // (out x in), column-major
    std::size_t bias = 0;
    std::size_t gain = 0;  // layer-norm scale, hidden layers only
    std::size_t shift = 0;
};

inline std::vector<LayerOffsets> param_layout(const MlpSpec& spec, std::size_t* total = nullptr) {
    std::vector<LayerOffsets> out(spec.layer_count());
    std::size_t off = 0;
    for (std::size_t l = 0; l < spec.layer_count(); ++l) {
        const auto in = spec.layer_in(l), o = spec.layer_out(l);
        out[l].weight = off;
        off += in * o;
        out[l].bias = off;
        off += o;
        if (spec.layer_norm && spec.is_hidden(l)) {
            out[l].gain = off;
            off += o;
            out[l].shift = off;
            off += o;
        }
    }
    if (total) *total = off;
    return out;
}

inline std::size_t param_count(const MlpSpec& spec) {
    std::size_t total = 0;
    param_layout(spec, &total);
    return total;
}

/// Flat parameter vector; the layout is fixed by the owning MlpSpec.
struct ParamSet {
    Vec values;

    std::size_t total_count() const { return static_cast<std::size_t>(values.size()); }
    bool all_finite() const { return values.allFinite(); }

    static ParamSet zeros(std::size_t n) { return ParamSet{Vec::Zero(static_cast<Eigen::Index>(n))}; }
};

/// Weights and biases uniform in +-1/sqrt(fan_in); layer-norm gain 1, shift 0.
template <typename Rng>
ParamSet init_params(const MlpSpec& spec, Rng& rng) {
    spec.validate();
    std::size_t total = 0;
    const auto layout = param_layout(spec, &total);
    ParamSet p = ParamSet::zeros(total);
    for (std::size_t l = 0; l < spec.layer_count(); ++l) {
        const auto in = spec.layer_in(l), o = spec.layer_out(l);
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        std::uniform_real_distribution<double> u(-bound, bound);
        for (std::size_t i = 0; i < in * o + o; ++i) p.values[static_cast<Eigen::Index>(layout[l].weight + i)] = u(rng);
        if (spec.layer_norm && spec.is_hidden(l))
            p.values.segment(static_cast<Eigen::Index>(layout[l].gain), static_cast<Eigen::Index>(o)).setOnes();
    }
    return p;
}

/// Intermediate values of a batched forward pass, consumed by backward.
struct MlpCache {
    std::vector<Mat> inputs;  // input to each layer
    std::vector<Mat> pre;     // pre-activation of each layer
    std::vector<Mat> normed;  // standardized hidden activations (layer norm only)
    std::vector<Vec> inv_std; // per-sample 1/std (layer norm only)
    Mat output;
};

class Mlp {
public:
    static constexpr double kLayerNormEps = 1e-5;

    Mlp() = default;
    Mlp(MlpSpec spec, ParamSet params) : spec_(std::move(spec)), params_(std::move(params)) {
        spec_.validate();
        std::size_t total = 0;
        layout_ = param_layout(spec_, &total);
        if (params_.total_count() != total)
            throw DimensionError("mlp: parameter count " + std::to_string(params_.total_count()) +
                                 " does not match spec (" + std::to_string(total) + ")");
    }
    template <typename Rng>
    static Mlp random(const MlpSpec& spec, Rng& rng) {
        return Mlp(spec, init_params(spec, rng));
    }

    const MlpSpec& spec() const { return spec_; }
    const ParamSet& params() const { return params_; }
    ParamSet& params() { return params_; }

    Mat forward(const Mat& x) const { return forward(x, nullptr); }

    Mat forward(const Mat& x, MlpCache* cache) const {
        if (static_cast<std::size_t>(x.rows()) != spec_.input_dim)
            throw DimensionError("mlp forward: input has " + std::to_string(x.rows()) + " rows, expected " +
                                 std::to_string(spec_.input_dim));
        const auto layers = spec_.layer_count();
        if (cache) {
            cache->inputs.assign(layers, Mat());
            cache->pre.assign(layers, Mat());
            cache->normed.assign(layers, Mat());
            cache->inv_std.assign(layers, Vec());
        }
        Mat h = x;
        for (std::size_t l = 0; l < layers; ++l) {
            Mat pre = weight(l) * h;
            pre.colwise() += bias(l);
            if (cache) {
                cache->inputs[l] = std::move(h);
                cache->pre[l] = pre;
            }
            if (spec_.is_hidden(l)) {
                h = pre.unaryExpr([k = spec_.activation](double v) { return activation_apply(k, v); });
                if (spec_.layer_norm) {
                    Vec inv_std;
                    Mat z = standardize(h, inv_std);
                    if (cache) {
                        cache->normed[l] = z;
                        cache->inv_std[l] = inv_std;
                    }
                    h = (z.array().colwise() * gain(l).array()).matrix();
                    h.colwise() += shift(l);
                }
            } else if (spec_.output_activation == OutputActivation::tanh) {
                h = pre.array().tanh().matrix();
            } else {
                h = std::move(pre);
            }
        }
        if (cache) cache->output = h;
        return h;
    }

    /// Accumulates d(sum of output .* upstream)/d(params) into param_grad and
    /// returns the gradient with respect to the input batch.
    Mat backward(const MlpCache& cache, const Mat& upstream, Vec& param_grad) const {
        if (upstream.rows() != cache.output.rows() || upstream.cols() != cache.output.cols())
            throw DimensionError("mlp backward: upstream gradient shape mismatch");
        if (param_grad.size() != params_.values.size()) param_grad = Vec::Zero(params_.values.size());
        const auto layers = spec_.layer_count();
        Mat g = upstream;
        for (std::size_t li = layers; li-- > 0;) {
            const auto l = li;
            Mat dpre;
            if (spec_.is_hidden(l)) {
                Mat dh;
                if (spec_.layer_norm) {
                    const Mat& z = cache.normed[l];
                    seg(param_grad, layout_[l].gain, spec_.layer_out(l)) += (g.array() * z.array()).rowwise().sum().matrix();
                    seg(param_grad, layout_[l].shift, spec_.layer_out(l)) += g.rowwise().sum();
                    const Mat dz = (g.array().colwise() * gain(l).array()).matrix();
                    const double f = static_cast<double>(z.rows());
                    const Eigen::RowVectorXd mean_dz = dz.colwise().sum() / f;
                    const Eigen::RowVectorXd mean_dzz = (dz.array() * z.array()).colwise().sum().matrix() / f;
                    dh = dz;
                    dh.rowwise() -= mean_dz;
                    dh -= (z.array().rowwise() * mean_dzz.array()).matrix();
                    dh = (dh.array().rowwise() * cache.inv_std[l].transpose().array()).matrix();
                } else {
                    dh = std::move(g);
                }
                dpre = dh.array() *
                       cache.pre[l].unaryExpr([k = spec_.activation](double v) { return activation_derivative(k, v); }).array();
            } else if (spec_.output_activation == OutputActivation::tanh) {
                dpre = g.array() * (1.0 - cache.output.array().square());
            } else {
                dpre = std::move(g);
            }
            const auto in = spec_.layer_in(l), o = spec_.layer_out(l);
            Eigen::Map<Mat>(param_grad.data() + layout_[l].weight, static_cast<Eigen::Index>(o),
                            static_cast<Eigen::Index>(in)) += dpre * cache.inputs[l].transpose();
            seg(param_grad, layout_[l].bias, o) += dpre.rowwise().sum();
            g = weight(l).transpose() * dpre;
        }
        return g;
    }

private:
    static Eigen::VectorBlock<Vec> seg(Vec& v, std::size_t off, std::size_t n) {
        return v.segment(static_cast<Eigen::Index>(off), static_cast<Eigen::Index>(n));
    }

    Eigen::Map<const Mat> weight(std::size_t l) const {
        return Eigen::Map<const Mat>(params_.values.data() + layout_[l].weight,
                                     static_cast<Eigen::Index>(spec_.layer_out(l)),
                                     static_cast<Eigen::Index>(spec_.layer_in(l)));
    }
    Eigen::Map<const Vec> bias(std::size_t l) const {
        return Eigen::Map<const Vec>(params_.values.data() + layout_[l].bias,
                                     static_cast<Eigen::Index>(spec_.layer_out(l)));
    }
    Eigen::Map<const Vec> gain(std::size_t l) const {
        return Eigen::Map<const Vec>(params_.values.data() + layout_[l].gain,
                                     static_cast<Eigen::Index>(spec_.layer_out(l)));
    }
    Eigen::Map<const Vec> shift(std::size_t l) const {
        return Eigen::Map<const Vec>(params_.values.data() + layout_[l].shift,
                                     static_cast<Eigen::Index>(spec_.layer_out(l)));
    }

    // Per-column standardization across features.
    static Mat standardize(const Mat& h, Vec& inv_std) {
        const double f = static_cast<double>(h.rows());
        const Eigen::RowVectorXd mean = h.colwise().sum() / f;
        Mat c = h;
        c.rowwise() -= mean;
        const Eigen::RowVectorXd var = c.array().square().colwise().sum().matrix() / f;
        inv_std = (var.array() + kLayerNormEps).rsqrt().matrix().transpose();
        return (c.array().rowwise() * inv_std.transpose().array()).matrix();
    }

    MlpSpec spec_;
    ParamSet params_;
    std::vector<LayerOffsets> layout_;
};

/// Single-sample forward pass.
inline Vec forward(const MlpSpec& spec, const ParamSet& params, const Vec& input) {
    Mlp net(spec, params);
    return net.forward(Mat(input));
}

struct Gradients {
    ParamSet params;
    Vec input;
};

/// Exact gradients of dot(output, upstream) for a single sample.
inline Gradients backward(const MlpSpec& spec, const ParamSet& params, const Vec& input, const Vec& upstream) {
    Mlp net(spec, params);
    MlpCache cache;
    net.forward(Mat(input), &cache);
    if (static_cast<std::size_t>(upstream.size()) != spec.output_dim)
        throw DimensionError("mlp backward: upstream gradient has wrong length");
    Gradients g{ParamSet::zeros(params.total_count()), Vec()};
    g.input = net.backward(cache, Mat(upstream), g.params.values);
    return g;
}

struct AdamState {
    Vec first_moment;
    Vec second_moment;
    std::size_t step_count = 0;
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1.5e-4;

    AdamState() = default;
    AdamState(std::size_t n, double lr_, double beta1_ = 0.9, double beta2_ = 0.999, double eps_ = 1.5e-4)
        : first_moment(Vec::Zero(static_cast<Eigen::Index>(n))),
          second_moment(Vec::Zero(static_cast<Eigen::Index>(n))),
          lr(lr_), beta1(beta1_), beta2(beta2_), eps(eps_) {}
};

/// Bias-corrected Adam; eps is added to sqrt(v_hat).
inline void adam_step(AdamState& state, Vec& params, const Vec& grads) {
    if (grads.size() != params.size() || state.first_moment.size() != params.size())
        throw DimensionError("adam: shape mismatch");
    if (!grads.allFinite()) throw NonFiniteError("adam: non-finite gradient");
    ++state.step_count;
    const double t = static_cast<double>(state.step_count);
    state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads;
    state.second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads.cwiseAbs2();
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    params.array() -= state.lr * (state.first_moment.array() / c1) /
                      ((state.second_moment.array() / c2).sqrt() + state.eps);
}

inline void adam_step(AdamState& state, ParamSet& params, const ParamSet& grads) {
    adam_step(state, params.values, grads.values);
}

}  // namespace ftfl
