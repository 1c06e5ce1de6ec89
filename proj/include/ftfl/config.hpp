#pragma once

// INI-style experiment configuration: sections [dyna], [sac], [ensemble],
// [env], [eval] with key = value lines. Command-line overrides use the form
// section.key=value and win over the file. Unknown keys are errors.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "ftfl/dyna.hpp"
#include "ftfl/error.hpp"

namespace ftfl {

namespace config_detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    double out = 0.0;
    try {
        out = std::stod(v, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos == 0 || pos != v.size() || !std::isfinite(out))
        throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
    return out;
}

inline std::size_t parse_count(const std::string& key, const std::string& v) {
    if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
        throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
    try {
        return static_cast<std::size_t>(std::stoull(v));
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': integer out of range");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "off" || v == "no") return false;
    throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

inline std::vector<std::size_t> parse_dims(const std::string& key, const std::string& v) {
    std::vector<std::size_t> out;
    std::stringstream ss(v);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(parse_count(key, trim(tok)));
    if (out.empty()) throw ConfigError("config key '" + key + "': expected a comma-separated list");
    return out;
}

inline Activation parse_activation(const std::string& key, const std::string& v) {
    if (v == "relu") return Activation::relu;
    if (v == "swish") return Activation::swish;
    if (v == "tanh") return Activation::tanh;
    throw ConfigError("config key '" + key + "': unknown activation '" + v + "'");
}

inline const char* activation_name(Activation a) {
    switch (a) {
    case Activation::relu: return "relu";
    case Activation::swish: return "swish";
    case Activation::tanh: return "tanh";
    }
    return "?";
}

inline std::string format_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

inline std::string format_dims(const std::vector<std::size_t>& d) {
    std::string s;
    for (std::size_t i = 0; i < d.size(); ++i) s += (i ? "," : "") + std::to_string(d[i]);
    return s;
}

using Setter = std::function<void(ExperimentConfig&, const std::string& key, const std::string& value)>;

inline const std::map<std::string, Setter>& setters() {
    using C = ExperimentConfig;
    static const std::map<std::string, Setter> table = [] {
        std::map<std::string, Setter> t;
        auto count = [&](const std::string& k, std::size_t C::*f) {
            t[k] = [f](C& c, const std::string& key, const std::string& v) { c.*f = parse_count(key, v); };
        };
        auto real = [&](const std::string& k, double C::*f) {
            t[k] = [f](C& c, const std::string& key, const std::string& v) { c.*f = parse_double(key, v); };
        };
        t["dyna.algo"] = [](C& c, const std::string& key, const std::string& v) {
            if (v == "sac") c.algo = Algo::sac;
            else if (v == "mbpo") c.algo = Algo::mbpo;
            else if (v == "ftfl") c.algo = Algo::ftfl;
            else if (v == "ablation") c.algo = Algo::ablation;
            else throw ConfigError("config key '" + key + "': unknown algo '" + v + "'");
        };
        t["dyna.seed"] = [](C& c, const std::string& key, const std::string& v) { c.seed = parse_count(key, v); };
        count("dyna.total_env_steps", &C::total_env_steps);
        real("dyna.synthetic_ratio", &C::synthetic_ratio);
        count("dyna.rollouts_per_step", &C::rollouts_per_step);
        count("dyna.model_horizon", &C::model_horizon);
        count("dyna.replay_capacity", &C::replay_capacity);
        count("dyna.synthetic_capacity", &C::synthetic_capacity);
        count("dyna.reveal_step", &C::reveal_step);
        count("eval.interval", &C::eval_interval);
        count("eval.episodes", &C::eval_episodes);
        count("eval.final_window", &C::final_window);
        count("eval.probe_samples", &C::probe_samples);

        auto sreal = [&](const std::string& k, double SacConfig::*f) {
            t["sac." + k] = [f](C& c, const std::string& key, const std::string& v) { c.sac.*f = parse_double(key, v); };
        };
        auto scount = [&](const std::string& k, std::size_t SacConfig::*f) {
            t["sac." + k] = [f](C& c, const std::string& key, const std::string& v) { c.sac.*f = parse_count(key, v); };
        };
        sreal("gamma", &SacConfig::gamma);
        sreal("tau", &SacConfig::tau);
        sreal("lr", &SacConfig::lr);
        sreal("beta1", &SacConfig::beta1);
        sreal("beta2", &SacConfig::beta2);
        sreal("eps", &SacConfig::eps);
        scount("batch_size", &SacConfig::batch_size);
        scount("updates_per_step", &SacConfig::updates_per_step);
        scount("warmup_steps", &SacConfig::warmup_steps);
        sreal("init_alpha", &SacConfig::init_alpha);
        sreal("log_std_min", &SacConfig::log_std_min);
        sreal("log_std_max", &SacConfig::log_std_max);
        t["sac.target_entropy"] = [](C& c, const std::string& key, const std::string& v) {
            c.sac.target_entropy = v == "auto" ? std::nan("") : parse_double(key, v);
        };
        t["sac.critic_layer_norm"] = [](C& c, const std::string& key, const std::string& v) {
            c.sac.critic_layer_norm = parse_bool(key, v);
        };
        t["sac.hidden_dims"] = [](C& c, const std::string& key, const std::string& v) { c.sac.hidden_dims = parse_dims(key, v); };
        t["sac.activation"] = [](C& c, const std::string& key, const std::string& v) {
            c.sac.activation = parse_activation(key, v);
        };

        auto ereal = [&](const std::string& k, double EnsembleConfig::*f) {
            t["ensemble." + k] = [f](C& c, const std::string& key, const std::string& v) {
                c.ensemble.*f = parse_double(key, v);
            };
        };
        auto ecount = [&](const std::string& k, std::size_t EnsembleConfig::*f) {
            t["ensemble." + k] = [f](C& c, const std::string& key, const std::string& v) {
                c.ensemble.*f = parse_count(key, v);
            };
        };
        ecount("n_members", &EnsembleConfig::n_members);
        ecount("n_elites", &EnsembleConfig::n_elites);
        ereal("logvar_min", &EnsembleConfig::logvar_min);
        ereal("logvar_max", &EnsembleConfig::logvar_max);
        ereal("lr", &EnsembleConfig::lr);
        ereal("beta1", &EnsembleConfig::beta1);
        ereal("beta2", &EnsembleConfig::beta2);
        ereal("eps", &EnsembleConfig::eps);
        ecount("retrain_interval", &EnsembleConfig::retrain_interval);
        ecount("batch_size", &EnsembleConfig::batch_size);
        ereal("holdout_fraction", &EnsembleConfig::holdout_fraction);
        ecount("max_epochs", &EnsembleConfig::max_epochs);
        ecount("patience", &EnsembleConfig::patience);
        ereal("min_improvement", &EnsembleConfig::min_improvement);
        ecount("max_batches_per_epoch", &EnsembleConfig::max_batches_per_epoch);
        t["ensemble.hidden_dims"] = [](C& c, const std::string& key, const std::string& v) {
            c.ensemble.hidden_dims = parse_dims(key, v);
        };
        t["ensemble.activation"] = [](C& c, const std::string& key, const std::string& v) {
            c.ensemble.activation = parse_activation(key, v);
        };
        t["ensemble.target_mode"] = [](C& c, const std::string& key, const std::string& v) {
            if (v == "residual") c.ensemble.target_mode = TargetMode::residual;
            else if (v == "direct") c.ensemble.target_mode = TargetMode::direct;
            else throw ConfigError("config key '" + key + "': expected residual or direct, got '" + v + "'");
        };
        t["ensemble.target_norm"] = [](C& c, const std::string& key, const std::string& v) {
            c.ensemble.target_norm = parse_bool(key, v);
        };
        t["env.name"] = [](C& c, const std::string& key, const std::string& v) {
            const auto& names = env_names();
            if (std::find(names.begin(), names.end(), v) == names.end())
                throw ConfigError("config key '" + key + "': unknown env '" + v + "'");
            c.env_name = v;
        };
        return t;
    }();
    return table;
}

}  // namespace config_detail

/// One section.key=value assignment, in the order it was given.
using ConfigEntry = std::pair<std::string, std::string>;

/// Splits "section.key=value".
inline ConfigEntry parse_override(const std::string& text) {
    const auto eq = text.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + text + "' is not of the form section.key=value");
    const std::string key = config_detail::trim(text.substr(0, eq));
    if (key.find('.') == std::string::npos) throw ConfigError("override key '" + key + "' must be section.key");
    return {key, config_detail::trim(text.substr(eq + 1))};
}

/// Reads the INI text into flattened section.key entries.
inline std::vector<ConfigEntry> read_ini_entries(std::istream& in) {
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::ini_parser::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    std::vector<ConfigEntry> out;
    for (const auto& [section, child] : tree) {
        if (child.empty()) throw ConfigError("config key '" + section + "' must appear inside a [section]");
        for (const auto& [key, value] : child) out.emplace_back(section + "." + key, config_detail::trim(value.data()));
    }
    return out;
}

/// Applies entries on top of the defaults; later entries win. Enforces the
/// algorithm aliases (mbpo pins residual targets without normalization, ftfl
/// pins direct targets with normalization) and turns critic layer norm on
/// for model-based algorithms unless set explicitly.
inline ExperimentConfig build_config(const std::vector<ConfigEntry>& entries) {
    ExperimentConfig c;
    std::map<std::string, std::string> last;
    for (const auto& [k, v] : entries) last[k] = v;

    // The env section depends on env.name, so resolve it first.
    if (auto it = last.find("env.name"); it != last.end()) config_detail::setters().at("env.name")(c, it->first, it->second);
    const std::set<std::string> env_keys = env_param_names(c.env_name);

    for (const auto& [key, value] : last) {
        if (key == "env.name") continue;
        if (key.rfind("env.", 0) == 0) {
            const std::string p = key.substr(4);
            if (!env_keys.count(p)) throw ConfigError("unknown config key '" + key + "' for env " + c.env_name);
            if (p == "include_contact") c.env_params[p] = config_detail::parse_bool(key, value) ? 1.0 : 0.0;
            else c.env_params[p] = config_detail::parse_double(key, value);
            continue;
        }
        auto it = config_detail::setters().find(key);
        if (it == config_detail::setters().end()) throw ConfigError("unknown config key '" + key + "'");
        it->second(c, key, value);
    }

    const bool mode_set = last.count("ensemble.target_mode"), norm_set = last.count("ensemble.target_norm");
    auto pin = [&](TargetMode mode, bool norm) {
        if ((mode_set && c.ensemble.target_mode != mode) || (norm_set && c.ensemble.target_norm != norm))
            throw ConfigError(std::string("config: algo ") + to_string(c.algo) + " fixes ensemble.target_mode=" +
                              to_string(mode) + " and ensemble.target_norm=" + (norm ? "true" : "false"));
        c.ensemble.target_mode = mode;
        c.ensemble.target_norm = norm;
    };
    if (c.algo == Algo::mbpo) pin(TargetMode::residual, false);
    if (c.algo == Algo::ftfl) pin(TargetMode::direct, true);
    if (!last.count("sac.critic_layer_norm")) c.sac.critic_layer_norm = c.algo != Algo::sac;

    make_env(c.env_name, c.env_params);  // validates env parameter values
    c.validate();
    return c;
}

inline ExperimentConfig parse_config_text(const std::string& text, const std::vector<std::string>& overrides = {}) {
    std::istringstream in(text);
    auto entries = read_ini_entries(in);
    for (const auto& o : overrides) entries.push_back(parse_override(o));
    return build_config(entries);
}

inline ExperimentConfig parse_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), overrides);
}

/// Fully resolved configuration as INI text; parsing it reproduces the
/// same configuration.
inline std::string to_ini(const ExperimentConfig& c) {
    using config_detail::format_dims;
    using config_detail::format_double;
    std::ostringstream o;
    o << "[dyna]\n"
      << "algo = " << to_string(c.algo) << "\n"
      << "seed = " << c.seed << "\n"
      << "total_env_steps = " << c.total_env_steps << "\n"
      << "synthetic_ratio = " << format_double(c.synthetic_ratio) << "\n"
      << "rollouts_per_step = " << c.rollouts_per_step << "\n"
      << "model_horizon = " << c.model_horizon << "\n"
      << "replay_capacity = " << c.replay_capacity << "\n"
      << "synthetic_capacity = " << c.synthetic_capacity << "\n"
      << "reveal_step = " << c.reveal_step << "\n\n";
    const SacConfig& s = c.sac;
    o << "[sac]\n"
      << "gamma = " << format_double(s.gamma) << "\n"
      << "tau = " << format_double(s.tau) << "\n"
      << "lr = " << format_double(s.lr) << "\n"
      << "beta1 = " << format_double(s.beta1) << "\n"
      << "beta2 = " << format_double(s.beta2) << "\n"
      << "eps = " << format_double(s.eps) << "\n"
      << "batch_size = " << s.batch_size << "\n"
      << "updates_per_step = " << s.updates_per_step << "\n"
      << "warmup_steps = " << s.warmup_steps << "\n"
      << "init_alpha = " << format_double(s.init_alpha) << "\n"
      << "target_entropy = " << (std::isnan(s.target_entropy) ? std::string("auto") : format_double(s.target_entropy))
      << "\n"
      << "critic_layer_norm = " << (s.critic_layer_norm ? "true" : "false") << "\n"
      << "hidden_dims = " << format_dims(s.hidden_dims) << "\n"
      << "activation = " << config_detail::activation_name(s.activation) << "\n"
      << "log_std_min = " << format_double(s.log_std_min) << "\n"
      << "log_std_max = " << format_double(s.log_std_max) << "\n\n";
    const EnsembleConfig& e = c.ensemble;
    o << "[ensemble]\n"
      << "n_members = " << e.n_members << "\n"
      << "n_elites = " << e.n_elites << "\n"
      << "hidden_dims = " << format_dims(e.hidden_dims) << "\n"
      << "activation = " << config_detail::activation_name(e.activation) << "\n"
      << "target_mode = " << to_string(e.target_mode) << "\n"
      << "target_norm = " << (e.target_norm ? "true" : "false") << "\n"
      << "logvar_min = " << format_double(e.logvar_min) << "\n"
      << "logvar_max = " << format_double(e.logvar_max) << "\n"
      << "lr = " << format_double(e.lr) << "\n"
      << "beta1 = " << format_double(e.beta1) << "\n"
      << "beta2 = " << format_double(e.beta2) << "\n"
      << "eps = " << format_double(e.eps) << "\n"
      << "retrain_interval = " << e.retrain_interval << "\n"
      << "batch_size = " << e.batch_size << "\n"
      << "holdout_fraction = " << format_double(e.holdout_fraction) << "\n"
      << "max_epochs = " << e.max_epochs << "\n"
      << "patience = " << e.patience << "\n"
      << "min_improvement = " << format_double(e.min_improvement) << "\n"
      << "max_batches_per_epoch = " << e.max_batches_per_epoch << "\n\n";
    o << "[env]\n"
      << "name = " << c.env_name << "\n";
    for (const auto& [k, v] : c.env_params) {
        if (k == "include_contact") o << k << " = " << (v != 0.0 ? "true" : "false") << "\n";
        else o << k << " = " << format_double(v) << "\n";
    }
    o << "\n[eval]\n"
      << "interval = " << c.eval_interval << "\n"
      << "episodes = " << c.eval_episodes << "\n"
      << "final_window = " << c.final_window << "\n"
      << "probe_samples = " << c.probe_samples << "\n";
    return o.str();
}

}  // namespace ftfl
