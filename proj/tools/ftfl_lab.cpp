// ftfl-lab: command-line entry point.
//
//   ftfl-lab run|ablate|probe|aggregate|dump-buffer --config <path>
//            --seeds 0,1,2 --out <dir> [--set key=value]...

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ftfl/config.hpp"
#include "ftfl/harness.hpp"

namespace {

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
    std::vector<std::uint64_t> seeds;
    std::stringstream ss(text);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        tok = ftfl::config_detail::trim(tok);
        if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos)
            throw ftfl::ConfigError("--seeds: bad seed '" + tok + "'");
        seeds.push_back(std::stoull(tok));
    }
    return seeds;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ftfl-lab: MBPO / FTFL experiments on desk environments"};
    app.require_subcommand(1, 1);

    std::string config_path, out_dir = "out", seeds_text = "0", buffer_path, in_dir;
    std::vector<std::string> overrides;
    std::size_t window = 10;

    auto add_common = [&](CLI::App* sub, bool needs_seeds) {
        sub->add_option("--config", config_path, "INI config file (an empty file gives the defaults)")->required();
        sub->add_option("--out", out_dir, "output directory");
        sub->add_option("--set", overrides, "override, section.key=value (repeatable)");
        if (needs_seeds) sub->add_option("--seeds", seeds_text, "comma-separated seeds");
    };
    auto* run = app.add_subcommand("run", "train one configuration per seed");
    add_common(run, true);
    auto* ablate = app.add_subcommand("ablate", "residual/direct x norm on/off grid per seed");
    add_common(ablate, true);
    auto* probe = app.add_subcommand("probe", "pseudo-online model probe on a buffer dump");
    add_common(probe, true);
    probe->add_option("--buffer", buffer_path, "buffer dump to probe (read only)")->required();
    auto* dump = app.add_subcommand("dump-buffer", "train SAC per seed and dump the best buffer");
    add_common(dump, true);
    auto* agg = app.add_subcommand("aggregate", "IQM / bootstrap CI / percent of SAC over metrics CSVs");
    agg->add_option("--in", in_dir, "directory of metrics CSVs (default: --out)");
    agg->add_option("--out", out_dir, "output directory");
    agg->add_option("--window", window, "final evaluation window");
    agg->add_option("--config", config_path, "ignored; accepted for symmetry");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : static_cast<int>(ftfl::ExitCode::config_error);
    }

    try {
        ftfl::ExitCode code = ftfl::ExitCode::ok;
        if (agg->parsed()) {
            code = ftfl::cmd_aggregate(in_dir.empty() ? out_dir : in_dir, out_dir, window, std::cerr);
        } else {
            const auto config = ftfl::parse_config(config_path, overrides);
            const auto seeds = parse_seeds(seeds_text);
            if (run->parsed()) code = ftfl::cmd_run(config, seeds, out_dir, std::cerr);
            else if (ablate->parsed()) code = ftfl::cmd_ablate(config, seeds, out_dir, std::cerr);
            else if (probe->parsed()) code = ftfl::cmd_probe(config, seeds, buffer_path, out_dir, std::cerr);
            else if (dump->parsed()) code = ftfl::cmd_dump_buffer(config, seeds, out_dir, std::cerr);
        }
        return static_cast<int>(code);
    } catch (const std::exception& e) {
        std::cerr << "ftfl-lab: " << e.what() << '\n';
        return static_cast<int>(ftfl::exit_code_for(e));
    }
}
