#include <CLI11.hpp>
#include <algorithm>
#include <iostream>
#include <map>
#include <optional>
#include <thread>

#include "dropletscope/error.hpp"
#include "dropletscope/parallel.hpp"
#include "dropletscope/pipeline.hpp"

namespace dropletscope::pipeline {

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

int fail(int code, const std::string& what) {
    std::cerr << "dropletscope: error: " << what << '\n';
    return code;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"Latent-space analysis of droplet size distributions", "dropletscope"};
    app.require_subcommand(1, 1);

    std::string config_file;
    std::string work = ".";
    std::size_t threads = 0;
    bool deterministic = false;
    std::vector<std::string> overrides;
    app.add_option("--config", config_file, "key = value config file")->check(CLI::ExistingFile);
    app.add_option("--work", work, "workspace directory holding every stage's outputs");
    app.add_option("--threads", threads, "worker threads for parallel stages (0 = hardware)");
    app.add_flag("--deterministic", deterministic, "serial execution (one thread)");
    app.add_option("--set", overrides, "override a config key: --set section.key=value");

    // Subcommand flags map onto config keys and win over the config file.
    std::map<std::string, std::string> flag_values;
    auto flag = [&](CLI::App* sub, const std::string& name, const std::string& key, const std::string& help) {
        sub->add_option_function<std::string>(
            name, [&flag_values, key](const std::string& v) { flag_values[key] = v; }, help + " (" + key + ")");
    };

    auto* gen = app.add_subcommand("gen", "generate the synthetic dataset into data/");
    std::optional<double> only_aerosol;
    gen->add_option("--aerosol", only_aerosol, "generate this aerosol factor only");

    auto* train = app.add_subcommand("train", "train the VAE on data/ into model/");
    flag(train, "--beta", "train.beta", "KL weight");
    flag(train, "--lr", "train.lr", "Adam learning rate");
    flag(train, "--epochs", "train.epochs", "training epochs");
    flag(train, "--batch", "train.batch", "minibatch size");
    flag(train, "--seed", "train.seed", "initialisation and shuffling seed");

    auto* embed = app.add_subcommand("embed", "encode every snapshot into embed/");
    auto* calibrate = app.add_subcommand("calibrate", "latent -> RGB percentile calibration into calib/");
    flag(calibrate, "--pct-lo", "viz.pct_lo", "lower percentile");
    flag(calibrate, "--pct-hi", "viz.pct_hi", "upper percentile");

    auto* render = app.add_subcommand("render", "horizontal and vertical RGB slices into render/");
    flag(render, "--times", "viz.times", "comma-separated snapshot times in s");
    flag(render, "--slice-k", "viz.slice_k", "level of the horizontal slice");
    flag(render, "--slice-j", "viz.slice_j", "row of the vertical slice");

    auto* trace = app.add_subcommand("trace", "fit the latent pathway and average Dsds along it into trace/");
    std::optional<std::string> waypoints;
    trace->add_option("--waypoints", waypoints, "use these `z1 z2 z3` nodes instead of the novelty fit")
        ->check(CLI::ExistingFile);
    flag(trace, "--k", "path.k", "neighbours per node");
    flag(trace, "--nodes", "path.n_nodes", "path nodes");

    auto* compose = app.add_subcommand("compose", "hue-sorted composition grid into compose/");
    flag(compose, "--times", "compose.times", "comma-separated snapshot times in s");

    auto* onset = app.add_subcommand("onset", "precipitation onset per aerosol factor into onset/");
    flag(onset, "--threshold", "compose.onset_threshold", "in-band fraction that marks onset");
    flag(onset, "--hue-lo", "compose.onset_hue_lo", "lower hue bound (inclusive)");
    flag(onset, "--hue-hi", "compose.onset_hue_hi", "upper hue bound (exclusive)");

    for (CLI::App* sub : app.get_subcommands({})) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
        set_worker_threads(deterministic ? 1 : threads);
        Config cfg;
        if (!config_file.empty()) cfg.load_file(config_file);
        for (const std::string& o : overrides) cfg.apply_override(o);
        for (const auto& [key, value] : flag_values) cfg.set(key, value);

        const std::filesystem::path w = work;
        if (gen->parsed()) {
            cmd_gen(cfg, w, only_aerosol);
        } else if (train->parsed()) {
            cmd_train(cfg, w);
        } else if (embed->parsed()) {
            cmd_embed(cfg, w);
        } else if (calibrate->parsed()) {
            cmd_calibrate(cfg, w);
        } else if (render->parsed()) {
            cmd_render(cfg, w);
        } else if (trace->parsed()) {
            std::optional<std::filesystem::path> wp;
            if (waypoints) wp = *waypoints;
            cmd_trace(cfg, w, wp);
        } else if (compose->parsed()) {
            cmd_compose(cfg, w);
        } else if (onset->parsed()) {
            cmd_onset(cfg, w);
        }
    } catch (const InvalidArgument& e) {
        return fail(kExitUsage, e.what());
    } catch (const NumericFailure& e) {
        return fail(kExitNumeric, e.what());
    } catch (const std::exception& e) {
        // Missing or stale stages, malformed files, degenerate data, I/O.
        return fail(kExitData, e.what());
    }
    return 0;
}

}  // namespace dropletscope::pipeline
