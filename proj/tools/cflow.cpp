#include "cflow/pipeline.hpp"

#include "CLI11.hpp"

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

namespace {

using namespace cflow;

struct GlobalArgs {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir;
    bool quiet = false;
};

ExperimentConfig load_config(const GlobalArgs& g) {
    ExperimentConfig cfg =
        g.config_path.empty() ? ExperimentConfig{} : parse_config_file(g.config_path);
    if (g.seed) cfg.seed = *g.seed;
    if (g.out_dir) cfg.out_dir = *g.out_dir;
    if (g.quiet) cfg.quiet = true;
    cfg.validate();
    return cfg;
}

// Highest-order checkpoint in the output directory, the natural default for
// sample/eval/distill after a pipeline run.
std::filesystem::path latest_checkpoint(const ExperimentConfig& cfg) {
    for (int k = 16; k >= 1; --k) {
        const auto p = std::filesystem::path(cfg.out_dir) / ("flow_k" + std::to_string(k) + ".ckpt");
        if (std::filesystem::exists(p)) return p;
    }
    throw ConfigError("no flow_k*.ckpt found in " + cfg.out_dir + "; pass --ckpt");
}

int dispatch(const std::string& cmd, const GlobalArgs& g, const std::string& ckpt, int order_k) {
    ExperimentConfig cfg = load_config(g);
    if (cmd == "train-base") {
        Pipeline p(cfg);
        auto f = p.train_base();
        p.evaluate(f, 1);
        p.write_manifest();
        return 0;
    }
    if (cmd == "reflow" || cmd == "conic-reflow") {
        cfg.procedure = cmd == "reflow" ? "original" : "balanced_conic";
        run_pipeline(cfg);
        return 0;
    }
    if (cmd == "drift-demo") {
        Pipeline p(cfg);
        p.drift_demo();
        return 0;
    }

    // Remaining commands operate on an existing checkpoint.
    const auto path = ckpt.empty() ? latest_checkpoint(cfg) : std::filesystem::path(ckpt);
    const auto f = load_checkpoint(path);
    Pipeline p(cfg);
    if (cmd == "sample") {
        p.sample_artifacts(f, order_k);
    } else if (cmd == "eval") {
        p.evaluate(f, order_k);
        p.write_metrics_csv();
    } else if (cmd == "distill") {
        p.distill_stage(f, order_k);
    }
    p.write_manifest();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"rectified-flow training, rectification and diagnostics"};
    app.require_subcommand(1);

    GlobalArgs g;
    std::string ckpt;
    int order_k = 1;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", g.config_path, "experiment config file");
        sub->add_option("--seed", g.seed, "master seed, overrides the config");
        sub->add_option("--out", g.out_dir, "output directory, overrides the config");
        sub->add_flag("--quiet", g.quiet, "suppress progress lines");
        return sub;
    };
    auto add_ckpt = [&](CLI::App* sub) {
        sub->add_option("--ckpt", ckpt, "checkpoint path, default: newest flow_k*.ckpt in --out");
        sub->add_option("--order", order_k, "rectification order the checkpoint holds");
        return sub;
    };

    add_common(app.add_subcommand("train-base", "train the base flow and evaluate it"));
    add_common(app.add_subcommand("reflow", "full pipeline with the plain rectification procedure"));
    add_common(app.add_subcommand(
        "conic-reflow", "full pipeline with the balanced conic rectification procedure"));
    add_ckpt(add_common(app.add_subcommand("sample", "draw samples from a checkpoint")));
    add_ckpt(add_common(app.add_subcommand("eval", "metrics for a checkpoint")));
    add_ckpt(add_common(app.add_subcommand("distill", "fit a one-step map to a checkpoint")));
    add_common(app.add_subcommand("drift-demo",
                                  "plain-procedure rectification ladder with a KL-vs-order table"));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
        app.exit(e);
        return 2;
    }

    try {
        return dispatch(app.get_subcommands().front()->get_name(), g, ckpt, order_k);
    } catch (const cflow::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const cflow::NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
