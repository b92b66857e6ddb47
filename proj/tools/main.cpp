#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "omat/config.hpp"
#include "omat/error.hpp"
#include "omat/stages.hpp"

// Exit codes: 0 ok, 2 config error (bad flags, bad config, out-of-domain
// values), 3 upstream-artifact mismatch, 4 numerical failure.
int main(int argc, char** argv) {
    CLI::App app{"omat — reproducible latent-attack / adversarial-training studies"};
    app.fallthrough();

    std::string config_path, out_dir, stage_flag;
    std::uint64_t seed = 0;
    std::size_t threads = 0;
    auto* config_opt = app.add_option("--config", config_path, "study config file (required)");
    auto* out_opt = app.add_option("--out", out_dir, "output directory (env OMAT_OUT overrides)");
    auto* seed_opt = app.add_option("--seed", seed, "override [run] master_seed");
    auto* threads_opt = app.add_option("--threads", threads, "worker pool size (>= 1)");
    app.add_option("--stage", stage_flag, "stage to run (alternative to a subcommand)");

    for (const auto& name : omat::harness::stage_names()) app.add_subcommand(name);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        std::string stage = stage_flag;
        for (const auto* sub : app.get_subcommands()) {
            if (!stage.empty() && stage != sub->get_name())
                throw omat::ConfigError("config: both --stage " + stage + " and subcommand " +
                                        sub->get_name() + " given");
            stage = sub->get_name();
        }
        if (stage.empty())
            throw omat::ConfigError("config: pick a stage (subcommand or --stage); one of: " +
                                    [] {
                                        std::string s;
                                        for (const auto& n : omat::harness::stage_names())
                                            s += (s.empty() ? "" : ", ") + n;
                                        return s;
                                    }());
        if (!*config_opt) throw omat::ConfigError("config: --config is required");

        omat::harness::ConfigOverrides ov;
        if (*seed_opt) ov.seed = seed;
        if (*threads_opt) ov.threads = threads;
        if (const char* env_out = std::getenv("OMAT_OUT"); env_out && *env_out)
            ov.out_dir = env_out;
        else if (*out_opt)
            ov.out_dir = out_dir;

        omat::harness::Ctx ctx;
        ctx.cfg = omat::harness::load_experiment_config(config_path, ov);
        ctx.out = ctx.cfg.out_dir;
        std::filesystem::create_directories(ctx.out);

        std::cout << omat::harness::run_stage(ctx, stage) << std::endl;
        return 0;
    } catch (const omat::ConfigError& e) {
        std::cerr << "omat: " << e.what() << std::endl;
        return 2;
    } catch (const omat::DomainError& e) {
        std::cerr << "omat: " << e.what() << std::endl;
        return 2;
    } catch (const omat::ShapeError& e) {
        std::cerr << "omat: " << e.what() << std::endl;
        return 2;
    } catch (const omat::ArtifactError& e) {
        std::cerr << "omat: " << e.what() << std::endl;
        return 3;
    } catch (const omat::NumericError& e) {
        std::cerr << "omat: " << e.what() << std::endl;
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "omat: " << e.what() << std::endl;
        return 1;
    }
}
