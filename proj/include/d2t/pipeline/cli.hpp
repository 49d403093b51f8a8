#pragma once

#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "d2t/pipeline/stages.hpp"

namespace d2t::pipeline {

inline std::vector<std::string> upstream_stages(const std::string& cmd,
                                                const std::string& variant) {
    if (cmd == "train-dm" || cmd == "pretrain-dt") return {"collect"};
    if (cmd == "finetune") return {"collect", "train-dm", "pretrain-dt"};
    if (cmd == "eval") {
        if (variant == "random" || variant == "expert") return {};
        if (variant == "dt-pc") return {"collect", "finetune"};
        return {"collect", "finetune", "train-dm"};
    }
    return {};
}

inline int run_cli(int argc, const char* const* argv) {
    CLI::App app{"channel-diffusion + decision-transformer lab for IRS phase control"};
    app.require_subcommand(1);

    std::string config_path, out_override, variant = "d2t";
    uint64_t seed_override = 0;
    bool dry_run = false, explain = false;
    std::vector<CLI::Option*> seed_opts, out_opts;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "experiment config (JSON)")
            ->required()
            ->check(CLI::ExistingFile);
        seed_opts.push_back(sub->add_option("--seed", seed_override, "override the config seed"));
        out_opts.push_back(sub->add_option("--out", out_override, "override the output root"));
        sub->add_flag("--dry-run", dry_run, "resolve and validate, print the plan, run nothing");
        sub->add_flag("--explain", explain, "print the fully resolved config and exit");
    };
    common(app.add_subcommand("collect", "roll expert episodes into trajectory buffers"));
    common(app.add_subcommand("train-dm", "train the pilot-conditioned channel diffusion model"));
    common(app.add_subcommand("pretrain-dt", "pre-train the decision transformer on the corpus"));
    common(app.add_subcommand("finetune", "few-shot fine-tune on the held-out scenario"));
    CLI::App* ev = app.add_subcommand("eval", "evaluate a policy variant on the held-out scenario");
    common(ev);
    ev->add_option("--variant", variant, "one of d2t, dt-pc, scratch-dt, random, expert")
        ->check(CLI::IsMember({"d2t", "dt-pc", "scratch-dt", "random", "expert"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        ExperimentConfig cfg = load_config(config_path);
        for (const auto* o : seed_opts)
            if (o->count()) cfg.seed = seed_override;
        for (const auto* o : out_opts)
            if (o->count()) cfg.out = out_override;
        cfg.validate();

        if (explain) {
            std::printf("%s\n", cfg.to_json().dump(2).c_str());
            return 0;
        }

        const std::string cmd = app.get_subcommands().front()->get_name();
        const std::string stage = cmd == "eval" ? "eval-" + variant : cmd;
        if (dry_run) {
            std::printf("stage %s\n", stage.c_str());
            std::printf("  artifacts: %s\n", stage_dir(cfg, stage).string().c_str());
            for (const auto& up : upstream_stages(cmd, variant))
                std::printf("  needs %s: %s\n", up.c_str(),
                            stage_dir(cfg, up).string().c_str());
            return 0;
        }

        if (cmd == "collect") {
            auto r = run_collect(cfg);
            std::printf("collect: %lld train + %lld few-shot episodes, mean reward %.4f -> %s\n",
                        static_cast<long long>(r.train_episodes),
                        static_cast<long long>(r.fewshot_episodes), r.train_mean_reward,
                        r.dir.string().c_str());
        } else if (cmd == "train-dm") {
            auto r = run_train_dm(cfg);
            std::printf("train-dm: %d steps, final loss %.6f -> %s\n", cfg.dm.steps,
                        r.final_loss, r.dir.string().c_str());
        } else if (cmd == "pretrain-dt") {
            auto r = run_pretrain_dt(cfg);
            std::printf("pretrain-dt: %d steps, final loss %.6f -> %s\n", cfg.dt.steps,
                        r.final_loss, r.dir.string().c_str());
        } else if (cmd == "finetune") {
            auto r = run_finetune(cfg);
            std::printf("finetune: zero-shot rate %.4f, final rate %.4f, scratch %.4f -> %s\n",
                        r.zero_shot_mean_rate, r.curve_finetune.back().second,
                        r.curve_scratch.back().second, r.dir.string().c_str());
        } else {
            auto r = run_eval(cfg, variant);
            std::printf("eval[%s]: mean return %.4f, mean slot rate %.4f -> %s\n",
                        variant.c_str(), r.mean_return, r.mean_slot_rate,
                        r.dir.string().c_str());
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}

inline int run_cli(const std::vector<std::string>& args) {
    std::vector<const char*> argv;
    argv.reserve(args.size() + 1);
    argv.push_back("d2t");
    for (const auto& a : args) argv.push_back(a.c_str());
    return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace d2t::pipeline
