#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "d2t/diffusion/model.hpp"
#include "d2t/dt/model.hpp"
#include "d2t/dt/rollout.hpp"
#include "d2t/expert/collect.hpp"
#include "d2t/pipeline/config.hpp"
#include "d2t/pipeline/metrics.hpp"

namespace d2t::pipeline {

using nn::Index;

// Training and sampling run in single precision; metrics and buffers stay in
// double. Stages never skip work: determinism makes re-runs idempotent and the
// content-addressed directory keeps configs from trampling each other.
using Sf = float;

namespace detail {

inline std::filesystem::path prepare_dir(const ExperimentConfig& cfg,
                                         const std::string& stage) {
    auto dir = stage_dir(cfg, stage);
    std::filesystem::create_directories(dir);
    return dir;
}

inline std::filesystem::path require_stage(const ExperimentConfig& cfg,
                                           const std::string& stage) {
    auto dir = stage_dir(cfg, stage);
    if (!std::filesystem::exists(dir / "manifest.json"))
        throw ConfigError("stage '" + stage + "' has not been run for this config; expected " +
                          (dir / "manifest.json").string());
    return dir;
}

inline void write_manifest(const std::filesystem::path& dir, const ExperimentConfig& cfg,
                           const std::string& stage, double wall_seconds,
                           const std::vector<std::string>& outputs) {
    json m{{"stage", stage},
           {"hash", hash_hex(stage_hash(cfg, stage))},
           {"seed", cfg.seed},
           {"wall_seconds", wall_seconds},
           {"outputs", outputs}};
    std::ofstream f(dir / "manifest.json", std::ios::binary);
    if (!f) throw ConfigError("cannot write " + (dir / "manifest.json").string());
    f << m.dump(2) << '\n';
}

inline int64_t log_period(int steps) { return std::max(1, steps / 100); }

class WallClock {
  public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
    }

  private:
    std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

// True channel vectors and the pilots observed alongside them for a block of
// episodes, replayed action-free (actions steer rewards, not the fading).
inline void replay_true_channels(const channel::EnvConfig& ec, uint64_t first_episode,
                                 Index episodes, nn::MatX<double>& states,
                                 nn::MatX<double>& pilots) {
    const Index tl = ec.T;
    states.resize(episodes * tl, 2 * ec.N * ec.M);
    pilots.resize(episodes * tl, channel::pilot_dim(ec));
    const channel::RVec hold = channel::RVec::Zero(ec.N);
    for (Index e = 0; e < episodes; ++e) {
        channel::Environment env(ec);
        channel::StepResult sr = env.reset(first_episode + uint64_t(e));
        for (Index t = 0; t < tl; ++t) {
            states.row(e * tl + t) = diffusion::channel_to_vector(env.current().H).transpose();
            pilots.row(e * tl + t) = sr.pilot.y.transpose();
            sr = env.step(hold);
        }
    }
}

}  // namespace detail

struct CollectOutputs {
    std::filesystem::path dir;
    double train_mean_reward = 0;
    double fewshot_best_return = 0;
    Index train_episodes = 0;
    Index fewshot_episodes = 0;
};

inline CollectOutputs run_collect(const ExperimentConfig& cfg) {
    detail::WallClock wall;
    const auto dir = detail::prepare_dir(cfg, "collect");

    std::vector<channel::Environment> envs;
    envs.reserve(cfg.train_envs.size());
    for (const auto& p : cfg.train_envs) envs.emplace_back(cfg.make_env(p));
    auto buf = expert::collect_trajectories(envs, cfg.expert, cfg.collect.episodes_per_env);
    buf.save(dir / "train_buffer.bin");
    buf.export_jsonl(dir / "train_buffer.jsonl");

    channel::Environment held(cfg.make_env(cfg.heldout));
    auto few = expert::make_fewshot_buffer(held, cfg.expert, cfg.collect.fewshot_episodes,
                                           static_cast<uint32_t>(cfg.train_envs.size()));
    few.save(dir / "fewshot_buffer.bin");
    few.export_jsonl(dir / "fewshot_buffer.jsonl");

    MetricsWriter mw("collect", cfg.seed);
    for (size_t e = 0; e < cfg.train_envs.size(); ++e) {
        double acc = 0;
        Index cnt = 0;
        for (const auto& tr : buf.items())
            if (tr.env_id == e) {
                acc += tr.rewards.sum();
                cnt += tr.length();
            }
        mw.record(int64_t(e), "env_mean_reward", cnt > 0 ? acc / double(cnt) : 0.0);
    }
    const int64_t tail = int64_t(cfg.train_envs.size());
    mw.record(tail, "train_mean_reward", buf.mean_reward());
    mw.record(tail, "train_best_return", buf.best_episode_return());
    mw.record(tail, "fewshot_mean_reward", few.mean_reward());
    mw.record(tail, "fewshot_best_return", few.best_episode_return());
    mw.write(dir / "metrics.csv");

    detail::write_manifest(dir, cfg, "collect", wall.seconds(),
                           {"train_buffer.bin", "train_buffer.jsonl", "fewshot_buffer.bin",
                            "fewshot_buffer.jsonl", "metrics.csv"});
    return {dir, buf.mean_reward(), few.best_episode_return(), buf.size(), few.size()};
}

struct TrainOutputs {
    std::filesystem::path dir;
    std::vector<std::pair<int64_t, double>> losses;  // logged (step, loss) pairs
    double final_loss = 0;
};

inline TrainOutputs run_train_dm(const ExperimentConfig& cfg) {
    detail::WallClock wall;
    const auto collect_dir = detail::require_stage(cfg, "collect");
    const auto dir = detail::prepare_dir(cfg, "train-dm");

    const auto buf = dt::TrajectoryBuffer::load(collect_dir / "train_buffer.bin");
    const auto ds = diffusion::build_dm_dataset<Sf>(buf);

    typename diffusion::ConditionalUNet<Sf>::Config nc;
    nc.data_dim = ds.states.cols();
    nc.cond_dim = ds.conds.cols();
    nc.base_width = cfg.dm.base_width;
    nc.emb_width = cfg.dm.emb_width;
    nc.levels = cfg.dm.levels;
    diffusion::DiffusionModel<Sf> model(
        nc, diffusion::DiffusionSchedule::linear(cfg.dm.k, cfg.dm.beta_min, cfg.dm.beta_max),
        diffusion::GuidanceConfig{cfg.dm.eta, cfg.dm.cfg_dropout, cfg.dm.dropout_p},
        cfg.seed);
    model.set_scales(ds.norm_scale, ds.cond_scale);

    nn::AdamW<Sf> opt(model.net().params(),
                      {.lr = cfg.dm.lr, .weight_decay = cfg.dm.weight_decay});
    Rng rng(tag_seed(cfg.seed, "dm-train"));
    MetricsWriter mw("train-dm", cfg.seed);
    TrainOutputs out;
    const Index rows = ds.states.rows();
    const Index bsz = std::min<Index>(cfg.dm.batch, rows);
    const int64_t period = detail::log_period(cfg.dm.steps);
    nn::MatX<Sf> x0(bsz, ds.states.cols()), cd(bsz, ds.conds.cols());
    for (int step = 1; step <= cfg.dm.steps; ++step) {
        for (Index i = 0; i < bsz; ++i) {
            const Index r = Index(rng.integer(uint64_t(rows)));
            x0.row(i) = ds.states.row(r);
            cd.row(i) = ds.conds.row(r);
        }
        const double loss = diffusion::dm_train_step(model, x0, cd, rng, opt);
        out.final_loss = loss;
        if (step == 1 || step % period == 0 || step == cfg.dm.steps) {
            mw.record(step, "loss", loss);
            out.losses.push_back({step, loss});
        }
    }
    model.save((dir / "dm.bin").string());
    mw.write(dir / "metrics.csv");
    detail::write_manifest(dir, cfg, "train-dm", wall.seconds(), {"dm.bin", "metrics.csv"});
    out.dir = dir;
    return out;
}

inline TrainOutputs run_pretrain_dt(const ExperimentConfig& cfg) {
    detail::WallClock wall;
    const auto collect_dir = detail::require_stage(cfg, "collect");
    const auto dir = detail::prepare_dir(cfg, "pretrain-dt");

    const auto buf = dt::TrajectoryBuffer::load(collect_dir / "train_buffer.bin");
    const auto ds = dt::build_dt_dataset<Sf>(buf);

    typename dt::DtModel<Sf>::Config dc;
    dc.context = cfg.t;
    dc.state_dim = 2 * cfg.n * cfg.m;
    dc.act_dim = cfg.n;
    dc.width = cfg.dt.width;
    dc.blocks = cfg.dt.blocks;
    dc.heads = cfg.dt.heads;
    dc.dropout = cfg.dt.dropout;
    dt::DtModel<Sf> model(dc, cfg.seed);
    model.set_scales(ds.state_scale, ds.rtg_scale);

    nn::AdamW<Sf> opt(model.params(), {.lr = cfg.dt.lr, .weight_decay = cfg.dt.weight_decay});
    Rng rng(tag_seed(cfg.seed, "dt-pretrain"));
    MetricsWriter mw("pretrain-dt", cfg.seed);
    TrainOutputs out;
    const int64_t period = detail::log_period(cfg.dt.steps);
    for (int step = 1; step <= cfg.dt.steps; ++step) {
        const double loss = dt::dt_train_step(model, ds, cfg.dt.batch, rng, opt);
        out.final_loss = loss;
        if (step == 1 || step % period == 0 || step == cfg.dt.steps) {
            mw.record(step, "loss", loss);
            out.losses.push_back({step, loss});
        }
    }
    model.save((dir / "dt.bin").string());
    mw.write(dir / "metrics.csv");
    detail::write_manifest(dir, cfg, "pretrain-dt", wall.seconds(), {"dt.bin", "metrics.csv"});
    out.dir = dir;
    return out;
}

struct FinetuneOutputs {
    std::filesystem::path dir;
    double zero_shot_mean_rate = 0;
    double target_return = 0;
    std::vector<std::pair<int64_t, double>> curve_finetune;  // mean per-slot rate
    std::vector<std::pair<int64_t, double>> curve_scratch;
};

// Few-shot adaptation on the held-out scenario. Evaluation states come from
// the diffusion sampler throughout, so the only advantage the fine-tuned
// policy holds over the from-scratch one is its pre-trained initialization.
inline FinetuneOutputs run_finetune(const ExperimentConfig& cfg) {
    detail::WallClock wall;
    const auto collect_dir = detail::require_stage(cfg, "collect");
    const auto dm_dir = detail::require_stage(cfg, "train-dm");
    const auto dt_dir = detail::require_stage(cfg, "pretrain-dt");
    const auto dir = detail::prepare_dir(cfg, "finetune");

    const auto few = dt::TrajectoryBuffer::load(collect_dir / "fewshot_buffer.bin");
    auto dm = diffusion::DiffusionModel<Sf>::load((dm_dir / "dm.bin").string());
    auto ft = dt::DtModel<Sf>::load((dt_dir / "dt.bin").string());
    dt::DtModel<Sf> scratch(ft.config(), tag_seed(cfg.seed, "dt-scratch"));
    scratch.set_scales(ft.state_scale(), ft.rtg_scale());

    const channel::EnvConfig env = cfg.make_env(cfg.heldout);
    FinetuneOutputs out;
    out.target_return = cfg.eval.target_return_factor *
                        (few.empty() ? ft.rtg_scale() : few.best_episode_return());
    const dt::RolloutConfig rc{out.target_return, cfg.eval.episodes, cfg.eval.first_episode};
    // fixed validation draw: every curve point sees the same sampled states,
    // so curve differences reflect the policies and not fresh sampler noise
    const uint64_t curve_seed = tag_seed(cfg.seed, "curve-sample");
    auto eval_rate = [&](dt::DtModel<Sf>& m, int64_t) {
        auto prov = dt::diffusion_state_provider(dm, curve_seed);
        return dt::rollout_policy(env, m, prov, rc).mean_return() / double(cfg.t);
    };

    MetricsWriter mw("finetune", cfg.seed);
    const int total = few.empty() ? 0 : cfg.dt.finetune_steps;
    nn::AdamW<Sf> opt_ft(ft.params(),
                         {.lr = cfg.dt.finetune_lr, .weight_decay = cfg.dt.weight_decay});
    nn::AdamW<Sf> opt_sc(scratch.params(),
                         {.lr = cfg.dt.lr, .weight_decay = cfg.dt.weight_decay});
    Rng rng_ft(tag_seed(cfg.seed, "dt-finetune"));
    Rng rng_sc(tag_seed(cfg.seed, "dt-scratch-train"));
    dt::DtDataset<Sf> ds;
    if (!few.empty()) ds = dt::build_dt_dataset<Sf>(few, ft.state_scale(), ft.rtg_scale());

    double loss_ft = 0, loss_sc = 0;
    for (int step = 0;; ++step) {
        const bool at_eval = step % cfg.dt.eval_every == 0 || step == total;
        if (at_eval) {
            const double fr = eval_rate(ft, step);
            const double sr = eval_rate(scratch, step);
            if (step == 0) {
                out.zero_shot_mean_rate = fr;
                mw.record(0, "zero_shot_mean_rate", fr);
            }
            mw.record(step, "finetune_mean_rate", fr);
            mw.record(step, "scratch_mean_rate", sr);
            if (step > 0) {
                mw.record(step, "finetune_loss", loss_ft);
                mw.record(step, "scratch_loss", loss_sc);
            }
            out.curve_finetune.push_back({step, fr});
            out.curve_scratch.push_back({step, sr});
        }
        if (step == total) break;
        loss_ft = dt::dt_train_step(ft, ds, cfg.dt.finetune_batch, rng_ft, opt_ft);
        loss_sc = dt::dt_train_step(scratch, ds, cfg.dt.finetune_batch, rng_sc, opt_sc);
    }

    ft.save((dir / "dt_finetuned.bin").string());
    scratch.save((dir / "dt_scratch.bin").string());
    {
        std::ofstream f(dir / "learning_curve.csv", std::ios::binary);
        if (!f) throw ConfigError("cannot write " + (dir / "learning_curve.csv").string());
        f << "step,finetune_mean_rate,scratch_mean_rate\n";
        for (size_t i = 0; i < out.curve_finetune.size(); ++i)
            f << out.curve_finetune[i].first << ',' << format_double(out.curve_finetune[i].second)
              << ',' << format_double(out.curve_scratch[i].second) << '\n';
    }
    mw.write(dir / "metrics.csv");
    detail::write_manifest(dir, cfg, "finetune", wall.seconds(),
                           {"dt_finetuned.bin", "dt_scratch.bin", "learning_curve.csv",
                            "metrics.csv"});
    out.dir = dir;
    return out;
}

struct EvalOutputs {
    std::filesystem::path dir;
    std::string variant;
    double mean_return = 0;
    double mean_slot_rate = 0;
    Eigen::VectorXd episode_returns;
};

// Variants: d2t (fine-tuned policy on diffusion-sampled states), dt-pc (same
// policy on perfect CSI), scratch-dt (from-scratch policy on the same sampled
// states), random, expert.
inline EvalOutputs run_eval(const ExperimentConfig& cfg, const std::string& variant) {
    detail::WallClock wall;
    const bool needs_policy = variant == "d2t" || variant == "dt-pc" || variant == "scratch-dt";
    const bool needs_dm = variant == "d2t" || variant == "scratch-dt";
    if (!needs_policy && variant != "random" && variant != "expert")
        throw ConfigError("unknown eval variant '" + variant + "'");
    const std::string stage = "eval-" + variant;
    const auto dir = detail::prepare_dir(cfg, stage);

    const channel::EnvConfig env = cfg.make_env(cfg.heldout);
    dt::RolloutConfig rc{0.0, cfg.eval.episodes, cfg.eval.first_episode};
    dt::RolloutResult rr;
    std::vector<std::string> outputs = {"rates.csv", "metrics.csv"};

    if (needs_policy) {
        const auto collect_dir = detail::require_stage(cfg, "collect");
        const auto ft_dir = detail::require_stage(cfg, "finetune");
        const auto few = dt::TrajectoryBuffer::load(collect_dir / "fewshot_buffer.bin");
        const std::string ckpt = variant == "scratch-dt" ? "dt_scratch.bin" : "dt_finetuned.bin";
        auto model = dt::DtModel<Sf>::load((ft_dir / ckpt).string());
        rc.target_return = cfg.eval.target_return_factor *
                           (few.empty() ? model.rtg_scale() : few.best_episode_return());
        if (needs_dm) {
            const auto dm_dir = detail::require_stage(cfg, "train-dm");
            auto dm = diffusion::DiffusionModel<Sf>::load((dm_dir / "dm.bin").string());
            auto prov = dt::diffusion_state_provider(dm, tag_seed(cfg.seed, "eval-sample"));
            rr = dt::rollout_policy(env, model, prov, rc);

            if (variant == "d2t") {
                // channel-vector histograms, true vs sampled, shared bins
                const Index he = std::min<Index>(cfg.eval.histogram_episodes, cfg.eval.episodes);
                nn::MatX<double> truth, pilots;
                detail::replay_true_channels(env, cfg.eval.first_episode, he, truth, pilots);
                Rng hr(tag_seed(cfg.seed, "hist-sample"));
                const nn::MatX<double> gen =
                    diffusion::reverse_sample(dm, nn::MatX<Sf>(pilots.cast<Sf>()), hr)
                        .template cast<double>();
                const Index bins = cfg.eval.histogram_bins;
                std::ofstream f(dir / "histogram.csv", std::ios::binary);
                if (!f) throw ConfigError("cannot write " + (dir / "histogram.csv").string());
                f << "coordinate,bin,lo,hi,true_count,gen_count\n";
                for (Index d = 0; d < truth.cols(); ++d) {
                    const double lo = std::min(truth.col(d).minCoeff(), gen.col(d).minCoeff());
                    double hi = std::max(truth.col(d).maxCoeff(), gen.col(d).maxCoeff());
                    if (!(hi > lo)) hi = lo + 1.0;
                    const double w = (hi - lo) / double(bins);
                    std::vector<int64_t> ct(size_t(bins), 0), cg(size_t(bins), 0);
                    auto slot = [&](double v) {
                        return std::min<Index>(bins - 1,
                                               std::max<Index>(0, Index((v - lo) / w)));
                    };
                    for (Index r = 0; r < truth.rows(); ++r) {
                        ++ct[size_t(slot(truth(r, d)))];
                        ++cg[size_t(slot(gen(r, d)))];
                    }
                    for (Index b = 0; b < bins; ++b)
                        f << d << ',' << b << ',' << format_double(lo + w * double(b)) << ','
                          << format_double(lo + w * double(b + 1)) << ',' << ct[size_t(b)]
                          << ',' << cg[size_t(b)] << '\n';
                }
                std::filesystem::copy_file(ft_dir / "learning_curve.csv",
                                           dir / "learning_curve.csv",
                                           std::filesystem::copy_options::overwrite_existing);
                outputs.push_back("histogram.csv");
                outputs.push_back("learning_curve.csv");
            }
        } else {
            rr = dt::rollout_policy(env, model, dt::true_state_provider(), rc);
        }
    } else if (variant == "random") {
        rr = dt::rollout_random(env, rc, tag_seed(cfg.seed, "eval-random"));
    } else {
        rr = dt::rollout_expert(env, cfg.expert, rc);
    }

    {
        std::ofstream f(dir / "rates.csv", std::ios::binary);
        if (!f) throw ConfigError("cannot write " + (dir / "rates.csv").string());
        f << "episode,episode_return,mean_slot_rate\n";
        for (Index i = 0; i < rr.episode_returns.size(); ++i)
            f << (cfg.eval.first_episode + uint64_t(i)) << ','
              << format_double(rr.episode_returns[i]) << ','
              << format_double(rr.episode_returns[i] / double(cfg.t)) << '\n';
    }
    MetricsWriter mw(stage, cfg.seed);
    for (Index i = 0; i < rr.episode_returns.size(); ++i)
        mw.record(i, "episode_return", rr.episode_returns[i]);
    mw.record(rr.episode_returns.size(), "mean_return", rr.mean_return());
    mw.record(rr.episode_returns.size(), "mean_slot_rate", rr.mean_return() / double(cfg.t));
    mw.write(dir / "metrics.csv");
    detail::write_manifest(dir, cfg, stage, wall.seconds(), outputs);

    return {dir, variant, rr.mean_return(), rr.mean_return() / double(cfg.t),
            rr.episode_returns};
}

}  // namespace d2t::pipeline
