#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "d2t/channel/env.hpp"
#include "d2t/expert/optimizer.hpp"
#include "d2t/rng.hpp"
#include "json.hpp"

namespace d2t::pipeline {

using nlohmann::json;

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// One propagation scenario; geometry (N, M, T) and the pilot protocol are
// shared across a run and live on the top-level config.
struct EnvPreset {
    std::string name = "env";
    double d1 = 22.0, d2 = 8.0;
    double kappa1 = 10.0, kappa2 = 10.0;
    double xi1 = 2.2, xi2 = 2.8;
    double l0_db = -30.0, d0 = 1.0;
    double p_dbm = 5.0, noise_dbm = -90.0;
    uint64_t seed = 1;
};

struct CollectSettings {
    int episodes_per_env = 50;
    int fewshot_episodes = 5;
};

struct DmSettings {
    int k = 500;
    double beta_min = 1e-4, beta_max = 0.02;
    double eta = 0.8;
    bool cfg_dropout = false;
    double dropout_p = 0.1;
    int base_width = 32, emb_width = 512, levels = 6;
    int steps = 10000, batch = 64;
    double lr = 1e-4, weight_decay = 0.01;
};

struct DtSettings {
    int width = 256, blocks = 3, heads = 4;
    double dropout = 0.1;
    int steps = 5000, batch = 64;
    double lr = 1e-4, weight_decay = 0.01;
    int finetune_steps = 500, finetune_batch = 8;
    double finetune_lr = 1e-5;
    int eval_every = 50;  // learning-curve cadence during fine-tuning
};

struct EvalSettings {
    int episodes = 20;
    uint64_t first_episode = 1000;  // clear of the collection episode ids
    double target_return_factor = 1.1;
    int histogram_bins = 40;
    int histogram_episodes = 10;
};

struct ExperimentConfig {
    int n = 16, m = 4, t = 20;
    uint64_t pilot_seed = 9000;
    int pilot_reps = 8;
    std::vector<EnvPreset> train_envs;
    EnvPreset heldout;
    expert::ExpertConfig expert;
    CollectSettings collect;
    DmSettings dm;
    DtSettings dt;
    EvalSettings eval;
    std::string out = "out";
    uint64_t seed = 1;

    static ExperimentConfig defaults();
    static ExperimentConfig from_json(const json& j);
    json to_json() const;
    void validate() const;

    channel::EnvConfig make_env(const EnvPreset& p) const {
        channel::EnvConfig e;
        e.M = m;
        e.N = n;
        e.T = t;
        e.P_mw = channel::dbm_to_mw(p.p_dbm);
        e.sigma2_mw = channel::dbm_to_mw(p.noise_dbm);
        e.kappa1 = p.kappa1;
        e.kappa2 = p.kappa2;
        e.xi1 = p.xi1;
        e.xi2 = p.xi2;
        e.d0 = p.d0;
        e.d1 = p.d1;
        e.d2 = p.d2;
        e.L0_db = p.l0_db;
        e.seed = p.seed;
        e.pilot_seed = pilot_seed;
        e.pilot_reps = pilot_reps;
        e.angles = channel::draw_los_angles(p.seed);
        e.validate();
        return e;
    }
};

namespace detail {

inline void check_keys(const json& j, const std::string& ctx,
                       std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError(ctx + ": expected an object");
    for (const auto& item : j.items()) {
        bool ok = false;
        for (const char* k : allowed)
            if (item.key() == k) {
                ok = true;
                break;
            }
        if (!ok) throw ConfigError(ctx + ": unknown key '" + item.key() + "'");
    }
}

template <class T>
void take(const json& j, const std::string& ctx, const char* key, T& slot) {
    if (!j.contains(key)) return;
    try {
        slot = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(ctx + "." + key + ": " + e.what());
    }
}

inline EnvPreset parse_preset(const json& j, const std::string& ctx, EnvPreset base) {
    check_keys(j, ctx,
               {"name", "d1", "d2", "kappa1", "kappa2", "xi1", "xi2", "l0_db", "d0", "p_dbm",
                "noise_dbm", "seed"});
    take(j, ctx, "name", base.name);
    take(j, ctx, "d1", base.d1);
    take(j, ctx, "d2", base.d2);
    take(j, ctx, "kappa1", base.kappa1);
    take(j, ctx, "kappa2", base.kappa2);
    take(j, ctx, "xi1", base.xi1);
    take(j, ctx, "xi2", base.xi2);
    take(j, ctx, "l0_db", base.l0_db);
    take(j, ctx, "d0", base.d0);
    take(j, ctx, "p_dbm", base.p_dbm);
    take(j, ctx, "noise_dbm", base.noise_dbm);
    take(j, ctx, "seed", base.seed);
    return base;
}

inline json preset_json(const EnvPreset& p) {
    return json{{"name", p.name},       {"d1", p.d1},
                {"d2", p.d2},           {"kappa1", p.kappa1},
                {"kappa2", p.kappa2},   {"xi1", p.xi1},
                {"xi2", p.xi2},         {"l0_db", p.l0_db},
                {"d0", p.d0},           {"p_dbm", p.p_dbm},
                {"noise_dbm", p.noise_dbm}, {"seed", p.seed}};
}

}  // namespace detail

inline ExperimentConfig ExperimentConfig::defaults() {
    ExperimentConfig c;
    EnvPreset urban{.name = "urban", .d1 = 22.0, .d2 = 8.0, .kappa1 = 10.0, .kappa2 = 10.0,
                    .xi1 = 2.2, .xi2 = 2.8, .seed = 101};
    EnvPreset suburban{.name = "suburban", .d1 = 28.0, .d2 = 9.0, .kappa1 = 6.0,
                       .kappa2 = 8.0, .xi1 = 2.2, .xi2 = 2.6, .seed = 202};
    EnvPreset rural{.name = "rural", .d1 = 35.0, .d2 = 10.0, .kappa1 = 14.0, .kappa2 = 12.0,
                    .xi1 = 2.2, .xi2 = 2.4, .seed = 303};
    c.train_envs = {urban, suburban, rural};
    c.heldout = EnvPreset{.name = "coastal", .d1 = 25.0, .d2 = 8.5, .kappa1 = 8.0,
                          .kappa2 = 9.0, .xi1 = 2.2, .xi2 = 2.7, .seed = 404};
    return c;
}

inline ExperimentConfig ExperimentConfig::from_json(const json& j) {
    using detail::check_keys;
    using detail::take;
    ExperimentConfig c = defaults();
    check_keys(j, "config",
               {"geometry", "pilot", "envs", "expert", "collect", "dm", "dt", "eval", "out",
                "seed"});
    if (j.contains("geometry")) {
        const auto& g = j.at("geometry");
        check_keys(g, "geometry", {"n", "m", "t"});
        take(g, "geometry", "n", c.n);
        take(g, "geometry", "m", c.m);
        take(g, "geometry", "t", c.t);
    }
    if (j.contains("pilot")) {
        const auto& p = j.at("pilot");
        check_keys(p, "pilot", {"seed", "reps"});
        take(p, "pilot", "seed", c.pilot_seed);
        take(p, "pilot", "reps", c.pilot_reps);
    }
    if (j.contains("envs")) {
        const auto& e = j.at("envs");
        check_keys(e, "envs", {"train", "heldout"});
        if (e.contains("train")) {
            if (!e.at("train").is_array() || e.at("train").empty())
                throw ConfigError("envs.train: expected a non-empty array");
            c.train_envs.clear();
            int idx = 0;
            for (const auto& pj : e.at("train")) {
                EnvPreset base;
                base.name = "env" + std::to_string(idx);
                c.train_envs.push_back(detail::parse_preset(
                    pj, "envs.train[" + std::to_string(idx) + "]", base));
                ++idx;
            }
        }
        if (e.contains("heldout"))
            c.heldout = detail::parse_preset(e.at("heldout"), "envs.heldout", EnvPreset{});
    }
    if (j.contains("expert")) {
        const auto& x = j.at("expert");
        check_keys(x, "expert", {"restarts", "max_iters", "step0", "tol", "armijo_c",
                                 "oracle_q"});
        take(x, "expert", "restarts", c.expert.restarts);
        take(x, "expert", "max_iters", c.expert.max_iters);
        take(x, "expert", "step0", c.expert.step0);
        take(x, "expert", "tol", c.expert.tol);
        take(x, "expert", "armijo_c", c.expert.armijo_c);
        take(x, "expert", "oracle_q", c.expert.oracle_q);
    }
    if (j.contains("collect")) {
        const auto& k = j.at("collect");
        check_keys(k, "collect", {"episodes_per_env", "fewshot_episodes"});
        take(k, "collect", "episodes_per_env", c.collect.episodes_per_env);
        take(k, "collect", "fewshot_episodes", c.collect.fewshot_episodes);
    }
    if (j.contains("dm")) {
        const auto& d = j.at("dm");
        check_keys(d, "dm",
                   {"k", "beta_min", "beta_max", "eta", "cfg_dropout", "dropout_p",
                    "base_width", "emb_width", "levels", "steps", "batch", "lr",
                    "weight_decay"});
        take(d, "dm", "k", c.dm.k);
        take(d, "dm", "beta_min", c.dm.beta_min);
        take(d, "dm", "beta_max", c.dm.beta_max);
        take(d, "dm", "eta", c.dm.eta);
        take(d, "dm", "cfg_dropout", c.dm.cfg_dropout);
        take(d, "dm", "dropout_p", c.dm.dropout_p);
        take(d, "dm", "base_width", c.dm.base_width);
        take(d, "dm", "emb_width", c.dm.emb_width);
        take(d, "dm", "levels", c.dm.levels);
        take(d, "dm", "steps", c.dm.steps);
        take(d, "dm", "batch", c.dm.batch);
        take(d, "dm", "lr", c.dm.lr);
        take(d, "dm", "weight_decay", c.dm.weight_decay);
    }
    if (j.contains("dt")) {
        const auto& d = j.at("dt");
        check_keys(d, "dt",
                   {"width", "blocks", "heads", "dropout", "steps", "batch", "lr",
                    "weight_decay", "finetune_steps", "finetune_batch", "finetune_lr",
                    "eval_every"});
        take(d, "dt", "width", c.dt.width);
        take(d, "dt", "blocks", c.dt.blocks);
        take(d, "dt", "heads", c.dt.heads);
        take(d, "dt", "dropout", c.dt.dropout);
        take(d, "dt", "steps", c.dt.steps);
        take(d, "dt", "batch", c.dt.batch);
        take(d, "dt", "lr", c.dt.lr);
        take(d, "dt", "weight_decay", c.dt.weight_decay);
        take(d, "dt", "finetune_steps", c.dt.finetune_steps);
        take(d, "dt", "finetune_batch", c.dt.finetune_batch);
        take(d, "dt", "finetune_lr", c.dt.finetune_lr);
        take(d, "dt", "eval_every", c.dt.eval_every);
    }
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        check_keys(e, "eval",
                   {"episodes", "first_episode", "target_return_factor", "histogram_bins",
                    "histogram_episodes"});
        take(e, "eval", "episodes", c.eval.episodes);
        take(e, "eval", "first_episode", c.eval.first_episode);
        take(e, "eval", "target_return_factor", c.eval.target_return_factor);
        take(e, "eval", "histogram_bins", c.eval.histogram_bins);
        take(e, "eval", "histogram_episodes", c.eval.histogram_episodes);
    }
    take(j, "config", "out", c.out);
    take(j, "config", "seed", c.seed);
    c.validate();
    return c;
}

inline json ExperimentConfig::to_json() const {
    json tr = json::array();
    for (const auto& p : train_envs) tr.push_back(detail::preset_json(p));
    return json{
        {"geometry", {{"n", n}, {"m", m}, {"t", t}}},
        {"pilot", {{"seed", pilot_seed}, {"reps", pilot_reps}}},
        {"envs", {{"train", tr}, {"heldout", detail::preset_json(heldout)}}},
        {"expert",
         {{"restarts", expert.restarts},
          {"max_iters", expert.max_iters},
          {"step0", expert.step0},
          {"tol", expert.tol},
          {"armijo_c", expert.armijo_c},
          {"oracle_q", expert.oracle_q}}},
        {"collect",
         {{"episodes_per_env", collect.episodes_per_env},
          {"fewshot_episodes", collect.fewshot_episodes}}},
        {"dm",
         {{"k", dm.k},
          {"beta_min", dm.beta_min},
          {"beta_max", dm.beta_max},
          {"eta", dm.eta},
          {"cfg_dropout", dm.cfg_dropout},
          {"dropout_p", dm.dropout_p},
          {"base_width", dm.base_width},
          {"emb_width", dm.emb_width},
          {"levels", dm.levels},
          {"steps", dm.steps},
          {"batch", dm.batch},
          {"lr", dm.lr},
          {"weight_decay", dm.weight_decay}}},
        {"dt",
         {{"width", dt.width},
          {"blocks", dt.blocks},
          {"heads", dt.heads},
          {"dropout", dt.dropout},
          {"steps", dt.steps},
          {"batch", dt.batch},
          {"lr", dt.lr},
          {"weight_decay", dt.weight_decay},
          {"finetune_steps", dt.finetune_steps},
          {"finetune_batch", dt.finetune_batch},
          {"finetune_lr", dt.finetune_lr},
          {"eval_every", dt.eval_every}}},
        {"eval",
         {{"episodes", eval.episodes},
          {"first_episode", eval.first_episode},
          {"target_return_factor", eval.target_return_factor},
          {"histogram_bins", eval.histogram_bins},
          {"histogram_episodes", eval.histogram_episodes}}},
        {"out", out},
        {"seed", seed}};
}

inline void ExperimentConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
    if (n < 1 || m < 1 || t < 1) fail("geometry n, m, t must be >= 1");
    if (pilot_reps < 1) fail("pilot.reps must be >= 1");
    if (train_envs.empty()) fail("envs.train must not be empty");
    for (const auto& p : train_envs) make_env(p);  // throws with details if invalid
    make_env(heldout);
    if (expert.restarts < 1 || expert.max_iters < 1) fail("expert budgets must be >= 1");
    if (expert.oracle_q < 2) fail("expert.oracle_q must be >= 2");
    if (collect.episodes_per_env < 1) fail("collect.episodes_per_env must be >= 1");
    if (collect.fewshot_episodes < 0) fail("collect.fewshot_episodes must be >= 0");
    if (dm.k < 1) fail("dm.k must be >= 1");
    if (!(0 < dm.beta_min && dm.beta_min <= dm.beta_max && dm.beta_max < 1))
        fail("need 0 < dm.beta_min <= dm.beta_max < 1");
    if (!(0.0 <= dm.eta && dm.eta <= 1.0)) fail("dm.eta must lie in [0, 1]");
    if (!(0.0 <= dm.dropout_p && dm.dropout_p < 1.0)) fail("dm.dropout_p must lie in [0, 1)");
    if (dm.base_width < 4 || dm.emb_width < 2 || dm.levels < 1)
        fail("dm network dims too small");
    if (dm.steps < 1 || dm.batch < 1 || !(dm.lr > 0)) fail("dm training budget invalid");
    if (dt.width < 1 || dt.blocks < 1 || dt.heads < 1 || dt.width % dt.heads != 0)
        fail("dt.heads must divide dt.width");
    if (!(0.0 <= dt.dropout && dt.dropout < 1.0)) fail("dt.dropout must lie in [0, 1)");
    if (dt.steps < 1 || dt.batch < 1 || !(dt.lr > 0)) fail("dt training budget invalid");
    if (dt.finetune_steps < 0 || dt.finetune_batch < 1 || !(dt.finetune_lr > 0))
        fail("dt fine-tune budget invalid");
    if (dt.eval_every < 1) fail("dt.eval_every must be >= 1");
    if (eval.episodes < 1) fail("eval.episodes must be >= 1");
    if (!(eval.target_return_factor > 0)) fail("eval.target_return_factor must be positive");
    if (eval.histogram_bins < 2 || eval.histogram_episodes < 1)
        fail("eval histogram settings invalid");
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config parse error in " + path.string() + ": " + e.what());
    }
    return ExperimentConfig::from_json(j);
}

// Content address of one stage's outputs: any change to the resolved config
// or the seed lands the artifacts in a fresh directory.
inline uint64_t stage_hash(const ExperimentConfig& cfg, const std::string& stage) {
    return tag_seed(cfg.seed, stage + "\n" + cfg.to_json().dump());
}

inline std::string hash_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

inline std::filesystem::path stage_dir(const ExperimentConfig& cfg, const std::string& stage) {
    return std::filesystem::path(cfg.out) / stage / hash_hex(stage_hash(cfg, stage));
}

}  // namespace d2t::pipeline
