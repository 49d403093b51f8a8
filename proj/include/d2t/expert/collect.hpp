#pragma once

#include <vector>

#include "d2t/channel/env.hpp"
#include "d2t/diffusion/vectorize.hpp"
#include "d2t/dt/trajectory.hpp"
#include "d2t/expert/optimizer.hpp"

namespace d2t::expert {

// Rolls one episode with the phase optimizer acting on the true channel and
// records states (raw flattened channels), canonical actions, rewards, and the
// pilots observed before each action. Deterministic in (env config, episode).
inline dt::Trajectory expert_episode(channel::Environment& env, const ExpertConfig& cfg,
                                     uint32_t env_id, uint64_t episode) {
    const auto& ec = env.config();
    const int T = ec.T;
    dt::Trajectory tr;
    tr.env_id = env_id;
    tr.rewards.resize(T);
    tr.states.resize(T, 2 * ec.N * ec.M);
    tr.actions.resize(T, ec.N);
    tr.pilots.resize(T, channel::pilot_dim(ec));

    channel::StepResult sr = env.reset(episode);
    for (int t = 0; t < T; ++t) {
        const channel::CMat& H = env.current().H;
        tr.states.row(t) = diffusion::channel_to_vector(H).transpose();
        tr.pilots.row(t) = sr.pilot.y.transpose();
        Rng orng(tag_seed(mix_seed(mix_seed(ec.seed, episode), uint64_t(t)), "expert"));
        const RVec action = optimize_phases(H, cfg, orng);
        tr.actions.row(t) = action.transpose();
        sr = env.step(action);
        tr.rewards[t] = sr.reward;
    }
    tr.returns_to_go = dt::compute_returns_to_go(tr.rewards);
    return tr;
}

// Multi-environment corpus: `episodes` expert episodes per environment, tagged
// by position in `envs`. All environments must share geometry (N, M, T).
inline dt::TrajectoryBuffer collect_trajectories(std::vector<channel::Environment>& envs,
                                                 const ExpertConfig& cfg, int episodes) {
    if (envs.empty()) throw channel::EnvError("collect needs at least one environment");
    const auto& first = envs.front().config();
    dt::TrajectoryBuffer buf(first.N, first.M, first.T, channel::pilot_dim(first));
    for (size_t e = 0; e < envs.size(); ++e) {
        const auto& ec = envs[e].config();
        if (ec.N != first.N || ec.M != first.M || ec.T != first.T)
            throw channel::EnvError("environments in one corpus must share N, M, T");
        for (int ep = 0; ep < episodes; ++ep)
            buf.add(expert_episode(envs[e], cfg, static_cast<uint32_t>(e),
                                   static_cast<uint64_t>(ep)));
    }
    return buf;
}

// Deliberately weakened expert (few iterations, single start) standing in for
// partially trained demonstrations on a new environment.
inline ExpertConfig suboptimal(const ExpertConfig& cfg) {
    ExpertConfig weak = cfg;
    weak.restarts = 1;
    weak.max_iters = 10;
    return weak;
}

inline dt::TrajectoryBuffer make_fewshot_buffer(channel::Environment& env,
                                                const ExpertConfig& cfg, int episodes,
                                                uint32_t env_id) {
    const auto& ec = env.config();
    dt::TrajectoryBuffer buf(ec.N, ec.M, ec.T, channel::pilot_dim(ec));
    const ExpertConfig weak = suboptimal(cfg);
    for (int ep = 0; ep < episodes; ++ep)
        buf.add(expert_episode(env, weak, env_id, static_cast<uint64_t>(ep)));
    return buf;
}

}  // namespace d2t::expert
