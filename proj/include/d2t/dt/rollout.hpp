#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "d2t/channel/env.hpp"
#include "d2t/diffusion/model.hpp"
#include "d2t/diffusion/vectorize.hpp"
#include "d2t/dt/model.hpp"
#include "d2t/expert/optimizer.hpp"
#include "d2t/rng.hpp"

namespace d2t::dt {

struct RolloutConfig {
    double target_return = 0;    // initial return-to-go fed to the policy
    Index episodes = 10;         // evaluated in lockstep
    uint64_t first_episode = 0;  // env episode ids run first..first+episodes-1
};

struct RolloutResult {
    Eigen::VectorXd episode_returns;  // [episodes]
    nn::MatX<double> rewards;         // [episodes, T]

    double mean_return() const {
        return episode_returns.size() == 0 ? 0.0 : episode_returns.mean();
    }
};

// Maps the current slot to the policy's state rows, one per environment. The
// key is distinct per (rollout, slot) so stochastic providers stay replayable.
using StateProvider = std::function<nn::MatX<double>(
    const std::vector<channel::ChannelRealization>& chans, const nn::MatX<double>& pilots,
    uint64_t key)>;

// exact flattened channels (perfect-CSI control arm)
inline StateProvider true_state_provider() {
    return [](const std::vector<channel::ChannelRealization>& chans,
              const nn::MatX<double>&, uint64_t) {
        const Index e = static_cast<Index>(chans.size());
        const Index sd = 2 * chans[0].H.rows() * chans[0].H.cols();
        nn::MatX<double> s(e, sd);
        for (Index i = 0; i < e; ++i)
            s.row(i) = diffusion::channel_to_vector(chans[static_cast<size_t>(i)].H)
                           .transpose();
        return s;
    };
}

// channels sampled from the denoiser conditioned on the observed pilots
template <class S>
StateProvider diffusion_state_provider(diffusion::DiffusionModel<S>& dm, uint64_t seed) {
    return [&dm, seed](const std::vector<channel::ChannelRealization>&,
                       const nn::MatX<double>& pilots, uint64_t key) {
        Rng rng(tag_seed(mix_seed(seed, key), "dm-sample"));
        const nn::MatX<S> cond = pilots.template cast<S>();
        return nn::MatX<double>(
            diffusion::reverse_sample(dm, cond, rng).template cast<double>());
    };
}

// Return-conditioned evaluation: the policy sees (return-to-go, state) pairs
// plus its own past actions, with the return-to-go decremented by realised
// rewards as the episode unwinds.
template <class S>
RolloutResult rollout_policy(const channel::EnvConfig& cfg, DtModel<S>& model,
                             const StateProvider& provider, const RolloutConfig& rc) {
    nn::require(rc.episodes >= 1, "rollout: need at least one episode");
    const Index e_cnt = rc.episodes;
    const Index t_len = cfg.T;
    const Index sd = 2 * cfg.N * cfg.M;
    nn::require(model.config().state_dim == sd && model.config().act_dim == cfg.N,
                "rollout: model geometry does not match the environment");

    std::vector<channel::Environment> envs(static_cast<size_t>(e_cnt),
                                           channel::Environment(cfg));
    std::vector<channel::ChannelRealization> chans(static_cast<size_t>(e_cnt));
    nn::MatX<double> pilots(e_cnt, channel::pilot_dim(cfg));
    for (Index i = 0; i < e_cnt; ++i) {
        auto r0 = envs[static_cast<size_t>(i)].reset(rc.first_episode + uint64_t(i));
        chans[static_cast<size_t>(i)] = r0.next;
        pilots.row(i) = r0.pilot.y.transpose();
    }

    nn::MatX<double> rtg_hist(e_cnt, t_len);
    nn::MatX<double> state_hist = nn::MatX<double>::Zero(e_cnt * t_len, sd);
    nn::MatX<double> act_hist = nn::MatX<double>::Zero(e_cnt * t_len, cfg.N);
    Eigen::VectorXd rtg = Eigen::VectorXd::Constant(e_cnt, rc.target_return);

    RolloutResult res;
    res.rewards.resize(e_cnt, t_len);
    for (Index t = 0; t < t_len; ++t) {
        const nn::MatX<double> states_t =
            provider(chans, pilots, mix_seed(rc.first_episode, uint64_t(t)));
        nn::require(states_t.rows() == e_cnt && states_t.cols() == sd,
                    "rollout: provider returned wrong geometry");

        // trim histories to the slots filled so far, rows packed per episode
        nn::MatX<double> rtg_sub(e_cnt, t + 1);
        nn::MatX<double> state_sub((t + 1) * e_cnt, sd);
        nn::MatX<double> act_sub((t + 1) * e_cnt, cfg.N);
        for (Index i = 0; i < e_cnt; ++i) {
            rtg_hist(i, t) = rtg[i];
            state_hist.row(i * t_len + t) = states_t.row(i);
            act_hist.row(i * t_len + t).setZero();  // slot being decided
            rtg_sub.row(i) = rtg_hist.row(i).head(t + 1);
            state_sub.middleRows(i * (t + 1), t + 1) = state_hist.middleRows(i * t_len, t + 1);
            act_sub.middleRows(i * (t + 1), t + 1) = act_hist.middleRows(i * t_len, t + 1);
        }
        const nn::MatX<double> actions =
            model.act(rtg_sub, state_sub, act_sub).template cast<double>();

        for (Index i = 0; i < e_cnt; ++i) {
            act_hist.row(i * t_len + t) = actions.row(i);
            auto sr = envs[static_cast<size_t>(i)].step(actions.row(i).transpose());
            res.rewards(i, t) = sr.reward;
            rtg[i] -= sr.reward;
            if (t + 1 < t_len) {
                chans[static_cast<size_t>(i)] = sr.next;
                pilots.row(i) = sr.pilot.y.transpose();
            }
        }
    }
    res.episode_returns = res.rewards.rowwise().sum();
    return res;
}

// uniform random phases, the floor any learned policy must clear
inline RolloutResult rollout_random(const channel::EnvConfig& cfg, const RolloutConfig& rc,
                                    uint64_t seed) {
    nn::require(rc.episodes >= 1, "rollout: need at least one episode");
    RolloutResult res;
    res.rewards.resize(rc.episodes, cfg.T);
    for (Index i = 0; i < rc.episodes; ++i) {
        channel::Environment env(cfg);
        env.reset(rc.first_episode + uint64_t(i));
        Rng rng(tag_seed(mix_seed(seed, rc.first_episode + uint64_t(i)), "random-policy"));
        for (Index t = 0; t < cfg.T; ++t) {
            channel::RVec a(cfg.N);
            for (Index n = 0; n < cfg.N; ++n) a[n] = rng.uniform(-M_PI, M_PI);
            res.rewards(i, t) = env.step(a).reward;
        }
    }
    res.episode_returns = res.rewards.rowwise().sum();
    return res;
}

// per-slot phase optimisation on the true channel, the reference upper line
inline RolloutResult rollout_expert(const channel::EnvConfig& cfg,
                                    const expert::ExpertConfig& xcfg,
                                    const RolloutConfig& rc) {
    nn::require(rc.episodes >= 1, "rollout: need at least one episode");
    RolloutResult res;
    res.rewards.resize(rc.episodes, cfg.T);
    for (Index i = 0; i < rc.episodes; ++i) {
        channel::Environment env(cfg);
        const uint64_t episode = rc.first_episode + uint64_t(i);
        env.reset(episode);
        for (Index t = 0; t < cfg.T; ++t) {
            Rng orng(tag_seed(mix_seed(mix_seed(cfg.seed, episode), uint64_t(t)), "expert"));
            const channel::RVec a = expert::optimize_phases(env.current().H, xcfg, orng);
            res.rewards(i, t) = env.step(a).reward;
        }
    }
    res.episode_returns = res.rewards.rowwise().sum();
    return res;
}

}  // namespace d2t::dt
