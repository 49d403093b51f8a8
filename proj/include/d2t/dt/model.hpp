#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "d2t/dt/trajectory.hpp"
#include "d2t/nn/adamw.hpp"
#include "d2t/nn/checkpoint.hpp"
#include "d2t/nn/layers.hpp"
#include "d2t/nn/tape.hpp"
#include "d2t/rng.hpp"

namespace d2t::dt {

// Return-conditioned sequence policy. Each timestep contributes three tokens
// (return-to-go, state, previous-free action slot); the action prediction is
// read at the state token, so it conditions on everything up to and including
// the current state but not on the action being predicted.
template <class S>
class DtModel {
  public:
    struct Config {
        Index context = 20;    // timesteps kept in the attention window
        Index state_dim = 0;   // flattened channel vector length
        Index act_dim = 0;     // phases per action
        Index width = 256;
        Index blocks = 3;
        Index heads = 4;
        double dropout = 0.1;
    };

    DtModel(Config cfg, uint64_t seed) : cfg_(cfg) {
        nn::require(cfg_.context >= 1 && cfg_.state_dim >= 1 && cfg_.act_dim >= 1,
                    "dt model: bad geometry");
        nn::require(cfg_.width >= cfg_.heads && cfg_.width % cfg_.heads == 0,
                    "dt model: heads must divide width");
        Rng rng(tag_seed(seed, "dt-init"));
        const Index w = cfg_.width;
        nn::init_layer_params<S>({.kind = "dense", .in = 1, .out = w}, "embed.rtg", ps_, rng);
        nn::init_layer_params<S>({.kind = "dense", .in = cfg_.state_dim, .out = w},
                                 "embed.state", ps_, rng);
        nn::init_layer_params<S>({.kind = "dense", .in = 2 * cfg_.act_dim, .out = w},
                                 "embed.act", ps_, rng);
        ps_.add("embed.pos", nn::init_embedding<S>(cfg_.context, w, rng));
        for (Index i = 0; i < cfg_.blocks; ++i) {
            const std::string p = "blk" + std::to_string(i);
            nn::init_layer_params<S>({.kind = "layer-norm", .out = w}, p + ".ln1", ps_, rng);
            nn::init_layer_params<S>(
                {.kind = "causal-self-attention", .in = w, .out = w, .heads = cfg_.heads},
                p + ".attn", ps_, rng);
            nn::init_layer_params<S>({.kind = "layer-norm", .out = w}, p + ".ln2", ps_, rng);
            nn::init_layer_params<S>({.kind = "dense", .in = w, .out = 4 * w}, p + ".fc1",
                                     ps_, rng);
            nn::init_layer_params<S>({.kind = "dense", .in = 4 * w, .out = w}, p + ".fc2",
                                     ps_, rng);
        }
        nn::init_layer_params<S>({.kind = "layer-norm", .out = w}, "head.ln", ps_, rng);
        nn::init_layer_params<S>({.kind = "dense", .in = w, .out = cfg_.act_dim}, "head.out",
                                 ps_, rng);
        // small head keeps early outputs near zero, clear of tanh saturation
        ps_["head.out.w"].v *= S(0.01);
    }

    const Config& config() const { return cfg_; }
    nn::ParamStore<S>& params() { return ps_; }
    const nn::ParamStore<S>& params() const { return ps_; }
    double state_scale() const { return state_scale_; }
    double rtg_scale() const { return rtg_scale_; }
    void set_scales(double state_scale, double rtg_scale) {
        nn::require(state_scale > 0 && rtg_scale > 0, "dt model: scales must be positive");
        state_scale_ = state_scale;
        rtg_scale_ = rtg_scale;
    }

    // Sequences enter pre-scaled: rtg [B,w], states [B*w, state_dim] with row
    // b*w+t, actions as raw angles [B*w, act_dim]. Returns the [B*w, act_dim]
    // node of predicted angles in (-pi, pi).
    typename nn::Tape<S>::Id forward(nn::Tape<S>& tp, const nn::MatX<S>& rtg,
                                     const nn::MatX<S>& states, const nn::MatX<S>& acts,
                                     bool train, Rng& drop_rng) {
        const Index b = rtg.rows(), w = rtg.cols();
        nn::require(w >= 1 && w <= cfg_.context, "dt forward: sequence length out of range");
        nn::require(states.rows() == b * w && states.cols() == cfg_.state_dim &&
                        acts.rows() == b * w && acts.cols() == cfg_.act_dim,
                    "dt forward: input geometry mismatch");
        const Index rows = b * w;
        const Index width = cfg_.width;

        nn::MatX<S> acts_cs(rows, 2 * cfg_.act_dim);
        acts_cs.leftCols(cfg_.act_dim) = acts.array().cos().matrix();
        acts_cs.rightCols(cfg_.act_dim) = acts.array().sin().matrix();

        auto rtg_id = tp.input({rows, 1}, Eigen::Map<const nn::VecX<S>>(rtg.data(), rows));
        auto st_id = tp.input({rows, cfg_.state_dim},
                              Eigen::Map<const nn::VecX<S>>(states.data(), states.size()));
        auto ac_id = tp.input({rows, 2 * cfg_.act_dim},
                              Eigen::Map<const nn::VecX<S>>(acts_cs.data(), acts_cs.size()));

        std::vector<Index> pos_idx(static_cast<size_t>(rows));
        for (Index i = 0; i < b; ++i)
            for (Index t = 0; t < w; ++t) pos_idx[static_cast<size_t>(i * w + t)] = t;
        auto pos = nn::embedding(tp, tp.param(ps_["embed.pos"]), pos_idx);

        auto r_tok = nn::add(tp, dense_fwd(tp, "embed.rtg", rtg_id), pos);
        auto s_tok = nn::add(tp, dense_fwd(tp, "embed.state", st_id), pos);
        auto a_tok = nn::add(tp, dense_fwd(tp, "embed.act", ac_id), pos);

        // interleave the three streams into (rtg_t, s_t, a_t) token order
        auto cat = nn::concat_rows(tp, nn::concat_rows(tp, r_tok, s_tok), a_tok);
        std::vector<Index> perm(static_cast<size_t>(3 * rows));
        for (Index i = 0; i < b; ++i)
            for (Index t = 0; t < w; ++t)
                for (Index j = 0; j < 3; ++j)
                    perm[static_cast<size_t>(i * 3 * w + 3 * t + j)] = j * rows + i * w + t;
        auto x = nn::gather_rows(tp, cat, perm);

        for (Index i = 0; i < cfg_.blocks; ++i) {
            const std::string p = "blk" + std::to_string(i);
            auto h = nn::layer_norm(tp, x, tp.param(ps_[p + ".ln1.gain"]),
                                    tp.param(ps_[p + ".ln1.bias"]));
            nn::AttentionParams ap{tp.param(ps_[p + ".attn.wq"]), tp.param(ps_[p + ".attn.bq"]),
                                   tp.param(ps_[p + ".attn.wk"]), tp.param(ps_[p + ".attn.bk"]),
                                   tp.param(ps_[p + ".attn.wv"]), tp.param(ps_[p + ".attn.bv"]),
                                   tp.param(ps_[p + ".attn.wo"]), tp.param(ps_[p + ".attn.bo"])};
            auto at = nn::causal_self_attention(
                tp, nn::reshape(tp, h, {b, 3 * w, width}), ap, cfg_.heads);
            auto atf = nn::dropout(tp, nn::reshape(tp, at, {3 * rows, width}), cfg_.dropout,
                                   drop_rng, train);
            x = nn::add(tp, x, atf);

            auto h2 = nn::layer_norm(tp, x, tp.param(ps_[p + ".ln2.gain"]),
                                     tp.param(ps_[p + ".ln2.bias"]));
            auto m = dense_fwd(tp, p + ".fc1", h2);
            m = nn::activation(tp, m, nn::Act::Gelu);
            m = dense_fwd(tp, p + ".fc2", m);
            m = nn::dropout(tp, m, cfg_.dropout, drop_rng, train);
            x = nn::add(tp, x, m);
        }

        std::vector<Index> s_pos(static_cast<size_t>(rows));
        for (Index i = 0; i < b; ++i)
            for (Index t = 0; t < w; ++t)
                s_pos[static_cast<size_t>(i * w + t)] = i * 3 * w + 3 * t + 1;
        auto read = nn::gather_rows(tp, x, s_pos);
        read = nn::layer_norm(tp, read, tp.param(ps_["head.ln.gain"]),
                              tp.param(ps_["head.ln.bias"]));
        read = dense_fwd(tp, "head.out", read);
        read = nn::activation(tp, read, nn::Act::Tanh);
        return nn::scale(tp, read, S(M_PI));
    }

    // Greedy batched action for the latest timestep. Histories carry raw
    // units; rows follow the same b*w+t layout as forward. Only the trailing
    // `context` steps are kept.
    nn::MatX<S> act(const nn::MatX<double>& rtg_hist, const nn::MatX<double>& state_hist,
                    const nn::MatX<double>& act_hist) {
        const Index b = rtg_hist.rows();
        const Index t_all = rtg_hist.cols();
        nn::require(b >= 1 && t_all >= 1, "dt act: empty history");
        const Index w = std::min(t_all, cfg_.context);
        const Index off = t_all - w;

        nn::MatX<S> rtg(b, w);
        nn::MatX<S> states(b * w, cfg_.state_dim);
        nn::MatX<S> acts(b * w, cfg_.act_dim);
        for (Index i = 0; i < b; ++i)
            for (Index t = 0; t < w; ++t) {
                rtg(i, t) = S(rtg_hist(i, off + t) / rtg_scale_);
                states.row(i * w + t) =
                    (state_hist.row(i * t_all + off + t) / state_scale_).template cast<S>();
                acts.row(i * w + t) = act_hist.row(i * t_all + off + t).template cast<S>();
            }

        nn::Tape<S> tp;
        Rng dummy(0);
        auto out = forward(tp, rtg, states, acts, false, dummy);
        nn::MatX<S> result(b, cfg_.act_dim);
        const auto& v = tp.val(out);
        for (Index i = 0; i < b; ++i)
            result.row(i) = Eigen::Map<const nn::VecX<S>>(
                                v.data() + (i * w + w - 1) * cfg_.act_dim, cfg_.act_dim)
                                .transpose();
        return result;
    }

    void save(const std::string& path) const {
        nn::ParamStore<S> out;
        for (Index i = 0; i < ps_.count(); ++i) {
            nn::Tensor<S> copy = ps_.at(i);
            out.add(ps_.name(i), std::move(copy));
        }
        out.add("meta.dt",
                nn::Tensor<S>::from({7}, {S(cfg_.context), S(cfg_.state_dim), S(cfg_.act_dim),
                                          S(cfg_.width), S(cfg_.blocks), S(cfg_.heads),
                                          S(cfg_.dropout)}));
        out.add("meta.scales", nn::Tensor<S>::from({2}, {S(state_scale_), S(rtg_scale_)}));
        nn::save_store(out, path);
    }

    static DtModel load(const std::string& path) {
        nn::ParamStore<S> in;
        nn::load_store(in, path);
        const auto& mc = in["meta.dt"];
        Config cfg;
        cfg.context = Index(mc.v[0]);
        cfg.state_dim = Index(mc.v[1]);
        cfg.act_dim = Index(mc.v[2]);
        cfg.width = Index(mc.v[3]);
        cfg.blocks = Index(mc.v[4]);
        cfg.heads = Index(mc.v[5]);
        cfg.dropout = double(mc.v[6]);
        DtModel m(cfg, 0);
        const auto& sc = in["meta.scales"];
        m.set_scales(double(sc.v[0]), double(sc.v[1]));
        for (Index i = 0; i < m.ps_.count(); ++i) {
            const auto& src = in[m.ps_.name(i)];
            nn::require(src.shape == m.ps_.at(i).shape,
                        "dt load: shape mismatch for " + m.ps_.name(i));
            m.ps_.at(i).v = src.v;
        }
        return m;
    }

  private:
    typename nn::Tape<S>::Id dense_fwd(nn::Tape<S>& tp, const std::string& name,
                                       typename nn::Tape<S>::Id x) {
        return nn::dense(tp, x, tp.param(ps_[name + ".w"]), tp.param(ps_[name + ".b"]));
    }

    Config cfg_;
    nn::ParamStore<S> ps_;
    double state_scale_ = 1.0;
    double rtg_scale_ = 1.0;
};

// Training view of a buffer: per-episode sequences with shared scale factors.
template <class S>
struct DtDataset {
    nn::MatX<S> rtg;    // [episodes, T], divided by rtg_scale
    nn::MatX<S> states; // [episodes*T, state_dim], divided by state_scale
    nn::MatX<S> acts;   // [episodes*T, act_dim], raw angles
    double state_scale = 1.0;
    double rtg_scale = 1.0;
    Index episodes = 0;
    Index t = 0;
};

// Overload with caller-supplied scales, used when fine-tuning must keep the
// normalization the pre-trained model was fitted with.
template <class S>
DtDataset<S> build_dt_dataset(const TrajectoryBuffer& buf, double state_scale,
                              double rtg_scale) {
    nn::require(!buf.empty(), "dt dataset: empty buffer");
    nn::require(state_scale > 0 && rtg_scale > 0, "dt dataset: scales must be positive");
    DtDataset<S> ds;
    ds.episodes = buf.size();
    ds.t = buf.t();
    const Index sd = 2 * buf.n() * buf.m();
    ds.state_scale = state_scale;
    ds.rtg_scale = rtg_scale;

    ds.rtg.resize(ds.episodes, ds.t);
    ds.states.resize(ds.episodes * ds.t, sd);
    ds.acts.resize(ds.episodes * ds.t, buf.n());
    for (Index e = 0; e < ds.episodes; ++e) {
        const auto& tr = buf.at(e);
        for (Index t = 0; t < ds.t; ++t) {
            ds.rtg(e, t) = S(tr.returns_to_go[t] / ds.rtg_scale);
            ds.states.row(e * ds.t + t) = (tr.states.row(t) / ds.state_scale).template cast<S>();
            ds.acts.row(e * ds.t + t) = tr.actions.row(t).template cast<S>();
        }
    }
    return ds;
}

template <class S>
DtDataset<S> build_dt_dataset(const TrajectoryBuffer& buf) {
    nn::require(!buf.empty(), "dt dataset: empty buffer");
    const Index sd = 2 * buf.n() * buf.m();
    double sq = 0;
    for (const auto& tr : buf.items()) sq += tr.states.array().square().sum();
    const double rms = std::sqrt(sq / double(buf.size() * buf.t() * sd));
    const double peak = buf.max_slot_reward();
    return build_dt_dataset<S>(buf, rms > 1e-12 ? rms : 1.0,
                               peak > 1e-12 ? double(buf.t()) * peak : 1.0);
}

// One behaviour-cloning step on `batch` episodes drawn with replacement.
// The angular loss wraps differences, so +-pi boundaries do not spike.
template <class S>
double dt_train_step(DtModel<S>& model, const DtDataset<S>& ds, Index batch, Rng& rng,
                     nn::AdamW<S>& opt) {
    nn::require(batch >= 1 && ds.episodes >= 1, "dt_train_step: empty batch or dataset");
    const Index w = ds.t;
    const Index sd = ds.states.cols();
    const Index ad = ds.acts.cols();

    nn::MatX<S> rtg(batch, w);
    nn::MatX<S> states(batch * w, sd);
    nn::MatX<S> acts(batch * w, ad);
    for (Index i = 0; i < batch; ++i) {
        const Index e = Index(rng.integer(uint64_t(ds.episodes)));
        rtg.row(i) = ds.rtg.row(e);
        states.middleRows(i * w, w) = ds.states.middleRows(e * w, w);
        acts.middleRows(i * w, w) = ds.acts.middleRows(e * w, w);
    }
    nn::VecX<S> target = Eigen::Map<const nn::VecX<S>>(acts.data(), acts.size());

    nn::Tape<S> tp;
    model.params().zero_grad();
    auto pred = model.forward(tp, rtg, states, acts, true, rng);
    auto loss = nn::angle_mse(tp, pred, target);
    tp.backward(loss);
    opt.step();
    return double(tp.val(loss)[0]);
}

}  // namespace d2t::dt
