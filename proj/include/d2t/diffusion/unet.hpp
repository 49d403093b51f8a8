#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "d2t/nn/layers.hpp"
#include "d2t/nn/tape.hpp"
#include "d2t/nn/tensor.hpp"
#include "d2t/rng.hpp"

namespace d2t::diffusion {

using nn::Index;

// Noise-prediction network over flattened channel vectors. The sequence is
// treated as one channel of length D, run through a conv encoder/decoder with
// skip connections; every block receives the summed step and condition
// embeddings; the condition embedding is replaced by a learned token where the
// null mask is set.
template <class S>
class ConditionalUNet {
  public:
    struct Config {
        Index data_dim = 0;   // D = 2NM
        Index cond_dim = 0;   // pilot vector length
        Index base_width = 32;
        Index emb_width = 512;
        Index levels = 6;
    };

    ConditionalUNet(Config cfg, uint64_t seed) : cfg_(cfg) {
        nn::require(cfg_.data_dim >= 1 && cfg_.cond_dim >= 1, "unet: bad data/cond dims");
        nn::require(cfg_.base_width >= 4 && cfg_.levels >= 1, "unet: bad width/levels");

        // stride-2 levels until the bottleneck would drop below 4 positions
        n_half_ = 0;
        while (n_half_ < cfg_.levels && (cfg_.data_dim >> (n_half_ + 1)) >= 4) ++n_half_;
        const Index chunk = Index(1) << n_half_;
        padded_len_ = ((cfg_.data_dim + chunk - 1) / chunk) * chunk;

        enc_w_.resize(static_cast<size_t>(cfg_.levels));
        for (Index i = 0; i < cfg_.levels; ++i)
            enc_w_[static_cast<size_t>(i)] = cfg_.base_width * (Index(1) << (i / 2));

        Rng rng(tag_seed(seed, "unet-init"));
        const Index e = cfg_.emb_width;
        nn::init_layer_params<S>({.kind = "dense", .in = e, .out = e}, "time.fc", ps_, rng);
        nn::init_layer_params<S>({.kind = "dense", .in = cfg_.cond_dim, .out = e}, "cond.fc1",
                                 ps_, rng);
        nn::init_layer_params<S>({.kind = "dense", .in = e, .out = e}, "cond.fc2", ps_, rng);
        {
            nn::Tensor<S> nt = nn::Tensor<S>::zeros({e});
            for (Index i = 0; i < e; ++i) nt.v[i] = S(rng.normal(0.0, 0.02));
            ps_.add("null.token", std::move(nt));
        }
        for (Index i = 0; i < cfg_.levels; ++i) {
            const Index cin = i == 0 ? 1 : enc_w_[static_cast<size_t>(i - 1)];
            const Index cout = enc_w_[static_cast<size_t>(i)];
            add_block("enc" + std::to_string(i), cin, cout, rng);
        }
        for (Index j = 0; j < cfg_.levels; ++j) {
            const Index i = cfg_.levels - 1 - j;
            const Index skip_c = i == 0 ? 1 : enc_w_[static_cast<size_t>(i - 1)];
            const Index hin = j == 0 ? enc_w_[static_cast<size_t>(cfg_.levels - 1)]
                                     : dec_width(j - 1);
            add_block("dec" + std::to_string(j), hin + skip_c, dec_width(j), rng);
        }
        nn::init_layer_params<S>({.kind = "group-norm", .out = cfg_.base_width},
                                 "head.norm", ps_, rng);
        ps_.add("head.out.w", nn::Tensor<S>::zeros({1, cfg_.base_width, 1}));
        ps_.add("head.out.b", nn::Tensor<S>::zeros({1}));
    }

    const Config& config() const { return cfg_; }
    nn::ParamStore<S>& params() { return ps_; }
    const nn::ParamStore<S>& params() const { return ps_; }

    // x: [B, D] node; ks: per-example step indices; cond: [B, cond_dim] node;
    // null_cond: rows where the condition is replaced by the learned token
    typename nn::Tape<S>::Id forward(nn::Tape<S>& tp, typename nn::Tape<S>::Id x,
                                     const std::vector<int>& ks,
                                     typename nn::Tape<S>::Id cond,
                                     const std::vector<char>& null_cond) {
        const Index b = tp.shape(x)[0];
        nn::require(tp.shape(x) == nn::Shape{b, cfg_.data_dim}, "unet: x must be [B,D]");
        nn::require(tp.shape(cond) == nn::Shape{b, cfg_.cond_dim}, "unet: cond must be [B,C]");
        nn::require(static_cast<Index>(ks.size()) == b &&
                        static_cast<Index>(null_cond.size()) == b,
                    "unet: per-example step/null annotations must match the batch");

        auto e_t = nn::activation(tp, dense_fwd(tp, "time.fc", tp.input(sin_embedding(ks))),
                                  nn::Act::Silu);
        auto h_c = nn::activation(tp, dense_fwd(tp, "cond.fc1", cond), nn::Act::Silu);
        h_c = dense_fwd(tp, "cond.fc2", h_c);
        auto e_c = nn::row_select_mix(tp, h_c, tp.param(ps_["null.token"]), null_cond);
        auto emb = nn::add(tp, e_t, e_c);

        auto h = nn::pad_length(tp, nn::reshape(tp, x, {b, 1, cfg_.data_dim}), padded_len_);
        std::vector<typename nn::Tape<S>::Id> skips;
        for (Index i = 0; i < cfg_.levels; ++i) {
            skips.push_back(h);
            h = block_fwd(tp, "enc" + std::to_string(i), h, emb, i < n_half_ ? 2 : 1);
        }
        for (Index j = 0; j < cfg_.levels; ++j) {
            const Index i = cfg_.levels - 1 - j;
            if (i < n_half_) h = nn::upsample2(tp, h);
            h = nn::concat_channels(tp, h, skips[static_cast<size_t>(i)]);
            h = block_fwd(tp, "dec" + std::to_string(j), h, emb, 1);
        }
        h = nn::group_norm(tp, h, groups(cfg_.base_width), tp.param(ps_["head.norm.gain"]),
                           tp.param(ps_["head.norm.bias"]));
        h = nn::activation(tp, h, nn::Act::Silu);
        h = nn::conv1d(tp, h, tp.param(ps_["head.out.w"]), tp.param(ps_["head.out.b"]), 1);
        h = nn::crop_length(tp, h, cfg_.data_dim);
        return nn::reshape(tp, h, {b, cfg_.data_dim});
    }

    // value-only convenience pass
    nn::MatX<S> predict(const nn::MatX<S>& x, const std::vector<int>& ks,
                        const nn::MatX<S>& cond, const std::vector<char>& null_cond) {
        nn::Tape<S> tp;
        auto xid = tp.input({x.rows(), x.cols()},
                            Eigen::Map<const nn::VecX<S>>(x.data(), x.size()));
        auto cid = tp.input({cond.rows(), cond.cols()},
                            Eigen::Map<const nn::VecX<S>>(cond.data(), cond.size()));
        auto out = forward(tp, xid, ks, cid, null_cond);
        return Eigen::Map<const nn::MatX<S>>(tp.val(out).data(), x.rows(), x.cols());
    }

  private:
    static Index groups(Index c) { return c % 8 == 0 ? 8 : (c % 4 == 0 ? 4 : 1); }

    Index dec_width(Index j) const {
        const Index i = cfg_.levels - 1 - j;
        return i == 0 ? cfg_.base_width : enc_w_[static_cast<size_t>(i - 1)];
    }

    void add_block(const std::string& name, Index cin, Index cout, Rng& rng) {
        nn::init_layer_params<S>({.kind = "conv1d", .in = cin, .out = cout, .kernel = 3},
                                 name + ".conv", ps_, rng);
        nn::init_layer_params<S>({.kind = "dense", .in = cfg_.emb_width, .out = cout},
                                 name + ".emb", ps_, rng);
        nn::init_layer_params<S>({.kind = "group-norm", .out = cout}, name + ".norm", ps_,
                                 rng);
        nn::init_layer_params<S>({.kind = "conv1d", .in = cout, .out = cout, .kernel = 1},
                                 name + ".point", ps_, rng);
    }

    typename nn::Tape<S>::Id dense_fwd(nn::Tape<S>& tp, const std::string& name,
                                       typename nn::Tape<S>::Id x) {
        return nn::dense(tp, x, tp.param(ps_[name + ".w"]), tp.param(ps_[name + ".b"]));
    }

    // conv(k3, stride) -> group norm -> +embedding -> SiLU -> conv(k1)
    typename nn::Tape<S>::Id block_fwd(nn::Tape<S>& tp, const std::string& name,
                                       typename nn::Tape<S>::Id h,
                                       typename nn::Tape<S>::Id emb, Index stride) {
        const Index cout = ps_[name + ".conv.w"].shape[0];
        h = nn::conv1d(tp, h, tp.param(ps_[name + ".conv.w"]), tp.param(ps_[name + ".conv.b"]),
                       stride);
        h = nn::group_norm(tp, h, groups(cout), tp.param(ps_[name + ".norm.gain"]),
                           tp.param(ps_[name + ".norm.bias"]));
        auto eb = dense_fwd(tp, name + ".emb", emb);
        h = nn::add_channel_bias(tp, h, eb);
        h = nn::activation(tp, h, nn::Act::Silu);
        h = nn::conv1d(tp, h, tp.param(ps_[name + ".point.w"]),
                       tp.param(ps_[name + ".point.b"]), 1);
        return h;
    }

    // fixed sinusoidal features of the step index
    nn::Tensor<S> sin_embedding(const std::vector<int>& ks) const {
        const Index b = static_cast<Index>(ks.size());
        const Index half = cfg_.emb_width / 2;
        nn::Tensor<S> t = nn::Tensor<S>::zeros({b, cfg_.emb_width});
        for (Index i = 0; i < b; ++i) {
            for (Index f = 0; f < half; ++f) {
                const double freq =
                    half > 1 ? std::exp(-std::log(10000.0) * double(f) / double(half - 1))
                             : 1.0;
                const double arg = double(ks[static_cast<size_t>(i)]) * freq;
                t.v[i * cfg_.emb_width + f] = S(std::sin(arg));
                t.v[i * cfg_.emb_width + half + f] = S(std::cos(arg));
            }
        }
        return t;
    }

    Config cfg_;
    Index n_half_ = 0;
    Index padded_len_ = 0;
    std::vector<Index> enc_w_;
    nn::ParamStore<S> ps_;
};

}  // namespace d2t::diffusion
