#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "d2t/diffusion/schedule.hpp"
#include "d2t/diffusion/unet.hpp"
#include "d2t/dt/trajectory.hpp"
#include "d2t/nn/adamw.hpp"
#include "d2t/nn/checkpoint.hpp"
#include "d2t/nn/tape.hpp"
#include "d2t/rng.hpp"

namespace d2t::diffusion {

struct GuidanceConfig {
    double eta = 0.8;         // weight on the conditional noise estimate
    bool cfg_dropout = false; // train with random condition dropout instead of paired passes
    double dropout_p = 0.1;   // condition dropout probability when cfg_dropout is set
};

// classifier-free mix of the two noise estimates
template <class S>
nn::MatX<S> guided_noise(const nn::MatX<S>& cond_pred, const nn::MatX<S>& uncond_pred,
                         double eta) {
    nn::require(cond_pred.rows() == uncond_pred.rows() &&
                    cond_pred.cols() == uncond_pred.cols(),
                "guided_noise: estimate shapes differ");
    return (S(eta) * cond_pred + S(1.0 - eta) * uncond_pred).eval();
}

// flattened training pairs pulled out of a trajectory buffer, rescaled to
// roughly unit RMS per entry
template <class S>
struct DmDataset {
    nn::MatX<S> states; // [rows, 2NM], divided by norm_scale
    nn::MatX<S> conds;  // [rows, pilot_dim], divided by cond_scale
    double norm_scale = 1.0;
    double cond_scale = 1.0;
};

template <class S>
DmDataset<S> build_dm_dataset(const dt::TrajectoryBuffer& buf) {
    nn::require(!buf.empty(), "dm dataset: empty buffer");
    const Index d = 2 * buf.n() * buf.m();
    const Index rows = buf.size() * buf.t();

    DmDataset<S> ds;
    ds.states.resize(rows, d);
    ds.conds.resize(rows, buf.pilot_dim());
    Index r = 0;
    for (const auto& tr : buf.items())
        for (Index t = 0; t < tr.length(); ++t, ++r) {
            ds.states.row(r) = tr.states.row(t).template cast<S>();
            ds.conds.row(r) = tr.pilots.row(t).template cast<S>();
        }

    const double s_rms =
        std::sqrt(ds.states.template cast<double>().array().square().mean());
    const double c_rms = std::sqrt(ds.conds.template cast<double>().array().square().mean());
    ds.norm_scale = s_rms > 1e-12 ? s_rms : 1.0;
    ds.cond_scale = c_rms > 1e-12 ? c_rms : 1.0;
    ds.states /= S(ds.norm_scale);
    ds.conds /= S(ds.cond_scale);
    return ds;
}

template <class S>
class DiffusionModel {
  public:
    DiffusionModel(typename ConditionalUNet<S>::Config net_cfg, DiffusionSchedule sched,
                   GuidanceConfig guide, uint64_t seed)
        : net_(net_cfg, seed), sched_(std::move(sched)), guide_(guide) {}

    ConditionalUNet<S>& net() { return net_; }
    const ConditionalUNet<S>& net() const { return net_; }
    const DiffusionSchedule& schedule() const { return sched_; }
    const GuidanceConfig& guidance() const { return guide_; }
    GuidanceConfig& guidance() { return guide_; }
    double norm_scale() const { return norm_scale_; }
    double cond_scale() const { return cond_scale_; }
    void set_scales(double norm_scale, double cond_scale) {
        nn::require(norm_scale > 0 && cond_scale > 0, "diffusion model: scales must be positive");
        norm_scale_ = norm_scale;
        cond_scale_ = cond_scale;
    }

    void save(const std::string& path) const {
        nn::ParamStore<S> out;
        const auto& ps = net_.params();
        for (Index i = 0; i < ps.count(); ++i) {
            nn::Tensor<S> copy = ps.at(i);
            out.add(ps.name(i), std::move(copy));
        }
        const auto& nc = net_.config();
        out.add("meta.unet",
                nn::Tensor<S>::from({5}, {S(nc.data_dim), S(nc.cond_dim), S(nc.base_width),
                                          S(nc.emb_width), S(nc.levels)}));
        out.add("meta.schedule", nn::Tensor<S>::from({3}, {S(sched_.K), S(sched_.beta_min),
                                                           S(sched_.beta_max)}));
        out.add("meta.norm", nn::Tensor<S>::from({2}, {S(norm_scale_), S(cond_scale_)}));
        out.add("meta.guidance",
                nn::Tensor<S>::from({3}, {S(guide_.eta), S(guide_.cfg_dropout ? 1 : 0),
                                          S(guide_.dropout_p)}));
        nn::save_store(out, path);
    }

    static DiffusionModel load(const std::string& path) {
        nn::ParamStore<S> in;
        nn::load_store(in, path);
        const auto& mu = in["meta.unet"];
        const auto& ms = in["meta.schedule"];
        const auto& mn = in["meta.norm"];
        const auto& mg = in["meta.guidance"];
        typename ConditionalUNet<S>::Config nc;
        nc.data_dim = Index(mu.v[0]);
        nc.cond_dim = Index(mu.v[1]);
        nc.base_width = Index(mu.v[2]);
        nc.emb_width = Index(mu.v[3]);
        nc.levels = Index(mu.v[4]);
        DiffusionSchedule sched = DiffusionSchedule::linear(
            int(std::lround(double(ms.v[0]))), double(ms.v[1]), double(ms.v[2]));
        GuidanceConfig guide{double(mg.v[0]), mg.v[1] != S(0), double(mg.v[2])};
        DiffusionModel m(nc, std::move(sched), guide, 0);
        m.set_scales(double(mn.v[0]), double(mn.v[1]));
        auto& ps = m.net_.params();
        for (Index i = 0; i < ps.count(); ++i) {
            const auto& src = in[ps.name(i)];
            nn::require(src.shape == ps.at(i).shape, "diffusion load: shape mismatch for " +
                                                         ps.name(i));
            ps.at(i).v = src.v;
        }
        return m;
    }

  private:
    ConditionalUNet<S> net_;
    DiffusionSchedule sched_;
    GuidanceConfig guide_;
    double norm_scale_ = 1.0;
    double cond_scale_ = 1.0;
};

// One optimizer step on a batch of rescaled pairs. Steps and noise are drawn
// from rng; returns the batch loss. In the default mode every example runs a
// conditional and an unconditional pass and the loss is taken on the guided
// mix; with cfg_dropout the condition is dropped at random instead.
template <class S>
double dm_train_step(DiffusionModel<S>& model, const nn::MatX<S>& x0, const nn::MatX<S>& cond,
                     Rng& rng, nn::AdamW<S>& opt) {
    const Index b = x0.rows();
    const Index d = x0.cols();
    nn::require(b >= 1 && cond.rows() == b, "dm_train_step: batch shapes disagree");
    const auto& sched = model.schedule();
    const auto& guide = model.guidance();

    std::vector<int> ks(static_cast<size_t>(b));
    for (auto& k : ks) k = int(rng.integer(uint64_t(sched.K)));
    nn::MatX<S> eps(b, d);
    for (Index i = 0; i < b; ++i)
        for (Index j = 0; j < d; ++j) eps(i, j) = S(rng.normal());
    nn::MatX<S> xk(b, d);
    for (Index i = 0; i < b; ++i) {
        const double ab = sched.alpha_bar[ks[static_cast<size_t>(i)]];
        xk.row(i) = S(std::sqrt(ab)) * x0.row(i) + S(std::sqrt(1.0 - ab)) * eps.row(i);
    }
    const nn::VecX<S> eps_flat = Eigen::Map<const nn::VecX<S>>(eps.data(), eps.size());

    nn::Tape<S> tp;
    model.net().params().zero_grad();
    typename nn::Tape<S>::Id loss;
    if (guide.cfg_dropout) {
        std::vector<char> null_mask(static_cast<size_t>(b));
        for (auto& f : null_mask) f = rng.uniform() < guide.dropout_p ? 1 : 0;
        auto xid = tp.input({b, d}, Eigen::Map<const nn::VecX<S>>(xk.data(), xk.size()));
        auto cid = tp.input({b, cond.cols()},
                            Eigen::Map<const nn::VecX<S>>(cond.data(), cond.size()));
        auto out = model.net().forward(tp, xid, ks, cid, null_mask);
        loss = nn::mse(tp, out, eps_flat);
    } else {
        nn::MatX<S> x2(2 * b, d);
        x2.topRows(b) = xk;
        x2.bottomRows(b) = xk;
        nn::MatX<S> c2(2 * b, cond.cols());
        c2.topRows(b) = cond;
        c2.bottomRows(b) = cond;
        std::vector<int> ks2(ks);
        ks2.insert(ks2.end(), ks.begin(), ks.end());
        std::vector<char> null_mask(static_cast<size_t>(2 * b), 0);
        for (Index i = 0; i < b; ++i) null_mask[static_cast<size_t>(b + i)] = 1;

        auto xid = tp.input({2 * b, d}, Eigen::Map<const nn::VecX<S>>(x2.data(), x2.size()));
        auto cid = tp.input({2 * b, cond.cols()},
                            Eigen::Map<const nn::VecX<S>>(c2.data(), c2.size()));
        auto out = model.net().forward(tp, xid, ks2, cid, null_mask);
        std::vector<Index> idx_c(static_cast<size_t>(b)), idx_u(static_cast<size_t>(b));
        for (Index i = 0; i < b; ++i) {
            idx_c[static_cast<size_t>(i)] = i;
            idx_u[static_cast<size_t>(i)] = b + i;
        }
        auto mix = nn::add(tp, nn::scale(tp, nn::gather_rows(tp, out, idx_c), S(guide.eta)),
                           nn::scale(tp, nn::gather_rows(tp, out, idx_u), S(1.0 - guide.eta)));
        loss = nn::mse(tp, mix, eps_flat);
    }
    tp.backward(loss);
    opt.step();
    return double(tp.val(loss)[0]);
}

// Ancestral sampling from pure noise, guided by per-row conditions given in
// raw pilot units. Returns samples in state units (norm scale applied).
template <class S>
nn::MatX<S> reverse_sample(DiffusionModel<S>& model, const nn::MatX<S>& cond_raw, Rng& rng) {
    const Index b = cond_raw.rows();
    nn::require(b >= 1, "reverse_sample: empty batch");
    const Index d = model.net().config().data_dim;
    const auto& sched = model.schedule();
    const double eta = model.guidance().eta;

    nn::MatX<S> cond = cond_raw / S(model.cond_scale());
    nn::MatX<S> c2(2 * b, cond.cols());
    c2.topRows(b) = cond;
    c2.bottomRows(b) = cond;
    std::vector<char> null2(static_cast<size_t>(2 * b), 0);
    for (Index i = 0; i < b; ++i) null2[static_cast<size_t>(b + i)] = 1;

    nn::MatX<S> x(b, d);
    for (Index i = 0; i < b; ++i)
        for (Index j = 0; j < d; ++j) x(i, j) = S(rng.normal());

    nn::MatX<S> x2(2 * b, d);
    for (int k = sched.K - 1; k >= 0; --k) {
        x2.topRows(b) = x;
        x2.bottomRows(b) = x;
        std::vector<int> ks2(static_cast<size_t>(2 * b), k);
        nn::MatX<S> out = model.net().predict(x2, ks2, c2, null2);
        nn::MatX<S> mix = guided_noise<S>(out.topRows(b), out.bottomRows(b), eta);

        const double beta = sched.beta[k];
        const double ab = sched.alpha_bar[k];
        x = (x - S(beta / std::sqrt(1.0 - ab)) * mix) / S(std::sqrt(1.0 - beta));
        if (k > 0) {
            const double sd = std::sqrt(sched.post_var[k]);
            for (Index i = 0; i < b; ++i)
                for (Index j = 0; j < d; ++j) x(i, j) += S(sd * rng.normal());
        }
        nn::require(x.allFinite(),
                    "reverse_sample: non-finite state at step " + std::to_string(k));
    }
    return (x * S(model.norm_scale())).eval();
}

}  // namespace d2t::diffusion
