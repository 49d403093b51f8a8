#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "d2t/channel/env.hpp"
#include "d2t/diffusion/model.hpp"
#include "d2t/dt/model.hpp"
#include "d2t/dt/rollout.hpp"
#include "d2t/expert/collect.hpp"
#include "d2t/expert/optimizer.hpp"
#include "d2t/nn/layers.hpp"
#include "d2t/pipeline/stages.hpp"
#include "doctest.h"
#include "grad_check.hpp"

using namespace d2t;
namespace fs = std::filesystem;

namespace {

// Every criterion prints exactly one machine-greppable verdict line; the
// doctest assertion carries the same text so ctest and the log agree.
void verdict(int n, bool pass, const std::string& detail) {
    std::printf("[criterion %d] %s - %s\n", n, pass ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
    CHECK_MESSAGE(pass, "criterion ", n, ": ", detail);
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return std::string(buf);
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(bool(f));
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// two-sample Kolmogorov-Smirnov statistic, sup |F_a - F_b|
double ks_stat(std::vector<double> a, std::vector<double> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    const double na = double(a.size()), nb = double(b.size());
    size_t i = 0, j = 0;
    double d = 0;
    while (i < a.size() && j < b.size()) {
        if (a[i] <= b[j])
            ++i;
        else
            ++j;
        d = std::max(d, std::abs(double(i) / na - double(j) / nb));
    }
    return d;
}

nn::Tensor<double> rand_tensor(nn::Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    auto t = nn::Tensor<double>::zeros(std::move(s));
    for (nn::Index i = 0; i < t.size(); ++i) t.v[i] = rng.uniform(lo, hi);
    return t;
}

nn::Tensor<double> rand_tensor_off_zero(nn::Shape s, Rng& rng) {
    auto t = nn::Tensor<double>::zeros(std::move(s));
    for (nn::Index i = 0; i < t.size(); ++i) {
        const double u = rng.uniform(-1.0, 1.0);
        t.v[i] = (u < 0 ? -1.0 : 1.0) * (0.2 + 0.8 * std::abs(u));
    }
    return t;
}

// true channel vectors plus the pilots seen alongside them, action-free replay
void replay_channels(const channel::EnvConfig& ec, uint64_t first, nn::Index episodes,
                     nn::MatX<double>& states, nn::MatX<double>& pilots) {
    const nn::Index tl = ec.T;
    states.resize(episodes * tl, 2 * ec.N * ec.M);
    pilots.resize(episodes * tl, channel::pilot_dim(ec));
    const channel::RVec hold = channel::RVec::Zero(ec.N);
    channel::Environment env(ec);
    for (nn::Index e = 0; e < episodes; ++e) {
        channel::StepResult sr = env.reset(first + uint64_t(e));
        for (nn::Index t = 0; t < tl; ++t) {
            states.row(e * tl + t) =
                diffusion::channel_to_vector(env.current().H).transpose();
            pilots.row(e * tl + t) = sr.pilot.y.transpose();
            sr = env.step(hold);
        }
    }
}

}  // namespace

TEST_CASE("criterion 1: all layer kinds pass finite-difference gradient checks") {
    Rng rng(20240817);
    double worst = 0;
    std::string worst_at = "none";

    auto trial = [&](const nn::LayerSpec& spec, nn::Tensor<double> input) {
        nn::ParamStore<double> ps;
        nn::init_layer_params(spec, "l", ps, rng);
        const nn::Index ii = ps.add("l.in", std::move(input));
        auto rep = gradcheck::check(ps, [&](nn::Tape<double>& tp) {
            auto x = tp.param(ps.at(ii));
            auto y = nn::layer_forward(spec, "l", ps, tp, x);
            const nn::Index n = tp.val(y).size();
            return nn::mse(tp, nn::reshape(tp, y, {n}), nn::VecX<double>::Zero(n));
        });
        if (rep.max_rel > worst) {
            worst = rep.max_rel;
            worst_at = spec.kind + " " + rep.worst;
        }
    };
    auto dim = [&](uint64_t hi) { return nn::Index(1 + rng.integer(hi)); };

    for (int t = 0; t < 20; ++t) {
        {
            const nn::Index in = dim(6), out = dim(6), b = dim(4);
            trial({.kind = "dense", .in = in, .out = out}, rand_tensor({b, in}, rng));
        }
        {
            const nn::Index w = dim(6), b = dim(4);
            trial({.kind = "layer-norm", .out = w}, rand_tensor({b, w}, rng));
        }
        {
            const nn::Index g = dim(3), ch = g * dim(3), len = dim(6), b = dim(3);
            trial({.kind = "group-norm", .out = ch, .groups = g},
                  rand_tensor({b, ch, len}, rng));
        }
        {
            const nn::Index cin = dim(3), cout = dim(3);
            const nn::Index kernel = 2 * nn::Index(rng.integer(3)) + 1;  // 1, 3, 5
            const nn::Index stride = dim(2), len = dim(7), b = dim(3);
            trial({.kind = "conv1d", .in = cin, .out = cout, .kernel = kernel,
                   .stride = stride},
                  rand_tensor({b, cin, len}, rng));
        }
        {
            const nn::Index heads = dim(2), w = heads * dim(3), tok = dim(4);
            if (rng.integer(2) == 0)
                trial({.kind = "causal-self-attention", .out = w, .heads = heads},
                      rand_tensor({tok, w}, rng));
            else
                trial({.kind = "causal-self-attention", .out = w, .heads = heads},
                      rand_tensor({dim(3), tok, w}, rng));
        }
        for (const char* act : {"relu", "silu", "gelu", "tanh"})
            trial({.kind = "activation", .act = act},
                  rand_tensor_off_zero({dim(3), dim(5)}, rng));
        {
            const nn::Index vocab = 2 + nn::Index(rng.integer(5)), w = dim(4);
            nn::ParamStore<double> ps;
            nn::init_layer_params({.kind = "embedding", .in = vocab, .out = w}, "e", ps, rng);
            std::vector<nn::Index> idx(3 + rng.integer(4));
            for (auto& v : idx) v = nn::Index(rng.integer(uint64_t(vocab)));
            auto rep = gradcheck::check(ps, [&](nn::Tape<double>& tp) {
                auto rows = nn::embedding(tp, tp.param(ps["e.w"]), idx);
                const nn::Index n = tp.val(rows).size();
                return nn::mse(tp, nn::reshape(tp, rows, {n}), nn::VecX<double>::Zero(n));
            });
            if (rep.max_rel > worst) {
                worst = rep.max_rel;
                worst_at = "embedding " + rep.worst;
            }
        }
    }
    verdict(1, worst < 1e-4,
            "20 random-shape trials per layer kind; max relative gradient error " +
                fmt(worst) + " at " + worst_at + " (bound 1e-4)");
}

TEST_CASE("criterion 2: beamformer power and optimality plus fading moments") {
    channel::EnvConfig cfg;
    cfg.N = 8;
    cfg.M = 4;
    cfg.angles = channel::draw_los_angles(5);
    Rng crng(31);

    double worst_power = 0;
    int beaten = 0;
    for (int c = 0; c < 100; ++c) {
        const auto ch = channel::draw_channel(cfg, crng);
        channel::RVec phases(cfg.N);
        for (int n = 0; n < cfg.N; ++n)
            phases[n] = crng.uniform(-std::numbers::pi, std::numbers::pi);
        const channel::CVec f = channel::mrt_precoder(phases, ch.H, cfg.P_mw);
        worst_power = std::max(worst_power, std::abs(f.squaredNorm() - cfg.P_mw));
        const double r_star = channel::rate_with_precoder(phases, ch.H, f, cfg.sigma2_mw);
        for (int k = 0; k < 1000; ++k) {
            channel::CVec g(cfg.M);
            for (int m = 0; m < cfg.M; ++m) g[m] = crng.cnormal();
            g *= std::sqrt(cfg.P_mw) / g.norm();
            if (channel::rate_with_precoder(phases, ch.H, g, cfg.sigma2_mw) >
                r_star + 1e-12)
                ++beaten;
        }
    }

    // moment checks on both Rician links, 1e5 draws each, 3-sigma bands
    channel::EnvConfig mc = cfg;
    mc.N = 4;
    mc.M = 2;
    const int n_draws = 100000;
    const double l1 = channel::path_loss_linear(mc, mc.xi1, mc.d1);
    const double l2 = channel::path_loss_linear(mc, mc.xi2, mc.d2);
    const channel::CMat los_g =
        std::sqrt(l1 * mc.kappa1 / (1.0 + mc.kappa1)) *
        (channel::steering_vector(mc.angles.theta_arr, mc.N) *
         channel::steering_vector(mc.angles.theta_dep, mc.M).adjoint());
    const channel::CVec los_h = std::sqrt(l2 * mc.kappa2 / (1.0 + mc.kappa2)) *
                                channel::steering_vector(mc.angles.theta_user, mc.N);
    channel::CMat mean_g = channel::CMat::Zero(mc.N, mc.M);
    Eigen::MatrixXd pow_g = Eigen::MatrixXd::Zero(mc.N, mc.M);
    channel::CVec mean_h = channel::CVec::Zero(mc.N);
    Eigen::VectorXd pow_h = Eigen::VectorXd::Zero(mc.N);
    Rng mrng(57);
    for (int i = 0; i < n_draws; ++i) {
        const channel::CMat g = channel::sample_rician(mc, channel::Link::BsToSurface, mrng);
        const channel::CVec h =
            channel::sample_rician(mc, channel::Link::SurfaceToUser, mrng).col(0);
        mean_g += g;
        pow_g += (g - los_g).cwiseAbs2();
        mean_h += h;
        pow_h += (h - los_h).cwiseAbs2();
    }
    mean_g /= double(n_draws);
    pow_g /= double(n_draws);
    mean_h /= double(n_draws);
    pow_h /= double(n_draws);

    int moment_fails = 0;
    const double var_g = l1 / (1.0 + mc.kappa1), var_h = l2 / (1.0 + mc.kappa2);
    const double mean_band_g = 3.0 * std::sqrt(var_g / 2.0 / n_draws);
    const double mean_band_h = 3.0 * std::sqrt(var_h / 2.0 / n_draws);
    const double pow_band_g = 3.0 * var_g / std::sqrt(double(n_draws));
    const double pow_band_h = 3.0 * var_h / std::sqrt(double(n_draws));
    for (int i = 0; i < mc.N; ++i) {
        for (int j = 0; j < mc.M; ++j) {
            const std::complex<double> d = mean_g(i, j) - los_g(i, j);
            if (std::abs(d.real()) > mean_band_g || std::abs(d.imag()) > mean_band_g)
                ++moment_fails;
            if (std::abs(pow_g(i, j) - var_g) > pow_band_g) ++moment_fails;
        }
        const std::complex<double> d = mean_h[i] - los_h[i];
        if (std::abs(d.real()) > mean_band_h || std::abs(d.imag()) > mean_band_h)
            ++moment_fails;
        if (std::abs(pow_h[i] - var_h) > pow_band_h) ++moment_fails;
    }

    const bool pass = worst_power <= 1e-12 && beaten == 0 && moment_fails == 0;
    verdict(2, pass,
            "power error " + fmt(worst_power) + " (bound 1e-12); random precoders beating "
            "the matched one " + std::to_string(beaten) + "/100000; fading moments outside "
            "3-sigma " + std::to_string(moment_fails) + " of 72 checks over 1e5 draws");
}

TEST_CASE("criterion 3: phase optimizer stays within 1% of the exhaustive oracle") {
    double min_ratio = 1e9;
    int checked = 0;
    for (const int n : {2, 3}) {
        channel::EnvConfig cfg;
        cfg.N = n;
        cfg.M = 2;
        cfg.angles = channel::draw_los_angles(11);
        Rng crng(tag_seed(91, "oracle-channels") + uint64_t(n));
        Rng orng(tag_seed(92, "optimizer") + uint64_t(n));
        const expert::ExpertConfig xcfg;
        for (int c = 0; c < 100; ++c) {
            const auto ch = channel::draw_channel(cfg, crng);
            const auto oracle = expert::exhaustive_phase_oracle(ch.H, 16, cfg);
            const channel::RVec ph = expert::optimize_phases(ch.H, xcfg, orng);
            const double rate = channel::achievable_rate(ph, ch.H, cfg);
            min_ratio = std::min(min_ratio, rate / oracle.rate);
            ++checked;
        }
    }
    verdict(3, min_ratio >= 0.99,
            "optimizer/oracle rate ratio >= " + fmt(min_ratio) + " across " +
                std::to_string(checked) + " channels at N=2 and N=3 with Q=16 (bound 0.99)");
}

TEST_CASE("criterion 4: noising schedule endpoint and marginal moments") {
    const auto s = diffusion::DiffusionSchedule::linear(500, 1e-4, 0.02);
    const double terminal = s.alpha_bar[499];
    const bool endpoint_ok = terminal < 1e-3;

    // stepwise composition must reproduce the closed-form marginal moments
    Rng rng(4040);
    const double x0 = 1.3;
    int moment_fails = 0;
    for (const int k : {124, 249, 499}) {
        const int n = 20000;
        double acc = 0, acc2 = 0;
        for (int i = 0; i < n; ++i) {
            double x = x0;
            for (int j = 0; j <= k; ++j)
                x = std::sqrt(1.0 - s.beta[j]) * x + std::sqrt(s.beta[j]) * rng.normal();
            acc += x;
            acc2 += x * x;
        }
        const double mean = acc / n;
        const double var = acc2 / n - mean * mean;
        const double want_mean = std::sqrt(s.alpha_bar[k]) * x0;
        const double want_var = 1.0 - s.alpha_bar[k];
        if (std::abs(mean - want_mean) > 3.0 * std::sqrt(want_var / n)) ++moment_fails;
        if (std::abs(var - want_var) > 3.0 * want_var * std::sqrt(2.0 / (n - 1.0)))
            ++moment_fails;
    }

    char term[40];
    std::snprintf(term, sizeof term, "%.17g", terminal);
    verdict(4, endpoint_ok && moment_fails == 0,
            std::string("terminal alpha_bar = ") + term + " against bound 1e-3 (" +
                (endpoint_ok ? "ok" : "violated") +
                "); stepwise-vs-closed-form moments outside 3 sigma: " +
                std::to_string(moment_fails) + " of 6");
}

TEST_CASE("criterion 5: conditional channel diffusion on a toy link") {
    channel::EnvConfig ec;
    ec.N = 2;
    ec.M = 1;
    ec.T = 20;
    ec.seed = 501;
    ec.pilot_reps = 128;  // long sweep so the conditioning signal is clean
    ec.angles = channel::draw_los_angles(501);

    nn::MatX<double> states, pilots;
    replay_channels(ec, 0, 500, states, pilots);  // 1e4 training samples
    const double norm = std::sqrt(states.array().square().mean());
    const double cond = std::sqrt(pilots.array().square().mean());

    typename diffusion::ConditionalUNet<float>::Config nc;
    nc.data_dim = states.cols();
    nc.cond_dim = pilots.cols();
    nc.base_width = 24;
    nc.emb_width = 96;
    nc.levels = 2;
    diffusion::DiffusionModel<float> model(
        nc, diffusion::DiffusionSchedule::linear(500, 1e-4, 0.02),
        diffusion::GuidanceConfig{}, 505);
    model.set_scales(norm, cond);

    nn::AdamW<float> opt(model.net().params(), {.lr = 1e-3});
    nn::AdamW<float> opt_late(model.net().params(), {.lr = 2e-4});
    Rng trng(tag_seed(505, "toy-train"));
    const nn::Index rows = states.rows(), bsz = 64;
    nn::MatX<float> x0(bsz, states.cols()), cd(bsz, pilots.cols());
    double loss = 0;
    const int total_steps = 12000, late_from = 8000;
    for (int step = 0; step < total_steps; ++step) {
        for (nn::Index i = 0; i < bsz; ++i) {
            const nn::Index r = nn::Index(trng.integer(uint64_t(rows)));
            x0.row(i) = (states.row(r) / norm).cast<float>();
            cd.row(i) = (pilots.row(r) / cond).cast<float>();
        }
        loss = diffusion::dm_train_step(model, x0, cd, trng,
                                        step < late_from ? opt : opt_late);
    }

    nn::MatX<double> truth, test_pilots;
    replay_channels(ec, 600, 100, truth, test_pilots);  // 2000 held-out samples
    Rng srng(tag_seed(505, "toy-sample"));
    const nn::MatX<double> gen_c =
        diffusion::reverse_sample(model, nn::MatX<float>(test_pilots.cast<float>()), srng)
            .cast<double>();
    model.guidance().eta = 0.0;  // unconditional baseline: ignore the condition
    Rng urng(tag_seed(505, "toy-sample-uncond"));
    const nn::MatX<double> gen_u =
        diffusion::reverse_sample(model, nn::MatX<float>(test_pilots.cast<float>()), urng)
            .cast<double>();

    double max_ks = 0;
    for (nn::Index d = 0; d < truth.cols(); ++d) {
        std::vector<double> a(size_t(truth.rows())), b(size_t(truth.rows()));
        for (nn::Index r = 0; r < truth.rows(); ++r) {
            a[size_t(r)] = truth(r, d);
            b[size_t(r)] = gen_c(r, d);
        }
        max_ks = std::max(max_ks, ks_stat(a, b));
    }
    const double mse_c = (gen_c - truth).array().square().rowwise().sum().mean();
    const double mse_u = (gen_u - truth).array().square().rowwise().sum().mean();

    const bool pass = max_ks < 0.1 && mse_c < mse_u;
    verdict(5, pass,
            "final training loss " + fmt(loss) + "; max per-coordinate KS " + fmt(max_ks) +
                " (bound 0.1); conditional MSE " + fmt(mse_c) + " vs unconditional " +
                fmt(mse_u) + " (must be lower)");
}

TEST_CASE("criterion 6: cloned policy reaches 90% of the expert rate") {
    channel::EnvConfig ec;
    ec.N = 8;
    ec.M = 4;
    ec.T = 20;
    ec.seed = 601;
    ec.angles = channel::draw_los_angles(601);
    const expert::ExpertConfig xcfg;

    std::vector<channel::Environment> envs;
    envs.emplace_back(ec);
    const auto buf = expert::collect_trajectories(envs, xcfg, 150);
    const auto ds = dt::build_dt_dataset<float>(buf);

    typename dt::DtModel<float>::Config dc;
    dc.context = ec.T;
    dc.state_dim = 2 * ec.N * ec.M;
    dc.act_dim = ec.N;
    dc.width = 128;
    dc.blocks = 2;
    dc.heads = 4;
    dc.dropout = 0.05;
    dt::DtModel<float> model(dc, 606);
    model.set_scales(ds.state_scale, ds.rtg_scale);
    nn::AdamW<float> opt(model.params(), {.lr = 1e-3});
    Rng trng(tag_seed(606, "clone-train"));
    double loss = 0;
    for (int step = 0; step < 2500; ++step)
        loss = dt::dt_train_step(model, ds, 32, trng, opt);

    const dt::RolloutConfig rc{1.1 * buf.best_episode_return(), 50, 1000};
    const auto dt_run = dt::rollout_policy(ec, model, dt::true_state_provider(), rc);
    const auto xp_run = dt::rollout_expert(ec, xcfg, rc);
    const double dt_rate = dt_run.mean_return() / double(ec.T);
    const double xp_rate = xp_run.mean_return() / double(ec.T);

    const bool pass = dt_rate >= 0.9 * xp_rate;
    verdict(6, pass,
            "final cloning loss " + fmt(loss) + "; policy rate " + fmt(dt_rate) +
                " vs expert " + fmt(xp_rate) + " on 50 held-out episodes (bound 0.9x)");
}

namespace {

// Transfer needs the conditioning signal to actually determine most of the
// channel: the pilot sweep yields 2(2*min(n,m)+2) real measurements against
// 2nm channel dimensions, so n=4, m=2 (12 of 16) is measured, while wider
// surfaces leave the generator guessing env-specific structure that cannot
// transfer. pilot_reps=128 lifts the per-probe SNR from -6 dB (where probes
// are mostly receiver noise and no decoder, linear or not, beats predicting
// the env mean) to +6 dB. Scatter-heavy presets (kappa scaled by 0.2) keep
// the optimal phases state-dependent; at the LOS-heavy defaults a scratch
// policy just memorizes one near-constant phase pattern per env from the
// demos, which says nothing about transfer.
pipeline::ExperimentConfig transfer_cfg() {
    auto c = pipeline::ExperimentConfig::defaults();
    c.n = 4;
    c.m = 2;
    c.t = 10;
    c.pilot_reps = 128;
    for (auto* p : {&c.train_envs[0], &c.train_envs[1], &c.train_envs[2], &c.heldout}) {
        p->kappa1 *= 0.2;
        p->kappa2 *= 0.2;
    }
    c.expert.restarts = 4;
    c.expert.max_iters = 60;
    c.collect.episodes_per_env = 100;
    c.collect.fewshot_episodes = 6;
    c.dm.k = 100;
    c.dm.beta_min = 1e-3;
    c.dm.beta_max = 0.12;
    c.dm.base_width = 24;
    c.dm.emb_width = 96;
    c.dm.levels = 3;
    c.dm.steps = 16000;
    c.dm.batch = 64;
    c.dm.lr = 1e-3;
    c.dt.width = 64;
    c.dt.blocks = 2;
    c.dt.heads = 4;
    c.dt.dropout = 0.05;
    c.dt.steps = 3000;
    c.dt.batch = 32;
    c.dt.lr = 1e-3;
    c.dt.finetune_steps = 240;
    c.dt.finetune_batch = 4;
    c.dt.finetune_lr = 1e-4;
    c.dt.eval_every = 40;
    c.eval.episodes = 16;
    c.eval.first_episode = 1000;
    c.eval.histogram_bins = 30;
    c.eval.histogram_episodes = 4;
    c.out = (fs::temp_directory_path() / "d2t_accept_transfer").string();
    c.seed = 77;
    return c;
}

}  // namespace

TEST_CASE("criterion 7: cross-environment transfer beats random and scratch") {
    const auto cfg = transfer_cfg();
    fs::remove_all(cfg.out);
    pipeline::run_collect(cfg);
    pipeline::run_train_dm(cfg);
    pipeline::run_pretrain_dt(cfg);
    const auto ft = pipeline::run_finetune(cfg);
    const auto ev_d2t = pipeline::run_eval(cfg, "d2t");
    const auto ev_pc = pipeline::run_eval(cfg, "dt-pc");
    const auto ev_rand = pipeline::run_eval(cfg, "random");

    // (a) zero-shot transfer: pre-trained policy on sampled states beats random
    const bool a_ok = ft.zero_shot_mean_rate > ev_rand.mean_slot_rate;

    // (b) fine-tuning reaches 95% of its converged rate in strictly fewer steps
    // than the from-scratch policy reaches that same absolute rate
    const auto& cf = ft.curve_finetune;
    const auto& cs = ft.curve_scratch;
    REQUIRE(cf.size() >= 3);
    double converged = 0;
    for (size_t i = cf.size() - 3; i < cf.size(); ++i) converged += cf[i].second;
    converged /= 3.0;
    const double thr = 0.95 * converged;
    int64_t step_ft = -1, step_sc = -1;
    for (const auto& [st, rate] : cf)
        if (rate >= thr) {
            step_ft = st;
            break;
        }
    for (const auto& [st, rate] : cs)
        if (rate >= thr) {
            step_sc = st;
            break;
        }
    const bool b_ok = step_ft >= 0 && (step_sc < 0 || step_ft < step_sc);

    // (c) perfect-CSI reference stays at or above the sampled-state policy
    const bool c_ok = ev_pc.mean_slot_rate >= 0.99 * ev_d2t.mean_slot_rate;

    const std::string sc_str = step_sc < 0 ? "never" : std::to_string(step_sc);
    verdict(7, a_ok && b_ok && c_ok,
            "zero-shot " + fmt(ft.zero_shot_mean_rate) + " vs random " +
                fmt(ev_rand.mean_slot_rate) + " (" + (a_ok ? "ok" : "violated") +
                "); 95%-of-converged (" + fmt(thr) + ") reached at step " +
                std::to_string(step_ft) + " fine-tuned vs " + sc_str + " scratch (" +
                (b_ok ? "ok" : "violated") + "); perfect-CSI " + fmt(ev_pc.mean_slot_rate) +
                " vs sampled-state " + fmt(ev_d2t.mean_slot_rate) + " (" +
                (c_ok ? "ok" : "violated") + ")");
}

namespace {

pipeline::ExperimentConfig determinism_cfg() {
    auto c = pipeline::ExperimentConfig::defaults();
    c.n = 4;
    c.m = 2;
    c.t = 4;
    c.train_envs.resize(2);
    c.expert.restarts = 2;
    c.expert.max_iters = 20;
    c.collect.episodes_per_env = 3;
    c.collect.fewshot_episodes = 2;
    c.dm.k = 8;
    c.dm.base_width = 8;
    c.dm.emb_width = 16;
    c.dm.levels = 2;
    c.dm.steps = 20;
    c.dm.batch = 8;
    c.dm.lr = 1e-3;
    c.dt.width = 16;
    c.dt.blocks = 1;
    c.dt.heads = 2;
    c.dt.steps = 20;
    c.dt.batch = 4;
    c.dt.lr = 1e-3;
    c.dt.finetune_steps = 4;
    c.dt.finetune_batch = 2;
    c.dt.finetune_lr = 5e-4;
    c.dt.eval_every = 2;
    c.eval.episodes = 2;
    c.eval.first_episode = 700;
    c.eval.histogram_bins = 5;
    c.eval.histogram_episodes = 2;
    c.out = (fs::temp_directory_path() / "d2t_accept_determinism").string();
    c.seed = 88;
    return c;
}

}  // namespace

TEST_CASE("criterion 8: every stage reruns to byte-identical artifacts") {
    const auto cfg = determinism_cfg();
    fs::remove_all(cfg.out);

    auto run_all = [&] {
        pipeline::run_collect(cfg);
        pipeline::run_train_dm(cfg);
        pipeline::run_pretrain_dt(cfg);
        pipeline::run_finetune(cfg);
        pipeline::run_eval(cfg, "d2t");
    };
    const std::vector<std::pair<std::string, std::string>> files = {
        {"collect", "train_buffer.bin"},   {"collect", "fewshot_buffer.bin"},
        {"collect", "train_buffer.jsonl"}, {"collect", "metrics.csv"},
        {"train-dm", "dm.bin"},            {"train-dm", "metrics.csv"},
        {"pretrain-dt", "dt.bin"},         {"pretrain-dt", "metrics.csv"},
        {"finetune", "dt_finetuned.bin"},  {"finetune", "dt_scratch.bin"},
        {"finetune", "learning_curve.csv"},{"finetune", "metrics.csv"},
        {"eval-d2t", "rates.csv"},         {"eval-d2t", "histogram.csv"},
        {"eval-d2t", "metrics.csv"},
    };

    run_all();
    std::vector<std::string> first;
    for (const auto& [stage, name] : files)
        first.push_back(slurp(pipeline::stage_dir(cfg, stage) / name));
    run_all();
    int mismatched = 0;
    std::string which;
    for (size_t i = 0; i < files.size(); ++i)
        if (slurp(pipeline::stage_dir(cfg, files[i].first) / files[i].second) != first[i]) {
            ++mismatched;
            which += (which.empty() ? "" : ", ") + files[i].first + "/" + files[i].second;
        }
    verdict(8, mismatched == 0,
            std::to_string(files.size()) + " artifacts across 5 stages re-run; " +
                (mismatched == 0 ? "all byte-identical"
                                 : std::to_string(mismatched) + " differ (" + which + ")"));
}
