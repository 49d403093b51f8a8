#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "d2t/channel/env.hpp"
#include "d2t/diffusion/model.hpp"
#include "d2t/dt/model.hpp"
#include "d2t/dt/rollout.hpp"
#include "d2t/dt/trajectory.hpp"
#include "d2t/nn/adamw.hpp"
#include "d2t/rng.hpp"
#include "doctest.h"
#include "grad_check.hpp"

using namespace d2t;
using namespace d2t::dt;
using nn::Index;
using nn::MatX;
using nn::VecX;

namespace {

DtModel<double>::Config tiny_dt_cfg() {
    DtModel<double>::Config cfg;
    cfg.context = 4;
    cfg.state_dim = 4;
    cfg.act_dim = 2;
    cfg.width = 16;
    cfg.blocks = 2;
    cfg.heads = 2;
    cfg.dropout = 0.1;
    return cfg;
}

MatX<double> random_mat(Index r, Index c, Rng& rng, double scale = 1.0) {
    MatX<double> m(r, c);
    for (Index i = 0; i < r; ++i)
        for (Index j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
    return m;
}

MatX<double> random_angles(Index r, Index c, Rng& rng) {
    MatX<double> m(r, c);
    for (Index i = 0; i < r; ++i)
        for (Index j = 0; j < c; ++j) m(i, j) = rng.uniform(-M_PI, M_PI);
    return m;
}

struct EvalBatch {
    MatX<double> rtg, states, acts;
};

EvalBatch random_batch(const DtModel<double>::Config& cfg, Index b, Index w, uint64_t seed) {
    Rng rng(seed);
    EvalBatch eb;
    eb.rtg = random_mat(b, w, rng);
    eb.states = random_mat(b * w, cfg.state_dim, rng);
    eb.acts = random_angles(b * w, cfg.act_dim, rng);
    return eb;
}

MatX<double> predict(DtModel<double>& m, const EvalBatch& eb) {
    nn::Tape<double> tp;
    Rng dummy(0);
    auto out = m.forward(tp, eb.rtg, eb.states, eb.acts, false, dummy);
    return Eigen::Map<const MatX<double>>(tp.val(out).data(), eb.states.rows(),
                                          m.config().act_dim);
}

channel::EnvConfig tiny_env_cfg() {
    channel::EnvConfig cfg;
    cfg.N = 2;
    cfg.M = 1;
    cfg.T = 3;
    cfg.seed = 5;
    return cfg;
}

}  // namespace

TEST_CASE("predictions are angles with the right geometry") {
    DtModel<double> m(tiny_dt_cfg(), 11);
    const auto eb = random_batch(m.config(), 3, 4, 1);
    const MatX<double> out = predict(m, eb);
    CHECK(out.rows() == 12);
    CHECK(out.cols() == 2);
    CHECK(out.cwiseAbs().maxCoeff() < M_PI);

    // malformed inputs are rejected
    nn::Tape<double> tp;
    Rng dummy(0);
    CHECK_THROWS(m.forward(tp, eb.rtg, eb.states.topRows(3), eb.acts, false, dummy));
    const auto long_batch = random_batch(m.config(), 1, 5, 2);
    CHECK_THROWS(m.forward(tp, long_batch.rtg, long_batch.states, long_batch.acts, false,
                           dummy));
}

TEST_CASE("attention is causal over the token stream") {
    DtModel<double> m(tiny_dt_cfg(), 11);
    const auto base = random_batch(m.config(), 1, 4, 3);
    const MatX<double> out0 = predict(m, base);

    // future state changes leave earlier predictions untouched
    Rng srng(99);
    auto mod = base;
    mod.states.row(3) = random_mat(1, 4, srng);
    const MatX<double> out1 = predict(m, mod);
    CHECK((out1.topRows(3) - out0.topRows(3)).cwiseAbs().maxCoeff() == 0.0);
    CHECK((out1.row(3) - out0.row(3)).cwiseAbs().maxCoeff() > 1e-12);

    // the action token of the slot being predicted is not visible to it
    mod = base;
    Rng arng(41);
    mod.acts.row(3) = random_angles(1, 2, arng);
    const MatX<double> out2 = predict(m, mod);
    CHECK((out2.row(3) - out0.row(3)).cwiseAbs().maxCoeff() == 0.0);

    // but past actions are
    mod = base;
    mod.acts.row(0) = random_angles(1, 2, arng);
    const MatX<double> out3 = predict(m, mod);
    CHECK((out3.row(0) - out0.row(0)).cwiseAbs().maxCoeff() == 0.0);
    CHECK((out3.bottomRows(3) - out0.bottomRows(3)).cwiseAbs().maxCoeff() > 1e-12);

    // the return-to-go token precedes the state token of the same slot
    mod = base;
    mod.rtg(0, 0) += 0.7;
    const MatX<double> out4 = predict(m, mod);
    CHECK((out4.row(0) - out0.row(0)).cwiseAbs().maxCoeff() > 1e-12);
}

TEST_CASE("angular loss ignores whole turns") {
    DtModel<double> m(tiny_dt_cfg(), 11);
    const auto eb = random_batch(m.config(), 2, 4, 5);
    VecX<double> target(16);
    Rng rng(6);
    for (Index i = 0; i < 16; ++i) target[i] = rng.uniform(-M_PI, M_PI);

    const auto loss_of = [&](const VecX<double>& tgt) {
        nn::Tape<double> tp;
        Rng dummy(0);
        auto out = m.forward(tp, eb.rtg, eb.states, eb.acts, false, dummy);
        return tp.val(nn::angle_mse(tp, out, tgt))[0];
    };
    const double l0 = loss_of(target);
    const double l1 = loss_of(target.array() + 2.0 * M_PI);
    CHECK(l0 == doctest::Approx(l1).epsilon(1e-9));
    CHECK(l0 > 0);
}

TEST_CASE("construction is seed-deterministic") {
    DtModel<double> a(tiny_dt_cfg(), 7);
    DtModel<double> b(tiny_dt_cfg(), 7);
    DtModel<double> c(tiny_dt_cfg(), 8);
    bool same = true, differs = false;
    for (Index i = 0; i < a.params().count(); ++i) {
        if ((a.params().at(i).v - b.params().at(i).v).cwiseAbs().maxCoeff() != 0) same = false;
        if ((a.params().at(i).v - c.params().at(i).v).cwiseAbs().maxCoeff() != 0)
            differs = true;
    }
    CHECK(same);
    CHECK(differs);
}

TEST_CASE("gradients match finite differences through the whole stack") {
    auto cfg = tiny_dt_cfg();
    cfg.blocks = 1;
    cfg.width = 8;
    cfg.context = 3;
    DtModel<double> m(cfg, 13);
    const auto eb = random_batch(cfg, 2, 3, 17);
    VecX<double> target(2 * 3 * cfg.act_dim);
    Rng rng(18);
    for (Index i = 0; i < target.size(); ++i) target[i] = rng.uniform(-2.5, 2.5);

    auto loss = [&](nn::Tape<double>& tp) {
        Rng dummy(0);
        auto out = m.forward(tp, eb.rtg, eb.states, eb.acts, false, dummy);
        return nn::angle_mse(tp, out, target);
    };
    const auto rep = gradcheck::check(m.params(), loss, 1e-5);
    INFO("worst parameter: ", rep.worst);
    CHECK(rep.max_rel < 1e-4);
}

TEST_CASE("cloning a tiny corpus drives the angular loss toward zero") {
    dt::TrajectoryBuffer buf(2, 1, 3, 4);
    Rng rng(23);
    for (uint32_t e = 0; e < 2; ++e) {
        Trajectory tr;
        tr.env_id = e;
        tr.rewards = RVec{{0.4, 0.8, 0.3}};
        tr.returns_to_go = compute_returns_to_go(tr.rewards);
        tr.states = random_mat(3, 4, rng);
        tr.actions = random_angles(3, 2, rng);
        tr.pilots = random_mat(3, 4, rng);
        buf.add(std::move(tr));
    }
    const auto ds = build_dt_dataset<double>(buf);
    CHECK(ds.episodes == 2);
    CHECK(ds.t == 3);
    CHECK(ds.rtg_scale == doctest::Approx(3 * 0.8).epsilon(1e-12));
    CHECK(std::sqrt(ds.states.array().square().mean()) == doctest::Approx(1.0).epsilon(1e-9));

    auto cfg = tiny_dt_cfg();
    cfg.context = 3;
    cfg.dropout = 0.0;  // memorisation target, no regularisation
    DtModel<double> m(cfg, 31);
    nn::AdamW<double> opt(m.params(), {.lr = 3e-3, .weight_decay = 0.0});
    Rng trng(37);
    double first = 0, tail = 0;
    for (int i = 0; i < 500; ++i) {
        const double l = dt_train_step(m, ds, 2, trng, opt);
        if (i == 0) first = l;
        if (i >= 480) tail += l / 20.0;
    }
    CHECK(first > 0.1);
    CHECK(tail < 0.01 * first);
}

TEST_CASE("training steps are reproducible") {
    const auto run = [] {
        dt::TrajectoryBuffer buf(2, 1, 3, 4);
        Rng rng(23);
        Trajectory tr;
        tr.env_id = 0;
        tr.rewards = RVec{{0.4, 0.8, 0.3}};
        tr.returns_to_go = compute_returns_to_go(tr.rewards);
        tr.states = random_mat(3, 4, rng);
        tr.actions = random_angles(3, 2, rng);
        tr.pilots = random_mat(3, 4, rng);
        buf.add(std::move(tr));
        const auto ds = build_dt_dataset<double>(buf);
        auto cfg = tiny_dt_cfg();
        cfg.context = 3;
        DtModel<double> m(cfg, 31);
        nn::AdamW<double> opt(m.params(), {.lr = 1e-3});
        Rng trng(37);
        std::vector<double> losses;
        for (int i = 0; i < 4; ++i) losses.push_back(dt_train_step(m, ds, 2, trng, opt));
        return std::pair{losses, m.params()["embed.state.w"].v};
    };
    const auto a = run();
    const auto b = run();
    CHECK(a.first == b.first);
    CHECK((a.second - b.second).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("history windowing keeps only the trailing context") {
    auto cfg = tiny_dt_cfg();
    cfg.context = 3;
    DtModel<double> m(cfg, 41);
    m.set_scales(2.0, 5.0);

    // five recorded steps; the model must act on the last three only
    const Index t_all = 5;
    Rng rng(43);
    const MatX<double> rtg = random_mat(1, t_all, rng);
    const MatX<double> states = random_mat(t_all, cfg.state_dim, rng);
    const MatX<double> acts = random_angles(t_all, cfg.act_dim, rng);
    const MatX<double> a_full = m.act(rtg, states, acts);

    const MatX<double> a_win = m.act(rtg.rightCols(3), states.bottomRows(3).eval(),
                                     acts.bottomRows(3).eval());
    CHECK((a_full - a_win).cwiseAbs().maxCoeff() == 0.0);

    // and the scales divide the raw inputs on the way in
    EvalBatch eb;
    eb.rtg = (rtg.rightCols(3) / 5.0).eval();
    eb.states = (states.bottomRows(3) / 2.0).eval();
    eb.acts = acts.bottomRows(3).eval();
    const MatX<double> direct = predict(m, eb);
    CHECK((a_full.row(0) - direct.row(2)).cwiseAbs().maxCoeff() < 1e-14);

    // single-step history works too
    const MatX<double> a1 = m.act(rtg.leftCols(1), states.topRows(1).eval(),
                                  acts.topRows(1).eval());
    CHECK(a1.rows() == 1);
    CHECK(a1.cols() == cfg.act_dim);
}

TEST_CASE("batched rollout equals per-episode rollout") {
    const auto env_cfg = tiny_env_cfg();
    DtModel<double>::Config cfg;
    cfg.context = env_cfg.T;
    cfg.state_dim = 2 * env_cfg.N * env_cfg.M;
    cfg.act_dim = env_cfg.N;
    cfg.width = 16;
    cfg.blocks = 1;
    cfg.heads = 2;
    DtModel<double> m(cfg, 51);
    m.set_scales(0.02, 30.0);

    RolloutConfig rc{.target_return = 25.0, .episodes = 3, .first_episode = 10};
    const auto batched = rollout_policy(env_cfg, m, true_state_provider(), rc);
    CHECK(batched.rewards.rows() == 3);
    CHECK(batched.rewards.cols() == env_cfg.T);
    CHECK((batched.episode_returns - batched.rewards.rowwise().sum()).cwiseAbs().maxCoeff() ==
          0.0);
    CHECK(batched.rewards.minCoeff() > 0.0);

    for (Index i = 0; i < 3; ++i) {
        RolloutConfig one{.target_return = 25.0, .episodes = 1,
                          .first_episode = 10 + uint64_t(i)};
        const auto single = rollout_policy(env_cfg, m, true_state_provider(), one);
        CHECK((single.rewards.row(0) - batched.rewards.row(i)).cwiseAbs().maxCoeff() <
              1e-12);
    }

    // reruns are bit-identical, and the return target steers behaviour
    const auto again = rollout_policy(env_cfg, m, true_state_provider(), rc);
    CHECK((again.rewards - batched.rewards).cwiseAbs().maxCoeff() == 0.0);
    RolloutConfig other = rc;
    other.target_return = 2.0;
    const auto steered = rollout_policy(env_cfg, m, true_state_provider(), other);
    CHECK((steered.rewards - batched.rewards).cwiseAbs().maxCoeff() > 1e-12);
}

TEST_CASE("rollout with sampled channel states runs end to end") {
    const auto env_cfg = tiny_env_cfg();
    const Index sd = 2 * env_cfg.N * env_cfg.M;
    const Index pd = channel::pilot_dim(env_cfg);

    diffusion::ConditionalUNet<double>::Config ucfg;
    ucfg.data_dim = sd;
    ucfg.cond_dim = pd;
    ucfg.base_width = 4;
    ucfg.emb_width = 8;
    ucfg.levels = 1;
    diffusion::DiffusionModel<double> dm(ucfg, diffusion::DiffusionSchedule::linear(4, 0.1, 0.3),
                                         {.eta = 0.8}, 61);
    dm.set_scales(0.02, 1.0);

    DtModel<double>::Config cfg;
    cfg.context = env_cfg.T;
    cfg.state_dim = sd;
    cfg.act_dim = env_cfg.N;
    cfg.width = 16;
    cfg.blocks = 1;
    cfg.heads = 2;
    DtModel<double> m(cfg, 51);
    m.set_scales(0.02, 30.0);

    RolloutConfig rc{.target_return = 20.0, .episodes = 2, .first_episode = 0};
    auto provider = diffusion_state_provider(dm, 99);
    const auto res = rollout_policy(env_cfg, m, provider, rc);
    CHECK(res.rewards.minCoeff() > 0.0);
    const auto res2 = rollout_policy(env_cfg, m, provider, rc);
    CHECK((res2.rewards - res.rewards).cwiseAbs().maxCoeff() == 0.0);

    // a different sampler seed changes the sampled states, hence the episode
    auto provider2 = diffusion_state_provider(dm, 100);
    const auto res3 = rollout_policy(env_cfg, m, provider2, rc);
    CHECK((res3.rewards - res.rewards).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("reference policies bracket each other") {
    auto env_cfg = tiny_env_cfg();
    env_cfg.N = 4;
    expert::ExpertConfig xcfg;
    xcfg.restarts = 2;
    xcfg.max_iters = 40;
    RolloutConfig rc{.target_return = 0.0, .episodes = 4, .first_episode = 0};

    const auto xp = rollout_expert(env_cfg, xcfg, rc);
    const auto rnd = rollout_random(env_cfg, rc, 7);
    CHECK(xp.rewards.minCoeff() > 0.0);
    CHECK(rnd.rewards.minCoeff() > 0.0);
    CHECK(xp.mean_return() > rnd.mean_return());

    const auto rnd2 = rollout_random(env_cfg, rc, 7);
    CHECK((rnd2.rewards - rnd.rewards).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("policy checkpoints round-trip bit for bit") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "d2t_dt_ckpt";
    fs::create_directories(dir);

    DtModel<double> m(tiny_dt_cfg(), 71);
    m.set_scales(0.5, 12.0);
    const auto p1 = (dir / "dt_a.bin").string();
    const auto p2 = (dir / "dt_b.bin").string();
    m.save(p1);

    auto loaded = DtModel<double>::load(p1);
    CHECK(loaded.config().context == m.config().context);
    CHECK(loaded.config().width == m.config().width);
    CHECK(loaded.config().heads == m.config().heads);
    CHECK(loaded.config().dropout == doctest::Approx(m.config().dropout).epsilon(1e-12));
    CHECK(loaded.state_scale() == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(loaded.rtg_scale() == doctest::Approx(12.0).epsilon(1e-15));

    const auto eb = random_batch(m.config(), 2, 4, 81);
    CHECK((predict(m, eb) - predict(loaded, eb)).cwiseAbs().maxCoeff() == 0.0);

    loaded.save(p2);
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    const std::string b1((std::istreambuf_iterator<char>(f1)), {});
    const std::string b2((std::istreambuf_iterator<char>(f2)), {});
    CHECK(b1 == b2);
    fs::remove_all(dir);
}
