#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <complex>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "d2t/rng.hpp"

namespace d2t::channel {

using CVec = Eigen::VectorXcd;
using CMat = Eigen::MatrixXcd;
using RVec = Eigen::VectorXd;

struct EnvError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline double dbm_to_mw(double dbm) { return std::pow(10.0, dbm / 10.0); }

// LOS geometry of one environment, drawn once from its seed.
struct LosAngles {
    double theta_dep = 0;   // departure at the BS array
    double theta_arr = 0;   // arrival at the reflecting surface
    double theta_user = 0;  // surface-to-user direction
};

inline LosAngles draw_los_angles(uint64_t seed) {
    Rng rng(tag_seed(seed, "los-angles"));
    const double half_pi = std::numbers::pi / 2.0;
    LosAngles a;
    a.theta_dep = rng.uniform(-half_pi, half_pi);
    a.theta_arr = rng.uniform(-half_pi, half_pi);
    a.theta_user = rng.uniform(-half_pi, half_pi);
    return a;
}

// All physical constants of one environment. Powers are stored in mW (callers
// convert from dBm exactly once, at config load).
struct EnvConfig {
    int M = 4;               // BS antennas
    int N = 16;              // reflecting elements
    double P_mw = dbm_to_mw(5.0);
    double sigma2_mw = dbm_to_mw(-90.0);
    double kappa1 = 10.0;    // Rician factor, BS-surface link
    double kappa2 = 10.0;    // Rician factor, surface-user link
    double xi1 = 2.2;        // path-loss exponent, BS-surface
    double xi2 = 2.8;        // path-loss exponent, surface-user
    double d0 = 1.0;         // reference distance (m)
    double d1 = 22.0;        // BS-surface distance (m)
    double d2 = 8.0;         // surface-user distance (m)
    double L0_db = -30.0;    // path loss at d0 (dB)
    int T = 20;              // slots per episode
    LosAngles angles;
    uint64_t seed = 1;
    uint64_t pilot_seed = 9000;  // shared across environments of a run
    int pilot_reps = 8;          // repetitions averaged per probe

    void validate() const {
        auto fail = [](const std::string& m) { throw EnvError("env config: " + m); };
        if (M < 1 || N < 1 || T < 1) fail("M, N, T must be >= 1");
        if (!(P_mw > 0) || !(sigma2_mw > 0)) fail("powers must be positive");
        if (kappa1 < 0 || kappa2 < 0) fail("Rician factors must be >= 0");
        if (!(d0 > 0) || d1 < d0 || d2 < d0) fail("need d1, d2 >= d0 > 0");
        if (pilot_reps < 1) fail("pilot_reps must be >= 1");
    }
};

inline double path_loss_linear(double L0_db, double xi, double d, double d0) {
    if (d < d0) throw EnvError("path loss queried below reference distance");
    return std::pow(10.0, (L0_db - 10.0 * xi * std::log10(d / d0)) / 10.0);
}

inline double path_loss_linear(const EnvConfig& cfg, double xi, double d) {
    return path_loss_linear(cfg.L0_db, xi, d, cfg.d0);
}

// half-wavelength uniform linear array response
inline CVec steering_vector(double theta, int n) {
    CVec a(n);
    const double s = std::sin(theta);
    for (int i = 0; i < n; ++i)
        a[i] = std::polar(1.0, std::numbers::pi * double(i) * s);
    return a;
}

enum class Link { BsToSurface, SurfaceToUser };

// Rician draw: sqrt(L) * ( sqrt(k/(1+k)) * LOS + sqrt(1/(1+k)) * scatter ),
// scatter entries circularly-symmetric complex normal with unit variance.
inline CMat sample_rician(const EnvConfig& cfg, Link link, Rng& rng) {
    const bool g = link == Link::BsToSurface;
    const double kappa = g ? cfg.kappa1 : cfg.kappa2;
    const double L = g ? path_loss_linear(cfg, cfg.xi1, cfg.d1)
                       : path_loss_linear(cfg, cfg.xi2, cfg.d2);
    const int rows = cfg.N;
    const int cols = g ? cfg.M : 1;
    CMat los(rows, cols);
    if (g)
        los = steering_vector(cfg.angles.theta_arr, cfg.N) *
              steering_vector(cfg.angles.theta_dep, cfg.M).adjoint();
    else
        los = steering_vector(cfg.angles.theta_user, cfg.N);
    CMat scatter(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) scatter(i, j) = rng.cnormal();
    const double c_los = std::sqrt(kappa / (1.0 + kappa));
    const double c_sc = std::sqrt(1.0 / (1.0 + kappa));
    return std::sqrt(L) * (c_los * los + c_sc * scatter);
}

// effective BS-to-user channel through the surface, H[n,m] = conj(h[n]) G[n,m]
inline CMat cascade(const CMat& G, const CVec& h) {
    if (G.rows() != h.size()) throw EnvError("cascade: G rows must match h length");
    return h.conjugate().asDiagonal() * G;
}

struct ChannelRealization {
    CMat G;  // N x M
    CVec h;  // N
    CMat H;  // N x M cascaded
};

inline ChannelRealization draw_channel(const EnvConfig& cfg, Rng& rng) {
    ChannelRealization c;
    c.G = sample_rician(cfg, Link::BsToSurface, rng);
    c.h = sample_rician(cfg, Link::SurfaceToUser, rng).col(0);
    c.H = cascade(c.G, c.h);
    return c;
}

// unit-modulus reflection coefficients for a vector of phase shifts
inline CVec reflection(const RVec& phases) {
    CVec v(phases.size());
    for (Eigen::Index i = 0; i < phases.size(); ++i) v[i] = std::polar(1.0, phases[i]);
    return v;
}

inline double wrap_to_pi(double a) { return std::atan2(std::sin(a), std::cos(a)); }

// gauge fix: a common phase offset does not change any rate, so expert targets
// are stored with the first element rotated to zero
inline RVec canonicalize_phases(const RVec& phases) {
    RVec out(phases.size());
    const double ref = phases.size() ? phases[0] : 0.0;
    for (Eigen::Index i = 0; i < phases.size(); ++i) out[i] = wrap_to_pi(phases[i] - ref);
    return out;
}

// squared norm of the effective row channel phi^T H
inline double effective_gain(const RVec& phases, const CMat& H) {
    if (phases.size() != H.rows()) throw EnvError("phase count must match surface size");
    return (reflection(phases).transpose() * H).squaredNorm();
}

// maximum-ratio transmit beamformer; carries the whole power budget exactly
inline CVec mrt_precoder(const RVec& phases, const CMat& H, double P_mw) {
    Eigen::RowVectorXcd eff = reflection(phases).transpose() * H;
    const double nrm = eff.norm();
    if (!(nrm > 0)) throw EnvError("degenerate channel");
    return std::sqrt(P_mw) * eff.adjoint() / nrm;
}

inline double rate_with_precoder(const RVec& phases, const CMat& H, const CVec& f,
                                 double sigma2_mw) {
    const std::complex<double> s = (reflection(phases).transpose() * H * f)(0);
    return std::log2(1.0 + std::norm(s) / sigma2_mw);
}

// rate under the optimal precoder, log2(1 + P |phi^T H|^2 / sigma^2)
inline double achievable_rate(const RVec& phases, const CMat& H, const EnvConfig& cfg) {
    return std::log2(1.0 + cfg.P_mw * effective_gain(phases, H) / cfg.sigma2_mw);
}

// ---------------------------------------------------------------------------
// pilot protocol

// Fixed probe set published with the run config: probe p applies a seeded
// random reflection pattern while the BS sends through canonical precoder
// column (p mod M) at full power.
struct PilotBook {
    std::vector<CVec> reflections;  // N_p entries, length N
    std::vector<CVec> precoders;    // N_p entries, length M
    int count() const { return static_cast<int>(reflections.size()); }

    static PilotBook build(int N, int M, double P_mw, uint64_t pilot_seed) {
        const int np = 2 * std::min(N, M) + 2;
        Rng rng(tag_seed(pilot_seed, "pilot-book"));
        PilotBook book;
        for (int p = 0; p < np; ++p) {
            RVec ph(N);
            for (int n = 0; n < N; ++n)
                ph[n] = rng.uniform(-std::numbers::pi, std::numbers::pi);
            book.reflections.push_back(reflection(ph));
            CVec f = CVec::Zero(M);
            f[p % M] = std::sqrt(P_mw);
            book.precoders.push_back(f);
        }
        return book;
    }
};

struct PilotObservation {
    RVec y;  // stacked re/im per probe, length 2*N_p
};

inline int pilot_dim(const EnvConfig& cfg) { return 2 * (2 * std::min(cfg.N, cfg.M) + 2); }

// y_p = (phi_p^T H) f_p + noise, each probe repeated pilot_reps times and
// averaged (noise variance shrinks by the repetition count)
inline PilotObservation pilot_observe(const CMat& H, const PilotBook& book,
                                      const EnvConfig& cfg, Rng& rng) {
    const double nstd = std::sqrt(cfg.sigma2_mw);
    PilotObservation obs;
    obs.y = RVec(2 * book.count());
    for (int p = 0; p < book.count(); ++p) {
        const std::complex<double> s =
            (book.reflections[static_cast<size_t>(p)].transpose() * H *
             book.precoders[static_cast<size_t>(p)])(0);
        std::complex<double> acc = 0;
        for (int r = 0; r < cfg.pilot_reps; ++r) acc += s + nstd * rng.cnormal();
        acc /= double(cfg.pilot_reps);
        obs.y[2 * p] = acc.real();
        obs.y[2 * p + 1] = acc.imag();
    }
    return obs;
}

// ---------------------------------------------------------------------------
// episode stepping

struct StepResult {
    double reward = 0;
    ChannelRealization next;
    PilotObservation pilot;
};

// One episode of T slots. Channels are i.i.d. across slots; all randomness
// comes from streams derived from (config seed, episode index), so batched
// and sequential rollouts of the same episode ids coincide exactly.
class Environment {
  public:
    Environment(EnvConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        book_ = PilotBook::build(cfg_.N, cfg_.M, cfg_.P_mw, cfg_.pilot_seed);
    }

    const EnvConfig& config() const { return cfg_; }
    const PilotBook& pilot_book() const { return book_; }

    // starts episode `episode`; returns the first slot's channel and pilots
    StepResult reset(uint64_t episode) {
        chan_rng_ = Rng(tag_seed(mix_seed(cfg_.seed, episode), "channel"));
        noise_rng_ = Rng(tag_seed(mix_seed(cfg_.seed, episode), "pilot-noise"));
        slot_ = 0;
        StepResult r;
        r.next = draw_channel(cfg_, chan_rng_);
        r.pilot = pilot_observe(r.next.H, book_, cfg_, noise_rng_);
        current_ = r.next;
        return r;
    }

    bool done() const { return slot_ >= cfg_.T; }
    int slot() const { return slot_; }
    const ChannelRealization& current() const { return current_; }

    // applies the action to the current channel, then advances to a fresh one
    StepResult step(const RVec& phases) {
        if (done()) throw EnvError("episode is over; call reset");
        StepResult r;
        r.reward = achievable_rate(phases, current_.H, cfg_);
        ++slot_;
        if (!done()) {
            r.next = draw_channel(cfg_, chan_rng_);
            r.pilot = pilot_observe(r.next.H, book_, cfg_, noise_rng_);
            current_ = r.next;
        }
        return r;
    }

  private:
    EnvConfig cfg_;
    PilotBook book_;
    Rng chan_rng_{0};
    Rng noise_rng_{0};
    ChannelRealization current_;
    int slot_ = 0;
};

}  // namespace d2t::channel
