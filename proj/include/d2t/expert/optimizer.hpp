#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "d2t/channel/env.hpp"
#include "d2t/rng.hpp"

namespace d2t::expert {

using channel::CMat;
using channel::CVec;
using channel::RVec;

struct ExpertConfig {
    int restarts = 8;
    int max_iters = 200;
    double step0 = 1.0;       // initial Armijo step
    double tol = 1e-10;       // gradient-norm stopping threshold
    double armijo_c = 1e-4;
    int oracle_q = 16;        // quantization levels for the exhaustive oracle
};

// objective g(phi) = |phi^T H|^2 = u^H B u with B = H H^H and u = conj(e^{j phi})
inline double phase_objective(const RVec& phases, const CMat& B) {
    const CVec u = channel::reflection(phases).conjugate();
    return (u.adjoint() * B * u)(0).real();
}

// dg/dphi_n = -2 Im( v_n * (B conj(v))_n ), v = e^{j phi}
inline RVec phase_gradient(const RVec& phases, const CMat& B) {
    const CVec v = channel::reflection(phases);
    const CVec u = B * v.conjugate();
    RVec g(phases.size());
    for (Eigen::Index n = 0; n < phases.size(); ++n)
        g[n] = -2.0 * std::imag(v[n] * u[n]);
    return g;
}

namespace detail {

// relaxed solution: unit-modulus projection of B's leading eigenvector
inline RVec eigen_init(const CMat& B) {
    CVec u = CVec::Ones(B.rows());
    for (int it = 0; it < 20; ++it) {
        u = B * u;
        const double n = u.norm();
        if (!(n > 0)) break;
        u /= n;
    }
    RVec phases(B.rows());
    for (Eigen::Index n = 0; n < B.rows(); ++n) phases[n] = -std::arg(u[n]);
    return phases;
}

// monotone ascent with step halving; returns the best objective reached
inline double ascend(RVec& phases, const CMat& B, const ExpertConfig& cfg) {
    double value = phase_objective(phases, B);
    for (int it = 0; it < cfg.max_iters; ++it) {
        const RVec grad = phase_gradient(phases, B);
        const double gnorm2 = grad.squaredNorm();
        if (gnorm2 < cfg.tol * cfg.tol) break;
        double step = cfg.step0;
        bool accepted = false;
        while (step > 1e-12) {
            RVec cand = phases + step * grad;
            for (Eigen::Index n = 0; n < cand.size(); ++n)
                cand[n] = channel::wrap_to_pi(cand[n]);
            const double cv = phase_objective(cand, B);
            if (cv > value + cfg.armijo_c * step * gnorm2) {
                phases = cand;
                value = cv;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break;
    }
    return value;
}

}  // namespace detail

// Expert policy: maximizes the slot rate over unit-modulus phase shifts by
// angular gradient ascent with restarts. Deterministic in (H, config, rng
// state). Returned angles are canonicalized (first element zero).
inline RVec optimize_phases(const CMat& H, const ExpertConfig& cfg, Rng& rng) {
    if (H.rows() < 1 || !(H.squaredNorm() > 0))
        throw channel::EnvError("degenerate channel");
    const CMat B = H * H.adjoint();
    RVec best;
    double best_value = -1.0;
    for (int r = 0; r < std::max(1, cfg.restarts); ++r) {
        RVec phases;
        if (r == 0) {
            phases = detail::eigen_init(B);
        } else {
            phases = RVec(H.rows());
            for (Eigen::Index n = 0; n < H.rows(); ++n)
                phases[n] = rng.uniform(-std::numbers::pi, std::numbers::pi);
        }
        const double v = detail::ascend(phases, B, cfg);
        if (v > best_value) {
            best_value = v;
            best = phases;
        }
    }
    return channel::canonicalize_phases(best);
}

struct OracleResult {
    RVec phases;
    double rate = 0;
    long evaluations = 0;
};

// Exhaustive search over Q^N quantized phase vectors. Guarded; meant for
// validating the optimizer at tiny N only.
inline OracleResult exhaustive_phase_oracle(const CMat& H, int Q,
                                            const channel::EnvConfig& cfg) {
    const int N = static_cast<int>(H.rows());
    if (Q < 2) throw channel::EnvError("oracle needs Q >= 2");
    double total = std::pow(double(Q), double(N));
    if (total > 1e7) throw channel::EnvError("oracle grid too large: Q^N > 1e7");

    std::vector<int> idx(static_cast<size_t>(N), 0);
    auto angle = [&](int q) { return -std::numbers::pi + 2.0 * std::numbers::pi * q / Q; };
    OracleResult best;
    best.rate = -1.0;
    RVec phases(N);
    while (true) {
        for (int n = 0; n < N; ++n) phases[n] = angle(idx[static_cast<size_t>(n)]);
        const double r = channel::achievable_rate(phases, H, cfg);
        ++best.evaluations;
        if (r > best.rate) {
            best.rate = r;
            best.phases = phases;
        }
        int carry = 0;
        while (carry < N && ++idx[static_cast<size_t>(carry)] == Q) {
            idx[static_cast<size_t>(carry)] = 0;
            ++carry;
        }
        if (carry == N) break;
    }
    return best;
}

}  // namespace d2t::expert
