#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <string>

namespace d2t::diffusion {

struct ScheduleError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Noise schedule: per-step variances beta_k, running products
// alpha_bar_k = prod_{i<=k} (1 - beta_i), and the reverse-posterior variances
// post_var_k = (1 - alpha_bar_{k-1}) / (1 - alpha_bar_k) * beta_k with
// alpha_bar_{-1} := 1, which pins post_var_0 = 0.
struct DiffusionSchedule {
    int K = 0;
    double beta_min = 0, beta_max = 0;
    Eigen::VectorXd beta;       // K
    Eigen::VectorXd alpha_bar;  // K
    Eigen::VectorXd post_var;   // K

    static DiffusionSchedule linear(int K, double beta_min, double beta_max) {
        if (K < 1) throw ScheduleError("schedule needs K >= 1");
        if (!(0 < beta_min && beta_min <= beta_max && beta_max < 1))
            throw ScheduleError("need 0 < beta_min <= beta_max < 1");
        DiffusionSchedule s;
        s.K = K;
        s.beta_min = beta_min;
        s.beta_max = beta_max;
        s.beta.resize(K);
        s.alpha_bar.resize(K);
        s.post_var.resize(K);
        double running = 1.0;
        for (int k = 0; k < K; ++k) {
            s.beta[k] = K == 1 ? beta_min
                               : beta_min + (beta_max - beta_min) * double(k) / double(K - 1);
            const double prev = running;  // alpha_bar_{k-1}, 1 at k=0
            running *= 1.0 - s.beta[k];
            s.alpha_bar[k] = running;
            s.post_var[k] = (1.0 - prev) / (1.0 - running) * s.beta[k];
        }
        s.validate();
        return s;
    }

    void validate() const {
        if (static_cast<int>(beta.size()) != K || static_cast<int>(alpha_bar.size()) != K ||
            static_cast<int>(post_var.size()) != K)
            throw ScheduleError("schedule arrays disagree with K");
        double prev_beta = 0, prev_abar = 1.0;
        for (int k = 0; k < K; ++k) {
            if (!(beta[k] > 0 && beta[k] < 1)) throw ScheduleError("beta out of (0,1)");
            if (beta[k] < prev_beta) throw ScheduleError("beta must be non-decreasing");
            if (!(alpha_bar[k] < prev_abar))
                throw ScheduleError("alpha_bar must strictly decrease");
            if (post_var[k] < 0) throw ScheduleError("posterior variance negative");
            prev_beta = beta[k];
            prev_abar = alpha_bar[k];
        }
    }

    void check_step(int k) const {
        if (k < 0 || k >= K)
            throw ScheduleError("diffusion step " + std::to_string(k) + " outside [0," +
                                std::to_string(K) + ")");
    }
};

// single forward-noising step x_{k+1} = sqrt(1-beta_k) x_k + sqrt(beta_k) eps
template <class Vec>
Vec forward_noise_step(const Vec& x, int k, const Vec& eps, const DiffusionSchedule& s) {
    s.check_step(k);
    using Scalar = typename Vec::Scalar;
    return Scalar(std::sqrt(1.0 - s.beta[k])) * x + Scalar(std::sqrt(s.beta[k])) * eps;
}

// closed-form marginal x_k = sqrt(abar_k) x_0 + sqrt(1-abar_k) eps
template <class Vec>
Vec forward_noise_closed(const Vec& x0, int k, const Vec& eps, const DiffusionSchedule& s) {
    s.check_step(k);
    using Scalar = typename Vec::Scalar;
    return Scalar(std::sqrt(s.alpha_bar[k])) * x0 +
           Scalar(std::sqrt(1.0 - s.alpha_bar[k])) * eps;
}

}  // namespace d2t::diffusion
