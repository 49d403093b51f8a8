#pragma once

#include <cmath>

#include "d2t/nn/tensor.hpp"

namespace d2t::nn {

// AdamW: Adam moment updates with weight decay applied directly to the
// parameters (decoupled from the gradient-based step).
template <class S>
class AdamW {
  public:
    struct Config {
        double lr = 1e-4;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 0.01;
    };

    AdamW(ParamStore<S>& params, Config cfg = {}) : params_(params), cfg_(cfg) {
        m_.resize(static_cast<size_t>(params.count()));
        v_.resize(static_cast<size_t>(params.count()));
        for (Index i = 0; i < params.count(); ++i) {
            m_[static_cast<size_t>(i)] = VecX<S>::Zero(params.at(i).size());
            v_[static_cast<size_t>(i)] = VecX<S>::Zero(params.at(i).size());
        }
    }

    void step() {
        ++t_;
        const S bc1 = S(1) - S(std::pow(cfg_.beta1, double(t_)));
        const S bc2 = S(1) - S(std::pow(cfg_.beta2, double(t_)));
        const S lr = S(cfg_.lr), b1 = S(cfg_.beta1), b2 = S(cfg_.beta2);
        const S eps = S(cfg_.eps), wd = S(cfg_.weight_decay);
        for (Index i = 0; i < params_.count(); ++i) {
            Tensor<S>& p = params_.at(i);
            require(p.g.size() == p.v.size(), "AdamW: parameter has no gradient");
            VecX<S>& m = m_[static_cast<size_t>(i)];
            VecX<S>& v = v_[static_cast<size_t>(i)];
            m = b1 * m + (S(1) - b1) * p.g;
            v = b2 * v + (S(1) - b2) * p.g.cwiseProduct(p.g);
            p.v -= lr * wd * p.v;
            p.v.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps);
        }
    }

    long steps() const { return t_; }
    const Config& config() const { return cfg_; }

  private:
    ParamStore<S>& params_;
    Config cfg_;
    std::vector<VecX<S>> m_, v_;
    long t_ = 0;
};

// Global gradient-norm clip; returns the pre-clip norm.
template <class S>
double clip_grad_norm(ParamStore<S>& params, double max_norm) {
    double sq = 0.0;
    for (Index i = 0; i < params.count(); ++i) sq += double(params.at(i).g.squaredNorm());
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        const S f = S(max_norm / norm);
        for (Index i = 0; i < params.count(); ++i) params.at(i).g *= f;
    }
    return norm;
}

}  // namespace d2t::nn
