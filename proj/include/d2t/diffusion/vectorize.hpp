#pragma once

#include "d2t/channel/env.hpp"

namespace d2t::diffusion {

// Bijection between a complex N x M channel and a real vector: all real parts
// row-major, then all imaginary parts, each divided by `scale`.
inline Eigen::VectorXd channel_to_vector(const channel::CMat& H, double scale = 1.0) {
    const Eigen::Index n = H.rows(), m = H.cols();
    Eigen::VectorXd x(2 * n * m);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < m; ++j) {
            x[i * m + j] = H(i, j).real() / scale;
            x[n * m + i * m + j] = H(i, j).imag() / scale;
        }
    return x;
}

inline channel::CMat vector_to_channel(const Eigen::VectorXd& x, Eigen::Index n,
                                       Eigen::Index m, double scale = 1.0) {
    if (x.size() != 2 * n * m)
        throw channel::EnvError("channel vector has wrong length for the given geometry");
    channel::CMat H(n, m);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < m; ++j)
            H(i, j) = {x[i * m + j] * scale, x[n * m + i * m + j] * scale};
    return H;
}

}  // namespace d2t::diffusion
