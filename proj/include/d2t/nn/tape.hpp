#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <type_traits>
#include <utility>
#include <vector>

#include "d2t/nn/tensor.hpp"
#include "d2t/rng.hpp"

namespace d2t::nn {

// Reverse-mode tape. Ops append nodes in topological order during the forward
// pass; backward() walks the nodes in reverse and accumulates gradients.
// Parameters bound via param() receive their gradient sums in Tensor::g.
template <class S>
class Tape {
  public:
    using Id = int;

    struct Node {
        Shape shape;
        VecX<S> val;
        VecX<S> grad;
        std::function<void(Tape&)> back;
        Tensor<S>* bound = nullptr;
    };

    Id make(Shape shape, VecX<S> val) {
        nodes_.push_back(Node{std::move(shape), std::move(val), {}, nullptr, nullptr});
        return static_cast<Id>(nodes_.size()) - 1;
    }
    void set_back(Id id, std::function<void(Tape&)> f) {
        nodes_[static_cast<size_t>(id)].back = std::move(f);
    }

    // constant leaf (value copied in; gradient still accumulated and readable)
    Id input(const Tensor<S>& t) { return make(t.shape, t.v); }
    Id input(Shape shape, VecX<S> v) {
        require(numel(shape) == v.size(), "input value count does not match shape");
        return make(std::move(shape), std::move(v));
    }

    // leaf bound to an external parameter; backward() adds into t.g
    Id param(Tensor<S>& t) {
        t.ensure_grad();
        Id id = make(t.shape, t.v);
        nodes_[static_cast<size_t>(id)].bound = &t;
        return id;
    }

    const Shape& shape(Id id) const { return nodes_[static_cast<size_t>(id)].shape; }
    const VecX<S>& val(Id id) const { return nodes_[static_cast<size_t>(id)].val; }
    const VecX<S>& grad(Id id) const { return nodes_[static_cast<size_t>(id)].grad; }
    Index size() const { return static_cast<Index>(nodes_.size()); }

    // gradient accumulator for node `id`; allocates lazily and marks the node
    // live so its own backward fires
    VecX<S>& gacc(Id id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.size() != n.val.size()) n.grad = VecX<S>::Zero(n.val.size());
        if (!touched_.empty()) touched_[static_cast<size_t>(id)] = 1;
        return n.grad;
    }

    void backward(Id out) {
        if (nodes_.empty() || out < 0 || out >= size())
            throw TapeError("backward called without a recorded forward pass");
        VecX<S> seed = VecX<S>::Ones(nodes_[static_cast<size_t>(out)].val.size());
        backward(out, seed);
    }

    void backward(Id out, const VecX<S>& seed) {
        if (nodes_.empty() || out < 0 || out >= size())
            throw TapeError("backward called without a recorded forward pass");
        if (seed.size() != nodes_[static_cast<size_t>(out)].val.size())
            throw ShapeError("backward seed shape mismatch");
        touched_.assign(nodes_.size(), 0);
        gacc(out) = seed;
        for (Id id = out; id >= 0; --id) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (!touched_[static_cast<size_t>(id)]) continue;
            if (n.back) n.back(*this);
            if (n.bound) n.bound->g += n.grad;
        }
        touched_.clear();
    }

  private:
    std::vector<Node> nodes_;
    std::vector<char> touched_;
};

namespace detail {
template <class S>
Eigen::Map<const MatX<S>> cmat(const VecX<S>& v, Index r, Index c) {
    return Eigen::Map<const MatX<S>>(v.data(), r, c);
}
template <class S>
Eigen::Map<MatX<S>> mmat(VecX<S>& v, Index r, Index c) {
    return Eigen::Map<MatX<S>>(v.data(), r, c);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise and scalar ops

template <class S>
typename Tape<S>::Id add(Tape<S>& tp, typename Tape<S>::Id a, typename Tape<S>::Id b) {
    require(tp.shape(a) == tp.shape(b),
            "add: shape mismatch " + shape_str(tp.shape(a)) + " vs " + shape_str(tp.shape(b)));
    auto id = tp.make(tp.shape(a), tp.val(a) + tp.val(b));
    tp.set_back(id, [a, b, id](Tape<S>& t) {
        t.gacc(a) += t.grad(id);
        t.gacc(b) += t.grad(id);
    });
    return id;
}

template <class S>
typename Tape<S>::Id sub(Tape<S>& tp, typename Tape<S>::Id a, typename Tape<S>::Id b) {
    require(tp.shape(a) == tp.shape(b), "sub: shape mismatch");
    auto id = tp.make(tp.shape(a), tp.val(a) - tp.val(b));
    tp.set_back(id, [a, b, id](Tape<S>& t) {
        t.gacc(a) += t.grad(id);
        t.gacc(b) -= t.grad(id);
    });
    return id;
}

template <class S>
typename Tape<S>::Id mul(Tape<S>& tp, typename Tape<S>::Id a, typename Tape<S>::Id b) {
    require(tp.shape(a) == tp.shape(b), "mul: shape mismatch");
    auto id = tp.make(tp.shape(a), tp.val(a).cwiseProduct(tp.val(b)));
    tp.set_back(id, [a, b, id](Tape<S>& t) {
        t.gacc(a) += t.grad(id).cwiseProduct(t.val(b));
        t.gacc(b) += t.grad(id).cwiseProduct(t.val(a));
    });
    return id;
}

template <class S>
typename Tape<S>::Id scale(Tape<S>& tp, typename Tape<S>::Id a, S c) {
    auto id = tp.make(tp.shape(a), (tp.val(a) * c).eval());
    tp.set_back(id, [a, c, id](Tape<S>& t) { t.gacc(a) += c * t.grad(id); });
    return id;
}

template <class S>
typename Tape<S>::Id reshape(Tape<S>& tp, typename Tape<S>::Id a, Shape s) {
    require(numel(s) == tp.val(a).size(),
            "reshape: element count mismatch " + shape_str(tp.shape(a)) + " -> " + shape_str(s));
    auto id = tp.make(std::move(s), tp.val(a));
    tp.set_back(id, [a, id](Tape<S>& t) { t.gacc(a) += t.grad(id); });
    return id;
}

enum class Act { Identity, Relu, Silu, Gelu, Tanh };

inline Act act_from_name(const std::string& name) {
    if (name == "identity" || name.empty()) return Act::Identity;
    if (name == "relu") return Act::Relu;
    if (name == "silu") return Act::Silu;
    if (name == "gelu") return Act::Gelu;
    if (name == "tanh") return Act::Tanh;
    throw ShapeError("unknown activation: " + name);
}

template <class S>
typename Tape<S>::Id activation(Tape<S>& tp, typename Tape<S>::Id a, Act kind) {
    if (kind == Act::Identity) return a;
    const VecX<S>& x = tp.val(a);
    VecX<S> y(x.size());
    switch (kind) {
        case Act::Relu:
            y = x.cwiseMax(S(0));
            break;
        case Act::Silu:
            for (Index i = 0; i < x.size(); ++i) y[i] = x[i] / (S(1) + std::exp(-x[i]));
            break;
        case Act::Gelu:
            for (Index i = 0; i < x.size(); ++i)
                y[i] = S(0.5) * x[i] * (S(1) + std::erf(x[i] * S(std::numbers::sqrt2 / 2.0)));
            break;
        case Act::Tanh:
            for (Index i = 0; i < x.size(); ++i) y[i] = std::tanh(x[i]);
            break;
        default:
            break;
    }
    auto id = tp.make(tp.shape(a), std::move(y));
    tp.set_back(id, [a, id, kind](Tape<S>& t) {
        const VecX<S>& x = t.val(a);
        const VecX<S>& go = t.grad(id);
        VecX<S>& ga = t.gacc(a);
        switch (kind) {
            case Act::Relu:
                for (Index i = 0; i < x.size(); ++i)
                    if (x[i] > S(0)) ga[i] += go[i];
                break;
            case Act::Silu:
                for (Index i = 0; i < x.size(); ++i) {
                    const S sig = S(1) / (S(1) + std::exp(-x[i]));
                    ga[i] += go[i] * sig * (S(1) + x[i] * (S(1) - sig));
                }
                break;
            case Act::Gelu:
                for (Index i = 0; i < x.size(); ++i) {
                    const S cdf = S(0.5) * (S(1) + std::erf(x[i] * S(std::numbers::sqrt2 / 2.0)));
                    const S pdf = S(std::exp(-0.5 * double(x[i]) * double(x[i])) /
                                    std::sqrt(2.0 * std::numbers::pi));
                    ga[i] += go[i] * (cdf + x[i] * pdf);
                }
                break;
            case Act::Tanh:
                for (Index i = 0; i < x.size(); ++i) {
                    const S th = std::tanh(x[i]);
                    ga[i] += go[i] * (S(1) - th * th);
                }
                break;
            default:
                break;
        }
    });
    return id;
}

// ---------------------------------------------------------------------------
// matrix ops; tensors of rank 2 are interpreted as row-major [rows, cols]

template <class S>
typename Tape<S>::Id matmul(Tape<S>& tp, typename Tape<S>::Id a, typename Tape<S>::Id b) {
    const Shape& sa = tp.shape(a);
    const Shape& sb = tp.shape(b);
    require(sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0],
            "matmul: incompatible shapes " + shape_str(sa) + " x " + shape_str(sb));
    const Index r = sa[0], k = sa[1], c = sb[1];
    VecX<S> out(r * c);
    detail::mmat(out, r, c).noalias() =
        detail::cmat(tp.val(a), r, k) * detail::cmat(tp.val(b), k, c);
    auto id = tp.make({r, c}, std::move(out));
    tp.set_back(id, [a, b, id, r, k, c](Tape<S>& t) {
        auto go = detail::cmat(t.grad(id), r, c);
        detail::mmat(t.gacc(a), r, k).noalias() += go * detail::cmat(t.val(b), k, c).transpose();
        detail::mmat(t.gacc(b), k, c).noalias() += detail::cmat(t.val(a), r, k).transpose() * go;
    });
    return id;
}

// x: [R,C], b: [C]; adds b to every row
template <class S>
typename Tape<S>::Id bias_add(Tape<S>& tp, typename Tape<S>::Id x, typename Tape<S>::Id b) {
    const Shape& sx = tp.shape(x);
    const Shape& sb = tp.shape(b);
    require(sx.size() == 2 && sb.size() == 1 && sx[1] == sb[0],
            "bias_add: shapes " + shape_str(sx) + " + " + shape_str(sb));
    const Index r = sx[0], c = sx[1];
    VecX<S> out(r * c);
    detail::mmat(out, r, c) = detail::cmat(tp.val(x), r, c).rowwise() +
                              tp.val(b).transpose();
    auto id = tp.make(sx, std::move(out));
    tp.set_back(id, [x, b, id, r, c](Tape<S>& t) {
        auto go = detail::cmat(t.grad(id), r, c);
        detail::mmat(t.gacc(x), r, c) += go;
        t.gacc(b) += go.colwise().sum().transpose();
    });
    return id;
}

// y = x W + b
template <class S>
typename Tape<S>::Id dense(Tape<S>& tp, typename Tape<S>::Id x, typename Tape<S>::Id w,
                           typename Tape<S>::Id b) {
    return bias_add(tp, matmul(tp, x, w), b);
}

// repeats a [C] row vector into [B,C]
template <class S>
typename Tape<S>::Id broadcast_row(Tape<S>& tp, typename Tape<S>::Id r, Index batch) {
    const Shape& sr = tp.shape(r);
    require(sr.size() == 1, "broadcast_row: expected rank-1 input");
    const Index c = sr[0];
    VecX<S> out(batch * c);
    detail::mmat(out, batch, c).rowwise() = tp.val(r).transpose();
    auto id = tp.make({batch, c}, std::move(out));
    tp.set_back(id, [r, id, batch, c](Tape<S>& t) {
        t.gacc(r) += detail::cmat(t.grad(id), batch, c).colwise().sum().transpose();
    });
    return id;
}

// out row i = mask[i] ? alt : a row i   (used for null-condition substitution)
template <class S>
typename Tape<S>::Id row_select_mix(Tape<S>& tp, typename Tape<S>::Id a, typename Tape<S>::Id alt,
                                    std::vector<char> mask) {
    const Shape& sa = tp.shape(a);
    const Shape& sr = tp.shape(alt);
    require(sa.size() == 2 && sr.size() == 1 && sa[1] == sr[0] &&
                static_cast<Index>(mask.size()) == sa[0],
            "row_select_mix: shape mismatch");
    const Index r = sa[0], c = sa[1];
    VecX<S> out = tp.val(a);
    auto m = detail::mmat(out, r, c);
    for (Index i = 0; i < r; ++i)
        if (mask[static_cast<size_t>(i)]) m.row(i) = tp.val(alt).transpose();
    auto id = tp.make(sa, std::move(out));
    tp.set_back(id, [a, alt, id, r, c, mask = std::move(mask)](Tape<S>& t) {
        auto go = detail::cmat(t.grad(id), r, c);
        auto ga = detail::mmat(t.gacc(a), r, c);
        VecX<S>& gr = t.gacc(alt);
        for (Index i = 0; i < r; ++i) {
            if (mask[static_cast<size_t>(i)])
                gr += go.row(i).transpose();
            else
                ga.row(i) += go.row(i);
        }
    });
    return id;
}

template <class S>
typename Tape<S>::Id concat_rows(Tape<S>& tp, typename Tape<S>::Id a, typename Tape<S>::Id b) {
    const Shape& sa = tp.shape(a);
    const Shape& sb = tp.shape(b);
    require(sa.size() == 2 && sb.size() == 2 && sa[1] == sb[1], "concat_rows: column mismatch");
    const Index ra = sa[0], rb = sb[0], c = sa[1];
    VecX<S> out(( ra + rb) * c);
    out.head(ra * c) = tp.val(a);
    out.tail(rb * c) = tp.val(b);
    auto id = tp.make({ra + rb, c}, std::move(out));
    tp.set_back(id, [a, b, id, ra, rb, c](Tape<S>& t) {
        t.gacc(a) += t.grad(id).head(ra * c);
        t.gacc(b) += t.grad(id).tail(rb * c);
    });
    return id;
}

template <class S>
typename Tape<S>::Id gather_rows(Tape<S>& tp, typename Tape<S>::Id x, std::vector<Index> rows) {
    const Shape& sx = tp.shape(x);
    require(sx.size() == 2, "gather_rows: expected rank-2 input");
    const Index r = sx[0], c = sx[1];
    const Index n = static_cast<Index>(rows.size());
    for (Index i : rows) require(i >= 0 && i < r, "gather_rows: row index out of range");
    VecX<S> out(n * c);
    auto src = detail::cmat(tp.val(x), r, c);
    auto dst = detail::mmat(out, n, c);
    for (Index i = 0; i < n; ++i) dst.row(i) = src.row(rows[static_cast<size_t>(i)]);
    auto id = tp.make({n, c}, std::move(out));
    tp.set_back(id, [x, id, r, c, n, rows = std::move(rows)](Tape<S>& t) {
        auto go = detail::cmat(t.grad(id), n, c);
        auto gx = detail::mmat(t.gacc(x), r, c);
        for (Index i = 0; i < n; ++i) gx.row(rows[static_cast<size_t>(i)]) += go.row(i);
    });
    return id;
}

// lookup of integer indices into an embedding table [V,C]
template <class S>
typename Tape<S>::Id embedding(Tape<S>& tp, typename Tape<S>::Id table, std::vector<Index> idx) {
    const Shape& st = tp.shape(table);
    require(st.size() == 2, "embedding: table must be rank 2");
    for (Index i : idx)
        require(i >= 0 && i < st[0],
                "embedding: index " + std::to_string(i) + " out of vocabulary " +
                    std::to_string(st[0]));
    return gather_rows(tp, table, std::move(idx));
}

// ---------------------------------------------------------------------------
// normalization

// rowwise layer norm over the last axis of [R,C] with per-column affine
template <class S>
typename Tape<S>::Id layer_norm(Tape<S>& tp, typename Tape<S>::Id x, typename Tape<S>::Id gain,
                                typename Tape<S>::Id bias, S eps = S(1e-5)) {
    const Shape& sx = tp.shape(x);
    require(sx.size() == 2, "layer_norm: expected rank-2 input, got " + shape_str(sx));
    const Index r = sx[0], c = sx[1];
    require(tp.shape(gain) == Shape{c} && tp.shape(bias) == Shape{c},
            "layer_norm: affine params must have shape [" + std::to_string(c) + "]");
    VecX<S> xhat(r * c), inv_std(r), out(r * c);
    auto xm = detail::cmat(tp.val(x), r, c);
    auto hm = detail::mmat(xhat, r, c);
    auto om = detail::mmat(out, r, c);
    for (Index i = 0; i < r; ++i) {
        const S mean = xm.row(i).mean();
        const S var = (xm.row(i).array() - mean).square().sum() / S(c);
        inv_std[i] = S(1) / std::sqrt(var + eps);
        hm.row(i) = ((xm.row(i).array() - mean) * inv_std[i]).matrix();
        om.row(i) = hm.row(i).cwiseProduct(tp.val(gain).transpose()) + tp.val(bias).transpose();
    }
    auto id = tp.make(sx, std::move(out));
    tp.set_back(id, [x, gain, bias, id, r, c, xhat = std::move(xhat),
                     inv_std = std::move(inv_std)](Tape<S>& t) {
        auto go = detail::cmat(t.grad(id), r, c);
        auto hm = detail::cmat(xhat, r, c);
        auto gx = detail::mmat(t.gacc(x), r, c);
        VecX<S>& gg = t.gacc(gain);
        VecX<S>& gb = t.gacc(bias);
        for (Index i = 0; i < r; ++i) {
            Eigen::RowVector<S, Eigen::Dynamic> dxh =
                go.row(i).cwiseProduct(t.val(gain).transpose());
            const S m1 = dxh.mean();
            const S m2 = dxh.cwiseProduct(hm.row(i)).mean();
            gx.row(i) += ((dxh.array() - m1 - hm.row(i).array() * m2) * inv_std[i]).matrix();
            gg += go.row(i).cwiseProduct(hm.row(i)).transpose();
            gb += go.row(i).transpose();
        }
    });
    return id;
}

// group norm over [B,C,L]: statistics per (sample, group) across (C/G x L),
// affine per channel
template <class S>
typename Tape<S>::Id group_norm(Tape<S>& tp, typename Tape<S>::Id x, Index groups,
                                typename Tape<S>::Id gain, typename Tape<S>::Id bias,
                                S eps = S(1e-5)) {
    const Shape& sx = tp.shape(x);
    require(sx.size() == 3, "group_norm: expected rank-3 [batch,channels,length]");
    const Index b = sx[0], c = sx[1], l = sx[2];
    require(groups >= 1 && c % groups == 0,
            "group_norm: " + std::to_string(groups) + " groups do not divide " +
                std::to_string(c) + " channels");
    require(tp.shape(gain) == Shape{c} && tp.shape(bias) == Shape{c},
            "group_norm: affine params must have shape [" + std::to_string(c) + "]");
    const Index cg = c / groups;      // channels per group
    const Index m = cg * l;           // elements per group
    VecX<S> xhat(b * c * l), inv_std(b * groups), out(b * c * l);
    const VecX<S>& xv = tp.val(x);
    for (Index bi = 0; bi < b; ++bi) {
        for (Index g = 0; g < groups; ++g) {
            const Index off = bi * c * l + g * cg * l;
            auto seg = xv.segment(off, m);
            const S mean = seg.mean();
            const S var = (seg.array() - mean).square().sum() / S(m);
            const S is = S(1) / std::sqrt(var + eps);
            inv_std[bi * groups + g] = is;
            xhat.segment(off, m) = ((seg.array() - mean) * is).matrix();
        }
        for (Index ci = 0; ci < c; ++ci) {
            const Index off = bi * c * l + ci * l;
            out.segment(off, l) =
                xhat.segment(off, l) * tp.val(gain)[ci] + VecX<S>::Constant(l, tp.val(bias)[ci]);
        }
    }
    auto id = tp.make(sx, std::move(out));
    tp.set_back(id, [x, gain, bias, id, b, c, l, groups, cg, m, xhat = std::move(xhat),
                     inv_std = std::move(inv_std)](Tape<S>& t) {
        const VecX<S>& go = t.grad(id);
        VecX<S>& gx = t.gacc(x);
        VecX<S>& gg = t.gacc(gain);
        VecX<S>& gb = t.gacc(bias);
        VecX<S> dxh(m);
        for (Index bi = 0; bi < b; ++bi) {
            for (Index ci = 0; ci < c; ++ci) {
                const Index off = bi * c * l + ci * l;
                gg[ci] += go.segment(off, l).dot(xhat.segment(off, l));
                gb[ci] += go.segment(off, l).sum();
            }
            for (Index g = 0; g < groups; ++g) {
                const Index off = bi * c * l + g * cg * l;
                for (Index j = 0; j < cg; ++j)
                    dxh.segment(j * l, l) =
                        go.segment(off + j * l, l) * t.val(gain)[g * cg + j];
                auto xh = xhat.segment(off, m);
                const S m1 = dxh.mean();
                const S m2 = dxh.dot(xh) / S(m);
                gx.segment(off, m) +=
                    ((dxh.array() - m1 - xh.array() * m2) * inv_std[bi * groups + g]).matrix();
            }
        }
    });
    return id;
}

// ---------------------------------------------------------------------------
// softmax and attention

// rowwise softmax with max subtraction; summations run sequentially over the
// last axis so results are bit-reproducible
template <class S>
typename Tape<S>::Id softmax_rows(Tape<S>& tp, typename Tape<S>::Id x) {
    const Shape& sx = tp.shape(x);
    require(sx.size() == 2, "softmax_rows: expected rank-2 input");
    const Index r = sx[0], c = sx[1];
    VecX<S> out(r * c);
    auto xm = detail::cmat(tp.val(x), r, c);
    auto om = detail::mmat(out, r, c);
    for (Index i = 0; i < r; ++i) {
        S mx = xm(i, 0);
        for (Index j = 1; j < c; ++j) mx = std::max(mx, xm(i, j));
        S sum = S(0);
        for (Index j = 0; j < c; ++j) {
            om(i, j) = std::exp(xm(i, j) - mx);
            sum += om(i, j);
        }
        om.row(i) /= sum;
    }
    auto id = tp.make(sx, std::move(out));
    tp.set_back(id, [x, id, r, c](Tape<S>& t) {
        auto go = detail::cmat(t.grad(id), r, c);
        auto y = detail::cmat(t.val(id), r, c);
        auto gx = detail::mmat(t.gacc(x), r, c);
        for (Index i = 0; i < r; ++i) {
            const S dot = go.row(i).dot(y.row(i));
            gx.row(i) += y.row(i).cwiseProduct((go.row(i).array() - dot).matrix());
        }
    });
    return id;
}

struct AttentionParams {
    int wq, bq, wk, bk, wv, bv, wo, bo;  // node ids
};

// fused causal multi-head self-attention over [B,T,W] (or [T,W] as B=1).
// Output at position t depends only on tokens at positions <= t.
template <class S>
typename Tape<S>::Id causal_self_attention(Tape<S>& tp, typename Tape<S>::Id x,
                                           const AttentionParams& p, Index heads) {
    Shape sx = tp.shape(x);
    require(sx.size() == 2 || sx.size() == 3, "attention: expected [T,W] or [B,T,W]");
    const Index b = sx.size() == 3 ? sx[0] : 1;
    const Index tlen = sx.size() == 3 ? sx[1] : sx[0];
    const Index w = sx.size() == 3 ? sx[2] : sx[1];
    require(heads >= 1 && w % heads == 0,
            "attention: width " + std::to_string(w) + " not divisible by " +
                std::to_string(heads) + " heads");
    for (int wid : {p.wq, p.wk, p.wv, p.wo})
        require(tp.shape(wid) == Shape{w, w}, "attention: projection must be [W,W]");
    for (int bid : {p.bq, p.bk, p.bv, p.bo})
        require(tp.shape(bid) == Shape{w}, "attention: bias must be [W]");
    const Index d = w / heads;
    const S inv_sqrt_d = S(1) / std::sqrt(S(d));

    // cached activations for backward: Q,K,V [b][T,W], probs [b][h][T,T]
    auto qs = std::make_shared<std::vector<MatX<S>>>();
    auto ks = std::make_shared<std::vector<MatX<S>>>();
    auto vs = std::make_shared<std::vector<MatX<S>>>();
    auto os = std::make_shared<std::vector<MatX<S>>>();
    auto ps = std::make_shared<std::vector<std::vector<MatX<S>>>>();

    VecX<S> out(b * tlen * w);
    for (Index bi = 0; bi < b; ++bi) {
        auto xb = Eigen::Map<const MatX<S>>(tp.val(x).data() + bi * tlen * w, tlen, w);
        MatX<S> q = (xb * detail::cmat(tp.val(p.wq), w, w)).rowwise() + tp.val(p.bq).transpose();
        MatX<S> k = (xb * detail::cmat(tp.val(p.wk), w, w)).rowwise() + tp.val(p.bk).transpose();
        MatX<S> v = (xb * detail::cmat(tp.val(p.wv), w, w)).rowwise() + tp.val(p.bv).transpose();
        MatX<S> o(tlen, w);
        std::vector<MatX<S>> probs;
        probs.reserve(static_cast<size_t>(heads));
        for (Index h = 0; h < heads; ++h) {
            auto qh = q.middleCols(h * d, d);
            auto kh = k.middleCols(h * d, d);
            auto vh = v.middleCols(h * d, d);
            MatX<S> prob = MatX<S>::Zero(tlen, tlen);
            for (Index i = 0; i < tlen; ++i) {
                S mx = std::numeric_limits<S>::lowest();
                for (Index j = 0; j <= i; ++j) {
                    prob(i, j) = qh.row(i).dot(kh.row(j)) * inv_sqrt_d;
                    mx = std::max(mx, prob(i, j));
                }
                S sum = S(0);
                for (Index j = 0; j <= i; ++j) {
                    prob(i, j) = std::exp(prob(i, j) - mx);
                    sum += prob(i, j);
                }
                for (Index j = 0; j <= i; ++j) prob(i, j) /= sum;
            }
            o.middleCols(h * d, d).noalias() = prob * vh;
            probs.push_back(std::move(prob));
        }
        Eigen::Map<MatX<S>>(out.data() + bi * tlen * w, tlen, w).noalias() =
            o * detail::cmat(tp.val(p.wo), w, w);
        Eigen::Map<MatX<S>>(out.data() + bi * tlen * w, tlen, w).rowwise() +=
            tp.val(p.bo).transpose();
        qs->push_back(std::move(q));
        ks->push_back(std::move(k));
        vs->push_back(std::move(v));
        os->push_back(std::move(o));
        ps->push_back(std::move(probs));
    }

    auto id = tp.make(sx, std::move(out));
    tp.set_back(id, [x, p, id, b, tlen, w, heads, d, inv_sqrt_d, qs, ks, vs, os,
                     ps](Tape<S>& t) {
        auto gwq = detail::mmat(t.gacc(p.wq), w, w);
        auto gwk = detail::mmat(t.gacc(p.wk), w, w);
        auto gwv = detail::mmat(t.gacc(p.wv), w, w);
        auto gwo = detail::mmat(t.gacc(p.wo), w, w);
        for (Index bi = 0; bi < b; ++bi) {
            auto gy = Eigen::Map<const MatX<S>>(t.grad(id).data() + bi * tlen * w, tlen, w);
            auto xb = Eigen::Map<const MatX<S>>(t.val(x).data() + bi * tlen * w, tlen, w);
            const MatX<S>& q = (*qs)[static_cast<size_t>(bi)];
            const MatX<S>& k = (*ks)[static_cast<size_t>(bi)];
            const MatX<S>& v = (*vs)[static_cast<size_t>(bi)];
            const MatX<S>& o = (*os)[static_cast<size_t>(bi)];
            gwo.noalias() += o.transpose() * gy;
            t.gacc(p.bo) += gy.colwise().sum().transpose();
            MatX<S> go = gy * detail::cmat(t.val(p.wo), w, w).transpose();
            MatX<S> gq(tlen, w), gk(tlen, w), gv(tlen, w);
            for (Index h = 0; h < heads; ++h) {
                const MatX<S>& prob = (*ps)[static_cast<size_t>(bi)][static_cast<size_t>(h)];
                auto goh = go.middleCols(h * d, d);
                auto qh = q.middleCols(h * d, d);
                auto kh = k.middleCols(h * d, d);
                auto vh = v.middleCols(h * d, d);
                MatX<S> gp = goh * vh.transpose();     // [T,T]
                gv.middleCols(h * d, d).noalias() = prob.transpose() * goh;
                MatX<S> gs = MatX<S>::Zero(tlen, tlen);
                for (Index i = 0; i < tlen; ++i) {
                    S dot = S(0);
                    for (Index j = 0; j <= i; ++j) dot += gp(i, j) * prob(i, j);
                    for (Index j = 0; j <= i; ++j) gs(i, j) = prob(i, j) * (gp(i, j) - dot);
                }
                gq.middleCols(h * d, d).noalias() = gs * kh * inv_sqrt_d;
                gk.middleCols(h * d, d).noalias() = gs.transpose() * qh * inv_sqrt_d;
            }
            gwq.noalias() += xb.transpose() * gq;
            gwk.noalias() += xb.transpose() * gk;
            gwv.noalias() += xb.transpose() * gv;
            t.gacc(p.bq) += gq.colwise().sum().transpose();
            t.gacc(p.bk) += gk.colwise().sum().transpose();
            t.gacc(p.bv) += gv.colwise().sum().transpose();
            auto gx = Eigen::Map<MatX<S>>(t.gacc(x).data() + bi * tlen * w, tlen, w);
            gx.noalias() += gq * detail::cmat(t.val(p.wq), w, w).transpose();
            gx.noalias() += gk * detail::cmat(t.val(p.wk), w, w).transpose();
            gx.noalias() += gv * detail::cmat(t.val(p.wv), w, w).transpose();
        }
    });
    return id;
}

// ---------------------------------------------------------------------------
// 1-d convolution stack ops over [B,C,L]

namespace detail {
// gathers the padded receptive fields of x[ci,:] into col [Cin*k, Lout]
template <class S>
void im2col(const S* x, Index cin, Index l, Index kernel, Index stride, Index pad, Index lout,
            MatX<S>& col) {
    for (Index ci = 0; ci < cin; ++ci) {
        for (Index kk = 0; kk < kernel; ++kk) {
            const Index row = ci * kernel + kk;
            for (Index lo = 0; lo < lout; ++lo) {
                const Index li = lo * stride + kk - pad;
                col(row, lo) = (li >= 0 && li < l) ? x[ci * l + li] : S(0);
            }
        }
    }
}
}  // namespace detail

// w: [Cout, Cin, k] (k odd), stride in {1,2,...}; zero padding (k-1)/2 so that
// stride 1 preserves length and stride s divides it
template <class S>
typename Tape<S>::Id conv1d(Tape<S>& tp, typename Tape<S>::Id x, typename Tape<S>::Id w,
                            typename Tape<S>::Id b, Index stride = 1) {
    const Shape& sx = tp.shape(x);
    const Shape& sw = tp.shape(w);
    require(sx.size() == 3, "conv1d: expected input [batch,channels,length], got " + shape_str(sx));
    require(sw.size() == 3, "conv1d: expected weight [out,in,kernel], got " + shape_str(sw));
    const Index batch = sx[0], cin = sx[1], l = sx[2];
    const Index cout = sw[0], kernel = sw[2];
    require(sw[1] == cin, "conv1d: weight expects " + std::to_string(sw[1]) +
                              " input channels, input has " + std::to_string(cin));
    require(kernel % 2 == 1, "conv1d: kernel size must be odd, got " + std::to_string(kernel));
    require(stride >= 1, "conv1d: stride must be >= 1");
    require(tp.shape(b) == Shape{cout}, "conv1d: bias must be [Cout]");
    const Index pad = (kernel - 1) / 2;
    const Index lout = (l + 2 * pad - kernel) / stride + 1;

    auto wm = detail::cmat(tp.val(w), cout, cin * kernel);
    VecX<S> out(batch * cout * lout);
    MatX<S> col(cin * kernel, lout);
    for (Index bi = 0; bi < batch; ++bi) {
        detail::im2col(tp.val(x).data() + bi * cin * l, cin, l, kernel, stride, pad, lout, col);
        auto ob = Eigen::Map<MatX<S>>(out.data() + bi * cout * lout, cout, lout);
        ob.noalias() = wm * col;
        ob.colwise() += tp.val(b);
    }
    auto id = tp.make({batch, cout, lout}, std::move(out));
    tp.set_back(id, [x, w, b, id, batch, cin, l, cout, kernel, stride, pad, lout](Tape<S>& t) {
        auto wm = detail::cmat(t.val(w), cout, cin * kernel);
        auto gw = detail::mmat(t.gacc(w), cout, cin * kernel);
        VecX<S>& gb = t.gacc(b);
        VecX<S>& gx = t.gacc(x);
        MatX<S> col(cin * kernel, lout);
        MatX<S> gcol(cin * kernel, lout);
        for (Index bi = 0; bi < batch; ++bi) {
            detail::im2col(t.val(x).data() + bi * cin * l, cin, l, kernel, stride, pad, lout, col);
            auto gob = Eigen::Map<const MatX<S>>(t.grad(id).data() + bi * cout * lout, cout, lout);
            gw.noalias() += gob * col.transpose();
            gb += gob.rowwise().sum();
            gcol.noalias() = wm.transpose() * gob;
            S* gxb = gx.data() + bi * cin * l;
            for (Index ci = 0; ci < cin; ++ci)
                for (Index kk = 0; kk < kernel; ++kk)
                    for (Index lo = 0; lo < lout; ++lo) {
                        const Index li = lo * stride + kk - pad;
                        if (li >= 0 && li < l) gxb[ci * l + li] += gcol(ci * kernel + kk, lo);
                    }
        }
    });
    return id;
}

// nearest-neighbour x2 upsample along the last axis of [B,C,L]
template <class S>
typename Tape<S>::Id upsample2(Tape<S>& tp, typename Tape<S>::Id x) {
    const Shape& sx = tp.shape(x);
    require(sx.size() == 3, "upsample2: expected rank-3 input");
    const Index b = sx[0], c = sx[1], l = sx[2];
    VecX<S> out(b * c * 2 * l);
    for (Index i = 0; i < b * c; ++i)
        for (Index j = 0; j < l; ++j) {
            out[i * 2 * l + 2 * j] = tp.val(x)[i * l + j];
            out[i * 2 * l + 2 * j + 1] = tp.val(x)[i * l + j];
        }
    auto id = tp.make({b, c, 2 * l}, std::move(out));
    tp.set_back(id, [x, id, b, c, l](Tape<S>& t) {
        VecX<S>& gx = t.gacc(x);
        const VecX<S>& go = t.grad(id);
        for (Index i = 0; i < b * c; ++i)
            for (Index j = 0; j < l; ++j)
                gx[i * l + j] += go[i * 2 * l + 2 * j] + go[i * 2 * l + 2 * j + 1];
    });
    return id;
}

template <class S>
typename Tape<S>::Id concat_channels(Tape<S>& tp, typename Tape<S>::Id a,
                                     typename Tape<S>::Id b) {
    const Shape& sa = tp.shape(a);
    const Shape& sb = tp.shape(b);
    require(sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0] && sa[2] == sb[2],
            "concat_channels: incompatible shapes " + shape_str(sa) + ", " + shape_str(sb));
    const Index bt = sa[0], ca = sa[1], cb = sb[1], l = sa[2];
    VecX<S> out(bt * (ca + cb) * l);
    for (Index bi = 0; bi < bt; ++bi) {
        out.segment(bi * (ca + cb) * l, ca * l) = tp.val(a).segment(bi * ca * l, ca * l);
        out.segment(bi * (ca + cb) * l + ca * l, cb * l) = tp.val(b).segment(bi * cb * l, cb * l);
    }
    auto id = tp.make({bt, ca + cb, l}, std::move(out));
    tp.set_back(id, [a, b, id, bt, ca, cb, l](Tape<S>& t) {
        for (Index bi = 0; bi < bt; ++bi) {
            t.gacc(a).segment(bi * ca * l, ca * l) +=
                t.grad(id).segment(bi * (ca + cb) * l, ca * l);
            t.gacc(b).segment(bi * cb * l, cb * l) +=
                t.grad(id).segment(bi * (ca + cb) * l + ca * l, cb * l);
        }
    });
    return id;
}

// zero-pad the last axis of [B,C,L] up to l2 positions
template <class S>
typename Tape<S>::Id pad_length(Tape<S>& tp, typename Tape<S>::Id x, Index l2) {
    const Shape& sx = tp.shape(x);
    require(sx.size() == 3 && l2 >= sx[2], "pad_length: bad target length");
    const Index b = sx[0], c = sx[1], l = sx[2];
    if (l2 == l) return x;
    VecX<S> out = VecX<S>::Zero(b * c * l2);
    for (Index i = 0; i < b * c; ++i) out.segment(i * l2, l) = tp.val(x).segment(i * l, l);
    auto id = tp.make({b, c, l2}, std::move(out));
    tp.set_back(id, [x, id, b, c, l, l2](Tape<S>& t) {
        for (Index i = 0; i < b * c; ++i)
            t.gacc(x).segment(i * l, l) += t.grad(id).segment(i * l2, l);
    });
    return id;
}

// keep the first l2 positions of [B,C,L]
template <class S>
typename Tape<S>::Id crop_length(Tape<S>& tp, typename Tape<S>::Id x, Index l2) {
    const Shape& sx = tp.shape(x);
    require(sx.size() == 3 && l2 <= sx[2] && l2 >= 1, "crop_length: bad target length");
    const Index b = sx[0], c = sx[1], l = sx[2];
    if (l2 == l) return x;
    VecX<S> out(b * c * l2);
    for (Index i = 0; i < b * c; ++i) out.segment(i * l2, l2) = tp.val(x).segment(i * l, l2);
    auto id = tp.make({b, c, l2}, std::move(out));
    tp.set_back(id, [x, id, b, c, l, l2](Tape<S>& t) {
        for (Index i = 0; i < b * c; ++i)
            t.gacc(x).segment(i * l, l2) += t.grad(id).segment(i * l2, l2);
    });
    return id;
}

// x: [B,C,L] plus a per-sample per-channel offset e: [B,C]
template <class S>
typename Tape<S>::Id add_channel_bias(Tape<S>& tp, typename Tape<S>::Id x,
                                      typename Tape<S>::Id e) {
    const Shape& sx = tp.shape(x);
    const Shape& se = tp.shape(e);
    require(sx.size() == 3 && se.size() == 2 && se[0] == sx[0] && se[1] == sx[1],
            "add_channel_bias: shapes " + shape_str(sx) + " + " + shape_str(se));
    const Index b = sx[0], c = sx[1], l = sx[2];
    VecX<S> out(b * c * l);
    for (Index i = 0; i < b * c; ++i)
        out.segment(i * l, l) = (tp.val(x).segment(i * l, l).array() + tp.val(e)[i]).matrix();
    auto id = tp.make(sx, std::move(out));
    tp.set_back(id, [x, e, id, b, c, l](Tape<S>& t) {
        t.gacc(x) += t.grad(id);
        for (Index i = 0; i < b * c; ++i) t.gacc(e)[i] += t.grad(id).segment(i * l, l).sum();
    });
    return id;
}

// ---------------------------------------------------------------------------
// dropout and reductions

template <class S>
typename Tape<S>::Id dropout(Tape<S>& tp, typename Tape<S>::Id x, double p, Rng& rng,
                             bool enabled) {
    if (!enabled || p <= 0.0) return x;
    require(p < 1.0, "dropout: probability must be < 1");
    const S keep_scale = S(1.0 / (1.0 - p));
    VecX<S> mask(tp.val(x).size());
    for (Index i = 0; i < mask.size(); ++i) mask[i] = rng.uniform() < p ? S(0) : keep_scale;
    auto id = tp.make(tp.shape(x), tp.val(x).cwiseProduct(mask));
    tp.set_back(id, [x, id, mask = std::move(mask)](Tape<S>& t) {
        t.gacc(x) += t.grad(id).cwiseProduct(mask);
    });
    return id;
}

template <class S>
typename Tape<S>::Id sum(Tape<S>& tp, typename Tape<S>::Id x) {
    VecX<S> out(1);
    out[0] = tp.val(x).sum();
    auto id = tp.make({1}, std::move(out));
    tp.set_back(id, [x, id](Tape<S>& t) { t.gacc(x).array() += t.grad(id)[0]; });
    return id;
}

template <class S>
typename Tape<S>::Id mean(Tape<S>& tp, typename Tape<S>::Id x) {
    return scale(tp, sum(tp, x), S(1) / S(tp.val(x).size()));
}

// sum of squared differences against a constant target
template <class S>
typename Tape<S>::Id sum_sq_diff(Tape<S>& tp, typename Tape<S>::Id pred,
                                 std::type_identity_t<VecX<S>> target) {
    require(tp.val(pred).size() == target.size(), "sum_sq_diff: size mismatch");
    VecX<S> out(1);
    out[0] = (tp.val(pred) - target).squaredNorm();
    auto id = tp.make({1}, std::move(out));
    tp.set_back(id, [pred, id, target = std::move(target)](Tape<S>& t) {
        t.gacc(pred) += t.grad(id)[0] * S(2) * (t.val(pred) - target);
    });
    return id;
}

// mean squared error against a constant target
template <class S>
typename Tape<S>::Id mse(Tape<S>& tp, typename Tape<S>::Id pred,
                         std::type_identity_t<VecX<S>> target) {
    const Index n = tp.val(pred).size();
    return scale(tp, sum_sq_diff(tp, pred, std::move(target)), S(1) / S(n));
}

template <class S>
S wrap_angle(S a) {
    return std::atan2(std::sin(a), std::cos(a));
}

// mean over elements of the wrapped angular distance squared,
// min(|d|, 2*pi-|d|)^2 with d = pred - target
template <class S>
typename Tape<S>::Id angle_mse(Tape<S>& tp, typename Tape<S>::Id pred,
                               std::type_identity_t<VecX<S>> target) {
    const Index n = tp.val(pred).size();
    require(n == target.size(), "angle_mse: size mismatch");
    VecX<S> wrapped(n);
    for (Index i = 0; i < n; ++i) wrapped[i] = wrap_angle<S>(tp.val(pred)[i] - target[i]);
    VecX<S> out(1);
    out[0] = wrapped.squaredNorm() / S(n);
    auto id = tp.make({1}, std::move(out));
    tp.set_back(id, [pred, id, n, wrapped = std::move(wrapped)](Tape<S>& t) {
        t.gacc(pred) += (t.grad(id)[0] * S(2) / S(n)) * wrapped;
    });
    return id;
}

}  // namespace d2t::nn
