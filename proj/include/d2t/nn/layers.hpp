#pragma once

#include <string>

#include "d2t/nn/tape.hpp"
#include "d2t/nn/tensor.hpp"
#include "d2t/rng.hpp"

namespace d2t::nn {

// Parameter initializers. Dense and conv weights draw uniform +-1/sqrt(fan_in),
// norm gains start at one with zero bias, embedding tables draw N(0, 0.02).

template <class S>
Tensor<S> init_dense_weight(Index fan_in, Index fan_out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(double(fan_in));
    Tensor<S> w = Tensor<S>::zeros({fan_in, fan_out});
    for (Index i = 0; i < w.size(); ++i) w.v[i] = S(rng.uniform(-bound, bound));
    return w;
}

template <class S>
Tensor<S> init_conv_weight(Index cout, Index cin, Index kernel, Rng& rng) {
    const double bound = 1.0 / std::sqrt(double(cin * kernel));
    Tensor<S> w = Tensor<S>::zeros({cout, cin, kernel});
    for (Index i = 0; i < w.size(); ++i) w.v[i] = S(rng.uniform(-bound, bound));
    return w;
}

template <class S>
Tensor<S> init_bias(Index n) {
    return Tensor<S>::zeros({n});
}

template <class S>
Tensor<S> init_norm_gain(Index n) {
    return Tensor<S>::full({n}, S(1));
}

template <class S>
Tensor<S> init_embedding(Index vocab, Index width, Rng& rng) {
    Tensor<S> w = Tensor<S>::zeros({vocab, width});
    for (Index i = 0; i < w.size(); ++i) w.v[i] = S(rng.normal(0.0, 0.02));
    return w;
}

// Declarative layer description used by the model builders. `kind` selects the
// op, the remaining fields are interpreted per kind (see init_layer_params).
struct LayerSpec {
    std::string kind;        // dense | layer-norm | causal-self-attention |
                             // conv1d | embedding | activation
    Index in = 0;            // dense fan-in / conv in-channels / vocab size
    Index out = 0;           // dense fan-out / conv out-channels / embed width
    Index kernel = 3;        // conv1d kernel size
    Index stride = 1;        // conv1d stride
    Index heads = 1;         // attention head count
    Index groups = 1;        // group-norm groups (1 for layer-norm semantics)
    std::string act = "identity";
};

// Registers the parameters a layer needs under `prefix` and returns how many
// tensors were added. Shapes follow the op contracts in tape.hpp.
template <class S>
void init_layer_params(const LayerSpec& spec, const std::string& prefix, ParamStore<S>& ps,
                       Rng& rng) {
    if (spec.kind == "dense") {
        ps.add(prefix + ".w", init_dense_weight<S>(spec.in, spec.out, rng));
        ps.add(prefix + ".b", init_bias<S>(spec.out));
    } else if (spec.kind == "conv1d") {
        ps.add(prefix + ".w", init_conv_weight<S>(spec.out, spec.in, spec.kernel, rng));
        ps.add(prefix + ".b", init_bias<S>(spec.out));
    } else if (spec.kind == "layer-norm" || spec.kind == "group-norm") {
        ps.add(prefix + ".gain", init_norm_gain<S>(spec.out));
        ps.add(prefix + ".bias", init_bias<S>(spec.out));
    } else if (spec.kind == "causal-self-attention") {
        for (const char* n : {".wq", ".wk", ".wv", ".wo"})
            ps.add(prefix + n, init_dense_weight<S>(spec.out, spec.out, rng));
        for (const char* n : {".bq", ".bk", ".bv", ".bo"})
            ps.add(prefix + n, init_bias<S>(spec.out));
    } else if (spec.kind == "embedding") {
        ps.add(prefix + ".w", init_embedding<S>(spec.in, spec.out, rng));
    } else if (spec.kind == "activation") {
        // stateless
    } else {
        throw ShapeError("unknown layer kind: " + spec.kind);
    }
}

// Applies one layer to node `x`, pulling its parameters from `ps` by prefix.
template <class S>
typename Tape<S>::Id layer_forward(const LayerSpec& spec, const std::string& prefix,
                                   ParamStore<S>& ps, Tape<S>& tp, typename Tape<S>::Id x) {
    auto pick = [&](const std::string& suffix) -> Tensor<S>& {
        const std::string key = prefix + suffix;
        if (!ps.contains(key)) throw ShapeError("layer " + prefix + ": missing parameter " + key);
        return ps[key];
    };
    if (spec.kind == "dense") {
        return dense(tp, x, tp.param(pick(".w")), tp.param(pick(".b")));
    } else if (spec.kind == "conv1d") {
        return conv1d(tp, x, tp.param(pick(".w")), tp.param(pick(".b")), spec.stride);
    } else if (spec.kind == "layer-norm") {
        return layer_norm(tp, x, tp.param(pick(".gain")), tp.param(pick(".bias")));
    } else if (spec.kind == "group-norm") {
        return group_norm(tp, x, spec.groups, tp.param(pick(".gain")), tp.param(pick(".bias")));
    } else if (spec.kind == "causal-self-attention") {
        AttentionParams ap;
        ap.wq = tp.param(pick(".wq"));
        ap.bq = tp.param(pick(".bq"));
        ap.wk = tp.param(pick(".wk"));
        ap.bk = tp.param(pick(".bk"));
        ap.wv = tp.param(pick(".wv"));
        ap.bv = tp.param(pick(".bv"));
        ap.wo = tp.param(pick(".wo"));
        ap.bo = tp.param(pick(".bo"));
        return causal_self_attention(tp, x, ap, spec.heads);
    } else if (spec.kind == "activation") {
        return activation(tp, x, act_from_name(spec.act));
    }
    throw ShapeError("unknown layer kind: " + spec.kind);
}

}  // namespace d2t::nn
