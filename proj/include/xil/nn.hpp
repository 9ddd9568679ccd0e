#pragma once

// Shared network primitives: linear layers, MLPs, embeddings, sinusoidal
// time embeddings, FiLM, and the AdaLN modulation every X-Block uses.

#include "xil/tensor.hpp"

#include <optional>
#include <string>

namespace xil {

constexpr double kLayerNormEps = 1e-5;

enum class InitScheme { uniform_fan_in, zeros };
enum class Activation { silu, gelu };

template <class Real>
Tensor<Real> apply_activation(const Tensor<Real>& x, Activation act) {
    return act == Activation::silu ? silu(x) : gelu(x);
}

// ------------------------------------------------------------------ linear

template <class Real>
struct Linear {
    Tensor<Real> weight; // [out, in]
    std::optional<Tensor<Real>> bias;

    static Linear make(int64_t in, int64_t out, Rng& rng, bool with_bias = true,
                       InitScheme scheme = InitScheme::uniform_fan_in) {
        Linear l;
        if (scheme == InitScheme::zeros) {
            l.weight = Tensor<Real>::zeros({out, in});
        } else {
            const Real bound = Real(1) / std::sqrt(static_cast<Real>(in));
            l.weight = Tensor<Real>::uniform({out, in}, rng, -bound, bound);
        }
        l.weight.set_requires_grad(true);
        if (with_bias) {
            l.bias = Tensor<Real>::zeros({out});
            l.bias->set_requires_grad(true);
        }
        return l;
    }

    static Linear make_zeros(int64_t in, int64_t out, bool with_bias = true) {
        Rng dummy(0);
        return make(in, out, dummy, with_bias, InitScheme::zeros);
    }

    int64_t in_features() const { return weight.dim(1); }
    int64_t out_features() const { return weight.dim(0); }

    Tensor<Real> operator()(const Tensor<Real>& x) const {
        if (x.dim(-1) != in_features()) {
            throw ShapeError("linear expects trailing dim " + std::to_string(in_features()) + ", got " +
                             shape_str(x.shape()));
        }
        auto y = matmul(x, transpose_last2(weight));
        if (bias) y = add(y, *bias);
        return y;
    }

    template <class F>
    void for_each_param(const std::string& prefix, F&& fn) {
        fn(prefix + ".weight", weight);
        if (bias) fn(prefix + ".bias", *bias);
    }
};

// ---------------------------------------------------------------------- mlp

template <class Real>
struct Mlp {
    std::vector<Linear<Real>> layers;
    Activation act = Activation::silu;

    static Mlp make(const std::vector<int64_t>& widths, Rng& rng, Activation act = Activation::silu,
                    bool zero_last = false) {
        Mlp m;
        m.act = act;
        for (size_t i = 0; i + 1 < widths.size(); ++i) {
            const bool last = i + 2 == widths.size();
            m.layers.push_back(Linear<Real>::make(widths[i], widths[i + 1], rng, true,
                                                  (last && zero_last) ? InitScheme::zeros
                                                                      : InitScheme::uniform_fan_in));
        }
        return m;
    }

    Tensor<Real> operator()(const Tensor<Real>& x) const {
        auto h = x;
        for (size_t i = 0; i < layers.size(); ++i) {
            h = layers[i](h);
            if (i + 1 < layers.size()) h = apply_activation(h, act);
        }
        return h;
    }

    template <class F>
    void for_each_param(const std::string& prefix, F&& fn) {
        for (size_t i = 0; i < layers.size(); ++i) {
            layers[i].for_each_param(prefix + ".l" + std::to_string(i), fn);
        }
    }
};

// ---------------------------------------------------------------- embedding

template <class Real>
struct Embedding {
    Tensor<Real> table; // [vocab, dim]

    static Embedding make(int64_t vocab, int64_t dim, Rng& rng, Real stddev = Real(0.02)) {
        Embedding e;
        e.table = Tensor<Real>::randn({vocab, dim}, rng, stddev);
        e.table.set_requires_grad(true);
        return e;
    }

    Tensor<Real> operator()(const std::vector<int64_t>& ids) const { return embedding_rows(table, ids); }

    template <class F>
    void for_each_param(const std::string& prefix, F&& fn) {
        fn(prefix + ".table", table);
    }
};

// ------------------------------------------------------- time embeddings

// First half sin, second half cos, frequencies geometric from 1 down to
// 1/10^4. Works for continuous t in [0,1] as well as integer steps.
template <class Real>
Tensor<Real> sinusoidal_time_embedding(Real t, int64_t dim) {
    if (dim <= 0 || dim % 2 != 0) {
        throw UsageError("time embedding dim must be positive and even, got " + std::to_string(dim));
    }
    const int64_t half = dim / 2;
    auto out = Tensor<Real>::zeros({dim});
    auto* p = out.data();
    for (int64_t i = 0; i < half; ++i) {
        const double expo = half > 1 ? static_cast<double>(i) / static_cast<double>(half - 1) : 0.0;
        const double freq = std::pow(10000.0, -expo);
        const double phase = freq * static_cast<double>(t);
        p[i] = static_cast<Real>(std::sin(phase));
        p[half + i] = static_cast<Real>(std::cos(phase));
    }
    return out;
}

template <class Real>
Tensor<Real> sinusoidal_time_embedding_batch(const std::vector<Real>& ts, int64_t dim) {
    auto out = Tensor<Real>::zeros({static_cast<int64_t>(ts.size()), dim});
    for (size_t b = 0; b < ts.size(); ++b) {
        auto row = sinusoidal_time_embedding(ts[b], dim);
        std::copy(row.data(), row.data() + dim, out.data() + static_cast<int64_t>(b) * dim);
    }
    return out;
}

// --------------------------------------------------------------------- film

// (1 + gamma) * features + beta, with (gamma, beta) predicted from the
// condition. Zero-initialized map means identity at init.
template <class Real>
struct Film {
    Linear<Real> map; // cond_dim -> 2 * channels, zero-init

    static Film make(int64_t cond_dim, int64_t channels) {
        Film f;
        f.map = Linear<Real>::make_zeros(cond_dim, 2 * channels);
        return f;
    }

    // features [b, c] or [b, n, c]; cond [b, cond_dim]
    Tensor<Real> operator()(const Tensor<Real>& features, const Tensor<Real>& cond) const {
        const int64_t c = features.dim(-1);
        auto gb = map(cond); // [b, 2c]
        auto gamma = slice(gb, -1, 0, c);
        auto beta = slice(gb, -1, c, c);
        if (features.ndim() == 3) {
            const int64_t b = features.dim(0);
            gamma = reshape(gamma, {b, 1, c});
            beta = reshape(beta, {b, 1, c});
        } else if (features.ndim() != 2) {
            throw ShapeError("film expects rank-2 or rank-3 features, got " + shape_str(features.shape()));
        }
        return add(mul(features, affine(gamma, Real(1), Real(1))), beta);
    }

    template <class F>
    void for_each_param(const std::string& prefix, F&& fn) {
        map.for_each_param(prefix + ".map", fn);
    }
};

// -------------------------------------------------------------------- adaln

// Per-sample modulation factors for one X-Block: (gamma, beta, alpha) for
// the temporal sublayer and the feed-forward sublayer. One MLP produces all
// six; a zero final layer makes every factor exactly 0 at init.
template <class Real>
struct AdaLNFactors {
    Tensor<Real> gamma1, beta1, alpha1, gamma2, beta2, alpha2; // each [b, d]
};

template <class Real>
struct AdaLNFactorMlp {
    Linear<Real> hidden; // cond_dim -> cond_dim
    Linear<Real> out;    // cond_dim -> 6 * embed_dim, zero-init
    int64_t embed_dim = 0;

    static AdaLNFactorMlp make(int64_t cond_dim, int64_t embed_dim, Rng& rng) {
        AdaLNFactorMlp m;
        m.hidden = Linear<Real>::make(cond_dim, cond_dim, rng);
        m.out = Linear<Real>::make_zeros(cond_dim, 6 * embed_dim);
        m.embed_dim = embed_dim;
        return m;
    }

    AdaLNFactors<Real> operator()(const Tensor<Real>& cond) const {
        if (!cond.all_finite()) throw NumericError("non-finite condition vector");
        auto h = out(silu(hidden(cond))); // [b, 6d]
        const int64_t d = embed_dim;
        AdaLNFactors<Real> f;
        f.gamma1 = slice(h, -1, 0, d);
        f.beta1 = slice(h, -1, d, d);
        f.alpha1 = slice(h, -1, 2 * d, d);
        f.gamma2 = slice(h, -1, 3 * d, d);
        f.beta2 = slice(h, -1, 4 * d, d);
        f.alpha2 = slice(h, -1, 5 * d, d);
        return f;
    }

    template <class F>
    void for_each_param(const std::string& prefix, F&& fn) {
        hidden.for_each_param(prefix + ".hidden", fn);
        out.for_each_param(prefix + ".out", fn);
    }
};

// x + alpha * sublayer(LN(x) * (1 + gamma) + beta) for one factor triple.
// x is [b, L, d]; factors are [b, d] and broadcast over the sequence.
template <class Real, class Sublayer>
Tensor<Real> adaln_modulate(const Tensor<Real>& x, const Tensor<Real>& gamma, const Tensor<Real>& beta,
                            const Tensor<Real>& alpha, Sublayer&& sublayer) {
    if (!gamma.all_finite() || !beta.all_finite() || !alpha.all_finite()) {
        throw NumericError("non-finite AdaLN factors");
    }
    const int64_t b = x.dim(0);
    const int64_t d = x.dim(-1);
    auto g = reshape(gamma, {b, 1, d});
    auto bt = reshape(beta, {b, 1, d});
    auto al = reshape(alpha, {b, 1, d});
    auto normed = layer_norm(x, -1, static_cast<Real>(kLayerNormEps));
    auto modulated = add(mul(normed, affine(g, Real(1), Real(1))), bt);
    return add(x, mul(al, sublayer(modulated)));
}

} // namespace xil
