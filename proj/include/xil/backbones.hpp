#pragma once

// The three interchangeable temporal cores (causal multi-head attention,
// selective state-space scan, extended-LSTM cell) and the X-Block wrapper
// that pairs a core with a feed-forward MLP under AdaLN modulation.

#include "xil/nn.hpp"

namespace xil {

enum class Backbone { attention, ssm, xlstm };

inline const char* backbone_name(Backbone b) {
    switch (b) {
        case Backbone::attention: return "transformer";
        case Backbone::ssm: return "mamba";
        case Backbone::xlstm: return "xlstm";
    }
    return "?";
}

inline Backbone parse_backbone(const std::string& name) {
    if (name == "transformer") return Backbone::attention;
    if (name == "mamba") return Backbone::ssm;
    if (name == "xlstm") return Backbone::xlstm;
    throw ConfigError("unknown backbone '" + name + "'; valid options: {transformer, mamba, xlstm}");
}

// ------------------------------------------------------------- attention

template <class Real>
struct Attention {
    Linear<Real> q, k, v, out;
    int64_t heads = 8;
    bool causal = true;

    static Attention make(int64_t dim, int64_t heads, bool causal, Rng& rng) {
        if (dim % heads != 0) {
            throw ConfigError("embed dim " + std::to_string(dim) + " not divisible by heads " +
                              std::to_string(heads));
        }
        Attention a;
        a.q = Linear<Real>::make(dim, dim, rng);
        a.k = Linear<Real>::make(dim, dim, rng);
        a.v = Linear<Real>::make(dim, dim, rng);
        a.out = Linear<Real>::make(dim, dim, rng);
        a.heads = heads;
        a.causal = causal;
        return a;
    }

    // [b, L, d] -> [b, heads, L, d/heads]
    Tensor<Real> split_heads(const Tensor<Real>& t) const {
        const int64_t b = t.dim(0), L = t.dim(1), d = t.dim(2);
        return permute(reshape(t, {b, L, heads, d / heads}), {0, 2, 1, 3});
    }

    Tensor<Real> operator()(const Tensor<Real>& x) const {
        const int64_t b = x.dim(0), L = x.dim(1), d = x.dim(2);
        const int64_t dh = d / heads;
        auto qh = split_heads(q(x));
        auto kh = split_heads(k(x));
        auto vh = split_heads(v(x));
        auto scores = scale(matmul(qh, transpose_last2(kh)),
                            Real(1) / static_cast<Real>(std::sqrt(static_cast<double>(dh))));
        if (causal) {
            auto mask = Tensor<Real>::zeros({L, L});
            const Real ninf = -std::numeric_limits<Real>::infinity();
            for (int64_t i = 0; i < L; ++i) {
                for (int64_t j = i + 1; j < L; ++j) mask.data()[i * L + j] = ninf;
            }
            scores = add(scores, mask);
        }
        auto weights = softmax(scores, -1);
        auto ctx = matmul(weights, vh); // [b, h, L, dh]
        auto merged = reshape(permute(ctx, {0, 2, 1, 3}), {b, L, d});
        return out(merged);
    }

    template <class F>
    void for_each_param(const std::string& prefix, F&& fn) {
        q.for_each_param(prefix + ".q", fn);
        k.for_each_param(prefix + ".k", fn);
        v.for_each_param(prefix + ".v", fn);
        out.for_each_param(prefix + ".out", fn);
    }
};

// -------------------------------------------------------- selective scan

// h_t = exp(delta_t (x) A) . h_{t-1} + (delta_t (x) B_t) . x_t
// y_t = C_t . h_t + D . x_t, h_0 = 0
// delta [b,L,di], B,C [b,L,n], x [b,L,di], A [di,n], D [di] -> y [b,L,di]
template <class Real>
Tensor<Real> selective_ssm_scan(const Tensor<Real>& delta, const Tensor<Real>& bmat,
                                const Tensor<Real>& cmat, const Tensor<Real>& x, const Tensor<Real>& a,
                                const Tensor<Real>& d) {
    const int64_t b = x.dim(0), L = x.dim(1), di = x.dim(2);
    const int64_t n = a.dim(1);
    for (Real v : delta.raw()) {
        if (!(v > Real(0))) throw UsageError("selective scan requires delta > 0 elementwise");
    }
    auto h = Tensor<Real>::zeros({b, di, n});
    std::vector<Tensor<Real>> ys;
    ys.reserve(static_cast<size_t>(L));
    for (int64_t t = 0; t < L; ++t) {
        auto dt = reshape(slice(delta, 1, t, 1), {b, di, 1});
        auto xt = reshape(slice(x, 1, t, 1), {b, di, 1});
        auto bt = reshape(slice(bmat, 1, t, 1), {b, 1, n});
        auto ct = reshape(slice(cmat, 1, t, 1), {b, 1, n});
        auto abar = exp(mul(dt, a));                  // [b, di, n]
        auto input = mul(mul(dt, xt), bt);            // [b, di, n]
        h = add(mul(abar, h), input);
        auto yt = sum_axis(mul(h, ct), -1);           // [b, di]
        yt = add(yt, mul(reshape(xt, {b, di}), d));   // D skip
        ys.push_back(reshape(yt, {b, 1, di}));
    }
    auto y = concat(ys, 1);
    if (!y.all_finite()) throw NumericError("non-finite state in selective scan");
    return y;
}

// ------------------------------------------------------------ mamba block

struct SsmConfig {
    int64_t dim = 512;
    int64_t expand = 2;
    int64_t state = 16;
    int64_t conv = 4;

    int64_t inner() const { return expand * dim; }
    int64_t dt_rank() const { return (dim + 15) / 16; }
};

template <class Real>
struct MambaLayer {
    SsmConfig cfg;
    Linear<Real> in_proj;  // d -> 2*di, no bias
    Tensor<Real> conv_w;   // [di, K]
    Tensor<Real> conv_b;   // [di]
    Linear<Real> x_proj;   // di -> dt_rank + 2n, no bias
    Linear<Real> dt_proj;  // dt_rank -> di
    Tensor<Real> a_log;    // [di, n]; A = -exp(a_log)
    Tensor<Real> d_skip;   // [di]
    Linear<Real> out_proj; // di -> d, no bias

    static MambaLayer make(const SsmConfig& cfg, Rng& rng) {
        MambaLayer m;
        m.cfg = cfg;
        const int64_t di = cfg.inner();
        m.in_proj = Linear<Real>::make(cfg.dim, 2 * di, rng, /*with_bias=*/false);
        const Real cb = Real(1) / std::sqrt(static_cast<Real>(cfg.conv));
        m.conv_w = Tensor<Real>::uniform({di, cfg.conv}, rng, -cb, cb);
        m.conv_w.set_requires_grad(true);
        m.conv_b = Tensor<Real>::zeros({di});
        m.conv_b.set_requires_grad(true);
        m.x_proj = Linear<Real>::make(di, cfg.dt_rank() + 2 * cfg.state, rng, false);
        m.dt_proj = Linear<Real>::make(cfg.dt_rank(), di, rng, true);
        // bias chosen so softplus(bias) lands log-uniformly in [1e-3, 1e-1]
        for (int64_t i = 0; i < di; ++i) {
            const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
            m.dt_proj.bias->data()[i] = static_cast<Real>(std::log(std::expm1(dt)));
        }
        // S4D-real style: A row = -(1..n)
        m.a_log = Tensor<Real>::zeros({di, cfg.state});
        for (int64_t i = 0; i < di; ++i) {
            for (int64_t j = 0; j < cfg.state; ++j) {
                m.a_log.data()[i * cfg.state + j] = static_cast<Real>(std::log(static_cast<double>(j + 1)));
            }
        }
        m.a_log.set_requires_grad(true);
        m.d_skip = Tensor<Real>::ones({di});
        m.d_skip.set_requires_grad(true);
        m.out_proj = Linear<Real>::make(di, cfg.dim, rng, false);
        return m;
    }

    Tensor<Real> operator()(const Tensor<Real>& x) const {
        const int64_t b = x.dim(0), L = x.dim(1);
        const int64_t di = cfg.inner();
        const int64_t dtr = cfg.dt_rank();
        const int64_t n = cfg.state;

        auto xz = in_proj(x);
        auto xs = slice(xz, -1, 0, di);
        auto z = slice(xz, -1, di, di);
        xs = silu(causal_depthwise_conv1d(xs, conv_w, conv_b));
        auto dbc = x_proj(xs);
        auto dt_low = slice(dbc, -1, 0, dtr);
        auto bmat = slice(dbc, -1, dtr, n);
        auto cmat = slice(dbc, -1, dtr + n, n);
        auto delta = softplus(dt_proj(dt_low)); // [b, L, di]
        auto a = neg(exp(a_log));
        auto y = selective_ssm_scan(delta, bmat, cmat, xs, a, d_skip);
        y = mul(y, silu(z));
        (void)b;
        (void)L;
        return out_proj(y);
    }

    template <class F>
    void for_each_param(const std::string& prefix, F&& fn) {
        in_proj.for_each_param(prefix + ".in_proj", fn);
        fn(prefix + ".conv_w", conv_w);
        fn(prefix + ".conv_b", conv_b);
        x_proj.for_each_param(prefix + ".x_proj", fn);
        dt_proj.for_each_param(prefix + ".dt_proj", fn);
        fn(prefix + ".a_log", a_log);
        fn(prefix + ".d_skip", d_skip);
        out_proj.for_each_param(prefix + ".out_proj", fn);
    }
};

// ------------------------------------------------------------ xlstm cell

template <class Real>
struct XlstmState {
    Tensor<Real> c, n, m; // each [b, d]

    static XlstmState initial(int64_t b, int64_t d) {
        XlstmState s;
        s.c = Tensor<Real>::zeros({b, d});
        s.n = Tensor<Real>::zeros({b, d});
        s.m = Tensor<Real>::full({b, d}, Real(-1e30)); // -inf surrogate
        return s;
    }
};

// Stabilized exponential gating:
//   m_t = max(f~ + m_{t-1}, i~)
//   i'  = exp(i~ - m_t), f' = exp(f~ + m_{t-1} - m_t)
//   c_t = f' c_{t-1} + i' tanh(z~); n_t = f' n_{t-1} + i'
//   h_t = sigmoid(o~) * c_t / n_t
template <class Real>
std::pair<XlstmState<Real>, Tensor<Real>> xlstm_cell_step(const XlstmState<Real>& st,
                                                          const Tensor<Real>& i_pre,
                                                          const Tensor<Real>& f_pre,
                                                          const Tensor<Real>& o_pre,
                                                          const Tensor<Real>& z_pre) {
    XlstmState<Real> out;
    out.m = maximum(add(f_pre, st.m), i_pre);
    auto ig = exp(sub(i_pre, out.m));
    auto fg = exp(sub(add(f_pre, st.m), out.m));
    out.c = add(mul(fg, st.c), mul(ig, tanh(z_pre)));
    out.n = add(mul(fg, st.n), ig);
    for (Real v : out.n.raw()) {
        if (!(v > Real(0))) throw NumericError("xlstm normalizer reached zero");
    }
    auto h = mul(sigmoid(o_pre), div(out.c, out.n));
    return {std::move(out), std::move(h)};
}

template <class Real>
struct XlstmLayer {
    Linear<Real> wi, wf, wo, wz; // gate projections over d

    static XlstmLayer make(int64_t dim, Rng& rng) {
        XlstmLayer l;
        l.wi = Linear<Real>::make(dim, dim, rng);
        l.wf = Linear<Real>::make(dim, dim, rng);
        l.wo = Linear<Real>::make(dim, dim, rng);
        l.wz = Linear<Real>::make(dim, dim, rng);
        return l;
    }

    Tensor<Real> operator()(const Tensor<Real>& x) const {
        const int64_t b = x.dim(0), L = x.dim(1), d = x.dim(2);
        // gate pre-activations are x-only, so they batch over the sequence
        auto ip = wi(x), fp = wf(x), op = wo(x), zp = wz(x);
        auto st = XlstmState<Real>::initial(b, d);
        std::vector<Tensor<Real>> hs;
        hs.reserve(static_cast<size_t>(L));
        for (int64_t t = 0; t < L; ++t) {
            auto it = reshape(slice(ip, 1, t, 1), {b, d});
            auto ft = reshape(slice(fp, 1, t, 1), {b, d});
            auto ot = reshape(slice(op, 1, t, 1), {b, d});
            auto zt = reshape(slice(zp, 1, t, 1), {b, d});
            auto [next, h] = xlstm_cell_step(st, it, ft, ot, zt);
            st = std::move(next);
            hs.push_back(reshape(h, {b, 1, d}));
        }
        return concat(hs, 1);
    }

    template <class F>
    void for_each_param(const std::string& prefix, F&& fn) {
        wi.for_each_param(prefix + ".wi", fn);
        wf.for_each_param(prefix + ".wf", fn);
        wo.for_each_param(prefix + ".wo", fn);
        wz.for_each_param(prefix + ".wz", fn);
    }
};

// --------------------------------------------------------------- x-block

struct XBlockConfig {
    Backbone kind = Backbone::attention;
    int64_t dim = 512;
    int64_t heads = 8;
    int64_t cond_dim = 512;
    int64_t ff_hidden = 0; // 0 = backbone default (see default_ff_hidden)
    bool causal = true;
    int64_t ssm_state = 16;
    int64_t ssm_expand = 2;
    int64_t ssm_conv = 4;

    // Feed-forward width defaults differ per backbone so the 6-layer
    // attention stack and the 8-block ssm/xlstm stacks land within the
    // same parameter budget.
    int64_t resolved_ff_hidden() const {
        if (ff_hidden > 0) return ff_hidden;
        switch (kind) {
            case Backbone::attention: return 4 * dim;
            case Backbone::ssm: return dim;
            case Backbone::xlstm: return 2 * dim;
        }
        return 4 * dim;
    }
};

template <class Real>
struct XBlock {
    XBlockConfig cfg;
    std::optional<Attention<Real>> attn;
    std::optional<MambaLayer<Real>> mamba;
    std::optional<XlstmLayer<Real>> xlstm;
    Mlp<Real> ff;
    AdaLNFactorMlp<Real> factors;

    static XBlock make(const XBlockConfig& cfg, Rng& rng) {
        XBlock b;
        b.cfg = cfg;
        switch (cfg.kind) {
            case Backbone::attention:
                b.attn = Attention<Real>::make(cfg.dim, cfg.heads, cfg.causal, rng);
                break;
            case Backbone::ssm: {
                SsmConfig sc;
                sc.dim = cfg.dim;
                sc.state = cfg.ssm_state;
                sc.expand = cfg.ssm_expand;
                sc.conv = cfg.ssm_conv;
                b.mamba = MambaLayer<Real>::make(sc, rng);
                break;
            }
            case Backbone::xlstm:
                b.xlstm = XlstmLayer<Real>::make(cfg.dim, rng);
                break;
        }
        b.ff = Mlp<Real>::make({cfg.dim, cfg.resolved_ff_hidden(), cfg.dim}, rng, Activation::gelu);
        b.factors = AdaLNFactorMlp<Real>::make(cfg.cond_dim, cfg.dim, rng);
        return b;
    }

    Tensor<Real> core(const Tensor<Real>& x) const {
        switch (cfg.kind) {
            case Backbone::attention: return (*attn)(x);
            case Backbone::ssm: return (*mamba)(x);
            case Backbone::xlstm: return (*xlstm)(x);
        }
        throw UsageError("bad backbone");
    }

    // two AdaLN-modulated residual sublayers; zero factor MLP = identity
    Tensor<Real> operator()(const Tensor<Real>& x, const Tensor<Real>& cond) const {
        auto f = factors(cond);
        auto h = adaln_modulate(x, f.gamma1, f.beta1, f.alpha1, [this](const Tensor<Real>& v) { return core(v); });
        return adaln_modulate(h, f.gamma2, f.beta2, f.alpha2, [this](const Tensor<Real>& v) { return ff(v); });
    }

    template <class F>
    void for_each_param(const std::string& prefix, F&& fn) {
        if (attn) attn->for_each_param(prefix + ".attn", fn);
        if (mamba) mamba->for_each_param(prefix + ".ssm", fn);
        if (xlstm) xlstm->for_each_param(prefix + ".xlstm", fn);
        ff.for_each_param(prefix + ".ff", fn);
        factors.for_each_param(prefix + ".adaln", fn);
    }
};

} // namespace xil
