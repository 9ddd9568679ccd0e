#pragma once

// The four policy representations behind one interface: behavior cloning,
// DDPM (discrete ancestral diffusion), BESO-style continuous-noise diffusion
// with EDM preconditioning, and rectified flow. A head sees the network only
// through DenoiseFn(noisy_actions, per-sample time values).

#include "xil/tensor.hpp"

#include <functional>

namespace xil {

template <class Real>
using DenoiseFn = std::function<Tensor<Real>(const Tensor<Real>&, const std::vector<Real>&)>;

enum class HeadKind { bc, ddpm, beso, rf };

inline const char* head_name(HeadKind k) {
    switch (k) {
        case HeadKind::bc: return "bc";
        case HeadKind::ddpm: return "ddpm";
        case HeadKind::beso: return "beso";
        case HeadKind::rf: return "rf";
    }
    return "?";
}

inline HeadKind parse_head(const std::string& name) {
    if (name == "bc") return HeadKind::bc;
    if (name == "ddpm") return HeadKind::ddpm;
    if (name == "beso") return HeadKind::beso;
    if (name == "rf") return HeadKind::rf;
    throw ConfigError("unknown policy head '" + name + "'; valid options: {bc, ddpm, beso, rf}");
}

// --------------------------------------------------------------- schedules

struct DdpmSchedule {
    int64_t steps = 1000;
    std::vector<double> beta, alpha_bar;

    static DdpmSchedule make(int64_t T = 1000, double beta_start = 1e-4, double beta_end = 0.02) {
        DdpmSchedule s;
        s.steps = T;
        s.beta.resize(static_cast<size_t>(T));
        s.alpha_bar.resize(static_cast<size_t>(T));
        double prod = 1.0;
        for (int64_t t = 0; t < T; ++t) {
            const double b = T > 1 ? beta_start + static_cast<double>(t) * (beta_end - beta_start) /
                                                      static_cast<double>(T - 1)
                                   : beta_start;
            if (!(b > 0.0 && b < 1.0)) throw ConfigError("ddpm beta out of (0,1)");
            s.beta[static_cast<size_t>(t)] = b;
            prod *= 1.0 - b;
            s.alpha_bar[static_cast<size_t>(t)] = prod;
            if (t > 0 && prod >= s.alpha_bar[static_cast<size_t>(t - 1)]) {
                throw ConfigError("ddpm alpha_bar must be strictly decreasing");
            }
        }
        if (s.alpha_bar.back() >= 0.01) throw ConfigError("ddpm terminal alpha_bar must be < 0.01");
        return s;
    }

    // 1-indexed; abar(0) = 1 by convention
    double abar(int64_t t) const {
        if (t < 0 || t > steps) throw UsageError("ddpm timestep " + std::to_string(t) + " out of range");
        return t == 0 ? 1.0 : alpha_bar[static_cast<size_t>(t - 1)];
    }
};

struct SigmaSchedule {
    double sigma_min = 0.002;
    double sigma_max = 80.0;
    double rho = 7.0;
    double sigma_data = 0.5;
    // training noise draw: ln(sigma) ~ N(mean, std), clamped to [min, max]
    double train_mean = -1.2;
    double train_std = 1.2;
};

// sigma_i = (max^(1/rho) + i/(N-1) (min^(1/rho) - max^(1/rho)))^rho, then 0
inline std::vector<double> karras_sigma_schedule(const SigmaSchedule& s, int64_t n) {
    if (n < 1) throw UsageError("sigma schedule needs at least 1 step");
    std::vector<double> out;
    out.reserve(static_cast<size_t>(n + 1));
    if (n == 1) {
        out = {s.sigma_max, 0.0};
        return out;
    }
    const double hi = std::pow(s.sigma_max, 1.0 / s.rho);
    const double lo = std::pow(s.sigma_min, 1.0 / s.rho);
    for (int64_t i = 0; i < n; ++i) {
        if (i == 0) {
            out.push_back(s.sigma_max); // exact endpoints, no pow round trip
        } else if (i == n - 1) {
            out.push_back(s.sigma_min);
        } else {
            const double f = static_cast<double>(i) / static_cast<double>(n - 1);
            out.push_back(std::pow(hi + f * (lo - hi), s.rho));
        }
    }
    out.push_back(0.0);
    return out;
}

// ------------------------------------------------------------------- bc

template <class Real>
Tensor<Real> bc_loss_from_pred(const Tensor<Real>& pred, const Tensor<Real>& target) {
    if (pred.shape() != target.shape()) {
        throw ShapeError("bc loss shape mismatch: " + shape_str(pred.shape()) + " vs " +
                         shape_str(target.shape()));
    }
    auto diff = sub(pred, target);
    return mean_all(mul(diff, diff));
}

// ------------------------------------------------------------------ ddpm

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, single t
template <class Real>
Tensor<Real> ddpm_forward_diffuse(const Tensor<Real>& x0, int64_t t, const Tensor<Real>& eps,
                                  const DdpmSchedule& sched) {
    if (t < 1 || t > sched.steps) {
        throw UsageError("ddpm timestep " + std::to_string(t) + " out of [1," + std::to_string(sched.steps) +
                         "]");
    }
    const double ab = sched.abar(t);
    return add(scale(x0, static_cast<Real>(std::sqrt(ab))),
               scale(eps, static_cast<Real>(std::sqrt(1.0 - ab))));
}

// E || eps - eps_hat ||^2 with t uniform per sample in [1, T]
template <class Real>
Tensor<Real> ddpm_loss(const DenoiseFn<Real>& model, const Tensor<Real>& x0, const DdpmSchedule& sched,
                       Rng& rng) {
    const int64_t b = x0.dim(0);
    auto eps = Tensor<Real>::randn(x0.shape(), rng);
    std::vector<Real> tvals(static_cast<size_t>(b));
    auto ca = Tensor<Real>::zeros({b, 1, 1});
    auto cb = Tensor<Real>::zeros({b, 1, 1});
    for (int64_t i = 0; i < b; ++i) {
        const int64_t t = 1 + rng.uniform_int(sched.steps);
        tvals[static_cast<size_t>(i)] = static_cast<Real>(t);
        const double ab = sched.abar(t);
        ca.data()[i] = static_cast<Real>(std::sqrt(ab));
        cb.data()[i] = static_cast<Real>(std::sqrt(1.0 - ab));
    }
    auto xt = add(mul(x0, ca), mul(eps, cb));
    auto pred = model(xt, tvals);
    auto diff = sub(pred, eps);
    // ||.||^2 sums over the chunk; expectation runs over the batch
    auto per_sample = sum_axis(reshape(mul(diff, diff), {b, x0.numel() / b}), 1);
    return mean_all(per_sample);
}

// ancestral sampling over an evenly strided sub-schedule; the final step
// adds no noise; output clipped to [-1, 1]
template <class Real>
Tensor<Real> ddpm_sample(const DenoiseFn<Real>& model, Shape shape, int64_t steps, const DdpmSchedule& sched,
                         Rng& rng) {
    if (steps < 1 || steps > sched.steps) throw UsageError("ddpm sample steps out of range");
    NoGrad<Real> ng;
    std::vector<int64_t> taus;
    for (int64_t i = 0; i < steps; ++i) {
        const double tau = static_cast<double>(sched.steps) -
                           static_cast<double>(i) * static_cast<double>(sched.steps) / static_cast<double>(steps);
        taus.push_back(std::max<int64_t>(1, static_cast<int64_t>(std::llround(tau))));
    }
    const int64_t b = shape[0];
    auto x = Tensor<Real>::randn(shape, rng);
    for (int64_t i = 0; i < steps; ++i) {
        const int64_t t_cur = taus[static_cast<size_t>(i)];
        const int64_t t_next = (i + 1 < steps) ? taus[static_cast<size_t>(i + 1)] : 0;
        const double ab_cur = sched.abar(t_cur);
        const double ab_next = sched.abar(t_next);
        std::vector<Real> tvals(static_cast<size_t>(b), static_cast<Real>(t_cur));
        auto eps_hat = model(x, tvals);
        auto x0_hat = scale(sub(x, scale(eps_hat, static_cast<Real>(std::sqrt(1.0 - ab_cur)))),
                            static_cast<Real>(1.0 / std::sqrt(ab_cur)));
        const double alpha_eff = ab_cur / ab_next;
        const double beta_eff = 1.0 - alpha_eff;
        const double c0 = std::sqrt(ab_next) * beta_eff / (1.0 - ab_cur);
        const double cx = std::sqrt(alpha_eff) * (1.0 - ab_next) / (1.0 - ab_cur);
        const double var = beta_eff * (1.0 - ab_next) / (1.0 - ab_cur);
        x = add(scale(x0_hat, static_cast<Real>(c0)), scale(x, static_cast<Real>(cx)));
        if (var > 0.0 && t_next > 0) {
            auto z = Tensor<Real>::randn(shape, rng);
            x = add(x, scale(z, static_cast<Real>(std::sqrt(var))));
        }
    }
    return clip(x, Real(-1), Real(1));
}

// ------------------------------------------------------------------ beso

// D = c_skip x + c_out F(c_in x, c_noise); sigma per sample
template <class Real>
Tensor<Real> edm_precondition(const DenoiseFn<Real>& model, const Tensor<Real>& x,
                              const std::vector<double>& sigmas, double sigma_data) {
    const int64_t b = x.dim(0);
    if (static_cast<int64_t>(sigmas.size()) != b) throw UsageError("one sigma per sample required");
    auto cskip = Tensor<Real>::zeros({b, 1, 1});
    auto cout = Tensor<Real>::zeros({b, 1, 1});
    auto cin = Tensor<Real>::zeros({b, 1, 1});
    std::vector<Real> cnoise(static_cast<size_t>(b));
    const double sd2 = sigma_data * sigma_data;
    for (int64_t i = 0; i < b; ++i) {
        const double s = sigmas[static_cast<size_t>(i)];
        if (!(s > 0.0)) throw NumericError("edm preconditioning requires sigma > 0");
        const double denom = s * s + sd2;
        cskip.data()[i] = static_cast<Real>(sd2 / denom);
        cout.data()[i] = static_cast<Real>(s * sigma_data / std::sqrt(denom));
        cin.data()[i] = static_cast<Real>(1.0 / std::sqrt(denom));
        cnoise[static_cast<size_t>(i)] = static_cast<Real>(0.25 * std::log(s));
    }
    auto f = model(mul(x, cin), cnoise);
    return add(mul(x, cskip), mul(f, cout));
}

// lambda(sigma) (mean elementwise (D - x0)^2), averaged over the batch;
// lambda = (sigma^2 + sd^2) / (sigma sd)^2 makes the effective target
// weight unit under the preconditioning
template <class Real>
Tensor<Real> beso_loss(const DenoiseFn<Real>& model, const Tensor<Real>& x0, const SigmaSchedule& cfg,
                       Rng& rng) {
    const int64_t b = x0.dim(0);
    std::vector<double> sigmas(static_cast<size_t>(b));
    auto lam = Tensor<Real>::zeros({b});
    for (int64_t i = 0; i < b; ++i) {
        double s = std::exp(rng.normal(cfg.train_mean, cfg.train_std));
        s = std::min(cfg.sigma_max, std::max(cfg.sigma_min, s));
        sigmas[static_cast<size_t>(i)] = s;
        const double sd = cfg.sigma_data;
        lam.data()[i] = static_cast<Real>((s * s + sd * sd) / ((s * sd) * (s * sd)));
    }
    auto eps = Tensor<Real>::randn(x0.shape(), rng);
    auto svec = Tensor<Real>::zeros({b, 1, 1});
    for (int64_t i = 0; i < b; ++i) svec.data()[i] = static_cast<Real>(sigmas[static_cast<size_t>(i)]);
    auto noisy = add(x0, mul(eps, svec));
    auto denoised = edm_precondition(model, noisy, sigmas, cfg.sigma_data);
    auto se = sub(denoised, x0);
    se = mul(se, se);
    auto per_sample = sum_axis(reshape(se, {b, se.numel() / b}), 1); // [b]
    return mean_all(mul(per_sample, lam));
}

// deterministic Euler integration of dx/dsigma = (x - D(x; sigma)) / sigma
// along the Karras schedule from sigma_max down to 0
template <class Real>
Tensor<Real> beso_sample(const DenoiseFn<Real>& model, Shape shape, int64_t steps, const SigmaSchedule& cfg,
                         Rng& rng) {
    NoGrad<Real> ng;
    auto sig = karras_sigma_schedule(cfg, steps);
    const int64_t b = shape[0];
    auto x = Tensor<Real>::randn(shape, rng);
    x = scale(x, static_cast<Real>(cfg.sigma_max));
    for (size_t i = 0; i + 1 < sig.size(); ++i) {
        const double s = sig[i];
        const double s_next = sig[i + 1];
        std::vector<double> sigmas(static_cast<size_t>(b), s);
        auto denoised = edm_precondition(model, x, sigmas, cfg.sigma_data);
        auto d = scale(sub(x, denoised), static_cast<Real>(1.0 / s));
        x = add(x, scale(d, static_cast<Real>(s_next - s)));
    }
    return clip(x, Real(-1), Real(1));
}

// -------------------------------------------------------------------- rf

// x_t = t x1 + (1-t) x0, v* = x1 - x0
template <class Real>
std::pair<Tensor<Real>, Tensor<Real>> rf_interpolate(const Tensor<Real>& x0_noise, const Tensor<Real>& x1_data,
                                                     Real t) {
    if (!(t >= Real(0) && t <= Real(1))) throw UsageError("rf time must lie in [0,1]");
    auto xt = add(scale(x1_data, t), scale(x0_noise, Real(1) - t));
    auto v = sub(x1_data, x0_noise);
    return {std::move(xt), std::move(v)};
}

// E || v_hat(x_t, t) - (x1 - x0) ||^2 with t uniform per sample
template <class Real>
Tensor<Real> rf_loss(const DenoiseFn<Real>& model, const Tensor<Real>& x1, Rng& rng) {
    const int64_t b = x1.dim(0);
    auto x0 = Tensor<Real>::randn(x1.shape(), rng);
    std::vector<Real> tvals(static_cast<size_t>(b));
    auto tv = Tensor<Real>::zeros({b, 1, 1});
    for (int64_t i = 0; i < b; ++i) {
        const Real t = static_cast<Real>(rng.uniform());
        tvals[static_cast<size_t>(i)] = t;
        tv.data()[i] = t;
    }
    auto xt = add(mul(x1, tv), mul(x0, affine(tv, Real(-1), Real(1))));
    auto target = sub(x1, x0);
    auto pred = model(xt, tvals);
    auto diff = sub(pred, target);
    auto per_sample = sum_axis(reshape(mul(diff, diff), {b, x1.numel() / b}), 1);
    return mean_all(per_sample);
}

// Euler integration of the learned velocity field over a uniform grid 0 -> 1
template <class Real>
Tensor<Real> rf_sample(const DenoiseFn<Real>& model, Shape shape, int64_t steps, Rng& rng) {
    if (steps < 1) throw UsageError("rf sample needs steps >= 1");
    NoGrad<Real> ng;
    const int64_t b = shape[0];
    auto x = Tensor<Real>::randn(shape, rng);
    const Real dt = Real(1) / static_cast<Real>(steps);
    for (int64_t i = 0; i < steps; ++i) {
        const Real t = static_cast<Real>(i) / static_cast<Real>(steps);
        std::vector<Real> tvals(static_cast<size_t>(b), t);
        auto v = model(x, tvals);
        x = add(x, scale(v, dt));
    }
    return clip(x, Real(-1), Real(1));
}

// ------------------------------------------------------- shared interface

template <class Real>
struct PolicyHeadConfig {
    HeadKind kind = HeadKind::beso;
    DdpmSchedule ddpm = DdpmSchedule::make();
    SigmaSchedule sigma;
    int64_t sample_steps = 4; // paper default
};

template <class Real>
Tensor<Real> head_loss(const PolicyHeadConfig<Real>& cfg, const DenoiseFn<Real>& model,
                       const Tensor<Real>& x0, Rng& rng) {
    switch (cfg.kind) {
        case HeadKind::bc: {
            std::vector<Real> tvals(static_cast<size_t>(x0.dim(0)), Real(0));
            auto pred = model(Tensor<Real>::zeros(x0.shape()), tvals);
            return bc_loss_from_pred(pred, x0);
        }
        case HeadKind::ddpm: return ddpm_loss(model, x0, cfg.ddpm, rng);
        case HeadKind::beso: return beso_loss(model, x0, cfg.sigma, rng);
        case HeadKind::rf: return rf_loss(model, x0, rng);
    }
    throw UsageError("bad head kind");
}

template <class Real>
Tensor<Real> head_sample(const PolicyHeadConfig<Real>& cfg, const DenoiseFn<Real>& model, Shape shape,
                         int64_t steps, Rng& rng) {
    switch (cfg.kind) {
        case HeadKind::bc: {
            NoGrad<Real> ng;
            std::vector<Real> tvals(static_cast<size_t>(shape[0]), Real(0));
            return clip(model(Tensor<Real>::zeros(shape), tvals), Real(-1), Real(1));
        }
        case HeadKind::ddpm: return ddpm_sample(model, shape, steps, cfg.ddpm, rng);
        case HeadKind::beso: return beso_sample(model, shape, steps, cfg.sigma, rng);
        case HeadKind::rf: return rf_sample(model, shape, steps, rng);
    }
    throw UsageError("bad head kind");
}

} // namespace xil
