#include <catch2/catch_amalgamated.hpp>

#include "xil/policies.hpp"

using xil::Tensor;
using T = Tensor<double>;
using Fn = xil::DenoiseFn<double>;

namespace {
Fn zero_model() {
    return [](const T& x, const std::vector<double>&) { return T::zeros(x.shape()); };
}
} // namespace

TEST_CASE("bc loss basics") {
    xil::Rng rng(1);
    auto a = T::randn({2, 3, 2}, rng);
    REQUIRE(xil::bc_loss_from_pred(a, a).at(0) == 0.0);

    auto b = xil::add(a, T::ones(a.shape()));
    REQUIRE(xil::bc_loss_from_pred(b, a).at(0) == Catch::Approx(1.0).margin(1e-12));

    auto c = T::randn(a.shape(), rng);
    double acc = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double d = c.at(i) - a.at(i);
        acc += d * d;
    }
    REQUIRE(xil::bc_loss_from_pred(c, a).at(0) ==
            Catch::Approx(acc / static_cast<double>(a.numel())).margin(1e-12));

    REQUIRE_THROWS_AS(xil::bc_loss_from_pred(T::zeros({1, 2, 2}), a), xil::ShapeError);
}

TEST_CASE("ddpm schedule invariants and forward diffusion") {
    auto sched = xil::DdpmSchedule::make();
    REQUIRE(sched.steps == 1000);
    REQUIRE(sched.abar(1000) < 0.01);
    for (int64_t t = 2; t <= 1000; ++t) REQUIRE(sched.abar(t) < sched.abar(t - 1));

    // cumulative-product oracle for abar(500)
    double prod = 1.0;
    for (int64_t t = 0; t < 500; ++t) {
        prod *= 1.0 - (1e-4 + t * (0.02 - 1e-4) / 999.0);
    }
    REQUIRE(sched.abar(500) == Catch::Approx(prod).epsilon(1e-12));

    xil::Rng rng(2);
    auto x0 = T::randn({1, 2, 2}, rng);
    auto eps = T::randn(x0.shape(), rng);

    // t=1 with tiny beta_1: x_t ~ x0
    auto x1 = xil::ddpm_forward_diffuse(x0, 1, eps, sched);
    for (int64_t i = 0; i < x0.numel(); ++i) {
        REQUIRE(x1.at(i) == Catch::Approx(x0.at(i)).margin(0.05));
    }

    // eps = 0 gives sqrt(abar) x0
    auto xt = xil::ddpm_forward_diffuse(x0, 700, T::zeros(x0.shape()), sched);
    for (int64_t i = 0; i < x0.numel(); ++i) {
        REQUIRE(xt.at(i) == Catch::Approx(std::sqrt(sched.abar(700)) * x0.at(i)).margin(1e-12));
    }

    REQUIRE_THROWS_AS(xil::ddpm_forward_diffuse(x0, 0, eps, sched), xil::UsageError);
    REQUIRE_THROWS_AS(xil::ddpm_forward_diffuse(x0, 1001, eps, sched), xil::UsageError);
}

TEST_CASE("ddpm loss oracle values") {
    auto sched = xil::DdpmSchedule::make();
    xil::Rng rng(3);
    auto x0 = T::randn({64, 2, 2}, rng);

    // an exact noise oracle drives the loss to zero: eps = (x_t - sqrt(ab) x0) / sqrt(1-ab)
    Fn exact = [&](const T& xt, const std::vector<double>& tvals) {
        auto out = T::zeros(xt.shape());
        const int64_t chunk = xt.numel() / xt.dim(0);
        for (int64_t b = 0; b < xt.dim(0); ++b) {
            const double ab = sched.abar(static_cast<int64_t>(tvals[static_cast<size_t>(b)]));
            for (int64_t i = 0; i < chunk; ++i) {
                out.data()[b * chunk + i] =
                    (xt.at(b * chunk + i) - std::sqrt(ab) * x0.at(b * chunk + i)) / std::sqrt(1.0 - ab);
            }
        }
        return out;
    };
    xil::Rng r1(7);
    REQUIRE(xil::ddpm_loss(exact, x0, sched, r1).at(0) < 1e-20);

    // zero model: loss ~ E||eps||^2 = Ta * Da = 4 within Monte-Carlo error
    xil::Rng r2(8);
    double acc = 0;
    const int reps = 40;
    for (int i = 0; i < reps; ++i) acc += xil::ddpm_loss(zero_model(), x0, sched, r2).at(0);
    REQUIRE(acc / reps == Catch::Approx(4.0).margin(0.3));

    // gradient flows into model parameters
    auto w = T::scalar(0.5);
    w.set_requires_grad(true);
    Fn param_model = [&](const T& xt, const std::vector<double>&) { return xil::mul(xt, w); };
    xil::Tape<double> tape;
    {
        xil::TapeScope<double> scope(tape);
        xil::Rng r3(9);
        auto loss = xil::ddpm_loss(param_model, x0, sched, r3);
        tape.backward(loss);
    }
    REQUIRE(std::abs(tape.grad(w).at(0)) > 0.0);
}

TEST_CASE("ddpm single-step sample is x_T / sqrt(abar_T) clipped") {
    auto sched = xil::DdpmSchedule::make();
    xil::Rng r1(11), r2(11);
    auto out = xil::ddpm_sample(zero_model(), {2, 2, 2}, 1, sched, r1);
    auto noise = T::randn({2, 2, 2}, r2);
    for (int64_t i = 0; i < out.numel(); ++i) {
        const double expect =
            std::min(1.0, std::max(-1.0, noise.at(i) / std::sqrt(sched.abar(1000))));
        REQUIRE(out.at(i) == Catch::Approx(expect).margin(1e-12));
    }
}

TEST_CASE("ddpm sampling with an exact oracle concentrates on the data point") {
    auto sched = xil::DdpmSchedule::make();
    const double target = 0.3;
    Fn exact = [&](const T& xt, const std::vector<double>& tvals) {
        auto out = T::zeros(xt.shape());
        const int64_t chunk = xt.numel() / xt.dim(0);
        for (int64_t b = 0; b < xt.dim(0); ++b) {
            const double ab = sched.abar(static_cast<int64_t>(tvals[static_cast<size_t>(b)]));
            for (int64_t i = 0; i < chunk; ++i) {
                out.data()[b * chunk + i] =
                    (xt.at(b * chunk + i) - std::sqrt(ab) * target) / std::sqrt(1.0 - ab);
            }
        }
        return out;
    };
    xil::Rng rng(13);
    int close = 0;
    const int n = 200;
    auto samples = xil::ddpm_sample(exact, {n, 1, 2}, 16, sched, rng);
    for (int i = 0; i < n; ++i) {
        const double dx = samples.at(i * 2) - target;
        const double dy = samples.at(i * 2 + 1) - target;
        if (std::sqrt(dx * dx + dy * dy) < 0.05) close++;
    }
    REQUIRE(close >= n * 95 / 100);
}

TEST_CASE("samplers are bitwise deterministic given the seed") {
    auto sched = xil::DdpmSchedule::make();
    xil::SigmaSchedule sig;
    xil::Rng a1(5), a2(5);
    REQUIRE(xil::ddpm_sample(zero_model(), {2, 2, 2}, 4, sched, a1).raw() ==
            xil::ddpm_sample(zero_model(), {2, 2, 2}, 4, sched, a2).raw());
    xil::Rng b1(6), b2(6);
    REQUIRE(xil::beso_sample(zero_model(), {2, 2, 2}, 4, sig, b1).raw() ==
            xil::beso_sample(zero_model(), {2, 2, 2}, 4, sig, b2).raw());
    xil::Rng c1(7), c2(7);
    REQUIRE(xil::rf_sample(zero_model(), {2, 2, 2}, 4, c1).raw() ==
            xil::rf_sample(zero_model(), {2, 2, 2}, 4, c2).raw());
}

TEST_CASE("karras sigma schedule endpoints and frozen defaults") {
    xil::SigmaSchedule s;
    auto two = xil::karras_sigma_schedule(s, 2);
    REQUIRE(two == std::vector<double>{80.0, 0.002, 0.0});

    xil::SigmaSchedule lin;
    lin.rho = 1.0;
    lin.sigma_min = 1.0;
    lin.sigma_max = 9.0;
    auto three = xil::karras_sigma_schedule(lin, 3);
    REQUIRE(three.size() == 4);
    REQUIRE(three[0] == Catch::Approx(9.0).margin(1e-12));
    REQUIRE(three[1] == Catch::Approx(5.0).margin(1e-12));
    REQUIRE(three[2] == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(three[3] == 0.0);

    auto four = xil::karras_sigma_schedule(s, 4);
    REQUIRE(four[0] == Catch::Approx(80.0).epsilon(1e-12));
    REQUIRE(four[1] == Catch::Approx(9.72320136).epsilon(1e-7));
    REQUIRE(four[2] == Catch::Approx(0.469979058).epsilon(1e-7));
    REQUIRE(four[3] == Catch::Approx(0.002).epsilon(1e-12));
    REQUIRE(four[4] == 0.0);

    auto one = xil::karras_sigma_schedule(s, 1);
    REQUIRE(one == std::vector<double>{80.0, 0.0});
    REQUIRE_THROWS_AS(xil::karras_sigma_schedule(s, 0), xil::UsageError);

    // strictly decreasing
    for (size_t i = 1; i < four.size(); ++i) REQUIRE(four[i] < four[i - 1]);
}

TEST_CASE("edm preconditioning coefficients") {
    xil::Rng rng(17);
    auto x = T::randn({2, 2, 2}, rng);

    // F = 0 leaves c_skip * x; at sigma = sigma_data, c_skip = 0.5
    auto d = xil::edm_precondition(zero_model(), x, {0.5, 0.5}, 0.5);
    for (int64_t i = 0; i < x.numel(); ++i) {
        REQUIRE(d.at(i) == Catch::Approx(0.5 * x.at(i)).margin(1e-12));
    }

    // sigma -> 0+: c_skip -> 1, c_out -> 0
    Fn ones_model = [](const T& xin, const std::vector<double>&) { return T::ones(xin.shape()); };
    auto d2 = xil::edm_precondition(ones_model, x, {1e-6, 1e-6}, 0.5);
    for (int64_t i = 0; i < x.numel(); ++i) {
        REQUIRE(d2.at(i) == Catch::Approx(x.at(i)).margin(1e-5));
    }

    REQUIRE_THROWS_AS(xil::edm_precondition(zero_model(), x, {0.0, 1.0}, 0.5), xil::NumericError);
}

TEST_CASE("beso loss oracle values") {
    xil::SigmaSchedule cfg;
    xil::Rng rng(19);
    auto x0 = T::randn({8, 2, 2}, rng, 0.4);

    // model that makes D == x0 exactly, reconstructing sigma from c_noise
    Fn exact = [&](const T& xin, const std::vector<double>& tvals) {
        auto out = T::zeros(xin.shape());
        const int64_t chunk = xin.numel() / xin.dim(0);
        const double sd = cfg.sigma_data;
        for (int64_t b = 0; b < xin.dim(0); ++b) {
            const double s = std::exp(4.0 * tvals[static_cast<size_t>(b)]);
            const double denom = s * s + sd * sd;
            const double cskip = sd * sd / denom;
            const double cout = s * sd / std::sqrt(denom);
            const double cin = 1.0 / std::sqrt(denom);
            for (int64_t i = 0; i < chunk; ++i) {
                const double noisy = xin.at(b * chunk + i) / cin;
                out.data()[b * chunk + i] = (x0.at(b * chunk + i) - cskip * noisy) / cout;
            }
        }
        return out;
    };
    xil::Rng r1(23);
    REQUIRE(xil::beso_loss(exact, x0, cfg, r1).at(0) < 1e-18);

    // lambda(sigma_data) = 2 / sigma_data^2
    const double sd = cfg.sigma_data;
    const double lam = (sd * sd + sd * sd) / ((sd * sd) * (sd * sd));
    REQUIRE(lam == Catch::Approx(2.0 / (sd * sd)).epsilon(1e-12));

    // finite at both clamp ends
    xil::SigmaSchedule lo = cfg;
    lo.train_mean = -50.0;
    xil::Rng r2(29);
    REQUIRE(std::isfinite(xil::beso_loss(zero_model(), x0, lo, r2).at(0)));
    xil::SigmaSchedule hi = cfg;
    hi.train_mean = 50.0;
    xil::Rng r3(31);
    REQUIRE(std::isfinite(xil::beso_loss(zero_model(), x0, hi, r3).at(0)));
}

namespace {
// network F chosen so the preconditioned denoiser output is exactly c
Fn make_const_denoiser(double c, double sigma_data) {
    return [c, sigma_data](const T& xin, const std::vector<double>& tvals) {
        auto outv = T::zeros(xin.shape());
        const int64_t chunk = xin.numel() / xin.dim(0);
        const double sd = sigma_data;
        for (int64_t b = 0; b < xin.dim(0); ++b) {
            const double s = std::exp(4.0 * tvals[static_cast<size_t>(b)]);
            const double denom = s * s + sd * sd;
            const double cskip = sd * sd / denom;
            const double cout = s * sd / std::sqrt(denom);
            const double cin = 1.0 / std::sqrt(denom);
            for (int64_t i = 0; i < chunk; ++i) {
                const double noisy = xin.at(b * chunk + i) / cin;
                outv.data()[b * chunk + i] = (c - cskip * noisy) / cout;
            }
        }
        return outv;
    };
}
} // namespace

TEST_CASE("beso euler sampler algebra") {
    xil::SigmaSchedule cfg;
    // D = 0: every euler step scales x by sigma_next / sigma; terminal 0
    xil::Rng r1(37);
    auto out = xil::beso_sample(make_const_denoiser(0.0, cfg.sigma_data), {2, 2, 2}, 4, cfg, r1);
    for (int64_t i = 0; i < out.numel(); ++i) REQUIRE(out.at(i) == Catch::Approx(0.0).margin(1e-12));

    // D = constant c: deterministic integration converges onto c
    const double c = 0.25;
    xil::Rng r2(41);
    auto conv = xil::beso_sample(make_const_denoiser(c, cfg.sigma_data), {50, 1, 2}, 16, cfg, r2);
    for (int64_t i = 0; i < conv.numel(); ++i) {
        REQUIRE(std::abs(conv.at(i) - c) < 0.05);
    }
}

TEST_CASE("rf interpolation endpoints") {
    xil::Rng rng(43);
    auto x0 = T::randn({1, 2, 2}, rng);
    auto x1 = T::randn({1, 2, 2}, rng);

    auto [a, va] = xil::rf_interpolate(x0, x1, 0.0);
    REQUIRE(a.raw() == x0.raw());
    auto [b, vb] = xil::rf_interpolate(x0, x1, 1.0);
    REQUIRE(b.raw() == x1.raw());
    auto [m, vm] = xil::rf_interpolate(x0, x1, 0.5);
    for (int64_t i = 0; i < m.numel(); ++i) {
        REQUIRE(m.at(i) == Catch::Approx(0.5 * (x0.at(i) + x1.at(i))).margin(1e-12));
        REQUIRE(vm.at(i) == Catch::Approx(x1.at(i) - x0.at(i)).margin(1e-12));
    }
    REQUIRE_THROWS_AS(xil::rf_interpolate(x0, x1, 1.5), xil::UsageError);
}

TEST_CASE("rf loss oracle values") {
    xil::Rng rng(47);
    auto x1 = T::randn({64, 1, 4}, rng, 0.5);

    // exact velocity recovered from (x_t, t): v = (x1 - x_t) / (1 - t)
    Fn exact = [&](const T& xt, const std::vector<double>& tvals) {
        auto out = T::zeros(xt.shape());
        const int64_t chunk = xt.numel() / xt.dim(0);
        for (int64_t b = 0; b < xt.dim(0); ++b) {
            const double t = tvals[static_cast<size_t>(b)];
            for (int64_t i = 0; i < chunk; ++i) {
                out.data()[b * chunk + i] = (x1.at(b * chunk + i) - xt.at(b * chunk + i)) / (1.0 - t);
            }
        }
        return out;
    };
    xil::Rng r1(53);
    REQUIRE(xil::rf_loss(exact, x1, r1).at(0) < 1e-12);

    // zero velocity on a point dataset at 0: loss = E||x0||^2 = Ta*Da
    xil::Rng r2(59);
    double acc = 0;
    const int reps = 40;
    auto zeros_data = T::zeros({64, 1, 4});
    for (int i = 0; i < reps; ++i) acc += xil::rf_loss(zero_model(), zeros_data, r2).at(0);
    REQUIRE(acc / reps == Catch::Approx(4.0).margin(0.3));

    // gradient flows
    auto w = T::scalar(0.3);
    w.set_requires_grad(true);
    Fn param_model = [&](const T& xt, const std::vector<double>&) { return xil::mul(xt, w); };
    xil::Tape<double> tape;
    {
        xil::TapeScope<double> scope(tape);
        xil::Rng r3(61);
        tape.backward(xil::rf_loss(param_model, x1, r3));
    }
    REQUIRE(std::abs(tape.grad(w).at(0)) > 0.0);
}

TEST_CASE("rf sampler with constant field is exact for any step count") {
    const double c = 0.2;
    Fn const_v = [&](const T& x, const std::vector<double>&) { return T::full(x.shape(), c); };
    for (int64_t steps : {1, 3, 7}) {
        xil::Rng r1(67), r2(67);
        auto out = xil::rf_sample(const_v, {2, 1, 2}, steps, r1);
        auto x0 = T::randn({2, 1, 2}, r2);
        for (int64_t i = 0; i < out.numel(); ++i) {
            const double expect = std::min(1.0, std::max(-1.0, x0.at(i) + c));
            REQUIRE(out.at(i) == Catch::Approx(expect).margin(1e-9));
        }
    }
}

TEST_CASE("all four heads run behind the shared interface") {
    xil::PolicyHeadConfig<double> cfg;
    xil::Rng rng(71);
    auto x0 = T::uniform({4, 2, 2}, rng, -0.8, 0.8);
    for (auto kind : {xil::HeadKind::bc, xil::HeadKind::ddpm, xil::HeadKind::beso, xil::HeadKind::rf}) {
        cfg.kind = kind;
        xil::Rng r1(73);
        auto loss = xil::head_loss(cfg, zero_model(), x0, r1);
        REQUIRE(loss.numel() == 1);
        REQUIRE(std::isfinite(loss.at(0)));
        xil::Rng r2(79), r3(79);
        auto s1 = xil::head_sample(cfg, zero_model(), {4, 2, 2}, 4, r2);
        auto s2 = xil::head_sample(cfg, zero_model(), {4, 2, 2}, 4, r3);
        REQUIRE(s1.shape() == xil::Shape{4, 2, 2});
        REQUIRE(s1.raw() == s2.raw());
        for (double v : s1.raw()) REQUIRE((v >= -1.0 && v <= 1.0));
    }
}
