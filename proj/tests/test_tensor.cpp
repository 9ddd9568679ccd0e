#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "xil/tensor.hpp"

#include <cmath>

using xil::Tensor;
using T = Tensor<double>;

TEST_CASE("matmul identity") {
    auto a = T::from({2, 2}, {1, 2, 3, 4});
    auto eye = T::from({2, 2}, {1, 0, 0, 1});
    auto c = xil::matmul(a, eye);
    REQUIRE(c.raw() == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("matmul matches naive triple loop") {
    auto a = T::from({2, 2}, {1, 2, 3, 4});
    auto b = T::from({2, 2}, {5, 6, 7, 8});
    auto c = xil::matmul(a, b);
    REQUIRE(c.raw() == std::vector<double>{19, 22, 43, 50});

    xil::Rng rng(7);
    auto x = T::randn({5, 4}, rng);
    auto y = T::randn({4, 3}, rng);
    auto z = xil::matmul(x, y);
    auto ref = oracle::matmul(x.raw(), y.raw(), 5, 4, 3);
    for (int64_t i = 0; i < z.numel(); ++i) {
        REQUIRE(z.at(i) == Catch::Approx(ref[static_cast<size_t>(i)]).margin(1e-12));
    }
}

TEST_CASE("batched matmul with broadcast leading dims") {
    xil::Rng rng(11);
    auto a = T::randn({3, 2, 4}, rng);
    auto b = T::randn({4, 5}, rng); // broadcast over batch
    auto c = xil::matmul(a, b);
    REQUIRE(c.shape() == xil::Shape{3, 2, 5});
    for (int bi = 0; bi < 3; ++bi) {
        std::vector<double> slab(a.data() + bi * 8, a.data() + (bi + 1) * 8);
        auto ref = oracle::matmul(slab, b.raw(), 2, 4, 5);
        for (int i = 0; i < 10; ++i) {
            REQUIRE(c.at(bi * 10 + i) == Catch::Approx(ref[static_cast<size_t>(i)]).margin(1e-12));
        }
    }
}

TEST_CASE("matmul shape mismatch names both shapes") {
    auto a = T::zeros({2, 3});
    auto b = T::zeros({4, 2});
    try {
        xil::matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const xil::ShapeError& e) {
        const std::string msg = e.what();
        REQUIRE(msg.find("[2,3]") != std::string::npos);
        REQUIRE(msg.find("[4,2]") != std::string::npos);
    }
}

TEST_CASE("gradient of sum(A*B) wrt A equals ones*B^T") {
    xil::Rng rng(3);
    auto a = T::randn({3, 4}, rng);
    auto b = T::randn({4, 2}, rng);
    a.set_requires_grad(true);

    xil::Tape<double> tape;
    {
        xil::TapeScope<double> scope(tape);
        auto loss = xil::sum_all(xil::matmul(a, b));
        tape.backward(loss);
    }
    auto ga = tape.grad(a);
    auto ones = T::ones({3, 2});
    auto expect = xil::matmul(ones, xil::transpose_last2(b));
    for (int64_t i = 0; i < ga.numel(); ++i) {
        REQUIRE(ga.at(i) == Catch::Approx(expect.at(i)).margin(1e-12));
    }

    // same thing via the finite-difference route
    auto err = xil::grad_check(
        [&](const T& x) { return xil::sum_all(xil::matmul(x, b)); }, a, 1e-5);
    REQUIRE(err < 1e-6);
}

TEST_CASE("elementwise op values") {
    auto z = T::scalar(0.0);
    REQUIRE(xil::silu(z).at(0) == 0.0);
    REQUIRE(xil::softplus(z).at(0) == Catch::Approx(0.6931471805599453).epsilon(1e-12));

    // d/dx tanh at 0 is 1
    auto x = T::scalar(0.0);
    x.set_requires_grad(true);
    xil::Tape<double> tape;
    {
        xil::TapeScope<double> scope(tape);
        tape.backward(xil::sum_all(xil::tanh(x)));
    }
    REQUIRE(tape.grad(x).at(0) == 1.0);
}

TEST_CASE("log of non-positive raises a numeric-domain error") {
    auto x = T::from({2}, {1.0, 0.0});
    REQUIRE_THROWS_AS(xil::log(x), xil::NumericError);
}

TEST_CASE("softmax basics") {
    auto a = xil::softmax(T::from({2}, {0.0, 0.0}), 0);
    REQUIRE(a.at(0) == Catch::Approx(0.5).margin(1e-15));

    auto big = xil::softmax(T::from({2}, {1000.0, 1000.0}), 0);
    REQUIRE(std::isfinite(big.at(0)));
    REQUIRE(big.at(0) == Catch::Approx(0.5).margin(1e-15));

    auto x = T::from({3}, {1.0, 2.0, 3.0});
    auto y = xil::softmax(x, 0);
    auto ref = oracle::softmax_unshifted(x.raw());
    for (int i = 0; i < 3; ++i) {
        REQUIRE(y.at(i) == Catch::Approx(ref[static_cast<size_t>(i)]).margin(1e-12));
    }
    double s = y.at(0) + y.at(1) + y.at(2);
    REQUIRE(s == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("layer_norm values") {
    auto c = xil::layer_norm(T::from({3}, {5.0, 5.0, 5.0}), 0, 1e-5);
    for (int i = 0; i < 3; ++i) REQUIRE(c.at(i) == 0.0);

    auto y = xil::layer_norm(T::from({3}, {1.0, 2.0, 3.0}), 0, 0.0);
    REQUIRE(y.at(0) == Catch::Approx(-1.224744871391589).epsilon(1e-9));
    REQUIRE(y.at(1) == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(y.at(2) == Catch::Approx(1.224744871391589).epsilon(1e-9));

    xil::Rng rng(5);
    auto r = xil::layer_norm(T::randn({4, 7}, rng), -1, 1e-6);
    for (int row = 0; row < 4; ++row) {
        double mean = 0;
        for (int i = 0; i < 7; ++i) mean += r.at(row * 7 + i);
        REQUIRE(std::abs(mean / 7) < 1e-6);
    }
}

TEST_CASE("backward on simple analytic functions") {
    auto x = T::scalar(3.0);
    x.set_requires_grad(true);
    xil::Tape<double> tape;
    {
        xil::TapeScope<double> scope(tape);
        tape.backward(xil::sum_all(xil::mul(x, x)));
    }
    REQUIRE(tape.grad(x).at(0) == 6.0);

    auto a = T::scalar(2.0), b = T::scalar(5.0);
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    xil::Tape<double> tape2;
    {
        xil::TapeScope<double> scope(tape2);
        tape2.backward(xil::sum_all(xil::mul(a, b)));
    }
    REQUIRE(tape2.grad(a).at(0) == 5.0);
    REQUIRE(tape2.grad(b).at(0) == 2.0);
}

TEST_CASE("backward rejects non-scalar root and double invocation") {
    auto x = T::from({2}, {1.0, 2.0});
    x.set_requires_grad(true);
    xil::Tape<double> tape;
    xil::TapeScope<double> scope(tape);
    auto y = xil::mul(x, x);
    REQUIRE_THROWS_AS(tape.backward(y), xil::UsageError);

    auto s = xil::sum_all(y);
    tape.backward(s);
    REQUIRE_THROWS_AS(tape.backward(s), xil::UsageError);
}

TEST_CASE("composite MLP loss gradients match central differences") {
    xil::Rng rng(17);
    auto w1 = T::randn({8, 5}, rng, 0.5);
    auto b1 = T::randn({8}, rng, 0.1);
    auto w2 = T::randn({1, 8}, rng, 0.5);
    auto x = T::randn({3, 5}, rng);

    auto f = [&](const T& w) {
        auto h = xil::tanh(xil::add(xil::matmul(x, xil::transpose_last2(w)), b1));
        auto out = xil::matmul(h, xil::transpose_last2(w2));
        return xil::mean_all(xil::mul(out, out));
    };
    REQUIRE(xil::grad_check(f, w1, 1e-5) < 1e-4);
}

TEST_CASE("grad_check reference cases") {
    xil::Rng rng(23);
    // linear layer
    auto w = T::randn({4, 6}, rng);
    auto x = T::randn({2, 6}, rng);
    auto lin = [&](const T& v) { return xil::sum_all(xil::matmul(v, xil::transpose_last2(w))); };
    REQUIRE(xil::grad_check(lin, x, 1e-5) < 1e-6);

    // softmax cross-entropy head
    auto target = T::from({1, 4}, {0.0, 1.0, 0.0, 0.0});
    auto logits = T::randn({1, 4}, rng);
    auto ce = [&](const T& v) {
        auto p = xil::softmax(v, -1);
        return xil::neg(xil::sum_all(xil::mul(target, xil::log(p))));
    };
    REQUIRE(xil::grad_check(ce, logits, 1e-5) < 1e-5);

    // zero function
    auto zf = [](const T& v) { return xil::sum_all(xil::mul(v, T::zeros(v.shape()))); };
    REQUIRE(xil::grad_check(zf, x, 1e-5) == 0.0);

    // h outside [1e-6, 1e-4] is a usage error
    REQUIRE_THROWS_AS(xil::grad_check(lin, x, 1e-7), xil::UsageError);
}

TEST_CASE("every differentiable op passes grad_check on multiple shapes") {
    xil::Rng rng(31);
    const std::vector<xil::Shape> shapes = {{3}, {2, 4}, {2, 3, 2}};
    for (const auto& shape : shapes) {
        auto x = T::randn(shape, rng, 0.8);
        auto sum_of = [](auto op) {
            return [op](const T& v) { return xil::sum_all(op(v)); };
        };
        REQUIRE(xil::grad_check(sum_of([](const T& v) { return xil::exp(v); }), x, 1e-5) < 1e-4);
        REQUIRE(xil::grad_check(sum_of([](const T& v) { return xil::tanh(v); }), x, 1e-5) < 1e-4);
        REQUIRE(xil::grad_check(sum_of([](const T& v) { return xil::sigmoid(v); }), x, 1e-5) < 1e-4);
        REQUIRE(xil::grad_check(sum_of([](const T& v) { return xil::silu(v); }), x, 1e-5) < 1e-4);
        REQUIRE(xil::grad_check(sum_of([](const T& v) { return xil::gelu(v); }), x, 1e-5) < 1e-4);
        REQUIRE(xil::grad_check(sum_of([](const T& v) { return xil::softplus(v); }), x, 1e-5) < 1e-4);
        REQUIRE(xil::grad_check(sum_of([](const T& v) { return xil::neg(v); }), x, 1e-5) < 1e-4);
        // weighted sums: the plain sum of a softmax (or layer_norm) slice is
        // constant, which makes the relative-error ratio meaningless
        auto wts = T::randn(shape, rng);
        REQUIRE(xil::grad_check(
                    [&](const T& v) { return xil::sum_all(xil::mul(wts, xil::softmax(v, -1))); }, x, 1e-5) <
                1e-4);
        REQUIRE(xil::grad_check(
                    [&](const T& v) { return xil::sum_all(xil::mul(wts, xil::layer_norm(v, -1, 1e-3))); }, x,
                    1e-5) < 1e-4);
        REQUIRE(xil::grad_check(sum_of([](const T& v) { return xil::mul(v, v); }), x, 1e-5) < 1e-4);

        auto pos = xil::add(xil::mul(x, x), T::full(shape, 0.5));
        REQUIRE(xil::grad_check(sum_of([](const T& v) { return xil::log(v); }), pos, 1e-5) < 1e-4);
        REQUIRE(xil::grad_check(sum_of([](const T& v) { return xil::sqrt(v); }), pos, 1e-5) < 1e-4);

        auto other = T::randn(shape, rng);
        REQUIRE(xil::grad_check([&](const T& v) { return xil::sum_all(xil::div(v, pos)); }, other, 1e-5) <
                1e-4);
        REQUIRE(xil::grad_check([&](const T& v) { return xil::sum_all(xil::maximum(v, other)); }, x, 1e-5) <
                1e-4);
        REQUIRE(xil::grad_check(
                    [&](const T& v) { return xil::mean_all(xil::max_axis(v, -1)); }, x, 1e-5) < 1e-4);
    }
}

TEST_CASE("broadcasting follows trailing-dimension alignment") {
    auto a = T::from({2, 3}, {1, 2, 3, 4, 5, 6});
    auto b = T::from({3}, {10, 20, 30});
    auto c = xil::add(a, b);
    REQUIRE(c.raw() == std::vector<double>{11, 22, 33, 14, 25, 36});

    auto col = T::from({2, 1}, {100, 200});
    auto d = xil::add(a, col);
    REQUIRE(d.raw() == std::vector<double>{101, 102, 103, 204, 205, 206});

    REQUIRE_THROWS_AS(xil::add(T::zeros({2, 3}), T::zeros({2, 2})), xil::ShapeError);

    // gradient reduces over broadcast dims
    auto bias = T::from({3}, {0.0, 0.0, 0.0});
    bias.set_requires_grad(true);
    xil::Tape<double> tape;
    {
        xil::TapeScope<double> scope(tape);
        tape.backward(xil::sum_all(xil::add(a, bias)));
    }
    REQUIRE(tape.grad(bias).raw() == std::vector<double>{2, 2, 2});
}

TEST_CASE("structural ops round trip with gradients") {
    xil::Rng rng(41);
    auto x = T::randn({2, 3, 4}, rng);

    auto f_resh = [](const T& v) {
        return xil::sum_all(xil::mul(xil::reshape(v, {6, 4}), xil::reshape(v, {6, 4})));
    };
    REQUIRE(xil::grad_check(f_resh, x, 1e-5) < 1e-4);

    auto f_perm = [](const T& v) {
        auto p = xil::permute(v, {2, 0, 1});
        return xil::sum_all(xil::mul(p, p));
    };
    REQUIRE(xil::grad_check(f_perm, x, 1e-5) < 1e-4);

    auto f_slice = [](const T& v) {
        auto s = xil::slice(v, 1, 1, 2);
        return xil::sum_all(xil::mul(s, s));
    };
    REQUIRE(xil::grad_check(f_slice, x, 1e-5) < 1e-4);

    auto f_cat = [](const T& v) {
        auto c = xil::concat(std::vector<T>{v, v}, 1);
        return xil::sum_all(xil::mul(c, c));
    };
    REQUIRE(xil::grad_check(f_cat, x, 1e-5) < 1e-4);

    // permute values
    auto p = xil::permute(T::from({2, 2}, {1, 2, 3, 4}), {1, 0});
    REQUIRE(p.raw() == std::vector<double>{1, 3, 2, 4});
}

TEST_CASE("embedding gradient scatters to looked-up rows only") {
    auto table = T::from({3, 2}, {1, 2, 3, 4, 5, 6});
    table.set_requires_grad(true);

    auto row = xil::embedding_rows(table, {2});
    REQUIRE(row.raw() == std::vector<double>{5, 6});

    xil::Tape<double> tape;
    {
        xil::TapeScope<double> scope(tape);
        tape.backward(xil::sum_all(xil::embedding_rows(table, {2})));
    }
    REQUIRE(tape.grad(table).raw() == std::vector<double>{0, 0, 0, 0, 1, 1});

    // two lookups of the same id accumulate
    xil::Tape<double> tape2;
    {
        xil::TapeScope<double> scope(tape2);
        auto both = xil::add(xil::embedding_rows(table, {1}), xil::embedding_rows(table, {1}));
        tape2.backward(xil::sum_all(both));
    }
    REQUIRE(tape2.grad(table).raw() == std::vector<double>{0, 0, 2, 2, 0, 0});

    REQUIRE_THROWS_AS(xil::embedding_rows(table, {3}), xil::UsageError);
}

TEST_CASE("clip passes gradient only strictly inside the interval") {
    auto x = T::from({3}, {-2.0, 0.3, 2.0});
    x.set_requires_grad(true);
    xil::Tape<double> tape;
    {
        xil::TapeScope<double> scope(tape);
        tape.backward(xil::sum_all(xil::clip(x, -1.0, 1.0)));
    }
    REQUIRE(tape.grad(x).raw() == std::vector<double>{0, 1, 0});
}

TEST_CASE("causal depthwise conv matches direct convolution") {
    xil::Rng rng(53);
    auto x = T::randn({2, 6, 3}, rng);
    auto w = T::randn({3, 4}, rng);
    auto b = T::randn({3}, rng);
    auto y = xil::causal_depthwise_conv1d(x, w, b);

    for (int bi = 0; bi < 2; ++bi) {
        for (int t = 0; t < 6; ++t) {
            for (int c = 0; c < 3; ++c) {
                double acc = b.at(c);
                for (int j = 0; j <= std::min(3, t); ++j) acc += w.at(c * 4 + j) * x.at((bi * 6 + t - j) * 3 + c);
                REQUIRE(y.at((bi * 6 + t) * 3 + c) == Catch::Approx(acc).margin(1e-12));
            }
        }
    }

    auto f = [&](const T& v) {
        auto o = xil::causal_depthwise_conv1d(v, w, b);
        return xil::sum_all(xil::mul(o, o));
    };
    REQUIRE(xil::grad_check(f, x, 1e-5) < 1e-4);
    auto fw = [&](const T& v) {
        auto o = xil::causal_depthwise_conv1d(x, v, b);
        return xil::sum_all(xil::mul(o, o));
    };
    REQUIRE(xil::grad_check(fw, w, 1e-5) < 1e-4);
}

TEST_CASE("reductions are bitwise deterministic across runs") {
    xil::Rng rng1(99), rng2(99);
    auto a1 = T::randn({64, 17}, rng1);
    auto a2 = T::randn({64, 17}, rng2);
    REQUIRE(a1.raw() == a2.raw());
    REQUIRE(xil::sum_all(a1).at(0) == xil::sum_all(a2).at(0));
    auto s1 = xil::softmax(a1, -1), s2 = xil::softmax(a2, -1);
    REQUIRE(s1.raw() == s2.raw());
    auto m1 = xil::matmul(a1, xil::transpose_last2(a1));
    auto m2 = xil::matmul(a2, xil::transpose_last2(a2));
    REQUIRE(m1.raw() == m2.raw());
}

TEST_CASE("max_axis breaks ties toward the lowest index") {
    auto x = T::from({4}, {1.0, 3.0, 3.0, 2.0});
    x.set_requires_grad(true);
    xil::Tape<double> tape;
    {
        xil::TapeScope<double> scope(tape);
        tape.backward(xil::sum_all(xil::max_axis(x, 0)));
    }
    REQUIRE(tape.grad(x).raw() == std::vector<double>{0, 1, 0, 0});
}
