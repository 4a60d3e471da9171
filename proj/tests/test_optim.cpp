#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "neti/optim.hpp"
#include "neti/rng.hpp"
#include "neti/tensor.hpp"

using neti::Adam;
using neti::Rng;
using neti::Tensor;

TEST_CASE("first step moves by about lr in the gradient direction") {
    Tensor<double> p = Tensor<double>::zeros(1, 4);
    p.ensure_grad();
    p.grad = {0.5, -2.0, 1e-3, 7.0};
    Adam<double> opt({&p});
    opt.step(0.01);
    // bias-corrected first step: lr * g / (|g| + eps) ~= lr * sign(g)
    CHECK(p.data[0] == doctest::Approx(-0.01).epsilon(1e-5));
    CHECK(p.data[1] == doctest::Approx(0.01).epsilon(1e-5));
    CHECK(p.data[2] == doctest::Approx(-0.01).epsilon(1e-4));
    CHECK(p.data[3] == doctest::Approx(-0.01).epsilon(1e-5));
    CHECK(opt.steps_taken() == 1);
}

TEST_CASE("step with no accumulated gradient leaves fresh params unchanged") {
    Tensor<double> p = Tensor<double>::full(2, 2, 1.5);
    Adam<double> opt({&p});
    opt.step(0.1);
    for (double v : p.data) {
        CHECK(v == 1.5);
    }
}

TEST_CASE("momentum keeps decaying when gradients go quiet") {
    Tensor<double> p = Tensor<double>::zeros(1, 1);
    Adam<double> opt({&p});
    p.ensure_grad();
    p.grad[0] = 1.0;
    opt.step(0.01);
    const double after_one = p.data[0];
    p.zero_grad();
    double prev_delta = std::abs(after_one);
    double prev = after_one;
    for (int i = 0; i < 5; ++i) {
        opt.step(0.01);
        const double delta = std::abs(p.data[0] - prev);
        CHECK(delta < prev_delta + 1e-12); // update magnitude shrinks
        prev_delta = delta;
        prev = p.data[0];
    }
}

TEST_CASE("adam converges on a quadratic") {
    Rng rng(8);
    Tensor<double> p = Tensor<double>::randn(1, 8, rng);
    Tensor<double> target = Tensor<double>::randn(1, 8, rng);
    Adam<double> opt({&p});
    for (int it = 0; it < 2000; ++it) {
        p.zero_grad();
        p.ensure_grad();
        for (int j = 0; j < 8; ++j) {
            p.grad[j] = 2.0 * (p.data[j] - target.data[j]);
        }
        opt.step(0.05);
    }
    for (int j = 0; j < 8; ++j) {
        CHECK(p.data[j] == doctest::Approx(target.data[j]).epsilon(1e-4));
    }
}

TEST_CASE("changing a parameter size between steps raises") {
    Tensor<double> p = Tensor<double>::zeros(1, 4);
    Adam<double> opt({&p});
    p = Tensor<double>::zeros(1, 5);
    p.ensure_grad();
    CHECK_THROWS(opt.step(0.01));
}

TEST_CASE("two identically seeded runs produce identical trajectories") {
    auto run = [](uint64_t seed) {
        Rng rng(seed);
        Tensor<float> p = Tensor<float>::randn(3, 3, rng);
        Adam<float> opt({&p});
        for (int it = 0; it < 50; ++it) {
            p.zero_grad();
            p.ensure_grad();
            for (size_t j = 0; j < p.numel(); ++j) {
                p.grad[j] = static_cast<float>(rng.normal());
            }
            opt.step(0.004);
        }
        return p.data;
    };
    const auto a = run(123);
    const auto b = run(123);
    CHECK(a == b);
}
