// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "peerkd/tensor.hpp"
#include "testutil.hpp"

using namespace peerkd;
using namespace peerkd::test;

TEST_CASE("matmul identity and hand arithmetic") {
    Tensor eye(Shape{2, 2}, {1, 0, 0, 1});
    Tensor a(Shape{2, 2}, {1, 2, 3, 4});
    Tensor r = matmul(eye, a);
    CHECK(r.values()[0] == 1.0);
    CHECK(r.values()[1] == 2.0);
    CHECK(r.values()[2] == 3.0);
    CHECK(r.values()[3] == 4.0);

    Tensor row(Shape{1, 2}, {1, 2});
    Tensor col(Shape{2, 1}, {3, 4});
    CHECK(matmul(row, col).item() == doctest::Approx(11.0).epsilon(1e-15)); // 1*3 + 2*4

    CHECK_THROWS_AS(matmul(row, row), ShapeError);
    try {
        matmul(row, row);
    } catch (const ShapeError& e) {
        // the message names both shapes
        CHECK(std::string(e.what()).find("[1 2]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient matches central finite differences") {
    Rng rng(7);
    Tensor a(Shape{3, 4}, random_vector(12, rng));
    Tensor b(Shape{4, 2}, random_vector(8, rng));
    a.set_requires_grad(true);
    b.set_requires_grad(true);

    auto loss_value = [&] { return sum(matmul(a, b)).item(); };
    Tensor loss = sum(matmul(a, b));
    backward(loss);

    CHECK(fd_check(a, a.grad(), loss_value) < 1e-6);
    CHECK(fd_check(b, b.grad(), loss_value) < 1e-6);
}

TEST_CASE("conv2d identity, hand case, and finite differences") {
    SUBCASE("1x1 kernel of value 1 is the identity") {
        Rng rng(3);
        Tensor x(Shape{1, 1, 3, 3}, random_vector(9, rng));
        Tensor k(Shape{1, 1, 1, 1}, {1.0});
        Tensor y = conv2d(x, k, 1, 0);
        for (size_t i = 0; i < 9; ++i) CHECK(y.values()[i] == x.values()[i]);
    }
    SUBCASE("2x2 ones kernel over [[1,2],[3,4]] gives 10") {
        Tensor x(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
        Tensor k(Shape{1, 1, 2, 2}, {1, 1, 1, 1});
        Tensor y = conv2d(x, k, 1, 0);
        CHECK(y.shape() == Shape{1, 1, 1, 1});
        CHECK(y.values()[0] == doctest::Approx(10.0).epsilon(1e-15));
    }
    SUBCASE("kernel larger than padded input is a dimension error") {
        Tensor x(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
        Tensor k(Shape{1, 1, 5, 5}, std::vector<double>(25, 1.0));
        CHECK_THROWS_AS(conv2d(x, k, 1, 0), ShapeError);
    }
    SUBCASE("gradients vs finite differences on a 1x2x5x5 input") {
        Rng rng(11);
        Tensor x(Shape{1, 2, 5, 5}, random_vector(50, rng));
        Tensor k(Shape{3, 2, 3, 3}, random_vector(54, rng));
        x.set_requires_grad(true);
        k.set_requires_grad(true);
        auto loss_value = [&] { return sum(conv2d(x, k, 2, 1)).item(); };
        backward(sum(conv2d(x, k, 2, 1)));
        CHECK(fd_check(x, x.grad(), loss_value) < 1e-5);
        CHECK(fd_check(k, k.grad(), loss_value) < 1e-5);
    }
}

TEST_CASE("log_softmax values, stability and normalization") {
    SUBCASE("uniform logits give -ln(C)") {
        Tensor z(Shape{1, 3}, {0, 0, 0});
        Tensor y = log_softmax(z);
        for (int j = 0; j < 3; ++j)
            CHECK(y.values()[j] == doctest::Approx(-std::log(3.0)).epsilon(1e-14));
    }
    SUBCASE("closed form for [1,0]") {
        Tensor z(Shape{1, 2}, {1, 0});
        Tensor y = log_softmax(z);
        const double expected = 1.0 - std::log(std::exp(1.0) + 1.0);
        CHECK(y.values()[0] == doctest::Approx(expected).epsilon(1e-12));
        CHECK(y.values()[1] == doctest::Approx(expected - 1.0).epsilon(1e-12));
        CHECK(y.values()[0] == doctest::Approx(-0.313262).epsilon(1e-6));
    }
    SUBCASE("rows exponentiate to 1 for logits up to magnitude 500") {
        Rng rng(5);
        for (int rep = 0; rep < 20; ++rep) {
            Tensor z(Shape{4, 6}, random_vector(24, rng, -500.0, 500.0));
            Tensor y = log_softmax(z);
            for (int i = 0; i < 4; ++i) {
                double s = 0.0;
                for (int j = 0; j < 6; ++j) s += std::exp(y.values()[i * 6 + j]);
                CHECK(std::abs(s - 1.0) < 1e-12);
            }
        }
    }
    SUBCASE("single-class input is rejected") {
        Tensor z(Shape{1, 1}, {0.0});
        CHECK_THROWS_AS(log_softmax(z), ContractError);
    }
}

TEST_CASE("backward basics") {
    SUBCASE("grad of sum is all ones") {
        Tensor w(Shape{2, 3}, {1, 2, 3, 4, 5, 6}, true);
        backward(sum(w));
        for (double g : w.grad()) CHECK(g == 1.0);
    }
    SUBCASE("grad of sum(w^2)/2 is w") {
        Tensor w(Shape{3}, {1, -2, 3}, true);
        backward(scale(sum(mul(w, w)), 0.5));
        CHECK(w.grad()[0] == doctest::Approx(1.0));
        CHECK(w.grad()[1] == doctest::Approx(-2.0));
        CHECK(w.grad()[2] == doctest::Approx(3.0));
    }
    SUBCASE("non-scalar loss is rejected") {
        Tensor w(Shape{2}, {1, 2}, true);
        CHECK_THROWS_AS(backward(w), ContractError);
    }
    SUBCASE("fan-out accumulates additively") {
        Tensor w(Shape{2}, {1.0, 2.0}, true);
        Tensor a = scale(w, 3.0);
        Tensor b = scale(w, 4.0);
        backward(add(sum(a), sum(b)));
        CHECK(w.grad()[0] == doctest::Approx(7.0).epsilon(1e-15));
        CHECK(w.grad()[1] == doctest::Approx(7.0).epsilon(1e-15));
    }
    SUBCASE("two backward passes accumulate into leaf grads") {
        Tensor w(Shape{2}, {1.0, 2.0}, true);
        backward(sum(w));
        backward(sum(w));
        CHECK(w.grad()[0] == 2.0);
        w.zero_grad();
        CHECK_FALSE(w.has_grad());
    }
}

TEST_CASE("elementwise ops match finite differences on random inputs") {
    Rng rng(23);
    auto run = [&](auto make_loss, Tensor& p) {
        p.set_requires_grad(true);
        auto loss_value = [&] { return make_loss().item(); };
        backward(make_loss());
        const double err = fd_check(p, p.grad(), loss_value);
        p.zero_grad();
        return err;
    };

    SUBCASE("relu (inputs kept away from the kink)") {
        std::vector<double> v = random_vector(12, rng);
        for (double& x : v)
            if (std::abs(x) < 1e-3) x = 0.5;
        Tensor p(Shape{3, 4}, v);
        CHECK(run([&] { return sum(mul(relu(p), p)); }, p) < 1e-4);
    }
    SUBCASE("exp") {
        Tensor p(Shape{2, 3}, random_vector(6, rng));
        CHECK(run([&] { return mean(exp(p)); }, p) < 1e-4);
    }
    SUBCASE("add/sub/mul/scale chain") {
        Tensor p(Shape{4}, random_vector(4, rng));
        Tensor c(Shape{4}, random_vector(4, rng));
        CHECK(run([&] { return sum(mul(add(p, c), sub(scale(p, 2.0), c))); }, p) < 1e-4);
    }
    SUBCASE("log_softmax") {
        Tensor p(Shape{3, 5}, random_vector(15, rng));
        Tensor w(Shape{3, 5}, random_vector(15, rng));
        CHECK(run([&] { return sum(mul(log_softmax(p), w)); }, p) < 1e-4);
    }
    SUBCASE("add_row_vector bias") {
        Tensor x(Shape{3, 4}, random_vector(12, rng));
        Tensor b(Shape{4}, random_vector(4, rng));
        CHECK(run([&] { return sum(mul(add_row_vector(x, b), x)); }, b) < 1e-4);
    }
    SUBCASE("add_channel_vector bias") {
        Tensor x(Shape{2, 3, 2, 2}, random_vector(24, rng));
        Tensor b(Shape{3}, random_vector(3, rng));
        CHECK(run([&] { return sum(mul(add_channel_vector(x, b), x)); }, b) < 1e-4);
    }
    SUBCASE("global_avg_pool") {
        Tensor x(Shape{2, 3, 4, 4}, random_vector(96, rng));
        Tensor w(Shape{2, 3}, random_vector(6, rng));
        CHECK(run([&] { return sum(mul(global_avg_pool(x), w)); }, x) < 1e-4);
    }
    SUBCASE("concat_columns") {
        Tensor a(Shape{3, 2}, random_vector(6, rng));
        Tensor b(Shape{3, 4}, random_vector(12, rng));
        Tensor w(Shape{3, 6}, random_vector(18, rng));
        std::vector<Tensor> parts{a, b};
        CHECK(run([&] { return sum(mul(concat_columns(parts), w)); }, a) < 1e-4);
        a.set_requires_grad(false);
        CHECK(run([&] { return sum(mul(concat_columns(parts), w)); }, b) < 1e-4);
    }
    SUBCASE("flatten_rows") {
        Tensor x(Shape{2, 2, 3}, random_vector(12, rng));
        Tensor w(Shape{2, 6}, random_vector(12, rng));
        CHECK(run([&] { return sum(mul(flatten_rows(x), w)); }, x) < 1e-4);
    }
    SUBCASE("clamp_min away from threshold") {
        Tensor x(Shape{5}, {0.5, -1.5, 2.0, -0.4, 1.2});
        Tensor w(Shape{5}, random_vector(5, rng));
        CHECK(run([&] { return sum(mul(clamp_min(x, -1.0), w)); }, x) < 1e-4);
    }
}

TEST_CASE("batch_norm forward/backward") {
    Rng rng(31);
    SUBCASE("training mode gradient vs finite differences") {
        Tensor x(Shape{4, 3}, random_vector(12, rng));
        Tensor gamma(Shape{3}, {1.2, 0.8, 1.0});
        Tensor beta(Shape{3}, {0.1, -0.2, 0.0});
        Tensor w(Shape{4, 3}, random_vector(12, rng));
        x.set_requires_grad(true);
        gamma.set_requires_grad(true);
        beta.set_requires_grad(true);
        auto loss_value = [&] {
            Tensor rm(Shape{3}, 0.0), rv(Shape{3}, 1.0);
            return sum(mul(batch_norm(x, gamma, beta, rm, rv, true), w)).item();
        };
        {
            Tensor rm(Shape{3}, 0.0), rv(Shape{3}, 1.0);
            backward(sum(mul(batch_norm(x, gamma, beta, rm, rv, true), w)));
        }
        CHECK(fd_check(x, x.grad(), loss_value) < 1e-4);
        CHECK(fd_check(gamma, gamma.grad(), loss_value) < 1e-4);
        CHECK(fd_check(beta, beta.grad(), loss_value) < 1e-4);
    }
    SUBCASE("4-d training gradient vs finite differences") {
        Tensor x(Shape{2, 2, 3, 3}, random_vector(36, rng));
        Tensor gamma(Shape{2}, {1.0, 1.3});
        Tensor beta(Shape{2}, {0.0, 0.2});
        Tensor w(Shape{2, 2, 3, 3}, random_vector(36, rng));
        x.set_requires_grad(true);
        auto loss_value = [&] {
            Tensor rm(Shape{2}, 0.0), rv(Shape{2}, 1.0);
            return sum(mul(batch_norm(x, gamma, beta, rm, rv, true), w)).item();
        };
        {
            Tensor rm(Shape{2}, 0.0), rv(Shape{2}, 1.0);
            backward(sum(mul(batch_norm(x, gamma, beta, rm, rv, true), w)));
        }
        CHECK(fd_check(x, x.grad(), loss_value) < 1e-4);
    }
    SUBCASE("eval mode with unit stats and identity affine is near-identity") {
        Tensor x(Shape{3, 2}, random_vector(6, rng));
        Tensor gamma(Shape{2}, 1.0), beta(Shape{2}, 0.0);
        Tensor rm(Shape{2}, 0.0), rv(Shape{2}, 1.0);
        Tensor y = batch_norm(x, gamma, beta, rm, rv, false);
        for (int i = 0; i < 6; ++i)
            CHECK(y.values()[i] == doctest::Approx(x.values()[i]).epsilon(1e-4));
    }
    SUBCASE("running buffers update with momentum 0.1") {
        Tensor x(Shape{2, 1}, {1.0, 3.0});
        Tensor gamma(Shape{1}, 1.0), beta(Shape{1}, 0.0);
        Tensor rm(Shape{1}, 0.0), rv(Shape{1}, 1.0);
        batch_norm(x, gamma, beta, rm, rv, true);
        CHECK(rm.values()[0] == doctest::Approx(0.1 * 2.0).epsilon(1e-12)); // batch mean 2
        CHECK(rv.values()[0] == doctest::Approx(0.9 + 0.1 * 2.0).epsilon(1e-12)); // unbiased var 2
    }
}

TEST_CASE("no-grad mode and detach record nothing") {
    Tensor w(Shape{2}, {1.0, 2.0}, true);
    {
        NoGradGuard ng;
        Tensor y = scale(w, 2.0);
        CHECK_FALSE(y.requires_grad());
    }
    Tensor d = detach(scale(w, 2.0));
    CHECK_FALSE(d.requires_grad());
    Tensor loss = sum(mul(d, d));
    CHECK_FALSE(loss.requires_grad());
}

TEST_CASE("forward determinism: identical inputs give bitwise-identical outputs") {
    Rng rng(77);
    std::vector<double> base = random_vector(24, rng);
    auto run_once = [&] {
        Tensor x(Shape{4, 6}, base, true);
        Tensor y = log_softmax(scale(relu(x), 1.7));
        backward(sum(mul(y, y)));
        std::vector<double> out(y.values().begin(), y.values().end());
        out.insert(out.end(), x.grad().begin(), x.grad().end());
        return out;
    };
    auto a = run_once();
    auto b = run_once();
    CHECK(a == b);
}
