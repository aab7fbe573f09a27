#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "feddf/numerics.hpp"

using namespace feddf;

namespace {

Vector vec(std::initializer_list<Scalar> v) {
    Vector out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (Scalar x : v) out[i++] = x;
    return out;
}

}  // namespace

TEST_CASE("softmax of equal logits is uniform") {
    const Vector p = softmax(vec({0, 0, 0}));
    for (Eigen::Index i = 0; i < 3; ++i) CHECK(p[i] == doctest::Approx(1.0 / 3).epsilon(1e-15));
}

TEST_CASE("softmax is shift invariant") {
    const Vector a = softmax(vec({0.0, 0.7, 1.4}));
    for (Scalar x : {-50.0, -1.0, 3.0, 700.0}) {
        const Vector b = softmax(vec({x, x + 0.7, x + 1.4}));
        CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("softmax of [0, ln 2] is [1/3, 2/3]") {
    const Vector p = softmax(vec({0, std::log(2.0)}));
    CHECK(p[0] == doctest::Approx(1.0 / 3).epsilon(1e-14));
    CHECK(p[1] == doctest::Approx(2.0 / 3).epsilon(1e-14));
}

TEST_CASE("softmax rejects non-finite logits") {
    CHECK_THROWS_AS(softmax(vec({0, std::numeric_limits<Scalar>::quiet_NaN()})), NumericError);
    CHECK_THROWS_AS(softmax(vec({std::numeric_limits<Scalar>::infinity(), 0})), NumericError);
}

TEST_CASE("softmax output is always a distribution") {
    std::mt19937_64 rng(3);
    std::normal_distribution<Scalar> n(0, 30);
    for (int t = 0; t < 500; ++t) {
        Vector z(1 + t % 9);
        for (auto& v : z) v = n(rng);
        const Vector p = softmax(z);
        CHECK(p.minCoeff() >= 0);
        CHECK(std::abs(p.sum() - 1) <= 1e-12);
    }
}

TEST_CASE("softmax_rows normalizes each row") {
    Matrix z(2, 3);
    z << 1, 2, 3, -1, 0, 1;
    const Matrix p = softmax_rows(z);
    CHECK((p.rowwise().sum().array() - 1).abs().maxCoeff() < 1e-15);
    CHECK((p.row(0) - p.row(1)).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("kl_div examples") {
    const Vector p = vec({0.2, 0.3, 0.5});
    CHECK(kl_div(p, p) == doctest::Approx(0).epsilon(1e-15));
    CHECK(kl_div(vec({1, 0}), vec({0.5, 0.5})) == doctest::Approx(std::numbers::ln2).epsilon(1e-15));
    CHECK_THROWS_AS(kl_div(vec({1, 0}), vec({0.5, 0.25, 0.25})), ShapeError);
}

TEST_CASE("kl_div clamps zero predictions") {
    const Scalar v = kl_div(vec({0.5, 0.5}), vec({1, 0}));
    CHECK(std::isfinite(v));
    CHECK(v == doctest::Approx(0.5 * std::log(0.5 / 1.0) + 0.5 * std::log(0.5 / kProbFloor)));
}

TEST_CASE("kl_div is nonnegative on random distributions") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<Scalar> u(0, 1);
    for (int t = 0; t < 1000; ++t) {
        Vector a(4);
        Vector b(4);
        for (int i = 0; i < 4; ++i) {
            a[i] = (t % 3 == 0 && i == 0) ? 0.0 : u(rng);
            b[i] = u(rng) + 1e-3;
        }
        a /= a.sum();
        b /= b.sum();
        CHECK(kl_div(a, b) >= -1e-12);
    }
}

TEST_CASE("kl_div_rows averages over rows") {
    Matrix t(2, 2);
    t << 1, 0, 0.5, 0.5;
    Matrix p(2, 2);
    p << 0.5, 0.5, 0.5, 0.5;
    CHECK(kl_div_rows(t, p) == doctest::Approx(std::numbers::ln2 / 2).epsilon(1e-15));
}

TEST_CASE("cross_entropy examples") {
    Matrix confident(1, 3);
    confident << 60, 0, 0;
    const std::vector<int> y0{0};
    CHECK(cross_entropy(y0, confident) < 1e-20);

    for (int c : {2, 3, 10}) {
        const Matrix uniform = Matrix::Constant(4, c, 1.7);
        const std::vector<int> y(4, c - 1);
        CHECK(std::abs(cross_entropy(y, uniform) - std::log(static_cast<Scalar>(c))) <= 1e-12);
    }

    Matrix two(2, 3);
    two << 1, 2, 3, 0.5, -1, 0;
    const std::vector<int> y{2, 0};
    const Scalar r0 = -std::log(softmax(two.row(0))[2]);
    const Scalar r1 = -std::log(softmax(two.row(1))[0]);
    CHECK(cross_entropy(y, two) == doctest::Approx((r0 + r1) / 2).epsilon(1e-14));
}

TEST_CASE("cross_entropy rejects out-of-range labels") {
    const Matrix z = Matrix::Zero(2, 3);
    const std::vector<int> bad{0, 3};
    CHECK_THROWS_AS(cross_entropy(bad, z), IndexError);
    const std::vector<int> neg{-1, 0};
    CHECK_THROWS_AS(cross_entropy(neg, z), IndexError);
}

TEST_CASE("logit gradients agree with finite differences") {
    std::mt19937_64 rng(5);
    std::normal_distribution<Scalar> n(0, 2);
    Matrix z(3, 4);
    for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = n(rng);
    const std::vector<int> y{1, 3, 0};
    Matrix target = softmax_rows(Matrix::Random(3, 4));

    const Matrix g_ce = cross_entropy_logit_grad(y, z);
    const Matrix g_kl = kl_logit_grad(target, z);
    const Scalar h = 1e-6;
    for (Eigen::Index i = 0; i < z.size(); ++i) {
        Matrix up = z;
        Matrix down = z;
        up.data()[i] += h;
        down.data()[i] -= h;
        const Scalar fd_ce = (cross_entropy(y, up) - cross_entropy(y, down)) / (2 * h);
        const Scalar fd_kl = (kl_div_rows(target, softmax_rows(up)) - kl_div_rows(target, softmax_rows(down))) / (2 * h);
        CHECK(g_ce.data()[i] == doctest::Approx(fd_ce).epsilon(1e-6));
        CHECK(g_kl.data()[i] == doctest::Approx(fd_kl).epsilon(1e-6));
    }
}

TEST_CASE("sgd step") {
    auto st = OptimizerState::sgd(0.1);
    Vector x = vec({1});
    opt_step(st, x, vec({1}));
    CHECK(x[0] == doctest::Approx(0.9).epsilon(1e-15));
    CHECK(st.step_count == 1);
}

TEST_CASE("first adam step moves each coordinate by about lr against the gradient sign") {
    for (Scalar c : {1e-3, 0.5, 7.0, 1e4}) {
        auto st = OptimizerState::adam_with(0.01, 2);
        Vector x = vec({2.0, -1.0});
        opt_step(st, x, vec({c, -c}));
        // m_hat = c, v_hat = c^2 at t = 1, so the step is lr * c / (c + eps).
        const Scalar expected = 0.01 * c / (c + 1e-8);
        CHECK(2.0 - x[0] == doctest::Approx(expected).epsilon(1e-12));
        CHECK(x[1] + 1.0 == doctest::Approx(expected).epsilon(1e-12));
    }
}

TEST_CASE("adam moments start at zero and step count advances by one") {
    auto st = OptimizerState::adam_with(0.1, 3);
    CHECK(st.m.isZero());
    CHECK(st.v.isZero());
    Vector x = Vector::Zero(3);
    for (int i = 1; i <= 4; ++i) {
        opt_step(st, x, Vector::Ones(3));
        CHECK(st.step_count == i);
    }
}

TEST_CASE("cosine schedule") {
    auto st = OptimizerState::adam_with(0.2, 1, LrSchedule::cosine, 100);
    CHECK(scheduled_lr(st, 0) == doctest::Approx(0.2));
    CHECK(scheduled_lr(st, 50) == doctest::Approx(0.1).epsilon(1e-14));
    CHECK(scheduled_lr(st, 100) == 0.0);
    CHECK(scheduled_lr(st, 250) == 0.0);
    CHECK(scheduled_lr(OptimizerState::sgd(0.3), 1000) == 0.3);
}

TEST_CASE("steps past the cosine horizon leave parameters unchanged") {
    auto st = OptimizerState::adam_with(0.1, 1, LrSchedule::cosine, 2);
    Vector x = vec({1});
    opt_step(st, x, vec({1}));
    opt_step(st, x, vec({1}));
    const Scalar after = x[0];
    opt_step(st, x, vec({1}));
    CHECK(x[0] == after);
}

TEST_CASE("opt_step is deterministic") {
    std::mt19937_64 rng(1);
    std::normal_distribution<Scalar> n;
    Vector g(16);
    Vector x0(16);
    for (int i = 0; i < 16; ++i) {
        g[i] = n(rng);
        x0[i] = n(rng);
    }
    auto a = OptimizerState::adam_with(1e-3, 16, LrSchedule::cosine, 10);
    auto b = a;
    Vector xa = x0;
    Vector xb = x0;
    for (int i = 0; i < 5; ++i) {
        opt_step(a, xa, g);
        opt_step(b, xb, g);
    }
    CHECK(xa == xb);
    CHECK(a.m == b.m);
    CHECK(a.v == b.v);
}

TEST_CASE("opt_step rejects mismatched lengths") {
    auto st = OptimizerState::sgd(0.1);
    Vector x = Vector::Zero(3);
    CHECK_THROWS_AS(opt_step(st, x, Vector::Zero(2)), ShapeError);
}
