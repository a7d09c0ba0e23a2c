#include "omnidistill/model.hpp"
#include "omnidistill/verification.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace omnidistill;
using Catch::Approx;

namespace {

std::vector<Vector> random_raw(const std::vector<int>& dims, CounterRng& rng) {
    std::vector<Vector> raw;
    for (int d : dims) {
        Vector x(d);
        for (int j = 0; j < d; ++j) x[j] = rng.next_normal();
        raw.push_back(x.normalized());
    }
    return raw;
}

}  // namespace

TEST_CASE("forward with identity heads and scale invariance", "[model]") {
    model::ProjectionHeads heads;
    heads.weights = {Matrix::Identity(4, 4), Matrix::Identity(4, 4)};
    CounterRng rng(3, 0);
    auto raw = random_raw({4, 4}, rng);

    auto z = model::forward(heads, raw);
    CHECK((z.rows.row(0).transpose() - raw[0]).norm() <= 1e-12);
    CHECK((z.rows.row(1).transpose() - raw[1]).norm() <= 1e-12);

    heads.weights[0] *= 2.0;
    auto z2 = model::forward(heads, raw);
    CHECK((z2.rows - z.rows).norm() <= 1e-12);

    CounterRng rng2(5, 0);
    auto heads3 = model::ProjectionHeads::seeded_init(6, {9, 7}, rng2);
    auto raw3 = random_raw({9, 7}, rng2);
    auto z3 = model::forward(heads3, raw3);
    for (int m = 0; m < 2; ++m) CHECK(std::abs(z3.rows.row(m).norm() - 1.0) <= 1e-12);

    heads3.weights[1] *= 3.7;
    CHECK((model::forward(heads3, raw3).rows - z3.rows).norm() <= 1e-12);
}

TEST_CASE("forward rejects vanishing pre-normalization outputs", "[model]") {
    model::ProjectionHeads heads;
    heads.weights = {Matrix::Zero(4, 4), Matrix::Identity(4, 4)};
    CounterRng rng(7, 0);
    CHECK_THROWS_AS(model::forward(heads, random_raw({4, 4}, rng)), NumericError);
}

TEST_CASE("backward projects out the parallel component", "[model]") {
    CounterRng rng(11, 0);
    auto heads = model::ProjectionHeads::seeded_init(5, {6, 8}, rng);
    auto raw = random_raw({6, 8}, rng);
    auto z = model::forward(heads, raw);

    // upstream parallel to z_m gets annihilated by the normalization Jacobian
    Matrix upstream = Matrix::Zero(2, 5);
    upstream.row(0) = 3.0 * z.rows.row(0);
    auto grads = model::backward(heads, raw, upstream);
    CHECK(grads[0].norm() <= 1e-12);
    CHECK(grads[1].norm() <= 1e-12);

    // zero upstream, zero gradient
    auto zero = model::backward(heads, raw, Matrix::Zero(2, 5));
    CHECK(zero[0].norm() == 0.0);
    CHECK(zero[1].norm() == 0.0);
}

TEST_CASE("backward matches finite differences", "[model]") {
    CounterRng rng(13, 0);
    for (int trial = 0; trial < 10; ++trial) {
        auto heads = model::ProjectionHeads::seeded_init(5, {6, 8}, rng);
        auto raw = random_raw({6, 8}, rng);
        Matrix upstream(2, 5);
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 5; ++j) upstream(i, j) = rng.next_normal();
        auto grads = model::backward(heads, raw, upstream);
        for (int m = 0; m < 2; ++m) {
            auto eval_loss = [&]() {
                return (upstream.array() * model::forward(heads, raw).rows.array()).sum();
            };
            CHECK(verification::detail::fd_max_rel(heads.weights[m], grads[m], eval_loss) <= 1e-5);
        }
    }
}

TEST_CASE("sgd step arithmetic and momentum recurrence", "[model]") {
    model::ProjectionHeads theta;
    theta.weights = {Matrix::Constant(1, 1, 1.0)};

    SECTION("zero gradient leaves parameters unchanged") {
        auto state = model::SgdState::make(theta, 0.01, 0.0);
        auto next = model::sgd_step(theta, {Matrix::Zero(1, 1)}, state);
        CHECK(next.weights[0](0, 0) == 1.0);
    }

    SECTION("plain step") {
        auto state = model::SgdState::make(theta, 0.01, 0.0);
        auto next = model::sgd_step(theta, {Matrix::Constant(1, 1, 1.0)}, state);
        CHECK(next.weights[0](0, 0) == Approx(0.99).margin(1e-15));
    }

    SECTION("momentum 0.5 accumulates: drops by eta then 1.5 eta") {
        auto state = model::SgdState::make(theta, 0.01, 0.5);
        auto first = model::sgd_step(theta, {Matrix::Constant(1, 1, 1.0)}, state);
        CHECK(first.weights[0](0, 0) == Approx(1.0 - 0.01).margin(1e-15));
        auto second = model::sgd_step(first, {Matrix::Constant(1, 1, 1.0)}, state);
        CHECK(second.weights[0](0, 0) == Approx(1.0 - 0.01 - 0.015).margin(1e-15));
    }

    SECTION("momentum-0 step is affine in the gradient") {
        CounterRng rng(17, 0);
        auto heads = model::ProjectionHeads::seeded_init(3, {4}, rng);
        Matrix g1(3, 4), g2(3, 4);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 4; ++j) {
                g1(i, j) = rng.next_normal();
                g2(i, j) = rng.next_normal();
            }
        const double a = 0.3, b = -1.7, eta = 0.05;
        auto s1 = model::SgdState::make(heads, eta, 0.0);
        auto combined = model::sgd_step(heads, {a * g1 + b * g2}, s1);
        CHECK((combined.weights[0] - (heads.weights[0] - eta * (a * g1 + b * g2))).norm() <= 1e-15);
    }

    SECTION("non-finite gradient is rejected") {
        auto state = model::SgdState::make(theta, 0.01, 0.0);
        Matrix bad = Matrix::Constant(1, 1, std::numeric_limits<double>::quiet_NaN());
        CHECK_THROWS_AS(model::sgd_step(theta, {bad}, state), NumericError);
    }
}

TEST_CASE("parameter distance", "[model]") {
    model::ProjectionHeads a, b;
    a.weights = {Matrix::Constant(1, 1, 1.0)};
    b.weights = {Matrix::Constant(1, 1, 3.0)};
    CHECK(model::param_distance(a, a).total == 0.0);
    CHECK(model::param_distance(a, b).total == Approx(4.0));
    CHECK(model::param_distance(a, b).per_modality[0] == Approx(4.0));

    CounterRng rng(19, 0);
    auto x = model::ProjectionHeads::seeded_init(4, {5, 6}, rng);
    auto y = model::ProjectionHeads::seeded_init(4, {5, 6}, rng);
    auto d = model::param_distance(x, y);
    double oracle = 0.0;  // elementwise recomputation
    for (int m = 0; m < 2; ++m)
        for (Eigen::Index i = 0; i < x.weights[m].rows(); ++i)
            for (Eigen::Index j = 0; j < x.weights[m].cols(); ++j) {
                const double diff = x.weights[m](i, j) - y.weights[m](i, j);
                oracle += diff * diff;
            }
    CHECK(d.total == Approx(oracle).margin(1e-14));

    model::ProjectionHeads mismatched;
    mismatched.weights = {Matrix::Zero(4, 5)};
    CHECK_THROWS_AS(model::param_distance(x, mismatched), DimensionError);
}
