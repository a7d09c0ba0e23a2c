#include "omnidistill/spectral.hpp"
#include "omnidistill/verification.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace omnidistill;
using spectral::EmbeddingMatrix;
using Catch::Approx;

namespace {

EmbeddingMatrix rows_all_e1() {
    Matrix m = Matrix::Zero(3, 4);
    m(0, 0) = m(1, 0) = m(2, 0) = 1.0;
    return EmbeddingMatrix::checked(m);
}

EmbeddingMatrix rows_e1_e2_e3() {
    Matrix m = Matrix::Zero(3, 4);
    m(0, 0) = m(1, 1) = m(2, 2) = 1.0;
    return EmbeddingMatrix::checked(m);
}

EmbeddingMatrix rows_e1_e1_e2() {
    Matrix m = Matrix::Zero(3, 4);
    m(0, 0) = m(1, 0) = m(2, 1) = 1.0;
    return EmbeddingMatrix::checked(m);
}

}  // namespace

TEST_CASE("gram of identical, orthonormal and block-structured rows", "[spectral]") {
    CHECK(spectral::gram(rows_all_e1()).isApprox(Matrix::Ones(3, 3), 1e-15));
    CHECK(spectral::gram(rows_e1_e2_e3()).isApprox(Matrix::Identity(3, 3), 1e-15));

    Matrix expected(3, 3);
    expected << 1, 1, 0, 1, 1, 0, 0, 0, 1;
    CHECK(spectral::gram(rows_e1_e1_e2()).isApprox(expected, 1e-15));
}

TEST_CASE("embedding matrix validation", "[spectral]") {
    CHECK_THROWS_AS(EmbeddingMatrix::checked(Matrix::Identity(1, 4)), DimensionError);
    CHECK_THROWS_AS(EmbeddingMatrix::checked(Matrix::Identity(4, 3)), DimensionError);
    Matrix bad = Matrix::Zero(2, 4);
    bad(0, 0) = 1.0;
    bad(1, 0) = 0.5;  // not unit norm
    CHECK_THROWS_AS(EmbeddingMatrix::checked(bad), NumericError);
}

TEST_CASE("spectrum of identical rows", "[spectral]") {
    auto s = spectral::spectrum(rows_all_e1());
    CHECK(s.eigenvalues[0] == Approx(3.0).margin(1e-12));
    CHECK(s.eigenvalues[1] == Approx(0.0).margin(1e-12));
    CHECK(s.eigenvalues[2] == Approx(0.0).margin(1e-12));
    CHECK(s.sigma1 == Approx(std::sqrt(3.0)).margin(1e-12));
    const double r = 1.0 / std::sqrt(3.0);
    for (int m = 0; m < 3; ++m) CHECK(s.left_vectors(m, 0) == Approx(r).margin(1e-12));
    CHECK(s.proxy[0] == Approx(1.0).margin(1e-12));
    CHECK(s.proxy.tail(3).norm() == Approx(0.0).margin(1e-12));
    CHECK_FALSE(s.degenerate);
}

TEST_CASE("spectrum of orthonormal rows is isotropic and degenerate", "[spectral]") {
    auto s = spectral::spectrum(rows_e1_e2_e3());
    for (int j = 0; j < 3; ++j) CHECK(s.eigenvalues[j] == Approx(1.0).margin(1e-12));
    CHECK(s.degenerate);
}

TEST_CASE("spectrum of (e1, e1, e2)", "[spectral]") {
    auto s = spectral::spectrum(rows_e1_e1_e2());
    CHECK(s.eigenvalues[0] == Approx(2.0).margin(1e-12));
    CHECK(s.eigenvalues[1] == Approx(1.0).margin(1e-12));
    CHECK(s.eigenvalues[2] == Approx(0.0).margin(1e-12));
    const double r = 1.0 / std::sqrt(2.0);
    CHECK(s.left_vectors(0, 0) == Approx(r).margin(1e-12));
    CHECK(s.left_vectors(1, 0) == Approx(r).margin(1e-12));
    CHECK(s.left_vectors(2, 0) == Approx(0.0).margin(1e-12));
    CHECK(s.proxy[0] == Approx(1.0).margin(1e-12));
}

TEST_CASE("spectrum matches a reference dense eigensolver on random instances", "[spectral]") {
    CounterRng rng(20250810, 1);
    for (int trial = 0; trial < 50; ++trial) {
        auto z = EmbeddingMatrix::checked(verification::random_unit_rows(3, 8, rng));
        auto s = spectral::spectrum(z);
        Eigen::SelfAdjointEigenSolver<Matrix> ref(spectral::gram(z));
        for (int j = 0; j < 3; ++j)
            CHECK(s.eigenvalues[j] == Approx(ref.eigenvalues()[2 - j]).margin(1e-10));
        // eigenvectors up to sign
        for (int j = 0; j < 3; ++j) {
            const double overlap = std::abs(s.left_vectors.col(j).dot(ref.eigenvectors().col(2 - j)));
            CHECK(overlap == Approx(1.0).margin(1e-9));
        }
    }
}

TEST_CASE("spectrum errors", "[spectral]") {
    CHECK_THROWS_AS(spectral::spectrum(rows_all_e1(), 0.0), NumericError);
    CHECK_THROWS_AS(spectral::spectrum(EmbeddingMatrix::unchecked(Matrix::Zero(3, 4))), NumericError);
    Matrix g(2, 2);
    g << 1, 0.5, 0.5, 1;
    CHECK_THROWS_AS(spectral::jacobi_eigen_sym(g, 0), NumericError);
    CHECK_THROWS_WITH(spectral::jacobi_eigen_sym(g, 0), Catch::Matchers::ContainsSubstring("0 sweeps"));
}

TEST_CASE("rank-1 approximation error", "[spectral]") {
    auto a = rows_all_e1();
    CHECK(spectral::rank1_approx(spectral::spectrum(a), spectral::gram(a)).frobenius_error ==
          Approx(0.0).margin(1e-12));
    auto b = rows_e1_e1_e2();
    CHECK(spectral::rank1_approx(spectral::spectrum(b), spectral::gram(b)).frobenius_error ==
          Approx(1.0).margin(1e-12));
    auto c = rows_e1_e2_e3();
    CHECK(spectral::rank1_approx(spectral::spectrum(c), spectral::gram(c)).frobenius_error ==
          Approx(std::sqrt(2.0)).margin(1e-12));
    // the approximation itself is PSD rank <= 1
    auto r = spectral::rank1_approx(spectral::spectrum(b), spectral::gram(b));
    Eigen::SelfAdjointEigenSolver<Matrix> eig(r.matrix);
    CHECK(eig.eigenvalues().minCoeff() >= -1e-12);
    int positive = 0;
    for (int j = 0; j < 3; ++j) positive += eig.eigenvalues()[j] > 1e-9 ? 1 : 0;
    CHECK(positive <= 1);
}

TEST_CASE("proxy similarity", "[spectral]") {
    Vector e1 = Vector::Zero(4), e2 = Vector::Zero(4);
    e1[0] = 1.0;
    e2[1] = 1.0;
    CHECK(spectral::proxy_similarity(e1, e1) == Approx(1.0));
    CHECK(spectral::proxy_similarity(e1, e2) == Approx(0.0).margin(1e-15));

    CounterRng rng(7, 2);
    for (int t = 0; t < 20; ++t) {
        Vector a(6), b(6);
        for (int i = 0; i < 6; ++i) {
            a[i] = rng.next_normal();
            b[i] = rng.next_normal();
        }
        a.normalize();
        b.normalize();
        long double acc = 0.0L;  // extended-precision dot oracle
        for (int i = 0; i < 6; ++i) acc += static_cast<long double>(a[i]) * static_cast<long double>(b[i]);
        CHECK(spectral::proxy_similarity(a, b) == Approx(static_cast<double>(acc)).margin(1e-14));
    }
    Vector big = 2.0 * e1;
    CHECK_THROWS_AS(spectral::proxy_similarity(big, e2), NumericError);
}

TEST_CASE("sigma gradient closed form and properties", "[spectral]") {
    Matrix g = spectral::sigma_gradient(rows_all_e1(), 0);
    const double r = 1.0 / std::sqrt(3.0);
    for (int m = 0; m < 3; ++m) {
        CHECK(g(m, 0) == Approx(r).margin(1e-12));
        CHECK(g.row(m).tail(3).norm() == Approx(0.0).margin(1e-12));
    }

    CounterRng rng(11, 3);
    for (int t = 0; t < 20; ++t) {
        auto z = verification::random_instance(3, 8, rng);
        CHECK(spectral::sigma_gradient(z, 0).norm() == Approx(1.0).margin(1e-10));
    }

    // degenerate spectrum refuses with a jitter hint
    CHECK_THROWS_WITH(spectral::sigma_gradient(rows_e1_e2_e3(), 0),
                      Catch::Matchers::ContainsSubstring("jitter"));
}

TEST_CASE("sigma gradient agrees with finite differences", "[spectral]") {
    CounterRng rng(13, 4);
    for (int t = 0; t < 25; ++t) {
        Matrix zm = verification::random_instance(3, 8, rng).rows;
        const Matrix analytic = spectral::sigma_gradient(spectral::EmbeddingMatrix::unchecked(zm), 0);
        const double worst = verification::detail::fd_max_rel(zm, analytic, [&]() {
            return spectral::spectrum(spectral::EmbeddingMatrix::unchecked(zm), 1e-12).sigma1;
        });
        CHECK(worst <= 1e-5);
    }
}

TEST_CASE("eigenvalue sum and duality residual on random instances", "[spectral]") {
    CounterRng rng(17, 5);
    for (int t = 0; t < 200; ++t) {
        auto z = EmbeddingMatrix::checked(verification::random_unit_rows(3, 8, rng));
        auto s = spectral::spectrum(z);
        CHECK(std::abs(s.eigenvalues.sum() - 3.0) <= 1e-8);
        CHECK(s.eigenvalues.minCoeff() >= -1e-10);
        CHECK((s.sigma1 * s.proxy - z.rows.transpose() * s.left_vectors.col(0)).norm() <= 1e-8);
        CHECK((s.left_vectors.transpose() * s.left_vectors - Matrix::Identity(3, 3)).norm() <= 1e-9);
    }
}

TEST_CASE("Eckart-Young probe", "[spectral]") {
    CounterRng rng(19, 6);
    for (int t = 0; t < 20; ++t) {
        auto z = EmbeddingMatrix::checked(verification::random_unit_rows(3, 8, rng));
        auto s = spectral::spectrum(z);
        const Matrix g = spectral::gram(z);
        const double best = (g - spectral::rank1_approx(s, g).matrix).norm();
        for (int c = 0; c < 500; ++c) {
            Vector a(3);
            for (int i = 0; i < 3; ++i) a[i] = rng.next_normal();
            a.normalize();
            const double cand = (g - rng.next_uniform(0.0, 3.0) * a * a.transpose()).norm();
            CHECK(best <= cand + 1e-10);
        }
    }
}

TEST_CASE("sign convention is stable under tiny perturbations", "[spectral]") {
    CounterRng rng(23, 7);
    int tested = 0;
    while (tested < 50) {
        auto z = EmbeddingMatrix::checked(verification::random_unit_rows(3, 8, rng));
        auto s = spectral::spectrum(z);
        if (std::abs(s.left_vectors.col(0).sum()) <= 1e-4) continue;
        Matrix perturbed = z.rows;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 8; ++j) perturbed(i, j) += 1e-8 * rng.next_uniform(-1.0, 1.0);
        auto s2 = spectral::spectrum(EmbeddingMatrix::unchecked(perturbed));
        CHECK(s.left_vectors.col(0).dot(s2.left_vectors.col(0)) > 0.0);
        ++tested;
    }
}

TEST_CASE("jitter escapes degeneracy deterministically", "[spectral]") {
    auto z = rows_e1_e2_e3();
    CounterRng a(5, 0), b(5, 0);
    auto j1 = spectral::jittered(z, a);
    auto j2 = spectral::jittered(z, b);
    CHECK(j1.rows == j2.rows);
    CHECK((j1.rows - z.rows).norm() > 0.0);
    CHECK((j1.rows - z.rows).norm() < 1e-5);
    for (int i = 0; i < 3; ++i) CHECK(std::abs(j1.rows.row(i).norm() - 1.0) <= 1e-12);
}
