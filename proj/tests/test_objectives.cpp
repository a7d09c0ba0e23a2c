#include "omnidistill/objectives.hpp"
#include "omnidistill/verification.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace omnidistill;
using Catch::Approx;
using objectives::LossConfig;
using objectives::SimilarityTargets;

namespace {

Vector unit(int d, int axis) {
    Vector v = Vector::Zero(d);
    v[axis] = 1.0;
    return v;
}

}  // namespace

TEST_CASE("modality loss closed forms", "[objectives]") {
    Vector uniform(3), aligned(3), partial(3);
    uniform << 1, 1, 1;
    aligned << std::sqrt(3.0), 0, 0;
    partial << std::sqrt(2.0), 1, 0;
    CHECK(objectives::modality_loss_value(uniform, 0.1) == Approx(std::log(3.0)).margin(1e-12));
    CHECK(objectives::modality_loss_value(aligned, 0.1) ==
          Approx(std::log1p(2.0 * std::exp(-10.0 * std::sqrt(3.0)))).margin(1e-12));
    // frozen from an extended-precision softmax oracle
    CHECK(objectives::modality_loss_value(partial, 0.1) == Approx(0.01576468569797356538).margin(1e-12));
}

TEST_CASE("modality loss is nonnegative and decreases along the alignment path", "[objectives]") {
    // interpolate rows from orthonormal (t=0) to identical (t=1)
    double prev = std::numeric_limits<double>::infinity();
    for (int step = 0; step <= 9; ++step) {
        const double t = 0.08 * step;  // stay short of exact degeneracy at both ends
        Matrix m = Matrix::Zero(3, 4);
        for (int i = 0; i < 3; ++i) {
            Vector a = (1.0 - t) * unit(4, i) + t * unit(4, 0);
            m.row(i) = a / a.norm();
        }
        auto s = spectral::spectrum(spectral::EmbeddingMatrix::checked(m), 1e-12);
        const double value = objectives::modality_loss_value(s.sigmas, 0.1);
        CHECK(value >= 0.0);
        CHECK(value <= prev + 1e-12);
        prev = value;
    }
}

TEST_CASE("wbce closed forms", "[objectives]") {
    LossConfig cfg;

    SECTION("single positive pair at full alignment") {
        Matrix t(1, 1);
        t << 1.0;
        auto r = objectives::wbce_loss(SimilarityTargets::raw(t), {unit(4, 0)}, cfg);
        CHECK(r.value == Approx(-std::log(1.0 / (1.0 + std::exp(-5.0)))).margin(1e-12));
        CHECK(r.empty_negative_group);
    }

    SECTION("orthogonal negative pair") {
        // with s_ij = 0 and orthogonal proxies the off-diagonal term is
        // -ln(1 - sigmoid(0)) = ln 2; isolate it by differencing the
        // diagonal-only loss
        Matrix t2 = Matrix::Zero(2, 2);
        t2(0, 0) = t2(1, 1) = 1.0;
        auto r = objectives::wbce_loss(SimilarityTargets::raw(t2), {unit(4, 0), unit(4, 1)}, cfg);
        // positives: two diagonal pairs, mean -ln sigmoid(5); negatives: two
        // orthogonal pairs, mean ln 2
        CHECK(r.value == Approx(0.69986252904906337803).margin(1e-12));
        const double neg_part = r.value + std::log(1.0 / (1.0 + std::exp(-5.0)));
        CHECK(neg_part == Approx(std::log(2.0)).margin(1e-12));
    }
}

TEST_CASE("wbce warns on an empty group and rejects invalid targets", "[objectives]") {
    LossConfig cfg;
    Matrix all_low = Matrix::Constant(2, 2, 0.1);
    auto r = objectives::wbce_loss(SimilarityTargets::raw(all_low), {unit(4, 0), unit(4, 1)}, cfg);
    CHECK(r.empty_positive_group);
    CHECK_FALSE(r.empty_negative_group);
    CHECK(std::isfinite(r.value));

    Matrix bad = Matrix::Constant(2, 2, 1.5);
    CHECK_THROWS_AS(SimilarityTargets::raw(bad), NumericError);
}

TEST_CASE("wbce is invariant under simultaneous permutation", "[objectives]") {
    LossConfig cfg;
    CounterRng rng(31, 0);
    const int n = 5, d = 6;
    std::vector<Vector> proxies;
    Matrix t(n, n);
    for (int i = 0; i < n; ++i) {
        Vector v(d);
        for (int j = 0; j < d; ++j) v[j] = rng.next_normal();
        proxies.push_back(v.normalized());
        for (int j = 0; j < n; ++j) t(i, j) = rng.next_double();
    }
    const double base = objectives::wbce_loss(SimilarityTargets::raw(t), proxies, cfg).value;

    std::vector<int> perm = {3, 0, 4, 1, 2};
    std::vector<Vector> pp(n);
    Matrix pt(n, n);
    for (int i = 0; i < n; ++i) {
        pp[i] = proxies[perm[i]];
        for (int j = 0; j < n; ++j) pt(i, j) = t(perm[i], perm[j]);
    }
    CHECK(objectives::wbce_loss(SimilarityTargets::raw(pt), pp, cfg).value == Approx(base).margin(1e-12));
}

TEST_CASE("inner loss adds its parts and vanishes modality-wise at full alignment", "[objectives]") {
    LossConfig cfg;
    CounterRng rng(37, 1);

    SECTION("perfectly aligned batch") {
        std::vector<spectral::EmbeddingMatrix> batch;
        for (int i = 0; i < 3; ++i) {
            Vector dir(8);
            for (int j = 0; j < 8; ++j) dir[j] = rng.next_normal();
            dir.normalize();
            Matrix m(3, 8);
            for (int r = 0; r < 3; ++r) m.row(r) = dir;
            batch.push_back(spectral::EmbeddingMatrix::checked(m));
        }
        auto rep = objectives::inner_loss(batch, SimilarityTargets::identity(3), cfg);
        CHECK(rep.modality_value <= 1e-6);
        CHECK(rep.value == Approx(rep.wbce_value).margin(1e-6));
    }

    SECTION("additivity on a random batch") {
        std::vector<spectral::EmbeddingMatrix> batch;
        std::vector<spectral::GramSpectrum> spectra;
        std::vector<Vector> proxies;
        for (int i = 0; i < 4; ++i) {
            batch.push_back(verification::random_instance(3, 8, rng));
            spectra.push_back(spectral::spectrum(batch.back()));
            proxies.push_back(spectra.back().proxy);
        }
        auto targets = SimilarityTargets::identity(4);
        auto rep = objectives::inner_loss(batch, targets, cfg);
        const double lm = objectives::modality_loss(spectra, cfg).value;
        const double lw = objectives::wbce_loss(targets, proxies, cfg).value;
        CHECK(rep.value == Approx(lm + lw).margin(1e-14));
    }
}

TEST_CASE("inner loss gradient matches finite differences", "[objectives]") {
    LossConfig cfg;
    CounterRng rng(41, 2);
    const int n = 4, k = 3, d = 8;
    std::vector<Matrix> zs;
    for (int i = 0; i < n; ++i) zs.push_back(verification::random_instance(k, d, rng).rows);
    auto targets = SimilarityTargets::identity(n);
    auto eval_loss = [&]() {
        std::vector<spectral::EmbeddingMatrix> batch;
        for (const auto& z : zs) batch.push_back(spectral::EmbeddingMatrix::unchecked(z));
        return objectives::inner_loss(batch, targets, cfg, 1e-12).value;
    };
    std::vector<spectral::EmbeddingMatrix> batch;
    for (const auto& z : zs) batch.push_back(spectral::EmbeddingMatrix::unchecked(z));
    auto rep = objectives::inner_loss(batch, targets, cfg);
    for (int i = 0; i < n; ++i)
        CHECK(verification::detail::fd_max_rel(zs[i], rep.grad_z[i], eval_loss) <= 1e-5);
}

TEST_CASE("pairwise InfoNCE closed forms and gradient", "[objectives]") {
    Matrix e12(2, 4);
    e12 << 1, 0, 0, 0, 0, 1, 0, 0;

    auto matched = objectives::pairwise_infonce(e12, e12, 0.1);
    CHECK(matched.value == Approx(std::log1p(std::exp(-10.0))).margin(1e-12));

    Matrix same(2, 4);
    same << 1, 0, 0, 0, 1, 0, 0, 0;
    CHECK(objectives::pairwise_infonce(same, same, 0.1).value == Approx(std::log(2.0)).margin(1e-12));

    CHECK_THROWS_AS(objectives::pairwise_infonce(e12.topRows(1), e12.topRows(1), 0.1), DimensionError);

    CounterRng rng(43, 3);
    Matrix za = verification::random_unit_rows(4, 8, rng);
    Matrix zb = verification::random_unit_rows(4, 8, rng);
    auto p = objectives::pairwise_infonce(za, zb, 0.1);
    auto eval_loss = [&]() { return objectives::pairwise_infonce(za, zb, 0.1).value; };
    CHECK(verification::detail::fd_max_rel(za, p.grad_a, eval_loss) <= 1e-5);
    CHECK(verification::detail::fd_max_rel(zb, p.grad_b, eval_loss) <= 1e-5);
}

TEST_CASE("pairwise wbce mirrors the proxy-level closed form", "[objectives]") {
    LossConfig cfg;
    Matrix e12(2, 4);
    e12 << 1, 0, 0, 0, 0, 1, 0, 0;
    Matrix ident = Matrix::Identity(2, 2);
    auto r = objectives::pairwise_wbce(e12, e12, SimilarityTargets::raw(ident), cfg);
    CHECK(r.value == Approx(0.69986252904906337803).margin(1e-12));

    // all targets at exactly beta: the <= split sends every pair negative
    Matrix half = Matrix::Constant(2, 2, 0.5);
    auto rh = objectives::pairwise_wbce(e12, e12, SimilarityTargets::raw(half), cfg);
    CHECK(rh.empty_positive_group);
    CHECK_FALSE(rh.empty_negative_group);

    CounterRng rng(47, 4);
    Matrix za = verification::random_unit_rows(4, 8, rng);
    Matrix zb = verification::random_unit_rows(4, 8, rng);
    auto targets = SimilarityTargets::identity(4);
    auto p = objectives::pairwise_wbce(za, zb, targets, cfg);
    auto eval_loss = [&]() { return objectives::pairwise_wbce(za, zb, targets, cfg).value; };
    CHECK(verification::detail::fd_max_rel(za, p.grad_a, eval_loss) <= 1e-5);
    CHECK(verification::detail::fd_max_rel(zb, p.grad_b, eval_loss) <= 1e-5);
}

TEST_CASE("composite variants sum their pair terms", "[objectives]") {
    LossConfig cfg;
    CounterRng rng(53, 5);
    std::vector<spectral::EmbeddingMatrix> batch;
    for (int i = 0; i < 4; ++i) batch.push_back(verification::random_instance(3, 8, rng));
    auto targets = SimilarityTargets::identity(4);

    auto three = objectives::composite_pairwise(objectives::CompositeVariant::ThreePair, batch, targets, cfg);
    auto tbind = objectives::composite_pairwise(objectives::CompositeVariant::TBind, batch, targets, cfg);
    auto vbind = objectives::composite_pairwise(objectives::CompositeVariant::VBind, batch, targets, cfg);

    REQUIRE(three.pair_values.size() == 3);
    CHECK(three.value ==
          Approx(three.pair_values[0] + three.pair_values[1] + three.pair_values[2]).margin(1e-14));

    // independent recomputation of each pair term
    const int n = 4, d = 8;
    for (size_t pi = 0; pi < three.pair_values.size(); ++pi) {
        auto [a, b] = objectives::composite_pairs(objectives::CompositeVariant::ThreePair)[pi];
        Matrix za(n, d), zb(n, d);
        for (int i = 0; i < n; ++i) {
            za.row(i) = batch[i].rows.row(a);
            zb.row(i) = batch[i].rows.row(b);
        }
        CHECK(three.pair_values[pi] ==
              Approx(objectives::pairwise_wbce(za, zb, targets, cfg).value).margin(1e-14));
    }

    // T-bind = 3pair minus the video-audio term; V-bind drops audio-text
    CHECK(tbind.value == Approx(three.value - three.pair_values[1]).margin(1e-12));
    CHECK(vbind.value == Approx(three.value - three.pair_values[2]).margin(1e-12));

    // a two-modality batch cannot serve three-pair variants
    std::vector<spectral::EmbeddingMatrix> two;
    for (int i = 0; i < 3; ++i) two.push_back(verification::random_instance(2, 4, rng));
    CHECK_THROWS_AS(
        objectives::composite_pairwise(objectives::CompositeVariant::ThreePair, two, SimilarityTargets::identity(3), cfg),
        DimensionError);
}

TEST_CASE("loss config validation", "[objectives]") {
    LossConfig bad;
    bad.tau = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = LossConfig{};
    bad.beta = 1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}
