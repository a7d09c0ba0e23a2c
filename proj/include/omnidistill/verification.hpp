// Trial protocols behind the `verify` command and the acceptance suite:
// spectral self-checks, finite-difference gradient audits, mode-selectivity
// measurements, the endpoint-discrepancy bound, the spectral mismatch model,
// the single-mode vs full-spectrum bound comparison, and the unrolled
// meta-gradient audit. Each suite returns per-trial rows in the shared
// verification-report schema.
#pragma once

#include "omnidistill/distill.hpp"
#include "omnidistill/theory.hpp"

#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

namespace omnidistill::verification {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

struct TrialRow {
    int trial = 0;
    int n = 0;
    double eta = kNan;
    double lipschitz = kNan;
    double c_const = kNan;
    double bound = kNan;
    double gap = kNan;  // measured quantity the suite compares against `bound`
    bool satisfied = false;
    double u_a = kNan;
    double u_b = kNan;
    double max_beta_tail = kNan;
};

struct SuiteResult {
    std::string name;
    std::vector<TrialRow> rows;
    bool passed = false;
    std::string detail;  // one-line summary, includes first failing trial

    int satisfied_count() const {
        int c = 0;
        for (const auto& r : rows) c += r.satisfied ? 1 : 0;
        return c;
    }
};

inline std::string rows_csv(const std::vector<TrialRow>& rows) {
    std::ostringstream out;
    out << "trial,n,eta,L,C,bound,gap,satisfied,U_A,U_B,max_beta_tail\n";
    out << std::setprecision(17);
    for (const auto& r : rows)
        out << r.trial << "," << r.n << "," << r.eta << "," << r.lipschitz << "," << r.c_const << ","
            << r.bound << "," << r.gap << "," << (r.satisfied ? 1 : 0) << "," << r.u_a << "," << r.u_b << ","
            << r.max_beta_tail << "\n";
    return out.str();
}

inline double rel_err(double a, double b, double floor = 1e-6) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline Matrix random_unit_rows(int k, int d, CounterRng& rng) {
    Matrix m(k, d);
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j < d; ++j) m(i, j) = rng.next_normal();
        m.row(i).normalize();
    }
    return m;
}

// Redraw until the leading sigma-gap clears `min_gap` (all modes positive).
inline spectral::EmbeddingMatrix random_instance(int k, int d, CounterRng& rng, double min_gap = 0.01) {
    for (;;) {
        auto z = spectral::EmbeddingMatrix::checked(random_unit_rows(k, d, rng));
        auto s = spectral::spectrum(z, 1e-12);
        bool ok = s.sigmas[k - 1] > 0.05;
        for (int j = 0; j + 1 < k && ok; ++j) ok = (s.sigmas[j] - s.sigmas[j + 1]) >= min_gap;
        if (ok) return z;
    }
}

// ---------------------------------------------------------------------------
// Spectral self-checks: eigenvalue sum, duality residual, orthonormality,
// and the best-rank-1 probe against random PSD rank-1 candidates.
inline SuiteResult run_spectral_suite(int trials, uint64_t seed) {
    SuiteResult res;
    res.name = "spectral";
    CounterRng rng(seed, 0x10a);
    int fail = -1;
    for (int trial = 0; trial < trials; ++trial) {
        const int k = 3, d = 8;
        auto z = spectral::EmbeddingMatrix::checked(random_unit_rows(k, d, rng));
        auto s = spectral::spectrum(z);
        const Matrix g = spectral::gram(z);

        double worst = 0.0;
        worst = std::max(worst, std::abs(s.eigenvalues.sum() - k) / 1e-8);
        worst = std::max(worst, (s.sigma1 * s.proxy - z.rows.transpose() * s.left_vectors.col(0)).norm() / 1e-8);
        worst = std::max(
            worst, (s.left_vectors.transpose() * s.left_vectors - Matrix::Identity(k, k)).norm() / 1e-9);
        worst = std::max(worst, (-s.eigenvalues.minCoeff()) / 1e-10);

        auto r1 = spectral::rank1_approx(s, g);
        const double best = (g - r1.matrix).norm();
        for (int c = 0; c < 1000; ++c) {
            Vector a(k);
            for (int i = 0; i < k; ++i) a[i] = rng.next_normal();
            a.normalize();
            const double scale = rng.next_uniform(0.0, static_cast<double>(k));
            const double cand = (g - scale * a * a.transpose()).norm();
            if (best > cand + 1e-10) worst = std::max(worst, 2.0);
        }

        TrialRow row;
        row.trial = trial;
        row.gap = worst;  // normalized worst violation; <= 1 means inside tolerance
        row.bound = 1.0;
        row.satisfied = worst <= 1.0;
        if (!row.satisfied && fail < 0) fail = trial;
        res.rows.push_back(row);
    }
    res.passed = res.satisfied_count() == trials;
    res.detail = std::to_string(res.satisfied_count()) + "/" + std::to_string(trials) + " instances";
    if (fail >= 0) res.detail += ", first failure at trial " + std::to_string(fail);
    return res;
}

// ---------------------------------------------------------------------------
// Finite-difference audit of every analytic gradient block.
namespace detail {

template <typename F>
double fd_max_rel(Matrix& target, const Matrix& analytic, F&& value, double h = 1e-6) {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < target.rows(); ++i) {
        for (Eigen::Index j = 0; j < target.cols(); ++j) {
            const double keep = target(i, j);
            target(i, j) = keep + h;
            const double fp = value();
            target(i, j) = keep - h;
            const double fm = value();
            target(i, j) = keep;
            worst = std::max(worst, rel_err((fp - fm) / (2.0 * h), analytic(i, j)));
        }
    }
    return worst;
}

}  // namespace detail

inline SuiteResult run_gradient_suite(int trials, uint64_t seed) {
    SuiteResult res;
    res.name = "gradients";
    CounterRng rng(seed, 0x96ad);
    objectives::LossConfig cfg;
    int fail = -1;

    for (int trial = 0; trial < trials; ++trial) {
        const int k = 3, d = 8;
        double worst = 0.0;

        {  // sigma_1 gradient
            Matrix zm = random_instance(k, d, rng).rows;
            const Matrix analytic = spectral::sigma_gradient(spectral::EmbeddingMatrix::unchecked(zm), 0);
            worst = std::max(worst, detail::fd_max_rel(zm, analytic, [&]() {
                return spectral::spectrum(spectral::EmbeddingMatrix::unchecked(zm), 1e-12).sigma1;
            }));
        }
        {  // modality loss w.r.t. z (single instance)
            Matrix zm = random_instance(k, d, rng).rows;
            auto grad = objectives::modality_loss({spectral::spectrum(spectral::EmbeddingMatrix::unchecked(zm))},
                                                  cfg)
                            .grad_z[0];
            worst = std::max(worst, detail::fd_max_rel(zm, grad, [&]() {
                return objectives::modality_loss(
                           {spectral::spectrum(spectral::EmbeddingMatrix::unchecked(zm), 1e-12)}, cfg)
                    .value;
            }));
        }
        {  // wBCE w.r.t. proxies and targets
            const int n = 3;
            Matrix vm(n, d);
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < d; ++j) vm(i, j) = rng.next_normal();
                vm.row(i).normalize();
            }
            Matrix tm(n, n);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) {
                    const double u = rng.next_double();
                    tm(i, j) = u < 0.5 ? 0.05 + 0.4 * u : 0.55 + 0.4 * (u - 0.5);
                }
            auto eval_loss = [&]() {
                std::vector<Vector> proxies;
                for (int i = 0; i < n; ++i) proxies.push_back(vm.row(i).transpose());
                return objectives::wbce_loss(objectives::SimilarityTargets::raw(tm), proxies, cfg).value;
            };
            std::vector<Vector> proxies;
            for (int i = 0; i < n; ++i) proxies.push_back(vm.row(i).transpose());
            auto w = objectives::wbce_loss(objectives::SimilarityTargets::raw(tm), proxies, cfg);
            Matrix grad_v(n, d);
            for (int i = 0; i < n; ++i) grad_v.row(i) = w.grad_proxy[i].transpose();
            worst = std::max(worst, detail::fd_max_rel(vm, grad_v, eval_loss));
            worst = std::max(worst, detail::fd_max_rel(tm, w.grad_targets, eval_loss));
        }
        {  // combined inner loss w.r.t. z (chains wBCE through the proxy)
            const int n = 3;
            std::vector<Matrix> zs;
            for (int i = 0; i < n; ++i) zs.push_back(random_instance(k, d, rng).rows);
            Matrix tm = objectives::SimilarityTargets::identity(n).entries;
            auto eval_loss = [&]() {
                std::vector<spectral::EmbeddingMatrix> batch;
                for (const auto& z : zs) batch.push_back(spectral::EmbeddingMatrix::unchecked(z));
                return objectives::inner_loss(batch, objectives::SimilarityTargets::raw(tm), cfg, 1e-12).value;
            };
            std::vector<spectral::EmbeddingMatrix> batch;
            for (const auto& z : zs) batch.push_back(spectral::EmbeddingMatrix::unchecked(z));
            auto rep = objectives::inner_loss(batch, objectives::SimilarityTargets::raw(tm), cfg);
            for (int i = 0; i < n; ++i)
                worst = std::max(worst, detail::fd_max_rel(zs[i], rep.grad_z[i], eval_loss));
        }
        {  // pairwise InfoNCE
            const int n = 4;
            Matrix za = random_unit_rows(n, d, rng), zb = random_unit_rows(n, d, rng);
            auto p = objectives::pairwise_infonce(za, zb, cfg.tau);
            auto eval_loss = [&]() { return objectives::pairwise_infonce(za, zb, cfg.tau).value; };
            worst = std::max(worst, detail::fd_max_rel(za, p.grad_a, eval_loss));
            worst = std::max(worst, detail::fd_max_rel(zb, p.grad_b, eval_loss));
        }
        {  // pairwise wBCE
            const int n = 4;
            Matrix za = random_unit_rows(n, d, rng), zb = random_unit_rows(n, d, rng);
            Matrix tm = objectives::SimilarityTargets::identity(n).entries;
            auto targets = objectives::SimilarityTargets::raw(tm);
            auto p = objectives::pairwise_wbce(za, zb, targets, cfg);
            auto eval_loss = [&]() { return objectives::pairwise_wbce(za, zb, targets, cfg).value; };
            worst = std::max(worst, detail::fd_max_rel(za, p.grad_a, eval_loss));
            worst = std::max(worst, detail::fd_max_rel(zb, p.grad_b, eval_loss));
        }
        {  // head backward through the normalization
            std::vector<int> dins = {6, 7, 5};
            CounterRng hr(seed ^ trial, 0x41);
            auto heads = model::ProjectionHeads::seeded_init(d, dins, hr);
            std::vector<Vector> raw;
            for (int din : dins) {
                Vector x(din);
                for (int j = 0; j < din; ++j) x[j] = rng.next_normal();
                raw.push_back(x.normalized());
            }
            Matrix upstream(k, d);
            for (int i = 0; i < k; ++i)
                for (int j = 0; j < d; ++j) upstream(i, j) = rng.next_normal();
            auto grads = model::backward(heads, raw, upstream);
            for (int m = 0; m < k; ++m) {
                auto eval_loss = [&]() {
                    return (upstream.array() * model::forward(heads, raw).rows.array()).sum();
                };
                worst = std::max(worst, detail::fd_max_rel(heads.weights[m], grads[m], eval_loss));
            }
        }

        TrialRow row;
        row.trial = trial;
        row.gap = worst;
        row.bound = 1e-5;
        row.satisfied = worst <= 1e-5;
        if (!row.satisfied && fail < 0) fail = trial;
        res.rows.push_back(row);
    }
    res.passed = res.satisfied_count() == trials;
    res.detail = std::to_string(res.satisfied_count()) + "/" + std::to_string(trials) +
                 " trials within 1e-5 of finite differences";
    if (fail >= 0) res.detail += ", first failure at trial " + std::to_string(fail);
    return res;
}

// ---------------------------------------------------------------------------
// Mode selectivity: the modality loss concentrates on mode 1 (measured at a
// sharp temperature where its softmax tail is numerically zero), pairwise
// InfoNCE activates higher modes at the training temperature.
inline SuiteResult run_selectivity_suite(int trials, uint64_t seed) {
    SuiteResult res;
    res.name = "selectivity";
    CounterRng rng(seed, 0x5e1e);
    const double sharp_tau = 1e-4;
    int lm_ok = 0, nce_ok = 0;
    for (int trial = 0; trial < trials; ++trial) {
        const int k = 3, d = 8;

        auto z = random_instance(k, d, rng);
        auto s = spectral::spectrum(z);
        objectives::LossConfig sharp;
        sharp.tau = sharp_tau;
        Matrix g = objectives::modality_loss({s}, sharp).grad_z[0];
        Vector beta = theory::mode_projection(g, s);
        double lm_tail = 0.0;
        for (int j = 1; j < k; ++j) lm_tail = std::max(lm_tail, std::abs(beta[j]));

        const int n = 8;
        std::vector<spectral::EmbeddingMatrix> batch;
        for (int i = 0; i < n; ++i) batch.push_back(random_instance(k, d, rng));
        Matrix gn = theory::infonce_instance_zgrad(batch, 0, 0, 1, 0.1);
        Vector beta_n = theory::mode_projection(gn, spectral::spectrum(batch[0]));
        double nce_tail = 0.0;
        for (int j = 1; j < k; ++j) nce_tail = std::max(nce_tail, std::abs(beta_n[j]));

        TrialRow row;
        row.trial = trial;
        row.gap = lm_tail;
        row.bound = 1e-8;
        row.max_beta_tail = nce_tail;
        row.satisfied = lm_tail <= 1e-8;
        lm_ok += row.satisfied ? 1 : 0;
        nce_ok += nce_tail > 1e-6 ? 1 : 0;
        res.rows.push_back(row);
    }
    res.passed = (lm_ok == trials) && (nce_ok >= (trials * 95 + 99) / 100);
    res.detail = "modality-loss tail <= 1e-8 in " + std::to_string(lm_ok) + "/" + std::to_string(trials) +
                 ", InfoNCE tail > 1e-6 in " + std::to_string(nce_ok) + "/" + std::to_string(trials);
    return res;
}

namespace detail {

struct DeskProblem {
    std::vector<Matrix> real_inputs;  // per modality
    std::vector<Matrix> syn_inputs;
    model::ProjectionHeads heads;
    std::vector<int> d_in = {6, 7, 5};
    int k = 3, d = 8;
};

inline DeskProblem make_desk_problem(uint64_t seed, int n_real, int n_syn) {
    DeskProblem p;
    CounterRng rng(seed, 0xde5c);
    for (int din : p.d_in) {
        p.real_inputs.push_back(random_unit_rows(n_real, din, rng));
        p.syn_inputs.push_back(random_unit_rows(n_syn, din, rng));
    }
    p.heads = model::ProjectionHeads::seeded_init(p.d, p.d_in, rng);
    return p;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Endpoint bound: teacher rollout on real data, student on synthetic data,
// measured gap vs the accumulated-mismatch bound with empirical L.
inline SuiteResult run_lemma1_suite(int trials, int max_steps, double eta, int probes, uint64_t seed) {
    SuiteResult res;
    res.name = "lemma1";
    CounterRng rng(seed, 0x1e111);
    objectives::LossConfig loss;
    int fail = -1;
    for (int trial = 0; trial < trials; ++trial) {
        detail::DeskProblem p = detail::make_desk_problem(seed + 7919 * trial, 6, 3);
        const int n = 1 + trial % std::max(1, max_steps);
        theory::GradField g_t = theory::make_inner_field(
            p.real_inputs, objectives::SimilarityTargets::identity(6), loss, 1e-9, seed ^ 0x7e);
        theory::GradField g_s = theory::make_inner_field(
            p.syn_inputs, objectives::SimilarityTargets::identity(3), loss, 1e-9, seed ^ 0x7f);
        theory::BoundReport rep = theory::verify_endpoint_bound(g_t, g_s, p.heads, n, eta, probes, 1e-3, rng);

        TrialRow row;
        row.trial = trial;
        row.n = n;
        row.eta = eta;
        row.lipschitz = rep.lipschitz;
        row.bound = rep.bound;
        row.gap = rep.gap;
        row.satisfied = rep.satisfied;
        if (!row.satisfied && fail < 0) fail = trial;
        res.rows.push_back(row);
    }
    res.passed = res.satisfied_count() == trials;
    res.detail = std::to_string(res.satisfied_count()) + "/" + std::to_string(trials) + " bounds satisfied";
    if (fail >= 0) res.detail += ", first failure at trial " + std::to_string(fail);
    return res;
}

// ---------------------------------------------------------------------------
// Spectral mismatch model at rollout states, for a single-mode objective
// (sigma_1) and a full-spectrum one (the modality loss at tau = 0.1).
inline SuiteResult run_mismatch_suite(int trials, int steps, double eta, uint64_t seed) {
    SuiteResult res;
    res.name = "mismatch";
    CounterRng rng(seed, 0x30c4);
    objectives::LossConfig loss;
    int fail = -1;

    auto alpha_sigma1 = [](const Vector& sigmas) {
        Vector a = Vector::Zero(sigmas.size());
        a[0] = 1.0;
        return a;
    };
    auto alpha_lm = [&loss](const Vector& sigmas) {
        Vector p(sigmas.size());
        double z = 0.0;
        for (int j = 0; j < sigmas.size(); ++j) {
            p[j] = std::exp((sigmas[j] - sigmas[0]) / loss.tau);
            z += p[j];
        }
        p /= z;
        Vector a = p / loss.tau;
        a[0] = (p[0] - 1.0) / loss.tau;
        return a;
    };

    for (int trial = 0; trial < trials; ++trial) {
        detail::DeskProblem p = detail::make_desk_problem(seed + 104729 * trial, 4, 2);
        theory::GradField g_s = theory::make_inner_field(
            p.syn_inputs, objectives::SimilarityTargets::identity(2), loss, 1e-9, seed ^ 0x91);
        std::vector<Vector> raw_t, raw_s;
        for (int m = 0; m < p.k; ++m) {
            raw_t.push_back(p.real_inputs[m].row(0).transpose());
            raw_s.push_back(p.syn_inputs[m].row(0).transpose());
        }

        model::ProjectionHeads heads = p.heads;
        model::SgdState sgd = model::SgdState::make(heads, eta, 0.0);
        double worst_margin = -1.0;
        bool ok = true;
        for (int r = 0; r < steps && ok; ++r) {
            for (const auto& alpha : {std::function<Vector(const Vector&)>(alpha_sigma1),
                                      std::function<Vector(const Vector&)>(alpha_lm)}) {
                theory::MismatchStep step =
                    theory::spectral_mismatch_check(heads, raw_t, raw_s, alpha, 1e-9, rng);
                ok = ok && step.satisfied;
                worst_margin = std::max(worst_margin, step.modeled_delta - step.rhs);
            }
            heads = model::sgd_step(heads, g_s(heads), sgd);
        }

        TrialRow row;
        row.trial = trial;
        row.n = steps;
        row.eta = eta;
        row.gap = worst_margin;  // modeled delta minus rhs; <= 1e-10 passes
        row.bound = 1e-10;
        row.satisfied = ok;
        if (!ok && fail < 0) fail = trial;
        res.rows.push_back(row);
    }
    res.passed = res.satisfied_count() == trials;
    res.detail = std::to_string(res.satisfied_count()) + "/" + std::to_string(trials) +
                 " per-step mismatch bounds hold";
    if (fail >= 0) res.detail += ", first failure at trial " + std::to_string(fail);
    return res;
}

// ---------------------------------------------------------------------------
// Certified-bound comparison: single-mode sensitivities (mode-1 component of
// the modality loss) against full-spectrum ones (pairwise InfoNCE projections
// rescaled so mode 1 matches), over measured rollout states.
inline SuiteResult run_theorem1_suite(int trials, int steps, double eta, uint64_t seed) {
    SuiteResult res;
    res.name = "theorem1";
    CounterRng rng(seed, 0x7e01);
    objectives::LossConfig loss;
    int fail = -1;
    for (int trial = 0; trial < trials; ++trial) {
        detail::DeskProblem p = detail::make_desk_problem(seed + 15485863 * trial, 6, 4);
        theory::GradField g_t = theory::make_inner_field(
            p.real_inputs, objectives::SimilarityTargets::identity(6), loss, 1e-9, seed ^ 0xa1);
        theory::GradField g_s = theory::make_inner_field(
            p.syn_inputs, objectives::SimilarityTargets::identity(4), loss, 1e-9, seed ^ 0xa2);

        std::vector<Vector> alpha_single, alpha_full, mode_errors;
        std::vector<model::ProjectionHeads> states;
        model::ProjectionHeads heads = p.heads;
        model::SgdState sgd = model::SgdState::make(heads, eta, 0.0);
        double c_const = 0.0;
        bool usable = true;

        for (int r = 0; r < steps; ++r) {
            states.push_back(heads);
            std::vector<Vector> raw_t, raw_s;
            for (int m = 0; m < p.k; ++m) {
                raw_t.push_back(p.real_inputs[m].row(0).transpose());
                raw_s.push_back(p.syn_inputs[m].row(0).transpose());
            }
            auto z_t = model::forward(heads, raw_t);
            auto z_s = model::forward(heads, raw_s);
            auto sp_t = spectral::spectrum(z_t, 1e-12);
            auto sp_s = spectral::spectrum(z_s, 1e-12);

            Vector eps(p.k);
            for (int j = 0; j < p.k; ++j) {
                if (!sp_t.right_available[j] || !sp_s.right_available[j]) {
                    usable = false;
                    break;
                }
                eps[j] = (sp_s.left_vectors.col(j) * sp_s.right_vectors.col(j).transpose() -
                          sp_t.left_vectors.col(j) * sp_t.right_vectors.col(j).transpose())
                             .norm();
            }
            if (!usable) break;

            // mode-1 sensitivity of the modality loss at the teacher sigmas
            double z_norm = 0.0;
            Vector pj(p.k);
            for (int j = 0; j < p.k; ++j) {
                pj[j] = std::exp((sp_t.sigmas[j] - sp_t.sigmas[0]) / loss.tau);
                z_norm += pj[j];
            }
            pj /= z_norm;
            const double a1 = (pj[0] - 1.0) / loss.tau;

            // full-spectrum: InfoNCE projections on the synthetic batch,
            // rescaled so mode 1 matches a1
            std::vector<spectral::EmbeddingMatrix> batch;
            std::vector<int> all = {0, 1, 2, 3};
            engine::BatchEncoding enc = engine::encode_batch(heads, p.syn_inputs, all);
            Matrix gn = theory::infonce_instance_zgrad(enc.z, 0, 0, 1, loss.tau);
            Vector beta = theory::mode_projection(gn, spectral::spectrum(enc.z[0], 1e-12));
            if (std::abs(beta[0]) < 1e-12) {
                usable = false;
                break;
            }
            Vector full = beta * (a1 / beta[0]);
            Vector single = Vector::Zero(p.k);
            single[0] = a1;

            alpha_single.push_back(single);
            alpha_full.push_back(full);
            mode_errors.push_back(eps);
            c_const = std::max(c_const, 1.5 * theory::jacobian_norm(heads, raw_s, rng));
            heads = model::sgd_step(heads, g_s(heads), sgd);
        }

        TrialRow row;
        row.trial = trial;
        row.n = static_cast<int>(alpha_single.size());
        row.eta = eta;
        if (!usable || alpha_single.empty()) {
            row.satisfied = false;
            if (fail < 0) fail = trial;
            res.rows.push_back(row);
            continue;
        }
        const double lipschitz = theory::estimate_lipschitz(g_t, states, 2, 1e-3, rng);
        theory::TheoremBounds tb = theory::compare_bounds(alpha_single, alpha_full, mode_errors, c_const,
                                                          lipschitz, eta, row.n);
        row.lipschitz = lipschitz;
        row.c_const = c_const;
        row.u_a = tb.u_single;
        row.u_b = tb.u_full;
        row.max_beta_tail = tb.tail_mass;
        row.satisfied = tb.u_single <= tb.u_full + 1e-12;
        if (tb.tail_mass > 1e-9) row.satisfied = row.satisfied && (tb.u_single < tb.u_full);
        if (!row.satisfied && fail < 0) fail = trial;
        res.rows.push_back(row);
    }
    res.passed = res.satisfied_count() == trials;
    res.detail = std::to_string(res.satisfied_count()) + "/" + std::to_string(trials) +
                 " trials with U_A <= U_B (strict under tail mass)";
    if (fail >= 0) res.detail += ", first failure at trial " + std::to_string(fail);
    return res;
}

// ---------------------------------------------------------------------------
// Unrolled meta-gradient audit on a problem small enough for central finite
// differences through the full rollout.
inline SuiteResult run_metagrad_suite(uint64_t seed) {
    SuiteResult res;
    res.name = "metagrad";

    distill::DistillConfig cfg;
    cfg.mini_batch_size = 2;
    cfg.sim_rank = 1;
    cfg.sim_alpha = 0.3;
    cfg.seed = seed;
    cfg.gap_tol = 1e-9;

    CounterRng init(seed, 0x77);
    auto start = model::ProjectionHeads::seeded_init(3, {3, 3, 3}, init);
    auto target = model::ProjectionHeads::seeded_init(3, {3, 3, 3}, init);
    buffer::TeacherSegment seg;
    seg.start = start;
    seg.target = target;

    distill::SyntheticSet syn;
    syn.modality_names = {"video", "audio", "text"};
    CounterRng xr(seed, 0x78);
    for (int m = 0; m < 3; ++m) syn.embeddings.push_back(random_unit_rows(2, 3, xr));
    syn.sim_a.resize(2, 1);
    syn.sim_b.resize(2, 1);
    syn.sim_a << 0.21, -0.13;
    syn.sim_b << 0.11, 0.19;
    syn.sim_alpha = 0.3;
    syn.student_lr = 0.05;

    auto run_match = [&](const distill::SyntheticSet& s, const distill::DistillConfig& c) {
        CounterRng rng(c.seed, 0x401);
        auto rt = distill::student_rollout(start, s, c, rng);
        distill::attach_matching_loss(*rt, seg);
        return rt->t.val(rt->match_var);
    };

    int trial = 0, fail = -1;
    for (int t_steps : {1, 2}) {
        distill::DistillConfig c = cfg;
        c.syn_steps = t_steps;
        CounterRng rng(c.seed, 0x401);
        auto rt = distill::student_rollout(start, syn, c, rng);
        distill::attach_matching_loss(*rt, seg);
        std::vector<tape::Var> leaves;
        for (auto& vm : rt->x_vars)
            for (auto& vi : vm)
                for (auto v : vi) leaves.push_back(v);
        for (auto& vi : rt->a_vars)
            for (auto v : vi) leaves.push_back(v);
        for (auto& vi : rt->b_vars)
            for (auto v : vi) leaves.push_back(v);
        leaves.push_back(rt->log_eta);
        const std::vector<double> g = rt->t.gradient(rt->match_var, leaves);

        const double h = 3e-5;
        size_t idx = 0;
        auto check = [&](auto mutate) {
            auto plus = syn;
            mutate(plus, +h);
            auto minus = syn;
            mutate(minus, -h);
            const double fd = (run_match(plus, c) - run_match(minus, c)) / (2.0 * h);
            TrialRow row;
            row.trial = trial++;
            row.n = t_steps;
            row.gap = rel_err(fd, g[idx]);
            row.bound = 1e-4;
            row.satisfied = row.gap <= 1e-4;
            if (!row.satisfied && fail < 0) fail = row.trial;
            res.rows.push_back(row);
            ++idx;
        };
        for (int m = 0; m < 3; ++m)
            for (int i = 0; i < 2; ++i)
                for (int j = 0; j < 3; ++j)
                    check([=](distill::SyntheticSet& s, double dv) { s.embeddings[m](i, j) += dv; });
        for (int i = 0; i < 2; ++i) check([=](distill::SyntheticSet& s, double dv) { s.sim_a(i, 0) += dv; });
        for (int i = 0; i < 2; ++i) check([=](distill::SyntheticSet& s, double dv) { s.sim_b(i, 0) += dv; });
        check([=](distill::SyntheticSet& s, double dv) {
            s.student_lr = std::exp(std::log(s.student_lr) + dv);
        });
    }
    res.passed = res.satisfied_count() == static_cast<int>(res.rows.size());
    res.detail = std::to_string(res.satisfied_count()) + "/" + std::to_string(res.rows.size()) +
                 " meta-gradient coordinates within 1e-4 of finite differences";
    if (fail >= 0) res.detail += ", first failure at coordinate " + std::to_string(fail);
    return res;
}

}  // namespace omnidistill::verification
