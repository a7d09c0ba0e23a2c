// Numerical verification harness for the theory: the endpoint-discrepancy
// bound (accumulated gradient mismatch with an empirically estimated
// Lipschitz constant), the spectral mismatch model, mode projections that
// classify single-mode vs full-spectrum objectives, and the single-mode vs
// full-spectrum certified-bound comparison. Constants L and C are empirical
// probe maxima with a 1.5 safety factor, so reports are conservative.
#pragma once

#include "omnidistill/engine.hpp"

#include <functional>

namespace omnidistill::theory {

using GradField = std::function<std::vector<Matrix>(const model::ProjectionHeads&)>;

inline double block_norm(const std::vector<Matrix>& blocks) {
    double s = 0.0;
    for (const auto& b : blocks) s += b.squaredNorm();
    return std::sqrt(s);
}

inline std::vector<Matrix> block_diff(const std::vector<Matrix>& a, const std::vector<Matrix>& b) {
    std::vector<Matrix> d;
    d.reserve(a.size());
    for (size_t i = 0; i < a.size(); ++i) d.push_back(a[i] - b[i]);
    return d;
}

// Full-batch inner-objective gradient field over a fixed input set.
inline GradField make_inner_field(std::vector<Matrix> inputs, objectives::SimilarityTargets targets,
                                  objectives::LossConfig loss, double gap_tol, uint64_t jitter_seed) {
    const int n = static_cast<int>(inputs[0].rows());
    std::vector<int> all(n);
    for (int i = 0; i < n; ++i) all[i] = i;
    return [inputs = std::move(inputs), targets = std::move(targets), loss, gap_tol, jitter_seed,
            all](const model::ProjectionHeads& heads) {
        return engine::inner_weight_gradient(heads, inputs, all, targets, loss, gap_tol, jitter_seed)
            .weight_grads;
    };
}

// Max gradient-difference ratio over all state pairs plus seeded random
// perturbation probes around each state, times a 1.5 safety factor.
// Monotone in the probe set by construction.
inline double estimate_lipschitz(const GradField& field, const std::vector<model::ProjectionHeads>& states,
                                 int probes_per_state, double probe_scale, CounterRng& rng) {
    if (states.size() < 2 && probes_per_state < 1)
        throw DimensionError("estimate_lipschitz: need at least two states or one probe");
    std::vector<std::vector<Matrix>> grads;
    grads.reserve(states.size());
    for (const auto& s : states) grads.push_back(field(s));

    double max_ratio = 0.0;
    for (size_t i = 0; i < states.size(); ++i) {
        for (size_t j = i + 1; j < states.size(); ++j) {
            const double dist = std::sqrt(model::param_distance(states[i], states[j]).total);
            if (dist == 0.0) continue;
            max_ratio = std::max(max_ratio, block_norm(block_diff(grads[i], grads[j])) / dist);
        }
    }
    for (size_t i = 0; i < states.size(); ++i) {
        for (int p = 0; p < probes_per_state; ++p) {
            model::ProjectionHeads probe = states[i];
            double dist2 = 0.0;
            for (auto& w : probe.weights)
                for (Eigen::Index r = 0; r < w.rows(); ++r)
                    for (Eigen::Index c = 0; c < w.cols(); ++c) {
                        const double dv = probe_scale * rng.next_normal();
                        w(r, c) += dv;
                        dist2 += dv * dv;
                    }
            if (dist2 == 0.0) throw NumericError("estimate_lipschitz: zero-displacement probe");
            max_ratio =
                std::max(max_ratio, block_norm(block_diff(field(probe), grads[i])) / std::sqrt(dist2));
        }
    }
    return 1.5 * max_ratio;
}

struct BoundReport {
    std::vector<double> delta;  // per-step gradient mismatch at student states
    double lipschitz = 0.0;
    double eta = 0.0;
    int steps = 0;
    double bound = 0.0;  // eta sum_r (1 + eta L)^{n-1-r} delta_r
    double gap = 0.0;    // measured ||theta_n^S - theta_n^T||
    bool satisfied = false;
};

// Teacher rollout under g_T, student rollout under g_S from the shared
// start; the Lipschitz estimate sees every recorded state (in particular the
// paired teacher/student states the bound's proof relies on).
inline BoundReport verify_endpoint_bound(const GradField& g_teacher, const GradField& g_student,
                                         const model::ProjectionHeads& start, int n, double eta,
                                         int probes_per_state, double probe_scale, CounterRng& rng) {
    if (n < 1) throw ConfigError("verify_endpoint_bound: need n >= 1");
    BoundReport rep;
    rep.eta = eta;
    rep.steps = n;

    std::vector<model::ProjectionHeads> teacher_states{start};
    std::vector<model::ProjectionHeads> student_states{start};
    model::ProjectionHeads th = start, st = start;
    model::SgdState tsgd = model::SgdState::make(start, eta, 0.0);
    model::SgdState ssgd = model::SgdState::make(start, eta, 0.0);
    for (int r = 0; r < n; ++r) {
        rep.delta.push_back(block_norm(block_diff(g_student(st), g_teacher(st))));
        th = model::sgd_step(th, g_teacher(th), tsgd);
        st = model::sgd_step(st, g_student(st), ssgd);
        teacher_states.push_back(th);
        student_states.push_back(st);
    }
    rep.gap = std::sqrt(model::param_distance(st, th).total);

    std::vector<model::ProjectionHeads> all_states = teacher_states;
    all_states.insert(all_states.end(), student_states.begin(), student_states.end());
    rep.lipschitz = estimate_lipschitz(g_teacher, all_states, probes_per_state, probe_scale, rng);

    double bound = 0.0;
    for (int r = 0; r < n; ++r) bound += std::pow(1.0 + eta * rep.lipschitz, n - 1 - r) * rep.delta[r];
    rep.bound = eta * bound;
    rep.satisfied = rep.gap <= rep.bound + 1e-10;
    return rep;
}

// β_j = u_jᵀ (∇_z L) v_j, the Frobenius projection of an objective's
// z-gradient onto the j-th rank-1 singular mode.
inline Vector mode_projection(const Matrix& grad_z, const spectral::GramSpectrum& s) {
    if (s.degenerate) throw NumericError("mode_projection: degenerate spectrum");
    const int k = s.modes();
    Vector beta(k);
    for (int j = 0; j < k; ++j) {
        if (!s.right_available[j])
            throw NumericError("mode_projection: sigma_" + std::to_string(j + 1) + " vanishes");
        beta[j] = s.left_vectors.col(j).dot(grad_z * s.right_vectors.col(j));
    }
    return beta;
}

// Gradient of a single-pair InfoNCE loss w.r.t. one instance's stacked
// representation (rows a and b carry the anchor and candidate roles).
inline Matrix infonce_instance_zgrad(const std::vector<spectral::EmbeddingMatrix>& batch, int instance, int a,
                                     int b, double tau) {
    const int n = static_cast<int>(batch.size());
    const int k = batch[0].k;
    const int d = batch[0].d;
    Matrix za(n, d), zb(n, d);
    for (int i = 0; i < n; ++i) {
        za.row(i) = batch[i].rows.row(a);
        zb.row(i) = batch[i].rows.row(b);
    }
    objectives::PairwiseResult p = objectives::pairwise_infonce(za, zb, tau);
    Matrix g = Matrix::Zero(k, d);
    g.row(a) = p.grad_a.row(instance);
    g.row(b) = p.grad_b.row(instance);
    return g;
}

struct TheoremBounds {
    double u_single = 0.0;  // U_A
    double u_full = 0.0;    // U_B
    double tail_mass = 0.0; // Σ_{r, j>=2} |alpha^B_{j,r}| eps_{j,r}
};

// Certified bounds for a single-mode objective A (alpha has only mode 1)
// versus a full-spectrum objective B with matched mode-1 sensitivities.
inline TheoremBounds compare_bounds(const std::vector<Vector>& alpha_single,
                                    const std::vector<Vector>& alpha_full,
                                    const std::vector<Vector>& mode_errors, double c_const, double lipschitz,
                                    double eta, int n) {
    if (static_cast<int>(alpha_single.size()) != n || static_cast<int>(alpha_full.size()) != n ||
        static_cast<int>(mode_errors.size()) != n)
        throw DimensionError("compare_bounds: need per-step sensitivities for all n steps");
    TheoremBounds out;
    for (int r = 0; r < n; ++r) {
        const double rel = std::max({std::abs(alpha_single[r][0]), std::abs(alpha_full[r][0]), 1.0});
        if (std::abs(alpha_single[r][0] - alpha_full[r][0]) > 1e-12 * rel)
            throw NumericError("compare_bounds: mode-1 sensitivities not matched at step " + std::to_string(r));
        for (int j = 1; j < alpha_single[r].size(); ++j)
            if (alpha_single[r][j] != 0.0)
                throw NumericError("compare_bounds: objective A is not single-mode at step " + std::to_string(r));
        const double w = std::pow(1.0 + eta * lipschitz, n - 1 - r);
        out.u_single += w * std::abs(alpha_single[r][0]) * mode_errors[r][0];
        double full = 0.0;
        for (int j = 0; j < alpha_full[r].size(); ++j) {
            full += std::abs(alpha_full[r][j]) * mode_errors[r][j];
            if (j >= 1) out.tail_mass += std::abs(alpha_full[r][j]) * mode_errors[r][j];
        }
        out.u_full += w * full;
    }
    out.u_single *= eta * c_const;
    out.u_full *= eta * c_const;
    return out;
}

// Operator norm of the encoder Jacobian dθ -> dz at one state, by power
// iteration on JᵀJ.
inline double jacobian_norm(const model::ProjectionHeads& heads, const std::vector<Vector>& raw,
                            CounterRng& rng, int iters = 60) {
    std::vector<Matrix> v;
    double norm2 = 0.0;
    for (const auto& w : heads.weights) {
        Matrix m(w.rows(), w.cols());
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c) {
                m(r, c) = rng.next_normal();
                norm2 += m(r, c) * m(r, c);
            }
        v.push_back(std::move(m));
    }
    for (auto& m : v) m /= std::sqrt(norm2);

    double sigma = 0.0;
    for (int it = 0; it < iters; ++it) {
        Matrix jv = model::forward_jvp(heads, raw, v);
        sigma = jv.norm();  // ||J v|| with ||v|| = 1
        std::vector<Matrix> jtjv = model::backward(heads, raw, jv);
        const double n = block_norm(jtjv);
        if (n < 1e-300) return 0.0;
        for (size_t m = 0; m < v.size(); ++m) v[m] = jtjv[m] / n;
    }
    return sigma;
}

struct MismatchStep {
    double modeled_delta = 0.0;    // ||Jᵀ vec(Σ_j α_j (mode_j^S - mode_j^T))||
    double rhs = 0.0;              // C Σ_j |α_j| ε_j
    bool satisfied = false;
    double representation_gap = 0.0;  // ||z^S - z^T||_F, validity indicator for shared α
    Vector alpha;
    Vector mode_errors;
    double c_const = 0.0;
};

// Per-state check of the spectral mismatch model for a spectral objective
// f(σ_1..σ_k), with shared sensitivities evaluated at the teacher
// representations and the Jacobian taken on the student side.
inline MismatchStep spectral_mismatch_check(const model::ProjectionHeads& heads,
                                            const std::vector<Vector>& raw_teacher,
                                            const std::vector<Vector>& raw_student,
                                            const std::function<Vector(const Vector&)>& sensitivities,
                                            double gap_tol, CounterRng& rng) {
    spectral::EmbeddingMatrix z_t = model::forward(heads, raw_teacher);
    spectral::EmbeddingMatrix z_s = model::forward(heads, raw_student);
    spectral::GramSpectrum sp_t = spectral::spectrum(z_t, gap_tol);
    spectral::GramSpectrum sp_s = spectral::spectrum(z_s, gap_tol);
    const int k = sp_t.modes();

    MismatchStep step;
    step.alpha = sensitivities(sp_t.sigmas);
    step.representation_gap = (z_s.rows - z_t.rows).norm();

    Matrix upstream_gap = Matrix::Zero(z_t.k, z_t.d);
    step.mode_errors.resize(k);
    for (int j = 0; j < k; ++j) {
        if (!sp_t.right_available[j] || !sp_s.right_available[j])
            throw NumericError("spectral_mismatch_check: vanishing singular value, mode " + std::to_string(j));
        Matrix mode_t = sp_t.left_vectors.col(j) * sp_t.right_vectors.col(j).transpose();
        Matrix mode_s = sp_s.left_vectors.col(j) * sp_s.right_vectors.col(j).transpose();
        step.mode_errors[j] = (mode_s - mode_t).norm();
        upstream_gap += step.alpha[j] * (mode_s - mode_t);
    }

    step.modeled_delta = block_norm(model::backward(heads, raw_student, upstream_gap));
    step.c_const = 1.5 * jacobian_norm(heads, raw_student, rng);
    double rhs = 0.0;
    for (int j = 0; j < k; ++j) rhs += std::abs(step.alpha[j]) * step.mode_errors[j];
    step.rhs = step.c_const * rhs;
    step.satisfied = step.modeled_delta <= step.rhs + 1e-10;
    return step;
}

}  // namespace omnidistill::theory
