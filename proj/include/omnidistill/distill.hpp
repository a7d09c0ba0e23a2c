// Bilevel distillation engine: differentiable student rollouts under the
// inner objective, branch-wise trajectory matching against teacher segments,
// and momentum-SGD outer updates of the synthetic embeddings, the low-rank
// similarity factors and the learnable student step size. Meta-gradients are
// exact: the whole rollout (including the per-instance Jacobi eigensolve and
// the inner backward pass) is recorded on a scalar tape and reversed once.
#pragma once

#include "omnidistill/buffer.hpp"
#include "omnidistill/tape.hpp"

#include <filesystem>
#include <memory>

namespace omnidistill::distill {

using tape::Var;
using VarVec = std::vector<Var>;
using VarMat = std::vector<VarVec>;

enum class Method {
    hopa,
    three_pair,
    t_bind,
    v_bind,
    rank2,
    no_modality,  // drop L_M
    no_instance,  // drop L_wBCE
    no_mining     // freeze S_e at its initialization
};

inline const char* method_name(Method m) {
    switch (m) {
        case Method::hopa: return "hopa";
        case Method::three_pair: return "3pair";
        case Method::t_bind: return "tbind";
        case Method::v_bind: return "vbind";
        case Method::rank2: return "rank2";
        case Method::no_modality: return "ablate-LM";
        case Method::no_instance: return "ablate-wBCE";
        case Method::no_mining: return "ablate-mining";
    }
    return "?";
}

inline Method method_from_name(const std::string& s) {
    for (Method m : {Method::hopa, Method::three_pair, Method::t_bind, Method::v_bind, Method::rank2,
                     Method::no_modality, Method::no_instance, Method::no_mining})
        if (s == method_name(m)) return m;
    throw ConfigError("unknown method '" + s + "'");
}

struct DistillConfig {
    int iterations = 500;
    int syn_steps = 16;
    int expert_epochs = 2;
    int max_start_epoch = 5;
    int mini_batch_size = 25;
    double lr_data = 40.0;
    double lr_lr = 1e-4;
    double lr_sim = 4.0;
    double momentum = 0.5;  // outer optimizer
    objectives::LossConfig loss;
    int sim_rank = 8;
    double sim_alpha = 1.0;
    double lr_teacher = 0.01;  // initial learnable student step size
    int head_dim = 16;
    double gap_tol = spectral::kDefaultGapTol;
    uint64_t seed = 17;

    void validate() const {
        if (iterations < 0) throw ConfigError("DistillConfig: iterations must be >= 0");
        if (syn_steps < 1) throw ConfigError("DistillConfig: syn_steps must be >= 1");
        if (mini_batch_size < 1) throw ConfigError("DistillConfig: mini_batch_size must be >= 1");
        if (lr_data < 0 || lr_lr < 0 || lr_sim < 0) throw ConfigError("DistillConfig: learning rates must be >= 0");
        if (sim_rank < 1) throw ConfigError("DistillConfig: sim_rank must be >= 1");
        if (lr_teacher <= 0) throw ConfigError("DistillConfig: lr_teacher must be positive");
        loss.validate();
    }
};

struct SyntheticSet {
    std::vector<std::string> modality_names;
    std::vector<Matrix> embeddings;  // n x d_in(m), raw (heads normalize on forward)
    Matrix sim_a, sim_b;             // n x r
    double sim_alpha = 0.0;          // init scale, carried for provenance
    double student_lr = 0.01;        // η > 0

    int instance_count() const { return embeddings.empty() ? 0 : static_cast<int>(embeddings[0].rows()); }
    int modality_count() const { return static_cast<int>(embeddings.size()); }
    int sim_rank() const { return static_cast<int>(sim_a.cols()); }

    // S_e = clamp(I + A Bᵀ, eps, 1 - eps)
    Matrix similarity() const {
        const int n = instance_count();
        Matrix s = Matrix::Identity(n, n) + sim_a * sim_b.transpose();
        const double eps = objectives::SimilarityTargets::kClampEps;
        return s.cwiseMax(eps).cwiseMin(1.0 - eps);
    }
};

inline SyntheticSet init_synthetic(const datagen::OmniDataset& ds, int n, const DistillConfig& cfg,
                                   uint64_t seed) {
    cfg.validate();
    if (n > ds.instance_count()) throw DimensionError("init_synthetic: n exceeds dataset size");
    datagen::OmniDataset sub = datagen::sample_real_subset(ds, n, splitmix64(seed ^ 0xd15711));

    SyntheticSet syn;
    syn.modality_names = sub.modality_names;
    syn.embeddings = std::move(sub.modalities);
    syn.sim_alpha = cfg.sim_alpha;
    syn.student_lr = cfg.lr_teacher;

    const int r = cfg.sim_rank;
    if (r > n) throw ConfigError("init_synthetic: sim_rank must be <= n");
    CounterRng rng(seed, 0x51);
    const double scale = cfg.sim_alpha / std::sqrt(static_cast<double>(r));
    syn.sim_a.resize(n, r);
    syn.sim_b.resize(n, r);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < r; ++j) syn.sim_a(i, j) = scale * rng.next_uniform(-1.0, 1.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < r; ++j) syn.sim_b(i, j) = scale * rng.next_uniform(-1.0, 1.0);
    return syn;
}

namespace taped {

// Column-of-vars helpers over the scalar tape.

inline Var dot(tape::Tape& t, const VarVec& a, const VarVec& b) { return t.dot(a, b); }

inline VarVec matvec(tape::Tape& t, const VarMat& w, const VarVec& x) {
    VarVec y;
    y.reserve(w.size());
    for (const auto& row : w) y.push_back(t.dot(row, x));
    return y;
}

inline VarVec normalize(tape::Tape& t, const VarVec& y, const char* what) {
    Var norm = t.sqrt_(t.dot(y, y));
    if (t.val(norm) < model::kNormFloor) throw NumericError(std::string(what) + ": vector norm vanished");
    VarVec z;
    z.reserve(y.size());
    for (Var v : y) z.push_back(t.div(v, norm));
    return z;
}

struct TapedSpectrum {
    VarVec lambda;  // descending
    VarVec sigma;   // sqrt(max(lambda, floor))
    VarMat u;       // u[j] = eigenvector column j
};

// Cyclic Jacobi recorded on tape; branch choices (rotation sign, sweep count,
// sort order, sign convention) are fixed by the concrete values at build time.
inline TapedSpectrum taped_spectrum(tape::Tape& t, const VarMat& z) {
    const int k = static_cast<int>(z.size());
    // Gram
    VarMat a(k, VarVec(k));
    for (int i = 0; i < k; ++i)
        for (int j = i; j < k; ++j) a[i][j] = a[j][i] = dot(t, z[i], z[j]);

    VarMat v(k, VarVec(k));
    const Var zero = t.constant(0.0), one = t.constant(1.0), two = t.constant(2.0);
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) v[i][j] = (i == j) ? one : zero;

    double scale = 1.0;
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) scale = std::max(scale, std::abs(t.val(a[i][j])));
    const double tol = 1e-15 * scale * k;

    auto off_norm = [&]() {
        double s = 0.0;
        for (int p = 0; p < k; ++p)
            for (int q = p + 1; q < k; ++q) s += t.val(a[p][q]) * t.val(a[p][q]);
        return std::sqrt(2.0 * s);
    };

    int sweep = 0;
    for (; sweep < 64 && off_norm() > tol; ++sweep) {
        for (int p = 0; p < k - 1; ++p) {
            for (int q = p + 1; q < k; ++q) {
                if (std::abs(t.val(a[p][q])) <= tol * 1e-2) continue;
                Var apq = a[p][q];
                Var theta = t.div(t.sub(a[q][q], a[p][p]), t.mul(two, apq));
                const double sgn = t.val(theta) >= 0.0 ? 1.0 : -1.0;
                Var abs_theta = sgn >= 0.0 ? theta : t.neg(theta);
                Var tv = t.div(t.constant(sgn), t.add(abs_theta, t.sqrt_(t.add(t.mul(theta, theta), one))));
                Var c = t.div(one, t.sqrt_(t.add(t.mul(tv, tv), one)));
                Var s = t.mul(tv, c);

                Var app = a[p][p], aqq = a[q][q];
                a[p][p] = t.sub(app, t.mul(tv, apq));
                a[q][q] = t.add(aqq, t.mul(tv, apq));
                // The rotated (p,q) entry is identically zero as a function
                // of the inputs, so a constant is its exact linearization.
                a[p][q] = a[q][p] = zero;
                for (int i = 0; i < k; ++i) {
                    if (i == p || i == q) continue;
                    Var aip = a[i][p], aiq = a[i][q];
                    a[i][p] = a[p][i] = t.sub(t.mul(c, aip), t.mul(s, aiq));
                    a[i][q] = a[q][i] = t.add(t.mul(s, aip), t.mul(c, aiq));
                }
                for (int i = 0; i < k; ++i) {
                    Var vip = v[i][p], viq = v[i][q];
                    v[i][p] = t.sub(t.mul(c, vip), t.mul(s, viq));
                    v[i][q] = t.add(t.mul(s, vip), t.mul(c, viq));
                }
            }
        }
    }
    if (off_norm() > tol) throw NumericError("taped_spectrum: Jacobi did not converge");

    std::vector<int> order(k);
    for (int j = 0; j < k; ++j) order[j] = j;
    std::stable_sort(order.begin(), order.end(),
                     [&](int x, int y) { return t.val(a[x][x]) > t.val(a[y][y]); });

    TapedSpectrum s;
    s.lambda.reserve(k);
    s.sigma.reserve(k);
    s.u.assign(k, VarVec(k));
    const Var floor = t.constant(1e-30);
    for (int j = 0; j < k; ++j) {
        const int c = order[j];
        s.lambda.push_back(a[c][c]);
        s.sigma.push_back(t.sqrt_(t.max_(a[c][c], floor)));
        double colsum = 0.0;
        for (int i = 0; i < k; ++i) colsum += t.val(v[i][c]);
        bool flip = colsum < 0.0;
        if (colsum == 0.0) {
            for (int i = 0; i < k; ++i) {
                if (t.val(v[i][c]) != 0.0) {
                    flip = t.val(v[i][c]) < 0.0;
                    break;
                }
            }
        }
        for (int i = 0; i < k; ++i) s.u[j][i] = flip ? t.neg(v[i][c]) : v[i][c];
    }
    return s;
}

// v_j = zᵀ u_j / σ_j
inline VarVec right_vector(tape::Tape& t, const VarMat& z, const VarVec& u_col, Var sigma) {
    const int k = static_cast<int>(z.size());
    const int d = static_cast<int>(z[0].size());
    VarVec v(d), col(k);
    for (int p = 0; p < d; ++p) {
        for (int m = 0; m < k; ++m) col[m] = z[m][p];
        v[p] = t.div(t.dot(u_col, col), sigma);
    }
    return v;
}

// -log softmax(sigma_1 / tau): sigmas arrive sorted descending, so the
// leading value doubles as the max shift.
inline Var modality_loss_instance(tape::Tape& t, const VarVec& sigma, double tau) {
    const Var tau_c = t.constant(tau);
    Var z = tape::kNoVar;
    for (size_t j = 0; j < sigma.size(); ++j) {
        Var e = t.exp_(t.div(t.sub(sigma[j], sigma[0]), tau_c));
        z = (j == 0) ? e : t.add(z, e);
    }
    return t.log_(z);
}

// Two-group weighted BCE; group membership and counts come from the target
// values at build time (the split is piecewise constant in the targets).
inline Var grouped_bce(tape::Tape& t, const VarMat& s_hat, const VarMat& targets, double tau_prime,
                       double beta) {
    const int n = static_cast<int>(s_hat.size());
    const Var one = t.constant(1.0);
    const Var tau_c = t.constant(tau_prime);
    int pos = 0, neg = 0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) (t.val(targets[i][j]) > beta ? pos : neg)++;

    Var pos_sum = tape::kNoVar, neg_sum = tape::kNoVar;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            Var q = t.sigmoid(t.div(s_hat[i][j], tau_c));
            Var s = targets[i][j];
            Var l = t.neg(t.add(t.mul(s, t.log_(q)), t.mul(t.sub(one, s), t.log_(t.sub(one, q)))));
            if (t.val(targets[i][j]) > beta)
                pos_sum = pos_sum == tape::kNoVar ? l : t.add(pos_sum, l);
            else
                neg_sum = neg_sum == tape::kNoVar ? l : t.add(neg_sum, l);
        }
    }
    Var loss = t.constant(0.0);
    if (pos > 0) loss = t.add(loss, t.mul(t.constant(1.0 / pos), pos_sum));
    if (neg > 0) loss = t.add(loss, t.mul(t.constant(1.0 / neg), neg_sum));
    return loss;
}

}  // namespace taped

// Recorded rollout: leaf handles for the synthetic parameters, the endpoint
// parameter nodes, and (after attach_matching_loss) the outer objective node.
struct RolloutTape {
    tape::Tape t;
    std::vector<VarMat> x_vars;  // [m][i][q], all n synthetic rows
    VarMat a_vars, b_vars;       // n x r (empty when S_e is frozen)
    Var log_eta = tape::kNoVar;
    std::vector<VarMat> theta_end;  // [m][p][q]
    Var match_var = tape::kNoVar;
    std::vector<double> denominators;        // per-branch matching denominators
    std::vector<double> last_pair_components;  // composite variants, last inner step

    double endpoint(int m, int p, int q) const { return t.val(theta_end[m][p][q]); }

    model::ProjectionHeads endpoint_heads() const {
        model::ProjectionHeads h;
        for (const auto& wm : theta_end) {
            Matrix w(wm.size(), wm[0].size());
            for (size_t p = 0; p < wm.size(); ++p)
                for (size_t q = 0; q < wm[p].size(); ++q) w(p, q) = t.val(wm[p][q]);
            h.weights.push_back(std::move(w));
        }
        return h;
    }
};

namespace detail {

struct InstanceGraph {
    VarMat z;  // k rows of d vars (normalized)
    taped::TapedSpectrum spec;
    VarVec proxy;  // v1, or the rank-2 concatenation for Method::rank2
    bool has_spectrum = false;
};

// Forward one synthetic instance through the taped heads, with the seeded
// jitter escape when the leading (and, for rank-2, second) eigengap closes.
inline InstanceGraph build_instance(tape::Tape& t, const std::vector<VarMat>& theta,
                                    const std::vector<VarMat>& x_vars, int idx, Method method,
                                    double gap_tol, uint64_t jitter_seed) {
    const int k = static_cast<int>(theta.size());
    InstanceGraph g;
    g.z.resize(k);
    for (int m = 0; m < k; ++m)
        g.z[m] = taped::normalize(t, taped::matvec(t, theta[m], x_vars[m][idx]), "student_rollout");

    const bool needs_spectrum =
        method == Method::hopa || method == Method::rank2 || method == Method::no_instance ||
        method == Method::no_modality || method == Method::no_mining;
    if (!needs_spectrum) return g;

    for (int attempt = 0;; ++attempt) {
        g.spec = taped::taped_spectrum(t, g.z);
        const double gap1 = t.val(g.spec.lambda[0]) - t.val(g.spec.lambda[1]);
        // the second gap only matters when the rank-2 proxy actually uses
        // mode 2; below gap_tol it degrades to the rank-1 form instead
        const bool needs_second_gap =
            (method == Method::rank2) && k > 2 && t.val(g.spec.lambda[1]) >= gap_tol;
        const double gap2 = needs_second_gap ? t.val(g.spec.lambda[1]) - t.val(g.spec.lambda[2]) : gap_tol;
        if (gap1 >= gap_tol && gap2 >= gap_tol) break;
        if (attempt >= 3)
            throw NumericError("student_rollout: degenerate spectrum unresolved by jitter (instance " +
                               std::to_string(idx) + ")");
        CounterRng jrng(jitter_seed, (static_cast<uint64_t>(idx) << 4) | static_cast<uint64_t>(attempt));
        for (int m = 0; m < k; ++m) {
            VarVec perturbed;
            perturbed.reserve(g.z[m].size());
            for (Var zv : g.z[m]) perturbed.push_back(t.add(zv, t.constant(1e-7 * jrng.next_normal())));
            g.z[m] = taped::normalize(t, perturbed, "student_rollout");
        }
    }
    g.has_spectrum = true;

    if (method == Method::rank2) {
        VarVec v1 = taped::right_vector(t, g.z, g.spec.u[0], g.spec.sigma[0]);
        const int d = static_cast<int>(v1.size());
        Var s1 = g.spec.sigma[0];
        g.proxy.resize(2 * d);
        if (t.val(g.spec.lambda[1]) < gap_tol) {
            // numerically rank-1 data: second block vanishes, proxy reduces to v1
            const Var zero = t.constant(0.0);
            for (int p = 0; p < d; ++p) g.proxy[p] = v1[p];
            for (int p = 0; p < d; ++p) g.proxy[d + p] = zero;
        } else {
            VarVec v2 = taped::right_vector(t, g.z, g.spec.u[1], g.spec.sigma[1]);
            Var s2 = g.spec.sigma[1];
            Var scale = t.sqrt_(t.add(t.mul(s1, s1), t.mul(s2, s2)));
            for (int p = 0; p < d; ++p) g.proxy[p] = t.div(t.mul(s1, v1[p]), scale);
            for (int p = 0; p < d; ++p) g.proxy[d + p] = t.div(t.mul(s2, v2[p]), scale);
        }
    } else if (method != Method::no_instance) {
        g.proxy = taped::right_vector(t, g.z, g.spec.u[0], g.spec.sigma[0]);
    }
    return g;
}

inline bool is_composite(Method m) {
    return m == Method::three_pair || m == Method::t_bind || m == Method::v_bind;
}

// Inner objective for one mini-batch, as a tape node. For composite variants
// the per-pair loss nodes are reported through `pair_vars`.
inline Var build_inner_loss(tape::Tape& t, const std::vector<InstanceGraph>& batch, const VarMat& targets,
                            Method method, const objectives::LossConfig& loss, VarVec* pair_vars = nullptr) {
    const int b = static_cast<int>(batch.size());

    if (is_composite(method)) {
        using objectives::CompositeVariant;
        CompositeVariant v = method == Method::three_pair ? CompositeVariant::ThreePair
                             : method == Method::t_bind   ? CompositeVariant::TBind
                                                          : CompositeVariant::VBind;
        const int k = static_cast<int>(batch[0].z.size());
        Var total = tape::kNoVar;
        for (auto [ma, mb] : objectives::composite_pairs(v)) {
            if (ma >= k || mb >= k)
                throw DimensionError("student_rollout: variant requires a modality absent from the batch");
            VarMat s_hat(b, VarVec(b));
            for (int i = 0; i < b; ++i)
                for (int j = 0; j < b; ++j) s_hat[i][j] = taped::dot(t, batch[i].z[ma], batch[j].z[mb]);
            Var lw = taped::grouped_bce(t, s_hat, targets, loss.tau_prime, loss.beta);
            if (pair_vars) pair_vars->push_back(lw);
            total = total == tape::kNoVar ? lw : t.add(total, lw);
        }
        return total;
    }

    Var total = tape::kNoVar;
    if (method != Method::no_modality) {
        Var lm = tape::kNoVar;
        for (const auto& inst : batch) {
            Var li = taped::modality_loss_instance(t, inst.spec.sigma, loss.tau);
            lm = lm == tape::kNoVar ? li : t.add(lm, li);
        }
        total = t.mul(t.constant(1.0 / b), lm);
    }
    if (method != Method::no_instance) {
        VarMat s_hat(b, VarVec(b));
        for (int i = 0; i < b; ++i)
            for (int j = 0; j < b; ++j) s_hat[i][j] = taped::dot(t, batch[i].proxy, batch[j].proxy);
        Var lw = taped::grouped_bce(t, s_hat, targets, loss.tau_prime, loss.beta);
        total = total == tape::kNoVar ? lw : t.add(total, lw);
    }
    return total;
}

}  // namespace detail

// Record t = syn_steps differentiable SGD steps from `start` on the inner
// loss over seeded mini-batches of the synthetic set. Building into an
// existing RolloutTape reuses its node storage.
inline void build_rollout(RolloutTape& roll, const model::ProjectionHeads& start, const SyntheticSet& syn,
                          const DistillConfig& cfg, CounterRng& rng, Method method) {
    cfg.validate();
    const int k = syn.modality_count();
    const int n = syn.instance_count();
    if (k != start.modality_count()) throw DimensionError("student_rollout: modality count mismatch");

    RolloutTape* rt = &roll;
    rt->t.clear();
    rt->x_vars.clear();
    rt->a_vars.clear();
    rt->b_vars.clear();
    rt->theta_end.clear();
    rt->denominators.clear();
    rt->last_pair_components.clear();
    rt->log_eta = tape::kNoVar;
    rt->match_var = tape::kNoVar;
    tape::Tape& t = rt->t;

    // leaves
    rt->x_vars.resize(k);
    for (int m = 0; m < k; ++m) {
        rt->x_vars[m].resize(n);
        for (int i = 0; i < n; ++i) {
            const int din = static_cast<int>(syn.embeddings[m].cols());
            rt->x_vars[m][i].resize(din);
            for (int q = 0; q < din; ++q) rt->x_vars[m][i][q] = t.input(syn.embeddings[m](i, q));
        }
    }
    const int r = syn.sim_rank();
    const bool frozen_sim = (method == Method::no_mining);
    if (!frozen_sim) {
        rt->a_vars.resize(n, VarVec(r));
        rt->b_vars.resize(n, VarVec(r));
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < r; ++j) {
                rt->a_vars[i][j] = t.input(syn.sim_a(i, j));
                rt->b_vars[i][j] = t.input(syn.sim_b(i, j));
            }
    }
    rt->log_eta = t.input(std::log(syn.student_lr));
    const Var eta = t.exp_(rt->log_eta);

    std::vector<VarMat> theta(k);
    VarVec theta_flat;
    for (int m = 0; m < k; ++m) {
        const auto& w = start.weights[m];
        theta[m].resize(w.rows(), VarVec(w.cols()));
        for (Eigen::Index p = 0; p < w.rows(); ++p)
            for (Eigen::Index q = 0; q < w.cols(); ++q) {
                theta[m][p][q] = t.input(w(p, q));
                theta_flat.push_back(theta[m][p][q]);
            }
    }

    const double eps = objectives::SimilarityTargets::kClampEps;
    const Matrix frozen_targets = frozen_sim ? syn.similarity() : Matrix();
    const int bsize = std::min(cfg.mini_batch_size, n);

    for (int step = 0; step < cfg.syn_steps; ++step) {
        std::vector<int> idx = rng.sample_without_replacement(n, bsize);
        const uint64_t jitter_seed = splitmix64(cfg.seed ^ (0x7111ull + static_cast<uint64_t>(step)));

        std::vector<detail::InstanceGraph> batch;
        batch.reserve(bsize);
        for (int i : idx)
            batch.push_back(detail::build_instance(t, theta, rt->x_vars, i, method, cfg.gap_tol, jitter_seed));

        // S_e sub-block for the sampled indices
        VarMat targets(bsize, VarVec(bsize));
        const Var lo = t.constant(eps), hi = t.constant(1.0 - eps);
        for (int bi = 0; bi < bsize; ++bi) {
            for (int bj = 0; bj < bsize; ++bj) {
                if (frozen_sim) {
                    targets[bi][bj] = t.constant(frozen_targets(idx[bi], idx[bj]));
                    continue;
                }
                Var s = taped::dot(t, rt->a_vars[idx[bi]], rt->b_vars[idx[bj]]);
                if (idx[bi] == idx[bj]) s = t.add(s, t.constant(1.0));
                targets[bi][bj] = t.min_(t.max_(s, lo), hi);
            }
        }

        VarVec pair_vars;
        Var loss = detail::build_inner_loss(t, batch, targets, method, cfg.loss,
                                            detail::is_composite(method) ? &pair_vars : nullptr);
        if (!std::isfinite(t.val(loss)))
            throw NumericError("student_rollout: non-finite inner loss at step " + std::to_string(step));
        if (step == cfg.syn_steps - 1) {
            rt->last_pair_components.clear();
            for (Var pv : pair_vars) rt->last_pair_components.push_back(t.val(pv));
        }

        VarVec g = t.grad_vars(loss, theta_flat);
        // Two passes so the new θ nodes form one contiguous block: the next
        // step's grad_vars sweep then starts exactly at that block.
        VarVec scaled(g.size());
        for (size_t i = 0; i < g.size(); ++i) scaled[i] = t.mul(eta, g[i]);
        size_t at = 0;
        for (int m = 0; m < k; ++m)
            for (auto& row : theta[m])
                for (auto& wv : row) {
                    wv = t.sub(wv, scaled[at]);
                    theta_flat[at] = wv;
                    ++at;
                }
    }

    rt->theta_end = std::move(theta);
}

inline std::unique_ptr<RolloutTape> student_rollout(const model::ProjectionHeads& start,
                                                    const SyntheticSet& syn, const DistillConfig& cfg,
                                                    CounterRng& rng, Method method = Method::hopa) {
    auto rt = std::make_unique<RolloutTape>();
    rt->t.reserve(1 << 20);
    build_rollout(*rt, start, syn, cfg, rng, method);
    return rt;
}

struct MatchingLoss {
    double value = 0.0;
    std::vector<double> per_branch;
};

// Σ_m ||θ_e,m - θ_T,m||² / ||θ_0,m - θ_T,m||²
inline MatchingLoss matching_loss(const model::ProjectionHeads& endpoint, const buffer::TeacherSegment& seg) {
    endpoint.require_same_shape(seg.target, "matching_loss");
    MatchingLoss out;
    for (size_t m = 0; m < endpoint.weights.size(); ++m) {
        const double denom = (seg.start.weights[m] - seg.target.weights[m]).squaredNorm();
        if (denom < 1e-16)
            throw NumericError("matching_loss: degenerate teacher motion on branch " + std::to_string(m));
        const double num = (endpoint.weights[m] - seg.target.weights[m]).squaredNorm();
        out.per_branch.push_back(num / denom);
        out.value += num / denom;
    }
    return out;
}

inline bool segment_degenerate(const buffer::TeacherSegment& seg) {
    for (size_t m = 0; m < seg.start.weights.size(); ++m)
        if ((seg.start.weights[m] - seg.target.weights[m]).squaredNorm() < 1e-16) return true;
    return false;
}

// Append the branch-normalized matching loss to the rollout tape.
inline Var attach_matching_loss(RolloutTape& rt, const buffer::TeacherSegment& seg) {
    tape::Tape& t = rt.t;
    Var total = t.constant(0.0);
    rt.denominators.clear();
    for (size_t m = 0; m < rt.theta_end.size(); ++m) {
        const double denom = (seg.start.weights[m] - seg.target.weights[m]).squaredNorm();
        if (denom < 1e-16)
            throw NumericError("attach_matching_loss: degenerate teacher motion on branch " + std::to_string(m));
        rt.denominators.push_back(denom);
        Var num = tape::kNoVar;
        const auto& wt = seg.target.weights[m];
        for (size_t p = 0; p < rt.theta_end[m].size(); ++p)
            for (size_t q = 0; q < rt.theta_end[m][p].size(); ++q) {
                Var dv = t.sub(rt.theta_end[m][p][q],
                               t.constant(wt(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(q))));
                Var sq = t.mul(dv, dv);
                num = num == tape::kNoVar ? sq : t.add(num, sq);
            }
        total = t.add(total, t.mul(t.constant(1.0 / denom), num));
    }
    rt.match_var = total;
    return total;
}

struct OuterState {
    std::vector<Matrix> vel_x;
    Matrix vel_a, vel_b;
    double vel_log_eta = 0.0;

    static OuterState make(const SyntheticSet& syn) {
        OuterState s;
        for (const auto& e : syn.embeddings) s.vel_x.push_back(Matrix::Zero(e.rows(), e.cols()));
        s.vel_a = Matrix::Zero(syn.sim_a.rows(), syn.sim_a.cols());
        s.vel_b = Matrix::Zero(syn.sim_b.rows(), syn.sim_b.cols());
        return s;
    }
};

// Reverse the whole tape once and apply the momentum-SGD outer update.
// Returns false (and leaves everything untouched) on a non-finite
// meta-gradient.
inline bool outer_step(SyntheticSet& syn, RolloutTape& rt, const DistillConfig& cfg, OuterState& state) {
    if (rt.match_var == tape::kNoVar)
        throw NumericError("outer_step: matching loss not attached to the rollout tape");
    const int k = syn.modality_count();
    const int n = syn.instance_count();
    const int r = syn.sim_rank();
    const bool with_sim = !rt.a_vars.empty();

    VarVec leaves;
    for (int m = 0; m < k; ++m)
        for (int i = 0; i < n; ++i)
            for (Var v : rt.x_vars[m][i]) leaves.push_back(v);
    if (with_sim) {
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < r; ++j) leaves.push_back(rt.a_vars[i][j]);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < r; ++j) leaves.push_back(rt.b_vars[i][j]);
    }
    leaves.push_back(rt.log_eta);

    const std::vector<double> g = rt.t.gradient(rt.match_var, leaves);
    for (double v : g)
        if (!std::isfinite(v)) return false;

    size_t at = 0;
    const double mu = cfg.momentum;
    for (int m = 0; m < k; ++m) {
        auto& x = syn.embeddings[m];
        auto& vel = state.vel_x[m];
        for (int i = 0; i < n; ++i)
            for (Eigen::Index q = 0; q < x.cols(); ++q, ++at) {
                vel(i, q) = mu * vel(i, q) + g[at];
                if (cfg.lr_data != 0.0) x(i, q) -= cfg.lr_data * vel(i, q);
            }
    }
    if (with_sim) {
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < r; ++j, ++at) {
                state.vel_a(i, j) = mu * state.vel_a(i, j) + g[at];
                if (cfg.lr_sim != 0.0) syn.sim_a(i, j) -= cfg.lr_sim * state.vel_a(i, j);
            }
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < r; ++j, ++at) {
                state.vel_b(i, j) = mu * state.vel_b(i, j) + g[at];
                if (cfg.lr_sim != 0.0) syn.sim_b(i, j) -= cfg.lr_sim * state.vel_b(i, j);
            }
    }
    state.vel_log_eta = mu * state.vel_log_eta + g[at];
    if (cfg.lr_lr != 0.0) syn.student_lr = std::exp(std::log(syn.student_lr) - cfg.lr_lr * state.vel_log_eta);
    return true;
}

struct IterationRecord {
    int iter = 0;
    double matching_loss = 0.0;
    double eta = 0.0;
    int segment_traj = 0;
    int segment_start = 0;
    bool skipped = false;
    std::vector<double> pair_components;  // composite variants only
};

struct DistillResult {
    SyntheticSet syn;
    std::vector<IterationRecord> log;
};

inline DistillResult distill(const datagen::OmniDataset& ds, const std::vector<buffer::ExpertTrajectory>& buf,
                             const DistillConfig& cfg, int n_synthetic, Method method = Method::hopa) {
    cfg.validate();
    if (buf.empty()) throw DimensionError("distill: empty buffer");

    DistillResult out;
    out.syn = init_synthetic(ds, n_synthetic, cfg, cfg.seed);
    OuterState state = OuterState::make(out.syn);

    CounterRng segment_rng(cfg.seed, 0x5e9);
    RolloutTape rt;  // reused across iterations
    rt.t.reserve(1 << 20);
    for (int iter = 0; iter < cfg.iterations; ++iter) {
        buffer::TeacherSegment seg;
        bool found = false;
        for (int attempt = 0; attempt < 10; ++attempt) {
            seg = buffer::sample_segment(buf, cfg.max_start_epoch, cfg.expert_epochs, segment_rng);
            if (!segment_degenerate(seg)) {
                found = true;
                break;
            }
        }
        if (!found) throw NumericError("distill: 10 consecutive degenerate teacher segments");

        const uint64_t iter_seed = splitmix64(cfg.seed ^ (0xabc1ull + static_cast<uint64_t>(iter)));
        CounterRng step_rng(iter_seed, 0x401);
        DistillConfig iter_cfg = cfg;
        iter_cfg.seed = iter_seed;
        build_rollout(rt, seg.start, out.syn, iter_cfg, step_rng, method);
        attach_matching_loss(rt, seg);

        IterationRecord rec;
        rec.iter = iter;
        rec.matching_loss = rt.t.val(rt.match_var);
        rec.segment_traj = seg.trajectory_index;
        rec.segment_start = seg.start_epoch;
        rec.pair_components = rt.last_pair_components;

        rec.skipped = !outer_step(out.syn, rt, cfg, state);
        rec.eta = out.syn.student_lr;
        out.log.push_back(rec);
    }
    return out;
}

inline DistillResult distill_baseline(Method variant, const datagen::OmniDataset& ds,
                                      const std::vector<buffer::ExpertTrajectory>& buf,
                                      const DistillConfig& cfg, int n_synthetic) {
    return distill(ds, buf, cfg, n_synthetic, variant);
}

// Synthetic-set file (OMSS v1): magic, version u32, n u64, k u32, r u32,
// per modality: d_in u64 + n x d_in f64 payload + CRC32, then A + CRC32,
// B + CRC32, and the scalar section (alpha_s, eta as f64) + CRC32.
inline void write_synthetic(const SyntheticSet& syn, const std::filesystem::path& path) {
    io::ByteWriter w;
    w.magic("OMSS");
    w.u32(1);
    w.u64(static_cast<uint64_t>(syn.instance_count()));
    w.u32(static_cast<uint32_t>(syn.modality_count()));
    w.u32(static_cast<uint32_t>(syn.sim_rank()));
    for (const auto& e : syn.embeddings) {
        w.u64(static_cast<uint64_t>(e.cols()));
        w.matrix_section(e);
    }
    w.matrix_section(syn.sim_a);
    w.matrix_section(syn.sim_b);
    io::ByteWriter scal;
    scal.f64(syn.sim_alpha);
    scal.f64(syn.student_lr);
    w.bytes(scal.str().data(), scal.str().size());
    w.u32(io::crc32_of(scal.str().data(), scal.str().size()));
    io::write_file_atomic(path, w.str());
}

inline SyntheticSet read_synthetic(const std::filesystem::path& path) {
    io::ByteReader r(io::read_file(path));
    r.expect_magic("OMSS", "read_synthetic");
    const uint32_t version = r.u32();
    if (version != 1) throw IoError("read_synthetic: unsupported version " + std::to_string(version));
    const uint64_t n = r.u64();
    const uint32_t k = r.u32();
    const uint32_t rank = r.u32();
    SyntheticSet syn;
    for (uint32_t m = 0; m < k; ++m) {
        const uint64_t din = r.u64();
        syn.embeddings.push_back(r.matrix_section(static_cast<Eigen::Index>(n),
                                                  static_cast<Eigen::Index>(din), "read_synthetic"));
        syn.modality_names.push_back("m" + std::to_string(m));
    }
    syn.sim_a = r.matrix_section(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(rank), "read_synthetic");
    syn.sim_b = r.matrix_section(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(rank), "read_synthetic");
    std::string scal = r.str(16);
    const uint32_t stored = r.u32();
    if (stored != io::crc32_of(scal.data(), scal.size()))
        throw IoError("read_synthetic: scalar checksum mismatch");
    io::ByteReader sr(scal);
    syn.sim_alpha = sr.f64();
    syn.student_lr = sr.f64();
    r.done("read_synthetic");
    return syn;
}

}  // namespace omnidistill::distill
