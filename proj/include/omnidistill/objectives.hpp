// Inner-loop losses and their analytic gradients.
//
// Modality level: L_M = -(1/N) Σ_i log softmax(σ_1^{(i)}/τ), pulling each
// instance's Gram matrix toward rank 1. Instance level: proxy-weighted BCE
// between target similarities s_ij and sigmoid(<v_1^{(i)}, v_1^{(j)}>/τ'),
// with the positive (s > β) and negative (s <= β) groups each normalized by
// their own ordered-pair count, diagonal included. Pairwise baselines
// (InfoNCE, wBCE, and 3-pair/T-bind/V-bind composites) operate on raw
// cross-modal cosines of one modality pair.
#pragma once

#include "omnidistill/common.hpp"
#include "omnidistill/spectral.hpp"

namespace omnidistill::objectives {

struct LossConfig {
    double tau = 0.1;
    double tau_prime = 0.2;
    double beta = 0.5;

    void validate() const {
        if (tau <= 0.0) throw ConfigError("LossConfig: tau must be positive");
        if (tau_prime <= 0.0) throw ConfigError("LossConfig: tau_prime must be positive");
        if (beta <= 0.0 || beta >= 1.0) throw ConfigError("LossConfig: beta must be in (0, 1)");
    }
};

struct SimilarityTargets {
    Matrix entries;  // N x N labels in [0, 1]

    static constexpr double kClampEps = 1e-4;

    int size() const { return static_cast<int>(entries.rows()); }

    // Accepts entries verbatim; only validates the [0, 1] range.
    static SimilarityTargets raw(Matrix m) {
        if (m.rows() != m.cols()) throw DimensionError("SimilarityTargets: matrix must be square");
        if ((m.array() < 0.0).any() || (m.array() > 1.0).any())
            throw NumericError("SimilarityTargets: entries outside [0, 1]");
        return SimilarityTargets{std::move(m)};
    }

    static SimilarityTargets clamped(Matrix m) {
        m = m.cwiseMax(kClampEps).cwiseMin(1.0 - kClampEps);
        return SimilarityTargets{std::move(m)};
    }

    // Ground truth for real data: diagonal correspondence, clamped.
    static SimilarityTargets identity(int n) { return clamped(Matrix::Identity(n, n)); }

    SimilarityTargets block(const std::vector<int>& idx) const {
        const int n = static_cast<int>(idx.size());
        Matrix b(n, n);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) b(i, j) = entries(idx[i], idx[j]);
        return SimilarityTargets{std::move(b)};
    }
};

// Closed-form softmax value for one instance, directly from singular values.
inline double modality_loss_value(const Vector& sigmas, double tau) {
    if (tau <= 0.0) throw ConfigError("modality_loss_value: tau must be positive");
    const double smax = sigmas.maxCoeff();
    double z = 0.0;
    for (int j = 0; j < sigmas.size(); ++j) z += std::exp((sigmas[j] - smax) / tau);
    return std::log(z) - (sigmas[0] - smax) / tau;
}

struct ModalityLossResult {
    double value = 0.0;
    std::vector<Matrix> grad_z;  // per instance, k x d
};

// Per-instance gradient (1/(Nτ))[(p_1 - 1) u_1 v_1ᵀ + Σ_{j>=2} p_j u_j v_jᵀ]:
// the leading term is the centripetal pull toward the principal direction,
// the trailing terms suppress energy in the non-principal modes.
inline ModalityLossResult modality_loss(const std::vector<spectral::GramSpectrum>& spectra,
                                        const LossConfig& cfg) {
    cfg.validate();
    const int n = static_cast<int>(spectra.size());
    if (n == 0) throw DimensionError("modality_loss: empty batch");
    ModalityLossResult r;
    r.grad_z.reserve(n);
    for (const auto& s : spectra) {
        if (s.degenerate)
            throw NumericError("modality_loss: degenerate spectrum; jitter the input and retry");
        const int k = s.modes();
        r.value += modality_loss_value(s.sigmas, cfg.tau);

        Vector p(k);
        double z = 0.0;
        for (int j = 0; j < k; ++j) {
            p[j] = std::exp((s.sigmas[j] - s.sigmas[0]) / cfg.tau);
            z += p[j];
        }
        p /= z;

        Matrix g = Matrix::Zero(k, static_cast<int>(s.right_vectors.rows()));
        for (int j = 0; j < k; ++j) {
            const double coeff = (j == 0 ? p[0] - 1.0 : p[j]);
            if (coeff == 0.0) continue;
            // σ_j = 0 is a non-smooth point of the singular value; the
            // vanished mode contributes nothing under the zero-subgradient
            // convention (its direction pair is not even determined).
            if (!s.right_available[j]) continue;
            g += coeff * (s.left_vectors.col(j) * s.right_vectors.col(j).transpose());
        }
        r.grad_z.push_back(g / (n * cfg.tau));
        require_finite(r.grad_z.back(), "modality_loss");
    }
    r.value /= n;
    require_finite(r.value, "modality_loss");
    return r;
}

namespace detail {

// Two-group weighted BCE over an N x N logit-similarity matrix. `s_hat` are
// the raw similarities (pre-sigmoid, pre-temperature). Returns the loss, the
// gradient w.r.t. s_hat and the gradient w.r.t. the targets.
struct GroupedBce {
    double value = 0.0;
    Matrix grad_s_hat;
    Matrix grad_targets;
    bool empty_positive_group = false;
    bool empty_negative_group = false;
};

inline GroupedBce grouped_bce(const Matrix& s_hat, const Matrix& targets, double tau_prime, double beta) {
    const int n = static_cast<int>(s_hat.rows());
    if (targets.rows() != n || targets.cols() != n || s_hat.cols() != n)
        throw DimensionError("grouped_bce: shape mismatch");

    int pos = 0, neg = 0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) (targets(i, j) > beta ? pos : neg)++;

    GroupedBce r;
    r.empty_positive_group = (pos == 0);
    r.empty_negative_group = (neg == 0);
    r.grad_s_hat = Matrix::Zero(n, n);
    r.grad_targets = Matrix::Zero(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            const double s = targets(i, j);
            const int count = s > beta ? pos : neg;
            if (count == 0) continue;
            const double w = 1.0 / count;
            const double q = 1.0 / (1.0 + std::exp(-s_hat(i, j) / tau_prime));
            r.value += w * (-s * std::log(q) - (1.0 - s) * std::log(1.0 - q));
            r.grad_s_hat(i, j) = w * (q - s) / tau_prime;
            r.grad_targets(i, j) = w * std::log((1.0 - q) / q);
        }
    }
    require_finite(r.value, "grouped_bce");
    return r;
}

}  // namespace detail

struct WbceResult {
    double value = 0.0;
    std::vector<Vector> grad_proxy;  // per instance, d
    Matrix grad_targets;             // N x N
    bool empty_positive_group = false;
    bool empty_negative_group = false;
};

inline WbceResult wbce_loss(const SimilarityTargets& targets, const std::vector<Vector>& proxies,
                            const LossConfig& cfg) {
    cfg.validate();
    const int n = static_cast<int>(proxies.size());
    if (n == 0) throw DimensionError("wbce_loss: empty batch");
    if (targets.size() != n) throw DimensionError("wbce_loss: targets size must match proxy count");
    const int d = static_cast<int>(proxies[0].size());
    Matrix v(n, d);
    for (int i = 0; i < n; ++i) {
        if (proxies[i].size() != d) throw DimensionError("wbce_loss: proxy dimension mismatch");
        v.row(i) = proxies[i];
    }

    const Matrix s_hat = v * v.transpose();
    detail::GroupedBce bce = detail::grouped_bce(s_hat, targets.entries, cfg.tau_prime, cfg.beta);

    WbceResult r;
    r.value = bce.value;
    r.grad_targets = std::move(bce.grad_targets);
    r.empty_positive_group = bce.empty_positive_group;
    r.empty_negative_group = bce.empty_negative_group;

    // d(s_hat_ij)/d(v_i) = v_j for i != j, and 2 v_i on the diagonal; each
    // proxy appears in both anchor and candidate roles.
    const Matrix coeff = bce.grad_s_hat + bce.grad_s_hat.transpose();
    Matrix grad = coeff * v;
    r.grad_proxy.reserve(n);
    for (int i = 0; i < n; ++i) r.grad_proxy.push_back(grad.row(i).transpose());
    return r;
}

struct BatchLossReport {
    double value = 0.0;
    double modality_value = 0.0;
    double wbce_value = 0.0;
    std::vector<Matrix> grad_z;      // per instance, k x d
    std::vector<Vector> grad_proxy;  // per instance, d
    Matrix grad_targets;             // N x N
    bool empty_positive_group = false;
    bool empty_negative_group = false;
};

// L = L_M + L_wBCE(S_e). The wBCE-through-proxy gradient is chained back to
// z with the singular-vector perturbation adjoint.
inline BatchLossReport inner_loss(const std::vector<spectral::EmbeddingMatrix>& z_batch,
                                  const SimilarityTargets& targets, const LossConfig& cfg,
                                  double gap_tol = spectral::kDefaultGapTol) {
    const int n = static_cast<int>(z_batch.size());
    if (n == 0) throw DimensionError("inner_loss: empty batch");
    std::vector<spectral::GramSpectrum> spectra;
    spectra.reserve(n);
    for (const auto& z : z_batch) spectra.push_back(spectral::spectrum(z, gap_tol));

    ModalityLossResult m = modality_loss(spectra, cfg);
    std::vector<Vector> proxies;
    proxies.reserve(n);
    for (const auto& s : spectra) proxies.push_back(s.proxy);
    WbceResult w = wbce_loss(targets, proxies, cfg);

    BatchLossReport r;
    r.modality_value = m.value;
    r.wbce_value = w.value;
    r.value = m.value + w.value;
    r.grad_targets = std::move(w.grad_targets);
    r.empty_positive_group = w.empty_positive_group;
    r.empty_negative_group = w.empty_negative_group;
    r.grad_z = std::move(m.grad_z);
    for (int i = 0; i < n; ++i)
        r.grad_z[i] += spectral::proxy_adjoint(z_batch[i], spectra[i], w.grad_proxy[i]);
    r.grad_proxy = std::move(w.grad_proxy);
    return r;
}

struct PairwiseResult {
    double value = 0.0;
    Matrix grad_a;  // N x d
    Matrix grad_b;  // N x d
    Matrix grad_targets;
    bool empty_positive_group = false;
    bool empty_negative_group = false;
};

// Direction-symmetric InfoNCE over the N x N cross-modal similarity matrix;
// g_ml = (p_ml - 1[m=l]) / (N tau) per direction, averaged over directions.
inline PairwiseResult pairwise_infonce(const Matrix& za, const Matrix& zb, double tau) {
    if (tau <= 0.0) throw ConfigError("pairwise_infonce: tau must be positive");
    const int n = static_cast<int>(za.rows());
    if (zb.rows() != n) throw DimensionError("pairwise_infonce: batch size mismatch");
    if (za.cols() != zb.cols()) throw DimensionError("pairwise_infonce: embedding dimension mismatch");
    if (n < 2) throw DimensionError("pairwise_infonce: need at least 2 instances");

    const Matrix s = za * zb.transpose();
    Matrix g = Matrix::Zero(n, n);
    double loss = 0.0;
    // anchor direction: softmax over candidates l for each row m
    for (int m = 0; m < n; ++m) {
        const double smax = s.row(m).maxCoeff();
        double z = 0.0;
        for (int l = 0; l < n; ++l) z += std::exp((s(m, l) - smax) / tau);
        loss += std::log(z) - (s(m, m) - smax) / tau;
        for (int l = 0; l < n; ++l)
            g(m, l) += 0.5 * (std::exp((s(m, l) - smax) / tau) / z - (m == l ? 1.0 : 0.0)) / (n * tau);
    }
    // candidate direction: softmax over anchors m for each column l
    for (int l = 0; l < n; ++l) {
        const double smax = s.col(l).maxCoeff();
        double z = 0.0;
        for (int m = 0; m < n; ++m) z += std::exp((s(m, l) - smax) / tau);
        loss += std::log(z) - (s(l, l) - smax) / tau;
        for (int m = 0; m < n; ++m)
            g(m, l) += 0.5 * (std::exp((s(m, l) - smax) / tau) / z - (m == l ? 1.0 : 0.0)) / (n * tau);
    }

    PairwiseResult r;
    r.value = loss / (2.0 * n);
    r.grad_a = g * zb;
    r.grad_b = g.transpose() * za;
    require_finite(r.value, "pairwise_infonce");
    return r;
}

// Two-group wBCE on raw cross-modal cosines of one modality pair.
inline PairwiseResult pairwise_wbce(const Matrix& za, const Matrix& zb, const SimilarityTargets& targets,
                                    const LossConfig& cfg) {
    cfg.validate();
    const int n = static_cast<int>(za.rows());
    if (zb.rows() != n) throw DimensionError("pairwise_wbce: batch size mismatch");
    if (targets.size() != n) throw DimensionError("pairwise_wbce: targets size mismatch");

    const Matrix s_hat = za * zb.transpose();
    detail::GroupedBce bce = detail::grouped_bce(s_hat, targets.entries, cfg.tau_prime, cfg.beta);

    PairwiseResult r;
    r.value = bce.value;
    r.grad_a = bce.grad_s_hat * zb;
    r.grad_b = bce.grad_s_hat.transpose() * za;
    r.grad_targets = std::move(bce.grad_targets);
    r.empty_positive_group = bce.empty_positive_group;
    r.empty_negative_group = bce.empty_negative_group;
    return r;
}

enum class CompositeVariant { ThreePair, TBind, VBind };

inline const char* composite_name(CompositeVariant v) {
    switch (v) {
        case CompositeVariant::ThreePair: return "3pair";
        case CompositeVariant::TBind: return "Tbind";
        case CompositeVariant::VBind: return "Vbind";
    }
    return "?";
}

// Modality roles by position: 0 = video, 1 = audio, 2 = text.
inline std::vector<std::pair<int, int>> composite_pairs(CompositeVariant v) {
    switch (v) {
        case CompositeVariant::ThreePair: return {{0, 2}, {0, 1}, {1, 2}};
        case CompositeVariant::TBind: return {{0, 2}, {1, 2}};
        case CompositeVariant::VBind: return {{0, 2}, {0, 1}};
    }
    return {};
}

struct CompositeResult {
    double value = 0.0;
    std::vector<double> pair_values;           // one per pair, in composite_pairs order
    std::vector<Matrix> grad_z;                // per instance, k x d
    Matrix grad_targets;
};

inline CompositeResult composite_pairwise(CompositeVariant variant,
                                          const std::vector<spectral::EmbeddingMatrix>& batch,
                                          const SimilarityTargets& targets, const LossConfig& cfg) {
    const int n = static_cast<int>(batch.size());
    if (n == 0) throw DimensionError("composite_pairwise: empty batch");
    const int k = batch[0].k;
    const int d = batch[0].d;
    const auto pairs = composite_pairs(variant);
    for (const auto& [a, b] : pairs)
        if (a >= k || b >= k)
            throw DimensionError("composite_pairwise: variant requires a modality absent from the batch");

    CompositeResult r;
    r.grad_z.assign(n, Matrix::Zero(k, d));
    r.grad_targets = Matrix::Zero(n, n);
    for (const auto& [a, b] : pairs) {
        Matrix za(n, d), zb(n, d);
        for (int i = 0; i < n; ++i) {
            za.row(i) = batch[i].rows.row(a);
            zb.row(i) = batch[i].rows.row(b);
        }
        PairwiseResult p = pairwise_wbce(za, zb, targets, cfg);
        r.value += p.value;
        r.pair_values.push_back(p.value);
        r.grad_targets += p.grad_targets;
        for (int i = 0; i < n; ++i) {
            r.grad_z[i].row(a) += p.grad_a.row(i);
            r.grad_z[i].row(b) += p.grad_b.row(i);
        }
    }
    return r;
}

}  // namespace omnidistill::objectives
