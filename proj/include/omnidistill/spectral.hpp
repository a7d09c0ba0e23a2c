// Rank-1 spectral proxy over per-instance modality Gram matrices.
//
// The stacked representation z ∈ R^{k×d} (one row per modality) has Gram
// matrix G = z zᵀ. Its eigenpairs (λ_j, u_j), λ_j = σ_j², give the proxy
// direction v_1 = zᵀu_1 / σ_1 via modality-feature duality. Everything here
// works on tiny k×k matrices, so the eigensolver is a cyclic Jacobi sweep
// over the Gram matrix rather than a general SVD of z.
#pragma once

#include "omnidistill/common.hpp"

#include <algorithm>
#include <numeric>

namespace omnidistill::spectral {

constexpr double kRowNormTol = 1e-9;
constexpr double kDefaultGapTol = 1e-6;
constexpr double kPsdTol = 1e-10;

// Per-instance stacked modality representations. Rows are unit-norm in the
// production path; `unchecked` skips validation for finite-difference probes
// that step off the unit sphere.
struct EmbeddingMatrix {
    Matrix rows;  // k x d
    int k = 0;
    int d = 0;

    static EmbeddingMatrix checked(Matrix m) {
        EmbeddingMatrix z = unchecked(std::move(m));
        if (z.k < 2) throw DimensionError("EmbeddingMatrix: need at least 2 modalities");
        if (z.d < z.k) throw DimensionError("EmbeddingMatrix: embedding dimension must be >= modality count");
        for (int i = 0; i < z.k; ++i) {
            double n = z.rows.row(i).norm();
            if (std::abs(n - 1.0) > kRowNormTol)
                throw NumericError("EmbeddingMatrix: row " + std::to_string(i) + " is not unit-norm (|" +
                                   std::to_string(n) + " - 1| > 1e-9)");
        }
        return z;
    }

    static EmbeddingMatrix unchecked(Matrix m) {
        EmbeddingMatrix z;
        z.k = static_cast<int>(m.rows());
        z.d = static_cast<int>(m.cols());
        z.rows = std::move(m);
        return z;
    }
};

inline Matrix gram(const EmbeddingMatrix& z) {
    require_finite(z.rows, "gram");
    return z.rows * z.rows.transpose();
}

struct JacobiResult {
    Vector eigenvalues;   // unsorted, diagonal after convergence
    Matrix eigenvectors;  // columns
    int sweeps = 0;
};

// Cyclic-by-row Jacobi for small symmetric matrices.
inline JacobiResult jacobi_eigen_sym(Matrix a, int max_sweeps = 64) {
    const int n = static_cast<int>(a.rows());
    if (a.cols() != n) throw DimensionError("jacobi_eigen_sym: matrix must be square");
    Matrix v = Matrix::Identity(n, n);
    const double scale = std::max(1.0, a.norm());
    const double tol = 1e-15 * scale;

    auto off_norm = [&]() {
        double s = 0.0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) s += a(p, q) * a(p, q);
        return std::sqrt(2.0 * s);
    };

    int sweep = 0;
    for (; sweep < max_sweeps; ++sweep) {
        if (off_norm() <= tol) break;
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (std::abs(apq) <= tol * 1e-2) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double sgn = theta >= 0.0 ? 1.0 : -1.0;
                const double t = sgn / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;

                const double app = a(p, p), aqq = a(q, q);
                a(p, p) = app - t * apq;
                a(q, q) = aqq + t * apq;
                a(p, q) = 0.0;
                a(q, p) = 0.0;
                for (int i = 0; i < n; ++i) {
                    if (i == p || i == q) continue;
                    const double aip = a(i, p), aiq = a(i, q);
                    a(i, p) = c * aip - s * aiq;
                    a(p, i) = a(i, p);
                    a(i, q) = s * aip + c * aiq;
                    a(q, i) = a(i, q);
                }
                for (int i = 0; i < n; ++i) {
                    const double vip = v(i, p), viq = v(i, q);
                    v(i, p) = c * vip - s * viq;
                    v(i, q) = s * vip + c * viq;
                }
            }
        }
    }
    if (sweep == max_sweeps && off_norm() > tol)
        throw NumericError("jacobi_eigen_sym: no convergence after " + std::to_string(max_sweeps) + " sweeps");

    JacobiResult r;
    r.eigenvalues = a.diagonal();
    r.eigenvectors = std::move(v);
    r.sweeps = sweep;
    return r;
}

// Sign convention: sum of entries >= 0, ties broken by the first nonzero
// entry being positive. Keeps proxies of aligned instances consistently
// oriented; without it proxy similarities are sign-ambiguous.
inline void apply_sign_convention(Eigen::Ref<Vector> u) {
    double s = u.sum();
    if (s > 0.0) return;
    if (s == 0.0) {
        for (int i = 0; i < u.size(); ++i) {
            if (u[i] != 0.0) {
                s = u[i];
                break;
            }
        }
        if (s >= 0.0) return;
    }
    u = -u;
}

struct GramSpectrum {
    Vector eigenvalues;  // descending, clipped at 0
    Vector sigmas;       // sqrt(eigenvalues)
    Matrix left_vectors;  // k x k, column j = u_j, sign convention applied
    double sigma1 = 0.0;
    Vector proxy;  // v_1, unit-norm
    bool degenerate = false;

    // Right singular directions v_j = zᵀu_j / σ_j for the strictly positive
    // modes; columns of zero modes are unusable and flagged unavailable.
    Matrix right_vectors;  // d x k
    std::vector<bool> right_available;

    int modes() const { return static_cast<int>(eigenvalues.size()); }
};

inline GramSpectrum spectrum(const EmbeddingMatrix& z, double gap_tol = kDefaultGapTol) {
    if (gap_tol <= 0.0) throw NumericError("spectrum: gap_tol must be positive");
    const Matrix g = gram(z);
    JacobiResult jac = jacobi_eigen_sym(g);

    const int k = z.k;
    std::vector<int> order(k);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return jac.eigenvalues[a] > jac.eigenvalues[b]; });

    GramSpectrum s;
    s.eigenvalues.resize(k);
    s.sigmas.resize(k);
    s.left_vectors.resize(k, k);
    for (int j = 0; j < k; ++j) {
        double lambda = jac.eigenvalues[order[j]];
        if (lambda < -kPsdTol)
            throw NumericError("spectrum: Gram matrix has negative eigenvalue " + std::to_string(lambda));
        s.eigenvalues[j] = std::max(lambda, 0.0);
        s.sigmas[j] = std::sqrt(s.eigenvalues[j]);
        s.left_vectors.col(j) = jac.eigenvectors.col(order[j]);
        apply_sign_convention(s.left_vectors.col(j));
    }
    s.sigma1 = s.sigmas[0];
    if (s.sigma1 <= 0.0) throw NumericError("spectrum: all-zero representation (sigma_1 = 0)");

    s.right_vectors = Matrix::Zero(z.d, k);
    s.right_available.assign(k, false);
    for (int j = 0; j < k; ++j) {
        if (s.sigmas[j] > 1e-12) {
            s.right_vectors.col(j) = z.rows.transpose() * s.left_vectors.col(j) / s.sigmas[j];
            s.right_available[j] = true;
        }
    }
    s.proxy = s.right_vectors.col(0);
    s.degenerate = (s.eigenvalues[0] - s.eigenvalues[1]) < gap_tol;
    return s;
}

struct Rank1Approx {
    Matrix matrix;  // sigma_1^2 u_1 u_1ᵀ
    double frobenius_error = 0.0;
};

inline Rank1Approx rank1_approx(const GramSpectrum& s, const Matrix& g) {
    if (g.rows() != s.modes() || g.cols() != s.modes())
        throw DimensionError("rank1_approx: Gram matrix shape does not match spectrum");
    Rank1Approx r;
    const Vector u1 = s.left_vectors.col(0);
    r.matrix = s.eigenvalues[0] * (u1 * u1.transpose());
    double e = 0.0;
    for (int j = 1; j < s.modes(); ++j) e += s.eigenvalues[j] * s.eigenvalues[j];
    r.frobenius_error = std::sqrt(e);
    return r;
}

inline double proxy_similarity(const Vector& a, const Vector& b) {
    if (a.size() != b.size()) throw DimensionError("proxy_similarity: dimension mismatch");
    if (std::abs(a.norm() - 1.0) > 1e-6 || std::abs(b.norm() - 1.0) > 1e-6)
        throw NumericError("proxy_similarity: inputs must be unit-norm");
    return std::clamp(a.dot(b), -1.0, 1.0);
}

// ∇_z σ_j = u_j v_jᵀ at points of distinct singular values. `mode` is
// zero-based (0 = leading).
inline Matrix sigma_gradient(const EmbeddingMatrix& z, int mode, double gap_tol = kDefaultGapTol) {
    GramSpectrum s = spectrum(z, gap_tol);
    const int k = s.modes();
    if (mode < 0 || mode >= k) throw DimensionError("sigma_gradient: mode out of range");
    auto gap_ok = [&](int hi, int lo) { return s.eigenvalues[hi] - s.eigenvalues[lo] >= gap_tol; };
    if ((mode > 0 && !gap_ok(mode - 1, mode)) || (mode + 1 < k && !gap_ok(mode, mode + 1)))
        throw NumericError("sigma_gradient: degenerate spectrum around mode " + std::to_string(mode) +
                           "; jitter the input and retry");
    if (!s.right_available[mode])
        throw NumericError("sigma_gradient: sigma_" + std::to_string(mode + 1) +
                           " vanishes; gradient undefined, jitter the input and retry");
    return s.left_vectors.col(mode) * s.right_vectors.col(mode).transpose();
}

// Adjoint of the map z -> v_1: given w = dψ/dv_1, returns dψ/dz from the
// first-order singular-vector perturbation expansion (non-degenerate λ_1
// required; zero modes fold into the orthogonal-complement term).
inline Matrix proxy_adjoint(const EmbeddingMatrix& z, const GramSpectrum& s, const Vector& w) {
    if (s.degenerate)
        throw NumericError("proxy_adjoint: leading eigenvalue is degenerate; jitter the input and retry");
    if (w.size() != z.d) throw DimensionError("proxy_adjoint: cotangent dimension mismatch");
    const int k = s.modes();
    const double lambda1 = s.eigenvalues[0];
    const Vector u1 = s.left_vectors.col(0);
    const Vector v1 = s.right_vectors.col(0);

    Matrix grad = Matrix::Zero(z.k, z.d);
    Vector w_perp = w;
    w_perp -= v1.dot(w) * v1;
    for (int j = 1; j < k; ++j) {
        if (!s.right_available[j]) continue;
        const Vector vj = s.right_vectors.col(j);
        const double cj = vj.dot(w);
        w_perp -= cj * vj;
        const double denom = lambda1 - s.eigenvalues[j];
        grad += (cj / denom) *
                (s.sigma1 * u1 * vj.transpose() + s.sigmas[j] * s.left_vectors.col(j) * v1.transpose());
    }
    grad += (1.0 / s.sigma1) * u1 * w_perp.transpose();
    return grad;
}

// Deterministic degeneracy escape used during training: perturb rows by
// gaussian noise of the given magnitude and renormalize.
inline EmbeddingMatrix jittered(const EmbeddingMatrix& z, CounterRng& rng, double magnitude = 1e-7) {
    Matrix m = z.rows;
    for (int i = 0; i < m.rows(); ++i) {
        for (int j = 0; j < m.cols(); ++j) m(i, j) += magnitude * rng.next_normal();
        double n = m.row(i).norm();
        if (n < 1e-12) throw NumericError("jittered: row collapsed to zero");
        m.row(i) /= n;
    }
    return EmbeddingMatrix::unchecked(std::move(m));
}

}  // namespace omnidistill::spectral
