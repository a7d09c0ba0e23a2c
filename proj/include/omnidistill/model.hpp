// The trainable network: one bias-free linear head per modality mapping
// backbone-embedding space into the shared d-dimensional space, with output
// ℓ2-normalization. Heads are value types; updates produce new snapshots.
#pragma once

#include "omnidistill/common.hpp"
#include "omnidistill/spectral.hpp"

namespace omnidistill::model {

constexpr double kNormFloor = 1e-12;

struct ProjectionHeads {
    std::vector<Matrix> weights;  // W_m: d x d_in(m)

    int modality_count() const { return static_cast<int>(weights.size()); }
    int out_dim() const { return weights.empty() ? 0 : static_cast<int>(weights[0].rows()); }

    int in_dim(int m) const { return static_cast<int>(weights[m].cols()); }

    // Fan-in uniform init, U[-1/sqrt(d_in), 1/sqrt(d_in)].
    static ProjectionHeads seeded_init(int d, const std::vector<int>& d_in, CounterRng& rng) {
        ProjectionHeads h;
        h.weights.reserve(d_in.size());
        for (int din : d_in) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(din));
            Matrix w(d, din);
            for (int i = 0; i < d; ++i)
                for (int j = 0; j < din; ++j) w(i, j) = rng.next_uniform(-bound, bound);
            h.weights.push_back(std::move(w));
        }
        return h;
    }

    void require_same_shape(const ProjectionHeads& other, const char* what) const {
        if (other.weights.size() != weights.size())
            throw DimensionError(std::string(what) + ": modality count mismatch");
        for (size_t m = 0; m < weights.size(); ++m)
            if (weights[m].rows() != other.weights[m].rows() || weights[m].cols() != other.weights[m].cols())
                throw DimensionError(std::string(what) + ": weight shape mismatch at modality " + std::to_string(m));
    }
};

// z_m = W_m x_m / ||W_m x_m||, stacked in modality order.
inline spectral::EmbeddingMatrix forward(const ProjectionHeads& heads, const std::vector<Vector>& raw) {
    const int k = heads.modality_count();
    if (static_cast<int>(raw.size()) != k) throw DimensionError("forward: modality count mismatch");
    Matrix z(k, heads.out_dim());
    for (int m = 0; m < k; ++m) {
        if (raw[m].size() != heads.weights[m].cols())
            throw DimensionError("forward: input dimension mismatch at modality " + std::to_string(m));
        Vector y = heads.weights[m] * raw[m];
        const double n = y.norm();
        if (n < kNormFloor)
            throw NumericError("forward: pre-normalization output vanished at modality " + std::to_string(m));
        z.row(m) = y / n;
    }
    return spectral::EmbeddingMatrix::checked(std::move(z));
}

// Exact gradient of a scalar loss w.r.t. each W_m given the upstream
// gradient w.r.t. z. The normalization contributes (I - z zᵀ)/||y||.
inline std::vector<Matrix> backward(const ProjectionHeads& heads, const std::vector<Vector>& raw,
                                    const Matrix& grad_z) {
    const int k = heads.modality_count();
    if (grad_z.rows() != k || grad_z.cols() != heads.out_dim())
        throw DimensionError("backward: upstream gradient shape mismatch");
    std::vector<Matrix> grads(k);
    for (int m = 0; m < k; ++m) {
        Vector y = heads.weights[m] * raw[m];
        const double n = y.norm();
        if (n < kNormFloor)
            throw NumericError("backward: pre-normalization output vanished at modality " + std::to_string(m));
        Vector z = y / n;
        Vector g = grad_z.row(m).transpose();
        Vector gy = (g - z.dot(g) * z) / n;
        grads[m] = gy * raw[m].transpose();
    }
    return grads;
}

// Directional derivative of forward in direction dW (the encoder Jacobian
// applied to a parameter perturbation); rows of the result are d(z_m).
inline Matrix forward_jvp(const ProjectionHeads& heads, const std::vector<Vector>& raw,
                          const std::vector<Matrix>& dw) {
    const int k = heads.modality_count();
    Matrix dz(k, heads.out_dim());
    for (int m = 0; m < k; ++m) {
        Vector y = heads.weights[m] * raw[m];
        const double n = y.norm();
        if (n < kNormFloor) throw NumericError("forward_jvp: pre-normalization output vanished");
        Vector z = y / n;
        Vector dy = dw[m] * raw[m];
        dz.row(m) = (dy - z.dot(dy) * z) / n;
    }
    return dz;
}

struct SgdState {
    double learning_rate = 0.0;
    double momentum = 0.0;
    std::vector<Matrix> velocity;  // zero-initialized, same shapes as params

    static SgdState make(const ProjectionHeads& heads, double lr, double momentum) {
        SgdState s;
        s.learning_rate = lr;
        s.momentum = momentum;
        s.velocity.reserve(heads.weights.size());
        for (const auto& w : heads.weights) s.velocity.push_back(Matrix::Zero(w.rows(), w.cols()));
        return s;
    }
};

inline ProjectionHeads sgd_step(const ProjectionHeads& params, const std::vector<Matrix>& grads, SgdState& state) {
    if (grads.size() != params.weights.size()) throw DimensionError("sgd_step: gradient count mismatch");
    ProjectionHeads next = params;
    for (size_t m = 0; m < grads.size(); ++m) {
        require_finite(grads[m], "sgd_step");
        if (state.momentum != 0.0) {
            state.velocity[m] = state.momentum * state.velocity[m] + grads[m];
            next.weights[m] -= state.learning_rate * state.velocity[m];
        } else {
            next.weights[m] -= state.learning_rate * grads[m];
        }
    }
    return next;
}

struct ParamDistance {
    std::vector<double> per_modality;  // squared Euclidean per branch
    double total = 0.0;
};

inline ParamDistance param_distance(const ProjectionHeads& a, const ProjectionHeads& b) {
    a.require_same_shape(b, "param_distance");
    ParamDistance d;
    d.per_modality.reserve(a.weights.size());
    for (size_t m = 0; m < a.weights.size(); ++m) {
        double s = (a.weights[m] - b.weights[m]).squaredNorm();
        d.per_modality.push_back(s);
        d.total += s;
    }
    return d;
}

}  // namespace omnidistill::model
