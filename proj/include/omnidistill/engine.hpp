// Shared first-order training machinery: batched head forward/backward, the
// combined inner objective with degeneracy jitter, and the mini-batch SGD
// loop used for both expert training and train-from-scratch evaluation.
#pragma once

#include "omnidistill/model.hpp"
#include "omnidistill/objectives.hpp"

namespace omnidistill::engine {

struct BatchEncoding {
    std::vector<spectral::EmbeddingMatrix> z;  // per instance
    std::vector<Matrix> z_rows;                // per modality, B x d (for pairwise losses)
};

inline BatchEncoding encode_batch(const model::ProjectionHeads& heads, const std::vector<Matrix>& inputs,
                                  const std::vector<int>& idx) {
    const int k = heads.modality_count();
    if (static_cast<int>(inputs.size()) != k) throw DimensionError("encode_batch: modality count mismatch");
    const int b = static_cast<int>(idx.size());
    const int d = heads.out_dim();

    BatchEncoding enc;
    enc.z_rows.reserve(k);
    for (int m = 0; m < k; ++m) {
        Matrix xb(b, inputs[m].cols());
        for (int i = 0; i < b; ++i) xb.row(i) = inputs[m].row(idx[i]);
        Matrix y = xb * heads.weights[m].transpose();
        for (int i = 0; i < b; ++i) {
            const double n = y.row(i).norm();
            if (n < model::kNormFloor)
                throw NumericError("encode_batch: pre-normalization output vanished (modality " +
                                   std::to_string(m) + ", row " + std::to_string(i) + ")");
            y.row(i) /= n;
        }
        enc.z_rows.push_back(std::move(y));
    }
    enc.z.reserve(b);
    for (int i = 0; i < b; ++i) {
        Matrix zi(k, d);
        for (int m = 0; m < k; ++m) zi.row(m) = enc.z_rows[m].row(i);
        enc.z.push_back(spectral::EmbeddingMatrix::unchecked(std::move(zi)));
    }
    return enc;
}

// Chain per-instance dL/dz back to the head weights.
inline std::vector<Matrix> batch_weight_grads(const model::ProjectionHeads& heads,
                                              const std::vector<Matrix>& inputs, const std::vector<int>& idx,
                                              const std::vector<Matrix>& grad_z) {
    const int k = heads.modality_count();
    const int b = static_cast<int>(idx.size());
    std::vector<Matrix> grads;
    grads.reserve(k);
    for (int m = 0; m < k; ++m) {
        Matrix xb(b, inputs[m].cols());
        for (int i = 0; i < b; ++i) xb.row(i) = inputs[m].row(idx[i]);
        Matrix y = xb * heads.weights[m].transpose();
        Matrix gy(b, heads.out_dim());
        for (int i = 0; i < b; ++i) {
            const double n = y.row(i).norm();
            Vector z = y.row(i).transpose() / n;
            Vector g = grad_z[i].row(m).transpose();
            gy.row(i) = ((g - z.dot(g) * z) / n).transpose();
        }
        grads.push_back(gy.transpose() * xb);
    }
    return grads;
}

// Spectra with the seeded degeneracy escape: a degenerate instance gets its
// rows jittered by 1e-7 and recomputed, up to three attempts.
struct PreparedSpectra {
    std::vector<spectral::EmbeddingMatrix> z;
    std::vector<spectral::GramSpectrum> spectra;
    bool jittered = false;
};

inline PreparedSpectra prepare_spectra(std::vector<spectral::EmbeddingMatrix> z, double gap_tol,
                                       uint64_t jitter_seed) {
    PreparedSpectra out;
    out.spectra.reserve(z.size());
    for (size_t i = 0; i < z.size(); ++i) {
        spectral::GramSpectrum s = spectral::spectrum(z[i], gap_tol);
        int attempt = 0;
        while (s.degenerate && attempt < 3) {
            CounterRng jrng(jitter_seed, (i << 4) | static_cast<uint64_t>(attempt));
            z[i] = spectral::jittered(z[i], jrng);
            s = spectral::spectrum(z[i], gap_tol);
            out.jittered = true;
            ++attempt;
        }
        if (s.degenerate)
            throw NumericError("prepare_spectra: degenerate spectrum unresolved by jitter (instance " +
                               std::to_string(i) + ")");
        out.spectra.push_back(std::move(s));
    }
    out.z = std::move(z);
    return out;
}

// One full inner-objective gradient w.r.t. the head weights over the given
// batch indices. Targets are indexed by the same ids as `inputs` rows.
struct InnerGradient {
    double loss = 0.0;
    std::vector<Matrix> weight_grads;
    bool jittered = false;
};

inline InnerGradient inner_weight_gradient(const model::ProjectionHeads& heads,
                                           const std::vector<Matrix>& inputs, const std::vector<int>& idx,
                                           const objectives::SimilarityTargets& full_targets,
                                           const objectives::LossConfig& cfg, double gap_tol,
                                           uint64_t jitter_seed) {
    BatchEncoding enc = encode_batch(heads, inputs, idx);
    PreparedSpectra prep = prepare_spectra(std::move(enc.z), gap_tol, jitter_seed);

    objectives::ModalityLossResult m = objectives::modality_loss(prep.spectra, cfg);
    std::vector<Vector> proxies;
    proxies.reserve(prep.spectra.size());
    for (const auto& s : prep.spectra) proxies.push_back(s.proxy);
    objectives::WbceResult w = objectives::wbce_loss(full_targets.block(idx), proxies, cfg);

    std::vector<Matrix> grad_z = std::move(m.grad_z);
    for (size_t i = 0; i < prep.z.size(); ++i)
        grad_z[i] += spectral::proxy_adjoint(prep.z[i], prep.spectra[i], w.grad_proxy[i]);

    InnerGradient out;
    out.loss = m.value + w.value;
    out.weight_grads = batch_weight_grads(heads, inputs, idx, grad_z);
    out.jittered = prep.jittered;
    return out;
}

struct TrainOptions {
    int epochs = 10;
    int batch_size = 128;
    double learning_rate = 0.01;
    double momentum = 0.0;
    objectives::LossConfig loss;
    double gap_tol = spectral::kDefaultGapTol;
    int head_dim = 16;
    uint64_t seed = 0;
};

struct TrainRun {
    std::vector<model::ProjectionHeads> checkpoints;  // index = epoch, 0 = init
    std::vector<double> epoch_losses;                 // mean mini-batch loss per epoch
};

// Mini-batch SGD over the full index set; one checkpoint per epoch boundary
// plus the initialization. Deterministic given the seed: init, shuffling and
// jitter each use their own counter streams.
inline TrainRun train_heads(const std::vector<Matrix>& inputs,
                            const objectives::SimilarityTargets& full_targets, const TrainOptions& opt) {
    if (inputs.empty() || inputs[0].rows() == 0) throw DimensionError("train_heads: empty dataset");
    if (opt.epochs < 0) throw ConfigError("train_heads: epochs must be >= 0");
    const int n = static_cast<int>(inputs[0].rows());
    if (full_targets.size() != n) throw DimensionError("train_heads: targets size mismatch");

    std::vector<int> dims;
    dims.reserve(inputs.size());
    for (const auto& m : inputs) dims.push_back(static_cast<int>(m.cols()));

    CounterRng init_rng(opt.seed, 0x11);
    model::ProjectionHeads heads = model::ProjectionHeads::seeded_init(opt.head_dim, dims, init_rng);
    model::SgdState sgd = model::SgdState::make(heads, opt.learning_rate, opt.momentum);

    TrainRun run;
    run.checkpoints.push_back(heads);

    CounterRng shuffle_rng(opt.seed, 0x12);
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    const int bs = std::min(opt.batch_size, n);
    uint64_t step = 0;

    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        int batches = 0;
        for (int at = 0; at < n; at += bs, ++batches, ++step) {
            std::vector<int> idx(order.begin() + at, order.begin() + std::min(at + bs, n));
            InnerGradient g = inner_weight_gradient(heads, inputs, idx, full_targets, opt.loss, opt.gap_tol,
                                                    splitmix64(opt.seed ^ (0x9e37 + step)));
            if (!std::isfinite(g.loss))
                throw NumericError("train_heads: non-finite loss at epoch " + std::to_string(epoch) +
                                   ", step " + std::to_string(batches));
            heads = model::sgd_step(heads, g.weight_grads, sgd);
            loss_sum += g.loss;
        }
        run.epoch_losses.push_back(loss_sum / batches);
        run.checkpoints.push_back(heads);
    }
    return run;
}

}  // namespace omnidistill::engine
