// Train-from-scratch evaluation and cross-modal retrieval metrics: fresh
// heads are trained on a coreset (identity targets) or a synthetic set (its
// learned S_e and step size), then R@K is reported for every directed
// modality pair on held-out data, with mean/std aggregation over seeds.
#pragma once

#include "omnidistill/distill.hpp"

#include <iomanip>
#include <sstream>

namespace omnidistill::eval {

struct EvalConfig {
    int epochs = 10;
    int batch_size = 128;
    double lr_teacher = 0.01;
    objectives::LossConfig loss;
    double gap_tol = spectral::kDefaultGapTol;
    int head_dim = 16;
    std::vector<int> ks = {1, 5, 10};
};

inline model::ProjectionHeads train_student(const std::vector<Matrix>& inputs,
                                            const objectives::SimilarityTargets& targets,
                                            const EvalConfig& cfg, double learning_rate, uint64_t seed) {
    engine::TrainOptions opt;
    opt.epochs = cfg.epochs;
    opt.batch_size = cfg.batch_size;
    opt.learning_rate = learning_rate;
    opt.momentum = 0.0;
    opt.loss = cfg.loss;
    opt.gap_tol = cfg.gap_tol;
    opt.head_dim = cfg.head_dim;
    opt.seed = seed;
    engine::TrainRun run = engine::train_heads(inputs, targets, opt);
    return run.checkpoints.back();
}

inline model::ProjectionHeads train_student(const distill::SyntheticSet& syn, const EvalConfig& cfg,
                                            uint64_t seed) {
    return train_student(syn.embeddings, objectives::SimilarityTargets::raw(syn.similarity()), cfg,
                         syn.student_lr, seed);
}

inline model::ProjectionHeads train_student(const datagen::OmniDataset& coreset, const EvalConfig& cfg,
                                            uint64_t seed) {
    return train_student(coreset.modalities, objectives::SimilarityTargets::identity(coreset.instance_count()),
                         cfg, cfg.lr_teacher, seed);
}

// Rank of the ground-truth candidate for query i: 1 + number of candidates
// strictly closer, ties broken by lower candidate index.
inline int true_match_rank(const Matrix& scores, int i) {
    const double s_true = scores(i, i);
    int rank = 1;
    for (Eigen::Index j = 0; j < scores.cols(); ++j) {
        if (j == i) continue;
        if (scores(i, j) > s_true || (scores(i, j) == s_true && j < i)) ++rank;
    }
    return rank;
}

struct RetrievalReport {
    std::vector<std::string> modality_names;
    std::vector<std::pair<int, int>> pairs;      // directed (a, b)
    std::vector<int> ks;
    std::vector<std::vector<double>> recall;     // [pair][k] in percent
    std::vector<double> average;                 // [k], mean over pairs
    int queries = 0;

    std::string pair_name(int p) const {
        return modality_names[pairs[p].first] + "->" + modality_names[pairs[p].second];
    }
};

inline RetrievalReport retrieval_recall(const model::ProjectionHeads& heads, const datagen::OmniDataset& test,
                                        const std::vector<int>& ks) {
    test.validate();
    const int n = test.instance_count();
    const int k = test.modality_count();
    if (n == 0) throw DimensionError("retrieval_recall: empty test set");
    for (int kk : ks)
        if (kk < 1 || kk > n) throw DimensionError("retrieval_recall: K out of range");

    std::vector<int> all(n);
    for (int i = 0; i < n; ++i) all[i] = i;
    engine::BatchEncoding enc = engine::encode_batch(heads, test.modalities, all);

    RetrievalReport rep;
    rep.modality_names = test.modality_names;
    rep.ks = ks;
    rep.queries = n;
    rep.average.assign(ks.size(), 0.0);
    for (int a = 0; a < k; ++a) {
        for (int b = 0; b < k; ++b) {
            if (a == b) continue;
            const Matrix scores = enc.z_rows[a] * enc.z_rows[b].transpose();
            std::vector<double> recs;
            for (size_t ki = 0; ki < ks.size(); ++ki) {
                int hits = 0;
                for (int i = 0; i < n; ++i)
                    if (true_match_rank(scores, i) <= ks[ki]) ++hits;
                recs.push_back(100.0 * hits / n);
            }
            for (size_t ki = 0; ki < ks.size(); ++ki) rep.average[ki] += recs[ki];
            rep.pairs.emplace_back(a, b);
            rep.recall.push_back(std::move(recs));
        }
    }
    for (double& a : rep.average) a /= static_cast<double>(rep.pairs.size());
    return rep;
}

struct AggregateReport {
    std::vector<std::string> modality_names;
    std::vector<std::pair<int, int>> pairs;
    std::vector<int> ks;
    std::vector<std::vector<double>> mean;  // [pair][k]
    std::vector<std::vector<double>> stdev;
    std::vector<double> avg_mean;   // [k]
    std::vector<double> avg_stdev;  // [k]
    int seeds = 0;

    std::string pair_name(int p) const {
        return modality_names[pairs[p].first] + "->" + modality_names[pairs[p].second];
    }
};

namespace detail {

inline AggregateReport aggregate(const std::vector<RetrievalReport>& runs) {
    if (runs.empty()) throw DimensionError("aggregate: no runs");
    AggregateReport agg;
    agg.modality_names = runs[0].modality_names;
    agg.pairs = runs[0].pairs;
    agg.ks = runs[0].ks;
    agg.seeds = static_cast<int>(runs.size());
    const double inv = 1.0 / runs.size();

    auto mean_std = [&](auto getter) {
        double m = 0.0, s = 0.0;
        for (const auto& r : runs) m += getter(r);
        m *= inv;
        for (const auto& r : runs) s += (getter(r) - m) * (getter(r) - m);
        return std::pair<double, double>(m, std::sqrt(s * inv));
    };

    for (size_t p = 0; p < agg.pairs.size(); ++p) {
        std::vector<double> mrow, srow;
        for (size_t ki = 0; ki < agg.ks.size(); ++ki) {
            auto [m, s] = mean_std([&](const RetrievalReport& r) { return r.recall[p][ki]; });
            mrow.push_back(m);
            srow.push_back(s);
        }
        agg.mean.push_back(std::move(mrow));
        agg.stdev.push_back(std::move(srow));
    }
    for (size_t ki = 0; ki < agg.ks.size(); ++ki) {
        auto [m, s] = mean_std([&](const RetrievalReport& r) { return r.average[ki]; });
        agg.avg_mean.push_back(m);
        agg.avg_stdev.push_back(s);
    }
    return agg;
}

}  // namespace detail

template <typename Artifact>
AggregateReport evaluate_protocol(const Artifact& artifact, const datagen::OmniDataset& test,
                                  const EvalConfig& cfg, const std::vector<uint64_t>& seeds) {
    if (seeds.empty()) throw ConfigError("evaluate_protocol: need at least one seed");
    std::vector<RetrievalReport> runs;
    runs.reserve(seeds.size());
    for (uint64_t s : seeds) runs.push_back(retrieval_recall(train_student(artifact, cfg, s), test, cfg.ks));
    return detail::aggregate(runs);
}

inline AggregateReport random_coreset_eval(const datagen::OmniDataset& train, const datagen::OmniDataset& test,
                                           int n, const EvalConfig& cfg, const std::vector<uint64_t>& seeds,
                                           uint64_t subset_seed) {
    datagen::OmniDataset coreset = datagen::sample_real_subset(train, n, subset_seed);
    return evaluate_protocol(coreset, test, cfg, seeds);
}

// Report CSV: rows = directed pairs + "Avg", columns = R@K mean/std, one
// decimal (percent).
inline std::string report_csv(const AggregateReport& rep) {
    std::ostringstream out;
    out << std::fixed << std::setprecision(1);
    out << "pair";
    for (int k : rep.ks) out << ",R@" << k << "_mean,R@" << k << "_std";
    out << "\n";
    for (size_t p = 0; p < rep.pairs.size(); ++p) {
        out << rep.pair_name(p);
        for (size_t ki = 0; ki < rep.ks.size(); ++ki) out << "," << rep.mean[p][ki] << "," << rep.stdev[p][ki];
        out << "\n";
    }
    out << "Avg";
    for (size_t ki = 0; ki < rep.ks.size(); ++ki) out << "," << rep.avg_mean[ki] << "," << rep.avg_stdev[ki];
    out << "\n";
    return out.str();
}

}  // namespace omnidistill::eval
