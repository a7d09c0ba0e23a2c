// Synthetic omnimodal dataset generation with planted cross-modal semantics,
// standing in for frozen-backbone embeddings of real data: every instance
// draws a latent vector near its class centroid, and each modality sees that
// latent through a fixed seeded linear view plus modality noise. Also the
// on-disk OMDS dataset format.
#pragma once

#include "omnidistill/common.hpp"
#include "omnidistill/serialize.hpp"

#include <filesystem>

namespace omnidistill::datagen {

constexpr uint32_t kUnlabeled = 0xffffffffu;

enum class Split { train, test };

inline const char* split_name(Split s) { return s == Split::train ? "train" : "test"; }

struct OmniDataset {
    std::vector<std::string> modality_names;
    std::vector<Matrix> modalities;  // each N x d_in(m), shared row order
    std::vector<uint32_t> labels;    // latent-class ids; generator/diagnostics only
    Split split = Split::train;

    int instance_count() const { return modalities.empty() ? 0 : static_cast<int>(modalities[0].rows()); }
    int modality_count() const { return static_cast<int>(modalities.size()); }

    std::vector<int> input_dims() const {
        std::vector<int> d;
        d.reserve(modalities.size());
        for (const auto& m : modalities) d.push_back(static_cast<int>(m.cols()));
        return d;
    }

    std::vector<Vector> instance(int i) const {
        std::vector<Vector> raw;
        raw.reserve(modalities.size());
        for (const auto& m : modalities) raw.push_back(m.row(i).transpose());
        return raw;
    }

    void validate() const {
        if (modalities.empty()) throw DimensionError("OmniDataset: no modalities");
        if (modality_names.size() != modalities.size())
            throw DimensionError("OmniDataset: name/modality count mismatch");
        const int n = instance_count();
        for (const auto& m : modalities)
            if (m.rows() != n) throw DimensionError("OmniDataset: modalities disagree on instance count");
        if (static_cast<int>(labels.size()) != n) throw DimensionError("OmniDataset: label count mismatch");
    }
};

struct GeneratorConfig {
    int n = 2000;
    int k = 3;
    std::vector<int> d_in = {48, 32, 40};
    int latent_dim = 16;
    int num_classes = 20;
    double within_class_spread = 0.25;
    std::vector<double> modality_noise = {0.3, 0.3, 0.3};
    uint64_t seed = 17;
    std::vector<std::string> modality_names = {"video", "audio", "text"};

    void validate() const {
        if (n <= 0 || k < 2) throw ConfigError("GeneratorConfig: need n > 0 and k >= 2");
        if (static_cast<int>(d_in.size()) != k || static_cast<int>(modality_noise.size()) != k ||
            static_cast<int>(modality_names.size()) != k)
            throw ConfigError("GeneratorConfig: per-modality fields must have k entries");
        for (int d : d_in)
            if (d < latent_dim) throw ConfigError("GeneratorConfig: latent_dim must be <= every d_in");
        if (num_classes <= 0 || num_classes > n) throw ConfigError("GeneratorConfig: need 0 < C <= n");
        if (within_class_spread < 0.0) throw ConfigError("GeneratorConfig: spread must be >= 0");
        for (double s : modality_noise)
            if (s < 0.0) throw ConfigError("GeneratorConfig: noise must be >= 0");
    }
};

namespace detail {

// RNG stream ids; centroids and modality views depend only on the seed so
// train and test splits share the planted semantics.
constexpr uint64_t kCentroidStream = 1;
constexpr uint64_t kViewStream = 2;
constexpr uint64_t kTrainStream = 3;
constexpr uint64_t kTestStream = 4;

// The modality view copies the latent into the first latent_dim coordinates
// and fills the rest with a seeded random mixing block, so the cross-modal
// signal is linearly recoverable but buried in modality-specific structure.
inline Matrix modality_view(int d_in, int latent_dim, CounterRng& rng) {
    Matrix v(d_in, latent_dim);
    v.topRows(latent_dim) = Matrix::Identity(latent_dim, latent_dim);
    for (int i = latent_dim; i < d_in; ++i)
        for (int j = 0; j < latent_dim; ++j) v(i, j) = rng.next_normal() / std::sqrt(latent_dim);
    return v;
}

}  // namespace detail

inline OmniDataset generate(const GeneratorConfig& cfg, Split split) {
    cfg.validate();

    CounterRng centroid_rng(cfg.seed, detail::kCentroidStream);
    Matrix centroids(cfg.num_classes, cfg.latent_dim);
    for (int c = 0; c < cfg.num_classes; ++c) {
        for (int j = 0; j < cfg.latent_dim; ++j) centroids(c, j) = centroid_rng.next_normal();
        centroids.row(c).normalize();
    }

    CounterRng view_rng(cfg.seed, detail::kViewStream);
    std::vector<Matrix> views;
    views.reserve(cfg.k);
    for (int m = 0; m < cfg.k; ++m) views.push_back(detail::modality_view(cfg.d_in[m], cfg.latent_dim, view_rng));

    OmniDataset ds;
    ds.split = split;
    ds.modality_names = cfg.modality_names;
    ds.labels.resize(cfg.n);
    for (int m = 0; m < cfg.k; ++m) ds.modalities.emplace_back(cfg.n, cfg.d_in[m]);

    CounterRng rng(cfg.seed, split == Split::train ? detail::kTrainStream : detail::kTestStream);
    Vector latent(cfg.latent_dim);
    for (int i = 0; i < cfg.n; ++i) {
        const uint32_t label = static_cast<uint32_t>(i % cfg.num_classes);
        ds.labels[i] = label;
        for (int j = 0; j < cfg.latent_dim; ++j)
            latent[j] = centroids(label, j) + cfg.within_class_spread * rng.next_normal();
        for (int m = 0; m < cfg.k; ++m) {
            Vector x = views[m] * latent;
            for (int j = 0; j < cfg.d_in[m]; ++j) x[j] += cfg.modality_noise[m] * rng.next_normal();
            const double nrm = x.norm();
            if (nrm < 1e-12) throw NumericError("generate: instance collapsed to zero");
            ds.modalities[m].row(i) = x / nrm;
        }
    }
    return ds;
}

// Dataset file (OMDS v1), little-endian:
//   magic "OMDS", version u32, N u64, k u32,
//   per modality: name length u32 + UTF-8 name, d_in u64,
//   per modality: N x d_in f64 row-major + CRC32,
//   footer: N labels u32 (0xFFFFFFFF = unlabeled) + CRC32.
inline void write_dataset(const OmniDataset& ds, const std::filesystem::path& path) {
    ds.validate();
    io::ByteWriter w;
    w.magic("OMDS");
    w.u32(1);
    w.u64(static_cast<uint64_t>(ds.instance_count()));
    w.u32(static_cast<uint32_t>(ds.modality_count()));
    for (int m = 0; m < ds.modality_count(); ++m) {
        w.u32(static_cast<uint32_t>(ds.modality_names[m].size()));
        w.bytes(ds.modality_names[m].data(), ds.modality_names[m].size());
        w.u64(static_cast<uint64_t>(ds.modalities[m].cols()));
    }
    for (const auto& m : ds.modalities) w.matrix_section(m);

    io::ByteWriter footer;
    for (uint32_t label : ds.labels) footer.u32(label);
    w.bytes(footer.str().data(), footer.str().size());
    w.u32(io::crc32_of(footer.str().data(), footer.str().size()));

    io::write_file_atomic(path, w.str());
}

inline OmniDataset read_dataset(const std::filesystem::path& path) {
    io::ByteReader r(io::read_file(path));
    r.expect_magic("OMDS", "read_dataset");
    const uint32_t version = r.u32();
    if (version != 1)
        throw IoError("read_dataset: unsupported version " + std::to_string(version));
    const uint64_t n = r.u64();
    const uint32_t k = r.u32();
    if (k < 2 || k > 64) throw IoError("read_dataset: implausible modality count");

    OmniDataset ds;
    std::vector<uint64_t> dims(k);
    for (uint32_t m = 0; m < k; ++m) {
        const uint32_t len = r.u32();
        ds.modality_names.push_back(r.str(len));
        dims[m] = r.u64();
    }
    for (uint32_t m = 0; m < k; ++m)
        ds.modalities.push_back(r.matrix_section(static_cast<Eigen::Index>(n),
                                                 static_cast<Eigen::Index>(dims[m]), "read_dataset"));

    std::string label_bytes = r.str(n * 4);
    const uint32_t stored = r.u32();
    if (stored != io::crc32_of(label_bytes.data(), label_bytes.size()))
        throw IoError("read_dataset: label checksum mismatch");
    ds.labels.resize(n);
    for (uint64_t i = 0; i < n; ++i) {
        uint32_t v = 0;
        for (int b = 0; b < 4; ++b)
            v |= static_cast<uint32_t>(static_cast<unsigned char>(label_bytes[i * 4 + b])) << (8 * b);
        ds.labels[i] = v;
    }
    r.done("read_dataset");
    ds.validate();
    return ds;
}

// Uniform without replacement, preserving instance alignment across modalities.
inline OmniDataset sample_real_subset(const OmniDataset& ds, int n, uint64_t seed) {
    ds.validate();
    if (n > ds.instance_count()) throw DimensionError("sample_real_subset: n exceeds dataset size");
    CounterRng rng(seed, 0x5b5e);
    std::vector<int> idx = rng.sample_without_replacement(ds.instance_count(), n);

    OmniDataset out;
    out.split = ds.split;
    out.modality_names = ds.modality_names;
    out.labels.reserve(n);
    for (int i : idx) out.labels.push_back(ds.labels[i]);
    for (const auto& m : ds.modalities) {
        Matrix sub(n, m.cols());
        for (int r = 0; r < n; ++r) sub.row(r) = m.row(idx[r]);
        out.modalities.push_back(std::move(sub));
    }
    return out;
}

}  // namespace omnidistill::datagen
