// Expert trajectory generation: train projection heads on the full real
// dataset under the combined inner objective (identity similarity targets),
// snapshot parameters per epoch across independent runs, and serve teacher
// segments for trajectory matching. OMTB buffer file format lives here too.
#pragma once

#include "omnidistill/datagen.hpp"
#include "omnidistill/engine.hpp"

#include <bit>
#include <filesystem>

namespace omnidistill::buffer {

struct BufferConfig {
    int epochs = 10;
    int num_experts = 20;
    int batch_size = 128;
    double lr_teacher = 0.01;
    objectives::LossConfig loss;
    double gap_tol = spectral::kDefaultGapTol;
    int head_dim = 16;
    uint64_t seed_base = 1000;

    void validate() const {
        if (epochs < 1) throw ConfigError("BufferConfig: epochs must be >= 1");
        if (num_experts < 1) throw ConfigError("BufferConfig: num_experts must be >= 1");
        if (batch_size < 1) throw ConfigError("BufferConfig: batch_size must be >= 1");
        if (lr_teacher < 0.0) throw ConfigError("BufferConfig: lr_teacher must be >= 0");
        loss.validate();
    }
};

struct ExpertTrajectory {
    std::vector<model::ProjectionHeads> checkpoints;  // epochs + 1, index 0 = init
    uint64_t seed = 0;
    uint64_t config_digest = 0;
    std::vector<double> epoch_losses;  // in-memory diagnostic, not serialized

    int epochs() const { return static_cast<int>(checkpoints.size()) - 1; }
};

inline uint64_t config_digest(const BufferConfig& cfg) {
    uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&h](uint64_t v) { h = splitmix64(h ^ v); };
    mix(static_cast<uint64_t>(cfg.epochs));
    mix(static_cast<uint64_t>(cfg.num_experts));
    mix(static_cast<uint64_t>(cfg.batch_size));
    mix(std::bit_cast<uint64_t>(cfg.lr_teacher));
    mix(std::bit_cast<uint64_t>(cfg.loss.tau));
    mix(std::bit_cast<uint64_t>(cfg.loss.tau_prime));
    mix(std::bit_cast<uint64_t>(cfg.loss.beta));
    mix(static_cast<uint64_t>(cfg.head_dim));
    return h;
}

inline ExpertTrajectory train_expert(const datagen::OmniDataset& ds, const BufferConfig& cfg, uint64_t seed) {
    cfg.validate();
    ds.validate();
    if (ds.instance_count() == 0) throw DimensionError("train_expert: empty dataset");

    engine::TrainOptions opt;
    opt.epochs = cfg.epochs;
    opt.batch_size = cfg.batch_size;
    opt.learning_rate = cfg.lr_teacher;
    opt.momentum = 0.0;
    opt.loss = cfg.loss;
    opt.gap_tol = cfg.gap_tol;
    opt.head_dim = cfg.head_dim;
    opt.seed = seed;

    engine::TrainRun run =
        engine::train_heads(ds.modalities, objectives::SimilarityTargets::identity(ds.instance_count()), opt);

    ExpertTrajectory traj;
    traj.checkpoints = std::move(run.checkpoints);
    traj.epoch_losses = std::move(run.epoch_losses);
    traj.seed = seed;
    traj.config_digest = config_digest(cfg);
    for (const auto& cp : traj.checkpoints)
        for (const auto& w : cp.weights) require_finite(w, "train_expert checkpoint");
    return traj;
}

inline std::vector<ExpertTrajectory> build_buffer(const datagen::OmniDataset& ds, const BufferConfig& cfg) {
    cfg.validate();
    std::vector<ExpertTrajectory> buf;
    buf.reserve(cfg.num_experts);
    for (int e = 0; e < cfg.num_experts; ++e) buf.push_back(train_expert(ds, cfg, cfg.seed_base + e));
    return buf;
}

struct TeacherSegment {
    model::ProjectionHeads start;   // θ_0
    model::ProjectionHeads target;  // θ_T
    int trajectory_index = 0;
    int start_epoch = 0;
    int span = 0;  // expert_epochs
};

inline TeacherSegment sample_segment(const std::vector<ExpertTrajectory>& buffer, int max_start_epoch,
                                     int expert_epochs, CounterRng& rng) {
    if (buffer.empty()) throw DimensionError("sample_segment: empty buffer");
    if (expert_epochs < 1) throw ConfigError("sample_segment: expert_epochs must be >= 1");
    const int epochs = buffer[0].epochs();
    if (max_start_epoch < 0 || max_start_epoch + expert_epochs > epochs)
        throw ConfigError("sample_segment: max_start_epoch + expert_epochs exceeds trajectory length");

    TeacherSegment seg;
    seg.trajectory_index = static_cast<int>(rng.next_below(buffer.size()));
    seg.start_epoch = static_cast<int>(rng.next_below(static_cast<uint64_t>(max_start_epoch) + 1));
    seg.span = expert_epochs;
    const ExpertTrajectory& t = buffer[seg.trajectory_index];
    seg.start = t.checkpoints[seg.start_epoch];
    seg.target = t.checkpoints[seg.start_epoch + expert_epochs];
    return seg;
}

// Buffer file (OMTB v1): magic, version u32, num_experts u32, then per
// trajectory: seed u64, epochs u32, modality count u32, and per checkpoint
// per modality: dims (u64, u64) + row-major f64 payload + CRC32.
inline void save_buffer(const std::vector<ExpertTrajectory>& buffer, const std::filesystem::path& path) {
    if (buffer.empty()) throw DimensionError("save_buffer: empty buffer");
    io::ByteWriter w;
    w.magic("OMTB");
    w.u32(1);
    w.u32(static_cast<uint32_t>(buffer.size()));
    for (const auto& traj : buffer) {
        w.u64(traj.seed);
        w.u32(static_cast<uint32_t>(traj.epochs()));
        w.u32(static_cast<uint32_t>(traj.checkpoints[0].modality_count()));
        for (const auto& cp : traj.checkpoints) {
            for (const auto& weight : cp.weights) {
                w.u64(static_cast<uint64_t>(weight.rows()));
                w.u64(static_cast<uint64_t>(weight.cols()));
                w.matrix_section(weight);
            }
        }
    }
    io::write_file_atomic(path, w.str());
}

inline std::vector<ExpertTrajectory> load_buffer(const std::filesystem::path& path) {
    io::ByteReader r(io::read_file(path));
    r.expect_magic("OMTB", "load_buffer");
    const uint32_t version = r.u32();
    if (version != 1) throw IoError("load_buffer: unsupported version " + std::to_string(version));
    const uint32_t count = r.u32();
    std::vector<ExpertTrajectory> buffer;
    buffer.reserve(count);
    for (uint32_t t = 0; t < count; ++t) {
        ExpertTrajectory traj;
        traj.seed = r.u64();
        const uint32_t epochs = r.u32();
        const uint32_t k = r.u32();
        if (k == 0 || k > 64) throw IoError("load_buffer: implausible modality count");
        for (uint32_t cp = 0; cp <= epochs; ++cp) {
            model::ProjectionHeads heads;
            for (uint32_t m = 0; m < k; ++m) {
                const uint64_t rows = r.u64();
                const uint64_t cols = r.u64();
                heads.weights.push_back(r.matrix_section(static_cast<Eigen::Index>(rows),
                                                         static_cast<Eigen::Index>(cols), "load_buffer"));
            }
            traj.checkpoints.push_back(std::move(heads));
        }
        buffer.push_back(std::move(traj));
    }
    r.done("load_buffer");
    return buffer;
}

}  // namespace omnidistill::buffer
