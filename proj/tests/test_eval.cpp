#include "omnidistill/eval.hpp"
#include "omnidistill/verification.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace omnidistill;
using Catch::Approx;

namespace {

datagen::OmniDataset square_dataset(int n, int d, uint64_t seed) {
    datagen::GeneratorConfig cfg;
    cfg.n = n;
    cfg.k = 2;
    cfg.d_in = {d, d};
    cfg.latent_dim = d;
    cfg.num_classes = std::min(n, 5);
    cfg.modality_noise = {0.2, 0.2};
    cfg.modality_names = {"video", "audio"};
    cfg.seed = seed;
    return datagen::generate(cfg, datagen::Split::test);
}

model::ProjectionHeads identity_heads(int d, int k) {
    model::ProjectionHeads h;
    for (int m = 0; m < k; ++m) h.weights.push_back(Matrix::Identity(d, d));
    return h;
}

eval::EvalConfig small_eval_config() {
    eval::EvalConfig cfg;
    cfg.epochs = 4;
    cfg.batch_size = 16;
    cfg.head_dim = 6;
    return cfg;
}

}  // namespace

TEST_CASE("perfectly matched embeddings give R@1 = 100", "[eval]") {
    const int n = 12, d = 8;
    datagen::OmniDataset ds;
    ds.modality_names = {"video", "audio"};
    CounterRng rng(1, 0);
    Matrix shared = verification::random_unit_rows(n, d, rng);
    ds.modalities = {shared, shared};
    ds.labels.assign(n, datagen::kUnlabeled);

    auto rep = eval::retrieval_recall(identity_heads(d, 2), ds, {1, 5, 10});
    for (const auto& recs : rep.recall) CHECK(recs[0] == Approx(100.0));
    CHECK(rep.average[0] == Approx(100.0));
}

TEST_CASE("adversarial candidates push the true match to the last rank", "[eval]") {
    const int n = 10, d = 10;
    datagen::OmniDataset ds;
    ds.modality_names = {"video", "audio"};
    Matrix za = Matrix::Identity(n, d);
    Matrix zb = Matrix::Zero(n, d);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j)
            if (j != i) zb(i, j) = 1.0 / std::sqrt(n - 1.0);
    }
    ds.modalities = {za, zb};
    ds.labels.assign(n, datagen::kUnlabeled);

    auto rep = eval::retrieval_recall(identity_heads(d, 2), ds, {1, 5, 10});
    // video->audio: every query's own candidate has similarity 0, all others tie above
    CHECK(rep.recall[0][0] == Approx(0.0));
    CHECK(rep.recall[0][1] == Approx(0.0));
    CHECK(rep.recall[0][2] == Approx(100.0));
}

TEST_CASE("fast ranking equals exhaustive enumeration", "[eval]") {
    CounterRng rng(3, 0);
    for (int trial = 0; trial < 10; ++trial) {
        const int n = 4 + static_cast<int>(rng.next_below(13));  // up to 16
        Matrix scores(n, n);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) scores(i, j) = rng.next_normal();
        for (int i = 0; i < n; ++i) {
            // brute force: sort candidates by (score desc, index asc)
            std::vector<int> order(n);
            for (int j = 0; j < n; ++j) order[j] = j;
            std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
                if (scores(i, a) != scores(i, b)) return scores(i, a) > scores(i, b);
                return a < b;
            });
            int brute = 0;
            while (order[brute] != i) ++brute;
            CHECK(eval::true_match_rank(scores, i) == brute + 1);
        }
    }
}

TEST_CASE("hand-checked four-instance ranking", "[eval]") {
    Matrix scores(4, 4);
    // query 0: true match 0 has the top score -> rank 1
    // query 1: one candidate above -> rank 2
    // query 2: a tie at a lower index counts above -> rank 2
    // query 3: all above -> rank 4
    scores << 0.9, 0.1, 0.2, 0.3,
              0.8, 0.5, 0.1, 0.2,
              0.4, 0.1, 0.4, 0.0,
              0.5, 0.6, 0.7, 0.1;
    CHECK(eval::true_match_rank(scores, 0) == 1);
    CHECK(eval::true_match_rank(scores, 1) == 2);
    CHECK(eval::true_match_rank(scores, 2) == 2);
    CHECK(eval::true_match_rank(scores, 3) == 4);
}

TEST_CASE("recall is monotone in K and equivariant under permutation", "[eval]") {
    auto ds = square_dataset(20, 6, 11);
    CounterRng rng(4, 0);
    auto heads = model::ProjectionHeads::seeded_init(6, {6, 6}, rng);
    auto rep = eval::retrieval_recall(heads, ds, {1, 5, 10});
    for (const auto& recs : rep.recall) {
        CHECK(recs[0] <= recs[1]);
        CHECK(recs[1] <= recs[2]);
    }

    // permute instances consistently across modalities
    std::vector<int> perm(ds.instance_count());
    for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
    CounterRng prng(5, 0);
    prng.shuffle(perm);
    datagen::OmniDataset permuted = ds;
    for (int m = 0; m < ds.modality_count(); ++m)
        for (int i = 0; i < ds.instance_count(); ++i)
            permuted.modalities[m].row(i) = ds.modalities[m].row(perm[i]);
    for (int i = 0; i < ds.instance_count(); ++i) permuted.labels[i] = ds.labels[perm[i]];

    auto rep2 = eval::retrieval_recall(heads, permuted, {1, 5, 10});
    for (size_t p = 0; p < rep.recall.size(); ++p)
        for (size_t k = 0; k < rep.recall[p].size(); ++k)
            CHECK(rep2.recall[p][k] == Approx(rep.recall[p][k]).margin(1e-12));

    // positive rescaling of any head leaves the report unchanged
    auto scaled = heads;
    scaled.weights[1] *= 4.2;
    auto rep3 = eval::retrieval_recall(scaled, ds, {1, 5, 10});
    for (size_t p = 0; p < rep.recall.size(); ++p)
        CHECK(rep3.recall[p][0] == Approx(rep.recall[p][0]).margin(1e-12));

    CHECK_THROWS_AS(eval::retrieval_recall(heads, ds, {0}), DimensionError);
    CHECK_THROWS_AS(eval::retrieval_recall(heads, ds, {21}), DimensionError);
}

TEST_CASE("train-from-scratch protocol", "[eval]") {
    datagen::GeneratorConfig gcfg;
    gcfg.n = 40;
    gcfg.k = 3;
    gcfg.d_in = {9, 8, 10};
    gcfg.latent_dim = 6;
    gcfg.num_classes = 5;
    gcfg.seed = 21;
    auto train = datagen::generate(gcfg, datagen::Split::train);
    auto cfg = small_eval_config();

    SECTION("zero epochs returns the seeded initialization") {
        auto c = cfg;
        c.epochs = 0;
        auto heads = eval::train_student(train, c, 7);
        CounterRng init(7, 0x11);
        auto expect = model::ProjectionHeads::seeded_init(c.head_dim, train.input_dims(), init);
        for (size_t m = 0; m < heads.weights.size(); ++m) CHECK(heads.weights[m] == expect.weights[m]);
    }

    SECTION("training reduces the loss") {
        engine::TrainOptions opt;
        opt.epochs = cfg.epochs;
        opt.batch_size = cfg.batch_size;
        opt.learning_rate = cfg.lr_teacher;
        opt.head_dim = cfg.head_dim;
        opt.seed = 7;
        auto run = engine::train_heads(train.modalities,
                                       objectives::SimilarityTargets::identity(train.instance_count()), opt);
        CHECK(run.epoch_losses.back() < run.epoch_losses.front());
    }

    SECTION("a synthetic set trains at its own learned step size") {
        distill::SyntheticSet syn;
        syn.modality_names = train.modality_names;
        for (const auto& m : train.modalities) syn.embeddings.push_back(m.topRows(8));
        syn.sim_a = Matrix::Zero(8, 2);
        syn.sim_b = Matrix::Zero(8, 2);
        syn.student_lr = 1e-300;  // effectively frozen training
        auto heads = eval::train_student(syn, cfg, 7);
        CounterRng init(7, 0x11);
        auto expect = model::ProjectionHeads::seeded_init(cfg.head_dim, train.input_dims(), init);
        for (size_t m = 0; m < heads.weights.size(); ++m) CHECK(heads.weights[m] == expect.weights[m]);
    }
}

TEST_CASE("protocol aggregation over seeds", "[eval]") {
    datagen::GeneratorConfig gcfg;
    gcfg.n = 30;
    gcfg.k = 2;
    gcfg.d_in = {8, 9};
    gcfg.latent_dim = 6;
    gcfg.num_classes = 5;
    gcfg.modality_noise = {0.3, 0.3};
    gcfg.modality_names = {"video", "audio"};
    gcfg.seed = 23;
    auto train = datagen::generate(gcfg, datagen::Split::train);
    auto test = datagen::generate(gcfg, datagen::Split::test);
    auto cfg = small_eval_config();

    SECTION("one seed has zero std") {
        auto rep = eval::evaluate_protocol(train, test, cfg, {3});
        CHECK(rep.seeds == 1);
        for (const auto& row : rep.stdev)
            for (double s : row) CHECK(s == 0.0);
    }

    SECTION("identical seed lists give identical reports") {
        auto a = eval::evaluate_protocol(train, test, cfg, {3, 4});
        auto b = eval::evaluate_protocol(train, test, cfg, {3, 4});
        CHECK(eval::report_csv(a) == eval::report_csv(b));
    }

    SECTION("random coreset eval composes sampling with the protocol") {
        auto direct = eval::evaluate_protocol(datagen::sample_real_subset(train, 12, 77), test, cfg, {3});
        auto via = eval::random_coreset_eval(train, test, 12, cfg, {3}, 77);
        CHECK(eval::report_csv(direct) == eval::report_csv(via));

        // n = N uses every instance
        auto full = datagen::sample_real_subset(train, train.instance_count(), 7);
        CHECK(full.instance_count() == train.instance_count());
    }

    SECTION("csv shape") {
        auto rep = eval::evaluate_protocol(train, test, cfg, {3});
        const std::string csv = eval::report_csv(rep);
        CHECK(csv.find("video->audio") != std::string::npos);
        CHECK(csv.find("audio->video") != std::string::npos);
        CHECK(csv.find("Avg") != std::string::npos);
        CHECK(csv.find("R@1_mean") != std::string::npos);
    }
}
