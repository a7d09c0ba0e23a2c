#include "omnidistill/runconfig.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace omnidistill;
using Catch::Approx;
using config::RunConfig;

TEST_CASE("parsing fills defaults and rejects unknown keys", "[runconfig]") {
    auto cfg = RunConfig::from_text(
        "# a comment line\n"
        "seed = 99   # trailing comment\n"
        "\n"
        "tau=0.2\n"
        "d_in = 24,16,20\n");
    CHECK(cfg.get_u64("seed") == 99);
    CHECK(cfg.get_double("tau") == Approx(0.2));
    CHECK(cfg.get_int_list("d_in") == std::vector<int>{24, 16, 20});
    // untouched keys come from defaults
    CHECK(cfg.get_int("epochs") == 10);
    CHECK(cfg.get_int("num_experts") == 20);
    CHECK(cfg.get_double("lr_teacher") == Approx(0.01));

    CHECK_THROWS_AS(RunConfig::from_text("not_a_key = 3\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_text("seed\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_text("seed =\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::resolved_defaults().get_int("modality_names"), ConfigError);
}

TEST_CASE("echo is sorted and digest is stable", "[runconfig]") {
    auto a = RunConfig::from_text("tau = 0.2\nseed = 5\n");
    auto b = RunConfig::from_text("seed = 5\ntau = 0.2\n");
    CHECK(a.echo() == b.echo());
    CHECK(a.digest() == b.digest());
    CHECK(a.digest() != RunConfig::resolved_defaults().digest());

    // echo round-trips through the parser
    auto c = RunConfig::from_text(a.echo());
    CHECK(c.digest() == a.digest());
}

TEST_CASE("typed sub-configs", "[runconfig]") {
    auto cfg = RunConfig::resolved_defaults();

    auto gen = cfg.generator(datagen::Split::train);
    CHECK(gen.n == 2000);
    CHECK(gen.k == 3);
    CHECK(gen.modality_names == std::vector<std::string>{"video", "audio", "text"});
    CHECK(cfg.generator(datagen::Split::test).n == 500);

    auto buf = cfg.buffer_config();
    CHECK(buf.epochs == 10);
    CHECK(buf.num_experts == 20);
    CHECK(buf.batch_size == 128);
    CHECK(buf.lr_teacher == Approx(0.01));
    CHECK(buf.loss.tau == Approx(0.1));
    CHECK(buf.loss.tau_prime == Approx(0.2));

    auto dis = cfg.distill_config();
    CHECK(dis.syn_steps == 16);
    CHECK(dis.expert_epochs == 2);
    CHECK(dis.max_start_epoch == 5);
    CHECK(dis.mini_batch_size == 25);
    CHECK(dis.momentum == Approx(0.5));
    CHECK(dis.lr_lr == Approx(1e-4));

    auto ev = cfg.eval_config();
    CHECK(ev.epochs == cfg.get_int("eval_epochs"));
    CHECK(ev.ks == std::vector<int>{1, 5, 10});
}

TEST_CASE("malformed values carry the key name", "[runconfig]") {
    auto cfg = RunConfig::from_text("epochs = eleven\n");
    CHECK_THROWS_WITH(cfg.get_int("epochs"), Catch::Matchers::ContainsSubstring("epochs"));
    auto cfg2 = RunConfig::from_text("tau = 0.1x\n");
    CHECK_THROWS_WITH(cfg2.get_double("tau"), Catch::Matchers::ContainsSubstring("tau"));
}
