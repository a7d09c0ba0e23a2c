// omnidistill CLI: dataset generation, expert-buffer building, distillation
// (full method and baselines), train-from-scratch retrieval evaluation, and
// the numerical verification suites. Every command is deterministic given
// its resolved config, which is echoed into a fresh run directory.
//
// Exit codes: 0 success, 1 usage/config error, 2 runtime error,
// 3 verification failure.

#include "omnidistill/runconfig.hpp"
#include "omnidistill/verification.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <iostream>

namespace fs = std::filesystem;
using namespace omnidistill;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir = "runs";
    std::string seed_override;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "flat key=value config file (defaults used when omitted)");
    cmd->add_option("--out", args.out_dir, "base output directory (a run directory is created inside)");
    cmd->add_option("--seed", args.seed_override, "seed override (precedence: flag > OMNIDISTILL_SEED > config)");
}

config::RunConfig resolve_config(const CommonArgs& args) {
    config::RunConfig cfg = args.config_path.empty() ? config::RunConfig::resolved_defaults()
                                                     : config::RunConfig::from_file(args.config_path);
    if (const char* env = std::getenv("OMNIDISTILL_SEED"); env && *env) cfg.set("seed", env);
    if (!args.seed_override.empty()) cfg.set("seed", args.seed_override);
    return cfg;
}

// Run directory named by UTC timestamp + config digest; never reused.
fs::path make_run_dir(const std::string& base, const config::RunConfig& cfg) {
    const auto now = std::chrono::system_clock::now();
    const std::time_t tt = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&tt, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof(stamp), "%Y%m%dT%H%M%SZ", &tm);

    char digest[20];
    std::snprintf(digest, sizeof(digest), "%08llx",
                  static_cast<unsigned long long>(cfg.digest() & 0xffffffffull));

    fs::path dir = fs::path(base) / (std::string(stamp) + "-" + digest);
    for (int suffix = 1; fs::exists(dir); ++suffix)
        dir = fs::path(base) / (std::string(stamp) + "-" + digest + "-" + std::to_string(suffix));
    fs::create_directories(dir);
    io::write_file_atomic(dir / "resolved.config", cfg.echo());
    return dir;
}

uint32_t file_digest(const fs::path& p) {
    const std::string bytes = io::read_file(p);
    return io::crc32_of(bytes.data(), bytes.size());
}

std::string distill_log_csv(const std::string& method, const std::vector<distill::IterationRecord>& log,
                            const std::vector<std::string>& pair_names) {
    std::ostringstream out;
    out << "# method=" << method << "\n";
    out << "iter,matching_loss,eta,segment_traj,segment_start,skipped";
    for (const auto& p : pair_names) out << ",pair_" << p;
    out << "\n";
    out << std::setprecision(17);
    for (const auto& r : log) {
        out << r.iter << "," << r.matching_loss << "," << r.eta << "," << r.segment_traj << ","
            << r.segment_start << "," << (r.skipped ? 1 : 0);
        for (double c : r.pair_components) out << "," << c;
        out << "\n";
    }
    return out.str();
}

int cmd_gen_data(const CommonArgs& common) {
    config::RunConfig cfg = resolve_config(common);
    fs::path dir = make_run_dir(common.out_dir, cfg);

    datagen::OmniDataset train = datagen::generate(cfg.generator(datagen::Split::train), datagen::Split::train);
    datagen::OmniDataset test = datagen::generate(cfg.generator(datagen::Split::test), datagen::Split::test);
    datagen::write_dataset(train, dir / "train.omds");
    datagen::write_dataset(test, dir / "test.omds");

    std::printf("train: %s (N=%d, digest=%08x)\n", (dir / "train.omds").c_str(), train.instance_count(),
                file_digest(dir / "train.omds"));
    std::printf("test:  %s (N=%d, digest=%08x)\n", (dir / "test.omds").c_str(), test.instance_count(),
                file_digest(dir / "test.omds"));
    return 0;
}

int cmd_buffer(const CommonArgs& common, const std::string& data_path, int num_experts_override) {
    config::RunConfig cfg = resolve_config(common);
    if (num_experts_override > 0) cfg.set("num_experts", std::to_string(num_experts_override));
    fs::path dir = make_run_dir(common.out_dir, cfg);

    datagen::OmniDataset train = datagen::read_dataset(data_path);
    buffer::BufferConfig bcfg = cfg.buffer_config();
    std::vector<buffer::ExpertTrajectory> buf = buffer::build_buffer(train, bcfg);
    buffer::save_buffer(buf, dir / "buffer.omtb");

    std::printf("buffer: %s (%d experts x %d epochs, digest=%08x)\n", (dir / "buffer.omtb").c_str(),
                static_cast<int>(buf.size()), buf[0].epochs(), file_digest(dir / "buffer.omtb"));
    return 0;
}

int cmd_distill(const CommonArgs& common, const std::string& data_path, const std::string& buffer_path,
                const std::string& method_name) {
    config::RunConfig cfg = resolve_config(common);
    distill::Method method = distill::method_from_name(method_name);
    fs::path dir = make_run_dir(common.out_dir, cfg);

    datagen::OmniDataset train = datagen::read_dataset(data_path);
    std::vector<buffer::ExpertTrajectory> buf = buffer::load_buffer(buffer_path);
    distill::DistillConfig dcfg = cfg.distill_config();
    distill::DistillResult result = distill::distill(train, buf, dcfg, cfg.get_int("n"), method);

    distill::write_synthetic(result.syn, dir / "synthetic.omss");
    std::vector<std::string> pair_names;
    if (!result.log.empty() && !result.log.front().pair_components.empty()) {
        using objectives::CompositeVariant;
        CompositeVariant v = method == distill::Method::three_pair ? CompositeVariant::ThreePair
                             : method == distill::Method::t_bind   ? CompositeVariant::TBind
                                                                   : CompositeVariant::VBind;
        for (auto [a, b] : objectives::composite_pairs(v))
            pair_names.push_back(train.modality_names[a] + "_" + train.modality_names[b]);
    }
    io::write_file_atomic(dir / "distill_log.csv", distill_log_csv(method_name, result.log, pair_names));

    int skipped = 0;
    for (const auto& r : result.log) skipped += r.skipped ? 1 : 0;
    std::printf("synthetic: %s (n=%d, digest=%08x)\n", (dir / "synthetic.omss").c_str(),
                result.syn.instance_count(), file_digest(dir / "synthetic.omss"));
    std::printf("log: %s (%d iterations, %d skipped, final eta=%.6g)\n", (dir / "distill_log.csv").c_str(),
                static_cast<int>(result.log.size()), skipped,
                result.log.empty() ? dcfg.lr_teacher : result.log.back().eta);
    return 0;
}

int cmd_eval(const CommonArgs& common, const std::string& artifact_path, const std::string& test_path,
             const std::string& seeds_csv, const std::string& baseline, int coreset_n,
             const std::string& train_path) {
    config::RunConfig cfg = resolve_config(common);
    if (!seeds_csv.empty()) cfg.set("eval_seeds", seeds_csv);
    fs::path dir = make_run_dir(common.out_dir, cfg);

    datagen::OmniDataset test = datagen::read_dataset(test_path);
    eval::EvalConfig ecfg = cfg.eval_config();
    const std::vector<uint64_t> seeds = cfg.get_u64_list("eval_seeds");

    eval::AggregateReport rep;
    if (baseline == "random") {
        if (train_path.empty()) throw ConfigError("--baseline random requires --data <train dataset>");
        const int n = coreset_n > 0 ? coreset_n : cfg.get_int("n");
        datagen::OmniDataset train = datagen::read_dataset(train_path);
        rep = eval::random_coreset_eval(train, test, n, ecfg, seeds, cfg.get_u64("seed"));
    } else if (!baseline.empty()) {
        throw ConfigError("unknown --baseline '" + baseline + "' (supported: random)");
    } else {
        if (artifact_path.empty()) throw ConfigError("eval requires --artifact or --baseline random");
        distill::SyntheticSet syn = distill::read_synthetic(artifact_path);
        syn.modality_names = test.modality_names;
        rep = eval::evaluate_protocol(syn, test, ecfg, seeds);
    }

    io::write_file_atomic(dir / "report.csv", eval::report_csv(rep));
    std::printf("report: %s\n", (dir / "report.csv").c_str());
    std::printf("Avg R@1 = %.1f +- %.1f over %d seed(s)\n", rep.avg_mean[0], rep.avg_stdev[0], rep.seeds);
    return 0;
}

int cmd_verify(const CommonArgs& common, const std::string& suite) {
    config::RunConfig cfg = resolve_config(common);
    fs::path dir = make_run_dir(common.out_dir, cfg);

    const int trials = cfg.get_int("verify_trials");
    const int steps = cfg.get_int("verify_steps");
    const double eta = cfg.get_double("verify_eta");
    const int probes = cfg.get_int("verify_probes");
    const uint64_t seed = cfg.get_u64("seed");

    std::vector<verification::SuiteResult> results;
    auto want = [&suite](const char* name) { return suite == "all" || suite == name; };
    if (want("gradients")) {
        results.push_back(verification::run_gradient_suite(trials, seed));
        results.push_back(verification::run_metagrad_suite(seed));
    }
    if (want("spectrum")) {
        results.push_back(verification::run_spectral_suite(trials, seed));
        results.push_back(verification::run_selectivity_suite(trials, seed));
        results.push_back(verification::run_mismatch_suite(std::min(trials, 25), 4, eta, seed));
    }
    if (want("lemma1")) results.push_back(verification::run_lemma1_suite(trials, steps, eta, probes, seed));
    if (want("theorem1")) results.push_back(verification::run_theorem1_suite(trials, steps, eta, seed));
    if (results.empty())
        throw ConfigError("unknown suite '" + suite + "' (use lemma1, spectrum, theorem1, gradients, all)");

    bool all_passed = true;
    for (const auto& r : results) {
        io::write_file_atomic(dir / (r.name + ".csv"), verification::rows_csv(r.rows));
        std::printf("[%s] %s: %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str());
        all_passed = all_passed && r.passed;
    }
    std::printf("reports under %s\n", dir.c_str());
    return all_passed ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"omnimodal dataset distillation via rank-1 spectral proxy alignment"};
    app.require_subcommand(1);

    CommonArgs gen_args, buf_args, dis_args, eval_args, ver_args;
    std::string buf_data, dis_data, dis_buffer, dis_method = "hopa";
    std::string eval_artifact, eval_test, eval_seeds, eval_baseline, eval_train;
    int buf_experts = 0, eval_n = 0;
    std::string ver_suite = "all";

    CLI::App* gen = app.add_subcommand("gen-data", "generate train/test omnimodal embedding datasets");
    add_common(gen, gen_args);

    CLI::App* buf = app.add_subcommand("buffer", "train expert trajectories on real data");
    add_common(buf, buf_args);
    buf->add_option("--data", buf_data, "train dataset (.omds)")->required();
    buf->add_option("--num-experts", buf_experts, "override num_experts from the config");

    CLI::App* dis = app.add_subcommand("distill", "distill a synthetic set by trajectory matching");
    add_common(dis, dis_args);
    dis->add_option("--data", dis_data, "train dataset (.omds)")->required();
    dis->add_option("--buffer", dis_buffer, "expert buffer (.omtb)")->required();
    dis->add_option("--method", dis_method,
                    "hopa, 3pair, tbind, vbind, rank2, ablate-LM, ablate-wBCE, ablate-mining");

    CLI::App* evl = app.add_subcommand("eval", "train from scratch on an artifact and report retrieval R@K");
    add_common(evl, eval_args);
    evl->add_option("--artifact", eval_artifact, "synthetic set (.omss)");
    evl->add_option("--test", eval_test, "test dataset (.omds)")->required();
    evl->add_option("--seeds", eval_seeds, "comma-separated evaluation seeds (overrides config)");
    evl->add_option("--baseline", eval_baseline, "baseline instead of an artifact (random)");
    evl->add_option("--n", eval_n, "coreset size for --baseline random");
    evl->add_option("--data", eval_train, "train dataset, required for --baseline random");

    CLI::App* ver = app.add_subcommand("verify", "numerical verification suites");
    add_common(ver, ver_args);
    ver->add_option("--suite", ver_suite, "lemma1, spectrum, theorem1, gradients, all");

    try {
        app.parse(argc, argv);
        if (gen->parsed()) return cmd_gen_data(gen_args);
        if (buf->parsed()) return cmd_buffer(buf_args, buf_data, buf_experts);
        if (dis->parsed()) return cmd_distill(dis_args, dis_data, dis_buffer, dis_method);
        if (evl->parsed())
            return cmd_eval(eval_args, eval_artifact, eval_test, eval_seeds, eval_baseline, eval_n, eval_train);
        if (ver->parsed()) return cmd_verify(ver_args, ver_suite);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 1;
}
