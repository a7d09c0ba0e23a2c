// Flat "key = value" run configuration with # comments. Keys use the
// hyperparameter table names; unknown keys are rejected, missing keys fall
// back to documented desk-scale defaults, and the resolved config can be
// echoed (sorted) so every run is replayable from its run directory.
#pragma once

#include "omnidistill/buffer.hpp"
#include "omnidistill/distill.hpp"
#include "omnidistill/eval.hpp"

#include <map>
#include <sstream>

namespace omnidistill::config {

struct RunConfig {
    // sorted key -> value, fully resolved
    std::map<std::string, std::string> values;

    static const std::map<std::string, std::string>& defaults() {
        static const std::map<std::string, std::string> d = {
            // artifact
            {"seed", "17"},
            // generator
            {"N", "2000"},
            {"n_test", "500"},
            {"k", "3"},
            {"d_in", "48,32,40"},
            {"latent_dim", "16"},
            {"num_classes", "20"},
            {"within_class_spread", "0.25"},
            {"modality_noise", "0.35,0.35,0.35"},
            {"modality_names", "video,audio,text"},
            {"head_dim", "16"},
            // buffer
            {"epochs", "10"},
            {"num_experts", "20"},
            {"batch_size", "128"},
            {"lr_teacher", "0.01"},
            {"tau", "0.1"},
            {"tau_prime", "0.2"},
            {"beta", "0.5"},
            // distillation
            {"n", "50"},
            {"lr_data", "40"},
            {"lr_lr", "1e-4"},
            {"lr_sim", "4"},
            {"momentum", "0.5"},
            {"sim_rank", "8"},
            {"sim_alpha", "1.0"},
            {"mini_batch_size", "25"},
            {"iterations", "500"},
            {"syn_steps", "16"},
            {"expert_epochs", "2"},
            {"max_start_epoch", "5"},
            // evaluation
            {"eval_epochs", "10"},
            {"eval_batch_size", "128"},
            {"eval_seeds", "1,2,3"},
            // verification
            {"verify_trials", "100"},
            {"verify_steps", "8"},
            {"verify_eta", "0.05"},
            {"verify_probes", "4"},
            {"gap_tol", "1e-6"},
        };
        return d;
    }

    static RunConfig from_text(const std::string& text) {
        RunConfig cfg;
        cfg.values = defaults();
        std::istringstream in(text);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const size_t hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            auto trim = [](std::string s) {
                const char* ws = " \t\r\n";
                const size_t a = s.find_first_not_of(ws);
                if (a == std::string::npos) return std::string();
                const size_t b = s.find_last_not_of(ws);
                return s.substr(a, b - a + 1);
            };
            line = trim(line);
            if (line.empty()) continue;
            const size_t eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            if (defaults().find(key) == defaults().end())
                throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
            if (value.empty())
                throw ConfigError("config line " + std::to_string(lineno) + ": empty value for '" + key + "'");
            cfg.values[key] = value;
        }
        return cfg;
    }

    static RunConfig from_file(const std::filesystem::path& path) {
        return from_text(io::read_file(path));
    }

    static RunConfig resolved_defaults() {
        RunConfig cfg;
        cfg.values = defaults();
        return cfg;
    }

    void set(const std::string& key, const std::string& value) {
        if (defaults().find(key) == defaults().end()) throw ConfigError("unknown config key '" + key + "'");
        values[key] = value;
    }

    const std::string& get(const std::string& key) const {
        auto it = values.find(key);
        if (it == values.end()) throw ConfigError("missing config key '" + key + "'");
        return it->second;
    }

    int get_int(const std::string& key) const {
        try {
            size_t pos = 0;
            int v = std::stoi(get(key), &pos);
            if (pos != get(key).size()) throw std::invalid_argument("");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "' is not an integer: '" + get(key) + "'");
        }
    }

    double get_double(const std::string& key) const {
        try {
            size_t pos = 0;
            double v = std::stod(get(key), &pos);
            if (pos != get(key).size()) throw std::invalid_argument("");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "' is not a number: '" + get(key) + "'");
        }
    }

    uint64_t get_u64(const std::string& key) const {
        try {
            size_t pos = 0;
            uint64_t v = std::stoull(get(key), &pos);
            if (pos != get(key).size()) throw std::invalid_argument("");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "' is not an unsigned integer: '" + get(key) + "'");
        }
    }

    std::vector<std::string> get_list(const std::string& key) const {
        std::vector<std::string> out;
        std::istringstream in(get(key));
        std::string item;
        while (std::getline(in, item, ',')) out.push_back(item);
        return out;
    }

    std::vector<int> get_int_list(const std::string& key) const {
        std::vector<int> out;
        for (const auto& s : get_list(key)) out.push_back(std::stoi(s));
        return out;
    }

    std::vector<double> get_double_list(const std::string& key) const {
        std::vector<double> out;
        for (const auto& s : get_list(key)) out.push_back(std::stod(s));
        return out;
    }

    std::vector<uint64_t> get_u64_list(const std::string& key) const {
        std::vector<uint64_t> out;
        for (const auto& s : get_list(key)) out.push_back(std::stoull(s));
        return out;
    }

    // Sorted echo of the resolved config; replaying a run starts here.
    std::string echo() const {
        std::ostringstream out;
        for (const auto& [k, v] : values) out << k << " = " << v << "\n";
        return out.str();
    }

    uint64_t digest() const {
        const std::string e = echo();
        uint64_t h = 0xcbf29ce484222325ull;
        for (unsigned char c : e) {
            h ^= c;
            h *= 0x100000001b3ull;
        }
        return h;
    }

    // typed sub-configs -------------------------------------------------

    datagen::GeneratorConfig generator(datagen::Split split) const {
        datagen::GeneratorConfig g;
        g.n = split == datagen::Split::train ? get_int("N") : get_int("n_test");
        g.k = get_int("k");
        g.d_in = get_int_list("d_in");
        g.latent_dim = get_int("latent_dim");
        g.num_classes = get_int("num_classes");
        g.within_class_spread = get_double("within_class_spread");
        g.modality_noise = get_double_list("modality_noise");
        g.seed = get_u64("seed");
        g.modality_names = get_list("modality_names");
        g.validate();
        return g;
    }

    objectives::LossConfig loss() const {
        objectives::LossConfig l;
        l.tau = get_double("tau");
        l.tau_prime = get_double("tau_prime");
        l.beta = get_double("beta");
        l.validate();
        return l;
    }

    buffer::BufferConfig buffer_config() const {
        buffer::BufferConfig b;
        b.epochs = get_int("epochs");
        b.num_experts = get_int("num_experts");
        b.batch_size = get_int("batch_size");
        b.lr_teacher = get_double("lr_teacher");
        b.loss = loss();
        b.gap_tol = get_double("gap_tol");
        b.head_dim = get_int("head_dim");
        b.seed_base = splitmix64(get_u64("seed") ^ 0xb0ff);
        b.validate();
        return b;
    }

    distill::DistillConfig distill_config() const {
        distill::DistillConfig d;
        d.iterations = get_int("iterations");
        d.syn_steps = get_int("syn_steps");
        d.expert_epochs = get_int("expert_epochs");
        d.max_start_epoch = get_int("max_start_epoch");
        d.mini_batch_size = get_int("mini_batch_size");
        d.lr_data = get_double("lr_data");
        d.lr_lr = get_double("lr_lr");
        d.lr_sim = get_double("lr_sim");
        d.momentum = get_double("momentum");
        d.loss = loss();
        d.sim_rank = get_int("sim_rank");
        d.sim_alpha = get_double("sim_alpha");
        d.lr_teacher = get_double("lr_teacher");
        d.head_dim = get_int("head_dim");
        d.gap_tol = get_double("gap_tol");
        d.seed = get_u64("seed");
        d.validate();
        return d;
    }

    eval::EvalConfig eval_config() const {
        eval::EvalConfig e;
        e.epochs = get_int("eval_epochs");
        e.batch_size = get_int("eval_batch_size");
        e.lr_teacher = get_double("lr_teacher");
        e.loss = loss();
        e.gap_tol = get_double("gap_tol");
        e.head_dim = get_int("head_dim");
        return e;
    }
};

}  // namespace omnidistill::config
