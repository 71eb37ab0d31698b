#pragma once

#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "vitprune/evalkit.hpp"
#include "vitprune/rl_train.hpp"
#include "vitprune/vit.hpp"

namespace vitprune {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataConfig {
    std::string kind = "synth";  // synth | raw
    std::string dir;             // raw: directory with train/ and test/ subdirs
    int train_count = 8000;
    int test_count = 2000;
    int image_size = 16;
    int num_classes = 4;
};

struct BenchConfig {
    int tokens = 197;  // must equal (image_size/patch_size)^2 + 1
    int image_size = 224;
    int patch_size = 16;
    int channels = 3;
    int embed_dim = 192;
    int depth = 12;
    int num_heads = 3;
    int ffn_mult = 4;
    std::vector<int> prune_after = {3, 6, 9};
    std::vector<double> retentions = {0.5};
    int trials = 24;
    int warmup = 3;

    ViTConfig to_vit() const {
        ViTConfig v;
        v.image_size = image_size;
        v.patch_size = patch_size;
        v.channels = channels;
        v.embed_dim = embed_dim;
        v.depth = depth;
        v.num_heads = num_heads;
        v.ffn_mult = ffn_mult;
        v.num_classes = 10;  // arbitrary; weights are random and speed-irrelevant
        v.prune_after = prune_after;
        return v;
    }
};

struct SweepConfig {
    std::vector<double> ratios = {0.05, 0.1, 0.2, 0.4};
    int epochs = 2;
    int train_subset = 2000;
};

struct VizConfig {
    int index = 0;   // dataset image to visualize
    int count = 1;   // how many consecutive images
};

// Union of all sections plus run-level paths. Defaults here, file values
// override defaults, flag values override file values.
struct RunConfig {
    ViTConfig vit;
    TrainConfig train;
    DataConfig data;
    BenchConfig bench;
    SweepConfig sweep;
    VizConfig viz;
    std::string out_dir = "runs/out";
    std::string checkpoint_in;
    std::string checkpoint_out;  // defaults to <out_dir>/checkpoint
};

namespace cfgdetail {

template <typename T>
void get_to(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) {
        j.at(key).get_to(out);
    }
}

inline void expect_keys(const nlohmann::json& j, const std::vector<std::string>& known,
                        const std::string& section) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const auto& k : known) {
            if (it.key() == k) {
                ok = true;
                break;
            }
        }
        if (!ok) {
            throw ConfigError("unknown config key: " + section + "." + it.key());
        }
    }
}

}  // namespace cfgdetail

inline nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json j;
    j["vit"] = {{"image_size", c.vit.image_size},       {"patch_size", c.vit.patch_size},
                {"channels", c.vit.channels},           {"embed_dim", c.vit.embed_dim},
                {"depth", c.vit.depth},                 {"num_heads", c.vit.num_heads},
                {"ffn_mult", c.vit.ffn_mult},           {"num_classes", c.vit.num_classes},
                {"prune_after", c.vit.prune_after}};
    j["train"] = {{"eps_theta", c.train.eps_theta},
                  {"eps_phi", c.train.eps_phi},
                  {"k_iters", c.train.k_iters},
                  {"actor_lr", c.train.actor_lr},
                  {"critic_lr", c.train.critic_lr},
                  {"vit_lr", c.train.vit_lr},
                  {"gamma_d", c.train.gamma_d},
                  {"lambda", c.train.lambda},
                  {"entropy_coef", c.train.entropy_coef},
                  {"epochs", c.train.epochs},
                  {"batch_size", c.train.batch_size},
                  {"seed", c.train.seed},
                  {"finetune_enabled", c.train.finetune_enabled},
                  {"policy_mode", to_string(c.train.policy_mode)},
                  {"keep_prob", c.train.keep_prob},
                  {"grad_clip_norm", c.train.grad_clip_norm},
                  {"pretrain_epochs", c.train.pretrain_epochs},
                  {"pretrain_lr", c.train.pretrain_lr},
                  {"checkpoint_every", c.train.checkpoint_every},
                  {"wall_clock", c.train.wall_clock},
                  {"train_subset", c.train.train_subset}};
    j["reward"] = {{"alpha", c.train.reward.alpha},
                   {"beta", c.train.reward.beta},
                   {"r2_scope", c.train.reward.r2_scope == R2Scope::all_agents
                                    ? "all_agents"
                                    : "preserved_only"}};
    j["data"] = {{"kind", c.data.kind},           {"dir", c.data.dir},
                 {"train_count", c.data.train_count}, {"test_count", c.data.test_count},
                 {"image_size", c.data.image_size},   {"num_classes", c.data.num_classes}};
    j["bench"] = {{"tokens", c.bench.tokens},
                  {"image_size", c.bench.image_size},
                  {"patch_size", c.bench.patch_size},
                  {"channels", c.bench.channels},
                  {"embed_dim", c.bench.embed_dim},
                  {"depth", c.bench.depth},
                  {"num_heads", c.bench.num_heads},
                  {"ffn_mult", c.bench.ffn_mult},
                  {"prune_after", c.bench.prune_after},
                  {"retentions", c.bench.retentions},
                  {"trials", c.bench.trials},
                  {"warmup", c.bench.warmup}};
    j["sweep"] = {{"ratios", c.sweep.ratios},
                  {"epochs", c.sweep.epochs},
                  {"train_subset", c.sweep.train_subset}};
    j["viz"] = {{"index", c.viz.index}, {"count", c.viz.count}};
    j["out_dir"] = c.out_dir;
    j["checkpoint_in"] = c.checkpoint_in;
    j["checkpoint_out"] = c.checkpoint_out;
    return j;
}

inline void apply_json(RunConfig& c, const nlohmann::json& j) {
    using cfgdetail::expect_keys;
    using cfgdetail::get_to;
    expect_keys(j, {"vit", "train", "reward", "data", "bench", "sweep", "viz", "out_dir",
                    "checkpoint_in", "checkpoint_out"},
                "(top)");
    if (j.contains("vit")) {
        const auto& v = j.at("vit");
        expect_keys(v, {"image_size", "patch_size", "channels", "embed_dim", "depth", "num_heads",
                        "ffn_mult", "num_classes", "prune_after"},
                    "vit");
        get_to(v, "image_size", c.vit.image_size);
        get_to(v, "patch_size", c.vit.patch_size);
        get_to(v, "channels", c.vit.channels);
        get_to(v, "embed_dim", c.vit.embed_dim);
        get_to(v, "depth", c.vit.depth);
        get_to(v, "num_heads", c.vit.num_heads);
        get_to(v, "ffn_mult", c.vit.ffn_mult);
        get_to(v, "num_classes", c.vit.num_classes);
        get_to(v, "prune_after", c.vit.prune_after);
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        expect_keys(t, {"eps_theta", "eps_phi", "k_iters", "actor_lr", "critic_lr", "vit_lr",
                        "gamma_d", "lambda", "entropy_coef", "epochs", "batch_size", "seed",
                        "finetune_enabled", "policy_mode", "keep_prob", "grad_clip_norm",
                        "pretrain_epochs", "pretrain_lr", "checkpoint_every", "wall_clock",
                        "train_subset"},
                    "train");
        get_to(t, "eps_theta", c.train.eps_theta);
        get_to(t, "eps_phi", c.train.eps_phi);
        get_to(t, "k_iters", c.train.k_iters);
        get_to(t, "actor_lr", c.train.actor_lr);
        get_to(t, "critic_lr", c.train.critic_lr);
        get_to(t, "vit_lr", c.train.vit_lr);
        get_to(t, "gamma_d", c.train.gamma_d);
        get_to(t, "lambda", c.train.lambda);
        get_to(t, "entropy_coef", c.train.entropy_coef);
        get_to(t, "epochs", c.train.epochs);
        get_to(t, "batch_size", c.train.batch_size);
        get_to(t, "seed", c.train.seed);
        get_to(t, "finetune_enabled", c.train.finetune_enabled);
        if (t.contains("policy_mode")) {
            c.train.policy_mode = policy_mode_from_string(t.at("policy_mode").get<std::string>());
        }
        get_to(t, "keep_prob", c.train.keep_prob);
        get_to(t, "grad_clip_norm", c.train.grad_clip_norm);
        get_to(t, "pretrain_epochs", c.train.pretrain_epochs);
        get_to(t, "pretrain_lr", c.train.pretrain_lr);
        get_to(t, "checkpoint_every", c.train.checkpoint_every);
        get_to(t, "wall_clock", c.train.wall_clock);
        get_to(t, "train_subset", c.train.train_subset);
    }
    if (j.contains("reward")) {
        const auto& r = j.at("reward");
        expect_keys(r, {"alpha", "beta", "r2_scope"}, "reward");
        get_to(r, "alpha", c.train.reward.alpha);
        get_to(r, "beta", c.train.reward.beta);
        if (r.contains("r2_scope")) {
            const std::string s = r.at("r2_scope").get<std::string>();
            if (s == "all_agents") {
                c.train.reward.r2_scope = R2Scope::all_agents;
            } else if (s == "preserved_only") {
                c.train.reward.r2_scope = R2Scope::preserved_only;
            } else {
                throw ConfigError("reward.r2_scope must be all_agents or preserved_only");
            }
        }
    }
    if (j.contains("data")) {
        const auto& d = j.at("data");
        expect_keys(d, {"kind", "dir", "train_count", "test_count", "image_size", "num_classes"},
                    "data");
        get_to(d, "kind", c.data.kind);
        get_to(d, "dir", c.data.dir);
        get_to(d, "train_count", c.data.train_count);
        get_to(d, "test_count", c.data.test_count);
        get_to(d, "image_size", c.data.image_size);
        get_to(d, "num_classes", c.data.num_classes);
        if (c.data.kind != "synth" && c.data.kind != "raw") {
            throw ConfigError("data.kind must be synth or raw");
        }
    }
    if (j.contains("bench")) {
        const auto& b = j.at("bench");
        expect_keys(b, {"tokens", "image_size", "patch_size", "channels", "embed_dim", "depth",
                        "num_heads", "ffn_mult", "prune_after", "retentions", "trials", "warmup"},
                    "bench");
        get_to(b, "tokens", c.bench.tokens);
        get_to(b, "image_size", c.bench.image_size);
        get_to(b, "patch_size", c.bench.patch_size);
        get_to(b, "channels", c.bench.channels);
        get_to(b, "embed_dim", c.bench.embed_dim);
        get_to(b, "depth", c.bench.depth);
        get_to(b, "num_heads", c.bench.num_heads);
        get_to(b, "ffn_mult", c.bench.ffn_mult);
        get_to(b, "prune_after", c.bench.prune_after);
        get_to(b, "retentions", c.bench.retentions);
        get_to(b, "trials", c.bench.trials);
        get_to(b, "warmup", c.bench.warmup);
        if (b.contains("tokens") && !b.contains("image_size")) {
            // derive a square geometry from the requested token count
            const int n = c.bench.tokens - 1;
            const int side = static_cast<int>(std::lround(std::sqrt(double(n))));
            if (side * side != n) {
                throw ConfigError("bench.tokens - 1 must be a perfect square");
            }
            c.bench.image_size = side * c.bench.patch_size;
        }
    }
    if (j.contains("sweep")) {
        const auto& s = j.at("sweep");
        expect_keys(s, {"ratios", "epochs", "train_subset"}, "sweep");
        get_to(s, "ratios", c.sweep.ratios);
        get_to(s, "epochs", c.sweep.epochs);
        get_to(s, "train_subset", c.sweep.train_subset);
    }
    if (j.contains("viz")) {
        const auto& v = j.at("viz");
        expect_keys(v, {"index", "count"}, "viz");
        get_to(v, "index", c.viz.index);
        get_to(v, "count", c.viz.count);
    }
    get_to(j, "out_dir", c.out_dir);
    get_to(j, "checkpoint_in", c.checkpoint_in);
    get_to(j, "checkpoint_out", c.checkpoint_out);
}

inline void validate(const RunConfig& c) {
    try {
        c.vit.validate();
        c.train.validate();
        int expect_tokens =
            (c.bench.image_size / c.bench.patch_size) * (c.bench.image_size / c.bench.patch_size) +
            1;
        if (c.bench.tokens != expect_tokens) {
            throw std::invalid_argument("bench.tokens does not match bench geometry (expected " +
                                        std::to_string(expect_tokens) + ")");
        }
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

inline RunConfig load_run_config(const std::string& config_path,
                                 const std::vector<std::pair<std::string, std::string>>& flags) {
    RunConfig c;
    if (!config_path.empty()) {
        std::ifstream f(config_path);
        if (!f) {
            throw ConfigError("cannot open config file: " + config_path);
        }
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(f);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("config parse error: ") + e.what());
        }
        apply_json(c, j);
    }
    // flags: dotted keys become one-entry JSON patches
    static const std::vector<std::pair<std::string, std::string>> aliases = {
        {"finetune", "train.finetune_enabled"}, {"seed", "train.seed"},
        {"policy", "train.policy_mode"},        {"alpha", "reward.alpha"},
        {"beta", "reward.beta"},                {"epochs", "train.epochs"},
        {"tokens", "bench.tokens"},             {"out", "out_dir"},
        {"checkpoint", "checkpoint_in"},
    };
    for (auto [key, value] : flags) {
        if (key == "retention") {  // convenience: single bench retention target
            key = "bench.retentions";
            value = "[" + value + "]";
        }
        for (const auto& [alias, full] : aliases) {
            if (key == alias) {
                key = full;
                break;
            }
        }
        nlohmann::json parsed;
        try {
            parsed = nlohmann::json::parse(value);
        } catch (const nlohmann::json::exception&) {
            parsed = value;  // unquoted strings stay strings
        }
        nlohmann::json patch;
        nlohmann::json* cur = &patch;
        size_t start = 0;
        while (true) {
            const size_t dot = key.find('.', start);
            if (dot == std::string::npos) {
                (*cur)[key.substr(start)] = parsed;
                break;
            }
            cur = &(*cur)[key.substr(start, dot - start)];
            start = dot + 1;
        }
        apply_json(c, patch);
    }
    validate(c);
    return c;
}

template <typename S>
Dataset<S> build_dataset(const RunConfig& c, const std::string& split) {
    if (c.data.kind == "raw") {
        return load_raw<S>(c.data.dir + "/" + split, c.data.num_classes);
    }
    const Index count = split == "train" ? c.data.train_count : c.data.test_count;
    const uint64_t seed = substream(c.train.seed, "data-" + split);
    return synth_blobs<S>(seed, count, c.data.image_size, c.data.num_classes);
}

}  // namespace vitprune
