// Command-line entry point: pretraining, RL training, evaluation, alpha/beta
// sweeps, throughput benchmarking and mask visualization.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "vitprune/config.hpp"

namespace {

using namespace vitprune;
using Scalar = float;  // training and benchmark runs use 32-bit precision

constexpr const char* kUsage = R"(usage: vitprune <subcommand> [--config=FILE] [--section.key=value ...]

subcommands:
  pretrain    supervised training of the plain ViT; writes a checkpoint
  train       alternating RL / fine-tuning loop from a pretrained checkpoint
  eval        deterministic evaluation; writes report.json
  sweep       alpha/beta ratio sweep; writes sweep.csv
  bench       masked vs compacted throughput table; writes bench.csv
  visualize   per-layer pruning masks as PGM images

flags are JSON-typed, e.g. --train.epochs=4 --reward.alpha=0.8
  --vit.prune_after=[2,3] --data.kind=synth --out_dir=runs/demo
shorthands: --finetune --seed --policy --alpha --beta --epochs --tokens
  --retention --out --checkpoint
every run writes resolved_config.json into out_dir; exit codes: 0 ok,
1 config error, 2 runtime error
)";

void write_resolved_config(const RunConfig& cfg) {
    std::filesystem::create_directories(cfg.out_dir);
    std::ofstream out(cfg.out_dir + "/resolved_config.json", std::ios::trunc);
    out << to_json(cfg).dump(2) << "\n";
}

std::string checkpoint_out_stem(const RunConfig& cfg) {
    return cfg.checkpoint_out.empty() ? cfg.out_dir + "/checkpoint" : cfg.checkpoint_out;
}

// Loads vit.* and, when the manifest carries them, actor.* / critic.*.
void load_artifacts(const RunConfig& cfg, ViTModel<Scalar>& model, ActorNet<Scalar>& actor,
                    CriticNet<Scalar>& critic) {
    if (cfg.checkpoint_in.empty()) {
        throw std::runtime_error("this subcommand needs --checkpoint_in=<stem>");
    }
    bool has_rl = false;
    for (const auto& name : checkpoint_param_names(cfg.checkpoint_in + ".json")) {
        if (name.rfind("actor.", 0) == 0) {
            has_rl = true;
            break;
        }
    }
    if (has_rl) {
        load_all_checkpoint(model, &actor, &critic, cfg.checkpoint_in);
    } else {
        load_all_checkpoint<Scalar>(model, nullptr, nullptr, cfg.checkpoint_in);
    }
}

int cmd_pretrain(const RunConfig& cfg) {
    Dataset<Scalar> train_data = build_dataset<Scalar>(cfg, "train");
    ViTModel<Scalar> model = ViTModel<Scalar>::random_init(cfg.vit, cfg.train.seed);
    auto metrics = pretrain(train_data, model, cfg.train, cfg.out_dir);
    save_checkpoint(checkpoint_out_stem(cfg) + ".json", checkpoint_out_stem(cfg) + ".bin",
                    model.named_params());
    std::printf("pretrain: %d epochs, final train top1 %.4f\n", cfg.train.pretrain_epochs,
                metrics.empty() ? 0.0 : metrics.back().top1);
    return 0;
}

int cmd_train(const RunConfig& cfg) {
    Dataset<Scalar> train_data = build_dataset<Scalar>(cfg, "train");
    ViTModel<Scalar> model = ViTModel<Scalar>::random_init(cfg.vit, cfg.train.seed);
    ActorNet<Scalar> actor = ActorNet<Scalar>::make(cfg.vit.embed_dim, cfg.train.seed);
    CriticNet<Scalar> critic = CriticNet<Scalar>::make(cfg.vit.embed_dim, cfg.train.seed + 1);
    if (!cfg.checkpoint_in.empty()) {
        load_artifacts(cfg, model, actor, critic);
    }
    auto metrics = train_loop(train_data, model, actor, critic, cfg.train, cfg.out_dir);
    for (const auto& m : metrics) {
        std::printf("epoch %d [%s] top1 %.4f", m.epoch, m.phase.c_str(), m.top1);
        for (size_t l = 0; l < m.retention.size(); ++l) {
            std::printf(" r%zu %.3f", l + 1, m.retention[l]);
        }
        std::printf(" L_theta %.5f L_phi %.5f reward %.4f\n", m.l_theta, m.l_phi, m.mean_reward);
    }
    return 0;
}

int cmd_eval(const RunConfig& cfg) {
    Dataset<Scalar> test_data = build_dataset<Scalar>(cfg, "test");
    ViTModel<Scalar> model = ViTModel<Scalar>::random_init(cfg.vit, cfg.train.seed);
    ActorNet<Scalar> actor = ActorNet<Scalar>::make(cfg.vit.embed_dim, cfg.train.seed);
    CriticNet<Scalar> critic = CriticNet<Scalar>::make(cfg.vit.embed_dim, cfg.train.seed + 1);
    load_artifacts(cfg, model, actor, critic);
    EvalReport rep = evaluate(model, &actor, &critic, test_data, cfg.train.policy_mode,
                              cfg.train.keep_prob, cfg.train.seed);
    rep.alpha_over_beta =
        cfg.train.reward.beta > 0 ? cfg.train.reward.alpha / cfg.train.reward.beta : 0.0;
    std::ofstream out(cfg.out_dir + "/report.json", std::ios::trunc);
    out << rep.to_json().dump(2) << "\n";
    std::cout << rep.to_json().dump(2) << "\n";
    return 0;
}

int cmd_sweep(const RunConfig& cfg) {
    Dataset<Scalar> train_data = build_dataset<Scalar>(cfg, "train");
    Dataset<Scalar> test_data = build_dataset<Scalar>(cfg, "test");
    ViTModel<Scalar> model = ViTModel<Scalar>::random_init(cfg.vit, cfg.train.seed);
    ActorNet<Scalar> actor = ActorNet<Scalar>::make(cfg.vit.embed_dim, cfg.train.seed);
    CriticNet<Scalar> critic = CriticNet<Scalar>::make(cfg.vit.embed_dim, cfg.train.seed + 1);
    load_artifacts(cfg, model, actor, critic);
    TrainConfig tc = cfg.train;
    tc.epochs = cfg.sweep.epochs;
    tc.train_subset = cfg.sweep.train_subset;
    auto rows = sweep_alpha_beta(train_data, test_data, model, tc, cfg.sweep.ratios);
    write_sweep_csv(rows, cfg.vit.prune_after.size(), cfg.out_dir + "/sweep.csv");
    for (const auto& r : rows) {
        std::printf("ratio %.4f gflops %.5f top1 %.4f\n", r.ratio, r.gflops, r.top1);
    }
    return 0;
}

int cmd_bench(const RunConfig& cfg) {
    auto rows = benchmark_throughput<Scalar>(cfg.bench.to_vit(), cfg.bench.retentions,
                                             cfg.bench.trials, cfg.bench.warmup, cfg.train.seed);
    std::ofstream csv(cfg.out_dir + "/bench.csv", std::ios::trunc);
    csv << "label,retention,images_per_second,speedup,gflops\n";
    std::printf("%-12s %9s %12s %8s %8s\n", "label", "retention", "images/s", "speedup",
                "gflops");
    for (const auto& r : rows) {
        csv << r.label << ',' << r.retention << ',' << r.images_per_second << ',' << r.speedup
            << ',' << r.gflops << "\n";
        std::printf("%-12s %9.3f %12.2f %8.2fx %8.3f\n", r.label.c_str(), r.retention,
                    r.images_per_second, r.speedup, r.gflops);
    }
    return 0;
}

int cmd_visualize(const RunConfig& cfg) {
    Dataset<Scalar> test_data = build_dataset<Scalar>(cfg, "test");
    ViTModel<Scalar> model = ViTModel<Scalar>::random_init(cfg.vit, cfg.train.seed);
    ActorNet<Scalar> actor = ActorNet<Scalar>::make(cfg.vit.embed_dim, cfg.train.seed);
    CriticNet<Scalar> critic = CriticNet<Scalar>::make(cfg.vit.embed_dim, cfg.train.seed + 1);
    load_artifacts(cfg, model, actor, critic);
    std::filesystem::create_directories(cfg.out_dir + "/masks");
    for (int k = 0; k < cfg.viz.count; ++k) {
        const Index idx = cfg.viz.index + k;
        if (idx < 0 || idx >= test_data.size()) {
            throw std::runtime_error("viz.index out of range");
        }
        PolicyDecider<Scalar> decider(&actor, &critic, cfg.train.policy_mode, cfg.train.keep_prob,
                                      /*train_mode=*/false, /*want_values=*/false,
                                      make_rng(cfg.train.seed, "eval-actions",
                                               static_cast<uint64_t>(idx)));
        Tape<Scalar> t(false);
        Mat<Scalar> image = test_data.images.row(idx);
        ForwardResult<Scalar> res = vit_forward_image(t, model, image, &decider);
        auto files = visualize_masks(image, cfg.vit, res.masks_after,
                                     cfg.out_dir + "/masks/mask_" + std::to_string(idx));
        for (const auto& f : files) {
            std::printf("wrote %s\n", f.c_str());
        }
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        std::fputs(kUsage, stderr);
        return 1;
    }
    const std::string cmd = argv[1];
    if (cmd == "--help" || cmd == "-h" || cmd == "help") {
        std::fputs(kUsage, stdout);
        return 0;
    }

    std::string config_path;
    std::vector<std::pair<std::string, std::string>> flags;
    for (int i = 2; i < argc; ++i) {
        std::string arg = argv[i];
        if (arg.rfind("--", 0) != 0) {
            std::fprintf(stderr, "unexpected argument: %s\n%s", arg.c_str(), kUsage);
            return 1;
        }
        arg = arg.substr(2);
        std::string key, value;
        const size_t eq = arg.find('=');
        if (eq != std::string::npos) {
            key = arg.substr(0, eq);
            value = arg.substr(eq + 1);
        } else if (i + 1 < argc && std::string(argv[i + 1]).rfind("--", 0) != 0) {
            key = arg;
            value = argv[++i];
        } else {
            std::fprintf(stderr, "flag --%s needs a value\n%s", arg.c_str(), kUsage);
            return 1;
        }
        if (key == "config") {
            config_path = value;
        } else {
            flags.emplace_back(key, value);
        }
    }

    vitprune::RunConfig cfg;
    try {
        cfg = vitprune::load_run_config(config_path, flags);
    } catch (const vitprune::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    }

    try {
        write_resolved_config(cfg);
        if (cmd == "pretrain") return cmd_pretrain(cfg);
        if (cmd == "train") return cmd_train(cfg);
        if (cmd == "eval") return cmd_eval(cfg);
        if (cmd == "sweep") return cmd_sweep(cfg);
        if (cmd == "bench") return cmd_bench(cfg);
        if (cmd == "visualize") return cmd_visualize(cfg);
        std::fprintf(stderr, "unknown subcommand: %s\n%s", cmd.c_str(), kUsage);
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}
