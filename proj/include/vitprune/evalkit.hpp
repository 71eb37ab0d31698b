#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "vitprune/data.hpp"
#include "vitprune/matrix.hpp"
#include "vitprune/pruning.hpp"
#include "vitprune/rl_train.hpp"
#include "vitprune/vit.hpp"

namespace vitprune {

// -- analytic FLOPs accounting (1 multiply-accumulate = 1 FLOP) -- //

// Per block with n tokens: QKV+output projections 4nD^2, attention matrices
// 2n^2 D, FFN 2*ffn_mult*nD^2. Patch embedding and classifier head are added
// on top. `per_block_tokens[b]` is the token count (class token included)
// processed by block b.
inline double flops_estimate(const ViTConfig& cfg, const std::vector<double>& per_block_tokens) {
    if (per_block_tokens.size() != static_cast<size_t>(cfg.depth)) {
        throw std::invalid_argument("flops_estimate: one token count per block expected");
    }
    const double d = cfg.embed_dim;
    double total = 0;
    for (double n : per_block_tokens) {
        total += 4.0 * n * d * d;                  // q, k, v, o projections
        total += 2.0 * n * n * d;                  // scores and weighted values
        total += 2.0 * cfg.ffn_mult * n * d * d;   // FFN in + out
    }
    total += static_cast<double>(cfg.num_patches()) * cfg.channels * cfg.patch_size *
             cfg.patch_size * d;                   // patch projection
    total += d * static_cast<double>(cfg.num_classes);  // head
    return total / 1e9;
}

// Token counts per block implied by the kept counts after each pruning
// layer; counts stay constant between pruning layers.
inline std::vector<double> per_block_token_counts(const ViTConfig& cfg,
                                                  const std::vector<int>& n_kept_per_layer) {
    if (n_kept_per_layer.size() != cfg.prune_after.size()) {
        throw std::invalid_argument("per_block_token_counts: one count per pruning layer");
    }
    std::vector<double> counts(static_cast<size_t>(cfg.depth),
                               static_cast<double>(cfg.num_tokens()));
    for (size_t l = 0; l < cfg.prune_after.size(); ++l) {
        const double after = 1.0 + n_kept_per_layer[l];  // class token + kept patch tokens
        for (int b = cfg.prune_after[l] + 1; b <= cfg.depth; ++b) {
            counts[static_cast<size_t>(b - 1)] = after;
        }
    }
    return counts;
}

struct EvalReport {
    double top1 = 0;
    std::vector<double> retention;  // per pruning layer, non-increasing
    double gflops = 0;              // dataset mean of per-image estimates
    double images_per_second = 0;   // filled by the throughput benchmark only
    std::string policy_mode;
    double alpha_over_beta = 0;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["top1"] = top1;
        j["retention"] = retention;
        j["gflops"] = gflops;
        j["images_per_second"] = images_per_second;
        j["policy_mode"] = policy_mode;
        j["alpha_over_beta"] = alpha_over_beta;
        return j;
    }
};

// Deterministic argmax-policy pass over a dataset. The random baseline draws
// its keeps from per-image substreams of `seed`, so repeated calls agree.
template <typename S>
EvalReport evaluate(ViTModel<S>& model, ActorNet<S>* actor, CriticNet<S>* critic,
                    const Dataset<S>& data, PolicyMode policy_mode, double keep_prob,
                    uint64_t seed, bool compact = false) {
    if (data.size() == 0) {
        throw std::invalid_argument("evaluate: empty dataset");
    }
    const size_t n_layers = model.cfg.prune_after.size();
    const double n_patches = static_cast<double>(model.cfg.num_patches());
    EvalReport rep;
    rep.policy_mode = to_string(policy_mode);
    rep.retention.assign(n_layers, 0.0);
    long correct = 0;
    double gflops_sum = 0;
    for (Index i = 0; i < data.size(); ++i) {
        PolicyDecider<S> decider(actor, critic, policy_mode, keep_prob,
                                 /*train_mode=*/false, /*want_values=*/false,
                                 make_rng(seed, "eval-actions", static_cast<uint64_t>(i)));
        Tape<S> t(false);
        ForwardOptions<S> opts;
        opts.compact = compact;
        Mat<S> image = data.images.row(i);
        ForwardResult<S> res = vit_forward_image(t, model, image, &decider, opts);
        correct += compute_gamma(res.logits.value(), data.labels[static_cast<size_t>(i)]);
        std::vector<int> kept;
        kept.reserve(n_layers);
        for (const auto& layer : res.trajectory.layers) {
            kept.push_back(layer.n_kept);
        }
        for (size_t l = 0; l < kept.size() && l < n_layers; ++l) {
            rep.retention[l] += kept[l] / n_patches;
        }
        if (kept.size() == n_layers) {
            gflops_sum += flops_estimate(model.cfg, per_block_token_counts(model.cfg, kept));
        }
    }
    rep.top1 = static_cast<double>(correct) / static_cast<double>(data.size());
    for (double& r : rep.retention) {
        r /= static_cast<double>(data.size());
    }
    rep.gflops = gflops_sum / static_cast<double>(data.size());
    return rep;
}

// -- wall-clock throughput -- //

struct BenchRow {
    std::string label;
    double retention = 1.0;         // keep fraction applied at the first pruning layer
    double images_per_second = 0;   // median over trials
    double speedup = 1.0;           // vs the no-pruning row
    double gflops = 0;              // analytic estimate for this mask
};

// Median images/s for (a) no pruning and (b) compacted execution at each
// retention target, batch size 1, single-threaded, masks drawn once per
// target and reused across trials. Speed does not depend on the weights, so
// random weights are used throughout.
template <typename S = float>
std::vector<BenchRow> benchmark_throughput(const ViTConfig& cfg,
                                           const std::vector<double>& retention_targets,
                                           int trials, int warmup, uint64_t seed) {
    cfg.validate();
    if (cfg.prune_after.empty()) {
        throw std::invalid_argument("benchmark_throughput: config has no pruning layers");
    }
    if (trials < 1) {
        throw std::invalid_argument("benchmark_throughput: trials must be >= 1");
    }
    ViTModel<S> model = ViTModel<S>::random_init(cfg, seed);
    auto rng = make_rng(seed, "bench-image");
    Mat<S> image = rand_uniform<S>(rng, 1, cfg.channels * cfg.image_size * cfg.image_size);

    auto time_forward = [&](PruneDecider<S>* decider, bool compact,
                            FixedActionsDecider<S>* resettable) {
        std::vector<double> secs;
        secs.reserve(static_cast<size_t>(trials));
        for (int it = 0; it < warmup + trials; ++it) {
            if (resettable != nullptr) {
                resettable->reset();
            }
            Tape<S> t(false);
            ForwardOptions<S> opts;
            opts.compact = compact;
            const auto t0 = std::chrono::steady_clock::now();
            ForwardResult<S> res = vit_forward_image(t, model, image, decider, opts);
            const double dt =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            volatile S sink = res.logits.value()(0, 0);
            (void)sink;
            if (it >= warmup) {
                secs.push_back(dt);
            }
        }
        std::sort(secs.begin(), secs.end());
        const double median = secs[secs.size() / 2];
        return 1.0 / median;
    };

    std::vector<BenchRow> rows;
    BenchRow full;
    full.label = "no_pruning";
    full.retention = 1.0;
    full.images_per_second = time_forward(nullptr, false, nullptr);
    full.gflops = flops_estimate(
        cfg, std::vector<double>(static_cast<size_t>(cfg.depth),
                                 static_cast<double>(cfg.num_tokens())));
    rows.push_back(full);

    const int n = cfg.num_patches();
    for (double r : retention_targets) {
        if (r < 0 || r > 1) {
            throw std::invalid_argument("benchmark_throughput: retention outside [0, 1]");
        }
        const int keep = std::min<int>(n, static_cast<int>(std::ceil(r * n)));
        // one mask per target: drop to the target at the first pruning layer,
        // keep everything after
        auto mask_rng = make_rng(seed, "bench-mask", static_cast<uint64_t>(r * 1e6));
        std::vector<int> first(static_cast<size_t>(n), kActionPrune);
        std::vector<int> order(static_cast<size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), mask_rng);
        for (int i = 0; i < keep; ++i) {
            first[static_cast<size_t>(order[static_cast<size_t>(i)])] = kActionPreserve;
        }
        std::vector<std::vector<int>> actions{first};
        for (size_t l = 1; l < cfg.prune_after.size(); ++l) {
            actions.emplace_back(static_cast<size_t>(keep), kActionPreserve);
        }
        FixedActionsDecider<S> decider(actions);

        BenchRow row;
        row.label = "compacted";
        row.retention = r;
        row.images_per_second = time_forward(&decider, true, &decider);
        row.speedup = row.images_per_second / full.images_per_second;
        std::vector<int> kept(cfg.prune_after.size(), keep);
        row.gflops = flops_estimate(cfg, per_block_token_counts(cfg, kept));
        rows.push_back(row);
    }
    return rows;
}

// -- alpha/beta sweep -- //

struct SweepRow {
    double ratio = 0;
    std::vector<double> retention;
    double gflops = 0;
    double top1 = 0;
};

inline void write_sweep_csv(const std::vector<SweepRow>& rows, size_t n_layers,
                            const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot write " + path);
    }
    out << "ratio";
    for (size_t i = 1; i <= n_layers; ++i) {
        out << ",retention_l" << i;
    }
    out << ",gflops,top1\n";
    char buf[64];
    auto num = [&buf](double v) {
        std::snprintf(buf, sizeof(buf), "%.6f", v);
        return std::string(buf);
    };
    for (const auto& r : rows) {
        out << num(r.ratio);
        for (size_t i = 0; i < n_layers; ++i) {
            out << ',' << num(i < r.retention.size() ? r.retention[i] : 0.0);
        }
        out << ',' << num(r.gflops) << ',' << num(r.top1) << "\n";
    }
}

// Trains the RL policy once per alpha/beta ratio under an identical budget
// (fresh actor/critic, same seed, ViT frozen) and reports the resulting
// retention/GFLOPs/accuracy so the retention-vs-ratio curve can be observed
// empirically.
template <typename S>
std::vector<SweepRow> sweep_alpha_beta(const Dataset<S>& train_data, const Dataset<S>& test_data,
                                       ViTModel<S>& model, TrainConfig cfg,
                                       const std::vector<double>& ratios) {
    cfg.finetune_enabled = false;  // RL-only budget; the ViT stays fixed
    std::vector<SweepRow> rows;
    for (double ratio : ratios) {
        cfg.reward.alpha = ratio * cfg.reward.beta;
        ActorNet<S> actor = ActorNet<S>::make(model.cfg.embed_dim, cfg.seed);
        CriticNet<S> critic = CriticNet<S>::make(model.cfg.embed_dim, cfg.seed + 1);
        train_loop(train_data, model, actor, critic, cfg, "");
        EvalReport rep = evaluate(model, &actor, &critic, test_data, cfg.policy_mode,
                                  cfg.keep_prob, cfg.seed);
        SweepRow row;
        row.ratio = ratio;
        row.retention = rep.retention;
        row.gflops = rep.gflops;
        row.top1 = rep.top1;
        rows.push_back(row);
    }
    return rows;
}

// -- mask visualization -- //

// Writes one binary PGM (P5, maxval 255) per pruning layer: a grayscale copy
// of the input with every pruned patch block set to white.
template <typename S>
std::vector<std::string> visualize_masks(const Mat<S>& image_row, const ViTConfig& cfg,
                                         const std::vector<MaskVec>& masks_after,
                                         const std::string& out_stem) {
    const int hw = cfg.image_size * cfg.image_size;
    if (image_row.rows() != 1 || image_row.cols() != cfg.channels * hw) {
        throw std::invalid_argument("visualize_masks: image size mismatch");
    }
    // grayscale copy (channel mean), scaled to bytes
    std::vector<unsigned char> gray(static_cast<size_t>(hw));
    for (int i = 0; i < hw; ++i) {
        double acc = 0;
        for (int c = 0; c < cfg.channels; ++c) {
            acc += static_cast<double>(image_row(0, c * hw + i));
        }
        const double v = std::min(1.0, std::max(0.0, acc / cfg.channels));
        gray[static_cast<size_t>(i)] = static_cast<unsigned char>(std::lround(v * 255.0));
    }

    std::vector<std::string> written;
    const int p = cfg.patch_size;
    const int side = cfg.patches_per_side();
    for (size_t l = 0; l < masks_after.size(); ++l) {
        std::vector<unsigned char> img = gray;
        const MaskVec& keep = masks_after[l];
        for (int token = 1; token <= cfg.num_patches(); ++token) {
            if (keep(token)) {
                continue;
            }
            const int patch = token - 1;
            const int py = patch / side, px = patch % side;
            for (int dy = 0; dy < p; ++dy) {
                for (int dx = 0; dx < p; ++dx) {
                    img[static_cast<size_t>((py * p + dy) * cfg.image_size + px * p + dx)] = 255;
                }
            }
        }
        const std::string path = out_stem + "_l" + std::to_string(l + 1) + ".pgm";
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw std::runtime_error("cannot write " + path);
        }
        out << "P5\n" << cfg.image_size << " " << cfg.image_size << "\n255\n";
        out.write(reinterpret_cast<const char*>(img.data()),
                  static_cast<std::streamsize>(img.size()));
        written.push_back(path);
    }
    return written;
}

}  // namespace vitprune
