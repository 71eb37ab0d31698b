#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "vitprune/adam.hpp"
#include "vitprune/checkpoint.hpp"
#include "vitprune/data.hpp"
#include "vitprune/game.hpp"
#include "vitprune/pruning.hpp"
#include "vitprune/tape.hpp"
#include "vitprune/vit.hpp"

namespace vitprune {

struct TrainConfig {
    RewardConfig reward;
    double eps_theta = 0.2;
    double eps_phi = 0.2;
    int k_iters = 15;  // RL iterations per mini-batch
    double actor_lr = 5e-5;
    double critic_lr = 5e-5;
    double vit_lr = 1e-4;
    double gamma_d = 0.99;
    double lambda = 0.95;
    double entropy_coef = 0.01;
    int epochs = 4;
    int batch_size = 64;
    uint64_t seed = 1;
    bool finetune_enabled = true;
    PolicyMode policy_mode = PolicyMode::mappo;
    double keep_prob = 0.5;  // random-policy keep probability
    double grad_clip_norm = 10.0;
    int pretrain_epochs = 10;
    double pretrain_lr = 1e-3;
    int checkpoint_every = 0;  // epochs between checkpoints; 0 = final only
    bool wall_clock = true;    // false writes wall_seconds as 0 for reproducible metrics
    int train_subset = 0;      // 0 = all images

    void validate() const {
        if (!(eps_theta > 0 && eps_theta < 1) || !(eps_phi > 0 && eps_phi < 1)) {
            throw std::invalid_argument("train config: eps must lie in (0, 1)");
        }
        if (k_iters < 1 || batch_size < 1 || epochs < 0) {
            throw std::invalid_argument("train config: K and batch_size must be >= 1");
        }
        if (!(reward.alpha >= 0) || !(reward.beta >= 0) || reward.alpha + reward.beta <= 0) {
            throw std::invalid_argument("train config: alpha + beta must be positive");
        }
        if (keep_prob < 0 || keep_prob > 1) {
            throw std::invalid_argument("train config: keep_prob outside [0, 1]");
        }
    }
};

// Flattened agent steps of one mini-batch with collection-time snapshots.
template <typename S>
struct UpdateBatch {
    Mat<S> states;         // [M, D] actor inputs
    Mat<S> critic_in;      // [M, 2D] (local || global)
    std::vector<int> actions;
    Mat<S> old_log_probs;  // [M, 1]
    Mat<S> old_values;     // [M, 1]
    Mat<S> advantages;     // [M, 1], normalized at build time
    Mat<S> returns;        // [M, 1]

    Index size() const { return states.rows(); }
};

template <typename S>
UpdateBatch<S> build_update_batch(const std::vector<Trajectory<S>>& trajs,
                                  bool normalize = true) {
    Index m = 0;
    Index d = 0;
    for (const auto& tr : trajs) {
        for (const auto& layer : tr.layers) {
            m += static_cast<Index>(layer.steps.size());
            if (layer.states.rows() > 0) {
                d = layer.states.cols();
            }
        }
    }
    UpdateBatch<S> b;
    if (m == 0 || d == 0) {
        b.states = Mat<S>(0, std::max<Index>(d, 1));
        return b;
    }
    b.states.resize(m, d);
    b.critic_in.resize(m, 2 * d);
    b.actions.resize(static_cast<size_t>(m));
    b.old_log_probs.resize(m, 1);
    b.old_values.resize(m, 1);
    b.advantages.resize(m, 1);
    b.returns.resize(m, 1);

    Index row = 0;
    for (const auto& tr : trajs) {
        for (const auto& layer : tr.layers) {
            if (layer.steps.empty()) {
                continue;
            }
            if (layer.states.rows() != static_cast<Index>(layer.steps.size())) {
                throw std::logic_error("update batch: trajectory collected without states");
            }
            for (size_t i = 0; i < layer.steps.size(); ++i) {
                const AgentStep<S>& s = layer.steps[i];
                b.states.row(row) = layer.states.row(static_cast<Index>(i));
                b.critic_in.row(row).head(d) = layer.states.row(static_cast<Index>(i));
                b.critic_in.row(row).tail(d) = layer.global.row(0);
                b.actions[static_cast<size_t>(row)] = s.action;
                b.old_log_probs(row, 0) = s.log_prob;
                b.old_values(row, 0) = s.value;
                b.advantages(row, 0) = s.advantage;
                b.returns(row, 0) = s.return_to_go;
                ++row;
            }
        }
    }
    if (normalize) {
        std::vector<S> adv(b.advantages.data(), b.advantages.data() + b.advantages.size());
        normalize_advantages(adv);
        for (Index i = 0; i < b.advantages.rows(); ++i) {
            b.advantages(i, 0) = adv[static_cast<size_t>(i)];
        }
    }
    return b;
}

template <typename S>
struct PolicyObjectiveParts {
    Var<S> objective;  // mean clipped surrogate, to be ascended
    Var<S> entropy;    // mean policy entropy
};

// Clipped policy surrogate: per agent, min(r * A, clip(r, 1 +- eps) * A),
// averaged over all agents in the batch. r is the new/old likelihood ratio
// of the stored action.
template <typename S>
PolicyObjectiveParts<S> policy_objective(Tape<S>& t, ActorNet<S>& actor,
                                         const UpdateBatch<S>& batch, double eps_theta) {
    Var<S> logits = actor.logits(t, t.leaf(batch.states));
    Var<S> logp = log_softmax_rows(logits);
    Var<S> chosen = take_per_row(logp, batch.actions);
    Var<S> ratio = vexp(sub(chosen, t.leaf(batch.old_log_probs)));
    if (!ratio.value().allFinite()) {
        throw std::runtime_error("policy ratio overflow");
    }
    Var<S> adv = t.leaf(batch.advantages);
    Var<S> surr = minimum(cmul(ratio, adv),
                          cmul(clip(ratio, static_cast<S>(1 - eps_theta),
                                    static_cast<S>(1 + eps_theta)),
                               adv));
    Var<S> probs = vexp(logp);
    Var<S> neg_ent_rows = row_sum(cmul(probs, logp));
    return {mean_all(surr), scale(mean_all(neg_ent_rows), S(-1))};
}

// Clipped value loss: per agent, max of the unclipped squared error and the
// squared error of the new value clamped into [V_old - eps, V_old + eps].
template <typename S>
Var<S> value_loss(Tape<S>& t, CriticNet<S>& critic, const UpdateBatch<S>& batch,
                  double eps_phi) {
    Var<S> v_new = critic.values(t, t.leaf(batch.critic_in));
    Var<S> ret = t.leaf(batch.returns);
    Var<S> d0 = sub(v_new, ret);
    Var<S> unclipped = cmul(d0, d0);
    Mat<S> lo = batch.old_values.array() - static_cast<S>(eps_phi);
    Mat<S> hi = batch.old_values.array() + static_cast<S>(eps_phi);
    Var<S> v_clipped = minimum(maximum(v_new, t.leaf(lo)), t.leaf(hi));
    Var<S> d1 = sub(v_clipped, ret);
    Var<S> clipped = cmul(d1, d1);
    return mean_all(maximum(unclipped, clipped));
}

struct RlUpdateStats {
    double policy_objective = 0;  // mean over the K iterations
    double value_loss = 0;
    double entropy = 0;
    int iterations = 0;
};

// K optimization iterations on one mini-batch of trajectories. Old log-probs
// and values stay fixed at their collection-time snapshot; ViT parameters
// are never touched. A no-op for the random policy.
template <typename S>
RlUpdateStats rl_update(const std::vector<Trajectory<S>>& trajs, ActorNet<S>& actor,
                        CriticNet<S>& critic, AdamOptimizer<S>& actor_opt,
                        AdamOptimizer<S>& critic_opt, const TrainConfig& cfg) {
    RlUpdateStats stats;
    if (cfg.policy_mode == PolicyMode::random) {
        return stats;
    }
    UpdateBatch<S> batch = build_update_batch(trajs, true);
    if (batch.size() == 0) {
        return stats;
    }
    for (int k = 0; k < cfg.k_iters; ++k) {
        {
            Tape<S> t(true);
            PolicyObjectiveParts<S> parts = policy_objective(t, actor, batch, cfg.eps_theta);
            Var<S> loss = scale(
                add(parts.objective, scale(parts.entropy, static_cast<S>(cfg.entropy_coef))),
                S(-1));
            actor_opt.zero_grad();
            t.backward(loss);
            actor_opt.clip_global_norm(cfg.grad_clip_norm);
            actor_opt.step();
            stats.policy_objective += static_cast<double>(parts.objective.value()(0, 0));
            stats.entropy += static_cast<double>(parts.entropy.value()(0, 0));
        }
        {
            Tape<S> t(true);
            Var<S> loss = value_loss(t, critic, batch, cfg.eps_phi);
            critic_opt.zero_grad();
            t.backward(loss);
            critic_opt.clip_global_norm(cfg.grad_clip_norm);
            critic_opt.step();
            stats.value_loss += static_cast<double>(loss.value()(0, 0));
        }
        ++stats.iterations;
    }
    stats.policy_objective /= stats.iterations;
    stats.value_loss /= stats.iterations;
    stats.entropy /= stats.iterations;
    return stats;
}

// One supervised step on all ViT parameters through the token-pruned forward
// pass. Pruning masks come from deterministic (argmax) policy decisions on
// detached features, so no gradient reaches the actor or critic.
template <typename S>
S finetune_step(const Mat<S>& images, const std::vector<int>& labels, ViTModel<S>& model,
                ActorNet<S>* actor, CriticNet<S>* critic, const TrainConfig& cfg,
                AdamOptimizer<S>& vit_opt, uint64_t mask_stream = 0) {
    if (images.rows() != static_cast<Index>(labels.size())) {
        throw std::invalid_argument("finetune_step: image/label count mismatch");
    }
    Tape<S> t(true);
    std::vector<Var<S>> rows;
    rows.reserve(static_cast<size_t>(images.rows()));
    for (Index i = 0; i < images.rows(); ++i) {
        PolicyDecider<S> decider(actor, critic, cfg.policy_mode, cfg.keep_prob,
                                 /*train_mode=*/false, /*want_values=*/false,
                                 make_rng(cfg.seed, "finetune-mask", mask_stream,
                                          static_cast<uint64_t>(i)));
        Mat<S> image = images.row(i);
        ForwardResult<S> res =
            vit_forward_image(t, model, image, actor != nullptr ? &decider : nullptr);
        rows.push_back(res.logits);
    }
    Var<S> logits = concat_rows(rows);
    Var<S> loss = cross_entropy_with_logits(logits, labels);
    vit_opt.zero_grad();
    t.backward(loss);
    vit_opt.clip_global_norm(cfg.grad_clip_norm);
    vit_opt.step();
    return loss.value()(0, 0);
}

struct EpochMetrics {
    int epoch = 0;
    std::string phase;  // rl | finetune | pretrain
    double top1 = 0;
    std::vector<double> retention;  // mean kept fraction per pruning layer
    double l_theta = 0;
    double l_phi = 0;
    double mean_reward = 0;
    double wall_seconds = 0;
};

inline void write_metrics_csv(const std::vector<EpochMetrics>& rows, size_t n_prune_layers,
                              const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot write " + path);
    }
    out << "epoch,phase,top1";
    for (size_t i = 1; i <= n_prune_layers; ++i) {
        out << ",mean_retention_l" << i;
    }
    out << ",L_theta,L_phi,mean_reward,wall_seconds\n";
    char buf[64];
    auto num = [&buf](double v) {
        std::snprintf(buf, sizeof(buf), "%.6f", v);
        return std::string(buf);
    };
    for (const auto& r : rows) {
        out << r.epoch << ',' << r.phase << ',' << num(r.top1);
        for (size_t i = 0; i < n_prune_layers; ++i) {
            out << ',' << num(i < r.retention.size() ? r.retention[i] : 0.0);
        }
        out << ',' << num(r.l_theta) << ',' << num(r.l_phi) << ',' << num(r.mean_reward) << ','
            << num(r.wall_seconds) << "\n";
    }
}

template <typename S>
void save_all_checkpoint(ViTModel<S>& model, ActorNet<S>& actor, CriticNet<S>& critic,
                         const std::string& stem) {
    NamedParams<S> all = model.named_params();
    for (auto& e : actor.named_params()) {
        all.push_back(e);
    }
    for (auto& e : critic.named_params()) {
        all.push_back(e);
    }
    save_checkpoint(stem + ".json", stem + ".bin", all);
}

template <typename S>
void load_all_checkpoint(ViTModel<S>& model, ActorNet<S>* actor, CriticNet<S>* critic,
                         const std::string& stem) {
    NamedParams<S> all = model.named_params();
    if (actor != nullptr) {
        for (auto& e : actor->named_params()) {
            all.push_back(e);
        }
    }
    if (critic != nullptr) {
        for (auto& e : critic->named_params()) {
            all.push_back(e);
        }
    }
    load_checkpoint(stem + ".json", stem + ".bin", all);
}

// Supervised pretraining of the plain (unpruned) ViT.
template <typename S>
std::vector<EpochMetrics> pretrain(const Dataset<S>& data, ViTModel<S>& model,
                                   const TrainConfig& cfg, const std::string& out_dir = "") {
    cfg.validate();
    NamedParams<S> vit_named = model.named_params();
    std::vector<Param<S>*> vit_params;
    for (auto& [name, p] : vit_named) {
        vit_params.push_back(p);
    }
    AdamOptimizer<S> opt(vit_params, static_cast<S>(cfg.pretrain_lr));
    std::vector<EpochMetrics> metrics;
    const Index m = cfg.train_subset > 0 ? std::min<Index>(cfg.train_subset, data.size())
                                         : data.size();
    for (int e = 1; e <= cfg.pretrain_epochs; ++e) {
        const auto t0 = std::chrono::steady_clock::now();
        long correct = 0;
        double loss_sum = 0;
        long batches_n = 0;
        for (const auto& batch : minibatches(m, cfg.batch_size, cfg.seed, e)) {
            Mat<S> images(static_cast<Index>(batch.size()), data.images.cols());
            std::vector<int> labels(batch.size());
            for (size_t i = 0; i < batch.size(); ++i) {
                images.row(static_cast<Index>(i)) = data.images.row(batch[i]);
                labels[i] = data.labels[static_cast<size_t>(batch[i])];
            }
            // track top-1 on the pre-update forward
            {
                Tape<S> t(false);
                for (Index i = 0; i < images.rows(); ++i) {
                    Mat<S> image = images.row(i);
                    ForwardResult<S> r = vit_forward_image<S>(t, model, image, nullptr);
                    correct += compute_gamma(r.logits.value(), labels[static_cast<size_t>(i)]);
                    t.clear();
                }
            }
            loss_sum += static_cast<double>(finetune_step<S>(images, labels, model, nullptr,
                                                             nullptr, cfg, opt,
                                                             static_cast<uint64_t>(e)));
            ++batches_n;
        }
        EpochMetrics em;
        em.epoch = e;
        em.phase = "pretrain";
        em.top1 = static_cast<double>(correct) / static_cast<double>(m);
        em.l_phi = batches_n > 0 ? loss_sum / batches_n : 0.0;
        em.wall_seconds =
            cfg.wall_clock
                ? std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()
                : 0.0;
        metrics.push_back(em);
    }
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        write_metrics_csv(metrics, model.cfg.prune_after.size(), out_dir + "/metrics.csv");
    }
    return metrics;
}

// The alternating training loop: every epoch runs the trajectory-collecting
// forward pass and reward computation per mini-batch, then odd epochs update
// the RL components and even epochs fine-tune the ViT (every epoch updates
// RL when fine-tuning is disabled).
template <typename S>
std::vector<EpochMetrics> train_loop(const Dataset<S>& data, ViTModel<S>& model,
                                     ActorNet<S>& actor, CriticNet<S>& critic,
                                     const TrainConfig& cfg, const std::string& out_dir = "") {
    cfg.validate();
    model.cfg.validate();
    data.validate();

    NamedParams<S> vit_named = model.named_params();
    std::vector<Param<S>*> vit_params;
    for (auto& [name, p] : vit_named) {
        vit_params.push_back(p);
    }
    std::vector<Param<S>*> actor_params, critic_params;
    for (auto& [name, p] : actor.named_params()) {
        actor_params.push_back(p);
    }
    for (auto& [name, p] : critic.named_params()) {
        critic_params.push_back(p);
    }
    AdamOptimizer<S> actor_opt(actor_params, static_cast<S>(cfg.actor_lr));
    AdamOptimizer<S> critic_opt(critic_params, static_cast<S>(cfg.critic_lr));
    AdamOptimizer<S> vit_opt(vit_params, static_cast<S>(cfg.vit_lr));

    const size_t n_layers = model.cfg.prune_after.size();
    const double n_patches = static_cast<double>(model.cfg.num_patches());
    const Index m = cfg.train_subset > 0 ? std::min<Index>(cfg.train_subset, data.size())
                                         : data.size();
    std::vector<EpochMetrics> metrics;
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
    }

    for (int e = 1; e <= cfg.epochs; ++e) {
        const auto t0 = std::chrono::steady_clock::now();
        const bool rl_phase = (e % 2 == 1) || !cfg.finetune_enabled;
        long correct = 0;
        std::vector<double> retention_sum(n_layers, 0.0);
        double reward_sum = 0;
        long reward_count = 0;
        double ltheta_sum = 0, lphi_sum = 0;
        long update_count = 0;

        for (const auto& batch : minibatches(m, cfg.batch_size, cfg.seed, e)) {
            // Step 1: forward pass, trajectories in image-index order
            std::vector<Trajectory<S>> trajs;
            trajs.reserve(batch.size());
            Mat<S> images(static_cast<Index>(batch.size()), data.images.cols());
            std::vector<int> labels(batch.size());
            for (size_t i = 0; i < batch.size(); ++i) {
                const int idx = batch[i];
                images.row(static_cast<Index>(i)) = data.images.row(idx);
                labels[i] = data.labels[static_cast<size_t>(idx)];
                PolicyDecider<S> decider(&actor, &critic, cfg.policy_mode, cfg.keep_prob,
                                         /*train_mode=*/true, /*want_values=*/true,
                                         make_rng(cfg.seed, "actions", static_cast<uint64_t>(e),
                                                  static_cast<uint64_t>(idx)));
                Tape<S> t(false);
                ForwardOptions<S> opts;
                opts.collect_trajectory = true;
                Mat<S> image = data.images.row(idx);
                ForwardResult<S> res = vit_forward_image(t, model, image, &decider, opts);
                Trajectory<S> traj = std::move(res.trajectory);
                traj.label = labels[i];
                traj.image_index = idx;
                traj.gamma_correct = compute_gamma(res.logits.value(), labels[i]);
                compute_rewards(traj, cfg.reward);
                gae(traj, cfg.gamma_d, cfg.lambda);

                correct += traj.gamma_correct;
                for (size_t l = 0; l < traj.layers.size() && l < n_layers; ++l) {
                    retention_sum[l] += traj.layers[l].n_kept / n_patches;
                }
                for (const auto& layer : traj.layers) {
                    for (const auto& s : layer.steps) {
                        reward_sum += static_cast<double>(s.reward);
                        ++reward_count;
                    }
                }
                trajs.push_back(std::move(traj));
            }

            // Step 2: parity-selected backward pass
            if (rl_phase) {
                RlUpdateStats st = rl_update(trajs, actor, critic, actor_opt, critic_opt, cfg);
                if (st.iterations > 0) {
                    ltheta_sum += st.policy_objective;
                    lphi_sum += st.value_loss;
                    ++update_count;
                }
            } else {
                finetune_step<S>(images, labels, model, &actor, &critic, cfg, vit_opt,
                                 static_cast<uint64_t>(e));
            }
        }

        EpochMetrics em;
        em.epoch = e;
        em.phase = rl_phase ? "rl" : "finetune";
        em.top1 = static_cast<double>(correct) / static_cast<double>(m);
        em.retention.resize(n_layers, 0.0);
        for (size_t l = 0; l < n_layers; ++l) {
            em.retention[l] = retention_sum[l] / static_cast<double>(m);
        }
        em.l_theta = update_count > 0 ? ltheta_sum / update_count : 0.0;
        em.l_phi = update_count > 0 ? lphi_sum / update_count : 0.0;
        em.mean_reward = reward_count > 0 ? reward_sum / reward_count : 0.0;
        em.wall_seconds =
            cfg.wall_clock
                ? std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()
                : 0.0;
        metrics.push_back(em);

        if (!out_dir.empty() && cfg.checkpoint_every > 0 && e % cfg.checkpoint_every == 0) {
            save_all_checkpoint(model, actor, critic,
                                out_dir + "/checkpoint_epoch" + std::to_string(e));
        }
    }

    if (!out_dir.empty()) {
        write_metrics_csv(metrics, n_layers, out_dir + "/metrics.csv");
        save_all_checkpoint(model, actor, critic, out_dir + "/checkpoint");
    }
    return metrics;
}

}  // namespace vitprune
