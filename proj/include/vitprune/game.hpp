#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "vitprune/matrix.hpp"
#include "vitprune/ops.hpp"

namespace vitprune {

enum class R2Scope { all_agents, preserved_only };

struct RewardConfig {
    double alpha = 1.0;
    double beta = 8.0;
    R2Scope r2_scope = R2Scope::all_agents;
};

constexpr int kActionPrune = 0;
constexpr int kActionPreserve = 1;

// One agent's record at one pruning layer. The agent's state feature is the
// matching row of its layer's `states` matrix.
template <typename S>
struct AgentStep {
    int layer_index = 0;  // 1-based block index of the pruning layer
    int token_index = 0;  // index into the original token array (class = 0, never an agent)
    int action = kActionPreserve;
    S log_prob = S(0);
    S value = S(0);
    S reward = S(0);
    bool done = false;
    S advantage = S(0);
    S return_to_go = S(0);
};

template <typename S>
struct LayerRecord {
    int layer_index = 0;
    Mat<S> states;  // [n_agents, D], row i = steps[i]'s token feature at S^l
    Mat<S> global;  // [1, D] class-token feature at S^l
    std::vector<AgentStep<S>> steps;
    int n_kept = 0;  // non-class tokens still kept after pruning at this layer
};

// Per-image Markov Game record across all pruning layers.
template <typename S>
struct Trajectory {
    std::vector<LayerRecord<S>> layers;
    int gamma_correct = 0;  // 1 iff the image was classified correctly
    int label = -1;
    int image_index = -1;

    size_t agent_count() const {
        size_t n = 0;
        for (const auto& l : layers) {
            n += l.steps.size();
        }
        return n;
    }
};

// Classification correctness indicator; argmax ties break to the lowest
// class index.
template <typename S>
int compute_gamma(const Mat<S>& logits, int label) {
    if (logits.rows() != 1) {
        throw std::invalid_argument("compute_gamma: expected a [1, num_classes] row");
    }
    return argmax_row(logits, 0) == label ? 1 : 0;
}

// Fills rewards from (actions, n_kept, gamma). The per-token cost r1 is 0 for
// prune and -1 for preserve; the amortized accuracy term r2 is gamma / n_kept
// (0 when the layer kept nothing), credited per the configured scope.
template <typename S>
void compute_rewards(Trajectory<S>& traj, const RewardConfig& rc) {
    for (auto& layer : traj.layers) {
        const double r2_base =
            layer.n_kept > 0 ? static_cast<double>(traj.gamma_correct) / layer.n_kept : 0.0;
        for (auto& step : layer.steps) {
            const double r1 = step.action == kActionPrune ? 0.0 : -1.0;
            const bool credited =
                rc.r2_scope == R2Scope::all_agents || step.action == kActionPreserve;
            const double r2 = credited ? r2_base : 0.0;
            step.reward = static_cast<S>(rc.alpha * r1 + rc.beta * r2);
        }
    }
}

// GAE over one agent episode. dones[t] marks the final step of the episode;
// the bootstrap value past a done step is 0.
template <typename S>
void gae_episode(const std::vector<S>& rewards, const std::vector<S>& values,
                 const std::vector<bool>& dones, double gamma_d, double lambda,
                 std::vector<S>& advantages, std::vector<S>& returns) {
    const size_t n = rewards.size();
    advantages.assign(n, S(0));
    returns.assign(n, S(0));
    double next_adv = 0.0;
    double next_value = 0.0;
    for (size_t t = n; t-- > 0;) {
        const double nonterminal = dones[t] ? 0.0 : 1.0;
        const double delta = static_cast<double>(rewards[t]) +
                             gamma_d * next_value * nonterminal - static_cast<double>(values[t]);
        const double adv = delta + gamma_d * lambda * nonterminal * next_adv;
        advantages[t] = static_cast<S>(adv);
        returns[t] = static_cast<S>(adv + static_cast<double>(values[t]));
        next_adv = adv;
        next_value = static_cast<double>(values[t]);
    }
}

// Computes advantages and returns for every agent chain in the trajectory.
// An agent's episode is its sequence of steps across consecutive pruning
// layers until it is pruned or the last pruning layer is reached.
template <typename S>
void gae(Trajectory<S>& traj, double gamma_d, double lambda) {
    // token_index -> (layer ordinal, step ordinal), in layer order
    std::map<int, std::vector<std::pair<size_t, size_t>>> chains;
    for (size_t li = 0; li < traj.layers.size(); ++li) {
        const auto& layer = traj.layers[li];
        for (size_t si = 0; si < layer.steps.size(); ++si) {
            chains[layer.steps[si].token_index].emplace_back(li, si);
        }
    }
    std::vector<S> rewards, values, advantages, returns;
    std::vector<bool> dones;
    for (const auto& [token, chain] : chains) {
        rewards.clear();
        values.clear();
        dones.clear();
        for (const auto& [li, si] : chain) {
            const AgentStep<S>& s = traj.layers[li].steps[si];
            rewards.push_back(s.reward);
            values.push_back(s.value);
            dones.push_back(s.done);
        }
        gae_episode(rewards, values, dones, gamma_d, lambda, advantages, returns);
        for (size_t t = 0; t < chain.size(); ++t) {
            AgentStep<S>& s = traj.layers[chain[t].first].steps[chain[t].second];
            s.advantage = advantages[t];
            s.return_to_go = returns[t];
        }
    }
}

// Shifts/scales to mean 0, population std 1 (+1e-8); no-op for fewer than
// two entries.
template <typename S>
void normalize_advantages(std::vector<S>& adv) {
    if (adv.size() < 2) {
        return;
    }
    double mean = 0;
    for (S a : adv) {
        mean += static_cast<double>(a);
    }
    mean /= static_cast<double>(adv.size());
    double var = 0;
    for (S a : adv) {
        double d = static_cast<double>(a) - mean;
        var += d * d;
    }
    var /= static_cast<double>(adv.size());
    const double denom = std::sqrt(var) + 1e-8;
    for (S& a : adv) {
        a = static_cast<S>((static_cast<double>(a) - mean) / denom);
    }
}

// Debug dump, one line per agent step.
template <typename S>
void dump_trajectories_csv(const std::vector<Trajectory<S>>& trajs, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot open for writing: " + path);
    }
    out << "image_id,layer,token,action,reward,value,advantage\n";
    for (const auto& traj : trajs) {
        for (const auto& layer : traj.layers) {
            for (const auto& s : layer.steps) {
                out << traj.image_index << ',' << layer.layer_index << ',' << s.token_index << ','
                    << s.action << ',' << s.reward << ',' << s.value << ',' << s.advantage
                    << '\n';
            }
        }
    }
}

}  // namespace vitprune
