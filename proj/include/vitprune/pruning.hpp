#pragma once

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vitprune/game.hpp"
#include "vitprune/matrix.hpp"
#include "vitprune/ops.hpp"
#include "vitprune/tape.hpp"

namespace vitprune {

enum class PolicyMode { mappo, single_agent, random };

inline const char* to_string(PolicyMode m) {
    switch (m) {
        case PolicyMode::mappo: return "mappo";
        case PolicyMode::single_agent: return "single_agent";
        case PolicyMode::random: return "random";
    }
    return "?";
}

inline PolicyMode policy_mode_from_string(const std::string& s) {
    if (s == "mappo") return PolicyMode::mappo;
    if (s == "single_agent") return PolicyMode::single_agent;
    if (s == "random") return PolicyMode::random;
    throw std::invalid_argument("unknown policy mode: " + s);
}

// Plain MLP, GELU between layers, nothing after the last.
template <typename S>
struct Mlp {
    std::vector<Param<S>> weights;  // [in, out]
    std::vector<Param<S>> biases;   // [1, out]

    static Mlp make(const std::vector<Index>& sizes, uint64_t seed, const std::string& name) {
        Mlp m;
        auto rng = make_rng(seed, name);
        for (size_t i = 0; i + 1 < sizes.size(); ++i) {
            const Index in = sizes[i], out = sizes[i + 1];
            const bool last = i + 2 == sizes.size();
            // Kaiming-style init for the GELU layers; small final layer so the
            // initial policy/value output starts near zero.
            const S stddev = last ? S(0.01) : static_cast<S>(std::sqrt(2.0 / double(in)));
            m.weights.emplace_back(name + ".w" + std::to_string(i),
                                   randn<S>(rng, in, out, stddev));
            m.biases.emplace_back(name + ".b" + std::to_string(i), Mat<S>::Zero(1, out));
        }
        return m;
    }

    Var<S> forward(Tape<S>& t, Var<S> x) {
        for (size_t i = 0; i < weights.size(); ++i) {
            x = add_row(matmul(x, t.watch(weights[i])), t.watch(biases[i]));
            if (i + 1 < weights.size()) {
                x = gelu(x);
            }
        }
        return x;
    }

    Mat<S> forward_value(const Mat<S>& x_in) const {
        Mat<S> x = x_in;
        for (size_t i = 0; i < weights.size(); ++i) {
            Mat<S> y = x * weights[i].value;
            y.rowwise() += Eigen::Matrix<S, 1, Eigen::Dynamic>(biases[i].value.row(0));
            x = (i + 1 < weights.size()) ? gelu_value(y) : y;
        }
        return x;
    }

    void collect_params(NamedParams<S>& out) {
        for (auto& w : weights) {
            out.emplace_back(w.name, &w);
        }
        for (auto& b : biases) {
            out.emplace_back(b.name, &b);
        }
    }
};

// Shared policy MLP, layer sizes (D, 4D, 256, 64, 2); one parameter set for
// all agents at all pruning layers. Output column 0 scores prune, column 1
// preserve.
template <typename S>
struct ActorNet {
    Mlp<S> mlp;

    static ActorNet make(Index embed_dim, uint64_t seed) {
        ActorNet a;
        a.mlp = Mlp<S>::make({embed_dim, 4 * embed_dim, 256, 64, 2}, seed, "actor");
        return a;
    }

    Var<S> logits(Tape<S>& t, Var<S> token_features) { return mlp.forward(t, token_features); }
    Mat<S> logits_value(const Mat<S>& token_features) const {
        return mlp.forward_value(token_features);
    }
    NamedParams<S> named_params() {
        NamedParams<S> out;
        mlp.collect_params(out);
        return out;
    }
};

// Shared centralized value MLP, layer sizes (2D, 4D, 256, 64, 1); input is
// the agent's token feature concatenated with the class-token feature from
// the same pre-pruning state.
template <typename S>
struct CriticNet {
    Mlp<S> mlp;

    static CriticNet make(Index embed_dim, uint64_t seed) {
        CriticNet c;
        c.mlp = Mlp<S>::make({2 * embed_dim, 4 * embed_dim, 256, 64, 1}, seed, "critic");
        return c;
    }

    Var<S> values(Tape<S>& t, Var<S> concat_features) { return mlp.forward(t, concat_features); }
    Mat<S> values_value(const Mat<S>& concat_features) const {
        return mlp.forward_value(concat_features);
    }
    NamedParams<S> named_params() {
        NamedParams<S> out;
        mlp.collect_params(out);
        return out;
    }
};

// [n, D] local features + [1, D] global feature -> [n, 2D] critic input.
template <typename S>
Mat<S> critic_input(const Mat<S>& token_features, const Mat<S>& class_feature) {
    if (class_feature.rows() != 1 || class_feature.cols() != token_features.cols()) {
        throw std::invalid_argument("critic_input: class feature must be [1, D]");
    }
    Mat<S> in(token_features.rows(), 2 * token_features.cols());
    in.leftCols(token_features.cols()) = token_features;
    in.rightCols(token_features.cols()) = class_feature.replicate(token_features.rows(), 1);
    return in;
}

// One centralized value per agent from (local || global) features.
template <typename S>
Mat<S> critic_values(const CriticNet<S>& critic, const Mat<S>& token_features,
                     const Mat<S>& class_feature) {
    return critic.values_value(critic_input(token_features, class_feature));
}

template <typename S>
struct SampleResult {
    std::vector<int> actions;   // 0 prune, 1 preserve, one per agent
    std::vector<S> log_probs;   // log pi(a|s); zeros for the random baseline
};

// Turns actor logits into per-agent actions.
//  - mappo: one [n, 2] logits row per agent; sampled in training, argmax in eval.
//  - single_agent: one shared [1, 2] distribution from the class token;
//    per-agent independent draws in training, one shared argmax in eval.
//  - random: keep with probability keep_prob, no learnable state.
template <typename S>
SampleResult<S> sample_actions(const Mat<S>& logits, Index n_agents, bool train_mode,
                               PolicyMode mode, double keep_prob, std::mt19937_64& rng) {
    SampleResult<S> out;
    out.actions.resize(static_cast<size_t>(n_agents));
    out.log_probs.assign(static_cast<size_t>(n_agents), S(0));

    if (mode == PolicyMode::random) {
        if (keep_prob < 0.0 || keep_prob > 1.0) {
            throw std::invalid_argument("random policy: keep_prob outside [0, 1]");
        }
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (Index i = 0; i < n_agents; ++i) {
            out.actions[static_cast<size_t>(i)] =
                u(rng) < keep_prob ? kActionPreserve : kActionPrune;
        }
        return out;
    }

    const Index expected_rows = mode == PolicyMode::single_agent ? 1 : n_agents;
    if (logits.rows() != expected_rows || logits.cols() != 2) {
        throw std::invalid_argument("sample_actions: bad logits shape");
    }
    Mat<S> logp = log_softmax_rows_value(logits);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    int shared_argmax = argmax_row(logits, 0);
    for (Index i = 0; i < n_agents; ++i) {
        const Index row = mode == PolicyMode::single_agent ? 0 : i;
        int action;
        if (train_mode) {
            const double p_prune = std::exp(static_cast<double>(logp(row, kActionPrune)));
            action = u(rng) < p_prune ? kActionPrune : kActionPreserve;
        } else {
            action = mode == PolicyMode::single_agent ? shared_argmax : argmax_row(logits, row);
        }
        out.actions[static_cast<size_t>(i)] = action;
        out.log_probs[static_cast<size_t>(i)] = logp(row, action);
    }
    return out;
}

// Marks entries with action 0 as pruned. `active` lists the token indices
// the actions refer to; acting on the class token or an already-pruned token
// is an invariant breach. Returns the number of kept non-class tokens.
inline int apply_prune_mask(MaskVec& keep, const std::vector<int>& actions,
                            const std::vector<Index>& active) {
    if (actions.size() != active.size()) {
        throw std::invalid_argument("apply_prune: actions/active size mismatch");
    }
    for (size_t i = 0; i < active.size(); ++i) {
        const Index idx = active[i];
        if (idx <= 0 || idx >= keep.size()) {
            throw std::logic_error("apply_prune: invariant breach (class token targeted)");
        }
        if (!keep(idx)) {
            throw std::logic_error("apply_prune: invariant breach (token already pruned)");
        }
        if (actions[i] == kActionPrune) {
            keep(idx) = false;
        }
    }
    int n_kept = 0;
    for (Index i = 1; i < keep.size(); ++i) {
        n_kept += keep(i) ? 1 : 0;
    }
    return n_kept;
}

// Decision source consulted by the forward pass after each pruning block.
template <typename S>
struct PruneStepResult {
    std::vector<int> actions;
    std::vector<S> log_probs;      // empty when not collected
    std::vector<S> values;         // empty when not collected
    Mat<S> states_override;        // non-empty: record these states instead of the token features
};

template <typename S>
class PruneDecider {
  public:
    virtual ~PruneDecider() = default;
    // active_features: [n_active, D] kept non-class token features at S^l;
    // class_feature: [1, D] class token at S^l.
    virtual PruneStepResult<S> decide(int layer_index, const Mat<S>& active_features,
                                      const Mat<S>& class_feature) = 0;
};

// Learned policy (mappo / single_agent) or the seeded random baseline.
template <typename S>
class PolicyDecider : public PruneDecider<S> {
  public:
    PolicyDecider(ActorNet<S>* actor, CriticNet<S>* critic, PolicyMode mode, double keep_prob,
                  bool train_mode, bool want_values, std::mt19937_64 rng)
        : actor_(actor),
          critic_(critic),
          mode_(mode),
          keep_prob_(keep_prob),
          train_mode_(train_mode),
          want_values_(want_values),
          rng_(rng) {}

    PruneStepResult<S> decide(int, const Mat<S>& active_features,
                              const Mat<S>& class_feature) override {
        const Index n = active_features.rows();
        PruneStepResult<S> out;
        Mat<S> logits;
        if (mode_ == PolicyMode::random) {
            logits = Mat<S>::Zero(0, 2);  // unused
        } else if (mode_ == PolicyMode::single_agent) {
            logits = actor_->logits_value(class_feature);
        } else {
            logits = actor_->logits_value(active_features);
        }
        SampleResult<S> sr = sample_actions(logits, n, train_mode_, mode_, keep_prob_, rng_);
        out.actions = std::move(sr.actions);
        out.log_probs = std::move(sr.log_probs);
        if (want_values_ && mode_ != PolicyMode::random && critic_ != nullptr) {
            Mat<S> local = mode_ == PolicyMode::single_agent
                               ? Mat<S>(class_feature.replicate(n, 1))
                               : active_features;
            Mat<S> v = critic_values(*critic_, local, class_feature);
            out.values.assign(v.data(), v.data() + v.size());
        }
        if (mode_ == PolicyMode::single_agent) {
            out.states_override = class_feature.replicate(n, 1);
        }
        return out;
    }

  private:
    ActorNet<S>* actor_;
    CriticNet<S>* critic_;
    PolicyMode mode_;
    double keep_prob_;
    bool train_mode_;
    bool want_values_;
    std::mt19937_64 rng_;
};

// Replays pre-drawn actions, one vector per pruning layer in call order.
// Used by benchmarks and the masked/compacted equivalence checks.
template <typename S>
class FixedActionsDecider : public PruneDecider<S> {
  public:
    explicit FixedActionsDecider(std::vector<std::vector<int>> actions_per_layer)
        : actions_(std::move(actions_per_layer)) {}

    PruneStepResult<S> decide(int, const Mat<S>& active_features, const Mat<S>&) override {
        if (next_ >= actions_.size()) {
            throw std::logic_error("FixedActionsDecider: more pruning layers than action sets");
        }
        PruneStepResult<S> out;
        out.actions = actions_[next_++];
        if (static_cast<Index>(out.actions.size()) != active_features.rows()) {
            throw std::logic_error("FixedActionsDecider: action count mismatch");
        }
        return out;
    }

    void reset() { next_ = 0; }

  private:
    std::vector<std::vector<int>> actions_;
    size_t next_ = 0;
};

}  // namespace vitprune
