#include <doctest.h>

#include <cmath>
#include <vector>

#include "vitprune/game.hpp"

using namespace vitprune;

namespace {

Mat<double> row2(double a, double b) {
    Mat<double> m(1, 2);
    m << a, b;
    return m;
}

// Builds a two-layer trajectory: layer 2 has three agents (tokens 1-3),
// layer 3 keeps whoever layer 2 preserved.
Trajectory<double> small_trajectory(const std::vector<int>& actions_l1,
                                    const std::vector<int>& actions_l2) {
    Trajectory<double> tr;
    LayerRecord<double> l1;
    l1.layer_index = 2;
    int kept = 0;
    for (size_t i = 0; i < actions_l1.size(); ++i) {
        AgentStep<double> s;
        s.layer_index = 2;
        s.token_index = static_cast<int>(i) + 1;
        s.action = actions_l1[i];
        s.done = s.action == kActionPrune;
        kept += s.action;
        l1.steps.push_back(s);
    }
    l1.n_kept = kept;
    tr.layers.push_back(l1);

    LayerRecord<double> l2;
    l2.layer_index = 3;
    int kept2 = 0;
    size_t j = 0;
    for (size_t i = 0; i < actions_l1.size(); ++i) {
        if (actions_l1[i] == kActionPreserve) {
            AgentStep<double> s;
            s.layer_index = 3;
            s.token_index = static_cast<int>(i) + 1;
            s.action = actions_l2[j++];
            s.done = true;  // last pruning layer
            kept2 += s.action;
            l2.steps.push_back(s);
        }
    }
    l2.n_kept = kept2;
    tr.layers.push_back(l2);
    return tr;
}

}  // namespace

TEST_CASE("compute_gamma: argmax comparison with lowest-index tie break") {
    CHECK(compute_gamma(row2(0.1, 2.0), 1) == 1);
    CHECK(compute_gamma(row2(2.0, 0.1), 1) == 0);
    CHECK(compute_gamma(row2(1.0, 1.0), 0) == 1);  // tie goes to class 0
    CHECK(compute_gamma(row2(1.0, 1.0), 1) == 0);
}

TEST_CASE("compute_rewards: tagged examples from the reward definition") {
    RewardConfig rc;
    rc.alpha = 1.0;
    rc.beta = 1.0;
    rc.r2_scope = R2Scope::all_agents;

    // gamma = 1, n = 4: preserving agent -0.75, pruning agent +0.25
    Trajectory<double> tr;
    LayerRecord<double> layer;
    layer.layer_index = 1;
    layer.n_kept = 4;
    for (int i = 0; i < 5; ++i) {
        AgentStep<double> s;
        s.token_index = i + 1;
        s.action = i == 0 ? kActionPrune : kActionPreserve;
        layer.steps.push_back(s);
    }
    tr.layers.push_back(layer);
    tr.gamma_correct = 1;
    compute_rewards(tr, rc);
    CHECK(tr.layers[0].steps[0].reward == doctest::Approx(0.25).epsilon(1e-12));
    for (int i = 1; i < 5; ++i) {
        CHECK(tr.layers[0].steps[i].reward == doctest::Approx(-0.75).epsilon(1e-12));
    }

    // gamma = 0: preserving agent -1, pruning agent 0
    tr.gamma_correct = 0;
    compute_rewards(tr, rc);
    CHECK(tr.layers[0].steps[0].reward == doctest::Approx(0.0));
    CHECK(tr.layers[0].steps[1].reward == doctest::Approx(-1.0));

    // n = 0 guard: r2 is zero for every agent of that layer
    tr.gamma_correct = 1;
    tr.layers[0].n_kept = 0;
    for (auto& s : tr.layers[0].steps) {
        s.action = kActionPrune;
    }
    compute_rewards(tr, rc);
    for (const auto& s : tr.layers[0].steps) {
        CHECK(s.reward == doctest::Approx(0.0));
    }
}

TEST_CASE("compute_rewards: preserved_only scope zeroes r2 for pruning agents") {
    RewardConfig rc;
    rc.alpha = 1.0;
    rc.beta = 1.0;
    rc.r2_scope = R2Scope::preserved_only;
    Trajectory<double> tr = small_trajectory({1, 0, 1}, {1, 1});
    tr.gamma_correct = 1;
    compute_rewards(tr, rc);
    // layer 2: n = 2; preserve -> -1 + 1/2; prune -> 0
    CHECK(tr.layers[0].steps[0].reward == doctest::Approx(-0.5).epsilon(1e-12));
    CHECK(tr.layers[0].steps[1].reward == doctest::Approx(0.0));
    CHECK(tr.layers[0].steps[2].reward == doctest::Approx(-0.5).epsilon(1e-12));
}

TEST_CASE("compute_rewards: randomized agreement with a direct-formula oracle") {
    auto rng = make_rng(3, "rewards");
    for (int trial = 0; trial < 50; ++trial) {
        RewardConfig rc;
        rc.alpha = static_cast<double>(rng() % 100) / 25.0;
        rc.beta = static_cast<double>(rng() % 100) / 10.0 + 0.01;
        rc.r2_scope = (rng() % 2 == 0) ? R2Scope::all_agents : R2Scope::preserved_only;
        std::vector<int> a1, a2;
        for (int i = 0; i < 6; ++i) {
            a1.push_back(rng() % 2);
        }
        for (int i : a1) {
            if (i == kActionPreserve) {
                a2.push_back(rng() % 2);
            }
        }
        Trajectory<double> tr = small_trajectory(a1, a2);
        tr.gamma_correct = static_cast<int>(rng() % 2);
        compute_rewards(tr, rc);
        for (const auto& layer : tr.layers) {
            for (const auto& s : layer.steps) {
                const double r1 = s.action == kActionPrune ? 0.0 : -1.0;
                const double credited =
                    (rc.r2_scope == R2Scope::all_agents || s.action == kActionPreserve) ? 1.0
                                                                                        : 0.0;
                const double r2 =
                    layer.n_kept > 0 ? credited * tr.gamma_correct / layer.n_kept : 0.0;
                CHECK(std::abs(s.reward - (rc.alpha * r1 + rc.beta * r2)) < 1e-12);
            }
        }
    }
}

TEST_CASE("rewards depend only on (actions, n_kept, gamma): recomputation is bit-exact") {
    Trajectory<double> tr = small_trajectory({1, 0, 1}, {0, 1});
    tr.gamma_correct = 1;
    RewardConfig rc;
    rc.alpha = 0.7;
    rc.beta = 3.3;
    compute_rewards(tr, rc);
    std::vector<double> first;
    for (const auto& l : tr.layers) {
        for (const auto& s : l.steps) {
            first.push_back(s.reward);
        }
    }
    compute_rewards(tr, rc);
    size_t k = 0;
    for (const auto& l : tr.layers) {
        for (const auto& s : l.steps) {
            CHECK(s.reward == first[k++]);
        }
    }
}

TEST_CASE("gae_episode: one-step terminal episode gives A = r - V") {
    std::vector<double> adv, ret;
    gae_episode<double>({1.5}, {0.4}, {true}, 0.99, 0.95, adv, ret);
    CHECK(adv[0] == doctest::Approx(1.1).epsilon(1e-12));
    CHECK(ret[0] == doctest::Approx(1.5).epsilon(1e-12));
}

TEST_CASE("gae_episode: two steps with gamma = lambda = 1 telescope") {
    std::vector<double> r = {1.0, 2.0};
    std::vector<double> v = {0.3, 0.6};
    std::vector<double> adv, ret;
    gae_episode<double>(r, v, {false, true}, 1.0, 1.0, adv, ret);
    const double d1 = r[0] + v[1] - v[0];
    const double d2 = r[1] - v[1];
    CHECK(adv[0] == doctest::Approx(d1 + d2).epsilon(1e-12));
    CHECK(adv[1] == doctest::Approx(d2).epsilon(1e-12));
}

TEST_CASE("gae_episode: random episodes match the brute-force nested sum") {
    auto rng = make_rng(5, "gae");
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    for (int trial = 0; trial < 200; ++trial) {
        const size_t n = 1 + rng() % 5;
        std::vector<double> r(n), v(n), adv, ret;
        std::vector<bool> done(n, false);
        done[n - 1] = true;
        for (size_t i = 0; i < n; ++i) {
            r[i] = u(rng);
            v[i] = u(rng);
        }
        const double gamma = 0.99, lambda = 0.95;
        gae_episode(r, v, done, gamma, lambda, adv, ret);

        for (size_t t = 0; t < n; ++t) {
            double want = 0;
            for (size_t k = t; k < n; ++k) {
                const double next_v = k + 1 < n ? v[k + 1] : 0.0;
                const double nonterm = k + 1 < n ? 1.0 : 0.0;
                const double delta = r[k] + gamma * next_v * nonterm - v[k];
                want += std::pow(gamma * lambda, static_cast<double>(k - t)) * delta;
            }
            CHECK(std::abs(adv[t] - want) < 1e-10);
            CHECK(std::abs(ret[t] - (want + v[t])) < 1e-10);
        }
    }
}

TEST_CASE("gae_episode: lambda = 0 reduces to the one-step TD advantage") {
    auto rng = make_rng(6, "gae0");
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const size_t n = 4;
    std::vector<double> r(n), v(n), adv, ret;
    std::vector<bool> done(n, false);
    done[n - 1] = true;
    for (size_t i = 0; i < n; ++i) {
        r[i] = u(rng);
        v[i] = u(rng);
    }
    gae_episode(r, v, done, 0.99, 0.0, adv, ret);
    for (size_t t = 0; t < n; ++t) {
        const double next_v = t + 1 < n ? v[t + 1] : 0.0;
        const double nonterm = t + 1 < n ? 1.0 : 0.0;
        const double delta = r[t] + 0.99 * next_v * nonterm - v[t];
        CHECK(std::abs(adv[t] - delta) < 1e-12);
    }
}

TEST_CASE("gae over a trajectory routes advantages through per-token chains") {
    Trajectory<double> tr = small_trajectory({1, 0, 1}, {1, 0});
    tr.gamma_correct = 1;
    // hand-set values and rewards
    tr.layers[0].steps[0].value = 0.1;
    tr.layers[0].steps[1].value = 0.2;
    tr.layers[0].steps[2].value = 0.3;
    tr.layers[1].steps[0].value = 0.4;
    tr.layers[1].steps[1].value = 0.5;
    RewardConfig rc;
    compute_rewards(tr, rc);
    gae(tr, 0.99, 0.95);

    // token 2 was pruned at layer 2: single-step episode
    const AgentStep<double>& pruned = tr.layers[0].steps[1];
    CHECK(pruned.advantage ==
          doctest::Approx(pruned.reward - pruned.value).epsilon(1e-12));

    // token 1 chain spans both layers
    const AgentStep<double>& t1l1 = tr.layers[0].steps[0];
    const AgentStep<double>& t1l2 = tr.layers[1].steps[0];
    const double d2 = t1l2.reward - t1l2.value;
    const double d1 = t1l1.reward + 0.99 * t1l2.value - t1l1.value;
    CHECK(t1l2.advantage == doctest::Approx(d2).epsilon(1e-12));
    CHECK(t1l1.advantage == doctest::Approx(d1 + 0.99 * 0.95 * d2).epsilon(1e-12));
}

TEST_CASE("normalize_advantages: [1, 3] maps to [-1, 1]") {
    std::vector<double> adv = {1.0, 3.0};
    normalize_advantages(adv);
    CHECK(adv[0] == doctest::Approx(-1.0).epsilon(1e-7));
    CHECK(adv[1] == doctest::Approx(1.0).epsilon(1e-7));
}

TEST_CASE("normalize_advantages: constant batch collapses to zeros") {
    std::vector<double> adv(5, 2.5);
    normalize_advantages(adv);
    for (double a : adv) {
        CHECK(std::abs(a) < 1e-6);
    }
}

TEST_CASE("normalize_advantages: skipped below two entries") {
    std::vector<double> adv = {7.0};
    normalize_advantages(adv);
    CHECK(adv[0] == 7.0);
}

TEST_CASE("normalize_advantages: random batch lands at mean 0, std 1") {
    auto rng = make_rng(9, "norm");
    std::uniform_real_distribution<double> u(-5.0, 5.0);
    std::vector<double> adv(257);
    for (auto& a : adv) {
        a = u(rng);
    }
    normalize_advantages(adv);
    double mean = 0;
    for (double a : adv) {
        mean += a;
    }
    mean /= static_cast<double>(adv.size());
    double var = 0;
    for (double a : adv) {
        var += (a - mean) * (a - mean);
    }
    var /= static_cast<double>(adv.size());
    CHECK(std::abs(mean) < 1e-9);
    CHECK(std::sqrt(var) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("trajectory layer invariant: preserve count equals n_kept") {
    Trajectory<double> tr = small_trajectory({1, 0, 1, 1, 0}, {0, 1, 1});
    for (const auto& layer : tr.layers) {
        int preserved = 0;
        for (const auto& s : layer.steps) {
            preserved += s.action == kActionPreserve ? 1 : 0;
        }
        CHECK(preserved == layer.n_kept);
    }
}
