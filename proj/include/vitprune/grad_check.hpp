#pragma once

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "vitprune/matrix.hpp"
#include "vitprune/tape.hpp"

namespace vitprune {

// Finite-difference check of reverse-mode gradients. `loss_fn` must build a
// scalar loss on the given tape, watching whichever of `params` it uses.
// Returns the max over checked coordinates of
//     |analytic - central_difference| / max(1, |analytic|).
// `coords` is a list of (param index, flat entry index); empty checks all.
// Meant to run at 64-bit precision; the default step is h = 1e-5.
template <typename S>
double grad_check(const std::vector<Param<S>*>& params,
                  const std::function<Var<S>(Tape<S>&)>& loss_fn,
                  std::vector<std::pair<size_t, Index>> coords = {}, S h = S(1e-5)) {
    // analytic pass
    for (Param<S>* p : params) {
        p->zero_grad();
    }
    Tape<S> tape(true);
    Var<S> loss = loss_fn(tape);
    tape.backward(loss);

    if (coords.empty()) {
        for (size_t k = 0; k < params.size(); ++k) {
            Index n = params[k]->value.size();
            for (Index i = 0; i < n; ++i) {
                coords.emplace_back(k, i);
            }
        }
    }

    auto eval = [&]() -> S {
        Tape<S> t(false);
        return loss_fn(t).value()(0, 0);
    };

    double worst = 0;
    for (auto [k, i] : coords) {
        Param<S>& p = *params[k];
        S* slot = p.value.data() + i;
        const S saved = *slot;
        *slot = saved + h;
        S fp = eval();
        *slot = saved - h;
        S fm = eval();
        *slot = saved;
        double numeric = (static_cast<double>(fp) - static_cast<double>(fm)) /
                         (2.0 * static_cast<double>(h));
        double analytic = static_cast<double>(p.grad.data()[i]);
        double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace vitprune
