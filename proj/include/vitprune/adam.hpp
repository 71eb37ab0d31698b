#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "vitprune/matrix.hpp"
#include "vitprune/tape.hpp"

namespace vitprune {

template <typename S>
struct AdamState {
    Mat<S> first_moment;
    Mat<S> second_moment;
    long step_count = 0;
    S lr = S(1e-3);
    S beta1 = S(0.9);
    S beta2 = S(0.999);
    S eps = S(1e-8);

    static AdamState make(Index rows, Index cols, S lr, S beta1 = S(0.9), S beta2 = S(0.999),
                          S eps = S(1e-8)) {
        AdamState st;
        st.first_moment = Mat<S>::Zero(rows, cols);
        st.second_moment = Mat<S>::Zero(rows, cols);
        st.lr = lr;
        st.beta1 = beta1;
        st.beta2 = beta2;
        st.eps = eps;
        return st;
    }
};

// One bias-corrected Adam update, in place.
template <typename S>
void adam_step(Mat<S>& params, const Mat<S>& grads, AdamState<S>& state) {
    if (params.rows() != grads.rows() || params.cols() != grads.cols() ||
        params.rows() != state.first_moment.rows() || params.cols() != state.first_moment.cols()) {
        throw std::invalid_argument("adam_step: shape mismatch");
    }
    if (!grads.allFinite()) {
        throw std::runtime_error("non-finite gradient");
    }
    state.step_count += 1;
    const S b1 = state.beta1, b2 = state.beta2;
    state.first_moment = b1 * state.first_moment + (S(1) - b1) * grads;
    state.second_moment = b2 * state.second_moment.array() + (S(1) - b2) * grads.array().square();
    const S c1 = S(1) - std::pow(b1, static_cast<S>(state.step_count));
    const S c2 = S(1) - std::pow(b2, static_cast<S>(state.step_count));
    params.array() -= state.lr * (state.first_moment.array() / c1) /
                      ((state.second_moment.array() / c2).sqrt() + state.eps);
}

// Adam over a fixed set of parameters, with optional global-norm clipping.
template <typename S>
class AdamOptimizer {
  public:
    AdamOptimizer(std::vector<Param<S>*> params, S lr, S beta1 = S(0.9), S beta2 = S(0.999),
                  S eps = S(1e-8))
        : params_(std::move(params)) {
        states_.reserve(params_.size());
        for (Param<S>* p : params_) {
            states_.push_back(
                AdamState<S>::make(p->value.rows(), p->value.cols(), lr, beta1, beta2, eps));
        }
    }

    void zero_grad() {
        for (Param<S>* p : params_) {
            p->zero_grad();
        }
    }

    double global_grad_norm() const {
        double sq = 0;
        for (const Param<S>* p : params_) {
            sq += static_cast<double>(p->grad.squaredNorm());
        }
        return std::sqrt(sq);
    }

    // Scales all gradients so their global norm is at most max_norm.
    void clip_global_norm(double max_norm) {
        if (max_norm <= 0) {
            return;
        }
        double norm = global_grad_norm();
        if (norm > max_norm) {
            S f = static_cast<S>(max_norm / norm);
            for (Param<S>* p : params_) {
                p->grad *= f;
            }
        }
    }

    void step() {
        for (size_t i = 0; i < params_.size(); ++i) {
            adam_step(params_[i]->value, params_[i]->grad, states_[i]);
        }
    }

    const std::vector<Param<S>*>& params() const { return params_; }

  private:
    std::vector<Param<S>*> params_;
    std::vector<AdamState<S>> states_;
};

}  // namespace vitprune
