#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "vitprune/matrix.hpp"

namespace vitprune {

// Additive pre-softmax mask value for pruned key columns. With max-subtraction
// stabilization this underflows to an attention weight of exactly 0 in both
// 32- and 64-bit precision.
inline constexpr double kMaskValue = -1000.0;

// Plain (non-recording) kernels. The tape ops in tape.hpp call these for
// their forward values; tests may also use them directly.

template <typename S>
Mat<S> gelu_value(const Mat<S>& x) {
    // tanh approximation
    const S s = static_cast<S>(std::sqrt(2.0 / M_PI));
    const S c = static_cast<S>(0.044715);
    return x.unaryExpr([s, c](S v) {
        S cube = c * v * v * v;
        return static_cast<S>(0.5) * v * (static_cast<S>(1) + std::tanh(s * (v + cube)));
    });
}

template <typename S>
Mat<S> gelu_derivative(const Mat<S>& x) {
    const S s = static_cast<S>(std::sqrt(2.0 / M_PI));
    const S c = static_cast<S>(0.044715);
    return x.unaryExpr([s, c](S v) {
        S cube = c * v * v * v;
        S t = std::tanh(s * (v + cube));
        S sech2 = static_cast<S>(1) - t * t;
        return static_cast<S>(0.5) * (static_cast<S>(1) + t) +
               static_cast<S>(0.5) * v * sech2 * s * (static_cast<S>(1) + static_cast<S>(3) * c * v * v);
    });
}

// Row-wise softmax of (logits + additive_mask), max-subtracted. The mask row
// is added to every row of `logits`; entries are 0 (keep) or kMaskValue.
template <typename S>
Mat<S> masked_softmax_rows_value(const Mat<S>& logits, const Mat<S>& additive_mask) {
    if (additive_mask.rows() != 1 || additive_mask.cols() != logits.cols()) {
        throw std::invalid_argument("masked_softmax: mask must be a [1, N] row");
    }
    if ((additive_mask.array() == S(0)).count() == 0) {
        throw std::runtime_error("fully masked attention row");
    }
    Mat<S> out(logits.rows(), logits.cols());
    for (Index i = 0; i < logits.rows(); ++i) {
        Eigen::Array<S, 1, Eigen::Dynamic> row =
            logits.row(i).array() + additive_mask.row(0).array();
        S mx = row.maxCoeff();
        Eigen::Array<S, 1, Eigen::Dynamic> e = (row - mx).exp();
        out.row(i) = e / e.sum();
    }
    return out;
}

template <typename S>
Mat<S> softmax_rows_value(const Mat<S>& logits) {
    Mat<S> zero_mask = Mat<S>::Zero(1, logits.cols());
    return masked_softmax_rows_value(logits, zero_mask);
}

template <typename S>
Mat<S> log_softmax_rows_value(const Mat<S>& logits) {
    Mat<S> out(logits.rows(), logits.cols());
    for (Index i = 0; i < logits.rows(); ++i) {
        S mx = logits.row(i).maxCoeff();
        Eigen::Array<S, 1, Eigen::Dynamic> shifted = logits.row(i).array() - mx;
        S lse = std::log(shifted.exp().sum());
        out.row(i) = shifted - lse;
    }
    return out;
}

// y = gain .* (x - mean) / sqrt(var + eps) + bias, per row; population variance.
template <typename S>
Mat<S> layer_norm_rows_value(const Mat<S>& x, const Mat<S>& gain, const Mat<S>& bias, S eps) {
    if (gain.rows() != 1 || bias.rows() != 1 || gain.cols() != x.cols() ||
        bias.cols() != x.cols()) {
        throw std::invalid_argument("layer_norm: gain/bias must be [1, D] rows");
    }
    if (!(eps > S(0))) {
        throw std::invalid_argument("layer_norm: eps must be positive");
    }
    Mat<S> out(x.rows(), x.cols());
    const S d = static_cast<S>(x.cols());
    for (Index i = 0; i < x.rows(); ++i) {
        S mean = x.row(i).mean();
        Eigen::Array<S, 1, Eigen::Dynamic> centered = x.row(i).array() - mean;
        S var = centered.square().sum() / d;
        S rstd = S(1) / std::sqrt(var + eps);
        out.row(i) = gain.row(0).array() * (centered * rstd) + bias.row(0).array();
    }
    return out;
}

// Mean negative log-likelihood of the given class labels under row softmax.
template <typename S>
S cross_entropy_value(const Mat<S>& logits, const std::vector<int>& labels) {
    if (static_cast<Index>(labels.size()) != logits.rows()) {
        throw std::invalid_argument("cross_entropy: one label per logits row expected");
    }
    Mat<S> logp = log_softmax_rows_value(logits);
    S total = S(0);
    for (Index i = 0; i < logits.rows(); ++i) {
        total -= logp(i, labels[static_cast<size_t>(i)]);
    }
    return total / static_cast<S>(logits.rows());
}

template <typename S>
int argmax_row(const Mat<S>& m, Index row) {
    // ties broken towards the lowest index
    int best = 0;
    S best_v = m(row, 0);
    for (Index j = 1; j < m.cols(); ++j) {
        if (m(row, j) > best_v) {
            best_v = m(row, j);
            best = static_cast<int>(j);
        }
    }
    return best;
}

}  // namespace vitprune
