#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vitprune/matrix.hpp"
#include "vitprune/ops.hpp"

namespace vitprune {

// A learnable parameter: persistent value plus an additively-accumulated
// gradient. Parameters live outside any tape; a tape only references them.
template <typename S>
struct Param {
    std::string name;
    Mat<S> value;
    Mat<S> grad;

    Param() = default;
    Param(std::string n, Mat<S> v) : name(std::move(n)), value(std::move(v)) {
        grad = Mat<S>::Zero(value.rows(), value.cols());
    }

    void zero_grad() { grad.setZero(); }
};

template <typename S>
using NamedParams = std::vector<std::pair<std::string, Param<S>*>>;

template <typename S>
class Tape;

// Lightweight handle to one tape node. Copyable; valid until the tape is
// cleared or destroyed.
template <typename S>
struct Var {
    Tape<S>* tape = nullptr;
    Index id = -1;

    const Mat<S>& value() const;
    Index rows() const { return value().rows(); }
    Index cols() const { return value().cols(); }
};

// Dynamic reverse-mode tape. Each forward pass records nodes in creation
// order (a valid topological order); backward() runs the recorded closures
// in reverse and accumulates gradients additively. The tape is cleared
// between mini-batches because the pruning mask changes the graph per image.
//
// When recording is off the same graph-building functions still compute
// values but store no closures, giving a cheap inference path.
template <typename S>
class Tape {
  public:
    explicit Tape(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }
    void set_recording(bool r) { recording_ = r; }

    size_t size() const { return nodes_.size(); }
    Index next_id() const { return static_cast<Index>(nodes_.size()); }

    void clear() {
        nodes_.clear();
        watched_.clear();
    }

    // Constant leaf; gradients never flow into it.
    Var<S> leaf(Mat<S> v) { return make_node(std::move(v), false, nullptr, {}); }

    Var<S> leaf_scalar(S v) {
        Mat<S> m(1, 1);
        m(0, 0) = v;
        return leaf(std::move(m));
    }

    // Leaf whose gradient is forwarded into `p.grad` after backward. Watching
    // the same parameter twice on one tape returns the same node.
    Var<S> watch(Param<S>& p) {
        auto it = watched_.find(&p);
        if (it != watched_.end()) {
            return Var<S>{this, it->second};
        }
        Var<S> v = make_node(p.value, true, &p, {});
        watched_.emplace(&p, v.id);
        return v;
    }

    // Reverse sweep from a scalar node. Gradients accumulate; callers zero
    // parameter grads when they need a fresh accumulation.
    void backward(Var<S> loss) {
        if (!recording_) {
            throw std::logic_error("backward() on a non-recording tape");
        }
        if (loss.tape != this) {
            throw std::logic_error("backward() with a foreign Var");
        }
        const Mat<S>& lv = nodes_[static_cast<size_t>(loss.id)].value;
        if (lv.rows() != 1 || lv.cols() != 1) {
            throw std::invalid_argument("backward() expects a scalar loss");
        }
        grad(loss.id)(0, 0) += S(1);
        for (Index i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (!n.has_grad) {
                continue;
            }
            if (n.backprop) {
                n.backprop(*this);
            }
            if (n.sink != nullptr) {
                n.sink->grad += n.grad;
            }
        }
    }

    const Mat<S>& value(Index id) const { return nodes_[static_cast<size_t>(id)].value; }

    // Gradient accumulator of a node, zero-allocated on first touch.
    Mat<S>& grad(Index id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.has_grad) {
            n.grad = Mat<S>::Zero(n.value.rows(), n.value.cols());
            n.has_grad = true;
        }
        return n.grad;
    }

    bool needs_grad(Index id) const {
        return recording_ && nodes_[static_cast<size_t>(id)].needs_grad;
    }

    // Node builder used by the free functions below. `backprop` may be empty.
    Var<S> make_node(Mat<S> value, bool needs_grad, Param<S>* sink,
                     std::function<void(Tape<S>&)> backprop) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = recording_ && needs_grad;
        n.sink = sink;
        if (n.needs_grad) {
            n.backprop = std::move(backprop);
        }
        nodes_.push_back(std::move(n));
        return Var<S>{this, static_cast<Index>(nodes_.size()) - 1};
    }

  private:
    struct Node {
        Mat<S> value;
        Mat<S> grad;
        bool has_grad = false;
        bool needs_grad = false;
        Param<S>* sink = nullptr;
        std::function<void(Tape<S>&)> backprop;
    };

    std::vector<Node> nodes_;
    std::unordered_map<Param<S>*, Index> watched_;
    bool recording_ = true;
};

template <typename S>
const Mat<S>& Var<S>::value() const {
    return tape->value(id);
}

namespace detail {

template <typename S>
Tape<S>& same_tape(Var<S> a, Var<S> b) {
    if (a.tape != b.tape) {
        throw std::logic_error("operands recorded on different tapes");
    }
    return *a.tape;
}

}  // namespace detail

// -- differentiable free functions -- //
//
// Each builds one node: forward value via the plain kernels in ops.hpp (or
// Eigen directly), plus a reverse closure capturing node ids only, so the
// node vector may reallocate freely during the forward pass.

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
    Tape<S>& t = detail::same_tape(a, b);
    if (a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: inner dimensions disagree");
    }
    Mat<S> v = a.value() * b.value();
    bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
    std::function<void(Tape<S>&)> bp;
    if (ng) {
        Index ai = a.id, bi = b.id, oi = t.next_id();
        bool na = t.needs_grad(ai), nb = t.needs_grad(bi);
        bp = [ai, bi, oi, na, nb](Tape<S>& tp) {
            const Mat<S>& g = tp.grad(oi);
            if (na) tp.grad(ai).noalias() += g * tp.value(bi).transpose();
            if (nb) tp.grad(bi).noalias() += tp.value(ai).transpose() * g;
        };
    }
    return t.make_node(std::move(v), ng, nullptr, std::move(bp));
}

template <typename S>
Var<S> transpose(Var<S> a) {
    Tape<S>& t = *a.tape;
    Mat<S> v = a.value().transpose();
    bool ng = t.needs_grad(a.id);
    std::function<void(Tape<S>&)> bp;
    if (ng) {
        Index ai = a.id, oi = t.next_id();
        bp = [ai, oi](Tape<S>& tp) { tp.grad(ai) += tp.grad(oi).transpose(); };
    }
    return t.make_node(std::move(v), ng, nullptr, std::move(bp));
}

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
    Tape<S>& t = detail::same_tape(a, b);
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw std::invalid_argument("add: shape mismatch");
    }
    Mat<S> v = a.value() + b.value();
    bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
    std::function<void(Tape<S>&)> bp;
    if (ng) {
        Index ai = a.id, bi = b.id, oi = t.next_id();
        bool na = t.needs_grad(ai), nb = t.needs_grad(bi);
        bp = [ai, bi, oi, na, nb](Tape<S>& tp) {
            const Mat<S>& g = tp.grad(oi);
            if (na) tp.grad(ai) += g;
            if (nb) tp.grad(bi) += g;
        };
    }
    return t.make_node(std::move(v), ng, nullptr, std::move(bp));
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
    Tape<S>& t = detail::same_tape(a, b);
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw std::invalid_argument("sub: shape mismatch");
    }
    Mat<S> v = a.value() - b.value();
    bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
    std::function<void(Tape<S>&)> bp;
    if (ng) {
        Index ai = a.id, bi = b.id, oi = t.next_id();
        bool na = t.needs_grad(ai), nb = t.needs_grad(bi);
        bp = [ai, bi, oi, na, nb](Tape<S>& tp) {
            const Mat<S>& g = tp.grad(oi);
            if (na) tp.grad(ai) += g;
            if (nb) tp.grad(bi) -= g;
        };
    }
    return t.make_node(std::move(v), ng, nullptr, std::move(bp));
}

// Elementwise (Hadamard) product.
template <typename S>
Var<S> cmul(Var<S> a, Var<S> b) {
    Tape<S>& t = detail::same_tape(a, b);
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw std::invalid_argument("cmul: shape mismatch");
    }
    Mat<S> v = a.value().cwiseProduct(b.value());
    bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
    std::function<void(Tape<S>&)> bp;
    if (ng) {
        Index ai = a.id, bi = b.id, oi = t.next_id();
        bool na = t.needs_grad(ai), nb = t.needs_grad(bi);
        bp = [ai, bi, oi, na, nb](Tape<S>& tp) {
            const Mat<S>& g = tp.grad(oi);
            if (na) tp.grad(ai) += g.cwiseProduct(tp.value(bi));
            if (nb) tp.grad(bi) += g.cwiseProduct(tp.value(ai));
        };
    }
    return t.make_node(std::move(v), ng, nullptr, std::move(bp));
}

template <typename S>
Var<S> scale(Var<S> a, S c) {
    Tape<S>& t = *a.tape;
    Mat<S> v = a.value() * c;
    bool ng = t.needs_grad(a.id);
    std::function<void(Tape<S>&)> bp;
    if (ng) {
        Index ai = a.id, oi = t.next_id();
        bp = [ai, oi, c](Tape<S>& tp) { tp.grad(ai) += tp.grad(oi) * c; };
    }
    return t.make_node(std::move(v), ng, nullptr, std::move(bp));
}

template <typename S>
Var<S> add_scalar(Var<S> a, S c) {
    Tape<S>& t = *a.tape;
    Mat<S> v = a.value().array() + c;
    bool ng = t.needs_grad(a.id);
    std::function<void(Tape<S>&)> bp;
    if (ng) {
        Index ai = a.id, oi = t.next_id();
        bp = [ai, oi](Tape<S>& tp) { tp.grad(ai) += tp.grad(oi); };
    }
    return t.make_node(std::move(v), ng, nullptr, std::move(bp));
}

// Adds a [1, n] row to every row of a.
template <typename S>
Var<S> add_row(Var<S> a, Var<S> row) {
    Tape<S>& t = detail::same_tape(a, row);
    if (row.rows() != 1 || row.cols() != a.cols()) {
        throw std::invalid_argument("add_row: expected a [1, n] row operand");
    }
    Mat<S> v = a.value().rowwise() + Eigen::Matrix<S, 1, Eigen::Dynamic>(row.value().row(0));
    bool ng = t.needs_grad(a.id) || t.needs_grad(row.id);
    std::function<void(Tape<S>&)> bp;
    if (ng) {
        Index ai = a.id, ri = row.id, oi = t.next_id();
        bool na = t.needs_grad(ai), nr = t.needs_grad(ri);
        bp = [ai, ri, oi, na, nr](Tape<S>& tp) {
            const Mat<S>& g = tp.grad(oi);
            if (na) tp.grad(ai) += g;
            if (nr) tp.grad(ri) += g.colwise().sum();
        };
    }
    return t.make_node(std::move(v), ng, nullptr, std::move(bp));
}

// Stacks n copies of a [1, d] row into an [n, d] matrix.
template <typename S>
Var<S> replicate_row(Var<S> row, Index n) {
    Tape<S>& t = *row.tape;
    if (row.rows() != 1) {
        throw std::invalid_argument("replicate_row: expected a [1, d] row");
    }
    Mat<S> v = row.value().replicate(n, 1);
    bool ng = t.needs_grad(row.id);
    std::function<void(Tape<S>&)> bp;
    if (ng) {
        Index ri = row.id, oi = t.next_id();
        bp = [ri, oi](Tape<S>& tp) { tp.grad(ri) += tp.grad(oi).colwise().sum(); };
    }
    return t.make_node(std::move(v), ng, nullptr, std::move(bp));
}

template <typename S>
Var<S> gelu(Var<S> a) {
    Tape<S>& t = *a.tape;
    Mat<S> v = gelu_value(a.value());
    bool ng = t.needs_grad(a.id);
    std::function<void(Tape<S>&)> bp;
    if (ng) {
        Index ai = a.id, oi = t.next_id();
        bp = [ai, oi](Tape<S>& tp) {
            tp.grad(ai) += tp.grad(oi).cwiseProduct(gelu_derivative(tp.value(ai)));
        };
    }
    return t.make_node(std::move(v), ng, nullptr, std::move(bp));
}

template <typename S>
Var<S> vexp(Var<S> a) {
    Tape<S>& t = *a.tape;
    Mat<S> v = a.value().array().exp();
    bool ng = t.needs_grad(a.id);
    std::function<void(Tape<S>&)> bp;
    if (ng) {
        Index ai = a.id, oi = t.next_id();
        bp = [ai, oi](Tape<S>& tp) {
            tp.grad(ai) += tp.grad(oi).cwiseProduct(tp.value(oi));
        };
    }
    return t.make_node(std::move(v), ng, nullptr, std::move(bp));
}

// Elementwise clamp into [lo, hi]; gradient passes on the closed interval.
template <typename S>
Var<S> clip(Var<S> a, S lo, S hi) {
    Tape<S>& t = *a.tape;
    Mat<S> v = a.value().array().max(lo).min(hi);
    bool ng = t.needs_grad(a.id);
    std::function<void(Tape<S>&)> bp;
    if (ng) {
        Index ai = a.id, oi = t.next_id();
        bp = [ai, oi, lo, hi](Tape<S>& tp) {
            const Mat<S>& x = tp.value(ai);
            Mat<S> pass = ((x.array() >= lo) && (x.array() <= hi)).template cast<S>();
            tp.grad(ai) += tp.grad(oi).cwiseProduct(pass);
        };
    }
    return t.make_node(std::move(v), ng, nullptr, std::move(bp));
}

// Elementwise min; ties route the gradient to `a`.
template <typename S>
Var<S> minimum(Var<S> a, Var<S> b) {
    Tape<S>& t = detail::same_tape(a, b);
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw std::invalid_argument("minimum: shape mismatch");
    }
    Mat<S> v = a.value().cwiseMin(b.value());
    bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
    std::function<void(Tape<S>&)> bp;
    if (ng) {
        Index ai = a.id, bi = b.id, oi = t.next_id();
        bool na = t.needs_grad(ai), nb = t.needs_grad(bi);
        bp = [ai, bi, oi, na, nb](Tape<S>& tp) {
            const Mat<S>& g = tp.grad(oi);
            Mat<S> take_a =
                (tp.value(ai).array() <= tp.value(bi).array()).template cast<S>();
            if (na) tp.grad(ai) += g.cwiseProduct(take_a);
            if (nb) tp.grad(bi) += g.cwiseProduct(Mat<S>(Mat<S>::Ones(g.rows(), g.cols()) - take_a));
        };
    }
    return t.make_node(std::move(v), ng, nullptr, std::move(bp));
}

// Elementwise max; ties route the gradient to `a`.
template <typename S>
Var<S> maximum(Var<S> a, Var<S> b) {
    Tape<S>& t = detail::same_tape(a, b);
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw std::invalid_argument("maximum: shape mismatch");
    }
    Mat<S> v = a.value().cwiseMax(b.value());
    bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
    std::function<void(Tape<S>&)> bp;
    if (ng) {
        Index ai = a.id, bi = b.id, oi = t.next_id();
        bool na = t.needs_grad(ai), nb = t.needs_grad(bi);
        bp = [ai, bi, oi, na, nb](Tape<S>& tp) {
            const Mat<S>& g = tp.grad(oi);
            Mat<S> take_a =
                (tp.value(ai).array() >= tp.value(bi).array()).template cast<S>();
            if (na) tp.grad(ai) += g.cwiseProduct(take_a);
            if (nb) tp.grad(bi) += g.cwiseProduct(Mat<S>(Mat<S>::Ones(g.rows(), g.cols()) - take_a));
        };
    }
    return t.make_node(std::move(v), ng, nullptr, std::move(bp));
}

// Row-wise layer norm with learnable [1, D] gain and bias.
template <typename S>
Var<S> layer_norm_rows(Var<S> x, Var<S> gain, Var<S> bias, S eps) {
    Tape<S>& t = *x.tape;
    detail::same_tape(x, gain);
    detail::same_tape(x, bias);
    Mat<S> v = layer_norm_rows_value(x.value(), gain.value(), bias.value(), eps);
    bool ng = t.needs_grad(x.id) || t.needs_grad(gain.id) || t.needs_grad(bias.id);
    std::function<void(Tape<S>&)> bp;
    if (ng) {
        Index xi = x.id, gi = gain.id, bi = bias.id, oi = t.next_id();
        bool nx = t.needs_grad(xi), ngain = t.needs_grad(gi), nbias = t.needs_grad(bi);
        bp = [xi, gi, bi, oi, eps, nx, ngain, nbias](Tape<S>& tp) {
            const Mat<S>& xv = tp.value(xi);
            const Mat<S>& gv = tp.value(gi);
            const Mat<S>& g = tp.grad(oi);
            const Index d = xv.cols();
            const S dinv = S(1) / static_cast<S>(d);
            for (Index r = 0; r < xv.rows(); ++r) {
                S mean = xv.row(r).mean();
                Eigen::Array<S, 1, Eigen::Dynamic> centered = xv.row(r).array() - mean;
                S var = centered.square().sum() * dinv;
                S rstd = S(1) / std::sqrt(var + eps);
                Eigen::Array<S, 1, Eigen::Dynamic> xhat = centered * rstd;
                Eigen::Array<S, 1, Eigen::Dynamic> grow = g.row(r).array();
                if (ngain) tp.grad(gi).row(0).array() += grow * xhat;
                if (nbias) tp.grad(bi).row(0).array() += grow;
                if (nx) {
                    Eigen::Array<S, 1, Eigen::Dynamic> dxhat = grow * gv.row(0).array();
                    S m1 = dxhat.sum() * dinv;
                    S m2 = (dxhat * xhat).sum() * dinv;
                    tp.grad(xi).row(r).array() += (dxhat - m1 - xhat * m2) * rstd;
                }
            }
        };
    }
    return t.make_node(std::move(v), ng, nullptr, std::move(bp));
}

// Row-wise softmax of (logits + additive mask row); the mask is a constant.
// Mask entries are 0 (keep) or kMaskValue; a fully masked row is an error.
template <typename S>
Var<S> masked_softmax_rows(Var<S> logits, Var<S> additive_mask) {
    Tape<S>& t = detail::same_tape(logits, additive_mask);
    Mat<S> v = masked_softmax_rows_value(logits.value(), additive_mask.value());
    bool ng = t.needs_grad(logits.id);
    std::function<void(Tape<S>&)> bp;
    if (ng) {
        Index xi = logits.id, oi = t.next_id();
        bp = [xi, oi](Tape<S>& tp) {
            const Mat<S>& y = tp.value(oi);
            const Mat<S>& g = tp.grad(oi);
            Mat<S>& gx = tp.grad(xi);
            for (Index r = 0; r < y.rows(); ++r) {
                S dot = y.row(r).dot(g.row(r));
                gx.row(r).array() += y.row(r).array() * (g.row(r).array() - dot);
            }
        };
    }
    return t.make_node(std::move(v), ng, nullptr, std::move(bp));
}

template <typename S>
Var<S> softmax_rows(Var<S> logits) {
    Tape<S>& t = *logits.tape;
    Var<S> zero_mask = t.leaf(Mat<S>::Zero(1, logits.cols()));
    return masked_softmax_rows(logits, zero_mask);
}

template <typename S>
Var<S> log_softmax_rows(Var<S> logits) {
    Tape<S>& t = *logits.tape;
    Mat<S> v = log_softmax_rows_value(logits.value());
    bool ng = t.needs_grad(logits.id);
    std::function<void(Tape<S>&)> bp;
    if (ng) {
        Index xi = logits.id, oi = t.next_id();
        bp = [xi, oi](Tape<S>& tp) {
            const Mat<S>& logp = tp.value(oi);
            const Mat<S>& g = tp.grad(oi);
            Mat<S>& gx = tp.grad(xi);
            for (Index r = 0; r < logp.rows(); ++r) {
                S gsum = g.row(r).sum();
                gx.row(r).array() +=
                    g.row(r).array() - logp.row(r).array().exp() * gsum;
            }
        };
    }
    return t.make_node(std::move(v), ng, nullptr, std::move(bp));
}

// Gathers rows by index; duplicate indices accumulate on backward.
template <typename S>
Var<S> select_rows(Var<S> a, std::vector<Index> rows) {
    Tape<S>& t = *a.tape;
    Mat<S> v(static_cast<Index>(rows.size()), a.cols());
    const Mat<S>& av = a.value();
    for (size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= av.rows()) {
            throw std::out_of_range("select_rows: index out of range");
        }
        v.row(static_cast<Index>(i)) = av.row(rows[i]);
    }
    bool ng = t.needs_grad(a.id);
    std::function<void(Tape<S>&)> bp;
    if (ng) {
        Index ai = a.id, oi = t.next_id();
        bp = [ai, oi, rows = std::move(rows)](Tape<S>& tp) {
            const Mat<S>& g = tp.grad(oi);
            Mat<S>& ga = tp.grad(ai);
            for (size_t i = 0; i < rows.size(); ++i) {
                ga.row(rows[i]) += g.row(static_cast<Index>(i));
            }
        };
    }
    return t.make_node(std::move(v), ng, nullptr, std::move(bp));
}

template <typename S>
Var<S> slice_cols(Var<S> a, Index offset, Index n) {
    Tape<S>& t = *a.tape;
    if (offset < 0 || n < 0 || offset + n > a.cols()) {
        throw std::out_of_range("slice_cols: range out of bounds");
    }
    Mat<S> v = a.value().middleCols(offset, n);
    bool ng = t.needs_grad(a.id);
    std::function<void(Tape<S>&)> bp;
    if (ng) {
        Index ai = a.id, oi = t.next_id();
        bp = [ai, oi, offset, n](Tape<S>& tp) {
            tp.grad(ai).middleCols(offset, n) += tp.grad(oi);
        };
    }
    return t.make_node(std::move(v), ng, nullptr, std::move(bp));
}

// Horizontal concatenation of equal-height blocks.
template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
    if (parts.empty()) {
        throw std::invalid_argument("concat_cols: empty input");
    }
    Tape<S>& t = *parts[0].tape;
    Index rows = parts[0].rows();
    Index total = 0;
    bool ng = false;
    for (const auto& p : parts) {
        detail::same_tape(parts[0], p);
        if (p.rows() != rows) {
            throw std::invalid_argument("concat_cols: row mismatch");
        }
        total += p.cols();
        ng = ng || t.needs_grad(p.id);
    }
    Mat<S> v(rows, total);
    Index off = 0;
    std::vector<Index> ids, offs, widths;
    for (const auto& p : parts) {
        v.middleCols(off, p.cols()) = p.value();
        ids.push_back(p.id);
        offs.push_back(off);
        widths.push_back(p.cols());
        off += p.cols();
    }
    std::function<void(Tape<S>&)> bp;
    if (ng) {
        Index oi = t.next_id();
        bp = [oi, ids = std::move(ids), offs = std::move(offs),
              widths = std::move(widths)](Tape<S>& tp) {
            const Mat<S>& g = tp.grad(oi);
            for (size_t i = 0; i < ids.size(); ++i) {
                if (tp.needs_grad(ids[i])) {
                    tp.grad(ids[i]) += g.middleCols(offs[i], widths[i]);
                }
            }
        };
    }
    return t.make_node(std::move(v), ng, nullptr, std::move(bp));
}

template <typename S>
Var<S> concat_cols(Var<S> a, Var<S> b) {
    return concat_cols(std::vector<Var<S>>{a, b});
}

// Vertical concatenation of equal-width blocks.
template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
    if (parts.empty()) {
        throw std::invalid_argument("concat_rows: empty input");
    }
    Tape<S>& t = *parts[0].tape;
    Index cols = parts[0].cols();
    Index total = 0;
    bool ng = false;
    for (const auto& p : parts) {
        detail::same_tape(parts[0], p);
        if (p.cols() != cols) {
            throw std::invalid_argument("concat_rows: column mismatch");
        }
        total += p.rows();
        ng = ng || t.needs_grad(p.id);
    }
    Mat<S> v(total, cols);
    Index off = 0;
    std::vector<Index> ids, offs, heights;
    for (const auto& p : parts) {
        v.middleRows(off, p.rows()) = p.value();
        ids.push_back(p.id);
        offs.push_back(off);
        heights.push_back(p.rows());
        off += p.rows();
    }
    std::function<void(Tape<S>&)> bp;
    if (ng) {
        Index oi = t.next_id();
        bp = [oi, ids = std::move(ids), offs = std::move(offs),
              heights = std::move(heights)](Tape<S>& tp) {
            const Mat<S>& g = tp.grad(oi);
            for (size_t i = 0; i < ids.size(); ++i) {
                if (tp.needs_grad(ids[i])) {
                    tp.grad(ids[i]) += g.middleRows(offs[i], heights[i]);
                }
            }
        };
    }
    return t.make_node(std::move(v), ng, nullptr, std::move(bp));
}

template <typename S>
Var<S> concat_rows(Var<S> a, Var<S> b) {
    return concat_rows(std::vector<Var<S>>{a, b});
}

// [M, n] -> [M, 1] row sums.
template <typename S>
Var<S> row_sum(Var<S> a) {
    Tape<S>& t = *a.tape;
    Mat<S> v = a.value().rowwise().sum();
    bool ng = t.needs_grad(a.id);
    std::function<void(Tape<S>&)> bp;
    if (ng) {
        Index ai = a.id, oi = t.next_id();
        bp = [ai, oi](Tape<S>& tp) {
            const Mat<S>& g = tp.grad(oi);
            tp.grad(ai) += g.replicate(1, tp.value(ai).cols());
        };
    }
    return t.make_node(std::move(v), ng, nullptr, std::move(bp));
}

// Mean over all entries -> [1, 1].
template <typename S>
Var<S> mean_all(Var<S> a) {
    Tape<S>& t = *a.tape;
    Mat<S> v(1, 1);
    v(0, 0) = a.value().mean();
    bool ng = t.needs_grad(a.id);
    std::function<void(Tape<S>&)> bp;
    if (ng) {
        Index ai = a.id, oi = t.next_id();
        bp = [ai, oi](Tape<S>& tp) {
            const Mat<S>& av = tp.value(ai);
            S w = tp.grad(oi)(0, 0) / static_cast<S>(av.rows() * av.cols());
            tp.grad(ai).array() += w;
        };
    }
    return t.make_node(std::move(v), ng, nullptr, std::move(bp));
}

// Picks one entry per row: out(i, 0) = a(i, cols[i]).
template <typename S>
Var<S> take_per_row(Var<S> a, std::vector<int> cols) {
    Tape<S>& t = *a.tape;
    if (static_cast<Index>(cols.size()) != a.rows()) {
        throw std::invalid_argument("take_per_row: one column index per row expected");
    }
    Mat<S> v(a.rows(), 1);
    const Mat<S>& av = a.value();
    for (Index i = 0; i < av.rows(); ++i) {
        int c = cols[static_cast<size_t>(i)];
        if (c < 0 || c >= av.cols()) {
            throw std::out_of_range("take_per_row: column index out of range");
        }
        v(i, 0) = av(i, c);
    }
    bool ng = t.needs_grad(a.id);
    std::function<void(Tape<S>&)> bp;
    if (ng) {
        Index ai = a.id, oi = t.next_id();
        bp = [ai, oi, cols = std::move(cols)](Tape<S>& tp) {
            const Mat<S>& g = tp.grad(oi);
            Mat<S>& ga = tp.grad(ai);
            for (Index i = 0; i < g.rows(); ++i) {
                ga(i, cols[static_cast<size_t>(i)]) += g(i, 0);
            }
        };
    }
    return t.make_node(std::move(v), ng, nullptr, std::move(bp));
}

// Mean cross-entropy of integer labels under row softmax -> [1, 1].
template <typename S>
Var<S> cross_entropy_with_logits(Var<S> logits, std::vector<int> labels) {
    Tape<S>& t = *logits.tape;
    Mat<S> v(1, 1);
    v(0, 0) = cross_entropy_value(logits.value(), labels);
    bool ng = t.needs_grad(logits.id);
    std::function<void(Tape<S>&)> bp;
    if (ng) {
        Index xi = logits.id, oi = t.next_id();
        bp = [xi, oi, labels = std::move(labels)](Tape<S>& tp) {
            const Mat<S>& x = tp.value(xi);
            Mat<S> p = softmax_rows_value(x);
            for (Index i = 0; i < x.rows(); ++i) {
                p(i, labels[static_cast<size_t>(i)]) -= S(1);
            }
            S w = tp.grad(oi)(0, 0) / static_cast<S>(x.rows());
            tp.grad(xi) += p * w;
        };
    }
    return t.make_node(std::move(v), ng, nullptr, std::move(bp));
}

// Operator sugar matching Eigen conventions: * is the matrix product.
template <typename S>
Var<S> operator+(Var<S> a, Var<S> b) {
    return add(a, b);
}
template <typename S>
Var<S> operator-(Var<S> a, Var<S> b) {
    return sub(a, b);
}
template <typename S>
Var<S> operator*(Var<S> a, Var<S> b) {
    return matmul(a, b);
}

}  // namespace vitprune
