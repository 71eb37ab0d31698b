#include <doctest.h>

#include <cmath>
#include <vector>

#include "vitprune/adam.hpp"
#include "vitprune/grad_check.hpp"
#include "vitprune/matrix.hpp"
#include "vitprune/ops.hpp"
#include "vitprune/tape.hpp"

using namespace vitprune;

namespace {

Mat<double> row(std::initializer_list<double> vals) {
    Mat<double> m(1, static_cast<Index>(vals.size()));
    Index i = 0;
    for (double v : vals) {
        m(0, i++) = v;
    }
    return m;
}

}  // namespace

TEST_CASE("masked_softmax: uniform logits, no mask") {
    Mat<double> out = masked_softmax_rows_value(row({0, 0, 0}), row({0, 0, 0}));
    for (int j = 0; j < 3; ++j) {
        CHECK(out(0, j) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    }
}

TEST_CASE("masked_softmax: middle position masked matches the exp/sum oracle") {
    Mat<double> out = masked_softmax_rows_value(row({5, 2, 7}), row({0, kMaskValue, 0}));
    // high-precision oracle over the kept positions: softmax(5, 7)
    const long double e2 = std::exp(2.0L);
    CHECK(out(0, 0) == doctest::Approx(static_cast<double>(1.0L / (1.0L + e2))).epsilon(1e-12));
    CHECK(out(0, 2) == doctest::Approx(static_cast<double>(e2 / (1.0L + e2))).epsilon(1e-12));
    CHECK(out(0, 1) < 1e-12);
    CHECK(out.row(0).sum() == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("masked_softmax: single kept token") {
    Mat<double> out = masked_softmax_rows_value(row({3}), row({0}));
    CHECK(out(0, 0) == doctest::Approx(1.0));
}

TEST_CASE("masked_softmax: fully masked row is an error") {
    CHECK_THROWS_WITH_AS(
        masked_softmax_rows_value(row({1, 2}), row({kMaskValue, kMaskValue})),
        "fully masked attention row", std::runtime_error);
}

TEST_CASE("masked_softmax: output is a probability vector for random inputs") {
    for (int trial = 0; trial < 25; ++trial) {
        auto rng = make_rng(42, "softmax-prop", static_cast<uint64_t>(trial));
        const Index n = 1 + static_cast<Index>(rng() % 9);
        Mat<double> logits = randn<double>(rng, 3, n, 5.0);
        Mat<double> mask = Mat<double>::Zero(1, n);
        for (Index j = 1; j < n; ++j) {
            if (rng() % 2 == 0) {
                mask(0, j) = kMaskValue;
            }
        }
        Mat<double> out = masked_softmax_rows_value(logits, mask);
        for (Index i = 0; i < out.rows(); ++i) {
            CHECK(out.row(i).minCoeff() >= 0.0);
            CHECK(out.row(i).sum() == doctest::Approx(1.0).epsilon(1e-6));
            for (Index j = 0; j < n; ++j) {
                if (mask(0, j) != 0.0) {
                    CHECK(out(i, j) < 1e-12);
                }
            }
        }
    }
}

TEST_CASE("layer_norm: constant input maps to bias") {
    Mat<double> x = Mat<double>::Constant(2, 5, 3.7);
    Mat<double> ones = Mat<double>::Ones(1, 5);
    Mat<double> zeros = Mat<double>::Zero(1, 5);
    Mat<double> out = layer_norm_rows_value(x, ones, zeros, 1e-5);
    CHECK(out.cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("layer_norm: already-normalized input with tiny eps") {
    Mat<double> x = row({1, -1});
    Mat<double> ones = Mat<double>::Ones(1, 2);
    Mat<double> zeros = Mat<double>::Zero(1, 2);
    Mat<double> out = layer_norm_rows_value(x, ones, zeros, 1e-14);
    CHECK(out(0, 0) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(out(0, 1) == doctest::Approx(-1.0).epsilon(1e-6));
}

TEST_CASE("layer_norm: random input matches the direct-formula oracle") {
    for (int trial = 0; trial < 10; ++trial) {
        auto rng = make_rng(7, "ln-oracle", static_cast<uint64_t>(trial));
        const Index d = 4 + static_cast<Index>(rng() % 13);
        Mat<double> x = randn<double>(rng, 3, d, 2.0);
        Mat<double> g = randn<double>(rng, 1, d);
        Mat<double> b = randn<double>(rng, 1, d);
        const double eps = 1e-5;
        Mat<double> got = layer_norm_rows_value(x, g, b, eps);
        for (Index i = 0; i < x.rows(); ++i) {
            double mean = 0;
            for (Index j = 0; j < d; ++j) mean += x(i, j);
            mean /= static_cast<double>(d);
            double var = 0;
            for (Index j = 0; j < d; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
            var /= static_cast<double>(d);
            for (Index j = 0; j < d; ++j) {
                const double want = g(0, j) * (x(i, j) - mean) / std::sqrt(var + eps) + b(0, j);
                CHECK(std::abs(got(i, j) - want) < 1e-10);
            }
        }
    }
}

TEST_CASE("adam: zero gradient is a fixed point") {
    auto rng = make_rng(3, "adam-zero");
    Mat<double> p = randn<double>(rng, 3, 4);
    Mat<double> before = p;
    auto st = AdamState<double>::make(3, 4, 1e-3);
    for (int i = 0; i < 5; ++i) {
        adam_step<double>(p, Mat<double>::Zero(3, 4), st);
    }
    CHECK((p - before).cwiseAbs().maxCoeff() == 0.0);
    CHECK(st.step_count == 5);
}

TEST_CASE("adam: first scalar step matches the hand-evaluated update") {
    Mat<double> p = Mat<double>::Zero(1, 1);
    Mat<double> g = Mat<double>::Ones(1, 1);
    auto st = AdamState<double>::make(1, 1, 1e-3);
    adam_step(p, g, st);
    const double expected = -1e-3 / (1.0 + 1e-8);
    CHECK(std::abs(p(0, 0) - expected) < 1e-12);
    CHECK(p(0, 0) == doctest::Approx(-9.99999e-4).epsilon(1e-5));
}

TEST_CASE("adam: two steps match an independent sequential oracle") {
    for (int trial = 0; trial < 5; ++trial) {
        auto rng = make_rng(11, "adam-oracle", static_cast<uint64_t>(trial));
        Mat<double> p = randn<double>(rng, 2, 3);
        Mat<double> g1 = randn<double>(rng, 2, 3);
        Mat<double> g2 = randn<double>(rng, 2, 3);
        Mat<double> p_oracle = p;

        auto st = AdamState<double>::make(2, 3, 1e-3);
        adam_step(p, g1, st);
        adam_step(p, g2, st);

        // element-wise sequential reference
        const double b1 = 0.9, b2 = 0.999, lr = 1e-3, eps = 1e-8;
        for (Index i = 0; i < 2; ++i) {
            for (Index j = 0; j < 3; ++j) {
                double m = 0, v = 0, x = p_oracle(i, j);
                for (int t = 1; t <= 2; ++t) {
                    const double grad = t == 1 ? g1(i, j) : g2(i, j);
                    m = b1 * m + (1 - b1) * grad;
                    v = b2 * v + (1 - b2) * grad * grad;
                    const double mhat = m / (1 - std::pow(b1, t));
                    const double vhat = v / (1 - std::pow(b2, t));
                    x -= lr * mhat / (std::sqrt(vhat) + eps);
                }
                CHECK(std::abs(p(i, j) - x) < 1e-12);
            }
        }
    }
}

TEST_CASE("adam: non-finite gradient is an error") {
    Mat<double> p = Mat<double>::Zero(1, 2);
    Mat<double> g = Mat<double>::Zero(1, 2);
    g(0, 1) = std::numeric_limits<double>::quiet_NaN();
    auto st = AdamState<double>::make(1, 2, 1e-3);
    CHECK_THROWS_WITH_AS(adam_step(p, g, st), "non-finite gradient", std::runtime_error);
}

TEST_CASE("grad_check: quadratic is exact for central differences") {
    Param<double> x("x", Mat<double>::Constant(1, 1, 3.0));
    double err = grad_check<double>({&x}, [&x](Tape<double>& t) {
        Var<double> v = t.watch(x);
        return cmul(v, v);
    });
    CHECK(err < 1e-8);
    CHECK(x.grad(0, 0) == doctest::Approx(6.0).epsilon(1e-10));
}

TEST_CASE("grad_check: masked softmax composed with a dot product") {
    auto rng = make_rng(5, "gc-softmax");
    Param<double> x("x", randn<double>(rng, 2, 6));
    Mat<double> w = randn<double>(rng, 6, 1);
    Mat<double> mask = Mat<double>::Zero(1, 6);
    mask(0, 2) = kMaskValue;
    mask(0, 4) = kMaskValue;
    double err = grad_check<double>({&x}, [&](Tape<double>& t) {
        Var<double> probs = masked_softmax_rows(t.watch(x), t.leaf(mask));
        return mean_all(matmul(probs, t.leaf(w)));
    });
    CHECK(err < 1e-4);
}

TEST_CASE("tape: gradients accumulate additively across backward calls") {
    Param<double> x("x", Mat<double>::Constant(1, 1, 2.0));
    Tape<double> t;
    Var<double> v = t.watch(x);
    Var<double> y = cmul(v, v);
    t.backward(y);
    CHECK(x.grad(0, 0) == doctest::Approx(4.0));
    t.backward(y);  // same tape, accumulates
    CHECK(x.grad(0, 0) == doctest::Approx(8.0));
}

TEST_CASE("tape: non-recording mode computes values but no gradients") {
    Param<double> x("x", Mat<double>::Constant(1, 1, 2.0));
    Tape<double> t(false);
    Var<double> y = cmul(t.watch(x), t.watch(x));
    CHECK(y.value()(0, 0) == doctest::Approx(4.0));
    CHECK_THROWS_AS(t.backward(y), std::logic_error);
}

// Every differentiable op passes a finite-difference check on randomized
// instances. Mirrors the acceptance-suite loop at a smaller trial count.
TEST_CASE("grad_check: every differentiable op on random instances") {
    struct OpCase {
        const char* name;
        std::function<Var<double>(Tape<double>&, Param<double>&, Param<double>&)> build;
    };
    const std::vector<OpCase> ops = {
        {"matmul", [](Tape<double>& t, Param<double>& a, Param<double>& b) {
             return mean_all(matmul(t.watch(a), transpose(t.watch(b))));
         }},
        {"transpose", [](Tape<double>& t, Param<double>& a, Param<double>&) {
             return mean_all(transpose(t.watch(a)));
         }},
        {"add", [](Tape<double>& t, Param<double>& a, Param<double>& b) {
             return mean_all(add(t.watch(a), t.watch(b)));
         }},
        {"sub", [](Tape<double>& t, Param<double>& a, Param<double>& b) {
             return mean_all(sub(t.watch(a), t.watch(b)));
         }},
        {"cmul", [](Tape<double>& t, Param<double>& a, Param<double>& b) {
             return mean_all(cmul(t.watch(a), t.watch(b)));
         }},
        {"scale", [](Tape<double>& t, Param<double>& a, Param<double>&) {
             return mean_all(scale(t.watch(a), 2.5));
         }},
        {"add_scalar", [](Tape<double>& t, Param<double>& a, Param<double>&) {
             return mean_all(add_scalar(t.watch(a), -1.3));
         }},
        {"add_row", [](Tape<double>& t, Param<double>& a, Param<double>& b) {
             return mean_all(add_row(t.watch(a), slice_cols(select_rows(t.watch(b),
                                                                        {0}),
                                                            0, a.value.cols())));
         }},
        {"replicate_row", [](Tape<double>& t, Param<double>& a, Param<double>&) {
             return mean_all(replicate_row(select_rows(t.watch(a), {0}), 4));
         }},
        {"gelu", [](Tape<double>& t, Param<double>& a, Param<double>&) {
             return mean_all(gelu(t.watch(a)));
         }},
        {"vexp", [](Tape<double>& t, Param<double>& a, Param<double>&) {
             return mean_all(vexp(t.watch(a)));
         }},
        {"clip", [](Tape<double>& t, Param<double>& a, Param<double>&) {
             return mean_all(clip(t.watch(a), -0.5, 0.5));
         }},
        {"minimum", [](Tape<double>& t, Param<double>& a, Param<double>& b) {
             return mean_all(minimum(t.watch(a), t.watch(b)));
         }},
        {"maximum", [](Tape<double>& t, Param<double>& a, Param<double>& b) {
             return mean_all(maximum(t.watch(a), t.watch(b)));
         }},
        {"layer_norm_rows", [](Tape<double>& t, Param<double>& a, Param<double>& b) {
             Var<double> g = slice_cols(select_rows(t.watch(b), {0}), 0, a.value.cols());
             Var<double> bias = slice_cols(select_rows(t.watch(b), {1}), 0, a.value.cols());
             return mean_all(layer_norm_rows(t.watch(a), g, bias, 1e-5));
         }},
        {"masked_softmax_rows", [](Tape<double>& t, Param<double>& a, Param<double>&) {
             Mat<double> mask = Mat<double>::Zero(1, a.value.cols());
             mask(0, 0) = kMaskValue;
             return mean_all(cmul(masked_softmax_rows(t.watch(a), t.leaf(mask)), t.watch(a)));
         }},
        {"softmax_rows", [](Tape<double>& t, Param<double>& a, Param<double>&) {
             return mean_all(cmul(softmax_rows(t.watch(a)), t.watch(a)));
         }},
        {"log_softmax_rows", [](Tape<double>& t, Param<double>& a, Param<double>&) {
             return mean_all(cmul(log_softmax_rows(t.watch(a)), t.watch(a)));
         }},
        {"select_rows", [](Tape<double>& t, Param<double>& a, Param<double>&) {
             return mean_all(select_rows(t.watch(a), {1, 0, 1}));
         }},
        {"slice_cols", [](Tape<double>& t, Param<double>& a, Param<double>&) {
             return mean_all(slice_cols(t.watch(a), 1, a.value.cols() - 1));
         }},
        {"concat_cols", [](Tape<double>& t, Param<double>& a, Param<double>& b) {
             return mean_all(concat_cols(t.watch(a), t.watch(b)));
         }},
        {"concat_rows", [](Tape<double>& t, Param<double>& a, Param<double>& b) {
             return mean_all(concat_rows(t.watch(a), t.watch(b)));
         }},
        {"row_sum", [](Tape<double>& t, Param<double>& a, Param<double>&) {
             return mean_all(row_sum(cmul(t.watch(a), t.watch(a))));
         }},
        {"mean_all", [](Tape<double>& t, Param<double>& a, Param<double>&) {
             return mean_all(t.watch(a));
         }},
        {"take_per_row", [](Tape<double>& t, Param<double>& a, Param<double>&) {
             return mean_all(take_per_row(t.watch(a), {0, 2, 1}));
         }},
        {"cross_entropy_with_logits", [](Tape<double>& t, Param<double>& a, Param<double>&) {
             return cross_entropy_with_logits(t.watch(a), {0, 2, 1});
         }},
    };
    for (const auto& op : ops) {
        CAPTURE(op.name);
        for (uint64_t trial = 0; trial < 3; ++trial) {
            auto rng = make_rng(100 + trial, op.name);
            Param<double> a("a", randn<double>(rng, 3, 4));
            Param<double> b("b", randn<double>(rng, 3, 4));
            // keep random points away from the min/max/clip kinks
            for (Index i = 0; i < a.value.size(); ++i) {
                if (std::abs(a.value.data()[i] - b.value.data()[i]) < 1e-3) {
                    b.value.data()[i] += 0.01;
                }
                if (std::abs(std::abs(a.value.data()[i]) - 0.5) < 1e-3) {
                    a.value.data()[i] += 0.01;
                }
            }
            double err = grad_check<double>(
                {&a, &b}, [&](Tape<double>& t) { return op.build(t, a, b); });
            CHECK_MESSAGE(err < 1e-4, op.name, " trial ", trial, " err ", err);
        }
    }
}
