// Reverse-mode tape: every op's value is checked against a plain Eigen or
// loop expression, and every gradient against central finite differences in
// double precision.
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <memory>
#include <vector>

#include "miva/attention.hpp"
#include "miva/autodiff.hpp"
#include "miva/rng.hpp"

using namespace miva;

namespace {

using DTape = Tape<double>;
using DVar = DTape::Var;
using Builder = std::function<DVar(DTape&, const std::vector<DVar>&)>;

Mat<double> randm(Rng& rng, int r, int c) {
    Mat<double> m(r, c);
    rng.fill_gaussian(m);
    return m;
}

// Reduce any op output to a scalar: squared norm via the tape's own loss op.
DVar sse_all(DTape& t, DVar x) {
    auto target = std::make_shared<Mat<double>>(
        Mat<double>::Zero(t.val(x).rows(), t.val(x).cols()));
    return t.sse_rows(x, target, 0, t.val(x).rows());
}

double eval_loss(const std::vector<Mat<double>>& leaves, const Builder& build) {
    DTape t;
    std::vector<DVar> vs;
    for (auto& m : leaves) vs.push_back(t.leaf(m, true));
    return t.val(build(t, vs))(0, 0);
}

// Analytic tape gradients vs central differences for every leaf entry.
void check_gradients(std::vector<Mat<double>> leaves, const Builder& build, double tol = 2e-6) {
    DTape t;
    std::vector<DVar> vs;
    for (auto& m : leaves) vs.push_back(t.leaf(m, true));
    DVar loss = build(t, vs);
    t.backward(loss);
    const double h = 1e-5;
    for (size_t li = 0; li < leaves.size(); li++) {
        Mat<double> g = t.grad(vs[li]);
        REQUIRE(g.rows() == leaves[li].rows());
        REQUIRE(g.cols() == leaves[li].cols());
        for (Eigen::Index r = 0; r < g.rows(); r++)
            for (Eigen::Index c = 0; c < g.cols(); c++) {
                auto lp = leaves, lm = leaves;
                lp[li](r, c) += h;
                lm[li](r, c) -= h;
                double fd = (eval_loss(lp, build) - eval_loss(lm, build)) / (2.0 * h);
                REQUIRE(std::abs(g(r, c) - fd) <= tol * std::max(1.0, std::abs(fd)));
            }
    }
}

}  // namespace

TEST_CASE("tape leaves, zeros, and node bookkeeping") {
    DTape t;
    Rng rng(21);
    Mat<double> m = randm(rng, 3, 2);
    DVar a = t.leaf(m, true);
    CHECK((t.val(a) - m).cwiseAbs().maxCoeff() == 0.0);
    CHECK(t.needs_grad(a));
    DVar z = t.zeros(2, 5);
    CHECK(t.val(z).cwiseAbs().maxCoeff() == 0.0);
    CHECK_FALSE(t.needs_grad(z));
    CHECK_THROWS_AS(t.grad(a), dim_error);  // nothing computed yet

    // node slots are reused after reset, with fresh shapes
    int first_id = a.id;
    t.reset();
    DVar a2 = t.leaf(randm(rng, 4, 4), true);
    CHECK(a2.id == first_id);
    CHECK(t.val(a2).rows() == 4);
}

TEST_CASE("matmul: values for all transpose flags, gradients by differences") {
    Rng rng(22);
    Mat<double> A = randm(rng, 3, 4), B = randm(rng, 4, 2);

    DTape t;
    DVar a = t.leaf(A), b = t.leaf(B);
    CHECK((t.val(t.matmul(a, b)) - A * B).cwiseAbs().maxCoeff() < 1e-15);

    Mat<double> At = A.transpose(), Bt = B.transpose();
    DVar at = t.leaf(At), bt = t.leaf(Bt);
    CHECK((t.val(t.matmul(at, b, true, false)) - A * B).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((t.val(t.matmul(a, bt, false, true)) - A * B).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((t.val(t.matmul(at, bt, true, true, 0.5)) - 0.5 * A * B).cwiseAbs().maxCoeff() < 1e-15);

    for (bool ta : {false, true})
        for (bool tb : {false, true}) {
            Mat<double> LA = ta ? Mat<double>(A.transpose()) : A;
            Mat<double> LB = tb ? Mat<double>(B.transpose()) : B;
            check_gradients({LA, LB}, [=](DTape& tp, const std::vector<DVar>& v) {
                return sse_all(tp, tp.matmul(v[0], v[1], ta, tb, 0.7));
            });
        }
}

TEST_CASE("add, scaled add, and scalar scale") {
    Rng rng(23);
    Mat<double> A = randm(rng, 3, 3), B = randm(rng, 3, 3);
    DTape t;
    DVar a = t.leaf(A), b = t.leaf(B);
    CHECK((t.val(t.add(a, b)) - (A + B)).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((t.val(t.add_scaled(a, b, -0.3)) - (A - 0.3 * B)).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((t.val(t.scale(a, 2.5)) - 2.5 * A).cwiseAbs().maxCoeff() < 1e-15);
    CHECK_THROWS_AS(t.add(a, t.leaf(randm(rng, 2, 3))), dim_error);

    check_gradients({A, B}, [](DTape& tp, const std::vector<DVar>& v) {
        return sse_all(tp, tp.add_scaled(v[0], v[1], -0.3));
    });
    check_gradients({A}, [](DTape& tp, const std::vector<DVar>& v) {
        return sse_all(tp, tp.scale(v[0], 2.5));
    });
}

TEST_CASE("scale by a vector element: value and gradient into both inputs") {
    Rng rng(24);
    Mat<double> A = randm(rng, 3, 2);
    Mat<double> lam(1, 2);
    lam << 0.4, 0.6;

    DTape t;
    DVar a = t.leaf(A), l = t.leaf(lam);
    CHECK((t.val(t.scale_by_element(a, l, 1)) - 0.6 * A).cwiseAbs().maxCoeff() < 1e-15);

    check_gradients({A, lam}, [](DTape& tp, const std::vector<DVar>& v) {
        return sse_all(tp, tp.scale_by_element(v[0], v[1], 0));
    });
    check_gradients({A, lam}, [](DTape& tp, const std::vector<DVar>& v) {
        return sse_all(tp, tp.scale_by_element(v[0], v[1], 1));
    });
}

TEST_CASE("row broadcast add") {
    Rng rng(25);
    Mat<double> A = randm(rng, 4, 3), V = randm(rng, 1, 3);
    DTape t;
    DVar a = t.leaf(A), v = t.leaf(V);
    Mat<double> want = A;
    want.rowwise() += V.row(0);
    CHECK((t.val(t.add_row_broadcast(a, v)) - want).cwiseAbs().maxCoeff() < 1e-15);

    check_gradients({A, V}, [](DTape& tp, const std::vector<DVar>& vs) {
        return sse_all(tp, tp.add_row_broadcast(vs[0], vs[1]));
    });
}

TEST_CASE("row softmax: value against the reference and smooth gradients") {
    Rng rng(26);
    Mat<double> A = randm(rng, 4, 5);
    DTape t;
    Mat<double> want = A;
    softmax_rows_inplace(want);
    CHECK((t.val(t.row_softmax(t.leaf(A))) - want).cwiseAbs().maxCoeff() < 1e-12);

    // compose with a projection so the scalar sees asymmetric weights
    Mat<double> W = randm(rng, 5, 2);
    check_gradients({A, W}, [](DTape& tp, const std::vector<DVar>& v) {
        return sse_all(tp, tp.matmul(tp.row_softmax(v[0]), v[1]));
    });
}

TEST_CASE("silu activation") {
    Rng rng(27);
    Mat<double> A = randm(rng, 3, 4);
    DTape t;
    Mat<double> got = t.val(t.silu(t.leaf(A)));
    for (Eigen::Index r = 0; r < A.rows(); r++)
        for (Eigen::Index c = 0; c < A.cols(); c++)
            CHECK(got(r, c) ==
                  Catch::Approx(A(r, c) / (1.0 + std::exp(-A(r, c)))).margin(1e-13));

    check_gradients({A}, [](DTape& tp, const std::vector<DVar>& v) {
        return sse_all(tp, tp.silu(v[0]));
    });
}

TEST_CASE("row slicing: value, bounds, gradient routed to the slice only") {
    Rng rng(28);
    Mat<double> A = randm(rng, 5, 3);
    DTape t;
    DVar a = t.leaf(A, true);
    DVar s = t.slice_rows(a, 1, 2);
    CHECK((t.val(s) - A.middleRows(1, 2)).cwiseAbs().maxCoeff() == 0.0);
    CHECK_THROWS_AS(t.slice_rows(a, 4, 2), dim_error);

    DVar loss = sse_all(t, s);
    t.backward(loss);
    Mat<double> g = t.grad(a);
    CHECK(g.row(0).cwiseAbs().maxCoeff() == 0.0);
    CHECK(g.row(3).cwiseAbs().maxCoeff() == 0.0);
    CHECK(g.row(4).cwiseAbs().maxCoeff() == 0.0);
    CHECK((g.middleRows(1, 2) - 2.0 * A.middleRows(1, 2)).cwiseAbs().maxCoeff() < 1e-12);

    check_gradients({A}, [](DTape& tp, const std::vector<DVar>& v) {
        return sse_all(tp, tp.slice_rows(v[0], 1, 3));
    });
}

TEST_CASE("grouped attention: blockwise values with bias offsets, gradients") {
    Rng rng(29);
    const int d = 3, dv = 2;
    Mat<double> Q = randm(rng, 6, d), K = randm(rng, 5, d), V = randm(rng, 5, dv);
    Mat<double> bias = randm(rng, 6, 5);
    double scale = 1.0 / std::sqrt(double(d));

    std::vector<DTape::AttnGroup> groups{{0, 3, 0, 2, &bias, 0, 0}, {3, 3, 2, 3, &bias, 3, 2}};

    DTape t;
    DVar out = t.grouped_attention(t.leaf(Q), t.leaf(K), t.leaf(V), groups, scale);

    Mat<double> b0 = bias.block(0, 0, 3, 2), b1 = bias.block(3, 2, 3, 3);
    Mat<double> w0 = attention<double>(Q.topRows(3), K.topRows(2), V.topRows(2), &b0);
    Mat<double> w1 = attention<double>(Q.bottomRows(3), K.bottomRows(3), V.bottomRows(3), &b1);
    CHECK((t.val(out).topRows(3) - w0).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((t.val(out).bottomRows(3) - w1).cwiseAbs().maxCoeff() < 1e-12);

    check_gradients({Q, K, V}, [&](DTape& tp, const std::vector<DVar>& v) {
        return sse_all(tp, tp.grouped_attention(v[0], v[1], v[2], groups, scale));
    });

    // overlapping key ranges must accumulate, not overwrite
    std::vector<DTape::AttnGroup> overlap{{0, 3, 0, 4, nullptr, 0, 0}, {3, 3, 1, 4, nullptr, 0, 0}};
    check_gradients({Q, K, V}, [&](DTape& tp, const std::vector<DVar>& v) {
        return sse_all(tp, tp.grouped_attention(v[0], v[1], v[2], overlap, scale));
    });
}

TEST_CASE("frame-axis attention: per-site values and gradients") {
    Rng rng(30);
    const int F = 3, N = 2, d = 3, dv = 2;
    Mat<double> Q = randm(rng, F * N, d), K = randm(rng, F * N, d), V = randm(rng, F * N, dv);
    double scale = 1.0 / std::sqrt(double(d));

    DTape t;
    Mat<double> got = t.val(t.temporal_attention(t.leaf(Q), t.leaf(K), t.leaf(V), F, N, scale));
    for (int site = 0; site < N; site++) {
        Mat<double> qg(F, d), kg(F, d), vg(F, dv);
        for (int f = 0; f < F; f++) {
            qg.row(f) = Q.row(f * N + site);
            kg.row(f) = K.row(f * N + site);
            vg.row(f) = V.row(f * N + site);
        }
        Mat<double> og = attention<double>(qg, kg, vg);
        for (int f = 0; f < F; f++)
            CHECK((got.row(f * N + site) - og.row(f)).cwiseAbs().maxCoeff() < 1e-12);
    }

    check_gradients({Q, K, V}, [&](DTape& tp, const std::vector<DVar>& v) {
        return sse_all(tp, tp.temporal_attention(v[0], v[1], v[2], F, N, scale));
    });
}

TEST_CASE("squared-error loss over a row range") {
    Rng rng(31);
    Mat<double> A = randm(rng, 5, 3);
    auto target = std::make_shared<Mat<double>>(randm(rng, 5, 3));

    DTape t;
    DVar a = t.leaf(A, true);
    DVar loss = t.sse_rows(a, target, 2, 3);
    CHECK(t.val(loss)(0, 0) ==
          Catch::Approx((A.bottomRows(3) - target->bottomRows(3)).squaredNorm()).margin(1e-12));
    t.backward(loss);
    Mat<double> g = t.grad(a);
    CHECK(g.topRows(2).cwiseAbs().maxCoeff() == 0.0);
    CHECK((g.bottomRows(3) - 2.0 * (A.bottomRows(3) - target->bottomRows(3)))
              .cwiseAbs()
              .maxCoeff() < 1e-12);

    auto bad = std::make_shared<Mat<double>>(randm(rng, 4, 3));
    CHECK_THROWS_AS(t.sse_rows(a, bad, 0, 2), dim_error);
    CHECK_THROWS_AS(t.sse_rows(a, target, 3, 3), dim_error);
}

TEST_CASE("shared subexpressions accumulate gradients from every use") {
    Rng rng(32);
    Mat<double> A = randm(rng, 3, 3), B = randm(rng, 3, 3), C = randm(rng, 3, 3);
    check_gradients({A, B, C}, [](DTape& tp, const std::vector<DVar>& v) {
        DVar left = tp.matmul(v[0], v[1]);
        DVar right = tp.matmul(v[0], v[2]);  // v[0] feeds two branches
        return sse_all(tp, tp.add(left, right));
    });
}

TEST_CASE("frozen leaves receive no gradient and stop propagation") {
    Rng rng(33);
    Mat<double> A = randm(rng, 3, 3), B = randm(rng, 3, 3);
    DTape t;
    DVar a = t.leaf(A, true), b = t.leaf(B, false);
    DVar prod = t.matmul(a, b);
    CHECK(t.needs_grad(prod));
    DVar loss = sse_all(t, prod);
    t.backward(loss);
    CHECK(t.grad(a).allFinite());
    CHECK_THROWS_AS(t.grad(b), dim_error);

    // a graph with no trainable inputs cannot be differentiated
    t.reset();
    DVar c = t.leaf(A), d = t.leaf(B);
    DVar frozen_loss = sse_all(t, t.matmul(c, d));
    CHECK_FALSE(t.needs_grad(frozen_loss));
    CHECK_THROWS_AS(t.backward(frozen_loss), dim_error);

    // backward demands a scalar root
    t.reset();
    DVar e = t.leaf(A, true);
    CHECK_THROWS_AS(t.backward(e), dim_error);
}

TEST_CASE("a deep composite graph differentiates end to end") {
    Rng rng(34);
    const int n = 4, d = 3;
    Mat<double> X = randm(rng, n, d), Wq = randm(rng, d, d), Wk = randm(rng, d, d),
                Wv = randm(rng, d, d), Wo = randm(rng, d, d), lam = randm(rng, 1, 2);
    double scale = 1.0 / std::sqrt(double(d));

    Builder build = [=](DTape& tp, const std::vector<DVar>& v) {
        DVar q = tp.matmul(v[0], v[1]);
        DVar k = tp.matmul(v[0], v[2]);
        DVar val = tp.matmul(v[0], v[3]);
        std::vector<DTape::AttnGroup> g{{0, n, 0, n, nullptr, 0, 0}};
        DVar att = tp.grouped_attention(q, k, val, g, scale);
        DVar proj = tp.matmul(att, v[4]);
        DVar gated = tp.scale_by_element(proj, tp.row_softmax(v[5]), 0);
        return sse_all(tp, tp.silu(tp.add_scaled(gated, v[0], 0.5)));
    };
    check_gradients({X, Wq, Wk, Wv, Wo, lam}, build);
}
