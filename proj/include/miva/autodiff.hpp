#pragma once

#include <deque>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "common.hpp"

namespace miva {

// Eager reverse-mode tape over dense matrices. Values are computed at node
// creation; backward closures run in reverse creation order. Node storage is
// reused across reset() calls so a sampling or training loop allocates only on
// its first iteration. Gradients are only materialized along paths that need
// them (a node needs a gradient iff one of its parents does), so frozen
// sub-graphs cost nothing in the backward pass.
template <typename T>
struct Tape {
    struct Node {
        Mat<T> val;
        Mat<T> grad;
        bool grad_ready = false;
        bool needs_grad = false;
        std::function<void(Tape&)> back;
    };

    struct Var {
        int id = -1;
        bool valid() const { return id >= 0; }
    };

    std::deque<Node> nodes;  // deque: appending must not invalidate Node references held by ops
    int cursor = 0;

    void reset() { cursor = 0; }

    Node& node(Var v) { return nodes[size_t(v.id)]; }
    const Mat<T>& val(Var v) const { return nodes[size_t(v.id)].val; }
    Mat<T>& val_mut(Var v) { return nodes[size_t(v.id)].val; }
    const Mat<T>& grad(Var v) const {
        MIVA_CHECK(nodes[size_t(v.id)].grad_ready, "gradient not computed for node %d", v.id);
        return nodes[size_t(v.id)].grad;
    }
    bool needs_grad(Var v) const { return nodes[size_t(v.id)].needs_grad; }

    Var fresh(Eigen::Index r, Eigen::Index c, bool ng) {
        if (cursor == int(nodes.size())) nodes.emplace_back();
        Node& n = nodes[size_t(cursor)];
        if (n.val.rows() != r || n.val.cols() != c) n.val.resize(r, c);
        n.grad_ready = false;
        n.needs_grad = ng;
        n.back = nullptr;
        return Var{cursor++};
    }

    // Accumulate into a node's gradient buffer, zero-initializing lazily.
    template <typename Expr>
    void accum(Var v, const Expr& e) {
        Node& n = nodes[size_t(v.id)];
        if (!n.needs_grad) return;
        if (!n.grad_ready) {
            if (n.grad.rows() != n.val.rows() || n.grad.cols() != n.val.cols())
                n.grad.resize(n.val.rows(), n.val.cols());
            n.grad.noalias() = e;
            n.grad_ready = true;
        } else {
            n.grad.noalias() += e;
        }
    }

    Var leaf(const Mat<T>& m, bool trainable = false) {
        Var v = fresh(m.rows(), m.cols(), trainable);
        node(v).val = m;
        return v;
    }

    Var zeros(Eigen::Index r, Eigen::Index c) {
        Var v = fresh(r, c, false);
        node(v).val.setZero();
        return v;
    }

    // C = scale * opA(A) * opB(B)
    Var matmul(Var a, Var b, bool ta = false, bool tb = false, double scale = 1.0) {
        const Mat<T>&A = val(a), &B = val(b);
        Eigen::Index r = ta ? A.cols() : A.rows();
        Eigen::Index ci = ta ? A.rows() : A.cols();
        Eigen::Index ci2 = tb ? B.cols() : B.rows();
        Eigen::Index c = tb ? B.rows() : B.cols();
        MIVA_CHECK(ci == ci2, "matmul: inner dims %ld vs %ld", long(ci), long(ci2));
        bool ng = needs_grad(a) || needs_grad(b);
        Var out = fresh(r, c, ng);
        T s = static_cast<T>(scale);
        Mat<T>& C = node(out).val;
        if (!ta && !tb) C.noalias() = A * B;
        else if (!ta && tb) C.noalias() = A * B.transpose();
        else if (ta && !tb) C.noalias() = A.transpose() * B;
        else C.noalias() = A.transpose() * B.transpose();
        if (s != T(1)) C *= s;
        if (ng)
            node(out).back = [this, a, b, out, ta, tb, s](Tape& t) {
                const Mat<T>& dC = t.grad(out);
                const Mat<T>&A2 = t.val(a), &B2 = t.val(b);
                if (t.needs_grad(a)) {
                    if (!ta && !tb) t.accum(a, (dC * B2.transpose() * s));
                    else if (!ta && tb) t.accum(a, (dC * B2 * s));
                    else if (ta && !tb) t.accum(a, (B2 * dC.transpose() * s));
                    else t.accum(a, (B2.transpose() * dC.transpose() * s));
                }
                if (t.needs_grad(b)) {
                    if (!ta && !tb) t.accum(b, (A2.transpose() * dC * s));
                    else if (!ta && tb) t.accum(b, (dC.transpose() * A2 * s));
                    else if (ta && !tb) t.accum(b, (A2 * dC * s));
                    else t.accum(b, (dC.transpose() * A2.transpose() * s));
                }
            };
        return out;
    }

    Var add(Var a, Var b) { return add_scaled(a, b, 1.0); }

    // C = A + s * B
    Var add_scaled(Var a, Var b, double scale) {
        const Mat<T>&A = val(a), &B = val(b);
        MIVA_CHECK(A.rows() == B.rows() && A.cols() == B.cols(), "add: shape mismatch");
        bool ng = needs_grad(a) || needs_grad(b);
        Var out = fresh(A.rows(), A.cols(), ng);
        T s = static_cast<T>(scale);
        node(out).val = A + s * B;
        if (ng)
            node(out).back = [this, a, b, out, s](Tape& t) {
                const Mat<T>& dC = t.grad(out);
                t.accum(a, dC);
                t.accum(b, (dC * s));
            };
        return out;
    }

    // C = s * A
    Var scale(Var a, double s_) {
        const Mat<T>& A = val(a);
        bool ng = needs_grad(a);
        Var out = fresh(A.rows(), A.cols(), ng);
        T s = static_cast<T>(s_);
        node(out).val = A * s;
        if (ng)
            node(out).back = [this, a, out, s](Tape& t) { t.accum(a, (t.grad(out) * s)); };
        return out;
    }

    // C = vec(0, idx) * A  (scalar element times matrix)
    Var scale_by_element(Var a, Var vec, int idx) {
        const Mat<T>& A = val(a);
        MIVA_CHECK(val(vec).rows() == 1 && idx < val(vec).cols(), "scale_by_element: bad index");
        bool ng = needs_grad(a) || needs_grad(vec);
        Var out = fresh(A.rows(), A.cols(), ng);
        T s = val(vec)(0, idx);
        node(out).val = A * s;
        if (ng)
            node(out).back = [this, a, vec, out, idx, s](Tape& t) {
                const Mat<T>& dC = t.grad(out);
                t.accum(a, (dC * s));
                if (t.needs_grad(vec)) {
                    Mat<T> g = Mat<T>::Zero(1, t.val(vec).cols());
                    g(0, idx) = (t.val(a).cwiseProduct(dC)).sum();
                    t.accum(vec, g);
                }
            };
        return out;
    }

    // Every row of A plus the 1 x d row vector v.
    Var add_row_broadcast(Var a, Var v) {
        const Mat<T>&A = val(a), &V = val(v);
        MIVA_CHECK(V.rows() == 1 && V.cols() == A.cols(), "add_row_broadcast: shape mismatch");
        bool ng = needs_grad(a) || needs_grad(v);
        Var out = fresh(A.rows(), A.cols(), ng);
        node(out).val = A.rowwise() + V.row(0);
        if (ng)
            node(out).back = [this, a, v, out](Tape& t) {
                const Mat<T>& dC = t.grad(out);
                t.accum(a, dC);
                if (t.needs_grad(v)) t.accum(v, dC.colwise().sum());
            };
        return out;
    }

    Var row_softmax(Var a) {
        const Mat<T>& A = val(a);
        bool ng = needs_grad(a);
        Var out = fresh(A.rows(), A.cols(), ng);
        Mat<T>& P = node(out).val;
        for (Eigen::Index i = 0; i < A.rows(); i++) {
            T m = A.row(i).maxCoeff();
            P.row(i) = (A.row(i).array() - m).exp();
            P.row(i) /= P.row(i).sum();
        }
        if (ng)
            node(out).back = [this, a, out](Tape& t) {
                const Mat<T>&P2 = t.val(out), &dP = t.grad(out);
                Mat<T> dS(P2.rows(), P2.cols());
                for (Eigen::Index i = 0; i < P2.rows(); i++) {
                    T dot = P2.row(i).dot(dP.row(i));
                    dS.row(i) = P2.row(i).cwiseProduct(
                        dP.row(i) - Mat<T>::Constant(1, P2.cols(), dot));
                }
                t.accum(a, dS);
            };
        return out;
    }

    Var silu(Var a) {
        const Mat<T>& A = val(a);
        bool ng = needs_grad(a);
        Var out = fresh(A.rows(), A.cols(), ng);
        node(out).val =
            A.array().cwiseProduct((T(1) / (T(1) + (-A.array()).exp())).matrix().array());
        if (ng)
            node(out).back = [this, a, out](Tape& t) {
                const Mat<T>& A2 = t.val(a);
                auto sig = (T(1) / (T(1) + (-A2.array()).exp()));
                Mat<T> d =
                    (sig * (T(1) + A2.array() * (T(1) - sig))).matrix().cwiseProduct(t.grad(out));
                t.accum(a, d);
            };
        return out;
    }

    Var slice_rows(Var a, Eigen::Index r0, Eigen::Index n) {
        const Mat<T>& A = val(a);
        MIVA_CHECK(r0 >= 0 && r0 + n <= A.rows(), "slice_rows: range out of bounds");
        bool ng = needs_grad(a);
        Var out = fresh(n, A.cols(), ng);
        node(out).val = A.middleRows(r0, n);
        if (ng)
            node(out).back = [this, a, out, r0, n](Tape& t) {
                Node& na = t.node(a);
                if (!na.grad_ready) {
                    if (na.grad.rows() != na.val.rows() || na.grad.cols() != na.val.cols())
                        na.grad.resize(na.val.rows(), na.val.cols());
                    na.grad.setZero();
                    na.grad_ready = true;
                }
                na.grad.middleRows(r0, n) += t.grad(out);
            };
        return out;
    }

    // Grouped attention: for each group g, queries are rows [q0, q0+nq) of Q
    // and keys/values rows [k0, k0+nk) of K/V; logits get `scale` and an
    // optional constant additive bias block. Softmax matrices are saved for
    // the backward pass. The bias is a constant: no gradient flows through it.
    struct AttnGroup {
        Eigen::Index q0, nq, k0, nk;
        const Mat<T>* bias = nullptr;  // full bias matrix, or null
        Eigen::Index br0 = 0, bc0 = 0;  // top-left of this group's bias block
    };

    Var grouped_attention(Var q, Var k, Var v, std::vector<AttnGroup> groups, double scale_) {
        const Mat<T>&Q = val(q), &K = val(k), &V = val(v);
        MIVA_CHECK(Q.cols() == K.cols(), "grouped_attention: q/k dim mismatch");
        MIVA_CHECK(K.rows() == V.rows(), "grouped_attention: k/v row mismatch");
        bool ng = needs_grad(q) || needs_grad(k) || needs_grad(v);
        Var out = fresh(Q.rows(), V.cols(), ng);
        T s = static_cast<T>(scale_);
        auto probs = std::make_shared<std::vector<Mat<T>>>();
        probs->reserve(groups.size());
        Mat<T>& O = node(out).val;
        for (auto& g : groups) {
            Mat<T> S(g.nq, g.nk);
            S.noalias() = Q.middleRows(g.q0, g.nq) * K.middleRows(g.k0, g.nk).transpose();
            S *= s;
            if (g.bias) S += g.bias->block(g.br0, g.bc0, g.nq, g.nk);
            for (Eigen::Index i = 0; i < S.rows(); i++) {
                T m = S.row(i).maxCoeff();
                S.row(i) = (S.row(i).array() - m).exp();
                S.row(i) /= S.row(i).sum();
            }
            O.middleRows(g.q0, g.nq).noalias() = S * V.middleRows(g.k0, g.nk);
            if (ng) probs->push_back(std::move(S));
        }
        if (ng)
            node(out).back = [this, q, k, v, out, groups = std::move(groups), probs, s](Tape& t) {
                const Mat<T>& dO = t.grad(out);
                const Mat<T>&Q2 = t.val(q), &K2 = t.val(k), &V2 = t.val(v);
                bool gq = t.needs_grad(q), gk = t.needs_grad(k), gv = t.needs_grad(v);
                Mat<T> dQ, dK, dV;
                if (gq) dQ = Mat<T>::Zero(Q2.rows(), Q2.cols());
                if (gk) dK = Mat<T>::Zero(K2.rows(), K2.cols());
                if (gv) dV = Mat<T>::Zero(V2.rows(), V2.cols());
                for (size_t gi = 0; gi < groups.size(); gi++) {
                    const auto& g = groups[gi];
                    const Mat<T>& P = (*probs)[gi];
                    auto dOg = dO.middleRows(g.q0, g.nq);
                    if (gv) dV.middleRows(g.k0, g.nk).noalias() += P.transpose() * dOg;
                    if (gq || gk) {
                        Mat<T> dP(g.nq, g.nk);
                        dP.noalias() = dOg * V2.middleRows(g.k0, g.nk).transpose();
                        Mat<T> dS(g.nq, g.nk);
                        for (Eigen::Index i = 0; i < g.nq; i++) {
                            T dot = P.row(i).dot(dP.row(i));
                            dS.row(i) = P.row(i).cwiseProduct(
                                dP.row(i) - Mat<T>::Constant(1, g.nk, dot));
                        }
                        if (gq)
                            dQ.middleRows(g.q0, g.nq).noalias() +=
                                dS * K2.middleRows(g.k0, g.nk) * s;
                        if (gk)
                            dK.middleRows(g.k0, g.nk).noalias() +=
                                dS.transpose() * Q2.middleRows(g.q0, g.nq) * s;
                    }
                }
                if (gq) t.accum(q, dQ);
                if (gk) t.accum(k, dK);
                if (gv) t.accum(v, dV);
            };
        return out;
    }

    // Attention along the frame axis at each spatial site: rows of Q/K/V are
    // frame-major (F blocks of N rows); site s attends over rows
    // {s, s+N, ..., s+(F-1)N}.
    Var temporal_attention(Var q, Var k, Var v, int F, int N, double scale_) {
        const Mat<T>&Q = val(q), &K = val(k), &V = val(v);
        MIVA_CHECK(Q.rows() == Eigen::Index(F) * N && K.rows() == Q.rows() && V.rows() == Q.rows(),
                   "temporal_attention: row count mismatch");
        bool ng = needs_grad(q) || needs_grad(k) || needs_grad(v);
        Var out = fresh(Q.rows(), V.cols(), ng);
        T s = static_cast<T>(scale_);
        Eigen::Index d = Q.cols(), dv = V.cols();
        auto probs = std::make_shared<Mat<T>>(Eigen::Index(N) * F, F);
        Mat<T>& O = node(out).val;
        Mat<T> qg(F, d), kg(F, d), vg(F, dv), P(F, F);
        for (int site = 0; site < N; site++) {
            for (int f = 0; f < F; f++) {
                qg.row(f) = Q.row(Eigen::Index(f) * N + site);
                kg.row(f) = K.row(Eigen::Index(f) * N + site);
                vg.row(f) = V.row(Eigen::Index(f) * N + site);
            }
            P.noalias() = qg * kg.transpose();
            P *= s;
            for (int i = 0; i < F; i++) {
                T m = P.row(i).maxCoeff();
                P.row(i) = (P.row(i).array() - m).exp();
                P.row(i) /= P.row(i).sum();
            }
            Mat<T> og = P * vg;
            for (int f = 0; f < F; f++) O.row(Eigen::Index(f) * N + site) = og.row(f);
            if (ng) probs->middleRows(Eigen::Index(site) * F, F) = P;
        }
        if (ng)
            node(out).back = [this, q, k, v, out, F, N, probs, s](Tape& t) {
                const Mat<T>& dO = t.grad(out);
                const Mat<T>&Q2 = t.val(q), &K2 = t.val(k), &V2 = t.val(v);
                bool gq = t.needs_grad(q), gk = t.needs_grad(k), gv = t.needs_grad(v);
                Eigen::Index d = Q2.cols(), dv = V2.cols();
                Mat<T> dQ, dK, dV;
                if (gq) dQ.resize(Q2.rows(), d);
                if (gk) dK.resize(K2.rows(), d);
                if (gv) dV.resize(V2.rows(), dv);
                Mat<T> qg(F, d), kg(F, d), vg(F, dv), dog(F, dv);
                for (int site = 0; site < N; site++) {
                    const auto P = probs->middleRows(Eigen::Index(site) * F, F);
                    for (int f = 0; f < F; f++) {
                        qg.row(f) = Q2.row(Eigen::Index(f) * N + site);
                        kg.row(f) = K2.row(Eigen::Index(f) * N + site);
                        vg.row(f) = V2.row(Eigen::Index(f) * N + site);
                        dog.row(f) = dO.row(Eigen::Index(f) * N + site);
                    }
                    if (gv) {
                        Mat<T> dvg = P.transpose() * dog;
                        for (int f = 0; f < F; f++) dV.row(Eigen::Index(f) * N + site) = dvg.row(f);
                    }
                    if (gq || gk) {
                        Mat<T> dP = dog * vg.transpose();
                        Mat<T> dS(F, F);
                        for (int i = 0; i < F; i++) {
                            T dot = P.row(i).dot(dP.row(i));
                            dS.row(i) =
                                P.row(i).cwiseProduct(dP.row(i) - Mat<T>::Constant(1, F, dot));
                        }
                        if (gq) {
                            Mat<T> dqg = dS * kg * s;
                            for (int f = 0; f < F; f++)
                                dQ.row(Eigen::Index(f) * N + site) = dqg.row(f);
                        }
                        if (gk) {
                            Mat<T> dkg = dS.transpose() * qg * s;
                            for (int f = 0; f < F; f++)
                                dK.row(Eigen::Index(f) * N + site) = dkg.row(f);
                        }
                    }
                }
                if (gq) t.accum(q, dQ);
                if (gk) t.accum(k, dK);
                if (gv) t.accum(v, dV);
            };
        return out;
    }

    // Sum of squared errors against a constant target over rows [r0, r0+n).
    Var sse_rows(Var a, std::shared_ptr<const Mat<T>> target, Eigen::Index r0, Eigen::Index n) {
        const Mat<T>& A = val(a);
        MIVA_CHECK(target->rows() == A.rows() && target->cols() == A.cols(),
                   "sse_rows: target shape mismatch");
        MIVA_CHECK(r0 >= 0 && r0 + n <= A.rows(), "sse_rows: range out of bounds");
        bool ng = needs_grad(a);
        Var out = fresh(1, 1, ng);
        node(out).val(0, 0) =
            (A.middleRows(r0, n) - target->middleRows(r0, n)).squaredNorm();
        if (ng)
            node(out).back = [this, a, target, out, r0, n](Tape& t) {
                T g = t.grad(out)(0, 0);
                Node& na = t.node(a);
                if (!na.grad_ready) {
                    if (na.grad.rows() != na.val.rows() || na.grad.cols() != na.val.cols())
                        na.grad.resize(na.val.rows(), na.val.cols());
                    na.grad.setZero();
                    na.grad_ready = true;
                }
                na.grad.middleRows(r0, n) +=
                    (t.val(a).middleRows(r0, n) - target->middleRows(r0, n)) * (T(2) * g);
            };
        return out;
    }

    void backward(Var root) {
        Node& r = node(root);
        MIVA_CHECK(r.val.rows() == 1 && r.val.cols() == 1, "backward: root must be scalar");
        MIVA_CHECK(r.needs_grad, "backward: root does not depend on any trainable leaf");
        if (r.grad.rows() != 1 || r.grad.cols() != 1) r.grad.resize(1, 1);
        r.grad(0, 0) = T(1);
        r.grad_ready = true;
        for (int i = root.id; i >= 0; i--) {
            Node& n = nodes[size_t(i)];
            if (n.grad_ready && n.back) n.back(*this);
        }
    }
};

}  // namespace miva
