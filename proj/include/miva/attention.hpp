#pragma once

#include <cmath>

#include "common.hpp"

namespace miva {

// Plain (non-tape) attention primitives. These are the readable reference
// forms used by tests and by one-shot computations; the training/sampling
// graph uses the fused tape ops instead.

template <typename T>
void softmax_rows_inplace(Mat<T>& s) {
    for (Eigen::Index i = 0; i < s.rows(); i++) {
        T m = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - m).exp();
        s.row(i) /= s.row(i).sum();
    }
}

// softmax(Q Kᵀ / √d_K + bias) V
template <typename T>
Mat<T> attention(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v,
                 const Mat<T>* bias = nullptr) {
    MIVA_CHECK(q.cols() == k.cols(), "attention: q/k dim mismatch (%ld vs %ld)", long(q.cols()),
               long(k.cols()));
    MIVA_CHECK(k.rows() == v.rows(), "attention: k/v rows mismatch");
    if (bias)
        MIVA_CHECK(bias->rows() == q.rows() && bias->cols() == k.rows(),
                   "attention: bias must be %ld x %ld", long(q.rows()), long(k.rows()));
    MIVA_CHECK(all_finite(q) && all_finite(k) && all_finite(v), "attention: non-finite input");
    T scale = T(1) / std::sqrt(T(q.cols()));
    Mat<T> s = q * k.transpose() * scale;
    if (bias) s += *bias;
    softmax_rows_inplace(s);
    Mat<T> out = s * v;
    return out;
}

template <typename T>
struct AttentionParams {
    Mat<T> wq, wk, wv, wo;
};

// Att(f W_Q, f W_K, f W_V) W_O
template <typename T>
Mat<T> self_attention(const Mat<T>& f, const AttentionParams<T>& p) {
    MIVA_CHECK(f.cols() == p.wq.rows(), "self_attention: token dim %ld vs W_Q rows %ld",
               long(f.cols()), long(p.wq.rows()));
    return attention<T>(f * p.wq, f * p.wk, f * p.wv) * p.wo;
}

// Att(f W_Q, c W_K, c W_V) W_O with keys/values from the prompt tokens c.
template <typename T>
Mat<T> cross_attention(const Mat<T>& f, const Mat<T>& c, const AttentionParams<T>& p) {
    MIVA_CHECK(f.cols() == p.wq.rows(), "cross_attention: token dim mismatch");
    MIVA_CHECK(c.cols() == p.wk.rows(), "cross_attention: prompt dim mismatch");
    return attention<T>(f * p.wq, c * p.wk, c * p.wv) * p.wo;
}

// Attention along the frame axis at each spatial site. Rows of x are
// frame-major: frame f occupies rows [f*N, (f+1)*N).
template <typename T>
Mat<T> temporal_self_attention(const Mat<T>& x, const AttentionParams<T>& p, int F, int N) {
    MIVA_CHECK(x.rows() == Eigen::Index(F) * N, "temporal_self_attention: rows != F*N");
    Mat<T> q = x * p.wq, k = x * p.wk, v = x * p.wv;
    T scale = T(1) / std::sqrt(T(q.cols()));
    Mat<T> out(x.rows(), v.cols());
    Mat<T> qg(F, q.cols()), kg(F, k.cols()), vg(F, v.cols());
    for (int site = 0; site < N; site++) {
        for (int f = 0; f < F; f++) {
            qg.row(f) = q.row(Eigen::Index(f) * N + site);
            kg.row(f) = k.row(Eigen::Index(f) * N + site);
            vg.row(f) = v.row(Eigen::Index(f) * N + site);
        }
        Mat<T> s = qg * kg.transpose() * scale;
        softmax_rows_inplace(s);
        Mat<T> og = s * vg;
        for (int f = 0; f < F; f++) out.row(Eigen::Index(f) * N + site) = og.row(f);
    }
    return out * p.wo;
}

}  // namespace miva
