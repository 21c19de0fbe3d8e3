#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "attention.hpp"
#include "common.hpp"
#include "model.hpp"
#include "rng.hpp"

namespace miva {

// One cross-frame attention layer's trainable weights: an additive low-rank
// update to the frozen W_Q plus a low-rank output projection whose up-factor
// starts at zero (so the layer contributes nothing until trained). Keys and
// values reuse the frozen base SA projections of the same block.
template <typename T>
struct CfaLayerT {
    Mat<T> dq_down, dq_up;  // d x r, r x d ; delta on W_Q
    Mat<T> wo_down, wo_up;  // d x r, r x d ; low-rank W_O, up = 0 at init
};

// The pair of CFA layers living in one SA slot (reference frame 1 and the
// previous frame) together with that slot's adaptive weighting module.
template <typename T>
struct CfaPairT {
    CfaLayerT<T> ref1, prev;
    Mat<T> w_phi;  // d_t x 2, zero-init => lambda = (0.5, 0.5)
};

// Low-rank updates for all four projections of one temporal-SA site.
template <typename T>
struct TsaLoraT {
    Mat<T> q_down, q_up, k_down, k_up, v_down, v_up, o_down, o_up;
};

template <typename T>
struct BlockAdapterT {
    CfaPairT<T> video_cfa;
    Mat<T> ca_a, ca_b;  // implicit-prompt CA factors: A d x L, B L x d
    TsaLoraT<T> tsa;
    CfaPairT<T> mask_cfa;  // present (and visited) only when masked
};

// A full MIVA / M-MIVA parameter set plus identification metadata.
template <typename T>
struct CheckpointT {
    bool masked = false;
    ModelDims md;
    std::string pattern;
    uint64_t base_hash = 0;
    std::vector<BlockAdapterT<T>> blocks;

    static CheckpointT make(const ModelDims& md, bool masked, uint64_t seed,
                            const std::string& pattern_name) {
        CheckpointT c;
        c.masked = masked;
        c.md = md;
        c.pattern = pattern_name;
        Rng rng(split_seed(seed, masked ? 0x6d6d697661 : 0x6d697661));
        T dstd = T(1) / std::sqrt(T(md.d));
        auto down = [&](int r) {
            Mat<T> w(md.d, r);
            rng.fill_gaussian(w, double(dstd));
            return w;
        };
        auto layer = [&]() {
            CfaLayerT<T> l;
            l.dq_down = down(md.r_cfa);
            l.dq_up = Mat<T>::Zero(md.r_cfa, md.d);
            l.wo_down = down(md.r_cfa);
            l.wo_up = Mat<T>::Zero(md.r_cfa, md.d);
            return l;
        };
        c.blocks.resize(size_t(md.blocks));
        for (auto& b : c.blocks) {
            b.video_cfa.ref1 = layer();
            b.video_cfa.prev = layer();
            b.video_cfa.w_phi = Mat<T>::Zero(md.d_t, 2);
            Mat<T> a(md.d, md.r_ca);
            rng.fill_gaussian(a, double(dstd));
            b.ca_a = a;
            b.ca_b = Mat<T>::Zero(md.r_ca, md.d);
            b.tsa.q_down = down(md.r_tsa);
            b.tsa.q_up = Mat<T>::Zero(md.r_tsa, md.d);
            b.tsa.k_down = down(md.r_tsa);
            b.tsa.k_up = Mat<T>::Zero(md.r_tsa, md.d);
            b.tsa.v_down = down(md.r_tsa);
            b.tsa.v_up = Mat<T>::Zero(md.r_tsa, md.d);
            b.tsa.o_down = down(md.r_tsa);
            b.tsa.o_up = Mat<T>::Zero(md.r_tsa, md.d);
            if (masked) {
                // The mask-modality CFA pair starts as an exact copy of the
                // video pair (identical initialization), then trains apart.
                b.mask_cfa = b.video_cfa;
            }
        }
        return c;
    }

    template <typename Fn>
    void visit_params(Fn&& fn) {
        for (size_t b = 0; b < blocks.size(); b++) {
            std::string pre = "block" + std::to_string(b) + ".";
            auto cfa_layer = [&](const std::string& lp, CfaLayerT<T>& l) {
                fn((lp + ".dq_down").c_str(), l.dq_down);
                fn((lp + ".dq_up").c_str(), l.dq_up);
                fn((lp + ".wo_down").c_str(), l.wo_down);
                fn((lp + ".wo_up").c_str(), l.wo_up);
            };
            auto cfa_pair = [&](const std::string& pp, CfaPairT<T>& p) {
                cfa_layer(pp + ".ref1", p.ref1);
                cfa_layer(pp + ".prev", p.prev);
                fn((pp + ".w_phi").c_str(), p.w_phi);
            };
            cfa_pair(pre + "video", blocks[b].video_cfa);
            fn((pre + "ca_a").c_str(), blocks[b].ca_a);
            fn((pre + "ca_b").c_str(), blocks[b].ca_b);
            TsaLoraT<T>& t = blocks[b].tsa;
            fn((pre + "tsa.q_down").c_str(), t.q_down);
            fn((pre + "tsa.q_up").c_str(), t.q_up);
            fn((pre + "tsa.k_down").c_str(), t.k_down);
            fn((pre + "tsa.k_up").c_str(), t.k_up);
            fn((pre + "tsa.v_down").c_str(), t.v_down);
            fn((pre + "tsa.v_up").c_str(), t.v_up);
            fn((pre + "tsa.o_down").c_str(), t.o_down);
            fn((pre + "tsa.o_up").c_str(), t.o_up);
            if (masked) cfa_pair(pre + "mask", blocks[b].mask_cfa);
        }
    }
    template <typename Fn>
    void visit_params(Fn&& fn) const {
        const_cast<CheckpointT*>(this)->visit_params(
            [&](const char* n, Mat<T>& m) { fn(n, static_cast<const Mat<T>&>(m)); });
    }

    long param_count() const {
        long n = 0;
        visit_params([&](const char*, const Mat<T>& m) { n += long(m.size()); });
        return n;
    }

    template <typename U>
    CheckpointT<U> cast() const {
        CheckpointT<U> c;
        c.masked = masked;
        c.md = md;
        c.pattern = pattern;
        c.base_hash = base_hash;
        c.blocks.resize(blocks.size());
        auto& src = *this;
        for (size_t b = 0; b < blocks.size(); b++) {
            auto cl = [](const CfaLayerT<T>& l) {
                return CfaLayerT<U>{l.dq_down.template cast<U>(), l.dq_up.template cast<U>(),
                                    l.wo_down.template cast<U>(), l.wo_up.template cast<U>()};
            };
            auto cp = [&](const CfaPairT<T>& p) {
                return CfaPairT<U>{cl(p.ref1), cl(p.prev), p.w_phi.template cast<U>()};
            };
            c.blocks[b].video_cfa = cp(src.blocks[b].video_cfa);
            c.blocks[b].ca_a = src.blocks[b].ca_a.template cast<U>();
            c.blocks[b].ca_b = src.blocks[b].ca_b.template cast<U>();
            const TsaLoraT<T>& t = src.blocks[b].tsa;
            c.blocks[b].tsa = TsaLoraT<U>{
                t.q_down.template cast<U>(), t.q_up.template cast<U>(),
                t.k_down.template cast<U>(), t.k_up.template cast<U>(),
                t.v_down.template cast<U>(), t.v_up.template cast<U>(),
                t.o_down.template cast<U>(), t.o_up.template cast<U>()};
            if (masked) c.blocks[b].mask_cfa = cp(src.blocks[b].mask_cfa);
        }
        return c;
    }
};

using Checkpoint = CheckpointT<float>;

// ---- Reference (non-tape) adapter ops ----

// (lambda2, lambda3) = softmax(SiLU(c_t) W_phi)
template <typename T>
Mat<T> adaptive_weights(const Mat<T>& c_t, const Mat<T>& w_phi) {
    MIVA_CHECK(c_t.rows() == 1 && c_t.cols() == w_phi.rows(),
               "adaptive_weights: c_t dim %ld vs W_phi rows %ld", long(c_t.cols()),
               long(w_phi.rows()));
    MIVA_CHECK(w_phi.cols() == 2, "adaptive_weights: W_phi must have 2 columns");
    Mat<T> s = c_t.array().cwiseProduct(T(1) / (T(1) + (-c_t.array()).exp()));
    Mat<T> logits = s * w_phi;
    softmax_rows_inplace(logits);
    return logits;
}

// CFA(f_i, f_ref) = Att(f_i (W_Q + dq), f_ref W_K, f_ref W_V) (wo_down wo_up)
// with frozen W_Q/W_K/W_V taken from the block's base SA.
template <typename T>
Mat<T> cfa(const Mat<T>& f_i, const Mat<T>& f_ref, const AttentionParams<T>& base,
           const CfaLayerT<T>& w, const Mat<T>* bias = nullptr) {
    MIVA_CHECK(f_i.cols() == base.wq.rows() && f_ref.cols() == base.wk.rows(),
               "cfa: token dims incompatible with base projections");
    Mat<T> q = f_i * base.wq + (f_i * w.dq_down) * w.dq_up;
    Mat<T> att = attention<T>(q, f_ref * base.wk, f_ref * base.wv, bias);
    return (att * w.wo_down) * w.wo_up;
}

// Eq.-2 slot output: SA(f_i) + lambda2 CFA_{i,1} + lambda3 CFA_{i,prev};
// lambda1 is the literal constant 1.
template <typename T>
Mat<T> augmented_sa(const Mat<T>& f_i, const Mat<T>& f_1, const Mat<T>& f_prev,
                    const AttentionParams<T>& base, const CfaLayerT<T>& w1,
                    const CfaLayerT<T>& w_prev, const Mat<T>& lambda) {
    MIVA_CHECK(f_i.rows() == f_1.rows() && f_i.rows() == f_prev.rows() &&
                   f_i.cols() == f_1.cols() && f_i.cols() == f_prev.cols(),
               "augmented_sa: frame token arrays must share a shape");
    MIVA_CHECK(lambda.rows() == 1 && lambda.cols() == 2, "augmented_sa: lambda must be 1x2");
    Mat<T> out = self_attention(f_i, base);
    out += lambda(0, 0) * cfa(f_i, f_1, base, w1);
    out += lambda(0, 1) * cfa(f_i, f_prev, base, w_prev);
    return out;
}

// Factorized prompt-free CA: softmax(f W_Q A) B. The 1/sqrt(d) logit scale of
// standard CA is folded into A (A is trained; when A is constructed from an
// explicit prompt the factor appears explicitly).
template <typename T>
Mat<T> implicit_ca(const Mat<T>& f, const Mat<T>& wq_frozen, const Mat<T>& a, const Mat<T>& b) {
    MIVA_CHECK(f.cols() == wq_frozen.rows(), "implicit_ca: token dim mismatch");
    MIVA_CHECK(wq_frozen.cols() == a.rows() && a.cols() == b.rows(),
               "implicit_ca: factor shapes incompatible");
    Mat<T> logits = (f * wq_frozen) * a;
    softmax_rows_inplace(logits);
    return logits * b;
}

// Build the implicit-CA factors that exactly reproduce cross_attention(f, c)
// for an explicit prompt c: A = (1/sqrt(d)) W_K^T c^T, B = c W_V W_O.
template <typename T>
void factorize_prompt(const Mat<T>& c, const AttentionParams<T>& base, Mat<T>& a_out,
                      Mat<T>& b_out) {
    T inv_sqrt_d = T(1) / std::sqrt(T(base.wk.cols()));
    a_out = inv_sqrt_d * base.wk.transpose() * c.transpose();
    b_out = (c * base.wv) * base.wo;
}

// Temporal SA with every projection low-rank updated: W := W + down*up.
template <typename T>
Mat<T> apply_tsa_lora(const Mat<T>& x, const AttentionParams<T>& base, const TsaLoraT<T>& l,
                      int F, int N) {
    MIVA_CHECK(x.rows() == Eigen::Index(F) * N, "apply_tsa_lora: rows != F*N");
    MIVA_CHECK(base.wq.rows() == l.q_down.rows() && l.q_down.cols() == l.q_up.rows(),
               "apply_tsa_lora: rank/shape mismatch");
    Mat<T> q = x * base.wq + (x * l.q_down) * l.q_up;
    Mat<T> k = x * base.wk + (x * l.k_down) * l.k_up;
    Mat<T> v = x * base.wv + (x * l.v_down) * l.v_up;
    T scale = T(1) / std::sqrt(T(q.cols()));
    Mat<T> att(x.rows(), v.cols());
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
        for (int f = 0; f < F; f++) att.row(Eigen::Index(f) * N + site) = og.row(f);
    }
    return att * base.wo + (att * l.o_down) * l.o_up;
}

// A non-owning pairing of a frozen base and an adapter checkpoint. Attach
// validates compatibility; detach simply drops the handle (the base is never
// written).
template <typename T>
struct AdaptedModelT {
    const BaseModelT<T>* base = nullptr;
    const CheckpointT<T>* ckpt = nullptr;
};

template <typename T>
AdaptedModelT<T> attach(const BaseModelT<T>& base, const CheckpointT<T>& ckpt) {
    MIVA_CHECK(ckpt.md.d == base.md.d && ckpt.md.blocks == base.md.blocks &&
                   ckpt.md.frames == base.md.frames && ckpt.md.channels == base.md.channels,
               "attach: checkpoint dims (d=%d, blocks=%d, F=%d, C=%d) do not match base "
               "(d=%d, blocks=%d, F=%d, C=%d)",
               ckpt.md.d, ckpt.md.blocks, ckpt.md.frames, ckpt.md.channels, base.md.d,
               base.md.blocks, base.md.frames, base.md.channels);
    if (ckpt.base_hash != 0)
        MIVA_CHECK(ckpt.base_hash == base.param_hash(),
                   "attach: checkpoint was trained against a different base (hash mismatch)");
    return AdaptedModelT<T>{&base, &ckpt};
}

template <typename T>
const BaseModelT<T>& detach(AdaptedModelT<T>& h) {
    const BaseModelT<T>& b = *h.base;
    h.ckpt = nullptr;
    return b;
}

}  // namespace miva
