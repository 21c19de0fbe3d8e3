#pragma once

#include <vector>

#include "adapter.hpp"
#include "autodiff.hpp"
#include "common.hpp"
#include "model.hpp"

namespace miva {

// One adapter attached into a forward pass. `cfa_bias` (optional) is a full
// (F*N)x(F*N) additive logit bias sliced at this adapter's CFA sites.
template <typename T>
struct AttachedAdapter {
    const CheckpointT<T>* ck = nullptr;
    T weight = T(1);
    const Mat<T>* cfa_bias = nullptr;
};

// Everything a denoiser forward needs beyond the input tensor. Zero-weight
// adapters must be filtered out by the caller (they are defined to leave no
// trace, biases included).
template <typename T>
struct ForwardPlan {
    const BaseModelT<T>* base = nullptr;
    std::vector<AttachedAdapter<T>> adapters;
    const Mat<T>* sa_bias = nullptr;  // bias on the base SA site (video stream)
    int prompt_pattern = -1;          // >= 0 enables the base prompt-table CA
    bool mask_stream = false;         // route through mask-modality CFA pairs
    bool train_base = false;
    bool train_adapters = false;
};

// Builds the denoiser graph on a tape. One instance per forward pass; the
// recorded `trainable` list maps parameter storage to tape leaves so the
// optimizer can read gradients after backward().
template <typename T>
struct DenoiserGraph {
    using Var = typename Tape<T>::Var;
    using Group = typename Tape<T>::AttnGroup;

    Tape<T>& tp;
    const ForwardPlan<T>& plan;
    const BaseModelT<T>& base;
    std::vector<std::pair<const Mat<T>*, Var>> trainable;

    Var c_t;
    std::vector<std::vector<Var>> lambdas;  // [adapter][block], each 1x2
    double att_scale;

    DenoiserGraph(Tape<T>& tape, const ForwardPlan<T>& p)
        : tp(tape), plan(p), base(*p.base) {
        MIVA_CHECK(plan.base, "forward: base model missing");
        for (auto& a : plan.adapters) {
            MIVA_CHECK(a.ck, "forward: null adapter");
            MIVA_CHECK(a.weight != T(0), "forward: zero-weight adapter must be filtered out");
            if (plan.mask_stream)
                MIVA_CHECK(a.ck->masked, "forward: mask stream requires a masked adapter");
        }
        if (plan.mask_stream)
            MIVA_CHECK(plan.adapters.size() == 1 && !plan.sa_bias && plan.prompt_pattern < 0,
                       "forward: mask stream runs one adapter, unbiased, promptless");
        att_scale = 1.0 / std::sqrt(double(base.md.d));
    }

    Var bind(const Mat<T>& w, bool is_trainable) {
        Var v = tp.leaf(w, is_trainable);
        if (is_trainable) trainable.emplace_back(&w, v);
        return v;
    }

    const CfaPairT<T>& pair_for(const AttachedAdapter<T>& a, int b) const {
        return plan.mask_stream ? a.ck->blocks[size_t(b)].mask_cfa
                                : a.ck->blocks[size_t(b)].video_cfa;
    }

    // Input projection + positional code + broadcast timestep embedding; also
    // precomputes every adapter's per-block lambda weights.
    Var embed(const Mat<T>& x_stacked, int t) {
        const ModelDims& md = base.md;
        MIVA_CHECK(x_stacked.rows() == md.rows() && x_stacked.cols() == md.channels,
                   "forward: input must be %ld x %d", long(md.rows()), md.channels);
        Var x = tp.leaf(x_stacked, false);
        Var h = tp.matmul(x, bind(base.w_in, plan.train_base));
        h = tp.add(h, tp.leaf(base.pos, false));
        Var sin = tp.leaf(sinusoidal_time<T>(t, md.d_t), false);
        c_t = tp.matmul(sin, bind(base.w_time, plan.train_base));
        h = tp.add_row_broadcast(h, c_t);
        Var silu_ct = tp.silu(c_t);
        lambdas.assign(plan.adapters.size(), {});
        for (size_t ai = 0; ai < plan.adapters.size(); ai++)
            for (int b = 0; b < md.blocks; b++) {
                Var phi = bind(pair_for(plan.adapters[ai], b).w_phi, plan.train_adapters);
                lambdas[ai].push_back(tp.row_softmax(tp.matmul(silu_ct, phi)));
            }
        return h;
    }

    Var lora_delta(Var in, const Mat<T>& down, const Mat<T>& up) {
        return tp.matmul(tp.matmul(in, bind(down, plan.train_adapters)),
                         bind(up, plan.train_adapters));
    }

    Var block(Var h, int b) {
        const ModelDims& md = base.md;
        const auto& B = base.blocks[size_t(b)];
        const int F = md.frames, N = md.sites;
        const bool tb = plan.train_base, ta = plan.train_adapters;

        // ---- SA slot: per-frame self-attention plus weighted CFA layers ----
        Var q = tp.matmul(h, bind(B.sa.wq, tb));
        Var k = tp.matmul(h, bind(B.sa.wk, tb));
        Var v = tp.matmul(h, bind(B.sa.wv, tb));
        const Mat<T>* sa_bias = plan.mask_stream ? nullptr : plan.sa_bias;
        std::vector<Group> sa_groups;
        for (int f = 0; f < F; f++)
            sa_groups.push_back(Group{Eigen::Index(f) * N, N, Eigen::Index(f) * N, N, sa_bias,
                                      Eigen::Index(f) * N, Eigen::Index(f) * N});
        Var site = tp.matmul(tp.grouped_attention(q, k, v, std::move(sa_groups), att_scale),
                             bind(B.sa.wo, tb));
        for (size_t ai = 0; ai < plan.adapters.size(); ai++) {
            const auto& a = plan.adapters[ai];
            const CfaPairT<T>& pair = pair_for(a, b);
            const Mat<T>* bias = plan.mask_stream ? nullptr : a.cfa_bias;
            auto cfa_term = [&](const CfaLayerT<T>& l, bool prev_ref, int lambda_idx) {
                Var ql = tp.add(q, lora_delta(h, l.dq_down, l.dq_up));
                std::vector<Group> groups;
                for (int f = 0; f < F; f++) {
                    Eigen::Index kf = prev_ref ? Eigen::Index(f > 0 ? f - 1 : 0) * N : 0;
                    groups.push_back(
                        Group{Eigen::Index(f) * N, N, kf, N, bias, Eigen::Index(f) * N, kf});
                }
                Var att = tp.grouped_attention(ql, k, v, std::move(groups), att_scale);
                Var out = tp.matmul(tp.matmul(att, bind(l.wo_down, ta)), bind(l.wo_up, ta));
                return tp.scale_by_element(out, lambdas[ai][size_t(b)], lambda_idx);
            };
            Var contrib = tp.add(cfa_term(pair.ref1, false, 0), cfa_term(pair.prev, true, 1));
            site = tp.add_scaled(site, contrib, double(a.weight));
        }
        h = tp.add(h, site);

        // ---- CA slot ----
        if (!plan.mask_stream) {
            if (plan.prompt_pattern >= 0) {
                Var table = bind(base.prompt_table, tb);
                Var c = tp.slice_rows(table, Eigen::Index(plan.prompt_pattern) * md.prompt_tokens,
                                      md.prompt_tokens);
                Var cq = tp.matmul(h, bind(B.ca.wq, tb));
                Var ck = tp.matmul(c, bind(B.ca.wk, tb));
                Var cv = tp.matmul(c, bind(B.ca.wv, tb));
                std::vector<Group> g{Group{0, Eigen::Index(F) * N, 0, md.prompt_tokens}};
                Var catt = tp.grouped_attention(cq, ck, cv, std::move(g), att_scale);
                h = tp.add(h, tp.matmul(catt, bind(B.ca.wo, tb)));
            }
            if (!plan.adapters.empty()) {
                // Implicit-prompt CA, weighted residual sum. Without a prompt
                // the base CA contributes nothing, so the site output is just
                // the weighted adapter outputs.
                Var acc;
                Var cq = tp.matmul(h, bind(B.ca.wq, tb));
                for (size_t ai = 0; ai < plan.adapters.size(); ai++) {
                    const auto& a = plan.adapters[ai];
                    Var logits = tp.matmul(cq, bind(a.ck->blocks[size_t(b)].ca_a, ta));
                    Var out = tp.matmul(tp.row_softmax(logits),
                                        bind(a.ck->blocks[size_t(b)].ca_b, ta));
                    if (!acc.valid())
                        acc = a.weight == T(1) ? out : tp.scale(out, double(a.weight));
                    else
                        acc = tp.add_scaled(acc, out, double(a.weight));
                }
                h = tp.add(h, acc);
            }
        }

        // ---- temporal SA slot ----
        Var tq = tp.matmul(h, bind(B.tsa.wq, tb));
        Var tk = tp.matmul(h, bind(B.tsa.wk, tb));
        Var tv = tp.matmul(h, bind(B.tsa.wv, tb));
        bool lora_here = !plan.mask_stream && !plan.adapters.empty();
        if (!lora_here) {
            Var att = tp.temporal_attention(tq, tk, tv, F, N, att_scale);
            h = tp.add(h, tp.matmul(att, bind(B.tsa.wo, tb)));
        } else if (plan.adapters.size() == 1 && plan.adapters[0].weight == T(1)) {
            // Exact single-adapter reduction of the residual combination.
            const TsaLoraT<T>& l = plan.adapters[0].ck->blocks[size_t(b)].tsa;
            Var ql = tp.add(tq, lora_delta(h, l.q_down, l.q_up));
            Var kl = tp.add(tk, lora_delta(h, l.k_down, l.k_up));
            Var vl = tp.add(tv, lora_delta(h, l.v_down, l.v_up));
            Var att = tp.temporal_attention(ql, kl, vl, F, N, att_scale);
            Var out = tp.add(tp.matmul(att, bind(B.tsa.wo, tb)),
                             lora_delta(att, l.o_down, l.o_up));
            h = tp.add(h, out);
        } else {
            Var wo = bind(B.tsa.wo, tb);
            Var base_att = tp.temporal_attention(tq, tk, tv, F, N, att_scale);
            Var base_out = tp.matmul(base_att, wo);
            Var acc;
            for (auto& a : plan.adapters) {
                const TsaLoraT<T>& l = a.ck->blocks[size_t(b)].tsa;
                Var ql = tp.add(tq, lora_delta(h, l.q_down, l.q_up));
                Var kl = tp.add(tk, lora_delta(h, l.k_down, l.k_up));
                Var vl = tp.add(tv, lora_delta(h, l.v_down, l.v_up));
                Var att = tp.temporal_attention(ql, kl, vl, F, N, att_scale);
                Var out = tp.add(tp.matmul(att, wo), lora_delta(att, l.o_down, l.o_up));
                Var diff = tp.add_scaled(out, base_out, -1.0);
                acc = acc.valid() ? tp.add_scaled(acc, diff, double(a.weight))
                                  : tp.scale(diff, double(a.weight));
            }
            h = tp.add(h, tp.add(base_out, acc));
        }
        return h;
    }

    Var output(Var h) { return tp.matmul(h, bind(base.w_out, plan.train_base)); }

    Var run(const Mat<T>& x_stacked, int t) {
        Var h = embed(x_stacked, t);
        for (int b = 0; b < base.md.blocks; b++) h = block(h, b);
        return output(h);
    }
};

// Convenience: plain value-only forward (no gradients), returning the
// predicted noise for stacked input tokens.
template <typename T>
Mat<T> denoiser_forward(Tape<T>& tp, const ForwardPlan<T>& plan, const Mat<T>& x_stacked,
                        int t) {
    tp.reset();
    DenoiserGraph<T> g(tp, plan);
    typename Tape<T>::Var eps = g.run(x_stacked, t);
    return tp.val(eps);
}

}  // namespace miva
