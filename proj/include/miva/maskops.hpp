#pragma once

#include <cmath>
#include <cstdio>
#include <vector>

#include "autoencoder.hpp"
#include "common.hpp"
#include "resize.hpp"
#include "schedule.hpp"
#include "video.hpp"

namespace miva {

// Per-frame subject confidence maps in [0,1].
template <typename T>
struct MaskSequenceT {
    std::vector<Mat<T>> maps;  // F maps, each Hs x Ws

    int frames() const { return int(maps.size()); }
    void check() const {
        MIVA_CHECK(!maps.empty(), "mask sequence: empty");
        for (auto& m : maps) {
            MIVA_CHECK(m.rows() == maps[0].rows() && m.cols() == maps[0].cols(),
                       "mask sequence: inconsistent map shapes");
            MIVA_CHECK(all_finite(m), "mask sequence: non-finite entries");
        }
    }
};
using MaskSequence = MaskSequenceT<float>;

// One attention-bias entry from a pair of subject confidences:
// log(s_p s_q + (1-s_p)(1-s_q) + eps). Out-of-range confidences are clamped
// with a warning (decoded masks are unbounded before clamping).
template <typename T>
T attention_mask_entry(T s_p, T s_q, T eps) {
    MIVA_CHECK(eps > T(0), "attention_mask_entry: eps must be positive");
    auto clampc = [](T v) {
        if (v < T(0) || v > T(1)) {
            std::fprintf(stderr, "warning: confidence %g outside [0,1], clamping\n", double(v));
            return v < T(0) ? T(0) : T(1);
        }
        return v;
    };
    s_p = clampc(s_p);
    s_q = clampc(s_q);
    return std::log(s_p * s_q + (T(1) - s_p) * (T(1) - s_q) + eps);
}

// Bilinearly align a mask sequence to a token grid and clamp to [0,1].
template <typename T>
MaskSequenceT<T> resize_mask_sequence(const MaskSequenceT<T>& s, int h, int w) {
    s.check();
    MaskSequenceT<T> out;
    out.maps.reserve(s.maps.size());
    for (auto& m : s.maps) {
        Mat<T> r = bilinear_resize(m, h, w);
        r = r.cwiseMax(T(0)).cwiseMin(T(1));
        out.maps.push_back(std::move(r));
    }
    return out;
}

// Full additive attention bias over all (frame, position) token pairs of a
// video: entry ((i,p),(j,q)) = log(S_i[p] S_j[q] + (1-S_i[p])(1-S_j[q]) + eps)
// after bilinear alignment of S to the site's token grid. Attention sites
// slice the (frame,frame) blocks they pair.
template <typename T>
Mat<T> build_attention_bias(const MaskSequenceT<T>& s, int target_h, int target_w, T eps) {
    MIVA_CHECK(target_h >= 1 && target_w >= 1, "build_attention_bias: zero-area target");
    MIVA_CHECK(eps > T(0), "build_attention_bias: eps must be positive");
    MaskSequenceT<T> rs = resize_mask_sequence(s, target_h, target_w);
    int f_count = rs.frames();
    Eigen::Index n = Eigen::Index(target_h) * target_w;
    std::vector<Mat<T>> flat(static_cast<size_t>(f_count));
    for (int f = 0; f < f_count; f++) {
        flat[size_t(f)] =
            Eigen::Map<const Mat<T>>(rs.maps[size_t(f)].data(), n, 1);
    }
    Mat<T> bias(Eigen::Index(f_count) * n, Eigen::Index(f_count) * n);
    for (int i = 0; i < f_count; i++)
        for (int j = 0; j < f_count; j++) {
            const Mat<T>&si = flat[size_t(i)], &sj = flat[size_t(j)];
            bias.block(Eigen::Index(i) * n, Eigen::Index(j) * n, n, n) =
                ((si * sj.transpose()).array() +
                 ((Mat<T>::Ones(n, 1) - si) * (Mat<T>::Ones(n, 1) - sj).transpose()).array() +
                 eps)
                    .log()
                    .matrix();
        }
    return bias;
}

// One-step clean-signal estimate of the mask latents, decoded through the
// mask decoder (which clamps to [0,1]).
template <typename T>
MaskSequenceT<T> one_step_predict_mask(const LatentVideo<T>& s_t, int t, const Mat<T>& eps_hat,
                                       const NoiseSchedule& sched,
                                       const PatchAutoencoder<T>& vae) {
    MIVA_CHECK(t >= 0 && t < sched.T, "one_step_predict_mask: step out of range");
    T a = T(sched.a(t));
    if (a == T(0)) throw numeric_error("one_step_predict_mask: alpha_t = 0 (singular)");
    Mat<T> st = s_t.stacked();
    MIVA_CHECK(eps_hat.rows() == st.rows() && eps_hat.cols() == st.cols(),
               "one_step_predict_mask: eps_hat shape mismatch");
    Mat<T> s0 = (st - T(sched.s(t)) * eps_hat) / a;
    LatentVideo<T> lv = LatentVideo<T>::from_stacked(s0, s_t.F(), s_t.Hl, s_t.Wl);
    MaskSequenceT<T> out;
    out.maps.reserve(lv.frames.size());
    for (auto& fr : lv.frames) out.maps.push_back(vae.decode_mask(fr, lv.Hl, lv.Wl));
    return out;
}

// Cosine-decay probability of substituting ground-truth masks during
// training: p(t) = (1 + cos(pi t / t_max)) / 2.
inline double dropout_prob(long t_train, long t_max) {
    MIVA_CHECK(t_max > 0, "dropout_prob: t_max must be positive");
    MIVA_CHECK(t_train >= 0 && t_train <= t_max, "dropout_prob: t_train out of [0, t_max]");
    return 0.5 * (1.0 + std::cos(3.14159265358979323846 * double(t_train) / double(t_max)));
}

// Per-cell adapter labels: 0 = background, j in 1..n = adapter j's subject.
struct UnifiedMask {
    std::vector<Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> labels;
};

// Cell rule: 0 when no adapter's confidence exceeds 0.5, otherwise the
// largest adapter index among those attaining the maximum confidence.
template <typename T>
UnifiedMask unified_subject_mask(const std::vector<MaskSequenceT<T>>& s_list,
                                 T threshold = T(0.5)) {
    MIVA_CHECK(!s_list.empty(), "unified_subject_mask: empty mask list");
    for (auto& s : s_list) {
        s.check();
        MIVA_CHECK(s.frames() == s_list[0].frames() &&
                       s.maps[0].rows() == s_list[0].maps[0].rows() &&
                       s.maps[0].cols() == s_list[0].maps[0].cols(),
                   "unified_subject_mask: mask sequences must share a shape");
    }
    int f_count = s_list[0].frames();
    Eigen::Index h = s_list[0].maps[0].rows(), w = s_list[0].maps[0].cols();
    UnifiedMask u;
    u.labels.resize(size_t(f_count));
    for (int f = 0; f < f_count; f++) {
        auto& lab = u.labels[size_t(f)];
        lab.resize(h, w);
        for (Eigen::Index y = 0; y < h; y++)
            for (Eigen::Index x = 0; x < w; x++) {
                T best = T(0);
                int arg = 0;
                for (size_t j = 0; j < s_list.size(); j++) {
                    T v = s_list[j].maps[size_t(f)](y, x);
                    if (v >= best) {  // >= picks the largest index on ties
                        best = v;
                        arg = int(j) + 1;
                    }
                }
                lab(y, x) = best > threshold ? arg : 0;
            }
    }
    return u;
}

// Unified bias: log(1[label_p == label_q] + eps) over all token pairs,
// background matching background included.
template <typename T>
Mat<T> unified_attention_bias(const UnifiedMask& u, T eps) {
    MIVA_CHECK(!u.labels.empty(), "unified_attention_bias: empty unified mask");
    MIVA_CHECK(eps > T(0), "unified_attention_bias: eps must be positive");
    int f_count = int(u.labels.size());
    Eigen::Index n = u.labels[0].size();
    T same = std::log(T(1) + eps), diff = std::log(eps);
    Mat<T> bias(Eigen::Index(f_count) * n, Eigen::Index(f_count) * n);
    for (int i = 0; i < f_count; i++)
        for (int j = 0; j < f_count; j++)
            for (Eigen::Index p = 0; p < n; p++) {
                int lp = u.labels[size_t(i)].data()[p];
                for (Eigen::Index q = 0; q < n; q++)
                    bias(Eigen::Index(i) * n + p, Eigen::Index(j) * n + q) =
                        (lp == u.labels[size_t(j)].data()[q]) ? same : diff;
            }
    return bias;
}

// The binary mask handed to plain (non-masked) adapters in a composition:
// 1 on background cells, 0 elsewhere.
template <typename T>
MaskSequenceT<T> background_mask_for_plain_miva(const UnifiedMask& u) {
    MIVA_CHECK(!u.labels.empty(), "background_mask: empty unified mask");
    MaskSequenceT<T> s;
    s.maps.reserve(u.labels.size());
    for (auto& lab : u.labels) {
        Mat<T> m(lab.rows(), lab.cols());
        for (Eigen::Index i = 0; i < lab.size(); i++)
            m.data()[i] = lab.data()[i] == 0 ? T(1) : T(0);
        s.maps.push_back(std::move(m));
    }
    return s;
}

// Cached per-sampling-run mask state: the biases in force plus the DDIM
// iteration indices at which they were (re)built.
template <typename T>
struct MaskCacheT {
    bool valid = false;
    int last_built_step = -1;
    std::vector<int> build_history;
    Mat<T> sa_bias;                       // bias for the base SA site
    std::vector<Mat<T>> adapter_bias;     // per attached adapter (empty mat = none)
    std::vector<MaskSequenceT<T>> masks;  // last predicted S per masked adapter
};
using MaskCache = MaskCacheT<float>;

}  // namespace miva
