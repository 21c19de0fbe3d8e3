#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <vector>

#include "autoencoder.hpp"
#include "dct.hpp"
#include "forward.hpp"
#include "maskops.hpp"
#include "schedule.hpp"
#include "video.hpp"

namespace miva {

// eps1 stays; every later frame's noise is blended toward it:
// eps_i <- alpha * eps_1 + (1 - alpha) * eps_i.
template <typename T>
void shared_noise(std::vector<Mat<T>>& eps, double alpha) {
    MIVA_CHECK(eps.size() >= 2, "shared_noise: need at least 2 frames");
    MIVA_CHECK(alpha >= 0.0 && alpha <= 1.0, "shared_noise: alpha must be in [0,1]");
    for (size_t i = 1; i < eps.size(); i++)
        eps[i] = (T(alpha) * eps[0] + T(1.0 - alpha) * eps[i]).eval();
}

// Initial sampling state for one latent image: draw per-frame noise, blend it
// toward frame 1's noise, forward-diffuse the image to the terminal step, and
// splice the diffused image's low-frequency band into every later frame in
// the 3-D DCT domain. Frame 1 of the result is the clean latent itself (it
// stays pinned through sampling).
template <typename T>
LatentVideo<T> preprocess(const Mat<T>& x_img, const ModelDims& md, const NoiseSchedule& sched,
                          double alpha, double rho, Rng& rng) {
    MIVA_CHECK(x_img.rows() == md.sites && x_img.cols() == md.channels,
               "preprocess: latent image must be %d x %d", md.sites, md.channels);
    MIVA_CHECK(alpha >= 0.0 && alpha <= 1.0, "preprocess: alpha_shared must be in [0,1]");
    MIVA_CHECK(rho > 0.0 && rho <= 1.0, "preprocess: lowpass_ratio must be in (0,1]");
    const int F = md.frames;
    std::vector<Mat<T>> eps(static_cast<size_t>(F));
    for (auto& e : eps) {
        e.resize(md.sites, md.channels);
        rng.fill_gaussian(e);
    }
    shared_noise(eps, alpha);
    int tT = sched.T - 1;
    Mat<T> x_T = forward_diffuse(x_img, sched, tT, eps[0]);

    LatentVideo<T> out;
    out.Hl = md.lat_h;
    out.Wl = md.lat_w;
    out.frames.assign(size_t(F), Mat<T>::Zero(md.sites, md.channels));
    Mat<T> L = lowpass_box<T>(F, md.lat_h, md.lat_w, rho);
    Mat<T> ones = Mat<T>::Ones(F, md.sites);
    Mat<T> xt_cube(F, md.sites), eps_cube(F, md.sites);
    for (int c = 0; c < md.channels; c++) {
        for (int f = 0; f < F; f++) {
            xt_cube.row(f) = x_T.col(c).transpose();
            eps_cube.row(f) = eps[size_t(f)].col(c).transpose();
        }
        Mat<T> XT = dct3(xt_cube, F, md.lat_h, md.lat_w);
        Mat<T> E = dct3(eps_cube, F, md.lat_h, md.lat_w);
        Mat<T> blended = XT.cwiseProduct(L) + E.cwiseProduct(ones - L);
        Mat<T> sig = idct3(blended, F, md.lat_h, md.lat_w);
        for (int f = 0; f < F; f++) out.frames[size_t(f)].col(c) = sig.row(f).transpose();
    }
    out.frames[0] = x_img;
    return out;
}

// Per frame, per channel: renormalize spatial statistics to the reference
// image's mean/std. Channels with zero variance are left as-is with a
// warning. Frame 1 is skipped by default (it is the pinned input).
template <typename T>
void adain_final(PixelVideo<T>& v, const Image<T>& ref, bool skip_first = true) {
    MIVA_CHECK(!v.frames.empty() && v.frames[0].C() == ref.C(),
               "adain: channel count mismatch");
    std::vector<double> rmean(size_t(ref.C())), rstd(size_t(ref.C()));
    for (int c = 0; c < ref.C(); c++) {
        Mat<double> m = ref.chan[size_t(c)].template cast<double>();
        double mu = m.mean();
        rmean[size_t(c)] = mu;
        rstd[size_t(c)] = std::sqrt((m.array() - mu).square().mean());
    }
    for (int f = skip_first ? 1 : 0; f < v.F(); f++)
        for (int c = 0; c < ref.C(); c++) {
            Mat<double> m = v.frames[size_t(f)].chan[size_t(c)].template cast<double>();
            double mu = m.mean();
            double sd = std::sqrt((m.array() - mu).square().mean());
            if (sd == 0.0) {
                std::fprintf(stderr, "warning: adain skipping zero-variance channel %d frame %d\n",
                             c, f);
                continue;
            }
            m = (m.array() - mu) * (rstd[size_t(c)] / sd) + rmean[size_t(c)];
            v.frames[size_t(f)].chan[size_t(c)] = m.template cast<T>();
        }
}

template <typename T>
struct AdapterSpec {
    const CheckpointT<T>* ck = nullptr;
    T weight = T(1);
    const Mat<T>* mask_latent = nullptr;  // encoded subject-mask image, masked adapters only
};

struct AnimateSettings {
    double alpha_shared = 0.2;
    double lowpass_ratio = 0.25;
    double eps_mask = 1e-6;
    std::vector<int> mask_steps = {0, 5, 10, 15, 20, 25, 30, 35};
    uint64_t seed = 0;
    bool adain = true;
};

template <typename T>
struct AnimateResult {
    PixelVideo<T> video;
    std::vector<MaskSequenceT<T>> final_masks;  // one per masked adapter, pixel resolution
    std::vector<int> mask_build_history;        // DDIM indices where biases were rebuilt
    double sample_seconds = 0.0;                // wall time of the DDIM loop
};

// Advance all mask streams and rebuild the bias cache if this DDIM iteration
// is a mask-generation event; otherwise require a warm cache.
template <typename T>
void masked_bias_update(Tape<T>& tp, const BaseModelT<T>& base, const PatchAutoencoder<T>& vae,
                        const NoiseSchedule& sched,
                        const std::vector<AdapterSpec<T>>& adapters,
                        const std::vector<size_t>& masked_idx, std::vector<Mat<T>>& s_stacked,
                        int k, const std::vector<int>& mask_steps, double eps_mask,
                        MaskCacheT<T>& cache) {
    const ModelDims& md = base.md;
    bool is_event = std::find(mask_steps.begin(), mask_steps.end(), k) != mask_steps.end();
    if (!is_event) {
        if (!cache.valid)
            throw protocol_error(strf(
                "mask cache empty at DDIM iteration %d: no mask-generation step has run yet", k));
        return;
    }
    int t = sched.tau(k);
    // Configured events beyond the schedule never run; they are not successors.
    int next_event = -1;
    for (int e : mask_steps)
        if (e > k && e < sched.num_ddim() && (next_event < 0 || e < next_event)) next_event = e;
    cache.masks.assign(masked_idx.size(), {});
    for (size_t mi = 0; mi < masked_idx.size(); mi++) {
        const AdapterSpec<T>& a = adapters[masked_idx[mi]];
        ForwardPlan<T> plan;
        plan.base = &base;
        plan.adapters.push_back(AttachedAdapter<T>{a.ck, T(1), nullptr});
        plan.mask_stream = true;
        Mat<T> eps_s = denoiser_forward(tp, plan, s_stacked[mi], t);
        LatentVideo<T> lv = LatentVideo<T>::from_stacked(s_stacked[mi], md.frames, md.lat_h,
                                                         md.lat_w);
        cache.masks[mi] = one_step_predict_mask(lv, t, eps_s, sched, vae);
        if (next_event >= 0) {
            s_stacked[mi] = ddim_step(s_stacked[mi], sched, t, sched.tau(next_event), eps_s);
            s_stacked[mi].topRows(md.sites) = *a.mask_latent;
        }
    }
    cache.adapter_bias.assign(adapters.size(), Mat<T>());
    if (adapters.size() == 1) {
        // A lone masked adapter: its own soft bias guides both the base SA
        // site and its CFA layers.
        cache.sa_bias = build_attention_bias(cache.masks[0], md.lat_h, md.lat_w, T(eps_mask));
        cache.adapter_bias[0] = cache.sa_bias;
    } else {
        std::vector<MaskSequenceT<T>> site_masks;
        for (auto& m : cache.masks)
            site_masks.push_back(resize_mask_sequence(m, md.lat_h, md.lat_w));
        UnifiedMask u = unified_subject_mask(site_masks);
        cache.sa_bias = unified_attention_bias(u, T(eps_mask));
        Mat<T> bg_bias;
        for (size_t ai = 0; ai < adapters.size(); ai++) {
            auto it = std::find(masked_idx.begin(), masked_idx.end(), ai);
            if (it != masked_idx.end()) {
                size_t mi = size_t(it - masked_idx.begin());
                cache.adapter_bias[ai] =
                    build_attention_bias(cache.masks[mi], md.lat_h, md.lat_w, T(eps_mask));
            } else {
                if (bg_bias.size() == 0)
                    bg_bias = build_attention_bias(background_mask_for_plain_miva<T>(u), md.lat_h,
                                                   md.lat_w, T(eps_mask));
                cache.adapter_bias[ai] = bg_bias;
            }
        }
    }
    cache.valid = true;
    cache.last_built_step = k;
    cache.build_history.push_back(k);
}

// End-to-end animation of one input latent. `x_img` is the encoded input
// image; masked adapters carry their encoded subject masks in the spec list.
// Zero-weight adapters are dropped up front and leave no trace.
template <typename T>
AnimateResult<T> animate_latent(const BaseModelT<T>& base, const PatchAutoencoder<T>& vae,
                                const NoiseSchedule& sched, const Mat<T>& x_img,
                                std::vector<AdapterSpec<T>> adapters, const Image<T>& ref_image,
                                const AnimateSettings& st) {
    const ModelDims& md = base.md;
    adapters.erase(std::remove_if(adapters.begin(), adapters.end(),
                                  [](const AdapterSpec<T>& a) { return a.weight == T(0); }),
                   adapters.end());
    std::vector<size_t> masked_idx;
    for (size_t i = 0; i < adapters.size(); i++)
        if (adapters[i].ck->masked) {
            MIVA_CHECK(adapters[i].mask_latent, "animate: masked adapter %zu needs a subject mask",
                       i);
            masked_idx.push_back(i);
        }
    Rng vid_rng(split_seed(st.seed, 0x766964));
    LatentVideo<T> lat = preprocess(x_img, md, sched, st.alpha_shared, st.lowpass_ratio, vid_rng);
    Mat<T> x = lat.stacked();
    std::vector<Mat<T>> s_stacked;  // per masked adapter: evolving mask latents
    for (size_t mi = 0; mi < masked_idx.size(); mi++) {
        const Mat<T>& m0 = *adapters[masked_idx[mi]].mask_latent;
        Rng mrng(split_seed(st.seed, 0x6d61736b00ull + mi));
        LatentVideo<T> sl = preprocess(m0, md, sched, st.alpha_shared, st.lowpass_ratio, mrng);
        s_stacked.push_back(sl.stacked());
    }

    Tape<T> tp;
    MaskCacheT<T> cache;
    AnimateResult<T> res;
    auto t0 = std::chrono::steady_clock::now();
    for (int k = 0; k < sched.num_ddim(); k++) {
        int t = sched.tau(k);
        int t_prev = (k + 1 < sched.num_ddim()) ? sched.tau(k + 1) : -1;
        if (!masked_idx.empty())
            masked_bias_update(tp, base, vae, sched, adapters, masked_idx, s_stacked, k,
                               st.mask_steps, st.eps_mask, cache);
        ForwardPlan<T> plan;
        plan.base = &base;
        for (size_t ai = 0; ai < adapters.size(); ai++) {
            const Mat<T>* bias = nullptr;
            if (!masked_idx.empty() && cache.adapter_bias[ai].size() > 0)
                bias = &cache.adapter_bias[ai];
            plan.adapters.push_back(AttachedAdapter<T>{adapters[ai].ck, adapters[ai].weight, bias});
        }
        plan.sa_bias = (!masked_idx.empty() && cache.sa_bias.size() > 0) ? &cache.sa_bias : nullptr;
        Mat<T> eps_hat = denoiser_forward(tp, plan, x, t);
        x = ddim_step(x, sched, t, t_prev, eps_hat);
        x.topRows(md.sites) = x_img;
    }
    auto t1 = std::chrono::steady_clock::now();
    res.sample_seconds = std::chrono::duration<double>(t1 - t0).count();

    LatentVideo<T> out_lat = LatentVideo<T>::from_stacked(x, md.frames, md.lat_h, md.lat_w);
    for (auto& fr : out_lat.frames)
        res.video.frames.push_back(vae.decode(fr, md.lat_h, md.lat_w));
    if (st.adain) adain_final(res.video, ref_image);
    for (auto& f : res.video.frames)
        for (auto& ch : f.chan) ch = ch.cwiseMax(T(0)).cwiseMin(T(1)).eval();
    res.final_masks = cache.masks;
    res.mask_build_history = cache.build_history;
    return res;
}

}  // namespace miva
