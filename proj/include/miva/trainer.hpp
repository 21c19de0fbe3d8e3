#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "forward.hpp"
#include "maskops.hpp"
#include "schedule.hpp"
#include "video.hpp"

namespace miva {

// One training clip, pre-encoded. Masked training additionally carries the
// aligned mask latents and ground-truth pixel masks.
template <typename T>
struct TrainClip {
    LatentVideo<T> video;
    LatentVideo<T> mask_lat;
    MaskSequenceT<T> mask_px;
    int pattern = -1;  // prompt-table row block, pretraining only

    template <typename U>
    TrainClip<U> cast() const {
        TrainClip<U> c;
        c.video.Hl = video.Hl;
        c.video.Wl = video.Wl;
        for (auto& f : video.frames) c.video.frames.push_back(f.template cast<U>());
        c.mask_lat.Hl = mask_lat.Hl;
        c.mask_lat.Wl = mask_lat.Wl;
        for (auto& f : mask_lat.frames) c.mask_lat.frames.push_back(f.template cast<U>());
        for (auto& m : mask_px.maps) c.mask_px.maps.push_back(m.template cast<U>());
        c.pattern = pattern;
        return c;
    }
};

struct TrainSettings {
    long iters = 2000;
    double lr = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double eps_mask = 1e-6;
    uint64_t seed = 0;
};

struct TrainResult {
    std::vector<double> losses;
    std::vector<uint8_t> gt_branch;  // masked training: 1 = ground-truth biases used
};

// Plain Adam over a fixed set of parameter matrices. Graph leaves are matched
// back to optimizer slots by storage address; one parameter bound at several
// graph sites accumulates all of its gradient contributions.
template <typename T>
struct AdamOpt {
    double lr, b1, b2, eps;
    long steps = 0;
    std::vector<Mat<T>*> params;
    std::vector<Mat<T>> m, v, g;
    std::map<const void*, size_t> index;

    explicit AdamOpt(const TrainSettings& ts)
        : lr(ts.lr), b1(ts.beta1), b2(ts.beta2), eps(ts.adam_eps) {}

    void add(Mat<T>& p) {
        index[&p] = params.size();
        params.push_back(&p);
        m.push_back(Mat<T>::Zero(p.rows(), p.cols()));
        v.push_back(Mat<T>::Zero(p.rows(), p.cols()));
        g.push_back(Mat<T>::Zero(p.rows(), p.cols()));
    }

    void zero() {
        for (auto& gi : g) gi.setZero();
    }

    void gather(Tape<T>& tp,
                const std::vector<std::pair<const Mat<T>*, typename Tape<T>::Var>>& bound) {
        for (auto& [ptr, var] : bound) {
            auto it = index.find(ptr);
            MIVA_CHECK(it != index.end(), "optimizer: graph trains a parameter it does not own");
            if (tp.node(var).grad_ready) g[it->second] += tp.grad(var);
        }
    }

    void step() {
        steps++;
        T c1 = T(1.0 / (1.0 - std::pow(b1, double(steps))));
        T c2 = T(1.0 / (1.0 - std::pow(b2, double(steps))));
        for (size_t i = 0; i < params.size(); i++) {
            m[i] = T(b1) * m[i] + T(1.0 - b1) * g[i];
            v[i] = T(b2) * v[i] + T(1.0 - b2) * g[i].cwiseProduct(g[i]);
            params[i]->array() -=
                T(lr) * (m[i] * c1).array() / ((v[i] * c2).array().sqrt() + T(eps));
        }
    }
};

template <typename T>
Mat<T> window_stacked(const LatentVideo<T>& v, int start, int F) {
    MIVA_CHECK(start >= 0 && start + F <= v.F(), "training window out of clip bounds");
    Eigen::Index N = v.sites();
    Mat<T> X(Eigen::Index(F) * N, v.C());
    for (int f = 0; f < F; f++) X.middleRows(Eigen::Index(f) * N, N) = v.frames[size_t(start + f)];
    return X;
}

template <typename T>
MaskSequenceT<T> window_masks(const MaskSequenceT<T>& s, int start, int F) {
    MIVA_CHECK(start >= 0 && start + F <= s.frames(), "mask window out of clip bounds");
    MaskSequenceT<T> out;
    for (int f = 0; f < F; f++) out.maps.push_back(s.maps[size_t(start + f)]);
    return out;
}

// Mean squared error of the noise prediction, counting frames 2..F only
// (frame 1 is pinned clean and excluded by convention).
template <typename T>
typename Tape<T>::Var denoise_loss(Tape<T>& tp, typename Tape<T>::Var eps_hat,
                                   std::shared_ptr<const Mat<T>> eps_true, const ModelDims& md,
                                   bool exclude_first_frame) {
    MIVA_CHECK(md.frames >= 2, "denoise_loss: need at least 2 frames");
    Eigen::Index N = md.sites;
    Eigen::Index r0 = exclude_first_frame ? N : 0;
    Eigen::Index n = md.rows() - r0;
    typename Tape<T>::Var sse = tp.sse_rows(eps_hat, eps_true, r0, n);
    return tp.scale(sse, 1.0 / double(n * md.channels));
}

namespace traindetail {

template <typename T>
void check_finite_loss(double loss, long it) {
    if (!std::isfinite(loss))
        throw numeric_error(
            strf("training aborted: non-finite loss %g at iteration %ld", loss, it));
}

}  // namespace traindetail

// Few-shot adapter training against a frozen base. The checkpoint is updated
// in place; the base is hash-checked for immutability.
template <typename T>
TrainResult train_miva(const BaseModelT<T>& base, CheckpointT<T>& ckpt,
                       const std::vector<TrainClip<T>>& data, const NoiseSchedule& sched,
                       const TrainSettings& ts) {
    attach(base, ckpt);  // dimension + provenance validation
    MIVA_CHECK(!ckpt.masked, "train_miva: use train_mmiva for masked checkpoints");
    MIVA_CHECK(!data.empty(), "train_miva: empty dataset");
    const ModelDims& md = base.md;
    for (auto& c : data)
        MIVA_CHECK(c.video.F() >= md.frames, "train_miva: clip shorter than %d frames", md.frames);
    uint64_t h0 = base.param_hash();
    AdamOpt<T> opt(ts);
    ckpt.visit_params([&](const char*, Mat<T>& p) { opt.add(p); });
    Tape<T> tp;
    Rng pick(split_seed(ts.seed, 1)), noise(split_seed(ts.seed, 2));
    TrainResult res;
    const Eigen::Index N = md.sites;
    for (long it = 0; it < ts.iters; it++) {
        const TrainClip<T>& clip = data[size_t(pick.randint(data.size()))];
        int extra = clip.video.F() - md.frames;
        int start = extra > 0 ? int(pick.randint(uint64_t(extra) + 1)) : 0;
        Mat<T> x0 = window_stacked(clip.video, start, md.frames);
        int t = 1 + int(pick.randint(uint64_t(sched.T - 1)));
        auto eps = std::make_shared<Mat<T>>(noise.template gaussian_mat<T>(x0.rows(), x0.cols()));
        Mat<T> x_t = forward_diffuse(x0, sched, t, *eps);
        x_t.topRows(N) = x0.topRows(N);  // pinned clean first frame

        tp.reset();
        ForwardPlan<T> plan;
        plan.base = &base;
        plan.adapters.push_back(AttachedAdapter<T>{&ckpt, T(1), nullptr});
        plan.train_adapters = true;
        DenoiserGraph<T> g(tp, plan);
        typename Tape<T>::Var eps_hat = g.run(x_t, t);
        typename Tape<T>::Var loss = denoise_loss<T>(tp, eps_hat, eps, md, true);
        tp.backward(loss);
        double lv = double(tp.val(loss)(0, 0));
        traindetail::check_finite_loss<T>(lv, it);
        res.losses.push_back(lv);
        if (ts.lr != 0.0) {
            opt.zero();
            opt.gather(tp, g.trainable);
            opt.step();
        }
    }
    MIVA_CHECK(base.param_hash() == h0, "train_miva: base parameters changed during training");
    return res;
}

// Joint masked-adapter training: the mask stream is always forwarded (it
// carries its own loss term); the video stream's attention bias comes from
// either the ground-truth masks or the mask stream's one-step prediction,
// chosen per iteration with cosine-decaying ground-truth probability. Biases
// are constants in the graph either way.
template <typename T>
TrainResult train_mmiva(const BaseModelT<T>& base, CheckpointT<T>& ckpt,
                        const std::vector<TrainClip<T>>& data, const NoiseSchedule& sched,
                        const PatchAutoencoder<T>& vae, const TrainSettings& ts) {
    attach(base, ckpt);
    MIVA_CHECK(ckpt.masked, "train_mmiva: checkpoint is not a masked adapter");
    MIVA_CHECK(!data.empty(), "train_mmiva: empty dataset");
    const ModelDims& md = base.md;
    for (auto& c : data) {
        MIVA_CHECK(c.video.F() >= md.frames, "train_mmiva: clip shorter than %d frames",
                   md.frames);
        MIVA_CHECK(c.mask_lat.F() == c.video.F() && c.mask_px.frames() == c.video.F(),
                   "train_mmiva: dataset lacks aligned masks");
    }
    uint64_t h0 = base.param_hash();
    AdamOpt<T> opt(ts);
    ckpt.visit_params([&](const char*, Mat<T>& p) { opt.add(p); });
    Tape<T> tp;
    Rng pick(split_seed(ts.seed, 1)), noise(split_seed(ts.seed, 2)),
        branch(split_seed(ts.seed, 3));
    TrainResult res;
    const Eigen::Index N = md.sites;
    for (long it = 0; it < ts.iters; it++) {
        const TrainClip<T>& clip = data[size_t(pick.randint(data.size()))];
        int extra = clip.video.F() - md.frames;
        int start = extra > 0 ? int(pick.randint(uint64_t(extra) + 1)) : 0;
        Mat<T> x0 = window_stacked(clip.video, start, md.frames);
        Mat<T> s0 = window_stacked(clip.mask_lat, start, md.frames);
        int t = 1 + int(pick.randint(uint64_t(sched.T - 1)));
        auto eps_x = std::make_shared<Mat<T>>(noise.template gaussian_mat<T>(x0.rows(), x0.cols()));
        auto eps_s = std::make_shared<Mat<T>>(noise.template gaussian_mat<T>(s0.rows(), s0.cols()));
        Mat<T> x_t = forward_diffuse(x0, sched, t, *eps_x);
        Mat<T> s_t = forward_diffuse(s0, sched, t, *eps_s);
        x_t.topRows(N) = x0.topRows(N);
        s_t.topRows(N) = s0.topRows(N);
        bool use_gt = branch.uniform() < dropout_prob(it, ts.iters);

        tp.reset();
        ForwardPlan<T> mplan;
        mplan.base = &base;
        mplan.adapters.push_back(AttachedAdapter<T>{&ckpt, T(1), nullptr});
        mplan.mask_stream = true;
        mplan.train_adapters = true;
        DenoiserGraph<T> gm(tp, mplan);
        typename Tape<T>::Var eps_s_hat = gm.run(s_t, t);

        Mat<T> bias;
        if (use_gt) {
            bias = build_attention_bias(window_masks(clip.mask_px, start, md.frames), md.lat_h,
                                        md.lat_w, T(ts.eps_mask));
        } else {
            LatentVideo<T> slv = LatentVideo<T>::from_stacked(s_t, md.frames, md.lat_h, md.lat_w);
            MaskSequenceT<T> pred =
                one_step_predict_mask(slv, t, tp.val(eps_s_hat), sched, vae);
            bias = build_attention_bias(pred, md.lat_h, md.lat_w, T(ts.eps_mask));
        }

        ForwardPlan<T> vplan;
        vplan.base = &base;
        vplan.adapters.push_back(AttachedAdapter<T>{&ckpt, T(1), &bias});
        vplan.sa_bias = &bias;
        vplan.train_adapters = true;
        DenoiserGraph<T> gv(tp, vplan);
        typename Tape<T>::Var eps_x_hat = gv.run(x_t, t);

        Eigen::Index n = md.rows() - N;
        typename Tape<T>::Var sse = tp.add(tp.sse_rows(eps_x_hat, eps_x, N, n),
                                           tp.sse_rows(eps_s_hat, eps_s, N, n));
        typename Tape<T>::Var loss = tp.scale(sse, 1.0 / double(2 * n * md.channels));
        tp.backward(loss);
        double lv = double(tp.val(loss)(0, 0));
        traindetail::check_finite_loss<T>(lv, it);
        res.losses.push_back(lv);
        res.gt_branch.push_back(use_gt ? 1 : 0);
        if (ts.lr != 0.0) {
            opt.zero();
            opt.gather(tp, gm.trainable);
            opt.gather(tp, gv.trainable);
            opt.step();
        }
    }
    MIVA_CHECK(base.param_hash() == h0, "train_mmiva: base parameters changed during training");
    return res;
}

// Desk-scale base pretraining: standard denoising loss over all frames with
// the pattern's prompt rows active, no adapters, no frame pinning.
template <typename T>
TrainResult pretrain_base(BaseModelT<T>& base, const std::vector<TrainClip<T>>& data,
                          const NoiseSchedule& sched, const TrainSettings& ts) {
    MIVA_CHECK(!data.empty(), "pretrain: empty dataset");
    const ModelDims& md = base.md;
    std::set<int> patterns;
    for (auto& c : data) {
        MIVA_CHECK(c.pattern >= 0 && c.pattern < md.max_patterns,
                   "pretrain: clip needs a prompt-table pattern id in [0, %d)", md.max_patterns);
        MIVA_CHECK(c.video.F() >= md.frames, "pretrain: clip shorter than %d frames", md.frames);
        patterns.insert(c.pattern);
    }
    if (patterns.size() < 2)
        std::fprintf(stderr,
                     "warning: pretraining on a single pattern; motion priors will be narrow\n");
    AdamOpt<T> opt(ts);
    base.visit_params([&](const char*, Mat<T>& p) { opt.add(p); });
    Tape<T> tp;
    Rng pick(split_seed(ts.seed, 1)), noise(split_seed(ts.seed, 2));
    TrainResult res;
    for (long it = 0; it < ts.iters; it++) {
        const TrainClip<T>& clip = data[size_t(pick.randint(data.size()))];
        int extra = clip.video.F() - md.frames;
        int start = extra > 0 ? int(pick.randint(uint64_t(extra) + 1)) : 0;
        Mat<T> x0 = window_stacked(clip.video, start, md.frames);
        int t = 1 + int(pick.randint(uint64_t(sched.T - 1)));
        auto eps = std::make_shared<Mat<T>>(noise.template gaussian_mat<T>(x0.rows(), x0.cols()));
        Mat<T> x_t = forward_diffuse(x0, sched, t, *eps);

        tp.reset();
        ForwardPlan<T> plan;
        plan.base = &base;
        plan.prompt_pattern = clip.pattern;
        plan.train_base = true;
        DenoiserGraph<T> g(tp, plan);
        typename Tape<T>::Var eps_hat = g.run(x_t, t);
        typename Tape<T>::Var loss = denoise_loss<T>(tp, eps_hat, eps, md, false);
        tp.backward(loss);
        double lv = double(tp.val(loss)(0, 0));
        traindetail::check_finite_loss<T>(lv, it);
        res.losses.push_back(lv);
        if (ts.lr != 0.0) {
            opt.zero();
            opt.gather(tp, g.trainable);
            opt.step();
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification
// ---------------------------------------------------------------------------

struct GradCheckGroup {
    std::string name;
    double max_rel = 0.0;
    int checked = 0;
};

struct GradCheckReport {
    std::vector<GradCheckGroup> groups;
    double worst = 0.0;

    bool pass(double tol = 1e-4) const { return worst <= tol; }
    std::string summary() const {
        std::string s;
        for (auto& g : groups) s += strf("%-28s max_rel %.3e (%d entries)\n", g.name.c_str(),
                                         g.max_rel, g.checked);
        s += strf("worst %.3e\n", worst);
        return s;
    }
};

namespace traindetail {

// Central finite differences vs the tape's analytic gradients at a generic
// point, in double precision. `loss_fn(tape, bound)` rebuilds the full loss
// graph from current parameter values. Relative error uses a magnitude floor
// so near-zero gradients are compared absolutely (FD noise is ~1e-9 here).
template <typename LossFn>
GradCheckReport fd_check(std::vector<std::pair<std::string, Mat<double>*>> params,
                         LossFn&& loss_fn, double h, int per_mat) {
    using Var = Tape<double>::Var;
    Tape<double> tp;
    std::vector<std::pair<const Mat<double>*, Var>> bound;
    tp.reset();
    Var loss = loss_fn(tp, bound);
    tp.backward(loss);
    std::map<const void*, Mat<double>> analytic;
    for (auto& [ptr, var] : bound) {
        Mat<double> g = tp.node(var).grad_ready
                            ? tp.grad(var)
                            : Mat<double>::Zero(ptr->rows(), ptr->cols());
        auto it = analytic.find(ptr);
        if (it == analytic.end())
            analytic[ptr] = g;
        else
            it->second += g;
    }
    auto loss_value = [&]() {
        std::vector<std::pair<const Mat<double>*, Var>> b2;
        tp.reset();
        return tp.val(loss_fn(tp, b2))(0, 0);
    };
    GradCheckReport rep;
    for (auto& [name, pm] : params) {
        GradCheckGroup grp;
        grp.name = name;
        auto ai = analytic.find(pm);
        Eigen::Index sz = pm->size();
        std::set<Eigen::Index> picks = {0, sz / 2, sz - 1};
        int used = 0;
        for (Eigen::Index idx : picks) {
            if (idx < 0 || idx >= sz || used >= per_mat) continue;
            used++;
            double a = ai == analytic.end() ? 0.0 : ai->second.data()[idx];
            double keep = pm->data()[idx];
            pm->data()[idx] = keep + h;
            double lp = loss_value();
            pm->data()[idx] = keep - h;
            double lm = loss_value();
            pm->data()[idx] = keep;
            double f = (lp - lm) / (2.0 * h);
            double rel = std::abs(a - f) / std::max({1e-3, std::abs(a), std::abs(f)});
            grp.max_rel = std::max(grp.max_rel, rel);
            grp.checked++;
        }
        rep.worst = std::max(rep.worst, grp.max_rel);
        rep.groups.push_back(std::move(grp));
    }
    return rep;
}

}  // namespace traindetail

// Gradient check for adapter training (plain or masked). Runs at whatever
// shape the supplied model uses, in double, at a generic point: every adapter
// matrix is refilled with random values first (fresh zero-init factors would
// make most gradients vanish identically and verify nothing). Masked
// checkpoints are checked on the ground-truth-bias branch, where the bias is
// a constant and finite differences see the same detachment the analytic
// gradients do.
template <typename T>
GradCheckReport gradient_check_adapter(const BaseModelT<T>& base_in, const CheckpointT<T>& ck_in,
                                       const TrainClip<T>& clip_in, const NoiseSchedule& sched,
                                       uint64_t seed, double h = 1e-4, int per_mat = 3) {
    BaseModelT<double> base = base_in.template cast<double>();
    CheckpointT<double> ck = ck_in.template cast<double>();
    TrainClip<double> clip = clip_in.template cast<double>();
    const ModelDims& md = base.md;
    MIVA_CHECK(clip.video.F() >= md.frames, "gradient check: clip too short");
    Rng fill(split_seed(seed, 0xfd));
    ck.visit_params(
        [&](const char*, Mat<double>& m) { fill.fill_gaussian(m, 1.0 / std::sqrt(md.d)); });
    Rng noise(split_seed(seed, 0xfe));
    int t = 1 + int(noise.randint(uint64_t(sched.T - 1)));
    const Eigen::Index N = md.sites;
    Mat<double> x0 = window_stacked(clip.video, 0, md.frames);
    auto eps_x = std::make_shared<Mat<double>>(noise.gaussian_mat<double>(x0.rows(), x0.cols()));
    Mat<double> x_t = forward_diffuse(x0, sched, t, *eps_x);
    x_t.topRows(N) = x0.topRows(N);
    Mat<double> s_t;
    std::shared_ptr<Mat<double>> eps_s;
    Mat<double> bias;
    if (ck.masked) {
        MIVA_CHECK(clip.mask_lat.F() == clip.video.F() &&
                       clip.mask_px.frames() == clip.video.F(),
                   "gradient check: masked checkpoint needs masks in the clip");
        Mat<double> s0 = window_stacked(clip.mask_lat, 0, md.frames);
        eps_s = std::make_shared<Mat<double>>(noise.gaussian_mat<double>(s0.rows(), s0.cols()));
        s_t = forward_diffuse(s0, sched, t, *eps_s);
        s_t.topRows(N) = s0.topRows(N);
        bias = build_attention_bias(window_masks(clip.mask_px, 0, md.frames), md.lat_h, md.lat_w,
                                    1e-6);
    }

    using Var = Tape<double>::Var;
    auto loss_fn = [&](Tape<double>& tp, std::vector<std::pair<const Mat<double>*, Var>>& bound) {
        Eigen::Index n = md.rows() - N;
        if (!ck.masked) {
            ForwardPlan<double> plan;
            plan.base = &base;
            plan.adapters.push_back(AttachedAdapter<double>{&ck, 1.0, nullptr});
            plan.train_adapters = true;
            DenoiserGraph<double> g(tp, plan);
            Var eps_hat = g.run(x_t, t);
            bound = g.trainable;
            return denoise_loss<double>(tp, eps_hat, eps_x, md, true);
        }
        ForwardPlan<double> mplan;
        mplan.base = &base;
        mplan.adapters.push_back(AttachedAdapter<double>{&ck, 1.0, nullptr});
        mplan.mask_stream = true;
        mplan.train_adapters = true;
        DenoiserGraph<double> gm(tp, mplan);
        Var eps_s_hat = gm.run(s_t, t);
        ForwardPlan<double> vplan;
        vplan.base = &base;
        vplan.adapters.push_back(AttachedAdapter<double>{&ck, 1.0, &bias});
        vplan.sa_bias = &bias;
        vplan.train_adapters = true;
        DenoiserGraph<double> gv(tp, vplan);
        Var eps_x_hat = gv.run(x_t, t);
        bound = gm.trainable;
        bound.insert(bound.end(), gv.trainable.begin(), gv.trainable.end());
        Var sse = tp.add(tp.sse_rows(eps_x_hat, eps_x, N, n), tp.sse_rows(eps_s_hat, eps_s, N, n));
        return tp.scale(sse, 1.0 / double(2 * n * md.channels));
    };
    std::vector<std::pair<std::string, Mat<double>*>> params;
    ck.visit_params([&](const char* nm, Mat<double>& m) { params.emplace_back(nm, &m); });
    return traindetail::fd_check(std::move(params), loss_fn, h, per_mat);
}

// Gradient check for the pretraining path (full base trains, prompt active).
template <typename T>
GradCheckReport gradient_check_base(const BaseModelT<T>& base_in, const TrainClip<T>& clip_in,
                                    const NoiseSchedule& sched, uint64_t seed, double h = 1e-4,
                                    int per_mat = 3) {
    BaseModelT<double> base = base_in.template cast<double>();
    TrainClip<double> clip = clip_in.template cast<double>();
    const ModelDims& md = base.md;
    MIVA_CHECK(clip.pattern >= 0, "gradient check: pretraining clip needs a pattern id");
    Rng noise(split_seed(seed, 0xfe));
    int t = 1 + int(noise.randint(uint64_t(sched.T - 1)));
    Mat<double> x0 = window_stacked(clip.video, 0, md.frames);
    auto eps = std::make_shared<Mat<double>>(noise.gaussian_mat<double>(x0.rows(), x0.cols()));
    Mat<double> x_t = forward_diffuse(x0, sched, t, *eps);

    using Var = Tape<double>::Var;
    auto loss_fn = [&](Tape<double>& tp, std::vector<std::pair<const Mat<double>*, Var>>& bound) {
        ForwardPlan<double> plan;
        plan.base = &base;
        plan.prompt_pattern = clip.pattern;
        plan.train_base = true;
        DenoiserGraph<double> g(tp, plan);
        Var eps_hat = g.run(x_t, t);
        bound = g.trainable;
        return denoise_loss<double>(tp, eps_hat, eps, md, false);
    };
    std::vector<std::pair<std::string, Mat<double>*>> params;
    base.visit_params([&](const char* nm, Mat<double>& m) { params.emplace_back(nm, &m); });
    return traindetail::fd_check(std::move(params), loss_fn, h, per_mat);
}

}  // namespace miva
