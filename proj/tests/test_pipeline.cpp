// Sampling pipeline: initial-state staging (shared noise + frequency splice),
// final statistics renormalization, the mask bias cache protocol, and
// end-to-end animation determinism on a tiny model.
#include <catch2/catch_amalgamated.hpp>

#include <vector>

#include "helpers.hpp"
#include "miva/pipeline.hpp"

using namespace miva;

namespace {

// Straight-line re-implementation of the initial-state staging, consuming an
// identically seeded noise stream.
template <typename T>
LatentVideo<T> staging_oracle(const Mat<T>& x_img, const ModelDims& md, const NoiseSchedule& ns,
                              double alpha, double rho, Rng& rng) {
    const int F = md.frames;
    std::vector<Mat<T>> eps(static_cast<size_t>(F));
    for (auto& e : eps) {
        e.resize(md.sites, md.channels);
        rng.fill_gaussian(e);
    }
    for (size_t i = 1; i < eps.size(); i++)
        eps[i] = (T(alpha) * eps[0] + T(1.0 - alpha) * eps[i]).eval();
    Mat<T> x_T = forward_diffuse(x_img, ns, ns.T - 1, eps[0]);

    Mat<T> L = lowpass_box<T>(F, md.lat_h, md.lat_w, rho);
    LatentVideo<T> out;
    out.Hl = md.lat_h;
    out.Wl = md.lat_w;
    out.frames.assign(size_t(F), Mat<T>::Zero(md.sites, md.channels));
    for (int c = 0; c < md.channels; c++) {
        Mat<T> xt_cube(F, md.sites), eps_cube(F, md.sites);
        for (int f = 0; f < F; f++) {
            xt_cube.row(f) = x_T.col(c).transpose();
            eps_cube.row(f) = eps[size_t(f)].col(c).transpose();
        }
        Mat<T> blended = dct3(xt_cube, F, md.lat_h, md.lat_w).cwiseProduct(L) +
                         dct3(eps_cube, F, md.lat_h, md.lat_w)
                             .cwiseProduct(Mat<T>::Ones(F, md.sites) - L);
        Mat<T> sig = idct3(blended, F, md.lat_h, md.lat_w);
        for (int f = 0; f < F; f++) out.frames[size_t(f)].col(c) = sig.row(f).transpose();
    }
    out.frames[0] = x_img;
    return out;
}

Image<float> random_image(Rng& rng, int H, int W, int C) {
    Image<float> img(H, W, C);
    for (auto& ch : img.chan)
        for (Eigen::Index i = 0; i < ch.size(); i++) ch.data()[i] = float(rng.uniform());
    return img;
}

bool videos_identical(const PixelVideo<float>& a, const PixelVideo<float>& b) {
    if (a.F() != b.F()) return false;
    for (int f = 0; f < a.F(); f++)
        for (int c = 0; c < a.frames[f].C(); c++)
            if ((a.frames[f].chan[c] - b.frames[f].chan[c]).cwiseAbs().maxCoeff() != 0.0f)
                return false;
    return true;
}

}  // namespace

TEST_CASE("initial staging matches the straight-line oracle") {
    ModelDims md = tiny_dims();
    NoiseSchedule ns = NoiseSchedule::linear();
    Rng data_rng(61);
    Mat<double> x(md.sites, md.channels);
    data_rng.fill_gaussian(x);

    for (double rho : {0.25, 0.6}) {
        Rng r1(777), r2(777);
        LatentVideo<double> got = preprocess(x, md, ns, 0.2, rho, r1);
        LatentVideo<double> want = staging_oracle(x, md, ns, 0.2, rho, r2);
        REQUIRE(got.F() == md.frames);
        for (int f = 0; f < md.frames; f++)
            CHECK((got.frames[f] - want.frames[f]).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("staging with a full low-pass band replicates the terminal state") {
    ModelDims md = tiny_dims();
    NoiseSchedule ns = NoiseSchedule::linear();
    Rng data_rng(62);
    Mat<double> x(md.sites, md.channels);
    data_rng.fill_gaussian(x);

    Rng r1(31), r2(31);
    LatentVideo<double> got = preprocess(x, md, ns, 0.3, 1.0, r1);

    // same noise stream: frame 1's noise is the anchor
    Mat<double> e0(md.sites, md.channels);
    r2.fill_gaussian(e0);
    Mat<double> x_T = forward_diffuse(x, ns, ns.T - 1, e0);

    CHECK((got.frames[0] - x).cwiseAbs().maxCoeff() == 0.0);  // pinned input
    for (int f = 1; f < md.frames; f++)
        CHECK((got.frames[f] - x_T).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("staging validation") {
    ModelDims md = tiny_dims();
    NoiseSchedule ns = NoiseSchedule::linear();
    Rng rng(63);
    Mat<double> x(md.sites, md.channels);
    rng.fill_gaussian(x);

    CHECK_THROWS_AS(preprocess(x, md, ns, -0.1, 0.25, rng), dim_error);
    CHECK_THROWS_AS(preprocess(x, md, ns, 1.1, 0.25, rng), dim_error);
    CHECK_THROWS_AS(preprocess(x, md, ns, 0.2, 0.0, rng), dim_error);  // band must be > 0
    CHECK_THROWS_AS(preprocess(x, md, ns, 0.2, 1.5, rng), dim_error);
    Mat<double> bad(md.sites - 1, md.channels);
    bad.setZero();
    CHECK_THROWS_AS(preprocess(bad, md, ns, 0.2, 0.25, rng), dim_error);
}

TEST_CASE("final renormalization pins every frame to the reference statistics") {
    Rng rng(64);
    Image<float> ref = random_image(rng, 8, 8, 2);
    PixelVideo<float> v;
    for (int f = 0; f < 3; f++) {
        Image<float> img = random_image(rng, 8, 8, 2);
        img.chan[0] *= 3.0f;  // distorted scale
        img.chan[1].array() += 0.7f;
        v.frames.push_back(img);
    }
    Image<float> frame0 = v.frames[0];

    adain_final(v, ref);
    // frame 1 (the pinned input) is untouched
    CHECK((v.frames[0].chan[0] - frame0.chan[0]).cwiseAbs().maxCoeff() == 0.0f);

    for (int f = 1; f < 3; f++)
        for (int c = 0; c < 2; c++) {
            Mat<double> got = v.frames[f].chan[c].cast<double>();
            Mat<double> want = ref.chan[c].cast<double>();
            CHECK(got.mean() == Catch::Approx(want.mean()).margin(1e-5));
            double gsd = std::sqrt((got.array() - got.mean()).square().mean());
            double wsd = std::sqrt((want.array() - want.mean()).square().mean());
            CHECK(gsd == Catch::Approx(wsd).margin(1e-5));
        }

    // a video already carrying the reference statistics is a fixed point
    PixelVideo<float> fixed;
    fixed.frames.push_back(ref);
    fixed.frames.push_back(ref);
    adain_final(fixed, ref, false);
    for (int f = 0; f < 2; f++)
        CHECK((fixed.frames[f].chan[0] - ref.chan[0]).cwiseAbs().maxCoeff() < 1e-5f);

    // zero-variance channels are left alone rather than divided by zero
    PixelVideo<float> flat;
    flat.frames.push_back(ref);
    Image<float> con(8, 8, 2);
    con.chan[0].setConstant(0.5f);
    con.chan[1].setConstant(0.25f);
    flat.frames.push_back(con);
    adain_final(flat, ref);
    CHECK((flat.frames[1].chan[0] - con.chan[0]).cwiseAbs().maxCoeff() == 0.0f);

    PixelVideo<float> wrong;
    wrong.frames.push_back(random_image(rng, 8, 8, 3));
    CHECK_THROWS_AS(adain_final(wrong, ref), dim_error);
}

TEST_CASE("mask bias cache: events rebuild, gaps reuse, cold gaps fail") {
    ModelDims md = tiny_dims();
    BaseModel base = BaseModel::make(md, 71);
    PatchAutoencoder<float> vae = PatchAutoencoder<float>::make(md.patch, md.channels);
    NoiseSchedule ns = NoiseSchedule::linear(1000, 10);

    Checkpoint masked = Checkpoint::make(md, true, 1, "fall_dots");
    Checkpoint plain = Checkpoint::make(md, false, 2, "translate_right");

    Mat<float> mask = Mat<float>::Zero(md.image_size, md.image_size);
    mask.block(4, 4, 8, 8).setConstant(1.0f);
    Mat<float> mask_lat = vae.encode_mask(mask);

    std::vector<AdapterSpec<float>> specs{{&masked, 1.0f, &mask_lat}, {&plain, 1.0f, nullptr}};
    std::vector<size_t> midx{0};

    Rng rng(72);
    std::vector<Mat<float>> s_stacked(1);
    s_stacked[0].resize(md.rows(), md.channels);
    rng.fill_gaussian(s_stacked[0]);

    Tape<float> tp;
    MaskCacheT<float> cache;
    std::vector<int> steps{0, 5};

    // a non-event index with a cold cache is a protocol violation
    MaskCacheT<float> cold;
    auto s_copy = s_stacked;
    CHECK_THROWS_AS(masked_bias_update(tp, base, vae, ns, specs, midx, s_copy, 3, steps, 1e-6,
                                       cold),
                    protocol_error);

    masked_bias_update(tp, base, vae, ns, specs, midx, s_stacked, 0, steps, 1e-6, cache);
    REQUIRE(cache.valid);
    CHECK(cache.last_built_step == 0);
    CHECK(cache.build_history == std::vector<int>{0});
    REQUIRE(cache.masks.size() == 1);
    CHECK(cache.masks[0].frames() == md.frames);

    // two adapters: the base bias partitions by winner, the masked adapter
    // keeps its own soft bias, and the plain adapter gets the background
    std::vector<MaskSequenceT<float>> site_masks{
        resize_mask_sequence(cache.masks[0], md.lat_h, md.lat_w)};
    UnifiedMask u = unified_subject_mask(site_masks);
    Mat<float> want_sa = unified_attention_bias(u, 1e-6f);
    CHECK((cache.sa_bias - want_sa).cwiseAbs().maxCoeff() == 0.0f);
    Mat<float> want_own = build_attention_bias(cache.masks[0], md.lat_h, md.lat_w, 1e-6f);
    CHECK((cache.adapter_bias[0] - want_own).cwiseAbs().maxCoeff() == 0.0f);
    Mat<float> want_bg =
        build_attention_bias(background_mask_for_plain_miva<float>(u), md.lat_h, md.lat_w, 1e-6f);
    CHECK((cache.adapter_bias[1] - want_bg).cwiseAbs().maxCoeff() == 0.0f);

    // the mask latents jumped to the next event's step and kept frame 1 pinned
    CHECK((s_stacked[0].topRows(md.sites) - mask_lat).cwiseAbs().maxCoeff() == 0.0f);

    // a warm non-event leaves the cache untouched
    Mat<float> sa_before = cache.sa_bias;
    auto s_before = s_stacked;
    masked_bias_update(tp, base, vae, ns, specs, midx, s_stacked, 3, steps, 1e-6, cache);
    CHECK(cache.build_history == std::vector<int>{0});
    CHECK((cache.sa_bias - sa_before).cwiseAbs().maxCoeff() == 0.0f);
    CHECK((s_stacked[0] - s_before[0]).cwiseAbs().maxCoeff() == 0.0f);

    // the final event has no successor: latents stay put, cache rebuilds
    masked_bias_update(tp, base, vae, ns, specs, midx, s_stacked, 5, steps, 1e-6, cache);
    CHECK((cache.build_history == std::vector<int>{0, 5}));
    CHECK((s_stacked[0] - s_before[0]).cwiseAbs().maxCoeff() == 0.0f);

    // one masked adapter alone: base-site and adapter biases coincide
    MaskCacheT<float> solo_cache;
    std::vector<AdapterSpec<float>> solo{{&masked, 1.0f, &mask_lat}};
    auto s_solo = s_before;
    masked_bias_update(tp, base, vae, ns, solo, midx, s_solo, 0, steps, 1e-6, solo_cache);
    CHECK((solo_cache.sa_bias - solo_cache.adapter_bias[0]).cwiseAbs().maxCoeff() == 0.0f);
    Mat<float> solo_want =
        build_attention_bias(solo_cache.masks[0], md.lat_h, md.lat_w, 1e-6f);
    CHECK((solo_cache.sa_bias - solo_want).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("animation: determinism, seed sensitivity, pinned first frame") {
    ModelDims md = tiny_dims();
    BaseModel base = BaseModel::make(md, 81);
    PatchAutoencoder<float> vae = PatchAutoencoder<float>::make(md.patch, md.channels);
    NoiseSchedule ns = NoiseSchedule::linear(1000, 10);

    Rng rng(82);
    Image<float> ref = random_image(rng, md.image_size, md.image_size, 3);
    Mat<float> x_img = vae.encode(ref);

    AnimateSettings st;
    st.seed = 99;
    AnimateResult<float> a = animate_latent(base, vae, ns, x_img, {}, ref, st);
    AnimateResult<float> b = animate_latent(base, vae, ns, x_img, {}, ref, st);
    REQUIRE(a.video.F() == md.frames);
    CHECK(videos_identical(a.video, b.video));
    CHECK(a.sample_seconds > 0.0);
    CHECK(a.mask_build_history.empty());

    AnimateSettings st2 = st;
    st2.seed = 100;
    AnimateResult<float> c = animate_latent(base, vae, ns, x_img, {}, ref, st2);
    CHECK_FALSE(videos_identical(a.video, c.video));

    // frame 1 is the decoded input latent (it never leaves the pin)
    Image<float> dec = vae.decode(x_img, md.lat_h, md.lat_w);
    for (auto& ch : dec.chan) ch = ch.cwiseMax(0.0f).cwiseMin(1.0f).eval();
    for (int ci = 0; ci < 3; ci++)
        CHECK((a.video.frames[0].chan[ci] - dec.chan[ci]).cwiseAbs().maxCoeff() == 0.0f);

    // pixel range is clamped everywhere
    for (auto& f : a.video.frames)
        for (auto& ch : f.chan) {
            CHECK(ch.minCoeff() >= 0.0f);
            CHECK(ch.maxCoeff() <= 1.0f);
        }

    // a zero-weight adapter leaves no trace
    Checkpoint ck = Checkpoint::make(md, false, 3, "expand");
    AnimateResult<float> z =
        animate_latent(base, vae, ns, x_img, {{&ck, 0.0f, nullptr}}, ref, st);
    CHECK(videos_identical(a.video, z.video));
}

TEST_CASE("animation with a masked adapter follows the mask schedule") {
    ModelDims md = tiny_dims();
    BaseModel base = BaseModel::make(md, 91);
    PatchAutoencoder<float> vae = PatchAutoencoder<float>::make(md.patch, md.channels);
    NoiseSchedule ns = NoiseSchedule::linear(1000, 10);

    Rng rng(92);
    Image<float> ref = random_image(rng, md.image_size, md.image_size, 3);
    Mat<float> x_img = vae.encode(ref);

    Checkpoint masked = Checkpoint::make(md, true, 7, "fall_dots");
    Mat<float> mask = Mat<float>::Zero(md.image_size, md.image_size);
    mask.block(2, 2, 6, 6).setConstant(1.0f);
    Mat<float> mask_lat = vae.encode_mask(mask);

    AnimateSettings st;
    st.seed = 5;
    st.mask_steps = {0, 4, 8};
    AnimateResult<float> r =
        animate_latent(base, vae, ns, x_img, {{&masked, 1.0f, &mask_lat}}, ref, st);
    CHECK(r.mask_build_history == std::vector<int>({0, 4, 8}));
    REQUIRE(r.final_masks.size() == 1);
    CHECK(r.final_masks[0].frames() == md.frames);
    CHECK(r.final_masks[0].maps[0].rows() == md.image_size);

    // deterministic under the same seed
    AnimateResult<float> r2 =
        animate_latent(base, vae, ns, x_img, {{&masked, 1.0f, &mask_lat}}, ref, st);
    CHECK(videos_identical(r.video, r2.video));

    // a schedule that misses iteration 0 never builds a cache to reuse
    AnimateSettings late = st;
    late.mask_steps = {3};
    CHECK_THROWS_AS(
        animate_latent(base, vae, ns, x_img, {{&masked, 1.0f, &mask_lat}}, ref, late),
        protocol_error);

    // masked adapters must come with a subject mask
    CHECK_THROWS_AS(animate_latent(base, vae, ns, x_img, {{&masked, 1.0f, nullptr}}, ref, st),
                    dim_error);
}
