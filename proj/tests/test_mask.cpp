// Mask machinery: sequence alignment, the pairwise attention bias and its
// block layout, one-step mask prediction, and the multi-adapter unified mask
// with its background complement.
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "miva/autoencoder.hpp"
#include "miva/maskops.hpp"
#include "miva/schedule.hpp"

using namespace miva;

namespace {

MaskSequenceT<double> seq(std::vector<Mat<double>> maps) {
    MaskSequenceT<double> s;
    s.maps = std::move(maps);
    return s;
}

}  // namespace

TEST_CASE("mask sequence alignment: identity, clamping, shape policing") {
    Mat<double> m(2, 2);
    m << 0.0, 1.0, 0.25, 0.75;
    MaskSequenceT<double> s = seq({m});
    MaskSequenceT<double> same = resize_mask_sequence(s, 2, 2);
    CHECK((same.maps[0] - m).cwiseAbs().maxCoeff() < 1e-15);

    // 8-row half plane (3 rows of ones) halves to a 0.5 boundary row
    Mat<double> half = Mat<double>::Zero(8, 8);
    half.topRows(3).setConstant(1.0);
    MaskSequenceT<double> down = resize_mask_sequence(seq({half}), 4, 4);
    CHECK(down.maps[0](0, 0) == Catch::Approx(1.0).margin(1e-12));
    CHECK(down.maps[0](1, 0) == Catch::Approx(0.5).margin(1e-12));
    CHECK(down.maps[0](2, 0) == Catch::Approx(0.0).margin(1e-12));
    CHECK(down.maps[0].minCoeff() >= 0.0);
    CHECK(down.maps[0].maxCoeff() <= 1.0);

    MaskSequenceT<double> ragged = seq({Mat<double>::Zero(2, 2), Mat<double>::Zero(3, 2)});
    CHECK_THROWS_AS(resize_mask_sequence(ragged, 2, 2), dim_error);
    MaskSequenceT<double> empty;
    CHECK_THROWS_AS(resize_mask_sequence(empty, 2, 2), dim_error);
}

TEST_CASE("pairwise attention bias matches the entry formula cell by cell") {
    const double eps = 1e-6;
    Mat<double> m0(2, 2), m1(2, 2);
    m0 << 1.0, 0.0, 0.3, 0.8;
    m1 << 1.0, 1.0, 1.0, 1.0;
    MaskSequenceT<double> s = seq({m0, m1});

    Mat<double> bias = build_attention_bias(s, 2, 2, eps);
    REQUIRE(bias.rows() == 8);
    REQUIRE(bias.cols() == 8);

    // row-major flattening of each frame's map, frames stacked in order
    auto conf = [&](Eigen::Index token) {
        const Mat<double>& mm = token < 4 ? m0 : m1;
        Eigen::Index p = token % 4;
        return mm(p / 2, p % 2);
    };
    for (Eigen::Index p = 0; p < 8; p++)
        for (Eigen::Index q = 0; q < 8; q++)
            REQUIRE(bias(p, q) ==
                    Catch::Approx(attention_mask_entry(conf(p), conf(q), eps)).margin(1e-12));

    // in/out pairs are suppressed near log(eps); in/in pairs are near zero
    CHECK(bias(0, 1) == Catch::Approx(std::log(eps)).margin(1e-9));
    CHECK(std::abs(bias(0, 0)) < 1e-5);

    CHECK_THROWS_AS(build_attention_bias(s, 0, 2, eps), dim_error);
    CHECK_THROWS_AS(build_attention_bias(s, 2, 2, 0.0), dim_error);
}

TEST_CASE("bias construction aligns masks to the token grid first") {
    const double eps = 1e-6;
    Mat<double> half = Mat<double>::Zero(8, 8);
    half.topRows(3).setConstant(1.0);
    MaskSequenceT<double> s = seq({half});

    Mat<double> bias = build_attention_bias(s, 4, 4, eps);
    REQUIRE(bias.rows() == 16);

    // the same bias falls out of resizing manually and then building at size
    MaskSequenceT<double> pre = resize_mask_sequence(s, 4, 4);
    Mat<double> bias2 = build_attention_bias(pre, 4, 4, eps);
    CHECK((bias - bias2).cwiseAbs().maxCoeff() < 1e-12);

    // boundary tokens (grid row 1 -> tokens 4..7) carry confidence 0.5, so a
    // boundary/boundary pair sits at log(0.5 + eps)
    CHECK(bias(4, 5) == Catch::Approx(std::log(0.500001)).margin(1e-9));
    CHECK(std::abs(bias(4, 5) - (-0.6931452)) < 1e-4);
    // interior/interior pair of the subject half stays near zero
    CHECK(std::abs(bias(0, 1)) < 1e-5);
    // subject/background pair is suppressed
    CHECK(bias(0, 12) == Catch::Approx(std::log(eps)).margin(1e-9));
}

TEST_CASE("one-step mask prediction inverts the forward diffusion exactly") {
    const int patch = 4, latC = 3, Hl = 2, Wl = 2;
    PatchAutoencoder<double> vae = PatchAutoencoder<double>::make(patch, latC);
    NoiseSchedule ns = NoiseSchedule::linear();

    // two frames of a moving block mask at pixel resolution
    Mat<double> mk0 = Mat<double>::Zero(8, 8), mk1 = Mat<double>::Zero(8, 8);
    mk0.block(0, 0, 4, 4).setConstant(1.0);
    mk1.block(2, 2, 4, 4).setConstant(1.0);

    LatentVideo<double> s0;
    s0.Hl = Hl;
    s0.Wl = Wl;
    s0.frames.push_back(vae.encode_mask(mk0));
    s0.frames.push_back(vae.encode_mask(mk1));

    const int t = 640;
    Rng rng(3);
    Mat<double> eps(s0.stacked().rows(), s0.stacked().cols());
    rng.fill_gaussian(eps);
    Mat<double> st = forward_diffuse(s0.stacked(), ns, t, eps);
    LatentVideo<double> st_lv = LatentVideo<double>::from_stacked(st, 2, Hl, Wl);

    MaskSequenceT<double> got = one_step_predict_mask(st_lv, t, eps, ns, vae);
    REQUIRE(got.frames() == 2);
    Mat<double> want0 = vae.decode_mask(s0.frames[0], Hl, Wl);
    Mat<double> want1 = vae.decode_mask(s0.frames[1], Hl, Wl);
    CHECK((got.maps[0] - want0).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((got.maps[1] - want1).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(got.maps[0].maxCoeff() <= 1.0);
    CHECK(got.maps[0].minCoeff() >= 0.0);

    CHECK_THROWS_AS(one_step_predict_mask(st_lv, ns.T, eps, ns, vae), dim_error);
    Mat<double> bad = eps.topRows(4);
    CHECK_THROWS_AS(one_step_predict_mask(st_lv, t, bad, ns, vae), dim_error);

    NoiseSchedule sing;
    sing.T = 1;
    sing.alpha = {0.0};
    sing.sigma = {1.0};
    CHECK_THROWS_AS(one_step_predict_mask(st_lv, 0, eps, sing, vae), numeric_error);
}

TEST_CASE("unified mask: winner labels with background and tie rules") {
    Mat<double> s1m(2, 2), s2m(2, 2);
    s1m << 0.9, 0.4, 0.6, 0.2;
    s2m << 0.8, 0.4, 0.6, 0.1;
    UnifiedMask u = unified_subject_mask<double>({seq({s1m}), seq({s2m})});
    REQUIRE(u.labels.size() == 1);
    CHECK(u.labels[0](0, 0) == 1);  // adapter 1 wins outright
    CHECK(u.labels[0](0, 1) == 0);  // nobody clears the threshold
    CHECK(u.labels[0](1, 0) == 2);  // tie goes to the larger index
    CHECK(u.labels[0](1, 1) == 0);

    // confidence exactly at the threshold stays background
    Mat<double> at(1, 1);
    at << 0.5;
    UnifiedMask ub = unified_subject_mask<double>({seq({at})});
    CHECK(ub.labels[0](0, 0) == 0);

    Mat<double> above(1, 1);
    above << 0.51;
    CHECK(unified_subject_mask<double>({seq({above})}).labels[0](0, 0) == 1);

    CHECK_THROWS_AS(unified_subject_mask<double>({}), dim_error);
    CHECK_THROWS_AS(unified_subject_mask<double>({seq({s1m}), seq({Mat<double>::Zero(3, 2)})}),
                    dim_error);
}

TEST_CASE("unified bias: same-label pairs pass, cross-label pairs suppress") {
    const double eps = 1e-6;
    Mat<double> s1m(2, 2), s2m(2, 2);
    s1m << 0.9, 0.4, 0.6, 0.2;
    s2m << 0.8, 0.4, 0.6, 0.1;
    UnifiedMask u = unified_subject_mask<double>({seq({s1m, s1m}), seq({s2m, s2m})});
    // labels per frame: [1, 0; 2, 0], two identical frames

    Mat<double> bias = unified_attention_bias(u, eps);
    REQUIRE(bias.rows() == 8);
    double same = std::log(1.0 + eps), diff = std::log(eps);
    int lab[4] = {1, 0, 2, 0};  // row-major cell labels within one frame
    for (int i = 0; i < 2; i++)
        for (int j = 0; j < 2; j++)
            for (int p = 0; p < 4; p++)
                for (int q = 0; q < 4; q++)
                    REQUIRE(bias(i * 4 + p, j * 4 + q) ==
                            Catch::Approx(lab[p] == lab[q] ? same : diff).margin(1e-12));

    CHECK_THROWS_AS(unified_attention_bias(UnifiedMask{}, eps), dim_error);
    CHECK_THROWS_AS(unified_attention_bias(u, 0.0), dim_error);
}

TEST_CASE("background complement flags exactly the unlabeled cells") {
    Mat<double> s1m(2, 2), s2m(2, 2);
    s1m << 0.9, 0.4, 0.6, 0.2;
    s2m << 0.8, 0.4, 0.6, 0.1;
    UnifiedMask u = unified_subject_mask<double>({seq({s1m}), seq({s2m})});

    MaskSequenceT<double> bg = background_mask_for_plain_miva<double>(u);
    REQUIRE(bg.frames() == 1);
    Mat<double> want(2, 2);
    want << 0.0, 1.0, 0.0, 1.0;
    CHECK((bg.maps[0] - want).cwiseAbs().maxCoeff() == 0.0);

    CHECK_THROWS_AS(background_mask_for_plain_miva<double>(UnifiedMask{}), dim_error);
}
