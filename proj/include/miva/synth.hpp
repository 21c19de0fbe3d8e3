#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "common.hpp"
#include "resize.hpp"
#include "rng.hpp"
#include "video.hpp"

namespace miva {

// Subjects carry a reserved color signature: channel 0 dominates channels 1
// and 2 by at least 0.5, backgrounds use the complementary gamut. That makes
// threshold segmentation of generated frames trivial and exact on rendered
// data.
constexpr double kSegThresholdDefault = 0.3;

template <typename T>
struct SubjectColors {
    T sub[3];
    T bg[3];
};

template <typename T>
SubjectColors<T> sample_colors(Rng& rng) {
    SubjectColors<T> c;
    c.sub[0] = static_cast<T>(rng.uniform(0.85, 0.95));
    c.sub[1] = static_cast<T>(rng.uniform(0.10, 0.20));
    c.sub[2] = static_cast<T>(rng.uniform(0.10, 0.20));
    c.bg[0] = static_cast<T>(rng.uniform(0.05, 0.15));
    c.bg[1] = static_cast<T>(rng.uniform(0.30, 0.55));
    c.bg[2] = static_cast<T>(rng.uniform(0.30, 0.55));
    return c;
}

template <typename T>
Image<T> flat_background(int H, int W, const SubjectColors<T>& c) {
    Image<T> img(H, W, 3);
    for (int ch = 0; ch < 3; ch++) img.chan[ch].setConstant(c.bg[ch]);
    return img;
}

template <typename T>
void draw_rect(Image<T>& img, Mat<T>& mask, int x, int y, int w, int h,
               const SubjectColors<T>& c) {
    MIVA_CHECK(x >= 0 && y >= 0 && x + w <= img.W && y + h <= img.H,
               "draw_rect: subject out of frame (x=%d y=%d w=%d h=%d)", x, y, w, h);
    for (int j = y; j < y + h; j++)
        for (int i = x; i < x + w; i++) {
            for (int ch = 0; ch < 3; ch++) img.chan[ch](j, i) = c.sub[ch];
            mask(j, i) = T(1);
        }
}

template <typename T>
struct RenderedClip {
    std::string pattern;
    PixelVideo<T> video;
    std::vector<Mat<T>> masks;  // binary, exact subject support per frame
};

inline const std::vector<std::string>& pattern_names() {
    static const std::vector<std::string> names = {"translate_right", "translate_up", "bounce",
                                                   "expand",          "fall_dots",    "rotate_bar"};
    return names;
}

// Deterministic clip renderer. All subject kinematics are integer-exact except
// rotate_bar, whose mask is the same analytic predicate used to rasterize.
template <typename T>
RenderedClip<T> render_pattern(const std::string& name, uint64_t seed, int Fp, int H, int W) {
    MIVA_CHECK(Fp >= 2 && H >= 32 && W >= 32, "render_pattern: degenerate shape");
    Rng rng(split_seed(seed, 0x7061747465726e));
    SubjectColors<T> col = sample_colors<T>(rng);
    RenderedClip<T> clip;
    clip.pattern = name;

    auto frame = [&](auto&& draw) {
        Image<T> img = flat_background(H, W, col);
        Mat<T> mask = Mat<T>::Zero(H, W);
        draw(img, mask);
        clip.video.frames.push_back(std::move(img));
        clip.masks.push_back(std::move(mask));
    };

    if (name == "translate_right") {
        int size = 12 + int(rng.randint(9));
        int speed = 2;
        int travel = speed * (Fp - 1);
        MIVA_CHECK(W - 4 - size - travel >= 2, "render_pattern: subject too large for frame");
        int x0 = 2 + int(rng.randint(uint64_t(W - 4 - size - travel + 1)));
        int y0 = 2 + int(rng.randint(uint64_t(H - 4 - size + 1)));
        for (int k = 0; k < Fp; k++)
            frame([&](Image<T>& im, Mat<T>& m) { draw_rect(im, m, x0 + speed * k, y0, size, size, col); });
    } else if (name == "translate_up") {
        int size = 12 + int(rng.randint(9));
        int speed = 2;
        int travel = speed * (Fp - 1);
        MIVA_CHECK(H - 4 - size - travel >= 2, "render_pattern: subject too large for frame");
        int x0 = 2 + int(rng.randint(uint64_t(W - 4 - size + 1)));
        int y0 = 2 + travel + int(rng.randint(uint64_t(H - 4 - size - travel + 1)));
        for (int k = 0; k < Fp; k++)
            frame([&](Image<T>& im, Mat<T>& m) { draw_rect(im, m, x0, y0 - speed * k, size, size, col); });
    } else if (name == "bounce") {
        int size = 12 + int(rng.randint(9));
        int ymin = 2, ymax = H - 2 - size;
        MIVA_CHECK(ymax > ymin, "render_pattern: subject too large for frame");
        int x0 = 2 + int(rng.randint(uint64_t(W - 4 - size + 1)));
        int y = ymin + int(rng.randint(uint64_t(ymax - ymin + 1)));
        int v = rng.randint(2) ? 2 : -2;
        for (int k = 0; k < Fp; k++) {
            frame([&](Image<T>& im, Mat<T>& m) { draw_rect(im, m, x0, y, size, size, col); });
            y += v;
            if (y < ymin) { y = 2 * ymin - y; v = -v; }
            if (y > ymax) { y = 2 * ymax - y; v = -v; }
        }
    } else if (name == "expand") {
        int h0 = 3 + int(rng.randint(4));
        int hmax = h0 + Fp - 1;
        MIVA_CHECK(std::min(H, W) / 2 - 2 >= hmax, "render_pattern: subject too large for frame");
        int cx = W / 2 - 4 + int(rng.randint(9));
        int cy = H / 2 - 4 + int(rng.randint(9));
        MIVA_CHECK(cx - hmax >= 0 && cx + hmax <= W && cy - hmax >= 0 && cy + hmax <= H,
                   "render_pattern: expansion leaves frame");
        for (int k = 0; k < Fp; k++) {
            int h = h0 + k;
            frame([&](Image<T>& im, Mat<T>& m) { draw_rect(im, m, cx - h, cy - h, 2 * h, 2 * h, col); });
        }
    } else if (name == "fall_dots") {
        int n = 3 + int(rng.randint(3));
        int speed = 3;
        struct Dot { int x, y, s; };
        std::vector<Dot> dots;
        for (int i = 0; i < n; i++) {
            Dot d;
            d.s = 4 + int(rng.randint(3));
            d.x = 2 + int(rng.randint(uint64_t(W - 4 - d.s + 1)));
            int ymax0 = H - 3 - d.s - speed * (Fp - 1);
            int ymin0 = H / 4;
            MIVA_CHECK(ymax0 >= ymin0, "render_pattern: fall span too long for frame");
            d.y = ymin0 + int(rng.randint(uint64_t(ymax0 - ymin0 + 1)));
            dots.push_back(d);
        }
        for (int k = 0; k < Fp; k++)
            frame([&](Image<T>& im, Mat<T>& m) {
                for (auto& d : dots) draw_rect(im, m, d.x, d.y + speed * k, d.s, d.s, col);
            });
    } else if (name == "rotate_bar") {
        double cx = W / 2.0 + rng.uniform(-3.0, 3.0);
        double cy = H / 2.0 + rng.uniform(-3.0, 3.0);
        double hl = rng.uniform(14.0, 20.0);
        double hw = rng.uniform(2.0, 3.5);
        double th0 = rng.uniform(0.0, 3.14159265358979323846);
        double om = 3.14159265358979323846 / 16.0;
        MIVA_CHECK(hl + 4 < std::min(H, W) / 2.0, "render_pattern: bar too long for frame");
        for (int k = 0; k < Fp; k++) {
            double th = th0 + om * k, c = std::cos(th), s = std::sin(th);
            frame([&](Image<T>& im, Mat<T>& m) {
                for (int y = 0; y < H; y++)
                    for (int x = 0; x < W; x++) {
                        double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
                        double u = dx * c + dy * s, v = -dx * s + dy * c;
                        if (std::fabs(u) <= hl && std::fabs(v) <= hw) {
                            for (int ch = 0; ch < 3; ch++) im.chan[ch](y, x) = col.sub[ch];
                            m(y, x) = T(1);
                        }
                    }
            });
        }
    } else {
        throw usage_error("unknown motion pattern: " + name);
    }
    return clip;
}

// Camera-motion clips from a still image: sliding or scaling crops resized to
// the target resolution.
template <typename T>
std::vector<PixelVideo<T>> make_camera_clips(const Image<T>& image, const std::string& motion,
                                             int count, int Fp, int target, uint64_t seed) {
    MIVA_CHECK(image.H > target && image.W > target, "make_camera_clips: image must exceed crop");
    std::vector<PixelVideo<T>> clips;
    Rng rng(split_seed(seed, 0x63616d657261));

    auto crop_resize = [&](int x0, int y0, int cs) {
        MIVA_CHECK(x0 >= 0 && y0 >= 0 && x0 + cs <= image.W && y0 + cs <= image.H,
                   "make_camera_clips: crop exceeds bounds");
        Image<T> out(target, target, image.C());
        for (int c = 0; c < image.C(); c++)
            out.chan[c] = cs == target ? Mat<T>(image.chan[c].block(y0, x0, cs, cs))
                                       : bilinear_resize<T>(image.chan[c].block(y0, x0, cs, cs).eval(),
                                                            target, target);
        return out;
    };

    for (int i = 0; i < count; i++) {
        PixelVideo<T> v;
        if (motion == "pan_left" || motion == "pan_right") {
            int stride = 2;
            int span = stride * (Fp - 1);
            MIVA_CHECK(image.W - target - span >= 0, "make_camera_clips: pan exceeds bounds");
            int y0 = int(rng.randint(uint64_t(image.H - target + 1)));
            int x0 = int(rng.randint(uint64_t(image.W - target - span + 1)));
            if (motion == "pan_left") x0 += span;
            for (int k = 0; k < Fp; k++) {
                int x = motion == "pan_right" ? x0 + stride * k : x0 - stride * k;
                v.frames.push_back(crop_resize(x, y0, target));
            }
        } else if (motion == "zoom_in" || motion == "zoom_out") {
            int step = 2;
            int cmax = std::min(image.H, image.W) - 2;
            int cmin = cmax - step * (Fp - 1);
            MIVA_CHECK(cmin >= target / 2, "make_camera_clips: zoom exceeds bounds");
            int jx = int(rng.randint(3)) - 1, jy = int(rng.randint(3)) - 1;
            for (int k = 0; k < Fp; k++) {
                int cs = motion == "zoom_in" ? cmax - step * k : cmin + step * k;
                int x0 = (image.W - cs) / 2 + jx, y0 = (image.H - cs) / 2 + jy;
                v.frames.push_back(crop_resize(x0, y0, cs));
            }
        } else {
            throw usage_error("unknown camera motion: " + motion);
        }
        clips.push_back(std::move(v));
    }
    return clips;
}

// Threshold segmentation on the reserved subject signature.
template <typename T>
Mat<T> segment_generated(const Image<T>& frame, double threshold = kSegThresholdDefault) {
    MIVA_CHECK(frame.C() >= 3, "segment_generated: need 3 channels");
    Mat<T> m = Mat<T>::Zero(frame.H, frame.W);
    for (int y = 0; y < frame.H; y++)
        for (int x = 0; x < frame.W; x++) {
            double excess =
                double(frame.chan[0](y, x)) - std::max(double(frame.chan[1](y, x)),
                                                       double(frame.chan[2](y, x)));
            if (excess >= threshold) m(y, x) = T(1);
        }
    return m;
}

// Deterministic textured source image for camera-motion clips.
template <typename T>
Image<T> synth_texture_image(int H, int W, uint64_t seed) {
    MIVA_CHECK(H >= 32 && W >= 32, "synth_texture_image: image too small for overlay rects");
    Rng rng(split_seed(seed, 0x74657874757265));
    Image<T> img(H, W, 3);
    double fx = rng.uniform(1.0, 3.0), fy = rng.uniform(1.0, 3.0);
    for (int y = 0; y < H; y++)
        for (int x = 0; x < W; x++) {
            img.chan[0](y, x) = static_cast<T>(0.3 + 0.2 * std::sin(6.2831853 * fx * x / W));
            img.chan[1](y, x) = static_cast<T>(0.4 + 0.2 * std::sin(6.2831853 * fy * y / H));
            img.chan[2](y, x) = static_cast<T>(0.5 + 0.2 * double(x + y) / (H + W));
        }
    for (int i = 0; i < 6; i++) {
        int w = 8 + int(rng.randint(17)), h = 8 + int(rng.randint(17));
        int x = int(rng.randint(uint64_t(W - w))), y = int(rng.randint(uint64_t(H - h)));
        T c0 = static_cast<T>(rng.uniform(0.1, 0.9)), c1 = static_cast<T>(rng.uniform(0.1, 0.9)),
          c2 = static_cast<T>(rng.uniform(0.1, 0.9));
        for (int j = y; j < y + h; j++)
            for (int k = x; k < x + w; k++) {
                img.chan[0](j, k) = c0;
                img.chan[1](j, k) = c1;
                img.chan[2](j, k) = c2;
            }
    }
    return img;
}

}  // namespace miva
