#pragma once

#include <cmath>
#include <vector>

#include "common.hpp"
#include "synth.hpp"
#include "video.hpp"

namespace miva {

struct undefined_track_error : std::runtime_error {
    explicit undefined_track_error(const std::string& m) : std::runtime_error(m) {}
};

// 100 * (1 - mean |frame_{i+1} - frame_i|); 100 = perfectly static.
template <typename T>
double temporal_flickering(const PixelVideo<T>& v) {
    MIVA_CHECK(v.F() >= 2, "temporal_flickering: need at least 2 frames");
    for (auto& f : v.frames)
        for (auto& ch : f.chan)
            if (ch.minCoeff() < T(-1e-6) || ch.maxCoeff() > T(1 + 1e-6))
                throw numeric_error("temporal_flickering: pixel range violation");
    double acc = 0.0;
    long cnt = 0;
    for (int i = 0; i + 1 < v.F(); i++)
        for (int c = 0; c < v.frames[i].C(); c++) {
            acc += (v.frames[i + 1].chan[c] - v.frames[i].chan[c])
                       .template cast<double>()
                       .cwiseAbs()
                       .sum();
            cnt += v.frames[i].chan[c].size();
        }
    return 100.0 * (1.0 - acc / double(cnt));
}

// Mean absolute consecutive-frame difference over pixel rows [y0, y1).
template <typename T>
double motion_intensity_rows(const PixelVideo<T>& v, int y0, int y1) {
    MIVA_CHECK(v.F() >= 2, "motion_intensity: need at least 2 frames");
    MIVA_CHECK(y0 >= 0 && y1 > y0 && y1 <= v.frames[0].H, "motion_intensity: bad row range");
    double acc = 0.0;
    long cnt = 0;
    for (int i = 0; i + 1 < v.F(); i++)
        for (int c = 0; c < v.frames[i].C(); c++) {
            acc += (v.frames[i + 1].chan[c].middleRows(y0, y1 - y0) -
                    v.frames[i].chan[c].middleRows(y0, y1 - y0))
                       .template cast<double>()
                       .cwiseAbs()
                       .sum();
            cnt += long(y1 - y0) * v.frames[i].chan[c].cols();
        }
    return acc / double(cnt);
}

// Mean absolute consecutive-frame difference.
template <typename T>
double motion_intensity(const PixelVideo<T>& v) {
    return motion_intensity_rows(v, 0, v.frames.empty() ? 1 : v.frames[0].H);
}

// Motion restricted to the lower half of the frame.
template <typename T>
double lower_half_motion_intensity(const PixelVideo<T>& v) {
    int H = v.frames.empty() ? 2 : v.frames[0].H;
    return motion_intensity_rows(v, H / 2, H);
}

struct CentroidTrack {
    std::vector<double> cx, cy;       // pixel-center coordinates per frame
    std::vector<bool> valid;          // segmenter produced a nonempty mask
    double net_dx = 0.0, net_dy = 0.0;  // centroid_F - centroid_1
};

// Per-frame mask centroids under a segmenter, plus net displacement.
template <typename T, typename Seg>
CentroidTrack centroid_track(const PixelVideo<T>& v, Seg&& segmenter) {
    CentroidTrack tr;
    int nvalid = 0;
    for (int f = 0; f < v.F(); f++) {
        Mat<T> m = segmenter(v.frames[f]);
        double mass = 0.0, sx = 0.0, sy = 0.0;
        for (int y = 0; y < m.rows(); y++)
            for (int x = 0; x < m.cols(); x++)
                if (m(y, x) > T(0.5)) {
                    mass += 1.0;
                    sx += x + 0.5;
                    sy += y + 0.5;
                }
        bool ok = mass > 0.0;
        tr.valid.push_back(ok);
        tr.cx.push_back(ok ? sx / mass : 0.0);
        tr.cy.push_back(ok ? sy / mass : 0.0);
        if (ok) nvalid++;
    }
    if (nvalid * 2 < v.F() || !tr.valid.front() || !tr.valid.back())
        throw undefined_track_error("centroid_track: subject not found in enough frames");
    tr.net_dx = tr.cx.back() - tr.cx.front();
    tr.net_dy = tr.cy.back() - tr.cy.front();
    return tr;
}

template <typename T>
CentroidTrack centroid_track(const PixelVideo<T>& v, double threshold = kSegThresholdDefault) {
    return centroid_track(v, [&](const Image<T>& f) { return segment_generated(f, threshold); });
}

// Mean cosine similarity (x100) of flattened patch-mean features between
// consecutive frames. Zero-norm features skip the pair.
template <typename T>
double consistency_score(const PixelVideo<T>& v, int patch = 8) {
    MIVA_CHECK(v.F() >= 2, "consistency_score: need at least 2 frames");
    MIVA_CHECK(v.frames[0].H % patch == 0 && v.frames[0].W % patch == 0,
               "consistency_score: dims not divisible by patch");
    int gh = v.frames[0].H / patch, gw = v.frames[0].W / patch;
    auto features = [&](const Image<T>& img) {
        Mat<double> f(1, Eigen::Index(gh) * gw * img.C());
        Eigen::Index k = 0;
        for (int c = 0; c < img.C(); c++)
            for (int gy = 0; gy < gh; gy++)
                for (int gx = 0; gx < gw; gx++)
                    f(0, k++) = img.chan[c]
                                    .block(gy * patch, gx * patch, patch, patch)
                                    .template cast<double>()
                                    .mean();
        return f;
    };
    double acc = 0.0;
    int cnt = 0;
    Mat<double> prev = features(v.frames[0]);
    for (int i = 1; i < v.F(); i++) {
        Mat<double> cur = features(v.frames[i]);
        double np = prev.norm(), nc = cur.norm();
        if (np > 0 && nc > 0) {
            acc += (prev * cur.transpose())(0, 0) / (np * nc);
            cnt++;
        }
        prev = std::move(cur);
    }
    if (cnt == 0) return 0.0;
    return 100.0 * acc / cnt;
}

// Downward motion evidence in the lower half of the frame: mass-weighted
// least-squares slope of the subject's y-centroid (restricted to rows >= H/2)
// against frame index, in pixels per frame. Positive = moving down. Returns 0
// when fewer than two frames show any lower-half subject mass.
template <typename T>
double lower_half_y_motion(const PixelVideo<T>& v, double threshold = kSegThresholdDefault) {
    MIVA_CHECK(v.F() >= 2, "lower_half_y_motion: need at least 2 frames");
    int H = v.frames[0].H;
    std::vector<double> mass, cy, fidx;
    for (int f = 0; f < v.F(); f++) {
        Mat<T> m = segment_generated(v.frames[f], threshold);
        double mm = 0.0, sy = 0.0;
        for (int y = H / 2; y < H; y++)
            for (int x = 0; x < m.cols(); x++)
                if (m(y, x) > T(0.5)) {
                    mm += 1.0;
                    sy += y + 0.5;
                }
        if (mm > 0.0) {
            mass.push_back(mm);
            cy.push_back(sy / mm);
            fidx.push_back(double(f));
        }
    }
    if (mass.size() < 2) return 0.0;
    double wsum = 0.0, fbar = 0.0, cbar = 0.0;
    for (size_t i = 0; i < mass.size(); i++) {
        wsum += mass[i];
        fbar += mass[i] * fidx[i];
        cbar += mass[i] * cy[i];
    }
    fbar /= wsum;
    cbar /= wsum;
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < mass.size(); i++) {
        num += mass[i] * (fidx[i] - fbar) * (cy[i] - cbar);
        den += mass[i] * (fidx[i] - fbar) * (fidx[i] - fbar);
    }
    if (den <= 0.0) return 0.0;
    return num / den;
}

}  // namespace miva
