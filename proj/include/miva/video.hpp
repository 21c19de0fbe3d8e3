#pragma once

#include <vector>

#include "common.hpp"

namespace miva {

// Channel-planar pixel image, values nominally in [0,1].
template <typename T>
struct Image {
    int H = 0, W = 0;
    std::vector<Mat<T>> chan;  // each H x W

    Image() = default;
    Image(int h, int w, int c) : H(h), W(w), chan(c, Mat<T>::Zero(h, w)) {}
    int C() const { return static_cast<int>(chan.size()); }
};

template <typename T>
struct PixelVideo {
    std::vector<Image<T>> frames;
    int F() const { return static_cast<int>(frames.size()); }
};

// Latent video: one token matrix per frame, row = spatial site (y*W + x),
// column = latent channel.
template <typename T>
struct LatentVideo {
    int Hl = 0, Wl = 0;
    std::vector<Mat<T>> frames;  // each (Hl*Wl) x C

    int F() const { return static_cast<int>(frames.size()); }
    int C() const { return frames.empty() ? 0 : static_cast<int>(frames[0].cols()); }
    int sites() const { return Hl * Wl; }

    bool finite() const {
        for (auto& f : frames)
            if (!f.allFinite()) return false;
        return true;
    }

    // All frames stacked into one (F*N) x C matrix, frame-major.
    Mat<T> stacked() const {
        Mat<T> X(Eigen::Index(F()) * sites(), C());
        for (int f = 0; f < F(); f++) X.middleRows(Eigen::Index(f) * sites(), sites()) = frames[f];
        return X;
    }

    static LatentVideo from_stacked(const Mat<T>& X, int F, int Hl, int Wl) {
        LatentVideo v;
        v.Hl = Hl;
        v.Wl = Wl;
        Eigen::Index N = Eigen::Index(Hl) * Wl;
        MIVA_CHECK(X.rows() == N * F, "from_stacked: row count mismatch");
        for (int f = 0; f < F; f++) v.frames.push_back(X.middleRows(f * N, N).eval());
        return v;
    }

    // Per-channel F x (Hl*Wl) cube view used by the frequency-domain ops.
    Mat<T> channel_cube(int c) const {
        Mat<T> cube(F(), sites());
        for (int f = 0; f < F(); f++) cube.row(f) = frames[f].col(c).transpose();
        return cube;
    }
    void set_channel_cube(int c, const Mat<T>& cube) {
        for (int f = 0; f < F(); f++) frames[f].col(c) = cube.row(f).transpose();
    }
};

}  // namespace miva
