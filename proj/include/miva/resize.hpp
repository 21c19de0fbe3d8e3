#pragma once

#include <cmath>

#include "common.hpp"

namespace miva {

// Bilinear resampling with half-pixel center alignment: destination pixel
// (i,j) samples source coordinate ((i+0.5)*H/h - 0.5, (j+0.5)*W/w - 0.5),
// clamped at the borders.
template <typename T>
Mat<T> bilinear_resize(const Mat<T>& src, int h, int w) {
    int H = static_cast<int>(src.rows()), W = static_cast<int>(src.cols());
    MIVA_CHECK(H >= 1 && W >= 1 && h >= 1 && w >= 1, "bilinear_resize: zero-area image");
    Mat<T> out(h, w);
    double sy = double(H) / h, sx = double(W) / w;
    for (int i = 0; i < h; i++) {
        double fy = (i + 0.5) * sy - 0.5;
        int y0 = static_cast<int>(std::floor(fy));
        double wy = fy - y0;
        int y1 = y0 + 1;
        y0 = y0 < 0 ? 0 : (y0 >= H ? H - 1 : y0);
        y1 = y1 < 0 ? 0 : (y1 >= H ? H - 1 : y1);
        for (int j = 0; j < w; j++) {
            double fx = (j + 0.5) * sx - 0.5;
            int x0 = static_cast<int>(std::floor(fx));
            double wx = fx - x0;
            int x1 = x0 + 1;
            x0 = x0 < 0 ? 0 : (x0 >= W ? W - 1 : x0);
            x1 = x1 < 0 ? 0 : (x1 >= W ? W - 1 : x1);
            double v = (1 - wy) * ((1 - wx) * src(y0, x0) + wx * src(y0, x1)) +
                       wy * ((1 - wx) * src(y1, x0) + wx * src(y1, x1));
            out(i, j) = static_cast<T>(v);
        }
    }
    return out;
}

}  // namespace miva
