#pragma once

#include <cmath>

#include "common.hpp"

namespace miva {

// Orthonormal type-II DCT basis: D(k,n) = s_k * cos(pi*(2n+1)*k / (2N)),
// s_0 = sqrt(1/N), s_k = sqrt(2/N). D * D^T = I, so the inverse transform is
// the transpose.
template <typename T>
Mat<T> dct_matrix(int N) {
    MIVA_CHECK(N >= 1, "dct_matrix: N must be positive");
    Mat<T> D(N, N);
    const double pi = 3.14159265358979323846264338327950288;
    for (int k = 0; k < N; k++) {
        double s = std::sqrt((k == 0 ? 1.0 : 2.0) / N);
        for (int n = 0; n < N; n++)
            D(k, n) = static_cast<T>(s * std::cos(pi * (2 * n + 1) * k / (2.0 * N)));
    }
    return D;
}

// A cube F x H x W is stored as an F x (H*W) matrix, one row-major slice per
// row. The 3-D transform applies the 1-D orthonormal DCT along width, height,
// then the frame axis.
template <typename T>
Mat<T> dct3(const Mat<T>& cube, int F, int H, int W, bool inverse = false) {
    MIVA_CHECK(cube.rows() == F && cube.cols() == Eigen::Index(H) * W,
               "dct3: cube shape mismatch (%ldx%ld vs %d x %d)", long(cube.rows()),
               long(cube.cols()), F, H * W);
    Mat<T> DF = dct_matrix<T>(F), DH = dct_matrix<T>(H), DW = dct_matrix<T>(W);
    if (inverse) {
        DF.transposeInPlace();
        DH.transposeInPlace();
        DW.transposeInPlace();
    }
    Mat<T> out(F, Eigen::Index(H) * W);
    Mat<T> tmp(H, W);
    for (int f = 0; f < F; f++) {
        Eigen::Map<const Mat<T>> slice(cube.row(f).data(), H, W);
        tmp.noalias() = DH * slice;
        Eigen::Map<Mat<T>> oslice(out.row(f).data(), H, W);
        oslice.noalias() = tmp * DW.transpose();
    }
    return (DF * out).eval();
}

template <typename T>
Mat<T> idct3(const Mat<T>& coeffs, int F, int H, int W) {
    return dct3(coeffs, F, H, W, true);
}

// Separable low-pass box mask: 1 where every axis index is below
// ceil(ratio * dim), 0 elsewhere. ratio = 0 gives the empty mask.
template <typename T>
Mat<T> lowpass_box(int F, int H, int W, double ratio) {
    MIVA_CHECK(ratio >= 0.0 && ratio <= 1.0, "lowpass_box: ratio must be in [0,1]");
    int kf = static_cast<int>(std::ceil(ratio * F));
    int kh = static_cast<int>(std::ceil(ratio * H));
    int kw = static_cast<int>(std::ceil(ratio * W));
    Mat<T> L = Mat<T>::Zero(F, Eigen::Index(H) * W);
    for (int f = 0; f < kf; f++)
        for (int h = 0; h < kh; h++)
            for (int w = 0; w < kw; w++) L(f, Eigen::Index(h) * W + w) = T(1);
    return L;
}

}  // namespace miva
