#pragma once

#include <cmath>

#include "common.hpp"
#include "rng.hpp"
#include "video.hpp"

namespace miva {

// Deterministic linear patch autoencoder. Each p x p x 3 pixel patch is
// flattened and projected onto an orthonormal basis whose first three columns
// are the per-channel DC directions (so flat regions reconstruct exactly) and
// whose remaining columns are a seeded random orthonormal completion. The
// decoder is the transpose, hence encode(decode(z)) = z for all latents.
// DC channels are affinely rescaled to roughly [-1, 1] so latent magnitudes
// match the unit-variance noise convention.
template <typename T>
struct PatchAutoencoder {
    int patch = 4;
    int img_channels = 3;
    int lat_channels = 8;
    Mat<T> basis;            // (patch*patch*img_channels) x lat_channels, orthonormal columns
    Mat<T> scale, offset;    // 1 x lat_channels affine on latent channels

    static PatchAutoencoder make(int patch_size, int latent_channels, int image_channels = 3) {
        PatchAutoencoder ae;
        ae.patch = patch_size;
        ae.img_channels = image_channels;
        ae.lat_channels = latent_channels;
        const int D = patch_size * patch_size * image_channels;
        MIVA_CHECK(latent_channels >= image_channels && latent_channels <= D,
                   "autoencoder: latent channel count %d out of range [%d, %d]", latent_channels,
                   image_channels, D);
        Mat<double> B = Mat<double>::Zero(D, latent_channels);
        const int pp = patch_size * patch_size;
        const double dc = 1.0 / std::sqrt(double(pp));
        for (int c = 0; c < image_channels; c++)
            for (int i = 0; i < pp; i++) B(c * pp + i, c) = dc;
        // Fixed seed: the autoencoder is part of the model convention, not a
        // trainable or run-dependent object.
        Rng rng(0xae5eed);
        for (int k = image_channels; k < latent_channels; k++) {
            Mat<double> v(D, 1);
            while (true) {
                rng.fill_gaussian(v);
                for (int j = 0; j < k; j++) v -= B.col(j) * (B.col(j).dot(v.col(0)));
                double n = v.norm();
                if (n > 1e-6) {
                    B.col(k) = v.col(0) / n;
                    break;
                }
            }
        }
        ae.basis = B.template cast<T>();
        ae.scale = Mat<T>::Ones(1, latent_channels);
        ae.offset = Mat<T>::Zero(1, latent_channels);
        for (int c = 0; c < image_channels; c++) {
            ae.scale(0, c) = static_cast<T>(2.0 / patch_size);
            ae.offset(0, c) = static_cast<T>(-1.0);
        }
        return ae;
    }

    int latent_hw(int pixels) const {
        MIVA_CHECK(pixels % patch == 0, "image dimension %d not divisible by patch size %d",
                   pixels, patch);
        return pixels / patch;
    }

    // image -> (Hl*Wl) x lat_channels token matrix
    Mat<T> encode(const Image<T>& img) const {
        MIVA_CHECK(img.C() == img_channels, "encode: expected %d channels, got %d", img_channels,
                   img.C());
        int Hl = latent_hw(img.H), Wl = latent_hw(img.W);
        const int pp = patch * patch;
        Mat<T> P(Eigen::Index(Hl) * Wl, Eigen::Index(pp) * img_channels);
        for (int py = 0; py < Hl; py++)
            for (int px = 0; px < Wl; px++) {
                Eigen::Index row = Eigen::Index(py) * Wl + px;
                for (int c = 0; c < img_channels; c++)
                    for (int dy = 0; dy < patch; dy++)
                        for (int dx = 0; dx < patch; dx++)
                            P(row, Eigen::Index(c) * pp + dy * patch + dx) =
                                img.chan[c](py * patch + dy, px * patch + dx);
            }
        Mat<T> z = P * basis;
        for (int c = 0; c < lat_channels; c++)
            z.col(c) = z.col(c) * scale(0, c) + Mat<T>::Constant(z.rows(), 1, offset(0, c));
        return z;
    }

    Image<T> decode(const Mat<T>& z, int Hl, int Wl) const {
        MIVA_CHECK(z.rows() == Eigen::Index(Hl) * Wl && z.cols() == lat_channels,
                   "decode: latent shape mismatch");
        Mat<T> zu = z;
        for (int c = 0; c < lat_channels; c++)
            zu.col(c) = (zu.col(c) - Mat<T>::Constant(z.rows(), 1, offset(0, c))) / scale(0, c);
        Mat<T> P = zu * basis.transpose();
        const int pp = patch * patch;
        Image<T> img(Hl * patch, Wl * patch, img_channels);
        for (int py = 0; py < Hl; py++)
            for (int px = 0; px < Wl; px++) {
                Eigen::Index row = Eigen::Index(py) * Wl + px;
                for (int c = 0; c < img_channels; c++)
                    for (int dy = 0; dy < patch; dy++)
                        for (int dx = 0; dx < patch; dx++)
                            img.chan[c](py * patch + dy, px * patch + dx) =
                                P(row, Eigen::Index(c) * pp + dy * patch + dx);
            }
        return img;
    }

    // Single-channel mask -> latent tokens, via replication to all image channels.
    Mat<T> encode_mask(const Mat<T>& mask) const {
        Image<T> img(static_cast<int>(mask.rows()), static_cast<int>(mask.cols()), img_channels);
        for (int c = 0; c < img_channels; c++) img.chan[c] = mask;
        return encode(img);
    }

    // Latent mask tokens -> confidence map in [0,1] (channel average, clamped).
    Mat<T> decode_mask(const Mat<T>& z, int Hl, int Wl) const {
        Image<T> img = decode(z, Hl, Wl);
        Mat<T> m = Mat<T>::Zero(img.H, img.W);
        for (int c = 0; c < img_channels; c++) m += img.chan[c];
        m /= static_cast<T>(img_channels);
        return m.cwiseMax(T(0)).cwiseMin(T(1)).eval();
    }
};

}  // namespace miva
