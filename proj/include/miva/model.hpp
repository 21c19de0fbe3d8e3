#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "attention.hpp"
#include "common.hpp"
#include "config.hpp"
#include "rng.hpp"

namespace miva {

// Shape bundle derived from a Config; every model/adapter/forward consumer
// works off this one struct so dimension bookkeeping lives in a single place.
struct ModelDims {
    int frames = 8;        // F
    int image_size = 64;   // pixel H = W
    int patch = 4;         // autoencoder patch size
    int channels = 8;      // latent channels C
    int d = 160;           // token dim
    int d_t = 160;         // timestep-embedding dim (kept equal to d)
    int blocks = 2;
    int r_cfa = 4;
    int r_ca = 4;  // prompt-slot count L of the factorized CA
    int r_tsa = 2;
    int lat_h = 16, lat_w = 16;  // latent grid
    int sites = 256;             // N = lat_h * lat_w
    int prompt_tokens = 2;       // rows per pattern in the prompt table
    int max_patterns = 8;

    static ModelDims from_config(const Config& c) {
        ModelDims m;
        m.frames = c.get_int("frames");
        m.image_size = c.get_int("image_size");
        m.patch = c.get_int("patch_size");
        m.channels = c.get_int("channels");
        m.d = c.get_int("token_dim");
        m.d_t = m.d;
        m.r_cfa = c.get_int("ranks.cfa");
        m.r_ca = c.get_int("ranks.ca");
        m.r_tsa = c.get_int("ranks.tsa");
        MIVA_CHECK(m.frames >= 2, "frames must be >= 2 (got %d)", m.frames);
        MIVA_CHECK(m.image_size % m.patch == 0, "image_size %d not divisible by patch_size %d",
                   m.image_size, m.patch);
        MIVA_CHECK(m.d >= 8 && m.channels >= 1, "degenerate model dims");
        MIVA_CHECK(m.r_cfa >= 1 && m.r_ca >= 1 && m.r_tsa >= 1, "ranks must be >= 1");
        m.lat_h = m.image_size / m.patch;
        m.lat_w = m.image_size / m.patch;
        m.sites = m.lat_h * m.lat_w;
        return m;
    }

    Eigen::Index rows() const { return Eigen::Index(frames) * sites; }

    bool operator==(const ModelDims&) const = default;
};

// Sinusoidal encoding of the diffusion step t; the model applies a learned
// projection on top of this (see BaseModelT::time_embedding).
template <typename T>
Mat<T> sinusoidal_time(int t, int dim) {
    Mat<T> e(1, dim);
    int half = dim / 2;
    for (int i = 0; i < half; i++) {
        double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
        e(0, 2 * i) = T(std::sin(double(t) * freq));
        e(0, 2 * i + 1) = T(std::cos(double(t) * freq));
    }
    if (dim % 2) e(0, dim - 1) = T(0);
    return e;
}

// Fixed (parameter-free) positional code for the (frame, y, x) token grid.
// Attention layers are otherwise permutation-equivariant, so spatial motion
// would be unlearnable without it. Low-frequency sin/cos per axis; the
// remaining dims stay zero.
template <typename T>
Mat<T> positional_code(const ModelDims& md) {
    const int kFreqs = 4;
    MIVA_CHECK(md.d >= 6 * kFreqs, "token_dim too small for positional code");
    Mat<T> pos = Mat<T>::Zero(md.rows(), md.d);
    const double pi = 3.14159265358979323846;
    for (int f = 0; f < md.frames; f++)
        for (int y = 0; y < md.lat_h; y++)
            for (int x = 0; x < md.lat_w; x++) {
                Eigen::Index r = Eigen::Index(f) * md.sites + Eigen::Index(y) * md.lat_w + x;
                int c = 0;
                for (int k = 0; k < kFreqs; k++) {
                    double wx = 2.0 * pi * double(k + 1) * double(x) / double(md.lat_w);
                    pos(r, c++) = T(std::sin(wx));
                    pos(r, c++) = T(std::cos(wx));
                }
                for (int k = 0; k < kFreqs; k++) {
                    double wy = 2.0 * pi * double(k + 1) * double(y) / double(md.lat_h);
                    pos(r, c++) = T(std::sin(wy));
                    pos(r, c++) = T(std::cos(wy));
                }
                for (int k = 0; k < kFreqs; k++) {
                    double wf = pi * double(k + 1) * double(f) / double(md.frames);
                    pos(r, c++) = T(std::sin(wf));
                    pos(r, c++) = T(std::cos(wf));
                }
            }
    return pos;
}

// The frozen-able toy denoiser: input/output channel projections, a learned
// timestep projection, a per-pattern prompt table, and `blocks` transformer
// blocks each holding an SA, a CA, and a temporal-SA site.
template <typename T>
struct BaseModelT {
    ModelDims md;
    Mat<T> w_in;   // C x d
    Mat<T> w_out;  // d x C
    Mat<T> w_time; // d_t x d_t
    Mat<T> prompt_table;  // (max_patterns * prompt_tokens) x d
    struct Block {
        AttentionParams<T> sa, ca, tsa;
    };
    std::vector<Block> blocks;
    Mat<T> pos;  // fixed positional code, not a parameter

    static BaseModelT make(const ModelDims& md, uint64_t seed) {
        BaseModelT m;
        m.md = md;
        Rng rng(split_seed(seed, 0xba5e));
        T wstd = T(1) / std::sqrt(T(md.d));
        auto g = [&](Eigen::Index r, Eigen::Index c, T std_) {
            Mat<T> w(r, c);
            rng.fill_gaussian(w, double(std_));
            return w;
        };
        m.w_in = g(md.channels, md.d, T(1) / std::sqrt(T(md.channels)));
        m.w_out = g(md.d, md.channels, wstd);
        m.w_time = g(md.d_t, md.d_t, T(1) / std::sqrt(T(md.d_t)));
        m.prompt_table =
            g(Eigen::Index(md.max_patterns) * md.prompt_tokens, md.d, T(1));
        m.blocks.resize(size_t(md.blocks));
        for (auto& b : m.blocks)
            for (AttentionParams<T>* p : {&b.sa, &b.ca, &b.tsa}) {
                p->wq = g(md.d, md.d, wstd);
                p->wk = g(md.d, md.d, wstd);
                p->wv = g(md.d, md.d, wstd);
                p->wo = g(md.d, md.d, wstd);
            }
        m.pos = positional_code<T>(md);
        return m;
    }

    // Visit every parameter in a stable, documented order (serialization,
    // hashing, and the optimizer all rely on this order).
    template <typename Fn>
    void visit_params(Fn&& fn) {
        fn("w_in", w_in);
        fn("w_out", w_out);
        fn("w_time", w_time);
        fn("prompt_table", prompt_table);
        for (size_t b = 0; b < blocks.size(); b++) {
            std::string pre = "block" + std::to_string(b) + ".";
            auto site = [&](const char* name, AttentionParams<T>& p) {
                fn((pre + name + ".wq").c_str(), p.wq);
                fn((pre + name + ".wk").c_str(), p.wk);
                fn((pre + name + ".wv").c_str(), p.wv);
                fn((pre + name + ".wo").c_str(), p.wo);
            };
            site("sa", blocks[b].sa);
            site("ca", blocks[b].ca);
            site("tsa", blocks[b].tsa);
        }
    }
    template <typename Fn>
    void visit_params(Fn&& fn) const {
        const_cast<BaseModelT*>(this)->visit_params(
            [&](const char* n, Mat<T>& m) { fn(n, static_cast<const Mat<T>&>(m)); });
    }

    long param_count() const {
        long n = 0;
        visit_params([&](const char*, const Mat<T>& m) { n += long(m.size()); });
        return n;
    }

    // FNV-1a over raw parameter bytes in visit order; identifies the exact
    // frozen base a checkpoint was trained against.
    uint64_t param_hash() const {
        uint64_t h = 1469598103934665603ull;
        visit_params([&](const char*, const Mat<T>& m) {
            h = fnv1a(m.data(), size_t(m.size()) * sizeof(T), h);
        });
        return h;
    }

    // c_t = sinusoidal(t) * W_time
    Mat<T> time_embedding(int t) const {
        return sinusoidal_time<T>(t, md.d_t) * w_time;
    }

    Mat<T> prompt_for(int pattern_id) const {
        MIVA_CHECK(pattern_id >= 0 && pattern_id < md.max_patterns,
                   "pattern id %d out of range", pattern_id);
        return prompt_table.middleRows(Eigen::Index(pattern_id) * md.prompt_tokens,
                                       md.prompt_tokens);
    }

    template <typename U>
    BaseModelT<U> cast() const {
        BaseModelT<U> m;
        m.md = md;
        m.w_in = w_in.template cast<U>();
        m.w_out = w_out.template cast<U>();
        m.w_time = w_time.template cast<U>();
        m.prompt_table = prompt_table.template cast<U>();
        m.blocks.resize(blocks.size());
        for (size_t b = 0; b < blocks.size(); b++) {
            auto cv = [](const AttentionParams<T>& p) {
                return AttentionParams<U>{p.wq.template cast<U>(), p.wk.template cast<U>(),
                                          p.wv.template cast<U>(), p.wo.template cast<U>()};
            };
            m.blocks[b].sa = cv(blocks[b].sa);
            m.blocks[b].ca = cv(blocks[b].ca);
            m.blocks[b].tsa = cv(blocks[b].tsa);
        }
        m.pos = pos.template cast<U>();
        return m;
    }
};

using BaseModel = BaseModelT<float>;

}  // namespace miva
