#pragma once

#include <zlib.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "common.hpp"
#include "video.hpp"

namespace miva {

namespace pngdetail {

inline void put_u32be(std::vector<uint8_t>& v, uint32_t x) {
    v.push_back(uint8_t(x >> 24));
    v.push_back(uint8_t(x >> 16));
    v.push_back(uint8_t(x >> 8));
    v.push_back(uint8_t(x));
}

inline uint32_t get_u32be(const uint8_t* p) {
    return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

inline void write_chunk(std::vector<uint8_t>& out, const char type[5],
                        const std::vector<uint8_t>& data) {
    put_u32be(out, static_cast<uint32_t>(data.size()));
    size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    uint32_t crc = crc32(0, out.data() + start, static_cast<uInt>(out.size() - start));
    put_u32be(out, crc);
}

inline uint8_t paeth(int a, int b, int c) {
    int p = a + b - c;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return uint8_t(a);
    if (pb <= pc) return uint8_t(b);
    return uint8_t(c);
}

}  // namespace pngdetail

// 8-bit PNG encoder (grayscale or RGB, filter 0, no interlace).
inline std::vector<uint8_t> png_encode(const std::vector<uint8_t>& pixels, int W, int H,
                                       int channels) {
    using namespace pngdetail;
    MIVA_CHECK(channels == 1 || channels == 3, "png_encode: %d channels unsupported", channels);
    MIVA_CHECK(pixels.size() == size_t(W) * H * channels, "png_encode: pixel buffer size mismatch");
    std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    std::vector<uint8_t> ihdr;
    put_u32be(ihdr, uint32_t(W));
    put_u32be(ihdr, uint32_t(H));
    ihdr.push_back(8);
    ihdr.push_back(channels == 1 ? 0 : 2);
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    write_chunk(out, "IHDR", ihdr);

    std::vector<uint8_t> raw;
    raw.reserve(size_t(H) * (1 + size_t(W) * channels));
    for (int y = 0; y < H; y++) {
        raw.push_back(0);  // filter type 0
        raw.insert(raw.end(), pixels.begin() + size_t(y) * W * channels,
                   pixels.begin() + size_t(y + 1) * W * channels);
    }
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> comp(bound);
    int rc = compress2(comp.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6);
    MIVA_CHECK_IO(rc == Z_OK, "png_encode: zlib compress failed (%d)", rc);
    comp.resize(bound);
    write_chunk(out, "IDAT", comp);
    write_chunk(out, "IEND", {});
    return out;
}

// 8-bit PNG decoder: grayscale, RGB or RGBA, all five scanline filters,
// no interlace, no palette. Returns channel count via out param.
inline std::vector<uint8_t> png_decode(const std::vector<uint8_t>& file, int& W, int& H,
                                       int& channels) {
    using namespace pngdetail;
    static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    MIVA_CHECK_IO(file.size() > 8 && memcmp(file.data(), sig, 8) == 0, "png: bad signature");
    size_t pos = 8;
    std::vector<uint8_t> idat;
    W = H = channels = 0;
    int bitdepth = 0, colortype = -1;
    while (pos + 8 <= file.size()) {
        uint32_t len = get_u32be(&file[pos]);
        MIVA_CHECK_IO(pos + 12 + len <= file.size(), "png: truncated chunk");
        const char* type = reinterpret_cast<const char*>(&file[pos + 4]);
        const uint8_t* data = &file[pos + 8];
        if (memcmp(type, "IHDR", 4) == 0) {
            MIVA_CHECK_IO(len == 13, "png: bad IHDR");
            W = int(get_u32be(data));
            H = int(get_u32be(data + 4));
            bitdepth = data[8];
            colortype = data[9];
            MIVA_CHECK_IO(bitdepth == 8, "png: only 8-bit depth supported");
            MIVA_CHECK_IO(colortype == 0 || colortype == 2 || colortype == 6,
                          "png: color type %d unsupported", colortype);
            MIVA_CHECK_IO(data[12] == 0, "png: interlaced images unsupported");
            channels = colortype == 0 ? 1 : (colortype == 2 ? 3 : 4);
        } else if (memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), data, data + len);
        } else if (memcmp(type, "IEND", 4) == 0) {
            break;
        }
        pos += 12 + len;
    }
    MIVA_CHECK_IO(W > 0 && H > 0 && !idat.empty(), "png: missing IHDR or IDAT");
    size_t stride = size_t(W) * channels;
    uLongf rawlen = static_cast<uLongf>(size_t(H) * (stride + 1));
    std::vector<uint8_t> raw(rawlen);
    int rc = uncompress(raw.data(), &rawlen, idat.data(), static_cast<uLong>(idat.size()));
    MIVA_CHECK_IO(rc == Z_OK && rawlen == size_t(H) * (stride + 1), "png: inflate failed (%d)", rc);

    std::vector<uint8_t> pix(size_t(H) * stride);
    int bpp = channels;
    for (int y = 0; y < H; y++) {
        uint8_t filter = raw[size_t(y) * (stride + 1)];
        const uint8_t* src = &raw[size_t(y) * (stride + 1) + 1];
        uint8_t* dst = &pix[size_t(y) * stride];
        const uint8_t* up = y > 0 ? &pix[size_t(y - 1) * stride] : nullptr;
        for (size_t x = 0; x < stride; x++) {
            int a = x >= size_t(bpp) ? dst[x - bpp] : 0;
            int b = up ? up[x] : 0;
            int c = (up && x >= size_t(bpp)) ? up[x - bpp] : 0;
            int v = src[x];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += paeth(a, b, c); break;
                default: throw io_error(strf("png: unknown filter %d", filter));
            }
            dst[x] = uint8_t(v);
        }
    }
    return pix;
}

inline void write_file_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary);
    MIVA_CHECK_IO(f.good(), "cannot open for writing: %s", path.c_str());
    f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    MIVA_CHECK_IO(f.good(), "write failed: %s", path.c_str());
}

inline std::vector<uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    MIVA_CHECK_IO(f.good(), "cannot open: %s", path.c_str());
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    return bytes;
}

template <typename T>
void save_png(const Image<T>& img, const std::string& path) {
    int C = img.C();
    MIVA_CHECK(C == 1 || C == 3, "save_png: %d channels unsupported", C);
    std::vector<uint8_t> pix(size_t(img.H) * img.W * C);
    for (int y = 0; y < img.H; y++)
        for (int x = 0; x < img.W; x++)
            for (int c = 0; c < C; c++) {
                double v = double(img.chan[c](y, x));
                v = v < 0 ? 0 : (v > 1 ? 1 : v);
                pix[(size_t(y) * img.W + x) * C + c] = uint8_t(std::lround(v * 255.0));
            }
    write_file_bytes(path, png_encode(pix, img.W, img.H, C));
}

template <typename T>
void save_png_mask(const Mat<T>& mask, const std::string& path) {
    Image<T> img(static_cast<int>(mask.rows()), static_cast<int>(mask.cols()), 1);
    img.chan[0] = mask;
    save_png(img, path);
}

// Loads a PNG as float channels in [0,1]; alpha (if present) is dropped.
template <typename T>
Image<T> load_png(const std::string& path) {
    int W = 0, H = 0, C = 0;
    std::vector<uint8_t> pix = png_decode(read_file_bytes(path), W, H, C);
    int keep = C == 4 ? 3 : C;
    Image<T> img(H, W, keep);
    for (int y = 0; y < H; y++)
        for (int x = 0; x < W; x++)
            for (int c = 0; c < keep; c++)
                img.chan[c](y, x) = static_cast<T>(pix[(size_t(y) * W + x) * C + c] / 255.0);
    return img;
}

}  // namespace miva
