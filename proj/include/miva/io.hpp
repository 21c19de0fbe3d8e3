#pragma once

#include <json.hpp>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "adapter.hpp"
#include "autoencoder.hpp"
#include "config.hpp"
#include "image_io.hpp"
#include "model.hpp"
#include "synth.hpp"
#include "trainer.hpp"
#include "video.hpp"

namespace miva {

namespace iodetail {

inline void put_u32le(std::vector<uint8_t>& v, uint32_t x) {
    v.push_back(uint8_t(x));
    v.push_back(uint8_t(x >> 8));
    v.push_back(uint8_t(x >> 16));
    v.push_back(uint8_t(x >> 24));
}

inline void put_f32le(std::vector<uint8_t>& v, float x) {
    uint32_t u;
    std::memcpy(&u, &x, 4);
    put_u32le(v, u);
}

struct Cursor {
    const uint8_t* p;
    const uint8_t* end;
    std::string what;

    const uint8_t* need(size_t n) {
        MIVA_CHECK_IO(size_t(end - p) >= n, "%s: truncated (need %zu more bytes)", what.c_str(),
                      n);
        const uint8_t* r = p;
        p += n;
        return r;
    }
    uint32_t u32() {
        const uint8_t* r = need(4);
        return uint32_t(r[0]) | (uint32_t(r[1]) << 8) | (uint32_t(r[2]) << 16) |
               (uint32_t(r[3]) << 24);
    }
    float f32() {
        uint32_t u = u32();
        float f;
        std::memcpy(&f, &u, 4);
        return f;
    }
    std::string str(size_t n) {
        const uint8_t* r = need(n);
        return std::string(reinterpret_cast<const char*>(r), n);
    }
};

inline void put_mat(std::vector<uint8_t>& out, const std::string& name, const Matf& m) {
    put_u32le(out, uint32_t(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_u32le(out, uint32_t(m.rows()));
    put_u32le(out, uint32_t(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); i++) put_f32le(out, m.data()[i]);  // row-major
}

}  // namespace iodetail

// ---------------------------------------------------------------------------
// Checkpoint container: magic "MIVA1", little-endian u32 JSON length, UTF-8
// JSON metadata (kind, pattern, base-model hash, full config text, exact
// invocation), u32 array count, then named float32 arrays (row-major).
// ---------------------------------------------------------------------------

struct CheckpointFile {
    std::string kind;  // "base", "miva", or "mmiva"
    Config config;
    std::string invocation;
    std::string pattern;
    uint64_t base_hash = 0;
    std::vector<std::pair<std::string, Matf>> arrays;
};

namespace iodetail {

inline constexpr char kCkptMagic[6] = {'M', 'I', 'V', 'A', '1', '\n'};
inline constexpr char kVideoMagic[4] = {'M', 'I', 'V', 'V'};

inline std::vector<uint8_t> encode_checkpoint(const CheckpointFile& f) {
    nlohmann::json meta;
    meta["kind"] = f.kind;
    meta["pattern"] = f.pattern;
    meta["base_hash"] = strf("%016llx", static_cast<unsigned long long>(f.base_hash));
    meta["config"] = f.config.canonical();
    meta["invocation"] = f.invocation;
    std::string js = meta.dump();
    std::vector<uint8_t> out(kCkptMagic, kCkptMagic + sizeof(kCkptMagic));
    put_u32le(out, uint32_t(js.size()));
    out.insert(out.end(), js.begin(), js.end());
    put_u32le(out, uint32_t(f.arrays.size()));
    for (auto& [name, m] : f.arrays) put_mat(out, name, m);
    return out;
}

inline CheckpointFile decode_checkpoint(const std::vector<uint8_t>& bytes,
                                        const std::string& path) {
    Cursor c{bytes.data(), bytes.data() + bytes.size(), path};
    MIVA_CHECK_IO(std::memcmp(c.need(sizeof(kCkptMagic)), kCkptMagic, sizeof(kCkptMagic)) == 0,
                  "%s: not a MIVA1 checkpoint", path.c_str());
    CheckpointFile f;
    nlohmann::json meta = nlohmann::json::parse(c.str(c.u32()));
    f.kind = meta.at("kind").get<std::string>();
    f.pattern = meta.at("pattern").get<std::string>();
    f.base_hash = strtoull(meta.at("base_hash").get<std::string>().c_str(), nullptr, 16);
    f.config.load_text(meta.at("config").get<std::string>());
    f.invocation = meta.at("invocation").get<std::string>();
    uint32_t count = c.u32();
    for (uint32_t i = 0; i < count; i++) {
        std::string name = c.str(c.u32());
        uint32_t rows = c.u32(), cols = c.u32();
        Matf m(rows, cols);
        const uint8_t* raw = c.need(size_t(rows) * cols * 4);
        std::memcpy(m.data(), raw, size_t(rows) * cols * 4);
        f.arrays.emplace_back(std::move(name), std::move(m));
    }
    MIVA_CHECK_IO(c.p == c.end, "%s: %zu trailing bytes", path.c_str(), size_t(c.end - c.p));
    return f;
}

// Overwrite every model parameter from the file's arrays, requiring an exact
// one-to-one match and reporting every discrepancy at once.
template <typename ModelLike>
void fill_params(ModelLike& model, const CheckpointFile& f, const std::string& path) {
    std::map<std::string, const Matf*> avail;
    for (auto& [name, m] : f.arrays) {
        MIVA_CHECK_IO(!avail.count(name), "%s: duplicate array '%s'", path.c_str(), name.c_str());
        avail[name] = &m;
    }
    std::vector<std::string> problems;
    std::map<std::string, bool> used;
    model.visit_params([&](const char* name, Matf& p) {
        auto it = avail.find(name);
        if (it == avail.end()) {
            problems.push_back(strf("missing array '%s'", name));
            return;
        }
        used[name] = true;
        const Matf& m = *it->second;
        if (m.rows() != p.rows() || m.cols() != p.cols())
            problems.push_back(strf("array '%s': file %ldx%ld, model expects %ldx%ld", name,
                                    long(m.rows()), long(m.cols()), long(p.rows()),
                                    long(p.cols())));
        else
            p = m;
    });
    for (auto& [name, m] : f.arrays)
        if (!used.count(name)) problems.push_back(strf("unexpected array '%s'", name.c_str()));
    if (!problems.empty()) {
        std::string msg = path + ": checkpoint does not fit the model:";
        for (auto& s : problems) msg += "\n  " + s;
        throw io_error(msg);
    }
}

}  // namespace iodetail

inline void save_base_checkpoint(const std::string& path, const BaseModel& base,
                                 const Config& cfg, const std::string& invocation) {
    CheckpointFile f;
    f.kind = "base";
    f.config = cfg;
    f.invocation = invocation;
    f.base_hash = base.param_hash();
    base.visit_params([&](const char* n, const Matf& m) { f.arrays.emplace_back(n, m); });
    write_file_bytes(path, iodetail::encode_checkpoint(f));
}

inline BaseModel load_base_checkpoint(const std::string& path, Config* cfg_out = nullptr) {
    CheckpointFile f = iodetail::decode_checkpoint(read_file_bytes(path), path);
    MIVA_CHECK_IO(f.kind == "base", "%s: expected a base checkpoint, found kind '%s'",
                  path.c_str(), f.kind.c_str());
    BaseModel base = BaseModel::make(ModelDims::from_config(f.config), 0);
    iodetail::fill_params(base, f, path);
    if (cfg_out) *cfg_out = f.config;
    return base;
}

inline void save_adapter_checkpoint(const std::string& path, const Checkpoint& ck,
                                    const Config& cfg, const std::string& invocation) {
    CheckpointFile f;
    f.kind = ck.masked ? "mmiva" : "miva";
    f.config = cfg;
    f.invocation = invocation;
    f.pattern = ck.pattern;
    f.base_hash = ck.base_hash;
    ck.visit_params([&](const char* n, const Matf& m) { f.arrays.emplace_back(n, m); });
    write_file_bytes(path, iodetail::encode_checkpoint(f));
}

inline Checkpoint load_adapter_checkpoint(const std::string& path, Config* cfg_out = nullptr) {
    CheckpointFile f = iodetail::decode_checkpoint(read_file_bytes(path), path);
    MIVA_CHECK_IO(f.kind == "miva" || f.kind == "mmiva",
                  "%s: expected an adapter checkpoint, found kind '%s'", path.c_str(),
                  f.kind.c_str());
    Checkpoint ck =
        Checkpoint::make(ModelDims::from_config(f.config), f.kind == "mmiva", 0, f.pattern);
    ck.base_hash = f.base_hash;
    iodetail::fill_params(ck, f, path);
    if (cfg_out) *cfg_out = f.config;
    return ck;
}

// ---------------------------------------------------------------------------
// Raw video container: magic "MIVV", u32 F/H/W/C, u32 JSON length, JSON
// metadata (config, invocation, pattern), then frame-major channel-planar
// float32 pixel data (F x C x H x W).
// ---------------------------------------------------------------------------

struct VideoFile {
    PixelVideo<float> video;
    Config config;
    std::string invocation;
    std::string pattern;
};

inline void save_video(const std::string& path, const PixelVideo<float>& v, const Config& cfg,
                       const std::string& invocation, const std::string& pattern = "") {
    using namespace iodetail;
    MIVA_CHECK(v.F() >= 1, "save_video: empty video");
    nlohmann::json meta;
    meta["config"] = cfg.canonical();
    meta["invocation"] = invocation;
    meta["pattern"] = pattern;
    std::string js = meta.dump();
    std::vector<uint8_t> out(kVideoMagic, kVideoMagic + sizeof(kVideoMagic));
    put_u32le(out, uint32_t(v.F()));
    put_u32le(out, uint32_t(v.frames[0].H));
    put_u32le(out, uint32_t(v.frames[0].W));
    put_u32le(out, uint32_t(v.frames[0].C()));
    put_u32le(out, uint32_t(js.size()));
    out.insert(out.end(), js.begin(), js.end());
    for (auto& fr : v.frames) {
        MIVA_CHECK(fr.H == v.frames[0].H && fr.W == v.frames[0].W && fr.C() == v.frames[0].C(),
                   "save_video: inconsistent frame shapes");
        for (auto& ch : fr.chan)
            for (Eigen::Index i = 0; i < ch.size(); i++) put_f32le(out, ch.data()[i]);
    }
    write_file_bytes(path, out);
}

inline VideoFile load_video(const std::string& path) {
    using namespace iodetail;
    std::vector<uint8_t> bytes = read_file_bytes(path);
    Cursor c{bytes.data(), bytes.data() + bytes.size(), path};
    MIVA_CHECK_IO(std::memcmp(c.need(sizeof(kVideoMagic)), kVideoMagic, sizeof(kVideoMagic)) == 0,
                  "%s: not a MIVV video container", path.c_str());
    uint32_t F = c.u32(), H = c.u32(), W = c.u32(), C = c.u32();
    MIVA_CHECK_IO(F >= 1 && H >= 1 && W >= 1 && C >= 1 && F < 4096 && H <= 8192 && W <= 8192 &&
                      C <= 16,
                  "%s: implausible header %ux%ux%ux%u", path.c_str(), F, H, W, C);
    VideoFile vf;
    nlohmann::json meta = nlohmann::json::parse(c.str(c.u32()));
    vf.config.load_text(meta.at("config").get<std::string>());
    vf.invocation = meta.at("invocation").get<std::string>();
    vf.pattern = meta.value("pattern", "");
    for (uint32_t f = 0; f < F; f++) {
        Image<float> img{int(H), int(W), int(C)};
        for (uint32_t ch = 0; ch < C; ch++) {
            const uint8_t* raw = c.need(size_t(H) * W * 4);
            std::memcpy(img.chan[ch].data(), raw, size_t(H) * W * 4);
        }
        vf.video.frames.push_back(std::move(img));
    }
    MIVA_CHECK_IO(c.p == c.end, "%s: %zu trailing bytes", path.c_str(), size_t(c.end - c.p));
    return vf;
}

// ---------------------------------------------------------------------------
// CSV artifacts: invocation and config embedded as leading '#' comments.
// ---------------------------------------------------------------------------

inline std::string config_one_line(const Config& cfg) {
    std::string c = cfg.canonical(), out;
    for (size_t i = 0; i < c.size(); i++) {
        if (c[i] == '\n') {
            if (i + 1 < c.size()) out += "; ";
        } else
            out += c[i];
    }
    return out;
}

inline void save_csv(const std::string& path, const std::string& header,
                     const std::vector<std::vector<double>>& rows, const Config& cfg,
                     const std::string& invocation) {
    std::string out = "# invocation: " + invocation + "\n";
    out += "# config: " + config_one_line(cfg) + "\n";
    out += header + "\n";
    for (auto& r : rows) {
        for (size_t i = 0; i < r.size(); i++) {
            if (i) out += ",";
            out += strf("%.9g", r[i]);
        }
        out += "\n";
    }
    write_file_bytes(path, std::vector<uint8_t>(out.begin(), out.end()));
}

// ---------------------------------------------------------------------------
// Dataset directory: clip_NNNN.mivv plus clip_NNNN_mask_FFF.png sequences.
// ---------------------------------------------------------------------------

struct DatasetClip {
    PixelVideo<float> video;
    std::vector<Matf> masks;  // may be empty (no mask stream)
    std::string pattern;
};

inline std::string clip_path(const std::string& dir, int idx) {
    return dir + strf("/clip_%04d.mivv", idx);
}
inline std::string clip_mask_path(const std::string& dir, int idx, int frame) {
    return dir + strf("/clip_%04d_mask_%03d.png", idx, frame);
}

inline void save_dataset_clip(const std::string& dir, int idx, const DatasetClip& clip,
                              const Config& cfg, const std::string& invocation) {
    std::filesystem::create_directories(dir);
    save_video(clip_path(dir, idx), clip.video, cfg, invocation, clip.pattern);
    for (size_t f = 0; f < clip.masks.size(); f++)
        save_png_mask(clip.masks[f], clip_mask_path(dir, idx, int(f)));
}

inline std::vector<DatasetClip> load_dataset_dir(const std::string& dir) {
    std::vector<DatasetClip> clips;
    for (int i = 0;; i++) {
        std::string vp = clip_path(dir, i);
        if (!std::filesystem::exists(vp)) break;
        VideoFile vf = load_video(vp);
        DatasetClip c;
        c.video = std::move(vf.video);
        c.pattern = vf.pattern;
        for (int f = 0; f < c.video.F(); f++) {
            std::string mp = clip_mask_path(dir, i, f);
            if (!std::filesystem::exists(mp)) break;
            Image<float> m = load_png<float>(mp);
            c.masks.push_back(m.chan[0]);
        }
        MIVA_CHECK_IO(c.masks.empty() || int(c.masks.size()) == c.video.F(),
                      "%s: clip %d has %zu masks for %d frames", dir.c_str(), i, c.masks.size(),
                      c.video.F());
        clips.push_back(std::move(c));
    }
    MIVA_CHECK_IO(!clips.empty(), "%s: no clips found (expected clip_0000.mivv ...)", dir.c_str());
    return clips;
}

inline int pattern_id(const std::string& name) {
    const auto& names = pattern_names();
    for (size_t i = 0; i < names.size(); i++)
        if (names[i] == name) return int(i);
    throw usage_error("unknown motion pattern: " + name);
}

// Encode a loaded dataset for training: pixel clips to latent tokens, masks
// to both mask latents (replicated-channel encode) and pixel ground truth.
inline std::vector<TrainClip<float>> encode_dataset(const std::vector<DatasetClip>& clips,
                                                    const PatchAutoencoder<float>& vae,
                                                    bool need_masks, bool need_pattern) {
    std::vector<TrainClip<float>> out;
    for (auto& c : clips) {
        TrainClip<float> tc;
        tc.video.Hl = vae.latent_hw(c.video.frames[0].H);
        tc.video.Wl = vae.latent_hw(c.video.frames[0].W);
        for (auto& fr : c.video.frames) tc.video.frames.push_back(vae.encode(fr));
        if (need_masks) {
            MIVA_CHECK(!c.masks.empty(), "dataset clip lacks masks (required for masked training)");
            tc.mask_lat.Hl = tc.video.Hl;
            tc.mask_lat.Wl = tc.video.Wl;
            for (auto& m : c.masks) {
                tc.mask_lat.frames.push_back(vae.encode_mask(m));
                tc.mask_px.maps.push_back(m);
            }
        }
        if (need_pattern) tc.pattern = pattern_id(c.pattern);
        out.push_back(std::move(tc));
    }
    return out;
}

}  // namespace miva
