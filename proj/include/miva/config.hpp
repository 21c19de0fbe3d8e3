#pragma once

#include <array>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "common.hpp"

namespace miva {

// Flat key = value configuration. Unknown keys are rejected and every key has
// a documented default (see README). The canonical serialization is embedded
// verbatim into every artifact this tool writes.
struct Config {
    static const std::vector<std::pair<std::string, std::string>>& defaults() {
        static const std::vector<std::pair<std::string, std::string>> d = {
            {"frames", "8"},
            {"image_size", "64"},
            {"patch_size", "4"},
            {"channels", "8"},
            {"token_dim", "160"},
            {"ranks.cfa", "4"},
            {"ranks.ca", "4"},
            {"ranks.tsa", "2"},
            {"epsilon_mask", "1e-6"},
            {"mask_steps", "0:40:5"},
            {"alpha_shared", "0.2"},
            {"lowpass_ratio", "0.25"},
            {"lr", "1e-5"},
            {"iters", "2000"},
            {"seed", "0"},
            {"steps", "50"},
        };
        return d;
    }

    std::map<std::string, std::string> kv;

    Config() {
        for (auto& [k, v] : defaults()) kv[k] = v;
    }

    static bool known_key(const std::string& k) {
        for (auto& [dk, dv] : defaults())
            if (dk == k) return true;
        return false;
    }

    void set(const std::string& k, const std::string& v) {
        if (!known_key(k)) throw usage_error("unknown config key: " + k);
        kv[k] = v;
    }

    static std::string trim(const std::string& s) {
        size_t a = s.find_first_not_of(" \t\r\n");
        if (a == std::string::npos) return "";
        size_t b = s.find_last_not_of(" \t\r\n");
        return s.substr(a, b - a + 1);
    }

    // Parses `key = value` lines; '#' starts a comment.
    void load_text(const std::string& text) {
        std::istringstream in(text);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            lineno++;
            size_t hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            line = trim(line);
            if (line.empty()) continue;
            size_t eq = line.find('=');
            if (eq == std::string::npos)
                throw usage_error(strf("config line %d: expected key = value", lineno));
            std::string k = trim(line.substr(0, eq));
            std::string v = trim(line.substr(eq + 1));
            if (k.empty()) throw usage_error(strf("config line %d: empty key", lineno));
            set(k, v);
        }
    }

    void load_file(const std::string& path) {
        std::ifstream f(path);
        MIVA_CHECK_IO(f.good(), "cannot open config file: %s", path.c_str());
        std::stringstream ss;
        ss << f.rdbuf();
        load_text(ss.str());
    }

    std::string get(const std::string& k) const {
        auto it = kv.find(k);
        if (it == kv.end()) throw usage_error("unknown config key: " + k);
        return it->second;
    }

    long get_int(const std::string& k) const {
        const std::string v = get(k);
        char* end = nullptr;
        long r = strtol(v.c_str(), &end, 10);
        if (end == v.c_str() || *end != '\0')
            throw usage_error(strf("config key %s: expected integer, got '%s'", k.c_str(), v.c_str()));
        return r;
    }

    double get_real(const std::string& k) const {
        const std::string v = get(k);
        char* end = nullptr;
        double r = strtod(v.c_str(), &end);
        if (end == v.c_str() || *end != '\0')
            throw usage_error(strf("config key %s: expected number, got '%s'", k.c_str(), v.c_str()));
        return r;
    }

    // "start:stop:step" -> list of DDIM iteration indices.
    std::vector<int> get_step_set(const std::string& k) const {
        const std::string v = get(k);
        int a = 0, b = 0, s = 0;
        if (sscanf(v.c_str(), "%d:%d:%d", &a, &b, &s) != 3 || s <= 0 || a < 0 || b <= a)
            throw usage_error(strf("config key %s: expected start:stop:step, got '%s'", k.c_str(), v.c_str()));
        std::vector<int> out;
        for (int i = a; i < b; i += s) out.push_back(i);
        return out;
    }

    // Canonical form: documented key order, one `key = value` per line.
    std::string canonical() const {
        std::string out;
        for (auto& [k, dv] : defaults()) {
            out += k;
            out += " = ";
            out += kv.at(k);
            out += "\n";
        }
        return out;
    }

    uint64_t seed_with_env() const {
        const char* env = getenv("MIVA_SEED");
        if (env && *env) return strtoull(env, nullptr, 10);
        return static_cast<uint64_t>(get_int("seed"));
    }
};

}  // namespace miva
