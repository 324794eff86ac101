#pragma once

// Run configuration: flat key=value files with '#' comments, flag overrides
// applied on top, an FNV-1a hash of the effective settings for manifests,
// and the per-output-directory run manifest.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "snapuq/error.hpp"

namespace snapuq {

inline constexpr const char* tool_version = "0.1.0";

inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

struct kv_config {
    std::map<std::string, std::string> values;

    bool has(const std::string& key) const { return values.count(key) > 0; }
    void set(const std::string& key, const std::string& value) { values[key] = value; }

    std::string get_str(const std::string& key, const std::string& fallback) const {
        const auto it = values.find(key);
        return it == values.end() ? fallback : it->second;
    }

    std::string require_str(const std::string& key) const {
        const auto it = values.find(key);
        if (it == values.end()) throw config_error("config: missing required key '" + key + "'");
        return it->second;
    }

    double get_double(const std::string& key, double fallback) const {
        const auto it = values.find(key);
        if (it == values.end()) return fallback;
        try {
            std::size_t pos = 0;
            const double v = std::stod(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw config_error("config: key '" + key + "' is not a number: " + it->second);
        }
    }

    std::int64_t get_int(const std::string& key, std::int64_t fallback) const {
        const auto it = values.find(key);
        if (it == values.end()) return fallback;
        try {
            std::size_t pos = 0;
            const std::int64_t v = std::stoll(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw config_error("config: key '" + key + "' is not an integer: " + it->second);
        }
    }

    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
        const std::int64_t v = get_int(key, static_cast<std::int64_t>(fallback));
        if (v < 0) throw config_error("config: key '" + key + "' must be nonnegative");
        return static_cast<std::uint64_t>(v);
    }

    bool get_bool(const std::string& key, bool fallback) const {
        const auto it = values.find(key);
        if (it == values.end()) return fallback;
        const std::string& v = it->second;
        if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
        if (v == "false" || v == "0" || v == "no" || v == "off") return false;
        throw config_error("config: key '" + key + "' is not a boolean: " + v);
    }

    // Canonical text used for hashing and manifest embedding.
    std::string canonical() const {
        std::ostringstream os;
        for (const auto& [k, v] : values) os << k << "=" << v << "\n";
        return os.str();
    }

    std::uint64_t hash() const { return fnv1a64(canonical()); }
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

}  // namespace detail

inline kv_config parse_config_text(const std::string& text) {
    kv_config cfg;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw config_error("config: line " + std::to_string(lineno) + " is not key=value: " + line);
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (key.empty()) throw config_error("config: empty key at line " + std::to_string(lineno));
        cfg.values[key] = value;
    }
    return cfg;
}

inline kv_config load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw config_error("config: cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str());
}

// key=value override strings from the command line; flags win over the file.
inline void apply_overrides(kv_config& cfg, const std::vector<std::string>& overrides) {
    for (const std::string& o : overrides) {
        const std::size_t eq = o.find('=');
        if (eq == std::string::npos || eq == 0) throw config_error("config: override is not key=value: " + o);
        cfg.values[detail::trim(o.substr(0, eq))] = detail::trim(o.substr(eq + 1));
    }
}

struct run_manifest {
    std::string command;
    std::uint64_t config_hash = 0;
    std::uint64_t seed = 0;
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
    std::string version = tool_version;
    double wall_seconds = 0.0;
    nlohmann::json config;
};

inline void write_manifest(const std::string& dir, const run_manifest& m) {
    std::filesystem::create_directories(dir);
    nlohmann::json j = {{"command", m.command},
                        {"config_hash", m.config_hash},
                        {"seed", m.seed},
                        {"inputs", m.inputs},
                        {"outputs", m.outputs},
                        {"version", m.version},
                        {"wall_seconds", m.wall_seconds},
                        {"config", m.config}};
    std::ofstream f(std::filesystem::path(dir) / "manifest.json");
    if (!f) throw artifact_error("write_manifest: cannot open manifest in " + dir);
    f << j.dump(2) << "\n";
}

class wall_timer {
  public:
    wall_timer() : start_(std::chrono::steady_clock::now()) {}
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

  private:
    std::chrono::steady_clock::time_point start_;
};

}  // namespace snapuq
