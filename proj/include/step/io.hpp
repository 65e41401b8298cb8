#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "step/params.hpp"
#include "step/tensor.hpp"

namespace step {

// ---- binary blobs ----
// signal: "STEPSIG1", T u64, C u64, f32 LE time-major
// features: "STEPFEA1", N u64, D u64, f32 LE row-major

inline void write_blob(const std::string& path, const char magic[8], std::uint64_t rows,
                       std::uint64_t cols, const float* data) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("blob: cannot open for write: " + path);
    os.write(magic, 8);
    detail::write_pod<std::uint64_t>(os, rows);
    detail::write_pod<std::uint64_t>(os, cols);
    os.write(reinterpret_cast<const char*>(data),
             std::streamsize(rows * cols * sizeof(float)));
    if (!os) throw IoError("blob: write failed: " + path);
}

inline Tensor<float> read_blob(const std::string& path, const char expect_magic[8]) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("blob: cannot open: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::string(magic, 8) != std::string(expect_magic, 8))
        throw IoError("blob: bad magic in " + path);
    auto rows = detail::read_pod<std::uint64_t>(is);
    auto cols = detail::read_pod<std::uint64_t>(is);
    Tensor<float> t({std::size_t(rows), std::size_t(cols)});
    is.read(reinterpret_cast<char*>(t.data.data()), std::streamsize(t.numel() * sizeof(float)));
    if (!is) throw IoError("blob: truncated file: " + path);
    return t;
}

inline constexpr char kSigMagic[8] = {'S', 'T', 'E', 'P', 'S', 'I', 'G', '1'};
inline constexpr char kFeaMagic[8] = {'S', 'T', 'E', 'P', 'F', 'E', 'A', '1'};

template <typename Real>
void write_signal_blob(const std::string& path, const Tensor<Real>& x) {
    auto f = x.template cast<float>();
    write_blob(path, kSigMagic, x.shape[0], x.shape[1], f.data.data());
}

template <typename Real = float>
Tensor<Real> read_signal_blob(const std::string& path) {
    return read_blob(path, kSigMagic).template cast<Real>();
}

template <typename Real>
void write_feature_blob(const std::string& path, const Tensor<Real>& f) {
    auto ff = f.template cast<float>();
    write_blob(path, kFeaMagic, f.shape[0], f.shape[1], ff.data.data());
}

template <typename Real = float>
Tensor<Real> read_feature_blob(const std::string& path) {
    return read_blob(path, kFeaMagic).template cast<Real>();
}

// ---- dataset manifest ----
// line-delimited key=value records, one sample per line

struct ManifestRecord {
    std::string id;
    std::string path;  // relative to the manifest directory
    std::size_t length = 0;
    std::size_t channels = 0;
    int label = 0;
    std::string domain;
    std::string split;  // train | val
};

struct DatasetManifest {
    std::string root;  // directory holding manifest.txt
    std::vector<ManifestRecord> records;

    std::vector<const ManifestRecord*> split(const std::string& name) const {
        std::vector<const ManifestRecord*> out;
        for (const auto& r : records)
            if (r.split == name) out.push_back(&r);
        return out;
    }

    std::string blob_path(const ManifestRecord& r) const {
        return (std::filesystem::path(root) / r.path).string();
    }
};

inline void write_manifest(const DatasetManifest& m, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("manifest: cannot open for write: " + path);
    for (const auto& r : m.records)
        os << "id=" << r.id << " path=" << r.path << " T=" << r.length << " C=" << r.channels
           << " label=" << r.label << " domain=" << r.domain << " split=" << r.split << "\n";
}

inline DatasetManifest read_manifest(const std::string& dir) {
    DatasetManifest m;
    m.root = dir;
    std::string path = (std::filesystem::path(dir) / "manifest.txt").string();
    std::ifstream is(path);
    if (!is) throw IoError("manifest: cannot open: " + path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        ManifestRecord r;
        std::istringstream ls(line);
        std::string field;
        while (ls >> field) {
            auto eq = field.find('=');
            if (eq == std::string::npos)
                throw IoError("manifest: malformed field at line " + std::to_string(lineno));
            std::string key = field.substr(0, eq), val = field.substr(eq + 1);
            if (key == "id") r.id = val;
            else if (key == "path") r.path = val;
            else if (key == "T") r.length = std::stoull(val);
            else if (key == "C") r.channels = std::stoull(val);
            else if (key == "label") r.label = std::stoi(val);
            else if (key == "domain") r.domain = val;
            else if (key == "split") r.split = val;
            else throw IoError("manifest: unknown key '" + key + "' at line " + std::to_string(lineno));
        }
        m.records.push_back(std::move(r));
    }
    return m;
}

// ids unique, every blob present with matching shape
inline void validate_manifest(const DatasetManifest& m) {
    std::map<std::string, int> seen;
    for (const auto& r : m.records) {
        if (++seen[r.id] > 1) throw IoError("manifest: duplicate id '" + r.id + "'");
        std::string p = m.blob_path(r);
        if (!std::filesystem::exists(p))
            throw IoError("manifest: missing blob for id '" + r.id + "' (" + p + ")");
        auto x = read_signal_blob<float>(p);
        if (x.shape[0] != r.length || x.shape[1] != r.channels)
            throw IoError("manifest: shape mismatch for id '" + r.id + "': blob " +
                          shape_str(x.shape) + " vs declared " + std::to_string(r.length) + "x" +
                          std::to_string(r.channels));
    }
}

// ---- flat key-value config ----
// Sections as [name]; keys inside become "name.key". Flags override file
// values at the CLI layer. Diff-able run record.

class KvConfig {
public:
    KvConfig() = default;

    static KvConfig from_file(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw IoError("config: cannot open: " + path);
        KvConfig cfg;
        std::string line, section;
        while (std::getline(is, line)) {
            auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            auto trim = [](std::string s) {
                auto b = s.find_first_not_of(" \t\r");
                auto e = s.find_last_not_of(" \t\r");
                return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
            };
            line = trim(line);
            if (line.empty()) continue;
            if (line.front() == '[' && line.back() == ']') {
                section = trim(line.substr(1, line.size() - 2));
                continue;
            }
            auto eq = line.find('=');
            if (eq == std::string::npos) throw IoError("config: malformed line: " + line);
            std::string key = trim(line.substr(0, eq)), val = trim(line.substr(eq + 1));
            cfg.set(section.empty() ? key : section + "." + key, val);
        }
        return cfg;
    }

    void set(const std::string& key, const std::string& val) { kv_[key] = val; }

    bool has(const std::string& key) const { return kv_.count(key) != 0; }

    std::string get(const std::string& key, const std::string& def = "") const {
        auto it = kv_.find(key);
        return it == kv_.end() ? def : it->second;
    }
    long get_int(const std::string& key, long def) const {
        auto it = kv_.find(key);
        return it == kv_.end() ? def : std::stol(it->second);
    }
    double get_real(const std::string& key, double def) const {
        auto it = kv_.find(key);
        return it == kv_.end() ? def : std::stod(it->second);
    }
    bool get_bool(const std::string& key, bool def) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) return def;
        return it->second == "1" || it->second == "true" || it->second == "yes";
    }

    void write(const std::string& path) const {
        std::ofstream os(path);
        if (!os) throw IoError("config: cannot open for write: " + path);
        std::string cur_section;
        for (const auto& [k, v] : kv_) {
            auto dot = k.find('.');
            std::string section = dot == std::string::npos ? "" : k.substr(0, dot);
            std::string key = dot == std::string::npos ? k : k.substr(dot + 1);
            if (section != cur_section) {
                os << "[" << section << "]\n";
                cur_section = section;
            }
            os << key << " = " << v << "\n";
        }
    }

    const std::map<std::string, std::string>& entries() const { return kv_; }

private:
    std::map<std::string, std::string> kv_;  // ordered: stable serialization
};

}  // namespace step
