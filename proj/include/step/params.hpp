#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "step/rng.hpp"
#include "step/tape.hpp"
#include "step/tensor.hpp"

namespace step {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Named parameter registry. Insertion order is stable and defines checkpoint
// record order. `group` drives the phase freeze schedule.
template <typename Real>
class ParamStore {
public:
    struct Entry {
        std::string name;
        std::string group;
        Tensor<Real> value;
    };

    int add(const std::string& name, const std::string& group, Tensor<Real> value) {
        if (index_.count(name)) throw std::logic_error("duplicate parameter: " + name);
        index_[name] = static_cast<int>(entries_.size());
        entries_.push_back({name, group, std::move(value)});
        return static_cast<int>(entries_.size() - 1);
    }

    int id(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::logic_error("unknown parameter: " + name);
        return it->second;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Entry& entry(int i) { return entries_[i]; }
    const Entry& entry(int i) const { return entries_[i]; }
    Tensor<Real>& value(int i) { return entries_[i].value; }
    const Tensor<Real>& value(int i) const { return entries_[i].value; }
    Tensor<Real>& value(const std::string& name) { return entries_[id(name)].value; }

    std::size_t count() const { return entries_.size(); }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.value.numel();
        return n;
    }

    // ---- init helpers ----

    int add_normal(const std::string& name, const std::string& group,
                   std::vector<std::size_t> shape, Rng& rng, Real stddev) {
        Tensor<Real> t(std::move(shape));
        for (auto& v : t.data) v = Real(rng.normal()) * stddev;
        return add(name, group, std::move(t));
    }

    int add_zeros(const std::string& name, const std::string& group,
                  std::vector<std::size_t> shape) {
        return add(name, group, Tensor<Real>(std::move(shape)));
    }

    int add_ones(const std::string& name, const std::string& group,
                 std::vector<std::size_t> shape) {
        return add(name, group, Tensor<Real>(std::move(shape), Real(1)));
    }

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, int> index_;
};

// Per-evaluation context: one tape plus memoized parameter leaves, so each
// parameter appears exactly once per graph no matter how many modules use it.
template <typename Real>
struct Ctx {
    Tape<Real>& tape;
    ParamStore<Real>& params;
    std::unordered_map<int, int> leaves;  // param id -> node id

    int p(const std::string& name) { return p(params.id(name)); }

    int p(int pid) {
        auto it = leaves.find(pid);
        if (it != leaves.end()) return it->second;
        int nid = tape.leaf(params.value(pid), true, params.entry(pid).name.c_str());
        leaves.emplace(pid, nid);
        return nid;
    }

    // Gradients per parameter id after tape.backward().
    std::unordered_map<int, Tensor<Real>> grads() const {
        std::unordered_map<int, Tensor<Real>> g;
        for (const auto& [pid, nid] : leaves) g.emplace(pid, tape.leaf_grad(nid));
        return g;
    }
};

// ---- checkpoint format ----
// magic "STEPCKPT", version u32; per parameter: name length u32, name bytes,
// rank u32, dims u64 each, values f32. All little-endian.

namespace detail {
template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IoError("checkpoint: truncated file");
    return v;
}
}  // namespace detail

inline constexpr char kCkptMagic[8] = {'S', 'T', 'E', 'P', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCkptVersion = 1;

template <typename Real>
void save_checkpoint(const ParamStore<Real>& store, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("checkpoint: cannot open for write: " + path);
    os.write(kCkptMagic, 8);
    detail::write_pod<std::uint32_t>(os, kCkptVersion);
    for (std::size_t i = 0; i < store.count(); ++i) {
        const auto& e = store.entry(static_cast<int>(i));
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(e.value.rank()));
        for (auto d : e.value.shape) detail::write_pod<std::uint64_t>(os, d);
        for (Real v : e.value.data) detail::write_pod<float>(os, static_cast<float>(v));
    }
    if (!os) throw IoError("checkpoint: write failed: " + path);
}

// Loads values into an already-constructed store; shapes must agree. With
// ignore_unknown, extra records (e.g. distillation projections on a
// pretrained checkpoint) are skipped, but the store must still be covered.
template <typename Real>
void load_checkpoint(ParamStore<Real>& store, const std::string& path,
                     bool ignore_unknown = false) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint: cannot open: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::string(magic, 8) != std::string(kCkptMagic, 8))
        throw IoError("checkpoint: bad magic in " + path);
    auto version = detail::read_pod<std::uint32_t>(is);
    if (version != kCkptVersion)
        throw IoError("checkpoint: unsupported version " + std::to_string(version));
    std::size_t loaded = 0;
    while (true) {
        std::uint32_t nlen;
        is.read(reinterpret_cast<char*>(&nlen), sizeof(nlen));
        if (is.eof()) break;
        if (!is) throw IoError("checkpoint: truncated record");
        std::string name(nlen, '\0');
        is.read(name.data(), nlen);
        auto rank = detail::read_pod<std::uint32_t>(is);
        std::vector<std::size_t> shape(rank);
        for (auto& d : shape) d = static_cast<std::size_t>(detail::read_pod<std::uint64_t>(is));
        std::size_t n = Tensor<Real>::count(shape);
        std::vector<float> vals(n);
        for (auto& v : vals) v = detail::read_pod<float>(is);
        if (!store.has(name)) {
            if (ignore_unknown) continue;
            throw IoError("checkpoint: unknown parameter '" + name + "' (incompatible model)");
        }
        auto& target = store.value(name);
        if (target.shape != shape)
            throw IoError("checkpoint: shape mismatch for '" + name + "': file " +
                          shape_str(shape) + " vs model " + shape_str(target.shape));
        for (std::size_t i = 0; i < n; ++i) target.data[i] = static_cast<Real>(vals[i]);
        ++loaded;
    }
    if (loaded != store.count())
        throw IoError("checkpoint: parameter count mismatch (file " + std::to_string(loaded) +
                      ", model " + std::to_string(store.count()) + ")");
}

}  // namespace step
