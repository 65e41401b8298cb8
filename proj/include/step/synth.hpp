#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "step/io.hpp"
#include "step/rng.hpp"
#include "step/tensor.hpp"

namespace step {

// ---------------------------------------------------------------------------
// signal generation
// ---------------------------------------------------------------------------

enum class SignalFamily { chirp, oscillation, phase_pattern };

inline std::string family_name(SignalFamily f) {
    switch (f) {
        case SignalFamily::chirp: return "chirp";
        case SignalFamily::oscillation: return "oscillation";
        case SignalFamily::phase_pattern: return "phase";
    }
    return "?";
}

inline SignalFamily family_from_name(const std::string& s) {
    if (s == "chirp") return SignalFamily::chirp;
    if (s == "oscillation") return SignalFamily::oscillation;
    if (s == "phase") return SignalFamily::phase_pattern;
    throw IoError("signal: unknown family '" + s + "'");
}

struct SignalSpec {
    std::string name = "task";
    SignalFamily family = SignalFamily::chirp;
    std::size_t t_min = 256, t_max = 256;
    std::size_t channels = 1;
    int n_classes = 2;
    double noise_sigma = 1.0;
    double snr_lo = 2.0, snr_hi = 4.0;  // chirp amplitude relative to noise
    double f_lo = 0.02, f_hi = 0.4;     // normalized frequency band (cycles/step)
    std::uint64_t seed = 0;
    std::string domain = "audio";

    void validate() const {
        if (t_min < 2 || t_max < t_min) throw std::invalid_argument("signal: bad length range");
        if (channels < 1) throw std::invalid_argument("signal: channels < 1");
        if (n_classes < 2) throw std::invalid_argument("signal: n_classes < 2");
        if (!(f_lo > 0) || !(f_hi > f_lo) || f_hi > 0.5)
            throw std::invalid_argument("signal: frequency band must sit in (0, 0.5]");
        if (noise_sigma < 0) throw std::invalid_argument("signal: noise_sigma < 0");
        if (family == SignalFamily::chirp && n_classes != 2)
            throw std::invalid_argument("signal: chirp detection is binary");
    }
};

struct SignalSample {
    std::string id;
    Tensor<double> x;  // T x C
    int label = 0;
};

// Per-sample draw shared by the generator and the test oracles. The oracles
// act as matched filters: they may know the drawn parameters, not the noise.
struct SignalParams {
    std::size_t length = 0;
    int label = 0;
    double f0 = 0, f1 = 0;  // chirp start/end frequency, or carrier frequency
    double amp = 0;
    double phase0 = 0;
    std::vector<double> channel_phase;  // phase pattern per channel
};

inline double class_lag(int label, int n_classes) {
    // strictly inside (0, pi): unambiguous under the lag estimator
    return M_PI * double(label + 1) / double(n_classes + 1);
}

inline SignalParams draw_params(const SignalSpec& spec, std::uint64_t index, Rng& rng) {
    SignalParams p;
    p.length = spec.t_min + rng.below(spec.t_max - spec.t_min + 1);
    p.label = int(rng.below(std::uint64_t(spec.n_classes)));
    switch (spec.family) {
        case SignalFamily::chirp: {
            p.f0 = rng.uniform(spec.f_lo, 0.5 * (spec.f_lo + spec.f_hi));
            p.f1 = rng.uniform(p.f0 + 0.1 * (spec.f_hi - spec.f_lo), spec.f_hi);
            double snr = rng.uniform(spec.snr_lo, spec.snr_hi);
            p.amp = spec.noise_sigma > 0 ? snr * spec.noise_sigma : 1.0;
            p.phase0 = rng.uniform(0.0, 2.0 * M_PI);
            break;
        }
        case SignalFamily::oscillation: {
            double band = (spec.f_hi - spec.f_lo) / spec.n_classes;
            double lo = spec.f_lo + band * p.label;
            // keep a guard margin inside the band so the spectral oracle
            // never straddles a boundary
            p.f0 = p.f1 = rng.uniform(lo + 0.1 * band, lo + 0.9 * band);
            p.amp = 1.0;
            p.phase0 = rng.uniform(0.0, 2.0 * M_PI);
            break;
        }
        case SignalFamily::phase_pattern: {
            p.f0 = p.f1 = rng.uniform(spec.f_lo, spec.f_hi);
            p.amp = 1.0;
            p.phase0 = rng.uniform(0.0, 2.0 * M_PI);
            double lag = class_lag(p.label, spec.n_classes);
            p.channel_phase.resize(spec.channels);
            for (std::size_t c = 0; c < spec.channels; ++c)
                p.channel_phase[c] = p.phase0 + lag * double(c);
            break;
        }
    }
    (void)index;
    return p;
}

inline SignalParams sample_params(const SignalSpec& spec, std::uint64_t index) {
    Rng rng = Rng::derive(spec.seed, index);
    return draw_params(spec, index, rng);
}

// Noiseless chirp waveform: linear frequency sweep f0 -> f1 over T steps.
inline std::vector<double> chirp_waveform(std::size_t t_len, double f0, double f1, double phase0) {
    std::vector<double> w(t_len);
    double rate = t_len > 1 ? (f1 - f0) / double(t_len - 1) : 0.0;
    for (std::size_t t = 0; t < t_len; ++t) {
        double ph = phase0 + 2.0 * M_PI * (f0 * double(t) + 0.5 * rate * double(t) * double(t));
        w[t] = std::sin(ph);
    }
    return w;
}

inline SignalSample gen_signal(const SignalSpec& spec, std::uint64_t index) {
    spec.validate();
    Rng rng = Rng::derive(spec.seed, index);
    SignalParams p = draw_params(spec, index, rng);
    const std::size_t t_len = p.length, chans = spec.channels;

    SignalSample s;
    s.id = spec.name + "_" + std::to_string(index);
    s.label = p.label;
    s.x = Tensor<double>({t_len, chans});
    for (double& v : s.x.data) v = spec.noise_sigma * rng.normal();

    switch (spec.family) {
        case SignalFamily::chirp:
            if (p.label == 1) {
                auto w = chirp_waveform(t_len, p.f0, p.f1, p.phase0);
                for (std::size_t t = 0; t < t_len; ++t)
                    for (std::size_t c = 0; c < chans; ++c) s.x.at(t, c) += p.amp * w[t];
            }
            break;
        case SignalFamily::oscillation:
            for (std::size_t t = 0; t < t_len; ++t) {
                double v = p.amp * std::sin(p.phase0 + 2.0 * M_PI * p.f0 * double(t));
                for (std::size_t c = 0; c < chans; ++c) s.x.at(t, c) += v;
            }
            break;
        case SignalFamily::phase_pattern:
            for (std::size_t c = 0; c < chans; ++c)
                for (std::size_t t = 0; t < t_len; ++t)
                    s.x.at(t, c) +=
                        p.amp * std::sin(p.channel_phase[c] + 2.0 * M_PI * p.f0 * double(t));
            break;
    }
    return s;
}

// ---------------------------------------------------------------------------
// frozen teachers
// ---------------------------------------------------------------------------

struct TeacherSpec {
    std::string teacher_id;
    std::string domain;          // audio | general-ts | neural
    std::size_t d_t = 48;        // feature dimension
    std::size_t divisor = 16;    // N_t = max(1, T / divisor)
    std::size_t max_t = 0;       // 0 = unlimited
    bool truncate = false;       // over-length inputs: truncate vs. reject
    bool multi_channel = false;  // consume C channels (else caller flattens to C=1)
    std::uint64_t seed = 1234;

    std::size_t n_t(std::size_t t_len) const {
        std::size_t eff = effective_length(t_len);
        return std::max<std::size_t>(1, eff / divisor);
    }
    std::size_t effective_length(std::size_t t_len) const {
        if (max_t > 0 && t_len > max_t) {
            if (!truncate)
                throw std::invalid_argument("teacher " + teacher_id + ": input length " +
                                            std::to_string(t_len) + " exceeds max " +
                                            std::to_string(max_t));
            return max_t;
        }
        return t_len;
    }
};

inline TeacherSpec teacher_preset(const std::string& name) {
    if (name == "audio-like") return {"audio-like", "audio", 48, 16, 0, false, false, 1234};
    if (name == "ts-like") return {"ts-like", "general-ts", 32, 8, 2048, true, false, 1234};
    if (name == "neural-like") return {"neural-like", "neural", 64, 32, 0, false, true, 1234};
    throw IoError("teacher: unknown preset '" + name + "'");
}

namespace detail {

// valid 1-D conv over time, single input stream of width `in_w`
inline std::vector<double> conv1d(const std::vector<double>& x, std::size_t t_len,
                                  std::size_t in_w, const std::vector<double>& w,
                                  const std::vector<double>& b, std::size_t kernel,
                                  std::size_t stride, std::size_t out_w) {
    std::size_t padded = std::max(t_len, kernel);
    std::size_t out_len = (padded - kernel) / stride + 1;
    std::vector<double> y(out_len * out_w);
    for (std::size_t i = 0; i < out_len; ++i)
        for (std::size_t o = 0; o < out_w; ++o) {
            double acc = b[o];
            for (std::size_t k = 0; k < kernel; ++k) {
                std::size_t t = i * stride + k;
                if (t >= t_len) continue;  // implicit zero pad for short inputs
                for (std::size_t c = 0; c < in_w; ++c)
                    acc += x[t * in_w + c] * w[(k * in_w + c) * out_w + o];
            }
            y[i * out_w + o] = std::tanh(acc);
        }
    return y;
}

}  // namespace detail

// Fixed-seed two-layer strided conv net; parameters drawn once from the seed.
// Multi-channel teachers run the shared single-channel net per channel and
// average the feature maps, so any C is accepted.
inline Tensor<double> frozen_teacher(const Tensor<double>& x, const TeacherSpec& spec) {
    const std::size_t t_raw = x.shape[0], chans = x.shape.size() > 1 ? x.shape[1] : 1;
    if (!spec.multi_channel && chans != 1)
        throw std::invalid_argument("teacher " + spec.teacher_id +
                                    ": expects single-channel input (flatten first)");
    const std::size_t t_len = spec.effective_length(t_raw);
    const std::size_t n_t = spec.n_t(t_raw);

    constexpr std::size_t k1 = 9, s1 = 4, h = 16, k2 = 5, s2 = 2;
    Rng rng(spec.seed);
    std::vector<double> w1(k1 * h), b1(h), w2(k2 * h * spec.d_t), b2(spec.d_t);
    for (auto& v : w1) v = rng.normal() / std::sqrt(double(k1));
    for (auto& v : b1) v = 0.1 * rng.normal();
    for (auto& v : w2) v = rng.normal() / std::sqrt(double(k2 * h));
    for (auto& v : b2) v = 0.1 * rng.normal();

    std::size_t l1 = (std::max(t_len, k1) - k1) / s1 + 1;
    std::size_t l2 = (std::max(l1, k2) - k2) / s2 + 1;
    std::vector<double> feat(l2 * spec.d_t, 0.0);
    std::vector<double> ch(t_len);
    for (std::size_t c = 0; c < chans; ++c) {
        for (std::size_t t = 0; t < t_len; ++t) ch[t] = x.at(t, c);
        auto h1 = detail::conv1d(ch, t_len, 1, w1, b1, k1, s1, h);
        auto h2 = detail::conv1d(h1, l1, h, w2, b2, k2, s2, spec.d_t);
        for (std::size_t i = 0; i < feat.size(); ++i) feat[i] += h2[i];
    }
    for (double& v : feat) v /= double(chans);

    // linear interpolation along time to exactly n_t rows
    Tensor<double> out({n_t, spec.d_t});
    for (std::size_t i = 0; i < n_t; ++i) {
        double pos = n_t > 1 ? double(i) * double(l2 - 1) / double(n_t - 1) : 0.0;
        std::size_t lo = std::size_t(pos);
        std::size_t hi = std::min(lo + 1, l2 - 1);
        double frac = pos - double(lo);
        for (std::size_t d = 0; d < spec.d_t; ++d)
            out.at(i, d) = (1.0 - frac) * feat[lo * spec.d_t + d] + frac * feat[hi * spec.d_t + d];
    }
    return out;
}

// ---------------------------------------------------------------------------
// dataset + feature store plumbing
// ---------------------------------------------------------------------------

inline SignalSpec spec_from_config(const KvConfig& cfg) {
    SignalSpec s;
    s.name = cfg.get("signal.name", s.name);
    s.family = family_from_name(cfg.get("signal.family", family_name(s.family)));
    s.t_min = std::size_t(cfg.get_int("signal.t_min", long(s.t_min)));
    s.t_max = std::size_t(cfg.get_int("signal.t_max", long(s.t_max)));
    s.channels = std::size_t(cfg.get_int("signal.channels", long(s.channels)));
    s.n_classes = int(cfg.get_int("signal.n_classes", s.n_classes));
    s.noise_sigma = cfg.get_real("signal.noise_sigma", s.noise_sigma);
    s.snr_lo = cfg.get_real("signal.snr_lo", s.snr_lo);
    s.snr_hi = cfg.get_real("signal.snr_hi", s.snr_hi);
    s.f_lo = cfg.get_real("signal.f_lo", s.f_lo);
    s.f_hi = cfg.get_real("signal.f_hi", s.f_hi);
    s.seed = std::uint64_t(cfg.get_int("signal.seed", long(s.seed)));
    s.domain = cfg.get("signal.domain", s.domain);
    s.validate();
    return s;
}

inline void config_from_spec(const SignalSpec& s, KvConfig& cfg) {
    cfg.set("signal.name", s.name);
    cfg.set("signal.family", family_name(s.family));
    cfg.set("signal.t_min", std::to_string(s.t_min));
    cfg.set("signal.t_max", std::to_string(s.t_max));
    cfg.set("signal.channels", std::to_string(s.channels));
    cfg.set("signal.n_classes", std::to_string(s.n_classes));
    cfg.set("signal.noise_sigma", std::to_string(s.noise_sigma));
    cfg.set("signal.snr_lo", std::to_string(s.snr_lo));
    cfg.set("signal.snr_hi", std::to_string(s.snr_hi));
    cfg.set("signal.f_lo", std::to_string(s.f_lo));
    cfg.set("signal.f_hi", std::to_string(s.f_hi));
    cfg.set("signal.seed", std::to_string(s.seed));
    cfg.set("signal.domain", s.domain);
}

// Row-major flatten T x C -> (T*C) x 1 for teachers that only accept one
// channel: out[t*C + c] = X[t, c].
template <typename Real>
Tensor<Real> flatten_channels(const Tensor<Real>& x) {
    Tensor<Real> out({x.numel(), 1});
    out.data = x.data;  // row-major already interleaves time-major
    return out;
}

inline void write_teacher_meta(const TeacherSpec& t, const std::string& dir) {
    nlohmann::json j;
    j["teacher_id"] = t.teacher_id;
    j["domain"] = t.domain;
    j["d_t"] = t.d_t;
    j["divisor"] = t.divisor;
    j["max_t"] = t.max_t;
    j["truncate"] = t.truncate;
    j["multi_channel"] = t.multi_channel;
    j["seed"] = t.seed;
    std::ofstream os(std::filesystem::path(dir) / "teacher.json");
    if (!os) throw IoError("teacher: cannot write teacher.json in " + dir);
    os << j.dump(2) << "\n";
}

inline TeacherSpec read_teacher_meta(const std::string& dir) {
    std::ifstream is(std::filesystem::path(dir) / "teacher.json");
    if (!is) throw IoError("teacher: cannot open teacher.json in " + dir);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("teacher: bad teacher.json in " + dir + ": " + e.what());
    }
    TeacherSpec t;
    t.teacher_id = j.at("teacher_id").get<std::string>();
    t.domain = j.at("domain").get<std::string>();
    t.d_t = j.at("d_t").get<std::size_t>();
    t.divisor = j.at("divisor").get<std::size_t>();
    t.max_t = j.at("max_t").get<std::size_t>();
    t.truncate = j.at("truncate").get<bool>();
    t.multi_channel = j.at("multi_channel").get<bool>();
    t.seed = j.at("seed").get<std::uint64_t>();
    return t;
}

inline std::string feature_path(const std::string& store_dir, const std::string& sample_id) {
    return (std::filesystem::path(store_dir) / (sample_id + ".fea")).string();
}

// Writes blobs plus manifest.txt; train split first, then val. Manifest last
// so a complete manifest implies complete blobs.
inline DatasetManifest gen_dataset(const SignalSpec& spec, std::size_t n_train, std::size_t n_val,
                                   const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    DatasetManifest m;
    m.root = out_dir;
    for (std::size_t i = 0; i < n_train + n_val; ++i) {
        SignalSample s = gen_signal(spec, i);
        ManifestRecord r;
        r.id = s.id;
        r.path = s.id + ".bin";
        r.length = s.x.shape[0];
        r.channels = s.x.shape[1];
        r.label = s.label;
        r.domain = spec.domain;
        r.split = i < n_train ? "train" : "val";
        write_signal_blob((std::filesystem::path(out_dir) / r.path).string(), s.x);
        m.records.push_back(std::move(r));
    }
    write_manifest(m, (std::filesystem::path(out_dir) / "manifest.txt").string());
    return m;
}

// Precompute teacher targets for every sample in a dataset. Single-channel
// teachers see the flattened signal; teacher.json is written last.
inline void gen_teacher_features(const TeacherSpec& t, const DatasetManifest& data,
                                 const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    for (const auto& r : data.records) {
        Tensor<double> x = read_signal_blob<double>(data.blob_path(r));
        if (!t.multi_channel && x.shape[1] != 1) x = flatten_channels(x);
        Tensor<double> f = frozen_teacher(x, t);
        write_feature_blob(feature_path(out_dir, r.id), f);
    }
    write_teacher_meta(t, out_dir);
}

}  // namespace step
