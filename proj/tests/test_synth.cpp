#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "step/synth.hpp"

using step::DatasetManifest;
using step::SignalFamily;
using step::SignalSpec;
using step::Tensor;
using step::TeacherSpec;

namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("step_test_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("signal/feature blobs round-trip bit-identically") {
    auto dir = temp_dir("blob");
    step::Rng rng(99);
    Tensor<double> x({1234, 3});
    for (auto& v : x.data) v = rng.normal();

    std::string sig = (dir / "s.bin").string();
    step::write_signal_blob(sig, x);
    auto back = step::read_signal_blob<double>(sig);
    REQUIRE(back.shape == x.shape);
    // values pass through f32; compare against the f32 projection
    auto f32 = x.cast<float>();
    for (std::size_t i = 0; i < x.numel(); ++i) REQUIRE(back.data[i] == double(f32.data[i]));

    Tensor<float> f({17, 48});
    for (auto& v : f.data) v = float(rng.normal());
    std::string fea = (dir / "s.fea").string();
    step::write_feature_blob(fea, f);
    auto fback = step::read_feature_blob<float>(fea);
    REQUIRE(fback.shape == f.shape);
    REQUIRE(fback.data == f.data);
}

TEST_CASE("corrupted or truncated blobs are rejected") {
    auto dir = temp_dir("badblob");
    Tensor<double> x({8, 1});
    std::string p = (dir / "s.bin").string();
    step::write_signal_blob(p, x);

    SECTION("bad magic") {
        std::fstream fsr(p, std::ios::in | std::ios::out | std::ios::binary);
        fsr.write("XXXX", 4);
        fsr.close();
        REQUIRE_THROWS_AS(step::read_signal_blob<double>(p), step::IoError);
    }
    SECTION("wrong magic family") {
        REQUIRE_THROWS_AS(step::read_feature_blob<double>(p), step::IoError);
    }
    SECTION("truncated payload") {
        fs::resize_file(p, 8 + 16 + 3);
        REQUIRE_THROWS_AS(step::read_signal_blob<double>(p), step::IoError);
    }
}

TEST_CASE("manifest round-trip and validation") {
    auto dir = temp_dir("manifest");
    SignalSpec spec;
    spec.name = "mini";
    spec.t_min = 32;
    spec.t_max = 48;
    spec.channels = 2;
    spec.seed = 7;
    auto m = step::gen_dataset(spec, 6, 2, dir.string());
    REQUIRE(m.records.size() == 8);
    REQUIRE(m.split("train").size() == 6);
    REQUIRE(m.split("val").size() == 2);

    auto loaded = step::read_manifest(dir.string());
    REQUIRE(loaded.records.size() == m.records.size());
    for (std::size_t i = 0; i < m.records.size(); ++i) {
        REQUIRE(loaded.records[i].id == m.records[i].id);
        REQUIRE(loaded.records[i].length == m.records[i].length);
        REQUIRE(loaded.records[i].label == m.records[i].label);
        REQUIRE(loaded.records[i].split == m.records[i].split);
    }
    REQUIRE_NOTHROW(step::validate_manifest(loaded));

    SECTION("missing blob names the id") {
        fs::remove(dir / "mini_3.bin");
        try {
            step::validate_manifest(loaded);
            FAIL("expected validation error");
        } catch (const step::IoError& e) {
            REQUIRE(std::string(e.what()).find("mini_3") != std::string::npos);
        }
    }
    SECTION("duplicate id rejected") {
        loaded.records.push_back(loaded.records.front());
        REQUIRE_THROWS_AS(step::validate_manifest(loaded), step::IoError);
    }
    SECTION("shape disagreement rejected") {
        loaded.records[0].length += 1;
        REQUIRE_THROWS_AS(step::validate_manifest(loaded), step::IoError);
    }
}

TEST_CASE("gen_signal is a pure function of (spec, index)") {
    SignalSpec spec;
    spec.family = SignalFamily::oscillation;
    spec.n_classes = 4;
    spec.t_min = 100;
    spec.t_max = 300;
    spec.seed = 11;
    for (std::uint64_t i : {0ull, 5ull, 99ull}) {
        auto a = step::gen_signal(spec, i);
        auto b = step::gen_signal(spec, i);
        REQUIRE(a.label == b.label);
        REQUIRE(a.x.shape == b.x.shape);
        REQUIRE(a.x.data == b.x.data);  // bit-identical
    }
}

TEST_CASE("label balance is binomial over 10000 samples") {
    SignalSpec spec;
    spec.t_min = spec.t_max = 16;
    spec.seed = 3;
    int ones = 0;
    for (std::uint64_t i = 0; i < 10000; ++i) ones += step::gen_signal(spec, i).label;
    REQUIRE(ones >= 5000 - 150);
    REQUIRE(ones <= 5000 + 150);
}

TEST_CASE("noiseless chirp is the pure template") {
    SignalSpec spec;
    spec.noise_sigma = 0.0;
    spec.t_min = spec.t_max = 256;
    spec.seed = 21;
    bool saw_pos = false, saw_neg = false;
    for (std::uint64_t i = 0; i < 20; ++i) {
        auto s = step::gen_signal(spec, i);
        auto p = step::sample_params(spec, i);
        if (p.label == 1) {
            saw_pos = true;
            auto w = step::chirp_waveform(p.length, p.f0, p.f1, p.phase0);
            for (std::size_t t = 0; t < p.length; ++t)
                REQUIRE(s.x.at(t, 0) == Catch::Approx(p.amp * w[t]).margin(1e-12));
        } else {
            saw_neg = true;
            for (double v : s.x.data) REQUIRE(v == 0.0);
        }
    }
    REQUIRE(saw_pos);
    REQUIRE(saw_neg);
}

TEST_CASE("matched-filter oracle separates chirps at moderate SNR") {
    SignalSpec spec;
    spec.t_min = 200;
    spec.t_max = 400;
    spec.snr_lo = 2.0;
    spec.snr_hi = 4.0;
    spec.seed = 31;
    int correct = 0;
    const int n = 400;
    for (std::uint64_t i = 0; i < n; ++i) {
        auto s = step::gen_signal(spec, i);
        auto p = step::sample_params(spec, i);
        auto w = step::chirp_waveform(p.length, p.f0, p.f1, p.phase0);
        double corr = 0, energy = 0;
        for (std::size_t t = 0; t < p.length; ++t) {
            corr += s.x.at(t, 0) * w[t];
            energy += w[t] * w[t];
        }
        int pred = corr > 0.5 * p.amp * energy ? 1 : 0;
        if (pred == p.label) ++correct;
    }
    REQUIRE(double(correct) / n >= 0.99);
}

TEST_CASE("spectral-peak oracle separates oscillation classes") {
    SignalSpec spec;
    spec.family = SignalFamily::oscillation;
    spec.n_classes = 4;
    spec.t_min = 256;
    spec.t_max = 512;
    spec.noise_sigma = 0.5;
    spec.f_lo = 0.05;
    spec.f_hi = 0.45;
    spec.seed = 41;
    int correct = 0;
    const int n = 300;
    const double band = (spec.f_hi - spec.f_lo) / spec.n_classes;
    for (std::uint64_t i = 0; i < n; ++i) {
        auto s = step::gen_signal(spec, i);
        const std::size_t t_len = s.x.shape[0];
        double best_p = -1, best_f = 0;
        for (int g = 0; g < 512; ++g) {
            double f = spec.f_lo + (spec.f_hi - spec.f_lo) * (g + 0.5) / 512.0;
            double cs = 0, sn = 0;
            for (std::size_t t = 0; t < t_len; ++t) {
                cs += s.x.at(t, 0) * std::cos(2 * M_PI * f * double(t));
                sn += s.x.at(t, 0) * std::sin(2 * M_PI * f * double(t));
            }
            double p = cs * cs + sn * sn;
            if (p > best_p) best_p = p, best_f = f;
        }
        int pred = std::min(spec.n_classes - 1, int((best_f - spec.f_lo) / band));
        if (pred == step::sample_params(spec, i).label) ++correct;
    }
    REQUIRE(double(correct) / n >= 0.99);
}

TEST_CASE("phase-lag oracle separates phase-pattern classes") {
    SignalSpec spec;
    spec.family = SignalFamily::phase_pattern;
    spec.n_classes = 3;
    spec.channels = 4;
    spec.t_min = 256;
    spec.t_max = 400;
    spec.noise_sigma = 0.4;
    spec.seed = 51;
    int correct = 0;
    const int n = 300;
    for (std::uint64_t i = 0; i < n; ++i) {
        auto s = step::gen_signal(spec, i);
        auto p = step::sample_params(spec, i);
        const std::size_t t_len = s.x.shape[0];
        auto phase_of = [&](std::size_t c) {
            double cs = 0, sn = 0;
            for (std::size_t t = 0; t < t_len; ++t) {
                cs += s.x.at(t, c) * std::cos(2 * M_PI * p.f0 * double(t));
                sn += s.x.at(t, c) * std::sin(2 * M_PI * p.f0 * double(t));
            }
            // x = sin(phi + 2 pi f t): <x, sin> ~ (T/2) cos phi, <x, cos> ~ (T/2) sin phi
            return std::atan2(cs, sn);
        };
        double lag = phase_of(1) - phase_of(0);
        while (lag <= -M_PI) lag += 2 * M_PI;
        while (lag > M_PI) lag -= 2 * M_PI;
        int pred = 0;
        double best = 1e9;
        for (int k = 0; k < spec.n_classes; ++k) {
            double d = std::abs(lag - step::class_lag(k, spec.n_classes));
            if (d < best) best = d, pred = k;
        }
        if (pred == p.label) ++correct;
    }
    REQUIRE(double(correct) / n >= 0.99);
}

TEST_CASE("frozen teacher is deterministic and honors the N_t rule") {
    auto preset = step::teacher_preset("audio-like");
    step::Rng rng(5);
    Tensor<double> x({1600, 1});
    for (auto& v : x.data) v = rng.normal();

    auto f1 = step::frozen_teacher(x, preset);
    auto f2 = step::frozen_teacher(x, preset);
    REQUIRE(f1.shape == std::vector<std::size_t>{100, 48});  // 1600/16
    REQUIRE(f1.data == f2.data);

    SECTION("zero input gives a constant bias response") {
        Tensor<double> z({640, 1});
        auto f = step::frozen_teacher(z, preset);
        for (std::size_t i = 1; i < f.shape[0]; ++i)
            for (std::size_t d = 0; d < f.shape[1]; ++d)
                REQUIRE(f.at(i, d) == Catch::Approx(f.at(0, d)).margin(1e-12));
    }
}

TEST_CASE("ts-like teacher truncates at 2048; non-truncating teachers reject") {
    step::Rng rng(6);
    Tensor<double> x({4096, 1});
    for (auto& v : x.data) v = rng.normal();

    auto ts = step::teacher_preset("ts-like");
    auto f = step::frozen_teacher(x, ts);
    REQUIRE(f.shape[0] == 256);  // 2048/8 after truncation
    Tensor<double> head({2048, 1});
    std::copy(x.data.begin(), x.data.begin() + 2048, head.data.begin());
    REQUIRE(f.data == step::frozen_teacher(head, ts).data);

    auto strict = ts;
    strict.truncate = false;
    REQUIRE_THROWS_AS(step::frozen_teacher(x, strict), std::invalid_argument);
}

TEST_CASE("neural-like teacher accepts any channel count") {
    auto preset = step::teacher_preset("neural-like");
    step::Rng rng(7);
    for (std::size_t c : {1ul, 3ul, 58ul}) {
        Tensor<double> x({320, c});
        for (auto& v : x.data) v = rng.normal();
        auto f = step::frozen_teacher(x, preset);
        REQUIRE(f.shape == std::vector<std::size_t>{10, 64});  // 320/32
        REQUIRE(f.all_finite());
    }
    Tensor<double> multi({64, 2});
    REQUIRE_THROWS_AS(step::frozen_teacher(multi, step::teacher_preset("audio-like")),
                      std::invalid_argument);
}

TEST_CASE("frozen teachers are Lipschitz on random pairs") {
    auto preset = step::teacher_preset("audio-like");
    step::Rng rng(8);
    double max_ratio = 0;
    for (int trial = 0; trial < 20; ++trial) {
        std::size_t t_len = 128 + rng.below(256);
        Tensor<double> a({t_len, 1}), b({t_len, 1});
        for (auto& v : a.data) v = rng.normal();
        b.data = a.data;
        for (auto& v : b.data) v += 0.1 * rng.normal();
        auto fa = step::frozen_teacher(a, preset);
        auto fb = step::frozen_teacher(b, preset);
        double df = 0, dx = 0;
        for (std::size_t i = 0; i < fa.numel(); ++i)
            df += (fa.data[i] - fb.data[i]) * (fa.data[i] - fb.data[i]);
        for (std::size_t i = 0; i < a.numel(); ++i)
            dx += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
        max_ratio = std::max(max_ratio, std::sqrt(df) / std::sqrt(dx));
    }
    // two tanh conv layers with O(1) weights: modest constant
    REQUIRE(max_ratio < 50.0);
}

TEST_CASE("flatten_channels interleaves time-major") {
    Tensor<double> x({3, 2});
    x.data = {1, 2, 3, 4, 5, 6};
    auto f = step::flatten_channels(x);
    REQUIRE(f.shape == std::vector<std::size_t>{6, 1});
    REQUIRE(f.data == std::vector<double>{1, 2, 3, 4, 5, 6});
}

TEST_CASE("teacher feature store round-trips") {
    auto dir = temp_dir("store");
    SignalSpec spec;
    spec.name = "sig";
    spec.t_min = 64;
    spec.t_max = 128;
    spec.channels = 2;
    spec.seed = 17;
    auto m = step::gen_dataset(spec, 3, 1, (dir / "data").string());

    auto preset = step::teacher_preset("audio-like");
    step::gen_teacher_features(preset, m, (dir / "fea").string());

    auto meta = step::read_teacher_meta((dir / "fea").string());
    REQUIRE(meta.teacher_id == preset.teacher_id);
    REQUIRE(meta.d_t == preset.d_t);
    REQUIRE(meta.divisor == preset.divisor);
    REQUIRE(meta.multi_channel == preset.multi_channel);

    for (const auto& r : m.records) {
        auto f = step::read_feature_blob<double>(step::feature_path((dir / "fea").string(), r.id));
        // single-channel teacher sees the flattened T*C stream
        REQUIRE(f.shape[0] == (r.length * r.channels) / preset.divisor);
        REQUIRE(f.shape[1] == preset.d_t);
    }
}

TEST_CASE("signal spec round-trips through config") {
    SignalSpec s;
    s.name = "osc";
    s.family = SignalFamily::oscillation;
    s.t_min = 100;
    s.t_max = 5000;
    s.channels = 7;
    s.n_classes = 5;
    s.noise_sigma = 0.25;
    s.seed = 42;
    s.domain = "neural";
    step::KvConfig cfg;
    step::config_from_spec(s, cfg);
    auto dir = temp_dir("cfg");
    cfg.write((dir / "spec.cfg").string());
    auto s2 = step::spec_from_config(step::KvConfig::from_file((dir / "spec.cfg").string()));
    REQUIRE(s2.name == s.name);
    REQUIRE(s2.family == s.family);
    REQUIRE(s2.t_min == s.t_min);
    REQUIRE(s2.t_max == s.t_max);
    REQUIRE(s2.channels == s.channels);
    REQUIRE(s2.n_classes == s.n_classes);
    REQUIRE(s2.noise_sigma == Catch::Approx(s.noise_sigma));
    REQUIRE(s2.seed == s.seed);
    REQUIRE(s2.domain == s.domain);
}

TEST_CASE("invalid signal specs are rejected") {
    SignalSpec s;
    s.t_max = 1;
    s.t_min = 2;
    REQUIRE_THROWS_AS(s.validate(), std::invalid_argument);
    s = {};
    s.n_classes = 1;
    REQUIRE_THROWS_AS(s.validate(), std::invalid_argument);
    s = {};
    s.f_hi = 0.7;
    REQUIRE_THROWS_AS(s.validate(), std::invalid_argument);
    s = {};
    s.family = SignalFamily::chirp;
    s.n_classes = 3;
    REQUIRE_THROWS_AS(s.validate(), std::invalid_argument);
}
