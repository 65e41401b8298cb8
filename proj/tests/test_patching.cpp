#include <catch2/catch_amalgamated.hpp>

#include "step/gradcheck.hpp"
#include "step/patching.hpp"

using step::Tensor;
using step::Tape;
using step::Ctx;
using step::ParamStore;
using T64 = Tensor<double>;
using Cfg = step::PatchConfig<double>;

namespace {

T64 random_signal(std::size_t T, std::size_t C, step::Rng& rng, double scale = 1.0) {
    T64 x({T, C});
    for (auto& v : x.data) v = rng.normal() * scale;
    return x;
}

ParamStore<double> make_params(const Cfg& cfg, std::uint64_t seed) {
    ParamStore<double> ps;
    step::Rng rng(seed);
    step::register_patching_params(ps, cfg, rng);
    return ps;
}

// independent O(T*C*D*k) convolution loop
T64 naive_channel_conv(const T64& x, const T64& w, const T64& b) {
    std::size_t T = x.shape[0], C = x.shape[1], k = w.shape[0], D = w.shape[1];
    std::ptrdiff_t half = std::ptrdiff_t(k / 2);
    T64 out({T, C * D});
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t d = 0; d < D; ++d) {
                double acc = b[d];
                for (std::size_t j = 0; j < k; ++j) {
                    std::ptrdiff_t src = std::ptrdiff_t(t) + std::ptrdiff_t(j) - half;
                    if (src >= 0 && src < std::ptrdiff_t(T)) acc += w.at(j, d) * x.at(std::size_t(src), c);
                }
                out[t * C * D + c * D + d] = acc;
            }
    return out;
}

}  // namespace

TEST_CASE("channel_conv basics and naive oracle") {
    Cfg cfg;
    cfg.d_model = 4;
    auto ps = make_params(cfg, 1);

    SECTION("zero signal, zero bias -> zero output") {
        Tape<double> t;
        Ctx<double> ctx{t, ps, {}};
        T64 x({6, 2});
        auto v = t.value(step::channel_conv(ctx, x, cfg));
        for (double u : v.data) CHECK(u == 0.0);
    }
    SECTION("identity kernel reproduces the signal per channel") {
        Cfg c1 = cfg;
        c1.d_model = 1;
        ParamStore<double> id;
        id.add("patching.conv.w", "patching", T64({5, 1}, {0, 0, 1, 0, 0}));
        id.add_zeros("patching.conv.b", "patching", {1});
        step::Rng rng(2);
        T64 x = random_signal(7, 2, rng);
        Tape<double> t;
        Ctx<double> ctx{t, id, {}};
        auto v = t.value(step::channel_conv(ctx, x, c1));  // {7, 2}
        for (std::size_t i = 0; i < 7; ++i)
            for (std::size_t c = 0; c < 2; ++c) CHECK(v[i * 2 + c] == Catch::Approx(x.at(i, c)));
    }
    SECTION("random signal matches the naive loop") {
        step::Rng rng(3);
        Cfg c3 = cfg;
        c3.d_model = 4;
        auto ps3 = make_params(c3, 7);
        T64 x = random_signal(50, 3, rng);
        Tape<double> t;
        Ctx<double> ctx{t, ps3, {}};
        auto got = t.value(step::channel_conv(ctx, x, c3));
        auto want = naive_channel_conv(x, ps3.value("patching.conv.w"), ps3.value("patching.conv.b"));
        REQUIRE(got.numel() == want.numel());
        for (std::size_t i = 0; i < got.numel(); ++i) CHECK(got[i] == Catch::Approx(want[i]).margin(1e-6));
    }
    SECTION("empty signal rejected") {
        Tape<double> t;
        Ctx<double> ctx{t, ps, {}};
        CHECK_THROWS(step::channel_conv(ctx, T64({0, 1}), cfg));
    }
}

TEST_CASE("learn_stride closed-form cases") {
    Cfg cfg;
    ParamStore<double> ps;
    ps.add_zeros("patching.stride_mlp.w1", "patching", {1, 16});
    ps.add_zeros("patching.stride_mlp.b1", "patching", {1, 16});
    ps.add_zeros("patching.stride_mlp.w2", "patching", {16, 1});
    ps.add_zeros("patching.stride_mlp.b2", "patching", {1, 1});

    for (std::size_t T : {2u, 10u, 1000u, 100000u}) {
        Tape<double> t;
        Ctx<double> ctx{t, ps, {}};
        CHECK(t.value(step::learn_stride(ctx, T)).item() == Catch::Approx(2.0));
    }
    ps.value("patching.stride_mlp.b2")[0] = std::log(399.0);
    Tape<double> t;
    Ctx<double> ctx{t, ps, {}};
    CHECK(t.value(step::learn_stride(ctx, 500)).item() == Catch::Approx(400.0));
    CHECK_THROWS(step::learn_stride(ctx, 1));
}

TEST_CASE("learn_stride gradient matches finite differences") {
    Cfg cfg;
    auto ps = make_params(cfg, 5);
    const char* names[] = {"patching.stride_mlp.w1", "patching.stride_mlp.b1",
                           "patching.stride_mlp.w2", "patching.stride_mlp.b2"};
    for (const char* name : names) {
        Tape<double> t;
        Ctx<double> ctx{t, ps, {}};
        int s = step::learn_stride(ctx, 512);
        t.backward(s);
        T64 x0 = ps.value(name);
        auto fd = step::finite_diff_gradient<double>(
            [&](const T64& v) {
                auto ps2 = ps;  // copy, perturb one parameter
                ps2.value(name) = v;
                Tape<double> tt;
                Ctx<double> c2{tt, ps2, {}};
                return tt.value(step::learn_stride(c2, 512)).item();
            },
            x0, 1e-5);
        INFO(name);
        CHECK(step::rel_error(t.leaf_grad(ctx.p(name)), fd) < 1e-4);
    }
}

TEST_CASE("estimate_length values and monotonicity") {
    Cfg cfg;
    ParamStore<double> ps;
    auto n_est = [&](std::size_t T, double S) {
        Tape<double> t;
        Ctx<double> ctx{t, ps, {}};
        int sn = t.leaf(T64::scalar(S), true);
        return t.value(step::estimate_length(ctx, T, sn, cfg)).item();
    };
    CHECK(n_est(1000, 10.0) == Catch::Approx(99.0).margin(1e-9));
    CHECK(n_est(10, 400.0) == Catch::Approx(1.0).margin(1e-6));

    // dN'/dS < 0 wherever unclamped, against finite differences
    step::Rng rng(11);
    for (int i = 0; i < 20; ++i) {
        std::size_t T = 50 + std::size_t(rng.uniform(0, 5000));
        double S = rng.uniform(1.5, double(T) / 8.0);
        auto f = [&](const T64& sv) { return n_est(T, sv[0]); };
        auto fd = step::finite_diff_gradient<double>(f, T64::scalar(S), 1e-5);
        CHECK(fd[0] < 0.0);
        Tape<double> t;
        Ctx<double> ctx{t, ps, {}};
        int sn = t.leaf(T64::scalar(S), true);
        t.backward(step::estimate_length(ctx, T, sn, cfg));
        CHECK(step::rel_error(t.leaf_grad(sn), fd) < 1e-4);
    }
}

TEST_CASE("penalty formulas reproduce the boundary table") {
    Cfg cfg;
    ParamStore<double> ps;
    auto spen = [&](double S) {
        Tape<double> t;
        Ctx<double> ctx{t, ps, {}};
        return t.value(step::stride_penalty(ctx, t.scalar(S), cfg)).item();
    };
    auto lpen = [&](double N) {
        Tape<double> t;
        Ctx<double> ctx{t, ps, {}};
        return t.value(step::length_penalty(ctx, t.scalar(N), cfg)).item();
    };
    const double e = std::exp(1.0);
    CHECK(spen(400.0) == Catch::Approx(0.0).margin(1e-9));
    CHECK(spen(400.0 * e) == Catch::Approx(0.5).margin(1e-9));
    CHECK(spen(100.0) == 0.0);
    CHECK(lpen(100.0) == 0.0);
    CHECK(lpen(200.0 * e) == Catch::Approx(0.5).margin(1e-9));
    CHECK(lpen(5.0 / e) == Catch::Approx(0.5).margin(1e-9));

    // zero inside the band, strictly positive just outside (log-space 1e-3)
    CHECK(lpen(200.0 * std::exp(-1e-3)) == 0.0);
    CHECK(lpen(200.0 * std::exp(1e-3)) > 0.0);
    CHECK(lpen(5.0 * std::exp(1e-3)) == 0.0);
    CHECK(lpen(5.0 * std::exp(-1e-3)) > 0.0);
    CHECK(spen(400.0 * std::exp(1e-3)) > 0.0);
}

TEST_CASE("build_windows geometry and weight normalization") {
    Cfg cfg;
    ParamStore<double> ps;

    SECTION("window count arithmetic") {
        Tape<double> t;
        Ctx<double> ctx{t, ps, {}};
        auto bank = step::build_windows(ctx, 100, t.scalar(10.0), cfg);
        CHECK(bank.layout.n_windows == 9);
    }
    SECTION("max-weight tap sits at the window center") {
        Tape<double> t;
        Ctx<double> ctx{t, ps, {}};
        auto bank = step::build_windows(ctx, 200, t.scalar(7.3), cfg);
        auto w = t.value(bank.weights);
        std::size_t K = bank.layout.taps;
        for (std::size_t n = 0; n < bank.layout.n_windows; ++n) {
            std::size_t best = 0;
            for (std::size_t k = 1; k < K; ++k)
                if (w[n * K + k] > w[n * K + best]) best = k;
            // nearest tap(s) to the center carry the max; offsets are
            // symmetric, so best is within half a tap of the middle
            CHECK(std::abs(double(best) - double(K - 1) / 2.0) <= 0.5);
        }
    }
    SECTION("per-window weights sum to 1 over random settings") {
        step::Rng rng(17);
        for (int i = 0; i < 50; ++i) {
            std::size_t T = 10 + std::size_t(rng.uniform(0, 3000));
            double S = rng.uniform(1.2, 60.0);
            Tape<double> t;
            Ctx<double> ctx{t, ps, {}};
            auto bank = step::build_windows(ctx, T, t.scalar(S), cfg);
            auto w = t.value(bank.weights);
            std::size_t K = bank.layout.taps;
            for (std::size_t n = 0; n < bank.layout.n_windows; ++n) {
                double sum = 0;
                for (std::size_t k = 0; k < K; ++k) sum += w[n * K + k];
                CHECK(sum == Catch::Approx(1.0).margin(1e-6));
            }
            // tap positions clipped into [0, T-1] at the gather; the raw grid
            // stays within one stride of the signal
            auto p = t.value(bank.positions);
            for (double q : p.data) {
                CHECK(q >= -1e-9);
                CHECK(q <= double(T));
            }
        }
    }
}

TEST_CASE("extract_patches: constant signal, linearity, stride gradient") {
    Cfg cfg;
    cfg.d_model = 4;
    ParamStore<double> ps;

    SECTION("constant signal -> tap value c * g") {
        Tape<double> t;
        Ctx<double> ctx{t, ps, {}};
        std::size_t T = 40, F = 3;
        T64 xp({T, F}, 2.5);
        int xn = t.constant(xp);
        auto bank = step::build_windows(ctx, T, t.scalar(3.7), cfg);
        auto v = t.value(step::extract_patches(ctx, xn, bank));
        auto w = t.value(bank.weights);
        for (std::size_t r = 0; r < v.shape[0]; ++r)
            for (std::size_t j = 0; j < F; ++j)
                CHECK(v[r * F + j] == Catch::Approx(2.5 * w[r]).margin(1e-12));
    }
    SECTION("linear in X' with the bank held fixed") {
        step::Rng rng(23);
        std::size_t T = 30, F = 4;
        T64 x = random_signal(T, F, rng), y = random_signal(T, F, rng);
        double a = 1.7, b = -0.6;
        auto run = [&](const T64& sig) {
            Tape<double> t;
            Ctx<double> ctx{t, ps, {}};
            auto bank = step::build_windows(ctx, T, t.scalar(3.3), cfg);
            return t.value(step::extract_patches(ctx, t.constant(sig), bank));
        };
        T64 mix({T, F});
        for (std::size_t i = 0; i < mix.numel(); ++i) mix[i] = a * x[i] + b * y[i];
        auto vx = run(x), vy = run(y), vm = run(mix);
        for (std::size_t i = 0; i < vm.numel(); ++i)
            CHECK(vm[i] == Catch::Approx(a * vx[i] + b * vy[i]).margin(1e-6));
    }
    SECTION("d(loss)/dS matches finite differences") {
        step::Rng rng(29);
        std::size_t T = 30, C = 2, Dl = 4, F = C * Dl;
        T64 xp = random_signal(T, F, rng);
        // away from tap-count and window-count jumps, and chosen so no tap
        // lands on an integer position (linear interpolation kinks there)
        double S0 = 3.14159265;
        auto loss_of = [&](const T64& sv) {
            Tape<double> t;
            Ctx<double> ctx{t, ps, {}};
            int sn = t.leaf(sv, false);
            auto bank = step::build_windows(ctx, T, sn, cfg);
            int p = step::extract_patches(ctx, t.constant(xp), bank);
            return t.value(t.sum(t.mul(p, p))).item();
        };
        Tape<double> t;
        Ctx<double> ctx{t, ps, {}};
        int sn = t.leaf(T64::scalar(S0), true);
        auto bank = step::build_windows(ctx, T, sn, cfg);
        int p = step::extract_patches(ctx, t.constant(xp), bank);
        t.backward(t.sum(t.mul(p, p)));
        auto fd = step::finite_diff_gradient<double>(loss_of, T64::scalar(S0), 1e-5);
        CHECK(step::rel_error(t.leaf_grad(sn), fd) < 1e-4);
    }
}

TEST_CASE("axial_attend_pool contracts") {
    Cfg cfg;
    cfg.d_model = 16;
    auto ps = make_params(cfg, 31);
    step::Rng rng(37);

    SECTION("output shape N x D") {
        std::size_t N = 9, K = 8, C = 3, D = 16;
        Tape<double> t;
        Ctx<double> ctx{t, ps, {}};
        T64 patches({N * K, C * D});
        for (auto& v : patches.data) v = rng.normal();
        auto out = t.value(step::axial_attend_pool(ctx, t.constant(patches), {N, K, false}, C, D));
        CHECK(out.shape == std::vector<std::size_t>{N, D});
    }
    SECTION("degenerate axes C=1, K=1") {
        std::size_t N = 4, D = 16;
        Tape<double> t;
        Ctx<double> ctx{t, ps, {}};
        T64 patches({N, D});
        for (auto& v : patches.data) v = rng.normal();
        auto out = t.value(step::axial_attend_pool(ctx, t.constant(patches), {N, 1, false}, 1, D));
        CHECK(out.shape == std::vector<std::size_t>{N, D});
    }
    SECTION("channel permutation leaves pooled E unchanged") {
        std::size_t N = 5, K = 4, C = 3, D = 16;
        T64 patches({N * K, C * D});
        for (auto& v : patches.data) v = rng.normal();
        T64 permuted({N * K, C * D});
        std::size_t perm[3] = {2, 0, 1};
        for (std::size_t r = 0; r < N * K; ++r)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t d = 0; d < D; ++d)
                    permuted[r * C * D + c * D + d] = patches[r * C * D + perm[c] * D + d];
        auto run = [&](const T64& p) {
            Tape<double> t;
            Ctx<double> ctx{t, ps, {}};
            return t.value(step::axial_attend_pool(ctx, t.constant(p), {N, K, false}, C, D));
        };
        auto a = run(patches), b = run(permuted);
        for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == Catch::Approx(b[i]).margin(1e-6));
    }
}

TEST_CASE("adaptive_patch composition") {
    Cfg cfg;
    cfg.d_model = 8;
    auto ps = make_params(cfg, 41);

    SECTION("zero-init learner gives S=2 and N=49 at T=100") {
        auto zero = ps;
        for (const char* n : {"patching.stride_mlp.w1", "patching.stride_mlp.b1",
                              "patching.stride_mlp.w2", "patching.stride_mlp.b2"})
            for (auto& v : zero.value(n).data) v = 0.0;
        step::Rng rng(43);
        T64 x = random_signal(100, 1, rng);
        Tape<double> t;
        Ctx<double> ctx{t, zero, {}};
        auto out = step::adaptive_patch(ctx, x, cfg);
        CHECK(out.state.stride == Catch::Approx(2.0));
        CHECK(out.state.n_windows == 49);
        CHECK(t.value(out.embeddings).shape == std::vector<std::size_t>{49, 8});
    }
    SECTION("deterministic across calls; penalties recompute from S, N'") {
        step::Rng rng(47);
        T64 x = random_signal(80, 2, rng);
        auto run = [&]() {
            Tape<double> t;
            Ctx<double> ctx{t, ps, {}};
            auto out = step::adaptive_patch(ctx, x, cfg);
            return std::pair{t.value(out.embeddings), out.state};
        };
        auto [e1, s1] = run();
        auto [e2, s2] = run();
        CHECK(e1.data == e2.data);
        CHECK(s1.stride == s2.stride);

        // recompute penalties directly from the formulas
        ParamStore<double> empty;
        Tape<double> t;
        Ctx<double> c{t, empty, {}};
        double sp = t.value(step::stride_penalty(c, t.scalar(s1.stride), cfg)).item();
        double lp = t.value(step::length_penalty(c, t.scalar(s1.n_estimate), cfg)).item();
        CHECK(s1.stride_penalty == Catch::Approx(sp).margin(1e-12));
        CHECK(s1.length_penalty == Catch::Approx(lp).margin(1e-12));
        CHECK(s1.window == Catch::Approx(2.0 * s1.stride));
    }
    SECTION("stride-learner gradient through E is nonzero and matches FD") {
        step::Rng rng(53);
        T64 x = random_signal(36, 2, rng);
        auto loss_for = [&](ParamStore<double>& store) {
            Tape<double> t;
            Ctx<double> ctx{t, store, {}};
            auto out = step::adaptive_patch(ctx, x, cfg);
            int loss = t.sum(t.mul(out.embeddings, out.embeddings));
            return std::pair{&t, loss};
        };
        Tape<double> t;
        Ctx<double> ctx{t, ps, {}};
        auto out = step::adaptive_patch(ctx, x, cfg);
        t.backward(t.sum(t.mul(out.embeddings, out.embeddings)));
        const char* name = "patching.stride_mlp.w2";
        auto g = t.leaf_grad(ctx.p(name));
        double norm = 0;
        for (double v : g.data) norm += v * v;
        CHECK(norm > 0.0);
        auto fd = step::finite_diff_gradient<double>(
            [&](const T64& v) {
                auto ps2 = ps;
                ps2.value(name) = v;
                Tape<double> tt;
                Ctx<double> c2{tt, ps2, {}};
                auto o = step::adaptive_patch(c2, x, cfg);
                return tt.value(tt.sum(tt.mul(o.embeddings, o.embeddings))).item();
            },
            ps.value(name), 1e-5);
        CHECK(step::rel_error(g, fd) < 1e-4);
    }
    SECTION("very short inputs are padded, never rejected") {
        step::Rng rng(59);
        for (std::size_t T : {1u, 2u, 3u}) {
            T64 x = random_signal(T, 1, rng);
            Tape<double> t;
            Ctx<double> ctx{t, ps, {}};
            auto out = step::adaptive_patch(ctx, x, cfg);
            CHECK(out.state.n_windows >= 1);
        }
    }
}

TEST_CASE("fixed_patch_baseline pooling arithmetic") {
    step::Rng rng(61);
    auto naive = [](const T64& x, std::size_t thres) {
        std::size_t T = x.shape[0], C = x.shape[1];
        if (T <= thres) return x;
        std::size_t r = std::size_t(std::ceil(double(T) / double(thres)));
        std::size_t L = std::size_t(std::ceil(double(T) / double(r)));
        T64 out({L, C});
        for (std::size_t b = 0; b < L; ++b)
            for (std::size_t c = 0; c < C; ++c) {
                double acc = 0;
                std::size_t n = 0;
                for (std::size_t t = b * r; t < std::min(b * r + r, T); ++t, ++n) acc += x.at(t, c);
                out.at(b, c) = acc / double(n);
            }
        return out;
    };

    T64 x150 = random_signal(150, 1, rng);
    CHECK(step::fixed_patch_baseline(x150).data == x150.data);

    T64 x1000 = random_signal(1000, 2, rng);
    auto d1000 = step::fixed_patch_baseline(x1000);
    CHECK(d1000.shape[0] == 200);

    T64 x1001 = random_signal(1001, 1, rng);
    auto d1001 = step::fixed_patch_baseline(x1001);
    CHECK(d1001.shape[0] == 167);
    auto want = naive(x1001, 200);
    CHECK(d1001.data == want.data);  // bit-for-bit against the naive loop
}
