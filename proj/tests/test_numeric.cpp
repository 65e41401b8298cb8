#include <catch2/catch_amalgamated.hpp>

#include "step/gradcheck.hpp"
#include "step/ops.hpp"
#include "step/params.hpp"
#include "step/rng.hpp"
#include "step/tape.hpp"

#include <cstdio>
#include <filesystem>

using step::Tensor;
using step::Tape;
using T64 = Tensor<double>;

static T64 random_tensor(std::vector<std::size_t> shape, step::Rng& rng, double scale = 1.0) {
    T64 t(std::move(shape));
    for (auto& v : t.data) v = rng.normal() * scale;
    return t;
}

TEST_CASE("x*x gradient at x=3") {
    Tape<double> t;
    int x = t.leaf(T64::scalar(3.0), true);
    int y = t.mul(x, x);
    t.backward(y);
    CHECK(t.value(y).item() == 9.0);
    CHECK(t.leaf_grad(x)[0] == Catch::Approx(6.0));
}

TEST_CASE("sum of softmax has zero gradient") {
    step::Rng rng(7);
    Tape<double> t;
    int x = t.leaf(random_tensor({1, 6}, rng), true);
    int loss = t.sum(t.softmax_rows(x));
    t.backward(loss);
    CHECK(t.value(loss).item() == Catch::Approx(1.0));
    auto g = t.leaf_grad(x);
    for (double v : g.data) CHECK(std::abs(v) < 1e-12);
}

TEST_CASE("linear regression loss gradient matches finite differences") {
    step::Rng rng(11);
    T64 W0 = random_tensor({4, 4}, rng);
    T64 v = random_tensor({4, 1}, rng);
    T64 target = random_tensor({4, 1}, rng);

    auto loss_of = [&](const T64& W) {
        Tape<double> t;
        int w = t.leaf(W, false);
        int x = t.constant(v);
        int tt = t.constant(target);
        int resid = t.sub(t.matmul(w, x), tt);
        return t.value(t.mean(t.mul(resid, resid))).item();
    };

    Tape<double> t;
    int w = t.leaf(W0, true);
    int resid = t.sub(t.matmul(w, t.constant(v)), t.constant(target));
    int loss = t.mean(t.mul(resid, resid));
    t.backward(loss);

    auto fd = step::finite_diff_gradient<double>(loss_of, W0, 1e-5);
    CHECK(step::rel_error(t.leaf_grad(w), fd) < 1e-6);
}

TEST_CASE("finite_diff_gradient on x^3 and a constant") {
    auto cube = [](const T64& x) { return x[0] * x[0] * x[0]; };
    auto g = step::finite_diff_gradient<double>(cube, T64::scalar(2.0), 1e-5);
    CHECK(g[0] == Catch::Approx(12.0).margin(1e-6));

    auto constant = [](const T64&) { return 4.5; };
    auto gz = step::finite_diff_gradient<double>(constant, T64({3}, {1.0, 2.0, 3.0}));
    for (double v : gz.data) CHECK(v == 0.0);
}

TEST_CASE("huber values and contract") {
    Tape<double> t;
    auto hub = [&](double x, double d) {
        Tape<double> tt;
        return tt.value(tt.huber(tt.scalar(x), d)).item();
    };
    CHECK(hub(0.0, 1.0) == 0.0);
    CHECK(hub(1.0, 1.0) == Catch::Approx(0.5));
    CHECK(hub(3.0, 1.0) == Catch::Approx(2.5));
    CHECK_THROWS(t.huber(t.scalar(1.0), 0.0));
}

TEST_CASE("huber is even, nonnegative, zero only at 0, derivative clamped") {
    step::Rng rng(3);
    for (int i = 0; i < 50; ++i) {
        double x = rng.uniform(-5, 5);
        double d = rng.uniform(0.2, 2.5);
        double hx = step::huber_value(x, d);
        double hmx = step::huber_value(-x, d);
        CHECK(hx == Catch::Approx(hmx));
        CHECK(hx >= 0.0);
        if (x != 0.0) CHECK(hx > 0.0);
        Tape<double> t;
        int xn = t.leaf(T64::scalar(x), true);
        t.backward(t.huber(xn, d));
        CHECK(std::abs(t.leaf_grad(xn)[0]) <= d + 1e-12);
    }
}

TEST_CASE("primitive gradients match finite differences over random points") {
    step::Rng rng(42);
    struct Case {
        const char* name;
        std::vector<std::size_t> shape;
        std::function<int(Tape<double>&, int)> build;
        double scale;
    };
    std::vector<Case> cases = {
        {"exp", {2, 3}, [](Tape<double>& t, int x) { return t.sum(t.exp_(x)); }, 0.5},
        {"log", {2, 3}, [](Tape<double>& t, int x) { return t.sum(t.log_(t.add_const(t.mul(x, x), 0.5))); }, 1.0},
        {"tanh", {2, 3}, [](Tape<double>& t, int x) { return t.sum(t.tanh_(x)); }, 1.0},
        {"softplus", {2, 3}, [](Tape<double>& t, int x) { return t.sum(t.softplus(x)); }, 2.0},
        {"softmax", {3, 4},
         [](Tape<double>& t, int x) {
             // weighted so the gradient is not trivially zero
             Tensor<double> w({3, 4});
             for (std::size_t i = 0; i < w.numel(); ++i) w[i] = double(i % 5) - 2.0;
             return t.sum(t.mul(t.softmax_rows(x), t.constant(w)));
         },
         1.0},
        {"mean_rows", {4, 3}, [](Tape<double>& t, int x) { return t.sum(t.mul(t.mean_rows(x), t.mean_rows(x))); }, 1.0},
        {"layer_norm", {3, 5},
         [](Tape<double>& t, int x) {
             int g = t.constant(Tensor<double>({5}, {1.0, 0.5, 2.0, -1.0, 1.5}));
             int b = t.constant(Tensor<double>({5}, {0.1, 0.0, -0.2, 0.3, 0.0}));
             int y = t.layer_norm_rows(x, g, b);
             return t.sum(t.mul(y, y));
         },
         1.0},
        {"gelu", {2, 4}, [](Tape<double>& t, int x) { return t.sum(step::gelu(t, x)); }, 1.5},
        {"permute+slice+concat", {4, 3},
         [](Tape<double>& t, int x) {
             int p = t.permute(x, {1, 0});
             int s = t.slice_rows(p, 0, 2);
             int c = t.concat_rows({s, s});
             return t.sum(t.mul(c, c));
         },
         1.0},
    };
    for (const auto& c : cases) {
        for (int trial = 0; trial < 20; ++trial) {
            T64 x0 = random_tensor(c.shape, rng, c.scale);
            Tape<double> t;
            int x = t.leaf(x0, true);
            t.backward(c.build(t, x));
            auto fd = step::finite_diff_gradient<double>(
                [&](const T64& xv) {
                    Tape<double> tt;
                    int xn = tt.leaf(xv, false);
                    return tt.value(c.build(tt, xn)).item();
                },
                x0, 1e-5);
            INFO(c.name << " trial " << trial);
            CHECK(step::rel_error(t.leaf_grad(x), fd) < 1e-4);
        }
    }
}

TEST_CASE("gather_linear forward and gradient") {
    step::Rng rng(5);
    T64 x0 = random_tensor({6, 2}, rng);
    T64 pos0({3}, {0.3, 2.5, 4.2});

    // integer-aligned position reduces to exact indexing
    {
        Tape<double> t;
        int x = t.leaf(x0, false);
        int pos = t.constant(T64({1}, {3.0}));
        auto v = t.value(t.gather_linear(x, pos));
        CHECK(v[0] == x0.at(3, 0));
        CHECK(v[1] == x0.at(3, 1));
    }
    // gradient w.r.t. both inputs
    auto loss_of_x = [&](const T64& xv) {
        Tape<double> t;
        int x = t.leaf(xv, false);
        int pos = t.constant(pos0);
        int y = t.gather_linear(x, pos);
        return t.value(t.sum(t.mul(y, y))).item();
    };
    auto loss_of_pos = [&](const T64& pv) {
        Tape<double> t;
        int x = t.leaf(x0, false);
        int pos = t.leaf(pv, false);
        int y = t.gather_linear(x, pos);
        return t.value(t.sum(t.mul(y, y))).item();
    };
    Tape<double> t;
    int x = t.leaf(x0, true);
    int pos = t.leaf(pos0, true);
    int y = t.gather_linear(x, pos);
    t.backward(t.sum(t.mul(y, y)));
    CHECK(step::rel_error(t.leaf_grad(x), step::finite_diff_gradient<double>(loss_of_x, x0)) < 1e-5);
    CHECK(step::rel_error(t.leaf_grad(pos), step::finite_diff_gradient<double>(loss_of_pos, pos0)) < 1e-5);
}

TEST_CASE("forward_backward determinism") {
    step::Rng rng(9);
    T64 x0 = random_tensor({3, 3}, rng);
    auto run = [&]() {
        Tape<double> t;
        int x = t.leaf(x0, true);
        int y = t.sum(t.exp_(t.tanh_(t.matmul(x, x))));
        t.backward(y);
        return std::pair{t.value(y).item(), t.leaf_grad(x)};
    };
    auto [v1, g1] = run();
    auto [v2, g2] = run();
    CHECK(v1 == v2);
    CHECK(g1.data == g2.data);
}

TEST_CASE("contract violations") {
    Tape<double> t;
    int x = t.leaf(T64({2, 2}, {1, 2, 3, 4}), true);
    CHECK_THROWS_AS(t.backward(x), std::invalid_argument);  // non-scalar loss
    CHECK_THROWS_AS(t.log_(t.constant(T64::scalar(-1.0))), step::NumericError);  // NaN diagnostic
}

TEST_CASE("checkpoint round-trip and corruption handling") {
    namespace fs = std::filesystem;
    step::Rng rng(13);
    auto build = [&](std::uint64_t seed) {
        step::ParamStore<double> ps;
        step::Rng r(seed);
        ps.add_normal("patching.conv.w", "patching", {5, 8}, r, 0.1);
        ps.add_zeros("encoder.pos", "encoder", {16, 8});
        ps.add_ones("head.out.g", "head", {8});
        return ps;
    };
    auto ps = build(1);
    auto path = (fs::temp_directory_path() / "step_ckpt_test.bin").string();
    step::save_checkpoint(ps, path);

    auto ps2 = build(2);
    step::load_checkpoint(ps2, path);
    for (std::size_t i = 0; i < ps.count(); ++i) {
        const auto& a = ps.value(int(i));
        const auto& b = ps2.value(int(i));
        REQUIRE(a.shape == b.shape);
        for (std::size_t j = 0; j < a.numel(); ++j)
            CHECK(b[j] == Catch::Approx(double(float(a[j]))));  // stored as f32
    }

    // corrupt the magic
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.put('X');
    }
    auto ps3 = build(3);
    CHECK_THROWS_AS(step::load_checkpoint(ps3, path), step::IoError);
    fs::remove(path);
}
