#pragma once

#include <algorithm>
#include <cmath>
#include <optional>

#include "step/ops.hpp"
#include "step/params.hpp"
#include "step/rng.hpp"
#include "step/tape.hpp"

namespace step {

// Learnable Adaptive Patching: a (T x C) signal is compressed into (N x D)
// embeddings through a learned stride S, Gaussian soft windows of length
// W = beta * S, axial attention within each patch, and mean pooling.

template <typename Real>
struct PatchConfig {
    std::size_t d_model = 64;
    Real beta = Real(2);       // W = beta * S
    Real s_max = Real(400);
    Real n_max = Real(200);
    Real n_min = Real(5);
    Real sigma_div = Real(4);  // sigma = W / sigma_div
    Real clamp_sharpness = Real(10);
    std::size_t conv_kernel = 5;
    std::size_t stride_hidden = 16;
    std::size_t k_min = 4, k_max = 64;
    std::size_t t_floor = 4;   // shorter inputs are edge-padded to this
};

template <typename Real>
struct PatchingState {
    Real stride = 0;          // S
    Real window = 0;          // W = beta * S
    Real n_estimate = 0;      // N', differentiable estimate
    std::size_t n_windows = 0;
    Real stride_penalty = 0;
    Real length_penalty = 0;
    int stride_node = -1;     // tape nodes, for loss composition
    int penalty_node = -1;    // stride_penalty + length_penalty
};

// Tap layout shared by window construction and patch extraction.
struct WindowLayout {
    std::size_t n_windows = 0;
    std::size_t taps = 0;  // K
    bool short_input = false;  // single window centered on the sequence
};

template <typename Real>
void register_patching_params(ParamStore<Real>& ps, const PatchConfig<Real>& cfg, Rng& rng) {
    const auto D = cfg.d_model;
    const auto k = cfg.conv_kernel;
    const auto H = cfg.stride_hidden;
    ps.add_normal("patching.conv.w", "patching", {k, D}, rng, Real(1) / std::sqrt(Real(k)));
    ps.add_zeros("patching.conv.b", "patching", {D});
    // Init so that S ~ T/100 out of the box: unit 0 carries log(T) almost
    // linearly through the tanh (small input weight, large output weight),
    // giving roughly 100 windows for any input length before training. The
    // remaining hidden units start near zero and only break symmetry.
    ps.add_normal("patching.stride_mlp.w1", "patching", {1, H}, rng, Real(0.05));
    ps.add_zeros("patching.stride_mlp.b1", "patching", {1, H});
    ps.add_normal("patching.stride_mlp.w2", "patching", {H, 1}, rng, Real(0.01));
    ps.add_zeros("patching.stride_mlp.b2", "patching", {1, 1});
    ps.value("patching.stride_mlp.w1").at(0, 0) = Real(0.05);
    ps.value("patching.stride_mlp.w2").at(0, 0) = Real(20);
    ps.value("patching.stride_mlp.b2")[0] = -std::log(Real(100));
    Real ws = Real(1) / std::sqrt(Real(D));
    for (const char* ax : {"axial_t", "axial_c"})
        for (const char* m : {"wq", "wk", "wv"})
            ps.add_normal(std::string("patching.") + ax + "." + m, "patching", {D, D}, rng, ws);
}

// Parameters of the stride learner, excluded from training when the stride is
// forced during distillation.
inline bool is_stride_param(const std::string& name) {
    return name.rfind("patching.stride_mlp.", 0) == 0;
}

// Edge-pad a raw signal to at least t_floor samples.
template <typename Real>
Tensor<Real> pad_min_length(const Tensor<Real>& x, std::size_t t_floor) {
    std::size_t T = x.shape[0], C = x.shape[1];
    if (T >= t_floor) return x;
    Tensor<Real> out({t_floor, C});
    for (std::size_t t = 0; t < t_floor; ++t) {
        std::size_t src = std::min(t, T - 1);
        for (std::size_t c = 0; c < C; ++c) out.at(t, c) = x.at(src, c);
    }
    return out;
}

// Channel-independent 1-D convolution (same kernel for every channel), same
// padding, output T x C x D returned as a {T, C*D} node.
template <typename Real>
int channel_conv(Ctx<Real>& ctx, const Tensor<Real>& x, const PatchConfig<Real>& cfg) {
    std::size_t T = x.shape[0], C = x.shape[1];
    if (T < 1 || C < 1) throw std::invalid_argument("channel_conv: empty signal");
    const std::size_t k = cfg.conv_kernel;
    const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(k / 2);
    // im2col over (channel-major rows); input carries no gradient so this is
    // a plain constant on the tape
    Tensor<Real> cols({C * T, k});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t j = 0; j < k; ++j) {
                std::ptrdiff_t src = std::ptrdiff_t(t) + std::ptrdiff_t(j) - half;
                cols[(c * T + t) * k + j] =
                    (src < 0 || src >= std::ptrdiff_t(T)) ? Real(0) : x.at(std::size_t(src), c);
            }
    auto& tp = ctx.tape;
    int y = tp.add_rowvec(tp.matmul(tp.constant(std::move(cols), "im2col"), ctx.p("patching.conv.w")),
                          ctx.p("patching.conv.b"));
    // (C,T,D) -> (T,C,D) -> {T, C*D}
    int r = tp.reshape(y, {C, T, cfg.d_model});
    int p = tp.permute(r, {1, 0, 2});
    return tp.reshape(p, {T, C * cfg.d_model});
}

// S = 1 + exp(MLP(log T)); returns a scalar node
template <typename Real>
int learn_stride(Ctx<Real>& ctx, std::size_t T) {
    if (T < 2) throw std::invalid_argument("learn_stride: T must be >= 2");
    auto& tp = ctx.tape;
    int x = tp.constant(Tensor<Real>({1, 1}, {std::log(Real(T))}), "logT");
    int h = tp.tanh_(tp.add(tp.matmul(x, ctx.p("patching.stride_mlp.w1")),
                            ctx.p("patching.stride_mlp.b1")));
    int y = tp.add(tp.matmul(h, ctx.p("patching.stride_mlp.w2")), ctx.p("patching.stride_mlp.b2"));
    return tp.reshape(tp.add_const(tp.exp_(y), Real(1)), {1});
}

// N' = smooth-max(1, T/S - 1)
template <typename Real>
int estimate_length(Ctx<Real>& ctx, std::size_t T, int stride_node,
                    const PatchConfig<Real>& cfg) {
    auto& tp = ctx.tape;
    int ratio = tp.div(tp.scalar(Real(T)), stride_node);
    int raw = tp.add_const(ratio, Real(-1));
    return smooth_max_const(tp, raw, Real(1), cfg.clamp_sharpness);
}

template <typename Real>
int stride_penalty(Ctx<Real>& ctx, int stride_node, const PatchConfig<Real>& cfg) {
    auto& tp = ctx.tape;
    return hinge_huber(tp, tp.add_const(tp.log_(stride_node), -std::log(cfg.s_max)));
}

template <typename Real>
int length_penalty(Ctx<Real>& ctx, int n_est_node, const PatchConfig<Real>& cfg) {
    auto& tp = ctx.tape;
    int ln = tp.log_(n_est_node);
    int upper = hinge_huber(tp, tp.add_const(ln, -std::log(cfg.n_max)));
    int lower = hinge_huber(tp, tp.scale(tp.add_const(ln, -std::log(cfg.n_min)), Real(-1)));
    return tp.add(upper, lower);
}

// Integer window count used for actual placement.
template <typename Real>
std::size_t window_count(std::size_t T, Real stride, Real beta = Real(2)) {
    Real W = beta * stride;
    if (Real(T) < W) return 1;
    return static_cast<std::size_t>(std::floor((Real(T) - W) / stride)) + 1;
}

template <typename Real>
std::size_t taps_per_window(Real stride, const PatchConfig<Real>& cfg) {
    Real W = cfg.beta * stride;
    auto k = static_cast<long long>(std::llround(W));
    return std::clamp<long long>(k, (long long)cfg.k_min, (long long)cfg.k_max);
}

template <typename Real>
struct WindowBank {
    WindowLayout layout;
    int positions = -1;  // node, N*K fractional tap positions (clipped)
    int weights = -1;    // node, N*K Gaussian weights, each window sums to 1
};

// Gaussian soft windows. Window n covers [n S, n S + W], center (n+1) S; taps
// are evenly spaced and positions stay linear in S so gradients flow from the
// interpolated patch values back into the stride. With sigma = W/sigma_div
// the normalized tap weights depend only on the relative offsets, so the
// weight profile is shared by all windows.
template <typename Real>
WindowBank<Real> build_windows(Ctx<Real>& ctx, std::size_t T, int stride_node,
                               const PatchConfig<Real>& cfg) {
    auto& tp = ctx.tape;
    Real S = tp.value(stride_node).item();
    if (!(S > Real(1))) throw std::invalid_argument("build_windows: stride must be > 1");
    WindowBank<Real> bank;
    std::size_t N = window_count(T, S, cfg.beta);
    std::size_t K = taps_per_window(S, cfg);
    bank.layout = {N, K, Real(T) < cfg.beta * S};

    // offsets a_k in [-1, 1] about the center, in units of W/2
    std::vector<Real> offs(K);
    for (std::size_t k = 0; k < K; ++k)
        offs[k] = K == 1 ? Real(0) : Real(2) * Real(k) / Real(K - 1) - Real(1);

    // positions: p_{n,k} = center_n + (W/2) * a_k, linear in S
    if (!bank.layout.short_input) {
        // p = S * (n + 1 + a_k)
        Tensor<Real> coeff({N * K});
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t k = 0; k < K; ++k) coeff[n * K + k] = Real(n + 1) + offs[k];
        bank.positions = tp.bmul(tp.constant(std::move(coeff), "tap_coeff"), stride_node);
    } else {
        // single window centered on the sequence: p = (T-1)/2 + S * a_k
        Tensor<Real> coeff({K});
        for (std::size_t k = 0; k < K; ++k) coeff[k] = offs[k] * cfg.beta / Real(2);
        int scaled = tp.bmul(tp.constant(std::move(coeff), "tap_coeff"), stride_node);
        bank.positions = tp.add_const(scaled, (Real(T) - Real(1)) / Real(2));
    }

    // weights: g propto exp(-(p - c)^2 / (2 sigma^2)) with p - c = (W/2) a_k
    // and sigma = W / sigma_div  =>  exponent = -(sigma_div^2 / 8) a_k^2
    Real ws = cfg.sigma_div * cfg.sigma_div / Real(8);
    std::vector<Real> w(K);
    Real z = 0;
    for (std::size_t k = 0; k < K; ++k) z += (w[k] = std::exp(-ws * offs[k] * offs[k]));
    Tensor<Real> weights({N * K});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < K; ++k) weights[n * K + k] = w[k] / z;
    bank.weights = tp.constant(std::move(weights), "tap_weights");
    return bank;
}

// X' ({T, C*D}) -> weighted interpolated patches {N*K, C*D}
template <typename Real>
int extract_patches(Ctx<Real>& ctx, int xprime, const WindowBank<Real>& bank) {
    auto& tp = ctx.tape;
    int gathered = tp.gather_linear(xprime, bank.positions);
    return tp.scale_rows(gathered, bank.weights);
}

// Single-head scaled dot-product self-attention with residual, applied to B
// independent groups of L tokens. x is {B*L, D}.
template <typename Real>
int attend_groups(Ctx<Real>& ctx, int x, std::size_t B, std::size_t L, std::size_t D,
                  const std::string& prefix) {
    auto& tp = ctx.tape;
    int q = tp.matmul(x, ctx.p(prefix + ".wq"));
    int k = tp.matmul(x, ctx.p(prefix + ".wk"));
    int v = tp.matmul(x, ctx.p(prefix + ".wv"));
    int s = tp.bmm_nt(tp.reshape(q, {B, L, D}), tp.reshape(k, {B, L, D}));
    int a = tp.softmax_rows(tp.reshape(tp.scale(s, Real(1) / std::sqrt(Real(D))), {B * L, L}));
    int o = tp.bmm_nn(tp.reshape(a, {B, L, L}), tp.reshape(v, {B, L, D}));
    return tp.add(x, tp.reshape(o, {B * L, D}));
}

// patches {N*K, C*D} -> axial attention along taps then channels -> mean pool
// over taps and channels -> E {N, D}
template <typename Real>
int axial_attend_pool(Ctx<Real>& ctx, int patches, const WindowLayout& layout, std::size_t C,
                      std::size_t D) {
    auto& tp = ctx.tape;
    std::size_t N = layout.n_windows, K = layout.taps;
    // {N,K,C,D} -> {N,C,K,D}: temporal attention per (window, channel)
    int x = tp.permute(tp.reshape(patches, {N, K, C, D}), {0, 2, 1, 3});
    int t_attn = attend_groups(ctx, tp.reshape(x, {N * C * K, D}), N * C, K, D, "patching.axial_t");
    // -> {N,K,C,D}: channel attention per (window, tap)
    int xc = tp.permute(tp.reshape(t_attn, {N, C, K, D}), {0, 2, 1, 3});
    int c_attn = attend_groups(ctx, tp.reshape(xc, {N * K * C, D}), N * K, C, D, "patching.axial_c");
    // mean over taps and channels
    return tp.mean_axis1(tp.reshape(c_attn, {N, K * C, D}));
}

template <typename Real>
struct PatchOutput {
    int embeddings = -1;  // {N, D}
    PatchingState<Real> state;
};

// Full adaptive patching pipeline. If forced_stride is set the stride learner
// is bypassed and no gradient reaches it (distillation mode).
template <typename Real>
PatchOutput<Real> adaptive_patch(Ctx<Real>& ctx, const Tensor<Real>& x_raw,
                                 const PatchConfig<Real>& cfg,
                                 std::optional<Real> forced_stride = std::nullopt) {
    auto& tp = ctx.tape;
    Tensor<Real> x = pad_min_length(x_raw, cfg.t_floor);
    std::size_t T = x.shape[0], C = x.shape[1];

    int xprime = channel_conv(ctx, x, cfg);
    int s_node = forced_stride ? tp.constant(Tensor<Real>::scalar(*forced_stride), "forced_S")
                               : learn_stride(ctx, T);
    int n_est = estimate_length(ctx, T, s_node, cfg);
    int s_pen = stride_penalty(ctx, s_node, cfg);
    int l_pen = length_penalty(ctx, n_est, cfg);

    auto bank = build_windows(ctx, T, s_node, cfg);
    int patches = extract_patches(ctx, xprime, bank);
    int emb = axial_attend_pool(ctx, patches, bank.layout, C, cfg.d_model);

    PatchOutput<Real> out;
    out.embeddings = emb;
    out.state.stride = tp.value(s_node).item();
    out.state.window = cfg.beta * out.state.stride;
    out.state.n_estimate = tp.value(n_est).item();
    out.state.n_windows = bank.layout.n_windows;
    out.state.stride_penalty = tp.value(s_pen).item();
    out.state.length_penalty = tp.value(l_pen).item();
    out.state.stride_node = s_node;
    out.state.penalty_node = tp.add(s_pen, l_pen);
    return out;
}

// Rule-based fixed-patching ablation: sequences longer than t_thres are
// average-pooled with ratio ceil(T / t_thres); the final partial block is
// averaged over its actual length.
template <typename Real>
Tensor<Real> fixed_patch_baseline(const Tensor<Real>& x, std::size_t t_thres = 200) {
    std::size_t T = x.shape[0], C = x.shape[1];
    if (T < 1) throw std::invalid_argument("fixed_patch_baseline: empty signal");
    if (T <= t_thres) return x;
    std::size_t r = (T + t_thres - 1) / t_thres;
    std::size_t L = (T + r - 1) / r;
    Tensor<Real> out({L, C});
    for (std::size_t b = 0; b < L; ++b) {
        std::size_t lo = b * r, hi = std::min(lo + r, T);
        for (std::size_t c = 0; c < C; ++c) {
            Real acc = 0;
            for (std::size_t t = lo; t < hi; ++t) acc += x.at(t, c);
            out.at(b, c) = acc / Real(hi - lo);
        }
    }
    return out;
}

}  // namespace step
