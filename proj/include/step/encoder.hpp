#pragma once

#include <cmath>
#include <string>

#include "step/ops.hpp"
#include "step/params.hpp"

namespace step {

// Whisper-style encoder body: two-conv frontend, learnable positional
// embeddings, pre-norm Transformer blocks, final layer norm; plus the 3-layer
// MLP task head.

struct EncoderConfig {
    std::size_t d_model = 64;
    std::size_t n_blocks = 2;
    std::size_t n_heads = 4;
    std::size_t ffn_mult = 4;
    std::size_t max_positions = 256;

    // full-scale reference preset
    static EncoderConfig full_scale() { return {768, 17, 12, 4, 256}; }
    // desk-scale preset used by default everywhere
    static EncoderConfig desk_scale() { return {64, 2, 4, 4, 256}; }

    void validate() const {
        if (d_model % n_heads != 0)
            throw std::invalid_argument("encoder config: d_model must be divisible by n_heads");
    }
};

struct HeadConfig {
    std::size_t n_classes = 2;
    std::size_t hidden1 = 64;
    std::size_t hidden2 = 64;
};

template <typename Real>
void register_encoder_params(ParamStore<Real>& ps, const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    std::size_t D = cfg.d_model;
    Real ws = Real(1) / std::sqrt(Real(D));
    for (const char* conv : {"conv1", "conv2"}) {
        for (int k = 0; k < 3; ++k)
            ps.add_normal("encoder.frontend." + std::string(conv) + ".w" + std::to_string(k),
                          "encoder", {D, D}, rng, ws / Real(3));
        ps.add_zeros("encoder.frontend." + std::string(conv) + ".b", "encoder", {D});
    }
    ps.add_normal("encoder.pos", "encoder", {cfg.max_positions, D}, rng, Real(0.02));
    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
        std::string p = "encoder.blk" + std::to_string(b) + ".";
        ps.add_ones(p + "ln1.g", "encoder", {D});
        ps.add_zeros(p + "ln1.b", "encoder", {D});
        for (const char* m : {"wq", "wk", "wv", "wo"})
            ps.add_normal(p + "attn." + m, "encoder", {D, D}, rng, ws);
        ps.add_ones(p + "ln2.g", "encoder", {D});
        ps.add_zeros(p + "ln2.b", "encoder", {D});
        ps.add_normal(p + "ffn.w1", "encoder", {D, cfg.ffn_mult * D}, rng, ws);
        ps.add_zeros(p + "ffn.b1", "encoder", {cfg.ffn_mult * D});
        ps.add_normal(p + "ffn.w2", "encoder", {cfg.ffn_mult * D, D}, rng,
                      Real(1) / std::sqrt(Real(cfg.ffn_mult * D)));
        ps.add_zeros(p + "ffn.b2", "encoder", {D});
    }
    ps.add_ones("encoder.ln_f.g", "encoder", {D});
    ps.add_zeros("encoder.ln_f.b", "encoder", {D});
}

template <typename Real>
void register_head_params(ParamStore<Real>& ps, const EncoderConfig& ecfg, const HeadConfig& hcfg,
                          Rng& rng) {
    std::size_t D = ecfg.d_model;
    ps.add_normal("head.l1.w", "head", {D, hcfg.hidden1}, rng, Real(1) / std::sqrt(Real(D)));
    ps.add_zeros("head.l1.b", "head", {hcfg.hidden1});
    ps.add_normal("head.l2.w", "head", {hcfg.hidden1, hcfg.hidden2}, rng,
                  Real(1) / std::sqrt(Real(hcfg.hidden1)));
    ps.add_zeros("head.l2.b", "head", {hcfg.hidden2});
    ps.add_normal("head.l3.w", "head", {hcfg.hidden2, hcfg.n_classes}, rng,
                  Real(1) / std::sqrt(Real(hcfg.hidden2)));
    ps.add_zeros("head.l3.b", "head", {hcfg.n_classes});
}

namespace detail {

// 1-D convolution over the token axis, kernel 3, same padding, as shifted
// matmuls against the three kernel taps.
template <typename Real>
int token_conv3(Ctx<Real>& ctx, int x, const std::string& prefix) {
    auto& tp = ctx.tape;
    std::size_t M = tp.value(x).shape[0], D = tp.value(x).shape[1];
    int zero = tp.constant(Tensor<Real>({1, D}), "conv_pad");
    int pad = tp.concat_rows({zero, x, zero});
    int y = tp.matmul(tp.slice_rows(pad, 0, M), ctx.p(prefix + ".w0"));
    y = tp.add(y, tp.matmul(tp.slice_rows(pad, 1, M + 1), ctx.p(prefix + ".w1")));
    y = tp.add(y, tp.matmul(tp.slice_rows(pad, 2, M + 2), ctx.p(prefix + ".w2")));
    return tp.add_rowvec(y, ctx.p(prefix + ".b"));
}

template <typename Real>
int multi_head_attention(Ctx<Real>& ctx, int x, const EncoderConfig& cfg,
                         const std::string& prefix) {
    auto& tp = ctx.tape;
    std::size_t M = tp.value(x).shape[0], D = cfg.d_model;
    std::size_t H = cfg.n_heads, Dh = D / H;
    int q = tp.matmul(x, ctx.p(prefix + ".wq"));
    int k = tp.matmul(x, ctx.p(prefix + ".wk"));
    int v = tp.matmul(x, ctx.p(prefix + ".wv"));
    auto heads = [&](int m) {
        // {M, D} -> {H, M, Dh}
        return tp.permute(tp.reshape(m, {M, H, Dh}), {1, 0, 2});
    };
    int s = tp.scale(tp.bmm_nt(heads(q), heads(k)), Real(1) / std::sqrt(Real(Dh)));
    int a = tp.reshape(tp.softmax_rows(tp.reshape(s, {H * M, M})), {H, M, M});
    int o = tp.bmm_nn(a, heads(v));  // {H, M, Dh}
    int merged = tp.reshape(tp.permute(o, {1, 0, 2}), {M, D});
    return tp.matmul(merged, ctx.p(prefix + ".wo"));
}

}  // namespace detail

// E (N x D_in==D) -> two token-axis convolutions with a GELU between
template <typename Real>
int conv_frontend(Ctx<Real>& ctx, int embeddings) {
    auto& tp = ctx.tape;
    int h = detail::token_conv3(ctx, embeddings, "encoder.frontend.conv1");
    return detail::token_conv3(ctx, gelu(tp, h), "encoder.frontend.conv2");
}

template <typename Real>
int add_positional(Ctx<Real>& ctx, int h, const EncoderConfig& cfg) {
    auto& tp = ctx.tape;
    std::size_t M = tp.value(h).shape[0];
    if (M > cfg.max_positions)
        throw std::invalid_argument("add_positional: sequence of " + std::to_string(M) +
                                    " tokens exceeds max_positions=" +
                                    std::to_string(cfg.max_positions));
    return tp.add(h, tp.slice_rows(ctx.p("encoder.pos"), 0, M));
}

template <typename Real>
int transformer_encode(Ctx<Real>& ctx, int h, const EncoderConfig& cfg) {
    auto& tp = ctx.tape;
    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
        std::string p = "encoder.blk" + std::to_string(b) + ".";
        int n1 = tp.layer_norm_rows(h, ctx.p(p + "ln1.g"), ctx.p(p + "ln1.b"));
        h = tp.add(h, detail::multi_head_attention(ctx, n1, cfg, p + "attn"));
        int n2 = tp.layer_norm_rows(h, ctx.p(p + "ln2.g"), ctx.p(p + "ln2.b"));
        int f = tp.add_rowvec(tp.matmul(n2, ctx.p(p + "ffn.w1")), ctx.p(p + "ffn.b1"));
        f = tp.add_rowvec(tp.matmul(gelu(tp, f), ctx.p(p + "ffn.w2")), ctx.p(p + "ffn.b2"));
        h = tp.add(h, f);
    }
    return tp.layer_norm_rows(h, ctx.p("encoder.ln_f.g"), ctx.p("encoder.ln_f.b"));
}

// mean pool over tokens, then the 3-layer MLP head -> logits {1, n_classes}
template <typename Real>
int classify(Ctx<Real>& ctx, int z) {
    auto& tp = ctx.tape;
    int pooled = tp.mean_rows(z);
    int h = gelu(tp, tp.add_rowvec(tp.matmul(pooled, ctx.p("head.l1.w")), ctx.p("head.l1.b")));
    h = gelu(tp, tp.add_rowvec(tp.matmul(h, ctx.p("head.l2.w")), ctx.p("head.l2.b")));
    return tp.add_rowvec(tp.matmul(h, ctx.p("head.l3.w")), ctx.p("head.l3.b"));
}

}  // namespace step
