#pragma once

#include <optional>

#include "step/encoder.hpp"
#include "step/patching.hpp"
#include "step/stats.hpp"

namespace step {

// Full STEP model: normalization -> adaptive patching -> stats token ->
// conv frontend -> positional -> transformer body (-> head or projection).

template <typename Real>
struct ModelConfig {
    PatchConfig<Real> patching;
    EncoderConfig encoder;
    HeadConfig head;
    bool use_stats_token = true;   // --no-stats-token ablation turns this off
    bool fixed_patching = false;   // rule-based ablation baseline
    std::size_t t_thres = 200;     // fixed-patching downsampling threshold

    static ModelConfig desk_scale(std::size_t n_classes = 2) {
        ModelConfig cfg;
        cfg.encoder = EncoderConfig::desk_scale();
        cfg.patching.d_model = cfg.encoder.d_model;
        cfg.head = {n_classes, cfg.encoder.d_model, cfg.encoder.d_model};
        return cfg;
    }
};

template <typename Real>
void register_model_params(ParamStore<Real>& ps, const ModelConfig<Real>& cfg, Rng& rng) {
    register_patching_params(ps, cfg.patching, rng);
    register_stats_params(ps, cfg.patching.d_model, rng);
    register_encoder_params(ps, cfg.encoder, rng);
    register_head_params(ps, cfg.encoder, cfg.head, rng);
}

template <typename Real>
struct EncodeResult {
    int tokens = -1;               // {M, D} transformer output
    std::size_t n_patch_tokens = 0;  // M minus the stats token (if present)
    bool has_stats_token = false;
    PatchingState<Real> state;
};

// Encode one raw (T x C) sample up to the transformer output.
template <typename Real>
EncodeResult<Real> encode_sample(Ctx<Real>& ctx, const Tensor<Real>& x_raw,
                                 const ModelConfig<Real>& cfg,
                                 std::optional<Real> forced_stride = std::nullopt) {
    auto& tp = ctx.tape;
    auto norm = normalize_per_channel(x_raw);

    EncodeResult<Real> out;
    int emb;
    if (cfg.fixed_patching) {
        Tensor<Real> ds = fixed_patch_baseline(norm.x, cfg.t_thres);
        ds = pad_min_length(ds, cfg.patching.t_floor);
        std::size_t L = ds.shape[0], C = ds.shape[1], D = cfg.patching.d_model;
        int xp = channel_conv(ctx, ds, cfg.patching);  // {L, C*D}
        emb = tp.mean_axis1(tp.reshape(xp, {L, C, D}));
        out.state.n_windows = L;
    } else {
        auto patched = adaptive_patch(ctx, norm.x, cfg.patching, forced_stride);
        emb = patched.embeddings;
        out.state = patched.state;
    }
    out.n_patch_tokens = tp.value(emb).shape[0];

    int h = conv_frontend(ctx, emb);
    if (cfg.use_stats_token) {
        int token = encode_stats(ctx, norm.stats, cfg.patching.d_model);
        h = inject_stats(ctx, h, token);
        out.has_stats_token = true;
    }
    h = add_positional(ctx, h, cfg.encoder);
    out.tokens = transformer_encode(ctx, h, cfg.encoder);
    return out;
}

// Tokens without the stats prefix row (the distillation target view).
template <typename Real>
int patch_tokens(Ctx<Real>& ctx, const EncodeResult<Real>& enc) {
    if (!enc.has_stats_token) return enc.tokens;
    auto& tp = ctx.tape;
    return tp.slice_rows(enc.tokens, 1, tp.value(enc.tokens).shape[0]);
}

// Logits for one sample: {1, n_classes}.
template <typename Real>
int forward_logits(Ctx<Real>& ctx, const Tensor<Real>& x_raw, const ModelConfig<Real>& cfg,
                   EncodeResult<Real>* enc_out = nullptr) {
    auto enc = encode_sample(ctx, x_raw, cfg);
    if (enc_out) *enc_out = enc;
    return classify(ctx, enc.tokens);
}

}  // namespace step
