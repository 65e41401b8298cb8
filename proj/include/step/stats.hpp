#pragma once

#include <cmath>

#include "step/params.hpp"
#include "step/tape.hpp"

namespace step {

// Statistics compensation: per-sample, per-channel standardization plus
// re-injection of log-scaled channel statistics as a learned prefix token.

template <typename Real>
struct ChannelStats {
    std::vector<Real> mean;  // signal units, per channel
    std::vector<Real> std;   // population std, >= 0
    static constexpr Real eps = Real(1e-8);
};

template <typename Real>
struct Normalized {
    Tensor<Real> x;  // T x C
    ChannelStats<Real> stats;
};

// Population std (1/T); constant channels come out all-zero via the eps guard.
template <typename Real>
Normalized<Real> normalize_per_channel(const Tensor<Real>& x) {
    std::size_t T = x.shape[0], C = x.shape[1];
    if (T < 1) throw std::invalid_argument("normalize_per_channel: empty signal");
    Normalized<Real> out;
    out.x = Tensor<Real>({T, C});
    out.stats.mean.resize(C);
    out.stats.std.resize(C);
    for (std::size_t c = 0; c < C; ++c) {
        Real mu = 0;
        for (std::size_t t = 0; t < T; ++t) mu += x.at(t, c);
        mu /= Real(T);
        Real var = 0;
        for (std::size_t t = 0; t < T; ++t) {
            Real d = x.at(t, c) - mu;
            var += d * d;
        }
        var /= Real(T);
        Real sd = std::sqrt(var);
        out.stats.mean[c] = mu;
        out.stats.std[c] = sd;
        Real denom = std::max(sd, ChannelStats<Real>::eps);
        for (std::size_t t = 0; t < T; ++t) out.x.at(t, c) = (x.at(t, c) - mu) / denom;
    }
    return out;
}

// signed log: sign(x) * log(1 + |x|)
template <typename Real>
Real slog(Real x) {
    return x >= Real(0) ? std::log1p(x) : -std::log1p(-x);
}

template <typename Real>
void register_stats_params(ParamStore<Real>& ps, std::size_t d_model, Rng& rng) {
    ps.add_normal("stats.map.w", "stats", {2, d_model}, rng, Real(0.1));
    ps.add_zeros("stats.map.b", "stats", {d_model});
}

// Per channel the pair (slog(mu), log(sigma + eps)) goes through a shared
// 2->D linear map; mean pooling over channels gives one D-token, so the width
// is fixed no matter how many channels the sample has.
template <typename Real>
int encode_stats(Ctx<Real>& ctx, const ChannelStats<Real>& stats, std::size_t d_model) {
    std::size_t C = stats.mean.size();
    if (C < 1) throw std::invalid_argument("encode_stats: no channels");
    auto& tp = ctx.tape;
    Tensor<Real> pairs({C, 2});
    for (std::size_t c = 0; c < C; ++c) {
        pairs.at(c, 0) = slog(stats.mean[c]);
        pairs.at(c, 1) = std::log(stats.std[c] + ChannelStats<Real>::eps);
    }
    int mapped = tp.add_rowvec(tp.matmul(tp.constant(std::move(pairs), "stat_pairs"),
                                         ctx.p("stats.map.w")),
                               ctx.p("stats.map.b"));
    return tp.mean_rows(mapped);  // 1 x D
}

// Token prepended at position 0; the downstream positional table covers the
// extra row.
template <typename Real>
int inject_stats(Ctx<Real>& ctx, int features, int token) {
    auto& tp = ctx.tape;
    if (tp.value(features).shape[1] != tp.value(token).shape[1])
        throw std::invalid_argument("inject_stats: dim mismatch");
    return tp.concat_rows({token, features});
}

}  // namespace step
