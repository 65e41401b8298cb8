#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "step/model.hpp"
#include "step/synth.hpp"

namespace step {

struct AlignmentError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Stride that makes the student's window count land on the teacher's feature
// length: N'(T, S) = T/S - 1 = N_t under W = 2S.
inline double forced_stride(std::size_t t_len, std::size_t n_t) {
    if (n_t < 1 || t_len < 2) throw AlignmentError("forced_stride: need N_t >= 1, T >= 2");
    double s = double(t_len) / double(n_t + 1);
    if (s <= 1.0)
        throw AlignmentError("forced_stride: T=" + std::to_string(t_len) +
                             ", N_t=" + std::to_string(n_t) + " would need stride <= 1");
    return s;
}

// One linear map D -> D_t per teacher, group "proj" so fine-tuning can
// exclude them wholesale.
template <typename Real>
void register_projection_params(ParamStore<Real>& ps, const std::vector<TeacherSpec>& teachers,
                                std::size_t d_model, Rng& rng) {
    for (const auto& t : teachers) {
        std::string base = "distill.proj." + t.teacher_id;
        ps.add_normal(base + ".w", "proj", {d_model, t.d_t}, rng,
                      Real(1) / std::sqrt(Real(d_model)));
        ps.add_zeros(base + ".b", "proj", {1, t.d_t});
    }
}

template <typename Real>
int project_student(Ctx<Real>& ctx, int tokens, const std::string& teacher_id) {
    auto& tp = ctx.tape;
    std::string base = "distill.proj." + teacher_id;
    int b = ctx.p(base + ".b");
    return tp.add_rowvec(tp.matmul(tokens, ctx.p(base + ".w")),
                         tp.reshape(b, {tp.value(b).shape[1]}));
}

// MSE over the first min(M, N_t) rows; a bigger gap means the forced stride
// did not do its job, so fail loudly rather than truncate.
template <typename Real>
int distill_loss(Ctx<Real>& ctx, int z_proj, const Tensor<Real>& f_t) {
    auto& tp = ctx.tape;
    const std::size_t m = tp.value(z_proj).shape[0], n_t = f_t.shape[0];
    if (tp.value(z_proj).shape[1] != f_t.shape[1])
        throw AlignmentError("distill_loss: feature dim mismatch " +
                             shape_str(tp.value(z_proj).shape) + " vs " + shape_str(f_t.shape));
    if ((m > n_t ? m - n_t : n_t - m) > 1)
        throw AlignmentError("distill_loss: |M - N_t| > 1 (M=" + std::to_string(m) +
                             ", N_t=" + std::to_string(n_t) + ")");
    const std::size_t k = std::min(m, n_t);
    int z = m == k ? z_proj : tp.slice_rows(z_proj, 0, k);
    Tensor<Real> target({k, f_t.shape[1]});
    std::copy(f_t.data.begin(), f_t.data.begin() + std::ptrdiff_t(target.numel()),
              target.data.begin());
    int d = tp.sub(z, tp.constant(std::move(target), "F_t"));
    return tp.mean(tp.mul(d, d));
}

// Unweighted sum (optionally scaled per teacher via `weights`).
template <typename Real>
int combine_losses(Ctx<Real>& ctx, const std::map<std::string, int>& per_teacher,
                   const std::map<std::string, Real>& weights = {}) {
    if (per_teacher.empty()) throw std::logic_error("combine_losses: empty loss map");
    auto& tp = ctx.tape;
    int total = -1;
    for (const auto& [id, node] : per_teacher) {
        int term = node;
        if (auto it = weights.find(id); it != weights.end())
            term = tp.scale(term, it->second);
        total = total < 0 ? term : tp.add(total, term);
    }
    return total;
}

// domain tag -> teacher_id; the loader contract requires homogeneous batches.
class TeacherRouter {
public:
    void add(const TeacherSpec& t) { by_domain_[t.domain] = t.teacher_id; }

    const std::string& route(const std::string& tag) const {
        auto it = by_domain_.find(tag);
        if (it == by_domain_.end())
            throw std::invalid_argument("route_batch: no teacher registered for domain '" + tag +
                                        "'");
        return it->second;
    }

    std::string route_batch(const std::vector<std::string>& tags) const {
        if (tags.empty()) throw std::invalid_argument("route_batch: empty batch");
        const std::string& id = route(tags.front());
        for (const auto& t : tags)
            if (route(t) != id)
                throw std::invalid_argument("route_batch: mixed-domain batch ('" + tags.front() +
                                            "' vs '" + t + "')");
        return id;
    }

private:
    std::map<std::string, std::string> by_domain_;
};

// Full per-sample distillation loss: encode under forced stride, project into
// the teacher's space, MSE against its stored features.
template <typename Real>
int sample_distill_loss(Ctx<Real>& ctx, const Tensor<Real>& x_raw, const ModelConfig<Real>& cfg,
                        const TeacherSpec& teacher, const Tensor<Real>& f_t) {
    Real s = Real(forced_stride(x_raw.shape[0], f_t.shape[0]));
    auto enc = encode_sample(ctx, x_raw, cfg, std::optional<Real>(s));
    int z = project_student(ctx, patch_tokens(ctx, enc), teacher.teacher_id);
    return distill_loss(ctx, z, f_t);
}

}  // namespace step
