#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "step/distill.hpp"
#include "step/model.hpp"
#include "step/synth.hpp"

namespace step {

enum class LossMode { distill, finetune };

struct TrainPlan {
    std::size_t batch_size = 32;
    long phase1 = 1000, phase2 = 2000;  // freeze-schedule boundaries
    double lr = 3e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    long total_steps = 3000;
    long warmup = 0;  // linear lr warmup steps
    std::uint64_t seed = 0;
    double lambda_pen = 0.1;
    LossMode mode = LossMode::finetune;
    long ckpt_every = 500;
    long eval_every = 250;
    double target_accuracy = 0;  // early stop when val accuracy reaches this (0 = off)

    void validate() const {
        if (batch_size < 1) throw std::invalid_argument("plan: batch_size < 1");
        if (!(phase1 < phase2)) throw std::invalid_argument("plan: phase boundaries must increase");
        if (!(lr > 0)) throw std::invalid_argument("plan: lr must be positive");
        if (total_steps < 1) throw std::invalid_argument("plan: total_steps < 1");
    }
};

inline int phase_of(const TrainPlan& plan, long step) {
    if (step < plan.phase1) return 0;
    if (step < plan.phase2) return 1;
    return 2;
}

// Fine-tuning phases: {patching} -> {patching, head} -> everything but the
// distillation projections. Distillation is single-phase: everything but the
// stride learner (its output is overridden) and the head.
template <typename Real>
bool param_trainable(const TrainPlan& plan, long step,
                     const typename ParamStore<Real>::Entry& e) {
    if (plan.mode == LossMode::distill)
        return e.group != "head" && !is_stride_param(e.name);
    switch (phase_of(plan, step)) {
        case 0: return e.group == "patching";
        case 1: return e.group == "patching" || e.group == "head";
        default: return e.group != "proj";
    }
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

template <typename Real>
class Adam {
public:
    void init(const ParamStore<Real>& ps) {
        m_.clear();
        v_.clear();
        for (std::size_t i = 0; i < ps.count(); ++i) {
            m_.emplace_back(ps.value(int(i)).shape);
            v_.emplace_back(ps.value(int(i)).shape);
        }
        t_ = 0;
    }

    // One update over the gradients present in `grads`; `trainable` gates
    // which parameters move (frozen ones are left bit-identical).
    void step(ParamStore<Real>& ps, const std::unordered_map<int, Tensor<Real>>& grads,
              const TrainPlan& plan, const std::function<bool(int)>& trainable) {
        ++t_;
        double lr = plan.lr;
        if (plan.warmup > 0 && t_ <= plan.warmup) lr *= double(t_) / double(plan.warmup);
        const double bc1 = 1.0 - std::pow(plan.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(plan.beta2, double(t_));
        for (const auto& [pid, g] : grads) {
            if (!trainable(pid)) continue;
            auto& m = m_[std::size_t(pid)];
            auto& v = v_[std::size_t(pid)];
            auto& val = ps.value(pid);
            for (std::size_t k = 0; k < g.numel(); ++k) {
                m.data[k] = Real(plan.beta1) * m.data[k] + Real(1 - plan.beta1) * g.data[k];
                v.data[k] = Real(plan.beta2) * v.data[k] + Real(1 - plan.beta2) * g.data[k] * g.data[k];
                Real mh = m.data[k] / Real(bc1);
                Real vh = v.data[k] / Real(bc2);
                val.data[k] -= Real(lr) * mh / (std::sqrt(vh) + Real(plan.eps));
            }
        }
    }

    long t() const { return t_; }
    void set_t(long t) { t_ = t; }
    std::vector<Tensor<Real>>& moments1() { return m_; }
    std::vector<Tensor<Real>>& moments2() { return v_; }

private:
    std::vector<Tensor<Real>> m_, v_;
    long t_ = 0;
};

// ---------------------------------------------------------------------------
// losses and metrics
// ---------------------------------------------------------------------------

// w_c proportional to 1/max(1, count_c), normalized to mean 1.
inline std::vector<double> class_weights(const std::vector<std::size_t>& counts) {
    std::vector<double> w(counts.size());
    double sum = 0;
    for (std::size_t c = 0; c < counts.size(); ++c) {
        w[c] = 1.0 / double(std::max<std::size_t>(1, counts[c]));
        sum += w[c];
    }
    for (auto& v : w) v *= double(w.size()) / sum;
    return w;
}

// -w_label * log softmax(logits)[label], numerically stabilized; logits {1, K}
template <typename Real>
int weighted_ce(Ctx<Real>& ctx, int logits, int label, const std::vector<double>& weights) {
    auto& tp = ctx.tape;
    const std::size_t k = tp.value(logits).shape[1];
    if (label < 0 || std::size_t(label) >= k)
        throw std::invalid_argument("weighted_ce: label " + std::to_string(label) +
                                    " out of range for " + std::to_string(k) + " classes");
    if (weights.size() != k) throw std::invalid_argument("weighted_ce: weight count mismatch");
    for (double w : weights)
        if (!(w > 0)) throw std::invalid_argument("weighted_ce: weights must be positive");

    Real shift = *std::max_element(tp.value(logits).data.begin(), tp.value(logits).data.end());
    int shifted = tp.add_const(logits, -shift);
    int lse = tp.add_const(tp.log_(tp.sum(tp.exp_(shifted))), shift);
    Tensor<Real> onehot({k, 1});
    onehot.data[std::size_t(label)] = Real(1);
    int picked = tp.reshape(tp.matmul(logits, tp.constant(std::move(onehot), "onehot")), {1});
    return tp.scale(tp.sub(lse, picked), Real(weights[std::size_t(label)]));
}

struct MetricsReport {
    double accuracy = 0;  // percent
    double macro_f1 = 0;  // percent
    std::vector<double> precision, recall, f1;          // per class, in [0,1]
    std::vector<std::vector<std::size_t>> confusion;    // [label][pred]
    std::size_t total = 0;
};

inline MetricsReport compute_metrics(const std::vector<int>& labels, const std::vector<int>& preds,
                                     std::size_t n_classes) {
    if (labels.size() != preds.size() || labels.empty())
        throw std::invalid_argument("metrics: need matching nonempty labels/preds");
    MetricsReport r;
    r.total = labels.size();
    r.confusion.assign(n_classes, std::vector<std::size_t>(n_classes, 0));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        r.confusion[std::size_t(labels[i])][std::size_t(preds[i])]++;
        if (labels[i] == preds[i]) ++correct;
    }
    r.accuracy = 100.0 * double(correct) / double(r.total);
    r.precision.assign(n_classes, 0);
    r.recall.assign(n_classes, 0);
    r.f1.assign(n_classes, 0);
    for (std::size_t c = 0; c < n_classes; ++c) {
        std::size_t tp = r.confusion[c][c];
        std::size_t pred_c = 0, true_c = 0;
        for (std::size_t j = 0; j < n_classes; ++j) {
            pred_c += r.confusion[j][c];
            true_c += r.confusion[c][j];
        }
        r.precision[c] = pred_c ? double(tp) / double(pred_c) : 0.0;
        r.recall[c] = true_c ? double(tp) / double(true_c) : 0.0;
        double pr = r.precision[c] + r.recall[c];
        r.f1[c] = pr > 0 ? 2.0 * r.precision[c] * r.recall[c] / pr : 0.0;
        r.macro_f1 += r.f1[c];
    }
    r.macro_f1 *= 100.0 / double(n_classes);
    return r;
}

inline void print_metrics(const MetricsReport& r, std::ostream& os) {
    os << "accuracy " << r.accuracy << "\nmacro_f1 " << r.macro_f1 << "\n";
    os << "class,precision,recall,f1\n";
    for (std::size_t c = 0; c < r.f1.size(); ++c)
        os << c << "," << r.precision[c] << "," << r.recall[c] << "," << r.f1[c] << "\n";
    os << "confusion";
    for (const auto& row : r.confusion) {
        os << "\n";
        for (std::size_t j = 0; j < row.size(); ++j) os << (j ? "," : "") << row[j];
    }
    os << "\n";
}

// ---------------------------------------------------------------------------
// data plumbing
// ---------------------------------------------------------------------------

template <typename Real>
struct SampleCache {
    const DatasetManifest* manifest = nullptr;
    std::map<std::string, Tensor<Real>> signals;

    const Tensor<Real>& signal(const ManifestRecord& r) {
        auto it = signals.find(r.id);
        if (it == signals.end())
            it = signals.emplace(r.id, read_signal_blob<Real>(manifest->blob_path(r))).first;
        return it->second;
    }
};

// Deterministic batch: indices drawn from a stream keyed by (seed, step).
inline std::vector<std::size_t> batch_indices(std::uint64_t seed, long step, std::size_t pool,
                                              std::size_t batch) {
    Rng rng = Rng::derive(seed ^ 0x5e7a11, std::uint64_t(step));
    std::vector<std::size_t> idx(batch);
    for (auto& i : idx) i = rng.below(pool);
    return idx;
}

template <typename Real>
std::vector<std::size_t> label_counts(const std::vector<const ManifestRecord*>& recs,
                                      std::size_t n_classes) {
    std::vector<std::size_t> counts(n_classes, 0);
    for (const auto* r : recs) counts[std::size_t(r->label)]++;
    return counts;
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

struct StepStats {
    long step = 0;
    int phase = 0;
    double loss = 0;
    double stride_mean = 0;
    double n_mean = 0;
    double penalty = 0;
};

inline void log_step(const StepStats& s, std::ostream& os) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "step=%ld phase=%d loss=%.6g stride=%.4g n=%.4g pen=%.6g",
                  s.step, s.phase, s.loss, s.stride_mean, s.n_mean, s.penalty);
    os << buf << "\n";
}

template <typename Real>
struct Trainer {
    ModelConfig<Real> cfg;
    TrainPlan plan;
    ParamStore<Real>* params = nullptr;
    Adam<Real>* opt = nullptr;
    SampleCache<Real>* cache = nullptr;
    std::vector<const ManifestRecord*> train_recs;
    std::vector<double> weights;  // class weights, finetune mode
    // distill mode
    const TeacherSpec* teacher = nullptr;
    std::string feature_dir;
    const std::map<std::string, Tensor<Real>>* feature_cache = nullptr;  // overrides the dir
    long step = 0;
};

// One fine-tuning step: batch-mean weighted CE + lambda_pen * batch-mean
// penalties, then a phase-gated Adam update.
template <typename Real>
StepStats finetune_step(Trainer<Real>& tr) {
    Tape<Real> tp;
    Ctx<Real> ctx{tp, *tr.params};
    auto idx = batch_indices(tr.plan.seed, tr.step, tr.train_recs.size(), tr.plan.batch_size);

    StepStats st;
    st.step = tr.step;
    st.phase = phase_of(tr.plan, tr.step);
    int ce_sum = -1, pen_sum = -1;
    for (std::size_t i : idx) {
        const auto& rec = *tr.train_recs[i];
        step::EncodeResult<Real> enc;
        int logits = forward_logits(ctx, tr.cache->signal(rec), tr.cfg, &enc);
        int ce = weighted_ce(ctx, logits, rec.label, tr.weights);
        ce_sum = ce_sum < 0 ? ce : tp.add(ce_sum, ce);
        if (!tr.cfg.fixed_patching) {
            int pen = enc.state.penalty_node;
            pen_sum = pen_sum < 0 ? pen : tp.add(pen_sum, pen);
            st.stride_mean += double(tp.value(enc.state.stride_node).item());
            st.n_mean += double(enc.state.n_windows);
        }
    }
    const Real inv_b = Real(1) / Real(tr.plan.batch_size);
    int loss = tp.scale(ce_sum, inv_b);
    if (pen_sum >= 0 && tr.plan.lambda_pen != 0) {
        st.penalty = double(tp.value(pen_sum).item()) / double(tr.plan.batch_size);
        loss = tp.add(loss, tp.scale(pen_sum, Real(tr.plan.lambda_pen) * inv_b));
    }
    st.stride_mean /= double(tr.plan.batch_size);
    st.n_mean /= double(tr.plan.batch_size);
    st.loss = double(tp.value(loss).item());
    if (!std::isfinite(st.loss))
        throw NumericError("train: non-finite loss at step " + std::to_string(tr.step));

    tp.backward(loss);
    auto grads = ctx.grads();
    long phase_step = tr.step;
    tr.opt->step(*tr.params, grads, tr.plan, [&](int pid) {
        return param_trainable<Real>(tr.plan, phase_step, tr.params->entry(pid));
    });
    ++tr.step;
    return st;
}

// One distillation step against the routed teacher's stored features.
template <typename Real>
StepStats distill_step(Trainer<Real>& tr) {
    Tape<Real> tp;
    Ctx<Real> ctx{tp, *tr.params};
    auto idx = batch_indices(tr.plan.seed, tr.step, tr.train_recs.size(), tr.plan.batch_size);

    StepStats st;
    st.step = tr.step;
    int sum = -1;
    for (std::size_t i : idx) {
        const auto& rec = *tr.train_recs[i];
        Tensor<Real> f_t = tr.feature_cache
                               ? tr.feature_cache->at(rec.id)
                               : read_feature_blob<Real>(feature_path(tr.feature_dir, rec.id));
        int l = sample_distill_loss(ctx, tr.cache->signal(rec), tr.cfg, *tr.teacher, f_t);
        sum = sum < 0 ? l : tp.add(sum, l);
        st.n_mean += double(f_t.shape[0]);
    }
    int loss = tp.scale(sum, Real(1) / Real(tr.plan.batch_size));
    st.n_mean /= double(tr.plan.batch_size);
    st.loss = double(tp.value(loss).item());
    if (!std::isfinite(st.loss))
        throw NumericError("train: non-finite loss at step " + std::to_string(tr.step));

    tp.backward(loss);
    auto grads = ctx.grads();
    tr.opt->step(*tr.params, grads, tr.plan, [&](int pid) {
        return param_trainable<Real>(tr.plan, tr.step, tr.params->entry(pid));
    });
    ++tr.step;
    return st;
}

template <typename Real>
MetricsReport evaluate(const ModelConfig<Real>& cfg, ParamStore<Real>& ps,
                       SampleCache<Real>& cache, const std::vector<const ManifestRecord*>& recs) {
    if (recs.empty()) throw std::invalid_argument("evaluate: empty split");
    std::vector<int> labels, preds;
    for (const auto* r : recs) {
        Tape<Real> tp;
        Ctx<Real> ctx{tp, ps};
        int logits = forward_logits(ctx, cache.signal(*r), cfg);
        const auto& v = tp.value(logits).data;
        preds.push_back(int(std::max_element(v.begin(), v.end()) - v.begin()));
        labels.push_back(r->label);
    }
    return compute_metrics(labels, preds, cfg.head.n_classes);
}

// ---------------------------------------------------------------------------
// native-precision resume state
// ---------------------------------------------------------------------------
// The interchange checkpoint stores f32 values only; bit-identical resume in
// 64-bit mode additionally needs exact parameter values and optimizer
// moments, so training runs carry this sidecar.

inline constexpr char kTrainStateMagic[8] = {'S', 'T', 'E', 'P', 'T', 'R', 'N', '1'};

template <typename Real>
void save_train_state(const std::string& path, const ParamStore<Real>& ps, Adam<Real>& opt,
                      long step) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("train state: cannot open for write: " + path);
    os.write(kTrainStateMagic, 8);
    detail::write_pod<std::uint32_t>(os, 1);
    detail::write_pod<std::uint32_t>(os, sizeof(Real));
    detail::write_pod<std::int64_t>(os, step);
    detail::write_pod<std::int64_t>(os, opt.t());
    detail::write_pod<std::uint64_t>(os, ps.count());
    auto& m = opt.moments1();
    auto& v = opt.moments2();
    for (std::size_t i = 0; i < ps.count(); ++i) {
        const auto& e = ps.entry(int(i));
        detail::write_pod<std::uint32_t>(os, std::uint32_t(e.name.size()));
        os.write(e.name.data(), std::streamsize(e.name.size()));
        detail::write_pod<std::uint64_t>(os, e.value.numel());
        auto dump = [&](const Tensor<Real>& t) {
            os.write(reinterpret_cast<const char*>(t.data.data()),
                     std::streamsize(t.numel() * sizeof(Real)));
        };
        dump(e.value);
        dump(m[i]);
        dump(v[i]);
    }
    if (!os) throw IoError("train state: write failed: " + path);
}

template <typename Real>
long load_train_state(const std::string& path, ParamStore<Real>& ps, Adam<Real>& opt) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("train state: cannot open: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::string(magic, 8) != std::string(kTrainStateMagic, 8))
        throw IoError("train state: bad magic in " + path);
    if (detail::read_pod<std::uint32_t>(is) != 1) throw IoError("train state: unknown version");
    if (detail::read_pod<std::uint32_t>(is) != sizeof(Real))
        throw IoError("train state: precision mismatch (file was written at another width)");
    long step = long(detail::read_pod<std::int64_t>(is));
    long adam_t = long(detail::read_pod<std::int64_t>(is));
    if (detail::read_pod<std::uint64_t>(is) != ps.count())
        throw IoError("train state: parameter count mismatch");
    opt.init(ps);
    opt.set_t(adam_t);
    for (std::size_t i = 0; i < ps.count(); ++i) {
        auto& e = ps.entry(int(i));
        auto len = detail::read_pod<std::uint32_t>(is);
        std::string name(len, '\0');
        is.read(name.data(), len);
        if (name != e.name) throw IoError("train state: parameter order mismatch at " + name);
        if (detail::read_pod<std::uint64_t>(is) != e.value.numel())
            throw IoError("train state: shape mismatch at " + name);
        auto slurp = [&](Tensor<Real>& t) {
            is.read(reinterpret_cast<char*>(t.data.data()),
                    std::streamsize(t.numel() * sizeof(Real)));
        };
        slurp(e.value);
        slurp(opt.moments1()[i]);
        slurp(opt.moments2()[i]);
    }
    if (!is) throw IoError("train state: truncated file: " + path);
    return step;
}

}  // namespace step
