// step: scientific time-series encoder toolchain.
//
// Commands: gen-data, gen-teacher-features, distill, train, eval, gradcheck.
// Exit codes: 0 ok, 2 usage, 3 data error, 4 numeric failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "step/distill.hpp"
#include "step/gradcheck.hpp"
#include "step/train.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0, kUsage = 2, kData = 3, kNumeric = 4;

struct CliDataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Refuse to overwrite prior results unless --force.
void prepare_out_dir(const std::string& out, bool force) {
    if (fs::exists(out) && !fs::is_empty(out)) {
        if (!force) throw CliDataError("output dir exists and is not empty (use --force): " + out);
        fs::remove_all(out);
    }
    fs::create_directories(out);
}

// config file -> --set overrides -> STEP_SEED env
step::KvConfig resolve_config(const std::string& config_path,
                              const std::vector<std::string>& overrides) {
    step::KvConfig cfg;
    if (!config_path.empty()) cfg = step::KvConfig::from_file(config_path);
    for (const auto& kv : overrides) {
        auto eq = kv.find('=');
        if (eq == std::string::npos) throw CLI::ValidationError("--set expects key=value: " + kv);
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (const char* env = std::getenv("STEP_SEED")) cfg.set("train.seed", env);
    return cfg;
}

template <typename Real>
step::ModelConfig<Real> model_config_from(const step::KvConfig& cfg) {
    auto mc = step::ModelConfig<Real>::desk_scale();
    auto& e = mc.encoder;
    e.d_model = std::size_t(cfg.get_int("model.d_model", long(e.d_model)));
    e.n_blocks = std::size_t(cfg.get_int("model.n_blocks", long(e.n_blocks)));
    e.n_heads = std::size_t(cfg.get_int("model.n_heads", long(e.n_heads)));
    e.ffn_mult = std::size_t(cfg.get_int("model.ffn_mult", long(e.ffn_mult)));
    e.max_positions = std::size_t(cfg.get_int("model.max_positions", long(e.max_positions)));
    e.validate();
    mc.patching.d_model = e.d_model;
    std::size_t n_classes = std::size_t(cfg.get_int("model.n_classes", long(mc.head.n_classes)));
    mc.head = {n_classes, e.d_model, e.d_model};
    mc.use_stats_token = cfg.get_bool("model.use_stats_token", mc.use_stats_token);
    mc.fixed_patching = cfg.get_bool("model.fixed_patching", mc.fixed_patching);
    mc.t_thres = std::size_t(cfg.get_int("model.t_thres", long(mc.t_thres)));
    return mc;
}

step::TrainPlan plan_from(const step::KvConfig& cfg) {
    step::TrainPlan p;
    p.batch_size = std::size_t(cfg.get_int("train.batch_size", long(p.batch_size)));
    p.phase1 = cfg.get_int("train.phase1", p.phase1);
    p.phase2 = cfg.get_int("train.phase2", p.phase2);
    p.lr = cfg.get_real("train.lr", p.lr);
    p.beta1 = cfg.get_real("train.beta1", p.beta1);
    p.beta2 = cfg.get_real("train.beta2", p.beta2);
    p.eps = cfg.get_real("train.eps", p.eps);
    p.total_steps = cfg.get_int("train.steps", p.total_steps);
    p.warmup = cfg.get_int("train.warmup", p.warmup);
    p.seed = std::uint64_t(cfg.get_int("train.seed", long(p.seed)));
    p.lambda_pen = cfg.get_real("train.lambda_pen", p.lambda_pen);
    p.ckpt_every = cfg.get_int("train.ckpt_every", p.ckpt_every);
    p.eval_every = cfg.get_int("train.eval_every", p.eval_every);
    p.target_accuracy = cfg.get_real("train.target_accuracy", p.target_accuracy);
    p.validate();
    return p;
}

void record_run_config(const step::KvConfig& cfg, const std::string& out) {
    cfg.write((fs::path(out) / "run_config.txt").string());
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

// ---------------------------------------------------------------------------
// gen-data / gen-teacher-features
// ---------------------------------------------------------------------------

int cmd_gen_data(const std::string& spec_path, const std::string& out, long n_train, long n_val,
                 bool force) {
    auto file_cfg = step::KvConfig::from_file(spec_path);
    auto spec = step::spec_from_config(file_cfg);
    if (n_train <= 0) n_train = file_cfg.get_int("dataset.train", 20000);
    if (n_val <= 0) n_val = file_cfg.get_int("dataset.val", 4000);
    prepare_out_dir(out, force);
    step::KvConfig run = file_cfg;
    run.set("dataset.train", std::to_string(n_train));
    run.set("dataset.val", std::to_string(n_val));
    record_run_config(run, out);
    auto m = step::gen_dataset(spec, std::size_t(n_train), std::size_t(n_val), out);
    std::cout << "wrote " << m.records.size() << " samples to " << out << "\n";
    return kOk;
}

int cmd_gen_teacher_features(const std::string& preset, const std::string& data,
                             const std::string& out, bool force) {
    auto teacher = step::teacher_preset(preset);
    auto manifest = step::read_manifest(data);
    step::validate_manifest(manifest);
    prepare_out_dir(out, force);
    step::gen_teacher_features(teacher, manifest, out);
    std::cout << "wrote " << manifest.records.size() << " feature records for " << preset
              << " to " << out << "\n";
    return kOk;
}

// ---------------------------------------------------------------------------
// training drivers
// ---------------------------------------------------------------------------

template <typename Real>
int run_train(const step::KvConfig& cfg, const std::string& data, const std::string& out,
              const std::string& init_ckpt, const std::string& resume_state) {
    auto mc = model_config_from<Real>(cfg);
    auto plan = plan_from(cfg);
    plan.mode = step::LossMode::finetune;

    auto manifest = step::read_manifest(data);
    step::validate_manifest(manifest);

    step::ParamStore<Real> ps;
    step::Rng init_rng(plan.seed);
    step::register_model_params(ps, mc, init_rng);
    // pretrained checkpoints carry projection heads; skip them here
    if (!init_ckpt.empty()) step::load_checkpoint(ps, init_ckpt, /*ignore_unknown=*/true);

    step::Adam<Real> opt;
    opt.init(ps);
    step::SampleCache<Real> cache;
    cache.manifest = &manifest;

    step::Trainer<Real> tr;
    tr.cfg = mc;
    tr.plan = plan;
    tr.params = &ps;
    tr.opt = &opt;
    tr.cache = &cache;
    tr.train_recs = manifest.split("train");
    if (tr.train_recs.empty()) throw CliDataError("no train split in " + data);
    tr.weights = step::class_weights(
        step::label_counts<Real>(tr.train_recs, mc.head.n_classes));
    auto val = manifest.split("val");

    if (!resume_state.empty()) tr.step = step::load_train_state(resume_state, ps, opt);

    std::ofstream log(fs::path(out) / "train.log", std::ios::app);
    auto save_all = [&] {
        step::save_checkpoint(ps, (fs::path(out) / "model.ckpt").string());
        step::save_train_state((fs::path(out) / "state.bin").string(), ps, opt, tr.step);
    };

    while (tr.step < plan.total_steps) {
        auto st = step::finetune_step(tr);
        step::log_step(st, log);
        if (st.step % 50 == 0) step::log_step(st, std::cout);
        bool at_eval = plan.eval_every > 0 && (st.step + 1) % plan.eval_every == 0;
        if (at_eval && !val.empty()) {
            auto r = step::evaluate(mc, ps, cache, val);
            log << "eval step=" << tr.step << " acc=" << r.accuracy << " f1=" << r.macro_f1
                << "\n";
            std::cout << "eval step=" << tr.step << " acc=" << r.accuracy
                      << " f1=" << r.macro_f1 << "\n";
            if (plan.target_accuracy > 0 && r.accuracy >= plan.target_accuracy) break;
        }
        if (plan.ckpt_every > 0 && tr.step % plan.ckpt_every == 0) save_all();
    }
    save_all();
    if (!val.empty()) {
        auto r = step::evaluate(mc, ps, cache, val);
        std::ofstream ms(fs::path(out) / "metrics.txt");
        step::print_metrics(r, ms);
        step::print_metrics(r, std::cout);
    }
    return kOk;
}

template <typename Real>
int run_distill(const step::KvConfig& cfg, const std::string& data, const std::string& features,
                const std::vector<std::string>& teacher_names, const std::string& out) {
    auto mc = model_config_from<Real>(cfg);
    auto plan = plan_from(cfg);
    plan.mode = step::LossMode::distill;

    auto manifest = step::read_manifest(data);
    step::validate_manifest(manifest);

    std::vector<step::TeacherSpec> teachers;
    step::TeacherRouter router;
    std::map<std::string, std::string> feature_dirs;
    for (const auto& name : teacher_names) {
        fs::path dir = fs::path(features) / name;
        auto t = fs::exists(dir / "teacher.json") ? step::read_teacher_meta(dir.string())
                                                  : step::teacher_preset(name);
        if (!fs::exists(dir)) dir = features;  // single-teacher flat store
        teachers.push_back(t);
        router.add(t);
        feature_dirs[t.teacher_id] = dir.string();
    }

    step::ParamStore<Real> ps;
    step::Rng init_rng(plan.seed);
    step::register_model_params(ps, mc, init_rng);
    step::register_projection_params(ps, teachers, mc.encoder.d_model, init_rng);
    step::Adam<Real> opt;
    opt.init(ps);
    step::SampleCache<Real> cache;
    cache.manifest = &manifest;

    // homogeneous-domain batches, round-robin across domains
    std::map<std::string, std::vector<const step::ManifestRecord*>> by_domain;
    for (const auto* r : manifest.split("train")) by_domain[r->domain].push_back(r);
    if (by_domain.empty()) throw CliDataError("no train split in " + data);
    std::vector<std::string> domains;
    for (const auto& [d, recs] : by_domain) {
        router.route(d);  // fail early on unregistered domains
        domains.push_back(d);
    }

    step::Trainer<Real> tr;
    tr.cfg = mc;
    tr.plan = plan;
    tr.params = &ps;
    tr.opt = &opt;
    tr.cache = &cache;

    std::ofstream log(fs::path(out) / "train.log", std::ios::app);
    double first_loss = -1;
    while (tr.step < plan.total_steps) {
        const auto& domain = domains[std::size_t(tr.step) % domains.size()];
        const std::string& tid = router.route(domain);
        tr.train_recs = by_domain[domain];
        for (const auto& t : teachers)
            if (t.teacher_id == tid) tr.teacher = &t;
        tr.feature_dir = feature_dirs[tid];
        auto st = step::distill_step(tr);
        if (first_loss < 0) first_loss = st.loss;
        step::log_step(st, log);
        if (st.step % 50 == 0) step::log_step(st, std::cout);
        if (plan.ckpt_every > 0 && tr.step % plan.ckpt_every == 0)
            step::save_checkpoint(ps, (fs::path(out) / "model.ckpt").string());
    }
    step::save_checkpoint(ps, (fs::path(out) / "model.ckpt").string());
    step::save_train_state((fs::path(out) / "state.bin").string(), ps, opt, tr.step);
    std::cout << "distill done, first loss " << first_loss << "\n";
    return kOk;
}

template <typename Real>
int run_eval(const step::KvConfig& cfg, const std::string& ckpt, const std::string& data,
             const std::string& split, const std::string& out) {
    auto mc = model_config_from<Real>(cfg);
    auto manifest = step::read_manifest(data);
    step::validate_manifest(manifest);
    auto recs = manifest.split(split);
    if (recs.empty()) throw CliDataError("split '" + split + "' is empty in " + data);

    step::ParamStore<Real> ps;
    step::Rng rng(std::uint64_t(cfg.get_int("train.seed", 0)));
    step::register_model_params(ps, mc, rng);
    if (!ckpt.empty()) step::load_checkpoint(ps, ckpt);

    step::SampleCache<Real> cache;
    cache.manifest = &manifest;
    auto r = step::evaluate(mc, ps, cache, recs);
    step::print_metrics(r, std::cout);
    if (!out.empty()) {
        std::ofstream os(out);
        step::print_metrics(r, os);
    }
    return kOk;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

struct GradReport {
    std::string name;
    double rel_err;
};

// Finite-difference check of every parameter reachable from `loss_of`,
// reported per parameter tensor.
template <typename Build>
void fd_check_params(step::ParamStore<double>& ps, Build&& loss_of,
                     std::vector<GradReport>& out, const std::string& prefix) {
    step::Tape<double> tp;
    step::Ctx<double> ctx{tp, ps};
    int loss = loss_of(ctx);
    tp.backward(loss);
    for (const auto& [pid, nid] : ctx.leaves) {
        auto analytic = tp.leaf_grad(nid);
        std::string name = ps.entry(pid).name;
        std::function<double(const step::Tensor<double>&)> f =
            [&](const step::Tensor<double>& v) {
                step::ParamStore<double> ps2 = ps;
                ps2.value(name) = v;
                step::Tape<double> tp2;
                step::Ctx<double> c2{tp2, ps2};
                return tp2.value(loss_of(c2)).item();
            };
        // stride-learner entries move every tap position; a tighter step
        // keeps the probe inside one linear-interpolation cell
        double h = step::is_stride_param(name) ? 1e-7 : 1e-5;
        auto fd = step::finite_diff_gradient(f, ps.value(name), h);
        out.push_back({prefix + name, step::rel_error(analytic, fd)});
    }
}

void gradcheck_patching(std::vector<GradReport>& out) {
    step::PatchConfig<double> pc;
    pc.d_model = 8;
    step::ParamStore<double> ps;
    step::Rng rng(101);
    step::register_patching_params(ps, pc, rng);
    // the finite-difference oracle needs a smooth neighborhood: pick an input
    // length whose tap positions all clear the integer interpolation kinks
    auto kink_clearance = [&](std::size_t t_len) {
        step::Tape<double> t;
        step::Ctx<double> ctx{t, ps, {}};
        int s = step::learn_stride(ctx, t_len);
        auto bank = step::build_windows(ctx, t_len, s, pc);
        double best = 1.0;
        for (double p : t.value(bank.positions).data)
            if (p > 1e-9) best = std::min(best, std::abs(p - std::round(p)));
        return best;
    };
    std::size_t t_pick = 57;
    for (std::size_t t_len = 40; t_len < 160; ++t_len)
        if (kink_clearance(t_len) > 2.5e-3) {
            t_pick = t_len;
            break;
        }
    step::Tensor<double> x({t_pick, 2});
    step::Rng drng(102);
    for (auto& v : x.data) v = drng.normal();
    fd_check_params(
        ps,
        [&](step::Ctx<double>& c) {
            auto res = step::adaptive_patch(c, x, pc);
            return c.tape.add(c.tape.mean(res.embeddings), res.state.penalty_node);
        },
        out, "patching/");
}

void gradcheck_encoder(std::vector<GradReport>& out) {
    step::EncoderConfig ec{8, 1, 2, 2, 32};
    step::HeadConfig hc{3, 8, 8};
    step::ParamStore<double> ps;
    step::Rng rng(103);
    step::register_encoder_params(ps, ec, rng);
    step::register_head_params(ps, ec, hc, rng);
    step::Tensor<double> tokens({5, 8});
    step::Rng drng(104);
    for (auto& v : tokens.data) v = drng.normal();
    fd_check_params(
        ps,
        [&](step::Ctx<double>& c) {
            int h = c.tape.constant(tokens, "tokens");
            h = step::add_positional(c, h, ec);
            h = step::transformer_encode(c, h, ec);
            return c.tape.mean(step::classify(c, h));
        },
        out, "encoder/");
}

void gradcheck_distill(std::vector<GradReport>& out) {
    auto teacher = step::teacher_preset("audio-like");
    step::ParamStore<double> ps;
    step::Rng rng(105);
    step::register_projection_params<double>(ps, {teacher}, 8, rng);
    step::Rng drng(106);
    step::Tensor<double> tokens({6, 8}), target({6, 48});
    for (auto& v : tokens.data) v = drng.normal();
    for (auto& v : target.data) v = drng.normal();
    fd_check_params(
        ps,
        [&](step::Ctx<double>& c) {
            int z = step::project_student(c, c.tape.constant(tokens, "t"), "audio-like");
            return step::distill_loss(c, z, target);
        },
        out, "distill/");
}

int cmd_gradcheck(const std::string& scope) {
    std::vector<GradReport> reports;
    if (scope == "patching" || scope == "all") gradcheck_patching(reports);
    if (scope == "encoder" || scope == "all") gradcheck_encoder(reports);
    if (scope == "distill" || scope == "all") gradcheck_distill(reports);
    if (reports.empty()) throw CLI::ValidationError("unknown gradcheck scope: " + scope);

    double worst = 0;
    for (const auto& r : reports) {
        std::cout << "gradcheck " << r.name << " rel_err=" << r.rel_err << "\n";
        worst = std::max(worst, r.rel_err);
    }
    bool pass = worst <= 1e-4;
    std::cout << (pass ? "PASS" : "FAIL") << ", worst rel err " << worst << "\n";
    return pass ? kOk : kNumeric;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"scientific time-series encoder toolchain"};
    app.require_subcommand(1);

    std::string spec_path, data_dir, out_dir, config_path, ckpt_path, init_ckpt, resume_state;
    std::string teacher_preset_name, teachers_list = "audio-like", split = "val", scope = "all";
    std::string precision = "64", eval_out;
    long n_train = 0, n_val = 0, steps_override = -1;
    long long seed_override = -1;
    bool force = false, no_stats = false, fixed_patching = false;
    long t_thres = -1;
    std::vector<std::string> overrides;

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    gen->add_option("--spec", spec_path, "signal spec config file")->required();
    gen->add_option("--out", out_dir, "output directory")->required();
    gen->add_option("--train", n_train, "train sample count (default from spec or 20000)");
    gen->add_option("--val", n_val, "val sample count (default from spec or 4000)");
    gen->add_flag("--force", force, "overwrite existing output");

    auto* gtf = app.add_subcommand("gen-teacher-features", "precompute frozen-teacher targets");
    gtf->add_option("--teacher", teacher_preset_name, "teacher preset")->required();
    gtf->add_option("--data", data_dir, "dataset directory")->required();
    gtf->add_option("--out", out_dir, "output directory")->required();
    gtf->add_flag("--force", force, "overwrite existing output");

    auto add_common = [&](CLI::App* c) {
        c->add_option("--config", config_path, "config file");
        c->add_option("--set", overrides, "override config entries (key=value)");
        c->add_option("--seed", seed_override, "seed override");
        c->add_option("--steps", steps_override, "total steps override");
        c->add_option("--precision", precision, "32 or 64")->check(CLI::IsMember({"32", "64"}));
        c->add_flag("--no-stats-token", no_stats, "ablation: drop the statistics token");
        c->add_flag("--fixed-patching", fixed_patching, "ablation: rule-based patching baseline");
        c->add_option("--t-thres", t_thres, "fixed-patching downsample threshold");
        c->add_flag("--force", force, "overwrite existing output");
    };

    auto* dis = app.add_subcommand("distill", "multi-teacher distillation pretraining");
    dis->add_option("--data", data_dir, "dataset directory")->required();
    dis->add_option("--features", spec_path, "teacher feature store root")->required();
    dis->add_option("--teachers", teachers_list, "comma-separated teacher list");
    dis->add_option("--out", out_dir, "output directory")->required();
    add_common(dis);

    auto* trn = app.add_subcommand("train", "downstream fine-tuning");
    trn->add_option("--data", data_dir, "dataset directory")->required();
    trn->add_option("--out", out_dir, "output directory")->required();
    trn->add_option("--init", init_ckpt, "initial checkpoint (e.g. distilled)");
    trn->add_option("--resume", resume_state, "resume from a training state file");
    add_common(trn);

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    ev->add_option("--ckpt", ckpt_path, "checkpoint path");
    ev->add_option("--data", data_dir, "dataset directory")->required();
    ev->add_option("--split", split, "split name (default val)");
    ev->add_option("--out", eval_out, "write the metrics report here too");
    ev->add_option("--config", config_path, "config (default: run_config.txt next to ckpt)");
    ev->add_option("--set", overrides, "override config entries (key=value)");
    ev->add_flag("--no-stats-token", no_stats, "ablation: drop the statistics token");
    ev->add_flag("--fixed-patching", fixed_patching, "ablation: rule-based patching baseline");
    ev->add_option("--t-thres", t_thres, "fixed-patching downsample threshold");
    ev->add_option("--precision", precision, "32 or 64")->check(CLI::IsMember({"32", "64"}));

    auto* gc = app.add_subcommand("gradcheck", "finite-difference verification");
    gc->add_option("--scope", scope, "patching|encoder|distill|all")
        ->check(CLI::IsMember({"patching", "encoder", "distill", "all"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? kOk : kUsage;
    }

    try {
        if (*gen) return cmd_gen_data(spec_path, out_dir, n_train, n_val, force);
        if (*gtf) return cmd_gen_teacher_features(teacher_preset_name, data_dir, out_dir, force);
        if (*gc) return cmd_gradcheck(scope);

        // commands below share the config pipeline
        if (*ev && config_path.empty() && !ckpt_path.empty()) {
            fs::path sibling = fs::path(ckpt_path).parent_path() / "run_config.txt";
            if (fs::exists(sibling)) config_path = sibling.string();
        }
        auto cfg = resolve_config(config_path, overrides);
        if (seed_override >= 0) cfg.set("train.seed", std::to_string(seed_override));
        if (const char* env = std::getenv("STEP_SEED")) cfg.set("train.seed", env);
        if (steps_override > 0) cfg.set("train.steps", std::to_string(steps_override));
        if (no_stats) cfg.set("model.use_stats_token", "0");
        if (fixed_patching) cfg.set("model.fixed_patching", "1");
        if (t_thres > 0) cfg.set("model.t_thres", std::to_string(t_thres));

        bool f64 = precision == "64";
        if (*dis) {
            prepare_out_dir(out_dir, force);
            record_run_config(cfg, out_dir);
            return f64 ? run_distill<double>(cfg, data_dir, spec_path, split_list(teachers_list),
                                            out_dir)
                       : run_distill<float>(cfg, data_dir, spec_path, split_list(teachers_list),
                                            out_dir);
        }
        if (*trn) {
            if (resume_state.empty())
                prepare_out_dir(out_dir, force);
            else
                fs::create_directories(out_dir);
            record_run_config(cfg, out_dir);
            return f64 ? run_train<double>(cfg, data_dir, out_dir, init_ckpt, resume_state)
                       : run_train<float>(cfg, data_dir, out_dir, init_ckpt, resume_state);
        }
        if (*ev)
            return f64 ? run_eval<double>(cfg, ckpt_path, data_dir, split, eval_out)
                       : run_eval<float>(cfg, ckpt_path, data_dir, split, eval_out);
    } catch (const step::NumericError& e) {
        std::cerr << "error code=" << kNumeric << " kind=numeric msg=\"" << e.what() << "\"\n";
        return kNumeric;
    } catch (const CLI::Error& e) {
        std::cerr << "error code=" << kUsage << " kind=usage msg=\"" << e.what() << "\"\n";
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error code=" << kData << " kind=data msg=\"" << e.what() << "\"\n";
        return kData;
    }
    return kUsage;
}
