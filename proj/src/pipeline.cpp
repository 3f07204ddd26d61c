#include "cflow/pipeline.hpp"

#include "cflow/svg.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>

namespace cflow {

namespace {

// Evaluation round trips use the one-step map: recon gaps are a probe of
// one-step generation quality, not of solver accuracy.
SolverConfig one_step_inverse() {
    SolverConfig cfg;
    cfg.method = Method::euler;
    cfg.n_steps = 1;
    cfg.direction = Direction::inverse;
    return cfg;
}

SolverConfig one_step_forward() {
    SolverConfig cfg;
    cfg.method = Method::euler;
    cfg.n_steps = 1;
    cfg.direction = Direction::forward;
    return cfg;
}

Method fixed_method(const SolverConfig& cfg) {
    return cfg.method == Method::rk45 ? Method::heun : cfg.method;
}

std::vector<Real> subsample(const std::vector<Real>& v, std::size_t cap) {
    if (v.size() <= cap) return v;
    std::vector<Real> out;
    const std::size_t stride = (v.size() + cap - 1) / cap;
    for (std::size_t i = 0; i < v.size(); i += stride) out.push_back(v[i]);
    return out;
}

}  // namespace

std::uint64_t file_hash(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("manifest: cannot read " + path.string());
    std::uint64_t h = 0xcbf29ce484222325ull;
    char buf[4096];
    while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
        for (std::streamsize i = 0; i < is.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ull;
        }
    }
    return h;
}

Pipeline::Pipeline(ExperimentConfig cfg) : cfg_(std::move(cfg)), out_(cfg_.out_dir) {
    cfg_.validate();
    std::error_code ec;
    std::filesystem::create_directories(out_, ec);
    if (ec || !std::filesystem::is_directory(out_))
        throw ConfigError("pipeline: cannot create output directory " + out_.string());
}

std::uint64_t Pipeline::tag_seed(const std::string& tag) const {
    return derive_seed(cfg_.seed, tag);
}

std::filesystem::path Pipeline::artifact(const std::string& name) {
    const auto path = out_ / name;
    if (std::find(artifacts_.begin(), artifacts_.end(), path) == artifacts_.end())
        artifacts_.push_back(path);
    return path;
}

void Pipeline::log_line(const std::string& msg) const {
    if (!cfg_.quiet) std::cout << "[cflow] " << msg << std::endl;
}

template <typename Fn>
auto Pipeline::stage(const std::string& name, Fn&& fn) {
    log_line("stage " + name);
    const auto t0 = std::chrono::steady_clock::now();
    auto fail = [&](const std::string& what) {
        try {
            write_metrics_csv();
            write_manifest();
        } catch (...) {
        }
        return "stage " + name + ": " + what;
    };
    try {
        if constexpr (std::is_void_v<std::invoke_result_t<Fn>>) {
            fn();
            const auto dt = std::chrono::duration<Real>(std::chrono::steady_clock::now() - t0);
            log_line("stage " + name + " done in " + fmt_real(dt.count()) + " s");
        } else {
            auto result = fn();
            const auto dt = std::chrono::duration<Real>(std::chrono::steady_clock::now() - t0);
            log_line("stage " + name + " done in " + fmt_real(dt.count()) + " s");
            return result;
        }
    } catch (const ConfigError& e) {
        throw ConfigError(fail(e.what()));
    } catch (const NumericalError& e) {
        throw NumericalError(fail(e.what()));
    } catch (const std::exception& e) {
        throw std::runtime_error(fail(e.what()));
    }
}

void Pipeline::write_train_log(const std::string& name, const std::vector<TrainLogRow>& rows) {
    std::ofstream os(artifact(name));
    if (!os) throw ConfigError("pipeline: cannot write " + name);
    os << "step,phase,loss,zeta,lr,repairs_done\n";
    for (const auto& r : rows)
        os << r.step << ',' << to_string(r.phase) << ',' << fmt_real(r.loss) << ','
           << fmt_real(r.zeta) << ',' << fmt_real(r.lr) << ',' << r.repairs_done << '\n';
}

void Pipeline::save_field(const std::string& name, const VelocityField& f) {
    save_checkpoint(artifact(name), f);
}

VelocityField Pipeline::train_base() {
    return stage("train-base", [&] {
        auto init = VelocityField::random_init(cfg_.field, tag_seed("init"));
        TrainSettings s;
        s.steps = cfg_.base_steps;
        s.batch_size = cfg_.batch_size;
        s.lr = cfg_.lr;
        s.ema_decay = cfg_.ema_decay;
        s.time_dist = TimeDistribution::uniform();
        s.seed = tag_seed("train-base");
        std::vector<TrainLogRow> log;
        const auto source = Distribution::standard_gaussian(cfg_.target.dim);
        auto f = train_base_flow(std::move(init), source, cfg_.target, s, &log);
        write_train_log("train_log_k1.csv", log);
        save_field("flow_k1.ckpt", f);
        if (!log.empty()) {
            SvgSeries loss;
            for (const auto& r : log) loss.y.push_back(r.loss);
            loss.y = subsample(loss.y, 512);
            for (std::size_t i = 0; i < loss.y.size(); ++i)
                loss.x.push_back(static_cast<Real>(i));
            loss.label = "loss";
            write_line_svg(artifact("loss_k1.svg"), {loss}, "training loss, order 1");
        }
        return f;
    });
}

VelocityField Pipeline::reflow_round(const VelocityField& prev, int k) {
    return stage("reflow-k" + std::to_string(k), [&] {
        const auto source = Distribution::standard_gaussian(cfg_.target.dim);
        const auto fake = make_fake_pairs(prev, source, cfg_.n_fake,
                                          forward_of(cfg_.train_solver),
                                          tag_seed("fake-pairs-k" + std::to_string(k)), k - 1);
        save_pairs(artifact("pairs_fake_k" + std::to_string(k) + ".pairs"), fake);

        std::vector<TrainLogRow> log;
        VelocityField f;
        if (cfg_.procedure == "original") {
            TrainSettings s;
            s.steps = cfg_.reflow_steps;
            s.batch_size = cfg_.batch_size;
            s.lr = cfg_.lr;
            s.ema_decay = cfg_.ema_decay;
            s.time_dist = TimeDistribution::u_shaped_exponential(cfg_.time_dist_a);
            s.seed = tag_seed("reflow-train-k" + std::to_string(k));
            f = train_fake_reflow(prev, fake, s, &log);
        } else {
            BalancedConicTrainer::Settings s;
            s.plan.total_steps = cfg_.reflow_steps;
            s.plan.repair_interval = cfg_.repair_interval;
            s.plan.warmup_steps =
                static_cast<Index>(std::llround(cfg_.warmup_frac * static_cast<Real>(cfg_.reflow_steps)));
            s.plan.k_updates = cfg_.k_updates;
            s.plan.batch_size = cfg_.batch_size;
            s.zeta_grid = cfg_.zeta_grid.empty() ? default_zeta_grid() : cfg_.zeta_grid;
            s.zeta_search_samples = cfg_.zeta_search_samples;
            s.n_real_pairs = cfg_.n_real;
            s.w_t = cfg_.w_t;
            s.time_dist = TimeDistribution::u_shaped_exponential(cfg_.time_dist_a);
            s.solver = forward_of(cfg_.train_solver);
            s.lr = cfg_.lr;
            s.ema_decay = cfg_.ema_decay;
            BalancedConicTrainer trainer(prev, source, cfg_.target, fake, s,
                                         tag_seed("conic-train-k" + std::to_string(k)));
            f = trainer.run(&log);
        }
        write_train_log("train_log_k" + std::to_string(k) + ".csv", log);
        save_field("flow_k" + std::to_string(k) + ".ckpt", f);
        return f;
    });
}

MetricsReport Pipeline::evaluate(const VelocityField& f, int k) {
    return stage("eval-k" + std::to_string(k), [&] {
        const auto source = Distribution::standard_gaussian(cfg_.target.dim);
        const Mat z0_eval = sample(source, cfg_.metric_samples, tag_seed("eval-z0"));
        const Mat x_eval = sample(cfg_.target, cfg_.metric_samples, tag_seed("eval-x"));

        MetricsReport r;
        r.k = k;
        r.procedure = k == 1 ? "base" : cfg_.procedure;
        r.sample_count = cfg_.metric_samples;
        r.solver_method = cfg_.eval_solver.method;
        r.solver_steps = cfg_.eval_solver.n_steps;
        r.recon_epsilon = cfg_.recon_epsilon;

        const Method fm = fixed_method(cfg_.eval_solver);
        r.curvature = curvature(f, z0_eval, cfg_.curvature_nodes, fm);
        r.ivd = ivd(f, z0_eval, cfg_.curvature_nodes, 0.0, fm);

        Real nfe = 0;
        const Mat gen = transport(f, z0_eval, forward_of(cfg_.eval_solver), &nfe);
        r.nfe_mean = nfe;

        const auto inv1 = one_step_inverse();
        const auto fwd1 = one_step_forward();
        r.recon_real = recon_error(f, x_eval, ReconKind::plain, 0.0, inv1, fwd1, 0);
        r.recon_fake = recon_error(f, gen, ReconKind::plain, 0.0, inv1, fwd1, 0);
        r.precon_real = recon_error(f, x_eval, ReconKind::perturbed, cfg_.recon_epsilon, inv1,
                                    fwd1, tag_seed("precon-noise"));
        r.precon_fake = recon_error(f, gen, ReconKind::perturbed, cfg_.recon_epsilon, inv1, fwd1,
                                    tag_seed("precon-noise"));

        const auto real_fit = fit_gmm(x_eval, cfg_.gmm_components, cfg_.gmm_iters,
                                      tag_seed("gmm-real"));
        const auto fake_fit = fit_gmm(gen, cfg_.gmm_components, cfg_.gmm_iters,
                                      tag_seed("gmm-fake"));
        const auto kl = gmm_kl(fake_fit, real_fit, cfg_.kl_mc_samples, tag_seed("kl-mc"));
        r.kl_to_target = std::max<Real>(0.0, kl.value);

        std::ofstream os(artifact("metrics_k" + std::to_string(k) + ".txt"));
        os << metrics_text_block(r);
        metrics_.push_back(r);
        write_metrics_csv();
        return r;
    });
}

void Pipeline::scatter_artifact(const std::string& name, const Mat& generated, const Mat& target,
                                const std::string& title) {
    auto series_of = [](const Mat& m, const std::string& label) {
        SvgSeries s;
        s.label = label;
        const Index n = m.cols();
        s.x.reserve(static_cast<std::size_t>(n));
        s.y.reserve(static_cast<std::size_t>(n));
        for (Index j = 0; j < n; ++j) {
            s.x.push_back(m(0, j));
            s.y.push_back(m.rows() > 1 ? m(1, j) : 0.0);
        }
        return s;
    };
    write_scatter_svg(artifact(name), {series_of(target, "target"), series_of(generated, "generated")},
                      title);
}

void Pipeline::sample_artifacts(const VelocityField& f, int k) {
    stage("samples-k" + std::to_string(k), [&] {
        const auto source = Distribution::standard_gaussian(cfg_.target.dim);
        const Mat z0 = sample(source, cfg_.sample_count, tag_seed("sample-z0"));
        const Mat gen = transport(f, z0, forward_of(cfg_.eval_solver));
        const Mat x = sample(cfg_.target, cfg_.sample_count, tag_seed("sample-x"));

        std::ofstream os(artifact("samples_k" + std::to_string(k) + ".csv"));
        if (!os) throw ConfigError("pipeline: cannot write samples CSV");
        for (Index i = 0; i < gen.rows(); ++i) os << (i ? "," : "") << "x_" << (i + 1);
        os << '\n';
        for (Index j = 0; j < gen.cols(); ++j) {
            for (Index i = 0; i < gen.rows(); ++i) os << (i ? "," : "") << fmt_real(gen(i, j));
            os << '\n';
        }
        scatter_artifact("scatter_k" + std::to_string(k) + ".svg", gen, x,
                         "samples, order " + std::to_string(k));
    });
}

VelocityField Pipeline::distill_stage(const VelocityField& teacher, int k) {
    return stage("distill", [&] {
        const auto source = Distribution::standard_gaussian(cfg_.target.dim);
        const auto pairs = make_fake_pairs(teacher, source, cfg_.distill_pairs,
                                           forward_of(cfg_.train_solver),
                                           tag_seed("distill-pairs"), k);
        TrainSettings s;
        s.batch_size = cfg_.batch_size;
        s.lr = cfg_.lr;
        s.ema_decay = cfg_.ema_decay;
        s.seed = tag_seed("distill-train");
        std::vector<TrainLogRow> log;
        auto student = distill(teacher, pairs, cfg_.distill_epochs, s, &log);
        write_train_log("train_log_distill.csv", log);
        save_field("distill_k" + std::to_string(k) + ".ckpt", student);

        // One-step quality: distilled map vs the teacher's single Euler step.
        const Mat z0_eval = sample(source, cfg_.metric_samples, tag_seed("eval-z0"));
        const Mat x_eval = sample(cfg_.target, cfg_.metric_samples, tag_seed("eval-x"));
        const auto real_fit = fit_gmm(x_eval, cfg_.gmm_components, cfg_.gmm_iters,
                                      tag_seed("gmm-real"));
        const Mat student_gen = one_step_generate(student, z0_eval);
        const Mat teacher_gen = one_step_generate(teacher, z0_eval);
        const auto student_fit = fit_gmm(student_gen, cfg_.gmm_components, cfg_.gmm_iters,
                                         tag_seed("gmm-fake"));
        const auto teacher_fit = fit_gmm(teacher_gen, cfg_.gmm_components, cfg_.gmm_iters,
                                         tag_seed("gmm-fake"));
        const auto student_kl = gmm_kl(student_fit, real_fit, cfg_.kl_mc_samples, tag_seed("kl-mc"));
        const auto teacher_kl = gmm_kl(teacher_fit, real_fit, cfg_.kl_mc_samples, tag_seed("kl-mc"));

        std::ofstream os(artifact("distill_report.txt"));
        os << "teacher_k = " << k << '\n'
           << "teacher_one_step_kl = " << fmt_real(std::max<Real>(0.0, teacher_kl.value)) << '\n'
           << "distilled_one_step_kl = " << fmt_real(std::max<Real>(0.0, student_kl.value)) << '\n'
           << "distill_pairs = " << cfg_.distill_pairs << '\n'
           << "distill_epochs = " << cfg_.distill_epochs << '\n';
        scatter_artifact("scatter_distill.svg", student_gen, x_eval, "distilled one-step samples");
        return student;
    });
}

void Pipeline::run() {
    auto f = train_base();
    evaluate(f, 1);
    const int rounds = cfg_.reflow_steps == 0 ? 0 : cfg_.reflow_rounds;
    for (int r = 1; r <= rounds; ++r) {
        const int k = r + 1;
        f = reflow_round(f, k);
        evaluate(f, k);
    }
    sample_artifacts(f, rounds + 1);
    if (cfg_.run_distill) distill_stage(f, rounds + 1);
    write_metrics_csv();
    write_manifest();
}

void Pipeline::drift_demo() {
    const auto source = Distribution::standard_gaussian(cfg_.target.dim);
    const Mat z0_eval = sample(source, cfg_.metric_samples, tag_seed("eval-z0"));
    const Mat x_eval = sample(cfg_.target, cfg_.metric_samples, tag_seed("eval-x"));
    const auto real_fit = stage("drift-target-fit", [&] {
        return fit_gmm(x_eval, cfg_.gmm_components, cfg_.gmm_iters, tag_seed("gmm-real"));
    });

    std::vector<Real> kls;
    std::vector<Real> ks;
    auto record = [&](const VelocityField& f, int k) {
        stage("drift-eval-k" + std::to_string(k), [&] {
            const Mat gen = transport(f, z0_eval, forward_of(cfg_.eval_solver));
            const auto fit = fit_gmm(gen, cfg_.gmm_components, cfg_.gmm_iters, tag_seed("gmm-fake"));
            const auto kl = gmm_kl(fit, real_fit, cfg_.kl_mc_samples, tag_seed("kl-mc"));
            kls.push_back(std::max<Real>(0.0, kl.value));
            ks.push_back(static_cast<Real>(k));
            scatter_artifact("drift_scatter_k" + std::to_string(k) + ".svg", gen, x_eval,
                             "drift, order " + std::to_string(k));
            std::ofstream os(artifact("drift_kl.csv"));
            os << "k,kl\n";
            for (std::size_t i = 0; i < kls.size(); ++i)
                os << static_cast<int>(ks[i]) << ',' << fmt_real(kls[i]) << '\n';
        });
    };

    // Untrained reference, the same init the base training starts from.
    record(VelocityField::random_init(cfg_.field, tag_seed("init")), 0);

    auto f = stage("drift-train-base", [&] {
        TrainSettings s;
        s.steps = cfg_.base_steps;
        s.batch_size = cfg_.batch_size;
        s.lr = cfg_.lr;
        s.ema_decay = cfg_.ema_decay;
        s.time_dist = TimeDistribution::uniform();
        s.seed = tag_seed("train-base");
        std::vector<TrainLogRow> log;
        auto field = train_base_flow(VelocityField::random_init(cfg_.field, tag_seed("init")),
                                     source, cfg_.target, s, &log);
        write_train_log("drift_train_log_k1.csv", log);
        save_field("drift_flow_k1.ckpt", field);
        return field;
    });
    record(f, 1);

    for (int k = 2; k <= cfg_.drift_rounds; ++k) {
        f = stage("drift-reflow-k" + std::to_string(k), [&] {
            const auto fake = make_fake_pairs(f, source, cfg_.n_fake,
                                              forward_of(cfg_.train_solver),
                                              tag_seed("fake-pairs-k" + std::to_string(k)), k - 1);
            TrainSettings s;
            s.steps = cfg_.reflow_steps;
            s.batch_size = cfg_.batch_size;
            s.lr = cfg_.lr;
            s.ema_decay = cfg_.ema_decay;
            s.time_dist = TimeDistribution::u_shaped_exponential(cfg_.time_dist_a);
            s.seed = tag_seed("reflow-train-k" + std::to_string(k));
            std::vector<TrainLogRow> log;
            auto field = train_fake_reflow(f, fake, s, &log);
            write_train_log("drift_train_log_k" + std::to_string(k) + ".csv", log);
            save_field("drift_flow_k" + std::to_string(k) + ".ckpt", field);
            return field;
        });
        record(f, k);
    }

    SvgSeries line;
    line.x = ks;
    line.y = kls;
    line.label = "KL to target";
    write_line_svg(artifact("drift_kl.svg"), {line}, "distribution drift across orders");
    write_manifest();
}

void Pipeline::write_metrics_csv() {
    if (metrics_.empty()) return;
    std::ofstream os(artifact("metrics.csv"));
    if (!os) throw ConfigError("pipeline: cannot write metrics.csv");
    os << metrics_csv_header() << '\n';
    for (const auto& r : metrics_) os << metrics_csv_row(r) << '\n';
}

void Pipeline::write_manifest() {
    std::vector<std::filesystem::path> files = artifacts_;
    std::sort(files.begin(), files.end());
    std::ofstream os(out_ / "manifest.txt");
    if (!os) throw ConfigError("pipeline: cannot write manifest.txt");
    os << "name,bytes,fnv1a64\n";
    char hex[17];
    for (const auto& p : files) {
        if (!std::filesystem::exists(p)) continue;
        std::snprintf(hex, sizeof(hex), "%016llx",
                      static_cast<unsigned long long>(file_hash(p)));
        os << p.filename().string() << ',' << std::filesystem::file_size(p) << ',' << hex << '\n';
    }
}

void run_pipeline(const ExperimentConfig& cfg) {
    Pipeline p(cfg);
    p.run();
}

}  // namespace cflow
