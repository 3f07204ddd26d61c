#include "cflow/reflow.hpp"

#include <algorithm>
#include <cmath>

namespace cflow {

TimeDistribution TimeDistribution::uniform() { return TimeDistribution{Kind::uniform, 0.0}; }

TimeDistribution TimeDistribution::u_shaped_exponential(Real a) {
    if (!(a > 0)) throw ConfigError("time distribution: a must be positive");
    return TimeDistribution{Kind::u_shaped_exponential, a};
}

Real time_density(const TimeDistribution& dist, Real u) {
    if (u < 0.0 || u > 1.0) return 0.0;
    if (dist.kind == TimeDistribution::Kind::uniform) return 1.0;
    return dist.a * std::cosh(dist.a * u) / std::sinh(dist.a);
}

Real time_cdf(const TimeDistribution& dist, Real u) {
    if (u <= 0.0) return 0.0;
    if (u >= 1.0) return 1.0;
    if (dist.kind == TimeDistribution::Kind::uniform) return u;
    return std::sinh(dist.a * u) / std::sinh(dist.a);
}

Real sample_time(const TimeDistribution& dist, Rng& rng) {
    const Real u = rng.uniform();
    if (dist.kind == TimeDistribution::Kind::uniform) return u;
    return std::asinh(u * std::sinh(dist.a)) / dist.a;
}

Vec sample_times(const TimeDistribution& dist, Index n, Rng& rng) {
    Vec t(n);
    for (Index i = 0; i < n; ++i) t[i] = sample_time(dist, rng);
    return t;
}

Vec slerp(const Vec& v0, const Vec& v1, Real zeta) {
    if (!(zeta >= 0.0 && zeta <= 1.0)) throw ConfigError("slerp: zeta must lie in [0, 1]");
    if (v0.size() != v1.size()) throw ConfigError("slerp: dimension mismatch");
    const Real n0 = v0.norm();
    const Real n1 = v1.norm();
    if (n0 == 0.0 || n1 == 0.0) throw ConfigError("slerp: zero-norm input");
    Real dot = v0.dot(v1) / (n0 * n1);
    if (std::abs(dot) > kSlerpDotThreshold) return v0 + zeta * (v1 - v0);
    dot = std::clamp(dot, -1.0, 1.0);
    const Real theta = std::acos(dot);
    const Real s = std::sin(theta);
    return (std::sin((1.0 - zeta) * theta) / s) * v0 + (std::sin(zeta * theta) / s) * v1;
}

Vec conic_point(const Vec& x1, const Vec& z0r, const Vec& eps, Real zeta, Real t) {
    if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("conic_point: t must lie in [0, 1]");
    const Vec s = slerp(z0r, eps, zeta);
    return t * x1 + (1.0 - t) * s;
}

SlerpSchedule::SlerpSchedule(Real zeta_max, int k_updates)
    : zeta_max_(zeta_max), k_(k_updates), multiplier_(k_updates) {
    if (!(zeta_max > 0.0 && zeta_max <= 0.5))
        throw ConfigError("schedule: zeta_max must lie in (0, 0.5]");
    if (k_updates < 1) throw ConfigError("schedule: k_updates must be at least 1");
}

Real SlerpSchedule::shape(Real t_prime) {
    if (!(t_prime >= 0.0 && t_prime <= 1.0))
        throw ConfigError("schedule: phase position must lie in [0, 1]");
    return 2.0 * t_prime * t_prime / (1.0 + t_prime * t_prime);
}

Real SlerpSchedule::phase_max() const {
    return zeta_max_ * static_cast<Real>(multiplier_) / static_cast<Real>(k_);
}

void SlerpSchedule::advance_phase() {
    if (k_ == 1) return;
    multiplier_ += direction_;
    if (multiplier_ <= 1) {
        multiplier_ = 1;
        direction_ = 1;
    } else if (multiplier_ >= k_) {
        multiplier_ = k_;
        direction_ = -1;
    }
}

bool ReflowPlan::is_real_step(Index step) const {
    if (step < 1 || step > total_steps) return false;
    const Index first_half = (total_steps + 1) / 2;
    return step <= first_half && step % 2 == 1;
}

std::vector<Index> ReflowPlan::u_real() const {
    std::vector<Index> out;
    for (Index s = 1; s <= total_steps; ++s)
        if (is_real_step(s)) out.push_back(s);
    return out;
}

std::vector<Index> ReflowPlan::u_fake() const {
    std::vector<Index> out;
    for (Index s = 1; s <= total_steps; ++s)
        if (!is_real_step(s)) out.push_back(s);
    return out;
}

void ReflowPlan::validate() const {
    if (total_steps < 0) throw ConfigError("plan: total_steps must be non-negative");
    if (repair_interval < 0) throw ConfigError("plan: repair_interval must be non-negative");
    if (warmup_steps < 0) throw ConfigError("plan: warmup_steps must be non-negative");
    if (k_updates < 1) throw ConfigError("plan: k_updates must be at least 1");
    if (batch_size < 1) throw ConfigError("plan: batch_size must be positive");
}

namespace {

LossValue residual_loss(const VelocityField& f, const Mat& points, const Vec& t,
                        const Mat& target, Real weight) {
    ForwardTrace trace;
    const Mat v = forward(f, points, t, trace);
    const Mat r = target - v;
    LossValue out;
    const Real b = static_cast<Real>(points.cols());
    out.value = weight * r.squaredNorm() / b;
    if (!std::isfinite(out.value)) throw NumericalError("loss: non-finite value");
    const Mat upstream = (-2.0 * weight / b) * r;
    out.grad = backward(f, trace, upstream);
    return out;
}

}  // namespace

LossValue base_flow_loss(const VelocityField& f, const Mat& x0, const Mat& x1, const Vec& t) {
    if (x0.rows() != x1.rows() || x0.cols() != x1.cols())
        throw ConfigError("loss: endpoint batches disagree");
    if (t.size() != x0.cols()) throw ConfigError("loss: t does not match batch");
    if (x0.cols() < 1) throw ConfigError("loss: empty batch");
    const Mat points = x0 + (x1 - x0) * t.asDiagonal();
    return residual_loss(f, points, t, x1 - x0, 1.0);
}

LossValue fake_reflow_loss(const VelocityField& f, const PairSet& fake, const Vec& t) {
    if (fake.provenance != Provenance::fake)
        throw ConfigError("loss: fake_reflow_loss needs fake pairs");
    return base_flow_loss(f, fake.z0, fake.z1, t);
}

LossValue conic_loss(const VelocityField& f, const PairSet& real, const Mat& eps, Real zeta,
                     const Vec& t, Real w_t) {
    if (real.provenance != Provenance::real) throw ConfigError("loss: conic_loss needs real pairs");
    if (eps.rows() != real.dim() || eps.cols() != real.count())
        throw ConfigError("loss: eps does not match pair batch");
    if (t.size() != real.count()) throw ConfigError("loss: t does not match batch");
    if (real.count() < 1) throw ConfigError("loss: empty batch");
    if (!(w_t > 0)) throw ConfigError("loss: w_t must be positive");

    Mat s(real.dim(), real.count());
    for (Index j = 0; j < real.count(); ++j)
        s.col(j) = slerp(Vec(real.z0.col(j)), Vec(eps.col(j)), zeta);
    const Mat points = s + (real.z1 - s) * t.asDiagonal();
    return residual_loss(f, points, t, real.z1 - s, w_t);
}

std::vector<Real> default_zeta_grid(int points, Real cap) {
    if (points < 1) throw ConfigError("zeta grid: need at least one point");
    if (!(cap > 0.0 && cap <= 0.5)) throw ConfigError("zeta grid: cap must lie in (0, 0.5]");
    std::vector<Real> grid(static_cast<std::size_t>(points));
    for (int i = 0; i < points; ++i)
        grid[static_cast<std::size_t>(i)] = cap * static_cast<Real>(i + 1) / static_cast<Real>(points);
    return grid;
}

Real find_zeta_max(const VelocityField& f, const Mat& real_samples, const Mat& fake_samples,
                   const std::vector<Real>& grid, const SolverConfig& solver,
                   std::uint64_t eps_seed) {
    if (real_samples.cols() < 1 || fake_samples.cols() < 1)
        throw ConfigError("zeta search: sample sets must be non-empty");
    if (real_samples.cols() != fake_samples.cols() || real_samples.rows() != fake_samples.rows())
        throw ConfigError("zeta search: sample sets must have matching shape");
    if (grid.empty()) throw ConfigError("zeta search: empty grid");
    for (Real z : grid)
        if (!(z > 0.0 && z <= 0.5)) throw ConfigError("zeta search: grid values must lie in (0, 0.5]");

    std::vector<Real> zetas = grid;
    std::sort(zetas.begin(), zetas.end());

    const Index n = real_samples.cols();
    const Index d = real_samples.rows();
    const Mat z0_real = transport(f, real_samples, inverse_of(solver));
    const Mat z0_fake = transport(f, fake_samples, inverse_of(solver));
    const Mat eps = Rng(eps_seed).normal_mat(d, n);

    Real best_zeta = zetas.front();
    Real best_obj = -std::numeric_limits<Real>::infinity();
    for (Real zeta : zetas) {
        Mat sr(d, n), sf(d, n);
        for (Index j = 0; j < n; ++j) {
            sr.col(j) = slerp(Vec(z0_real.col(j)), Vec(eps.col(j)), zeta);
            sf.col(j) = slerp(Vec(z0_fake.col(j)), Vec(eps.col(j)), zeta);
        }
        const Mat gen_real = transport(f, sr, forward_of(solver));
        const Mat gen_fake = transport(f, sf, forward_of(solver));
        Real obj = 0;
        for (Index j = 0; j < n; ++j)
            obj += (gen_real.col(j) - real_samples.col(j)).norm() -
                   (gen_fake.col(j) - fake_samples.col(j)).norm();
        obj /= static_cast<Real>(n);
        if (obj > best_obj) {
            best_obj = obj;
            best_zeta = zeta;
        }
    }
    return best_zeta;
}

namespace {

std::vector<Index> draw_indices(Rng& rng, Index pool, Index count) {
    std::vector<Index> idx(static_cast<std::size_t>(count));
    for (Index i = 0; i < count; ++i) idx[static_cast<std::size_t>(i)] = rng.uniform_index(pool);
    return idx;
}

Mat gather_cols(const Mat& m, const std::vector<Index>& idx) {
    Mat out(m.rows(), static_cast<Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) out.col(static_cast<Index>(i)) = m.col(idx[i]);
    return out;
}

void validate_train_settings(const TrainSettings& s) {
    if (s.steps < 0) throw ConfigError("train: steps must be non-negative");
    if (s.batch_size < 1) throw ConfigError("train: batch_size must be positive");
    if (!(s.lr > 0)) throw ConfigError("train: lr must be positive");
}

}  // namespace

VelocityField train_base_flow(VelocityField f, const Distribution& source,
                              const Distribution& target, const TrainSettings& s,
                              std::vector<TrainLogRow>* log) {
    validate_train_settings(s);
    if (source.dim != f.input_dim() || target.dim != f.input_dim())
        throw ConfigError("train: distribution dims do not match field");
    Rng rng(s.seed);
    OptimState optim;
    optim.lr = s.lr;
    Vec params = f.params_flat();
    EmaShadow ema(params, s.ema_decay);
    for (Index step = 1; step <= s.steps; ++step) {
        const Mat x0 = sample(source, s.batch_size, rng.next_u64());
        const Mat x1 = sample(target, s.batch_size, rng.next_u64());
        const Vec t = sample_times(s.time_dist, s.batch_size, rng);
        const LossValue lv = base_flow_loss(f, x0, x1, t);
        adam_step(params, lv.grad, optim);
        f.set_params_flat(params);
        ema.update(params);
        if (log) log->push_back({step, Provenance::real, lv.value, 0.0, optim.lr, 0});
    }
    f.set_params_flat(ema.shadow());
    return f;
}

VelocityField train_fake_reflow(VelocityField f, const PairSet& fake, const TrainSettings& s,
                                std::vector<TrainLogRow>* log) {
    validate_train_settings(s);
    if (fake.provenance != Provenance::fake) throw ConfigError("train: reflow needs fake pairs");
    if (fake.count() < 1) throw ConfigError("train: empty pair set");
    Rng rng(s.seed);
    OptimState optim;
    optim.lr = s.lr;
    Vec params = f.params_flat();
    EmaShadow ema(params, s.ema_decay);
    for (Index step = 1; step <= s.steps; ++step) {
        const auto idx = draw_indices(rng, fake.count(), s.batch_size);
        const Mat x0 = gather_cols(fake.z0, idx);
        const Mat x1 = gather_cols(fake.z1, idx);
        const Vec t = sample_times(s.time_dist, s.batch_size, rng);
        const LossValue lv = base_flow_loss(f, x0, x1, t);
        adam_step(params, lv.grad, optim);
        f.set_params_flat(params);
        ema.update(params);
        if (log) log->push_back({step, Provenance::fake, lv.value, 0.0, optim.lr, 0});
    }
    f.set_params_flat(ema.shadow());
    return f;
}

VelocityField distill(const VelocityField& teacher, const PairSet& pairs, int epochs,
                      const TrainSettings& s, std::vector<TrainLogRow>* log) {
    if (pairs.count() < 1) throw ConfigError("distill: empty pair set");
    if (epochs < 1) throw ConfigError("distill: epochs must be positive");
    if (s.batch_size < 1) throw ConfigError("distill: batch_size must be positive");

    VelocityField g = teacher;
    Rng rng(s.seed);
    OptimState optim;
    optim.lr = s.lr;
    Vec params = g.params_flat();
    EmaShadow ema(params, s.ema_decay);

    std::vector<Index> perm(static_cast<std::size_t>(pairs.count()));
    for (Index i = 0; i < pairs.count(); ++i) perm[static_cast<std::size_t>(i)] = i;

    Index step = 0;
    const Vec t0 = Vec::Zero(std::min<Index>(s.batch_size, pairs.count()));
    for (int e = 0; e < epochs; ++e) {
        for (Index i = pairs.count() - 1; i > 0; --i)
            std::swap(perm[static_cast<std::size_t>(i)],
                      perm[static_cast<std::size_t>(rng.uniform_index(i + 1))]);
        for (Index at = 0; at < pairs.count(); at += s.batch_size) {
            const Index b = std::min<Index>(s.batch_size, pairs.count() - at);
            std::vector<Index> idx(perm.begin() + at, perm.begin() + at + b);
            const Mat x0 = gather_cols(pairs.z0, idx);
            const Mat x1 = gather_cols(pairs.z1, idx);
            const LossValue lv = base_flow_loss(g, x0, x1, t0.head(b));
            adam_step(params, lv.grad, optim);
            g.set_params_flat(params);
            ema.update(params);
            ++step;
            if (log) log->push_back({step, pairs.provenance, lv.value, 0.0, optim.lr, 0});
        }
    }
    g.set_params_flat(ema.shadow());
    return g;
}

BalancedConicTrainer::BalancedConicTrainer(VelocityField field, Distribution source,
                                           Distribution target, PairSet fake_pairs,
                                           Settings settings, std::uint64_t seed)
    : field_(std::move(field)),
      source_(std::move(source)),
      target_(std::move(target)),
      fake_pairs_(std::move(fake_pairs)),
      settings_(std::move(settings)),
      rng_(seed) {
    settings_.plan.validate();
    if (fake_pairs_.provenance != Provenance::fake)
        throw ConfigError("trainer: fake pair buffer must have fake provenance");
    if (fake_pairs_.count() < 1) throw ConfigError("trainer: empty fake pair buffer");
    if (settings_.n_real_pairs < 1) throw ConfigError("trainer: n_real_pairs must be positive");
    if (settings_.zeta_grid.empty()) throw ConfigError("trainer: empty zeta grid");
    if (!(settings_.lr > 0)) throw ConfigError("trainer: lr must be positive");
    if (source_.dim != field_.input_dim() || target_.dim != field_.input_dim())
        throw ConfigError("trainer: distribution dims do not match field");

    optim_.lr = settings_.lr;
    params_ = field_.params_flat();
    ema_.emplace(params_, settings_.ema_decay);
    refresh_real_pairs();
    maybe_search_zeta_max(0);
}

void BalancedConicTrainer::refresh_real_pairs() {
    real_pairs_ = make_real_pairs(field_, target_, settings_.n_real_pairs, settings_.solver,
                                  rng_.next_u64(), fake_pairs_.order_k);
}

void BalancedConicTrainer::maybe_search_zeta_max(Index completed_step) {
    if (zeta_max_ || completed_step != settings_.plan.warmup_steps) return;
    const Index m = settings_.zeta_search_samples;
    const Mat real_x = sample(target_, m, rng_.next_u64());
    const Mat noise = sample(source_, m, rng_.next_u64());
    const Mat fake_z = transport(field_, noise, forward_of(settings_.solver));
    zeta_max_ = find_zeta_max(field_, real_x, fake_z, settings_.zeta_grid, settings_.solver,
                              rng_.next_u64());
    schedule_.emplace(*zeta_max_, settings_.plan.k_updates);
}

StepReport BalancedConicTrainer::step() {
    if (done()) throw ConfigError("trainer: plan already exhausted");
    const ReflowPlan& plan = settings_.plan;
    const Index s = next_step_;

    StepReport rep;
    rep.step = s;

    if (plan.repair_interval > 0 && since_repair_ >= plan.repair_interval) {
        refresh_real_pairs();
        if (schedule_) schedule_->advance_phase();
        since_repair_ = 0;
        repairs_done_ += 1;
        rep.repaired = true;
    }

    const bool real_phase = plan.is_real_step(s);
    Real zeta = 0.0;
    if (real_phase && schedule_) {
        Real t_prime;
        if (plan.repair_interval > 0)
            t_prime = 1.0 - static_cast<Real>(since_repair_) / static_cast<Real>(plan.repair_interval);
        else
            t_prime = 1.0 - static_cast<Real>(s - 1) / static_cast<Real>(plan.total_steps);
        zeta = schedule_->value(std::clamp(t_prime, 0.0, 1.0));
    }

    const Index b = plan.batch_size;
    LossValue lv;
    if (real_phase) {
        const auto idx = draw_indices(rng_, real_pairs_.count(), b);
        PairSet batch;
        batch.provenance = Provenance::real;
        batch.order_k = real_pairs_.order_k;
        batch.z0 = gather_cols(real_pairs_.z0, idx);
        batch.z1 = gather_cols(real_pairs_.z1, idx);
        const Mat eps = rng_.normal_mat(batch.dim(), b);
        const Vec t = sample_times(settings_.time_dist, b, rng_);
        lv = conic_loss(field_, batch, eps, zeta, t, settings_.w_t);
    } else {
        const auto idx = draw_indices(rng_, fake_pairs_.count(), b);
        PairSet batch;
        batch.provenance = Provenance::fake;
        batch.order_k = fake_pairs_.order_k;
        batch.z0 = gather_cols(fake_pairs_.z0, idx);
        batch.z1 = gather_cols(fake_pairs_.z1, idx);
        const Vec t = sample_times(settings_.time_dist, b, rng_);
        lv = fake_reflow_loss(field_, batch, t);
    }

    adam_step(params_, lv.grad, optim_);
    field_.set_params_flat(params_);
    ema_->update(params_);

    since_repair_ += 1;
    maybe_search_zeta_max(s);
    next_step_ += 1;

    rep.phase = real_phase ? Provenance::real : Provenance::fake;
    rep.loss = lv.value;
    rep.zeta = zeta;
    rep.repairs_done = repairs_done_;
    return rep;
}

VelocityField BalancedConicTrainer::run(std::vector<TrainLogRow>* log) {
    while (!done()) {
        const StepReport rep = step();
        if (log)
            log->push_back({rep.step, rep.phase, rep.loss, rep.zeta, optim_.lr, rep.repairs_done});
    }
    return ema_field();
}

VelocityField BalancedConicTrainer::ema_field() const {
    VelocityField f = field_;
    f.set_params_flat(ema_->shadow());
    return f;
}

}  // namespace cflow
