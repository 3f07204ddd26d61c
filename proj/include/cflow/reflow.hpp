#pragma once

#include "cflow/dataset.hpp"
#include "cflow/nn.hpp"
#include "cflow/ode.hpp"
#include "cflow/rng.hpp"
#include "cflow/types.hpp"

#include <optional>
#include <vector>

namespace cflow {

// Distribution of the interpolation time t used by the flow objectives.
// The exponential kind has density p(u) proportional to exp(a u) + exp(-a u)
// on [0, 1]; its CDF sinh(a u)/sinh(a) inverts in closed form.
struct TimeDistribution {
    enum class Kind { uniform, u_shaped_exponential };
    Kind kind = Kind::uniform;
    Real a = 3.0;

    static TimeDistribution uniform();
    static TimeDistribution u_shaped_exponential(Real a);
};

Real time_density(const TimeDistribution& dist, Real u);  // normalized pdf
Real time_cdf(const TimeDistribution& dist, Real u);
Real sample_time(const TimeDistribution& dist, Rng& rng);
Vec sample_times(const TimeDistribution& dist, Index n, Rng& rng);

// Spherical interpolation between v0 (zeta = 0) and v1 (zeta = 1). The angle
// comes from normalized copies; the sine coefficients are applied to the
// unnormalized inputs. Falls back to linear interpolation when the inputs are
// nearly (anti)parallel, |cos angle| > 0.9995.
inline constexpr Real kSlerpDotThreshold = 0.9995;
Vec slerp(const Vec& v0, const Vec& v1, Real zeta);

// Interpolant between a data point and the slerp-perturbed inverse noise:
// t x1 + (1 - t) slerp(z0r, eps, zeta).
Vec conic_point(const Vec& x1, const Vec& z0r, const Vec& eps, Real zeta, Real t);

// Noise magnitude schedule for conic training. Within one phase the value
// ramps as shape(t') = 2 t'^2 / (1 + t'^2), where t' = 1 at the start of the
// phase and 0 at the end. The per-phase ceiling zigzags over
// zeta_max * [K, K-1, ..., 1, 2, ..., K] / K, one advance per re-pairing.
class SlerpSchedule {
public:
    SlerpSchedule(Real zeta_max, int k_updates);

    static Real shape(Real t_prime);
    Real value(Real t_prime) const { return phase_max() * shape(t_prime); }
    Real phase_max() const;
    int phase_multiplier() const { return multiplier_; }
    void advance_phase();

    Real zeta_max() const { return zeta_max_; }
    int k_updates() const { return k_; }

private:
    Real zeta_max_;
    int k_;
    int multiplier_;
    int direction_ = -1;
};

// Which loss each 1-based step index of a reflow run trains on: the first
// ceil(N/2) steps alternate real/fake starting with real at index 1, the
// rest are fake only.
struct ReflowPlan {
    Index total_steps = 0;     // N
    Index repair_interval = 0; // steps between real-pair refreshes, 0 = never
    Index warmup_steps = 0;    // zeta-max search runs after this step
    int k_updates = 4;
    Index batch_size = 256;

    bool is_real_step(Index step) const;
    std::vector<Index> u_real() const;
    std::vector<Index> u_fake() const;
    void validate() const;
};

struct LossValue {
    Real value = 0;
    Vec grad;  // flattened, same layout as VelocityField::params_flat
};

// Mean squared residual between pair displacement and predicted velocity at
// the straight-line interpolant: E || x1 - x0 - v(t x1 + (1-t) x0, t) ||^2.
LossValue base_flow_loss(const VelocityField& f, const Mat& x0, const Mat& x1, const Vec& t);

// Same objective on fake transport pairs.
LossValue fake_reflow_loss(const VelocityField& f, const PairSet& fake, const Vec& t);

// Conic objective on real pairs: the slerp-perturbed noise replaces z0 in
// both the target displacement and the interpolation point,
// w_t * E || x1 - slerp(z0r, eps, zeta) - v(conic_point, t) ||^2.
LossValue conic_loss(const VelocityField& f, const PairSet& real, const Mat& eps, Real zeta,
                     const Vec& t, Real w_t);

// Largest useful noise scale: the grid zeta maximizing the gap between the
// perturbed reconstruction error of real samples and of the field's own
// samples. Shared per-index eps draws, ties resolved toward the smaller zeta.
Real find_zeta_max(const VelocityField& f, const Mat& real_samples, const Mat& fake_samples,
                   const std::vector<Real>& grid, const SolverConfig& solver,
                   std::uint64_t eps_seed);

std::vector<Real> default_zeta_grid(int points = 10, Real cap = 0.5);

struct TrainLogRow {
    Index step = 0;
    Provenance phase = Provenance::fake;
    Real loss = 0;
    Real zeta = 0;
    Real lr = 0;
    Index repairs_done = 0;
};

struct TrainSettings {
    Index steps = 4000;
    Index batch_size = 256;
    Real lr = 1e-3;
    Real ema_decay = 0.999;
    TimeDistribution time_dist;
    std::uint64_t seed = 1;
};

// Independent-coupling flow training with fresh draws every step. Returns
// the EMA-smoothed field.
VelocityField train_base_flow(VelocityField f, const Distribution& source,
                              const Distribution& target, const TrainSettings& s,
                              std::vector<TrainLogRow>* log = nullptr);

// Plain reflow: minibatches of a fixed fake pair set.
VelocityField train_fake_reflow(VelocityField f, const PairSet& fake, const TrainSettings& s,
                                std::vector<TrainLogRow>* log = nullptr);

// One-step map fitted to transport pairs: minimizes E || z1 - (z0 + g(z0, 0)) ||^2
// starting from a copy of the teacher. Returns the EMA-smoothed map.
VelocityField distill(const VelocityField& teacher, const PairSet& pairs, int epochs,
                      const TrainSettings& s, std::vector<TrainLogRow>* log = nullptr);

struct StepReport {
    Index step = 0;
    Provenance phase = Provenance::fake;
    Real loss = 0;
    Real zeta = 0;
    bool repaired = false;
    Index repairs_done = 0;
};

// Balanced conic reflow. Alternates the conic loss on real pairs with the
// plain reflow loss on fake pairs per the plan, refreshes real pairs every
// repair_interval steps with the current field (advancing the schedule
// phase), and runs the zeta-max search once warm-up completes.
class BalancedConicTrainer {
public:
    struct Settings {
        ReflowPlan plan;
        std::vector<Real> zeta_grid = default_zeta_grid();
        Index zeta_search_samples = 1000;
        Index n_real_pairs = 1000;
        Real w_t = 1.0;
        TimeDistribution time_dist = TimeDistribution::u_shaped_exponential(3.0);
        SolverConfig solver;  // training-time transports
        Real lr = 1e-3;
        Real ema_decay = 0.999;
    };

    BalancedConicTrainer(VelocityField field, Distribution source, Distribution target,
                         PairSet fake_pairs, Settings settings, std::uint64_t seed);

    bool done() const { return next_step_ > settings_.plan.total_steps; }
    StepReport step();
    VelocityField run(std::vector<TrainLogRow>* log = nullptr);  // all remaining steps, EMA field

    const VelocityField& raw_field() const { return field_; }
    VelocityField ema_field() const;
    const PairSet& real_pairs() const { return real_pairs_; }
    Real zeta_max() const { return zeta_max_ ? *zeta_max_ : 0.0; }
    const std::optional<SlerpSchedule>& schedule() const { return schedule_; }
    Index repairs_done() const { return repairs_done_; }

private:
    void refresh_real_pairs();
    void maybe_search_zeta_max(Index completed_step);

    VelocityField field_;
    Distribution source_;
    Distribution target_;
    PairSet fake_pairs_;
    PairSet real_pairs_;
    Settings settings_;
    Rng rng_;
    OptimState optim_;
    Vec params_;
    std::optional<EmaShadow> ema_;
    std::optional<SlerpSchedule> schedule_;
    std::optional<Real> zeta_max_;
    Index next_step_ = 1;
    Index since_repair_ = 0;
    Index repairs_done_ = 0;
};

}  // namespace cflow
