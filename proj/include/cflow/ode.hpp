#pragma once

#include "cflow/nn.hpp"
#include "cflow/types.hpp"

#include <filesystem>
#include <vector>

namespace cflow {

enum class Method { euler, heun, rk45 };
enum class Direction { forward, inverse };

struct SolverConfig {
    Method method = Method::euler;
    int n_steps = 100;       // fixed-step methods
    Real rtol = 1e-5;        // rk45
    Real atol = 1e-5;        // rk45
    Direction direction = Direction::forward;
};

SolverConfig forward_of(SolverConfig cfg);
SolverConfig inverse_of(SolverConfig cfg);

// Time nodes, states and field velocities along one solve. Forward runs
// t 0 -> 1, inverse 1 -> 0; times are strictly monotone either way.
// nfe counts the velocity evaluations consumed by stepping, including
// rejected adaptive attempts; the last node's velocity is evaluated for
// the record when the method does not already provide it.
struct Trajectory {
    std::vector<Real> times;
    std::vector<Vec> states;
    std::vector<Vec> velocities;
    long nfe = 0;

    const Vec& endpoint() const { return states.back(); }
};

Trajectory integrate(const VelocityField& f, const Vec& z_start, const SolverConfig& cfg);

// Endpoint-only solve.
Vec transport(const VelocityField& f, const Vec& z, const SolverConfig& cfg, long* nfe = nullptr);

// Batched endpoint solve, column j of z is one sample. Fixed-step methods
// share the time grid across the batch; rk45 integrates per sample.
Mat transport(const VelocityField& f, const Mat& z, const SolverConfig& cfg, Real* nfe_mean = nullptr);

// Full node-major batch trajectory on the shared fixed-step grid
// (states[i], velocities[i] are d x B at node i). Fixed-step methods only.
struct BatchTrajectory {
    std::vector<Real> times;
    std::vector<Mat> states;
    std::vector<Mat> velocities;
};

BatchTrajectory integrate_batch(const VelocityField& f, const Mat& z, int n_steps,
                                Method method = Method::euler,
                                Direction direction = Direction::forward);

// Single Euler step from t = 0 over the whole unit interval: z0 + v(z0, 0).
Vec one_step_generate(const VelocityField& f, const Vec& z0);
Mat one_step_generate(const VelocityField& f, const Mat& z0);

// Invert x to noise, optionally nudge by eps * z, and transport back.
Vec reconstruct(const VelocityField& f, const Vec& x, const SolverConfig& cfg_inv,
                const SolverConfig& cfg_fwd);
Vec reconstruct_perturbed(const VelocityField& f, const Vec& x, Real eps, const Vec& z,
                          const SolverConfig& cfg_inv, const SolverConfig& cfg_fwd);

// CSV dump, header "t,x_1..x_d,v_1..v_d", one row per node.
void write_trajectory_csv(const std::filesystem::path& path, const Trajectory& traj);

}  // namespace cflow
