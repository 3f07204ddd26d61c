#include "cflow/ode.hpp"

#include "cflow/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace cflow {

namespace {

constexpr Real kMinStep = 1e-12;
constexpr Real kInitialStep = 1e-3;
constexpr Real kSafety = 0.9;
constexpr Real kShrinkLimit = 0.2;
constexpr Real kGrowthLimit = 10.0;
constexpr long kMaxAttempts = 2'000'000;

// Dormand-Prince 5(4) tableau.
constexpr Real a21 = 1.0 / 5;
constexpr Real a31 = 3.0 / 40, a32 = 9.0 / 40;
constexpr Real a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
constexpr Real a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
               a54 = -212.0 / 729;
constexpr Real a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
               a65 = -5103.0 / 18656;
constexpr Real b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784,
               b6 = 11.0 / 84;
constexpr Real c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
// 5th-order minus 4th-order weights, applied to stages k1..k7.
constexpr Real e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
               e6 = 22.0 / 525, e7 = -1.0 / 40;

void endpoints(Direction dir, Real& t0, Real& t1) {
    if (dir == Direction::forward) {
        t0 = 0.0;
        t1 = 1.0;
    } else {
        t0 = 1.0;
        t1 = 0.0;
    }
}

Real error_norm(const Vec& err, const Vec& y0, const Vec& y1, Real rtol, Real atol) {
    Real acc = 0.0;
    for (Index i = 0; i < err.size(); ++i) {
        const Real scale = atol + rtol * std::max(std::abs(y0[i]), std::abs(y1[i]));
        const Real r = err[i] / scale;
        acc += r * r;
    }
    return std::sqrt(acc / static_cast<Real>(err.size()));
}

Trajectory integrate_fixed(const VelocityField& f, const Vec& z_start, const SolverConfig& cfg) {
    if (cfg.n_steps < 1) throw ConfigError("solver: n_steps must be positive");
    Real t0, t1;
    endpoints(cfg.direction, t0, t1);
    const int n = cfg.n_steps;

    Trajectory traj;
    traj.times.resize(static_cast<std::size_t>(n) + 1);
    traj.states.resize(static_cast<std::size_t>(n) + 1);
    traj.velocities.resize(static_cast<std::size_t>(n) + 1);
    for (int i = 0; i <= n; ++i)
        traj.times[static_cast<std::size_t>(i)] =
            t0 + (t1 - t0) * static_cast<Real>(i) / static_cast<Real>(n);
    traj.times.back() = t1;

    Vec z = z_start;
    for (int i = 0; i < n; ++i) {
        const Real t = traj.times[static_cast<std::size_t>(i)];
        const Real h = traj.times[static_cast<std::size_t>(i) + 1] - t;
        Vec v1 = forward(f, z, t);
        traj.states[static_cast<std::size_t>(i)] = z;
        traj.velocities[static_cast<std::size_t>(i)] = v1;
        if (cfg.method == Method::euler) {
            z += h * v1;
            traj.nfe += 1;
        } else {  // heun
            Vec zp = z + h * v1;
            Vec v2 = forward(f, zp, t + h);
            z += (h / 2.0) * (v1 + v2);
            traj.nfe += 2;
        }
    }
    traj.states.back() = z;
    traj.velocities.back() = forward(f, z, t1);  // record only, not counted in nfe
    return traj;
}

Trajectory integrate_rk45(const VelocityField& f, const Vec& z_start, const SolverConfig& cfg) {
    Real t0, t1;
    endpoints(cfg.direction, t0, t1);
    const Real dir = t1 > t0 ? 1.0 : -1.0;

    Trajectory traj;
    Real t = t0;
    Vec y = z_start;
    Vec k1 = forward(f, y, t);
    traj.nfe = 1;
    traj.times.push_back(t);
    traj.states.push_back(y);
    traj.velocities.push_back(k1);

    Real h = dir * kInitialStep;
    Real facold = 1e-4;
    long attempts = 0;

    while (dir * (t1 - t) > 0.0) {
        if (std::abs(h) > std::abs(t1 - t)) h = t1 - t;
        if (std::abs(h) < kMinStep)
            throw NumericalError("solver: adaptive step size underflow at t = " + std::to_string(t));
        if (++attempts > kMaxAttempts)
            throw NumericalError("solver: adaptive step budget exhausted");

        const Vec k2 = forward(f, y + h * (a21 * k1), t + c2 * h);
        const Vec k3 = forward(f, y + h * (a31 * k1 + a32 * k2), t + c3 * h);
        const Vec k4 = forward(f, y + h * (a41 * k1 + a42 * k2 + a43 * k3), t + c4 * h);
        const Vec k5 = forward(f, y + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4), t + c5 * h);
        const Vec k6 =
            forward(f, y + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5), t + h);
        const Vec y_new = y + h * (b1 * k1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6);
        const Vec k7 = forward(f, y_new, t + h);
        traj.nfe += 6;

        const Vec err_vec =
            h * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);
        const Real err = error_norm(err_vec, y, y_new, cfg.rtol, cfg.atol);

        if (!std::isfinite(err)) {  // hard reject, the state went non-finite
            h *= kShrinkLimit;
            continue;
        }
        if (err <= 1.0) {
            t = (std::abs(t1 - (t + h)) < kMinStep) ? t1 : t + h;
            y = y_new;
            k1 = k7;  // first-same-as-last
            traj.times.push_back(t);
            traj.states.push_back(y);
            traj.velocities.push_back(k1);
            Real fac;
            if (err == 0.0) {
                fac = kGrowthLimit;
            } else {
                fac = kSafety * std::pow(err, -0.17) * std::pow(facold, 0.04);
                fac = std::clamp(fac, kShrinkLimit, kGrowthLimit);
            }
            facold = std::max(err, 1e-4);
            h *= fac;
        } else {
            h *= std::clamp(kSafety * std::pow(err, -0.2), kShrinkLimit, 1.0);
        }
    }
    return traj;
}

}  // namespace

SolverConfig forward_of(SolverConfig cfg) {
    cfg.direction = Direction::forward;
    return cfg;
}

SolverConfig inverse_of(SolverConfig cfg) {
    cfg.direction = Direction::inverse;
    return cfg;
}

Trajectory integrate(const VelocityField& f, const Vec& z_start, const SolverConfig& cfg) {
    if (z_start.size() != f.input_dim()) throw ConfigError("solver: state does not match input_dim");
    if (cfg.method == Method::rk45) return integrate_rk45(f, z_start, cfg);
    return integrate_fixed(f, z_start, cfg);
}

Vec transport(const VelocityField& f, const Vec& z, const SolverConfig& cfg, long* nfe) {
    // Endpoint-only fixed-step path avoids storing the trajectory.
    if (cfg.method == Method::rk45) {
        Trajectory traj = integrate(f, z, cfg);
        if (nfe) *nfe = traj.nfe;
        return traj.endpoint();
    }
    Real t0, t1;
    endpoints(cfg.direction, t0, t1);
    const int n = cfg.n_steps;
    if (n < 1) throw ConfigError("solver: n_steps must be positive");
    Vec y = z;
    long evals = 0;
    for (int i = 0; i < n; ++i) {
        const Real ta = t0 + (t1 - t0) * static_cast<Real>(i) / static_cast<Real>(n);
        const Real tb = (i + 1 == n) ? t1 : t0 + (t1 - t0) * static_cast<Real>(i + 1) / static_cast<Real>(n);
        const Real h = tb - ta;
        Vec v1 = forward(f, y, ta);
        if (cfg.method == Method::euler) {
            y += h * v1;
            evals += 1;
        } else {
            Vec v2 = forward(f, y + h * v1, tb);
            y += (h / 2.0) * (v1 + v2);
            evals += 2;
        }
    }
    if (nfe) *nfe = evals;
    return y;
}

Mat transport(const VelocityField& f, const Mat& z, const SolverConfig& cfg, Real* nfe_mean) {
    if (z.rows() != f.input_dim()) throw ConfigError("solver: state does not match input_dim");
    const Index b = z.cols();
    if (cfg.method == Method::rk45) {
        Mat out(z.rows(), b);
        std::vector<long> nfes(static_cast<std::size_t>(b), 0);
        std::vector<std::string> failures(static_cast<std::size_t>(b));
        parallel_for(b, [&](std::ptrdiff_t j) {
            try {
                out.col(j) = transport(f, Vec(z.col(j)), cfg, &nfes[static_cast<std::size_t>(j)]);
            } catch (const std::exception& e) {
                failures[static_cast<std::size_t>(j)] = e.what();
            }
        });
        for (Index j = 0; j < b; ++j)
            if (!failures[static_cast<std::size_t>(j)].empty())
                throw NumericalError("transport: sample " + std::to_string(j) + ": " +
                                     failures[static_cast<std::size_t>(j)]);
        if (nfe_mean) {
            Real acc = 0;
            for (long v : nfes) acc += static_cast<Real>(v);
            *nfe_mean = b > 0 ? acc / static_cast<Real>(b) : 0.0;
        }
        return out;
    }

    Real t0, t1;
    endpoints(cfg.direction, t0, t1);
    const int n = cfg.n_steps;
    if (n < 1) throw ConfigError("solver: n_steps must be positive");
    Mat y = z;
    long evals = 0;
    for (int i = 0; i < n; ++i) {
        const Real ta = t0 + (t1 - t0) * static_cast<Real>(i) / static_cast<Real>(n);
        const Real tb = (i + 1 == n) ? t1 : t0 + (t1 - t0) * static_cast<Real>(i + 1) / static_cast<Real>(n);
        const Real h = tb - ta;
        Mat v1 = forward(f, y, Vec::Constant(b, ta));
        if (cfg.method == Method::euler) {
            y += h * v1;
            evals += 1;
        } else {
            Mat v2 = forward(f, y + h * v1, Vec::Constant(b, tb));
            y += (h / 2.0) * (v1 + v2);
            evals += 2;
        }
    }
    if (nfe_mean) *nfe_mean = static_cast<Real>(evals);
    return y;
}

BatchTrajectory integrate_batch(const VelocityField& f, const Mat& z, int n_steps, Method method,
                                Direction direction) {
    if (method == Method::rk45)
        throw ConfigError("integrate_batch: shared-grid batching needs a fixed-step method");
    if (n_steps < 1) throw ConfigError("solver: n_steps must be positive");
    if (z.rows() != f.input_dim()) throw ConfigError("solver: state does not match input_dim");
    Real t0, t1;
    endpoints(direction, t0, t1);
    const Index b = z.cols();

    BatchTrajectory traj;
    traj.times.resize(static_cast<std::size_t>(n_steps) + 1);
    for (int i = 0; i <= n_steps; ++i)
        traj.times[static_cast<std::size_t>(i)] =
            t0 + (t1 - t0) * static_cast<Real>(i) / static_cast<Real>(n_steps);
    traj.times.back() = t1;
    traj.states.resize(traj.times.size());
    traj.velocities.resize(traj.times.size());

    Mat y = z;
    for (int i = 0; i < n_steps; ++i) {
        const Real ta = traj.times[static_cast<std::size_t>(i)];
        const Real h = traj.times[static_cast<std::size_t>(i) + 1] - ta;
        Mat v1 = forward(f, y, Vec::Constant(b, ta));
        traj.states[static_cast<std::size_t>(i)] = y;
        traj.velocities[static_cast<std::size_t>(i)] = v1;
        if (method == Method::euler) {
            y += h * v1;
        } else {
            Mat v2 = forward(f, y + h * v1, Vec::Constant(b, ta + h));
            y += (h / 2.0) * (v1 + v2);
        }
    }
    traj.states.back() = y;
    traj.velocities.back() = forward(f, y, Vec::Constant(b, t1));
    return traj;
}

Vec one_step_generate(const VelocityField& f, const Vec& z0) { return z0 + forward(f, z0, 0.0); }

Mat one_step_generate(const VelocityField& f, const Mat& z0) {
    return z0 + forward(f, z0, Vec::Zero(z0.cols()));
}

Vec reconstruct(const VelocityField& f, const Vec& x, const SolverConfig& cfg_inv,
                const SolverConfig& cfg_fwd) {
    const Vec z0 = transport(f, x, inverse_of(cfg_inv));
    return transport(f, z0, forward_of(cfg_fwd));
}

Vec reconstruct_perturbed(const VelocityField& f, const Vec& x, Real eps, const Vec& z,
                          const SolverConfig& cfg_inv, const SolverConfig& cfg_fwd) {
    Vec z0 = transport(f, x, inverse_of(cfg_inv));
    z0 += eps * z;
    return transport(f, z0, forward_of(cfg_fwd));
}

void write_trajectory_csv(const std::filesystem::path& path, const Trajectory& traj) {
    std::ofstream os(path);
    if (!os) throw ConfigError("trajectory: cannot open " + path.string() + " for writing");
    const Index d = traj.states.empty() ? 0 : traj.states.front().size();
    os << "t";
    for (Index i = 0; i < d; ++i) os << ",x_" << (i + 1);
    for (Index i = 0; i < d; ++i) os << ",v_" << (i + 1);
    os << "\n";
    char buf[64];
    auto put = [&](Real v) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        os << buf;
    };
    for (std::size_t i = 0; i < traj.times.size(); ++i) {
        put(traj.times[i]);
        for (Index j = 0; j < d; ++j) {
            os << ",";
            put(traj.states[i][j]);
        }
        for (Index j = 0; j < d; ++j) {
            os << ",";
            put(traj.velocities[i][j]);
        }
        os << "\n";
    }
}

}  // namespace cflow
