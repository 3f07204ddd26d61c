#pragma once

#include "cflow/nn.hpp"
#include "cflow/ode.hpp"
#include "cflow/types.hpp"

#include <string>
#include <vector>

namespace cflow {

// Mean squared deviation between the trajectory displacement Z1 - Z0 and the
// node velocity, one entry per time node of the shared fixed-step grid.
Vec per_node_deviation(const VelocityField& f, const Mat& z0_samples, int n_time_nodes,
                       Method method = Method::euler);

// Trapezoidal integral of per_node_deviation over t in [0, 1]: straightness
// of the flow, 0 exactly when trajectories are straight lines.
Real curvature(const VelocityField& f, const Mat& z0_samples, int n_time_nodes,
               Method method = Method::euler);

// Deviation at the single node nearest t0 (default: the initial velocity).
Real ivd(const VelocityField& f, const Mat& z0_samples, int n_time_nodes, Real t0 = 0.0,
         Method method = Method::euler);

// Step indices with the largest per-step deviation, value-descending,
// ties broken by ascending index. Steps are 0-based nodes 0..n_steps-1.
std::vector<Index> topk_curvature_indices(const VelocityField& f, const Mat& z0_samples,
                                          int n_steps, int k, Method method = Method::euler);

enum class ReconKind { plain, perturbed };

// Mean L2 distance between x and its transport round trip; the perturbed
// kind nudges the inverted noise by eps times a fresh standard normal draw
// before transporting back.
Real recon_error(const VelocityField& f, const Mat& samples, ReconKind kind, Real eps,
                 const SolverConfig& cfg_inv, const SolverConfig& cfg_fwd, std::uint64_t seed);

struct GmmComponent {
    Real weight = 1.0;
    Vec mean;
    Mat cov;
};

struct GmmFit {
    std::vector<GmmComponent> components;
    Real log_likelihood = 0;          // mean per-sample, final E pass
    std::vector<Real> ll_history;     // one entry per E pass, nondecreasing
    bool regularized = false;         // a covariance needed extra flooring
};

// Full-covariance EM with k-means++ style seeding. Diagonal floor keeps
// covariances positive definite. Requires at least 10 samples per component.
GmmFit fit_gmm(const Mat& samples, int n_components, int em_iters, std::uint64_t seed);

// Cached-Cholesky evaluator for repeated density work.
class GmmDensity {
public:
    explicit GmmDensity(const GmmFit& fit);
    Real log_density(const Vec& x) const;
    Vec draw(class Rng& rng) const;

private:
    struct Comp {
        Real log_weight;
        Vec mean;
        Mat chol_l;
        Real log_norm;  // -0.5 (d log 2pi + log det)
    };
    std::vector<Comp> comps_;
    std::vector<Real> cum_weights_;
    Index dim_;
};

Real gmm_log_density(const GmmFit& fit, const Vec& x);
Mat gmm_sample(const GmmFit& fit, Index n, std::uint64_t seed);

struct KlEstimate {
    Real value = 0;      // raw Monte-Carlo estimate, may be slightly negative
    Real std_error = 0;
};

// KL(p || q) by sampling from p.
KlEstimate gmm_kl(const GmmFit& p, const GmmFit& q, Index n_mc, std::uint64_t seed);

struct MetricsReport {
    int k = 1;
    std::string procedure;
    Real curvature = 0;
    Real ivd = 0;
    Real recon_real = 0;
    Real recon_fake = 0;
    Real precon_real = 0;
    Real precon_fake = 0;
    Real recon_epsilon = 0;
    Real kl_to_target = 0;  // clamped at 0
    Real nfe_mean = 0;
    Index sample_count = 0;
    Method solver_method = Method::euler;
    int solver_steps = 0;
};

std::string to_string(Method m);
std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsReport& r);
std::string metrics_text_block(const MetricsReport& r);

// Shortest round-trip decimal form, used by all machine-readable output.
std::string fmt_real(Real v);

}  // namespace cflow
