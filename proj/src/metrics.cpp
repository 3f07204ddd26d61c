#include "cflow/metrics.hpp"

#include "cflow/rng.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace cflow {

namespace {

constexpr Real kCovFloor = 1e-6;

Vec node_deviation_from(const BatchTrajectory& traj) {
    const Mat disp = traj.states.back() - traj.states.front();
    Vec out(static_cast<Index>(traj.times.size()));
    for (std::size_t i = 0; i < traj.times.size(); ++i)
        out[static_cast<Index>(i)] =
            (disp - traj.velocities[i]).colwise().squaredNorm().mean();
    return out;
}

}  // namespace

Vec per_node_deviation(const VelocityField& f, const Mat& z0_samples, int n_time_nodes,
                       Method method) {
    if (n_time_nodes < 2) throw ConfigError("curvature: need at least two time nodes");
    if (z0_samples.cols() < 1) throw ConfigError("curvature: empty sample set");
    const BatchTrajectory traj =
        integrate_batch(f, z0_samples, n_time_nodes - 1, method, Direction::forward);
    return node_deviation_from(traj);
}

Real curvature(const VelocityField& f, const Mat& z0_samples, int n_time_nodes, Method method) {
    const Vec dev = per_node_deviation(f, z0_samples, n_time_nodes, method);
    const Real h = 1.0 / static_cast<Real>(n_time_nodes - 1);
    Real acc = 0.5 * (dev[0] + dev[dev.size() - 1]);
    for (Index i = 1; i + 1 < dev.size(); ++i) acc += dev[i];
    return acc * h;
}

Real ivd(const VelocityField& f, const Mat& z0_samples, int n_time_nodes, Real t0, Method method) {
    if (!(t0 >= 0.0 && t0 <= 1.0)) throw ConfigError("ivd: t0 must lie in [0, 1]");
    const Vec dev = per_node_deviation(f, z0_samples, n_time_nodes, method);
    const Index node = static_cast<Index>(
        std::lround(t0 * static_cast<Real>(n_time_nodes - 1)));
    return dev[node];
}

std::vector<Index> topk_curvature_indices(const VelocityField& f, const Mat& z0_samples,
                                          int n_steps, int k, Method method) {
    if (k < 1 || k > n_steps) throw ConfigError("topk: k must lie in [1, n_steps]");
    const Vec dev = per_node_deviation(f, z0_samples, n_steps + 1, method);
    std::vector<Index> idx(static_cast<std::size_t>(n_steps));
    std::iota(idx.begin(), idx.end(), Index{0});
    std::stable_sort(idx.begin(), idx.end(), [&](Index a, Index b) {
        if (dev[a] != dev[b]) return dev[a] > dev[b];
        return a < b;
    });
    idx.resize(static_cast<std::size_t>(k));
    return idx;
}

Real recon_error(const VelocityField& f, const Mat& samples, ReconKind kind, Real eps,
                 const SolverConfig& cfg_inv, const SolverConfig& cfg_fwd, std::uint64_t seed) {
    if (samples.cols() < 1) throw ConfigError("recon: empty sample set");
    if (kind == ReconKind::perturbed && eps < 0)
        throw ConfigError("recon: eps must be non-negative");
    Mat z0 = transport(f, samples, inverse_of(cfg_inv));
    if (kind == ReconKind::perturbed)
        z0 += eps * Rng(seed).normal_mat(samples.rows(), samples.cols());
    const Mat back = transport(f, z0, forward_of(cfg_fwd));
    return (back - samples).colwise().norm().mean();
}

namespace {

Real log_gaussian(const Vec& x, const Vec& mean, const Eigen::LLT<Mat>& llt, Real log_norm) {
    const Vec diff = x - mean;
    const Vec sol = llt.matrixL().solve(diff);
    return log_norm - 0.5 * sol.squaredNorm();
}

Real chol_log_norm(const Eigen::LLT<Mat>& llt, Index d) {
    Real log_det = 0;
    for (Index i = 0; i < d; ++i) log_det += std::log(llt.matrixLLT()(i, i));
    log_det *= 2.0;
    return -0.5 * (static_cast<Real>(d) * std::log(2.0 * std::numbers::pi_v<Real>) + log_det);
}

}  // namespace

GmmFit fit_gmm(const Mat& samples, int n_components, int em_iters, std::uint64_t seed) {
    const Index n = samples.cols();
    const Index d = samples.rows();
    if (n_components < 1) throw ConfigError("gmm: need at least one component");
    if (em_iters < 1) throw ConfigError("gmm: need at least one EM iteration");
    if (n < 10 * static_cast<Index>(n_components))
        throw ConfigError("gmm: need at least 10 samples per component");

    Rng rng(seed);
    const Index k = n_components;

    // k-means++ style seeding: spread the initial means by squared distance.
    std::vector<Index> centers;
    centers.push_back(rng.uniform_index(n));
    Vec d2 = (samples.colwise() - Vec(samples.col(centers[0]))).colwise().squaredNorm();
    while (static_cast<Index>(centers.size()) < k) {
        const Real total = d2.sum();
        Index pick = 0;
        if (total > 0) {
            const Real target = rng.uniform() * total;
            Real acc = 0;
            for (Index i = 0; i < n; ++i) {
                acc += d2[i];
                if (acc >= target) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = rng.uniform_index(n);
        }
        centers.push_back(pick);
        const Vec dist = (samples.colwise() - Vec(samples.col(pick))).colwise().squaredNorm();
        d2 = d2.cwiseMin(dist);
    }

    const Vec data_mean = samples.rowwise().mean();
    Mat centered = samples.colwise() - data_mean;
    Mat global_cov = centered * centered.transpose() / static_cast<Real>(n);
    global_cov.diagonal().array() += kCovFloor;

    GmmFit fit;
    fit.components.resize(static_cast<std::size_t>(k));
    for (Index c = 0; c < k; ++c) {
        auto& comp = fit.components[static_cast<std::size_t>(c)];
        comp.weight = 1.0 / static_cast<Real>(k);
        comp.mean = samples.col(centers[static_cast<std::size_t>(c)]);
        comp.cov = global_cov;
    }

    Mat log_resp(k, n);
    auto e_step = [&]() -> Real {
        for (Index c = 0; c < k; ++c) {
            const auto& comp = fit.components[static_cast<std::size_t>(c)];
            Eigen::LLT<Mat> llt(comp.cov);
            if (llt.info() != Eigen::Success)
                throw NumericalError("gmm: covariance lost positive definiteness");
            const Real log_norm = chol_log_norm(llt, d);
            const Real log_w = std::log(comp.weight);
            for (Index i = 0; i < n; ++i)
                log_resp(c, i) = log_w + log_gaussian(samples.col(i), comp.mean, llt, log_norm);
        }
        Real ll = 0;
        for (Index i = 0; i < n; ++i) {
            const Real mx = log_resp.col(i).maxCoeff();
            const Real lse = mx + std::log((log_resp.col(i).array() - mx).exp().sum());
            ll += lse;
            log_resp.col(i).array() -= lse;
        }
        return ll / static_cast<Real>(n);
    };

    for (int iter = 0; iter < em_iters; ++iter) {
        fit.ll_history.push_back(e_step());
        const Mat resp = log_resp.array().exp();
        for (Index c = 0; c < k; ++c) {
            const Real nk = resp.row(c).sum();
            auto& comp = fit.components[static_cast<std::size_t>(c)];
            if (nk < 1e-10) {
                // Starved component: keep its parameters, flag the fit.
                fit.regularized = true;
                comp.weight = 1e-10;
                continue;
            }
            comp.weight = nk / static_cast<Real>(n);
            comp.mean = (samples * resp.row(c).transpose()) / nk;
            const Mat diff = samples.colwise() - comp.mean;
            comp.cov =
                (diff * resp.row(c).asDiagonal() * diff.transpose()) / nk;
            comp.cov.diagonal().array() += kCovFloor;
            Eigen::LLT<Mat> llt(comp.cov);
            if (llt.info() != Eigen::Success) {
                comp.cov.diagonal().array() += 1e-3;
                fit.regularized = true;
            }
        }
        Real wsum = 0;
        for (const auto& comp : fit.components) wsum += comp.weight;
        for (auto& comp : fit.components) comp.weight /= wsum;
    }
    fit.ll_history.push_back(e_step());
    fit.log_likelihood = fit.ll_history.back();
    return fit;
}

GmmDensity::GmmDensity(const GmmFit& fit) {
    if (fit.components.empty()) throw ConfigError("gmm: empty fit");
    dim_ = fit.components.front().mean.size();
    Real acc = 0;
    for (const auto& comp : fit.components) {
        Eigen::LLT<Mat> llt(comp.cov);
        if (llt.info() != Eigen::Success)
            throw NumericalError("gmm: covariance is not positive definite");
        Comp c;
        c.log_weight = std::log(comp.weight);
        c.mean = comp.mean;
        c.chol_l = llt.matrixL();
        c.log_norm = chol_log_norm(llt, dim_);
        comps_.push_back(std::move(c));
        acc += comp.weight;
        cum_weights_.push_back(acc);
    }
    cum_weights_.back() = 1.0;
}

Real GmmDensity::log_density(const Vec& x) const {
    Real mx = -std::numeric_limits<Real>::infinity();
    std::vector<Real> terms(comps_.size());
    for (std::size_t c = 0; c < comps_.size(); ++c) {
        const Vec diff = x - comps_[c].mean;
        const Vec sol = comps_[c].chol_l.template triangularView<Eigen::Lower>().solve(diff);
        terms[c] = comps_[c].log_weight + comps_[c].log_norm - 0.5 * sol.squaredNorm();
        mx = std::max(mx, terms[c]);
    }
    Real acc = 0;
    for (Real v : terms) acc += std::exp(v - mx);
    return mx + std::log(acc);
}

Vec GmmDensity::draw(Rng& rng) const {
    const Real u = rng.uniform();
    std::size_t pick = comps_.size() - 1;
    for (std::size_t c = 0; c < comps_.size(); ++c)
        if (u < cum_weights_[c]) {
            pick = c;
            break;
        }
    const Vec z = rng.normal_vec(dim_);
    return comps_[pick].mean + comps_[pick].chol_l * z;
}

Real gmm_log_density(const GmmFit& fit, const Vec& x) { return GmmDensity(fit).log_density(x); }

Mat gmm_sample(const GmmFit& fit, Index n, std::uint64_t seed) {
    const GmmDensity density(fit);
    Rng rng(seed);
    Mat out(fit.components.front().mean.size(), n);
    for (Index j = 0; j < n; ++j) out.col(j) = density.draw(rng);
    return out;
}

KlEstimate gmm_kl(const GmmFit& p, const GmmFit& q, Index n_mc, std::uint64_t seed) {
    if (n_mc < 2) throw ConfigError("gmm_kl: need at least two Monte-Carlo draws");
    const GmmDensity dp(p);
    const GmmDensity dq(q);
    Rng rng(seed);
    Real acc = 0;
    Real acc2 = 0;
    for (Index i = 0; i < n_mc; ++i) {
        const Vec x = dp.draw(rng);
        const Real diff = dp.log_density(x) - dq.log_density(x);
        acc += diff;
        acc2 += diff * diff;
    }
    KlEstimate est;
    const Real n = static_cast<Real>(n_mc);
    est.value = acc / n;
    const Real var = std::max(0.0, acc2 / n - est.value * est.value);
    est.std_error = std::sqrt(var / n);
    return est;
}

std::string fmt_real(Real v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::string to_string(Method m) {
    switch (m) {
        case Method::euler: return "euler";
        case Method::heun: return "heun";
        case Method::rk45: return "rk45";
    }
    return "euler";
}

std::string metrics_csv_header() {
    return "k,procedure,curvature,ivd,recon_real,recon_fake,precon_real,precon_fake,"
           "recon_epsilon,kl_to_target,nfe_mean,sample_count,solver,solver_steps";
}

std::string metrics_csv_row(const MetricsReport& r) {
    std::ostringstream os;
    os << r.k << "," << r.procedure << "," << fmt_real(r.curvature) << "," << fmt_real(r.ivd)
       << "," << fmt_real(r.recon_real) << "," << fmt_real(r.recon_fake) << ","
       << fmt_real(r.precon_real) << "," << fmt_real(r.precon_fake) << ","
       << fmt_real(r.recon_epsilon) << "," << fmt_real(r.kl_to_target) << ","
       << fmt_real(r.nfe_mean) << "," << r.sample_count << "," << to_string(r.solver_method)
       << "," << r.solver_steps;
    return os.str();
}

std::string metrics_text_block(const MetricsReport& r) {
    std::ostringstream os;
    os << "flow order k:        " << r.k << "\n"
       << "procedure:           " << r.procedure << "\n"
       << "curvature:           " << fmt_real(r.curvature) << "\n"
       << "initial velocity dev: " << fmt_real(r.ivd) << "\n"
       << "recon error (real):  " << fmt_real(r.recon_real) << "\n"
       << "recon error (fake):  " << fmt_real(r.recon_fake) << "\n"
       << "perturbed recon (real): " << fmt_real(r.precon_real) << " (eps = "
       << fmt_real(r.recon_epsilon) << ")\n"
       << "perturbed recon (fake): " << fmt_real(r.precon_fake) << " (eps = "
       << fmt_real(r.recon_epsilon) << ")\n"
       << "KL to target:        " << fmt_real(r.kl_to_target) << "\n"
       << "mean NFE:            " << fmt_real(r.nfe_mean) << "\n"
       << "samples:             " << r.sample_count << "\n"
       << "solver:              " << to_string(r.solver_method) << "/" << r.solver_steps << "\n";
    return os.str();
}

}  // namespace cflow
