#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "cflow/dataset.hpp"
#include "cflow/metrics.hpp"
#include "cflow/rng.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

using namespace cflow;

namespace {

VelocityField linear_field(Real w) {
    FieldSpec spec;
    spec.input_dim = 1;
    spec.time_embed_dim = 0;
    spec.hidden_dims = {};
    VelocityField f(spec);
    f.weight(0)(0, 0) = w;
    return f;
}

VelocityField constant_field(const Vec& c) {
    FieldSpec spec;
    spec.input_dim = static_cast<int>(c.size());
    spec.time_embed_dim = 0;
    spec.hidden_dims = {};
    VelocityField f(spec);
    f.bias(0) = c;
    return f;
}

VelocityField smooth_field(std::uint64_t seed) {
    FieldSpec spec;
    spec.input_dim = 2;
    spec.time_embed_dim = 8;
    spec.hidden_dims = {16, 16};
    return VelocityField::random_init(spec, seed);
}

GmmFit single_gaussian(const Vec& mean, const Mat& cov) {
    GmmFit fit;
    GmmComponent comp;
    comp.weight = 1.0;
    comp.mean = mean;
    comp.cov = cov;
    fit.components.push_back(comp);
    return fit;
}

}  // namespace

TEST_CASE("constant fields have exactly zero curvature") {
    Vec c(2);
    c << 1.0, -2.0;
    const VelocityField f = constant_field(c);
    const Mat z0 = Rng(3).normal_mat(2, 8);

    // Straight trajectories leave only squared accumulation rounding.
    for (Method m : {Method::euler, Method::heun}) {
        CHECK(curvature(f, z0, 50, m) <= 1e-20);
        CHECK(ivd(f, z0, 50, 0.0, m) <= 1e-20);
        CHECK(per_node_deviation(f, z0, 50, m).maxCoeff() <= 1e-20);
    }
}

TEST_CASE("curvature of the linear field matches the closed form") {
    // v = x from z0 = 1: integral of (e - e^t)^2 dt = -e^2/2 + 2e - 3/2.
    const Real exact = -std::exp(2.0) / 2.0 + 2.0 * std::exp(1.0) - 1.5;
    const VelocityField f = linear_field(1.0);
    const Mat one = Mat::Ones(1, 1);

    const Real est_euler = curvature(f, one, 200, Method::euler);
    CHECK(std::abs(est_euler - exact) / exact < 0.01);
    CHECK(est_euler == doctest::Approx(0.24017637245689058).epsilon(1e-9));

    const Real est_heun = curvature(f, one, 200, Method::heun);
    CHECK(std::abs(est_heun - exact) / exact < 0.001);
    CHECK(est_heun == doctest::Approx(0.24204689260465576).epsilon(1e-9));
}

TEST_CASE("initial velocity deviation matches the closed form") {
    // v = x from z0 = 1 at t0 = 0: ((e - 1) - 1)^2.
    const Real exact = (std::exp(1.0) - 2.0) * (std::exp(1.0) - 2.0);
    const VelocityField f = linear_field(1.0);
    const Mat one = Mat::Ones(1, 1);

    const Real est = ivd(f, one, 200, 0.0, Method::heun);
    CHECK(std::abs(est - exact) / exact < 0.005);
    CHECK(exact == doctest::Approx(0.515928785094469).epsilon(1e-15));
}

TEST_CASE("curvature is the trapezoid rule over node deviations") {
    const VelocityField f = smooth_field(11);
    const Mat z0 = Rng(7).normal_mat(2, 3);
    const int nodes = 11;

    const Vec dev = per_node_deviation(f, z0, nodes, Method::heun);
    REQUIRE(dev.size() == nodes);

    Real acc = 0.0;
    const Real h = 1.0 / static_cast<Real>(nodes - 1);
    for (int i = 0; i + 1 < nodes; ++i) acc += 0.5 * h * (dev[i] + dev[i + 1]);
    CHECK(curvature(f, z0, nodes, Method::heun) == doctest::Approx(acc).epsilon(1e-12));

    // ivd picks the node nearest its t0.
    for (int i = 0; i < nodes; ++i) {
        const Real t0 = static_cast<Real>(i) / static_cast<Real>(nodes - 1);
        CHECK(ivd(f, z0, nodes, t0, Method::heun) == dev[i]);
    }
}

TEST_CASE("metric node counts are validated") {
    const VelocityField f = smooth_field(13);
    const Mat z0 = Rng(5).normal_mat(2, 2);
    CHECK_THROWS_AS(curvature(f, z0, 1), ConfigError);
    CHECK_THROWS_AS(ivd(f, z0, 11, 1.5), ConfigError);
    CHECK_THROWS_AS(per_node_deviation(f, z0, 11, Method::rk45), ConfigError);
}

TEST_CASE("top-k picks the largest deviations and keeps ties stable") {
    // Constant field: every step ties at zero, so indices come back sorted.
    Vec c(2);
    c << 0.5, 0.5;
    const Mat z0 = Rng(9).normal_mat(2, 4);
    const auto ties = topk_curvature_indices(constant_field(c), z0, 12, 5);
    CHECK(ties == std::vector<Index>{0, 1, 2, 3, 4});

    // Random field: returned deviations are non-increasing, k = n is a permutation.
    const VelocityField f = smooth_field(17);
    const Vec dev = per_node_deviation(f, z0, 13, Method::euler);  // 13 nodes, 12 steps
    const auto order = topk_curvature_indices(f, z0, 12, 12);
    REQUIRE(order.size() == 12);
    std::vector<Index> sorted = order;
    std::sort(sorted.begin(), sorted.end());
    for (Index i = 0; i < 12; ++i) CHECK(sorted[static_cast<std::size_t>(i)] == i);
    for (std::size_t i = 1; i < order.size(); ++i)
        CHECK(dev[order[i]] <= dev[order[i - 1]]);

    const auto top3 = topk_curvature_indices(f, z0, 12, 3);
    CHECK(std::vector<Index>(order.begin(), order.begin() + 3) == top3);

    CHECK_THROWS_AS(topk_curvature_indices(f, z0, 12, 0), ConfigError);
    CHECK_THROWS_AS(topk_curvature_indices(f, z0, 12, 13), ConfigError);
}

TEST_CASE("reconstruction error vanishes for a frozen field") {
    VelocityField still{FieldSpec{}};
    const Mat x = Rng(19).normal_mat(2, 64);
    const SolverConfig one{Method::euler, 1};

    CHECK(recon_error(still, x, ReconKind::plain, 0.0, one, one, 5) == 0.0);
    // eps = 0 makes the perturbed kind collapse onto the plain kind.
    CHECK(recon_error(still, x, ReconKind::perturbed, 0.0, one, one, 5) == 0.0);
}

TEST_CASE("perturbed reconstruction of a frozen field averages the noise norm") {
    // The round trip returns x + eps * z, so the error is eps E||z||, and
    // E||z|| = sqrt(pi / 2) in two dimensions.
    VelocityField still{FieldSpec{}};
    const Mat x = Rng(23).normal_mat(2, 20000);
    const SolverConfig one{Method::euler, 1};

    const Real eps = 0.05;
    const Real got = recon_error(still, x, ReconKind::perturbed, eps, one, one, 7);
    CHECK(got == doctest::Approx(eps * std::sqrt(std::numbers::pi / 2.0)).epsilon(0.02));

    // Doubling eps doubles the error bitwise thanks to the shared seed.
    const Real twice = recon_error(still, x, ReconKind::perturbed, 2.0 * eps, one, one, 7);
    CHECK(twice == doctest::Approx(2.0 * got).epsilon(1e-12));
}

TEST_CASE("reconstruction error responds to solver resolution") {
    const VelocityField f = smooth_field(29);
    const Mat x = Rng(31).normal_mat(2, 32);

    auto err = [&](int n) {
        const SolverConfig cfg{Method::euler, n};
        return recon_error(f, x, ReconKind::plain, 0.0, inverse_of(cfg), forward_of(cfg), 1);
    };
    CHECK(err(100) < err(10));
    CHECK(err(100) >= 0.0);
}

TEST_CASE("gmm fit recovers a single gaussian") {
    Rng rng(37);
    Vec mean(2);
    mean << 1.5, -0.5;
    Mat half = Mat::Zero(2, 2);
    half(0, 0) = 0.6;
    half(1, 1) = 0.3;
    const Mat x = (half * rng.normal_mat(2, 4000)).colwise() + mean;

    const GmmFit fit = fit_gmm(x, 1, 30, 4);
    REQUIRE(fit.components.size() == 1);
    CHECK(fit.components[0].weight == doctest::Approx(1.0).epsilon(1e-12));
    // Mean within four standard errors.
    CHECK((fit.components[0].mean - mean).norm() < 4.0 * 0.6 / std::sqrt(4000.0));
    CHECK(fit.components[0].cov(0, 0) == doctest::Approx(0.36).epsilon(0.1));
    CHECK(fit.components[0].cov(1, 1) == doctest::Approx(0.09).epsilon(0.1));
}

TEST_CASE("gmm em keeps likelihood nondecreasing and weights normalized") {
    const Mat x = sample(Distribution::two_moons(), 2000, 41);
    const GmmFit fit = fit_gmm(x, 8, 40, 4);

    REQUIRE(fit.ll_history.size() == 41);  // initial pass plus one per iteration
    for (std::size_t i = 1; i < fit.ll_history.size(); ++i)
        CHECK(fit.ll_history[i] >= fit.ll_history[i - 1] - 1e-8);
    CHECK(fit.log_likelihood == fit.ll_history.back());

    Real total = 0.0;
    for (const auto& comp : fit.components) total += comp.weight;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));

    // More components explain the moons strictly better.
    const GmmFit lone = fit_gmm(x, 1, 40, 4);
    CHECK(fit.log_likelihood > lone.log_likelihood);

    // Same seed, same fit.
    const GmmFit again = fit_gmm(x, 8, 40, 4);
    CHECK(again.log_likelihood == fit.log_likelihood);
}

TEST_CASE("gmm fit enforces the sample floor") {
    const Mat tiny = Rng(43).normal_mat(2, 50);
    CHECK_THROWS_AS(fit_gmm(tiny, 6, 10, 1), ConfigError);  // needs 60
    CHECK_THROWS_AS(fit_gmm(tiny, 0, 10, 1), ConfigError);
}

TEST_CASE("gmm density matches the gaussian formula") {
    Vec mean(2);
    mean << 0.5, -1.0;
    Mat cov = Mat::Zero(2, 2);
    cov(0, 0) = 2.0;
    cov(1, 1) = 0.5;
    const GmmFit fit = single_gaussian(mean, cov);

    Vec x(2);
    x << 1.0, 0.0;
    const Vec d = x - mean;
    const Real quad = d[0] * d[0] / 2.0 + d[1] * d[1] / 0.5;
    const Real want = -0.5 * quad - 0.5 * (2.0 * std::log(2.0 * std::numbers::pi) + std::log(1.0));
    CHECK(gmm_log_density(fit, x) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("gmm sampling respects component weights") {
    GmmFit fit;
    GmmComponent a, b;
    a.weight = 0.3;
    a.mean = Vec::Constant(2, -10.0);
    a.cov = 0.01 * Mat::Identity(2, 2);
    b.weight = 0.7;
    b.mean = Vec::Constant(2, 10.0);
    b.cov = 0.01 * Mat::Identity(2, 2);
    fit.components = {a, b};

    const Mat draws = gmm_sample(fit, 20000, 47);
    Index low = 0;
    for (Index j = 0; j < draws.cols(); ++j)
        if (draws(0, j) < 0.0) ++low;
    CHECK(static_cast<Real>(low) / 20000.0 == doctest::Approx(0.3).epsilon(0.05));
}

TEST_CASE("kl of identical mixtures is zero within noise") {
    const Mat x = sample(Distribution::two_moons(), 2000, 53);
    const GmmFit fit = fit_gmm(x, 4, 30, 9);
    const KlEstimate est = gmm_kl(fit, fit, 20000, 3);
    CHECK(est.std_error >= 0.0);
    CHECK(std::abs(est.value) <= 3.0 * est.std_error + 1e-12);
}

TEST_CASE("kl between unit gaussians matches the closed form") {
    // KL(N(0,1) || N(1,1)) = 0.5 in one dimension.
    const GmmFit p = single_gaussian(Vec::Zero(1), Mat::Identity(1, 1));
    const GmmFit q = single_gaussian(Vec::Ones(1), Mat::Identity(1, 1));
    const KlEstimate est = gmm_kl(p, q, 100000, 11);
    CHECK(est.value == doctest::Approx(0.5).epsilon(0.05));
    CHECK(est.value - 3.0 * est.std_error < 0.5);
    CHECK(est.value + 3.0 * est.std_error > 0.5);
}

TEST_CASE("metrics serialization round trips") {
    CHECK(fmt_real(0.05) == "0.05");
    CHECK(fmt_real(1.0) == "1");
    CHECK(std::stod(fmt_real(std::numbers::pi)) == std::numbers::pi);
    CHECK(std::stod(fmt_real(1e-17)) == 1e-17);

    MetricsReport rep;
    rep.k = 2;
    rep.procedure = "balanced_conic";
    rep.curvature = 0.125;
    rep.kl_to_target = 0.5;
    rep.sample_count = 1000;
    rep.solver_method = Method::heun;
    rep.solver_steps = 40;

    const std::string header = metrics_csv_header();
    const std::string row = metrics_csv_row(rep);
    CHECK(std::count(header.begin(), header.end(), ',') ==
          std::count(row.begin(), row.end(), ','));
    CHECK(row.find("balanced_conic") != std::string::npos);
    CHECK(row.find("heun") != std::string::npos);

    const std::string block = metrics_text_block(rep);
    CHECK(block.find("curvature") != std::string::npos);
    CHECK(block.find("0.125") != std::string::npos);
}
