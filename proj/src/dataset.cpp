#include "cflow/dataset.hpp"

#include "cflow/rng.hpp"

#include <Eigen/Cholesky>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

namespace cflow {

Distribution Distribution::standard_gaussian(int dim) {
    if (dim < 1) throw ConfigError("dataset: dim must be positive");
    Distribution d;
    d.kind = Kind::standard_gaussian;
    d.dim = dim;
    return d;
}

Distribution Distribution::two_moons(Real noise) {
    if (noise < 0) throw ConfigError("dataset: moon noise must be non-negative");
    Distribution d;
    d.kind = Kind::two_moons;
    d.dim = 2;
    d.moon_noise = noise;
    return d;
}

Distribution Distribution::gaussian_mixture(std::vector<MixtureComponent> components) {
    if (components.empty()) throw ConfigError("dataset: mixture needs at least one component");
    Distribution d;
    d.kind = Kind::gaussian_mixture;
    d.dim = static_cast<int>(components.front().mean.size());
    Real total = 0;
    for (const auto& c : components) {
        if (c.mean.size() != d.dim || c.cov.rows() != d.dim || c.cov.cols() != d.dim)
            throw ConfigError("dataset: mixture component shapes disagree");
        if (c.weight <= 0) throw ConfigError("dataset: mixture weights must be positive");
        total += c.weight;
    }
    d.components = std::move(components);
    for (auto& c : d.components) c.weight /= total;
    return d;
}

Distribution Distribution::checkerboard() {
    Distribution d;
    d.kind = Kind::checkerboard;
    d.dim = 2;
    return d;
}

namespace {

// Two interleaving half circles of radius 1: upper arc of a circle at the
// origin, and its reflection shifted right by 1 and down to y in [-0.5, 0.5].
void sample_two_moons(const Distribution& dist, Mat& out, Rng& rng) {
    for (Index j = 0; j < out.cols(); ++j) {
        const Real theta = rng.uniform(0.0, std::numbers::pi_v<Real>);
        const bool second = rng.uniform() < 0.5;
        Real x, y;
        if (!second) {
            x = std::cos(theta);
            y = std::sin(theta);
        } else {
            x = 1.0 - std::cos(theta);
            y = 0.5 - std::sin(theta);
        }
        out(0, j) = x + dist.moon_noise * rng.normal();
        out(1, j) = y + dist.moon_noise * rng.normal();
    }
}

// 4x4 board on [-2, 2]^2, mass on the 8 same-colored unit cells.
void sample_checkerboard(Mat& out, Rng& rng) {
    for (Index j = 0; j < out.cols(); ++j) {
        const Index cell = rng.uniform_index(8);
        const Index row = cell / 2;
        const Index col_in_row = cell % 2;
        const Index col = 2 * col_in_row + (row % 2);
        out(0, j) = -2.0 + static_cast<Real>(col) + rng.uniform();
        out(1, j) = -2.0 + static_cast<Real>(row) + rng.uniform();
    }
}

void sample_mixture(const Distribution& dist, Mat& out, Rng& rng) {
    std::vector<Eigen::LLT<Mat>> chols;
    chols.reserve(dist.components.size());
    for (const auto& c : dist.components) {
        chols.emplace_back(c.cov);
        if (chols.back().info() != Eigen::Success)
            throw ConfigError("dataset: mixture covariance is not positive definite");
    }
    for (Index j = 0; j < out.cols(); ++j) {
        const Real u = rng.uniform();
        std::size_t pick = dist.components.size() - 1;
        Real acc = 0;
        for (std::size_t c = 0; c < dist.components.size(); ++c) {
            acc += dist.components[c].weight;
            if (u < acc) {
                pick = c;
                break;
            }
        }
        const Vec z = rng.normal_vec(dist.dim);
        out.col(j) = dist.components[pick].mean + chols[pick].matrixL() * z;
    }
}

}  // namespace

Mat sample(const Distribution& dist, Index n, std::uint64_t seed) {
    if (n < 0) throw ConfigError("dataset: sample count must be non-negative");
    Mat out(dist.dim, n);
    Rng rng(seed);
    switch (dist.kind) {
        case Distribution::Kind::standard_gaussian:
            out = rng.normal_mat(dist.dim, n);
            break;
        case Distribution::Kind::two_moons:
            sample_two_moons(dist, out, rng);
            break;
        case Distribution::Kind::gaussian_mixture:
            sample_mixture(dist, out, rng);
            break;
        case Distribution::Kind::checkerboard:
            sample_checkerboard(out, rng);
            break;
    }
    return out;
}

std::string to_string(Provenance p) { return p == Provenance::real ? "real" : "fake"; }

Provenance provenance_from_string(const std::string& s) {
    if (s == "real") return Provenance::real;
    if (s == "fake") return Provenance::fake;
    throw ConfigError("pairs: unknown provenance '" + s + "'");
}

PairSet make_fake_pairs(const VelocityField& f, const Distribution& source, Index n,
                        const SolverConfig& solver, std::uint64_t seed, int order_k) {
    if (n < 1) throw ConfigError("pairs: need at least one pair");
    PairSet p;
    p.provenance = Provenance::fake;
    p.order_k = order_k;
    p.z0 = sample(source, n, seed);
    p.z1 = transport(f, p.z0, forward_of(solver));
    return p;
}

PairSet make_real_pairs(const VelocityField& f, const Distribution& target, Index n,
                        const SolverConfig& solver, std::uint64_t seed, int order_k) {
    if (n < 1) throw ConfigError("pairs: need at least one pair");
    PairSet p;
    p.provenance = Provenance::real;
    p.order_k = order_k;
    p.z1 = sample(target, n, seed);
    p.z0 = transport(f, p.z1, inverse_of(solver));
    return p;
}

void save_pairs(const std::filesystem::path& path, const PairSet& pairs) {
    std::ofstream os(path);
    if (!os) throw ConfigError("pairs: cannot open " + path.string() + " for writing");
    os << pairs.dim() << "," << pairs.count() << "," << to_string(pairs.provenance) << ","
       << pairs.order_k << "\n";
    char buf[64];
    for (Index j = 0; j < pairs.count(); ++j) {
        for (Index i = 0; i < pairs.dim(); ++i) {
            std::snprintf(buf, sizeof(buf), "%.17g", pairs.z0(i, j));
            os << (i ? "," : "") << buf;
        }
        for (Index i = 0; i < pairs.dim(); ++i) {
            std::snprintf(buf, sizeof(buf), "%.17g", pairs.z1(i, j));
            os << "," << buf;
        }
        os << "\n";
    }
    if (!os) throw ConfigError("pairs: write failed for " + path.string());
}

PairSet load_pairs(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("pairs: cannot open " + path.string());
    std::string line;
    if (!std::getline(is, line)) throw ConfigError("pairs: missing header in " + path.string());
    std::istringstream header(line);
    std::string dim_s, count_s, prov_s, k_s;
    if (!std::getline(header, dim_s, ',') || !std::getline(header, count_s, ',') ||
        !std::getline(header, prov_s, ',') || !std::getline(header, k_s))
        throw ConfigError("pairs: malformed header in " + path.string());

    PairSet p;
    const Index dim = std::stoll(dim_s);
    const Index count = std::stoll(count_s);
    if (dim < 1 || count < 0) throw ConfigError("pairs: bad dimensions in header");
    p.provenance = provenance_from_string(prov_s);
    p.order_k = std::stoi(k_s);
    p.z0.resize(dim, count);
    p.z1.resize(dim, count);

    for (Index j = 0; j < count; ++j) {
        if (!std::getline(is, line))
            throw ConfigError("pairs: expected " + std::to_string(count) + " rows, got " +
                              std::to_string(j));
        std::istringstream row(line);
        std::string cell;
        for (Index i = 0; i < 2 * dim; ++i) {
            if (!std::getline(row, cell, ','))
                throw ConfigError("pairs: short row " + std::to_string(j));
            const Real v = std::strtod(cell.c_str(), nullptr);
            if (i < dim)
                p.z0(i, j) = v;
            else
                p.z1(i - dim, j) = v;
        }
    }
    return p;
}

}  // namespace cflow
