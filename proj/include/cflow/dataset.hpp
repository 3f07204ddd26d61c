#pragma once

#include "cflow/nn.hpp"
#include "cflow/ode.hpp"
#include "cflow/types.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace cflow {

struct MixtureComponent {
    Real weight = 1.0;
    Vec mean;
    Mat cov;
};

// Synthetic target/source distributions. The flow source is always the
// standard Gaussian; the others serve as data distributions.
struct Distribution {
    enum class Kind { standard_gaussian, two_moons, gaussian_mixture, checkerboard };

    Kind kind = Kind::standard_gaussian;
    int dim = 2;
    Real moon_noise = 0.05;
    std::vector<MixtureComponent> components;

    static Distribution standard_gaussian(int dim);
    static Distribution two_moons(Real noise = 0.05);
    static Distribution gaussian_mixture(std::vector<MixtureComponent> components);
    static Distribution checkerboard();
};

// n i.i.d. draws, one per column.
Mat sample(const Distribution& dist, Index n, std::uint64_t seed);

enum class Provenance { real, fake };

std::string to_string(Provenance p);
Provenance provenance_from_string(const std::string& s);

// Coupled endpoints for flow training. Fake pairs transport noise forward
// through a field, real pairs invert data samples back to noise.
struct PairSet {
    Mat z0;
    Mat z1;
    Provenance provenance = Provenance::fake;
    int order_k = 1;  // rectification order of the generating flow

    Index dim() const { return z0.rows(); }
    Index count() const { return z0.cols(); }
};

PairSet make_fake_pairs(const VelocityField& f, const Distribution& source, Index n,
                        const SolverConfig& solver, std::uint64_t seed, int order_k);
PairSet make_real_pairs(const VelocityField& f, const Distribution& target, Index n,
                        const SolverConfig& solver, std::uint64_t seed, int order_k);

// Text format: header "dim,count,provenance,order_k", then one line per
// pair holding z0 then z1 coordinates with 17 significant digits.
void save_pairs(const std::filesystem::path& path, const PairSet& pairs);
PairSet load_pairs(const std::filesystem::path& path);

}  // namespace cflow
