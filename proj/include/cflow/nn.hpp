#pragma once

#include "cflow/types.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace cflow {

enum class Activation { silu, tanh };

// Architecture of a velocity net. The network maps (x, t) to a velocity of
// the same dimension as x. Time enters through a sinusoidal embedding of
// time_embed_dim entries (time_embed_dim/2 frequencies, sin and cos each)
// concatenated to x; time_embed_dim = 0 feeds t-free input straight through.
struct FieldSpec {
    int input_dim = 2;
    int time_embed_dim = 32;
    std::vector<int> hidden_dims = {128, 128, 128};
    Activation activation = Activation::silu;

    int embedded_dim() const { return input_dim + time_embed_dim; }
    int n_layers() const { return static_cast<int>(hidden_dims.size()) + 1; }
};

// Fully connected velocity net v(x, t). Layer l computes
// a_{l} = act(W_l a_{l-1} + b_l), the last layer is affine with output
// dimension input_dim. Parameters are plain dense Eigen blocks.
class VelocityField {
public:
    VelocityField() : VelocityField(FieldSpec{}) {}
    explicit VelocityField(FieldSpec spec);  // zero-initialized parameters

    // Scaled uniform fan-in init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    static VelocityField random_init(FieldSpec spec, std::uint64_t seed);

    const FieldSpec& spec() const { return spec_; }
    int input_dim() const { return spec_.input_dim; }

    const std::vector<Mat>& weights() const { return weights_; }
    const std::vector<Vec>& biases() const { return biases_; }
    Mat& weight(int l) { return weights_[static_cast<std::size_t>(l)]; }
    Vec& bias(int l) { return biases_[static_cast<std::size_t>(l)]; }

    Index param_count() const;
    Vec params_flat() const;                 // layer order, weights row-major, then bias
    void set_params_flat(const Vec& flat);   // throws NumericalError on non-finite entries

private:
    FieldSpec spec_;
    std::vector<Mat> weights_;
    std::vector<Vec> biases_;
};

// Sinusoidal embedding [sin(pi k t), cos(pi k t)] for k = 1..dim/2.
Vec time_embedding(Real t, int dim);

// Intermediate activations of a batch forward pass, kept for backprop.
struct ForwardTrace {
    Mat input;                 // embedded input, (d + temb) x B
    std::vector<Mat> pre;      // pre-activation per layer
    std::vector<Mat> post;     // post-activation per hidden layer
};

Vec forward(const VelocityField& f, const Vec& x, Real t);
// Batch forward: column j of x is a sample, paired with t[j]. d x B in, d x B out.
Mat forward(const VelocityField& f, const Mat& x, const Vec& t);
Mat forward(const VelocityField& f, const Mat& x, const Vec& t, ForwardTrace& trace);

// Gradient of sum_j dot(upstream.col(j), forward(x_j, t_j)) with respect to
// every parameter, flattened in the same order as params_flat().
Vec backward(const VelocityField& f, const ForwardTrace& trace, const Mat& upstream);

struct OptimState {
    Real lr = 1e-3;
    Real beta1 = 0.9;
    Real beta2 = 0.999;
    Real eps = 1e-8;
    long step_count = 0;
    Vec m;  // sized to the parameter vector on first step
    Vec v;
};

// One bias-corrected Adam step in place. Rejects non-finite gradients.
void adam_step(Vec& params, const Vec& grad, OptimState& state);

class EmaShadow {
public:
    EmaShadow(const Vec& params, Real decay);  // decay in [0, 1)
    void update(const Vec& params);
    const Vec& shadow() const { return shadow_; }
    Real decay() const { return decay_; }

private:
    Vec shadow_;
    Real decay_;
};

// Binary checkpoint, magic "CFLOW1": little-endian spec header followed by
// the parameters as 64-bit floats, weights row-major then biases per layer.
void save_checkpoint(const std::filesystem::path& path, const VelocityField& f);
VelocityField load_checkpoint(const std::filesystem::path& path);

}  // namespace cflow
