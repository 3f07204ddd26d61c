#include "cflow/nn.hpp"

#include "cflow/rng.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>

namespace cflow {

namespace {

constexpr char kMagic[6] = {'C', 'F', 'L', 'O', 'W', '1'};

Real silu(Real z) { return z / (1.0 + std::exp(-z)); }
Real silu_deriv(Real z) {
    const Real s = 1.0 / (1.0 + std::exp(-z));
    return s * (1.0 + z * (1.0 - s));
}

Mat apply_act(const Mat& z, Activation act) {
    if (act == Activation::silu) return z.unaryExpr([](Real v) { return silu(v); });
    return z.array().tanh().matrix();
}

Mat apply_act_deriv(const Mat& z, Activation act) {
    if (act == Activation::silu) return z.unaryExpr([](Real v) { return silu_deriv(v); });
    return (1.0 - z.array().tanh().square()).matrix();
}

std::vector<std::pair<int, int>> layer_shapes(const FieldSpec& spec) {
    std::vector<std::pair<int, int>> shapes;
    int in = spec.embedded_dim();
    for (int h : spec.hidden_dims) {
        shapes.emplace_back(h, in);
        in = h;
    }
    shapes.emplace_back(spec.input_dim, in);
    return shapes;
}

}  // namespace

VelocityField::VelocityField(FieldSpec spec) : spec_(std::move(spec)) {
    if (spec_.input_dim < 1) throw ConfigError("field: input_dim must be positive");
    if (spec_.time_embed_dim < 0 || spec_.time_embed_dim % 2 != 0)
        throw ConfigError("field: time_embed_dim must be even and non-negative");
    for (int h : spec_.hidden_dims)
        if (h < 1) throw ConfigError("field: hidden dims must be positive");
    for (auto [rows, cols] : layer_shapes(spec_)) {
        weights_.push_back(Mat::Zero(rows, cols));
        biases_.push_back(Vec::Zero(rows));
    }
}

VelocityField VelocityField::random_init(FieldSpec spec, std::uint64_t seed) {
    VelocityField f(std::move(spec));
    Rng rng(seed);
    for (std::size_t l = 0; l < f.weights_.size(); ++l) {
        Mat& w = f.weights_[l];
        Vec& b = f.biases_[l];
        const Real bound = 1.0 / std::sqrt(static_cast<Real>(w.cols()));
        for (Index j = 0; j < w.cols(); ++j)
            for (Index i = 0; i < w.rows(); ++i) w(i, j) = rng.uniform(-bound, bound);
        for (Index i = 0; i < b.size(); ++i) b[i] = rng.uniform(-bound, bound);
    }
    return f;
}

Index VelocityField::param_count() const {
    Index n = 0;
    for (std::size_t l = 0; l < weights_.size(); ++l) n += weights_[l].size() + biases_[l].size();
    return n;
}

Vec VelocityField::params_flat() const {
    Vec flat(param_count());
    Index at = 0;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
        const Mat& w = weights_[l];
        for (Index i = 0; i < w.rows(); ++i)
            for (Index j = 0; j < w.cols(); ++j) flat[at++] = w(i, j);
        flat.segment(at, biases_[l].size()) = biases_[l];
        at += biases_[l].size();
    }
    return flat;
}

void VelocityField::set_params_flat(const Vec& flat) {
    if (flat.size() != param_count()) throw ConfigError("field: parameter vector has wrong size");
    if (!flat.allFinite()) throw NumericalError("field: non-finite parameter entries");
    Index at = 0;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
        Mat& w = weights_[l];
        for (Index i = 0; i < w.rows(); ++i)
            for (Index j = 0; j < w.cols(); ++j) w(i, j) = flat[at++];
        biases_[l] = flat.segment(at, biases_[l].size());
        at += biases_[l].size();
    }
}

Vec time_embedding(Real t, int dim) {
    Vec e(dim);
    const int freqs = dim / 2;
    for (int k = 0; k < freqs; ++k) {
        const Real w = std::numbers::pi_v<Real> * static_cast<Real>(k + 1);
        e[2 * k] = std::sin(w * t);
        e[2 * k + 1] = std::cos(w * t);
    }
    return e;
}

Vec forward(const VelocityField& f, const Vec& x, Real t) {
    const FieldSpec& spec = f.spec();
    if (x.size() != spec.input_dim) throw ConfigError("forward: x does not match input_dim");
    Vec a(spec.embedded_dim());
    a.head(spec.input_dim) = x;
    if (spec.time_embed_dim > 0) a.tail(spec.time_embed_dim) = time_embedding(t, spec.time_embed_dim);
    const int last = spec.n_layers() - 1;
    for (int l = 0; l <= last; ++l) {
        Vec z = f.weights()[static_cast<std::size_t>(l)] * a + f.biases()[static_cast<std::size_t>(l)];
        if (l == last) return z;
        if (spec.activation == Activation::silu)
            a = z.unaryExpr([](Real v) { return silu(v); });
        else
            a = z.array().tanh().matrix();
    }
    return a;  // unreachable
}

Mat forward(const VelocityField& f, const Mat& x, const Vec& t) {
    ForwardTrace trace;
    return forward(f, x, t, trace);
}

Mat forward(const VelocityField& f, const Mat& x, const Vec& t, ForwardTrace& trace) {
    const FieldSpec& spec = f.spec();
    if (x.rows() != spec.input_dim) throw ConfigError("forward: x does not match input_dim");
    if (t.size() != x.cols()) throw ConfigError("forward: t does not match batch size");
    const Index b = x.cols();

    trace.input.resize(spec.embedded_dim(), b);
    trace.input.topRows(spec.input_dim) = x;
    for (Index j = 0; j < b; ++j)
        if (spec.time_embed_dim > 0)
            trace.input.col(j).tail(spec.time_embed_dim) = time_embedding(t[j], spec.time_embed_dim);

    const int last = spec.n_layers() - 1;
    trace.pre.assign(static_cast<std::size_t>(last) + 1, Mat());
    trace.post.assign(static_cast<std::size_t>(last), Mat());

    const Mat* a = &trace.input;
    for (int l = 0; l <= last; ++l) {
        Mat& z = trace.pre[static_cast<std::size_t>(l)];
        z = f.weights()[static_cast<std::size_t>(l)] * (*a);
        z.colwise() += f.biases()[static_cast<std::size_t>(l)];
        if (l == last) return z;
        trace.post[static_cast<std::size_t>(l)] = apply_act(z, spec.activation);
        a = &trace.post[static_cast<std::size_t>(l)];
    }
    return trace.pre.back();  // unreachable
}

Vec backward(const VelocityField& f, const ForwardTrace& trace, const Mat& upstream) {
    const FieldSpec& spec = f.spec();
    const int last = spec.n_layers() - 1;
    if (upstream.rows() != spec.input_dim || upstream.cols() != trace.input.cols())
        throw ConfigError("backward: upstream does not match forward trace");

    std::vector<Mat> gw(static_cast<std::size_t>(last) + 1);
    std::vector<Vec> gb(static_cast<std::size_t>(last) + 1);

    Mat delta = upstream;
    for (int l = last; l >= 0; --l) {
        const std::size_t ul = static_cast<std::size_t>(l);
        if (!delta.allFinite())
            throw NumericalError("backward: non-finite gradient at layer " + std::to_string(l));
        const Mat& below = (l == 0) ? trace.input : trace.post[ul - 1];
        gw[ul] = delta * below.transpose();
        gb[ul] = delta.rowwise().sum();
        if (l > 0)
            delta = (f.weights()[ul].transpose() * delta)
                        .cwiseProduct(apply_act_deriv(trace.pre[ul - 1], spec.activation));
    }

    Vec flat(f.param_count());
    Index at = 0;
    for (std::size_t l = 0; l <= static_cast<std::size_t>(last); ++l) {
        for (Index i = 0; i < gw[l].rows(); ++i)
            for (Index j = 0; j < gw[l].cols(); ++j) flat[at++] = gw[l](i, j);
        flat.segment(at, gb[l].size()) = gb[l];
        at += gb[l].size();
    }
    return flat;
}

void adam_step(Vec& params, const Vec& grad, OptimState& state) {
    if (grad.size() != params.size()) throw ConfigError("adam: gradient size mismatch");
    if (!grad.allFinite()) throw NumericalError("adam: non-finite gradient rejected");
    if (state.m.size() != params.size()) {
        state.m = Vec::Zero(params.size());
        state.v = Vec::Zero(params.size());
        state.step_count = 0;
    }
    state.step_count += 1;
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad;
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad.cwiseProduct(grad);
    const Real c1 = 1.0 - std::pow(state.beta1, static_cast<Real>(state.step_count));
    const Real c2 = 1.0 - std::pow(state.beta2, static_cast<Real>(state.step_count));
    params.array() -=
        state.lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + state.eps);
}

EmaShadow::EmaShadow(const Vec& params, Real decay) : shadow_(params), decay_(decay) {
    if (!(decay >= 0.0 && decay < 1.0)) throw ConfigError("ema: decay must lie in [0, 1)");
}

void EmaShadow::update(const Vec& params) {
    if (params.size() != shadow_.size()) throw ConfigError("ema: parameter size mismatch");
    shadow_ = decay_ * shadow_ + (1.0 - decay_) * params;
}

namespace {

void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

void write_f64(std::ostream& os, Real d) {
    const auto u = std::bit_cast<std::uint64_t>(d);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

Real read_f64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t u = 0;
    for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return std::bit_cast<Real>(u);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const VelocityField& f) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("checkpoint: cannot open " + path.string() + " for writing");
    os.write(kMagic, sizeof(kMagic));
    const FieldSpec& spec = f.spec();
    write_u32(os, static_cast<std::uint32_t>(spec.input_dim));
    write_u32(os, static_cast<std::uint32_t>(spec.time_embed_dim));
    write_u32(os, spec.activation == Activation::silu ? 0u : 1u);
    write_u32(os, static_cast<std::uint32_t>(spec.hidden_dims.size()));
    for (int h : spec.hidden_dims) write_u32(os, static_cast<std::uint32_t>(h));
    for (std::size_t l = 0; l < f.weights().size(); ++l) {
        const Mat& w = f.weights()[l];
        for (Index i = 0; i < w.rows(); ++i)
            for (Index j = 0; j < w.cols(); ++j) write_f64(os, w(i, j));
        const Vec& b = f.biases()[l];
        for (Index i = 0; i < b.size(); ++i) write_f64(os, b[i]);
    }
    if (!os) throw ConfigError("checkpoint: write failed for " + path.string());
}

VelocityField load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("checkpoint: cannot open " + path.string());
    char magic[6];
    is.read(magic, sizeof(magic));
    if (!is || !std::equal(magic, magic + 6, kMagic))
        throw ConfigError("checkpoint: bad magic in " + path.string());
    FieldSpec spec;
    spec.input_dim = static_cast<int>(read_u32(is));
    spec.time_embed_dim = static_cast<int>(read_u32(is));
    const std::uint32_t act = read_u32(is);
    if (act > 1) throw ConfigError("checkpoint: unknown activation tag");
    spec.activation = act == 0 ? Activation::silu : Activation::tanh;
    const std::uint32_t n_hidden = read_u32(is);
    if (!is || n_hidden > 1024) throw ConfigError("checkpoint: corrupt header");
    spec.hidden_dims.clear();
    for (std::uint32_t i = 0; i < n_hidden; ++i) spec.hidden_dims.push_back(static_cast<int>(read_u32(is)));
    VelocityField f(spec);
    Vec flat(f.param_count());
    for (Index i = 0; i < flat.size(); ++i) flat[i] = read_f64(is);
    if (!is) throw ConfigError("checkpoint: truncated parameter block");
    f.set_params_flat(flat);
    return f;
}

}  // namespace cflow
