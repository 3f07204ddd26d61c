#include "cflow/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

namespace cflow {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = 0;
    std::size_t b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

// Raw "[section] key = value" storage with consumption tracking, so any
// key the typed config does not recognize can be reported.
class KeyValues {
public:
    void insert(const std::string& section, const std::string& key, const std::string& value,
                int line) {
        const std::string full = section + "." + key;
        if (values_.count(full))
            throw ConfigError("config: duplicate key '" + full + "' at line " +
                              std::to_string(line));
        values_[full] = value;
    }

    bool has(const std::string& full) const { return values_.count(full) > 0; }

    std::string take(const std::string& full, const std::string& fallback) {
        auto it = values_.find(full);
        if (it == values_.end()) return fallback;
        consumed_.push_back(full);
        std::string v = it->second;
        values_.erase(it);
        return v;
    }

    void finish() const {
        if (!values_.empty())
            throw ConfigError("config: unknown key '" + values_.begin()->first + "'");
    }

private:
    std::map<std::string, std::string> values_;
    std::vector<std::string> consumed_;
};

Real to_real(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        const Real r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
    }
}

long long to_ll(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        const long long r = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config: '" + key + "' expects an integer, got '" + v + "'");
    }
}

std::uint64_t to_u64(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        const std::uint64_t r = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config: '" + key + "' expects an unsigned integer, got '" + v + "'");
    }
}

bool to_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config: '" + key + "' expects true/false, got '" + v + "'");
}

std::vector<std::string> split(const std::string& v, char sep) {
    std::vector<std::string> out;
    std::istringstream is(v);
    std::string item;
    while (std::getline(is, item, sep)) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::vector<Real> to_real_list(const std::string& v, const std::string& key) {
    std::vector<Real> out;
    for (const auto& item : split(v, ',')) out.push_back(to_real(item, key));
    return out;
}

Method to_method(const std::string& v, const std::string& key) {
    if (v == "euler") return Method::euler;
    if (v == "heun") return Method::heun;
    if (v == "rk45") return Method::rk45;
    throw ConfigError("config: '" + key + "' expects euler/heun/rk45, got '" + v + "'");
}

Distribution parse_dataset(KeyValues& kv) {
    const std::string kind = kv.take("dataset.kind", "two_moons");
    const int dim = static_cast<int>(to_ll(kv.take("dataset.dim", "2"), "dataset.dim"));
    const Real moon_noise = to_real(kv.take("dataset.moon_noise", "0.05"), "dataset.moon_noise");
    const std::string means_s = kv.take("dataset.mixture_means", "");
    const std::string weights_s = kv.take("dataset.mixture_weights", "");
    const std::string scales_s = kv.take("dataset.mixture_scale", "0.3");

    if (kind == "standard_gaussian") return Distribution::standard_gaussian(dim);
    if (kind == "two_moons") return Distribution::two_moons(moon_noise);
    if (kind == "checkerboard") return Distribution::checkerboard();
    if (kind == "gaussian_mixture") {
        if (means_s.empty())
            throw ConfigError("config: gaussian_mixture needs dataset.mixture_means");
        std::vector<MixtureComponent> comps;
        const auto mean_groups = split(means_s, ';');
        const auto weights = weights_s.empty()
                                 ? std::vector<Real>(mean_groups.size(), 1.0)
                                 : to_real_list(weights_s, "dataset.mixture_weights");
        auto scales = to_real_list(scales_s, "dataset.mixture_scale");
        if (scales.size() == 1) scales.assign(mean_groups.size(), scales.front());
        if (weights.size() != mean_groups.size() || scales.size() != mean_groups.size())
            throw ConfigError("config: mixture weights/scales must match the mean count");
        for (std::size_t c = 0; c < mean_groups.size(); ++c) {
            const auto coords = to_real_list(mean_groups[c], "dataset.mixture_means");
            MixtureComponent comp;
            comp.weight = weights[c];
            comp.mean = Eigen::Map<const Vec>(coords.data(), static_cast<Index>(coords.size()));
            comp.cov = scales[c] * scales[c] *
                       Mat::Identity(comp.mean.size(), comp.mean.size());
            comps.push_back(std::move(comp));
        }
        return Distribution::gaussian_mixture(std::move(comps));
    }
    throw ConfigError("config: unknown dataset kind '" + kind + "'");
}

}  // namespace

void ExperimentConfig::validate() const {
    if (procedure != "original" && procedure != "balanced_conic")
        throw ConfigError("config: procedure must be original or balanced_conic");
    if (base_steps < 0 || reflow_steps < 0) throw ConfigError("config: step counts must be non-negative");
    if (reflow_rounds < 0) throw ConfigError("config: reflow rounds must be non-negative");
    if (batch_size < 1) throw ConfigError("config: batch_size must be positive");
    if (!(lr > 0)) throw ConfigError("config: lr must be positive");
    if (!(ema_decay >= 0 && ema_decay < 1)) throw ConfigError("config: ema_decay must lie in [0, 1)");
    if (!(time_dist_a > 0)) throw ConfigError("config: time_dist_a must be positive");
    if (n_fake < 1 || n_real < 1) throw ConfigError("config: pair counts must be positive");
    if (repair_interval < 0) throw ConfigError("config: repair_interval must be non-negative");
    if (k_updates < 1) throw ConfigError("config: k_updates must be at least 1");
    if (!(warmup_frac >= 0 && warmup_frac <= 1))
        throw ConfigError("config: warmup_frac must lie in [0, 1]");
    for (Real z : zeta_grid)
        if (!(z > 0 && z <= 0.5)) throw ConfigError("config: zeta grid values must lie in (0, 0.5]");
    if (zeta_search_samples < 1) throw ConfigError("config: zeta_search_samples must be positive");
    if (!(w_t > 0)) throw ConfigError("config: w_t must be positive");
    if (metric_samples < 1) throw ConfigError("config: metric_samples must be positive");
    if (gmm_components < 1 || gmm_iters < 1) throw ConfigError("config: GMM settings must be positive");
    if (kl_mc_samples < 2) throw ConfigError("config: kl_mc_samples must be at least 2");
    if (recon_epsilon < 0) throw ConfigError("config: recon_epsilon must be non-negative");
    if (curvature_nodes < 2) throw ConfigError("config: curvature_nodes must be at least 2");
    if (distill_epochs < 1 || distill_pairs < 1) throw ConfigError("config: distill settings must be positive");
    if (sample_count < 1) throw ConfigError("config: sample_count must be positive");
    if (drift_rounds < 1) throw ConfigError("config: drift_rounds must be positive");
    if (out_dir.empty()) throw ConfigError("config: out_dir must be non-empty");
}

ExperimentConfig parse_config_text(const std::string& text) {
    KeyValues kv;
    std::istringstream is(text);
    std::string line;
    std::string section = "run";
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']')
                throw ConfigError("config: malformed section at line " + std::to_string(lineno));
            section = trim(t.substr(1, t.size() - 2));
            if (section.empty())
                throw ConfigError("config: empty section name at line " + std::to_string(lineno));
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: expected key = value at line " + std::to_string(lineno));
        const std::string key = trim(t.substr(0, eq));
        const std::string value = trim(t.substr(eq + 1));
        if (key.empty())
            throw ConfigError("config: empty key at line " + std::to_string(lineno));
        kv.insert(section, key, value, lineno);
    }

    ExperimentConfig cfg;

    // Conic-only keys are rejected for the plain procedure.
    const std::string procedure = kv.take("reflow.procedure", "original");
    const char* conic_keys[] = {"reflow.n_real",       "reflow.repair_interval",
                                "reflow.k_updates",    "reflow.warmup_frac",
                                "reflow.zeta_grid",    "reflow.zeta_search_samples",
                                "reflow.w_t"};
    if (procedure == "original")
        for (const char* key : conic_keys)
            if (kv.has(key))
                throw ConfigError(std::string("config: '") + key +
                                  "' applies only to the balanced_conic procedure");

    cfg.target = parse_dataset(kv);

    const auto hidden = to_real_list(kv.take("network.hidden_dims", "128,128,128"),
                                     "network.hidden_dims");
    cfg.field.hidden_dims.clear();
    for (Real h : hidden) cfg.field.hidden_dims.push_back(static_cast<int>(h));
    cfg.field.input_dim = cfg.target.dim;
    cfg.field.time_embed_dim = static_cast<int>(
        to_ll(kv.take("network.time_embed_dim", "32"), "network.time_embed_dim"));
    const std::string act = kv.take("network.activation", "silu");
    if (act == "silu")
        cfg.field.activation = Activation::silu;
    else if (act == "tanh")
        cfg.field.activation = Activation::tanh;
    else
        throw ConfigError("config: unknown activation '" + act + "'");

    cfg.base_steps = to_ll(kv.take("train.base_steps", "3000"), "train.base_steps");
    cfg.batch_size = to_ll(kv.take("train.batch_size", "256"), "train.batch_size");
    cfg.lr = to_real(kv.take("train.lr", "0.001"), "train.lr");
    cfg.ema_decay = to_real(kv.take("train.ema_decay", "0.999"), "train.ema_decay");
    cfg.time_dist_a = to_real(kv.take("train.time_dist_a", "3.0"), "train.time_dist_a");

    cfg.procedure = procedure;
    cfg.reflow_rounds = static_cast<int>(to_ll(kv.take("reflow.rounds", "1"), "reflow.rounds"));
    cfg.reflow_steps = to_ll(kv.take("reflow.steps", "3000"), "reflow.steps");
    cfg.n_fake = to_ll(kv.take("reflow.n_fake", "4000"), "reflow.n_fake");
    cfg.n_real = to_ll(kv.take("reflow.n_real", "1000"), "reflow.n_real");
    cfg.repair_interval = to_ll(kv.take("reflow.repair_interval", "500"), "reflow.repair_interval");
    cfg.k_updates = static_cast<int>(to_ll(kv.take("reflow.k_updates", "4"), "reflow.k_updates"));
    cfg.warmup_frac = to_real(kv.take("reflow.warmup_frac", "0.1"), "reflow.warmup_frac");
    const std::string grid_s = kv.take("reflow.zeta_grid", "");
    if (!grid_s.empty()) cfg.zeta_grid = to_real_list(grid_s, "reflow.zeta_grid");
    cfg.zeta_search_samples =
        to_ll(kv.take("reflow.zeta_search_samples", "500"), "reflow.zeta_search_samples");
    cfg.w_t = to_real(kv.take("reflow.w_t", "1.0"), "reflow.w_t");

    cfg.train_solver.method = to_method(kv.take("solver.train_method", "euler"), "solver.train_method");
    cfg.train_solver.n_steps =
        static_cast<int>(to_ll(kv.take("solver.train_steps", "100"), "solver.train_steps"));
    cfg.eval_solver.method = to_method(kv.take("solver.eval_method", "euler"), "solver.eval_method");
    cfg.eval_solver.n_steps =
        static_cast<int>(to_ll(kv.take("solver.eval_steps", "100"), "solver.eval_steps"));
    const Real rtol = to_real(kv.take("solver.rtol", "1e-5"), "solver.rtol");
    const Real atol = to_real(kv.take("solver.atol", "1e-5"), "solver.atol");
    cfg.train_solver.rtol = cfg.eval_solver.rtol = rtol;
    cfg.train_solver.atol = cfg.eval_solver.atol = atol;

    cfg.metric_samples = to_ll(kv.take("eval.metric_samples", "10000"), "eval.metric_samples");
    cfg.gmm_components =
        static_cast<int>(to_ll(kv.take("eval.gmm_components", "8"), "eval.gmm_components"));
    cfg.gmm_iters = static_cast<int>(to_ll(kv.take("eval.gmm_iters", "200"), "eval.gmm_iters"));
    cfg.kl_mc_samples = to_ll(kv.take("eval.kl_mc_samples", "100000"), "eval.kl_mc_samples");
    cfg.recon_epsilon = to_real(kv.take("eval.recon_epsilon", "0.05"), "eval.recon_epsilon");
    cfg.curvature_nodes =
        static_cast<int>(to_ll(kv.take("eval.curvature_nodes", "100"), "eval.curvature_nodes"));

    cfg.seed = to_u64(kv.take("run.seed", "1"), "run.seed");
    cfg.out_dir = kv.take("run.out_dir", "out");
    cfg.quiet = to_bool(kv.take("run.quiet", "false"), "run.quiet");
    cfg.run_distill = to_bool(kv.take("run.distill", "false"), "run.distill");
    cfg.distill_epochs =
        static_cast<int>(to_ll(kv.take("run.distill_epochs", "60"), "run.distill_epochs"));
    cfg.distill_pairs = to_ll(kv.take("run.distill_pairs", "4000"), "run.distill_pairs");
    cfg.sample_count = to_ll(kv.take("run.sample_count", "2000"), "run.sample_count");
    cfg.drift_rounds =
        static_cast<int>(to_ll(kv.take("run.drift_rounds", "3"), "run.drift_rounds"));

    kv.finish();
    cfg.validate();
    return cfg;
}

ExperimentConfig parse_config_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path.string());
    std::ostringstream buffer;
    buffer << is.rdbuf();
    return parse_config_text(buffer.str());
}

}  // namespace cflow
