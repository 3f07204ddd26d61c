#pragma once

#include "cflow/dataset.hpp"
#include "cflow/nn.hpp"
#include "cflow/ode.hpp"
#include "cflow/types.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace cflow {

// One declarative file drives every pipeline stage. Format: "[section]"
// headers and "key = value" lines, '#' or ';' comments. Unknown keys are
// rejected; fields of the conic procedure are rejected when the plain
// procedure is selected.
struct ExperimentConfig {
    // dataset
    Distribution target = Distribution::two_moons();

    // network
    FieldSpec field;

    // train
    Index base_steps = 3000;
    Index batch_size = 256;
    Real lr = 1e-3;
    Real ema_decay = 0.999;
    Real time_dist_a = 3.0;  // reflow objectives; the base flow uses uniform t

    // reflow
    std::string procedure = "original";  // original | balanced_conic
    int reflow_rounds = 1;
    Index reflow_steps = 3000;
    Index n_fake = 4000;
    Index n_real = 1000;
    Index repair_interval = 500;
    int k_updates = 4;
    Real warmup_frac = 0.1;
    std::vector<Real> zeta_grid;  // empty = 10 equispaced points in (0, 0.5]
    Index zeta_search_samples = 500;
    Real w_t = 1.0;

    // solver
    SolverConfig train_solver;  // transports during training and pair generation
    SolverConfig eval_solver;   // sampling for metrics

    // eval
    Index metric_samples = 10000;
    int gmm_components = 8;
    int gmm_iters = 200;
    Index kl_mc_samples = 100000;
    Real recon_epsilon = 0.05;
    int curvature_nodes = 100;

    // run
    std::uint64_t seed = 1;
    std::string out_dir = "out";
    bool quiet = false;
    bool run_distill = false;
    int distill_epochs = 60;
    Index distill_pairs = 4000;
    Index sample_count = 2000;
    int drift_rounds = 3;

    void validate() const;
};

ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config_file(const std::filesystem::path& path);

}  // namespace cflow
