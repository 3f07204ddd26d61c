#pragma once

#include "cflow/config.hpp"
#include "cflow/metrics.hpp"
#include "cflow/reflow.hpp"
#include "cflow/types.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace cflow {

// Sequential experiment driver. Every stage seeds its draws from the master
// seed through a purpose tag, so evaluation randomness is shared across
// rectification orders and reruns of one config reproduce byte-identical
// CSV output. Artifacts land in config.out_dir and are listed with content
// hashes in manifest.txt.
class Pipeline {
public:
    explicit Pipeline(ExperimentConfig cfg);

    const ExperimentConfig& config() const { return cfg_; }
    const std::filesystem::path& out_dir() const { return out_; }

    VelocityField train_base();
    // One rectification round on top of prev; k >= 2 names the artifacts.
    VelocityField reflow_round(const VelocityField& prev, int k);
    MetricsReport evaluate(const VelocityField& f, int k);
    void sample_artifacts(const VelocityField& f, int k);
    VelocityField distill_stage(const VelocityField& teacher, int k);

    // train base -> reflow rounds -> per-order metrics -> samples
    // (-> optional distillation) -> metrics.csv + manifest.
    void run();

    // Plain-procedure rectification ladder with a KL-vs-order table,
    // including an untrained k = 0 reference row, plus per-order scatters.
    void drift_demo();

    void write_metrics_csv();
    void write_manifest();

    const std::vector<MetricsReport>& metrics() const { return metrics_; }

private:
    std::uint64_t tag_seed(const std::string& tag) const;
    std::filesystem::path artifact(const std::string& name);
    void write_train_log(const std::string& name, const std::vector<TrainLogRow>& rows);
    void save_field(const std::string& name, const VelocityField& f);
    void log_line(const std::string& msg) const;
    void scatter_artifact(const std::string& name, const Mat& generated, const Mat& target,
                          const std::string& title);

    template <typename Fn>
    auto stage(const std::string& name, Fn&& fn);

    ExperimentConfig cfg_;
    std::filesystem::path out_;
    std::vector<std::filesystem::path> artifacts_;
    std::vector<MetricsReport> metrics_;
};

// Runs the configured pipeline; throws ConfigError / NumericalError upward.
void run_pipeline(const ExperimentConfig& cfg);

// 64-bit FNV-1a over a file's bytes, manifest currency.
std::uint64_t file_hash(const std::filesystem::path& path);

}  // namespace cflow
