#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "neuroloc/geometry.hpp"
#include "neuroloc/simulate.hpp"

namespace neuroloc {

// ---------------------------------------------------------------------------
// Experiment description
// ---------------------------------------------------------------------------

// Sweep harness.  Kinds and their grid axes:
//   snr_sweep        noise level in dB            (default {0,10,20,30,40})
//   extent_sweep     source width in mm, run at both 5 dB and 20 dB
//                                                 (default {10,20,40,80})
//   count_sweep      exact number of active sources (default {1,2,3,4,5})
//   missing_sensors  number of zeroed-out sensors (default {11}),
//                    repeated over `masks` random subsets
//   method_table     single condition: single sources, 20 dB, mixed extent
struct Experiment {
    std::string kind = "method_table";
    std::vector<double> grid;  // empty -> per-kind default above
    std::vector<std::string> methods{"eloreta", "lasso", "fcn", "piunet"};
    std::vector<std::string> metrics{"nmse", "nemd", "wcos"};
    int eval_size = 200;
    std::uint64_t seed = 0;
    int threads = 1;   // worker threads over grid points; output order is fixed
    int masks = 5;     // random dead-sensor subsets (missing_sensors only)
    double op_reg = 0.05;       // regularization of linear operators
    int lasso_max_iter = 2000;  // per-sample solver budget
    double lasso_tol = 1e-8;
    std::string precision = "f32";  // dtype of the checkpoints to load
    std::filesystem::path piunet_checkpoint;
    std::filesystem::path fcn_checkpoint;
    std::filesystem::path out = "bench_out";
    SimConfig sim;  // base activation distribution; kinds override axes

    Experiment();
    void validate() const;
};

std::vector<double> default_grid(const std::string& kind);

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

// One CSV row: columns experiment, grid_value, method, metric, mean, std, n,
// wallclock_s.  wallclock_s is the measured per-method inference time for the
// grid point and is the only field that varies between identical re-runs.
struct BenchRow {
    std::string experiment;
    std::string grid_value;
    std::string method;
    std::string metric;
    double mean = 0.0;
    double stddev = 0.0;
    int n = 0;
    double wallclock_s = 0.0;
};

struct BenchReport {
    std::vector<BenchRow> rows;
    std::filesystem::path csv;              // <out>/results.csv
    std::filesystem::path json;             // <out>/results.json
    std::filesystem::path resolved_config;  // <out>/resolved-config.json
    double chosen_lasso_rel = 0.0;  // lambda/lambda_max picked on training data
};

// Runs the experiment.  Evaluation data is generated exclusively from
// lf_eval (the perturbed lead field); operators, the lasso penalty search,
// and model checkpoints belong to lf_train.
BenchReport run_experiment(const Experiment& e, const LeadField& lf_train,
                           const LeadField& lf_eval);

// Config (de)serialization; the emitted resolved-config.json loads back into
// an identical Experiment, so re-running it reproduces every deterministic
// CSV field.
Experiment load_experiment(const std::filesystem::path& json_path);
void write_experiment(const std::filesystem::path& json_path, const Experiment& e,
                      std::uint64_t lf_train_digest, std::uint64_t lf_eval_digest,
                      double chosen_lasso_rel);

// First `n` samples of the stream whose active-source count is exactly
// `count` (walking sample indices in order keeps this deterministic).
std::vector<Sample> exact_count_samples(const SimConfig& sim, const LeadField& lf,
                                        int count, int n);

}  // namespace neuroloc
