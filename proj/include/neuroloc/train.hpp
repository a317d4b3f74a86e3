#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "neuroloc/autodiff.hpp"
#include "neuroloc/checkpoint.hpp"
#include "neuroloc/fcn_baseline.hpp"
#include "neuroloc/lininv.hpp"
#include "neuroloc/piunet.hpp"
#include "neuroloc/simulate.hpp"

namespace neuroloc {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
    std::int64_t steps = 5000;
    int batch = 8;
    double lr = 1e-4;
    ad::LossKind loss_kind = ad::LossKind::l1;
    double lambda_rec = 1e-4;     // weight of the measurement-consistency term
    std::uint64_t seed = 0;
    SimConfig sim;                // per-step sample stream (base_seed is derived)
    std::int64_t eval_every = 500;
    int eval_samples = 200;
    OperatorSpec op;
    int threads = 1;              // sample-generation workers; results identical

    void validate() const;

    // Small preset that trains in well under an hour on one core: single
    // sources at a fixed 20 dB noise level, 5000 steps of batch 8 at lr 1e-4.
    static TrainConfig desk();
    // Full-size preset (kept behind an explicit choice: days of compute).
    static TrainConfig full_scale();
};

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

struct EvalMetrics {
    double nmse = std::numeric_limits<double>::quiet_NaN();
    double nemd = std::numeric_limits<double>::quiet_NaN();
    double wcos = std::numeric_limits<double>::quiet_NaN();
};

struct TrainLogRow {
    std::int64_t step = 0;
    bool has_loss = false;
    double loss = std::numeric_limits<double>::quiet_NaN();
    bool has_eval = false;
    EvalMetrics eval;
    double wallclock_s = 0.0;
};

struct TrainResult {
    std::vector<TrainLogRow> log;   // one row per eval-or-train event, by step
    EvalMetrics step0;              // held-out metrics before any update
    EvalMetrics final_eval;         // held-out metrics at the last eval point
    std::filesystem::path final_checkpoint;
    std::filesystem::path last_checkpoint;
    std::filesystem::path log_csv;
    bool aborted_nan = false;       // loss became non-finite; training stopped
    std::int64_t last_good_step = 0;
    std::uint64_t train_digest = 0;  // lead field behind the operator + samples
    std::uint64_t eval_digest = 0;   // perturbed lead field behind held-out data
    std::uint64_t op_digest = 0;     // lead field the operator was built from
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

// Rebuilds the exact held-out evaluation set used inside train(): sample i is
// a pure function of (cfg.seed, cfg.sim, i) and of the evaluation lead field.
std::vector<Sample> make_eval_set(const TrainConfig& cfg, const LeadField& lf_eval);

// Truth field of a sample as an N x 3 matrix (rows follow voxel order).
Matrix sample_source_field(const Sample& s, int n_sources);

// Trains the refinement network: every step draws a fresh batch from
// lf_train, runs operator -> lattice -> network -> refined field, and takes
// one Adam step on the chosen loss.  Held-out metrics come from samples of
// lf_eval (which must differ from lf_train) scored against model predictions;
// checkpoints land in out_dir at every eval point and at the end.
template <typename S>
TrainResult train_piunet(const TrainConfig& cfg, const LeadField& lf_train,
                         const LeadField& lf_eval, PiuNetModel<S>& model,
                         const std::filesystem::path& out_dir);

// Same loop for the dense direct-regression baseline (no operator input).
template <typename S>
TrainResult train_fcn(const TrainConfig& cfg, const LeadField& lf_train,
                      const LeadField& lf_eval, FcnModel<S>& model,
                      const std::filesystem::path& out_dir);

void write_train_log_csv(const std::filesystem::path& path,
                         const std::vector<TrainLogRow>& log);

// ---------------------------------------------------------------------------
// Loss ablation
// ---------------------------------------------------------------------------

struct LossComparisonRow {
    ad::LossKind kind = ad::LossKind::l1;
    std::int64_t step = 0;
    EvalMetrics eval;
};

// Trains one network per loss kind from an identical initialization and seed,
// returning the held-out metrics at every eval point (|kinds| x eval points
// rows) and writing them to out_dir/loss_report.csv.
std::vector<LossComparisonRow> compare_losses(const TrainConfig& base,
                                              const PiuNetConfig& model_cfg,
                                              const LeadField& lf_train,
                                              const LeadField& lf_eval,
                                              const std::vector<ad::LossKind>& kinds,
                                              const std::filesystem::path& out_dir);

}  // namespace neuroloc
