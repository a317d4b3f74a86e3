#pragma once

// Evaluation metrics for source estimates:
//   nmse          squared error normalized by ground-truth energy
//   weighted_cos  amplitude-weighted cosine distance of voxel orientations
//   nemd          earth-mover's distance between normalized amplitude maps,
//                 divided by the EMD from the truth to a uniform map
//
// The transport solver is exact (successive shortest augmenting paths with
// node potentials, equivalent to network simplex on the transportation
// polytope).  An entropic approximation is available separately for large
// problems but is never used by the metrics themselves.

#include <vector>

#include "neuroloc/geometry.hpp"

namespace neuroloc {

struct TransportProblem {
    Vector supply;  // n nonnegative masses summing to 1
    Vector demand;  // n nonnegative masses summing to 1
    Matrix cost;    // n x n, symmetric, zero diagonal

    void validate() const;
};

struct TransportPlanEntry {
    int from = 0;
    int to = 0;
    double mass = 0.0;
};

struct EmdResult {
    double cost = 0.0;
    std::vector<TransportPlanEntry> plan;
};

EmdResult emd_exact(const TransportProblem& p);

// Log-domain Sinkhorn approximation with entropic regularization
// epsilon_rel * mean(cost); returns the transport cost of the smoothed plan.
double emd_sinkhorn(const TransportProblem& p, double epsilon_rel = 1e-3,
                    int iterations = 1000);

double nmse(const Matrix& x, const Matrix& xhat);

double weighted_cos(const Matrix& x, const Matrix& xhat);

// Per-voxel amplitude distribution ||x_i|| / sum_j ||x_j||.
Vector normalized_amplitudes(const Matrix& x);

// Euclidean distances (mm) between all pairs of voxel centers.
Matrix pairwise_distances(const SourceSpace& space);

// EMD between two amplitude distributions under a shared cost matrix.
double emd_between(const Vector& a, const Vector& b, const Matrix& cost);

double nemd(const Matrix& x, const Matrix& xhat, const SourceSpace& space);

// NEMD evaluator for batches over one source space: caches the distance
// matrix and applies the exact common-mass reduction (valid because Euclidean
// distances obey the triangle inequality, so shared mass optimally stays in
// place).  Values match nemd() up to solver rounding (~1e-12).
class NemdEvaluator {
  public:
    explicit NemdEvaluator(const SourceSpace& space);
    double operator()(const Matrix& x, const Matrix& xhat);
    // Split form for callers scoring several estimates against one truth:
    // nemd = numerator(x, xhat) / denominator(x).
    double numerator(const Matrix& x, const Matrix& xhat);
    double denominator(const Matrix& x);
    int n_voxels() const { return static_cast<int>(cost_.rows()); }

  private:
    Matrix cost_;
};

}  // namespace neuroloc
