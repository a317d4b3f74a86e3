#pragma once

// Sparse source estimation: group lasso over per-voxel 3-vectors, solved with
// accelerated proximal gradient descent (FISTA) plus gradient-based adaptive
// restart.  The objective is
//
//   F(x) = 1/2 * || y - L vec(x) ||^2  +  lambda * sum_i || x_i ||_2
//
// where x_i is the 3-vector of voxel i.  The proximal step thresholds whole
// voxel blocks, so inactive voxels are exactly zero in the solution.

#include <vector>

#include "neuroloc/geometry.hpp"

namespace neuroloc {

struct GroupLassoProblem {
    const LeadField* lf = nullptr;
    Vector y;
    double lambda = 0.0;
    int max_iter = 10000;
    double tol = 1e-10;

    void validate() const;
};

struct GroupLassoOptions {
    // FISTA momentum; disabling falls back to plain proximal gradient descent,
    // which has a monotone non-increasing objective.
    bool accelerated = true;
    // Gradient-based adaptive restart of the momentum sequence; only
    // meaningful when accelerated.
    bool adaptive_restart = true;
    // When set, receives the objective value after every iteration.
    std::vector<double>* objective_trace = nullptr;
};

struct GroupLassoDiagnostics {
    int iterations = 0;
    double objective = 0.0;
    double kkt_residual = 0.0;
    bool converged = false;  // stopped on the tolerance, not on max_iter
};

struct GroupLassoResult {
    Matrix x;  // N x 3
    GroupLassoDiagnostics diagnostics;
};

// First-order optimality report for a candidate solution.  For active voxels
// the correlation L_i^T (y - L vec(x)) must align with lambda * x_i/||x_i||;
// for inactive voxels its norm must not exceed lambda.  Both residuals are
// reported relative to lambda (absolute when lambda == 0).
struct KktReport {
    double max_active = 0.0;
    double max_inactive = 0.0;
    double overall() const { return max_active > max_inactive ? max_active : max_inactive; }
};

// lambda_max = max_i || L_i^T y ||_2 : the smallest penalty for which the
// all-zero field is optimal.
double lambda_max(const LeadField& lf, const Vector& y);

// Relative penalty grid used by the benchmark's hyperparameter search.
inline constexpr double kLambdaGridRel[4] = {0.01, 0.03, 0.1, 0.3};

double group_lasso_objective(const LeadField& lf, const Vector& y, const Matrix& x,
                             double lambda);

KktReport check_kkt(const LeadField& lf, const Vector& y, const Matrix& x, double lambda);

GroupLassoResult solve_group_lasso(const GroupLassoProblem& p,
                                   const GroupLassoOptions& opts = {});

}  // namespace neuroloc
