#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "neuroloc/geometry.hpp"

namespace neuroloc {

enum class InverseMethod { mne, dspm, sloreta, eloreta, pinv };

std::string method_name(InverseMethod m);
InverseMethod method_from_name(const std::string& name);

// A linear source estimator x_hat = reshape(kernel * y). `alpha` is the
// absolute Tikhonov level actually added to the Gram diagonal (inputs are
// relative: alpha_rel * trace(Gram)/M, which makes the regularization
// strength unit-free). For eloreta, `converged` reports the fixed point
// iteration; for sloreta it is false iff a singular resolution block needed
// diagonal jitter.
struct PseudoInverseOperator {
    Matrix kernel;  // 3N x M
    InverseMethod method = InverseMethod::mne;
    double alpha = 0.0;
    int iterations_used = 0;
    bool converged = true;
    std::uint64_t leadfield_digest = 0;  // which lead field built this kernel

    int n_sources() const { return static_cast<int>(kernel.rows()) / 3; }
    int n_sensors() const { return static_cast<int>(kernel.cols()); }
};

// Method + regularization pair, e.g. picked on the command line or recorded
// in a checkpoint so the same operator can be rebuilt later.
struct OperatorSpec {
    InverseMethod method = InverseMethod::eloreta;
    double reg = 0.05;  // alpha_rel for (weighted) minimum norm, rcond for pinv
};

PseudoInverseOperator build_operator(const OperatorSpec& spec, const LeadField& lf);

// Minimum-norm estimate kernel K = L^T (L L^T + alpha I)^-1.
PseudoInverseOperator mne_operator(const LeadField& lf, double alpha_rel);

// Noise-normalized variants built on the MNE kernel. dspm: rows scaled to
// unit norm (identity noise covariance). sloreta: per-voxel 3x3 blocks of
// the resolution matrix R = K0 L whiten the kernel via the symmetric PSD
// inverse square root.
PseudoInverseOperator normalized_operator(const LeadField& lf, double alpha_rel,
                                          InverseMethod variant);

// eLORETA fixed point: per-voxel symmetric weights W_i, M = pinv(L W^-1 L^T
// + alpha H) with the average-reference centering H = I - 11^T/M, updated by
// W_i <- sym_sqrt(L_i^T M L_i) until the largest relative weight change
// drops below tol. Kernel K = W^-1 L^T M.
PseudoInverseOperator eloreta_operator(const LeadField& lf, double reg, double tol = 1e-6,
                                       int max_iter = 100);

// Moore-Penrose pseudo-inverse via SVD, truncating singular values below
// rcond * sigma_max.
PseudoInverseOperator pinv_operator(const LeadField& lf, double rcond);

// Reshape kernel * y into the N x 3 source layout.
Matrix apply(const PseudoInverseOperator& op, const Vector& y);

// Zero out dead sensor rows of the lead field and the matching entries of y;
// operators must then be rebuilt from the masked lead field.
struct MaskedProblem {
    LeadField lf;
    Vector y;
};
MaskedProblem mask_sensors(const LeadField& lf, const Vector& y, const std::vector<int>& dead);

// Symmetric PSD square root / inverse via eigendecomposition (negative
// eigenvalues from roundoff are clamped to zero).
Eigen::Matrix3d sym_sqrt(const Eigen::Matrix3d& a);
Eigen::Matrix3d sym_pinv(const Eigen::Matrix3d& a, double rcond = 1e-12);

void save_operator(const PseudoInverseOperator& op, const std::filesystem::path& path);
PseudoInverseOperator load_operator(const std::filesystem::path& path);

}  // namespace neuroloc
