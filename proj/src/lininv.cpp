#include "neuroloc/lininv.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "neuroloc/error.hpp"
#include "neuroloc/nlt1.hpp"

namespace neuroloc {

using nlohmann::json;

std::string method_name(InverseMethod m) {
    switch (m) {
        case InverseMethod::mne: return "mne";
        case InverseMethod::dspm: return "dspm";
        case InverseMethod::sloreta: return "sloreta";
        case InverseMethod::eloreta: return "eloreta";
        case InverseMethod::pinv: return "pinv";
    }
    fail_usage("unknown inverse method tag");
}

InverseMethod method_from_name(const std::string& name) {
    if (name == "mne") return InverseMethod::mne;
    if (name == "dspm") return InverseMethod::dspm;
    if (name == "sloreta") return InverseMethod::sloreta;
    if (name == "eloreta") return InverseMethod::eloreta;
    if (name == "pinv") return InverseMethod::pinv;
    fail_usage("unknown inverse method: " + name);
}

namespace {

void check_gain(const LeadField& lf) {
    require(lf.gain.rows() >= 1 && lf.gain.cols() >= 3 && lf.gain.cols() % 3 == 0,
            ErrorKind::data, "lead field gain must be M x 3N");
    require(lf.gain.allFinite(), ErrorKind::data, "lead field gain must be finite");
}

// Symmetric pseudo-inverse of an M x M matrix, truncating eigenvalues with
// |lambda| < rcond * max|lambda|. Average-referenced lead fields make the
// sensor Gram exactly singular along the constant vector, so plain inversion
// is never available here.
Matrix sym_pinv_full(const Matrix& a, double rcond) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (a + a.transpose()));
    require(es.info() == Eigen::Success, ErrorKind::numeric, "eigendecomposition failed");
    const Vector& lam = es.eigenvalues();
    const double lmax = lam.cwiseAbs().maxCoeff();
    Vector inv = Vector::Zero(lam.size());
    for (int i = 0; i < lam.size(); ++i)
        if (std::abs(lam(i)) > rcond * lmax) inv(i) = 1.0 / lam(i);
    return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

Eigen::Matrix3d sym_sqrt(const Eigen::Matrix3d& a) {
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(0.5 * (a + a.transpose()));
    require(es.info() == Eigen::Success, ErrorKind::numeric, "3x3 eigendecomposition failed");
    Eigen::Vector3d lam = es.eigenvalues();
    for (int i = 0; i < 3; ++i) lam(i) = std::sqrt(std::max(0.0, lam(i)));
    return es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
}

Eigen::Matrix3d sym_pinv(const Eigen::Matrix3d& a, double rcond) {
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(0.5 * (a + a.transpose()));
    require(es.info() == Eigen::Success, ErrorKind::numeric, "3x3 eigendecomposition failed");
    Eigen::Vector3d lam = es.eigenvalues();
    const double lmax = lam.cwiseAbs().maxCoeff();
    Eigen::Vector3d inv = Eigen::Vector3d::Zero();
    for (int i = 0; i < 3; ++i)
        if (std::abs(lam(i)) > rcond * lmax) inv(i) = 1.0 / lam(i);
    return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

PseudoInverseOperator mne_operator(const LeadField& lf, double alpha_rel) {
    check_gain(lf);
    require(alpha_rel >= 0, ErrorKind::data, "regularization must be nonnegative");
    const Matrix& L = lf.gain;
    const int m = static_cast<int>(L.rows());
    const Matrix gram = L * L.transpose();

    PseudoInverseOperator op;
    op.method = InverseMethod::mne;
    op.leadfield_digest = lf.digest();
    op.alpha = alpha_rel * gram.trace() / m;
    if (alpha_rel == 0.0) {
        // An average-referenced gain has exactly zero column sums, so the Gram
        // is singular along the constant vector; LU pivot thresholds miss this
        // by a hair, hence an explicit spectral rcond test.
        Eigen::SelfAdjointEigenSolver<Matrix> es(gram);
        require(es.info() == Eigen::Success, ErrorKind::numeric,
                "eigendecomposition of the sensor Gram failed");
        const double lmax = es.eigenvalues().cwiseAbs().maxCoeff();
        const double lmin = es.eigenvalues().minCoeff();
        require(lmax > 0 && lmin > 1e-12 * lmax, ErrorKind::numeric,
                "sensor Gram matrix is singular; use alpha > 0 for regularization");
        op.kernel =
            (es.eigenvectors() *
             es.eigenvalues().cwiseInverse().asDiagonal() *
             (es.eigenvectors().transpose() * L))
                .transpose();
    } else {
        Matrix reg = gram;
        reg.diagonal().array() += op.alpha;
        Eigen::LLT<Matrix> llt(reg);
        require(llt.info() == Eigen::Success, ErrorKind::numeric,
                "regularized sensor Gram is not positive definite");
        op.kernel = (llt.solve(L)).transpose();
    }
    require(op.kernel.allFinite(), ErrorKind::numeric, "mne kernel is not finite");
    return op;
}

PseudoInverseOperator normalized_operator(const LeadField& lf, double alpha_rel,
                                          InverseMethod variant) {
    require(variant == InverseMethod::dspm || variant == InverseMethod::sloreta,
            ErrorKind::usage, "normalized_operator expects dspm or sloreta");
    PseudoInverseOperator op = mne_operator(lf, alpha_rel);
    op.method = variant;

    if (variant == InverseMethod::dspm) {
        for (int r = 0; r < op.kernel.rows(); ++r) {
            const double norm = op.kernel.row(r).norm();
            if (norm > 0) op.kernel.row(r) /= norm;
        }
        return op;
    }

    // sLORETA: per-voxel whitening by the resolution blocks R_ii = K0_i L_i.
    const int n = op.n_sources();
    bool jittered = false;
    for (int i = 0; i < n; ++i) {
        const auto k_block = op.kernel.middleRows(3 * i, 3);
        const auto l_block = lf.gain.middleCols(3 * i, 3);
        Eigen::Matrix3d r_block = k_block * l_block;
        r_block = 0.5 * (r_block + r_block.transpose()).eval();
        Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(r_block);
        require(es.info() == Eigen::Success, ErrorKind::numeric, "resolution block eigensolve failed");
        if (es.eigenvalues().minCoeff() <= 0 ||
            es.eigenvalues().minCoeff() < 1e-14 * es.eigenvalues().maxCoeff()) {
            r_block.diagonal().array() += 1e-12;
            jittered = true;
        }
        Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es2(r_block);
        Eigen::Vector3d lam = es2.eigenvalues();
        for (int k = 0; k < 3; ++k) lam(k) = (lam(k) > 0) ? 1.0 / std::sqrt(lam(k)) : 0.0;
        const Eigen::Matrix3d inv_sqrt =
            es2.eigenvectors() * lam.asDiagonal() * es2.eigenvectors().transpose();
        op.kernel.middleRows(3 * i, 3) = inv_sqrt * k_block;
    }
    op.converged = !jittered;
    require(op.kernel.allFinite(), ErrorKind::numeric, "sloreta kernel is not finite");
    return op;
}

PseudoInverseOperator eloreta_operator(const LeadField& lf, double reg, double tol, int max_iter) {
    check_gain(lf);
    require(reg > 0, ErrorKind::data, "eloreta reg must be positive");
    require(tol > 0, ErrorKind::data, "eloreta tol must be positive");
    require(max_iter >= 1, ErrorKind::data, "eloreta max_iter must be >= 1");
    const Matrix& L = lf.gain;
    const int m = static_cast<int>(L.rows());
    const int n = static_cast<int>(L.cols()) / 3;

    Matrix h = Matrix::Identity(m, m);
    h.array() -= 1.0 / m;

    std::vector<Eigen::Matrix3d> w(static_cast<std::size_t>(n), Eigen::Matrix3d::Identity());
    std::vector<Eigen::Matrix3d> w_inv(static_cast<std::size_t>(n), Eigen::Matrix3d::Identity());

    PseudoInverseOperator op;
    op.method = InverseMethod::eloreta;
    op.leadfield_digest = lf.digest();
    op.converged = false;

    Matrix m_mat;
    for (int iter = 1; iter <= max_iter; ++iter) {
        Matrix c = Matrix::Zero(m, m);
        for (int i = 0; i < n; ++i) {
            const auto l_block = L.middleCols(3 * i, 3);
            c.noalias() += l_block * w_inv[static_cast<std::size_t>(i)] * l_block.transpose();
        }
        op.alpha = reg * c.trace() / m;
        m_mat = sym_pinv_full(c + op.alpha * h, 1e-12);

        double worst = 0.0;
        for (int i = 0; i < n; ++i) {
            const auto l_block = L.middleCols(3 * i, 3);
            const Eigen::Matrix3d target = l_block.transpose() * m_mat * l_block;
            const Eigen::Matrix3d w_new = sym_sqrt(target);
            // Weight blocks must remain symmetric PSD; sym_sqrt guarantees it
            // up to roundoff, which this assert pins down.
            require(Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d>(w_new).eigenvalues().minCoeff() >=
                        -1e-12 * w_new.norm(),
                    ErrorKind::numeric, "eloreta weight block lost positive semidefiniteness");
            const double denom = std::max(w_new.norm(), 1e-300);
            worst = std::max(worst, (w_new - w[static_cast<std::size_t>(i)]).norm() / denom);
            w[static_cast<std::size_t>(i)] = w_new;
        }
        for (int i = 0; i < n; ++i) w_inv[static_cast<std::size_t>(i)] = sym_pinv(w[static_cast<std::size_t>(i)]);
        op.iterations_used = iter;
        if (worst < tol) {
            op.converged = true;
            break;
        }
    }

    // Kernel from the final weights; M is recomputed so the kernel matches
    // the weights exactly rather than lagging one iteration.
    Matrix c = Matrix::Zero(m, m);
    for (int i = 0; i < n; ++i) {
        const auto l_block = L.middleCols(3 * i, 3);
        c.noalias() += l_block * w_inv[static_cast<std::size_t>(i)] * l_block.transpose();
    }
    op.alpha = reg * c.trace() / m;
    m_mat = sym_pinv_full(c + op.alpha * h, 1e-12);
    op.kernel.resize(3 * n, m);
    for (int i = 0; i < n; ++i) {
        const auto l_block = L.middleCols(3 * i, 3);
        op.kernel.middleRows(3 * i, 3) = w_inv[static_cast<std::size_t>(i)] * l_block.transpose() * m_mat;
    }
    require(op.kernel.allFinite(), ErrorKind::numeric, "eloreta kernel is not finite");
    return op;
}

PseudoInverseOperator pinv_operator(const LeadField& lf, double rcond) {
    check_gain(lf);
    require(rcond > 0 && rcond < 1, ErrorKind::data, "rcond must be in (0,1)");
    Eigen::BDCSVD<Matrix> svd(lf.gain, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Vector& sv = svd.singularValues();
    const double cut = rcond * sv(0);
    Vector inv = Vector::Zero(sv.size());
    int kept = 0;
    for (int i = 0; i < sv.size(); ++i)
        if (sv(i) > cut) {
            inv(i) = 1.0 / sv(i);
            ++kept;
        }
    PseudoInverseOperator op;
    op.method = InverseMethod::pinv;
    op.leadfield_digest = lf.digest();
    op.alpha = 0.0;
    op.iterations_used = kept;  // retained singular values
    op.kernel = svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
    require(op.kernel.allFinite(), ErrorKind::numeric, "pinv kernel is not finite");
    return op;
}

Matrix apply(const PseudoInverseOperator& op, const Vector& y) {
    require(y.size() == op.kernel.cols(), ErrorKind::data,
            "measurement length does not match the operator");
    const Vector flat = op.kernel * y;
    const int n = op.n_sources();
    Matrix x(n, 3);
    for (int i = 0; i < n; ++i)
        for (int a = 0; a < 3; ++a) x(i, a) = flat(3 * i + a);
    return x;
}

PseudoInverseOperator build_operator(const OperatorSpec& spec, const LeadField& lf) {
    switch (spec.method) {
        case InverseMethod::mne: return mne_operator(lf, spec.reg);
        case InverseMethod::dspm:
        case InverseMethod::sloreta: return normalized_operator(lf, spec.reg, spec.method);
        case InverseMethod::eloreta: return eloreta_operator(lf, spec.reg);
        case InverseMethod::pinv: return pinv_operator(lf, spec.reg);
    }
    fail_usage("unknown inverse method");
}

MaskedProblem mask_sensors(const LeadField& lf, const Vector& y, const std::vector<int>& dead) {
    check_gain(lf);
    require(y.size() == lf.gain.rows(), ErrorKind::data, "measurement length mismatch");
    const int m = static_cast<int>(lf.gain.rows());
    require(static_cast<int>(dead.size()) < m, ErrorKind::data,
            "cannot mask every sensor");
    MaskedProblem out{lf, y};
    std::vector<bool> seen(static_cast<std::size_t>(m), false);
    for (int idx : dead) {
        require(idx >= 0 && idx < m, ErrorKind::data, "dead sensor index out of range");
        require(!seen[static_cast<std::size_t>(idx)], ErrorKind::data, "duplicate dead sensor index");
        seen[static_cast<std::size_t>(idx)] = true;
        out.lf.gain.row(idx).setZero();
        out.y(idx) = 0.0;
    }
    return out;
}

void save_operator(const PseudoInverseOperator& op, const std::filesystem::path& path) {
    Nlt1Tensor t;
    t.dtype = Nlt1Dtype::f64;
    t.dims = {static_cast<std::uint64_t>(op.kernel.rows()), static_cast<std::uint64_t>(op.kernel.cols())};
    t.f64_data.resize(static_cast<std::size_t>(op.kernel.size()));
    for (int r = 0; r < op.kernel.rows(); ++r)
        for (int c = 0; c < op.kernel.cols(); ++c)
            t.f64_data[static_cast<std::size_t>(r) * static_cast<std::size_t>(op.kernel.cols()) +
                       static_cast<std::size_t>(c)] = op.kernel(r, c);
    nlt1_save(path, t);

    json meta = {{"method", method_name(op.method)},
                 {"alpha", op.alpha},
                 {"iterations_used", op.iterations_used},
                 {"converged", op.converged},
                 {"leadfield_digest", op.leadfield_digest}};
    std::filesystem::path meta_path = path;
    meta_path.replace_extension(".meta.json");
    std::ofstream out(meta_path);
    if (!out) fail_data("cannot write " + meta_path.string());
    out << meta.dump(2) << "\n";
}

PseudoInverseOperator load_operator(const std::filesystem::path& path) {
    Nlt1Tensor t = nlt1_load(path);
    require(t.dims.size() == 2 && t.dtype == Nlt1Dtype::f64, ErrorKind::data,
            "operator tensor must be 2-D f64");
    require(t.dims[0] % 3 == 0, ErrorKind::data, "operator kernel rows must be 3N");

    std::filesystem::path meta_path = path;
    meta_path.replace_extension(".meta.json");
    std::ifstream in(meta_path);
    if (!in) fail_data("missing operator sidecar " + meta_path.string());
    json meta = json::parse(in, nullptr, false);
    if (meta.is_discarded()) fail_data("invalid JSON in " + meta_path.string());

    PseudoInverseOperator op;
    op.method = method_from_name(meta.at("method").get<std::string>());
    op.alpha = meta.at("alpha").get<double>();
    op.iterations_used = meta.at("iterations_used").get<int>();
    op.converged = meta.at("converged").get<bool>();
    op.leadfield_digest = meta.value("leadfield_digest", std::uint64_t{0});
    op.kernel.resize(static_cast<int>(t.dims[0]), static_cast<int>(t.dims[1]));
    for (int r = 0; r < op.kernel.rows(); ++r)
        for (int c = 0; c < op.kernel.cols(); ++c)
            op.kernel(r, c) = t.f64_data[static_cast<std::size_t>(r) * static_cast<std::size_t>(op.kernel.cols()) +
                                         static_cast<std::size_t>(c)];
    require(op.kernel.allFinite(), ErrorKind::data, "loaded operator kernel is not finite");
    return op;
}

}  // namespace neuroloc
