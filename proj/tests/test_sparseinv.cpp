#include <doctest.h>

#include <cmath>
#include <set>
#include <vector>

#include "neuroloc/error.hpp"
#include "neuroloc/geometry.hpp"
#include "neuroloc/rng.hpp"
#include "neuroloc/sparseinv.hpp"

using namespace neuroloc;

namespace {

Matrix random_matrix(int rows, int cols, Rng& rng) {
    Matrix a(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) a(r, c) = rng.gauss();
    return a;
}

LeadField synthetic_leadfield(const Matrix& gain) {
    LeadField lf;
    lf.gain = gain;
    return lf;
}

Vector random_vector(int n, Rng& rng) {
    Vector v(n);
    for (int i = 0; i < n; ++i) v(i) = rng.gauss();
    return v;
}

// Long-run plain proximal gradient descent, written independently of the
// production solver: exact SVD step size, no momentum, fixed iteration count.
Matrix oracle_prox_gradient(const Matrix& gain, const Vector& y, double lambda, int iters) {
    Eigen::JacobiSVD<Matrix> svd(gain);
    const double sigma_max = svd.singularValues()(0);
    const double step = 1.0 / (sigma_max * sigma_max);
    Vector x = Vector::Zero(gain.cols());
    for (int it = 0; it < iters; ++it) {
        Vector v = x - step * (gain.transpose() * (gain * x - y));
        for (int b = 0; b < v.size() / 3; ++b) {
            const double nb = std::sqrt(v(3 * b) * v(3 * b) + v(3 * b + 1) * v(3 * b + 1) +
                                        v(3 * b + 2) * v(3 * b + 2));
            const double scale = nb > step * lambda ? (nb - step * lambda) / nb : 0.0;
            v(3 * b) *= scale;
            v(3 * b + 1) *= scale;
            v(3 * b + 2) *= scale;
        }
        x = v;
    }
    Matrix out(gain.cols() / 3, 3);
    for (int i = 0; i < out.rows(); ++i) out.row(i) = x.segment<3>(3 * i).transpose();
    return out;
}

std::set<int> support_of(const Matrix& x) {
    std::set<int> s;
    for (int i = 0; i < x.rows(); ++i)
        if (x.row(i).norm() > 0) s.insert(i);
    return s;
}

}  // namespace

TEST_CASE("penalties at or above lambda_max give the exact zero field") {
    Rng rng(41);
    const Matrix gain = random_matrix(4, 18, rng);
    const LeadField lf = synthetic_leadfield(gain);
    const Vector y = random_vector(4, rng);
    const double lmax = lambda_max(lf, y);
    CHECK(lmax > 0);

    for (double factor : {1.0, 1.0 + 1e-10, 1.5, 10.0}) {
        GroupLassoProblem p;
        p.lf = &lf;
        p.y = y;
        p.lambda = factor * lmax;
        p.max_iter = 200;
        p.tol = 1e-12;
        const GroupLassoResult r = solve_group_lasso(p);
        CHECK(r.x.cwiseAbs().maxCoeff() == 0.0);
        CHECK(r.diagnostics.converged);
        CHECK(r.diagnostics.objective == doctest::Approx(0.5 * y.squaredNorm()).epsilon(1e-12));
        const KktReport kkt = check_kkt(lf, y, r.x, p.lambda);
        CHECK(kkt.max_inactive <= 1e-12);
    }
}

TEST_CASE("lambda_max matches the per-voxel correlation formula") {
    Rng rng(42);
    const Matrix gain = random_matrix(5, 21, rng);
    const LeadField lf = synthetic_leadfield(gain);
    const Vector y = random_vector(5, rng);
    double expect = 0.0;
    for (int i = 0; i < 7; ++i) {
        Eigen::Vector3d corr = Eigen::Vector3d::Zero();
        for (int a = 0; a < 3; ++a) corr(a) = gain.col(3 * i + a).dot(y);
        expect = std::max(expect, corr.norm());
    }
    CHECK(lambda_max(lf, y) == doctest::Approx(expect).epsilon(1e-15));
}

TEST_CASE("zero penalty with orthonormal rows reaches the least-squares fit") {
    Rng rng(43);
    Eigen::HouseholderQR<Matrix> qr(random_matrix(18, 4, rng));
    const Matrix q_full = qr.householderQ();
    const Matrix gain = q_full.leftCols(4).transpose();  // orthonormal rows
    const LeadField lf = synthetic_leadfield(gain);
    const Vector y = random_vector(4, rng);

    GroupLassoProblem p;
    p.lf = &lf;
    p.y = y;
    p.lambda = 0.0;
    p.max_iter = 10000;
    p.tol = 1e-14;
    const GroupLassoResult r = solve_group_lasso(p);
    Vector xv(18);
    for (int i = 0; i < 6; ++i) xv.segment<3>(3 * i) = r.x.row(i).transpose();
    CHECK((y - gain * xv).norm() < 1e-8);
}

TEST_CASE("objective matches a million-iteration proximal-gradient oracle") {
    Rng rng(44);
    const Matrix gain = random_matrix(4, 18, rng);  // 4 sensors, 6 voxels
    const LeadField lf = synthetic_leadfield(gain);
    const Vector y = random_vector(4, rng);
    const double lambda = 0.3 * lambda_max(lf, y);

    GroupLassoProblem p;
    p.lf = &lf;
    p.y = y;
    p.lambda = lambda;
    p.max_iter = 300000;
    p.tol = 1e-15;
    const GroupLassoResult r = solve_group_lasso(p);

    const Matrix x_oracle = oracle_prox_gradient(gain, y, lambda, 1000000);
    const double f_oracle = group_lasso_objective(lf, y, x_oracle, lambda);
    const double f_solver = r.diagnostics.objective;
    CHECK(std::abs(f_solver - f_oracle) <= 1e-6 * std::max(1.0, std::abs(f_oracle)));
    CHECK(f_solver ==
          doctest::Approx(group_lasso_objective(lf, y, r.x, lambda)).epsilon(1e-12));
}

TEST_CASE("kkt conditions hold at the solution of random problems") {
    for (int trial = 0; trial < 20; ++trial) {
        Rng rng(derive_seed(45, static_cast<std::uint64_t>(trial)));
        const int m = 4 + static_cast<int>(rng.uniform_index(5));
        const int voxels = 5 + static_cast<int>(rng.uniform_index(8));
        const Matrix gain = random_matrix(m, 3 * voxels, rng);
        const LeadField lf = synthetic_leadfield(gain);
        const Vector y = random_vector(m, rng);

        GroupLassoProblem p;
        p.lf = &lf;
        p.y = y;
        p.lambda = 0.1 * lambda_max(lf, y);
        p.max_iter = 200000;
        p.tol = 1e-15;
        const GroupLassoResult r = solve_group_lasso(p);
        const KktReport kkt = check_kkt(lf, y, r.x, p.lambda);
        CAPTURE(trial);
        CHECK(kkt.max_active < 1e-4);
        CHECK(kkt.max_inactive < 1e-4);
        CHECK(r.diagnostics.kkt_residual == doctest::Approx(kkt.overall()).epsilon(1e-12));
    }
}

TEST_CASE("plain proximal gradient descent decreases the objective monotonically") {
    Rng rng(46);
    const Matrix gain = random_matrix(6, 24, rng);
    const LeadField lf = synthetic_leadfield(gain);
    const Vector y = random_vector(6, rng);

    GroupLassoProblem p;
    p.lf = &lf;
    p.y = y;
    p.lambda = 0.05 * lambda_max(lf, y);
    p.max_iter = 2000;
    p.tol = 1e-15;
    GroupLassoOptions opts;
    opts.accelerated = false;
    std::vector<double> trace;
    opts.objective_trace = &trace;
    solve_group_lasso(p, opts);
    REQUIRE(trace.size() > 10);
    for (std::size_t k = 1; k < trace.size(); ++k)
        CHECK(trace[k] <= trace[k - 1] * (1.0 + 1e-14));
}

TEST_CASE("acceleration and the fallback agree on the final objective") {
    Rng rng(47);
    const Matrix gain = random_matrix(5, 24, rng);
    const LeadField lf = synthetic_leadfield(gain);
    const Vector y = random_vector(5, rng);

    GroupLassoProblem p;
    p.lf = &lf;
    p.y = y;
    p.lambda = 0.1 * lambda_max(lf, y);
    p.max_iter = 200000;
    p.tol = 1e-15;
    const GroupLassoResult fast = solve_group_lasso(p);
    GroupLassoOptions plain;
    plain.accelerated = false;
    const GroupLassoResult slow = solve_group_lasso(p, plain);
    CHECK(std::abs(fast.diagnostics.objective - slow.diagnostics.objective) <
          1e-8 * std::max(1.0, slow.diagnostics.objective));
    CHECK(fast.diagnostics.iterations < slow.diagnostics.iterations);
}

TEST_CASE("support shrinks weakly as the penalty grows") {
    Rng rng(48);
    const Matrix gain = random_matrix(6, 30, rng);
    const LeadField lf = synthetic_leadfield(gain);
    // Measurement generated by two genuinely active voxels plus mild noise.
    Vector xv = Vector::Zero(30);
    xv.segment<3>(0) << 1.0, -0.5, 0.25;
    xv.segment<3>(12) << -0.75, 0.5, 1.0;
    Vector y = gain * xv;
    for (int i = 0; i < y.size(); ++i) y(i) += 0.01 * rng.gauss();

    const double lmax = lambda_max(lf, y);
    std::vector<std::size_t> sizes;
    for (double rel : {0.03, 0.1, 0.3}) {
        GroupLassoProblem p;
        p.lf = &lf;
        p.y = y;
        p.lambda = rel * lmax;
        p.max_iter = 100000;
        p.tol = 1e-15;
        sizes.push_back(support_of(solve_group_lasso(p).x).size());
    }
    CHECK(sizes[0] >= sizes[1]);
    CHECK(sizes[1] >= sizes[2]);
    CHECK(sizes[2] >= 1);
}

TEST_CASE("invalid group lasso inputs are rejected") {
    Rng rng(49);
    const Matrix gain = random_matrix(4, 12, rng);
    const LeadField lf = synthetic_leadfield(gain);
    GroupLassoProblem p;
    p.lf = &lf;
    p.y = random_vector(4, rng);
    p.lambda = -1.0;
    CHECK_THROWS_AS(solve_group_lasso(p), Error);
    p.lambda = 0.1;
    p.tol = 0.0;
    CHECK_THROWS_AS(solve_group_lasso(p), Error);
    p.tol = 1e-10;
    p.y = random_vector(5, rng);
    CHECK_THROWS_AS(solve_group_lasso(p), Error);
    p.y = random_vector(4, rng);
    p.lf = nullptr;
    CHECK_THROWS_AS(solve_group_lasso(p), Error);
}

TEST_CASE("group lasso on a spherical-head lead field satisfies the kkt contract") {
    const SensorArray sensors = place_sensors(16, 87.0, 0.5);
    const SourceSpace space = build_source_space(79.0, 25.0, 5.0);
    const LeadField lf = compute_leadfield(HeadModel{}, sensors, space);

    Rng rng(50);
    const auto voxel = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(lf.n_sources())));
    double dir[3];
    rng.unit_vector3(dir);
    Vector y = Vector::Zero(lf.n_sensors());
    for (int a = 0; a < 3; ++a) y += dir[a] * lf.gain.col(3 * voxel + a);
    y /= y.norm();

    GroupLassoProblem p;
    p.lf = &lf;
    p.y = y;
    p.lambda = 0.1 * lambda_max(lf, y);
    p.max_iter = 100000;
    p.tol = 1e-15;
    const GroupLassoResult r = solve_group_lasso(p);
    const KktReport kkt = check_kkt(lf, y, r.x, p.lambda);
    CHECK(kkt.max_active < 1e-4);
    CHECK(kkt.max_inactive < 1e-4);
    const std::set<int> sup = support_of(r.x);
    CHECK(sup.size() >= 1);
    CHECK(sup.size() < static_cast<std::size_t>(lf.n_sources()) / 4);
}
