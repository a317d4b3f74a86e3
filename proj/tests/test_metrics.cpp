#include <doctest.h>

#include <cmath>
#include <vector>

#include "neuroloc/error.hpp"
#include "neuroloc/geometry.hpp"
#include "neuroloc/metrics.hpp"
#include "neuroloc/rng.hpp"

using namespace neuroloc;

namespace {

Matrix random_field(int n, Rng& rng) {
    Matrix x(n, 3);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < 3; ++k) x(i, k) = rng.gauss();
    return x;
}

// Strictly positive masses summing to one.
Vector random_masses(int n, Rng& rng) {
    Vector v(n);
    for (int i = 0; i < n; ++i) {
        const double g = rng.gauss();
        v(i) = g * g + 1e-3;
    }
    return v / v.sum();
}

Matrix cost_from_points(const Matrix& pts) {
    const auto n = static_cast<int>(pts.rows());
    Matrix c = Matrix::Zero(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            const double d = (pts.row(i) - pts.row(j)).norm();
            c(i, j) = d;
            c(j, i) = d;
        }
    return c;
}

// Straight-line source space along the x axis (centers only matter to nemd).
SourceSpace line_space(int n, double spacing) {
    SourceSpace s;
    s.centers_mm.resize(n, 3);
    s.voxel_to_grid.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        s.centers_mm.row(i) << spacing * i, 0.0, 0.0;
        s.voxel_to_grid[static_cast<std::size_t>(i)] = {i, 0, 0};
    }
    s.spacing_mm = spacing;
    s.min_depth_mm = 1.0;
    s.grid_dims = {n, 1, 1};
    s.min_index = {0, 0, 0};
    return s;
}

// Independent LP oracle: two-phase full-tableau simplex with Bland's rule on
// the transportation polytope (variables f_ij >= 0, equality marginals).
double lp_transport_oracle(const Vector& a, const Vector& b, const Matrix& cost) {
    const auto n = static_cast<int>(a.size());
    const int m = 2 * n;        // constraints
    const int nv = n * n;       // flow variables
    const int nt = nv + m;      // + artificials
    Matrix t = Matrix::Zero(m + 1, nt + 1);
    std::vector<int> basis(static_cast<std::size_t>(m));
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) t(i, i * n + j) = 1.0;  // row sums
        t(i, nt) = a(i);
    }
    for (int j = 0; j < n; ++j) {
        for (int i = 0; i < n; ++i) t(n + j, i * n + j) = 1.0;  // column sums
        t(n + j, nt) = b(j);
    }
    for (int r = 0; r < m; ++r) {
        t(r, nv + r) = 1.0;
        basis[static_cast<std::size_t>(r)] = nv + r;
    }

    const auto pivot = [&](int row, int col) {
        t.row(row) /= t(row, col);
        for (int r = 0; r <= m; ++r)
            if (r != row && t(r, col) != 0.0) t.row(r) -= t(r, col) * t.row(row);
        basis[static_cast<std::size_t>(row)] = col;
    };
    const auto run_simplex = [&](bool phase2) {
        while (true) {
            int col = -1;  // Bland: smallest eligible index
            for (int c = 0; c < (phase2 ? nv : nt); ++c)
                if (t(m, c) < -1e-10) {
                    col = c;
                    break;
                }
            if (col < 0) return;
            int row = -1;
            double best_ratio = 0.0;
            for (int r = 0; r < m; ++r) {
                if (t(r, col) <= 1e-11) continue;
                const double ratio = t(r, nt) / t(r, col);
                if (row < 0 || ratio < best_ratio - 1e-12 ||
                    (std::abs(ratio - best_ratio) <= 1e-12 &&
                     basis[static_cast<std::size_t>(r)] < basis[static_cast<std::size_t>(row)]))
                {
                    row = r;
                    best_ratio = ratio;
                }
            }
            REQUIRE(row >= 0);  // transportation LP is bounded
            pivot(row, col);
        }
    };

    // Phase 1: minimize the artificial sum.
    for (int r = 0; r < m; ++r) t.row(m) -= t.row(r);
    for (int r = 0; r < m; ++r) t(m, nv + r) = 0.0;
    run_simplex(false);
    REQUIRE(std::abs(t(m, nt)) < 1e-7);

    // Phase 2: minimize the transport cost; artificials may not re-enter.
    t.row(m).setZero();
    for (int c = 0; c < nv; ++c) t(m, c) = cost(c / n, c % n);
    for (int r = 0; r < m; ++r) {
        const int bc = basis[static_cast<std::size_t>(r)];
        if (bc < nv && t(m, bc) != 0.0) t.row(m) -= t(m, bc) * t.row(r);
    }
    run_simplex(true);
    return -t(m, nt);
}

}  // namespace

TEST_CASE("nmse identities hold exactly") {
    Rng rng(61);
    const Matrix x = random_field(40, rng);
    CHECK(nmse(x, x) == 0.0);
    CHECK(nmse(x, Matrix::Zero(40, 3)) == 1.0);
    CHECK(nmse(x, 2.0 * x) == 1.0);
    CHECK_THROWS_AS(nmse(Matrix::Zero(40, 3), x), Error);
    CHECK_THROWS_AS(nmse(x, random_field(41, rng)), Error);
}

TEST_CASE("weighted cosine identities") {
    Rng rng(62);
    const Matrix x = random_field(32, rng);
    CHECK(std::abs(weighted_cos(x, x)) < 1e-13);
    CHECK(std::abs(weighted_cos(x, -x) - 2.0) < 1e-13);

    // Per-voxel orthogonal estimate: (y, -x, 0) against (x, y, z) with z = 0
    // in the truth so the dot product cancels termwise.
    Matrix flat = x;
    flat.col(2).setZero();
    Matrix ortho(32, 3);
    for (int i = 0; i < 32; ++i) ortho.row(i) << flat(i, 1), -flat(i, 0), 0.0;
    CHECK(weighted_cos(flat, ortho) == 1.0);

    SUBCASE("zeroed estimate voxels contribute cosine zero") {
        Matrix xhat = x;
        xhat.row(5).setZero();
        Vector amp(32);
        for (int i = 0; i < 32; ++i) amp(i) = x.row(i).norm();
        const double expected = amp(5) / amp.sum();
        CHECK(weighted_cos(x, xhat) == doctest::Approx(expected).epsilon(1e-12));
    }
    CHECK_THROWS_AS(weighted_cos(Matrix::Zero(32, 3), x), Error);
}

TEST_CASE("metrics are invariant to consistent voxel reordering") {
    Rng rng(63);
    const int n = 50;
    const Matrix x = random_field(n, rng);
    const Matrix xhat = random_field(n, rng);
    std::vector<int> perm(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
    for (int i = n - 1; i > 0; --i)
        std::swap(perm[static_cast<std::size_t>(i)],
                  perm[rng.uniform_index(static_cast<std::uint64_t>(i + 1))]);
    Matrix xp(n, 3), xhp(n, 3);
    for (int i = 0; i < n; ++i) {
        xp.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
        xhp.row(i) = xhat.row(perm[static_cast<std::size_t>(i)]);
    }
    CHECK(nmse(xp, xhp) == doctest::Approx(nmse(x, xhat)).epsilon(1e-13));
    CHECK(weighted_cos(xp, xhp) == doctest::Approx(weighted_cos(x, xhat)).epsilon(1e-13));
}

TEST_CASE("emd of two point masses is their separation") {
    Rng rng(64);
    Matrix pts = random_field(4, rng) * 50.0;
    TransportProblem p;
    p.cost = cost_from_points(pts);
    p.supply = Vector::Zero(4);
    p.demand = Vector::Zero(4);
    p.supply(1) = 1.0;
    p.demand(3) = 1.0;
    const EmdResult r = emd_exact(p);
    CHECK(r.cost == p.cost(1, 3));
    REQUIRE(r.plan.size() == 1);
    CHECK(r.plan[0].from == 1);
    CHECK(r.plan[0].to == 3);
    CHECK(r.plan[0].mass == 1.0);
}

TEST_CASE("emd with identical marginals is zero on the identity plan") {
    Rng rng(65);
    TransportProblem p;
    p.cost = cost_from_points(random_field(30, rng) * 40.0);
    p.supply = random_masses(30, rng);
    p.demand = p.supply;
    const EmdResult r = emd_exact(p);
    CHECK(r.cost == 0.0);
    for (const auto& e : r.plan) CHECK(e.from == e.to);
}

TEST_CASE("emd matches the two-phase simplex oracle on random instances") {
    for (int trial = 0; trial < 100; ++trial) {
        Rng rng(derive_seed(66, static_cast<std::uint64_t>(trial)));
        const int n = 2 + static_cast<int>(rng.uniform_index(5));  // 2..6 points
        TransportProblem p;
        p.cost = cost_from_points(random_field(n, rng) * 30.0);
        p.supply = random_masses(n, rng);
        p.demand = random_masses(n, rng);
        if (n >= 3 && trial % 3 == 0) {  // exercise zero-mass nodes
            p.supply(0) = 0.0;
            p.supply /= p.supply.sum();
            p.demand(n - 1) = 0.0;
            p.demand /= p.demand.sum();
        }
        const EmdResult r = emd_exact(p);
        const double oracle = lp_transport_oracle(p.supply, p.demand, p.cost);
        CAPTURE(trial);
        CAPTURE(n);
        CHECK(std::abs(r.cost - oracle) <= 1e-9);

        Vector row_sum = Vector::Zero(n), col_sum = Vector::Zero(n);
        for (const auto& e : r.plan) {
            row_sum(e.from) += e.mass;
            col_sum(e.to) += e.mass;
            CHECK(e.mass > 0);
        }
        CHECK((row_sum - p.supply).cwiseAbs().maxCoeff() <= 1e-9);
        CHECK((col_sum - p.demand).cwiseAbs().maxCoeff() <= 1e-9);
    }
}

TEST_CASE("emd is symmetric in its marginals under a symmetric cost") {
    Rng rng(67);
    TransportProblem p;
    p.cost = cost_from_points(random_field(25, rng) * 25.0);
    p.supply = random_masses(25, rng);
    p.demand = random_masses(25, rng);
    const double forward = emd_exact(p).cost;
    std::swap(p.supply, p.demand);
    const double backward = emd_exact(p).cost;
    CHECK(std::abs(forward - backward) <= 1e-12 * std::max(1.0, forward));
}

TEST_CASE("emd shrinks as estimate mass moves toward the truth on a line") {
    const SourceSpace space = line_space(8, 7.0);
    const Matrix cost = pairwise_distances(space);
    double prev = std::numeric_limits<double>::infinity();
    for (int k = 7; k >= 1; --k) {
        Vector a = Vector::Zero(8), b = Vector::Zero(8);
        a(0) = 1.0;
        b(k) = 1.0;
        const double c = emd_between(a, b, cost);
        CHECK(c == doctest::Approx(7.0 * k).epsilon(1e-12));
        CHECK(c < prev);
        prev = c;
    }
}

TEST_CASE("transport problem validation rejects malformed input") {
    Rng rng(68);
    TransportProblem p;
    p.cost = cost_from_points(random_field(5, rng) * 10.0);
    p.supply = random_masses(5, rng);
    p.demand = random_masses(5, rng);
    CHECK_NOTHROW(emd_exact(p));

    SUBCASE("non-normalized marginals") {
        p.supply *= 1.001;
        CHECK_THROWS_AS(emd_exact(p), Error);
    }
    SUBCASE("negative mass") {
        p.supply(0) = -p.supply(0);
        CHECK_THROWS_AS(emd_exact(p), Error);
    }
    SUBCASE("asymmetric cost") {
        p.cost(1, 2) += 0.5;
        CHECK_THROWS_AS(emd_exact(p), Error);
    }
    SUBCASE("nonzero cost diagonal") {
        p.cost(2, 2) = 0.1;
        CHECK_THROWS_AS(emd_exact(p), Error);
    }
    SUBCASE("size mismatch") {
        p.demand = random_masses(4, rng);
        CHECK_THROWS_AS(emd_exact(p), Error);
    }
}

TEST_CASE("nemd identities and the hand-computed line instance") {
    const SourceSpace space = line_space(5, 10.0);

    SUBCASE("estimate equal to the truth gives zero") {
        Rng rng(69);
        Matrix x = random_field(5, rng);
        CHECK(nemd(x, x, space) == 0.0);
    }
    SUBCASE("uniform estimate gives one") {
        Rng rng(70);
        Matrix x = random_field(5, rng);
        Matrix uniform(5, 3);
        for (int i = 0; i < 5; ++i) uniform.row(i) << 0.3, 0.0, 0.0;
        CHECK(nemd(x, uniform, space) == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("point mass one voxel away against the uniform baseline") {
        Matrix x = Matrix::Zero(5, 3), xhat = Matrix::Zero(5, 3);
        x(0, 1) = 2.0;
        xhat(1, 2) = -0.7;
        // numerator: distance 10; denominator: (0+10+20+30+40)/5 = 20.
        CHECK(nemd(x, xhat, space) == doctest::Approx(0.5).epsilon(1e-12));
    }
    SUBCASE("invariant to positive rescaling of the estimate") {
        Rng rng(71);
        Matrix x = random_field(5, rng);
        Matrix xhat = random_field(5, rng);
        const double base = nemd(x, xhat, space);
        CHECK(nemd(x, 4.0 * xhat, space) == base);    // power of two: exact
        CHECK(nemd(x, 0.25 * xhat, space) == base);   // power of two: exact
        CHECK(nemd(x, 3.0 * xhat, space) == doctest::Approx(base).epsilon(1e-12));
    }
    SUBCASE("zero estimate fails as a numeric error") {
        Rng rng(72);
        Matrix x = random_field(5, rng);
        try {
            nemd(x, Matrix::Zero(5, 3), space);
            CHECK(false);
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::numeric);
        }
        try {
            nemd(Matrix::Zero(5, 3), x, space);
            CHECK(false);
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::data);
        }
    }
}

TEST_CASE("nemd on a volumetric source space stays in a sane range") {
    const SourceSpace space = build_source_space(79.0, 25.0, 5.0);
    Rng rng(73);
    Matrix x = Matrix::Zero(space.count(), 3);
    const auto peak = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(space.count())));
    x(peak, 0) = 1.0;
    Matrix xhat = random_field(space.count(), rng);
    const double v = nemd(x, xhat, space);
    CHECK(v > 0.0);
    CHECK(v < 3.0);
    CHECK(std::isfinite(v));
}

TEST_CASE("batch evaluator agrees with the one-shot nemd") {
    const SourceSpace space = build_source_space(79.0, 25.0, 5.0);
    NemdEvaluator eval(space);
    CHECK(eval.n_voxels() == space.count());
    Rng rng(75);
    for (int trial = 0; trial < 5; ++trial) {
        Matrix x = Matrix::Zero(space.count(), 3);
        const auto c = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(space.count())));
        for (int i = 0; i < space.count(); ++i) {
            const double d2 = (space.centers_mm.row(i) - space.centers_mm.row(c)).squaredNorm();
            const double w = std::exp(-d2 / (2.0 * 30.0 * 30.0));
            x(i, 0) = w;
            x(i, 2) = -0.5 * w;
        }
        const Matrix xhat = random_field(space.count(), rng);
        const double direct = nemd(x, xhat, space);
        const double batched = eval(x, xhat);
        CHECK(batched == doctest::Approx(direct).epsilon(1e-10));
        CHECK(eval.numerator(x, xhat) / eval.denominator(x) ==
              doctest::Approx(batched).epsilon(1e-15));
    }
}

TEST_CASE("sinkhorn approximates the exact transport cost") {
    Rng rng(74);
    TransportProblem p;
    p.cost = cost_from_points(random_field(30, rng) * 30.0);
    p.supply = random_masses(30, rng);
    p.demand = random_masses(30, rng);
    const double exact = emd_exact(p).cost;
    const double approx = emd_sinkhorn(p, 0.05, 2000);
    CHECK(std::abs(approx - exact) <= 0.2 * exact);

    SUBCASE("default regularization remains finite and nonnegative") {
        const double tight = emd_sinkhorn(p);
        CHECK(std::isfinite(tight));
        CHECK(tight >= 0.0);
        CHECK(std::abs(tight - exact) <= 0.2 * exact);
    }
    SUBCASE("identical marginals cost almost nothing") {
        p.demand = p.supply;
        CHECK(emd_sinkhorn(p, 0.05, 2000) <= 0.05 * p.cost.mean());
    }
}
