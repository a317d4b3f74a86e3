#include "neuroloc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <queue>
#include <unordered_map>

#include "neuroloc/error.hpp"

namespace neuroloc {

namespace {

constexpr double kMassEps = 1e-15;  // residual mass treated as fully shipped

void check_field_pair(const Matrix& x, const Matrix& xhat) {
    require(x.cols() == 3 && xhat.cols() == 3, ErrorKind::data, "fields must be N x 3");
    require(x.rows() == xhat.rows(), ErrorKind::data, "field sizes differ");
    require(x.rows() > 0, ErrorKind::data, "fields are empty");
    require(x.allFinite() && xhat.allFinite(), ErrorKind::data, "fields must be finite");
}

}  // namespace

void TransportProblem::validate() const {
    const auto n = static_cast<int>(supply.size());
    require(n > 0, ErrorKind::data, "transport problem is empty");
    require(demand.size() == n, ErrorKind::data, "supply and demand sizes differ");
    require(cost.rows() == n && cost.cols() == n, ErrorKind::data,
            "cost matrix shape does not match the marginals");
    require(supply.allFinite() && demand.allFinite() && cost.allFinite(), ErrorKind::data,
            "transport problem entries must be finite");
    require(supply.minCoeff() >= 0 && demand.minCoeff() >= 0, ErrorKind::data,
            "masses must be nonnegative");
    require(cost.minCoeff() >= 0, ErrorKind::data, "costs must be nonnegative");
    const double sum_a = supply.sum();
    const double sum_b = demand.sum();
    require(std::abs(sum_a - sum_b) <= 2e-9, ErrorKind::data,
            "infeasible marginals: supply and demand totals differ");
    require(std::abs(sum_a - 1.0) <= 1e-9 && std::abs(sum_b - 1.0) <= 1e-9, ErrorKind::data,
            "marginals must be normalized to total mass 1");
    for (int i = 0; i < n; ++i) {
        require(cost(i, i) == 0.0, ErrorKind::data, "cost diagonal must be zero");
        for (int j = i + 1; j < n; ++j)
            require(std::abs(cost(i, j) - cost(j, i)) <= 1e-12 * (1.0 + std::abs(cost(i, j))),
                    ErrorKind::data, "cost matrix must be symmetric");
    }
}

// Successive shortest augmenting paths with node potentials on the bipartite
// transportation graph.  Exact up to floating-point rounding: every augmenting
// path has minimal reduced cost, so the final plan satisfies complementary
// slackness.  Suppliers are nodes [0, n); consumers are nodes [n, 2n).
// Marginals need not be normalized here; totals may differ by dust below
// kMassEps per node, which is left unshipped.
static EmdResult run_min_cost_transport(const Vector& supply, const Vector& demand,
                                        const Matrix& cost) {
    const auto n = static_cast<int>(supply.size());
    const double inf = std::numeric_limits<double>::infinity();

    Vector surplus = supply;
    Vector deficit = demand;
    std::vector<double> pot(2 * static_cast<std::size_t>(n), 0.0);
    std::unordered_map<long long, double> flow;
    std::vector<std::vector<int>> incoming(static_cast<std::size_t>(n));  // suppliers with flow into j

    std::vector<double> dist(2 * static_cast<std::size_t>(n));
    std::vector<int> parent(2 * static_cast<std::size_t>(n));
    std::vector<char> done(2 * static_cast<std::size_t>(n));
    std::priority_queue<std::pair<double, int>, std::vector<std::pair<double, int>>,
                        std::greater<>>
        frontier;

    const long long max_augment = 50LL * n + 1000;
    long long augments = 0;
    while (true) {
        bool any_surplus = false;
        std::fill(dist.begin(), dist.end(), inf);
        std::fill(parent.begin(), parent.end(), -1);
        std::fill(done.begin(), done.end(), 0);
        frontier = {};
        for (int i = 0; i < n; ++i)
            if (surplus(i) > kMassEps) {
                dist[static_cast<std::size_t>(i)] = 0.0;
                frontier.emplace(0.0, i);
                any_surplus = true;
            }
        if (!any_surplus) break;
        require(++augments <= max_augment, ErrorKind::numeric,
                "transport solver did not terminate");

        int target = -1;
        while (true) {
            require(!frontier.empty(), ErrorKind::numeric, "transport graph is disconnected");
            const auto [d, u] = frontier.top();
            frontier.pop();
            if (done[static_cast<std::size_t>(u)] || d > dist[static_cast<std::size_t>(u)])
                continue;  // stale heap entry
            done[static_cast<std::size_t>(u)] = 1;
            if (u >= n && deficit(u - n) > kMassEps) {
                target = u;
                break;
            }
            if (u < n) {
                // cost is symmetric, so column u is row u with contiguous
                // storage (Eigen matrices are column-major).
                const double* cost_u = cost.col(u).data();
                const double du_pot = dist[static_cast<std::size_t>(u)] +
                                      pot[static_cast<std::size_t>(u)];
                for (int j = 0; j < n; ++j) {
                    const int v = n + j;
                    if (done[static_cast<std::size_t>(v)]) continue;
                    double nd = du_pot + cost_u[j] - pot[static_cast<std::size_t>(v)];
                    const double floor = dist[static_cast<std::size_t>(u)];
                    if (nd < floor) nd = floor;  // clamp negative reduced costs (fp guard)
                    if (nd < dist[static_cast<std::size_t>(v)]) {
                        dist[static_cast<std::size_t>(v)] = nd;
                        parent[static_cast<std::size_t>(v)] = u;
                        frontier.emplace(nd, v);
                    }
                }
            } else {
                const int j = u - n;
                auto& in = incoming[static_cast<std::size_t>(j)];
                for (std::size_t k = 0; k < in.size();) {
                    const int i = in[k];
                    const auto it = flow.find(static_cast<long long>(i) * n + j);
                    if (it == flow.end() || it->second <= 0) {
                        in[k] = in.back();
                        in.pop_back();
                        continue;
                    }
                    ++k;
                    if (done[static_cast<std::size_t>(i)]) continue;
                    double rc = -cost(i, j) + pot[static_cast<std::size_t>(u)] -
                                pot[static_cast<std::size_t>(i)];
                    if (rc < 0) rc = 0;  // fp guard; exact math gives rc >= 0
                    const double nd = dist[static_cast<std::size_t>(u)] + rc;
                    if (nd < dist[static_cast<std::size_t>(i)]) {
                        dist[static_cast<std::size_t>(i)] = nd;
                        parent[static_cast<std::size_t>(i)] = u;
                        frontier.emplace(nd, i);
                    }
                }
            }
        }

        // Potential update for permanently labeled nodes keeps reduced costs
        // nonnegative for the next round.
        const double d_target = dist[static_cast<std::size_t>(target)];
        for (int v = 0; v < 2 * n; ++v)
            if (done[static_cast<std::size_t>(v)])
                pot[static_cast<std::size_t>(v)] += dist[static_cast<std::size_t>(v)] - d_target;

        // Bottleneck along the augmenting path.
        double delta = deficit(target - n);
        for (int v = target; parent[static_cast<std::size_t>(v)] >= 0;
             v = parent[static_cast<std::size_t>(v)]) {
            const int u = parent[static_cast<std::size_t>(v)];
            if (u >= n) {  // backward edge consumer u -> supplier v
                const double f = flow.at(static_cast<long long>(v) * n + (u - n));
                delta = std::min(delta, f);
            }
        }
        int source = target;
        while (parent[static_cast<std::size_t>(source)] >= 0)
            source = parent[static_cast<std::size_t>(source)];
        delta = std::min(delta, surplus(source));

        for (int v = target; parent[static_cast<std::size_t>(v)] >= 0;
             v = parent[static_cast<std::size_t>(v)]) {
            const int u = parent[static_cast<std::size_t>(v)];
            if (u < n) {  // forward edge supplier u -> consumer v
                const long long key = static_cast<long long>(u) * n + (v - n);
                auto [it, inserted] = flow.try_emplace(key, 0.0);
                if (inserted || it->second <= 0) incoming[static_cast<std::size_t>(v - n)].push_back(u);
                it->second += delta;
            } else {  // backward edge: cancel flow supplier v -> consumer u
                auto& f = flow.at(static_cast<long long>(v) * n + (u - n));
                f -= delta;
                if (f <= 0) flow.erase(static_cast<long long>(v) * n + (u - n));
            }
        }
        surplus(source) -= delta;
        deficit(target - n) -= delta;
    }

    EmdResult result;
    result.plan.reserve(flow.size());
    for (const auto& [key, f] : flow)
        if (f > 0)
            result.plan.push_back({static_cast<int>(key / n), static_cast<int>(key % n), f});
    std::sort(result.plan.begin(), result.plan.end(), [](const auto& a, const auto& b) {
        return a.from != b.from ? a.from < b.from : a.to < b.to;
    });
    double total = 0.0;
    for (const auto& e : result.plan) total += e.mass * cost(e.from, e.to);
    result.cost = total;

    // Feasibility self-check of the returned plan.
    Vector row_sum = Vector::Zero(n);
    Vector col_sum = Vector::Zero(n);
    for (const auto& e : result.plan) {
        row_sum(e.from) += e.mass;
        col_sum(e.to) += e.mass;
    }
    require((row_sum - supply).cwiseAbs().maxCoeff() <= 1e-9 &&
                (col_sum - demand).cwiseAbs().maxCoeff() <= 1e-9,
            ErrorKind::numeric, "transport plan violates its marginals");
    return result;
}

EmdResult emd_exact(const TransportProblem& p) {
    p.validate();
    return run_min_cost_transport(p.supply, p.demand, p.cost);
}

// EMD for *metric* costs via the common-mass reduction: mass shared between
// the marginals optimally stays in place (triangle inequality), so only the
// positive parts (a-b)+ and (b-a)+ are transported.  The reduced marginals
// have disjoint supports, which shrinks the search dramatically.
static double emd_metric(const Vector& a, const Vector& b, const Matrix& cost) {
    const auto n = static_cast<int>(a.size());
    Vector res_a = Vector::Zero(n), res_b = Vector::Zero(n);
    double moved = 0.0;
    for (int i = 0; i < n; ++i) {
        const double common = std::min(a(i), b(i));
        res_a(i) = a(i) - common;
        res_b(i) = b(i) - common;
        moved += res_a(i);
    }
    if (moved <= kMassEps * n) return 0.0;
    return run_min_cost_transport(res_a, res_b, cost).cost;
}

double emd_sinkhorn(const TransportProblem& p, double epsilon_rel, int iterations) {
    p.validate();
    require(epsilon_rel > 0 && iterations > 0, ErrorKind::usage,
            "sinkhorn needs positive regularization and iteration count");
    const auto n = static_cast<int>(p.supply.size());
    const double mean_cost = p.cost.mean();
    if (mean_cost == 0.0) return 0.0;  // all mass moves for free
    const double eps = epsilon_rel * mean_cost;

    const double neg = -std::numeric_limits<double>::infinity();
    Vector log_a(n), log_b(n);
    for (int i = 0; i < n; ++i) {
        log_a(i) = p.supply(i) > 0 ? std::log(p.supply(i)) : neg;
        log_b(i) = p.demand(i) > 0 ? std::log(p.demand(i)) : neg;
    }
    Vector f = Vector::Zero(n), g = Vector::Zero(n);
    const auto lse = [](const Vector& v) {
        const double m = v.maxCoeff();
        if (m == -std::numeric_limits<double>::infinity()) return m;
        double s = 0.0;
        for (int i = 0; i < v.size(); ++i) s += std::exp(v(i) - m);
        return m + std::log(s);
    };
    Vector scratch(n);
    for (int it = 0; it < iterations; ++it) {
        for (int i = 0; i < n; ++i) {
            if (log_a(i) == neg) {
                f(i) = neg;
                continue;
            }
            for (int j = 0; j < n; ++j) scratch(j) = (g(j) - p.cost(i, j)) / eps;
            f(i) = eps * (log_a(i) - lse(scratch));
        }
        for (int j = 0; j < n; ++j) {
            if (log_b(j) == neg) {
                g(j) = neg;
                continue;
            }
            for (int i = 0; i < n; ++i) scratch(i) = (f(i) - p.cost(i, j)) / eps;
            g(j) = eps * (log_b(j) - lse(scratch));
        }
    }
    double cost = 0.0;
    for (int i = 0; i < n; ++i) {
        if (f(i) == neg) continue;
        for (int j = 0; j < n; ++j) {
            if (g(j) == neg) continue;
            cost += std::exp((f(i) + g(j) - p.cost(i, j)) / eps) * p.cost(i, j);
        }
    }
    return cost;
}

double nmse(const Matrix& x, const Matrix& xhat) {
    check_field_pair(x, xhat);
    double num = 0.0, den = 0.0;
    for (int i = 0; i < x.rows(); ++i) {
        num += (x.row(i) - xhat.row(i)).squaredNorm();
        den += x.row(i).squaredNorm();
    }
    require(den > 0, ErrorKind::data, "ground truth field is identically zero");
    return num / den;
}

double weighted_cos(const Matrix& x, const Matrix& xhat) {
    check_field_pair(x, xhat);
    double total = 0.0;
    for (int i = 0; i < x.rows(); ++i) total += x.row(i).norm();
    require(total > 0, ErrorKind::data, "ground truth field is identically zero");

    double acc = 0.0;
    for (int i = 0; i < x.rows(); ++i) {
        const double amp = x.row(i).norm();
        if (amp == 0.0) continue;
        const double amp_hat = xhat.row(i).norm();
        if (amp_hat == 0.0) continue;  // undefined direction counts as cosine 0
        double cosine = x.row(i).dot(xhat.row(i)) / (amp * amp_hat);
        cosine = std::clamp(cosine, -1.0, 1.0);
        acc += amp * cosine;
    }
    return 1.0 - acc / total;
}

Vector normalized_amplitudes(const Matrix& x) {
    require(x.cols() == 3 && x.rows() > 0, ErrorKind::data, "field must be N x 3");
    require(x.allFinite(), ErrorKind::data, "field must be finite");
    Vector amp(x.rows());
    for (int i = 0; i < x.rows(); ++i) amp(i) = x.row(i).norm();
    const double total = amp.sum();
    require(total > 0, ErrorKind::data, "field has zero total amplitude");
    return amp / total;
}

Matrix pairwise_distances(const SourceSpace& space) {
    const int n = space.count();
    require(n > 0, ErrorKind::data, "source space is empty");
    Matrix d = Matrix::Zero(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            const double dist = (space.centers_mm.row(i) - space.centers_mm.row(j)).norm();
            d(i, j) = dist;
            d(j, i) = dist;
        }
    return d;
}

double emd_between(const Vector& a, const Vector& b, const Matrix& cost) {
    TransportProblem p;
    p.supply = a;
    p.demand = b;
    p.cost = cost;
    return emd_exact(p).cost;
}

double nemd(const Matrix& x, const Matrix& xhat, const SourceSpace& space) {
    check_field_pair(x, xhat);
    require(x.rows() == space.count(), ErrorKind::data,
            "field size does not match the source space");

    Vector amp_x(x.rows()), amp_hat(x.rows());
    for (int i = 0; i < x.rows(); ++i) {
        amp_x(i) = x.row(i).norm();
        amp_hat(i) = xhat.row(i).norm();
    }
    const double total_x = amp_x.sum();
    const double total_hat = amp_hat.sum();
    require(total_x > 0, ErrorKind::data, "ground truth has zero total amplitude");
    require(total_hat > 0, ErrorKind::numeric, "estimate has zero total amplitude");
    amp_x /= total_x;
    amp_hat /= total_hat;

    const Matrix cost = pairwise_distances(space);
    const double numerator = emd_between(amp_x, amp_hat, cost);
    const double denominator =
        emd_between(amp_x, Vector::Constant(x.rows(), 1.0 / x.rows()), cost);
    require(denominator > 0, ErrorKind::numeric,
            "uniform-baseline transport distance is zero");
    return numerator / denominator;
}

NemdEvaluator::NemdEvaluator(const SourceSpace& space) : cost_(pairwise_distances(space)) {}

double NemdEvaluator::numerator(const Matrix& x, const Matrix& xhat) {
    check_field_pair(x, xhat);
    require(x.rows() == cost_.rows(), ErrorKind::data,
            "field size does not match the source space");
    Vector amp_x(x.rows()), amp_hat(x.rows());
    for (int i = 0; i < x.rows(); ++i) {
        amp_x(i) = x.row(i).norm();
        amp_hat(i) = xhat.row(i).norm();
    }
    const double total_x = amp_x.sum();
    const double total_hat = amp_hat.sum();
    require(total_x > 0, ErrorKind::data, "ground truth has zero total amplitude");
    require(total_hat > 0, ErrorKind::numeric, "estimate has zero total amplitude");
    return emd_metric(amp_x / total_x, amp_hat / total_hat, cost_);
}

double NemdEvaluator::denominator(const Matrix& x) {
    require(x.cols() == 3 && x.rows() == cost_.rows(), ErrorKind::data,
            "field size does not match the source space");
    require(x.allFinite(), ErrorKind::data, "fields must be finite");
    Vector amp_x(x.rows());
    for (int i = 0; i < x.rows(); ++i) amp_x(i) = x.row(i).norm();
    const double total_x = amp_x.sum();
    require(total_x > 0, ErrorKind::data, "ground truth has zero total amplitude");
    const double d = emd_metric(amp_x / total_x,
                                Vector::Constant(x.rows(), 1.0 / x.rows()), cost_);
    require(d > 0, ErrorKind::numeric, "uniform-baseline transport distance is zero");
    return d;
}

double NemdEvaluator::operator()(const Matrix& x, const Matrix& xhat) {
    return numerator(x, xhat) / denominator(x);
}

}  // namespace neuroloc
