#include <doctest.h>

#include <cmath>
#include <vector>

#include "fd_check.hpp"
#include "neuroloc/autodiff.hpp"
#include "neuroloc/error.hpp"
#include "neuroloc/fcn_baseline.hpp"
#include "neuroloc/rng.hpp"

using namespace neuroloc;

namespace {

FcnConfig tiny_config() {
    FcnConfig cfg;
    cfg.n_sensors = 4;
    cfg.n_sources = 5;
    cfg.width = 8;
    return cfg;
}

}  // namespace

TEST_CASE("full-scale parameter count lands within 3% of 17.0M") {
    FcnConfig cfg;
    cfg.n_sensors = 61;
    cfg.n_sources = 4819;
    cfg.width = 1024;
    const std::int64_t count = fcn_param_count(cfg);
    CHECK(count == 16'981'113);
    CHECK(std::abs(static_cast<double>(count) - 17.0e6) / 17.0e6 < 0.03);

    // Layer-by-layer: 1024x61 in, two 1024x1024 hidden, 14457x1024 out.
    CHECK(count == (1024LL * 61 + 1024) + 2 * (1024LL * 1024 + 1024) +
                       (14457LL * 1024 + 14457));
}

TEST_CASE("builder allocates exactly the configured parameters") {
    for (int width : {8, 32}) {
        FcnConfig cfg = tiny_config();
        cfg.width = width;
        auto model = build_fcn<double>(cfg, 17);
        CHECK(model.params.total_params() == fcn_param_count(cfg));
        CHECK(model.params.count() == 8);  // 4 weight matrices + 4 biases
    }
    FcnConfig bad;
    CHECK_THROWS_AS(fcn_param_count(bad), Error);
}

TEST_CASE("zero weights produce zero output") {
    auto model = build_fcn<double>(tiny_config(), 17);
    for (const auto& name : model.params.names())
        for (auto& v : model.params.at(name).values) v = 0.0;
    Rng rng(3);
    ad::Graph<double> g;
    auto* y = g.tensor({2, 4});
    for (auto& v : y->values) v = rng.gauss();
    auto* out = fcn_forward(g, model, y);
    REQUIRE(out->shape == std::vector<int>{2, 15});
    for (double v : out->values) CHECK(v == 0.0);
}

TEST_CASE("forward matches an explicit dense reference") {
    FcnConfig cfg = tiny_config();
    auto model = build_fcn<double>(cfg, 29);
    Rng rng(30);
    const int B = 3;
    ad::Graph<double> g;
    auto* y = g.tensor({B, cfg.n_sensors});
    for (auto& v : y->values) v = rng.gauss();
    auto* out = fcn_forward(g, model, y);

    // Reference: row-major loops over the stored weights.
    const auto layer = [&](const std::vector<double>& in, int fin, int fout, int idx,
                           bool relu_after) {
        const auto& w = model.params.at("layer" + std::to_string(idx) + ".w").values;
        const auto& b = model.params.at("layer" + std::to_string(idx) + ".b").values;
        std::vector<double> outv(static_cast<std::size_t>(B) * fout, 0.0);
        for (int bb = 0; bb < B; ++bb)
            for (int o = 0; o < fout; ++o) {
                double acc = b[static_cast<std::size_t>(o)];
                for (int i = 0; i < fin; ++i)
                    acc += w[static_cast<std::size_t>(o * fin + i)] *
                           in[static_cast<std::size_t>(bb * fin + i)];
                if (relu_after && acc < 0.0) acc = 0.0;
                outv[static_cast<std::size_t>(bb * fout + o)] = acc;
            }
        return outv;
    };
    std::vector<double> ref = y->values;
    ref = layer(ref, 4, 8, 0, true);
    ref = layer(ref, 8, 8, 1, true);
    ref = layer(ref, 8, 8, 2, true);
    ref = layer(ref, 8, 15, 3, false);
    REQUIRE(ref.size() == out->values.size());
    for (std::size_t i = 0; i < ref.size(); ++i)
        CHECK(std::abs(ref[i] - out->values[i]) < 1e-12);
}

TEST_CASE("gradients agree with finite differences on tiny dims") {
    auto model = build_fcn<double>(tiny_config(), 41);
    Rng rng(42);
    std::vector<double> y_vals(static_cast<std::size_t>(2 * 4));
    std::vector<double> target(static_cast<std::size_t>(2 * 15));
    for (auto& v : y_vals) v = rng.gauss();
    for (auto& v : target) v = rng.gauss();

    const auto run = [&](std::vector<std::vector<double>>* grads) {
        ad::Graph<double> g;
        auto* y = g.tensor({2, 4}, y_vals);
        auto* out = fcn_forward(g, model, y);
        auto* loss = ad::loss_l2(g, out, target);
        const double f = loss->values[0];
        if (grads != nullptr) {
            g.backward(loss);
            *grads = fdcheck::capture_grads(model.params);
        }
        model.params.zero_grad();
        return f;
    };
    std::vector<std::vector<double>> grads;
    run(&grads);
    Rng probe_rng(43);
    const auto report = fdcheck::probe_param_gradients(
        model.params, [&] { return run(nullptr); }, grads, probe_rng, 24, 1e-5);
    INFO("worst rel err ", report.max_rel_err);
    CHECK(report.checked == 24);
    CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("single-vector prediction uses the voxel-major layout") {
    FcnConfig cfg = tiny_config();
    auto model = build_fcn<double>(cfg, 51);
    Rng rng(52);
    Vector y(cfg.n_sensors);
    for (int i = 0; i < y.size(); ++i) y(i) = rng.gauss();

    const Matrix field = fcn_predict(model, y);
    REQUIRE(field.rows() == cfg.n_sources);
    REQUIRE(field.cols() == 3);
    CHECK(field.allFinite());

    // Same forward, flat layout: column 3i+k holds component k of voxel i.
    ad::Graph<double> g;
    auto* in = g.tensor({1, cfg.n_sensors});
    for (int i = 0; i < y.size(); ++i) in->values[static_cast<std::size_t>(i)] = y(i);
    auto* out = fcn_forward(g, model, in);
    for (int i = 0; i < cfg.n_sources; ++i)
        for (int k = 0; k < 3; ++k)
            CHECK(field(i, k) == out->values[static_cast<std::size_t>(3 * i + k)]);

    Vector wrong(cfg.n_sensors + 1);
    wrong.setZero();
    CHECK_THROWS_AS(fcn_predict(model, wrong), Error);
}

TEST_CASE("identical seeds build identical fcn models") {
    auto a = build_fcn<double>(tiny_config(), 7);
    auto b = build_fcn<double>(tiny_config(), 7);
    auto c = build_fcn<double>(tiny_config(), 8);
    bool equal = true;
    for (const auto& name : a.params.names())
        equal = equal && a.params.at(name).values == b.params.at(name).values;
    CHECK(equal);
    bool any_diff = false;
    for (const auto& name : a.params.names())
        any_diff = any_diff || a.params.at(name).values != c.params.at(name).values;
    CHECK(any_diff);
}

TEST_CASE("float instantiation runs end to end") {
    auto model = build_fcn<float>(tiny_config(), 9);
    Rng rng(10);
    Vector y(4);
    for (int i = 0; i < 4; ++i) y(i) = rng.gauss();
    const Matrix field = fcn_predict(model, y);
    CHECK(field.allFinite());
    CHECK(field.cwiseAbs().maxCoeff() > 0.0);
}
