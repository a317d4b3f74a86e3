#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "fd_check.hpp"
#include "neuroloc/autodiff.hpp"
#include "neuroloc/error.hpp"
#include "neuroloc/geometry.hpp"
#include "neuroloc/lininv.hpp"
#include "neuroloc/piunet.hpp"
#include "neuroloc/rng.hpp"

using namespace neuroloc;

namespace {

PiuNetConfig tiny_config() {
    PiuNetConfig cfg;
    cfg.grid = 8;
    cfg.base_channels = 4;
    cfg.depth = 1;
    cfg.attn_at_bottleneck = true;
    return cfg;
}

Matrix random_field(int n, Rng& rng) {
    Matrix x(n, 3);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < 3; ++k) x(i, k) = rng.gauss();
    return x;
}

void randomize_params(ad::ParamStore<double>& ps, double scale, Rng& rng) {
    for (const auto& name : ps.names()) ad::fill_uniform(ps.at(name), scale, rng);
}

const LeadField& small_leadfield() {
    static const LeadField lf = [] {
        const SensorArray sensors = place_sensors(31, 87.0, 0.5);
        const SourceSpace space = build_source_space(79.0, 25.0, 5.0);
        return compute_leadfield(HeadModel{}, sensors, space);
    }();
    return lf;
}

}  // namespace

TEST_CASE("parameter totals match the configuration formula exactly") {
    CHECK(piunet_param_count(PiuNetConfig::full()) == 9'208'323);
    CHECK(piunet_param_count(PiuNetConfig::desk()) == 578'499);
    CHECK(piunet_param_count(PiuNetConfig::full()) >= 8'900'000);
    CHECK(piunet_param_count(PiuNetConfig::full()) <= 13'300'000);

    std::vector<PiuNetConfig> configs;
    configs.push_back(PiuNetConfig::desk());
    configs.push_back(tiny_config());
    {
        PiuNetConfig c = tiny_config();
        c.attn_at_bottleneck = false;
        configs.push_back(c);
    }
    {
        PiuNetConfig c = tiny_config();
        c.base_channels = 2;
        c.blocks_per_level = 3;
        configs.push_back(c);
    }
    {
        PiuNetConfig c = tiny_config();
        c.base_channels = 6;  // exercises group-count clamping on odd ladders
        configs.push_back(c);
    }
    for (const auto& cfg : configs) {
        auto model = build_piunet<double>(cfg, 41);
        CHECK(model.params.total_params() == piunet_param_count(cfg));
    }

    auto paper_scale = build_piunet<float>(PiuNetConfig::full(), 5);
    CHECK(paper_scale.params.total_params() == 9'208'323);
}

TEST_CASE("configuration validation rejects impossible settings") {
    PiuNetConfig cfg = tiny_config();
    cfg.grid = 6;  // 6 is not divisible by 2^2
    cfg.depth = 2;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = tiny_config();
    cfg.depth = 0;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = tiny_config();
    cfg.base_channels = 0;
    CHECK_THROWS_AS(cfg.validate(), Error);
    CHECK_NOTHROW(tiny_config().validate());
}

TEST_CASE("zero-initialized head makes the network output exactly zero") {
    auto model = build_piunet<double>(tiny_config(), 7);
    Rng rng(11);
    ad::Graph<double> g;
    auto* in = g.tensor({2, 3, 8, 8, 8});
    for (auto& v : in->values) v = rng.gauss();
    auto* out = piunet_forward(g, model, in);
    REQUIRE(out->shape == std::vector<int>{2, 3, 8, 8, 8});
    for (double v : out->values) CHECK(v == 0.0);
}

TEST_CASE("forward validates the input lattice") {
    auto model = build_piunet<double>(tiny_config(), 7);
    ad::Graph<double> g;
    auto* wrong_grid = g.tensor({1, 3, 4, 4, 4});
    CHECK_THROWS_AS(piunet_forward(g, model, wrong_grid), Error);
    auto* wrong_channels = g.tensor({1, 2, 8, 8, 8});
    CHECK_THROWS_AS(piunet_forward(g, model, wrong_channels), Error);
}

TEST_CASE("lattice embedding is a bijection onto its sites") {
    const SourceSpace space = build_source_space(79.0, 25.0, 5.0);
    const GridEmbedding em = make_grid_embedding(space, 16);
    CHECK(em.count() == space.count());

    std::set<int> uniq(em.sites.begin(), em.sites.end());
    CHECK(static_cast<int>(uniq.size()) == space.count());
    for (int s : em.sites) {
        CHECK(s >= 0);
        CHECK(s < 16 * 16 * 16);
    }

    Rng rng(21);
    const Matrix field = random_field(space.count(), rng);
    std::vector<double> grid = embed_to_grid<double>(field, em);
    REQUIRE(static_cast<int>(grid.size()) == 3 * 16 * 16 * 16);

    // Round trip is exact at f64.
    Matrix back = extract_from_grid(grid, em);
    CHECK((back - field).cwiseAbs().maxCoeff() == 0.0);

    // Padding sites never leak into the extracted field.
    std::set<int> site_set(em.sites.begin(), em.sites.end());
    const int plane = 16 * 16 * 16;
    for (int k = 0; k < 3; ++k)
        for (int s = 0; s < plane; ++s)
            if (site_set.find(s) == site_set.end())
                grid[static_cast<std::size_t>(k * plane + s)] = 1e9;
    Matrix back2 = extract_from_grid(grid, em);
    CHECK((back2 - field).cwiseAbs().maxCoeff() == 0.0);

    // A single active voxel occupies exactly three lattice entries.
    Matrix onehot = Matrix::Zero(space.count(), 3);
    onehot(5, 0) = 1.0;
    onehot(5, 1) = -2.0;
    onehot(5, 2) = 0.5;
    std::vector<double> g1 = embed_to_grid<double>(onehot, em);
    int nonzeros = 0;
    for (double v : g1) nonzeros += (v != 0.0);
    CHECK(nonzeros == 3);

    // One-shot convenience forms agree with the cached embedding.
    std::vector<double> g2 = embed_to_grid<double>(field, space, 16);
    CHECK(g2 == embed_to_grid<double>(field, em));
    CHECK((extract_from_grid(g2, space, 16) - field).cwiseAbs().maxCoeff() == 0.0);

    // The source box must fit inside the lattice.
    CHECK_THROWS_AS(make_grid_embedding(space, 4), Error);

    // f32 embedding stores exact float casts of the field.
    std::vector<float> gf = embed_to_grid<float>(field, em);
    Matrix backf = extract_from_grid(gf, em);
    for (int i = 0; i < space.count(); ++i)
        for (int k = 0; k < 3; ++k)
            CHECK(backf(i, k) == static_cast<double>(static_cast<float>(field(i, k))));
}

TEST_CASE("receptive radius formula matches hand-derived layer walks") {
    PiuNetConfig cfg = tiny_config();
    cfg.attn_at_bottleneck = false;
    cfg.grid = 16;
    cfg.depth = 1;
    // Depth-1 walk in input voxels: lift +1, enc0 +4, down +1+2, enc1 +8,
    // mid +8, bottom dec +8, upsample +1, up block +2, dec0 +4, head +1 = 40.
    CHECK(piunet_receptive_radius(cfg) == 40);

    cfg.grid = 16;
    cfg.depth = 2;
    CHECK(piunet_receptive_radius(cfg) == 92);

    // The bound covers the production lattice, so refinements there may use
    // the whole volume even without attention.
    CHECK(piunet_receptive_radius(cfg) >= cfg.grid);

    PiuNetConfig attn = PiuNetConfig::desk();
    CHECK(piunet_receptive_radius(attn) == attn.grid);
}

TEST_CASE("perturbations stay inside the receptive radius on the default lattice") {
    // The named sanity check: on a 16-lattice with one downsampling and no
    // attention, every changed output voxel has to lie within the theoretical
    // radius of the perturbed voxel. The radius (40) covers this lattice, so
    // the real content of the check is that the formula dominates the grid
    // and that the perturbation actually reaches the output.
    PiuNetConfig cfg = tiny_config();
    cfg.grid = 16;
    cfg.depth = 1;
    cfg.attn_at_bottleneck = false;
    auto model = build_piunet<double>(cfg, 99);
    Rng rng(100);
    ad::fill_uniform(model.params.at("head.conv.w"), 0.2, rng);
    ad::fill_uniform(model.params.at("head.conv.b"), 0.2, rng);

    const int G = cfg.grid;
    const int radius = piunet_receptive_radius(cfg);
    std::vector<double> base_out, hit_out;
    {
        ad::Graph<double> g;
        auto* in = g.tensor({1, 3, G, G, G});
        for (auto& v : in->values) v = 0.3;
        base_out = piunet_forward(g, model, in)->values;
    }
    {
        ad::Graph<double> g;
        auto* in = g.tensor({1, 3, G, G, G});
        for (auto& v : in->values) v = 0.3;
        in->values[0] += 1.0;  // channel 0, corner voxel (0,0,0)
        hit_out = piunet_forward(g, model, in)->values;
    }
    const int plane = G * G * G;
    int changed = 0;
    int changed_outside = 0;
    for (int k = 0; k < 3; ++k)
        for (int d = 0; d < G; ++d)
            for (int h = 0; h < G; ++h)
                for (int w = 0; w < G; ++w) {
                    const std::size_t idx =
                        static_cast<std::size_t>(k * plane + (d * G + h) * G + w);
                    if (hit_out[idx] == base_out[idx]) continue;
                    ++changed;
                    if (std::max({d, h, w}) > radius) ++changed_outside;
                }
    CHECK(changed > 0);
    CHECK(changed_outside == 0);
}

TEST_CASE("receptive radius is exact for the convolutional signal path") {
    // Group normalization couples all positions through its pooled mean and
    // variance, so a strict zero-outside-the-radius check must run on the
    // normalization-free spatial skeleton: the same convolution / stride /
    // upsample topology the radius walk models.
    const int G = 48;
    const auto run_body = [&](bool hit) {
        ad::Graph<double> g;
        Rng wr(555);  // both runs draw identical weights
        const auto conv = [&](ad::TensorNode<double>* x, int cout, int stride) {
            const int cin = x->dim(1);
            auto* w = g.tensor({cout, cin, 3, 3, 3});
            auto* b = g.tensor({cout});
            for (auto& v : w->values) v = wr.uniform(-0.4, 0.4);
            for (auto& v : b->values) v = wr.uniform(-0.1, 0.1);
            return ad::conv3d(g, x, w, b, stride);
        };
        auto* x = g.tensor({1, 3, G, G, G});
        if (hit) x->values[0] = 1.0;  // channel 0, corner voxel (0,0,0)
        auto* h = conv(x, 2, 1);                                             // lift
        for (int j = 0; j < 4; ++j) h = ad::silu(g, conv(h, 2, 1));          // enc level 0
        h = conv(h, 4, 2);                                                   // downsample pair
        h = ad::silu(g, conv(h, 4, 1));
        for (int j = 0; j < 4; ++j) h = ad::silu(g, conv(h, 4, 1));          // enc level 1
        for (int j = 0; j < 4; ++j) h = ad::silu(g, conv(h, 4, 1));          // middle
        for (int j = 0; j < 4; ++j) h = ad::silu(g, conv(h, 4, 1));          // bottom decoder
        h = ad::upsample_nearest2x(g, h);
        for (int j = 0; j < 2; ++j) h = ad::silu(g, conv(h, 2, 1));          // up block
        for (int j = 0; j < 4; ++j) h = ad::silu(g, conv(h, 2, 1));          // dec level 0
        return conv(h, 3, 1)->values;                                        // head
    };

    PiuNetConfig cfg;
    cfg.grid = G;
    cfg.base_channels = 2;
    cfg.depth = 1;
    cfg.attn_at_bottleneck = false;
    const int radius = piunet_receptive_radius(cfg);
    REQUIRE(radius == 40);
    REQUIRE(radius < G - 1);

    const std::vector<double> base_out = run_body(false);
    const std::vector<double> hit_out = run_body(true);

    double max_outside = 0.0;
    double max_inside = 0.0;
    double max_at_edge = 0.0;  // shells radius-2..radius: reach should be tight
    const int plane = G * G * G;
    for (int k = 0; k < 3; ++k)
        for (int d = 0; d < G; ++d)
            for (int h = 0; h < G; ++h)
                for (int w = 0; w < G; ++w) {
                    const std::size_t idx =
                        static_cast<std::size_t>(k * plane + (d * G + h) * G + w);
                    const double diff = std::abs(hit_out[idx] - base_out[idx]);
                    const int cheb = std::max({d, h, w});
                    if (cheb > radius)
                        max_outside = std::max(max_outside, diff);
                    else
                        max_inside = std::max(max_inside, diff);
                    if (cheb >= radius - 2 && cheb <= radius)
                        max_at_edge = std::max(max_at_edge, diff);
                }
    CHECK(max_outside == 0.0);
    CHECK(max_inside > 0.0);
    CHECK(max_at_edge > 0.0);
}

TEST_CASE("full network gradients agree with finite differences") {
    auto model = build_piunet<double>(tiny_config(), 1234);
    Rng rng(4321);
    // Give the head nonzero weights so gradients reach every branch.
    ad::fill_uniform(model.params.at("head.conv.w"), 0.1, rng);
    ad::fill_uniform(model.params.at("head.conv.b"), 0.1, rng);

    std::vector<double> input_vals(static_cast<std::size_t>(3 * 8 * 8 * 8));
    std::vector<double> target_vals(input_vals.size());
    for (auto& v : input_vals) v = rng.uniform(-1.0, 1.0);
    for (auto& v : target_vals) v = rng.uniform(-1.0, 1.0);

    const auto run = [&](std::vector<std::vector<double>>* grads, std::vector<double>* din) {
        ad::Graph<double> g;
        auto* in = g.tensor({1, 3, 8, 8, 8}, input_vals, true);
        auto* out = piunet_forward(g, model, in);
        auto* loss = ad::loss_l1(g, out, target_vals);
        const double f = loss->values[0];
        if (grads != nullptr) {
            g.backward(loss);
            *grads = fdcheck::capture_grads(model.params);
            in->ensure_grad();
            *din = in->grad;
        }
        model.params.zero_grad();
        return f;
    };

    std::vector<std::vector<double>> grads;
    std::vector<double> input_grad;
    run(&grads, &input_grad);

    Rng probe_rng(777);
    const auto report = fdcheck::probe_param_gradients(
        model.params, [&] { return run(nullptr, nullptr); }, grads, probe_rng, 30, 1e-5);
    INFO("worst param rel err ", report.max_rel_err, " at leaf ", report.worst_leaf, " coord ",
         report.worst_coord, " analytic ", report.worst_analytic, " fd ", report.worst_fd);
    CHECK(report.checked == 30);
    CHECK(report.max_rel_err < 1e-4);

    // Same probing for the input tensor itself.
    double worst_in = 0.0;
    for (int pr = 0; pr < 6; ++pr) {
        const std::size_t j = static_cast<std::size_t>(probe_rng.uniform_index(input_vals.size()));
        const double orig = input_vals[j];
        const double h = 1e-5;
        input_vals[j] = orig + h;
        const double fp = run(nullptr, nullptr);
        input_vals[j] = orig - h;
        const double fm = run(nullptr, nullptr);
        input_vals[j] = orig;
        worst_in = std::max(worst_in, fdcheck::rel_err(input_grad[j], (fp - fm) / (2.0 * h)));
    }
    CHECK(worst_in < 1e-4);
}

TEST_CASE("identical seeds build identical models") {
    const PiuNetConfig cfg = tiny_config();
    auto a = build_piunet<double>(cfg, 2024);
    auto b = build_piunet<double>(cfg, 2024);
    auto c = build_piunet<double>(cfg, 2025);
    REQUIRE(a.params.names() == b.params.names());
    bool all_equal = true;
    for (const auto& name : a.params.names())
        all_equal = all_equal && a.params.at(name).values == b.params.at(name).values;
    CHECK(all_equal);

    bool any_diff = false;
    for (const auto& name : a.params.names())
        any_diff = any_diff || a.params.at(name).values != c.params.at(name).values;
    CHECK(any_diff);

    // Same model, same input, two forward passes: bit-identical outputs.
    Rng rng(5);
    std::vector<double> vals(static_cast<std::size_t>(3 * 8 * 8 * 8));
    for (auto& v : vals) v = rng.gauss();
    std::vector<double> out1, out2;
    {
        ad::Graph<double> g;
        out1 = piunet_forward(g, a, g.tensor({1, 3, 8, 8, 8}, vals))->values;
    }
    {
        ad::Graph<double> g;
        out2 = piunet_forward(g, a, g.tensor({1, 3, 8, 8, 8}, vals))->values;
    }
    CHECK(out1 == out2);
}

TEST_CASE("untrained prediction reproduces the pseudo-inverse estimate exactly") {
    const LeadField& lf = small_leadfield();
    auto model = build_piunet<double>(tiny_config(), 31);
    const PseudoInverseOperator op = eloreta_operator(lf, 0.05);

    Rng rng(6);
    Vector y(lf.n_sensors());
    for (int i = 0; i < y.size(); ++i) y(i) = rng.gauss();

    const Matrix coarse = apply(op, y);
    const Matrix refined = piunet_predict(model, op, y, lf.space);
    REQUIRE(refined.rows() == coarse.rows());
    REQUIRE(refined.cols() == 3);
    CHECK((refined - coarse).cwiseAbs().maxCoeff() == 0.0);

    // Zero measurements stay exactly zero through the identity refinement.
    const Matrix rest = piunet_predict(model, op, Vector::Zero(lf.n_sensors()), lf.space);
    CHECK(rest.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("prediction accepts any operator of matching dimensions") {
    const LeadField& lf = small_leadfield();
    auto model = build_piunet<double>(tiny_config(), 31);
    Rng rng(8);
    randomize_params(model.params, 0.05, rng);

    Vector y(lf.n_sensors());
    for (int i = 0; i < y.size(); ++i) y(i) = rng.gauss();

    const Matrix via_eloreta = piunet_predict(model, eloreta_operator(lf, 0.05), y, lf.space);
    const Matrix via_mne = piunet_predict(model, mne_operator(lf, 0.1), y, lf.space);
    CHECK(via_eloreta.rows() == via_mne.rows());
    CHECK(via_eloreta.allFinite());
    CHECK(via_mne.allFinite());
    CHECK((via_eloreta - via_mne).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("float builds run the same architecture") {
    auto model = build_piunet<float>(tiny_config(), 55);
    Rng rng(56);
    ad::fill_uniform(model.params.at("head.conv.w"), 0.1f, rng);
    ad::Graph<float> g;
    auto* in = g.tensor({1, 3, 8, 8, 8});
    for (auto& v : in->values) v = static_cast<float>(rng.gauss());
    auto* out = piunet_forward(g, model, in);
    REQUIRE(out->shape == std::vector<int>{1, 3, 8, 8, 8});
    float mx = 0.0f;
    for (float v : out->values) {
        CHECK(std::isfinite(v));
        mx = std::max(mx, std::abs(v));
    }
    CHECK(mx > 0.0f);
}
