#include "neuroloc/piunet.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>

namespace neuroloc {

void PiuNetConfig::validate() const {
    require(grid >= 2, ErrorKind::data, "model grid must be at least 2");
    require(depth >= 1, ErrorKind::data, "model depth must be at least 1");
    require(grid % (1 << depth) == 0, ErrorKind::data,
            "model grid must be divisible by 2^depth");
    require(base_channels >= 1, ErrorKind::data, "base_channels must be positive");
    require(blocks_per_level >= 1, ErrorKind::data, "blocks_per_level must be positive");
    require(in_channels >= 1 && out_channels >= 1, ErrorKind::data,
            "channel counts must be positive");
    require(groupnorm_groups >= 1, ErrorKind::data, "groupnorm_groups must be positive");
}

PiuNetConfig PiuNetConfig::desk() {
    PiuNetConfig cfg;
    cfg.grid = 16;
    cfg.base_channels = 8;
    cfg.depth = 2;
    cfg.attn_at_bottleneck = true;
    return cfg;
}

PiuNetConfig PiuNetConfig::full() {
    PiuNetConfig cfg;
    cfg.grid = 32;
    cfg.base_channels = 32;
    cfg.depth = 2;
    cfg.attn_at_bottleneck = true;
    return cfg;
}

namespace {

constexpr double kGnEps = 1e-5;

// Largest divisor of `channels` that is <= the configured group count.
int norm_groups(int want, int channels) {
    int gg = std::min(want, channels);
    while (channels % gg != 0) --gg;
    return gg;
}

template <typename S>
void create_conv(ad::ParamStore<S>& ps, const std::string& name, int cout, int cin, int k,
                 Rng& rng) {
    ad::TensorNode<S>& w = ps.create(name + ".w", {cout, cin, k, k, k});
    ad::TensorNode<S>& b = ps.create(name + ".b", {cout});
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin) * k * k * k);
    ad::fill_uniform(w, bound, rng);
    ad::fill_uniform(b, bound, rng);
}

template <typename S>
void create_gn(ad::ParamStore<S>& ps, const std::string& name, int channels) {
    ad::TensorNode<S>& g = ps.create(name + ".g", {channels});
    ps.create(name + ".b", {channels});
    std::fill(g.values.begin(), g.values.end(), S(1));
}

// gn -> silu -> conv3 -> gn -> silu -> conv3, plus a 1x1x1 projection shortcut
// whenever the channel count changes (always the case for strided blocks here).
template <typename S>
void create_res(ad::ParamStore<S>& ps, const std::string& prefix, int cin, int cout, Rng& rng) {
    create_gn(ps, prefix + ".gn1", cin);
    create_conv(ps, prefix + ".conv1", cout, cin, 3, rng);
    create_gn(ps, prefix + ".gn2", cout);
    create_conv(ps, prefix + ".conv2", cout, cout, 3, rng);
    if (cin != cout) create_conv(ps, prefix + ".skip", cout, cin, 1, rng);
}

template <typename S>
ad::TensorNode<S>* res_fwd(ad::Graph<S>& g, ad::ParamStore<S>& ps, const std::string& prefix,
                           ad::TensorNode<S>* x, int gn_want, int stride) {
    const int cin = x->dim(1);
    ad::TensorNode<S>* h =
        ad::group_norm(g, x, norm_groups(gn_want, cin), static_cast<S>(kGnEps),
                       &ps.at(prefix + ".gn1.g"), &ps.at(prefix + ".gn1.b"));
    h = ad::silu(g, h);
    h = ad::conv3d(g, h, &ps.at(prefix + ".conv1.w"), &ps.at(prefix + ".conv1.b"), stride);
    const int cout = h->dim(1);
    h = ad::group_norm(g, h, norm_groups(gn_want, cout), static_cast<S>(kGnEps),
                       &ps.at(prefix + ".gn2.g"), &ps.at(prefix + ".gn2.b"));
    h = ad::silu(g, h);
    h = ad::conv3d(g, h, &ps.at(prefix + ".conv2.w"), &ps.at(prefix + ".conv2.b"), 1);
    ad::TensorNode<S>* shortcut = x;
    if (ad::TensorNode<S>* sw = ps.find(prefix + ".skip.w")) {
        shortcut = ad::conv3d(g, x, sw, &ps.at(prefix + ".skip.b"), stride);
    } else {
        require(stride == 1 && cin == cout, ErrorKind::data,
                "residual block is missing its projection shortcut");
    }
    return ad::add(g, h, shortcut);
}

}  // namespace

template <typename S>
PiuNetModel<S> build_piunet(const PiuNetConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    PiuNetModel<S> model;
    model.config = cfg;
    ad::ParamStore<S>& ps = model.params;
    Rng rng(seed);

    const int C = cfg.base_channels;
    const int D = cfg.depth;
    auto ch = [&](int l) { return C << l; };

    // Parameters are created in forward order; because initialization draws
    // from a single stream, this order also pins the initial values.
    create_conv(ps, "lift", C, cfg.in_channels, 3, rng);
    for (int l = 0; l <= D; ++l) {
        for (int j = 0; j < cfg.blocks_per_level; ++j)
            create_res(ps, "enc" + std::to_string(l) + ".res" + std::to_string(j), ch(l), ch(l),
                       rng);
        if (l < D) create_res(ps, "down" + std::to_string(l), ch(l), ch(l + 1), rng);
    }
    create_res(ps, "mid.res0", ch(D), ch(D), rng);
    if (cfg.attn_at_bottleneck)
        for (const char* part : {"q", "k", "v", "o"})
            create_conv(ps, std::string("mid.attn.") + part, ch(D), ch(D), 1, rng);
    create_res(ps, "mid.res1", ch(D), ch(D), rng);
    create_res(ps, "dec" + std::to_string(D) + ".res0", 2 * ch(D), ch(D), rng);
    create_res(ps, "dec" + std::to_string(D) + ".res1", ch(D), ch(D), rng);
    for (int l = D - 1; l >= 0; --l) {
        create_res(ps, "up" + std::to_string(l), ch(l + 1), ch(l + 1), rng);
        create_res(ps, "dec" + std::to_string(l) + ".res0", 3 * ch(l), ch(l), rng);
        create_res(ps, "dec" + std::to_string(l) + ".res1", ch(l), ch(l), rng);
    }
    create_gn(ps, "head.gn", C);
    // The head stays at zero so an untrained model is exactly the identity
    // refinement; ParamStore zero-fills, so no draws happen here.
    ps.create("head.conv.w", {cfg.out_channels, C, 3, 3, 3});
    ps.create("head.conv.b", {cfg.out_channels});

    require(ps.total_params() == piunet_param_count(cfg), ErrorKind::data,
            "allocated parameter count does not match the configuration");
    return model;
}

std::int64_t piunet_param_count(const PiuNetConfig& cfg) {
    cfg.validate();
    auto gnp = [](int c) { return 2LL * c; };
    auto convp = [](int cout, int cin, int k) {
        return static_cast<std::int64_t>(cout) * cin * k * k * k + cout;
    };
    auto resp = [&](int cin, int cout) {
        std::int64_t t = gnp(cin) + convp(cout, cin, 3) + gnp(cout) + convp(cout, cout, 3);
        if (cin != cout) t += convp(cout, cin, 1);
        return t;
    };
    const int C = cfg.base_channels;
    const int D = cfg.depth;
    auto ch = [&](int l) { return C << l; };

    std::int64_t total = convp(C, cfg.in_channels, 3);
    for (int l = 0; l <= D; ++l) {
        total += cfg.blocks_per_level * resp(ch(l), ch(l));
        if (l < D) total += resp(ch(l), ch(l + 1));
    }
    total += resp(ch(D), ch(D));
    if (cfg.attn_at_bottleneck) total += 4 * convp(ch(D), ch(D), 1);
    total += resp(ch(D), ch(D));
    total += resp(2 * ch(D), ch(D)) + resp(ch(D), ch(D));
    for (int l = D - 1; l >= 0; --l)
        total += resp(ch(l + 1), ch(l + 1)) + resp(3 * ch(l), ch(l)) + resp(ch(l), ch(l));
    total += gnp(C) + convp(cfg.out_channels, C, 3);
    return total;
}

int piunet_receptive_radius(const PiuNetConfig& cfg) {
    cfg.validate();
    // With bottleneck attention every site can reach every other one, so the
    // bound degenerates to the whole volume.
    if (cfg.attn_at_bottleneck) return cfg.grid;

    int r = 0;
    int scale = 1;  // input voxels per voxel at the current resolution
    auto conv3 = [&] { r += scale; };
    auto res = [&] {
        conv3();
        conv3();
    };
    conv3();  // lift
    for (int l = 0; l <= cfg.depth; ++l) {
        for (int j = 0; j < cfg.blocks_per_level; ++j) res();
        if (l < cfg.depth) {
            conv3();  // strided first conv reads +-1 at the incoming resolution
            scale *= 2;
            conv3();
        }
    }
    res();  // mid.res0
    res();  // mid.res1
    res();  // dec at the bottom level, first block
    res();  // second block
    for (int l = cfg.depth - 1; l >= 0; --l) {
        scale /= 2;
        r += scale;  // nearest-neighbor upsampling shifts by at most one fine voxel
        res();       // up block
        res();       // dec res0
        res();       // dec res1
    }
    conv3();  // head
    return r;
}

template <typename S>
ad::TensorNode<S>* piunet_forward(ad::Graph<S>& g, PiuNetModel<S>& model,
                                  ad::TensorNode<S>* input) {
    const PiuNetConfig& cfg = model.config;
    cfg.validate();
    require(input != nullptr && input->shape.size() == 5, ErrorKind::data,
            "model input must be a 5-d tensor");
    require(input->dim(1) == cfg.in_channels && input->dim(2) == cfg.grid &&
                input->dim(3) == cfg.grid && input->dim(4) == cfg.grid,
            ErrorKind::data, "input tensor does not match the model grid");
    ad::ParamStore<S>& ps = model.params;
    const int gw = cfg.groupnorm_groups;

    ad::TensorNode<S>* h = ad::conv3d(g, input, &ps.at("lift.w"), &ps.at("lift.b"), 1);
    std::vector<ad::TensorNode<S>*> skips;
    for (int l = 0; l <= cfg.depth; ++l) {
        for (int j = 0; j < cfg.blocks_per_level; ++j)
            h = res_fwd(g, ps, "enc" + std::to_string(l) + ".res" + std::to_string(j), h, gw, 1);
        skips.push_back(h);
        if (l < cfg.depth) h = res_fwd(g, ps, "down" + std::to_string(l), h, gw, 2);
    }
    h = res_fwd(g, ps, "mid.res0", h, gw, 1);
    if (cfg.attn_at_bottleneck) {
        ad::AttentionParams<S> ap;
        ap.wq = &ps.at("mid.attn.q.w");
        ap.bq = &ps.at("mid.attn.q.b");
        ap.wk = &ps.at("mid.attn.k.w");
        ap.bk = &ps.at("mid.attn.k.b");
        ap.wv = &ps.at("mid.attn.v.w");
        ap.bv = &ps.at("mid.attn.v.b");
        ap.wo = &ps.at("mid.attn.o.w");
        ap.bo = &ps.at("mid.attn.o.b");
        h = ad::attention(g, h, ap);
    }
    h = res_fwd(g, ps, "mid.res1", h, gw, 1);
    for (int l = cfg.depth; l >= 0; --l) {
        if (l < cfg.depth) {
            h = ad::upsample_nearest2x(g, h);
            h = res_fwd(g, ps, "up" + std::to_string(l), h, gw, 1);
        }
        h = ad::concat_channels(g, skips[static_cast<std::size_t>(l)], h);
        h = res_fwd(g, ps, "dec" + std::to_string(l) + ".res0", h, gw, 1);
        h = res_fwd(g, ps, "dec" + std::to_string(l) + ".res1", h, gw, 1);
    }
    h = ad::group_norm(g, h, norm_groups(gw, cfg.base_channels), static_cast<S>(kGnEps),
                       &ps.at("head.gn.g"), &ps.at("head.gn.b"));
    h = ad::silu(g, h);
    return ad::conv3d(g, h, &ps.at("head.conv.w"), &ps.at("head.conv.b"), 1);
}

GridEmbedding make_grid_embedding(const SourceSpace& space, int grid) {
    require(grid >= 1, ErrorKind::data, "model grid must be positive");
    GridEmbedding em;
    em.grid = grid;
    for (int a = 0; a < 3; ++a) {
        require(space.grid_dims[a] <= grid, ErrorKind::data,
                "source grid does not fit in the model lattice");
        em.offset[a] = (grid - space.grid_dims[a]) / 2;
    }
    em.sites.reserve(static_cast<std::size_t>(space.count()));
    for (int i = 0; i < space.count(); ++i) {
        const auto& v = space.voxel_to_grid[static_cast<std::size_t>(i)];
        const int a = v[0] + em.offset[0];
        const int b = v[1] + em.offset[1];
        const int c = v[2] + em.offset[2];
        em.sites.push_back((a * grid + b) * grid + c);
    }
    return em;
}

template <typename S>
Matrix piunet_predict(PiuNetModel<S>& model, const PseudoInverseOperator& op, const Vector& y,
                      const SourceSpace& space) {
    const Matrix coarse = apply(op, y);
    const GridEmbedding em = make_grid_embedding(space, model.config.grid);
    ad::Graph<S> g;
    ad::TensorNode<S>* input = g.tensor(
        {1, model.config.in_channels, model.config.grid, model.config.grid, model.config.grid});
    embed_to_grid(coarse, em, input->values.data());
    ad::TensorNode<S>* out = piunet_forward(g, model, input);
    return coarse + extract_from_grid(out->values.data(), em);
}

template PiuNetModel<double> build_piunet<double>(const PiuNetConfig&, std::uint64_t);
template PiuNetModel<float> build_piunet<float>(const PiuNetConfig&, std::uint64_t);
template ad::TensorNode<double>* piunet_forward<double>(ad::Graph<double>&, PiuNetModel<double>&,
                                                        ad::TensorNode<double>*);
template ad::TensorNode<float>* piunet_forward<float>(ad::Graph<float>&, PiuNetModel<float>&,
                                                      ad::TensorNode<float>*);
template Matrix piunet_predict<double>(PiuNetModel<double>&, const PseudoInverseOperator&,
                                       const Vector&, const SourceSpace&);
template Matrix piunet_predict<float>(PiuNetModel<float>&, const PseudoInverseOperator&,
                                      const Vector&, const SourceSpace&);

}  // namespace neuroloc
