#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "neuroloc/autodiff.hpp"
#include "neuroloc/geometry.hpp"
#include "neuroloc/lininv.hpp"

namespace neuroloc {

// Volumetric residual U-Net that refines a pseudo-inverse source estimate.
// The estimate is embedded into a cubic lattice, passed through the network,
// and the result is added back to the estimate, so a zero-initialized output
// head makes the untrained model reproduce its input exactly.
struct PiuNetConfig {
    int grid = 16;           // cube side G of the embedding lattice
    int base_channels = 8;   // channels at the top resolution; doubled per downsample
    int depth = 2;           // number of stride-2 downsamplings
    int blocks_per_level = 2;
    bool attn_at_bottleneck = true;
    int in_channels = 3;
    int out_channels = 3;
    int groupnorm_groups = 8;  // clamped per site to a divisor of the channel count

    void validate() const;

    // Desk-scale default: trains in minutes on a single CPU core.
    static PiuNetConfig desk();
    // Full-scale configuration (32-grid, 32 base channels, three resolution levels).
    static PiuNetConfig full();
};

template <typename S>
struct PiuNetModel {
    PiuNetConfig config;
    ad::ParamStore<S> params;
};

// Creates all parameters in forward order and initializes them from `seed`:
// convolutions get centered-uniform fan-in scaling, group norms start as the
// identity affine, and the output head starts at exactly zero.
template <typename S>
PiuNetModel<S> build_piunet(const PiuNetConfig& cfg, std::uint64_t seed);

// Parameter total implied by the configuration; the builder's allocation is
// asserted against this exactly.
std::int64_t piunet_param_count(const PiuNetConfig& cfg);

// Chebyshev radius (in input voxels) that bounds how far a single-voxel
// perturbation can propagate when bottleneck attention is disabled.
int piunet_receptive_radius(const PiuNetConfig& cfg);

template <typename S>
ad::TensorNode<S>* piunet_forward(ad::Graph<S>& g, PiuNetModel<S>& model,
                                  ad::TensorNode<S>* input);

// ---------------------------------------------------------------------------
// Lattice embedding
// ---------------------------------------------------------------------------

// Bijection between source-space voxels and sites of a G^3 lattice with the
// source bounding box centered; all other lattice sites are zero padding.
struct GridEmbedding {
    int grid = 0;
    std::array<int, 3> offset{0, 0, 0};
    std::vector<int> sites;  // flat spatial index per voxel: (d * G + h) * G + w

    int count() const { return static_cast<int>(sites.size()); }
};

GridEmbedding make_grid_embedding(const SourceSpace& space, int grid);

// field (N x 3, f64) -> values of a [3, G, G, G] tensor (channel-major).
template <typename S>
void embed_to_grid(const Matrix& field, const GridEmbedding& em, S* dst) {
    require(field.rows() == em.count() && field.cols() == 3, ErrorKind::data,
            "field shape does not match the grid embedding");
    const std::ptrdiff_t plane =
        static_cast<std::ptrdiff_t>(em.grid) * em.grid * em.grid;
    std::fill(dst, dst + 3 * plane, S(0));
    for (int i = 0; i < em.count(); ++i)
        for (int k = 0; k < 3; ++k)
            dst[k * plane + em.sites[static_cast<std::size_t>(i)]] =
                static_cast<S>(field(i, k));
}

template <typename S>
std::vector<S> embed_to_grid(const Matrix& field, const GridEmbedding& em) {
    std::vector<S> out(static_cast<std::size_t>(3) * em.grid * em.grid * em.grid);
    embed_to_grid(field, em, out.data());
    return out;
}

// Values of a [3, G, G, G] tensor -> field (N x 3); padding sites ignored.
template <typename S>
Matrix extract_from_grid(const S* src, const GridEmbedding& em) {
    const std::ptrdiff_t plane =
        static_cast<std::ptrdiff_t>(em.grid) * em.grid * em.grid;
    Matrix field(em.count(), 3);
    for (int i = 0; i < em.count(); ++i)
        for (int k = 0; k < 3; ++k)
            field(i, k) = static_cast<double>(
                src[k * plane + em.sites[static_cast<std::size_t>(i)]]);
    return field;
}

template <typename S>
Matrix extract_from_grid(const std::vector<S>& src, const GridEmbedding& em) {
    require(static_cast<std::ptrdiff_t>(src.size()) ==
                static_cast<std::ptrdiff_t>(3) * em.grid * em.grid * em.grid,
            ErrorKind::data, "grid tensor size does not match the embedding");
    return extract_from_grid(src.data(), em);
}

// Convenience one-shot forms.
template <typename S>
std::vector<S> embed_to_grid(const Matrix& field, const SourceSpace& space, int grid) {
    return embed_to_grid<S>(field, make_grid_embedding(space, grid));
}
template <typename S>
Matrix extract_from_grid(const std::vector<S>& src, const SourceSpace& space, int grid) {
    return extract_from_grid<S>(src, make_grid_embedding(space, grid));
}

// Full inference path: pseudo-inverse estimate plus the network's refinement.
// The operator is interchangeable at inference time; the model never sees the
// lead field directly.
template <typename S>
Matrix piunet_predict(PiuNetModel<S>& model, const PseudoInverseOperator& op, const Vector& y,
                      const SourceSpace& space);

}  // namespace neuroloc
