#pragma once

#include <cstdint>

#include "neuroloc/autodiff.hpp"
#include "neuroloc/geometry.hpp"

namespace neuroloc {

// End-to-end fully connected baseline: measurements straight to a source
// field, no physics operator in the loop. Four affine layers with ReLU
// between them and a linear output.
struct FcnConfig {
    int n_sensors = 0;  // input dimension M
    int n_sources = 0;  // output is 3 * n_sources (voxel-major vectors)
    int width = 128;    // hidden width; full-scale preset uses 1024
    int hidden_layers = 3;

    void validate() const;
};

template <typename S>
struct FcnModel {
    FcnConfig config;
    ad::ParamStore<S> params;
};

// Creates layer parameters in forward order with centered-uniform fan-in
// initialization (weights and biases).
template <typename S>
FcnModel<S> build_fcn(const FcnConfig& cfg, std::uint64_t seed);

std::int64_t fcn_param_count(const FcnConfig& cfg);

// y: [B, M] -> [B, 3N]; component k of voxel i lands at column 3i+k, the same
// voxel-major layout the simulator and losses use.
template <typename S>
ad::TensorNode<S>* fcn_forward(ad::Graph<S>& g, FcnModel<S>& model, ad::TensorNode<S>* y);

// One-shot inference for a single measurement vector; returns an N x 3 field.
template <typename S>
Matrix fcn_predict(FcnModel<S>& model, const Vector& y);

}  // namespace neuroloc
