#include "neuroloc/fcn_baseline.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace neuroloc {

void FcnConfig::validate() const {
    require(n_sensors >= 1, ErrorKind::data, "fcn needs at least one sensor");
    require(n_sources >= 1, ErrorKind::data, "fcn needs at least one source voxel");
    require(width >= 1, ErrorKind::data, "fcn width must be positive");
    require(hidden_layers >= 1, ErrorKind::data, "fcn needs at least one hidden layer");
}

namespace {

std::vector<int> layer_dims(const FcnConfig& cfg) {
    std::vector<int> dims;
    dims.push_back(cfg.n_sensors);
    for (int i = 0; i < cfg.hidden_layers; ++i) dims.push_back(cfg.width);
    dims.push_back(3 * cfg.n_sources);
    return dims;
}

}  // namespace

template <typename S>
FcnModel<S> build_fcn(const FcnConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    FcnModel<S> model;
    model.config = cfg;
    Rng rng(seed);
    const std::vector<int> dims = layer_dims(cfg);
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
        const int fan_in = dims[i];
        const int fan_out = dims[i + 1];
        const std::string prefix = "layer" + std::to_string(i);
        ad::TensorNode<S>& w = model.params.create(prefix + ".w", {fan_out, fan_in});
        ad::TensorNode<S>& b = model.params.create(prefix + ".b", {fan_out});
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        ad::fill_uniform(w, bound, rng);
        ad::fill_uniform(b, bound, rng);
    }
    require(model.params.total_params() == fcn_param_count(cfg), ErrorKind::data,
            "allocated parameter count does not match the configuration");
    return model;
}

std::int64_t fcn_param_count(const FcnConfig& cfg) {
    cfg.validate();
    const std::vector<int> dims = layer_dims(cfg);
    std::int64_t total = 0;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i)
        total += static_cast<std::int64_t>(dims[i + 1]) * dims[i] + dims[i + 1];
    return total;
}

template <typename S>
ad::TensorNode<S>* fcn_forward(ad::Graph<S>& g, FcnModel<S>& model, ad::TensorNode<S>* y) {
    const FcnConfig& cfg = model.config;
    cfg.validate();
    require(y != nullptr && y->shape.size() == 2 && y->dim(1) == cfg.n_sensors,
            ErrorKind::data, "fcn input must be [batch, n_sensors]");
    ad::TensorNode<S>* h = y;
    const int n_layers = cfg.hidden_layers + 1;
    for (int i = 0; i < n_layers; ++i) {
        const std::string prefix = "layer" + std::to_string(i);
        h = ad::linear(g, h, &model.params.at(prefix + ".w"), &model.params.at(prefix + ".b"));
        if (i + 1 < n_layers) h = ad::relu(g, h);
    }
    return h;
}

template <typename S>
Matrix fcn_predict(FcnModel<S>& model, const Vector& y) {
    require(y.size() == model.config.n_sensors, ErrorKind::data,
            "measurement length does not match the model");
    ad::Graph<S> g;
    ad::TensorNode<S>* in = g.tensor({1, model.config.n_sensors});
    for (int i = 0; i < y.size(); ++i) in->values[static_cast<std::size_t>(i)] =
        static_cast<S>(y(i));
    ad::TensorNode<S>* out = fcn_forward(g, model, in);
    const int n = model.config.n_sources;
    Matrix field(n, 3);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < 3; ++k)
            field(i, k) = static_cast<double>(out->values[static_cast<std::size_t>(3 * i + k)]);
    return field;
}

template FcnModel<double> build_fcn<double>(const FcnConfig&, std::uint64_t);
template FcnModel<float> build_fcn<float>(const FcnConfig&, std::uint64_t);
template ad::TensorNode<double>* fcn_forward<double>(ad::Graph<double>&, FcnModel<double>&,
                                                     ad::TensorNode<double>*);
template ad::TensorNode<float>* fcn_forward<float>(ad::Graph<float>&, FcnModel<float>&,
                                                   ad::TensorNode<float>*);
template Matrix fcn_predict<double>(FcnModel<double>&, const Vector&);
template Matrix fcn_predict<float>(FcnModel<float>&, const Vector&);

}  // namespace neuroloc
