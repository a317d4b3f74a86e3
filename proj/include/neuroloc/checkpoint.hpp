#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "neuroloc/autodiff.hpp"
#include "neuroloc/fcn_baseline.hpp"
#include "neuroloc/lininv.hpp"
#include "neuroloc/piunet.hpp"

namespace neuroloc {

// On-disk checkpoint directory:
//   config.json       model kind + full model configuration
//   params.bin/.json  parameter tensors as concatenated records + manifest
//                     (name -> byte offset, record size, dtype, shape)
//   train_state.json  step, base seed, optimizer hyperparameters and t
//   adam.bin/.json    first/second moments, names m.<param> / v.<param>
// Training resumes from (seed, step) because every step derives its own
// sample stream; no generator internals need to be stored.

struct TrainCheckpoint {
    std::string model_kind;  // "piunet" or "fcn"
    PiuNetConfig piunet;     // meaningful when model_kind == "piunet"
    FcnConfig fcn;           // meaningful when model_kind == "fcn"
    std::int64_t step = 0;
    std::uint64_t seed = 0;
    double lr = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t adam_t = 0;
    bool has_adam = false;
    // Coarse-estimate operator the network was trained on; lets later
    // consumers rebuild the exact same operator from a fresh lead field.
    OperatorSpec op;
    bool has_op = false;

    void validate() const;
};

// Writes a named-tensor archive <stem>.bin + <stem>.json into `dir`.
template <typename S>
void save_param_archive(const std::filesystem::path& dir, const std::string& stem,
                        const ad::ParamStore<S>& params);

// Loads an archive into an existing store; names, order, shapes, and dtype
// must all match exactly (the store defines the expected model).
template <typename S>
void load_param_archive(const std::filesystem::path& dir, const std::string& stem,
                        ad::ParamStore<S>& params);

template <typename S>
void save_checkpoint(const std::filesystem::path& dir, const TrainCheckpoint& meta,
                     const ad::ParamStore<S>& params, const ad::AdamState<S>* adam = nullptr);

TrainCheckpoint read_checkpoint_meta(const std::filesystem::path& dir);

template <typename S>
void load_checkpoint_params(const std::filesystem::path& dir, ad::ParamStore<S>& params);

// Requires meta.has_adam; the state must have been constructed for `params`.
template <typename S>
void load_checkpoint_adam(const std::filesystem::path& dir, ad::ParamStore<S>& params,
                          ad::AdamState<S>& adam);

// Convenience loaders that rebuild the model from config.json and then fill
// in the stored parameter values.
template <typename S>
PiuNetModel<S> load_piunet_checkpoint(const std::filesystem::path& dir);
template <typename S>
FcnModel<S> load_fcn_checkpoint(const std::filesystem::path& dir);

}  // namespace neuroloc
