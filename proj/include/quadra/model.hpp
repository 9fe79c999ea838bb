#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "quadra/config.hpp"
#include "quadra/neuron.hpp"
#include "quadra/ops.hpp"
#include "quadra/tape.hpp"

namespace quadra {

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// AUTO: every layer as primitive tape ops. HYBRID: quadratic layers as
/// SYMBOLIC nodes, everything else (first-order layers, batch-norm,
/// activations, head, loss) AUTO.
enum class BackpropMode { Auto, Hybrid };

std::string mode_tag(BackpropMode m);
BackpropMode parse_mode(const std::string& tag);  // ConfigError on unknown tags

struct LayerState {
  LayerParams params;
  Tensor gamma, beta;                  // only with batch-norm
  Tensor running_mean, running_var;    // only with batch-norm
};

struct ModelParams {
  std::vector<LayerState> layers;
  Tensor head_w;  // classes × in
  Tensor head_b;
};

struct NamedTensor {
  std::string layer;  // "layer<i>" or "head"
  std::string role;   // Wa, ba, ..., gamma, beta, running_mean, running_var, W, b
  Tensor value;
};

std::string layer_label(std::size_t index);

/// Layer parameters from init_params, batch-norm gamma=1/beta=0, running
/// mean 0 / variance 1, Kaiming head.
ModelParams init_model(const ModelConfig& cfg, std::uint64_t seed);

/// Trainable tensors in a fixed order: per layer the family roles then
/// gamma, beta; finally head W, b.
std::vector<NamedTensor> named_parameters(const ModelParams& p);
void assign_parameters(ModelParams& p, const std::vector<Tensor>& values);
/// Running statistics (not trained).
std::vector<NamedTensor> named_buffers(const ModelParams& p);

std::uint64_t parameter_count(const ModelConfig& cfg);

struct RecordedModel {
  Var logits;
  std::vector<Var> layer_outputs;  // after batch-norm and activation
  std::vector<Var> params;         // named_parameters order
  std::vector<ops::BatchNormStats> bn_stats;  // per layer; empty tensors without batch-norm
  std::vector<std::size_t> bn_counts;         // values per channel in the batch
};

/// Records the model on `tape`. `x` is a batch of dataset samples
/// (N×C×H×W or N×F); fc layers flatten their input as needed.
/// `training` selects batch statistics for batch-norm.
RecordedModel record_model(Tape& tape, const ModelConfig& cfg, const ModelParams& params,
                           const Tensor& x, BackpropMode mode, bool training);

/// Throws ConfigError if HYBRID would need a closed form that is not registered.
void check_mode_support(const ModelConfig& cfg, BackpropMode mode);

/// Eval-mode logits.
Tensor predict(const ModelConfig& cfg, const ModelParams& params, const Tensor& x);

/// running ← (1−m)·running + m·batch, with the unbiased batch variance.
void update_running_stats(ModelParams& params, const RecordedModel& recorded);

}  // namespace quadra
