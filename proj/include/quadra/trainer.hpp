#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "quadra/dataset.hpp"
#include "quadra/diagnostics.hpp"
#include "quadra/memory_ledger.hpp"
#include "quadra/model.hpp"

namespace quadra {

/// eta_min + ½(lr0 − eta_min)(1 + cos(π·epoch/t_max)); epochs past t_max
/// clamp to eta_min with a warning.
double cosine_lr(std::size_t epoch, double lr0, std::size_t t_max, double eta_min = 0.0);

struct OptimizerState {
  std::vector<Tensor> velocity;  // mirrors named_parameters
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double lr0 = 0.1;
  std::size_t t_max = 1;
  double eta_min = 0.0;
};

OptimizerState make_optimizer(const ModelParams& params, double lr0, std::size_t t_max);

/// v ← m·v + g + wd·p ; p ← p − lr·v. Raises NumericError naming the tensor
/// when a gradient is not finite; nothing is updated in that case.
void sgd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
              const std::vector<std::string>& names, OptimizerState& state, double lr);
void sgd_step(ModelParams& params, const std::vector<Tensor>& grads, OptimizerState& state,
              double lr);

struct StepResult {
  double loss = 0.0;
  std::size_t correct = 0;
  std::vector<Tensor> grads;  // named_parameters order
  MemoryLedger ledger;
  std::vector<ops::BatchNormStats> bn_stats;
  std::vector<std::size_t> bn_counts;
};

/// One forward/backward pass in training mode. HYBRID records quadratic
/// layers as closed-form nodes; both modes fill the ledger.
StepResult hybrid_backward(const ModelConfig& cfg, const ModelParams& params, const Tensor& x,
                           std::span<const int> labels, BackpropMode mode);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  std::uint64_t peak_cached = 0;
};

struct TrainOptions {
  BackpropMode mode = BackpropMode::Hybrid;
  std::size_t epochs = 0;  // 0: take the config's epochs
  std::size_t t_max = 0;   // 0: same as epochs
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double eta_min = 0.0;
  std::size_t eval_batch = 1000;
  bool gradient_stats = true;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochRecord> history;
  std::vector<GradientStats> gradient_stats;  // last step of each epoch
  bool diverged = false;
  std::string divergence;
};

/// Mini-batch SGD with the cosine schedule. Batches are reshuffled each epoch
/// from the config seed. A non-finite loss or gradient halts training and
/// returns the parameters from before the failing step.
TrainResult train(const ModelConfig& cfg, ModelParams init, const Dataset& train_set,
                  const Dataset* test_set, const TrainOptions& options = {});

double evaluate(const ModelConfig& cfg, const ModelParams& params, const Dataset& ds,
                std::size_t batch = 1000);

CsvTable history_table(const std::vector<EpochRecord>& history);

struct MemoryProfile {
  MemoryLedger auto_ledger;
  MemoryLedger hybrid_ledger;
  double saving = 0.0;  // 1 − hybrid peak / auto peak (0 when auto caches nothing)
  std::uint64_t budget = 0;  // 0: no budget
  bool auto_over_budget = false;
  bool hybrid_over_budget = false;
};

/// Ledger of one training step replayed on shapes only: the same retention
/// and release events the tape would produce, without computing values.
MemoryLedger simulate_ledger(const ModelConfig& cfg, std::size_t batch, BackpropMode mode);
MemoryProfile profile_memory(const ModelConfig& cfg, std::size_t batch, std::uint64_t budget = 0);

/// Parameters and running statistics as length-prefixed little-endian blobs
/// (`path`) plus a JSON manifest (`path`.json) holding the config text and
/// (layer, role, shape, offset) per tensor.
void save_checkpoint(const ModelConfig& cfg, const ModelParams& params, const std::string& path);
struct Checkpoint {
  ModelConfig cfg;
  ModelParams params;
};
Checkpoint load_checkpoint(const std::string& path);

}  // namespace quadra
