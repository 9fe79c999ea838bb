#pragma once

#include <string>
#include <vector>

#include "quadra/dataset.hpp"
#include "quadra/model.hpp"
#include "quadra/trainer.hpp"

namespace quadra {

inline constexpr double kEpsAcc = 1e-4;

/// Re-tags every layer with `family` keeping all dimensions; quadratic layers
/// get batch-norm. The input must be first-order.
ModelConfig replace_layers(const ModelConfig& cfg, NeuronFamily family);

struct EvalSets {
  const Dataset* train = nullptr;  // fine-tuning data
  const Dataset* eval = nullptr;   // accuracy measurements
};

struct RIOptions {
  std::size_t finetune_epochs = 2;
  double eps_acc = kEpsAcc;
  BackpropMode mode = BackpropMode::Hybrid;
};

struct RIRow {
  std::size_t layer = 0;
  double p_mpar = 0.0;
  double p_tlat = 0.0;
  double delta_acc = 0.0;
  double ri = 0.0;
  std::size_t rank = 0;  // 1 = removed first
  double full_acc = 0.0;
  double ablated_acc = 0.0;
};

double ri_value(double p_mpar, double p_tlat, double delta_acc, double eps_acc = kEpsAcc);

/// Every layer except the head, when at least two layers exist.
bool removable(const ModelConfig& cfg, std::size_t layer);

struct Ablated {
  ModelConfig cfg;
  ModelParams params;
  bool adapter = false;
};

/// Drops `layer`. When its width or stride changes the shape, a first-order
/// adapter (1×1 conv or fc) with the layer's in/out, stride and bn/act flags
/// takes its place, freshly initialised from `seed`.
Ablated ablate(const ModelConfig& cfg, const ModelParams& params, std::size_t layer,
               std::uint64_t seed);

/// Shares of parameters and MACs (head included in the totals).
double param_share(const ModelConfig& cfg, std::size_t layer);
double mac_share(const ModelConfig& cfg, std::size_t layer);

RIRow compute_ri(const ModelConfig& cfg, const ModelParams& params, const EvalSets& sets,
                 std::size_t layer, const RIOptions& opt = {});

/// Rows for every removable layer whose ablation shrinks the model, ranked by
/// RI (ties: deeper layer first). A layer that is already its own 1×1
/// first-order adapter is left out.
std::vector<RIRow> ri_report(const ModelConfig& cfg, const ModelParams& params,
                             const EvalSets& sets, const RIOptions& opt = {});

struct RemovalStep {
  std::size_t iteration = 0;
  std::size_t layer = 0;  // index in the config at that iteration
  std::string description;
  double ri = 0.0;
  double acc_after = 0.0;
  double cumulative_drop = 0.0;
  bool adapter = false;
};

struct ReduceResult {
  ModelConfig cfg;
  ModelParams params;
  double initial_acc = 0.0;
  double final_acc = 0.0;
  std::vector<RemovalStep> log;
  std::vector<std::vector<RIRow>> reports;  // one per iteration
  std::string stop_reason;
};

/// Greedy loop: rank, remove the argmax-RI layer (keeping its fine-tuned
/// ablation), repeat. Stops before a removal whose cumulative accuracy drop
/// would exceed `budget`, or when nothing is removable.
ReduceResult reduce(const ModelConfig& cfg, const ModelParams& params, const EvalSets& sets,
                    double budget, const RIOptions& opt = {});

CsvTable ri_table(const std::vector<RIRow>& rows, std::size_t iteration);
CsvTable removal_table(const std::vector<RemovalStep>& log);

}  // namespace quadra
