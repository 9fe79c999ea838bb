#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "quadra/memory_ledger.hpp"
#include "quadra/tensor.hpp"

namespace quadra {

/// How a node's backward is obtained.
enum class NodeMode {
  Auto,      // built-in derivative rule of a primitive op
  Symbolic,  // registered closed form for a whole quadratic layer
};

enum class OpKind {
  Constant,
  Input,
  Parameter,
  Matmul,
  Linear,
  Add,
  Hadamard,
  AddBias,
  Conv2d,
  DepthwiseConv2d,
  BatchNorm,
  Relu,
  Reshape,
  ContractGroups,
  SoftmaxCrossEntropy,
  QuadraticLayer,
};

const char* op_name(OpKind op);

/// Handle to a tape node.
struct Var {
  static constexpr std::size_t kInvalid = std::numeric_limits<std::size_t>::max();
  std::size_t id = kInvalid;

  bool valid() const { return id != kInvalid; }
};

/// Receives the upstream gradient and the node's retained tensors; returns one
/// entry per input (nullopt where the input needs no gradient).
using BackwardFn = std::function<std::vector<std::optional<Tensor>>(
    const Tensor& grad_out, std::span<const Tensor> retained, std::span<const bool> needs_grad)>;

struct NodeSpec {
  OpKind op = OpKind::Constant;
  NodeMode mode = NodeMode::Auto;
  std::vector<Var> inputs;
  Tensor value;
  std::vector<Tensor> retained;
  BackwardFn backward;
  std::string tag;
};

struct Node {
  OpKind op = OpKind::Constant;
  NodeMode mode = NodeMode::Auto;
  std::string scope;
  std::string tag;
  std::vector<std::size_t> inputs;
  Tensor value;
  std::vector<Tensor> retained;
  BackwardFn backward;
  bool requires_grad = false;
};

/// Reverse-mode differentiation record.
///
/// Nodes are append-only, so every node's inputs precede it. Each node's
/// `retained` list is the only state its backward may read; the ledger counts
/// those bytes (parameters excluded) from the moment a node first retains a
/// storage block until the backward sweep passes that node.
class Tape {
 public:
  explicit Tape(bool recording = true);

  Var constant(Tensor value, std::string label = {});
  /// Differentiable leaf whose storage counts as an activation, not a parameter.
  Var input(Tensor value, std::string label);
  Var parameter(Tensor value, std::string label);

  /// Appends a node built by an op. When not recording, `retained` and
  /// `backward` are dropped and the node never requires grad.
  Var record(NodeSpec spec);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  bool recording() const { return recording_; }

  const std::vector<Node>& nodes() const { return nodes_; }
  const Node& node(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  /// Label attached to subsequently recorded nodes (used for per-layer ledger
  /// attribution).
  void set_scope(std::string scope) { scope_ = std::move(scope); }
  const std::string& scope() const { return scope_; }

  /// Reverse sweep from a scalar `loss`. Returns d(loss)/d(v) for every v in
  /// `wrt`; variables the loss does not depend on get zeros and a warning.
  std::vector<Tensor> backward(Var loss, std::span<const Var> wrt);

  const MemoryLedger& ledger() const { return ledger_; }

  /// Bytes retained by `v` that are not parameter storage.
  std::uint64_t retained_bytes(Var v) const;

 private:
  void check(Var v) const;

  bool recording_;
  bool swept_ = false;
  std::string scope_;
  std::vector<Node> nodes_;
  MemoryLedger ledger_;
  std::unordered_map<const void*, std::size_t> param_storage_;
  // storage -> (owning node, bytes); the owner is the first node retaining it.
  std::unordered_map<const void*, std::pair<std::size_t, std::uint64_t>> owners_;
  std::vector<std::vector<const void*>> owned_by_;
};

/// Sets the tape scope for the lifetime of the guard.
class ScopeGuard {
 public:
  ScopeGuard(Tape& tape, std::string scope) : tape_(tape), previous_(tape.scope()) {
    tape_.set_scope(std::move(scope));
  }
  ~ScopeGuard() { tape_.set_scope(previous_); }
  ScopeGuard(const ScopeGuard&) = delete;
  ScopeGuard& operator=(const ScopeGuard&) = delete;

 private:
  Tape& tape_;
  std::string previous_;
};

}  // namespace quadra
