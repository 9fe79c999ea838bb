#include "quadra/tape.hpp"

#include <memory>
#include <unordered_set>

#include "quadra/error.hpp"
#include "quadra/kernels.hpp"
#include "quadra/log.hpp"

namespace quadra {

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::Constant: return "constant";
    case OpKind::Input: return "input";
    case OpKind::Parameter: return "parameter";
    case OpKind::Matmul: return "matmul";
    case OpKind::Linear: return "linear";
    case OpKind::Add: return "add";
    case OpKind::Hadamard: return "hadamard";
    case OpKind::AddBias: return "add_bias";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::DepthwiseConv2d: return "depthwise_conv2d";
    case OpKind::BatchNorm: return "batchnorm";
    case OpKind::Relu: return "relu";
    case OpKind::Reshape: return "reshape";
    case OpKind::ContractGroups: return "contract_groups";
    case OpKind::SoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpKind::QuadraticLayer: return "quadratic_layer";
  }
  return "unknown";
}

Tape::Tape(bool recording) : recording_(recording) {}

void Tape::check(Var v) const {
  if (!v.valid() || v.id >= nodes_.size()) {
    throw InputError("tensor-core", "variable " + std::to_string(v.id) + " is not on this tape");
  }
}

Var Tape::constant(Tensor value, std::string label) {
  Node n;
  n.op = OpKind::Constant;
  n.scope = scope_;
  n.tag = std::move(label);
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  owned_by_.emplace_back();
  return Var{nodes_.size() - 1};
}

Var Tape::input(Tensor value, std::string label) {
  Node n;
  n.op = OpKind::Input;
  n.scope = scope_;
  n.tag = std::move(label);
  n.requires_grad = recording_;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  owned_by_.emplace_back();
  return Var{nodes_.size() - 1};
}

Var Tape::parameter(Tensor value, std::string label) {
  Node n;
  n.op = OpKind::Parameter;
  n.scope = scope_;
  n.tag = std::move(label);
  n.requires_grad = recording_;
  if (param_storage_.emplace(value.storage_id(), nodes_.size()).second) {
    ledger_.set_parameter_bytes(ledger_.parameter_bytes() + value.bytes());
  }
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  owned_by_.emplace_back();
  return Var{nodes_.size() - 1};
}

Var Tape::record(NodeSpec spec) {
  if (swept_) throw IntegrityError("tensor-core", "tape already swept; record a new tape");
  Node n;
  n.op = spec.op;
  n.mode = spec.mode;
  n.scope = scope_;
  n.tag = std::move(spec.tag);
  n.value = std::move(spec.value);
  n.inputs.reserve(spec.inputs.size());
  bool any_grad = false;
  for (const auto& in : spec.inputs) {
    check(in);
    n.inputs.push_back(in.id);
    any_grad = any_grad || nodes_[in.id].requires_grad;
  }
  const std::size_t index = nodes_.size();
  owned_by_.emplace_back();
  if (recording_ && any_grad) {
    n.requires_grad = true;
    n.backward = std::move(spec.backward);
    n.retained = std::move(spec.retained);
    for (const auto& t : n.retained) {
      const void* id = t.storage_id();
      if (param_storage_.count(id) || owners_.count(id)) continue;
      owners_.emplace(id, std::make_pair(index, t.bytes()));
      owned_by_[index].push_back(id);
      ledger_.cache(n.scope, t.bytes(), std::string("forward:") + n.scope + ":" + op_name(n.op));
    }
  }
  nodes_.push_back(std::move(n));
  return Var{index};
}

const Tensor& Tape::value(Var v) const {
  check(v);
  return nodes_[v.id].value;
}

bool Tape::requires_grad(Var v) const {
  check(v);
  return nodes_[v.id].requires_grad;
}

const Node& Tape::node(Var v) const {
  check(v);
  return nodes_[v.id];
}

std::uint64_t Tape::retained_bytes(Var v) const {
  check(v);
  std::uint64_t total = 0;
  std::unordered_set<const void*> seen;
  for (const auto& t : nodes_[v.id].retained) {
    if (param_storage_.count(t.storage_id()) || !seen.insert(t.storage_id()).second) continue;
    total += t.bytes();
  }
  return total;
}

std::vector<Tensor> Tape::backward(Var loss, std::span<const Var> wrt) {
  check(loss);
  if (swept_) throw IntegrityError("tensor-core", "tape already swept");
  if (nodes_[loss.id].value.size() != 1) {
    throw InputError("tensor-core", "backward needs a scalar loss, got shape " +
                                        shape_str(nodes_[loss.id].value.shape()));
  }
  for (const auto& v : wrt) check(v);
  swept_ = true;

  std::unordered_set<std::size_t> keep;
  for (const auto& v : wrt) keep.insert(v.id);

  std::vector<std::optional<Tensor>> grads(nodes_.size());
  grads[loss.id] = Tensor::full(nodes_[loss.id].value.shape(), 1.0);

  auto release_owned = [&](std::size_t i) {
    auto& node = nodes_[i];
    for (const void* id : owned_by_[i]) {
      ledger_.release(node.scope, owners_.at(id).second,
                      std::string("backward:") + node.scope + ":" + op_name(node.op));
      owners_.erase(id);
    }
    owned_by_[i].clear();
    node.retained.clear();
    node.retained.shrink_to_fit();
  };

  for (std::size_t i = nodes_.size(); i-- > loss.id + 1;) release_owned(i);

  for (std::size_t i = loss.id + 1; i-- > 0;) {
    auto& node = nodes_[i];
    if (grads[i] && node.requires_grad && node.backward) {
      std::vector<bool> needs_vec(node.inputs.size());
      for (std::size_t j = 0; j < node.inputs.size(); ++j) {
        needs_vec[j] = nodes_[node.inputs[j]].requires_grad;
      }
      // std::vector<bool> has no contiguous storage; copy into a plain array.
      std::unique_ptr<bool[]> needs(new bool[needs_vec.size()]);
      for (std::size_t j = 0; j < needs_vec.size(); ++j) needs[j] = needs_vec[j];
      auto outs = node.backward(*grads[i], node.retained,
                                std::span<const bool>(needs.get(), needs_vec.size()));
      if (outs.size() != node.inputs.size()) {
        throw IntegrityError("tensor-core", std::string("backward of ") + op_name(node.op) +
                                                " returned wrong gradient count");
      }
      for (std::size_t j = 0; j < outs.size(); ++j) {
        if (!needs[j] || !outs[j]) continue;
        const auto in = node.inputs[j];
        if (outs[j]->shape() != nodes_[in].value.shape()) {
          throw IntegrityError("tensor-core", std::string("backward of ") + op_name(node.op) +
                                                  " produced gradient " +
                                                  shape_str(outs[j]->shape()) + " for input " +
                                                  shape_str(nodes_[in].value.shape()));
        }
        if (grads[in]) {
          grads[in] = kernels::add(*grads[in], *outs[j]);
        } else {
          grads[in] = std::move(*outs[j]);
        }
      }
    }
    release_owned(i);
    if (node.op == OpKind::Parameter && grads[i]) {
      ledger_.add_gradient(grads[i]->bytes(), "gradient:" + node.tag);
    }
    if (!keep.count(i)) grads[i].reset();
  }

  std::vector<Tensor> result;
  result.reserve(wrt.size());
  for (const auto& v : wrt) {
    if (grads[v.id]) {
      result.push_back(*grads[v.id]);
    } else {
      const auto& node = nodes_[v.id];
      warn("tensor-core", "'" + (node.tag.empty() ? std::to_string(v.id) : node.tag) +
                              "' does not reach the loss; returning zero gradient");
      result.push_back(Tensor::zeros(node.value.shape()));
    }
  }
  return result;
}

}  // namespace quadra
