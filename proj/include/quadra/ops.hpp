#pragma once

#include <span>
#include <vector>

#include "quadra/tape.hpp"

namespace quadra::ops {

// Differentiable primitives recorded on a Tape with their built-in (AUTO)
// derivative rules. Every AUTO node retains its own output in addition to the
// operands its rule reads.

Var matmul(Tape& tape, Var a, Var b);
/// x · wᵀ with x N×n and w m×n.
Var linear(Tape& tape, Var x, Var w);
Var add(Tape& tape, Var a, Var b);
Var hadamard(Tape& tape, Var a, Var b);
Var add_bias(Tape& tape, Var x, Var bias);
Var conv2d(Tape& tape, Var x, Var w, std::size_t stride, std::size_t pad);
Var depthwise_conv2d(Tape& tape, Var x, Var w, std::size_t stride, std::size_t pad);
Var relu(Tape& tape, Var x);
Var reshape(Tape& tape, Var x, Shape shape);
Var contract_groups(Tape& tape, Var x, Var z);

struct BatchNormStats {
  Tensor mean;
  Tensor var;  // biased batch variance
};

/// Batch statistics; `stats` (when non-null) receives them for running-average updates.
Var batchnorm_train(Tape& tape, Var x, Var gamma, Var beta, double eps,
                    BatchNormStats* stats = nullptr);
/// Running statistics. Treated as a constant transform (no gradient).
Var batchnorm_eval(Tape& tape, Var x, Var gamma, Var beta, const Tensor& running_mean,
                   const Tensor& running_var, double eps);

/// Mean softmax cross-entropy over the batch; returns a 1-element node.
Var softmax_cross_entropy(Tape& tape, Var logits, std::span<const int> labels);

}  // namespace quadra::ops
