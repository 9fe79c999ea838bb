#include "quadra/ops.hpp"

#include <memory>

#include "quadra/error.hpp"
#include "quadra/kernels.hpp"

namespace quadra::ops {

namespace k = quadra::kernels;

using Grads = std::vector<std::optional<Tensor>>;

Var matmul(Tape& tape, Var a, Var b) {
  const Tensor& av = tape.value(a);
  const Tensor& bv = tape.value(b);
  Tensor out = k::matmul(av, bv);
  NodeSpec s;
  s.op = OpKind::Matmul;
  s.inputs = {a, b};
  s.retained = {av, bv, out};
  s.value = std::move(out);
  s.backward = [](const Tensor& g, std::span<const Tensor> r, std::span<const bool> needs) {
    Grads d(2);
    if (needs[0]) d[0] = k::matmul_nt(g, r[1]);
    if (needs[1]) d[1] = k::matmul_tn(r[0], g);
    return d;
  };
  return tape.record(std::move(s));
}

Var linear(Tape& tape, Var x, Var w) {
  const Tensor& xv = tape.value(x);
  const Tensor& wv = tape.value(w);
  Tensor out = k::matmul_nt(xv, wv);
  NodeSpec s;
  s.op = OpKind::Linear;
  s.inputs = {x, w};
  s.retained = {xv, wv, out};
  s.value = std::move(out);
  s.backward = [](const Tensor& g, std::span<const Tensor> r, std::span<const bool> needs) {
    Grads d(2);
    if (needs[0]) d[0] = k::matmul(g, r[1]);
    if (needs[1]) d[1] = k::matmul_tn(g, r[0]);
    return d;
  };
  return tape.record(std::move(s));
}

Var add(Tape& tape, Var a, Var b) {
  Tensor out = k::add(tape.value(a), tape.value(b));
  NodeSpec s;
  s.op = OpKind::Add;
  s.inputs = {a, b};
  s.retained = {out};
  s.value = std::move(out);
  s.backward = [](const Tensor& g, std::span<const Tensor>, std::span<const bool> needs) {
    Grads d(2);
    if (needs[0]) d[0] = g;
    if (needs[1]) d[1] = g;
    return d;
  };
  return tape.record(std::move(s));
}

Var hadamard(Tape& tape, Var a, Var b) {
  const Tensor& av = tape.value(a);
  const Tensor& bv = tape.value(b);
  Tensor out = k::hadamard(av, bv);
  NodeSpec s;
  s.op = OpKind::Hadamard;
  s.inputs = {a, b};
  s.retained = {av, bv, out};
  s.value = std::move(out);
  s.backward = [](const Tensor& g, std::span<const Tensor> r, std::span<const bool> needs) {
    Grads d(2);
    if (needs[0]) d[0] = k::hadamard(g, r[1]);
    if (needs[1]) d[1] = k::hadamard(g, r[0]);
    return d;
  };
  return tape.record(std::move(s));
}

Var add_bias(Tape& tape, Var x, Var bias) {
  Tensor out = k::add_bias(tape.value(x), tape.value(bias));
  NodeSpec s;
  s.op = OpKind::AddBias;
  s.inputs = {x, bias};
  s.retained = {out};
  s.value = std::move(out);
  s.backward = [](const Tensor& g, std::span<const Tensor>, std::span<const bool> needs) {
    Grads d(2);
    if (needs[0]) d[0] = g;
    if (needs[1]) d[1] = k::bias_grad(g);
    return d;
  };
  return tape.record(std::move(s));
}

Var conv2d(Tape& tape, Var x, Var w, std::size_t stride, std::size_t pad) {
  const Tensor& xv = tape.value(x);
  const Tensor& wv = tape.value(w);
  if (wv.rank() != 4 || wv.dim(2) != wv.dim(3)) {
    throw DimensionError("conv2d: expected F×C×r×r weight, got " + shape_str(wv.shape()));
  }
  const auto g = k::conv_geometry(xv.shape(), wv.dim(0), wv.dim(2), stride, pad);
  Tensor cols = k::im2col(xv, g);
  Tensor out = k::conv2d_from_cols(cols, wv, g);
  NodeSpec s;
  s.op = OpKind::Conv2d;
  s.inputs = {x, w};
  s.retained = {cols, wv, out};
  s.value = std::move(out);
  s.backward = [g](const Tensor& dy, std::span<const Tensor> r, std::span<const bool> needs) {
    Grads d(2);
    if (needs[0]) d[0] = k::conv2d_backward_input(dy, r[1], g);
    if (needs[1]) d[1] = k::conv2d_backward_weight(dy, r[0], g);
    return d;
  };
  return tape.record(std::move(s));
}

Var depthwise_conv2d(Tape& tape, Var x, Var w, std::size_t stride, std::size_t pad) {
  const Tensor& xv = tape.value(x);
  const Tensor& wv = tape.value(w);
  Tensor out = k::depthwise_conv2d(xv, wv, stride, pad);
  const auto g = k::conv_geometry(xv.shape(), wv.dim(0), wv.dim(2), stride, pad);
  NodeSpec s;
  s.op = OpKind::DepthwiseConv2d;
  s.inputs = {x, w};
  s.retained = {xv, wv, out};
  s.value = std::move(out);
  s.backward = [g](const Tensor& dy, std::span<const Tensor> r, std::span<const bool> needs) {
    Grads d(2);
    if (needs[0]) d[0] = k::depthwise_backward_input(dy, r[1], g);
    if (needs[1]) d[1] = k::depthwise_backward_weight(dy, r[0], g);
    return d;
  };
  return tape.record(std::move(s));
}

Var relu(Tape& tape, Var x) {
  Tensor out = k::relu(tape.value(x));
  NodeSpec s;
  s.op = OpKind::Relu;
  s.inputs = {x};
  s.retained = {out};
  s.value = std::move(out);
  s.backward = [](const Tensor& g, std::span<const Tensor> r, std::span<const bool>) {
    return Grads{k::relu_backward(g, r[0])};
  };
  return tape.record(std::move(s));
}

Var reshape(Tape& tape, Var x, Shape shape) {
  const Tensor& xv = tape.value(x);
  Tensor out = xv.reshape(std::move(shape));
  NodeSpec s;
  s.op = OpKind::Reshape;
  s.inputs = {x};
  s.retained = {out};
  s.value = std::move(out);
  s.backward = [in_shape = xv.shape()](const Tensor& g, std::span<const Tensor>,
                                       std::span<const bool>) {
    return Grads{g.reshape(in_shape)};
  };
  return tape.record(std::move(s));
}

Var contract_groups(Tape& tape, Var x, Var z) {
  const Tensor& xv = tape.value(x);
  const Tensor& zv = tape.value(z);
  Tensor out = k::contract_groups(xv, zv);
  NodeSpec s;
  s.op = OpKind::ContractGroups;
  s.inputs = {x, z};
  s.retained = {xv, zv, out};
  s.value = std::move(out);
  s.backward = [](const Tensor& g, std::span<const Tensor> r, std::span<const bool> needs) {
    auto cg = k::contract_groups_backward(g, r[0], r[1]);
    Grads d(2);
    if (needs[0]) d[0] = std::move(cg.dx);
    if (needs[1]) d[1] = std::move(cg.dz);
    return d;
  };
  return tape.record(std::move(s));
}

Var batchnorm_train(Tape& tape, Var x, Var gamma, Var beta, double eps, BatchNormStats* stats) {
  const Tensor& gv = tape.value(gamma);
  auto f = k::batchnorm_train(tape.value(x), gv, tape.value(beta), eps);
  if (stats) *stats = {f.mean, f.var};
  NodeSpec s;
  s.op = OpKind::BatchNorm;
  s.inputs = {x, gamma, beta};
  s.retained = {f.xhat, gv, f.invstd, f.y};
  s.value = std::move(f.y);
  s.backward = [](const Tensor& g, std::span<const Tensor> r, std::span<const bool> needs) {
    auto bg = k::batchnorm_backward(g, r[0], r[1], r[2]);
    Grads d(3);
    if (needs[0]) d[0] = std::move(bg.dx);
    if (needs[1]) d[1] = std::move(bg.dgamma);
    if (needs[2]) d[2] = std::move(bg.dbeta);
    return d;
  };
  return tape.record(std::move(s));
}

Var batchnorm_eval(Tape& tape, Var x, Var gamma, Var beta, const Tensor& running_mean,
                   const Tensor& running_var, double eps) {
  Tensor out = k::batchnorm_eval(tape.value(x), tape.value(gamma), tape.value(beta),
                                 running_mean, running_var, eps);
  if (tape.recording() &&
      (tape.requires_grad(x) || tape.requires_grad(gamma) || tape.requires_grad(beta))) {
    throw InputError("tensor-core", "eval-mode batchnorm is not differentiable on a recording tape");
  }
  return tape.constant(std::move(out), "batchnorm_eval");
}

Var softmax_cross_entropy(Tape& tape, Var logits, std::span<const int> labels) {
  auto sce = k::softmax_cross_entropy(tape.value(logits), labels);
  Tensor out = Tensor::unchecked({1}, {sce.loss});
  k::check_finite(out, "softmax_cross_entropy");
  NodeSpec s;
  s.op = OpKind::SoftmaxCrossEntropy;
  s.inputs = {logits};
  s.retained = {sce.probs, out};
  s.value = std::move(out);
  auto owned_labels = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  s.backward = [owned_labels](const Tensor& g, std::span<const Tensor> r, std::span<const bool>) {
    return Grads{k::softmax_cross_entropy_backward(r[0], *owned_labels, g.item())};
  };
  return tape.record(std::move(s));
}

}  // namespace quadra::ops
