#pragma once

// Pure numeric kernels over Tensors. Both the differentiation tape and the
// closed-form quadratic-layer gradients are built on these, so the two
// backward routes execute identical floating-point sequences.

#include <cstddef>
#include <span>
#include <vector>

#include "quadra/tensor.hpp"

namespace quadra::kernels {

// ---- matrix products (row-major 2-D) ----
Tensor matmul(const Tensor& a, const Tensor& b);     // a · b
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a · bᵀ
Tensor matmul_tn(const Tensor& a, const Tensor& b);  // aᵀ · b

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor relu(const Tensor& x);
Tensor relu_backward(const Tensor& dy, const Tensor& out);

/// Per-channel broadcast add: x is N×C or N×C×H×W, b has C entries.
Tensor add_bias(const Tensor& x, const Tensor& b);
/// Reduction matching add_bias: sums dy over every axis except 1.
Tensor bias_grad(const Tensor& dy);

/// y[b,j] = Σ_i x[b,i] · z[b, j·n + i] with x N×n and z N×(m·n).
Tensor contract_groups(const Tensor& x, const Tensor& z);
struct ContractGrads {
  Tensor dx;
  Tensor dz;
};
ContractGrads contract_groups_backward(const Tensor& dy, const Tensor& x, const Tensor& z);

// ---- convolution ----
struct ConvGeometry {
  std::size_t batch = 0, in_channels = 0, height = 0, width = 0;
  std::size_t out_channels = 0, kernel = 0, stride = 1, pad = 0;
  std::size_t out_height = 0, out_width = 0;

  std::size_t patch_size() const { return in_channels * kernel * kernel; }
  std::size_t out_pixels() const { return out_height * out_width; }
};

/// Validates and derives output extents (floor division).
ConvGeometry conv_geometry(const Shape& x, std::size_t out_channels, std::size_t kernel,
                           std::size_t stride, std::size_t pad);

/// Patch matrix, shape N × (C·r·r) × (H'·W').
Tensor im2col(const Tensor& x, const ConvGeometry& g);
/// Scatter-add inverse of im2col; returns N×C×H×W.
Tensor col2im(const Tensor& cols, const ConvGeometry& g);

/// w: F×C×r×r. Output N×F×H'×W'.
Tensor conv2d_from_cols(const Tensor& cols, const Tensor& w, const ConvGeometry& g);
Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad);
Tensor conv2d_backward_weight(const Tensor& dy, const Tensor& cols, const ConvGeometry& g);
Tensor conv2d_backward_input(const Tensor& dy, const Tensor& w, const ConvGeometry& g);

/// Channel-wise convolution, w: C×1×r×r.
Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad);
Tensor depthwise_backward_weight(const Tensor& dy, const Tensor& x, const ConvGeometry& g);
Tensor depthwise_backward_input(const Tensor& dy, const Tensor& w, const ConvGeometry& g);

// ---- batch normalization (channel axis 1) ----
struct BatchNormForward {
  Tensor y;
  Tensor xhat;
  Tensor invstd;  // per channel
  Tensor mean;    // batch mean per channel
  Tensor var;     // biased batch variance per channel
};
BatchNormForward batchnorm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                 double eps);
Tensor batchnorm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                      const Tensor& running_mean, const Tensor& running_var, double eps);
struct BatchNormGrads {
  Tensor dx;
  Tensor dgamma;
  Tensor dbeta;
};
BatchNormGrads batchnorm_backward(const Tensor& dy, const Tensor& xhat, const Tensor& gamma,
                                  const Tensor& invstd);

// ---- loss ----
struct SoftmaxCrossEntropy {
  double loss = 0.0;
  Tensor probs;  // N×K
};
SoftmaxCrossEntropy softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);
/// (softmax − onehot) · upstream / N.
Tensor softmax_cross_entropy_backward(const Tensor& probs, std::span<const int> labels,
                                      double upstream);

/// Throws NumericError naming `op` when debug checks are enabled and `t` has NaN/Inf.
void check_finite(const Tensor& t, const char* op);

}  // namespace quadra::kernels
