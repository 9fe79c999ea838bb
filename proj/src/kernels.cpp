#include "quadra/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

#include "quadra/error.hpp"

namespace quadra::kernels {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (!same_shape(a, b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

Tensor finish(Shape shape, std::vector<double> data, const char* op) {
  Tensor t = Tensor::unchecked(std::move(shape), std::move(data));
  check_finite(t, op);
  return t;
}

std::size_t spatial_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t i = 2; i < s.size(); ++i) n *= s[i];
  return n;
}

}  // namespace

void check_finite(const Tensor& t, const char* op) {
  if (debug_checks() && !t.all_finite()) {
    throw NumericError("tensor-core", std::string("non-finite output from ") + op);
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " · " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  MutMap(out.data(), m, n).noalias() = ConstMap(a.ptr(), m, k) * ConstMap(b.ptr(), k, n);
  return finish({m, n}, std::move(out), "matmul");
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt: inner dimensions disagree for " + shape_str(a.shape()) +
                         " · " + shape_str(b.shape()) + "ᵀ");
  }
  std::vector<double> out(m * n);
  MutMap(out.data(), m, n).noalias() =
      ConstMap(a.ptr(), m, k) * ConstMap(b.ptr(), n, k).transpose();
  return finish({m, n}, std::move(out), "matmul_nt");
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_tn");
  require_rank(b, 2, "matmul_tn");
  const auto k = a.dim(0), m = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul_tn: inner dimensions disagree for " + shape_str(a.shape()) +
                         "ᵀ · " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  MutMap(out.data(), m, n).noalias() =
      ConstMap(a.ptr(), k, m).transpose() * ConstMap(b.ptr(), k, n);
  return finish({m, n}, std::move(out), "matmul_tn");
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  std::vector<double> out(a.size());
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];
  return finish(a.shape(), std::move(out), "add");
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same(a, b, "hadamard");
  std::vector<double> out(a.size());
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * pb[i];
  return finish(a.shape(), std::move(out), "hadamard");
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  const double* pa = a.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * s;
  return finish(a.shape(), std::move(out), "scale");
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  const double* px = x.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = px[i] > 0.0 ? px[i] : 0.0;
  return finish(x.shape(), std::move(out), "relu");
}

Tensor relu_backward(const Tensor& dy, const Tensor& out) {
  require_same(dy, out, "relu_backward");
  std::vector<double> dx(dy.size());
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = out[i] > 0.0 ? dy[i] : 0.0;
  return finish(dy.shape(), std::move(dx), "relu_backward");
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  if (x.rank() != 2 && x.rank() != 4) {
    throw DimensionError("add_bias: expected N×C or N×C×H×W input, got " + shape_str(x.shape()));
  }
  const auto channels = x.dim(1);
  if (b.size() != channels) {
    throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " does not match " +
                         std::to_string(channels) + " channels of " + shape_str(x.shape()));
  }
  const auto inner = spatial_size(x.shape());
  const auto outer = x.dim(0);
  std::vector<double> out(x.size());
  const double* px = x.ptr();
  const double* pb = b.ptr();
  std::size_t i = 0;
  for (std::size_t n = 0; n < outer; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      const double bias = pb[c];
      for (std::size_t s = 0; s < inner; ++s, ++i) out[i] = px[i] + bias;
    }
  }
  return finish(x.shape(), std::move(out), "add_bias");
}

Tensor bias_grad(const Tensor& dy) {
  if (dy.rank() != 2 && dy.rank() != 4) {
    throw DimensionError("bias_grad: unsupported shape " + shape_str(dy.shape()));
  }
  const auto channels = dy.dim(1);
  const auto inner = spatial_size(dy.shape());
  std::vector<double> out(channels, 0.0);
  const double* p = dy.ptr();
  std::size_t i = 0;
  for (std::size_t n = 0; n < dy.dim(0); ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      double acc = 0.0;
      for (std::size_t s = 0; s < inner; ++s, ++i) acc += p[i];
      out[c] += acc;
    }
  }
  return finish({channels}, std::move(out), "bias_grad");
}

Tensor contract_groups(const Tensor& x, const Tensor& z) {
  require_rank(x, 2, "contract_groups");
  require_rank(z, 2, "contract_groups");
  const auto batch = x.dim(0), n = x.dim(1);
  if (z.dim(0) != batch || z.dim(1) % n != 0) {
    throw DimensionError("contract_groups: " + shape_str(x.shape()) + " vs " + shape_str(z.shape()));
  }
  const auto m = z.dim(1) / n;
  std::vector<double> out(batch * m);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* xb = x.ptr() + b * n;
    const double* zb = z.ptr() + b * m * n;
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += xb[i] * zb[j * n + i];
      out[b * m + j] = acc;
    }
  }
  return finish({batch, m}, std::move(out), "contract_groups");
}

ContractGrads contract_groups_backward(const Tensor& dy, const Tensor& x, const Tensor& z) {
  const auto batch = x.dim(0), n = x.dim(1);
  const auto m = z.dim(1) / n;
  if (dy.rank() != 2 || dy.dim(0) != batch || dy.dim(1) != m) {
    throw DimensionError("contract_groups_backward: upstream " + shape_str(dy.shape()));
  }
  std::vector<double> dx(batch * n, 0.0), dz(batch * m * n);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* xb = x.ptr() + b * n;
    const double* zb = z.ptr() + b * m * n;
    for (std::size_t j = 0; j < m; ++j) {
      const double g = dy[b * m + j];
      for (std::size_t i = 0; i < n; ++i) {
        dx[b * n + i] += g * zb[j * n + i];
        dz[(b * m + j) * n + i] = g * xb[i];
      }
    }
  }
  return {finish(x.shape(), std::move(dx), "contract_groups_backward"),
          finish(z.shape(), std::move(dz), "contract_groups_backward")};
}

ConvGeometry conv_geometry(const Shape& x, std::size_t out_channels, std::size_t kernel,
                           std::size_t stride, std::size_t pad) {
  if (x.size() != 4) throw DimensionError("conv2d: expected N×C×H×W input, got " + shape_str(x));
  if (stride < 1) throw DimensionError("conv2d: stride must be >= 1");
  if (kernel < 1) throw DimensionError("conv2d: kernel must be >= 1");
  ConvGeometry g;
  g.batch = x[0];
  g.in_channels = x[1];
  g.height = x[2];
  g.width = x[3];
  g.out_channels = out_channels;
  g.kernel = kernel;
  g.stride = stride;
  g.pad = pad;
  if (kernel > g.height + 2 * pad || kernel > g.width + 2 * pad) {
    throw DimensionError("conv2d: kernel " + std::to_string(kernel) + " larger than padded input " +
                         shape_str(x) + " with pad " + std::to_string(pad));
  }
  g.out_height = (g.height + 2 * pad - kernel) / stride + 1;
  g.out_width = (g.width + 2 * pad - kernel) / stride + 1;
  return g;
}

Tensor im2col(const Tensor& x, const ConvGeometry& g) {
  const auto k = g.kernel;
  const auto patch = g.patch_size();
  const auto pixels = g.out_pixels();
  std::vector<double> cols(g.batch * patch * pixels, 0.0);
  const double* px = x.ptr();
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t c = 0; c < g.in_channels; ++c) {
      const double* plane = px + (n * g.in_channels + c) * g.height * g.width;
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const std::size_t row = (c * k + ky) * k + kx;
          double* dst = cols.data() + (n * patch + row) * pixels;
          for (std::size_t oy = 0; oy < g.out_height; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
            for (std::size_t ox = 0; ox < g.out_width; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
              if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
              dst[oy * g.out_width + ox] = plane[iy * g.width + ix];
            }
          }
        }
      }
    }
  }
  return Tensor::unchecked({g.batch, patch, pixels}, std::move(cols));
}

Tensor col2im(const Tensor& cols, const ConvGeometry& g) {
  const auto k = g.kernel;
  const auto patch = g.patch_size();
  const auto pixels = g.out_pixels();
  std::vector<double> x(g.batch * g.in_channels * g.height * g.width, 0.0);
  const double* pc = cols.ptr();
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t c = 0; c < g.in_channels; ++c) {
      double* plane = x.data() + (n * g.in_channels + c) * g.height * g.width;
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const std::size_t row = (c * k + ky) * k + kx;
          const double* src = pc + (n * patch + row) * pixels;
          for (std::size_t oy = 0; oy < g.out_height; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
            for (std::size_t ox = 0; ox < g.out_width; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
              if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
              plane[iy * g.width + ix] += src[oy * g.out_width + ox];
            }
          }
        }
      }
    }
  }
  return finish({g.batch, g.in_channels, g.height, g.width}, std::move(x), "col2im");
}

Tensor conv2d_from_cols(const Tensor& cols, const Tensor& w, const ConvGeometry& g) {
  if (w.rank() != 4 || w.dim(0) != g.out_channels || w.dim(1) != g.in_channels ||
      w.dim(2) != g.kernel || w.dim(3) != g.kernel) {
    throw DimensionError("conv2d: weight " + shape_str(w.shape()) + " does not fit input with " +
                         std::to_string(g.in_channels) + " channels");
  }
  const auto patch = g.patch_size();
  const auto pixels = g.out_pixels();
  const auto f = g.out_channels;
  std::vector<double> out(g.batch * f * pixels);
  ConstMap wm(w.ptr(), f, patch);
  for (std::size_t n = 0; n < g.batch; ++n) {
    MutMap(out.data() + n * f * pixels, f, pixels).noalias() =
        wm * ConstMap(cols.ptr() + n * patch * pixels, patch, pixels);
  }
  return finish({g.batch, f, g.out_height, g.out_width}, std::move(out), "conv2d");
}

Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
  if (w.rank() != 4 || w.dim(2) != w.dim(3)) {
    throw DimensionError("conv2d: expected F×C×r×r weight, got " + shape_str(w.shape()));
  }
  const auto g = conv_geometry(x.shape(), w.dim(0), w.dim(2), stride, pad);
  if (w.dim(1) != g.in_channels) {
    throw DimensionError("conv2d: weight " + shape_str(w.shape()) + " does not fit input " +
                         shape_str(x.shape()));
  }
  return conv2d_from_cols(im2col(x, g), w, g);
}

Tensor conv2d_backward_weight(const Tensor& dy, const Tensor& cols, const ConvGeometry& g) {
  const auto patch = g.patch_size();
  const auto pixels = g.out_pixels();
  const auto f = g.out_channels;
  RowMat acc = RowMat::Zero(static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(patch));
  for (std::size_t n = 0; n < g.batch; ++n) {
    acc.noalias() += ConstMap(dy.ptr() + n * f * pixels, f, pixels) *
                     ConstMap(cols.ptr() + n * patch * pixels, patch, pixels).transpose();
  }
  std::vector<double> out(acc.data(), acc.data() + acc.size());
  return finish({f, g.in_channels, g.kernel, g.kernel}, std::move(out), "conv2d_backward_weight");
}

Tensor conv2d_backward_input(const Tensor& dy, const Tensor& w, const ConvGeometry& g) {
  const auto patch = g.patch_size();
  const auto pixels = g.out_pixels();
  const auto f = g.out_channels;
  std::vector<double> dcols(g.batch * patch * pixels);
  ConstMap wm(w.ptr(), f, patch);
  for (std::size_t n = 0; n < g.batch; ++n) {
    MutMap(dcols.data() + n * patch * pixels, patch, pixels).noalias() =
        wm.transpose() * ConstMap(dy.ptr() + n * f * pixels, f, pixels);
  }
  return col2im(Tensor::unchecked({g.batch, patch, pixels}, std::move(dcols)), g);
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
  if (w.rank() != 4 || w.dim(1) != 1 || w.dim(2) != w.dim(3)) {
    throw DimensionError("depthwise_conv2d: expected C×1×r×r weight, got " + shape_str(w.shape()));
  }
  const auto g = conv_geometry(x.shape(), w.dim(0), w.dim(2), stride, pad);
  if (w.dim(0) != g.in_channels) {
    throw DimensionError("depthwise_conv2d: weight " + shape_str(w.shape()) +
                         " does not fit input " + shape_str(x.shape()));
  }
  const auto k = g.kernel;
  std::vector<double> out(g.batch * g.in_channels * g.out_pixels(), 0.0);
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t c = 0; c < g.in_channels; ++c) {
      const double* plane = x.ptr() + (n * g.in_channels + c) * g.height * g.width;
      const double* kern = w.ptr() + c * k * k;
      double* dst = out.data() + (n * g.in_channels + c) * g.out_pixels();
      for (std::size_t oy = 0; oy < g.out_height; ++oy) {
        for (std::size_t ox = 0; ox < g.out_width; ++ox) {
          double acc = 0.0;
          for (std::size_t ky = 0; ky < k; ++ky) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
              if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
              acc += kern[ky * k + kx] * plane[iy * g.width + ix];
            }
          }
          dst[oy * g.out_width + ox] = acc;
        }
      }
    }
  }
  return finish({g.batch, g.in_channels, g.out_height, g.out_width}, std::move(out),
                "depthwise_conv2d");
}

Tensor depthwise_backward_weight(const Tensor& dy, const Tensor& x, const ConvGeometry& g) {
  const auto k = g.kernel;
  std::vector<double> dw(g.in_channels * k * k, 0.0);
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t c = 0; c < g.in_channels; ++c) {
      const double* plane = x.ptr() + (n * g.in_channels + c) * g.height * g.width;
      const double* grad = dy.ptr() + (n * g.in_channels + c) * g.out_pixels();
      double* kern = dw.data() + c * k * k;
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          double acc = 0.0;
          for (std::size_t oy = 0; oy < g.out_height; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
            for (std::size_t ox = 0; ox < g.out_width; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
              if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
              acc += grad[oy * g.out_width + ox] * plane[iy * g.width + ix];
            }
          }
          kern[ky * k + kx] += acc;
        }
      }
    }
  }
  return finish({g.in_channels, 1, k, k}, std::move(dw), "depthwise_backward_weight");
}

Tensor depthwise_backward_input(const Tensor& dy, const Tensor& w, const ConvGeometry& g) {
  const auto k = g.kernel;
  std::vector<double> dx(g.batch * g.in_channels * g.height * g.width, 0.0);
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t c = 0; c < g.in_channels; ++c) {
      double* plane = dx.data() + (n * g.in_channels + c) * g.height * g.width;
      const double* grad = dy.ptr() + (n * g.in_channels + c) * g.out_pixels();
      const double* kern = w.ptr() + c * k * k;
      for (std::size_t oy = 0; oy < g.out_height; ++oy) {
        for (std::size_t ox = 0; ox < g.out_width; ++ox) {
          const double gv = grad[oy * g.out_width + ox];
          for (std::size_t ky = 0; ky < k; ++ky) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
              if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
              plane[iy * g.width + ix] += gv * kern[ky * k + kx];
            }
          }
        }
      }
    }
  }
  return finish({g.batch, g.in_channels, g.height, g.width}, std::move(dx),
                "depthwise_backward_input");
}

namespace {

void check_bn_params(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  if (x.rank() != 2 && x.rank() != 4) {
    throw DimensionError("batchnorm: expected N×C or N×C×H×W input, got " + shape_str(x.shape()));
  }
  if (gamma.size() != x.dim(1) || beta.size() != x.dim(1)) {
    throw DimensionError("batchnorm: gamma/beta " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match " + std::to_string(x.dim(1)) +
                         " channels");
  }
}

}  // namespace

BatchNormForward batchnorm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                 double eps) {
  check_bn_params(x, gamma, beta);
  if (!(eps > 0.0)) throw InputError("tensor-core", "batchnorm eps must be > 0");
  const auto batch = x.dim(0), channels = x.dim(1);
  const auto inner = spatial_size(x.shape());
  const double count = static_cast<double>(batch * inner);
  std::vector<double> mean(channels, 0.0), var(channels, 0.0), invstd(channels);
  const double* px = x.ptr();
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      const double* p = px + (n * channels + c) * inner;
      double acc = 0.0;
      for (std::size_t s = 0; s < inner; ++s) acc += p[s];
      mean[c] += acc;
    }
  }
  for (auto& m : mean) m /= count;
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      const double* p = px + (n * channels + c) * inner;
      double acc = 0.0;
      for (std::size_t s = 0; s < inner; ++s) {
        const double d = p[s] - mean[c];
        acc += d * d;
      }
      var[c] += acc;
    }
  }
  for (std::size_t c = 0; c < channels; ++c) {
    var[c] /= count;
    invstd[c] = 1.0 / std::sqrt(var[c] + eps);
  }
  std::vector<double> xhat(x.size()), y(x.size());
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (n * channels + c) * inner;
      for (std::size_t s = 0; s < inner; ++s) {
        const double h = (px[base + s] - mean[c]) * invstd[c];
        xhat[base + s] = h;
        y[base + s] = gamma[c] * h + beta[c];
      }
    }
  }
  BatchNormForward out;
  out.y = finish(x.shape(), std::move(y), "batchnorm");
  out.xhat = Tensor::unchecked(x.shape(), std::move(xhat));
  out.invstd = Tensor::unchecked({channels}, std::move(invstd));
  out.mean = Tensor::unchecked({channels}, std::move(mean));
  out.var = Tensor::unchecked({channels}, std::move(var));
  return out;
}

Tensor batchnorm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                      const Tensor& running_mean, const Tensor& running_var, double eps) {
  check_bn_params(x, gamma, beta);
  const auto batch = x.dim(0), channels = x.dim(1);
  const auto inner = spatial_size(x.shape());
  std::vector<double> y(x.size());
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      const double inv = 1.0 / std::sqrt(running_var[c] + eps);
      const std::size_t base = (n * channels + c) * inner;
      for (std::size_t s = 0; s < inner; ++s) {
        y[base + s] = gamma[c] * (x[base + s] - running_mean[c]) * inv + beta[c];
      }
    }
  }
  return finish(x.shape(), std::move(y), "batchnorm_eval");
}

BatchNormGrads batchnorm_backward(const Tensor& dy, const Tensor& xhat, const Tensor& gamma,
                                  const Tensor& invstd) {
  require_same(dy, xhat, "batchnorm_backward");
  const auto batch = dy.dim(0), channels = dy.dim(1);
  const auto inner = spatial_size(dy.shape());
  const double count = static_cast<double>(batch * inner);
  std::vector<double> dgamma(channels, 0.0), dbeta(channels, 0.0);
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (n * channels + c) * inner;
      double sg = 0.0, sb = 0.0;
      for (std::size_t s = 0; s < inner; ++s) {
        sb += dy[base + s];
        sg += dy[base + s] * xhat[base + s];
      }
      dgamma[c] += sg;
      dbeta[c] += sb;
    }
  }
  std::vector<double> dx(dy.size());
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (n * channels + c) * inner;
      const double k = gamma[c] * invstd[c] / count;
      for (std::size_t s = 0; s < inner; ++s) {
        dx[base + s] = k * (count * dy[base + s] - dbeta[c] - xhat[base + s] * dgamma[c]);
      }
    }
  }
  return {finish(dy.shape(), std::move(dx), "batchnorm_backward"),
          finish({channels}, std::move(dgamma), "batchnorm_backward"),
          finish({channels}, std::move(dbeta), "batchnorm_backward")};
}

SoftmaxCrossEntropy softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "softmax_cross_entropy");
  const auto batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(batch));
  }
  std::vector<double> probs(logits.size());
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const int label = labels[b];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw InputError("tensor-core", "label " + std::to_string(label) + " outside [0, " +
                                          std::to_string(classes) + ")");
    }
    const double* row = logits.ptr() + b * classes;
    const double peak = *std::max_element(row, row + classes);
    double sum = 0.0;
    for (std::size_t k = 0; k < classes; ++k) {
      const double e = std::exp(row[k] - peak);
      probs[b * classes + k] = e;
      sum += e;
    }
    for (std::size_t k = 0; k < classes; ++k) probs[b * classes + k] /= sum;
    total += (peak + std::log(sum)) - row[label];
  }
  SoftmaxCrossEntropy out;
  out.loss = total / static_cast<double>(batch);
  out.probs = Tensor::unchecked(logits.shape(), std::move(probs));
  return out;
}

Tensor softmax_cross_entropy_backward(const Tensor& probs, std::span<const int> labels,
                                      double upstream) {
  const auto batch = probs.dim(0), classes = probs.dim(1);
  const double k = upstream / static_cast<double>(batch);
  std::vector<double> d(probs.size());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < classes; ++c) {
      const double target = static_cast<std::size_t>(labels[b]) == c ? 1.0 : 0.0;
      d[b * classes + c] = (probs[b * classes + c] - target) * k;
    }
  }
  return finish(probs.shape(), std::move(d), "softmax_cross_entropy_backward");
}

}  // namespace quadra::kernels
