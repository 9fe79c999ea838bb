#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace quadra {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Runtime switch for the post-op finiteness scan. Defaults to on in builds
/// without NDEBUG.
void set_debug_checks(bool enabled);
bool debug_checks();

/// Dense, immutable, row-major float64 array.
///
/// Storage is reference counted, so copies and reshapes share memory; the
/// storage address doubles as the identity the memory ledger counts by.
class Tensor {
 public:
  Tensor();

  /// Rejects NaN/Inf and size mismatch.
  Tensor(Shape shape, std::vector<double> data);

  /// Skips the finiteness scan (kernels validate according to `debug_checks`).
  static Tensor unchecked(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return data_ ? data_->size() : 0; }
  std::size_t bytes() const noexcept { return size() * sizeof(double); }
  bool empty() const noexcept { return size() == 0; }

  std::span<const double> data() const noexcept;
  const double* ptr() const noexcept { return data_ ? data_->data() : nullptr; }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double at(std::initializer_list<std::size_t> index) const;

  /// Value of a one-element tensor.
  double item() const;

  /// Same storage, new shape.
  Tensor reshape(Shape shape) const;

  std::vector<double> to_vector() const;

  /// Address of the shared storage block; equal for reshaped views.
  const void* storage_id() const noexcept { return data_.get(); }

  bool all_finite() const;

 private:
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
};

bool same_shape(const Tensor& a, const Tensor& b);

/// Max elementwise |a-b| / max(|a|,|b|,floor). Shapes must agree.
double max_rel_diff(const Tensor& a, const Tensor& b, double floor = 1e-12);
double max_abs_diff(const Tensor& a, const Tensor& b);
bool bit_equal(const Tensor& a, const Tensor& b);

}  // namespace quadra
