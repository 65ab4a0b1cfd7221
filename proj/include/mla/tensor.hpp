#pragma once

#include <cstdint>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mla {

// F32 is the working precision for training and checkpoints; F64 is used by
// the gradient-checking harness. An F32 tensor stores each value as a double
// that is exactly representable as a 32-bit float (operations quantize their
// results), so serialization as float32 is lossless and arithmetic stays
// deterministic.
enum class Dtype { F32, F64 };

inline double quantize(double x, Dtype dt) {
  return dt == Dtype::F32 ? static_cast<double>(static_cast<float>(x)) : x;
}

class Tensor {
 public:
  Tensor() = default;
  // Zero-initialized.
  Tensor(std::vector<int> shape, Dtype dt);
  static Tensor zeros(std::vector<int> shape, Dtype dt = Dtype::F32);
  static Tensor from(std::vector<int> shape, std::vector<double> values,
                     Dtype dt = Dtype::F32);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                       Dtype dt = Dtype::F32);
  static Tensor vec(std::initializer_list<double> values, Dtype dt = Dtype::F32);
  // Takes ownership of raw values and quantizes them in place.
  static Tensor sealed(std::vector<int> shape, std::vector<double>&& values, Dtype dt);

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  size_t numel() const { return v_.size(); }
  // Rank-2 accessors; rank-1 tensors behave as a single row.
  int rows() const { return rank() == 2 ? shape_[0] : 1; }
  int cols() const { return rank() == 2 ? shape_[1] : (rank() == 1 ? shape_[0] : 0); }

  Dtype dtype() const { return dtype_; }
  std::string shape_str() const;
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const;

  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }
  std::span<const double> values() const { return v_; }
  double operator[](size_t i) const { return v_[i]; }
  double at(int r, int c) const { return v_[static_cast<size_t>(r) * cols() + c]; }
  void set(size_t i, double x) { v_[i] = quantize(x, dtype_); }
  void set(int r, int c, double x) { set(static_cast<size_t>(r) * cols() + c, x); }
  void fill(double x);
  // Re-quantizes the whole buffer after bulk writes through data().
  void seal();

  bool has_grad() const { return grad_.has_value(); }
  std::vector<double>& ensure_grad();
  const std::vector<double>* grad() const { return grad_ ? &*grad_ : nullptr; }
  std::vector<double>* grad_mut() { return grad_ ? &*grad_ : nullptr; }
  void clear_grad() { grad_.reset(); }

  // Appends rows to a rank-2 tensor (used by the growable embedding table).
  void append_rows(const Tensor& block);

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && v_ == o.v_; }

 private:
  std::vector<int> shape_;
  std::vector<double> v_;
  std::optional<std::vector<double>> grad_;
  Dtype dtype_ = Dtype::F32;
};

size_t shape_numel(const std::vector<int>& shape);

}  // namespace mla
