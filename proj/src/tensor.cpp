#include "mla/tensor.hpp"

#include <cmath>
#include <sstream>

#include "mla/digest.hpp"
#include "mla/errors.hpp"

namespace mla {

size_t shape_numel(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) {
    if (d <= 0) raise(ErrorCode::Shape, "non-positive dimension in shape");
    n *= static_cast<size_t>(d);
  }
  return n;
}

Tensor::Tensor(std::vector<int> shape, Dtype dt) : shape_(std::move(shape)), dtype_(dt) {
  v_.assign(shape_numel(shape_), 0.0);
}

Tensor Tensor::zeros(std::vector<int> shape, Dtype dt) { return Tensor(std::move(shape), dt); }

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values, Dtype dt) {
  if (shape_numel(shape) != values.size())
    raise(ErrorCode::Shape, "value count does not match shape");
  return sealed(std::move(shape), std::move(values), dt);
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows, Dtype dt) {
  int r = static_cast<int>(rows.size());
  int c = r > 0 ? static_cast<int>(rows.begin()->size()) : 0;
  std::vector<double> v;
  v.reserve(static_cast<size_t>(r) * c);
  for (const auto& row : rows) {
    if (static_cast<int>(row.size()) != c)
      raise(ErrorCode::Shape, "ragged matrix initializer");
    for (double x : row) v.push_back(x);
  }
  return from({r, c}, std::move(v), dt);
}

Tensor Tensor::vec(std::initializer_list<double> values, Dtype dt) {
  return from({static_cast<int>(values.size())}, std::vector<double>(values), dt);
}

Tensor Tensor::sealed(std::vector<int> shape, std::vector<double>&& values, Dtype dt) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.v_ = std::move(values);
  t.dtype_ = dt;
  t.seal();
  return t;
}

void Tensor::seal() {
  if (dtype_ == Dtype::F32) {
    for (double& x : v_) x = static_cast<double>(static_cast<float>(x));
  }
}

void Tensor::fill(double x) {
  double q = quantize(x, dtype_);
  for (double& e : v_) e = q;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape_.size(); ++i) {
    if (i) os << 'x';
    os << shape_[i];
  }
  os << ']';
  return os.str();
}

bool Tensor::all_finite() const {
  for (double x : v_)
    if (!std::isfinite(x)) return false;
  return true;
}

std::vector<double>& Tensor::ensure_grad() {
  if (!grad_) grad_.emplace(v_.size(), 0.0);
  return *grad_;
}

void Tensor::append_rows(const Tensor& block) {
  if (rank() != 2 || block.rank() != 2 || block.dim(1) != dim(1))
    raise(ErrorCode::Shape, "append_rows: incompatible shapes " + shape_str() + " and " +
                              block.shape_str());
  if (grad_) raise(ErrorCode::Contract, "append_rows: pending gradient");
  v_.insert(v_.end(), block.v_.begin(), block.v_.end());
  shape_[0] += block.dim(0);
  if (dtype_ == Dtype::F32) seal();
}

std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

}  // namespace mla
