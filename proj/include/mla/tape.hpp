#pragma once

#include <functional>
#include <unordered_map>
#include <vector>

#include "mla/tensor.hpp"

namespace mla {

class Tape;

// Handle to a value recorded on a tape.
struct Var {
  int idx = -1;
  bool valid() const { return idx >= 0; }
};

// Row-major boolean mask; false entries are excluded from a softmax row.
struct BoolMask {
  int rows = 0;
  int cols = 0;
  std::vector<uint8_t> keep;

  static BoolMask causal(int n);
  static BoolMask all_true(int rows, int cols);
  bool at(int r, int c) const { return keep[static_cast<size_t>(r) * cols + c] != 0; }
};

// Reverse-mode tape. Nodes are appended in evaluation order, so the record
// itself is a topological order; backward() walks it once in reverse and
// accumulates gradients additively across fan-out, then flushes leaf
// gradients into the bound parameter tensors. A tape constructed with
// record_grads=false evaluates forward only and never touches parameters.
class Tape {
 public:
  explicit Tape(Dtype dtype = Dtype::F32, bool record_grads = true);

  Dtype dtype() const { return dtype_; }
  bool record_grads() const { return record_grads_; }
  int size() const { return static_cast<int>(nodes_.size()); }

  // Parameter leaf bound to external storage; repeated registration of the
  // same tensor returns the same node so fan-out accumulates in one place.
  Var leaf(Tensor* param, bool trainable);
  Var leaf(const Tensor* param);  // read-only leaf, never receives gradients
  Var constant(Tensor value);

  Var matmul(Var a, Var b);
  // x*w + row-broadcast bias.
  Var affine(Var x, Var w, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double s);
  Var relu(Var a);
  Var gelu(Var a);
  Var transpose(Var a);
  Var slice_cols(Var a, int c0, int c1);
  Var slice_rows(Var a, int r0, int r1);
  Var row(Var a, int r);  // one row as a [1 x n] matrix
  Var concat_rows(const std::vector<Var>& parts);
  Var stack_rows(const std::vector<Var>& rows);  // [1 x n] or [n] parts -> [B x n]
  Var softmax_rows(Var a);
  Var softmax_rows(Var a, const BoolMask& mask);
  Var layer_norm(Var x, Var gain, Var bias, double eps);
  Var embedding_rows(Var table, std::vector<int> ids);
  // Fused multi-head attention over projected q, k, v of shape [S x d].
  Var attention(Var q, Var k, Var v, int num_heads, bool causal);
  Var normalize_rows(Var x);
  Var logsumexp_rows(Var x);  // [R x C] -> [R]
  Var diagonal(Var x);        // [n x n] -> [n]
  Var sum(Var a);             // -> scalar [1]
  Var mean_all(Var a);        // -> scalar [1]

  // Populates grads on trainable leaves reachable from a scalar loss.
  void backward(Var loss);

  const Tensor& value(Var v) const;
  double scalar(Var v) const;

 private:
  struct Node {
    Tensor val;
    std::vector<double> grad;  // sized lazily during backward
    bool requires_grad = false;
    bool trainable_leaf = false;
    Tensor* param = nullptr;
    std::function<void(Tape&, int)> back;  // absent for leaves/constants
  };

  Var push(Tensor val, bool requires, std::function<void(Tape&, int)> back);
  Node& node(Var v);
  const Node& node(Var v) const;
  std::vector<double>& grad_of(int idx);
  bool requires(Var v) const { return node(v).requires_grad; }
  void check_same_shape(Var a, Var b, const char* op) const;

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, int> leaf_index_;
  Dtype dtype_;
  bool record_grads_;
  bool backward_done_ = false;
};

}  // namespace mla
