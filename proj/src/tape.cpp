#include "mla/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

#include "mla/errors.hpp"

namespace mla {

namespace {

// c[m x n] += a[m x k] * b[k x n]
void mm(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<size_t>(i) * k;
    double* ci = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[m x k] += g[m x n] * b[k x n]^T
void mm_abt(const double* g, const double* b, double* c, int m, int n, int k) {
  for (int i = 0; i < m; ++i) {
    const double* gi = g + static_cast<size_t>(i) * n;
    double* ci = c + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double* bp = b + static_cast<size_t>(p) * n;
      double acc = 0.0;
      for (int j = 0; j < n; ++j) acc += gi[j] * bp[j];
      ci[p] += acc;
    }
  }
}

// c[k x n] += a[m x k]^T * g[m x n]
void mm_atb(const double* a, const double* g, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<size_t>(i) * k;
    const double* gi = g + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      double av = ai[p];
      if (av == 0.0) continue;
      double* cp = c + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) cp[j] += av * gi[j];
    }
  }
}

double gelu_fwd(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_grad(double x) {
  double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

}  // namespace

BoolMask BoolMask::causal(int n) {
  BoolMask m;
  m.rows = m.cols = n;
  m.keep.assign(static_cast<size_t>(n) * n, 0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) m.keep[static_cast<size_t>(i) * n + j] = 1;
  return m;
}

BoolMask BoolMask::all_true(int rows, int cols) {
  BoolMask m;
  m.rows = rows;
  m.cols = cols;
  m.keep.assign(static_cast<size_t>(rows) * cols, 1);
  return m;
}

Tape::Tape(Dtype dtype, bool record_grads) : dtype_(dtype), record_grads_(record_grads) {}

Tape::Node& Tape::node(Var v) {
  if (!v.valid() || v.idx >= size()) raise(ErrorCode::Contract, "invalid tape handle");
  return nodes_[static_cast<size_t>(v.idx)];
}

const Tape::Node& Tape::node(Var v) const {
  if (!v.valid() || v.idx >= size()) raise(ErrorCode::Contract, "invalid tape handle");
  return nodes_[static_cast<size_t>(v.idx)];
}

const Tensor& Tape::value(Var v) const { return node(v).val; }

double Tape::scalar(Var v) const {
  const Tensor& t = value(v);
  if (t.numel() != 1) raise(ErrorCode::Contract, "expected scalar, got " + t.shape_str());
  return t[0];
}

std::vector<double>& Tape::grad_of(int idx) {
  Node& n = nodes_[static_cast<size_t>(idx)];
  if (n.grad.empty()) n.grad.assign(n.val.numel(), 0.0);
  return n.grad;
}

Var Tape::push(Tensor val, bool requires, std::function<void(Tape&, int)> back) {
  Node n;
  n.val = std::move(val);
  n.requires_grad = requires && record_grads_;
  if (n.requires_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{size() - 1};
}

Var Tape::leaf(Tensor* param, bool trainable) {
  if (param == nullptr) raise(ErrorCode::Contract, "null parameter leaf");
  if (param->dtype() != dtype_) raise(ErrorCode::Contract, "leaf dtype does not match tape");
  auto it = leaf_index_.find(param);
  if (it != leaf_index_.end()) {
    Node& n = nodes_[static_cast<size_t>(it->second)];
    if (n.trainable_leaf != (trainable && record_grads_))
      raise(ErrorCode::Contract, "parameter registered twice with different trainability");
    return Var{it->second};
  }
  Var v = push(*param, trainable, {});
  Node& n = node(v);
  n.param = param;
  n.trainable_leaf = trainable && record_grads_;
  leaf_index_[param] = v.idx;
  return v;
}

Var Tape::leaf(const Tensor* param) {
  if (param == nullptr) raise(ErrorCode::Contract, "null parameter leaf");
  if (param->dtype() != dtype_) raise(ErrorCode::Contract, "leaf dtype does not match tape");
  auto it = leaf_index_.find(param);
  if (it != leaf_index_.end()) return Var{it->second};
  Var v = push(*param, false, {});
  leaf_index_[param] = v.idx;
  return v;
}

Var Tape::constant(Tensor value) {
  if (value.dtype() != dtype_) raise(ErrorCode::Contract, "constant dtype does not match tape");
  return push(std::move(value), false, {});
}

void Tape::check_same_shape(Var a, Var b, const char* op) const {
  if (!value(a).same_shape(value(b)))
    raise(ErrorCode::Shape, std::string(op) + ": shape mismatch " + value(a).shape_str() +
                                " vs " + value(b).shape_str());
}

Var Tape::matmul(Var va, Var vb) {
  const Tensor& a = value(va);
  const Tensor& b = value(vb);
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    raise(ErrorCode::Shape,
          "matmul: incompatible shapes " + a.shape_str() + " and " + b.shape_str());
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  mm(a.data(), b.data(), out.data(), m, k, n);
  const int ia = va.idx, ib = vb.idx;
  return push(Tensor::sealed({m, n}, std::move(out), dtype_), requires(va) || requires(vb),
              [ia, ib, m, k, n](Tape& t, int self) {
                const auto& g = t.grad_of(self);
                auto& na = t.nodes_[static_cast<size_t>(ia)];
                auto& nb = t.nodes_[static_cast<size_t>(ib)];
                if (na.requires_grad)
                  mm_abt(g.data(), nb.val.data(), t.grad_of(ia).data(), m, n, k);
                if (nb.requires_grad)
                  mm_atb(na.val.data(), g.data(), t.grad_of(ib).data(), m, k, n);
              });
}

Var Tape::affine(Var vx, Var vw, Var vb) {
  const Tensor& x = value(vx);
  const Tensor& w = value(vw);
  const Tensor& b = value(vb);
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0))
    raise(ErrorCode::Shape,
          "affine: incompatible shapes " + x.shape_str() + " and " + w.shape_str());
  if (b.rank() != 1 || b.dim(0) != w.dim(1))
    raise(ErrorCode::Shape, "affine: bias shape " + b.shape_str() + " does not match " +
                                w.shape_str());
  const int m = x.dim(0), k = x.dim(1), n = w.dim(1);
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  mm(x.data(), w.data(), out.data(), m, k, n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<size_t>(i) * n + j] += b[static_cast<size_t>(j)];
  const int ix = vx.idx, iw = vw.idx, ib = vb.idx;
  return push(Tensor::sealed({m, n}, std::move(out), dtype_),
              requires(vx) || requires(vw) || requires(vb),
              [ix, iw, ib, m, k, n](Tape& t, int self) {
                const auto& g = t.grad_of(self);
                auto& nx = t.nodes_[static_cast<size_t>(ix)];
                auto& nw = t.nodes_[static_cast<size_t>(iw)];
                auto& nb = t.nodes_[static_cast<size_t>(ib)];
                if (nx.requires_grad)
                  mm_abt(g.data(), nw.val.data(), t.grad_of(ix).data(), m, n, k);
                if (nw.requires_grad)
                  mm_atb(nx.val.data(), g.data(), t.grad_of(iw).data(), m, k, n);
                if (nb.requires_grad) {
                  auto& gb = t.grad_of(ib);
                  for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                      gb[static_cast<size_t>(j)] += g[static_cast<size_t>(i) * n + j];
                }
              });
}

Var Tape::add(Var va, Var vb) {
  check_same_shape(va, vb, "add");
  const Tensor& a = value(va);
  const Tensor& b = value(vb);
  std::vector<double> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  const int ia = va.idx, ib = vb.idx;
  return push(Tensor::sealed(a.shape(), std::move(out), dtype_), requires(va) || requires(vb),
              [ia, ib](Tape& t, int self) {
                const auto& g = t.grad_of(self);
                for (int src : {ia, ib}) {
                  if (!t.nodes_[static_cast<size_t>(src)].requires_grad) continue;
                  auto& gs = t.grad_of(src);
                  for (size_t i = 0; i < g.size(); ++i) gs[i] += g[i];
                }
              });
}

Var Tape::sub(Var va, Var vb) {
  check_same_shape(va, vb, "sub");
  const Tensor& a = value(va);
  const Tensor& b = value(vb);
  std::vector<double> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  const int ia = va.idx, ib = vb.idx;
  return push(Tensor::sealed(a.shape(), std::move(out), dtype_), requires(va) || requires(vb),
              [ia, ib](Tape& t, int self) {
                const auto& g = t.grad_of(self);
                if (t.nodes_[static_cast<size_t>(ia)].requires_grad) {
                  auto& ga = t.grad_of(ia);
                  for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                }
                if (t.nodes_[static_cast<size_t>(ib)].requires_grad) {
                  auto& gb = t.grad_of(ib);
                  for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                }
              });
}

Var Tape::mul(Var va, Var vb) {
  check_same_shape(va, vb, "mul");
  const Tensor& a = value(va);
  const Tensor& b = value(vb);
  std::vector<double> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  const int ia = va.idx, ib = vb.idx;
  return push(Tensor::sealed(a.shape(), std::move(out), dtype_), requires(va) || requires(vb),
              [ia, ib](Tape& t, int self) {
                const auto& g = t.grad_of(self);
                auto& na = t.nodes_[static_cast<size_t>(ia)];
                auto& nb = t.nodes_[static_cast<size_t>(ib)];
                if (na.requires_grad) {
                  auto& ga = t.grad_of(ia);
                  for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * nb.val[i];
                }
                if (nb.requires_grad) {
                  auto& gb = t.grad_of(ib);
                  for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * na.val[i];
                }
              });
}

Var Tape::scale(Var va, double s) {
  const Tensor& a = value(va);
  std::vector<double> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = s * a[i];
  const int ia = va.idx;
  return push(Tensor::sealed(a.shape(), std::move(out), dtype_), requires(va),
              [ia, s](Tape& t, int self) {
                const auto& g = t.grad_of(self);
                auto& ga = t.grad_of(ia);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
              });
}

Var Tape::relu(Var va) {
  const Tensor& a = value(va);
  std::vector<double> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
  const int ia = va.idx;
  return push(Tensor::sealed(a.shape(), std::move(out), dtype_), requires(va),
              [ia](Tape& t, int self) {
                const auto& g = t.grad_of(self);
                const auto& x = t.nodes_[static_cast<size_t>(ia)].val;
                auto& ga = t.grad_of(ia);
                for (size_t i = 0; i < g.size(); ++i)
                  if (x[i] > 0.0) ga[i] += g[i];
              });
}

Var Tape::gelu(Var va) {
  const Tensor& a = value(va);
  std::vector<double> out(a.numel());
  for (size_t i = 0; i < out.size(); ++i) out[i] = gelu_fwd(a[i]);
  const int ia = va.idx;
  return push(Tensor::sealed(a.shape(), std::move(out), dtype_), requires(va),
              [ia](Tape& t, int self) {
                const auto& g = t.grad_of(self);
                const auto& x = t.nodes_[static_cast<size_t>(ia)].val;
                auto& ga = t.grad_of(ia);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * gelu_grad(x[i]);
              });
}

Var Tape::transpose(Var va) {
  const Tensor& a = value(va);
  if (a.rank() != 2) raise(ErrorCode::Shape, "transpose: expected rank-2, got " + a.shape_str());
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(a.numel());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<size_t>(j) * m + i] = a[static_cast<size_t>(i) * n + j];
  const int ia = va.idx;
  return push(Tensor::sealed({n, m}, std::move(out), dtype_), requires(va),
              [ia, m, n](Tape& t, int self) {
                const auto& g = t.grad_of(self);
                auto& ga = t.grad_of(ia);
                for (int i = 0; i < m; ++i)
                  for (int j = 0; j < n; ++j)
                    ga[static_cast<size_t>(i) * n + j] += g[static_cast<size_t>(j) * m + i];
              });
}

Var Tape::slice_cols(Var va, int c0, int c1) {
  const Tensor& a = value(va);
  if (a.rank() != 2 || c0 < 0 || c1 > a.dim(1) || c0 >= c1)
    raise(ErrorCode::Shape, "slice_cols: bad range on " + a.shape_str());
  const int m = a.dim(0), n = a.dim(1), w = c1 - c0;
  std::vector<double> out(static_cast<size_t>(m) * w);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < w; ++j)
      out[static_cast<size_t>(i) * w + j] = a[static_cast<size_t>(i) * n + c0 + j];
  const int ia = va.idx;
  return push(Tensor::sealed({m, w}, std::move(out), dtype_), requires(va),
              [ia, m, n, w, c0](Tape& t, int self) {
                const auto& g = t.grad_of(self);
                auto& ga = t.grad_of(ia);
                for (int i = 0; i < m; ++i)
                  for (int j = 0; j < w; ++j)
                    ga[static_cast<size_t>(i) * n + c0 + j] += g[static_cast<size_t>(i) * w + j];
              });
}

Var Tape::slice_rows(Var va, int r0, int r1) {
  const Tensor& a = value(va);
  if (a.rank() != 2 || r0 < 0 || r1 > a.dim(0) || r0 >= r1)
    raise(ErrorCode::Shape, "slice_rows: bad range on " + a.shape_str());
  const int n = a.dim(1), h = r1 - r0;
  std::vector<double> out(a.data() + static_cast<size_t>(r0) * n,
                          a.data() + static_cast<size_t>(r1) * n);
  const int ia = va.idx;
  return push(Tensor::sealed({h, n}, std::move(out), dtype_), requires(va),
              [ia, n, h, r0](Tape& t, int self) {
                const auto& g = t.grad_of(self);
                auto& ga = t.grad_of(ia);
                for (size_t i = 0; i < static_cast<size_t>(h) * n; ++i)
                  ga[static_cast<size_t>(r0) * n + i] += g[i];
              });
}

Var Tape::row(Var va, int r) { return slice_rows(va, r, r + 1); }

Var Tape::concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) raise(ErrorCode::Shape, "concat_rows: no inputs");
  const int n = value(parts[0]).cols();
  int total = 0;
  bool req = false;
  for (Var p : parts) {
    const Tensor& t = value(p);
    if (t.rank() != 2 || t.dim(1) != n)
      raise(ErrorCode::Shape, "concat_rows: inconsistent shape " + t.shape_str());
    total += t.dim(0);
    req = req || requires(p);
  }
  std::vector<double> out;
  out.reserve(static_cast<size_t>(total) * n);
  std::vector<int> idxs;
  std::vector<int> heights;
  for (Var p : parts) {
    const Tensor& t = value(p);
    out.insert(out.end(), t.data(), t.data() + t.numel());
    idxs.push_back(p.idx);
    heights.push_back(t.dim(0));
  }
  return push(Tensor::sealed({total, n}, std::move(out), dtype_), req,
              [idxs, heights, n](Tape& t, int self) {
                const auto& g = t.grad_of(self);
                size_t off = 0;
                for (size_t p = 0; p < idxs.size(); ++p) {
                  size_t count = static_cast<size_t>(heights[p]) * n;
                  if (t.nodes_[static_cast<size_t>(idxs[p])].requires_grad) {
                    auto& gp = t.grad_of(idxs[p]);
                    for (size_t i = 0; i < count; ++i) gp[i] += g[off + i];
                  }
                  off += count;
                }
              });
}

Var Tape::stack_rows(const std::vector<Var>& rows) {
  if (rows.empty()) raise(ErrorCode::Shape, "stack_rows: no inputs");
  const int n = value(rows[0]).cols();
  bool req = false;
  std::vector<int> idxs;
  std::vector<double> out;
  out.reserve(rows.size() * static_cast<size_t>(n));
  for (Var r : rows) {
    const Tensor& t = value(r);
    if (t.numel() != static_cast<size_t>(n) || t.rows() != 1)
      raise(ErrorCode::Shape, "stack_rows: part " + t.shape_str() + " is not one row of " +
                                  std::to_string(n));
    out.insert(out.end(), t.data(), t.data() + t.numel());
    idxs.push_back(r.idx);
    req = req || requires(r);
  }
  const int b = static_cast<int>(rows.size());
  return push(Tensor::sealed({b, n}, std::move(out), dtype_), req,
              [idxs, n](Tape& t, int self) {
                const auto& g = t.grad_of(self);
                for (size_t r = 0; r < idxs.size(); ++r) {
                  if (!t.nodes_[static_cast<size_t>(idxs[r])].requires_grad) continue;
                  auto& gr = t.grad_of(idxs[r]);
                  for (int j = 0; j < n; ++j)
                    gr[static_cast<size_t>(j)] += g[r * static_cast<size_t>(n) + j];
                }
              });
}

Var Tape::softmax_rows(Var va) {
  const Tensor& a = value(va);
  return softmax_rows(va, BoolMask::all_true(a.rows(), a.cols()));
}

Var Tape::softmax_rows(Var va, const BoolMask& mask) {
  const Tensor& a = value(va);
  const int m = a.rows(), n = a.cols();
  if (mask.rows != m || mask.cols != n)
    raise(ErrorCode::Shape, "softmax_rows: mask shape mismatch");
  std::vector<double> out(a.numel(), 0.0);
  for (int i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < n; ++j)
      if (mask.at(i, j)) mx = std::max(mx, a[static_cast<size_t>(i) * n + j]);
    if (!std::isfinite(mx))
      raise(ErrorCode::InvalidArgument, "softmax_rows: fully masked row " + std::to_string(i));
    double z = 0.0;
    for (int j = 0; j < n; ++j)
      if (mask.at(i, j)) {
        double e = std::exp(a[static_cast<size_t>(i) * n + j] - mx);
        out[static_cast<size_t>(i) * n + j] = e;
        z += e;
      }
    for (int j = 0; j < n; ++j) out[static_cast<size_t>(i) * n + j] /= z;
  }
  const int ia = va.idx;
  return push(Tensor::sealed(a.shape(), std::move(out), dtype_), requires(va),
              [ia, m, n](Tape& t, int self) {
                const auto& g = t.grad_of(self);
                const auto& y = t.nodes_[static_cast<size_t>(self)].val;
                auto& ga = t.grad_of(ia);
                for (int i = 0; i < m; ++i) {
                  double dot = 0.0;
                  for (int j = 0; j < n; ++j) {
                    size_t k = static_cast<size_t>(i) * n + j;
                    dot += g[k] * y[k];
                  }
                  for (int j = 0; j < n; ++j) {
                    size_t k = static_cast<size_t>(i) * n + j;
                    ga[k] += y[k] * (g[k] - dot);
                  }
                }
              });
}

Var Tape::layer_norm(Var vx, Var vgain, Var vbias, double eps) {
  if (eps <= 0.0) raise(ErrorCode::InvalidArgument, "layer_norm: eps must be positive");
  const Tensor& x = value(vx);
  const Tensor& gain = value(vgain);
  const Tensor& bias = value(vbias);
  const int m = x.rows(), d = x.cols();
  if (gain.numel() != static_cast<size_t>(d) || bias.numel() != static_cast<size_t>(d))
    raise(ErrorCode::Shape, "layer_norm: gain/bias shape does not match last axis " +
                                std::to_string(d));
  std::vector<double> out(x.numel());
  for (int i = 0; i < m; ++i) {
    const double* xi = x.data() + static_cast<size_t>(i) * d;
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += xi[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= d;
    double inv = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < d; ++j)
      out[static_cast<size_t>(i) * d + j] = gain[static_cast<size_t>(j)] * (xi[j] - mu) * inv +
                                            bias[static_cast<size_t>(j)];
  }
  const int ix = vx.idx, ig = vgain.idx, ib = vbias.idx;
  return push(Tensor::sealed(x.shape(), std::move(out), dtype_),
              requires(vx) || requires(vgain) || requires(vbias),
              [ix, ig, ib, m, d, eps](Tape& t, int self) {
                const auto& g = t.grad_of(self);
                const auto& x = t.nodes_[static_cast<size_t>(ix)].val;
                const auto& gain = t.nodes_[static_cast<size_t>(ig)].val;
                const bool need_x = t.nodes_[static_cast<size_t>(ix)].requires_grad;
                const bool need_g = t.nodes_[static_cast<size_t>(ig)].requires_grad;
                const bool need_b = t.nodes_[static_cast<size_t>(ib)].requires_grad;
                std::vector<double> xhat(static_cast<size_t>(d));
                for (int i = 0; i < m; ++i) {
                  const double* xi = x.data() + static_cast<size_t>(i) * d;
                  const double* gi = g.data() + static_cast<size_t>(i) * d;
                  double mu = 0.0;
                  for (int j = 0; j < d; ++j) mu += xi[j];
                  mu /= d;
                  double var = 0.0;
                  for (int j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
                  var /= d;
                  double inv = 1.0 / std::sqrt(var + eps);
                  for (int j = 0; j < d; ++j) xhat[static_cast<size_t>(j)] = (xi[j] - mu) * inv;
                  if (need_g) {
                    auto& gg = t.grad_of(ig);
                    for (int j = 0; j < d; ++j)
                      gg[static_cast<size_t>(j)] += gi[j] * xhat[static_cast<size_t>(j)];
                  }
                  if (need_b) {
                    auto& gb = t.grad_of(ib);
                    for (int j = 0; j < d; ++j) gb[static_cast<size_t>(j)] += gi[j];
                  }
                  if (need_x) {
                    auto& gx = t.grad_of(ix);
                    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                    for (int j = 0; j < d; ++j) {
                      double dxh = gi[j] * gain[static_cast<size_t>(j)];
                      mean_dxhat += dxh;
                      mean_dxhat_xhat += dxh * xhat[static_cast<size_t>(j)];
                    }
                    mean_dxhat /= d;
                    mean_dxhat_xhat /= d;
                    for (int j = 0; j < d; ++j) {
                      double dxh = gi[j] * gain[static_cast<size_t>(j)];
                      gx[static_cast<size_t>(i) * d + j] +=
                          inv * (dxh - mean_dxhat - xhat[static_cast<size_t>(j)] * mean_dxhat_xhat);
                    }
                  }
                }
              });
}

Var Tape::embedding_rows(Var vtable, std::vector<int> ids) {
  const Tensor& table = value(vtable);
  if (table.rank() != 2) raise(ErrorCode::Shape, "embedding_rows: table must be rank-2");
  const int v = table.dim(0), d = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= v)
      raise(ErrorCode::Shape, "embedding_rows: row " + std::to_string(id) +
                                  " out of range for table " + table.shape_str());
  const int s = static_cast<int>(ids.size());
  std::vector<double> out(static_cast<size_t>(s) * d);
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < d; ++j)
      out[static_cast<size_t>(i) * d + j] =
          table[static_cast<size_t>(ids[static_cast<size_t>(i)]) * d + j];
  const int it = vtable.idx;
  return push(Tensor::sealed({s, d}, std::move(out), dtype_), requires(vtable),
              [it, ids = std::move(ids), d](Tape& t, int self) {
                const auto& g = t.grad_of(self);
                auto& gt = t.grad_of(it);
                for (size_t i = 0; i < ids.size(); ++i)
                  for (int j = 0; j < d; ++j)
                    gt[static_cast<size_t>(ids[i]) * d + j] += g[i * static_cast<size_t>(d) + j];
              });
}

Var Tape::attention(Var vq, Var vk, Var vv, int num_heads, bool causal) {
  const Tensor& q = value(vq);
  const Tensor& k = value(vk);
  const Tensor& v = value(vv);
  if (q.rank() != 2 || !q.same_shape(k) || !q.same_shape(v))
    raise(ErrorCode::Shape, "attention: q/k/v must share one [S x d] shape");
  const int s = q.dim(0), d = q.dim(1);
  if (num_heads < 1 || d % num_heads != 0)
    raise(ErrorCode::Shape, "attention: model dim " + std::to_string(d) +
                                " not divisible by heads " + std::to_string(num_heads));
  const int dh = d / num_heads;
  const double alpha = 1.0 / std::sqrt(static_cast<double>(dh));
  // Attention weights are kept for backward: [head][query row][key row].
  auto weights = std::make_shared<std::vector<double>>(
      static_cast<size_t>(num_heads) * s * s, 0.0);
  std::vector<double> out(static_cast<size_t>(s) * d, 0.0);
  std::vector<double> scores(static_cast<size_t>(s));
  for (int h = 0; h < num_heads; ++h) {
    const int c0 = h * dh;
    double* w_h = weights->data() + static_cast<size_t>(h) * s * s;
    for (int i = 0; i < s; ++i) {
      const int limit = causal ? i + 1 : s;
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < limit; ++j) {
        double acc = 0.0;
        const double* qi = q.data() + static_cast<size_t>(i) * d + c0;
        const double* kj = k.data() + static_cast<size_t>(j) * d + c0;
        for (int tIdx = 0; tIdx < dh; ++tIdx) acc += qi[tIdx] * kj[tIdx];
        scores[static_cast<size_t>(j)] = acc * alpha;
        mx = std::max(mx, scores[static_cast<size_t>(j)]);
      }
      double z = 0.0;
      for (int j = 0; j < limit; ++j) {
        double e = std::exp(scores[static_cast<size_t>(j)] - mx);
        w_h[static_cast<size_t>(i) * s + j] = e;
        z += e;
      }
      for (int j = 0; j < limit; ++j) {
        double a = w_h[static_cast<size_t>(i) * s + j] / z;
        w_h[static_cast<size_t>(i) * s + j] = a;
        const double* vj = v.data() + static_cast<size_t>(j) * d + c0;
        double* oi = out.data() + static_cast<size_t>(i) * d + c0;
        for (int tIdx = 0; tIdx < dh; ++tIdx) oi[tIdx] += a * vj[tIdx];
      }
    }
  }
  const int iq = vq.idx, ik = vk.idx, iv = vv.idx;
  return push(
      Tensor::sealed({s, d}, std::move(out), dtype_),
      requires(vq) || requires(vk) || requires(vv),
      [iq, ik, iv, num_heads, s, d, dh, alpha, causal, weights](Tape& t, int self) {
        const auto& g = t.grad_of(self);
        const auto& q = t.nodes_[static_cast<size_t>(iq)].val;
        const auto& k = t.nodes_[static_cast<size_t>(ik)].val;
        const auto& v = t.nodes_[static_cast<size_t>(iv)].val;
        const bool need_q = t.nodes_[static_cast<size_t>(iq)].requires_grad;
        const bool need_k = t.nodes_[static_cast<size_t>(ik)].requires_grad;
        const bool need_v = t.nodes_[static_cast<size_t>(iv)].requires_grad;
        std::vector<double> da(static_cast<size_t>(s));
        for (int h = 0; h < num_heads; ++h) {
          const int c0 = h * dh;
          const double* w_h = weights->data() + static_cast<size_t>(h) * s * s;
          for (int i = 0; i < s; ++i) {
            const int limit = causal ? i + 1 : s;
            const double* gi = g.data() + static_cast<size_t>(i) * d + c0;
            // dA[i][j] = g_i . v_j ; dS = A (dA - sum_j dA A)
            double dot = 0.0;
            for (int j = 0; j < limit; ++j) {
              const double* vj = v.data() + static_cast<size_t>(j) * d + c0;
              double acc = 0.0;
              for (int tIdx = 0; tIdx < dh; ++tIdx) acc += gi[tIdx] * vj[tIdx];
              da[static_cast<size_t>(j)] = acc;
              dot += acc * w_h[static_cast<size_t>(i) * s + j];
            }
            for (int j = 0; j < limit; ++j) {
              double a = w_h[static_cast<size_t>(i) * s + j];
              double ds = a * (da[static_cast<size_t>(j)] - dot);
              if (need_v) {
                auto& gv = t.grad_of(iv);
                double* gvj = gv.data() + static_cast<size_t>(j) * d + c0;
                for (int tIdx = 0; tIdx < dh; ++tIdx) gvj[tIdx] += a * gi[tIdx];
              }
              if (ds == 0.0) continue;
              if (need_q) {
                auto& gq = t.grad_of(iq);
                double* gqi = gq.data() + static_cast<size_t>(i) * d + c0;
                const double* kj = k.data() + static_cast<size_t>(j) * d + c0;
                for (int tIdx = 0; tIdx < dh; ++tIdx) gqi[tIdx] += alpha * ds * kj[tIdx];
              }
              if (need_k) {
                auto& gk = t.grad_of(ik);
                double* gkj = gk.data() + static_cast<size_t>(j) * d + c0;
                const double* qi = q.data() + static_cast<size_t>(i) * d + c0;
                for (int tIdx = 0; tIdx < dh; ++tIdx) gkj[tIdx] += alpha * ds * qi[tIdx];
              }
            }
          }
        }
      });
}

Var Tape::normalize_rows(Var vx) {
  const Tensor& x = value(vx);
  const int m = x.rows(), d = x.cols();
  std::vector<double> out(x.numel());
  for (int i = 0; i < m; ++i) {
    const double* xi = x.data() + static_cast<size_t>(i) * d;
    double nsq = 0.0;
    for (int j = 0; j < d; ++j) nsq += xi[j] * xi[j];
    if (nsq == 0.0)
      raise(ErrorCode::Degenerate, "normalize_rows: zero-norm row " + std::to_string(i));
    double inv = 1.0 / std::sqrt(nsq);
    for (int j = 0; j < d; ++j) out[static_cast<size_t>(i) * d + j] = xi[j] * inv;
  }
  const int ix = vx.idx;
  return push(Tensor::sealed(x.shape(), std::move(out), dtype_), requires(vx),
              [ix, m, d](Tape& t, int self) {
                const auto& g = t.grad_of(self);
                const auto& x = t.nodes_[static_cast<size_t>(ix)].val;
                const auto& y = t.nodes_[static_cast<size_t>(self)].val;
                auto& gx = t.grad_of(ix);
                for (int i = 0; i < m; ++i) {
                  const double* xi = x.data() + static_cast<size_t>(i) * d;
                  const double* yi = y.data() + static_cast<size_t>(i) * d;
                  const double* gi = g.data() + static_cast<size_t>(i) * d;
                  double nsq = 0.0;
                  for (int j = 0; j < d; ++j) nsq += xi[j] * xi[j];
                  double inv = 1.0 / std::sqrt(nsq);
                  double dot = 0.0;
                  for (int j = 0; j < d; ++j) dot += gi[j] * yi[j];
                  for (int j = 0; j < d; ++j)
                    gx[static_cast<size_t>(i) * d + j] += inv * (gi[j] - yi[j] * dot);
                }
              });
}

Var Tape::logsumexp_rows(Var vx) {
  const Tensor& x = value(vx);
  if (x.rank() != 2) raise(ErrorCode::Shape, "logsumexp_rows: expected rank-2");
  const int m = x.dim(0), n = x.dim(1);
  std::vector<double> out(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) {
    const double* xi = x.data() + static_cast<size_t>(i) * n;
    double mx = xi[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
    double z = 0.0;
    for (int j = 0; j < n; ++j) z += std::exp(xi[j] - mx);
    out[static_cast<size_t>(i)] = mx + std::log(z);
  }
  const int ix = vx.idx;
  return push(Tensor::sealed({m}, std::move(out), dtype_), requires(vx),
              [ix, m, n](Tape& t, int self) {
                const auto& g = t.grad_of(self);
                const auto& x = t.nodes_[static_cast<size_t>(ix)].val;
                const auto& lse = t.nodes_[static_cast<size_t>(self)].val;
                auto& gx = t.grad_of(ix);
                for (int i = 0; i < m; ++i)
                  for (int j = 0; j < n; ++j)
                    gx[static_cast<size_t>(i) * n + j] +=
                        g[static_cast<size_t>(i)] *
                        std::exp(x[static_cast<size_t>(i) * n + j] - lse[static_cast<size_t>(i)]);
              });
}

Var Tape::diagonal(Var vx) {
  const Tensor& x = value(vx);
  if (x.rank() != 2 || x.dim(0) != x.dim(1))
    raise(ErrorCode::Shape, "diagonal: expected square matrix, got " + x.shape_str());
  const int n = x.dim(0);
  std::vector<double> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) out[static_cast<size_t>(i)] = x[static_cast<size_t>(i) * n + i];
  const int ix = vx.idx;
  return push(Tensor::sealed({n}, std::move(out), dtype_), requires(vx),
              [ix, n](Tape& t, int self) {
                const auto& g = t.grad_of(self);
                auto& gx = t.grad_of(ix);
                for (int i = 0; i < n; ++i)
                  gx[static_cast<size_t>(i) * n + i] += g[static_cast<size_t>(i)];
              });
}

Var Tape::sum(Var va) {
  const Tensor& a = value(va);
  double acc = 0.0;
  for (size_t i = 0; i < a.numel(); ++i) acc += a[i];
  const int ia = va.idx;
  return push(Tensor::sealed({1}, std::vector<double>{acc}, dtype_), requires(va),
              [ia](Tape& t, int self) {
    const double g = t.grad_of(self)[0];
    auto& ga = t.grad_of(ia);
    for (double& x : ga) x += g;
  });
}

Var Tape::mean_all(Var va) {
  const Tensor& a = value(va);
  const double inv = 1.0 / static_cast<double>(a.numel());
  double acc = 0.0;
  for (size_t i = 0; i < a.numel(); ++i) acc += a[i];
  const int ia = va.idx;
  return push(Tensor::sealed({1}, std::vector<double>{acc * inv}, dtype_), requires(va),
              [ia, inv](Tape& t, int self) {
                const double g = t.grad_of(self)[0] * inv;
                auto& ga = t.grad_of(ia);
                for (double& x : ga) x += g;
              });
}

void Tape::backward(Var loss) {
  if (!record_grads_) raise(ErrorCode::Contract, "backward on a forward-only tape");
  if (backward_done_) raise(ErrorCode::Contract, "backward already run on this tape");
  const Tensor& l = value(loss);
  if (l.numel() != 1)
    raise(ErrorCode::Contract, "backward: loss must be scalar, got " + l.shape_str());
  backward_done_ = true;
  grad_of(loss.idx)[0] = 1.0;
  // Reverse record order is a reverse topological order; each node fires once.
  for (int i = loss.idx; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!n.requires_grad || n.grad.empty() || !n.back) continue;
    n.back(*this, i);
  }
  for (Node& n : nodes_) {
    if (!n.trainable_leaf || n.param == nullptr || n.grad.empty()) continue;
    auto& pg = n.param->ensure_grad();
    for (size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i];
  }
}

}  // namespace mla
