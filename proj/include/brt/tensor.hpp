// Copyright 2026 The brt Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "brt/error.hpp"

namespace brt {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Global modes.
//
// Checked mode makes every primitive raise NumericError instead of silently
// emitting NaN/Inf. Grad mode is thread-local: a tape belongs to one logical
// thread and is born with the forward pass; dropping the output tensor frees
// the whole graph, so there is no global tape to reset between tests.
// ---------------------------------------------------------------------------

inline std::atomic<bool>& checked_mode_flag() {
  static std::atomic<bool> flag{true};
  return flag;
}
inline bool checked_mode() { return checked_mode_flag().load(std::memory_order_relaxed); }
inline void set_checked_mode(bool on) { checked_mode_flag().store(on, std::memory_order_relaxed); }

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
inline bool grad_enabled() { return grad_mode_flag(); }

/// RAII guard disabling tape construction (used by finite-difference probes
/// and inference paths).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on demand, same length as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

/// Value-semantic handle to a node of the autodiff graph. Copies share the
/// underlying storage; all primitives produce fresh nodes.
class Tensor {
 public:
  Tensor() : node_(std::make_shared<TensorNode>()) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), 0.0, requires_grad);
  }

  static Tensor filled(Shape shape, double v, bool requires_grad = false) {
    Tensor t;
    t.node_->shape = std::move(shape);
    t.node_->value.assign(shape_numel(t.node_->shape), v);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
      throw ShapeError("from_data: shape " + shape_str(shape) + " does not match data length " +
                       std::to_string(data.size()));
    Tensor t;
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(double v) { return from_data({1}, {v}); }

  const Shape& shape() const { return node_->shape; }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }
  int64_t ndim() const { return static_cast<int64_t>(node_->shape.size()); }
  int64_t rows() const { return node_->shape.empty() ? 1 : node_->shape[0]; }
  int64_t cols() const { return node_->shape.size() < 2 ? numel() / rows() : node_->shape[1]; }

  const std::vector<double>& data() const { return node_->value; }
  std::vector<double>& mutable_data() { return node_->value; }
  double at(int64_t r, int64_t c) const { return node_->value[r * cols() + c]; }
  double item() const {
    if (numel() != 1) throw ShapeError("item: tensor has " + std::to_string(numel()) + " elements");
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  const std::vector<double>& grad() const {
    const_cast<TensorNode*>(node_.get())->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

  /// Reverse-mode sweep from a scalar output.
  void backward() const {
    if (numel() != 1) throw ShapeError("backward: output must be scalar");
    if (!node_->requires_grad) return;
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    topo(node_.get(), seen, order);
    node_->ensure_grad();
    node_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      TensorNode* n = *it;
      if (n->backward) n->backward(*n);
    }
  }

  std::shared_ptr<TensorNode> node() const { return node_; }

 private:
  static void topo(TensorNode* root, std::unordered_set<TensorNode*>& seen,
                   std::vector<TensorNode*>& order) {
    // Iterative DFS; graphs stay small but recursion depth is unbounded in L.
    struct Frame {
      TensorNode* n;
      size_t next = 0;
    };
    std::vector<Frame> stack{{root}};
    seen.insert(root);
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next < f.n->parents.size()) {
        TensorNode* p = f.n->parents[f.next++].get();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.push_back({p});
        }
      } else {
        order.push_back(f.n);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<TensorNode> node_;
};

/// Boolean matrix used as an attention / softmax mask. rows == 1 broadcasts
/// one row over every row of the masked tensor. true = keep.
struct BoolMat {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<uint8_t> v;

  static BoolMat full(int64_t r, int64_t c, bool value) {
    return BoolMat{r, c, std::vector<uint8_t>(static_cast<size_t>(r * c), value ? 1 : 0)};
  }
  bool at(int64_t r, int64_t c) const { return v[static_cast<size_t>(r * cols + c)] != 0; }
  void set(int64_t r, int64_t c, bool value) {
    v[static_cast<size_t>(r * cols + c)] = value ? 1 : 0;
  }
};

// ---------------------------------------------------------------------------
// Primitive plumbing
// ---------------------------------------------------------------------------

namespace detail {

inline void check_finite(const char* op, const std::vector<double>& v) {
  if (!checked_mode()) return;
  for (double x : v)
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite value produced");
}

inline Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                          std::vector<Tensor> inputs,
                          std::function<void(TensorNode&)> backward) {
  check_finite(op, value);
  Tensor out = Tensor::from_data(std::move(shape), std::move(value));
  bool needs = false;
  if (grad_enabled())
    for (const Tensor& t : inputs) needs = needs || t.requires_grad();
  if (needs) {
    out.set_requires_grad(true);
    auto node = out.node();
    node->parents.reserve(inputs.size());
    for (const Tensor& t : inputs) node->parents.push_back(t.node());
    node->backward = std::move(backward);
  }
  return out;
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

inline void accumulate(TensorNode& dst, const std::vector<double>& g) {
  if (!dst.requires_grad) return;
  dst.ensure_grad();
  for (size_t i = 0; i < g.size(); ++i) dst.grad[i] += g[i];
}

// Raw kernels. C is assumed zero-initialised.
inline void mm_nn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,k] = a[m,n] * b[k,n]^T
inline void mm_nt(const double* a, const double* b, double* c, int64_t m, int64_t n, int64_t k) {
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    double* crow = c + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (int64_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

// c[k,n] = a[m,k]^T * b[m,n]
inline void mm_tn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise primitives
// ---------------------------------------------------------------------------

namespace detail {

template <typename FwdFn, typename BwdFn>
Tensor binary_elementwise(const char* op, const Tensor& a, const Tensor& b, FwdFn fwd, BwdFn bwd) {
  require_same_shape(op, a, b);
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i], bv[i]);
  auto an = a.node();
  auto bn = b.node();
  return make_result(op, a.shape(), std::move(out), {a, b}, [an, bn, bwd](TensorNode& self) {
    for (size_t i = 0; i < self.grad.size(); ++i) {
      double ga = 0, gb = 0;
      bwd(an->value[i], bn->value[i], self.value[i], self.grad[i], ga, gb);
      if (an->requires_grad) {
        an->ensure_grad();
        an->grad[i] += ga;
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        bn->grad[i] += gb;
      }
    }
  });
}

template <typename FwdFn, typename BwdFn>
Tensor unary_elementwise(const char* op, const Tensor& a, FwdFn fwd, BwdFn bwd) {
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  auto an = a.node();
  return make_result(op, a.shape(), std::move(out), {a}, [an, bwd](TensorNode& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      an->grad[i] += self.grad[i] * bwd(an->value[i], self.value[i]);
  });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double, double g, double& ga, double& gb) {
        ga = g;
        gb = g;
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double, double g, double& ga, double& gb) {
        ga = g;
        gb = -g;
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double, double g, double& ga, double& gb) {
        ga = g * y;
        gb = g * x;
      });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double x, double y, double, double g, double& ga, double& gb) {
        ga = g / y;
        gb = -g * x / (y * y);
      });
}

inline Tensor minimum(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      "minimum", a, b, [](double x, double y) { return std::min(x, y); },
      [](double x, double y, double, double g, double& ga, double& gb) {
        if (x <= y)
          ga = g;
        else
          gb = g;
      });
}

inline Tensor maximum(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      "maximum", a, b, [](double x, double y) { return std::max(x, y); },
      [](double x, double y, double, double g, double& ga, double& gb) {
        if (x >= y)
          ga = g;
        else
          gb = g;
      });
}

inline Tensor neg(const Tensor& a) {
  return detail::unary_elementwise(
      "neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

inline Tensor abs(const Tensor& a) {
  return detail::unary_elementwise(
      "abs", a, [](double x) { return std::abs(x); },
      [](double x, double) { return x >= 0 ? 1.0 : -1.0; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary_elementwise(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary_elementwise(
      "relu", a, [](double x) { return x > 0 ? x : 0.0; },
      [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

/// Exact GELU: 0.5 x (1 + erf(x/sqrt(2))).
inline Tensor gelu(const Tensor& a) {
  return detail::unary_elementwise(
      "gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); },
      [](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
        const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + x * pdf;
      });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary_elementwise(
      "sigmoid", a,
      [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor scale(const Tensor& a, double c) {
  return detail::unary_elementwise(
      "scale", a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::unary_elementwise(
      "add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

/// Elementwise max(x, c); used to clamp homogeneous depths away from zero.
inline Tensor clamp_min(const Tensor& a, double c) {
  return detail::unary_elementwise(
      "clamp_min", a, [c](double x) { return std::max(x, c); },
      [c](double x, double) { return x >= c ? 1.0 : 0.0; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }

// ---------------------------------------------------------------------------
// Structural primitives
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2)
    throw ShapeError("matmul: expected 2-D operands, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  const int64_t m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2)
    throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  std::vector<double> out(static_cast<size_t>(m * n), 0.0);
  detail::mm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result("matmul", {m, n}, std::move(out), {a, b},
                             [an, bn, m, k, n](TensorNode& self) {
                               if (an->requires_grad) {
                                 an->ensure_grad();
                                 detail::mm_nt(self.grad.data(), bn->value.data(), an->grad.data(),
                                               m, n, k);
                               }
                               if (bn->requires_grad) {
                                 bn->ensure_grad();
                                 detail::mm_tn(an->value.data(), self.grad.data(), bn->grad.data(),
                                               m, k, n);
                               }
                             });
}

/// a . b^T without materialising the transpose (attention logits).
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[1])
    throw ShapeError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  const int64_t m = a.shape()[0], n = a.shape()[1], k = b.shape()[0];
  std::vector<double> out(static_cast<size_t>(m * k), 0.0);
  detail::mm_nt(a.data().data(), b.data().data(), out.data(), m, n, k);
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result("matmul_nt", {m, k}, std::move(out), {a, b},
                             [an, bn, m, n, k](TensorNode& self) {
                               if (an->requires_grad) {
                                 an->ensure_grad();
                                 detail::mm_nn(self.grad.data(), bn->value.data(), an->grad.data(),
                                               m, k, n);
                               }
                               if (bn->requires_grad) {
                                 bn->ensure_grad();
                                 detail::mm_tn(self.grad.data(), an->value.data(), bn->grad.data(),
                                               m, k, n);
                               }
                             });
}

inline Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2) throw ShapeError("transpose: expected 2-D tensor");
  const int64_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(static_cast<size_t>(m * n));
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
  auto an = a.node();
  return detail::make_result("transpose", {n, m}, std::move(out), {a}, [an, m, n](TensorNode& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) an->grad[i * n + j] += self.grad[j * m + i];
  });
}

/// x[N,D] + v[D] broadcast over rows.
inline Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  if (a.ndim() != 2 || v.ndim() != 1 || a.shape()[1] != v.shape()[0])
    throw ShapeError("add_rowvec: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(v.shape()));
  const int64_t n = a.shape()[0], d = a.shape()[1];
  std::vector<double> out(a.data());
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) out[i * d + j] += v.data()[j];
  auto an = a.node();
  auto vn = v.node();
  return detail::make_result("add_rowvec", a.shape(), std::move(out), {a, v},
                             [an, vn, n, d](TensorNode& self) {
                               if (an->requires_grad) detail::accumulate(*an, self.grad);
                               if (vn->requires_grad) {
                                 vn->ensure_grad();
                                 for (int64_t i = 0; i < n; ++i)
                                   for (int64_t j = 0; j < d; ++j)
                                     vn->grad[j] += self.grad[i * d + j];
                               }
                             });
}

inline Tensor sum_all(const Tensor& a) {
  double s = 0;
  for (double x : a.data()) s += x;
  auto an = a.node();
  return detail::make_result("sum_all", {1}, {s}, {a}, [an](TensorNode& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (double& g : an->grad) g += self.grad[0];
  });
}

inline Tensor mean_all(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean_all: empty tensor");
  return scale(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

inline Tensor slice_rows(const Tensor& a, int64_t r0, int64_t r1) {
  if (a.ndim() != 2 || r0 < 0 || r1 > a.shape()[0] || r0 > r1)
    throw ShapeError("slice_rows: bad range");
  const int64_t d = a.shape()[1];
  std::vector<double> out(a.data().begin() + r0 * d, a.data().begin() + r1 * d);
  auto an = a.node();
  return detail::make_result("slice_rows", {r1 - r0, d}, std::move(out), {a},
                             [an, r0, d](TensorNode& self) {
                               if (!an->requires_grad) return;
                               an->ensure_grad();
                               for (size_t i = 0; i < self.grad.size(); ++i)
                                 an->grad[static_cast<size_t>(r0 * d) + i] += self.grad[i];
                             });
}

inline Tensor slice_cols(const Tensor& a, int64_t c0, int64_t c1) {
  if (a.ndim() != 2 || c0 < 0 || c1 > a.shape()[1] || c0 > c1)
    throw ShapeError("slice_cols: bad range");
  const int64_t n = a.shape()[0], d = a.shape()[1], w = c1 - c0;
  std::vector<double> out(static_cast<size_t>(n * w));
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < w; ++j) out[i * w + j] = a.data()[i * d + c0 + j];
  auto an = a.node();
  return detail::make_result("slice_cols", {n, w}, std::move(out), {a},
                             [an, c0, n, d, w](TensorNode& self) {
                               if (!an->requires_grad) return;
                               an->ensure_grad();
                               for (int64_t i = 0; i < n; ++i)
                                 for (int64_t j = 0; j < w; ++j)
                                   an->grad[i * d + c0 + j] += self.grad[i * w + j];
                             });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const int64_t d = parts[0].shape().size() == 2 ? parts[0].shape()[1] : -1;
  int64_t total = 0;
  for (const Tensor& p : parts) {
    if (p.ndim() != 2 || p.shape()[1] != d) throw ShapeError("concat_rows: column mismatch");
    total += p.shape()[0];
  }
  std::vector<double> out;
  out.reserve(static_cast<size_t>(total * d));
  for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  std::vector<std::shared_ptr<TensorNode>> nodes;
  for (const Tensor& p : parts) nodes.push_back(p.node());
  return detail::make_result("concat_rows", {total, d}, std::move(out), parts,
                             [nodes](TensorNode& self) {
                               size_t off = 0;
                               for (auto& n : nodes) {
                                 const size_t len = n->value.size();
                                 if (n->requires_grad) {
                                   n->ensure_grad();
                                   for (size_t i = 0; i < len; ++i) n->grad[i] += self.grad[off + i];
                                 }
                                 off += len;
                               }
                             });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const int64_t n = parts[0].rows();
  int64_t total = 0;
  for (const Tensor& p : parts) {
    if (p.ndim() != 2 || p.shape()[0] != n) throw ShapeError("concat_cols: row mismatch");
    total += p.shape()[1];
  }
  std::vector<double> out(static_cast<size_t>(n * total));
  int64_t off = 0;
  for (const Tensor& p : parts) {
    const int64_t w = p.shape()[1];
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < w; ++j) out[i * total + off + j] = p.data()[i * w + j];
    off += w;
  }
  std::vector<std::shared_ptr<TensorNode>> nodes;
  std::vector<int64_t> widths;
  for (const Tensor& p : parts) {
    nodes.push_back(p.node());
    widths.push_back(p.shape()[1]);
  }
  return detail::make_result("concat_cols", {n, total}, std::move(out), parts,
                             [nodes, widths, n, total](TensorNode& self) {
                               int64_t off = 0;
                               for (size_t k = 0; k < nodes.size(); ++k) {
                                 const int64_t w = widths[k];
                                 if (nodes[k]->requires_grad) {
                                   nodes[k]->ensure_grad();
                                   for (int64_t i = 0; i < n; ++i)
                                     for (int64_t j = 0; j < w; ++j)
                                       nodes[k]->grad[i * w + j] += self.grad[i * total + off + j];
                                 }
                                 off += w;
                               }
                             });
}

/// Row gather; index -1 yields a zero row (used for unmapped point tokens).
inline Tensor gather_rows(const Tensor& a, const std::vector<int64_t>& idx,
                          bool allow_sentinel = false) {
  if (a.ndim() != 2) throw ShapeError("gather_rows: expected 2-D tensor");
  const int64_t n = a.shape()[0], d = a.shape()[1];
  std::vector<double> out(idx.size() * static_cast<size_t>(d), 0.0);
  for (size_t i = 0; i < idx.size(); ++i) {
    const int64_t r = idx[i];
    if (r == -1 && allow_sentinel) continue;
    if (r < 0 || r >= n) throw ShapeError("gather_rows: index out of range");
    std::copy_n(a.data().begin() + r * d, d, out.begin() + static_cast<int64_t>(i) * d);
  }
  auto an = a.node();
  auto indices = idx;
  return detail::make_result("gather_rows", {static_cast<int64_t>(idx.size()), d}, std::move(out),
                             {a}, [an, indices, d](TensorNode& self) {
                               if (!an->requires_grad) return;
                               an->ensure_grad();
                               for (size_t i = 0; i < indices.size(); ++i) {
                                 const int64_t r = indices[i];
                                 if (r < 0) continue;
                                 for (int64_t j = 0; j < d; ++j)
                                   an->grad[r * d + j] += self.grad[i * d + j];
                               }
                             });
}

// ---------------------------------------------------------------------------
// Normalisation primitives
// ---------------------------------------------------------------------------

/// Softmax over the last dimension with optional boolean keep-mask. Masked
/// entries are exactly zero in the output; each row is stabilised by
/// max-subtraction over its kept entries.
inline Tensor softmax_lastdim(const Tensor& x, const BoolMat* mask = nullptr) {
  if (x.ndim() < 1 || x.ndim() > 2) throw ShapeError("softmax_lastdim: expected 1-D or 2-D");
  const int64_t n = x.ndim() == 2 ? x.shape()[0] : 1;
  const int64_t d = x.ndim() == 2 ? x.shape()[1] : x.shape()[0];
  if (mask) {
    if (mask->cols != d || (mask->rows != n && mask->rows != 1))
      throw ShapeError("softmax_lastdim: mask not broadcastable");
  }
  std::vector<double> out(x.data().size());
  for (int64_t i = 0; i < n; ++i) {
    const int64_t mrow = mask && mask->rows > 1 ? i : 0;
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < d; ++j)
      if (!mask || mask->at(mrow, j)) mx = std::max(mx, x.data()[i * d + j]);
    if (!std::isfinite(mx)) throw NumericError("softmax_lastdim: fully masked row");
    double sum = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const bool keep = !mask || mask->at(mrow, j);
      const double e = keep ? std::exp(x.data()[i * d + j] - mx) : 0.0;
      out[i * d + j] = e;
      sum += e;
    }
    for (int64_t j = 0; j < d; ++j) out[i * d + j] /= sum;
  }
  auto xn = x.node();
  const BoolMat mask_copy = mask ? *mask : BoolMat{};
  const bool has_mask = mask != nullptr;
  return detail::make_result("softmax_lastdim", x.shape(), std::move(out), {x},
                             [xn, n, d, mask_copy, has_mask](TensorNode& self) {
                               if (!xn->requires_grad) return;
                               xn->ensure_grad();
                               for (int64_t i = 0; i < n; ++i) {
                                 double dot = 0.0;
                                 for (int64_t j = 0; j < d; ++j)
                                   dot += self.grad[i * d + j] * self.value[i * d + j];
                                 const int64_t mrow = has_mask && mask_copy.rows > 1 ? i : 0;
                                 for (int64_t j = 0; j < d; ++j) {
                                   if (has_mask && !mask_copy.at(mrow, j)) continue;
                                   const double y = self.value[i * d + j];
                                   xn->grad[i * d + j] += y * (self.grad[i * d + j] - dot);
                                 }
                               }
                             });
}

/// Per-last-dim standardisation followed by the gamma/beta affine map.
inline Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                        double eps = 1e-5) {
  if (x.ndim() < 1 || x.ndim() > 2) throw ShapeError("layernorm: expected 1-D or 2-D");
  const int64_t n = x.ndim() == 2 ? x.shape()[0] : 1;
  const int64_t d = x.ndim() == 2 ? x.shape()[1] : x.shape()[0];
  if (gamma.numel() != d || beta.numel() != d)
    throw ShapeError("layernorm: gamma/beta must have length " + std::to_string(d));
  std::vector<double> out(x.data().size());
  std::vector<double> xhat(x.data().size());
  std::vector<double> inv_std(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    double mean = 0;
    for (int64_t j = 0; j < d; ++j) mean += x.data()[i * d + j];
    mean /= static_cast<double>(d);
    double var = 0;
    for (int64_t j = 0; j < d; ++j) {
      const double c = x.data()[i * d + j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(i)] = is;
    for (int64_t j = 0; j < d; ++j) {
      const double h = (x.data()[i * d + j] - mean) * is;
      xhat[i * d + j] = h;
      out[i * d + j] = gamma.data()[j] * h + beta.data()[j];
    }
  }
  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  return detail::make_result(
      "layernorm", x.shape(), std::move(out), {x, gamma, beta},
      [xn, gn, bn, n, d, xhat, inv_std](TensorNode& self) {
        for (int64_t i = 0; i < n; ++i) {
          double sum_g = 0, sum_gx = 0;
          for (int64_t j = 0; j < d; ++j) {
            const double gy = self.grad[i * d + j] * gn->value[j];
            sum_g += gy;
            sum_gx += gy * xhat[i * d + j];
          }
          if (xn->requires_grad) {
            xn->ensure_grad();
            const double inv_d = 1.0 / static_cast<double>(d);
            for (int64_t j = 0; j < d; ++j) {
              const double gy = self.grad[i * d + j] * gn->value[j];
              xn->grad[i * d + j] +=
                  inv_std[static_cast<size_t>(i)] *
                  (gy - inv_d * sum_g - xhat[i * d + j] * inv_d * sum_gx);
            }
          }
          if (gn->requires_grad) {
            gn->ensure_grad();
            for (int64_t j = 0; j < d; ++j)
              gn->grad[j] += self.grad[i * d + j] * xhat[i * d + j];
          }
          if (bn->requires_grad) {
            bn->ensure_grad();
            for (int64_t j = 0; j < d; ++j) bn->grad[j] += self.grad[i * d + j];
          }
        }
      });
}

/// Per-row cross entropy from raw logits: out[i] = logsumexp(x_i) - x_i[t_i].
inline Tensor ce_rows(const Tensor& logits, const std::vector<int>& targets) {
  if (logits.ndim() != 2) throw ShapeError("ce_rows: expected 2-D logits");
  const int64_t n = logits.shape()[0], d = logits.shape()[1];
  if (static_cast<int64_t>(targets.size()) != n)
    throw ShapeError("ce_rows: targets length mismatch");
  std::vector<double> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    if (targets[i] < 0 || targets[i] >= d) throw ShapeError("ce_rows: target out of range");
    double mx = logits.data()[i * d];
    for (int64_t j = 1; j < d; ++j) mx = std::max(mx, logits.data()[i * d + j]);
    double sum = 0;
    for (int64_t j = 0; j < d; ++j) sum += std::exp(logits.data()[i * d + j] - mx);
    out[static_cast<size_t>(i)] = std::log(sum) + mx - logits.data()[i * d + targets[i]];
  }
  auto ln = logits.node();
  auto tgt = targets;
  return detail::make_result("ce_rows", {n}, std::move(out), {logits},
                             [ln, tgt, n, d](TensorNode& self) {
                               if (!ln->requires_grad) return;
                               ln->ensure_grad();
                               for (int64_t i = 0; i < n; ++i) {
                                 double mx = ln->value[i * d];
                                 for (int64_t j = 1; j < d; ++j)
                                   mx = std::max(mx, ln->value[i * d + j]);
                                 double sum = 0;
                                 for (int64_t j = 0; j < d; ++j)
                                   sum += std::exp(ln->value[i * d + j] - mx);
                                 const double g = self.grad[static_cast<size_t>(i)];
                                 for (int64_t j = 0; j < d; ++j) {
                                   const double p = std::exp(ln->value[i * d + j] - mx) / sum;
                                   ln->grad[i * d + j] += g * (p - (j == tgt[i] ? 1.0 : 0.0));
                                 }
                               }
                             });
}

// ---------------------------------------------------------------------------
// Non-differentiable helpers
// ---------------------------------------------------------------------------

inline int64_t argmax_row(const Tensor& t, int64_t row, int64_t c0, int64_t c1) {
  int64_t best = c0;
  for (int64_t j = c0 + 1; j < c1; ++j)
    if (t.at(row, j) > t.at(row, best)) best = j;
  return best;
}

}  // namespace brt
