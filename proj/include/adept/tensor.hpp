#pragma once

// Dense float64 tensors with a reverse-mode gradient tape.
//
// A Tensor is a shared handle onto a Node. Operations that see at least one
// input requiring gradients (while grad mode is enabled) record their inputs
// and a backward rule on the output node; backward() then walks the resulting
// DAG in reverse topological order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdlib>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <unordered_set>
#include <utility>
#include <vector>

#include "adept/errors.hpp"

namespace adept {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Kernel threading

namespace detail {
inline int& thread_override() {
  static int n = 0;
  return n;
}
}  // namespace detail

/// Number of threads kernels may use: set_kernel_threads() if called, else
/// $ADEPT_THREADS, else 1.
inline int kernel_threads() {
  if (detail::thread_override() > 0) return detail::thread_override();
  static const int from_env = [] {
    const char* v = std::getenv("ADEPT_THREADS");
    if (!v) return 1;
    const int n = std::atoi(v);
    return n > 0 ? n : 1;
  }();
  return from_env;
}

inline void set_kernel_threads(int n) { detail::thread_override() = n; }

/// Runs fn(begin, end) over row blocks. Each row is owned by exactly one
/// thread, so results do not depend on the thread count.
template <class Fn>
void parallel_rows(std::size_t rows, std::size_t work_per_row, Fn&& fn) {
  const int threads = kernel_threads();
  if (threads <= 1 || rows < 2 || rows * work_per_row < (1u << 16)) {
    fn(std::size_t{0}, rows);
    return;
  }
  const std::size_t n = std::min<std::size_t>(threads, rows);
  const std::size_t chunk = (rows + n - 1) / n;
  std::vector<std::jthread> pool;
  for (std::size_t t = 1; t < n; ++t) {
    const std::size_t b = t * chunk, e = std::min(rows, b + chunk);
    if (b < e) pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(std::size_t{0}, std::min(rows, chunk));
}

// ---------------------------------------------------------------------------
// Grad mode

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Disables graph recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// ---------------------------------------------------------------------------
// Node / Tensor

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::string op;  // producing op, "" for leaves
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return parents.empty(); }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->data.assign(shape_numel(shape), 0.0);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.node_->data.begin(), t.node_->data.end(), value);
    return t;
  }

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("Tensor::from: shape " + shape_str(shape) + " needs " +
                           std::to_string(shape_numel(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    for (auto e : shape) {
      if (e == 0) throw DimensionError("Tensor::from: zero extent in " + shape_str(shape));
    }
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from(Shape{}, {v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<double> data() { return node_->data; }
  std::span<const double> data() const { return node_->data; }
  double operator[](std::size_t i) const { return node_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->data[r * node_->shape.back() + c]; }

  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> grad_mut() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  /// Same values, no graph history.
  Tensor detach() const { return from(shape(), node_->data, false); }

  const std::string& op() const { return node_->op; }
  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

/// Creates an output node; records parents and the backward rule only when
/// some input needs gradients.
inline Tensor make_result(Shape shape, std::vector<double> data, std::string op,
                          std::vector<Tensor> inputs, std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  bool track = false;
  if (grad_enabled()) {
    for (auto& t : inputs) track = track || t.requires_grad();
  }
  if (track) {
    n->requires_grad = true;
    n->op = std::move(op);
    for (auto& t : inputs) n->parents.push_back(t.node_ptr());
    n->backward_fn = std::move(backward);
  }
  return Tensor(std::move(n));
}

inline void require_rank(const Tensor& t, std::size_t r, const char* op) {
  if (t.rank() != r) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                         shape_str(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

inline void require_finite(const Tensor& t, const char* op) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw DomainError(std::string(op) + ": non-finite input");
  }
}

/// Accumulates into a parent's gradient if that parent takes part in backward.
inline double* grad_of(Node& parent) {
  if (!parent.requires_grad) return nullptr;
  parent.ensure_grad();
  return parent.grad.data();
}

// C[m,n] += A[m,k] * B[k,n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  parallel_rows(m, k * n, [=](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      double* ci = c + i * n;
      const double* ai = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = ai[p];
        const double* bp = b + p * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
      }
    }
  });
}

// C[m,k] += A[m,n] * B[k,n]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
                    std::size_t k) {
  parallel_rows(m, k * n, [=](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      const double* ai = a + i * n;
      double* ci = c + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const double* bp = b + p * n;
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += ai[j] * bp[j];
        ci[p] += s;
      }
    }
  });
}

// C[k,n] += A[m,k]^T * B[m,n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  parallel_rows(k, m * n, [=](std::size_t r0, std::size_t r1) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* ai = a + i * k;
      const double* bi = b + i * n;
      for (std::size_t p = r0; p < r1; ++p) {
        const double av = ai[p];
        double* cp = c + p * n;
        for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
      }
    }
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Graph traversal

/// Topologically ordered view of the graph that produced a tensor.
class GradGraph {
 public:
  static GradGraph build(const Tensor& root) {
    GradGraph g;
    std::unordered_set<const Node*> seen;
    // Iterative post-order DFS; recursion would overflow on long chains.
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    seen.insert(root.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node* p = node->parents[next++].get();
        if (seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        g.order_.push_back(node);
        stack.pop_back();
      }
    }
    return g;
  }

  /// Inputs first, root last.
  const std::vector<Node*>& order() const { return order_; }

 private:
  std::vector<Node*> order_;
};

/// Accumulates d(loss)/d(t) into every reachable tensor with requires_grad.
/// Leaf gradients accumulate across calls until zero_grad(); interior
/// gradients are reset at the start of each call.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) return;
  const GradGraph g = GradGraph::build(loss);
  for (Node* n : g.order()) {
    if (!n->is_leaf()) n->grad.assign(n->data.size(), 0.0);
  }
  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0;
  const auto& order = g.order();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise ops

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result(a.shape(), std::move(out), "add", {a, b}, [](Node& self) {
    for (auto& p : self.parents) {
      if (double* g = detail::grad_of(*p)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result(a.shape(), std::move(out), "sub", {a, b}, [](Node& self) {
    if (double* g = detail::grad_of(*self.parents[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = detail::grad_of(*self.parents[1])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result(a.shape(), std::move(out), "mul", {a, b}, [](Node& self) {
    const auto& av = self.parents[0]->data;
    const auto& bv = self.parents[1]->data;
    if (double* g = detail::grad_of(*self.parents[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (double* g = detail::grad_of(*self.parents[1])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * c;
  return detail::make_result(a.shape(), std::move(out), "scale", {a}, [c](Node& self) {
    if (double* g = detail::grad_of(*self.parents[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * c;
    }
  });
}

/// x[m,n] + bias[n] broadcast over rows.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  detail::require_rank(x, 2, "add_bias");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (bias.numel() != n) {
    throw DimensionError("add_bias: shape mismatch " + shape_str(x.shape()) + " vs " +
                         shape_str(bias.shape()));
  }
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + bias[j];
  return detail::make_result(x.shape(), std::move(out), "add_bias", {x, bias},
                             [m, n](Node& self) {
                               if (double* g = detail::grad_of(*self.parents[0])) {
                                 for (std::size_t i = 0; i < m * n; ++i) g[i] += self.grad[i];
                               }
                               if (double* g = detail::grad_of(*self.parents[1])) {
                                 for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
                               }
                             });
}

inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return detail::make_result(x.shape(), std::move(out), "relu", {x}, [](Node& self) {
    const auto& xv = self.parents[0]->data;
    if (double* g = detail::grad_of(*self.parents[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        if (xv[i] > 0.0) g[i] += self.grad[i];
      }
    }
  });
}

/// Exact (erf) GELU.
inline Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * inv_sqrt2));
  }
  return detail::make_result(x.shape(), std::move(out), "gelu", {x}, [](Node& self) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    const auto& xv = self.parents[0]->data;
    if (double* g = detail::grad_of(*self.parents[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const double v = xv[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
        g[i] += self.grad[i] * (cdf + v * pdf);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: shape mismatch " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return detail::make_result({m, n}, std::move(out), "matmul", {a, b}, [m, k, n](Node& self) {
    const double* av = self.parents[0]->data.data();
    const double* bv = self.parents[1]->data.data();
    if (double* g = detail::grad_of(*self.parents[0])) {
      detail::gemm_nt(self.grad.data(), bv, g, m, n, k);
    }
    if (double* g = detail::grad_of(*self.parents[1])) {
      detail::gemm_tn(av, self.grad.data(), g, m, k, n);
    }
  });
}

inline Tensor transpose(const Tensor& x) {
  detail::require_rank(x, 2, "transpose");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  return detail::make_result({n, m}, std::move(out), "transpose", {x}, [m, n](Node& self) {
    if (double* g = detail::grad_of(*self.parents[0])) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
    }
  });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return detail::make_result(std::move(shape), std::move(out), "reshape", {x}, [](Node& self) {
    if (double* g = detail::grad_of(*self.parents[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

/// Concatenation along `axis`; all other extents must agree.
inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw DimensionError("concat: axis out of range for " + shape_str(s0));
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == s0[d];
    if (!ok) {
      throw DimensionError("concat: shape mismatch " + shape_str(s0) + " vs " + shape_str(s));
    }
    total += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
  for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];
  Shape out_shape = s0;
  out_shape[axis] = total;
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.data().begin() + o * w, w, out.begin() + o * total * inner + offset);
    }
    widths.push_back(w);
    offset += w;
  }
  return detail::make_result(std::move(out_shape), std::move(out), "concat", parts,
                             [outer, inner, total, widths](Node& self) {
                               std::size_t off = 0;
                               for (std::size_t k = 0; k < self.parents.size(); ++k) {
                                 const std::size_t w = widths[k];
                                 if (double* g = detail::grad_of(*self.parents[k])) {
                                   for (std::size_t o = 0; o < outer; ++o)
                                     for (std::size_t i = 0; i < w; ++i)
                                       g[o * w + i] += self.grad[o * total * inner + off + i];
                                 }
                                 off += w;
                               }
                             });
}

/// Rows of table[V,d] selected by `indices`, giving [len,d].
inline Tensor embedding(const Tensor& table, std::span<const int> indices) {
  detail::require_rank(table, 2, "embedding");
  const std::size_t v = table.dim(0), d = table.dim(1);
  if (indices.empty()) throw ContractError("embedding: empty index list");
  std::vector<int> idx(indices.begin(), indices.end());
  std::vector<double> out(idx.size() * d);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= v) {
      throw IndexError("embedding: index " + std::to_string(idx[r]) + " outside table of " +
                       std::to_string(v) + " rows");
    }
    std::copy_n(table.data().begin() + idx[r] * d, d, out.begin() + r * d);
  }
  return detail::make_result({idx.size(), d}, std::move(out), "embedding", {table},
                             [idx, d](Node& self) {
                               if (double* g = detail::grad_of(*self.parents[0])) {
                                 for (std::size_t r = 0; r < idx.size(); ++r)
                                   for (std::size_t j = 0; j < d; ++j)
                                     g[idx[r] * d + j] += self.grad[r * d + j];
                               }
                             });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return detail::make_result(Shape{}, {s}, "sum", {x}, [](Node& self) {
    if (double* g = detail::grad_of(*self.parents[0])) {
      const double gs = self.grad[0];
      for (std::size_t i = 0; i < self.parents[0]->data.size(); ++i) g[i] += gs;
    }
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

/// Column means of x[m,n], giving [1,n]. Used as global average pooling.
inline Tensor mean_rows(const Tensor& x) {
  detail::require_rank(x, 2, "mean_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += x[i * n + j];
  for (auto& v : out) v /= static_cast<double>(m);
  return detail::make_result({1, n}, std::move(out), "mean_rows", {x}, [m, n](Node& self) {
    if (double* g = detail::grad_of(*self.parents[0])) {
      const double inv = 1.0 / static_cast<double>(m);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j] * inv;
    }
  });
}

/// sum_i w_i x_i with constant weights.
inline Tensor weighted_sum(const Tensor& x, std::span<const double> weights) {
  if (weights.size() != x.numel()) {
    throw DimensionError("weighted_sum: " + std::to_string(weights.size()) + " weights for " +
                         shape_str(x.shape()));
  }
  std::vector<double> w(weights.begin(), weights.end());
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * x[i];
  return detail::make_result(Shape{}, {s}, "weighted_sum", {x}, [w](Node& self) {
    if (double* g = detail::grad_of(*self.parents[0])) {
      for (std::size_t i = 0; i < w.size(); ++i) g[i] += self.grad[0] * w[i];
    }
  });
}

/// log(sum(exp(x))) over every element, max-shifted.
inline Tensor logsumexp(const Tensor& x) {
  detail::require_finite(x, "logsumexp");
  const auto xv = x.data();
  const double mx = *std::max_element(xv.begin(), xv.end());
  double s = 0.0;
  for (double v : xv) s += std::exp(v - mx);
  const double lse = mx + std::log(s);
  return detail::make_result(Shape{}, {lse}, "logsumexp", {x}, [lse](Node& self) {
    if (double* g = detail::grad_of(*self.parents[0])) {
      const auto& xv = self.parents[0]->data;
      for (std::size_t i = 0; i < xv.size(); ++i) g[i] += self.grad[0] * std::exp(xv[i] - lse);
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization / softmax

/// Softmax along `axis`, max-subtracted.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= std::max<std::size_t>(x.rank(), 1) || x.rank() == 0) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " +
                         shape_str(x.shape()));
  }
  detail::require_finite(x, "softmax");
  std::size_t outer = 1, inner = 1;
  const std::size_t len = x.dim(axis);
  for (std::size_t d = 0; d < axis; ++d) outer *= x.dim(d);
  for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  std::vector<double> out(x.numel());
  const auto xv = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = xv[base];
      for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, xv[base + i * inner]);
      double s = 0.0;
      for (std::size_t i = 0; i < len; ++i) {
        const double e = std::exp(xv[base + i * inner] - mx);
        out[base + i * inner] = e;
        s += e;
      }
      for (std::size_t i = 0; i < len; ++i) out[base + i * inner] /= s;
    }
  }
  return detail::make_result(x.shape(), std::move(out), "softmax", {x},
                             [outer, inner, len](Node& self) {
                               double* g = detail::grad_of(*self.parents[0]);
                               if (!g) return;
                               const auto& y = self.data;
                               for (std::size_t o = 0; o < outer; ++o) {
                                 for (std::size_t in = 0; in < inner; ++in) {
                                   const std::size_t base = o * len * inner + in;
                                   double dot = 0.0;
                                   for (std::size_t i = 0; i < len; ++i)
                                     dot += y[base + i * inner] * self.grad[base + i * inner];
                                   for (std::size_t i = 0; i < len; ++i) {
                                     const std::size_t k = base + i * inner;
                                     g[k] += y[k] * (self.grad[k] - dot);
                                   }
                                 }
                               }
                             });
}

/// Row-wise layer normalization of x[m,n] with affine gamma/beta of length n.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  detail::require_rank(x, 2, "layer_norm");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (gamma.numel() != n || beta.numel() != n) {
    throw DimensionError("layer_norm: shape mismatch " + shape_str(x.shape()) + " vs " +
                         shape_str(gamma.shape()));
  }
  std::vector<double> out(m * n), xhat(m * n), inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = x.data().data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xi[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (xi[j] - mu) * inv_std[i];
      out[i * n + j] = xhat[i * n + j] * gamma[j] + beta[j];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), "layer_norm", {x, gamma, beta},
      [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        const auto& gm = self.parents[1]->data;
        if (double* gx = detail::grad_of(*self.parents[0])) {
          for (std::size_t i = 0; i < m; ++i) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = self.grad[i * n + j] * gm[j];
              mean_d += d;
              mean_dx += d * xhat[i * n + j];
            }
            mean_d /= static_cast<double>(n);
            mean_dx /= static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) {
              const double d = self.grad[i * n + j] * gm[j];
              gx[i * n + j] += inv_std[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
            }
          }
        }
        if (double* gg = detail::grad_of(*self.parents[1])) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gg[j] += self.grad[i * n + j] * xhat[i * n + j];
        }
        if (double* gb = detail::grad_of(*self.parents[2])) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[j] += self.grad[i * n + j];
        }
      });
}

/// Each row of x[m,n] scaled to unit Euclidean norm.
inline Tensor l2_normalize(const Tensor& x) {
  const std::size_t n = x.rank() == 0 ? 1 : x.shape().back();
  const std::size_t m = x.numel() / n;
  std::vector<double> out(x.numel()), norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += x[i * n + j] * x[i * n + j];
    norms[i] = std::max(std::sqrt(s), 1e-12);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] / norms[i];
  }
  return detail::make_result(x.shape(), std::move(out), "l2_normalize", {x},
                             [m, n, norms = std::move(norms)](Node& self) {
                               double* g = detail::grad_of(*self.parents[0]);
                               if (!g) return;
                               const auto& y = self.data;
                               for (std::size_t i = 0; i < m; ++i) {
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < n; ++j)
                                   dot += y[i * n + j] * self.grad[i * n + j];
                                 for (std::size_t j = 0; j < n; ++j)
                                   g[i * n + j] +=
                                       (self.grad[i * n + j] - y[i * n + j] * dot) / norms[i];
                               }
                             });
}

// ---------------------------------------------------------------------------
// Attention

/// Multi-head scaled dot-product attention.
///
/// q is [nq,d], k and v are [nk,d]; head h uses columns [h*d/heads, (h+1)*d/heads).
/// Returns [nq,d] with each head's softmax(q_h k_h^T / sqrt(d_h)) v_h in its columns.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
  detail::require_rank(q, 2, "attention");
  detail::require_rank(k, 2, "attention");
  detail::require_rank(v, 2, "attention");
  const std::size_t nq = q.dim(0), nk = k.dim(0), d = q.dim(1);
  if (k.dim(1) != d || v.dim(1) != d || v.dim(0) != nk) {
    throw DimensionError("attention: shape mismatch q" + shape_str(q.shape()) + " k" +
                         shape_str(k.shape()) + " v" + shape_str(v.shape()));
  }
  if (heads == 0 || d % heads != 0) {
    throw ContractError("attention: width " + std::to_string(d) + " not divisible by " +
                        std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  // probs laid out [heads][nq][nk]
  std::vector<double> probs(heads * nq * nk), out(nq * d, 0.0);
  const double* qv = q.data().data();
  const double* kv = k.data().data();
  const double* vv = v.data().data();
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t c0 = h * dh;
    for (std::size_t i = 0; i < nq; ++i) {
      double* p = probs.data() + (h * nq + i) * nk;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < nk; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += qv[i * d + c0 + c] * kv[j * d + c0 + c];
        p[j] = s * sc;
        mx = std::max(mx, p[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < nk; ++j) {
        p[j] = std::exp(p[j] - mx);
        z += p[j];
      }
      double* o = out.data() + i * d + c0;
      for (std::size_t j = 0; j < nk; ++j) {
        p[j] /= z;
        const double pj = p[j];
        for (std::size_t c = 0; c < dh; ++c) o[c] += pj * vv[j * d + c0 + c];
      }
    }
  }
  return detail::make_result(
      {nq, d}, std::move(out), "attention", {q, k, v},
      [nq, nk, d, dh, heads, sc, probs = std::move(probs)](Node& self) {
        const double* qv = self.parents[0]->data.data();
        const double* kv = self.parents[1]->data.data();
        const double* vv = self.parents[2]->data.data();
        double* gq = detail::grad_of(*self.parents[0]);
        double* gk = detail::grad_of(*self.parents[1]);
        double* gv = detail::grad_of(*self.parents[2]);
        const double* go = self.grad.data();
        std::vector<double> ds(nk);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t c0 = h * dh;
          for (std::size_t i = 0; i < nq; ++i) {
            const double* p = probs.data() + (h * nq + i) * nk;
            const double* goi = go + i * d + c0;
            // dP_j = go_i . v_j ; dS_j = P_j (dP_j - sum_l P_l dP_l)
            double dot = 0.0;
            for (std::size_t j = 0; j < nk; ++j) {
              double s = 0.0;
              for (std::size_t c = 0; c < dh; ++c) s += goi[c] * vv[j * d + c0 + c];
              ds[j] = s;
              dot += p[j] * s;
            }
            for (std::size_t j = 0; j < nk; ++j) {
              ds[j] = p[j] * (ds[j] - dot) * sc;
              if (gv) {
                for (std::size_t c = 0; c < dh; ++c) gv[j * d + c0 + c] += p[j] * goi[c];
              }
              if (gq) {
                for (std::size_t c = 0; c < dh; ++c) gq[i * d + c0 + c] += ds[j] * kv[j * d + c0 + c];
              }
              if (gk) {
                for (std::size_t c = 0; c < dh; ++c) gk[j * d + c0 + c] += ds[j] * qv[i * d + c0 + c];
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Losses

/// Mean absolute error; subgradient 0 at exact ties.
inline Tensor l1_loss(const Tensor& pred, const Tensor& target) {
  detail::require_same_shape(pred, target, "l1_loss");
  const double inv_n = 1.0 / static_cast<double>(pred.numel());
  double s = 0.0;
  for (std::size_t i = 0; i < pred.numel(); ++i) s += std::abs(pred[i] - target[i]);
  return detail::make_result(Shape{}, {s * inv_n}, "l1_loss", {pred, target},
                             [inv_n](Node& self) {
                               const auto& p = self.parents[0]->data;
                               const auto& t = self.parents[1]->data;
                               double* gp = detail::grad_of(*self.parents[0]);
                               double* gt = detail::grad_of(*self.parents[1]);
                               const double g0 = self.grad[0] * inv_n;
                               for (std::size_t i = 0; i < p.size(); ++i) {
                                 const double diff = p[i] - t[i];
                                 const double sgn = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
                                 if (gp) gp[i] += g0 * sgn;
                                 if (gt) gt[i] -= g0 * sgn;
                               }
                             });
}

/// Per-row KL(onehot(target_r) || softmax(logits_r)) = -log softmax(logits_r)[target_r]
/// for logits [m,n]; returns [m].
inline Tensor kl_div_onehot_rows(const Tensor& logits, std::span<const int> targets) {
  detail::require_rank(logits, 2, "kl_div_onehot_rows");
  const std::size_t m = logits.dim(0), n = logits.dim(1);
  if (targets.size() != m) {
    throw DimensionError("kl_div_onehot_rows: " + std::to_string(targets.size()) +
                         " targets for " + shape_str(logits.shape()));
  }
  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<double> out(m), probs(m * n);
  for (std::size_t r = 0; r < m; ++r) {
    if (tgt[r] < 0 || static_cast<std::size_t>(tgt[r]) >= n) {
      throw IndexError("kl_div_onehot: target " + std::to_string(tgt[r]) + " outside [0," +
                       std::to_string(n) + ")");
    }
    const double* z = logits.data().data() + r * n;
    double mx = z[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, z[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(z[j] - mx);
    const double lse = mx + std::log(s);
    out[r] = lse - z[tgt[r]];
    for (std::size_t j = 0; j < n; ++j) probs[r * n + j] = std::exp(z[j] - lse);
  }
  return detail::make_result({m}, std::move(out), "kl_div_onehot", {logits},
                             [m, n, tgt, probs = std::move(probs)](Node& self) {
                               double* g = detail::grad_of(*self.parents[0]);
                               if (!g) return;
                               for (std::size_t r = 0; r < m; ++r) {
                                 const double gr = self.grad[r];
                                 for (std::size_t j = 0; j < n; ++j)
                                   g[r * n + j] += gr * probs[r * n + j];
                                 g[r * n + tgt[r]] -= gr;
                               }
                             });
}

/// KL(onehot(target) || softmax(logits)) for a single logit vector ([n] or [1,n]).
inline Tensor kl_div_onehot(const Tensor& logits, int target_index) {
  const std::size_t n = logits.rank() == 0 ? 1 : logits.shape().back();
  if (logits.numel() != n) {
    throw DimensionError("kl_div_onehot: expected one logit vector, got " +
                         shape_str(logits.shape()));
  }
  const int t[1] = {target_index};
  return reshape(kl_div_onehot_rows(reshape(logits, {1, n}), t), Shape{});
}

}  // namespace adept
