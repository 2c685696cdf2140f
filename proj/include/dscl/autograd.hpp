#pragma once

// Eager reverse-mode differentiation over dense tensors.
//
// Every op evaluates immediately and, when any input requires a gradient,
// records a node holding its parents and a backward rule. Calling backward()
// on a scalar result walks the recorded graph once in reverse topological
// order. Leaf gradients accumulate across calls until zero_grad().

#include <Eigen/Core>

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dscl/box.hpp"
#include "dscl/errors.hpp"
#include "dscl/tensor.hpp"

namespace dscl {

namespace detail {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline ConstMatMap as_mat(const Tensor& t, std::size_t rows, std::size_t cols) {
  return ConstMatMap(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline MatMap as_mat(Tensor& t, std::size_t rows, std::size_t cols) {
  return MatMap(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
}  // namespace detail

struct Node {
  Tensor value;
  Tensor grad;
  bool has_grad = false;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor& grad_buffer() {
    if (!has_grad) {
      grad = Tensor(value.shape(), 0.0);
      has_grad = true;
    }
    return grad;
  }

  void accumulate(const Tensor& g) {
    Tensor& dst = grad_buffer();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
  }
};

class Var {
 public:
  Var() : node_(std::make_shared<Node>()) {}
  explicit Var(Tensor value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var parameter(Tensor value) { return Var(std::move(value), true); }
  static Var constant(Tensor value) { return Var(std::move(value), false); }

  const Tensor& value() const { return node_->value; }
  // Direct write access for optimizers and test perturbations. Only meaningful on leaves.
  Tensor& value_mut() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  double item() const { return node_->value.item(); }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return !node_->backward; }
  bool has_grad() const { return node_->has_grad; }
  const Tensor& grad() const { return node_->grad_buffer(); }
  void zero_grad() {
    if (node_->has_grad) node_->grad.fill(0.0);
  }

  const std::shared_ptr<Node>& node() const { return node_; }

  void backward() const;

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

inline Var make_op(const char* name, Tensor value, std::initializer_list<Var> inputs,
                   std::function<void(Node&)> backward_rule) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = name;
  bool any = false;
  for (const Var& in : inputs) any = any || in.requires_grad();
  if (any) {
    node->requires_grad = true;
    for (const Var& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(backward_rule);
  }
  return Var(std::move(node));
}

// Gradient buffer of parent `i` when it participates in differentiation, else null.
inline Tensor* parent_grad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  return p.requires_grad ? &p.grad_buffer() : nullptr;
}

inline std::pair<std::size_t, std::size_t> rows_cols(const Tensor& t, std::string_view op) {
  if (t.rank() == 1) return {1, t.dim(0)};
  if (t.rank() == 2) return {t.dim(0), t.dim(1)};
  throw StructuralError(std::string(op) + ": expected a vector or matrix, got " + shape_str(t.shape()));
}

}  // namespace detail

inline void Var::backward() const {
  if (value().size() != 1) {
    throw ContractError("backward() needs a scalar root, got shape " + shape_str(value().shape()));
  }
  if (!requires_grad()) return;

  // Iterative post-order DFS; each node appears once.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node* n : order) {
    if (n->backward) {
      n->grad_buffer().fill(0.0);
    }
  }
  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return detail::make_op("add", std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (Tensor* g = detail::parent_grad(self, k))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

inline Var sub(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return detail::make_op("sub", std::move(out), {a, b}, [](Node& self) {
    if (Tensor* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (Tensor* g = detail::parent_grad(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
  });
}

inline Var mul(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return detail::make_op("mul", std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = self.parents[0]->value;
    const Tensor& bv = self.parents[1]->value;
    if (Tensor* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    if (Tensor* g = detail::parent_grad(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
  });
}

inline Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= s;
  return detail::make_op("scale", std::move(out), {a}, [s](Node& self) {
    if (Tensor* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += s * self.grad[i];
  });
}

// sum_k weights[k] * terms[k]; all terms share one shape.
inline Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights) {
  if (terms.empty() || terms.size() != weights.size()) {
    throw StructuralError("weighted_sum: " + std::to_string(terms.size()) + " terms, " +
                          std::to_string(weights.size()) + " weights");
  }
  Tensor out(terms[0].shape(), 0.0);
  for (std::size_t k = 0; k < terms.size(); ++k) {
    require_same_shape(out, terms[k].value(), "weighted_sum");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += weights[k] * terms[k].value()[i];
  }
  auto node = std::make_shared<Node>();
  node->value = std::move(out);
  node->op = "weighted_sum";
  bool any = false;
  for (const Var& t : terms) any = any || t.requires_grad();
  if (any) {
    node->requires_grad = true;
    for (const Var& t : terms) node->parents.push_back(t.node());
    node->backward = [weights](Node& self) {
      for (std::size_t k = 0; k < self.parents.size(); ++k)
        if (Tensor* g = detail::parent_grad(self, k))
          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += weights[k] * self.grad[i];
    };
  }
  return Var(std::move(node));
}

inline Var relu(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return detail::make_op("relu", std::move(out), {a}, [](Node& self) {
    const Tensor& x = self.parents[0]->value;
    if (Tensor* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i)
        if (x[i] > 0.0) (*g)[i] += self.grad[i];
  });
}

inline Var exp(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = std::exp(v);
  return detail::make_op("exp", std::move(out), {a}, [](Node& self) {
    if (Tensor* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * self.value[i];
  });
}

inline Var log(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = std::log(v);
  return detail::make_op("log", std::move(out), {a}, [](Node& self) {
    const Tensor& x = self.parents[0]->value;
    if (Tensor* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] / x[i];
  });
}

inline Var detach(const Var& a) { return Var::constant(a.value()); }

inline Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return detail::make_op("reshape", std::move(out), {a}, [](Node& self) {
    if (Tensor* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return detail::make_op("sum", Tensor::scalar(s), {a}, [](Node& self) {
    if (Tensor* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[0];
  });
}

inline Var mean(const Var& a) {
  if (a.size() == 0) throw StructuralError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

// Inner product of two vectors, scalar result.
inline Var dot(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "dot");
  require_rank(a.value(), 1, "dot");
  return sum(mul(a, b));
}

// Per-row inner products of two [N, D] matrices, result [N, 1].
inline Var rowdot(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "rowdot");
  require_rank(a.value(), 2, "rowdot");
  const std::size_t n = a.value().dim(0);
  Tensor out(Shape{n, 1});
  for (std::size_t r = 0; r < n; ++r) out[r] = dscl::dot(a.value().row(r), b.value().row(r));
  return detail::make_op("rowdot", std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = self.parents[0]->value;
    const Tensor& bv = self.parents[1]->value;
    const std::size_t n = av.dim(0);
    const std::size_t d = av.dim(1);
    if (Tensor* g = detail::parent_grad(self, 0))
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < d; ++j) (*g)[r * d + j] += self.grad[r] * bv[r * d + j];
    if (Tensor* g = detail::parent_grad(self, 1))
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < d; ++j) (*g)[r * d + j] += self.grad[r] * av[r * d + j];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

// a [m, k] times b [k, n], or b^T when b is stored [n, k].
inline Var matmul(const Var& a, const Var& b, bool transpose_b = false) {
  require_rank(a.value(), 2, "matmul");
  require_rank(b.value(), 2, "matmul");
  const std::size_t m = a.value().dim(0);
  const std::size_t k = a.value().dim(1);
  const std::size_t kb = transpose_b ? b.value().dim(1) : b.value().dim(0);
  const std::size_t n = transpose_b ? b.value().dim(0) : b.value().dim(1);
  if (k != kb) {
    throw StructuralError("matmul: shape mismatch " + shape_str(a.value().shape()) + " vs " +
                          shape_str(b.value().shape()) + (transpose_b ? " (transposed)" : ""));
  }
  Tensor out(Shape{m, n});
  auto am = detail::as_mat(a.value(), m, k);
  auto om = detail::as_mat(out, m, n);
  if (transpose_b) {
    om.noalias() = am * detail::as_mat(b.value(), n, k).transpose();
  } else {
    om.noalias() = am * detail::as_mat(b.value(), k, n);
  }
  return detail::make_op("matmul", std::move(out), {a, b}, [m, k, n, transpose_b](Node& self) {
    auto gm = detail::as_mat(self.grad, m, n);
    const Tensor& av = self.parents[0]->value;
    const Tensor& bv = self.parents[1]->value;
    if (Tensor* g = detail::parent_grad(self, 0)) {
      if (transpose_b) {
        detail::as_mat(*g, m, k).noalias() += gm * detail::as_mat(bv, n, k);
      } else {
        detail::as_mat(*g, m, k).noalias() += gm * detail::as_mat(bv, k, n).transpose();
      }
    }
    if (Tensor* g = detail::parent_grad(self, 1)) {
      if (transpose_b) {
        detail::as_mat(*g, n, k).noalias() += gm.transpose() * detail::as_mat(av, m, k);
      } else {
        detail::as_mat(*g, k, n).noalias() += detail::as_mat(av, m, k).transpose() * gm;
      }
    }
  });
}

// x [N, F] plus bias [F] on every row.
inline Var add_row(const Var& x, const Var& bias) {
  require_rank(x.value(), 2, "add_row");
  require_rank(bias.value(), 1, "add_row");
  const std::size_t n = x.value().dim(0);
  const std::size_t f = x.value().dim(1);
  if (bias.value().dim(0) != f) {
    throw StructuralError("add_row: shape mismatch " + shape_str(x.value().shape()) + " vs " +
                          shape_str(bias.value().shape()));
  }
  Tensor out = x.value();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < f; ++j) out[r * f + j] += bias.value()[j];
  return detail::make_op("add_row", std::move(out), {x, bias}, [n, f](Node& self) {
    if (Tensor* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (Tensor* g = detail::parent_grad(self, 1))
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < f; ++j) (*g)[j] += self.grad[r * f + j];
  });
}

// [N, p] and [N, q] side by side.
inline Var concat_cols(const Var& a, const Var& b) {
  require_rank(a.value(), 2, "concat_cols");
  require_rank(b.value(), 2, "concat_cols");
  const std::size_t n = a.value().dim(0);
  if (b.value().dim(0) != n) {
    throw StructuralError("concat_cols: shape mismatch " + shape_str(a.value().shape()) + " vs " +
                          shape_str(b.value().shape()));
  }
  const std::size_t p = a.value().dim(1);
  const std::size_t q = b.value().dim(1);
  Tensor out(Shape{n, p + q});
  for (std::size_t r = 0; r < n; ++r) {
    std::copy_n(a.value().data() + r * p, p, out.data() + r * (p + q));
    std::copy_n(b.value().data() + r * q, q, out.data() + r * (p + q) + p);
  }
  return detail::make_op("concat_cols", std::move(out), {a, b}, [n, p, q](Node& self) {
    if (Tensor* g = detail::parent_grad(self, 0))
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < p; ++j) (*g)[r * p + j] += self.grad[r * (p + q) + j];
    if (Tensor* g = detail::parent_grad(self, 1))
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < q; ++j) (*g)[r * q + j] += self.grad[r * (p + q) + p + j];
  });
}

// ---------------------------------------------------------------------------
// Normalization and softmax (row-wise for matrices, whole-vector for rank 1)

inline Var l2_normalize(const Var& x, double epsilon = 1e-12) {
  const auto [n, d] = detail::rows_cols(x.value(), "l2_normalize");
  Tensor out = x.value();
  std::vector<double> norms(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double nr = l2_norm(x.value().values().subspan(r * d, d));
    if (!(nr >= epsilon)) {
      throw DegenerateInputError("l2_normalize: row " + std::to_string(r) + " has norm " + std::to_string(nr) +
                                 " below epsilon " + std::to_string(epsilon));
    }
    norms[r] = nr;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] /= nr;
  }
  return detail::make_op("l2_normalize", std::move(out), {x}, [n, d, norms](Node& self) {
    Tensor* g = detail::parent_grad(self, 0);
    if (!g) return;
    for (std::size_t r = 0; r < n; ++r) {
      const double* y = self.value.data() + r * d;
      const double* gy = self.grad.data() + r * d;
      double proj = 0.0;
      for (std::size_t j = 0; j < d; ++j) proj += y[j] * gy[j];
      for (std::size_t j = 0; j < d; ++j) (*g)[r * d + j] += (gy[j] - y[j] * proj) / norms[r];
    }
  });
}

namespace detail {
inline void check_temperature(double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("temperature must be positive, got " + std::to_string(tau));
}
}  // namespace detail

// softmax(x / tau), max-subtracted.
inline Var softmax(const Var& x, double tau = 1.0) {
  detail::check_temperature(tau);
  const auto [n, k] = detail::rows_cols(x.value(), "softmax");
  Tensor out = x.value();
  for (std::size_t r = 0; r < n; ++r) {
    double* row = out.data() + r * k;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, row[j] / tau);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      row[j] = std::exp(row[j] / tau - mx);
      z += row[j];
    }
    for (std::size_t j = 0; j < k; ++j) row[j] /= z;
  }
  return detail::make_op("softmax", std::move(out), {x}, [n, k, tau](Node& self) {
    Tensor* g = detail::parent_grad(self, 0);
    if (!g) return;
    for (std::size_t r = 0; r < n; ++r) {
      const double* y = self.value.data() + r * k;
      const double* gy = self.grad.data() + r * k;
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) s += gy[j] * y[j];
      for (std::size_t j = 0; j < k; ++j) (*g)[r * k + j] += y[j] * (gy[j] - s) / tau;
    }
  });
}

// log(softmax(x / tau)) via stabilized log-sum-exp.
inline Var log_softmax(const Var& x, double tau = 1.0) {
  detail::check_temperature(tau);
  const auto [n, k] = detail::rows_cols(x.value(), "log_softmax");
  Tensor out = x.value();
  for (std::size_t r = 0; r < n; ++r) {
    double* row = out.data() + r * k;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, row[j] / tau);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] / tau - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) row[j] = row[j] / tau - lse;
  }
  return detail::make_op("log_softmax", std::move(out), {x}, [n, k, tau](Node& self) {
    Tensor* g = detail::parent_grad(self, 0);
    if (!g) return;
    for (std::size_t r = 0; r < n; ++r) {
      const double* y = self.value.data() + r * k;
      const double* gy = self.grad.data() + r * k;
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) s += gy[j];
      for (std::size_t j = 0; j < k; ++j) (*g)[r * k + j] += (gy[j] - std::exp(y[j]) * s) / tau;
    }
  });
}

// ---------------------------------------------------------------------------
// Spatial ops on [N, C, H, W]

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

// x [N, C, H, W], weight [O, C, K, K], bias [O].
inline Var conv2d(const Var& x, const Var& weight, const Var& bias, ConvGeometry geo = {}) {
  require_rank(x.value(), 4, "conv2d");
  require_rank(weight.value(), 4, "conv2d");
  require_rank(bias.value(), 1, "conv2d");
  const std::size_t N = x.value().dim(0), C = x.value().dim(1), H = x.value().dim(2), W = x.value().dim(3);
  const std::size_t O = weight.value().dim(0), K = weight.value().dim(2);
  if (weight.value().dim(1) != C || weight.value().dim(3) != K || bias.value().dim(0) != O) {
    throw StructuralError("conv2d: shape mismatch input " + shape_str(x.value().shape()) + " vs weight " +
                          shape_str(weight.value().shape()) + " / bias " + shape_str(bias.value().shape()));
  }
  if (geo.stride == 0 || H + 2 * geo.pad < K || W + 2 * geo.pad < K) {
    throw StructuralError("conv2d: kernel does not fit input " + shape_str(x.value().shape()));
  }
  const std::size_t Ho = (H + 2 * geo.pad - K) / geo.stride + 1;
  const std::size_t Wo = (W + 2 * geo.pad - K) / geo.stride + 1;
  const std::size_t P = Ho * Wo;
  const std::size_t CKK = C * K * K;
  const std::size_t cols = N * P;

  Tensor col(Shape{CKK, cols}, 0.0);
  const double* xv = x.value().data();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ki = 0; ki < K; ++ki)
      for (std::size_t kj = 0; kj < K; ++kj) {
        double* dst = col.data() + ((c * K + ki) * K + kj) * cols;
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t oh = 0; oh < Ho; ++oh) {
            const long ih = static_cast<long>(oh * geo.stride + ki) - static_cast<long>(geo.pad);
            if (ih < 0 || ih >= static_cast<long>(H)) continue;
            const double* src = xv + ((n * C + c) * H + static_cast<std::size_t>(ih)) * W;
            for (std::size_t ow = 0; ow < Wo; ++ow) {
              const long iw = static_cast<long>(ow * geo.stride + kj) - static_cast<long>(geo.pad);
              if (iw < 0 || iw >= static_cast<long>(W)) continue;
              dst[n * P + oh * Wo + ow] = src[iw];
            }
          }
      }

  Tensor prod(Shape{O, cols});
  detail::as_mat(prod, O, cols).noalias() = detail::as_mat(weight.value(), O, CKK) * detail::as_mat(col, CKK, cols);
  Tensor out(Shape{N, O, Ho, Wo});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o) {
      const double b = bias.value()[o];
      const double* src = prod.data() + o * cols + n * P;
      double* dst = out.data() + (n * O + o) * P;
      for (std::size_t p = 0; p < P; ++p) dst[p] = src[p] + b;
    }

  const bool keep_col = weight.requires_grad();
  if (!keep_col) col = Tensor();
  return detail::make_op(
      "conv2d", std::move(out), {x, weight, bias},
      [=, col = std::move(col)](Node& self) {
        Tensor grad_mat(Shape{O, cols});
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t o = 0; o < O; ++o)
            std::copy_n(self.grad.data() + (n * O + o) * P, P, grad_mat.data() + o * cols + n * P);
        auto gm = detail::as_mat(grad_mat, O, cols);
        if (Tensor* gw = detail::parent_grad(self, 1)) {
          detail::as_mat(*gw, O, CKK).noalias() += gm * detail::as_mat(col, CKK, cols).transpose();
        }
        if (Tensor* gb = detail::parent_grad(self, 2)) {
          for (std::size_t o = 0; o < O; ++o) {
            double s = 0.0;
            const double* row = grad_mat.data() + o * cols;
            for (std::size_t j = 0; j < cols; ++j) s += row[j];
            (*gb)[o] += s;
          }
        }
        if (Tensor* gx = detail::parent_grad(self, 0)) {
          Tensor dcol(Shape{CKK, cols});
          detail::as_mat(dcol, CKK, cols).noalias() =
              detail::as_mat(self.parents[1]->value, O, CKK).transpose() * gm;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ki = 0; ki < K; ++ki)
              for (std::size_t kj = 0; kj < K; ++kj) {
                const double* src = dcol.data() + ((c * K + ki) * K + kj) * cols;
                for (std::size_t n = 0; n < N; ++n)
                  for (std::size_t oh = 0; oh < Ho; ++oh) {
                    const long ih = static_cast<long>(oh * geo.stride + ki) - static_cast<long>(geo.pad);
                    if (ih < 0 || ih >= static_cast<long>(H)) continue;
                    double* dst = gx->data() + ((n * C + c) * H + static_cast<std::size_t>(ih)) * W;
                    for (std::size_t ow = 0; ow < Wo; ++ow) {
                      const long iw = static_cast<long>(ow * geo.stride + kj) - static_cast<long>(geo.pad);
                      if (iw < 0 || iw >= static_cast<long>(W)) continue;
                      dst[iw] += src[n * P + oh * Wo + ow];
                    }
                  }
              }
        }
      });
}

// Spatial mean of [N, C, H, W], result [N, C].
inline Var mean_pool(const Var& x) {
  require_rank(x.value(), 4, "mean_pool");
  const std::size_t N = x.value().dim(0), C = x.value().dim(1);
  const std::size_t P = x.value().dim(2) * x.value().dim(3);
  Tensor out(Shape{N, C});
  for (std::size_t i = 0; i < N * C; ++i) {
    const double* src = x.value().data() + i * P;
    double s = 0.0;
    for (std::size_t p = 0; p < P; ++p) s += src[p];
    out[i] = s / static_cast<double>(P);
  }
  return detail::make_op("mean_pool", std::move(out), {x}, [N, C, P](Node& self) {
    Tensor* g = detail::parent_grad(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < N * C; ++i) {
      const double gi = self.grad[i] / static_cast<double>(P);
      for (std::size_t p = 0; p < P; ++p) (*g)[i * P + p] += gi;
    }
  });
}

struct Roi {
  std::size_t image = 0;
  PatchBox box;
};

// Average of x[image] over the cells selected by roi_cells(), result [R, C].
inline Var roi_average_pool(const Var& x, std::span<const Roi> rois) {
  require_rank(x.value(), 4, "roi_average_pool");
  const std::size_t N = x.value().dim(0), C = x.value().dim(1);
  const std::size_t H = x.value().dim(2), W = x.value().dim(3);
  const std::size_t P = H * W;
  const std::size_t R = rois.size();
  std::vector<std::vector<std::size_t>> cells(R);
  std::vector<std::size_t> images(R);
  Tensor out(Shape{R, C});
  for (std::size_t r = 0; r < R; ++r) {
    if (rois[r].image >= N) {
      throw StructuralError("roi_average_pool: image index " + std::to_string(rois[r].image) + " outside batch " +
                            shape_str(x.value().shape()));
    }
    images[r] = rois[r].image;
    cells[r] = roi_cells(rois[r].box, H, W);
    for (std::size_t c = 0; c < C; ++c) {
      const double* src = x.value().data() + (images[r] * C + c) * P;
      double s = 0.0;
      for (std::size_t cell : cells[r]) s += src[cell];
      out[r * C + c] = s / static_cast<double>(cells[r].size());
    }
  }
  return detail::make_op("roi_average_pool", std::move(out), {x},
                         [C, P, R, cells = std::move(cells), images = std::move(images)](Node& self) {
                           Tensor* g = detail::parent_grad(self, 0);
                           if (!g) return;
                           for (std::size_t r = 0; r < R; ++r) {
                             const double inv = 1.0 / static_cast<double>(cells[r].size());
                             for (std::size_t c = 0; c < C; ++c) {
                               double* dst = g->data() + (images[r] * C + c) * P;
                               for (std::size_t cell : cells[r]) dst[cell] += self.grad[r * C + c] * inv;
                             }
                           }
                         });
}

}  // namespace dscl
