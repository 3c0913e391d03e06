// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "deepj/error.hpp"

namespace deepj {

// Dense row-major matrix. Vectors are 1×n rows.
template <typename T>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, T fill = T(0)) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<T> values)
      : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != r * c) {
      throw ShapeError("matrix: " + std::to_string(data.size()) + " values for shape " +
                       std::to_string(r) + "x" + std::to_string(c));
    }
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<T>> rows_init) {
    Matrix m;
    m.rows = rows_init.size();
    m.cols = m.rows == 0 ? 0 : rows_init.begin()->size();
    m.data.reserve(m.rows * m.cols);
    for (const auto& r : rows_init) {
      if (r.size() != m.cols) throw ShapeError("matrix: ragged initializer");
      m.data.insert(m.data.end(), r.begin(), r.end());
    }
    return m;
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }

  [[nodiscard]] std::size_t size() const { return data.size(); }
  T& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  const T& operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  std::span<T> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  std::span<const T> row(std::size_t i) const { return {data.data() + i * cols, cols}; }

  bool operator==(const Matrix&) const = default;
};

template <typename T>
struct Node {
  Matrix<T> value;
  Matrix<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Adds this node's grad into the grads of its parents.
  std::function<void(Node&)> backward;
};

// Handle onto a node of the recorded computation. Copies share the node.
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor constant(Matrix<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    return Tensor(std::move(n));
  }

  static Tensor parameter(Matrix<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->grad = Matrix<T>(value.rows, value.cols);
    n->value = std::move(value);
    n->requires_grad = true;
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v) { return constant(Matrix<T>(1, 1, v)); }

  [[nodiscard]] bool defined() const { return node_ != nullptr; }
  [[nodiscard]] std::size_t rows() const { return node_->value.rows; }
  [[nodiscard]] std::size_t cols() const { return node_->value.cols; }
  [[nodiscard]] std::size_t size() const { return node_->value.size(); }
  [[nodiscard]] bool requires_grad() const { return node_->requires_grad; }
  [[nodiscard]] bool is_leaf() const { return node_->is_leaf; }

  const Matrix<T>& value() const { return node_->value; }
  Matrix<T>& mutable_value() { return node_->value; }
  const Matrix<T>& grad() const { return node_->grad; }
  Matrix<T>& mutable_grad() { return node_->grad; }

  T operator()(std::size_t i, std::size_t j) const { return node_->value(i, j); }

  T item() const {
    if (size() != 1) throw ShapeError("item: tensor is not a scalar");
    return node_->value.data[0];
  }

  void zero_grad() {
    if (node_->requires_grad) node_->grad = Matrix<T>(rows(), cols());
  }

  // Drops the link to the recorded graph, keeping the current value.
  [[nodiscard]] Tensor detach() const { return constant(node_->value); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
Matrix<T>* grad_slot(const std::shared_ptr<Node<T>>& n) {
  return n->requires_grad ? &n->grad : nullptr;
}

template <typename T, typename Backward>
Tensor<T> record(const char* op, Matrix<T> value, std::initializer_list<Tensor<T>> inputs,
                 Backward&& bw) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = op;
  for (const auto& in : inputs) {
    if (in.requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    n->is_leaf = false;
    n->parents.reserve(inputs.size());
    for (const auto& in : inputs) n->parents.push_back(in.node());
    n->backward = std::forward<Backward>(bw);
  }
  return Tensor<T>(std::move(n));
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

}  // namespace detail

// Reverse-mode sweep from a scalar loss. Leaf grads accumulate; grads of
// intermediate nodes are reset on every call.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1) throw InputError("backward: loss must be a 1x1 tensor");
  if (!loss.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node<T>* n : order) {
    if (!n->is_leaf) n->grad = Matrix<T>(n->value.rows, n->value.cols);
  }
  loss.node()->grad.data[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.cols() == b.rows(), "matmul: inner dimensions " + std::to_string(a.cols()) +
                                            " and " + std::to_string(b.rows()) + " differ");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  const auto& av = a.value();
  const auto& bv = b.value();
  Matrix<T> out(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    T* orow = out.data.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = av(i, p);
      if (aip == T(0)) continue;
      const T* brow = bv.data.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return detail::record<T>("matmul", std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    const auto& A = self.parents[0]->value;
    const auto& B = self.parents[1]->value;
    const auto& g = self.grad;
    if (auto* ga = detail::grad_slot(self.parents[0])) {
      for (std::size_t i = 0; i < m; ++i) {
        const T* grow = g.data.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const T* brow = B.data.data() + p * n;
          T acc = 0;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          (*ga)(i, p) += acc;
        }
      }
    }
    if (auto* gb = detail::grad_slot(self.parents[1])) {
      for (std::size_t i = 0; i < m; ++i) {
        const T* grow = g.data.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const T aip = A(i, p);
          if (aip == T(0)) continue;
          T* gbrow = gb->data.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
        }
      }
    }
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  const std::size_t r = a.rows(), c = a.cols();
  Matrix<T> out(c, r);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(j, i) = a.value()(i, j);
  return detail::record<T>("transpose", std::move(out), {a}, [r, c](Node<T>& self) {
    if (auto* ga = detail::grad_slot(self.parents[0])) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*ga)(i, j) += self.grad(j, i);
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  Matrix<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.value().data[i];
  return detail::record<T>("add", std::move(out), {a, b}, [](Node<T>& self) {
    for (int s = 0; s < 2; ++s) {
      if (auto* g = detail::grad_slot(self.parents[s])) {
        for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[i];
      }
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  Matrix<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b.value().data[i];
  return detail::record<T>("sub", std::move(out), {a, b}, [](Node<T>& self) {
    if (auto* g = detail::grad_slot(self.parents[0]))
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[i];
    if (auto* g = detail::grad_slot(self.parents[1]))
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] -= self.grad.data[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
  Matrix<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b.value().data[i];
  return detail::record<T>("mul", std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (auto* g = detail::grad_slot(self.parents[0]))
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[i] * bv.data[i];
    if (auto* g = detail::grad_slot(self.parents[1]))
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[i] * av.data[i];
  });
}

// x[n×d] + bias[1×d] broadcast over rows.
template <typename T>
Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& bias) {
  detail::require(bias.rows() == 1 && bias.cols() == x.cols(), "add_row: bias must be 1xcols");
  Matrix<T> out = x.value();
  for (std::size_t i = 0; i < out.rows; ++i)
    for (std::size_t j = 0; j < out.cols; ++j) out(i, j) += bias.value()(0, j);
  return detail::record<T>("add_row", std::move(out), {x, bias}, [](Node<T>& self) {
    if (auto* g = detail::grad_slot(self.parents[0]))
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[i];
    if (auto* g = detail::grad_slot(self.parents[1]))
      for (std::size_t i = 0; i < self.grad.rows; ++i)
        for (std::size_t j = 0; j < self.grad.cols; ++j) (*g)(0, j) += self.grad(i, j);
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Matrix<T> out = a.value();
  for (auto& v : out.data) v *= s;
  return detail::record<T>("scale", std::move(out), {a}, [s](Node<T>& self) {
    if (auto* g = detail::grad_slot(self.parents[0]))
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += s * self.grad.data[i];
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  Matrix<T> out = a.value();
  for (auto& v : out.data) v = v > T(0) ? v : T(0);
  return detail::record<T>("relu", std::move(out), {a}, [](Node<T>& self) {
    if (auto* g = detail::grad_slot(self.parents[0]))
      for (std::size_t i = 0; i < g->size(); ++i)
        if (self.parents[0]->value.data[i] > T(0)) g->data[i] += self.grad.data[i];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.value().data) s += v;
  return detail::record<T>("sum", Matrix<T>(1, 1, s), {a}, [](Node<T>& self) {
    if (auto* g = detail::grad_slot(self.parents[0]))
      for (auto& v : g->data) v += self.grad.data[0];
  });
}

// Zeroes rows whose flag is false; those rows pass no gradient.
template <typename T>
Tensor<T> mask_rows(const Tensor<T>& x, const std::vector<bool>& keep) {
  detail::require(keep.size() == x.rows(), "mask_rows: flag count differs from rows");
  std::vector<bool> flags = keep;
  Matrix<T> out = x.value();
  for (std::size_t i = 0; i < out.rows; ++i)
    if (!flags[i])
      for (auto& v : out.row(i)) v = T(0);
  return detail::record<T>("mask_rows", std::move(out), {x}, [flags](Node<T>& self) {
    if (auto* g = detail::grad_slot(self.parents[0]))
      for (std::size_t i = 0; i < self.grad.rows; ++i)
        if (flags[i])
          for (std::size_t j = 0; j < self.grad.cols; ++j) (*g)(i, j) += self.grad(i, j);
  });
}

// Mean over the flagged rows, 1×cols. No flagged rows gives the zero row.
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& x, const std::vector<bool>& keep) {
  detail::require(keep.size() == x.rows(), "mean_rows: flag count differs from rows");
  std::vector<bool> flags = keep;
  std::size_t count = 0;
  for (bool f : flags) count += f ? 1 : 0;
  const T inv = count == 0 ? T(0) : T(1) / static_cast<T>(count);
  Matrix<T> out(1, x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i)
    if (flags[i])
      for (std::size_t j = 0; j < x.cols(); ++j) out(0, j) += x.value()(i, j) * inv;
  return detail::record<T>("mean_rows", std::move(out), {x}, [flags, inv](Node<T>& self) {
    if (auto* g = detail::grad_slot(self.parents[0]))
      for (std::size_t i = 0; i < g->rows; ++i)
        if (flags[i])
          for (std::size_t j = 0; j < g->cols; ++j) (*g)(i, j) += inv * self.grad(0, j);
  });
}

// Row lookup into a table; gradients scatter-add back into the table.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const std::size_t> ids) {
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  const std::size_t d = table.cols();
  Matrix<T> out(idx.size(), d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= table.rows()) throw InputError("gather_rows: index out of range");
    for (std::size_t j = 0; j < d; ++j) out(i, j) = table.value()(idx[i], j);
  }
  return detail::record<T>("gather_rows", std::move(out), {table}, [idx, d](Node<T>& self) {
    if (auto* g = detail::grad_slot(self.parents[0]))
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) (*g)(idx[i], j) += self.grad(i, j);
  });
}

}  // namespace deepj
