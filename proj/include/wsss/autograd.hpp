#pragma once

// Minimal reverse-mode automatic differentiation over Tensor<T>.
//
// A Var is a handle to a graph node. Operations record a backward closure only
// when at least one input requires a gradient, so frozen branches (teacher
// forward passes, inference) build no graph at all.

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "wsss/tensor.hpp"

namespace wsss::ag {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  Tensor<T>& ensure_grad() {
    if (grad.size() != value.size()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& mutable_grad() { return node_->ensure_grad(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int axis) const { return node_->value.dim(axis); }
  std::size_t size() const { return node_->value.size(); }
  T item() const {
    require<ShapeError>(size() == 1, "item() on non-scalar ", shape_str(shape()));
    return node_->value[0];
  }
  void zero_grad() {
    if (node_->grad.size() == node_->value.size()) node_->grad.fill(T{});
  }
  const std::shared_ptr<Node<T>>& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Creates the result node; the backward closure is dropped when nothing upstream
// needs a gradient.
template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  bool any = false;
  for (const auto& v : inputs) any = any || v.requires_grad();
  if (any) {
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (auto& v : inputs) n->inputs.push_back(v.node());
    n->backward_fn = std::move(fn);
  }
  return Var<T>(std::move(n));
}

// Stops gradient flow: returns a constant leaf holding the same value.
template <typename T>
Var<T> detach(const Var<T>& v) {
  return Var<T>(v.value(), false);
}

template <typename T>
void backward(const Var<T>& root) {
  require<ShapeError>(root.size() == 1, "backward() needs a scalar root");
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node<T>* child = n->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root.node()->ensure_grad()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->grad.size() == n->value.size()) n->backward_fn(*n);
  }
}

namespace detail {

template <typename T>
Tensor<T>& g(const std::shared_ptr<Node<T>>& n) {
  return n->ensure_grad();
}

template <typename T>
void check_same(const Var<T>& a, const Var<T>& b, const char* op) {
  require<ShapeError>(a.value().same_shape(b.value()), op, ": shape mismatch ",
                      shape_str(a.shape()), " vs ", shape_str(b.shape()));
}

// c[m,n] += a[m,k] * b[k,n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    T* ci = c + static_cast<std::size_t>(i) * n;
    const T* ai = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const T av = ai[p];
      if (av == T{}) continue;
      const T* bp = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[m,n] += a[m,k] * b[n,k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* ai = a + static_cast<std::size_t>(i) * k;
    T* ci = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* bj = b + static_cast<std::size_t>(j) * k;
      T s{};
      for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] += s;
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* ai = a + static_cast<std::size_t>(i) * k;
    const T* bi = b + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const T av = ai[p];
      if (av == T{}) continue;
      T* cp = c + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::check_same(a, b, "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  auto an = a.node(), bn = b.node();
  return make_result<T>(std::move(out), {a, b}, [an, bn](Node<T>& self) {
    for (auto* in : {&an, &bn})
      if ((*in)->requires_grad) {
        auto& gi = detail::g(*in);
        for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += self.grad[i];
      }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::check_same(a, b, "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  auto an = a.node(), bn = b.node();
  return make_result<T>(std::move(out), {a, b}, [an, bn](Node<T>& self) {
    if (an->requires_grad) {
      auto& ga = detail::g(an);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      auto& gb = detail::g(bn);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= self.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::check_same(a, b, "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  auto an = a.node(), bn = b.node();
  return make_result<T>(std::move(out), {a, b}, [an, bn](Node<T>& self) {
    if (an->requires_grad) {
      auto& ga = detail::g(an);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      auto& gb = detail::g(bn);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * an->value[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v *= s;
  auto an = a.node();
  return make_result<T>(std::move(out), {a}, [an, s](Node<T>& self) {
    auto& ga = detail::g(an);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * self.grad[i];
  });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v += s;
  auto an = a.node();
  return make_result<T>(std::move(out), {a}, [an](Node<T>& self) {
    auto& ga = detail::g(an);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v = v > T{} ? v : T{};
  auto an = a.node();
  return make_result<T>(std::move(out), {a}, [an](Node<T>& self) {
    auto& ga = detail::g(an);
    for (std::size_t i = 0; i < ga.size(); ++i)
      if (an->value[i] > T{}) ga[i] += self.grad[i];
  });
}

// tanh approximation of GELU.
template <typename T>
Var<T> gelu(const Var<T>& a) {
  constexpr T k0 = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k1 = static_cast<T>(0.044715);
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) {
    const T x = v;
    v = T{0.5} * x * (T{1} + std::tanh(k0 * (x + k1 * x * x * x)));
  }
  auto an = a.node();
  return make_result<T>(std::move(out), {a}, [an](Node<T>& self) {
    auto& ga = detail::g(an);
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const T x = an->value[i];
      const T u = k0 * (x + k1 * x * x * x);
      const T t = std::tanh(u);
      const T du = k0 * (T{1} + T{3} * k1 * x * x);
      const T d = T{0.5} * (T{1} + t) + T{0.5} * x * (T{1} - t * t) * du;
      ga[i] += self.grad[i] * d;
    }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Var<T> reshape(const Var<T>& a, Shape s) {
  Tensor<T> out = a.value().reshaped(std::move(s));
  auto an = a.node();
  return make_result<T>(std::move(out), {a}, [an](Node<T>& self) {
    auto& ga = detail::g(an);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  require<ShapeError>(a.value().rank() == 2, "transpose expects a matrix, got ", shape_str(a.shape()));
  const int m = a.dim(0), n = a.dim(1);
  Tensor<T> out({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out(j, i) = a.value()(i, j);
  auto an = a.node();
  return make_result<T>(std::move(out), {a}, [an, m, n](Node<T>& self) {
    auto& ga = detail::g(an);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) ga(i, j) += self.grad(j, i);
  });
}

// Rows [begin, end) of a matrix.
template <typename T>
Var<T> slice_rows(const Var<T>& a, int begin, int end) {
  require<ShapeError>(a.value().rank() == 2 && begin >= 0 && end <= a.dim(0) && begin <= end,
                      "slice_rows out of range for ", shape_str(a.shape()));
  const int n = a.dim(1);
  const auto off = static_cast<std::size_t>(begin) * n;
  Tensor<T> out({end - begin, n});
  std::copy_n(a.value().data() + off, out.size(), out.data());
  auto an = a.node();
  return make_result<T>(std::move(out), {a}, [an, off](Node<T>& self) {
    auto& ga = detail::g(an);
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[off + i] += self.grad[i];
  });
}

// Columns [begin, end) of a matrix.
template <typename T>
Var<T> slice_cols(const Var<T>& a, int begin, int end) {
  require<ShapeError>(a.value().rank() == 2 && begin >= 0 && end <= a.dim(1) && begin <= end,
                      "slice_cols out of range for ", shape_str(a.shape()));
  const int m = a.dim(0), w = end - begin;
  Tensor<T> out({m, w});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < w; ++j) out(i, j) = a.value()(i, begin + j);
  auto an = a.node();
  return make_result<T>(std::move(out), {a}, [an, m, w, begin](Node<T>& self) {
    auto& ga = detail::g(an);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j) ga(i, begin + j) += self.grad(i, j);
  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  require<ShapeError>(!parts.empty(), "concat_rows of nothing");
  const int n = parts.front().dim(1);
  int rows = 0;
  for (const auto& p : parts) {
    require<ShapeError>(p.value().rank() == 2 && p.dim(1) == n, "concat_rows: column mismatch");
    rows += p.dim(0);
  }
  Tensor<T> out({rows, n});
  std::size_t off = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(off);
    std::copy_n(p.value().data(), p.size(), out.data() + off);
    off += p.size();
  }
  std::vector<std::shared_ptr<Node<T>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return make_result<T>(std::move(out), parts, [nodes, offsets](Node<T>& self) {
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      if (!nodes[k]->requires_grad) continue;
      auto& gk = detail::g(nodes[k]);
      for (std::size_t i = 0; i < gk.size(); ++i) gk[i] += self.grad[offsets[k] + i];
    }
  });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  require<ShapeError>(!parts.empty(), "concat_cols of nothing");
  const int m = parts.front().dim(0);
  int cols = 0;
  for (const auto& p : parts) {
    require<ShapeError>(p.value().rank() == 2 && p.dim(0) == m, "concat_cols: row mismatch");
    cols += p.dim(1);
  }
  Tensor<T> out({m, cols});
  std::vector<int> offsets;
  int off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < p.dim(1); ++j) out(i, off + j) = p.value()(i, j);
    off += p.dim(1);
  }
  std::vector<std::shared_ptr<Node<T>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return make_result<T>(std::move(out), parts, [nodes, offsets, m](Node<T>& self) {
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      if (!nodes[k]->requires_grad) continue;
      auto& gk = detail::g(nodes[k]);
      const int w = nodes[k]->value.dim(1);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j) gk(i, j) += self.grad(i, offsets[k] + j);
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  require<ShapeError>(a.value().rank() == 2 && b.value().rank() == 2 && a.dim(1) == b.dim(0),
                      "matmul: ", shape_str(a.shape()), " x ", shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out({m, n});
  detail::gemm_nn(a.value().data(), b.value().data(), out.data(), m, k, n);
  auto an = a.node(), bn = b.node();
  return make_result<T>(std::move(out), {a, b}, [an, bn, m, k, n](Node<T>& self) {
    if (an->requires_grad) detail::gemm_nt(self.grad.data(), bn->value.data(), detail::g(an).data(), m, n, k);
    if (bn->requires_grad) detail::gemm_tn(an->value.data(), self.grad.data(), detail::g(bn).data(), m, k, n);
  });
}

// a[m,k] · b[n,k]^T
template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  require<ShapeError>(a.value().rank() == 2 && b.value().rank() == 2 && a.dim(1) == b.dim(1),
                      "matmul_nt: ", shape_str(a.shape()), " x ", shape_str(b.shape()), "^T");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor<T> out({m, n});
  detail::gemm_nt(a.value().data(), b.value().data(), out.data(), m, k, n);
  auto an = a.node(), bn = b.node();
  return make_result<T>(std::move(out), {a, b}, [an, bn, m, k, n](Node<T>& self) {
    if (an->requires_grad) detail::gemm_nn(self.grad.data(), bn->value.data(), detail::g(an).data(), m, n, k);
    if (bn->requires_grad) detail::gemm_tn(self.grad.data(), an->value.data(), detail::g(bn).data(), m, n, k);
  });
}

// a[m,n] + bias[n] broadcast over rows.
template <typename T>
Var<T> add_row_bias(const Var<T>& a, const Var<T>& bias) {
  const int m = a.dim(0), n = a.dim(1);
  require<ShapeError>(bias.size() == static_cast<std::size_t>(n), "add_row_bias: bias size ",
                      bias.size(), " vs ", n, " columns");
  Tensor<T> out = a.value();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out(i, j) += bias.value()[static_cast<std::size_t>(j)];
  auto an = a.node(), bn = bias.node();
  return make_result<T>(std::move(out), {a, bias}, [an, bn, m, n](Node<T>& self) {
    if (an->requires_grad) {
      auto& ga = detail::g(an);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      auto& gb = detail::g(bn);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) gb[static_cast<std::size_t>(j)] += self.grad(i, j);
    }
  });
}

// a[m,n] + bias[m] broadcast over columns.
template <typename T>
Var<T> add_col_bias(const Var<T>& a, const Var<T>& bias) {
  const int m = a.dim(0), n = a.dim(1);
  require<ShapeError>(bias.size() == static_cast<std::size_t>(m), "add_col_bias: bias size ",
                      bias.size(), " vs ", m, " rows");
  Tensor<T> out = a.value();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out(i, j) += bias.value()[static_cast<std::size_t>(i)];
  auto an = a.node(), bn = bias.node();
  return make_result<T>(std::move(out), {a, bias}, [an, bn, m, n](Node<T>& self) {
    if (an->requires_grad) {
      auto& ga = detail::g(an);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      auto& gb = detail::g(bn);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) gb[static_cast<std::size_t>(i)] += self.grad(i, j);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum(const Var<T>& a) {
  T s{};
  for (T v : a.value().storage()) s += v;
  auto an = a.node();
  return make_result<T>(Tensor<T>({1}, s), {a}, [an](Node<T>& self) {
    auto& ga = detail::g(an);
    for (auto& v : ga.storage()) v += self.grad[0];
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  require<ShapeError>(a.size() > 0, "mean of empty tensor");
  return scale(sum(a), T{1} / static_cast<T>(a.size()));
}

// Mean over columns: [m,n] -> [m].
template <typename T>
Var<T> mean_cols(const Var<T>& a) {
  const int m = a.dim(0), n = a.dim(1);
  require<ShapeError>(n > 0, "mean_cols over zero columns");
  Tensor<T> out({m});
  for (int i = 0; i < m; ++i) {
    T s{};
    for (int j = 0; j < n; ++j) s += a.value()(i, j);
    out[static_cast<std::size_t>(i)] = s / static_cast<T>(n);
  }
  auto an = a.node();
  return make_result<T>(std::move(out), {a}, [an, m, n](Node<T>& self) {
    auto& ga = detail::g(an);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) ga(i, j) += self.grad[static_cast<std::size_t>(i)] / static_cast<T>(n);
  });
}

// Mean over rows: [m,n] -> [n].
template <typename T>
Var<T> mean_rows(const Var<T>& a) {
  const int m = a.dim(0), n = a.dim(1);
  require<ShapeError>(m > 0, "mean_rows over zero rows");
  Tensor<T> out({n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(j)] += a.value()(i, j);
  for (auto& v : out.storage()) v /= static_cast<T>(m);
  auto an = a.node();
  return make_result<T>(std::move(out), {a}, [an, m, n](Node<T>& self) {
    auto& ga = detail::g(an);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) ga(i, j) += self.grad[static_cast<std::size_t>(j)] / static_cast<T>(m);
  });
}

// Max over rows: [m,n] -> [n]; the gradient goes to the first maximal row.
template <typename T>
Var<T> max_rows(const Var<T>& a) {
  const int m = a.dim(0), n = a.dim(1);
  require<ShapeError>(m > 0, "max_rows over zero rows");
  Tensor<T> out({n});
  std::vector<int> arg(static_cast<std::size_t>(n), 0);
  for (int j = 0; j < n; ++j) {
    T best = a.value()(0, j);
    for (int i = 1; i < m; ++i)
      if (a.value()(i, j) > best) {
        best = a.value()(i, j);
        arg[static_cast<std::size_t>(j)] = i;
      }
    out[static_cast<std::size_t>(j)] = best;
  }
  auto an = a.node();
  return make_result<T>(std::move(out), {a}, [an, arg, n](Node<T>& self) {
    auto& ga = detail::g(an);
    for (int j = 0; j < n; ++j) ga(arg[static_cast<std::size_t>(j)], j) += self.grad[static_cast<std::size_t>(j)];
  });
}

// ---------------------------------------------------------------------------
// Normalisation and attention helpers

template <typename T>
Var<T> softmax_rows(const Var<T>& a) {
  const int m = a.dim(0), n = a.dim(1);
  Tensor<T> out({m, n});
  for (int i = 0; i < m; ++i) {
    T mx = a.value()(i, 0);
    for (int j = 1; j < n; ++j) mx = std::max(mx, a.value()(i, j));
    T s{};
    for (int j = 0; j < n; ++j) s += (out(i, j) = std::exp(a.value()(i, j) - mx));
    for (int j = 0; j < n; ++j) out(i, j) /= s;
  }
  auto an = a.node();
  return make_result<T>(out, {a}, [an, out, m, n](Node<T>& self) {
    auto& ga = detail::g(an);
    for (int i = 0; i < m; ++i) {
      T dot{};
      for (int j = 0; j < n; ++j) dot += self.grad(i, j) * out(i, j);
      for (int j = 0; j < n; ++j) ga(i, j) += out(i, j) * (self.grad(i, j) - dot);
    }
  });
}

template <typename T>
Var<T> layer_norm_rows(const Var<T>& a, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const int m = a.dim(0), n = a.dim(1);
  require<ShapeError>(gamma.size() == static_cast<std::size_t>(n) && beta.size() == gamma.size(),
                      "layer_norm: affine size mismatch");
  Tensor<T> xhat({m, n});
  std::vector<T> inv_std(static_cast<std::size_t>(m));
  Tensor<T> out({m, n});
  for (int i = 0; i < m; ++i) {
    T mu{};
    for (int j = 0; j < n; ++j) mu += a.value()(i, j);
    mu /= static_cast<T>(n);
    T var{};
    for (int j = 0; j < n; ++j) var += (a.value()(i, j) - mu) * (a.value()(i, j) - mu);
    var /= static_cast<T>(n);
    const T is = T{1} / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(i)] = is;
    for (int j = 0; j < n; ++j) {
      xhat(i, j) = (a.value()(i, j) - mu) * is;
      out(i, j) = xhat(i, j) * gamma.value()[static_cast<std::size_t>(j)] + beta.value()[static_cast<std::size_t>(j)];
    }
  }
  auto an = a.node(), gn = gamma.node(), bn = beta.node();
  return make_result<T>(std::move(out), {a, gamma, beta},
                        [an, gn, bn, xhat, inv_std, m, n](Node<T>& self) {
    if (gn->requires_grad || bn->requires_grad) {
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
          if (gn->requires_grad) detail::g(gn)[static_cast<std::size_t>(j)] += self.grad(i, j) * xhat(i, j);
          if (bn->requires_grad) detail::g(bn)[static_cast<std::size_t>(j)] += self.grad(i, j);
        }
    }
    if (!an->requires_grad) return;
    auto& ga = detail::g(an);
    for (int i = 0; i < m; ++i) {
      T s1{}, s2{};
      for (int j = 0; j < n; ++j) {
        const T dx = self.grad(i, j) * gn->value[static_cast<std::size_t>(j)];
        s1 += dx;
        s2 += dx * xhat(i, j);
      }
      const T is = inv_std[static_cast<std::size_t>(i)];
      for (int j = 0; j < n; ++j) {
        const T dx = self.grad(i, j) * gn->value[static_cast<std::size_t>(j)];
        ga(i, j) += is * (dx - s1 / static_cast<T>(n) - xhat(i, j) * s2 / static_cast<T>(n));
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution over a single C×H×W sample via im2col.

struct ConvGeometry {
  int in_c, in_h, in_w, kernel, stride, pad, out_h, out_w;
};

inline ConvGeometry conv_geometry(int c, int h, int w, int kernel, int stride, int pad) {
  require<ShapeError>(kernel >= 1 && stride >= 1 && pad >= 0, "invalid convolution geometry");
  const int oh = (h + 2 * pad - kernel) / stride + 1;
  const int ow = (w + 2 * pad - kernel) / stride + 1;
  require<ShapeError>(oh >= 1 && ow >= 1, "convolution input ", h, "x", w, " too small for kernel ", kernel);
  return {c, h, w, kernel, stride, pad, oh, ow};
}

// weight: [O, C*k*k], bias: [O], x: [C,H,W] -> [O, oh, ow]
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int kernel, int stride, int pad) {
  require<ShapeError>(x.value().rank() == 3, "conv2d expects C×H×W input, got ", shape_str(x.shape()));
  const auto geo = conv_geometry(x.dim(0), x.dim(1), x.dim(2), kernel, stride, pad);
  const int kk = geo.in_c * kernel * kernel;
  const int cols = geo.out_h * geo.out_w;
  const int oc = weight.dim(0);
  require<ShapeError>(weight.dim(1) == kk, "conv2d weight expects ", kk, " inputs per filter, has ", weight.dim(1));
  require<ShapeError>(bias.size() == static_cast<std::size_t>(oc), "conv2d bias size mismatch");

  Tensor<T> col({kk, cols});
  for (int c = 0; c < geo.in_c; ++c)
    for (int ky = 0; ky < kernel; ++ky)
      for (int kx = 0; kx < kernel; ++kx) {
        const int row = (c * kernel + ky) * kernel + kx;
        for (int oy = 0; oy < geo.out_h; ++oy) {
          const int iy = oy * stride - pad + ky;
          for (int ox = 0; ox < geo.out_w; ++ox) {
            const int ix = ox * stride - pad + kx;
            col(row, oy * geo.out_w + ox) =
                (iy >= 0 && iy < geo.in_h && ix >= 0 && ix < geo.in_w) ? x.value()(c, iy, ix) : T{};
          }
        }
      }
  Tensor<T> out({oc, geo.out_h, geo.out_w});
  detail::gemm_nn(weight.value().data(), col.data(), out.data(), oc, kk, cols);
  for (int o = 0; o < oc; ++o)
    for (int p = 0; p < cols; ++p) out.data()[static_cast<std::size_t>(o) * cols + p] += bias.value()[static_cast<std::size_t>(o)];

  auto xn = x.node(), wn = weight.node(), bn = bias.node();
  return make_result<T>(std::move(out), {x, weight, bias},
                        [xn, wn, bn, col = std::move(col), geo, kk, cols, oc](Node<T>& self) {
    const T* gout = self.grad.data();
    if (bn->requires_grad) {
      auto& gb = detail::g(bn);
      for (int o = 0; o < oc; ++o)
        for (int p = 0; p < cols; ++p) gb[static_cast<std::size_t>(o)] += gout[static_cast<std::size_t>(o) * cols + p];
    }
    if (wn->requires_grad) detail::gemm_nt(gout, col.data(), detail::g(wn).data(), oc, cols, kk);
    if (xn->requires_grad) {
      Tensor<T> gcol({kk, cols});
      detail::gemm_tn(wn->value.data(), gout, gcol.data(), oc, kk, cols);
      auto& gx = detail::g(xn);
      const int k = geo.kernel;
      for (int c = 0; c < geo.in_c; ++c)
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            const int row = (c * k + ky) * k + kx;
            for (int oy = 0; oy < geo.out_h; ++oy) {
              const int iy = oy * geo.stride - geo.pad + ky;
              if (iy < 0 || iy >= geo.in_h) continue;
              for (int ox = 0; ox < geo.out_w; ++ox) {
                const int ix = ox * geo.stride - geo.pad + kx;
                if (ix < 0 || ix >= geo.in_w) continue;
                gx(c, iy, ix) += gcol(row, oy * geo.out_w + ox);
              }
            }
          }
    }
  });
}

// Differentiable bilinear resize of a C×H×W block (same sampling as wsss::resize_bilinear).
template <typename T>
Var<T> resize(const Var<T>& x, int out_h, int out_w) {
  require<ShapeError>(x.value().rank() == 3, "resize expects C×H×W, got ", shape_str(x.shape()));
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h == out_h && w == out_w) return x;
  Tensor<T> out = resize_bilinear(x.value(), out_h, out_w);
  auto xn = x.node();
  return make_result<T>(std::move(out), {x}, [xn, c, h, w, out_h, out_w](Node<T>& self) {
    const auto ty = bilinear_taps<T>(h, out_h);
    const auto tx = bilinear_taps<T>(w, out_w);
    auto& gx = detail::g(xn);
    for (int k = 0; k < c; ++k)
      for (int y = 0; y < out_h; ++y) {
        const auto& a = ty[static_cast<std::size_t>(y)];
        for (int xo = 0; xo < out_w; ++xo) {
          const auto& b = tx[static_cast<std::size_t>(xo)];
          const T go = self.grad(k, y, xo);
          gx(k, a.i0, b.i0) += go * a.w0 * b.w0;
          gx(k, a.i0, b.i1) += go * a.w0 * b.w1;
          gx(k, a.i1, b.i0) += go * a.w1 * b.w0;
          gx(k, a.i1, b.i1) += go * a.w1 * b.w1;
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Losses and similarities

// Per-row cosine similarity of two [m,n] matrices -> [m]. Rows where either
// norm is zero yield 0 with zero gradient; `degenerate` counts them.
template <typename T>
Var<T> cosine_rows(const Var<T>& a, const Var<T>& b, int* degenerate = nullptr) {
  detail::check_same(a, b, "cosine_rows");
  const int m = a.dim(0), n = a.dim(1);
  Tensor<T> out({m});
  std::vector<T> na(static_cast<std::size_t>(m)), nb(static_cast<std::size_t>(m)), dots(static_cast<std::size_t>(m));
  int bad = 0;
  for (int i = 0; i < m; ++i) {
    T d{}, sa{}, sb{};
    for (int j = 0; j < n; ++j) {
      d += a.value()(i, j) * b.value()(i, j);
      sa += a.value()(i, j) * a.value()(i, j);
      sb += b.value()(i, j) * b.value()(i, j);
    }
    const auto ui = static_cast<std::size_t>(i);
    na[ui] = std::sqrt(sa);
    nb[ui] = std::sqrt(sb);
    dots[ui] = d;
    if (na[ui] > T{} && nb[ui] > T{}) {
      out[ui] = d / (na[ui] * nb[ui]);
    } else {
      ++bad;
    }
  }
  if (degenerate) *degenerate = bad;
  auto an = a.node(), bn = b.node();
  return make_result<T>(std::move(out), {a, b}, [an, bn, na, nb, dots, m, n](Node<T>& self) {
    for (int i = 0; i < m; ++i) {
      const auto ui = static_cast<std::size_t>(i);
      if (!(na[ui] > T{} && nb[ui] > T{})) continue;
      const T go = self.grad[ui];
      const T inv = T{1} / (na[ui] * nb[ui]);
      const T cs = dots[ui] * inv;
      if (an->requires_grad) {
        auto& ga = detail::g(an);
        for (int j = 0; j < n; ++j)
          ga(i, j) += go * (bn->value(i, j) * inv - cs * an->value(i, j) / (na[ui] * na[ui]));
      }
      if (bn->requires_grad) {
        auto& gb = detail::g(bn);
        for (int j = 0; j < n; ++j)
          gb(i, j) += go * (an->value(i, j) * inv - cs * bn->value(i, j) / (nb[ui] * nb[ui]));
      }
    }
  });
}

// Divides each row by its L2 norm (rows with zero norm pass through unchanged).
template <typename T>
Var<T> normalize_rows(const Var<T>& a) {
  const int m = a.dim(0), n = a.dim(1);
  Tensor<T> out = a.value();
  std::vector<T> norms(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    T s{};
    for (int j = 0; j < n; ++j) s += a.value()(i, j) * a.value()(i, j);
    const T nrm = std::sqrt(s);
    norms[static_cast<std::size_t>(i)] = nrm;
    if (nrm > T{})
      for (int j = 0; j < n; ++j) out(i, j) /= nrm;
  }
  auto an = a.node();
  return make_result<T>(out, {a}, [an, out, norms, m, n](Node<T>& self) {
    auto& ga = detail::g(an);
    for (int i = 0; i < m; ++i) {
      const T nrm = norms[static_cast<std::size_t>(i)];
      if (!(nrm > T{})) {
        for (int j = 0; j < n; ++j) ga(i, j) += self.grad(i, j);
        continue;
      }
      T dot{};
      for (int j = 0; j < n; ++j) dot += self.grad(i, j) * out(i, j);
      for (int j = 0; j < n; ++j) ga(i, j) += (self.grad(i, j) - out(i, j) * dot) / nrm;
    }
  });
}

template <typename T>
Var<T> abs(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v = std::abs(v);
  auto an = a.node();
  return make_result<T>(std::move(out), {a}, [an](Node<T>& self) {
    auto& ga = detail::g(an);
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const T x = an->value[i];
      ga[i] += self.grad[i] * (x > T{} ? T{1} : (x < T{} ? T{-1} : T{}));
    }
  });
}

template <typename T>
Var<T> square(const Var<T>& a) {
  return mul(a, a);
}

// Mean binary cross-entropy with logits over a flat vector of logits.
template <typename T>
Var<T> bce_with_logits(const Var<T>& logits, const std::vector<T>& labels) {
  require<ShapeError>(logits.size() == labels.size() && !labels.empty(),
                      "bce_with_logits: ", logits.size(), " logits vs ", labels.size(), " labels");
  const auto n = labels.size();
  T total{};
  for (std::size_t i = 0; i < n; ++i) {
    const T z = logits.value()[i];
    // max(z,0) - z*y + log(1 + exp(-|z|))
    total += std::max(z, T{}) - z * labels[i] + std::log1p(std::exp(-std::abs(z)));
  }
  auto ln = logits.node();
  return make_result<T>(Tensor<T>({1}, total / static_cast<T>(n)), {logits}, [ln, labels, n](Node<T>& self) {
    auto& gl = detail::g(ln);
    for (std::size_t i = 0; i < n; ++i) {
      const T z = ln->value[i];
      const T p = T{1} / (T{1} + std::exp(-z));
      gl[i] += self.grad[0] * (p - labels[i]) / static_cast<T>(n);
    }
  });
}

// Mean over rows of KL(softmax(s/T) || softmax(t/T)) for [m,k] logit matrices.
template <typename T>
Var<T> kl_div_rows(const Var<T>& s, const Var<T>& t, T temperature) {
  detail::check_same(s, t, "kl_div_rows");
  require<ValidationError>(temperature > T{}, "temperature must be positive");
  const int m = s.dim(0), k = s.dim(1);
  auto log_softmax = [&](const Tensor<T>& z, int i, std::vector<T>& out) {
    T mx = z(i, 0) / temperature;
    for (int j = 1; j < k; ++j) mx = std::max(mx, z(i, j) / temperature);
    T acc{};
    for (int j = 0; j < k; ++j) acc += std::exp(z(i, j) / temperature - mx);
    const T lse = mx + std::log(acc);
    for (int j = 0; j < k; ++j) out[static_cast<std::size_t>(j)] = z(i, j) / temperature - lse;
  };
  Tensor<T> lp({m, k}), lq({m, k});
  std::vector<T> row(static_cast<std::size_t>(k));
  T total{};
  std::vector<T> per_row(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    log_softmax(s.value(), i, row);
    for (int j = 0; j < k; ++j) lp(i, j) = row[static_cast<std::size_t>(j)];
    log_softmax(t.value(), i, row);
    for (int j = 0; j < k; ++j) lq(i, j) = row[static_cast<std::size_t>(j)];
    T kl{};
    for (int j = 0; j < k; ++j) kl += std::exp(lp(i, j)) * (lp(i, j) - lq(i, j));
    kl = std::max(kl, T{});
    per_row[static_cast<std::size_t>(i)] = kl;
    total += kl;
  }
  auto sn = s.node(), tn = t.node();
  return make_result<T>(Tensor<T>({1}, total / static_cast<T>(m)), {s, t},
                        [sn, tn, lp, lq, per_row, m, k, temperature](Node<T>& self) {
    const T go = self.grad[0] / (static_cast<T>(m) * temperature);
    for (int i = 0; i < m; ++i) {
      const T kl = per_row[static_cast<std::size_t>(i)];
      for (int j = 0; j < k; ++j) {
        const T p = std::exp(lp(i, j)), q = std::exp(lq(i, j));
        if (sn->requires_grad) detail::g(sn)(i, j) += go * p * (lp(i, j) - lq(i, j) - kl);
        if (tn->requires_grad) detail::g(tn)(i, j) += go * (q - p);
      }
    }
  });
}

}  // namespace wsss::ag
