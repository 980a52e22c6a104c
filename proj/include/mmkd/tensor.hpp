// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with reverse-mode automatic differentiation.
//
// A TensorT<S> is a value-semantic handle onto a shared node holding data,
// an optional gradient accumulator, and the tape edge that produced it.
// Copying a tensor aliases its node; parameters stay shared between a model
// and its optimizer that way. Gradients accumulate additively: running
// backward() twice through the same node doubles its grad.
//
// Broadcasting is limited to the row-wise case (matrix + row vector); any
// other shape change requires an explicit reshape.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mmkd/error.hpp"

namespace mmkd {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

template <class S>
struct TensorNode {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode<S>>> parents;
  std::function<void(TensorNode<S>&)> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), S(0));
  }
};

template <class S>
class TensorT {
 public:
  using Scalar = S;
  using Node = TensorNode<S>;

  TensorT() : node_(std::make_shared<Node>()) {}
  explicit TensorT(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static TensorT zeros(Shape shape) {
    return full(std::move(shape), S(0));
  }

  static TensorT full(Shape shape, S value) {
    auto n = std::make_shared<Node>();
    n->data.assign(shape_numel(shape), value);
    n->shape = std::move(shape);
    return TensorT(std::move(n));
  }

  static TensorT from_data(Shape shape, std::vector<S> values) {
    if (shape_numel(shape) != values.size())
      throw ShapeError("tensor: " + shape_str(shape) + " cannot hold " +
                       std::to_string(values.size()) + " values");
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(values);
    return TensorT(std::move(n));
  }

  static TensorT scalar(S value) { return full({1}, value); }

  template <class Rng>
  static TensorT randn(Shape shape, Rng& rng, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data.resize(shape_numel(n->shape));
    for (auto& x : n->data) x = static_cast<S>(dist(rng));
    return TensorT(std::move(n));
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t ndim() const { return node_->shape.size(); }

  std::size_t rows() const {
    require_2d("rows");
    return node_->shape[0];
  }
  std::size_t cols() const {
    require_2d("cols");
    return node_->shape[1];
  }

  std::vector<S>& data() { return node_->data; }
  const std::vector<S>& data() const { return node_->data; }

  S& at(std::size_t r, std::size_t c) {
    require_2d("at");
    return node_->data[r * node_->shape[1] + c];
  }
  S at(std::size_t r, std::size_t c) const {
    require_2d("at");
    return node_->data[r * node_->shape[1] + c];
  }

  S item() const {
    if (numel() != 1)
      throw ContractError("item: tensor " + shape_str(shape()) + " is not scalar");
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  TensorT& set_requires_grad(bool v) {
    node_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::vector<S>& grad() {
    if (node_->grad.empty())
      throw ContractError("grad: no gradient present; run backward first");
    return node_->grad;
  }
  const std::vector<S>& grad() const {
    return const_cast<TensorT*>(this)->grad();
  }
  void zero_grad() { node_->grad.assign(node_->data.size(), S(0)); }
  void drop_grad() { node_->grad.clear(); }

  // Severs the tape: same values, no parents, no gradient flow.
  TensorT detach() const {
    auto n = std::make_shared<Node>();
    n->shape = node_->shape;
    n->data = node_->data;
    return TensorT(std::move(n));
  }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  void require_2d(const char* what) const {
    if (node_->shape.size() != 2)
      throw ShapeError(std::string(what) + ": tensor " + shape_str(shape()) +
                       " is not 2-d");
  }

  std::shared_ptr<Node> node_;
};

namespace detail {

template <class S>
void collect_parent(std::vector<std::shared_ptr<TensorNode<S>>>& out, bool& any,
                    const TensorT<S>& t) {
  out.push_back(t.node());
  any = any || t.requires_grad();
}

// Builds an op result; the tape edge is recorded only when some input
// requires grad, so no-grad forward passes carry no closure overhead.
template <class S, class... Parents>
TensorT<S> make_op(Shape shape, std::vector<S> data,
                   std::function<void(TensorNode<S>&)> backward,
                   const Parents&... parents) {
  auto n = std::make_shared<TensorNode<S>>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  bool any = false;
  std::vector<std::shared_ptr<TensorNode<S>>> ps;
  (collect_parent(ps, any, parents), ...);
  if (any) {
    n->requires_grad = true;
    n->parents = std::move(ps);
    n->backward = std::move(backward);
  }
  return TensorT<S>(std::move(n));
}

template <class S>
void accumulate(const std::shared_ptr<TensorNode<S>>& node, std::size_t i, S v) {
  node->grad[i] += v;
}

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MatMap = Eigen::Map<RowMat<S>>;
template <class S>
using ConstMatMap = Eigen::Map<const RowMat<S>>;

template <class S>
ConstMatMap<S> as_matrix(const std::vector<S>& v, std::size_t r, std::size_t c) {
  return ConstMatMap<S>(v.data(), static_cast<Eigen::Index>(r),
                        static_cast<Eigen::Index>(c));
}

template <class S>
MatMap<S> as_matrix(std::vector<S>& v, std::size_t r, std::size_t c) {
  return MatMap<S>(v.data(), static_cast<Eigen::Index>(r),
                   static_cast<Eigen::Index>(c));
}

template <class S>
void require_same_shape(const TensorT<S>& a, const TensorT<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
}

template <class S>
void require_finite(const TensorT<S>& t, const char* op) {
  for (S x : t.data())
    if (!std::isfinite(static_cast<double>(x)))
      throw NumericError(std::string(op) + ": non-finite input");
}

// Treats a 1-d tensor as a single row, a 2-d tensor as [rows x cols].
template <class S>
std::pair<std::size_t, std::size_t> row_view(const TensorT<S>& t, const char* op) {
  if (t.ndim() == 1) return {1, t.shape()[0]};
  if (t.ndim() == 2) return {t.shape()[0], t.shape()[1]};
  throw ShapeError(std::string(op) + ": expected 1-d or 2-d tensor, got " +
                   shape_str(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_op<S>(
      a.shape(), std::move(out),
      [](TensorNode<S>& n) {
        for (auto& p : n.parents) {
          if (!p->requires_grad) continue;
          p->ensure_grad();
          for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i];
        }
      },
      a, b);
}

template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return detail::make_op<S>(
      a.shape(), std::move(out),
      [](TensorNode<S>& n) {
        auto& pa = n.parents[0];
        auto& pb = n.parents[1];
        if (pa->requires_grad) {
          pa->ensure_grad();
          for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (std::size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] -= n.grad[i];
        }
      },
      a, b);
}

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_op<S>(
      a.shape(), std::move(out),
      [](TensorNode<S>& n) {
        auto& pa = n.parents[0];
        auto& pb = n.parents[1];
        if (pa->requires_grad) {
          pa->ensure_grad();
          for (std::size_t i = 0; i < n.grad.size(); ++i)
            pa->grad[i] += n.grad[i] * pb->data[i];
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (std::size_t i = 0; i < n.grad.size(); ++i)
            pb->grad[i] += n.grad[i] * pa->data[i];
        }
      },
      a, b);
}

template <class S>
TensorT<S> div(const TensorT<S>& a, const TensorT<S>& b) {
  detail::require_same_shape(a, b, "div");
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] / b.data()[i];
  return detail::make_op<S>(
      a.shape(), std::move(out),
      [](TensorNode<S>& n) {
        auto& pa = n.parents[0];
        auto& pb = n.parents[1];
        if (pa->requires_grad) {
          pa->ensure_grad();
          for (std::size_t i = 0; i < n.grad.size(); ++i)
            pa->grad[i] += n.grad[i] / pb->data[i];
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (std::size_t i = 0; i < n.grad.size(); ++i)
            pb->grad[i] -= n.grad[i] * pa->data[i] / (pb->data[i] * pb->data[i]);
        }
      },
      a, b);
}

template <class S>
TensorT<S> scale(const TensorT<S>& a, double c) {
  std::vector<S> out(a.numel());
  const S cs = static_cast<S>(c);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * cs;
  return detail::make_op<S>(
      a.shape(), std::move(out),
      [cs](TensorNode<S>& n) {
        auto& p = n.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i] * cs;
      },
      a);
}

template <class S>
TensorT<S> add_scalar(const TensorT<S>& a, double c) {
  std::vector<S> out(a.numel());
  const S cs = static_cast<S>(c);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + cs;
  return detail::make_op<S>(
      a.shape(), std::move(out),
      [](TensorNode<S>& n) {
        auto& p = n.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i];
      },
      a);
}

template <class S>
TensorT<S> neg(const TensorT<S>& a) {
  return scale(a, -1.0);
}

// Row-wise broadcast: [R x C] + [C].
template <class S>
TensorT<S> add_rowwise(const TensorT<S>& m, const TensorT<S>& v) {
  if (m.ndim() != 2 || v.ndim() != 1 || m.shape()[1] != v.shape()[0])
    throw ShapeError("add_rowwise: " + shape_str(m.shape()) + " vs " +
                     shape_str(v.shape()));
  const std::size_t r = m.shape()[0], c = m.shape()[1];
  std::vector<S> out(m.numel());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      out[i * c + j] = m.data()[i * c + j] + v.data()[j];
  return detail::make_op<S>(
      m.shape(), std::move(out),
      [r, c](TensorNode<S>& n) {
        auto& pm = n.parents[0];
        auto& pv = n.parents[1];
        if (pm->requires_grad) {
          pm->ensure_grad();
          for (std::size_t i = 0; i < n.grad.size(); ++i) pm->grad[i] += n.grad[i];
        }
        if (pv->requires_grad) {
          pv->ensure_grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) pv->grad[j] += n.grad[i * c + j];
        }
      },
      m, v);
}

// ---------------------------------------------------------------------------
// Matrix products and layout

template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0])
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<S> out(m * n);
  detail::as_matrix(out, m, n).noalias() =
      detail::as_matrix(a.data(), m, k) * detail::as_matrix(b.data(), k, n);
  return detail::make_op<S>(
      Shape{m, n}, std::move(out),
      [m, k, n](TensorNode<S>& node) {
        auto& pa = node.parents[0];
        auto& pb = node.parents[1];
        auto g = detail::as_matrix(node.grad, m, n);
        if (pa->requires_grad) {
          pa->ensure_grad();
          detail::as_matrix(pa->grad, m, k).noalias() +=
              g * detail::as_matrix(pb->data, k, n).transpose();
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          detail::as_matrix(pb->grad, k, n).noalias() +=
              detail::as_matrix(pa->data, m, k).transpose() * g;
        }
      },
      a, b);
}

template <class S>
TensorT<S> transpose(const TensorT<S>& a) {
  if (a.ndim() != 2)
    throw ShapeError("transpose: expected 2-d tensor, got " + shape_str(a.shape()));
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.data()[i * c + j];
  return detail::make_op<S>(
      Shape{c, r}, std::move(out),
      [r, c](TensorNode<S>& n) {
        auto& p = n.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j)
            p->grad[i * c + j] += n.grad[j * r + i];
      },
      a);
}

template <class S>
TensorT<S> reshape(const TensorT<S>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape) +
                     " changes element count");
  std::vector<S> out = a.data();
  return detail::make_op<S>(
      std::move(shape), std::move(out),
      [](TensorNode<S>& n) {
        auto& p = n.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i];
      },
      a);
}

template <class S>
TensorT<S> slice_rows(const TensorT<S>& a, std::size_t begin, std::size_t end) {
  if (a.ndim() != 2)
    throw ShapeError("slice_rows: expected 2-d tensor, got " + shape_str(a.shape()));
  if (begin > end || end > a.shape()[0])
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") outside " + shape_str(a.shape()));
  const std::size_t c = a.shape()[1], r = end - begin;
  std::vector<S> out(r * c);
  std::copy_n(a.data().begin() + begin * c, r * c, out.begin());
  return detail::make_op<S>(
      Shape{r, c}, std::move(out),
      [begin, c](TensorNode<S>& n) {
        auto& p = n.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i)
          p->grad[begin * c + i] += n.grad[i];
      },
      a);
}

template <class S>
TensorT<S> slice_cols(const TensorT<S>& a, std::size_t begin, std::size_t end) {
  if (a.ndim() != 2)
    throw ShapeError("slice_cols: expected 2-d tensor, got " + shape_str(a.shape()));
  if (begin > end || end > a.shape()[1])
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") outside " + shape_str(a.shape()));
  const std::size_t r = a.shape()[0], c = a.shape()[1], w = end - begin;
  std::vector<S> out(r * w);
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(a.data().begin() + i * c + begin, w, out.begin() + i * w);
  return detail::make_op<S>(
      Shape{r, w}, std::move(out),
      [begin, r, c, w](TensorNode<S>& n) {
        auto& p = n.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < w; ++j)
            p->grad[i * c + begin + j] += n.grad[i * w + j];
      },
      a);
}

template <class S>
TensorT<S> concat_rows(const std::vector<TensorT<S>>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t c = parts[0].ndim() == 2 ? parts[0].shape()[1] : 0;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.ndim() != 2 || p.shape()[1] != c)
      throw ShapeError("concat_rows: inconsistent shape " + shape_str(p.shape()));
    rows += p.shape()[0];
  }
  std::vector<S> out;
  out.reserve(rows * c);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());

  auto n = std::make_shared<TensorNode<S>>();
  n->shape = Shape{rows, c};
  n->data = std::move(out);
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (any) {
    n->requires_grad = true;
    for (const auto& p : parts) n->parents.push_back(p.node());
    n->backward = [](TensorNode<S>& node) {
      std::size_t off = 0;
      for (auto& p : node.parents) {
        const std::size_t len = p->data.size();
        if (p->requires_grad) {
          p->ensure_grad();
          for (std::size_t i = 0; i < len; ++i) p->grad[i] += node.grad[off + i];
        }
        off += len;
      }
    };
  }
  return TensorT<S>(std::move(n));
}

template <class S>
TensorT<S> concat_cols(const std::vector<TensorT<S>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t r = parts[0].ndim() == 2 ? parts[0].shape()[0] : 0;
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.ndim() != 2 || p.shape()[0] != r)
      throw ShapeError("concat_cols: inconsistent shape " + shape_str(p.shape()));
    cols += p.shape()[1];
  }
  std::vector<S> out(r * cols);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[1];
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(p.data().begin() + i * w, w, out.begin() + i * cols + off);
    off += w;
  }

  auto n = std::make_shared<TensorNode<S>>();
  n->shape = Shape{r, cols};
  n->data = std::move(out);
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (any) {
    n->requires_grad = true;
    for (const auto& p : parts) n->parents.push_back(p.node());
    n->backward = [r, cols](TensorNode<S>& node) {
      std::size_t off2 = 0;
      for (auto& p : node.parents) {
        const std::size_t w = p->shape[1];
        if (p->requires_grad) {
          p->ensure_grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < w; ++j)
              p->grad[i * w + j] += node.grad[i * cols + off2 + j];
        }
        off2 += w;
      }
    };
  }
  return TensorT<S>(std::move(n));
}

// Embedding lookup: rows of `table` selected by `ids`.
template <class S>
TensorT<S> gather_rows(const TensorT<S>& table, std::span<const int> ids) {
  if (table.ndim() != 2)
    throw ShapeError("gather_rows: expected 2-d table, got " + shape_str(table.shape()));
  const std::size_t v = table.shape()[0], c = table.shape()[1];
  std::vector<S> out(ids.size() * c);
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
      throw ContractError("gather_rows: id " + std::to_string(ids[i]) +
                          " outside table " + shape_str(table.shape()));
    rows[i] = static_cast<std::size_t>(ids[i]);
    std::copy_n(table.data().begin() + rows[i] * c, c, out.begin() + i * c);
  }
  return detail::make_op<S>(
      Shape{ids.size(), c}, std::move(out),
      [rows = std::move(rows), c](TensorNode<S>& n) {
        auto& p = n.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < rows.size(); ++i)
          for (std::size_t j = 0; j < c; ++j)
            p->grad[rows[i] * c + j] += n.grad[i * c + j];
      },
      table);
}

// One element per row: out[r] = a[r, ids[r]], shape [R x 1].
template <class S>
TensorT<S> select_per_row(const TensorT<S>& a, std::span<const int> ids) {
  if (a.ndim() != 2)
    throw ShapeError("select_per_row: expected 2-d tensor, got " + shape_str(a.shape()));
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  if (ids.size() != r)
    throw ShapeError("select_per_row: " + std::to_string(ids.size()) +
                     " indices for " + std::to_string(r) + " rows");
  std::vector<S> out(r);
  std::vector<std::size_t> off(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= c)
      throw ContractError("select_per_row: index " + std::to_string(ids[i]) +
                          " outside row of width " + std::to_string(c));
    off[i] = i * c + static_cast<std::size_t>(ids[i]);
    out[i] = a.data()[off[i]];
  }
  return detail::make_op<S>(
      Shape{r, 1}, std::move(out),
      [off = std::move(off)](TensorNode<S>& n) {
        auto& p = n.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < off.size(); ++i) p->grad[off[i]] += n.grad[i];
      },
      a);
}

// ---------------------------------------------------------------------------
// Nonlinearities and reductions

// Exact Gaussian-CDF form: 0.5 x (1 + erf(x / sqrt(2))).
template <class S>
TensorT<S> gelu(const TensorT<S>& a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = static_cast<double>(a.data()[i]);
    out[i] = static_cast<S>(0.5 * x * (1.0 + std::erf(x * inv_sqrt2)));
  }
  return detail::make_op<S>(
      a.shape(), std::move(out),
      [](TensorNode<S>& n) {
        auto& p = n.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          const double x = static_cast<double>(p->data[i]);
          const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
          const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
          p->grad[i] += n.grad[i] * static_cast<S>(cdf + x * pdf);
        }
      },
      a);
}

// log(max(x, floor)); gradient is zero on the clamped region.
template <class S>
TensorT<S> log_floor(const TensorT<S>& a, double floor) {
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<S>(
        std::log(std::max(static_cast<double>(a.data()[i]), floor)));
  return detail::make_op<S>(
      a.shape(), std::move(out),
      [floor](TensorNode<S>& n) {
        auto& p = n.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          const double x = static_cast<double>(p->data[i]);
          if (x > floor) p->grad[i] += n.grad[i] / static_cast<S>(x);
        }
      },
      a);
}

template <class S>
TensorT<S> sqrt_elem(const TensorT<S>& a) {
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<S>(std::sqrt(static_cast<double>(a.data()[i])));
  return detail::make_op<S>(
      a.shape(), std::move(out),
      [](TensorNode<S>& n) {
        auto& p = n.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i)
          p->grad[i] += n.grad[i] / (S(2) * n.data[i]);
      },
      a);
}

template <class S>
TensorT<S> clamp_min(const TensorT<S>& a, double lo) {
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::max(a.data()[i], static_cast<S>(lo));
  return detail::make_op<S>(
      a.shape(), std::move(out),
      [lo](TensorNode<S>& n) {
        auto& p = n.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i)
          if (static_cast<double>(p->data[i]) > lo) p->grad[i] += n.grad[i];
      },
      a);
}

template <class S>
TensorT<S> sum(const TensorT<S>& a) {
  S total = std::accumulate(a.data().begin(), a.data().end(), S(0));
  return detail::make_op<S>(
      Shape{1}, std::vector<S>{total},
      [](TensorNode<S>& n) {
        auto& p = n.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (auto& g : p->grad) g += n.grad[0];
      },
      a);
}

template <class S>
TensorT<S> mean(const TensorT<S>& a) {
  if (a.numel() == 0) throw ContractError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

// Softmax along the trailing axis, numerically stabilised by a row-max
// shift. `temperature` divides the logits before normalisation.
template <class S>
TensorT<S> softmax(const TensorT<S>& a, double temperature = 1.0) {
  if (temperature <= 0.0)
    throw ContractError("softmax: temperature must be positive, got " +
                        std::to_string(temperature));
  detail::require_finite(a, "softmax");
  auto [r, c] = detail::row_view(a, "softmax");
  if (c == 0) throw ShapeError("softmax: empty rows");
  std::vector<S> out(a.numel());
  const double invT = 1.0 / temperature;
  for (std::size_t i = 0; i < r; ++i) {
    const S* row = a.data().data() + i * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j)
      mx = std::max(mx, static_cast<double>(row[j]) * invT);
    double denom = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const double e = std::exp(static_cast<double>(row[j]) * invT - mx);
      out[i * c + j] = static_cast<S>(e);
      denom += e;
    }
    for (std::size_t j = 0; j < c; ++j)
      out[i * c + j] = static_cast<S>(static_cast<double>(out[i * c + j]) / denom);
  }
  return detail::make_op<S>(
      a.shape(), std::move(out),
      [r = r, c = c, invT](TensorNode<S>& n) {
        auto& p = n.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < r; ++i) {
          const S* prob = n.data.data() + i * c;
          const S* g = n.grad.data() + i * c;
          double dot = 0;
          for (std::size_t j = 0; j < c; ++j)
            dot += static_cast<double>(g[j]) * static_cast<double>(prob[j]);
          for (std::size_t j = 0; j < c; ++j)
            p->grad[i * c + j] += static_cast<S>(
                invT * static_cast<double>(prob[j]) *
                (static_cast<double>(g[j]) - dot));
        }
      },
      a);
}

// Row-wise layer normalisation with learned gain/bias.
template <class S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gain,
                      const TensorT<S>& bias, double eps = 1e-5) {
  if (x.ndim() != 2)
    throw ShapeError("layer_norm: expected 2-d input, got " + shape_str(x.shape()));
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  if (gain.ndim() != 1 || gain.shape()[0] != c || bias.ndim() != 1 ||
      bias.shape()[0] != c)
    throw ShapeError("layer_norm: gain/bias must be [" + std::to_string(c) + "]");
  std::vector<S> out(x.numel());
  std::vector<S> xhat(x.numel());
  std::vector<S> inv_sd(r);
  for (std::size_t i = 0; i < r; ++i) {
    const S* row = x.data().data() + i * c;
    double mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += static_cast<double>(row[j]);
    mu /= static_cast<double>(c);
    double var = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = static_cast<double>(row[j]) - mu;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_sd[i] = static_cast<S>(inv);
    for (std::size_t j = 0; j < c; ++j) {
      const double xh = (static_cast<double>(row[j]) - mu) * inv;
      xhat[i * c + j] = static_cast<S>(xh);
      out[i * c + j] = static_cast<S>(xh * static_cast<double>(gain.data()[j]) +
                                      static_cast<double>(bias.data()[j]));
    }
  }
  return detail::make_op<S>(
      x.shape(), std::move(out),
      [r, c, xhat = std::move(xhat), inv_sd = std::move(inv_sd)](TensorNode<S>& n) {
        auto& px = n.parents[0];
        auto& pg = n.parents[1];
        auto& pb = n.parents[2];
        if (pg->requires_grad) pg->ensure_grad();
        if (pb->requires_grad) pb->ensure_grad();
        if (px->requires_grad) px->ensure_grad();
        for (std::size_t i = 0; i < r; ++i) {
          const S* g = n.grad.data() + i * c;
          const S* xh = xhat.data() + i * c;
          if (pg->requires_grad)
            for (std::size_t j = 0; j < c; ++j) pg->grad[j] += g[j] * xh[j];
          if (pb->requires_grad)
            for (std::size_t j = 0; j < c; ++j) pb->grad[j] += g[j];
          if (px->requires_grad) {
            double m1 = 0, m2 = 0;
            for (std::size_t j = 0; j < c; ++j) {
              const double gh = static_cast<double>(g[j]) *
                                static_cast<double>(pg->data[j]);
              m1 += gh;
              m2 += gh * static_cast<double>(xh[j]);
            }
            m1 /= static_cast<double>(c);
            m2 /= static_cast<double>(c);
            for (std::size_t j = 0; j < c; ++j) {
              const double gh = static_cast<double>(g[j]) *
                                static_cast<double>(pg->data[j]);
              px->grad[i * c + j] += static_cast<S>(
                  static_cast<double>(inv_sd[i]) *
                  (gh - m1 - static_cast<double>(xh[j]) * m2));
            }
          }
        }
      },
      x, gain, bias);
}

// ---------------------------------------------------------------------------
// Backward driver

// Reverse-mode sweep from a scalar loss. Gradients are accumulated into
// every reachable tensor with requires_grad set; detached tensors and
// no-grad subgraphs receive nothing.
template <class S>
void backward(const TensorT<S>& loss) {
  if (loss.numel() != 1)
    throw ContractError("backward: loss must be scalar, got " +
                        shape_str(loss.shape()));
  using NodePtr = TensorNode<S>*;
  std::vector<NodePtr> order;
  std::unordered_set<NodePtr> seen;
  std::vector<std::pair<NodePtr, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodePtr parent = node->parents[next++].get();
      if (seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  // Each pass propagates its own unit seed; pre-existing grads are set aside
  // and re-added afterwards, so repeated passes accumulate additively.
  std::vector<std::vector<S>> stash(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) stash[i].swap(order[i]->grad);
  loss.node()->ensure_grad();
  loss.node()->grad[0] = S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<S>* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (stash[i].empty()) continue;
    auto& g = order[i]->grad;
    if (g.empty()) {
      g = std::move(stash[i]);
    } else {
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += stash[i][j];
    }
  }
}

// Non-differentiating helpers.
template <class S>
std::size_t argmax_row(const TensorT<S>& a, std::size_t row) {
  auto [r, c] = detail::row_view(a, "argmax_row");
  if (row >= r) throw ContractError("argmax_row: row out of range");
  const S* p = a.data().data() + row * c;
  std::size_t best = 0;
  for (std::size_t j = 1; j < c; ++j)
    if (p[j] > p[best]) best = j;  // ties keep the lowest index
  return best;
}

using Tensor = TensorT<double>;

}  // namespace mmkd
