#pragma once

// Dense tensors and a define-by-run reverse-mode tape.
//
// A Tape is rebuilt for every forward pass. Var is a lightweight handle to a
// node on a tape; parameters live outside the tape as Tensors with gradient
// buffers and are bound to a tape as leaves via Tape::parameter(). Binding a
// tensor with Tape::constant() instead copies its values and cuts gradient
// flow, which is how teacher networks are evaluated.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <deque>
#include <vector>

#include "coxmt/errors.hpp"

namespace coxmt {

using Rng = std::mt19937_64;

namespace ad {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

class Tensor {
 public:
  Tensor() : values_(1, 0.0) {}
  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
    if (shape_size(shape_) != values_.size())
      throw DimensionError("tensor shape " + shape_str(shape_) + " holds " + std::to_string(shape_size(shape_)) +
                           " values, got " + std::to_string(values_.size()));
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor(Shape{rows, cols}, std::move(values));
  }
  static Tensor zeros(std::size_t rows, std::size_t cols) { return Tensor(Shape{rows, cols}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return values_.size(); }

  // Matrix view: rank 0 is 1x1, rank 1 is a single row.
  std::size_t rows() const noexcept { return shape_.size() == 2 ? shape_[0] : 1; }
  std::size_t cols() const noexcept {
    if (shape_.size() == 2) return shape_[1];
    return shape_.empty() ? 1 : shape_[0];
  }

  double& operator[](std::size_t i) { return values_[i]; }
  const double& operator[](std::size_t i) const { return values_[i]; }
  double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }
  double item() const {
    if (values_.size() != 1) throw RankError("item() on tensor of shape " + shape_str(shape_));
    return values_[0];
  }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  std::vector<double>& data() noexcept { return values_; }
  const std::vector<double>& data() const noexcept { return values_; }

  bool requires_grad() const noexcept { return grad_.has_value(); }
  void enable_grad() {
    if (!grad_) grad_.emplace(values_.size(), 0.0);
  }
  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
  }
  void drop_grad() { grad_.reset(); }
  std::span<double> grad() { return grad_ ? std::span<double>(*grad_) : std::span<double>(); }
  std::span<const double> grad() const { return grad_ ? std::span<const double>(*grad_) : std::span<const double>(); }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.values_ == b.values_; }

 private:
  Shape shape_;
  std::vector<double> values_;
  std::optional<std::vector<double>> grad_;
};

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value().item(); }
  bool requires_grad() const;
  // Gradient of the last backward() pass with respect to this node; empty if
  // no gradient reached it.
  std::span<const double> grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push(std::move(value), {}, nullptr, nullptr); }
  Var scalar(double v) { return constant(Tensor::scalar(v)); }

  // Binds an external tensor as a differentiable leaf; backward() accumulates
  // into its gradient buffer. The tensor must outlive the tape.
  Var parameter(Tensor& t) {
    t.enable_grad();
    Node n;
    n.value = t;
    n.value.drop_grad();
    n.leaf = &t;
    n.needs_grad = true;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  Var record(Tensor value, std::vector<std::size_t> parents, BackwardFn fn) {
    bool needs = false;
    for (auto p : parents) needs = needs || nodes_.at(p).needs_grad;
    if (!needs) return push(std::move(value), {}, nullptr, nullptr);
    Var v = push(std::move(value), std::move(parents), std::move(fn), nullptr);
    nodes_.back().needs_grad = true;
    return v;
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }
  const std::vector<std::size_t>& parents(std::size_t id) const { return nodes_.at(id).parents; }
  std::span<const double> grad(std::size_t id) const { return nodes_.at(id).grad; }

  // Adds g into the gradient buffer of node id (no-op if the node does not
  // require gradient).
  void accumulate(std::size_t id, std::span<const double> g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
  }
  std::vector<double>& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
  }

  // Reverse sweep from a scalar loss. Leaf gradients accumulate across calls;
  // intermediate node gradients are reset at the start of every call.
  void backward(Var loss) {
    if (loss.tape() != this) throw Error("backward: loss is not recorded on this tape");
    if (loss.value().size() != 1)
      throw RankError("backward requires a scalar loss, got shape " + shape_str(loss.value().shape()));
    for (auto& n : nodes_) n.grad.clear();
    if (!nodes_[loss.id()].needs_grad) return;
    nodes_[loss.id()].grad.assign(1, 1.0);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty()) continue;
      if (n.leaf) {
        auto g = n.leaf->grad();
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
      } else if (n.backward) {
        n.backward(*this, i);
      }
    }
  }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    Tensor* leaf = nullptr;
    bool needs_grad = false;
    std::vector<double> grad;
  };

  Var push(Tensor value, std::vector<std::size_t> parents, BackwardFn fn, Tensor* leaf) {
    Node n;
    n.value = std::move(value);
    n.parents = std::move(parents);
    n.backward = std::move(fn);
    n.leaf = leaf;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;  // stable references across push_back
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->needs_grad(id_); }
inline std::span<const double> Var::grad() const { return tape_->grad(id_); }

// ---------------------------------------------------------------------------
// Operations

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw Error("operands recorded on different tapes");
  return *a.tape();
}

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw RankError(std::string(op) + " expects a matrix, got shape " + shape_str(t.shape()));
}

template <class F, class D>
Var unary(const Var& x, F f, D dfdx) {
  Tape& tape = *x.tape();
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return tape.record(std::move(out), {x.id()}, [px = x.id(), dfdx](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const Tensor& xin = t.value(px);
    const Tensor& y = t.value(self);
    std::vector<double> gx(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * dfdx(xin[i], y[i]);
    t.accumulate(px, gx);
  });
}

enum class BinOp { add, sub, mul };

inline Var binary(const Var& a, const Var& b, BinOp op) {
  Tape& tape = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const bool a_scalar = av.size() == 1 && bv.size() != 1;
  const bool b_scalar = bv.size() == 1 && av.size() != 1;
  if (!a_scalar && !b_scalar && av.shape() != bv.shape())
    throw DimensionError("elementwise op on shapes " + shape_str(av.shape()) + " and " + shape_str(bv.shape()));
  const Shape& out_shape = a_scalar ? bv.shape() : av.shape();
  Tensor out(out_shape);
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = av[a_scalar ? 0 : i];
    const double y = bv[b_scalar ? 0 : i];
    out[i] = op == BinOp::add ? x + y : op == BinOp::sub ? x - y : x * y;
  }
  return tape.record(std::move(out), {a.id(), b.id()},
                     [pa = a.id(), pb = b.id(), a_scalar, b_scalar, op](Tape& t, std::size_t self) {
                       const auto& g = t.grad(self);
                       const Tensor& av2 = t.value(pa);
                       const Tensor& bv2 = t.value(pb);
                       std::vector<double> ga(av2.size(), 0.0), gb(bv2.size(), 0.0);
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         const std::size_t ia = a_scalar ? 0 : i;
                         const std::size_t ib = b_scalar ? 0 : i;
                         switch (op) {
                           case BinOp::add: ga[ia] += g[i]; gb[ib] += g[i]; break;
                           case BinOp::sub: ga[ia] += g[i]; gb[ib] -= g[i]; break;
                           case BinOp::mul:
                             ga[ia] += g[i] * bv2[ib];
                             gb[ib] += g[i] * av2[ia];
                             break;
                         }
                       }
                       t.accumulate(pa, ga);
                       t.accumulate(pb, gb);
                     });
}

}  // namespace detail

// Standard matrix product of a (m x k) and b (k x n).
inline Var matmul(const Var& a, const Var& b) {
  Tape& tape = detail::same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_rank2(av, "matmul");
  detail::require_rank2(bv, "matmul");
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  if (bv.rows() != k)
    throw DimensionError("matmul inner dimensions disagree: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  Tensor out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = &out[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = &bv[p * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return tape.record(std::move(out), {a.id(), b.id()}, [pa = a.id(), pb = b.id(), m, k, n](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(pa)) {
      const Tensor& bv2 = t.value(pb);
      auto& ga = t.grad_buffer(pa);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bv2[p * n + j];
          ga[i * k + p] += s;
        }
    }
    if (t.needs_grad(pb)) {
      const Tensor& av2 = t.value(pa);
      auto& gb = t.grad_buffer(pb);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av2[i * k + p];
          if (aip == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
        }
    }
  });
}

inline Var add(const Var& a, const Var& b) { return detail::binary(a, b, detail::BinOp::add); }
inline Var sub(const Var& a, const Var& b) { return detail::binary(a, b, detail::BinOp::sub); }
inline Var mul(const Var& a, const Var& b) { return detail::binary(a, b, detail::BinOp::mul); }

inline Var scale(const Var& x, double c) {
  return detail::unary(x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Var relu(const Var& x) {
  return detail::unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var tanh(const Var& x) {
  return detail::unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var exp(const Var& x) {
  return detail::unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Var log1p(const Var& x) {
  for (double v : x.value().values())
    if (!(v > -1.0)) throw DomainError("log1p of value " + std::to_string(v) + " (must exceed -1)");
  return detail::unary(x, [](double v) { return std::log1p(v); }, [](double v, double) { return 1.0 / (1.0 + v); });
}

inline Var square(const Var& x) {
  return detail::unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

// x (m x n) plus a row vector b (1 x n or length n) added to every row.
inline Var add_row(const Var& x, const Var& b) {
  Tape& tape = detail::same_tape(x, b);
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  detail::require_rank2(xv, "add_row");
  const std::size_t m = xv.rows(), n = xv.cols();
  if (bv.size() != n) throw DimensionError("add_row: " + shape_str(xv.shape()) + " + row " + shape_str(bv.shape()));
  Tensor out = xv;
  out.drop_grad();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
  return tape.record(std::move(out), {x.id(), b.id()}, [px = x.id(), pb = b.id(), m, n](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    t.accumulate(px, g);
    if (t.needs_grad(pb)) {
      auto& gb = t.grad_buffer(pb);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
  });
}

inline Var sum(const Var& x) {
  const Tensor& xv = x.value();
  double s = 0.0;
  for (double v : xv.values()) s += v;
  return x.tape()->record(Tensor::scalar(s), {x.id()}, [px = x.id()](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    std::vector<double> gx(t.value(px).size(), g);
    t.accumulate(px, gx);
  });
}

inline Var mean(const Var& x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

// Numerically stable log sum_{i in indices} exp(x_i) over a flat index subset.
// Its gradient is the softmax of x restricted to the subset.
inline Var log_sum_exp(const Var& x, std::span<const std::size_t> indices) {
  const Tensor& xv = x.value();
  if (indices.empty()) throw InvalidRiskSetError("log_sum_exp over an empty index set");
  double mx = -std::numeric_limits<double>::infinity();
  for (auto i : indices) {
    if (i >= xv.size())
      throw InvalidRiskSetError("log_sum_exp index " + std::to_string(i) + " out of bounds for size " + std::to_string(xv.size()));
    mx = std::max(mx, xv[i]);
  }
  double s = 0.0;
  for (auto i : indices) s += std::exp(xv[i] - mx);
  const double out = mx + std::log(s);
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return x.tape()->record(Tensor::scalar(out), {x.id()}, [px = x.id(), idx = std::move(idx)](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    const Tensor& xin = t.value(px);
    const double lse = t.value(self)[0];
    auto& gx = t.grad_buffer(px);
    for (auto i : idx) gx[i] += g * std::exp(xin[i] - lse);
  });
}

// Softmax along `axis` (0 or 1 for matrices; ignored for vectors). Positions
// flagged in `masked` (indexed along the axis) get probability exactly zero.
// A line with every position masked is a DimensionError.
inline Var softmax(const Var& x, std::size_t axis = 1, const std::vector<bool>& masked = {}) {
  const Tensor& xv = x.value();
  std::size_t lines, extent, line_stride, elem_stride;
  if (xv.rank() <= 1) {
    lines = 1, extent = xv.size(), line_stride = 0, elem_stride = 1;
  } else if (xv.rank() == 2 && axis < 2) {
    const std::size_t r = xv.rows(), c = xv.cols();
    if (axis == 1) lines = r, extent = c, line_stride = c, elem_stride = 1;
    else lines = c, extent = r, line_stride = 1, elem_stride = c;
  } else {
    throw RankError("softmax axis " + std::to_string(axis) + " invalid for shape " + shape_str(xv.shape()));
  }
  if (!masked.empty() && masked.size() != extent)
    throw DimensionError("softmax mask length " + std::to_string(masked.size()) + " vs extent " + std::to_string(extent));
  std::vector<bool> mask = masked.empty() ? std::vector<bool>(extent, false) : masked;
  if (extent > 0 && std::all_of(mask.begin(), mask.end(), [](bool b) { return b; }))
    throw DimensionError("softmax over a fully masked line");

  Tensor out(xv.shape());
  for (std::size_t l = 0; l < lines; ++l) {
    const std::size_t base = l * line_stride;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < extent; ++j)
      if (!mask[j]) mx = std::max(mx, xv[base + j * elem_stride]);
    double s = 0.0;
    for (std::size_t j = 0; j < extent; ++j) {
      const std::size_t p = base + j * elem_stride;
      out[p] = mask[j] ? 0.0 : std::exp(xv[p] - mx);
      s += out[p];
    }
    for (std::size_t j = 0; j < extent; ++j) out[base + j * elem_stride] /= s;
  }
  return x.tape()->record(std::move(out), {x.id()},
                          [px = x.id(), lines, extent, line_stride, elem_stride](Tape& t, std::size_t self) {
                            const auto& g = t.grad(self);
                            const Tensor& y = t.value(self);
                            auto& gx = t.grad_buffer(px);
                            for (std::size_t l = 0; l < lines; ++l) {
                              const std::size_t base = l * line_stride;
                              double dot = 0.0;
                              for (std::size_t j = 0; j < extent; ++j) {
                                const std::size_t p = base + j * elem_stride;
                                dot += g[p] * y[p];
                              }
                              for (std::size_t j = 0; j < extent; ++j) {
                                const std::size_t p = base + j * elem_stride;
                                gx[p] += y[p] * (g[p] - dot);
                              }
                            }
                          });
}

inline Var transpose(const Var& x) {
  const Tensor& xv = x.value();
  detail::require_rank2(xv, "transpose");
  const std::size_t r = xv.rows(), c = xv.cols();
  Tensor out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xv[i * c + j];
  return x.tape()->record(std::move(out), {x.id()}, [px = x.id(), r, c](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_buffer(px);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
  });
}

// Columns [begin, end) of a matrix.
inline Var slice_cols(const Var& x, std::size_t begin, std::size_t end) {
  const Tensor& xv = x.value();
  detail::require_rank2(xv, "slice_cols");
  const std::size_t r = xv.rows(), c = xv.cols();
  if (begin > end || end > c) throw DimensionError("slice_cols [" + std::to_string(begin) + "," + std::to_string(end) + ") of " + shape_str(xv.shape()));
  const std::size_t w = end - begin;
  Tensor out(Shape{r, w});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = xv[i * c + begin + j];
  return x.tape()->record(std::move(out), {x.id()}, [px = x.id(), r, c, w, begin](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_buffer(px);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) gx[i * c + begin + j] += g[i * w + j];
  });
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols of nothing");
  Tape& tape = *parts[0].tape();
  const std::size_t r = parts[0].value().rows();
  std::size_t total = 0;
  std::vector<std::size_t> widths, ids;
  for (const auto& p : parts) {
    if (p.tape() != &tape) throw Error("operands recorded on different tapes");
    if (p.value().rows() != r) throw DimensionError("concat_cols row mismatch: " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    widths.push_back(p.value().cols());
    ids.push_back(p.id());
    total += widths.back();
  }
  Tensor out(Shape{r, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out[i * total + off + j] = v[i * widths[k] + j];
    off += widths[k];
  }
  return tape.record(std::move(out), ids, [ids, widths, r, total](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    std::size_t o = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.needs_grad(ids[k])) {
        auto& gk = t.grad_buffer(ids[k]);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) gk[i * widths[k] + j] += g[i * total + o + j];
      }
      o += widths[k];
    }
  });
}

inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows of nothing");
  Tape& tape = *parts[0].tape();
  const std::size_t c = parts[0].value().cols();
  std::size_t rows = 0;
  std::vector<std::size_t> ids, sizes;
  for (const auto& p : parts) {
    if (p.tape() != &tape) throw Error("operands recorded on different tapes");
    if (p.value().cols() != c) throw DimensionError("concat_rows column mismatch: " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    rows += p.value().rows();
    ids.push_back(p.id());
    sizes.push_back(p.value().size());
  }
  std::vector<double> vals;
  vals.reserve(rows * c);
  for (const auto& p : parts) vals.insert(vals.end(), p.value().values().begin(), p.value().values().end());
  return tape.record(Tensor(Shape{rows, c}, std::move(vals)), ids, [ids, sizes](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    std::size_t o = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      t.accumulate(ids[k], g.subspan(o, sizes[k]));
      o += sizes[k];
    }
  });
}

// Rows `idx` of a matrix, in the given order (repeats allowed).
inline Var gather_rows(const Var& x, std::span<const std::size_t> idx) {
  const Tensor& xv = x.value();
  detail::require_rank2(xv, "gather_rows");
  const std::size_t r = xv.rows(), c = xv.cols();
  Tensor out(Shape{idx.size(), c});
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] >= r) throw DimensionError("gather_rows index " + std::to_string(idx[k]) + " out of " + std::to_string(r) + " rows");
    std::copy_n(&xv[idx[k] * c], c, &out[k * c]);
  }
  std::vector<std::size_t> keep(idx.begin(), idx.end());
  return x.tape()->record(std::move(out), {x.id()}, [px = x.id(), keep = std::move(keep), c](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_buffer(px);
    for (std::size_t k = 0; k < keep.size(); ++k)
      for (std::size_t j = 0; j < c; ++j) gx[keep[k] * c + j] += g[k * c + j];
  });
}

// Inverted dropout: kept entries are scaled by 1/(1-rate). The mask is drawn
// once in the forward pass and reused by backward.
inline Var dropout(const Var& x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw DomainError("dropout rate must lie in [0,1), got " + std::to_string(rate));
  if (rate == 0.0) return x;
  const Tensor& xv = x.value();
  std::bernoulli_distribution keep(1.0 - rate);
  const double s = 1.0 / (1.0 - rate);
  std::vector<double> mask(xv.size());
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    mask[i] = keep(rng) ? s : 0.0;
    out[i] = xv[i] * mask[i];
  }
  return x.tape()->record(std::move(out), {x.id()}, [px = x.id(), mask = std::move(mask)](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    std::vector<double> gx(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * mask[i];
    t.accumulate(px, gx);
  });
}

// x + eta with eta ~ N(0, sigma^2) drawn once per entry.
inline Var gaussian_noise(const Var& x, double sigma, Rng& rng) {
  if (sigma < 0.0) throw DomainError("noise sigma must be non-negative");
  if (sigma == 0.0) return x;
  const Tensor& xv = x.value();
  std::normal_distribution<double> normal(0.0, sigma);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] + normal(rng);
  return x.tape()->record(std::move(out), {x.id()}, [px = x.id()](Tape& t, std::size_t self) { t.accumulate(px, t.grad(self)); });
}

// Same values, no gradient flow.
inline Var detach(const Var& x) {
  Tensor v = x.value();
  return x.tape()->constant(std::move(v));
}

inline Var reshape(const Var& x, Shape shape) {
  Tensor out(std::move(shape), x.value().data());
  return x.tape()->record(std::move(out), {x.id()}, [px = x.id()](Tape& t, std::size_t self) { t.accumulate(px, t.grad(self)); });
}

}  // namespace ad
}  // namespace coxmt
