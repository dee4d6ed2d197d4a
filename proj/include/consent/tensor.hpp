#pragma once

// Dense 64-bit tensors with reverse-mode differentiation.
//
// Tensors are immutable values: an operation allocates a fresh buffer and,
// when a GradTape is active, records how to push gradients back to its
// inputs. The tape is rebuilt on every forward pass; backward() replays it
// once and returns one accumulated gradient per requires-grad leaf.
//
// Every forward op verifies its output is finite; NaN/Inf raises
// NumericError rather than propagating silently.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "consent/common.hpp"

namespace consent {

using Shape = std::vector<std::size_t>;

namespace detail {
inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) {
    if (d == 0) throw DimensionError("tensor: zero extent");
    n *= d;
  }
  return n;
}
inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = detail::shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad, true);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const std::size_t n = detail::shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad, true);
  }

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (detail::shape_numel(shape) != data.size())
      throw DimensionError("tensor: shape " + detail::shape_str(shape) + " does not hold " +
                           std::to_string(data.size()) + " values");
    return Tensor(std::move(shape), std::move(data), requires_grad, true);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<double>{v}, requires_grad, true);
  }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t size() const { return s_->data.size(); }
  std::span<const double> data() const { return s_->data; }
  bool requires_grad() const { return s_ && s_->requires_grad; }
  bool is_leaf() const { return s_ && s_->leaf; }
  std::uint64_t id() const { return s_->id; }

  double value() const {
    if (size() != 1) throw DimensionError("value(): tensor is not scalar");
    return s_->data[0];
  }

  double operator()(std::size_t i) const { return s_->data[i]; }
  double operator()(std::size_t i, std::size_t j) const {
    return s_->data[i * s_->shape[1] + j];
  }
  double operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return s_->data[(i * s_->shape[1] + j) * s_->shape[2] + k];
  }

  /// Leaf copy with the same contents (fresh id, optionally grad-tracked).
  Tensor detached_copy(bool requires_grad = false) const {
    return Tensor(s_->shape, s_->data, requires_grad, true);
  }

 private:
  friend class GradTape;
  friend class GradMap;
  friend Tensor op_output(Shape, std::vector<double>, bool);

  struct Storage {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    bool leaf = false;
    std::uint64_t id = 0;
  };

  Tensor(Shape shape, std::vector<double> data, bool requires_grad, bool leaf) {
    for (double v : data) {
      if (!std::isfinite(v)) throw NumericError("tensor: non-finite value");
    }
    auto st = std::make_shared<Storage>();
    st->shape = std::move(shape);
    st->data = std::move(data);
    st->requires_grad = requires_grad;
    st->leaf = leaf;
    st->id = next_id();
    s_ = std::move(st);
  }

  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
  }

  std::shared_ptr<Storage> s_;
};

/// Non-leaf tensor produced by an operation.
inline Tensor op_output(Shape shape, std::vector<double> data, bool requires_grad) {
  return Tensor(std::move(shape), std::move(data), requires_grad, false);
}

// ---------------------------------------------------------------------------
// Gradient map returned by backward().

class GradMap {
 public:
  /// Gradient of `t`, or zeros if `t` never participated in the loss.
  Tensor grad(const Tensor& t) const {
    auto it = grads_.find(t.id());
    if (it == grads_.end()) return Tensor::zeros(t.shape());
    return Tensor::from_data(t.shape(), it->second);
  }

  bool contains(const Tensor& t) const { return grads_.count(t.id()) > 0; }

 private:
  friend class GradTape;
  std::unordered_map<std::uint64_t, std::vector<double>> grads_;
};

// ---------------------------------------------------------------------------
// Reverse-mode tape. One tape per forward pass, activated RAII-style;
// nesting restores the previous tape. Thread-local, so independent
// training/eval jobs can run on separate threads.

class GradTape {
 public:
  using GradStore = std::unordered_map<std::uint64_t, std::vector<double>>;
  using PullFn = std::function<void(const std::vector<double>&, GradStore&)>;

  GradTape() : prev_(current_) { current_ = this; }
  ~GradTape() { current_ = prev_; }
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* current() { return current_; }

  void record(std::uint64_t out_id, std::size_t out_size, PullFn pull) {
    records_.push_back({out_id, out_size, std::move(pull)});
  }

  /// Replays the tape backward from a scalar loss. Single use.
  GradMap backward(const Tensor& loss) {
    if (consumed_) throw UsageError("backward: tape already consumed");
    if (loss.size() != 1) throw DimensionError("backward: loss must be scalar");
    consumed_ = true;
    GradMap out;
    GradStore& store = out.grads_;
    store[loss.id()] = {1.0};
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      auto g = store.find(it->out_id);
      if (g == store.end()) continue;
      it->pull(g->second, store);
    }
    return out;
  }

 private:
  struct Record {
    std::uint64_t out_id;
    std::size_t out_size;
    PullFn pull;
  };

  static thread_local GradTape* current_;
  GradTape* prev_ = nullptr;
  std::vector<Record> records_;
  bool consumed_ = false;
};

inline thread_local GradTape* GradTape::current_ = nullptr;

namespace detail {

inline std::vector<double>& grad_slot(GradTape::GradStore& store, const Tensor& t) {
  auto& slot = store[t.id()];
  if (slot.empty()) slot.assign(t.size(), 0.0);
  return slot;
}

/// Records `pull` if a tape is active and the output tracks gradients.
inline void maybe_record(const Tensor& out, GradTape::PullFn pull) {
  if (GradTape* tape = GradTape::current(); tape && out.requires_grad())
    tape->record(out.id(), out.size(), std::move(pull));
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops.

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  const auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i];
  Tensor r = op_output(a.shape(), std::move(out), a.requires_grad() || b.requires_grad());
  detail::maybe_record(r, [a, b](const std::vector<double>& g, GradTape::GradStore& s) {
    if (a.requires_grad()) {
      auto& ga = detail::grad_slot(s, a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto& gb = detail::grad_slot(s, b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
  return r;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  const auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] - db[i];
  Tensor r = op_output(a.shape(), std::move(out), a.requires_grad() || b.requires_grad());
  detail::maybe_record(r, [a, b](const std::vector<double>& g, GradTape::GradStore& s) {
    if (a.requires_grad()) {
      auto& ga = detail::grad_slot(s, a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto& gb = detail::grad_slot(s, b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
  return r;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  const auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i];
  Tensor r = op_output(a.shape(), std::move(out), a.requires_grad() || b.requires_grad());
  detail::maybe_record(r, [a, b](const std::vector<double>& g, GradTape::GradStore& s) {
    const auto da = a.data(), db = b.data();
    if (a.requires_grad()) {
      auto& ga = detail::grad_slot(s, a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * db[i];
    }
    if (b.requires_grad()) {
      auto& gb = detail::grad_slot(s, b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * da[i];
    }
  });
  return r;
}

/// Elementwise a*x + b with scalar constants.
inline Tensor affine(const Tensor& x, double a, double b) {
  std::vector<double> out(x.size());
  const auto dx = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * dx[i] + b;
  Tensor r = op_output(x.shape(), std::move(out), x.requires_grad());
  detail::maybe_record(r, [x, a](const std::vector<double>& g, GradTape::GradStore& s) {
    auto& gx = detail::grad_slot(s, x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += a * g[i];
  });
  return r;
}

inline Tensor scale(const Tensor& x, double a) { return affine(x, a, 0.0); }

inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  const auto dx = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = dx[i] > 0.0 ? dx[i] : 0.0;
  Tensor r = op_output(x.shape(), std::move(out), x.requires_grad());
  detail::maybe_record(r, [x](const std::vector<double>& g, GradTape::GradStore& s) {
    const auto dx = x.data();
    auto& gx = detail::grad_slot(s, x);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (dx[i] > 0.0) gx[i] += g[i];
  });
  return r;
}

inline Tensor log(const Tensor& x) {
  std::vector<double> out(x.size());
  const auto dx = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (dx[i] <= 0.0) throw NumericError("log: non-positive input");
    out[i] = std::log(dx[i]);
  }
  Tensor r = op_output(x.shape(), std::move(out), x.requires_grad());
  detail::maybe_record(r, [x](const std::vector<double>& g, GradTape::GradStore& s) {
    const auto dx = x.data();
    auto& gx = detail::grad_slot(s, x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / dx[i];
  });
  return r;
}

/// Elementwise x^p for constant p >= 0.
inline Tensor pow_scalar(const Tensor& x, double p) {
  std::vector<double> out(x.size());
  const auto dx = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::pow(dx[i], p);
  Tensor r = op_output(x.shape(), std::move(out), x.requires_grad());
  detail::maybe_record(r, [x, p](const std::vector<double>& g, GradTape::GradStore& s) {
    const auto dx = x.data();
    auto& gx = detail::grad_slot(s, x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double d = p == 0.0 ? 0.0 : p * std::pow(dx[i], p - 1.0);
      gx[i] += g[i] * d;
    }
  });
  return r;
}

/// Clamp to [lo, hi]; gradient passes only strictly inside the interval.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
  std::vector<double> out(x.size());
  const auto dx = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(dx[i], lo, hi);
  Tensor r = op_output(x.shape(), std::move(out), x.requires_grad());
  detail::maybe_record(r, [x, lo, hi](const std::vector<double>& g, GradTape::GradStore& s) {
    const auto dx = x.data();
    auto& gx = detail::grad_slot(s, x);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (dx[i] > lo && dx[i] < hi) gx[i] += g[i];
  });
  return r;
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (detail::shape_numel(shape) != x.size())
    throw DimensionError("reshape: element count mismatch");
  std::vector<double> out(x.data().begin(), x.data().end());
  Tensor r = op_output(std::move(shape), std::move(out), x.requires_grad());
  detail::maybe_record(r, [x](const std::vector<double>& g, GradTape::GradStore& s) {
    auto& gx = detail::grad_slot(s, x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  return r;
}

inline Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("transpose: rank-2 tensor required");
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  std::vector<double> out(x.size());
  const auto dx = x.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = dx[i * c + j];
  Tensor t = op_output({c, r}, std::move(out), x.requires_grad());
  detail::maybe_record(t, [x, r, c](const std::vector<double>& g, GradTape::GradStore& s) {
    auto& gx = detail::grad_slot(s, x);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
  });
  return t;
}

/// Columns [c0, c0+n) of a rank-2 tensor.
inline Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t n) {
  if (x.rank() != 2) throw DimensionError("slice_cols: rank-2 tensor required");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  if (c0 + n > cols) throw DimensionError("slice_cols: out of range");
  std::vector<double> out(rows * n);
  const auto dx = x.data();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = dx[i * cols + c0 + j];
  Tensor r = op_output({rows, n}, std::move(out), x.requires_grad());
  detail::maybe_record(r, [x, c0, n, rows, cols](const std::vector<double>& g,
                                                 GradTape::GradStore& s) {
    auto& gx = detail::grad_slot(s, x);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < n; ++j) gx[i * cols + c0 + j] += g[i * n + j];
  });
  return r;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: empty input");
  const std::size_t rows = parts[0].shape()[0];
  std::size_t cols = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.shape()[0] != rows)
      throw DimensionError("concat_cols: row count mismatch");
    cols += p.shape()[1];
    rg = rg || p.requires_grad();
  }
  std::vector<double> out(rows * cols);
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    const std::size_t pc = p.shape()[1];
    const auto dp = p.data();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < pc; ++j) out[i * cols + off + j] = dp[i * pc + j];
    off += pc;
  }
  Tensor r = op_output({rows, cols}, std::move(out), rg);
  detail::maybe_record(r, [parts, rows, cols](const std::vector<double>& g,
                                              GradTape::GradStore& s) {
    std::size_t off = 0;
    for (const Tensor& p : parts) {
      const std::size_t pc = p.shape()[1];
      if (p.requires_grad()) {
        auto& gp = detail::grad_slot(s, p);
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < pc; ++j) gp[i * pc + j] += g[i * cols + off + j];
      }
      off += pc;
    }
  });
  return r;
}

/// Stacks rank-1 tensors of equal length into the rows of a matrix.
inline Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw DimensionError("stack_rows: empty input");
  const std::size_t d = rows[0].size();
  bool rg = false;
  for (const Tensor& r : rows) {
    if (r.rank() != 1 || r.size() != d) throw DimensionError("stack_rows: length mismatch");
    rg = rg || r.requires_grad();
  }
  std::vector<double> out(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto dr = rows[i].data();
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = dr[j];
  }
  Tensor r = op_output({rows.size(), d}, std::move(out), rg);
  detail::maybe_record(r, [rows, d](const std::vector<double>& g, GradTape::GradStore& s) {
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (!rows[i].requires_grad()) continue;
      auto& gr = detail::grad_slot(s, rows[i]);
      for (std::size_t j = 0; j < d; ++j) gr[j] += g[i * d + j];
    }
  });
  return r;
}

/// Broadcast-adds a length-C row vector to every row of an [R x C] matrix.
/// The one permitted broadcast; everything else is explicit reshape/transpose.
inline Tensor add_rowvec(const Tensor& x, const Tensor& b) {
  if (x.rank() != 2 || b.rank() != 1 || b.size() != x.shape()[1])
    throw DimensionError("add_rowvec: need [RxC] and [C]");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  std::vector<double> out(x.size());
  const auto dx = x.data(), db = b.data();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = dx[i * cols + j] + db[j];
  Tensor r = op_output(x.shape(), std::move(out), x.requires_grad() || b.requires_grad());
  detail::maybe_record(r, [x, b, rows, cols](const std::vector<double>& g,
                                             GradTape::GradStore& s) {
    if (x.requires_grad()) {
      auto& gx = detail::grad_slot(s, x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (b.requires_grad()) {
      auto& gb = detail::grad_slot(s, b);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) gb[j] += g[i * cols + j];
    }
  });
  return r;
}

/// Scales row i of x by m[i] (used to zero masked query rows).
inline Tensor scale_rows(const Tensor& x, const Tensor& m) {
  if (x.rank() != 2 || m.rank() != 1 || m.size() != x.shape()[0])
    throw DimensionError("scale_rows: need [RxC] and [R]");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  std::vector<double> out(x.size());
  const auto dx = x.data(), dm = m.data();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = dx[i * cols + j] * dm[i];
  Tensor r = op_output(x.shape(), std::move(out), x.requires_grad() || m.requires_grad());
  detail::maybe_record(r, [x, m, rows, cols](const std::vector<double>& g,
                                             GradTape::GradStore& s) {
    const auto dx = x.data(), dm = m.data();
    if (x.requires_grad()) {
      auto& gx = detail::grad_slot(s, x);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) gx[i * cols + j] += g[i * cols + j] * dm[i];
    }
    if (m.requires_grad()) {
      auto& gm = detail::grad_slot(s, m);
      for (std::size_t i = 0; i < rows; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < cols; ++j) acc += g[i * cols + j] * dx[i * cols + j];
        gm[i] += acc;
      }
    }
  });
  return r;
}

inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor r = op_output({1}, {acc}, x.requires_grad());
  detail::maybe_record(r, [x](const std::vector<double>& g, GradTape::GradStore& s) {
    auto& gx = detail::grad_slot(s, x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
  });
  return r;
}

/// out[i] = x[i, idx[i]] for a rank-2 tensor (per-row class pick).
inline Tensor gather_index(const Tensor& x, const std::vector<int>& idx) {
  if (x.rank() != 2) throw DimensionError("gather_index: rank-2 tensor required");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  if (idx.size() != rows) throw DimensionError("gather_index: index count mismatch");
  std::vector<double> out(rows);
  const auto dx = x.data();
  for (std::size_t i = 0; i < rows; ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= cols)
      throw ValidationError("gather_index: index out of range");
    out[i] = dx[i * cols + static_cast<std::size_t>(idx[i])];
  }
  Tensor r = op_output({rows}, std::move(out), x.requires_grad());
  detail::maybe_record(r, [x, idx, rows, cols](const std::vector<double>& g,
                                               GradTape::GradStore& s) {
    auto& gx = detail::grad_slot(s, x);
    for (std::size_t i = 0; i < rows; ++i)
      gx[i * cols + static_cast<std::size_t>(idx[i])] += g[i];
  });
  return r;
}

// ---------------------------------------------------------------------------
// Matrix product.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw DimensionError("matmul: rank-2 tensors required");
  const std::size_t m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2)
    throw DimensionError("matmul: inner extents disagree " + detail::shape_str(a.shape()) +
                         " vs " + detail::shape_str(b.shape()));
  std::vector<double> out(m * n, 0.0);
  const auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = da[i * k + p];
      if (av == 0.0) continue;
      const double* brow = &db[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  Tensor r = op_output({m, n}, std::move(out), a.requires_grad() || b.requires_grad());
  detail::maybe_record(r, [a, b, m, k, n](const std::vector<double>& g,
                                          GradTape::GradStore& s) {
    const auto da = a.data(), db = b.data();
    if (a.requires_grad()) {  // dA = g . B^T
      auto& ga = detail::grad_slot(s, a);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * db[p * n + j];
          ga[i * k + p] += acc;
        }
    }
    if (b.requires_grad()) {  // dB = A^T . g
      auto& gb = detail::grad_slot(s, b);
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t i = 0; i < m; ++i) {
          const double av = da[i * k + p];
          if (av == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
        }
    }
  });
  return r;
}

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_rowvec(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// Softmax along an axis, max-subtracted for stability.

inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw DimensionError("softmax: axis out of range");
  const Shape& sh = x.shape();
  const std::size_t ax = sh[axis];
  std::size_t inner = 1, outer = 1;
  for (std::size_t i = axis + 1; i < sh.size(); ++i) inner *= sh[i];
  for (std::size_t i = 0; i < axis; ++i) outer *= sh[i];
  std::vector<double> out(x.size());
  const auto dx = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * ax * inner + in;
      double mx = dx[base];
      for (std::size_t a = 1; a < ax; ++a) mx = std::max(mx, dx[base + a * inner]);
      double denom = 0.0;
      for (std::size_t a = 0; a < ax; ++a) {
        const double e = std::exp(dx[base + a * inner] - mx);
        out[base + a * inner] = e;
        denom += e;
      }
      for (std::size_t a = 0; a < ax; ++a) out[base + a * inner] /= denom;
    }
  }
  Tensor r = op_output(sh, std::move(out), x.requires_grad());
  detail::maybe_record(r, [x, r, axis, ax, inner, outer](const std::vector<double>& g,
                                                         GradTape::GradStore& s) {
    const auto p = r.data();
    auto& gx = detail::grad_slot(s, x);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * ax * inner + in;
        double dot = 0.0;
        for (std::size_t a = 0; a < ax; ++a) dot += g[base + a * inner] * p[base + a * inner];
        for (std::size_t a = 0; a < ax; ++a) {
          const std::size_t i = base + a * inner;
          gx[i] += p[i] * (g[i] - dot);
        }
      }
    }
  });
  return r;
}

// ---------------------------------------------------------------------------
// Layer normalization over the last axis, then affine (gain, bias).

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  if (x.rank() < 1) throw DimensionError("layer_norm: rank >= 1 required");
  const std::size_t d = x.shape().back();
  if (gain.size() != d || bias.size() != d)
    throw DimensionError("layer_norm: gain/bias length mismatch");
  if (eps <= 0.0) throw DimensionError("layer_norm: eps must be positive");
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size());
  std::vector<double> inv_sigma(rows), mean(rows);
  const auto dx = x.data(), dg = gain.data(), db = bias.data();
  for (std::size_t i = 0; i < rows; ++i) {
    const double* row = &dx[i * d];
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    mean[i] = mu;
    inv_sigma[i] = is;
    for (std::size_t j = 0; j < d; ++j)
      out[i * d + j] = (row[j] - mu) * is * dg[j] + db[j];
  }
  Tensor r = op_output(x.shape(), std::move(out),
                       x.requires_grad() || gain.requires_grad() || bias.requires_grad());
  detail::maybe_record(r, [x, gain, bias, rows, d, mean, inv_sigma](
                              const std::vector<double>& g, GradTape::GradStore& s) {
    const auto dx = x.data(), dg = gain.data();
    for (std::size_t i = 0; i < rows; ++i) {
      const double* row = &dx[i * d];
      const double* grow = &g[i * d];
      const double mu = mean[i], is = inv_sigma[i];
      if (x.requires_grad()) {
        // dL/dx via the standard normalized-row identity.
        double sum_gy = 0.0, sum_gyx = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double gy = grow[j] * dg[j];
          const double xh = (row[j] - mu) * is;
          sum_gy += gy;
          sum_gyx += gy * xh;
        }
        auto& gx = detail::grad_slot(s, x);
        for (std::size_t j = 0; j < d; ++j) {
          const double gy = grow[j] * dg[j];
          const double xh = (row[j] - mu) * is;
          gx[i * d + j] +=
              is * (gy - sum_gy / static_cast<double>(d) - xh * sum_gyx / static_cast<double>(d));
        }
      }
      if (gain.requires_grad()) {
        auto& gg = detail::grad_slot(s, gain);
        for (std::size_t j = 0; j < d; ++j) gg[j] += grow[j] * (row[j] - mu) * is;
      }
      if (bias.requires_grad()) {
        auto& gb = detail::grad_slot(s, bias);
        for (std::size_t j = 0; j < d; ++j) gb[j] += grow[j];
      }
    }
  });
  return r;
}

// ---------------------------------------------------------------------------
// Convolution stack primitives (3x3, stride 1, zero padding 1).

inline Tensor conv2d_3x3(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 3 || w.rank() != 4) throw DimensionError("conv2d: need [CxHxW], [OxCx3x3]");
  const std::size_t cin = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
  const std::size_t cout = w.shape()[0];
  if (w.shape()[1] != cin || w.shape()[2] != 3 || w.shape()[3] != 3 || b.size() != cout)
    throw DimensionError("conv2d: weight/bias shape mismatch");
  std::vector<double> out(cout * h * wd);
  const auto dx = x.data(), dw = w.data(), db = b.data();
  for (std::size_t oc = 0; oc < cout; ++oc) {
    double* oplane = &out[oc * h * wd];
    for (std::size_t i = 0; i < h * wd; ++i) oplane[i] = db[oc];
    for (std::size_t ic = 0; ic < cin; ++ic) {
      const double* iplane = &dx[ic * h * wd];
      const double* k = &dw[(oc * cin + ic) * 9];
      for (std::size_t y = 0; y < h; ++y) {
        const bool y0ok = y > 0, y2ok = y + 1 < h;
        const double* rm = y0ok ? &iplane[(y - 1) * wd] : nullptr;
        const double* rc = &iplane[y * wd];
        const double* rp = y2ok ? &iplane[(y + 1) * wd] : nullptr;
        double* orow = &oplane[y * wd];
        for (std::size_t xc = 0; xc < wd; ++xc) {
          const bool x0ok = xc > 0, x2ok = xc + 1 < wd;
          double acc = 0.0;
          if (rm) {
            if (x0ok) acc += k[0] * rm[xc - 1];
            acc += k[1] * rm[xc];
            if (x2ok) acc += k[2] * rm[xc + 1];
          }
          if (x0ok) acc += k[3] * rc[xc - 1];
          acc += k[4] * rc[xc];
          if (x2ok) acc += k[5] * rc[xc + 1];
          if (rp) {
            if (x0ok) acc += k[6] * rp[xc - 1];
            acc += k[7] * rp[xc];
            if (x2ok) acc += k[8] * rp[xc + 1];
          }
          orow[xc] += acc;
        }
      }
    }
  }
  Tensor r = op_output({cout, h, wd}, std::move(out),
                       x.requires_grad() || w.requires_grad() || b.requires_grad());
  detail::maybe_record(r, [x, w, b, cin, cout, h, wd](const std::vector<double>& g,
                                                      GradTape::GradStore& s) {
    const auto dx = x.data(), dw = w.data();
    if (b.requires_grad()) {
      auto& gb = detail::grad_slot(s, b);
      for (std::size_t oc = 0; oc < cout; ++oc) {
        double acc = 0.0;
        const double* gplane = &g[oc * h * wd];
        for (std::size_t i = 0; i < h * wd; ++i) acc += gplane[i];
        gb[oc] += acc;
      }
    }
    if (w.requires_grad()) {
      auto& gw = detail::grad_slot(s, w);
      for (std::size_t oc = 0; oc < cout; ++oc) {
        const double* gplane = &g[oc * h * wd];
        for (std::size_t ic = 0; ic < cin; ++ic) {
          const double* iplane = &dx[ic * h * wd];
          double* k = &gw[(oc * cin + ic) * 9];
          for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t xc = 0; xc < wd; ++xc) {
              const double gv = gplane[y * wd + xc];
              if (gv == 0.0) continue;
              for (int dy = -1; dy <= 1; ++dy) {
                const std::size_t yy = y + static_cast<std::size_t>(dy);
                if (static_cast<std::size_t>(yy) >= h) continue;
                for (int dxn = -1; dxn <= 1; ++dxn) {
                  const std::size_t xx = xc + static_cast<std::size_t>(dxn);
                  if (static_cast<std::size_t>(xx) >= wd) continue;
                  k[(dy + 1) * 3 + (dxn + 1)] += gv * iplane[yy * wd + xx];
                }
              }
            }
          }
        }
      }
    }
    if (x.requires_grad()) {
      auto& gx = detail::grad_slot(s, x);
      for (std::size_t oc = 0; oc < cout; ++oc) {
        const double* gplane = &g[oc * h * wd];
        for (std::size_t ic = 0; ic < cin; ++ic) {
          const double* k = &dw[(oc * cin + ic) * 9];
          double* giplane = &gx[ic * h * wd];
          for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t xc = 0; xc < wd; ++xc) {
              const double gv = gplane[y * wd + xc];
              if (gv == 0.0) continue;
              for (int dy = -1; dy <= 1; ++dy) {
                const std::size_t yy = y + static_cast<std::size_t>(dy);
                if (static_cast<std::size_t>(yy) >= h) continue;
                for (int dxn = -1; dxn <= 1; ++dxn) {
                  const std::size_t xx = xc + static_cast<std::size_t>(dxn);
                  if (static_cast<std::size_t>(xx) >= wd) continue;
                  giplane[yy * wd + xx] += gv * k[(dy + 1) * 3 + (dxn + 1)];
                }
              }
            }
          }
        }
      }
    }
  });
  return r;
}

/// 2x2 max pooling, stride 2; trailing odd row/column is dropped.
inline Tensor max_pool2(const Tensor& x) {
  if (x.rank() != 3) throw DimensionError("max_pool2: need [CxHxW]");
  const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const std::size_t oh = h / 2, ow = w / 2;
  if (oh == 0 || ow == 0) throw DimensionError("max_pool2: input too small");
  std::vector<double> out(c * oh * ow);
  auto argmax = std::make_shared<std::vector<std::size_t>>(c * oh * ow);
  const auto dx = x.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xc = 0; xc < ow; ++xc) {
        const std::size_t base = ch * h * w + 2 * y * w + 2 * xc;
        std::size_t best = base;
        double bv = dx[base];
        const std::size_t cand[3] = {base + 1, base + w, base + w + 1};
        for (std::size_t t : cand) {
          if (dx[t] > bv) {
            bv = dx[t];
            best = t;
          }
        }
        const std::size_t oi = ch * oh * ow + y * ow + xc;
        out[oi] = bv;
        (*argmax)[oi] = best;
      }
    }
  }
  Tensor r = op_output({c, oh, ow}, std::move(out), x.requires_grad());
  detail::maybe_record(r, [x, argmax](const std::vector<double>& g, GradTape::GradStore& s) {
    auto& gx = detail::grad_slot(s, x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[(*argmax)[i]] += g[i];
  });
  return r;
}

inline Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 3) throw DimensionError("global_avg_pool: need [CxHxW]");
  const std::size_t c = x.shape()[0], n = x.shape()[1] * x.shape()[2];
  std::vector<double> out(c);
  const auto dx = x.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += dx[ch * n + i];
    out[ch] = acc / static_cast<double>(n);
  }
  Tensor r = op_output({c}, std::move(out), x.requires_grad());
  detail::maybe_record(r, [x, c, n](const std::vector<double>& g, GradTape::GradStore& s) {
    auto& gx = detail::grad_slot(s, x);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double gv = g[ch] / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) gx[ch * n + i] += gv;
    }
  });
  return r;
}

// ---------------------------------------------------------------------------
// Attention-specific ops. Masked keys are excluded outright (the exact limit
// of -inf logits) and row sums use canonical_sum, so outputs are bit-stable
// under position permutation and appended masked padding.

/// Row-softmax over scores [SxS]; key_mask[k] == 0 excludes column k.
/// A row with no admissible key yields all zeros.
inline Tensor attention_probs(const Tensor& scores, const std::vector<std::uint8_t>& key_mask) {
  if (scores.rank() != 2 || scores.shape()[0] != scores.shape()[1])
    throw DimensionError("attention_probs: need square [SxS] scores");
  const std::size_t sN = scores.shape()[0];
  if (key_mask.size() != sN) throw DimensionError("attention_probs: mask length mismatch");
  std::vector<double> out(sN * sN, 0.0);
  std::vector<double> terms;
  const auto dx = scores.data();
  for (std::size_t i = 0; i < sN; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < sN; ++k)
      if (key_mask[k]) mx = std::max(mx, dx[i * sN + k]);
    if (!std::isfinite(mx)) continue;  // fully masked row
    terms.clear();
    for (std::size_t k = 0; k < sN; ++k) {
      if (!key_mask[k]) continue;
      const double e = std::exp(dx[i * sN + k] - mx);
      out[i * sN + k] = e;
      terms.push_back(e);
    }
    const double denom = canonical_sum(terms);
    for (std::size_t k = 0; k < sN; ++k)
      if (key_mask[k]) out[i * sN + k] /= denom;
  }
  Tensor r = op_output(scores.shape(), std::move(out), scores.requires_grad());
  detail::maybe_record(r, [scores, r, sN](const std::vector<double>& g,
                                          GradTape::GradStore& s) {
    const auto p = r.data();
    auto& gx = detail::grad_slot(s, scores);
    for (std::size_t i = 0; i < sN; ++i) {
      double dot = 0.0;
      for (std::size_t k = 0; k < sN; ++k) dot += g[i * sN + k] * p[i * sN + k];
      for (std::size_t k = 0; k < sN; ++k) {
        const std::size_t ix = i * sN + k;
        gx[ix] += p[ix] * (g[ix] - dot);
      }
    }
  });
  return r;
}

/// probs [SxS] . values [SxD] with a canonical inner sum over keys.
inline Tensor attend(const Tensor& probs, const Tensor& values) {
  if (probs.rank() != 2 || values.rank() != 2 || probs.shape()[1] != values.shape()[0])
    throw DimensionError("attend: shape mismatch");
  const std::size_t sN = probs.shape()[0], d = values.shape()[1];
  std::vector<double> out(sN * d);
  std::vector<double> terms(sN);
  const auto dp = probs.data(), dv = values.data();
  for (std::size_t i = 0; i < sN; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      terms.assign(sN, 0.0);
      for (std::size_t k = 0; k < sN; ++k) terms[k] = dp[i * sN + k] * dv[k * d + j];
      out[i * d + j] = canonical_sum(terms);
      terms.resize(sN);
    }
  }
  Tensor r = op_output({sN, d}, std::move(out),
                       probs.requires_grad() || values.requires_grad());
  detail::maybe_record(r, [probs, values, sN, d](const std::vector<double>& g,
                                                 GradTape::GradStore& s) {
    const auto dp = probs.data(), dv = values.data();
    if (probs.requires_grad()) {
      auto& gp = detail::grad_slot(s, probs);
      for (std::size_t i = 0; i < sN; ++i)
        for (std::size_t k = 0; k < sN; ++k) {
          double acc = 0.0;
          for (std::size_t j = 0; j < d; ++j) acc += g[i * d + j] * dv[k * d + j];
          gp[i * sN + k] += acc;
        }
    }
    if (values.requires_grad()) {
      auto& gv = detail::grad_slot(s, values);
      for (std::size_t k = 0; k < sN; ++k)
        for (std::size_t i = 0; i < sN; ++i) {
          const double pv = dp[i * sN + k];
          if (pv == 0.0) continue;
          for (std::size_t j = 0; j < d; ++j) gv[k * d + j] += pv * g[i * d + j];
        }
    }
  });
  return r;
}

}  // namespace consent
