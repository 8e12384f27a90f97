#pragma once

// Differentiable tensor operations recorded on a Tape.
//
// Layout conventions: feature maps are C×H×W; "token" matrices are HW×C with
// one row per pixel; masks are H×W or flattened [HW].

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "aenet/autodiff.hpp"
#include "aenet/tensor.hpp"

namespace aenet {

inline constexpr double kCosineEps = 1e-8;
inline constexpr double kMinMaxEps = 1e-7;
inline constexpr double kLayerNormEps = 1e-5;

namespace kernel {

template <typename T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// c += a[m×k] · b[k×n], all row-major.
template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  using Idx = Eigen::Index;
  Eigen::Map<const RowMajor<T>> A(a, static_cast<Idx>(m), static_cast<Idx>(k));
  Eigen::Map<const RowMajor<T>> B(b, static_cast<Idx>(k), static_cast<Idx>(n));
  Eigen::Map<RowMajor<T>> C(c, static_cast<Idx>(m), static_cast<Idx>(n));
  C.noalias() += A * B;
}

// a[m×k] · b[n×k]ᵀ
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  using Idx = Eigen::Index;
  Tensor<T> c({a.dim(0), b.dim(0)});
  Eigen::Map<const RowMajor<T>> A(a.data(), static_cast<Idx>(a.dim(0)), static_cast<Idx>(a.dim(1)));
  Eigen::Map<const RowMajor<T>> B(b.data(), static_cast<Idx>(b.dim(0)), static_cast<Idx>(b.dim(1)));
  Eigen::Map<RowMajor<T>> C(c.data(), static_cast<Idx>(c.dim(0)), static_cast<Idx>(c.dim(1)));
  C.noalias() = A * B.transpose();
  return c;
}

// a[k×m]ᵀ · b[k×n]
template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  using Idx = Eigen::Index;
  Tensor<T> c({a.dim(1), b.dim(1)});
  Eigen::Map<const RowMajor<T>> A(a.data(), static_cast<Idx>(a.dim(0)), static_cast<Idx>(a.dim(1)));
  Eigen::Map<const RowMajor<T>> B(b.data(), static_cast<Idx>(b.dim(0)), static_cast<Idx>(b.dim(1)));
  Eigen::Map<RowMajor<T>> C(c.data(), static_cast<Idx>(c.dim(0)), static_cast<Idx>(c.dim(1)));
  C.noalias() = A.transpose() * B;
  return c;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  Tensor<T> c({a.dim(0), b.dim(1)});
  gemm(a.data(), b.data(), c.data(), a.dim(0), a.dim(1), b.dim(1));
  return c;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.ndim() != 2) throw DimensionError("transpose: expected matrix, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor<T> t({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t[j * m + i] = a[i * n + j];
  return t;
}

}  // namespace kernel

namespace detail {

template <typename T, typename Fwd, typename Deriv>
Var<T> unary(const Var<T>& x, Fwd fwd, Deriv deriv) {
  auto& tape = *x.tape();
  const auto& xv = x.value();
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = fwd(xv[i]);
  const std::size_t xi = x.id();
  return tape.record(std::move(y), x.requires_grad(), [xi, deriv](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& xv = t.value(xi);
    const auto& yv = t.value(self);
    Tensor<T> dx(xv.shape());
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = g[i] * deriv(xv[i], yv[i]);
    t.accumulate(xi, dx);
  });
}

// Folds a per-element predicate into the tape's branch signature.
template <typename T, typename Pred>
void note_pattern(const Var<T>& x, Pred pred) {
  const auto& v = x.value();
  std::uint64_t word = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    word = (word << 1) | (pred(v[i]) ? 1U : 0U);
    if (i % 64 == 63 || i + 1 == v.size()) {
      x.tape()->note_branch(word);
      word = 0;
    }
  }
}

template <typename T>
void require_matrix(const Tensor<T>& t, const char* what) {
  if (t.ndim() != 2) throw DimensionError(std::string(what) + ": expected matrix, got " +
                                          shape_str(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  auto& tape = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.value()[i];
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record(std::move(y), a.requires_grad() || b.requires_grad(),
                     [ai, bi](Tape<T>& t, std::size_t self) {
                       const auto& g = t.grad(self);
                       t.accumulate(ai, g);
                       t.accumulate(bi, g);
                     });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  auto& tape = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record(std::move(y), a.requires_grad() || b.requires_grad(),
                     [ai, bi](Tape<T>& t, std::size_t self) {
                       const auto& g = t.grad(self);
                       t.accumulate(ai, g);
                       Tensor<T> ng(g.shape());
                       for (std::size_t i = 0; i < g.size(); ++i) ng[i] = -g[i];
                       t.accumulate(bi, ng);
                     });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  auto& tape = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record(std::move(y), a.requires_grad() || b.requires_grad(),
                     [ai, bi](Tape<T>& t, std::size_t self) {
                       const auto& g = t.grad(self);
                       const auto& av = t.value(ai);
                       const auto& bv = t.value(bi);
                       Tensor<T> da(g.shape()), db(g.shape());
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         da[i] = g[i] * bv[i];
                         db[i] = g[i] * av[i];
                       }
                       t.accumulate(ai, da);
                       t.accumulate(bi, db);
                     });
}

// Elementwise a / b; b must be nonzero.
template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  auto& tape = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "div");
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] /= b.value()[i];
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record(std::move(y), a.requires_grad() || b.requires_grad(),
                     [ai, bi](Tape<T>& t, std::size_t self) {
                       const auto& g = t.grad(self);
                       const auto& bv = t.value(bi);
                       const auto& yv = t.value(self);
                       Tensor<T> da(g.shape()), db(g.shape());
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         da[i] = g[i] / bv[i];
                         db[i] = -g[i] * yv[i] / bv[i];
                       }
                       t.accumulate(ai, da);
                       t.accumulate(bi, db);
                     });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  return detail::unary(a, [s](T x) { return s * x; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  return detail::unary(a, [s](T x) { return x + s; }, [](T, T) { return T{1}; });
}

// 1 - a
template <typename T>
Var<T> one_minus(const Var<T>& a) {
  return detail::unary(a, [](T x) { return T{1} - x; }, [](T, T) { return T{-1}; });
}

// s · a with s a single-element Var.
template <typename T>
Var<T> scale_by(const Var<T>& a, const Var<T>& s) {
  auto& tape = same_tape(a, s);
  if (s.size() != 1) throw DimensionError("scale_by: scale must have one element");
  const T sv = s.value()[0];
  Tensor<T> y = a.value();
  for (auto& v : y.values()) v *= sv;
  const std::size_t ai = a.id(), si = s.id();
  return tape.record(std::move(y), a.requires_grad() || s.requires_grad(),
                     [ai, si](Tape<T>& t, std::size_t self) {
                       const auto& g = t.grad(self);
                       const auto& av = t.value(ai);
                       const T sv = t.value(si)[0];
                       Tensor<T> da(g.shape());
                       T ds = 0;
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         da[i] = g[i] * sv;
                         ds += g[i] * av[i];
                       }
                       t.accumulate(ai, da);
                       Tensor<T> dsv(t.value(si).shape(), ds);
                       t.accumulate(si, dsv);
                     });
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

// Subgradient at 0 is 0.
template <typename T>
Var<T> relu(const Var<T>& x) {
  detail::note_pattern(x, [](T v) { return v > T{0}; });
  return detail::unary(
      x, [](T v) { return v > T{0} ? v : T{0}; }, [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary(
      x,
      [](T v) {
        if (v >= 0) return T{1} / (T{1} + std::exp(-v));
        const T e = std::exp(v);
        return e / (T{1} + e);
      },
      [](T, T y) { return y * (T{1} - y); });
}

// Natural log; inputs must be positive.
template <typename T>
Var<T> log(const Var<T>& x) {
  return detail::unary(x, [](T v) { return std::log(v); }, [](T v, T) { return T{1} / v; });
}

template <typename T>
Var<T> exp(const Var<T>& x) {
  return detail::unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

// Gradient passes for lo <= x <= hi.
template <typename T>
Var<T> clamp(const Var<T>& x, T lo, T hi) {
  detail::note_pattern(x, [lo](T v) { return v >= lo; });
  detail::note_pattern(x, [hi](T v) { return v <= hi; });
  return detail::unary(
      x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T{1} : T{0}; });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum(const Var<T>& x) {
  auto& tape = *x.tape();
  T s = 0;
  for (T v : x.value().values()) s += v;
  const std::size_t xi = x.id();
  return tape.record(Tensor<T>::scalar(s), x.requires_grad(), [xi](Tape<T>& t, std::size_t self) {
    const T g = t.grad(self)[0];
    t.accumulate(xi, Tensor<T>(t.value(xi).shape(), g));
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  if (x.size() == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(x), T{1} / static_cast<T>(x.size()));
}

// ---------------------------------------------------------------------------
// Linear algebra and shape manipulation
// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  auto& tape = same_tape(a, b);
  Tensor<T> y = kernel::matmul(a.value(), b.value());
  const std::size_t ai = a.id(), bi = b.id();
  const bool ga = a.requires_grad(), gb = b.requires_grad();
  return tape.record(std::move(y), ga || gb, [ai, bi, ga, gb](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (ga) t.accumulate(ai, kernel::matmul_nt(g, t.value(bi)));
    if (gb) t.accumulate(bi, kernel::matmul_tn(t.value(ai), g));
  });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  auto& tape = *a.tape();
  const std::size_t ai = a.id();
  return tape.record(kernel::transpose(a.value()), a.requires_grad(),
                     [ai](Tape<T>& t, std::size_t self) {
                       t.accumulate(ai, kernel::transpose(t.grad(self)));
                     });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  auto& tape = *a.tape();
  const std::size_t ai = a.id();
  return tape.record(a.value().reshaped(std::move(shape)), a.requires_grad(),
                     [ai](Tape<T>& t, std::size_t self) {
                       t.accumulate(ai, t.grad(self).reshaped(t.value(ai).shape()));
                     });
}

// Concatenate along axis 0; trailing dims must agree.
template <typename T>
Var<T> concat0(const Var<T>& a, const Var<T>& b) {
  auto& tape = same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.ndim() == 0 || av.ndim() != bv.ndim() ||
      !std::equal(av.shape().begin() + 1, av.shape().end(), bv.shape().begin() + 1))
    throw DimensionError("concat: trailing shapes disagree " + shape_str(av.shape()) + " vs " +
                         shape_str(bv.shape()));
  Shape out = av.shape();
  out[0] += bv.dim(0);
  Tensor<T> y(out);
  std::copy(av.data(), av.data() + av.size(), y.data());
  std::copy(bv.data(), bv.data() + bv.size(), y.data() + av.size());
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record(std::move(y), a.requires_grad() || b.requires_grad(),
                     [ai, bi](Tape<T>& t, std::size_t self) {
                       const auto& g = t.grad(self);
                       const auto& as = t.value(ai).shape();
                       const auto& bs = t.value(bi).shape();
                       const std::size_t na = shape_numel(as);
                       t.accumulate(ai, Tensor<T>(as, std::span<const T>(g.data(), na)));
                       t.accumulate(bi, Tensor<T>(bs, std::span<const T>(g.data() + na,
                                                                        g.size() - na)));
                     });
}

// Channel stacking of C1×H×W and C2×H×W feature maps, `a` first.
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  if (a.value().ndim() != 3 || b.value().ndim() != 3)
    throw DimensionError("concat_channels: expected C×H×W operands");
  if (a.value().dim(1) != b.value().dim(1) || a.value().dim(2) != b.value().dim(2))
    throw DimensionError("concat_channels: spatial mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  return concat0(a, b);
}

// Rows [begin, end) along axis 0.
template <typename T>
Var<T> slice0(const Var<T>& a, std::size_t begin, std::size_t end) {
  auto& tape = *a.tape();
  const auto& av = a.value();
  if (av.ndim() == 0 || begin > end || end > av.dim(0))
    throw DimensionError("slice0: range out of bounds");
  Shape out = av.shape();
  out[0] = end - begin;
  const std::size_t stride = av.dim(0) ? av.size() / av.dim(0) : 0;
  Tensor<T> y(out, std::span<const T>(av.data() + begin * stride, (end - begin) * stride));
  const std::size_t ai = a.id();
  return tape.record(std::move(y), a.requires_grad(),
                     [ai, begin, stride](Tape<T>& t, std::size_t self) {
                       const auto& g = t.grad(self);
                       Tensor<T> da(t.value(ai).shape());
                       std::copy(g.data(), g.data() + g.size(), da.data() + begin * stride);
                       t.accumulate(ai, da);
                     });
}

template <typename T>
Var<T> concat_cols(const Var<T>& a, const Var<T>& b) {
  auto& tape = same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::require_matrix(av, "concat_cols");
  detail::require_matrix(bv, "concat_cols");
  if (av.dim(0) != bv.dim(0)) throw DimensionError("concat_cols: row counts disagree");
  const std::size_t n = av.dim(0), c1 = av.dim(1), c2 = bv.dim(1);
  Tensor<T> y({n, c1 + c2});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(av.data() + i * c1, av.data() + (i + 1) * c1, y.data() + i * (c1 + c2));
    std::copy(bv.data() + i * c2, bv.data() + (i + 1) * c2, y.data() + i * (c1 + c2) + c1);
  }
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record(std::move(y), a.requires_grad() || b.requires_grad(),
                     [ai, bi, n, c1, c2](Tape<T>& t, std::size_t self) {
                       const auto& g = t.grad(self);
                       Tensor<T> da({n, c1}), db({n, c2});
                       for (std::size_t i = 0; i < n; ++i) {
                         const T* row = g.data() + i * (c1 + c2);
                         std::copy(row, row + c1, da.data() + i * c1);
                         std::copy(row + c1, row + c1 + c2, db.data() + i * c2);
                       }
                       t.accumulate(ai, da);
                       t.accumulate(bi, db);
                     });
}

template <typename T>
Var<T> slice_cols(const Var<T>& a, std::size_t begin, std::size_t end) {
  auto& tape = *a.tape();
  const auto& av = a.value();
  detail::require_matrix(av, "slice_cols");
  if (begin > end || end > av.dim(1)) throw DimensionError("slice_cols: range out of bounds");
  const std::size_t n = av.dim(0), c = av.dim(1), w = end - begin;
  Tensor<T> y({n, w});
  for (std::size_t i = 0; i < n; ++i)
    std::copy(av.data() + i * c + begin, av.data() + i * c + end, y.data() + i * w);
  const std::size_t ai = a.id();
  return tape.record(std::move(y), a.requires_grad(),
                     [ai, n, c, w, begin](Tape<T>& t, std::size_t self) {
                       const auto& g = t.grad(self);
                       Tensor<T> da({n, c});
                       for (std::size_t i = 0; i < n; ++i)
                         std::copy(g.data() + i * w, g.data() + (i + 1) * w,
                                   da.data() + i * c + begin);
                       t.accumulate(ai, da);
                     });
}

template <typename T>
Var<T> gather_rows(const Var<T>& a, std::vector<std::size_t> rows) {
  auto& tape = *a.tape();
  const auto& av = a.value();
  detail::require_matrix(av, "gather_rows");
  const std::size_t c = av.dim(1);
  Tensor<T> y({rows.size(), c});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= av.dim(0)) throw DimensionError("gather_rows: row index out of range");
    std::copy(av.data() + rows[r] * c, av.data() + (rows[r] + 1) * c, y.data() + r * c);
  }
  const std::size_t ai = a.id();
  return tape.record(std::move(y), a.requires_grad(),
                     [ai, c, rows = std::move(rows)](Tape<T>& t, std::size_t self) {
                       const auto& g = t.grad(self);
                       Tensor<T> da(t.value(ai).shape());
                       for (std::size_t r = 0; r < rows.size(); ++r)
                         for (std::size_t j = 0; j < c; ++j) da[rows[r] * c + j] += g[r * c + j];
                       t.accumulate(ai, da);
                     });
}

// Repeat a length-c vector into n rows.
template <typename T>
Var<T> broadcast_rows(const Var<T>& p, std::size_t n) {
  auto& tape = *p.tape();
  const auto& pv = p.value();
  const std::size_t c = pv.size();
  Tensor<T> y({n, c});
  for (std::size_t i = 0; i < n; ++i) std::copy(pv.data(), pv.data() + c, y.data() + i * c);
  const std::size_t pi = p.id();
  return tape.record(std::move(y), p.requires_grad(), [pi, n, c](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    Tensor<T> dp(t.value(pi).shape());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) dp[j] += g[i * c + j];
    t.accumulate(pi, dp);
  });
}

// a[n×c] + b[c] broadcast over rows.
template <typename T>
Var<T> add_rowvec(const Var<T>& a, const Var<T>& b) {
  auto& tape = same_tape(a, b);
  const auto& av = a.value();
  detail::require_matrix(av, "add_rowvec");
  const std::size_t n = av.dim(0), c = av.dim(1);
  if (b.size() != c) throw DimensionError("add_rowvec: bias length mismatch");
  Tensor<T> y = av;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] += b.value()[j];
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record(std::move(y), a.requires_grad() || b.requires_grad(),
                     [ai, bi, n, c](Tape<T>& t, std::size_t self) {
                       const auto& g = t.grad(self);
                       t.accumulate(ai, g);
                       Tensor<T> db(t.value(bi).shape());
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < c; ++j) db[j] += g[i * c + j];
                       t.accumulate(bi, db);
                     });
}

// Σ_i w[i] · x[i, :] with constant weights.
template <typename T>
Var<T> weighted_sum_rows(const Var<T>& x, const Tensor<T>& w) {
  auto& tape = *x.tape();
  const auto& xv = x.value();
  detail::require_matrix(xv, "weighted_sum_rows");
  const std::size_t n = xv.dim(0), c = xv.dim(1);
  if (w.size() != n)
    throw DimensionError("weighted_sum_rows: " + std::to_string(w.size()) + " weights for " +
                         std::to_string(n) + " rows");
  Tensor<T> y({c});
  for (std::size_t i = 0; i < n; ++i) {
    const T wi = w[i];
    if (wi == T{0}) continue;
    for (std::size_t j = 0; j < c; ++j) y[j] += wi * xv[i * c + j];
  }
  const std::size_t xi = x.id();
  return tape.record(std::move(y), x.requires_grad(), [xi, w, n, c](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    Tensor<T> dx({n, c});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) dx[i * c + j] = w[i] * g[j];
    t.accumulate(xi, dx);
  });
}

// C×H×W feature map to HW×C tokens.
template <typename T>
Var<T> channels_to_tokens(const Var<T>& x) {
  auto& tape = *x.tape();
  const auto& xv = x.value();
  if (xv.ndim() != 3) throw DimensionError("channels_to_tokens: expected C×H×W");
  const std::size_t c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  const std::size_t hw = h * w;
  Tensor<T> y({hw, c});
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t p = 0; p < hw; ++p) y[p * c + k] = xv[k * hw + p];
  const std::size_t xi = x.id();
  return tape.record(std::move(y), x.requires_grad(), [xi, c, h, w](Tape<T>& t, std::size_t self) {
    t.accumulate(xi, kernel::transpose(t.grad(self)).reshaped({c, h, w}));
  });
}

// HW×C tokens back to a C×H×W feature map.
template <typename T>
Var<T> tokens_to_channels(const Var<T>& x, std::size_t h, std::size_t w) {
  auto& tape = *x.tape();
  const auto& xv = x.value();
  detail::require_matrix(xv, "tokens_to_channels");
  if (xv.dim(0) != h * w) throw DimensionError("tokens_to_channels: row count is not H·W");
  const std::size_t c = xv.dim(1);
  Tensor<T> y = kernel::transpose(xv).reshaped({c, h, w});
  const std::size_t xi = x.id();
  return tape.record(std::move(y), x.requires_grad(), [xi, c, h, w](Tape<T>& t, std::size_t self) {
    t.accumulate(xi, kernel::transpose(t.grad(self).reshaped({c, h * w})));
  });
}

template <typename T>
Var<T> upsample_nearest(const Var<T>& x, std::size_t factor) {
  auto& tape = *x.tape();
  const auto& xv = x.value();
  if (xv.ndim() != 3 || factor == 0) throw DimensionError("upsample_nearest: expected C×H×W");
  const std::size_t c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  Tensor<T> y({c, h * factor, w * factor});
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < h * factor; ++i)
      for (std::size_t j = 0; j < w * factor; ++j) y.at(k, i, j) = xv.at(k, i / factor, j / factor);
  const std::size_t xi = x.id();
  return tape.record(std::move(y), x.requires_grad(),
                     [xi, c, h, w, factor](Tape<T>& t, std::size_t self) {
                       const auto& g = t.grad(self);
                       Tensor<T> dx({c, h, w});
                       for (std::size_t k = 0; k < c; ++k)
                         for (std::size_t i = 0; i < h * factor; ++i)
                           for (std::size_t j = 0; j < w * factor; ++j)
                             dx.at(k, i / factor, j / factor) += g.at(k, i, j);
                       t.accumulate(xi, dx);
                     });
}

template <typename T>
Var<T> avgpool(const Var<T>& x, std::size_t factor) {
  auto& tape = *x.tape();
  const auto& xv = x.value();
  if (xv.ndim() != 3 || factor == 0) throw DimensionError("avgpool: expected C×H×W");
  const std::size_t c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  if (h % factor || w % factor) throw DimensionError("avgpool: size not divisible by factor");
  const std::size_t oh = h / factor, ow = w / factor;
  const T inv = T{1} / static_cast<T>(factor * factor);
  Tensor<T> y({c, oh, ow});
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) y.at(k, i / factor, j / factor) += inv * xv.at(k, i, j);
  const std::size_t xi = x.id();
  return tape.record(std::move(y), x.requires_grad(),
                     [xi, c, h, w, factor, inv](Tape<T>& t, std::size_t self) {
                       const auto& g = t.grad(self);
                       Tensor<T> dx({c, h, w});
                       for (std::size_t k = 0; k < c; ++k)
                         for (std::size_t i = 0; i < h; ++i)
                           for (std::size_t j = 0; j < w; ++j)
                             dx.at(k, i, j) = inv * g.at(k, i / factor, j / factor);
                       t.accumulate(xi, dx);
                     });
}

// ---------------------------------------------------------------------------
// Normalizations and similarities
// ---------------------------------------------------------------------------

// Softmax along the last axis (a 1-D input is one row). Max-subtracted.
template <typename T>
Var<T> softmax(const Var<T>& x) {
  auto& tape = *x.tape();
  const auto& xv = x.value();
  if (xv.ndim() == 0 || xv.size() == 0) throw DimensionError("softmax: empty input");
  const std::size_t n = xv.shape().back();
  const std::size_t rows = xv.size() / n;
  Tensor<T> y(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * n;
    T* out = y.data() + r * n;
    const T mx = *std::max_element(in, in + n);
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) s += (out[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) out[j] /= s;
  }
  const std::size_t xi = x.id();
  return tape.record(std::move(y), x.requires_grad(), [xi, rows, n](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& yv = t.value(self);
    Tensor<T> dx(yv.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * yv[r * n + j];
      for (std::size_t j = 0; j < n; ++j) dx[r * n + j] = yv[r * n + j] * (g[r * n + j] - dot);
    }
    t.accumulate(xi, dx);
  });
}

// Per-row layer norm over the channel axis with per-channel affine.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  T eps = static_cast<T>(kLayerNormEps)) {
  auto& tape = same_tape(x, gamma);
  const auto& xv = x.value();
  detail::require_matrix(xv, "layer_norm");
  const std::size_t n = xv.dim(0), c = xv.dim(1);
  if (gamma.size() != c || beta.size() != c) throw DimensionError("layer_norm: affine length");
  Tensor<T> xhat({n, c}), y({n, c});
  std::vector<T> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = xv.data() + i * c;
    T mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<T>(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(c);
    inv_std[i] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (row[j] - mu) * inv_std[i];
      y[i * c + j] = gamma.value()[j] * xhat[i * c + j] + beta.value()[j];
    }
  }
  const std::size_t xi = x.id(), gi = gamma.id(), bi = beta.id();
  const bool req = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  return tape.record(
      std::move(y), req,
      [xi, gi, bi, n, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& gv = t.value(gi);
        Tensor<T> dx({n, c}), dg({c}), db({c});
        std::vector<T> dxhat(c);
        for (std::size_t i = 0; i < n; ++i) {
          T m1 = 0, m2 = 0;
          for (std::size_t j = 0; j < c; ++j) {
            const T gij = g[i * c + j];
            dg[j] += gij * xhat[i * c + j];
            db[j] += gij;
            dxhat[j] = gij * gv[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xhat[i * c + j];
          }
          m1 /= static_cast<T>(c);
          m2 /= static_cast<T>(c);
          for (std::size_t j = 0; j < c; ++j)
            dx[i * c + j] = inv_std[i] * (dxhat[j] - m1 - xhat[i * c + j] * m2);
        }
        t.accumulate(xi, dx);
        t.accumulate(gi, dg);
        t.accumulate(bi, db);
      });
}

// Cosine of every row of x[n×c] against p[c]:
//   x_i·p / (‖x_i‖‖p‖ + 1e-8), clamped to [-1, 1]. Output shape [n].
// Never forms pairwise similarities; working memory is O(n).
template <typename T>
Var<T> row_cosine(const Var<T>& x, const Var<T>& p) {
  auto& tape = same_tape(x, p);
  const auto& xv = x.value();
  const auto& pv = p.value();
  detail::require_matrix(xv, "row_cosine");
  const std::size_t n = xv.dim(0), c = xv.dim(1);
  if (pv.size() != c) throw DimensionError("row_cosine: prototype length mismatch");
  const T eps = static_cast<T>(kCosineEps);
  T pn = 0;
  for (std::size_t j = 0; j < c; ++j) pn += pv[j] * pv[j];
  pn = std::sqrt(pn);
  Tensor<T> y({n});
  for (std::size_t i = 0; i < n; ++i) {
    T d = 0, xn = 0;
    for (std::size_t j = 0; j < c; ++j) {
      d += xv[i * c + j] * pv[j];
      xn += xv[i * c + j] * xv[i * c + j];
    }
    const T raw = d / (std::sqrt(xn) * pn + eps);
    if (raw < T{-1} || raw > T{1}) tape.note_branch(i);
    y[i] = std::clamp(raw, T{-1}, T{1});
  }
  const std::size_t xi = x.id(), pi = p.id();
  const bool gx = x.requires_grad(), gp = p.requires_grad();
  return tape.record(std::move(y), gx || gp, [xi, pi, n, c, eps, gx, gp](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& xv = t.value(xi);
    const auto& pv = t.value(pi);
    T pn = 0;
    for (std::size_t j = 0; j < c; ++j) pn += pv[j] * pv[j];
    pn = std::sqrt(pn);
    Tensor<T> dx({n, c}), dp(pv.shape());
    for (std::size_t i = 0; i < n; ++i) {
      if (g[i] == T{0}) continue;
      const T* row = xv.data() + i * c;
      T d = 0, xn = 0;
      for (std::size_t j = 0; j < c; ++j) {
        d += row[j] * pv[j];
        xn += row[j] * row[j];
      }
      xn = std::sqrt(xn);
      const T den = xn * pn + eps;
      const T raw = d / den;
      if (raw < T{-1} || raw > T{1}) continue;
      const T k = g[i] / den;
      const T kk = g[i] * d / (den * den);
      for (std::size_t j = 0; j < c; ++j) {
        if (gx) dx[i * c + j] = k * pv[j] - (xn > 0 ? kk * pn * row[j] / xn : T{0});
        if (gp) dp[j] += k * row[j] - (pn > 0 ? kk * xn * pv[j] / pn : T{0});
      }
    }
    if (gx) t.accumulate(xi, dx);
    if (gp) t.accumulate(pi, dp);
  });
}

// Scalar cosine of two length-c vectors.
template <typename T>
Var<T> cosine(const Var<T>& u, const Var<T>& v) {
  const std::size_t c = u.size();
  if (v.size() != c) throw DimensionError("cosine: length mismatch");
  return reshape(row_cosine(reshape(u, {1, c}), v), {});
}

// (x - min) / (max - min + 1e-7); constant input maps to zeros.
template <typename T>
Var<T> minmax_norm(const Var<T>& x) {
  auto& tape = *x.tape();
  const auto& xv = x.value();
  if (xv.size() == 0) throw DimensionError("minmax_norm: empty input");
  const auto [mn_it, mx_it] = std::minmax_element(xv.data(), xv.data() + xv.size());
  const std::size_t imin = static_cast<std::size_t>(mn_it - xv.data());
  const std::size_t imax = static_cast<std::size_t>(mx_it - xv.data());
  tape.note_branch(imin);
  tape.note_branch(imax);
  const T mn = *mn_it;
  const T range = *mx_it - mn + static_cast<T>(kMinMaxEps);
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = (xv[i] - mn) / range;
  const std::size_t xi = x.id();
  return tape.record(std::move(y), x.requires_grad(),
                     [xi, imin, imax, range](Tape<T>& t, std::size_t self) {
                       const auto& g = t.grad(self);
                       const auto& yv = t.value(self);
                       Tensor<T> dx(g.shape());
                       T gsum = 0, s = 0;
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         dx[i] = g[i] / range;
                         gsum += g[i];
                         s += g[i] * yv[i];  // Σ g·(x - min)/range
                       }
                       s /= range;
                       dx[imin] += -gsum / range + s;
                       dx[imax] -= s;
                       t.accumulate(xi, dx);
                     });
}

}  // namespace aenet
