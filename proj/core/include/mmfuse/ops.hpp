#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "mmfuse/gemm.hpp"
#include "mmfuse/rng.hpp"
#include "mmfuse/tape.hpp"
#include "mmfuse/tensor.hpp"

namespace mmfuse::ops {

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

template <typename T>
bool track(const Tape<T>& tape, std::initializer_list<Tensor<T>> inputs) {
  if (!tape.recording()) return false;
  for (const auto& t : inputs)
    if (t.requires_grad()) return true;
  return false;
}

// Softmax over contiguous rows of length n, in place, with max subtraction.
// Vectorized exp keeps this off the critical path of attention; traversal
// order is fixed, so results are reproducible run to run.
template <typename T>
void softmax_rows_inplace(T* x, int64_t rows, int64_t n) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  for (int64_t r = 0; r < rows; ++r) {
    Eigen::Map<Arr> row(x + r * n, n);
    row = (row - row.maxCoeff()).exp();
    row /= row.sum();
  }
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2,
                  "matmul: expects rank-2 inputs, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  detail::require(a.dim(1) == b.dim(0),
                  "matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out = Tensor<T>::zeros({m, n});
  mmfuse::detail::gemm(false, false, m, n, k, T(1), a.data(), k, b.data(), n, T(0), out.data(), n);
  if (detail::track(tape, {a, b})) {
    out.set_requires_grad(true);
    tape.record("matmul", out, [a, b, out, m, n, k]() {
      const T* g = out.grad_data();
      if (a.requires_grad())
        mmfuse::detail::gemm(false, true, m, k, n, T(1), g, n, b.data(), n, T(1), a.grad_data(), k);
      if (b.requires_grad())
        mmfuse::detail::gemm(true, false, k, n, m, T(1), a.data(), k, g, n, T(1), b.grad_data(), n);
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  if (detail::track(tape, {a, b})) {
    out.set_requires_grad(true);
    tape.record("add", out, [a, b, out, n]() {
      const T* g = out.grad_data();
      if (a.requires_grad()) {
        T* ga = a.grad_data();
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        T* gb = b.grad_data();
        for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  if (detail::track(tape, {a, b})) {
    out.set_requires_grad(true);
    tape.record("sub", out, [a, b, out, n]() {
      const T* g = out.grad_data();
      if (a.requires_grad()) {
        T* ga = a.grad_data();
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        T* gb = b.grad_data();
        for (int64_t i = 0; i < n; ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  if (detail::track(tape, {a, b})) {
    out.set_requires_grad(true);
    tape.record("mul", out, [a, b, out, n]() {
      const T* g = out.grad_data();
      if (a.requires_grad()) {
        T* ga = a.grad_data();
        const T* pb2 = b.data();
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * pb2[i];
      }
      if (b.requires_grad()) {
        T* gb = b.grad_data();
        const T* pa2 = a.data();
        for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * pa2[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T s) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * s;
  if (detail::track(tape, {a})) {
    out.set_requires_grad(true);
    tape.record("scale", out, [a, out, s, n]() {
      const T* g = out.grad_data();
      T* ga = a.grad_data();
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * s;
    });
  }
  return out;
}

// x: [R x C], bias: [C] or [1 x C], added to every row.
template <typename T>
Tensor<T> add_bias(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& bias) {
  detail::require(x.rank() == 2, "add_bias: x must be rank-2, got " + shape_str(x.shape()));
  int64_t rows = x.dim(0), cols = x.dim(1);
  detail::require(bias.numel() == cols,
                  "add_bias: bias length " + std::to_string(bias.numel()) + " vs columns " + std::to_string(cols));
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  const T* pb = bias.data();
  T* po = out.data();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) po[r * cols + c] = px[r * cols + c] + pb[c];
  if (detail::track(tape, {x, bias})) {
    out.set_requires_grad(true);
    tape.record("add_bias", out, [x, bias, out, rows, cols]() {
      const T* g = out.grad_data();
      if (x.requires_grad()) {
        T* gx = x.grad_data();
        for (int64_t i = 0; i < rows * cols; ++i) gx[i] += g[i];
      }
      if (bias.requires_grad()) {
        T* gb = bias.grad_data();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose(Tape<T>& tape, const Tensor<T>& a) {
  detail::require(a.rank() == 2, "transpose: expects rank-2 input, got " + shape_str(a.shape()));
  int64_t m = a.dim(0), n = a.dim(1);
  Tensor<T> out = Tensor<T>::zeros({n, m});
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) po[j * m + i] = pa[i * n + j];
  if (detail::track(tape, {a})) {
    out.set_requires_grad(true);
    tape.record("transpose", out, [a, out, m, n]() {
      const T* g = out.grad_data();
      T* ga = a.grad_data();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& a, Shape s) {
  detail::require(shape_numel(s) == a.numel(),
                  "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(s));
  Tensor<T> out = Tensor<T>::from_vector(std::move(s), a.value_vector());
  if (detail::track(tape, {a})) {
    out.set_requires_grad(true);
    int64_t n = a.numel();
    tape.record("reshape", out, [a, out, n]() {
      const T* g = out.grad_data();
      T* ga = a.grad_data();
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> gather_rows(Tape<T>& tape, const Tensor<T>& x, std::vector<int64_t> idx) {
  detail::require(x.rank() == 2, "gather_rows: x must be rank-2, got " + shape_str(x.shape()));
  int64_t rows = x.dim(0), cols = x.dim(1);
  for (int64_t i : idx)
    detail::require(i >= 0 && i < rows, "gather_rows: index " + std::to_string(i) + " out of range");
  int64_t k = int64_t(idx.size());
  Tensor<T> out = Tensor<T>::zeros({k, cols});
  const T* px = x.data();
  T* po = out.data();
  for (int64_t r = 0; r < k; ++r)
    std::memcpy(po + r * cols, px + idx[size_t(r)] * cols, size_t(cols) * sizeof(T));
  if (detail::track(tape, {x})) {
    out.set_requires_grad(true);
    tape.record("gather_rows", out, [x, out, saved_idx = std::move(idx), cols]() {
      const T* g = out.grad_data();
      T* gx = x.grad_data();
      for (size_t r = 0; r < saved_idx.size(); ++r)
        for (int64_t c = 0; c < cols; ++c) gx[saved_idx[r] * cols + c] += g[int64_t(r) * cols + c];
    });
  }
  return out;
}

// Builds an [n x C] tensor whose rows at dst[j] come from rows[j]; every
// remaining row is the shared fill row. dst must be distinct and in range.
template <typename T>
Tensor<T> assemble_rows(Tape<T>& tape, int64_t n, const Tensor<T>& rows,
                        std::vector<int64_t> dst, const Tensor<T>& fill) {
  detail::require(rows.rank() == 2, "assemble_rows: rows must be rank-2");
  int64_t k = rows.dim(0), cols = rows.dim(1);
  detail::require(int64_t(dst.size()) == k, "assemble_rows: dst count vs rows mismatch");
  detail::require(fill.numel() == cols, "assemble_rows: fill length vs columns mismatch");
  std::vector<char> taken(size_t(n), 0);
  for (int64_t i : dst) {
    detail::require(i >= 0 && i < n, "assemble_rows: destination out of range");
    detail::require(!taken[size_t(i)], "assemble_rows: duplicate destination");
    taken[size_t(i)] = 1;
  }
  Tensor<T> out = Tensor<T>::zeros({n, cols});
  const T* pr = rows.data();
  const T* pf = fill.data();
  T* po = out.data();
  for (int64_t i = 0; i < n; ++i)
    if (!taken[size_t(i)]) std::memcpy(po + i * cols, pf, size_t(cols) * sizeof(T));
  for (int64_t j = 0; j < k; ++j)
    std::memcpy(po + dst[size_t(j)] * cols, pr + j * cols, size_t(cols) * sizeof(T));
  if (detail::track(tape, {rows, fill})) {
    out.set_requires_grad(true);
    tape.record("assemble_rows", out,
                [rows, fill, out, saved_dst = std::move(dst), saved_taken = std::move(taken), n, cols]() {
      const T* g = out.grad_data();
      if (rows.requires_grad()) {
        T* gr = rows.grad_data();
        for (size_t j = 0; j < saved_dst.size(); ++j)
          for (int64_t c = 0; c < cols; ++c) gr[int64_t(j) * cols + c] += g[saved_dst[j] * cols + c];
      }
      if (fill.requires_grad()) {
        T* gf = fill.grad_data();
        for (int64_t i = 0; i < n; ++i)
          if (!saved_taken[size_t(i)])
            for (int64_t c = 0; c < cols; ++c) gf[c] += g[i * cols + c];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_rows(Tape<T>& tape, const Tensor<T>& x, int64_t start, int64_t len) {
  detail::require(x.rank() == 2, "slice_rows: x must be rank-2");
  detail::require(start >= 0 && len > 0 && start + len <= x.dim(0), "slice_rows: range out of bounds");
  int64_t cols = x.dim(1);
  Tensor<T> out = Tensor<T>::zeros({len, cols});
  std::memcpy(out.data(), x.data() + start * cols, size_t(len * cols) * sizeof(T));
  if (detail::track(tape, {x})) {
    out.set_requires_grad(true);
    tape.record("slice_rows", out, [x, out, start, len, cols]() {
      const T* g = out.grad_data();
      T* gx = x.grad_data();
      for (int64_t i = 0; i < len * cols; ++i) gx[start * cols + i] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_cols(Tape<T>& tape, const Tensor<T>& x, int64_t start, int64_t len) {
  detail::require(x.rank() == 2, "slice_cols: x must be rank-2");
  detail::require(start >= 0 && len > 0 && start + len <= x.dim(1), "slice_cols: range out of bounds");
  int64_t rows = x.dim(0), cols = x.dim(1);
  Tensor<T> out = Tensor<T>::zeros({rows, len});
  const T* px = x.data();
  T* po = out.data();
  for (int64_t r = 0; r < rows; ++r)
    std::memcpy(po + r * len, px + r * cols + start, size_t(len) * sizeof(T));
  if (detail::track(tape, {x})) {
    out.set_requires_grad(true);
    tape.record("slice_cols", out, [x, out, start, len, rows, cols]() {
      const T* g = out.grad_data();
      T* gx = x.grad_data();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < len; ++c) gx[r * cols + start + c] += g[r * len + c];
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_rows(Tape<T>& tape, const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "concat_rows: needs at least one part");
  int64_t cols = parts[0].dim(1), rows = 0;
  for (const auto& p : parts) {
    detail::require(p.rank() == 2 && p.dim(1) == cols, "concat_rows: column mismatch");
    rows += p.dim(0);
  }
  Tensor<T> out = Tensor<T>::zeros({rows, cols});
  T* po = out.data();
  int64_t at = 0;
  for (const auto& p : parts) {
    std::memcpy(po + at * cols, p.data(), size_t(p.numel()) * sizeof(T));
    at += p.dim(0);
  }
  bool need = false;
  if (tape.recording())
    for (const auto& p : parts) need = need || p.requires_grad();
  if (need) {
    out.set_requires_grad(true);
    tape.record("concat_rows", out, [parts, out, cols]() {
      const T* g = out.grad_data();
      int64_t at2 = 0;
      for (const auto& p : parts) {
        if (p.requires_grad()) {
          T* gp = p.grad_data();
          for (int64_t i = 0; i < p.numel(); ++i) gp[i] += g[at2 * cols + i];
        }
        at2 += p.dim(0);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_cols(Tape<T>& tape, const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "concat_cols: needs at least one part");
  int64_t rows = parts[0].dim(0), cols = 0;
  for (const auto& p : parts) {
    detail::require(p.rank() == 2 && p.dim(0) == rows, "concat_cols: row mismatch");
    cols += p.dim(1);
  }
  Tensor<T> out = Tensor<T>::zeros({rows, cols});
  T* po = out.data();
  int64_t at = 0;
  for (const auto& p : parts) {
    int64_t pc = p.dim(1);
    const T* pp = p.data();
    for (int64_t r = 0; r < rows; ++r)
      std::memcpy(po + r * cols + at, pp + r * pc, size_t(pc) * sizeof(T));
    at += pc;
  }
  bool need = false;
  if (tape.recording())
    for (const auto& p : parts) need = need || p.requires_grad();
  if (need) {
    out.set_requires_grad(true);
    tape.record("concat_cols", out, [parts, out, rows, cols]() {
      const T* g = out.grad_data();
      int64_t at2 = 0;
      for (const auto& p : parts) {
        int64_t pc = p.dim(1);
        if (p.requires_grad()) {
          T* gp = p.grad_data();
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < pc; ++c) gp[r * pc + c] += g[r * cols + at2 + c];
        }
        at2 += pc;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x, int64_t axis) {
  detail::require(axis >= 0 && axis < x.rank(), "softmax: axis out of range");
  int64_t outer = 1, inner = 1, n = x.dim(axis);
  for (int64_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int64_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t in = 0; in < inner; ++in) {
      int64_t base = o * n * inner + in;
      T mx = px[base];
      for (int64_t i = 1; i < n; ++i) mx = std::max(mx, px[base + i * inner]);
      double sum = 0;
      for (int64_t i = 0; i < n; ++i) {
        T e = T(std::exp(double(px[base + i * inner] - mx)));
        po[base + i * inner] = e;
        sum += double(e);
      }
      T inv = T(1.0 / sum);
      for (int64_t i = 0; i < n; ++i) po[base + i * inner] *= inv;
    }
  if (detail::track(tape, {x})) {
    out.set_requires_grad(true);
    tape.record("softmax", out, [x, out, outer, inner, n]() {
      const T* g = out.grad_data();
      const T* p = out.data();
      T* gx = x.grad_data();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
          int64_t base = o * n * inner + in;
          double dot = 0;
          for (int64_t i = 0; i < n; ++i) dot += double(g[base + i * inner]) * double(p[base + i * inner]);
          for (int64_t i = 0; i < n; ++i)
            gx[base + i * inner] += p[base + i * inner] * (g[base + i * inner] - T(dot));
        }
    });
  }
  return out;
}

// Normalizes the last dimension with population statistics; epsilon sits
// inside the square root.
template <typename T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps = T(1e-6)) {
  detail::require(x.rank() >= 1, "layer_norm: x must have rank >= 1");
  int64_t c = x.dim(x.rank() - 1);
  detail::require(gain.numel() == c && bias.numel() == c,
                  "layer_norm: gain/bias length " + std::to_string(gain.numel()) + " vs last dim " + std::to_string(c));
  int64_t rows = x.numel() / c;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  std::vector<T> xhat(static_cast<size_t>(x.numel()));
  std::vector<T> rstd(static_cast<size_t>(rows));
  const T* px = x.data();
  const T* pg = gain.data();
  const T* pb = bias.data();
  T* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = px + r * c;
    double mean = 0;
    for (int64_t i = 0; i < c; ++i) mean += double(row[i]);
    mean /= double(c);
    double var = 0;
    for (int64_t i = 0; i < c; ++i) {
      double d = double(row[i]) - mean;
      var += d * d;
    }
    var /= double(c);
    T rs = T(1.0 / std::sqrt(var + double(eps)));
    rstd[size_t(r)] = rs;
    for (int64_t i = 0; i < c; ++i) {
      T xh = (row[i] - T(mean)) * rs;
      xhat[size_t(r * c + i)] = xh;
      po[r * c + i] = pg[i] * xh + pb[i];
    }
  }
  if (detail::track(tape, {x, gain, bias})) {
    out.set_requires_grad(true);
    tape.record("layer_norm", out,
                [x, gain, bias, out, saved_xhat = std::move(xhat), saved_rstd = std::move(rstd), rows, c]() {
      const T* g = out.grad_data();
      const T* pg2 = gain.data();
      for (int64_t r = 0; r < rows; ++r) {
        const T* grow = g + r * c;
        const T* xh = saved_xhat.data() + r * c;
        if (gain.requires_grad()) {
          T* gg = gain.grad_data();
          for (int64_t i = 0; i < c; ++i) gg[i] += grow[i] * xh[i];
        }
        if (bias.requires_grad()) {
          T* gb = bias.grad_data();
          for (int64_t i = 0; i < c; ++i) gb[i] += grow[i];
        }
        if (x.requires_grad()) {
          T* gx = x.grad_data() + r * c;
          double m1 = 0, m2 = 0;
          for (int64_t i = 0; i < c; ++i) {
            double dxh = double(grow[i]) * double(pg2[i]);
            m1 += dxh;
            m2 += dxh * double(xh[i]);
          }
          m1 /= double(c);
          m2 /= double(c);
          for (int64_t i = 0; i < c; ++i) {
            double dxh = double(grow[i]) * double(pg2[i]);
            gx[i] += T(double(saved_rstd[size_t(r)]) * (dxh - m1 - double(xh[i]) * m2));
          }
        }
      }
    });
  }
  return out;
}

// Tanh-form gelu; the backward pass differentiates this exact expression, so
// finite-difference checks agree with it rather than with the erf form.
template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  constexpr T c = T(0.7978845608028654);
  constexpr T a = T(0.044715);
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  int64_t n = x.numel();
  {
    Eigen::Map<const Arr> xv(x.data(), n);
    Eigen::Map<Arr> ov(out.data(), n);
    ov = T(0.5) * xv * (T(1) + (c * (xv + a * xv.cube())).tanh());
  }
  if (detail::track(tape, {x})) {
    out.set_requires_grad(true);
    tape.record("gelu", out, [x, out, n]() {
      constexpr T c = T(0.7978845608028654);
      constexpr T a = T(0.044715);
      Eigen::Map<const Arr> xv(x.data(), n);
      Eigen::Map<const Arr> gv(out.grad_data(), n);
      Eigen::Map<Arr> gx(x.grad_data(), n);
      Arr t = (c * (xv + a * xv.cube())).tanh();
      gx += gv * (T(0.5) * (T(1) + t) +
                  T(0.5) * xv * (T(1) - t.square()) * c *
                      (T(1) + T(3) * a * xv.square()));
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum_all(Tape<T>& tape, const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros({1});
  const T* px = x.data();
  double s = 0;
  int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) s += double(px[i]);
  out.data()[0] = T(s);
  if (detail::track(tape, {x})) {
    out.set_requires_grad(true);
    tape.record("sum_all", out, [x, out, n]() {
      T g = out.grad_data()[0];
      T* gx = x.grad_data();
      for (int64_t i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean_all(Tape<T>& tape, const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros({1});
  const T* px = x.data();
  double s = 0;
  int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) s += double(px[i]);
  out.data()[0] = T(s / double(n));
  if (detail::track(tape, {x})) {
    out.set_requires_grad(true);
    tape.record("mean_all", out, [x, out, n]() {
      T g = out.grad_data()[0] / T(n);
      T* gx = x.grad_data();
      for (int64_t i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return out;
}

// Mean over rows of [R x C] -> [1 x C].
template <typename T>
Tensor<T> mean_rows(Tape<T>& tape, const Tensor<T>& x) {
  detail::require(x.rank() == 2, "mean_rows: x must be rank-2, got " + shape_str(x.shape()));
  int64_t rows = x.dim(0), cols = x.dim(1);
  Tensor<T> out = Tensor<T>::zeros({1, cols});
  const T* px = x.data();
  T* po = out.data();
  for (int64_t c = 0; c < cols; ++c) {
    double s = 0;
    for (int64_t r = 0; r < rows; ++r) s += double(px[r * cols + c]);
    po[c] = T(s / double(rows));
  }
  if (detail::track(tape, {x})) {
    out.set_requires_grad(true);
    tape.record("mean_rows", out, [x, out, rows, cols]() {
      const T* g = out.grad_data();
      T* gx = x.grad_data();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c) gx[r * cols + c] += g[c] / T(rows);
    });
  }
  return out;
}

// Each row scaled to unit Euclidean norm; the norm is clamped from below.
template <typename T>
Tensor<T> l2_normalize_rows(Tape<T>& tape, const Tensor<T>& x, T eps = T(1e-12)) {
  detail::require(x.rank() == 2, "l2_normalize_rows: x must be rank-2");
  int64_t rows = x.dim(0), cols = x.dim(1);
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  std::vector<T> norms(static_cast<size_t>(rows));
  std::vector<char> clamped(static_cast<size_t>(rows));
  const T* px = x.data();
  T* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    double s = 0;
    for (int64_t c = 0; c < cols; ++c) s += double(px[r * cols + c]) * double(px[r * cols + c]);
    double nrm = std::sqrt(s);
    clamped[size_t(r)] = nrm < double(eps);
    nrm = std::max(nrm, double(eps));
    norms[size_t(r)] = T(nrm);
    for (int64_t c = 0; c < cols; ++c) po[r * cols + c] = T(double(px[r * cols + c]) / nrm);
  }
  if (detail::track(tape, {x})) {
    out.set_requires_grad(true);
    tape.record("l2_normalize_rows", out,
                [x, out, saved_norms = std::move(norms), saved_clamped = std::move(clamped), rows, cols]() {
      const T* g = out.grad_data();
      const T* y = out.data();
      T* gx = x.grad_data();
      for (int64_t r = 0; r < rows; ++r) {
        T inv = T(1) / saved_norms[size_t(r)];
        if (saved_clamped[size_t(r)]) {
          for (int64_t c = 0; c < cols; ++c) gx[r * cols + c] += g[r * cols + c] * inv;
          continue;
        }
        double dot = 0;
        for (int64_t c = 0; c < cols; ++c) dot += double(g[r * cols + c]) * double(y[r * cols + c]);
        for (int64_t c = 0; c < cols; ++c)
          gx[r * cols + c] += (g[r * cols + c] - T(dot) * y[r * cols + c]) * inv;
      }
    });
  }
  return out;
}

// Mean over rows of -sum_k q_k log p_k with label-smoothed targets
// q = (1-smoothing)*onehot + smoothing/K.
template <typename T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& logits,
                        std::vector<int64_t> labels, T smoothing = T(0)) {
  detail::require(logits.rank() == 2, "cross_entropy: logits must be rank-2");
  int64_t b = logits.dim(0), k = logits.dim(1);
  detail::require(int64_t(labels.size()) == b, "cross_entropy: label count vs batch mismatch");
  detail::require(smoothing >= T(0) && smoothing < T(1), "cross_entropy: smoothing must be in [0,1)");
  for (int64_t y : labels)
    detail::require(y >= 0 && y < k, "cross_entropy: label out of range");
  Tensor<T> out = Tensor<T>::zeros({1});
  std::vector<T> probs(static_cast<size_t>(b * k));
  const T* pl = logits.data();
  double total = 0;
  double off = double(smoothing) / double(k);
  for (int64_t r = 0; r < b; ++r) {
    const T* row = pl + r * k;
    double mx = double(row[0]);
    for (int64_t i = 1; i < k; ++i) mx = std::max(mx, double(row[i]));
    double sum = 0;
    for (int64_t i = 0; i < k; ++i) sum += std::exp(double(row[i]) - mx);
    double lse = mx + std::log(sum);
    double qdotl = 0;
    for (int64_t i = 0; i < k; ++i) {
      double q = off + (i == labels[size_t(r)] ? 1.0 - double(smoothing) : 0.0);
      qdotl += q * double(row[i]);
      probs[size_t(r * k + i)] = T(std::exp(double(row[i]) - lse));
    }
    total += lse - qdotl;
  }
  out.data()[0] = T(total / double(b));
  if (detail::track(tape, {logits})) {
    out.set_requires_grad(true);
    tape.record("cross_entropy", out,
                [logits, out, saved_labels = std::move(labels), saved_probs = std::move(probs), b, k, off,
                 smoothing]() {
      T g = out.grad_data()[0];
      T* gl = logits.grad_data();
      for (int64_t r = 0; r < b; ++r)
        for (int64_t i = 0; i < k; ++i) {
          double q = off + (i == saved_labels[size_t(r)] ? 1.0 - double(smoothing) : 0.0);
          gl[r * k + i] += g * T((double(saved_probs[size_t(r * k + i)]) - q) / double(b));
        }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mse(Tape<T>& tape, const Tensor<T>& pred, const Tensor<T>& target) {
  detail::require(pred.shape() == target.shape(),
                  "mse: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  Tensor<T> out = Tensor<T>::zeros({1});
  const T* pp = pred.data();
  const T* pt = target.data();
  int64_t n = pred.numel();
  double s = 0;
  for (int64_t i = 0; i < n; ++i) {
    double d = double(pp[i]) - double(pt[i]);
    s += d * d;
  }
  out.data()[0] = T(s / double(n));
  if (detail::track(tape, {pred, target})) {
    out.set_requires_grad(true);
    tape.record("mse", out, [pred, target, out, n]() {
      T g = out.grad_data()[0];
      const T* pp2 = pred.data();
      const T* pt2 = target.data();
      if (pred.requires_grad()) {
        T* gp = pred.grad_data();
        for (int64_t i = 0; i < n; ++i) gp[i] += g * T(2) * (pp2[i] - pt2[i]) / T(n);
      }
      if (target.requires_grad()) {
        T* gt = target.grad_data();
        for (int64_t i = 0; i < n; ++i) gt[i] -= g * T(2) * (pp2[i] - pt2[i]) / T(n);
      }
    });
  }
  return out;
}

// rate == 0 is an exact identity and consumes no randomness.
template <typename T>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& x, T rate, Rng& rng) {
  detail::require(rate >= T(0) && rate < T(1), "dropout: rate must be in [0,1)");
  if (rate == T(0)) return x;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  int64_t n = x.numel();
  std::vector<T> mask(static_cast<size_t>(n));
  T keep_scale = T(1) / (T(1) - rate);
  const T* px = x.data();
  T* po = out.data();
  for (int64_t i = 0; i < n; ++i) {
    mask[size_t(i)] = rng.uniform() >= double(rate) ? keep_scale : T(0);
    po[i] = px[i] * mask[size_t(i)];
  }
  if (detail::track(tape, {x})) {
    out.set_requires_grad(true);
    tape.record("dropout", out, [x, out, saved_mask = std::move(mask), n]() {
      const T* g = out.grad_data();
      T* gx = x.grad_data();
      for (int64_t i = 0; i < n; ++i) gx[i] += g[i] * saved_mask[size_t(i)];
    });
  }
  return out;
}

// Whole-tensor stochastic gate for residual branches; rate == 0 is identity.
template <typename T>
Tensor<T> drop_path(Tape<T>& tape, const Tensor<T>& x, T rate, Rng& rng) {
  detail::require(rate >= T(0) && rate < T(1), "drop_path: rate must be in [0,1)");
  if (rate == T(0)) return x;
  T factor = rng.uniform() >= double(rate) ? T(1) / (T(1) - rate) : T(0);
  return scale(tape, x, factor);
}

// Multi-head scaled dot-product attention. q: [M x D], k, v: [N x D].
// Probability matrices are recomputed in backward instead of stored, keeping
// per-call memory at O(M*N) scratch during the pass only.
template <typename T>
Tensor<T> attention(Tape<T>& tape, const Tensor<T>& q, const Tensor<T>& k,
                    const Tensor<T>& v, int64_t heads) {
  detail::require(q.rank() == 2 && k.rank() == 2 && v.rank() == 2, "attention: inputs must be rank-2");
  int64_t m = q.dim(0), d = q.dim(1), n = k.dim(0);
  detail::require(k.dim(1) == d && v.dim(1) == d, "attention: feature dims differ");
  detail::require(v.dim(0) == n, "attention: key/value counts differ");
  detail::require(heads > 0 && d % heads == 0,
                  "attention: feature dim " + std::to_string(d) + " not divisible by heads " + std::to_string(heads));
  int64_t dh = d / heads;
  T sc = T(1.0 / std::sqrt(double(dh)));
  Tensor<T> out = Tensor<T>::zeros({m, d});
  const bool tracked = detail::track(tape, {q, k, v});
  // Softmax probabilities are kept for the backward pass when tracking, so
  // each head costs heads*m*n floats of tape memory until backward runs.
  std::vector<T> s(static_cast<size_t>((tracked ? heads : 1) * m * n));
  for (int64_t h = 0; h < heads; ++h) {
    T* ph = s.data() + (tracked ? h * m * n : 0);
    const T* qh = q.data() + h * dh;
    const T* kh = k.data() + h * dh;
    const T* vh = v.data() + h * dh;
    mmfuse::detail::gemm(false, true, m, n, dh, sc, qh, d, kh, d, T(0), ph, n);
    detail::softmax_rows_inplace(ph, m, n);
    mmfuse::detail::gemm(false, false, m, dh, n, T(1), ph, n, vh, d, T(0), out.data() + h * dh, d);
  }
  if (tracked) {
    out.set_requires_grad(true);
    tape.record("attention", out,
                [q, k, v, out, m, n, d, dh, heads, sc, probs = std::move(s)]() {
      std::vector<T> dp(static_cast<size_t>(m * n));
      for (int64_t h = 0; h < heads; ++h) {
        const T* p = probs.data() + h * m * n;
        const T* qh = q.data() + h * dh;
        const T* kh = k.data() + h * dh;
        const T* vh = v.data() + h * dh;
        const T* gh = out.grad_data() + h * dh;
        if (v.requires_grad())
          mmfuse::detail::gemm(true, false, n, dh, m, T(1), p, n, gh, d, T(1), v.grad_data() + h * dh, d);
        if (!q.requires_grad() && !k.requires_grad()) continue;
        mmfuse::detail::gemm(false, true, m, n, dh, T(1), gh, d, vh, d, T(0), dp.data(), n);
        using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
        for (int64_t r = 0; r < m; ++r) {
          Eigen::Map<Arr> dpr(dp.data() + r * n, n);
          Eigen::Map<const Arr> pr(p + r * n, n);
          const T dot = (dpr * pr).sum();
          dpr = pr * (dpr - dot);
        }
        if (q.requires_grad())
          mmfuse::detail::gemm(false, false, m, dh, n, sc, dp.data(), n, kh, d, T(1), q.grad_data() + h * dh, d);
        if (k.requires_grad())
          mmfuse::detail::gemm(true, false, n, dh, m, sc, dp.data(), n, qh, d, T(1), k.grad_data() + h * dh, d);
      }
    });
  }
  return out;
}

// Unfolds [C x H x W] into [OH*OW x C*k*k] patches for stride-s, zero-padded
// convolution expressed as a matmul.
template <typename T>
Tensor<T> im2col(Tape<T>& tape, const Tensor<T>& x, int64_t ksize, int64_t stride, int64_t pad) {
  detail::require(x.rank() == 3, "im2col: x must be [C,H,W], got " + shape_str(x.shape()));
  detail::require(ksize > 0 && stride > 0 && pad >= 0, "im2col: bad geometry");
  int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  detail::require(h + 2 * pad >= ksize && w + 2 * pad >= ksize, "im2col: kernel larger than padded input");
  int64_t oh = (h + 2 * pad - ksize) / stride + 1;
  int64_t ow = (w + 2 * pad - ksize) / stride + 1;
  int64_t cols = c * ksize * ksize;
  std::vector<int64_t> map(static_cast<size_t>(oh * ow * cols));
  for (int64_t oy = 0; oy < oh; ++oy)
    for (int64_t ox = 0; ox < ow; ++ox) {
      int64_t row = oy * ow + ox;
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t ky = 0; ky < ksize; ++ky)
          for (int64_t kx = 0; kx < ksize; ++kx) {
            int64_t sy = oy * stride - pad + ky;
            int64_t sx = ox * stride - pad + kx;
            int64_t col = (ch * ksize + ky) * ksize + kx;
            map[size_t(row * cols + col)] =
                (sy >= 0 && sy < h && sx >= 0 && sx < w) ? (ch * h + sy) * w + sx : -1;
          }
    }
  Tensor<T> out = Tensor<T>::zeros({oh * ow, cols});
  const T* px = x.data();
  T* po = out.data();
  int64_t total = oh * ow * cols;
  for (int64_t i = 0; i < total; ++i) po[i] = map[size_t(i)] >= 0 ? px[map[size_t(i)]] : T(0);
  if (detail::track(tape, {x})) {
    out.set_requires_grad(true);
    tape.record("im2col", out, [x, out, saved_map = std::move(map), total]() {
      const T* g = out.grad_data();
      T* gx = x.grad_data();
      for (int64_t i = 0; i < total; ++i)
        if (saved_map[size_t(i)] >= 0) gx[saved_map[size_t(i)]] += g[i];
    });
  }
  return out;
}

}  // namespace mmfuse::ops
