#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "mmfuse/error.hpp"
#include "mmfuse/model.hpp"
#include "mmfuse/ops.hpp"
#include "mmfuse/tape.hpp"
#include "mmfuse/tensor.hpp"

namespace mmfuse {

enum class MaeScope { all, masked_only };

// Standardizes each target patch row to zero mean and unit variance
// (population variance, epsilon 1e-6). Targets are data, so this runs
// outside any tape.
template <typename T>
Tensor<T> standardize_patch_rows(const Tensor<T>& target) {
  const int64_t rows = target.dim(0), cols = target.dim(1);
  Tensor<T> out = Tensor<T>::zeros(target.shape());
  const T* src = target.data();
  T* dst = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    double mean = 0;
    for (int64_t c = 0; c < cols; ++c) mean += static_cast<double>(src[r * cols + c]);
    mean /= static_cast<double>(cols);
    double var = 0;
    for (int64_t c = 0; c < cols; ++c) {
      const double d = static_cast<double>(src[r * cols + c]) - mean;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    const double rstd = 1.0 / std::sqrt(var + 1e-6);
    for (int64_t c = 0; c < cols; ++c)
      dst[r * cols + c] = static_cast<T>((static_cast<double>(src[r * cols + c]) - mean) * rstd);
  }
  return out;
}

// Mean squared reconstruction error over the selected patch set. With
// norm_targets the ground-truth patches are standardized per patch first;
// predictions are compared against the standardized values directly.
template <typename T>
Tensor<T> mae_loss(Tape<T>& tape, const Tensor<T>& xhat, const Tensor<T>& target,
                   const MaskSpec& mask, MaeScope scope, bool norm_targets = true) {
  if (xhat.rank() != 2 || xhat.shape() != target.shape())
    throw ShapeError("mae_loss: prediction and target shapes differ");
  if (xhat.dim(0) != mask.n)
    throw ShapeError("mae_loss: patch count does not match the mask");
  if (scope == MaeScope::masked_only && mask.masked_idx.empty())
    throw DataError("mae_loss: masked_only scope with an empty masked set");

  Tensor<T> tgt = norm_targets ? standardize_patch_rows(target) : target;
  if (scope == MaeScope::all) return ops::mse(tape, xhat, tgt);

  Tensor<T> pred_rows = ops::gather_rows(tape, xhat, mask.masked_idx);
  Tape<T> no_grad_tape;
  no_grad_tape.set_recording(false);
  Tensor<T> tgt_rows = ops::gather_rows(no_grad_tape, tgt, mask.masked_idx);
  return ops::mse(tape, pred_rows, tgt_rows);
}

template <typename T>
struct ClipLossParts {
  Tensor<T> total;
  Tensor<T> l_sig;
  Tensor<T> l_img;
};

// Bidirectional InfoNCE over row-paired unit projections. Logits are the
// cross-modal similarity matrix divided by tau; the signal term takes rows
// against image columns, the image term the transpose. The two terms are
// combined as (1-lambda) * L_sig + lambda * L_img through scale-and-add so
// linearity in lambda holds at the floating-point level.
template <typename T>
ClipLossParts<T> clip_loss(Tape<T>& tape, const Tensor<T>& z_sig, const Tensor<T>& z_img,
                           T tau, T lambda) {
  if (tau <= T(0)) throw ConfigError("clip_loss: tau must be positive");
  if (lambda < T(0) || lambda > T(1)) throw ConfigError("clip_loss: lambda must be in [0,1]");
  if (z_sig.rank() != 2 || z_sig.shape() != z_img.shape())
    throw ShapeError("clip_loss: projection batches must share a [B x K] shape");
  const int64_t b = z_sig.dim(0), k = z_sig.dim(1);
  for (const Tensor<T>* z : {&z_sig, &z_img}) {
    const T* p = z->data();
    for (int64_t r = 0; r < b; ++r) {
      double norm = 0;
      for (int64_t c = 0; c < k; ++c)
        norm += static_cast<double>(p[r * k + c]) * static_cast<double>(p[r * k + c]);
      if (std::fabs(std::sqrt(norm) - 1.0) > 1e-3)
        throw DataError("clip_loss: projection rows must be unit norm");
    }
  }

  std::vector<int64_t> diag(static_cast<size_t>(b));
  for (int64_t i = 0; i < b; ++i) diag[static_cast<size_t>(i)] = i;

  Tensor<T> logits = ops::scale(tape, ops::matmul(tape, z_sig, ops::transpose(tape, z_img)),
                                T(1) / tau);
  ClipLossParts<T> parts;
  parts.l_sig = ops::cross_entropy(tape, logits, diag, T(0));
  parts.l_img = ops::cross_entropy(tape, ops::transpose(tape, logits), diag, T(0));
  parts.total = ops::add(tape, ops::scale(tape, parts.l_sig, T(1) - lambda),
                         ops::scale(tape, parts.l_img, lambda));
  return parts;
}

}  // namespace mmfuse
