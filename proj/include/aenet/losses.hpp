#pragma once

// Training losses and segmentation metrics.
//
//   L = Dice(pred, gt) + λ · (1/N) Σ_i BCE(M_disc_i, gt)

#include <cmath>
#include <cstddef>
#include <map>
#include <span>
#include <vector>

#include "aenet/autodiff.hpp"
#include "aenet/ops.hpp"
#include "aenet/tensor.hpp"

namespace aenet {

struct LossConfig {
  double lambda = 1.0;
  double dice_smooth = 1.0;
  double bce_eps = 1e-7;

  void validate() const {
    if (!(lambda >= 0)) throw ContractError("loss: lambda must be >= 0");
    if (!(dice_smooth > 0)) throw ContractError("loss: dice_smooth must be > 0");
    if (!(bce_eps > 0 && bce_eps < 0.5)) throw ContractError("loss: bce_eps must be in (0, 0.5)");
  }
};

// 1 - (2·Σ p·g + s) / (Σ p + Σ g + s)
template <typename T>
Var<T> dice_loss(const Var<T>& pred, const Tensor<T>& gt, T smooth = T{1}) {
  if (pred.size() != gt.size())
    throw DimensionError("dice: pred " + shape_str(pred.shape()) + " vs gt " + shape_str(gt.shape()));
  auto& tape = *pred.tape();
  auto g = tape.constant(gt.reshaped(pred.shape()));
  T gsum = 0;
  for (T v : gt.values()) gsum += v;
  auto num = add_scalar(scale(sum(mul(pred, g)), T{2}), smooth);
  auto den = add_scalar(sum(pred), gsum + smooth);
  return one_minus(div(num, den));
}

// Mean over pixels of -[g·ln p + (1-g)·ln(1-p)], p clamped to [eps, 1-eps].
// Soft targets are accepted.
template <typename T>
Var<T> bce_loss(const Var<T>& pred, const Tensor<T>& gt, T eps = static_cast<T>(1e-7)) {
  if (pred.size() != gt.size())
    throw DimensionError("bce: pred " + shape_str(pred.shape()) + " vs gt " + shape_str(gt.shape()));
  auto& tape = *pred.tape();
  auto g = tape.constant(gt.reshaped(pred.shape()));
  auto p = clamp(pred, eps, T{1} - eps);
  auto pos = mul(g, log(p));
  auto neg = mul(one_minus(g), log(one_minus(p)));
  return scale(mean(add(pos, neg)), T{-1});
}

// Dice main loss plus λ-weighted mean of per-block BCE terms. With no aux
// masks the auxiliary term is absent.
template <typename T>
Var<T> total_loss(const Var<T>& pred, const Tensor<T>& gt, std::span<const Var<T>> aux, const LossConfig& cfg) {
  cfg.validate();
  auto loss = dice_loss(pred, gt, static_cast<T>(cfg.dice_smooth));
  if (aux.empty() || cfg.lambda == 0) return loss;
  Var<T> acc;
  for (const auto& m : aux) {
    auto b = bce_loss(m, gt, static_cast<T>(cfg.bce_eps));
    acc = acc.valid() ? add(acc, b) : b;
  }
  const T w = static_cast<T>(cfg.lambda) / static_cast<T>(aux.size());
  return add(loss, scale(acc, w));
}

// ---------------------------------------------------------------------------
// Metrics on binary masks
// ---------------------------------------------------------------------------

struct IoUCounts {
  double intersection = 0;
  double union_ = 0;

  IoUCounts& operator+=(const IoUCounts& o) {
    intersection += o.intersection;
    union_ += o.union_;
    return *this;
  }
  // Both empty counts as perfect agreement.
  double iou() const { return union_ > 0 ? intersection / union_ : 1.0; }
};

template <typename T>
Tensor<T> threshold(const Tensor<T>& m, T at = T{0.5}) {
  Tensor<T> out(m.shape());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = m[i] >= at ? T{1} : T{0};
  return out;
}

// Counts for the positive class (value > 0.5) of two binary masks.
template <typename T>
IoUCounts iou_counts(const Tensor<T>& pred_bin, const Tensor<T>& gt_bin, bool positive = true) {
  if (pred_bin.size() != gt_bin.size()) throw DimensionError("iou: size mismatch");
  IoUCounts c;
  for (std::size_t i = 0; i < pred_bin.size(); ++i) {
    const bool p = (pred_bin[i] > T{0.5}) == positive;
    const bool g = (gt_bin[i] > T{0.5}) == positive;
    c.intersection += (p && g) ? 1 : 0;
    c.union_ += (p || g) ? 1 : 0;
  }
  return c;
}

template <typename T>
double iou(const Tensor<T>& pred_bin, const Tensor<T>& gt_bin) {
  return iou_counts(pred_bin, gt_bin).iou();
}

// Per-episode evaluation record feeding mIoU and FB-IoU.
struct EpisodeResult {
  int fg_class = 0;
  IoUCounts fg;
  IoUCounts bg;
};

template <typename T>
EpisodeResult evaluate_episode(int fg_class, const Tensor<T>& pred_prob, const Tensor<T>& gt) {
  const auto pb = threshold(pred_prob);
  const auto gb = threshold(gt);
  return EpisodeResult{fg_class, iou_counts(pb, gb, true), iou_counts(pb, gb, false)};
}

// Mean over classes of class-aggregated IoU (intersections and unions summed
// over a class's episodes before dividing).
inline double miou(std::span<const EpisodeResult> results) {
  std::map<int, IoUCounts> per_class;
  for (const auto& r : results) per_class[r.fg_class] += r.fg;
  if (per_class.empty()) return 0.0;
  double s = 0;
  for (const auto& [cls, c] : per_class) s += c.iou();
  return s / static_cast<double>(per_class.size());
}

inline double miou(const std::map<int, double>& per_class_iou) {
  if (per_class_iou.empty()) return 0.0;
  double s = 0;
  for (const auto& [cls, v] : per_class_iou) s += v;
  return s / static_cast<double>(per_class_iou.size());
}

// Mean of aggregate FG IoU and aggregate BG IoU with all classes pooled.
inline double fb_iou(std::span<const EpisodeResult> results) {
  IoUCounts fg, bg;
  for (const auto& r : results) {
    fg += r.fg;
    bg += r.bg;
  }
  return 0.5 * (fg.iou() + bg.iou());
}

}  // namespace aenet
