#pragma once

// Prior Generator.
//
// Support FG/BG prototypes by mask-weighted average pooling, per-pixel cosine
// of query features against each prototype, independent min-max scaling of
// both similarity maps, and the discriminative prior
//
//   disc = relu(Norm(Sim_fg) - Norm(Sim_bg)).
//
// Negative differences mark query regions that look more like support
// background; they are not helpful for locating the foreground and are
// clipped. Every similarity is taken against a single prototype, so working
// memory is O(HW·C) and no HW×HW matrix is ever formed.

#include <cstddef>
#include <span>
#include <vector>

#include "aenet/autodiff.hpp"
#include "aenet/ops.hpp"
#include "aenet/tensor.hpp"

namespace aenet {

// Token matrix [HW×C] of one support shot plus its soft mask [HW].
template <typename T>
struct SupportTokens {
  Var<T> tokens;
  const Tensor<T>* mask;
};

template <typename T>
struct PriorGraph {
  Var<T> fg;    // [HW]
  Var<T> bg;    // [HW]
  Var<T> disc;  // [HW]
  Var<T> proto_fg;
  Var<T> proto_bg;
};

namespace detail {

template <typename T>
Tensor<T> complement(const Tensor<T>& m) {
  Tensor<T> out(m.shape());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = T{1} - m[i];
  return out;
}

template <typename T>
T weight_total(const Tensor<T>& w) {
  T s = 0;
  for (T v : w.values()) s += v;
  return s;
}

// Pixel-weighted pooling over every shot: Σ_k Σ_p w_k(p) x_k(p) / Σ_k Σ_p w_k(p).
template <typename T>
Var<T> pooled_prototype(std::span<const SupportTokens<T>> shots, bool background) {
  Var<T> acc;
  T total = 0;
  for (const auto& s : shots) {
    const Tensor<T> flat = s.mask->reshaped({s.mask->size()});
    const Tensor<T> w = background ? complement(flat) : flat;
    total += weight_total(w);
    auto part = weighted_sum_rows(s.tokens, w);
    acc = acc.valid() ? add(acc, part) : part;
  }
  if (!(total > T{0}))
    throw EmptyMaskError(background ? "support BG mask empty" : "support FG mask empty");
  return scale(acc, T{1} / total);
}

}  // namespace detail

// Weighted global average pooling of tokens [n×C] under weights [n].
template <typename T>
Var<T> masked_gap(const Var<T>& tokens, const Tensor<T>& weights) {
  const T total = detail::weight_total(weights);
  if (!(total > T{0})) throw EmptyMaskError("masked_gap: mask is empty");
  return scale(weighted_sum_rows(tokens, weights.reshaped({weights.size()})), T{1} / total);
}

template <typename T>
PriorGraph<T> prior_graph(const Var<T>& query_tokens, std::span<const SupportTokens<T>> shots) {
  if (shots.empty()) throw ContractError("prior: at least one support shot is required");
  detail::require_matrix(query_tokens.value(), "prior");
  for (const auto& s : shots) {
    detail::require_matrix(s.tokens.value(), "prior");
    if (s.tokens.value().dim(1) != query_tokens.value().dim(1))
      throw DimensionError("prior: support tokens " + shape_str(s.tokens.shape()) +
                           " do not match query " + shape_str(query_tokens.shape()));
    if (s.mask->size() != s.tokens.value().dim(0))
      throw DimensionError("prior: support mask size mismatch");
  }
  PriorGraph<T> g;
  g.proto_fg = detail::pooled_prototype(shots, false);
  g.proto_bg = detail::pooled_prototype(shots, true);
  g.fg = minmax_norm(row_cosine(query_tokens, g.proto_fg));
  g.bg = minmax_norm(row_cosine(query_tokens, g.proto_bg));
  g.disc = relu(sub(g.fg, g.bg));
  return g;
}

// ---------------------------------------------------------------------------
// Value-level API on C×H×W feature maps and H×W masks.
// ---------------------------------------------------------------------------

template <typename T>
struct PriorPack {
  Tensor<T> fg;    // H×W
  Tensor<T> bg;    // H×W
  Tensor<T> disc;  // H×W
  Tensor<T> proto_fg;
  Tensor<T> proto_bg;
};

template <typename T>
struct SupportView {
  const Tensor<T>* feat;  // C×H×W
  const Tensor<T>* mask;  // H×W
};

template <typename T>
Tensor<T> masked_gap(const Tensor<T>& feat, const Tensor<T>& mask) {
  if (feat.ndim() != 3 || mask.size() != feat.dim(1) * feat.dim(2))
    throw DimensionError("masked_gap: feature " + shape_str(feat.shape()) + " vs mask " +
                         shape_str(mask.shape()));
  Tape<T> tape;
  auto tokens = channels_to_tokens(tape.constant(feat));
  return masked_gap(tokens, mask).value();
}

template <typename T>
PriorPack<T> prior_pack(const Tensor<T>& query_feat, std::span<const SupportView<T>> shots) {
  if (query_feat.ndim() != 3) throw DimensionError("prior: query features must be C×H×W");
  const std::size_t h = query_feat.dim(1), w = query_feat.dim(2);
  for (const auto& s : shots) {
    if (s.feat->shape() != query_feat.shape())
      throw DimensionError("prior: support features " + shape_str(s.feat->shape()) +
                           " do not match query " + shape_str(query_feat.shape()));
    if (s.mask->size() != h * w) throw DimensionError("prior: support mask must be H×W");
  }
  Tape<T> tape;
  auto q = channels_to_tokens(tape.constant(query_feat));
  std::vector<SupportTokens<T>> tok;
  for (const auto& s : shots) tok.push_back({channels_to_tokens(tape.constant(*s.feat)), s.mask});
  auto g = prior_graph<T>(q, tok);
  return PriorPack<T>{g.fg.value().reshaped({h, w}), g.bg.value().reshaped({h, w}),
                      g.disc.value().reshaped({h, w}), g.proto_fg.value(), g.proto_bg.value()};
}

template <typename T>
PriorPack<T> prior_pack(const Tensor<T>& query_feat, const Tensor<T>& support_feat,
                        const Tensor<T>& support_mask) {
  const SupportView<T> one{&support_feat, &support_mask};
  return prior_pack<T>(query_feat, std::span<const SupportView<T>>(&one, 1));
}

// Two-channel prior: channel 0 = fg, channel 1 = disc.
template <typename T>
Tensor<T> final_prior(const PriorPack<T>& pack) {
  require_same_shape(pack.fg, pack.disc, "final_prior");
  const std::size_t hw = pack.fg.size();
  const Shape s = pack.fg.shape();
  Tensor<T> out({2, s.at(0), s.at(1)});
  std::copy(pack.fg.data(), pack.fg.data() + hw, out.data());
  std::copy(pack.disc.data(), pack.disc.data() + hw, out.data() + hw);
  return out;
}

}  // namespace aenet
