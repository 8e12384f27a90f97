#pragma once

// Ambiguity Eliminator block.
//
//   Q = Linear(F_S), K = Linear(F_Q), V = Linear(F_Q)
//   (P_S_fg, M_disc) = PG(support = Q, query = K)
//   P_Q_fg = softmax(M_disc / τ) · V
//   α      = (cos(P_S_fg, P_Q_fg) + 1) / 2
//   P_fg   = α·P_S_fg + (1 - α)·P_Q_fg
//   F_*    = Linear_*(F_* ‖ P_fg)             for * ∈ {Q, S}
//
// The two fusion layers are independent unless the block is built with
// shared_fusion, in which case fuse_q serves both streams and fuse_s is empty.
//
// wrapped pre-norm: x += AE(LN1(x)); x += FFN(LN2(x)) for both streams, with
// LN1, LN2 and FFN shared across the two streams.

#include <cstddef>
#include <random>
#include <vector>

#include "aenet/autodiff.hpp"
#include "aenet/nn.hpp"
#include "aenet/ops.hpp"
#include "aenet/prior.hpp"

namespace aenet {

template <typename T>
struct AEBlock {
  LinearLayer<T> proj_q, proj_k, proj_v;
  LinearLayer<T> fuse_q, fuse_s;
  LayerNormParams<T> ln1, ln2;
  FeedForward<T> ffn;
  bool shared_fusion = false;

  AEBlock() = default;
  AEBlock(std::size_t c, std::mt19937_64& rng, bool shared = false)
      : proj_q(c, c, rng),
        proj_k(c, c, rng),
        proj_v(c, c, rng),
        fuse_q(2 * c, c, rng),
        fuse_s(shared ? LinearLayer<T>() : LinearLayer<T>(2 * c, c, rng)),
        ln1(c),
        ln2(c),
        ffn(c, rng),
        shared_fusion(shared) {}

  std::size_t channels() const { return proj_q.in_features(); }

  LinearLayer<T>& support_fusion() { return shared_fusion ? fuse_q : fuse_s; }

  void collect(ParamList<T>& out) {
    for (auto* l : {&proj_q, &proj_k, &proj_v, &fuse_q}) l->collect(out);
    if (!shared_fusion) fuse_s.collect(out);
    ln1.collect(out);
    ln2.collect(out);
    ffn.collect(out);
  }

  // Residual branches contribute nothing: the block maps (x_q, x_s) to itself.
  void make_passthrough() {
    fuse_q.set_zero();
    support_fusion().set_zero();
    ffn.fc2.set_zero();
  }
};

// Intermediate quantities of one AE application on token matrices.
template <typename T>
struct AEGraph {
  Var<T> f_q;       // [HW×C] rectified query (after residual + FFN)
  Var<T> f_s;       // [kHW×C] rectified support
  Var<T> m_disc;    // [HW]
  Var<T> weights;   // [HW] softmax over m_disc
  Var<T> alpha;     // scalar
  Var<T> p_fused;   // [C]
  Var<T> p_q_fg;    // [C]
  Var<T> p_s_fg;    // [C]
};

// The core AE transform on (already normalized) query/support tokens.
// Returns the fused features without the residual wrapping.
template <typename T>
AEGraph<T> ae_core(Tape<T>& tape, AEBlock<T>& block, const Var<T>& f_q, const Var<T>& f_s,
                   const Tensor<T>& m_s, T temperature) {
  if (!(temperature > T{0})) throw ContractError("ae: temperature must be positive");
  const std::size_t hw = f_q.value().dim(0);
  auto q = linear(tape, block.proj_q, f_s);
  auto k = linear(tape, block.proj_k, f_q);
  auto v = linear(tape, block.proj_v, f_q);

  const SupportTokens<T> shot{q, &m_s};
  auto pg = prior_graph<T>(k, std::span<const SupportTokens<T>>(&shot, 1));

  AEGraph<T> g;
  g.m_disc = pg.disc;
  g.p_s_fg = pg.proto_fg;
  g.weights = softmax(temperature == T{1} ? pg.disc : scale(pg.disc, T{1} / temperature));
  g.p_q_fg = reshape(matmul(reshape(g.weights, {1, hw}), v), {block.channels()});
  g.alpha = scale(add_scalar(cosine(g.p_s_fg, g.p_q_fg), T{1}), T{0.5});
  g.p_fused = add(scale_by(g.p_s_fg, g.alpha), scale_by(g.p_q_fg, one_minus(g.alpha)));
  g.f_q = linear(tape, block.fuse_q, concat_cols(f_q, broadcast_rows(g.p_fused, hw)));
  g.f_s = linear(tape, block.support_fusion(),
                 concat_cols(f_s, broadcast_rows(g.p_fused, f_s.value().dim(0))));
  return g;
}

// Full block: pre-norm residual AE followed by a pre-norm residual FFN.
template <typename T>
AEGraph<T> ae_forward(Tape<T>& tape, AEBlock<T>& block, const Var<T>& x_q, const Var<T>& x_s,
                      const Tensor<T>& m_s, T temperature = T{1}) {
  auto g = ae_core(tape, block, layer_norm(tape, block.ln1, x_q), layer_norm(tape, block.ln1, x_s),
                   m_s, temperature);
  auto q = add(x_q, g.f_q);
  auto s = add(x_s, g.f_s);
  g.f_q = add(q, feed_forward(tape, block.ffn, layer_norm(tape, block.ln2, q)));
  g.f_s = add(s, feed_forward(tape, block.ffn, layer_norm(tape, block.ln2, s)));
  return g;
}

// Value-level result on C×H×W feature maps.
template <typename T>
struct AEOutput {
  Tensor<T> f_q;     // C×H×W
  Tensor<T> f_s;     // C×H×W
  Tensor<T> m_disc;  // H×W
  T alpha = 0;
  Tensor<T> p_fused;
  Tensor<T> p_q_fg;
};

template <typename T>
AEOutput<T> ae_forward(AEBlock<T>& block, const Tensor<T>& f_q, const Tensor<T>& f_s,
                       const Tensor<T>& m_s, T temperature = T{1}) {
  if (f_q.ndim() != 3 || f_s.shape() != f_q.shape())
    throw DimensionError("ae: query/support features must share a C×H×W shape");
  const std::size_t h = f_q.dim(1), w = f_q.dim(2);
  if (m_s.size() != h * w) throw DimensionError("ae: support mask must be H×W");
  Tape<T> tape;
  auto g = ae_forward(tape, block, channels_to_tokens(tape.constant(f_q)),
                      channels_to_tokens(tape.constant(f_s)), m_s.reshaped({h * w}), temperature);
  return AEOutput<T>{tokens_to_channels(g.f_q, h, w).value(), tokens_to_channels(g.f_s, h, w).value(),
                     g.m_disc.value().reshaped({h, w}), g.alpha.value().item(), g.p_fused.value(),
                     g.p_q_fg.value()};
}

}  // namespace aenet
