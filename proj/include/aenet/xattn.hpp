#pragma once

// Generic similarity-based cross attention and the toy FSS model that the
// AE plug-in is attached to.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "aenet/ae.hpp"
#include "aenet/autodiff.hpp"
#include "aenet/nn.hpp"
#include "aenet/ops.hpp"
#include "aenet/prior.hpp"
#include "aenet/synth.hpp"

namespace aenet {

template <typename T>
struct CrossAttnBlock {
  LinearLayer<T> proj_q, proj_k, proj_v, out;
  LayerNormParams<T> ln1, ln2;
  FeedForward<T> ffn;

  CrossAttnBlock() = default;
  CrossAttnBlock(std::size_t c, std::mt19937_64& rng)
      : proj_q(c, c, rng), proj_k(c, c, rng), proj_v(c, c, rng), out(c, c, rng), ln1(c), ln2(c), ffn(c, rng) {}

  std::size_t channels() const { return proj_q.in_features(); }

  void collect(ParamList<T>& params) {
    for (auto* l : {&proj_q, &proj_k, &proj_v, &out}) l->collect(params);
    ln1.collect(params);
    ln2.collect(params);
    ffn.collect(params);
  }
};

// Attention weights of the last xattn_forward call, for inspection.
template <typename T>
struct AttentionProbe {
  Tensor<T> weights;                   // [HW_q × n_fg]
  std::vector<std::size_t> key_rows;   // support rows used as keys
  std::size_t support_rows = 0;

  // Dense [HW_q × support_rows] weights with zeros on excluded keys.
  Tensor<T> dense() const {
    const std::size_t nq = weights.dim(0);
    Tensor<T> d({nq, support_rows});
    for (std::size_t i = 0; i < nq; ++i)
      for (std::size_t j = 0; j < key_rows.size(); ++j) d.at(i, key_rows[j]) = weights.at(i, j);
    return d;
  }
};

// Pre-norm cross attention of query pixels over support FG pixels.
//
// Keys are restricted to support rows with m_s > 0. Excluded keys get exactly
// zero weight, which is what additive -inf masking of BG keys yields; they
// are dropped before the score matrix is formed.
template <typename T>
Var<T> xattn_forward(Tape<T>& tape, CrossAttnBlock<T>& block, const Var<T>& x_q, const Var<T>& x_s,
                     const Tensor<T>& m_s, AttentionProbe<T>* probe = nullptr) {
  const std::size_t c = block.channels();
  if (m_s.size() != x_s.value().dim(0)) throw DimensionError("xattn: support mask size mismatch");
  std::vector<std::size_t> fg_rows;
  for (std::size_t i = 0; i < m_s.size(); ++i)
    if (m_s[i] > T{0}) fg_rows.push_back(i);
  if (fg_rows.empty()) throw EmptyMaskError("support FG mask empty");

  auto qn = layer_norm(tape, block.ln1, x_q);
  auto sn = gather_rows(layer_norm(tape, block.ln1, x_s), fg_rows);
  auto q = linear(tape, block.proj_q, qn);
  auto k = linear(tape, block.proj_k, sn);
  auto v = linear(tape, block.proj_v, sn);
  auto scores = scale(matmul(q, transpose(k)), T{1} / std::sqrt(static_cast<T>(c)));
  auto attn = softmax(scores);
  if (probe != nullptr) *probe = AttentionProbe<T>{attn.value(), fg_rows, m_s.size()};
  auto x = add(x_q, linear(tape, block.out, matmul(attn, v)));
  return add(x, feed_forward(tape, block.ffn, layer_norm(tape, block.ln2, x)));
}

// ---------------------------------------------------------------------------
// Toy model
// ---------------------------------------------------------------------------

struct ModelConfig {
  std::size_t channels = 16;
  std::size_t blocks = 4;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  bool shared_fusion = false;  // one fusion layer for both AE streams
};

template <typename T>
struct ToyModel {
  ModelConfig cfg;
  LinearLayer<T> input_proj;  // (C + 2) → C
  std::vector<AEBlock<T>> ae;
  std::vector<CrossAttnBlock<T>> xattn;
  LayerNormParams<T> ln_out;  // final pre-norm stack normalization
  LinearLayer<T> head;        // C → 2 logits (BG, FG)

  explicit ToyModel(ModelConfig config) : cfg(config) {
    if (cfg.blocks < 1) throw ContractError("model: at least one attention block is required");
    if (!(cfg.temperature > 0)) throw ContractError("model: temperature must be positive");
    const std::size_t c = cfg.channels;
    // Independent streams so that adding the AE stack does not perturb the
    // initialization of the shared baseline parameters.
    std::mt19937_64 base_rng(cfg.seed);
    std::mt19937_64 ae_rng(cfg.seed ^ 0xAE'AE'AE'AEULL);
    input_proj = LinearLayer<T>(c + 2, c, base_rng);
    for (std::size_t i = 0; i < cfg.blocks; ++i) xattn.emplace_back(c, base_rng);
    ln_out = LayerNormParams<T>(c);
    head = LinearLayer<T>(c, 2, base_rng);
    for (std::size_t i = 0; i < cfg.blocks; ++i) ae.emplace_back(c, ae_rng, cfg.shared_fusion);
  }

  ParamList<T> baseline_params() {
    ParamList<T> out;
    input_proj.collect(out);
    for (auto& b : xattn) b.collect(out);
    ln_out.collect(out);
    head.collect(out);
    return out;
  }

  ParamList<T> ae_params() {
    ParamList<T> out;
    for (auto& b : ae) b.collect(out);
    return out;
  }

  ParamList<T> params(bool use_aenet) {
    auto out = baseline_params();
    if (use_aenet)
      for (auto* p : ae_params()) out.push_back(p);
    return out;
  }
};

template <typename T>
struct ModelOutput {
  Var<T> pred;              // [HW] FG probability
  std::vector<Var<T>> aux;  // N × [HW] discriminative masks (empty without AE)
  // Features entering and leaving the first AE block (valid with AE only).
  Var<T> first_in_q, first_in_s, first_out_q, first_out_s;
  Tensor<T> support_mask;  // [kHW] at feature resolution
};

// Average-pool a mask down to feature resolution (identity when sizes match).
template <typename T>
Tensor<T> mask_to_feature_res(const Tensor<T>& mask, std::size_t h, std::size_t w) {
  if (mask.ndim() != 2) throw DimensionError("mask must be H×W");
  if (mask.dim(0) == h && mask.dim(1) == w) return mask;
  if (mask.dim(0) % h || mask.dim(1) % w || mask.dim(0) / h != mask.dim(1) / w)
    throw DimensionError("mask " + shape_str(mask.shape()) + " is not an integer multiple of " +
                         std::to_string(h) + "x" + std::to_string(w));
  Tape<T> tape;
  auto pooled = avgpool(tape.constant(mask.reshaped({1, mask.dim(0), mask.dim(1)})), mask.dim(0) / h);
  return pooled.value().reshaped({h, w});
}

// Query pipeline: prior from high-level features, concatenated to mid-level
// query features, input projection, N × (AE?, cross attention), linear head,
// per-pixel softmax. `prior_override` replaces the two-channel PG prior.
template <typename T>
ModelOutput<T> model_forward(Tape<T>& tape, ToyModel<T>& model, const synth::Episode<T>& ep, bool use_aenet,
                             const Tensor<T>* prior_override = nullptr) {
  ep.validate();
  const std::size_t c = ep.channels(), h = ep.height(), w = ep.width(), hw = h * w;
  if (c != model.cfg.channels) throw DimensionError("model: channel count mismatch");

  std::vector<Tensor<T>> masks;
  std::vector<SupportView<T>> views;
  for (const auto& s : ep.supports) masks.push_back(mask_to_feature_res(s.mask, h, w));
  for (std::size_t k = 0; k < ep.supports.size(); ++k) views.push_back({&ep.supports[k].feat_high, &masks[k]});

  Tensor<T> prior = prior_override ? *prior_override : final_prior(prior_pack<T>(ep.query_feat_high, views));
  if (prior.shape() != Shape{2, h, w}) throw DimensionError("model: prior must be 2×H×W");

  auto q_in = channels_to_tokens(concat_channels(tape.constant(ep.query_feat), tape.constant(std::move(prior))));
  auto x_q = linear(tape, model.input_proj, q_in);

  // Support stream: each shot carries its own mask in both prior channels.
  ModelOutput<T> out;
  out.support_mask = Tensor<T>({ep.supports.size() * hw});
  Var<T> x_s;
  for (std::size_t k = 0; k < ep.supports.size(); ++k) {
    const auto& m = masks[k];
    Tensor<T> two({2, h, w});
    std::copy(m.data(), m.data() + hw, two.data());
    std::copy(m.data(), m.data() + hw, two.data() + hw);
    std::copy(m.data(), m.data() + hw, out.support_mask.data() + k * hw);
    auto s_in = channels_to_tokens(concat_channels(tape.constant(ep.supports[k].feat), tape.constant(std::move(two))));
    auto s = linear(tape, model.input_proj, s_in);
    x_s = x_s.valid() ? concat0(x_s, s) : s;
  }

  for (std::size_t i = 0; i < model.cfg.blocks; ++i) {
    if (use_aenet) {
      if (i == 0) {
        out.first_in_q = x_q;
        out.first_in_s = x_s;
      }
      auto g = ae_forward(tape, model.ae[i], x_q, x_s, out.support_mask, static_cast<T>(model.cfg.temperature));
      x_q = g.f_q;
      x_s = g.f_s;
      out.aux.push_back(g.m_disc);
      if (i == 0) {
        out.first_out_q = x_q;
        out.first_out_s = x_s;
      }
    }
    x_q = xattn_forward(tape, model.xattn[i], x_q, x_s, out.support_mask);
  }

  auto probs = softmax(linear(tape, model.head, layer_norm(tape, model.ln_out, x_q)));
  out.pred = reshape(slice_cols(probs, 1, 2), {hw});
  return out;
}

}  // namespace aenet
