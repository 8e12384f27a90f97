#pragma once

// Episodic training, evaluation and the benchmark experiments.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "aenet/losses.hpp"
#include "aenet/prior.hpp"
#include "aenet/stats.hpp"
#include "aenet/synth.hpp"
#include "aenet/xattn.hpp"

namespace aenet {

// Which two-channel prior the model consumes.
enum class PriorSource : std::uint8_t {
  Discriminative,  // [M_fg, M_disc] from the prior generator
  MaxCorrelation,  // [max-correlation prior, 0], the pre-existing baseline prior
};

inline const char* prior_source_name(PriorSource p) {
  return p == PriorSource::Discriminative ? "disc" : "maxcorr";
}

inline PriorSource parse_prior_source(const std::string& s) {
  if (s == "disc") return PriorSource::Discriminative;
  if (s == "maxcorr") return PriorSource::MaxCorrelation;
  throw ContractError("prior source must be 'disc' or 'maxcorr', got '" + s + "'");
}

struct TrainConfig {
  synth::GeneratorConfig gen;  // C, H, W, k, σ, noise, class pools
  std::size_t episodes_train = 500;
  std::size_t episodes_eval = 100;
  double lr = 0.01;
  double momentum = 0.9;
  std::size_t blocks = 4;
  double lambda = 1.0;
  double dice_smooth = 1.0;
  double bce_eps = 1e-7;
  std::uint64_t seed = 0;
  bool use_aenet = true;
  PriorSource prior = PriorSource::Discriminative;
  double temperature = 1.0;
  bool shared_fusion = false;
  double clip_norm = 1.0;      // global gradient-norm cap; 0 disables
  std::size_t accumulate = 1;  // episodes per optimizer step
  std::size_t threads = 1;     // evaluation fan-out

  void validate() const {
    gen.validate();
    if (episodes_train < 1 || episodes_eval < 1) throw ContractError("train: episode counts must be positive");
    if (!(lr >= 0)) throw ContractError("train: lr must be >= 0");
    if (!(momentum >= 0 && momentum < 1)) throw ContractError("train: momentum must be in [0, 1)");
    if (blocks < 1) throw ContractError("train: blocks must be >= 1");
    loss().validate();
    if (!(temperature > 0)) throw ContractError("train: temperature must be positive");
    if (!(clip_norm >= 0)) throw ContractError("train: clip_norm must be >= 0");
    if (accumulate < 1) throw ContractError("train: accumulate must be >= 1");
    if (threads < 1) throw ContractError("train: threads must be >= 1");
  }

  // The generator and model are both seeded from `seed`.
  synth::GeneratorConfig generator() const {
    auto g = gen;
    g.seed = seed;
    return g;
  }

  ModelConfig model() const {
    return ModelConfig{gen.channels, blocks, temperature, seed * 0x9E3779B97F4A7C15ULL + 1, shared_fusion};
  }

  LossConfig loss() const { return LossConfig{lambda, dice_smooth, bce_eps}; }
};

// Base-split holdout episodes are drawn from this index offset so they never
// coincide with training draws.
inline constexpr std::uint64_t kHoldoutOffset = 1'000'000;

struct EpisodeRecord {
  synth::Split split = synth::Split::Base;
  std::uint64_t index = 0;
  int fg_class = 0;
  double iou = 0;
};

struct RunReport {
  double novel_miou = 0;
  double novel_fb_iou = 0;
  double base_miou = 0;
  double base_fb_iou = 0;
  std::vector<double> loss_curve;
  std::vector<EpisodeRecord> records;
  TrainConfig config;
  double wall_clock_s = 0;
  std::size_t parameter_count = 0;
  bool class_audit_passed = true;  // no novel signature reached training
};

// ---------------------------------------------------------------------------
// Baseline prior: for every query pixel the maximum cosine against all
// mask-multiplied support pixels, min-max scaled. Materializes HW×HW
// similarities; only used as the comparison arm.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> max_correlation_prior(const synth::Episode<T>& ep) {
  const std::size_t c = ep.channels(), h = ep.height(), w = ep.width(), hw = h * w;
  Tape<T> tape;
  auto q = channels_to_tokens(tape.constant(ep.query_feat_high));
  std::vector<T> best(hw, T{-1});
  for (const auto& s : ep.supports) {
    auto st = channels_to_tokens(tape.constant(s.feat_high));
    Tensor<T> masked = st.value();
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t k = 0; k < c; ++k) masked[p * c + k] *= s.mask[p];
    std::vector<T> qn(hw), sn(hw);
    const auto& qv = q.value();
    for (std::size_t p = 0; p < hw; ++p) {
      T a = 0, b = 0;
      for (std::size_t k = 0; k < c; ++k) {
        a += qv[p * c + k] * qv[p * c + k];
        b += masked[p * c + k] * masked[p * c + k];
      }
      qn[p] = std::sqrt(a);
      sn[p] = std::sqrt(b);
    }
    const auto dots = kernel::matmul(qv, kernel::transpose(masked));
    for (std::size_t i = 0; i < hw; ++i)
      for (std::size_t j = 0; j < hw; ++j)
        best[i] = std::max(best[i], dots.at(i, j) / (qn[i] * sn[j] + static_cast<T>(kCosineEps)));
  }
  auto norm = minmax_norm(tape.constant(Tensor<T>({hw}, std::span<const T>(best))));
  Tensor<T> out({2, h, w});
  std::copy(norm.value().data(), norm.value().data() + hw, out.data());
  return out;
}

template <typename T>
Tensor<T> prior_for(const synth::Episode<T>& ep, PriorSource source) {
  if (source == PriorSource::MaxCorrelation) return max_correlation_prior(ep);
  std::vector<SupportView<T>> views;
  for (const auto& s : ep.supports) views.push_back({&s.feat_high, &s.mask});
  return final_prior(prior_pack<T>(ep.query_feat_high, views));
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

template <typename T>
class SgdMomentum {
 public:
  SgdMomentum(ParamList<T> params, double lr, double momentum, double clip_norm = 0)
      : params_(std::move(params)),
        lr_(static_cast<T>(lr)),
        mu_(static_cast<T>(momentum)),
        clip_(static_cast<T>(clip_norm)) {
    for (auto* p : params_) velocity_.emplace_back(p->value.shape());
  }

  // g ← g/scale, rescaled so ‖g‖ ≤ clip; v ← μv + g; p ← p − lr·v.
  // Grads are cleared afterwards.
  void step(T grad_scale = T{1}) {
    for (auto* p : params_)
      if (p->grad.size() != p->value.size()) p->zero_grad();
    if (clip_ > T{0}) {
      T sq = 0;
      for (auto* p : params_)
        for (std::size_t j = 0; j < p->grad.size(); ++j) sq += p->grad[j] * p->grad[j];
      const T norm = std::sqrt(sq) / grad_scale;
      if (norm > clip_) grad_scale *= norm / clip_;
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      auto& v = velocity_[i];
      for (std::size_t j = 0; j < v.size(); ++j) {
        v[j] = mu_ * v[j] + p.grad[j] / grad_scale;
        p.value[j] -= lr_ * v[j];
      }
      p.zero_grad();
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

 private:
  ParamList<T> params_;
  std::vector<Tensor<T>> velocity_;
  T lr_, mu_, clip_;
};

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

// Runs `fn(i)` for i in [0, n) on up to `threads` threads. Results must be
// written to per-index slots so aggregation order stays fixed.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < n; i += threads) fn(i);
    });
}

template <typename T>
Tensor<T> predict(ToyModel<T>& model, const synth::Episode<T>& ep, bool use_aenet, PriorSource source) {
  Tape<T> tape;
  const auto prior = prior_for(ep, source);
  auto out = model_forward(tape, model, ep, use_aenet, &prior);
  return out.pred.value().reshaped({ep.height(), ep.width()});
}

struct EvalResult {
  double miou = 0;
  double fb_iou = 0;
  std::vector<EpisodeResult> episodes;
  std::vector<EpisodeRecord> records;
};

template <typename T>
EvalResult evaluate(ToyModel<T>& model, const synth::EpisodeGenerator& gen, synth::Split split,
                    std::uint64_t first_index, std::size_t count, bool use_aenet, PriorSource source,
                    std::size_t threads = 1) {
  EvalResult r;
  r.episodes.resize(count);
  r.records.resize(count);
  parallel_for(count, threads, [&](std::size_t i) {
    const auto ep = gen.generate(split, first_index + i).template cast<T>();
    const auto pred = predict(model, ep, use_aenet, source);
    const auto gt = mask_to_feature_res(ep.query_gt, ep.height(), ep.width());
    r.episodes[i] = evaluate_episode(ep.fg_class, pred, gt);
    r.records[i] = EpisodeRecord{split, first_index + i, ep.fg_class, r.episodes[i].fg.iou()};
  });
  r.miou = miou(r.episodes);
  r.fb_iou = fb_iou(r.episodes);
  return r;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

// One forward/backward on an episode; returns the loss. Gradients accumulate
// into the model's parameters.
template <typename T>
T train_step(ToyModel<T>& model, const synth::Episode<T>& ep, const TrainConfig& cfg, bool backward = true) {
  Tape<T> tape;
  const auto prior = prior_for(ep, cfg.prior);
  auto out = model_forward(tape, model, ep, cfg.use_aenet, &prior);
  const auto gt = mask_to_feature_res(ep.query_gt, ep.height(), ep.width());
  auto loss = total_loss<T>(out.pred, gt, out.aux, cfg.loss());
  const T value = loss.value().item();
  if (!std::isfinite(value)) throw NumericError("train: loss became non-finite");
  if (backward) tape.backward(loss);
  return value;
}

// Trains `model` in place.
template <typename T>
RunReport train_model(ToyModel<T>& model, const TrainConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const synth::EpisodeGenerator gen(cfg.generator());
  RunReport rep;
  rep.config = cfg;
  auto params = model.params(cfg.use_aenet);
  rep.parameter_count = parameter_count(params);
  SgdMomentum<T> opt(params, cfg.lr, cfg.momentum, cfg.clip_norm);
  opt.zero_grad();

  std::size_t pending = 0;
  for (std::size_t e = 0; e < cfg.episodes_train; ++e) {
    const auto ep = gen.generate(synth::Split::Base, e).template cast<T>();
    auto touches_novel = [&](const std::vector<int>& ids) {
      return std::any_of(ids.begin(), ids.end(), [&](int id) { return gen.pool().is_novel(id); });
    };
    if (gen.pool().is_novel(ep.fg_class) || touches_novel(ep.query_bg_classes)) rep.class_audit_passed = false;
    for (const auto& s : ep.supports)
      if (touches_novel(s.bg_classes)) rep.class_audit_passed = false;

    rep.loss_curve.push_back(static_cast<double>(train_step(model, ep, cfg)));
    if (++pending == cfg.accumulate || e + 1 == cfg.episodes_train) {
      opt.step(static_cast<T>(pending));
      pending = 0;
    }
  }
  if (!rep.class_audit_passed) throw ContractError("train: novel class signature reached a training episode");

  auto novel = evaluate(model, gen, synth::Split::Novel, 0, cfg.episodes_eval, cfg.use_aenet, cfg.prior, cfg.threads);
  auto base = evaluate(model, gen, synth::Split::Base, kHoldoutOffset, cfg.episodes_eval, cfg.use_aenet, cfg.prior,
                       cfg.threads);
  rep.novel_miou = novel.miou;
  rep.novel_fb_iou = novel.fb_iou;
  rep.base_miou = base.miou;
  rep.base_fb_iou = base.fb_iou;
  rep.records = std::move(base.records);
  rep.records.insert(rep.records.end(), novel.records.begin(), novel.records.end());
  rep.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

template <typename T = double>
RunReport train(const TrainConfig& cfg) {
  cfg.validate();
  ToyModel<T> model(cfg.model());
  return train_model(model, cfg);
}

// ---------------------------------------------------------------------------
// Benchmarks
// ---------------------------------------------------------------------------

struct PriorBenchRow {
  double sigma = 0;
  std::vector<double> auc_fg;
  std::vector<double> auc_disc;
  double mean_fg = 0, std_fg = 0;
  double mean_disc = 0, std_disc = 0;
  stats::PairedTTest test;  // disc vs fg
};

// Per-episode ROC-AUC of M_fg and M_disc (computed from high-level features)
// as pixel scorers of the query ground truth.
inline std::vector<PriorBenchRow> bench_prior(const synth::GeneratorConfig& base_cfg, std::span<const double> sigmas,
                                              std::size_t n_episodes, std::size_t threads = 1) {
  if (n_episodes < 1) throw ContractError("bench_prior: need at least one episode");
  std::vector<PriorBenchRow> rows;
  for (double sigma : sigmas) {
    auto cfg = base_cfg;
    cfg.sigma = sigma;
    const synth::EpisodeGenerator gen(cfg);
    PriorBenchRow row;
    row.sigma = sigma;
    row.auc_fg.resize(n_episodes);
    row.auc_disc.resize(n_episodes);
    parallel_for(n_episodes, threads, [&](std::size_t i) {
      const auto ep = gen.generate(synth::Split::Novel, i);
      std::vector<SupportView<double>> views;
      for (const auto& s : ep.supports) views.push_back({&s.feat_high, &s.mask});
      const auto pack = prior_pack<double>(ep.query_feat_high, views);
      row.auc_fg[i] = stats::roc_auc(pack.fg, ep.query_gt);
      row.auc_disc[i] = stats::roc_auc(pack.disc, ep.query_gt);
    });
    row.mean_fg = stats::mean(row.auc_fg);
    row.std_fg = stats::stddev(row.auc_fg);
    row.mean_disc = stats::mean(row.auc_disc);
    row.std_disc = stats::stddev(row.auc_disc);
    row.test = stats::paired_t_test(row.auc_disc, row.auc_fg);
    rows.push_back(std::move(row));
  }
  return rows;
}

struct SimilarityReport {
  std::vector<double> before;  // per episode
  std::vector<double> after;
  double mean_before = 0;
  double mean_after = 0;
};

// Mean cosine between query-FG pixel features and the support FG prototype,
// measured on the features entering and leaving the first AE block.
template <typename T>
SimilarityReport bench_similarity(ToyModel<T>& model, const synth::EpisodeGenerator& gen, std::size_t n_episodes,
                                  PriorSource source = PriorSource::Discriminative,
                                  synth::Split split = synth::Split::Novel) {
  SimilarityReport r;
  for (std::size_t i = 0; i < n_episodes; ++i) {
    const auto ep = gen.generate(split, i).template cast<T>();
    Tape<T> tape;
    const auto prior = prior_for(ep, source);
    auto out = model_forward(tape, model, ep, true, &prior);
    const auto gt = mask_to_feature_res(ep.query_gt, ep.height(), ep.width());
    auto fg_similarity = [&](const Var<T>& q, const Var<T>& s) {
      auto proto = masked_gap(s, out.support_mask);
      const auto cos = row_cosine(q, proto).value();
      double acc = 0;
      std::size_t n = 0;
      for (std::size_t p = 0; p < gt.size(); ++p)
        if (gt[p] > T{0.5}) {
          acc += static_cast<double>(cos[p]);
          ++n;
        }
      return n ? acc / static_cast<double>(n) : 0.0;
    };
    r.before.push_back(fg_similarity(out.first_in_q, out.first_in_s));
    r.after.push_back(fg_similarity(out.first_out_q, out.first_out_s));
  }
  r.mean_before = stats::mean(r.before);
  r.mean_after = stats::mean(r.after);
  return r;
}

struct LambdaRow {
  double lambda = 0;
  std::vector<double> miou;  // one per seed
  double mean_miou = 0;
};

// One train + eval per (λ, seed); every λ sees the same seeds, hence the
// same episode streams and initializations.
template <typename T = double>
std::vector<LambdaRow> sweep_lambda(const TrainConfig& cfg, std::span<const double> lambdas,
                                    std::span<const std::uint64_t> seeds,
                                    const std::function<void(const LambdaRow&, std::size_t)>& on_run = {}) {
  std::vector<LambdaRow> rows;
  for (double lam : lambdas) {
    LambdaRow row;
    row.lambda = lam;
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      auto c = cfg;
      c.lambda = lam;
      c.seed = seeds[s];
      row.miou.push_back(train<T>(c).novel_miou);
      if (on_run) on_run(row, s);
    }
    row.mean_miou = stats::mean(row.miou);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace aenet
