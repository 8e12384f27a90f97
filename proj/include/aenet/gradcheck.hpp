#pragma once

// Central finite-difference verification of the tape's gradients.
//
// Every check treats its inputs as Parameters, builds a scalar loss on a fresh
// tape, and compares the analytic gradient at randomly chosen coordinates
// with (L(x + h) - L(x - h)) / 2h. The reported error over the sampled
// coordinates is ‖a - n‖∞ / max(‖a‖∞, ‖n‖∞).
//
// A central difference is meaningless across a kink, so a coordinate whose
// ±h evaluations take a different relu/clamp/min-max branch than the base
// point (per the tape's branch signature) is skipped and another one drawn.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "aenet/ae.hpp"
#include "aenet/losses.hpp"
#include "aenet/nn.hpp"
#include "aenet/ops.hpp"
#include "aenet/prior.hpp"
#include "aenet/synth.hpp"
#include "aenet/xattn.hpp"

namespace aenet::gradcheck {

using Tensord = Tensor<double>;
using Vard = Var<double>;
using Taped = Tape<double>;
using LossFn = std::function<Vard(Taped&)>;

struct Options {
  double h = 1e-4;
  double tol = 1e-4;
  std::size_t points = 20;
};

struct Result {
  std::string name;
  double error = 0;
  std::size_t points = 0;
  std::size_t skipped = 0;  // coordinates rejected for crossing a kink
  bool passed = false;
};

// Sum of y ⊙ r for a fixed random r, turning any output into a scalar whose
// gradient exercises every output element.
inline Vard project(const Vard& y, const Tensord& r) {
  auto& tape = *y.tape();
  return sum(mul(y, tape.constant(r.reshaped(y.shape()))));
}

inline Tensord random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensord t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

// Like random_tensor, but every entry keeps at least `gap` away from zero.
inline Tensord away_from_zero(std::mt19937_64& rng, Shape shape, double gap = 0.05) {
  auto t = random_tensor(rng, std::move(shape), gap, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (std::size_t i = 0; i < t.size(); ++i)
    if (sign(rng)) t[i] = -t[i];
  return t;
}

inline Result check(const std::string& name, const LossFn& loss_fn, const ParamList<double>& params,
                    std::mt19937_64& rng, const Options& opt = {}) {
  for (auto* p : params) p->zero_grad();
  std::uint64_t base_signature = 0;
  {
    Taped tape;
    auto loss = loss_fn(tape);
    base_signature = tape.branch_signature();
    tape.backward(loss);
  }
  std::size_t total = 0;
  for (auto* p : params) total += p->value.size();
  if (total == 0) throw ContractError("gradcheck: no parameters to check");

  struct Eval {
    double loss;
    std::uint64_t signature;
  };
  auto eval = [&] {
    Taped tape;
    const double v = loss_fn(tape).value().item();
    return Eval{v, tape.branch_signature()};
  };

  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  double max_diff = 0, max_a = 0, max_n = 0;
  std::size_t accepted = 0, skipped = 0;
  const std::size_t max_draws = 50 * opt.points + 100;
  for (std::size_t draw = 0; accepted < opt.points && draw < max_draws; ++draw) {
    std::size_t flat = pick(rng);
    std::size_t pi = 0;
    while (flat >= params[pi]->value.size()) flat -= params[pi++]->value.size();
    auto& p = *params[pi];
    const double saved = p.value[flat];
    p.value[flat] = saved + opt.h;
    const auto up = eval();
    p.value[flat] = saved - opt.h;
    const auto down = eval();
    p.value[flat] = saved;
    if (up.signature != base_signature || down.signature != base_signature) {
      ++skipped;
      continue;
    }
    ++accepted;
    const double numeric = (up.loss - down.loss) / (2 * opt.h);
    const double analytic = p.grad[flat];
    max_diff = std::max(max_diff, std::abs(analytic - numeric));
    max_a = std::max(max_a, std::abs(analytic));
    max_n = std::max(max_n, std::abs(numeric));
  }
  for (auto* p : params) p->zero_grad();
  const double scale = std::max(max_a, max_n);
  Result r{name, scale > 0 ? max_diff / scale : 0.0, accepted, skipped, false};
  r.passed = accepted == opt.points && std::isfinite(r.error) && r.error < opt.tol;
  return r;
}

// ---------------------------------------------------------------------------
// Per-op suite
// ---------------------------------------------------------------------------

namespace detail {

struct Inputs {
  std::vector<Parameter<double>> store;

  explicit Inputs(std::vector<Tensord> values) {
    store.reserve(values.size());
    for (auto& v : values) store.push_back(Parameter<double>(std::move(v)));
  }
  ParamList<double> list() {
    ParamList<double> out;
    for (auto& p : store) out.push_back(&p);
    return out;
  }
  Vard operator()(Taped& tape, std::size_t i) { return tape.param(store[i]); }
};

// Distinct values spaced well beyond h, so argmin/argmax never flip.
inline Tensord spread(std::mt19937_64& rng, std::size_t n) {
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(n - 1);
  std::shuffle(v.begin(), v.end(), rng);
  std::uniform_real_distribution<double> jitter(-0.2 / static_cast<double>(n), 0.2 / static_cast<double>(n));
  for (auto& x : v) x += jitter(rng);
  return Tensord({n}, std::span<const double>(v));
}

}  // namespace detail

inline std::vector<Result> op_suite(std::uint64_t seed = 0, const Options& opt = {}) {
  std::mt19937_64 rng(seed);
  std::vector<Result> out;
  auto rt = [&](Shape s, double lo = -1, double hi = 1) { return random_tensor(rng, std::move(s), lo, hi); };

  // Each case: name, input tensors, graph producing a tensor to be projected.
  auto run = [&](const std::string& name, std::vector<Tensord> in,
                 const std::function<Vard(Taped&, detail::Inputs&)>& graph) {
    detail::Inputs inputs(std::move(in));
    Tensord r;
    {
      Taped probe;
      r = random_tensor(rng, graph(probe, inputs).shape());
    }
    LossFn loss = [&](Taped& t) { return project(graph(t, inputs), r); };
    out.push_back(check(name, loss, inputs.list(), rng, opt));
  };

  run("add", {rt({3, 4}), rt({3, 4})}, [](Taped& t, auto& x) { return add(x(t, 0), x(t, 1)); });
  run("sub", {rt({3, 4}), rt({3, 4})}, [](Taped& t, auto& x) { return sub(x(t, 0), x(t, 1)); });
  run("mul", {rt({3, 4}), rt({3, 4})}, [](Taped& t, auto& x) { return mul(x(t, 0), x(t, 1)); });
  run("div", {rt({3, 4}), rt({3, 4}, 0.5, 2.0)}, [](Taped& t, auto& x) { return div(x(t, 0), x(t, 1)); });
  run("scale", {rt({5})}, [](Taped& t, auto& x) { return scale(x(t, 0), 2.5); });
  run("add_scalar", {rt({5})}, [](Taped& t, auto& x) { return add_scalar(x(t, 0), 0.3); });
  run("one_minus", {rt({5})}, [](Taped& t, auto& x) { return one_minus(x(t, 0)); });
  run("scale_by", {rt({4}), rt({})}, [](Taped& t, auto& x) { return scale_by(x(t, 0), x(t, 1)); });
  run("relu", {away_from_zero(rng, {3, 5})}, [](Taped& t, auto& x) { return relu(x(t, 0)); });
  run("sigmoid", {rt({3, 5}, -4, 4)}, [](Taped& t, auto& x) { return sigmoid(x(t, 0)); });
  run("log", {rt({6}, 0.2, 3.0)}, [](Taped& t, auto& x) { return log(x(t, 0)); });
  run("exp", {rt({6})}, [](Taped& t, auto& x) { return exp(x(t, 0)); });
  {
    // Entries inside and outside [-0.5, 0.5], none within 0.05 of a bound.
    Tensord v({8}, {-0.9, -0.62, -0.3, -0.05, 0.1, 0.41, 0.7, 0.95});
    run("clamp", {v}, [](Taped& t, auto& x) { return clamp(x(t, 0), -0.5, 0.5); });
  }
  run("sum", {rt({3, 4})}, [](Taped& t, auto& x) { return sum(x(t, 0)); });
  run("mean", {rt({3, 4})}, [](Taped& t, auto& x) { return mean(x(t, 0)); });
  run("matmul", {rt({4, 5}), rt({5, 3})}, [](Taped& t, auto& x) { return matmul(x(t, 0), x(t, 1)); });
  run("transpose", {rt({3, 5})}, [](Taped& t, auto& x) { return transpose(x(t, 0)); });
  run("reshape", {rt({2, 6})}, [](Taped& t, auto& x) { return reshape(x(t, 0), {3, 4}); });
  run("concat0", {rt({2, 3}), rt({4, 3})}, [](Taped& t, auto& x) { return concat0(x(t, 0), x(t, 1)); });
  run("concat_channels", {rt({2, 3, 3}), rt({1, 3, 3})},
      [](Taped& t, auto& x) { return concat_channels(x(t, 0), x(t, 1)); });
  run("slice0", {rt({5, 2})}, [](Taped& t, auto& x) { return slice0(x(t, 0), 1, 4); });
  run("concat_cols", {rt({3, 2}), rt({3, 4})}, [](Taped& t, auto& x) { return concat_cols(x(t, 0), x(t, 1)); });
  run("slice_cols", {rt({3, 5})}, [](Taped& t, auto& x) { return slice_cols(x(t, 0), 1, 3); });
  run("gather_rows", {rt({5, 3})}, [](Taped& t, auto& x) { return gather_rows(x(t, 0), {4, 1, 1, 3}); });
  run("broadcast_rows", {rt({4})}, [](Taped& t, auto& x) { return broadcast_rows(x(t, 0), 3); });
  run("add_rowvec", {rt({3, 4}), rt({4})}, [](Taped& t, auto& x) { return add_rowvec(x(t, 0), x(t, 1)); });
  {
    const auto w = rt({5}, 0.0, 1.0);
    run("weighted_sum_rows", {rt({5, 3})}, [w](Taped& t, auto& x) { return weighted_sum_rows(x(t, 0), w); });
  }
  run("channels_to_tokens", {rt({3, 2, 4})}, [](Taped& t, auto& x) { return channels_to_tokens(x(t, 0)); });
  run("tokens_to_channels", {rt({8, 3})}, [](Taped& t, auto& x) { return tokens_to_channels(x(t, 0), 2, 4); });
  run("upsample_nearest", {rt({2, 2, 3})}, [](Taped& t, auto& x) { return upsample_nearest(x(t, 0), 2); });
  run("avgpool", {rt({2, 4, 6})}, [](Taped& t, auto& x) { return avgpool(x(t, 0), 2); });
  run("softmax", {rt({3, 7}, -2, 2)}, [](Taped& t, auto& x) { return softmax(x(t, 0)); });
  run("layer_norm", {rt({4, 6}, -2, 2), rt({6}, 0.5, 1.5), rt({6})},
      [](Taped& t, auto& x) { return layer_norm(x(t, 0), x(t, 1), x(t, 2), kLayerNormEps); });
  run("row_cosine", {rt({6, 4}), rt({4})}, [](Taped& t, auto& x) { return row_cosine(x(t, 0), x(t, 1)); });
  run("cosine", {rt({5}), rt({5})}, [](Taped& t, auto& x) { return cosine(x(t, 0), x(t, 1)); });
  run("minmax_norm", {detail::spread(rng, 9)}, [](Taped& t, auto& x) { return minmax_norm(x(t, 0)); });
  {
    const auto m = rt({6}, 0.0, 1.0);
    run("masked_gap", {rt({6, 3})}, [m](Taped& t, auto& x) { return masked_gap(x(t, 0), m); });
  }
  {
    Tensord m({9}, {1, 1, 0, 0, 1, 0, 0, 0, 1});
    run("prior_graph", {rt({9, 4}), rt({9, 4})}, [m](Taped& t, auto& x) {
      const SupportTokens<double> shot{x(t, 1), &m};
      auto g = prior_graph<double>(x(t, 0), std::span<const SupportTokens<double>>(&shot, 1));
      return concat0(concat0(g.fg, g.bg), concat0(g.disc, concat0(g.proto_fg, g.proto_bg)));
    });
  }
  {
    const auto gt = rt({10}, 0.0, 1.0);
    run("dice_loss", {rt({10}, 0.05, 0.95)}, [gt](Taped& t, auto& x) { return dice_loss(x(t, 0), gt, 1.0); });
    run("bce_loss", {rt({10}, 0.05, 0.95)}, [gt](Taped& t, auto& x) { return bce_loss(x(t, 0), gt, 1e-7); });
    run("total_loss", {rt({10}, 0.05, 0.95), rt({10}, 0.05, 0.95), rt({10}, 0.05, 0.95)},
        [gt](Taped& t, auto& x) {
          const std::vector<Vard> aux{x(t, 1), x(t, 2)};
          return total_loss<double>(x(t, 0), gt, aux, LossConfig{});
        });
  }
  {
    LinearLayer<double> layer(4, 3, rng);
    auto in = rt({5, 4});
    detail::Inputs x({in});
    ParamList<double> params = x.list();
    layer.collect(params);
    Tensord r = random_tensor(rng, {5, 3});
    out.push_back(check("linear", [&](Taped& t) { return project(linear(t, layer, x(t, 0)), r); }, params, rng, opt));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Composite graph: PG prior → input projection → AE → cross attention → head
// → Dice + λ·BCE, differentiated with respect to every model parameter.
// ---------------------------------------------------------------------------

struct CompositeSetup {
  synth::Episode<double> episode;
  ToyModel<double> model;
};

inline CompositeSetup composite_setup(std::uint64_t seed) {
  synth::GeneratorConfig g;
  g.channels = 4;
  g.height = 8;
  g.width = 8;
  g.sigma = 1.0;
  g.n_base_classes = 2;
  g.n_novel_classes = 1;
  g.n_bg_classes_per_image = 1;
  g.seed = seed;
  const synth::EpisodeGenerator gen(g);
  return CompositeSetup{gen.generate(synth::Split::Base, 0), ToyModel<double>(ModelConfig{4, 2, 1.0, seed + 7})};
}

inline Vard composite_loss(Taped& tape, CompositeSetup& s, double lambda = 1.0) {
  auto out = model_forward(tape, s.model, s.episode, true);
  const auto gt = mask_to_feature_res(s.episode.query_gt, s.episode.height(), s.episode.width());
  return total_loss<double>(out.pred, gt, out.aux, LossConfig{lambda, 1.0, 1e-7});
}

inline Result composite_check(std::uint64_t seed = 0, const Options& opt = {}) {
  auto setup = composite_setup(seed);
  std::mt19937_64 rng(seed ^ 0xC0FFEEULL);
  return check("composite PG+AE+attention+loss", [&](Taped& t) { return composite_loss(t, setup); },
               setup.model.params(true), rng, opt);
}

// Same composite loss, restricted to the first AE block's parameters.
inline Result composite_first_block_check(std::uint64_t seed = 0, const Options& opt = {}) {
  auto setup = composite_setup(seed);
  std::mt19937_64 rng(seed ^ 0xB10C1ULL);
  ParamList<double> params;
  setup.model.ae[0].collect(params);
  return check("composite, first AE block", [&](Taped& t) { return composite_loss(t, setup); }, params, rng, opt);
}

inline std::vector<Result> full_suite(std::uint64_t seed = 0, const Options& opt = {}) {
  auto out = op_suite(seed, opt);
  out.push_back(composite_check(seed, opt));
  out.push_back(composite_first_block_check(seed, opt));
  return out;
}

}  // namespace aenet::gradcheck
