#include <gtest/gtest.h>

#include <random>

#include "aenet/aenet.hpp"
#include "oracle.hpp"

using namespace aenet;

namespace {

synth::GeneratorConfig tiny_generator(std::uint64_t seed, std::size_t shots = 1) {
  synth::GeneratorConfig g;
  g.channels = 4;
  g.height = 8;
  g.width = 8;
  g.shots = shots;
  g.n_base_classes = 2;
  g.n_novel_classes = 1;
  g.n_bg_classes_per_image = 1;
  g.seed = seed;
  return g;
}

}  // namespace

TEST(CrossAttention, SingleForegroundPixelTakesAllWeight) {
  std::mt19937_64 rng(1);
  CrossAttnBlock<double> b(4, rng);
  const auto xq = oracle::random_tensor(rng, {6, 4});
  const auto xs = oracle::random_tensor(rng, {9, 4});
  Tensor<double> ms({9});
  ms[5] = 1;
  AttentionProbe<double> probe;
  Tape<double> tape;
  xattn_forward(tape, b, tape.constant(xq), tape.constant(xs), ms, &probe);
  const auto d = probe.dense();
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 9; ++j) EXPECT_EQ(d.at(i, j), j == 5 ? 1.0 : 0.0);
}

TEST(CrossAttention, IdenticalKeysGiveUniformWeights) {
  std::mt19937_64 rng(2);
  CrossAttnBlock<double> b(4, rng);
  const auto xq = oracle::random_tensor(rng, {5, 4});
  Tensor<double> xs({8, 4});
  for (std::size_t p = 0; p < 8; ++p)
    for (std::size_t k = 0; k < 4; ++k) xs.at(p, k) = 0.1 * static_cast<double>(k) - 0.2;
  Tensor<double> ms({8});
  for (std::size_t j : {0, 2, 3, 7}) ms[j] = 1;
  AttentionProbe<double> probe;
  Tape<double> tape;
  xattn_forward(tape, b, tape.constant(xq), tape.constant(xs), ms, &probe);
  for (double w : probe.weights.values()) EXPECT_NEAR(w, 0.25, 1e-12);
}

TEST(CrossAttention, MatchesDirectOracle) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 50; ++i) {
    const std::size_t c = 4 + i % 4, nq = 6 + i % 5, ns = 7 + i % 3;
    CrossAttnBlock<double> b(c, rng);
    for (auto* l : {&b.proj_q, &b.proj_k, &b.proj_v, &b.out, &b.ffn.fc1, &b.ffn.fc2})
      l->bias.value = oracle::random_tensor(rng, l->bias.value.shape(), -0.3, 0.3);
    const auto xq = oracle::random_tensor(rng, {nq, c}, -2, 2);
    const auto xs = oracle::random_tensor(rng, {ns, c}, -2, 2);
    const auto ms = oracle::random_mask(rng, 1, ns, true).reshaped({ns});
    AttentionProbe<double> probe;
    Tape<double> tape;
    auto out = xattn_forward(tape, b, tape.constant(xq), tape.constant(xs), ms, &probe);
    const auto ref = oracle::cross_attention(b, oracle::from_tensor(xq), oracle::from_tensor(xs), oracle::flat(ms));
    EXPECT_LT(oracle::max_abs_diff(ref.out, out.value()), 1e-9);
    EXPECT_LT(oracle::max_abs_diff(ref.weights, probe.dense()), 1e-12);
  }
}

TEST(CrossAttention, BackgroundKeysReceiveExactlyZero) {
  std::mt19937_64 rng(4);
  CrossAttnBlock<double> b(6, rng);
  for (int i = 0; i < 100; ++i) {
    const auto xq = oracle::random_tensor(rng, {10, 6}, -5, 5);
    const auto xs = oracle::random_tensor(rng, {12, 6}, -5, 5);
    const auto ms = oracle::random_mask(rng, 1, 12, true).reshaped({12});
    AttentionProbe<double> probe;
    Tape<double> tape;
    xattn_forward(tape, b, tape.constant(xq), tape.constant(xs), ms, &probe);
    const auto d = probe.dense();
    for (std::size_t r = 0; r < 10; ++r) {
      double total = 0;
      for (std::size_t j = 0; j < 12; ++j) {
        if (ms[j] == 0) ASSERT_EQ(d.at(r, j), 0.0);
        total += d.at(r, j);
      }
      ASSERT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(CrossAttention, EmptySupportMaskIsAnError) {
  std::mt19937_64 rng(5);
  CrossAttnBlock<double> b(4, rng);
  Tape<double> tape;
  EXPECT_THROW(xattn_forward(tape, b, tape.constant(Tensor<double>({3, 4})), tape.constant(Tensor<double>({5, 4})),
                             Tensor<double>({5})),
               EmptyMaskError);
  EXPECT_THROW(xattn_forward(tape, b, tape.constant(Tensor<double>({3, 4})), tape.constant(Tensor<double>({5, 4})),
                             Tensor<double>::full({4}, 1.0)),
               DimensionError);
}

TEST(ToyModel, PredictionsAreProbabilities) {
  synth::EpisodeGenerator gen(tiny_generator(1, 2));
  ToyModel<double> model(ModelConfig{4, 2, 1.0, 3});
  for (std::size_t i = 0; i < 10; ++i) {
    const auto ep = gen.generate(synth::Split::Novel, i);
    for (bool ae : {false, true}) {
      Tape<double> tape;
      const auto out = model_forward(tape, model, ep, ae);
      EXPECT_EQ(out.pred.value().size(), 64u);
      for (double p : out.pred.value().values()) {
        ASSERT_GE(p, 0.0);
        ASSERT_LE(p, 1.0);
      }
      EXPECT_EQ(out.aux.size(), ae ? 2u : 0u);
      EXPECT_EQ(out.support_mask.size(), 2u * 64u);
    }
  }
}

TEST(ToyModel, ForwardIsDeterministic) {
  const auto ep = synth::EpisodeGenerator(tiny_generator(2)).generate(synth::Split::Base, 3);
  ToyModel<double> a(ModelConfig{4, 2, 1.0, 9}), b(ModelConfig{4, 2, 1.0, 9});
  Tape<double> t1, t2;
  EXPECT_EQ(model_forward(t1, a, ep, true).pred.value(), model_forward(t2, b, ep, true).pred.value());
}

TEST(ToyModel, BaselineInitIgnoresThePlugIn) {
  ToyModel<double> a(ModelConfig{4, 2, 1.0, 11}), b(ModelConfig{4, 2, 1.0, 11});
  auto pa = a.baseline_params(), pb = b.baseline_params();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value, pb[i]->value);
  EXPECT_GT(parameter_count(a.params(true)), parameter_count(a.params(false)));
}

TEST(ToyModel, DisabledPlugInReceivesNoGradient) {
  const auto ep = synth::EpisodeGenerator(tiny_generator(3)).generate(synth::Split::Base, 0);
  ToyModel<double> model(ModelConfig{4, 2, 1.0, 4});
  for (auto* p : model.params(true)) p->zero_grad();
  Tape<double> tape;
  const auto out = model_forward(tape, model, ep, false);
  const auto gt = mask_to_feature_res(ep.query_gt, 8, 8);
  tape.backward(total_loss<double>(out.pred, gt, out.aux, LossConfig{}));
  for (auto* p : model.ae_params())
    for (double g : p->grad.values()) ASSERT_EQ(g, 0.0);
  double base_mass = 0;
  for (auto* p : model.baseline_params())
    for (double g : p->grad.values()) base_mass += std::abs(g);
  EXPECT_GT(base_mass, 0.0);
}

TEST(ToyModel, PriorOverrideIsUsed) {
  const auto ep = synth::EpisodeGenerator(tiny_generator(4)).generate(synth::Split::Base, 0);
  ToyModel<double> model(ModelConfig{4, 1, 1.0, 4});
  const auto zero = Tensor<double>({2, 8, 8});
  Tape<double> t1, t2;
  const auto a = model_forward(t1, model, ep, false).pred.value();
  const auto b = model_forward(t2, model, ep, false, &zero).pred.value();
  EXPECT_GT(max_abs_diff(a, b), 0.0);
  const auto bad = Tensor<double>({1, 8, 8});
  Tape<double> t3;
  EXPECT_THROW(model_forward(t3, model, ep, false, &bad), DimensionError);
}

TEST(ToyModel, MaskPoolingToFeatureResolution) {
  Tensor<double> m({4, 4});
  m.at(0, 0) = 1;
  m.at(0, 1) = 1;
  m.at(3, 3) = 1;
  const auto p = mask_to_feature_res(m, 2, 2);
  EXPECT_DOUBLE_EQ(p.at(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(p.at(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(p.at(1, 1), 0.25);
  EXPECT_THROW(mask_to_feature_res(m, 3, 3), DimensionError);
}
