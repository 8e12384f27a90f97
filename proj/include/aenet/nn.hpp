#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

#include "aenet/autodiff.hpp"
#include "aenet/ops.hpp"

namespace aenet {

template <typename T>
using ParamList = std::vector<Parameter<T>*>;

// Xavier-uniform weights, zero bias.
template <typename T>
struct LinearLayer {
  Parameter<T> weight;  // [out × in]
  Parameter<T> bias;    // [out]

  LinearLayer() = default;
  LinearLayer(std::size_t in, std::size_t out, std::mt19937_64& rng)
      : weight(Tensor<T>({out, in})), bias(Tensor<T>({out})) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto& w : weight.value.values()) w = static_cast<T>(u(rng));
  }

  std::size_t in_features() const { return weight.value.dim(1); }
  std::size_t out_features() const { return weight.value.dim(0); }

  void collect(ParamList<T>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }

  // Set W to the [I 0] selector (out <= in) and bias to zero.
  void set_identity() {
    weight.value.fill(T{0});
    bias.value.fill(T{0});
    for (std::size_t i = 0; i < std::min(in_features(), out_features()); ++i)
      weight.value.at(i, i) = T{1};
  }

  void set_zero() {
    weight.value.fill(T{0});
    bias.value.fill(T{0});
  }
};

// x[n × in] · Wᵀ + b
template <typename T>
Var<T> linear(Tape<T>& tape, LinearLayer<T>& layer, const Var<T>& x) {
  if (x.value().ndim() != 2 || x.value().dim(1) != layer.in_features())
    throw DimensionError("linear: input " + shape_str(x.shape()) + " for layer " +
                         std::to_string(layer.in_features()) + "->" +
                         std::to_string(layer.out_features()));
  auto w = tape.param(layer.weight);
  auto b = tape.param(layer.bias);
  return add_rowvec(matmul(x, transpose(w)), b);
}

template <typename T>
struct LayerNormParams {
  Parameter<T> gamma;
  Parameter<T> beta;

  LayerNormParams() = default;
  explicit LayerNormParams(std::size_t c)
      : gamma(Tensor<T>::full({c}, T{1})), beta(Tensor<T>({c})) {}

  void collect(ParamList<T>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }
};

template <typename T>
Var<T> layer_norm(Tape<T>& tape, LayerNormParams<T>& ln, const Var<T>& x) {
  return layer_norm(x, tape.param(ln.gamma), tape.param(ln.beta));
}

// C → 4C → C with ReLU.
template <typename T>
struct FeedForward {
  LinearLayer<T> fc1;
  LinearLayer<T> fc2;

  FeedForward() = default;
  FeedForward(std::size_t c, std::mt19937_64& rng) : fc1(c, 4 * c, rng), fc2(4 * c, c, rng) {}

  void collect(ParamList<T>& out) {
    fc1.collect(out);
    fc2.collect(out);
  }
};

template <typename T>
Var<T> feed_forward(Tape<T>& tape, FeedForward<T>& ffn, const Var<T>& x) {
  return linear(tape, ffn.fc2, relu(linear(tape, ffn.fc1, x)));
}

template <typename T>
std::size_t parameter_count(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto* p : params) n += p->value.size();
  return n;
}

}  // namespace aenet
