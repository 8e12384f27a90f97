#pragma once

// Straight-line reference implementations used as test oracles. Everything
// here works on nested std::vector<double> with explicit loops and shares no
// code with the library's ops; library tensors are only read for their raw
// values.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <vector>

#include "aenet/aenet.hpp"

namespace oracle {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;  // row-major rows

inline Mat from_tensor(const aenet::Tensor<double>& t) {
  const std::size_t r = t.dim(0), c = t.dim(1);
  Mat m(r, Vec(c));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) m[i][j] = t[i * c + j];
  return m;
}

inline Vec flat(const aenet::Tensor<double>& t) { return Vec(t.values().begin(), t.values().end()); }

// C×H×W feature map → HW rows of length C.
inline Mat pixels(const aenet::Tensor<double>& f) {
  const std::size_t c = f.dim(0), hw = f.dim(1) * f.dim(2);
  Mat m(hw, Vec(c));
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t p = 0; p < hw; ++p) m[p][k] = f[k * hw + p];
  return m;
}

inline Mat matmul(const Mat& a, const Mat& b) {
  const std::size_t n = a.size(), k = b.size(), m = b.empty() ? 0 : b[0].size();
  Mat c(n, Vec(m, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0;
      for (std::size_t t = 0; t < k; ++t) s += a[i][t] * b[t][j];
      c[i][j] = s;
    }
  return c;
}

inline Mat transpose(const Mat& a) {
  Mat t(a.empty() ? 0 : a[0].size(), Vec(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) t[j][i] = a[i][j];
  return t;
}

inline double dot(const Vec& a, const Vec& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(const Vec& a) { return std::sqrt(dot(a, a)); }

inline double cosine(const Vec& a, const Vec& b) {
  const double v = dot(a, b) / (norm(a) * norm(b) + 1e-8);
  return std::max(-1.0, std::min(1.0, v));
}

inline Vec softmax(const Vec& x) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : x) mx = std::max(mx, v);
  Vec e(x.size());
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += e[i] = std::exp(x[i] - mx);
  for (auto& v : e) v /= s;
  return e;
}

// y_i = Σ_j W[o][j] x_i[j] + b[o], with W stored [out × in].
inline Mat linear(const Mat& x, const aenet::LinearLayer<double>& l) {
  const std::size_t out = l.weight.value.dim(0), in = l.weight.value.dim(1);
  Mat y(x.size(), Vec(out));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t o = 0; o < out; ++o) {
      double s = l.bias.value[o];
      for (std::size_t j = 0; j < in; ++j) s += l.weight.value[o * in + j] * x[i][j];
      y[i][o] = s;
    }
  return y;
}

inline Mat layer_norm(const Mat& x, const aenet::LayerNormParams<double>& ln, double eps = 1e-5) {
  Mat y = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double c = static_cast<double>(x[i].size());
    double mu = 0;
    for (double v : x[i]) mu += v;
    mu /= c;
    double var = 0;
    for (double v : x[i]) var += (v - mu) * (v - mu);
    var /= c;
    for (std::size_t j = 0; j < x[i].size(); ++j)
      y[i][j] = ln.gamma.value[j] * (x[i][j] - mu) / std::sqrt(var + eps) + ln.beta.value[j];
  }
  return y;
}

inline Mat relu(Mat x) {
  for (auto& r : x)
    for (auto& v : r) v = std::max(0.0, v);
  return x;
}

inline Mat add(const Mat& a, const Mat& b) {
  Mat c = a;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) c[i][j] += b[i][j];
  return c;
}

inline Mat ffn(const Mat& x, const aenet::FeedForward<double>& f) { return linear(relu(linear(x, f.fc1)), f.fc2); }

// ---------------------------------------------------------------------------
// Prior generator: weighted GAP, cosine, min-max scaling, relu difference.
// ---------------------------------------------------------------------------

struct Prior {
  Vec fg, bg, disc, proto_fg, proto_bg;
};

inline Vec minmax(const Vec& s) {
  double lo = s[0], hi = s[0];
  for (double v : s) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  Vec out(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out[i] = (s[i] - lo) / (hi - lo + 1e-7);
  return out;
}

// `shots` are pixel rows, `masks` the matching soft masks; pooling is over
// every pixel of every shot.
inline Prior prior(const Mat& query, const std::vector<Mat>& shots, const std::vector<Vec>& masks) {
  const std::size_t c = query[0].size();
  Prior r;
  r.proto_fg.assign(c, 0.0);
  r.proto_bg.assign(c, 0.0);
  double wf = 0, wb = 0;
  for (std::size_t k = 0; k < shots.size(); ++k)
    for (std::size_t p = 0; p < shots[k].size(); ++p) {
      const double m = masks[k][p];
      wf += m;
      wb += 1.0 - m;
      for (std::size_t j = 0; j < c; ++j) {
        r.proto_fg[j] += m * shots[k][p][j];
        r.proto_bg[j] += (1.0 - m) * shots[k][p][j];
      }
    }
  for (std::size_t j = 0; j < c; ++j) {
    r.proto_fg[j] /= wf;
    r.proto_bg[j] /= wb;
  }
  Vec sf(query.size()), sb(query.size());
  for (std::size_t p = 0; p < query.size(); ++p) {
    sf[p] = cosine(query[p], r.proto_fg);
    sb[p] = cosine(query[p], r.proto_bg);
  }
  r.fg = minmax(sf);
  r.bg = minmax(sb);
  r.disc.resize(query.size());
  for (std::size_t p = 0; p < query.size(); ++p) r.disc[p] = std::max(0.0, r.fg[p] - r.bg[p]);
  return r;
}

// ---------------------------------------------------------------------------
// Ambiguity eliminator block on token matrices, step by step.
// ---------------------------------------------------------------------------

struct AE {
  Mat f_q, f_s;
  Vec m_disc, weights, p_q_fg, p_s_fg, p_fused;
  double alpha = 0;
};

inline AE ae_block(const aenet::AEBlock<double>& b, const Mat& xq, const Mat& xs, const Vec& ms, double temperature) {
  AE r;
  const Mat nq = layer_norm(xq, b.ln1);
  const Mat ns = layer_norm(xs, b.ln1);
  const Mat q = linear(ns, b.proj_q);  // from support
  const Mat k = linear(nq, b.proj_k);  // from query
  const Mat v = linear(nq, b.proj_v);
  const Prior pg = prior(k, {q}, {ms});
  r.m_disc = pg.disc;
  r.p_s_fg = pg.proto_fg;
  Vec scaled = pg.disc;
  for (auto& x : scaled) x /= temperature;
  r.weights = softmax(scaled);
  const std::size_t c = v[0].size();
  r.p_q_fg.assign(c, 0.0);
  for (std::size_t i = 0; i < v.size(); ++i)
    for (std::size_t j = 0; j < c; ++j) r.p_q_fg[j] += r.weights[i] * v[i][j];
  r.alpha = (cosine(r.p_s_fg, r.p_q_fg) + 1.0) / 2.0;
  r.p_fused.resize(c);
  for (std::size_t j = 0; j < c; ++j) r.p_fused[j] = r.alpha * r.p_s_fg[j] + (1.0 - r.alpha) * r.p_q_fg[j];
  auto with_proto = [&](const Mat& x) {
    Mat out = x;
    for (auto& row : out) row.insert(row.end(), r.p_fused.begin(), r.p_fused.end());
    return out;
  };
  const Mat q1 = add(xq, linear(with_proto(nq), b.fuse_q));
  const Mat s1 = add(xs, linear(with_proto(ns), b.fuse_s));
  r.f_q = add(q1, ffn(layer_norm(q1, b.ln2), b.ffn));
  r.f_s = add(s1, ffn(layer_norm(s1, b.ln2), b.ffn));
  return r;
}

// ---------------------------------------------------------------------------
// Cross attention with additive -inf masking of support BG keys.
// ---------------------------------------------------------------------------

struct Attention {
  Mat out;
  Mat weights;  // [HW_q × HW_s], zero on masked keys
};

inline Attention cross_attention(const aenet::CrossAttnBlock<double>& b, const Mat& xq, const Mat& xs, const Vec& ms) {
  const double inf = std::numeric_limits<double>::infinity();
  const Mat nq = layer_norm(xq, b.ln1);
  const Mat ns = layer_norm(xs, b.ln1);
  const Mat q = linear(nq, b.proj_q);
  const Mat k = linear(ns, b.proj_k);
  const Mat v = linear(ns, b.proj_v);
  const double scale = 1.0 / std::sqrt(static_cast<double>(q[0].size()));
  Attention r;
  r.weights.assign(q.size(), Vec(k.size(), 0.0));
  for (std::size_t i = 0; i < q.size(); ++i) {
    Vec s(k.size());
    for (std::size_t j = 0; j < k.size(); ++j) s[j] = ms[j] > 0 ? dot(q[i], k[j]) * scale : -inf;
    r.weights[i] = softmax(s);
  }
  const Mat mixed = matmul(r.weights, v);
  const Mat x = add(xq, linear(mixed, b.out));
  r.out = add(x, ffn(layer_norm(x, b.ln2), b.ffn));
  return r;
}

// ---------------------------------------------------------------------------
// Losses and blur
// ---------------------------------------------------------------------------

inline double dice(const Vec& p, const Vec& g, double smooth) {
  double pg = 0, ps = 0, gs = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    pg += p[i] * g[i];
    ps += p[i];
    gs += g[i];
  }
  return 1.0 - (2.0 * pg + smooth) / (ps + gs + smooth);
}

inline double bce(const Vec& p, const Vec& g, double eps) {
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::min(1.0 - eps, std::max(eps, p[i]));
    s += -(g[i] * std::log(q) + (1.0 - g[i]) * std::log(1.0 - q));
  }
  return s / static_cast<double>(p.size());
}

// Direct 2-D convolution with the outer-product Gaussian kernel and
// clamp-to-edge sampling.
inline Mat blur2d(const Mat& m, double sigma) {
  const int r = static_cast<int>(std::ceil(3 * sigma));
  const int h = static_cast<int>(m.size()), w = static_cast<int>(m[0].size());
  double z = 0;
  for (int t = -r; t <= r; ++t) z += std::exp(-(t * t) / (2 * sigma * sigma));
  Mat out(m.size(), Vec(m[0].size(), 0.0));
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      double acc = 0;
      for (int a = -r; a <= r; ++a)
        for (int b = -r; b <= r; ++b) {
          const double k = std::exp(-(a * a) / (2 * sigma * sigma)) * std::exp(-(b * b) / (2 * sigma * sigma)) / (z * z);
          acc += k * m[std::clamp(i + a, 0, h - 1)][std::clamp(j + b, 0, w - 1)];
        }
      out[i][j] = acc;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Random instances
// ---------------------------------------------------------------------------

inline aenet::Tensor<double> random_tensor(std::mt19937_64& rng, aenet::Shape shape, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  aenet::Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = u(rng);
  return t;
}

// Soft mask in [0,1] with at least one strong FG and one strong BG pixel.
inline aenet::Tensor<double> random_mask(std::mt19937_64& rng, std::size_t h, std::size_t w, bool binary = false) {
  std::uniform_real_distribution<double> u(0, 1);
  aenet::Tensor<double> m({h, w});
  for (auto& v : m.values()) v = binary ? (u(rng) < 0.4 ? 1.0 : 0.0) : u(rng);
  m[0] = 1.0;
  m[m.size() - 1] = 0.0;
  return m;
}

inline double max_abs_diff(const Vec& a, const aenet::Tensor<double>& b) {
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

inline double max_abs_diff(const Mat& a, const aenet::Tensor<double>& b) {
  double d = 0;
  std::size_t k = 0;
  for (const auto& row : a)
    for (double v : row) d = std::max(d, std::abs(v - b[k++]));
  return d;
}

}  // namespace oracle
