#pragma once

// Synthetic few-shot episodes with controllable feature ambiguity.
//
// Each pixel's feature is a blend of its foreground class signature and the
// signature of the background region that owns it, weighted by a Gaussian-
// blurred ground-truth mask. The blur radius plays the role of a backbone's
// receptive field: the wider it is, the more FG and BG features mingle near
// object boundaries. High-level features are rendered with a 1.5× wider blur
// than mid-level ones.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "aenet/tensor.hpp"

namespace aenet::synth {

using Mask = Tensor<double>;
using FeatureMap = Tensor<double>;

inline constexpr double kHighLevelBlurScale = 1.5;
inline constexpr double kMinCoverage = 0.05;
inline constexpr double kMaxCoverage = 0.60;
inline constexpr int kMaskRetries = 100;
inline constexpr double kMaxSignatureCosine = 0.95;

enum class Split : std::uint8_t { Base = 0, Novel = 1 };

inline const char* split_name(Split s) { return s == Split::Base ? "base" : "novel"; }

inline Split parse_split(const std::string& s) {
  if (s == "base") return Split::Base;
  if (s == "novel") return Split::Novel;
  throw ContractError("split must be 'base' or 'novel', got '" + s + "'");
}

struct GeneratorConfig {
  std::size_t channels = 16;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t shots = 1;
  double sigma = 2.0;
  double noise_std = 0.05;
  std::size_t n_bg_classes_per_image = 3;
  std::size_t n_base_classes = 12;
  std::size_t n_novel_classes = 4;
  std::uint64_t seed = 0;

  void validate() const {
    if (channels < 2) throw ContractError("generator: channels must be >= 2");
    if (height < 8 || width < 8) throw ContractError("generator: height and width must be >= 8");
    if (shots < 1) throw ContractError("generator: shots must be >= 1");
    if (!(sigma >= 0)) throw ContractError("generator: sigma must be >= 0");
    if (!(noise_std >= 0)) throw ContractError("generator: noise_std must be >= 0");
    if (n_bg_classes_per_image < 1) throw ContractError("generator: n_bg_classes_per_image must be >= 1");
  }
};

struct ClassSignature {
  int id = 0;
  std::vector<double> vector;  // unit norm
};

// Disjoint base and novel signature pools. When the total number of classes
// fits in the channel count the signatures are an orthonormal set (a random
// rotation of the standard basis); otherwise they are random unit vectors
// with pairwise cosine below 0.95.
class ClassPool {
 public:
  static ClassPool create(const GeneratorConfig& cfg) {
    const std::size_t total = cfg.n_base_classes + cfg.n_novel_classes;
    const std::size_t c = cfg.channels;
    std::mt19937_64 rng(cfg.seed ^ 0x5EED'C1A5'5E5ULL);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<std::vector<double>> vecs;
    auto normalize = [](std::vector<double>& v) {
      double n = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
      for (auto& x : v) x /= n;
    };
    int attempts = 0;
    while (vecs.size() < total) {
      if (++attempts > 100000) throw ContractError("class pool: cannot place distinct signatures");
      std::vector<double> v(c);
      for (auto& x : v) x = gauss(rng);
      if (total <= c) {
        for (const auto& u : vecs) {  // Gram-Schmidt
          const double d = std::inner_product(v.begin(), v.end(), u.begin(), 0.0);
          for (std::size_t j = 0; j < c; ++j) v[j] -= d * u[j];
        }
        if (std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0)) < 1e-6) continue;
        normalize(v);
      } else {
        normalize(v);
        const bool distinct = std::all_of(vecs.begin(), vecs.end(), [&](const auto& u) {
          return std::inner_product(v.begin(), v.end(), u.begin(), 0.0) < kMaxSignatureCosine;
        });
        if (!distinct) continue;
      }
      vecs.push_back(std::move(v));
    }
    ClassPool pool;
    for (std::size_t i = 0; i < total; ++i) {
      auto& dst = i < cfg.n_base_classes ? pool.base_ : pool.novel_;
      dst.push_back(ClassSignature{static_cast<int>(i), std::move(vecs[i])});
    }
    return pool;
  }

  const std::vector<ClassSignature>& base() const { return base_; }
  const std::vector<ClassSignature>& novel() const { return novel_; }
  const std::vector<ClassSignature>& split(Split s) const { return s == Split::Base ? base_ : novel_; }

  const ClassSignature& by_id(int id) const {
    for (const auto* pool : {&base_, &novel_})
      for (const auto& sig : *pool)
        if (sig.id == id) return sig;
    throw ContractError("class pool: unknown class id " + std::to_string(id));
  }

  bool is_novel(int id) const {
    return std::any_of(novel_.begin(), novel_.end(), [id](const auto& s) { return s.id == id; });
  }

 private:
  std::vector<ClassSignature> base_;
  std::vector<ClassSignature> novel_;
};

// Per-pixel background class ownership (Voronoi partition).
struct BackgroundField {
  std::size_t height = 0, width = 0;
  std::vector<std::size_t> owner;  // index into class_ids, one per pixel
  std::vector<int> class_ids;
};

// Union of 1-3 random filled ellipses covering 5%-60% of the pixels.
inline Mask make_mask(std::mt19937_64& rng, std::size_t h, std::size_t w) {
  if (h < 8 || w < 8) throw ContractError("make_mask: height and width must be >= 8");
  std::uniform_int_distribution<int> count(1, 3);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double span = static_cast<double>(std::min(h, w));
  for (int attempt = 0; attempt < kMaskRetries; ++attempt) {
    Mask m({h, w});
    const int n = count(rng);
    for (int e = 0; e < n; ++e) {
      const double cy = unit(rng) * static_cast<double>(h);
      const double cx = unit(rng) * static_cast<double>(w);
      const double ay = (0.12 + 0.3 * unit(rng)) * span;
      const double ax = (0.12 + 0.3 * unit(rng)) * span;
      const double th = unit(rng) * 3.141592653589793;
      const double ct = std::cos(th), st = std::sin(th);
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
          const double dy = static_cast<double>(i) + 0.5 - cy;
          const double dx = static_cast<double>(j) + 0.5 - cx;
          const double u = (dx * ct + dy * st) / ax;
          const double v = (-dx * st + dy * ct) / ay;
          if (u * u + v * v <= 1.0) m.at(i, j) = 1.0;
        }
    }
    const double cover = std::accumulate(m.values().begin(), m.values().end(), 0.0) /
                         static_cast<double>(h * w);
    if (cover >= kMinCoverage && cover <= kMaxCoverage) return m;
  }
  throw ContractError("make_mask: coverage bound unreachable after retries");
}

// Normalized 1-D Gaussian taps for offsets -r..r, r = ceil(3σ).
inline std::vector<double> gaussian_kernel(double sigma) {
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double s = 0;
  for (int t = -r; t <= r; ++t)
    s += k[static_cast<std::size_t>(t + r)] = std::exp(-(t * t) / (2.0 * sigma * sigma));
  for (auto& v : k) v /= s;
  return k;
}

// Separable Gaussian blur with clamp-to-edge borders; σ = 0 is the identity.
inline Mask blur(const Mask& m, double sigma) {
  if (!(sigma >= 0)) throw ContractError("blur: sigma must be >= 0");
  if (m.ndim() != 2) throw DimensionError("blur: expected H×W mask");
  if (sigma == 0) return m;
  const auto k = gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2);
  const int h = static_cast<int>(m.dim(0)), w = static_cast<int>(m.dim(1));
  Mask tmp({m.dim(0), m.dim(1)}), out({m.dim(0), m.dim(1)});
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      double acc = 0;
      for (int t = -r; t <= r; ++t)
        acc += k[static_cast<std::size_t>(t + r)] *
               m.at(static_cast<std::size_t>(i), static_cast<std::size_t>(std::clamp(j + t, 0, w - 1)));
      tmp.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = acc;
    }
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      double acc = 0;
      for (int t = -r; t <= r; ++t)
        acc += k[static_cast<std::size_t>(t + r)] *
               tmp.at(static_cast<std::size_t>(std::clamp(i + t, 0, h - 1)), static_cast<std::size_t>(j));
      out.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = std::clamp(acc, 0.0, 1.0);
    }
  return out;
}

// Voronoi partition into regions owned by `classes` (one random site each).
inline BackgroundField make_background(std::mt19937_64& rng, std::size_t h, std::size_t w,
                                       std::vector<int> classes) {
  BackgroundField bg{h, w, std::vector<std::size_t>(h * w), std::move(classes)};
  std::uniform_real_distribution<double> uy(0.0, static_cast<double>(h));
  std::uniform_real_distribution<double> ux(0.0, static_cast<double>(w));
  std::vector<std::pair<double, double>> sites;
  for (std::size_t s = 0; s < bg.class_ids.size(); ++s) sites.emplace_back(uy(rng), ux(rng));
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      double best = 1e300;
      for (std::size_t s = 0; s < sites.size(); ++s) {
        const double dy = static_cast<double>(i) + 0.5 - sites[s].first;
        const double dx = static_cast<double>(j) + 0.5 - sites[s].second;
        const double d = dy * dy + dx * dx;
        if (d < best) {
          best = d;
          bg.owner[i * w + j] = s;
        }
      }
    }
  return bg;
}

// F(p) = m̃(p)·fg + (1 - m̃(p))·bg(p) + ε(p), m̃ = blur(gt, σ), ε ~ N(0, noise²).
inline FeatureMap render_features(const Mask& gt, const ClassSignature& fg, const BackgroundField& bg,
                                  const ClassPool& pool, double sigma, double noise_std,
                                  std::mt19937_64& rng) {
  const std::size_t h = gt.dim(0), w = gt.dim(1), c = fg.vector.size();
  if (bg.height != h || bg.width != w) throw DimensionError("render_features: background shape mismatch");
  const Mask soft = blur(gt, sigma);
  std::vector<const std::vector<double>*> bg_vecs;
  for (int id : bg.class_ids) bg_vecs.push_back(&pool.by_id(id).vector);
  std::normal_distribution<double> noise(0.0, noise_std > 0 ? noise_std : 1.0);
  FeatureMap f({c, h, w});
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t p = 0; p < h * w; ++p) {
      const double a = soft[p];
      const double base = a * fg.vector[k] + (1.0 - a) * (*bg_vecs[bg.owner[p]])[k];
      f[k * h * w + p] = noise_std > 0 ? base + noise(rng) : base;
    }
  return f;
}

template <typename T>
struct Shot {
  Tensor<T> feat;       // C×H×W mid-level
  Tensor<T> feat_high;  // C×H×W high-level
  Tensor<T> mask;       // H×W binary
  std::vector<int> bg_classes;
};

template <typename T>
struct Episode {
  Tensor<T> query_feat;
  Tensor<T> query_feat_high;
  Tensor<T> query_gt;
  std::vector<int> query_bg_classes;
  std::vector<Shot<T>> supports;
  int fg_class = 0;
  double blur_radius = 0;
  Split split = Split::Base;
  std::uint64_t index = 0;

  std::size_t channels() const { return query_feat.dim(0); }
  std::size_t height() const { return query_feat.dim(1); }
  std::size_t width() const { return query_feat.dim(2); }

  template <typename U>
  Episode<U> cast() const {
    Episode<U> e;
    e.query_feat = query_feat.template cast<U>();
    e.query_feat_high = query_feat_high.template cast<U>();
    e.query_gt = query_gt.template cast<U>();
    e.query_bg_classes = query_bg_classes;
    for (const auto& s : supports)
      e.supports.push_back(Shot<U>{s.feat.template cast<U>(), s.feat_high.template cast<U>(),
                                   s.mask.template cast<U>(), s.bg_classes});
    e.fg_class = fg_class;
    e.blur_radius = blur_radius;
    e.split = split;
    e.index = index;
    return e;
  }

  void validate() const {
    if (supports.empty()) throw ContractError("episode: needs at least one support");
    if (query_feat.ndim() != 3) throw DimensionError("episode: query features must be C×H×W");
    const Shape fs = query_feat.shape();
    const Shape ms{fs[1], fs[2]};
    if (query_feat_high.shape() != fs || query_gt.shape() != ms)
      throw DimensionError("episode: query shapes disagree");
    for (const auto& s : supports)
      if (s.feat.shape() != fs || s.feat_high.shape() != fs || s.mask.shape() != ms)
        throw DimensionError("episode: support shapes disagree with query");
  }
};

// Deterministic episode source: episode (split, index) depends only on the
// config and those two values.
class EpisodeGenerator {
 public:
  explicit EpisodeGenerator(GeneratorConfig cfg) : cfg_(cfg), pool_((cfg.validate(), ClassPool::create(cfg))) {}

  const GeneratorConfig& config() const { return cfg_; }
  const ClassPool& pool() const { return pool_; }

  std::mt19937_64 episode_rng(Split split, std::uint64_t index) const {
    std::seed_seq seq{static_cast<std::uint32_t>(cfg_.seed), static_cast<std::uint32_t>(cfg_.seed >> 32),
                      static_cast<std::uint32_t>(split), static_cast<std::uint32_t>(index),
                      static_cast<std::uint32_t>(index >> 32)};
    return std::mt19937_64(seq);
  }

  Episode<double> generate(Split split, std::uint64_t index) const {
    const auto& fg_pool = pool_.split(split);
    if (fg_pool.empty()) throw ContractError(std::string("episode: empty ") + split_name(split) + " class pool");
    auto rng = episode_rng(split, index);
    std::uniform_int_distribution<std::size_t> pick(0, fg_pool.size() - 1);
    const ClassSignature& fg = fg_pool[pick(rng)];

    // Background candidates: never the FG class; training episodes never
    // see novel signatures.
    std::vector<int> bg_candidates;
    for (const auto& s : pool_.base())
      if (s.id != fg.id) bg_candidates.push_back(s.id);
    if (split == Split::Novel)
      for (const auto& s : pool_.novel())
        if (s.id != fg.id) bg_candidates.push_back(s.id);
    if (bg_candidates.empty()) throw ContractError("episode: no background classes available");

    Episode<double> ep;
    ep.fg_class = fg.id;
    ep.blur_radius = cfg_.sigma;
    ep.split = split;
    ep.index = index;
    auto render = [&](Tensor<double>& mid, Tensor<double>& high, Tensor<double>& mask, std::vector<int>& bgs) {
      mask = make_mask(rng, cfg_.height, cfg_.width);
      std::uniform_int_distribution<std::size_t> nbg(1, std::min(cfg_.n_bg_classes_per_image, bg_candidates.size()));
      auto cand = bg_candidates;
      std::shuffle(cand.begin(), cand.end(), rng);
      cand.resize(nbg(rng));
      bgs = cand;
      const auto field = make_background(rng, cfg_.height, cfg_.width, cand);
      mid = render_features(mask, fg, field, pool_, cfg_.sigma, cfg_.noise_std, rng);
      high = render_features(mask, fg, field, pool_, kHighLevelBlurScale * cfg_.sigma, cfg_.noise_std, rng);
    };
    render(ep.query_feat, ep.query_feat_high, ep.query_gt, ep.query_bg_classes);
    for (std::size_t k = 0; k < cfg_.shots; ++k) {
      Shot<double> s;
      render(s.feat, s.feat_high, s.mask, s.bg_classes);
      ep.supports.push_back(std::move(s));
    }
    return ep;
  }

 private:
  GeneratorConfig cfg_;
  ClassPool pool_;
};

inline Episode<double> gen_episode(const GeneratorConfig& cfg, Split split, std::uint64_t index) {
  return EpisodeGenerator(cfg).generate(split, index);
}

}  // namespace aenet::synth
