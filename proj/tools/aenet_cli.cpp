// aenet command-line driver.
//
// Exit codes: 0 success, 2 bad usage / invalid input, 3 numeric failure.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "aenet/aenet.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace aenet;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

struct GlobalOptions {
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  bool force = false;
  std::string config;
};

// Flag values for config keys, kept as raw text until the config file has
// been applied. A value that parses as JSON is used as such ("2", "true");
// anything else is taken as a string ("disc").
struct ConfigFlags {
  std::map<std::string, std::string> raw;

  void attach(CLI::App* app) {
    const json defaults = io::to_json(TrainConfig{});
    for (const auto& [key, setter] : io::detail::setters()) {
      if (key == "seed" || key == "threads") continue;  // global flags
      std::string flag = "--" + key;
      std::replace(flag.begin(), flag.end(), '_', '-');
      std::string help = "config key '" + key + "'";
      if (defaults.contains(key)) help += " (default " + defaults[key].dump() + ")";
      app->add_option(flag, raw[key], help);
    }
  }

  json as_json() const {
    json j = json::object();
    for (const auto& [key, text] : raw) {
      if (text.empty()) continue;
      j[key] = json::accept(text) ? json::parse(text) : json(text);
    }
    return j;
  }
};

TrainConfig resolve_config(const GlobalOptions& g, const ConfigFlags& flags) {
  TrainConfig cfg;
  if (!g.config.empty()) cfg = io::load_config(g.config);
  io::apply_json(cfg, flags.as_json());
  cfg.seed = g.seed;
  cfg.threads = g.threads;
  cfg.validate();
  return cfg;
}

void write_json(const fs::path& path, const json& j, bool force) { io::write_text(path, j.dump(2) + "\n", force); }

// Nearest-neighbour enlargement, only for viewing masks.
Tensor<double> upsample_nearest(const Tensor<double>& m, std::size_t factor) {
  if (factor <= 1) return m;
  const std::size_t h = m.dim(0), w = m.dim(1);
  Tensor<double> out({h * factor, w * factor});
  for (std::size_t i = 0; i < h * factor; ++i)
    for (std::size_t j = 0; j < w * factor; ++j) out.at(i, j) = m.at(i / factor, j / factor);
  return out;
}

void put_mask(const fs::path& path, const Tensor<double>& m, std::size_t scale, bool force) {
  io::ensure_writable(path, force);
  tio::write_mask_pgm(path, upsample_nearest(m, scale));
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::string out_dir;
  std::string split = "novel";
  std::size_t count = 1;
  std::uint64_t first = 0;
};

int cmd_gen(const GlobalOptions& g, const ConfigFlags& flags, const GenArgs& a) {
  const auto cfg = resolve_config(g, flags);
  const auto manifest = io::write_episode_dir(a.out_dir, cfg, synth::parse_split(a.split), a.count, a.first, g.force);
  std::cout << "wrote " << manifest["count"] << " " << a.split << " episodes to " << a.out_dir << " (seed " << g.seed
            << ")\n";
  return 0;
}

struct PriorArgs {
  std::string episode_dir;
  std::string query, support, mask;
  std::string out_dir;
  std::size_t scale = 1;
  bool mid_level = false;
};

json write_prior(const fs::path& dir, const std::string& stem, const PriorPack<double>& pack, std::size_t scale,
                 bool force) {
  put_mask(dir / (stem + "_fg.pgm"), pack.fg, scale, force);
  put_mask(dir / (stem + "_bg.pgm"), pack.bg, scale, force);
  put_mask(dir / (stem + "_disc.pgm"), pack.disc, scale, force);
  auto vec = [](const Tensor<double>& t) { return std::vector<double>(t.values().begin(), t.values().end()); };
  return json{{"fg", stem + "_fg.pgm"},
              {"bg", stem + "_bg.pgm"},
              {"disc", stem + "_disc.pgm"},
              {"proto_fg", vec(pack.proto_fg)},
              {"proto_bg", vec(pack.proto_bg)}};
}

int cmd_prior(const GlobalOptions& g, const PriorArgs& a) {
  const bool from_dir = !a.episode_dir.empty();
  const bool from_files = !a.query.empty() || !a.support.empty() || !a.mask.empty();
  if (from_dir == from_files)
    throw ContractError("prior: pass either --episode-dir or all of --query/--support/--mask");
  fs::create_directories(a.out_dir);
  json out{{"seed", g.seed}, {"scale", a.scale}, {"priors", json::array()}};
  if (from_dir) {
    out["source"] = a.episode_dir;
    out["features"] = a.mid_level ? "mid" : "high";
    for (const auto& stored : io::read_episode_dir(a.episode_dir)) {
      const auto& ep = stored.episode;
      std::vector<SupportView<double>> views;
      for (const auto& s : ep.supports) views.push_back({a.mid_level ? &s.feat : &s.feat_high, &s.mask});
      const auto pack = prior_pack<double>(a.mid_level ? ep.query_feat : ep.query_feat_high, views);
      char stem[32];
      std::snprintf(stem, sizeof stem, "ep%04zu", out["priors"].size());
      auto entry = write_prior(a.out_dir, stem, pack, a.scale, g.force);
      entry["index"] = ep.index;
      entry["fg_class"] = ep.fg_class;
      out["priors"].push_back(entry);
    }
  } else {
    if (a.query.empty() || a.support.empty() || a.mask.empty())
      throw ContractError("prior: --query, --support and --mask must be given together");
    const auto q = tio::read_tensor<double>(a.query);
    const auto s = tio::read_tensor<double>(a.support);
    const auto m = fs::path(a.mask).extension() == ".pgm" ? tio::read_mask_pgm<double>(a.mask)
                                                           : tio::read_tensor<double>(a.mask);
    out["priors"].push_back(write_prior(a.out_dir, "prior", prior_pack<double>(q, s, m), a.scale, g.force));
  }
  write_json(fs::path(a.out_dir) / "prototypes.json", out, g.force);
  std::cout << "wrote " << out["priors"].size() << " prior set(s) to " << a.out_dir << " (seed " << g.seed << ")\n";
  return 0;
}

struct TrainArgs {
  std::string aenet;
  std::string out = "report.json";
  std::string curve;
  std::string params;
  std::string pred_dir;
  std::size_t pred_count = 4;
  std::size_t scale = 4;
  bool double_precision = false;
};

template <typename T>
int run_train(const TrainConfig& cfg, const GlobalOptions& g, const TrainArgs& a) {
  for (const auto& p : {a.out, a.curve, a.params})
    if (!p.empty()) io::ensure_writable(p, g.force);
  ToyModel<T> model(cfg.model());
  const auto report = train_model(model, cfg);
  write_json(a.out, io::to_json(report), g.force);
  if (!a.curve.empty()) io::write_text(a.curve, io::loss_curve_csv(report.loss_curve), g.force);
  if (!a.params.empty()) {
    std::vector<double> flat;
    for (auto* p : model.params(cfg.use_aenet))
      for (T v : p->value.values()) flat.push_back(static_cast<double>(v));
    tio::write_tensor(a.params, Tensor<double>({flat.size()}, std::span<const double>(flat)));
  }
  if (!a.pred_dir.empty()) {
    fs::create_directories(a.pred_dir);
    const synth::EpisodeGenerator gen(cfg.generator());
    for (std::size_t i = 0; i < a.pred_count; ++i) {
      const auto ep = gen.generate(synth::Split::Novel, i);
      const auto pred = predict(model, ep.template cast<T>(), cfg.use_aenet, cfg.prior).template cast<double>();
      char stem[32];
      std::snprintf(stem, sizeof stem, "ep%04zu", i);
      const fs::path dir(a.pred_dir);
      put_mask(dir / (std::string(stem) + "_pred.pgm"), pred, a.scale, g.force);
      put_mask(dir / (std::string(stem) + "_gt.pgm"), ep.query_gt, a.scale, g.force);
    }
  }
  std::printf("seed %llu  aenet %s  prior %s  novel mIoU %.4f  FB-IoU %.4f  base mIoU %.4f  (%.1f s)\n",
              static_cast<unsigned long long>(cfg.seed), cfg.use_aenet ? "on" : "off", prior_source_name(cfg.prior),
              report.novel_miou, report.novel_fb_iou, report.base_miou, report.wall_clock_s);
  return 0;
}

int cmd_train(const GlobalOptions& g, const ConfigFlags& flags, const TrainArgs& a) {
  auto cfg = resolve_config(g, flags);
  if (a.aenet == "on") cfg.use_aenet = true;
  else if (a.aenet == "off") cfg.use_aenet = false;
  else if (!a.aenet.empty()) throw ContractError("train: --aenet must be 'on' or 'off'");
  return a.double_precision ? run_train<double>(cfg, g, a) : run_train<float>(cfg, g, a);
}

struct BenchArgs {
  std::string mode;
  std::string out;
  std::size_t episodes = 200;
  std::vector<double> sigmas{0.0, 1.0, 2.0, 3.0};
  std::vector<double> lambdas{0.0, 0.5, 1.0, 1.5};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
};

json bench_prior_json(const TrainConfig& cfg, const BenchArgs& a) {
  const auto rows = bench_prior(cfg.generator(), a.sigmas, a.episodes, cfg.threads);
  json out = json::array();
  for (const auto& r : rows) {
    out.push_back({{"sigma", r.sigma},
                   {"auc_fg", {{"mean", r.mean_fg}, {"std", r.std_fg}}},
                   {"auc_disc", {{"mean", r.mean_disc}, {"std", r.std_disc}}},
                   {"paired_t", {{"mean_diff", r.test.mean_diff}, {"t", r.test.t}, {"p_greater", r.test.p_greater}}}});
    std::printf("sigma %.2f  AUC fg %.4f ± %.4f  disc %.4f ± %.4f  p(disc > fg) %.3g\n", r.sigma, r.mean_fg, r.std_fg,
                r.mean_disc, r.std_disc, r.test.p_greater);
  }
  return out;
}

json bench_similarity_json(TrainConfig cfg, const BenchArgs& a) {
  cfg.use_aenet = true;
  ToyModel<float> model(cfg.model());
  const auto report = train_model(model, cfg);
  const synth::EpisodeGenerator gen(cfg.generator());
  const auto sim = bench_similarity(model, gen, a.episodes, cfg.prior);
  const auto test = stats::paired_t_test(sim.after, sim.before);
  std::printf("novel mIoU %.4f  FG cosine before AE %.4f  after AE %.4f  p(after > before) %.3g\n",
              report.novel_miou, sim.mean_before, sim.mean_after, test.p_greater);
  return json{{"novel_miou", report.novel_miou}, {"mean_before", sim.mean_before}, {"mean_after", sim.mean_after},
              {"p_greater", test.p_greater},     {"before", sim.before},           {"after", sim.after}};
}

json bench_lambda_json(const TrainConfig& cfg, const BenchArgs& a) {
  auto cf = cfg;
  cf.use_aenet = true;
  const auto rows = sweep_lambda<float>(cf, a.lambdas, a.seeds, [&](const LambdaRow& row, std::size_t s) {
    std::printf("lambda %.2f  seed %llu  novel mIoU %.4f\n", row.lambda, static_cast<unsigned long long>(a.seeds[s]),
                row.miou.back());
    std::fflush(stdout);
  });
  json out = json::array();
  for (const auto& r : rows) out.push_back({{"lambda", r.lambda}, {"miou", r.miou}, {"mean_miou", r.mean_miou}});
  return out;
}

int cmd_bench(const GlobalOptions& g, const ConfigFlags& flags, const BenchArgs& a) {
  const auto cfg = resolve_config(g, flags);
  if (!a.out.empty()) io::ensure_writable(a.out, g.force);
  json out{{"seed", g.seed}, {"mode", a.mode}, {"config", io::to_json(cfg)}};
  if (a.mode == "prior") out["rows"] = bench_prior_json(cfg, a);
  else if (a.mode == "similarity") out["result"] = bench_similarity_json(cfg, a);
  else if (a.mode == "lambda") {
    out["seeds"] = a.seeds;
    out["rows"] = bench_lambda_json(cfg, a);
  } else throw ContractError("bench: --mode must be prior, similarity or lambda");
  if (!a.out.empty()) write_json(a.out, out, g.force);
  return 0;
}

struct GradcheckArgs {
  double eps = 1e-4;
  double tol = 1e-4;
  std::size_t points = 20;
  std::string out;
};

int cmd_gradcheck(const GlobalOptions& g, const GradcheckArgs& a) {
  if (!(a.eps > 0) || !(a.tol > 0) || a.points < 1) throw ContractError("gradcheck: eps, tol and points must be > 0");
  if (!a.out.empty()) io::ensure_writable(a.out, g.force);
  const auto results = gradcheck::full_suite(g.seed, gradcheck::Options{a.eps, a.tol, a.points});
  bool ok = true;
  json rows = json::array();
  for (const auto& r : results) {
    ok = ok && r.passed;
    std::printf("%-4s %-28s rel err %.3e  (%zu points, %zu skipped)\n", r.passed ? "ok" : "FAIL", r.name.c_str(),
                r.error, r.points, r.skipped);
    rows.push_back({{"name", r.name}, {"error", r.error}, {"points", r.points}, {"skipped", r.skipped},
                    {"passed", r.passed}});
  }
  std::printf("gradcheck seed %llu: %s\n", static_cast<unsigned long long>(g.seed), ok ? "passed" : "FAILED");
  if (!a.out.empty())
    write_json(a.out, {{"seed", g.seed}, {"eps", a.eps}, {"tol", a.tol}, {"passed", ok}, {"checks", rows}}, g.force);
  return ok ? 0 : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"aenet: discriminative prior generator and ambiguity eliminator for few-shot segmentation"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalOptions g;
  app.add_option("--seed", g.seed, "PRNG seed, echoed in every output")->capture_default_str();
  app.add_option("--threads", g.threads, "cap on evaluation fan-out")->capture_default_str()->check(CLI::PositiveNumber);
  app.add_flag("--force", g.force, "overwrite existing output files");
  app.add_option("--config", g.config, "JSON config; flags override its keys");

  ConfigFlags gen_flags, train_flags, bench_flags;

  GenArgs gen_args;
  auto* gen = app.add_subcommand("gen", "write synthetic episodes (FTNS features, PGM masks, manifest.json)");
  gen->add_option("--out-dir", gen_args.out_dir, "output directory")->required();
  gen->add_option("--split", gen_args.split, "base or novel")->capture_default_str();
  gen->add_option("--count", gen_args.count, "number of episodes")->capture_default_str();
  gen->add_option("--first", gen_args.first, "index of the first episode")->capture_default_str();
  gen_flags.attach(gen);

  PriorArgs prior_args;
  auto* prior = app.add_subcommand("prior", "compute fg/bg/disc prior masks");
  prior->add_option("--episode-dir", prior_args.episode_dir, "directory written by 'gen'");
  prior->add_option("--query", prior_args.query, "query features (FTNS, C×H×W)");
  prior->add_option("--support", prior_args.support, "support features (FTNS, C×H×W)");
  prior->add_option("--mask", prior_args.mask, "support mask (PGM or FTNS, H×W)");
  prior->add_option("--out-dir", prior_args.out_dir, "output directory")->required();
  prior->add_option("--scale", prior_args.scale, "nearest-neighbour enlargement of written masks")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  prior->add_flag("--mid-level", prior_args.mid_level, "use mid-level instead of high-level episode features");

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "train and evaluate the toy model");
  train->add_option("--aenet", train_args.aenet, "on or off (default: config use_aenet)");
  train->add_option("--out", train_args.out, "run report (JSON)")->capture_default_str();
  train->add_option("--curve", train_args.curve, "loss curve (CSV)");
  train->add_option("--params", train_args.params, "final parameters as one flat FTNS vector");
  train->add_option("--pred-dir", train_args.pred_dir, "write predicted and GT masks for the first novel episodes");
  train->add_option("--pred-count", train_args.pred_count, "episodes written to --pred-dir")->capture_default_str();
  train->add_option("--scale", train_args.scale, "nearest-neighbour enlargement of written masks")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  train->add_flag("--double", train_args.double_precision, "train in double precision");
  train_flags.attach(train);

  BenchArgs bench_args;
  auto* bench = app.add_subcommand("bench", "prior AUC, similarity or lambda-sweep benchmark");
  bench->add_option("--mode", bench_args.mode, "prior | similarity | lambda")
      ->required()
      ->check(CLI::IsMember({"prior", "similarity", "lambda"}));
  bench->add_option("--out", bench_args.out, "benchmark report (JSON)");
  bench->add_option("--episodes", bench_args.episodes, "episodes per measurement")->capture_default_str();
  bench->add_option("--sigmas", bench_args.sigmas, "blur radii for --mode prior")->capture_default_str();
  bench->add_option("--lambdas", bench_args.lambdas, "loss weights for --mode lambda")->capture_default_str();
  bench->add_option("--seeds", bench_args.seeds, "seeds for --mode lambda")->capture_default_str();
  bench_flags.attach(bench);

  GradcheckArgs gc_args;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every op and the full graph");
  gc->add_option("--eps", gc_args.eps, "central-difference step")->capture_default_str();
  gc->add_option("--tol", gc_args.tol, "relative error tolerance")->capture_default_str();
  gc->add_option("--points", gc_args.points, "coordinates per check")->capture_default_str();
  gc->add_option("--out", gc_args.out, "results (JSON)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*gen) return cmd_gen(g, gen_flags, gen_args);
    if (*prior) return cmd_prior(g, prior_args);
    if (*train) return cmd_train(g, train_flags, train_args);
    if (*bench) return cmd_bench(g, bench_flags, bench_args);
    if (*gc) return cmd_gradcheck(g, gc_args);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
