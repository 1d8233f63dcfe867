#pragma once

// Perturbation tests for saliency maps. Units (LiDAR cells, camera tokens) are
// ranked once from the clean pass and suppressed in that order at increasing
// fractions rho; the detector is re-run and scored with DQS against the clean
// ground truth. AUC is the trapezoidal area under DQS(rho) on a 0-100 scale.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "trustlens/core.hpp"
#include "trustlens/metrics.hpp"
#include "trustlens/rng.hpp"
#include "trustlens/saliency.hpp"
#include "trustlens/synthdet.hpp"

namespace trustlens::faithfulness {

enum class Direction { positive, negative, random };
enum class Unit { bev_cell, camera_token };
enum class Method { mean, max, last_layer, random };

inline std::string_view to_string(Direction d) {
  switch (d) {
    case Direction::positive: return "positive";
    case Direction::negative: return "negative";
    case Direction::random: return "random";
  }
  return "?";
}

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::mean: return "mean";
    case Method::max: return "max";
    case Method::last_layer: return "last_layer";
    case Method::random: return "random";
  }
  return "?";
}

inline Method method_from_string(std::string_view s) {
  if (s == "random") return Method::random;
  switch (saliency::fusion_from_string(s)) {
    case saliency::Fusion::mean: return Method::mean;
    case saliency::Fusion::max: return Method::max;
    case saliency::Fusion::last_layer: return Method::last_layer;
  }
  return Method::mean;
}

inline saliency::Fusion fusion_of(Method m) {
  switch (m) {
    case Method::max: return saliency::Fusion::max;
    case Method::last_layer: return saliency::Fusion::last_layer;
    default: return saliency::Fusion::mean;
  }
}

inline std::vector<double> default_rho_grid() { return {0, 1, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100}; }

struct PerturbationSpec {
  Direction direction = Direction::positive;
  std::vector<double> rho_grid = default_rho_grid();
  std::vector<Unit> units = {Unit::bev_cell, Unit::camera_token};
  std::size_t random_repeats = 5;
  std::uint64_t seed = 0;

  void validate() const {
    if (rho_grid.empty() || rho_grid.front() != 0.0)
      throw Error(ErrorCode::invalid_argument, "perturbation: rho grid must start at 0");
    for (std::size_t i = 0; i < rho_grid.size(); ++i) {
      if (!(rho_grid[i] >= 0.0 && rho_grid[i] <= 100.0))
        throw Error(ErrorCode::invalid_argument, "perturbation: rho outside [0, 100]");
      if (i > 0 && !(rho_grid[i] > rho_grid[i - 1]))
        throw Error(ErrorCode::invalid_argument, "perturbation: rho grid must be strictly increasing");
    }
    if (units.empty()) throw Error(ErrorCode::invalid_argument, "perturbation: no maskable unit type");
    if (random_repeats == 0) throw Error(ErrorCode::invalid_argument, "perturbation: random_repeats must be >= 1");
  }
};

// Everything the curve needs beyond the detector itself.
struct EvalOptions {
  double noise_std = 0.02;
  double score_threshold = 0.3;
  double nms_radius = 3.0;
  metrics::DqsConfig dqs;
};

struct FaithfulnessResult {
  Method method = Method::mean;
  Direction direction = Direction::positive;
  std::vector<double> rho;
  std::vector<double> dqs;
  double auc = 0.0;
  bool degenerate = false;  // no valid query: curve held at the clean score
};

// ceil(rho * n / 100), robust to products that land a rounding error above an
// integer.
inline std::size_t masked_count(std::size_t n, double rho) {
  const double x = rho * static_cast<double>(n) / 100.0;
  const double r = std::round(x);
  const double k = std::abs(x - r) < 1e-9 ? r : std::ceil(x);
  return std::min(n, static_cast<std::size_t>(std::max(0.0, k)));
}

// Trapezoid over the grid; the last value is held flat up to rho = 100.
inline double auc(std::span<const double> rho, std::span<const double> dqs) {
  if (rho.size() != dqs.size() || rho.empty()) throw Error(ErrorCode::invalid_argument, "auc: curve size mismatch");
  double area = 0.0;
  for (std::size_t i = 1; i < rho.size(); ++i) area += 0.5 * (rho[i] - rho[i - 1]) * (dqs[i] + dqs[i - 1]);
  area += (100.0 - rho.back()) * dqs.back();
  return area;
}

// Unit orderings: LiDAR cells globally, camera tokens per view. Entries are
// token indices.
struct UnitRanking {
  std::vector<std::size_t> bev;
  std::vector<std::vector<std::size_t>> cams;
};

inline UnitRanking ranking_from_saliency(const TokenLayout& layout, std::span<const double> importance,
                                         bool descending) {
  if (importance.size() != layout.total_tokens())
    throw Error(ErrorCode::dimension_mismatch, "ranking: saliency size does not match the layout");
  const auto order = [&](std::size_t lo, std::size_t hi) {
    std::vector<std::size_t> idx(hi - lo);
    std::iota(idx.begin(), idx.end(), lo);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return descending ? importance[a] > importance[b] : importance[a] < importance[b];
    });
    return idx;
  };
  UnitRanking r;
  r.bev = order(0, layout.lidar_tokens());
  for (std::size_t c = 0; c < layout.num_cams; ++c) {
    const auto [lo, hi] = layout.sensor_range(camera_sensor(static_cast<int>(c)));
    r.cams.push_back(order(lo, hi));
  }
  return r;
}

inline UnitRanking random_ranking(const TokenLayout& layout, std::uint64_t seed) {
  Rng rng(seed);
  UnitRanking r;
  r.bev.resize(layout.lidar_tokens());
  std::iota(r.bev.begin(), r.bev.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(r.bev));
  for (std::size_t c = 0; c < layout.num_cams; ++c) {
    const auto [lo, hi] = layout.sensor_range(camera_sensor(static_cast<int>(c)));
    std::vector<std::size_t> v(hi - lo);
    std::iota(v.begin(), v.end(), lo);
    rng.shuffle(std::span<std::size_t>(v));
    r.cams.push_back(std::move(v));
  }
  return r;
}

// Suppresses the first ceil(rho N / 100) units of each ranking: LiDAR cells
// get zero features (occupancy included); camera tokens take the mean
// feature vector of their camera, computed on the input field. Positional
// encodings are untouched.
inline synthdet::TokenField mask_tokens(const synthdet::TokenField& tokens, const UnitRanking& ranking, double rho,
                                        std::span<const Unit> units) {
  using synthdet::kFeatureChannels;
  if (!(rho >= 0.0 && rho <= 100.0)) throw Error(ErrorCode::invalid_argument, "mask_tokens: rho outside [0, 100]");
  synthdet::TokenField out = tokens;
  const TokenLayout& layout = tokens.layout;
  const bool bev = std::find(units.begin(), units.end(), Unit::bev_cell) != units.end();
  const bool cam = std::find(units.begin(), units.end(), Unit::camera_token) != units.end();
  if (bev) {
    if (ranking.bev.size() != layout.lidar_tokens())
      throw Error(ErrorCode::dimension_mismatch, "mask_tokens: BEV ranking does not cover every cell");
    const std::size_t k = masked_count(ranking.bev.size(), rho);
    for (std::size_t i = 0; i < k; ++i) {
      auto f = out.feature(ranking.bev[i]);
      std::fill(f.begin(), f.end(), 0.0f);
    }
  }
  if (cam) {
    if (ranking.cams.size() != layout.num_cams)
      throw Error(ErrorCode::dimension_mismatch, "mask_tokens: camera ranking does not cover every view");
    for (std::size_t c = 0; c < layout.num_cams; ++c) {
      const auto& order = ranking.cams[c];
      if (order.size() != layout.camera_tokens_per_view())
        throw Error(ErrorCode::dimension_mismatch, "mask_tokens: camera ranking does not cover every token");
      const std::size_t k = masked_count(order.size(), rho);
      if (k == 0) continue;
      const auto [lo, hi] = layout.sensor_range(camera_sensor(static_cast<int>(c)));
      std::array<double, kFeatureChannels> mean{};
      for (std::size_t s = lo; s < hi; ++s) {
        const auto f = tokens.feature(s);
        for (std::size_t ch = 0; ch < kFeatureChannels; ++ch) mean[ch] += f[ch];
      }
      for (auto& m : mean) m /= static_cast<double>(hi - lo);
      for (std::size_t i = 0; i < k; ++i) {
        auto f = out.feature(order[i]);
        for (std::size_t ch = 0; ch < kFeatureChannels; ++ch) f[ch] = static_cast<float>(mean[ch]);
      }
    }
  }
  return out;
}

// Clean pass of one scene, shared by every method and direction.
class SceneRun {
 public:
  SceneRun(const Scene& scene, const synthdet::Detector& detector, const SelectionConfig& sel,
           const EvalOptions& opts)
      : scene_(scene), detector_(detector), sel_(sel), opts_(opts) {
    tokens_ = synthdet::generate_tokens(scene, detector.config().layout, opts.noise_std);
    clean_ = detector.run(tokens_);
    clean_dqs_ = score(clean_.detections);
    valid_ = saliency::select_query_indices(clean_.attention.query_scores, sel);
  }

  double clean_dqs() const { return clean_dqs_; }
  const synthdet::TokenField& tokens() const { return tokens_; }
  const synthdet::DetectorOutput& clean() const { return clean_; }

  double score(const std::vector<UncertainDetection>& dets) const {
    const auto kept = synthdet::plain(synthdet::postprocess(dets, opts_.score_threshold, opts_.nms_radius));
    return metrics::dqs(kept, scene_.objects, opts_.dqs);
  }

  FaithfulnessResult curve(Method method, const PerturbationSpec& spec) const {
    spec.validate();
    FaithfulnessResult res;
    res.method = method;
    res.direction = spec.direction;
    res.rho = spec.rho_grid;
    res.dqs.assign(spec.rho_grid.size(), 0.0);
    const TokenLayout& layout = detector_.config().layout;
    const bool random = method == Method::random || spec.direction == Direction::random;
    if (!random && valid_.empty()) {
      res.degenerate = true;
      std::fill(res.dqs.begin(), res.dqs.end(), clean_dqs_);
    } else if (random) {
      std::vector<std::vector<double>> runs;
      for (std::size_t r = 0; r < spec.random_repeats; ++r) {
        const std::uint64_t stream = (static_cast<std::uint64_t>(spec.direction) << 32) ^ (r + 1);
        runs.push_back(evaluate(random_ranking(layout, derive_seed(derive_seed(spec.seed, scene_.seed), stream)), spec));
      }
      // points where every repeat agrees (rho = 0 always) keep that exact value
      for (std::size_t i = 0; i < res.dqs.size(); ++i) {
        double sum = 0.0;
        bool same = true;
        for (const auto& pts : runs) {
          sum += pts[i];
          same = same && pts[i] == runs.front()[i];
        }
        res.dqs[i] = same ? runs.front()[i] : sum / static_cast<double>(runs.size());
      }
    } else {
      const auto map = saliency::fuse(saliency::gather_queries(clean_.attention, valid_), fusion_of(method));
      const auto ranking =
          ranking_from_saliency(layout, map.importance, spec.direction == Direction::positive);
      res.dqs = evaluate(ranking, spec);
    }
    res.auc = auc(res.rho, res.dqs);
    return res;
  }

 private:
  std::vector<double> evaluate(const UnitRanking& ranking, const PerturbationSpec& spec) const {
    std::vector<double> out;
    for (double rho : spec.rho_grid) {
      if (rho == 0.0) {
        out.push_back(clean_dqs_);
        continue;
      }
      const auto masked = mask_tokens(tokens_, ranking, rho, spec.units);
      out.push_back(score(detector_.run(masked).detections));
    }
    return out;
  }

  const Scene& scene_;
  const synthdet::Detector& detector_;
  SelectionConfig sel_;
  EvalOptions opts_;
  synthdet::TokenField tokens_;
  synthdet::DetectorOutput clean_;
  double clean_dqs_ = 0.0;
  std::vector<std::size_t> valid_;
};

inline FaithfulnessResult run_curve(const Scene& scene, const synthdet::DetectorConfig& cfg,
                                    const SelectionConfig& sel, Method method, const PerturbationSpec& spec,
                                    const EvalOptions& opts = {}) {
  const synthdet::Detector detector(cfg);
  return SceneRun(scene, detector, sel, opts).curve(method, spec);
}

struct MethodRow {
  Method method = Method::mean;
  double pos_auc = 0.0;
  double neg_auc = 0.0;
};

struct Comparison {
  std::vector<MethodRow> table;               // ordered by pos_auc - neg_auc, best first
  std::vector<FaithfulnessResult> mean_curves;  // per (method, direction), averaged over scenes
  std::vector<std::vector<FaithfulnessResult>> per_scene;
  std::size_t degenerate = 0;
};

struct CompareOptions {
  std::vector<Method> methods = {Method::mean, Method::max, Method::last_layer, Method::random};
  PerturbationSpec spec;  // direction ignored; both positive and negative are run
  EvalOptions eval;
  std::size_t jobs = 1;
};

// Runs every (method, direction) curve on every scene. Scenes are spread over
// `jobs` threads; results are stored by scene index, so the output does not
// depend on the thread count.
inline Comparison compare_methods(std::span<const Scene> scenes, const synthdet::DetectorConfig& cfg,
                                  const SelectionConfig& sel, const CompareOptions& opts) {
  if (scenes.empty()) throw Error(ErrorCode::invalid_argument, "compare_methods: no scenes");
  if (opts.methods.empty()) throw Error(ErrorCode::invalid_argument, "compare_methods: no methods");
  opts.spec.validate();
  const synthdet::Detector detector(cfg);
  const Direction dirs[2] = {Direction::positive, Direction::negative};

  Comparison cmp;
  cmp.per_scene.resize(scenes.size());
  std::vector<std::exception_ptr> errors(scenes.size());
  const auto work = [&](std::size_t i) {
    try {
      SceneRun run(scenes[i], detector, sel, opts.eval);
      for (Method m : opts.methods)
        for (Direction d : dirs) {
          PerturbationSpec spec = opts.spec;
          spec.direction = d;
          cmp.per_scene[i].push_back(run.curve(m, spec));
        }
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const std::size_t jobs = std::max<std::size_t>(1, std::min(opts.jobs, scenes.size()));
  if (jobs == 1) {
    for (std::size_t i = 0; i < scenes.size(); ++i) work(i);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < jobs; ++t)
      pool.emplace_back([&, t] {
        for (std::size_t i = t; i < scenes.size(); i += jobs) work(i);
      });
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  const std::size_t n_curves = cmp.per_scene.front().size();
  const auto n = static_cast<double>(scenes.size());
  for (std::size_t c = 0; c < n_curves; ++c) {
    FaithfulnessResult mean = cmp.per_scene.front()[c];
    std::fill(mean.dqs.begin(), mean.dqs.end(), 0.0);
    mean.auc = 0.0;
    mean.degenerate = false;
    for (const auto& scene : cmp.per_scene) {
      const auto& r = scene[c];
      for (std::size_t k = 0; k < r.dqs.size(); ++k) mean.dqs[k] += r.dqs[k] / n;
      mean.auc += r.auc / n;
      if (r.degenerate) ++cmp.degenerate;
    }
    cmp.mean_curves.push_back(std::move(mean));
  }
  for (std::size_t m = 0; m < opts.methods.size(); ++m)
    cmp.table.push_back({opts.methods[m], cmp.mean_curves[2 * m].auc, cmp.mean_curves[2 * m + 1].auc});
  std::stable_sort(cmp.table.begin(), cmp.table.end(), [](const MethodRow& a, const MethodRow& b) {
    return a.pos_auc - a.neg_auc < b.pos_auc - b.neg_auc;
  });
  return cmp;
}

inline std::string curve_csv(const Comparison& cmp) {
  std::string out = "method,direction,rho,dqs\n";
  char buf[128];
  for (const auto& c : cmp.mean_curves)
    for (std::size_t k = 0; k < c.rho.size(); ++k) {
      std::snprintf(buf, sizeof buf, "%s,%s,%g,%.6f\n", std::string(to_string(c.method)).c_str(),
                    std::string(to_string(c.direction)).c_str(), c.rho[k], c.dqs[k]);
      out += buf;
    }
  return out;
}

inline nlohmann::json summary_json(const Comparison& cmp, std::size_t scenes) {
  nlohmann::json methods = nlohmann::json::object();
  nlohmann::json ranking = nlohmann::json::array();
  for (const auto& row : cmp.table) {
    methods[std::string(to_string(row.method))] = {{"pos_auc", row.pos_auc}, {"neg_auc", row.neg_auc}};
    ranking.push_back(std::string(to_string(row.method)));
  }
  return {{"format", "trustlens.faithfulness"}, {"version", 1},      {"scenes", scenes},
          {"methods", methods},                  {"ranking", ranking}, {"degenerate_curves", cmp.degenerate}};
}

}  // namespace trustlens::faithfulness
