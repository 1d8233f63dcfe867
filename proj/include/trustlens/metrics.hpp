#pragma once

// Detection matching, the Detection Quality Score (a simplified stand-in for
// the nuScenes detection score) and corruption robustness scoring.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "trustlens/core.hpp"

namespace trustlens::metrics {

struct MatchPair {
  std::size_t det = 0;
  std::size_t gt = 0;
  double distance = 0.0;           // BEV center distance, m
  double scale_error = 0.0;        // 1 - prod_i min(d_i, g_i) / max(d_i, g_i)
  double orientation_error = 0.0;  // |wrapped yaw difference|, in [0, pi]
};

struct MatchResult {
  std::vector<MatchPair> pairs;  // in matching (score) order
  std::vector<std::size_t> unmatched_detections;
  std::vector<std::size_t> unmatched_gts;
};

inline double bev_distance(const Box& a, const Box& b) {
  return std::hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]);
}

inline double scale_error(const Box& det, const Box& gt) {
  double ratio = 1.0;
  for (int i = 0; i < 3; ++i) ratio *= std::min(det.size[i], gt.size[i]) / std::max(det.size[i], gt.size[i]);
  return 1.0 - ratio;
}

inline double orientation_error(const Box& det, const Box& gt) { return std::abs(wrap_angle(det.yaw - gt.yaw)); }

// Detection indices by descending score, lower index first on ties.
inline std::vector<std::size_t> score_order(std::span<const Detection> dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  return order;
}

// Greedy matching in descending score order; each detection takes the
// nearest unmatched ground truth within `dist_thresh` (lower index on ties).
inline MatchResult match(std::span<const Detection> dets, std::span<const Box> gts, double dist_thresh) {
  if (!(dist_thresh > 0.0)) throw Error(ErrorCode::invalid_argument, "match: distance threshold must be > 0");
  MatchResult out;
  std::vector<bool> taken(gts.size(), false);
  for (std::size_t d : score_order(dets)) {
    std::size_t best = gts.size();
    double best_dist = 0.0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      const double dist = bev_distance(dets[d].box, gts[g]);
      if (dist <= dist_thresh && (best == gts.size() || dist < best_dist)) {
        best = g;
        best_dist = dist;
      }
    }
    if (best == gts.size()) {
      out.unmatched_detections.push_back(d);
      continue;
    }
    taken[best] = true;
    out.pairs.push_back({d, best, best_dist, scale_error(dets[d].box, gts[best]),
                         orientation_error(dets[d].box, gts[best])});
  }
  for (std::size_t g = 0; g < gts.size(); ++g)
    if (!taken[g]) out.unmatched_gts.push_back(g);
  return out;
}

// Average precision with 101-point interpolated precision.
inline double average_precision(std::span<const Detection> dets, std::span<const Box> gts, double dist_thresh) {
  if (gts.empty()) return dets.empty() ? 1.0 : 0.0;
  const MatchResult m = match(dets, gts, dist_thresh);
  std::vector<bool> is_tp(dets.size(), false);
  for (const auto& p : m.pairs) is_tp[p.det] = true;

  // Precision/recall after each detection in score order.
  std::vector<std::size_t> tp_at;
  std::vector<double> precision_at;
  std::size_t tp = 0, seen = 0;
  for (std::size_t d : score_order(dets)) {
    ++seen;
    if (is_tp[d]) ++tp;
    tp_at.push_back(tp);
    precision_at.push_back(static_cast<double>(tp) / static_cast<double>(seen));
  }
  // Running max from the back gives the interpolated precision envelope.
  for (std::size_t i = precision_at.size(); i-- > 1;)
    precision_at[i - 1] = std::max(precision_at[i - 1], precision_at[i]);

  const std::size_t n_gt = gts.size();
  double sum = 0.0;
  std::size_t i = 0;
  for (std::size_t r = 0; r <= 100; ++r) {
    // first point whose recall tp/n_gt >= r/100
    while (i < tp_at.size() && tp_at[i] * 100 < r * n_gt) ++i;
    if (i == tp_at.size()) break;
    sum += precision_at[i];
  }
  return sum / 101.0;
}

struct DqsConfig {
  std::vector<double> thresholds{0.5, 1.0, 2.0, 4.0};  // AP matching radii, m
  double tp_threshold = 2.0;                           // radius for the error terms, m
  double translation_norm = 2.0;                       // m
};

struct DqsBreakdown {
  double map = 0.0;
  double ate = 1.0;  // raw mean errors over true positives
  double ase = 1.0;
  double aoe = std::numbers::pi;
  double dqs = 0.0;
};

// DQS = 0.5 mAP + 0.5 mean(1 - min(1, ATE/2), 1 - min(1, ASE), 1 - min(1, AOE/pi)).
// Empty detections against empty ground truth scores 1; with no true
// positives every error term is 0.
inline DqsBreakdown dqs_breakdown(std::span<const Detection> dets, std::span<const Box> gts, const DqsConfig& cfg = {}) {
  if (cfg.thresholds.empty()) throw Error(ErrorCode::invalid_argument, "dqs: empty threshold list");
  DqsBreakdown out;
  if (gts.empty() && dets.empty()) {
    out.map = 1.0;
    out.ate = out.ase = out.aoe = 0.0;
    out.dqs = 1.0;
    return out;
  }
  double map = 0.0;
  for (double t : cfg.thresholds) map += average_precision(dets, gts, t);
  out.map = map / static_cast<double>(cfg.thresholds.size());

  double terms = 0.0;
  if (!gts.empty()) {
    const MatchResult m = match(dets, gts, cfg.tp_threshold);
    if (!m.pairs.empty()) {
      double ate = 0.0, ase = 0.0, aoe = 0.0;
      for (const auto& p : m.pairs) {
        ate += p.distance;
        ase += p.scale_error;
        aoe += p.orientation_error;
      }
      const auto n = static_cast<double>(m.pairs.size());
      out.ate = ate / n;
      out.ase = ase / n;
      out.aoe = aoe / n;
      terms = ((1.0 - std::min(1.0, out.ate / cfg.translation_norm)) + (1.0 - std::min(1.0, out.ase)) +
               (1.0 - std::min(1.0, out.aoe / std::numbers::pi))) /
              3.0;
    }
  }
  out.dqs = 0.5 * out.map + 0.5 * terms;
  return out;
}

inline double dqs(std::span<const Detection> dets, std::span<const Box> gts, const DqsConfig& cfg = {}) {
  return dqs_breakdown(dets, gts, cfg).dqs;
}

// ---------------------------------------------------------------------------
// Robustness

struct RobustnessRow {
  std::string model;
  std::string corruption;
  int severity = 1;
  double score = 0.0;
};

class RobustnessTable {
 public:
  void add(RobustnessRow row) {
    if (row.severity < 1 || row.severity > 3)
      throw Error(ErrorCode::schema, "robustness: severity " + std::to_string(row.severity) + " outside {1,2,3}");
    if (!(row.score >= 0.0 && row.score <= 1.0))
      throw Error(ErrorCode::schema, "robustness: score outside [0, 1] for " + row.model + "/" + row.corruption);
    auto& slot = scores_[{row.model, row.corruption}];
    if (slot[row.severity - 1] >= 0.0)
      throw Error(ErrorCode::schema, "robustness: duplicate row " + row.model + "/" + row.corruption + "/" +
                                         std::to_string(row.severity));
    slot[row.severity - 1] = row.score;
    remember(models_, row.model);
    remember(corruptions_, row.corruption);
    rows_.push_back(std::move(row));
  }

  const std::vector<std::string>& models() const { return models_; }
  const std::vector<std::string>& corruptions() const { return corruptions_; }
  const std::vector<RobustnessRow>& rows() const { return rows_; }

  // Sum of scores over the three severities.
  double severity_sum(const std::string& model, const std::string& corruption) const {
    auto it = scores_.find({model, corruption});
    if (it == scores_.end())
      throw Error(ErrorCode::incomplete_table, "robustness: no rows for " + model + "/" + corruption);
    double sum = 0.0;
    for (int s = 0; s < 3; ++s) {
      if (it->second[s] < 0.0)
        throw Error(ErrorCode::incomplete_table,
                    "robustness: missing severity " + std::to_string(s + 1) + " for " + model + "/" + corruption);
      sum += it->second[s];
    }
    return sum;
  }

  static RobustnessTable from_csv(const std::string& text) {
    RobustnessTable table;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    bool header_seen = false;
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      const auto cells = split(line);
      if (!header_seen) {
        if (cells != std::vector<std::string>{"model", "corruption", "severity", "score"})
          throw Error(ErrorCode::schema, "robustness.csv: header must be model,corruption,severity,score");
        header_seen = true;
        continue;
      }
      const std::string ctx = "robustness.csv line " + std::to_string(line_no);
      if (cells.size() != 4) throw Error(ErrorCode::schema, ctx + ": expected 4 columns");
      RobustnessRow row{cells[0], cells[1], 0, 0.0};
      try {
        std::size_t used = 0;
        row.severity = std::stoi(cells[2], &used);
        if (used != cells[2].size()) throw std::invalid_argument("severity");
        row.score = std::stod(cells[3], &used);
        if (used != cells[3].size()) throw std::invalid_argument("score");
      } catch (const std::logic_error&) {
        throw Error(ErrorCode::schema, ctx + ": severity/score not numeric");
      }
      if (std::isnan(row.score)) throw Error(ErrorCode::nan_payload, ctx + ": NaN score");
      try {
        table.add(std::move(row));
      } catch (const Error& e) {
        throw Error(e.code(), ctx + ": " + e.what());
      }
    }
    if (!header_seen) throw Error(ErrorCode::schema, "robustness.csv: empty file");
    return table;
  }

 private:
  static void remember(std::vector<std::string>& list, const std::string& v) {
    if (std::find(list.begin(), list.end(), v) == list.end()) list.push_back(v);
  }

  static std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
  }

  struct Slot : std::array<double, 3> {
    Slot() { fill(-1.0); }
  };
  std::map<std::pair<std::string, std::string>, Slot> scores_;
  std::vector<std::string> models_;
  std::vector<std::string> corruptions_;
  std::vector<RobustnessRow> rows_;
};

// Relative Resistance Ability in percent:
//   100 * (sum_s score[model, c, s] / sum_s score[baseline, c, s] - 1)
inline double rra(const RobustnessTable& table, const std::string& model, const std::string& baseline,
                  const std::string& corruption) {
  const double base = table.severity_sum(baseline, corruption);
  const double mine = table.severity_sum(model, corruption);
  if (base == 0.0)
    throw Error(ErrorCode::division_by_zero, "rra: baseline " + baseline + " scores 0 on " + corruption);
  return 100.0 * (mine / base - 1.0);
}

// Mean RRA over all corruptions in the table, summed in sorted corruption
// order so the result does not depend on row order.
inline double mrra(const RobustnessTable& table, const std::string& model, const std::string& baseline) {
  std::vector<std::string> corruptions = table.corruptions();
  if (corruptions.empty()) throw Error(ErrorCode::incomplete_table, "mrra: no corruptions");
  std::sort(corruptions.begin(), corruptions.end());
  double sum = 0.0;
  for (const auto& c : corruptions) sum += rra(table, model, baseline, c);
  return sum / static_cast<double>(corruptions.size());
}

inline std::string format_fixed3(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  std::string s = buf;
  if (s == "-0.000") s = "0.000";
  return s;
}

// rra.csv: one row per model, one column per corruption (first-seen order),
// then mrra.
inline std::string rra_csv(const RobustnessTable& table, const std::string& baseline) {
  std::string out = "model";
  for (const auto& c : table.corruptions()) out += "," + c;
  out += ",mrra\n";
  for (const auto& m : table.models()) {
    out += m;
    for (const auto& c : table.corruptions()) out += "," + format_fixed3(rra(table, m, baseline, c));
    out += "," + format_fixed3(mrra(table, m, baseline)) + "\n";
  }
  return out;
}

}  // namespace trustlens::metrics
