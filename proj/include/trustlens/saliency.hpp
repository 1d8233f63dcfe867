#pragma once

// Attention-derived saliency: query selection, layer/head fusion, query max
// pooling, modality-specific views and per-sensor contributions.
//
// Layer and head reductions accumulate in 64-bit fixed point (2^-54 units).
// Integer addition is associative, so the fused result is bit-identical for
// any slice arrival order, and slices can be streamed one at a time.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <istream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "trustlens/core.hpp"
#include "trustlens/io.hpp"

namespace trustlens::saliency {

enum class Fusion { mean, max, last_layer };

inline std::string_view to_string(Fusion f) {
  switch (f) {
    case Fusion::mean: return "mean";
    case Fusion::max: return "max";
    case Fusion::last_layer: return "last_layer";
  }
  return "?";
}

inline Fusion fusion_from_string(std::string_view s) {
  if (s == "mean") return Fusion::mean;
  if (s == "max") return Fusion::max;
  if (s == "last_layer" || s == "last") return Fusion::last_layer;
  throw Error(ErrorCode::invalid_argument, "unknown fusion '" + std::string(s) + "'");
}

struct SaliencyMap {
  Fusion method = Fusion::mean;
  std::size_t tokens = 0;
  std::size_t q_valid = 0;
  std::vector<std::size_t> query_indices;  // original query index of each fused row
  std::vector<double> rows;                // q_valid x tokens, head- and layer-fused
  std::vector<double> importance;          // max over rows, per token

  std::span<const double> row(std::size_t q) const { return {rows.data() + q * tokens, tokens}; }
};

// Top-K queries by score (lower index wins ties), then those with score >= tau.
// Returned in ascending query order. K larger than the query count is clamped.
inline std::vector<std::size_t> select_query_indices(std::span<const float> scores, const SelectionConfig& cfg) {
  if (cfg.top_k == 0) throw Error(ErrorCode::invalid_argument, "select_queries: top_k must be >= 1");
  if (!(cfg.tau >= 0.0 && cfg.tau <= 1.0)) throw Error(ErrorCode::invalid_argument, "select_queries: tau outside [0, 1]");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(std::min(cfg.top_k, order.size()));
  std::erase_if(order, [&](std::size_t q) { return !(static_cast<double>(scores[q]) >= cfg.tau); });
  std::sort(order.begin(), order.end());
  return order;
}

inline AttentionStack gather_queries(const AttentionStack& stack, std::span<const std::size_t> keep) {
  AttentionStack out(stack.layers, stack.heads, keep.size(), stack.tokens);
  for (std::size_t i = 0; i < keep.size(); ++i) out.query_scores[i] = stack.query_scores[keep[i]];
  for (std::size_t l = 0; l < stack.layers; ++l)
    for (std::size_t h = 0; h < stack.heads; ++h)
      for (std::size_t i = 0; i < keep.size(); ++i) {
        const auto src = stack.row(l, h, keep[i]);
        std::copy(src.begin(), src.end(), out.row(l, h, i).begin());
      }
  return out;
}

inline AttentionStack select_queries(const AttentionStack& stack, const SelectionConfig& cfg) {
  const auto keep = select_query_indices(stack.query_scores, cfg);
  return gather_queries(stack, keep);
}

// Incremental layer/head reduction over (layer, head) slices holding only the
// selected query rows.
class StackFuser {
 public:
  // Weights are accumulated as integers in units of 2^-50: for v in [0, 1],
  // 4 + v has a spacing of exactly 2^-50, so its bit pattern minus that of 4
  // is round(v * 2^50).
  static constexpr double kScale = 0x1p50;

  StackFuser(Fusion method, std::size_t layers, std::size_t heads, std::size_t queries, std::size_t tokens)
      : method_(method), layers_(layers), heads_(heads), queries_(queries), tokens_(tokens),
        rows_seen_(layers * heads, 0) {
    if (layers == 0 || heads == 0) throw Error(ErrorCode::dimension_mismatch, "fusion: empty layer/head dimension");
    if (layers * heads > 500) throw Error(ErrorCode::dimension_mismatch, "fusion: more than 500 slices");
    if (queries == 0) throw Error(ErrorCode::empty_saliency, "fusion: no valid queries (Q_valid = 0)");
    acc_.assign(queries * tokens, 0);
    if (method_ == Fusion::max) head_max_.assign(heads * queries * tokens, 0.0f);
  }

  void add_slice(std::size_t layer, std::size_t head, std::span<const float> rows) {
    const std::size_t slot = slot_of(layer, head);
    if (rows.size() != queries_ * tokens_) throw Error(ErrorCode::dimension_mismatch, "fusion: slice size mismatch");
    if (rows_seen_[slot] != 0) throw Error(ErrorCode::invalid_argument, "fusion: slice added twice");
    for (std::size_t i = 0; i < queries_; ++i) add_row(layer, head, i, rows.subspan(i * tokens_, tokens_));
  }

  // Rows of a slice must arrive in order 0..queries-1.
  void add_row(std::size_t layer, std::size_t head, std::size_t q, std::span<const float> row) {
    const std::size_t slot = slot_of(layer, head);
    if (row.size() != tokens_) throw Error(ErrorCode::dimension_mismatch, "fusion: row size mismatch");
    if (q != rows_seen_[slot]) throw Error(ErrorCode::invalid_argument, "fusion: slice rows added out of order or twice");
    ++rows_seen_[slot];
    check_range(row);
    const std::size_t off = q * tokens_;
    switch (method_) {
      case Fusion::mean: accumulate_into(row.data(), acc_.data() + off, tokens_); break;
      case Fusion::last_layer:
        if (layer + 1 == layers_) accumulate_into(row.data(), acc_.data() + off, tokens_);
        break;
      case Fusion::max: {
        float* dst = head_max_.data() + head * queries_ * tokens_ + off;
        for (std::size_t i = 0; i < tokens_; ++i) dst[i] = std::max(dst[i], row[i]);
        break;
      }
    }
  }

  SaliencyMap finish() {
    for (std::size_t n : rows_seen_)
      if (n != queries_) throw Error(ErrorCode::dimension_mismatch, "fusion: missing (layer, head) slice");
    double divisor = static_cast<double>(heads_);
    if (method_ == Fusion::mean) divisor *= static_cast<double>(layers_);
    if (method_ == Fusion::max)
      for (std::size_t h = 0; h < heads_; ++h) accumulate({head_max_.data() + h * queries_ * tokens_, queries_ * tokens_});

    SaliencyMap map;
    map.method = method_;
    map.tokens = tokens_;
    map.q_valid = queries_;
    map.rows.resize(acc_.size());
    for (std::size_t i = 0; i < acc_.size(); ++i) map.rows[i] = static_cast<double>(acc_[i]) / divisor / kScale;
    map.importance.assign(tokens_, 0.0);
    for (std::size_t q = 0; q < queries_; ++q) {
      const double* r = map.rows.data() + q * tokens_;
      for (std::size_t s = 0; s < tokens_; ++s) map.importance[s] = std::max(map.importance[s], r[s]);
    }
    return map;
  }

 private:
  std::size_t slot_of(std::size_t layer, std::size_t head) const {
    if (layer >= layers_ || head >= heads_) throw Error(ErrorCode::out_of_range, "fusion: slice index out of range");
    return layer * heads_ + head;
  }

  static void check_range(std::span<const float> rows) {
    // any bit pattern above that of 1.0f is negative, > 1, inf or nan
    std::uint32_t bad = 0;
    for (float v : rows) {
      const auto b = std::bit_cast<std::uint32_t>(v);
      bad |= static_cast<std::uint32_t>(b > 0x3f800000u && b != 0x80000000u);
    }
    if (bad) throw Error(ErrorCode::numeric, "fusion: attention weight outside [0, 1]");
  }

  static void accumulate_into(const float* __restrict src, std::int64_t* __restrict dst, std::size_t n) {
    const auto base = std::bit_cast<std::int64_t>(4.0);
    for (std::size_t i = 0; i < n; ++i) dst[i] += std::bit_cast<std::int64_t>(4.0 + static_cast<double>(src[i])) - base;
  }

  void accumulate(std::span<const float> rows) { accumulate_into(rows.data(), acc_.data(), rows.size()); }

  Fusion method_;
  std::size_t layers_, heads_, queries_, tokens_;
  std::vector<std::size_t> rows_seen_;
  std::vector<std::int64_t> acc_;
  std::vector<float> head_max_;
};

// Fuses an already-filtered stack (see select_queries).
inline SaliencyMap fuse(const AttentionStack& filtered, Fusion method) {
  StackFuser fuser(method, filtered.layers, filtered.heads, filtered.queries, filtered.tokens);
  for (std::size_t l = 0; l < filtered.layers; ++l)
    for (std::size_t h = 0; h < filtered.heads; ++h) fuser.add_slice(l, h, filtered.slice(l, h));
  SaliencyMap map = fuser.finish();
  map.query_indices.resize(map.q_valid);
  std::iota(map.query_indices.begin(), map.query_indices.end(), std::size_t{0});
  return map;
}

inline SaliencyMap fuse_mean(const AttentionStack& filtered) { return fuse(filtered, Fusion::mean); }
inline SaliencyMap fuse_max(const AttentionStack& filtered) { return fuse(filtered, Fusion::max); }
inline SaliencyMap fuse_last_layer(const AttentionStack& filtered) { return fuse(filtered, Fusion::last_layer); }

// Selection + fusion on the unfiltered stack, keeping original query indices.
inline SaliencyMap compute(const AttentionStack& stack, const SelectionConfig& cfg, Fusion method) {
  const auto keep = select_query_indices(stack.query_scores, cfg);
  SaliencyMap map = fuse(gather_queries(stack, keep), method);
  map.query_indices = keep;
  return map;
}

// Selection + fusion straight from an ATTN stream, one slice in memory.
inline SaliencyMap compute_stream(std::istream& in, const SelectionConfig& cfg, Fusion method,
                                  const std::optional<TokenLayout>& layout = {}) {
  io::AttnStreamReader reader(in);
  const auto& h = reader.header();
  if (layout) io::check_layout(h, *layout);
  const auto keep = select_query_indices(reader.query_scores(), cfg);
  StackFuser fuser(method, h.layers, h.heads, keep.size(), h.tokens);
  for (std::size_t l = 0; l < h.layers; ++l)
    for (std::size_t hd = 0; hd < h.heads; ++hd)
      reader.read_rows(keep, [&](std::size_t i, std::span<const float> row) { fuser.add_row(l, hd, i, row); });
  SaliencyMap map = fuser.finish();
  map.query_indices = keep;
  return map;
}

// ---------------------------------------------------------------------------
// Modality views

struct Grid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  friend bool operator==(const Grid&, const Grid&) = default;
};

struct ModalityViews {
  Grid bev;                  // grid_x x grid_y
  std::vector<Grid> cameras;  // cam_h x cam_w each
};

inline void check_tokens(std::size_t tokens, const TokenLayout& layout) {
  if (tokens != layout.total_tokens())
    throw Error(ErrorCode::layout_mismatch, "saliency has " + std::to_string(tokens) + " tokens, layout expects " +
                                                std::to_string(layout.total_tokens()));
}

inline ModalityViews split_modalities(std::span<const double> importance, const TokenLayout& layout) {
  check_tokens(importance.size(), layout);
  ModalityViews v;
  v.bev = {layout.grid_x, layout.grid_y, {importance.begin(), importance.begin() + layout.lidar_tokens()}};
  for (std::size_t c = 0; c < layout.num_cams; ++c) {
    const auto [first, last] = layout.sensor_range(camera_sensor(static_cast<int>(c)));
    v.cameras.push_back({layout.cam_h, layout.cam_w, {importance.begin() + first, importance.begin() + last}});
  }
  return v;
}

inline ModalityViews split_modalities(const SaliencyMap& map, const TokenLayout& layout) {
  return split_modalities(map.importance, layout);
}

inline std::vector<double> flatten(const ModalityViews& views) {
  std::vector<double> out = views.bev.data;
  for (const auto& g : views.cameras) out.insert(out.end(), g.data.begin(), g.data.end());
  return out;
}

// Bilinear resize with half-pixel centers and edge clamping.
inline Grid upsample_bilinear(const Grid& g, std::size_t rows, std::size_t cols) {
  if (g.rows == 0 || g.cols == 0 || rows == 0 || cols == 0)
    throw Error(ErrorCode::invalid_argument, "upsample: empty grid");
  Grid out{rows, cols, std::vector<double>(rows * cols)};
  const double sy = static_cast<double>(g.rows) / static_cast<double>(rows);
  const double sx = static_cast<double>(g.cols) / static_cast<double>(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const double fy = std::clamp((static_cast<double>(r) + 0.5) * sy - 0.5, 0.0, static_cast<double>(g.rows - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, g.rows - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t c = 0; c < cols; ++c) {
      const double fx = std::clamp((static_cast<double>(c) + 0.5) * sx - 0.5, 0.0, static_cast<double>(g.cols - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, g.cols - 1);
      const double wx = fx - static_cast<double>(x0);
      const double top = g.at(y0, x0) * (1.0 - wx) + g.at(y0, x1) * wx;
      const double bottom = g.at(y1, x0) * (1.0 - wx) + g.at(y1, x1) * wx;
      out.data[r * cols + c] = top * (1.0 - wy) + bottom * wy;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sensor contribution

struct SensorContribution {
  std::vector<double> share;  // indexed by SensorId: LiDAR, then cameras
};

// Fraction of the fused attention mass (summed over retained query rows)
// that falls on each sensor's tokens.
inline SensorContribution sensor_contribution(const SaliencyMap& map, const TokenLayout& layout) {
  check_tokens(map.tokens, layout);
  if (map.q_valid == 0) throw Error(ErrorCode::empty_saliency, "contribution: no valid queries");
  std::vector<double> mass(layout.num_sensors(), 0.0);
  for (std::size_t sensor = 0; sensor < mass.size(); ++sensor) {
    const auto [first, last] = layout.sensor_range(static_cast<SensorId>(sensor));
    double m = 0.0;
    for (std::size_t q = 0; q < map.q_valid; ++q) {
      const double* r = map.rows.data() + q * map.tokens;
      for (std::size_t s = first; s < last; ++s) m += r[s];
    }
    mass[sensor] = m;
  }
  const double total = std::accumulate(mass.begin(), mass.end(), 0.0);
  if (!(total > 0.0)) throw Error(ErrorCode::undefined_contribution, "contribution: total attention mass is zero");
  SensorContribution out;
  for (double m : mass) out.share.push_back(m / total);
  return out;
}

inline std::string sensor_name(SensorId id) { return id == kLidar ? "lidar" : "camera_" + std::to_string(id - 1); }

// ---------------------------------------------------------------------------
// Exports

inline nlohmann::json grid_to_json(const Grid& g) { return {{"rows", g.rows}, {"cols", g.cols}, {"values", g.data}}; }

inline nlohmann::json saliency_to_json(const SaliencyMap& map, const TokenLayout& layout) {
  const ModalityViews v = split_modalities(map, layout);
  nlohmann::json cams = nlohmann::json::array();
  for (const auto& g : v.cameras) cams.push_back(grid_to_json(g));
  return {{"format", "trustlens.saliency"},
          {"version", 1},
          {"fusion", to_string(map.method)},
          {"q_valid", map.q_valid},
          {"query_indices", map.query_indices},
          {"importance", map.importance},
          {"bev", grid_to_json(v.bev)},
          {"cameras", std::move(cams)}};
}

inline nlohmann::json contribution_to_json(const SensorContribution& c) {
  nlohmann::json sensors = nlohmann::json::array();
  for (std::size_t i = 0; i < c.share.size(); ++i)
    sensors.push_back({{"sensor", sensor_name(static_cast<SensorId>(i))}, {"contribution", c.share[i]}});
  return {{"format", "trustlens.contribution"}, {"version", 1}, {"sensors", std::move(sensors)}};
}

// 8-bit binary PGM scaled to the grid maximum.
inline std::string grid_to_pgm(const Grid& g) {
  std::string out = "P5\n" + std::to_string(g.cols) + " " + std::to_string(g.rows) + "\n255\n";
  const double peak = g.data.empty() ? 0.0 : *std::max_element(g.data.begin(), g.data.end());
  for (double v : g.data)
    out.push_back(static_cast<char>(peak > 0.0 ? static_cast<unsigned char>(std::lround(255.0 * v / peak)) : 0));
  return out;
}

inline std::string grid_to_csv(const Grid& g) {
  std::string out = "row,col,value\n";
  char buf[96];
  for (std::size_t r = 0; r < g.rows; ++r)
    for (std::size_t c = 0; c < g.cols; ++c) {
      std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g\n", r, c, g.at(r, c));
      out += buf;
    }
  return out;
}

}  // namespace trustlens::saliency
