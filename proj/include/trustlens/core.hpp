#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "trustlens/error.hpp"

namespace trustlens {

using Vec3 = std::array<double, 3>;

// Sensor 0 is the LiDAR BEV grid, sensor c+1 is camera c.
using SensorId = int;
inline constexpr SensorId kLidar = 0;
inline constexpr SensorId camera_sensor(int camera) { return camera + 1; }

// Wraps into (-pi, pi].
inline double wrap_angle(double a) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double w = std::fmod(a + std::numbers::pi, two_pi);
  if (w < 0.0) w += two_pi;
  w -= std::numbers::pi;
  return w == -std::numbers::pi ? std::numbers::pi : w;
}

struct TokenRef {
  SensorId sensor = kLidar;
  std::size_t row = 0;
  std::size_t col = 0;
  friend bool operator==(const TokenRef&, const TokenRef&) = default;
};

// Token bookkeeping for the concatenated LiDAR + camera token sequence.
// LiDAR tokens come first in row-major (grid_x, grid_y) order, followed by
// each camera's (cam_h, cam_w) grid in camera order.
struct TokenLayout {
  std::size_t grid_x = 32;
  std::size_t grid_y = 32;
  double cell_size = 1.6;  // meters per BEV cell
  std::size_t num_cams = 6;
  std::size_t cam_h = 4;
  std::size_t cam_w = 12;

  static TokenLayout paper_scale() { return {180, 180, 0.6, 6, 40, 100}; }

  std::size_t lidar_tokens() const { return grid_x * grid_y; }
  std::size_t camera_tokens_per_view() const { return cam_h * cam_w; }
  std::size_t camera_tokens() const { return num_cams * cam_h * cam_w; }
  std::size_t total_tokens() const { return lidar_tokens() + camera_tokens(); }
  std::size_t num_sensors() const { return 1 + num_cams; }

  // Half-open token range [first, last) owned by a sensor.
  std::pair<std::size_t, std::size_t> sensor_range(SensorId sensor) const {
    if (sensor == kLidar) return {0, lidar_tokens()};
    if (sensor < 1 || static_cast<std::size_t>(sensor) > num_cams)
      throw Error(ErrorCode::out_of_range, "sensor id " + std::to_string(sensor) + " outside [0, " +
                                               std::to_string(num_cams) + "]");
    const std::size_t first = lidar_tokens() + static_cast<std::size_t>(sensor - 1) * camera_tokens_per_view();
    return {first, first + camera_tokens_per_view()};
  }

  void validate() const {
    if (grid_x == 0 || grid_y == 0) throw Error(ErrorCode::schema, "layout: empty BEV grid");
    if (!(cell_size > 0.0) || !std::isfinite(cell_size))
      throw Error(ErrorCode::schema, "layout: cell_size must be positive");
    if (num_cams > 0 && (cam_h == 0 || cam_w == 0))
      throw Error(ErrorCode::schema, "layout: empty camera grid");
  }

  // BEV extent covered by the grid along x and y, in meters.
  double extent_x() const { return static_cast<double>(grid_x) * cell_size; }
  double extent_y() const { return static_cast<double>(grid_y) * cell_size; }

  // Center of a BEV cell in ego coordinates (grid centered on the origin).
  std::array<double, 2> cell_center(std::size_t row, std::size_t col) const {
    return {(static_cast<double>(row) + 0.5) * cell_size - 0.5 * extent_x(),
            (static_cast<double>(col) + 0.5) * cell_size - 0.5 * extent_y()};
  }

  friend bool operator==(const TokenLayout&, const TokenLayout&) = default;
};

inline std::size_t token_index(const TokenLayout& layout, SensorId sensor, std::size_t row, std::size_t col) {
  if (sensor == kLidar) {
    if (row >= layout.grid_x || col >= layout.grid_y)
      throw Error(ErrorCode::out_of_range, "lidar cell (" + std::to_string(row) + ", " + std::to_string(col) +
                                               ") outside grid " + std::to_string(layout.grid_x) + "x" +
                                               std::to_string(layout.grid_y));
    return row * layout.grid_y + col;
  }
  if (sensor < 1 || static_cast<std::size_t>(sensor) > layout.num_cams)
    throw Error(ErrorCode::out_of_range, "camera " + std::to_string(sensor - 1) + " outside [0, " +
                                             std::to_string(layout.num_cams) + ")");
  if (row >= layout.cam_h || col >= layout.cam_w)
    throw Error(ErrorCode::out_of_range, "camera " + std::to_string(sensor - 1) + " token (" + std::to_string(row) +
                                             ", " + std::to_string(col) + ") outside " + std::to_string(layout.cam_h) +
                                             "x" + std::to_string(layout.cam_w));
  return layout.sensor_range(sensor).first + row * layout.cam_w + col;
}

inline TokenRef token_ref(const TokenLayout& layout, std::size_t index) {
  if (index >= layout.total_tokens())
    throw Error(ErrorCode::out_of_range,
                "token " + std::to_string(index) + " outside [0, " + std::to_string(layout.total_tokens()) + ")");
  if (index < layout.lidar_tokens()) return {kLidar, index / layout.grid_y, index % layout.grid_y};
  const std::size_t rel = index - layout.lidar_tokens();
  const std::size_t per_view = layout.camera_tokens_per_view();
  const std::size_t in_view = rel % per_view;
  return {camera_sensor(static_cast<int>(rel / per_view)), in_view / layout.cam_w, in_view % layout.cam_w};
}

inline SensorId sensor_of(const TokenLayout& layout, std::size_t index) { return token_ref(layout, index).sensor; }

// Raw decoder cross-attention weights, indexed [layer][head][query][token],
// plus the per-query confidence used for query selection.
struct AttentionStack {
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::size_t queries = 0;
  std::size_t tokens = 0;
  std::vector<float> query_scores;  // size `queries`
  std::vector<float> values;        // size layers*heads*queries*tokens

  AttentionStack() = default;
  AttentionStack(std::size_t l, std::size_t h, std::size_t q, std::size_t s)
      : layers(l), heads(h), queries(q), tokens(s), query_scores(q, 0.0f), values(l * h * q * s, 0.0f) {}

  std::size_t slice_size() const { return queries * tokens; }

  std::span<float> slice(std::size_t l, std::size_t h) {
    return {values.data() + (l * heads + h) * slice_size(), slice_size()};
  }
  std::span<const float> slice(std::size_t l, std::size_t h) const {
    return {values.data() + (l * heads + h) * slice_size(), slice_size()};
  }
  std::span<float> row(std::size_t l, std::size_t h, std::size_t q) { return slice(l, h).subspan(q * tokens, tokens); }
  std::span<const float> row(std::size_t l, std::size_t h, std::size_t q) const {
    return slice(l, h).subspan(q * tokens, tokens);
  }
  float at(std::size_t l, std::size_t h, std::size_t q, std::size_t s) const {
    return values[((l * heads + h) * queries + q) * tokens + s];
  }

  // Checks non-negativity and that every row is a softmax row.
  void validate(double tol = 1e-5) const {
    if (values.size() != layers * heads * queries * tokens || query_scores.size() != queries)
      throw Error(ErrorCode::dimension_mismatch, "attention payload size does not match header");
    for (std::size_t l = 0; l < layers; ++l)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t q = 0; q < queries; ++q) {
          double sum = 0.0;
          for (float v : row(l, h, q)) {
            if (!std::isfinite(v)) throw Error(ErrorCode::nan_payload, "non-finite attention weight");
            if (v < 0.0f) throw Error(ErrorCode::numeric, "negative attention weight");
            sum += v;
          }
          if (std::abs(sum - 1.0) > tol)
            throw Error(ErrorCode::numeric, "attention row (" + std::to_string(l) + "," + std::to_string(h) + "," +
                                                std::to_string(q) + ") sums to " + std::to_string(sum));
        }
    for (float s : query_scores)
      if (!std::isfinite(s)) throw Error(ErrorCode::nan_payload, "non-finite query score");
  }

  friend bool operator==(const AttentionStack&, const AttentionStack&) = default;
};

struct SelectionConfig {
  std::size_t top_k = 32;
  double tau = 0.3;
};

// Ground-truth or predicted 3D box. Center and size in meters, yaw in radians.
struct Box {
  Vec3 center{0.0, 0.0, 0.0};
  Vec3 size{1.0, 1.0, 1.0};  // length, width, height
  double yaw = 0.0;
  int class_id = 0;

  friend bool operator==(const Box&, const Box&) = default;
};

struct Detection {
  Box box;
  double score = 0.0;
  friend bool operator==(const Detection&, const Detection&) = default;
};

// Detection with aleatoric uncertainty: per-axis log-variances and the
// orientation log-concentration, kappa = exp(-u_theta).
struct UncertainDetection {
  Box box;
  double score = 0.0;
  Vec3 log_var{0.0, 0.0, 0.0};
  double u_theta = 0.0;

  double kappa() const { return std::exp(-u_theta); }
  Detection detection() const { return {box, score}; }
  friend bool operator==(const UncertainDetection&, const UncertainDetection&) = default;
};

inline void validate_box(const Box& b, const std::string& context) {
  for (double v : b.center)
    if (!std::isfinite(v)) throw Error(ErrorCode::nan_payload, context + ": non-finite center");
  for (double v : b.size)
    if (!(v > 0.0) || !std::isfinite(v)) throw Error(ErrorCode::schema, context + ": size must be positive");
  if (!std::isfinite(b.yaw)) throw Error(ErrorCode::nan_payload, context + ": non-finite yaw");
  if (!(b.yaw > -std::numbers::pi && b.yaw <= std::numbers::pi))
    throw Error(ErrorCode::schema, context + ": yaw outside (-pi, pi]");
}

// A synthetic frame: origin-centered square region plus ground-truth boxes.
struct Scene {
  double extent = 51.2;  // side length in meters
  std::vector<Box> objects;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(extent > 0.0)) throw Error(ErrorCode::schema, "scene: extent must be positive");
    for (std::size_t i = 0; i < objects.size(); ++i) {
      const auto ctx = "scene.objects[" + std::to_string(i) + "]";
      validate_box(objects[i], ctx);
      if (std::abs(objects[i].center[0]) > 0.5 * extent || std::abs(objects[i].center[1]) > 0.5 * extent)
        throw Error(ErrorCode::schema, ctx + ": center outside extent");
    }
  }

  friend bool operator==(const Scene&, const Scene&) = default;
};

}  // namespace trustlens
