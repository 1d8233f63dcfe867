#pragma once

// Synthetic scenes and a forward-only cross-attention detector.
//
// Tokens stand in for camera/LiDAR encoder outputs: each carries an occupancy
// channel (evidence that a planted object covers the token's cell), object
// attribute channels weighted by that occupancy, and seeded content noise.
// Object queries anchored on a BEV grid run L layers of multi-head scaled
// dot-product cross-attention over all tokens. Projection weights are seeded
// random rotations, so query/key geometry is preserved and attention
// concentrates where positional affinity and occupancy agree.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "trustlens/core.hpp"
#include "trustlens/rng.hpp"

namespace trustlens::synthdet {

// Feature channels per token.
enum Channel : std::size_t { kOcc = 0, kLength, kWidth, kHeight, kYawCos, kYawSin, kContent0, kContent1 };
inline constexpr std::size_t kFeatureChannels = 8;

// Positional channels per token: 4 BEV plane waves (cos, sin), camera
// azimuth and elevation (cos, sin), and a two-way modality indicator.
inline constexpr std::size_t kBevPe = 0;
inline constexpr std::size_t kBevPeDims = 8;
inline constexpr std::size_t kCamPe = 8;
inline constexpr std::size_t kCamPeDims = 4;
inline constexpr std::size_t kLidarFlag = 12;
inline constexpr std::size_t kCameraFlag = 13;
inline constexpr std::size_t kPosChannels = 14;
inline constexpr std::size_t kMinWidth = kPosChannels + kFeatureChannels;

struct CameraModel {
  double vertical_fov = 0.9;  // rad
  double mount_height = 1.5;  // m
};

// Each camera covers an equal azimuth sector; camera 0 faces +x and columns
// run from the left (larger azimuth) edge to the right.
inline double camera_half_sector(const TokenLayout& layout) {
  return std::numbers::pi / static_cast<double>(layout.num_cams);
}

inline double camera_token_azimuth(const TokenLayout& layout, std::size_t cam, std::size_t col) {
  const double half = camera_half_sector(layout);
  const double center = 2.0 * half * static_cast<double>(cam);
  const double step = 2.0 * half / static_cast<double>(layout.cam_w);
  return wrap_angle(center + half - (static_cast<double>(col) + 0.5) * step);
}

inline double camera_token_elevation(const TokenLayout& layout, const CameraModel& cam, std::size_t row) {
  const double step = cam.vertical_fov / static_cast<double>(layout.cam_h);
  return 0.5 * cam.vertical_fov - (static_cast<double>(row) + 0.5) * step;
}

// Plane-wave frequency chosen so the BEV positional kernel decreases
// monotonically over the whole grid diagonal.
inline double bev_frequency(const TokenLayout& layout) {
  return std::numbers::pi / (1.1 * std::hypot(layout.extent_x(), layout.extent_y()));
}

inline std::array<double, kBevPeDims> bev_encoding(const TokenLayout& layout, double x, double y) {
  const double w = bev_frequency(layout);
  std::array<double, kBevPeDims> pe{};
  for (std::size_t j = 0; j < 4; ++j) {
    const double a = static_cast<double>(j) * std::numbers::pi / 4.0;
    const double phase = w * (x * std::cos(a) + y * std::sin(a));
    pe[2 * j] = std::cos(phase);
    pe[2 * j + 1] = std::sin(phase);
  }
  return pe;
}

struct TokenField {
  TokenLayout layout;
  CameraModel camera;
  std::vector<float> features;  // S x kFeatureChannels
  std::vector<float> position;  // S x kPosChannels

  std::size_t size() const { return layout.total_tokens(); }
  float occupancy(std::size_t s) const { return features[s * kFeatureChannels + kOcc]; }
  std::span<float> feature(std::size_t s) { return {features.data() + s * kFeatureChannels, kFeatureChannels}; }
  std::span<const float> feature(std::size_t s) const {
    return {features.data() + s * kFeatureChannels, kFeatureChannels};
  }
  std::span<const float> pos(std::size_t s) const { return {position.data() + s * kPosChannels, kPosChannels}; }
};

inline std::vector<float> positional_encodings(const TokenLayout& layout, const CameraModel& cam) {
  std::vector<float> pos(layout.total_tokens() * kPosChannels, 0.0f);
  for (std::size_t r = 0; r < layout.grid_x; ++r)
    for (std::size_t c = 0; c < layout.grid_y; ++c) {
      const auto p = layout.cell_center(r, c);
      const auto pe = bev_encoding(layout, p[0], p[1]);
      float* dst = pos.data() + token_index(layout, kLidar, r, c) * kPosChannels;
      for (std::size_t i = 0; i < kBevPeDims; ++i) dst[kBevPe + i] = static_cast<float>(pe[i]);
      dst[kLidarFlag] = 1.0f;
    }
  const double elevation_freq = std::numbers::pi / cam.vertical_fov;
  for (std::size_t k = 0; k < layout.num_cams; ++k)
    for (std::size_t r = 0; r < layout.cam_h; ++r)
      for (std::size_t c = 0; c < layout.cam_w; ++c) {
        const double az = camera_token_azimuth(layout, k, c);
        const double el = camera_token_elevation(layout, cam, r);
        float* dst = pos.data() + token_index(layout, camera_sensor(static_cast<int>(k)), r, c) * kPosChannels;
        dst[kCamPe + 0] = static_cast<float>(std::cos(az));
        dst[kCamPe + 1] = static_cast<float>(std::sin(az));
        dst[kCamPe + 2] = static_cast<float>(std::cos(elevation_freq * el));
        dst[kCamPe + 3] = static_cast<float>(std::sin(elevation_freq * el));
        dst[kCameraFlag] = 1.0f;
      }
  return pos;
}

// ---------------------------------------------------------------------------
// Geometry helpers

// Box corners in the BEV plane, counter-clockwise.
inline std::array<std::array<double, 2>, 4> footprint_corners(const Box& b) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double hl = 0.5 * b.size[0], hw = 0.5 * b.size[1];
  std::array<std::array<double, 2>, 4> out{};
  const double sx[4] = {1, -1, -1, 1}, sy[4] = {1, 1, -1, -1};
  for (int i = 0; i < 4; ++i)
    out[i] = {b.center[0] + c * sx[i] * hl - s * sy[i] * hw, b.center[1] + s * sx[i] * hl + c * sy[i] * hw};
  return out;
}

// Euclidean distance from a point to the box footprint (0 inside).
inline double footprint_distance(const Box& b, double x, double y) {
  const double dx = x - b.center[0], dy = y - b.center[1];
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double lx = c * dx + s * dy, ly = -s * dx + c * dy;
  const double qx = std::max(std::abs(lx) - 0.5 * b.size[0], 0.0);
  const double qy = std::max(std::abs(ly) - 0.5 * b.size[1], 0.0);
  return std::hypot(qx, qy);
}

// Separating-axis test between an axis-aligned square cell and the footprint
// (positive-area overlap).
inline bool footprint_overlaps_cell(const Box& b, double cx, double cy, double half) {
  const auto corners = footprint_corners(b);
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const std::array<std::array<double, 2>, 4> axes{{{1.0, 0.0}, {0.0, 1.0}, {c, s}, {-s, c}}};
  const std::array<std::array<double, 2>, 4> cell{{{cx - half, cy - half}, {cx + half, cy - half},
                                                    {cx + half, cy + half}, {cx - half, cy + half}}};
  for (const auto& ax : axes) {
    double a_lo = 1e300, a_hi = -1e300, b_lo = 1e300, b_hi = -1e300;
    for (const auto& p : corners) {
      const double t = p[0] * ax[0] + p[1] * ax[1];
      b_lo = std::min(b_lo, t);
      b_hi = std::max(b_hi, t);
    }
    for (const auto& p : cell) {
      const double t = p[0] * ax[0] + p[1] * ax[1];
      a_lo = std::min(a_lo, t);
      a_hi = std::max(a_hi, t);
    }
    if (a_hi <= b_lo || b_hi <= a_lo) return false;
  }
  return true;
}

// Noise-free BEV occupancy of a cell: exp(-d^2 / (2 cell^2)) with d the
// distance from the cell center to the footprint, for cells overlapping the
// footprint; 0 elsewhere. Returns the dominating object (or -1).
inline std::pair<double, int> cell_occupancy(const TokenLayout& layout, const std::vector<Box>& objects,
                                             std::size_t row, std::size_t col) {
  const auto p = layout.cell_center(row, col);
  double best = 0.0;
  int who = -1;
  const double sigma = layout.cell_size;
  for (std::size_t i = 0; i < objects.size(); ++i) {
    if (!footprint_overlaps_cell(objects[i], p[0], p[1], 0.5 * layout.cell_size)) continue;
    const double d = footprint_distance(objects[i], p[0], p[1]);
    const double occ = std::exp(-d * d / (2.0 * sigma * sigma));
    if (occ > best) {
      best = occ;
      who = static_cast<int>(i);
    }
  }
  return {best, who};
}

// Angular extent of an object seen from the ego origin.
struct AngularBox {
  double az_lo, az_hi;  // unwrapped around the center azimuth
  double el_lo, el_hi;
};

inline AngularBox angular_box(const Box& b, const CameraModel& cam) {
  const double center_az = std::atan2(b.center[1], b.center[0]);
  double lo = 0.0, hi = 0.0;
  for (const auto& p : footprint_corners(b)) {
    const double rel = wrap_angle(std::atan2(p[1], p[0]) - center_az);
    lo = std::min(lo, rel);
    hi = std::max(hi, rel);
  }
  const double range = std::max(std::hypot(b.center[0], b.center[1]), 0.5);
  return {center_az + lo, center_az + hi, std::atan2(-cam.mount_height, range),
          std::atan2(b.size[2] - cam.mount_height, range)};
}

inline double interval_gap(double v, double lo, double hi) { return v < lo ? lo - v : (v > hi ? v - hi : 0.0); }

// Noise-free camera-token occupancy with the same overlap/falloff rule in
// angle space (one token of angular falloff).
inline std::pair<double, int> camera_occupancy(const TokenLayout& layout, const CameraModel& cam,
                                               const std::vector<Box>& objects, std::size_t view, std::size_t row,
                                               std::size_t col) {
  const double az = camera_token_azimuth(layout, view, col);
  const double el = camera_token_elevation(layout, cam, row);
  const double d_az = 2.0 * camera_half_sector(layout) / static_cast<double>(layout.cam_w);
  const double d_el = cam.vertical_fov / static_cast<double>(layout.cam_h);
  double best = 0.0;
  int who = -1;
  for (std::size_t i = 0; i < objects.size(); ++i) {
    const AngularBox ab = angular_box(objects[i], cam);
    const double mid = 0.5 * (ab.az_lo + ab.az_hi);
    const double rel = mid + wrap_angle(az - mid);  // token azimuth unwrapped near the object
    const bool overlap = rel + 0.5 * d_az > ab.az_lo && rel - 0.5 * d_az < ab.az_hi &&
                         el + 0.5 * d_el > ab.el_lo && el - 0.5 * d_el < ab.el_hi;
    if (!overlap) continue;
    const double ga = interval_gap(rel, ab.az_lo, ab.az_hi) / d_az;
    const double ge = interval_gap(el, ab.el_lo, ab.el_hi) / d_el;
    const double occ = std::exp(-0.5 * (ga * ga + ge * ge));
    if (occ > best) {
      best = occ;
      who = static_cast<int>(i);
    }
  }
  return {best, who};
}

// Builds the token field for a scene. Deterministic in (scene, layout,
// noise_std); occupancy noise is clamped to [0, 1].
inline TokenField generate_tokens(const Scene& scene, const TokenLayout& layout, double noise_std,
                                  const CameraModel& cam = {}) {
  scene.validate();
  layout.validate();
  if (!(noise_std >= 0.0)) throw Error(ErrorCode::invalid_argument, "generate_tokens: noise_std must be >= 0");
  TokenField f;
  f.layout = layout;
  f.camera = cam;
  f.features.assign(layout.total_tokens() * kFeatureChannels, 0.0f);
  f.position = positional_encodings(layout, cam);
  Rng rng(derive_seed(scene.seed, 0x70CE));

  const auto fill = [&](std::size_t s, double occ, int who) {
    occ = std::clamp(occ + (noise_std > 0.0 ? noise_std * rng.normal() : 0.0), 0.0, 1.0);
    auto ch = f.feature(s);
    ch[kOcc] = static_cast<float>(occ);
    if (who >= 0) {
      const Box& b = scene.objects[static_cast<std::size_t>(who)];
      ch[kLength] = static_cast<float>(occ * b.size[0]);
      ch[kWidth] = static_cast<float>(occ * b.size[1]);
      ch[kHeight] = static_cast<float>(occ * b.size[2]);
      ch[kYawCos] = static_cast<float>(occ * std::cos(b.yaw));
      ch[kYawSin] = static_cast<float>(occ * std::sin(b.yaw));
    }
    if (noise_std > 0.0)
      for (std::size_t k = kLength; k < kFeatureChannels; ++k)
        ch[k] += static_cast<float>(noise_std * rng.normal());
  };

  for (std::size_t r = 0; r < layout.grid_x; ++r)
    for (std::size_t c = 0; c < layout.grid_y; ++c) {
      const auto [occ, who] = cell_occupancy(layout, scene.objects, r, c);
      fill(token_index(layout, kLidar, r, c), occ, who);
    }
  for (std::size_t k = 0; k < layout.num_cams; ++k)
    for (std::size_t r = 0; r < layout.cam_h; ++r)
      for (std::size_t c = 0; c < layout.cam_w; ++c) {
        const auto [occ, who] = camera_occupancy(layout, cam, scene.objects, k, r, c);
        fill(token_index(layout, camera_sensor(static_cast<int>(k)), r, c), occ, who);
      }
  return f;
}

// ---------------------------------------------------------------------------
// Scenes

struct SceneConfig {
  std::size_t num_objects = 6;
  double extent = 51.2;
  double min_range = 8.0;       // from the ego origin, m
  double min_separation = 8.0;  // between object centers, m
  double border = 3.0;          // keep-out margin at the extent edge, m
};

// Cars (class 0) and trucks (class 1) on the ground plane (z = h/2).
inline Scene generate_scene(std::uint64_t seed, const SceneConfig& cfg = {}) {
  if (!(cfg.extent > 2.0 * cfg.border)) throw Error(ErrorCode::invalid_argument, "generate_scene: extent too small");
  Scene scene;
  scene.extent = cfg.extent;
  scene.seed = seed;
  Rng rng(derive_seed(seed, 0x5CE7E));
  const double lim = 0.5 * cfg.extent - cfg.border;
  std::size_t attempts = 0;
  while (scene.objects.size() < cfg.num_objects) {
    if (++attempts > 10000)
      throw Error(ErrorCode::invalid_argument, "generate_scene: cannot place " + std::to_string(cfg.num_objects) +
                                                   " objects with the requested spacing");
    const double x = rng.uniform(-lim, lim), y = rng.uniform(-lim, lim);
    const double yaw = wrap_angle(rng.uniform(-std::numbers::pi, std::numbers::pi));
    const bool truck = rng.uniform() < 0.2;
    Box b;
    b.class_id = truck ? 1 : 0;
    b.size = truck ? Vec3{rng.uniform(6.0, 9.0), rng.uniform(2.3, 2.6), rng.uniform(2.5, 3.5)}
                   : Vec3{rng.uniform(3.8, 5.2), rng.uniform(1.7, 2.1), rng.uniform(1.4, 1.9)};
    b.center = {x, y, 0.5 * b.size[2]};
    b.yaw = yaw;
    if (std::hypot(x, y) < cfg.min_range) continue;
    const bool crowded = std::any_of(scene.objects.begin(), scene.objects.end(), [&](const Box& o) {
      return std::hypot(o.center[0] - x, o.center[1] - y) < cfg.min_separation;
    });
    if (crowded) continue;
    scene.objects.push_back(b);
  }
  return scene;
}

// ---------------------------------------------------------------------------
// Detector

struct DetectorConfig {
  std::size_t layers = 3;
  std::size_t heads = 4;
  std::size_t queries = 64;
  std::size_t width = 32;  // d; softmax temperature is 1/sqrt(d)
  TokenLayout layout;
  std::uint64_t weight_seed = 0x7A11;
  double score_sharpness = 10.0;  // score = logistic(sharpness * (evidence - offset))
  double score_offset = 0.5;
  double position_gain = 190.0;   // query BEV positional scale
  double camera_gain = 140.0;     // query camera-azimuth scale
  double occupancy_gain = 24.0;   // query weight on the occupancy channel
  double camera_bias = -4.0;      // logit offset of camera tokens relative to LiDAR
  double refine_rate = 1.0;       // query position update per layer
  double head_spread = 0.25;      // per-head gain jitter, fraction
  double head_mixing = 0.02;      // scale of the dense seeded part of W_q
  double z_prior = 0.0;           // ground plane height, m
  double log_var_floor = -9.210340371976184;  // log(1e-4)

  void validate() const {
    if (layers == 0 || heads == 0 || queries == 0)
      throw Error(ErrorCode::invalid_argument, "detector: L, H and Q must be >= 1");
    if (width < kMinWidth)
      throw Error(ErrorCode::invalid_argument, "detector: width must be >= " + std::to_string(kMinWidth));
    if (!(score_sharpness > 0.0)) throw Error(ErrorCode::invalid_argument, "detector: score_sharpness must be > 0");
    layout.validate();
  }
};

struct DetectorOutput {
  std::vector<UncertainDetection> detections;  // one per query, query order
  AttentionStack attention;
};

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Inverse of the Best-Fisher approximation to A(kappa) = I1(kappa)/I0(kappa).
inline double concentration_from_resultant(double r) {
  r = std::clamp(r, 1e-6, 1.0 - 1e-9);
  if (r < 0.53) return 2.0 * r + r * r * r + 5.0 * std::pow(r, 5) / 6.0;
  if (r < 0.85) return -0.4 + 1.39 * r + 0.43 / (1.0 - r);
  return 1.0 / (r * r * r - 4.0 * r * r + 3.0 * r);
}

class Detector {
 public:
  explicit Detector(DetectorConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const std::size_t d = cfg_.width;
    build_anchors();
    // Per (layer, head): W_k = W_v = R and W_q = R (D + eps G), with R a
    // seeded rotation, D a seeded block-diagonal gain and G a seeded dense
    // matrix; the output projection is R^T. Logits only need the folded
    // bilinear form W_q^T W_k.
    bilinear_.resize(cfg_.layers * cfg_.heads);
    for (std::size_t i = 0; i < bilinear_.size(); ++i) {
      Rng rng(derive_seed(cfg_.weight_seed, i));
      const std::vector<double> rot = random_rotation(d, rng);
      std::array<double, 3> gain{};
      for (auto& g : gain) g = 1.0 + cfg_.head_spread * (2.0 * rng.uniform() - 1.0);
      std::vector<double> inner(d * d);
      for (std::size_t r = 0; r < d; ++r)
        for (std::size_t c = 0; c < d; ++c)
          inner[r * d + c] = cfg_.head_mixing * rng.normal() / std::sqrt(static_cast<double>(d)) +
                             (r == c ? channel_gain(gain, r) : 0.0);
      std::vector<double> wq(d * d, 0.0);
      for (std::size_t r = 0; r < d; ++r)
        for (std::size_t k = 0; k < d; ++k)
          for (std::size_t c = 0; c < d; ++c) wq[r * d + c] += rot[r * d + k] * inner[k * d + c];
      std::vector<double> b(d * d, 0.0);  // b = W_q^T W_k
      for (std::size_t r = 0; r < d; ++r)
        for (std::size_t k = 0; k < d; ++k)
          for (std::size_t c = 0; c < d; ++c) b[r * d + c] += wq[k * d + r] * rot[k * d + c];
      bilinear_[i] = std::move(b);
    }
  }

  const DetectorConfig& config() const { return cfg_; }
  const std::vector<std::array<double, 2>>& anchors() const { return anchors_; }

  DetectorOutput run(const TokenField& tokens, std::span<const SensorId> masked = {}) const {
    const TokenLayout& layout = cfg_.layout;
    if (!(tokens.layout == layout)) throw Error(ErrorCode::layout_mismatch, "detector: token layout differs from config");
    const std::size_t d = cfg_.width, L = cfg_.layers, H = cfg_.heads, Q = cfg_.queries;
    const std::size_t S = layout.total_tokens();

    std::vector<bool> sensor_masked(layout.num_sensors(), false);
    for (SensorId m : masked) {
      if (m < 0 || static_cast<std::size_t>(m) >= sensor_masked.size())
        throw Error(ErrorCode::out_of_range, "detector: masked sensor " + std::to_string(m) + " does not exist");
      sensor_masked[static_cast<std::size_t>(m)] = true;
    }
    std::vector<std::size_t> active;
    for (std::size_t s = 0; s < S; ++s)
      if (!sensor_masked[static_cast<std::size_t>(sensor_of_fast(s))]) active.push_back(s);
    if (active.empty()) throw Error(ErrorCode::no_input, "detector: every modality is masked");
    const std::size_t A = active.size();
    const auto lidar_active = static_cast<std::size_t>(
        std::lower_bound(active.begin(), active.end(), layout.lidar_tokens()) - active.begin());

    // Token embeddings: positional channels, then features, zero padded.
    std::vector<float> x(A * d, 0.0f);
    for (std::size_t i = 0; i < A; ++i) {
      const auto pe = tokens.pos(active[i]);
      const auto ft = tokens.feature(active[i]);
      std::copy(pe.begin(), pe.end(), x.begin() + static_cast<std::ptrdiff_t>(i * d));
      std::copy(ft.begin(), ft.end(), x.begin() + static_cast<std::ptrdiff_t>(i * d + kPosChannels));
    }

    std::vector<double> q = initial_queries();  // Q x d
    DetectorOutput out;
    out.attention = AttentionStack(L, H, Q, S);
    std::vector<float> xt(kMinWidth * A), qh(kMinWidth), logits(A);
    for (std::size_t i = 0; i < A; ++i)
      for (std::size_t k = 0; k < kMinWidth; ++k) xt[k * A + i] = x[i * d + k];
    std::vector<double> avg(Q * A);  // head-averaged attention of the current layer
    std::vector<double> attended(Q * d);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    const double inv_heads = 1.0 / static_cast<double>(H);

    for (std::size_t l = 0; l < L; ++l) {
      std::fill(avg.begin(), avg.end(), 0.0);
      for (std::size_t h = 0; h < H; ++h) {
        const std::vector<double>& b = bilinear_[l * H + h];
        auto slice = out.attention.slice(l, h);
        for (std::size_t qi = 0; qi < Q; ++qi) {
          // (W_q q) . (W_k x) / sqrt(d) = (b^T q) . x / sqrt(d); token channels
          // past kMinWidth are zero.
          const double* qv = q.data() + qi * d;
          for (std::size_t c = 0; c < kMinWidth; ++c) {
            double acc = 0.0;
            for (std::size_t r = 0; r < d; ++r) acc += qv[r] * b[r * d + c];
            qh[c] = static_cast<float>(acc * inv_sqrt_d);
          }
          // Positional channels are zero outside their own modality, and the
          // active LiDAR tokens form a prefix [0, lidar_active).
          std::fill(logits.begin(), logits.begin() + static_cast<std::ptrdiff_t>(lidar_active), qh[kLidarFlag]);
          std::fill(logits.begin() + static_cast<std::ptrdiff_t>(lidar_active), logits.end(), qh[kCameraFlag]);
          const auto axpy = [&](std::size_t k, std::size_t lo, std::size_t hi) {
            const float w = qh[k];
            const float* kr = xt.data() + k * A;
            for (std::size_t i = lo; i < hi; ++i) logits[i] += w * kr[i];
          };
          for (std::size_t k = kBevPe; k < kBevPe + kBevPeDims; ++k) axpy(k, 0, lidar_active);
          for (std::size_t k = kCamPe; k < kCamPe + kCamPeDims; ++k) axpy(k, lidar_active, A);
          for (std::size_t k = kPosChannels; k < kMinWidth; ++k) axpy(k, 0, A);
          const float peak = *std::max_element(logits.begin(), logits.end());
          double sum = 0.0;
          for (std::size_t i = 0; i < A; ++i) {
            logits[i] = std::exp(logits[i] - peak);
            sum += logits[i];
          }
          const auto inv = static_cast<float>(1.0 / sum);
          float* row = slice.data() + qi * S;
          double* acc = avg.data() + qi * A;
          for (std::size_t i = 0; i < A; ++i) {
            const float a = logits[i] * inv;
            row[active[i]] = a;
            acc[i] += static_cast<double>(a) * inv_heads;
          }
        }
      }
      // Values share the key rotation and the output projection is its
      // transpose, so each head outputs the attention-weighted mean of the
      // token embeddings; heads are averaged.
      std::fill(attended.begin(), attended.end(), 0.0);
      for (std::size_t qi = 0; qi < Q; ++qi) {
        double* o = attended.data() + qi * d;
        const double* a = avg.data() + qi * A;
        for (std::size_t i = 0; i < A; ++i) {
          const float* xr = x.data() + i * d;
          for (std::size_t k = 0; k < kMinWidth; ++k) o[k] += a[i] * static_cast<double>(xr[k]);
        }
      }
      if (l + 1 < L) refine(q, attended, avg, active, tokens);
    }

    out.detections.resize(Q);
    for (std::size_t qi = 0; qi < Q; ++qi) {
      out.detections[qi] = decode(qi, {avg.data() + qi * A, A}, {attended.data() + qi * d, d}, active, tokens);
      out.attention.query_scores[qi] = static_cast<float>(out.detections[qi].score);
    }
    return out;
  }

 private:
  SensorId sensor_of_fast(std::size_t s) const {
    const TokenLayout& l = cfg_.layout;
    if (s < l.lidar_tokens()) return kLidar;
    return camera_sensor(static_cast<int>((s - l.lidar_tokens()) / l.camera_tokens_per_view()));
  }

  void build_anchors() {
    const TokenLayout& l = cfg_.layout;
    const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(cfg_.queries))));
    const std::size_t rows = (cfg_.queries + cols - 1) / cols;
    for (std::size_t i = 0; i < rows && anchors_.size() < cfg_.queries; ++i)
      for (std::size_t j = 0; j < cols && anchors_.size() < cfg_.queries; ++j)
        anchors_.push_back({((static_cast<double>(i) + 0.5) / static_cast<double>(rows) - 0.5) * l.extent_x(),
                            ((static_cast<double>(j) + 0.5) / static_cast<double>(cols) - 0.5) * l.extent_y()});
  }

  // Seeded Haar-ish rotation: Gram-Schmidt on a Gaussian matrix, row-major.
  static std::vector<double> random_rotation(std::size_t d, Rng& rng) {
    std::vector<double> m(d * d);
    for (auto& v : m) v = rng.normal();
    for (std::size_t i = 0; i < d; ++i) {
      double* ri = m.data() + i * d;
      for (std::size_t j = 0; j < i; ++j) {
        const double* rj = m.data() + j * d;
        double dot = 0.0;
        for (std::size_t k = 0; k < d; ++k) dot += ri[k] * rj[k];
        for (std::size_t k = 0; k < d; ++k) ri[k] -= dot * rj[k];
      }
      double norm = 0.0;
      for (std::size_t k = 0; k < d; ++k) norm += ri[k] * ri[k];
      norm = std::sqrt(norm);
      for (std::size_t k = 0; k < d; ++k) ri[k] /= norm;
    }
    return m;
  }

  // Per-head diagonal gain: [0] BEV positional block, [1] camera block,
  // [2] occupancy channel.
  static double channel_gain(const std::array<double, 3>& g, std::size_t k) {
    if ((k >= kBevPe && k < kBevPe + kBevPeDims) || k == kLidarFlag) return g[0];
    if ((k >= kCamPe && k < kCamPe + kCamPeDims) || k == kCameraFlag) return g[1];
    if (k == kPosChannels + kOcc) return g[2];
    return 1.0;
  }

  std::vector<double> initial_queries() const {
    const std::size_t d = cfg_.width;
    std::vector<double> q(cfg_.queries * d, 0.0);
    for (std::size_t qi = 0; qi < cfg_.queries; ++qi) {
      double* v = q.data() + qi * d;
      const auto& a = anchors_[qi];
      const auto pe = bev_encoding(cfg_.layout, a[0], a[1]);
      for (std::size_t i = 0; i < kBevPeDims; ++i) v[kBevPe + i] = cfg_.position_gain * pe[i];
      const double az = std::atan2(a[1], a[0]);
      v[kCamPe + 0] = cfg_.camera_gain * std::cos(az);
      v[kCamPe + 1] = cfg_.camera_gain * std::sin(az);
      // Indicator weights put the positional peak of both modalities at a
      // logit of 0 (camera shifted by camera_bias).
      v[kLidarFlag] = -4.0 * cfg_.position_gain;
      v[kCameraFlag] = -cfg_.camera_gain + cfg_.camera_bias;
      v[kPosChannels + kOcc] = cfg_.occupancy_gain;
    }
    return q;
  }

  // Moves each query's positional blocks toward the positional encoding of
  // the tokens it attended to; each (cos, sin) pair is renormalized.
  void refine(std::vector<double>& q, const std::vector<double>& attended, const std::vector<double>& avg,
              const std::vector<std::size_t>& active, const TokenField& tokens) const {
    const std::size_t d = cfg_.width, A = active.size();
    for (std::size_t qi = 0; qi < cfg_.queries; ++qi) {
      double lidar_mass = 0.0, camera_mass = 0.0;
      for (std::size_t i = 0; i < A; ++i) {
        const double a = avg[qi * A + i];
        (tokens.pos(active[i])[kLidarFlag] > 0.5f ? lidar_mass : camera_mass) += a;
      }
      double* v = q.data() + qi * d;
      const double* o = attended.data() + qi * d;
      const auto update_pair = [&](std::size_t at, double gain, double mass) {
        if (mass < 1e-9) return;
        const double c = v[at] / gain + cfg_.refine_rate * o[at] / mass;
        const double s = v[at + 1] / gain + cfg_.refine_rate * o[at + 1] / mass;
        const double n = std::hypot(c, s);
        if (n < 1e-12) return;
        v[at] = gain * c / n;
        v[at + 1] = gain * s / n;
      };
      for (std::size_t j = 0; j < 4; ++j) update_pair(kBevPe + 2 * j, cfg_.position_gain, lidar_mass);
      update_pair(kCamPe, cfg_.camera_gain, camera_mass);
    }
  }

  UncertainDetection decode(std::size_t qi, std::span<const double> att, std::span<const double> attended,
                            const std::vector<std::size_t>& active, const TokenField& tokens) const {
    const TokenLayout& layout = cfg_.layout;
    UncertainDetection det;
    const double evidence = attended[kPosChannels + kOcc];
    det.score = logistic(cfg_.score_sharpness * (evidence - cfg_.score_offset));

    // BEV location of each attended token: LiDAR cell centers when LiDAR is
    // present, otherwise camera rays at the anchor range.
    double mass = 0.0, mx = 0.0, my = 0.0;
    std::vector<std::array<double, 3>> pts;  // x, y, weight
    pts.reserve(active.size());
    const bool has_lidar = active.front() < layout.lidar_tokens();
    const double anchor_range = std::hypot(anchors_[qi][0], anchors_[qi][1]);
    for (std::size_t i = 0; i < active.size(); ++i) {
      const std::size_t s = active[i];
      std::array<double, 2> p;
      if (s < layout.lidar_tokens()) {
        p = layout.cell_center(s / layout.grid_y, s % layout.grid_y);
      } else {
        if (has_lidar) continue;
        const TokenRef ref = token_ref(layout, s);
        const double az = camera_token_azimuth(layout, static_cast<std::size_t>(ref.sensor - 1), ref.col);
        p = {anchor_range * std::cos(az), anchor_range * std::sin(az)};
      }
      pts.push_back({p[0], p[1], att[i]});
      mass += att[i];
      mx += att[i] * p[0];
      my += att[i] * p[1];
    }
    mx /= mass;
    my /= mass;
    double vx = 0.0, vy = 0.0;
    for (const auto& p : pts) {
      vx += p[2] * (p[0] - mx) * (p[0] - mx);
      vy += p[2] * (p[1] - my) * (p[1] - my);
    }
    vx /= mass;
    vy /= mass;

    // Size, yaw and height spread from occupancy-weighted attribute channels.
    const double* ch = attended.data() + kPosChannels;
    Vec3 size{4.5, 2.0, 1.7};
    double resultant = 0.0, yaw = 0.0, var_h = 0.25;
    if (evidence > 1e-6) {
      for (int k = 0; k < 3; ++k) size[k] = std::max(0.1, ch[kLength + k] / evidence);
      yaw = std::atan2(ch[kYawSin], ch[kYawCos]);
      resultant = std::hypot(ch[kYawCos], ch[kYawSin]) / evidence;
      double w_sum = 0.0, acc = 0.0;
      for (std::size_t i = 0; i < active.size(); ++i) {
        const auto f = tokens.feature(active[i]);
        if (f[kOcc] < 0.05f) continue;
        const double w = att[i] * f[kOcc];
        const double h = f[kHeight] / f[kOcc];
        acc += w * (h - size[2]) * (h - size[2]);
        w_sum += w;
      }
      if (w_sum > 0.0) var_h = acc / w_sum;
    }
    det.box.center = {mx, my, cfg_.z_prior + 0.5 * size[2]};
    det.box.size = size;
    det.box.yaw = wrap_angle(yaw);
    det.box.class_id = size[0] > 5.8 ? 1 : 0;
    det.log_var = {std::max(cfg_.log_var_floor, std::log(vx)), std::max(cfg_.log_var_floor, std::log(vy)),
                   std::max(cfg_.log_var_floor, std::log(0.25 * var_h))};
    det.u_theta = -std::log(concentration_from_resultant(resultant));
    return det;
  }

  DetectorConfig cfg_;
  std::vector<std::array<double, 2>> anchors_;
  std::vector<std::vector<double>> bilinear_;  // per (layer, head), d x d
};

inline DetectorOutput run_detector(const TokenField& tokens, const DetectorConfig& cfg,
                                   std::span<const SensorId> masked = {}) {
  return Detector(cfg).run(tokens, masked);
}

inline std::vector<SensorId> camera_sensors(const TokenLayout& layout) {
  std::vector<SensorId> out;
  for (std::size_t c = 0; c < layout.num_cams; ++c) out.push_back(camera_sensor(static_cast<int>(c)));
  return out;
}

// Score threshold followed by greedy BEV center-distance suppression.
inline std::vector<UncertainDetection> postprocess(const std::vector<UncertainDetection>& dets,
                                                   double score_threshold = 0.3, double nms_radius = 3.0) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<UncertainDetection> kept;
  for (std::size_t i : order) {
    const auto& d = dets[i];
    if (!(d.score >= score_threshold)) break;
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const UncertainDetection& k) {
      return std::hypot(k.box.center[0] - d.box.center[0], k.box.center[1] - d.box.center[1]) < nms_radius;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

inline std::vector<Detection> plain(const std::vector<UncertainDetection>& dets) {
  std::vector<Detection> out;
  out.reserve(dets.size());
  for (const auto& d : dets) out.push_back(d.detection());
  return out;
}

}  // namespace trustlens::synthdet
