#pragma once

// File formats.
//
// ATTN binary (all integers and floats little-endian):
//   "ATTN" | u16 version | u32 L | u32 H | u32 Q | u32 S | Q x f32 query scores
//   | L*H*Q*S x f32 weights, row-major [layer][head][query][token]
//
// JSON documents carry a "format" tag and a "version"; lengths are meters,
// angles radians, log-variances log(m^2).

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "trustlens/core.hpp"

namespace trustlens::io {

using json = nlohmann::json;

inline constexpr char kAttnMagic[4] = {'A', 'T', 'T', 'N'};
inline constexpr std::uint16_t kAttnVersion = 1;
inline constexpr std::size_t kAttnHeaderBytes = 4 + 2 + 4 * 4;

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void check_finite_f32(const float* v, std::size_t n) {
  // exponent all ones means inf or nan
  std::uint32_t bad = 0;
  for (std::size_t i = 0; i < n; ++i) bad |= static_cast<std::uint32_t>((std::bit_cast<std::uint32_t>(v[i]) & 0x7f800000u) == 0x7f800000u);
  if (bad)
    for (std::size_t i = 0; i < n; ++i)
      if (!std::isfinite(v[i])) throw Error(ErrorCode::nan_payload, "ATTN: non-finite value at float " + std::to_string(i));
}

inline void decode_f32(const unsigned char* p, std::size_t n, float* out) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out, p, 4 * n);
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = std::bit_cast<float>(get_u32(p + 4 * i));
  }
  check_finite_f32(out, n);
}

inline std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xffffffffULL) throw Error(ErrorCode::dimension_mismatch, std::string("ATTN: ") + what + " exceeds u32");
  return static_cast<std::uint32_t>(v);
}

}  // namespace detail

struct AttnHeader {
  std::size_t layers = 0, heads = 0, queries = 0, tokens = 0;
};

inline std::string serialize_attention(const AttentionStack& stack) {
  if (stack.values.size() != stack.layers * stack.heads * stack.queries * stack.tokens ||
      stack.query_scores.size() != stack.queries)
    throw Error(ErrorCode::dimension_mismatch, "ATTN: payload size does not match dimensions");
  std::string out;
  out.reserve(kAttnHeaderBytes + 4 * (stack.query_scores.size() + stack.values.size()));
  out.append(kAttnMagic, 4);
  detail::put_u16(out, kAttnVersion);
  detail::put_u32(out, detail::checked_u32(stack.layers, "L"));
  detail::put_u32(out, detail::checked_u32(stack.heads, "H"));
  detail::put_u32(out, detail::checked_u32(stack.queries, "Q"));
  detail::put_u32(out, detail::checked_u32(stack.tokens, "S"));
  for (float s : stack.query_scores) {
    if (!std::isfinite(s)) throw Error(ErrorCode::nan_payload, "ATTN: non-finite query score");
    detail::put_f32(out, s);
  }
  for (float v : stack.values) {
    if (!std::isfinite(v)) throw Error(ErrorCode::nan_payload, "ATTN: non-finite attention weight");
    detail::put_f32(out, v);
  }
  return out;
}

inline AttnHeader parse_attn_header(const unsigned char* p, std::size_t n) {
  if (n < kAttnHeaderBytes) throw Error(ErrorCode::truncated, "ATTN: header shorter than 22 bytes");
  if (std::memcmp(p, kAttnMagic, 4) != 0) throw Error(ErrorCode::bad_magic, "ATTN: magic is not 'ATTN'");
  const auto version = static_cast<std::uint16_t>(p[4] | (p[5] << 8));
  if (version != kAttnVersion)
    throw Error(ErrorCode::bad_version, "ATTN: unsupported version " + std::to_string(version));
  return {detail::get_u32(p + 6), detail::get_u32(p + 10), detail::get_u32(p + 14), detail::get_u32(p + 18)};
}

inline void check_layout(const AttnHeader& h, const TokenLayout& layout) {
  if (h.tokens != layout.total_tokens())
    throw Error(ErrorCode::layout_mismatch, "ATTN: S=" + std::to_string(h.tokens) + " but layout has S_pc+S_img=" +
                                                std::to_string(layout.lidar_tokens()) + "+" +
                                                std::to_string(layout.camera_tokens()));
}

inline AttentionStack deserialize_attention(std::string_view bytes, const std::optional<TokenLayout>& layout = {}) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const AttnHeader h = parse_attn_header(p, bytes.size());
  if (layout) check_layout(h, *layout);
  const std::size_t n_values = h.layers * h.heads * h.queries * h.tokens;
  const std::size_t expected = kAttnHeaderBytes + 4 * (h.queries + n_values);
  if (bytes.size() < expected) throw Error(ErrorCode::truncated, "ATTN: payload shorter than header dimensions");
  if (bytes.size() > expected) throw Error(ErrorCode::dimension_mismatch, "ATTN: trailing bytes after payload");
  AttentionStack stack(h.layers, h.heads, h.queries, h.tokens);
  detail::decode_f32(p + kAttnHeaderBytes, h.queries, stack.query_scores.data());
  detail::decode_f32(p + kAttnHeaderBytes + 4 * h.queries, n_values, stack.values.data());
  return stack;
}

// Reads an ATTN stream one (layer, head) slice at a time so that large
// stacks never need to be resident in memory.
class AttnStreamReader {
 public:
  explicit AttnStreamReader(std::istream& in) : in_(in) {
    unsigned char head[kAttnHeaderBytes];
    in_.read(reinterpret_cast<char*>(head), kAttnHeaderBytes);
    header_ = parse_attn_header(head, static_cast<std::size_t>(in_.gcount()));
    scores_.resize(header_.queries);
    read_floats(scores_.data(), scores_.size());
  }

  const AttnHeader& header() const { return header_; }
  const std::vector<float>& query_scores() const { return scores_; }
  std::size_t slice_size() const { return header_.queries * header_.tokens; }
  bool done() const { return next_slice_ == header_.layers * header_.heads; }

  // Fills `out` (Q*S floats) with the next slice in (layer, head) order.
  void read_slice(std::vector<float>& out) {
    if (done()) throw Error(ErrorCode::out_of_range, "ATTN: no slices left");
    out.resize(slice_size());
    read_floats(out.data(), out.size());
    ++next_slice_;
  }

  // Passes each query row listed in `keep` (ascending) of the next slice to
  // sink(i, row), where i is the position in `keep`; other rows are skipped.
  template <class Sink>
  void read_rows(std::span<const std::size_t> keep, Sink&& sink) {
    if (done()) throw Error(ErrorCode::out_of_range, "ATTN: no slices left");
    const std::size_t s = header_.tokens;
    row_.resize(s);
    std::size_t q = 0;
    for (std::size_t i = 0; i < keep.size(); ++i) {
      if (keep[i] < q || keep[i] >= header_.queries) throw Error(ErrorCode::out_of_range, "ATTN: row index out of order");
      skip_floats((keep[i] - q) * s);
      read_floats(row_.data(), s);
      sink(i, std::span<const float>(row_));
      q = keep[i] + 1;
    }
    skip_floats((header_.queries - q) * s);
    ++next_slice_;
  }

 private:
  void read_floats(float* dst, std::size_t n) {
    const auto bytes = static_cast<std::streamsize>(4 * n);
    if constexpr (std::endian::native == std::endian::little) {
      in_.read(reinterpret_cast<char*>(dst), bytes);
      if (in_.gcount() != bytes) throw Error(ErrorCode::truncated, "ATTN: payload shorter than header dimensions");
      detail::check_finite_f32(dst, n);
    } else {
      buffer_.resize(4 * n);
      in_.read(reinterpret_cast<char*>(buffer_.data()), bytes);
      if (in_.gcount() != bytes) throw Error(ErrorCode::truncated, "ATTN: payload shorter than header dimensions");
      detail::decode_f32(buffer_.data(), n, dst);
    }
  }

  void skip_floats(std::size_t n) {
    if (n == 0) return;
    in_.ignore(static_cast<std::streamsize>(4 * n));
    if (static_cast<std::size_t>(in_.gcount()) != 4 * n)
      throw Error(ErrorCode::truncated, "ATTN: payload shorter than header dimensions");
  }

  std::istream& in_;
  AttnHeader header_;
  std::vector<float> scores_;
  std::vector<unsigned char> buffer_;
  std::vector<float> row_;
  std::size_t next_slice_ = 0;
};

// ---------------------------------------------------------------------------
// JSON

namespace detail {

inline const json& field(const json& j, const char* key, const std::string& ctx) {
  if (!j.is_object()) throw Error(ErrorCode::schema, ctx + ": expected an object");
  auto it = j.find(key);
  if (it == j.end()) throw Error(ErrorCode::schema, ctx + ": missing field '" + key + "'");
  return *it;
}

inline double number(const json& j, const char* key, const std::string& ctx) {
  const json& v = field(j, key, ctx);
  if (v.is_null()) throw Error(ErrorCode::nan_payload, ctx + "." + key + ": null (NaN) value");
  if (!v.is_number()) throw Error(ErrorCode::schema, ctx + "." + key + ": expected a number");
  return v.get<double>();
}

template <typename Int>
Int integer(const json& j, const char* key, const std::string& ctx) {
  const json& v = field(j, key, ctx);
  if (!v.is_number_integer()) throw Error(ErrorCode::schema, ctx + "." + key + ": expected an integer");
  if constexpr (std::is_unsigned_v<Int>) {
    if (!v.is_number_unsigned()) throw Error(ErrorCode::schema, ctx + "." + key + ": expected a non-negative integer");
  }
  return v.get<Int>();
}

inline Vec3 vec3(const json& j, const char* key, const std::string& ctx) {
  const json& v = field(j, key, ctx);
  if (!v.is_array() || v.size() != 3) throw Error(ErrorCode::schema, ctx + "." + key + ": expected 3 numbers");
  Vec3 out{};
  for (std::size_t i = 0; i < 3; ++i) {
    if (v[i].is_null()) throw Error(ErrorCode::nan_payload, ctx + "." + key + ": null (NaN) value");
    if (!v[i].is_number()) throw Error(ErrorCode::schema, ctx + "." + key + ": expected 3 numbers");
    out[i] = v[i].get<double>();
  }
  return out;
}

inline void expect_format(const json& j, const char* format, const std::string& ctx) {
  const json& f = field(j, "format", ctx);
  if (!f.is_string() || f.get<std::string>() != format)
    throw Error(ErrorCode::schema, ctx + ": format must be '" + std::string(format) + "'");
  if (integer<int>(j, "version", ctx) != 1) throw Error(ErrorCode::bad_version, ctx + ": unsupported version");
}

inline json units() { return {{"length", "m"}, {"angle", "rad"}, {"log_variance", "log(m^2)"}}; }

inline void check_finite(double v, const std::string& ctx) {
  if (!std::isfinite(v)) throw Error(ErrorCode::nan_payload, ctx + ": non-finite value");
}

}  // namespace detail

inline json box_to_json(const Box& b) {
  return {{"center_m", b.center}, {"size_m", b.size}, {"yaw_rad", b.yaw}, {"class_id", b.class_id}};
}

inline Box box_from_json(const json& j, const std::string& ctx) {
  Box b;
  b.center = detail::vec3(j, "center_m", ctx);
  b.size = detail::vec3(j, "size_m", ctx);
  b.yaw = detail::number(j, "yaw_rad", ctx);
  b.class_id = detail::integer<int>(j, "class_id", ctx);
  validate_box(b, ctx);
  return b;
}

inline json layout_to_json(const TokenLayout& l) {
  return {{"format", "trustlens.layout"}, {"version", 1},       {"grid_x", l.grid_x}, {"grid_y", l.grid_y},
          {"cell_size_m", l.cell_size},   {"num_cams", l.num_cams}, {"cam_h", l.cam_h},   {"cam_w", l.cam_w}};
}

inline TokenLayout layout_from_json(const json& j) {
  const std::string ctx = "layout";
  detail::expect_format(j, "trustlens.layout", ctx);
  TokenLayout l;
  l.grid_x = detail::integer<std::size_t>(j, "grid_x", ctx);
  l.grid_y = detail::integer<std::size_t>(j, "grid_y", ctx);
  l.cell_size = detail::number(j, "cell_size_m", ctx);
  l.num_cams = detail::integer<std::size_t>(j, "num_cams", ctx);
  l.cam_h = detail::integer<std::size_t>(j, "cam_h", ctx);
  l.cam_w = detail::integer<std::size_t>(j, "cam_w", ctx);
  l.validate();
  return l;
}

inline json scene_to_json(const Scene& s) {
  json objects = json::array();
  for (const auto& b : s.objects) objects.push_back(box_to_json(b));
  return {{"format", "trustlens.scene"}, {"version", 1},  {"units", detail::units()},
          {"extent_m", s.extent},        {"seed", s.seed}, {"objects", std::move(objects)}};
}

inline Scene scene_from_json(const json& j) {
  const std::string ctx = "scene";
  detail::expect_format(j, "trustlens.scene", ctx);
  Scene s;
  s.extent = detail::number(j, "extent_m", ctx);
  s.seed = detail::integer<std::uint64_t>(j, "seed", ctx);
  const json& objs = detail::field(j, "objects", ctx);
  if (!objs.is_array()) throw Error(ErrorCode::schema, ctx + ".objects: expected an array");
  for (std::size_t i = 0; i < objs.size(); ++i)
    s.objects.push_back(box_from_json(objs[i], ctx + ".objects[" + std::to_string(i) + "]"));
  s.validate();
  return s;
}

inline json detections_to_json(const std::vector<UncertainDetection>& dets) {
  json arr = json::array();
  for (std::size_t i = 0; i < dets.size(); ++i) {
    const auto& d = dets[i];
    const std::string ctx = "detections[" + std::to_string(i) + "]";
    detail::check_finite(d.score, ctx + ".score");
    for (double u : d.log_var) detail::check_finite(u, ctx + ".log_var_m2");
    detail::check_finite(d.u_theta, ctx + ".u_theta");
    json o = box_to_json(d.box);
    o["score"] = d.score;
    o["log_var_m2"] = d.log_var;
    o["u_theta"] = d.u_theta;
    arr.push_back(std::move(o));
  }
  return {{"format", "trustlens.detections"}, {"version", 1}, {"units", detail::units()}, {"detections", std::move(arr)}};
}

inline std::vector<UncertainDetection> detections_from_json(const json& j) {
  const std::string ctx = "detections";
  detail::expect_format(j, "trustlens.detections", ctx);
  const json& arr = detail::field(j, "detections", ctx);
  if (!arr.is_array()) throw Error(ErrorCode::schema, ctx + ": expected an array");
  std::vector<UncertainDetection> out;
  out.reserve(arr.size());
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string c = ctx + "[" + std::to_string(i) + "]";
    UncertainDetection d;
    d.box = box_from_json(arr[i], c);
    d.score = detail::number(arr[i], "score", c);
    if (d.score < 0.0 || d.score > 1.0) throw Error(ErrorCode::schema, c + ".score: outside [0, 1]");
    d.log_var = detail::vec3(arr[i], "log_var_m2", c);
    d.u_theta = detail::number(arr[i], "u_theta", c);
    for (double u : d.log_var) detail::check_finite(u, c + ".log_var_m2");
    detail::check_finite(d.u_theta, c + ".u_theta");
    out.push_back(d);
  }
  return out;
}

// Canonical text form: two-space indent, trailing newline. Identical inputs
// give byte-identical files.
inline std::string dump(const json& j) { return j.dump(2) + "\n"; }

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::io, "write failed for '" + path + "'");
}

inline json read_json(const std::string& path) {
  const std::string text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::schema, path + ": " + e.what());
  }
}

}  // namespace trustlens::io
