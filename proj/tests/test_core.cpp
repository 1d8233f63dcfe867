#include <cmath>
#include <numbers>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "trustlens/core.hpp"
#include "trustlens/rng.hpp"

using namespace trustlens;

TEST(Layout, TokenCounts) {
  const TokenLayout desk;
  EXPECT_EQ(desk.lidar_tokens(), 1024u);
  EXPECT_EQ(desk.camera_tokens(), 288u);
  EXPECT_EQ(desk.total_tokens(), 1312u);

  const auto big = TokenLayout::paper_scale();
  EXPECT_EQ(big.lidar_tokens(), 32400u);
  EXPECT_EQ(big.camera_tokens(), 24000u);
  EXPECT_EQ(big.total_tokens(), 56400u);
}

TEST(Layout, FirstTokens) {
  const auto big = TokenLayout::paper_scale();
  EXPECT_EQ(token_index(big, kLidar, 0, 0), 0u);
  EXPECT_EQ(token_index(big, camera_sensor(0), 0, 0), 32400u);
  EXPECT_EQ(token_index(big, camera_sensor(1), 0, 0), 32400u + 4000u);
  EXPECT_EQ(token_index(big, camera_sensor(5), 39, 99), 56399u);
  EXPECT_EQ(token_index(big, kLidar, 179, 179), 32399u);
}

TEST(Layout, RandomRoundTrip) {
  const auto big = TokenLayout::paper_scale();
  Rng rng(17);
  for (int i = 0; i < 1000; ++i) {
    const std::size_t s = rng.below(big.total_tokens());
    const TokenRef r = token_ref(big, s);
    EXPECT_EQ(token_index(big, r.sensor, r.row, r.col), s);
  }
}

TEST(Layout, ExhaustiveBijection) {
  const TokenLayout desk;
  std::set<std::size_t> seen;
  for (SensorId sensor = 0; sensor <= static_cast<SensorId>(desk.num_cams); ++sensor) {
    const std::size_t rows = sensor == kLidar ? desk.grid_x : desk.cam_h;
    const std::size_t cols = sensor == kLidar ? desk.grid_y : desk.cam_w;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) {
        const std::size_t s = token_index(desk, sensor, r, c);
        EXPECT_TRUE(seen.insert(s).second);
        EXPECT_EQ(token_ref(desk, s), (TokenRef{sensor, r, c}));
        const auto [first, last] = desk.sensor_range(sensor);
        EXPECT_TRUE(s >= first && s < last);
      }
  }
  EXPECT_EQ(seen.size(), desk.total_tokens());
  EXPECT_EQ(*seen.rbegin(), desk.total_tokens() - 1);
}

TEST(Layout, OutOfRangeRejected) {
  const TokenLayout desk;
  auto code_of = [](auto&& f) {
    try {
      f();
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::numeric;
  };
  EXPECT_EQ(code_of([&] { token_index(desk, kLidar, 32, 0); }), ErrorCode::out_of_range);
  EXPECT_EQ(code_of([&] { token_index(desk, kLidar, 0, 32); }), ErrorCode::out_of_range);
  EXPECT_EQ(code_of([&] { token_index(desk, camera_sensor(6), 0, 0); }), ErrorCode::out_of_range);
  EXPECT_EQ(code_of([&] { token_index(desk, camera_sensor(0), 4, 0); }), ErrorCode::out_of_range);
  EXPECT_EQ(code_of([&] { token_index(desk, -1, 0, 0); }), ErrorCode::out_of_range);
  EXPECT_EQ(code_of([&] { token_ref(desk, 1312); }), ErrorCode::out_of_range);
  try {
    token_index(desk, kLidar, 40, 3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("(40, 3)"), std::string::npos);
  }
}

TEST(Layout, CellCenters) {
  const TokenLayout desk;
  const auto c0 = desk.cell_center(0, 0);
  EXPECT_DOUBLE_EQ(c0[0], -25.6 + 0.8);
  EXPECT_DOUBLE_EQ(c0[1], -25.6 + 0.8);
  const auto c1 = desk.cell_center(16, 15);
  EXPECT_NEAR(c1[0], 0.8, 1e-12);
  EXPECT_NEAR(c1[1], -0.8, 1e-12);
}

TEST(WrapAngle, Range) {
  const double pi = std::numbers::pi;
  EXPECT_DOUBLE_EQ(wrap_angle(0.0), 0.0);
  EXPECT_DOUBLE_EQ(wrap_angle(pi), pi);
  EXPECT_DOUBLE_EQ(wrap_angle(-pi), pi);
  EXPECT_NEAR(wrap_angle(3 * pi), pi, 1e-12);
  EXPECT_NEAR(wrap_angle(2 * pi + 0.5), 0.5, 1e-12);
  EXPECT_NEAR(wrap_angle(-2 * pi - 0.5), -0.5, 1e-12);
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const double a = rng.uniform(-50.0, 50.0);
    const double w = wrap_angle(a);
    EXPECT_GT(w, -pi);
    EXPECT_LE(w, pi);
    EXPECT_NEAR(std::remainder(a - w, 2 * pi), 0.0, 1e-9);
  }
}

TEST(Rng, SplitmixReferenceVector) {
  std::uint64_t state = 0;
  EXPECT_EQ(splitmix64(state), 0xe220a8397b1dcdafULL);
  EXPECT_EQ(splitmix64(state), 0x6e789e6aa1b965f4ULL);
  EXPECT_EQ(splitmix64(state), 0x06c45d188009454fULL);
}

TEST(Rng, XoshiroReferenceVector) {
  oracle::Xoshiro x{{1, 2, 3, 4}};
  EXPECT_EQ(x.next(), 11520u);
  EXPECT_EQ(x.next(), 0u);
  EXPECT_EQ(x.next(), 1509978240u);
  EXPECT_EQ(x.next(), 1215971899390074240u);
}

TEST(Rng, MatchesReferenceSeeding) {
  for (std::uint64_t seed : {0ULL, 1ULL, 42ULL, 0xdeadbeefULL}) {
    std::uint64_t sm = seed;
    oracle::Xoshiro x{};
    for (auto& w : x.s) w = splitmix64(sm);
    Rng rng(seed);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(rng.next(), x.next());
  }
}

TEST(Rng, DeterministicAndDistinct) {
  Rng a(99), b(99), c(100);
  bool differs = false;
  for (int i = 0; i < 50; ++i) {
    const auto va = a.next();
    EXPECT_EQ(va, b.next());
    differs |= va != c.next();
  }
  EXPECT_TRUE(differs);
  EXPECT_NE(derive_seed(5, 1), derive_seed(5, 2));
  EXPECT_EQ(derive_seed(5, 1), derive_seed(5, 1));
}

TEST(Rng, UniformAndBelow) {
  Rng rng(11);
  double sum = 0.0;
  std::vector<int> counts(7, 0);
  constexpr int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
    ++counts[rng.below(7)];
  }
  EXPECT_NEAR(sum / n, 0.5, 0.005);
  for (int c : counts) EXPECT_NEAR(static_cast<double>(c) / n, 1.0 / 7.0, 0.005);
}

TEST(Rng, NormalMoments) {
  Rng rng(12);
  double s1 = 0.0, s2 = 0.0;
  constexpr int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal(1.0, 2.0);
    s1 += z;
    s2 += z * z;
  }
  const double mean = s1 / n;
  EXPECT_NEAR(mean, 1.0, 0.02);
  EXPECT_NEAR(s2 / n - mean * mean, 4.0, 0.05);
}

TEST(Rng, ShuffleIsPermutation) {
  std::vector<int> v(100);
  for (int i = 0; i < 100; ++i) v[i] = i;
  auto w = v;
  Rng rng(5);
  rng.shuffle(std::span<int>(w));
  EXPECT_NE(v, w);
  auto sorted = w;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(sorted, v);
  auto w2 = v;
  Rng rng2(5);
  rng2.shuffle(std::span<int>(w2));
  EXPECT_EQ(w, w2);
}

TEST(AttentionStack, Validate) {
  AttentionStack a(2, 2, 3, 4);
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t q = 0; q < 3; ++q)
        for (auto& v : a.row(l, h, q)) v = 0.25f;
  EXPECT_NO_THROW(a.validate());
  EXPECT_EQ(a.at(1, 1, 2, 3), 0.25f);

  auto neg = a;
  neg.row(0, 0, 0)[0] = -0.25f;
  neg.row(0, 0, 0)[1] = 0.75f;
  EXPECT_THROW(neg.validate(), Error);

  auto off = a;
  off.row(1, 0, 2)[0] = 0.3f;
  EXPECT_THROW(off.validate(), Error);

  auto nan = a;
  nan.row(0, 1, 1)[2] = std::nanf("");
  try {
    nan.validate();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::nan_payload);
  }

  auto shape = a;
  shape.values.pop_back();
  try {
    shape.validate();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::dimension_mismatch);
  }
}

TEST(Box, Validation) {
  Box b;
  EXPECT_NO_THROW(validate_box(b, "b"));
  b.size[1] = 0.0;
  EXPECT_THROW(validate_box(b, "b"), Error);
  b.size[1] = 1.0;
  b.yaw = -std::numbers::pi;
  EXPECT_THROW(validate_box(b, "b"), Error);
  b.yaw = std::numbers::pi;
  EXPECT_NO_THROW(validate_box(b, "b"));
  b.center[2] = std::nan("");
  EXPECT_THROW(validate_box(b, "b"), Error);
}

TEST(Scene, CentersInsideExtent) {
  Scene s;
  s.extent = 10.0;
  Box b;
  b.center = {4.9, -4.9, 0.0};
  s.objects.push_back(b);
  EXPECT_NO_THROW(s.validate());
  s.objects[0].center[0] = 5.1;
  EXPECT_THROW(s.validate(), Error);
}

TEST(UncertainDetection, Kappa) {
  UncertainDetection d;
  d.u_theta = -std::log(8.0);
  EXPECT_NEAR(d.kappa(), 8.0, 1e-12);
}
