#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "trustlens/faithfulness.hpp"

using namespace trustlens;
using namespace trustlens::faithfulness;

namespace {

ErrorCode code_of(auto&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::numeric;
}

const std::vector<Unit> kBoth{Unit::bev_cell, Unit::camera_token};

synthdet::TokenField field(std::uint64_t seed) {
  return synthdet::generate_tokens(synthdet::generate_scene(seed), TokenLayout{}, 0.02);
}

PerturbationSpec short_spec(Direction d) {
  PerturbationSpec spec;
  spec.direction = d;
  spec.rho_grid = {0, 10, 50, 100};
  spec.random_repeats = 2;
  spec.seed = 9;
  return spec;
}

}  // namespace

TEST(MaskedCount, CeilingArithmetic) {
  EXPECT_EQ(masked_count(10, 50), 5u);
  EXPECT_EQ(masked_count(10, 0), 0u);
  EXPECT_EQ(masked_count(10, 1), 1u);
  EXPECT_EQ(masked_count(10, 100), 10u);
  EXPECT_EQ(masked_count(1024, 10), 103u);
  EXPECT_EQ(masked_count(48, 30), 15u);
  EXPECT_EQ(masked_count(100, 70), 70u);
  for (std::size_t n : {7u, 48u, 1024u})
    for (int r = 0; r <= 100; r += 10) EXPECT_EQ(masked_count(n, r), (n * static_cast<std::size_t>(r) + 99) / 100);
}

TEST(Auc, Constants) {
  const auto grid = default_rho_grid();
  EXPECT_NEAR(auc(grid, std::vector<double>(grid.size(), 0.7)), 70.0, 1e-12);
  EXPECT_EQ(auc(grid, std::vector<double>(grid.size(), 0.0)), 0.0);
  EXPECT_NEAR(auc(grid, std::vector<double>(grid.size(), 1.0)), 100.0, 1e-12);
}

TEST(Auc, TrapezoidAndFlatTail) {
  const std::vector<double> rho{0, 50, 100}, line{1.0, 0.5, 0.0};
  EXPECT_NEAR(auc(rho, line), 50.0, 1e-12);
  const std::vector<double> short_rho{0, 50}, short_dqs{1.0, 0.5};
  EXPECT_NEAR(auc(short_rho, short_dqs), 37.5 + 25.0, 1e-12);
  EXPECT_EQ(code_of([&] { auc(rho, short_dqs); }), ErrorCode::invalid_argument);
}

TEST(PerturbationSpec, Validation) {
  PerturbationSpec spec;
  EXPECT_NO_THROW(spec.validate());
  spec.rho_grid = {10, 20};
  EXPECT_EQ(code_of([&] { spec.validate(); }), ErrorCode::invalid_argument);
  spec.rho_grid = {0, 20, 20};
  EXPECT_EQ(code_of([&] { spec.validate(); }), ErrorCode::invalid_argument);
  spec.rho_grid = {0, 120};
  EXPECT_EQ(code_of([&] { spec.validate(); }), ErrorCode::invalid_argument);
  spec = {};
  spec.units.clear();
  EXPECT_EQ(code_of([&] { spec.validate(); }), ErrorCode::invalid_argument);
  EXPECT_EQ(method_from_string("last"), Method::last_layer);
  EXPECT_EQ(method_from_string("random"), Method::random);
}

TEST(Ranking, OrdersWithinUnitGroups) {
  const TokenLayout layout{2, 2, 1.0, 2, 1, 2};
  const std::vector<double> imp{0.1, 0.4, 0.3, 0.2, 0.5, 0.9, 0.7, 0.6};
  const auto down = ranking_from_saliency(layout, imp, true);
  EXPECT_EQ(down.bev, (std::vector<std::size_t>{1, 2, 3, 0}));
  EXPECT_EQ(down.cams[0], (std::vector<std::size_t>{5, 4}));
  EXPECT_EQ(down.cams[1], (std::vector<std::size_t>{6, 7}));
  const auto up = ranking_from_saliency(layout, imp, false);
  EXPECT_EQ(up.bev, (std::vector<std::size_t>{0, 3, 2, 1}));
  EXPECT_EQ(up.cams[1], (std::vector<std::size_t>{7, 6}));
}

TEST(Ranking, RandomIsPermutationPerGroup) {
  const TokenLayout layout;
  const auto r = random_ranking(layout, 5);
  std::set<std::size_t> bev(r.bev.begin(), r.bev.end());
  EXPECT_EQ(bev.size(), layout.lidar_tokens());
  EXPECT_EQ(*bev.rbegin(), layout.lidar_tokens() - 1);
  for (std::size_t c = 0; c < layout.num_cams; ++c) {
    const auto [lo, hi] = layout.sensor_range(camera_sensor(static_cast<int>(c)));
    std::set<std::size_t> cam(r.cams[c].begin(), r.cams[c].end());
    EXPECT_EQ(cam.size(), hi - lo);
    EXPECT_EQ(*cam.begin(), lo);
    EXPECT_EQ(*cam.rbegin(), hi - 1);
  }
  EXPECT_EQ(random_ranking(layout, 5).bev, r.bev);
  EXPECT_NE(random_ranking(layout, 6).bev, r.bev);
}

TEST(Mask, ZeroIsIdentity) {
  const auto f = field(1);
  const auto m = mask_tokens(f, random_ranking(f.layout, 1), 0.0, kBoth);
  EXPECT_EQ(m.features, f.features);
  EXPECT_EQ(m.position, f.position);
}

TEST(Mask, HundredSuppressesEverything) {
  const auto f = field(2);
  const auto m = mask_tokens(f, random_ranking(f.layout, 2), 100.0, kBoth);
  for (std::size_t s = 0; s < f.layout.lidar_tokens(); ++s)
    for (float v : m.feature(s)) ASSERT_EQ(v, 0.0f);
  for (std::size_t c = 0; c < f.layout.num_cams; ++c) {
    const auto [lo, hi] = f.layout.sensor_range(camera_sensor(static_cast<int>(c)));
    for (std::size_t ch = 0; ch < synthdet::kFeatureChannels; ++ch) {
      double mean = 0.0;
      for (std::size_t s = lo; s < hi; ++s) mean += f.feature(s)[ch];
      mean /= static_cast<double>(hi - lo);
      for (std::size_t s = lo; s < hi; ++s) ASSERT_EQ(m.feature(s)[ch], static_cast<float>(mean));
    }
  }
  EXPECT_EQ(m.position, f.position);
}

TEST(Mask, HalfOfTenUnits) {
  const TokenLayout layout{2, 5, 1.0, 0, 1, 1};
  Scene s;
  synthdet::TokenField f = synthdet::generate_tokens(s, layout, 0.0);
  for (auto& v : f.features) v = 1.0f;
  const auto r = random_ranking(layout, 3);
  const std::vector<Unit> bev{Unit::bev_cell};
  const auto m = mask_tokens(f, r, 50.0, bev);
  int zeroed = 0;
  for (std::size_t s = 0; s < 10; ++s) zeroed += m.occupancy(s) == 0.0f;
  EXPECT_EQ(zeroed, 5);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(m.occupancy(r.bev[i]), 0.0f);
}

TEST(Mask, UnitSelectionRespected) {
  const auto f = field(4);
  const auto r = random_ranking(f.layout, 4);
  const std::vector<Unit> cams{Unit::camera_token};
  const auto m = mask_tokens(f, r, 100.0, cams);
  for (std::size_t s = 0; s < f.layout.lidar_tokens(); ++s)
    for (std::size_t ch = 0; ch < synthdet::kFeatureChannels; ++ch) ASSERT_EQ(m.feature(s)[ch], f.feature(s)[ch]);
  EXPECT_EQ(code_of([&] { mask_tokens(f, r, 101.0, kBoth); }), ErrorCode::invalid_argument);
}

TEST(Curve, EndpointsOnOneScene) {
  const Scene scene = synthdet::generate_scene(1000);
  const synthdet::Detector det{synthdet::DetectorConfig{}};
  const SceneRun run(scene, det, SelectionConfig{}, EvalOptions{});
  const auto pos = run.curve(Method::mean, short_spec(Direction::positive));
  ASSERT_EQ(pos.dqs.size(), 4u);
  EXPECT_EQ(pos.dqs[0], run.clean_dqs());
  EXPECT_LE(pos.dqs.back(), 0.05);
  EXPECT_GE(pos.dqs.front(), pos.dqs.back());
  EXPECT_FALSE(pos.degenerate);
  EXPECT_EQ(pos.auc, auc(pos.rho, pos.dqs));
  EXPECT_GE(pos.auc, 0.0);
  EXPECT_LE(pos.auc, 100.0);
  const auto neg = run.curve(Method::mean, short_spec(Direction::negative));
  EXPECT_EQ(neg.dqs[0], run.clean_dqs());
  EXPECT_GT(neg.auc, pos.auc);
}

TEST(Curve, RandomBaselineStartsAtCleanScore) {
  const synthdet::Detector det{synthdet::DetectorConfig{}};
  for (std::uint64_t seed : {1004, 1011, 1017}) {
    const Scene scene = synthdet::generate_scene(seed);
    const SceneRun run(scene, det, SelectionConfig{}, EvalOptions{});
    auto spec = short_spec(Direction::positive);
    spec.random_repeats = 5;
    const auto rnd = run.curve(Method::random, spec);
    EXPECT_EQ(rnd.dqs.front(), run.clean_dqs()) << seed;
    EXPECT_EQ(rnd.dqs.back(), 0.0) << seed;
  }
}

TEST(Curve, RunCurveMatchesSceneRun) {
  const Scene scene = synthdet::generate_scene(1001);
  const synthdet::DetectorConfig cfg;
  const auto spec = short_spec(Direction::positive);
  const auto a = run_curve(scene, cfg, SelectionConfig{}, Method::max, spec);
  const synthdet::Detector det{cfg};
  const auto b = SceneRun(scene, det, SelectionConfig{}, EvalOptions{}).curve(Method::max, spec);
  EXPECT_EQ(a.dqs, b.dqs);
  EXPECT_EQ(a.auc, b.auc);
}

TEST(Curve, RandomBaselineDeterministic) {
  const Scene scene = synthdet::generate_scene(1002);
  const synthdet::DetectorConfig cfg;
  const auto a = run_curve(scene, cfg, SelectionConfig{}, Method::random, short_spec(Direction::positive));
  const auto b = run_curve(scene, cfg, SelectionConfig{}, Method::random, short_spec(Direction::positive));
  EXPECT_EQ(a.dqs, b.dqs);
  auto other = short_spec(Direction::positive);
  other.seed = 10;
  EXPECT_NE(run_curve(scene, cfg, SelectionConfig{}, Method::random, other).dqs, a.dqs);
}

TEST(Curve, NoValidQueryDegenerates) {
  const Scene scene = synthdet::generate_scene(1003);
  const synthdet::Detector det{synthdet::DetectorConfig{}};
  const SceneRun run(scene, det, SelectionConfig{32, 1.0}, EvalOptions{});
  const auto r = run.curve(Method::mean, short_spec(Direction::positive));
  EXPECT_TRUE(r.degenerate);
  for (double v : r.dqs) EXPECT_EQ(v, run.clean_dqs());
  EXPECT_NEAR(r.auc, 100.0 * run.clean_dqs(), 1e-9);
}

TEST(Compare, SingleSceneMatchesRunCurve) {
  const std::vector<Scene> scenes{synthdet::generate_scene(1004)};
  CompareOptions opts;
  opts.methods = {Method::mean};
  opts.spec = short_spec(Direction::positive);
  const synthdet::DetectorConfig cfg;
  const auto cmp = compare_methods(scenes, cfg, SelectionConfig{}, opts);
  ASSERT_EQ(cmp.table.size(), 1u);
  ASSERT_EQ(cmp.mean_curves.size(), 2u);
  const auto pos = run_curve(scenes[0], cfg, SelectionConfig{}, Method::mean, short_spec(Direction::positive));
  const auto neg = run_curve(scenes[0], cfg, SelectionConfig{}, Method::mean, short_spec(Direction::negative));
  EXPECT_EQ(cmp.table[0].pos_auc, pos.auc);
  EXPECT_EQ(cmp.table[0].neg_auc, neg.auc);
  EXPECT_EQ(cmp.mean_curves[0].dqs, pos.dqs);
  EXPECT_EQ(cmp.mean_curves[1].direction, Direction::negative);
}

TEST(Compare, ThreadCountDoesNotChangeResults) {
  std::vector<Scene> scenes;
  for (std::uint64_t s = 0; s < 3; ++s) scenes.push_back(synthdet::generate_scene(1010 + s));
  CompareOptions opts;
  opts.spec = short_spec(Direction::positive);
  opts.spec.rho_grid = {0, 50, 100};
  const synthdet::DetectorConfig cfg;
  const auto serial = compare_methods(scenes, cfg, SelectionConfig{}, opts);
  opts.jobs = 3;
  const auto threaded = compare_methods(scenes, cfg, SelectionConfig{}, opts);
  EXPECT_EQ(curve_csv(serial), curve_csv(threaded));
  EXPECT_EQ(summary_json(serial, 3).dump(), summary_json(threaded, 3).dump());
  ASSERT_EQ(serial.table.size(), 4u);
  EXPECT_EQ(serial.mean_curves.size(), 8u);
  for (std::size_t i = 1; i < serial.table.size(); ++i)
    EXPECT_LE(serial.table[i - 1].pos_auc - serial.table[i - 1].neg_auc,
              serial.table[i].pos_auc - serial.table[i].neg_auc);
  const auto csv = curve_csv(serial);
  EXPECT_EQ(csv.rfind("method,direction,rho,dqs\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 8 * 3);
  const auto j = summary_json(serial, 3);
  for (const char* m : {"mean", "max", "last_layer", "random"}) {
    EXPECT_TRUE(j["methods"].contains(m));
    EXPECT_TRUE(j["methods"][m].contains("pos_auc"));
  }
}

TEST(Compare, EmptyInputsRejected) {
  EXPECT_EQ(code_of([] { compare_methods({}, synthdet::DetectorConfig{}, SelectionConfig{}, CompareOptions{}); }),
            ErrorCode::invalid_argument);
}
