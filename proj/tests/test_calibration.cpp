#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "trustlens/calibration.hpp"
#include "trustlens/synthdet.hpp"

using namespace trustlens;
using namespace trustlens::calibration;

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

CalibrationParams with_method(ScoreMethod m, double T, double a = 1.0, double b = 0.0) {
  CalibrationParams p;
  p.method = m;
  p.T = T;
  p.a = a;
  p.b = b;
  return p;
}

}  // namespace

TEST(Logit, ClampedInverse) {
  EXPECT_NEAR(sigmoid(logit(0.73)), 0.73, 1e-15);
  EXPECT_NEAR(logit(0.0), std::log(1e-7) - std::log1p(-1e-7), 1e-9);
  EXPECT_NEAR(logit(1.0), -logit(0.0), 1e-9);
  EXPECT_EQ(sigmoid(0.0), 0.5);
  EXPECT_NEAR(sigmoid(-800.0), 0.0, 1e-300);
}

TEST(Ts, RecoversUnitTemperature) {
  const auto data = oracle::synthetic_scores(10000, 1.0, 1);
  EXPECT_NEAR(fit_ts(data), 1.0, 0.05);
}

TEST(Ts, RecoversTemperatureTwo) {
  const auto data = oracle::synthetic_scores(10000, 2.0, 2);
  EXPECT_NEAR(fit_ts(data), 2.0, 0.1);
}

TEST(Ps, SymmetricDataHasZeroBias) {
  CalibrationDataset data;
  Rng rng(3);
  for (int i = 0; i < 2000; ++i) {
    Record r;
    r.logit = rng.uniform(-4, 4);
    r.matched = rng.uniform() < sigmoid(0.7 * r.logit);
    Record mirrored = r;
    mirrored.logit = -r.logit;
    mirrored.matched = !r.matched;
    data.records.push_back(r);
    data.records.push_back(mirrored);
  }
  const auto [a, b] = fit_ps(data);
  EXPECT_NEAR(b, 0.0, 1e-6);
  EXPECT_NEAR(a, 0.7, 0.1);
}

TEST(Ps, RecoversAffineMap) {
  CalibrationDataset data;
  Rng rng(4);
  for (int i = 0; i < 20000; ++i) {
    Record r;
    r.logit = rng.uniform(-5, 5);
    r.matched = rng.uniform() < sigmoid(0.5 * r.logit - 1.0);
    data.records.push_back(r);
  }
  const auto [a, b] = fit_ps(data);
  EXPECT_NEAR(a, 0.5, 0.05);
  EXPECT_NEAR(b, -1.0, 0.1);
}

TEST(Fits, NllOrdering) {
  for (std::uint64_t seed = 10; seed < 20; ++seed) {
    Rng rng(seed);
    CalibrationDataset data;
    const double a_true = rng.uniform(0.3, 2.0), b_true = rng.uniform(-1.0, 1.0);
    for (int i = 0; i < 500; ++i) {
      Record r;
      r.logit = rng.normal(0.0, 3.0);
      r.matched = rng.uniform() < sigmoid(a_true * r.logit + b_true);
      data.records.push_back(r);
    }
    const double t = fit_ts(data);
    const auto [a, b] = fit_ps(data, t);
    const double uncal = nll(data, CalibrationParams{});
    const double ts = nll(data, with_method(ScoreMethod::temperature, t));
    const double ps = nll(data, with_method(ScoreMethod::platt, 1.0, a, b));
    EXPECT_LE(ts, uncal);
    EXPECT_LE(ps, ts);
  }
}

TEST(Fits, DegenerateLabels) {
  CalibrationDataset data;
  for (int i = 0; i < 5; ++i) data.records.push_back({0, 0.1 * i, true});
  EXPECT_EQ(code_of([&] { fit_ts(data); }), ErrorCode::degenerate_labels);
  EXPECT_EQ(code_of([&] { fit_ps(data); }), ErrorCode::degenerate_labels);
  EXPECT_EQ(code_of([] { fit_ts(CalibrationDataset{}); }), ErrorCode::empty_dataset);
}

TEST(DEce, HandExamples) {
  std::vector<double> conf(10, 0.8);
  std::vector<char> hit{1, 1, 1, 1, 1, 1, 0, 0, 0, 0};
  EXPECT_NEAR(d_ece(conf, hit, 1), 20.0, 1e-12);
  EXPECT_NEAR(d_ece(conf, hit, 10), 20.0, 1e-12);
  std::vector<double> ones(5, 1.0);
  std::vector<char> all(5, 1);
  EXPECT_EQ(d_ece(ones, all, 10), 0.0);
  // Two bins over [0.3, 1]: {0.4, 0.5} with one hit, {0.9} with none.
  const std::vector<double> c{0.4, 0.5, 0.9};
  const std::vector<char> h{1, 0, 0};
  EXPECT_NEAR(d_ece(c, h, 2), 100.0 * (2.0 / 3.0 * std::abs(0.5 - 0.45) + 1.0 / 3.0 * 0.9), 1e-12);
}

TEST(DEce, Errors) {
  EXPECT_EQ(code_of([] { d_ece(std::vector<double>{}, std::vector<char>{}, 10); }), ErrorCode::empty_dataset);
  EXPECT_EQ(code_of([] { d_ece(std::vector<double>{0.5}, std::vector<char>{1}, 0); }), ErrorCode::invalid_argument);
}

TEST(DEce, SelfConsistentIsSmall) {
  Rng rng(5);
  std::vector<double> conf;
  std::vector<char> hit;
  for (int i = 0; i < 100000; ++i) {
    conf.push_back(rng.uniform(0.3, 1.0));
    hit.push_back(rng.uniform() < conf.back() ? 1 : 0);
  }
  EXPECT_LE(d_ece(conf, hit, 10), 1.0);
}

TEST(Mca, HandCoverage) {
  // Masses 0.05 and 0.5: coverage is 0 below p = 0.05, 1/2 up to p < 0.5, 1 after.
  std::vector<double> masses{0.05, 0.5};
  double expected = 0.0;
  for (int k = 1; k <= 99; ++k) {
    const double p = k / 100.0;
    const double cov = p < 0.05 ? 0.0 : (p < 0.5 ? 0.5 : 1.0);
    expected += std::abs(cov - p);
  }
  EXPECT_NEAR(mca_from_masses(masses), 100.0 * expected / 99.0, 1e-9);
}

TEST(Mca, SelfConsistentIsSmall) {
  const auto data = oracle::synthetic_residuals(10000, {1.0, 1.0, 1.0}, 1.0, 6);
  const CalibrationParams identity;
  EXPECT_LE(mca_xyz(data, identity), 0.5);
  EXPECT_LE(mca_theta(data, identity), 0.5);
}

TEST(Mca, TooFewMatched) {
  auto data = oracle::synthetic_residuals(9, {1.0, 1.0, 1.0}, 1.0, 7);
  EXPECT_EQ(code_of([&] { mca_xyz(data, CalibrationParams{}); }), ErrorCode::empty_dataset);
}

TEST(RegTemps, SelfConsistentNearOne) {
  const auto data = oracle::synthetic_residuals(10000, {1.0, 1.0, 1.0}, 1.0, 8);
  const auto t = fit_reg_temperatures(data);
  for (double v : t.t_sigma) EXPECT_NEAR(v, 1.0, 0.1);
  EXPECT_NEAR(t.t_kappa, 1.0, 0.1);
}

TEST(RegTemps, DoubledSigmaGivesTwo) {
  const auto data = oracle::synthetic_residuals(10000, {2.0, 2.0, 2.0}, 0.5, 9);
  const auto t = fit_reg_temperatures(data);
  for (double v : t.t_sigma) EXPECT_NEAR(v, 2.0, 0.1);
  EXPECT_NEAR(t.t_kappa, 2.0, 0.2);
  CalibrationParams p;
  p.t_sigma = t.t_sigma;
  p.t_kappa = t.t_kappa;
  EXPECT_LE(mca_xyz(data, p), 1.0);
  EXPECT_LT(mca_xyz(data, p), mca_xyz(data, CalibrationParams{}));
}

TEST(RegTemps, HalvedSigmaGivesHalf) {
  const auto data = oracle::synthetic_residuals(10000, {0.5, 1.0, 1.0}, 1.0, 10);
  const auto t = fit_reg_temperatures(data);
  EXPECT_NEAR(t.t_sigma[0], 0.5, 0.1);
  EXPECT_NEAR(t.t_sigma[1], 1.0, 0.1);
}

TEST(RegTemps, NeverWorseThanIdentity) {
  for (std::uint64_t seed = 20; seed < 25; ++seed) {
    Rng rng(seed);
    const Vec3 scale{rng.uniform(0.3, 3.0), rng.uniform(0.3, 3.0), rng.uniform(0.3, 3.0)};
    const auto data = oracle::synthetic_residuals(300, scale, rng.uniform(0.3, 3.0), seed);
    const auto recs = matched_records(data);
    const auto t = fit_reg_temperatures(data);
    for (int k = 0; k < 3; ++k) EXPECT_LE(mca_axis(recs, k, t.t_sigma[k]), mca_axis(recs, k, 1.0));
    EXPECT_LE(mca_heading(recs, t.t_kappa), mca_heading(recs, 1.0));
  }
}

TEST(Apply, Identities) {
  Rng rng(11);
  std::vector<UncertainDetection> dets(20);
  for (auto& d : dets) {
    d.score = rng.uniform(0.01, 0.99);
    d.log_var = {rng.normal(), rng.normal(), rng.normal()};
    d.u_theta = rng.normal();
  }
  const auto ts = calibration::apply(with_method(ScoreMethod::temperature, 1.0), dets);
  const auto ps = calibration::apply(with_method(ScoreMethod::platt, 1.0, 1.0, 0.0), dets);
  for (std::size_t i = 0; i < dets.size(); ++i) {
    EXPECT_NEAR(ts[i].score, dets[i].score, 1e-12);
    EXPECT_NEAR(ps[i].score, dets[i].score, 1e-12);
    EXPECT_EQ(ts[i].log_var, dets[i].log_var);
  }
  std::vector<UncertainDetection> half(1);
  half[0].score = 0.5;
  for (double T : {0.1, 1.0, 7.0}) EXPECT_NEAR(calibration::apply(with_method(ScoreMethod::temperature, T), half)[0].score, 0.5, 1e-9);

  CalibrationParams reg;
  reg.t_sigma = {2.0, 1.0, 0.5};
  reg.t_kappa = 3.0;
  const auto r = calibration::apply(reg, dets);
  for (std::size_t i = 0; i < dets.size(); ++i) {
    EXPECT_EQ(r[i].score, dets[i].score);
    EXPECT_NEAR(std::exp(0.5 * r[i].log_var[0]), std::exp(0.5 * dets[i].log_var[0]) / 2.0, 1e-12);
    EXPECT_NEAR(std::exp(0.5 * r[i].log_var[2]), std::exp(0.5 * dets[i].log_var[2]) * 2.0, 1e-12);
    EXPECT_NEAR(r[i].kappa(), 3.0 * dets[i].kappa(), 1e-9 * r[i].kappa());
    EXPECT_EQ(r[i].box, dets[i].box);
  }
  EXPECT_EQ(code_of([&] { calibration::apply(with_method(ScoreMethod::temperature, 0.0), dets); }), ErrorCode::invalid_argument);
  EXPECT_EQ(code_of([&] { calibration::apply(with_method(ScoreMethod::platt, 1.0, -1.0, 0.0), dets); }),
            ErrorCode::invalid_argument);
}

TEST(Apply, RankInvariance) {
  const synthdet::Detector det{synthdet::DetectorConfig{}};
  std::vector<Scene> scenes;
  std::vector<std::vector<UncertainDetection>> outputs;
  for (std::uint64_t s = 0; s < 4; ++s) {
    scenes.push_back(synthdet::generate_scene(500 + s));
    outputs.push_back(synthdet::postprocess(det.run(synthdet::generate_tokens(scenes.back(), TokenLayout{}, 0.02)).detections));
  }
  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    CalibrationParams p;
    p.method = trial % 2 ? ScoreMethod::platt : ScoreMethod::temperature;
    p.T = std::exp(rng.uniform(std::log(0.25), std::log(4.0)));
    p.a = std::exp(rng.uniform(std::log(0.25), std::log(4.0)));
    p.b = rng.uniform(-2.0, 2.0);
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      const auto before = metrics::dqs_breakdown(synthdet::plain(outputs[i]), scenes[i].objects);
      const auto after = metrics::dqs_breakdown(synthdet::plain(calibration::apply(p, outputs[i])), scenes[i].objects);
      EXPECT_EQ(before.dqs, after.dqs);
      EXPECT_EQ(before.map, after.map);
    }
  }
}

TEST(Dataset, ThresholdMatchAndSplit) {
  std::vector<Box> gts(2);
  gts[0].center = {0, 0, 0};
  gts[1].center = {20, 0, 0};
  gts[1].yaw = 3.0;
  std::vector<UncertainDetection> dets(3);
  dets[0].score = 0.9;
  dets[0].box.center = {0.5, 0, 0.1};
  dets[1].score = 0.2;  // below tau
  dets[2].score = 0.6;
  dets[2].box.center = {20, 1, 0};
  dets[2].box.yaw = -3.0;
  CalibrationDataset data;
  for (int s = 0; s < 10; ++s) add_scene(data, dets, gts);
  EXPECT_EQ(data.scenes, 10u);
  ASSERT_EQ(data.records.size(), 20u);
  EXPECT_TRUE(data.records[0].matched);
  EXPECT_NEAR(data.records[0].residual[0], 0.5, 1e-12);
  EXPECT_NEAR(data.records[0].logit, logit(0.9), 1e-12);
  EXPECT_NEAR(data.records[1].theta_residual, 2 * std::numbers::pi - 6.0, 1e-12);
  const auto [cal, eval] = split(data);
  EXPECT_EQ(cal.scenes, 3u);
  EXPECT_EQ(eval.scenes, 7u);
  EXPECT_EQ(cal.records.size(), 6u);
  EXPECT_EQ(eval.records.front().scene, 0u);
  const auto [c2, e2] = split(data);
  EXPECT_EQ(c2.records.size(), cal.records.size());
}

TEST(Json, ParamsRoundTrip) {
  CalibrationParams p = with_method(ScoreMethod::platt, 1.0, 0.75, -0.25);
  p.t_sigma = {1.5, 0.5, 2.0};
  p.t_kappa = 0.8;
  const auto q = params_from_json(nlohmann::json::parse(params_to_json(p).dump()));
  EXPECT_EQ(q.method, p.method);
  EXPECT_EQ(q.a, p.a);
  EXPECT_EQ(q.b, p.b);
  EXPECT_EQ(q.t_sigma, p.t_sigma);
  EXPECT_EQ(q.t_kappa, p.t_kappa);
  auto j = params_to_json(with_method(ScoreMethod::temperature, 1.7));
  EXPECT_EQ(params_from_json(j).T, 1.7);
  j["T"] = -1.0;
  EXPECT_EQ(code_of([&] { params_from_json(j); }), ErrorCode::schema);
  j.erase("T");
  EXPECT_EQ(code_of([&] { params_from_json(j); }), ErrorCode::schema);
}
