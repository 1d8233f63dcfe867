#include <string>

#include <gtest/gtest.h>

#include "cli_runner.hpp"
#include "trustlens/io.hpp"

using cli::run;
using cli::slurp;
using nlohmann::json;

namespace {

class Cli : public ::testing::Test {
 protected:
  void SetUp() override { dir = cli::scratch_dir(::testing::UnitTest::GetInstance()->current_test_info()->name()); }
  void TearDown() override {
    if (!HasFailure()) std::filesystem::remove_all(dir);
  }
  std::filesystem::path dir;
};

}  // namespace

TEST_F(Cli, GenSceneIsByteIdentical) {
  ASSERT_EQ(run(dir, "gen-scene --seed 7 -o a.json"), 0);
  ASSERT_EQ(run(dir, "gen-scene --seed 7 -o b.json"), 0);
  ASSERT_EQ(run(dir, "gen-scene --seed 8 -o c.json"), 0);
  EXPECT_EQ(slurp(dir / "a.json"), slurp(dir / "b.json"));
  EXPECT_NE(slurp(dir / "a.json"), slurp(dir / "c.json"));
  const auto j = json::parse(slurp(dir / "a.json"));
  EXPECT_EQ(j["objects"].size(), 6u);
}

TEST_F(Cli, DetectSaliencyContributionPipeline) {
  ASSERT_EQ(run(dir, "gen-scene --seed 3 -o scene.json"), 0);
  for (const char* tag : {"1", "2"}) {
    const std::string t = tag;
    ASSERT_EQ(run(dir, "detect --scene scene.json -o det" + t + ".json --attn a" + t + ".attn --layout-out layout.json"), 0);
    ASSERT_EQ(run(dir, "saliency --attn a" + t + ".attn --layout layout.json -o sal" + t + ".json --grid-dir grids" + t), 0);
    ASSERT_EQ(run(dir, "contribution --attn a" + t + ".attn -o con" + t + ".json"), 0);
  }
  EXPECT_EQ(slurp(dir / "det1.json"), slurp(dir / "det2.json"));
  EXPECT_EQ(slurp(dir / "a1.attn"), slurp(dir / "a2.attn"));
  EXPECT_EQ(slurp(dir / "sal1.json"), slurp(dir / "sal2.json"));
  EXPECT_EQ(slurp(dir / "con1.json"), slurp(dir / "con2.json"));
  EXPECT_EQ(slurp(dir / "grids1" / "bev.pgm"), slurp(dir / "grids2" / "bev.pgm"));
  EXPECT_TRUE(std::filesystem::exists(dir / "grids1" / "camera_5.csv"));
  const auto attn = trustlens::io::deserialize_attention(slurp(dir / "a1.attn"));
  EXPECT_EQ(attn.tokens, 1312u);
  EXPECT_NO_THROW(attn.validate());
  const auto con = json::parse(slurp(dir / "con1.json"));
  double total = 0.0;
  for (const auto& s : con["sensors"]) total += s["contribution"].get<double>();
  EXPECT_NEAR(total, 1.0, 1e-9);
}

TEST_F(Cli, MaskedLidarContributesNothing) {
  ASSERT_EQ(run(dir, "gen-scene --seed 4 -o scene.json"), 0);
  ASSERT_EQ(run(dir, "detect --scene scene.json --mask lidar --attn m.attn -o d.json"), 0);
  ASSERT_EQ(run(dir, "contribution --attn m.attn --tau 0 -o con.json"), 0);
  const auto j = json::parse(slurp(dir / "con.json"));
  EXPECT_EQ(j["sensors"][0]["sensor"], "lidar");
  EXPECT_EQ(j["sensors"][0]["contribution"].get<double>(), 0.0);
}

TEST_F(Cli, FaithfulnessDeterministicAcrossJobs) {
  const std::string base = "faithfulness --num-scenes 2 --seed 50 --rho 0,50,100 --repeats 1 ";
  ASSERT_EQ(run(dir, base + "--out-dir r1"), 0);
  ASSERT_EQ(run(dir, base + "--out-dir r2 --jobs 2"), 0);
  EXPECT_EQ(slurp(dir / "r1" / "curve.csv"), slurp(dir / "r2" / "curve.csv"));
  EXPECT_EQ(slurp(dir / "r1" / "summary.json"), slurp(dir / "r2" / "summary.json"));
  const auto j = json::parse(slurp(dir / "r1" / "summary.json"));
  EXPECT_EQ(j["methods"].size(), 4u);
}

TEST_F(Cli, RobustnessBaselineRowIsZero) {
  trustlens::io::write_file((dir / "rob.csv").string(),
                            "model,corruption,severity,score\n"
                            "base,fog,1,0.4\nbase,fog,2,0.3\nbase,fog,3,0.3\n"
                            "ours,fog,1,0.5\nours,fog,2,0.4\nours,fog,3,0.3\n");
  ASSERT_EQ(run(dir, "robustness --input rob.csv --baseline base -o rra.csv"), 0);
  EXPECT_EQ(slurp(dir / "rra.csv"), "model,fog,mrra\nbase,0.000,0.000\nours,20.000,20.000\n");
  EXPECT_EQ(run(dir, "robustness --input rob.csv --baseline nobody -o x.csv"), 2);
  trustlens::io::write_file((dir / "short.csv").string(), "model,corruption,severity,score\nbase,fog,1,0.4\n");
  EXPECT_EQ(run(dir, "robustness --input short.csv --baseline base -o y.csv"), 3);
}

TEST_F(Cli, CalibrationRoundTrip) {
  for (const char* m : {"ts", "ps"}) {
    const std::string method = m;
    ASSERT_EQ(run(dir, "calibrate --synthetic 10 --seed 300 --method " + method + " -o cal_" + method + ".json"), 0);
    ASSERT_EQ(run(dir, "eval-calibration --synthetic 10 --seed 300 --params cal_" + method + ".json -o rep_" + method +
                           ".json"),
              0);
    const auto rep = json::parse(slurp(dir / ("rep_" + method + ".json")));
    EXPECT_EQ(rep["accuracy"]["map_before"], rep["accuracy"]["map_after"]);
    EXPECT_EQ(rep["accuracy"]["dqs_before"], rep["accuracy"]["dqs_after"]);
    EXPECT_EQ(rep["method"], method);
  }
  ASSERT_EQ(run(dir, "calibrate --synthetic 10 --seed 300 --method ts -o again.json"), 0);
  EXPECT_EQ(slurp(dir / "again.json"), slurp(dir / "cal_ts.json"));
}

TEST_F(Cli, CardRendering) {
  ASSERT_EQ(run(dir, "card --manifest '" TRUSTLENS_SOURCE_DIR "/assets/card_manifest.json' --out-dir cards"), 0);
  const auto model = slurp(dir / "cards" / "model_card.md");
  EXPECT_EQ(model.rfind("---\ncard: model\n", 0), 0u);
  EXPECT_TRUE(std::filesystem::exists(dir / "cards" / "data_card.md"));
  auto j = trustlens::io::read_json(TRUSTLENS_SOURCE_DIR "/assets/card_manifest.json");
  j.erase("version");
  trustlens::io::write_file((dir / "bad.json").string(), j.dump());
  EXPECT_EQ(run(dir, "card --manifest bad.json --out-dir bad"), 3);
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run(dir, "gen-scene --no-such-flag"), 2);
  EXPECT_EQ(run(dir, "detect --scene missing.json"), 2);
  EXPECT_EQ(run(dir, ""), 2);
  trustlens::io::write_file((dir / "bad.attn").string(), "XXXX\x01\x00" + std::string(16, '\0'));
  EXPECT_EQ(run(dir, "saliency --attn bad.attn"), 3);
  trustlens::io::write_file((dir / "scene.json").string(), R"({"format":"trustlens.scene","version":1})");
  EXPECT_EQ(run(dir, "detect --scene scene.json"), 3);
  trustlens::io::write_file((dir / "broken.json").string(), "{not json");
  EXPECT_EQ(run(dir, "detect --scene broken.json"), 3);
  ASSERT_EQ(run(dir, "gen-scene --seed 1 -o ok.json"), 0);
  EXPECT_EQ(run(dir, "detect --scene ok.json --mask lidar --mask cameras"), 4);
  EXPECT_EQ(run(dir, "detect --scene ok.json --mask camera_9"), 2);
  ASSERT_EQ(run(dir, "detect --scene ok.json --attn ok.attn"), 0);
  EXPECT_EQ(run(dir, "saliency --attn ok.attn --fusion median"), 2);
  EXPECT_EQ(run(dir, "saliency --attn ok.attn --tau 0.999"), 4);
  trustlens::io::write_file((dir / "layout.json").string(),
                            trustlens::io::dump(trustlens::io::layout_to_json(trustlens::TokenLayout::paper_scale())));
  EXPECT_EQ(run(dir, "saliency --attn ok.attn --layout layout.json"), 3);
}
