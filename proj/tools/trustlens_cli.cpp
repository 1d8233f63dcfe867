// trustlens command-line interface.
//
// Exit codes: 0 success, 2 bad arguments, 3 schema/format violation,
// 4 numeric failure.

#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "trustlens/trustlens.hpp"

namespace fs = std::filesystem;
using namespace trustlens;

namespace {

constexpr int kExitArgs = 2;
constexpr int kExitSchema = 3;
constexpr int kExitNumeric = 4;

int exit_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument:
    case ErrorCode::out_of_range:
    case ErrorCode::io:
      return kExitArgs;
    case ErrorCode::bad_magic:
    case ErrorCode::bad_version:
    case ErrorCode::truncated:
    case ErrorCode::dimension_mismatch:
    case ErrorCode::layout_mismatch:
    case ErrorCode::nan_payload:
    case ErrorCode::schema:
    case ErrorCode::incomplete_table:
      return kExitSchema;
    default:
      return kExitNumeric;
  }
}

struct DetectorFlags {
  std::string layout_path;
  std::size_t layers = 3, heads = 4, queries = 64, width = 32;
  std::uint64_t weight_seed = synthdet::DetectorConfig{}.weight_seed;
  double noise = 0.02;

  void attach(CLI::App* app) {
    app->add_option("--layout", layout_path, "layout.json (default: built-in desk layout)");
    app->add_option("--layers", layers, "decoder layers L")->capture_default_str();
    app->add_option("--heads", heads, "attention heads H")->capture_default_str();
    app->add_option("--queries", queries, "object queries Q")->capture_default_str();
    app->add_option("--width", width, "feature width d")->capture_default_str();
    app->add_option("--weight-seed", weight_seed, "projection weight seed")->capture_default_str();
    app->add_option("--noise", noise, "token occupancy noise std")->capture_default_str();
  }

  TokenLayout layout() const {
    if (layout_path.empty()) return {};
    return io::layout_from_json(io::read_json(layout_path));
  }

  synthdet::DetectorConfig config() const {
    synthdet::DetectorConfig cfg;
    cfg.layers = layers;
    cfg.heads = heads;
    cfg.queries = queries;
    cfg.width = width;
    cfg.weight_seed = weight_seed;
    cfg.layout = layout();
    cfg.validate();
    return cfg;
  }
};

struct SelectionFlags {
  std::size_t top_k = 32;
  double tau = 0.3;
  std::string fusion = "mean";

  void attach(CLI::App* app, bool with_fusion = true) {
    app->add_option("--top-k", top_k, "queries kept by score")->capture_default_str();
    app->add_option("--tau", tau, "query score threshold")->capture_default_str();
    if (with_fusion)
      app->add_option("--fusion", fusion, "mean | max | last_layer")->capture_default_str();
  }

  SelectionConfig config() const { return {top_k, tau}; }
};

std::vector<SensorId> parse_masks(const std::vector<std::string>& names, const TokenLayout& layout) {
  std::vector<SensorId> out;
  for (const auto& n : names) {
    if (n == "lidar") {
      out.push_back(kLidar);
    } else if (n == "cameras") {
      const auto cams = synthdet::camera_sensors(layout);
      out.insert(out.end(), cams.begin(), cams.end());
    } else if (n.rfind("camera_", 0) == 0) {
      std::size_t used = 0;
      int c = -1;
      try {
        c = std::stoi(n.substr(7), &used);
      } catch (const std::logic_error&) {
      }
      if (c < 0 || used != n.size() - 7 || static_cast<std::size_t>(c) >= layout.num_cams)
        throw Error(ErrorCode::invalid_argument, "--mask: unknown sensor '" + n + "'");
      out.push_back(camera_sensor(c));
    } else {
      throw Error(ErrorCode::invalid_argument, "--mask: unknown sensor '" + n + "' (lidar, cameras, camera_<k>)");
    }
  }
  return out;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::io, "cannot create directory '" + dir + "'");
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

// Scenes either from files or generated from consecutive seeds.
std::vector<Scene> load_scenes(const std::vector<std::string>& files, std::size_t count, std::uint64_t seed,
                               std::size_t objects) {
  std::vector<Scene> scenes;
  if (!files.empty()) {
    for (const auto& f : files) {
      try {
        scenes.push_back(io::scene_from_json(io::read_json(f)));
      } catch (const Error& e) {
        throw Error(e.code(), f + ": " + e.what());
      }
    }
    return scenes;
  }
  if (count == 0) throw Error(ErrorCode::invalid_argument, "no scenes: pass scene files or --num-scenes");
  synthdet::SceneConfig sc;
  sc.num_objects = objects;
  for (std::size_t i = 0; i < count; ++i) scenes.push_back(synthdet::generate_scene(seed + i, sc));
  return scenes;
}

// Calibration inputs: (scene, detections) file pairs, or synthetic scenes run
// through the detector.
struct CalibrationInputs {
  std::vector<std::string> scene_files, detection_files;
  std::size_t synthetic = 0;
  std::uint64_t seed = 0;
  DetectorFlags det;

  void attach(CLI::App* app) {
    app->add_option("--scene", scene_files, "scene.json files, in scene order");
    app->add_option("--detections", detection_files, "detections.json files matching --scene");
    app->add_option("--synthetic", synthetic, "generate this many synthetic scenes instead");
    app->add_option("--seed", seed, "first scene seed for --synthetic")->capture_default_str();
    det.attach(app);
  }

  struct Loaded {
    calibration::CalibrationDataset data;
    std::vector<Scene> scenes;
    std::vector<std::vector<UncertainDetection>> detections;
  };

  Loaded load() const {
    Loaded out;
    if (!scene_files.empty() || !detection_files.empty()) {
      if (scene_files.size() != detection_files.size())
        throw Error(ErrorCode::invalid_argument, "--scene and --detections must be given the same number of times");
      for (std::size_t i = 0; i < scene_files.size(); ++i) {
        out.scenes.push_back(io::scene_from_json(io::read_json(scene_files[i])));
        out.detections.push_back(io::detections_from_json(io::read_json(detection_files[i])));
      }
    } else {
      if (synthetic == 0) throw Error(ErrorCode::invalid_argument, "no input: pass --scene/--detections or --synthetic N");
      const synthdet::Detector detector(det.config());
      for (std::size_t i = 0; i < synthetic; ++i) {
        out.scenes.push_back(synthdet::generate_scene(seed + i));
        const auto tokens = synthdet::generate_tokens(out.scenes.back(), detector.config().layout, det.noise);
        out.detections.push_back(synthdet::postprocess(detector.run(tokens).detections));
      }
    }
    for (std::size_t i = 0; i < out.scenes.size(); ++i)
      calibration::add_scene(out.data, out.detections[i], out.scenes[i].objects);
    return out;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"trustlens: attention saliency, faithfulness, uncertainty calibration and robustness scoring"};
  app.require_subcommand(1);

  // gen-scene
  auto* gen = app.add_subcommand("gen-scene", "write a synthetic scene.json");
  std::uint64_t gen_seed = 0;
  std::size_t gen_objects = 6;
  double gen_extent = 51.2;
  std::string gen_out = "scene.json";
  gen->add_option("--seed", gen_seed, "scene seed")->capture_default_str();
  gen->add_option("--objects", gen_objects, "number of objects")->capture_default_str();
  gen->add_option("--extent", gen_extent, "square extent, m")->capture_default_str();
  gen->add_option("-o,--out", gen_out, "output path")->capture_default_str();

  // detect
  auto* det = app.add_subcommand("detect", "run the synthetic detector on a scene");
  std::string det_scene, det_out = "detections.json", det_attn = "attention.attn", det_layout_out;
  std::vector<std::string> det_masks;
  bool det_raw = false;
  double det_thresh = 0.3, det_nms = 3.0;
  DetectorFlags det_flags;
  det->add_option("--scene", det_scene, "scene.json")->required();
  det->add_option("-o,--out", det_out, "detections.json output")->capture_default_str();
  det->add_option("--attn", det_attn, "ATTN output")->capture_default_str();
  det->add_option("--layout-out", det_layout_out, "also write the layout used");
  det->add_option("--mask", det_masks, "masked sensors: lidar, cameras, camera_<k>");
  det->add_flag("--raw", det_raw, "write one detection per query (no threshold / NMS)");
  det->add_option("--score-threshold", det_thresh, "post-processing score threshold")->capture_default_str();
  det->add_option("--nms-radius", det_nms, "BEV suppression radius, m")->capture_default_str();
  det_flags.attach(det);

  // saliency
  auto* sal = app.add_subcommand("saliency", "fuse an ATTN stack into a saliency map");
  std::string sal_attn, sal_layout, sal_out = "saliency.json", sal_grid_dir;
  SelectionFlags sal_sel;
  sal->add_option("--attn", sal_attn, "ATTN input")->required();
  sal->add_option("--layout", sal_layout, "layout.json (default: built-in desk layout)");
  sal->add_option("-o,--out", sal_out, "saliency.json output")->capture_default_str();
  sal->add_option("--grid-dir", sal_grid_dir, "also write per-view CSV and PGM grids here");
  sal_sel.attach(sal);

  // contribution
  auto* con = app.add_subcommand("contribution", "per-sensor contribution shares from an ATTN stack");
  std::string con_attn, con_layout, con_out = "contribution.json";
  SelectionFlags con_sel;
  con->add_option("--attn", con_attn, "ATTN input")->required();
  con->add_option("--layout", con_layout, "layout.json (default: built-in desk layout)");
  con->add_option("-o,--out", con_out, "contribution.json output")->capture_default_str();
  con_sel.attach(con);

  // faithfulness
  auto* fai = app.add_subcommand("faithfulness", "positive/negative perturbation curves over a scene batch");
  std::vector<std::string> fai_scenes;
  std::size_t fai_count = 0, fai_objects = 6, fai_repeats = 5, fai_jobs = 1;
  std::uint64_t fai_seed = 0, fai_perturb_seed = 0;
  std::vector<std::string> fai_methods = {"mean", "max", "last_layer", "random"};
  std::vector<double> fai_rho = faithfulness::default_rho_grid();
  std::string fai_out = ".";
  SelectionFlags fai_sel;
  DetectorFlags fai_det;
  fai->add_option("--scene", fai_scenes, "scene.json files");
  fai->add_option("--num-scenes", fai_count, "generate this many scenes instead");
  fai->add_option("--seed", fai_seed, "first generated scene seed")->capture_default_str();
  fai->add_option("--objects", fai_objects, "objects per generated scene")->capture_default_str();
  fai->add_option("--methods", fai_methods, "mean, max, last_layer, random")->delimiter(',')->capture_default_str();
  fai->add_option("--rho", fai_rho, "masking percentages")->delimiter(',')->capture_default_str();
  fai->add_option("--repeats", fai_repeats, "random-baseline shuffles")->capture_default_str();
  fai->add_option("--perturb-seed", fai_perturb_seed, "seed of the random baseline")->capture_default_str();
  fai->add_option("--jobs", fai_jobs, "worker threads (results do not depend on it)")->capture_default_str();
  fai->add_option("--out-dir", fai_out, "directory for curve.csv and summary.json")->capture_default_str();
  fai_sel.attach(fai, false);
  fai_det.attach(fai);

  // robustness
  auto* rob = app.add_subcommand("robustness", "robustness.csv -> rra.csv");
  std::string rob_in, rob_out = "rra.csv", rob_base;
  rob->add_option("--input", rob_in, "robustness.csv (model,corruption,severity,score)")->required();
  rob->add_option("--baseline", rob_base, "baseline model name")->required();
  rob->add_option("-o,--out", rob_out, "rra.csv output")->capture_default_str();

  // calibrate
  auto* cal = app.add_subcommand("calibrate", "fit calibration on the first 30% of scenes");
  CalibrationInputs cal_in;
  std::string cal_method = "ts", cal_out = "calibration.json";
  cal_in.attach(cal);
  cal->add_option("--method", cal_method, "ts | ps")->capture_default_str();
  cal->add_option("-o,--out", cal_out, "calibration.json output")->capture_default_str();

  // eval-calibration
  auto* ev = app.add_subcommand("eval-calibration", "evaluate calibration on the last 70% of scenes");
  CalibrationInputs ev_in;
  std::string ev_params, ev_out = "report.json";
  std::size_t ev_bins = 10;
  ev_in.attach(ev);
  ev->add_option("--params", ev_params, "calibration.json")->required();
  ev->add_option("--bins", ev_bins, "D-ECE bins")->capture_default_str();
  ev->add_option("-o,--out", ev_out, "report.json output")->capture_default_str();

  // card
  auto* crd = app.add_subcommand("card", "render model and data cards from a manifest");
  std::string crd_in, crd_out = ".";
  crd->add_option("--manifest", crd_in, "card manifest JSON")->required();
  crd->add_option("--out-dir", crd_out, "directory for model_card.md and data_card.md")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitArgs;
  }

  try {
    if (gen->parsed()) {
      synthdet::SceneConfig sc;
      sc.num_objects = gen_objects;
      sc.extent = gen_extent;
      io::write_file(gen_out, io::dump(io::scene_to_json(synthdet::generate_scene(gen_seed, sc))));
    } else if (det->parsed()) {
      const Scene scene = io::scene_from_json(io::read_json(det_scene));
      const auto cfg = det_flags.config();
      const auto masks = parse_masks(det_masks, cfg.layout);
      const auto tokens = synthdet::generate_tokens(scene, cfg.layout, det_flags.noise);
      const auto out = synthdet::run_detector(tokens, cfg, masks);
      const auto dets = det_raw ? out.detections : synthdet::postprocess(out.detections, det_thresh, det_nms);
      io::write_file(det_out, io::dump(io::detections_to_json(dets)));
      io::write_file(det_attn, io::serialize_attention(out.attention));
      if (!det_layout_out.empty()) io::write_file(det_layout_out, io::dump(io::layout_to_json(cfg.layout)));
    } else if (sal->parsed() || con->parsed()) {
      const bool is_sal = sal->parsed();
      const std::string& layout_path = is_sal ? sal_layout : con_layout;
      const TokenLayout layout = layout_path.empty() ? TokenLayout{} : io::layout_from_json(io::read_json(layout_path));
      const SelectionFlags& sel = is_sal ? sal_sel : con_sel;
      std::ifstream in(is_sal ? sal_attn : con_attn, std::ios::binary);
      if (!in) throw Error(ErrorCode::io, "cannot open '" + (is_sal ? sal_attn : con_attn) + "'");
      const auto map = saliency::compute_stream(in, sel.config(), saliency::fusion_from_string(sel.fusion), layout);
      if (is_sal) {
        io::write_file(sal_out, io::dump(saliency::saliency_to_json(map, layout)));
        if (!sal_grid_dir.empty()) {
          ensure_dir(sal_grid_dir);
          const auto views = saliency::split_modalities(map, layout);
          io::write_file(join(sal_grid_dir, "bev.csv"), saliency::grid_to_csv(views.bev));
          io::write_file(join(sal_grid_dir, "bev.pgm"), saliency::grid_to_pgm(views.bev));
          for (std::size_t c = 0; c < views.cameras.size(); ++c) {
            const std::string stem = "camera_" + std::to_string(c);
            io::write_file(join(sal_grid_dir, stem + ".csv"), saliency::grid_to_csv(views.cameras[c]));
            io::write_file(join(sal_grid_dir, stem + ".pgm"), saliency::grid_to_pgm(views.cameras[c]));
          }
        }
      } else {
        io::write_file(con_out, io::dump(saliency::contribution_to_json(saliency::sensor_contribution(map, layout))));
      }
    } else if (fai->parsed()) {
      const auto scenes = load_scenes(fai_scenes, fai_count, fai_seed, fai_objects);
      faithfulness::CompareOptions opts;
      opts.methods.clear();
      for (const auto& m : fai_methods) opts.methods.push_back(faithfulness::method_from_string(m));
      opts.spec.rho_grid = fai_rho;
      opts.spec.random_repeats = fai_repeats;
      opts.spec.seed = fai_perturb_seed;
      opts.eval.noise_std = fai_det.noise;
      opts.jobs = fai_jobs;
      const auto cmp = faithfulness::compare_methods(scenes, fai_det.config(), fai_sel.config(), opts);
      ensure_dir(fai_out);
      io::write_file(join(fai_out, "curve.csv"), faithfulness::curve_csv(cmp));
      io::write_file(join(fai_out, "summary.json"), io::dump(faithfulness::summary_json(cmp, scenes.size())));
      if (cmp.degenerate > 0)
        std::cerr << "warning: " << cmp.degenerate << " curve(s) had no valid query and were held at the clean score\n";
    } else if (rob->parsed()) {
      const auto table = metrics::RobustnessTable::from_csv(io::read_file(rob_in));
      if (std::find(table.models().begin(), table.models().end(), rob_base) == table.models().end())
        throw Error(ErrorCode::invalid_argument, "--baseline '" + rob_base + "' is not a model in " + rob_in);
      io::write_file(rob_out, metrics::rra_csv(table, rob_base));
    } else if (cal->parsed()) {
      const auto loaded = cal_in.load();
      const auto [cal_split, eval_split] = calibration::split(loaded.data);
      const auto params = calibration::fit(cal_split, calibration::score_method_from_string(cal_method));
      auto j = calibration::params_to_json(params);
      j["calibration_scenes"] = cal_split.scenes;
      j["calibration_records"] = cal_split.records.size();
      io::write_file(cal_out, io::dump(j));
    } else if (ev->parsed()) {
      const auto params = calibration::params_from_json(io::read_json(ev_params));
      const auto loaded = ev_in.load();
      const auto [cal_split, eval_split] = calibration::split(loaded.data);
      const calibration::CalibrationParams identity;
      // Accuracy on the evaluation scenes, before and after calibration.
      const std::size_t first_eval = cal_split.scenes;
      double dqs_before = 0.0, dqs_after = 0.0, map_before = 0.0, map_after = 0.0;
      for (std::size_t i = first_eval; i < loaded.scenes.size(); ++i) {
        const auto before = synthdet::plain(loaded.detections[i]);
        const auto after = synthdet::plain(calibration::apply(params, loaded.detections[i]));
        const auto b = metrics::dqs_breakdown(before, loaded.scenes[i].objects);
        const auto a = metrics::dqs_breakdown(after, loaded.scenes[i].objects);
        dqs_before += b.dqs;
        dqs_after += a.dqs;
        map_before += b.map;
        map_after += a.map;
      }
      const double n_eval = static_cast<double>(std::max<std::size_t>(1, loaded.scenes.size() - first_eval));
      const auto metrics_of = [&](const calibration::CalibrationParams& p) {
        return nlohmann::json{{"d_ece", calibration::d_ece(eval_split, p, ev_bins)},
                              {"mca_xyz", calibration::mca_xyz(eval_split, p)},
                              {"mca_theta", calibration::mca_theta(eval_split, p)},
                              {"nll", calibration::nll(eval_split, p)}};
      };
      nlohmann::json report = {{"format", "trustlens.calibration_report"},
                               {"version", 1},
                               {"method", std::string(calibration::to_string(params.method))},
                               {"evaluation_scenes", eval_split.scenes},
                               {"evaluation_records", eval_split.records.size()},
                               {"uncalibrated", metrics_of(identity)},
                               {"calibrated", metrics_of(params)},
                               {"accuracy",
                                {{"map_before", map_before / n_eval},
                                 {"map_after", map_after / n_eval},
                                 {"dqs_before", dqs_before / n_eval},
                                 {"dqs_after", dqs_after / n_eval}}}};
      io::write_file(ev_out, io::dump(report));
    } else if (crd->parsed()) {
      const auto manifest = card::manifest_from_json(io::read_json(crd_in));
      ensure_dir(crd_out);
      io::write_file(join(crd_out, "model_card.md"), card::render_model_card(manifest));
      io::write_file(join(crd_out, "data_card.md"), card::render_data_card(manifest));
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.code());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: schema: " << e.what() << "\n";
    return kExitSchema;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
  return 0;
}
