#pragma once

// Post-hoc calibration. Classification confidences are recalibrated with
// temperature scaling (p = sigmoid(z / T)) or Platt scaling
// (p = sigmoid(a z + b)); regression uncertainties with per-parameter
// temperatures (sigma / T for the centroid axes, T * kappa for heading).
// Evaluation uses D-ECE over [tau, 1] and the miscalibration area of
// centered prediction intervals.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "trustlens/core.hpp"
#include "trustlens/metrics.hpp"
#include "trustlens/uncertainty.hpp"

namespace trustlens::calibration {

inline constexpr double kProbClamp = 1e-7;

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// Inverse sigmoid of a confidence clamped to [1e-7, 1 - 1e-7].
inline double logit(double p) {
  p = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
  return std::log(p) - std::log1p(-p);
}

struct Record {
  std::size_t scene = 0;
  double logit = 0.0;
  bool matched = false;
  // Filled for matched records only.
  Vec3 residual{0.0, 0.0, 0.0};  // predicted - true, m
  Vec3 log_var{0.0, 0.0, 0.0};
  double theta_residual = 0.0;   // wrapped, rad
  double kappa = 1.0;
};

struct CalibrationDataset {
  std::vector<Record> records;
  std::size_t scenes = 0;

  std::size_t matched() const {
    return static_cast<std::size_t>(std::count_if(records.begin(), records.end(), [](const Record& r) { return r.matched; }));
  }
};

struct DatasetConfig {
  double tau = 0.3;
  double match_distance = 2.0;
};

// Appends one scene: detections with score >= tau, greedily matched to the
// ground truth by BEV center distance.
inline void add_scene(CalibrationDataset& data, std::span<const UncertainDetection> dets, std::span<const Box> gts,
                      const DatasetConfig& cfg = {}) {
  std::vector<UncertainDetection> kept;
  for (const auto& d : dets)
    if (d.score >= cfg.tau) kept.push_back(d);
  std::vector<Detection> plain;
  for (const auto& d : kept) plain.push_back(d.detection());
  const auto m = metrics::match(plain, gts, cfg.match_distance);
  std::vector<int> gt_of(kept.size(), -1);
  for (const auto& p : m.pairs) gt_of[p.det] = static_cast<int>(p.gt);
  for (std::size_t i = 0; i < kept.size(); ++i) {
    Record r;
    r.scene = data.scenes;
    r.logit = logit(kept[i].score);
    if (gt_of[i] >= 0) {
      const Box& g = gts[static_cast<std::size_t>(gt_of[i])];
      r.matched = true;
      for (int k = 0; k < 3; ++k) r.residual[k] = kept[i].box.center[k] - g.center[k];
      r.log_var = kept[i].log_var;
      r.theta_residual = wrap_angle(kept[i].box.yaw - g.yaw);
      r.kappa = kept[i].kappa();
    }
    data.records.push_back(r);
  }
  ++data.scenes;
}

// Sequential split by scene: the first round(fraction * scenes) scenes
// calibrate, the rest evaluate.
inline std::pair<CalibrationDataset, CalibrationDataset> split(const CalibrationDataset& data, double fraction = 0.3) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw Error(ErrorCode::invalid_argument, "split: fraction outside (0, 1)");
  auto n_cal = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(data.scenes) + 0.5));
  if (data.scenes >= 2) n_cal = std::clamp<std::size_t>(n_cal, 1, data.scenes - 1);
  CalibrationDataset cal, eval;
  cal.scenes = n_cal;
  eval.scenes = data.scenes - n_cal;
  for (const auto& r : data.records) {
    if (r.scene < n_cal) {
      cal.records.push_back(r);
    } else {
      eval.records.push_back(r);
      eval.records.back().scene -= n_cal;
    }
  }
  return {cal, eval};
}

// ---------------------------------------------------------------------------
// Parameters

enum class ScoreMethod { none, temperature, platt };

inline std::string_view to_string(ScoreMethod m) {
  switch (m) {
    case ScoreMethod::none: return "none";
    case ScoreMethod::temperature: return "ts";
    case ScoreMethod::platt: return "ps";
  }
  return "?";
}

inline ScoreMethod score_method_from_string(std::string_view s) {
  if (s == "none") return ScoreMethod::none;
  if (s == "ts" || s == "temperature") return ScoreMethod::temperature;
  if (s == "ps" || s == "platt") return ScoreMethod::platt;
  throw Error(ErrorCode::invalid_argument, "unknown calibration method '" + std::string(s) + "'");
}

struct CalibrationParams {
  ScoreMethod method = ScoreMethod::none;
  double T = 1.0;
  double a = 1.0, b = 0.0;
  Vec3 t_sigma{1.0, 1.0, 1.0};
  double t_kappa = 1.0;

  void validate() const {
    const auto positive = [](double v, const char* what) {
      if (!(v > 0.0) || !std::isfinite(v))
        throw Error(ErrorCode::invalid_argument, std::string("calibration: ") + what + " must be finite and > 0");
    };
    positive(T, "T");
    positive(a, "a");
    if (!std::isfinite(b)) throw Error(ErrorCode::invalid_argument, "calibration: b must be finite");
    positive(t_sigma[0], "T_sigma_x");
    positive(t_sigma[1], "T_sigma_y");
    positive(t_sigma[2], "T_sigma_z");
    positive(t_kappa, "T_kappa");
  }

  double confidence(double z) const {
    switch (method) {
      case ScoreMethod::temperature: return sigmoid(z / T);
      case ScoreMethod::platt: return sigmoid(a * z + b);
      default: return sigmoid(z);
    }
  }
};

// Rescales scores and uncertainties; box geometry is untouched.
inline std::vector<UncertainDetection> apply(const CalibrationParams& params, std::span<const UncertainDetection> dets) {
  params.validate();
  std::vector<UncertainDetection> out(dets.begin(), dets.end());
  for (auto& d : out) {
    if (params.method != ScoreMethod::none) d.score = params.confidence(logit(d.score));
    for (int k = 0; k < 3; ++k) d.log_var[k] -= 2.0 * std::log(params.t_sigma[k]);
    d.u_theta -= std::log(params.t_kappa);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Score calibration

// Mean binary cross-entropy of sigmoid(a z + b).
inline double nll_affine(const CalibrationDataset& data, double a, double b) {
  if (data.records.empty()) throw Error(ErrorCode::empty_dataset, "nll: empty dataset");
  double sum = 0.0;
  for (const auto& r : data.records) {
    const double s = a * r.logit + b;
    // -log sigmoid(s) = softplus(-s); -log(1 - sigmoid(s)) = softplus(s)
    const double x = r.matched ? -s : s;
    sum += std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
  }
  return sum / static_cast<double>(data.records.size());
}

inline double nll(const CalibrationDataset& data, const CalibrationParams& p) {
  switch (p.method) {
    case ScoreMethod::temperature: return nll_affine(data, 1.0 / p.T, 0.0);
    case ScoreMethod::platt: return nll_affine(data, p.a, p.b);
    default: return nll_affine(data, 1.0, 0.0);
  }
}

inline void require_both_labels(const CalibrationDataset& data, const char* fn) {
  if (data.records.empty()) throw Error(ErrorCode::empty_dataset, std::string(fn) + ": empty dataset");
  const std::size_t pos = data.matched();
  if (pos == 0 || pos == data.records.size())
    throw Error(ErrorCode::degenerate_labels, std::string(fn) + ": labels are all " + (pos == 0 ? "negative" : "positive"));
}

// Golden-section minimization of a unimodal function on [lo, hi].
inline double golden_section(const std::function<double(double)>& f, double lo, double hi, double tol) {
  const double g = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo, b = hi;
  double c = b - g * (b - a), d = a + g * (b - a);
  double fc = f(c), fd = f(d);
  while (b - a > tol) {
    if (fc <= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - g * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + g * (b - a);
      fd = f(d);
    }
  }
  return fc <= fd ? c : d;
}

// Temperature minimizing the calibration-split NLL over log T in
// [log 0.05, log 20]. T = 1 is kept if the search does not improve on it.
inline double fit_ts(const CalibrationDataset& data) {
  require_both_labels(data, "fit_ts");
  const auto f = [&](double log_t) { return nll_affine(data, std::exp(-log_t), 0.0); };
  const double best = golden_section(f, std::log(0.05), std::log(20.0), 1e-6);
  return f(best) <= f(0.0) ? std::exp(best) : 1.0;
}

// Platt scaling by damped Newton from the temperature-scaling solution, so
// the returned NLL never exceeds the TS one.
inline std::pair<double, double> fit_ps(const CalibrationDataset& data, double start_t = 0.0) {
  require_both_labels(data, "fit_ps");
  if (!(start_t > 0.0)) start_t = fit_ts(data);
  double a = 1.0 / start_t, b = 0.0;
  double cur = nll_affine(data, a, b);
  const auto n = static_cast<double>(data.records.size());
  for (int it = 0; it < 100; ++it) {
    double ga = 0.0, gb = 0.0, haa = 0.0, hab = 0.0, hbb = 0.0;
    for (const auto& r : data.records) {
      const double p = sigmoid(a * r.logit + b);
      const double e = p - (r.matched ? 1.0 : 0.0);
      const double w = p * (1.0 - p);
      ga += e * r.logit;
      gb += e;
      haa += w * r.logit * r.logit;
      hab += w * r.logit;
      hbb += w;
    }
    ga /= n;
    gb /= n;
    haa /= n;
    hab /= n;
    hbb /= n;
    if (std::hypot(ga, gb) < 1e-8) break;
    double da = -ga, db = -gb;
    const double det = haa * hbb - hab * hab;
    if (det > 1e-18 * std::max(1.0, haa * hbb)) {
      da = -(hbb * ga - hab * gb) / det;
      db = -(haa * gb - hab * ga) / det;
    }
    double step = 1.0;
    bool improved = false;
    for (int k = 0; k < 50; ++k, step *= 0.5) {
      const double na = a + step * da, nb = b + step * db;
      if (!(na > 0.0)) continue;
      const double v = nll_affine(data, na, nb);
      if (v <= cur) {
        a = na;
        b = nb;
        improved = v < cur;
        cur = v;
        break;
      }
    }
    if (!improved) break;
  }
  return {a, b};
}

// ---------------------------------------------------------------------------
// D-ECE

// 100 * sum_b (n_b / n) |precision_b - confidence_b| over `bins` equal-width
// bins on [lo, 1]; confidences outside the range go to the nearest end bin.
inline double d_ece(std::span<const double> confidence, std::span<const char> matched, std::size_t bins = 10,
                    double lo = 0.3) {
  if (bins == 0) throw Error(ErrorCode::invalid_argument, "d_ece: bins must be >= 1");
  if (confidence.size() != matched.size()) throw Error(ErrorCode::dimension_mismatch, "d_ece: size mismatch");
  if (confidence.empty()) throw Error(ErrorCode::empty_dataset, "d_ece: empty dataset");
  std::vector<double> conf_sum(bins, 0.0), hits(bins, 0.0), count(bins, 0.0);
  const double width = (1.0 - lo) / static_cast<double>(bins);
  for (std::size_t i = 0; i < confidence.size(); ++i) {
    const double c = confidence[i];
    const auto raw = static_cast<long long>(std::floor((c - lo) / width));
    const auto b = static_cast<std::size_t>(std::clamp<long long>(raw, 0, static_cast<long long>(bins) - 1));
    conf_sum[b] += c;
    hits[b] += matched[i] ? 1.0 : 0.0;
    count[b] += 1.0;
  }
  double ece = 0.0;
  for (std::size_t b = 0; b < bins; ++b)
    if (count[b] > 0.0) ece += count[b] * std::abs(hits[b] / count[b] - conf_sum[b] / count[b]);
  return 100.0 * ece / static_cast<double>(confidence.size());
}

inline double d_ece(const CalibrationDataset& data, const CalibrationParams& params, std::size_t bins = 10,
                    double tau = 0.3) {
  std::vector<double> conf;
  std::vector<char> hit;
  for (const auto& r : data.records) {
    conf.push_back(params.confidence(r.logit));
    hit.push_back(r.matched ? 1 : 0);
  }
  return d_ece(conf, hit, bins, tau);
}

// ---------------------------------------------------------------------------
// Miscalibration area

inline constexpr std::size_t kMcaLevels = 99;
inline constexpr std::size_t kMcaMinMatched = 10;

// A residual lies inside the centered interval at level p exactly when the
// central probability mass out to |residual| is <= p, so coverage at every
// level follows from the sorted masses.
inline double mca_from_masses(std::vector<double> masses) {
  if (masses.empty()) throw Error(ErrorCode::empty_dataset, "mca: no matched detections");
  std::sort(masses.begin(), masses.end());
  const auto n = static_cast<double>(masses.size());
  double sum = 0.0;
  for (std::size_t k = 1; k <= kMcaLevels; ++k) {
    const double p = static_cast<double>(k) / 100.0;
    const auto inside = static_cast<double>(std::upper_bound(masses.begin(), masses.end(), p) - masses.begin());
    sum += std::abs(inside / n - p);
  }
  return 100.0 * sum / static_cast<double>(kMcaLevels);
}

inline std::vector<const Record*> matched_records(const CalibrationDataset& data) {
  std::vector<const Record*> out;
  for (const auto& r : data.records)
    if (r.matched) out.push_back(&r);
  if (out.size() < kMcaMinMatched)
    throw Error(ErrorCode::empty_dataset, "mca: needs >= " + std::to_string(kMcaMinMatched) + " matched detections, got " +
                                              std::to_string(out.size()));
  return out;
}

inline double mca_axis(const std::vector<const Record*>& recs, int axis, double t_sigma) {
  std::vector<double> m;
  m.reserve(recs.size());
  for (const Record* r : recs)
    m.push_back(uncertainty::gaussian_central_mass(r->residual[axis], std::exp(0.5 * r->log_var[axis]) / t_sigma));
  return mca_from_masses(std::move(m));
}

inline double mca_heading(const std::vector<const Record*>& recs, double t_kappa) {
  std::vector<double> m;
  m.reserve(recs.size());
  for (const Record* r : recs) m.push_back(uncertainty::vonmises_central_mass(std::abs(r->theta_residual), t_kappa * r->kappa));
  return mca_from_masses(std::move(m));
}

inline double mca_axis(const CalibrationDataset& data, const CalibrationParams& params, int axis) {
  return mca_axis(matched_records(data), axis, params.t_sigma[axis]);
}

inline double mca_xyz(const CalibrationDataset& data, const CalibrationParams& params) {
  const auto recs = matched_records(data);
  double s = 0.0;
  for (int k = 0; k < 3; ++k) s += mca_axis(recs, k, params.t_sigma[k]);
  return s / 3.0;
}

inline double mca_theta(const CalibrationDataset& data, const CalibrationParams& params) {
  return mca_heading(matched_records(data), params.t_kappa);
}

// MCA is piecewise constant in T, so a coarse log-grid scan brackets the
// minimum before the golden-section refinement. T = 1 wins ties.
inline double minimize_log_temperature(const std::function<double(double)>& mca) {
  const double lo = std::log(0.1), hi = std::log(10.0);
  constexpr int kGrid = 64;
  double best_x = 0.0, best_v = mca(0.0);
  const double step = (hi - lo) / kGrid;
  for (int i = 0; i <= kGrid; ++i) {
    const double x = lo + step * i;
    const double v = mca(x);
    if (v < best_v) {
      best_v = v;
      best_x = x;
    }
  }
  const double refined = golden_section(mca, std::max(lo, best_x - step), std::min(hi, best_x + step), 1e-6);
  if (mca(refined) < best_v) best_x = refined;
  return std::exp(best_x);
}

struct RegressionTemperatures {
  Vec3 t_sigma{1.0, 1.0, 1.0};
  double t_kappa = 1.0;
};

inline RegressionTemperatures fit_reg_temperatures(const CalibrationDataset& data) {
  const auto recs = matched_records(data);
  RegressionTemperatures out;
  for (int k = 0; k < 3; ++k)
    out.t_sigma[k] = minimize_log_temperature([&](double lt) { return mca_axis(recs, k, std::exp(lt)); });
  out.t_kappa = minimize_log_temperature([&](double lt) { return mca_heading(recs, std::exp(lt)); });
  return out;
}

// Fits score and regression calibration on a calibration split.
inline CalibrationParams fit(const CalibrationDataset& cal, ScoreMethod method) {
  CalibrationParams p;
  p.method = method;
  if (method != ScoreMethod::none) {
    p.T = fit_ts(cal);
    if (method == ScoreMethod::platt) std::tie(p.a, p.b) = fit_ps(cal, p.T);
  }
  const auto reg = fit_reg_temperatures(cal);
  p.t_sigma = reg.t_sigma;
  p.t_kappa = reg.t_kappa;
  return p;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json params_to_json(const CalibrationParams& p) {
  nlohmann::json j = {{"format", "trustlens.calibration"}, {"version", 1}, {"method", std::string(to_string(p.method))}};
  if (p.method == ScoreMethod::temperature) j["T"] = p.T;
  if (p.method == ScoreMethod::platt) {
    j["a"] = p.a;
    j["b"] = p.b;
  }
  j["T_sigma_x"] = p.t_sigma[0];
  j["T_sigma_y"] = p.t_sigma[1];
  j["T_sigma_z"] = p.t_sigma[2];
  j["T_kappa"] = p.t_kappa;
  return j;
}

inline CalibrationParams params_from_json(const nlohmann::json& j) {
  const std::string ctx = "calibration";
  if (!j.is_object()) throw Error(ErrorCode::schema, ctx + ": expected an object");
  const auto num = [&](const char* key) {
    if (!j.contains(key)) throw Error(ErrorCode::schema, ctx + ": missing field '" + key + "'");
    if (!j[key].is_number()) throw Error(ErrorCode::schema, ctx + ": field '" + std::string(key) + "' must be a number");
    return j[key].get<double>();
  };
  if (!j.contains("format") || j["format"] != "trustlens.calibration")
    throw Error(ErrorCode::schema, ctx + ": format must be 'trustlens.calibration'");
  if (!j.contains("method") || !j["method"].is_string()) throw Error(ErrorCode::schema, ctx + ": missing field 'method'");
  CalibrationParams p;
  try {
    p.method = score_method_from_string(j["method"].get<std::string>());
  } catch (const Error& e) {
    throw Error(ErrorCode::schema, ctx + ": " + e.what());
  }
  if (p.method == ScoreMethod::temperature) p.T = num("T");
  if (p.method == ScoreMethod::platt) {
    p.a = num("a");
    p.b = num("b");
  }
  p.t_sigma = {num("T_sigma_x"), num("T_sigma_y"), num("T_sigma_z")};
  p.t_kappa = num("T_kappa");
  try {
    p.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::schema, e.what());
  }
  return p;
}

}  // namespace trustlens::calibration
