#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xmodseg/imgio.hpp"
#include "xmodseg/preprocess.hpp"

// Segmentation scoring: Dice, FDR, FNR, the FDR/FNR -> 1..5 rubric band
// mapping, a numeric synthetic-CT fidelity proxy, and evaluation reports.
//
// Band edges are half-open with the lower bound inclusive, so e.g. FDR
// exactly 0.15 scores 4. Conflicting per-metric bands resolve to the minimum
// of the two band scores (the conservative reading of the rubric).

namespace xmodseg::metrics {

namespace fs = std::filesystem;
using nlohmann::json;

struct Counts {
  std::size_t tp = 0, fp = 0, fn = 0;
};

inline Counts count_pixels(const Mask& pred, const Mask& gt) {
  require(pred.same_shape(gt), "mask shape mismatch: pred " +
                                   std::to_string(pred.h) + "x" +
                                   std::to_string(pred.w) + " vs gt " +
                                   std::to_string(gt.h) + "x" +
                                   std::to_string(gt.w));
  Counts c;
  for (std::size_t i = 0; i < pred.px.size(); ++i) {
    if (pred.px[i] && gt.px[i])
      ++c.tp;
    else if (pred.px[i])
      ++c.fp;
    else if (gt.px[i])
      ++c.fn;
  }
  return c;
}

/// 2|P∩G| / (|P|+|G|); 1.0 when both masks are empty.
inline double dice(const Mask& pred, const Mask& gt) {
  const auto c = count_pixels(pred, gt);
  const std::size_t denom = 2 * c.tp + c.fp + c.fn;
  if (denom == 0) return 1.0;
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

/// FP/(FP+TP); 0 when the prediction is empty.
inline double fdr(const Mask& pred, const Mask& gt) {
  const auto c = count_pixels(pred, gt);
  if (c.tp + c.fp == 0) return 0.0;
  return static_cast<double>(c.fp) / static_cast<double>(c.tp + c.fp);
}

/// FN/(FN+TP); 0 when the ground truth is empty.
inline double fnr(const Mask& pred, const Mask& gt) {
  const auto c = count_pixels(pred, gt);
  if (c.tp + c.fn == 0) return 0.0;
  return static_cast<double>(c.fn) / static_cast<double>(c.tp + c.fn);
}

// Descending band edges; score for value v is the band whose half-open
// interval [lo, hi) contains it, the last band closing at 1 inclusive.
struct ScoreBands {
  // FDR: [0,.15)->5 [.15,.30)->4 [.30,.45)->3 [.45,.70)->2 [.70,1]->1
  std::vector<double> fdr_edges{0.15, 0.30, 0.45, 0.70};
  // FNR: [0,.20)->5 [.20,.30)->4 [.30,.50)->3 [.50,.80)->2 [.80,1]->1
  std::vector<double> fnr_edges{0.20, 0.30, 0.50, 0.80};
};

inline int band_score(double v, const std::vector<double>& edges) {
  int score = 5;
  for (double e : edges) {
    if (v < e) return score;
    --score;
  }
  return 1;
}

/// Per-metric band scores combined with min(); inputs must lie in [0,1].
inline int rubric_score(double fdr_val, double fnr_val,
                        const ScoreBands& bands = {}) {
  require(fdr_val >= 0.0 && fdr_val <= 1.0 && fnr_val >= 0.0 && fnr_val <= 1.0,
          "rubric_score: inputs must lie in [0,1]");
  return std::min(band_score(fdr_val, bands.fdr_edges),
                  band_score(fnr_val, bands.fnr_edges));
}

struct EvalRecord {
  std::string slice_id;
  Tissue tissue = Tissue::SAT;
  double dice = 0, fdr = 0, fnr = 0;
  int score = 0;

  json to_json() const {
    return {{"slice_id", slice_id}, {"tissue", to_string(tissue)},
            {"dice", dice},         {"fdr", fdr},
            {"fnr", fnr},           {"score", score}};
  }
};

inline EvalRecord evaluate_pair(const Mask& pred, const Mask& gt) {
  EvalRecord r;
  r.slice_id = gt.id;
  r.tissue = gt.tissue;
  r.dice = dice(pred, gt);
  r.fdr = fdr(pred, gt);
  r.fnr = fnr(pred, gt);
  r.score = rubric_score(r.fdr, r.fnr);
  return r;
}

struct Fidelity {
  double mse = 0.0;
  double pearson = 0.0;
};

/// Pixelwise MSE and Pearson correlation over the body region of the
/// acquired CT (both slices NORM01, equal shapes).
inline Fidelity sct_fidelity(const Slice& sct, const Slice& act) {
  require(sct.pixels.same_shape(act.pixels), "sct_fidelity: shape mismatch");
  require(sct.intensity_kind == IntensityKind::NORM01 &&
              act.intensity_kind == IntensityKind::NORM01,
          "sct_fidelity: both slices must be NORM01");
  const auto body = preprocess::body_region(act);
  double se = 0.0, sx = 0.0, sy = 0.0, sxx = 0.0, syy = 0.0, sxy = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < body.size(); ++i) {
    if (!body[i]) continue;
    const double x = sct.pixels[i], y = act.pixels[i];
    se += (x - y) * (x - y);
    sx += x;
    sy += y;
    sxx += x * x;
    syy += y * y;
    sxy += x * y;
    ++n;
  }
  require(n > 0, "sct_fidelity: empty body region");
  Fidelity f;
  const double dn = static_cast<double>(n);
  f.mse = se / dn;
  const double cov = sxy / dn - (sx / dn) * (sy / dn);
  const double vx = sxx / dn - (sx / dn) * (sx / dn);
  const double vy = syy / dn - (sy / dn) * (sy / dn);
  f.pearson = (vx > 1e-18 && vy > 1e-18) ? cov / std::sqrt(vx * vy) : 0.0;
  f.pearson = std::clamp(f.pearson, -1.0, 1.0);
  return f;
}

/// Evaluates prediction masks against ground truth over matching layouts
/// `<dir>/<tissue>/<id>.png`, writes the JSON report, and returns it.
/// Records are ordered by (tissue, id).
inline json eval_report(const fs::path& pred_dir, const fs::path& gt_dir,
                        const std::string& out_path) {
  std::vector<EvalRecord> records;
  bool any = false;
  for (const Tissue tissue : {Tissue::SAT, Tissue::VAT}) {
    const std::string tdir = to_string(tissue);
    auto pred_ids = imgio::list_ids(pred_dir / tdir);
    auto gt_ids = imgio::list_ids(gt_dir / tdir);
    if (pred_ids.empty() && gt_ids.empty()) continue;
    any = true;
    std::vector<std::string> missing;
    for (const auto& id : pred_ids)
      if (!std::binary_search(gt_ids.begin(), gt_ids.end(), id))
        missing.push_back(id + " (no ground truth)");
    for (const auto& id : gt_ids)
      if (!std::binary_search(pred_ids.begin(), pred_ids.end(), id))
        missing.push_back(id + " (no prediction)");
    if (!missing.empty()) {
      std::string msg = "eval_report: unmatched ids for " + tdir + ":";
      for (const auto& m : missing) msg += " " + m;
      throw ValidationError(msg);
    }
    for (const auto& id : gt_ids) {
      Mask pred = imgio::load_mask((pred_dir / tdir / (id + ".png")).string(),
                                   tissue, id);
      Mask gt = imgio::load_mask((gt_dir / tdir / (id + ".png")).string(),
                                 tissue, id);
      records.push_back(evaluate_pair(pred, gt));
    }
  }
  require(any, "eval_report: no masks found under " + pred_dir.string());

  json report = {{"records", json::array()}, {"summary", json::object()}};
  for (const auto& r : records) report["records"].push_back(r.to_json());
  for (const Tissue tissue : {Tissue::SAT, Tissue::VAT}) {
    double d = 0, f = 0, n = 0, s = 0;
    std::size_t count = 0;
    for (const auto& r : records) {
      if (r.tissue != tissue) continue;
      d += r.dice;
      f += r.fdr;
      n += r.fnr;
      s += r.score;
      ++count;
    }
    if (!count) continue;
    const double dc = static_cast<double>(count);
    report["summary"][to_string(tissue)] = {{"n", count},
                                            {"dice", d / dc},
                                            {"fdr", f / dc},
                                            {"fnr", n / dc},
                                            {"score", s / dc}};
  }
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    if (!out) throw IoError("cannot write report: " + out_path);
    out << report.dump(2) << "\n";
  }
  return report;
}

}  // namespace xmodseg::metrics
