#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "xmodseg/image.hpp"

// MR bias correction and intensity standardization; CT HU windowing.
//
// Bias correction fits a 2-D quadratic polynomial to log intensities over the
// body region (one-shot least squares), divides it out, and restores the body
// median. Standardization is landmark-based: per-slice percentile landmarks
// are mapped onto a cohort standard scale by a piecewise-linear transform.

namespace xmodseg::preprocess {

using nlohmann::json;

/// Percentiles used as landmarks: 1, 10, 20, ..., 90, 99.
inline constexpr std::array<double, 11> kLandmarkPercentiles = {
    1, 10, 20, 30, 40, 50, 60, 70, 80, 90, 99};

inline constexpr double kStandardMin = 0.0;
inline constexpr double kStandardMax = 1000.0;

// The landmark span is mapped inside the standard range with headroom so the
// final clamp at [s_min, s_max] never truncates body pixels: everything below
// the body's 1st percentile (air, background) lands at exactly s_min, while
// body values keep a strictly positive margin. This is what makes repeated
// standardization a fixpoint.
inline constexpr double kLandmarkLo = 50.0;
inline constexpr double kLandmarkHi = 950.0;

struct StandardScale {
  std::vector<double> landmarks_std;  // ascending, within [s_min, s_max]
  double s_min = kStandardMin;
  double s_max = kStandardMax;

  void validate() const {
    require(landmarks_std.size() == kLandmarkPercentiles.size(),
            "StandardScale: wrong landmark count");
    for (std::size_t i = 0; i + 1 < landmarks_std.size(); ++i)
      require(landmarks_std[i] < landmarks_std[i + 1],
              "StandardScale: landmarks not strictly increasing");
    require(landmarks_std.front() >= s_min && landmarks_std.back() <= s_max,
            "StandardScale: landmarks outside range");
  }

  json to_json() const {
    return {{"format_version", 1},
            {"percentiles", kLandmarkPercentiles},
            {"landmarks_std", landmarks_std},
            {"range", {s_min, s_max}}};
  }

  static StandardScale from_json(const json& j) {
    StandardScale s;
    s.landmarks_std = j.at("landmarks_std").get<std::vector<double>>();
    s.s_min = j.at("range").at(0).get<double>();
    s.s_max = j.at("range").at(1).get<double>();
    s.validate();
    return s;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write scale file: " + path);
    out << to_json().dump(2) << "\n";
  }

  static StandardScale load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read scale file: " + path);
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw FormatError("bad scale file " + path + ": " + e.what());
    }
    return from_json(j);
  }
};

struct HuWindow {
  double lo = -700.0;
  double hi = 1300.0;
  void validate() const { require(lo < hi, "HuWindow: lo must be < hi"); }
};

// ---- body region -----------------------------------------------------------

/// Linear-interpolation percentile of an unsorted copy, p in [0, 100].
inline double percentile_of(std::vector<double> vals, double p) {
  require(!vals.empty(), "percentile of empty set");
  std::sort(vals.begin(), vals.end());
  if (vals.size() == 1) return vals[0];
  const double idx = p / 100.0 * static_cast<double>(vals.size() - 1);
  const auto lo = static_cast<std::size_t>(idx);
  if (lo + 1 >= vals.size()) return vals.back();
  const double frac = idx - static_cast<double>(lo);
  return vals[lo] + frac * (vals[lo + 1] - vals[lo]);
}

/// Background-exclusion rule, per intensity kind:
///  - RAW / HU:      strictly positive pixels at or above 6% of the positive
///                   99th percentile (air noise sits well below, tissue above);
///                   HU values are shifted by +1000 first so air is negative.
///  - STANDARDIZED:  strictly positive pixels (standardization clamps
///                   everything below the body's 1st percentile to s_min = 0).
///  - NORM01:        pixels >= 0.04 (the HU window sends air to exactly 0).
inline std::vector<std::uint8_t> body_region(const Slice& slice) {
  const auto& px = slice.pixels;
  std::vector<std::uint8_t> body(px.size(), 0);
  switch (slice.intensity_kind) {
    case IntensityKind::STANDARDIZED:
      for (std::size_t i = 0; i < px.size(); ++i) body[i] = px[i] > 0.0;
      return body;
    case IntensityKind::NORM01:
      for (std::size_t i = 0; i < px.size(); ++i) body[i] = px[i] >= 0.04;
      return body;
    default: {
      const double shift = slice.intensity_kind == IntensityKind::HU ? 1000.0 : 0.0;
      std::vector<double> pos;
      pos.reserve(px.size());
      for (double v : px.data())
        if (v + shift > 0.0) pos.push_back(v + shift);
      if (pos.empty()) return body;
      const double t = 0.06 * percentile_of(std::move(pos), 99.0);
      for (std::size_t i = 0; i < body.size(); ++i)
        body[i] = px[i] + shift > 0.0 && px[i] + shift >= t;
      return body;
    }
  }
}

// ---- percentiles and landmarks ---------------------------------------------

/// Linear-interpolation percentile of a sorted vector, p in [0, 100].
inline double percentile_sorted(const std::vector<double>& sorted, double p) {
  require(!sorted.empty(), "percentile of empty set");
  if (sorted.size() == 1) return sorted[0];
  const double idx = p / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(idx);
  if (lo + 1 >= sorted.size()) return sorted.back();
  const double frac = idx - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

inline std::vector<double> body_values(const Slice& slice,
                                       const std::vector<std::uint8_t>& body) {
  std::vector<double> vals;
  for (std::size_t i = 0; i < body.size(); ++i)
    if (body[i]) vals.push_back(slice.pixels[i]);
  return vals;
}

/// The slice's own landmark values at kLandmarkPercentiles (body region).
inline std::vector<double> landmarks(const Slice& slice) {
  auto vals = body_values(slice, body_region(slice));
  require(vals.size() >= 100, "landmarks: fewer than 100 body pixels");
  std::sort(vals.begin(), vals.end());
  std::vector<double> lm;
  lm.reserve(kLandmarkPercentiles.size());
  for (double p : kLandmarkPercentiles) lm.push_back(percentile_sorted(vals, p));
  return lm;
}

// ---- operations -------------------------------------------------------------

/// Removes the low-frequency multiplicative bias from an MR slice: fits a
/// quadratic to log intensities over the body (robust IRLS so dark fat and
/// bright bone do not drag the surface), divides it out everywhere, and
/// rescales so the body median is unchanged.
inline Slice bias_correct(const Slice& slice) {
  slice.validate();
  require(slice.modality == Modality::MR &&
              slice.intensity_kind == IntensityKind::RAW,
          "bias_correct expects an MR/RAW slice");
  const auto body = body_region(slice);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < body.size(); ++i)
    if (body[i] && slice.pixels[i] > 0.0) idx.push_back(i);
  require(idx.size() >= 6,
          "bias_correct: fewer than 6 body pixels (quadratic underdetermined)");

  const int h = slice.height(), w = slice.width();
  auto norm_x = [&](std::size_t i) {
    return 2.0 * static_cast<double>(i % w) / (w - 1) - 1.0;
  };
  auto norm_y = [&](std::size_t i) {
    return 2.0 * static_cast<double>(i / w) / (h - 1) - 1.0;
  };

  std::vector<double> logv(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k)
    logv[k] = std::log(slice.pixels[idx[k]]);

  auto fit_weighted = [&](const std::vector<double>& wts) {
    Eigen::Matrix<double, 6, 6> ata = Eigen::Matrix<double, 6, 6>::Zero();
    Eigen::Matrix<double, 6, 1> atb = Eigen::Matrix<double, 6, 1>::Zero();
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (wts[k] <= 0.0) continue;
      const double x = norm_x(idx[k]), y = norm_y(idx[k]);
      Eigen::Matrix<double, 6, 1> row;
      row << 1.0, x, y, x * x, x * y, y * y;
      ata.noalias() += wts[k] * row * row.transpose();
      atb.noalias() += wts[k] * row * logv[k];
    }
    return Eigen::Matrix<double, 6, 1>(ata.ldlt().solve(atb));
  };
  auto eval_fit = [&](const Eigen::Matrix<double, 6, 1>& c, std::size_t i) {
    const double x = norm_x(i), y = norm_y(i);
    return c[0] + c[1] * x + c[2] * y + c[3] * x * x + c[4] * x * y + c[5] * y * y;
  };

  // Tukey IRLS with a shrinking cutoff: early rounds reject far outliers
  // (fat, bone), later rounds lock the surface onto the dominant tissue mode.
  // Seeded from the mid-rank intensity band so the dark fat ring cannot tilt
  // the initial surface into a bad local minimum.
  std::vector<double> wts(idx.size(), 1.0);
  {
    const double lo = percentile_of(logv, 35.0);
    const double hi = percentile_of(logv, 92.0);
    if (hi > lo) {
      for (std::size_t k = 0; k < idx.size(); ++k)
        wts[k] = (logv[k] >= lo && logv[k] <= hi) ? 1.0 : 0.0;
    }
  }
  Eigen::Matrix<double, 6, 1> coef = fit_weighted(wts);
  for (const double cfac : {4.0, 3.0, 2.2, 1.6, 1.2, 1.2}) {
    std::vector<double> resid(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k)
      resid[k] = logv[k] - eval_fit(coef, idx[k]);
    const double med = percentile_of(resid, 50.0);
    std::vector<double> dev(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) dev[k] = std::abs(resid[k] - med);
    const double mad = percentile_of(dev, 50.0) * 1.4826;
    if (mad < 1e-9) break;  // already an exact fit (flat image)
    const double c = cfac * mad;
    double wsum = 0.0;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const double r = (resid[k] - med) / c;
      wts[k] = std::abs(r) < 1.0 ? (1.0 - r * r) * (1.0 - r * r) : 0.0;
      wsum += wts[k];
    }
    if (wsum < 6.0) break;
    coef = fit_weighted(wts);
  }

  Slice out = slice;
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    const double x = norm_x(i), y = norm_y(i);
    const double fit =
        coef[0] + coef[1] * x + coef[2] * y + coef[3] * x * x + coef[4] * x * y +
        coef[5] * y * y;
    out.pixels[i] = slice.pixels[i] / std::exp(fit);
  }

  auto median_of = [&](const Image2D& img) {
    std::vector<double> vals;
    vals.reserve(idx.size());
    for (std::size_t i : idx) vals.push_back(img[i]);
    std::sort(vals.begin(), vals.end());
    const std::size_t n = vals.size();
    return n % 2 ? vals[n / 2] : 0.5 * (vals[n / 2 - 1] + vals[n / 2]);
  };
  const double m_in = median_of(slice.pixels);
  const double m_out = median_of(out.pixels);
  require(m_out > 0.0, "bias_correct: degenerate body median");
  const double rescale = m_in / m_out;
  for (std::size_t i = 0; i < out.pixels.size(); ++i) out.pixels[i] *= rescale;
  return out;
}

/// Cohort fit: per-slice landmarks are affinely mapped by their own 1st/99th
/// percentiles onto [kLandmarkLo, kLandmarkHi] (inside the [0, 1000] standard
/// range), then averaged across slices.
inline StandardScale fit_standard_scale(const std::vector<Slice>& slices) {
  require(slices.size() >= 2, "fit_standard_scale: need at least 2 slices");
  StandardScale scale;
  scale.landmarks_std.assign(kLandmarkPercentiles.size(), 0.0);
  for (const auto& s : slices) {
    require(s.modality == Modality::MR, "fit_standard_scale: expects MR slices");
    const auto lm = landmarks(s);
    const double span = lm.back() - lm.front();
    require(span > 0.0, "fit_standard_scale: degenerate slice landmarks");
    for (std::size_t i = 0; i < lm.size(); ++i)
      scale.landmarks_std[i] += (lm[i] - lm.front()) / span *
                                    (kLandmarkHi - kLandmarkLo) +
                                kLandmarkLo;
  }
  for (double& v : scale.landmarks_std) v /= static_cast<double>(slices.size());
  scale.validate();
  return scale;
}

/// Piecewise-linear map sending the slice's landmarks onto the standard ones;
/// end segments extend linearly, result clamped to [s_min, s_max].
inline Slice standardize(const Slice& slice, const StandardScale& scale) {
  slice.validate();
  scale.validate();
  require(slice.modality == Modality::MR, "standardize expects an MR slice");
  const auto lm = landmarks(slice);
  require(lm.back() > lm.front(),
          "standardize: degenerate landmarks (all body pixels equal)");
  const auto& sm = scale.landmarks_std;
  const std::size_t nseg = lm.size() - 1;

  auto map_value = [&](double v) {
    std::size_t i;
    if (v <= lm.front())
      i = 0;
    else if (v >= lm.back())
      i = nseg - 1;
    else {
      i = static_cast<std::size_t>(
              std::upper_bound(lm.begin(), lm.end(), v) - lm.begin()) - 1;
      i = std::min(i, nseg - 1);
    }
    const double den = lm[i + 1] - lm[i];
    const double y = den > 0.0
                         ? sm[i] + (v - lm[i]) * (sm[i + 1] - sm[i]) / den
                         : sm[i];
    return std::clamp(y, scale.s_min, scale.s_max);
  };

  Slice out = slice;
  for (std::size_t i = 0; i < out.pixels.size(); ++i)
    out.pixels[i] = map_value(slice.pixels[i]);
  out.intensity_kind = IntensityKind::STANDARDIZED;
  return out;
}

/// Clamps HU to the window and maps it affinely onto [0, 1].
inline Slice hu_window(const Slice& slice, const HuWindow& w = {}) {
  slice.validate();
  w.validate();
  require(slice.intensity_kind == IntensityKind::HU,
          "hu_window expects an HU slice");
  Slice out = slice;
  const double range = w.hi - w.lo;
  for (std::size_t i = 0; i < out.pixels.size(); ++i)
    out.pixels[i] = (std::clamp(slice.pixels[i], w.lo, w.hi) - w.lo) / range;
  out.intensity_kind = IntensityKind::NORM01;
  return out;
}

// Preprocessing fingerprints recorded in checkpoints so training and
// inference provably apply the same chain.
inline std::string fingerprint_mr() {
  return "mr:bias_correct+standardize[0,1000]";
}

inline std::string fingerprint_ct(const HuWindow& w = {}) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "ct:hu_window[%g,%g]->[0,1]", w.lo, w.hi);
  return buf;
}

}  // namespace xmodseg::preprocess
