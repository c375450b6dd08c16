#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "xmodseg/error.hpp"

namespace xmodseg {

enum class Modality { MR, CT, SCT };
enum class IntensityKind { RAW, HU, NORM01, STANDARDIZED };
enum class Tissue { SAT, VAT };

inline const char* to_string(Modality m) {
  switch (m) {
    case Modality::MR: return "MR";
    case Modality::CT: return "CT";
    case Modality::SCT: return "SCT";
  }
  return "?";
}

inline const char* to_string(IntensityKind k) {
  switch (k) {
    case IntensityKind::RAW: return "RAW";
    case IntensityKind::HU: return "HU";
    case IntensityKind::NORM01: return "NORM01";
    case IntensityKind::STANDARDIZED: return "STANDARDIZED";
  }
  return "?";
}

inline const char* to_string(Tissue t) {
  return t == Tissue::SAT ? "sat" : "vat";
}

inline Modality modality_from_string(const std::string& s) {
  if (s == "MR") return Modality::MR;
  if (s == "CT") return Modality::CT;
  if (s == "SCT") return Modality::SCT;
  throw FormatError("unknown modality: " + s);
}

inline IntensityKind intensity_kind_from_string(const std::string& s) {
  if (s == "RAW") return IntensityKind::RAW;
  if (s == "HU") return IntensityKind::HU;
  if (s == "NORM01") return IntensityKind::NORM01;
  if (s == "STANDARDIZED") return IntensityKind::STANDARDIZED;
  throw FormatError("unknown intensity kind: " + s);
}

inline Tissue tissue_from_string(const std::string& s) {
  if (s == "sat") return Tissue::SAT;
  if (s == "vat") return Tissue::VAT;
  throw FormatError("unknown tissue: " + s);
}

/// Row-major 2-D grid of doubles.
class Image2D {
 public:
  Image2D() = default;
  Image2D(int height, int width, double fill = 0.0)
      : h_(height), w_(width), px_(static_cast<std::size_t>(height) * width, fill) {
    require(height > 0 && width > 0, "Image2D: non-positive dimensions");
  }

  int height() const { return h_; }
  int width() const { return w_; }
  std::size_t size() const { return px_.size(); }

  double& at(int r, int c) { return px_[static_cast<std::size_t>(r) * w_ + c]; }
  double at(int r, int c) const { return px_[static_cast<std::size_t>(r) * w_ + c]; }
  double& operator[](std::size_t i) { return px_[i]; }
  double operator[](std::size_t i) const { return px_[i]; }

  std::vector<double>& data() { return px_; }
  const std::vector<double>& data() const { return px_; }

  bool same_shape(const Image2D& o) const { return h_ == o.h_ && w_ == o.w_; }

  bool all_finite() const {
    for (double v : px_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::pair<double, double> min_max() const {
    double lo = px_.empty() ? 0.0 : px_[0], hi = lo;
    for (double v : px_) {
      if (v < lo) lo = v;
      if (v > hi) hi = v;
    }
    return {lo, hi};
  }

 private:
  int h_ = 0, w_ = 0;
  std::vector<double> px_;
};

/// One 2-D grayscale slice with modality and intensity semantics.
struct Slice {
  Image2D pixels;
  Modality modality = Modality::MR;
  IntensityKind intensity_kind = IntensityKind::RAW;
  double spacing_row_mm = 1.5;
  double spacing_col_mm = 1.5;
  std::string id;

  int height() const { return pixels.height(); }
  int width() const { return pixels.width(); }

  void validate() const {
    require(pixels.height() >= 16 && pixels.width() >= 16,
            "Slice '" + id + "': dimensions must be >= 16x16");
    require(spacing_row_mm > 0 && spacing_col_mm > 0,
            "Slice '" + id + "': spacing must be positive");
    require(pixels.all_finite(), "Slice '" + id + "': non-finite pixels");
    if (intensity_kind == IntensityKind::NORM01) {
      auto [lo, hi] = pixels.min_max();
      require(lo >= 0.0 && hi <= 1.0,
              "Slice '" + id + "': NORM01 pixels outside [0,1]");
    }
    if (intensity_kind == IntensityKind::HU) {
      require(modality == Modality::CT || modality == Modality::SCT,
              "Slice '" + id + "': HU intensities require CT/SCT modality");
    }
  }
};

/// Binary per-pixel label map for one tissue class.
struct Mask {
  int h = 0, w = 0;
  std::vector<std::uint8_t> px;  // strictly 0/1
  Tissue tissue = Tissue::SAT;
  std::string id;

  Mask() = default;
  Mask(int height, int width, Tissue t, std::string mask_id = {})
      : h(height), w(width),
        px(static_cast<std::size_t>(height) * width, 0),
        tissue(t), id(std::move(mask_id)) {}

  int height() const { return h; }
  int width() const { return w; }

  std::uint8_t& at(int r, int c) { return px[static_cast<std::size_t>(r) * w + c]; }
  std::uint8_t at(int r, int c) const { return px[static_cast<std::size_t>(r) * w + c]; }

  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : px) n += v;
    return n;
  }

  bool same_shape(const Mask& o) const { return h == o.h && w == o.w; }
  bool matches(const Slice& s) const {
    return h == s.height() && w == s.width();
  }

  void validate() const {
    for (auto v : px)
      require(v == 0 || v == 1, "Mask '" + id + "': non-binary value");
  }
};

}  // namespace xmodseg
