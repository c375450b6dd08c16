#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xmodseg/image.hpp"
#include "xmodseg/png_io.hpp"

// Slice/mask persistence and overlay rendering.
//
// A slice is stored as a 16-bit grayscale PNG plus a JSON sidecar
// `<path>.json` holding modality, intensity kind, spacing, and the affine
// min/max used for quantization, so any intensity range (including HU)
// survives a round trip within one quantization step.
//
// Dataset layout, shared by every producer/consumer in the project:
//   <root>/<split>/<modality>/<id>.png     modality in {mr, ct, sct}
//   <root>/<split>/masks/<tissue>/<id>.png tissue in {sat, vat, body}

namespace xmodseg::imgio {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kSidecarVersion = 1;

inline std::string sidecar_path(const std::string& path) { return path + ".json"; }

inline void save_slice(const Slice& slice, const std::string& path) {
  slice.validate();
  auto [lo, hi] = slice.pixels.min_max();
  const double range = hi - lo;
  const int h = slice.height(), w = slice.width();
  std::vector<std::uint16_t> q(static_cast<std::size_t>(h) * w);
  if (range > 0) {
    const double scale = 65535.0 / range;
    for (std::size_t i = 0; i < q.size(); ++i)
      q[i] = static_cast<std::uint16_t>(
          std::lround((slice.pixels[i] - lo) * scale));
  }
  pngio::write_gray16(path, h, w, q);

  json meta = {
      {"format_version", kSidecarVersion},
      {"id", slice.id},
      {"modality", to_string(slice.modality)},
      {"intensity_kind", to_string(slice.intensity_kind)},
      {"spacing_mm", {slice.spacing_row_mm, slice.spacing_col_mm}},
      {"height", h},
      {"width", w},
      {"qmin", lo},
      {"qmax", hi},
  };
  std::ofstream out(sidecar_path(path));
  if (!out) throw IoError("cannot write sidecar: " + sidecar_path(path));
  out << meta.dump(2) << "\n";
  if (!out.good()) throw IoError("sidecar write failed: " + sidecar_path(path));
}

inline Slice load_slice(const std::string& path) {
  std::ifstream in(sidecar_path(path));
  if (!in) throw FormatError("missing sidecar: " + sidecar_path(path));
  json meta;
  try {
    in >> meta;
  } catch (const json::exception& e) {
    throw FormatError("bad sidecar " + sidecar_path(path) + ": " + e.what());
  }

  pngio::Gray16 img = pngio::read_gray16(path);
  Slice s;
  try {
    s.id = meta.at("id").get<std::string>();
    s.modality = modality_from_string(meta.at("modality").get<std::string>());
    s.intensity_kind =
        intensity_kind_from_string(meta.at("intensity_kind").get<std::string>());
    s.spacing_row_mm = meta.at("spacing_mm").at(0).get<double>();
    s.spacing_col_mm = meta.at("spacing_mm").at(1).get<double>();
    if (meta.at("height").get<int>() != img.h ||
        meta.at("width").get<int>() != img.w)
      throw FormatError("sidecar/PNG shape mismatch: " + path);
    const double lo = meta.at("qmin").get<double>();
    const double hi = meta.at("qmax").get<double>();
    s.pixels = Image2D(img.h, img.w);
    const double step = (hi - lo) / 65535.0;
    for (std::size_t i = 0; i < s.pixels.size(); ++i)
      s.pixels[i] = lo + img.px[i] * step;
  } catch (const json::exception& e) {
    throw FormatError("bad sidecar " + sidecar_path(path) + ": " + e.what());
  }
  s.validate();
  return s;
}

inline void save_mask(const Mask& mask, const std::string& path) {
  mask.validate();
  std::vector<std::uint8_t> bytes(mask.px.size());
  for (std::size_t i = 0; i < bytes.size(); ++i)
    bytes[i] = mask.px[i] ? 255 : 0;
  pngio::write_gray8(path, mask.h, mask.w, bytes);
}

inline Mask load_mask(const std::string& path, Tissue tissue,
                      std::string id = {}) {
  pngio::Gray8 img = pngio::read_gray8(path);
  Mask m(img.h, img.w, tissue, std::move(id));
  for (std::size_t i = 0; i < img.px.size(); ++i) {
    if (img.px[i] == 0)
      m.px[i] = 0;
    else if (img.px[i] == 255)
      m.px[i] = 1;
    else
      throw FormatError("mask PNG has non-binary value: " + path);
  }
  return m;
}

/// Binary image without tissue semantics (body masks, scratch maps).
inline void save_binary(const std::vector<std::uint8_t>& px, int h, int w,
                        const std::string& path) {
  std::vector<std::uint8_t> bytes(px.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = px[i] ? 255 : 0;
  pngio::write_gray8(path, h, w, bytes);
}

inline std::vector<std::uint8_t> load_binary(const std::string& path) {
  pngio::Gray8 img = pngio::read_gray8(path);
  std::vector<std::uint8_t> px(img.px.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    if (img.px[i] == 0)
      px[i] = 0;
    else if (img.px[i] == 255)
      px[i] = 1;
    else
      throw FormatError("mask PNG has non-binary value: " + path);
  }
  return px;
}

// Overlay tints (RGB). VAT is drawn over SAT where predictions overlap.
inline constexpr std::uint8_t kSatTint[3] = {255, 0, 0};
inline constexpr std::uint8_t kVatTint[3] = {0, 160, 255};

inline void render_overlay(const Slice& slice, const Mask* sat, const Mask* vat,
                           const std::string& path) {
  if (sat) require(sat->matches(slice), "render_overlay: SAT mask shape mismatch");
  if (vat) require(vat->matches(slice), "render_overlay: VAT mask shape mismatch");
  const int h = slice.height(), w = slice.width();
  auto [lo, hi] = slice.pixels.min_max();
  const double range = hi - lo;
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(h) * w * 3);
  for (std::size_t i = 0; i < slice.pixels.size(); ++i) {
    const double g01 = range > 0 ? (slice.pixels[i] - lo) / range : 0.0;
    const double base = g01 * 255.0;
    double r = base, g = base, b = base;
    if (sat && sat->px[i]) {
      r = 0.5 * base + 0.5 * kSatTint[0];
      g = 0.5 * base + 0.5 * kSatTint[1];
      b = 0.5 * base + 0.5 * kSatTint[2];
    }
    if (vat && vat->px[i]) {
      r = 0.5 * base + 0.5 * kVatTint[0];
      g = 0.5 * base + 0.5 * kVatTint[1];
      b = 0.5 * base + 0.5 * kVatTint[2];
    }
    rgb[i * 3 + 0] = static_cast<std::uint8_t>(std::lround(r));
    rgb[i * 3 + 1] = static_cast<std::uint8_t>(std::lround(g));
    rgb[i * 3 + 2] = static_cast<std::uint8_t>(std::lround(b));
  }
  pngio::write_rgb8(path, h, w, rgb);
}

// ---- dataset layout -------------------------------------------------------

inline fs::path slice_path(const fs::path& root, const std::string& split,
                           const std::string& modality_dir, const std::string& id) {
  return root / split / modality_dir / (id + ".png");
}

inline fs::path mask_path(const fs::path& root, const std::string& split,
                          const std::string& tissue_dir, const std::string& id) {
  return root / split / "masks" / tissue_dir / (id + ".png");
}

/// Sorted ids of all `<id>.png` files directly inside `dir`.
inline std::vector<std::string> list_ids(const fs::path& dir) {
  std::vector<std::string> ids;
  if (!fs::exists(dir)) return ids;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    auto p = e.path();
    if (p.extension() == ".png") ids.push_back(p.stem().string());
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

}  // namespace xmodseg::imgio
