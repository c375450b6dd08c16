#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xmodseg/image.hpp"
#include "xmodseg/imgio.hpp"
#include "xmodseg/rng.hpp"

// Deterministic generator of paired pseudo-MR / pseudo-CT abdominal slices
// with ground-truth SAT/VAT masks.
//
// Anatomy per slice: an outer body ellipse with a thin skin band, a SAT ring
// between the skin and an inner muscle-wall ellipse, a posterior spine disk,
// 2-6 organ ellipses, and VAT as thresholded smooth random blobs confined to
// the cavity and outside organs. CT intensities are drawn per class from
// disjoint HU bands (noise is clipped at band edges so the bands stay exact);
// MR intensities use a separate mapping in which VAT and ORGAN deliberately
// overlap, then get multiplied by a smooth log-quadratic bias field.

namespace xmodseg::phantom {

namespace fs = std::filesystem;
using nlohmann::json;

enum class TissueClass : std::uint8_t {
  AIR = 0, SKIN, SAT, MUSCLE_WALL, VAT, ORGAN, BONE
};

struct Band {
  double lo, hi;
};

// Pre-noise HU bands, indexed by TissueClass. Classes are separable by
// construction; fat occupies [-190, -30] for both SAT and VAT.
inline constexpr Band kCtBand[7] = {
    {-1050.0, -950.0},  // AIR (base -1000)
    {10.0, 40.0},       // SKIN
    {-190.0, -30.0},    // SAT
    {20.0, 60.0},       // MUSCLE_WALL
    {-190.0, -30.0},    // VAT
    {40.0, 80.0},       // ORGAN
    {500.0, 900.0},     // BONE
};

// MR base intensity bands (arbitrary units, fat-saturated style: SAT dark).
// VAT [0.38,0.56] overlaps ORGAN [0.50,0.66] on purpose (the translator's
// designed failure mode). SKIN/MUSCLE/ORGAN sit close together so the body's
// dominant intensity surface is nearly flat in the log domain, which is what
// the bias corrector's robust fit assumes.
inline constexpr Band kMrBand[7] = {
    {0.0, 0.0},     // AIR (pure noise floor)
    {0.55, 0.68},   // SKIN
    {0.18, 0.32},   // SAT
    {0.55, 0.70},   // MUSCLE_WALL
    {0.42, 0.60},   // VAT
    {0.53, 0.68},   // ORGAN
    {0.78, 0.92},   // BONE
};

inline constexpr Band kFatHuBand = {-190.0, -30.0};
inline constexpr double kSpacingMm = 1.5;

struct PhantomParams {
  int size = 256;
  double sat_thickness_frac = 0.12;    // of body radius, [0, 0.2]
  int vat_blob_count = 6;
  double vat_area_frac_target = 0.08;  // |VAT| / |body|, [0, 0.3]
  double bias_amplitude = 0.25;        // half-range of the log bias field
  double noise_sigma = 0.01;           // relative to each modality's range
  double geometry_jitter = 1.0;        // scales all geometric jitters
  std::uint64_t seed = 0;

  void validate() const {
    require(size >= 64, "PhantomParams: size must be >= 64");
    require(sat_thickness_frac >= 0.0 && sat_thickness_frac <= 0.2,
            "PhantomParams: sat_thickness_frac outside [0, 0.2]");
    require(vat_blob_count >= 0, "PhantomParams: vat_blob_count < 0");
    require(vat_area_frac_target >= 0.0 && vat_area_frac_target <= 0.3,
            "PhantomParams: vat_area_frac_target outside [0, 0.3]");
    require(bias_amplitude >= 0.0, "PhantomParams: bias_amplitude < 0");
    require(noise_sigma >= 0.0, "PhantomParams: noise_sigma < 0");
    require(geometry_jitter >= 0.0, "PhantomParams: geometry_jitter < 0");
  }

  json to_json() const {
    return {{"size", size},
            {"sat_thickness_frac", sat_thickness_frac},
            {"vat_blob_count", vat_blob_count},
            {"vat_area_frac_target", vat_area_frac_target},
            {"bias_amplitude", bias_amplitude},
            {"noise_sigma", noise_sigma},
            {"geometry_jitter", geometry_jitter},
            {"seed", seed}};
  }

  static PhantomParams from_json(const json& j) {
    PhantomParams p;
    p.size = j.at("size").get<int>();
    p.sat_thickness_frac = j.at("sat_thickness_frac").get<double>();
    p.vat_blob_count = j.at("vat_blob_count").get<int>();
    p.vat_area_frac_target = j.at("vat_area_frac_target").get<double>();
    p.bias_amplitude = j.at("bias_amplitude").get<double>();
    p.noise_sigma = j.at("noise_sigma").get<double>();
    p.geometry_jitter = j.at("geometry_jitter").get<double>();
    p.seed = j.at("seed").get<std::uint64_t>();
    return p;
  }
};

struct PhantomSample {
  Slice mr;   // RAW, bias field and noise applied
  Slice ct;   // HU, noise clipped at class-band edges
  Mask sat;
  Mask vat;
  std::vector<TissueClass> tissue_map;  // row-major
  std::vector<std::uint8_t> cavity;     // 1 = strictly inside the muscle wall
  Image2D ct_prenoise;                  // HU before noise
  Image2D bias_field;                   // the true multiplicative MR bias
  double achieved_vat_frac = 0.0;
  bool vat_target_met = true;

  std::vector<std::uint8_t> body_mask() const {
    std::vector<std::uint8_t> b(tissue_map.size());
    for (std::size_t i = 0; i < b.size(); ++i)
      b[i] = tissue_map[i] != TissueClass::AIR;
    return b;
  }
};

namespace detail {

struct Ellipse {
  double cx, cy;      // pixel coords
  double rx, ry;      // semi-axes in pixels
  double theta;       // rotation

  // Normalized elliptical radius of a pixel (1.0 on the boundary).
  double rho(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double ct = std::cos(theta), st = std::sin(theta);
    const double u = (ct * dx + st * dy) / rx;
    const double v = (-st * dx + ct * dy) / ry;
    return std::sqrt(u * u + v * v);
  }
};

}  // namespace detail

/// Deterministic for (params.seed, index); see header comment for anatomy.
inline PhantomSample gen_sample(const PhantomParams& params, std::uint64_t index,
                                std::string_view seed_branch = "sample") {
  params.validate();
  const int n = params.size;
  Rng rng(derive_seed(params.seed, seed_branch, index));
  const double gj = params.geometry_jitter;

  // Body ellipse.
  detail::Ellipse body;
  body.cx = n * (0.5 + 0.04 * gj * rng.uniform(-1.0, 1.0));
  body.cy = n * (0.5 + 0.04 * gj * rng.uniform(-1.0, 1.0));
  body.rx = 0.5 * n * (0.82 + 0.08 * gj * rng.uniform(-1.0, 1.0));
  body.ry = 0.5 * n * (0.64 + 0.08 * gj * rng.uniform(-1.0, 1.0));
  body.theta = 0.12 * gj * rng.uniform(-1.0, 1.0);

  const double skin = 0.04;
  const double wall = 0.07;
  // Thin SAT rings are widened so the ring stays resolvable on the grid.
  double sat_t = params.sat_thickness_frac;
  if (sat_t > 0.0) sat_t = std::max(sat_t, 1.8 / std::min(body.rx, body.ry));
  const double wall_outer = 1.0 - skin - sat_t;
  const double wall_inner = wall_outer - wall;

  const std::size_t npx = static_cast<std::size_t>(n) * n;
  std::vector<TissueClass> cls(npx, TissueClass::AIR);
  std::vector<std::uint8_t> cavity(npx, 0);
  std::vector<double> rho(npx);
  std::size_t body_count = 0;
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * n + c;
      const double q = body.rho(c, r);
      rho[i] = q;
      if (q > 1.0) continue;
      ++body_count;
      if (q > 1.0 - skin)
        cls[i] = TissueClass::SKIN;
      else if (q > wall_outer)
        cls[i] = TissueClass::SAT;
      else if (q > wall_inner)
        cls[i] = TissueClass::MUSCLE_WALL;
      else {
        cls[i] = TissueClass::ORGAN;  // cavity background
        cavity[i] = 1;
      }
    }
  }

  // Spine disk, posterior inside the cavity.
  const double r_in = std::max(wall_inner, 0.05);
  detail::Ellipse spine;
  {
    const double su = 0.06 * gj * rng.uniform(-1.0, 1.0);
    const double sv = 0.60 * r_in + 0.05 * gj * rng.uniform(-1.0, 1.0);
    const double ct = std::cos(body.theta), st = std::sin(body.theta);
    spine.cx = body.cx + ct * su * body.rx - st * sv * body.ry;
    spine.cy = body.cy + st * su * body.rx + ct * sv * body.ry;
    const double rad =
        (0.13 + 0.02 * gj * rng.uniform(-1.0, 1.0)) * r_in * std::min(body.rx, body.ry);
    spine.rx = spine.ry = std::max(rad, 2.0);
    spine.theta = 0.0;
  }

  // Organ ellipses; they carve pixels out of VAT eligibility.
  std::vector<detail::Ellipse> organs;
  const int organ_count = rng.uniform_int(2, 6);
  for (int k = 0; k < organ_count; ++k) {
    double ou, ov;
    do {
      ou = rng.uniform(-0.62, 0.62);
      ov = rng.uniform(-0.62, 0.62);
    } while (ou * ou + ov * ov > 0.62 * 0.62);
    detail::Ellipse e;
    const double ct = std::cos(body.theta), st = std::sin(body.theta);
    e.cx = body.cx + ct * (ou * r_in * body.rx) - st * (ov * r_in * body.ry);
    e.cy = body.cy + st * (ou * r_in * body.rx) + ct * (ov * r_in * body.ry);
    const double scale = r_in * std::min(body.rx, body.ry);
    e.rx = std::max(rng.uniform(0.14, 0.34) * scale, 2.0);
    e.ry = std::max(rng.uniform(0.14, 0.34) * scale, 2.0);
    e.theta = rng.uniform(0.0, 3.14159265358979);
    organs.push_back(e);
  }

  std::vector<std::uint8_t> occupied(npx, 0);  // spine or organ
  for (std::size_t i = 0; i < npx; ++i) {
    if (!cavity[i]) continue;
    const int c = static_cast<int>(i % n), r = static_cast<int>(i / n);
    if (spine.rho(c, r) <= 1.0) {
      cls[i] = TissueClass::BONE;
      occupied[i] = 1;
      continue;
    }
    for (const auto& e : organs) {
      if (e.rho(c, r) <= 1.0) {
        occupied[i] = 1;
        break;
      }
    }
  }

  // VAT: smooth bump field, thresholded at the quantile matching the target
  // area, restricted to unoccupied cavity pixels.
  struct Bump {
    double cx, cy, sigma, amp;
  };
  std::vector<Bump> bumps;
  for (int k = 0; k < params.vat_blob_count; ++k) {
    double bu, bv;
    do {
      bu = rng.uniform(-0.8, 0.8);
      bv = rng.uniform(-0.8, 0.8);
    } while (bu * bu + bv * bv > 0.8 * 0.8);
    Bump b;
    const double ct = std::cos(body.theta), st = std::sin(body.theta);
    b.cx = body.cx + ct * (bu * r_in * body.rx) - st * (bv * r_in * body.ry);
    b.cy = body.cy + st * (bu * r_in * body.rx) + ct * (bv * r_in * body.ry);
    b.sigma = rng.uniform(0.10, 0.24) * r_in * std::min(body.rx, body.ry);
    b.amp = rng.uniform(0.5, 1.0);
    bumps.push_back(b);
  }
  std::size_t vat_count = 0;
  const std::size_t target_count = static_cast<std::size_t>(
      std::llround(params.vat_area_frac_target * static_cast<double>(body_count)));
  if (!bumps.empty() && target_count > 0) {
    std::vector<double> field(npx, 0.0);
    std::vector<double> eligible_vals;
    for (std::size_t i = 0; i < npx; ++i) {
      if (!cavity[i] || occupied[i]) continue;
      const double x = static_cast<double>(i % n), y = static_cast<double>(i / n);
      double f = 0.0;
      for (const auto& b : bumps) {
        const double dx = x - b.cx, dy = y - b.cy;
        f += b.amp * std::exp(-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma));
      }
      field[i] = f;
      if (f > 1e-9) eligible_vals.push_back(f);
    }
    double tau;
    if (eligible_vals.size() <= target_count) {
      tau = 1e-9;  // best effort: everything eligible becomes VAT
    } else {
      std::nth_element(eligible_vals.begin(),
                       eligible_vals.begin() + static_cast<std::ptrdiff_t>(target_count),
                       eligible_vals.end(), std::greater<double>());
      tau = std::max(eligible_vals[target_count], 1e-9);
    }
    for (std::size_t i = 0; i < npx; ++i) {
      if (!cavity[i] || occupied[i]) continue;
      if (field[i] > tau) {
        cls[i] = TissueClass::VAT;
        ++vat_count;
      }
    }
  }

  PhantomSample out;
  out.tissue_map = std::move(cls);
  out.cavity = std::move(cavity);
  out.achieved_vat_frac =
      body_count ? static_cast<double>(vat_count) / static_cast<double>(body_count) : 0.0;
  out.vat_target_met =
      params.vat_area_frac_target <= 0.0 || params.vat_blob_count == 0 ||
      out.achieved_vat_frac >= 0.8 * params.vat_area_frac_target;

  // CT: per-class uniform draw inside the band, then clipped Gaussian noise.
  out.ct_prenoise = Image2D(n, n);
  Image2D ct_noisy(n, n);
  const double sigma_ct = params.noise_sigma * 2000.0;
  for (std::size_t i = 0; i < npx; ++i) {
    const auto k = static_cast<std::size_t>(out.tissue_map[i]);
    const Band band = kCtBand[k];
    double v = out.tissue_map[i] == TissueClass::AIR
                   ? -1000.0
                   : rng.uniform(band.lo, band.hi);
    out.ct_prenoise[i] = v;
    if (sigma_ct > 0.0) v = std::clamp(v + rng.normal(0.0, sigma_ct), band.lo, band.hi);
    ct_noisy[i] = v;
  }

  // Bias field: exp of a random quadratic in normalized coords, scaled so the
  // log field spans +-bias_amplitude, then normalized to mean 1.
  out.bias_field = Image2D(n, n, 1.0);
  if (params.bias_amplitude > 0.0) {
    double coef[5];
    for (double& c : coef) c = rng.uniform(-1.0, 1.0);
    Image2D logb(n, n);
    double lo = 1e300, hi = -1e300;
    for (int r = 0; r < n; ++r) {
      const double y = 2.0 * r / (n - 1) - 1.0;
      for (int c = 0; c < n; ++c) {
        const double x = 2.0 * c / (n - 1) - 1.0;
        const double p =
            coef[0] * x + coef[1] * y + coef[2] * x * x + coef[3] * x * y + coef[4] * y * y;
        logb.at(r, c) = p;
        lo = std::min(lo, p);
        hi = std::max(hi, p);
      }
    }
    const double half_range = std::max((hi - lo) / 2.0, 1e-12);
    const double scale = params.bias_amplitude / half_range;
    const double mid = (hi + lo) / 2.0;
    double sum = 0.0;
    for (std::size_t i = 0; i < npx; ++i) {
      out.bias_field[i] = std::exp((logb[i] - mid) * scale);
      sum += out.bias_field[i];
    }
    const double mean = sum / static_cast<double>(npx);
    for (std::size_t i = 0; i < npx; ++i) out.bias_field[i] /= mean;
  }

  // MR: per-class base draw, times bias, plus noise (unclipped).
  Image2D mr(n, n);
  for (std::size_t i = 0; i < npx; ++i) {
    const auto k = static_cast<std::size_t>(out.tissue_map[i]);
    const Band band = kMrBand[k];
    double v = out.tissue_map[i] == TissueClass::AIR
                   ? 0.0
                   : rng.uniform(band.lo, band.hi);
    v *= out.bias_field[i];
    if (params.noise_sigma > 0.0) v += rng.normal(0.0, params.noise_sigma);
    mr[i] = std::max(v, 0.0);
  }

  const std::string id = "phantom-" + std::to_string(index);
  out.mr = Slice{std::move(mr), Modality::MR, IntensityKind::RAW,
                 kSpacingMm, kSpacingMm, id};
  out.ct = Slice{std::move(ct_noisy), Modality::CT, IntensityKind::HU,
                 kSpacingMm, kSpacingMm, id};
  out.sat = Mask(n, n, Tissue::SAT, id);
  out.vat = Mask(n, n, Tissue::VAT, id);
  for (std::size_t i = 0; i < npx; ++i) {
    out.sat.px[i] = out.tissue_map[i] == TissueClass::SAT;
    out.vat.px[i] = out.tissue_map[i] == TissueClass::VAT;
  }
  return out;
}

// ---- dataset generation ----------------------------------------------------

inline std::string pad_id(const std::string& prefix, std::uint64_t i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%05llu", static_cast<unsigned long long>(i));
  return prefix + buf;
}

namespace detail {

inline void write_sample(const PhantomSample& s, const fs::path& root,
                         const std::string& split, const std::string& id,
                         bool write_mr, bool write_ct) {
  if (write_mr) {
    Slice mr = s.mr;
    mr.id = id;
    imgio::save_slice(mr, imgio::slice_path(root, split, "mr", id).string());
  }
  if (write_ct) {
    Slice ct = s.ct;
    ct.id = id;
    imgio::save_slice(ct, imgio::slice_path(root, split, "ct", id).string());
  }
  Mask sat = s.sat;
  sat.id = id;
  Mask vat = s.vat;
  vat.id = id;
  imgio::save_mask(sat, imgio::mask_path(root, split, "sat", id).string());
  imgio::save_mask(vat, imgio::mask_path(root, split, "vat", id).string());
  imgio::save_binary(s.body_mask(), s.mr.height(), s.mr.width(),
                     imgio::mask_path(root, split, "body", id).string());
}

}  // namespace detail

/// Writes n samples under `root` in the standard layout with an 85/15
/// train/test split. With unpaired=true the train halves come from disjoint
/// seed branches (no MR train slice has a pixel-aligned CT partner) while the
/// test split stays paired for evaluation. Returns the manifest, also written
/// to <root>/manifest.json.
inline json gen_dataset(const PhantomParams& params, int count, bool unpaired,
                        const fs::path& root, bool overwrite = false) {
  params.validate();
  require(count >= 4, "gen_dataset: n must be >= 4");
  if (fs::exists(root) && !fs::is_empty(root)) {
    if (!overwrite)
      throw ValidationError("gen_dataset: output dir exists and is not empty: " +
                            root.string() + " (pass overwrite to replace)");
    fs::remove_all(root);
  }
  const int n_test = static_cast<int>(std::ceil(0.15 * count));
  const int n_train = count - n_test;

  for (const std::string split : {"train", "test"}) {
    fs::create_directories(root / split / "mr");
    fs::create_directories(root / split / "ct");
    for (const std::string t : {"sat", "vat", "body"})
      fs::create_directories(root / split / "masks" / t);
  }

  std::vector<std::string> train_ids, test_ids;
  double vat_frac_sum = 0.0;
  std::size_t vat_frac_n = 0;
  int shortfall = 0;

  auto account = [&](const PhantomSample& s) {
    vat_frac_sum += s.achieved_vat_frac;
    ++vat_frac_n;
    if (!s.vat_target_met) ++shortfall;
  };

  if (!unpaired) {
    for (int i = 0; i < count; ++i) {
      auto s = gen_sample(params, static_cast<std::uint64_t>(i), "paired");
      account(s);
      const bool is_train = i < n_train;
      const std::string id = pad_id("s", static_cast<std::uint64_t>(i));
      detail::write_sample(s, root, is_train ? "train" : "test", id, true, true);
      (is_train ? train_ids : test_ids).push_back(id);
    }
  } else {
    for (int i = 0; i < n_train; ++i) {
      auto s = gen_sample(params, static_cast<std::uint64_t>(i), "mr");
      account(s);
      const std::string id = pad_id("mr", static_cast<std::uint64_t>(i));
      detail::write_sample(s, root, "train", id, true, false);
      train_ids.push_back(id);
    }
    for (int i = 0; i < n_train; ++i) {
      auto s = gen_sample(params, static_cast<std::uint64_t>(i), "ct");
      account(s);
      const std::string id = pad_id("ct", static_cast<std::uint64_t>(i));
      detail::write_sample(s, root, "train", id, false, true);
      train_ids.push_back(id);
    }
    for (int i = 0; i < n_test; ++i) {
      auto s = gen_sample(params, static_cast<std::uint64_t>(i), "test");
      account(s);
      const std::string id = pad_id("s", static_cast<std::uint64_t>(i));
      detail::write_sample(s, root, "test", id, true, true);
      test_ids.push_back(id);
    }
  }

  if (shortfall > 0)
    std::fprintf(stderr,
                 "warning: vat_area_frac_target unreachable for %d of %zu samples "
                 "(best effort; see achieved_vat_frac)\n",
                 shortfall, vat_frac_n);

  json manifest = {
      {"format_version", 1},
      {"splits", {{"train", train_ids}, {"test", test_ids}}},
      {"unpaired", unpaired},
      {"n", count},
      {"params", params.to_json()},
      {"achieved_vat_frac", vat_frac_n ? vat_frac_sum / vat_frac_n : 0.0},
  };
  std::ofstream out(root / "manifest.json");
  if (!out) throw IoError("cannot write manifest: " + (root / "manifest.json").string());
  out << manifest.dump(2) << "\n";
  return manifest;
}

}  // namespace xmodseg::phantom
