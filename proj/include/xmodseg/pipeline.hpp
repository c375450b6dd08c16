#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "xmodseg/metrics.hpp"
#include "xmodseg/phantom.hpp"
#include "xmodseg/preprocess.hpp"
#include "xmodseg/segment.hpp"
#include "xmodseg/translate.hpp"

// End-to-end inference: bias correction -> standardization -> MR-to-sCT
// translation -> SAT/VAT segmentation -> label transfer back to the MR grid.
// Label transfer is the identity on pixel coordinates: no stage resamples,
// so a mask computed on the synthetic CT indexes the source MR directly.

namespace xmodseg::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

struct PipelineConfig {
  std::string cgan_ckpt;
  std::string sat_ckpt;
  std::string vat_ckpt;
  std::string standard_scale;
  preprocess::HuWindow hu_window{};
  fs::path output_dir;
  std::uint64_t seed = 0;
};

struct LoadedPipeline {
  PipelineConfig cfg;
  translate::TranslationModel<float> cgan;
  segment::SegmentationModel sat;
  segment::SegmentationModel vat;
  preprocess::StandardScale scale;
};

namespace detail {

template <typename Fn>
auto with_stage(const char* stage, Fn&& fn) {
  try {
    return fn();
  } catch (const ValidationError& e) {
    throw ValidationError(std::string(stage) + ": " + e.what());
  } catch (const FormatError& e) {
    throw FormatError(std::string(stage) + ": " + e.what());
  } catch (const IoError& e) {
    throw IoError(std::string(stage) + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(stage) + ": " + e.what());
  }
}

inline std::uint64_t fnv1a64_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot checksum: " + path.string());
  std::uint64_t h = 14695981039346656037ull;
  char buf[8192];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<std::uint8_t>(buf[i]);
      h *= 1099511628211ull;
    }
    if (!in) break;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace detail

/// Loads and cross-checks every artifact named in the config. Fingerprint
/// mismatches (training preprocessing != the chain this pipeline applies)
/// fail here, before any inference work starts.
inline LoadedPipeline load_pipeline(const PipelineConfig& cfg) {
  for (const auto& [name, path] :
       std::initializer_list<std::pair<const char*, const std::string*>>{
           {"cgan checkpoint", &cfg.cgan_ckpt},
           {"sat checkpoint", &cfg.sat_ckpt},
           {"vat checkpoint", &cfg.vat_ckpt},
           {"standard scale", &cfg.standard_scale}}) {
    if (!fs::exists(*path))
      throw ConfigError(std::string(name) + " not found: " + *path);
  }
  cfg.hu_window.validate();

  LoadedPipeline p;
  p.cfg = cfg;
  p.cgan = translate::load_cgan<float>(cfg.cgan_ckpt);
  p.sat = segment::load_unet(cfg.sat_ckpt);
  p.vat = segment::load_unet(cfg.vat_ckpt);
  p.scale = preprocess::StandardScale::load(cfg.standard_scale);

  if (p.sat.cfg.tissue != Tissue::SAT)
    throw ConfigError("sat checkpoint holds a " +
                      std::string(to_string(p.sat.cfg.tissue)) + " model");
  if (p.vat.cfg.tissue != Tissue::VAT)
    throw ConfigError("vat checkpoint holds a " +
                      std::string(to_string(p.vat.cfg.tissue)) + " model");

  const std::string want_mr = preprocess::fingerprint_mr();
  const std::string want_ct = preprocess::fingerprint_ct(cfg.hu_window);
  auto check = [&](const json& meta, const char* key, const std::string& want,
                   const std::string& who) {
    if (meta.contains(key) && meta.at(key).get<std::string>() != want)
      throw ConfigError(who + " was trained with preprocessing '" +
                        meta.at(key).get<std::string>() +
                        "' but this run applies '" + want + "'");
  };
  check(p.cgan.meta, "preproc_mr", want_mr, "cgan checkpoint");
  check(p.cgan.meta, "preproc_ct", want_ct, "cgan checkpoint");
  check(p.sat.net.meta, "preproc_ct", want_ct, "sat checkpoint");
  check(p.vat.net.meta, "preproc_ct", want_ct, "vat checkpoint");
  return p;
}

struct InferResult {
  Slice sct;
  Mask sat;
  Mask vat;
};

/// Full single-slice inference; writes s-CT, both masks and the MR overlay
/// under output_dir. The returned masks are the MR slice's labels.
inline InferResult infer_slice(const LoadedPipeline& p, const std::string& mr_path) {
  Slice mr = detail::with_stage("load_mr", [&] { return imgio::load_slice(mr_path); });
  require(mr.modality == Modality::MR, "infer_slice: not an MR slice: " + mr_path);

  Slice corrected =
      detail::with_stage("bias_correct", [&] { return preprocess::bias_correct(mr); });
  Slice standardized = detail::with_stage(
      "standardize", [&] { return preprocess::standardize(corrected, p.scale); });
  Slice sct = detail::with_stage("translate", [&] {
    return translate::translate_mr_to_sct(p.cgan, standardized);
  });
  InferResult res;
  res.sat = detail::with_stage("segment_sat",
                               [&] { return segment::segment_fat(p.sat, sct); });
  res.vat = detail::with_stage("segment_vat",
                               [&] { return segment::segment_fat(p.vat, sct); });
  res.sct = std::move(sct);

  const auto& out = p.cfg.output_dir;
  detail::with_stage("write_outputs", [&] {
    fs::create_directories(out / "sct");
    fs::create_directories(out / "pred" / "sat");
    fs::create_directories(out / "pred" / "vat");
    fs::create_directories(out / "overlay");
    imgio::save_slice(res.sct, (out / "sct" / (mr.id + ".png")).string());
    imgio::save_mask(res.sat, (out / "pred" / "sat" / (mr.id + ".png")).string());
    imgio::save_mask(res.vat, (out / "pred" / "vat" / (mr.id + ".png")).string());
    imgio::render_overlay(mr, &res.sat, &res.vat,
                          (out / "overlay" / (mr.id + ".png")).string());
    return 0;
  });
  return res;
}

/// Infers every test-split MR slice of a phantom dataset manifest, scores the
/// masks against ground truth, and appends a translation-fidelity section
/// from the paired a-CT slices where they exist. Writes report.json and a
/// run manifest with checksums of every artifact produced.
inline json run_experiment(const std::string& manifest_path, const LoadedPipeline& p) {
  std::ifstream in(manifest_path);
  if (!in) throw ConfigError("cannot read manifest: " + manifest_path);
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw FormatError("bad manifest: " + std::string(e.what()));
  }
  const fs::path root = fs::path(manifest_path).parent_path();
  const auto test_ids = manifest.at("splits").at("test").get<std::vector<std::string>>();
  require(!test_ids.empty(), "run_experiment: manifest has no test split");

  double mse_sum = 0.0, pearson_sum = 0.0;
  std::size_t fid_n = 0;
  for (const auto& id : test_ids) {
    const auto mr_path = imgio::slice_path(root, "test", "mr", id);
    infer_slice(p, mr_path.string());
    const auto act_path = imgio::slice_path(root, "test", "ct", id);
    if (fs::exists(act_path)) {
      Slice act = imgio::load_slice(act_path.string());
      Slice act_norm = preprocess::hu_window(act, p.cfg.hu_window);
      Slice sct = imgio::load_slice(
          (p.cfg.output_dir / "sct" / (id + ".png")).string());
      const auto f = metrics::sct_fidelity(sct, act_norm);
      mse_sum += f.mse;
      pearson_sum += f.pearson;
      ++fid_n;
    }
  }

  json report = metrics::eval_report(p.cfg.output_dir / "pred",
                                     root / "test" / "masks", "");
  if (fid_n > 0) {
    report["fidelity"] = {{"n_pairs", fid_n},
                          {"mean_mse", mse_sum / static_cast<double>(fid_n)},
                          {"mean_pearson", pearson_sum / static_cast<double>(fid_n)}};
  }
  report["run"] = {{"seed", p.cfg.seed},
                   {"n_test", test_ids.size()},
                   {"manifest", manifest_path}};

  {
    std::ofstream rout(p.cfg.output_dir / "report.json");
    if (!rout) throw IoError("cannot write report.json");
    rout << report.dump(2) << "\n";
  }

  // Run manifest: checksums of everything this run produced.
  std::map<std::string, std::string> sums;
  for (const auto& e : fs::recursive_directory_iterator(p.cfg.output_dir)) {
    if (!e.is_regular_file()) continue;
    if (e.path().filename() == "run_manifest.json") continue;
    sums[fs::relative(e.path(), p.cfg.output_dir).generic_string()] =
        detail::hex64(detail::fnv1a64_file(e.path()));
  }
  json rm = {{"format_version", 1}, {"files", sums}};
  std::ofstream mout(p.cfg.output_dir / "run_manifest.json");
  if (!mout) throw IoError("cannot write run_manifest.json");
  mout << rm.dump(2) << "\n";

  return report;
}

}  // namespace xmodseg::pipeline
