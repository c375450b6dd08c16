#pragma once

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include "xmodseg/phantom.hpp"
#include "xmodseg/pipeline.hpp"
#include "xmodseg/threads.hpp"
#include "xmodseg/version.hpp"

// Command-line front end. Every flag can also come from a config file
// (`--config file`, `key = value` lines, `#` comments, [subcommand] sections);
// explicit flags override file values. Errors print one machine-parsable
// line to stderr: `xmodseg: error: <message>`.

namespace xmodseg::cli {

namespace fs = std::filesystem;

inline int run(int argc, const char* const* argv) {
  init_threads();

  CLI::App app{"Cross-modality abdominal fat segmentation (MR via synthetic CT)"};
  app.set_version_flag("--version", std::string("xmodseg ") + kVersion);
  app.set_config("--config", "", "Config file with key = value lines");
  app.require_subcommand(0, 1);

  // ---- phantom-gen ----
  auto* gen = app.add_subcommand("phantom-gen", "Generate a synthetic dataset");
  phantom::PhantomParams pp;
  pp.size = 64;
  int gen_n = 20;
  bool gen_unpaired = false, gen_overwrite = false;
  std::string gen_out;
  gen->add_option("--out", gen_out, "Dataset root directory")->required();
  gen->add_option("--n", gen_n, "Number of samples");
  gen->add_flag("--unpaired", gen_unpaired, "Disjoint-seed MR/CT training halves");
  gen->add_flag("--overwrite", gen_overwrite, "Replace an existing dataset");
  gen->add_option("--size", pp.size, "Slice side length");
  gen->add_option("--seed", pp.seed, "Base seed");
  gen->add_option("--sat-thickness", pp.sat_thickness_frac, "SAT ring thickness fraction");
  gen->add_option("--vat-blobs", pp.vat_blob_count, "VAT blob count");
  gen->add_option("--vat-frac", pp.vat_area_frac_target, "VAT area fraction target");
  gen->add_option("--bias-amplitude", pp.bias_amplitude, "MR bias field amplitude");
  gen->add_option("--noise-sigma", pp.noise_sigma, "Relative noise level");
  gen->add_option("--jitter", pp.geometry_jitter, "Geometry jitter scale");

  // ---- preprocess ----
  auto* prep = app.add_subcommand("preprocess", "Bias-correct/standardize MR or window CT");
  std::string prep_mode, prep_in, prep_out, prep_scale;
  bool prep_fit = false;
  preprocess::HuWindow prep_window;
  prep->add_option("--mode", prep_mode, "mr or ct")
      ->required()
      ->check(CLI::IsMember({"mr", "ct"}));
  prep->add_option("--in-dir", prep_in, "Input slice directory")->required();
  prep->add_option("--out-dir", prep_out, "Output slice directory")->required();
  prep->add_option("--scale-file", prep_scale, "Standard scale JSON (mr mode)");
  prep->add_flag("--fit-scale", prep_fit, "Fit the scale on this directory and save it");
  prep->add_option("--window-lo", prep_window.lo, "HU window lower bound");
  prep->add_option("--window-hi", prep_window.hi, "HU window upper bound");

  // ---- train-cgan ----
  auto* tcg = app.add_subcommand("train-cgan", "Train the MR<->CT cycle translator");
  std::string tcg_mr, tcg_ct, tcg_out;
  translate::TrainConfig tcg_cfg;
  tcg->add_option("--mr-dir", tcg_mr, "Preprocessed MR directory")->required();
  tcg->add_option("--ct-dir", tcg_ct, "Preprocessed CT directory")->required();
  tcg->add_option("--epochs", tcg_cfg.epochs, "Training epochs");
  tcg->add_option("--batch-size", tcg_cfg.batch_size, "Batch size");
  tcg->add_option("--lr", tcg_cfg.lr, "Learning rate");
  tcg->add_option("--alpha", tcg_cfg.loss_cfg.alpha, "Cycle term weight");
  tcg->add_option("--beta", tcg_cfg.loss_cfg.beta, "Registration term weight");
  tcg->add_option("--base-channels", tcg_cfg.base_channels, "Generator width");
  tcg->add_option("--seed", tcg_cfg.seed, "Seed");
  tcg->add_option("--out", tcg_out, "Checkpoint path")->required();

  // ---- train-unet ----
  auto* tun = app.add_subcommand("train-unet", "Train a SAT or VAT U-Net on CT");
  std::string tun_tissue, tun_ct, tun_masks, tun_out;
  int tun_depth = 0;
  segment::UNetConfig tun_cfg;
  segment::AugmentSpec tun_aug;
  segment::TrainConfig tun_tcfg;
  tun->add_option("--tissue", tun_tissue, "sat or vat")
      ->required()
      ->check(CLI::IsMember({"sat", "vat"}));
  tun->add_option("--depth", tun_depth, "Encoder depth (default 3 sat / 5 vat)");
  tun->add_option("--ct-dir", tun_ct, "Preprocessed CT directory")->required();
  tun->add_option("--mask-dir", tun_masks, "Mask directory for the tissue")->required();
  tun->add_option("--epochs", tun_tcfg.epochs, "Training epochs");
  tun->add_option("--batch-size", tun_tcfg.batch_size, "Batch size");
  tun->add_option("--lr", tun_tcfg.lr, "Learning rate");
  tun->add_option("--base-channels", tun_cfg.base_channels, "U-Net width");
  tun->add_option("--folds", tun_aug.folds, "Augmentation folds");
  tun->add_option("--seed", tun_tcfg.seed, "Seed");
  tun->add_option("--out", tun_out, "Checkpoint path")->required();

  // ---- translate ----
  auto* tr = app.add_subcommand("translate", "MR slice to synthetic CT");
  std::string tr_ckpt, tr_in, tr_out;
  tr->add_option("--ckpt", tr_ckpt, "Translation checkpoint")->required();
  tr->add_option("--in", tr_in, "Preprocessed MR slice PNG")->required();
  tr->add_option("--out", tr_out, "Output s-CT PNG")->required();

  // ---- segment ----
  auto* seg = app.add_subcommand("segment", "Segment fat in a CT/s-CT slice");
  std::string seg_ckpt, seg_in, seg_out;
  seg->add_option("--ckpt", seg_ckpt, "Segmentation checkpoint")->required();
  seg->add_option("--in", seg_in, "NORM01 CT/s-CT slice PNG")->required();
  seg->add_option("--out-mask", seg_out, "Output mask PNG")->required();

  // ---- infer ----
  auto* inf = app.add_subcommand("infer", "Full pipeline on one raw MR slice");
  pipeline::PipelineConfig inf_cfg;
  std::string inf_in, inf_outdir;
  inf->add_option("--cgan", inf_cfg.cgan_ckpt, "Translation checkpoint")->required();
  inf->add_option("--sat", inf_cfg.sat_ckpt, "SAT checkpoint")->required();
  inf->add_option("--vat", inf_cfg.vat_ckpt, "VAT checkpoint")->required();
  inf->add_option("--scale", inf_cfg.standard_scale, "Standard scale JSON")->required();
  inf->add_option("--in", inf_in, "Raw MR slice PNG")->required();
  inf->add_option("--out-dir", inf_outdir, "Output directory")->required();
  inf->add_option("--window-lo", inf_cfg.hu_window.lo, "HU window lower bound");
  inf->add_option("--window-hi", inf_cfg.hu_window.hi, "HU window upper bound");
  inf->add_option("--seed", inf_cfg.seed, "Seed");

  // ---- evaluate ----
  auto* ev = app.add_subcommand("evaluate", "Score predicted masks against ground truth");
  std::string ev_pred, ev_gt, ev_out;
  ev->add_option("--pred-dir", ev_pred, "Predicted masks root")->required();
  ev->add_option("--gt-dir", ev_gt, "Ground-truth masks root")->required();
  ev->add_option("--out", ev_out, "Report JSON path")->required();

  // ---- run-experiment ----
  auto* rex = app.add_subcommand("run-experiment", "Batch inference + evaluation");
  pipeline::PipelineConfig rex_cfg;
  std::string rex_manifest, rex_outdir;
  rex->add_option("--manifest", rex_manifest, "Dataset manifest JSON")->required();
  rex->add_option("--cgan", rex_cfg.cgan_ckpt, "Translation checkpoint")->required();
  rex->add_option("--sat", rex_cfg.sat_ckpt, "SAT checkpoint")->required();
  rex->add_option("--vat", rex_cfg.vat_ckpt, "VAT checkpoint")->required();
  rex->add_option("--scale", rex_cfg.standard_scale, "Standard scale JSON")->required();
  rex->add_option("--out-dir", rex_outdir, "Output directory")->required();
  rex->add_option("--window-lo", rex_cfg.hu_window.lo, "HU window lower bound");
  rex->add_option("--window-hi", rex_cfg.hu_window.hi, "HU window upper bound");
  rex->add_option("--seed", rex_cfg.seed, "Seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::CallForVersion& e) {
    std::cout << "xmodseg " << kVersion << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "xmodseg: error: " << e.what() << "\n";
    std::cerr << "run 'xmodseg --help' for usage\n";
    return 2;
  }

  try {
    if (gen->parsed()) {
      auto manifest = phantom::gen_dataset(pp, gen_n, gen_unpaired, gen_out,
                                           gen_overwrite);
      std::printf("wrote dataset %s: %zu train, %zu test ids\n", gen_out.c_str(),
                  manifest["splits"]["train"].size(),
                  manifest["splits"]["test"].size());
    } else if (prep->parsed()) {
      fs::create_directories(prep_out);
      const auto ids = imgio::list_ids(prep_in);
      require(!ids.empty(), "no slices found in " + prep_in);
      nlohmann::json stamp{{"mode", prep_mode}};
      if (prep_mode == "mr") {
        require(!prep_scale.empty(), "mr mode needs --scale-file");
        std::vector<Slice> corrected;
        corrected.reserve(ids.size());
        for (const auto& id : ids)
          corrected.push_back(preprocess::bias_correct(
              imgio::load_slice((fs::path(prep_in) / (id + ".png")).string())));
        preprocess::StandardScale scale;
        if (prep_fit) {
          scale = preprocess::fit_standard_scale(corrected);
          scale.save(prep_scale);
        } else {
          scale = preprocess::StandardScale::load(prep_scale);
        }
        for (const auto& s : corrected) {
          auto out = preprocess::standardize(s, scale);
          imgio::save_slice(out, (fs::path(prep_out) / (s.id + ".png")).string());
        }
        stamp["fingerprint"] = preprocess::fingerprint_mr();
        stamp["scale_file"] = prep_scale;
      } else {
        for (const auto& id : ids) {
          auto s = imgio::load_slice((fs::path(prep_in) / (id + ".png")).string());
          auto out = preprocess::hu_window(s, prep_window);
          imgio::save_slice(out, (fs::path(prep_out) / (id + ".png")).string());
        }
        stamp["fingerprint"] = preprocess::fingerprint_ct(prep_window);
        stamp["window"] = {prep_window.lo, prep_window.hi};
      }
      std::ofstream(fs::path(prep_out) / "preproc.json") << stamp.dump(2) << "\n";
      std::printf("preprocessed %zu slices into %s\n", ids.size(), prep_out.c_str());
    } else if (tcg->parsed()) {
      auto report = translate::train_cgan(tcg_mr, tcg_ct, tcg_cfg, tcg_out);
      std::ofstream(tcg_out + ".report.json") << report.dump(2) << "\n";
      std::printf("wrote %s and %s.report.json\n", tcg_out.c_str(), tcg_out.c_str());
    } else if (tun->parsed()) {
      tun_cfg.tissue = tissue_from_string(tun_tissue);
      tun_cfg.depth = tun_depth > 0 ? tun_depth
                      : tun_cfg.tissue == Tissue::SAT ? 3 : 5;
      {
        // input_size comes from the data
        const auto ids = imgio::list_ids(tun_ct);
        require(!ids.empty(), "no CT slices in " + tun_ct);
        auto first =
            imgio::load_slice((fs::path(tun_ct) / (ids[0] + ".png")).string());
        tun_cfg.input_size = first.height();
      }
      auto report = segment::train_unet(tun_ct, tun_masks, tun_cfg, tun_aug,
                                        tun_tcfg, tun_out);
      std::ofstream(tun_out + ".report.json") << report.dump(2) << "\n";
      std::printf("wrote %s and %s.report.json\n", tun_out.c_str(), tun_out.c_str());
    } else if (tr->parsed()) {
      auto model = translate::load_cgan<float>(tr_ckpt);
      auto mr = imgio::load_slice(tr_in);
      auto sct = translate::translate_mr_to_sct(model, mr);
      imgio::save_slice(sct, tr_out);
      std::printf("wrote %s\n", tr_out.c_str());
    } else if (seg->parsed()) {
      auto model = segment::load_unet(seg_ckpt);
      auto slice = imgio::load_slice(seg_in);
      auto mask = segment::segment_fat(model, slice);
      imgio::save_mask(mask, seg_out);
      std::printf("wrote %s (%zu fat pixels)\n", seg_out.c_str(), mask.count());
    } else if (inf->parsed()) {
      inf_cfg.output_dir = inf_outdir;
      auto pipe = pipeline::load_pipeline(inf_cfg);
      auto res = pipeline::infer_slice(pipe, inf_in);
      std::printf("inferred %s: sat %zu px, vat %zu px; outputs in %s\n",
                  inf_in.c_str(), res.sat.count(), res.vat.count(),
                  inf_outdir.c_str());
    } else if (ev->parsed()) {
      auto report = metrics::eval_report(ev_pred, ev_gt, ev_out);
      std::printf("wrote %s (%zu records)\n", ev_out.c_str(),
                  report["records"].size());
    } else if (rex->parsed()) {
      rex_cfg.output_dir = rex_outdir;
      auto pipe = pipeline::load_pipeline(rex_cfg);
      auto report = pipeline::run_experiment(rex_manifest, pipe);
      std::printf("experiment done: report at %s\n",
                  (fs::path(rex_outdir) / "report.json").string().c_str());
    } else {
      std::cout << app.help();
      return 2;  // no subcommand given
    }
  } catch (const Error& e) {
    std::cerr << "xmodseg: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace xmodseg::cli
