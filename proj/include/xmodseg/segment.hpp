#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "xmodseg/dataset.hpp"
#include "xmodseg/metrics.hpp"
#include "xmodseg/network.hpp"
#include "xmodseg/optim.hpp"
#include "xmodseg/preprocess.hpp"

// U-Net training on labeled CT and binary mask inference. SAT uses encoder
// depth 3, VAT depth 5. Training minimizes BCE + (1 - soft Dice) over a
// 4-fold augmented training set with a 90/10 train/validation split.

namespace xmodseg::segment {

namespace fs = std::filesystem;
using nlohmann::json;
using nn::Network;
using nn::Tensor;

struct UNetConfig {
  int depth = 3;  // downsampling stages: 3 for SAT, 5 for VAT
  int base_channels = 8;
  int input_size = 64;
  Tissue tissue = Tissue::SAT;

  void validate() const {
    require(depth >= 1 && depth <= 6, "UNetConfig: depth must be in 1..6");
    require(base_channels >= 1, "UNetConfig: base_channels must be >= 1");
    const int div = 1 << depth;
    require(input_size >= div && input_size % div == 0,
            "UNetConfig: input_size " + std::to_string(input_size) +
                " not divisible by 2^depth = " + std::to_string(div));
  }
};

struct AugmentSpec {
  double max_shift_frac = 0.10;
  double zoom_lo = 0.9;
  double zoom_hi = 1.1;
  bool hflip = true;
  int folds = 4;

  void validate() const {
    require(folds >= 1, "AugmentSpec: folds must be >= 1");
    require(zoom_lo > 0.0 && zoom_lo <= zoom_hi, "AugmentSpec: bad zoom range");
    require(max_shift_frac >= 0.0, "AugmentSpec: bad shift");
  }
};

struct SegmentationModel {
  Network<float> net;
  UNetConfig cfg;
  double threshold = 0.5;
};

/// Encoder of `depth` blocks (conv-norm-ReLU x2, skip push, stride-2 conv),
/// mirrored decoder with skip concatenations, 1-channel sigmoid head.
inline std::vector<nn::LayerSpec> unet_specs(const UNetConfig& cfg) {
  using namespace nn;
  cfg.validate();
  std::vector<LayerSpec> s;
  auto block = [&](int in_ch, int out_ch) {
    s.push_back(Conv2dSpec{in_ch, out_ch, 3, 1, 1});
    s.push_back(InstanceNormSpec{out_ch});
    s.push_back(ActSpec{Act::ReLU});
    s.push_back(Conv2dSpec{out_ch, out_ch, 3, 1, 1});
    s.push_back(InstanceNormSpec{out_ch});
    s.push_back(ActSpec{Act::ReLU});
  };
  std::vector<int> ch(cfg.depth);
  for (int i = 0; i < cfg.depth; ++i) ch[i] = cfg.base_channels << i;

  int prev = 1;
  for (int i = 0; i < cfg.depth; ++i) {
    block(prev, ch[i]);
    s.push_back(PushSpec{});
    s.push_back(Conv2dSpec{ch[i], ch[i], 3, 2, 1});  // 2x downsample
    prev = ch[i];
  }
  const int bottleneck = 2 * ch[cfg.depth - 1];
  block(prev, bottleneck);
  prev = bottleneck;
  for (int i = cfg.depth - 1; i >= 0; --i) {
    s.push_back(ConvT2dSpec{prev, ch[i], 2, 2, 0, 0});  // 2x upsample
    s.push_back(ConcatPopSpec{});
    block(2 * ch[i], ch[i]);
    prev = ch[i];
  }
  s.push_back(Conv2dSpec{prev, 1, 1, 1, 0});
  s.push_back(ActSpec{Act::Sigmoid});
  return s;
}

inline SegmentationModel build_unet(const UNetConfig& cfg, std::uint64_t seed) {
  SegmentationModel m;
  m.cfg = cfg;
  m.net = nn::build_network<float>(unet_specs(cfg), derive_seed(seed, "unet"));
  m.net.meta = {{"kind", "unet"},
                {"tissue", to_string(cfg.tissue)},
                {"depth", cfg.depth},
                {"base_channels", cfg.base_channels},
                {"input_size", cfg.input_size},
                {"threshold", m.threshold},
                {"preproc_ct", preprocess::fingerprint_ct()}};
  return m;
}

inline void save_unet(const SegmentationModel& m, const std::string& path) {
  nn::save_network(m.net, path);
}

inline SegmentationModel load_unet(const std::string& path) {
  SegmentationModel m;
  m.net = nn::load_network<float>(path);
  const auto& meta = m.net.meta;
  if (!meta.contains("kind") || meta.at("kind") != "unet")
    throw FormatError("not a segmentation checkpoint: " + path);
  m.cfg.tissue = tissue_from_string(meta.at("tissue").get<std::string>());
  m.cfg.depth = meta.at("depth").get<int>();
  m.cfg.base_channels = meta.at("base_channels").get<int>();
  m.cfg.input_size = meta.at("input_size").get<int>();
  m.threshold = meta.at("threshold").get<double>();
  return m;
}

// ---- augmentation ------------------------------------------------------------

namespace detail {

inline double bilinear(const Image2D& img, double r, double c) {
  const int r0 = static_cast<int>(std::floor(r)), c0 = static_cast<int>(std::floor(c));
  const double fr = r - r0, fc = c - c0;
  auto at = [&](int rr, int cc) {
    if (rr < 0 || rr >= img.height() || cc < 0 || cc >= img.width()) return 0.0;
    return img.at(rr, cc);
  };
  return (1 - fr) * ((1 - fc) * at(r0, c0) + fc * at(r0, c0 + 1)) +
         fr * ((1 - fc) * at(r0 + 1, c0) + fc * at(r0 + 1, c0 + 1));
}

struct GeomTransform {
  double shift_r = 0, shift_c = 0;  // pixels
  double zoom = 1.0;
  bool flip = false;

  // output pixel -> input coordinates
  void source(double r, double c, int h, int w, double& ir, double& ic) const {
    const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
    double u = c - cx, v = r - cy;
    if (flip) u = -u;
    u /= zoom;
    v /= zoom;
    ic = cx + u - shift_c;
    ir = cy + v - shift_r;
  }
};

inline Slice transform_slice(const Slice& s, const GeomTransform& t) {
  Slice out = s;
  const int h = s.height(), w = s.width();
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      double ir, ic;
      t.source(r, c, h, w, ir, ic);
      out.pixels.at(r, c) = bilinear(s.pixels, ir, ic);
    }
  return out;
}

inline Mask transform_mask(const Mask& m, const GeomTransform& t) {
  Mask out = m;
  for (int r = 0; r < m.h; ++r)
    for (int c = 0; c < m.w; ++c) {
      double ir, ic;
      t.source(r, c, m.h, m.w, ir, ic);
      const int rr = static_cast<int>(std::lround(ir));
      const int cc = static_cast<int>(std::lround(ic));
      out.at(r, c) = (rr >= 0 && rr < m.h && cc >= 0 && cc < m.w) ? m.at(rr, cc) : 0;
    }
  return out;
}

}  // namespace detail

/// Horizontal mirror (an involution; used on its own and inside augment).
inline std::pair<Slice, Mask> hflip_pair(const Slice& s, const Mask& m) {
  detail::GeomTransform t;
  t.flip = true;
  return {detail::transform_slice(s, t), detail::transform_mask(m, t)};
}

/// `folds` jointly transformed (slice, mask) pairs: the original plus
/// folds-1 random shift/zoom/flip variants, deterministic for the seed.
inline std::vector<std::pair<Slice, Mask>> augment(const Slice& slice,
                                                   const Mask& mask,
                                                   const AugmentSpec& spec,
                                                   std::uint64_t seed) {
  spec.validate();
  require(mask.matches(slice), "augment: slice/mask shape mismatch");
  std::vector<std::pair<Slice, Mask>> out;
  out.emplace_back(slice, mask);
  Rng rng(derive_seed(seed, "augment"));
  for (int k = 1; k < spec.folds; ++k) {
    detail::GeomTransform t;
    t.shift_r = rng.uniform(-spec.max_shift_frac, spec.max_shift_frac) * slice.height();
    t.shift_c = rng.uniform(-spec.max_shift_frac, spec.max_shift_frac) * slice.width();
    t.zoom = rng.uniform(spec.zoom_lo, spec.zoom_hi);
    t.flip = spec.hflip && rng.bernoulli(0.5);
    out.emplace_back(detail::transform_slice(slice, t),
                     detail::transform_mask(mask, t));
  }
  return out;
}

// ---- training ------------------------------------------------------------------

struct TrainConfig {
  int epochs = 20;
  int batch_size = 4;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  double val_frac = 0.10;  // the 90/10 train/validation split
};

/// Hard Dice of thresholded probabilities against a binary mask vector.
inline double hard_dice(const std::vector<float>& prob,
                        const std::vector<float>& gt, double threshold) {
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < prob.size(); ++i) {
    const bool p = prob[i] > threshold, g = gt[i] > 0.5f;
    if (p && g)
      ++tp;
    else if (p)
      ++fp;
    else if (g)
      ++fn;
  }
  const std::size_t denom = 2 * tp + fp + fn;
  return denom == 0 ? 1.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

/// Trains one U-Net on NORM01 CT slices with masks of cfg.tissue found at
/// `mask_dir/<id>.png`. Writes the checkpoint, returns the report.
inline json train_unet(const fs::path& ct_dir, const fs::path& mask_dir,
                       const UNetConfig& cfg, const AugmentSpec& aug,
                       const TrainConfig& tcfg, const std::string& out_ckpt) {
  cfg.validate();
  aug.validate();
  require(tcfg.epochs >= 0 && tcfg.batch_size >= 1, "train_unet: bad config");

  const auto ids = imgio::list_ids(ct_dir);
  require(!ids.empty(), "train_unet: no CT slices in " + ct_dir.string());
  std::vector<std::string> missing;
  for (const auto& id : ids)
    if (!fs::exists(mask_dir / (id + ".png"))) missing.push_back(id);
  if (!missing.empty()) {
    std::string msg = "train_unet: missing " + std::string(to_string(cfg.tissue)) +
                      " masks for ids:";
    for (const auto& m : missing) msg += " " + m;
    throw ValidationError(msg);
  }

  // Load, preprocess-check, split 90/10, then augment the training part.
  std::vector<Slice> slices;
  std::vector<Mask> masks;
  for (const auto& id : ids) {
    Slice s = imgio::load_slice((ct_dir / (id + ".png")).string());
    require(s.height() == cfg.input_size && s.width() == cfg.input_size,
            "train_unet: slice " + id + " does not match input_size");
    Mask m = imgio::load_mask((mask_dir / (id + ".png")).string(), cfg.tissue, id);
    require(m.matches(s), "train_unet: mask shape mismatch for " + id);
    slices.push_back(std::move(s));
    masks.push_back(std::move(m));
  }

  std::vector<std::size_t> order(ids.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng split_rng(derive_seed(tcfg.seed, "unet-split"));
  split_rng.shuffle(order);
  const auto n_val = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(tcfg.val_frac * ids.size())));
  require(n_val < ids.size(), "train_unet: dataset too small for a validation split");

  const auto hw = static_cast<std::size_t>(cfg.input_size) * cfg.input_size;
  std::vector<std::vector<float>> train_x, train_y, val_x, val_y;
  auto mask_to_float = [&](const Mask& m) {
    std::vector<float> v(m.px.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = m.px[i] ? 1.0f : 0.0f;
    return v;
  };
  for (std::size_t k = 0; k < order.size(); ++k) {
    const std::size_t i = order[k];
    if (k < n_val) {
      val_x.push_back(dataset::to_net<float>(slices[i]));
      val_y.push_back(mask_to_float(masks[i]));
    } else {
      const auto pairs = augment(slices[i], masks[i], aug,
                                 derive_seed(tcfg.seed, "unet-aug", i));
      for (const auto& [s, m] : pairs) {
        train_x.push_back(dataset::to_net<float>(s));
        train_y.push_back(mask_to_float(m));
      }
    }
  }

  auto model = build_unet(cfg, tcfg.seed);
  model.net.meta["seed"] = tcfg.seed;
  nn::Adam<float> opt;
  opt.lr = static_cast<float>(tcfg.lr);
  opt.init(model.net.params);

  json report = {{"epochs", tcfg.epochs},
                 {"config",
                  {{"tissue", to_string(cfg.tissue)},
                   {"depth", cfg.depth},
                   {"base_channels", cfg.base_channels},
                   {"input_size", cfg.input_size},
                   {"batch_size", tcfg.batch_size},
                   {"lr", tcfg.lr},
                   {"folds", aug.folds},
                   {"seed", tcfg.seed},
                   {"n_train_pairs", train_x.size()},
                   {"n_val", val_x.size()}}},
                 {"terms", {{"train_loss", json::array()}, {"val_dice", json::array()}}}};

  auto snapshot = [&] {
    std::vector<std::vector<float>> vals;
    for (auto& p : model.net.params) vals.push_back(p.values());
    return vals;
  };
  auto restore = [&](const std::vector<std::vector<float>>& vals) {
    for (std::size_t i = 0; i < vals.size(); ++i)
      model.net.params[i].values() = vals[i];
  };
  auto last_good = snapshot();

  auto make_batch = [&](const std::vector<std::vector<float>>& xs,
                        const std::vector<std::size_t>& pick) {
    std::vector<float> data(pick.size() * hw);
    for (std::size_t k = 0; k < pick.size(); ++k)
      std::copy_n(xs[pick[k]].data(), hw, data.data() + k * hw);
    return Tensor<float>::leaf({static_cast<int>(pick.size()), 1,
                                cfg.input_size, cfg.input_size},
                               std::move(data), false);
  };

  const std::size_t steps =
      (train_x.size() + tcfg.batch_size - 1) / tcfg.batch_size;
  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    Rng erng(derive_seed(tcfg.seed, "unet-epoch", static_cast<std::uint64_t>(epoch)));
    std::vector<std::size_t> idx(train_x.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    erng.shuffle(idx);

    double loss_sum = 0.0;
    for (std::size_t step = 0; step < steps; ++step) {
      std::vector<std::size_t> pick;
      for (int k = 0; k < tcfg.batch_size; ++k)
        pick.push_back(idx[(step * tcfg.batch_size + k) % idx.size()]);
      auto x = make_batch(train_x, pick);
      auto y = make_batch(train_y, pick);
      auto prob = model.net.forward(x);
      auto loss = nn::add(nn::bce(prob, y), nn::soft_dice_loss(prob, y));
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv)) {
        restore(last_good);
        save_unet(model, out_ckpt);
        throw TrainAbort("train_unet: non-finite loss at epoch " +
                         std::to_string(epoch) + "; last good checkpoint written");
      }
      nn::backward(loss);
      opt.step(model.net.params);
      loss_sum += lv;
    }

    double vdice = 0.0;
    for (std::size_t i = 0; i < val_x.size(); ++i) {
      auto x = make_batch(val_x, {i});
      auto prob = model.net.forward(x, /*frozen=*/true);
      vdice += hard_dice(prob.values(), val_y[i], model.threshold);
    }
    report["terms"]["train_loss"].push_back(loss_sum / static_cast<double>(steps));
    report["terms"]["val_dice"].push_back(
        val_x.empty() ? 1.0 : vdice / static_cast<double>(val_x.size()));
    last_good = snapshot();
  }

  save_unet(model, out_ckpt);
  return report;
}

// ---- inference -------------------------------------------------------------------

/// Sigmoid probability map thresholded at model.threshold.
inline Mask segment_fat(const SegmentationModel& model, const Slice& slice) {
  require(slice.intensity_kind == IntensityKind::NORM01,
          "segment_fat: slice must be NORM01 (got " +
              std::string(to_string(slice.intensity_kind)) + ")");
  require(slice.modality == Modality::CT || slice.modality == Modality::SCT,
          "segment_fat: slice must be CT or SCT");
  auto data = dataset::to_net<float>(slice);
  auto x = Tensor<float>::leaf({1, 1, slice.height(), slice.width()},
                               std::move(data), false);
  auto prob = model.net.forward(x, /*frozen=*/true);
  Mask out(slice.height(), slice.width(), model.cfg.tissue, slice.id);
  for (std::size_t i = 0; i < out.px.size(); ++i)
    out.px[i] = prob.values()[i] > model.threshold ? 1 : 0;
  return out;
}

}  // namespace xmodseg::segment
