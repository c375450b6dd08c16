#pragma once

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "xmodseg/dataset.hpp"
#include "xmodseg/network.hpp"
#include "xmodseg/optim.hpp"
#include "xmodseg/preprocess.hpp"

// The dual-generator / dual-discriminator cycle translator and its losses.
//
// Domain A is MR, domain B is CT. G_B maps A->B (MR to synthetic CT), G_A
// maps B->A. D_A tells real MR from I_BA, D_B tells real CT from I_AB.
// The generator objective is the six-term sum
//   MSE(1, D_B(I_AB)) + MSE(1, D_A(I_BA))
//   + alpha * [MSE(I_ABA, I_A) + MSE(I_BAB, I_B)]
//   + beta  * [MSE(I_BA, I_B) + MSE(I_AB, I_A)]
// with alpha = 10 and beta = 2 by default. The discriminators are trained
// with the standard least-squares counterpart.

namespace xmodseg::translate {

namespace fs = std::filesystem;
using nlohmann::json;
using nn::Network;
using nn::Tensor;

struct LossConfig {
  double alpha = 10.0;
  double beta = 2.0;
  void validate() const {
    require(alpha >= 0.0 && beta >= 0.0, "LossConfig: weights must be >= 0");
  }
};

template <typename T = float>
struct CycleBatch {
  Tensor<T> I_A, I_B;      // real MR / CT batches
  Tensor<T> I_AB, I_BA;    // G_B(I_A), G_A(I_B)
  Tensor<T> I_ABA, I_BAB;  // G_A(I_AB), G_B(I_BA)
};

template <typename T = float>
struct TranslationModel {
  Network<T> G_A;  // B -> A (CT to MR)
  Network<T> G_B;  // A -> B (MR to CT)
  Network<T> D_A;  // real MR vs I_BA
  Network<T> D_B;  // real CT vs I_AB
  LossConfig loss_cfg;
  json meta = json::object();

  std::vector<Tensor<T>> generator_params() const {
    std::vector<Tensor<T>> p(G_A.params);
    p.insert(p.end(), G_B.params.begin(), G_B.params.end());
    return p;
  }
  std::vector<Tensor<T>> discriminator_params() const {
    std::vector<Tensor<T>> p(D_A.params);
    p.insert(p.end(), D_B.params.begin(), D_B.params.end());
    return p;
  }
};

// ---- architectures -----------------------------------------------------------

/// 2-down/2-up encoder-decoder with two residual blocks at the bottleneck and
/// a linear (activation-free) output head.
inline std::vector<nn::LayerSpec> generator_specs(int base_channels) {
  using namespace nn;
  const int c = base_channels;
  std::vector<LayerSpec> s;
  s.push_back(Conv2dSpec{1, c, 3, 1, 1});
  s.push_back(InstanceNormSpec{c});
  s.push_back(ActSpec{Act::ReLU});
  s.push_back(Conv2dSpec{c, 2 * c, 3, 2, 1});
  s.push_back(InstanceNormSpec{2 * c});
  s.push_back(ActSpec{Act::ReLU});
  s.push_back(Conv2dSpec{2 * c, 4 * c, 3, 2, 1});
  s.push_back(InstanceNormSpec{4 * c});
  s.push_back(ActSpec{Act::ReLU});
  for (int r = 0; r < 2; ++r) {
    s.push_back(PushSpec{});
    s.push_back(Conv2dSpec{4 * c, 4 * c, 3, 1, 1});
    s.push_back(InstanceNormSpec{4 * c});
    s.push_back(ActSpec{Act::ReLU});
    s.push_back(Conv2dSpec{4 * c, 4 * c, 3, 1, 1});
    s.push_back(InstanceNormSpec{4 * c});
    s.push_back(AddPopSpec{});
  }
  s.push_back(ConvT2dSpec{4 * c, 2 * c, 4, 2, 1, 0});
  s.push_back(InstanceNormSpec{2 * c});
  s.push_back(ActSpec{Act::ReLU});
  s.push_back(ConvT2dSpec{2 * c, c, 4, 2, 1, 0});
  s.push_back(InstanceNormSpec{c});
  s.push_back(ActSpec{Act::ReLU});
  s.push_back(Conv2dSpec{c, 1, 3, 1, 1});
  return s;
}

/// 3-conv patch classifier; sigmoid output map in (0,1).
inline std::vector<nn::LayerSpec> discriminator_specs(int base_channels) {
  using namespace nn;
  const int c = base_channels;
  return {
      Conv2dSpec{1, c, 4, 2, 1},     ActSpec{Act::LeakyReLU},
      Conv2dSpec{c, 2 * c, 4, 2, 1}, InstanceNormSpec{2 * c},
      ActSpec{Act::LeakyReLU},       Conv2dSpec{2 * c, 1, 4, 1, 1},
      ActSpec{Act::Sigmoid},
  };
}

/// disc_channels <= 0 picks the default discriminator width (2x the
/// generator width; the discriminator must out-muscle the regression terms
/// for intensities to land on the CT manifold).
template <typename T = float>
TranslationModel<T> build_cgan(int image_size, int base_channels,
                               LossConfig loss_cfg, std::uint64_t seed,
                               int disc_channels = 0) {
  loss_cfg.validate();
  require(image_size >= 8 && image_size % 4 == 0,
          "build_cgan: image_size must be >= 8 and divisible by 4");
  require(base_channels >= 1, "build_cgan: base_channels must be >= 1");
  if (disc_channels <= 0) disc_channels = 2 * base_channels;
  TranslationModel<T> m;
  m.G_A = nn::build_network<T>(generator_specs(base_channels),
                               derive_seed(seed, "G_A"));
  m.G_B = nn::build_network<T>(generator_specs(base_channels),
                               derive_seed(seed, "G_B"));
  m.D_A = nn::build_network<T>(discriminator_specs(disc_channels),
                               derive_seed(seed, "D_A"));
  m.D_B = nn::build_network<T>(discriminator_specs(disc_channels),
                               derive_seed(seed, "D_B"));
  m.loss_cfg = loss_cfg;
  m.meta = {{"image_size", image_size},
            {"base_channels", base_channels},
            {"disc_channels", disc_channels},
            {"alpha", loss_cfg.alpha},
            {"beta", loss_cfg.beta}};
  return m;
}

// ---- cycle forward and losses ---------------------------------------------------

template <typename T>
CycleBatch<T> cycle_forward(const TranslationModel<T>& model, Tensor<T> I_A,
                            Tensor<T> I_B) {
  require(I_A.shape().size() == 4 && I_B.shape().size() == 4,
          "cycle_forward: inputs must be {N,1,H,W}");
  require(I_A.shape() == I_B.shape(),
          "cycle_forward: I_A and I_B must share batch and spatial shape");
  CycleBatch<T> b;
  b.I_A = std::move(I_A);
  b.I_B = std::move(I_B);
  b.I_AB = model.G_B.forward(b.I_A);
  b.I_BA = model.G_A.forward(b.I_B);
  b.I_ABA = model.G_A.forward(b.I_AB);
  b.I_BAB = model.G_B.forward(b.I_BA);
  return b;
}

/// Raw (unweighted) values of the six generator-loss terms, for reporting.
struct GenLossTerms {
  double adv_B = 0;  // MSE(1, D_B(I_AB))
  double adv_A = 0;  // MSE(1, D_A(I_BA))
  double cyc_A = 0;  // MSE(I_ABA, I_A)
  double cyc_B = 0;  // MSE(I_BAB, I_B)
  double reg_B = 0;  // MSE(I_BA, I_B)
  double reg_A = 0;  // MSE(I_AB, I_A)
};

/// The six-term generator objective. Discriminator parameters enter frozen,
/// so its gradient w.r.t. them is exactly zero.
template <typename T>
Tensor<T> gen_loss(const CycleBatch<T>& batch, const TranslationModel<T>& model,
                   GenLossTerms* terms_out = nullptr) {
  require(batch.I_AB.defined() && batch.I_BA.defined() &&
              batch.I_ABA.defined() && batch.I_BAB.defined(),
          "gen_loss: batch not produced by cycle_forward");
  require(batch.I_AB.shape() == batch.I_A.shape() &&
              batch.I_BA.shape() == batch.I_B.shape() &&
              batch.I_ABA.shape() == batch.I_A.shape() &&
              batch.I_BAB.shape() == batch.I_B.shape(),
          "gen_loss: batch tensors have inconsistent shapes");
  const auto d_b = model.D_B.forward(batch.I_AB, /*frozen=*/true);
  const auto d_a = model.D_A.forward(batch.I_BA, /*frozen=*/true);
  auto ones_b = Tensor<T>::leaf(d_b.shape(),
                                std::vector<T>(d_b.numel(), T(1)), false);
  auto ones_a = Tensor<T>::leaf(d_a.shape(),
                                std::vector<T>(d_a.numel(), T(1)), false);

  auto adv_B = nn::mse(d_b, ones_b);
  auto adv_A = nn::mse(d_a, ones_a);
  auto cyc_A = nn::mse(batch.I_ABA, batch.I_A);
  auto cyc_B = nn::mse(batch.I_BAB, batch.I_B);
  auto reg_B = nn::mse(batch.I_BA, batch.I_B);
  auto reg_A = nn::mse(batch.I_AB, batch.I_A);

  if (terms_out) {
    terms_out->adv_B = static_cast<double>(adv_B.item());
    terms_out->adv_A = static_cast<double>(adv_A.item());
    terms_out->cyc_A = static_cast<double>(cyc_A.item());
    terms_out->cyc_B = static_cast<double>(cyc_B.item());
    terms_out->reg_B = static_cast<double>(reg_B.item());
    terms_out->reg_A = static_cast<double>(reg_A.item());
  }
  const T alpha = static_cast<T>(model.loss_cfg.alpha);
  const T beta = static_cast<T>(model.loss_cfg.beta);
  auto loss = nn::add(adv_B, adv_A);
  loss = nn::add(loss, nn::mul_scalar(nn::add(cyc_A, cyc_B), alpha));
  loss = nn::add(loss, nn::mul_scalar(nn::add(reg_B, reg_A), beta));
  return loss;
}

/// Least-squares discriminator objective; generator outputs must arrive
/// detached so gradients flow to discriminators only.
template <typename T>
Tensor<T> disc_loss(const TranslationModel<T>& model, const Tensor<T>& I_A,
                    const Tensor<T>& I_B, const Tensor<T>& I_AB_detached,
                    const Tensor<T>& I_BA_detached) {
  require(!I_AB_detached.requires_grad() && !I_BA_detached.requires_grad(),
          "disc_loss: fake inputs must be detached");
  require(I_AB_detached.shape() == I_B.shape() &&
              I_BA_detached.shape() == I_A.shape(),
          "disc_loss: fake/real shape mismatch");
  auto term = [&](const Network<T>& d, const Tensor<T>& x, T target) {
    auto out = d.forward(x);
    auto t = Tensor<T>::leaf(out.shape(), std::vector<T>(out.numel(), target),
                             false);
    return nn::mse(out, t);
  };
  auto loss = nn::add(term(model.D_A, I_A, T(1)),
                      term(model.D_A, I_BA_detached, T(0)));
  loss = nn::add(loss, term(model.D_B, I_B, T(1)));
  loss = nn::add(loss, term(model.D_B, I_AB_detached, T(0)));
  return loss;
}

// ---- checkpoint (all four networks in one container) ------------------------------

inline constexpr char kCganMagic[8] = {'X', 'M', 'S', 'G', 'C', 'G', 'A', 'N'};

template <typename T>
void save_cgan(const TranslationModel<T>& m, const std::string& path) {
  json header = {{"format_version", 1},
                 {"meta", m.meta},
                 {"alpha", m.loss_cfg.alpha},
                 {"beta", m.loss_cfg.beta},
                 {"networks", json::array()}};
  const Network<T>* nets[4] = {&m.G_A, &m.G_B, &m.D_A, &m.D_B};
  const char* names[4] = {"G_A", "G_B", "D_A", "D_B"};
  for (int k = 0; k < 4; ++k) {
    json nj = {{"name", names[k]},
               {"layers", json::array()},
               {"param_shapes", json::array()}};
    for (const auto& s : nets[k]->specs) nj["layers"].push_back(nn::spec_to_json(s));
    for (const auto& p : nets[k]->params) nj["param_shapes"].push_back(p.shape());
    header["networks"].push_back(std::move(nj));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  const std::string hdr = header.dump();
  const std::uint64_t hlen = hdr.size();
  const std::uint32_t version = 1;
  out.write(kCganMagic, 8);
  out.write(reinterpret_cast<const char*>(&version), 4);
  out.write(reinterpret_cast<const char*>(&hlen), 8);
  out.write(hdr.data(), static_cast<std::streamsize>(hlen));
  for (int k = 0; k < 4; ++k)
    for (const auto& p : nets[k]->params)
      for (const T v : p.values()) {
        const float f = static_cast<float>(v);
        out.write(reinterpret_cast<const char*>(&f), 4);
      }
  if (!out.good()) throw IoError("checkpoint write failed: " + path);
}

template <typename T>
TranslationModel<T> load_cgan(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint: " + path);
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t hlen = 0;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&hlen), 8);
  if (!in.good() || std::memcmp(magic, kCganMagic, 8) != 0)
    throw FormatError("not a translation checkpoint: " + path);
  if (version != 1)
    throw FormatError("unsupported checkpoint version: " + path);
  std::string hdr(hlen, '\0');
  in.read(hdr.data(), static_cast<std::streamsize>(hlen));
  if (!in.good()) throw FormatError("truncated checkpoint header: " + path);
  json header;
  try {
    header = json::parse(hdr);
  } catch (const json::exception& e) {
    throw FormatError("bad checkpoint header: " + std::string(e.what()));
  }

  TranslationModel<T> m;
  m.meta = header.value("meta", json::object());
  m.loss_cfg.alpha = header.at("alpha").get<double>();
  m.loss_cfg.beta = header.at("beta").get<double>();
  Network<T>* nets[4] = {&m.G_A, &m.G_B, &m.D_A, &m.D_B};
  const auto& njs = header.at("networks");
  require(njs.size() == 4, "translation checkpoint must hold 4 networks");
  for (int k = 0; k < 4; ++k) {
    for (const auto& j : njs[k].at("layers"))
      nets[k]->specs.push_back(nn::spec_from_json(j));
    const auto expect = nn::param_shapes(nets[k]->specs);
    const auto& shapes = njs[k].at("param_shapes");
    require(shapes.size() == expect.size(), "checkpoint param list mismatch");
    for (std::size_t i = 0; i < expect.size(); ++i) {
      const nn::Shape s = shapes[i].get<nn::Shape>();
      if (s != expect[i])
        throw FormatError("checkpoint param shape mismatch: " + path);
      std::vector<float> buf(nn::shape_numel(s));
      in.read(reinterpret_cast<char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * 4));
      if (!in.good()) throw FormatError("truncated checkpoint data: " + path);
      std::vector<T> vals(buf.begin(), buf.end());
      nets[k]->params.push_back(Tensor<T>::leaf(s, std::move(vals), true));
    }
  }
  return m;
}

// ---- training ----------------------------------------------------------------------

struct TrainConfig {
  int epochs = 30;
  int batch_size = 2;
  double lr = 2e-4;
  double disc_lr = 0.0;  // 0 = same as lr
  LossConfig loss_cfg;
  std::uint64_t seed = 0;
  int base_channels = 12;
  int disc_channels = 0;  // 0 = 2 * base_channels
};

/// Alternating 1:1 discriminator/generator updates over unpaired MR and CT
/// directories. Writes the checkpoint and returns the training report with
/// per-epoch means of every named loss term (raw, unweighted).
inline json train_cgan(const fs::path& mr_dir, const fs::path& ct_dir,
                       const TrainConfig& cfg, const std::string& out_ckpt) {
  using T = float;
  cfg.loss_cfg.validate();
  require(cfg.epochs >= 0 && cfg.batch_size >= 1 && cfg.lr >= 0,
          "train_cgan: bad config");
  auto mr = dataset::load_slice_dir<T>(mr_dir);
  auto ct = dataset::load_slice_dir<T>(ct_dir);
  require(mr.height == ct.height && mr.width == ct.width,
          "train_cgan: MR and CT slice shapes differ");
  require(mr.height == mr.width, "train_cgan: slices must be square");

  auto model = build_cgan<T>(mr.height, cfg.base_channels, cfg.loss_cfg, cfg.seed,
                             cfg.disc_channels);
  model.meta["preproc_mr"] = preprocess::fingerprint_mr();
  model.meta["preproc_ct"] = preprocess::fingerprint_ct();
  model.meta["seed"] = cfg.seed;

  auto gen_params = model.generator_params();
  auto disc_params = model.discriminator_params();
  nn::Adam<T> opt_g, opt_d;
  opt_g.lr = static_cast<T>(cfg.lr);
  opt_g.beta1 = T(0.5);
  opt_d.lr = static_cast<T>(cfg.disc_lr > 0 ? cfg.disc_lr : cfg.lr);
  opt_d.beta1 = T(0.5);
  opt_g.init(gen_params);
  opt_d.init(disc_params);

  json report = {{"epochs", cfg.epochs},
                 {"config",
                  {{"batch_size", cfg.batch_size},
                   {"lr", cfg.lr},
                   {"alpha", cfg.loss_cfg.alpha},
                   {"beta", cfg.loss_cfg.beta},
                   {"base_channels", cfg.base_channels},
                   {"seed", cfg.seed},
                   {"n_mr", mr.size()},
                   {"n_ct", ct.size()}}},
                 {"terms", json::object()}};
  for (const char* term : {"adv_A", "adv_B", "cyc_A", "cyc_B", "reg_A", "reg_B",
                           "gen_total", "disc_total"})
    report["terms"][term] = json::array();

  // Salvage snapshot for NaN aborts.
  auto snapshot = [&] {
    std::vector<std::vector<T>> vals;
    for (auto* net : {&model.G_A, &model.G_B, &model.D_A, &model.D_B})
      for (auto& p : net->params) vals.push_back(p.values());
    return vals;
  };
  auto restore = [&](const std::vector<std::vector<T>>& vals) {
    std::size_t k = 0;
    for (auto* net : {&model.G_A, &model.G_B, &model.D_A, &model.D_B})
      for (auto& p : net->params) p.values() = vals[k++];
  };
  auto last_good = snapshot();

  const std::size_t steps_per_epoch =
      (std::max(mr.size(), ct.size()) + cfg.batch_size - 1) / cfg.batch_size;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng erng(derive_seed(cfg.seed, "cgan-epoch", static_cast<std::uint64_t>(epoch)));
    std::vector<std::size_t> order_a(mr.size()), order_b(ct.size());
    for (std::size_t i = 0; i < order_a.size(); ++i) order_a[i] = i;
    for (std::size_t i = 0; i < order_b.size(); ++i) order_b[i] = i;
    erng.shuffle(order_a);
    erng.shuffle(order_b);

    GenLossTerms sums;
    double disc_sum = 0.0, gen_sum = 0.0;
    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      std::vector<std::size_t> pick_a(cfg.batch_size), pick_b(cfg.batch_size);
      for (int k = 0; k < cfg.batch_size; ++k) {
        pick_a[k] = order_a[(step * cfg.batch_size + k) % mr.size()];
        pick_b[k] = order_b[(step * cfg.batch_size + k) % ct.size()];
      }
      auto I_A = dataset::make_batch(mr, pick_a);
      auto I_B = dataset::make_batch(ct, pick_b);

      // Discriminator step on detached fakes from the current generators.
      auto fake_ab = model.G_B.forward(I_A, /*frozen=*/true);
      auto fake_ba = model.G_A.forward(I_B, /*frozen=*/true);
      auto d_loss = disc_loss(model, I_A, I_B, fake_ab, fake_ba);
      const double d_val = static_cast<double>(d_loss.item());
      if (!std::isfinite(d_val)) {
        restore(last_good);
        save_cgan(model, out_ckpt);
        throw TrainAbort("train_cgan: non-finite discriminator loss at epoch " +
                         std::to_string(epoch) + "; last good checkpoint written");
      }
      nn::backward(d_loss);
      opt_d.step(disc_params);

      // Generator step.
      auto batch = cycle_forward(model, I_A, I_B);
      GenLossTerms terms;
      auto g_loss = gen_loss(batch, model, &terms);
      const double g_val = static_cast<double>(g_loss.item());
      if (!std::isfinite(g_val)) {
        restore(last_good);
        save_cgan(model, out_ckpt);
        throw TrainAbort("train_cgan: non-finite generator loss at epoch " +
                         std::to_string(epoch) + "; last good checkpoint written");
      }
      nn::backward(g_loss);
      opt_g.step(gen_params);

      sums.adv_A += terms.adv_A;
      sums.adv_B += terms.adv_B;
      sums.cyc_A += terms.cyc_A;
      sums.cyc_B += terms.cyc_B;
      sums.reg_A += terms.reg_A;
      sums.reg_B += terms.reg_B;
      disc_sum += d_val;
      gen_sum += g_val;
    }
    const double inv = 1.0 / static_cast<double>(steps_per_epoch);
    report["terms"]["adv_A"].push_back(sums.adv_A * inv);
    report["terms"]["adv_B"].push_back(sums.adv_B * inv);
    report["terms"]["cyc_A"].push_back(sums.cyc_A * inv);
    report["terms"]["cyc_B"].push_back(sums.cyc_B * inv);
    report["terms"]["reg_A"].push_back(sums.reg_A * inv);
    report["terms"]["reg_B"].push_back(sums.reg_B * inv);
    report["terms"]["disc_total"].push_back(disc_sum * inv);
    report["terms"]["gen_total"].push_back(gen_sum * inv);
    last_good = snapshot();
  }

  save_cgan(model, out_ckpt);
  return report;
}

// ---- inference -----------------------------------------------------------------------

/// G_B applied to one preprocessed MR slice; output clamped onto [0,1] and
/// tagged SCT/NORM01 on the same grid.
template <typename T>
Slice translate_mr_to_sct(const TranslationModel<T>& model, const Slice& mr) {
  require(mr.modality == Modality::MR, "translate_mr_to_sct expects an MR slice");
  auto data = dataset::to_net<T>(mr);  // throws on unpreprocessed kinds
  auto x = Tensor<T>::leaf({1, 1, mr.height(), mr.width()}, std::move(data), false);
  auto y = model.G_B.forward(x, /*frozen=*/true);
  Slice out;
  out.pixels = Image2D(mr.height(), mr.width());
  for (std::size_t i = 0; i < out.pixels.size(); ++i)
    out.pixels[i] = std::clamp(static_cast<double>(y.values()[i]), 0.0, 1.0);
  out.modality = Modality::SCT;
  out.intensity_kind = IntensityKind::NORM01;
  out.spacing_row_mm = mr.spacing_row_mm;
  out.spacing_col_mm = mr.spacing_col_mm;
  out.id = mr.id;
  return out;
}

}  // namespace xmodseg::translate
