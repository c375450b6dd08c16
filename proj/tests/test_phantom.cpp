#include <gtest/gtest.h>

#include <deque>
#include <filesystem>

#include "xmodseg/phantom.hpp"

using namespace xmodseg;
using phantom::PhantomParams;
using phantom::TissueClass;
namespace fs = std::filesystem;

namespace {

PhantomParams small_params(std::uint64_t seed = 7) {
  PhantomParams p;
  p.size = 64;
  p.seed = seed;
  return p;
}

// 8-connected component count of a binary map.
int component_count(const std::vector<std::uint8_t>& px, int h, int w) {
  std::vector<std::uint8_t> seen(px.size(), 0);
  int comps = 0;
  for (std::size_t s = 0; s < px.size(); ++s) {
    if (!px[s] || seen[s]) continue;
    ++comps;
    std::deque<std::size_t> q{s};
    seen[s] = 1;
    while (!q.empty()) {
      const std::size_t i = q.front();
      q.pop_front();
      const int r = static_cast<int>(i) / w, c = static_cast<int>(i) % w;
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          const int rr = r + dr, cc = c + dc;
          if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
          const std::size_t j = static_cast<std::size_t>(rr) * w + cc;
          if (px[j] && !seen[j]) {
            seen[j] = 1;
            q.push_back(j);
          }
        }
    }
  }
  return comps;
}

}  // namespace

TEST(Phantom, DeterministicForSeedAndIndex) {
  auto p = small_params();
  auto a = phantom::gen_sample(p, 0);
  auto b = phantom::gen_sample(p, 0);
  EXPECT_EQ(a.mr.pixels.data(), b.mr.pixels.data());
  EXPECT_EQ(a.ct.pixels.data(), b.ct.pixels.data());
  EXPECT_EQ(a.sat.px, b.sat.px);
  EXPECT_EQ(a.vat.px, b.vat.px);
  EXPECT_EQ(a.tissue_map, b.tissue_map);

  auto c = phantom::gen_sample(p, 1);
  EXPECT_NE(a.ct.pixels.data(), c.ct.pixels.data());
}

TEST(Phantom, ZeroFatParamsGiveEmptyMasks) {
  auto p = small_params();
  p.sat_thickness_frac = 0.0;
  p.vat_blob_count = 0;
  auto s = phantom::gen_sample(p, 0);
  EXPECT_EQ(s.sat.count(), 0u);
  EXPECT_EQ(s.vat.count(), 0u);
}

TEST(Phantom, SatMaskCtPixelsAllInFatBand) {
  auto s = phantom::gen_sample(small_params(), 0);
  std::size_t in_band = 0, total = 0;
  for (std::size_t i = 0; i < s.sat.px.size(); ++i) {
    if (!s.sat.px[i]) continue;
    ++total;
    const double v = s.ct_prenoise[i];
    if (v >= phantom::kFatHuBand.lo && v <= phantom::kFatHuBand.hi) ++in_band;
  }
  ASSERT_GT(total, 0u);
  EXPECT_EQ(in_band, total);  // fraction exactly 1.0
}

// The downstream oracle: fat-band threshold of pre-noise CT, split by the
// muscle wall, reproduces both masks exactly.
TEST(Phantom, FatThresholdOracleReproducesMasksExactly) {
  for (std::uint64_t seed : {1u, 22u, 333u}) {
    auto s = phantom::gen_sample(small_params(seed), 3);
    for (std::size_t i = 0; i < s.tissue_map.size(); ++i) {
      const bool fat = s.ct_prenoise[i] >= phantom::kFatHuBand.lo &&
                       s.ct_prenoise[i] <= phantom::kFatHuBand.hi;
      const bool vat_oracle = fat && s.cavity[i];
      const bool sat_oracle = fat && !s.cavity[i];
      ASSERT_EQ(vat_oracle, s.vat.px[i] != 0) << "pixel " << i;
      ASSERT_EQ(sat_oracle, s.sat.px[i] != 0) << "pixel " << i;
    }
  }
}

TEST(Phantom, CtClassesStayInsideBands) {
  auto s = phantom::gen_sample(small_params(9), 0);
  for (std::size_t i = 0; i < s.tissue_map.size(); ++i) {
    const auto band = phantom::kCtBand[static_cast<std::size_t>(s.tissue_map[i])];
    EXPECT_GE(s.ct_prenoise[i], band.lo);
    EXPECT_LE(s.ct_prenoise[i], band.hi);
    // post-noise values are clipped to the same band
    EXPECT_GE(s.ct.pixels[i], band.lo);
    EXPECT_LE(s.ct.pixels[i], band.hi);
  }
}

TEST(Phantom, MasksDisjointAndSubsetOfTissueMap) {
  for (std::uint64_t idx = 0; idx < 5; ++idx) {
    auto s = phantom::gen_sample(small_params(17), idx);
    for (std::size_t i = 0; i < s.sat.px.size(); ++i) {
      EXPECT_FALSE(s.sat.px[i] && s.vat.px[i]);
      if (s.sat.px[i]) EXPECT_EQ(s.tissue_map[i], TissueClass::SAT);
      if (s.vat.px[i]) EXPECT_EQ(s.tissue_map[i], TissueClass::VAT);
    }
  }
}

TEST(Phantom, SatRingIsOneConnectedComponent) {
  Rng prng(41);
  for (int trial = 0; trial < 8; ++trial) {
    auto p = small_params(100 + trial);
    p.sat_thickness_frac = prng.uniform(0.01, 0.2);
    auto s = phantom::gen_sample(p, 0);
    ASSERT_GT(s.sat.count(), 0u);
    std::vector<std::uint8_t> px(s.sat.px.begin(), s.sat.px.end());
    EXPECT_EQ(component_count(px, s.sat.h, s.sat.w), 1)
        << "thickness " << p.sat_thickness_frac;
  }
}

TEST(Phantom, BiasFieldHasMeanOneAndIsPositive) {
  auto p = small_params(5);
  p.bias_amplitude = 0.4;
  auto s = phantom::gen_sample(p, 0);
  double sum = 0.0;
  for (std::size_t i = 0; i < s.bias_field.size(); ++i) {
    EXPECT_GT(s.bias_field[i], 0.0);
    sum += s.bias_field[i];
  }
  EXPECT_NEAR(sum / s.bias_field.size(), 1.0, 1e-9);
}

TEST(Phantom, AchievedVatFracTracksTarget) {
  auto p = small_params(23);
  p.size = 128;
  p.vat_area_frac_target = 0.10;
  auto s = phantom::gen_sample(p, 0);
  EXPECT_NEAR(s.achieved_vat_frac, 0.10, 0.03);
  EXPECT_TRUE(s.vat_target_met);
}

TEST(Phantom, InvalidParamsRejected) {
  auto p = small_params();
  p.sat_thickness_frac = 0.5;
  EXPECT_THROW(phantom::gen_sample(p, 0), ValidationError);
  p = small_params();
  p.size = 32;
  EXPECT_THROW(phantom::gen_sample(p, 0), ValidationError);
}

TEST(PhantomDataset, PairedModeWritesAlignedPairs) {
  auto root = fs::temp_directory_path() / "xmodseg_phantom_paired";
  fs::remove_all(root);
  auto p = small_params(3);
  auto manifest = phantom::gen_dataset(p, 4, false, root);
  EXPECT_EQ(manifest["splits"]["train"].size() + manifest["splits"]["test"].size(), 4u);

  int pairs = 0;
  for (const std::string split : {"train", "test"}) {
    for (const auto& id : imgio::list_ids(root / split / "mr")) {
      Slice mr = imgio::load_slice(imgio::slice_path(root, split, "mr", id).string());
      Slice ct = imgio::load_slice(imgio::slice_path(root, split, "ct", id).string());
      Mask sat = imgio::load_mask(imgio::mask_path(root, split, "sat", id).string(),
                                  Tissue::SAT, id);
      Mask vat = imgio::load_mask(imgio::mask_path(root, split, "vat", id).string(),
                                  Tissue::VAT, id);
      ASSERT_TRUE(sat.matches(mr));
      // Alignment check: fat-band threshold of the saved CT equals sat|vat.
      std::size_t mismatches = 0;
      for (std::size_t i = 0; i < sat.px.size(); ++i) {
        const bool fat = ct.pixels[i] >= phantom::kFatHuBand.lo - 0.1 &&
                         ct.pixels[i] <= phantom::kFatHuBand.hi + 0.1;
        if (fat != (sat.px[i] || vat.px[i])) ++mismatches;
      }
      EXPECT_EQ(mismatches, 0u) << "pair " << id;
      ++pairs;
    }
  }
  EXPECT_EQ(pairs, 4);
  fs::remove_all(root);
}

TEST(PhantomDataset, UnpairedModeUsesDisjointIdsAndSeeds) {
  auto root = fs::temp_directory_path() / "xmodseg_phantom_unpaired";
  fs::remove_all(root);
  auto p = small_params(4);
  auto manifest = phantom::gen_dataset(p, 20, true, root);

  auto train_mr = imgio::list_ids(root / "train" / "mr");
  auto train_ct = imgio::list_ids(root / "train" / "ct");
  EXPECT_EQ(train_mr.size(), 17u);
  EXPECT_EQ(train_ct.size(), 17u);
  for (const auto& id : train_mr)
    EXPECT_EQ(std::find(train_ct.begin(), train_ct.end(), id), train_ct.end());

  // Split arithmetic: ceil(0.15 * 20) = 3 test samples, paired.
  EXPECT_EQ(manifest["splits"]["test"].size(), 3u);
  EXPECT_EQ(imgio::list_ids(root / "test" / "mr").size(), 3u);
  EXPECT_EQ(imgio::list_ids(root / "test" / "ct").size(), 3u);
  fs::remove_all(root);
}

TEST(PhantomDataset, RefusesNonEmptyRootWithoutOverwrite) {
  auto root = fs::temp_directory_path() / "xmodseg_phantom_refuse";
  fs::remove_all(root);
  fs::create_directories(root);
  std::ofstream(root / "existing.txt") << "x";
  auto p = small_params(5);
  EXPECT_THROW(phantom::gen_dataset(p, 4, false, root), ValidationError);
  EXPECT_NO_THROW(phantom::gen_dataset(p, 4, false, root, /*overwrite=*/true));
  fs::remove_all(root);
}
