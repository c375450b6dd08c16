#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "xmodseg/phantom.hpp"
#include "xmodseg/preprocess.hpp"
#include "xmodseg/rng.hpp"

using namespace xmodseg;
namespace pp = xmodseg::preprocess;

namespace {

Slice mr_slice(int h, int w, const std::string& id = "t") {
  Slice s;
  s.pixels = Image2D(h, w);
  s.modality = Modality::MR;
  s.intensity_kind = IntensityKind::RAW;
  s.id = id;
  return s;
}

Slice ct_slice(int h, int w) {
  Slice s;
  s.pixels = Image2D(h, w);
  s.modality = Modality::CT;
  s.intensity_kind = IntensityKind::HU;
  s.id = "ct";
  return s;
}

double rms(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s / static_cast<double>(v.size()));
}

std::vector<double> centered(std::vector<double> v) {
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
  for (double& x : v) x -= mean;
  return v;
}

}  // namespace

// ---- hu_window ---------------------------------------------------------------

TEST(HuWindow, PaperWindowEndpointsMapExactly) {
  auto s = ct_slice(16, 16);
  s.pixels.at(0, 0) = 1300.0;
  s.pixels.at(0, 1) = -700.0;
  s.pixels.at(0, 2) = 300.0;    // (300+700)/2000 = 0.5
  s.pixels.at(0, 3) = -1000.0;  // clamped below the window
  s.pixels.at(0, 4) = 2500.0;   // clamped above
  auto out = pp::hu_window(s);
  EXPECT_EQ(out.pixels.at(0, 0), 1.0);
  EXPECT_EQ(out.pixels.at(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(out.pixels.at(0, 2), 0.5);
  EXPECT_EQ(out.pixels.at(0, 3), 0.0);
  EXPECT_EQ(out.pixels.at(0, 4), 1.0);
  EXPECT_EQ(out.intensity_kind, IntensityKind::NORM01);
}

TEST(HuWindow, MonotoneAndBounded) {
  Rng rng(11);
  auto s = ct_slice(32, 32);
  for (std::size_t i = 0; i < s.pixels.size(); ++i)
    s.pixels[i] = rng.uniform(-1200.0, 1500.0);
  auto out = pp::hu_window(s);
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    EXPECT_GE(out.pixels[i], 0.0);
    EXPECT_LE(out.pixels[i], 1.0);
    for (std::size_t j = i + 1; j < std::min(i + 8, out.pixels.size()); ++j) {
      if (s.pixels[i] <= s.pixels[j])
        EXPECT_LE(out.pixels[i], out.pixels[j]);
    }
  }
}

TEST(HuWindow, RequiresHuKind) {
  auto s = ct_slice(16, 16);
  s.intensity_kind = IntensityKind::NORM01;
  EXPECT_THROW(pp::hu_window(s), ValidationError);
}

TEST(HuWindow, InvalidWindowRejected) {
  auto s = ct_slice(16, 16);
  EXPECT_THROW(pp::hu_window(s, {100.0, -100.0}), ValidationError);
}

// ---- bias_correct --------------------------------------------------------------

TEST(BiasCorrect, FlatImageIsFixpoint) {
  auto s = mr_slice(32, 32);
  for (std::size_t i = 0; i < s.pixels.size(); ++i) s.pixels[i] = 0.7;
  auto out = pp::bias_correct(s);
  for (std::size_t i = 0; i < out.pixels.size(); ++i)
    EXPECT_NEAR(out.pixels[i], 0.7, 0.7 * 1e-6);
}

TEST(BiasCorrect, TooFewBodyPixelsRejected) {
  auto s = mr_slice(16, 16);
  s.pixels.at(2, 2) = 1.0;
  s.pixels.at(5, 9) = 1.1;
  s.pixels.at(12, 3) = 0.9;
  EXPECT_THROW(pp::bias_correct(s), ValidationError);
}

TEST(BiasCorrect, BodyMedianPreserved) {
  phantom::PhantomParams p;
  p.size = 64;
  p.seed = 5;
  p.bias_amplitude = 0.4;
  auto sample = phantom::gen_sample(p, 0);
  const auto body = pp::body_region(sample.mr);
  auto median_of = [&](const Slice& s) {
    auto vals = pp::body_values(s, body);
    std::sort(vals.begin(), vals.end());
    const std::size_t n = vals.size();
    return n % 2 ? vals[n / 2] : 0.5 * (vals[n / 2 - 1] + vals[n / 2]);
  };
  auto out = pp::bias_correct(sample.mr);
  const double m0 = median_of(sample.mr), m1 = median_of(out);
  EXPECT_NEAR(m1, m0, std::abs(m0) * 1e-9);
}

// Oracle: the phantom stores its true bias field; the corrector must remove
// at least half of the log-domain RMS bias over the body region.
TEST(BiasCorrect, RemovesAtLeastHalfTheLogBias) {
  phantom::PhantomParams p;
  p.size = 64;
  p.bias_amplitude = 0.4;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    p.seed = seed;
    auto sample = phantom::gen_sample(p, 0);
    auto out = pp::bias_correct(sample.mr);
    const auto body = pp::body_region(sample.mr);

    std::vector<double> log_true, log_resid;
    for (std::size_t i = 0; i < body.size(); ++i) {
      if (!body[i]) continue;
      if (sample.mr.pixels[i] <= 0.0 || out.pixels[i] <= 0.0) continue;
      log_true.push_back(std::log(sample.bias_field[i]));
      // estimated bias at i = in/out; residual = true - estimated
      log_resid.push_back(std::log(sample.bias_field[i]) -
                          std::log(sample.mr.pixels[i] / out.pixels[i]));
    }
    ASSERT_GT(log_true.size(), 100u);
    const double e0 = rms(centered(log_true));
    const double e1 = rms(centered(log_resid));
    EXPECT_LE(e1, 0.5 * e0) << "seed " << seed << " e0=" << e0 << " e1=" << e1;
  }
}

// ---- standard scale -------------------------------------------------------------

namespace {

Slice ramp_slice(int n, double lo, double hi, const std::string& id) {
  auto s = mr_slice(n, n, id);
  const double step = (hi - lo) / static_cast<double>(n * n - 1);
  for (std::size_t i = 0; i < s.pixels.size(); ++i)
    s.pixels[i] = lo + step * static_cast<double>(i);
  return s;
}

}  // namespace

TEST(StandardScale, TwoIdenticalSlicesAverageToTheirOwnLandmarks) {
  auto a = ramp_slice(32, 0.1, 2.0, "a");
  auto scale = pp::fit_standard_scale({a, a});
  const auto lm = pp::landmarks(a);
  const double span = lm.back() - lm.front();
  for (std::size_t i = 0; i < lm.size(); ++i) {
    const double mapped = 50.0 + (lm[i] - lm.front()) / span * 900.0;
    EXPECT_NEAR(scale.landmarks_std[i], mapped, 1e-9);
  }
}

// Oracle: percentiles of a uniform ramp are analytically equally spaced, so
// the mapped landmarks must sit at 1000 * (p - 1) / 98.
TEST(StandardScale, RampSlicesGiveEquallySpacedLandmarks) {
  auto a = ramp_slice(48, 0.0, 1.0, "a");
  auto b = ramp_slice(48, 0.5, 4.0, "b");
  auto scale = pp::fit_standard_scale({a, b});
  for (std::size_t i = 0; i < pp::kLandmarkPercentiles.size(); ++i) {
    const double expected =
        50.0 + 900.0 * (pp::kLandmarkPercentiles[i] - 1.0) / 98.0;
    EXPECT_NEAR(scale.landmarks_std[i], expected, 3.0) << "landmark " << i;
  }
}

TEST(StandardScale, FewerThanTwoSlicesRejected) {
  auto a = ramp_slice(32, 0.1, 2.0, "a");
  EXPECT_THROW(pp::fit_standard_scale({a}), ValidationError);
  EXPECT_THROW(pp::fit_standard_scale({}), ValidationError);
}

TEST(StandardScale, JsonRoundTrip) {
  auto a = ramp_slice(32, 0.1, 2.0, "a");
  auto b = ramp_slice(32, 0.2, 3.0, "b");
  auto scale = pp::fit_standard_scale({a, b});
  auto back = pp::StandardScale::from_json(scale.to_json());
  EXPECT_EQ(back.landmarks_std, scale.landmarks_std);
  EXPECT_EQ(back.s_min, scale.s_min);
  EXPECT_EQ(back.s_max, scale.s_max);
}

// ---- standardize ----------------------------------------------------------------

TEST(Standardize, SliceAlreadyOnScaleIsUnchanged) {
  auto s = ramp_slice(48, 0.0, 1000.0, "onscale");
  pp::StandardScale scale;
  scale.landmarks_std = pp::landmarks(s);
  auto out = pp::standardize(s, scale);
  const auto body = pp::body_region(s);
  for (std::size_t i = 0; i < body.size(); ++i)
    if (body[i]) EXPECT_NEAR(out.pixels[i], s.pixels[i], 1e-6);
  EXPECT_EQ(out.intensity_kind, IntensityKind::STANDARDIZED);
}

TEST(Standardize, IdempotentWithinTolerance) {
  phantom::PhantomParams p;
  p.size = 64;
  p.seed = 12;
  auto s0 = phantom::gen_sample(p, 0).mr;
  auto s1 = phantom::gen_sample(p, 1).mr;
  auto sx = phantom::gen_sample(p, 2).mr;
  auto scale = pp::fit_standard_scale({s0, s1});
  auto y = pp::standardize(sx, scale);
  y.modality = Modality::MR;  // stays MR
  auto z = pp::standardize(y, scale);
  for (std::size_t i = 0; i < y.pixels.size(); ++i)
    EXPECT_NEAR(z.pixels[i], y.pixels[i], 1e-3 * (scale.s_max - scale.s_min));
}

TEST(Standardize, GainDifferencesCollapseAfterMapping) {
  phantom::PhantomParams p;
  p.size = 64;
  p.seed = 31;
  auto base = phantom::gen_sample(p, 0).mr;
  Slice gained = base;
  for (std::size_t i = 0; i < gained.pixels.size(); ++i) gained.pixels[i] *= 3.5;

  auto scale = pp::fit_standard_scale({base, gained});
  const auto lm_a = pp::landmarks(base);
  const auto lm_b = pp::landmarks(gained);
  double before = 0.0;
  for (std::size_t i = 0; i < lm_a.size(); ++i)
    before += std::abs(lm_a[i] - lm_b[i]);

  const auto lm_a2 = pp::landmarks(pp::standardize(base, scale));
  const auto lm_b2 = pp::landmarks(pp::standardize(gained, scale));
  double after = 0.0;
  for (std::size_t i = 0; i < lm_a2.size(); ++i)
    after += std::abs(lm_a2[i] - lm_b2[i]);

  EXPECT_LE(after, before / 10.0) << "before=" << before << " after=" << after;
}

TEST(Standardize, ConstantSliceRejected) {
  auto s = mr_slice(32, 32);
  for (std::size_t i = 0; i < s.pixels.size(); ++i) s.pixels[i] = 1.0;
  pp::StandardScale scale;
  for (std::size_t i = 0; i < pp::kLandmarkPercentiles.size(); ++i)
    scale.landmarks_std.push_back(static_cast<double>(i) * 100.0);
  EXPECT_THROW(pp::standardize(s, scale), ValidationError);
}

TEST(Standardize, PreservesRankOrderOnBody) {
  phantom::PhantomParams p;
  p.size = 64;
  p.seed = 77;
  auto s = phantom::gen_sample(p, 0).mr;
  auto s2 = phantom::gen_sample(p, 1).mr;
  auto scale = pp::fit_standard_scale({s, s2});
  auto y = pp::standardize(s, scale);
  const auto body = pp::body_region(s);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < body.size(); ++i)
    if (body[i]) idx.push_back(i);
  for (std::size_t k = 1; k < idx.size(); k += 7) {
    const auto i = idx[k - 1], j = idx[k];
    if (s.pixels[i] <= s.pixels[j])
      EXPECT_LE(y.pixels[i], y.pixels[j]);
    else
      EXPECT_GE(y.pixels[i], y.pixels[j]);
  }
}
