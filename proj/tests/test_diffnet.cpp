#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "xmodseg/network.hpp"
#include "xmodseg/optim.hpp"
#include "xmodseg/rng.hpp"

using namespace xmodseg;
using namespace xmodseg::nn;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, bool requires_grad,
                        double lo = -1.0, double hi = 1.0) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>::leaf(std::move(shape), std::move(v), requires_grad);
}

// Direct convolution loop, the oracle for conv2d.
std::vector<double> conv_ref(const std::vector<double>& x, int N, int C, int H,
                             int W, const std::vector<double>& w, int Cout,
                             int K, const std::vector<double>& b, int s, int p,
                             int Ho, int Wo) {
  std::vector<double> y(static_cast<std::size_t>(N) * Cout * Ho * Wo, 0.0);
  for (int n = 0; n < N; ++n)
    for (int co = 0; co < Cout; ++co)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          double acc = b[co];
          for (int ci = 0; ci < C; ++ci)
            for (int ky = 0; ky < K; ++ky)
              for (int kx = 0; kx < K; ++kx) {
                const int iy = oy * s + ky - p, ix = ox * s + kx - p;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += x[((static_cast<std::size_t>(n) * C + ci) * H + iy) * W + ix] *
                       w[((static_cast<std::size_t>(co) * C + ci) * K + ky) * K + kx];
              }
          y[((static_cast<std::size_t>(n) * Cout + co) * Ho + oy) * Wo + ox] = acc;
        }
  return y;
}

// Direct transposed-convolution scatter loop, the oracle for conv_transpose2d.
std::vector<double> convt_ref(const std::vector<double>& x, int N, int C, int H,
                              int W, const std::vector<double>& w, int Cout,
                              int K, const std::vector<double>& b, int s, int p,
                              int op, int Hy, int Wy) {
  std::vector<double> y(static_cast<std::size_t>(N) * Cout * Hy * Wy, 0.0);
  for (int n = 0; n < N; ++n)
    for (int ci = 0; ci < C; ++ci)
      for (int h = 0; h < H; ++h)
        for (int wd = 0; wd < W; ++wd) {
          const double xv =
              x[((static_cast<std::size_t>(n) * C + ci) * H + h) * W + wd];
          for (int co = 0; co < Cout; ++co)
            for (int ky = 0; ky < K; ++ky)
              for (int kx = 0; kx < K; ++kx) {
                const int oy = h * s + ky - p, ox = wd * s + kx - p;
                if (oy < 0 || oy >= Hy || ox < 0 || ox >= Wy) continue;
                y[((static_cast<std::size_t>(n) * Cout + co) * Hy + oy) * Wy + ox] +=
                    xv * w[((static_cast<std::size_t>(ci) * Cout + co) * K + ky) * K + kx];
              }
        }
  for (int n = 0; n < N; ++n)
    for (int co = 0; co < Cout; ++co)
      for (int k = 0; k < Hy * Wy; ++k)
        y[(static_cast<std::size_t>(n) * Cout + co) * Hy * Wy + k] += b[co];
  return y;
}

}  // namespace

// ---- losses -------------------------------------------------------------------

TEST(Losses, MseBasics) {
  auto x = Tensor<double>::leaf({2}, {0.0, 1.0}, false);
  auto y = Tensor<double>::leaf({2}, {1.0, 1.0}, false);
  EXPECT_DOUBLE_EQ(mse(x, x).item(), 0.0);
  EXPECT_DOUBLE_EQ(mse(x, y).item(), 0.5);
  auto z = Tensor<double>::leaf({3}, {0, 0, 0}, false);
  EXPECT_THROW(mse(x, z), ValidationError);
}

TEST(Losses, MseMatchesScalarLoopOracle) {
  Rng rng(3);
  auto a = random_tensor<double>({2, 3, 5, 4}, rng, false);
  auto b = random_tensor<double>({2, 3, 5, 4}, rng, false);
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a.values()[i] - b.values()[i];
    acc += d * d;
  }
  EXPECT_NEAR(mse(a, b).item(), acc / a.numel(), 1e-12);
}

TEST(Losses, BceClosedForms) {
  auto ones = Tensor<double>::leaf({4}, {1, 1, 1, 1}, false);
  EXPECT_LE(bce(ones, ones).item(), 1.2e-7);
  auto half = Tensor<double>::leaf({4}, {0.5, 0.5, 0.5, 0.5}, false);
  auto t = Tensor<double>::leaf({4}, {0, 1, 0, 1}, false);
  EXPECT_NEAR(bce(half, t).item(), std::log(2.0), 1e-9);
  auto z = Tensor<double>::leaf({3}, {0.5, 0.5, 0.5}, false);
  EXPECT_THROW(bce(ones, z), ValidationError);
}

TEST(Losses, SoftDicePerfectPredictionIsNearZero) {
  auto t = Tensor<double>::leaf({8}, {1, 1, 0, 0, 1, 0, 1, 1}, false);
  EXPECT_LE(soft_dice_loss(t, t).item(), 0.1);  // smooth term keeps it > 0
  auto empty = Tensor<double>::leaf({8}, {0, 0, 0, 0, 0, 0, 0, 0}, false);
  EXPECT_DOUBLE_EQ(soft_dice_loss(empty, empty).item(), 0.0);  // 1 - s/s
}

// ---- backward ------------------------------------------------------------------

TEST(Backward, QuadraticGradient) {
  auto p = Tensor<double>::leaf({1}, {3.0}, true);
  auto target = Tensor<double>::scalar(0.0);
  auto loss = mse(p, target);
  backward(loss);
  EXPECT_DOUBLE_EQ(p.grad()[0], 6.0);  // d/dp p^2 = 2p
}

TEST(Backward, UnrelatedParamGetsZeroGrad) {
  auto p = Tensor<double>::leaf({1}, {3.0}, true);
  auto q = Tensor<double>::leaf({1}, {5.0}, true);
  auto loss = mse(p, Tensor<double>::scalar(0.0));
  backward(loss);
  EXPECT_DOUBLE_EQ(q.grad()[0], 0.0);
}

TEST(Backward, DetachedLossRejected) {
  auto a = Tensor<double>::leaf({1}, {2.0}, false);
  auto loss = mse(a, Tensor<double>::scalar(0.0));
  EXPECT_THROW(backward(loss), ValidationError);
}

TEST(Backward, ResetThenWriteSemantics) {
  auto p = Tensor<double>::leaf({1}, {3.0}, true);
  auto loss = mse(p, Tensor<double>::scalar(0.0));
  backward(loss);
  const double g1 = p.grad()[0];
  backward(loss);  // second call recomputes, must not accumulate
  EXPECT_DOUBLE_EQ(p.grad()[0], g1);
}

TEST(Backward, FanOutAccumulates) {
  auto p = Tensor<double>::leaf({1}, {2.0}, true);
  auto doubled = add(p, p);  // y = 2p, dy/dp = 2
  auto loss = mse(doubled, Tensor<double>::scalar(0.0));
  backward(loss);
  // loss = (2p)^2 -> d/dp = 8p = 16
  EXPECT_DOUBLE_EQ(p.grad()[0], 16.0);
}

// ---- conv oracle ------------------------------------------------------------------

TEST(Conv2d, IdentityOneByOneConv) {
  Rng rng(5);
  auto x = random_tensor<double>({1, 1, 8, 8}, rng, false);
  auto w = Tensor<double>::leaf({1, 1, 1, 1}, {1.0}, false);
  auto b = Tensor<double>::zeros({1});
  auto y = conv2d(x, w, b, 1, 0);
  EXPECT_EQ(y.values(), x.values());
}

TEST(Conv2d, StrideTwoHalvesSpatialShape) {
  Rng rng(6);
  auto x = random_tensor<float>({1, 1, 64, 64}, rng, false);
  auto w = random_tensor<float>({4, 1, 3, 3}, rng, false);
  auto b = Tensor<float>::zeros({4});
  auto y = conv2d(x, w, b, 2, 1);
  EXPECT_EQ(y.shape(), (Shape{1, 4, 32, 32}));
}

TEST(Conv2d, DeterministicForward) {
  Rng rng(7);
  auto x = random_tensor<float>({2, 3, 16, 16}, rng, false);
  auto w = random_tensor<float>({5, 3, 3, 3}, rng, false);
  auto b = random_tensor<float>({5}, rng, false);
  auto y1 = conv2d(x, w, b, 1, 1);
  auto y2 = conv2d(x, w, b, 1, 1);
  EXPECT_EQ(y1.values(), y2.values());
}

TEST(Conv2d, MatchesDirectLoopOracle) {
  Rng rng(8);
  for (auto [s, p] : {std::pair{1, 0}, {1, 1}, {2, 1}, {2, 0}}) {
    const int N = 2, C = 3, H = 9, W = 7, Cout = 4, K = 3;
    auto x = random_tensor<double>({N, C, H, W}, rng, false);
    auto w = random_tensor<double>({Cout, C, K, K}, rng, false);
    auto b = random_tensor<double>({Cout}, rng, false);
    auto y = conv2d(x, w, b, s, p);
    const int Ho = (H + 2 * p - K) / s + 1, Wo = (W + 2 * p - K) / s + 1;
    auto ref = conv_ref(x.values(), N, C, H, W, w.values(), Cout, K, b.values(),
                        s, p, Ho, Wo);
    ASSERT_EQ(y.numel(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i)
      ASSERT_NEAR(y.values()[i], ref[i], 1e-12) << "s=" << s << " p=" << p;
  }
}

TEST(Conv2d, ShapeMismatchRejected) {
  Rng rng(9);
  auto x = random_tensor<double>({1, 2, 8, 8}, rng, false);
  auto w = random_tensor<double>({4, 3, 3, 3}, rng, false);  // expects C=3
  auto b = Tensor<double>::zeros({4});
  EXPECT_THROW(conv2d(x, w, b, 1, 1), ValidationError);
}

TEST(ConvTranspose2d, MatchesDirectLoopOracle) {
  Rng rng(10);
  for (auto [s, p, op] : {std::tuple{2, 1, 1}, {2, 0, 0}, {1, 1, 0}, {2, 1, 0}}) {
    const int N = 2, C = 3, H = 5, W = 6, Cout = 4, K = 3;
    auto x = random_tensor<double>({N, C, H, W}, rng, false);
    auto w = random_tensor<double>({C, Cout, K, K}, rng, false);
    auto b = random_tensor<double>({Cout}, rng, false);
    auto y = conv_transpose2d(x, w, b, s, p, op);
    const int Hy = (H - 1) * s - 2 * p + K + op;
    const int Wy = (W - 1) * s - 2 * p + K + op;
    ASSERT_EQ(y.shape(), (Shape{N, Cout, Hy, Wy}));
    auto ref = convt_ref(x.values(), N, C, H, W, w.values(), Cout, K, b.values(),
                         s, p, op, Hy, Wy);
    for (std::size_t i = 0; i < ref.size(); ++i)
      ASSERT_NEAR(y.values()[i], ref[i], 1e-12) << "s=" << s << " p=" << p;
  }
}

TEST(ConvTranspose2d, ExactDoublingWithKernel2Stride2) {
  Rng rng(11);
  auto x = random_tensor<float>({1, 2, 16, 16}, rng, false);
  auto w = random_tensor<float>({2, 3, 2, 2}, rng, false);
  auto b = Tensor<float>::zeros({3});
  auto y = conv_transpose2d(x, w, b, 2, 0, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 3, 32, 32}));
}

TEST(InstanceNorm, NormalizesPerSamplePerChannel) {
  Rng rng(12);
  const int N = 2, C = 3, H = 8, W = 8;
  auto x = random_tensor<double>({N, C, H, W}, rng, false, -3.0, 5.0);
  auto gamma = Tensor<double>::leaf({C}, {1, 1, 1}, false);
  auto beta = Tensor<double>::zeros({C});
  auto y = instance_norm(x, gamma, beta);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      double mean = 0, var = 0;
      const double* ys = y.values().data() + (static_cast<std::size_t>(n) * C + c) * H * W;
      for (int k = 0; k < H * W; ++k) mean += ys[k];
      mean /= H * W;
      for (int k = 0; k < H * W; ++k) var += (ys[k] - mean) * (ys[k] - mean);
      var /= H * W;
      EXPECT_NEAR(mean, 0.0, 1e-9);
      EXPECT_NEAR(var, 1.0, 1e-3);  // eps shifts variance slightly below 1
    }
}

// ---- gradcheck: every differentiable op -----------------------------------------

TEST(GradCheck, QuadraticToyIsExact) {
  auto p = Tensor<double>::leaf({1}, {1.7}, true);
  Rng rng(13);
  auto err = gradcheck<double>(
      [&] { return mse(p, Tensor<double>::scalar(0.4)); }, {p}, 8, rng);
  EXPECT_LE(err, 1e-6);
}

TEST(GradCheck, ZeroParametersReturnsZero) {
  Rng rng(14);
  auto err = gradcheck<double>(
      [] {
        auto a = Tensor<double>::leaf({1}, {1.0}, true);
        return mse(a, Tensor<double>::scalar(0.0));
      },
      {}, 3, rng);
  EXPECT_EQ(err, 0.0);
}

TEST(GradCheck, ConvChainOnEightByEight) {
  // The spec's micro case: 2 conv layers + mse on an 8x8 input.
  Rng rng(15);
  auto x = random_tensor<double>({1, 1, 8, 8}, rng, false);
  auto target = random_tensor<double>({1, 2, 8, 8}, rng, false);
  auto w1 = random_tensor<double>({3, 1, 3, 3}, rng, true, -0.5, 0.5);
  auto b1 = random_tensor<double>({3}, rng, true, -0.1, 0.1);
  auto w2 = random_tensor<double>({2, 3, 3, 3}, rng, true, -0.5, 0.5);
  auto b2 = random_tensor<double>({2}, rng, true, -0.1, 0.1);
  auto make_loss = [&] {
    auto h = relu(conv2d(x, w1, b1, 1, 1));
    auto y = conv2d(h, w2, b2, 1, 1);
    return mse(y, target);
  };
  auto err = gradcheck<double>(make_loss, {w1, b1, w2, b2}, 40, rng);
  EXPECT_LE(err, 1e-4);
}

TEST(GradCheck, ConvTransposeAndNormAndActivations) {
  Rng rng(16);
  auto x = random_tensor<double>({2, 2, 6, 6}, rng, false);
  auto target = random_tensor<double>({2, 3, 12, 12}, rng, false);
  auto w = random_tensor<double>({2, 3, 4, 4}, rng, true, -0.4, 0.4);
  auto b = random_tensor<double>({3}, rng, true, -0.1, 0.1);
  auto gamma = random_tensor<double>({3}, rng, true, 0.5, 1.5);
  auto beta = random_tensor<double>({3}, rng, true, -0.3, 0.3);
  auto make_loss = [&] {
    auto h = conv_transpose2d(x, w, b, 2, 1, 0);  // 6 -> 12? (6-1)*2-2+4+0=12
    h = instance_norm(h, gamma, beta);
    h = leaky_relu(h, 0.2);
    return mse(h, target);
  };
  auto err = gradcheck<double>(make_loss, {w, b, gamma, beta}, 40, rng);
  EXPECT_LE(err, 1e-4);
}

TEST(GradCheck, SigmoidTanhConcatAddBceDice) {
  Rng rng(17);
  auto x = random_tensor<double>({1, 2, 6, 6}, rng, false);
  auto w1 = random_tensor<double>({2, 2, 3, 3}, rng, true, -0.5, 0.5);
  auto b1 = random_tensor<double>({2}, rng, true, -0.1, 0.1);
  auto w2 = random_tensor<double>({1, 4, 1, 1}, rng, true, -0.5, 0.5);
  auto b2 = random_tensor<double>({1}, rng, true, -0.1, 0.1);
  std::vector<double> tvals(36);
  for (auto& t : tvals) t = rng.bernoulli(0.4) ? 1.0 : 0.0;
  auto target = Tensor<double>::leaf({1, 1, 6, 6}, std::move(tvals), false);
  auto make_loss = [&] {
    auto h = tanh_op(conv2d(x, w1, b1, 1, 1));
    auto cat = concat_channels(h, x);
    auto logits = conv2d(cat, w2, b2, 1, 0);
    auto prob = sigmoid(logits);
    auto l1 = bce(prob, target);
    auto l2 = soft_dice_loss(prob, target);
    return add(l1, mul_scalar(l2, 0.7));
  };
  auto err = gradcheck<double>(make_loss, {w1, b1, w2, b2}, 40, rng);
  EXPECT_LE(err, 1e-4);
}

// ---- adam -----------------------------------------------------------------------

TEST(Adam, ZeroGradLeavesParamsUnchanged) {
  auto p = Tensor<float>::leaf({2}, {1.0f, -2.0f}, true);
  std::vector<Tensor<float>> params{p};
  Adam<float> opt;
  opt.init(params);
  opt.step(params);  // no backward ran: grads are zero
  EXPECT_FLOAT_EQ(params[0].values()[0], 1.0f);
  EXPECT_FLOAT_EQ(params[0].values()[1], -2.0f);
}

TEST(Adam, ZeroLearningRateLeavesParamsUnchanged) {
  auto p = Tensor<float>::leaf({1}, {3.0f}, true);
  std::vector<Tensor<float>> params{p};
  auto loss = mse(p, Tensor<float>::scalar(0.0f));
  backward(loss);
  Adam<float> opt;
  opt.lr = 0.0f;
  opt.init(params);
  opt.step(params);
  EXPECT_FLOAT_EQ(params[0].values()[0], 3.0f);
}

TEST(Adam, OneStepReducesQuadraticLoss) {
  auto p = Tensor<double>::leaf({1}, {3.0}, true);
  std::vector<Tensor<double>> params{p};
  Adam<double> opt;
  opt.lr = 0.1;
  opt.init(params);
  const double before = mse(p, Tensor<double>::scalar(0.0)).item();
  backward(mse(p, Tensor<double>::scalar(0.0)));
  opt.step(params);
  const double after = mse(p, Tensor<double>::scalar(0.0)).item();
  EXPECT_LT(after, before);
}

TEST(Adam, NanGradientAborts) {
  auto p = Tensor<float>::leaf({1}, {1.0f}, true);
  std::vector<Tensor<float>> params{p};
  Adam<float> opt;
  opt.init(params);
  p.node()->g.assign(1, std::nanf(""));
  EXPECT_THROW(opt.step(params), TrainAbort);
}

// ---- network + serialization -------------------------------------------------------

namespace {

std::vector<LayerSpec> tiny_specs() {
  return {
      Conv2dSpec{1, 4, 3, 1, 1},
      InstanceNormSpec{4},
      ActSpec{Act::ReLU},
      PushSpec{},
      Conv2dSpec{4, 4, 3, 1, 1},
      AddPopSpec{},
      Conv2dSpec{4, 1, 1, 1, 0},
      ActSpec{Act::Sigmoid},
  };
}

}  // namespace

TEST(Network, ParamCountMatchesSpecArithmetic) {
  auto net = build_network<float>(tiny_specs(), 1);
  // conv1: 4*1*3*3 + 4; inorm: 4+4; conv2: 4*4*3*3 + 4; conv3: 4*1*1 + 1
  const std::size_t expect = (36 + 4) + 8 + (144 + 4) + (4 + 1);
  EXPECT_EQ(param_count(tiny_specs()), expect);
  EXPECT_EQ(net.total_params(), expect);
}

TEST(Network, SameSeedSameParams) {
  auto a = build_network<float>(tiny_specs(), 42);
  auto b = build_network<float>(tiny_specs(), 42);
  for (std::size_t i = 0; i < a.params.size(); ++i)
    EXPECT_EQ(a.params[i].values(), b.params[i].values());
  auto c = build_network<float>(tiny_specs(), 43);
  EXPECT_NE(a.params[0].values(), c.params[0].values());
}

TEST(Network, CheckpointRoundTripsBitExactly) {
  auto net = build_network<float>(tiny_specs(), 7);
  net.meta["note"] = "roundtrip";
  Rng rng(20);
  auto x = random_tensor<float>({1, 1, 16, 16}, rng, false);
  auto y0 = net.forward(x);

  auto path = (std::filesystem::temp_directory_path() / "xmodseg_net.ckpt").string();
  save_network(net, path);
  auto back = load_network<float>(path);
  EXPECT_EQ(back.meta.at("note"), "roundtrip");
  auto y1 = back.forward(x);
  EXPECT_EQ(y0.values(), y1.values());
}

TEST(Network, CorruptCheckpointRejected) {
  auto path = (std::filesystem::temp_directory_path() / "xmodseg_bad.ckpt").string();
  std::ofstream(path, std::ios::binary) << "definitely not a checkpoint";
  EXPECT_THROW(load_network<float>(path), FormatError);
}

TEST(Network, FrozenForwardBlocksParamGradients) {
  auto net = build_network<double>(tiny_specs(), 3);
  Rng rng(21);
  auto x = random_tensor<double>({1, 1, 8, 8}, rng, true);
  auto y = net.forward(x, /*frozen=*/true);
  auto loss = mse(y, Tensor<double>::zeros({1, 1, 8, 8}));
  backward(loss);
  for (const auto& p : net.params)
    for (double g : p.grad()) EXPECT_EQ(g, 0.0);
  // but the input still gets a gradient
  double sum = 0;
  for (double g : x.grad()) sum += std::abs(g);
  EXPECT_GT(sum, 0.0);
}

TEST(Network, UNetStyleSkipGradcheck) {
  Rng rng(22);
  auto net = build_network<double>(tiny_specs(), 9);
  auto x = random_tensor<double>({1, 1, 8, 8}, rng, false);
  std::vector<double> tvals(64);
  for (auto& t : tvals) t = rng.bernoulli(0.5) ? 1.0 : 0.0;
  auto target = Tensor<double>::leaf({1, 1, 8, 8}, std::move(tvals), false);
  auto make_loss = [&] {
    auto prob = net.forward(x);
    return add(bce(prob, target), soft_dice_loss(prob, target));
  };
  auto err = gradcheck<double>(make_loss, net.params, 50, rng);
  EXPECT_LE(err, 1e-4);
}
