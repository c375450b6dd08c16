#pragma once

#include <Eigen/Core>

#include <cmath>
#include <memory>
#include <vector>

#include "xmodseg/tensor.hpp"

// Differentiable ops over 4-D image tensors {N,C,H,W} and scalars.
// Convolutions run as im2col + GEMM (Eigen); the im2col matrix is cached in
// the backward closure. conv_transpose reuses the same two index transforms
// with the roles of image and column grid swapped.

namespace xmodseg::nn {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;  // col-major
template <typename T>
using RowMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using RowMapMut =
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

namespace detail {

template <typename T>
Tensor<T> make_op(Shape shape, std::vector<T> values,
                  std::vector<std::shared_ptr<Node<T>>> parents,
                  std::function<void(Node<T>&)> backward_fn) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->v = std::move(values);
  for (auto& p : parents)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(n));
}

template <typename T>
bool wants_grad(const Node<T>& n) {
  return n.requires_grad && n.g.size() == n.v.size();
}

// cols: (C*K*K) x (N*Ho*Wo), column-major; column j=(n*Ho+oy)*Wo+ox holds the
// receptive field at that output position, rows ordered (c, ky, kx).
template <typename T>
void im2col(const T* x, int N, int C, int H, int W, int K, int s, int p,
            int Ho, int Wo, Mat<T>& cols) {
  const int rows = C * K * K;
  cols.resize(rows, static_cast<long>(N) * Ho * Wo);
#pragma omp parallel for schedule(static)
  for (int noy = 0; noy < N * Ho; ++noy) {
    const int n = noy / Ho, oy = noy % Ho;
    for (int ox = 0; ox < Wo; ++ox) {
      const long j = (static_cast<long>(n) * Ho + oy) * Wo + ox;
      T* col = cols.data() + j * rows;
      for (int c = 0; c < C; ++c) {
        const T* xc = x + (static_cast<std::size_t>(n) * C + c) * H * W;
        for (int ky = 0; ky < K; ++ky) {
          const int iy = oy * s + ky - p;
          if (iy < 0 || iy >= H) {
            for (int kx = 0; kx < K; ++kx) *col++ = T(0);
            continue;
          }
          const T* xrow = xc + static_cast<std::size_t>(iy) * W;
          for (int kx = 0; kx < K; ++kx) {
            const int ix = ox * s + kx - p;
            *col++ = (ix >= 0 && ix < W) ? xrow[ix] : T(0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds columns back onto the image grid.
template <typename T>
void col2im_add(const Mat<T>& cols, int N, int C, int H, int W, int K, int s,
                int p, int Ho, int Wo, T* x) {
  const int rows = C * K * K;
  for (int n = 0; n < N; ++n)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        const long j = (static_cast<long>(n) * Ho + oy) * Wo + ox;
        const T* col = cols.data() + j * rows;
        for (int c = 0; c < C; ++c) {
          T* xc = x + (static_cast<std::size_t>(n) * C + c) * H * W;
          for (int ky = 0; ky < K; ++ky) {
            const int iy = oy * s + ky - p;
            if (iy < 0 || iy >= H) {
              col += K;
              continue;
            }
            T* xrow = xc + static_cast<std::size_t>(iy) * W;
            for (int kx = 0; kx < K; ++kx, ++col) {
              const int ix = ox * s + kx - p;
              if (ix >= 0 && ix < W) xrow[ix] += *col;
            }
          }
        }
      }
}

template <typename T>
void check_image(const Tensor<T>& x, const char* who) {
  require(x.shape().size() == 4,
          std::string(who) + ": expected a {N,C,H,W} tensor, got " +
              shape_str(x.shape()));
}

}  // namespace detail

// ---- convolution -------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 int stride, int pad) {
  detail::check_image(x, "conv2d");
  require(w.shape().size() == 4, "conv2d: weight must be {Cout,Cin,K,K}");
  const int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const int Cout = w.shape()[0], Cin = w.shape()[1], K = w.shape()[2];
  require(w.shape()[3] == K, "conv2d: kernel must be square");
  require(Cin == C, "conv2d: channel mismatch: input " + shape_str(x.shape()) +
                        " vs weight " + shape_str(w.shape()));
  require(b.shape() == Shape{Cout}, "conv2d: bias shape mismatch");
  require(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
  const int Ho = (H + 2 * pad - K) / stride + 1;
  const int Wo = (W + 2 * pad - K) / stride + 1;
  require(H + 2 * pad >= K && W + 2 * pad >= K, "conv2d: kernel larger than input");

  auto cols = std::make_shared<Mat<T>>();
  detail::im2col(x.values().data(), N, C, H, W, K, stride, pad, Ho, Wo, *cols);
  RowMap<T> w_map(w.values().data(), Cout, Cin * K * K);
  Mat<T> y_mat = w_map * (*cols);  // Cout x (N*Ho*Wo)

  std::vector<T> y(static_cast<std::size_t>(N) * Cout * Ho * Wo);
  const T* bp = b.values().data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < Cout; ++c) {
      T* dst = y.data() + (static_cast<std::size_t>(n) * Cout + c) * Ho * Wo;
      for (int k = 0; k < Ho * Wo; ++k)
        dst[k] = y_mat(c, static_cast<long>(n) * Ho * Wo + k) + bp[c];
    }

  auto bwd = [cols, N, C, H, W, Cout, K, stride, pad, Ho, Wo](Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& wn = *self.parents[1];
    auto& bn = *self.parents[2];
    // gradient as Cout x (N*Ho*Wo)
    Mat<T> dy_mat(Cout, static_cast<long>(N) * Ho * Wo);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < Cout; ++c) {
        const T* src = self.g.data() + (static_cast<std::size_t>(n) * Cout + c) * Ho * Wo;
        for (int k = 0; k < Ho * Wo; ++k)
          dy_mat(c, static_cast<long>(n) * Ho * Wo + k) = src[k];
      }
    if (detail::wants_grad(bn)) {
      for (int c = 0; c < Cout; ++c) bn.g[c] += dy_mat.row(c).sum();
    }
    if (detail::wants_grad(wn)) {
      RowMapMut<T> dw(wn.g.data(), Cout, C * K * K);
      dw.noalias() += dy_mat * cols->transpose();
    }
    if (detail::wants_grad(xn)) {
      RowMap<T> w_map2(wn.v.data(), Cout, C * K * K);
      Mat<T> dcols = w_map2.transpose() * dy_mat;
      detail::col2im_add(dcols, N, C, H, W, K, stride, pad, Ho, Wo, xn.g.data());
    }
  };
  return detail::make_op<T>({N, Cout, Ho, Wo}, std::move(y),
                            {x.node(), w.node(), b.node()}, std::move(bwd));
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w,
                           const Tensor<T>& b, int stride, int pad,
                           int out_pad) {
  detail::check_image(x, "conv_transpose2d");
  require(w.shape().size() == 4, "conv_transpose2d: weight must be {Cin,Cout,K,K}");
  const int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const int Cin = w.shape()[0], Cout = w.shape()[1], K = w.shape()[2];
  require(w.shape()[3] == K, "conv_transpose2d: kernel must be square");
  require(Cin == C, "conv_transpose2d: channel mismatch");
  require(b.shape() == Shape{Cout}, "conv_transpose2d: bias shape mismatch");
  require(stride >= 1 && pad >= 0 && out_pad >= 0 && out_pad < stride,
          "conv_transpose2d: bad stride/pad/out_pad");
  const int Hy = (H - 1) * stride - 2 * pad + K + out_pad;
  const int Wy = (W - 1) * stride - 2 * pad + K + out_pad;
  require(Hy > 0 && Wy > 0, "conv_transpose2d: empty output");

  // X as (Cin) x (N*H*W), column j=(n*H+h)*W+w
  auto x_mat = std::make_shared<Mat<T>>(Cin, static_cast<long>(N) * H * W);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < Cin; ++c) {
      const T* src = x.values().data() + (static_cast<std::size_t>(n) * Cin + c) * H * W;
      for (int k = 0; k < H * W; ++k)
        (*x_mat)(c, static_cast<long>(n) * H * W + k) = src[k];
    }
  RowMap<T> w_map(w.values().data(), Cin, Cout * K * K);
  Mat<T> cols_y = w_map.transpose() * (*x_mat);  // (Cout*K*K) x (N*H*W)

  std::vector<T> y(static_cast<std::size_t>(N) * Cout * Hy * Wy, T(0));
  detail::col2im_add(cols_y, N, Cout, Hy, Wy, K, stride, pad, H, W, y.data());
  const T* bp = b.values().data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < Cout; ++c) {
      T* dst = y.data() + (static_cast<std::size_t>(n) * Cout + c) * Hy * Wy;
      for (int k = 0; k < Hy * Wy; ++k) dst[k] += bp[c];
    }

  auto bwd = [x_mat, N, C, H, W, Cout, K, stride, pad, Hy, Wy](Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& wn = *self.parents[1];
    auto& bn = *self.parents[2];
    Mat<T> cols_dy;
    detail::im2col(self.g.data(), N, Cout, Hy, Wy, K, stride, pad, H, W, cols_dy);
    if (detail::wants_grad(bn)) {
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < Cout; ++c) {
          const T* src = self.g.data() + (static_cast<std::size_t>(n) * Cout + c) * Hy * Wy;
          T acc = T(0);
          for (int k = 0; k < Hy * Wy; ++k) acc += src[k];
          bn.g[c] += acc;
        }
    }
    if (detail::wants_grad(wn)) {
      RowMapMut<T> dw(wn.g.data(), C, Cout * K * K);
      dw.noalias() += (*x_mat) * cols_dy.transpose();
    }
    if (detail::wants_grad(xn)) {
      RowMap<T> w_map2(wn.v.data(), C, Cout * K * K);
      Mat<T> dx_mat = w_map2 * cols_dy;  // Cin x (N*H*W)
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          T* dst = xn.g.data() + (static_cast<std::size_t>(n) * C + c) * H * W;
          for (int k = 0; k < H * W; ++k)
            dst[k] += dx_mat(c, static_cast<long>(n) * H * W + k);
        }
    }
  };
  return detail::make_op<T>({N, Cout, Hy, Wy}, std::move(y),
                            {x.node(), w.node(), b.node()}, std::move(bwd));
}

// ---- instance norm -------------------------------------------------------------

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                        const Tensor<T>& beta, T eps = T(1e-5)) {
  detail::check_image(x, "instance_norm");
  const int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  require(gamma.shape() == Shape{C} && beta.shape() == Shape{C},
          "instance_norm: affine parameter shape mismatch");
  const int M = H * W;
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(N) * C);
  std::vector<T> y(x.numel());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * C + c) * M;
      const T* xs = x.values().data() + base;
      T mean = T(0);
      for (int k = 0; k < M; ++k) mean += xs[k];
      mean /= static_cast<T>(M);
      T var = T(0);
      for (int k = 0; k < M; ++k) var += (xs[k] - mean) * (xs[k] - mean);
      var /= static_cast<T>(M);
      const T is = T(1) / std::sqrt(var + eps);
      (*inv_std)[static_cast<std::size_t>(n) * C + c] = is;
      const T g = gamma.values()[c], bb = beta.values()[c];
      for (int k = 0; k < M; ++k) {
        const T xh = (xs[k] - mean) * is;
        (*xhat)[base + k] = xh;
        y[base + k] = g * xh + bb;
      }
    }

  auto bwd = [xhat, inv_std, N, C, M](Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& gn = *self.parents[1];
    auto& bn = *self.parents[2];
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const std::size_t base = (static_cast<std::size_t>(n) * C + c) * M;
        const T* dy = self.g.data() + base;
        const T* xh = xhat->data() + base;
        const T gamma_c = gn.v[c];
        T sum_dy = T(0), sum_dy_xh = T(0);
        for (int k = 0; k < M; ++k) {
          sum_dy += dy[k];
          sum_dy_xh += dy[k] * xh[k];
        }
        if (detail::wants_grad(gn)) gn.g[c] += sum_dy_xh;
        if (detail::wants_grad(bn)) bn.g[c] += sum_dy;
        if (detail::wants_grad(xn)) {
          const T is = (*inv_std)[static_cast<std::size_t>(n) * C + c];
          const T mean_dyh = gamma_c * sum_dy / static_cast<T>(M);
          const T mean_dyh_xh = gamma_c * sum_dy_xh / static_cast<T>(M);
          T* dx = xn.g.data() + base;
          for (int k = 0; k < M; ++k)
            dx[k] += is * (gamma_c * dy[k] - mean_dyh - xh[k] * mean_dyh_xh);
        }
      }
  };
  return detail::make_op<T>(x.shape(), std::move(y),
                            {x.node(), gamma.node(), beta.node()}, std::move(bwd));
}

// ---- activations ----------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i)
    y[i] = x.values()[i] > T(0) ? x.values()[i] : T(0);
  auto bwd = [](Node<T>& self) {
    auto& xn = *self.parents[0];
    if (!detail::wants_grad(xn)) return;
    for (std::size_t i = 0; i < self.g.size(); ++i)
      if (xn.v[i] > T(0)) xn.g[i] += self.g[i];
  };
  return detail::make_op<T>(x.shape(), std::move(y), {x.node()}, std::move(bwd));
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope = T(0.2)) {
  std::vector<T> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i)
    y[i] = x.values()[i] > T(0) ? x.values()[i] : slope * x.values()[i];
  auto bwd = [slope](Node<T>& self) {
    auto& xn = *self.parents[0];
    if (!detail::wants_grad(xn)) return;
    for (std::size_t i = 0; i < self.g.size(); ++i)
      xn.g[i] += self.g[i] * (xn.v[i] > T(0) ? T(1) : slope);
  };
  return detail::make_op<T>(x.shape(), std::move(y), {x.node()}, std::move(bwd));
}

template <typename T>
Tensor<T> tanh_op(const Tensor<T>& x) {
  std::vector<T> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::tanh(x.values()[i]);
  auto yv = std::make_shared<std::vector<T>>(y);
  auto bwd = [yv](Node<T>& self) {
    auto& xn = *self.parents[0];
    if (!detail::wants_grad(xn)) return;
    for (std::size_t i = 0; i < self.g.size(); ++i)
      xn.g[i] += self.g[i] * (T(1) - (*yv)[i] * (*yv)[i]);
  };
  return detail::make_op<T>(x.shape(), std::move(y), {x.node()}, std::move(bwd));
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const T v = x.values()[i];
    if (v >= T(0)) {
      y[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      y[i] = e / (T(1) + e);
    }
  }
  auto yv = std::make_shared<std::vector<T>>(y);
  auto bwd = [yv](Node<T>& self) {
    auto& xn = *self.parents[0];
    if (!detail::wants_grad(xn)) return;
    for (std::size_t i = 0; i < self.g.size(); ++i)
      xn.g[i] += self.g[i] * (*yv)[i] * (T(1) - (*yv)[i]);
  };
  return detail::make_op<T>(x.shape(), std::move(y), {x.node()}, std::move(bwd));
}

// ---- structure ops ---------------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_image(a, "concat_channels");
  detail::check_image(b, "concat_channels");
  const int N = a.shape()[0], Ca = a.shape()[1], H = a.shape()[2], W = a.shape()[3];
  const int Cb = b.shape()[1];
  require(b.shape()[0] == N && b.shape()[2] == H && b.shape()[3] == W,
          "concat_channels: spatial/batch mismatch");
  const int M = H * W;
  std::vector<T> y(static_cast<std::size_t>(N) * (Ca + Cb) * M);
  for (int n = 0; n < N; ++n) {
    std::copy_n(a.values().data() + static_cast<std::size_t>(n) * Ca * M,
                static_cast<std::size_t>(Ca) * M,
                y.data() + static_cast<std::size_t>(n) * (Ca + Cb) * M);
    std::copy_n(b.values().data() + static_cast<std::size_t>(n) * Cb * M,
                static_cast<std::size_t>(Cb) * M,
                y.data() + static_cast<std::size_t>(n) * (Ca + Cb) * M + Ca * M);
  }
  auto bwd = [N, Ca, Cb, M](Node<T>& self) {
    auto& an = *self.parents[0];
    auto& bn = *self.parents[1];
    for (int n = 0; n < N; ++n) {
      const T* src = self.g.data() + static_cast<std::size_t>(n) * (Ca + Cb) * M;
      if (detail::wants_grad(an)) {
        T* dst = an.g.data() + static_cast<std::size_t>(n) * Ca * M;
        for (int k = 0; k < Ca * M; ++k) dst[k] += src[k];
      }
      if (detail::wants_grad(bn)) {
        T* dst = bn.g.data() + static_cast<std::size_t>(n) * Cb * M;
        for (int k = 0; k < Cb * M; ++k) dst[k] += src[Ca * M + k];
      }
    }
  };
  return detail::make_op<T>({N, Ca + Cb, H, W}, std::move(y),
                            {a.node(), b.node()}, std::move(bwd));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i)
    y[i] = a.values()[i] + b.values()[i];
  auto bwd = [](Node<T>& self) {
    for (int pi = 0; pi < 2; ++pi) {
      auto& p = *self.parents[pi];
      if (!detail::wants_grad(p)) continue;
      for (std::size_t i = 0; i < self.g.size(); ++i) p.g[i] += self.g[i];
    }
  };
  return detail::make_op<T>(a.shape(), std::move(y), {a.node(), b.node()},
                            std::move(bwd));
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = c * a.values()[i];
  auto bwd = [c](Node<T>& self) {
    auto& p = *self.parents[0];
    if (!detail::wants_grad(p)) return;
    for (std::size_t i = 0; i < self.g.size(); ++i) p.g[i] += c * self.g[i];
  };
  return detail::make_op<T>(a.shape(), std::move(y), {a.node()}, std::move(bwd));
}

// ---- losses -----------------------------------------------------------------------

/// Mean squared error over all elements.
template <typename T>
Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target) {
  require(pred.shape() == target.shape(),
          "mse: shape mismatch " + shape_str(pred.shape()) + " vs " +
              shape_str(target.shape()));
  const T inv_n = T(1) / static_cast<T>(pred.numel());
  T acc = T(0);
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const T d = pred.values()[i] - target.values()[i];
    acc += d * d;
  }
  auto bwd = [inv_n](Node<T>& self) {
    auto& pn = *self.parents[0];
    auto& tn = *self.parents[1];
    const T g = self.g[0];
    for (std::size_t i = 0; i < pn.v.size(); ++i) {
      const T d = T(2) * (pn.v[i] - tn.v[i]) * inv_n * g;
      if (detail::wants_grad(pn)) pn.g[i] += d;
      if (detail::wants_grad(tn)) tn.g[i] -= d;
    }
  };
  return detail::make_op<T>({1}, {acc * inv_n}, {pred.node(), target.node()},
                            std::move(bwd));
}

/// Mean binary cross-entropy; predictions are clamped to [1e-7, 1-1e-7].
template <typename T>
Tensor<T> bce(const Tensor<T>& pred, const Tensor<T>& target) {
  require(pred.shape() == target.shape(),
          "bce: shape mismatch " + shape_str(pred.shape()) + " vs " +
              shape_str(target.shape()));
  const T eps = T(1e-7);
  const T inv_n = T(1) / static_cast<T>(pred.numel());
  T acc = T(0);
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const T p = std::clamp(pred.values()[i], eps, T(1) - eps);
    const T t = target.values()[i];
    acc -= t * std::log(p) + (T(1) - t) * std::log(T(1) - p);
  }
  auto bwd = [eps, inv_n](Node<T>& self) {
    auto& pn = *self.parents[0];
    if (!detail::wants_grad(pn)) return;
    auto& tn = *self.parents[1];
    const T g = self.g[0];
    for (std::size_t i = 0; i < pn.v.size(); ++i) {
      const T raw = pn.v[i];
      if (raw <= eps || raw >= T(1) - eps) continue;  // clamped: zero slope
      const T t = tn.v[i];
      pn.g[i] += g * inv_n * (-t / raw + (T(1) - t) / (T(1) - raw));
    }
  };
  return detail::make_op<T>({1}, {acc * inv_n}, {pred.node(), target.node()},
                            std::move(bwd));
}

/// 1 - soft Dice with additive smoothing (smooth = 1).
template <typename T>
Tensor<T> soft_dice_loss(const Tensor<T>& pred, const Tensor<T>& target,
                         T smooth = T(1)) {
  require(pred.shape() == target.shape(), "soft_dice_loss: shape mismatch");
  T inter = T(0), psum = T(0), tsum = T(0);
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    inter += pred.values()[i] * target.values()[i];
    psum += pred.values()[i];
    tsum += target.values()[i];
  }
  const T num = T(2) * inter + smooth;
  const T den = psum + tsum + smooth;
  auto bwd = [num, den](Node<T>& self) {
    auto& pn = *self.parents[0];
    if (!detail::wants_grad(pn)) return;
    auto& tn = *self.parents[1];
    const T g = self.g[0];
    const T den2 = den * den;
    for (std::size_t i = 0; i < pn.v.size(); ++i) {
      // d(num/den)/dp_i = (2*t_i*den - num) / den^2; loss is 1 - num/den
      pn.g[i] += g * (num - T(2) * tn.v[i] * den) / den2;
    }
  };
  return detail::make_op<T>({1}, {T(1) - num / den},
                            {pred.node(), target.node()}, std::move(bwd));
}

}  // namespace xmodseg::nn
