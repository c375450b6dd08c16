#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "xmodseg/rng.hpp"
#include "xmodseg/tensor.hpp"

namespace xmodseg::nn {

/// Adam with bias correction. step() reads each parameter's gradient from the
/// most recent backward() pass and updates values in place.
template <typename T>
struct Adam {
  T lr = T(2e-4);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);

  long t = 0;
  std::vector<std::vector<T>> m, v;

  void init(const std::vector<Tensor<T>>& params) {
    t = 0;
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p.numel(), T(0));
      v.emplace_back(p.numel(), T(0));
    }
  }

  void step(std::vector<Tensor<T>>& params) {
    require(m.size() == params.size(), "Adam: state not initialized");
    ++t;
    const T bc1 = T(1) - static_cast<T>(std::pow(beta1, t));
    const T bc2 = T(1) - static_cast<T>(std::pow(beta2, t));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& node = *params[i].node();
      const bool has_grad = node.g.size() == node.v.size();
      for (std::size_t j = 0; j < node.v.size(); ++j) {
        const T g = has_grad ? node.g[j] : T(0);
        if (!std::isfinite(g))
          throw TrainAbort("Adam: non-finite gradient in parameter " +
                           std::to_string(i) + "[" + std::to_string(j) +
                           "] at step " + std::to_string(t));
        m[i][j] = beta1 * m[i][j] + (T(1) - beta1) * g;
        v[i][j] = beta2 * v[i][j] + (T(1) - beta2) * g * g;
        const T mhat = m[i][j] / bc1;
        const T vhat = v[i][j] / bc2;
        node.v[j] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }
};

/// Compares analytic gradients against central finite differences
/// (h defaults to 1e-3; run with T=double) on n_probes randomly chosen scalar
/// parameters. make_loss must build a fresh graph and return the scalar loss.
/// Returns the worst relative error; 0 when there is nothing to probe.
///
/// Each probe is validated by a step-halving consistency check: if the
/// difference quotients at h and h/2 disagree, the probe interval straddles a
/// non-smooth point (a ReLU kink pulled near zero by normalization) where
/// central differences say nothing about the gradient, and the probe is
/// redrawn. A wrong analytic gradient is still caught: in smooth regions the
/// two quotients agree with each other and disagree with the bad gradient.
template <typename T>
double gradcheck(const std::function<Tensor<T>()>& make_loss,
                 std::vector<Tensor<T>> params, int n_probes, Rng& rng,
                 double h = 1e-3) {
  require(n_probes >= 1, "gradcheck: n_probes must be >= 1");
  std::size_t total = 0;
  for (const auto& p : params) total += p.numel();
  if (total == 0) return 0.0;

  auto loss = make_loss();
  backward(loss);
  std::vector<std::vector<T>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p.grad());

  auto quotient = [&](T& slot, T orig, double step) {
    slot = orig + static_cast<T>(step);
    const double fp = static_cast<double>(make_loss().item());
    slot = orig - static_cast<T>(step);
    const double fm = static_cast<double>(make_loss().item());
    slot = orig;
    return (fp - fm) / (2.0 * step);
  };

  double worst = 0.0;
  int valid = 0;
  const int max_attempts = 10 * n_probes;
  for (int attempt = 0; attempt < max_attempts && valid < n_probes; ++attempt) {
    std::uint64_t pick = rng.integer(total);
    std::size_t pi = 0;
    while (pick >= params[pi].numel()) {
      pick -= params[pi].numel();
      ++pi;
    }
    const auto j = static_cast<std::size_t>(pick);
    T& slot = params[pi].values()[j];
    const T orig = slot;
    const double fd_h = quotient(slot, orig, h);
    const double fd_h2 = quotient(slot, orig, h / 2.0);
    const double scale = std::max({std::abs(fd_h), std::abs(fd_h2), 1e-6});
    if (std::abs(fd_h - fd_h2) > 3e-5 * scale) continue;  // non-smooth probe
    ++valid;
    const double an = static_cast<double>(analytic[pi][j]);
    const double denom = std::max({std::abs(an), std::abs(fd_h2), 1e-6});
    worst = std::max(worst, std::abs(an - fd_h2) / denom);
  }
  require(valid > 0, "gradcheck: no smooth probe found");
  return worst;
}

}  // namespace xmodseg::nn
