#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "fedkappa/common/rng.hpp"
#include "fedkappa/nn/model.hpp"
#include "oracles/naive_forward.hpp"

namespace testutil {

struct GradReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
};

/// Central finite differences (eps = 1e-3) in float64 against the analytic
/// float64 gradient. Coordinates whose +/-eps perturbation flips any relu
/// (the loss is not differentiable across the kink) are excluded and
/// counted; the caller bounds how many may be skipped.
inline GradReport gradient_check(const fedkappa::nn::ModelSpec& spec, std::uint64_t seed, std::size_t batch) {
  using namespace fedkappa;
  using namespace fedkappa::nn;
  const auto init = init_params(spec, seed);
  CounterRng rng(derive_seed(seed, "gradcheck"));
  std::vector<double> params(init.values.begin(), init.values.end());
  for (auto& p : params) p += 0.05 * rng.normal();

  const auto res = static_cast<std::size_t>(spec.input_resolution);
  Tensor images({batch, res, res});
  for (auto& x : images.values()) x = static_cast<float>(rng.uniform());
  std::vector<int> labels(batch);
  for (auto& y : labels) y = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.num_classes)));

  auto signature = [&](const std::vector<double>& p) {
    std::vector<bool> signs;
    for (std::size_t b = 0; b < batch; ++b) {
      (void)oracle::naive_logits(spec, p, images.data().data() + b * res * res, &signs);
    }
    return signs;
  };

  std::vector<double> grad(params.size());
  (void)loss_and_grad_f64(spec, params, images, labels, grad);
  const auto base_sig = signature(params);

  GradReport report;
  const double eps = 1e-3;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto plus = params;
    auto minus = params;
    plus[i] += eps;
    minus[i] -= eps;
    if (signature(plus) != base_sig || signature(minus) != base_sig) {
      ++report.skipped_kinks;
      continue;
    }
    const double fd = (loss_f64(spec, plus, images, labels) - loss_f64(spec, minus, images, labels)) / (2 * eps);
    const double scale = std::max({std::abs(fd), std::abs(grad[i]), 1e-8});
    report.max_rel_error = std::max(report.max_rel_error, std::abs(fd - grad[i]) / scale);
    ++report.checked;
  }
  return report;
}

}  // namespace testutil
