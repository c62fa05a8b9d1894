#pragma once

#include <cstdint>
#include <vector>

#include "fedkappa/nn/model.hpp"

namespace fedkappa::nn {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  std::vector<float> m;
  std::vector<float> v;
  std::uint64_t step = 0;

  static AdamState fresh(std::size_t n) { return {std::vector<float>(n, 0.0f), std::vector<float>(n, 0.0f), 0}; }
  bool operator==(const AdamState&) const = default;
};

struct AdamResult {
  ParamVector params;
  AdamState state;
};

/// One Adam update with decoupled weight decay:
///   p <- p * (1 - lr * weight_decay), then the bias-corrected Adam step.
/// An empty state is treated as fresh.
AdamResult adam_step(const ParamVector& params, const ParamVector& grad, const AdamState& state,
                     double lr, double weight_decay, const AdamHyper& hyper = {});

struct LrSchedule {
  double base_lr = 1e-4;
  double decay_factor = 0.5;
  std::uint32_t decay_every = 100;

  bool operator==(const LrSchedule&) const = default;
};

/// base_lr * decay_factor ^ floor(round / decay_every)
double lr_at(const LrSchedule& schedule, std::uint64_t round);

}  // namespace fedkappa::nn
