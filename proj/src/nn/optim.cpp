#include "fedkappa/nn/optim.hpp"

#include <cmath>

#include "fedkappa/common/error.hpp"

namespace fedkappa::nn {

AdamResult adam_step(const ParamVector& params, const ParamVector& grad, const AdamState& state,
                     double lr, double weight_decay, const AdamHyper& hyper) {
  const std::size_t n = params.values.size();
  if (grad.values.size() != n || grad.spec_hash != params.spec_hash) {
    throw Error(ErrorCode::SpecMismatch, "gradient does not match parameters");
  }
  AdamState next = state.m.empty() && state.v.empty() && state.step == 0 ? AdamState::fresh(n) : state;
  if (next.m.size() != n || next.v.size() != n) {
    throw Error(ErrorCode::SpecMismatch, "optimizer state does not match parameters");
  }
  if (lr < 0 || weight_decay < 0) throw Error(ErrorCode::InvalidConfig, "lr and weight_decay must be >= 0");

  next.step += 1;
  const double t = static_cast<double>(next.step);
  const double bc1 = 1.0 - std::pow(hyper.beta1, t);
  const double bc2 = 1.0 - std::pow(hyper.beta2, t);
  const double shrink = 1.0 - lr * weight_decay;

  ParamVector out{std::vector<float>(n), params.spec_hash};
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grad.values[i];
    const double m = hyper.beta1 * next.m[i] + (1.0 - hyper.beta1) * g;
    const double v = hyper.beta2 * next.v[i] + (1.0 - hyper.beta2) * g * g;
    next.m[i] = static_cast<float>(m);
    next.v[i] = static_cast<float>(v);
    const double m_hat = m / bc1;
    const double v_hat = v / bc2;
    const double p = static_cast<double>(params.values[i]) * shrink;
    out.values[i] = static_cast<float>(p - lr * m_hat / (std::sqrt(v_hat) + hyper.epsilon));
  }
  return {std::move(out), std::move(next)};
}

double lr_at(const LrSchedule& schedule, std::uint64_t round) {
  const std::uint64_t steps = schedule.decay_every == 0 ? 0 : round / schedule.decay_every;
  return schedule.base_lr * std::pow(schedule.decay_factor, static_cast<double>(steps));
}

}  // namespace fedkappa::nn
