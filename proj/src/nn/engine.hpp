#pragma once

// Layer math shared by the float32 training path and the float64 checking
// path. Private to the nn library.

#include <cstddef>
#include <span>
#include <vector>

#include "fedkappa/nn/model.hpp"

namespace fedkappa::nn::detail {

enum class Kind { Conv, Dense, Relu, Gap };

struct Geom {
  Kind kind = Kind::Relu;
  int in_c = 0, in_h = 0, in_w = 0;
  int out_c = 0, out_h = 0, out_w = 0;
  int kernel = 0, stride = 1, pad = 0;
  std::size_t w_offset = 0, w_count = 0;
  std::size_t b_offset = 0, b_count = 0;

  std::size_t in_size() const { return static_cast<std::size_t>(in_c) * in_h * in_w; }
  std::size_t out_size() const { return static_cast<std::size_t>(out_c) * out_h * out_w; }
};

/// Resolves shapes and parameter offsets; throws InvalidShape.
std::vector<Geom> plan(const ModelSpec& spec);

std::size_t plan_param_count(const std::vector<Geom>& geoms);

/// acts[0] receives the input; acts[l + 1] the output of layer l, each of
/// batch * size elements.
template <typename Real>
void forward_batch(const std::vector<Geom>& geoms, std::span<const Real> params,
                   std::span<const float> input, std::size_t batch,
                   std::vector<std::vector<Real>>& acts);

/// Runs forward + backward; accumulates d(mean loss)/d(params) into grad
/// (which must be zeroed by the caller) and returns the mean loss.
template <typename Real>
double loss_and_grad_batch(const std::vector<Geom>& geoms, std::span<const Real> params,
                           std::span<const float> input, std::size_t batch,
                           std::span<const int> labels, std::span<double> grad);

template <typename Real>
double loss_batch(const std::vector<Geom>& geoms, std::span<const Real> params,
                  std::span<const float> input, std::size_t batch, std::span<const int> labels);

}  // namespace fedkappa::nn::detail
