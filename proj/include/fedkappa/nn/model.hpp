#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "fedkappa/common/digest.hpp"
#include "fedkappa/nn/tensor.hpp"

namespace fedkappa::nn {

/// Zero-padded ("same") convolution: pad = kernel / 2.
struct ConvLayer {
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  bool operator==(const ConvLayer&) const = default;
};

struct DenseLayer {
  int out_features = 0;
  bool operator==(const DenseLayer&) const = default;
};

struct ReluLayer {
  bool operator==(const ReluLayer&) const = default;
};

struct GlobalAvgPoolLayer {
  bool operator==(const GlobalAvgPoolLayer&) const = default;
};

using LayerDesc = std::variant<ConvLayer, DenseLayer, ReluLayer, GlobalAvgPoolLayer>;

/// Architecture of a single-channel image classifier. Inputs are
/// input_resolution x input_resolution; the last layer must be a dense layer
/// with num_classes outputs.
struct ModelSpec {
  int input_resolution = 32;
  int num_classes = 4;
  std::vector<LayerDesc> layers;

  /// conv3x3x8 - relu - conv3x3x16/2 - relu - conv3x3x32/2 - relu - gap - dense(num_classes)
  static ModelSpec default_spec(int resolution = 32, int num_classes = 4);

  /// Parses the layer grammar used in config files:
  ///   "conv:OUT:K:S,relu,gap,dense:OUT"
  static std::vector<LayerDesc> parse_layers(const std::string& text);
  std::string layers_to_string() const;

  /// Canonical text; the spec hash is SHA-256 of this string.
  std::string canonical() const;
  Digest hash() const;

  /// Throws Error{InvalidShape} if the layer stack is inconsistent.
  void validate() const;
  std::size_t param_count() const;

  bool operator==(const ModelSpec&) const = default;
};

/// Flat model weights bound to a ModelSpec through its hash.
struct ParamVector {
  std::vector<float> values;
  Digest spec_hash{};

  std::size_t size() const noexcept { return values.size(); }
  bool operator==(const ParamVector&) const = default;
};

ParamVector zero_params(const ModelSpec& spec);

/// He-normal weights, zero biases.
ParamVector init_params(const ModelSpec& spec, std::uint64_t seed);

/// SHA-256 of the FKPV encoding of the parameters.
Digest params_digest(const ParamVector& params);

/// Throws SpecMismatch unless params belongs to spec (hash and length).
void check_params(const ModelSpec& spec, const ParamVector& params);

/// batch: [B, R, R] with R = spec.input_resolution. Returns logits [B, C].
Tensor forward(const ModelSpec& spec, const ParamVector& params, const Tensor& batch);

/// Row-wise softmax of a [B, C] logits tensor, computed in double.
std::vector<std::vector<double>> softmax_rows(const Tensor& logits);

struct LossAndGrad {
  double loss = 0.0;  ///< mean softmax cross-entropy over the batch
  ParamVector grad;
};

LossAndGrad loss_and_grad(const ModelSpec& spec, const ParamVector& params, const Tensor& batch,
                          std::span<const int> labels);

/// Same layer math instantiated in double precision. Used to check the
/// analytic gradient against finite differences without float32 noise.
double loss_f64(const ModelSpec& spec, std::span<const double> params, const Tensor& batch,
                std::span<const int> labels);
double loss_and_grad_f64(const ModelSpec& spec, std::span<const double> params, const Tensor& batch,
                         std::span<const int> labels, std::span<double> grad);

}  // namespace fedkappa::nn
