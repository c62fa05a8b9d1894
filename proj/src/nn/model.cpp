#include "fedkappa/nn/model.hpp"

#include <cmath>
#include <sstream>

#include "engine.hpp"
#include "fedkappa/common/error.hpp"
#include "fedkappa/common/kv_config.hpp"
#include "fedkappa/common/rng.hpp"
#include "fedkappa/nn/param_io.hpp"

namespace fedkappa::nn {

ModelSpec ModelSpec::default_spec(int resolution, int num_classes) {
  ModelSpec spec;
  spec.input_resolution = resolution;
  spec.num_classes = num_classes;
  spec.layers = {ConvLayer{8, 3, 1},  ReluLayer{}, ConvLayer{16, 3, 2}, ReluLayer{},
                 ConvLayer{32, 3, 2}, ReluLayer{}, GlobalAvgPoolLayer{}, DenseLayer{num_classes}};
  return spec;
}

std::vector<LayerDesc> ModelSpec::parse_layers(const std::string& text) {
  std::vector<LayerDesc> layers;
  auto to_int = [&](const std::string& s) {
    try {
      std::size_t used = 0;
      const int v = std::stoi(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw Error(ErrorCode::InvalidConfig, "bad integer '" + s + "' in layer list '" + text + "'");
    }
  };
  for (const auto& item : split_list(text, ',')) {
    const auto parts = split_list(item, ':');
    if (parts.empty()) continue;
    const auto& kind = parts[0];
    if (kind == "conv" && parts.size() == 4) {
      layers.push_back(ConvLayer{to_int(parts[1]), to_int(parts[2]), to_int(parts[3])});
    } else if (kind == "dense" && parts.size() == 2) {
      layers.push_back(DenseLayer{to_int(parts[1])});
    } else if (kind == "relu" && parts.size() == 1) {
      layers.push_back(ReluLayer{});
    } else if (kind == "gap" && parts.size() == 1) {
      layers.push_back(GlobalAvgPoolLayer{});
    } else {
      throw Error(ErrorCode::InvalidConfig, "unknown layer '" + item + "'");
    }
  }
  return layers;
}

std::string ModelSpec::layers_to_string() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i) os << ',';
    if (auto* c = std::get_if<ConvLayer>(&layers[i])) {
      os << "conv:" << c->out_channels << ':' << c->kernel << ':' << c->stride;
    } else if (auto* d = std::get_if<DenseLayer>(&layers[i])) {
      os << "dense:" << d->out_features;
    } else if (std::holds_alternative<ReluLayer>(layers[i])) {
      os << "relu";
    } else {
      os << "gap";
    }
  }
  return os.str();
}

std::string ModelSpec::canonical() const {
  std::ostringstream os;
  os << "fedkappa-model/1;resolution=" << input_resolution << ";channels=1;classes=" << num_classes
     << ";layers=" << layers_to_string();
  return os.str();
}

Digest ModelSpec::hash() const { return sha256(canonical()); }

void ModelSpec::validate() const { (void)detail::plan(*this); }

std::size_t ModelSpec::param_count() const { return detail::plan_param_count(detail::plan(*this)); }

ParamVector zero_params(const ModelSpec& spec) {
  return ParamVector{std::vector<float>(spec.param_count(), 0.0f), spec.hash()};
}

ParamVector init_params(const ModelSpec& spec, std::uint64_t seed) {
  const auto geoms = detail::plan(spec);
  ParamVector p{std::vector<float>(detail::plan_param_count(geoms), 0.0f), spec.hash()};
  CounterRng rng(derive_seed(seed, "init_params"));
  for (const auto& g : geoms) {
    if (g.w_count == 0) continue;
    const double fan_in = static_cast<double>(g.w_count / static_cast<std::size_t>(g.out_c));
    // He initialisation for hidden layers; the classifier head uses 1/fan_in.
    const bool head = &g == &geoms.back();
    const double stddev = std::sqrt((head ? 1.0 : 2.0) / fan_in);
    for (std::size_t i = 0; i < g.w_count; ++i) {
      p.values[g.w_offset + i] = static_cast<float>(stddev * rng.normal());
    }
  }
  return p;
}

Digest params_digest(const ParamVector& params) { return sha256(encode_params(params)); }

void check_params(const ModelSpec& spec, const ParamVector& params) {
  if (params.spec_hash != spec.hash()) {
    throw Error(ErrorCode::SpecMismatch, "parameter vector was produced for a different model spec");
  }
  const auto n = spec.param_count();
  if (params.values.size() != n) {
    throw Error(ErrorCode::SpecMismatch, "parameter count " + std::to_string(params.values.size()) +
                                             " != spec count " + std::to_string(n));
  }
}

namespace {
std::size_t check_batch(const ModelSpec& spec, const Tensor& batch) {
  const auto r = static_cast<std::size_t>(spec.input_resolution);
  if (batch.rank() != 3 || batch.dim(1) != r || batch.dim(2) != r) {
    throw Error(ErrorCode::InvalidShape, "batch must be [B, " + std::to_string(r) + ", " +
                                             std::to_string(r) + "]");
  }
  return batch.dim(0);
}
}  // namespace

Tensor forward(const ModelSpec& spec, const ParamVector& params, const Tensor& batch) {
  const auto geoms = detail::plan(spec);
  const auto b = check_batch(spec, batch);
  check_params(spec, params);
  std::vector<std::vector<float>> acts;
  detail::forward_batch<float>(geoms, params.values, batch.data(), b, acts);
  return Tensor({b, static_cast<std::size_t>(spec.num_classes)}, std::move(acts.back()));
}

std::vector<std::vector<double>> softmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw Error(ErrorCode::InvalidShape, "softmax expects [B, C]");
  const auto rows = logits.dim(0);
  const auto cols = logits.dim(1);
  std::vector<std::vector<double>> out(rows, std::vector<double>(cols));
  for (std::size_t r = 0; r < rows; ++r) {
    double m = logits.at(r, 0);
    for (std::size_t c = 1; c < cols; ++c) m = std::max(m, static_cast<double>(logits.at(r, c)));
    double z = 0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(static_cast<double>(logits.at(r, c)) - m);
    for (std::size_t c = 0; c < cols; ++c) out[r][c] = std::exp(static_cast<double>(logits.at(r, c)) - m) / z;
  }
  return out;
}

LossAndGrad loss_and_grad(const ModelSpec& spec, const ParamVector& params, const Tensor& batch,
                          std::span<const int> labels) {
  const auto geoms = detail::plan(spec);
  const auto b = check_batch(spec, batch);
  check_params(spec, params);
  std::vector<double> grad(params.values.size(), 0.0);
  const double loss = detail::loss_and_grad_batch<float>(geoms, params.values, batch.data(), b, labels, grad);
  ParamVector g{std::vector<float>(grad.size()), params.spec_hash};
  for (std::size_t i = 0; i < grad.size(); ++i) g.values[i] = static_cast<float>(grad[i]);
  return {loss, std::move(g)};
}

double loss_f64(const ModelSpec& spec, std::span<const double> params, const Tensor& batch,
                std::span<const int> labels) {
  const auto geoms = detail::plan(spec);
  const auto b = check_batch(spec, batch);
  if (params.size() != detail::plan_param_count(geoms)) throw Error(ErrorCode::SpecMismatch, "param length");
  return detail::loss_batch<double>(geoms, params, batch.data(), b, labels);
}

double loss_and_grad_f64(const ModelSpec& spec, std::span<const double> params, const Tensor& batch,
                         std::span<const int> labels, std::span<double> grad) {
  const auto geoms = detail::plan(spec);
  const auto b = check_batch(spec, batch);
  if (params.size() != detail::plan_param_count(geoms) || grad.size() != params.size()) {
    throw Error(ErrorCode::SpecMismatch, "param length");
  }
  std::fill(grad.begin(), grad.end(), 0.0);
  return detail::loss_and_grad_batch<double>(geoms, params, batch.data(), b, labels, grad);
}

}  // namespace fedkappa::nn
