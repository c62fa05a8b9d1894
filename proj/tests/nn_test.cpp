#include <bit>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "fedkappa/common/error.hpp"
#include "fedkappa/common/rng.hpp"
#include "fedkappa/nn/model.hpp"
#include "fedkappa/nn/optim.hpp"
#include "fedkappa/nn/param_io.hpp"
#include "oracles/naive_forward.hpp"
#include "oracles/reference_adam.hpp"
#include "test_util.hpp"

using namespace fedkappa;
using namespace fedkappa::nn;

namespace {

ModelSpec golden_spec() {
  ModelSpec spec;
  spec.input_resolution = 8;
  spec.num_classes = 4;
  spec.layers = ModelSpec::parse_layers("conv:4:3:1,relu,conv:6:3:2,relu,dense:5,relu,dense:4");
  return spec;
}

ParamVector golden_params() {
  auto p = init_params(golden_spec(), 1234);
  for (std::size_t i = 0; i < p.values.size(); i += 7) p.values[i] += 0.05f;
  return p;
}

Tensor golden_batch() {
  CounterRng rng(99);
  Tensor t({2, 8, 8});
  for (auto& x : t.values()) x = static_cast<float>(rng.uniform());
  return t;
}

}  // namespace

TEST_CASE("default spec matches the documented surrogate backbone") {
  const auto spec = ModelSpec::default_spec();
  CHECK(spec.layers_to_string() == "conv:8:3:1,relu,conv:16:3:2,relu,conv:32:3:2,relu,gap,dense:4");
  // 8*9+8 + 16*8*9+16 + 32*16*9+32 + 4*32+4
  CHECK(spec.param_count() == 80 + 1168 + 4640 + 132);
  CHECK(ModelSpec::parse_layers(spec.layers_to_string()) == spec.layers);
}

TEST_CASE("spec validation") {
  ModelSpec spec = ModelSpec::default_spec();
  spec.layers.back() = DenseLayer{3};
  CHECK_THROWS_WITH_AS(spec.validate(), doctest::Contains("final layer"), Error);
  spec.layers = {ConvLayer{4, 3, 1}};
  CHECK_THROWS_AS(spec.validate(), Error);
  CHECK_THROWS_AS(ModelSpec::parse_layers("conv:4:3"), Error);
  CHECK_THROWS_AS(ModelSpec::parse_layers("pool"), Error);
}

TEST_CASE("forward with zero params yields zero logits of shape [B, C]") {
  const auto spec = ModelSpec::default_spec();
  Tensor batch({2, 32, 32});
  CounterRng rng(5);
  for (auto& x : batch.values()) x = static_cast<float>(rng.uniform());
  const auto logits = forward(spec, zero_params(spec), batch);
  CHECK(logits.shape() == std::vector<std::size_t>{2, 4});
  for (float v : logits.values()) CHECK(v == 0.0f);
}

TEST_CASE("forward matches golden logits from the straight-line oracle") {
  const auto spec = golden_spec();
  const auto params = golden_params();
  const auto batch = golden_batch();
  // Frozen from oracle::naive_logits (float64 direct convolution).
  const double golden[2][4] = {
      {-2.3559704459382882, -2.242148321461169, -1.0869240195066372, 2.2108905756311001},
      {-2.3484930112382605, -2.3306730082376479, -1.1355122432018958, 2.3394795199488083},
  };
  const auto logits = forward(spec, params, batch);
  for (std::size_t b = 0; b < 2; ++b) {
    const auto live = oracle::naive_logits(spec, params.values, batch.data().data() + b * 64);
    for (std::size_t c = 0; c < 4; ++c) {
      CHECK(live[c] == doctest::Approx(golden[b][c]).epsilon(1e-12));
      CHECK(logits.at(b, c) == doctest::Approx(golden[b][c]).epsilon(1e-5));
    }
  }
}

TEST_CASE("forward rejects bad shapes and foreign parameters") {
  const auto spec = golden_spec();
  const auto params = golden_params();
  CHECK_THROWS_AS_CODE(forward(spec, params, Tensor({2, 7, 8})), ErrorCode::InvalidShape);
  CHECK_THROWS_AS_CODE(forward(spec, params, Tensor({2, 64})), ErrorCode::InvalidShape);
  const auto other = ModelSpec::default_spec(8);
  CHECK_THROWS_AS_CODE(forward(other, params, Tensor({1, 8, 8})), ErrorCode::SpecMismatch);
  auto truncated = params;
  truncated.values.pop_back();
  CHECK_THROWS_AS_CODE(forward(spec, truncated, Tensor({1, 8, 8})), ErrorCode::SpecMismatch);
}

TEST_CASE("loss of uniform logits is ln(C)") {
  const auto spec = ModelSpec::default_spec(16);
  Tensor batch({3, 16, 16});
  const std::vector<int> labels{0, 2, 3};
  const auto lg = loss_and_grad(spec, zero_params(spec), batch, labels);
  CHECK(lg.loss == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(lg.grad.size() == spec.param_count());
}

TEST_CASE("saturated true-class logit gives near-zero loss") {
  const auto spec = ModelSpec::default_spec(16);
  auto params = zero_params(spec);
  const std::size_t n = params.size();
  params.values[n - 4 + 2] = 30.0f;  // final dense bias for class 2
  Tensor batch({2, 16, 16});
  const std::vector<int> labels{2, 2};
  CHECK(loss_and_grad(spec, params, batch, labels).loss < 1e-9);
}

TEST_CASE("labels out of range are rejected") {
  const auto spec = ModelSpec::default_spec(8);
  Tensor batch({2, 8, 8});
  const std::vector<int> labels{0, 4};
  CHECK_THROWS_AS_CODE(loss_and_grad(spec, zero_params(spec), batch, labels), ErrorCode::InvalidLabel);
  const std::vector<int> negative{-1, 0};
  CHECK_THROWS_AS_CODE(loss_and_grad(spec, zero_params(spec), batch, negative), ErrorCode::InvalidLabel);
}

TEST_CASE("analytic gradient matches central finite differences") {
  for (const char* layers : {"conv:3:3:1,relu,gap,dense:4", "conv:4:3:2,relu,conv:5:3:1,relu,dense:4",
                             "dense:6,relu,dense:4", "conv:3:5:2,relu,gap,dense:7,relu,dense:4"}) {
    CAPTURE(layers);
    ModelSpec spec;
    spec.input_resolution = 6;
    spec.layers = ModelSpec::parse_layers(layers);
    const auto report = testutil::gradient_check(spec, 77, 3);
    CHECK(report.max_rel_error < 1e-4);
    CHECK(report.checked > report.skipped_kinks * 4);
  }
}

TEST_CASE("float32 gradient agrees with the float64 instantiation") {
  const auto spec = golden_spec();
  const auto params = golden_params();
  const auto batch = golden_batch();
  const std::vector<int> labels{1, 3};
  const auto lg = loss_and_grad(spec, params, batch, labels);
  std::vector<double> p64(params.values.begin(), params.values.end()), g64(p64.size());
  const double l64 = loss_and_grad_f64(spec, p64, batch, labels, g64);
  CHECK(lg.loss == doctest::Approx(l64).epsilon(1e-6));
  double gmax = 0;
  for (double g : g64) gmax = std::max(gmax, std::abs(g));
  for (std::size_t i = 0; i < g64.size(); ++i) CHECK(std::abs(lg.grad.values[i] - g64[i]) <= 1e-5 * gmax);
}

TEST_CASE("forward and loss_and_grad are bit-deterministic") {
  const auto spec = ModelSpec::default_spec(16);
  const auto params = init_params(spec, 3);
  Tensor batch({4, 16, 16});
  CounterRng rng(8);
  for (auto& x : batch.values()) x = static_cast<float>(rng.uniform());
  const std::vector<int> labels{0, 1, 2, 3};
  const auto a = loss_and_grad(spec, params, batch, labels);
  const auto b = loss_and_grad(spec, params, batch, labels);
  CHECK(std::bit_cast<std::uint64_t>(a.loss) == std::bit_cast<std::uint64_t>(b.loss));
  CHECK(a.grad == b.grad);
  CHECK(forward(spec, params, batch) == forward(spec, params, batch));
}

TEST_CASE("softmax rows are normalized") {
  const auto spec = ModelSpec::default_spec(16);
  Tensor batch({5, 16, 16});
  CounterRng rng(4);
  for (auto& x : batch.values()) x = static_cast<float>(rng.uniform());
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto probs = softmax_rows(forward(spec, init_params(spec, seed), batch));
    for (const auto& row : probs) {
      CHECK(std::accumulate(row.begin(), row.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-6));
      for (double p : row) CHECK(p >= 0.0);
    }
  }
}

TEST_CASE("adam: zero gradient on a fresh state is a fixed point") {
  ParamVector p{{0.5f, -1.25f, 3.0f}, {}};
  ParamVector g{{0.0f, 0.0f, 0.0f}, {}};
  const auto r = adam_step(p, g, {}, 1e-3, 0.0);
  CHECK(r.params == p);
  CHECK(r.state.step == 1);
}

TEST_CASE("adam: first step moves by lr * sign(g)") {
  for (float g : {0.37f, -2.5f, 1e-3f}) {
    ParamVector p{{1.0f}, {}};
    ParamVector grad{{g}, {}};
    const auto r = adam_step(p, grad, {}, 1e-4, 0.0);
    const double moved = static_cast<double>(r.params.values[0]) - 1.0;
    CHECK(moved == doctest::Approx(-1e-4 * (g > 0 ? 1 : -1)).epsilon(1e-3));
  }
}

TEST_CASE("adam: weight decay shrinks before the update") {
  ParamVector p{{2.0f}, {}};
  ParamVector g{{0.0f}, {}};
  const auto r = adam_step(p, g, {}, 0.1, 0.5);
  CHECK(r.params.values[0] == doctest::Approx(2.0 * (1 - 0.05)));
}

TEST_CASE("adam: 100-step quadratic trajectory matches the reference loop") {
  // f(x) = sum a_i (x_i - c_i)^2
  const std::vector<double> a{1.0, 3.0, 0.5, 10.0};
  const std::vector<double> c{0.3, -0.2, 0.1, 0.05};
  std::vector<double> ref{0.1, 0.2, -0.3, 0.4};
  ParamVector p{{0.1f, 0.2f, -0.3f, 0.4f}, {}};
  for (std::size_t i = 0; i < ref.size(); ++i) ref[i] = p.values[i];
  oracle::RefAdam oracle_opt{.lr = 1e-2, .wd = 1e-3};
  AdamState state;
  for (int step = 0; step < 100; ++step) {
    std::vector<double> g_ref(ref.size());
    ParamVector g{std::vector<float>(ref.size()), {}};
    for (std::size_t i = 0; i < ref.size(); ++i) {
      g_ref[i] = 2 * a[i] * (ref[i] - c[i]);
      g.values[i] = static_cast<float>(2 * a[i] * (p.values[i] - c[i]));
    }
    oracle_opt.step(ref, g_ref);
    auto r = adam_step(p, g, state, 1e-2, 1e-3);
    p = std::move(r.params);
    state = std::move(r.state);
  }
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(p.values[i] - ref[i]) < 1e-6);
  CHECK(state.step == 100);
  for (float v : state.v) CHECK(v >= 0.0f);
}

TEST_CASE("adam rejects mismatched lengths") {
  ParamVector p{{1.0f, 2.0f}, {}};
  ParamVector g{{1.0f}, {}};
  CHECK_THROWS_AS_CODE(adam_step(p, g, {}, 1e-3, 0.0), ErrorCode::SpecMismatch);
}

TEST_CASE("step learning-rate schedule") {
  LrSchedule s;
  CHECK(lr_at(s, 0) == 1e-4);
  CHECK(lr_at(s, 99) == 1e-4);
  CHECK(lr_at(s, 100) == doctest::Approx(5e-5).epsilon(1e-15));
  CHECK(lr_at(s, 299) == doctest::Approx(2.5e-5).epsilon(1e-15));
  double prev = lr_at(s, 0);
  for (std::uint64_t t = 1; t < 1000; ++t) {
    const double cur = lr_at(s, t);
    CHECK(cur <= prev);
    prev = cur;
  }
}

TEST_CASE("param vector file round-trips bit-exactly") {
  CounterRng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    ParamVector p;
    p.values.resize(rng.below(300));
    for (auto& v : p.values) v = std::bit_cast<float>(static_cast<std::uint32_t>(rng.next_u64()));
    for (auto& b : p.spec_hash) b = static_cast<std::uint8_t>(rng.below(256));
    const auto bytes = encode_params(p);
    CHECK(bytes.size() == 4 + 2 + 32 + 8 + 4 * p.size());
    const auto q = decode_params(bytes);
    CHECK(encode_params(q) == bytes);
  }
}

TEST_CASE("param vector decoding errors") {
  const auto spec = ModelSpec::default_spec(8);
  auto bytes = encode_params(init_params(spec, 1));
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS_CODE(decode_params(bad), ErrorCode::BadMagic);
  bad = bytes;
  bad[4] = 2;
  CHECK_THROWS_AS_CODE(decode_params(bad), ErrorCode::VersionMismatch);
  bad = bytes;
  bad.resize(bytes.size() - 3);
  CHECK_THROWS_AS_CODE(decode_params(bad), ErrorCode::Truncated);
}
