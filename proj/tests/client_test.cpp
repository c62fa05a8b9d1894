#include <cmath>
#include <cstring>
#include <map>
#include <set>

#include "doctest.h"
#include "fedkappa/client/client.hpp"
#include "fedkappa/common/bytes.hpp"
#include "fedkappa/common/error.hpp"
#include "test_util.hpp"

using namespace fedkappa;
using namespace fedkappa::client;
using fedkappa::nn::ParamVector;
using fedkappa::nn::Tensor;

namespace {

Tensor random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  CounterRng rng(seed);
  Tensor t({h, w});
  for (auto& v : t.values()) v = static_cast<float>(rng.uniform());
  return t;
}

bool bit_equal(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

TrainConfig small_config() {
  TrainConfig c;
  c.spec = nn::ModelSpec::default_spec(8, 4);
  c.schedule.base_lr = 1e-3;
  c.finetune_epochs = 3;
  return c;
}

data::SiteDataset small_site(std::uint64_t seed, std::uint32_t train = 64) {
  data::SiteProfile p;
  p.site_id = "s" + std::to_string(seed);
  p.n_train = train;
  p.n_val = 40;
  p.n_test = 20;
  p.resolution = 8;
  p.seed = seed;
  return data::generate_site(p);
}

}  // namespace

TEST_CASE("identity augmentation is bit-exact") {
  const auto img = random_image(9, 7, 1);
  CounterRng rng(2);
  const auto out = augment(img, AugmentConfig::none(), rng);
  CHECK(bit_equal(out.values(), img.values()));
}

TEST_CASE("zero-degree rotation is the identity") {
  const auto img = random_image(8, 8, 3);
  const auto out = rotate_bilinear(img, 0.0);
  for (std::size_t i = 0; i < img.size(); ++i) CHECK(std::abs(out[i] - img[i]) <= 1e-6);
}

TEST_CASE("quarter-turn rotation permutes pixels") {
  const auto img = random_image(6, 6, 4);
  const auto out = rotate_bilinear(img, 90.0);
  // out(y, x) samples the source at the point rotated back by 90 degrees.
  for (std::size_t y = 0; y < 6; ++y) {
    for (std::size_t x = 0; x < 6; ++x) CHECK(std::abs(out.at(y, x) - img.at(5 - x, y)) <= 1e-5);
  }
  const auto back = rotate_bilinear(out, -90.0);
  for (std::size_t i = 0; i < img.size(); ++i) CHECK(std::abs(back[i] - img[i]) <= 1e-5);
}

TEST_CASE("flips and shift") {
  const auto img = random_image(4, 5, 5);
  AugmentDraw d;
  d.flip_h = true;
  auto out = apply_augment(img, d);
  CHECK(out.at(1, 0) == img.at(1, 4));
  d = {};
  d.flip_v = true;
  out = apply_augment(img, d);
  CHECK(out.at(0, 2) == img.at(3, 2));
  d = {};
  d.shift = 0.9;
  out = apply_augment(img, d);
  for (float v : out.data()) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
}

TEST_CASE("augmentation keeps shape and range") {
  CounterRng rng(6);
  AugmentConfig cfg;
  cfg.intensity_shift_range = 0.5;
  for (int trial = 0; trial < 50; ++trial) {
    const auto img = random_image(8, 8, static_cast<std::uint64_t>(100 + trial));
    const auto out = augment(img, cfg, rng);
    REQUIRE(out.shape() == img.shape());
    for (float v : out.data()) {
      REQUIRE(v >= 0.0f);
      REQUIRE(v <= 1.0f);
    }
  }
}

TEST_CASE("sampled rotation angles") {
  CounterRng rng(7);
  AugmentConfig cfg;
  double sum = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto d = draw_augment(cfg, rng);
    REQUIRE(d.angle_deg >= -45.0);
    REQUIRE(d.angle_deg <= 45.0);
    sum += d.angle_deg;
  }
  CHECK(std::abs(sum / 10000) <= 1.5);
}

TEST_CASE("balanced batches") {
  SUBCASE("four classes give eight of each") {
    std::vector<std::uint8_t> labels;
    for (int c = 0; c < 4; ++c) {
      for (int k = 0; k < 10 + 7 * c; ++k) labels.push_back(static_cast<std::uint8_t>(c));
    }
    CounterRng rng(1);
    const auto batches = balanced_batches(labels, 32, rng);
    CHECK(batches.size() == (31 + 7) / 8);
    std::set<std::size_t> majority_seen;
    for (const auto& b : batches) {
      REQUIRE(b.size() == 32);
      std::array<int, 4> hist{};
      for (auto i : b) {
        ++hist[labels[i]];
        if (labels[i] == 3) majority_seen.insert(i);
      }
      for (int h : hist) CHECK(h == 8);
    }
    CHECK(majority_seen.size() == 31);
  }
  SUBCASE("64 eligible samples give two batches") {
    std::vector<std::uint8_t> labels;
    for (int k = 0; k < 64; ++k) labels.push_back(static_cast<std::uint8_t>(k % 4));
    CounterRng rng(2);
    CHECK(balanced_batches(labels, 32, rng).size() == 2);
  }
  SUBCASE("a two-sample class repeats") {
    std::vector<std::uint8_t> labels(40, 0);
    labels[0] = 1;
    labels[1] = 1;
    CounterRng rng(3);
    const auto batches = balanced_batches(labels, 32, rng);
    std::map<std::size_t, int> uses;
    for (const auto& b : batches) {
      for (auto i : b) {
        if (labels[i] == 1) ++uses[i];
      }
    }
    CHECK(uses.size() == 2);
    CHECK(uses[0] > 1);
  }
  SUBCASE("absent class balances over the rest") {
    std::vector<std::uint8_t> labels;
    for (int k = 0; k < 50; ++k) labels.push_back(static_cast<std::uint8_t>(k % 3 == 0 ? 0 : (k % 3 == 1 ? 2 : 3)));
    CounterRng rng(4);
    const auto batches = balanced_batches(labels, 32, rng);
    CHECK(effective_batch_size(32, 3) == 30);
    for (const auto& b : batches) {
      REQUIRE(b.size() == 30);
      std::array<int, 4> hist{};
      for (auto i : b) ++hist[labels[i]];
      CHECK(hist[1] == 0);
      CHECK(hist[0] == 10);
      CHECK(hist[2] == 10);
      CHECK(hist[3] == 10);
    }
  }
  SUBCASE("empty") {
    std::vector<std::uint8_t> none;
    CounterRng rng(5);
    CHECK_THROWS_AS_CODE(balanced_batches(none, 32, rng), ErrorCode::EmptySplit);
  }
}

TEST_CASE("local training") {
  auto cfg = small_config();
  const auto site = small_site(11);
  const auto phi = nn::init_params(cfg.spec, 5);

  SUBCASE("zero lr and zero decay give a zero delta") {
    auto c = cfg;
    c.schedule.base_lr = 0;
    c.weight_decay = 0;
    const auto r = local_training(c, phi, site, 1, 9);
    for (float v : r.delta.values) CHECK(v == 0.0f);
    CHECK(r.n_k >= 1);
  }
  SUBCASE("deterministic and counted") {
    const auto a = local_training(cfg, phi, site, 3, 9);
    const auto b = local_training(cfg, phi, site, 3, 9);
    CHECK(bit_equal(a.delta.values, b.delta.values));
    CHECK(a.n_k == a.state.step);
    CHECK(std::isfinite(a.epoch_loss));
    const auto c = local_training(cfg, phi, site, 4, 9);
    CHECK_FALSE(bit_equal(a.delta.values, c.delta.values));
  }
  SUBCASE("n_k is the balanced epoch length") {
    std::array<int, 4> counts{};
    for (auto i : site.indices(data::Split::Train)) ++counts[site.labels[i]];
    int present = 0, majority = 0;
    for (int c : counts) {
      present += c > 0;
      majority = std::max(majority, c);
    }
    const int per = 32 / present;
    const auto r = local_training(cfg, phi, site, 1, 9);
    CHECK(r.n_k == static_cast<std::uint64_t>((majority + per - 1) / per));
  }
  SUBCASE("empty training split") {
    auto s = site;
    for (auto& sp : s.splits) {
      if (sp == data::Split::Train) sp = data::Split::Test;
    }
    CHECK_THROWS_AS_CODE(local_training(cfg, phi, s, 1, 9), ErrorCode::EmptySplit);
  }
  SUBCASE("round 0 is invalid") {
    CHECK_THROWS_AS_CODE(local_training(cfg, phi, site, 0, 9), ErrorCode::InvalidConfig);
  }
}

TEST_CASE("training lowers the loss") {
  auto cfg = small_config();
  cfg.augment = AugmentConfig::none();
  cfg.schedule.base_lr = 3e-3;
  const auto site = small_site(12, 200);
  auto phi = nn::init_params(cfg.spec, 1);
  nn::AdamState state;
  double first = 0, last = 0;
  for (std::uint64_t t = 1; t <= 15; ++t) {
    const auto r = local_training(cfg, phi, site, t, 3, state);
    state = r.state;
    phi = apply_delta(phi, r.delta);
    if (t == 1) first = r.epoch_loss;
    last = r.epoch_loss;
  }
  CHECK(last < first * 0.8);
}

TEST_CASE("model selection") {
  auto make = [](std::vector<std::optional<double>> ks) {
    TrainHistory h;
    for (std::size_t i = 0; i < ks.size(); ++i) h.records.push_back({i + 1, ks[i], Digest{}, Source::Local});
    return h;
  };
  CHECK(select_best(make({0.3, 0.5, 0.4})) == 1);
  CHECK(select_best(make({0.5, 0.5})) == 0);
  CHECK(select_best(make({std::nullopt, 0.1, std::nullopt})) == 1);
  CHECK(select_best(make({std::nullopt, std::nullopt})) == 0);
  CHECK_THROWS_AS_CODE(select_best(TrainHistory{}), ErrorCode::NoCandidates);

  CounterRng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::optional<double>> ks;
    for (int i = 0; i < 10; ++i) ks.push_back(std::round(rng.uniform() * 10) / 10);
    const auto h = make(ks);
    const auto best = select_best(h);
    for (std::size_t i = 0; i < ks.size(); ++i) {
      CHECK(*ks[best] >= *ks[i]);
      if (i < best) CHECK(*ks[i] < *ks[best]);
    }
  }
}

TEST_CASE("history json lines round trip") {
  TrainHistory h;
  h.records.push_back({1, 0.25, sha256("a"), Source::Local});
  h.records.push_back({1, std::nullopt, sha256("b"), Source::Global});
  h.records.push_back({0, -0.125, sha256("c"), Source::Initial});
  CHECK(TrainHistory::from_jsonl(h.to_jsonl()) == h);
  CHECK_THROWS_AS_CODE(TrainHistory::from_jsonl("{\"round\":1}\n"), ErrorCode::Malformed);
}

TEST_CASE("client runtime records candidates per round") {
  const auto dir = testutil::temp_dir("client_runtime");
  auto cfg = small_config();
  ClientRuntime rt("A", cfg, small_site(13), 17, dir);
  auto phi = nn::init_params(cfg.spec, 2);
  const std::uint64_t T = 3;
  for (std::uint64_t t = 1; t <= T + 1; ++t) {
    const auto r = rt.on_broadcast(t, phi, T);
    if (t <= T) {
      REQUIRE(r);
      phi = apply_delta(phi, r->delta);
    } else {
      CHECK_FALSE(r);
    }
  }
  const auto& recs = rt.history().records;
  REQUIRE(recs.size() == 2 * T);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    CHECK(recs[i].round == i / 2 + 1);
    CHECK(recs[i].source == (i % 2 == 0 ? Source::Local : Source::Global));
    CHECK(std::filesystem::exists(dir / (to_hex(recs[i].digest) + ".fkpv")));
  }
  const auto best = rt.best();
  for (const auto& r : recs) {
    if (r.val_kappa && best.record.val_kappa) CHECK(*best.record.val_kappa >= *r.val_kappa);
  }
  CHECK(nn::params_digest(best.params) == best.record.digest);
  CHECK_THROWS_AS_CODE(rt.on_broadcast(T + 2, phi, T), ErrorCode::StaleUpdate);
}

TEST_CASE("fine tuning") {
  auto cfg = small_config();
  const auto site = small_site(14, 120);
  const auto start = nn::init_params(cfg.spec, 3);

  const auto none = fine_tune(cfg, start, site, 0, 5);
  CHECK(none.params == start);
  CHECK(none.history.records.size() == 1);
  CHECK(none.selected.source == Source::Initial);

  const auto some = fine_tune(cfg, start, site, 3, 5);
  CHECK(some.history.records.size() == 4);
  const auto& input = some.history.records.front();
  if (input.val_kappa) {
    REQUIRE(some.selected.val_kappa);
    CHECK(*some.selected.val_kappa >= *input.val_kappa);
  }
  CHECK(nn::params_digest(some.params) == some.selected.digest);
  const auto again = fine_tune(cfg, start, site, 3, 5);
  CHECK(bit_equal(again.params.values, some.params.values));
}
