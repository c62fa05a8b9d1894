#include <cmath>
#include <numeric>

#include "doctest.h"
#include "fedkappa/common/bytes.hpp"
#include "fedkappa/eval/kappa.hpp"
#include "oracles/brute_kappa.hpp"
#include "oracles/published_kappas.hpp"
#include "test_util.hpp"
#include "json.hpp"

using namespace fedkappa;
using namespace fedkappa::eval;

TEST_CASE("hand-derived kappa") {
  const std::vector<int> t{0, 1, 2, 3};
  const std::vector<int> p{1, 2, 3, 3};
  // p_o = 0.75, p_e = 7/12
  CHECK(weighted_kappa(t, p) == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(std::abs(weighted_kappa(t, p) - 0.4) <= 1e-15);
  CHECK(weighted_kappa(t, t) == 1.0);
}

TEST_CASE("kappa error cases") {
  const std::vector<int> constant{2, 2, 2, 2};
  CHECK_THROWS_AS_CODE(weighted_kappa(constant, constant), ErrorCode::DegenerateMarginals);
  const std::vector<int> a{0, 1}, b{0, 1, 2};
  CHECK_THROWS_AS_CODE(weighted_kappa(a, b), ErrorCode::InvalidShape);
  const std::vector<int> empty;
  CHECK_THROWS_AS_CODE(weighted_kappa(empty, empty), ErrorCode::InvalidShape);
  const std::vector<int> bad{0, 4};
  CHECK_THROWS_AS_CODE(weighted_kappa(a, bad), ErrorCode::InvalidLabel);
}

TEST_CASE("kappa matches the brute-force definition on random label pairs") {
  CounterRng rng(2024);
  int compared = 0;
  double worst = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto n = 1 + static_cast<std::size_t>(rng.below(50));
    std::vector<int> t(n), p(n);
    for (std::size_t k = 0; k < n; ++k) {
      t[k] = static_cast<int>(rng.below(4));
      p[k] = rng.bernoulli(0.5) ? t[k] : static_cast<int>(rng.below(4));
    }
    const double expect = oracle::brute_kappa(t, p);
    double got;
    try {
      got = weighted_kappa(t, p);
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::DegenerateMarginals);
      continue;
    }
    worst = std::max(worst, std::abs(got - expect));
    CHECK(got >= -1.0);
    CHECK(got <= 1.0);
    ++compared;
  }
  CHECK(worst <= 1e-12);
  CHECK(compared > 950);
}

TEST_CASE("kappa is invariant under reversing the class order") {
  CounterRng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const auto n = 2 + static_cast<std::size_t>(rng.below(40));
    std::vector<int> t(n), p(n), tr(n), pr(n);
    for (std::size_t k = 0; k < n; ++k) {
      t[k] = static_cast<int>(rng.below(4));
      p[k] = static_cast<int>(rng.below(4));
      tr[k] = 3 - t[k];
      pr[k] = 3 - p[k];
    }
    try {
      CHECK(weighted_kappa(t, p) == doctest::Approx(weighted_kappa(tr, pr)).epsilon(1e-12));
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::DegenerateMarginals);
    }
  }
}

TEST_CASE("perfect agreement over two or more classes is 1") {
  CounterRng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const auto n = 2 + static_cast<std::size_t>(rng.below(30));
    std::vector<int> t(n);
    for (auto& x : t) x = static_cast<int>(rng.below(4));
    t[0] = 0;
    t[1] = 3;
    CHECK(weighted_kappa(t, t) == doctest::Approx(1.0).epsilon(1e-15));
  }
}

TEST_CASE("patient argmax averages and breaks ties low") {
  CHECK(patient_argmax({{.6, .4, 0, 0}, {.2, .8, 0, 0}}) == 1);
  CHECK(patient_argmax({{.1, .2, .6, .1}}) == 2);
  CHECK(patient_argmax({{1, 0, 0, 0}, {0, 1, 0, 0}}) == 0);
  CHECK(patient_argmax({{0, 0, .5, .5}}) == 2);
}

TEST_CASE("patient-level prediction on a site") {
  auto spec = nn::ModelSpec::default_spec(8, 4);
  const auto params = nn::init_params(spec, 3);
  data::SiteProfile prof;
  prof.site_id = "s";
  prof.n_train = 10;
  prof.n_val = 0;
  prof.n_test = 60;
  prof.resolution = 8;
  prof.seed = 4;
  auto site = data::generate_site(prof);
  const auto preds = patient_level_predict(spec, params, site, data::Split::Test);
  REQUIRE(!preds.empty());
  for (std::size_t i = 1; i < preds.size(); ++i) CHECK(preds[i - 1].patient_id < preds[i].patient_id);

  SUBCASE("single-image patients use that image's argmax") {
    for (const auto& pp : preds) {
      std::vector<std::size_t> imgs;
      for (auto i : site.indices(data::Split::Test)) {
        if (site.patient_ids[i] == pp.patient_id) imgs.push_back(i);
      }
      std::vector<std::vector<double>> probs;
      for (auto i : imgs) {
        nn::Tensor batch({1, 8, 8}, std::vector<float>(site.images[i].data().begin(), site.images[i].data().end()));
        probs.push_back(nn::softmax_rows(nn::forward(spec, params, batch))[0]);
      }
      CHECK(pp.predicted == patient_argmax(probs));
      CHECK(pp.label == site.labels[imgs[0]]);
    }
  }
  SUBCASE("permuting images within the split leaves predictions unchanged") {
    auto shuffled = site;
    std::vector<std::size_t> order(site.size());
    std::iota(order.begin(), order.end(), 0);
    CounterRng rng(77);
    shuffle(std::span(order), rng);
    for (std::size_t k = 0; k < order.size(); ++k) {
      shuffled.images[k] = site.images[order[k]];
      shuffled.labels[k] = site.labels[order[k]];
      shuffled.patient_ids[k] = site.patient_ids[order[k]];
      shuffled.splits[k] = site.splits[order[k]];
    }
    const auto again = patient_level_predict(spec, params, shuffled, data::Split::Test);
    REQUIRE(again.size() == preds.size());
    for (std::size_t i = 0; i < preds.size(); ++i) {
      CHECK(again[i].patient_id == preds[i].patient_id);
      CHECK(again[i].predicted == preds[i].predicted);
    }
  }
  SUBCASE("empty split") {
    CHECK_THROWS_AS_CODE(patient_level_predict(spec, params, site, data::Split::Val), ErrorCode::EmptySplit);
  }
}

TEST_CASE("cross-site matrix is deterministic and threads do not matter") {
  auto spec = nn::ModelSpec::default_spec(8, 4);
  std::vector<data::SiteDataset> sites;
  std::vector<nn::ParamVector> models;
  for (int s = 0; s < 3; ++s) {
    data::SiteProfile prof;
    prof.site_id = "site" + std::to_string(s);
    prof.n_train = 5;
    prof.n_test = 80;
    prof.resolution = 8;
    prof.seed = static_cast<std::uint64_t>(10 + s);
    sites.push_back(data::generate_site(prof));
    models.push_back(nn::init_params(spec, static_cast<std::uint64_t>(s)));
  }
  const auto a = cross_site_matrix(spec, models, sites, models[0], Weighting::Linear, 1);
  const auto b = cross_site_matrix(spec, models, sites, models[0], Weighting::Linear, 4);
  CHECK(a == b);
  REQUIRE(a.global_row);
  CHECK((*a.global_row)[1] == a.values[0][1]);

  const auto one = cross_site_matrix(spec, {models[1]}, {sites[1]});
  CHECK(one.size() == 1);
  std::optional<double> direct;
  try {
    direct = split_kappa(spec, models[1], sites[1], data::Split::Test);
  } catch (const Error&) {
  }
  CHECK(one.values[0][0] == direct);
  CHECK_THROWS_AS_CODE(cross_site_matrix(spec, models, {sites[0]}), ErrorCode::InvalidShape);
}

TEST_CASE("summaries of the published tables") {
  const auto local = make_matrix(published::site_ids(), published::kLocal);
  auto fed = make_matrix(published::site_ids(), published::kFederated);
  fed.global_row.emplace(published::kGlobal.begin(), published::kGlobal.end());

  const auto a = summarize(local);
  const auto b = summarize(fed, local);
  CHECK(std::abs(a.diag_mean - 0.64) <= 0.005);
  CHECK(std::abs(a.offdiag_mean - 0.18) <= 0.005);
  CHECK(std::abs(b.diag_mean - 0.68) <= 0.005);
  CHECK(std::abs(b.offdiag_mean - 0.26) <= 0.005);
  CHECK(a.diag_count == 7);
  CHECK(a.offdiag_count == 42);

  // Direct summation check.
  double d = 0, o = 0;
  for (int i = 0; i < 7; ++i) {
    for (int j = 0; j < 7; ++j) (i == j ? d : o) += published::kFederated[i][j];
  }
  CHECK(b.diag_mean == doctest::Approx(d / 7).epsilon(1e-15));
  CHECK(b.offdiag_mean == doctest::Approx(o / 42).epsilon(1e-15));

  // From the rounded printed means.
  CHECK((0.68 - 0.64) / 0.64 == doctest::Approx(0.0625).epsilon(1e-12));
  REQUIRE(b.rel_improvement_diag);
  CHECK(*b.rel_improvement_diag == doctest::Approx(0.0604).epsilon(0.01));
  REQUIRE(b.rel_improvement_offdiag);
  CHECK(*b.rel_improvement_offdiag > 0.40);

  auto wrong = make_matrix({"x"}, {{0.5}});
  CHECK_THROWS_AS_CODE(summarize(fed, wrong), ErrorCode::InvalidShape);
}

TEST_CASE("undefined cells are skipped in summaries") {
  auto m = make_matrix({"a", "b"}, {{0.5, 0.1}, {0.3, 0.7}});
  m.values[0][1].reset();
  const auto s = summarize(m);
  CHECK(s.offdiag_count == 1);
  CHECK(s.offdiag_mean == doctest::Approx(0.3));
}

TEST_CASE("csv round trip") {
  auto m = make_matrix({"a", "b", "c"}, {{0.123456, -0.5, 1}, {0.25, 0.75, 0}, {-1, 0.333333, 0.999999}});
  m.values[2][0].reset();
  m.global_row = std::vector<std::optional<double>>{0.4852, std::nullopt, 0.0893};
  const auto csv = matrix_to_csv(m);
  CHECK(csv.rfind("model,a,b,c\n", 0) == 0);
  CHECK(matrix_from_csv(csv) == m);
  CHECK_THROWS_AS_CODE(matrix_from_csv("model,a\na,zz\n"), ErrorCode::Malformed);
}

TEST_CASE("report files") {
  const auto dir = testutil::temp_dir("eval_report");
  ReportInputs in;
  in.local = make_matrix(published::site_ids(), published::kLocal);
  in.federated = make_matrix(published::site_ids(), published::kFederated);
  in.federated.global_row.emplace(published::kGlobal.begin(), published::kGlobal.end());
  in.finetuned_diag = std::vector<std::optional<double>>{0.7, 0.7, 0.7, 0.7, 0.7, 0.7, 0.7};
  const auto paths = emit_report(dir, in);
  CHECK(paths.size() == 5);
  const auto report = read_text_file(dir / "report.txt");
  CHECK(report.find("0.64") != std::string::npos);
  CHECK(report.find("0.68") != std::string::npos);
  const auto json = nlohmann::json::parse(read_text_file(dir / "summary.json"));
  for (const char* key : {"diag_mean", "offdiag_mean", "rel_improvement_diag", "rel_improvement_offdiag"}) {
    CHECK(json.contains(key));
  }
  CHECK(matrix_from_csv(read_text_file(dir / "federated.csv")) == in.federated);

  const auto first = read_text_file(dir / "report.txt");
  emit_report(dir, in);
  CHECK(read_text_file(dir / "report.txt") == first);
  CHECK_THROWS_AS_CODE(emit_report(dir / "missing" / "deeper", in), ErrorCode::IoError);
}
