#include "isg/eval_harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "isg/errors.hpp"
#include "isg/rng.hpp"

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

using namespace isg;

namespace {

// One-pass moment formula, a different computation path than the
// centered two-pass sum inside pcc.
double reference_pcc(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    syy += y[i] * y[i];
    sxy += x[i] * y[i];
  }
  const double cov = sxy / n - (sx / n) * (sy / n);
  const double vx = sxx / n - (sx / n) * (sx / n);
  const double vy = syy / n - (sy / n) * (sy / n);
  return cov / std::sqrt(vx * vy);
}

// Exhaustive positive-negative pair enumeration with ties worth 1/2.
double reference_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      if (scores[i] > scores[j])
        wins += 1.0;
      else if (scores[i] == scores[j])
        wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

std::vector<double> random_vector(Rng& rng, std::size_t n, double lo, double hi) {
  std::vector<double> out(n);
  for (auto& v : out) v = lo + (hi - lo) * rng.uniform();
  return out;
}

}  // namespace

TEST_CASE("pcc matches its closed forms") {
  const std::vector<double> v{1, 5, 2, 9};
  CHECK(pcc(v, v) == doctest::Approx(1.0).epsilon(1e-12));

  std::vector<double> neg(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) neg[i] = -v[i];
  CHECK(pcc(neg, v) == doctest::Approx(-1.0).epsilon(1e-12));

  // x=[1,2,3], y=[1,2,4]: cov 3, var_x 2, var_y 14/3, r = 3/sqrt(28/3) = 9/sqrt(84)
  const std::vector<double> x{1, 2, 3}, y{1, 2, 4};
  const double r = pcc(x, y);
  CHECK(r == doctest::Approx(9.0 / std::sqrt(84.0)).epsilon(1e-12));
  CHECK(r == doctest::Approx(reference_pcc(x, y)).epsilon(1e-12));
}

TEST_CASE("pcc agrees with the moment formula on random draws") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(2, 40));
    auto x = random_vector(rng, n, -3.0, 3.0);
    auto y = random_vector(rng, n, -3.0, 3.0);
    x[0] += 1.0;  // guards the n=2 case against accidental zero variance
    y[0] += 1.0;
    const double r = pcc(x, y);
    CHECK(r == doctest::Approx(reference_pcc(x, y)).epsilon(1e-9));
    CHECK(r >= -1.0);
    CHECK(r <= 1.0);
  }
}

TEST_CASE("pcc is invariant to positive affine maps and flips sign") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_vector(rng, 12, -2.0, 2.0);
    const auto y = random_vector(rng, 12, -2.0, 2.0);
    const double base = pcc(x, y);
    const double a = 0.1 + 5.0 * rng.uniform();
    const double b = rng.normal(0.0, 3.0);
    std::vector<double> ax(x.size()), nx(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      ax[i] = a * x[i] + b;
      nx[i] = -x[i];
    }
    CHECK(pcc(ax, y) == doctest::Approx(base).epsilon(1e-12));
    CHECK(pcc(nx, y) == doctest::Approx(-base).epsilon(1e-12));
  }
}

TEST_CASE("pcc rejects degenerate input") {
  CHECK_THROWS_WITH_AS(pcc({1, 2}, {1, 2, 3}), doctest::Contains("equal lengths"), Error);
  CHECK_THROWS_WITH_AS(pcc({1}, {2}), doctest::Contains("at least 2"), Error);
  CHECK_THROWS_WITH_AS(pcc({3, 3, 3}, {1, 2, 4}), doctest::Contains("zero variance"), Error);
  CHECK_THROWS_WITH_AS(pcc({1, 2, 4}, {5, 5, 5}), doctest::Contains("zero variance"), Error);
  const double nan = std::nan("");
  CHECK_THROWS_WITH_AS(pcc({1, nan, 3}, {1, 2, 4}), doctest::Contains("not finite"), Error);
}

TEST_CASE("auc matches exhaustive pair counting") {
  // pairs: (.35,.1) win, (.35,.4) loss, (.8,.1) win, (.8,.4) win -> 3/4
  const std::vector<double> scores{0.1, 0.4, 0.35, 0.8};
  const std::vector<int> labels{0, 0, 1, 1};
  CHECK(auc(scores, labels) == 0.75);
  CHECK(auc(scores, labels) == reference_auc(scores, labels));

  CHECK(auc({1, 2, 10, 11}, {0, 0, 1, 1}) == 1.0);
  CHECK(auc({5, 5, 5, 5, 5}, {0, 1, 0, 1, 1}) == 0.5);

  Rng rng(23);
  for (int trial = 0; trial < 100; ++trial) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(2, 30));
    std::vector<double> s(n);
    std::vector<int> l(n);
    // coarse score grid forces plenty of ties
    for (auto& v : s) v = 0.1 * static_cast<double>(rng.uniform_int(0, 9));
    for (auto& v : l) v = static_cast<int>(rng.uniform_int(0, 1));
    l[0] = 0;
    l[n - 1] = 1;
    CHECK(auc(s, l) == reference_auc(s, l));
  }
}

TEST_CASE("auc is invariant under monotone transforms and complements") {
  Rng rng(31);
  for (int trial = 0; trial < 30; ++trial) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(4, 25));
    std::vector<double> s(n);
    std::vector<int> l(n);
    for (auto& v : s) v = 0.1 * static_cast<double>(rng.uniform_int(0, 9));
    for (auto& v : l) v = static_cast<int>(rng.uniform_int(0, 1));
    l[0] = 0;
    l[n - 1] = 1;
    std::vector<double> mapped(n);
    for (std::size_t i = 0; i < n; ++i) mapped[i] = 2.0 * s[i] + 3.0;
    CHECK(auc(mapped, l) == auc(s, l));
  }

  // tie-free scores: distinct integers in shuffled order
  std::vector<double> s{3, 9, 1, 7, 4, 8, 2, 6};
  std::vector<int> l{0, 1, 0, 1, 1, 0, 0, 1};
  std::vector<double> neg(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) neg[i] = -s[i];
  CHECK(auc(s, l) + auc(neg, l) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("auc rejects degenerate input") {
  CHECK_THROWS_WITH_AS(auc({1, 2}, {0, 0}), doctest::Contains("both classes"), Error);
  CHECK_THROWS_WITH_AS(auc({1, 2}, {1, 1}), doctest::Contains("both classes"), Error);
  CHECK_THROWS_WITH_AS(auc({1, 2}, {0, 2}), doctest::Contains("0 or 1"), Error);
  CHECK_THROWS_WITH_AS(auc({1, 2, 3}, {0, 1}), doctest::Contains("one label per score"), Error);
  CHECK_THROWS_WITH_AS(auc({std::nan(""), 2}, {0, 1}), doctest::Contains("not finite"), Error);
}

TEST_CASE("log_normalize matches analytic values") {
  CHECK(log_normalize({0.0}) == GeneVector{0.0});
  CHECK(log_normalize({std::exp(1.0) - 1.0})[0] == doctest::Approx(1.0).epsilon(1e-14));
  const auto v = log_normalize({0.0, 9.0, 99.0});
  REQUIRE(v.size() == 3);
  CHECK(v[0] == 0.0);
  CHECK(v[1] == doctest::Approx(std::log(10.0)).epsilon(1e-14));
  CHECK(v[2] == doctest::Approx(std::log(100.0)).epsilon(1e-14));
  CHECK(log_normalize({}).empty());
}

TEST_CASE("log_normalize rejects negatives and non-finite input") {
  CHECK_THROWS_WITH_AS(log_normalize({1.0, -0.5}), doctest::Contains("non-negative"), Error);
  CHECK_THROWS_WITH_AS(log_normalize({std::nan("")}), doctest::Contains("not finite"), Error);
}

namespace {

std::vector<std::string> make_ids(int n) {
  std::vector<std::string> ids;
  for (int i = 0; i < n; ++i) ids.push_back("slide" + std::to_string(i));
  return ids;
}

std::vector<int> fold_sizes(const FoldAssignment& fa) {
  std::vector<int> sizes(static_cast<std::size_t>(fa.k), 0);
  for (const auto& [id, fold] : fa.mapping) {
    REQUIRE(fold >= 0);
    REQUIRE(fold < fa.k);
    ++sizes[static_cast<std::size_t>(fold)];
  }
  return sizes;
}

}  // namespace

TEST_CASE("kfold_split balances folds") {
  const auto even = kfold_split(make_ids(10), 5, 3);
  for (int s : fold_sizes(even)) CHECK(s == 2);

  auto sizes = fold_sizes(kfold_split(make_ids(11), 5, 3));
  std::sort(sizes.begin(), sizes.end());
  CHECK(sizes == std::vector<int>{2, 2, 2, 2, 3});
}

TEST_CASE("kfold_split is deterministic and covers every slide once") {
  const auto ids = make_ids(13);
  const auto a = kfold_split(ids, 4, 99);
  const auto b = kfold_split(ids, 4, 99);
  CHECK(a.mapping == b.mapping);

  const auto c = kfold_split(ids, 4, 100);
  CHECK(a.mapping != c.mapping);

  REQUIRE(a.mapping.size() == ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) CHECK(a.mapping[i].first == ids[i]);

  int total = 0;
  for (int s : fold_sizes(a)) {
    CHECK(s >= 3);
    CHECK(s <= 4);
    total += s;
  }
  CHECK(total == 13);

  CHECK(a.fold_of("slide0") == a.mapping[0].second);
  CHECK_THROWS_WITH_AS(a.fold_of("stranger"), doctest::Contains("not in fold"), Error);
}

TEST_CASE("kfold_split rejects bad input") {
  CHECK_THROWS_WITH_AS(kfold_split(make_ids(4), 5, 1), doctest::Contains("at least k"), Error);
  CHECK_THROWS_WITH_AS(kfold_split(make_ids(3), 0, 1), doctest::Contains("k >= 1"), Error);
  CHECK_THROWS_WITH_AS(kfold_split({"a", "b", "a"}, 2, 1), doctest::Contains("duplicate"), Error);
}

TEST_CASE("probe fails cleanly on constant features") {
  // identical feature vectors force constant predictions on every fold
  std::vector<std::vector<double>> features(10, {0.3, 0.7, 0.1});
  std::vector<GeneVector> labels;
  Rng rng(5);
  for (int i = 0; i < 10; ++i) labels.push_back({rng.uniform(), rng.uniform()});

  ProbeConfig cfg;
  cfg.epochs = 20;
  const auto res = feature_probe(features, labels, cfg);
  CHECK(res.failed);
  CHECK(res.mean_pcc == 0.0);
  REQUIRE(res.fold_pcc.size() == 5);
  for (double v : res.fold_pcc) CHECK(v == 0.0);
}

TEST_CASE("probe recovers a linear relation") {
  // features carry the labels verbatim in their first coordinates
  Rng rng(17);
  std::vector<std::vector<double>> features;
  std::vector<GeneVector> labels;
  for (int i = 0; i < 20; ++i) {
    const double y0 = 0.5 + 1.5 * rng.uniform();
    const double y1 = 1.0 - 2.0 * rng.uniform();
    features.push_back({y0, y1, 0.0, 0.0});
    labels.push_back({y0, y1});
  }
  ProbeConfig cfg;
  const auto res = feature_probe(features, labels, cfg);
  CHECK_FALSE(res.failed);
  CHECK(res.mean_pcc > 0.99);
}

TEST_CASE("probe with zero epochs reports the untrained head") {
  Rng rng(29);
  std::vector<std::vector<double>> features;
  std::vector<GeneVector> labels;
  for (int i = 0; i < 12; ++i) {
    features.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
    labels.push_back({rng.uniform()});
  }
  ProbeConfig cfg;
  cfg.epochs = 0;
  cfg.folds = 3;
  const auto res = feature_probe(features, labels, cfg);
  CHECK(std::isfinite(res.mean_pcc));
  CHECK(res.fold_pcc.size() == 3);

  const auto rerun = feature_probe(features, labels, cfg);
  CHECK(res.mean_pcc == rerun.mean_pcc);
  CHECK(res.fold_pcc == rerun.fold_pcc);
}

TEST_CASE("probe validates its configuration") {
  const std::vector<std::vector<double>> feats(10, std::vector<double>{1.0, 2.0});
  const std::vector<GeneVector> labels(10, GeneVector{0.5});
  ProbeConfig cfg;

  CHECK_THROWS_WITH_AS(feature_probe({}, {}, cfg), doctest::Contains("at least one slide"),
                       Error);
  CHECK_THROWS_WITH_AS(feature_probe(feats, std::vector<GeneVector>(9, GeneVector{0.5}), cfg),
                       doctest::Contains("one label per feature"), Error);

  ProbeConfig small = cfg;
  small.folds = 6;
  CHECK_THROWS_WITH_AS(feature_probe(feats, labels, small),
                       doctest::Contains("2 slides per fold"), Error);

  ProbeConfig single = cfg;
  single.folds = 1;
  CHECK_THROWS_WITH_AS(feature_probe(feats, labels, single),
                       doctest::Contains("at least 2 folds"), Error);

  ProbeConfig bad_lr = cfg;
  bad_lr.lr = -1.0;
  CHECK_THROWS_WITH_AS(feature_probe(feats, labels, bad_lr),
                       doctest::Contains("training config"), Error);

  auto ragged = feats;
  ragged[3] = {1.0};
  CHECK_THROWS_WITH_AS(feature_probe(ragged, labels, cfg), doctest::Contains("ragged"), Error);
}

TEST_CASE("format_report emits the expected table") {
  const std::vector<ReportRow> rows{{"synthetic", "g0", 0, 0.5}, {"synthetic", "g1", 1, 0.25}};
  CHECK(format_report(rows) ==
        "task\tgene\tfold\tpcc\n"
        "synthetic\tg0\t0\t0.500000\n"
        "synthetic\tg1\t1\t0.250000\n"
        "AVG\t-\t-\t0.375000\n");
  CHECK(format_report({}) == "task\tgene\tfold\tpcc\nAVG\t-\t-\t0.000000\n");
}
