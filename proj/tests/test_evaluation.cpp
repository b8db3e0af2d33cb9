// Copyright 2026 The ctxssl Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <doctest.h>

#include <fstream>
#include <map>
#include <set>

#include <nlohmann/json.hpp>

#include "ctxssl/error.hpp"
#include "ctxssl/evaluation.hpp"
#include "support.hpp"

using namespace ctxssl;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

std::vector<std::optional<std::string>> to_optional(const std::vector<std::string>& v) {
  return {v.begin(), v.end()};
}

// Gradient of sum_i CE_i + l2/2 ||W||^2 over the free rows, on standardised features.
double objective_gradient_norm(const LogisticModel& m, const MatrixXd& x, const std::vector<std::string>& labels,
                               double l2) {
  const MatrixXd z = m.standardizer.apply(x);
  const auto k = static_cast<Eigen::Index>(m.classes.size());
  MatrixXd gw = MatrixXd::Zero(k, z.cols());
  VectorXd gb = VectorXd::Zero(k);
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    VectorXd logit = m.bias + m.weight * z.row(i).transpose();
    logit.array() -= logit.maxCoeff();
    VectorXd p = logit.array().exp();
    p /= p.sum();
    const auto y = std::find(m.classes.begin(), m.classes.end(), labels[static_cast<std::size_t>(i)]) - m.classes.begin();
    p[y] -= 1;
    gw += p * z.row(i);
    gb += p;
  }
  gw += l2 * m.weight;
  return std::sqrt(gw.bottomRows(k - 1).squaredNorm() + gb.tail(k - 1).squaredNorm());
}

}  // namespace

TEST_CASE("kfold: sizes, partition, determinism") {
  const Folds f = kfold_split(10, 5, 3);
  REQUIRE(f.size() == 5);
  for (const auto& fold : f) CHECK(fold.size() == 2);
  CHECK(f == kfold_split(10, 5, 3));
  CHECK(f != kfold_split(10, 5, 4));
  CHECK_THROWS_AS(kfold_split(4, 5, 0), ContractError);

  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const int k = 2 + static_cast<int>(rng.index(6));
    const int n = k + static_cast<int>(rng.index(60));
    const Folds folds = kfold_split(n, k, rng.engine()());
    std::set<int> seen;
    std::size_t lo = SIZE_MAX, hi = 0;
    for (const auto& fold : folds) {
      CHECK(std::is_sorted(fold.begin(), fold.end()));
      lo = std::min(lo, fold.size());
      hi = std::max(hi, fold.size());
      for (int i : fold) CHECK(seen.insert(i).second);
    }
    CHECK(static_cast<int>(seen.size()) == n);
    CHECK(hi - lo <= 1);
  }

  const std::vector<std::string> ids{"a", "b", "c", "d", "e", "f"};
  const auto by_id = kfold_split(ids, 3, 9);
  const Folds by_row = kfold_split(6, 3, 9);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < by_row[i].size(); ++j)
      CHECK(by_id[i][j] == ids[static_cast<std::size_t>(by_row[i][j])]);
}

TEST_CASE("r2: hand cases") {
  VectorXd y(2), yh(2);
  y << 1, 3;
  yh << 1, 2;
  CHECK(std::abs(*r2_score(y, yh) - 0.5) < 1e-12);
  CHECK(std::abs(*r2_score(y, y) - 1.0) < 1e-12);
  VectorXd mean_pred = VectorXd::Constant(2, 2.0);
  CHECK(std::abs(*r2_score(y, mean_pred)) < 1e-12);
  CHECK_FALSE(r2_score(VectorXd::Constant(3, 4.0), VectorXd::Zero(3)).has_value());
}

TEST_CASE("standardizer: train statistics, zero spread maps to unit scale") {
  MatrixXd x(4, 2);
  x << 1, 5, 2, 5, 3, 5, 4, 5;
  const Standardizer s = Standardizer::fit(x);
  CHECK(s.mean(0) == doctest::Approx(2.5));
  CHECK(s.scale(1) == 1.0);
  const MatrixXd z = s.apply(x);
  CHECK(std::abs(z.col(0).mean()) < 1e-12);
  CHECK(z.col(1).isZero());
}

TEST_CASE("ridge: exact linear targets give R^2 = 1 on every fold") {
  Rng rng(2);
  const MatrixXd x = testing::random_matrix(50, 4, rng, -1, 1);
  VectorXd w(4);
  w << 1, -2, 0.5, 3;
  const VectorXd y = (x * w).array() + 0.7;
  std::vector<std::optional<double>> t(y.data(), y.data() + y.size());
  const ProbeResult r = linear_probe_regression("lin", x, t, kfold_split(50, 5, 1), 0.0);
  REQUIRE(r.per_fold.size() == 5);
  for (const auto& v : r.per_fold) CHECK(std::abs(*v - 1.0) < 1e-10);
  CHECK(r.metric == "r2");
  CHECK(r.n_subjects == 50);

  const RidgeModel m = RidgeModel::fit(x, y, 0.0);
  CHECK((m.predict(x) - y).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("ridge: missing targets are excluded; a constant test fold is recorded as missing") {
  Rng rng(3);
  const MatrixXd x = testing::random_matrix(10, 2, rng);
  const Folds folds = kfold_split(10, 5, 0);
  std::vector<std::optional<double>> t(10);
  for (int i = 0; i < 10; ++i) t[static_cast<std::size_t>(i)] = rng.normal();
  // Fold 0 becomes constant.
  for (int i : folds[0]) t[static_cast<std::size_t>(i)] = 1.0;
  t[static_cast<std::size_t>(folds[1][0])] = std::nullopt;
  const ProbeResult r = linear_probe_regression("t", x, t, folds);
  CHECK_FALSE(r.per_fold[0].has_value());
  CHECK(r.n_subjects == 9);
  double s = 0;
  int n = 0;
  for (std::size_t f = 1; f < 5; ++f) {
    if (!r.per_fold[f]) continue;
    s += *r.per_fold[f];
    ++n;
  }
  CHECK(r.mean == doctest::Approx(s / n));
}

TEST_CASE("logistic: separable data is classified perfectly") {
  Rng rng(4);
  MatrixXd x(40, 2);
  std::vector<std::string> y;
  for (int i = 0; i < 40; ++i) {
    const bool pos = i % 2 == 0;
    x(i, 0) = (pos ? 2.0 : -2.0) + rng.uniform(-0.5, 0.5);
    x(i, 1) = rng.normal();
    y.push_back(pos ? "b" : "a");
  }
  const ProbeResult r = linear_probe_classification("sep", x, to_optional(y), kfold_split(40, 5, 2));
  for (const auto& v : r.per_fold) CHECK(*v == 1.0);
  CHECK(r.mean == 1.0);
  CHECK(r.metric == "accuracy");
}

TEST_CASE("logistic: the fit is a stationary point of the regularised objective") {
  Rng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    const MatrixXd x = testing::random_matrix(60, 3, rng, -2, 2);
    std::vector<std::string> y;
    for (int i = 0; i < 60; ++i) {
      const double s = x(i, 0) - x(i, 1) + rng.normal();
      y.push_back(s < -1 ? "low" : (s < 1 ? "mid" : "high"));
    }
    const LogisticModel m = LogisticModel::fit(x, y, 1.0);
    CHECK(m.classes == std::vector<std::string>{"high", "low", "mid"});
    CHECK(m.weight.row(0).isZero());
    CHECK(m.bias[0] == 0.0);
    CHECK(objective_gradient_norm(m, x, y, 1.0) < 1e-5);
    // Raw parameters reproduce the standardised logits.
    const MatrixXd raw = (x * m.raw_weight().transpose()).rowwise() + m.raw_bias().transpose();
    CHECK((raw - m.logits(x)).cwiseAbs().maxCoeff() < 1e-9);
  }
  CHECK_THROWS_AS(LogisticModel::fit(MatrixXd::Ones(3, 1), {"a", "a", "a"}, 1.0), ContractError);
}

TEST_CASE("logistic: a single-class training split is an error") {
  MatrixXd x = MatrixXd::Zero(10, 1);
  std::vector<std::optional<std::string>> y(10, std::string("a"));
  y[0] = "b";
  y[1] = "b";
  // Folds put both "b" rows into the same test fold.
  Folds f{{0, 1}, {2, 3}, {4, 5}, {6, 7}, {8, 9}};
  CHECK_THROWS_AS(linear_probe_classification("one", x, y, f), ContractError);
}

TEST_CASE("logistic: random labels sit near chance; learned accuracy beats the majority baseline") {
  Rng rng(6);
  const int n = 400;
  const MatrixXd x = testing::random_matrix(n, 3, rng);
  std::vector<std::string> random_y;
  for (int i = 0; i < n; ++i) random_y.push_back(i % 2 == 0 ? "a" : "b");
  for (int i = n - 1; i > 0; --i) std::swap(random_y[static_cast<std::size_t>(i)], random_y[rng.index(static_cast<std::size_t>(i + 1))]);
  const ProbeResult chance = linear_probe_classification("rnd", x, to_optional(random_y), kfold_split(n, 5, 1));
  // 3 binomial standard deviations of an accuracy over 400 predictions.
  CHECK(std::abs(chance.mean - 0.5) < 3 * std::sqrt(0.25 / n));

  std::vector<std::string> y;
  int majority = 0;
  for (int i = 0; i < n; ++i) {
    const bool pos = x(i, 0) + 0.5 * rng.normal() > 0.8;
    y.push_back(pos ? "p" : "n");
    majority += pos ? 0 : 1;
  }
  const ProbeResult learned = linear_probe_classification("maj", x, to_optional(y), kfold_split(n, 5, 1));
  CHECK(learned.mean >= static_cast<double>(majority) / n);
}

TEST_CASE("summary statistics equal recomputation from per-fold values") {
  ProbeResult r;
  r.per_fold = {0.5, std::nullopt, 0.7, 0.9};
  r.summarize();
  CHECK(r.mean == doctest::Approx(0.7));
  CHECK(r.std == doctest::Approx(std::sqrt((0.04 + 0 + 0.04) / 3.0)));
}

TEST_CASE("probe outputs: one row per task and fold plus summaries") {
  ProbeResult a;
  a.task = "severity";
  a.metric = "accuracy";
  a.per_fold = {1.0, 0.5};
  a.summarize();
  testing::TempDir dir("probe");
  write_probe_csv({a}, dir / "r.csv");
  write_probe_json({a}, dir / "r.json");
  std::ifstream in(dir / "r.csv");
  std::string line;
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 1 + 2 + 2);
  const auto j = nlohmann::json::parse(std::ifstream(dir / "r.json"));
  CHECK(j.dump().find("severity") != std::string::npos);
}
