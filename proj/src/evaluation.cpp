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


#include "ctxssl/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "ctxssl/error.hpp"
#include "ctxssl/rng.hpp"

namespace ctxssl {

using Eigen::MatrixXd;
using Eigen::VectorXd;

Folds kfold_split(int n, int k, std::uint64_t seed) {
  if (k < 2) throw ContractError("k-fold split needs k >= 2");
  if (n < k) throw ContractError("k-fold split needs at least k = " + std::to_string(k) + " subjects, got " + std::to_string(n));
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, {0x6b666f6c64ULL}));
  for (int i = n - 1; i > 0; --i) std::swap(order[static_cast<std::size_t>(i)], order[rng.index(static_cast<std::size_t>(i + 1))]);
  Folds folds(static_cast<std::size_t>(k));
  for (int i = 0; i < n; ++i) folds[static_cast<std::size_t>(i % k)].push_back(order[static_cast<std::size_t>(i)]);
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

std::vector<std::vector<std::string>> kfold_split(const std::vector<std::string>& ids, int k, std::uint64_t seed) {
  const Folds idx = kfold_split(static_cast<int>(ids.size()), k, seed);
  std::vector<std::vector<std::string>> out;
  for (const auto& f : idx) {
    auto& o = out.emplace_back();
    for (int i : f) o.push_back(ids[static_cast<std::size_t>(i)]);
  }
  return out;
}

Standardizer Standardizer::fit(const MatrixXd& x) {
  Standardizer s;
  s.mean = x.colwise().mean();
  s.scale = ((x.rowwise() - s.mean).array().square().colwise().mean()).sqrt().matrix();
  for (Eigen::Index j = 0; j < s.scale.size(); ++j)
    if (!(s.scale(j) > 1e-12)) s.scale(j) = 1.0;
  return s;
}

MatrixXd Standardizer::apply(const MatrixXd& x) const {
  return (x.rowwise() - mean).array().rowwise() / scale.array();
}

std::optional<double> r2_score(const VectorXd& y, const VectorXd& y_hat) {
  if (y.size() != y_hat.size() || y.size() == 0) throw ContractError("r2_score: size mismatch");
  const double ss_tot = (y.array() - y.mean()).square().sum();
  if (!(ss_tot > 0.0)) return std::nullopt;
  return 1.0 - (y - y_hat).squaredNorm() / ss_tot;
}

RidgeModel RidgeModel::fit(const MatrixXd& x, const VectorXd& y, double lambda) {
  if (x.rows() != y.size() || x.rows() == 0) throw ContractError("ridge: empty or mismatched training data");
  RidgeModel m;
  m.standardizer = Standardizer::fit(x);
  const MatrixXd z = m.standardizer.apply(x);
  m.bias = y.mean();
  MatrixXd gram = z.transpose() * z;
  gram.diagonal().array() += lambda;
  m.weight = gram.completeOrthogonalDecomposition().solve(z.transpose() * (y.array() - m.bias).matrix());
  return m;
}

VectorXd RidgeModel::predict(const MatrixXd& x) const {
  return (standardizer.apply(x) * weight).array() + bias;
}

// ---------------------------------------------------------------- logistic

namespace {

// Row-wise softmax probabilities and the summed cross-entropy.
double softmax_rows(const MatrixXd& logits, const std::vector<int>& y, MatrixXd& p) {
  p.resize(logits.rows(), logits.cols());
  double ce = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    const Eigen::RowVectorXd e = (logits.row(i).array() - mx).exp().matrix();
    const double z = e.sum();
    p.row(i) = e / z;
    ce -= logits(i, y[static_cast<std::size_t>(i)]) - mx - std::log(z);
  }
  return ce;
}

}  // namespace

LogisticModel LogisticModel::fit(const MatrixXd& x, const std::vector<std::string>& labels, double l2, double tolerance,
                                 int max_iterations) {
  if (x.rows() != static_cast<Eigen::Index>(labels.size()) || x.rows() == 0)
    throw ContractError("logistic: empty or mismatched training data");
  LogisticModel m;
  const std::set<std::string> uniq(labels.begin(), labels.end());
  if (uniq.size() < 2) throw ContractError("logistic: training split holds a single class");
  m.classes.assign(uniq.begin(), uniq.end());
  std::vector<int> y(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i)
    y[i] = static_cast<int>(std::lower_bound(m.classes.begin(), m.classes.end(), labels[i]) - m.classes.begin());

  m.standardizer = Standardizer::fit(x);
  const Eigen::Index n = x.rows(), f = x.cols(), k = static_cast<Eigen::Index>(m.classes.size());
  MatrixXd xt(n, f + 1);
  xt << m.standardizer.apply(x), VectorXd::Ones(n);
  const Eigen::Index fb = f + 1, d = (k - 1) * fb;

  // theta rows: free classes 1..K-1; columns: weights then bias.
  MatrixXd theta = MatrixXd::Zero(k - 1, fb);
  auto objective = [&](const MatrixXd& th, MatrixXd& p) {
    MatrixXd logits = MatrixXd::Zero(n, k);
    logits.rightCols(k - 1) = xt * th.transpose();
    return softmax_rows(logits, y, p) + 0.5 * l2 * th.leftCols(f).squaredNorm();
  };

  MatrixXd p;
  double obj = objective(theta, p);
  for (m.iterations = 0; m.iterations < max_iterations; ++m.iterations) {
    MatrixXd resid = p;
    for (Eigen::Index i = 0; i < n; ++i) resid(i, y[static_cast<std::size_t>(i)]) -= 1.0;
    MatrixXd grad = resid.rightCols(k - 1).transpose() * xt;  // (K-1, F+1)
    grad.leftCols(f) += l2 * theta.leftCols(f);
    VectorXd g(d);
    for (Eigen::Index c = 0; c < k - 1; ++c) g.segment(c * fb, fb) = grad.row(c).transpose();
    m.gradient_norm = g.norm();
    if (m.gradient_norm < tolerance) break;

    MatrixXd h = MatrixXd::Zero(d, d);
    for (Eigen::Index a = 0; a < k - 1; ++a)
      for (Eigen::Index b = a; b < k - 1; ++b) {
        VectorXd w = (a == b ? VectorXd(p.col(a + 1).array() * (1.0 - p.col(a + 1).array()))
                             : VectorXd(-p.col(a + 1).array() * p.col(b + 1).array()));
        const MatrixXd blk = xt.transpose() * w.asDiagonal() * xt;
        h.block(a * fb, b * fb, fb, fb) = blk;
        if (a != b) h.block(b * fb, a * fb, fb, fb) = blk.transpose();
      }
    for (Eigen::Index c = 0; c < k - 1; ++c) h.block(c * fb, c * fb, f, f).diagonal().array() += l2;
    h.diagonal().array() += 1e-10;
    const VectorXd step = h.ldlt().solve(-g);

    double t = 1.0;
    MatrixXd trial, p_trial;
    double obj_trial = obj;
    const double slope = g.dot(step);
    for (int ls = 0; ls < 50; ++ls, t *= 0.5) {
      trial = theta;
      for (Eigen::Index c = 0; c < k - 1; ++c) trial.row(c) += t * step.segment(c * fb, fb).transpose();
      obj_trial = objective(trial, p_trial);
      if (obj_trial <= obj + 1e-4 * t * slope) break;
    }
    if (!(obj_trial <= obj)) break;  // no further progress possible at machine precision
    theta = trial;
    p = p_trial;
    obj = obj_trial;
  }
  if (!theta.allFinite()) throw NumericError("logistic: non-finite parameters");
  m.weight = MatrixXd::Zero(k, f);
  m.bias = VectorXd::Zero(k);
  m.weight.bottomRows(k - 1) = theta.leftCols(f);
  m.bias.tail(k - 1) = theta.col(f);
  return m;
}

MatrixXd LogisticModel::logits(const MatrixXd& x) const {
  return (standardizer.apply(x) * weight.transpose()).rowwise() + bias.transpose();
}

std::vector<std::string> LogisticModel::predict(const MatrixXd& x) const {
  const MatrixXd l = logits(x);
  std::vector<std::string> out;
  for (Eigen::Index i = 0; i < l.rows(); ++i) {
    Eigen::Index best;
    l.row(i).maxCoeff(&best);
    out.push_back(classes[static_cast<std::size_t>(best)]);
  }
  return out;
}

MatrixXd LogisticModel::raw_weight() const { return weight.array().rowwise() / standardizer.scale.array(); }

VectorXd LogisticModel::raw_bias() const { return bias - raw_weight() * standardizer.mean.transpose(); }

// ---------------------------------------------------------------- probes

void ProbeResult::summarize() {
  std::vector<double> v;
  for (const auto& f : per_fold)
    if (f) v.push_back(*f);
  mean = std = 0.0;
  if (v.empty()) return;
  mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  std = std::sqrt(ss / static_cast<double>(v.size()));
}

namespace {

template <typename T>
void split_rows(const Folds& folds, std::size_t test_fold, const std::vector<std::optional<T>>& target,
                std::vector<int>& train, std::vector<int>& test) {
  train.clear();
  test.clear();
  for (std::size_t f = 0; f < folds.size(); ++f)
    for (int i : folds[f]) {
      if (!target[static_cast<std::size_t>(i)]) continue;
      (f == test_fold ? test : train).push_back(i);
    }
}

MatrixXd take_rows(const MatrixXd& x, const std::vector<int>& rows) {
  MatrixXd out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = x.row(rows[r]);
  return out;
}

void check_folds(const Folds& folds, Eigen::Index n) {
  std::vector<int> seen(static_cast<std::size_t>(n), 0);
  for (const auto& f : folds)
    for (int i : f) {
      if (i < 0 || i >= n) throw ContractError("fold index out of range");
      if (seen[static_cast<std::size_t>(i)]++) throw ContractError("folds overlap");
    }
}

}  // namespace

ProbeResult linear_probe_regression(const std::string& task, const MatrixXd& x,
                                    const std::vector<std::optional<double>>& targets, const Folds& folds, double lambda) {
  if (static_cast<Eigen::Index>(targets.size()) != x.rows()) throw ContractError("regression probe: one target per subject");
  check_folds(folds, x.rows());
  ProbeResult r{task, "r2", {}, 0.0, 0.0, 0};
  for (const auto& t : targets) r.n_subjects += t ? 1 : 0;
  std::vector<int> train, test;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    split_rows(folds, f, targets, train, test);
    if (test.empty() || train.empty()) {
      r.per_fold.emplace_back();
      continue;
    }
    VectorXd ytr(static_cast<Eigen::Index>(train.size())), yte(static_cast<Eigen::Index>(test.size()));
    for (std::size_t i = 0; i < train.size(); ++i) ytr(static_cast<Eigen::Index>(i)) = *targets[static_cast<std::size_t>(train[i])];
    for (std::size_t i = 0; i < test.size(); ++i) yte(static_cast<Eigen::Index>(i)) = *targets[static_cast<std::size_t>(test[i])];
    const RidgeModel m = RidgeModel::fit(take_rows(x, train), ytr, lambda);
    r.per_fold.push_back(r2_score(yte, m.predict(take_rows(x, test))));
  }
  r.summarize();
  return r;
}

ProbeResult linear_probe_classification(const std::string& task, const MatrixXd& x,
                                        const std::vector<std::optional<std::string>>& labels, const Folds& folds, double l2) {
  if (static_cast<Eigen::Index>(labels.size()) != x.rows()) throw ContractError("classification probe: one label per subject");
  check_folds(folds, x.rows());
  ProbeResult r{task, "accuracy", {}, 0.0, 0.0, 0};
  for (const auto& t : labels) r.n_subjects += t ? 1 : 0;
  std::vector<int> train, test;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    split_rows(folds, f, labels, train, test);
    if (test.empty()) {
      r.per_fold.emplace_back();
      continue;
    }
    std::vector<std::string> ytr;
    for (int i : train) ytr.push_back(*labels[static_cast<std::size_t>(i)]);
    const LogisticModel m = LogisticModel::fit(take_rows(x, train), ytr, l2);
    const auto pred = m.predict(take_rows(x, test));
    int hits = 0;
    for (std::size_t i = 0; i < test.size(); ++i) hits += pred[i] == *labels[static_cast<std::size_t>(test[i])] ? 1 : 0;
    r.per_fold.push_back(static_cast<double>(hits) / static_cast<double>(test.size()));
  }
  r.summarize();
  return r;
}

void write_probe_csv(const std::vector<ProbeResult>& results, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.precision(17);
  out << "task,metric,fold,value\n";
  for (const auto& r : results) {
    for (std::size_t f = 0; f < r.per_fold.size(); ++f) {
      out << r.task << ',' << r.metric << ',' << f << ',';
      if (r.per_fold[f]) out << *r.per_fold[f];
      out << '\n';
    }
    out << r.task << ',' << r.metric << ",mean," << r.mean << '\n';
    out << r.task << ',' << r.metric << ",std," << r.std << '\n';
  }
}

void write_probe_json(const std::vector<ProbeResult>& results, const std::filesystem::path& path) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : results) {
    nlohmann::json folds = nlohmann::json::array();
    for (const auto& f : r.per_fold) folds.push_back(f ? nlohmann::json(*f) : nlohmann::json(nullptr));
    j.push_back({{"task", r.task}, {"metric", r.metric}, {"per_fold", folds}, {"mean", r.mean}, {"std", r.std},
                 {"n_subjects", r.n_subjects}});
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

}  // namespace ctxssl
