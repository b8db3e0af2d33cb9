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


#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace ctxssl {

using Folds = std::vector<std::vector<int>>;  // row indices per fold, ascending

/// Shuffles 0..n-1 with `seed` and deals the rows round-robin into k folds.
Folds kfold_split(int n, int k, std::uint64_t seed);
/// Same partition expressed with subject identifiers.
std::vector<std::vector<std::string>> kfold_split(const std::vector<std::string>& ids, int k, std::uint64_t seed);

/// Column means and standard deviations of a training split (zero spread maps to 1).
struct Standardizer {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd scale;

  static Standardizer fit(const Eigen::MatrixXd& x);
  [[nodiscard]] Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const;
};

/// 1 - SS_res / SS_tot; empty when the targets are constant.
std::optional<double> r2_score(const Eigen::VectorXd& y, const Eigen::VectorXd& y_hat);

struct RidgeModel {
  Standardizer standardizer;
  Eigen::VectorXd weight;
  double bias = 0.0;

  /// Ridge on standardised features with an unpenalised intercept.
  static RidgeModel fit(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double lambda);
  [[nodiscard]] Eigen::VectorXd predict(const Eigen::MatrixXd& x) const;
};

/// Multinomial logistic regression; class 0 is the reference with zero weights,
/// classes 1..K-1 are free. Minimises sum of cross-entropies + l2/2 * ||W||^2
/// (bias unpenalised) by damped Newton iterations until the gradient norm is
/// below `tolerance`.
struct LogisticModel {
  std::vector<std::string> classes;  // sorted
  Standardizer standardizer;
  Eigen::MatrixXd weight;  // (K, F) on standardised features, row 0 zero
  Eigen::VectorXd bias;    // (K)
  int iterations = 0;
  double gradient_norm = 0.0;

  static LogisticModel fit(const Eigen::MatrixXd& x, const std::vector<std::string>& labels, double l2,
                           double tolerance = 1e-6, int max_iterations = 200);
  /// (n, K) class logits.
  [[nodiscard]] Eigen::MatrixXd logits(const Eigen::MatrixXd& x) const;
  [[nodiscard]] std::vector<std::string> predict(const Eigen::MatrixXd& x) const;
  /// Weights and biases acting on raw (unstandardised) features:
  /// logits(x) = raw_bias + raw_weight * x.
  [[nodiscard]] Eigen::MatrixXd raw_weight() const;
  [[nodiscard]] Eigen::VectorXd raw_bias() const;
};

struct ProbeResult {
  std::string task;
  std::string metric;  // "r2" or "accuracy"
  std::vector<std::optional<double>> per_fold;
  double mean = 0.0;   // over available folds
  double std = 0.0;    // population standard deviation over available folds
  int n_subjects = 0;

  void summarize();
};

/// Rows with a missing target are left out of both splits.
ProbeResult linear_probe_regression(const std::string& task, const Eigen::MatrixXd& features,
                                    const std::vector<std::optional<double>>& targets, const Folds& folds,
                                    double lambda = 1e-3);
/// Throws ContractError when a training split holds a single class.
ProbeResult linear_probe_classification(const std::string& task, const Eigen::MatrixXd& features,
                                        const std::vector<std::optional<std::string>>& labels, const Folds& folds,
                                        double l2 = 1.0);

/// One row per (task, fold) followed by mean and std rows per task.
void write_probe_csv(const std::vector<ProbeResult>& results, const std::filesystem::path& path);
void write_probe_json(const std::vector<ProbeResult>& results, const std::filesystem::path& path);

}  // namespace ctxssl
