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

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ctxssl/atlas_graph.hpp"
#include "ctxssl/evaluation.hpp"
#include "ctxssl/volume.hpp"

namespace ctxssl {

/// Per-region additive contributions to a linear probe logit:
///   logit = bias + (1/N) * sum_j raw[j],   raw[j] = w . h'_j.
struct ActivationMap {
  std::string subject_id;
  std::string target_class;
  std::string reference_class;  // the logit is the log-odds of target_class against this class
  std::vector<int> region_ids;  // node order of `raw`
  Eigen::VectorXd raw;          // logit units
  Eigen::VectorXd normalized;   // sigmoid of raw (optionally after per-subject standardisation)
  double bias = 0.0;

  [[nodiscard]] double logit() const { return bias + raw.mean(); }
};

/// `weight` acts on raw pooled features (F), `h_updated` is N x F.
/// With `affine_prenormalize` the scores are z-scored over regions before the sigmoid.
ActivationMap region_activations(const Eigen::RowVectorXd& weight, double bias, const Eigen::MatrixXd& h_updated,
                                 bool affine_prenormalize = false);

/// Maps for one subject. By default one map per class with a free weight row,
/// each the log-odds against classes[0]. With `target_class` only that class is
/// mapped; for two classes either one may be chosen (classes[0] yields the
/// negated map, read against classes[1]).
std::vector<ActivationMap> class_activations(const LogisticModel& probe, const Eigen::MatrixXd& h_updated,
                                             const std::vector<int>& region_ids, const std::string& subject_id,
                                             bool affine_prenormalize = false,
                                             const std::string& target_class = "");

/// Subject-space overlay: each patch footprint receives its normalised score;
/// overlapping footprints are averaged, voxels outside every footprint are 0.
Volume render_heatmap(const ActivationMap& map, const PatchGraph& graph);

/// Rows (subject_id, f0..f{F-1}, label columns).
void export_embeddings(const std::filesystem::path& path, const std::vector<std::string>& subject_ids,
                       const Eigen::MatrixXd& features, const std::vector<std::string>& label_columns,
                       const std::vector<std::vector<std::string>>& label_values);

/// Scores on the first two principal axes. Axis signs are fixed so that the
/// largest-magnitude loading of each axis is positive.
Eigen::MatrixXd pca_2d(const Eigen::MatrixXd& x);

/// Axial slice `z` as 8-bit PNG; intensities mapped linearly from [lo, hi].
/// When `overlay` is given (values in [0, 1]) it is blended in as a red-yellow map.
void write_slice_png(const Volume& volume, int z, const std::filesystem::path& path,
                     const Volume* overlay = nullptr, std::optional<std::pair<double, double>> window = std::nullopt);

}  // namespace ctxssl
