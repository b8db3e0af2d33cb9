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

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace ctxssl {

using Shape3 = std::array<int, 3>;  // (nx, ny, nz); x varies fastest in memory

/// 3D scalar field with world-space geometry. World coordinate of voxel index
/// (i, j, k) is origin + spacing .* (i, j, k), in millimetres.
struct Volume {
  Shape3 shape{0, 0, 0};
  Eigen::Vector3d spacing{1.0, 1.0, 1.0};
  Eigen::Vector3d origin{0.0, 0.0, 0.0};
  std::vector<float> data;

  Volume() = default;
  explicit Volume(Shape3 s, float fill = 0.0F,
                  Eigen::Vector3d spacing_mm = Eigen::Vector3d::Ones(),
                  Eigen::Vector3d origin_mm = Eigen::Vector3d::Zero());

  [[nodiscard]] std::size_t voxel_count() const {
    return static_cast<std::size_t>(shape[0]) * shape[1] * shape[2];
  }
  [[nodiscard]] std::size_t offset(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(shape[0]) * (static_cast<std::size_t>(y) +
                                                  static_cast<std::size_t>(shape[1]) * z);
  }
  [[nodiscard]] bool contains(int x, int y, int z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < shape[0] && y < shape[1] && z < shape[2];
  }
  float& at(int x, int y, int z) { return data[offset(x, y, z)]; }
  [[nodiscard]] float at(int x, int y, int z) const { return data[offset(x, y, z)]; }

  [[nodiscard]] Eigen::Vector3d index_to_world(const Eigen::Vector3d& idx) const {
    return origin + spacing.cwiseProduct(idx);
  }
  [[nodiscard]] Eigen::Vector3d world_to_index(const Eigen::Vector3d& p) const {
    return (p - origin).cwiseQuotient(spacing);
  }
  /// World-space extent of the voxel-centre bounding box.
  [[nodiscard]] Eigen::Vector3d extent() const;
  /// True if the world point lies inside the voxel-centre bounding box.
  [[nodiscard]] bool contains_world(const Eigen::Vector3d& p, double tol = 1e-9) const;

  /// Trilinear interpolation at a continuous voxel index; zero outside.
  [[nodiscard]] double sample(const Eigen::Vector3d& idx) const;
  /// Trilinear interpolation with edge clamping, plus the gradient of the
  /// interpolant with respect to the continuous index.
  [[nodiscard]] double sample_clamped(const Eigen::Vector3d& idx,
                                      Eigen::Vector3d* grad = nullptr) const;

  /// Throws ContractError if spacing is non-positive or data size mismatches.
  void validate() const;
};

/// Same shape and geometry as `v`, zero-filled.
Volume zeros_like(const Volume& v);

/// Per-volume z-score normalisation over all voxels (or over `mask` > 0).
Volume zscore(const Volume& v, const Volume* mask = nullptr);

/// Binary foreground mask: voxels with intensity > threshold.
Volume threshold_mask(const Volume& v, double threshold);

/// Label cell: missing, numeric scalar, or category string.
struct LabelValue {
  enum class Kind { Missing, Number, Category };
  Kind kind = Kind::Missing;
  double number = 0.0;
  std::string category;

  static LabelValue missing() { return {}; }
  static LabelValue of(double v) { return {Kind::Number, v, {}}; }
  static LabelValue of(std::string c) { return {Kind::Category, 0.0, std::move(c)}; }
  [[nodiscard]] bool is_missing() const { return kind == Kind::Missing; }
  /// Textual form used in CSV output; empty for missing.
  [[nodiscard]] std::string str() const;
  bool operator==(const LabelValue&) const = default;
};

using LabelMap = std::map<std::string, LabelValue>;

struct SubjectRecord {
  std::string subject_id;
  Volume volume;
  std::optional<Volume> mask;
  LabelMap labels;

  /// Throws ContractError if the mask shape differs from the volume shape.
  void validate() const;
};

}  // namespace ctxssl
