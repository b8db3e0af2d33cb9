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
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ctxssl/registration.hpp"
#include "ctxssl/volume.hpp"

namespace ctxssl {

using Size3 = std::array<int, 3>;  // (x, y, z) voxel counts

/// Regular lattice of patch centres defined once on the atlas. Region j is the
/// j-th centre in (z, y, x) lexicographic order.
struct AtlasGrid {
  std::vector<Eigen::Vector3d> centers_atlas;       // world mm
  std::vector<Eigen::Vector3d> centers_normalized;  // atlas extent rescaled to [0,1]^3
  Size3 patch_size{0, 0, 0};
  Size3 stride{0, 0, 0};
  Shape3 atlas_shape{0, 0, 0};
  Eigen::Vector3d atlas_spacing = Eigen::Vector3d::Ones();
  Eigen::Vector3d atlas_origin = Eigen::Vector3d::Zero();

  [[nodiscard]] int n_patches() const { return static_cast<int>(centers_atlas.size()); }
  /// Rescales an atlas world point to [0,1]^3 over the atlas voxel-centre box.
  [[nodiscard]] Eigen::Vector3d normalize(const Eigen::Vector3d& atlas_point) const;
};

/// Lattice positions where a patch fits inside the atlas (centred in the volume),
/// keeping cells whose patch overlaps the mask by at least `min_mask_fraction`.
AtlasGrid build_atlas_grid(const Volume& atlas_mask, Size3 patch_size, Size3 stride,
                           double min_mask_fraction = 0.5);

struct MappedCenters {
  std::vector<Eigen::Vector3d> centers_subject;     // phi^-1(p^j)
  std::vector<Eigen::Vector3d> centers_normalized;  // p^j in [0,1]^3
  std::vector<std::uint8_t> outside;                // 1 if phi^-1(p^j) is outside the subject volume
};

/// Maps every atlas centre into subject space. Centres falling outside
/// `subject` are flagged, never dropped.
MappedCenters map_centers(const Transform& transform, const AtlasGrid& grid, const Volume& subject);

/// Voxel index nearest to a world point; exact halves round toward -infinity.
std::array<int, 3> nearest_voxel(const Volume& v, const Eigen::Vector3d& world);

/// Axis-aligned crops of `patch_size` voxels around each centre; voxels outside
/// the volume are zero. Output is node-major, x fastest within a patch.
std::vector<float> extract_patches(const Volume& volume, std::span<const Eigen::Vector3d> centers, Size3 patch_size);

/// A[u, v] = 1 iff u != v and ||c_u - c_v|| <= threshold.
Eigen::MatrixXd build_adjacency(std::span<const Eigen::Vector3d> centers, double threshold_mm);

struct GraphBuildConfig {
  RegistrationConfig registration;
  double threshold_mm = 0.0;           // <= 0 selects 1.1 x the largest stride in mm
  bool atlas_space_adjacency = false;  // adjacency from atlas centres instead of subject centres
  bool zscore = true;                  // per-volume z-score before registration and extraction
  double inverse_consistency_mm = 1e-3;
};

/// Threshold used when GraphBuildConfig::threshold_mm is not positive.
double default_threshold_mm(const AtlasGrid& grid);

struct PatchGraph {
  std::string subject_id;
  std::vector<std::int32_t> region_ids;
  std::vector<Eigen::Vector3d> centers_subject;
  std::vector<Eigen::Vector3d> centers_normalized;
  std::vector<std::uint8_t> center_outside;
  Size3 patch_size{0, 0, 0};
  std::vector<float> patches;  // n_nodes x patch voxels
  Eigen::MatrixXd adjacency;   // 0/1, symmetric, zero diagonal
  Transform transform;
  Shape3 volume_shape{0, 0, 0};
  Eigen::Vector3d volume_spacing = Eigen::Vector3d::Ones();
  Eigen::Vector3d volume_origin = Eigen::Vector3d::Zero();
  std::string config_hash;

  [[nodiscard]] int n_nodes() const { return static_cast<int>(region_ids.size()); }
  [[nodiscard]] std::size_t patch_voxels() const {
    return static_cast<std::size_t>(patch_size[0]) * patch_size[1] * patch_size[2];
  }
  [[nodiscard]] std::span<const float> patch(int j) const {
    return {patches.data() + static_cast<std::size_t>(j) * patch_voxels(), patch_voxels()};
  }
  /// Throws ContractError when the graph violates its invariants.
  void validate() const;
};

/// fit_transform -> map_centers -> extract_patches -> build_adjacency.
PatchGraph build_patch_graph(const SubjectRecord& subject, const Volume& atlas, const AtlasGrid& grid,
                             const GraphBuildConfig& config);

/// Writes `<path>` (array archive) and `<path>.json` (provenance sidecar).
void save_patch_graph(const PatchGraph& graph, const std::filesystem::path& path);
PatchGraph load_patch_graph(const std::filesystem::path& path);

/// Breadth-first connectivity check of a 0/1 adjacency matrix.
bool is_connected(const Eigen::MatrixXd& adjacency);

}  // namespace ctxssl
