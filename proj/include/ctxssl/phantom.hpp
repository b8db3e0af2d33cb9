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
#include <optional>
#include <string>
#include <vector>

#include "ctxssl/volume.hpp"

namespace ctxssl {

/// How the `severity` label is derived from the planted lesions.
enum class SeverityRule {
  Binary,  // "healthy" without lesions, "diseased" otherwise
  Graded,  // "healthy", "mild" (1 region), "moderate" (2), "severe" (3+)
};

/// Synthetic subject description: an ellipsoidal organ with lesions planted in
/// cells of a regular region lattice, then warped by a random global affine and
/// a smooth displacement so that subjects differ in geometry.
struct PhantomSpec {
  Shape3 shape{44, 44, 44};
  Eigen::Vector3d spacing{1.0, 1.0, 1.0};
  std::array<int, 3> lattice{3, 3, 3};
  double lattice_step = 12.0;          // voxels between lesion cell centres
  int n_regions_affected = 0;
  std::vector<int> forced_cells;       // explicit lesion cells; overrides random draw
  double lesion_intensity_delta = 0.6;
  double lesion_radius = 4.0;          // voxels
  SeverityRule severity_rule = SeverityRule::Binary;
  std::uint64_t seed = 0;

  double organ_semi_axis = 18.0;       // voxels
  double organ_exponent = 6.0;         // superellipsoid exponent
  double organ_intensity = 1.0;
  double texture_amplitude = 0.15;
  double texture_scale = 4.0;          // voxels between texture control points
  double gain_jitter = 0.2;
  double noise_sigma = 0.05;
  double rotation_deg = 4.0;
  double scale_jitter = 0.04;
  double translation_mm = 2.0;
  double warp_amplitude_mm = 1.0;

  [[nodiscard]] int lattice_cells() const { return lattice[0] * lattice[1] * lattice[2]; }
  /// Throws ContractError when the spec is inconsistent.
  void validate() const;
};

struct Phantom {
  SubjectRecord record;
  std::vector<int> lesion_cells;          // sorted lattice cell indices
  std::vector<float> lesion_indicator;    // one entry per lattice cell
  Volume lesion_mask;                     // subject space, 1 inside lesions
};

/// Deterministic in `spec` (including the seed).
Phantom generate_phantom(const PhantomSpec& spec, const std::string& subject_id = "phantom");

/// Canonical template of the same geometry: no warp, lesions, texture or noise.
SubjectRecord generate_atlas(const PhantomSpec& spec);

/// Lattice cell centre in canonical voxel coordinates, ordered (z, y, x).
Eigen::Vector3d lattice_cell_center(const PhantomSpec& spec, int cell);

std::string severity_label(SeverityRule rule, int n_regions);

}  // namespace ctxssl
