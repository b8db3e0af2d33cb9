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

#include <span>
#include <vector>

#include "ctxssl/atlas_graph.hpp"
#include "ctxssl/rng.hpp"

namespace ctxssl {

struct AugmentConfig {
  bool elastic = true;
  double elastic_grid_spacing = 5.0;      // voxels between control points
  double elastic_max_displacement = 2.0;  // voxels, per component
  bool noise = true;
  double noise_sigma = 0.15;              // absolute, in (z-scored) intensity units
  bool contrast = true;
  double gamma_min = 0.7;
  double gamma_max = 1.4;

  /// Throws ConfigError; `patch_size` is the smallest patch side the config must handle.
  void validate(int patch_size) const;
  static AugmentConfig none() { return {false, 5.0, 0.0, false, 0.0, false, 1.0, 1.0}; }
};

/// Smooth random warp: uniform control-point displacements on a coarse grid
/// pinned to zero on the patch boundary, trilinearly upsampled, then applied with
/// trilinear resampling (zero outside the patch).
std::vector<float> elastic_deform(std::span<const float> patch, Size3 size, const AugmentConfig& config, Rng& rng);

/// Adds i.i.d. N(0, noise_sigma^2) to every voxel.
std::vector<float> gaussian_noise(std::span<const float> patch, const AugmentConfig& config, Rng& rng);

/// Gamma curve on the patch's own [min, max] range with gamma drawn from
/// U(gamma_min, gamma_max). Constant patches are returned unchanged.
std::vector<float> contrast_adjust(std::span<const float> patch, const AugmentConfig& config, Rng& rng);
std::vector<float> apply_gamma(std::span<const float> patch, double gamma);

/// elastic -> noise -> contrast, each drawing from its own child stream of `rng`.
std::vector<float> random_view(std::span<const float> patch, Size3 size, const AugmentConfig& config, const Rng& rng);

}  // namespace ctxssl
