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
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ctxssl/volume.hpp"

namespace ctxssl {

/// Control grid of a displacement field (atlas world coordinates).
struct DisplacementGrid {
  std::array<int, 3> dims{0, 0, 0};
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();
  Eigen::Vector3d step = Eigen::Vector3d::Ones();
  std::vector<Eigen::Vector3d> values;  // x fastest
};

/// Invertible spatial map phi from subject space to atlas space (world mm).
///
/// Stored in the direction used for resampling, the atlas-to-subject map
///   phi^-1(q) = B q + b + u(q),
/// where u is an optional smooth displacement defined on a coarse control grid
/// in atlas space (trilinear interpolation). phi itself is the closed-form
/// affine inverse when u is absent and a fixed-point inversion otherwise.
class Transform {
 public:
  enum class Kind { Affine, AffineDisplacement };

  using DisplacementGrid = ctxssl::DisplacementGrid;

  Transform();  // identity
  static Transform identity() { return {}; }
  /// phi(x) = linear * x + translation.
  static Transform affine(const Eigen::Matrix3d& linear, const Eigen::Vector3d& translation);
  /// Builds from the atlas-to-subject affine part (B, b) plus displacement.
  static Transform from_inverse(const Eigen::Matrix3d& inv_linear, const Eigen::Vector3d& inv_translation,
                                DisplacementGrid displacement = {});

  [[nodiscard]] Kind kind() const { return displacement_.values.empty() ? Kind::Affine : Kind::AffineDisplacement; }
  [[nodiscard]] static std::string kind_name(Kind k);

  /// phi: subject point to atlas point.
  [[nodiscard]] Eigen::Vector3d apply(const Eigen::Vector3d& subject_point) const;
  /// phi^-1: atlas point to subject point.
  [[nodiscard]] Eigen::Vector3d apply_inverse(const Eigen::Vector3d& atlas_point) const;

  /// Affine part of phi.
  [[nodiscard]] const Eigen::Matrix3d& linear() const { return linear_; }
  [[nodiscard]] const Eigen::Vector3d& translation() const { return translation_; }
  [[nodiscard]] const Eigen::Matrix3d& inverse_linear() const { return inv_linear_; }
  [[nodiscard]] const Eigen::Vector3d& inverse_translation() const { return inv_translation_; }
  [[nodiscard]] const DisplacementGrid& displacement() const { return displacement_; }
  [[nodiscard]] Eigen::Vector3d displacement_at(const Eigen::Vector3d& atlas_point) const;

  /// Flat parameter vector: phi linear part (row-major, 9), phi translation (3),
  /// then for displacement transforms: dims (3), origin (3), step (3), values.
  [[nodiscard]] std::vector<double> parameters() const;
  static Transform from_parameters(const std::vector<double>& params);
  /// Identity parameters of the affine part.
  static std::vector<double> identity_parameters();

  void set_inverse_tolerance(double tol_mm, int max_iterations);

 private:
  Eigen::Matrix3d linear_ = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation_ = Eigen::Vector3d::Zero();
  Eigen::Matrix3d inv_linear_ = Eigen::Matrix3d::Identity();
  Eigen::Vector3d inv_translation_ = Eigen::Vector3d::Zero();
  DisplacementGrid displacement_;
  double inverse_tol_ = 1e-9;
  int inverse_max_iter_ = 200;
};

struct RegistrationConfig {
  Transform::Kind kind = Transform::Kind::Affine;
  double lambda = 1e-3;              // weight of the identity-deviation penalty
  int levels = 3;                    // pyramid levels (stride 2^k, smoothing 2^(k-1) voxels)
  int iterations = 40;               // Levenberg-Marquardt iterations per level
  double tolerance = 1e-7;           // relative cost decrease to stop a level
  bool center_of_mass_init = true;
  int displacement_grid = 4;         // control points per axis
  double displacement_lambda = 0.05; // smoothness weight
  int displacement_iterations = 20;
  double inverse_tolerance_mm = 1e-3;
};

struct RegistrationResult {
  Transform transform;
  // Mean squared intensity residual on the finest level, without penalties.
  double initial_cost = 0.0;
  double final_cost = 0.0;
  int iterations = 0;
};

/// Fits phi minimising mean squared intensity difference between the subject
/// resampled into atlas space and the atlas, plus lambda * ||theta - identity||^2
/// (and a smoothness penalty on the displacement field when enabled).
/// Both volumes are expected to be on comparable intensity scales.
RegistrationResult fit_transform(const Volume& subject, const Volume& atlas, const RegistrationConfig& config);

/// Resamples `subject` into the atlas grid: out(q) = subject(phi^-1(q)).
Volume warp_to_atlas(const Volume& subject, const Volume& atlas_geometry, const Transform& transform);

/// Separable Gaussian smoothing with sigma in voxels.
Volume gaussian_smooth(const Volume& v, double sigma_voxels);

}  // namespace ctxssl
