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

#include "ctxssl/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include <Eigen/Geometry>

#include "ctxssl/error.hpp"
#include "ctxssl/rng.hpp"

namespace ctxssl {
namespace {

// Random scalar field on a coarse lattice, trilinearly interpolated.
class CoarseField {
 public:
  CoarseField(const Shape3& shape, double step, double sigma, Rng& rng) : step_(step) {
    for (int a = 0; a < 3; ++a) dims_[a] = static_cast<int>(std::ceil((shape[a] - 1) / step)) + 2;
    values_.resize(static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2]);
    for (auto& v : values_) v = rng.normal(0.0, sigma);
  }

  [[nodiscard]] double operator()(const Eigen::Vector3d& p) const {
    int i0[3];
    double f[3];
    for (int a = 0; a < 3; ++a) {
      const double g = std::clamp(p[a] / step_, 0.0, dims_[a] - 1.000001);
      i0[a] = static_cast<int>(std::floor(g));
      f[a] = g - i0[a];
    }
    double acc = 0.0;
    for (int dz = 0; dz < 2; ++dz)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const double w = (dx ? f[0] : 1 - f[0]) * (dy ? f[1] : 1 - f[1]) * (dz ? f[2] : 1 - f[2]);
          acc += w * at(i0[0] + dx, i0[1] + dy, i0[2] + dz);
        }
    return acc;
  }

 private:
  [[nodiscard]] double at(int x, int y, int z) const {
    return values_[static_cast<std::size_t>(x) + dims_[0] * (static_cast<std::size_t>(y) + dims_[1] * z)];
  }
  double step_;
  int dims_[3]{};
  std::vector<double> values_;
};

Eigen::Vector3d volume_center(const PhantomSpec& spec) {
  return {(spec.shape[0] - 1) / 2.0, (spec.shape[1] - 1) / 2.0, (spec.shape[2] - 1) / 2.0};
}

bool inside_organ(const PhantomSpec& spec, const Eigen::Vector3d& u) {
  const Eigen::Vector3d d = (u - volume_center(spec)) / spec.organ_semi_axis;
  double s = 0.0;
  for (int a = 0; a < 3; ++a) s += std::pow(std::abs(d[a]), spec.organ_exponent);
  return s <= 1.0;
}

}  // namespace

void PhantomSpec::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (shape[a] <= 0) throw ContractError("phantom shape must be positive");
    if (lattice[a] <= 0) throw ContractError("phantom lattice must be positive");
    if (!(spacing[a] > 0)) throw ContractError("phantom spacing must be positive");
  }
  if (n_regions_affected < 0) throw ContractError("n_regions_affected must be >= 0");
  if (n_regions_affected > lattice_cells())
    throw ContractError("n_regions_affected exceeds lattice (" + std::to_string(lattice_cells()) + " cells)");
  for (int c : forced_cells) {
    if (c < 0 || c >= lattice_cells()) throw ContractError("forced lesion cell outside lattice");
  }
  if (lesion_radius <= 0 || organ_semi_axis <= 0 || organ_exponent <= 0 || texture_scale <= 0)
    throw ContractError("phantom geometry parameters must be positive");
  if (noise_sigma < 0 || gain_jitter < 0 || gain_jitter >= 1) throw ContractError("invalid phantom nuisance parameters");
}

Eigen::Vector3d lattice_cell_center(const PhantomSpec& spec, int cell) {
  const int lx = spec.lattice[0], ly = spec.lattice[1];
  const int ix = cell % lx, iy = (cell / lx) % ly, iz = cell / (lx * ly);
  const Eigen::Vector3d k(ix - (spec.lattice[0] - 1) / 2.0, iy - (spec.lattice[1] - 1) / 2.0,
                          iz - (spec.lattice[2] - 1) / 2.0);
  return volume_center(spec) + spec.lattice_step * k;
}

std::string severity_label(SeverityRule rule, int n_regions) {
  if (n_regions <= 0) return "healthy";
  if (rule == SeverityRule::Binary) return "diseased";
  if (n_regions == 1) return "mild";
  if (n_regions == 2) return "moderate";
  return "severe";
}

Phantom generate_phantom(const PhantomSpec& spec, const std::string& subject_id) {
  spec.validate();
  Rng root(spec.seed);
  Rng lesion_rng = root.split(1);
  Rng geom_rng = root.split(2);
  Rng texture_rng = root.split(3);
  Rng noise_rng = root.split(4);

  Phantom out;
  if (!spec.forced_cells.empty()) {
    out.lesion_cells = spec.forced_cells;
    std::sort(out.lesion_cells.begin(), out.lesion_cells.end());
    out.lesion_cells.erase(std::unique(out.lesion_cells.begin(), out.lesion_cells.end()), out.lesion_cells.end());
  } else {
    std::vector<int> cells(static_cast<std::size_t>(spec.lattice_cells()));
    std::iota(cells.begin(), cells.end(), 0);
    std::shuffle(cells.begin(), cells.end(), lesion_rng.engine());
    out.lesion_cells.assign(cells.begin(), cells.begin() + spec.n_regions_affected);
    std::sort(out.lesion_cells.begin(), out.lesion_cells.end());
  }
  out.lesion_indicator.assign(static_cast<std::size_t>(spec.lattice_cells()), 0.0F);
  std::vector<Eigen::Vector3d> lesion_centers;
  for (int c : out.lesion_cells) {
    out.lesion_indicator[static_cast<std::size_t>(c)] = 1.0F;
    lesion_centers.push_back(lattice_cell_center(spec, c));
  }

  // Geometry: canonical u = C + R S (x - C) + t + d(x), all in voxel units.
  const double deg = std::numbers::pi / 180.0;
  const Eigen::Matrix3d rot =
      (Eigen::AngleAxisd(geom_rng.uniform(-1, 1) * spec.rotation_deg * deg, Eigen::Vector3d::UnitZ()) *
       Eigen::AngleAxisd(geom_rng.uniform(-1, 1) * spec.rotation_deg * deg, Eigen::Vector3d::UnitY()) *
       Eigen::AngleAxisd(geom_rng.uniform(-1, 1) * spec.rotation_deg * deg, Eigen::Vector3d::UnitX()))
          .toRotationMatrix();
  Eigen::Vector3d scale, shift;
  for (int a = 0; a < 3; ++a) scale[a] = 1.0 + geom_rng.uniform(-1, 1) * spec.scale_jitter;
  for (int a = 0; a < 3; ++a) shift[a] = geom_rng.uniform(-1, 1) * spec.translation_mm / spec.spacing[a];
  const Eigen::Matrix3d lin = rot * scale.asDiagonal();
  const double warp_vox = spec.warp_amplitude_mm / spec.spacing.minCoeff();
  const double warp_step = std::max(spec.shape[0], std::max(spec.shape[1], spec.shape[2])) / 3.0;
  CoarseField dx(spec.shape, warp_step, warp_vox, geom_rng);
  CoarseField dy(spec.shape, warp_step, warp_vox, geom_rng);
  CoarseField dz(spec.shape, warp_step, warp_vox, geom_rng);
  const double gain = 1.0 + texture_rng.uniform(-1, 1) * spec.gain_jitter;
  CoarseField texture(spec.shape, spec.texture_scale, spec.texture_amplitude, texture_rng);

  const Eigen::Vector3d center = volume_center(spec);
  Volume image(spec.shape, 0.0F, spec.spacing);
  Volume mask(spec.shape, 0.0F, spec.spacing);
  Volume lesion(spec.shape, 0.0F, spec.spacing);
  const double r2 = spec.lesion_radius * spec.lesion_radius;
  std::size_t organ_voxels = 0, lesion_voxels = 0;
  for (int z = 0; z < spec.shape[2]; ++z)
    for (int y = 0; y < spec.shape[1]; ++y)
      for (int x = 0; x < spec.shape[0]; ++x) {
        const Eigen::Vector3d p(x, y, z);
        const Eigen::Vector3d u = center + lin * (p - center) + shift + Eigen::Vector3d(dx(p), dy(p), dz(p));
        double value = 0.0;
        if (inside_organ(spec, u)) {
          ++organ_voxels;
          mask.at(x, y, z) = 1.0F;
          value = gain * (spec.organ_intensity + texture(u));
          for (const auto& lc : lesion_centers) {
            if ((u - lc).squaredNorm() <= r2) {
              value += spec.lesion_intensity_delta;
              lesion.at(x, y, z) = 1.0F;
              ++lesion_voxels;
              break;
            }
          }
        }
        if (spec.noise_sigma > 0) value += noise_rng.normal(0.0, spec.noise_sigma);
        image.at(x, y, z) = static_cast<float>(value);
      }

  const int n = static_cast<int>(out.lesion_cells.size());
  out.record.subject_id = subject_id;
  out.record.volume = std::move(image);
  out.record.mask = std::move(mask);
  out.record.labels["severity"] = LabelValue::of(severity_label(spec.severity_rule, n));
  out.record.labels["severity_grade"] = LabelValue::of(static_cast<double>(n));
  out.record.labels["lesion_load"] =
      LabelValue::of(organ_voxels ? static_cast<double>(lesion_voxels) / static_cast<double>(organ_voxels) : 0.0);
  out.lesion_mask = std::move(lesion);
  return out;
}

SubjectRecord generate_atlas(const PhantomSpec& spec) {
  spec.validate();
  SubjectRecord rec;
  rec.subject_id = "atlas";
  rec.volume = Volume(spec.shape, 0.0F, spec.spacing);
  Volume mask(spec.shape, 0.0F, spec.spacing);
  for (int z = 0; z < spec.shape[2]; ++z)
    for (int y = 0; y < spec.shape[1]; ++y)
      for (int x = 0; x < spec.shape[0]; ++x) {
        if (inside_organ(spec, Eigen::Vector3d(x, y, z))) {
          rec.volume.at(x, y, z) = static_cast<float>(spec.organ_intensity);
          mask.at(x, y, z) = 1.0F;
        }
      }
  rec.mask = std::move(mask);
  return rec;
}

}  // namespace ctxssl
