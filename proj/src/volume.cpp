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

#include "ctxssl/volume.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ctxssl/error.hpp"

namespace ctxssl {

Volume::Volume(Shape3 s, float fill, Eigen::Vector3d spacing_mm, Eigen::Vector3d origin_mm)
    : shape(s), spacing(std::move(spacing_mm)), origin(std::move(origin_mm)) {
  if (s[0] <= 0 || s[1] <= 0 || s[2] <= 0) throw ContractError("volume shape must be positive");
  data.assign(voxel_count(), fill);
}

Eigen::Vector3d Volume::extent() const {
  return spacing.cwiseProduct(
      Eigen::Vector3d(shape[0] - 1, shape[1] - 1, shape[2] - 1));
}

bool Volume::contains_world(const Eigen::Vector3d& p, double tol) const {
  const Eigen::Vector3d idx = world_to_index(p);
  for (int a = 0; a < 3; ++a) {
    if (idx[a] < -tol || idx[a] > shape[a] - 1 + tol) return false;
  }
  return true;
}

double Volume::sample(const Eigen::Vector3d& idx) const {
  const int x0 = static_cast<int>(std::floor(idx[0]));
  const int y0 = static_cast<int>(std::floor(idx[1]));
  const int z0 = static_cast<int>(std::floor(idx[2]));
  const double fx = idx[0] - x0, fy = idx[1] - y0, fz = idx[2] - z0;
  double acc = 0.0;
  for (int dz = 0; dz < 2; ++dz) {
    const double wz = dz ? fz : 1.0 - fz;
    if (wz == 0.0) continue;
    for (int dy = 0; dy < 2; ++dy) {
      const double wy = dy ? fy : 1.0 - fy;
      if (wy == 0.0) continue;
      for (int dx = 0; dx < 2; ++dx) {
        const double wx = dx ? fx : 1.0 - fx;
        if (wx == 0.0) continue;
        const int x = x0 + dx, y = y0 + dy, z = z0 + dz;
        if (contains(x, y, z)) acc += wx * wy * wz * at(x, y, z);
      }
    }
  }
  return acc;
}

double Volume::sample_clamped(const Eigen::Vector3d& idx, Eigen::Vector3d* grad) const {
  double c[3];
  int i0[3];
  double f[3];
  for (int a = 0; a < 3; ++a) {
    c[a] = std::clamp(idx[a], 0.0, static_cast<double>(shape[a] - 1));
    i0[a] = std::min(static_cast<int>(std::floor(c[a])), std::max(shape[a] - 2, 0));
    f[a] = c[a] - i0[a];
  }
  auto v = [&](int dx, int dy, int dz) {
    return static_cast<double>(at(std::min(i0[0] + dx, shape[0] - 1),
                                  std::min(i0[1] + dy, shape[1] - 1),
                                  std::min(i0[2] + dz, shape[2] - 1)));
  };
  const double c000 = v(0, 0, 0), c100 = v(1, 0, 0), c010 = v(0, 1, 0), c110 = v(1, 1, 0);
  const double c001 = v(0, 0, 1), c101 = v(1, 0, 1), c011 = v(0, 1, 1), c111 = v(1, 1, 1);
  const double c00 = c000 + f[0] * (c100 - c000), c10 = c010 + f[0] * (c110 - c010);
  const double c01 = c001 + f[0] * (c101 - c001), c11 = c011 + f[0] * (c111 - c011);
  const double c0 = c00 + f[1] * (c10 - c00), c1 = c01 + f[1] * (c11 - c01);
  if (grad != nullptr) {
    // Zero gradient along axes where the point was clamped.
    const double gx = (1 - f[2]) * ((1 - f[1]) * (c100 - c000) + f[1] * (c110 - c010)) +
                      f[2] * ((1 - f[1]) * (c101 - c001) + f[1] * (c111 - c011));
    const double gy = (1 - f[2]) * (c10 - c00) + f[2] * (c11 - c01);
    const double gz = c1 - c0;
    (*grad)[0] = (c[0] == idx[0]) ? gx : 0.0;
    (*grad)[1] = (c[1] == idx[1]) ? gy : 0.0;
    (*grad)[2] = (c[2] == idx[2]) ? gz : 0.0;
  }
  return c0 + f[2] * (c1 - c0);
}

void Volume::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (shape[a] <= 0) throw ContractError("volume shape must be positive");
    if (!(spacing[a] > 0.0)) throw ContractError("volume spacing must be positive");
  }
  if (data.size() != voxel_count()) throw ContractError("volume data size does not match shape");
}

Volume zeros_like(const Volume& v) { return Volume(v.shape, 0.0F, v.spacing, v.origin); }

Volume zscore(const Volume& v, const Volume* mask) {
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < v.data.size(); ++i) {
    if (mask != nullptr && !(mask->data[i] > 0.0F)) continue;
    sum += v.data[i];
    sq += static_cast<double>(v.data[i]) * v.data[i];
    ++n;
  }
  Volume out = v;
  if (n == 0) return out;
  const double mean = sum / static_cast<double>(n);
  const double var = std::max(sq / static_cast<double>(n) - mean * mean, 0.0);
  const double sd = var > 1e-24 ? std::sqrt(var) : 1.0;
  for (auto& x : out.data) x = static_cast<float>((x - mean) / sd);
  return out;
}

Volume threshold_mask(const Volume& v, double threshold) {
  Volume m = zeros_like(v);
  for (std::size_t i = 0; i < v.data.size(); ++i) m.data[i] = v.data[i] > threshold ? 1.0F : 0.0F;
  return m;
}

std::string LabelValue::str() const {
  switch (kind) {
    case Kind::Missing:
      return {};
    case Kind::Category:
      return category;
    case Kind::Number: {
      std::ostringstream os;
      os.precision(17);
      os << number;
      return os.str();
    }
  }
  return {};
}

void SubjectRecord::validate() const {
  volume.validate();
  if (mask && mask->shape != volume.shape) throw ContractError("mask shape differs from volume shape");
}

}  // namespace ctxssl
