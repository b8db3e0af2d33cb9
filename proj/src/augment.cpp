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


#include "ctxssl/augment.hpp"

#include <algorithm>
#include <cmath>

#include "ctxssl/error.hpp"

namespace ctxssl {

void AugmentConfig::validate(int patch_size) const {
  if (gamma_min <= 0.0 || gamma_max < gamma_min) throw ConfigError("augment: need 0 < gamma_min <= gamma_max");
  if (noise_sigma < 0.0) throw ConfigError("augment.noise_sigma must be >= 0");
  if (elastic_max_displacement < 0.0) throw ConfigError("augment.elastic_max_displacement must be >= 0");
  if (elastic_max_displacement >= patch_size / 2.0)
    throw ConfigError("augment.elastic_max_displacement must be below half the patch size");
  if (elastic_grid_spacing < 1.0) throw ConfigError("augment.elastic_grid_spacing must be >= 1");
  if (elastic_max_displacement > elastic_grid_spacing)
    throw ConfigError("augment.elastic_max_displacement must not exceed elastic_grid_spacing");
}

namespace {

struct Axis {
  int cells = 1;
  double step = 1.0;
};

Axis control_axis(int n, double spacing) {
  Axis a;
  if (n <= 1) return a;
  a.cells = std::max(1, static_cast<int>(std::lround((n - 1) / spacing)));
  a.step = static_cast<double>(n - 1) / a.cells;
  return a;
}

// Cell index and fractional offset of voxel coordinate x along an axis.
inline void locate(double x, const Axis& a, int& i, double& f) {
  const double u = x / a.step;
  i = std::min(static_cast<int>(u), a.cells - 1);
  f = u - i;
}

float trilinear_zero(std::span<const float> p, Size3 s, double x, double y, double z) {
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const int z0 = static_cast<int>(std::floor(z));
  const double fx = x - x0, fy = y - y0, fz = z - z0;
  double acc = 0.0;
  for (int dz = 0; dz < 2; ++dz) {
    const int zz = z0 + dz;
    if (zz < 0 || zz >= s[2]) continue;
    const double wz = dz ? fz : 1.0 - fz;
    for (int dy = 0; dy < 2; ++dy) {
      const int yy = y0 + dy;
      if (yy < 0 || yy >= s[1]) continue;
      const double wy = dy ? fy : 1.0 - fy;
      for (int dx = 0; dx < 2; ++dx) {
        const int xx = x0 + dx;
        if (xx < 0 || xx >= s[0]) continue;
        const double wx = dx ? fx : 1.0 - fx;
        acc += wx * wy * wz * p[static_cast<std::size_t>(xx + s[0] * (yy + s[1] * zz))];
      }
    }
  }
  return static_cast<float>(acc);
}

}  // namespace

std::vector<float> elastic_deform(std::span<const float> patch, Size3 s, const AugmentConfig& config, Rng& rng) {
  const std::size_t n = static_cast<std::size_t>(s[0]) * s[1] * s[2];
  if (patch.size() != n) throw ContractError("elastic_deform: patch size does not match its shape");
  std::vector<float> out(patch.begin(), patch.end());
  const double amp = config.elastic_max_displacement;
  if (!config.elastic || amp <= 0.0) return out;

  const Axis ax = control_axis(s[0], config.elastic_grid_spacing);
  const Axis ay = control_axis(s[1], config.elastic_grid_spacing);
  const Axis az = control_axis(s[2], config.elastic_grid_spacing);
  const int cx = ax.cells + 1, cy = ay.cells + 1, cz = az.cells + 1;
  // (3, control points); boundary control points stay at zero.
  std::vector<double> ctrl(static_cast<std::size_t>(3 * cx * cy * cz), 0.0);
  for (int k = 1; k + 1 < cz; ++k)
    for (int j = 1; j + 1 < cy; ++j)
      for (int i = 1; i + 1 < cx; ++i)
        for (int c = 0; c < 3; ++c)
          ctrl[static_cast<std::size_t>(3 * (i + cx * (j + cy * k)) + c)] = rng.uniform(-amp, amp);

  for (int z = 0; z < s[2]; ++z) {
    int kz;
    double fz;
    locate(z, az, kz, fz);
    for (int y = 0; y < s[1]; ++y) {
      int ky;
      double fy;
      locate(y, ay, ky, fy);
      for (int x = 0; x < s[0]; ++x) {
        int kx;
        double fx;
        locate(x, ax, kx, fx);
        double d[3] = {0.0, 0.0, 0.0};
        for (int dz = 0; dz < 2; ++dz) {
          const int zz = std::min(kz + dz, cz - 1);
          const double wz = dz ? fz : 1.0 - fz;
          for (int dy = 0; dy < 2; ++dy) {
            const int yy = std::min(ky + dy, cy - 1);
            const double wy = dy ? fy : 1.0 - fy;
            for (int dx = 0; dx < 2; ++dx) {
              const int xx = std::min(kx + dx, cx - 1);
              const double w = (dx ? fx : 1.0 - fx) * wy * wz;
              const double* c = &ctrl[static_cast<std::size_t>(3 * (xx + cx * (yy + cy * zz)))];
              d[0] += w * c[0];
              d[1] += w * c[1];
              d[2] += w * c[2];
            }
          }
        }
        out[static_cast<std::size_t>(x + s[0] * (y + s[1] * z))] = trilinear_zero(patch, s, x + d[0], y + d[1], z + d[2]);
      }
    }
  }
  return out;
}

std::vector<float> gaussian_noise(std::span<const float> patch, const AugmentConfig& config, Rng& rng) {
  std::vector<float> out(patch.begin(), patch.end());
  if (!config.noise || config.noise_sigma <= 0.0) return out;
  std::normal_distribution<double> dist(0.0, config.noise_sigma);
  for (auto& v : out) v = static_cast<float>(v + dist(rng.engine()));
  return out;
}

std::vector<float> apply_gamma(std::span<const float> patch, double gamma) {
  std::vector<float> out(patch.begin(), patch.end());
  if (out.empty()) return out;
  const auto [lo_it, hi_it] = std::minmax_element(out.begin(), out.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo) || gamma == 1.0) return out;
  const double range = hi - lo;
  for (auto& v : out) v = static_cast<float>(lo + range * std::pow((v - lo) / range, gamma));
  return out;
}

std::vector<float> contrast_adjust(std::span<const float> patch, const AugmentConfig& config, Rng& rng) {
  if (!config.contrast) return {patch.begin(), patch.end()};
  return apply_gamma(patch, rng.uniform(config.gamma_min, config.gamma_max));
}

std::vector<float> random_view(std::span<const float> patch, Size3 size, const AugmentConfig& config, const Rng& rng) {
  Rng geo = rng.split(1);
  Rng noise = rng.split(2);
  Rng gamma = rng.split(3);
  std::vector<float> v = elastic_deform(patch, size, config, geo);
  v = gaussian_noise(v, config, noise);
  return contrast_adjust(v, config, gamma);
}

}  // namespace ctxssl
