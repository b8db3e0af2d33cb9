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

// Shared generators and oracles for the unit and acceptance tests.

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ctxssl/atlas_graph.hpp"
#include "ctxssl/encoders.hpp"
#include "ctxssl/nn.hpp"
#include "ctxssl/phantom.hpp"
#include "ctxssl/registration.hpp"
#include "ctxssl/rng.hpp"

namespace ctxssl::testing {

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("ctxssl-" + tag + "-" + std::to_string(std::random_device{}() % 1000000007U));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  [[nodiscard]] const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline nn::Mat random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double lo = -1.0, double hi = 1.0) {
  nn::Mat m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = rng.uniform(lo, hi);
  return m;
}

inline nn::Vec random_unit(Eigen::Index dim, Rng& rng) {
  nn::Vec v(dim);
  for (Eigen::Index i = 0; i < dim; ++i) v[i] = rng.normal();
  return v / v.norm();
}

/// Symmetric 0/1 matrix with zero diagonal, each edge present with probability p.
inline nn::Mat random_adjacency(int n, double p, Rng& rng) {
  nn::Mat a = nn::Mat::Zero(n, n);
  for (int u = 0; u < n; ++u)
    for (int v = u + 1; v < n; ++v)
      if (rng.uniform() < p) a(u, v) = a(v, u) = 1.0;
  return a;
}

inline std::vector<int> random_permutation(int n, Rng& rng) {
  std::vector<int> p(static_cast<std::size_t>(n));
  std::iota(p.begin(), p.end(), 0);
  std::shuffle(p.begin(), p.end(), rng.engine());
  return p;
}

/// P as a matrix with (P x)[i] = x[perm[i]].
inline nn::Mat permutation_matrix(const std::vector<int>& perm) {
  const auto n = static_cast<Eigen::Index>(perm.size());
  nn::Mat p = nn::Mat::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) p(i, perm[static_cast<std::size_t>(i)]) = 1.0;
  return p;
}

inline std::vector<Eigen::Vector3d> random_points(int n, double extent, Rng& rng) {
  std::vector<Eigen::Vector3d> pts;
  for (int i = 0; i < n; ++i)
    pts.emplace_back(rng.uniform(0, extent), rng.uniform(0, extent), rng.uniform(0, extent));
  return pts;
}

/// Relative error used for finite-difference checks, guarded near zero.
inline double rel_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Central difference of `f` with respect to one scalar slot.
inline double central_difference(double& slot, const std::function<double()>& f, double h) {
  const double saved = slot;
  slot = saved + h;
  const double fp = f();
  slot = saved - h;
  const double fm = f();
  slot = saved;
  return (fp - fm) / (2 * h);
}

/// Largest deviation from node-permutation symmetry of one (H, A, P) triple:
/// gcn_forward(P H, P A P^T) vs P gcn_forward(H, A), and pooled / graph
/// embeddings of the permuted graph vs the original. Eval mode throughout.
inline double gcn_symmetry_deviation(GraphEncoder& g, const nn::Mat& h, const nn::Mat& a, const std::vector<int>& perm) {
  const nn::Mat p = permutation_matrix(perm);
  const nn::Mat hu = g.gcn_forward(h, a, nn::Mode::Eval);
  const nn::Mat hu_perm = g.gcn_forward(p * h, p * a * p.transpose(), nn::Mode::Eval);
  double dev = (hu_perm - p * hu).cwiseAbs().maxCoeff();
  dev = std::max(dev, (GraphEncoder::pooled_features(hu_perm) - GraphEncoder::pooled_features(hu)).cwiseAbs().maxCoeff());
  const nn::Vec s = g.graph_embed(h, a, nn::Mode::Eval);
  const nn::Vec s_perm = g.graph_embed(p * h, p * a * p.transpose(), nn::Mode::Eval);
  return std::max(dev, (s_perm - s).cwiseAbs().maxCoeff());
}

/// Small phantom subject used across tests.
inline PhantomSpec small_phantom_spec(std::uint64_t seed, int regions = 0) {
  PhantomSpec s;
  s.seed = seed;
  s.n_regions_affected = regions;
  return s;
}

inline Volume smooth_blob_volume(Shape3 shape, const Eigen::Vector3d& center, double sigma) {
  Volume v(shape);
  for (int z = 0; z < shape[2]; ++z)
    for (int y = 0; y < shape[1]; ++y)
      for (int x = 0; x < shape[0]; ++x) {
        const double d2 = (Eigen::Vector3d(x, y, z) - center).squaredNorm();
        v.at(x, y, z) = static_cast<float>(std::exp(-d2 / (2 * sigma * sigma)));
      }
  return v;
}

/// Brute-force oracle: every ordered pair, no symmetry shortcut.
inline Eigen::MatrixXd brute_adjacency(const std::vector<Eigen::Vector3d>& c, double thr) {
  const auto n = static_cast<Eigen::Index>(c.size());
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index u = 0; u < n; ++u)
    for (Eigen::Index v = 0; v < n; ++v) {
      const auto& p = c[static_cast<std::size_t>(u)];
      const auto& q = c[static_cast<std::size_t>(v)];
      const double d = std::sqrt((p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]) +
                                 (p[2] - q[2]) * (p[2] - q[2]));
      a(u, v) = (u != v && d <= thr) ? 1.0 : 0.0;
    }
  return a;
}

/// Textured, smooth test image on the desk phantom geometry.
inline Volume textured_atlas() {
  PhantomSpec spec = small_phantom_spec(5, 0);
  spec.rotation_deg = 0;
  spec.scale_jitter = 0;
  spec.translation_mm = 0;
  spec.warp_amplitude_mm = 0;
  spec.noise_sigma = 0;
  spec.gain_jitter = 0;
  spec.texture_amplitude = 0.4;
  return gaussian_smooth(generate_phantom(spec).record.volume, 1.0);
}

/// subject(q) = atlas(S^-1 q): a fitted phi^-1 should equal S.
inline Volume move(const Volume& atlas, const Transform& s) { return warp_to_atlas(atlas, atlas, s); }

/// Desk-geometry patch graphs for `n` phantoms, subject i drawn with seed base + i.
inline std::vector<PatchGraph> phantom_graphs(int n, std::uint64_t base = 100, int regions = 2) {
  PhantomSpec spec = small_phantom_spec(base, 0);
  const SubjectRecord atlas = generate_atlas(spec);
  const AtlasGrid grid = build_atlas_grid(*atlas.mask, {16, 16, 16}, {12, 12, 12});
  std::vector<PatchGraph> out;
  for (int i = 0; i < n; ++i) {
    PhantomSpec s = small_phantom_spec(base + static_cast<std::uint64_t>(i), i % 2 == 0 ? 0 : regions);
    const Phantom ph = generate_phantom(s, "sub-" + std::to_string(1000 + i));
    out.push_back(build_patch_graph(ph.record, atlas.volume, grid, GraphBuildConfig{}));
  }
  return out;
}

}  // namespace ctxssl::testing
