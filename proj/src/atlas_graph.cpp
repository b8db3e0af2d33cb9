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

#include "ctxssl/atlas_graph.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <queue>

#include <nlohmann/json.hpp>

#include "ctxssl/archive.hpp"
#include "ctxssl/error.hpp"

namespace ctxssl {

Eigen::Vector3d AtlasGrid::normalize(const Eigen::Vector3d& p) const {
  Eigen::Vector3d out;
  for (int a = 0; a < 3; ++a) {
    const double ext = atlas_spacing[a] * (atlas_shape[a] - 1);
    out[a] = ext > 0 ? std::clamp((p[a] - atlas_origin[a]) / ext, 0.0, 1.0) : 0.5;
  }
  return out;
}

AtlasGrid build_atlas_grid(const Volume& mask, Size3 patch_size, Size3 stride, double min_mask_fraction) {
  mask.validate();
  for (int a = 0; a < 3; ++a) {
    if (patch_size[a] <= 0 || stride[a] <= 0) throw ContractError("patch size and stride must be positive");
    if (patch_size[a] > mask.shape[a]) throw ContractError("patch size does not fit inside the atlas");
    if (stride[a] > patch_size[a]) throw ContractError("stride must not exceed patch size");
  }
  AtlasGrid grid;
  grid.patch_size = patch_size;
  grid.stride = stride;
  grid.atlas_shape = mask.shape;
  grid.atlas_spacing = mask.spacing;
  grid.atlas_origin = mask.origin;

  std::array<int, 3> count{}, offset{};
  for (int a = 0; a < 3; ++a) {
    count[a] = (mask.shape[a] - patch_size[a]) / stride[a] + 1;
    const int span = (count[a] - 1) * stride[a] + patch_size[a];
    offset[a] = (mask.shape[a] - span) / 2;
  }
  const double cell_voxels = static_cast<double>(patch_size[0]) * patch_size[1] * patch_size[2];
  for (int kz = 0; kz < count[2]; ++kz)
    for (int ky = 0; ky < count[1]; ++ky)
      for (int kx = 0; kx < count[0]; ++kx) {
        const int sx = offset[0] + kx * stride[0];
        const int sy = offset[1] + ky * stride[1];
        const int sz = offset[2] + kz * stride[2];
        double covered = 0;
        for (int z = sz; z < sz + patch_size[2]; ++z)
          for (int y = sy; y < sy + patch_size[1]; ++y)
            for (int x = sx; x < sx + patch_size[0]; ++x) covered += mask.at(x, y, z) > 0.0F ? 1.0 : 0.0;
        if (covered / cell_voxels + 1e-12 < min_mask_fraction) continue;
        const Eigen::Vector3d idx(sx + patch_size[0] / 2, sy + patch_size[1] / 2, sz + patch_size[2] / 2);
        const Eigen::Vector3d p = mask.index_to_world(idx);
        grid.centers_atlas.push_back(p);
        grid.centers_normalized.push_back(grid.normalize(p));
      }
  if (grid.centers_atlas.empty()) throw ContractError("empty atlas grid: mask too small for the patch lattice");
  return grid;
}

MappedCenters map_centers(const Transform& transform, const AtlasGrid& grid, const Volume& subject) {
  MappedCenters out;
  out.centers_subject.reserve(grid.centers_atlas.size());
  for (std::size_t j = 0; j < grid.centers_atlas.size(); ++j) {
    const Eigen::Vector3d c = transform.apply_inverse(grid.centers_atlas[j]);
    out.centers_subject.push_back(c);
    out.centers_normalized.push_back(grid.centers_normalized[j]);
    out.outside.push_back(subject.contains_world(c, 0.5) ? 0 : 1);
  }
  return out;
}

std::array<int, 3> nearest_voxel(const Volume& v, const Eigen::Vector3d& world) {
  const Eigen::Vector3d idx = v.world_to_index(world);
  std::array<int, 3> out{};
  for (int a = 0; a < 3; ++a) out[a] = static_cast<int>(std::ceil(idx[a] - 0.5));
  return out;
}

std::vector<float> extract_patches(const Volume& volume, std::span<const Eigen::Vector3d> centers, Size3 patch_size) {
  const std::size_t pv = static_cast<std::size_t>(patch_size[0]) * patch_size[1] * patch_size[2];
  std::vector<float> out(pv * centers.size(), 0.0F);
  for (std::size_t j = 0; j < centers.size(); ++j) {
    const auto c = nearest_voxel(volume, centers[j]);
    const int sx = c[0] - patch_size[0] / 2, sy = c[1] - patch_size[1] / 2, sz = c[2] - patch_size[2] / 2;
    float* dst = out.data() + j * pv;
    for (int z = 0; z < patch_size[2]; ++z)
      for (int y = 0; y < patch_size[1]; ++y)
        for (int x = 0; x < patch_size[0]; ++x) {
          const int vx = sx + x, vy = sy + y, vz = sz + z;
          if (volume.contains(vx, vy, vz))
            dst[static_cast<std::size_t>(x) + patch_size[0] * (static_cast<std::size_t>(y) + patch_size[1] * z)] =
                volume.at(vx, vy, vz);
        }
  }
  return out;
}

Eigen::MatrixXd build_adjacency(std::span<const Eigen::Vector3d> centers, double threshold_mm) {
  if (!(threshold_mm > 0)) throw ContractError("adjacency threshold must be > 0");
  const auto n = static_cast<Eigen::Index>(centers.size());
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
  const double t2 = threshold_mm * threshold_mm;
  for (Eigen::Index u = 0; u < n; ++u)
    for (Eigen::Index v = u + 1; v < n; ++v) {
      if ((centers[static_cast<std::size_t>(u)] - centers[static_cast<std::size_t>(v)]).squaredNorm() <= t2) {
        a(u, v) = 1.0;
        a(v, u) = 1.0;
      }
    }
  return a;
}

double default_threshold_mm(const AtlasGrid& grid) {
  double m = 0;
  for (int a = 0; a < 3; ++a) m = std::max(m, grid.stride[a] * grid.atlas_spacing[a]);
  return 1.1 * m;
}

void PatchGraph::validate() const {
  const auto n = static_cast<std::size_t>(n_nodes());
  if (centers_subject.size() != n || centers_normalized.size() != n || center_outside.size() != n)
    throw ContractError("patch graph: per-node arrays disagree on node count");
  for (std::size_t j = 0; j < n; ++j) {
    if (region_ids[j] != static_cast<std::int32_t>(j)) throw ContractError("patch graph: region ids must be 0..N-1");
  }
  if (patches.size() != n * patch_voxels()) throw ContractError("patch graph: patch array size mismatch");
  if (adjacency.rows() != static_cast<Eigen::Index>(n) || adjacency.cols() != static_cast<Eigen::Index>(n))
    throw ContractError("patch graph: adjacency shape mismatch");
  for (Eigen::Index u = 0; u < adjacency.rows(); ++u) {
    if (adjacency(u, u) != 0.0) throw ContractError("patch graph: adjacency diagonal must be zero");
    for (Eigen::Index v = 0; v < u; ++v)
      if (adjacency(u, v) != adjacency(v, u)) throw ContractError("patch graph: adjacency must be symmetric");
  }
}

PatchGraph build_patch_graph(const SubjectRecord& subject, const Volume& atlas, const AtlasGrid& grid,
                             const GraphBuildConfig& config) {
  subject.validate();
  const Volume subj = config.zscore ? zscore(subject.volume) : subject.volume;
  const Volume atl = config.zscore ? zscore(atlas) : atlas;
  const RegistrationResult reg = fit_transform(subj, atl, config.registration);
  const MappedCenters mapped = map_centers(reg.transform, grid, subj);

  for (std::size_t j = 0; j < grid.centers_atlas.size(); ++j) {
    const double err = (reg.transform.apply(mapped.centers_subject[j]) - grid.centers_atlas[j]).norm();
    if (!(err < config.inverse_consistency_mm))
      throw NumericError("transform is not inverse-consistent at region " + std::to_string(j));
  }

  PatchGraph g;
  g.subject_id = subject.subject_id;
  g.region_ids.resize(grid.centers_atlas.size());
  for (std::size_t j = 0; j < g.region_ids.size(); ++j) g.region_ids[j] = static_cast<std::int32_t>(j);
  g.centers_subject = mapped.centers_subject;
  g.centers_normalized = mapped.centers_normalized;
  g.center_outside = mapped.outside;
  g.patch_size = grid.patch_size;
  g.patches = extract_patches(subj, g.centers_subject, grid.patch_size);
  const double thr = config.threshold_mm > 0 ? config.threshold_mm : default_threshold_mm(grid);
  g.adjacency = build_adjacency(config.atlas_space_adjacency ? std::span<const Eigen::Vector3d>(grid.centers_atlas)
                                                             : std::span<const Eigen::Vector3d>(g.centers_subject),
                                thr);
  g.transform = reg.transform;
  g.volume_shape = subject.volume.shape;
  g.volume_spacing = subject.volume.spacing;
  g.volume_origin = subject.volume.origin;
  return g;
}

namespace {

std::vector<double> flatten(const std::vector<Eigen::Vector3d>& pts) {
  std::vector<double> out;
  out.reserve(pts.size() * 3);
  for (const auto& p : pts) out.insert(out.end(), {p[0], p[1], p[2]});
  return out;
}

std::vector<Eigen::Vector3d> unflatten(const std::vector<double>& v) {
  if (v.size() % 3 != 0) throw IoError("point array length is not a multiple of 3");
  std::vector<Eigen::Vector3d> out;
  for (std::size_t i = 0; i < v.size(); i += 3) out.emplace_back(v[i], v[i + 1], v[i + 2]);
  return out;
}

}  // namespace

void save_patch_graph(const PatchGraph& g, const std::filesystem::path& path) {
  g.validate();
  const auto n = static_cast<std::uint64_t>(g.n_nodes());
  Archive a;
  a.put_string("format", "ctxssl.patch_graph/1");
  a.put_string("subject_id", g.subject_id);
  a.put_f32("patches", g.patches,
            {n, static_cast<std::uint64_t>(g.patch_size[2]), static_cast<std::uint64_t>(g.patch_size[1]),
             static_cast<std::uint64_t>(g.patch_size[0])});
  a.put_f64("centers_subject", flatten(g.centers_subject), {n, 3});
  a.put_f64("centers_normalized", flatten(g.centers_normalized), {n, 3});
  a.put_u8("center_outside", g.center_outside, {n});
  a.put_i32("region_ids", g.region_ids, {n});
  std::vector<std::uint8_t> adj(n * n);
  for (std::uint64_t u = 0; u < n; ++u)
    for (std::uint64_t v = 0; v < n; ++v)
      adj[u * n + v] = g.adjacency(static_cast<Eigen::Index>(u), static_cast<Eigen::Index>(v)) != 0.0 ? 1 : 0;
  a.put_u8("adjacency", adj, {n, n});
  a.put_f64("transform", g.transform.parameters());
  a.put_i32("volume_shape", {g.volume_shape[0], g.volume_shape[1], g.volume_shape[2]});
  a.put_f64("volume_spacing", {g.volume_spacing[0], g.volume_spacing[1], g.volume_spacing[2]});
  a.put_f64("volume_origin", {g.volume_origin[0], g.volume_origin[1], g.volume_origin[2]});
  a.put_string("config_hash", g.config_hash);
  a.save(path);

  nlohmann::json side;
  side["format"] = "ctxssl.patch_graph/1";
  side["subject_id"] = g.subject_id;
  side["n_nodes"] = g.n_nodes();
  side["patch_size"] = g.patch_size;
  side["transform"] = {{"kind", Transform::kind_name(g.transform.kind())}, {"parameters", g.transform.parameters()}};
  side["config_hash"] = g.config_hash;
  side["centers_outside"] = std::count(g.center_outside.begin(), g.center_outside.end(), 1);
  side["n_edges"] = static_cast<long>(g.adjacency.sum() / 2);
  std::ofstream os(path.string() + ".json", std::ios::trunc);
  if (!os) throw IoError("cannot write: " + path.string() + ".json");
  os << side.dump(2) << '\n';
}

PatchGraph load_patch_graph(const std::filesystem::path& path) {
  const Archive a = Archive::load(path);
  if (a.get_string("format") != "ctxssl.patch_graph/1") throw IoError("not a patch graph archive: " + path.string());
  PatchGraph g;
  g.subject_id = a.get_string("subject_id");
  g.region_ids = a.get_i32("region_ids");
  const auto n = g.region_ids.size();
  const auto& pe = a.entry("patches");
  if (pe.dims.size() != 4 || pe.dims[0] != n) throw IoError("patch graph: bad patch array shape");
  g.patch_size = {static_cast<int>(pe.dims[3]), static_cast<int>(pe.dims[2]), static_cast<int>(pe.dims[1])};
  g.patches = a.get_f32("patches");
  g.centers_subject = unflatten(a.get_f64("centers_subject"));
  g.centers_normalized = unflatten(a.get_f64("centers_normalized"));
  g.center_outside = a.get_u8("center_outside");
  const auto adj = a.get_u8("adjacency");
  if (adj.size() != n * n) throw IoError("patch graph: bad adjacency shape");
  g.adjacency = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t v = 0; v < n; ++v)
      g.adjacency(static_cast<Eigen::Index>(u), static_cast<Eigen::Index>(v)) = adj[u * n + v];
  g.transform = Transform::from_parameters(a.get_f64("transform"));
  const auto shp = a.get_i32("volume_shape");
  const auto sp = a.get_f64("volume_spacing");
  const auto org = a.get_f64("volume_origin");
  if (shp.size() != 3 || sp.size() != 3 || org.size() != 3) throw IoError("patch graph: bad volume geometry");
  g.volume_shape = {shp[0], shp[1], shp[2]};
  g.volume_spacing = Eigen::Vector3d(sp[0], sp[1], sp[2]);
  g.volume_origin = Eigen::Vector3d(org[0], org[1], org[2]);
  g.config_hash = a.get_string("config_hash");
  g.validate();
  return g;
}

bool is_connected(const Eigen::MatrixXd& adjacency) {
  const auto n = adjacency.rows();
  if (n == 0) return true;
  std::vector<char> seen(static_cast<std::size_t>(n), 0);
  std::queue<Eigen::Index> q;
  q.push(0);
  seen[0] = 1;
  Eigen::Index visited = 1;
  while (!q.empty()) {
    const auto u = q.front();
    q.pop();
    for (Eigen::Index v = 0; v < n; ++v) {
      if (adjacency(u, v) != 0.0 && !seen[static_cast<std::size_t>(v)]) {
        seen[static_cast<std::size_t>(v)] = 1;
        ++visited;
        q.push(v);
      }
    }
  }
  return visited == n;
}

}  // namespace ctxssl
