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

#include <doctest.h>

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include "ctxssl/atlas_graph.hpp"
#include "ctxssl/error.hpp"
#include "ctxssl/phantom.hpp"
#include "ctxssl/registration.hpp"
#include "support.hpp"

using namespace ctxssl;
using ctxssl::testing::TempDir;

using testing::brute_adjacency;
using testing::move;
using testing::textured_atlas;

TEST_CASE("atlas grid: 64^3 all-true mask, patch 32, stride 16 gives 27 centres") {
  const Volume mask({64, 64, 64}, 1.0F);
  const AtlasGrid g = build_atlas_grid(mask, {32, 32, 32}, {16, 16, 16});
  const int per_axis = (64 - 32) / 16 + 1;  // lattice positions where the patch fits
  CHECK(g.n_patches() == per_axis * per_axis * per_axis);
  for (const auto& c : g.centers_atlas)
    for (int a = 0; a < 3; ++a) {
      CHECK(c[a] >= 0);
      CHECK(c[a] <= 63);
    }
}

TEST_CASE("atlas grid: lexicographic (z, y, x) ordering and lattice stride") {
  const Volume mask({44, 44, 44}, 1.0F);
  const AtlasGrid g = build_atlas_grid(mask, {16, 16, 16}, {12, 12, 12});
  REQUIRE(g.n_patches() == 27);
  for (int j = 1; j < g.n_patches(); ++j) {
    const auto& p = g.centers_atlas[static_cast<std::size_t>(j - 1)];
    const auto& q = g.centers_atlas[static_cast<std::size_t>(j)];
    const bool lex = p[2] < q[2] || (p[2] == q[2] && (p[1] < q[1] || (p[1] == q[1] && p[0] < q[0])));
    CHECK(lex);
  }
  CHECK((g.centers_atlas[1] - g.centers_atlas[0]).norm() == doctest::Approx(12));
  CHECK((g.centers_atlas[3] - g.centers_atlas[0]).norm() == doctest::Approx(12));
  CHECK((g.centers_atlas[9] - g.centers_atlas[0]).norm() == doctest::Approx(12));
  const AtlasGrid again = build_atlas_grid(mask, {16, 16, 16}, {12, 12, 12});
  CHECK(again.centers_atlas == g.centers_atlas);
  for (const auto& c : g.centers_normalized)
    for (int a = 0; a < 3; ++a) CHECK((c[a] >= 0 && c[a] <= 1));
}

TEST_CASE("atlas grid: stride equal to patch size tiles without overlap") {
  const Volume mask({32, 32, 32}, 1.0F);
  const AtlasGrid g = build_atlas_grid(mask, {16, 16, 16}, {16, 16, 16});
  CHECK(g.n_patches() == 8);
  CHECK((g.centers_atlas[1] - g.centers_atlas[0]).norm() == doctest::Approx(16));
}

TEST_CASE("atlas grid: mask fraction filter and errors") {
  Volume mask({44, 44, 44}, 0.0F);
  for (int z = 0; z < 44; ++z)
    for (int y = 0; y < 44; ++y)
      for (int x = 0; x < 22; ++x) mask.at(x, y, z) = 1.0F;
  const AtlasGrid half = build_atlas_grid(mask, {16, 16, 16}, {12, 12, 12}, 0.5);
  CHECK(half.n_patches() == 18);  // x columns starting at 2 and 14 overlap >= 50%
  CHECK_THROWS_AS(build_atlas_grid(Volume({44, 44, 44}, 0.0F), {16, 16, 16}, {12, 12, 12}), ContractError);
  CHECK_THROWS_AS(build_atlas_grid(Volume({8, 8, 8}, 1.0F), {16, 16, 16}, {12, 12, 12}), ContractError);
  CHECK_THROWS_AS(build_atlas_grid(Volume({44, 44, 44}, 1.0F), {16, 16, 16}, {20, 20, 20}), ContractError);
}

TEST_CASE("adjacency examples") {
  const std::vector<Eigen::Vector3d> one{{0, 0, 0}};
  CHECK(build_adjacency(one, 1.0) == Eigen::MatrixXd::Zero(1, 1));

  const std::vector<Eigen::Vector3d> line{{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 0, 0}};
  const Eigen::MatrixXd a = build_adjacency(line, 1.5);
  CHECK(a == brute_adjacency(line, 1.5));
  CHECK(a.sum() / 2 == 3);
  CHECK(a(0, 1) == 1);
  CHECK(a(2, 3) == 1);
  CHECK(a(0, 2) == 0);

  CHECK(build_adjacency(line, 0.5).isZero());
  CHECK_THROWS_AS(build_adjacency(line, 0.0), ContractError);
}

TEST_CASE("property: adjacency equals brute force on random centre sets") {
  Rng rng(101);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(rng.index(40));
    const auto pts = testing::random_points(n, 30.0, rng);
    const double thr = rng.uniform(0.5, 15.0);
    REQUIRE(build_adjacency(pts, thr) == brute_adjacency(pts, thr));
  }
}

TEST_CASE("property: rigid motion of centres leaves adjacency unchanged") {
  Rng rng(102);
  for (int trial = 0; trial < 50; ++trial) {
    // Integer-lattice points with an integer-valued rigid map keep distances exact.
    std::vector<Eigen::Vector3d> pts;
    for (int i = 0; i < 20; ++i)
      pts.emplace_back(static_cast<double>(rng.index(10)), static_cast<double>(rng.index(10)),
                       static_cast<double>(rng.index(10)));
    const Eigen::Matrix3d r = Eigen::AngleAxisd(rng.uniform(0, 6.28), testing::random_unit(3, rng)).toRotationMatrix();
    const Eigen::Vector3d t(rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(-20, 20));
    std::vector<Eigen::Vector3d> moved;
    for (const auto& p : pts) moved.push_back(r * p + t);
    // Thresholds halfway between attainable squared integer distances avoid ties.
    const double thr = std::sqrt(rng.index(60) + 0.5);
    CHECK(build_adjacency(moved, thr) == build_adjacency(pts, thr));
  }
}

TEST_CASE("transform: closed-form affine inverse round trip") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::Matrix3d m = Eigen::Matrix3d::Identity() + 0.2 * testing::random_matrix(3, 3, rng);
    const Eigen::Vector3d t(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5));
    const Transform tr = Transform::affine(m, t);
    const Eigen::Matrix3d minv = m.inverse();  // oracle
    for (int k = 0; k < 10; ++k) {
      const Eigen::Vector3d p = 40 * Eigen::Vector3d::Random();
      CHECK((tr.apply_inverse(p) - minv * (p - t)).norm() < 1e-9);
      CHECK((tr.apply(tr.apply_inverse(p)) - p).norm() < 1e-9);
    }
  }
  CHECK_THROWS_AS(Transform::affine(Eigen::Matrix3d::Zero(), Eigen::Vector3d::Zero()), NumericError);
}

TEST_CASE("transform: displacement inverse by fixed point, parameter round trip") {
  DisplacementGrid grid;
  grid.dims = {4, 4, 4};
  grid.origin = Eigen::Vector3d::Zero();
  grid.step = Eigen::Vector3d::Constant(14.0);
  Rng rng(9);
  for (int i = 0; i < 64; ++i) grid.values.emplace_back(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
  const Transform tr = Transform::from_inverse(Eigen::Matrix3d::Identity() * 1.02, Eigen::Vector3d(1, -2, 0.5), grid);
  CHECK(tr.kind() == Transform::Kind::AffineDisplacement);
  for (int k = 0; k < 50; ++k) {
    const Eigen::Vector3d q(rng.uniform(0, 42), rng.uniform(0, 42), rng.uniform(0, 42));
    CHECK((tr.apply(tr.apply_inverse(q)) - q).norm() < 1e-6);
  }
  const Transform back = Transform::from_parameters(tr.parameters());
  const Eigen::Vector3d q(10, 20, 30);
  CHECK((back.apply_inverse(q) - tr.apply_inverse(q)).norm() < 1e-12);
}

TEST_CASE("map_centers: identity, translation and random affine") {
  const Volume mask({44, 44, 44}, 1.0F);
  const AtlasGrid g = build_atlas_grid(mask, {16, 16, 16}, {12, 12, 12});
  const MappedCenters id = map_centers(Transform::identity(), g, mask);
  for (int j = 0; j < g.n_patches(); ++j) {
    CHECK(id.centers_subject[static_cast<std::size_t>(j)] == g.centers_atlas[static_cast<std::size_t>(j)]);
    CHECK(id.centers_normalized[static_cast<std::size_t>(j)] == g.centers_normalized[static_cast<std::size_t>(j)]);
  }
  // phi(x) = x + t maps subject to atlas, so phi^-1(p) = p - t.
  const Eigen::Vector3d t(3, -2, 1.5);
  const MappedCenters tr = map_centers(Transform::affine(Eigen::Matrix3d::Identity(), t), g, mask);
  for (int j = 0; j < g.n_patches(); ++j)
    CHECK((tr.centers_subject[static_cast<std::size_t>(j)] - (g.centers_atlas[static_cast<std::size_t>(j)] - t))
              .norm() < 1e-12);

  Rng rng(4);
  const Eigen::Matrix3d m = Eigen::Matrix3d::Identity() + 0.1 * testing::random_matrix(3, 3, rng);
  const Eigen::Vector3d b(1, 2, 3);
  const MappedCenters af = map_centers(Transform::affine(m, b), g, mask);
  const Eigen::Matrix3d minv = m.inverse();
  for (int j = 0; j < g.n_patches(); ++j)
    CHECK((af.centers_subject[static_cast<std::size_t>(j)] - minv * (g.centers_atlas[static_cast<std::size_t>(j)] - b))
              .norm() < 1e-6);

  const MappedCenters far = map_centers(Transform::affine(Eigen::Matrix3d::Identity(), Eigen::Vector3d(40, 0, 0)), g, mask);
  int flagged = 0;
  for (auto f : far.outside) flagged += f;
  CHECK(flagged > 0);
  CHECK(far.centers_subject.size() == static_cast<std::size_t>(g.n_patches()));
}

TEST_CASE("extract_patches: direct slice, corner padding, constant volume") {
  Volume v({64, 64, 64});
  for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] = static_cast<float>(i % 977);
  const std::vector<Eigen::Vector3d> centre{{32, 32, 32}};
  const auto p = extract_patches(v, centre, {32, 32, 32});
  bool same = true;
  for (int z = 0; z < 32; ++z)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x)
        same = same && p[static_cast<std::size_t>(x + 32 * (y + 32 * z))] == v.at(16 + x, 16 + y, 16 + z);
  CHECK(same);

  const Volume ones({64, 64, 64}, 1.0F);
  const std::vector<Eigen::Vector3d> corner{{0, 0, 0}};
  const auto c = extract_patches(ones, corner, {32, 32, 32});
  std::size_t zeros = 0;
  for (float x : c) zeros += x == 0.0F;
  CHECK(zeros == 32 * 32 * 32 * 7 / 8);  // only the octant with all indices >= 0 is inside

  const Volume k({20, 20, 20}, 2.5F);
  const std::vector<Eigen::Vector3d> inner{{6, 7, 8}, {10, 10, 10}, {13.2, 12.7, 9.9}};
  for (float x : extract_patches(k, inner, {8, 8, 8})) CHECK(x == 2.5F);
}

TEST_CASE("nearest voxel rounds halves toward negative infinity") {
  const Volume v({10, 10, 10});
  CHECK(nearest_voxel(v, {2.5, 3.5, -0.5}) == std::array<int, 3>{2, 3, -1});
  CHECK(nearest_voxel(v, {2.51, 3.49, 0.2}) == std::array<int, 3>{3, 3, 0});
}

TEST_CASE("registration: subject = atlas gives the identity") {
  const Volume atlas = textured_atlas();
  const RegistrationResult r = fit_transform(atlas, atlas, RegistrationConfig{});
  Eigen::VectorXd d(12);
  const auto p = r.transform.parameters();
  const auto id = Transform::identity_parameters();
  for (int i = 0; i < 12; ++i) d[i] = p[static_cast<std::size_t>(i)] - id[static_cast<std::size_t>(i)];
  CHECK(d.norm() < 1e-3);
}

TEST_CASE("registration: known translation recovered within half a voxel") {
  const Volume atlas = textured_atlas();
  const Eigen::Vector3d t(2.0, -1.5, 1.0);
  const Volume subject = move(atlas, Transform::affine(Eigen::Matrix3d::Identity(), t));
  const RegistrationResult r = fit_transform(subject, atlas, RegistrationConfig{});
  CHECK((r.transform.inverse_translation() - t).norm() < 0.5);
  RegistrationConfig cold;
  cold.center_of_mass_init = false;
  const RegistrationResult rc = fit_transform(subject, atlas, cold);
  CHECK((rc.transform.inverse_translation() - t).norm() < 0.5);
  CHECK(rc.final_cost < 0.1 * rc.initial_cost);
}

TEST_CASE("registration: known affine recovered, inverse consistent") {
  const Volume atlas = textured_atlas();
  const Eigen::Vector3d c(21.5, 21.5, 21.5);
  const Eigen::Matrix3d l =
      Eigen::AngleAxisd(0.05, Eigen::Vector3d(1, 2, 3).normalized()).toRotationMatrix() *
      Eigen::Vector3d(1.03, 0.98, 1.01).asDiagonal();
  const Eigen::Vector3d b = c - l * c + Eigen::Vector3d(1.0, 0.5, -1.0);
  const Volume subject = move(atlas, Transform::affine(l, b));
  const RegistrationResult r = fit_transform(subject, atlas, RegistrationConfig{});
  CHECK((r.transform.inverse_linear() - l).norm() / l.norm() < 0.02);
  CHECK((r.transform.inverse_linear() * c + r.transform.inverse_translation() - (l * c + b)).norm() < 0.5);
  const AtlasGrid g = build_atlas_grid(threshold_mask(atlas, 0.5), {16, 16, 16}, {12, 12, 12});
  for (const auto& p : g.centers_atlas) CHECK((r.transform.apply(r.transform.apply_inverse(p)) - p).norm() < 1e-4);
}

TEST_CASE("patch graph: composition, invariants, archive round trip") {
  PhantomSpec spec = testing::small_phantom_spec(3, 1);
  const SubjectRecord atlas = generate_atlas(spec);
  const AtlasGrid grid = build_atlas_grid(*atlas.mask, {16, 16, 16}, {12, 12, 12});
  const Phantom ph = generate_phantom(spec, "sub-0001");
  const PatchGraph g = build_patch_graph(ph.record, atlas.volume, grid, GraphBuildConfig{});
  CHECK_NOTHROW(g.validate());
  CHECK(g.n_nodes() == grid.n_patches());
  CHECK(g.adjacency == g.adjacency.transpose());
  CHECK(g.adjacency.diagonal().isZero());
  CHECK(is_connected(g.adjacency));
  for (int j = 0; j < g.n_nodes(); ++j) CHECK(g.region_ids[static_cast<std::size_t>(j)] == j);

  const PatchGraph again = build_patch_graph(ph.record, atlas.volume, grid, GraphBuildConfig{});
  CHECK(again.patches == g.patches);
  CHECK(again.adjacency == g.adjacency);

  TempDir dir("graph");
  save_patch_graph(g, dir / "g.ctxa");
  CHECK(std::filesystem::exists(dir / "g.ctxa.json"));
  const PatchGraph h = load_patch_graph(dir / "g.ctxa");
  CHECK(h.patches == g.patches);
  CHECK(h.adjacency == g.adjacency);
  CHECK(h.centers_subject == g.centers_subject);
  CHECK(h.subject_id == "sub-0001");
}

TEST_CASE("patch graph: subject = atlas reproduces the atlas-centre adjacency") {
  PhantomSpec spec = testing::small_phantom_spec(3, 0);
  const SubjectRecord atlas = generate_atlas(spec);
  const AtlasGrid grid = build_atlas_grid(*atlas.mask, {16, 16, 16}, {12, 12, 12});
  const PatchGraph g = build_patch_graph(atlas, atlas.volume, grid, GraphBuildConfig{});
  CHECK(g.adjacency == build_adjacency(grid.centers_atlas, default_threshold_mm(grid)));
}

TEST_CASE("patch graph: translated subjects share adjacency; desk suite is connected") {
  PhantomSpec spec = testing::small_phantom_spec(3, 0);
  const SubjectRecord atlas = generate_atlas(spec);
  const AtlasGrid grid = build_atlas_grid(*atlas.mask, {16, 16, 16}, {12, 12, 12});
  const Volume base = textured_atlas();
  SubjectRecord a{"a", base, std::nullopt, {}};
  SubjectRecord b{"b", move(base, Transform::affine(Eigen::Matrix3d::Identity(), Eigen::Vector3d(1.5, -1, 2))),
                  std::nullopt, {}};
  const PatchGraph ga = build_patch_graph(a, base, grid, GraphBuildConfig{});
  const PatchGraph gb = build_patch_graph(b, base, grid, GraphBuildConfig{});
  CHECK(ga.adjacency == gb.adjacency);

  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const Phantom ph = generate_phantom(testing::small_phantom_spec(100 + seed, static_cast<int>(seed % 3)));
    CHECK(is_connected(build_patch_graph(ph.record, atlas.volume, grid, GraphBuildConfig{}).adjacency));
  }
}
