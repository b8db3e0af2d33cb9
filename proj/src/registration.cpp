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

#include "ctxssl/registration.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include <Eigen/Dense>

#include "ctxssl/error.hpp"

namespace ctxssl {

Transform::Transform() = default;

Transform Transform::affine(const Eigen::Matrix3d& linear, const Eigen::Vector3d& translation) {
  const double det = linear.determinant();
  if (!std::isfinite(det) || std::abs(det) < 1e-10) throw NumericError("singular affine matrix");
  Transform t;
  t.linear_ = linear;
  t.translation_ = translation;
  t.inv_linear_ = linear.inverse();
  t.inv_translation_ = -t.inv_linear_ * translation;
  return t;
}

Transform Transform::from_inverse(const Eigen::Matrix3d& inv_linear, const Eigen::Vector3d& inv_translation,
                                  DisplacementGrid displacement) {
  const double det = inv_linear.determinant();
  if (!std::isfinite(det) || std::abs(det) < 1e-10) throw NumericError("singular affine matrix");
  Transform t;
  t.inv_linear_ = inv_linear;
  t.inv_translation_ = inv_translation;
  t.linear_ = inv_linear.inverse();
  t.translation_ = -t.linear_ * inv_translation;
  if (!displacement.values.empty()) {
    const auto& d = displacement.dims;
    if (d[0] < 2 || d[1] < 2 || d[2] < 2 ||
        displacement.values.size() != static_cast<std::size_t>(d[0]) * d[1] * d[2])
      throw ContractError("displacement grid has inconsistent dimensions");
  }
  t.displacement_ = std::move(displacement);
  return t;
}

std::string Transform::kind_name(Kind k) {
  return k == Kind::Affine ? "affine" : "affine-plus-smooth-displacement";
}

Eigen::Vector3d Transform::displacement_at(const Eigen::Vector3d& q) const {
  if (displacement_.values.empty()) return Eigen::Vector3d::Zero();
  const auto& g = displacement_;
  int i0[3];
  double f[3];
  for (int a = 0; a < 3; ++a) {
    const double t = std::clamp((q[a] - g.origin[a]) / g.step[a], 0.0, g.dims[a] - 1.0);
    i0[a] = std::min(static_cast<int>(std::floor(t)), g.dims[a] - 2);
    f[a] = t - i0[a];
  }
  Eigen::Vector3d acc = Eigen::Vector3d::Zero();
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const double w = (dx ? f[0] : 1 - f[0]) * (dy ? f[1] : 1 - f[1]) * (dz ? f[2] : 1 - f[2]);
        const std::size_t k = static_cast<std::size_t>(i0[0] + dx) +
                              g.dims[0] * (static_cast<std::size_t>(i0[1] + dy) + g.dims[1] * (i0[2] + dz));
        acc += w * g.values[k];
      }
  return acc;
}

Eigen::Vector3d Transform::apply_inverse(const Eigen::Vector3d& q) const {
  return inv_linear_ * q + inv_translation_ + displacement_at(q);
}

Eigen::Vector3d Transform::apply(const Eigen::Vector3d& x) const {
  Eigen::Vector3d q = linear_ * x + translation_;
  if (displacement_.values.empty()) return q;
  // Solve B q + b + u(q) = x by fixed-point iteration.
  for (int it = 0; it < inverse_max_iter_; ++it) {
    const Eigen::Vector3d next = linear_ * (x - inv_translation_ - displacement_at(q));
    const double step = (next - q).norm();
    q = next;
    if (!std::isfinite(step)) break;
    if (step < inverse_tol_) return q;
  }
  throw NumericError("inverse fixed-point did not converge");
}

void Transform::set_inverse_tolerance(double tol_mm, int max_iterations) {
  inverse_tol_ = tol_mm;
  inverse_max_iter_ = max_iterations;
}

std::vector<double> Transform::parameters() const {
  std::vector<double> p;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) p.push_back(linear_(r, c));
  for (int a = 0; a < 3; ++a) p.push_back(translation_[a]);
  if (!displacement_.values.empty()) {
    for (int a = 0; a < 3; ++a) p.push_back(displacement_.dims[a]);
    for (int a = 0; a < 3; ++a) p.push_back(displacement_.origin[a]);
    for (int a = 0; a < 3; ++a) p.push_back(displacement_.step[a]);
    for (const auto& v : displacement_.values)
      for (int a = 0; a < 3; ++a) p.push_back(v[a]);
  }
  return p;
}

std::vector<double> Transform::identity_parameters() {
  return {1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0};
}

Transform Transform::from_parameters(const std::vector<double>& p) {
  if (p.size() < 12) throw ContractError("transform parameter vector too short");
  Eigen::Matrix3d lin;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) lin(r, c) = p[static_cast<std::size_t>(3 * r + c)];
  const Eigen::Vector3d t(p[9], p[10], p[11]);
  Transform aff = affine(lin, t);
  if (p.size() == 12) return aff;
  if (p.size() < 21) throw ContractError("transform parameter vector has a truncated displacement block");
  DisplacementGrid g;
  for (int a = 0; a < 3; ++a) g.dims[a] = static_cast<int>(p[12 + a]);
  for (int a = 0; a < 3; ++a) g.origin[a] = p[15 + static_cast<std::size_t>(a)];
  for (int a = 0; a < 3; ++a) g.step[a] = p[18 + static_cast<std::size_t>(a)];
  const std::size_t n = static_cast<std::size_t>(g.dims[0]) * g.dims[1] * g.dims[2];
  if (p.size() != 21 + 3 * n) throw ContractError("transform displacement block size mismatch");
  g.values.resize(n);
  for (std::size_t k = 0; k < n; ++k) g.values[k] = Eigen::Vector3d(p[21 + 3 * k], p[22 + 3 * k], p[23 + 3 * k]);
  return from_inverse(aff.inverse_linear(), aff.inverse_translation(), std::move(g));
}

Volume gaussian_smooth(const Volume& v, double sigma) {
  if (sigma <= 0) return v;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double total = 0;
  for (int i = -radius; i <= radius; ++i) total += kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& k : kernel) k /= total;
  Volume cur = v;
  for (int axis = 0; axis < 3; ++axis) {
    Volume next = cur;
    for (int z = 0; z < v.shape[2]; ++z)
      for (int y = 0; y < v.shape[1]; ++y)
        for (int x = 0; x < v.shape[0]; ++x) {
          double acc = 0;
          int p[3] = {x, y, z};
          const int base = p[axis];
          for (int i = -radius; i <= radius; ++i) {
            p[axis] = std::clamp(base + i, 0, v.shape[axis] - 1);
            acc += kernel[static_cast<std::size_t>(i + radius)] * cur.at(p[0], p[1], p[2]);
          }
          next.at(x, y, z) = static_cast<float>(acc);
        }
    cur = std::move(next);
  }
  return cur;
}

Volume warp_to_atlas(const Volume& subject, const Volume& atlas, const Transform& t) {
  Volume out = zeros_like(atlas);
  for (int z = 0; z < atlas.shape[2]; ++z)
    for (int y = 0; y < atlas.shape[1]; ++y)
      for (int x = 0; x < atlas.shape[0]; ++x) {
        const Eigen::Vector3d q = atlas.index_to_world(Eigen::Vector3d(x, y, z));
        out.at(x, y, z) = static_cast<float>(subject.sample(subject.world_to_index(t.apply_inverse(q))));
      }
  return out;
}

namespace {

// Accumulates the Gauss-Newton system of the mean squared residual.
// Returns the mean squared residual; fills jtj/jtr (already divided by n) if non-null.
using DataTerm = std::function<double(const Eigen::VectorXd&, Eigen::MatrixXd*, Eigen::VectorXd*)>;

struct LmOutcome {
  Eigen::VectorXd theta;
  double cost = 0;
  int iterations = 0;
};

// Levenberg-Marquardt on  data(theta) + (theta - theta0)' Q (theta - theta0).
LmOutcome levenberg_marquardt(const DataTerm& data, Eigen::VectorXd theta, const Eigen::VectorXd& theta0,
                              const Eigen::MatrixXd& q, int max_iter, double tol) {
  auto penalty = [&](const Eigen::VectorXd& t) {
    const Eigen::VectorXd d = t - theta0;
    return d.dot(q * d);
  };
  const auto n = theta.size();
  Eigen::MatrixXd jtj(n, n);
  Eigen::VectorXd jtr(n);
  double cost = data(theta, &jtj, &jtr) + penalty(theta);
  if (!std::isfinite(cost)) throw NumericError("non-finite objective");
  double mu = 1e-3;
  LmOutcome out;
  int it = 0;
  for (; it < max_iter; ++it) {
    const Eigen::MatrixXd h = jtj + q;
    const Eigen::VectorXd g = jtr + q * (theta - theta0);
    bool accepted = false;
    for (int tries = 0; tries < 12; ++tries) {
      Eigen::MatrixXd damped = h;
      for (Eigen::Index i = 0; i < n; ++i) damped(i, i) += mu * std::max(h(i, i), 1e-12);
      const Eigen::VectorXd step = damped.ldlt().solve(-g);
      if (!step.allFinite()) {
        mu *= 10;
        continue;
      }
      const Eigen::VectorXd cand = theta + step;
      const double c = data(cand, nullptr, nullptr) + penalty(cand);
      if (std::isfinite(c) && c < cost) {
        const double rel = (cost - c) / std::max(cost, 1e-300);
        theta = cand;
        cost = c;
        mu = std::max(mu * 0.3, 1e-9);
        accepted = true;
        if (rel < tol) it = max_iter;
        break;
      }
      mu *= 5;
    }
    if (!accepted) break;
    if (it < max_iter) cost = data(theta, &jtj, &jtr) + penalty(theta);
  }
  if (!std::isfinite(cost)) throw NumericError("non-finite objective");
  out.theta = theta;
  out.cost = cost;
  out.iterations = it;
  return out;
}

Eigen::Vector3d center_of_mass(const Volume& v) {
  float lo = *std::min_element(v.data.begin(), v.data.end());
  Eigen::Vector3d acc = Eigen::Vector3d::Zero();
  double total = 0;
  for (int z = 0; z < v.shape[2]; ++z)
    for (int y = 0; y < v.shape[1]; ++y)
      for (int x = 0; x < v.shape[0]; ++x) {
        const double w = v.at(x, y, z) - lo;
        acc += w * v.index_to_world(Eigen::Vector3d(x, y, z));
        total += w;
      }
  if (total <= 0) return v.index_to_world(Eigen::Vector3d((v.shape[0] - 1) / 2.0, (v.shape[1] - 1) / 2.0, (v.shape[2] - 1) / 2.0));
  return acc / total;
}

struct Sample {
  Eigen::Vector3d q;  // atlas world point
  double target;
};

std::vector<Sample> atlas_samples(const Volume& atlas, int stride) {
  std::vector<Sample> out;
  for (int z = 0; z < atlas.shape[2]; z += stride)
    for (int y = 0; y < atlas.shape[1]; y += stride)
      for (int x = 0; x < atlas.shape[0]; x += stride)
        out.push_back({atlas.index_to_world(Eigen::Vector3d(x, y, z)), atlas.at(x, y, z)});
  return out;
}

}  // namespace

RegistrationResult fit_transform(const Volume& subject, const Volume& atlas, const RegistrationConfig& config) {
  subject.validate();
  atlas.validate();
  if (config.levels < 1) throw ConfigError("registration.levels must be >= 1");
  if (config.lambda < 0) throw ConfigError("registration.lambda must be >= 0");

  const Eigen::Vector3d center = atlas.index_to_world(
      Eigen::Vector3d((atlas.shape[0] - 1) / 2.0, (atlas.shape[1] - 1) / 2.0, (atlas.shape[2] - 1) / 2.0));

  // theta = [B row-major (9), d (3)], phi^-1(q) = B (q - c) + c + d.
  Eigen::VectorXd theta0(12);
  theta0 << 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0;
  Eigen::VectorXd theta = theta0;
  if (config.center_of_mass_init) theta.tail<3>() = center_of_mass(subject) - center_of_mass(atlas);
  const Eigen::MatrixXd q = config.lambda * Eigen::MatrixXd::Identity(12, 12);

  RegistrationResult result;
  const Eigen::VectorXd start = theta;
  for (int level = config.levels - 1; level >= 0; --level) {
    const int stride = 1 << level;
    const double sigma = level == 0 ? 0.0 : std::pow(2.0, level - 1);
    const Volume subj = gaussian_smooth(subject, sigma);
    const Volume atl = gaussian_smooth(atlas, sigma);
    const auto samples = atlas_samples(atl, stride);

    DataTerm data = [&](const Eigen::VectorXd& t, Eigen::MatrixXd* jtj, Eigen::VectorXd* jtr) {
      Eigen::Matrix3d b;
      b << t[0], t[1], t[2], t[3], t[4], t[5], t[6], t[7], t[8];
      const Eigen::Vector3d d = t.tail<3>();
      Eigen::Matrix<double, 12, 12> h = Eigen::Matrix<double, 12, 12>::Zero();
      Eigen::Matrix<double, 12, 1> g = Eigen::Matrix<double, 12, 1>::Zero();
      double sum = 0;
      Eigen::Vector3d grad_idx;
      Eigen::Matrix<double, 12, 1> row;
      for (const auto& s : samples) {
        const Eigen::Vector3d qc = s.q - center;
        const Eigen::Vector3d p = b * qc + center + d;
        const double v = subj.sample_clamped(subj.world_to_index(p), jtj ? &grad_idx : nullptr);
        const double r = v - s.target;
        sum += r * r;
        if (jtj != nullptr) {
          const Eigen::Vector3d gw = grad_idx.cwiseQuotient(subj.spacing);
          for (int a = 0; a < 3; ++a)
            for (int c = 0; c < 3; ++c) row[3 * a + c] = gw[a] * qc[c];
          row.tail<3>() = gw;
          h.selfadjointView<Eigen::Lower>().rankUpdate(row);
          g += r * row;
        }
      }
      const double inv_n = 1.0 / static_cast<double>(samples.size());
      if (jtj != nullptr) {
        *jtj = h.selfadjointView<Eigen::Lower>();
        *jtj *= inv_n;
        *jtr = g * inv_n;
      }
      return sum * inv_n;
    };

    // Overwritten per level so that both costs end up on the finest level.
    result.initial_cost = data(start, nullptr, nullptr);
    const auto lm = levenberg_marquardt(data, theta, theta0, q, config.iterations, config.tolerance);
    theta = lm.theta;
    result.final_cost = data(theta, nullptr, nullptr);
    result.iterations += lm.iterations;
  }

  Eigen::Matrix3d b;
  b << theta[0], theta[1], theta[2], theta[3], theta[4], theta[5], theta[6], theta[7], theta[8];
  const Eigen::Vector3d inv_t = center + theta.tail<3>() - b * center;
  Transform transform = Transform::from_inverse(b, inv_t);

  if (config.kind == Transform::Kind::AffineDisplacement) {
    const int gdim = config.displacement_grid;
    if (gdim < 2) throw ConfigError("registration.displacement_grid must be >= 2");
    Transform::DisplacementGrid grid;
    grid.dims = {gdim, gdim, gdim};
    grid.origin = atlas.origin;
    grid.step = atlas.extent() / static_cast<double>(gdim - 1);
    for (int a = 0; a < 3; ++a) grid.step[a] = std::max(grid.step[a], 1e-6);
    const int ncp = gdim * gdim * gdim;
    const int np = 3 * ncp;

    // Smoothness: graph Laplacian of the 6-neighbour control lattice.
    Eigen::MatrixXd lap = Eigen::MatrixXd::Zero(ncp, ncp);
    auto cp = [&](int x, int y, int z) { return x + gdim * (y + gdim * z); };
    for (int z = 0; z < gdim; ++z)
      for (int y = 0; y < gdim; ++y)
        for (int x = 0; x < gdim; ++x) {
          const int i = cp(x, y, z);
          const int nb[3][3] = {{x + 1, y, z}, {x, y + 1, z}, {x, y, z + 1}};
          for (const auto& n : nb) {
            if (n[0] >= gdim || n[1] >= gdim || n[2] >= gdim) continue;
            const int j = cp(n[0], n[1], n[2]);
            lap(i, i) += 1;
            lap(j, j) += 1;
            lap(i, j) -= 1;
            lap(j, i) -= 1;
          }
        }
    Eigen::MatrixXd qd = Eigen::MatrixXd::Zero(np, np);
    for (int i = 0; i < ncp; ++i)
      for (int j = 0; j < ncp; ++j)
        for (int a = 0; a < 3; ++a) qd(3 * i + a, 3 * j + a) = config.displacement_lambda * lap(i, j);
    qd.diagonal().array() += config.lambda;

    const auto samples = atlas_samples(atlas, 1);
    const Eigen::Matrix3d bl = transform.inverse_linear();
    const Eigen::Vector3d bt = transform.inverse_translation();
    DataTerm data = [&](const Eigen::VectorXd& u, Eigen::MatrixXd* jtj, Eigen::VectorXd* jtr) {
      if (jtj != nullptr) {
        jtj->setZero(np, np);
        jtr->setZero(np);
      }
      double sum = 0;
      Eigen::Vector3d grad_idx;
      int idx[8];
      double w[8];
      for (const auto& s : samples) {
        int i0[3];
        double f[3];
        for (int a = 0; a < 3; ++a) {
          const double t = std::clamp((s.q[a] - grid.origin[a]) / grid.step[a], 0.0, gdim - 1.0);
          i0[a] = std::min(static_cast<int>(std::floor(t)), gdim - 2);
          f[a] = t - i0[a];
        }
        Eigen::Vector3d disp = Eigen::Vector3d::Zero();
        int k = 0;
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx, ++k) {
              idx[k] = cp(i0[0] + dx, i0[1] + dy, i0[2] + dz);
              w[k] = (dx ? f[0] : 1 - f[0]) * (dy ? f[1] : 1 - f[1]) * (dz ? f[2] : 1 - f[2]);
              disp += w[k] * u.segment<3>(3 * idx[k]);
            }
        const Eigen::Vector3d p = bl * s.q + bt + disp;
        const double v = subject.sample_clamped(subject.world_to_index(p), jtj ? &grad_idx : nullptr);
        const double r = v - s.target;
        sum += r * r;
        if (jtj != nullptr) {
          const Eigen::Vector3d gw = grad_idx.cwiseQuotient(subject.spacing);
          for (int m = 0; m < 8; ++m) {
            if (w[m] == 0) continue;
            for (int a = 0; a < 3; ++a) (*jtr)[3 * idx[m] + a] += r * w[m] * gw[a];
            for (int n2 = 0; n2 < 8; ++n2) {
              if (w[n2] == 0) continue;
              for (int a = 0; a < 3; ++a)
                for (int c = 0; c < 3; ++c)
                  (*jtj)(3 * idx[m] + a, 3 * idx[n2] + c) += w[m] * w[n2] * gw[a] * gw[c];
            }
          }
        }
      }
      const double inv_n = 1.0 / static_cast<double>(samples.size());
      if (jtj != nullptr) {
        *jtj *= inv_n;
        *jtr *= inv_n;
      }
      return sum * inv_n;
    };
    const Eigen::VectorXd u0 = Eigen::VectorXd::Zero(np);
    const auto lm = levenberg_marquardt(data, u0, u0, qd, config.displacement_iterations, config.tolerance);
    grid.values.resize(static_cast<std::size_t>(ncp));
    for (int i = 0; i < ncp; ++i) grid.values[static_cast<std::size_t>(i)] = lm.theta.segment<3>(3 * i);
    transform = Transform::from_inverse(bl, bt, std::move(grid));
    result.final_cost = data(lm.theta, nullptr, nullptr);
    result.iterations += lm.iterations;
  }
  transform.set_inverse_tolerance(std::min(config.inverse_tolerance_mm * 1e-3, 1e-6), 500);
  result.transform = std::move(transform);
  return result;
}

}  // namespace ctxssl
