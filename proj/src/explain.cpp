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


#include "ctxssl/explain.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>

#include <png.h>
#include <Eigen/SVD>

#include "ctxssl/error.hpp"

namespace ctxssl {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

ActivationMap region_activations(const Eigen::RowVectorXd& weight, double bias, const MatrixXd& h_updated,
                                 bool affine_prenormalize) {
  if (weight.size() != h_updated.cols())
    throw ContractError("region_activations: probe width " + std::to_string(weight.size()) +
                        " does not match feature width " + std::to_string(h_updated.cols()));
  if (h_updated.rows() == 0) throw ContractError("region_activations: empty graph");
  ActivationMap m;
  m.bias = bias;
  m.raw = h_updated * weight.transpose();
  VectorXd z = m.raw;
  if (affine_prenormalize) {
    const double mu = z.mean();
    const double sd = std::sqrt((z.array() - mu).square().mean());
    z = (z.array() - mu) / (sd > 1e-12 ? sd : 1.0);
  }
  m.normalized = z.unaryExpr([](double v) { return sigmoid(v); });
  m.region_ids.resize(static_cast<std::size_t>(h_updated.rows()));
  for (std::size_t j = 0; j < m.region_ids.size(); ++j) m.region_ids[j] = static_cast<int>(j);
  return m;
}

std::vector<ActivationMap> class_activations(const LogisticModel& probe, const MatrixXd& h_updated,
                                             const std::vector<int>& region_ids, const std::string& subject_id,
                                             bool affine_prenormalize, const std::string& target_class) {
  if (static_cast<Eigen::Index>(region_ids.size()) != h_updated.rows())
    throw ContractError("class_activations: one region id per node");
  const MatrixXd w = probe.raw_weight();
  const VectorXd b = probe.raw_bias();
  auto make = [&](const Eigen::RowVectorXd& weight, double bias, std::size_t target, std::size_t reference) {
    ActivationMap m = region_activations(weight, bias, h_updated, affine_prenormalize);
    m.subject_id = subject_id;
    m.target_class = probe.classes[target];
    m.reference_class = probe.classes[reference];
    m.region_ids = region_ids;
    return m;
  };
  std::vector<ActivationMap> out;
  if (target_class.empty()) {
    for (Eigen::Index c = 1; c < w.rows(); ++c) out.push_back(make(w.row(c), b(c), static_cast<std::size_t>(c), 0));
    return out;
  }
  const auto it = std::find(probe.classes.begin(), probe.classes.end(), target_class);
  if (it == probe.classes.end()) throw ContractError("class_activations: unknown class '" + target_class + "'");
  const auto c = static_cast<std::size_t>(it - probe.classes.begin());
  if (c > 0) {
    out.push_back(make(w.row(static_cast<Eigen::Index>(c)), b(static_cast<Eigen::Index>(c)), c, 0));
  } else if (probe.classes.size() == 2) {
    out.push_back(make(-w.row(1), -b(1), 0, 1));
  } else {
    throw ContractError("class_activations: '" + target_class + "' is the reference class of a multi-class probe");
  }
  return out;
}

Volume render_heatmap(const ActivationMap& map, const PatchGraph& graph) {
  if (static_cast<int>(map.normalized.size()) != graph.n_nodes())
    throw ContractError("render_heatmap: activation map and graph differ in node count");
  Volume geom;
  geom.shape = graph.volume_shape;
  geom.spacing = graph.volume_spacing;
  geom.origin = graph.volume_origin;
  geom.data.assign(static_cast<std::size_t>(geom.shape[0]) * geom.shape[1] * geom.shape[2], 0.0f);
  std::vector<double> sum(geom.data.size(), 0.0);
  std::vector<int> count(geom.data.size(), 0);
  const Size3 p = graph.patch_size;
  for (int k = 0; k < graph.n_nodes(); ++k) {
    const auto c = nearest_voxel(geom, graph.centers_subject[static_cast<std::size_t>(k)]);
    const double s = map.normalized(k);
    for (int z = c[2] - p[2] / 2; z < c[2] - p[2] / 2 + p[2]; ++z) {
      if (z < 0 || z >= geom.shape[2]) continue;
      for (int y = c[1] - p[1] / 2; y < c[1] - p[1] / 2 + p[1]; ++y) {
        if (y < 0 || y >= geom.shape[1]) continue;
        for (int x = c[0] - p[0] / 2; x < c[0] - p[0] / 2 + p[0]; ++x) {
          if (x < 0 || x >= geom.shape[0]) continue;
          const std::size_t i = geom.offset(x, y, z);
          sum[i] += s;
          ++count[i];
        }
      }
    }
  }
  for (std::size_t i = 0; i < sum.size(); ++i)
    if (count[i] > 0) geom.data[i] = static_cast<float>(sum[i] / count[i]);
  return geom;
}

void export_embeddings(const std::filesystem::path& path, const std::vector<std::string>& ids, const MatrixXd& features,
                       const std::vector<std::string>& label_columns,
                       const std::vector<std::vector<std::string>>& label_values) {
  if (static_cast<Eigen::Index>(ids.size()) != features.rows() || label_values.size() != ids.size())
    throw ContractError("export_embeddings: one row of features and labels per subject");
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << "subject_id";
  for (Eigen::Index f = 0; f < features.cols(); ++f) out << ",f" << f;
  for (const auto& c : label_columns) out << ',' << c;
  out << '\n';
  char buf[32];
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (label_values[i].size() != label_columns.size()) throw ContractError("export_embeddings: ragged label row");
    out << ids[i];
    for (Eigen::Index f = 0; f < features.cols(); ++f) {
      std::snprintf(buf, sizeof buf, "%.9g", features(static_cast<Eigen::Index>(i), f));
      out << ',' << buf;
    }
    for (const auto& v : label_values[i]) out << ',' << v;
    out << '\n';
  }
}

MatrixXd pca_2d(const MatrixXd& x) {
  if (x.rows() == 0) return MatrixXd(0, 2);
  const MatrixXd centered = x.rowwise() - x.colwise().mean();
  Eigen::JacobiSVD<MatrixXd> svd(centered, Eigen::ComputeThinV);
  MatrixXd axes = MatrixXd::Zero(x.cols(), 2);
  const Eigen::Index k = std::min<Eigen::Index>(2, svd.matrixV().cols());
  axes.leftCols(k) = svd.matrixV().leftCols(k);
  for (Eigen::Index c = 0; c < k; ++c) {
    Eigen::Index arg;
    axes.col(c).cwiseAbs().maxCoeff(&arg);
    if (axes(arg, c) < 0) axes.col(c) *= -1.0;
  }
  return centered * axes;
}

void write_slice_png(const Volume& v, int z, const std::filesystem::path& path, const Volume* overlay,
                     std::optional<std::pair<double, double>> window) {
  if (z < 0 || z >= v.shape[2]) throw ContractError("slice index " + std::to_string(z) + " is outside the volume");
  if (overlay != nullptr && overlay->shape != v.shape) throw ContractError("overlay shape differs from the volume");
  const int w = v.shape[0], h = v.shape[1];
  double lo, hi;
  if (window) {
    std::tie(lo, hi) = *window;
  } else {
    lo = hi = v.at(0, 0, z);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        lo = std::min<double>(lo, v.at(x, y, z));
        hi = std::max<double>(hi, v.at(x, y, z));
      }
  }
  const double range = hi > lo ? hi - lo : 1.0;
  std::vector<png_byte> rgb(static_cast<std::size_t>(w) * h * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double g = std::clamp((v.at(x, y, z) - lo) / range, 0.0, 1.0);
      double r = g, gg = g, b = g;
      if (overlay != nullptr) {
        const double a = std::clamp<double>(overlay->at(x, y, z), 0.0, 1.0);
        r = 0.5 * g + 0.5 * std::min(1.0, 2.0 * a);
        gg = 0.5 * g + 0.5 * std::max(0.0, 2.0 * a - 1.0);
        b = 0.5 * g;
      }
      // Image row 0 is the top, i.e. the largest y.
      png_byte* px = &rgb[(static_cast<std::size_t>(h - 1 - y) * w + x) * 3];
      px[0] = static_cast<png_byte>(std::lround(255.0 * r));
      px[1] = static_cast<png_byte>(std::lround(255.0 * gg));
      px[2] = static_cast<png_byte>(std::lround(255.0 * b));
    }

  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw IoError("cannot write '" + path.string() + "'");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed writing PNG '" + path.string() + "'");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < h; ++y) png_write_row(png, &rgb[static_cast<std::size_t>(y) * w * 3]);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace ctxssl
