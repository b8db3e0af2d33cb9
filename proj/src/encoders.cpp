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

#include "ctxssl/encoders.hpp"

#include <algorithm>
#include <cmath>

#include "ctxssl/error.hpp"

namespace ctxssl {

using nn::Mat;
using nn::Mode;

void PatchEncoderConfig::validate() const {
  if (channels.empty()) throw ConfigError("encoder.channels must not be empty");
  for (int c : channels)
    if (c <= 0) throw ConfigError("encoder.channels must be positive");
  if (coord_dim != 3) throw ConfigError("encoder conditioning vector must be 3 wide");
  int side = patch_size;
  for (std::size_t k = 0; k < channels.size(); ++k) side = (side - 1) / 2 + 1;
  if (side != 1 || patch_size != (1 << channels.size()))
    throw ConfigError("patch size " + std::to_string(patch_size) + " is not reduced to one voxel by " +
                      std::to_string(channels.size()) + " downsampling blocks");
}

PatchEncoder::PatchEncoder(PatchEncoderConfig config) : config_(std::move(config)) {
  config_.validate();
  const int blocks = static_cast<int>(config_.channels.size());
  nn::Dims3 d{config_.patch_size, config_.patch_size, config_.patch_size};
  int in = 1;
  for (int k = 0; k < blocks; ++k) {
    const int c = config_.channels[static_cast<std::size_t>(k)];
    const std::vector<int> strides = (k == 0 || k == blocks - 1) ? std::vector<int>{1, 2} : std::vector<int>{1, 1, 2};
    for (std::size_t i = 0; i < strides.size(); ++i) {
      const std::string tag = std::to_string(k) + "_" + std::to_string(i);
      convs_.emplace_back("patch.conv" + tag, in, c, strides[i]);
      bns_.emplace_back("patch.bn" + tag, c, config_.bn_momentum);
      in_dims_.push_back(d);
      d = convs_.back().output_dims(d);
      in = c;
    }
  }
  const int f = config_.feature_dim();
  const int w = f + config_.coord_dim;
  fl1_ = nn::Dense("patch.fl1", w, w);
  fl2_ = nn::Dense("patch.fl2", w, w);
  fl3_ = nn::Dense("patch.fl3", w, f);
}

void PatchEncoder::init(Rng& rng) {
  for (auto& c : convs_) c.init(rng);
  fl1_.init(rng);
  fl2_.init(rng);
  fl3_.init(rng);
}

Mat PatchEncoder::cnn_features(const Mat& patches, int batch, Mode mode, PatchTrace* trace) {
  const Eigen::Index voxels = static_cast<Eigen::Index>(config_.patch_size) * config_.patch_size * config_.patch_size;
  if (patches.rows() != 1 || patches.cols() != batch * voxels)
    throw ContractError("patch encoder: expected " + std::to_string(batch) + " patches of side " +
                        std::to_string(config_.patch_size));
  if (trace != nullptr) {
    trace->batch = batch;
    trace->input = patches;
    trace->bn.assign(convs_.size(), {});
    trace->conv_outputs.assign(convs_.size(), {});
  }
  Mat x = patches;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    Mat y = convs_[i].forward(x, in_dims_[i], batch);
    y = bns_[i].forward(y, mode, trace ? &trace->bn[i] : nullptr);
    x = nn::elu(y);
    if (trace != nullptr) trace->conv_outputs[i] = x;
  }
  return x;  // spatial extent is one voxel: (F, batch)
}

Mat PatchEncoder::encode(const Mat& patches, const Mat& coords, int batch, Mode mode, PatchTrace* trace) {
  if (coords.rows() != config_.coord_dim || coords.cols() != batch)
    throw ContractError("patch encoder: conditioning vector must be (3, batch)");
  const Mat feat = cnn_features(patches, batch, mode, trace);
  Mat concat(feat.rows() + coords.rows(), batch);
  concat << feat, coords;
  Mat h1 = fl1_.forward(concat);
  Mat a1 = nn::relu(h1);
  Mat h2 = fl2_.forward(a1);
  Mat a2 = nn::relu(h2);
  Mat out = fl3_.forward(a2);
  if (trace != nullptr) {
    trace->concat = std::move(concat);
    trace->a1 = std::move(a1);
    trace->a2 = std::move(a2);
  }
  return out;
}

void PatchEncoder::backward(const Mat& grad_out, PatchTrace& t) {
  Mat g = fl3_.backward(t.a2, grad_out);
  g = nn::relu_backward(t.a2, g);
  g = fl2_.backward(t.a1, g);
  g = nn::relu_backward(t.a1, g);
  g = fl1_.backward(t.concat, g);
  Mat gx = g.topRows(config_.feature_dim());
  for (std::size_t i = convs_.size(); i-- > 0;) {
    gx = nn::elu_backward(t.conv_outputs[i], gx);
    gx = bns_[i].backward(gx, t.bn[i]);
    const Mat& input = i == 0 ? t.input : t.conv_outputs[i - 1];
    gx = convs_[i].backward(input, in_dims_[i], t.batch, gx, i != 0);
  }
}

void PatchEncoder::collect(std::vector<nn::Param*>& out) {
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    convs_[i].collect(out);
    bns_[i].collect(out);
  }
  fl1_.collect(out);
  fl2_.collect(out);
  fl3_.collect(out);
}

void PatchEncoder::collect_buffers(std::vector<nn::Buffer>& out) {
  for (auto& b : bns_) b.collect_buffers(out);
}

std::vector<LayerShape> PatchEncoder::cnn_shape_trace() const {
  std::vector<LayerShape> rows;
  rows.push_back({"Input", {1, config_.patch_size, config_.patch_size, config_.patch_size}});
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    const nn::Dims3 o = convs_[i].output_dims(in_dims_[i]);
    const std::vector<int> shape{convs_[i].out_channels(), o.z, o.y, o.x};
    rows.push_back({"Conv3D", shape});
    rows.push_back({"BatchNorm+ELU", shape});
  }
  rows.push_back({"Reshape", {1, convs_.back().out_channels()}});
  return rows;
}

std::vector<LayerShape> PatchEncoder::head_shape_trace() const {
  return {
      {"Input", {1, config_.feature_dim(), 1, config_.coord_dim}},
      {"Concatenation", {1, fl1_.in_features()}},
      {"Dense", {1, fl1_.out_features()}},
      {"ReLU", {1, fl1_.out_features()}},
      {"Dense", {1, fl2_.out_features()}},
      {"ReLU", {1, fl2_.out_features()}},
      {"Dense", {1, fl3_.out_features()}},
  };
}

// ---------------------------------------------------------------- graph

Mat normalized_adjacency(const Mat& a) {
  if (a.rows() != a.cols()) throw ContractError("adjacency must be square");
  const auto n = a.rows();
  for (Eigen::Index u = 0; u < n; ++u) {
    if (a(u, u) != 0.0) throw ContractError("adjacency must have a zero diagonal");
    for (Eigen::Index v = 0; v < n; ++v) {
      if (a(u, v) != 0.0 && a(u, v) != 1.0) throw ContractError("adjacency must be binary");
      if (a(u, v) != a(v, u)) throw ContractError("adjacency must be symmetric");
    }
  }
  Mat s = a + Mat::Identity(n, n);
  const nn::Vec d = s.rowwise().sum().array().rsqrt().matrix();
  return d.asDiagonal() * s * d.asDiagonal();
}

GraphEncoder::GraphEncoder(GraphEncoderConfig config)
    : weight("graph.gcn.weight", config.feature_dim, config.feature_dim, true),
      bn("graph.bn", config.feature_dim, config.bn_momentum),
      fg1("graph.fg1", config.feature_dim, config.feature_dim),
      fg2("graph.fg2", config.feature_dim, config.feature_dim),
      fg3("graph.fg3", config.feature_dim, config.feature_dim),
      config_(config) {}

void GraphEncoder::init(Rng& rng) {
  nn::he_uniform(weight.value, config_.feature_dim, rng);
  fg1.init(rng);
  fg2.init(rng);
  fg3.init(rng);
}

Mat GraphEncoder::propagate(const Mat& h, std::span<const Mat* const> adj_hat, Mode mode, GraphTrace* trace) {
  const int batch = static_cast<int>(adj_hat.size());
  if (batch == 0) throw ContractError("graph encoder: empty batch");
  const int nodes = static_cast<int>(adj_hat[0]->rows());
  if (nodes == 0) throw ContractError("graph encoder: empty graph");
  if (h.rows() != config_.feature_dim || h.cols() != static_cast<Eigen::Index>(batch) * nodes)
    throw ContractError("graph encoder: node feature matrix has wrong dimensions");
  Mat wh = weight.value.transpose() * h;
  Mat z(wh.rows(), wh.cols());
  for (int b = 0; b < batch; ++b) {
    if (adj_hat[static_cast<std::size_t>(b)]->rows() != nodes || adj_hat[static_cast<std::size_t>(b)]->cols() != nodes)
      throw ContractError("graph encoder: graphs in a batch must have equal node counts");
    z.middleCols(b * nodes, nodes).noalias() = wh.middleCols(b * nodes, nodes) * (*adj_hat[static_cast<std::size_t>(b)]);
  }
  Mat y = config_.batchnorm ? bn.forward(z, mode, trace ? &trace->bn : nullptr) : z;
  Mat out = nn::elu(y);
  if (trace != nullptr) {
    trace->batch = batch;
    trace->nodes = nodes;
    trace->h_in = h;
    trace->h_updated = out;
    trace->adj.assign(adj_hat.begin(), adj_hat.end());
  }
  return out;
}

Mat GraphEncoder::pool(const Mat& h_updated, int batch, int nodes) {
  if (nodes <= 0) throw ContractError("cannot pool an empty graph");
  Mat out(h_updated.rows(), batch);
  for (int b = 0; b < batch; ++b) out.col(b) = h_updated.middleCols(b * nodes, nodes).rowwise().mean();
  return out;
}

Mat GraphEncoder::project(const Mat& pooled, GraphTrace* trace) {
  Mat g1 = fg1.forward(pooled);
  Mat r1 = nn::relu(g1);
  Mat g2 = fg2.forward(r1);
  Mat r2 = nn::relu(g2);
  Mat s = fg3.forward(r2);
  if (trace != nullptr) {
    trace->pooled = pooled;
    trace->r1 = std::move(r1);
    trace->r2 = std::move(r2);
  }
  return s;
}

Mat GraphEncoder::embed(const Mat& h, std::span<const Mat* const> adj_hat, Mode mode, GraphTrace* trace) {
  const Mat hu = propagate(h, adj_hat, mode, trace);
  const int batch = static_cast<int>(adj_hat.size());
  return project(pool(hu, batch, static_cast<int>(hu.cols()) / batch), trace);
}

Mat GraphEncoder::backward(const Mat& grad_s, GraphTrace& t) {
  Mat g = fg3.backward(t.r2, grad_s);
  g = nn::relu_backward(t.r2, g);
  g = fg2.backward(t.r1, g);
  g = nn::relu_backward(t.r1, g);
  const Mat g_pooled = fg1.backward(t.pooled, g);

  Mat gh(g_pooled.rows(), static_cast<Eigen::Index>(t.batch) * t.nodes);
  for (int b = 0; b < t.batch; ++b)
    gh.middleCols(b * t.nodes, t.nodes) = (g_pooled.col(b) / t.nodes).replicate(1, t.nodes);
  gh = nn::elu_backward(t.h_updated, gh);
  if (config_.batchnorm) gh = bn.backward(gh, t.bn);
  Mat gwh(gh.rows(), gh.cols());
  for (int b = 0; b < t.batch; ++b)
    gwh.middleCols(b * t.nodes, t.nodes).noalias() = gh.middleCols(b * t.nodes, t.nodes) * (*t.adj[static_cast<std::size_t>(b)]);
  weight.grad.noalias() += t.h_in * gwh.transpose();
  return weight.value * gwh;
}

Mat GraphEncoder::gcn_forward(const Mat& h_nodes, const Mat& adjacency, Mode mode) {
  if (h_nodes.cols() != config_.feature_dim || h_nodes.rows() != adjacency.rows())
    throw ContractError("gcn_forward: dimension mismatch between H and A");
  const Mat a_hat = normalized_adjacency(adjacency);
  const Mat* adj[] = {&a_hat};
  return propagate(h_nodes.transpose(), adj, mode).transpose();
}

nn::Vec GraphEncoder::pooled_features(const Mat& h_updated_nodes) {
  if (h_updated_nodes.rows() == 0) throw ContractError("cannot pool an empty graph");
  return h_updated_nodes.colwise().mean().transpose();
}

nn::Vec GraphEncoder::graph_embed(const Mat& h_nodes, const Mat& adjacency, Mode mode) {
  const Mat hu = gcn_forward(h_nodes, adjacency, mode);
  const Mat pooled = pooled_features(hu);
  return project(pooled).col(0);
}

void GraphEncoder::collect(std::vector<nn::Param*>& out) {
  out.push_back(&weight);
  bn.collect(out);
  fg1.collect(out);
  fg2.collect(out);
  fg3.collect(out);
}

void GraphEncoder::collect_buffers(std::vector<nn::Buffer>& out) { bn.collect_buffers(out); }

std::vector<LayerShape> GraphEncoder::shape_trace(int nodes) const {
  const int f = config_.feature_dim;
  return {
      {"Input", {1, nodes, f}},
      {"GCNLayer", {1, nodes, static_cast<int>(weight.value.cols())}},
      {"BatchNorm+ELU", {1, nodes, f}},
      {"AveragePooling", {1, 1, f}},
      {"Dense", {1, 1, fg1.out_features()}},
      {"ReLU", {1, 1, fg1.out_features()}},
      {"Dense", {1, 1, fg2.out_features()}},
      {"ReLU", {1, 1, fg2.out_features()}},
      {"Dense", {1, 1, fg3.out_features()}},
      {"Reshape", {1, fg3.out_features()}},
  };
}

Encoders::Encoders(const PatchEncoderConfig& pc)
    : patch(pc), graph(GraphEncoderConfig{pc.feature_dim(), true, pc.bn_momentum}) {}

void Encoders::init(Rng& rng) {
  Rng prng = rng.split(11);
  Rng grng = rng.split(12);
  patch.init(prng);
  graph.init(grng);
}

std::vector<nn::Param*> Encoders::params() {
  std::vector<nn::Param*> out;
  patch.collect(out);
  graph.collect(out);
  return out;
}

std::vector<nn::Buffer> Encoders::buffers() {
  std::vector<nn::Buffer> out;
  patch.collect_buffers(out);
  graph.collect_buffers(out);
  return out;
}

void Encoders::zero_grad() {
  for (auto* p : params()) p->zero_grad();
}

}  // namespace ctxssl
