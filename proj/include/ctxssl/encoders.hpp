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

#include <span>
#include <string>
#include <vector>

#include "ctxssl/nn.hpp"

namespace ctxssl {

/// Conditional patch encoder E(x, p) = f_l(C(x) || p).
///
/// C is a stack of 3x3x3 conv blocks, each conv followed by BatchNorm + ELU.
/// Block k widens to channels[k]; the first and last blocks hold two convs
/// (stride 1 then stride 2), the middle blocks three (stride 1, 1, 2). A patch
/// of side 2^blocks is reduced to one voxel and flattened to channels.back().
/// f_l is Dense(F+3, F+3) -> ReLU -> Dense(F+3, F+3) -> ReLU -> Dense(F+3, F).
struct PatchEncoderConfig {
  int patch_size = 16;
  std::vector<int> channels{4, 8, 16, 32};
  int coord_dim = 3;
  double bn_momentum = 0.9;

  [[nodiscard]] int feature_dim() const { return channels.back(); }
  /// Throws ConfigError if the stack does not reduce the patch to one voxel.
  void validate() const;
  static PatchEncoderConfig desk() { return {}; }
  static PatchEncoderConfig paper() { return {32, {8, 16, 32, 64, 128}, 3, 0.9}; }
};

/// One row of the layer-by-layer shape trace.
struct LayerShape {
  std::string layer;
  std::vector<int> output;  // (C, D, H, W) for conv layers, (C, F) or (C, N, F) otherwise
};

struct PatchTrace {
  int batch = 0;
  nn::Mat input;                      // patches fed to the first conv
  std::vector<nn::BatchNormCache> bn;
  std::vector<nn::Mat> conv_outputs;  // after ELU
  nn::Mat concat, a1, a2;
};

class PatchEncoder {
 public:
  PatchEncoder() = default;
  explicit PatchEncoder(PatchEncoderConfig config);
  void init(Rng& rng);

  /// C(x): (1, batch * voxels) patches to (F, batch) features.
  nn::Mat cnn_features(const nn::Mat& patches, int batch, nn::Mode mode, PatchTrace* trace = nullptr);
  /// E(x, p): coords is (3, batch) with entries in [0, 1].
  nn::Mat encode(const nn::Mat& patches, const nn::Mat& coords, int batch, nn::Mode mode,
                 PatchTrace* trace = nullptr);
  /// Accumulates parameter gradients for d loss / d E(x, p).
  void backward(const nn::Mat& grad_out, PatchTrace& trace);

  void collect(std::vector<nn::Param*>& out);
  void collect_buffers(std::vector<nn::Buffer>& out);

  [[nodiscard]] const PatchEncoderConfig& config() const { return config_; }
  /// Layer-by-layer output extents of C, then of f_l, computed from the layers.
  [[nodiscard]] std::vector<LayerShape> cnn_shape_trace() const;
  [[nodiscard]] std::vector<LayerShape> head_shape_trace() const;
  [[nodiscard]] int conv_count() const { return static_cast<int>(convs_.size()); }
  [[nodiscard]] nn::Conv3d& conv(int i) { return convs_[static_cast<std::size_t>(i)]; }
  [[nodiscard]] nn::Dense& head(int i) { return i == 0 ? fl1_ : (i == 1 ? fl2_ : fl3_); }

 private:
  PatchEncoderConfig config_;
  std::vector<nn::Conv3d> convs_;
  std::vector<nn::BatchNorm> bns_;
  std::vector<nn::Dims3> in_dims_;
  nn::Dense fl1_, fl2_, fl3_;
};

struct GraphEncoderConfig {
  int feature_dim = 32;
  bool batchnorm = true;
  double bn_momentum = 0.9;
};

/// Symmetric normalisation D^-1/2 (A + I) D^-1/2. A must be square, symmetric,
/// 0/1 valued with a zero diagonal.
nn::Mat normalized_adjacency(const nn::Mat& adjacency);

struct GraphTrace {
  int batch = 0;
  int nodes = 0;
  nn::Mat h_in;         // (F, batch * nodes)
  nn::BatchNormCache bn;
  nn::Mat h_updated;    // after ELU
  nn::Mat pooled;       // (F, batch)
  nn::Mat r1, r2;
  std::vector<const nn::Mat*> adj;
};

/// G(H, A) = f_g(Pool(ELU(BN(A_hat H W)))), one propagation layer.
class GraphEncoder {
 public:
  GraphEncoder() = default;
  explicit GraphEncoder(GraphEncoderConfig config);
  void init(Rng& rng);

  /// Batched H' for `adj.size()` graphs of equal size; h is (F, batch * nodes)
  /// with graph b occupying columns [b * nodes, (b + 1) * nodes).
  nn::Mat propagate(const nn::Mat& h, std::span<const nn::Mat* const> adj_hat, nn::Mode mode,
                    GraphTrace* trace = nullptr);
  /// Mean over the nodes of each graph: (F, batch * nodes) to (F, batch).
  static nn::Mat pool(const nn::Mat& h_updated, int batch, int nodes);
  /// f_g head.
  nn::Mat project(const nn::Mat& pooled, GraphTrace* trace = nullptr);
  /// S = f_g(Pool(H')).
  nn::Mat embed(const nn::Mat& h, std::span<const nn::Mat* const> adj_hat, nn::Mode mode,
                GraphTrace* trace = nullptr);
  /// Accumulates parameter gradients for d loss / d S; returns d loss / d H.
  nn::Mat backward(const nn::Mat& grad_s, GraphTrace& trace);

  /// Single-graph conveniences with node-major H (N x F) and raw 0/1 adjacency.
  nn::Mat gcn_forward(const nn::Mat& h_nodes, const nn::Mat& adjacency, nn::Mode mode);
  static nn::Vec pooled_features(const nn::Mat& h_updated_nodes);
  nn::Vec graph_embed(const nn::Mat& h_nodes, const nn::Mat& adjacency, nn::Mode mode);

  void collect(std::vector<nn::Param*>& out);
  void collect_buffers(std::vector<nn::Buffer>& out);
  [[nodiscard]] const GraphEncoderConfig& config() const { return config_; }
  [[nodiscard]] std::vector<LayerShape> shape_trace(int nodes) const;

  nn::Param weight;  // (F, F); H' = A_hat H W
  nn::BatchNorm bn;
  nn::Dense fg1, fg2, fg3;

 private:
  GraphEncoderConfig config_;
};

/// The trainable model: conditional patch encoder plus graph encoder.
struct Encoders {
  PatchEncoder patch;
  GraphEncoder graph;

  Encoders() = default;
  explicit Encoders(const PatchEncoderConfig& pc);
  void init(Rng& rng);
  /// Fixed order shared by online and key copies.
  std::vector<nn::Param*> params();
  std::vector<nn::Buffer> buffers();
  void zero_grad();
};

}  // namespace ctxssl
