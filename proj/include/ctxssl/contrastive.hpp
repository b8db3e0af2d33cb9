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

#include "ctxssl/archive.hpp"
#include "ctxssl/encoders.hpp"

namespace ctxssl {

struct ContrastiveConfig {
  double temperature = 0.2;
  int queue_capacity = 4096;
  double momentum = 0.999;
  int patch_batch = 128;
  int graph_batch = 16;
  bool graph_queue = true;           // false: graph negatives come from the batch only
  int graph_queue_capacity = 4096;

  void validate() const;
};

/// -log softmax of the positive logit among {q.k+, q.k-_1, ...}, logits divided
/// by tau. Vectors must be unit length. `grad_q` receives d loss / d q.
double info_nce(const nn::Vec& q, const nn::Vec& positive, const nn::Mat& negatives, double tau,
                nn::Vec* grad_q = nullptr);

struct BatchNce {
  double loss = 0.0;               // mean over queries
  nn::Mat grad_q;                  // d loss / d q, (F, B)
  int negatives_per_query = 0;
};

/// Query i is paired with key i; keys b != i and every column of
/// `extra_negatives` serve as its negatives. Gradient flows to queries only.
BatchNce batch_info_nce(const nn::Mat& q, const nn::Mat& k, const nn::Mat& extra_negatives, double tau);

/// FIFO ring of unit-length embeddings, each with an integer tag
/// (region id at patch level, kGraphTag at graph level).
class NegativeQueue {
 public:
  static constexpr int kGraphTag = -1;

  NegativeQueue() = default;
  NegativeQueue(int dim, int capacity);

  /// Appends the columns of `embeddings`; the oldest entries are evicted beyond capacity.
  void push(const nn::Mat& embeddings, std::span<const int> tags);
  void push(const nn::Mat& embeddings, int tag);

  [[nodiscard]] int size() const { return size_; }
  [[nodiscard]] int capacity() const { return capacity_; }
  [[nodiscard]] int dim() const { return dim_; }
  /// Entries oldest first.
  [[nodiscard]] nn::Mat entries() const;
  [[nodiscard]] std::vector<int> tags() const;
  /// Entries whose tag equals `tag`, oldest first.
  [[nodiscard]] nn::Mat entries_with_tag(int tag) const;

  void save(Archive& archive, const std::string& prefix) const;
  static NegativeQueue load(const Archive& archive, const std::string& prefix);

 private:
  [[nodiscard]] int slot(int i) const { return (cursor_ - size_ + i + capacity_) % capacity_; }

  int dim_ = 0;
  int capacity_ = 0;
  int size_ = 0;
  int cursor_ = 0;  // next write slot
  nn::Mat data_;    // (dim, capacity)
  std::vector<int> tags_;
};

/// key <- m * key + (1 - m) * online for every parameter; names and shapes must match.
void momentum_update(std::span<nn::Param* const> key, std::span<nn::Param* const> online, double m);

/// Online encoders plus their EMA copy. The key copy is never touched by the optimizer.
struct MomentumPair {
  Encoders online;
  Encoders key;
  double momentum = 0.999;

  MomentumPair() = default;
  MomentumPair(const PatchEncoderConfig& config, double m);
  /// Initialises the online weights and copies them (and the norm buffers) to the key copy.
  void init(Rng& rng);
  void update();
};

/// Two augmented views of 128 (by default) patches, all at one atlas region.
struct PatchBatch {
  int region = 0;
  int batch = 0;
  nn::Mat view_q;  // (1, batch * voxels)
  nn::Mat view_k;
  nn::Mat coords;  // (3, batch)
};

/// Two patch-level augmented views of `batch` graphs with `nodes` nodes each.
struct GraphBatch {
  int batch = 0;
  int nodes = 0;
  nn::Mat view_q;  // (1, batch * nodes * voxels), graph-major
  nn::Mat view_k;
  nn::Mat coords;  // (3, batch * nodes)
  std::vector<nn::Mat> adj_hat;
};

struct LossStep {
  double loss = 0.0;
  int negatives_per_query = 0;
  nn::Mat keys;  // unit-length key embeddings to enqueue after the optimizer step
};

/// Region-conditioned patch InfoNCE. Accumulates grad_scale * d L_l into the
/// online patch encoder when grad_scale != 0. Negatives: other keys of the
/// batch and queue entries tagged with the batch region.
LossStep patch_level_loss(MomentumPair& pair, const PatchBatch& batch, const NegativeQueue& queue,
                          const ContrastiveConfig& config, double grad_scale = 1.0);

/// Subject-level InfoNCE on S = f_g(Pool(GCN(E(x, p))). Gradient reaches the
/// patch encoder unless `stop_patch_gradient` is set.
LossStep graph_level_loss(MomentumPair& pair, const GraphBatch& batch, const NegativeQueue* queue,
                          const ContrastiveConfig& config, double grad_scale = 1.0,
                          bool stop_patch_gradient = false);

/// L = L_l + graph_weight * L_g.
inline double combined_loss(double patch_loss, double graph_loss, double graph_weight = 1.0) {
  return patch_loss + graph_weight * graph_loss;
}

}  // namespace ctxssl
