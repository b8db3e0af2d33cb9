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

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctxssl/atlas_graph.hpp"
#include "ctxssl/augment.hpp"
#include "ctxssl/contrastive.hpp"
#include "ctxssl/optim.hpp"

namespace ctxssl {

struct TrainConfig {
  int epochs = 30;
  double lr = 3e-2;
  AdamConfig adam;
  double graph_weight = 1.0;         // 0 disables the graph-level term
  bool stop_graph_gradient = false;  // keep L_g from reaching the patch encoder
  std::uint64_t seed = 0;
  int checkpoint_every = 0;          // steps; 0 writes only the final checkpoint

  void validate() const;
};

struct PretrainConfig {
  PatchEncoderConfig encoder;
  ContrastiveConfig contrastive;
  AugmentConfig augment;
  TrainConfig train;
  std::string config_hash;  // recorded in checkpoints
};

/// Atlas-grid fingerprint every graph of a dataset (and every graph fed to a
/// trained model) must share.
struct GridSignature {
  int n_nodes = 0;
  Size3 patch_size{0, 0, 0};
  nn::Mat coords;  // (3, N) normalised atlas centres

  static GridSignature of(const PatchGraph& graph);
  [[nodiscard]] bool matches(const GridSignature& other) const;
};

/// Everything needed to continue training bit-for-bit.
struct TrainState {
  PretrainConfig config;
  GridSignature grid;
  MomentumPair pair;
  Adam adam;
  NegativeQueue patch_queue;
  NegativeQueue graph_queue;
  long step = 0;
  long total_steps = 0;
  int steps_per_epoch = 0;
};

struct StepRecord {
  long step = 0;
  double lr = 0.0;
  double patch_loss = 0.0;
  double graph_loss = 0.0;
  double loss = 0.0;
  int patch_region = 0;
  int patch_negatives = 0;
  int graph_negatives = 0;
};

class Trainer {
 public:
  /// Validates the dataset (non-empty, one shared atlas grid) and initialises a fresh state.
  Trainer(std::span<const PatchGraph> graphs, PretrainConfig config);
  /// Continues from a checkpointed state; the dataset must match its grid.
  Trainer(std::span<const PatchGraph> graphs, TrainState state);

  /// One iteration: a patch-level step and a graph-level step whose gradients
  /// are summed into one optimizer update, followed by the EMA update and
  /// enqueueing of the key embeddings. Throws NumericError on a non-finite loss.
  StepRecord step();
  /// Runs until `until_step` (default: the end of training), invoking `on_step` after each iteration.
  void run(std::optional<long> until_step = std::nullopt, const std::function<void(const StepRecord&)>& on_step = {});

  [[nodiscard]] TrainState& state() { return state_; }
  [[nodiscard]] bool finished() const { return state_.step >= state_.total_steps; }

  /// Batches exactly as step() would draw them (exposed for tests).
  [[nodiscard]] PatchBatch patch_batch(long step) const;
  [[nodiscard]] GraphBatch graph_batch(long step) const;

 private:
  void prepare();

  std::span<const PatchGraph> graphs_;
  std::vector<nn::Mat> adj_hat_;
  TrainState state_;
};

void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path);

void write_loss_log_header(std::ostream& out);
void write_loss_log_row(std::ostream& out, const StepRecord& r);

struct SubjectFeatures {
  nn::Vec pooled;     // S', (F)
  nn::Mat h_updated;  // H', (N, F)
};

/// Inference-mode features with the online encoders: encode every patch at its
/// region, one GCN layer, mean pooling; the projection head is not applied.
/// Throws ContractError when the graph's grid differs from the training grid.
SubjectFeatures extract_subject_features(TrainState& model, const PatchGraph& graph);

}  // namespace ctxssl
