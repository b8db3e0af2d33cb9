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
#include <string>
#include <vector>

#include <json.hpp>

#include "ctxssl/atlas_graph.hpp"
#include "ctxssl/evaluation.hpp"
#include "ctxssl/phantom.hpp"
#include "ctxssl/trainer.hpp"

namespace ctxssl {

struct PhantomDatasetConfig {
  int count = 200;
  double diseased_fraction = 0.5;
  int regions_min = 1;  // lesion regions drawn per diseased subject
  int regions_max = 1;
  PhantomSpec spec;     // per-subject seed and lesion count are filled in per subject
};

struct GridConfig {
  int patch_size = 16;
  int stride = 12;
  double min_mask_fraction = 0.5;
  double threshold_mm = 0.0;  // <= 0: 1.1 x stride in mm
  bool atlas_space_adjacency = false;
};

struct IoConfig {
  bool zscore = true;
  std::string atlas;          // optional atlas volume; default: the dataset atlas, else the first subject
  std::string atlas_mask;
};

struct ProbeConfig {
  int folds = 5;
  double ridge_lambda = 1e-3;
  double logistic_l2 = 1.0;
};

struct ExplainConfig {
  std::string task;           // empty: first classification task
  std::string target_class;   // empty: every class against the reference class
  bool affine_prenormalize = false;
  bool png = true;
  int slice = -1;             // axial index; negative selects the middle slice
};

/// Every knob of the pipeline. Serialised as one JSON document with the
/// sections below; unknown keys are rejected.
struct RunConfig {
  std::string preset = "desk";
  std::uint64_t seed = 0;
  PhantomDatasetConfig phantom;
  GridConfig grid;
  IoConfig io;
  RegistrationConfig registration;
  PatchEncoderConfig encoder;  // patch_size follows grid.patch_size
  AugmentConfig augment;
  ContrastiveConfig contrastive;
  TrainConfig trainer;
  ProbeConfig probe;
  ExplainConfig explain;

  static RunConfig preset_named(const std::string& name);
  [[nodiscard]] nlohmann::json to_json() const;
  /// `j` must be a complete document (see merge_config).
  static RunConfig from_json(const nlohmann::json& j);
  void validate() const;

  [[nodiscard]] GraphBuildConfig graph_build() const;
  [[nodiscard]] PretrainConfig pretrain() const;
};

/// Overlays `user` on `base`; every key of `user` must exist in `base` with a
/// compatible type. Throws ConfigError naming the offending key.
nlohmann::json merge_config(const nlohmann::json& base, const nlohmann::json& user);

/// Applies "dotted.key=value"; the value is parsed as JSON, else taken as a string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Preset (from --preset, else the file's "preset", else desk) + file + overrides.
RunConfig resolve_config(const std::string& preset, const std::filesystem::path& file,
                         const std::vector<std::string>& overrides);

/// Digest of a canonical (key-sorted) JSON dump.
std::string json_hash(const nlohmann::json& j);

enum class Stage { Phantom, Graphs, Pretrain, Probe, Explain };
std::string stage_name(Stage s);
/// Hash over the config sections a stage (and everything upstream of it) depends on.
std::string stage_hash(const RunConfig& config, Stage stage);

}  // namespace ctxssl
