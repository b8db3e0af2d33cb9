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

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "ctxssl/config.hpp"

namespace ctxssl {

/// Process exit codes shared by every command.
enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitPartial = 2, kExitRuntime = 3 };

struct StageResult {
  int exit_code = kExitOk;
  bool skipped = false;  // output already up to date
  std::filesystem::path out;
};

struct StageOptions {
  bool force = false;    // replace an existing output directory
  int jobs = 1;          // graph building workers
  bool resume = false;   // continue pretraining from the latest checkpoint
  std::ostream* log = nullptr;
};

/// `$CTXSSL_CACHE_DIR/<stage>-<hash>` (default cache: ./.ctxssl-cache).
std::filesystem::path default_output(const RunConfig& config, Stage stage);

/// Artifact directory layout.
namespace layout {
inline constexpr const char* kStamp = "stamp.json";
inline constexpr const char* kConfig = "config.json";
inline constexpr const char* kLabels = "labels.csv";
inline constexpr const char* kLesionCells = "lesion_cells.csv";
inline constexpr const char* kAtlas = "atlas.nii.gz";
inline constexpr const char* kAtlasMask = "atlas_mask.nii.gz";
inline constexpr const char* kVolumes = "volumes";
inline constexpr const char* kMasks = "masks";
inline constexpr const char* kLesions = "lesions";
inline constexpr const char* kGraphs = "graphs";
inline constexpr const char* kFailures = "failures.csv";
inline constexpr const char* kCheckpoint = "checkpoint.ctxa";
inline constexpr const char* kLatestCheckpoint = "checkpoint_latest.ctxa";
inline constexpr const char* kLossLog = "loss_log.csv";
inline constexpr const char* kResultsCsv = "results.csv";
inline constexpr const char* kResultsJson = "results.json";
inline constexpr const char* kFeatures = "features.csv";
inline constexpr const char* kModels = "models";
}  // namespace layout

/// Writes K phantom subjects, their labels, lesion ground truth and the atlas.
StageResult run_phantom(const RunConfig& config, const std::filesystem::path& out, const StageOptions& options);

/// One patch graph per subject volume in `data/volumes`. Per-subject failures
/// are recorded in failures.csv and reported with kExitPartial.
StageResult run_build_graphs(const RunConfig& config, const std::filesystem::path& data,
                             const std::filesystem::path& out, const StageOptions& options);

StageResult run_pretrain(const RunConfig& config, const std::filesystem::path& graphs,
                         const std::filesystem::path& out, const StageOptions& options);

/// Five-fold linear probes for every label column (numeric: ridge R^2,
/// categorical: logistic accuracy) plus full-data probe models for explain.
/// `labels` may be empty to use the dataset's labels.csv.
StageResult run_probe(const RunConfig& config, const std::filesystem::path& pretrain,
                      const std::filesystem::path& graphs, const std::filesystem::path& labels,
                      const std::filesystem::path& out, const StageOptions& options);

StageResult run_explain(const RunConfig& config, const std::filesystem::path& pretrain,
                        const std::filesystem::path& graphs, const std::filesystem::path& probe,
                        const std::string& subject_id, const std::filesystem::path& out, const StageOptions& options);

/// Features CSV (subject, S', labels) and its PCA-2D projection (`<out stem>_pca2d.csv`).
StageResult run_export_embeddings(const RunConfig& config, const std::filesystem::path& pretrain,
                                  const std::filesystem::path& graphs, const std::filesystem::path& labels,
                                  const std::filesystem::path& out_csv, const StageOptions& options);

/// Loads every graph archive of a graphs directory, ordered by subject id.
std::vector<PatchGraph> load_graph_dir(const std::filesystem::path& graphs);

/// Subject-level features (rows ordered like `graphs`) from a trained model.
Eigen::MatrixXd extract_features(TrainState& model, const std::vector<PatchGraph>& graphs);

}  // namespace ctxssl
