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
#include <map>
#include <string>
#include <vector>

#include "ctxssl/volume.hpp"

namespace ctxssl {

/// Reads a NIfTI-1 single-file image (.nii or .nii.gz). Geometry comes from the
/// sform when present, otherwise from pixdim and the qform offset. Exact double
/// geometry written by save_volume is restored from its header extension.
Volume load_volume(const std::filesystem::path& path);

/// Writes a float32 NIfTI-1 single file; gzip-compressed if the name ends in .gz.
void save_volume(const Volume& volume, const std::filesystem::path& path);

/// Labels table keyed by subject id. Column order is kept for writing.
struct LabelTable {
  std::vector<std::string> columns;  // excludes subject_id
  std::map<std::string, LabelMap> rows;
};

/// Parses a UTF-8 comma-separated table with a `subject_id` header column.
/// Columns whose non-empty cells all parse as numbers become scalars, the rest
/// categories. Empty cells are kept as explicit missing values.
LabelTable load_labels(const std::filesystem::path& path);

void save_labels(const LabelTable& table, const std::filesystem::path& path);

}  // namespace ctxssl
