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
#include <map>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace ctxssl {

/// Flat container of named, typed n-dimensional arrays stored in one file.
///
/// Layout (little endian):
///   "CTXA" | u32 version | u32 entry count
///   per entry: u32 name length | name | u8 dtype | u32 ndim | u64 dims[ndim]
///              | u64 byte count | raw data
/// Entries are written in name order, so identical contents give identical files.
class Archive {
 public:
  enum class DType : std::uint8_t { F32 = 0, F64 = 1, I32 = 2, U8 = 3, I64 = 4, Bytes = 5 };

  struct Entry {
    DType dtype = DType::Bytes;
    std::vector<std::uint64_t> dims;
    std::vector<unsigned char> bytes;
  };

  static constexpr std::uint32_t kVersion = 1;

  void put_f32(const std::string& name, const std::vector<float>& v, std::vector<std::uint64_t> dims = {});
  void put_f64(const std::string& name, const std::vector<double>& v, std::vector<std::uint64_t> dims = {});
  void put_i32(const std::string& name, const std::vector<std::int32_t>& v, std::vector<std::uint64_t> dims = {});
  void put_u8(const std::string& name, const std::vector<std::uint8_t>& v, std::vector<std::uint64_t> dims = {});
  void put_i64(const std::string& name, std::int64_t v);
  void put_string(const std::string& name, const std::string& s);
  /// Stores an Eigen matrix as a row-major (rows, cols) f64 array.
  void put_matrix(const std::string& name, const Eigen::MatrixXd& m);

  [[nodiscard]] bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  [[nodiscard]] const Entry& entry(const std::string& name) const;
  [[nodiscard]] std::vector<float> get_f32(const std::string& name) const;
  [[nodiscard]] std::vector<double> get_f64(const std::string& name) const;
  [[nodiscard]] std::vector<std::int32_t> get_i32(const std::string& name) const;
  [[nodiscard]] std::vector<std::uint8_t> get_u8(const std::string& name) const;
  [[nodiscard]] std::int64_t get_i64(const std::string& name) const;
  [[nodiscard]] std::string get_string(const std::string& name) const;
  [[nodiscard]] Eigen::MatrixXd get_matrix(const std::string& name) const;

  [[nodiscard]] std::vector<std::string> names() const;
  [[nodiscard]] const std::map<std::string, Entry>& entries() const { return entries_; }

  void save(const std::filesystem::path& path) const;
  static Archive load(const std::filesystem::path& path);

 private:
  template <typename T>
  void put_raw(const std::string& name, DType dtype, const std::vector<T>& v, std::vector<std::uint64_t> dims);
  template <typename T>
  std::vector<T> get_raw(const std::string& name, DType dtype) const;

  std::map<std::string, Entry> entries_;
};

/// 64-bit FNV-1a digest rendered as 16 hex characters.
std::string fnv1a_hex(const std::string& bytes);

}  // namespace ctxssl
