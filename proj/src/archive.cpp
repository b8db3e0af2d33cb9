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

#include "ctxssl/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "ctxssl/error.hpp"

namespace ctxssl {
namespace {

static_assert(std::endian::native == std::endian::little, "archive assumes a little-endian host");

std::size_t dtype_size(Archive::DType d) {
  switch (d) {
    case Archive::DType::F32: case Archive::DType::I32: return 4;
    case Archive::DType::F64: case Archive::DType::I64: return 8;
    case Archive::DType::U8: case Archive::DType::Bytes: return 1;
  }
  return 1;
}

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("archive truncated");
  return v;
}

}  // namespace

template <typename T>
void Archive::put_raw(const std::string& name, DType dtype, const std::vector<T>& v,
                      std::vector<std::uint64_t> dims) {
  if (dims.empty()) dims = {v.size()};
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  if (n != v.size()) throw ContractError("archive entry '" + name + "': dims do not match element count");
  Entry e;
  e.dtype = dtype;
  e.dims = std::move(dims);
  e.bytes.resize(v.size() * sizeof(T));
  if (!v.empty()) std::memcpy(e.bytes.data(), v.data(), e.bytes.size());
  entries_[name] = std::move(e);
}

template <typename T>
std::vector<T> Archive::get_raw(const std::string& name, DType dtype) const {
  const Entry& e = entry(name);
  if (e.dtype != dtype) throw IoError("archive entry '" + name + "' has unexpected dtype");
  std::vector<T> v(e.bytes.size() / sizeof(T));
  if (!v.empty()) std::memcpy(v.data(), e.bytes.data(), v.size() * sizeof(T));
  return v;
}

void Archive::put_f32(const std::string& n, const std::vector<float>& v, std::vector<std::uint64_t> d) {
  put_raw(n, DType::F32, v, std::move(d));
}
void Archive::put_f64(const std::string& n, const std::vector<double>& v, std::vector<std::uint64_t> d) {
  put_raw(n, DType::F64, v, std::move(d));
}
void Archive::put_i32(const std::string& n, const std::vector<std::int32_t>& v, std::vector<std::uint64_t> d) {
  put_raw(n, DType::I32, v, std::move(d));
}
void Archive::put_u8(const std::string& n, const std::vector<std::uint8_t>& v, std::vector<std::uint64_t> d) {
  put_raw(n, DType::U8, v, std::move(d));
}
void Archive::put_i64(const std::string& n, std::int64_t v) {
  put_raw(n, DType::I64, std::vector<std::int64_t>{v}, {1});
}
void Archive::put_string(const std::string& n, const std::string& s) {
  put_raw(n, DType::Bytes, std::vector<char>(s.begin(), s.end()), {s.size()});
}
void Archive::put_matrix(const std::string& n, const Eigen::MatrixXd& m) {
  std::vector<double> v(static_cast<std::size_t>(m.size()));
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(v.data(), m.rows(), m.cols()) = m;
  put_raw(n, DType::F64, v, {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())});
}

const Archive::Entry& Archive::entry(const std::string& name) const {
  const auto it = entries_.find(name);
  if (it == entries_.end()) throw IoError("archive has no entry '" + name + "'");
  return it->second;
}

std::vector<float> Archive::get_f32(const std::string& n) const { return get_raw<float>(n, DType::F32); }
std::vector<double> Archive::get_f64(const std::string& n) const { return get_raw<double>(n, DType::F64); }
std::vector<std::int32_t> Archive::get_i32(const std::string& n) const { return get_raw<std::int32_t>(n, DType::I32); }
std::vector<std::uint8_t> Archive::get_u8(const std::string& n) const { return get_raw<std::uint8_t>(n, DType::U8); }
std::int64_t Archive::get_i64(const std::string& n) const {
  const auto v = get_raw<std::int64_t>(n, DType::I64);
  if (v.size() != 1) throw IoError("archive entry '" + n + "' is not a scalar");
  return v[0];
}
std::string Archive::get_string(const std::string& n) const {
  const auto v = get_raw<char>(n, DType::Bytes);
  return {v.begin(), v.end()};
}
Eigen::MatrixXd Archive::get_matrix(const std::string& n) const {
  const Entry& e = entry(n);
  if (e.dims.size() != 2) throw IoError("archive entry '" + n + "' is not a matrix");
  const auto v = get_f64(n);
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      v.data(), static_cast<Eigen::Index>(e.dims[0]), static_cast<Eigen::Index>(e.dims[1]));
}

std::vector<std::string> Archive::names() const {
  std::vector<std::string> out;
  for (const auto& [k, _] : entries_) out.push_back(k);
  return out;
}

void Archive::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write: " + path.string());
  os.write("CTXA", 4);
  write_pod<std::uint32_t>(os, kVersion);
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& [name, e] : entries_) {
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(e.dtype));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(e.dims.size()));
    for (auto d : e.dims) write_pod<std::uint64_t>(os, d);
    write_pod<std::uint64_t>(os, e.bytes.size());
    os.write(reinterpret_cast<const char*>(e.bytes.data()), static_cast<std::streamsize>(e.bytes.size()));
  }
  if (!os) throw IoError("cannot write: " + path.string());
}

Archive Archive::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("missing file: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "CTXA", 4) != 0) throw IoError("not an archive: " + path.string());
  const auto version = read_pod<std::uint32_t>(is);
  if (version != kVersion) throw IoError("unsupported archive version " + std::to_string(version));
  const auto count = read_pod<std::uint32_t>(is);
  Archive a;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = read_pod<std::uint32_t>(is);
    if (len > (1U << 16)) throw IoError("archive entry name too long");
    std::string name(len, '\0');
    is.read(name.data(), len);
    Entry e;
    const auto dt = read_pod<std::uint8_t>(is);
    if (dt > static_cast<std::uint8_t>(DType::Bytes)) throw IoError("archive entry has unknown dtype");
    e.dtype = static_cast<DType>(dt);
    const auto ndim = read_pod<std::uint32_t>(is);
    if (ndim > 16) throw IoError("archive entry has too many dimensions");
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      e.dims.push_back(read_pod<std::uint64_t>(is));
      n *= e.dims.back();
    }
    const auto nbytes = read_pod<std::uint64_t>(is);
    if (nbytes != n * dtype_size(e.dtype)) throw IoError("archive entry '" + name + "' size mismatch");
    e.bytes.resize(nbytes);
    is.read(reinterpret_cast<char*>(e.bytes.data()), static_cast<std::streamsize>(nbytes));
    if (!is) throw IoError("archive truncated: " + path.string());
    a.entries_[name] = std::move(e);
  }
  return a;
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace ctxssl
