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

#include "ctxssl/io.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ctxssl/error.hpp"

namespace ctxssl {
namespace {

constexpr int kHeaderSize = 348;
constexpr int kExtensionCodeComment = 6;
constexpr const char* kGeometryTag = "ctxssl-geometry ";

enum NiftiType : std::int16_t {
  kUInt8 = 2,
  kInt16 = 4,
  kInt32 = 8,
  kFloat32 = 16,
  kFloat64 = 64,
  kInt8 = 256,
  kUInt16 = 512,
  kUInt32 = 768,
};

template <typename T>
T read_at(const std::vector<unsigned char>& buf, std::size_t off, bool swap) {
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  if (swap) {
    auto* b = reinterpret_cast<unsigned char*>(&v);
    std::reverse(b, b + sizeof(T));
  }
  return v;
}

template <typename T>
void write_at(std::vector<unsigned char>& buf, std::size_t off, T v) {
  static_assert(std::endian::native == std::endian::little);
  std::memcpy(buf.data() + off, &v, sizeof(T));
}

std::vector<unsigned char> slurp(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("missing file: " + path.string());
  gzFile f = gzopen(path.c_str(), "rb");
  if (f == nullptr) throw IoError("cannot open: " + path.string());
  std::vector<unsigned char> out;
  unsigned char chunk[1 << 16];
  int n = 0;
  while ((n = gzread(f, chunk, sizeof(chunk))) > 0) out.insert(out.end(), chunk, chunk + n);
  const bool failed = n < 0;
  gzclose(f);
  if (failed) throw IoError("malformed header: corrupt compressed stream in " + path.string());
  return out;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

template <typename T>
void convert(const std::vector<unsigned char>& buf, std::size_t off, std::size_t n, bool swap,
             std::vector<float>& out) {
  out.resize(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<float>(read_at<T>(buf, off + i * sizeof(T), swap));
}

}  // namespace

Volume load_volume(const std::filesystem::path& path) {
  const auto buf = slurp(path);
  if (buf.size() < kHeaderSize) throw IoError("malformed header: file too short: " + path.string());
  bool swap = false;
  if (read_at<std::int32_t>(buf, 0, false) != kHeaderSize) {
    swap = true;
    if (read_at<std::int32_t>(buf, 0, true) != kHeaderSize)
      throw IoError("malformed header: sizeof_hdr != 348 in " + path.string());
  }
  if (std::memcmp(buf.data() + 344, "n+1\0", 4) != 0)
    throw IoError("malformed header: not a single-file NIfTI-1 image: " + path.string());

  std::int16_t dim[8];
  for (int i = 0; i < 8; ++i) dim[i] = read_at<std::int16_t>(buf, 40 + 2 * i, swap);
  if (dim[0] < 3 || dim[0] > 7) throw IoError("non-3D data: " + path.string());
  for (int i = 4; i <= dim[0]; ++i) {
    if (dim[i] > 1) throw IoError("non-3D data: " + path.string());
  }
  Shape3 shape{dim[1], dim[2], dim[3]};
  if (shape[0] <= 0 || shape[1] <= 0 || shape[2] <= 0)
    throw IoError("malformed header: non-positive dimension in " + path.string());

  const auto datatype = read_at<std::int16_t>(buf, 70, swap);
  float pixdim[8];
  for (int i = 0; i < 8; ++i) pixdim[i] = read_at<float>(buf, 76 + 4 * i, swap);
  const float vox_offset = read_at<float>(buf, 108, swap);
  const float slope = read_at<float>(buf, 112, swap);
  const float inter = read_at<float>(buf, 116, swap);
  const auto qform_code = read_at<std::int16_t>(buf, 252, swap);
  const auto sform_code = read_at<std::int16_t>(buf, 254, swap);

  Volume vol;
  vol.shape = shape;
  if (sform_code > 0) {
    for (int a = 0; a < 3; ++a) {
      vol.spacing[a] = std::abs(read_at<float>(buf, 280 + 16 * a + 4 * a, swap));
      vol.origin[a] = read_at<float>(buf, 280 + 16 * a + 12, swap);
    }
  } else {
    for (int a = 0; a < 3; ++a) {
      vol.spacing[a] = std::abs(pixdim[a + 1]);
      vol.origin[a] = qform_code > 0 ? read_at<float>(buf, 268 + 4 * a, swap) : 0.0;
    }
  }

  // Extensions: exact double geometry written by save_volume.
  if (buf.size() > kHeaderSize + 4 && buf[kHeaderSize] != 0) {
    std::size_t off = kHeaderSize + 4;
    while (off + 8 <= static_cast<std::size_t>(vox_offset) && off + 8 <= buf.size()) {
      const auto esize = read_at<std::int32_t>(buf, off, swap);
      const auto ecode = read_at<std::int32_t>(buf, off + 4, swap);
      if (esize < 8 || off + esize > buf.size()) throw IoError("malformed header: bad extension size");
      if (ecode == kExtensionCodeComment) {
        std::string text(reinterpret_cast<const char*>(buf.data() + off + 8), esize - 8);
        text = text.c_str();  // strip padding
        if (text.rfind(kGeometryTag, 0) == 0) {
          auto j = nlohmann::json::parse(text.substr(std::strlen(kGeometryTag)), nullptr, false);
          if (!j.is_discarded() && j.contains("spacing") && j.contains("origin")) {
            Eigen::Vector3d sp, org;
            for (int a = 0; a < 3; ++a) {
              sp[a] = j["spacing"][a].get<double>();
              org[a] = j["origin"][a].get<double>();
            }
            // Only trust the extension when it agrees with the float header.
            bool consistent = true;
            for (int a = 0; a < 3; ++a) {
              consistent &= static_cast<float>(sp[a]) == static_cast<float>(vol.spacing[a]);
              consistent &= static_cast<float>(org[a]) == static_cast<float>(vol.origin[a]);
            }
            if (consistent) {
              vol.spacing = sp;
              vol.origin = org;
            }
          }
        }
      }
      off += esize;
    }
  }

  const std::size_t n = vol.voxel_count();
  const auto data_off = static_cast<std::size_t>(vox_offset);
  if (vox_offset < kHeaderSize) throw IoError("malformed header: vox_offset < 348");
  std::size_t elem = 0;
  switch (datatype) {
    case kUInt8: case kInt8: elem = 1; break;
    case kInt16: case kUInt16: elem = 2; break;
    case kInt32: case kUInt32: case kFloat32: elem = 4; break;
    case kFloat64: elem = 8; break;
    default: throw IoError("malformed header: unsupported datatype " + std::to_string(datatype));
  }
  if (data_off + n * elem > buf.size()) throw IoError("malformed header: truncated image data in " + path.string());
  switch (datatype) {
    case kUInt8: convert<std::uint8_t>(buf, data_off, n, swap, vol.data); break;
    case kInt8: convert<std::int8_t>(buf, data_off, n, swap, vol.data); break;
    case kInt16: convert<std::int16_t>(buf, data_off, n, swap, vol.data); break;
    case kUInt16: convert<std::uint16_t>(buf, data_off, n, swap, vol.data); break;
    case kInt32: convert<std::int32_t>(buf, data_off, n, swap, vol.data); break;
    case kUInt32: convert<std::uint32_t>(buf, data_off, n, swap, vol.data); break;
    case kFloat32: convert<float>(buf, data_off, n, swap, vol.data); break;
    case kFloat64: convert<double>(buf, data_off, n, swap, vol.data); break;
    default: break;
  }
  if (slope != 0.0F && std::isfinite(slope) && (slope != 1.0F || inter != 0.0F)) {
    for (auto& v : vol.data) v = v * slope + inter;
  }
  vol.validate();
  return vol;
}

void save_volume(const Volume& volume, const std::filesystem::path& path) {
  volume.validate();
  for (int a = 0; a < 3; ++a) {
    if (volume.shape[a] > 32767) throw ContractError("dimension too large for NIfTI-1");
  }

  nlohmann::json geom;
  geom["spacing"] = {volume.spacing[0], volume.spacing[1], volume.spacing[2]};
  geom["origin"] = {volume.origin[0], volume.origin[1], volume.origin[2]};
  std::string ext_text = std::string(kGeometryTag) + geom.dump();
  std::size_t esize = 8 + ext_text.size() + 1;
  esize = (esize + 15) / 16 * 16;

  const std::size_t vox_offset = kHeaderSize + 4 + esize;
  std::vector<unsigned char> buf(vox_offset + volume.voxel_count() * sizeof(float), 0);
  write_at<std::int32_t>(buf, 0, kHeaderSize);
  write_at<std::int16_t>(buf, 40, 3);
  for (int a = 0; a < 3; ++a) write_at<std::int16_t>(buf, 42 + 2 * a, static_cast<std::int16_t>(volume.shape[a]));
  for (int i = 4; i < 8; ++i) write_at<std::int16_t>(buf, 40 + 2 * i, 1);
  write_at<std::int16_t>(buf, 70, kFloat32);
  write_at<std::int16_t>(buf, 72, 32);
  write_at<float>(buf, 76, 1.0F);  // qfac
  for (int a = 0; a < 3; ++a) write_at<float>(buf, 80 + 4 * a, static_cast<float>(volume.spacing[a]));
  write_at<float>(buf, 108, static_cast<float>(vox_offset));
  write_at<float>(buf, 112, 1.0F);
  buf[123] = 2;  // mm
  write_at<std::int16_t>(buf, 252, 1);
  write_at<std::int16_t>(buf, 254, 1);
  for (int a = 0; a < 3; ++a) {
    write_at<float>(buf, 268 + 4 * a, static_cast<float>(volume.origin[a]));
    write_at<float>(buf, 280 + 16 * a + 4 * a, static_cast<float>(volume.spacing[a]));
    write_at<float>(buf, 280 + 16 * a + 12, static_cast<float>(volume.origin[a]));
  }
  std::memcpy(buf.data() + 344, "n+1\0", 4);
  buf[kHeaderSize] = 1;
  write_at<std::int32_t>(buf, kHeaderSize + 4, static_cast<std::int32_t>(esize));
  write_at<std::int32_t>(buf, kHeaderSize + 8, kExtensionCodeComment);
  std::memcpy(buf.data() + kHeaderSize + 12, ext_text.data(), ext_text.size());
  std::memcpy(buf.data() + vox_offset, volume.data.data(), volume.voxel_count() * sizeof(float));

  const std::string name = path.string();
  const char* mode = ends_with(name, ".gz") ? "wb6" : "wbT";
  gzFile f = gzopen(name.c_str(), mode);
  if (f == nullptr) throw IoError("cannot write: " + name);
  std::size_t written = 0;
  bool ok = true;
  while (written < buf.size()) {
    const auto chunk = static_cast<unsigned>(std::min<std::size_t>(buf.size() - written, 1U << 30));
    const int w = gzwrite(f, buf.data() + written, chunk);
    if (w <= 0) {
      ok = false;
      break;
    }
    written += static_cast<std::size_t>(w);
  }
  ok = (gzclose(f) == Z_OK) && ok;
  if (!ok) throw IoError("cannot write: " + name);
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(std::move(cur));
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

bool parse_number(const std::string& s, double& out) {
  if (s.empty()) return false;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (*first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last && std::isfinite(out);
}

std::string quote_csv(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  return out + "\"";
}

}  // namespace

LabelTable load_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("missing file: " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty labels file: " + path.string());
  if (line.rfind("\xEF\xBB\xBF", 0) == 0) line = line.substr(3);
  auto header = split_csv_line(line);
  for (auto& h : header) h = trim(h);
  const auto id_it = std::find(header.begin(), header.end(), "subject_id");
  if (id_it == header.end()) throw IoError("labels file has no subject_id column: " + path.string());
  const auto id_col = static_cast<std::size_t>(id_it - header.begin());

  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> ids;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    auto fields = split_csv_line(line);
    for (auto& f : fields) f = trim(f);
    if (fields.size() > header.size()) throw IoError("labels row has more fields than header: " + line);
    fields.resize(header.size());
    const std::string& id = fields[id_col];
    if (id.empty()) throw IoError("labels row with empty subject_id");
    if (!seen.insert(id).second) throw IoError("duplicate subject_id in labels: " + id);
    ids.push_back(id);
    cells.push_back(std::move(fields));
  }

  LabelTable table;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c == id_col) continue;
    table.columns.push_back(header[c]);
    bool numeric = true;
    for (const auto& row : cells) {
      double v = 0;
      if (!row[c].empty() && !parse_number(row[c], v)) {
        numeric = false;
        break;
      }
    }
    for (std::size_t r = 0; r < cells.size(); ++r) {
      const std::string& s = cells[r][c];
      LabelValue value;
      if (s.empty()) {
        value = LabelValue::missing();
      } else if (numeric) {
        double v = 0;
        parse_number(s, v);
        value = LabelValue::of(v);
      } else {
        value = LabelValue::of(s);
      }
      table.rows[ids[r]][header[c]] = std::move(value);
    }
  }
  for (const auto& id : ids) table.rows[id];  // rows with only an id
  return table;
}

void save_labels(const LabelTable& table, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write: " + path.string());
  out << "subject_id";
  for (const auto& c : table.columns) out << ',' << quote_csv(c);
  out << '\n';
  for (const auto& [id, labels] : table.rows) {
    out << quote_csv(id);
    for (const auto& c : table.columns) {
      const auto it = labels.find(c);
      out << ',' << (it == labels.end() ? std::string() : quote_csv(it->second.str()));
    }
    out << '\n';
  }
  if (!out) throw IoError("cannot write: " + path.string());
}

}  // namespace ctxssl
