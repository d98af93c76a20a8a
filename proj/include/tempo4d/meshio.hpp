// Copyright 2026 The Tempo4D Authors
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

#include <fnmatch.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "tempo4d/errors.hpp"

namespace tempo4d {

using Vec3 = std::array<double, 3>;
using Face = std::array<std::uint32_t, 3>;

struct MeshFrame {
  std::vector<Vec3> vertices;
  std::vector<Face> faces;

  // Throws unless every face index is in range and no face repeats a vertex.
  void validate() const {
    for (std::size_t f = 0; f < faces.size(); ++f) {
      const auto& fc = faces[f];
      for (auto i : fc) {
        if (i >= vertices.size()) {
          throw InputError("face " + std::to_string(f) + " references vertex " + std::to_string(i) + " of " +
                           std::to_string(vertices.size()));
        }
      }
      if (fc[0] == fc[1] || fc[1] == fc[2] || fc[0] == fc[2]) {
        throw InputError("face " + std::to_string(f) + " repeats a vertex index");
      }
    }
  }
};

struct Bounds {
  Vec3 lo{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
          std::numeric_limits<double>::infinity()};
  Vec3 hi{-std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity(),
          -std::numeric_limits<double>::infinity()};

  void extend(const Vec3& p) {
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], p[a]);
      hi[a] = std::max(hi[a], p[a]);
    }
  }
  Vec3 center() const { return {(lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, (lo[2] + hi[2]) / 2}; }
  Vec3 extent() const { return {hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]}; }
  double max_extent() const {
    const auto e = extent();
    return std::max({e[0], e[1], e[2]});
  }
};

inline Bounds bounds_of(const MeshFrame& m) {
  Bounds b;
  for (const auto& v : m.vertices) b.extend(v);
  return b;
}

struct NormalizationRecord {
  double rest_scale = 1.0;             // stage 1
  std::vector<Vec3> frame_offsets;     // stage 2, in stage-1 units
  double sequence_scale = 1.0;         // stage 3
  std::size_t rest_frame = 0;
  std::string centering = "bbox";
};

inline void to_json(nlohmann::json& j, const NormalizationRecord& r) {
  j = nlohmann::json{{"rest_scale", r.rest_scale},
                     {"frame_offsets", r.frame_offsets},
                     {"sequence_scale", r.sequence_scale},
                     {"rest_frame", r.rest_frame},
                     {"centering", r.centering}};
}

inline void from_json(const nlohmann::json& j, NormalizationRecord& r) {
  j.at("rest_scale").get_to(r.rest_scale);
  j.at("frame_offsets").get_to(r.frame_offsets);
  j.at("sequence_scale").get_to(r.sequence_scale);
  j.at("rest_frame").get_to(r.rest_frame);
  j.at("centering").get_to(r.centering);
}

struct MeshSequence {
  std::vector<MeshFrame> frames;
  std::optional<double> frame_rate;
  std::optional<NormalizationRecord> normalization;

  std::size_t size() const { return frames.size(); }
};

// ---------------------------------------------------------------------------
// OBJ

// Reads v/f records; faces may use 1-based or negative indices with /vt/vn
// suffixes. Polygons with more than three vertices are fan-triangulated.
inline MeshFrame parse_obj(std::istream& in, const std::string& name) {
  MeshFrame mesh;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag) || tag[0] == '#') continue;
    if (tag == "v") {
      Vec3 p;
      if (!(ls >> p[0] >> p[1] >> p[2])) throw ParseError(name, lineno, "bad vertex record");
      mesh.vertices.push_back(p);
    } else if (tag == "f") {
      std::vector<std::uint32_t> idx;
      std::string tok;
      while (ls >> tok) {
        const auto slash = tok.find('/');
        const std::string head = tok.substr(0, slash);
        long long v = 0;
        try {
          std::size_t used = 0;
          v = std::stoll(head, &used);
          if (used != head.size()) throw std::invalid_argument(head);
        } catch (const std::exception&) {
          throw ParseError(name, lineno, "bad face index '" + tok + "'");
        }
        if (v < 0) v = static_cast<long long>(mesh.vertices.size()) + v + 1;
        if (v < 1 || v > static_cast<long long>(mesh.vertices.size())) {
          throw ParseError(name, lineno, "face index " + head + " out of range");
        }
        idx.push_back(static_cast<std::uint32_t>(v - 1));
      }
      if (idx.size() < 3) throw ParseError(name, lineno, "face needs at least three vertices");
      for (std::size_t k = 1; k + 1 < idx.size(); ++k) mesh.faces.push_back({idx[0], idx[k], idx[k + 1]});
    } else if (tag == "vt" || tag == "vn" || tag == "vp" || tag == "o" || tag == "g" || tag == "s" ||
               tag == "usemtl" || tag == "mtllib" || tag == "l") {
      continue;
    } else {
      throw ParseError(name, lineno, "unknown record '" + tag + "'");
    }
  }
  return mesh;
}

inline MeshFrame load_obj(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return parse_obj(in, path.string());
}

inline void write_obj(std::ostream& out, const MeshFrame& mesh) {
  char buf[128];
  for (const auto& v : mesh.vertices) {
    std::snprintf(buf, sizeof(buf), "v %.6f %.6f %.6f\n", v[0], v[1], v[2]);
    out << buf;
  }
  for (const auto& f : mesh.faces) out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
}

inline void save_obj(const std::filesystem::path& path, const MeshFrame& mesh) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  write_obj(out, mesh);
  if (!out) throw IoError("write failed for " + path.string());
}

// Frames are the files matching `pattern` (shell glob), in filename order.
inline MeshSequence load_sequence(const std::filesystem::path& dir, const std::string& pattern = "*.obj") {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw InputError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto name = e.path().filename().string();
    if (fnmatch(pattern.c_str(), name.c_str(), 0) == 0) files.push_back(e.path());
  }
  if (files.empty()) throw InputError("no files matching '" + pattern + "' in " + dir.string());
  std::sort(files.begin(), files.end(), [](const fs::path& a, const fs::path& b) {
    return a.filename().string() < b.filename().string();
  });
  MeshSequence seq;
  for (const auto& f : files) seq.frames.push_back(load_obj(f));
  const auto rec = dir / "normalization.json";
  if (fs::exists(rec)) {
    std::ifstream in(rec);
    seq.normalization = nlohmann::json::parse(in).get<NormalizationRecord>();
  }
  return seq;
}

inline std::string frame_filename(std::size_t index, std::size_t count) {
  const std::size_t digits = std::max<std::size_t>(3, std::to_string(count > 0 ? count - 1 : 0).size());
  std::string num = std::to_string(index);
  return "frame_" + std::string(digits - std::min(digits, num.size()), '0') + num + ".obj";
}

// One OBJ per frame (frame_000.obj, ...); normalization.json if present.
inline std::size_t save_sequence(const MeshSequence& seq, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  for (std::size_t i = 0; i < seq.frames.size(); ++i) {
    if (seq.frames[i].vertices.empty()) throw DegenerateMeshError("frame " + std::to_string(i) + " has no vertices");
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  for (std::size_t i = 0; i < seq.frames.size(); ++i) {
    save_obj(dir / frame_filename(i, seq.frames.size()), seq.frames[i]);
  }
  if (seq.normalization) {
    std::ofstream out(dir / "normalization.json");
    if (!out) throw IoError("cannot write normalization.json in " + dir.string());
    out << nlohmann::json(*seq.normalization).dump(2) << '\n';
  }
  return seq.frames.size();
}

// ---------------------------------------------------------------------------
// Normalization

enum class Centering { kBoundingBox, kCentroid };

inline Vec3 frame_center(const MeshFrame& m, Centering mode) {
  if (mode == Centering::kBoundingBox) return bounds_of(m).center();
  Vec3 c{0, 0, 0};
  for (const auto& v : m.vertices)
    for (int a = 0; a < 3; ++a) c[a] += v[a];
  for (auto& x : c) x /= static_cast<double>(m.vertices.size());
  return c;
}

struct NormalizedSequence {
  MeshSequence sequence;
  NormalizationRecord record;
};

// 1. scale by 1/max-extent of the rest pose bounding box (rest pose fits a
//    unit cube); 2. remove each frame's translation; 3. one uniform scale so
//    the union of all frames spans [-1, 1] on its largest axis.
inline NormalizedSequence normalize_sequence(const MeshSequence& seq, std::size_t rest_frame = 0,
                                             Centering centering = Centering::kBoundingBox) {
  if (seq.frames.empty()) throw InputError("empty mesh sequence");
  if (rest_frame >= seq.frames.size()) {
    throw ContractError("rest frame " + std::to_string(rest_frame) + " outside sequence of " +
                        std::to_string(seq.frames.size()));
  }
  for (std::size_t i = 0; i < seq.frames.size(); ++i) {
    if (seq.frames[i].vertices.empty()) throw DegenerateMeshError("frame " + std::to_string(i) + " has no vertices");
  }
  const double rest_extent = bounds_of(seq.frames[rest_frame]).max_extent();
  if (!(rest_extent > 0.0)) throw DegenerateMeshError("rest pose has zero extent");

  NormalizationRecord rec;
  rec.rest_frame = rest_frame;
  rec.rest_scale = 1.0 / rest_extent;
  rec.centering = centering == Centering::kBoundingBox ? "bbox" : "centroid";

  MeshSequence out = seq;
  double max_abs = 0.0;
  for (auto& f : out.frames) {
    for (auto& v : f.vertices)
      for (auto& x : v) x *= rec.rest_scale;
    const Vec3 c = frame_center(f, centering);
    rec.frame_offsets.push_back(c);
    for (auto& v : f.vertices) {
      for (int a = 0; a < 3; ++a) {
        v[a] -= c[a];
        max_abs = std::max(max_abs, std::abs(v[a]));
      }
    }
  }
  if (!(max_abs > 0.0)) throw DegenerateMeshError("sequence collapses to a point");
  rec.sequence_scale = 1.0 / max_abs;
  for (auto& f : out.frames)
    for (auto& v : f.vertices)
      for (auto& x : v) x *= rec.sequence_scale;
  out.normalization = rec;
  return {std::move(out), std::move(rec)};
}

inline MeshSequence denormalize_sequence(const MeshSequence& seq, const NormalizationRecord& rec) {
  if (rec.frame_offsets.size() != seq.frames.size()) {
    throw InputError("normalization record covers " + std::to_string(rec.frame_offsets.size()) + " frames, sequence has " +
                     std::to_string(seq.frames.size()));
  }
  MeshSequence out = seq;
  out.normalization.reset();
  for (std::size_t i = 0; i < out.frames.size(); ++i) {
    for (auto& v : out.frames[i].vertices) {
      for (int a = 0; a < 3; ++a) v[a] = (v[a] / rec.sequence_scale + rec.frame_offsets[i][a]) / rec.rest_scale;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Primitives

// Unit icosphere: 10 * 4^s + 2 vertices, outward-facing triangles.
inline MeshFrame make_icosphere(std::size_t subdivisions) {
  const double p = (1.0 + std::sqrt(5.0)) / 2.0;
  MeshFrame m;
  m.vertices = {{-1, p, 0}, {1, p, 0}, {-1, -p, 0}, {1, -p, 0}, {0, -1, p}, {0, 1, p},
                {0, -1, -p}, {0, 1, -p}, {p, 0, -1}, {p, 0, 1}, {-p, 0, -1}, {-p, 0, 1}};
  m.faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
             {11, 10, 2}, {10, 7, 6}, {7, 1, 8},  {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
             {3, 8, 9},  {4, 9, 5},  {2, 4, 11},  {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
  auto unit = [](Vec3 v) {
    const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    return Vec3{v[0] / n, v[1] / n, v[2] / n};
  };
  for (auto& v : m.vertices) v = unit(v);
  for (std::size_t s = 0; s < subdivisions; ++s) {
    std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint32_t> mid;
    auto midpoint = [&](std::uint32_t a, std::uint32_t b) {
      const auto key = std::minmax(a, b);
      auto it = mid.find(key);
      if (it != mid.end()) return it->second;
      const auto& va = m.vertices[a];
      const auto& vb = m.vertices[b];
      m.vertices.push_back(unit({va[0] + vb[0], va[1] + vb[1], va[2] + vb[2]}));
      const auto idx = static_cast<std::uint32_t>(m.vertices.size() - 1);
      mid.emplace(key, idx);
      return idx;
    };
    std::vector<Face> next;
    next.reserve(m.faces.size() * 4);
    for (const auto& f : m.faces) {
      const auto a = midpoint(f[0], f[1]), b = midpoint(f[1], f[2]), c = midpoint(f[2], f[0]);
      next.push_back({f[0], a, c});
      next.push_back({f[1], b, a});
      next.push_back({f[2], c, b});
      next.push_back({a, b, c});
    }
    m.faces = std::move(next);
  }
  return m;
}

inline MeshFrame make_ellipsoid(const Vec3& center, const Vec3& semi_axes, std::size_t subdivisions = 2) {
  auto m = make_icosphere(subdivisions);
  for (auto& v : m.vertices)
    for (int a = 0; a < 3; ++a) v[a] = center[a] + semi_axes[a] * v[a];
  return m;
}

}  // namespace tempo4d
