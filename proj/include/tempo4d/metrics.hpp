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

// Frame-level and temporal metrics for predicted vs ground-truth mesh
// sequences: Chamfer distance, precision/recall/F-score, temporal Chamfer
// delta, temporal occupancy KL, and feature cosine / DTW.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "tempo4d/errors.hpp"
#include "tempo4d/meshio.hpp"

namespace tempo4d::metrics {

using PointCloud = std::vector<Vec3>;

inline double distance(const Vec3& a, const Vec3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

inline double triangle_area(const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 u{b[0] - a[0], b[1] - a[1], b[2] - a[2]};
  const Vec3 v{c[0] - a[0], c[1] - a[1], c[2] - a[2]};
  const Vec3 x{u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]};
  return 0.5 * std::sqrt(x[0] * x[0] + x[1] * x[1] + x[2] * x[2]);
}

struct SurfaceSample {
  PointCloud points;
  std::vector<std::uint32_t> faces;  // source triangle of each point
};

// Area-proportional triangle choice, then
// p = (1 - sqrt(r1)) a + sqrt(r1)(1 - r2) b + sqrt(r1) r2 c.
inline SurfaceSample sample_surface_with_faces(const MeshFrame& mesh, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw InputError("sample_surface: n must be >= 1");
  mesh.validate();
  std::vector<double> cdf(mesh.faces.size());
  double total = 0.0;
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    const auto& fc = mesh.faces[f];
    total += triangle_area(mesh.vertices[fc[0]], mesh.vertices[fc[1]], mesh.vertices[fc[2]]);
    cdf[f] = total;
  }
  if (!(total > 0.0)) throw DegenerateMeshError("mesh has zero surface area");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  SurfaceSample out;
  out.points.reserve(n);
  out.faces.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double pick = uni(rng) * total;
    auto it = std::upper_bound(cdf.begin(), cdf.end(), pick);
    if (it == cdf.end()) --it;
    const auto f = static_cast<std::uint32_t>(it - cdf.begin());
    const double r1 = std::sqrt(uni(rng));
    const double r2 = uni(rng);
    const auto& fc = mesh.faces[f];
    const auto& a = mesh.vertices[fc[0]];
    const auto& b = mesh.vertices[fc[1]];
    const auto& c = mesh.vertices[fc[2]];
    const double wa = 1.0 - r1, wb = r1 * (1.0 - r2), wc = r1 * r2;
    out.points.push_back({wa * a[0] + wb * b[0] + wc * c[0], wa * a[1] + wb * b[1] + wc * c[1],
                          wa * a[2] + wb * b[2] + wc * c[2]});
    out.faces.push_back(f);
  }
  return out;
}

inline PointCloud sample_surface(const MeshFrame& mesh, std::size_t n, std::uint64_t seed) {
  return sample_surface_with_faces(mesh, n, seed).points;
}

// ---------------------------------------------------------------------------
// Nearest neighbours

inline constexpr std::size_t kExactSearchLimit = 10000;

namespace detail {

inline std::vector<double> nearest_brute(const PointCloud& from, const PointCloud& to) {
  std::vector<double> out(from.size());
  for (std::size_t i = 0; i < from.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& g : to) {
      const double dx = from[i][0] - g[0], dy = from[i][1] - g[1], dz = from[i][2] - g[2];
      best = std::min(best, dx * dx + dy * dy + dz * dz);
    }
    out[i] = std::sqrt(best);
  }
  return out;
}

// Uniform bucket grid over `to`; ring search with an exact stopping bound.
class BucketGrid {
 public:
  explicit BucketGrid(const PointCloud& pts) : pts_(pts) {
    Bounds b;
    for (const auto& p : pts) b.extend(p);
    lo_ = b.lo;
    const double ext = std::max(b.max_extent(), 1e-12);
    const auto per_axis = static_cast<std::size_t>(std::ceil(std::cbrt(static_cast<double>(pts.size()) / 4.0)));
    cells_ = std::max<std::size_t>(1, per_axis);
    h_ = ext / static_cast<double>(cells_);
    buckets_.assign(cells_ * cells_ * cells_, {});
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const auto c = cell_of(pts[i]);
      buckets_[index(c[0], c[1], c[2])].push_back(static_cast<std::uint32_t>(i));
    }
  }

  double nearest(const Vec3& q) const {
    const auto c = cell_of(q);
    double best2 = std::numeric_limits<double>::infinity();
    const long n = static_cast<long>(cells_);
    for (long r = 0;; ++r) {
      for (long x = c[0] - r; x <= c[0] + r; ++x) {
        if (x < 0 || x >= n) continue;
        for (long y = c[1] - r; y <= c[1] + r; ++y) {
          if (y < 0 || y >= n) continue;
          for (long z = c[2] - r; z <= c[2] + r; ++z) {
            if (z < 0 || z >= n) continue;
            if (std::max({std::labs(x - c[0]), std::labs(y - c[1]), std::labs(z - c[2])}) != r) continue;
            for (auto i : buckets_[index(x, y, z)]) {
              const auto& p = pts_[i];
              const double dx = q[0] - p[0], dy = q[1] - p[1], dz = q[2] - p[2];
              best2 = std::min(best2, dx * dx + dy * dy + dz * dz);
            }
          }
        }
      }
      // Distance from q to the complement of the searched box.
      double bound = std::numeric_limits<double>::infinity();
      bool covers_all = true;
      for (int a = 0; a < 3; ++a) {
        const long blo = c[a] - r, bhi = c[a] + r;
        if (blo > 0) {
          covers_all = false;
          bound = std::min(bound, q[a] - (lo_[a] + static_cast<double>(blo) * h_));
        }
        if (bhi < n - 1) {
          covers_all = false;
          bound = std::min(bound, (lo_[a] + static_cast<double>(bhi + 1) * h_) - q[a]);
        }
      }
      if (covers_all) break;
      if (bound > 0 && best2 <= bound * bound) break;
    }
    return std::sqrt(best2);
  }

 private:
  std::array<long, 3> cell_of(const Vec3& p) const {
    std::array<long, 3> c{};
    for (int a = 0; a < 3; ++a) {
      const double f = std::floor((p[a] - lo_[a]) / h_);
      c[a] = std::clamp(static_cast<long>(f), 0L, static_cast<long>(cells_) - 1);
    }
    return c;
  }
  std::size_t index(long x, long y, long z) const {
    return (static_cast<std::size_t>(x) * cells_ + static_cast<std::size_t>(y)) * cells_ + static_cast<std::size_t>(z);
  }

  const PointCloud& pts_;
  Vec3 lo_{};
  double h_ = 1.0;
  std::size_t cells_ = 1;
  std::vector<std::vector<std::uint32_t>> buckets_;
};

}  // namespace detail

// d(p) = min over `to` of ||p - g|| for every p in `from`. Exact either way;
// a bucket grid takes over past kExactSearchLimit points.
inline std::vector<double> nearest_distances(const PointCloud& from, const PointCloud& to) {
  if (from.empty() || to.empty()) throw InputError("nearest neighbour search on an empty cloud");
  if (from.size() <= kExactSearchLimit && to.size() <= kExactSearchLimit) return detail::nearest_brute(from, to);
  detail::BucketGrid grid(to);
  std::vector<double> out(from.size());
  for (std::size_t i = 0; i < from.size(); ++i) out[i] = grid.nearest(from[i]);
  return out;
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (auto x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double chamfer(const PointCloud& p, const PointCloud& g) {
  if (p.empty() || g.empty()) throw InputError("chamfer on an empty cloud");
  return 0.5 * (mean_of(nearest_distances(p, g)) + mean_of(nearest_distances(g, p)));
}

struct FScore {
  double precision = 0.0;
  double recall = 0.0;
  double f = 0.0;
};

inline FScore f_score(const PointCloud& p, const PointCloud& g, double tau) {
  if (p.empty() || g.empty()) throw InputError("f_score on an empty cloud");
  if (!(tau > 0.0)) throw ContractError("f_score threshold must be positive");
  const auto dp = nearest_distances(p, g);
  const auto dg = nearest_distances(g, p);
  FScore s;
  s.precision = static_cast<double>(std::count_if(dp.begin(), dp.end(), [tau](double d) { return d < tau; })) /
                static_cast<double>(dp.size());
  s.recall = static_cast<double>(std::count_if(dg.begin(), dg.end(), [tau](double d) { return d < tau; })) /
             static_cast<double>(dg.size());
  s.f = (s.precision + s.recall > 0.0) ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

// CD between frames t and t+1, t = 0 .. T-2.
inline std::vector<double> consecutive_chamfer(const std::vector<PointCloud>& seq) {
  std::vector<double> out;
  for (std::size_t t = 0; t + 1 < seq.size(); ++t) out.push_back(chamfer(seq[t], seq[t + 1]));
  return out;
}

inline double delta_cd(const std::vector<PointCloud>& pred, const std::vector<PointCloud>& gt) {
  if (pred.size() != gt.size()) {
    throw InputError("delta_cd: sequence lengths differ (" + std::to_string(pred.size()) + " vs " +
                     std::to_string(gt.size()) + ")");
  }
  if (pred.size() < 2) throw InputError("delta_cd needs at least two frames");
  const auto cp = consecutive_chamfer(pred);
  const auto cg = consecutive_chamfer(gt);
  double s = 0.0;
  for (std::size_t t = 0; t < cp.size(); ++t) s += std::abs(cp[t] - cg[t]);
  return s / static_cast<double>(cp.size());
}

// ---------------------------------------------------------------------------
// Occupancy

struct OccupancyGrid {
  std::size_t resolution = 32;
  Bounds box;
  std::vector<double> counts;  // resolution^3

  double total() const {
    double s = 0.0;
    for (auto c : counts) s += c;
    return s;
  }

  // p(i) = (o(i) + eps) / sum_i (o(i) + eps)
  std::vector<double> normalized(double eps) const {
    const double z = total() + eps * static_cast<double>(counts.size());
    std::vector<double> p(counts.size());
    for (std::size_t i = 0; i < counts.size(); ++i) p[i] = (counts[i] + eps) / z;
    return p;
  }
};

inline OccupancyGrid voxelize(const PointCloud& cloud, const Bounds& box, std::size_t k) {
  if (k == 0) throw ContractError("occupancy resolution must be >= 1");
  OccupancyGrid g;
  g.resolution = k;
  g.box = box;
  g.counts.assign(k * k * k, 0.0);
  const auto ext = box.extent();
  for (const auto& p : cloud) {
    std::size_t idx[3];
    for (int a = 0; a < 3; ++a) {
      const double f = std::floor((p[a] - box.lo[a]) / ext[a] * static_cast<double>(k));
      idx[a] = static_cast<std::size_t>(std::clamp(f, 0.0, static_cast<double>(k - 1)));
    }
    g.counts[(idx[0] * k + idx[1]) * k + idx[2]] += 1.0;
  }
  return g;
}

inline double kl_divergence(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += p[i] * std::log(p[i] / q[i]);
  return s;
}

// Bounding box over every frame of both sequences; zero-extent axes are
// widened by 1e-6 and reported through `warnings`.
inline Bounds global_bounds(const std::vector<PointCloud>& a, const std::vector<PointCloud>& b,
                            std::vector<std::string>* warnings) {
  Bounds box;
  for (const auto* seq : {&a, &b})
    for (const auto& c : *seq)
      for (const auto& p : c) box.extend(p);
  for (int ax = 0; ax < 3; ++ax) {
    if (!(box.hi[ax] - box.lo[ax] > 0.0)) {
      box.lo[ax] -= 0.5e-6;
      box.hi[ax] += 0.5e-6;
      if (warnings) warnings->push_back("occupancy bounding box axis " + std::to_string(ax) + " degenerate; expanded by 1e-6");
    }
  }
  return box;
}

// KL(p_{t+1} || p_t) for each consecutive pair.
inline std::vector<double> occupancy_transitions(const std::vector<PointCloud>& seq, const Bounds& box, std::size_t k,
                                                 double eps) {
  std::vector<std::vector<double>> p;
  for (const auto& c : seq) p.push_back(voxelize(c, box, k).normalized(eps));
  std::vector<double> out;
  for (std::size_t t = 0; t + 1 < p.size(); ++t) out.push_back(kl_divergence(p[t + 1], p[t]));
  return out;
}

inline double occupancy_kl(const std::vector<PointCloud>& pred, const std::vector<PointCloud>& gt, std::size_t k = 32,
                           double eps = 1e-8, std::vector<std::string>* warnings = nullptr) {
  if (pred.size() != gt.size()) throw InputError("occupancy_kl: sequence lengths differ");
  if (pred.size() < 2) throw InputError("occupancy_kl needs at least two frames");
  const Bounds box = global_bounds(pred, gt, warnings);
  const auto kp = occupancy_transitions(pred, box, k, eps);
  const auto kg = occupancy_transitions(gt, box, k, eps);
  double s = 0.0;
  for (std::size_t t = 0; t < kp.size(); ++t) s += std::abs(kp[t] - kg[t]);
  return s / static_cast<double>(kp.size());
}

// ---------------------------------------------------------------------------
// Features

inline constexpr std::size_t kDescriptorDim = 64;
inline constexpr const char* kGeometricEncoderId = "geometric-descriptor-64/v1";

// centroid (3) | bbox extents (3) | covariance eigenvalues, descending (3) |
// radial histogram, 32 bins over [0, 2) (normalized) | height histogram,
// 23 bins over [-2, 2) of y - centroid_y (normalized).
inline std::vector<double> feature_descriptor(const PointCloud& cloud) {
  if (cloud.empty()) throw InputError("feature_descriptor on an empty cloud");
  constexpr std::size_t kRadialBins = 32, kHeightBins = 23;
  const double n = static_cast<double>(cloud.size());
  Eigen::Vector3d c = Eigen::Vector3d::Zero();
  Bounds b;
  for (const auto& p : cloud) {
    c += Eigen::Vector3d(p[0], p[1], p[2]);
    b.extend(p);
  }
  c /= n;
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  std::vector<double> radial(kRadialBins, 0.0), height(kHeightBins, 0.0);
  for (const auto& p : cloud) {
    const Eigen::Vector3d d = Eigen::Vector3d(p[0], p[1], p[2]) - c;
    cov += d * d.transpose();
    const double r = d.norm();
    const auto rb = static_cast<std::size_t>(std::clamp(std::floor(r / 2.0 * kRadialBins), 0.0, kRadialBins - 1.0));
    radial[rb] += 1.0 / n;
    const double hy = (d.y() + 2.0) / 4.0 * kHeightBins;
    const auto hb = static_cast<std::size_t>(std::clamp(std::floor(hy), 0.0, kHeightBins - 1.0));
    height[hb] += 1.0 / n;
  }
  cov /= n;
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov, Eigen::EigenvaluesOnly);
  const Eigen::Vector3d ev = eig.eigenvalues();  // ascending
  const auto ext = b.extent();
  std::vector<double> f;
  f.reserve(kDescriptorDim);
  f.insert(f.end(), {c.x(), c.y(), c.z(), ext[0], ext[1], ext[2], ev[2], ev[1], ev[0]});
  f.insert(f.end(), radial.begin(), radial.end());
  f.insert(f.end(), height.begin(), height.end());
  return f;
}

struct FeatureTrack {
  std::vector<std::vector<double>> frames;  // T x D
  std::string encoder;

  std::size_t dim() const { return frames.empty() ? 0 : frames.front().size(); }
};

// Pluggable per-frame encoder.
struct FeatureEncoder {
  std::string id;
  std::function<std::vector<double>(const PointCloud&)> encode;
};

inline FeatureEncoder geometric_encoder() { return {kGeometricEncoderId, &feature_descriptor}; }

inline FeatureTrack encode_track(const std::vector<PointCloud>& seq, const FeatureEncoder& enc) {
  FeatureTrack t;
  t.encoder = enc.id;
  for (const auto& c : seq) t.frames.push_back(enc.encode(c));
  return t;
}

// D(i,j) = d_ij + min(D(i-1,j), D(i,j-1), D(i-1,j-1)), D(0,0) = 0, other
// borders +inf; returns D(n,m) for an n x m cost matrix (row-major).
inline double dtw(const std::vector<double>& cost, std::size_t n, std::size_t m) {
  if (n == 0 || m == 0 || cost.size() != n * m) throw InputError("dtw: bad cost matrix");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> acc((n + 1) * (m + 1), inf);
  acc[0] = 0.0;
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const double best = std::min({acc[(i - 1) * (m + 1) + j], acc[i * (m + 1) + j - 1], acc[(i - 1) * (m + 1) + j - 1]});
      acc[i * (m + 1) + j] = cost[(i - 1) * m + (j - 1)] + best;
    }
  }
  return acc[n * (m + 1) + m];
}

struct FeatureComparison {
  double cosine = 0.0;
  double dtw = 0.0;
  bool unequal_lengths = false;
};

inline double euclidean(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

inline FeatureComparison temporal_feature_compare(const FeatureTrack& a, const FeatureTrack& b) {
  if (a.frames.empty() || b.frames.empty()) throw InputError("feature track is empty");
  const std::size_t d = a.dim();
  for (const auto* tr : {&a, &b})
    for (const auto& f : tr->frames)
      if (f.size() != d) throw ShapeError("feature tracks disagree on width");
  auto pooled = [d](const FeatureTrack& t) {
    std::vector<double> m(d, 0.0);
    for (const auto& f : t.frames)
      for (std::size_t i = 0; i < d; ++i) m[i] += f[i];
    for (auto& x : m) x /= static_cast<double>(t.frames.size());
    return m;
  };
  const auto ma = pooled(a), mb = pooled(b);
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    dot += ma[i] * mb[i];
    na += ma[i] * ma[i];
    nb += mb[i] * mb[i];
  }
  if (na == 0.0 || nb == 0.0) throw NumericError("cosine undefined for a zero-norm mean feature");
  FeatureComparison out;
  out.cosine = std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
  const std::size_t n = a.frames.size(), m = b.frames.size();
  std::vector<double> cost(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) cost[i * m + j] = euclidean(a.frames[i], b.frames[j]);
  out.dtw = dtw(cost, n, m);
  out.unequal_lengths = n != m;
  return out;
}

// ---------------------------------------------------------------------------
// Orchestration

struct EvalParams {
  std::size_t points = 4096;
  double tau = 0.02;
  std::size_t grid = 32;
  double eps = 1e-8;
  std::uint64_t seed = 0;
};

struct MetricReport {
  double cd = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f_score = 0.0;
  double delta_cd = 0.0;
  double occupancy_kl = 0.0;
  double feature_cosine = 0.0;
  double feature_dtw = 0.0;
  std::size_t frames = 0;
  EvalParams params;
  std::string encoder;
  std::vector<std::string> warnings;
};

inline void to_json(nlohmann::json& j, const MetricReport& r) {
  j = nlohmann::json{
      {"cd", r.cd},
      {"precision", r.precision},
      {"recall", r.recall},
      {"f_score", r.f_score},
      {"delta_cd", r.delta_cd},
      {"occupancy_kl", r.occupancy_kl},
      {"feature_cosine", r.feature_cosine},
      {"feature_dtw", r.feature_dtw},
      {"frames", r.frames},
      {"parameters",
       {{"points_per_frame", r.params.points},
        {"tau", r.params.tau},
        {"occupancy_resolution", r.params.grid},
        {"occupancy_epsilon", r.params.eps},
        {"seed", r.params.seed},
        {"encoder", r.encoder}}},
      {"warnings", r.warnings},
  };
}

// Every frame of both sequences is sampled with the same seed, so identical
// meshes always give identical clouds. Temporal metrics need >= 2 frames and
// are reported as 0 for single-frame sequences with a warning.
inline MetricReport evaluate_sequences(const MeshSequence& pred, const MeshSequence& gt, const EvalParams& params = {},
                                       const FeatureEncoder& encoder = geometric_encoder()) {
  if (pred.size() != gt.size()) {
    throw InputError("frame count mismatch: pred " + std::to_string(pred.size()) + ", gt " + std::to_string(gt.size()));
  }
  if (pred.size() == 0) throw InputError("empty sequences");
  MetricReport r;
  r.params = params;
  r.encoder = encoder.id;
  r.frames = pred.size();
  std::vector<PointCloud> ps, gs;
  for (std::size_t t = 0; t < pred.size(); ++t) {
    ps.push_back(sample_surface(pred.frames[t], params.points, params.seed));
    gs.push_back(sample_surface(gt.frames[t], params.points, params.seed));
  }
  const double inv_t = 1.0 / static_cast<double>(pred.size());
  for (std::size_t t = 0; t < pred.size(); ++t) {
    const auto dp = nearest_distances(ps[t], gs[t]);
    const auto dg = nearest_distances(gs[t], ps[t]);
    r.cd += 0.5 * (mean_of(dp) + mean_of(dg)) * inv_t;
    const double prec = static_cast<double>(std::count_if(dp.begin(), dp.end(), [&](double d) { return d < params.tau; })) /
                        static_cast<double>(dp.size());
    const double rec = static_cast<double>(std::count_if(dg.begin(), dg.end(), [&](double d) { return d < params.tau; })) /
                       static_cast<double>(dg.size());
    r.precision += prec * inv_t;
    r.recall += rec * inv_t;
    r.f_score += (prec + rec > 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0) * inv_t;
  }
  if (pred.size() >= 2) {
    r.delta_cd = delta_cd(ps, gs);
    r.occupancy_kl = occupancy_kl(ps, gs, params.grid, params.eps, &r.warnings);
  } else {
    r.warnings.push_back("single-frame sequences: temporal metrics set to 0");
  }
  const auto cmp = temporal_feature_compare(encode_track(ps, encoder), encode_track(gs, encoder));
  r.feature_cosine = cmp.cosine;
  r.feature_dtw = cmp.dtw;
  return r;
}

}  // namespace tempo4d::metrics
