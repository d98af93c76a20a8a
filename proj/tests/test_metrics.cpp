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

#include <gtest/gtest.h>

#include <functional>

#include "tempo4d/metrics.hpp"
#include "test_util.hpp"

namespace tempo4d {
namespace {

using metrics::PointCloud;
using testing::Gen;

PointCloud random_cloud(Gen& g, std::size_t n, double scale = 1.0) {
  PointCloud c;
  for (std::size_t i = 0; i < n; ++i) c.push_back(g.point(scale));
  return c;
}

PointCloud shifted(PointCloud c, const Vec3& d) {
  for (auto& p : c)
    for (int a = 0; a < 3; ++a) p[a] += d[a];
  return c;
}

double euclid(const Vec3& a, const Vec3& b) {
  return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]));
}

double chamfer_oracle(const PointCloud& p, const PointCloud& g) {
  auto one_way = [](const PointCloud& a, const PointCloud& b) {
    double s = 0.0;
    for (const auto& x : a) {
      double best = INFINITY;
      for (const auto& y : b) best = std::min(best, euclid(x, y));
      s += best;
    }
    return s / static_cast<double>(a.size());
  };
  return 0.5 * (one_way(p, g) + one_way(g, p));
}

// Minimum cost over every monotone path from (0,0) to (n-1,m-1).
double dtw_oracle(const std::vector<double>& cost, std::size_t n, std::size_t m) {
  double best = INFINITY;
  std::function<void(std::size_t, std::size_t, double)> walk = [&](std::size_t i, std::size_t j, double acc) {
    acc += cost[i * m + j];
    if (i == n - 1 && j == m - 1) {
      best = std::min(best, acc);
      return;
    }
    if (i + 1 < n) walk(i + 1, j, acc);
    if (j + 1 < m) walk(i, j + 1, acc);
    if (i + 1 < n && j + 1 < m) walk(i + 1, j + 1, acc);
  };
  walk(0, 0, 0.0);
  return best;
}

TEST(SampleSurface, SingleTriangleContainment) {
  const Vec3 a{0.3, -1, 2}, b{1.5, 0.2, 2.5}, c{-0.4, 0.9, 1.1};
  const MeshFrame tri{{a, b, c}, {{0, 1, 2}}};
  const auto pts = metrics::sample_surface(tri, 2000, 7);
  // Barycentric coordinates by least squares on the triangle's own frame.
  const Vec3 u{b[0] - a[0], b[1] - a[1], b[2] - a[2]}, v{c[0] - a[0], c[1] - a[1], c[2] - a[2]};
  auto dot = [](const Vec3& x, const Vec3& y) { return x[0] * y[0] + x[1] * y[1] + x[2] * y[2]; };
  const double uu = dot(u, u), uv = dot(u, v), vv = dot(v, v), det = uu * vv - uv * uv;
  for (const auto& p : pts) {
    const Vec3 w{p[0] - a[0], p[1] - a[1], p[2] - a[2]};
    const double wu = dot(w, u), wv = dot(w, v);
    const double l1 = (vv * wu - uv * wv) / det, l2 = (uu * wv - uv * wu) / det, l0 = 1.0 - l1 - l2;
    EXPECT_GE(l0, -1e-9);
    EXPECT_GE(l1, -1e-9);
    EXPECT_GE(l2, -1e-9);
    for (int ax = 0; ax < 3; ++ax) EXPECT_NEAR(a[ax] + l1 * u[ax] + l2 * v[ax], p[ax], 1e-9);
  }
}

TEST(SampleSurface, AreaWeightedSelection) {
  // Triangle 0 has area 1.5, triangle 1 has area 0.5.
  const MeshFrame m{{{0, 0, 0}, {3, 0, 0}, {0, 1, 0}, {10, 0, 0}, {11, 0, 0}, {10, 1, 0}}, {{0, 1, 2}, {3, 4, 5}}};
  const auto s = metrics::sample_surface_with_faces(m, 40000, 11);
  const auto first = static_cast<double>(std::count(s.faces.begin(), s.faces.end(), 0u));
  const double ratio = first / (40000.0 - first);
  EXPECT_NEAR(ratio, 3.0, 0.06);
}

TEST(SampleSurface, DeterministicAndGuarded) {
  const auto m = make_icosphere(1);
  EXPECT_EQ(metrics::sample_surface(m, 500, 3), metrics::sample_surface(m, 500, 3));
  EXPECT_NE(metrics::sample_surface(m, 500, 3), metrics::sample_surface(m, 500, 4));
  const MeshFrame flat{{{0, 0, 0}, {1, 0, 0}, {2, 0, 0}}, {{0, 1, 2}}};
  EXPECT_THROW(metrics::sample_surface(flat, 10, 0), DegenerateMeshError);
  EXPECT_THROW(metrics::sample_surface(m, 0, 0), InputError);
}

TEST(Chamfer, Examples) {
  Gen g(1);
  const auto p = random_cloud(g, 40);
  EXPECT_EQ(metrics::chamfer(p, p), 0.0);
  EXPECT_EQ(metrics::chamfer({{0, 0, 0}}, {{1, 0, 0}}), 1.0);
  EXPECT_THROW(metrics::chamfer({}, p), InputError);
}

TEST(Chamfer, MatchesBruteForceAndIsSymmetric) {
  for (int seed = 0; seed < 30; ++seed) {
    Gen g(10 + static_cast<std::uint64_t>(seed));
    const auto p = random_cloud(g, g.size(1, 100)), q = random_cloud(g, g.size(1, 100), 1.5);
    const double c = metrics::chamfer(p, q);
    EXPECT_NEAR(c, chamfer_oracle(p, q), 1e-12);
    EXPECT_NEAR(c, metrics::chamfer(q, p), 1e-12);
  }
}

TEST(Chamfer, BucketGridIsExact) {
  Gen g(2);
  const auto big = random_cloud(g, 12000);
  auto probe = random_cloud(g, 300, 2.0);
  probe.push_back({30, -30, 5});
  const auto fast = metrics::nearest_distances(probe, big);
  const auto slow = metrics::detail::nearest_brute(probe, big);
  ASSERT_EQ(fast.size(), slow.size());
  for (std::size_t i = 0; i < fast.size(); ++i) EXPECT_EQ(fast[i], slow[i]);
}

TEST(FScore, Examples) {
  Gen g(3);
  const auto p = random_cloud(g, 50);
  const auto s = metrics::f_score(p, p, 0.02);
  EXPECT_EQ(s.precision, 1.0);
  EXPECT_EQ(s.recall, 1.0);
  EXPECT_EQ(s.f, 1.0);

  const auto far = metrics::f_score(p, shifted(p, {100, 0, 0}), 0.02);
  EXPECT_EQ(far.precision, 0.0);
  EXPECT_EQ(far.recall, 0.0);
  EXPECT_EQ(far.f, 0.0);

  const PointCloud pred{{0, 0, 0}, {1, 0, 0}, {0.5, 0, 0}, {0, 0.5, 0}};
  const PointCloud gt{{0.01, 0, 0}, {1, 0.01, 0}};
  const auto half = metrics::f_score(pred, gt, 0.02);
  EXPECT_DOUBLE_EQ(half.precision, 0.5);
  EXPECT_DOUBLE_EQ(half.recall, 1.0);
  EXPECT_NEAR(half.f, 2.0 / 3.0, 1e-15);
  EXPECT_THROW(metrics::f_score(p, p, 0.0), ContractError);
}

TEST(FScore, ComponentsInUnitInterval) {
  for (int seed = 0; seed < 30; ++seed) {
    Gen g(40 + static_cast<std::uint64_t>(seed));
    const auto s = metrics::f_score(random_cloud(g, g.size(1, 60), 0.05), random_cloud(g, g.size(1, 60), 0.05), 0.02);
    for (double x : {s.precision, s.recall, s.f}) {
      EXPECT_GE(x, 0.0);
      EXPECT_LE(x, 1.0);
    }
    EXPECT_EQ(s.f == 0.0, s.precision + s.recall == 0.0);
  }
}

TEST(DeltaCd, Examples) {
  Gen g(4);
  std::vector<PointCloud> moving;
  for (int t = 0; t < 4; ++t) moving.push_back(shifted(random_cloud(g, 20), {0.1 * t, 0, 0}));
  EXPECT_EQ(metrics::delta_cd(moving, moving), 0.0);

  const auto c = random_cloud(g, 20);
  const std::vector<PointCloud> still_a{c, c, c}, still_b{shifted(c, {1, 1, 1}), shifted(c, {1, 1, 1}), shifted(c, {1, 1, 1})};
  EXPECT_EQ(metrics::delta_cd(still_a, still_b), 0.0);

  const std::vector<PointCloud> pred{{{0, 0, 0}}, {{1, 0, 0}}, {{2, 0, 0}}};
  const std::vector<PointCloud> gt{{{0, 0, 0}}, {{0.5, 0, 0}}, {{2, 0, 0}}};
  EXPECT_DOUBLE_EQ(metrics::delta_cd(pred, gt), 0.5);
  EXPECT_THROW(metrics::delta_cd(pred, {gt[0], gt[1]}), InputError);
  EXPECT_THROW(metrics::delta_cd({pred[0]}, {gt[0]}), InputError);
}

TEST(OccupancyKl, TwoCellClosedForm) {
  const std::size_t n = 10, k = 32;
  const double eps = 1e-8;
  const PointCloud at_a(n, Vec3{0, 0, 0}), at_b(n, Vec3{1, 1, 1});
  const std::vector<PointCloud> gt{at_a, at_b}, pred{at_a, at_a};
  const double z = static_cast<double>(n) + eps * static_cast<double>(k * k * k);
  const double nd = static_cast<double>(n);
  // KL(p1 || p0): cell B carries (n+eps)/z vs eps/z, cell A eps/z vs (n+eps)/z.
  const double expect = (nd + eps) / z * std::log((nd + eps) / eps) + eps / z * std::log(eps / (nd + eps));
  EXPECT_NEAR(metrics::occupancy_kl(pred, gt, k, eps), expect, 1e-12 * expect);
  EXPECT_EQ(metrics::occupancy_kl(gt, gt, k, eps), 0.0);
}

TEST(OccupancyKl, GibbsAndDegenerateBox) {
  Gen g(5);
  std::vector<PointCloud> seq;
  for (int t = 0; t < 5; ++t) seq.push_back(random_cloud(g, 200));
  const auto box = metrics::global_bounds(seq, seq, nullptr);
  for (double kl : metrics::occupancy_transitions(seq, box, 32, 1e-8)) EXPECT_GE(kl, -1e-12);
  const auto grid = metrics::voxelize(seq[0], box, 32);
  EXPECT_DOUBLE_EQ(grid.total(), 200.0);
  double mass = 0.0;
  for (double p : grid.normalized(1e-8)) mass += p;
  EXPECT_NEAR(mass, 1.0, 1e-12);

  std::vector<std::string> warnings;
  const std::vector<PointCloud> plane{{{0, 0, 0}, {1, 1, 0}}, {{0, 1, 0}, {1, 0, 0}}};
  EXPECT_NO_THROW(metrics::occupancy_kl(plane, plane, 32, 1e-8, &warnings));
  EXPECT_EQ(warnings.size(), 1u);
}

TEST(Descriptor, TranslationOnlyMovesCentroid) {
  Gen g(6);
  const auto c = random_cloud(g, 500, 0.4);
  const auto a = metrics::feature_descriptor(c);
  const auto b = metrics::feature_descriptor(shifted(c, {0.25, -0.5, 0.125}));
  ASSERT_EQ(a.size(), metrics::kDescriptorDim);
  EXPECT_NEAR(b[0] - a[0], 0.25, 1e-12);
  EXPECT_NEAR(b[1] - a[1], -0.5, 1e-12);
  EXPECT_NEAR(b[2] - a[2], 0.125, 1e-12);
  for (std::size_t i = 3; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-9) << "entry " << i;
  EXPECT_EQ(a, metrics::feature_descriptor(c));
}

TEST(Descriptor, SphereRadialMassNearOne) {
  const auto pts = metrics::sample_surface(make_icosphere(3), 4096, 1);
  const auto f = metrics::feature_descriptor(pts);
  // Radial bins start at index 9 with width 2/32; radius 1 sits on the 15/16 boundary.
  EXPECT_GT(f[9 + 15] + f[9 + 16], 0.99);
}

TEST(Dtw, Examples) {
  EXPECT_EQ(metrics::dtw({1, 2, 3, 2, 1, 2, 3, 2, 1}, 3, 3), 3.0);
  Gen g(7);
  metrics::FeatureTrack a;
  for (int t = 0; t < 6; ++t) {
    std::vector<double> f(8);
    for (auto& x : f) x = g.normal();
    a.frames.push_back(f);
  }
  const auto same = metrics::temporal_feature_compare(a, a);
  EXPECT_NEAR(same.cosine, 1.0, 1e-12);
  EXPECT_EQ(same.dtw, 0.0);
  auto neg = a;
  for (auto& f : neg.frames)
    for (auto& x : f) x = -x;
  EXPECT_NEAR(metrics::temporal_feature_compare(a, neg).cosine, -1.0, 1e-12);
  metrics::FeatureTrack zero{{std::vector<double>(8, 0.0)}, ""};
  EXPECT_THROW(metrics::temporal_feature_compare(a, zero), NumericError);
}

TEST(Dtw, MatchesPathEnumeration) {
  for (int seed = 0; seed < 30; ++seed) {
    Gen g(60 + static_cast<std::uint64_t>(seed));
    const std::size_t n = g.size(1, 8), m = g.size(1, 8);
    std::vector<double> cost(n * m);
    for (auto& c : cost) c = g.uniform(0.0, 3.0);
    const double d = metrics::dtw(cost, n, m);
    EXPECT_NEAR(d, dtw_oracle(cost, n, m), 1e-12);
    EXPECT_GE(d, 0.0);
    if (n == m) {
      double diag = 0.0;
      for (std::size_t i = 0; i < n; ++i) diag += cost[i * m + i];
      EXPECT_LE(d, diag);
    }
  }
}

MeshSequence moving_ellipsoids(std::size_t frames, double speed) {
  MeshSequence s;
  for (std::size_t t = 0; t < frames; ++t) {
    const double x = speed * static_cast<double>(t);
    s.frames.push_back(make_ellipsoid({x, 0, 0}, {0.5, 0.3 + 0.02 * static_cast<double>(t), 0.25}));
  }
  return s;
}

TEST(Evaluate, IdentityPair) {
  const auto seq = moving_ellipsoids(5, 0.1);
  metrics::EvalParams params;
  params.points = 1024;
  const auto r = metrics::evaluate_sequences(seq, seq, params);
  EXPECT_EQ(r.cd, 0.0);
  EXPECT_EQ(r.f_score, 1.0);
  EXPECT_EQ(r.delta_cd, 0.0);
  EXPECT_EQ(r.occupancy_kl, 0.0);
  EXPECT_NEAR(r.feature_cosine, 1.0, 1e-12);
  EXPECT_EQ(r.feature_dtw, 0.0);
}

TEST(Evaluate, DefaultsAndJson) {
  const metrics::EvalParams d;
  EXPECT_EQ(d.points, 4096u);
  EXPECT_EQ(d.tau, 0.02);
  EXPECT_EQ(d.grid, 32u);
  EXPECT_EQ(d.eps, 1e-8);
  const auto seq = moving_ellipsoids(2, 0.1);
  metrics::EvalParams p;
  p.points = 256;
  const nlohmann::json j = metrics::evaluate_sequences(seq, seq, p);
  EXPECT_EQ(j["parameters"]["occupancy_resolution"], 32);
  EXPECT_EQ(j["parameters"]["occupancy_epsilon"], 1e-8);
  EXPECT_EQ(j["parameters"]["tau"], 0.02);
  EXPECT_EQ(j["parameters"]["encoder"], metrics::kGeometricEncoderId);
  EXPECT_THROW(metrics::evaluate_sequences(seq, moving_ellipsoids(3, 0.1), p), InputError);
}

TEST(Evaluate, FramePermutationKeepsFrameLevelMean) {
  const auto gt = moving_ellipsoids(6, 0.15);
  auto pred = moving_ellipsoids(6, 0.12);
  metrics::EvalParams p;
  p.points = 512;
  const auto base = metrics::evaluate_sequences(pred, gt, p);
  const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  MeshSequence pp, gp;
  for (auto i : perm) {
    pp.frames.push_back(pred.frames[i]);
    gp.frames.push_back(gt.frames[i]);
  }
  const auto shuffled = metrics::evaluate_sequences(pp, gp, p);
  EXPECT_NEAR(shuffled.cd, base.cd, 1e-12);
  EXPECT_GT(std::abs(shuffled.delta_cd - base.delta_cd), 1e-6);
}

TEST(Evaluate, SeedStability) {
  const auto gt = moving_ellipsoids(3, 0.1);
  const auto pred = moving_ellipsoids(3, 0.13);
  metrics::EvalParams p;
  const double a = metrics::evaluate_sequences(pred, gt, p).cd;
  p.seed = 99;
  const double b = metrics::evaluate_sequences(pred, gt, p).cd;
  EXPECT_LT(std::abs(a - b) / a, 0.05);
}

}  // namespace
}  // namespace tempo4d
