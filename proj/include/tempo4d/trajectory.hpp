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

// Per-frame translation recovery from silhouettes. Meshes are rendered by a
// differentiable Gaussian point-splat rasterizer under a static pinhole
// camera and compared against ground-truth masks with an adaptive loss: a
// centroid-seeking branch while the masks barely overlap, and a BCE + Dice +
// L1 + centroid mix otherwise.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tempo4d/errors.hpp"
#include "tempo4d/imageio.hpp"
#include "tempo4d/meshio.hpp"
#include "tempo4d/metrics.hpp"
#include "tempo4d/optim.hpp"
#include "tempo4d/tensorkit.hpp"

namespace tempo4d::trajectory {

using Tensor = tk::Tensor<double>;
using tk::Shape;

struct CameraParams {
  double focal = 150.0;  // pixels
  double cx = 64.0;
  double cy = 64.0;
  std::size_t width = 128;
  std::size_t height = 128;

  void validate() const {
    if (!(focal > 0.0)) throw ContractError("focal length must be positive");
    if (width == 0 || height == 0) throw ContractError("image size must be positive");
    if (!(cx >= 0.0 && cx < static_cast<double>(width) && cy >= 0.0 && cy < static_cast<double>(height))) {
      throw ContractError("principal point outside the image");
    }
  }

  // Pixel coordinates of a camera-space point (z > 0).
  std::array<double, 2> project(const Vec3& p) const { return {focal * p[0] / p[2] + cx, focal * p[1] / p[2] + cy}; }
};

struct LossWeights {
  double lambda1 = 1.0;  // standalone mask loss: BCE
  double lambda2 = 1.0;  // standalone mask loss: Dice
  double alpha = 1.0;    // full branch: BCE
  double beta = 1.0;     // full branch: Dice
  double gamma = 0.1;    // full branch: L1
  double delta = 0.5;    // full branch: center
  double epsilon = 0.1;  // fallback branch: Dice
  double zeta = 10.0;    // fallback branch: center
  double threshold = 0.999;

  void validate() const {
    for (double w : {lambda1, lambda2, alpha, beta, gamma, delta, epsilon, zeta}) {
      if (!(w >= 0.0)) throw ContractError("loss weights must be nonnegative");
    }
  }
};

enum class Branch { kFull, kFallback };

inline const char* branch_name(Branch b) { return b == Branch::kFull ? "full" : "fallback"; }

// ---------------------------------------------------------------------------
// Rasterizer

struct SplatParams {
  double sigma = 1.5;             // pixels
  double kappa = 1.0 - 1e-6;      // peak splat opacity, keeps 1 - g > 0
  double radius_sigmas = 9.0;     // support; exp(-40.5) is below double eps
};

inline Tensor to_tensor(const MaskImage& m) { return Tensor(Shape{m.height, m.width}, m.values); }

inline MaskImage to_mask(const Tensor& t) {
  if (t.rank() != 2) throw ShapeError("mask tensor must be [H,W], got " + tk::shape_str(t.shape()));
  MaskImage m(t.dim(0), t.dim(1));
  m.values = t.to_vector();
  return m;
}

// Splats points (object space) translated by theta [3] and projected with
// the given focal [1]; coverage m = 1 - prod_k (1 - g_k). Differentiable in
// theta and focal.
inline Tensor rasterize_points(const std::vector<Vec3>& points, const Tensor& theta, const Tensor& focal,
                               const CameraParams& cam, const SplatParams& sp = {}, std::size_t frame = 0) {
  if (theta.numel() != 3) throw ShapeError("translation must have 3 entries");
  if (focal.numel() != 1) throw ShapeError("focal must be a scalar");
  if (!(sp.sigma > 0.0)) throw ContractError("splat sigma must be positive");
  const std::size_t h = cam.height, w = cam.width;
  const double f = focal.item();
  const double tx = theta[0], ty = theta[1], tz = theta[2];
  const double inv2s2 = 1.0 / (2.0 * sp.sigma * sp.sigma);
  const double radius = sp.radius_sigmas * sp.sigma;

  struct Proj {
    double x, y, z, u, v;
  };
  std::vector<Proj> proj(points.size());
  std::vector<double> prod(h * w, 1.0);
  std::vector<double> ex, ey;
  for (std::size_t k = 0; k < points.size(); ++k) {
    Proj& p = proj[k];
    p.x = points[k][0] + tx;
    p.y = points[k][1] + ty;
    p.z = points[k][2] + tz;
    if (!(p.z > 0.0)) throw BehindCameraError(frame, "projected point has z <= 0");
    p.u = f * p.x / p.z + cam.cx;
    p.v = f * p.y / p.z + cam.cy;
    const long c0 = std::max(0L, static_cast<long>(std::ceil(p.u - radius)));
    const long c1 = std::min(static_cast<long>(w) - 1, static_cast<long>(std::floor(p.u + radius)));
    const long r0 = std::max(0L, static_cast<long>(std::ceil(p.v - radius)));
    const long r1 = std::min(static_cast<long>(h) - 1, static_cast<long>(std::floor(p.v + radius)));
    if (c0 > c1 || r0 > r1) continue;
    ex.resize(static_cast<std::size_t>(c1 - c0 + 1));
    ey.resize(static_cast<std::size_t>(r1 - r0 + 1));
    for (long c = c0; c <= c1; ++c) ex[c - c0] = std::exp(-(c - p.u) * (c - p.u) * inv2s2);
    for (long r = r0; r <= r1; ++r) ey[r - r0] = sp.kappa * std::exp(-(r - p.v) * (r - p.v) * inv2s2);
    for (long r = r0; r <= r1; ++r) {
      double* row = prod.data() + static_cast<std::size_t>(r) * w;
      const double gy = ey[r - r0];
      for (long c = c0; c <= c1; ++c) row[c] *= 1.0 - gy * ex[c - c0];
    }
  }
  std::vector<double> mask(h * w);
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = std::clamp(1.0 - prod[i], 0.0, 1.0);

  return tk::custom_op<double>(
      {&theta, &focal}, Shape{h, w}, std::move(mask),
      [proj = std::move(proj), prod = std::move(prod), h, w, f, inv2s2, radius, sp](
          std::span<const double> gm, std::span<std::vector<double>*> pg) {
        std::vector<double> ex, ey;
        const double inv_s2 = 2.0 * inv2s2;
        for (const auto& p : proj) {
          const long c0 = std::max(0L, static_cast<long>(std::ceil(p.u - radius)));
          const long c1 = std::min(static_cast<long>(w) - 1, static_cast<long>(std::floor(p.u + radius)));
          const long r0 = std::max(0L, static_cast<long>(std::ceil(p.v - radius)));
          const long r1 = std::min(static_cast<long>(h) - 1, static_cast<long>(std::floor(p.v + radius)));
          if (c0 > c1 || r0 > r1) continue;
          ex.resize(static_cast<std::size_t>(c1 - c0 + 1));
          ey.resize(static_cast<std::size_t>(r1 - r0 + 1));
          for (long c = c0; c <= c1; ++c) ex[c - c0] = std::exp(-(c - p.u) * (c - p.u) * inv2s2);
          for (long r = r0; r <= r1; ++r) ey[r - r0] = sp.kappa * std::exp(-(r - p.v) * (r - p.v) * inv2s2);
          double gu = 0.0, gv = 0.0;
          for (long r = r0; r <= r1; ++r) {
            const std::size_t base = static_cast<std::size_t>(r) * w;
            for (long c = c0; c <= c1; ++c) {
              const double g = ey[r - r0] * ex[c - c0];
              // dm/dg_k = prod_{j != k} (1 - g_j)
              const double dl_dg = gm[base + c] * prod[base + c] / (1.0 - g);
              gu += dl_dg * g * (c - p.u) * inv_s2;
              gv += dl_dg * g * (r - p.v) * inv_s2;
            }
          }
          if (pg[0]) {
            auto& gt = *pg[0];
            gt[0] += gu * f / p.z;
            gt[1] += gv * f / p.z;
            gt[2] += -(gu * f * p.x + gv * f * p.y) / (p.z * p.z);
          }
          if (pg[1]) (*pg[1])[0] += (gu * p.x + gv * p.y) / p.z;
        }
      });
}

struct RasterOptions {
  double sigma = 1.5;
  std::size_t samples = 2048;
  std::uint64_t seed = 0;
};

inline MaskImage rasterize_silhouette(const MeshFrame& mesh, const Vec3& theta, const CameraParams& cam,
                                      const RasterOptions& opt = {}, std::size_t frame = 0) {
  if (mesh.vertices.empty() || mesh.faces.empty()) throw DegenerateMeshError("cannot rasterize an empty mesh");
  cam.validate();
  std::vector<Vec3> pts;
  if (opt.samples > 0) pts = metrics::sample_surface(mesh, opt.samples, opt.seed);
  SplatParams sp;
  sp.sigma = opt.sigma;
  return to_mask(rasterize_points(pts, Tensor(Shape{3}, {theta[0], theta[1], theta[2]}), Tensor::scalar(cam.focal), cam,
                                  sp, frame));
}

// ---------------------------------------------------------------------------
// Losses (differentiable in pred)

inline void require_same(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": mask sizes differ " + tk::shape_str(a.shape()) + " vs " +
                     tk::shape_str(b.shape()));
  }
}

// Mean over pixels of -[g log p + (1-g) log(1-p)], p clamped to [1e-6, 1-1e-6].
inline Tensor bce_loss(const Tensor& pred, const Tensor& gt) {
  require_same(pred, gt, "bce_loss");
  const auto p = tk::clamp(pred, 1e-6, 1.0 - 1e-6);
  const auto one = Tensor::scalar(1.0);
  const auto pos = tk::mul(gt, tk::log(p));
  const auto neg = tk::mul(tk::sub(one, gt), tk::log(tk::sub(one, p)));
  return tk::scale(tk::mean(tk::add(pos, neg)), -1.0);
}

inline constexpr double kDiceSmoothing = 1.0;

// 1 - (2 sum(p g) + s) / (sum p + sum g + s), s = 1.
inline Tensor dice_loss(const Tensor& pred, const Tensor& gt) {
  require_same(pred, gt, "dice_loss");
  const auto s = Tensor::scalar(kDiceSmoothing);
  const auto num = tk::add(tk::scale(tk::sum(tk::mul(pred, gt)), 2.0), s);
  const auto den = tk::add(tk::add(tk::sum(pred), tk::sum(gt)), s);
  return tk::sub(Tensor::scalar(1.0), tk::div(num, den));
}

inline Tensor l1_loss(const Tensor& pred, const Tensor& gt) {
  require_same(pred, gt, "l1_loss");
  return tk::mean(tk::abs(tk::sub(pred, gt)));
}

// Mass-weighted mean pixel coordinate divided by (W, H); returns [x, y].
// Pixel (row i, col j) sits at (j, i).
inline Tensor mask_centroid(const Tensor& mask) {
  if (mask.rank() != 2) throw ShapeError("mask_centroid expects [H,W]");
  const std::size_t h = mask.dim(0), w = mask.dim(1);
  double mass = 0.0;
  for (auto v : mask.data()) mass += v;
  if (!(mass > 0.0)) throw EmptyMaskError("mask has zero mass");
  std::vector<double> xs(h * w), ys(h * w);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      xs[i * w + j] = static_cast<double>(j) / static_cast<double>(w);
      ys[i * w + j] = static_cast<double>(i) / static_cast<double>(h);
    }
  const Tensor gx(Shape{h, w}, std::move(xs)), gy(Shape{h, w}, std::move(ys));
  const auto total = tk::sum(mask);
  return tk::concat<double>({tk::div(tk::sum(tk::mul(mask, gx)), total), tk::div(tk::sum(tk::mul(mask, gy)), total)}, 0);
}

inline std::array<double, 2> mask_centroid(const MaskImage& m) {
  const auto c = mask_centroid(to_tensor(m));
  return {c[0], c[1]};
}

// Mean over frames of squared centroid displacement; inputs are [N, 2].
inline Tensor center_loss(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape() || pred.rank() != 2 || pred.dim(1) != 2) {
    throw ShapeError("center_loss: centroid lists must both be [N,2], got " + tk::shape_str(pred.shape()) + " and " +
                     tk::shape_str(gt.shape()));
  }
  const auto d = tk::sub(pred, gt);
  return tk::scale(tk::sum(tk::mul(d, d)), 1.0 / static_cast<double>(pred.dim(0)));
}

inline Tensor center_loss(const std::vector<std::array<double, 2>>& pred, const std::vector<std::array<double, 2>>& gt) {
  if (pred.size() != gt.size()) throw ShapeError("center_loss: centroid list lengths differ");
  if (pred.empty()) throw ShapeError("center_loss: no frames");
  std::vector<double> a, b;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    a.insert(a.end(), {pred[i][0], pred[i][1]});
    b.insert(b.end(), {gt[i][0], gt[i][1]});
  }
  return center_loss(Tensor(Shape{pred.size(), 2}, std::move(a)), Tensor(Shape{gt.size(), 2}, std::move(b)));
}

// lambda1 * BCE + lambda2 * Dice.
inline Tensor mask_loss(const Tensor& pred, const Tensor& gt, const LossWeights& w) {
  return tk::add(tk::scale(bce_loss(pred, gt), w.lambda1), tk::scale(dice_loss(pred, gt), w.lambda2));
}

struct AdaptiveLoss {
  Tensor value;
  Branch branch = Branch::kFull;
  double dice = 0.0;
};

// Single-frame overall loss. The Dice loss is evaluated first and selects the
// branch. A prediction with no mass has its centroid pinned to the image
// center (no gradient through it).
inline AdaptiveLoss adaptive_total_loss(const Tensor& pred, const Tensor& gt, const LossWeights& w) {
  w.validate();
  require_same(pred, gt, "adaptive_total_loss");
  AdaptiveLoss out;
  const auto dice = dice_loss(pred, gt);
  out.dice = dice.item();
  double pred_mass = 0.0;
  for (auto v : pred.data()) pred_mass += v;
  const auto pc = pred_mass > 1e-12 ? mask_centroid(pred) : Tensor(Shape{2}, {0.5, 0.5});
  const auto gc = mask_centroid(gt.detach());
  const auto center = center_loss(tk::reshape(pc, Shape{1, 2}), tk::reshape(gc, Shape{1, 2}));
  if (out.dice > w.threshold) {
    out.branch = Branch::kFallback;
    out.value = tk::add(tk::scale(dice, w.epsilon), tk::scale(center, w.zeta));
  } else {
    out.branch = Branch::kFull;
    out.value = tk::add(tk::add(tk::scale(bce_loss(pred, gt), w.alpha), tk::scale(dice, w.beta)),
                        tk::add(tk::scale(l1_loss(pred, gt), w.gamma), tk::scale(center, w.delta)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer

struct TrajectoryOptions {
  std::size_t steps = 500;
  double lr = 0.02;          // world units per step (Adam)
  double focal_lr = 0.002;   // relative focal change per step
  bool refine_focal = true;
  bool cosine_decay = true;
  LossWeights weights;
  RasterOptions raster;
  // Explicit starting translations (one per frame); otherwise initialized
  // from the first usable mask's centroid and bounding-box height.
  std::optional<std::vector<Vec3>> initial;
};

struct FramePose {
  std::size_t frame = 0;
  Vec3 translation{0, 0, 0};
  double dice_coefficient = 0.0;
  double final_loss = 0.0;
  Branch final_branch = Branch::kFull;
  bool skipped = false;
};

struct StepRecord {
  std::size_t step = 0;
  double total_loss = 0.0;
  std::vector<Branch> branches;  // per optimized frame
};

struct Trajectory {
  std::vector<FramePose> frames;
  CameraParams camera;  // refined
  std::vector<StepRecord> log;
  std::vector<std::string> warnings;

  double mean_dice() const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& f : frames) {
      if (f.skipped) continue;
      s += f.dice_coefficient;
      ++n;
    }
    return n ? s / static_cast<double>(n) : 0.0;
  }
};

// Places the mesh so its bounding-box center projects to the mask centroid
// and its bounding-box height spans the mask's bounding-box height.
inline Vec3 initial_translation(const MeshFrame& mesh, const MaskImage& mask, const CameraParams& cam) {
  const auto c = mask_centroid(mask);
  std::size_t top = mask.height, bottom = 0;
  for (std::size_t i = 0; i < mask.height; ++i)
    for (std::size_t j = 0; j < mask.width; ++j)
      if (mask.at(i, j) >= 0.5) {
        top = std::min(top, i);
        bottom = std::max(bottom, i);
      }
  const double h_px = top <= bottom ? static_cast<double>(bottom - top + 1) : 1.0;
  const auto b = bounds_of(mesh);
  const double h_mesh = std::max(b.extent()[1], 1e-9);
  const double z = cam.focal * h_mesh / h_px;
  const double u = c[0] * static_cast<double>(mask.width), v = c[1] * static_cast<double>(mask.height);
  const auto center = b.center();
  return {(u - cam.cx) * z / cam.focal - center[0], (v - cam.cy) * z / cam.focal - center[1], z - center[2]};
}

inline Trajectory optimize_trajectory(const MeshSequence& meshes, const std::vector<MaskImage>& gt_masks,
                                      const CameraParams& cam0, const TrajectoryOptions& opt = {}) {
  cam0.validate();
  opt.weights.validate();
  const std::size_t n = meshes.size();
  if (gt_masks.size() != n) {
    throw InputError("need one mask per frame: " + std::to_string(gt_masks.size()) + " masks for " + std::to_string(n) +
                     " frames");
  }
  Trajectory out;
  out.camera = cam0;
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& m = gt_masks[i];
    if (m.height != cam0.height || m.width != cam0.width) {
      throw ShapeError("mask " + std::to_string(i) + " size does not match the camera image size");
    }
    if (m.mass() > 0.0) {
      active.push_back(i);
    } else {
      out.warnings.push_back("frame " + std::to_string(i) + ": empty ground-truth mask, skipped");
    }
  }
  if (active.empty()) throw InputError("all ground-truth masks are empty");

  std::vector<Vec3> init(n);
  if (opt.initial) {
    if (opt.initial->size() != n) throw InputError("initial translations must cover every frame");
    init = *opt.initial;
  } else {
    const Vec3 t0 = initial_translation(meshes.frames[active.front()], gt_masks[active.front()], cam0);
    std::fill(init.begin(), init.end(), t0);
  }

  std::vector<Tensor> thetas;
  std::vector<std::vector<Vec3>> points(n);
  std::vector<Tensor> gts(n);
  for (std::size_t i = 0; i < n; ++i) {
    thetas.emplace_back(Shape{3}, std::vector<double>{init[i][0], init[i][1], init[i][2]});
    gts[i] = to_tensor(gt_masks[i]);
  }
  for (auto i : active) {
    if (opt.raster.samples > 0) points[i] = metrics::sample_surface(meshes.frames[i], opt.raster.samples, opt.raster.seed);
  }
  Tensor focal_scale(Shape{1}, {0.0});  // focal = f0 * (1 + focal_scale)
  SplatParams sp;
  sp.sigma = opt.raster.sigma;

  Adam<double> adam({opt.lr, 0.9, 0.999, 1e-8});
  Adam<double> adam_focal({opt.focal_lr, 0.9, 0.999, 1e-8});

  auto evaluate = [&](tk::Tape<double>* tape, StepRecord& rec, std::vector<AdaptiveLoss>* per_frame) {
    const Tensor fs = tape && opt.refine_focal ? tape->watch(focal_scale) : focal_scale;
    const Tensor focal = tk::scale(tk::add(fs, Tensor::scalar(1.0)), cam0.focal);
    Tensor total = Tensor::scalar(0.0);
    for (auto i : active) {
      const Tensor th = tape ? tape->watch(thetas[i]) : thetas[i];
      const auto pred = rasterize_points(points[i], th, focal, cam0, sp, i);
      auto l = adaptive_total_loss(pred, gts[i], opt.weights);
      rec.branches.push_back(l.branch);
      total = tk::add(total, l.value);
      if (per_frame) per_frame->push_back(std::move(l));
    }
    rec.total_loss = total.item();
    return total;
  };

  for (std::size_t step = 0; step < opt.steps; ++step) {
    tk::Tape<double> tape;
    StepRecord rec;
    rec.step = step;
    const auto total = evaluate(&tape, rec, nullptr);
    if (!std::isfinite(rec.total_loss)) throw NumericError("trajectory loss became non-finite at step " + std::to_string(step));
    const auto grads = tk::backward(total);
    const long sched_step = static_cast<long>(step);
    const double decay = opt.cosine_decay ? cosine_lr(1.0, sched_step, static_cast<long>(opt.steps), 0.02) : 1.0;
    std::vector<tk::Tensor<double>*> params;
    for (auto i : active) params.push_back(&thetas[i]);
    adam.step(params, grads, opt.lr * decay);
    if (opt.refine_focal) adam_focal.step({&focal_scale}, grads, opt.focal_lr * decay);
    out.log.push_back(std::move(rec));
  }

  StepRecord final_rec;
  std::vector<AdaptiveLoss> final_losses;
  evaluate(nullptr, final_rec, &final_losses);
  out.camera.focal = cam0.focal * (1.0 + focal_scale[0]);
  std::size_t k = 0;
  for (std::size_t i = 0; i < n; ++i) {
    FramePose fp;
    fp.frame = i;
    fp.translation = {thetas[i][0], thetas[i][1], thetas[i][2]};
    if (k < active.size() && active[k] == i) {
      fp.final_loss = final_losses[k].value.item();
      fp.final_branch = final_losses[k].branch;
      fp.dice_coefficient = 1.0 - final_losses[k].dice;
      ++k;
    } else {
      fp.skipped = true;
    }
    out.frames.push_back(fp);
  }
  return out;
}

inline nlohmann::json to_json(const Trajectory& t) {
  nlohmann::json frames = nlohmann::json::array();
  for (const auto& f : t.frames) {
    frames.push_back({{"frame", f.frame},
                      {"tx", f.translation[0]},
                      {"ty", f.translation[1]},
                      {"tz", f.translation[2]},
                      {"dice_coefficient", f.dice_coefficient},
                      {"skipped", f.skipped}});
  }
  return {{"frames", frames},
          {"focal_length", t.camera.focal},
          {"principal_point", {t.camera.cx, t.camera.cy}},
          {"image_size", {t.camera.width, t.camera.height}},
          {"mean_dice_coefficient", t.mean_dice()},
          {"warnings", t.warnings}};
}

}  // namespace tempo4d::trajectory
