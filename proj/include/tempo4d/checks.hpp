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

// Seeded invariant suite over all modules, small enough to run on every
// invocation of `tempo4d check`.

#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "tempo4d/flowmatch.hpp"
#include "tempo4d/meshio.hpp"
#include "tempo4d/metrics.hpp"
#include "tempo4d/swattn.hpp"
#include "tempo4d/tensorkit.hpp"
#include "tempo4d/trajectory.hpp"

namespace tempo4d::checks {

enum class Fault { kNone, kRotateValues };

struct CheckOptions {
  std::uint64_t seed = 0;
  std::size_t trials = 10;
  Fault fault = Fault::kNone;
};

struct PropertyResult {
  std::string module;
  std::string name;
  bool passed = false;
  double worst = 0.0;  // largest observed deviation
  double tolerance = 0.0;
  std::string error;   // set when the property threw
};

namespace detail {

using Tensor = tk::Tensor<double>;
using tk::Shape;

inline Tensor random_tensor(std::mt19937_64& rng, const Shape& shape) {
  return Tensor::gaussian(shape, {rng(), 0.0, 1.0});
}

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline double max_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline swattn::AttentionOptions attention_options(const CheckOptions& o, std::int64_t offset = 0) {
  return {offset, 1, o.fault == Fault::kRotateValues};
}

struct Sample {
  Tensor q, k, v;
  swattn::RotaryConfig rope;
};

inline Sample attention_sample(std::mt19937_64& rng, std::size_t max_frames = 8) {
  static constexpr std::size_t kDims[] = {4, 8, 32};
  const std::size_t t = pick(rng, 1, max_frames), n = pick(rng, 1, 16), d = kDims[pick(rng, 0, 2)];
  return {random_tensor(rng, Shape{t, n, d}), random_tensor(rng, Shape{t, n, d}), random_tensor(rng, Shape{t, n, d}),
          {d, 10000.0}};
}

}  // namespace detail

using Property = std::function<double(std::mt19937_64&, const CheckOptions&)>;

struct PropertySpec {
  const char* module;
  const char* name;
  double tolerance;
  Property run;  // returns worst deviation over all trials
};

inline std::vector<PropertySpec> property_suite() {
  using namespace detail;
  std::vector<PropertySpec> s;

  s.push_back({"tensorkit", "matmul gradient matches central differences", 1e-6, [](auto& rng, const CheckOptions& o) {
                 double worst = 0.0;
                 for (std::size_t i = 0; i < o.trials; ++i) {
                   const auto a = random_tensor(rng, Shape{3, 4}), b = random_tensor(rng, Shape{4, 2});
                   worst = std::max(worst, tk::grad_check([&](const Tensor& x) { return tk::sum(tk::mul(tk::matmul(x, b), tk::matmul(x, b))); }, a, 1e-3));
                 }
                 return worst;
               }});
  s.push_back({"tensorkit", "softmax and layer norm gradients match central differences", 1e-6,
               [](auto& rng, const CheckOptions& o) {
                 double worst = 0.0;
                 for (std::size_t i = 0; i < o.trials; ++i) {
                   const auto x = random_tensor(rng, Shape{3, 6});
                   const auto w = random_tensor(rng, Shape{3, 6});
                   worst = std::max(worst, tk::grad_check([&](const Tensor& t) { return tk::sum(tk::mul(tk::softmax_lastdim(t), w)); }, x, 1e-3));
                   worst = std::max(worst, tk::grad_check([&](const Tensor& t) { return tk::sum(tk::mul(tk::layer_norm(t, 1e-6), w)); }, x, 1e-3));
                 }
                 return worst;
               }});
  s.push_back({"swattn", "rotary phase preserves token norms", 1e-12, [](auto& rng, const CheckOptions& o) {
                 double worst = 0.0;
                 for (std::size_t i = 0; i < o.trials; ++i) {
                   const auto smp = attention_sample(rng);
                   const auto x = tk::reshape(smp.q, Shape{smp.q.dim(0) * smp.q.dim(1), smp.q.dim(2)});
                   const auto t = static_cast<std::int64_t>(pick(rng, 0, 5000));
                   const auto y = swattn::apply_rope(x, t, smp.rope);
                   for (std::size_t r = 0; r < x.dim(0); ++r) {
                     double nx = 0.0, ny = 0.0;
                     for (std::size_t j = 0; j < x.dim(1); ++j) {
                       nx += x[r * x.dim(1) + j] * x[r * x.dim(1) + j];
                       ny += y[r * y.dim(1) + j] * y[r * y.dim(1) + j];
                     }
                     worst = std::max(worst, std::abs(std::sqrt(nx) - std::sqrt(ny)));
                   }
                 }
                 return worst;
               }});
  s.push_back({"swattn", "W=0 equals per-frame attention", 1e-10, [](auto& rng, const CheckOptions& o) {
                 double worst = 0.0;
                 for (std::size_t i = 0; i < o.trials; ++i) {
                   const auto smp = attention_sample(rng);
                   const auto offset = static_cast<std::int64_t>(pick(rng, 0, 100));
                   const auto w = swattn::windowed_attention(smp.q, smp.k, smp.v, 0, smp.rope, attention_options(o, offset));
                   worst = std::max(worst, max_diff(w, swattn::per_frame_attention(smp.q, smp.k, smp.v)));
                 }
                 return worst;
               }});
  s.push_back({"swattn", "windowed output invariant to absolute frame offset", 1e-9, [](auto& rng, const CheckOptions& o) {
                 double worst = 0.0;
                 for (std::size_t i = 0; i < o.trials; ++i) {
                   const auto smp = attention_sample(rng);
                   const std::size_t w = pick(rng, 1, 3);
                   const auto base = swattn::windowed_attention(smp.q, smp.k, smp.v, w, smp.rope, attention_options(o));
                   for (std::int64_t off : {1, 17, 1000}) {
                     worst = std::max(worst, max_diff(base, swattn::windowed_attention(smp.q, smp.k, smp.v, w, smp.rope,
                                                                                       attention_options(o, off))));
                   }
                 }
                 return worst;
               }});
  s.push_back({"swattn", "interior frames see (2W+1)N keys", 0.0, [](auto& rng, const CheckOptions& o) {
                 double worst = 0.0;
                 for (std::size_t w : {0u, 1u, 2u, 4u}) {
                   const std::size_t n = pick(rng, 1, 6), t = 2 * w + 3;
                   const auto q = random_tensor(rng, Shape{t, n, 4});
                   swattn::AttentionStats st;
                   swattn::windowed_attention(q, q, q, w, swattn::RotaryConfig{4, 10000.0}, attention_options(o), &st);
                   for (std::size_t f = w; f + w < t; ++f) {
                     worst = std::max(worst, std::abs(static_cast<double>(st.keys_per_frame[f]) -
                                                      static_cast<double>((2 * w + 1) * n)));
                   }
                 }
                 return worst;
               }});
  s.push_back({"swattn", "streaming equals batch attention", 1e-10, [](auto& rng, const CheckOptions& o) {
                 double worst = 0.0;
                 for (std::size_t i = 0; i < o.trials; ++i) {
                   const auto smp = attention_sample(rng, 12);
                   const std::size_t w = pick(rng, 0, 3), t = smp.q.dim(0), n = smp.q.dim(1), d = smp.q.dim(2);
                   const auto batch = swattn::windowed_attention(smp.q, smp.k, smp.v, w, smp.rope, attention_options(o));
                   swattn::StreamingAttention<double> sa(w, smp.rope);
                   std::vector<Tensor> outs;
                   auto take = [&](auto fo) {
                     for (auto& f : fo) outs.push_back(f.out);
                   };
                   auto frame = [&](const Tensor& x, std::size_t f) { return tk::reshape(tk::narrow(x, 0, f, 1), Shape{n, d}); };
                   for (std::size_t f = 0; f < t; ++f)
                     take(sa.push(static_cast<std::int64_t>(f), frame(smp.q, f), frame(smp.k, f), frame(smp.v, f)));
                   take(sa.finish());
                   worst = std::max(worst, max_diff(tk::reshape(tk::concat(outs, 0), Shape{t, n, d}), batch));
                   if (sa.cache().peak_frames() > 2 * w + 1) worst = INFINITY;
                 }
                 return worst;
               }});
  s.push_back({"flowmatch", "perfect velocity gives zero loss", 0.0, [](auto& rng, const CheckOptions& o) {
                 double worst = 0.0;
                 for (std::size_t i = 0; i < o.trials; ++i) {
                   const auto x1 = random_tensor(rng, Shape{3, 4, 8});
                   const auto b = flowmatch::make_flow_batch(x1, std::uniform_real_distribution<double>(0, 1)(rng), rng());
                   const auto v = flowmatch::flow_target(b.x0, b.x1);
                   const flowmatch::VelocityFn u = [&](const Tensor&, const Tensor&, double) { return v; };
                   worst = std::max(worst, flowmatch::fm_loss(u, b, Tensor::zeros(Shape{3, 1, 8})).item());
                 }
                 return worst;
               }});
  s.push_back({"flowmatch", "Euler integration of a straight path reaches x1", 1e-6, [](auto& rng, const CheckOptions& o) {
                 double worst = 0.0;
                 for (std::size_t i = 0; i < o.trials; ++i) {
                   const auto x0 = random_tensor(rng, Shape{2, 4, 8}), x1 = random_tensor(rng, Shape{2, 4, 8});
                   const auto v = flowmatch::flow_target(x0, x1);
                   const flowmatch::VelocityFn u = [&](const Tensor&, const Tensor&, double) { return v; };
                   worst = std::max(worst, max_diff(flowmatch::euler_integrate(u, x0, Tensor::zeros(Shape{2, 1, 8}), 64), x1));
                 }
                 return worst;
               }});
  s.push_back({"flowmatch", "fm_loss gradient matches central differences", 1e-5, [](auto& rng, const CheckOptions& o) {
                 flowmatch::ToyDiTConfig c;
                 c.blocks = 2;
                 c.width = 8;
                 c.latent_tokens = 2;
                 c.cond_tokens = 2;
                 c.time_dim = 4;
                 c.ffn_mult = 2;
                 c.window.self_half_width = 1;
                 c.window.cross_half_width = 1;
                 const flowmatch::ToyDiT m(c, rng());
                 const auto x1 = random_tensor(rng, Shape{3, 2, 8}), cond = random_tensor(rng, Shape{3, 2, 8});
                 const auto batch = flowmatch::make_flow_batch(x1, 0.3, rng());
                 double worst = 0.0;
                 const std::size_t probes = std::min<std::size_t>(o.trials, m.params().size());
                 for (std::size_t j = 0; j < probes; ++j) {
                   const std::size_t i = pick(rng, 0, m.params().size() - 1);
                   auto f = [&](const Tensor& pi) {
                     auto p = m.params();
                     p[i] = pi;
                     const flowmatch::VelocityFn u = [&](const Tensor& x, const Tensor& cn, double sv) { return m.forward(p, x, cn, sv); };
                     return flowmatch::fm_loss(u, batch, cond, flowmatch::LossTarget::kAllFrames);
                   };
                   worst = std::max(worst, tk::grad_check(f, m.params()[i], 1e-3));
                 }
                 return worst;
               }});
  s.push_back({"metrics", "identical clouds give zero chamfer and unit F-score", 1e-12, [](auto& rng, const CheckOptions& o) {
                 double worst = 0.0;
                 for (std::size_t i = 0; i < o.trials; ++i) {
                   metrics::PointCloud p(pick(rng, 1, 100));
                   std::normal_distribution<double> g(0.0, 1.0);
                   for (auto& x : p) x = {g(rng), g(rng), g(rng)};
                   const auto f = metrics::f_score(p, p, 0.02);
                   worst = std::max({worst, metrics::chamfer(p, p), std::abs(1.0 - f.f), std::abs(1.0 - f.precision),
                                     std::abs(1.0 - f.recall)});
                 }
                 return worst;
               }});
  s.push_back({"metrics", "chamfer is symmetric", 1e-12, [](auto& rng, const CheckOptions& o) {
                 double worst = 0.0;
                 std::normal_distribution<double> g(0.0, 1.0);
                 for (std::size_t i = 0; i < o.trials; ++i) {
                   metrics::PointCloud a(pick(rng, 1, 60)), b(pick(rng, 1, 60));
                   for (auto& x : a) x = {g(rng), g(rng), g(rng)};
                   for (auto& x : b) x = {g(rng), g(rng), g(rng)};
                   worst = std::max(worst, std::abs(metrics::chamfer(a, b) - metrics::chamfer(b, a)));
                 }
                 return worst;
               }});
  s.push_back({"metrics", "temporal metrics vanish on identical sequences", 1e-12, [](auto& rng, const CheckOptions&) {
                 std::vector<metrics::PointCloud> seq(4);
                 std::normal_distribution<double> g(0.0, 1.0);
                 for (auto& c : seq) {
                   c.resize(50);
                   for (auto& x : c) x = {g(rng), g(rng), g(rng)};
                 }
                 const auto tr = metrics::encode_track(seq, metrics::geometric_encoder());
                 const auto cmp = metrics::temporal_feature_compare(tr, tr);
                 return std::max({metrics::delta_cd(seq, seq), metrics::occupancy_kl(seq, seq, 32, 1e-8), cmp.dtw,
                                  std::abs(1.0 - cmp.cosine)});
               }});
  s.push_back({"meshio", "normalization fits [-1,1] tightly and inverts", 1e-9, [](auto& rng, const CheckOptions& o) {
                 double worst = 0.0;
                 std::uniform_real_distribution<double> u(-3.0, 3.0), a(0.2, 2.0);
                 for (std::size_t i = 0; i < o.trials; ++i) {
                   MeshSequence seq;
                   for (std::size_t f = 0; f < 4; ++f)
                     seq.frames.push_back(make_ellipsoid({u(rng), u(rng), u(rng)}, {a(rng), a(rng), a(rng)}, 1));
                   const auto n = normalize_sequence(seq);
                   double m = 0.0;
                   for (const auto& fr : n.sequence.frames)
                     for (const auto& v : fr.vertices)
                       for (double x : v) m = std::max(m, std::abs(x));
                   worst = std::max(worst, std::abs(m - 1.0));
                   const auto back = denormalize_sequence(n.sequence, n.record);
                   for (std::size_t f = 0; f < 4; ++f)
                     for (std::size_t v = 0; v < seq.frames[f].vertices.size(); ++v)
                       for (int k = 0; k < 3; ++k)
                         worst = std::max(worst, std::abs(back.frames[f].vertices[v][k] - seq.frames[f].vertices[v][k]));
                 }
                 return worst;
               }});
  s.push_back({"trajectory", "Dice loss of a mask with itself is near zero", 1e-12, [](auto& rng, const CheckOptions& o) {
                 double worst = 0.0;
                 std::uniform_real_distribution<double> u(0.0, 1.0);
                 for (std::size_t i = 0; i < o.trials; ++i) {
                   std::vector<double> m(64);
                   for (auto& x : m) x = u(rng) < 0.5 ? 1.0 : 0.0;
                   const Tensor t(Shape{8, 8}, m);
                   worst = std::max(worst, std::abs(trajectory::dice_loss(t, t).item()));
                 }
                 return worst;
               }});
  s.push_back({"trajectory", "rasterizer gradient matches central differences", 1e-5, [](auto& rng, const CheckOptions&) {
                 std::vector<Vec3> pts;
                 std::normal_distribution<double> g(0.0, 0.3);
                 for (int i = 0; i < 20; ++i) pts.push_back({g(rng), g(rng), g(rng)});
                 trajectory::CameraParams cam;
                 cam.width = cam.height = 16;
                 cam.cx = cam.cy = 8.0;
                 cam.focal = 20.0;
                 const Tensor focal = Tensor::scalar(cam.focal);
                 const auto w = Tensor::gaussian(Shape{16, 16}, {rng(), 0.0, 1.0});
                 const Tensor theta(Shape{3}, {0.05, -0.04, 3.0});
                 return tk::grad_check(
                     [&](const Tensor& th) {
                       return tk::sum(tk::mul(trajectory::rasterize_points(pts, th, focal, cam, {}, 0), w));
                     },
                     theta, 1e-6);
               }});
  return s;
}

inline std::vector<PropertyResult> run_suite(const CheckOptions& opt) {
  std::vector<PropertyResult> out;
  std::size_t k = 0;
  for (const auto& p : property_suite()) {
    std::mt19937_64 rng(flowmatch::mix_seed(opt.seed, k++));
    PropertyResult r{p.module, p.name, false, 0.0, p.tolerance, {}};
    try {
      r.worst = p.run(rng, opt);
      r.passed = r.worst <= p.tolerance;
    } catch (const std::exception& e) {
      r.error = e.what();
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline std::string format_result(const PropertyResult& r) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3e (tol %.1e)", r.worst, r.tolerance);
  std::string line = std::string(r.passed ? "PASS " : "FAIL ") + r.module + ": " + r.name + "  ";
  return line + (r.error.empty() ? std::string(buf) : "error: " + r.error);
}

}  // namespace tempo4d::checks
