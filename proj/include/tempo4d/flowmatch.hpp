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

// Toy diffusion transformer trained with rectified flow matching on
// synthetic latent sequences, plus the Euler sampler and checkpoint format.
//
// Latents are [T, L, d] (frames, tokens, width); conditions are [T, Nc, d].

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "tempo4d/errors.hpp"
#include "tempo4d/meshio.hpp"
#include "tempo4d/optim.hpp"
#include "tempo4d/swattn.hpp"
#include "tempo4d/tensorkit.hpp"

namespace tempo4d::flowmatch {

using Tensor = tk::Tensor<double>;
using tk::Shape;

// splitmix64 finalizer; derives independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Model

struct ToyDiTConfig {
  std::size_t blocks = 4;
  std::size_t width = 32;         // d
  std::size_t latent_tokens = 16; // L
  std::size_t cond_tokens = 8;    // Nc, width d
  std::size_t time_dim = 32;
  std::size_t ffn_mult = 4;
  swattn::WindowSpec window;
  double rope_base = 10000.0;
  double ln_eps = 1e-6;

  void validate() const {
    if (blocks == 0) throw ContractError("model needs at least one block");
    if (width == 0 || width % 2 != 0) throw ShapeError("token width must be even, got " + std::to_string(width));
    if (latent_tokens == 0 || cond_tokens == 0 || ffn_mult == 0) throw ShapeError("token counts must be positive");
    if (time_dim < 2 || time_dim % 2 != 0) throw ShapeError("time embedding width must be even");
    window.validate();
  }
};

enum class AttentionPath {
  kWindowed,  // windowed layers use RoPE + sliding windows
  kPerFrame,  // every layer is plain per-frame attention
};

struct ForwardOptions {
  std::optional<std::size_t> self_half_width;   // overrides config
  std::optional<std::size_t> cross_half_width;
  AttentionPath path = AttentionPath::kWindowed;
  std::int64_t frame_offset = 0;
};

struct StreamStats {
  std::size_t peak_cached_frames = 0;
};

using VelocityFn = std::function<Tensor(const Tensor& x, const Tensor& cond, double s)>;

// Sinusoidal features of flow time s, frequencies 1000 * 10000^(-i/half).
inline std::vector<double> time_features(double s, std::size_t dim) {
  std::vector<double> f(dim);
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double w = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
    f[i] = std::sin(1000.0 * s * w);
    f[half + i] = std::cos(1000.0 * s * w);
  }
  return f;
}

class ToyDiT {
 public:
  ToyDiT(ToyDiTConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const std::size_t d = cfg_.width, h = d * cfg_.ffn_mult;
    std::uint64_t k = 0;
    auto weight = [&](const std::string& name, std::size_t in, std::size_t out, double gain = 1.0) {
      add(name, Tensor::gaussian(Shape{in, out}, {mix_seed(seed, k++), 0.0, gain / std::sqrt(static_cast<double>(in))}));
    };
    auto bias = [&](const std::string& name, std::size_t n) { add(name, Tensor::zeros(Shape{n})); };
    weight("in.w", d, d);
    bias("in.b", d);
    add("pos", Tensor::gaussian(Shape{cfg_.latent_tokens, d}, {mix_seed(seed, k++), 0.0, 0.1}));
    weight("time.w1", cfg_.time_dim, d);
    bias("time.b1", d);
    weight("time.w2", d, d);
    bias("time.b2", d);
    for (std::size_t b = 0; b < cfg_.blocks; ++b) {
      const std::string p = "blocks." + std::to_string(b) + ".";
      for (const char* n : {"self.wq", "self.wk", "self.wv", "self.wo", "cross.wq", "cross.wk", "cross.wv", "cross.wo"}) {
        weight(p + n, d, d);
      }
      weight(p + "ffn.w1", d, h);
      bias(p + "ffn.b1", h);
      weight(p + "ffn.w2", h, d);
      bias(p + "ffn.b2", d);
    }
    weight("out.w", d, d, 0.1);
    bias("out.b", d);
    add("skip.w", Tensor::zeros(Shape{d, d}));
  }

  ToyDiT(ToyDiTConfig cfg, std::vector<std::string> names, std::vector<Tensor> params)
      : cfg_(std::move(cfg)), names_(std::move(names)), params_(std::move(params)) {
    cfg_.validate();
    const ToyDiT ref(cfg_, 0);
    if (ref.names_ != names_) throw InputError("parameter list does not match the model configuration");
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (params_[i].shape() != ref.params_[i].shape()) {
        throw ShapeError("parameter " + names_[i] + " has shape " + tk::shape_str(params_[i].shape()) + ", expected " +
                         tk::shape_str(ref.params_[i].shape()));
      }
    }
  }

  const ToyDiTConfig& config() const { return cfg_; }
  const std::vector<std::string>& names() const { return names_; }
  std::vector<Tensor>& params() { return params_; }
  const std::vector<Tensor>& params() const { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.numel();
    return n;
  }

  // Velocity prediction u(x_s, C, s) -> [T, L, d], differentiable in p.
  Tensor forward(const std::vector<Tensor>& p, const Tensor& x, const Tensor& cond, double s,
                 const ForwardOptions& opt = {}) const {
    check_inputs(x, cond);
    const std::size_t frames = x.dim(0), n = cfg_.latent_tokens, d = cfg_.width;
    const std::size_t ws = opt.self_half_width.value_or(cfg_.window.self_half_width);
    const std::size_t wc = opt.cross_half_width.value_or(cfg_.window.cross_half_width);
    const swattn::RotaryConfig rope{d, cfg_.rope_base};
    const swattn::AttentionOptions aopt{opt.frame_offset, 1};
    const auto cond2 = tk::reshape(cond, Shape{frames * cfg_.cond_tokens, d});
    const auto temb = time_embedding(p, s);
    auto h = linear(tk::reshape(x, Shape{frames * n, d}), p[0], p[1]);
    h = tk::add(tk::reshape(h, Shape{frames, n, d}), p[2]);
    std::size_t idx = kHeadParams;
    for (std::size_t b = 0; b < cfg_.blocks; ++b, idx += kBlockParams) {
      h = tk::add(h, temb);
      // self attention
      {
        const auto a = ln2d(h);
        const auto q = tk::reshape(tk::matmul(a, p[idx + 0]), Shape{frames, n, d});
        const auto k = tk::reshape(tk::matmul(a, p[idx + 1]), Shape{frames, n, d});
        const auto v = tk::reshape(tk::matmul(a, p[idx + 2]), Shape{frames, n, d});
        const bool win = opt.path == AttentionPath::kWindowed && cfg_.window.self_windowed(b);
        const auto att = win ? swattn::windowed_attention(q, k, v, ws, rope, aopt) : swattn::per_frame_attention(q, k, v);
        h = tk::add(h, tk::reshape(tk::matmul(tk::reshape(att, Shape{frames * n, d}), p[idx + 3]), Shape{frames, n, d}));
      }
      // cross attention on condition tokens
      {
        const auto a = ln2d(h);
        const auto q = tk::reshape(tk::matmul(a, p[idx + 4]), Shape{frames, n, d});
        const auto k = tk::reshape(tk::matmul(cond2, p[idx + 5]), Shape{frames, cfg_.cond_tokens, d});
        const auto v = tk::reshape(tk::matmul(cond2, p[idx + 6]), Shape{frames, cfg_.cond_tokens, d});
        const bool win = opt.path == AttentionPath::kWindowed && cfg_.window.cross_windowed(b);
        const auto att =
            win ? swattn::cross_windowed_attention(q, k, v, wc, rope, aopt) : swattn::per_frame_attention(q, k, v);
        h = tk::add(h, tk::reshape(tk::matmul(tk::reshape(att, Shape{frames * n, d}), p[idx + 7]), Shape{frames, n, d}));
      }
      // feed-forward
      {
        const auto a = ln2d(h);
        const auto f = linear(tk::silu(linear(a, p[idx + 8], p[idx + 9])), p[idx + 10], p[idx + 11]);
        h = tk::add(h, tk::reshape(f, Shape{frames, n, d}));
      }
    }
    return output_head(p, h, x, idx);
  }

  Tensor forward(const Tensor& x, const Tensor& cond, double s, const ForwardOptions& opt = {}) const {
    return forward(params_, x, cond, s, opt);
  }

  // Same function as forward(); windowed layers stream frames through a
  // rolling KV cache of 2W+1 frames. No tape.
  Tensor forward_streaming(const Tensor& x, const Tensor& cond, double s, const ForwardOptions& opt = {},
                           StreamStats* stats = nullptr) const {
    check_inputs(x, cond);
    const auto& p = params_;
    const std::size_t frames = x.dim(0), n = cfg_.latent_tokens, d = cfg_.width, nc = cfg_.cond_tokens;
    const std::size_t ws = opt.self_half_width.value_or(cfg_.window.self_half_width);
    const std::size_t wc = opt.cross_half_width.value_or(cfg_.window.cross_half_width);
    const swattn::RotaryConfig rope{d, cfg_.rope_base};
    const auto cond2 = tk::reshape(cond.detach(), Shape{frames * nc, d});
    const auto temb = time_embedding(p, s);
    auto h = linear(tk::reshape(x.detach(), Shape{frames * n, d}), p[0], p[1]);
    h = tk::add(tk::reshape(h, Shape{frames, n, d}), p[2]);

    auto stream = [&](const Tensor& q2, const Tensor& k2, const Tensor& v2, std::size_t m, std::size_t half_width) {
      swattn::StreamingAttention<double> sa(half_width, rope);
      std::vector<Tensor> outs;
      outs.reserve(frames);
      auto take = [&](std::vector<swattn::FrameOutput<double>> fo) {
        for (auto& o : fo) outs.push_back(std::move(o.out));
      };
      for (std::size_t t = 0; t < frames; ++t) {
        take(sa.push(opt.frame_offset + static_cast<std::int64_t>(t), tk::narrow(q2, 0, t * n, n),
                     tk::narrow(k2, 0, t * m, m), tk::narrow(v2, 0, t * m, m)));
        if (stats) stats->peak_cached_frames = std::max(stats->peak_cached_frames, sa.cache().peak_frames());
      }
      take(sa.finish());
      return tk::concat(outs, 0);
    };

    std::size_t idx = kHeadParams;
    for (std::size_t b = 0; b < cfg_.blocks; ++b, idx += kBlockParams) {
      h = tk::add(h, temb);
      {
        const auto a = ln2d(h);
        const auto q = tk::matmul(a, p[idx + 0]), k = tk::matmul(a, p[idx + 1]), v = tk::matmul(a, p[idx + 2]);
        const bool win = opt.path == AttentionPath::kWindowed && cfg_.window.self_windowed(b);
        const auto att = win ? stream(q, k, v, n, ws)
                             : tk::reshape(swattn::per_frame_attention(tk::reshape(q, Shape{frames, n, d}),
                                                                       tk::reshape(k, Shape{frames, n, d}),
                                                                       tk::reshape(v, Shape{frames, n, d})),
                                           Shape{frames * n, d});
        h = tk::add(h, tk::reshape(tk::matmul(att, p[idx + 3]), Shape{frames, n, d}));
      }
      {
        const auto a = ln2d(h);
        const auto q = tk::matmul(a, p[idx + 4]), k = tk::matmul(cond2, p[idx + 5]), v = tk::matmul(cond2, p[idx + 6]);
        const bool win = opt.path == AttentionPath::kWindowed && cfg_.window.cross_windowed(b);
        const auto att = win ? stream(q, k, v, nc, wc)
                             : tk::reshape(swattn::per_frame_attention(tk::reshape(q, Shape{frames, n, d}),
                                                                       tk::reshape(k, Shape{frames, nc, d}),
                                                                       tk::reshape(v, Shape{frames, nc, d})),
                                           Shape{frames * n, d});
        h = tk::add(h, tk::reshape(tk::matmul(att, p[idx + 7]), Shape{frames, n, d}));
      }
      {
        const auto a = ln2d(h);
        const auto f = linear(tk::silu(linear(a, p[idx + 8], p[idx + 9])), p[idx + 10], p[idx + 11]);
        h = tk::add(h, tk::reshape(f, Shape{frames, n, d}));
      }
    }
    return output_head(p, h, x.detach(), idx);
  }

  VelocityFn velocity(ForwardOptions opt = {}, bool streaming = false) const {
    return [this, opt, streaming](const Tensor& x, const Tensor& cond, double s) {
      return streaming ? forward_streaming(x, cond, s, opt) : forward(x, cond, s, opt);
    };
  }

 private:
  static constexpr std::size_t kHeadParams = 7;    // in.w in.b pos time.w1 time.b1 time.w2 time.b2
  static constexpr std::size_t kBlockParams = 12;

  void add(std::string name, Tensor t) {
    names_.push_back(std::move(name));
    params_.push_back(std::move(t));
  }

  void check_inputs(const Tensor& x, const Tensor& cond) const {
    const std::size_t d = cfg_.width;
    if (x.rank() != 3 || x.dim(1) != cfg_.latent_tokens || x.dim(2) != d) {
      throw ShapeError("latents must be [T," + std::to_string(cfg_.latent_tokens) + "," + std::to_string(d) + "], got " +
                       tk::shape_str(x.shape()));
    }
    if (cond.rank() != 3 || cond.dim(0) != x.dim(0) || cond.dim(1) != cfg_.cond_tokens || cond.dim(2) != d) {
      throw ShapeError("conditions must be [T," + std::to_string(cfg_.cond_tokens) + "," + std::to_string(d) +
                       "], got " + tk::shape_str(cond.shape()));
    }
  }

  static Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return tk::add(tk::matmul(x, w), b); }

  Tensor ln2d(const Tensor& h) const {
    return tk::layer_norm(tk::reshape(h, Shape{h.numel() / cfg_.width, cfg_.width}), cfg_.ln_eps);
  }

  // out.w LN(h) + out.b + x skip.w
  Tensor output_head(const std::vector<Tensor>& p, const Tensor& h, const Tensor& x, std::size_t idx) const {
    const std::size_t frames = x.dim(0), n = cfg_.latent_tokens, d = cfg_.width;
    const auto skip = tk::matmul(tk::reshape(x, Shape{frames * n, d}), p[idx + 2]);
    return tk::reshape(tk::add(linear(ln2d(h), p[idx], p[idx + 1]), skip), Shape{frames, n, d});
  }

  Tensor time_embedding(const std::vector<Tensor>& p, double s) const {
    const Tensor f(Shape{1, cfg_.time_dim}, time_features(s, cfg_.time_dim));
    const auto e = linear(tk::silu(linear(f, p[3], p[4])), p[5], p[6]);
    return tk::reshape(e, Shape{cfg_.width});
  }

  ToyDiTConfig cfg_;
  std::vector<std::string> names_;
  std::vector<Tensor> params_;
};

// ---------------------------------------------------------------------------
// Flow matching

inline Tensor flow_target(const Tensor& x0, const Tensor& x1) {
  if (x0.shape() != x1.shape()) {
    throw ShapeError("flow_target shapes differ: " + tk::shape_str(x0.shape()) + " vs " + tk::shape_str(x1.shape()));
  }
  return tk::sub(x1, x0);
}

struct FlowBatch {
  Tensor x0;
  Tensor x1;
  double s = 0.0;
  std::uint64_t seed = 0;

  Tensor interpolant() const { return tk::add(tk::scale(x0, 1.0 - s), tk::scale(x1, s)); }
};

inline FlowBatch make_flow_batch(const Tensor& x1, double s, std::uint64_t seed) {
  if (!(s >= 0.0 && s <= 1.0)) throw ContractError("flow time must lie in [0,1], got " + std::to_string(s));
  return {Tensor::gaussian(x1.shape(), {seed, 0.0, 1.0}), x1.detach(), s, seed};
}

enum class LossTarget { kCenterFrame, kAllFrames };

// Frames [lo, lo+len) of a clip of half-width W around t, clamped to [0, T).
struct ClipWindow {
  std::size_t lo = 0;
  std::size_t len = 0;
  std::size_t center = 0;  // index of t inside the clip
};

inline ClipWindow window_clip(std::size_t t, std::size_t half_width, std::size_t frames) {
  const auto r = swattn::window_range(t, half_width, frames);
  return {r.lo, r.size(), t - r.lo};
}

// Mean squared error between u(x_s) and v* = x1 - x0 on the target frame
// (default: the clip's middle) or on every frame.
inline Tensor fm_loss(const VelocityFn& model, const FlowBatch& batch, const Tensor& cond,
                      LossTarget target = LossTarget::kCenterFrame, std::optional<std::size_t> target_frame = {}) {
  if (!(batch.s >= 0.0 && batch.s <= 1.0)) throw ContractError("flow time must lie in [0,1]");
  const auto v_star = flow_target(batch.x0, batch.x1);
  const auto pred = model(batch.interpolant(), cond, batch.s);
  if (pred.shape() != v_star.shape()) {
    throw ShapeError("model output " + tk::shape_str(pred.shape()) + " does not match latents " +
                     tk::shape_str(v_star.shape()));
  }
  Tensor diff = tk::sub(pred, v_star);
  if (target == LossTarget::kCenterFrame) {
    const std::size_t t = target_frame.value_or(v_star.dim(0) / 2);
    diff = tk::narrow(diff, 0, t, 1);
  }
  return tk::mean(tk::mul(diff, diff));
}

inline Tensor fm_loss(const VelocityFn& model, const Tensor& x1, const Tensor& cond, double s, std::uint64_t seed,
                      LossTarget target = LossTarget::kCenterFrame, std::optional<std::size_t> target_frame = {}) {
  return fm_loss(model, make_flow_batch(x1, s, seed), cond, target, target_frame);
}

// Independent standard Gaussian noise per frame, seeded by (seed, absolute frame).
inline Tensor initial_noise(std::size_t frames, std::size_t tokens, std::size_t width, std::uint64_t seed,
                            std::int64_t frame_offset = 0) {
  std::vector<double> data;
  data.reserve(frames * tokens * width);
  for (std::size_t t = 0; t < frames; ++t) {
    const auto f = static_cast<std::uint64_t>(frame_offset + static_cast<std::int64_t>(t));
    const auto noise = Tensor::gaussian(Shape{tokens * width}, {mix_seed(seed, f), 0.0, 1.0});
    data.insert(data.end(), noise.data().begin(), noise.data().end());
  }
  return Tensor(Shape{frames, tokens, width}, std::move(data));
}

// Uniform Euler steps of dx/ds = u(x, C, s) from s = 0 to 1, all frames jointly.
inline Tensor euler_integrate(const VelocityFn& u, Tensor x, const Tensor& cond, std::size_t steps) {
  if (steps == 0) throw ContractError("euler sampling needs at least one step");
  const double dt = 1.0 / static_cast<double>(steps);
  for (std::size_t k = 0; k < steps; ++k) {
    const double s = static_cast<double>(k) * dt;
    x = tk::add(x, tk::scale(u(x, cond, s).detach(), dt));
  }
  return x;
}

inline Tensor euler_sample(const VelocityFn& u, const Tensor& cond, std::size_t tokens, std::size_t width,
                           std::size_t steps, std::uint64_t seed, std::int64_t frame_offset = 0) {
  if (cond.rank() != 3) throw ShapeError("conditions must be [T,Nc,d]");
  return euler_integrate(u, initial_noise(cond.dim(0), tokens, width, seed, frame_offset), cond, steps);
}

inline Tensor euler_sample(const ToyDiT& model, const Tensor& cond, std::size_t steps, std::size_t half_width,
                           std::uint64_t seed, bool streaming = false) {
  ForwardOptions opt;
  opt.self_half_width = half_width;
  opt.cross_half_width = half_width;
  return euler_sample(model.velocity(opt, streaming), cond, model.config().latent_tokens, model.config().width, steps,
                      seed);
}

// ---------------------------------------------------------------------------
// Synthetic data

struct MotionParams {
  double center_amplitude = 0.25;
  double axis_amplitude = 0.2;
  double period = 32.0;  // frames
  Vec3 base_axes{0.45, 0.3, 0.25};
};

struct MotionState {
  Vec3 center{0, 0, 0};
  Vec3 axes{0, 0, 0};
};

// Per-seed sinusoidal motion of an ellipsoid's center and semi-axes.
struct EllipsoidMotion {
  MotionParams params;
  std::array<double, 3> center_phase{}, center_period{};
  std::array<double, 3> axis_phase{}, axis_period{};

  EllipsoidMotion(std::uint64_t seed, MotionParams p) : params(p) {
    std::mt19937_64 rng(mix_seed(seed, 0x6d6f74696f6eULL));
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi), stretch(0.8, 1.2);
    for (int a = 0; a < 3; ++a) {
      center_phase[a] = phase(rng);
      center_period[a] = p.period * stretch(rng);
      axis_phase[a] = phase(rng);
      axis_period[a] = p.period * stretch(rng);
    }
  }

  // Per-axis amplitude of the center path (z moves half as much).
  double center_amplitude(int a) const { return params.center_amplitude * (a == 2 ? 0.5 : 1.0); }

  MotionState at(double t) const {
    MotionState s;
    for (int a = 0; a < 3; ++a) {
      s.center[a] = center_amplitude(a) * std::sin(2.0 * std::numbers::pi * t / center_period[a] + center_phase[a]);
      s.axes[a] = params.base_axes[a] *
                  (1.0 + params.axis_amplitude * std::sin(2.0 * std::numbers::pi * t / axis_period[a] + axis_phase[a]));
    }
    return s;
  }
};

// Fixed linear encoder between template-ellipsoid vertex positions and
// latent tokens: x = gain * E vec(P), E with orthonormal columns; decoding
// applies E^T / gain and reuses the template faces.
class LatentCodec {
 public:
  static constexpr double kGain = 3.0;
  static constexpr std::uint64_t kBasisSeed = 0x7434645f636f6465ULL;

  LatentCodec(std::size_t tokens, std::size_t width, std::size_t subdivisions = 2)
      : tokens_(tokens), width_(width), template_(make_icosphere(subdivisions)) {
    const std::size_t rows = tokens * width, cols = 3 * template_.vertices.size();
    if (cols > rows) {
      throw ShapeError("latent of " + std::to_string(rows) + " entries cannot hold " + std::to_string(cols) +
                       " vertex coordinates");
    }
    std::mt19937_64 rng(kBasisSeed);
    std::normal_distribution<double> g(0.0, 1.0);
    Eigen::MatrixXd a(rows, cols);
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      for (Eigen::Index i = 0; i < a.rows(); ++i) a(i, j) = g(rng);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
    basis_ = qr.householderQ() * Eigen::MatrixXd::Identity(rows, cols);
  }

  std::size_t tokens() const { return tokens_; }
  std::size_t width() const { return width_; }
  std::size_t vertex_count() const { return template_.vertices.size(); }
  const MeshFrame& unit_template() const { return template_; }
  const Eigen::MatrixXd& basis() const { return basis_; }

  MeshFrame ellipsoid(const MotionState& s) const {
    MeshFrame m = template_;
    for (auto& v : m.vertices)
      for (int a = 0; a < 3; ++a) v[a] = s.center[a] + s.axes[a] * v[a];
    return m;
  }

  // [L, d]
  Tensor encode(const MeshFrame& mesh) const {
    if (mesh.vertices.size() != vertex_count()) {
      throw ShapeError("mesh has " + std::to_string(mesh.vertices.size()) + " vertices, codec expects " +
                       std::to_string(vertex_count()));
    }
    Eigen::VectorXd p(3 * vertex_count());
    for (std::size_t i = 0; i < mesh.vertices.size(); ++i)
      for (int a = 0; a < 3; ++a) p(static_cast<Eigen::Index>(3 * i + a)) = mesh.vertices[i][a];
    const Eigen::VectorXd x = kGain * (basis_ * p);
    return Tensor(Shape{tokens_, width_}, std::vector<double>(x.data(), x.data() + x.size()));
  }

  MeshFrame decode(const Tensor& frame) const {
    if (frame.numel() != tokens_ * width_) throw ShapeError("latent frame has wrong size " + tk::shape_str(frame.shape()));
    const Eigen::Map<const Eigen::VectorXd> x(frame.data().data(), static_cast<Eigen::Index>(frame.numel()));
    const Eigen::VectorXd p = basis_.transpose() * x / kGain;
    MeshFrame m;
    m.faces = template_.faces;
    m.vertices.resize(vertex_count());
    for (std::size_t i = 0; i < m.vertices.size(); ++i)
      for (int a = 0; a < 3; ++a) m.vertices[i][a] = p(static_cast<Eigen::Index>(3 * i + a));
    return m;
  }

  MeshSequence decode_sequence(const Tensor& latents) const {
    if (latents.rank() != 3) throw ShapeError("latent sequence must be [T,L,d]");
    MeshSequence seq;
    const std::size_t per = tokens_ * width_;
    for (std::size_t t = 0; t < latents.dim(0); ++t) {
      std::vector<double> f(latents.data().begin() + t * per, latents.data().begin() + (t + 1) * per);
      seq.frames.push_back(decode(Tensor(Shape{tokens_, width_}, std::move(f))));
    }
    return seq;
  }

 private:
  std::size_t tokens_, width_;
  MeshFrame template_;
  Eigen::MatrixXd basis_;
};

// Condition tokens: fixed affine map of the motion state (center, axis
// deviation) shared by all sequences.
class ConditionEncoder {
 public:
  static constexpr std::uint64_t kSeed = 0x636f6e6469746eULL;
  static constexpr double kGain = 4.0;

  ConditionEncoder(std::size_t tokens, std::size_t width, MotionParams ref = {})
      : tokens_(tokens), width_(width), ref_(ref) {
    std::mt19937_64 rng(kSeed);
    std::normal_distribution<double> g(0.0, 1.0);
    proj_.resize(tokens * width * 6);
    offset_.resize(tokens * width);
    for (auto& v : proj_) v = g(rng) / std::sqrt(6.0);
    for (auto& v : offset_) v = 0.5 * g(rng);
  }

  // [Nc, d]
  Tensor encode(const MotionState& s) const {
    const std::array<double, 6> z{s.center[0], s.center[1], s.center[2], s.axes[0] - ref_.base_axes[0],
                                  s.axes[1] - ref_.base_axes[1], s.axes[2] - ref_.base_axes[2]};
    std::vector<double> out(offset_);
    for (std::size_t i = 0; i < out.size(); ++i)
      for (std::size_t k = 0; k < 6; ++k) out[i] += kGain * proj_[i * 6 + k] * z[k];
    return Tensor(Shape{tokens_, width_}, std::move(out));
  }

 private:
  std::size_t tokens_, width_;
  MotionParams ref_;
  std::vector<double> proj_, offset_;
};

struct SyntheticSequence {
  Tensor latents;     // [T, L, d]
  Tensor conditions;  // [T, Nc, d]
  MeshSequence meshes;
  std::vector<MotionState> states;
};

inline Tensor stack_frames(const std::vector<Tensor>& frames) {
  if (frames.empty()) throw ShapeError("no frames to stack");
  Shape shape{frames.size()};
  for (auto e : frames.front().shape()) shape.push_back(e);
  std::vector<double> data;
  data.reserve(tk::shape_numel(shape));
  for (const auto& f : frames) {
    if (f.shape() != frames.front().shape()) throw ShapeError("frames differ in shape");
    data.insert(data.end(), f.data().begin(), f.data().end());
  }
  return Tensor(std::move(shape), std::move(data));
}

inline SyntheticSequence synth_sequence(std::uint64_t seed, std::size_t frames, const MotionParams& motion,
                                        const LatentCodec& codec, const ConditionEncoder& cond_enc) {
  if (frames == 0) throw ContractError("synthetic sequence needs at least one frame");
  const EllipsoidMotion path(seed, motion);
  SyntheticSequence out;
  std::vector<Tensor> lat, cond;
  for (std::size_t t = 0; t < frames; ++t) {
    const auto s = path.at(static_cast<double>(t));
    out.states.push_back(s);
    out.meshes.frames.push_back(codec.ellipsoid(s));
    lat.push_back(codec.encode(out.meshes.frames.back()));
    cond.push_back(cond_enc.encode(s));
  }
  out.latents = stack_frames(lat);
  out.conditions = stack_frames(cond);
  return out;
}

struct SyntheticDataset {
  std::vector<SyntheticSequence> sequences;
};

struct DatasetConfig {
  std::vector<std::uint64_t> seeds{0, 1, 2, 3};
  std::size_t frames = 96;
  MotionParams motion;
};

inline SyntheticDataset make_dataset(const DatasetConfig& cfg, const LatentCodec& codec, const ConditionEncoder& enc) {
  if (cfg.seeds.empty()) throw InputError("dataset needs at least one sequence seed");
  SyntheticDataset ds;
  for (auto s : cfg.seeds) ds.sequences.push_back(synth_sequence(s, cfg.frames, cfg.motion, codec, enc));
  return ds;
}

// Start frames of clips of `clip` frames every `hop` frames; a sequence
// shorter than one clip yields the single start 0.
inline std::vector<std::size_t> clip_starts(std::size_t frames, std::size_t clip, std::size_t hop) {
  if (clip == 0 || hop == 0) throw ContractError("clip length and hop must be positive");
  std::vector<std::size_t> out;
  if (frames <= clip) return {0};
  for (std::size_t s = 0; s + clip <= frames; s += hop) out.push_back(s);
  return out;
}

// ---------------------------------------------------------------------------
// Training

// Flow-time distribution during training: U(0,1), or sigmoid(N(0,1)).
enum class TimeSampling { kUniform, kLogitNormal };

struct TrainConfig {
  std::size_t steps = 2000;
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::size_t clip = 48;
  std::size_t hop = 24;
  LossTarget target = LossTarget::kAllFrames;
  TimeSampling time_sampling = TimeSampling::kLogitNormal;
  std::size_t warmup = 50;    // linear ramp, then cosine decay to 2% of lr
  bool cosine_decay = true;
  std::uint64_t seed = 0;
};

struct TrainResult {
  std::vector<double> losses;
};

inline double scheduled_lr(const TrainConfig& cfg, std::size_t step) {
  if (step < cfg.warmup) return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup);
  if (!cfg.cosine_decay) return cfg.lr;
  return cosine_lr(cfg.lr, static_cast<long>(step - cfg.warmup), static_cast<long>(cfg.steps - cfg.warmup), 0.02);
}

inline TrainResult train_demo(ToyDiT& model, const SyntheticDataset& data, const TrainConfig& cfg,
                              const std::function<void(std::size_t, double)>& progress = {}) {
  if (data.sequences.empty()) throw InputError("empty training dataset");
  struct Clip {
    std::size_t seq, start, len;
  };
  std::vector<Clip> clips;
  for (std::size_t i = 0; i < data.sequences.size(); ++i) {
    const std::size_t frames = data.sequences[i].latents.dim(0);
    for (auto s : clip_starts(frames, cfg.clip, cfg.hop)) clips.push_back({i, s, std::min(cfg.clip, frames - s)});
  }
  Adam<double> adam({cfg.lr, cfg.beta1, cfg.beta2, 1e-8});
  std::mt19937_64 rng(mix_seed(cfg.seed, 0x747261696eULL));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::size_t> order;
  TrainResult result;
  result.losses.reserve(cfg.steps);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    if (order.empty()) {
      order.resize(clips.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      std::shuffle(order.begin(), order.end(), rng);
    }
    const Clip c = clips[order.back()];
    order.pop_back();
    const auto& seq = data.sequences[c.seq];
    const auto x1 = tk::narrow(seq.latents, 0, c.start, c.len);
    const auto cond = tk::narrow(seq.conditions, 0, c.start, c.len);
    const double s = cfg.time_sampling == TimeSampling::kUniform ? unit(rng) : 1.0 / (1.0 + std::exp(-normal(rng)));

    tk::Tape<double> tape;
    std::vector<Tensor> watched;
    watched.reserve(model.params().size());
    for (const auto& p : model.params()) watched.push_back(tape.watch(p));
    const VelocityFn u = [&](const Tensor& x, const Tensor& cn, double sv) { return model.forward(watched, x, cn, sv); };
    const auto loss = fm_loss(u, x1, cond, s, mix_seed(cfg.seed, step), cfg.target);
    const double lv = loss.item();
    if (!std::isfinite(lv)) throw NumericError("training loss is not finite at step " + std::to_string(step));
    const auto grads = tk::backward(loss);
    std::vector<Tensor*> params;
    for (auto& p : model.params()) params.push_back(&p);
    adam.step(params, grads, scheduled_lr(cfg, step));
    result.losses.push_back(lv);
    if (progress) progress(step, lv);
  }
  return result;
}

// Trailing moving average over `window` steps.
inline std::vector<double> smoothed(const std::vector<double>& values, std::size_t window) {
  if (window == 0) throw ContractError("smoothing window must be positive");
  std::vector<double> out(values.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    acc += values[i];
    if (i >= window) acc -= values[i - window];
    out[i] = acc / static_cast<double>(std::min(i + 1, window));
  }
  return out;
}

inline void write_loss_csv(const std::filesystem::path& path, const std::vector<double>& losses) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "step,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < losses.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i, losses[i]);
    out << buf;
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: "T4DCKPT\0", u32 version, config, then named parameters.
// All integers u64 little-endian unless noted; values are IEEE doubles.

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'T', '4', 'D', 'C', 'K', 'P', 'T', '\0'};

class CheckpointVersionError : public IoError {
 public:
  CheckpointVersionError(std::uint32_t found, std::uint32_t expected)
      : IoError("checkpoint version " + std::to_string(found) + " is not supported (expected " +
                std::to_string(expected) + ")"),
        found_(found),
        expected_(expected) {}
  std::uint32_t found() const { return found_; }
  std::uint32_t expected() const { return expected_; }

 private:
  std::uint32_t found_, expected_;
};

namespace detail {

template <class V>
void put(std::ostream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class V>
V get(std::istream& in, const std::string& what) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw IoError("truncated checkpoint while reading " + what);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const ToyDiT& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  const auto& c = model.config();
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  for (std::uint64_t v : {c.blocks, c.width, c.latent_tokens, c.cond_tokens, c.time_dim, c.ffn_mult,
                          c.window.self_half_width, c.window.cross_half_width, c.window.self_layer_stride,
                          c.window.cross_layer_stride, c.window.self_layer_offset, c.window.cross_layer_offset}) {
    detail::put<std::uint64_t>(out, v);
  }
  detail::put<double>(out, c.rope_base);
  detail::put<double>(out, c.ln_eps);
  detail::put<std::uint64_t>(out, model.params().size());
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    const auto& name = model.names()[i];
    const auto& p = model.params()[i];
    detail::put<std::uint64_t>(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put<std::uint64_t>(out, p.rank());
    for (auto e : p.shape()) detail::put<std::uint64_t>(out, e);
    out.write(reinterpret_cast<const char*>(p.data().data()), static_cast<std::streamsize>(p.numel() * sizeof(double)));
  }
  if (!out) throw IoError("write failed for " + path.string());
}

inline ToyDiT load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) throw IoError(path.string() + ": not a checkpoint");
  const auto version = detail::get<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) throw CheckpointVersionError(version, kCheckpointVersion);
  ToyDiTConfig c;
  std::size_t* fields[] = {&c.blocks, &c.width, &c.latent_tokens, &c.cond_tokens, &c.time_dim, &c.ffn_mult,
                           &c.window.self_half_width, &c.window.cross_half_width, &c.window.self_layer_stride,
                           &c.window.cross_layer_stride, &c.window.self_layer_offset, &c.window.cross_layer_offset};
  for (auto* f : fields) *f = static_cast<std::size_t>(detail::get<std::uint64_t>(in, "config"));
  c.rope_base = detail::get<double>(in, "config");
  c.ln_eps = detail::get<double>(in, "config");
  const auto count = detail::get<std::uint64_t>(in, "parameter count");
  if (count > 100000) throw IoError("implausible parameter count in checkpoint");
  std::vector<std::string> names;
  std::vector<Tensor> params;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = detail::get<std::uint64_t>(in, "name length");
    if (len > 4096) throw IoError("implausible parameter name length in checkpoint");
    std::string name(len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(len));
    const auto rank = detail::get<std::uint64_t>(in, "rank");
    if (rank == 0 || rank > 8) throw IoError("bad tensor rank in checkpoint");
    Shape shape;
    for (std::uint64_t r = 0; r < rank; ++r) shape.push_back(detail::get<std::uint64_t>(in, "shape"));
    const auto n = tk::shape_numel(shape);
    if (n > (std::size_t{1} << 28)) throw IoError("implausible tensor size in checkpoint");
    std::vector<double> data(n);
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw IoError("truncated checkpoint data for " + name);
    names.push_back(std::move(name));
    params.emplace_back(std::move(shape), std::move(data));
  }
  return ToyDiT(c, std::move(names), std::move(params));
}

}  // namespace tempo4d::flowmatch
