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

// Sliding-window temporal attention with 1D rotary phase along time.
//
// Every token of frame t has its query/key rotated by R_t, a block-diagonal
// rotation with pair angles t * w_j. A query at frame t attends to all keys
// of frames tau with |tau - t| <= W (clamped to the sequence), under a single
// softmax. Values are never rotated. At W = 0 the rotation cancels and the
// result is plain per-frame attention.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <optional>
#include <vector>

#include "tempo4d/errors.hpp"
#include "tempo4d/tensorkit.hpp"

namespace tempo4d::swattn {

using tk::Shape;
using tk::Tensor;

struct RotaryConfig {
  std::size_t dim = 32;
  double base = 10000.0;

  void validate() const {
    if (dim == 0 || dim % 2 != 0) throw ShapeError("rotary dim must be even and positive, got " + std::to_string(dim));
    if (!(base > 1.0)) throw ContractError("rotary base must exceed 1");
  }

  // w_j = base^(-2j/dim), j = 0 .. dim/2-1; strictly decreasing.
  std::vector<double> frequencies() const {
    validate();
    std::vector<double> w(dim / 2);
    for (std::size_t j = 0; j < w.size(); ++j) {
      w[j] = std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(dim));
    }
    return w;
  }
};

struct WindowSpec {
  std::size_t self_half_width = 2;
  std::size_t cross_half_width = 2;
  std::size_t self_layer_stride = 2;  // "Half": every other block
  std::size_t cross_layer_stride = 2;
  std::size_t self_layer_offset = 0;   // windowed self-attention on even blocks
  std::size_t cross_layer_offset = 1;  // windowed cross-attention on odd blocks

  void validate() const {
    if (self_layer_stride == 0 || cross_layer_stride == 0) throw ContractError("layer stride must be >= 1");
  }
  bool self_windowed(std::size_t block) const {
    return block >= self_layer_offset && (block - self_layer_offset) % self_layer_stride == 0;
  }
  bool cross_windowed(std::size_t block) const {
    return block >= cross_layer_offset && (block - cross_layer_offset) % cross_layer_stride == 0;
  }
};

template <std::floating_point T = double>
struct FrameTokens {
  Tensor<T> q, k, v;  // [T, N, D]

  std::size_t frames() const { return q.dim(0); }
  std::size_t tokens() const { return q.dim(1); }
  std::size_t width() const { return q.dim(2); }

  void validate() const {
    if (q.rank() != 3) throw ShapeError("frame tokens must be [T,N,D], got " + tk::shape_str(q.shape()));
    if (k.shape() != q.shape() || v.shape() != q.shape()) {
      throw ShapeError("Q/K/V shapes differ: " + tk::shape_str(q.shape()) + " " + tk::shape_str(k.shape()) + " " +
                       tk::shape_str(v.shape()));
    }
  }
};

struct AttentionOptions {
  std::int64_t frame_offset = 0;  // absolute index of frame 0
  std::size_t heads = 1;
  bool rotate_values = false;     // deliberate fault for mutation testing
};

// Softmax support (number of keys) seen by the queries of each frame.
struct AttentionStats {
  std::vector<std::size_t> keys_per_frame;
};

inline std::vector<double> rotation_angles(std::int64_t t, const RotaryConfig& cfg) {
  auto w = cfg.frequencies();
  for (auto& a : w) a *= static_cast<double>(t);
  return w;
}

struct WindowRange {
  std::size_t lo = 0;  // inclusive
  std::size_t hi = 0;  // inclusive
  std::size_t size() const { return hi - lo + 1; }
};

inline WindowRange window_range(std::size_t t, std::size_t half_width, std::size_t frames) {
  if (t >= frames) {
    throw ContractError("frame " + std::to_string(t) + " outside sequence of length " + std::to_string(frames));
  }
  WindowRange r;
  r.lo = t >= half_width ? t - half_width : 0;
  r.hi = std::min(frames - 1, t + half_width);
  return r;
}

// Omega_t = {tau : |tau - t| <= W} intersected with [0, T), ascending.
inline std::vector<std::size_t> window_indices(std::size_t t, std::size_t half_width, std::size_t frames) {
  const auto r = window_range(t, half_width, frames);
  std::vector<std::size_t> out;
  for (std::size_t tau = r.lo; tau <= r.hi; ++tau) out.push_back(tau);
  return out;
}

namespace detail {

// Rows of x belong to consecutive frames, `per_frame` rows each, the first
// at absolute index `first`. Builds out = x*C + (x P)*S with P swapping the
// members of each rotary pair.
template <class T>
Tensor<T> rope_rows(const Tensor<T>& x, std::size_t per_frame, std::int64_t first, const RotaryConfig& cfg) {
  if (x.rank() != 2 || x.dim(1) != cfg.dim) {
    throw ShapeError("rope: expected [rows," + std::to_string(cfg.dim) + "], got " + tk::shape_str(x.shape()));
  }
  const std::size_t rows = x.dim(0), d = cfg.dim;
  const auto w = cfg.frequencies();
  std::vector<T> c(rows * d), s(rows * d), p(d * d, T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    const double t = static_cast<double>(first + static_cast<std::int64_t>(r / per_frame));
    for (std::size_t j = 0; j < d / 2; ++j) {
      const double a = t * w[j];
      const T ca = static_cast<T>(std::cos(a)), sa = static_cast<T>(std::sin(a));
      c[r * d + 2 * j] = ca;
      c[r * d + 2 * j + 1] = ca;
      s[r * d + 2 * j] = -sa;
      s[r * d + 2 * j + 1] = sa;
    }
  }
  for (std::size_t j = 0; j < d / 2; ++j) {
    p[(2 * j + 1) * d + 2 * j] = T(1);
    p[(2 * j) * d + 2 * j + 1] = T(1);
  }
  const Tensor<T> cos_t(Shape{rows, d}, std::move(c));
  const Tensor<T> sin_t(Shape{rows, d}, std::move(s));
  const Tensor<T> swap(Shape{d, d}, std::move(p));
  return tk::add(tk::mul(x, cos_t), tk::mul(tk::matmul(x, swap), sin_t));
}

}  // namespace detail

// Rotates every token (row) of X [N, D] by R_t. Norm-preserving.
template <std::floating_point T>
Tensor<T> apply_rope(const Tensor<T>& x, std::int64_t t, const RotaryConfig& cfg) {
  cfg.validate();
  return detail::rope_rows(x, x.dim(0), t, cfg);
}

// Softmax(Q K^T / sqrt(D)) V.
template <std::floating_point T>
Tensor<T> vanilla_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0)) {
    throw ShapeError("attention shapes: Q" + tk::shape_str(q.shape()) + " K" + tk::shape_str(k.shape()) + " V" +
                     tk::shape_str(v.shape()));
  }
  const T inv = T(1) / std::sqrt(static_cast<T>(q.dim(1)));
  auto scores = tk::scale(tk::matmul(q, tk::transpose(k)), inv);
  return tk::matmul(tk::softmax_lastdim(scores), v);
}

namespace detail {

template <class T>
Tensor<T> windowed_single_head(const Tensor<T>& q2, const Tensor<T>& k2, const Tensor<T>& v2, std::size_t frames,
                               std::size_t n, std::size_t m, std::size_t half_width, const RotaryConfig& cfg,
                               std::int64_t offset, AttentionStats* stats, bool rotate_values) {
  const auto qr = rope_rows(q2, n, offset, cfg);
  const auto kr = rope_rows(k2, m, offset, cfg);
  const auto vr = rotate_values ? rope_rows(v2, m, offset, cfg) : v2;
  std::vector<Tensor<T>> outs;
  outs.reserve(frames);
  for (std::size_t t = 0; t < frames; ++t) {
    const auto r = window_range(t, half_width, frames);
    const auto qt = tk::narrow(qr, 0, t * n, n);
    const auto kw = tk::narrow(kr, 0, r.lo * m, r.size() * m);
    const auto vw = tk::narrow(vr, 0, r.lo * m, r.size() * m);
    if (stats) stats->keys_per_frame.push_back(kw.dim(0));
    outs.push_back(vanilla_attention(qt, kw, vw));
  }
  return tk::concat(outs, 0);
}

}  // namespace detail

// Generic windowed attention: queries q [T,N,D] over keys/values k, v
// [T,M,D] of the frames in each query frame's window. Differentiable.
template <std::floating_point T>
Tensor<T> windowed_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t half_width,
                             const RotaryConfig& cfg, const AttentionOptions& opt = {},
                             AttentionStats* stats = nullptr) {
  if (q.rank() != 3 || k.rank() != 3 || v.shape() != k.shape() || q.dim(0) != k.dim(0) || q.dim(2) != k.dim(2)) {
    throw ShapeError("windowed attention shapes: Q" + tk::shape_str(q.shape()) + " K" + tk::shape_str(k.shape()) +
                     " V" + tk::shape_str(v.shape()));
  }
  const std::size_t frames = q.dim(0), n = q.dim(1), m = k.dim(1), d = q.dim(2);
  if (opt.heads == 0 || d % opt.heads != 0) throw ShapeError("width not divisible into heads");
  const std::size_t dh = d / opt.heads;
  if (cfg.dim != dh) {
    throw ShapeError("rotary dim " + std::to_string(cfg.dim) + " != head width " + std::to_string(dh));
  }
  cfg.validate();
  const auto q2 = tk::reshape(q, Shape{frames * n, d});
  const auto k2 = tk::reshape(k, Shape{frames * m, d});
  const auto v2 = tk::reshape(v, Shape{frames * m, d});
  if (stats) stats->keys_per_frame.clear();
  Tensor<T> out;
  if (opt.heads == 1) {
    out = detail::windowed_single_head(q2, k2, v2, frames, n, m, half_width, cfg, opt.frame_offset, stats,
                                       opt.rotate_values);
  } else {
    std::vector<Tensor<T>> heads;
    for (std::size_t h = 0; h < opt.heads; ++h) {
      heads.push_back(detail::windowed_single_head(tk::narrow(q2, 1, h * dh, dh), tk::narrow(k2, 1, h * dh, dh),
                                                   tk::narrow(v2, 1, h * dh, dh), frames, n, m, half_width, cfg,
                                                   opt.frame_offset, h == 0 ? stats : nullptr, opt.rotate_values));
    }
    out = tk::concat(heads, 1);
  }
  return tk::reshape(out, Shape{frames, n, d});
}

template <std::floating_point T>
Tensor<T> windowed_attention(const FrameTokens<T>& frames, std::size_t half_width, const RotaryConfig& cfg,
                             const AttentionOptions& opt = {}, AttentionStats* stats = nullptr) {
  frames.validate();
  return windowed_attention(frames.q, frames.k, frames.v, half_width, cfg, opt, stats);
}

// Queries from one stream, keys/values from per-frame condition tokens.
template <std::floating_point T>
Tensor<T> cross_windowed_attention(const Tensor<T>& queries, const Tensor<T>& cond_keys, const Tensor<T>& cond_values,
                                   std::size_t half_width, const RotaryConfig& cfg, const AttentionOptions& opt = {},
                                   AttentionStats* stats = nullptr) {
  return windowed_attention(queries, cond_keys, cond_values, half_width, cfg, opt, stats);
}

template <std::floating_point T>
Tensor<T> cross_windowed_attention(const Tensor<T>& queries, const Tensor<T>& cond, std::size_t half_width,
                                   const RotaryConfig& cfg, const AttentionOptions& opt = {},
                                   AttentionStats* stats = nullptr) {
  return windowed_attention(queries, cond, cond, half_width, cfg, opt, stats);
}

// Per-frame attention without any rotation, the W = 0 reference.
template <std::floating_point T>
Tensor<T> per_frame_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  const std::size_t frames = q.dim(0), n = q.dim(1), m = k.dim(1), d = q.dim(2);
  const auto q2 = tk::reshape(q, Shape{frames * n, d});
  const auto k2 = tk::reshape(k, Shape{frames * m, d});
  const auto v2 = tk::reshape(v, Shape{frames * m, d});
  std::vector<Tensor<T>> outs;
  for (std::size_t t = 0; t < frames; ++t) {
    outs.push_back(vanilla_attention(tk::narrow(q2, 0, t * n, n), tk::narrow(k2, 0, t * m, m), tk::narrow(v2, 0, t * m, m)));
  }
  return tk::reshape(tk::concat(outs, 0), Shape{frames, n, d});
}

// ---------------------------------------------------------------------------
// Streaming path. Plain numerics, no tape.

// Ring buffer of the last 2W+1 frames of rotated keys and raw values.
template <std::floating_point T = double>
class KVCache {
 public:
  struct Entry {
    std::int64_t frame = 0;
    std::vector<T> keys;    // [M, D], already rotated by R_frame
    std::vector<T> values;  // [M, D]
  };

  explicit KVCache(std::size_t half_width) : capacity_(2 * half_width + 1) {}

  void push(Entry e) {
    if (!entries_.empty() && e.frame != entries_.back().frame + 1) {
      throw ContractError("KV cache push out of order: " + std::to_string(e.frame) + " after " +
                          std::to_string(entries_.back().frame));
    }
    if (entries_.size() == capacity_) entries_.pop_front();
    entries_.push_back(std::move(e));
    peak_frames_ = std::max(peak_frames_, entries_.size());
    std::size_t keys = 0;
    for (const auto& en : entries_) keys += en.keys.size();
    peak_key_values_ = std::max(peak_key_values_, keys);
  }

  const std::deque<Entry>& entries() const { return entries_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t peak_frames() const { return peak_frames_; }
  // Peak number of stored key scalars (tokens * width).
  std::size_t peak_key_values() const { return peak_key_values_; }

  const Entry* find(std::int64_t frame) const {
    for (const auto& e : entries_) {
      if (e.frame == frame) return &e;
    }
    return nullptr;
  }

 private:
  std::size_t capacity_;
  std::deque<Entry> entries_;
  std::size_t peak_frames_ = 0;
  std::size_t peak_key_values_ = 0;
};

template <std::floating_point T = double>
struct FrameOutput {
  std::int64_t frame = 0;
  Tensor<T> out;  // [N, D]
};

// Emits the windowed attention output of frame t once frame t+W has been
// pushed (or at finish()). Matches windowed_attention on the full sequence
// with frame_offset equal to the first pushed index.
template <std::floating_point T = double>
class StreamingAttention {
 public:
  StreamingAttention(std::size_t half_width, RotaryConfig cfg, std::size_t heads = 1)
      : half_width_(half_width), cfg_(cfg), heads_(heads), cache_(half_width) {
    cfg_.validate();
    freqs_ = cfg_.frequencies();
  }

  std::vector<FrameOutput<T>> push(std::int64_t frame, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
    if (finished_) throw ContractError("push after finish");
    if (started_ && frame != last_ + 1) {
      throw ContractError("streaming frames must be pushed in order: got " + std::to_string(frame) + " after " +
                          std::to_string(last_));
    }
    if (q.rank() != 2 || k.rank() != 2 || v.shape() != k.shape() || q.dim(1) != k.dim(1) ||
        q.dim(1) != cfg_.dim * heads_) {
      throw ShapeError("streaming frame shapes: Q" + tk::shape_str(q.shape()) + " K" + tk::shape_str(k.shape()));
    }
    if (!started_) {
      first_ = frame;
      started_ = true;
    }
    last_ = frame;
    width_ = q.dim(1);
    cache_.push({frame, rotate(k.to_vector(), k.dim(0), frame), v.to_vector()});
    pending_.push_back({frame, q.dim(0), rotate(q.to_vector(), q.dim(0), frame)});
    std::vector<FrameOutput<T>> out;
    while (!pending_.empty() && pending_.front().frame + static_cast<std::int64_t>(half_width_) <= last_) {
      out.push_back(emit(pending_.front()));
      pending_.pop_front();
    }
    return out;
  }

  std::vector<FrameOutput<T>> finish() {
    finished_ = true;
    std::vector<FrameOutput<T>> out;
    while (!pending_.empty()) {
      out.push_back(emit(pending_.front()));
      pending_.pop_front();
    }
    return out;
  }

  const KVCache<T>& cache() const { return cache_; }

 private:
  struct PendingQuery {
    std::int64_t frame;
    std::size_t tokens;
    std::vector<T> rotated;
  };

  std::vector<T> rotate(std::vector<T> x, std::size_t tokens, std::int64_t frame) const {
    const std::size_t dh = cfg_.dim;
    for (std::size_t j = 0; j < dh / 2; ++j) {
      const double a = static_cast<double>(frame) * freqs_[j];
      const T c = static_cast<T>(std::cos(a)), s = static_cast<T>(std::sin(a));
      for (std::size_t i = 0; i < tokens; ++i) {
        for (std::size_t h = 0; h < heads_; ++h) {
          T* p = x.data() + i * width_ + h * dh + 2 * j;
          const T x0 = p[0], x1 = p[1];
          p[0] = x0 * c - x1 * s;
          p[1] = x0 * s + x1 * c;
        }
      }
    }
    return x;
  }

  FrameOutput<T> emit(const PendingQuery& pq) const {
    const std::int64_t lo = std::max(first_, pq.frame - static_cast<std::int64_t>(half_width_));
    const std::int64_t hi = std::min(last_, pq.frame + static_cast<std::int64_t>(half_width_));
    std::vector<const typename KVCache<T>::Entry*> window;
    for (std::int64_t tau = lo; tau <= hi; ++tau) {
      const auto* e = cache_.find(tau);
      if (!e) throw ContractError("frame " + std::to_string(tau) + " evicted before use");
      window.push_back(e);
    }
    const std::size_t d = width_, dh = cfg_.dim;
    const T inv = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<T> out(pq.tokens * d, T(0));
    std::vector<T> scores;
    for (std::size_t h = 0; h < heads_; ++h) {
      for (std::size_t i = 0; i < pq.tokens; ++i) {
        const T* qi = pq.rotated.data() + i * d + h * dh;
        scores.clear();
        for (const auto* e : window) {
          const std::size_t m = e->keys.size() / d;
          for (std::size_t j = 0; j < m; ++j) {
            const T* kj = e->keys.data() + j * d + h * dh;
            T dot = 0;
            for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
            scores.push_back(dot * inv);
          }
        }
        const T mx = *std::max_element(scores.begin(), scores.end());
        T z = 0;
        for (auto& s : scores) {
          s = std::exp(s - mx);
          z += s;
        }
        T* oi = out.data() + i * d + h * dh;
        std::size_t idx = 0;
        for (const auto* e : window) {
          const std::size_t m = e->values.size() / d;
          for (std::size_t j = 0; j < m; ++j, ++idx) {
            const T wgt = scores[idx] / z;
            const T* vj = e->values.data() + j * d + h * dh;
            for (std::size_t c = 0; c < dh; ++c) oi[c] += wgt * vj[c];
          }
        }
      }
    }
    return {pq.frame, Tensor<T>(Shape{pq.tokens, d}, std::move(out))};
  }

  std::size_t half_width_;
  RotaryConfig cfg_;
  std::size_t heads_;
  std::vector<double> freqs_;
  KVCache<T> cache_;
  std::deque<PendingQuery> pending_;
  std::int64_t first_ = 0;
  std::int64_t last_ = 0;
  std::size_t width_ = 0;
  bool started_ = false;
  bool finished_ = false;
};

}  // namespace tempo4d::swattn
