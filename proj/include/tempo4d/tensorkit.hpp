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

// Dense row-major tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is an immutable value (shape + shared data buffer). Operations on
// tensors that are attached to a Tape record a node on that tape; operations
// on detached tensors are plain numerics. A Tape is rebuilt for every forward
// pass:
//
//   tk::Tape<double> tape;
//   auto w = tape.watch(weights);          // leaf, requires_grad
//   auto loss = tk::mean(tk::mul(w, w));
//   auto grads = tk::backward(loss);       // keyed by tensor id
//   auto gw = grads.at(weights.id());

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tempo4d/errors.hpp"

namespace tempo4d::tk {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

template <std::floating_point T>
class Tensor;
template <std::floating_point T>
class Tape;

namespace detail {

inline std::uint64_t next_tensor_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

// Parent gradients are handed to a node's backward as pointers; nullptr marks
// a parent that is a constant (not on the tape).
template <class T>
using BackwardFn = std::function<void(std::span<const T> grad_out, std::span<std::vector<T>*> parent_grads)>;

template <class T>
struct Node {
  std::vector<int> parents;  // -1 for constant inputs
  std::size_t numel = 0;
  BackwardFn<T> backward;  // empty for leaves
  std::uint64_t leaf_id = 0;
  Shape shape;
};

template <class T>
struct TapeState {
  std::vector<Node<T>> nodes;
};

}  // namespace detail

struct Gaussian {
  std::uint64_t seed = 0;
  double mean = 0.0;
  double stddev = 1.0;
};

template <std::floating_point T = double>
class Tensor {
 public:
  using value_type = T;

  Tensor() : Tensor(Shape{1}, std::vector<T>{T(0)}) {}

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), id_(detail::next_tensor_id()) {
    for (auto e : shape_) {
      if (e == 0) throw ShapeError("tensor extent must be positive, got " + shape_str(shape_));
    }
    if (shape_.empty()) throw ShapeError("tensor needs at least one extent");
    if (data.size() != shape_numel(shape_)) {
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape_));
    }
    data_ = std::make_shared<const std::vector<T>>(std::move(data));
  }

  static Tensor zeros(const Shape& shape) { return full(shape, T(0)); }
  static Tensor ones(const Shape& shape) { return full(shape, T(1)); }

  static Tensor full(const Shape& shape, T value) {
    check_extents(shape);
    return Tensor(shape, std::vector<T>(shape_numel(shape), value));
  }

  static Tensor gaussian(const Shape& shape, const Gaussian& g) {
    check_extents(shape);
    std::mt19937_64 rng(g.seed);
    std::normal_distribution<double> dist(g.mean, g.stddev);
    std::vector<T> data(shape_numel(shape));
    for (auto& v : data) v = static_cast<T>(dist(rng));
    return Tensor(shape, std::move(data));
  }

  static Tensor scalar(T value) { return Tensor(Shape{1}, {value}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const noexcept { return data_->size(); }
  std::span<const T> data() const noexcept { return {data_->data(), data_->size()}; }
  std::vector<T> to_vector() const { return *data_; }
  T operator[](std::size_t i) const { return (*data_)[i]; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
    return (*data_)[0];
  }

  // Identity for gradient lookup; survives copies, watch() and replace_data().
  std::uint64_t id() const noexcept { return id_; }
  bool requires_grad() const noexcept { return requires_grad_; }
  bool on_tape() const noexcept { return tape_ != nullptr; }

  Tensor detach() const {
    Tensor out = *this;
    out.tape_.reset();
    out.node_ = -1;
    out.requires_grad_ = false;
    return out;
  }

  // Swap in a new buffer (same shape) while keeping the id. Used by optimizers.
  void replace_data(std::vector<T> data) {
    if (data.size() != numel()) throw ShapeError("replace_data size mismatch for " + shape_str(shape_));
    data_ = std::make_shared<const std::vector<T>>(std::move(data));
    tape_.reset();
    node_ = -1;
    requires_grad_ = false;
  }

  Tensor reshaped_value(Shape shape) const {
    if (shape_numel(shape) != numel()) throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(shape));
    Tensor out(std::move(shape), *data_);
    return out;
  }

 private:
  static void check_extents(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor needs at least one extent");
    for (auto e : shape) {
      if (e == 0) throw ShapeError("tensor extent must be positive, got " + shape_str(shape));
    }
  }

  Shape shape_;
  std::shared_ptr<const std::vector<T>> data_;
  std::uint64_t id_ = 0;
  std::shared_ptr<detail::TapeState<T>> tape_;
  int node_ = -1;
  bool requires_grad_ = false;

  friend class Tape<T>;
  template <class U>
  friend struct OpAccess;
};

// Gradients of tape leaves, keyed by Tensor::id().
template <std::floating_point T>
using GradMap = std::unordered_map<std::uint64_t, Tensor<T>>;

template <std::floating_point T = double>
class Tape {
 public:
  Tape() : state_(std::make_shared<detail::TapeState<T>>()) {}

  // Registers x as a differentiable leaf and returns the attached copy.
  Tensor<T> watch(const Tensor<T>& x) {
    if (x.tape_ && x.tape_ != state_) throw ContractError("tensor already attached to another tape");
    if (x.tape_ == state_) return x;
    detail::Node<T> node;
    node.numel = x.numel();
    node.leaf_id = x.id();
    node.shape = x.shape();
    state_->nodes.push_back(std::move(node));
    Tensor<T> out = x;
    out.tape_ = state_;
    out.node_ = static_cast<int>(state_->nodes.size() - 1);
    out.requires_grad_ = true;
    return out;
  }

  std::size_t size() const noexcept { return state_->nodes.size(); }

 private:
  std::shared_ptr<detail::TapeState<T>> state_;
};

// Internal op construction; also the extension point for fused kernels.
template <class T>
struct OpAccess {
  static const std::shared_ptr<detail::TapeState<T>>& tape(const Tensor<T>& t) { return t.tape_; }
  static int node(const Tensor<T>& t) { return t.node_; }

  static Tensor<T> make(Shape shape, std::vector<T> data, std::span<const Tensor<T>* const> inputs,
                        detail::BackwardFn<T> backward) {
    Tensor<T> out(std::move(shape), std::move(data));
    std::shared_ptr<detail::TapeState<T>> state;
    for (const auto* in : inputs) {
      if (!in->tape_) continue;
      if (state && state != in->tape_) throw ContractError("operands live on different tapes");
      state = in->tape_;
    }
    if (!state) return out;
    detail::Node<T> node;
    node.numel = out.numel();
    node.shape = out.shape();
    for (const auto* in : inputs) node.parents.push_back(in->tape_ ? in->node_ : -1);
    node.backward = std::move(backward);
    state->nodes.push_back(std::move(node));
    out.tape_ = state;
    out.node_ = static_cast<int>(state->nodes.size() - 1);
    return out;
  }
};

// Records an operation whose forward values were computed by the caller.
// backward receives dL/d(out) and must accumulate into each non-null parent
// gradient buffer (already sized to the parent's numel).
template <std::floating_point T>
Tensor<T> custom_op(std::initializer_list<const Tensor<T>*> inputs, Shape shape, std::vector<T> data,
                    detail::BackwardFn<T> backward) {
  std::vector<const Tensor<T>*> in(inputs);
  return OpAccess<T>::make(std::move(shape), std::move(data), in, std::move(backward));
}

template <std::floating_point T>
GradMap<T> backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) throw ContractError("backward needs a scalar loss, got " + shape_str(loss.shape()));
  const auto& state = OpAccess<T>::tape(loss);
  if (!state) throw ContractError("backward on a tensor that is not on a tape");
  auto& nodes = state->nodes;
  const int root = OpAccess<T>::node(loss);
  std::vector<std::vector<T>> grads(nodes.size());
  grads[root].assign(1, T(1));
  for (int n = root; n >= 0; --n) {
    auto& node = nodes[n];
    if (grads[n].empty() || !node.backward) continue;
    std::vector<std::vector<T>*> pg(node.parents.size(), nullptr);
    for (std::size_t i = 0; i < node.parents.size(); ++i) {
      const int p = node.parents[i];
      if (p < 0) continue;
      if (grads[p].empty()) grads[p].assign(nodes[p].numel, T(0));
      pg[i] = &grads[p];
    }
    node.backward(std::span<const T>(grads[n]), std::span<std::vector<T>*>(pg));
  }
  GradMap<T> out;
  for (std::size_t n = 0; n < nodes.size(); ++n) {
    const auto& node = nodes[n];
    if (node.leaf_id == 0) continue;
    auto g = grads[n].empty() ? std::vector<T>(node.numel, T(0)) : std::move(grads[n]);
    auto it = out.find(node.leaf_id);
    if (it == out.end()) {
      out.emplace(node.leaf_id, Tensor<T>(node.shape, std::move(g)));
    } else {
      auto acc = it->second.to_vector();
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
      it->second = Tensor<T>(node.shape, std::move(acc));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic. The second operand may be a scalar or match a
// trailing suffix of the first operand's shape (e.g. a bias row); the
// symmetric case is also accepted.

namespace detail {

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

template <class T>
void check_broadcast(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape() || b.numel() == 1 || a.numel() == 1) return;
  if (is_suffix(b.shape(), a.shape()) || is_suffix(a.shape(), b.shape())) return;
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

template <class T, class Fwd, class DA, class DB>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const char* name, Fwd fwd, DA da, DB db) {
  check_broadcast(a, b, name);
  const bool a_big = a.numel() >= b.numel();
  const Shape shape = a_big ? a.shape() : b.shape();
  const std::size_t n = shape_numel(shape);
  const std::size_t na = a.numel(), nb = b.numel();
  auto av = a.data();
  auto bv = b.data();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i % na], bv[i % nb]);
  std::vector<const Tensor<T>*> in{&a, &b};
  if (!a.on_tape() && !b.on_tape()) return OpAccess<T>::make(shape, std::move(out), in, nullptr);
  auto abuf = a.to_vector();
  auto bbuf = b.to_vector();
  return OpAccess<T>::make(shape, std::move(out), in,
                           [abuf = std::move(abuf), bbuf = std::move(bbuf), n, na, nb, da, db](
                               std::span<const T> g, std::span<std::vector<T>*> pg) {
                             if (pg[0]) {
                               auto& ga = *pg[0];
                               for (std::size_t i = 0; i < n; ++i) ga[i % na] += g[i] * da(abuf[i % na], bbuf[i % nb]);
                             }
                             if (pg[1]) {
                               auto& gb = *pg[1];
                               for (std::size_t i = 0; i < n; ++i) gb[i % nb] += g[i] * db(abuf[i % na], bbuf[i % nb]);
                             }
                           });
}

template <class T, class Fwd, class Deriv>
Tensor<T> unary(const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  auto xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  std::vector<const Tensor<T>*> in{&x};
  if (!x.on_tape()) return OpAccess<T>::make(x.shape(), std::move(out), in, nullptr);
  auto xbuf = x.to_vector();
  auto ybuf = out;
  return OpAccess<T>::make(x.shape(), std::move(out), in,
                           [xbuf = std::move(xbuf), ybuf = std::move(ybuf), deriv](std::span<const T> g,
                                                                                   std::span<std::vector<T>*> pg) {
                             auto& gx = *pg[0];
                             for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xbuf[i], ybuf[i]);
                           });
}

template <class T>
void require_finite(std::span<const T> v, const char* op) {
  for (auto x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

}  // namespace detail

template <std::floating_point T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <std::floating_point T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <std::floating_point T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <std::floating_point T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "div", [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

template <std::floating_point T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  return detail::unary(x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <std::floating_point T>
Tensor<T> silu(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v / (T(1) + std::exp(-v)); },
      [](T v, T) {
        const T s = T(1) / (T(1) + std::exp(-v));
        return s * (T(1) + v * (T(1) - s));
      });
}

template <std::floating_point T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T y) { return y * (T(1) - y); });
}

template <std::floating_point T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <std::floating_point T>
Tensor<T> log(const Tensor<T>& x) {
  for (auto v : x.data()) {
    if (!(v > T(0))) throw NumericError("log: non-positive input");
  }
  return detail::unary(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <std::floating_point T>
Tensor<T> abs(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return std::abs(v); }, [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

// Gradient passes only where lo < x < hi.
template <std::floating_point T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  return detail::unary(
      x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v, T) { return (v > lo && v < hi) ? T(1) : T(0); });
}

template <std::floating_point T>
Tensor<T> sum(const Tensor<T>& x) {
  auto xv = x.data();
  T s = 0;
  for (auto v : xv) s += v;
  std::vector<const Tensor<T>*> in{&x};
  return OpAccess<T>::make(Shape{1}, {s}, in, [](std::span<const T> g, std::span<std::vector<T>*> pg) {
    for (auto& v : *pg[0]) v += g[0];
  });
}

template <std::floating_point T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------------------
// Shape manipulation.

template <std::floating_point T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<const Tensor<T>*> in{&x};
  return OpAccess<T>::make(std::move(shape), x.to_vector(), in, [](std::span<const T> g, std::span<std::vector<T>*> pg) {
    auto& gx = *pg[0];
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

template <std::floating_point T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("transpose expects rank 2, got " + shape_str(x.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  auto xv = x.data();
  std::vector<T> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xv[i * c + j];
  std::vector<const Tensor<T>*> in{&x};
  return OpAccess<T>::make(Shape{c, r}, std::move(out), in, [r, c](std::span<const T> g, std::span<std::vector<T>*> pg) {
    auto& gx = *pg[0];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
  });
}

namespace detail {

// View a shape as [outer, axis, inner] around `axis`.
inline void split_axis(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace detail

// Sub-range [start, start+length) along `axis`.
template <std::floating_point T>
Tensor<T> narrow(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= x.rank()) throw ShapeError("narrow: axis out of range for " + shape_str(x.shape()));
  if (length == 0 || start + length > x.dim(axis)) {
    throw ShapeError("narrow: range [" + std::to_string(start) + "," + std::to_string(start + length) +
                     ") outside extent " + std::to_string(x.dim(axis)));
  }
  std::size_t outer, inner;
  detail::split_axis(x.shape(), axis, outer, inner);
  const std::size_t full = x.dim(axis);
  Shape shape = x.shape();
  shape[axis] = length;
  auto xv = x.data();
  std::vector<T> out(outer * length * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * full + start) * inner), length * inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * length * inner));
  }
  std::vector<const Tensor<T>*> in{&x};
  return OpAccess<T>::make(std::move(shape), std::move(out), in,
                           [outer, inner, full, start, length](std::span<const T> g, std::span<std::vector<T>*> pg) {
                             auto& gx = *pg[0];
                             for (std::size_t o = 0; o < outer; ++o)
                               for (std::size_t k = 0; k < length * inner; ++k)
                                 gx[(o * full + start) * inner + k] += g[o * length * inner + k];
                           });
}

template <std::floating_point T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw ShapeError("concat: axis out of range for " + shape_str(ref));
  std::vector<std::size_t> lens;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (i != axis && p.dim(i) != ref[i]) throw ShapeError("concat: " + shape_str(p.shape()) + " vs " + shape_str(ref));
    }
    lens.push_back(p.dim(axis));
    total += p.dim(axis);
  }
  std::size_t outer, inner;
  detail::split_axis(ref, axis, outer, inner);
  Shape shape = ref;
  shape[axis] = total;
  std::vector<T> out(outer * total * inner);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto pv = parts[k].data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * lens[k] * inner), lens[k] * inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * total + offset) * inner));
    }
    offset += lens[k];
  }
  std::vector<const Tensor<T>*> in;
  for (const auto& p : parts) in.push_back(&p);
  return OpAccess<T>::make(std::move(shape), std::move(out), in,
                           [lens, outer, inner, total](std::span<const T> g, std::span<std::vector<T>*> pg) {
                             std::size_t offset = 0;
                             for (std::size_t k = 0; k < lens.size(); ++k) {
                               if (pg[k]) {
                                 auto& gk = *pg[k];
                                 for (std::size_t o = 0; o < outer; ++o)
                                   for (std::size_t j = 0; j < lens[k] * inner; ++j)
                                     gk[o * lens[k] * inner + j] += g[(o * total + offset) * inner + j];
                               }
                               offset += lens[k];
                             }
                           });
}

// ---------------------------------------------------------------------------
// Linear algebra and normalization.

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
Eigen::Map<const RowMat<T>> cmap(const T* p, std::size_t r, std::size_t c) {
  return {p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}

template <class T>
Eigen::Map<RowMat<T>> mmap(T* p, std::size_t r, std::size_t c) {
  return {p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}

}  // namespace detail

template <std::floating_point T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  detail::mmap(out.data(), m, n).noalias() = detail::cmap(a.data().data(), m, k) * detail::cmap(b.data().data(), k, n);
  std::vector<const Tensor<T>*> in{&a, &b};
  if (!a.on_tape() && !b.on_tape()) return OpAccess<T>::make(Shape{m, n}, std::move(out), in, nullptr);
  auto abuf = a.to_vector();
  auto bbuf = b.to_vector();
  return OpAccess<T>::make(
      Shape{m, n}, std::move(out), in,
      [abuf = std::move(abuf), bbuf = std::move(bbuf), m, k, n](std::span<const T> g, std::span<std::vector<T>*> pg) {
        const auto gm = detail::cmap(g.data(), m, n);
        if (pg[0]) detail::mmap(pg[0]->data(), m, k).noalias() += gm * detail::cmap(bbuf.data(), k, n).transpose();
        if (pg[1]) detail::mmap(pg[1]->data(), k, n).noalias() += detail::cmap(abuf.data(), m, k).transpose() * gm;
      });
}

// Numerically stabilized by max-subtraction.
template <std::floating_point T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  detail::require_finite(x.data(), "softmax_lastdim");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  auto xv = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * d;
    T* o = out.data() + r * d;
    const T mx = *std::max_element(in, in + d);
    T z = 0;
    for (std::size_t j = 0; j < d; ++j) {
      o[j] = std::exp(in[j] - mx);
      z += o[j];
    }
    for (std::size_t j = 0; j < d; ++j) o[j] /= z;
  }
  std::vector<const Tensor<T>*> in{&x};
  if (!x.on_tape()) return OpAccess<T>::make(x.shape(), std::move(out), in, nullptr);
  auto ybuf = out;
  return OpAccess<T>::make(x.shape(), std::move(out), in,
                           [ybuf = std::move(ybuf), rows, d](std::span<const T> g, std::span<std::vector<T>*> pg) {
                             auto& gx = *pg[0];
                             for (std::size_t r = 0; r < rows; ++r) {
                               const T* y = ybuf.data() + r * d;
                               const T* gr = g.data() + r * d;
                               T dot = 0;
                               for (std::size_t j = 0; j < d; ++j) dot += gr[j] * y[j];
                               for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += y[j] * (gr[j] - dot);
                             }
                           });
}

// Normalizes each last-dim slice to zero mean, unit (biased) variance.
template <std::floating_point T>
Tensor<T> layer_norm(const Tensor<T>& x, T eps) {
  const std::size_t d = x.shape().back();
  if (d < 2) throw ShapeError("layer_norm needs last extent >= 2, got " + shape_str(x.shape()));
  const std::size_t rows = x.numel() / d;
  auto xv = x.data();
  std::vector<T> out(x.numel());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<T>(d);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = (in[j] - mu) * inv_std[r];
  }
  std::vector<const Tensor<T>*> in{&x};
  if (!x.on_tape()) return OpAccess<T>::make(x.shape(), std::move(out), in, nullptr);
  auto ybuf = out;
  return OpAccess<T>::make(
      x.shape(), std::move(out), in,
      [ybuf = std::move(ybuf), inv_std = std::move(inv_std), rows, d](std::span<const T> g,
                                                                      std::span<std::vector<T>*> pg) {
        auto& gx = *pg[0];
        const T inv_d = T(1) / static_cast<T>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* y = ybuf.data() + r * d;
          const T* gr = g.data() + r * d;
          T gmean = 0, gy = 0;
          for (std::size_t j = 0; j < d; ++j) {
            gmean += gr[j];
            gy += gr[j] * y[j];
          }
          gmean *= inv_d;
          gy *= inv_d;
          for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += inv_std[r] * (gr[j] - gmean - y[j] * gy);
        }
      });
}

// ---------------------------------------------------------------------------

template <std::floating_point T>
Tensor<T> create(const Shape& shape, const Gaussian& init) {
  return Tensor<T>::gaussian(shape, init);
}

// Max over elements of |analytic - central difference| / max(|a|, |n|, 1e-8).
// Uses the five-point stencil, so the truncation error is O(eps^4).
template <std::floating_point T, class F>
double grad_check(F&& f, const Tensor<T>& x, T eps) {
  Tape<T> tape;
  auto xw = tape.watch(x);
  auto y = f(xw);
  const auto analytic = y.on_tape() ? backward(y).at(x.id()).to_vector() : std::vector<T>(x.numel(), T(0));
  const auto base = x.to_vector();
  auto eval = [&](std::size_t i, double k) {
    auto v = base;
    v[i] += static_cast<T>(k * static_cast<double>(eps));
    const T out = f(Tensor<T>(x.shape(), std::move(v))).item();
    if (!std::isfinite(out)) throw NumericError("grad_check: non-finite evaluation");
    return static_cast<double>(out);
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < base.size(); ++i) {
    const double numeric =
        (8.0 * (eval(i, 1.0) - eval(i, -1.0)) - (eval(i, 2.0) - eval(i, -2.0))) / (12.0 * static_cast<double>(eps));
    const double a = static_cast<double>(analytic[i]);
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace tempo4d::tk
