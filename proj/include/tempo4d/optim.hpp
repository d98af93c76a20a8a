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

#include <cmath>
#include <numbers>
#include <unordered_map>
#include <vector>

#include "tempo4d/tensorkit.hpp"

namespace tempo4d {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam over tensors identified by Tensor::id(). Parameters without a
// gradient entry are left untouched.
template <std::floating_point T = double>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(std::vector<tk::Tensor<T>*> params, const tk::GradMap<T>& grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto* p : params) {
      auto it = grads.find(p->id());
      if (it == grads.end()) continue;
      const auto g = it->second.data();
      auto& st = state_[p->id()];
      if (st.m.empty()) {
        st.m.assign(g.size(), 0.0);
        st.v.assign(g.size(), 0.0);
      }
      auto w = p->to_vector();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * gi;
        st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double mh = st.m[i] / c1, vh = st.v[i] / c2;
        w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * mh / (std::sqrt(vh) + cfg_.eps));
      }
      p->replace_data(std::move(w));
    }
  }

  void step(std::vector<tk::Tensor<T>*> params, const tk::GradMap<T>& grads) { step(std::move(params), grads, cfg_.lr); }

  const AdamConfig& config() const { return cfg_; }
  long steps_taken() const { return t_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamConfig cfg_;
  long t_ = 0;
  std::unordered_map<std::uint64_t, Moments> state_;
};

// lr * 0.5 (1 + cos(pi * step / total)), floored at `floor_frac` * lr.
inline double cosine_lr(double lr, long step, long total, double floor_frac = 0.0) {
  if (total <= 0) return lr;
  const double c = 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
  return lr * (floor_frac + (1.0 - floor_frac) * c);
}

}  // namespace tempo4d
