// Copyright 2026 The kgcap Authors
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
#include <functional>
#include <map>
#include <string>

#include "kgcap/array.hpp"
#include "kgcap/error.hpp"
#include "kgcap/tape.hpp"

namespace kgcap {

/// Named master copies of all trainable arrays. Iteration order is the key
/// order of std::map, so updates are deterministic.
class ParameterStore {
 public:
  Array& add(const std::string& name, Array a) {
    auto [it, fresh] = params_.emplace(name, std::move(a));
    if (!fresh) throw ConfigError("duplicate parameter: " + name);
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) > 0; }

  Array& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }
  const Array& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }

  std::int64_t total_entries() const {
    std::int64_t n = 0;
    for (const auto& [k, v] : params_) n += v.size();
    return n;
  }

 private:
  std::map<std::string, Array> params_;
};

/// Adam with the usual default decay constants.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParameterStore& params, const GradientMap& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (auto& [name, p] : params) {
      auto git = grads.find(name);
      if (git == grads.end()) continue;
      const Array& g = git->second;
      Array& m = slot(m_, name, p);
      Array& v = slot(v_, name, p);
      for (std::int64_t i = 0; i < p.size(); ++i) {
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
        p[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
      }
    }
  }

  void set_learning_rate(double lr) { lr_ = lr; }
  double learning_rate() const { return lr_; }
  std::int64_t step_count() const { return t_; }

  // Serialization hooks for exact training resume.
  std::map<std::string, Array>& first_moments() { return m_; }
  std::map<std::string, Array>& second_moments() { return v_; }
  void set_step_count(std::int64_t t) { t_ = t; }

 private:
  static Array& slot(std::map<std::string, Array>& store, const std::string& name, const Array& like) {
    auto it = store.find(name);
    if (it == store.end()) it = store.emplace(name, Array(like.shape())).first;
    return it->second;
  }

  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::map<std::string, Array> m_, v_;
};

/// Central-difference gradient verification. `loss` evaluates the objective
/// at the current parameter values; `analytic` supplies the gradient under
/// test. Returns max over entries of |analytic - fd| / max(1, |analytic|).
inline double finite_diff_check(const std::function<double(ParameterStore&)>& loss,
                                const std::function<GradientMap(ParameterStore&)>& analytic,
                                ParameterStore& params, double epsilon = 1e-5) {
  if (epsilon <= 0.0) throw ContractError("finite_diff_check: epsilon must be positive");
  const GradientMap grads = analytic(params);
  double worst = 0.0;
  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    if (git == grads.end()) throw ContractError("finite_diff_check: no gradient for " + name);
    const Array& g = git->second;
    if (!g.same_shape(p)) throw DimensionError("finite_diff_check: gradient shape mismatch for " + name);
    for (std::int64_t i = 0; i < p.size(); ++i) {
      const double saved = p[i];
      p[i] = saved + epsilon;
      const double fp = loss(params);
      p[i] = saved - epsilon;
      const double fm = loss(params);
      p[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw EvaluationError("finite_diff_check: non-finite loss near " + name);
      const double fd = (fp - fm) / (2.0 * epsilon);
      const double err = std::abs(g[i] - fd) / std::max(1.0, std::abs(g[i]));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace kgcap
