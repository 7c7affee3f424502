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

#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "kgcap/error.hpp"

namespace kgcap {

/// Dense row-major array of 64-bit floats. Copies are shallow (the buffer is
/// shared); use clone() where an independent copy is required. All numerics
/// in this project run in double precision.
class Array {
 public:
  Array() : shape_{}, data_(std::make_shared<std::vector<double>>()) {}

  explicit Array(std::vector<int> shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<double>>(check_shape(shape_), 0.0)) {}

  static Array scalar(double v) {
    Array a(std::vector<int>{});
    a.data_->assign(1, v);
    return a;
  }

  static Array from(std::vector<int> shape, std::vector<double> values) {
    Array a;
    a.shape_ = std::move(shape);
    if (check_shape(a.shape_) != static_cast<std::int64_t>(values.size()))
      throw DimensionError("Array::from: shape does not match value count");
    a.data_ = std::make_shared<std::vector<double>>(std::move(values));
    return a;
  }

  static Array vec(std::vector<double> values) {
    const int n = static_cast<int>(values.size());
    return from({n}, std::move(values));
  }

  static Array full(std::vector<int> shape, double v) {
    Array a(std::move(shape));
    for (double& x : *a.data_) x = v;
    return a;
  }

  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  const std::vector<int>& shape() const { return shape_; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_->size()); }

  double* data() { return data_->data(); }
  const double* data() const { return data_->data(); }

  double& operator[](std::int64_t i) { return (*data_)[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return (*data_)[static_cast<std::size_t>(i)]; }

  // 2-D access, row-major.
  double& at(int r, int c) { return (*data_)[static_cast<std::size_t>(r) * dim(1) + c]; }
  double at(int r, int c) const { return (*data_)[static_cast<std::size_t>(r) * dim(1) + c]; }

  double scalar_value() const {
    if (size() != 1) throw ContractError("scalar_value: array has " + std::to_string(size()) + " entries");
    return (*data_)[0];
  }

  Array clone() const {
    Array a;
    a.shape_ = shape_;
    a.data_ = std::make_shared<std::vector<double>>(*data_);
    return a;
  }

  bool same_shape(const Array& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (double v : *data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
    os << ')';
    return os.str();
  }

  const std::vector<double>& values() const { return *data_; }

 private:
  static std::int64_t check_shape(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
      if (d < 0) throw DimensionError("negative dimension in shape");
      n *= d;
    }
    return n;
  }

  std::vector<int> shape_;
  std::shared_ptr<std::vector<double>> data_;
};

/// Deterministic xoshiro256** generator. Self-contained so that streams are
/// reproducible across platforms and serializable into checkpoints
/// (std::random distributions are implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

  void reseed(std::uint64_t seed) {
    // splitmix64 expansion of the seed into the 4-word state.
    std::uint64_t x = seed;
    for (auto& w : state_) {
      x += 0x9e3779b97f4a7c15ULL;
      std::uint64_t z = x;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
      w = z ^ (z >> 31);
    }
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw ContractError("uniform_int: n must be positive");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return v % n;
  }

  /// Standard normal via Box-Muller (no cached spare, so state is 4 words).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::array<std::uint64_t, 4> state() const {
    return {state_[0], state_[1], state_[2], state_[3]};
  }
  void set_state(const std::array<std::uint64_t, 4>& s) {
    for (int i = 0; i < 4; ++i) state_[i] = s[static_cast<std::size_t>(i)];
  }

  /// Independent child stream; advances this generator by one draw.
  Rng split() { return Rng(next_u64() ^ 0xa0761d6478bd642fULL); }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::uint64_t state_[4];
};

/// Uniform init in [-a, a] with a = sqrt(6 / (fan_in + fan_out)).
inline Array glorot_uniform(int rows, int cols, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Array w({rows, cols});
  for (std::int64_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-a, a);
  return w;
}

inline Array uniform_array(std::vector<int> shape, double lo, double hi, Rng& rng) {
  Array w(std::move(shape));
  for (std::int64_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(lo, hi);
  return w;
}

}  // namespace kgcap
