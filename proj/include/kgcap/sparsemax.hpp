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

#include <algorithm>
#include <vector>

#include "kgcap/array.hpp"
#include "kgcap/error.hpp"

namespace kgcap {

/// Euclidean projection of a logit vector onto the probability simplex.
/// Shift-invariant by construction: only differences z_i - max(z) enter.
/// Writes the result into out[0..n); returns the support size.
inline int sparsemax_span(const double* z, int n, double* out) {
  if (n <= 0) throw DimensionError("sparsemax: empty input");
  double zmax = z[0];
  for (int i = 1; i < n; ++i) zmax = std::max(zmax, z[i]);
  std::vector<double> d(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    if (!std::isfinite(z[i])) throw EvaluationError("sparsemax: non-finite logit");
    d[static_cast<std::size_t>(i)] = z[i] - zmax;
  }
  std::vector<double> sorted = d;
  std::sort(sorted.begin(), sorted.end(), std::greater<double>());
  // Largest k with 1 + k*z_(k) > sum of the top k entries.
  double cumsum = 0.0;
  int support = 0;
  double tau = 0.0;
  for (int k = 1; k <= n; ++k) {
    const double zk = sorted[static_cast<std::size_t>(k - 1)];
    cumsum += zk;
    if (1.0 + k * zk > cumsum) {
      support = k;
      tau = (cumsum - 1.0) / k;
    }
  }
  for (int i = 0; i < n; ++i)
    out[i] = std::max(d[static_cast<std::size_t>(i)] - tau, 0.0);
  return support;
}

/// sparsemax of a vector, or row-wise for a matrix.
inline Array sparsemax(const Array& logits) {
  if (logits.rank() == 1) {
    Array p({logits.dim(0)});
    sparsemax_span(logits.data(), logits.dim(0), p.data());
    return p;
  }
  if (logits.rank() == 2) {
    const int rows = logits.dim(0), cols = logits.dim(1);
    Array p({rows, cols});
    for (int r = 0; r < rows; ++r)
      sparsemax_span(logits.data() + static_cast<std::int64_t>(r) * cols, cols,
                     p.data() + static_cast<std::int64_t>(r) * cols);
    return p;
  }
  throw DimensionError("sparsemax: expected vector or matrix, got rank " +
                       std::to_string(logits.rank()));
}

/// Backward rule for one sparsemax row. With support set S identified from
/// the forward output: dz_i = [p_i > 0] * (dp_i - mean_{j in S} dp_j).
inline void sparsemax_backward_span(const double* p, const double* dp, int n, double* dz) {
  double sum = 0.0;
  int support = 0;
  for (int i = 0; i < n; ++i) {
    if (p[i] > 0.0) {
      sum += dp[i];
      ++support;
    }
  }
  const double mean = support > 0 ? sum / support : 0.0;
  for (int i = 0; i < n; ++i) dz[i] = p[i] > 0.0 ? dp[i] - mean : 0.0;
}

}  // namespace kgcap
