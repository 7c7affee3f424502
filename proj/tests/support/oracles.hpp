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
//
// Independent oracles used by the test suites. Everything here is written
// against the mathematical definitions, not against the library code paths
// it checks.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

namespace oracle {

/// Simplex projection by descending sort: the standard O(n log n) solution
/// of min ||p - z||^2 s.t. p >= 0, sum p = 1. Written independently of the
/// library's sparsemax.
inline std::vector<double> project_simplex_sort(const std::vector<double>& z) {
  const int n = static_cast<int>(z.size());
  std::vector<double> u = z;
  std::sort(u.begin(), u.end(), std::greater<double>());
  double cssv = 0.0, tau = 0.0;
  int rho = 0;
  for (int k = 1; k <= n; ++k) {
    cssv += u[static_cast<std::size_t>(k - 1)];
    const double cand = (cssv - 1.0) / k;
    if (u[static_cast<std::size_t>(k - 1)] - cand > 0.0) {
      rho = k;
      tau = cand;
    }
  }
  (void)rho;
  std::vector<double> p(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) p[i] = std::max(z[i] - tau, 0.0);
  return p;
}

/// Simplex projection by exhaustive support enumeration (all 2^n - 1
/// candidate supports, KKT-checked). Exact quadratic-program reference for
/// small n; cross-validates the sort-based oracle itself.
inline std::vector<double> project_simplex_enumerate(const std::vector<double>& z) {
  const int n = static_cast<int>(z.size());
  std::vector<double> best;
  double best_obj = std::numeric_limits<double>::infinity();
  for (std::uint32_t mask = 1; mask < (1u << n); ++mask) {
    double sum = 0.0;
    int k = 0;
    for (int i = 0; i < n; ++i)
      if (mask & (1u << i)) {
        sum += z[static_cast<std::size_t>(i)];
        ++k;
      }
    const double tau = (sum - 1.0) / k;
    std::vector<double> p(z.size(), 0.0);
    bool feasible = true;
    for (int i = 0; i < n; ++i) {
      if (mask & (1u << i)) {
        p[static_cast<std::size_t>(i)] = z[static_cast<std::size_t>(i)] - tau;
        if (p[static_cast<std::size_t>(i)] < -1e-15) feasible = false;
      }
    }
    if (!feasible) continue;
    double obj = 0.0;
    for (int i = 0; i < n; ++i) {
      const double d = p[static_cast<std::size_t>(i)] - z[static_cast<std::size_t>(i)];
      obj += d * d;
    }
    if (obj < best_obj) {
      best_obj = obj;
      best = p;
    }
  }
  return best;
}

/// Optimal 1-D k-means objective by exhaustive assignment enumeration
/// (k^M assignments). Returns best centers sorted ascending.
inline std::vector<double> kmeans_1d_exhaustive(const std::vector<double>& pts, int k) {
  const int m = static_cast<int>(pts.size());
  std::vector<int> assign(static_cast<std::size_t>(m), 0);
  std::vector<double> best_centers;
  double best_obj = std::numeric_limits<double>::infinity();
  while (true) {
    std::vector<double> sum(static_cast<std::size_t>(k), 0.0);
    std::vector<int> cnt(static_cast<std::size_t>(k), 0);
    for (int i = 0; i < m; ++i) {
      sum[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])] += pts[static_cast<std::size_t>(i)];
      ++cnt[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
    }
    bool all_used = true;
    for (int c = 0; c < k; ++c)
      if (cnt[static_cast<std::size_t>(c)] == 0) all_used = false;
    if (all_used) {
      double obj = 0.0;
      std::vector<double> centers(static_cast<std::size_t>(k));
      for (int c = 0; c < k; ++c) centers[static_cast<std::size_t>(c)] = sum[static_cast<std::size_t>(c)] / cnt[static_cast<std::size_t>(c)];
      for (int i = 0; i < m; ++i) {
        const double d = pts[static_cast<std::size_t>(i)] - centers[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
        obj += d * d;
      }
      if (obj < best_obj) {
        best_obj = obj;
        std::sort(centers.begin(), centers.end());
        best_centers = centers;
      }
    }
    // Next assignment in base-k counting order.
    int pos = 0;
    while (pos < m) {
      if (++assign[static_cast<std::size_t>(pos)] < k) break;
      assign[static_cast<std::size_t>(pos)] = 0;
      ++pos;
    }
    if (pos == m) break;
  }
  return best_centers;
}

/// KL(p || q) over two discrete distributions.
inline double kl_divergence(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) s += p[i] * std::log(p[i] / q[i]);
  return s;
}

inline std::vector<double> softmax(const std::vector<double>& z) {
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  double sum = 0.0;
  std::vector<double> p(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] - mx);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

}  // namespace oracle
