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
#include <cstdint>
#include <limits>
#include <vector>

#include "kgcap/array.hpp"
#include "kgcap/error.hpp"

namespace kgcap {

namespace detail {
inline double sq_dist(const double* a, const double* b, int d) {
  double s = 0.0;
  for (int i = 0; i < d; ++i) {
    const double t = a[i] - b[i];
    s += t * t;
  }
  return s;
}
}  // namespace detail

/// Lloyd's k-means with k-means++ seeding. Deterministic for a given seed.
/// Returns a (k x L_v) matrix of cluster centers.
inline Array cluster_regions(const Array& regions, int k, std::uint64_t seed) {
  if (regions.rank() != 2) throw DimensionError("cluster_regions: expected M x L_v matrix");
  const int m = regions.dim(0), d = regions.dim(1);
  if (k < 1 || k > m)
    throw ConfigError("cluster_regions: k=" + std::to_string(k) + " outside [1, M=" + std::to_string(m) + "]");

  Rng rng(seed);
  const double* pts = regions.data();
  auto point = [&](int i) { return pts + static_cast<std::int64_t>(i) * d; };

  // k-means++ seeding.
  std::vector<int> seeds;
  seeds.push_back(static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(m))));
  std::vector<double> dist2(static_cast<std::size_t>(m), std::numeric_limits<double>::infinity());
  while (static_cast<int>(seeds.size()) < k) {
    double total = 0.0;
    for (int i = 0; i < m; ++i) {
      const double d2 = detail::sq_dist(point(i), point(seeds.back()), d);
      if (d2 < dist2[static_cast<std::size_t>(i)]) dist2[static_cast<std::size_t>(i)] = d2;
      total += dist2[static_cast<std::size_t>(i)];
    }
    int next = -1;
    if (total > 0.0) {
      double r = rng.uniform() * total;
      for (int i = 0; i < m; ++i) {
        r -= dist2[static_cast<std::size_t>(i)];
        if (r <= 0.0) {
          next = i;
          break;
        }
      }
      if (next < 0) next = m - 1;
    } else {
      // All remaining points coincide with a chosen seed.
      next = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(m)));
    }
    seeds.push_back(next);
  }

  Array centers({k, d});
  for (int c = 0; c < k; ++c)
    for (int j = 0; j < d; ++j) centers.at(c, j) = point(seeds[static_cast<std::size_t>(c)])[j];

  std::vector<int> assign(static_cast<std::size_t>(m), -1);
  std::vector<int> count(static_cast<std::size_t>(k), 0);
  const int max_iters = 100;
  for (int iter = 0; iter < max_iters; ++iter) {
    bool changed = false;
    for (int i = 0; i < m; ++i) {
      int best = 0;
      double best_d = detail::sq_dist(point(i), &centers.at(0, 0), d);
      for (int c = 1; c < k; ++c) {
        const double d2 = detail::sq_dist(point(i), &centers.at(c, 0), d);
        if (d2 < best_d) {
          best_d = d2;
          best = c;
        }
      }
      if (assign[static_cast<std::size_t>(i)] != best) {
        assign[static_cast<std::size_t>(i)] = best;
        changed = true;
      }
    }
    if (!changed && iter > 0) break;

    std::fill(count.begin(), count.end(), 0);
    Array sums({k, d});
    for (int i = 0; i < m; ++i) {
      const int c = assign[static_cast<std::size_t>(i)];
      ++count[static_cast<std::size_t>(c)];
      for (int j = 0; j < d; ++j) sums.at(c, j) += point(i)[j];
    }
    for (int c = 0; c < k; ++c) {
      if (count[static_cast<std::size_t>(c)] == 0) {
        // Re-seed an empty cluster at the point farthest from its center.
        int far = 0;
        double far_d = -1.0;
        for (int i = 0; i < m; ++i) {
          const int ci = assign[static_cast<std::size_t>(i)];
          const double d2 = detail::sq_dist(point(i), &centers.at(ci, 0), d);
          if (d2 > far_d) {
            far_d = d2;
            far = i;
          }
        }
        for (int j = 0; j < d; ++j) centers.at(c, j) = point(far)[j];
      } else {
        for (int j = 0; j < d; ++j) centers.at(c, j) = sums.at(c, j) / count[static_cast<std::size_t>(c)];
      }
    }
  }
  return centers;
}

/// Sum of squared distances from each point to its nearest center.
inline double kmeans_objective(const Array& regions, const Array& centers) {
  const int m = regions.dim(0), d = regions.dim(1), k = centers.dim(0);
  double total = 0.0;
  for (int i = 0; i < m; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c)
      best = std::min(best, detail::sq_dist(regions.data() + static_cast<std::int64_t>(i) * d,
                                            centers.data() + static_cast<std::int64_t>(c) * d, d));
    total += best;
  }
  return total;
}

}  // namespace kgcap
