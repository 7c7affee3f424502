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

#include <algorithm>
#include <catch2/catch_amalgamated.hpp>

#include "kgcap/kmeans.hpp"
#include "support/oracles.hpp"

using kgcap::Array;
using kgcap::Rng;

TEST_CASE("k equal to M returns the input points with zero objective", "[kmeans]") {
  const Array pts = Array::from({3, 2}, {0.0, 0.0, 5.0, 1.0, -2.0, 4.0});
  const Array centers = kgcap::cluster_regions(pts, 3, 99);
  REQUIRE(kgcap::kmeans_objective(pts, centers) == 0.0);
  // Every input point appears among the centers.
  for (int i = 0; i < 3; ++i) {
    bool found = false;
    for (int c = 0; c < 3; ++c)
      found = found || (centers.at(c, 0) == pts.at(i, 0) && centers.at(c, 1) == pts.at(i, 1));
    REQUIRE(found);
  }
}

TEST_CASE("1-D points {0,1,10,11} with k=2 split into {0.5, 10.5}", "[kmeans]") {
  const Array pts = Array::from({4, 1}, {0.0, 1.0, 10.0, 11.0});
  const auto expected = oracle::kmeans_1d_exhaustive({0.0, 1.0, 10.0, 11.0}, 2);
  REQUIRE(expected == std::vector<double>{0.5, 10.5});
  for (std::uint64_t seed : {1ull, 7ull, 123ull}) {
    Array centers = kgcap::cluster_regions(pts, 2, seed);
    std::vector<double> got{centers.at(0, 0), centers.at(1, 0)};
    std::sort(got.begin(), got.end());
    REQUIRE(got == expected);
  }
}

TEST_CASE("k larger than M is a config error", "[kmeans]") {
  const Array pts = Array::from({2, 1}, {0.0, 1.0});
  REQUIRE_THROWS_AS(kgcap::cluster_regions(pts, 3, 1), kgcap::ConfigError);
}

TEST_CASE("clustering is deterministic for a fixed seed", "[kmeans]") {
  Rng rng(5);
  const Array pts = kgcap::uniform_array({40, 6}, -1.0, 1.0, rng);
  const Array a = kgcap::cluster_regions(pts, 7, 2026);
  const Array b = kgcap::cluster_regions(pts, 7, 2026);
  REQUIRE(a.values() == b.values());
}

TEST_CASE("cluster counts 5 through 10 are accepted on realistic scenes", "[kmeans]") {
  Rng rng(6);
  const Array pts = kgcap::uniform_array({24, 8}, 0.0, 1.0, rng);
  double prev = std::numeric_limits<double>::infinity();
  for (int k = 5; k <= 10; ++k) {
    const Array centers = kgcap::cluster_regions(pts, k, 42);
    REQUIRE(centers.dim(0) == k);
    const double obj = kgcap::kmeans_objective(pts, centers);
    REQUIRE(obj <= prev + 1e-9);  // more clusters never fit worse here
    prev = obj;
  }
}

TEST_CASE("centers are the means of their assigned points", "[kmeans]") {
  Rng rng(8);
  const Array pts = kgcap::uniform_array({30, 3}, -2.0, 2.0, rng);
  const Array centers = kgcap::cluster_regions(pts, 4, 17);
  // Recompute the assignment and the per-cluster means.
  std::vector<std::vector<int>> members(4);
  for (int i = 0; i < 30; ++i) {
    int best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (int c = 0; c < 4; ++c) {
      double d = 0.0;
      for (int j = 0; j < 3; ++j) {
        const double t = pts.at(i, j) - centers.at(c, j);
        d += t * t;
      }
      if (d < bd) {
        bd = d;
        best = c;
      }
    }
    members[static_cast<std::size_t>(best)].push_back(i);
  }
  for (int c = 0; c < 4; ++c) {
    if (members[static_cast<std::size_t>(c)].empty()) continue;
    for (int j = 0; j < 3; ++j) {
      double mean = 0.0;
      for (int i : members[static_cast<std::size_t>(c)]) mean += pts.at(i, j);
      mean /= static_cast<double>(members[static_cast<std::size_t>(c)].size());
      REQUIRE_THAT(centers.at(c, j), Catch::Matchers::WithinAbs(mean, 1e-9));
    }
  }
}
