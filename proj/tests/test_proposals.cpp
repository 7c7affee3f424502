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

#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "kgcap/proposals.hpp"
#include "support/oracles.hpp"

using kgcap::Array;
using kgcap::AttentionMapperParams;
using kgcap::ClassifierHeadParams;
using kgcap::ComplexEmbeddingTable;
using kgcap::ConceptVocab;
using kgcap::Rng;
using kgcap::Role;

namespace {

ConceptVocab tiny_vocab() {
  ConceptVocab v;
  v.add("man", Role::object);
  v.add("horse", Role::object);
  v.add("riding", Role::relationship);
  v.add("red", Role::attribute);
  return v;
}

AttentionMapperParams random_mapper(int hidden, int lv, int k, Rng& rng) {
  return AttentionMapperParams{kgcap::glorot_uniform(hidden, lv, rng),
                               kgcap::uniform_array({hidden}, -0.2, 0.2, rng),
                               kgcap::glorot_uniform(k, hidden, rng)};
}

}  // namespace

// ---------------------------------------------------------------------------
// attend_multi
// ---------------------------------------------------------------------------

TEST_CASE("a single proposal receives all attention", "[proposals]") {
  Rng rng(1);
  const Array v = kgcap::uniform_array({1, 6}, -1, 1, rng);
  const auto res = kgcap::attend_multi(v, random_mapper(4, 6, 3, rng));
  REQUIRE(res.attention.dim(0) == 3);
  for (int k = 0; k < 3; ++k) {
    REQUIRE(res.attention.at(k, 0) == 1.0);
    for (int d = 0; d < 6; ++d)
      REQUIRE_THAT(res.aggregated.at(k, d), Catch::Matchers::WithinAbs(v.at(0, d), 1e-15));
  }
}

TEST_CASE("a dominant logit saturates sparsemax onto one proposal", "[proposals]") {
  // W1 = I (3x3 inputs), b1 = 0, W2 row = [5, 0, 0] on tanh-ed features:
  // with basis-vector proposals the first logit dominates by > 1, so the
  // projection of [~5,0,0] is exactly [1,0,0] (oracle check included).
  AttentionMapperParams mapper{Array({3, 3}), Array({3}), Array({1, 3})};
  for (int i = 0; i < 3; ++i) mapper.w1.at(i, i) = 25.0;  // tanh saturates to ~1
  mapper.w2.at(0, 0) = 5.0;
  const Array proposals = Array::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const auto res = kgcap::attend_multi(proposals, mapper);
  const auto oracle_p = oracle::project_simplex_sort({5.0, 0.0, 0.0});
  REQUIRE(oracle_p == std::vector<double>{1.0, 0.0, 0.0});
  REQUIRE(res.attention.at(0, 0) == 1.0);
  for (int d = 0; d < 3; ++d)
    REQUIRE_THAT(res.aggregated.at(0, d), Catch::Matchers::WithinAbs(proposals.at(0, d), 1e-12));
}

TEST_CASE("attention rows and inferred distributions live on the simplex (fuzz)", "[proposals]") {
  Rng rng(33);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + static_cast<int>(rng.uniform_int(7));
    const int lv = 2 + static_cast<int>(rng.uniform_int(5));
    const Array v = kgcap::uniform_array({n, lv}, -2, 2, rng);
    const auto res = kgcap::attend_multi(v, random_mapper(5, lv, 3, rng));
    for (int k = 0; k < 3; ++k) {
      double sum = 0.0;
      for (int i = 0; i < n; ++i) {
        REQUIRE(res.attention.at(k, i) >= 0.0);
        sum += res.attention.at(k, i);
      }
      REQUIRE_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-12));
    }
    ClassifierHeadParams head{kgcap::glorot_uniform(4, lv, rng), kgcap::uniform_array({4}, -1, 1, rng)};
    Array one_prop({lv});
    for (int d = 0; d < lv; ++d) one_prop[d] = v.at(0, d);
    const Array p = kgcap::infer_concept_distribution(one_prop, head);
    double sum = 0.0;
    for (int c = 0; c < 4; ++c) {
      REQUIRE(p[c] >= 0.0);
      sum += p[c];
    }
    REQUIRE_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-12));
  }
}

// ---------------------------------------------------------------------------
// predict_multilabel
// ---------------------------------------------------------------------------

TEST_CASE("zero classifier yields all 0.5", "[proposals]") {
  const Array z = Array::full({3, 4}, 0.7);
  ClassifierHeadParams head{Array({5, 4}), Array({5})};
  const Array p = kgcap::predict_multilabel(z, head);
  for (int c = 0; c < 5; ++c) REQUIRE(p[c] == 0.5);
}

TEST_CASE("a +10 logit sum saturates the sigmoid", "[proposals]") {
  ClassifierHeadParams head{Array({1, 1}), Array({1})};
  head.b[0] = 10.0;  // one head, logit 10
  const Array p = kgcap::predict_multilabel(Array::full({1, 1}, 0.0), head);
  REQUIRE(p[0] > 0.9999);
}

TEST_CASE("cancelling logits across heads give 0.5", "[proposals]") {
  // K = 2, f(z) = w . z, inputs l and -l cancel exactly.
  ClassifierHeadParams head{Array::from({1, 2}, {0.9, -0.4}), Array({1})};
  const Array z = Array::from({2, 2}, {1.5, 2.0, -1.5, -2.0});
  const Array p = kgcap::predict_multilabel(z, head);
  REQUIRE_THAT(p[0], Catch::Matchers::WithinAbs(0.5, 1e-15));
}

// ---------------------------------------------------------------------------
// diversity_penalty
// ---------------------------------------------------------------------------

TEST_CASE("identical rows have zero diversity penalty", "[proposals]") {
  const Array z = Array::from({2, 3}, {0.3, -1.0, 0.5, 0.3, -1.0, 0.5});
  REQUIRE(kgcap::diversity_penalty(z) == 0.0);
}

TEST_CASE("hand-evaluated two-row KL penalty", "[proposals]") {
  // Rows built from logits so softmax gives p = [0.5, 0.5], q = [0.9, 0.1].
  const double l = std::log(9.0);
  const Array z = Array::from({2, 2}, {0.0, 0.0, l, 0.0});
  const auto p = oracle::softmax({0.0, 0.0});
  const auto q = oracle::softmax({l, 0.0});
  const double expected = -(oracle::kl_divergence(p, q) + oracle::kl_divergence(q, p));
  // Both ordered KL terms evaluated independently: KL(p||q) = 0.5 ln(25/9),
  // KL(q||p) = 0.9 ln 1.8 + 0.1 ln 0.2.
  REQUIRE_THAT(oracle::kl_divergence(p, q), Catch::Matchers::WithinAbs(0.5 * std::log(25.0 / 9.0), 1e-12));
  REQUIRE_THAT(oracle::kl_divergence(q, p),
               Catch::Matchers::WithinAbs(0.9 * std::log(1.8) + 0.1 * std::log(0.2), 1e-12));
  REQUIRE_THAT(kgcap::diversity_penalty(z), Catch::Matchers::WithinAbs(expected, 1e-12));
}

TEST_CASE("diversity penalty is never positive (fuzz)", "[proposals]") {
  Rng rng(44);
  for (int trial = 0; trial < 500; ++trial) {
    const int k = 2 + static_cast<int>(rng.uniform_int(3));
    const int d = 2 + static_cast<int>(rng.uniform_int(6));
    REQUIRE(kgcap::diversity_penalty(kgcap::uniform_array({k, d}, -3, 3, rng)) <= 0.0);
  }
}

TEST_CASE("single head returns zero with no pairs", "[proposals]") {
  REQUIRE(kgcap::diversity_penalty(Array::full({1, 4}, 1.0)) == 0.0);
}

// ---------------------------------------------------------------------------
// mapping_loss
// ---------------------------------------------------------------------------

TEST_CASE("near-perfect probabilities give a vanishing BCE term", "[proposals]") {
  const Array probs = Array::vec({1.0 - 1e-9, 1e-9});
  const Array labels = Array::vec({1.0, 0.0});
  const Array z = Array::full({2, 2}, 0.0);  // identical rows: zero penalty
  REQUIRE(kgcap::mapping_loss(probs, labels, z) < 1e-7);
}

TEST_CASE("uniform probabilities give ln 2", "[proposals]") {
  const Array probs = Array::full({4}, 0.5);
  const Array labels = Array::vec({1, 0, 1, 0});
  const Array z = Array::full({2, 2}, 0.0);
  REQUIRE_THAT(kgcap::mapping_loss(probs, labels, z), Catch::Matchers::WithinAbs(std::log(2.0), 1e-12));
}

TEST_CASE("two-class hand computation", "[proposals]") {
  const Array probs = Array::vec({0.9, 0.2});
  const Array labels = Array::vec({1.0, 0.0});
  const Array z = Array::full({2, 2}, 0.0);
  const double expected = -(std::log(0.9) + std::log(0.8)) / 2.0;
  REQUIRE_THAT(kgcap::mapping_loss(probs, labels, z), Catch::Matchers::WithinAbs(expected, 1e-12));
  REQUIRE_THAT(expected, Catch::Matchers::WithinAbs(0.1643, 5e-5));
}

TEST_CASE("labels outside {0,1} are a contract error", "[proposals]") {
  const Array probs = Array::vec({0.5});
  const Array z = Array::full({2, 1}, 0.0);
  REQUIRE_THROWS_AS(kgcap::mapping_loss(probs, Array::vec({0.5}), z), kgcap::ContractError);
}

// ---------------------------------------------------------------------------
// labels_from_caption
// ---------------------------------------------------------------------------

TEST_CASE("caption tokens intersect the role lexicons", "[proposals]") {
  const auto vocab = tiny_vocab();
  const auto set = kgcap::labels_from_caption({"a", "Man", "riding", "a", "horse"}, vocab);
  REQUIRE(set.objects.values() == std::vector<double>{1.0, 1.0});
  REQUIRE(set.relations.values() == std::vector<double>{1.0});
  REQUIRE(set.attributes.values() == std::vector<double>{0.0});
}

TEST_CASE("empty caption yields empty labels", "[proposals]") {
  const auto set = kgcap::labels_from_caption({}, tiny_vocab());
  REQUIRE(set.objects.values() == std::vector<double>{0.0, 0.0});
  REQUIRE(set.relations.values() == std::vector<double>{0.0});
}

TEST_CASE("repeated tokens stay multi-hot", "[proposals]") {
  const auto set = kgcap::labels_from_caption({"red", "red", "horse"}, tiny_vocab());
  REQUIRE(set.attributes.values() == std::vector<double>{1.0});
  REQUIRE(set.objects.values() == std::vector<double>{0.0, 1.0});
}

// ---------------------------------------------------------------------------
// infer_concept_distribution / knowledge_vector
// ---------------------------------------------------------------------------

TEST_CASE("zero classifier infers the uniform distribution", "[proposals]") {
  ClassifierHeadParams head{Array({3, 2}), Array({3})};
  const Array p = kgcap::infer_concept_distribution(Array::vec({0.4, -0.7}), head);
  for (int c = 0; c < 3; ++c) REQUIRE_THAT(p[c], Catch::Matchers::WithinAbs(1.0 / 3.0, 1e-15));
}

TEST_CASE("inference matches the projection oracle on constructed logits", "[proposals]") {
  // f(v) = diag-select so logits equal v's entries.
  ClassifierHeadParams head{Array({3, 3}), Array({3})};
  for (int i = 0; i < 3; ++i) head.w.at(i, i) = 1.0;
  const Array p1 = kgcap::infer_concept_distribution(Array::vec({5, 0, 0}), head);
  REQUIRE(p1.values() == std::vector<double>{1.0, 0.0, 0.0});
  const Array p2 = kgcap::infer_concept_distribution(Array::vec({0.5, 0.3, -9.0}), head);
  REQUIRE_THAT(p2[0], Catch::Matchers::WithinAbs(0.6, 1e-12));
  REQUIRE_THAT(p2[1], Catch::Matchers::WithinAbs(0.4, 1e-12));
  REQUIRE(p2[2] == 0.0);
}

TEST_CASE("knowledge vectors are convex combinations of table columns", "[proposals]") {
  const auto vocab = tiny_vocab();
  ComplexEmbeddingTable table{Array({4, 1}), Array({4, 1})};
  table.real.at(0, 0) = 2.0;  // man
  table.real.at(1, 0) = 4.0;  // horse

  // One-hot picks out a single column.
  const Array one_hot = kgcap::knowledge_vector(Array::vec({1.0, 0.0}), table, vocab, Role::object);
  REQUIRE(one_hot.values() == std::vector<double>{2.0, 0.0});

  // Hand arithmetic: 0.25 * 2 + 0.75 * 4 = 3.5.
  const Array mix = kgcap::knowledge_vector(Array::vec({0.25, 0.75}), table, vocab, Role::object);
  REQUIRE_THAT(mix[0], Catch::Matchers::WithinAbs(3.5, 1e-15));
  REQUIRE(mix[1] == 0.0);

  // Uniform over identical columns reproduces the column.
  table.real.at(1, 0) = 2.0;
  const Array same = kgcap::knowledge_vector(Array::vec({0.5, 0.5}), table, vocab, Role::object);
  REQUIRE_THAT(same[0], Catch::Matchers::WithinAbs(2.0, 1e-15));
}

TEST_CASE("knowledge vector norm is bounded by the largest column norm", "[proposals]") {
  Rng rng(71);
  ConceptVocab vocab;
  for (int i = 0; i < 6; ++i) vocab.add("o" + std::to_string(i), Role::object);
  ComplexEmbeddingTable table{kgcap::uniform_array({6, 4}, -2, 2, rng),
                              kgcap::uniform_array({6, 4}, -2, 2, rng)};
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> logits(6);
    for (double& v : logits) v = rng.uniform(-2, 2);
    const Array p = kgcap::sparsemax(Array::vec(logits));
    const Array kv = kgcap::knowledge_vector(p, table, vocab, Role::object);
    double kv_norm = 0.0;
    for (int d = 0; d < kv.size(); ++d) kv_norm += kv[d] * kv[d];
    double max_col = 0.0;
    for (int c = 0; c < 6; ++c) {
      double n = 0.0;
      for (int d = 0; d < 4; ++d)
        n += table.real.at(c, d) * table.real.at(c, d) + table.imag.at(c, d) * table.imag.at(c, d);
      max_col = std::max(max_col, n);
    }
    REQUIRE(std::sqrt(kv_norm) <= std::sqrt(max_col) + 1e-12);
  }
}

TEST_CASE("a role with no concepts is a config error", "[proposals]") {
  ConceptVocab vocab;
  vocab.add("man", Role::object);
  ComplexEmbeddingTable table{Array({1, 2}), Array({1, 2})};
  REQUIRE_THROWS_AS(kgcap::knowledge_vector(Array::vec({}), table, vocab, Role::attribute),
                    kgcap::ConfigError);
}

// ---------------------------------------------------------------------------
// union_relation_features
// ---------------------------------------------------------------------------

TEST_CASE("two regions form exactly one pair", "[proposals]") {
  const Array regions = Array::from({2, 2}, {1.0, 3.0, 3.0, 5.0});
  const Array pairs = kgcap::enumerate_pair_features(regions);
  REQUIRE(pairs.dim(0) == 1);
  REQUIRE(pairs.at(0, 0) == 2.0);
  REQUIRE(pairs.at(0, 1) == 4.0);
  const Array centers = kgcap::union_relation_features(regions, 8, 3, 5);
  REQUIRE(centers.dim(0) == 1);  // clamped to the single pair
}

TEST_CASE("the pair combiner is idempotent on identical regions", "[proposals]") {
  const Array regions = Array::from({2, 3}, {0.5, -1.0, 2.0, 0.5, -1.0, 2.0});
  const Array pairs = kgcap::enumerate_pair_features(regions);
  for (int d = 0; d < 3; ++d) REQUIRE(pairs.at(0, d) == regions.at(0, d));
}

TEST_CASE("four regions with limit six enumerate all pairs", "[proposals]") {
  Rng rng(2);
  const Array regions = kgcap::uniform_array({4, 3}, 0, 1, rng);
  REQUIRE(kgcap::enumerate_pair_features(regions).dim(0) == 6);  // C(4,2) oracle
  // With pair_limit = 6 nothing is dropped before clustering.
  const Array centers = kgcap::union_relation_features(regions, 6, 6, 11);
  REQUIRE(centers.dim(0) == 6);
}

TEST_CASE("single region cannot form relation features", "[proposals]") {
  REQUIRE_THROWS_AS(kgcap::union_relation_features(Array({1, 3}), 8, 2, 1), kgcap::ContractError);
}

// ---------------------------------------------------------------------------
// mapping gradcheck
// ---------------------------------------------------------------------------

TEST_CASE("mapping loss gradients match finite differences", "[proposals][gradcheck]") {
  Rng rng(90);
  const int lv = 3, hidden = 4, k = 3, c = 3;
  kgcap::ParameterStore params;
  params.add("m.w1", kgcap::glorot_uniform(hidden, lv, rng));
  params.add("m.b1", kgcap::uniform_array({hidden}, -0.1, 0.1, rng));
  params.add("m.w2", kgcap::glorot_uniform(k, hidden, rng));
  params.add("m.f.w", kgcap::glorot_uniform(c, lv, rng));
  params.add("m.f.b", kgcap::uniform_array({c}, -0.1, 0.1, rng));
  const Array proposals = kgcap::uniform_array({4, lv}, -1, 1, rng);
  const Array labels = Array::vec({1.0, 0.0, 1.0});

  auto build = [&](kgcap::Tape& tp, kgcap::ParameterStore& ps) {
    kgcap::detail::MapperVars mv{tp.param("m.w1", ps.get("m.w1")), tp.param("m.b1", ps.get("m.b1")),
                                 tp.param("m.w2", ps.get("m.w2")), tp.param("m.f.w", ps.get("m.f.w")),
                                 tp.param("m.f.b", ps.get("m.f.b"))};
    return kgcap::detail::mapping_loss_on_tape(tp, mv, proposals, labels);
  };
  auto loss_fn = [&](kgcap::ParameterStore& ps) {
    kgcap::Tape tp;
    return tp.value(build(tp, ps)).scalar_value();
  };
  auto grad_fn = [&](kgcap::ParameterStore& ps) {
    kgcap::Tape tp;
    return tp.backward(build(tp, ps));
  };
  REQUIRE(kgcap::finite_diff_check(loss_fn, grad_fn, params, 1e-6) < 1e-5);
}

TEST_CASE("tape mapping loss equals the array-level mapping_loss", "[proposals]") {
  Rng rng(91);
  const int lv = 4, hidden = 5, k = 3, c = 4;
  AttentionMapperParams mapper = random_mapper(hidden, lv, k, rng);
  ClassifierHeadParams head{kgcap::glorot_uniform(c, lv, rng), kgcap::uniform_array({c}, -0.3, 0.3, rng)};
  const Array proposals = kgcap::uniform_array({5, lv}, -1, 1, rng);
  const Array labels = Array::vec({1, 0, 0, 1});

  const auto att = kgcap::attend_multi(proposals, mapper);
  const Array probs = kgcap::predict_multilabel(att.aggregated, head);
  const double direct = kgcap::mapping_loss(probs, labels, att.aggregated);

  kgcap::Tape tp;
  kgcap::detail::MapperVars mv{tp.input(mapper.w1), tp.input(mapper.b1), tp.input(mapper.w2),
                               tp.input(head.w), tp.input(head.b)};
  const double on_tape =
      tp.value(kgcap::detail::mapping_loss_on_tape(tp, mv, proposals, labels)).scalar_value();
  REQUIRE_THAT(direct, Catch::Matchers::WithinAbs(on_tape, 1e-10));
}
