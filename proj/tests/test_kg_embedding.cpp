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

#include "kgcap/kg_embedding.hpp"
#include "support/tmpdir.hpp"
#include "support/toy_kg.hpp"

using kgcap::Array;
using kgcap::ComplexEmbeddingTable;
using kgcap::IndexTriple;
using kgcap::Rng;
using kgcap::Role;
using kgcap::TripleStore;

// ---------------------------------------------------------------------------
// load_triples
// ---------------------------------------------------------------------------

TEST_CASE("smallest well-formed store", "[kg][triples]") {
  fixtures::TmpDir tmp;
  const auto triples = tmp.write("t.tsv", "man\triding\thorse\n");
  const auto concepts = tmp.write("c.tsv", "man\tobject\nriding\trelationship\nhorse\tobject\n");
  const TripleStore store = kgcap::load_triples(triples, concepts);
  REQUIRE(store.vocab.size() == 3);
  REQUIRE(store.triples.size() == 1);
  REQUIRE(store.duplicate_count == 0);
}

TEST_CASE("duplicate lines are dropped and counted", "[kg][triples]") {
  fixtures::TmpDir tmp;
  const auto triples = tmp.write("t.tsv", "man\triding\thorse\nman\triding\thorse\n");
  const auto concepts = tmp.write("c.tsv", "man\tobject\nriding\trelationship\nhorse\tobject\n");
  const TripleStore store = kgcap::load_triples(triples, concepts);
  REQUIRE(store.triples.size() == 1);
  REQUIRE(store.duplicate_count == 1);
}

TEST_CASE("triples are ordered: reversed facts stay distinct", "[kg][triples]") {
  fixtures::TmpDir tmp;
  const auto triples = tmp.write("t.tsv", "man\triding\thorse\nhorse\triding\tman\n");
  const auto concepts = tmp.write("c.tsv", "man\tobject\nriding\trelationship\nhorse\tobject\n");
  const TripleStore store = kgcap::load_triples(triples, concepts);
  REQUIRE(store.triples.size() == 2);
  // Index-tuple oracle: (0,1,2) and (2,1,0) under first-appearance ids.
  REQUIRE(store.triples[0] == IndexTriple{0, 1, 2});
  REQUIRE(store.triples[1] == IndexTriple{2, 1, 0});
}

TEST_CASE("malformed lines and role misuse are reported with line numbers", "[kg][triples]") {
  fixtures::TmpDir tmp;
  const auto concepts = tmp.write("c.tsv", "man\tobject\nriding\trelationship\nhorse\tobject\n");
  const auto bad = tmp.write("bad.tsv", "man\triding\thorse\nman riding horse\n");
  REQUIRE_THROWS_WITH(kgcap::load_triples(bad, concepts), Catch::Matchers::ContainsSubstring(":2"));
  const auto misrole = tmp.write("mis.tsv", "man\thorse\triding\n");
  REQUIRE_THROWS_AS(kgcap::load_triples(misrole, concepts), kgcap::ParseError);
}

// ---------------------------------------------------------------------------
// complex_trilinear_score
// ---------------------------------------------------------------------------

namespace {
Array packed(std::vector<double> re, std::vector<double> im) {
  std::vector<double> v = re;
  v.insert(v.end(), im.begin(), im.end());
  return Array::vec(std::move(v));
}
}  // namespace

TEST_CASE("zero relation annihilates the score", "[kg][score]") {
  const Array h = packed({1.3, -0.2}, {0.4, 0.9});
  const Array r = packed({0.0, 0.0}, {0.0, 0.0});
  REQUIRE(kgcap::complex_trilinear_score(h, r, h) == 0.0);
}

TEST_CASE("hand-computed complex products", "[kg][score]") {
  // (1+i)(1)(conj(1+i)) = (1+i)(1-i) = 2
  REQUIRE_THAT(kgcap::complex_trilinear_score(packed({1}, {1}), packed({1}, {0}), packed({1}, {1})),
               Catch::Matchers::WithinAbs(2.0, 1e-15));
  // (1+i)(i)(conj(1)) = i + i^2 -> real part -1; swapping head and tail flips it.
  REQUIRE_THAT(kgcap::complex_trilinear_score(packed({1}, {1}), packed({0}, {1}), packed({1}, {0})),
               Catch::Matchers::WithinAbs(-1.0, 1e-15));
  REQUIRE_THAT(kgcap::complex_trilinear_score(packed({1}, {0}), packed({0}, {1}), packed({1}, {1})),
               Catch::Matchers::WithinAbs(1.0, 1e-15));
}

TEST_CASE("length mismatch is a dimension error", "[kg][score]") {
  REQUIRE_THROWS_AS(
      kgcap::complex_trilinear_score(packed({1}, {1}), packed({1, 2}, {0, 0}), packed({1}, {1})),
      kgcap::DimensionError);
}

TEST_CASE("four-term expansion equals the complex product on random triples", "[kg][score]") {
  Rng rng(404);
  for (int trial = 0; trial < 1000; ++trial) {
    const int L = 1 + static_cast<int>(rng.uniform_int(8));
    auto draw = [&] {
      std::vector<double> v(static_cast<std::size_t>(2 * L));
      for (double& x : v) x = rng.uniform(-2.0, 2.0);
      return Array::vec(std::move(v));
    };
    const Array h = draw(), r = draw(), t = draw();
    REQUIRE_THAT(kgcap::complex_trilinear_score(h, r, t),
                 Catch::Matchers::WithinAbs(kgcap::complex_trilinear_score_expanded(h, r, t), 1e-10));
  }
}

TEST_CASE("real relations score symmetrically, generic ones do not", "[kg][score]") {
  Rng rng(505);
  bool saw_asymmetry = false;
  for (int trial = 0; trial < 200; ++trial) {
    const int L = 1 + static_cast<int>(rng.uniform_int(6));
    std::vector<double> hre(static_cast<std::size_t>(L)), him(static_cast<std::size_t>(L)),
        tre(static_cast<std::size_t>(L)), tim(static_cast<std::size_t>(L)),
        rre(static_cast<std::size_t>(L)), rim(static_cast<std::size_t>(L), 0.0);
    for (int i = 0; i < L; ++i) {
      hre[static_cast<std::size_t>(i)] = rng.uniform(-2, 2);
      him[static_cast<std::size_t>(i)] = rng.uniform(-2, 2);
      tre[static_cast<std::size_t>(i)] = rng.uniform(-2, 2);
      tim[static_cast<std::size_t>(i)] = rng.uniform(-2, 2);
      rre[static_cast<std::size_t>(i)] = rng.uniform(-2, 2);
    }
    // imag(r) = 0: head/tail swap must leave the score bit-identical.
    std::vector<double> h = hre, t = tre;
    h.insert(h.end(), him.begin(), him.end());
    t.insert(t.end(), tim.begin(), tim.end());
    std::vector<double> r = rre;
    r.insert(r.end(), rim.begin(), rim.end());
    const double fwd = kgcap::complex_trilinear_score(Array::vec(h), Array::vec(r), Array::vec(t));
    const double swp = kgcap::complex_trilinear_score(Array::vec(t), Array::vec(r), Array::vec(h));
    REQUIRE(fwd == swp);

    // A generic complex relation breaks the symmetry for some pair.
    for (int i = 0; i < L; ++i) rim[static_cast<std::size_t>(i)] = rng.uniform(-2, 2);
    std::vector<double> rg = rre;
    rg.insert(rg.end(), rim.begin(), rim.end());
    const double a = kgcap::complex_trilinear_score(Array::vec(h), Array::vec(rg), Array::vec(t));
    const double b = kgcap::complex_trilinear_score(Array::vec(t), Array::vec(rg), Array::vec(h));
    if (a != b) saw_asymmetry = true;
  }
  REQUIRE(saw_asymmetry);
}

TEST_CASE("scoring is linear in the relation", "[kg][score]") {
  Rng rng(606);
  for (int trial = 0; trial < 200; ++trial) {
    const int L = 2;
    auto draw = [&] {
      std::vector<double> v(static_cast<std::size_t>(2 * L));
      for (double& x : v) x = rng.uniform(-2.0, 2.0);
      return Array::vec(std::move(v));
    };
    const Array h = draw(), t = draw(), r1 = draw(), r2 = draw();
    const double a = rng.uniform(-2, 2), b = rng.uniform(-2, 2);
    Array mix = Array({2 * L});
    for (int i = 0; i < 2 * L; ++i) mix[i] = a * r1[i] + b * r2[i];
    const double lhs = kgcap::complex_trilinear_score(h, mix, t);
    const double rhs = a * kgcap::complex_trilinear_score(h, r1, t) +
                       b * kgcap::complex_trilinear_score(h, r2, t);
    REQUIRE_THAT(lhs, Catch::Matchers::WithinAbs(rhs, 1e-10));
  }
}

// ---------------------------------------------------------------------------
// train_kg_embeddings / evaluate_link_prediction
// ---------------------------------------------------------------------------

TEST_CASE("single-triple training separates the positive from corruptions", "[kg][train]") {
  TripleStore store;
  store.vocab.add("a", Role::object);
  store.vocab.add("likes", Role::relationship);
  store.vocab.add("b", Role::object);
  store.vocab.add("c", Role::object);
  store.add_triple(0, 1, 2);

  kgcap::KgTrainConfig cfg;
  cfg.embedding_dim = 2;
  cfg.epochs = 200;
  cfg.seed = 3;
  const ComplexEmbeddingTable table = kgcap::train_kg_embeddings(store, cfg);

  const int L = table.dim();
  auto row = [&](const Array& a, int i) { return a.data() + static_cast<std::int64_t>(i) * L; };
  auto score = [&](int h, int r, int t) {
    return kgcap::complex_trilinear_score(row(table.real, h), row(table.imag, h), row(table.real, r),
                                          row(table.imag, r), row(table.real, t), row(table.imag, t), L);
  };
  const double pos = score(0, 1, 2);
  double best_neg = -1e9;
  for (int h : {1, 2, 3})
    if (h != 0) best_neg = std::max(best_neg, score(h == 1 ? 3 : h, 1, 2));
  for (int t : {0, 1, 3}) best_neg = std::max(best_neg, score(0, 1, t == 1 ? 3 : t));
  REQUIRE(pos > 0.0);
  REQUIRE(best_neg < 0.0);
}

TEST_CASE("training is bit-deterministic for a fixed seed", "[kg][train]") {
  const auto kg = fixtures::make_rule_kg();
  kgcap::KgTrainConfig cfg;
  cfg.embedding_dim = 4;
  cfg.epochs = 20;
  cfg.seed = 12;
  const auto a = kgcap::train_kg_embeddings(kg.train, cfg);
  const auto b = kgcap::train_kg_embeddings(kg.train, cfg);
  REQUIRE(a.real.values() == b.real.values());
  REQUIRE(a.imag.values() == b.imag.values());
}

TEST_CASE("training loss is non-increasing on a trailing 10-epoch average", "[kg][train]") {
  const auto kg = fixtures::make_rule_kg();
  kgcap::KgTrainConfig cfg;
  cfg.embedding_dim = 8;
  cfg.epochs = 120;
  cfg.seed = 5;
  kgcap::KgTrainReport report;
  kgcap::train_kg_embeddings(kg.train, cfg, &report);
  auto trailing = [&](int end) {  // mean of epochs [end-10, end)
    double s = 0.0;
    for (int i = end - 10; i < end; ++i) s += report.epoch_loss[static_cast<std::size_t>(i)];
    return s / 10.0;
  };
  for (int end = 20; end <= cfg.epochs; end += 10) REQUIRE(trailing(end) <= trailing(end - 10) + 1e-9);
}

TEST_CASE("a store without relationship concepts is a config error", "[kg][train]") {
  TripleStore store;
  store.vocab.add("a", Role::object);
  store.triples.push_back({0, 0, 0});  // bypass add_triple checks on purpose
  kgcap::KgTrainConfig cfg;
  REQUIRE_THROWS_AS(kgcap::train_kg_embeddings(store, cfg), kgcap::ConfigError);
}

TEST_CASE("rule KG reaches strong filtered ranking metrics", "[kg][train][slow]") {
  const auto kg = fixtures::make_rule_kg();
  kgcap::KgTrainConfig cfg;  // defaults, default seed
  const ComplexEmbeddingTable table = kgcap::train_kg_embeddings(kg.train, cfg);
  const auto metrics = kgcap::evaluate_link_prediction(table, kg.train, kg.heldout);
  REQUIRE(metrics.mrr >= 0.7);
  REQUIRE(metrics.hits3 >= 0.8);
}

TEST_CASE("perfect table ranks every held-out triple first", "[kg][eval]") {
  TripleStore store;
  store.vocab.add("a", Role::object);
  store.vocab.add("b", Role::object);
  store.vocab.add("r", Role::relationship);
  ComplexEmbeddingTable table{Array({3, 1}), Array({3, 1})};
  // a = 1, b = i, r = i: score(a,r,b) = 1 strictly above all corruptions.
  table.real.at(0, 0) = 1.0;
  table.imag.at(1, 0) = 1.0;
  table.imag.at(2, 0) = 1.0;
  const auto metrics = kgcap::evaluate_link_prediction(table, store, {{0, 2, 1}});
  REQUIRE(metrics.mrr == 1.0);
  REQUIRE(metrics.hits1 == 1.0);
}

TEST_CASE("ties rank pessimistically", "[kg][eval]") {
  TripleStore store;
  store.vocab.add("a", Role::object);
  store.vocab.add("b", Role::object);
  store.vocab.add("r", Role::relationship);
  // All-equal embeddings: the one competing corruption ties the true triple
  // in both directions, so every query ranks second.
  ComplexEmbeddingTable table{Array::full({3, 1}, 0.5), Array::full({3, 1}, 0.25)};
  const auto metrics = kgcap::evaluate_link_prediction(table, store, {{0, 2, 1}});
  REQUIRE_THAT(metrics.mrr, Catch::Matchers::WithinAbs(0.5, 1e-15));
  REQUIRE(metrics.hits1 == 0.0);
  REQUIRE(metrics.hits3 == 1.0);
}

TEST_CASE("random tables rank uniformly in expectation", "[kg][eval]") {
  // 40 object concepts, one relation; with iid random embeddings the true
  // entity's rank is uniform on {1..40}, so MRR concentrates around
  // sum(1/r)/40. The expectation and its spread come from brute force.
  const int n_obj = 40;
  TripleStore store;
  for (int i = 0; i < n_obj; ++i) store.vocab.add("e" + std::to_string(i), Role::object);
  store.vocab.add("r", Role::relationship);

  double expect = 0.0, expect_sq = 0.0;
  for (int r = 1; r <= n_obj; ++r) {
    expect += 1.0 / r;
    expect_sq += 1.0 / (static_cast<double>(r) * r);
  }
  expect /= n_obj;
  expect_sq /= n_obj;
  const double var = expect_sq - expect * expect;

  Rng rng(777);
  std::vector<kgcap::IndexTriple> heldout;
  std::set<kgcap::IndexTriple> seen;
  while (heldout.size() < 60) {
    kgcap::IndexTriple t{static_cast<int>(rng.uniform_int(n_obj)), n_obj,
                         static_cast<int>(rng.uniform_int(n_obj))};
    if (seen.insert(t).second) heldout.push_back(t);
  }
  ComplexEmbeddingTable table{kgcap::uniform_array({n_obj + 1, 4}, -1.0, 1.0, rng),
                              kgcap::uniform_array({n_obj + 1, 4}, -1.0, 1.0, rng)};
  const auto metrics = kgcap::evaluate_link_prediction(table, store, heldout);
  const double sigma = std::sqrt(var / (2.0 * static_cast<double>(heldout.size())));
  REQUIRE(metrics.mrr > expect - 3.0 * sigma);
  REQUIRE(metrics.mrr < expect + 3.0 * sigma);
}

TEST_CASE("empty held-out set is a contract error", "[kg][eval]") {
  TripleStore store;
  store.vocab.add("a", Role::object);
  ComplexEmbeddingTable table{Array({1, 1}), Array({1, 1})};
  REQUIRE_THROWS_AS(kgcap::evaluate_link_prediction(table, store, {}), kgcap::ContractError);
}

TEST_CASE("logistic objective gradient matches finite differences", "[kg][gradcheck]") {
  // 5-triple store, fixed negatives; the loss mirrors the trainer's tape.
  const auto kg = fixtures::make_rule_kg();
  std::vector<int> hs, rs, ts;
  std::vector<double> ys;
  for (int i = 0; i < 5; ++i) {
    hs.push_back(kg.train.triples[static_cast<std::size_t>(i)].head);
    rs.push_back(kg.train.triples[static_cast<std::size_t>(i)].relation);
    ts.push_back(kg.train.triples[static_cast<std::size_t>(i)].tail);
    ys.push_back(1.0);
    hs.push_back((hs.back() + 7) % 20);
    rs.push_back(rs.back());
    ts.push_back((ts.back() + 3) % 20);
    ys.push_back(-1.0);
  }
  kgcap::Rng rng(9);
  kgcap::ParameterStore params;
  params.add("kg.re", kgcap::glorot_uniform(25, 3, rng));
  params.add("kg.im", kgcap::glorot_uniform(25, 3, rng));

  auto build = [&](kgcap::Tape& tp, kgcap::ParameterStore& ps) {
    kgcap::Var re = tp.param("kg.re", ps.get("kg.re"));
    kgcap::Var im = tp.param("kg.im", ps.get("kg.im"));
    kgcap::Var scores = kgcap::trilinear_scores_on_tape(
        tp, tp.gather_rows(re, hs), tp.gather_rows(im, hs), tp.gather_rows(re, rs),
        tp.gather_rows(im, rs), tp.gather_rows(re, ts), tp.gather_rows(im, ts));
    Array sign({static_cast<int>(ys.size())});
    for (std::size_t i = 0; i < ys.size(); ++i) sign[static_cast<std::int64_t>(i)] = -ys[i];
    kgcap::Var loss = tp.sum(tp.softplus_(tp.mul(scores, tp.input(sign))));
    kgcap::Var l2 = tp.add(tp.sum(tp.mul(re, re)), tp.sum(tp.mul(im, im)));
    return tp.add(loss, tp.scale(l2, 1e-4));
  };
  auto loss_fn = [&](kgcap::ParameterStore& ps) {
    kgcap::Tape tp;
    return tp.value(build(tp, ps)).scalar_value();
  };
  auto grad_fn = [&](kgcap::ParameterStore& ps) {
    kgcap::Tape tp;
    return tp.backward(build(tp, ps));
  };
  REQUIRE(kgcap::finite_diff_check(loss_fn, grad_fn, params, 1e-6) < 1e-6);
}

TEST_CASE("embedding table round-trips through the binary format", "[kg][io]") {
  fixtures::TmpDir tmp;
  Rng rng(1);
  ComplexEmbeddingTable t{kgcap::uniform_array({7, 3}, -1, 1, rng),
                          kgcap::uniform_array({7, 3}, -1, 1, rng)};
  const auto path = tmp.file("kg.bin");
  kgcap::save_embedding_table(t, path);
  const auto u = kgcap::load_embedding_table(path);
  REQUIRE(u.real.values() == t.real.values());
  REQUIRE(u.imag.values() == t.imag.values());

  // Truncation must not load.
  auto bytes = kgcap::read_file_bytes(path);
  bytes.resize(bytes.size() / 2);
  kgcap::atomic_write_file(tmp.file("trunc.bin"), bytes);
  REQUIRE_THROWS_AS(kgcap::load_embedding_table(tmp.file("trunc.bin")), kgcap::IoError);
}
