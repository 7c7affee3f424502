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
#include <set>
#include <string>
#include <vector>

#include "kgcap/array.hpp"
#include "kgcap/error.hpp"
#include "kgcap/io.hpp"
#include "kgcap/optim.hpp"
#include "kgcap/tape.hpp"
#include "kgcap/triples.hpp"

namespace kgcap {

/// Complex embeddings of all C knowledge-graph concepts, stored as paired
/// real arrays of shape (C, L_k).
struct ComplexEmbeddingTable {
  Array real;  // (C, L_k)
  Array imag;  // (C, L_k)

  int concepts() const { return real.rank() == 2 ? real.dim(0) : 0; }
  int dim() const { return real.rank() == 2 ? real.dim(1) : 0; }

  void validate() const {
    if (!real.same_shape(imag)) throw DimensionError("embedding table: real/imag shape mismatch");
    if (!real.all_finite() || !imag.all_finite())
      throw EvaluationError("embedding table: non-finite entries");
  }
};

// ---------------------------------------------------------------------------
// Trilinear scoring.
//
// Two algebraically equal routes are kept on purpose: the grouped complex
// product below is the implementation path, and the literal four-term
// expansion is the cross-check used by tests. The grouped form also makes
// head/tail swap symmetry bit-exact when the relation is purely real.
// ---------------------------------------------------------------------------

inline double complex_trilinear_score(const double* h_re, const double* h_im, const double* r_re,
                                      const double* r_im, const double* t_re, const double* t_im,
                                      int L) {
  double s = 0.0;
  for (int d = 0; d < L; ++d) {
    s += r_re[d] * (h_re[d] * t_re[d] + h_im[d] * t_im[d]) +
         r_im[d] * (h_re[d] * t_im[d] - h_im[d] * t_re[d]);
  }
  return s;
}

/// Re(sum_d h_d * r_d * conj(t_d)) for packed [real; imag] complex vectors.
inline double complex_trilinear_score(const Array& h, const Array& r, const Array& t) {
  if (h.rank() != 1 || r.rank() != 1 || t.rank() != 1 || h.size() != r.size() || h.size() != t.size())
    throw DimensionError("complex_trilinear_score: packed vectors must share an even length");
  if (h.size() % 2 != 0) throw DimensionError("complex_trilinear_score: packed length must be even");
  const int L = static_cast<int>(h.size() / 2);
  return complex_trilinear_score(h.data(), h.data() + L, r.data(), r.data() + L, t.data(),
                                 t.data() + L, L);
}

/// The four multi-linear dot products, term by term.
inline double complex_trilinear_score_expanded(const double* h_re, const double* h_im,
                                               const double* r_re, const double* r_im,
                                               const double* t_re, const double* t_im, int L) {
  auto tri = [L](const double* a, const double* b, const double* c) {
    double s = 0.0;
    for (int d = 0; d < L; ++d) s += a[d] * b[d] * c[d];
    return s;
  };
  return tri(h_re, r_re, t_re) + tri(h_re, r_im, t_im) + tri(h_im, r_re, t_im) -
         tri(h_im, r_im, t_re);
}

inline double complex_trilinear_score_expanded(const Array& h, const Array& r, const Array& t) {
  if (h.size() != r.size() || h.size() != t.size() || h.size() % 2 != 0)
    throw DimensionError("complex_trilinear_score_expanded: packed length mismatch");
  const int L = static_cast<int>(h.size() / 2);
  return complex_trilinear_score_expanded(h.data(), h.data() + L, r.data(), r.data() + L, t.data(),
                                          t.data() + L, L);
}

/// Tape version over gathered (n, L_k) component matrices; returns the
/// per-sample score vector.
inline Var trilinear_scores_on_tape(Tape& tp, Var h_re, Var h_im, Var r_re, Var r_im, Var t_re,
                                    Var t_im) {
  Var sym = tp.add(tp.mul(h_re, t_re), tp.mul(h_im, t_im));
  Var asym = tp.sub(tp.mul(h_re, t_im), tp.mul(h_im, t_re));
  Var per_dim = tp.add(tp.mul(r_re, sym), tp.mul(r_im, asym));
  Var ones = tp.input(Array::full({tp.value(per_dim).dim(1)}, 1.0));
  return tp.matvec(per_dim, ones);  // row sums
}

// ---------------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------------

struct KgTrainConfig {
  int embedding_dim = 16;      // L_k
  int epochs = 400;
  double learning_rate = 0.05;
  int negatives_per_positive = 4;
  double l2_weight = 1e-4;
  std::uint64_t seed = 1;

  void validate() const {
    if (embedding_dim < 1 || epochs < 1 || learning_rate <= 0.0 || negatives_per_positive < 1 ||
        l2_weight < 0.0)
      throw ConfigError("kg-train: config values must be positive");
  }
};

struct KgTrainReport {
  std::vector<double> epoch_loss;
};

/// Logistic-loss training of the complex embeddings with corrupted-entity
/// negatives: loss = sum softplus(-y * score) + l2 * ||E||^2. Full-batch
/// Adam per epoch; deterministic for a fixed seed.
inline ComplexEmbeddingTable train_kg_embeddings(const TripleStore& store, const KgTrainConfig& config,
                                                 KgTrainReport* report = nullptr) {
  config.validate();
  if (store.triples.empty()) throw ContractError("kg-train: empty triple store");
  const std::vector<int> relations = store.vocab.members(Role::relationship);
  if (relations.empty()) throw ConfigError("kg-train: store has no relationship-role concepts");
  const std::vector<int> objects = store.vocab.members(Role::object);
  const std::vector<int> tails = store.vocab.tail_members();
  if (objects.empty()) throw ConfigError("kg-train: store has no object-role concepts");

  const int C = store.vocab.size();
  const int L = config.embedding_dim;
  Rng rng(config.seed);

  ParameterStore params;
  params.add("kg.re", glorot_uniform(C, L, rng));
  params.add("kg.im", glorot_uniform(C, L, rng));
  AdamOptimizer opt(config.learning_rate);

  std::set<IndexTriple> known(store.triples.begin(), store.triples.end());

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    // Assemble positives plus freshly corrupted negatives.
    std::vector<int> hs, rs, ts;
    std::vector<double> ys;
    for (const auto& trip : store.triples) {
      hs.push_back(trip.head);
      rs.push_back(trip.relation);
      ts.push_back(trip.tail);
      ys.push_back(1.0);
      for (int n = 0; n < config.negatives_per_positive; ++n) {
        IndexTriple neg = trip;
        for (int attempt = 0; attempt < 16; ++attempt) {
          neg = trip;
          if (rng.uniform_int(2) == 0)
            neg.head = objects[rng.uniform_int(objects.size())];
          else
            neg.tail = tails[rng.uniform_int(tails.size())];
          if (!known.count(neg)) break;
        }
        hs.push_back(neg.head);
        rs.push_back(neg.relation);
        ts.push_back(neg.tail);
        ys.push_back(-1.0);
      }
    }

    Tape tp;
    Var re = tp.param("kg.re", params.get("kg.re"));
    Var im = tp.param("kg.im", params.get("kg.im"));
    Var scores = trilinear_scores_on_tape(tp, tp.gather_rows(re, hs), tp.gather_rows(im, hs),
                                          tp.gather_rows(re, rs), tp.gather_rows(im, rs),
                                          tp.gather_rows(re, ts), tp.gather_rows(im, ts));
    Array margin_sign({static_cast<int>(ys.size())});
    for (std::size_t i = 0; i < ys.size(); ++i) margin_sign[static_cast<std::int64_t>(i)] = -ys[i];
    Var loss = tp.sum(tp.softplus_(tp.mul(scores, tp.input(margin_sign))));
    Var l2 = tp.add(tp.sum(tp.mul(re, re)), tp.sum(tp.mul(im, im)));
    loss = tp.add(loss, tp.scale(l2, config.l2_weight));

    if (report) report->epoch_loss.push_back(tp.value(loss).scalar_value());
    opt.step(params, tp.backward(loss));
  }

  ComplexEmbeddingTable table{params.get("kg.re").clone(), params.get("kg.im").clone()};
  table.validate();
  return table;
}

// ---------------------------------------------------------------------------
// Link-prediction evaluation (filtered ranking).
// ---------------------------------------------------------------------------

struct LinkPredictionMetrics {
  double mrr = 0.0;
  double hits1 = 0.0;
  double hits3 = 0.0;
  double hits10 = 0.0;
};

/// Filtered ranking of each held-out triple against role-compatible
/// corruptions of the head and of the tail. Ties count against the true
/// entity (pessimistic), and known positives are excluded from candidates.
inline LinkPredictionMetrics evaluate_link_prediction(const ComplexEmbeddingTable& table,
                                                      const TripleStore& store,
                                                      const std::vector<IndexTriple>& heldout) {
  if (heldout.empty()) throw ContractError("evaluate_link_prediction: empty held-out set");
  table.validate();
  if (table.concepts() != store.vocab.size())
    throw DimensionError("evaluate_link_prediction: table size does not match vocabulary");

  std::set<IndexTriple> known(store.triples.begin(), store.triples.end());
  known.insert(heldout.begin(), heldout.end());

  const int L = table.dim();
  auto row_re = [&](int i) { return table.real.data() + static_cast<std::int64_t>(i) * L; };
  auto row_im = [&](int i) { return table.imag.data() + static_cast<std::int64_t>(i) * L; };
  auto score = [&](int h, int r, int t) {
    return complex_trilinear_score(row_re(h), row_im(h), row_re(r), row_im(r), row_re(t), row_im(t), L);
  };

  const std::vector<int> objects = store.vocab.members(Role::object);
  const std::vector<int> tails = store.vocab.tail_members();

  LinkPredictionMetrics m;
  int queries = 0;
  auto rank_query = [&](const IndexTriple& trip, bool corrupt_tail) {
    const double true_score = score(trip.head, trip.relation, trip.tail);
    const auto& candidates = corrupt_tail ? tails : objects;
    int rank = 1;
    for (int c : candidates) {
      IndexTriple alt = trip;
      (corrupt_tail ? alt.tail : alt.head) = c;
      if (alt == trip || known.count(alt)) continue;
      if (score(alt.head, alt.relation, alt.tail) >= true_score) ++rank;
    }
    m.mrr += 1.0 / rank;
    if (rank <= 1) m.hits1 += 1.0;
    if (rank <= 3) m.hits3 += 1.0;
    if (rank <= 10) m.hits10 += 1.0;
    ++queries;
  };

  for (const auto& trip : heldout) {
    rank_query(trip, /*corrupt_tail=*/true);
    rank_query(trip, /*corrupt_tail=*/false);
  }
  m.mrr /= queries;
  m.hits1 /= queries;
  m.hits3 /= queries;
  m.hits10 /= queries;
  return m;
}

// ---------------------------------------------------------------------------
// Binary export: magic "JRKG", version, C, L_k, then row-major real and imag
// arrays as little-endian 64-bit floats.
// ---------------------------------------------------------------------------

inline void save_embedding_table(const ComplexEmbeddingTable& table, const std::string& path) {
  table.validate();
  BinaryWriter w;
  w.bytes("JRKG", 4);
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(table.concepts()));
  w.u32(static_cast<std::uint32_t>(table.dim()));
  w.f64s(table.real.data(), static_cast<std::size_t>(table.real.size()));
  w.f64s(table.imag.data(), static_cast<std::size_t>(table.imag.size()));
  atomic_write_file(path, w.buffer());
}

inline ComplexEmbeddingTable load_embedding_table(const std::string& path) {
  BinaryReader r(read_file_bytes(path));
  char magic[4];
  r.bytes(magic, 4);
  if (std::string(magic, 4) != "JRKG") throw IoError("not an embedding file: " + path);
  const std::uint32_t version = r.u32();
  if (version != 1) throw IoError("unsupported embedding file version");
  const int C = static_cast<int>(r.u32());
  const int L = static_cast<int>(r.u32());
  ComplexEmbeddingTable t{Array({C, L}), Array({C, L})};
  r.f64s(t.real.data(), static_cast<std::size_t>(t.real.size()));
  r.f64s(t.imag.data(), static_cast<std::size_t>(t.imag.size()));
  if (!r.at_end()) throw IoError("trailing bytes in embedding file: " + path);
  t.validate();
  return t;
}

}  // namespace kgcap
