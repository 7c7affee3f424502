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
// Commonsense reasoning: map proposals into semantic space, score candidate
// triplets with the complex trilinear criterion, and select each scene's
// semantic graph by greedy suppression.

#pragma once

#include <algorithm>
#include <string>
#include <tuple>
#include <vector>

#include "kgcap/array.hpp"
#include "kgcap/error.hpp"
#include "kgcap/kg_embedding.hpp"
#include "kgcap/proposals.hpp"
#include "kgcap/tape.hpp"

namespace kgcap {

/// Two affine layers with tanh between: s = W2 tanh(W1 [v; k] + b1) + b2.
struct SemanticMapperParams {
  Array w1;  // (hidden, L_v + 2 L_k)
  Array b1;  // (hidden)
  Array w2;  // (L_s, hidden)
  Array b2;  // (L_s)
  int output_dim() const { return w2.dim(0); }
  int input_dim() const { return w1.dim(1); }
};

/// Conversion of L_s-dim semantic features to L_c-dim complex vectors,
/// stored as stacked real and imaginary blocks.
struct CriterionParams {
  Array w;  // (2 L_c, L_s)
  int complex_dim() const { return w.dim(0) / 2; }
  int semantic_dim() const { return w.dim(1); }
};

/// Candidate or selected triplet. Indices are role-local: head into the
/// object partition, relation into the relation partition, tail into the
/// object or attribute partition depending on the flag.
struct Triplet {
  int head = 0;
  int relation = 0;
  int tail = 0;
  bool tail_is_attribute = false;
  double score = 0.0;
};

struct SemanticGraph {
  Array object_features;     // (N_v, L_s)
  Array relation_features;   // (F_r, L_s)
  Array attribute_features;  // (N_att, L_s)
  std::vector<Triplet> triplets;

  int size() const { return static_cast<int>(triplets.size()); }
  bool empty() const { return triplets.empty(); }
};

// ---------------------------------------------------------------------------
// Semantic mapping.
// ---------------------------------------------------------------------------

inline Array semantic_map(const Array& visual, const Array& knowledge, const SemanticMapperParams& m) {
  if (visual.rank() != 1 || knowledge.rank() != 1 ||
      visual.dim(0) + knowledge.dim(0) != m.input_dim())
    throw ContractError("semantic_map: [v; k] length does not match mapper input");
  const int hidden = m.w1.dim(0), ls = m.output_dim();
  Array h({hidden});
  for (int i = 0; i < hidden; ++i) {
    double acc = m.b1[i];
    for (int d = 0; d < visual.dim(0); ++d) acc += m.w1.at(i, d) * visual[d];
    for (int d = 0; d < knowledge.dim(0); ++d) acc += m.w1.at(i, visual.dim(0) + d) * knowledge[d];
    h[i] = std::tanh(acc);
  }
  Array s({ls});
  for (int i = 0; i < ls; ++i) {
    double acc = m.b2[i];
    for (int j = 0; j < hidden; ++j) acc += m.w2.at(i, j) * h[j];
    s[i] = acc;
  }
  return s;
}

/// Batched tape version over rows of [V | K]; returns an (N, L_s) Var.
/// The transposed weights are built once per tape and reused across scenes.
struct SemanticMapperVars {
  Var w1, b1, w2, b2;
  Var w1_t, w2_t;
};

inline SemanticMapperVars make_semantic_mapper_vars(Tape& tp, Var w1, Var b1, Var w2, Var b2) {
  return SemanticMapperVars{w1, b1, w2, b2, tp.transpose(w1), tp.transpose(w2)};
}

inline Var semantic_map_rows(Tape& tp, const SemanticMapperVars& m, Var vk_rows) {
  Var hidden = tp.tanh_(tp.add_rowvec(tp.matmul(vk_rows, m.w1_t), m.b1));
  return tp.add_rowvec(tp.matmul(hidden, m.w2_t), m.b2);
}

// ---------------------------------------------------------------------------
// Criterion scoring.
// ---------------------------------------------------------------------------

inline Array to_complex(const Array& s, const CriterionParams& c) {
  if (s.rank() != 1 || s.dim(0) != c.semantic_dim())
    throw ContractError("criterion: semantic feature length mismatch");
  Array packed({2 * c.complex_dim()});
  for (int i = 0; i < 2 * c.complex_dim(); ++i) {
    double acc = 0.0;
    for (int d = 0; d < c.semantic_dim(); ++d) acc += c.w.at(i, d) * s[d];
    packed[i] = acc;
  }
  return packed;
}

/// Re(<W s_h, W s_r, conj(W s_t)>).
inline double criterion_score(const Array& s_head, const Array& s_relation, const Array& s_tail,
                              const CriterionParams& c) {
  return complex_trilinear_score(to_complex(s_head, c), to_complex(s_relation, c),
                                 to_complex(s_tail, c));
}

/// Tape version over row matrices of semantic features (G rows each).
inline Var criterion_scores_on_tape(Tape& tp, Var w, Var s_heads, Var s_relations, Var s_tails) {
  const int two_lc = tp.value(w).dim(0);
  const int lc = two_lc / 2;
  Var w_re = tp.transpose(tp.slice_rows(w, 0, lc));
  Var w_im = tp.transpose(tp.slice_rows(w, lc, lc));
  return trilinear_scores_on_tape(tp, tp.matmul(s_heads, w_re), tp.matmul(s_heads, w_im),
                                  tp.matmul(s_relations, w_re), tp.matmul(s_relations, w_im),
                                  tp.matmul(s_tails, w_re), tp.matmul(s_tails, w_im));
}

// ---------------------------------------------------------------------------
// Candidate enumeration and greedy selection.
// ---------------------------------------------------------------------------

struct CandidateList {
  std::vector<Triplet> triplets;
  bool degenerate = false;  // no relation proposals
};

/// All (head, relation, tail) combinations in deterministic h-major order:
/// object tails first (skipping tail == head), then attribute tails.
inline CandidateList enumerate_candidates(const CandidateProposalSet& proposals) {
  CandidateList out;
  const int n_obj = proposals.objects();
  const int n_rel = proposals.relations();
  const int n_att = proposals.attributes();
  if (n_obj < 1) throw ContractError("enumerate_candidates: no object proposals");
  if (n_rel < 1) {
    out.degenerate = true;
    return out;
  }
  out.triplets.reserve(static_cast<std::size_t>(n_obj) * n_rel * (n_obj - 1 + n_att));
  for (int h = 0; h < n_obj; ++h)
    for (int r = 0; r < n_rel; ++r) {
      for (int t = 0; t < n_obj; ++t)
        if (t != h) out.triplets.push_back({h, r, t, false, 0.0});
      for (int t = 0; t < n_att; ++t) out.triplets.push_back({h, r, t, true, 0.0});
    }
  return out;
}

namespace detail {

/// Canonical enumeration key, recomputed from indices so that tie-breaking
/// does not depend on input order.
inline std::tuple<int, int, int, int> canonical_key(const Triplet& t) {
  return {t.head, t.relation, t.tail_is_attribute ? 1 : 0, t.tail};
}

/// Number of shared head/tail vertices between two triplets. Relation
/// vertices do not count toward suppression: the suppression rule keeps
/// (A, r1, B) and (A, r1, C) while dropping (A, r2, B).
inline int entity_overlap(const Triplet& a, const Triplet& b) {
  int shared = 0;
  if (a.head == b.head) ++shared;
  if (!b.tail_is_attribute && a.head == b.tail) ++shared;
  if (a.tail_is_attribute) {
    if (b.tail_is_attribute && a.tail == b.tail) ++shared;
  } else {
    if (a.tail == b.head) ++shared;
    if (!b.tail_is_attribute && a.tail == b.tail) ++shared;
  }
  return shared;
}

}  // namespace detail

/// Greedy descending-score selection with suppression of candidates sharing
/// two or more entity vertices with anything already selected. Candidates
/// scoring below -1 are eliminated up front; at most g_max survive. Ties
/// break by the canonical enumeration order.
inline std::vector<Triplet> select_triplets(std::vector<Triplet> candidates, int g_max) {
  if (g_max < 0) throw ConfigError("select_triplets: g_max must be non-negative");
  candidates.erase(std::remove_if(candidates.begin(), candidates.end(),
                                  [](const Triplet& t) { return t.score < -1.0; }),
                   candidates.end());
  std::sort(candidates.begin(), candidates.end(), [](const Triplet& a, const Triplet& b) {
    if (a.score != b.score) return a.score > b.score;
    return detail::canonical_key(a) < detail::canonical_key(b);
  });
  std::vector<Triplet> selected;
  for (const Triplet& c : candidates) {
    if (static_cast<int>(selected.size()) >= g_max) break;
    bool suppressed = false;
    for (const Triplet& s : selected)
      if (detail::entity_overlap(c, s) >= 2) {
        suppressed = true;
        break;
      }
    if (!suppressed) selected.push_back(c);
  }
  return selected;
}

// ---------------------------------------------------------------------------
// Semantic cache (the H_n features of Algorithm-style alternation).
// ---------------------------------------------------------------------------

/// Row layout of a scene's stacked proposal features:
/// [objects | relations | attributes].
struct ProposalLayout {
  int n_obj = 0, n_rel = 0, n_att = 0;
  int total() const { return n_obj + n_rel + n_att; }
  int object_row(int i) const { return i; }
  int relation_row(int i) const { return n_obj + i; }
  int attribute_row(int i) const { return n_obj + n_rel + i; }
  int head_row(const Triplet& t) const { return object_row(t.head); }
  int rel_row(const Triplet& t) const { return relation_row(t.relation); }
  int tail_row(const Triplet& t) const {
    return t.tail_is_attribute ? attribute_row(t.tail) : object_row(t.tail);
  }
};

inline ProposalLayout layout_of(const CandidateProposalSet& p) {
  return ProposalLayout{p.objects(), p.relations(), p.attributes()};
}

/// Stacked [V | K] input rows for the semantic mapper.
inline Array stacked_vk(const CandidateProposalSet& p) {
  const ProposalLayout lay = layout_of(p);
  const int lv = p.object_visual.dim(1);
  const int lk2 = p.object_knowledge.dim(1);
  Array rows({lay.total(), lv + lk2});
  auto put = [&](const Array& visual, const Array& knowledge, int base) {
    for (int i = 0; i < visual.dim(0); ++i) {
      for (int d = 0; d < lv; ++d) rows.at(base + i, d) = visual.at(i, d);
      for (int d = 0; d < lk2; ++d) rows.at(base + i, lv + d) = knowledge.at(i, d);
    }
  };
  put(p.object_visual, p.object_knowledge, 0);
  if (p.has_relations) put(p.relation_visual, p.relation_knowledge, lay.n_obj);
  put(p.attribute_visual, p.attribute_knowledge, lay.n_obj + lay.n_rel);
  return rows;
}

/// Initial cache entry: the knowledge vectors K_n, zero-padded or truncated
/// to the semantic dimension.
inline Array initial_cache_entry(const CandidateProposalSet& p, int semantic_dim) {
  const ProposalLayout lay = layout_of(p);
  Array h({lay.total(), semantic_dim});
  auto put = [&](const Array& knowledge, int base) {
    for (int i = 0; i < knowledge.dim(0); ++i)
      for (int d = 0; d < std::min(semantic_dim, knowledge.dim(1)); ++d)
        h.at(base + i, d) = knowledge.at(i, d);
  };
  put(p.object_knowledge, 0);
  if (p.has_relations) put(p.relation_knowledge, lay.n_obj);
  put(p.attribute_knowledge, lay.n_obj + lay.n_rel);
  return h;
}

/// Refreshed cache entry: current semantic features of all proposals.
inline Array update_cache(const CandidateProposalSet& p, const SemanticMapperParams& mapper) {
  const Array vk = stacked_vk(p);
  const int n = vk.dim(0);
  Array h({n, mapper.output_dim()});
  for (int i = 0; i < n; ++i) {
    Array v({p.object_visual.dim(1)});
    Array k({p.object_knowledge.dim(1)});
    for (int d = 0; d < v.dim(0); ++d) v[d] = vk.at(i, d);
    for (int d = 0; d < k.dim(0); ++d) k[d] = vk.at(i, v.dim(0) + d);
    const Array s = semantic_map(v, k, mapper);
    for (int d = 0; d < s.dim(0); ++d) h.at(i, d) = s[d];
  }
  return h;
}

/// Score every candidate with the criterion applied to cached features.
/// Each cache row is converted to its complex form once; candidates then
/// reuse the converted rows.
inline void score_candidates(std::vector<Triplet>& candidates, const Array& cache_entry,
                             const ProposalLayout& lay, const CriterionParams& crit) {
  const int n = cache_entry.dim(0);
  const int lc = crit.complex_dim();
  if (cache_entry.dim(1) != crit.semantic_dim())
    throw DimensionError("score_candidates: cache width does not match the criterion");
  Array converted({n, 2 * lc});
  Tape::emap(converted) = Tape::ecmap(cache_entry) * Tape::ecmap(crit.w).transpose();
  auto row = [&](int r) { return converted.data() + static_cast<std::int64_t>(r) * 2 * lc; };
  for (Triplet& t : candidates) {
    const double* h = row(lay.head_row(t));
    const double* r = row(lay.rel_row(t));
    const double* s = row(lay.tail_row(t));
    t.score = complex_trilinear_score(h, h + lc, r, r + lc, s, s + lc, lc);
  }
}

/// Full per-scene graph generation from cached features.
inline std::vector<Triplet> generate_graph_selection(const CandidateProposalSet& proposals,
                                                     const Array& cache_entry,
                                                     const CriterionParams& crit, int g_max) {
  CandidateList cand = enumerate_candidates(proposals);
  if (cand.degenerate) return {};
  score_candidates(cand.triplets, cache_entry, layout_of(proposals), crit);
  return select_triplets(std::move(cand.triplets), g_max);
}

}  // namespace kgcap
