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
#include <cstdio>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "kgcap/error.hpp"
#include "kgcap/io.hpp"
#include "kgcap/proposals.hpp"
#include "kgcap/semantic_graph.hpp"
#include "kgcap/triples.hpp"

namespace kgcap {

namespace detail {

/// Top concept name of a proposal row: argmax of its assignment weights.
inline std::string top_concept(const Array& assign, int row, const std::vector<int>& role_ids,
                               const ConceptVocab& vocab) {
  if (assign.dim(0) == 0 || assign.dim(1) == 0) return "?";
  int best = 0;
  for (int c = 1; c < assign.dim(1); ++c)
    if (assign.at(row, c) > assign.at(row, best)) best = c;
  return vocab.name(role_ids.at(static_cast<std::size_t>(best)));
}

}  // namespace detail

/// DOT rendering of a selected semantic graph: one node per participating
/// vertex (labeled with its top concept and role) and, per triplet, the two
/// edges head -> relation -> tail, each labeled with the relation concept
/// and the criterion score to four decimals. Output is byte-stable.
inline std::string render_graph_dot(const std::vector<Triplet>& triplets,
                                    const CandidateProposalSet& proposals, const ConceptVocab& vocab) {
  const std::vector<int> obj_ids = vocab.members(Role::object);
  const std::vector<int> rel_ids = vocab.members(Role::relationship);
  const std::vector<int> att_ids = vocab.members(Role::attribute);

  std::set<int> objs, rels, atts;
  for (const auto& t : triplets) {
    objs.insert(t.head);
    rels.insert(t.relation);
    (t.tail_is_attribute ? atts : objs).insert(t.tail);
  }

  std::ostringstream os;
  os << "digraph semantic_graph {\n";
  for (int i : objs)
    os << "  o" << i << " [label=\""
       << detail::top_concept(proposals.object_assign, i, obj_ids, vocab) << " (object)\"];\n";
  for (int i : rels)
    os << "  r" << i << " [label=\""
       << detail::top_concept(proposals.relation_assign, i, rel_ids, vocab)
       << " (relationship)\"];\n";
  for (int i : atts)
    os << "  a" << i << " [label=\""
       << detail::top_concept(proposals.attribute_assign, i, att_ids, vocab) << " (attribute)\"];\n";
  for (const auto& t : triplets) {
    char score[32];
    std::snprintf(score, sizeof score, "%.4f", t.score);
    const std::string rel_name = detail::top_concept(proposals.relation_assign, t.relation, rel_ids, vocab);
    const std::string tail = (t.tail_is_attribute ? "a" : "o") + std::to_string(t.tail);
    os << "  o" << t.head << " -> r" << t.relation << " [label=\"" << rel_name << ' ' << score
       << "\"];\n";
    os << "  r" << t.relation << " -> " << tail << " [label=\"" << rel_name << ' ' << score
       << "\"];\n";
  }
  os << "}\n";
  return os.str();
}

inline void export_graph(const std::vector<Triplet>& triplets, const CandidateProposalSet& proposals,
                         const ConceptVocab& vocab, const std::string& path) {
  atomic_write_text(path, render_graph_dot(triplets, proposals, vocab));
}

}  // namespace kgcap
