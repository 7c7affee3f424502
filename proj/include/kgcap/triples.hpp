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

#include <fstream>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "kgcap/error.hpp"

namespace kgcap {

enum class Role { object, relationship, attribute };

inline const char* role_name(Role r) {
  switch (r) {
    case Role::object: return "object";
    case Role::relationship: return "relationship";
    case Role::attribute: return "attribute";
  }
  return "?";
}

inline Role parse_role(const std::string& s) {
  if (s == "object") return Role::object;
  if (s == "relationship") return Role::relationship;
  if (s == "attribute") return Role::attribute;
  throw ParseError("unknown role: '" + s + "'");
}

/// Concept vocabulary shared by the knowledge graph and the mapping heads.
/// Indices are assigned in first-appearance order of the concept file.
class ConceptVocab {
 public:
  int add(const std::string& name, Role role) {
    if (index_.count(name)) throw ParseError("duplicate concept: '" + name + "'");
    const int id = static_cast<int>(names_.size());
    index_[name] = id;
    names_.push_back(name);
    roles_.push_back(role);
    return id;
  }

  int size() const { return static_cast<int>(names_.size()); }
  const std::string& name(int i) const { return names_.at(static_cast<std::size_t>(i)); }
  Role role(int i) const { return roles_.at(static_cast<std::size_t>(i)); }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  int id(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ParseError("unknown concept: '" + name + "'");
    return it->second;
  }

  /// Concept ids carrying the given role, in vocabulary order.
  std::vector<int> members(Role role) const {
    std::vector<int> out;
    for (int i = 0; i < size(); ++i)
      if (roles_[static_cast<std::size_t>(i)] == role) out.push_back(i);
    return out;
  }

  /// Tails may be objects or attributes.
  std::vector<int> tail_members() const {
    std::vector<int> out;
    for (int i = 0; i < size(); ++i)
      if (roles_[static_cast<std::size_t>(i)] != Role::relationship) out.push_back(i);
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Role> roles_;
  std::unordered_map<std::string, int> index_;
};

struct IndexTriple {
  int head, relation, tail;
  friend bool operator==(const IndexTriple&, const IndexTriple&) = default;
  friend auto operator<=>(const IndexTriple&, const IndexTriple&) = default;
};

struct TripleStore {
  ConceptVocab vocab;
  std::vector<IndexTriple> triples;
  int duplicate_count = 0;

  void add_triple(int h, int r, int t) {
    if (h < 0 || h >= vocab.size() || r < 0 || r >= vocab.size() || t < 0 || t >= vocab.size())
      throw ContractError("triple index out of range");
    if (vocab.role(h) != Role::object)
      throw ParseError("head '" + vocab.name(h) + "' has role " + role_name(vocab.role(h)));
    if (vocab.role(r) != Role::relationship)
      throw ParseError("relation '" + vocab.name(r) + "' has role " + role_name(vocab.role(r)));
    if (vocab.role(t) == Role::relationship)
      throw ParseError("tail '" + vocab.name(t) + "' has role relationship");
    const IndexTriple trip{h, r, t};
    for (const auto& existing : triples)
      if (existing == trip) {
        ++duplicate_count;
        return;
      }
    triples.push_back(trip);
  }
};

namespace detail {
inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    if (tab == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
}
}  // namespace detail

/// Concept-role file: one `concept<TAB>role` line per concept.
inline ConceptVocab load_concepts(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open concept file: " + path);
  ConceptVocab vocab;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto fields = detail::split_tabs(line);
    if (fields.size() != 2 || fields[0].empty())
      throw ParseError(path + ":" + std::to_string(lineno) + ": expected `concept<TAB>role`");
    try {
      vocab.add(fields[0], parse_role(fields[1]));
    } catch (const ParseError& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return vocab;
}

/// Triple file: one `head<TAB>relation<TAB>tail` line per fact. Duplicate
/// lines are dropped and counted.
inline TripleStore load_triples(const std::string& triple_path, const std::string& concept_path) {
  TripleStore store;
  store.vocab = load_concepts(concept_path);
  std::ifstream is(triple_path);
  if (!is) throw IoError("cannot open triple file: " + triple_path);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto fields = detail::split_tabs(line);
    if (fields.size() != 3 || fields[0].empty() || fields[1].empty() || fields[2].empty())
      throw ParseError(triple_path + ":" + std::to_string(lineno) +
                       ": expected `head<TAB>relation<TAB>tail`");
    try {
      store.add_triple(store.vocab.id(fields[0]), store.vocab.id(fields[1]), store.vocab.id(fields[2]));
    } catch (const ParseError& e) {
      throw ParseError(triple_path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return store;
}

inline void save_triples(const TripleStore& store, const std::string& triple_path,
                         const std::string& concept_path) {
  std::ofstream cs(concept_path);
  if (!cs) throw IoError("cannot write: " + concept_path);
  for (int i = 0; i < store.vocab.size(); ++i)
    cs << store.vocab.name(i) << '\t' << role_name(store.vocab.role(i)) << '\n';
  std::ofstream ts(triple_path);
  if (!ts) throw IoError("cannot write: " + triple_path);
  for (const auto& t : store.triples)
    ts << store.vocab.name(t.head) << '\t' << store.vocab.name(t.relation) << '\t'
       << store.vocab.name(t.tail) << '\n';
}

}  // namespace kgcap
