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
// Scene ingestion (JSON-lines records plus split and lexicon files) and the
// deterministic synthetic dataset generator used for desk-scale runs.

#pragma once

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "kgcap/array.hpp"
#include "kgcap/error.hpp"
#include "kgcap/io.hpp"
#include "kgcap/triples.hpp"

namespace kgcap {

struct SceneRecord {
  std::string scene_id;
  Array regions;  // (M, L_v)
  Array global;   // (L_v')
  std::vector<std::vector<std::string>> captions;            // at least one
  std::vector<std::array<std::string, 3>> latent_triples;    // synthetic diagnostics, may be empty

  void validate() const {
    if (regions.rank() != 2 || regions.dim(0) < 1)
      throw ParseError("scene '" + scene_id + "': regions must be a non-empty matrix");
    if (captions.empty()) throw ParseError("scene '" + scene_id + "': no reference captions");
    for (const auto& c : captions)
      if (c.empty()) throw ParseError("scene '" + scene_id + "': empty caption");
  }
};

struct Dataset {
  std::vector<SceneRecord> scenes;
  std::vector<int> train, val, test;
  ConceptVocab lexicon;

  const SceneRecord& scene(int idx) const { return scenes.at(static_cast<std::size_t>(idx)); }
  int feature_dim() const { return scenes.empty() ? 0 : scenes[0].regions.dim(1); }
  int global_dim() const { return scenes.empty() ? 0 : scenes[0].global.dim(0); }
};

// ---------------------------------------------------------------------------
// File names inside a dataset directory.
// ---------------------------------------------------------------------------

namespace dataset_files {
inline constexpr const char* kScenes = "scenes.jsonl";
inline constexpr const char* kSplits = "splits.tsv";
inline constexpr const char* kTriples = "triples.tsv";
inline constexpr const char* kConcepts = "concepts.tsv";
inline constexpr const char* kLexicon = "lexicon.tsv";
}  // namespace dataset_files

// ---------------------------------------------------------------------------
// JSON-lines scene records.
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json scene_to_json(const SceneRecord& s) {
  nlohmann::ordered_json j;
  j["scene_id"] = s.scene_id;
  j["regions"] = nlohmann::ordered_json::array();
  for (int i = 0; i < s.regions.dim(0); ++i) {
    nlohmann::ordered_json row = nlohmann::ordered_json::array();
    for (int d = 0; d < s.regions.dim(1); ++d) row.push_back(s.regions.at(i, d));
    j["regions"].push_back(std::move(row));
  }
  j["global"] = nlohmann::ordered_json::array();
  for (int d = 0; d < s.global.dim(0); ++d) j["global"].push_back(s.global[d]);
  j["captions"] = s.captions;
  if (!s.latent_triples.empty()) {
    nlohmann::ordered_json lt = nlohmann::ordered_json::array();
    for (const auto& t : s.latent_triples) lt.push_back({t[0], t[1], t[2]});
    j["latent_graph"] = std::move(lt);
  }
  return j;
}

inline SceneRecord scene_from_json(const nlohmann::json& j) {
  SceneRecord s;
  s.scene_id = j.at("scene_id").get<std::string>();
  const auto& regions = j.at("regions");
  if (regions.empty()) throw ParseError("scene '" + s.scene_id + "': empty regions");
  const int m = static_cast<int>(regions.size());
  const int lv = static_cast<int>(regions[0].size());
  s.regions = Array({m, lv});
  for (int i = 0; i < m; ++i) {
    if (static_cast<int>(regions[i].size()) != lv)
      throw ParseError("scene '" + s.scene_id + "': ragged region rows");
    for (int d = 0; d < lv; ++d) s.regions.at(i, d) = regions[i][static_cast<std::size_t>(d)].get<double>();
  }
  const auto& global = j.at("global");
  s.global = Array({static_cast<int>(global.size())});
  for (std::size_t d = 0; d < global.size(); ++d) s.global[static_cast<std::int64_t>(d)] = global[d].get<double>();
  for (const auto& cap : j.at("captions")) {
    std::vector<std::string> tokens;
    for (const auto& t : cap) tokens.push_back(t.get<std::string>());
    s.captions.push_back(std::move(tokens));
  }
  if (j.contains("latent_graph"))
    for (const auto& t : j.at("latent_graph"))
      s.latent_triples.push_back({t[0].get<std::string>(), t[1].get<std::string>(), t[2].get<std::string>()});
  s.validate();
  return s;
}

inline void write_scenes(const std::vector<SceneRecord>& scenes, const std::string& path) {
  std::ostringstream os;
  for (const auto& s : scenes) os << scene_to_json(s).dump() << '\n';
  atomic_write_text(path, os.str());
}

// ---------------------------------------------------------------------------
// Ingestion.
// ---------------------------------------------------------------------------

inline Dataset ingest_scenes(const std::string& dir) {
  namespace fs = std::filesystem;
  Dataset ds;
  const std::string scene_path = (fs::path(dir) / dataset_files::kScenes).string();
  std::ifstream is(scene_path);
  if (!is) throw IoError("cannot open: " + scene_path);
  std::string line;
  int lineno = 0;
  std::map<std::string, int> by_id;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(scene_path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    SceneRecord s = scene_from_json(j);
    if (by_id.count(s.scene_id))
      throw ParseError(scene_path + ": duplicate scene id '" + s.scene_id + "'");
    by_id[s.scene_id] = static_cast<int>(ds.scenes.size());
    ds.scenes.push_back(std::move(s));
  }
  if (ds.scenes.empty()) throw ParseError(scene_path + ": no scenes");

  // Dimension consistency across the corpus.
  const int lv = ds.scenes[0].regions.dim(1);
  const int lg = ds.scenes[0].global.dim(0);
  for (const auto& s : ds.scenes) {
    if (s.regions.dim(1) != lv)
      throw ParseError("scene '" + s.scene_id + "': region feature dim " +
                       std::to_string(s.regions.dim(1)) + " differs from corpus dim " +
                       std::to_string(lv));
    if (s.global.dim(0) != lg)
      throw ParseError("scene '" + s.scene_id + "': global feature dim mismatch");
  }

  // Splits: every scene must be assigned exactly once.
  const std::string split_path = (fs::path(dir) / dataset_files::kSplits).string();
  std::ifstream ss(split_path);
  if (!ss) throw IoError("cannot open: " + split_path);
  std::set<std::string> assigned;
  lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw ParseError(split_path + ":" + std::to_string(lineno) + ": expected `scene-id<TAB>split`");
    const std::string id = line.substr(0, tab), split = line.substr(tab + 1);
    auto it = by_id.find(id);
    if (it == by_id.end())
      throw ParseError(split_path + ": split entry for unknown scene '" + id + "'");
    if (!assigned.insert(id).second)
      throw ParseError(split_path + ": scene '" + id + "' assigned twice");
    if (split == "train") ds.train.push_back(it->second);
    else if (split == "val") ds.val.push_back(it->second);
    else if (split == "test") ds.test.push_back(it->second);
    else throw ParseError(split_path + ": unknown split '" + split + "'");
  }
  for (const auto& s : ds.scenes)
    if (!assigned.count(s.scene_id))
      throw ParseError(split_path + ": missing split entry for scene '" + s.scene_id + "'");

  ds.lexicon = load_concepts((fs::path(dir) / dataset_files::kLexicon).string());
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic data.
// ---------------------------------------------------------------------------

struct SynthSpec {
  int scenes = 50;
  int objects = 12;
  int relations = 4;   // plus the attribute linker "is"
  int attributes = 6;
  int feature_dim = 32;       // L_v
  double noise = 0.05;
  int regions_per_vertex = 3;
  int max_triples_per_scene = 2;
  int references_per_scene = 1;
  std::uint64_t seed = 1;

  void validate() const {
    if (scenes < 1 || objects < 2 || relations < 1 || attributes < 1 || feature_dim < 1 ||
        regions_per_vertex < 1 || max_triples_per_scene < 1 || references_per_scene < 1)
      throw ConfigError("synth: spec values must be positive (objects >= 2)");
    if (noise < 0.0) throw ConfigError("synth: noise must be non-negative");
  }
};

namespace detail {

inline const std::vector<std::string>& object_pool() {
  static const std::vector<std::string> pool{"man",  "woman", "dog",  "cat",  "horse", "car",
                                             "bird", "boy",   "girl", "tree", "house", "ball",
                                             "bike", "sheep", "truck", "child"};
  return pool;
}
inline const std::vector<std::string>& relation_pool() {
  static const std::vector<std::string> pool{"riding", "holding", "chasing", "watching",
                                             "near",   "pulling", "following"};
  return pool;
}
inline const std::vector<std::string>& attribute_pool() {
  static const std::vector<std::string> pool{"red",   "blue",  "big",   "small",
                                             "brown", "white", "young", "old"};
  return pool;
}

}  // namespace detail

/// Generates the toy ontology, a consistent triple store, prototype-based
/// region features, latent scene graphs and templated captions. Everything
/// is a pure function of the spec (seed included).
inline void synth_dataset(const SynthSpec& spec, const std::string& out_dir) {
  spec.validate();
  namespace fs = std::filesystem;
  if (spec.objects > static_cast<int>(detail::object_pool().size()) ||
      spec.relations > static_cast<int>(detail::relation_pool().size()) ||
      spec.attributes > static_cast<int>(detail::attribute_pool().size()))
    throw ConfigError("synth: ontology size exceeds the built-in word pools");
  fs::create_directories(out_dir);
  Rng rng(spec.seed);

  // Ontology. "is" links objects to attributes and is always present.
  TripleStore kg;
  std::vector<int> objects, attributes;
  for (int i = 0; i < spec.objects; ++i)
    objects.push_back(kg.vocab.add(detail::object_pool()[static_cast<std::size_t>(i)], Role::object));
  std::vector<int> relations;
  for (int i = 0; i < spec.relations; ++i)
    relations.push_back(
        kg.vocab.add(detail::relation_pool()[static_cast<std::size_t>(i)], Role::relationship));
  const int is_rel = kg.vocab.add("is", Role::relationship);
  for (int i = 0; i < spec.attributes; ++i)
    attributes.push_back(
        kg.vocab.add(detail::attribute_pool()[static_cast<std::size_t>(i)], Role::attribute));

  // Consistent facts: each ordered object pair carries at most one relation,
  // and each (object, attribute) link goes through "is".
  for (int a = 0; a < spec.objects; ++a)
    for (int b = 0; b < spec.objects; ++b) {
      if (a == b) continue;
      if (rng.uniform() < 0.35) {
        const int r = relations[rng.uniform_int(relations.size())];
        kg.add_triple(objects[static_cast<std::size_t>(a)], r, objects[static_cast<std::size_t>(b)]);
      }
    }
  for (int a = 0; a < spec.objects; ++a)
    for (int t = 0; t < spec.attributes; ++t)
      if (rng.uniform() < 0.3)
        kg.add_triple(objects[static_cast<std::size_t>(a)], is_rel,
                      attributes[static_cast<std::size_t>(t)]);
  if (kg.triples.empty())  // tiny ontologies may draw no facts; force one
    kg.add_triple(objects[0], relations[0], objects[1]);

  save_triples(kg, (fs::path(out_dir) / dataset_files::kTriples).string(),
               (fs::path(out_dir) / dataset_files::kConcepts).string());
  // Lexicon mirrors the concept roles (caption tokens are concept names).
  std::error_code ec;
  fs::copy_file(fs::path(out_dir) / dataset_files::kConcepts,
                fs::path(out_dir) / dataset_files::kLexicon, fs::copy_options::overwrite_existing, ec);
  if (ec) throw IoError("synth: cannot write lexicon: " + ec.message());

  // Concept prototypes for objects and attributes (relation features arise
  // from pair means, so relations need no prototype).
  std::map<int, Array> prototype;
  for (int id : objects) prototype[id] = uniform_array({spec.feature_dim}, -1.0, 1.0, rng);
  for (int id : attributes) prototype[id] = uniform_array({spec.feature_dim}, -1.0, 1.0, rng);

  // Scenes.
  std::vector<SceneRecord> scenes;
  for (int s = 0; s < spec.scenes; ++s) {
    SceneRecord rec;
    rec.scene_id = "scene" + std::to_string(s);

    const int want = 1 + static_cast<int>(rng.uniform_int(
                         static_cast<std::uint64_t>(spec.max_triples_per_scene)));
    std::set<std::size_t> chosen;
    while (static_cast<int>(chosen.size()) < want && chosen.size() < kg.triples.size())
      chosen.insert(rng.uniform_int(kg.triples.size()));

    std::vector<IndexTriple> latent(chosen.size());
    std::size_t li = 0;
    for (std::size_t idx : chosen) latent[li++] = kg.triples[idx];

    // Region features: a few noisy samples per participating vertex.
    std::set<int> vertex_concepts;
    for (const auto& t : latent) {
      vertex_concepts.insert(t.head);
      vertex_concepts.insert(t.tail);
    }
    const int m = static_cast<int>(vertex_concepts.size()) * spec.regions_per_vertex;
    rec.regions = Array({m, spec.feature_dim});
    int row = 0;
    for (int concept_id : vertex_concepts)
      for (int i = 0; i < spec.regions_per_vertex; ++i, ++row)
        for (int d = 0; d < spec.feature_dim; ++d)
          rec.regions.at(row, d) = prototype.at(concept_id)[d] + spec.noise * rng.normal();
    // Shuffle rows so clustering sees no structure in the order.
    for (int i = m - 1; i > 0; --i) {
      const int j = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(i + 1)));
      for (int d = 0; d < spec.feature_dim; ++d) std::swap(rec.regions.at(i, d), rec.regions.at(j, d));
    }
    rec.global = Array({spec.feature_dim});
    for (int i = 0; i < m; ++i)
      for (int d = 0; d < spec.feature_dim; ++d) rec.global[d] += rec.regions.at(i, d) / m;

    // Templated captions: "a <head> <rel> <tail>" clauses joined by "and";
    // attribute clauses read "a <head> is <attr>".
    auto clause = [&](const IndexTriple& t) {
      return std::vector<std::string>{"a", kg.vocab.name(t.head), kg.vocab.name(t.relation),
                                      kg.vocab.name(t.tail)};
    };
    auto realize = [&](const std::vector<IndexTriple>& order) {
      std::vector<std::string> tokens;
      for (std::size_t i = 0; i < order.size(); ++i) {
        if (i) tokens.push_back("and");
        const auto c = clause(order[i]);
        tokens.insert(tokens.end(), c.begin(), c.end());
      }
      return tokens;
    };
    rec.captions.push_back(realize(latent));
    if (spec.references_per_scene > 1 && latent.size() > 1) {
      std::vector<IndexTriple> reversed(latent.rbegin(), latent.rend());
      rec.captions.push_back(realize(reversed));
    }
    for (const auto& t : latent)
      rec.latent_triples.push_back(
          {kg.vocab.name(t.head), kg.vocab.name(t.relation), kg.vocab.name(t.tail)});
    scenes.push_back(std::move(rec));
  }
  write_scenes(scenes, (fs::path(out_dir) / dataset_files::kScenes).string());

  // 80/10/10 split with at least one validation and one test scene.
  std::vector<int> order(scenes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  rng.shuffle(order);
  const int n = static_cast<int>(order.size());
  int n_val = std::max(n >= 3 ? 1 : 0, n / 10);
  int n_test = std::max(n >= 3 ? 1 : 0, n / 10);
  std::ostringstream os;
  for (int i = 0; i < n; ++i) {
    const char* split = i < n - n_val - n_test ? "train" : (i < n - n_test ? "val" : "test");
    os << scenes[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])].scene_id << '\t'
       << split << '\n';
  }
  atomic_write_text((fs::path(out_dir) / dataset_files::kSplits).string(), os.str());
}

}  // namespace kgcap
