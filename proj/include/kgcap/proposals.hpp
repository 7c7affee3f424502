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
// Visual mapping (region clustering into candidate proposals) and knowledge
// mapping (multi-label attention networks that soft-assign proposals to
// knowledge-graph concepts and aggregate knowledge vectors).

#pragma once

#include <algorithm>
#include <cctype>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "kgcap/array.hpp"
#include "kgcap/error.hpp"
#include "kgcap/kg_embedding.hpp"
#include "kgcap/kmeans.hpp"
#include "kgcap/optim.hpp"
#include "kgcap/sparsemax.hpp"
#include "kgcap/tape.hpp"
#include "kgcap/triples.hpp"

namespace kgcap {

/// One scene's raw inputs: densely sampled region features plus a
/// scene-level feature vector.
struct RegionFeatureSet {
  std::string scene_id;
  Array regions;  // (M, L_v)
  Array global;   // (L_v')

  void validate() const {
    if (regions.rank() != 2 || regions.dim(0) < 1)
      throw ContractError("scene '" + scene_id + "': regions must be a non-empty M x L_v matrix");
    if (!regions.all_finite() || !global.all_finite())
      throw EvaluationError("scene '" + scene_id + "': non-finite features");
  }
};

/// Attention network for one role: A = sparsemax(W2 tanh(W1 V^T + b1)),
/// rows of A on the simplex over proposals.
struct AttentionMapperParams {
  Array w1;  // (hidden, L_v)
  Array b1;  // (hidden)
  Array w2;  // (K, hidden)
  int heads() const { return w2.dim(0); }
};

/// Linear map f onto the role's concept vocabulary.
struct ClassifierHeadParams {
  Array w;  // (C_role, L_v)
  Array b;  // (C_role)
  int concepts() const { return w.dim(0); }
};

struct LabelSet {
  Array objects;     // multi-hot over object-role concepts
  Array relations;   // multi-hot over relationship-role concepts
  Array attributes;  // multi-hot over attribute-role concepts
};

struct AttendResult {
  Array attention;   // A: (K, N), each row on the simplex
  Array aggregated;  // Z: (K, L_v), z_k = sum_i a_k^i v_i
};

// ---------------------------------------------------------------------------
// Forward operations (array level).
// ---------------------------------------------------------------------------

inline AttendResult attend_multi(const Array& proposals, const AttentionMapperParams& mapper) {
  if (proposals.rank() != 2 || proposals.dim(0) < 1)
    throw DimensionError("attend_multi: proposals must be N x L_v with N >= 1");
  const int n = proposals.dim(0), lv = proposals.dim(1);
  const int hidden = mapper.w1.dim(0), k = mapper.w2.dim(0);
  if (mapper.w1.dim(1) != lv || mapper.b1.dim(0) != hidden || mapper.w2.dim(1) != hidden)
    throw DimensionError("attend_multi: mapper shapes do not fit proposals");

  Array pre({hidden, n});
  Tape::emap(pre) = Tape::ecmap(mapper.w1) * Tape::ecmap(proposals).transpose();
  for (int h = 0; h < hidden; ++h)
    for (int i = 0; i < n; ++i) pre.at(h, i) = std::tanh(pre.at(h, i) + mapper.b1[h]);
  Array logits({k, n});
  Tape::emap(logits) = Tape::ecmap(mapper.w2) * Tape::ecmap(pre);

  AttendResult out;
  out.attention = sparsemax(logits);
  out.aggregated = Array({k, lv});
  Tape::emap(out.aggregated) = Tape::ecmap(out.attention) * Tape::ecmap(proposals);
  return out;
}

/// sigma(sum_k f(z_k)): sigmoid of the summed per-head logits.
inline Array predict_multilabel(const Array& aggregated, const ClassifierHeadParams& head) {
  if (aggregated.rank() != 2 || aggregated.dim(1) != head.w.dim(1))
    throw DimensionError("predict_multilabel: Z and head disagree on feature dim");
  const int k = aggregated.dim(0), c = head.concepts();
  Array logits({c});
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < c; ++j) {
      double dot = head.b[j];
      for (int d = 0; d < head.w.dim(1); ++d) dot += head.w.at(j, d) * aggregated.at(i, d);
      logits[j] += dot;
    }
  Array probs({c});
  for (int j = 0; j < c; ++j) probs[j] = 1.0 / (1.0 + std::exp(-logits[j]));
  return probs;
}

/// -sum_{i != j} KL(p(z_i) || p(z_j)) with p = softmax; always <= 0, and 0
/// exactly when all rows induce the same distribution.
inline double diversity_penalty(const Array& aggregated) {
  if (aggregated.rank() != 2) throw DimensionError("diversity_penalty: expected K x dim");
  const int k = aggregated.dim(0), d = aggregated.dim(1);
  if (k < 2) {
    std::cerr << "kgcap: diversity_penalty: fewer than two attention heads, no pairs\n";
    return 0.0;
  }
  std::vector<std::vector<double>> p(static_cast<std::size_t>(k), std::vector<double>(static_cast<std::size_t>(d)));
  for (int i = 0; i < k; ++i) {
    double mx = aggregated.at(i, 0);
    for (int c = 1; c < d; ++c) mx = std::max(mx, aggregated.at(i, c));
    double sum = 0.0;
    for (int c = 0; c < d; ++c) {
      p[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)] = std::exp(aggregated.at(i, c) - mx);
      sum += p[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)];
    }
    for (int c = 0; c < d; ++c) p[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)] /= sum;
  }
  double total = 0.0;
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) {
      if (i == j) continue;
      for (int c = 0; c < d; ++c) {
        const double pi = p[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)];
        total += pi * (std::log(pi) - std::log(p[static_cast<std::size_t>(j)][static_cast<std::size_t>(c)]));
      }
    }
  return -total;
}

/// Mean binary cross-entropy over classes plus the diversity penalty.
inline double mapping_loss(const Array& probabilities, const Array& labels, const Array& aggregated) {
  if (!probabilities.same_shape(labels)) throw DimensionError("mapping_loss: probs/labels mismatch");
  const double eps = 1e-12;
  double bce = 0.0;
  for (std::int64_t i = 0; i < labels.size(); ++i) {
    const double y = labels[i];
    if (y != 0.0 && y != 1.0) throw ContractError("mapping_loss: labels must be in {0,1}");
    const double pi = std::min(std::max(probabilities[i], eps), 1.0 - eps);
    bce -= y * std::log(pi) + (1.0 - y) * std::log(1.0 - pi);
  }
  bce /= static_cast<double>(labels.size());
  return bce + diversity_penalty(aggregated);
}

/// Inference-time concept distribution of one proposal: sparsemax(f(v)).
inline Array infer_concept_distribution(const Array& proposal, const ClassifierHeadParams& head) {
  if (proposal.rank() != 1 || proposal.dim(0) != head.w.dim(1))
    throw DimensionError("infer_concept_distribution: feature dim mismatch");
  Array logits({head.concepts()});
  for (int j = 0; j < head.concepts(); ++j) {
    double dot = head.b[j];
    for (int d = 0; d < proposal.dim(0); ++d) dot += head.w.at(j, d) * proposal[d];
    logits[j] = dot;
  }
  return sparsemax(logits);
}

/// k = E_role * p, packed as [real; imag] of length 2 L_k.
inline Array knowledge_vector(const Array& distribution, const ComplexEmbeddingTable& table,
                              const ConceptVocab& vocab, Role role) {
  const std::vector<int> ids = vocab.members(role);
  if (ids.empty()) throw ConfigError("knowledge_vector: no concepts with role " + std::string(role_name(role)));
  if (distribution.rank() != 1 || distribution.dim(0) != static_cast<int>(ids.size()))
    throw DimensionError("knowledge_vector: distribution does not match role vocabulary");
  const int lk = table.dim();
  Array out({2 * lk});
  for (std::size_t c = 0; c < ids.size(); ++c) {
    const double w = distribution[static_cast<std::int64_t>(c)];
    if (w == 0.0) continue;
    const double* re = table.real.data() + static_cast<std::int64_t>(ids[c]) * lk;
    const double* im = table.imag.data() + static_cast<std::int64_t>(ids[c]) * lk;
    for (int d = 0; d < lk; ++d) {
      out[d] += w * re[d];
      out[lk + d] += w * im[d];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Caption-token labels.
// ---------------------------------------------------------------------------

inline std::string lowercased(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

/// Ground-truth label sets: caption tokens intersected with each role
/// lexicon (lowercased exact match, set semantics). Unknown tokens are
/// ignored.
inline LabelSet labels_from_caption(const std::vector<std::string>& tokens, const ConceptVocab& lexicon) {
  const std::vector<int> obj = lexicon.members(Role::object);
  const std::vector<int> rel = lexicon.members(Role::relationship);
  const std::vector<int> att = lexicon.members(Role::attribute);
  auto local = [](const std::vector<int>& ids, int global) {
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (ids[i] == global) return static_cast<int>(i);
    return -1;
  };
  LabelSet set{Array({static_cast<int>(obj.size())}), Array({static_cast<int>(rel.size())}),
               Array({static_cast<int>(att.size())})};
  for (const auto& raw : tokens) {
    const std::string tok = lowercased(raw);
    if (!lexicon.contains(tok)) continue;
    const int id = lexicon.id(tok);
    switch (lexicon.role(id)) {
      case Role::object: set.objects[local(obj, id)] = 1.0; break;
      case Role::relationship: set.relations[local(rel, id)] = 1.0; break;
      case Role::attribute: set.attributes[local(att, id)] = 1.0; break;
    }
  }
  return set;
}

// ---------------------------------------------------------------------------
// Relationship pair features.
// ---------------------------------------------------------------------------

/// Elementwise-mean features of sampled unordered region pairs, clustered to
/// `centers` rows. Pairs beyond `pair_limit` are sampled without
/// replacement. The mean stands in for the union area of the two regions
/// (pixels are out of scope here).
inline Array union_relation_features(const Array& regions, int pair_limit, int centers,
                                     std::uint64_t seed) {
  if (regions.rank() != 2) throw DimensionError("union_relation_features: expected M x L_v");
  const int m = regions.dim(0), lv = regions.dim(1);
  if (m < 2) throw ContractError("union_relation_features: need at least two regions");
  if (pair_limit < 1 || centers < 1) throw ConfigError("union_relation_features: positive limits required");

  std::vector<std::pair<int, int>> pairs;
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j) pairs.emplace_back(i, j);
  Rng rng(seed);
  if (static_cast<int>(pairs.size()) > pair_limit) {
    rng.shuffle(pairs);
    pairs.resize(static_cast<std::size_t>(pair_limit));
    std::sort(pairs.begin(), pairs.end());
  }

  Array feats({static_cast<int>(pairs.size()), lv});
  for (std::size_t p = 0; p < pairs.size(); ++p)
    for (int d = 0; d < lv; ++d)
      feats.at(static_cast<int>(p), d) =
          0.5 * (regions.at(pairs[p].first, d) + regions.at(pairs[p].second, d));

  const int k = std::min(centers, static_cast<int>(pairs.size()));
  return cluster_regions(feats, k, rng.next_u64());
}

/// All pair-mean features without clustering (used by tests to count pairs).
inline Array enumerate_pair_features(const Array& regions) {
  const int m = regions.dim(0), lv = regions.dim(1);
  if (m < 2) throw ContractError("enumerate_pair_features: need at least two regions");
  Array feats({m * (m - 1) / 2, lv});
  int row = 0;
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j, ++row)
      for (int d = 0; d < lv; ++d) feats.at(row, d) = 0.5 * (regions.at(i, d) + regions.at(j, d));
  return feats;
}

// ---------------------------------------------------------------------------
// Candidate proposal sets.
// ---------------------------------------------------------------------------

/// Per-scene visual and knowledge vectors for the three proposal roles.
/// Attribute proposals share the object cluster centers; only the inferred
/// concept distributions (and hence knowledge rows) differ.
struct CandidateProposalSet {
  std::string scene_id;
  Array object_visual;       // (N_v, L_v)
  Array relation_visual;     // (F_r, L_v)
  Array attribute_visual;    // (N_v, L_v)
  Array object_knowledge;    // (N_v, 2 L_k)
  Array relation_knowledge;  // (F_r, 2 L_k)
  Array attribute_knowledge; // (N_v, 2 L_k)
  Array object_assign;       // (N_v, C_obj) sparsemax weights
  Array relation_assign;     // (F_r, C_rel)
  Array attribute_assign;    // (N_v, C_att)
  Array global;              // scene-level feature, copied through
  bool has_relations = true;

  int objects() const { return object_visual.dim(0); }
  int relations() const { return has_relations ? relation_visual.dim(0) : 0; }
  int attributes() const { return attribute_visual.dim(0); }
};

struct ProposalConfig {
  int k_min = 5;
  int k_max = 10;
  int pair_limit = 64;
  std::uint64_t seed = 1;

  void validate() const {
    if (k_min < 1 || k_max < k_min) throw ConfigError("proposal config: need 1 <= k_min <= k_max");
    if (pair_limit < 1) throw ConfigError("proposal config: pair_limit must be positive");
  }
};

struct RoleHeads {
  ClassifierHeadParams object, relationship, attribute;
};

inline CandidateProposalSet build_proposal_set(const RegionFeatureSet& scene, const RoleHeads& heads,
                                               const ComplexEmbeddingTable& table,
                                               const ConceptVocab& vocab, const ProposalConfig& config) {
  scene.validate();
  config.validate();
  const int m = scene.regions.dim(0);
  Rng rng(config.seed);
  const int k_sampled = config.k_min + static_cast<int>(rng.uniform_int(
                            static_cast<std::uint64_t>(config.k_max - config.k_min + 1)));
  const int k_obj = std::min(k_sampled, m);

  CandidateProposalSet out;
  out.scene_id = scene.scene_id;
  out.global = scene.global;
  out.object_visual = cluster_regions(scene.regions, k_obj, rng.next_u64());
  out.attribute_visual = out.object_visual;

  if (m >= 2) {
    out.relation_visual =
        union_relation_features(scene.regions, config.pair_limit, k_sampled, rng.next_u64());
    out.has_relations = true;
  } else {
    out.relation_visual = Array({0, scene.regions.dim(1)});
    out.has_relations = false;
  }

  auto infer_role = [&](const Array& visual, const ClassifierHeadParams& head, Role role, Array& assign,
                        Array& knowledge) {
    const int n = visual.dim(0);
    const int c = head.concepts();
    assign = Array({n, c});
    knowledge = Array({n, 2 * table.dim()});
    for (int i = 0; i < n; ++i) {
      Array v({visual.dim(1)});
      for (int d = 0; d < visual.dim(1); ++d) v[d] = visual.at(i, d);
      const Array p = infer_concept_distribution(v, head);
      const Array kv = knowledge_vector(p, table, vocab, role);
      for (int j = 0; j < c; ++j) assign.at(i, j) = p[j];
      for (int j = 0; j < 2 * table.dim(); ++j) knowledge.at(i, j) = kv[j];
    }
  };
  infer_role(out.object_visual, heads.object, Role::object, out.object_assign, out.object_knowledge);
  infer_role(out.attribute_visual, heads.attribute, Role::attribute, out.attribute_assign,
             out.attribute_knowledge);
  if (out.has_relations)
    infer_role(out.relation_visual, heads.relationship, Role::relationship, out.relation_assign,
               out.relation_knowledge);
  else {
    out.relation_assign = Array({0, heads.relationship.concepts()});
    out.relation_knowledge = Array({0, 2 * table.dim()});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mapper training.
// ---------------------------------------------------------------------------

struct MapperTrainConfig {
  int heads = 3;     // K attention operations
  int hidden = 64;
  int epochs = 200;
  double learning_rate = 0.01;
  std::uint64_t seed = 1;
  int k_min = 5;
  int k_max = 10;
  int pair_limit = 64;

  void validate() const {
    if (heads < 1 || hidden < 1 || epochs < 1 || learning_rate <= 0.0)
      throw ConfigError("map-train: config values must be positive");
    if (k_min < 1 || k_max < k_min) throw ConfigError("map-train: bad cluster range");
  }
};

struct MapperTrainScene {
  Array regions;  // (M, L_v)
  LabelSet labels;
};

struct MapperTrainReport {
  std::map<std::string, std::vector<double>> loss_curves;  // per role
  std::map<std::string, double> mean_average_precision;    // per role
};

inline std::string mapper_prefix(Role role) { return std::string("map.") + role_name(role); }

inline AttentionMapperParams attention_params(const ParameterStore& params, Role role) {
  const std::string p = mapper_prefix(role);
  return AttentionMapperParams{params.get(p + ".w1"), params.get(p + ".b1"), params.get(p + ".w2")};
}

inline ClassifierHeadParams head_params(const ParameterStore& params, Role role) {
  const std::string p = mapper_prefix(role);
  return ClassifierHeadParams{params.get(p + ".f.w"), params.get(p + ".f.b")};
}

inline RoleHeads role_heads(const ParameterStore& params) {
  return RoleHeads{head_params(params, Role::object), head_params(params, Role::relationship),
                   head_params(params, Role::attribute)};
}

namespace detail {

/// Multi-label loss for one scene on the tape: BCE from logits (numerically
/// equal to mapping_loss on the sigmoid probabilities) plus the diversity
/// penalty over the attended vectors.
struct MapperVars {
  Var w1, b1, w2, fw, fb;
};

inline Var mapping_loss_on_tape(Tape& tp, const MapperVars& mv, const Array& proposals,
                                const Array& labels) {
  Var v = tp.input(proposals);  // (N, L_v)
  Var pre = tp.tanh_(tp.add_colvec(tp.matmul(mv.w1, tp.transpose(v)), mv.b1));
  Var attention = tp.sparsemax_rows(tp.matmul(mv.w2, pre));  // (K, N)
  Var z = tp.matmul(attention, v);                           // (K, L_v)
  Var head_logits = tp.add_rowvec(tp.matmul(z, tp.transpose(mv.fw)), mv.fb);  // (K, C)
  Var logits = tp.sum_rows(head_logits);                                      // (C)
  Var y = tp.input(labels);
  Var bce = tp.mean(tp.sub(tp.softplus_(logits), tp.mul(y, logits)));

  // Diversity: -sum_{i != j} KL(softmax(z_i) || softmax(z_j)).
  const int k = tp.value(z).dim(0);
  Var penalty = tp.constant(0.0);
  if (k >= 2) {
    Var probs = tp.softmax_rows(z);
    Var logp = tp.log_clamped(probs);
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < k; ++j) {
        if (i == j) continue;
        Var kl = tp.dot(tp.row(probs, i), tp.sub(tp.row(logp, i), tp.row(logp, j)));
        penalty = tp.add(penalty, kl);
      }
    penalty = tp.neg(penalty);
  }
  return tp.add(bce, penalty);
}

}  // namespace detail

/// Trains the three role mappers (attention + classifier head) on
/// caption-derived labels. Cluster counts are resampled from [k_min, k_max]
/// per scene per epoch; k-means results are cached per (scene, k).
inline ParameterStore train_mappers(const std::vector<MapperTrainScene>& scenes,
                                    const ConceptVocab& vocab, const MapperTrainConfig& config,
                                    MapperTrainReport* report = nullptr) {
  config.validate();
  if (scenes.empty()) throw ContractError("map-train: no scenes");
  const int lv = scenes[0].regions.dim(1);
  for (const auto& s : scenes)
    if (s.regions.rank() != 2 || s.regions.dim(1) != lv)
      throw DimensionError("map-train: inconsistent region feature dims");

  Rng rng(config.seed);
  ParameterStore params;
  auto init_role = [&](Role role, int c_role) {
    const std::string p = mapper_prefix(role);
    params.add(p + ".w1", glorot_uniform(config.hidden, lv, rng));
    params.add(p + ".b1", Array({config.hidden}));
    params.add(p + ".w2", glorot_uniform(config.heads, config.hidden, rng));
    params.add(p + ".f.w", glorot_uniform(c_role, lv, rng));
    params.add(p + ".f.b", Array({c_role}));
  };
  init_role(Role::object, static_cast<int>(vocab.members(Role::object).size()));
  init_role(Role::relationship, static_cast<int>(vocab.members(Role::relationship).size()));
  init_role(Role::attribute, static_cast<int>(vocab.members(Role::attribute).size()));

  // k-means caches keyed by (scene index, k).
  std::map<std::pair<int, int>, Array> center_cache, pair_cache;
  auto object_centers = [&](int idx, int k) -> const Array& {
    auto key = std::make_pair(idx, k);
    auto it = center_cache.find(key);
    if (it == center_cache.end()) {
      const Array& regions = scenes[static_cast<std::size_t>(idx)].regions;
      const int kk = std::min(k, regions.dim(0));
      it = center_cache.emplace(key, cluster_regions(regions, kk, config.seed * 7919u + key.first * 131u +
                                                                     static_cast<std::uint64_t>(k)))
               .first;
    }
    return it->second;
  };
  auto relation_centers = [&](int idx, int k) -> const Array& {
    auto key = std::make_pair(idx, k);
    auto it = pair_cache.find(key);
    if (it == pair_cache.end()) {
      const Array& regions = scenes[static_cast<std::size_t>(idx)].regions;
      it = pair_cache.emplace(key, union_relation_features(regions, config.pair_limit, k,
                                                           config.seed * 104729u + key.first * 151u +
                                                               static_cast<std::uint64_t>(k)))
               .first;
    }
    return it->second;
  };

  AdamOptimizer opt(config.learning_rate);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double epoch_loss[3] = {0.0, 0.0, 0.0};
    int counts[3] = {0, 0, 0};
    for (int idx = 0; idx < static_cast<int>(scenes.size()); ++idx) {
      const auto& scene = scenes[static_cast<std::size_t>(idx)];
      const int k = config.k_min + static_cast<int>(rng.uniform_int(
                        static_cast<std::uint64_t>(config.k_max - config.k_min + 1)));

      Tape tp;
      std::vector<std::pair<Role, const Array*>> role_inputs;
      const Array& centers = object_centers(idx, k);
      role_inputs.emplace_back(Role::object, &centers);
      role_inputs.emplace_back(Role::attribute, &centers);
      const Array* rel_input = nullptr;
      if (scene.regions.dim(0) >= 2) rel_input = &relation_centers(idx, k);
      if (rel_input) role_inputs.emplace_back(Role::relationship, rel_input);

      Var total = tp.constant(0.0);
      for (const auto& [role, input] : role_inputs) {
        const std::string p = mapper_prefix(role);
        detail::MapperVars mv{tp.param(p + ".w1", params.get(p + ".w1")),
                              tp.param(p + ".b1", params.get(p + ".b1")),
                              tp.param(p + ".w2", params.get(p + ".w2")),
                              tp.param(p + ".f.w", params.get(p + ".f.w")),
                              tp.param(p + ".f.b", params.get(p + ".f.b"))};
        const Array& labels = role == Role::object     ? scene.labels.objects
                              : role == Role::attribute ? scene.labels.attributes
                                                        : scene.labels.relations;
        Var loss = detail::mapping_loss_on_tape(tp, mv, *input, labels);
        const int slot = role == Role::object ? 0 : role == Role::relationship ? 1 : 2;
        epoch_loss[slot] += tp.value(loss).scalar_value();
        ++counts[slot];
        total = tp.add(total, loss);
      }
      opt.step(params, tp.backward(total));
    }
    if (report)
      for (Role role : {Role::object, Role::relationship, Role::attribute}) {
        const int slot = role == Role::object ? 0 : role == Role::relationship ? 1 : 2;
        report->loss_curves[role_name(role)].push_back(
            counts[slot] ? epoch_loss[slot] / counts[slot] : 0.0);
      }
  }

  if (report) {
    // Mean average precision of the multi-label classifiers at a fixed
    // cluster count (model-selection metric for K).
    for (Role role : {Role::object, Role::relationship, Role::attribute}) {
      const AttentionMapperParams mapper = attention_params(params, role);
      const ClassifierHeadParams head = head_params(params, role);
      std::vector<std::vector<double>> probs;  // scene x class
      std::vector<const Array*> labels;
      for (int idx = 0; idx < static_cast<int>(scenes.size()); ++idx) {
        const auto& scene = scenes[static_cast<std::size_t>(idx)];
        const Array* input = nullptr;
        if (role == Role::relationship) {
          if (scene.regions.dim(0) < 2) continue;
          input = &relation_centers(idx, config.k_min);
        } else {
          input = &object_centers(idx, config.k_min);
        }
        const AttendResult att = attend_multi(*input, mapper);
        const Array p = predict_multilabel(att.aggregated, head);
        probs.emplace_back(p.data(), p.data() + p.size());
        labels.push_back(role == Role::object     ? &scene.labels.objects
                         : role == Role::attribute ? &scene.labels.attributes
                                                   : &scene.labels.relations);
      }
      const int classes = labels.empty() ? 0 : static_cast<int>(labels[0]->size());
      double ap_sum = 0.0;
      int ap_classes = 0;
      for (int c = 0; c < classes; ++c) {
        std::vector<std::pair<double, int>> ranked;  // (-prob, scene)
        int positives = 0;
        for (std::size_t s = 0; s < probs.size(); ++s) {
          ranked.emplace_back(-probs[s][static_cast<std::size_t>(c)], static_cast<int>(s));
          if ((*labels[s])[c] == 1.0) ++positives;
        }
        if (positives == 0) continue;
        std::sort(ranked.begin(), ranked.end());
        double hits = 0.0, ap = 0.0;
        for (std::size_t rank = 0; rank < ranked.size(); ++rank) {
          if ((*labels[static_cast<std::size_t>(ranked[rank].second)])[c] == 1.0) {
            hits += 1.0;
            ap += hits / static_cast<double>(rank + 1);
          }
        }
        ap_sum += ap / positives;
        ++ap_classes;
      }
      report->mean_average_precision[role_name(role)] = ap_classes ? ap_sum / ap_classes : 0.0;
    }
  }
  return params;
}

}  // namespace kgcap
