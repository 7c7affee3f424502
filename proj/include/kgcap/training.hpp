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
// Joint training: the captioning and semantic losses, the beta schedule,
// the alternating outer loop (graph generation / captioning epochs / cache
// update), convergence detection and checkpointing.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "kgcap/array.hpp"
#include "kgcap/dataset.hpp"
#include "kgcap/decoder.hpp"
#include "kgcap/error.hpp"
#include "kgcap/io.hpp"
#include "kgcap/kg_embedding.hpp"
#include "kgcap/metrics.hpp"
#include "kgcap/optim.hpp"
#include "kgcap/proposals.hpp"
#include "kgcap/semantic_graph.hpp"
#include "kgcap/tape.hpp"

namespace kgcap {

// ---------------------------------------------------------------------------
// Configuration.
// ---------------------------------------------------------------------------

struct TrainConfig {
  double lambda = 0.01;            // criterion L2 weight
  double gamma = 0.3;              // attention threshold in the semantic loss
  double beta_after_warmup = 0.1;
  int warmup_epochs = 5;
  double learning_rate = 5e-4;
  int max_epochs = 100;            // captioning epoch budget per alternation
  int patience = 10;               // epochs without validation improvement
  std::uint64_t seed = 1;
  int g_max = 16;
  int beam = 3;
  int alternations = 5;            // outer-loop cap
  int outer_patience = 2;
  int batch_size = 8;
  int semantic_dim = 256;          // L_s
  int phi_hidden = 512;
  int gcn_layers = 2;
  int criterion_dim = 16;          // complex dim of the criterion conversion
  int k_min = 5;
  int k_max = 10;
  int pair_limit = 64;
  int max_len = 16;
  DecoderConfig decoder;

  void validate() const {
    if (lambda < 0.0) throw ConfigError("train: lambda must be >= 0");
    if (gamma < 0.0 || gamma > 1.0) throw ConfigError("train: gamma must be in [0,1]");
    if (patience < 1) throw ConfigError("train: patience must be >= 1");
    if (warmup_epochs < 0 || max_epochs < 1 || alternations < 1 || batch_size < 1)
      throw ConfigError("train: loop bounds must be positive");
    if (learning_rate <= 0.0) throw ConfigError("train: learning rate must be positive");
    if (semantic_dim < 1 || phi_hidden < 1 || gcn_layers < 0 || criterion_dim < 1)
      throw ConfigError("train: model dims must be positive");
    decoder.validate();
  }
};

// ---------------------------------------------------------------------------
// Losses and schedule.
// ---------------------------------------------------------------------------

inline double beta_schedule(int epoch, const TrainConfig& config) {
  if (epoch < 0) throw ContractError("beta_schedule: negative epoch");
  return epoch < config.warmup_epochs ? 0.0 : config.beta_after_warmup;
}

inline double total_loss(double caption_loss, double semantic, double beta) {
  return caption_loss + beta * semantic;
}

/// L_s = sum_g sum_t (alpha_{g,t} - gamma) softplus(-score_g) + lambda ||W||^2.
/// The attention weights are treated as constants.
inline double semantic_loss(const Array& alphas, const std::vector<double>& scores, const Array& w,
                            double gamma, double lambda) {
  double reg = 0.0;
  for (std::int64_t i = 0; i < w.size(); ++i) reg += w[i] * w[i];
  double value = lambda * reg;
  if (scores.empty()) return value;
  if (alphas.rank() != 2 || alphas.dim(1) != static_cast<int>(scores.size()))
    throw DimensionError("semantic_loss: alphas and scores disagree on G");
  for (std::size_t g = 0; g < scores.size(); ++g) {
    double weight = 0.0;
    for (int t = 0; t < alphas.dim(0); ++t) weight += alphas.at(t, static_cast<int>(g)) - gamma;
    const double x = -scores[g];
    value += weight * (std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))));
  }
  return value;
}

/// Tape version; `scores` has one entry per selected triplet (may be an
/// invalid Var when the graph is empty).
inline Var semantic_loss_on_tape(Tape& tp, Var scores, int g, const Array& alphas, Var w,
                                 double gamma, double lambda) {
  Var reg = tp.scale(tp.sum(tp.mul(w, w)), lambda);
  if (g == 0) return reg;
  Array weights({g});
  for (int gi = 0; gi < g; ++gi)
    for (int t = 0; t < alphas.dim(0); ++t) weights[gi] += alphas.at(t, gi) - gamma;
  Var term = tp.dot(tp.input(weights), tp.softplus_(tp.neg(scores)));
  return tp.add(term, reg);
}

/// True when the best validation score lies at least `patience` epochs in
/// the past (plateaus count from the first occurrence of the maximum).
inline bool convergence_check(const std::vector<double>& history, int patience) {
  if (history.empty()) throw ContractError("convergence_check: empty history");
  std::size_t best = 0;
  for (std::size_t i = 1; i < history.size(); ++i)
    if (history[i] > history[best]) best = i;
  return history.size() - 1 - best >= static_cast<std::size_t>(patience);
}

// ---------------------------------------------------------------------------
// Checkpoints.
// ---------------------------------------------------------------------------

struct EpochReportRow {
  std::int64_t epoch = 0;      // global captioning epoch
  std::int64_t iteration = 0;  // alternation index
  double caption_loss = 0.0;
  double semantic = 0.0;
  double beta = 0.0;
  double val_bleu4 = 0.0;
  double val_cider = 0.0;
};

struct Checkpoint {
  std::map<std::string, double> config;  // numeric knobs and dims
  std::vector<std::string> vocab_words;
  ParameterStore params;
  std::map<std::string, Array> adam_m, adam_v;
  std::int64_t adam_steps = 0;
  std::int64_t global_epoch = 0;
  std::int64_t iteration = 0;
  std::vector<EpochReportRow> history;
  std::array<std::uint64_t, 4> rng_state{};
};

namespace detail {

inline void write_array_block(BinaryWriter& w, const std::string& name, const Array& a) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(a.rank()));
  for (int d = 0; d < a.rank(); ++d) w.u32(static_cast<std::uint32_t>(a.dim(d)));
  w.u64(static_cast<std::uint64_t>(a.size()));
  w.f64s(a.data(), static_cast<std::size_t>(a.size()));
}

inline std::pair<std::string, Array> read_array_block(BinaryReader& r) {
  const std::string name = r.str();
  const int rank = static_cast<int>(r.u32());
  std::vector<int> shape;
  for (int d = 0; d < rank; ++d) shape.push_back(static_cast<int>(r.u32()));
  const std::uint64_t n = r.u64();
  Array a(shape);
  if (static_cast<std::uint64_t>(a.size()) != n) throw IoError("checkpoint: block size mismatch");
  r.f64s(a.data(), static_cast<std::size_t>(n));
  return {name, std::move(a)};
}

}  // namespace detail

/// Format: magic `JRCK`, version, FNV-1a content hash, then length-prefixed
/// named blocks (little-endian doubles). Writes are atomic.
inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  BinaryWriter payload;
  payload.u32(static_cast<std::uint32_t>(ckpt.config.size()));
  for (const auto& [k, v] : ckpt.config) {
    payload.str(k);
    payload.f64(v);
  }
  payload.u32(static_cast<std::uint32_t>(ckpt.vocab_words.size()));
  for (const auto& w : ckpt.vocab_words) payload.str(w);
  payload.u32(static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& [name, a] : ckpt.params) detail::write_array_block(payload, name, a);
  payload.u32(static_cast<std::uint32_t>(ckpt.adam_m.size()));
  for (const auto& [name, a] : ckpt.adam_m) detail::write_array_block(payload, name, a);
  payload.u32(static_cast<std::uint32_t>(ckpt.adam_v.size()));
  for (const auto& [name, a] : ckpt.adam_v) detail::write_array_block(payload, name, a);
  payload.u64(static_cast<std::uint64_t>(ckpt.adam_steps));
  payload.u64(static_cast<std::uint64_t>(ckpt.global_epoch));
  payload.u64(static_cast<std::uint64_t>(ckpt.iteration));
  payload.u32(static_cast<std::uint32_t>(ckpt.history.size()));
  for (const auto& row : ckpt.history) {
    payload.u64(static_cast<std::uint64_t>(row.epoch));
    payload.u64(static_cast<std::uint64_t>(row.iteration));
    payload.f64(row.caption_loss);
    payload.f64(row.semantic);
    payload.f64(row.beta);
    payload.f64(row.val_bleu4);
    payload.f64(row.val_cider);
  }
  for (std::uint64_t s : ckpt.rng_state) payload.u64(s);

  BinaryWriter file;
  file.bytes("JRCK", 4);
  file.u32(1);
  file.u64(fnv1a(payload.buffer().data(), payload.buffer().size()));
  file.bytes(payload.buffer().data(), payload.buffer().size());
  atomic_write_file(path, file.buffer());
}

inline Checkpoint load_checkpoint(const std::string& path) {
  BinaryReader r(read_file_bytes(path));
  char magic[4];
  r.bytes(magic, 4);
  if (std::string(magic, 4) != "JRCK") throw IoError("not a checkpoint file: " + path);
  if (r.u32() != 1) throw IoError("unsupported checkpoint version");
  const std::uint64_t want_hash = r.u64();
  std::vector<char> payload(r.remaining());
  r.bytes(payload.data(), payload.size());
  if (fnv1a(payload.data(), payload.size()) != want_hash)
    throw IoError("checkpoint content hash mismatch: " + path);

  BinaryReader p(std::move(payload));
  Checkpoint ckpt;
  const std::uint32_t n_cfg = p.u32();
  for (std::uint32_t i = 0; i < n_cfg; ++i) {
    const std::string k = p.str();
    ckpt.config[k] = p.f64();
  }
  const std::uint32_t n_vocab = p.u32();
  for (std::uint32_t i = 0; i < n_vocab; ++i) ckpt.vocab_words.push_back(p.str());
  const std::uint32_t n_params = p.u32();
  for (std::uint32_t i = 0; i < n_params; ++i) {
    auto [name, a] = detail::read_array_block(p);
    ckpt.params.add(name, std::move(a));
  }
  const std::uint32_t n_m = p.u32();
  for (std::uint32_t i = 0; i < n_m; ++i) {
    auto [name, a] = detail::read_array_block(p);
    ckpt.adam_m.emplace(name, std::move(a));
  }
  const std::uint32_t n_v = p.u32();
  for (std::uint32_t i = 0; i < n_v; ++i) {
    auto [name, a] = detail::read_array_block(p);
    ckpt.adam_v.emplace(name, std::move(a));
  }
  ckpt.adam_steps = static_cast<std::int64_t>(p.u64());
  ckpt.global_epoch = static_cast<std::int64_t>(p.u64());
  ckpt.iteration = static_cast<std::int64_t>(p.u64());
  const std::uint32_t n_hist = p.u32();
  for (std::uint32_t i = 0; i < n_hist; ++i) {
    EpochReportRow row;
    row.epoch = static_cast<std::int64_t>(p.u64());
    row.iteration = static_cast<std::int64_t>(p.u64());
    row.caption_loss = p.f64();
    row.semantic = p.f64();
    row.beta = p.f64();
    row.val_bleu4 = p.f64();
    row.val_cider = p.f64();
    ckpt.history.push_back(row);
  }
  for (auto& s : ckpt.rng_state) s = p.u64();
  if (!p.at_end()) throw IoError("checkpoint: trailing bytes");
  return ckpt;
}

// ---------------------------------------------------------------------------
// Joint model assembly.
// ---------------------------------------------------------------------------

namespace paramkeys {
inline std::string gcn(int layer, const char* role, const char* leaf) {
  return "gcn." + std::to_string(layer) + "." + role + "." + leaf;
}
}  // namespace paramkeys

/// Initializes phi, the criterion conversion, the GCN and the decoder on
/// top of pre-trained mapper and embedding parameters.
inline void init_joint_params(ParameterStore& params, const TrainConfig& cfg, int lv, int lg, int lk,
                              int vocab_size, Rng& rng) {
  const int phi_in = lv + 2 * lk;
  params.add("phi.w1", glorot_uniform(cfg.phi_hidden, phi_in, rng));
  params.add("phi.b1", Array({cfg.phi_hidden}));
  params.add("phi.w2", glorot_uniform(cfg.semantic_dim, cfg.phi_hidden, rng));
  params.add("phi.b2", Array({cfg.semantic_dim}));
  params.add("criterion.w", glorot_uniform(2 * cfg.criterion_dim, cfg.semantic_dim, rng));
  for (int l = 0; l < cfg.gcn_layers; ++l)
    for (const char* role : {"head", "rel", "tail"}) {
      params.add(paramkeys::gcn(l, role, "w"),
                 glorot_uniform(cfg.semantic_dim, 3 * cfg.semantic_dim, rng));
      params.add(paramkeys::gcn(l, role, "b"), Array({cfg.semantic_dim}));
    }
  init_decoder_params(params, cfg.decoder, vocab_size, lg, 3 * cfg.semantic_dim, rng);
}

struct JointVars {
  SemanticMapperVars phi;
  Var criterion_w;
  GraphEncoderVars gcn;
  DecoderVars dec;
};

inline JointVars register_joint(Tape& tp, ParameterStore& params, const TrainConfig& cfg) {
  JointVars jv;
  jv.phi = make_semantic_mapper_vars(
      tp, tp.param("phi.w1", params.get("phi.w1")), tp.param("phi.b1", params.get("phi.b1")),
      tp.param("phi.w2", params.get("phi.w2")), tp.param("phi.b2", params.get("phi.b2")));
  jv.criterion_w = tp.param("criterion.w", params.get("criterion.w"));
  for (int l = 0; l < cfg.gcn_layers; ++l)
    jv.gcn.layers.push_back(GraphEncoderVars::make_layer(
        tp, tp.param(paramkeys::gcn(l, "head", "w"), params.get(paramkeys::gcn(l, "head", "w"))),
        tp.param(paramkeys::gcn(l, "head", "b"), params.get(paramkeys::gcn(l, "head", "b"))),
        tp.param(paramkeys::gcn(l, "rel", "w"), params.get(paramkeys::gcn(l, "rel", "w"))),
        tp.param(paramkeys::gcn(l, "rel", "b"), params.get(paramkeys::gcn(l, "rel", "b"))),
        tp.param(paramkeys::gcn(l, "tail", "w"), params.get(paramkeys::gcn(l, "tail", "w"))),
        tp.param(paramkeys::gcn(l, "tail", "b"), params.get(paramkeys::gcn(l, "tail", "b")))));
  jv.dec = register_decoder(tp, params, cfg.decoder.hidden);
  return jv;
}

// ---------------------------------------------------------------------------
// Per-scene preparation and on-tape builds.
// ---------------------------------------------------------------------------

struct ScenePrep {
  int scene_index = -1;
  CandidateProposalSet proposals;
  ProposalLayout layout;
  Array vk_rows;  // stacked [V | K]
  std::vector<Triplet> candidates;  // unscored
};

inline std::uint64_t scene_seed(std::uint64_t base, const std::string& scene_id) {
  return base ^ fnv1a(scene_id.data(), scene_id.size());
}

inline ScenePrep prepare_scene(const SceneRecord& scene, const RoleHeads& heads,
                               const ComplexEmbeddingTable& table, const ConceptVocab& vocab,
                               const TrainConfig& cfg, int index) {
  ScenePrep prep;
  prep.scene_index = index;
  RegionFeatureSet rfs{scene.scene_id, scene.regions, scene.global};
  ProposalConfig pc;
  pc.k_min = cfg.k_min;
  pc.k_max = cfg.k_max;
  pc.pair_limit = cfg.pair_limit;
  pc.seed = scene_seed(cfg.seed, scene.scene_id);
  prep.proposals = build_proposal_set(rfs, heads, table, vocab, pc);
  prep.layout = layout_of(prep.proposals);
  prep.vk_rows = stacked_vk(prep.proposals);
  CandidateList list = enumerate_candidates(prep.proposals);
  prep.candidates = std::move(list.triplets);
  return prep;
}

struct SceneBuild {
  Var semantic_rows;     // live phi features of all proposals
  SceneContext ctx;      // decoder context over encoded triplet features
  Var criterion_scores;  // per selected triplet (invalid when empty)
  int graph_size = 0;
};

inline SceneBuild build_scene_on_tape(Tape& tp, const JointVars& jv, const ScenePrep& prep,
                                      const std::vector<Triplet>& selection, const Array& global) {
  SceneBuild b;
  b.semantic_rows = semantic_map_rows(tp, jv.phi, tp.input(prep.vk_rows));
  b.graph_size = static_cast<int>(selection.size());
  Var encoded = gcn_encode_rows(tp, jv.gcn, b.semantic_rows, selection, prep.layout);
  Var feats{};
  if (b.graph_size > 0) {
    feats = triplet_feature_rows(tp, encoded, selection, prep.layout);
    std::vector<int> h_rows, r_rows, t_rows;
    for (const Triplet& t : selection) {
      h_rows.push_back(prep.layout.head_row(t));
      r_rows.push_back(prep.layout.rel_row(t));
      t_rows.push_back(prep.layout.tail_row(t));
    }
    b.criterion_scores = criterion_scores_on_tape(
        tp, jv.criterion_w, tp.gather_rows(b.semantic_rows, h_rows),
        tp.gather_rows(b.semantic_rows, r_rows), tp.gather_rows(b.semantic_rows, t_rows));
  }
  b.ctx = make_scene_context(tp, jv.dec, feats, b.graph_size, global);
  return b;
}

/// Forward-only inputs for greedy/beam decoding under the current
/// parameters and fixed graph selections; one tape serves all scenes.
inline std::vector<SceneDecodeInputs> inference_inputs_many(
    ParameterStore& params, const TrainConfig& cfg, const std::vector<const ScenePrep*>& preps,
    const std::vector<const std::vector<Triplet>*>& selections, const std::vector<const Array*>& globals) {
  Tape tp;
  JointVars jv = register_joint(tp, params, cfg);
  std::vector<SceneDecodeInputs> out;
  for (std::size_t i = 0; i < preps.size(); ++i) {
    SceneBuild b = build_scene_on_tape(tp, jv, *preps[i], *selections[i], *globals[i]);
    SceneDecodeInputs inputs;
    inputs.global = *globals[i];
    if (b.graph_size > 0)
      inputs.triplet_feats = tp.value(b.ctx.feats).clone();
    else
      inputs.triplet_feats = Array({0, 3 * cfg.semantic_dim});
    out.push_back(std::move(inputs));
  }
  return out;
}

inline SceneDecodeInputs inference_inputs(ParameterStore& params, const TrainConfig& cfg,
                                          const ScenePrep& prep, const std::vector<Triplet>& selection,
                                          const Array& global) {
  return inference_inputs_many(params, cfg, {&prep}, {&selection}, {&global})[0];
}

// ---------------------------------------------------------------------------
// Joint training (the alternating loop).
// ---------------------------------------------------------------------------

struct JointTrainResult {
  Checkpoint checkpoint;
  std::vector<EpochReportRow> history;
  std::vector<double> iteration_val_metric;  // one entry per alternation
  double final_train_token_accuracy = 0.0;
  double final_train_bleu4 = 0.0;
  std::vector<std::vector<Triplet>> final_selection;  // per scene (train+val order)
};

namespace detail {

struct ValScores {
  double bleu4 = 0.0;
  double cider = 0.0;
  bool cider_degenerate = false;
};

}  // namespace detail

/// Algorithm: initialize the semantic cache from the knowledge vectors,
/// then repeat {semantic graph generation from the cache -> captioning
/// epochs minimizing L_c + beta L_s -> cache refresh through phi} until the
/// per-iteration validation metric stops improving or the cap is reached.
inline JointTrainResult train_joint(const Dataset& data, const ComplexEmbeddingTable& table,
                                    ParameterStore& params /* mappers + kg merged in */,
                                    const TrainConfig& cfg, std::ostream* log = nullptr) {
  cfg.validate();
  if (data.train.empty()) throw ConfigError("train: empty training split");
  table.validate();

  Rng rng(cfg.seed);

  // Vocabulary from training captions only.
  std::vector<std::vector<std::string>> train_captions;
  for (int idx : data.train)
    for (const auto& c : data.scene(idx).captions) train_captions.push_back(c);
  Vocabulary vocab = Vocabulary::build(train_captions);

  init_joint_params(params, cfg, data.feature_dim(), data.global_dim(), table.dim(), vocab.size(), rng);

  // Scene preparation (proposals, candidates) for train and val.
  const RoleHeads heads = role_heads(params);
  std::vector<int> scene_indices = data.train;
  scene_indices.insert(scene_indices.end(), data.val.begin(), data.val.end());
  std::vector<ScenePrep> preps;
  for (int idx : scene_indices)
    preps.push_back(prepare_scene(data.scene(idx), heads, table, data.lexicon, cfg,
                                  static_cast<int>(preps.size())));
  const int n_train = static_cast<int>(data.train.size());

  // Cache initialization: H_n = K_n, padded/truncated to L_s.
  std::vector<Array> cache;
  for (const auto& prep : preps) cache.push_back(initial_cache_entry(prep.proposals, cfg.semantic_dim));

  // Training examples: one per (scene, reference).
  struct Example {
    int prep_index;
    std::vector<int> body;
  };
  std::vector<Example> examples;
  for (int i = 0; i < n_train; ++i)
    for (const auto& caption : data.scene(scene_indices[static_cast<std::size_t>(i)]).captions) {
      Example ex;
      ex.prep_index = i;
      for (const auto& tok : caption) ex.body.push_back(vocab.id(tok));
      examples.push_back(std::move(ex));
    }

  AdamOptimizer opt(cfg.learning_rate);
  JointTrainResult result;
  std::vector<std::vector<Triplet>> selection(preps.size());
  int global_epoch = 0;

  auto evaluate_val = [&](std::vector<TokenList>* out_candidates = nullptr) {
    detail::ValScores scores;
    if (data.val.empty()) return scores;
    std::vector<const ScenePrep*> val_preps;
    std::vector<const std::vector<Triplet>*> val_selections;
    std::vector<const Array*> val_globals;
    std::vector<std::vector<TokenList>> references;
    for (std::size_t vi = 0; vi < data.val.size(); ++vi) {
      const int pi = n_train + static_cast<int>(vi);
      val_preps.push_back(&preps[static_cast<std::size_t>(pi)]);
      val_selections.push_back(&selection[static_cast<std::size_t>(pi)]);
      val_globals.push_back(&data.scene(scene_indices[static_cast<std::size_t>(pi)]).global);
      references.push_back({});
      for (const auto& c : data.scene(scene_indices[static_cast<std::size_t>(pi)]).captions)
        references.back().push_back(c);
    }
    const auto inputs = inference_inputs_many(params, cfg, val_preps, val_selections, val_globals);
    const auto captions = greedy_decode_batch(params, cfg.decoder, inputs, cfg.max_len);
    std::vector<TokenList> candidates;
    for (const auto& cap : captions) {
      TokenList words;
      for (int tok : cap.body()) words.push_back(vocab.word(tok));
      candidates.push_back(std::move(words));
    }
    BleuAccumulator acc;
    for (std::size_t i = 0; i < candidates.size(); ++i) acc.add(candidates[i], references[i]);
    scores.bleu4 = acc.score();
    if (candidates.size() >= 2) {
      const CiderResult c = cider(candidates, references);
      scores.cider = c.corpus;
    } else {
      scores.cider_degenerate = true;
    }
    if (out_candidates) *out_candidates = candidates;
    return scores;
  };

  std::vector<double> outer_history;
  for (int iteration = 0; iteration < cfg.alternations; ++iteration) {
    // --- Semantic graph generation from the cached features. ---
    const CriterionParams crit{params.get("criterion.w")};
    for (std::size_t i = 0; i < preps.size(); ++i) {
      std::vector<Triplet> cands = preps[i].candidates;
      score_candidates(cands, cache[i], preps[i].layout, crit);
      selection[i] = select_triplets(std::move(cands), cfg.g_max);
    }

    // --- Visual captioning epochs. ---
    std::vector<double> val_history;
    double best_iteration_metric = 0.0;
    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch, ++global_epoch) {
      const double beta = beta_schedule(global_epoch, cfg);
      std::vector<int> order(examples.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
      rng.shuffle(order);

      double epoch_lc = 0.0, epoch_ls = 0.0;
      int epoch_correct = 0, epoch_tokens = 0;
      const bool timing = std::getenv("KGCAP_TIMING") != nullptr;
      auto now = [] { return std::chrono::steady_clock::now(); };
      std::chrono::duration<double> t_fwd{}, t_bwd{}, t_adam{}, t_val{};
      for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
        auto t0 = now();
        Tape tp;
        JointVars jv = register_joint(tp, params, cfg);
        std::vector<SceneBuild> builds;
        std::vector<DecodeExample> batch;
        for (std::size_t bi = start; bi < end; ++bi) {
          const Example& ex = examples[static_cast<std::size_t>(order[bi])];
          const auto& prep = preps[static_cast<std::size_t>(ex.prep_index)];
          SceneBuild b = build_scene_on_tape(
              tp, jv, prep, selection[static_cast<std::size_t>(ex.prep_index)],
              data.scene(scene_indices[static_cast<std::size_t>(ex.prep_index)]).global);
          batch.push_back(DecodeExample{b.ctx, ex.body});
          builds.push_back(std::move(b));
        }
        TeacherForcedResult tf = caption_nll_batch(tp, jv.dec, batch);
        epoch_correct += tf.correct_tokens;
        epoch_tokens += tf.total_tokens;

        Var loss = tf.nll;
        double batch_ls = 0.0;
        if (beta > 0.0) {
          Var ls_sum = tp.constant(0.0);
          for (std::size_t bi = 0; bi < builds.size(); ++bi) {
            Var ls = semantic_loss_on_tape(tp, builds[bi].criterion_scores, builds[bi].graph_size,
                                           tf.alphas[bi], jv.criterion_w, cfg.gamma, cfg.lambda);
            ls_sum = tp.add(ls_sum, ls);
          }
          batch_ls = tp.value(ls_sum).scalar_value();
          loss = tp.add(loss, tp.scale(ls_sum, beta));
        }
        const double denom = static_cast<double>(end - start);
        loss = tp.scale(loss, 1.0 / denom);
        epoch_lc += tp.value(tf.nll).scalar_value();
        epoch_ls += batch_ls;
        auto t1 = now();
        GradientMap grads = tp.backward(loss);
        auto t2 = now();
        opt.step(params, grads);
        auto t3 = now();
        t_fwd += t1 - t0;
        t_bwd += t2 - t1;
        t_adam += t3 - t2;
      }

      auto tv0 = now();
      const detail::ValScores val = evaluate_val();
      t_val += now() - tv0;
      if (timing)
        std::cerr << "timing fwd " << t_fwd.count() << " bwd " << t_bwd.count() << " adam "
                  << t_adam.count() << " val " << t_val.count() << "\n";
      const double metric = val.cider_degenerate ? val.bleu4 : val.cider;
      val_history.push_back(metric);
      best_iteration_metric = std::max(best_iteration_metric, metric);

      EpochReportRow row;
      row.epoch = global_epoch;
      row.iteration = iteration;
      row.caption_loss = epoch_lc / static_cast<double>(examples.size());
      row.semantic = epoch_ls / static_cast<double>(examples.size());
      row.beta = beta;
      row.val_bleu4 = val.bleu4;
      row.val_cider = val.cider;
      result.history.push_back(row);
      if (log)
        (*log) << "iter " << iteration << " epoch " << global_epoch << " L_c " << fmt6(row.caption_loss)
               << " L_s " << fmt6(row.semantic) << " beta " << fmt6(beta) << " val-B4 "
               << fmt6(val.bleu4) << " val-CIDEr " << fmt6(val.cider) << " acc "
               << fmt6(epoch_tokens ? static_cast<double>(epoch_correct) / epoch_tokens : 0.0)
               << "\n";
      if (convergence_check(val_history, cfg.patience)) break;
    }

    // --- Update: refresh the semantic cache through the current phi. ---
    const SemanticMapperParams phi{params.get("phi.w1"), params.get("phi.b1"), params.get("phi.w2"),
                                   params.get("phi.b2")};
    for (std::size_t i = 0; i < preps.size(); ++i) cache[i] = update_cache(preps[i].proposals, phi);

    outer_history.push_back(best_iteration_metric);
    result.iteration_val_metric = outer_history;
    if (convergence_check(outer_history, cfg.outer_patience)) break;
  }

  // Final training-set diagnostics: teacher-forced accuracy and greedy BLEU.
  {
    int correct = 0, total = 0;
    for (std::size_t start = 0; start < examples.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(examples.size(), start + static_cast<std::size_t>(cfg.batch_size));
      Tape tp;
      JointVars jv = register_joint(tp, params, cfg);
      std::vector<DecodeExample> batch;
      for (std::size_t bi = start; bi < end; ++bi) {
        const Example& ex = examples[bi];
        const auto& prep = preps[static_cast<std::size_t>(ex.prep_index)];
        SceneBuild b = build_scene_on_tape(
            tp, jv, prep, selection[static_cast<std::size_t>(ex.prep_index)],
            data.scene(scene_indices[static_cast<std::size_t>(ex.prep_index)]).global);
        batch.push_back(DecodeExample{b.ctx, ex.body});
      }
      TeacherForcedResult tf = caption_nll_batch(tp, jv.dec, batch);
      correct += tf.correct_tokens;
      total += tf.total_tokens;
    }
    result.final_train_token_accuracy = total ? static_cast<double>(correct) / total : 0.0;

    std::vector<const ScenePrep*> train_preps;
    std::vector<const std::vector<Triplet>*> train_selections;
    std::vector<const Array*> train_globals;
    for (int i = 0; i < n_train; ++i) {
      train_preps.push_back(&preps[static_cast<std::size_t>(i)]);
      train_selections.push_back(&selection[static_cast<std::size_t>(i)]);
      train_globals.push_back(&data.scene(scene_indices[static_cast<std::size_t>(i)]).global);
    }
    const auto inputs = inference_inputs_many(params, cfg, train_preps, train_selections, train_globals);
    const auto captions = greedy_decode_batch(params, cfg.decoder, inputs, cfg.max_len);
    BleuAccumulator acc;
    for (int i = 0; i < n_train; ++i) {
      TokenList words;
      for (int tok : captions[static_cast<std::size_t>(i)].body()) words.push_back(vocab.word(tok));
      std::vector<TokenList> refs;
      for (const auto& c : data.scene(scene_indices[static_cast<std::size_t>(i)]).captions)
        refs.push_back(c);
      acc.add(words, refs);
    }
    result.final_train_bleu4 = acc.score();
  }
  result.final_selection = selection;

  // Checkpoint assembly.
  Checkpoint& ckpt = result.checkpoint;
  ckpt.config["lambda"] = cfg.lambda;
  ckpt.config["gamma"] = cfg.gamma;
  ckpt.config["beta_after_warmup"] = cfg.beta_after_warmup;
  ckpt.config["warmup_epochs"] = cfg.warmup_epochs;
  ckpt.config["learning_rate"] = cfg.learning_rate;
  ckpt.config["patience"] = cfg.patience;
  ckpt.config["g_max"] = cfg.g_max;
  ckpt.config["beam"] = cfg.beam;
  ckpt.config["semantic_dim"] = cfg.semantic_dim;
  ckpt.config["phi_hidden"] = cfg.phi_hidden;
  ckpt.config["gcn_layers"] = cfg.gcn_layers;
  ckpt.config["criterion_dim"] = cfg.criterion_dim;
  ckpt.config["k_min"] = cfg.k_min;
  ckpt.config["k_max"] = cfg.k_max;
  ckpt.config["pair_limit"] = cfg.pair_limit;
  ckpt.config["max_len"] = cfg.max_len;
  ckpt.config["dec_hidden"] = cfg.decoder.hidden;
  ckpt.config["dec_embedding"] = cfg.decoder.embedding;
  ckpt.config["dec_attention"] = cfg.decoder.attention;
  ckpt.config["seed"] = static_cast<double>(cfg.seed);
  ckpt.config["feature_dim"] = data.feature_dim();
  ckpt.config["global_dim"] = data.global_dim();
  ckpt.config["kg_dim"] = table.dim();
  ckpt.vocab_words = vocab.words();
  for (const auto& [name, a] : params) ckpt.params.add(name, a.clone());
  ckpt.params.add("kg.table.re", table.real.clone());
  ckpt.params.add("kg.table.im", table.imag.clone());
  for (auto& [name, a] : opt.first_moments()) ckpt.adam_m.emplace(name, a.clone());
  for (auto& [name, a] : opt.second_moments()) ckpt.adam_v.emplace(name, a.clone());
  ckpt.adam_steps = opt.step_count();
  ckpt.global_epoch = global_epoch;
  ckpt.iteration = static_cast<std::int64_t>(outer_history.size());
  ckpt.history = result.history;
  ckpt.rng_state = rng.state();
  return result;
}

// ---------------------------------------------------------------------------
// Inference from a checkpoint.
// ---------------------------------------------------------------------------

/// Everything needed to caption scenes with a trained checkpoint.
struct InferenceModel {
  TrainConfig cfg;
  ParameterStore params;
  ComplexEmbeddingTable table;
  Vocabulary vocab;

  static InferenceModel from_checkpoint(const Checkpoint& ckpt) {
    InferenceModel m;
    auto get = [&](const char* key) {
      auto it = ckpt.config.find(key);
      if (it == ckpt.config.end()) throw IoError(std::string("checkpoint missing config key ") + key);
      return it->second;
    };
    m.cfg.lambda = get("lambda");
    m.cfg.gamma = get("gamma");
    m.cfg.beta_after_warmup = get("beta_after_warmup");
    m.cfg.warmup_epochs = static_cast<int>(get("warmup_epochs"));
    m.cfg.learning_rate = get("learning_rate");
    m.cfg.patience = static_cast<int>(get("patience"));
    m.cfg.g_max = static_cast<int>(get("g_max"));
    m.cfg.beam = static_cast<int>(get("beam"));
    m.cfg.semantic_dim = static_cast<int>(get("semantic_dim"));
    m.cfg.phi_hidden = static_cast<int>(get("phi_hidden"));
    m.cfg.gcn_layers = static_cast<int>(get("gcn_layers"));
    m.cfg.criterion_dim = static_cast<int>(get("criterion_dim"));
    m.cfg.k_min = static_cast<int>(get("k_min"));
    m.cfg.k_max = static_cast<int>(get("k_max"));
    m.cfg.pair_limit = static_cast<int>(get("pair_limit"));
    m.cfg.max_len = static_cast<int>(get("max_len"));
    m.cfg.decoder.hidden = static_cast<int>(get("dec_hidden"));
    m.cfg.decoder.embedding = static_cast<int>(get("dec_embedding"));
    m.cfg.decoder.attention = static_cast<int>(get("dec_attention"));
    m.cfg.seed = static_cast<std::uint64_t>(get("seed"));
    for (const auto& [name, a] : ckpt.params)
      if (name != "kg.table.re" && name != "kg.table.im") m.params.add(name, a.clone());
    m.table = ComplexEmbeddingTable{ckpt.params.get("kg.table.re").clone(),
                                    ckpt.params.get("kg.table.im").clone()};
    for (std::size_t i = 4; i < ckpt.vocab_words.size(); ++i) m.vocab.add(ckpt.vocab_words[i]);
    return m;
  }

  /// The full inference pipeline for one scene: proposals, semantic
  /// features through phi, graph selection, GCN encoding, beam decoding.
  Caption caption(const SceneRecord& scene, const ConceptVocab& lexicon, int beam, int max_len,
                  std::vector<Triplet>* out_selection = nullptr,
                  CandidateProposalSet* out_proposals = nullptr) {
    ScenePrep prep = prepare_scene(scene, role_heads(params), table, lexicon, cfg, 0);
    const SemanticMapperParams phi{params.get("phi.w1"), params.get("phi.b1"), params.get("phi.w2"),
                                   params.get("phi.b2")};
    const Array features = update_cache(prep.proposals, phi);
    const CriterionParams crit{params.get("criterion.w")};
    std::vector<Triplet> cands = prep.candidates;
    score_candidates(cands, features, prep.layout, crit);
    std::vector<Triplet> selected = select_triplets(std::move(cands), cfg.g_max);
    if (out_selection) *out_selection = selected;
    if (out_proposals) *out_proposals = prep.proposals;
    SceneDecodeInputs inputs = inference_inputs(params, cfg, prep, selected, scene.global);
    if (beam <= 1) return greedy_decode(params, cfg.decoder, inputs, max_len);
    return beam_search(params, cfg.decoder, inputs, beam, max_len);
  }
};

}  // namespace kgcap
