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
// Relational reasoning and sentence generation: residual graph-convolutional
// encoding of the semantic graph, additive attention over triplet features,
// a two-cell (attention + language) recurrent decoder, and beam search.

#pragma once

#include <algorithm>
#include <limits>
#include <string>
#include <unordered_map>
#include <vector>

#include "kgcap/array.hpp"
#include "kgcap/error.hpp"
#include "kgcap/optim.hpp"
#include "kgcap/semantic_graph.hpp"
#include "kgcap/tape.hpp"

namespace kgcap {

// ---------------------------------------------------------------------------
// Vocabulary.
// ---------------------------------------------------------------------------

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  Vocabulary() {
    for (const char* w : {"<pad>", "<bos>", "<eos>", "<unk>"}) add(w);
  }

  static Vocabulary build(const std::vector<std::vector<std::string>>& captions, int min_freq = 1) {
    std::vector<std::string> order;
    std::unordered_map<std::string, int> freq;
    for (const auto& caption : captions)
      for (const auto& tok : caption) {
        if (++freq[tok] == 1) order.push_back(tok);
      }
    Vocabulary v;
    for (const auto& tok : order)
      if (freq[tok] >= min_freq) v.add(tok);
    return v;
  }

  int add(const std::string& w) {
    auto it = index_.find(w);
    if (it != index_.end()) return it->second;
    const int id = static_cast<int>(words_.size());
    index_[w] = id;
    words_.push_back(w);
    return id;
  }

  int id(const std::string& w) const {
    auto it = index_.find(w);
    return it == index_.end() ? kUnk : it->second;
  }
  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

struct Caption {
  std::vector<int> tokens;  // includes <bos> and, unless truncated, <eos>
  double logprob = 0.0;

  std::vector<int> body() const {
    std::vector<int> out;
    for (int t : tokens)
      if (t != Vocabulary::kBos && t != Vocabulary::kEos) out.push_back(t);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Residual GCN over the semantic graph.
// ---------------------------------------------------------------------------

using RelationAwareGraph = SemanticGraph;

/// Per-layer message maps for the head, relationship and tail roles; each
/// takes the concatenated [s_h; s_r; s_t] of a triplet to an L_s message.
struct GraphEncoderParams {
  struct Layer {
    Array head_w, head_b;  // (L_s, 3 L_s), (L_s)
    Array rel_w, rel_b;
    Array tail_w, tail_b;
  };
  std::vector<Layer> layers;
};

inline GraphEncoderParams init_graph_encoder(int semantic_dim, int layers, Rng& rng) {
  GraphEncoderParams p;
  for (int l = 0; l < layers; ++l) {
    GraphEncoderParams::Layer layer;
    layer.head_w = glorot_uniform(semantic_dim, 3 * semantic_dim, rng);
    layer.rel_w = glorot_uniform(semantic_dim, 3 * semantic_dim, rng);
    layer.tail_w = glorot_uniform(semantic_dim, 3 * semantic_dim, rng);
    layer.head_b = Array({semantic_dim});
    layer.rel_b = Array({semantic_dim});
    layer.tail_b = Array({semantic_dim});
    p.layers.push_back(std::move(layer));
  }
  return p;
}

namespace detail {

/// Message-averaging matrix: row v holds 1/deg(v) at the slots of v's
/// incident messages, with messages stacked [head | relation | tail].
inline Array aggregation_matrix(const std::vector<Triplet>& triplets, const ProposalLayout& lay) {
  const int g = static_cast<int>(triplets.size());
  Array s({lay.total(), 3 * g});
  std::vector<int> degree(static_cast<std::size_t>(lay.total()), 0);
  for (int i = 0; i < g; ++i) {
    ++degree[static_cast<std::size_t>(lay.head_row(triplets[static_cast<std::size_t>(i)]))];
    ++degree[static_cast<std::size_t>(lay.rel_row(triplets[static_cast<std::size_t>(i)]))];
    ++degree[static_cast<std::size_t>(lay.tail_row(triplets[static_cast<std::size_t>(i)]))];
  }
  for (int i = 0; i < g; ++i) {
    const Triplet& t = triplets[static_cast<std::size_t>(i)];
    s.at(lay.head_row(t), i) = 1.0 / degree[static_cast<std::size_t>(lay.head_row(t))];
    s.at(lay.rel_row(t), g + i) = 1.0 / degree[static_cast<std::size_t>(lay.rel_row(t))];
    s.at(lay.tail_row(t), 2 * g + i) = 1.0 / degree[static_cast<std::size_t>(lay.tail_row(t))];
  }
  return s;
}

}  // namespace detail

/// Residual message passing: per layer, each vertex adds ReLU(mean of its
/// incident role messages) to its previous feature. Vertices outside every
/// triplet pass through unchanged, and an empty graph is the identity.
inline RelationAwareGraph gcn_encode(const SemanticGraph& graph, const GraphEncoderParams& params) {
  RelationAwareGraph out = graph;
  if (graph.triplets.empty() || params.layers.empty()) return out;
  const ProposalLayout lay{graph.object_features.dim(0), graph.relation_features.dim(0),
                           graph.attribute_features.dim(0)};
  const int ls = graph.object_features.dim(1);
  const int g = graph.size();

  Array x({lay.total(), ls});
  for (int i = 0; i < lay.n_obj; ++i)
    for (int d = 0; d < ls; ++d) x.at(lay.object_row(i), d) = graph.object_features.at(i, d);
  for (int i = 0; i < lay.n_rel; ++i)
    for (int d = 0; d < ls; ++d) x.at(lay.relation_row(i), d) = graph.relation_features.at(i, d);
  for (int i = 0; i < lay.n_att; ++i)
    for (int d = 0; d < ls; ++d) x.at(lay.attribute_row(i), d) = graph.attribute_features.at(i, d);

  const Array agg = detail::aggregation_matrix(graph.triplets, lay);
  for (const auto& layer : params.layers) {
    Array cat({g, 3 * ls});
    for (int i = 0; i < g; ++i) {
      const Triplet& t = graph.triplets[static_cast<std::size_t>(i)];
      for (int d = 0; d < ls; ++d) {
        cat.at(i, d) = x.at(lay.head_row(t), d);
        cat.at(i, ls + d) = x.at(lay.rel_row(t), d);
        cat.at(i, 2 * ls + d) = x.at(lay.tail_row(t), d);
      }
    }
    Array messages({3 * g, ls});
    auto emit = [&](const Array& w, const Array& b, int base) {
      for (int i = 0; i < g; ++i)
        for (int d = 0; d < ls; ++d) {
          double acc = b[d];
          for (int j = 0; j < 3 * ls; ++j) acc += w.at(d, j) * cat.at(i, j);
          messages.at(base + i, d) = acc;
        }
    };
    emit(layer.head_w, layer.head_b, 0);
    emit(layer.rel_w, layer.rel_b, g);
    emit(layer.tail_w, layer.tail_b, 2 * g);

    Array update({lay.total(), ls});
    Tape::emap(update) = Tape::ecmap(agg) * Tape::ecmap(messages);
    for (std::int64_t i = 0; i < update.size(); ++i)
      x[i] += update[i] > 0.0 ? update[i] : 0.0;  // ReLU then residual add
  }

  // Fresh partitions: the shallow copies in `out` alias the input graph.
  Array obj({lay.n_obj, ls}), rel({lay.n_rel, ls}), att({lay.n_att, ls});
  for (int i = 0; i < lay.n_obj; ++i)
    for (int d = 0; d < ls; ++d) obj.at(i, d) = x.at(lay.object_row(i), d);
  for (int i = 0; i < lay.n_rel; ++i)
    for (int d = 0; d < ls; ++d) rel.at(i, d) = x.at(lay.relation_row(i), d);
  for (int i = 0; i < lay.n_att; ++i)
    for (int d = 0; d < ls; ++d) att.at(i, d) = x.at(lay.attribute_row(i), d);
  out.object_features = obj;
  out.relation_features = rel;
  out.attribute_features = att;
  return out;
}

/// Row g = [x_h; x_r; x_t] of triplet g's relation-aware features.
inline Array triplet_features(const RelationAwareGraph& graph) {
  const int g = graph.size();
  const int ls = graph.object_features.dim(1);
  Array feats({g, 3 * ls});
  const ProposalLayout lay{graph.object_features.dim(0), graph.relation_features.dim(0),
                           graph.attribute_features.dim(0)};
  auto fetch = [&](int row, int d) -> double {
    if (row < lay.n_obj) return graph.object_features.at(row, d);
    if (row < lay.n_obj + lay.n_rel) return graph.relation_features.at(row - lay.n_obj, d);
    return graph.attribute_features.at(row - lay.n_obj - lay.n_rel, d);
  };
  for (int i = 0; i < g; ++i) {
    const Triplet& t = graph.triplets[static_cast<std::size_t>(i)];
    for (int d = 0; d < ls; ++d) {
      feats.at(i, d) = fetch(lay.head_row(t), d);
      feats.at(i, ls + d) = fetch(lay.rel_row(t), d);
      feats.at(i, 2 * ls + d) = fetch(lay.tail_row(t), d);
    }
  }
  return feats;
}

/// Tape version: X is the stacked (N_total, L_s) vertex matrix; returns the
/// encoded matrix of identical shape. Message maps are held pre-transposed.
struct GraphEncoderVars {
  struct Layer {
    Var head_w_t, head_b, rel_w_t, rel_b, tail_w_t, tail_b;
  };
  std::vector<Layer> layers;

  static Layer make_layer(Tape& tp, Var head_w, Var head_b, Var rel_w, Var rel_b, Var tail_w,
                          Var tail_b) {
    return Layer{tp.transpose(head_w), head_b, tp.transpose(rel_w),
                 rel_b,                tp.transpose(tail_w), tail_b};
  }
};

inline Var gcn_encode_rows(Tape& tp, const GraphEncoderVars& enc, Var x,
                           const std::vector<Triplet>& triplets, const ProposalLayout& lay) {
  if (triplets.empty()) return x;
  std::vector<int> heads, rels, tails;
  for (const Triplet& t : triplets) {
    heads.push_back(lay.head_row(t));
    rels.push_back(lay.rel_row(t));
    tails.push_back(lay.tail_row(t));
  }
  Var agg = tp.input(detail::aggregation_matrix(triplets, lay));
  for (const auto& layer : enc.layers) {
    Var cat = tp.concat_cols(
        {tp.gather_rows(x, heads), tp.gather_rows(x, rels), tp.gather_rows(x, tails)});
    Var mh = tp.add_rowvec(tp.matmul(cat, layer.head_w_t), layer.head_b);
    Var mr = tp.add_rowvec(tp.matmul(cat, layer.rel_w_t), layer.rel_b);
    Var mt = tp.add_rowvec(tp.matmul(cat, layer.tail_w_t), layer.tail_b);
    Var update = tp.relu_(tp.matmul(agg, tp.concat_rows({mh, mr, mt})));
    x = tp.add(x, update);
  }
  return x;
}

/// Triplet feature rows gathered from the stacked encoded matrix.
inline Var triplet_feature_rows(Tape& tp, Var encoded, const std::vector<Triplet>& triplets,
                                const ProposalLayout& lay) {
  std::vector<int> heads, rels, tails;
  for (const Triplet& t : triplets) {
    heads.push_back(lay.head_row(t));
    rels.push_back(lay.rel_row(t));
    tails.push_back(lay.tail_row(t));
  }
  return tp.concat_cols(
      {tp.gather_rows(encoded, heads), tp.gather_rows(encoded, rels), tp.gather_rows(encoded, tails)});
}

// ---------------------------------------------------------------------------
// Decoder parameters.
// ---------------------------------------------------------------------------

struct DecoderConfig {
  int hidden = 512;
  int embedding = 512;
  int attention = 512;
  int max_len = 16;

  void validate() const {
    if (hidden < 1 || embedding < 1 || attention < 1 || max_len < 1)
      throw ConfigError("decoder config: sizes must be positive");
  }
};

/// Registers all decoder parameters. `context_dim` is 3 L_s (triplet
/// features) and `global_dim` the scene-level feature length.
inline void init_decoder_params(ParameterStore& params, const DecoderConfig& cfg, int vocab_size,
                                int global_dim, int context_dim, Rng& rng) {
  cfg.validate();
  const int h = cfg.hidden, e = cfg.embedding, a = cfg.attention;
  params.add("dec.embed", glorot_uniform(vocab_size, e, rng));
  params.add("dec.att.w", glorot_uniform(4 * h, h + global_dim + e + h, rng));
  params.add("dec.att.b", Array({4 * h}));
  params.add("dec.attn.wf", glorot_uniform(a, context_dim, rng));
  params.add("dec.attn.wh", glorot_uniform(a, h, rng));
  params.add("dec.attn.b", Array({a}));
  params.add("dec.attn.v", glorot_uniform(1, a, rng));
  params.add("dec.lang.w", glorot_uniform(4 * h, context_dim + h + h, rng));
  params.add("dec.lang.b", Array({4 * h}));
  params.add("dec.out.w", glorot_uniform(vocab_size, h, rng));
  params.add("dec.out.b", Array({vocab_size}));
  params.add("dec.nullctx", Array({context_dim}));
}

struct DecoderVars {
  Var embed, att_w, att_b, attn_wf, attn_wh, attn_b, attn_v, lang_w, lang_b, out_w, out_b, nullctx;
  // Transposed weights, built once per tape; the recurrent steps reuse them.
  Var att_w_t, attn_wf_t, attn_wh_t, lang_w_t, out_w_t;
  int hidden = 0;
};

inline DecoderVars register_decoder(Tape& tp, ParameterStore& params, int hidden) {
  DecoderVars d;
  d.embed = tp.param("dec.embed", params.get("dec.embed"));
  d.att_w = tp.param("dec.att.w", params.get("dec.att.w"));
  d.att_b = tp.param("dec.att.b", params.get("dec.att.b"));
  d.attn_wf = tp.param("dec.attn.wf", params.get("dec.attn.wf"));
  d.attn_wh = tp.param("dec.attn.wh", params.get("dec.attn.wh"));
  d.attn_b = tp.param("dec.attn.b", params.get("dec.attn.b"));
  d.attn_v = tp.param("dec.attn.v", params.get("dec.attn.v"));
  d.lang_w = tp.param("dec.lang.w", params.get("dec.lang.w"));
  d.lang_b = tp.param("dec.lang.b", params.get("dec.lang.b"));
  d.out_w = tp.param("dec.out.w", params.get("dec.out.w"));
  d.out_b = tp.param("dec.out.b", params.get("dec.out.b"));
  d.nullctx = tp.param("dec.nullctx", params.get("dec.nullctx"));
  d.att_w_t = tp.transpose(d.att_w);
  d.attn_wf_t = tp.transpose(d.attn_wf);
  d.attn_wh_t = tp.transpose(d.attn_wh);
  d.lang_w_t = tp.transpose(d.lang_w);
  d.out_w_t = tp.transpose(d.out_w);
  d.hidden = hidden;
  return d;
}

/// Per-scene decoding context living on a tape: encoded triplet features
/// (or the learned null context when the graph is empty) plus the hoisted
/// attention projection.
struct SceneContext {
  Var feats;       // (G_eff, 3 L_s)
  Var feat_proj;   // (G_eff, A): feats * wf^T, reused across time steps
  Var global_row;  // (1, L_g)
  int g_actual = 0;  // 0 means the null context stands in
};

inline SceneContext make_scene_context(Tape& tp, const DecoderVars& dec, Var triplet_feats,
                                       int g_actual, const Array& global) {
  SceneContext ctx;
  ctx.g_actual = g_actual;
  ctx.feats = g_actual > 0 ? triplet_feats : tp.reshape(dec.nullctx, {1, tp.value(dec.nullctx).dim(0)});
  ctx.feat_proj = tp.matmul(ctx.feats, dec.attn_wf_t);
  Array row({1, global.dim(0)});
  for (int d = 0; d < global.dim(0); ++d) row.at(0, d) = global[d];
  ctx.global_row = tp.input(row);
  return ctx;
}

// ---------------------------------------------------------------------------
// Batched decoding step (B scenes in lockstep).
// ---------------------------------------------------------------------------

struct BatchState {
  Var h_att, c_att, h_lang, c_lang;  // (B, H) each
};

inline BatchState zero_batch_state(Tape& tp, int batch, int hidden) {
  Var z = tp.input(Array({batch, hidden}));
  return BatchState{z, z, z, z};
}

namespace detail {

/// One LSTM cell over batched rows: gates = [x; h] W^T + b in i,f,g,o order.
/// `w_t` is the pre-transposed gate matrix.
inline std::pair<Var, Var> lstm_cell(Tape& tp, Var w_t, Var b, Var x, Var h, Var c, int hidden) {
  Var gates = tp.add_rowvec(tp.matmul(tp.concat_cols({x, h}), w_t), b);
  Var i = tp.sigmoid_(tp.slice_cols(gates, 0, hidden));
  Var f = tp.sigmoid_(tp.slice_cols(gates, hidden, hidden));
  Var g = tp.tanh_(tp.slice_cols(gates, 2 * hidden, hidden));
  Var o = tp.sigmoid_(tp.slice_cols(gates, 3 * hidden, hidden));
  Var c_new = tp.add(tp.mul(f, c), tp.mul(i, g));
  Var h_new = tp.mul(o, tp.tanh_(c_new));
  return {h_new, c_new};
}

}  // namespace detail

struct BatchStepResult {
  BatchState state;
  Var log_probs;            // (B, vocab)
  std::vector<Var> alphas;  // per example, simplex over its G_eff
};

/// The top-down two-cell step: the attention cell reads [h_lang; global;
/// embed(prev)], additive attention pools triplet features, and the language
/// cell reads [context; h_att] before the vocabulary projection.
inline BatchStepResult decode_step_batch(Tape& tp, const DecoderVars& dec,
                                         const std::vector<SceneContext>& scenes, const BatchState& st,
                                         const std::vector<int>& prev_tokens) {
  const int batch = static_cast<int>(scenes.size());
  if (static_cast<int>(prev_tokens.size()) != batch)
    throw ContractError("decode_step_batch: one previous token per scene");
  const int hidden = dec.hidden;

  Var emb = tp.gather_rows(dec.embed, prev_tokens);  // (B, E)
  std::vector<Var> globals;
  for (const auto& s : scenes) globals.push_back(s.global_row);
  Var global_rows = batch == 1 ? globals[0] : tp.concat_rows(globals);

  Var x_att = tp.concat_cols({st.h_lang, global_rows, emb});
  auto [h_att, c_att] = detail::lstm_cell(tp, dec.att_w_t, dec.att_b, x_att, st.h_att, st.c_att, hidden);

  // Additive attention per scene (ragged G), batched projections hoisted.
  Var h_proj = tp.matmul(h_att, dec.attn_wh_t);  // (B, A)
  std::vector<Var> contexts;
  std::vector<Var> alphas;
  Var v_vec = tp.reshape(dec.attn_v, {tp.value(dec.attn_v).dim(1)});
  for (int b = 0; b < batch; ++b) {
    Var pre = tp.add_rowvec(tp.add_rowvec(scenes[static_cast<std::size_t>(b)].feat_proj,
                                          tp.row(h_proj, b)),
                            dec.attn_b);
    Var scores = tp.matvec(tp.tanh_(pre), v_vec);  // (G_eff)
    Var alpha = tp.softmax_vec(scores);
    alphas.push_back(alpha);
    contexts.push_back(tp.vecmat(alpha, scenes[static_cast<std::size_t>(b)].feats));
  }
  Var ctx = tp.stack_rows(contexts);  // (B, 3 L_s)

  Var x_lang = tp.concat_cols({ctx, h_att});
  auto [h_lang, c_lang] =
      detail::lstm_cell(tp, dec.lang_w_t, dec.lang_b, x_lang, st.h_lang, st.c_lang, hidden);

  Var logits = tp.add_rowvec(tp.matmul(h_lang, dec.out_w_t), dec.out_b);
  BatchStepResult out;
  out.state = BatchState{h_att, c_att, h_lang, c_lang};
  out.log_probs = tp.log_softmax_rows(logits);
  out.alphas = std::move(alphas);
  return out;
}

// ---------------------------------------------------------------------------
// Teacher-forced loss.
// ---------------------------------------------------------------------------

struct DecodeExample {
  SceneContext scene;
  std::vector<int> reference_body;  // token ids without sentinels
};

struct TeacherForcedResult {
  Var nll;                   // scalar: sum over examples and steps
  std::vector<Array> alphas; // per example: (T, G_eff)
  int correct_tokens = 0;
  int total_tokens = 0;
};

/// Teacher forcing over B references in lockstep. Each example contributes
/// -log Pr(y_t | y_{1:t-1}, I) for t = 1..T with y_T = <eos>; padded steps
/// are masked out of the loss.
inline TeacherForcedResult caption_nll_batch(Tape& tp, const DecoderVars& dec,
                                             const std::vector<DecodeExample>& examples) {
  const int batch = static_cast<int>(examples.size());
  if (batch == 0) throw ContractError("caption_nll_batch: empty batch");
  int max_t = 0;
  std::vector<std::vector<int>> targets(static_cast<std::size_t>(batch));
  std::vector<SceneContext> scenes;
  for (int b = 0; b < batch; ++b) {
    const auto& ex = examples[static_cast<std::size_t>(b)];
    // An empty body still predicts <eos> at the first step.
    targets[static_cast<std::size_t>(b)] = ex.reference_body;
    targets[static_cast<std::size_t>(b)].push_back(Vocabulary::kEos);
    max_t = std::max(max_t, static_cast<int>(targets[static_cast<std::size_t>(b)].size()));
    scenes.push_back(ex.scene);
  }

  TeacherForcedResult result;
  std::vector<std::vector<Array>> alpha_rows(static_cast<std::size_t>(batch));
  BatchState st = zero_batch_state(tp, batch, dec.hidden);
  Var total = tp.constant(0.0);
  for (int t = 0; t < max_t; ++t) {
    std::vector<int> prev(static_cast<std::size_t>(batch));
    std::vector<int> want(static_cast<std::size_t>(batch));
    Array mask({batch});
    for (int b = 0; b < batch; ++b) {
      const auto& tgt = targets[static_cast<std::size_t>(b)];
      const bool live = t < static_cast<int>(tgt.size());
      prev[static_cast<std::size_t>(b)] =
          t == 0 ? Vocabulary::kBos
                 : (t - 1 < static_cast<int>(tgt.size()) ? tgt[static_cast<std::size_t>(t - 1)]
                                                         : Vocabulary::kPad);
      want[static_cast<std::size_t>(b)] = live ? tgt[static_cast<std::size_t>(t)] : Vocabulary::kPad;
      mask[b] = live ? 1.0 : 0.0;
    }
    BatchStepResult step = decode_step_batch(tp, dec, scenes, st, prev);
    st = step.state;
    Var picked = tp.pick(step.log_probs, want);
    total = tp.sub(total, tp.dot(picked, tp.input(mask)));

    const Array& logp = tp.value(step.log_probs);
    for (int b = 0; b < batch; ++b) {
      if (mask[b] == 0.0) continue;
      alpha_rows[static_cast<std::size_t>(b)].push_back(tp.value(step.alphas[static_cast<std::size_t>(b)]));
      int argmax = 0;
      for (int v = 1; v < logp.dim(1); ++v)
        if (logp.at(b, v) > logp.at(b, argmax)) argmax = v;
      ++result.total_tokens;
      if (argmax == want[static_cast<std::size_t>(b)]) ++result.correct_tokens;
    }
  }

  for (int b = 0; b < batch; ++b) {
    const auto& rows = alpha_rows[static_cast<std::size_t>(b)];
    const int g = rows.empty() ? 0 : rows[0].dim(0);
    Array a({static_cast<int>(rows.size()), g});
    for (std::size_t t = 0; t < rows.size(); ++t)
      for (int i = 0; i < g; ++i) a.at(static_cast<int>(t), i) = rows[t][i];
    result.alphas.push_back(a);
  }
  result.nll = total;
  return result;
}

// ---------------------------------------------------------------------------
// Single-scene contract surface.
// ---------------------------------------------------------------------------

struct DecoderState {
  Array h_att, c_att, h_lang, c_lang;
  int t = 0;
};

inline DecoderState zero_decoder_state(int hidden) {
  return DecoderState{Array({1, hidden}), Array({1, hidden}), Array({1, hidden}), Array({1, hidden}), 0};
}

struct StepResult {
  DecoderState state;
  Array attention;  // simplex over G_eff
  Array word_dist;  // simplex over the vocabulary
};

struct SceneDecodeInputs {
  Array triplet_feats;  // (G, 3 L_s); G may be 0
  Array global;         // (L_g)
};

/// One decoding step at the contract level: fresh tape, batch of one.
inline StepResult decode_step(ParameterStore& params, const DecoderConfig& cfg,
                              const SceneDecodeInputs& scene, const DecoderState& state,
                              int prev_token) {
  Tape tp;
  DecoderVars dec = register_decoder(tp, params, cfg.hidden);
  const int vocab = tp.value(dec.embed).dim(0);
  if (prev_token < 0 || prev_token >= vocab) prev_token = Vocabulary::kUnk;
  SceneContext ctx = make_scene_context(
      tp, dec,
      scene.triplet_feats.dim(0) > 0 ? tp.input(scene.triplet_feats) : Var{},
      scene.triplet_feats.dim(0), scene.global);
  BatchState st{tp.input(state.h_att), tp.input(state.c_att), tp.input(state.h_lang),
                tp.input(state.c_lang)};
  BatchStepResult step = decode_step_batch(tp, dec, {ctx}, st, {prev_token});

  StepResult out;
  out.state = DecoderState{tp.value(step.state.h_att).clone(), tp.value(step.state.c_att).clone(),
                           tp.value(step.state.h_lang).clone(), tp.value(step.state.c_lang).clone(),
                           state.t + 1};
  out.attention = tp.value(step.alphas[0]).clone();
  const Array& logp = tp.value(step.log_probs);
  out.word_dist = Array({logp.dim(1)});
  for (int v = 0; v < logp.dim(1); ++v) out.word_dist[v] = std::exp(logp.at(0, v));
  return out;
}

/// caption_nll for one scene: (L_c, alphas as (T, G_eff)).
inline std::pair<double, Array> caption_nll(ParameterStore& params, const DecoderConfig& cfg,
                                            const SceneDecodeInputs& scene,
                                            const std::vector<int>& reference_body) {
  if (reference_body.empty()) throw ContractError("caption_nll: empty reference");
  Tape tp;
  DecoderVars dec = register_decoder(tp, params, cfg.hidden);
  SceneContext ctx = make_scene_context(
      tp, dec, scene.triplet_feats.dim(0) > 0 ? tp.input(scene.triplet_feats) : Var{},
      scene.triplet_feats.dim(0), scene.global);
  DecodeExample ex{ctx, reference_body};
  TeacherForcedResult r = caption_nll_batch(tp, dec, {ex});
  return {tp.value(r.nll).scalar_value(), r.alphas[0]};
}

// ---------------------------------------------------------------------------
// Greedy decoding and beam search.
// ---------------------------------------------------------------------------

/// Stateful stepper over one scene; states are opaque handles so beam search
/// re-uses prefixes without recomputation.
class DecodeStepper {
 public:
  DecodeStepper(ParameterStore& params, const DecoderConfig& cfg, const SceneDecodeInputs& scene)
      : dec_(register_decoder(tp_, params, cfg.hidden)) {
    ctx_ = make_scene_context(
        tp_, dec_, scene.triplet_feats.dim(0) > 0 ? tp_.input(scene.triplet_feats) : Var{},
        scene.triplet_feats.dim(0), scene.global);
    states_.push_back(zero_batch_state(tp_, 1, dec_.hidden));
  }

  int initial_state() const { return 0; }

  /// Advances from a stored state; returns (new state handle, log-probs).
  std::pair<int, Array> step(int state_handle, int prev_token) {
    BatchStepResult r = decode_step_batch(tp_, dec_, {ctx_},
                                          states_[static_cast<std::size_t>(state_handle)], {prev_token});
    states_.push_back(r.state);
    const Array& lp = tp_.value(r.log_probs);
    Array row({lp.dim(1)});
    for (int v = 0; v < lp.dim(1); ++v) row[v] = lp.at(0, v);
    return {static_cast<int>(states_.size()) - 1, row};
  }

 private:
  Tape tp_;
  DecoderVars dec_;
  SceneContext ctx_;
  std::vector<BatchState> states_;
};

namespace detail {

/// Tokens the search may emit: everything except <pad> and <bos>.
inline bool emittable(int token) { return token != Vocabulary::kPad && token != Vocabulary::kBos; }

}  // namespace detail

/// Greedy decoding of many scenes in lockstep on one tape: the recurrent
/// weight matrices are read once per step for the whole set rather than per
/// scene. Produces the same captions as per-scene greedy decoding.
inline std::vector<Caption> greedy_decode_batch(ParameterStore& params, const DecoderConfig& cfg,
                                                const std::vector<SceneDecodeInputs>& scenes,
                                                int max_len) {
  if (max_len < 1) throw ConfigError("greedy_decode_batch: max_len must be positive");
  const int n = static_cast<int>(scenes.size());
  std::vector<Caption> out(static_cast<std::size_t>(n));
  if (n == 0) return out;
  Tape tp;
  DecoderVars dec = register_decoder(tp, params, cfg.hidden);
  std::vector<SceneContext> ctxs;
  for (const auto& s : scenes)
    ctxs.push_back(make_scene_context(tp, dec,
                                      s.triplet_feats.dim(0) > 0 ? tp.input(s.triplet_feats) : Var{},
                                      s.triplet_feats.dim(0), s.global));
  BatchState st = zero_batch_state(tp, n, dec.hidden);
  std::vector<int> prev(static_cast<std::size_t>(n), Vocabulary::kBos);
  std::vector<bool> done(static_cast<std::size_t>(n), false);
  for (auto& c : out) c.tokens.push_back(Vocabulary::kBos);
  for (int t = 0; t < max_len; ++t) {
    BatchStepResult step = decode_step_batch(tp, dec, ctxs, st, prev);
    st = step.state;
    const Array& logp = tp.value(step.log_probs);
    bool all_done = true;
    for (int b = 0; b < n; ++b) {
      if (done[static_cast<std::size_t>(b)]) {
        prev[static_cast<std::size_t>(b)] = Vocabulary::kPad;
        continue;
      }
      int best = -1;
      for (int v = 0; v < logp.dim(1); ++v) {
        if (!detail::emittable(v)) continue;
        if (best < 0 || logp.at(b, v) > logp.at(b, best)) best = v;
      }
      out[static_cast<std::size_t>(b)].logprob += logp.at(b, best);
      out[static_cast<std::size_t>(b)].tokens.push_back(best);
      if (best == Vocabulary::kEos)
        done[static_cast<std::size_t>(b)] = true;
      else
        all_done = false;
      prev[static_cast<std::size_t>(b)] = best;
    }
    if (all_done) break;
  }
  return out;
}

inline Caption greedy_decode(ParameterStore& params, const DecoderConfig& cfg,
                             const SceneDecodeInputs& scene, int max_len) {
  if (max_len < 1) throw ConfigError("greedy_decode: max_len must be positive");
  DecodeStepper stepper(params, cfg, scene);
  Caption cap;
  cap.tokens.push_back(Vocabulary::kBos);
  int state = stepper.initial_state();
  int prev = Vocabulary::kBos;
  for (int t = 0; t < max_len; ++t) {
    auto [next_state, logp] = stepper.step(state, prev);
    int best = -1;
    for (int v = 0; v < logp.dim(0); ++v) {
      if (!detail::emittable(v)) continue;
      if (best < 0 || logp[v] > logp[best]) best = v;
    }
    cap.logprob += logp[best];
    cap.tokens.push_back(best);
    if (best == Vocabulary::kEos) return cap;
    state = next_state;
    prev = best;
  }
  return cap;  // truncated at max_len without <eos>
}

/// Length-synchronous beam search over summed log-probabilities. Finished
/// hypotheses compete by score, ties broken by lexicographic token order.
/// All live hypotheses advance through one batched step per round, so the
/// recurrent weights are read once per time step.
inline Caption beam_search(ParameterStore& params, const DecoderConfig& cfg,
                           const SceneDecodeInputs& scene, int beam, int max_len) {
  if (beam < 1) throw ConfigError("beam_search: beam width must be positive");
  if (max_len < 1) throw ConfigError("beam_search: max_len must be positive");

  Tape tp;
  DecoderVars dec = register_decoder(tp, params, cfg.hidden);
  SceneContext ctx = make_scene_context(
      tp, dec, scene.triplet_feats.dim(0) > 0 ? tp.input(scene.triplet_feats) : Var{},
      scene.triplet_feats.dim(0), scene.global);

  struct Hyp {
    std::vector<int> tokens;  // body so far
    double score = 0.0;
    int prev = Vocabulary::kBos;
    int parent_row = 0;  // row in the previous round's batched state
  };
  auto better = [](const std::pair<double, std::vector<int>>& a,
                   const std::pair<double, std::vector<int>>& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  };

  std::vector<Hyp> live{Hyp{}};
  BatchState st = zero_batch_state(tp, 1, dec.hidden);
  std::vector<std::pair<double, std::vector<int>>> finished;
  for (int t = 0; t < max_len && !live.empty(); ++t) {
    std::vector<SceneContext> ctxs(live.size(), ctx);
    std::vector<int> prev;
    for (const Hyp& h : live) prev.push_back(h.prev);
    BatchStepResult step = decode_step_batch(tp, dec, ctxs, st, prev);
    const Array& logp = tp.value(step.log_probs);

    struct Expansion {
      double score;
      std::vector<int> tokens;
      int parent_row;
      int token;
    };
    std::vector<Expansion> expanded;
    for (std::size_t h = 0; h < live.size(); ++h) {
      // Top `beam` emittable tokens of this hypothesis.
      std::vector<int> order;
      for (int v = 0; v < logp.dim(1); ++v)
        if (detail::emittable(v)) order.push_back(v);
      const int row = static_cast<int>(h);
      std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (logp.at(row, a) != logp.at(row, b)) return logp.at(row, a) > logp.at(row, b);
        return a < b;
      });
      if (static_cast<int>(order.size()) > beam) order.resize(static_cast<std::size_t>(beam));
      for (int v : order) {
        Expansion e;
        e.score = live[h].score + logp.at(row, v);
        e.tokens = live[h].tokens;
        e.tokens.push_back(v);
        e.parent_row = row;
        e.token = v;
        expanded.push_back(std::move(e));
      }
    }
    std::sort(expanded.begin(), expanded.end(), [](const Expansion& a, const Expansion& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.tokens < b.tokens;
    });
    if (static_cast<int>(expanded.size()) > beam) expanded.resize(static_cast<std::size_t>(beam));

    std::vector<Hyp> next_live;
    std::vector<int> keep_rows;
    for (Expansion& e : expanded) {
      if (e.token == Vocabulary::kEos || t + 1 == max_len) {
        finished.emplace_back(e.score, std::move(e.tokens));
      } else {
        Hyp h;
        h.tokens = std::move(e.tokens);
        h.score = e.score;
        h.prev = e.token;
        h.parent_row = static_cast<int>(keep_rows.size());
        keep_rows.push_back(e.parent_row);
        next_live.push_back(std::move(h));
      }
    }
    live = std::move(next_live);
    if (!live.empty())
      st = BatchState{tp.gather_rows(step.state.h_att, keep_rows),
                      tp.gather_rows(step.state.c_att, keep_rows),
                      tp.gather_rows(step.state.h_lang, keep_rows),
                      tp.gather_rows(step.state.c_lang, keep_rows)};
  }
  std::sort(finished.begin(), finished.end(), better);

  Caption cap;
  cap.tokens.push_back(Vocabulary::kBos);
  cap.logprob = finished.front().first;
  for (int v : finished.front().second) cap.tokens.push_back(v);
  return cap;
}

}  // namespace kgcap
