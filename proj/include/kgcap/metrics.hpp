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
// Caption evaluation: BLEU-4 (no smoothing by default, zero on any zero
// clipped precision) and CIDEr in its plain TF-IDF cosine form.

#pragma once

#include <cmath>
#include <cstdint>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "kgcap/error.hpp"

namespace kgcap {

using TokenList = std::vector<std::string>;

namespace detail {

inline std::map<std::string, int> ngram_counts(const TokenList& tokens, int n) {
  std::map<std::string, int> counts;
  if (static_cast<int>(tokens.size()) < n) return counts;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= tokens.size(); ++i) {
    std::string key = tokens[i];
    for (int j = 1; j < n; ++j) key += '\x1f' + tokens[i + static_cast<std::size_t>(j)];
    ++counts[key];
  }
  return counts;
}

}  // namespace detail

/// Aggregates clipped n-gram matches; the corpus score takes the ratio after
/// summation, so it equals the sentence score on a one-sentence corpus.
class BleuAccumulator {
 public:
  void add(const TokenList& candidate, const std::vector<TokenList>& references) {
    if (references.empty()) throw ContractError("bleu4: references must be non-empty");
    for (int n = 1; n <= 4; ++n) {
      const auto cand = detail::ngram_counts(candidate, n);
      std::map<std::string, int> best_ref;
      for (const auto& ref : references)
        for (const auto& [gram, count] : detail::ngram_counts(ref, n)) {
          int& slot = best_ref[gram];
          slot = std::max(slot, count);
        }
      for (const auto& [gram, count] : cand) {
        auto it = best_ref.find(gram);
        matches_[n - 1] += it == best_ref.end() ? 0 : std::min(count, it->second);
        totals_[n - 1] += count;
      }
    }
    candidate_len_ += static_cast<std::int64_t>(candidate.size());
    // Closest reference length; ties go to the shorter reference.
    std::int64_t best = -1;
    for (const auto& ref : references) {
      const auto len = static_cast<std::int64_t>(ref.size());
      if (best < 0 || std::llabs(len - static_cast<std::int64_t>(candidate.size())) <
                          std::llabs(best - static_cast<std::int64_t>(candidate.size())) ||
          (std::llabs(len - static_cast<std::int64_t>(candidate.size())) ==
               std::llabs(best - static_cast<std::int64_t>(candidate.size())) &&
           len < best))
        best = len;
    }
    reference_len_ += best;
  }

  double score(bool smooth = false) const {
    double log_precisions = 0.0;
    for (int n = 0; n < 4; ++n) {
      double matched = static_cast<double>(matches_[n]);
      double total = static_cast<double>(totals_[n]);
      if (smooth && n > 0) {
        matched += 1.0;
        total += 1.0;
      }
      if (matched <= 0.0 || total <= 0.0) return 0.0;
      log_precisions += std::log(matched / total);
    }
    double bp = 1.0;
    if (candidate_len_ == 0) return 0.0;
    if (candidate_len_ < reference_len_)
      bp = std::exp(1.0 - static_cast<double>(reference_len_) / static_cast<double>(candidate_len_));
    return bp * std::exp(log_precisions / 4.0);
  }

 private:
  std::int64_t matches_[4] = {0, 0, 0, 0};
  std::int64_t totals_[4] = {0, 0, 0, 0};
  std::int64_t candidate_len_ = 0;
  std::int64_t reference_len_ = 0;
};

/// Sentence-level BLEU-4.
inline double bleu4(const TokenList& candidate, const std::vector<TokenList>& references,
                    bool smooth = false) {
  BleuAccumulator acc;
  acc.add(candidate, references);
  return acc.score(smooth);
}

// ---------------------------------------------------------------------------
// CIDEr.
// ---------------------------------------------------------------------------

struct CiderResult {
  double corpus = 0.0;
  std::vector<double> per_scene;
  bool degenerate = false;  // single-scene corpus: IDF carries no signal
};

/// Plain CIDEr: mean over n = 1..4 of the average cosine similarity between
/// TF-IDF n-gram vectors of the candidate and each reference, scaled by 10.
/// IDF is computed over the reference corpus per scene.
inline CiderResult cider(const std::vector<TokenList>& candidates,
                         const std::vector<std::vector<TokenList>>& references) {
  if (candidates.size() != references.size())
    throw ContractError("cider: one candidate per scene required");
  const int scenes = static_cast<int>(candidates.size());
  if (scenes == 0) throw ContractError("cider: empty corpus");
  CiderResult result;
  if (scenes < 2) {
    std::cerr << "kgcap: cider: single-scene corpus, IDF degenerate\n";
    result.degenerate = true;
  }
  for (const auto& refs : references)
    if (refs.empty()) throw ContractError("cider: every scene needs at least one reference");

  for (int n = 1; n <= 4; ++n) {
    // Document frequency over scenes (a scene counts once per gram).
    std::map<std::string, int> df;
    for (const auto& refs : references) {
      std::map<std::string, int> seen;
      for (const auto& ref : refs)
        for (const auto& [gram, cnt] : detail::ngram_counts(ref, n)) seen[gram] = 1;
      for (const auto& [gram, one] : seen) df[gram] += 1;
    }
    auto idf = [&](const std::string& gram) {
      auto it = df.find(gram);
      const int d = it == df.end() ? 1 : std::max(1, it->second);
      return std::log(static_cast<double>(scenes) / d);
    };
    auto tfidf = [&](const TokenList& tokens) {
      std::map<std::string, double> vec;
      for (const auto& [gram, cnt] : detail::ngram_counts(tokens, n)) vec[gram] = cnt * idf(gram);
      return vec;
    };
    auto cosine = [](const std::map<std::string, double>& a, const std::map<std::string, double>& b) {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (const auto& [g, v] : a) {
        na += v * v;
        auto it = b.find(g);
        if (it != b.end()) dot += v * it->second;
      }
      for (const auto& [g, v] : b) nb += v * v;
      if (na <= 0.0 || nb <= 0.0) return 0.0;
      return dot / (std::sqrt(na) * std::sqrt(nb));
    };

    for (int s = 0; s < scenes; ++s) {
      const auto cand_vec = tfidf(candidates[static_cast<std::size_t>(s)]);
      double sim = 0.0;
      for (const auto& ref : references[static_cast<std::size_t>(s)])
        sim += cosine(cand_vec, tfidf(ref));
      sim /= static_cast<double>(references[static_cast<std::size_t>(s)].size());
      if (n == 1) result.per_scene.push_back(sim);
      else result.per_scene[static_cast<std::size_t>(s)] += sim;
    }
  }
  for (double& v : result.per_scene) {
    v = v / 4.0 * 10.0;
    result.corpus += v;
  }
  result.corpus /= scenes;
  return result;
}

/// Per-scene and corpus metrics of one evaluation run.
struct MetricsReport {
  std::vector<std::string> scene_ids;
  std::vector<double> scene_bleu4;
  std::vector<double> scene_cider;
  double corpus_bleu4 = 0.0;
  double corpus_cider = 0.0;
  bool cider_degenerate = false;
  int scenes = 0;
};

inline MetricsReport evaluate_captions(const std::vector<std::string>& scene_ids,
                                       const std::vector<TokenList>& candidates,
                                       const std::vector<std::vector<TokenList>>& references,
                                       bool smooth = false) {
  MetricsReport report;
  report.scene_ids = scene_ids;
  report.scenes = static_cast<int>(candidates.size());
  BleuAccumulator corpus_acc;
  for (std::size_t s = 0; s < candidates.size(); ++s) {
    corpus_acc.add(candidates[s], references[s]);
    report.scene_bleu4.push_back(bleu4(candidates[s], references[s], smooth));
  }
  report.corpus_bleu4 = corpus_acc.score(smooth);
  const CiderResult c = cider(candidates, references);
  report.scene_cider = c.per_scene;
  report.corpus_cider = c.corpus;
  report.cider_degenerate = c.degenerate;
  return report;
}

}  // namespace kgcap
