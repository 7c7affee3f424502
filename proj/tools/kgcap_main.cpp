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
// Command-line entry point: synth, kg-train, map-train, train, caption,
// eval and export-graph subcommands over dataset directories.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "kgcap/dataset.hpp"
#include "kgcap/decoder.hpp"
#include "kgcap/graph_export.hpp"
#include "kgcap/kg_embedding.hpp"
#include "kgcap/metrics.hpp"
#include "kgcap/proposals.hpp"
#include "kgcap/training.hpp"
#include "kgcap/triples.hpp"

namespace {

using kgcap::fmt6;

std::vector<int> split_indices(const kgcap::Dataset& data, const std::string& split) {
  if (split == "train") return data.train;
  if (split == "val") return data.val;
  if (split == "test") return data.test;
  throw kgcap::ConfigError("unknown split '" + split + "'");
}

kgcap::LabelSet scene_labels(const kgcap::SceneRecord& scene, const kgcap::ConceptVocab& lexicon) {
  // Union of all reference captions' label sets.
  kgcap::LabelSet merged = kgcap::labels_from_caption(scene.captions[0], lexicon);
  for (std::size_t c = 1; c < scene.captions.size(); ++c) {
    const kgcap::LabelSet extra = kgcap::labels_from_caption(scene.captions[c], lexicon);
    for (std::int64_t i = 0; i < merged.objects.size(); ++i)
      merged.objects[i] = std::max(merged.objects[i], extra.objects[i]);
    for (std::int64_t i = 0; i < merged.relations.size(); ++i)
      merged.relations[i] = std::max(merged.relations[i], extra.relations[i]);
    for (std::int64_t i = 0; i < merged.attributes.size(); ++i)
      merged.attributes[i] = std::max(merged.attributes[i], extra.attributes[i]);
  }
  return merged;
}

struct CaptionLine {
  std::string scene_id;
  std::vector<std::string> tokens;
  double logprob;
};

std::vector<CaptionLine> read_caption_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw kgcap::IoError("cannot open: " + path);
  std::vector<CaptionLine> lines;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = line.rfind('\t');
    if (t1 == std::string::npos || t2 == t1)
      throw kgcap::ParseError(path + ":" + std::to_string(lineno) +
                              ": expected `scene-id<TAB>caption<TAB>logprob`");
    CaptionLine cl;
    cl.scene_id = line.substr(0, t1);
    std::istringstream words(line.substr(t1 + 1, t2 - t1 - 1));
    std::string w;
    while (words >> w) cl.tokens.push_back(w);
    cl.logprob = std::stod(line.substr(t2 + 1));
    lines.push_back(std::move(cl));
  }
  return lines;
}

int run_synth(const std::string& out, kgcap::SynthSpec spec) {
  kgcap::synth_dataset(spec, out);
  std::cerr << "synth: wrote " << spec.scenes << " scenes to " << out << "\n";
  return 0;
}

int run_kg_train(const std::string& data_dir, const std::string& out, kgcap::KgTrainConfig cfg) {
  namespace fs = std::filesystem;
  const auto store =
      kgcap::load_triples((fs::path(data_dir) / kgcap::dataset_files::kTriples).string(),
                          (fs::path(data_dir) / kgcap::dataset_files::kConcepts).string());
  kgcap::KgTrainReport report;
  const auto table = kgcap::train_kg_embeddings(store, cfg, &report);
  kgcap::save_embedding_table(table, out);
  std::cerr << "kg-train: " << store.triples.size() << " triples, " << store.vocab.size()
            << " concepts, final loss " << fmt6(report.epoch_loss.back()) << ", wrote " << out
            << "\n";
  return 0;
}

int run_map_train(const std::string& data_dir, const std::string& kg_path, const std::string& out,
                  kgcap::MapperTrainConfig cfg) {
  const kgcap::Dataset data = kgcap::ingest_scenes(data_dir);
  std::vector<kgcap::MapperTrainScene> scenes;
  for (int idx : data.train)
    scenes.push_back(
        {data.scene(idx).regions, scene_labels(data.scene(idx), data.lexicon)});
  kgcap::MapperTrainReport report;
  kgcap::ParameterStore params = kgcap::train_mappers(scenes, data.lexicon, cfg, &report);

  kgcap::Checkpoint ckpt;
  ckpt.config["heads"] = cfg.heads;
  ckpt.config["hidden"] = cfg.hidden;
  ckpt.config["epochs"] = cfg.epochs;
  ckpt.config["seed"] = static_cast<double>(cfg.seed);
  for (const auto& [name, a] : params) ckpt.params.add(name, a.clone());
  kgcap::save_checkpoint(ckpt, out);
  std::cerr << "map-train: " << scenes.size() << " scenes";
  for (const auto& [role, ap] : report.mean_average_precision)
    std::cerr << ", " << role << " mAP " << fmt6(ap);
  std::cerr << ", wrote " << out << "\n";
  (void)kg_path;  // mapper training uses caption labels only
  return 0;
}

int run_train(const std::string& data_dir, const std::string& kg_path, const std::string& mapper_path,
              const std::string& out, const std::string& report_path, kgcap::TrainConfig cfg) {
  const kgcap::Dataset data = kgcap::ingest_scenes(data_dir);
  const auto table = kgcap::load_embedding_table(kg_path);
  const kgcap::Checkpoint mappers = kgcap::load_checkpoint(mapper_path);
  kgcap::ParameterStore params;
  for (const auto& [name, a] : mappers.params) params.add(name, a.clone());

  kgcap::JointTrainResult result = kgcap::train_joint(data, table, params, cfg, &std::cerr);
  kgcap::save_checkpoint(result.checkpoint, out);

  std::ostringstream csv;
  csv << "epoch,iteration,L_c,L_s,beta,val-BLEU4,val-CIDEr\n";
  for (const auto& row : result.history)
    csv << row.epoch << ',' << row.iteration << ',' << fmt6(row.caption_loss) << ','
        << fmt6(row.semantic) << ',' << fmt6(row.beta) << ',' << fmt6(row.val_bleu4) << ','
        << fmt6(row.val_cider) << '\n';
  kgcap::atomic_write_text(report_path, csv.str());
  std::cerr << "train: " << result.history.size() << " epochs over "
            << result.iteration_val_metric.size() << " alternations, train token acc "
            << fmt6(result.final_train_token_accuracy) << ", train BLEU-4 "
            << fmt6(result.final_train_bleu4) << ", wrote " << out << " and " << report_path << "\n";
  return 0;
}

int run_caption(const std::string& data_dir, const std::string& model_path, const std::string& split,
                const std::string& out, int beam, int max_len) {
  const kgcap::Dataset data = kgcap::ingest_scenes(data_dir);
  kgcap::InferenceModel model =
      kgcap::InferenceModel::from_checkpoint(kgcap::load_checkpoint(model_path));
  if (max_len <= 0) max_len = model.cfg.max_len;
  std::ostringstream os;
  for (int idx : split_indices(data, split)) {
    const auto& scene = data.scene(idx);
    const kgcap::Caption cap = model.caption(scene, data.lexicon, beam, max_len);
    os << scene.scene_id << '\t';
    const auto body = cap.body();
    for (std::size_t i = 0; i < body.size(); ++i)
      os << (i ? " " : "") << model.vocab.word(body[static_cast<std::size_t>(i)]);
    os << '\t' << fmt6(cap.logprob) << '\n';
    std::cerr << "caption: " << scene.scene_id << " done\n";
  }
  kgcap::atomic_write_text(out, os.str());
  return 0;
}

int run_eval(const std::string& data_dir, const std::string& captions_path, const std::string& split,
             const std::string& out, bool smooth) {
  const kgcap::Dataset data = kgcap::ingest_scenes(data_dir);
  const auto lines = read_caption_file(captions_path);
  std::map<std::string, const kgcap::SceneRecord*> by_id;
  for (int idx : split_indices(data, split)) {
    const auto& s = data.scene(idx);
    by_id[s.scene_id] = &s;
  }
  std::vector<std::string> ids;
  std::vector<kgcap::TokenList> candidates;
  std::vector<std::vector<kgcap::TokenList>> references;
  for (const auto& cl : lines) {
    auto it = by_id.find(cl.scene_id);
    if (it == by_id.end())
      throw kgcap::ConfigError("caption for scene '" + cl.scene_id + "' not in split '" + split + "'");
    ids.push_back(cl.scene_id);
    candidates.push_back(cl.tokens);
    references.push_back(it->second->captions);
  }
  if (candidates.empty()) throw kgcap::ConfigError("eval: no captions matched the split");
  const kgcap::MetricsReport report = kgcap::evaluate_captions(ids, candidates, references, smooth);

  nlohmann::ordered_json j;
  j["scenes"] = report.scenes;
  j["corpus_bleu4"] = std::stod(fmt6(report.corpus_bleu4));
  j["corpus_cider"] = std::stod(fmt6(report.corpus_cider));
  j["cider_degenerate"] = report.cider_degenerate;
  j["per_scene"] = nlohmann::ordered_json::array();
  for (int i = 0; i < report.scenes; ++i) {
    nlohmann::ordered_json row;
    row["scene_id"] = report.scene_ids[static_cast<std::size_t>(i)];
    row["bleu4"] = std::stod(fmt6(report.scene_bleu4[static_cast<std::size_t>(i)]));
    row["cider"] = std::stod(fmt6(report.scene_cider[static_cast<std::size_t>(i)]));
    j["per_scene"].push_back(std::move(row));
  }
  kgcap::atomic_write_text(out, j.dump(2) + "\n");
  std::cout << "BLEU-4 " << fmt6(report.corpus_bleu4) << " CIDEr " << fmt6(report.corpus_cider)
            << " scenes " << report.scenes << "\n";
  return 0;
}

int run_export_graph(const std::string& data_dir, const std::string& model_path,
                     const std::string& scene_id, const std::string& out) {
  const kgcap::Dataset data = kgcap::ingest_scenes(data_dir);
  kgcap::InferenceModel model =
      kgcap::InferenceModel::from_checkpoint(kgcap::load_checkpoint(model_path));
  for (const auto& scene : data.scenes) {
    if (scene.scene_id != scene_id) continue;
    std::vector<kgcap::Triplet> selection;
    kgcap::CandidateProposalSet proposals;
    model.caption(scene, data.lexicon, 1, model.cfg.max_len, &selection, &proposals);
    kgcap::export_graph(selection, proposals, data.lexicon, out);
    std::cerr << "export-graph: " << selection.size() << " triplets to " << out << "\n";
    return 0;
  }
  throw kgcap::ConfigError("scene '" + scene_id + "' not found");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"knowledge-graph guided joint reasoning for visual captioning"};
  app.set_config("--config", "", "flat key=value config file");
  app.require_subcommand(1);

  std::uint64_t seed = 1;
  app.add_option("--seed", seed, "global random seed")->capture_default_str();

  // --- synth ---
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  kgcap::SynthSpec synth_spec;
  std::string synth_out = "data";
  synth->add_option("--scenes", synth_spec.scenes, "number of scenes")->capture_default_str();
  synth->add_option("--out", synth_out, "output directory")->capture_default_str();
  synth->add_option("--objects", synth_spec.objects)->capture_default_str();
  synth->add_option("--relations", synth_spec.relations)->capture_default_str();
  synth->add_option("--attributes", synth_spec.attributes)->capture_default_str();
  synth->add_option("--lv", synth_spec.feature_dim, "region feature dim")->capture_default_str();
  synth->add_option("--noise", synth_spec.noise)->capture_default_str();
  synth->add_option("--regions-per-vertex", synth_spec.regions_per_vertex)->capture_default_str();
  synth->add_option("--max-triples", synth_spec.max_triples_per_scene)->capture_default_str();
  synth->add_option("--refs", synth_spec.references_per_scene)->capture_default_str();

  // --- kg-train ---
  auto* kgt = app.add_subcommand("kg-train", "train knowledge-graph embeddings");
  std::string kgt_data = "data", kgt_out = "kg.bin";
  kgcap::KgTrainConfig kg_cfg;
  kgt->add_option("--data", kgt_data, "dataset directory")->capture_default_str();
  kgt->add_option("--out", kgt_out, "embedding output file")->capture_default_str();
  kgt->add_option("--lk", kg_cfg.embedding_dim, "embedding dim")->capture_default_str();
  kgt->add_option("--epochs", kg_cfg.epochs)->capture_default_str();
  kgt->add_option("--lr", kg_cfg.learning_rate)->capture_default_str();
  kgt->add_option("--negatives", kg_cfg.negatives_per_positive)->capture_default_str();
  kgt->add_option("--l2", kg_cfg.l2_weight)->capture_default_str();

  // --- map-train ---
  auto* mpt = app.add_subcommand("map-train", "train the knowledge-mapping networks");
  std::string mpt_data = "data", mpt_kg = "kg.bin", mpt_out = "mappers.ckpt";
  kgcap::MapperTrainConfig map_cfg;
  mpt->add_option("--data", mpt_data)->capture_default_str();
  mpt->add_option("--kg", mpt_kg)->capture_default_str();
  mpt->add_option("--out", mpt_out)->capture_default_str();
  mpt->add_option("--epochs", map_cfg.epochs)->capture_default_str();
  mpt->add_option("--lr", map_cfg.learning_rate)->capture_default_str();
  mpt->add_option("--heads", map_cfg.heads, "attention operations K")->capture_default_str();
  mpt->add_option("--hidden", map_cfg.hidden)->capture_default_str();
  mpt->add_option("--kmin", map_cfg.k_min)->capture_default_str();
  mpt->add_option("--kmax", map_cfg.k_max)->capture_default_str();

  // --- train ---
  auto* trn = app.add_subcommand("train", "alternating joint training");
  std::string trn_data = "data", trn_kg = "kg.bin", trn_mappers = "mappers.ckpt",
              trn_out = "model.ckpt", trn_report = "report.csv";
  kgcap::TrainConfig train_cfg;
  trn->add_option("--data", trn_data)->capture_default_str();
  trn->add_option("--kg", trn_kg)->capture_default_str();
  trn->add_option("--mappers", trn_mappers)->capture_default_str();
  trn->add_option("--out", trn_out)->capture_default_str();
  trn->add_option("--report", trn_report)->capture_default_str();
  trn->add_option("--alternations", train_cfg.alternations)->capture_default_str();
  trn->add_option("--epochs", train_cfg.max_epochs, "captioning epochs per alternation")
      ->capture_default_str();
  trn->add_option("--patience", train_cfg.patience)->capture_default_str();
  trn->add_option("--outer-patience", train_cfg.outer_patience)->capture_default_str();
  trn->add_option("--batch", train_cfg.batch_size)->capture_default_str();
  trn->add_option("--lr", train_cfg.learning_rate)->capture_default_str();
  trn->add_option("--lambda", train_cfg.lambda)->capture_default_str();
  trn->add_option("--gamma", train_cfg.gamma)->capture_default_str();
  trn->add_option("--beta", train_cfg.beta_after_warmup)->capture_default_str();
  trn->add_option("--warmup", train_cfg.warmup_epochs)->capture_default_str();
  trn->add_option("--gmax", train_cfg.g_max)->capture_default_str();
  trn->add_option("--ls", train_cfg.semantic_dim, "semantic feature dim")->capture_default_str();
  trn->add_option("--phi-hidden", train_cfg.phi_hidden)->capture_default_str();
  trn->add_option("--gcn-layers", train_cfg.gcn_layers)->capture_default_str();
  trn->add_option("--criterion-dim", train_cfg.criterion_dim)->capture_default_str();
  trn->add_option("--dec-hidden", train_cfg.decoder.hidden)->capture_default_str();
  trn->add_option("--dec-embedding", train_cfg.decoder.embedding)->capture_default_str();
  trn->add_option("--dec-attention", train_cfg.decoder.attention)->capture_default_str();
  trn->add_option("--max-len", train_cfg.max_len)->capture_default_str();
  trn->add_option("--kmin", train_cfg.k_min)->capture_default_str();
  trn->add_option("--kmax", train_cfg.k_max)->capture_default_str();

  // --- caption ---
  auto* cap = app.add_subcommand("caption", "decode captions for a split");
  std::string cap_data = "data", cap_model = "model.ckpt", cap_split = "test",
              cap_out = "captions.tsv", cap_mode = "image";
  int cap_beam = 0, cap_max_len = 0;
  cap->add_option("--data", cap_data)->capture_default_str();
  cap->add_option("--model", cap_model)->capture_default_str();
  cap->add_option("--split", cap_split)->capture_default_str();
  cap->add_option("--out", cap_out)->capture_default_str();
  cap->add_option("--beam", cap_beam, "beam width (0: mode default)")->capture_default_str();
  cap->add_option("--mode", cap_mode, "image (beam 3) or video (beam 5)")
      ->check(CLI::IsMember({"image", "video"}))
      ->capture_default_str();
  cap->add_option("--max-len", cap_max_len, "0: model default")->capture_default_str();

  // --- eval ---
  auto* evl = app.add_subcommand("eval", "score a caption file");
  std::string evl_data = "data", evl_captions = "captions.tsv", evl_split = "test",
              evl_out = "metrics.json";
  bool evl_smooth = false;
  evl->add_option("--data", evl_data)->capture_default_str();
  evl->add_option("--captions", evl_captions)->capture_default_str();
  evl->add_option("--split", evl_split)->capture_default_str();
  evl->add_option("--out", evl_out)->capture_default_str();
  evl->add_flag("--smooth", evl_smooth, "BLEU add-one smoothing for n>1");

  // --- export-graph ---
  auto* exg = app.add_subcommand("export-graph", "write a scene's semantic graph as DOT");
  std::string exg_data = "data", exg_model = "model.ckpt", exg_scene, exg_out = "graph.dot";
  exg->add_option("--data", exg_data)->capture_default_str();
  exg->add_option("--model", exg_model)->capture_default_str();
  exg->add_option("--scene", exg_scene, "scene id")->required();
  exg->add_option("--out", exg_out)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // prints help, exit 0
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  }

  try {
    synth_spec.seed = seed;
    kg_cfg.seed = seed;
    map_cfg.seed = seed;
    train_cfg.seed = seed;
    if (synth->parsed()) return run_synth(synth_out, synth_spec);
    if (kgt->parsed()) return run_kg_train(kgt_data, kgt_out, kg_cfg);
    if (mpt->parsed()) return run_map_train(mpt_data, mpt_kg, mpt_out, map_cfg);
    if (trn->parsed()) return run_train(trn_data, trn_kg, trn_mappers, trn_out, trn_report, train_cfg);
    if (cap->parsed()) {
      const int beam = cap_beam > 0 ? cap_beam : (cap_mode == "video" ? 5 : 3);
      return run_caption(cap_data, cap_model, cap_split, cap_out, beam, cap_max_len);
    }
    if (evl->parsed()) return run_eval(evl_data, evl_captions, evl_split, evl_out, evl_smooth);
    if (exg->parsed()) return run_export_graph(exg_data, exg_model, exg_scene, exg_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
