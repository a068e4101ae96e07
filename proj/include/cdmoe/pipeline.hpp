// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdmoe/checkpoint.hpp"
#include "cdmoe/condense.hpp"
#include "cdmoe/data.hpp"
#include "cdmoe/error.hpp"
#include "cdmoe/metrics.hpp"
#include "cdmoe/model.hpp"
#include "cdmoe/selection.hpp"
#include "cdmoe/training.hpp"

namespace cdmoe {

// ---------------------------------------------------------------------
// Run configuration: flat key-value file, keys mirroring the structure
// ---------------------------------------------------------------------

struct RunConfig {
  ModelConfig model;

  CorpusKind corpus_kind = CorpusKind::Markov;
  int corpus_size = 300;
  int eval_corpus_size = 48;
  int calib_count = 100;
  int calib_max_seq_len = 128;
  // calibration draws from the training corpus unless a different source
  // kind is requested (general-vs-task calibration comparisons)
  std::string calib_source = "default"; // default | markov | template
  int calib_corpus_size = 100;

  std::string expert_method = "greedy"; // greedy | random | l1 | alpha_hill
  std::string layer_method = "greedy";  // greedy | layer_rank | global_layer_rank
  std::string metric = "js";            // js | kl | ppl (greedy layer search)
  int k_layers = -1;                    // -1 = half the blocks
  int experts_per_condensed_layer = 2;  // 0 = shared-only (CD-MoE-S)

  int pretrain_steps = 600;
  double pretrain_lr = 5e-3;
  double aux_loss_coeff = 0.01;
  int sft_steps = 300;
  double sft_lr = 1e-3;
  int batch_size = 8;
  double warmup_ratio = 0.10;
  int eval_every = 50;

  std::uint64_t seed = 0;

  int resolved_k_layers() const {
    return k_layers >= 0 ? k_layers : std::max(1, model.num_blocks / 2);
  }

  void validate() const {
    std::string problems;
    auto need = [&](bool ok, const std::string& msg) {
      if (!ok) problems += "  - " + msg + "\n";
    };
    try {
      model.validate();
    } catch (const ConfigError& e) {
      std::string inner = e.what();
      const auto nl = inner.find('\n');
      if (nl != std::string::npos) problems += inner.substr(nl + 1);
    }
    need(model.vocab_size >= 256,
         "vocab_size must be >= 256 for byte-level corpora");
    need(corpus_size > 0, "data.corpus_size must be > 0");
    need(eval_corpus_size > 0, "data.eval_size must be > 0");
    need(calib_count > 0, "calib.count must be > 0");
    need(calib_max_seq_len >= 1, "calib.max_seq_len must be >= 1");
    need(calib_source == "default" || calib_source == "markov" ||
             calib_source == "template",
         "calib.source must be default|markov|template");
    need(calib_corpus_size > 0, "calib.corpus_size must be > 0");
    need(expert_method == "greedy" || expert_method == "random" ||
             expert_method == "l1" || expert_method == "alpha_hill",
         "select.expert_method must be greedy|random|l1|alpha_hill");
    need(layer_method == "greedy" || layer_method == "layer_rank" ||
             layer_method == "global_layer_rank",
         "select.layer_method must be greedy|layer_rank|global_layer_rank");
    need(metric == "js" || metric == "kl" || metric == "ppl",
         "select.metric must be js|kl|ppl");
    need(metric == "js" || layer_method == "greedy",
         "select.metric other than js applies to the greedy layer search "
         "only");
    need(k_layers <= model.num_blocks,
         "select.k_layers must be <= model.num_blocks");
    need(experts_per_condensed_layer >= 0 &&
             experts_per_condensed_layer <= model.num_routing_experts,
         "select.experts_per_layer must be in [0, num_routing_experts]");
    need(pretrain_steps >= 0, "train.pretrain_steps must be >= 0");
    need(sft_steps >= 0, "train.sft_steps must be >= 0");
    need(pretrain_lr > 0, "train.pretrain_lr must be > 0");
    need(sft_lr > 0, "train.sft_lr must be > 0");
    need(batch_size > 0, "train.batch_size must be > 0");
    need(warmup_ratio >= 0.0 && warmup_ratio < 1.0,
         "train.warmup_ratio must be in [0, 1)");
    need(aux_loss_coeff >= 0.0, "train.aux_coeff must be >= 0");
    if (!problems.empty())
      throw ConfigError("invalid run config:\n" + problems);
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["model"] = detail::config_to_json(model);
    j["data"] = {{"corpus_kind", corpus_kind_name(corpus_kind)},
                 {"corpus_size", corpus_size},
                 {"eval_size", eval_corpus_size}};
    j["calib"] = {{"count", calib_count},
                  {"max_seq_len", calib_max_seq_len},
                  {"source", calib_source},
                  {"corpus_size", calib_corpus_size}};
    j["select"] = {{"expert_method", expert_method},
                   {"layer_method", layer_method},
                   {"metric", metric},
                   {"k_layers", k_layers},
                   {"experts_per_layer", experts_per_condensed_layer}};
    j["train"] = {{"pretrain_steps", pretrain_steps},
                  {"pretrain_lr", pretrain_lr},
                  {"aux_coeff", aux_loss_coeff},
                  {"sft_steps", sft_steps},
                  {"sft_lr", sft_lr},
                  {"batch_size", batch_size},
                  {"warmup_ratio", warmup_ratio},
                  {"eval_every", eval_every}};
    j["seed"] = seed;
    return j;
  }

  std::string fingerprint() const {
    const std::string canon = to_json().dump();
    return detail::hex64(fnv1a64(canon));
  }
};

/// Parses `key = value` lines ('#' starts a comment). Unknown keys are
/// collected and reported together with every other validation problem.
inline RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::string problems;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    const auto b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      problems += "  - line " + std::to_string(line_no) + ": expected key = value\n";
      continue;
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      auto as_int = [&]() { return std::stoi(value); };
      auto as_double = [&]() { return std::stod(value); };
      auto as_bool = [&]() {
        if (value == "true" || value == "1") return true;
        if (value == "false" || value == "0") return false;
        throw ArgumentError("expected true/false");
      };
      if (key == "model.vocab_size") cfg.model.vocab_size = as_int();
      else if (key == "model.hidden_size") cfg.model.hidden_size = as_int();
      else if (key == "model.expert_inner") cfg.model.expert_inner = as_int();
      else if (key == "model.num_blocks") cfg.model.num_blocks = as_int();
      else if (key == "model.num_routing_experts")
        cfg.model.num_routing_experts = as_int();
      else if (key == "model.num_shared_experts")
        cfg.model.num_shared_experts = as_int();
      else if (key == "model.k_active") cfg.model.k_active = as_int();
      else if (key == "model.max_seq_len") cfg.model.max_seq_len = as_int();
      else if (key == "model.attention_enabled")
        cfg.model.attention_enabled = as_bool();
      else if (key == "model.renormalize_gates")
        cfg.model.renormalize_gates = as_bool();
      else if (key == "data.corpus_kind")
        cfg.corpus_kind = corpus_kind_from_name(value);
      else if (key == "data.corpus_size") cfg.corpus_size = as_int();
      else if (key == "data.eval_size") cfg.eval_corpus_size = as_int();
      else if (key == "calib.count") cfg.calib_count = as_int();
      else if (key == "calib.max_seq_len") cfg.calib_max_seq_len = as_int();
      else if (key == "calib.source") cfg.calib_source = value;
      else if (key == "calib.corpus_size") cfg.calib_corpus_size = as_int();
      else if (key == "select.expert_method") cfg.expert_method = value;
      else if (key == "select.layer_method") cfg.layer_method = value;
      else if (key == "select.metric") cfg.metric = value;
      else if (key == "select.k_layers") cfg.k_layers = as_int();
      else if (key == "select.experts_per_layer")
        cfg.experts_per_condensed_layer = as_int();
      else if (key == "train.pretrain_steps") cfg.pretrain_steps = as_int();
      else if (key == "train.pretrain_lr") cfg.pretrain_lr = as_double();
      else if (key == "train.aux_coeff") cfg.aux_loss_coeff = as_double();
      else if (key == "train.sft_steps") cfg.sft_steps = as_int();
      else if (key == "train.sft_lr") cfg.sft_lr = as_double();
      else if (key == "train.batch_size") cfg.batch_size = as_int();
      else if (key == "train.warmup_ratio") cfg.warmup_ratio = as_double();
      else if (key == "train.eval_every") cfg.eval_every = as_int();
      else if (key == "seed") cfg.seed = (std::uint64_t)std::stoull(value);
      else problems += "  - line " + std::to_string(line_no) + ": unknown key '" + key + "'\n";
    } catch (const std::exception&) {
      problems += "  - line " + std::to_string(line_no) + ": bad value for '" +
                  key + "'\n";
    }
  }
  // merge parse and validation problems into one report
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    std::string inner = e.what();
    const auto nl = inner.find('\n');
    if (nl != std::string::npos) problems += inner.substr(nl + 1);
  }
  if (!problems.empty())
    throw ConfigError("invalid run config:\n" + problems);
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_run_config: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return parse_run_config(text);
}

// ---------------------------------------------------------------------
// Artifact layout inside a run directory
// ---------------------------------------------------------------------

struct RunPaths {
  std::string out;
  explicit RunPaths(std::string dir) : out(std::move(dir)) {}

  std::string corpus() const { return out + "/corpus.txt"; }
  std::string eval_corpus() const { return out + "/eval_corpus.txt"; }
  std::string calib_corpus() const { return out + "/calib_corpus.txt"; }
  std::string calibration() const { return out + "/calibration.json"; }
  std::string pretrained() const { return out + "/model.ckpt"; }
  std::string pretrain_curve() const { return out + "/pretrain_curve.csv"; }
  std::string expert_plan() const { return out + "/expert_plan.json"; }
  std::string layer_plan() const { return out + "/layer_plan.json"; }
  std::string condensed() const { return out + "/condensed.ckpt"; }
  std::string sft() const { return out + "/sft.ckpt"; }
  std::string sft_curve() const { return out + "/sft_curve.csv"; }
  std::string sweep() const { return out + "/sweep.csv"; }
  std::string eval_json(const std::string& label) const {
    return out + "/eval_" + label + ".json";
  }
  std::string report_json() const { return out + "/report.json"; }
  std::string report_txt() const { return out + "/report.txt"; }

  void ensure_dir() const { std::filesystem::create_directories(out); }
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << text;
  if (!out) throw IoError("write failed for " + path);
}

inline nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError("bad JSON in " + path + ": " + e.what());
  }
  return j;
}

inline std::vector<std::vector<int>> corpus_sequences(const Corpus& corpus,
                                                      int max_seq_len) {
  std::vector<std::vector<int>> out;
  for (const auto& doc : corpus.documents) {
    std::vector<int> seq = tokenize_bytes(doc);
    if (seq.size() > (std::size_t)max_seq_len)
      seq.resize((std::size_t)max_seq_len);
    out.push_back(std::move(seq));
  }
  return out;
}

inline void write_curve_csv(const std::string& path,
                            const std::vector<CurvePoint>& curve) {
  std::string text = "step,lr,train_loss,eval_loss\n";
  for (const auto& p : curve) {
    text += std::to_string(p.step) + "," + fmt_double(p.lr) + "," +
            fmt_double(p.train_loss) + ",";
    if (p.eval_loss.has_value()) text += fmt_double(*p.eval_loss);
    text += "\n";
  }
  write_text(path, text);
}

inline nlohmann::json trace_to_json(const SelectionTrace& trace) {
  nlohmann::json j;
  j["chosen"] = trace.chosen;
  j["step_losses"] = trace.step_losses;
  nlohmann::json table = nlohmann::json::array();
  for (const auto& row : trace.candidate_losses) {
    nlohmann::json jrow = nlohmann::json::array();
    for (const auto& [idx, loss] : row)
      jrow.push_back(nlohmann::json{{"index", idx}, {"loss", loss}});
    table.push_back(std::move(jrow));
  }
  j["candidate_losses"] = std::move(table);
  j["fingerprint"] = trace.fingerprint;
  return j;
}

} // namespace detail

// ---------------------------------------------------------------------
// Pipeline stages
// ---------------------------------------------------------------------

inline void run_pretrain(const RunConfig& cfg, const RunPaths& paths,
                         std::optional<int> steps_override = std::nullopt) {
  cfg.validate();
  paths.ensure_dir();
  Corpus corpus =
      generate_corpus(cfg.corpus_kind, stage_seed(cfg.seed, "data"),
                      (std::size_t)cfg.corpus_size);
  Corpus eval = generate_corpus(cfg.corpus_kind,
                                stage_seed(cfg.seed, "eval_data"),
                                (std::size_t)cfg.eval_corpus_size);
  eval.source_tag = corpus.source_tag + "_heldout";
  save_corpus(corpus, paths.corpus());
  save_corpus(eval, paths.eval_corpus());

  MoEModel model = init_model(cfg.model, stage_seed(cfg.seed, "init"));
  TrainConfig tc;
  tc.learning_rate = cfg.pretrain_lr;
  tc.warmup_ratio = cfg.warmup_ratio;
  tc.steps = steps_override.value_or(cfg.pretrain_steps);
  tc.batch_size = cfg.batch_size;
  tc.seed = stage_seed(cfg.seed, "pretrain");
  tc.aux_loss_coeff = cfg.aux_loss_coeff;
  tc.eval_every = cfg.eval_every;
  const ParamMask mask = ParamMask::all(model);
  TrainResult result =
      train(std::move(model),
            detail::corpus_sequences(corpus, cfg.model.max_seq_len), tc, mask,
            detail::corpus_sequences(eval, cfg.model.max_seq_len));
  save_checkpoint(result.model, paths.pretrained());
  detail::write_curve_csv(paths.pretrain_curve(), result.curve);
}

// "default" samples calibration data from the training corpus; naming a
// kind generates a dedicated calibration corpus instead, so runs can
// calibrate on general prose while evaluating on task-style text or the
// other way around.
inline std::string calibration_corpus_file(const RunConfig& cfg,
                                           const RunPaths& paths) {
  return cfg.calib_source == "default" ? paths.corpus()
                                       : paths.calib_corpus();
}

inline CalibrationSet run_calibrate(const RunConfig& cfg,
                                    const RunPaths& paths) {
  cfg.validate();
  if (cfg.calib_source != "default") {
    Corpus calib_corpus = generate_corpus(
        corpus_kind_from_name(cfg.calib_source),
        stage_seed(cfg.seed, "calib_data"), (std::size_t)cfg.calib_corpus_size);
    save_corpus(calib_corpus, paths.calib_corpus());
  }
  Corpus corpus = load_corpus(calibration_corpus_file(cfg, paths));
  const int max_len = std::min(cfg.calib_max_seq_len, cfg.model.max_seq_len);
  CalibrationSet set =
      sample_calibration(corpus, (std::size_t)cfg.calib_count, max_len,
                         stage_seed(cfg.seed, "calibration"));
  nlohmann::json j;
  j["seed"] = set.seed;
  j["count"] = cfg.calib_count;
  j["max_seq_len"] = set.max_seq_len;
  j["with_replacement"] = set.with_replacement;
  j["doc_indices"] = set.doc_indices;
  j["fingerprint"] = set.fingerprint;
  j["corpus_file"] =
      std::filesystem::path(calibration_corpus_file(cfg, paths))
          .filename()
          .string();
  j["config_fingerprint"] = cfg.fingerprint();
  detail::write_text(paths.calibration(), j.dump(2) + "\n");
  return set;
}

/// Re-materializes the calibration set from the stored document indices
/// and verifies the content fingerprint.
inline CalibrationSet load_calibration(const RunConfig& cfg,
                                       const RunPaths& paths) {
  nlohmann::json j = detail::read_json(paths.calibration());
  const std::string corpus_file =
      j.contains("corpus_file") ? j.at("corpus_file").get<std::string>()
                                : std::string("corpus.txt");
  Corpus corpus = load_corpus(paths.out + "/" + corpus_file);
  CalibrationSet set;
  set.seed = j.at("seed").get<std::uint64_t>();
  set.max_seq_len = j.at("max_seq_len").get<int>();
  set.with_replacement = j.at("with_replacement").get<bool>();
  set.doc_indices = j.at("doc_indices").get<std::vector<std::size_t>>();
  for (std::size_t idx : set.doc_indices) {
    if (idx >= corpus.documents.size())
      throw CorruptionError("calibration set references document " +
                            std::to_string(idx) + " beyond corpus size");
    std::vector<int> seq = tokenize_bytes(corpus.documents[idx]);
    if (seq.size() > (std::size_t)set.max_seq_len)
      seq.resize((std::size_t)set.max_seq_len);
    set.sequences.push_back(std::move(seq));
  }
  // recompute the fingerprint over what we actually materialized
  const std::size_t count = set.doc_indices.size();
  std::uint64_t h = fnv1a64(&set.seed, sizeof(set.seed));
  h = fnv1a64(&count, sizeof(count), h);
  h = fnv1a64(&set.max_seq_len, sizeof(set.max_seq_len), h);
  const unsigned char repl = set.with_replacement ? 1 : 0;
  h = fnv1a64(&repl, sizeof(repl), h);
  for (std::size_t idx : set.doc_indices) h = fnv1a64(&idx, sizeof(idx), h);
  for (const auto& seq : set.sequences)
    for (int token : seq) h = fnv1a64(&token, sizeof(token), h);
  set.fingerprint = detail::hex64(h);
  if (set.fingerprint != j.at("fingerprint").get<std::string>())
    throw CorruptionError("calibration fingerprint mismatch; corpus or "
                          "calibration file changed");
  (void)cfg;
  return set;
}

inline void run_select_experts(const RunConfig& cfg, const RunPaths& paths,
                               std::optional<int> keep_override =
                                   std::nullopt) {
  cfg.validate();
  MoEModel model = load_checkpoint(paths.pretrained());
  CalibrationSet calib = load_calibration(cfg, paths);
  const int keep = keep_override.value_or(cfg.experts_per_condensed_layer);

  nlohmann::json plan_json;
  plan_json["method"] = cfg.expert_method;
  plan_json["experts_per_layer"] = keep;
  plan_json["calibration_fingerprint"] = calib.fingerprint;
  plan_json["config_fingerprint"] = cfg.fingerprint();
  nlohmann::json keep_json = nlohmann::json::object();
  nlohmann::json traces_json = nlohmann::json::object();

  for (std::size_t b = 0; b < model.num_blocks(); ++b) {
    if (!is_routed(model.blocks[b].layer)) continue;
    const auto& layer = std::get<RoutedMoELayer>(model.blocks[b].layer);
    std::vector<int> chosen;
    if (keep == 0) {
      chosen = {};
    } else if (cfg.expert_method == "greedy") {
      SelectionTrace trace =
          greedy_expert_selection(model, (int)b, calib.sequences, keep);
      trace.fingerprint = calib.fingerprint;
      chosen = trace.chosen;
      traces_json[std::to_string(b)] = detail::trace_to_json(trace);
    } else if (cfg.expert_method == "random") {
      chosen = random_expert_selection(
          (int)layer.num_experts(), keep,
          stage_seed(cfg.seed, "random_experts") + (std::uint64_t)b);
    } else if (cfg.expert_method == "l1") {
      chosen = l1_expert_selection(layer, keep);
    } else {
      chosen = alpha_hill_expert_selection(layer, keep);
    }
    keep_json[std::to_string(b)] = chosen;
  }
  plan_json["keep"] = std::move(keep_json);
  plan_json["traces"] = std::move(traces_json);
  detail::write_text(paths.expert_plan(), plan_json.dump(2) + "\n");
}

inline ExpertPlan load_expert_plan(const RunPaths& paths) {
  nlohmann::json j = detail::read_json(paths.expert_plan());
  ExpertPlan plan;
  for (const auto& [key, value] : j.at("keep").items())
    plan[std::stoi(key)] = value.get<std::vector<int>>();
  return plan;
}

inline void run_select_layers(const RunConfig& cfg, const RunPaths& paths,
                              std::optional<int> k_override = std::nullopt) {
  cfg.validate();
  MoEModel model = load_checkpoint(paths.pretrained());
  CalibrationSet calib = load_calibration(cfg, paths);
  ExpertPlan plan = load_expert_plan(paths);
  const int k = k_override.value_or(cfg.resolved_k_layers());

  SelectionTrace trace;
  if (cfg.layer_method == "greedy") {
    trace = greedy_layer_selection(model, calib.sequences, k, plan,
                                   selection_metric_from_name(cfg.metric));
  } else if (cfg.layer_method == "layer_rank") {
    trace = layer_rank_selection(model, calib.sequences, k, plan);
  } else {
    trace = global_layer_rank_selection(model, calib.sequences, k, plan);
  }
  trace.fingerprint = calib.fingerprint;

  nlohmann::json j;
  j["method"] = cfg.layer_method;
  j["metric"] = cfg.metric;
  j["k_layers"] = k;
  j["calibration_fingerprint"] = calib.fingerprint;
  j["config_fingerprint"] = cfg.fingerprint();
  j["trace"] = detail::trace_to_json(trace);
  detail::write_text(paths.layer_plan(), j.dump(2) + "\n");
}

inline void run_condense(const RunConfig& cfg, const RunPaths& paths,
                         bool force_never_activated = false,
                         std::ostream* warnings = nullptr) {
  cfg.validate();
  MoEModel model = load_checkpoint(paths.pretrained());
  CalibrationSet calib = load_calibration(cfg, paths);
  ExpertPlan plan = load_expert_plan(paths);
  nlohmann::json layer_plan = detail::read_json(paths.layer_plan());
  const std::vector<int> chosen =
      layer_plan.at("trace").at("chosen").get<std::vector<int>>();

  MoEModel out = model;
  for (int b : chosen) {
    if (b < 0 || (std::size_t)b >= model.num_blocks())
      throw CorruptionError("layer plan names block " + std::to_string(b));
    if (!is_routed(model.blocks[(std::size_t)b].layer))
      throw StateError("block " + std::to_string(b) + " already condensed");
    const auto& routed =
        std::get<RoutedMoELayer>(model.blocks[(std::size_t)b].layer);
    // gate statistics always come from the fully routed model
    GateStats stats = collect_gate_stats(calib.sequences, model, b);
    auto it = plan.find(b);
    const std::vector<int> keep =
        it == plan.end() ? std::vector<int>{} : it->second;
    std::optional<double> fallback;
    if (force_never_activated) {
      fallback = 1.0 / (double)routed.num_experts();
      for (int idx : keep)
        if (stats.activation_count[(std::size_t)idx] == 0 && warnings)
          *warnings << "warning: expert " << idx << " in block " << b
                    << " never activated; using fixed gate 1/N\n";
    }
    out = with_condensed_block(out, b,
                               condense_layer(routed, keep, stats, b,
                                              fallback));
  }
  save_checkpoint(out, paths.condensed());
}

inline void run_sft(const RunConfig& cfg, const RunPaths& paths,
                    std::optional<int> steps_override = std::nullopt) {
  cfg.validate();
  MoEModel model = load_checkpoint(paths.condensed());
  Corpus corpus = load_corpus(paths.corpus());
  Corpus eval = load_corpus(paths.eval_corpus());
  TrainConfig tc;
  tc.learning_rate = cfg.sft_lr;
  tc.warmup_ratio = cfg.warmup_ratio;
  tc.steps = steps_override.value_or(cfg.sft_steps);
  tc.batch_size = cfg.batch_size;
  tc.seed = stage_seed(cfg.seed, "sft");
  tc.aux_loss_coeff = 0.0;
  tc.eval_every = cfg.eval_every;
  ParamMask mask = ParamMask::condensed_layers(model);
  TrainResult result =
      train(std::move(model),
            detail::corpus_sequences(corpus, cfg.model.max_seq_len), tc, mask,
            detail::corpus_sequences(eval, cfg.model.max_seq_len));
  save_checkpoint(result.model, paths.sft());
  detail::write_curve_csv(paths.sft_curve(), result.curve);
}

inline std::string variant_label(const MoEModel& model) {
  bool any_condensed = false, any_kept = false;
  for (const auto& block : model.blocks) {
    if (is_routed(block.layer)) continue;
    any_condensed = true;
    if (std::get<CondensedLayer>(block.layer).num_kept() > 0) any_kept = true;
  }
  if (!any_condensed) return "original";
  return any_kept ? "CD-MoE-SR" : "CD-MoE-S";
}

/// Single-threaded throughput over a fixed 2048-token workload; reported
/// alongside the analytic estimate, never asserted anywhere.
inline double measure_tokens_per_second(
    const MoEModel& model, const std::vector<std::vector<int>>& sequences) {
  constexpr std::size_t kWorkloadTokens = 2048;
  std::size_t done = 0;
  const auto start = std::chrono::steady_clock::now();
  std::size_t i = 0;
  while (done < kWorkloadTokens) {
    const auto& seq = sequences[i % sequences.size()];
    model_forward(model, seq);
    done += seq.size();
    ++i;
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  return (double)done / secs;
}

inline nlohmann::json cost_to_json(const CostReport& cost) {
  nlohmann::json j;
  j["total_params"] = cost.total_params;
  j["original_total_params"] = cost.original_total_params;
  j["active_params_per_token"] = cost.active_params_per_token;
  j["original_active_params_per_token"] =
      cost.original_active_params_per_token;
  j["memory_ratio"] = cost.memory_ratio;
  j["flops_per_token"] = cost.flops_per_token;
  j["original_flops_per_token"] = cost.original_flops_per_token;
  j["speedup_estimate"] = cost.speedup_estimate;
  if (cost.measured_tokens_per_second.has_value())
    j["measured_tokens_per_second"] = *cost.measured_tokens_per_second;
  return j;
}

inline void run_eval(const RunConfig& cfg, const RunPaths& paths,
                     const std::string& checkpoint_base,
                     const std::string& label,
                     bool measure_throughput = false) {
  cfg.validate();
  MoEModel model = load_checkpoint(checkpoint_base);
  Corpus eval = load_corpus(paths.eval_corpus());
  auto sequences = detail::corpus_sequences(eval, cfg.model.max_seq_len);
  double acc = 0.0;
  int used = 0;
  for (const auto& seq : sequences) {
    if (seq.size() < 2) continue;
    acc += perplexity(seq, model);
    ++used;
  }
  if (used == 0) throw ArgumentError("run_eval: no usable eval sequences");

  std::optional<double> throughput;
  if (measure_throughput)
    throughput = measure_tokens_per_second(model, sequences);
  const CostReport cost = cost_report(model, throughput);

  nlohmann::json j;
  j["label"] = label;
  j["variant"] = variant_label(model);
  // file name only, so artifacts stay byte-identical across run directories
  j["checkpoint"] =
      std::filesystem::path(checkpoint_base).filename().string();
  j["mean_perplexity"] = acc / (double)used;
  j["num_sequences"] = used;
  j["cost"] = cost_to_json(cost);
  j["config_fingerprint"] = cfg.fingerprint();
  detail::write_text(paths.eval_json(label), j.dump(2) + "\n");
}

inline void run_sweep(const RunConfig& cfg, const RunPaths& paths) {
  cfg.validate();
  MoEModel model = load_checkpoint(paths.pretrained());
  CalibrationSet calib = load_calibration(cfg, paths);
  ExpertPlan plan = load_expert_plan(paths);
  const std::vector<SweepRow> rows =
      divergence_sweep(model, calib.sequences, plan);
  std::string text = "layer_index,js,kl,ppl_delta\n";
  for (const auto& row : rows)
    text += std::to_string(row.layer_index) + "," +
            detail::fmt_double(row.js) + "," + detail::fmt_double(row.kl) +
            "," + detail::fmt_double(row.ppl_delta) + "\n";
  detail::write_text(paths.sweep(), text);
}

inline void run_report(const RunConfig& cfg, const RunPaths& paths) {
  cfg.validate();
  nlohmann::json report;
  report["config"] = cfg.to_json();
  report["config_fingerprint"] = cfg.fingerprint();

  nlohmann::json evals = nlohmann::json::object();
  for (const std::string label : {"pretrained", "condensed", "sft"}) {
    const std::string path = paths.eval_json(label);
    if (std::filesystem::exists(path)) evals[label] = detail::read_json(path);
  }
  report["evals"] = std::move(evals);
  if (std::filesystem::exists(paths.expert_plan()))
    report["expert_plan"] = detail::read_json(paths.expert_plan());
  if (std::filesystem::exists(paths.layer_plan()))
    report["layer_plan"] = detail::read_json(paths.layer_plan());
  if (std::filesystem::exists(paths.sweep())) {
    std::ifstream in(paths.sweep(), std::ios::binary);
    report["sweep_csv"] = std::string((std::istreambuf_iterator<char>(in)),
                                      std::istreambuf_iterator<char>());
  }
  detail::write_text(paths.report_json(), report.dump(2) + "\n");

  std::ostringstream txt;
  txt << "cdmoe run report\n";
  txt << "================\n";
  txt << "config fingerprint: " << cfg.fingerprint() << "\n";
  txt << "seed: " << cfg.seed << "\n\n";
  for (const std::string label : {"pretrained", "condensed", "sft"}) {
    if (!report["evals"].contains(label)) continue;
    const auto& e = report["evals"][label];
    txt << label << " (" << e.at("variant").get<std::string>() << ")\n";
    txt << "  mean perplexity : "
        << detail::fmt_double(e.at("mean_perplexity").get<double>()) << "\n";
    const auto& cost = e.at("cost");
    txt << "  memory ratio    : "
        << detail::fmt_double(cost.at("memory_ratio").get<double>()) << "\n";
    txt << "  speedup (flops) : "
        << detail::fmt_double(cost.at("speedup_estimate").get<double>())
        << "\n";
    if (cost.contains("measured_tokens_per_second"))
      txt << "  measured tok/s  : "
          << detail::fmt_double(
                 cost.at("measured_tokens_per_second").get<double>())
          << "\n";
    txt << "\n";
  }
  if (report.contains("layer_plan")) {
    txt << "condensed layers: ";
    for (int b : report["layer_plan"]["trace"]["chosen"]
                     .get<std::vector<int>>())
      txt << b << " ";
    txt << "(" << report["layer_plan"]["method"].get<std::string>()
        << ", metric " << report["layer_plan"]["metric"].get<std::string>()
        << ")\n";
  }
  detail::write_text(paths.report_txt(), txt.str());
}

} // namespace cdmoe
