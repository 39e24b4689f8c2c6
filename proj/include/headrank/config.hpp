#pragma once

// Run configuration: one JSON-with-comments file holding every hyperparameter.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "headrank/data.hpp"
#include "headrank/head_selection.hpp"
#include "headrank/io.hpp"
#include "headrank/metrics.hpp"
#include "headrank/scoring.hpp"
#include "headrank/training.hpp"
#include "headrank/transformer.hpp"
#include "json.hpp"

namespace headrank {

struct DataConfig {
  std::string corpus;  // JSONL path; empty selects the synthetic generator
  std::string qrels;   // optional qrels overriding candidate grades
  SyntheticConfig synthetic;
};

struct PipelineConfig {
  std::size_t recalibration_rounds = 1;
};

struct RunConfig {
  std::uint64_t seed = 7;
  DataConfig data;
  ModelConfig model;
  SelectionConfig selection;
  LossConfig loss;
  ScoringConfig scoring;
  EvalConfig eval;
  PipelineConfig pipeline;

  // Propagates the global seed into every seeded component.
  void apply_seed(std::uint64_t s) {
    seed = s;
    data.synthetic.seed = s;
    model.seed = s;
    loss.seed = s;
  }

  void validate() const {
    data.synthetic.validate();
    model.validate();
    selection.validate();
    loss.validate();
    eval.validate();
    if (!data.corpus.empty() && !std::filesystem::exists(data.corpus)) {
      throw ConfigError("data.corpus does not exist: " + data.corpus);
    }
    if (!data.qrels.empty() && !std::filesystem::exists(data.qrels)) {
      throw ConfigError("data.qrels does not exist: " + data.qrels);
    }
  }
};

namespace detail {

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline Objective objective_from_string(const std::string& s) {
  if (s == "headrank") return Objective::headrank;
  if (s == "ranknet") return Objective::ranknet;
  throw ConfigError("loss.objective must be \"headrank\" or \"ranknet\", got \"" + s + "\"");
}

inline std::string to_string(Objective o) { return o == Objective::headrank ? "headrank" : "ranknet"; }

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const std::string& where) {
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* name : known) ok = ok || k == name;
    if (!ok) throw ConfigError("unknown key \"" + k + "\" in " + where);
  }
}

}  // namespace detail

inline RunConfig parse_run_config(std::string_view text) {
  RunConfig c;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
  try {
    using detail::read_opt;
    detail::reject_unknown(j, {"seed", "data", "model", "selection", "loss", "scoring", "eval", "pipeline"}, "config");
    std::uint64_t seed = c.seed;
    read_opt(j, "seed", seed);
    if (j.contains("data")) {
      const auto& d = j["data"];
      detail::reject_unknown(d, {"corpus", "qrels", "synthetic"}, "data");
      read_opt(d, "corpus", c.data.corpus);
      read_opt(d, "qrels", c.data.qrels);
      if (d.contains("synthetic")) {
        const auto& s = d["synthetic"];
        detail::reject_unknown(s, {"n_queries", "n_test", "n_docs_per_query", "grade_levels", "doc_length",
                                   "retriever_noise"}, "data.synthetic");
        read_opt(s, "n_queries", c.data.synthetic.n_queries);
        read_opt(s, "n_test", c.data.synthetic.n_test);
        read_opt(s, "n_docs_per_query", c.data.synthetic.n_docs_per_query);
        read_opt(s, "grade_levels", c.data.synthetic.grade_levels);
        read_opt(s, "doc_length", c.data.synthetic.doc_length);
        read_opt(s, "retriever_noise", c.data.synthetic.retriever_noise);
      }
    }
    if (j.contains("model")) {
      const auto& m = j["model"];
      detail::reject_unknown(m, {"n_layers", "n_heads", "d_model", "d_ff", "max_seq_len"}, "model");
      read_opt(m, "n_layers", c.model.n_layers);
      read_opt(m, "n_heads", c.model.n_heads);
      read_opt(m, "d_model", c.model.d_model);
      read_opt(m, "d_ff", c.model.d_ff);
      read_opt(m, "max_seq_len", c.model.max_seq_len);
    }
    if (j.contains("selection")) {
      const auto& s = j["selection"];
      detail::reject_unknown(s, {"tau", "lambda", "k", "negative_cap", "entropy_gate"}, "selection");
      read_opt(s, "tau", c.selection.tau);
      read_opt(s, "lambda", c.selection.lambda);
      read_opt(s, "k", c.selection.k);
      read_opt(s, "negative_cap", c.selection.negative_cap);
      read_opt(s, "entropy_gate", c.selection.use_entropy_gate);
    }
    if (j.contains("loss")) {
      const auto& l = j["loss"];
      detail::reject_unknown(l, {"objective", "beta", "alpha", "margin", "gamma", "eta", "grad_clip", "learning_rate",
                                 "epochs", "batch_size", "pair_cap", "adam_beta1", "adam_beta2", "adam_eps"},
                             "loss");
      if (l.contains("objective")) c.loss.objective = detail::objective_from_string(l["objective"].get<std::string>());
      read_opt(l, "beta", c.loss.beta);
      read_opt(l, "alpha", c.loss.alpha);
      read_opt(l, "margin", c.loss.margin);
      read_opt(l, "gamma", c.loss.gamma);
      read_opt(l, "eta", c.loss.eta);
      read_opt(l, "grad_clip", c.loss.grad_clip);
      read_opt(l, "learning_rate", c.loss.learning_rate);
      read_opt(l, "epochs", c.loss.epochs);
      read_opt(l, "batch_size", c.loss.batch_size);
      read_opt(l, "pair_cap", c.loss.pair_cap);
      read_opt(l, "adam_beta1", c.loss.adam_beta1);
      read_opt(l, "adam_beta2", c.loss.adam_beta2);
      read_opt(l, "adam_eps", c.loss.adam_eps);
    }
    if (j.contains("scoring")) {
      const auto& s = j["scoring"];
      detail::reject_unknown(s, {"instruction", "calibration_query", "calibrate"}, "scoring");
      read_opt(s, "instruction", c.scoring.instruction);
      read_opt(s, "calibration_query", c.scoring.calibration_query);
      read_opt(s, "calibrate", c.scoring.calibrate);
    }
    if (j.contains("eval")) {
      const auto& e = j["eval"];
      detail::reject_unknown(e, {"ndcg_k", "recall_k", "relevance_threshold", "gold_threshold"}, "eval");
      read_opt(e, "ndcg_k", c.eval.ndcg_k);
      read_opt(e, "recall_k", c.eval.recall_k);
      read_opt(e, "relevance_threshold", c.eval.relevance_threshold);
      read_opt(e, "gold_threshold", c.eval.gold_threshold);
    }
    if (j.contains("pipeline")) {
      const auto& p = j["pipeline"];
      detail::reject_unknown(p, {"recalibration_rounds"}, "pipeline");
      read_opt(p, "recalibration_rounds", c.pipeline.recalibration_rounds);
    }
    c.apply_seed(seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

// Fully resolved configuration; parse_run_config(serialize_run_config(c)) == c.
inline std::string serialize_run_config(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["seed"] = c.seed;
  j["data"]["corpus"] = c.data.corpus;
  j["data"]["qrels"] = c.data.qrels;
  const auto& s = c.data.synthetic;
  j["data"]["synthetic"] = {{"n_queries", s.n_queries},           {"n_test", s.n_test},
                            {"n_docs_per_query", s.n_docs_per_query}, {"grade_levels", s.grade_levels},
                            {"doc_length", s.doc_length},         {"retriever_noise", s.retriever_noise}};
  j["model"] = {{"n_layers", c.model.n_layers}, {"n_heads", c.model.n_heads},         {"d_model", c.model.d_model},
                {"d_ff", c.model.d_ff},         {"max_seq_len", c.model.max_seq_len}};
  j["selection"] = {{"tau", c.selection.tau},
                    {"lambda", c.selection.lambda},
                    {"k", c.selection.k},
                    {"negative_cap", c.selection.negative_cap},
                    {"entropy_gate", c.selection.use_entropy_gate}};
  const auto& l = c.loss;
  j["loss"] = {{"objective", detail::to_string(l.objective)},
               {"beta", l.beta},
               {"alpha", l.alpha},
               {"margin", l.margin},
               {"gamma", l.gamma},
               {"eta", l.eta},
               {"grad_clip", l.grad_clip},
               {"learning_rate", l.learning_rate},
               {"epochs", l.epochs},
               {"batch_size", l.batch_size},
               {"pair_cap", l.pair_cap},
               {"adam_beta1", l.adam_beta1},
               {"adam_beta2", l.adam_beta2},
               {"adam_eps", l.adam_eps}};
  j["scoring"] = {{"instruction", c.scoring.instruction},
                  {"calibration_query", c.scoring.calibration_query},
                  {"calibrate", c.scoring.calibrate}};
  j["eval"] = {{"ndcg_k", c.eval.ndcg_k},
               {"recall_k", c.eval.recall_k},
               {"relevance_threshold", c.eval.relevance_threshold},
               {"gold_threshold", c.eval.gold_threshold}};
  j["pipeline"] = {{"recalibration_rounds", c.pipeline.recalibration_rounds}};
  return j.dump(2) + "\n";
}

struct LoadedConfig {
  RunConfig config;
  std::string text;  // file bytes, stored verbatim next to outputs
};

inline LoadedConfig load_run_config(const std::filesystem::path& path) {
  LoadedConfig lc;
  lc.text = io::read_file(path);
  lc.config = parse_run_config(lc.text);
  return lc;
}

}  // namespace headrank
