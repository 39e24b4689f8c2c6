#pragma once

// Core retrieval-head discovery.
//
// For every head, a temperature-scaled softmax measures how strongly the head
// singles out the positive document among negatives (S_disc), and an entropy
// gate G_ent = 1 - lambda * H / ln(L_seq) down-weights heads whose query-averaged
// attention is spread thin. Heads are ranked by Phi = S_disc * G_ent; the top K
// form the core set and their deepest layer is the early-exit depth.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "headrank/data.hpp"
#include "headrank/io.hpp"
#include "headrank/scoring.hpp"
#include "headrank/transformer.hpp"
#include "json.hpp"

namespace headrank {

struct SelectionConfig {
  double tau = 0.001;
  double lambda = 0.1;
  std::size_t k = 8;
  std::size_t negative_cap = 15;
  bool use_entropy_gate = true;  // false reproduces the "without G_ent" ablation

  void validate() const {
    if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
    if (lambda < 0.0 || lambda > 1.0) throw ConfigError("lambda must lie in [0, 1]");
    if (k < 1) throw ConfigError("k must be >= 1");
  }
};

inline double discriminative_score(double alpha_pos, std::span<const double> alpha_negs, double tau) {
  if (alpha_negs.empty()) throw ConfigError("discriminative_score: at least one negative is required");
  if (!(tau > 0.0)) throw ConfigError("discriminative_score: tau must be > 0");
  double mx = alpha_pos;
  for (double a : alpha_negs) mx = std::max(mx, a);
  const double num = std::exp((alpha_pos - mx) / tau);
  double den = num;
  for (double a : alpha_negs) den += std::exp((a - mx) / tau);
  return num / den;
}

inline double entropy_gate(const Matrix& attn, const TokenRange& query, double lambda) {
  const auto dist = query_averaged(attn, query);
  const std::size_t len = dist.size();
  if (len <= 1) return 1.0;
  double h = 0.0;
  for (double p : dist) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return 1.0 - lambda * h / std::log(static_cast<double>(len));
}

inline double entropy_gate(const AttentionTrace& trace, const HeadId& head, const TokenRange& query, double lambda) {
  return entropy_gate(trace.at(head), query, lambda);
}

struct HeadScore {
  HeadId id;
  double s_disc = 0.0;
  double g_ent = 1.0;
  double phi = 0.0;
};

// One row per head, in (layer, head) order.
struct HeadScoreTable {
  std::vector<HeadScore> entries;
  std::size_t instances = 0;

  const HeadScore& at(const HeadId& id) const {
    for (const auto& e : entries) {
      if (e.id == id) return e;
    }
    throw Error("selection", "head " + id.label() + " absent from score table");
  }
};

// Phi desc, then layer asc, then head asc.
inline bool head_rank_before(const HeadScore& a, const HeadScore& b) {
  if (a.phi != b.phi) return a.phi > b.phi;
  return a.id < b.id;
}

inline HeadSet top_k(const HeadScoreTable& table, std::size_t k) {
  if (k < 1) throw ConfigError("k must be >= 1");
  std::vector<HeadScore> sorted = table.entries;
  std::sort(sorted.begin(), sorted.end(), head_rank_before);
  HeadSet hs;
  for (std::size_t i = 0; i < std::min(k, sorted.size()); ++i) {
    hs.heads.push_back({sorted[i].id, sorted[i].phi});
    hs.l_max = std::max(hs.l_max, sorted[i].id.layer);
  }
  return hs;
}

// Running per-head means of S_disc and G_ent across instances. The table
// reports Phi = mean(S_disc) * mean(G_ent).
class HeadScoreAccumulator {
 public:
  explicit HeadScoreAccumulator(SelectionConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  // alpha: per-head document scores for the instance; trace/query: the scored
  // pass used for the entropy gate.
  void add(const HeadDocScores& alpha, const AttentionTrace& trace, const TokenRange& query, std::size_t positive,
           std::span<const std::size_t> negatives) {
    std::vector<double> negs(negatives.size());
    for (const auto& [id, a] : alpha.scores) {
      for (std::size_t i = 0; i < negatives.size(); ++i) negs[i] = a.at(negatives[i]);
      Sums& s = sums_[id];
      s.s_disc += discriminative_score(a.at(positive), negs, cfg_.tau);
      s.g_ent += cfg_.use_entropy_gate ? entropy_gate(trace.at(id), query, cfg_.lambda) : 1.0;
    }
    ++count_;
  }

  HeadScoreTable finish() const {
    if (count_ == 0) throw ConfigError("head selection needs a nonempty corpus");
    HeadScoreTable table;
    table.instances = count_;
    const double n = static_cast<double>(count_);
    for (const auto& [id, s] : sums_) {
      HeadScore e{id, s.s_disc / n, s.g_ent / n, 0.0};
      e.phi = e.s_disc * e.g_ent;
      table.entries.push_back(e);
    }
    return table;
  }

 private:
  struct Sums {
    double s_disc = 0.0;
    double g_ent = 0.0;
  };
  SelectionConfig cfg_;
  std::map<HeadId, Sums> sums_;
  std::size_t count_ = 0;
};

struct SelectionResult {
  HeadScoreTable table;
  HeadSet heads;
};

// Full-depth traces for every instance with a positive document; Phi averaged
// over the corpus in corpus order.
inline SelectionResult select_heads(std::span<const RankingInstance> corpus, const TransformerParams& params,
                                    const SelectionConfig& cfg, const ScoringConfig& scoring = {}) {
  cfg.validate();
  if (corpus.empty()) throw ConfigError("select_heads: empty corpus");
  HeadScoreAccumulator acc(cfg);
  const std::size_t depth = params.config().n_layers;
  for (const auto& inst : corpus) {
    const SelectionExample ex = make_selection_example(inst, cfg.negative_cap);
    const ScoringInput input = prepare_scoring_input(inst, scoring, params.config().max_seq_len);
    const AttentionTrace scored = prefill_trace(params, input.scored.tokens, depth);
    AttentionTrace base;
    if (scoring.calibrate) base = prefill_trace(params, input.baseline.tokens, depth);
    const HeadDocScores alpha = calibrated_scores(scored, base, input, scoring.calibrate);
    acc.add(alpha, scored, input.scored.layout.query, ex.positive, ex.negatives);
  }
  SelectionResult r;
  r.table = acc.finish();
  r.heads = top_k(r.table, cfg.k);
  return r;
}

struct OverlapReport {
  std::vector<HeadId> shared;
  std::size_t k = 0;
};

inline OverlapReport head_overlap(const HeadSet& before, const HeadSet& after) {
  OverlapReport r;
  r.k = after.heads.size();
  const auto prev = before.ids();
  for (const auto& h : after.heads) {
    if (prev.contains(h.id)) r.shared.push_back(h.id);
  }
  return r;
}

struct RecalibrationResult {
  SelectionResult selection;
  OverlapReport overlap;
};

// Re-runs selection on updated weights and reports overlap with the previous set.
inline RecalibrationResult recalibrate(const TransformerParams& trained, std::span<const RankingInstance> corpus,
                                       const SelectionConfig& cfg, const HeadSet& previous,
                                       const ScoringConfig& scoring = {}) {
  RecalibrationResult r;
  r.selection = select_heads(corpus, trained, cfg, scoring);
  r.overlap = head_overlap(previous, r.selection.heads);
  return r;
}

// Before/after table in rank order with a shared marker column.
inline std::string overlap_table(const HeadSet& before, const HeadSet& after) {
  const auto prev = before.ids();
  const auto next = after.ids();
  std::string out = "rank\tbefore\tafter\tshared\n";
  const std::size_t rows = std::max(before.heads.size(), after.heads.size());
  for (std::size_t i = 0; i < rows; ++i) {
    out += std::to_string(i + 1) + "\t";
    out += i < before.heads.size() ? before.heads[i].id.label() : "-";
    out += "\t";
    out += i < after.heads.size() ? after.heads[i].id.label() : "-";
    out += "\t";
    out += (i < after.heads.size() && prev.contains(after.heads[i].id)) ? "yes" : "";
    out += "\n";
  }
  std::size_t shared = 0;
  for (const auto& id : next) shared += prev.contains(id) ? 1 : 0;
  out += "shared\t" + std::to_string(shared) + "/" + std::to_string(after.heads.size()) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// HeadSet file (JSON)

struct HeadSetProvenance {
  std::string corpus_id;
  std::string params_checksum;
};

inline std::string serialize_head_set(const HeadSet& hs, const SelectionConfig& cfg, const HeadSetProvenance& prov) {
  nlohmann::ordered_json j;
  j["format"] = "headrank.headset";
  j["version"] = 1;
  j["config"] = {{"tau", cfg.tau}, {"lambda", cfg.lambda}, {"k", cfg.k}, {"negative_cap", cfg.negative_cap},
                 {"use_entropy_gate", cfg.use_entropy_gate}};
  auto& heads = j["heads"] = nlohmann::ordered_json::array();
  for (const auto& h : hs.heads) {
    heads.push_back({{"layer", h.id.layer}, {"head", h.id.head}, {"phi", h.phi}});
  }
  j["l_max"] = hs.l_max;
  j["provenance"] = {{"corpus_id", prov.corpus_id}, {"params_checksum", prov.params_checksum}};
  return j.dump(2) + "\n";
}

struct HeadSetFile {
  HeadSet heads;
  SelectionConfig config;
  HeadSetProvenance provenance;
};

inline HeadSetFile parse_head_set(std::string_view text) {
  HeadSetFile f;
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("format") != "headrank.headset") throw ParseError("not a head-set file");
    const auto& c = j.at("config");
    f.config.tau = c.at("tau").get<double>();
    f.config.lambda = c.at("lambda").get<double>();
    f.config.k = c.at("k").get<std::size_t>();
    f.config.negative_cap = c.value("negative_cap", std::size_t{15});
    f.config.use_entropy_gate = c.value("use_entropy_gate", true);
    for (const auto& h : j.at("heads")) {
      f.heads.heads.push_back({{h.at("layer").get<std::size_t>(), h.at("head").get<std::size_t>()},
                               h.at("phi").get<double>()});
    }
    f.heads.l_max = j.at("l_max").get<std::size_t>();
    f.provenance.corpus_id = j.at("provenance").at("corpus_id").get<std::string>();
    f.provenance.params_checksum = j.at("provenance").at("params_checksum").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("head-set file: ") + e.what());
  }
  std::size_t deepest = 0;
  for (const auto& h : f.heads.heads) deepest = std::max(deepest, h.id.layer);
  if (f.heads.heads.empty() || deepest != f.heads.l_max) throw ParseError("head-set file: l_max inconsistent with heads");
  return f;
}

}  // namespace headrank
