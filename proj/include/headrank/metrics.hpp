#pragma once

// Ranking quality (NDCG@k, Recall@k) and homogenization diagnostics
// (middle-zone normalized score spread, middle-to-front promotion rates).

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "headrank/data.hpp"
#include "headrank/rerank.hpp"
#include "headrank/zones.hpp"
#include "json.hpp"

namespace headrank {

// A metric value plus a flag for degenerate inputs (no relevant documents,
// empty gold set, too few middle-zone documents).
struct MetricValue {
  double value = 0.0;
  bool degenerate = false;
};

inline double gain(int grade) { return std::exp2(static_cast<double>(grade)) - 1.0; }
inline double discount(std::size_t rank) { return 1.0 / std::log2(static_cast<double>(rank) + 1.0); }

// grades: relevance of the ranked documents, best first.
inline MetricValue ndcg_at_k(std::span<const int> grades, std::size_t k) {
  if (k < 1) throw ConfigError("ndcg_at_k: k must be >= 1");
  double dcg = 0.0;
  for (std::size_t i = 0; i < std::min(k, grades.size()); ++i) dcg += gain(grades[i]) * discount(i + 1);
  std::vector<int> ideal(grades.begin(), grades.end());
  std::sort(ideal.begin(), ideal.end(), std::greater<>());
  double idcg = 0.0;
  for (std::size_t i = 0; i < std::min(k, ideal.size()); ++i) idcg += gain(ideal[i]) * discount(i + 1);
  if (idcg == 0.0) return {0.0, true};
  return {dcg / idcg, false};
}

inline std::vector<int> grades_in_order(const RankedList& list, const std::map<std::string, int>& grades) {
  std::vector<int> g;
  g.reserve(list.ordering.size());
  for (const auto& d : list.ordering) {
    auto it = grades.find(d);
    g.push_back(it == grades.end() ? 0 : it->second);
  }
  return g;
}

inline MetricValue ndcg_at_k(const RankedList& list, const std::map<std::string, int>& grades, std::size_t k) {
  return ndcg_at_k(grades_in_order(list, grades), k);
}

inline MetricValue recall_at_k(std::span<const std::string> ordering, const std::set<std::string>& gold,
                               std::size_t k) {
  if (k < 1) throw ConfigError("recall_at_k: k must be >= 1");
  if (gold.empty()) return {0.0, true};
  std::size_t hit = 0;
  for (std::size_t i = 0; i < std::min(k, ordering.size()); ++i) hit += gold.contains(ordering[i]) ? 1 : 0;
  return {static_cast<double>(hit) / static_cast<double>(gold.size()), false};
}

inline MetricValue recall_at_k(const RankedList& list, const std::set<std::string>& gold, std::size_t k) {
  return recall_at_k(list.ordering, gold, k);
}

// Population std of the middle-zone scores over (mean |score| of the whole list + 1e-8).
inline MetricValue mid_zone_norm_std(std::span<const double> scores, std::span<const std::size_t> mid_indices) {
  if (mid_indices.size() < 2) return {0.0, true};
  double mean = 0.0;
  for (std::size_t i : mid_indices) {
    if (i >= scores.size()) throw ShapeError("mid_zone_norm_std: index out of range");
    mean += scores[i];
  }
  mean /= static_cast<double>(mid_indices.size());
  double var = 0.0;
  for (std::size_t i : mid_indices) var += (scores[i] - mean) * (scores[i] - mean);
  var /= static_cast<double>(mid_indices.size());
  double abs_mean = 0.0;
  for (double s : scores) abs_mean += std::abs(s);
  abs_mean /= static_cast<double>(scores.size());
  return {std::sqrt(var) / (abs_mean + 1e-8), false};
}

// Scores in candidate order and middle-zone candidate indices for one query.
inline MetricValue mid_zone_norm_std(const RankingInstance& inst, const RankedList& list) {
  std::vector<double> scores;
  std::vector<std::size_t> mid;
  for (std::size_t i = 0; i < inst.size(); ++i) {
    scores.push_back(list.score_of(inst.candidates[i].doc_id));
    if (in_middle_zone(inst.candidates[i].original_rank, inst.size())) mid.push_back(i);
  }
  return mid_zone_norm_std(scores, mid);
}

struct PromotionRates {
  std::optional<double> relevant_pct;
  std::optional<double> irrelevant_pct;
  std::optional<double> gap_pp;
  std::size_t relevant_total = 0;
  std::size_t relevant_promoted = 0;
  std::size_t irrelevant_total = 0;
  std::size_t irrelevant_promoted = 0;
};

struct RankedInstance {
  const RankingInstance* instance = nullptr;
  const RankedList* list = nullptr;
};

// Middle-zone documents (by first-stage rank) that land in the top quartile of
// the reranked list, split by relevance (grade >= threshold).
inline PromotionRates promotion_rates(std::span<const RankedInstance> ranked, int relevance_threshold) {
  PromotionRates r;
  for (const auto& ri : ranked) {
    const RankingInstance& inst = *ri.instance;
    const std::size_t n = inst.size();
    std::map<std::string, std::size_t> position;
    for (std::size_t i = 0; i < ri.list->ordering.size(); ++i) position[ri.list->ordering[i]] = i + 1;
    for (const auto& c : inst.candidates) {
      if (!in_middle_zone(c.original_rank, n)) continue;
      auto it = position.find(c.doc_id);
      if (it == position.end()) throw Error("metrics", "document " + c.doc_id + " missing from ranked list");
      const bool promoted = in_top_quartile(it->second, n);
      if (c.grade >= relevance_threshold) {
        ++r.relevant_total;
        r.relevant_promoted += promoted ? 1 : 0;
      } else {
        ++r.irrelevant_total;
        r.irrelevant_promoted += promoted ? 1 : 0;
      }
    }
  }
  if (r.relevant_total + r.irrelevant_total == 0) throw ConfigError("promotion_rates: no middle-zone documents");
  if (r.relevant_total > 0) r.relevant_pct = 100.0 * r.relevant_promoted / static_cast<double>(r.relevant_total);
  if (r.irrelevant_total > 0) {
    r.irrelevant_pct = 100.0 * r.irrelevant_promoted / static_cast<double>(r.irrelevant_total);
  }
  if (r.relevant_pct && r.irrelevant_pct) r.gap_pp = *r.relevant_pct - *r.irrelevant_pct;
  return r;
}

// ---------------------------------------------------------------------------
// Metric report

struct EvalConfig {
  std::vector<std::size_t> ndcg_k{10};
  std::vector<std::size_t> recall_k{2, 5};
  int relevance_threshold = 2;  // promotion analysis
  int gold_threshold = 1;       // recall gold set: grade >= this

  void validate() const {
    if (ndcg_k.empty()) throw ConfigError("eval: at least one NDCG cutoff required");
    for (auto k : ndcg_k) {
      if (k < 1) throw ConfigError("eval: NDCG cutoff must be >= 1");
    }
    for (auto k : recall_k) {
      if (k < 1) throw ConfigError("eval: recall cutoff must be >= 1");
    }
  }
};

struct QueryMetrics {
  std::string query_id;
  std::map<std::size_t, MetricValue> ndcg;
  std::map<std::size_t, MetricValue> recall;
  MetricValue mid_zone_norm_std;
};

struct MetricReport {
  std::string run_tag;
  std::vector<QueryMetrics> queries;
  std::map<std::size_t, double> mean_ndcg;
  std::map<std::size_t, double> mean_recall;
  double mean_mid_zone_norm_std = 0.0;
  std::size_t degenerate_ndcg = 0;
  std::size_t degenerate_recall = 0;
  std::size_t degenerate_mid = 0;
  PromotionRates promotion;

  double ndcg(std::size_t k) const {
    auto it = mean_ndcg.find(k);
    if (it == mean_ndcg.end()) throw ConfigError("report has no NDCG@" + std::to_string(k));
    return it->second;
  }
};

// Every query of `corpus` must have a list in `run`. Means include degenerate
// queries at their 0 value; mid-zone std means skip degenerate queries.
inline MetricReport evaluate(std::span<const RankingInstance> corpus, const RunFile& run, const EvalConfig& cfg) {
  cfg.validate();
  if (corpus.empty()) throw ConfigError("evaluate: empty corpus");
  MetricReport rep;
  rep.run_tag = run.tag;
  std::vector<RankedInstance> ranked;
  double mid_sum = 0.0;
  std::size_t mid_n = 0;
  for (const auto& inst : corpus) {
    const RankedList* list = run.find(inst.query_id);
    if (list == nullptr) throw ConfigError("evaluate: run has no ranking for query " + inst.query_id);
    if (!is_valid_permutation(*list, inst)) {
      throw ConfigError("evaluate: ranking for query " + inst.query_id + " is not a permutation of its candidates");
    }
    ranked.push_back({&inst, list});
    std::map<std::string, int> grades;
    std::set<std::string> gold;
    for (const auto& c : inst.candidates) {
      grades[c.doc_id] = c.grade;
      if (c.grade >= cfg.gold_threshold) gold.insert(c.doc_id);
    }
    QueryMetrics q;
    q.query_id = inst.query_id;
    for (auto k : cfg.ndcg_k) {
      q.ndcg[k] = ndcg_at_k(*list, grades, k);
      rep.mean_ndcg[k] += q.ndcg[k].value;
      rep.degenerate_ndcg += q.ndcg[k].degenerate ? 1 : 0;
    }
    for (auto k : cfg.recall_k) {
      q.recall[k] = recall_at_k(*list, gold, k);
      rep.mean_recall[k] += q.recall[k].value;
      rep.degenerate_recall += q.recall[k].degenerate ? 1 : 0;
    }
    q.mid_zone_norm_std = inst.size() >= 4 ? mid_zone_norm_std(inst, *list) : MetricValue{0.0, true};
    if (q.mid_zone_norm_std.degenerate) {
      ++rep.degenerate_mid;
    } else {
      mid_sum += q.mid_zone_norm_std.value;
      ++mid_n;
    }
    rep.queries.push_back(std::move(q));
  }
  const double n = static_cast<double>(corpus.size());
  for (auto& [k, v] : rep.mean_ndcg) v /= n;
  for (auto& [k, v] : rep.mean_recall) v /= n;
  rep.mean_mid_zone_norm_std = mid_n == 0 ? 0.0 : mid_sum / static_cast<double>(mid_n);
  rep.promotion = promotion_rates(ranked, cfg.relevance_threshold);
  return rep;
}

inline nlohmann::ordered_json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

inline std::string serialize_report(const MetricReport& rep) {
  nlohmann::ordered_json j;
  j["format"] = "headrank.metrics";
  j["version"] = 1;
  j["run_tag"] = rep.run_tag;
  auto& s = j["summary"];
  s["queries"] = rep.queries.size();
  for (const auto& [k, v] : rep.mean_ndcg) s["ndcg@" + std::to_string(k)] = v;
  for (const auto& [k, v] : rep.mean_recall) s["recall@" + std::to_string(k)] = v;
  s["mid_zone_norm_std"] = rep.mean_mid_zone_norm_std;
  s["promo_relevant_pct"] = optional_json(rep.promotion.relevant_pct);
  s["promo_irrelevant_pct"] = optional_json(rep.promotion.irrelevant_pct);
  s["selectivity_gap_pp"] = optional_json(rep.promotion.gap_pp);
  s["promo_counts"] = {{"relevant_total", rep.promotion.relevant_total},
                       {"relevant_promoted", rep.promotion.relevant_promoted},
                       {"irrelevant_total", rep.promotion.irrelevant_total},
                       {"irrelevant_promoted", rep.promotion.irrelevant_promoted}};
  s["degenerate"] = {{"ndcg", rep.degenerate_ndcg}, {"recall", rep.degenerate_recall}, {"mid_zone", rep.degenerate_mid}};
  auto& rows = j["queries"] = nlohmann::ordered_json::array();
  for (const auto& q : rep.queries) {
    nlohmann::ordered_json r;
    r["query_id"] = q.query_id;
    for (const auto& [k, v] : q.ndcg) {
      r["ndcg@" + std::to_string(k)] = v.value;
      if (v.degenerate) r["ndcg_flag"] = "no_relevant";
    }
    for (const auto& [k, v] : q.recall) {
      r["recall@" + std::to_string(k)] = v.value;
      if (v.degenerate) r["recall_flag"] = "empty_gold";
    }
    r["mid_zone_norm_std"] = q.mid_zone_norm_std.value;
    if (q.mid_zone_norm_std.degenerate) r["mid_zone_flag"] = "too_few_middle_docs";
    rows.push_back(std::move(r));
  }
  return j.dump(2) + "\n";
}

}  // namespace headrank
