#pragma once

// Decoding-free listwise reranking. Each query costs one scored prefill and one
// content-free baseline prefill, both stopped at the deepest core-head layer.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "headrank/data.hpp"
#include "headrank/io.hpp"
#include "headrank/scoring.hpp"
#include "headrank/transformer.hpp"
#include "headrank/zones.hpp"

namespace headrank {

struct RankedList {
  std::string query_id;
  std::vector<std::string> ordering;  // doc ids, best first
  std::vector<double> scores;         // aligned with ordering
  double elapsed_seconds = 0.0;
  std::size_t depth_used = 0;

  double score_of(const std::string& doc_id) const {
    for (std::size_t i = 0; i < ordering.size(); ++i) {
      if (ordering[i] == doc_id) return scores[i];
    }
    throw Error("rerank", "document " + doc_id + " absent from ranked list of " + query_id);
  }
};

// Indices into `scores` sorted by score descending, ties by original rank ascending.
inline std::vector<std::size_t> order_by_score(std::span<const double> scores,
                                               std::span<const std::size_t> original_ranks) {
  if (scores.size() != original_ranks.size()) throw ShapeError("order_by_score: size mismatch");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return original_ranks[a] < original_ranks[b];
  });
  return idx;
}

inline RankedList make_ranked_list(const RankingInstance& inst, std::span<const double> scores) {
  if (scores.size() != inst.size()) throw ShapeError("make_ranked_list: one score per candidate required");
  std::vector<std::size_t> ranks;
  for (const auto& c : inst.candidates) ranks.push_back(c.original_rank);
  RankedList out;
  out.query_id = inst.query_id;
  for (std::size_t i : order_by_score(scores, ranks)) {
    out.ordering.push_back(inst.candidates[i].doc_id);
    out.scores.push_back(scores[i]);
  }
  return out;
}

// True iff `list` orders exactly the candidates of `inst`, each once, with
// non-increasing scores.
inline bool is_valid_permutation(const RankedList& list, const RankingInstance& inst) {
  if (list.ordering.size() != inst.size() || list.scores.size() != inst.size()) return false;
  std::vector<std::string> a = list.ordering;
  std::vector<std::string> b;
  for (const auto& c : inst.candidates) b.push_back(c.doc_id);
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  if (a != b || std::adjacent_find(a.begin(), a.end()) != a.end()) return false;
  for (std::size_t i = 1; i < list.scores.size(); ++i) {
    if (list.scores[i] > list.scores[i - 1]) return false;
  }
  return true;
}

struct RerankConfig {
  ScoringConfig scoring;
  std::optional<std::size_t> depth_override;  // any depth in [l_max, n_layers]
};

// Reranker bound to one set of weights and core heads. Baseline attention for a
// document list does not depend on the query, so it is cached by token layout.
class Reranker {
 public:
  Reranker(const TransformerParams& params, HeadSet heads, RerankConfig cfg = {})
      : params_(params), heads_(std::move(heads)), cfg_(std::move(cfg)), keep_(heads_.ids()) {
    if (heads_.heads.empty()) throw ConfigError("rerank: empty head set");
    const std::size_t layers = params_.config().n_layers;
    if (heads_.l_max < 1 || heads_.l_max > layers) {
      throw ConfigError("rerank: head set depth " + std::to_string(heads_.l_max) + " exceeds model depth " +
                        std::to_string(layers));
    }
    for (const auto& h : heads_.heads) {
      if (h.id.layer > heads_.l_max || h.id.head >= params_.config().n_heads) {
        throw ConfigError("rerank: head " + h.id.label() + " does not exist in this model or lies below l_max");
      }
    }
    depth_ = cfg_.depth_override.value_or(heads_.l_max);
    if (depth_ < heads_.l_max || depth_ > layers) {
      throw ConfigError("rerank: depth override " + std::to_string(depth_) + " must lie in [" +
                        std::to_string(heads_.l_max) + ", " + std::to_string(layers) + "]");
    }
  }

  std::size_t depth() const noexcept { return depth_; }
  std::size_t prefills() const noexcept { return prefills_; }
  std::size_t baseline_cache_hits() const noexcept { return cache_hits_; }

  // Calibrated aggregate score per candidate, in candidate order.
  std::vector<double> score(const RankingInstance& inst) {
    const ScoringInput input = prepare_scoring_input(inst, cfg_.scoring, params_.config().max_seq_len);
    const AttentionTrace scored = prefill_trace(params_, input.scored.tokens, depth_, &keep_);
    ++prefills_;
    HeadDocScores raw = score_per_head(scored, input.scored.layout);
    if (!cfg_.scoring.calibrate) return aggregate_core(raw, heads_);
    auto it = baseline_cache_.find(input.baseline.tokens);
    if (it == baseline_cache_.end()) {
      const AttentionTrace base = prefill_trace(params_, input.baseline.tokens, depth_, &keep_);
      ++prefills_;
      it = baseline_cache_.emplace(input.baseline.tokens, score_per_head(base, input.baseline.layout)).first;
    } else {
      ++cache_hits_;
    }
    HeadDocScores baseline = it->second;
    baseline.doc_ids = raw.doc_ids;  // same layout, possibly different doc ids
    return aggregate_core(calibrate(raw, baseline), heads_);
  }

  RankedList rerank(const RankingInstance& inst) {
    const auto start = std::chrono::steady_clock::now();
    const auto s = score(inst);
    RankedList out = make_ranked_list(inst, s);
    out.depth_used = depth_;
    out.elapsed_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return out;
  }

  std::vector<RankedList> rerank_all(std::span<const RankingInstance> corpus) {
    std::vector<RankedList> out;
    out.reserve(corpus.size());
    for (const auto& inst : corpus) out.push_back(rerank(inst));
    return out;
  }

 private:
  const TransformerParams& params_;
  HeadSet heads_;
  RerankConfig cfg_;
  std::set<HeadId> keep_;
  std::size_t depth_ = 0;
  std::size_t prefills_ = 0;
  std::size_t cache_hits_ = 0;
  std::map<std::vector<TokenId>, HeadDocScores> baseline_cache_;
};

inline RankedList rerank(const RankingInstance& inst, const TransformerParams& params, const HeadSet& heads,
                         const RerankConfig& cfg = {}) {
  Reranker r(params, heads, cfg);
  return r.rerank(inst);
}

// First-stage order as a ranked list (score = -original_rank).
inline RankedList first_stage_list(const RankingInstance& inst) {
  std::vector<double> s;
  for (const auto& c : inst.candidates) s.push_back(-static_cast<double>(c.original_rank));
  return make_ranked_list(inst, s);
}

// ---------------------------------------------------------------------------
// TREC run file: "qid Q0 docid rank score tag", rank from 1, score printed
// with %.17g so it round-trips exactly.

inline std::string serialize_run(std::span<const RankedList> lists, const std::string& tag) {
  if (tag.empty() || tag.find_first_of(" \t\n") != std::string::npos) throw ConfigError("run tag must be one word");
  std::string out;
  for (const auto& l : lists) {
    for (std::size_t i = 0; i < l.ordering.size(); ++i) {
      out += l.query_id + " Q0 " + l.ordering[i] + " " + std::to_string(i + 1) + " " +
             io::format_double(l.scores[i]) + " " + tag + "\n";
    }
  }
  return out;
}

struct RunFile {
  std::string tag;
  std::vector<RankedList> lists;  // in file order of first appearance

  const RankedList* find(const std::string& qid) const {
    for (const auto& l : lists) {
      if (l.query_id == qid) return &l;
    }
    return nullptr;
  }
};

inline RunFile parse_run(std::string_view text) {
  RunFile run;
  std::map<std::string, std::size_t> index;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    const std::string line(text.substr(pos, nl - pos));
    pos = nl + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ss(line);
    std::string qid, q0, doc, rank_s, score_s, tag, extra;
    if (!(ss >> qid >> q0 >> doc >> rank_s >> score_s >> tag) || (ss >> extra)) {
      throw ParseError("run file line " + std::to_string(line_no) + ": expected 6 columns");
    }
    std::size_t rank = 0;
    double score = 0.0;
    try {
      std::size_t used = 0;
      rank = std::stoul(rank_s, &used);
      if (used != rank_s.size()) throw std::invalid_argument(rank_s);
      score = std::stod(score_s, &used);
      if (used != score_s.size()) throw std::invalid_argument(score_s);
    } catch (const std::exception&) {
      throw ParseError("run file line " + std::to_string(line_no) + ": malformed rank or score");
    }
    if (run.tag.empty()) run.tag = tag;
    auto [it, fresh] = index.emplace(qid, run.lists.size());
    if (fresh) run.lists.push_back(RankedList{qid, {}, {}, 0.0, 0});
    RankedList& l = run.lists[it->second];
    if (rank != l.ordering.size() + 1) {
      throw ParseError("run file line " + std::to_string(line_no) + ": rank " + std::to_string(rank) +
                       " out of sequence for query " + qid);
    }
    l.ordering.push_back(doc);
    l.scores.push_back(score);
  }
  return run;
}

inline RunFile load_run(const std::filesystem::path& path) { return parse_run(io::read_file(path)); }

}  // namespace headrank
