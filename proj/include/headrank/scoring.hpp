#pragma once

// Sequence layout and attention-mass scoring.
//
// The prompt is [instruction | doc_1 | ... | doc_N | query]; documents precede
// the query so causal attention lets every query token see every document.
// A document's score for one head is the attention mass the query tokens place
// on its span, averaged over query tokens.

#include <algorithm>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "headrank/autodiff.hpp"
#include "headrank/data.hpp"
#include "headrank/errors.hpp"
#include "headrank/tokenizer.hpp"
#include "headrank/transformer.hpp"

namespace headrank {

struct TokenRange {
  std::size_t begin = 0;
  std::size_t end = 0;  // exclusive
  std::size_t size() const noexcept { return end - begin; }
  bool contains(std::size_t i) const noexcept { return i >= begin && i < end; }
  friend bool operator==(const TokenRange&, const TokenRange&) = default;
};

struct DocSpan {
  std::string doc_id;
  TokenRange range;
  friend bool operator==(const DocSpan&, const DocSpan&) = default;
};

struct SpanLayout {
  TokenRange instruction;
  std::vector<DocSpan> docs;
  TokenRange query;
  std::size_t seq_len = 0;

  // Disjoint, contiguous, ordered instruction < docs < query, covering [0, seq_len).
  void validate() const {
    std::size_t cursor = 0;
    auto step = [&](const TokenRange& r, const std::string& what) {
      if (r.begin != cursor || r.end < r.begin) throw ShapeError("layout: " + what + " span is not contiguous");
      cursor = r.end;
    };
    step(instruction, "instruction");
    std::set<std::string> ids;
    for (const auto& d : docs) {
      if (d.range.size() == 0) throw ShapeError("layout: document " + d.doc_id + " has an empty span");
      if (!ids.insert(d.doc_id).second) throw ShapeError("layout: duplicate doc id " + d.doc_id);
      step(d.range, "document " + d.doc_id);
    }
    if (query.size() == 0) throw ShapeError("layout: empty query span");
    step(query, "query");
    if (cursor != seq_len) throw ShapeError("layout: spans do not cover the sequence");
  }

  friend bool operator==(const SpanLayout&, const SpanLayout&) = default;
};

struct LaidOutSequence {
  std::vector<TokenId> tokens;
  SpanLayout layout;
};

struct DocText {
  std::string doc_id;
  std::string text;
};

// Instruction gets an [INST] marker, each document a leading [DOC], the query a
// leading [QRY]; markers belong to the span they open.
inline LaidOutSequence layout_sequence(std::string_view instruction, std::span<const DocText> docs,
                                       std::string_view query, const Tokenizer& tok, std::size_t max_seq_len) {
  if (docs.empty()) throw ConfigError("layout_sequence: at least one document is required");
  LaidOutSequence out;
  auto& t = out.tokens;
  auto& lay = out.layout;
  t.push_back(Tokenizer::kInstruction);
  for (TokenId id : tok.encode(instruction)) t.push_back(id);
  lay.instruction = {0, t.size()};
  for (const auto& d : docs) {
    const auto body = tok.encode(d.text);
    if (body.empty()) throw ConfigError("layout_sequence: document " + d.doc_id + " has empty text");
    const std::size_t begin = t.size();
    t.push_back(Tokenizer::kDocument);
    t.insert(t.end(), body.begin(), body.end());
    lay.docs.push_back({d.doc_id, {begin, t.size()}});
  }
  const auto q = tok.encode(query);
  if (q.empty()) throw ConfigError("layout_sequence: query is empty");
  const std::size_t qbegin = t.size();
  t.push_back(Tokenizer::kQuery);
  t.insert(t.end(), q.begin(), q.end());
  lay.query = {qbegin, t.size()};
  lay.seq_len = t.size();
  if (t.size() > max_seq_len) {
    throw ConfigError("layout_sequence: sequence length " + std::to_string(t.size()) + " exceeds max_seq_len " +
                      std::to_string(max_seq_len));
  }
  lay.validate();
  return out;
}

struct ScoringConfig {
  std::string instruction = "rank passages by relevance to query";
  std::string calibration_query = "n/a";  // content-free query for the baseline pass
  bool calibrate = true;
};

// Scored sequence plus its content-free calibration twin.
struct ScoringInput {
  LaidOutSequence scored;
  LaidOutSequence baseline;
};

inline ScoringInput prepare_scoring_input(const RankingInstance& inst, const ScoringConfig& cfg, std::size_t max_seq_len,
                                          const Tokenizer& tok = Tokenizer::standard()) {
  std::vector<DocText> docs;
  docs.reserve(inst.candidates.size());
  for (const auto& c : inst.candidates) docs.push_back({c.doc_id, c.text});
  ScoringInput in;
  in.scored = layout_sequence(cfg.instruction, docs, inst.query_text, tok, max_seq_len);
  in.baseline = layout_sequence(cfg.instruction, docs, cfg.calibration_query, tok, max_seq_len);
  return in;
}

// alpha[(l,h)][d] for documents in layout order.
struct HeadDocScores {
  std::vector<std::string> doc_ids;
  std::map<HeadId, std::vector<double>> scores;

  const std::vector<double>& at(const HeadId& h) const {
    auto it = scores.find(h);
    if (it == scores.end()) throw Error("scoring", "no scores for head " + h.label());
    return it->second;
  }
};

// Ranked (layer, head) set with its selection scores and early-exit depth.
struct RankedHead {
  HeadId id;
  double phi = 0.0;
  friend bool operator==(const RankedHead&, const RankedHead&) = default;
};

struct HeadSet {
  std::vector<RankedHead> heads;
  std::size_t l_max = 0;

  std::set<HeadId> ids() const {
    std::set<HeadId> s;
    for (const auto& h : heads) s.insert(h.id);
    return s;
  }
  static HeadSet from_ids(std::span<const HeadId> ids) {
    HeadSet hs;
    for (const auto& id : ids) {
      hs.heads.push_back({id, 0.0});
      hs.l_max = std::max(hs.l_max, id.layer);
    }
    return hs;
  }
  friend bool operator==(const HeadSet&, const HeadSet&) = default;
};

// Query-averaged attention row: A_t = mean_{i in query} A[i][t].
inline std::vector<double> query_averaged(const Matrix& attn, const TokenRange& query) {
  if (query.size() == 0 || query.end > attn.rows()) {
    throw ShapeError("query span [" + std::to_string(query.begin) + ", " + std::to_string(query.end) +
                     ") out of range for attention map " + attn.shape());
  }
  std::vector<double> avg(attn.cols(), 0.0);
  for (std::size_t i = query.begin; i < query.end; ++i) {
    for (std::size_t t = 0; t < attn.cols(); ++t) avg[t] += attn(i, t);
  }
  const double n = static_cast<double>(query.size());
  for (double& v : avg) v /= n;
  return avg;
}

inline std::vector<double> score_head(const Matrix& attn, const SpanLayout& layout) {
  if (attn.rows() != layout.seq_len || attn.cols() != layout.seq_len) {
    throw ShapeError("attention map " + attn.shape() + " inconsistent with layout of length " +
                     std::to_string(layout.seq_len));
  }
  const auto avg = query_averaged(attn, layout.query);
  std::vector<double> alpha;
  alpha.reserve(layout.docs.size());
  for (const auto& d : layout.docs) {
    if (d.range.end > layout.seq_len) throw ShapeError("document span of " + d.doc_id + " out of range");
    double s = 0.0;
    for (std::size_t j = d.range.begin; j < d.range.end; ++j) s += avg[j];
    alpha.push_back(s);
  }
  return alpha;
}

inline HeadDocScores score_per_head(const AttentionTrace& trace, const SpanLayout& layout) {
  if (trace.seq_len != layout.seq_len) {
    throw ShapeError("trace length " + std::to_string(trace.seq_len) + " does not match layout length " +
                     std::to_string(layout.seq_len));
  }
  HeadDocScores out;
  for (const auto& d : layout.docs) out.doc_ids.push_back(d.doc_id);
  for (const auto& [id, attn] : trace.maps) out.scores.emplace(id, score_head(attn, layout));
  return out;
}

// Entrywise raw - baseline over identical heads and documents.
inline HeadDocScores calibrate(const HeadDocScores& raw, const HeadDocScores& baseline) {
  if (raw.doc_ids != baseline.doc_ids) throw ShapeError("calibrate: document sets differ");
  HeadDocScores out;
  out.doc_ids = raw.doc_ids;
  for (const auto& [id, r] : raw.scores) {
    auto it = baseline.scores.find(id);
    if (it == baseline.scores.end()) throw ShapeError("calibrate: baseline lacks head " + id.label());
    std::vector<double> c(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) c[i] = r[i] - it->second[i];
    out.scores.emplace(id, std::move(c));
  }
  if (out.scores.size() != baseline.scores.size()) throw ShapeError("calibrate: head sets differ");
  return out;
}

// s_d = sum over core heads, in document order.
inline std::vector<double> aggregate_core(const HeadDocScores& scores, const HeadSet& heads) {
  std::vector<double> s(scores.doc_ids.size(), 0.0);
  for (const auto& h : heads.heads) {
    auto it = scores.scores.find(h.id);
    if (it == scores.scores.end()) throw Error("scoring", "head " + h.id.label() + " missing from scores");
    for (std::size_t d = 0; d < s.size(); ++d) s[d] += it->second[d];
  }
  return s;
}

// ---------------------------------------------------------------------------
// Differentiable counterparts

inline std::vector<ad::Var> score_head_graph(const ad::Var& attn, const SpanLayout& layout) {
  const ad::Var avg = ad::row_mean(attn, layout.query.begin, layout.query.end);
  std::vector<ad::Var> alpha;
  alpha.reserve(layout.docs.size());
  for (const auto& d : layout.docs) alpha.push_back(ad::range_sum(avg, d.range.begin, d.range.end));
  return alpha;
}

// Calibrated core-head scores (1 x N) for one instance, built on `tape`.
// Both prefills stop at the head set's l_max.
inline ad::Var core_scores_graph(ad::Tape& tape, const BoundModel& model, const ScoringInput& input,
                                 const HeadSet& heads, bool calibrate_scores) {
  const auto keep = heads.ids();
  const std::size_t depth = heads.l_max;
  const Prefill scored = prefill(tape, model, input.scored.tokens, depth, &keep);
  std::optional<Prefill> base;
  if (calibrate_scores) base = prefill(tape, model, input.baseline.tokens, depth, &keep);
  const std::size_t n = input.scored.layout.docs.size();
  std::vector<ad::Var> totals(n);
  for (const auto& h : heads.heads) {
    auto alpha = score_head_graph(scored.graph.at(h.id), input.scored.layout);
    if (base) {
      const auto beta = score_head_graph(base->graph.at(h.id), input.baseline.layout);
      for (std::size_t d = 0; d < n; ++d) alpha[d] = ad::sub(alpha[d], beta[d]);
    }
    for (std::size_t d = 0; d < n; ++d) totals[d] = totals[d].valid() ? ad::add(totals[d], alpha[d]) : alpha[d];
  }
  return ad::stack(totals);
}

// Value-only calibrated per-head scores for every head present in both traces.
inline HeadDocScores calibrated_scores(const AttentionTrace& scored, const AttentionTrace& baseline,
                                       const ScoringInput& input, bool calibrate_scores) {
  HeadDocScores raw = score_per_head(scored, input.scored.layout);
  if (!calibrate_scores) return raw;
  return calibrate(raw, score_per_head(baseline, input.baseline.layout));
}

}  // namespace headrank
