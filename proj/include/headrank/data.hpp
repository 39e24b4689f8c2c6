#pragma once

// Ranking instances, adjacent-level preference pairs, and the synthetic
// graded-relevance generator used for desk-scale runs.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "headrank/errors.hpp"
#include "headrank/io.hpp"
#include "headrank/tokenizer.hpp"
#include "json.hpp"

namespace headrank {

inline constexpr int kMaxGrade = 3;

enum class Split { train, dev, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::dev: return "dev";
    case Split::test: return "test";
  }
  return "train";
}

inline Split split_from_string(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "dev") return Split::dev;
  if (s == "test") return Split::test;
  throw ParseError("unknown split tag '" + std::string(s) + "'");
}

struct Candidate {
  std::string doc_id;
  std::string text;
  int grade = 0;
  std::size_t original_rank = 0;  // 1-based first-stage rank

  friend bool operator==(const Candidate&, const Candidate&) = default;
};

struct RankingInstance {
  std::string query_id;
  std::string query_text;
  std::vector<Candidate> candidates;  // in original_rank order
  Split split = Split::train;

  std::size_t size() const noexcept { return candidates.size(); }
  int max_grade() const {
    int g = 0;
    for (const auto& c : candidates) g = std::max(g, c.grade);
    return g;
  }

  // Ranks must be a bijection onto 1..N, listed in order; doc ids unique.
  void validate(int grade_cap = kMaxGrade) const {
    std::set<std::string> seen;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      const Candidate& c = candidates[i];
      if (!seen.insert(c.doc_id).second) {
        throw ParseError("query " + query_id + ": duplicate doc id '" + c.doc_id + "'");
      }
      if (c.original_rank != i + 1) {
        throw ParseError("query " + query_id + ": original ranks must be 1..N in order (doc '" + c.doc_id +
                         "' has rank " + std::to_string(c.original_rank) + ")");
      }
      if (c.grade < 0 || c.grade > grade_cap) {
        throw ParseError("query " + query_id + ": grade " + std::to_string(c.grade) + " outside [0, " +
                         std::to_string(grade_cap) + "]");
      }
    }
  }

  friend bool operator==(const RankingInstance&, const RankingInstance&) = default;
};

struct PreferencePair {
  std::string query_id;
  std::string chosen_doc_id;
  std::string rejected_doc_id;
  int grade_chosen = 0;
  int grade_rejected = 0;
  std::size_t chosen_index = 0;    // position in RankingInstance::candidates
  std::size_t rejected_index = 0;

  friend bool operator==(const PreferencePair&, const PreferencePair&) = default;
};

// Adjacent-Level Preference Sampling: keep (a, b) iff grade(a) == grade(b) + 1.
// Wider gaps are discarded. Order is (chosen rank, rejected rank).
inline std::vector<PreferencePair> build_pairs(const RankingInstance& inst) {
  std::vector<PreferencePair> pairs;
  for (std::size_t a = 0; a < inst.candidates.size(); ++a) {
    for (std::size_t b = 0; b < inst.candidates.size(); ++b) {
      const Candidate& ca = inst.candidates[a];
      const Candidate& cb = inst.candidates[b];
      if (ca.grade != cb.grade + 1) continue;
      pairs.push_back({inst.query_id, ca.doc_id, cb.doc_id, ca.grade, cb.grade, a, b});
    }
  }
  return pairs;
}

namespace detail {
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}
}  // namespace detail

// Seeded subsample down to `cap` pairs, preserving enumeration order.
inline std::vector<PreferencePair> cap_pairs(std::vector<PreferencePair> pairs, std::size_t cap, std::uint64_t seed) {
  if (cap == 0 || pairs.size() <= cap) return pairs;
  const std::string qid = pairs.front().query_id;
  std::mt19937_64 rng(seed ^ detail::fnv1a(qid));
  std::vector<std::size_t> idx(pairs.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(cap);
  std::sort(idx.begin(), idx.end());
  std::vector<PreferencePair> kept;
  kept.reserve(cap);
  for (std::size_t i : idx) kept.push_back(std::move(pairs[i]));
  return kept;
}

// One head-selection example: a designated positive and strictly-lower-graded negatives.
struct SelectionExample {
  const RankingInstance* instance = nullptr;
  std::size_t positive = 0;
  std::vector<std::size_t> negatives;
};

// Positive = highest grade (earliest original rank on ties); negatives are the
// first `negative_cap` strictly-lower-graded candidates by original rank.
inline SelectionExample make_selection_example(const RankingInstance& inst, std::size_t negative_cap = 15) {
  if (inst.candidates.empty()) throw ParseError("query " + inst.query_id + " has no candidates");
  std::size_t pos = 0;
  for (std::size_t i = 1; i < inst.candidates.size(); ++i) {
    if (inst.candidates[i].grade > inst.candidates[pos].grade) pos = i;
  }
  if (inst.candidates[pos].grade <= 0) {
    throw ParseError("query " + inst.query_id + " has no positive document for head selection");
  }
  SelectionExample ex{&inst, pos, {}};
  for (std::size_t i = 0; i < inst.candidates.size() && ex.negatives.size() < negative_cap; ++i) {
    if (inst.candidates[i].grade < inst.candidates[pos].grade) ex.negatives.push_back(i);
  }
  if (ex.negatives.empty()) throw ParseError("query " + inst.query_id + " has no negative documents");
  return ex;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

struct SyntheticConfig {
  std::uint64_t seed = 7;
  std::size_t n_queries = 250;
  std::size_t n_test = 50;  // the last n_test queries are tagged test
  std::size_t n_docs_per_query = 20;
  int grade_levels = 4;  // grades 0..grade_levels-1
  std::size_t doc_length = 6;
  double retriever_noise = 2.0;  // std-dev of first-stage score noise

  void validate() const {
    if (n_docs_per_query < 4) throw ConfigError("n_docs_per_query must be >= 4");
    if (grade_levels < 2 || grade_levels - 1 > kMaxGrade) throw ConfigError("grade_levels must be in [2, 4]");
    if (n_queries == 0) throw ConfigError("n_queries must be positive");
    if (n_test > n_queries) throw ConfigError("n_test exceeds n_queries");
    if (doc_length < static_cast<std::size_t>(grade_levels - 1)) throw ConfigError("doc_length below max grade");
    if (retriever_noise < 0) throw ConfigError("retriever_noise must be non-negative");
  }
};

// Each query is a bag of (grade_levels - 1) topic keywords. A grade-g document
// plants g of them among filler drawn from function words and other topics.
// First-stage rank sorts by keyword overlap plus Gaussian noise, which pushes
// relevant documents into the middle of the list at a rate set by the noise.
inline std::vector<RankingInstance> generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  namespace V = vocabulary;
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int max_grade = cfg.grade_levels - 1;
  const std::size_t n_kw = static_cast<std::size_t>(max_grade);
  // Grade prior, heavier on low grades as in pooled judgments.
  static constexpr double kPrior[] = {0.45, 0.25, 0.18, 0.12};

  std::vector<RankingInstance> out;
  out.reserve(cfg.n_queries);
  for (std::size_t q = 0; q < cfg.n_queries; ++q) {
    RankingInstance inst;
    inst.query_id = "q" + std::to_string(q + 1);
    inst.split = q + cfg.n_test >= cfg.n_queries ? Split::test : Split::train;

    std::vector<std::size_t> topics(V::kTopicWords.size());
    std::iota(topics.begin(), topics.end(), 0);
    std::shuffle(topics.begin(), topics.end(), rng);
    std::vector<std::string_view> keywords;
    for (std::size_t k = 0; k < n_kw; ++k) keywords.push_back(V::kTopicWords[topics[k]]);
    for (std::size_t k = 0; k < n_kw; ++k) inst.query_text += (k ? " " : "") + std::string(keywords[k]);
    // Distractor pool: every other topic word plus function words.
    std::vector<std::string_view> filler(V::kFillerWords.begin(), V::kFillerWords.end());
    for (std::size_t k = n_kw; k < topics.size(); ++k) filler.push_back(V::kTopicWords[topics[k]]);

    double prior_total = 0.0;
    for (int g = 0; g <= max_grade; ++g) prior_total += kPrior[g];
    std::vector<int> grades(cfg.n_docs_per_query);
    for (int& g : grades) {
      double u = unit(rng) * prior_total;
      g = 0;
      while (g < max_grade && u >= kPrior[g]) u -= kPrior[g++];
    }
    if (*std::max_element(grades.begin(), grades.end()) < std::min(2, max_grade)) {
      grades[rng() % grades.size()] = std::min(2, max_grade);
    }

    struct Draft {
      Candidate cand;
      double first_stage = 0.0;
      std::size_t index = 0;
    };
    std::vector<Draft> drafts;
    for (std::size_t d = 0; d < cfg.n_docs_per_query; ++d) {
      const int g = grades[d];
      std::vector<std::string_view> words;
      std::vector<std::size_t> kw_idx(n_kw);
      std::iota(kw_idx.begin(), kw_idx.end(), 0);
      std::shuffle(kw_idx.begin(), kw_idx.end(), rng);
      for (int k = 0; k < g; ++k) words.push_back(keywords[kw_idx[static_cast<std::size_t>(k)]]);
      while (words.size() < cfg.doc_length) words.push_back(filler[rng() % filler.size()]);
      std::shuffle(words.begin(), words.end(), rng);
      Draft dr;
      dr.cand.doc_id = inst.query_id + "_d" + std::to_string(d + 1);
      for (std::size_t w = 0; w < words.size(); ++w) dr.cand.text += (w ? " " : "") + std::string(words[w]);
      dr.cand.grade = g;
      dr.first_stage = static_cast<double>(g) + cfg.retriever_noise * noise(rng);
      dr.index = d;
      drafts.push_back(std::move(dr));
    }
    std::stable_sort(drafts.begin(), drafts.end(), [](const Draft& a, const Draft& b) {
      return a.first_stage > b.first_stage;
    });
    for (std::size_t r = 0; r < drafts.size(); ++r) {
      drafts[r].cand.original_rank = r + 1;
      inst.candidates.push_back(std::move(drafts[r].cand));
    }
    out.push_back(std::move(inst));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus: one JSON object per line
//   {"query_id": str, "query": str, "split": str?, "candidates": [{"doc_id": str, "text": str, "rank": int,
//    "grade": int?}]}
// Candidates may appear in any order; they are sorted by rank on load.

inline std::string corpus_line(const RankingInstance& inst) {
  nlohmann::ordered_json j;
  j["query_id"] = inst.query_id;
  j["query"] = inst.query_text;
  j["split"] = to_string(inst.split);
  auto& cands = j["candidates"] = nlohmann::ordered_json::array();
  for (const auto& c : inst.candidates) {
    nlohmann::ordered_json cj;
    cj["doc_id"] = c.doc_id;
    cj["text"] = c.text;
    cj["rank"] = c.original_rank;
    cj["grade"] = c.grade;
    cands.push_back(std::move(cj));
  }
  return j.dump();
}

inline std::string serialize_corpus(const std::vector<RankingInstance>& instances) {
  std::string out;
  for (const auto& inst : instances) {
    out += corpus_line(inst);
    out += '\n';
  }
  return out;
}

inline void save_corpus(const std::filesystem::path& path, const std::vector<RankingInstance>& instances) {
  io::write_file(path, serialize_corpus(instances));
}

inline std::vector<RankingInstance> parse_corpus(std::string_view text) {
  std::vector<RankingInstance> out;
  std::set<std::string> qids;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    const std::string where = "corpus line " + std::to_string(line_no);
    RankingInstance inst;
    try {
      const auto j = nlohmann::json::parse(line);
      inst.query_id = j.at("query_id").get<std::string>();
      inst.query_text = j.at("query").get<std::string>();
      if (j.contains("split")) inst.split = split_from_string(j.at("split").get<std::string>());
      for (const auto& cj : j.at("candidates")) {
        Candidate c;
        c.doc_id = cj.at("doc_id").get<std::string>();
        c.text = cj.at("text").get<std::string>();
        const auto rank = cj.at("rank").get<long long>();
        if (rank < 1) throw ParseError("rank must be >= 1");
        c.original_rank = static_cast<std::size_t>(rank);
        c.grade = cj.contains("grade") ? cj.at("grade").get<int>() : 0;
        inst.candidates.push_back(std::move(c));
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(where + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError(where + ": " + e.what());
    }
    std::stable_sort(inst.candidates.begin(), inst.candidates.end(),
                     [](const Candidate& a, const Candidate& b) { return a.original_rank < b.original_rank; });
    try {
      inst.validate();
    } catch (const ParseError& e) {
      throw ParseError(where + ": " + e.what());
    }
    if (!qids.insert(inst.query_id).second) throw ParseError(where + ": duplicate query id " + inst.query_id);
    out.push_back(std::move(inst));
  }
  return out;
}

inline std::vector<RankingInstance> load_corpus(const std::filesystem::path& path) {
  return parse_corpus(io::read_file(path));
}

// ---------------------------------------------------------------------------
// Qrels: TREC four-column text "qid 0 docid grade", whitespace separated.

using Qrels = std::map<std::pair<std::string, std::string>, int>;

inline Qrels parse_qrels(std::string_view text) {
  Qrels q;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    std::string qid, iter, docid, grade_s, extra;
    if (!(ls >> qid >> iter >> docid >> grade_s) || (ls >> extra)) {
      throw ParseError("qrels line " + std::to_string(line_no) + ": expected 4 columns");
    }
    int grade = 0;
    try {
      std::size_t used = 0;
      grade = std::stoi(grade_s, &used);
      if (used != grade_s.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ParseError("qrels line " + std::to_string(line_no) + ": grade '" + grade_s + "' is not an integer");
    }
    if (!q.emplace(std::make_pair(qid, docid), grade).second) {
      throw ParseError("qrels line " + std::to_string(line_no) + ": duplicate (" + qid + ", " + docid + ")");
    }
  }
  return q;
}

inline Qrels load_qrels(const std::filesystem::path& path) { return parse_qrels(io::read_file(path)); }

inline std::string serialize_qrels(const std::vector<RankingInstance>& instances) {
  std::string out;
  for (const auto& inst : instances) {
    for (const auto& c : inst.candidates) {
      out += inst.query_id + " 0 " + c.doc_id + " " + std::to_string(c.grade) + "\n";
    }
  }
  return out;
}

// Joins grades by (qid, docid); candidates without a judgment get grade 0.
inline void apply_qrels(std::vector<RankingInstance>& instances, const Qrels& qrels) {
  for (auto& inst : instances) {
    for (auto& c : inst.candidates) {
      auto it = qrels.find({inst.query_id, c.doc_id});
      c.grade = it == qrels.end() ? 0 : it->second;
    }
    inst.validate();
  }
}

inline std::vector<RankingInstance> filter_split(const std::vector<RankingInstance>& all, Split split) {
  std::vector<RankingInstance> out;
  for (const auto& inst : all) {
    if (inst.split == split) out.push_back(inst);
  }
  return out;
}

}  // namespace headrank
