#pragma once

// Artifact manifests (checksum-linked DAG), diagnosis tables and the static
// attention heatmap report.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "headrank/io.hpp"
#include "headrank/metrics.hpp"
#include "headrank/rerank.hpp"
#include "headrank/scoring.hpp"
#include "headrank/tokenizer.hpp"
#include "json.hpp"

namespace headrank {

// ---------------------------------------------------------------------------
// Manifest: every command writes manifest.json beside its outputs. Inputs are
// recorded with the checksum they had when consumed; outputs with the checksum
// they had when written.

inline constexpr const char* kManifestName = "manifest.json";

struct ManifestEntry {
  std::string role;
  std::string path;  // inputs: as given on the command line; outputs: file name
  std::string sha256;
};

struct Manifest {
  std::string command;
  std::string config_sha256;
  std::vector<ManifestEntry> inputs;
  std::vector<ManifestEntry> outputs;

  const ManifestEntry* output(const std::string& name) const {
    for (const auto& e : outputs) {
      if (e.path == name) return &e;
    }
    return nullptr;
  }
};

inline std::string serialize_manifest(const Manifest& m) {
  nlohmann::ordered_json j;
  j["format"] = "headrank.manifest";
  j["version"] = 1;
  j["command"] = m.command;
  j["config_sha256"] = m.config_sha256;
  auto list = [](const std::vector<ManifestEntry>& es) {
    auto a = nlohmann::ordered_json::array();
    for (const auto& e : es) a.push_back({{"role", e.role}, {"path", e.path}, {"sha256", e.sha256}});
    return a;
  };
  j["inputs"] = list(m.inputs);
  j["outputs"] = list(m.outputs);
  return j.dump(2) + "\n";
}

inline Manifest parse_manifest(std::string_view text) {
  Manifest m;
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("format") != "headrank.manifest") throw ParseError("not a manifest");
    m.command = j.at("command").get<std::string>();
    m.config_sha256 = j.at("config_sha256").get<std::string>();
    for (const auto& e : j.at("inputs")) {
      m.inputs.push_back({e.at("role").get<std::string>(), e.at("path").get<std::string>(),
                          e.at("sha256").get<std::string>()});
    }
    for (const auto& e : j.at("outputs")) {
      m.outputs.push_back({e.at("role").get<std::string>(), e.at("path").get<std::string>(),
                           e.at("sha256").get<std::string>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("manifest: ") + e.what());
  }
  return m;
}

inline std::optional<Manifest> manifest_for(const std::filesystem::path& artifact) {
  const auto mpath = artifact.parent_path() / kManifestName;
  if (!std::filesystem::exists(mpath)) return std::nullopt;
  return parse_manifest(io::read_file(mpath));
}

// Checks an artifact against the manifest of the directory that produced it
// and returns its current checksum. Files without a producing manifest are
// external inputs and are accepted as they are.
inline std::string verify_artifact(const std::filesystem::path& artifact) {
  if (!std::filesystem::exists(artifact)) throw IoError("input not found: " + artifact.string());
  const std::string actual = io::sha256_file(artifact);
  if (const auto m = manifest_for(artifact)) {
    const ManifestEntry* e = m->output(artifact.filename().string());
    if (e != nullptr && e->sha256 != actual) {
      throw ChecksumError("artifact " + artifact.string() + " does not match its manifest: expected " + e->sha256 +
                          ", actual " + actual);
    }
  }
  return actual;
}

// Walks the manifest DAG from `manifest_path`: every output must still carry
// its recorded checksum, every input must still match the checksum recorded at
// consumption, and producers of inputs are validated recursively.
inline void validate_manifest_dag(const std::filesystem::path& manifest_path,
                                  std::set<std::filesystem::path>* visited = nullptr) {
  std::set<std::filesystem::path> local;
  if (visited == nullptr) visited = &local;
  const auto canon = std::filesystem::weakly_canonical(manifest_path);
  if (!visited->insert(canon).second) return;
  const Manifest m = parse_manifest(io::read_file(canon));
  const auto dir = canon.parent_path();
  for (const auto& o : m.outputs) {
    const auto p = dir / o.path;
    if (!std::filesystem::exists(p)) throw IoError("manifest output missing: " + p.string());
    const std::string actual = io::sha256_file(p);
    if (actual != o.sha256) {
      throw ChecksumError("artifact " + p.string() + " was modified: expected " + o.sha256 + ", actual " + actual);
    }
  }
  for (const auto& in : m.inputs) {
    std::filesystem::path p = in.path;
    if (!std::filesystem::exists(p)) throw IoError("manifest input missing: " + p.string());
    const std::string actual = io::sha256_file(p);
    if (actual != in.sha256) {
      throw ChecksumError("input " + p.string() + " of " + canon.string() + " is stale: expected " + in.sha256 +
                          ", actual " + actual);
    }
    const auto producer = p.parent_path() / kManifestName;
    if (std::filesystem::exists(producer)) validate_manifest_dag(producer, visited);
  }
}

// ---------------------------------------------------------------------------
// Diagnosis table across runs

struct DiagnosisRow {
  std::string run_tag;
  MetricReport report;
};

inline std::string diagnosis_table(std::span<const DiagnosisRow> rows) {
  auto fmt = [](const std::optional<double>& v) { return v ? io::format_double(*v, 6) : std::string("absent"); };
  std::string out = "run\tndcg\tmid_zone_norm_std\tpromo_relevant_pct\tpromo_irrelevant_pct\tselectivity_gap_pp\n";
  for (const auto& r : rows) {
    const auto& rep = r.report;
    out += r.run_tag + "\t" + io::format_double(rep.mean_ndcg.begin()->second, 6) + "\t" +
           io::format_double(rep.mean_mid_zone_norm_std, 6) + "\t" + fmt(rep.promotion.relevant_pct) + "\t" +
           fmt(rep.promotion.irrelevant_pct) + "\t" + fmt(rep.promotion.gap_pp) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention heatmap

// Summed core-head query-averaged attention per token position; with a
// baseline the calibrated difference is used. Floored at zero.
inline std::vector<double> token_weights(const AttentionTrace& scored, const AttentionTrace* baseline,
                                         const ScoringInput& input, const HeadSet& heads) {
  const std::size_t n = input.scored.layout.seq_len;
  std::vector<double> w(n, 0.0);
  for (const auto& h : heads.heads) {
    if (!scored.contains(h.id) || (baseline != nullptr && !baseline->contains(h.id))) {
      throw ConfigError("visualize: trace does not cover head " + h.id.label());
    }
    const auto a = query_averaged(scored.at(h.id), input.scored.layout.query);
    std::vector<double> b(n, 0.0);
    if (baseline != nullptr) b = query_averaged(baseline->at(h.id), input.baseline.layout.query);
    const std::size_t doc_end = input.scored.layout.docs.back().range.end;
    for (std::size_t t = 0; t < doc_end; ++t) w[t] += a[t] - b[t];
  }
  for (double& v : w) v = std::max(v, 0.0);
  return w;
}

// Linear intensity after per-passage max normalization; below 5% of the max
// renders unshaded, and an all-zero passage stays unshaded.
inline std::vector<double> passage_intensities(std::span<const double> weights) {
  double mx = 0.0;
  for (double v : weights) mx = std::max(mx, v);
  std::vector<double> out(weights.size(), 0.0);
  if (mx <= 0.0) return out;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double r = weights[i] / mx;
    out[i] = r < 0.05 ? 0.0 : r;
  }
  return out;
}

inline std::string html_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&#39;"; break;
      default: out += c;
    }
  }
  return out;
}

struct MethodRanks {
  std::string name;
  const RunFile* run = nullptr;
};

struct HeatmapInput {
  const RankingInstance* instance = nullptr;
  const ScoringInput* input = nullptr;
  const AttentionTrace* scored = nullptr;
  const AttentionTrace* baseline = nullptr;  // null when calibration is off
  const HeadSet* heads = nullptr;
  const RankedList* ranking = nullptr;  // passages shown in this order
  std::size_t top_m = 5;
  std::vector<MethodRanks> methods;
};

inline std::string render_heatmap(const HeatmapInput& in, const Tokenizer& tok = Tokenizer::standard()) {
  if (in.scored == nullptr) throw ConfigError("visualize: missing attention trace");
  if (in.instance == nullptr || in.input == nullptr || in.heads == nullptr || in.ranking == nullptr) {
    throw ConfigError("visualize: incomplete input");
  }
  const auto weights = token_weights(*in.scored, in.baseline, *in.input, *in.heads);
  const auto& layout = in.input->scored.layout;
  const auto& tokens = in.input->scored.tokens;
  std::map<std::string, const Candidate*> cand;
  std::map<std::string, std::size_t> span_index;
  for (const auto& c : in.instance->candidates) cand[c.doc_id] = &c;
  for (std::size_t i = 0; i < layout.docs.size(); ++i) span_index[layout.docs[i].doc_id] = i;

  std::string h;
  h += "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n";
  h += "<title>Attention heatmap: " + html_escape(in.instance->query_id) + "</title>\n";
  h += "<style>\nbody{font-family:sans-serif;margin:2em}table{border-collapse:collapse}"
       "td,th{border:1px solid #ccc;padding:4px 8px;vertical-align:top}"
       ".tok{padding:1px 2px;border-radius:2px}\n</style>\n</head>\n<body>\n";
  h += "<h1>Query " + html_escape(in.instance->query_id) + ": " + html_escape(in.instance->query_text) + "</h1>\n";
  h += "<p>Core heads:";
  for (const auto& hd : in.heads->heads) h += " " + hd.id.label();
  h += "</p>\n<table>\n<tr><th>rank</th><th>first stage</th>";
  for (const auto& m : in.methods) h += "<th>" + html_escape(m.name) + "</th>";
  h += "<th>grade</th><th>score</th><th>passage</th></tr>\n";
  const std::size_t shown = std::min(in.top_m, in.ranking->ordering.size());
  for (std::size_t r = 0; r < shown; ++r) {
    const std::string& doc = in.ranking->ordering[r];
    const Candidate& c = *cand.at(doc);
    const TokenRange span = layout.docs.at(span_index.at(doc)).range;
    // Skip the leading document marker.
    std::vector<double> w(weights.begin() + static_cast<std::ptrdiff_t>(span.begin + 1),
                          weights.begin() + static_cast<std::ptrdiff_t>(span.end));
    const auto intensity = passage_intensities(w);
    h += "<tr><td>" + std::to_string(r + 1) + "</td><td>" + std::to_string(c.original_rank) + "</td>";
    for (const auto& m : in.methods) {
      std::string cell = "-";
      if (const RankedList* l = m.run ? m.run->find(in.instance->query_id) : nullptr) {
        for (std::size_t i = 0; i < l->ordering.size(); ++i) {
          if (l->ordering[i] == doc) cell = std::to_string(i + 1);
        }
      }
      h += "<td>" + cell + "</td>";
    }
    h += "<td>" + std::to_string(c.grade) + "</td><td>" + io::format_double(in.ranking->scores[r], 6) + "</td><td>";
    for (std::size_t t = 0; t < w.size(); ++t) {
      const TokenId id = tokens[span.begin + 1 + t];
      const std::string text = tok.token_text(id);
      char style[96];
      std::snprintf(style, sizeof style, "background:rgba(106,27,154,%.3f)", intensity[t]);
      const bool word = id >= Tokenizer::kWordBase;
      const bool prev_word = t > 0 && tokens[span.begin + t] >= Tokenizer::kWordBase;
      if (t > 0 && (word || prev_word)) h += " ";
      h += "<span class=\"tok\" style=\"" + std::string(style) + "\" data-w=\"" + io::format_double(intensity[t], 6) +
           "\">" + html_escape(text) + "</span>";
    }
    h += "</td></tr>\n";
  }
  h += "</table>\n</body>\n</html>\n";
  return h;
}

}  // namespace headrank
