#pragma once

// Command implementations behind the `headrank` executable. Every command
// writes its outputs, the config file it ran with (verbatim), the resolved
// config and a manifest into its output directory.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "headrank/config.hpp"
#include "headrank/data.hpp"
#include "headrank/head_selection.hpp"
#include "headrank/io.hpp"
#include "headrank/metrics.hpp"
#include "headrank/reports.hpp"
#include "headrank/rerank.hpp"
#include "headrank/training.hpp"
#include "headrank/transformer.hpp"

namespace headrank::cli {

namespace fs = std::filesystem;

struct Options {
  std::string config;  // empty: built-in defaults
  std::optional<std::uint64_t> seed;
  fs::path out;
  std::optional<std::size_t> depth_override;
  std::string heads;
  std::optional<std::size_t> k;
  std::string corpus;
  std::string checkpoint;
  std::string split = "test";
  std::string tag;
  std::string query;
  std::vector<std::string> runs;
  std::size_t top_m = 5;
  std::ostream* log = &std::cout;
};

struct Context {
  RunConfig config;
  std::string config_text;
};

inline Context resolve(const Options& o) {
  Context c;
  if (o.config.empty()) {
    c.config_text = serialize_run_config(RunConfig{});
  } else {
    c.config_text = io::read_file(o.config);
  }
  c.config = parse_run_config(c.config_text);
  if (o.seed) c.config.apply_seed(*o.seed);
  if (o.k) c.config.selection.k = *o.k;
  c.config.validate();
  return c;
}

// Collects inputs (checksum-verified on read) and outputs for one command.
class Artifacts {
 public:
  Artifacts(std::string command, const Context& ctx, fs::path out) : ctx_(ctx), out_(std::move(out)) {
    manifest_.command = std::move(command);
    if (out_.empty()) throw ConfigError(manifest_.command + ": --out is required");
  }

  std::string input(const std::string& role, const std::string& path) {
    if (path.empty()) throw ConfigError(manifest_.command + ": missing input for " + role);
    const std::string sha = verify_artifact(path);
    manifest_.inputs.push_back({role, path, sha});
    return io::read_file(path);
  }

  void output(const std::string& role, const std::string& name, std::string bytes) {
    pending_.push_back({role, name, std::move(bytes)});
  }

  fs::path path(const std::string& name) const { return out_ / name; }

  void commit() {
    fs::create_directories(out_);
    pending_.push_back({"config", "config.jsonc", ctx_.config_text});
    pending_.push_back({"resolved_config", "resolved_config.json", serialize_run_config(ctx_.config)});
    manifest_.config_sha256 = io::sha256_hex(ctx_.config_text);
    for (auto& p : pending_) {
      io::write_file(out_ / p.name, p.bytes);
      manifest_.outputs.push_back({p.role, p.name, io::sha256_hex(p.bytes)});
    }
    io::write_file(out_ / kManifestName, serialize_manifest(manifest_));
  }

 private:
  struct Pending {
    std::string role;
    std::string name;
    std::string bytes;
  };
  const Context& ctx_;
  fs::path out_;
  Manifest manifest_;
  std::vector<Pending> pending_;
};

inline std::vector<RankingInstance> corpus_from(Artifacts& a, const std::string& path) {
  return parse_corpus(a.input("corpus", path));
}

inline Split parse_split(const std::string& s) {
  try {
    return split_from_string(s);
  } catch (const std::exception&) {
    throw ConfigError("--split must be train, dev or test, got \"" + s + "\"");
  }
}

inline std::string corpus_id(const std::vector<RankingInstance>& corpus) {
  return io::sha256_hex(serialize_corpus(corpus));
}

inline TransformerParams params_from(Artifacts& a, const std::string& path, const RunConfig& cfg) {
  if (path.empty()) return init_params(cfg.model);
  TransformerParams p = deserialize_checkpoint(a.input("checkpoint", path));
  const auto& m = p.config();
  if (m.n_layers != cfg.model.n_layers || m.n_heads != cfg.model.n_heads || m.d_model != cfg.model.d_model ||
      m.d_ff != cfg.model.d_ff) {
    throw ConfigError("checkpoint " + path + " does not match the model section of the config");
  }
  return p;
}

inline std::string head_score_table(const HeadScoreTable& t) {
  std::vector<HeadScore> rows = t.entries;
  std::sort(rows.begin(), rows.end(), head_rank_before);
  std::string out = "rank\thead\ts_disc\tg_ent\tphi\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out += std::to_string(i + 1) + "\t" + rows[i].id.label() + "\t" + io::format_double(rows[i].s_disc) + "\t" +
           io::format_double(rows[i].g_ent) + "\t" + io::format_double(rows[i].phi) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------

inline void gen_data(const Options& o) {
  const Context ctx = resolve(o);
  Artifacts a("gen-data", ctx, o.out);
  std::vector<RankingInstance> corpus;
  if (ctx.config.data.corpus.empty()) {
    corpus = generate_synthetic(ctx.config.data.synthetic);
  } else {
    corpus = parse_corpus(a.input("source_corpus", ctx.config.data.corpus));
    if (!ctx.config.data.qrels.empty()) apply_qrels(corpus, parse_qrels(a.input("qrels", ctx.config.data.qrels)));
  }
  a.output("corpus", "corpus.jsonl", serialize_corpus(corpus));
  a.output("qrels", "qrels.txt", serialize_qrels(corpus));
  a.commit();
  *o.log << "gen-data: " << corpus.size() << " queries -> " << a.path("corpus.jsonl").string() << "\n";
}

inline void select_heads_cmd(const Options& o) {
  const Context ctx = resolve(o);
  Artifacts a("select-heads", ctx, o.out);
  const auto corpus = corpus_from(a, o.corpus);
  const auto train_split = filter_split(corpus, Split::train);
  const TransformerParams params = params_from(a, o.checkpoint, ctx.config);
  const auto sel = select_heads(train_split, params, ctx.config.selection, ctx.config.scoring);
  const std::string ckpt = serialize_checkpoint(params);
  a.output("heads", "heads.json",
           serialize_head_set(sel.heads, ctx.config.selection, {corpus_id(corpus), io::sha256_hex(ckpt)}));
  a.output("head_scores", "head_scores.tsv", head_score_table(sel.table));
  if (o.checkpoint.empty()) a.output("checkpoint", "init.ckpt", ckpt);
  a.commit();
  *o.log << "select-heads: l_max=" << sel.heads.l_max << " heads";
  for (const auto& h : sel.heads.heads) *o.log << " " << h.id.label();
  *o.log << "\n";
}

inline void train_cmd(const Options& o) {
  const Context ctx = resolve(o);
  Artifacts a("train", ctx, o.out);
  const auto corpus = corpus_from(a, o.corpus);
  const HeadSet heads = parse_head_set(a.input("heads", o.heads)).heads;
  const TransformerParams init = params_from(a, o.checkpoint, ctx.config);
  const auto train_split = filter_split(corpus, Split::train);
  const auto start = std::chrono::steady_clock::now();
  const TrainingResult r = train(init, train_split, heads, ctx.config.loss, ctx.config.scoring);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  a.output("checkpoint", "model.ckpt", serialize_checkpoint(r.params));
  a.output("training_log", "train_log.jsonl", serialize_training_log(r.log));
  a.commit();
  *o.log << "train: " << r.log.size() << " steps in " << secs << " s";
  if (!r.log.empty()) *o.log << ", final total loss " << r.log.back().loss.total;
  if (r.degenerate_mid_zones > 0) *o.log << ", warning: " << r.degenerate_mid_zones << " queries with <2 middle docs";
  *o.log << "\n";
}

inline void recalibrate_cmd(const Options& o) {
  const Context ctx = resolve(o);
  Artifacts a("recalibrate", ctx, o.out);
  const auto corpus = corpus_from(a, o.corpus);
  const HeadSet previous = parse_head_set(a.input("heads", o.heads)).heads;
  const TransformerParams params = params_from(a, o.checkpoint, ctx.config);
  const auto train_split = filter_split(corpus, Split::train);
  const auto r = recalibrate(params, train_split, ctx.config.selection, previous, ctx.config.scoring);
  a.output("heads", "heads.json",
           serialize_head_set(r.selection.heads, ctx.config.selection,
                              {corpus_id(corpus), io::sha256_hex(serialize_checkpoint(params))}));
  a.output("head_scores", "head_scores.tsv", head_score_table(r.selection.table));
  a.output("overlap", "overlap.tsv", overlap_table(previous, r.selection.heads));
  a.commit();
  *o.log << "recalibrate: " << r.overlap.shared.size() << "/" << r.overlap.k << " heads retained, l_max "
         << previous.l_max << " -> " << r.selection.heads.l_max << "\n";
}

inline void rerank_cmd(const Options& o) {
  const Context ctx = resolve(o);
  Artifacts a("rerank", ctx, o.out);
  const auto corpus = corpus_from(a, o.corpus);
  const HeadSet heads = parse_head_set(a.input("heads", o.heads)).heads;
  const TransformerParams params = params_from(a, o.checkpoint, ctx.config);
  const auto subset = filter_split(corpus, parse_split(o.split));
  if (subset.empty()) throw ConfigError("rerank: split " + o.split + " has no queries");
  Reranker rr(params, heads, {ctx.config.scoring, o.depth_override});
  const auto start = std::chrono::steady_clock::now();
  const auto lists = rr.rerank_all(subset);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  for (std::size_t i = 0; i < lists.size(); ++i) {
    if (!is_valid_permutation(lists[i], subset[i])) throw Error("rerank", "invalid permutation for " + subset[i].query_id);
  }
  a.output("run", "run.txt", serialize_run(lists, o.tag.empty() ? "headrank" : o.tag));
  a.commit();
  *o.log << "rerank: " << lists.size() << " queries at depth " << rr.depth() << ", " << rr.prefills()
         << " prefills, " << secs << " s (" << (secs / static_cast<double>(lists.size())) * 1e3 << " ms/query)\n";
}

inline void eval_cmd(const Options& o) {
  const Context ctx = resolve(o);
  Artifacts a("eval", ctx, o.out);
  const auto corpus = corpus_from(a, o.corpus);
  if (o.runs.size() != 1) throw ConfigError("eval: exactly one --run is required");
  const RunFile run = parse_run(a.input("run", o.runs.front()));
  const auto subset = filter_split(corpus, parse_split(o.split));
  const MetricReport rep = evaluate(subset, run, ctx.config.eval);
  a.output("metrics", "metrics.json", serialize_report(rep));
  a.commit();
  *o.log << "eval: " << run.tag;
  for (const auto& [k, v] : rep.mean_ndcg) *o.log << " ndcg@" << k << "=" << v;
  *o.log << " mid_zone_norm_std=" << rep.mean_mid_zone_norm_std << "\n";
}

inline void diagnose_cmd(const Options& o) {
  const Context ctx = resolve(o);
  Artifacts a("diagnose", ctx, o.out);
  const auto corpus = corpus_from(a, o.corpus);
  if (o.runs.empty()) throw ConfigError("diagnose: at least one --run is required");
  const auto subset = filter_split(corpus, parse_split(o.split));
  std::vector<DiagnosisRow> rows;
  nlohmann::ordered_json reports = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < o.runs.size(); ++i) {
    const RunFile run = parse_run(a.input("run" + std::to_string(i + 1), o.runs[i]));
    MetricReport rep = evaluate(subset, run, ctx.config.eval);
    reports.push_back(nlohmann::ordered_json::parse(serialize_report(rep)));
    rows.push_back({run.tag, std::move(rep)});
  }
  const std::string table = diagnosis_table(rows);
  a.output("diagnosis", "diagnosis.tsv", table);
  a.output("reports", "diagnosis.json", reports.dump(2) + "\n");
  a.commit();
  *o.log << table;
}

inline void visualize_cmd(const Options& o) {
  const Context ctx = resolve(o);
  Artifacts a("visualize", ctx, o.out);
  const auto corpus = corpus_from(a, o.corpus);
  const HeadSet heads = parse_head_set(a.input("heads", o.heads)).heads;
  const TransformerParams params = params_from(a, o.checkpoint, ctx.config);
  const RankingInstance* inst = nullptr;
  for (const auto& q : corpus) {
    if (q.query_id == o.query || (o.query.empty() && inst == nullptr && q.split == parse_split(o.split))) inst = &q;
  }
  if (inst == nullptr) throw ConfigError("visualize: query \"" + o.query + "\" not found");
  std::vector<RunFile> runs;
  for (std::size_t i = 0; i < o.runs.size(); ++i) runs.push_back(parse_run(a.input("run" + std::to_string(i + 1), o.runs[i])));
  const ScoringInput input = prepare_scoring_input(*inst, ctx.config.scoring, params.config().max_seq_len);
  const auto keep = heads.ids();
  const AttentionTrace scored = prefill_trace(params, input.scored.tokens, heads.l_max, &keep);
  AttentionTrace base;
  if (ctx.config.scoring.calibrate) base = prefill_trace(params, input.baseline.tokens, heads.l_max, &keep);
  const RankedList ranking = rerank(*inst, params, heads, {ctx.config.scoring, std::nullopt});
  HeatmapInput hm;
  hm.instance = inst;
  hm.input = &input;
  hm.scored = &scored;
  hm.baseline = ctx.config.scoring.calibrate ? &base : nullptr;
  hm.heads = &heads;
  hm.ranking = &ranking;
  hm.top_m = o.top_m;
  for (const auto& r : runs) hm.methods.push_back({r.tag, &r});
  a.output("heatmap", "heatmap.html", render_heatmap(hm));
  a.commit();
  *o.log << "visualize: " << inst->query_id << " -> " << a.path("heatmap.html").string() << "\n";
}

// Full sequence: data, head selection, training, recalibration, reranking of
// the test split with untrained and trained weights, evaluation, diagnosis.
inline void pipeline_cmd(const Options& o) {
  if (o.config.empty()) throw ConfigError("pipeline: --config is required");
  const Context ctx = resolve(o);
  const fs::path root = o.out;
  if (root.empty()) throw ConfigError("pipeline: --out is required");
  auto phase = [&](const std::string& name, const std::function<void()>& fn) {
    try {
      fn();
    } catch (const Error& e) {
      throw Error(std::string(e.category()), "pipeline phase " + name + ": " + e.what());
    }
  };
  auto sub = [&](const std::string& dir) {
    Options s = o;
    s.out = root / dir;
    s.runs.clear();
    s.tag.clear();
    s.depth_override.reset();
    return s;
  };
  const std::string corpus = (root / "data" / "corpus.jsonl").string();
  phase("gen-data", [&] { gen_data(sub("data")); });
  phase("select-heads", [&] {
    Options s = sub("select");
    s.corpus = corpus;
    select_heads_cmd(s);
  });
  std::string heads = (root / "select" / "heads.json").string();
  const std::string init = (root / "select" / "init.ckpt").string();
  std::string ckpt = init;
  const std::size_t rounds = std::max<std::size_t>(1, ctx.config.pipeline.recalibration_rounds);
  for (std::size_t round = 1; round <= rounds; ++round) {
    const std::string suffix = rounds == 1 ? "" : "_" + std::to_string(round);
    phase("train" + suffix, [&] {
      Options s = sub("train" + suffix);
      s.corpus = corpus;
      s.heads = heads;
      s.checkpoint = ckpt;
      train_cmd(s);
    });
    ckpt = (root / ("train" + suffix) / "model.ckpt").string();
    phase("recalibrate" + suffix, [&] {
      Options s = sub("recalibrate" + suffix);
      s.corpus = corpus;
      s.heads = heads;
      s.checkpoint = ckpt;
      recalibrate_cmd(s);
    });
    heads = (root / ("recalibrate" + suffix) / "heads.json").string();
  }
  const std::string init_heads = (root / "select" / "heads.json").string();
  phase("rerank-untrained", [&] {
    Options s = sub("rerank_untrained");
    s.corpus = corpus;
    s.heads = init_heads;
    s.checkpoint = init;
    s.tag = "untrained";
    rerank_cmd(s);
  });
  phase("rerank", [&] {
    Options s = sub("rerank");
    s.corpus = corpus;
    s.heads = heads;
    s.checkpoint = ckpt;
    s.tag = "headrank";
    rerank_cmd(s);
  });
  const std::string run_untrained = (root / "rerank_untrained" / "run.txt").string();
  const std::string run_trained = (root / "rerank" / "run.txt").string();
  phase("eval-untrained", [&] {
    Options s = sub("eval_untrained");
    s.corpus = corpus;
    s.runs = {run_untrained};
    eval_cmd(s);
  });
  phase("eval", [&] {
    Options s = sub("eval");
    s.corpus = corpus;
    s.runs = {run_trained};
    eval_cmd(s);
  });
  phase("diagnose", [&] {
    Options s = sub("diagnose");
    s.corpus = corpus;
    s.runs = {run_untrained, run_trained};
    diagnose_cmd(s);
  });
  phase("validate", [&] { validate_manifest_dag(root / "diagnose" / kManifestName); });
}

// Exit codes by error category.
inline int exit_code(std::string_view category) {
  if (category == "config") return 2;
  if (category == "parse") return 3;
  if (category == "io") return 4;
  if (category == "checksum") return 5;
  if (category == "numeric") return 6;
  if (category == "shape") return 7;
  return 1;
}

}  // namespace headrank::cli
