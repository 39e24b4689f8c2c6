#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "headrank/commands.hpp"

namespace {

using headrank::cli::Options;

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config, "Run configuration (JSON with comments)");
  cmd->add_option("--seed", o.seed, "Override the global seed");
  cmd->add_option("--out", o.out, "Output directory")->required();
}

void add_corpus(CLI::App* cmd, Options& o) {
  cmd->add_option("--corpus", o.corpus, "Corpus JSONL")->required();
}

void add_split(CLI::App* cmd, Options& o) {
  cmd->add_option("--split", o.split, "Split to process (train, dev, test)")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention-head reranking: head selection, training and decoding-free inference"};
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("gen-data", "Write the corpus (synthetic or imported) and its qrels");
  add_common(gen, o);

  auto* sel = app.add_subcommand("select-heads", "Score every head and pick the core set");
  add_common(sel, o);
  add_corpus(sel, o);
  sel->add_option("--checkpoint", o.checkpoint, "Weights (default: initialization from the seed)");
  sel->add_option("--k", o.k, "Number of core heads");

  auto* tr = app.add_subcommand("train", "Optimize core-head attention on adjacent-grade pairs");
  add_common(tr, o);
  add_corpus(tr, o);
  tr->add_option("--heads", o.heads, "Head-set file")->required();
  tr->add_option("--checkpoint", o.checkpoint, "Initial (and reference) weights");

  auto* rec = app.add_subcommand("recalibrate", "Re-run head selection on trained weights");
  add_common(rec, o);
  add_corpus(rec, o);
  rec->add_option("--heads", o.heads, "Previous head-set file")->required();
  rec->add_option("--checkpoint", o.checkpoint, "Trained weights")->required();
  rec->add_option("--k", o.k, "Number of core heads");

  auto* rr = app.add_subcommand("rerank", "Rerank a split and write a TREC run file");
  add_common(rr, o);
  add_corpus(rr, o);
  add_split(rr, o);
  rr->add_option("--heads", o.heads, "Head-set file")->required();
  rr->add_option("--checkpoint", o.checkpoint, "Weights (default: initialization from the seed)");
  rr->add_option("--depth-override", o.depth_override, "Prefill depth (between l_max and the model depth)");
  rr->add_option("--tag", o.tag, "Run tag");

  auto* ev = app.add_subcommand("eval", "Compute the metric report for a run file");
  add_common(ev, o);
  add_corpus(ev, o);
  add_split(ev, o);
  ev->add_option("--run", o.runs, "Run file")->required();

  auto* diag = app.add_subcommand("diagnose", "Compare homogenization diagnostics across run files");
  add_common(diag, o);
  add_corpus(diag, o);
  add_split(diag, o);
  diag->add_option("--run", o.runs, "Run files (repeatable)")->required();

  auto* vis = app.add_subcommand("visualize", "Write a static token-level attention heatmap");
  add_common(vis, o);
  add_corpus(vis, o);
  add_split(vis, o);
  vis->add_option("--heads", o.heads, "Head-set file")->required();
  vis->add_option("--checkpoint", o.checkpoint, "Weights");
  vis->add_option("--query", o.query, "Query id (default: first query of the split)");
  vis->add_option("--run", o.runs, "Run files whose ranks are shown as columns");
  vis->add_option("--top-m", o.top_m, "Passages shown")->capture_default_str();

  auto* pipe = app.add_subcommand("pipeline", "All phases end to end");
  add_common(pipe, o);
  pipe->add_option("--k", o.k, "Number of core heads");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  namespace cli = headrank::cli;
  try {
    if (*gen) cli::gen_data(o);
    else if (*sel) cli::select_heads_cmd(o);
    else if (*tr) cli::train_cmd(o);
    else if (*rec) cli::recalibrate_cmd(o);
    else if (*rr) cli::rerank_cmd(o);
    else if (*ev) cli::eval_cmd(o);
    else if (*diag) cli::diagnose_cmd(o);
    else if (*vis) cli::visualize_cmd(o);
    else if (*pipe) cli::pipeline_cmd(o);
  } catch (const headrank::Error& e) {
    nlohmann::json err = {{"error", {{"category", e.category()}, {"message", e.what()}}}};
    std::cerr << err.dump() << "\n";
    return cli::exit_code(e.category());
  } catch (const std::filesystem::filesystem_error& e) {
    nlohmann::json err = {{"error", {{"category", "io"}, {"message", e.what()}}}};
    std::cerr << err.dump() << "\n";
    return cli::exit_code("io");
  } catch (const std::exception& e) {
    nlohmann::json err = {{"error", {{"category", "internal"}, {"message", e.what()}}}};
    std::cerr << err.dump() << "\n";
    return 1;
  }
  return 0;
}
