// Acceptance run: prints one PASS/FAIL line per criterion and exits non-zero
// if any criterion fails. Details go to stderr.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"

using namespace headrank;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, bool pass, const std::string& detail) {
  std::cout << (pass ? "PASS" : "FAIL") << " criterion " << id << ": " << detail << std::endl;
  if (!pass) ++failures;
}

template <typename Fn>
void guarded(int id, Fn&& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    report(id, false, std::string("exception: ") + e.what());
  }
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << v;
  return s.str();
}

RunConfig default_config() {
  return load_run_config(fs::path(HEADRANK_SOURCE_DIR) / "configs" / "default.jsonc").config;
}

// ---------------------------------------------------------------------------

void gradient_check() {
  const auto t0 = Clock::now();
  SyntheticConfig data;
  data.n_queries = 2;
  data.n_test = 1;
  data.n_docs_per_query = 6;
  data.seed = 5;
  const auto corpus = generate_synthetic(data);
  const RankingInstance& inst = corpus.front();
  const ScoringConfig scoring;
  const std::size_t seq = prepare_scoring_input(inst, scoring, 4096).scored.tokens.size();

  ModelConfig m;
  m.n_layers = 2;
  m.n_heads = 2;
  m.d_model = 32;
  m.d_ff = 64;
  m.max_seq_len = seq;
  m.seed = 13;
  const TransformerParams reference = init_params(m);
  const std::vector<HeadId> ids{{1, 0}, {2, 1}};
  const HeadSet heads = HeadSet::from_ids(ids);
  const LossConfig loss_cfg;
  const QueryContext ctx = make_query_context(inst, reference, heads, scoring);
  const auto pairs = build_pairs(inst);
  if (pairs.empty()) throw std::runtime_error("gradient check instance has no pairs");

  // Move the policy off the reference so the proximal term contributes.
  std::vector<Matrix> policy(reference.tensors().begin(), reference.tensors().end());
  std::mt19937_64 rng(17);
  std::normal_distribution<double> noise(0.0, 0.02);
  for (Matrix& t : policy)
    for (double& v : t.data()) v += noise(rng);

  const ad::LossBuilder loss = [&](ad::Tape& tape, std::span<const ad::Var> vars) {
    const BoundModel bm(m, std::vector<ad::Var>(vars.begin(), vars.end()));
    return total_loss(tape, bm, ctx, pairs, heads, loss_cfg, scoring).total;
  };
  const auto rep = ad::finite_difference_check(loss, policy, 1e-5);
  const double secs = seconds_since(t0);
  bool ok = secs < 60.0;
  std::string worst;
  for (std::size_t i = 0; i < rep.per_param_max.size(); ++i) {
    if (!(rep.per_param_max[i] < 1e-3)) {
      ok = false;
      worst += " " + TransformerParams::tensor_name(m, i) + "=" + fmt(rep.per_param_max[i]);
    }
  }
  report(1, ok,
         "finite differences over " + std::to_string(rep.probes) + " entries in " +
             std::to_string(rep.per_param_max.size()) + " tensors (seq " + std::to_string(seq) + ", " +
             std::to_string(rep.unread_probes) + " never read by the loss, held to an exact zero gradient)" +
             ", max relative error " + fmt(rep.max_relative_error) + ", " + fmt(secs, 3) + " s" +
             (worst.empty() ? "" : ", over tolerance:" + worst));
}

// ---------------------------------------------------------------------------

void early_exit() {
  const auto t0 = Clock::now();
  ModelConfig m;
  m.seed = 21;
  const auto params = init_params(m);
  const std::vector<HeadId> ids{{1, 2}, {2, 0}, {2, 3}};
  const HeadSet heads = HeadSet::from_ids(ids);
  Reranker fast(params, heads);
  RerankConfig full_cfg;
  full_cfg.depth_override = m.n_layers;
  Reranker full(params, heads, full_cfg);
  std::size_t mismatches = 0;
  for (std::uint64_t i = 0; i < 20; ++i) {
    std::mt19937_64 rng(1000 + i);
    const auto inst = testing_support::random_instance(rng, 4 + i % 17, "q" + std::to_string(i));
    const auto a = fast.rerank(inst);
    const auto b = full.rerank(inst);
    if (a.ordering != b.ordering || a.scores != b.scores) ++mismatches;
  }
  const double secs = seconds_since(t0);
  report(2, mismatches == 0 && secs < 30.0,
         "20 instances, depth " + std::to_string(fast.depth()) + " vs " + std::to_string(m.n_layers) + ", " +
             std::to_string(mismatches) + " mismatches, " + fmt(secs, 3) + " s");
}

// ---------------------------------------------------------------------------

void oracle_equivalence() {
  constexpr int kTrials = 200;
  constexpr double kTol = 1e-12;
  std::vector<std::string> bad;

  {  // per-document attention mass
    std::mt19937_64 rng(301);
    std::size_t errs = 0;
    for (int t = 0; t < kTrials; ++t) {
      const auto lay = oracles::random_layout(rng, testing_support::rand_size(rng, 1, 12));
      const Matrix a = oracles::random_causal(rng, lay.seq_len);
      const auto got = score_head(a, lay);
      const auto want = oracles::doc_mass(a, lay);
      for (std::size_t d = 0; d < want.size(); ++d) errs += std::abs(got[d] - want[d]) > kTol;
    }
    if (errs) bad.push_back("scoring(" + std::to_string(errs) + ")");
  }
  {  // head selection
    std::mt19937_64 rng(302);
    std::size_t errs = 0;
    for (int t = 0; t < kTrials; ++t) {
      const std::size_t layers = testing_support::rand_size(rng, 1, 4), nh = testing_support::rand_size(rng, 1, 4);
      SelectionConfig cfg;
      cfg.k = testing_support::rand_size(rng, 1, layers * nh);
      cfg.tau = t % 2 ? 0.001 : std::uniform_real_distribution<double>(0.01, 1.0)(rng);
      cfg.lambda = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
      std::vector<oracles::Probe> probes;
      const std::size_t n = testing_support::rand_size(rng, 1, 4);
      for (std::size_t i = 0; i < n; ++i) probes.push_back(oracles::random_probe(rng, layers, nh));
      HeadScoreAccumulator acc(cfg);
      for (const auto& p : probes) {
        acc.add(score_per_head(p.trace, p.layout), p.trace, p.layout.query, p.positive, p.negatives);
      }
      const auto table = acc.finish();
      const auto hs = top_k(table, cfg.k);
      const auto want = oracles::selection(probes, cfg.tau, cfg.lambda, cfg.k);
      for (const auto& e : table.entries) errs += std::abs(e.phi - want.phi.at(e.id)) > kTol;
      if (hs.heads.size() != want.order.size()) {
        ++errs;
        continue;
      }
      for (std::size_t i = 0; i < want.order.size(); ++i) errs += !(hs.heads[i].id == want.order[i]);
    }
    if (errs) bad.push_back("selection(" + std::to_string(errs) + ")");
  }
  {  // adjacent-grade pairs
    std::mt19937_64 rng(303);
    std::size_t errs = 0;
    for (int t = 0; t < kTrials; ++t) {
      const auto inst = testing_support::random_instance(rng, testing_support::rand_size(rng, 1, 30));
      const auto got = build_pairs(inst);
      const auto want = oracles::adjacent_pairs(inst);
      if (got.size() != want.size()) {
        ++errs;
        continue;
      }
      for (std::size_t i = 0; i < want.size(); ++i) {
        errs += got[i].chosen_index != want[i].first || got[i].rejected_index != want[i].second;
      }
    }
    if (errs) bad.push_back("pairs(" + std::to_string(errs) + ")");
  }
  {  // NDCG and recall
    std::mt19937_64 rng(304);
    std::size_t errs = 0;
    for (int t = 0; t < kTrials; ++t) {
      const std::size_t n = testing_support::rand_size(rng, 1, 8);
      const auto inst = testing_support::random_instance(rng, n);
      std::vector<double> s(n);
      for (double& v : s) v = std::uniform_real_distribution<double>(0, 1)(rng);
      const auto list = make_ranked_list(inst, s);
      std::vector<int> grades;
      std::vector<std::string> gold;
      std::set<std::string> gold_set;
      for (const auto& id : list.ordering)
        for (const auto& c : inst.candidates)
          if (c.doc_id == id) grades.push_back(c.grade);
      for (const auto& c : inst.candidates)
        if (c.grade >= 1) gold.push_back(c.doc_id), gold_set.insert(c.doc_id);
      const std::size_t k = testing_support::rand_size(rng, 1, 10);
      const double idcg = oracles::exhaustive_idcg(grades, k);
      const auto nd = ndcg_at_k(grades, k);
      if (idcg == 0) {
        errs += !nd.degenerate;
      } else {
        errs += std::abs(nd.value - oracles::dcg(grades, k) / idcg) > kTol;
      }
      if (!gold.empty()) errs += std::abs(recall_at_k(list, gold_set, k).value - oracles::recall(list.ordering, gold, k)) > kTol;
    }
    if (errs) bad.push_back("ndcg/recall(" + std::to_string(errs) + ")");
  }
  {  // promotion rates
    std::mt19937_64 rng(305);
    std::size_t errs = 0;
    for (int t = 0; t < kTrials; ++t) {
      std::vector<RankingInstance> insts;
      std::vector<RankedList> lists;
      const std::size_t q = testing_support::rand_size(rng, 1, 4);
      for (std::size_t i = 0; i < q; ++i) {
        insts.push_back(testing_support::random_instance(rng, testing_support::rand_size(rng, 4, 12),
                                                         "q" + std::to_string(i)));
        std::vector<double> s(insts.back().size());
        for (double& v : s) v = std::uniform_real_distribution<double>(0, 1)(rng);
        lists.push_back(make_ranked_list(insts.back(), s));
      }
      std::vector<RankedInstance> ranked;
      for (std::size_t i = 0; i < q; ++i) ranked.push_back({&insts[i], &lists[i]});
      const int thr = 1 + static_cast<int>(rng() % 3);
      const auto got = promotion_rates(ranked, thr);
      const auto want = oracles::promotion(insts, lists, thr);
      errs += got.relevant_total != want.relevant_total || got.relevant_promoted != want.relevant_promoted ||
              got.irrelevant_total != want.irrelevant_total || got.irrelevant_promoted != want.irrelevant_promoted;
      if (want.relevant_total > 0 && want.irrelevant_total > 0) {
        const double gap = 100.0 * want.relevant_promoted / want.relevant_total -
                           100.0 * want.irrelevant_promoted / want.irrelevant_total;
        errs += !got.gap_pp || std::abs(*got.gap_pp - gap) > kTol;
      }
    }
    if (errs) bad.push_back("promotion(" + std::to_string(errs) + ")");
  }
  std::string detail = "scoring, selection, pairs, ndcg/recall, promotion on " + std::to_string(kTrials) +
                       " instances each";
  for (const auto& b : bad) detail += ", mismatch " + b;
  report(3, bad.empty(), detail);
}

// ---------------------------------------------------------------------------

void closed_forms() {
  const LossConfig cfg;
  std::vector<std::string> bad;
  const double align = align_loss(0.0, 0.0, 0.0);
  if (std::abs(align - std::log(2.0)) > 1e-12) bad.push_back("align=" + fmt(align, 17));

  SyntheticConfig data;
  data.n_queries = 2;
  data.n_test = 1;
  data.n_docs_per_query = 8;
  const auto corpus = generate_synthetic(data);
  const auto params = init_params(testing_support::tiny_model(2, 2, 16));
  const std::vector<HeadId> ids{{1, 0}, {2, 1}};
  const HeadSet heads = HeadSet::from_ids(ids);
  const ScoringConfig scoring;
  const auto ctx = make_query_context(corpus.front(), params, heads, scoring);
  const auto pairs = build_pairs(corpus.front());
  ad::Tape tape;
  const BoundModel bm(tape, params);
  const auto g = total_loss(tape, bm, ctx, pairs, heads, cfg, scoring);
  const auto& b = g.breakdown;
  if (b.l_prox != 0.0) bad.push_back("prox=" + fmt(b.l_prox, 17));
  if (std::abs(b.total - (b.l_align + b.l_prox + b.omega)) > 1e-12) bad.push_back("total");

  for (std::size_t n : {2u, 5u, 20u}) {
    const std::vector<double> flat(n, 0.37);
    std::vector<std::size_t> mid;
    for (std::size_t i = 1; i + 1 < n; ++i) mid.push_back(i);
    const auto r = distribution_regularizer(flat, mid, cfg.gamma, cfg.eta);
    if (std::abs(r.omega - cfg.gamma * std::log(static_cast<double>(n))) > 1e-12) bad.push_back("omega N=" + std::to_string(n));
  }
  std::string detail = "align(0,0,0)=" + fmt(align, 15) + ", prox at init=" + fmt(b.l_prox) + ", omega(uniform)=gamma*ln N";
  for (const auto& x : bad) detail += ", wrong " + x;
  report(4, bad.empty(), detail);
}

// ---------------------------------------------------------------------------

struct SeedOutcome {
  double untrained_ndcg = 0, trained_ndcg = 0, mid_std = 0, ablated_mid_std = 0;
  double relevant_pct = 0, irrelevant_pct = 0, gap_pp = 0;
  double train_seconds = 0;
};

MetricReport evaluate_with(const TransformerParams& params, const HeadSet& heads,
                           const std::vector<RankingInstance>& test, const RunConfig& cfg) {
  Reranker r(params, heads, {cfg.scoring, std::nullopt});
  RunFile run;
  run.tag = "x";
  run.lists = r.rerank_all(test);
  return evaluate(test, run, cfg.eval);
}

SeedOutcome run_seed(std::uint64_t seed) {
  RunConfig cfg = default_config();
  cfg.apply_seed(seed);
  const auto corpus = generate_synthetic(cfg.data.synthetic);
  const auto train_split = filter_split(corpus, Split::train);
  const auto test_split = filter_split(corpus, Split::test);
  const auto init = init_params(cfg.model);
  const auto heads = select_heads(train_split, init, cfg.selection, cfg.scoring).heads;

  SeedOutcome o;
  o.untrained_ndcg = evaluate_with(init, heads, test_split, cfg).ndcg(10);
  const auto t0 = Clock::now();
  const auto trained = train(init, train_split, heads, cfg.loss, cfg.scoring);
  o.train_seconds = seconds_since(t0);
  const auto rep = evaluate_with(trained.params, heads, test_split, cfg);
  o.trained_ndcg = rep.ndcg(10);
  o.mid_std = rep.mean_mid_zone_norm_std;
  o.relevant_pct = rep.promotion.relevant_pct.value_or(0);
  o.irrelevant_pct = rep.promotion.irrelevant_pct.value_or(0);
  o.gap_pp = rep.promotion.gap_pp.value_or(-100);

  LossConfig ablated = cfg.loss;
  ablated.gamma = 0;
  ablated.eta = 0;
  const auto plain = train(init, train_split, heads, ablated, cfg.scoring);
  o.ablated_mid_std = evaluate_with(plain.params, heads, test_split, cfg).mean_mid_zone_norm_std;
  return o;
}

void training_effects() {
  std::vector<SeedOutcome> outs;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    outs.push_back(run_seed(seed));
    const auto& o = outs.back();
    std::cerr << "seed " << seed << ": ndcg@10 " << fmt(o.untrained_ndcg) << " -> " << fmt(o.trained_ndcg)
              << ", mid_zone_norm_std " << fmt(o.mid_std) << " (ablated " << fmt(o.ablated_mid_std) << ")"
              << ", promotion relevant " << fmt(o.relevant_pct) << "% irrelevant " << fmt(o.irrelevant_pct)
              << "%, training " << fmt(o.train_seconds, 3) << " s\n";
  }
  int c5 = 0, c6 = 0, c7 = 0;
  double slowest = 0;
  std::string d5, d6, d7;
  for (const auto& o : outs) {
    c5 += o.trained_ndcg - o.untrained_ndcg >= 0.10;
    c6 += o.mid_std > o.ablated_mid_std;
    c7 += o.gap_pp >= 10.0;
    slowest = std::max(slowest, o.train_seconds);
    d5 += " " + fmt(o.trained_ndcg - o.untrained_ndcg, 3);
    d6 += " " + fmt(o.mid_std, 3) + "/" + fmt(o.ablated_mid_std, 3);
    d7 += " " + fmt(o.gap_pp, 3);
  }
  report(5, c5 >= 4 && slowest < 600.0,
         std::to_string(c5) + "/5 seeds gain >= 0.10 NDCG@10 (gains" + d5 + "), slowest training " +
             fmt(slowest, 3) + " s");
  report(6, c6 >= 4, std::to_string(c6) + "/5 seeds with full > ablated mid_zone_norm_std (" + d6.substr(1) + ")");
  report(7, c7 >= 4, std::to_string(c7) + "/5 seeds with selectivity gap >= 10 pp (gaps" + d7 + ")");
}

// ---------------------------------------------------------------------------

void permutations() {
  ModelConfig m = testing_support::tiny_model(3, 2, 16, 8);
  m.max_seq_len = 256;
  const auto params = init_params(m);
  std::mt19937_64 rng(808);
  std::size_t invalid = 0;
  const std::vector<std::vector<HeadId>> sets{{{1, 0}}, {{2, 1}, {3, 0}}, {{1, 1}, {2, 0}, {3, 1}}};
  for (int t = 0; t < 10000; ++t) {
    const auto inst = testing_support::random_instance(rng, testing_support::rand_size(rng, 1, 25));
    const auto list = rerank(inst, params, HeadSet::from_ids(sets[t % 3]));
    invalid += !is_valid_permutation(list, inst);
  }
  report(8, invalid == 0, "10000 reranks, " + std::to_string(invalid) + " invalid permutations");
}

// ---------------------------------------------------------------------------

int run_command(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::map<std::string, std::string> artifact_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file() || e.path().filename() == kManifestName) continue;
    out[fs::relative(e.path(), root).string()] = io::read_file(e.path());
  }
  return out;
}

void determinism() {
  const auto base = fs::temp_directory_path() / "headrank_acceptance_pipeline";
  fs::remove_all(base);
  const std::string config = (fs::path(HEADRANK_SOURCE_DIR) / "configs" / "default.jsonc").string();
  std::map<std::string, std::string> runs[2];
  for (int i = 0; i < 2; ++i) {
    const auto out = base / ("run" + std::to_string(i + 1));
    const int code = run_command(std::string(HEADRANK_CLI_PATH) + " pipeline --config " + config + " --out " +
                                 out.string() + " >" + (base.string() + "_log" + std::to_string(i)) + " 2>&1");
    if (code != 0) {
      report(9, false, "pipeline exited with " + std::to_string(code));
      return;
    }
    runs[i] = artifact_bytes(out);
  }
  std::size_t checked = 0, differing = 0, key_files = 0;
  std::string diff;
  for (const auto& [name, bytes] : runs[0]) {
    ++checked;
    const auto it = runs[1].find(name);
    if (it == runs[1].end() || it->second != bytes) {
      ++differing;
      diff += " " + name;
    }
    const bool key = name.ends_with("run.txt") || name.ends_with(".ckpt") || name.ends_with("metrics.json");
    key_files += key;
  }
  differing += runs[1].size() != runs[0].size();
  report(9, differing == 0 && key_files >= 5,
         std::to_string(checked) + " artifacts compared (" + std::to_string(key_files) +
             " run files, checkpoints and metric reports), " + std::to_string(differing) + " differ" + diff);
}

// ---------------------------------------------------------------------------

void depth_cost() {
  RunConfig cfg = default_config();
  cfg.apply_seed(1);
  const auto corpus = generate_synthetic(cfg.data.synthetic);
  const auto train_split = filter_split(corpus, Split::train);
  const auto test_split = filter_split(corpus, Split::test);
  const auto params = init_params(cfg.model);
  const auto selection = select_heads(train_split, params, cfg.selection, cfg.scoring);
  const std::size_t depth_full = cfg.model.n_layers;

  // The selected set may reach the last layer, which makes the bound trivial,
  // so the best K heads from the lower half of the model are timed as well.
  HeadScoreTable lower = selection.table;
  std::erase_if(lower.entries, [&](const HeadScore& e) { return e.id.layer > depth_full / 2; });
  const HeadSet shallow = top_k(lower, cfg.selection.k);

  bool ok = true;
  std::string detail;
  for (const auto& [name, heads] : {std::pair{"selected", selection.heads}, std::pair{"lower-half", shallow}}) {
    auto time_batch = [&](std::optional<std::size_t> depth) {
      double best = 1e300;
      for (int rep = 0; rep < 3; ++rep) {
        Reranker r(params, heads, {cfg.scoring, depth});
        const auto t0 = Clock::now();
        const auto lists = r.rerank_all(test_split);
        best = std::min(best, seconds_since(t0));
        if (lists.size() != test_split.size()) throw std::runtime_error("rerank dropped queries");
      }
      return best;
    };
    const double fast = time_batch(std::nullopt);
    const double full = time_batch(depth_full);
    const double bound = static_cast<double>(heads.l_max) / static_cast<double>(depth_full) + 0.15;
    ok = ok && fast <= bound * full;
    detail += std::string(detail.empty() ? "" : "; ") + name + " heads, l_max " + std::to_string(heads.l_max) + "/" +
              std::to_string(depth_full) + ": " + fmt(fast, 3) + " s vs " + fmt(full, 3) + " s full depth, ratio " +
              fmt(fast / full, 3) + " (bound " + fmt(bound, 3) + ")";
  }
  report(10, ok, detail);
}

}  // namespace

int main(int argc, char** argv) {
  // Optional list of criterion numbers to run; all by default.
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  auto want = [&](int id) { return only.empty() || only.contains(id); };
  if (want(1)) guarded(1, gradient_check);
  if (want(2)) guarded(2, early_exit);
  if (want(3)) guarded(3, oracle_equivalence);
  if (want(4)) guarded(4, closed_forms);
  if (want(5) || want(6) || want(7)) guarded(5, training_effects);
  if (want(8)) guarded(8, permutations);
  if (want(9)) guarded(9, determinism);
  if (want(10)) guarded(10, depth_cost);
  return failures == 0 ? 0 : 1;
}
