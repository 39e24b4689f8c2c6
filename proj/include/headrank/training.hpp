#pragma once

// Attention-space preference optimization.
//
//   L_total = L_align(ds) + (beta/2) * ||[s+ - s_ref+, s- - s_ref-]||^2 + Omega(s)
//   L_align = -log sigmoid(ds) + max(0, m - ds) - alpha * ds
//   Omega   = gamma * H(softmax(s)) - eta * Var(s_mid)
//
// where s are calibrated core-head attention scores of the policy, s_ref the
// same scores under the frozen reference weights, and ds = s+ - s-.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "headrank/autodiff.hpp"
#include "headrank/data.hpp"
#include "headrank/scoring.hpp"
#include "headrank/transformer.hpp"
#include "headrank/zones.hpp"
#include "json.hpp"

namespace headrank {

enum class Objective { headrank, ranknet };

struct LossConfig {
  double beta = 0.05;    // proximal weight
  double alpha = 0.05;   // linear margin push
  double margin = 0.3;   // hinge margin m
  double gamma = 0.01;   // score-distribution entropy weight
  double eta = 0.1;      // middle-zone variance weight
  double grad_clip = 5.0;
  double learning_rate = 1e-3;
  std::size_t epochs = 1;
  std::size_t batch_size = 16;  // pairs per step, all from one query
  std::size_t pair_cap = 64;    // ALPS pairs kept per query
  std::uint64_t seed = 7;
  Objective objective = Objective::headrank;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const {
    if (beta < 0 || gamma < 0 || eta < 0 || margin < 0) throw ConfigError("beta, gamma, eta and margin must be >= 0");
    if (!(grad_clip > 0)) throw ConfigError("grad_clip must be > 0");
    if (learning_rate < 0) throw ConfigError("learning_rate must be >= 0");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
  }
};

struct PreferenceScores {
  double s_plus = 0.0;
  double s_minus = 0.0;
  double s_ref_plus = 0.0;
  double s_ref_minus = 0.0;

  double delta_s() const { return s_plus - s_minus; }
  std::pair<double, double> delta_ref() const { return {s_plus - s_ref_plus, s_minus - s_ref_minus}; }
};

struct LossBreakdown {
  double l_align = 0.0;
  double l_prox = 0.0;
  double omega = 0.0;
  double total = 0.0;
  double h_p = 0.0;
  double var_mid = 0.0;
};

// ---------------------------------------------------------------------------
// Loss terms as graph builders; the scalar forms below evaluate these.

inline ad::Var align_loss(const ad::Var& delta_s, double margin, double alpha) {
  const ad::Var nll = ad::scale(ad::log_sigmoid(delta_s), -1.0);
  const ad::Var hinge = ad::hinge(ad::add_const(ad::scale(delta_s, -1.0), margin));
  return ad::sub(ad::add(nll, hinge), ad::scale(delta_s, alpha));
}

inline ad::Var prox_penalty(const ad::Var& d_plus, const ad::Var& d_minus, double beta) {
  const std::vector<ad::Var> parts{d_plus, d_minus};
  return ad::scale(ad::l2_squared(ad::stack(parts)), beta / 2.0);
}

struct RegularizerGraph {
  ad::Var omega;
  ad::Var h_p;
  ad::Var var_mid;  // invalid when fewer than two middle documents
};

inline RegularizerGraph distribution_regularizer(const ad::Var& scores, std::span<const std::size_t> mid_indices,
                                                 double gamma, double eta, std::size_t* degenerate_counter = nullptr) {
  RegularizerGraph r;
  r.h_p = ad::entropy(ad::masked_softmax(scores));
  r.omega = ad::scale(r.h_p, gamma);
  if (mid_indices.size() >= 2) {
    r.var_mid = ad::variance(ad::select(scores, std::vector<std::size_t>(mid_indices.begin(), mid_indices.end())));
    r.omega = ad::sub(r.omega, ad::scale(r.var_mid, eta));
  } else if (degenerate_counter != nullptr) {
    ++*degenerate_counter;
  }
  return r;
}

inline double align_loss(double delta_s, double margin, double alpha) {
  ad::Tape t(false);
  return align_loss(t.leaf(Matrix::scalar(delta_s)), margin, alpha).item();
}

inline double prox_penalty(const PreferenceScores& ps, double beta) {
  ad::Tape t(false);
  const auto [dp, dm] = ps.delta_ref();
  return prox_penalty(t.leaf(Matrix::scalar(dp)), t.leaf(Matrix::scalar(dm)), beta).item();
}

struct RegularizerValue {
  double omega = 0.0;
  double h_p = 0.0;
  double var_mid = 0.0;
  bool degenerate_mid = false;
};

inline RegularizerValue distribution_regularizer(std::span<const double> scores, std::span<const std::size_t> mid,
                                                 double gamma, double eta) {
  for (std::size_t i : mid) {
    if (i >= scores.size()) throw ShapeError("middle-zone index " + std::to_string(i) + " outside score vector");
  }
  ad::Tape t(false);
  std::size_t degenerate = 0;
  const auto g = distribution_regularizer(t.leaf(Matrix::row_vector({scores.begin(), scores.end()})), mid, gamma,
                                          eta, &degenerate);
  return {g.omega.item(), g.h_p.item(), g.var_mid.valid() ? g.var_mid.item() : 0.0, degenerate > 0};
}

// ---------------------------------------------------------------------------
// Per-query training context

struct QueryContext {
  const RankingInstance* instance = nullptr;
  ScoringInput input;
  std::vector<std::size_t> mid_indices;  // candidate indices in the middle zone
  std::vector<double> reference_scores;  // frozen-reference s_ref per candidate
};

// Calibrated core-head scores computed without gradient state.
inline std::vector<double> score_without_grad(const TransformerParams& params, const ScoringInput& input,
                                              const HeadSet& heads, const ScoringConfig& scoring) {
  ad::Tape tape(false);
  const BoundModel model(tape, params);
  const ad::Var s = core_scores_graph(tape, model, input, heads, scoring.calibrate);
  const auto d = s.value().data();
  return {d.begin(), d.end()};
}

inline QueryContext make_query_context(const RankingInstance& inst, const TransformerParams& reference,
                                       const HeadSet& heads, const ScoringConfig& scoring) {
  QueryContext ctx;
  ctx.instance = &inst;
  ctx.input = prepare_scoring_input(inst, scoring, reference.config().max_seq_len);
  const std::size_t n = inst.candidates.size();
  if (n >= 4) {
    for (std::size_t i = 0; i < n; ++i) {
      if (in_middle_zone(inst.candidates[i].original_rank, n)) ctx.mid_indices.push_back(i);
    }
  }
  ctx.reference_scores = score_without_grad(reference, ctx.input, heads, scoring);
  return ctx;
}

struct LossGraph {
  ad::Var total;
  ad::Var scores;
  LossBreakdown breakdown;
  double mean_delta_s = 0.0;
};

// Builds the full objective for `pairs` (all from ctx's query) on `tape`. One
// scored and one calibration prefill at depth l_max serve every pair and the
// regularizer.
inline LossGraph total_loss(ad::Tape& tape, const BoundModel& policy, const QueryContext& ctx,
                            std::span<const PreferencePair> pairs, const HeadSet& heads, const LossConfig& cfg,
                            const ScoringConfig& scoring, std::size_t* degenerate_counter = nullptr) {
  if (pairs.empty()) throw ConfigError("total_loss: no preference pairs");
  const RankingInstance& inst = *ctx.instance;
  for (const auto& p : pairs) {
    if (p.query_id != inst.query_id || p.chosen_index >= inst.size() || p.rejected_index >= inst.size() ||
        inst.candidates[p.chosen_index].doc_id != p.chosen_doc_id ||
        inst.candidates[p.rejected_index].doc_id != p.rejected_doc_id) {
      throw ConfigError("total_loss: pair (" + p.chosen_doc_id + ", " + p.rejected_doc_id +
                        ") is not in the context of query " + inst.query_id);
    }
  }
  LossGraph g;
  g.scores = core_scores_graph(tape, policy, ctx.input, heads, scoring.calibrate);

  std::vector<ad::Var> align_terms;
  std::vector<ad::Var> prox_terms;
  double margin_sum = 0.0;
  for (const auto& p : pairs) {
    const ad::Var sp = ad::select(g.scores, {p.chosen_index});
    const ad::Var sm = ad::select(g.scores, {p.rejected_index});
    const ad::Var ds = ad::sub(sp, sm);
    margin_sum += ds.item();
    if (cfg.objective == Objective::ranknet) {
      align_terms.push_back(ad::scale(ad::log_sigmoid(ds), -1.0));
      continue;
    }
    align_terms.push_back(align_loss(ds, cfg.margin, cfg.alpha));
    const ad::Var dp = ad::add_const(sp, -ctx.reference_scores[p.chosen_index]);
    const ad::Var dm = ad::add_const(sm, -ctx.reference_scores[p.rejected_index]);
    prox_terms.push_back(prox_penalty(dp, dm, cfg.beta));
  }
  g.mean_delta_s = margin_sum / static_cast<double>(pairs.size());

  const ad::Var l_align = ad::mean(ad::stack(align_terms));
  ad::Var total = l_align;
  g.breakdown.l_align = l_align.item();
  if (cfg.objective == Objective::headrank) {
    const ad::Var l_prox = ad::mean(ad::stack(prox_terms));
    const RegularizerGraph reg = distribution_regularizer(g.scores, ctx.mid_indices, cfg.gamma, cfg.eta,
                                                          degenerate_counter);
    total = ad::add(ad::add(l_align, l_prox), reg.omega);
    g.breakdown.l_prox = l_prox.item();
    g.breakdown.omega = reg.omega.item();
    g.breakdown.h_p = reg.h_p.item();
    g.breakdown.var_mid = reg.var_mid.valid() ? reg.var_mid.item() : 0.0;
  }
  g.total = total;
  g.breakdown.total = total.item();
  return g;
}

// ---------------------------------------------------------------------------
// Optimizer

class Adam {
 public:
  Adam(const TransformerParams& params, const LossConfig& cfg) : cfg_(cfg) {
    for (const Matrix& m : params.tensors()) {
      m_.emplace_back(m.rows(), m.cols());
      v_.emplace_back(m.rows(), m.cols());
    }
  }

  void step(TransformerParams& params, std::span<const Matrix> grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.adam_beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.adam_beta2, static_cast<double>(t_));
    auto tensors = params.tensors();
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      Matrix& p = tensors[i];
      const Matrix& g = grads[i];
      for (std::size_t e = 0; e < p.size(); ++e) {
        m_[i][e] = cfg_.adam_beta1 * m_[i][e] + (1.0 - cfg_.adam_beta1) * g[e];
        v_[i][e] = cfg_.adam_beta2 * v_[i][e] + (1.0 - cfg_.adam_beta2) * g[e] * g[e];
        const double mhat = m_[i][e] / bc1;
        const double vhat = v_[i][e] / bc2;
        p[e] -= cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.adam_eps);
      }
    }
  }

 private:
  LossConfig cfg_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  std::size_t t_ = 0;
};

// Scales grads in place so their global L2 norm is at most `clip`; returns the
// norm before clipping.
inline double clip_global_norm(std::vector<Matrix>& grads, double clip) {
  double ss = 0.0;
  for (const Matrix& g : grads) {
    for (double v : g.data()) ss += v * v;
  }
  const double norm = std::sqrt(ss);
  if (norm > clip) {
    const double s = clip / norm;
    for (Matrix& g : grads) {
      for (double& v : g.data()) v *= s;
    }
  }
  return norm;
}

struct TrainingLogEntry {
  std::size_t step = 0;
  std::string query_id;
  std::size_t pairs = 0;
  LossBreakdown loss;
  double grad_norm = 0.0;          // before clipping
  double grad_norm_clipped = 0.0;  // after clipping
  double mean_delta_s = 0.0;
};

struct TrainingResult {
  TransformerParams params;
  std::vector<TrainingLogEntry> log;
  std::size_t degenerate_mid_zones = 0;
};

// ALPS pairs for one query, capped and chunked into steps.
inline std::vector<std::vector<PreferencePair>> pair_batches(const RankingInstance& inst, const LossConfig& cfg) {
  auto pairs = cap_pairs(build_pairs(inst), cfg.pair_cap, cfg.seed);
  std::vector<std::vector<PreferencePair>> batches;
  for (std::size_t i = 0; i < pairs.size(); i += cfg.batch_size) {
    const std::size_t end = std::min(pairs.size(), i + cfg.batch_size);
    batches.emplace_back(pairs.begin() + static_cast<std::ptrdiff_t>(i), pairs.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

// Adam with global-norm clipping over the policy; the reference is a frozen
// copy of `initial`. Query order is reshuffled each epoch from cfg.seed.
inline TrainingResult train(const TransformerParams& initial, std::span<const RankingInstance> corpus,
                            const HeadSet& heads, const LossConfig& cfg, const ScoringConfig& scoring = {}) {
  cfg.validate();
  if (heads.heads.empty()) throw ConfigError("train: empty head set");
  TrainingResult result;
  result.params = initial;
  const TransformerParams& reference = initial;

  std::vector<QueryContext> contexts;
  contexts.reserve(corpus.size());
  for (const auto& inst : corpus) contexts.push_back(make_query_context(inst, reference, heads, scoring));

  Adam adam(result.params, cfg);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(corpus.size());
  std::optional<LossBreakdown> last_finite;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t qi : order) {
      const QueryContext& ctx = contexts[qi];
      for (const auto& batch : pair_batches(*ctx.instance, cfg)) {
        ad::Tape tape;
        const BoundModel policy(tape, result.params);
        LossGraph lg;
        std::vector<Matrix> grads;
        try {
          lg = total_loss(tape, policy, ctx, batch, heads, cfg, scoring, &result.degenerate_mid_zones);
          const ad::Gradients g = tape.backward(lg.total);
          for (const ad::Var& v : policy.vars()) grads.push_back(g[v]);
          for (const Matrix& m : grads) {
            if (!m.all_finite()) throw NumericError("non-finite gradient");
          }
        } catch (const NumericError& e) {
          std::string msg = "training aborted at step " + std::to_string(step) + ": " + e.what();
          if (last_finite) {
            msg += " (last finite loss: total=" + io::format_double(last_finite->total) +
                   " align=" + io::format_double(last_finite->l_align) +
                   " prox=" + io::format_double(last_finite->l_prox) +
                   " omega=" + io::format_double(last_finite->omega) + ")";
          }
          throw NumericError(msg);
        }
        TrainingLogEntry entry;
        entry.step = step;
        entry.query_id = ctx.instance->query_id;
        entry.pairs = batch.size();
        entry.loss = lg.breakdown;
        entry.mean_delta_s = lg.mean_delta_s;
        entry.grad_norm = clip_global_norm(grads, cfg.grad_clip);
        entry.grad_norm_clipped = std::min(entry.grad_norm, cfg.grad_clip);
        adam.step(result.params, grads);
        last_finite = lg.breakdown;
        result.log.push_back(std::move(entry));
        ++step;
      }
    }
  }
  return result;
}

// Mean policy margin s+ - s- over every ALPS pair of `corpus`.
inline double mean_pair_margin(const TransformerParams& params, std::span<const RankingInstance> corpus,
                               const HeadSet& heads, const ScoringConfig& scoring = {}) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& inst : corpus) {
    const auto pairs = build_pairs(inst);
    if (pairs.empty()) continue;
    const auto input = prepare_scoring_input(inst, scoring, params.config().max_seq_len);
    const auto s = score_without_grad(params, input, heads, scoring);
    for (const auto& p : pairs) {
      sum += s[p.chosen_index] - s[p.rejected_index];
      ++n;
    }
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

// Training log: one JSON object per step.
inline std::string serialize_training_log(std::span<const TrainingLogEntry> log) {
  std::string out;
  for (const auto& e : log) {
    nlohmann::ordered_json j;
    j["step"] = e.step;
    j["query_id"] = e.query_id;
    j["pairs"] = e.pairs;
    j["l_align"] = e.loss.l_align;
    j["l_prox"] = e.loss.l_prox;
    j["omega"] = e.loss.omega;
    j["total"] = e.loss.total;
    j["h_p"] = e.loss.h_p;
    j["var_mid"] = e.loss.var_mid;
    j["grad_norm"] = e.grad_norm;
    j["grad_norm_clipped"] = e.grad_norm_clipped;
    j["mean_delta_s"] = e.mean_delta_s;
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace headrank
