#pragma once

// Directional claim checks evaluated on finished experiment reports. Shared
// by the acceptance binary and the CLI's `report --check` so both gates run
// exactly the same arithmetic.

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "coffee/harness.hpp"

namespace coffee {

struct CriterionResult {
  std::string name;
  bool pass = false;
  bool informational = false;  // reported, never gates
  std::string detail;
};

namespace checks_detail {

inline std::string num(double v, const char* fmt = "%.4f") {
  char buf[64];
  std::snprintf(buf, sizeof(buf), fmt, v);
  return buf;
}

}  // namespace checks_detail

// Entanglement halving: drift-regularized fine-tuning at lambda = 1 keeps the
// undesired attribute out of generations that plain fine-tuning lets in, at
// no more than a modest sample-diversity cost.
inline CriterionResult check_presence_halving(const std::vector<EvalReport>& rows) {
  using checks_detail::num;
  CriterionResult c{.name = "presence-halving"};
  const auto direct = rows_for_method(rows, "direct");
  const auto coffee = rows_for_method(rows, "coffee");
  if (direct.empty() || coffee.empty()) {
    c.detail = "needs rows for both direct and coffee";
    return c;
  }
  for (const EvalReport& r : coffee)
    if (!r.lambda || *r.lambda != 1.0) {
      c.detail = "coffee rows must use lambda = 1, found " +
                 (r.lambda ? num(*r.lambda, "%g") : std::string("none"));
      return c;
    }
  const PooledStats d = pool_rows(direct);
  const PooledStats k = pool_rows(coffee);
  const bool entangles = d.presence >= 0.5;
  const bool halves = k.presence <= 0.5 * d.presence;
  const bool mcs_down = k.mcs < d.mcs;
  const bool quality = k.is >= 0.8 * d.is;
  c.pass = entangles && halves && mcs_down && quality;
  c.detail = "presence direct " + num(d.presence) + (entangles ? " >= 0.5" : " < 0.5 (!)") +
             ", coffee " + num(k.presence) + (halves ? " <= " : " > ") + num(0.5 * d.presence) +
             "; mcs " + num(k.mcs) + (mcs_down ? " < " : " >= ") + num(d.mcs) + "; is " +
             num(k.is) + (quality ? " >= " : " < ") + num(0.8 * d.is);
  return c;
}

// Steering insufficiency: each inference-time control (prompt editing,
// negative prompting at inference, negative prompting trained and applied)
// leaves markedly more of the undesired concept than the drift regularizer.
inline CriterionResult check_steering_insufficiency(const std::vector<EvalReport>& rows) {
  using checks_detail::num;
  CriterionResult c{.name = "steering-insufficiency"};
  const auto coffee = rows_for_method(rows, "coffee");
  if (coffee.empty()) {
    c.detail = "needs coffee rows";
    return c;
  }
  const double threshold = 1.3 * pool_rows(coffee).mcs;
  c.pass = true;
  c.detail = "threshold 1.3 x mcs(coffee) = " + num(threshold);
  for (const char* m : {"concept_removal", "neg_prompt_infer", "neg_prompt_both"}) {
    const auto mrows = rows_for_method(rows, m);
    if (mrows.empty()) {
      c.pass = false;
      c.detail += std::string("; ") + m + ": no rows";
      continue;
    }
    const double mcs = pool_rows(mrows).mcs;
    const bool ok = mcs >= threshold;
    c.pass = c.pass && ok;
    c.detail += std::string("; ") + m + " " + num(mcs) + (ok ? " ok" : " BELOW");
  }
  return c;
}

// Regularization-strength trend: concept similarity falls and the fit to the
// fine-tuning distribution degrades as lambda grows, allowing at most one
// adjacent inversion within one pooled standard error per metric; the
// lambda = 1 row keeps the diversity guard that lambda = 10 may lose.
inline CriterionResult check_lambda_trend(const std::vector<double>& lambdas,
                                          const std::vector<EvalReport>& sweep_rows) {
  using checks_detail::num;
  CriterionResult c{.name = "lambda-trend"};
  std::vector<PooledStats> stats;
  for (double l : lambdas) {
    std::vector<EvalReport> lrows;
    for (const EvalReport& r : sweep_rows)
      if (r.lambda && *r.lambda == l) lrows.push_back(r);
    if (lrows.empty()) {
      c.detail = "no rows for lambda " + num(l, "%g");
      return c;
    }
    stats.push_back(pool_rows(lrows));
  }
  for (const PooledStats& s : stats)
    if (std::isnan(s.ffd_finetune)) {
      c.detail = "sweep rows lack feature-distance values";
      return c;
    }

  int mcs_inversions = 0, ffd_inversions = 0;
  bool hard_violation = false;
  std::string trend_mcs, trend_ffd;
  for (size_t i = 0; i + 1 < stats.size(); ++i) {
    const double mcs_tol = std::sqrt(stats[i].mcs_se * stats[i].mcs_se +
                                     stats[i + 1].mcs_se * stats[i + 1].mcs_se);
    const double ffd_tol =
        std::sqrt(stats[i].ffd_finetune_se * stats[i].ffd_finetune_se +
                  stats[i + 1].ffd_finetune_se * stats[i + 1].ffd_finetune_se);
    if (stats[i + 1].mcs > stats[i].mcs) {
      ++mcs_inversions;
      if (stats[i + 1].mcs - stats[i].mcs > mcs_tol) hard_violation = true;
    }
    if (stats[i + 1].ffd_finetune < stats[i].ffd_finetune) {
      ++ffd_inversions;
      if (stats[i].ffd_finetune - stats[i + 1].ffd_finetune > ffd_tol) hard_violation = true;
    }
  }
  for (size_t i = 0; i < stats.size(); ++i) {
    trend_mcs += (i ? " -> " : "") + num(stats[i].mcs);
    trend_ffd += (i ? " -> " : "") + num(stats[i].ffd_finetune, "%.1f");
  }

  // Quality guard at lambda = 1 against the lambda = 0 rows (those are the
  // direct fine-tuning run, bit for bit).
  const PooledStats* base = nullptr;
  const PooledStats* at1 = nullptr;
  for (size_t i = 0; i < lambdas.size(); ++i) {
    if (lambdas[i] == 0.0) base = &stats[i];
    if (lambdas[i] == 1.0) at1 = &stats[i];
  }
  if (!base || !at1) {
    c.detail = "sweep must include lambda 0 and 1";
    return c;
  }
  const bool guard = at1->is >= 0.8 * base->is;

  c.pass = !hard_violation && mcs_inversions <= 1 && ffd_inversions <= 1 && guard;
  c.detail = "mcs " + trend_mcs + " (" + std::to_string(mcs_inversions) +
             " inversions); ffd-to-finetune-set " + trend_ffd + " (" +
             std::to_string(ffd_inversions) + " inversions); is(lambda=1) " + num(at1->is) +
             (guard ? " >= " : " < ") + num(0.8 * base->is);
  return c;
}

// Drift bound: the regularizer holds every undesired-concept cosine at its
// snapshot value while plain fine-tuning moves it on every paired run.
inline CriterionResult check_drift_bound(const std::vector<EvalReport>& rows) {
  using checks_detail::num;
  CriterionResult c{.name = "drift-bound"};
  const auto direct = rows_for_method(rows, "direct");
  const auto coffee = rows_for_method(rows, "coffee");
  if (direct.empty() || coffee.empty() || direct.size() != coffee.size()) {
    c.detail = "needs paired direct and coffee rows";
    return c;
  }
  double max_coffee = 0.0;
  bool all_paired = true;
  for (size_t i = 0; i < coffee.size(); ++i) {
    // rows are sorted identically, so index i pairs the same (pair, seed)
    max_coffee = std::max(max_coffee, double(coffee[i].drift_mean()));
    if (!(coffee[i].drift_mean() < direct[i].drift_mean())) all_paired = false;
  }
  const bool bounded = max_coffee <= 0.05;
  c.pass = bounded && all_paired;
  c.detail = "max drift(coffee) " + num(max_coffee, "%.5f") + (bounded ? " <= 0.05" : " > 0.05") +
             "; coffee < direct on every paired run: " + (all_paired ? "yes" : "NO");
  return c;
}

// Protocol competitiveness: adapting only the prompt embeddings performs
// within 15% of full-model fine-tuning on diversity and on the fit to the
// fine-tuning distribution (doing better than full is competitive a
// fortiori), while training under 1% of the parameters.
inline CriterionResult check_protocol_competitiveness(const std::vector<ProtocolRow>& rows) {
  using checks_detail::num;
  CriterionResult c{.name = "protocol-competitiveness"};
  const ProtocolRow* text = nullptr;
  const ProtocolRow* full = nullptr;
  for (const ProtocolRow& r : rows) {
    if (r.groups == "text_encoder") text = &r;
    if (r.groups == "text_encoder+denoiser") full = &r;
  }
  if (!text || !full) {
    c.detail = "needs text_encoder and text_encoder+denoiser rows";
    return c;
  }
  const bool is_ok = text->is_analog >= 0.85 * full->is_analog;
  const bool ffd_ok = text->ffd_finetune.value() <= 1.15 * full->ffd_finetune.value();
  const bool params_ok = text->param_fraction_of_full < 0.01;
  c.pass = is_ok && ffd_ok && params_ok;
  c.detail = "is " + num(text->is_analog) + " vs full " + num(full->is_analog) +
             (is_ok ? " (within 15%)" : " (MORE than 15% worse)") + "; ffd-to-finetune-set " +
             num(text->ffd_finetune.value(), "%.1f") + " vs full " +
             num(full->ffd_finetune.value(), "%.1f") +
             (ffd_ok ? " (within 15%)" : " (MORE than 15% worse)") + "; trains " +
             std::to_string(text->trained_params) + "/" + std::to_string(full->trained_params) +
             " params (" + num(100.0 * text->param_fraction_of_full, "%.2f") + "%" +
             (params_ok ? " < 1%)" : " >= 1% (!))");
  return c;
}

// Failure-mode diagnostic: when the undesired attribute dominates the
// fine-tuning images, embedding-drift control alone cannot keep it out of
// generations. Reported, never gated.
inline CriterionResult check_dominant_diagnostic(const std::vector<EvalReport>& rows) {
  using checks_detail::num;
  CriterionResult c{.name = "dominant-attribute-diagnostic"};
  c.informational = true;
  const auto direct = rows_for_method(rows, "direct");
  const auto coffee = rows_for_method(rows, "coffee");
  if (direct.empty() || coffee.empty()) {
    c.detail = "needs direct and coffee rows from the dominant-attribute regime";
    return c;
  }
  c.pass = true;
  c.detail = "dominant-attribute presence: direct " + num(pool_rows(direct).presence) +
             ", coffee " + num(pool_rows(coffee).presence) +
             " (reported, no threshold: regularizing the prompt embedding cannot undo an "
             "attribute that dominates the training images)";
  return c;
}

}  // namespace coffee
