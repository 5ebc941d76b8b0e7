#pragma once

#include <string>
#include <vector>

#include "amad/scoring.hpp"
#include "amad/training.hpp"

namespace amad {

struct PipelineResult {
  FitResult fit;
  ScoreReport report;
  EvalReport eval_raw;
  EvalReport eval_adjusted;
};

// Full train -> score -> evaluate pass on raw (unnormalised) series.
// Normalisation statistics are fitted on the training split only.
inline PipelineResult run_pipeline(const TimeSeries& train_raw, const TimeSeries& test_raw,
                                   const ModelConfig& cfg, const TrainConfig& tcfg,
                                   const ScoreOptions& opt) {
  const NormStats stats = fit_norm_stats(train_raw);
  const TimeSeries train = zscore(train_raw, stats);
  const TimeSeries test = zscore(test_raw, stats);

  PipelineResult res;
  res.fit = fit(train, cfg, tcfg);
  const std::vector<double> train_scores = score_series(res.fit.params, res.fit.cfg, train);
  const std::vector<double> test_scores = score_series(res.fit.params, res.fit.cfg, test);
  res.report = make_score_report(test_scores, train_scores, test_raw.labels, opt);
  if (!test_raw.labels.empty()) {
    res.eval_raw = precision_recall_f1(res.report.flags_raw, test_raw.labels);
    res.eval_adjusted = precision_recall_f1(res.report.flags_adjusted, test_raw.labels);
  }
  return res;
}

// ---------------------------------------------------------------------------
// hyperparameter grid
// ---------------------------------------------------------------------------

struct GridCell {
  double alpha = 0.0, tau = 0.0;
  EvalReport eval;      // point-adjusted
  bool failed = false;
  std::string error;
};

struct GridMarginal {
  std::string axis;  // "alpha" or "tau"
  double value = 0.0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;
};

struct GridResult {
  std::vector<GridCell> cells;
  std::vector<GridMarginal> marginals;
};

inline std::vector<double> default_alpha_grid() { return {0.3, 0.6, 0.9}; }
inline std::vector<double> default_tau_grid() { return {0.07, 0.21, 0.35}; }

// Trains and evaluates every (alpha, tau) cell from the same seed; cell
// failures are recorded, not fatal. Marginals average the point-adjusted
// metrics over the other axis.
inline GridResult grid_search(const TimeSeries& train_raw, const TimeSeries& test_raw,
                              const ModelConfig& base_cfg, const TrainConfig& base_tcfg,
                              const ScoreOptions& opt,
                              const std::vector<double>& alphas = default_alpha_grid(),
                              const std::vector<double>& taus = default_tau_grid()) {
  if (alphas.empty() || taus.empty()) throw ConfigError("grid_search: empty grid");
  GridResult out;
  for (double alpha : alphas) {
    for (double tau : taus) {
      GridCell cell;
      cell.alpha = alpha;
      cell.tau = tau;
      try {
        ModelConfig cfg = base_cfg;
        cfg.mixup_alpha = alpha;
        TrainConfig tcfg = base_tcfg;
        tcfg.tau = tau;
        cell.eval = run_pipeline(train_raw, test_raw, cfg, tcfg, opt).eval_adjusted;
      } catch (const std::exception& e) {
        cell.failed = true;
        cell.error = e.what();
      }
      out.cells.push_back(cell);
    }
  }
  auto marginal = [&](const std::string& axis, double value) {
    GridMarginal m;
    m.axis = axis;
    m.value = value;
    std::size_t n = 0;
    for (const GridCell& c : out.cells) {
      const double key = axis == "alpha" ? c.alpha : c.tau;
      if (key != value || c.failed) continue;
      m.precision += c.eval.precision;
      m.recall += c.eval.recall;
      m.f1 += c.eval.f1;
      ++n;
    }
    if (n > 0) {
      m.precision /= static_cast<double>(n);
      m.recall /= static_cast<double>(n);
      m.f1 /= static_cast<double>(n);
    }
    return m;
  };
  for (double alpha : alphas) out.marginals.push_back(marginal("alpha", alpha));
  for (double tau : taus) out.marginals.push_back(marginal("tau", tau));
  return out;
}

// ---------------------------------------------------------------------------
// ablation matrix
// ---------------------------------------------------------------------------

struct AblationFlags {
  bool min_on = true, max_on = true, contrastive_on = true, automask_on = true;
};

struct AblationRow {
  AblationFlags flags;
  EvalReport eval;  // point-adjusted
  bool failed = false;
  std::string error;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  double avg_f1 = 0.0;
};

// The six stock rows: component resections first, full model last.
inline std::vector<AblationFlags> default_ablation_rows() {
  return {
      {false, false, false, false},  // plain reconstruction transformer
      {false, false, true, true},
      {true, true, false, true},
      {false, true, false, true},
      {false, false, false, true},
      {true, true, true, true},
  };
}

inline AblationResult ablation_run(const TimeSeries& train_raw, const TimeSeries& test_raw,
                                   const ModelConfig& base_cfg, const TrainConfig& base_tcfg,
                                   const ScoreOptions& opt,
                                   const std::vector<AblationFlags>& rows = default_ablation_rows()) {
  if (rows.empty()) throw ConfigError("ablation_run: no rows");
  AblationResult out;
  std::size_t ok = 0;
  for (const AblationFlags& f : rows) {
    AblationRow row;
    row.flags = f;
    try {
      TrainConfig tcfg = base_tcfg;
      tcfg.enable_min = f.min_on;
      tcfg.enable_max = f.max_on;
      tcfg.enable_contrastive = f.contrastive_on;
      tcfg.enable_automask = f.automask_on;
      row.eval = run_pipeline(train_raw, test_raw, base_cfg, tcfg, opt).eval_adjusted;
      out.avg_f1 += row.eval.f1;
      ++ok;
    } catch (const std::exception& e) {
      row.failed = true;
      row.error = e.what();
    }
    out.rows.push_back(row);
  }
  if (ok > 0) out.avg_f1 /= static_cast<double>(ok);
  return out;
}

}  // namespace amad
