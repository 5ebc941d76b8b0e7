#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "amad/data.hpp"
#include "amad/model.hpp"
#include "amad/training.hpp"

namespace amad {

// ---------------------------------------------------------------------------
// anomaly score
// ---------------------------------------------------------------------------

// Per-position score of one window: softmax over positions of the negated
// divergence, times the squared L2 reconstruction error of that position.
inline std::vector<double> anomaly_score(const Tensor& x_window, const Tensor& recon_window,
                                         const std::vector<double>& cad_window) {
  if (x_window.shape() != recon_window.shape() || x_window.ndim() != 2) {
    throw ShapeError("anomaly_score: window shapes " + shape_str(x_window.shape()) + " vs " +
                     shape_str(recon_window.shape()));
  }
  const std::size_t n = x_window.dim(0), d = x_window.dim(1);
  if (cad_window.size() != n) {
    throw ShapeError("anomaly_score: divergence length " + std::to_string(cad_window.size()) +
                     " vs window " + std::to_string(n));
  }
  for (double v : cad_window) {
    if (!std::isfinite(v)) throw NumericError("anomaly_score: non-finite divergence");
  }
  std::vector<double> weight(n);
  double mx = -cad_window[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, -cad_window[i]);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    weight[i] = std::exp(-cad_window[i] - mx);
    z += weight[i];
  }
  std::vector<double> scores(n);
  for (std::size_t i = 0; i < n; ++i) {
    double err = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double diff = x_window.data()[i * d + c] - recon_window.data()[i * d + c];
      err += diff * diff;
    }
    scores[i] = (weight[i] / z) * err;
  }
  return scores;
}

// Scores a whole normalised series with non-overlapping windows; a final
// partial window is left-padded by repeating its first frame and the pad
// positions are excluded from the output. Without the automask branch the
// score is the plain per-position squared error.
inline std::vector<double> score_series(const AmadParams& params, const ModelConfig& cfg,
                                        const TimeSeries& series, std::size_t batch = 64) {
  const std::size_t N = cfg.window_len;
  if (series.length < 1) throw DataError("score_series: empty series");
  if (series.dims != cfg.input_dim) {
    throw ShapeError("score_series: series has " + std::to_string(series.dims) +
                     " channels, model expects " + std::to_string(cfg.input_dim));
  }

  struct Piece {
    std::size_t start;  // series offset of the first scored position
    std::size_t pad;    // leading pad positions to drop
  };
  std::vector<Piece> pieces;
  const std::size_t full = series.length / N;
  for (std::size_t i = 0; i < full; ++i) pieces.push_back({i * N, 0});
  const std::size_t rest = series.length - full * N;
  if (rest > 0) pieces.push_back({full * N, N - rest});

  std::vector<double> out(series.length, 0.0);
  for (std::size_t first = 0; first < pieces.size(); first += batch) {
    const std::size_t count = std::min(batch, pieces.size() - first);
    Tensor x(Shape{count, N, series.dims});
    double* X = x.data();
    for (std::size_t b = 0; b < count; ++b) {
      const Piece& pc = pieces[first + b];
      for (std::size_t p = 0; p < N; ++p) {
        const std::size_t t = p < pc.pad ? pc.start : pc.start + (p - pc.pad);
        for (std::size_t c = 0; c < series.dims; ++c)
          X[(b * N + p) * series.dims + c] = series.at(t, c);
      }
    }
    ForwardOutput fwd = model_forward(x, params, cfg);
    std::vector<double> cad_vals;
    if (cfg.use_automask) {
      Tensor cv = cad(fwd.attn);  // [count, N]
      cad_vals.assign(cv.data(), cv.data() + cv.size());
    }
    for (std::size_t b = 0; b < count; ++b) {
      const Piece& pc = pieces[first + b];
      Tensor xw(Shape{N, series.dims},
                std::vector<double>(X + b * N * series.dims, X + (b + 1) * N * series.dims));
      Tensor rw(Shape{N, series.dims},
                std::vector<double>(fwd.recon.data() + b * N * series.dims,
                                    fwd.recon.data() + (b + 1) * N * series.dims));
      std::vector<double> win_scores;
      if (cfg.use_automask) {
        std::vector<double> cw(cad_vals.begin() + static_cast<long>(b * N),
                               cad_vals.begin() + static_cast<long>((b + 1) * N));
        win_scores = anomaly_score(xw, rw, cw);
      } else {
        win_scores.resize(N);
        for (std::size_t p = 0; p < N; ++p) {
          double err = 0.0;
          for (std::size_t c = 0; c < series.dims; ++c) {
            const double diff = xw.data()[p * series.dims + c] - rw.data()[p * series.dims + c];
            err += diff * diff;
          }
          win_scores[p] = err;
        }
      }
      for (std::size_t p = pc.pad; p < N; ++p) out[pc.start + (p - pc.pad)] = win_scores[p];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// thresholding and evaluation
// ---------------------------------------------------------------------------

// (100-ar)-th percentile with linear interpolation between order statistics.
inline double threshold_from_percentile(std::vector<double> scores, double ar) {
  if (scores.empty()) throw DataError("threshold_from_percentile: no scores");
  if (ar <= 0.0 || ar >= 100.0) {
    throw ConfigError("threshold_from_percentile: ar must be in (0,100), got " +
                      std::to_string(ar));
  }
  std::sort(scores.begin(), scores.end());
  const double rank = (100.0 - ar) / 100.0 * static_cast<double>(scores.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(rank);
  const double frac = rank - static_cast<double>(lo);
  if (lo + 1 >= scores.size()) return scores.back();
  return scores[lo] + frac * (scores[lo + 1] - scores[lo]);
}

// Marks every ground-truth anomalous segment fully detected if any flag
// inside it is raised; flags outside segments are untouched.
inline std::vector<std::uint8_t> point_adjust(const std::vector<std::uint8_t>& flags,
                                              const std::vector<std::uint8_t>& ground_truth) {
  if (flags.size() != ground_truth.size()) {
    throw ShapeError("point_adjust: " + std::to_string(flags.size()) + " flags vs " +
                     std::to_string(ground_truth.size()) + " labels");
  }
  std::vector<std::uint8_t> adjusted = flags;
  std::size_t i = 0;
  const std::size_t n = flags.size();
  while (i < n) {
    if (!ground_truth[i]) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < n && ground_truth[j]) ++j;
    bool hit = false;
    for (std::size_t t = i; t < j && !hit; ++t) hit = flags[t] != 0;
    if (hit) {
      for (std::size_t t = i; t < j; ++t) adjusted[t] = 1;
    }
    i = j;
  }
  return adjusted;
}

struct EvalReport {
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  std::size_t tp = 0, fp = 0, fn = 0;
};

inline EvalReport precision_recall_f1(const std::vector<std::uint8_t>& flags,
                                      const std::vector<std::uint8_t>& ground_truth) {
  if (flags.size() != ground_truth.size()) {
    throw ShapeError("precision_recall_f1: " + std::to_string(flags.size()) + " flags vs " +
                     std::to_string(ground_truth.size()) + " labels");
  }
  EvalReport r;
  for (std::size_t i = 0; i < flags.size(); ++i) {
    if (flags[i] && ground_truth[i]) ++r.tp;
    else if (flags[i] && !ground_truth[i]) ++r.fp;
    else if (!flags[i] && ground_truth[i]) ++r.fn;
  }
  r.precision = r.tp + r.fp > 0 ? static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fp) : 0.0;
  r.recall = r.tp + r.fn > 0 ? static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fn) : 0.0;
  r.f1 = r.precision + r.recall > 0.0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
                                      : 0.0;
  return r;
}

struct ScoreReport {
  std::vector<double> scores;
  double threshold = 0.0;
  std::vector<std::uint8_t> flags_raw;
  std::vector<std::uint8_t> flags_adjusted;
  double ar = 1.0;
};

struct ScoreOptions {
  double ar = 1.0;
  // Percentile population: training plus test scores by default, test-only
  // behind this flag.
  bool population_test_only = false;
};

inline ScoreReport make_score_report(const std::vector<double>& test_scores,
                                     const std::vector<double>& train_scores,
                                     const std::vector<std::uint8_t>& labels,
                                     const ScoreOptions& opt) {
  std::vector<double> population = test_scores;
  if (!opt.population_test_only) {
    population.insert(population.end(), train_scores.begin(), train_scores.end());
  }
  ScoreReport rep;
  rep.scores = test_scores;
  rep.ar = opt.ar;
  rep.threshold = threshold_from_percentile(population, opt.ar);
  rep.flags_raw.resize(test_scores.size());
  for (std::size_t i = 0; i < test_scores.size(); ++i) {
    rep.flags_raw[i] = test_scores[i] > rep.threshold ? 1 : 0;
  }
  rep.flags_adjusted = labels.empty() ? rep.flags_raw : point_adjust(rep.flags_raw, labels);
  return rep;
}

}  // namespace amad
