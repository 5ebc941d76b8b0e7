#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "amad/data.hpp"
#include "amad/model.hpp"
#include "amad/ops.hpp"

namespace amad {

struct TrainConfig {
  double lambda = 3.0;        // CAD loss weight
  double tau = 0.35;          // contrastive temperature
  double lr = 0.02;
  double lr_decay = 0.5;      // per epoch
  std::size_t batch = 256;
  std::size_t max_epochs = 10;
  std::size_t patience = 3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double val_fraction = 0.2;
  std::size_t train_stride = 1;
  // Ablation switches.
  bool enable_min = true;
  bool enable_max = true;
  bool enable_contrastive = true;
  bool enable_automask = true;
  // The reconstruction term is shared by both Max-Min phase losses, so its
  // gradient would count twice per step; halving it keeps lambda the only
  // knob on the CAD trade-off.
  bool halve_shared_recon = true;

  void validate() const {
    if (lambda <= 0.0) throw ConfigError("lambda must be positive");
    if (tau <= 0.0) throw ConfigError("tau must be positive");
    if (lr <= 0.0) throw ConfigError("lr must be positive");
    if (lr_decay <= 0.0 || lr_decay > 1.0) throw ConfigError("lr_decay must be in (0,1]");
    if (val_fraction <= 0.0 || val_fraction >= 1.0) throw ConfigError("val_fraction must be in (0,1)");
    if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
    if (patience < 1) throw ConfigError("patience must be >= 1");
    if (train_stride < 1) throw ConfigError("train_stride must be >= 1");
    if (enable_contrastive && batch < 2) {
      throw ConfigError("contrastive strategy needs batch >= 2 for negatives");
    }
    if ((enable_min || enable_max || enable_contrastive) && !enable_automask) {
      throw ConfigError("min/max/contrastive strategies require the automask branch");
    }
  }
};

struct LossBreakdown {
  double recon = 0.0;        // ||x - recon||_F^2 / B
  double cad_l1 = 0.0;       // ||CAD||_1 / B
  double contrastive = 0.0;
  double total_min = 0.0;
  double total_max = 0.0;
};

// Instrumentation: how many times the CAD and contrastive paths actually
// ran (ablation rows assert these stay at zero).
struct Counters {
  std::atomic<std::uint64_t> cad_evals{0};
  std::atomic<std::uint64_t> contrastive_evals{0};
  void reset() {
    cad_evals = 0;
    contrastive_evals = 0;
  }
};

inline Counters& counters() {
  static Counters c;
  return c;
}

// ---------------------------------------------------------------------------
// divergences
// ---------------------------------------------------------------------------

// Symmetric Jensen-Shannon divergence of two distributions, natural log.
// 0 <= JS <= ln 2.
inline double js_divergence(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size() || p.empty()) {
    throw ContractError("js_divergence: distributions of length " + std::to_string(p.size()) +
                        " vs " + std::to_string(q.size()));
  }
  Tensor a(Shape{p.size()}, p);
  Tensor b(Shape{q.size()}, q);
  return js_divergence_rows(a, b).item();
}

// Per-position divergence between the two attention families, averaged over
// layers and heads: -> [B,N], entries in [0, ln 2].
inline Tensor cad_layers(const std::vector<Tensor>& automask, const std::vector<Tensor>& plain) {
  if (automask.size() != plain.size() || automask.empty()) {
    throw ContractError("cad: " + std::to_string(automask.size()) + " automask layers vs " +
                        std::to_string(plain.size()) + " plain layers");
  }
  counters().cad_evals++;
  Tensor acc;
  for (std::size_t l = 0; l < automask.size(); ++l) {
    Tensor js = js_divergence_rows(automask[l], plain[l]);  // [B,h,N]
    Tensor per_pos = mean_axis(js, 1);                      // [B,N]
    acc = l == 0 ? per_pos : add(acc, per_pos);
  }
  return scale(acc, 1.0 / static_cast<double>(automask.size()));
}

inline Tensor cad(const AttentionPack& attn) { return cad_layers(attn.automask, attn.plain); }

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

// ||x - recon||_F^2 - lambda_signed * ||cad_vec||_1, batch-mean.
inline Tensor recon_loss(const Tensor& x, const Tensor& recon, const Tensor& cad_vec,
                         double lambda_signed) {
  if (x.shape() != recon.shape()) {
    throw ShapeError("recon_loss: shapes " + shape_str(x.shape()) + " vs " +
                     shape_str(recon.shape()));
  }
  const double inv_b = 1.0 / static_cast<double>(x.shape()[0]);
  Tensor err = scale(frobenius_sq(subtract(x, recon)), inv_b);
  if (!cad_vec.defined() || lambda_signed == 0.0) return err;
  return add(err, scale(l1_norm(cad_vec), -lambda_signed * inv_b));
}

struct MaxMinLosses {
  Tensor loss_min;   // CAD flows through the automask branch only
  Tensor loss_max;   // CAD flows through the plain branch only
  double recon_value = 0.0;   // unhalved ||x - recon||_F^2 / B
  double cad_l1_value = 0.0;  // ||CAD||_1 / B
};

// Builds the two phase losses from one forward pass. Minimising loss_min
// shrinks the divergence through the automask branch (the plain branch is
// detached); minimising loss_max grows it through the plain branch.
// With halve_shared_recon the shared reconstruction term enters each phase
// at half weight so that accumulating both backwards counts it once.
inline MaxMinLosses maxmin_losses(const Tensor& x, const ForwardOutput& fwd, double lambda,
                                  bool halve_shared_recon = true) {
  if (lambda <= 0.0) throw ConfigError("maxmin_losses: lambda must be positive");
  const double inv_b = 1.0 / static_cast<double>(x.shape()[0]);
  const double recon_w = halve_shared_recon ? 0.5 : 1.0;

  Tensor err = frobenius_sq(subtract(x, fwd.recon));
  Tensor recon_term = scale(err, recon_w * inv_b);

  std::vector<Tensor> a_det, s_det;
  for (const Tensor& t : fwd.attn.automask) a_det.push_back(t.detached());
  for (const Tensor& t : fwd.attn.plain) s_det.push_back(t.detached());

  Tensor cad_min = cad_layers(fwd.attn.automask, s_det);  // A live
  Tensor cad_max = cad_layers(a_det, fwd.attn.plain);     // S live

  MaxMinLosses out;
  out.loss_min = add(recon_term, scale(l1_norm(cad_min), lambda * inv_b));
  out.loss_max = add(recon_term, scale(l1_norm(cad_max), -lambda * inv_b));
  out.recon_value = err.item() * inv_b;
  out.cad_l1_value = l1_norm(cad_min.detached()).item() * inv_b;
  return out;
}

// Instance-discrimination alignment of the two attention families: per
// layer the flattened plain maps score against the flattened automask maps
// of the whole batch, positives on the diagonal. Cross-entropy is
// mean-reduced per layer, summed over layers, then divided by the batch
// size.
inline Tensor contrastive_loss(const AttentionPack& attn, double tau) {
  if (attn.automask.size() != attn.plain.size() || attn.automask.empty()) {
    throw ContractError("contrastive_loss: mismatched attention layers");
  }
  const Shape& s = attn.plain[0].shape();
  const std::size_t B = s[0];
  if (B < 2) throw ConfigError("contrastive_loss: batch must be >= 2, got " + std::to_string(B));
  counters().contrastive_evals++;
  const std::size_t flat = s[1] * s[2] * s[3];
  const double temp = std::exp(tau);
  Tensor total;
  for (std::size_t u = 0; u < attn.plain.size(); ++u) {
    Tensor s_flat = reshape(attn.plain[u], Shape{B, flat});
    Tensor a_flat = reshape(attn.automask[u], Shape{B, flat});
    Tensor logits = scale(matmul(s_flat, transpose(a_flat)), temp);
    Tensor ce = cross_entropy_identity(logits);
    total = u == 0 ? ce : add(total, ce);
  }
  return scale(total, 1.0 / static_cast<double>(B));
}

// ---------------------------------------------------------------------------
// optimisation
// ---------------------------------------------------------------------------

// Standard bias-corrected Adam over a fixed parameter list; slot i keeps
// its own first/second moment buffers.
class AdamOptimizer {
 public:
  AdamOptimizer(double beta1, double beta2, double eps)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(std::vector<std::pair<std::string, Tensor>>& live, GradTape& tape, double lr) {
    if (m_.empty()) {
      m_.resize(live.size());
      v_.resize(live.size());
      for (std::size_t i = 0; i < live.size(); ++i) {
        m_[i].assign(live[i].second.size(), 0.0);
        v_[i].assign(live[i].second.size(), 0.0);
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < live.size(); ++i) {
      Tensor g = tape.grad_tensor(live[i].second);
      const double* G = g.data();
      double* P = live[i].second.data();
      double* M = m_[i].data();
      double* V = v_[i].data();
      for (std::size_t j = 0; j < g.size(); ++j) {
        if (std::isnan(G[j])) {
          throw NumericError("adam: NaN gradient in parameter " + live[i].first);
        }
        M[j] = beta1_ * M[j] + (1.0 - beta1_) * G[j];
        V[j] = beta2_ * V[j] + (1.0 - beta2_) * G[j] * G[j];
        const double mhat = M[j] / bc1;
        const double vhat = V[j] / bc2;
        P[j] -= lr * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  long steps() const { return t_; }

 private:
  double beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Stops after `patience` consecutive epochs without improvement.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience) : patience_(patience) {}

  bool observe(double val) {
    if (val < best_) {
      best_ = val;
      bad_ = 0;
      improved_ = true;
      return false;
    }
    improved_ = false;
    return ++bad_ >= patience_;
  }

  bool improved() const { return improved_; }
  double best() const { return best_; }

 private:
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t bad_ = 0;
  bool improved_ = false;
};

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

struct EpochStats {
  std::size_t epoch = 0;
  LossBreakdown losses;
  double val_recon = 0.0;
  double lr = 0.0;
};

struct FitResult {
  AmadParams params;          // best-validation checkpoint
  ModelConfig cfg;            // effective config (automask flag applied)
  std::vector<EpochStats> log;
  std::size_t epochs_run = 0;
};

namespace detail {

inline double validation_recon(const AmadParams& params, const ModelConfig& cfg,
                               const TimeSeries& series, const std::vector<std::size_t>& offsets,
                               std::size_t batch) {
  double total = 0.0;
  for (std::size_t first = 0; first < offsets.size(); first += batch) {
    const std::size_t count = std::min(batch, offsets.size() - first);
    Tensor x = materialize_windows(series, offsets, first, count, cfg.window_len);
    ForwardOutput fwd = model_forward(x, params, cfg);
    const double* X = x.data();
    const double* R = fwd.recon.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double d = X[i] - R[i];
      total += d * d;
    }
  }
  return total / static_cast<double>(offsets.size());
}

}  // namespace detail

// Trains on an already-normalised series: seeded shuffling, per-batch
// Max-Min + contrastive objectives with one accumulated optimizer step,
// exponential lr decay, early stopping on a time-ordered validation tail.
inline FitResult fit(const TimeSeries& train, const ModelConfig& cfg, const TrainConfig& tcfg) {
  cfg.validate();
  tcfg.validate();
  ModelConfig eff = cfg;
  eff.use_automask = tcfg.enable_automask;

  if (train.length < eff.window_len) {
    throw DataError("fit: series of length " + std::to_string(train.length) +
                    " is shorter than one window (" + std::to_string(eff.window_len) + ")");
  }
  WindowBatch all = sliding_windows(train, eff.window_len, tcfg.train_stride);
  std::size_t n_val = static_cast<std::size_t>(
      std::llround(tcfg.val_fraction * static_cast<double>(all.offsets.size())));
  if (n_val >= all.offsets.size()) n_val = all.offsets.size() - 1;
  const std::size_t n_train = all.offsets.size() - n_val;
  std::vector<std::size_t> train_offsets(all.offsets.begin(), all.offsets.begin() + n_train);
  std::vector<std::size_t> val_offsets(all.offsets.begin() + n_train, all.offsets.end());
  if (val_offsets.empty()) val_offsets = train_offsets;  // degenerate tiny series

  AmadParams params = init_params(eff);
  AdamOptimizer adam(tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps);
  EarlyStopper stopper(tcfg.patience);
  Rng shuffle_rng(eff.seed ^ 0x9e3779b97f4a7c15ULL);

  const bool maxmin_on = tcfg.enable_automask && (tcfg.enable_min || tcfg.enable_max);
  const bool both_phases = tcfg.enable_min && tcfg.enable_max;

  FitResult result;
  result.cfg = eff;
  result.params = params.cloned();
  double lr = tcfg.lr;

  for (std::size_t epoch = 1; epoch <= tcfg.max_epochs; ++epoch) {
    std::vector<std::size_t> order = train_offsets;
    shuffle_rng.shuffle(order);

    LossBreakdown sums;
    std::size_t n_batches = 0;
    for (std::size_t first = 0; first < order.size(); first += tcfg.batch) {
      std::size_t count = std::min(tcfg.batch, order.size() - first);
      if (count < 2 && tcfg.enable_contrastive) continue;  // no negatives
      Tensor x = materialize_windows(train, order, first, count, eff.window_len);

      GradTape tape;
      std::vector<std::pair<std::string, Tensor>> live;
      AmadParams attached = params.attached(tape);
      attached.for_each_learnable(
          [&](const std::string& name, Tensor& t) { live.emplace_back(name, t); });

      ForwardOutput fwd = model_forward(x, attached, eff);
      const double inv_b = 1.0 / static_cast<double>(count);

      LossBreakdown batch_losses;
      if (maxmin_on) {
        const bool halve = both_phases && tcfg.halve_shared_recon;
        MaxMinLosses mm = maxmin_losses(x, fwd, tcfg.lambda, halve);
        batch_losses.recon = mm.recon_value;
        batch_losses.cad_l1 = mm.cad_l1_value;
        batch_losses.total_min = mm.loss_min.item();
        batch_losses.total_max = mm.loss_max.item();
        if (!std::isfinite(batch_losses.total_min) || !std::isfinite(batch_losses.total_max)) {
          throw NumericError("fit: non-finite Max-Min loss at epoch " + std::to_string(epoch));
        }
        if (tcfg.enable_min) tape.backward(mm.loss_min);
        if (tcfg.enable_max) tape.backward(mm.loss_max);
      } else {
        Tensor plain = scale(frobenius_sq(subtract(x, fwd.recon)), inv_b);
        batch_losses.recon = plain.item();
        if (!std::isfinite(batch_losses.recon)) {
          throw NumericError("fit: non-finite reconstruction loss at epoch " +
                             std::to_string(epoch));
        }
        tape.backward(plain);
      }
      if (tcfg.enable_contrastive) {
        Tensor con = contrastive_loss(fwd.attn, tcfg.tau);
        batch_losses.contrastive = con.item();
        if (!std::isfinite(batch_losses.contrastive)) {
          throw NumericError("fit: non-finite contrastive loss at epoch " + std::to_string(epoch));
        }
        tape.backward(con);
      }
      adam.step(live, tape, lr);

      sums.recon += batch_losses.recon;
      sums.cad_l1 += batch_losses.cad_l1;
      sums.contrastive += batch_losses.contrastive;
      sums.total_min += batch_losses.total_min;
      sums.total_max += batch_losses.total_max;
      ++n_batches;
    }
    if (n_batches == 0) throw DataError("fit: no usable batches");

    EpochStats stats;
    stats.epoch = epoch;
    const double inv_nb = 1.0 / static_cast<double>(n_batches);
    stats.losses.recon = sums.recon * inv_nb;
    stats.losses.cad_l1 = sums.cad_l1 * inv_nb;
    stats.losses.contrastive = sums.contrastive * inv_nb;
    stats.losses.total_min = sums.total_min * inv_nb;
    stats.losses.total_max = sums.total_max * inv_nb;
    stats.val_recon = detail::validation_recon(params, eff, train, val_offsets, tcfg.batch);
    stats.lr = lr;
    result.log.push_back(stats);
    result.epochs_run = epoch;

    const bool stop = stopper.observe(stats.val_recon);
    if (stopper.improved()) result.params = params.cloned();
    if (stop) break;
    lr *= tcfg.lr_decay;
  }
  return result;
}

}  // namespace amad
