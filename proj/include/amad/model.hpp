#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "amad/ops.hpp"
#include "amad/rng.hpp"
#include "amad/tensor.hpp"

namespace amad {

struct ModelConfig {
  std::size_t n_layers = 3;
  std::size_t d_model = 512;
  std::size_t n_heads = 8;
  std::size_t window_len = 100;
  std::size_t input_dim = 1;
  double mixup_alpha = 0.9;
  double rope_base = 10000.0;
  std::uint64_t seed = 1;
  bool use_automask = true;
  // Literal attention temperatures (sqrt(d_model) for the plain branch,
  // d_model for the rotary branch) instead of the shared per-head
  // 1/sqrt(d_head).
  bool paper_scaling = false;

  std::size_t d_head() const { return d_model / n_heads; }

  void validate() const {
    if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
    if (window_len < 2) throw ConfigError("window_len must be >= 2");
    if (input_dim < 1) throw ConfigError("input_dim must be >= 1");
    if (n_heads < 1 || d_model % n_heads != 0) {
      throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by " +
                        std::to_string(n_heads) + " heads");
    }
    if (d_head() % 2 != 0) {
      throw ConfigError("d_head " + std::to_string(d_head()) + " must be even for rotary pairs");
    }
    if (mixup_alpha < 0.0 || mixup_alpha > 1.0) throw ConfigError("mixup_alpha must be in [0,1]");
    if (rope_base <= 0.0) throw ConfigError("rope_base must be positive");
  }
};

struct LayerParams {
  Tensor w_q, w_k, w_v;             // [d_model, d_model]
  Tensor omega;                     // [h], per-head rotary frequency
  Tensor ffn_w;                     // [d_model, d_model]
  Tensor ffn_b;                     // [d_model]
  Tensor ln1_gamma, ln1_beta;       // [d_model]
  Tensor ln2_gamma, ln2_beta;       // [d_model]
};

// All model weights plus the fixed additive positional table. for_each
// visits every named array in declaration order; that order is the
// checkpoint layout and the optimizer slot order.
struct AmadParams {
  Tensor w_in, b_in;    // [d, d_model], [d_model]
  std::vector<LayerParams> layers;
  Tensor w_out, b_out;  // [d_model, d], [d]
  Tensor pos_table;     // [N, d_model], sinusoidal, not learnable

  template <typename Fn>
  void for_each(Fn&& fn) {
    fn("w_in", w_in);
    fn("b_in", b_in);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      LayerParams& lp = layers[l];
      fn(p + "w_q", lp.w_q);
      fn(p + "w_k", lp.w_k);
      fn(p + "w_v", lp.w_v);
      fn(p + "omega", lp.omega);
      fn(p + "ffn_w", lp.ffn_w);
      fn(p + "ffn_b", lp.ffn_b);
      fn(p + "ln1_gamma", lp.ln1_gamma);
      fn(p + "ln1_beta", lp.ln1_beta);
      fn(p + "ln2_gamma", lp.ln2_gamma);
      fn(p + "ln2_beta", lp.ln2_beta);
    }
    fn("w_out", w_out);
    fn("b_out", b_out);
    fn("pos_table", pos_table);
  }

  // Learnable subset (everything except the positional table).
  template <typename Fn>
  void for_each_learnable(Fn&& fn) {
    for_each([&](const std::string& name, Tensor& t) {
      if (name != "pos_table") fn(name, t);
    });
  }

  // Copy whose learnable tensors are registered as leaves on the tape.
  // Value buffers are shared with this instance.
  AmadParams attached(GradTape& tape) const {
    AmadParams live = *this;
    live.for_each_learnable([&](const std::string&, Tensor& t) { t = tape.leaf(t); });
    return live;
  }

  AmadParams cloned() const {
    AmadParams copy = *this;
    copy.for_each([&](const std::string&, Tensor& t) { t = t.detached().clone(); });
    return copy;
  }
};

// Per-layer attention distributions: automask[l] and plain[l] are
// [B,h,N,N] with row-stochastic last axes. automask is empty when the
// rotary branch is disabled.
struct AttentionPack {
  std::vector<Tensor> automask;
  std::vector<Tensor> plain;
};

struct ForwardOutput {
  Tensor recon;        // [B,N,d]
  AttentionPack attn;
};

// Standard interleaved sin/cos table, 0-based positions.
inline Tensor sinusoidal_table(std::size_t n_positions, std::size_t d_model) {
  Tensor table(Shape{n_positions, d_model});
  double* T = table.data();
  for (std::size_t p = 0; p < n_positions; ++p) {
    for (std::size_t i = 0; i < d_model / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(d_model));
      T[p * d_model + 2 * i] = std::sin(static_cast<double>(p) * freq);
      if (2 * i + 1 < d_model) T[p * d_model + 2 * i + 1] = std::cos(static_cast<double>(p) * freq);
    }
  }
  return table;
}

inline std::vector<double> default_positions(std::size_t n) {
  std::vector<double> pos(n);
  for (std::size_t i = 0; i < n; ++i) pos[i] = static_cast<double>(i + 1);
  return pos;
}

// Deterministic initialisation: linear weights are scaled-uniform with
// bound sqrt(6/(fan_in+fan_out)), biases zero, LayerNorm gamma=1/beta=0,
// omega all ones so the rotary branch starts as fixed-angle rotary
// embedding.
inline AmadParams init_params(const ModelConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  auto glorot = [&](std::size_t fan_in, std::size_t fan_out) {
    Tensor t(Shape{fan_in, fan_out});
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    double* d = t.data();
    for (std::size_t i = 0; i < t.size(); ++i) d[i] = rng.uniform(-bound, bound);
    return t;
  };
  AmadParams p;
  p.w_in = glorot(cfg.input_dim, cfg.d_model);
  p.b_in = Tensor(Shape{cfg.d_model}, 0.0);
  p.layers.resize(cfg.n_layers);
  for (LayerParams& lp : p.layers) {
    lp.w_q = glorot(cfg.d_model, cfg.d_model);
    lp.w_k = glorot(cfg.d_model, cfg.d_model);
    lp.w_v = glorot(cfg.d_model, cfg.d_model);
    lp.omega = Tensor(Shape{cfg.n_heads}, 1.0);
    lp.ffn_w = glorot(cfg.d_model, cfg.d_model);
    lp.ffn_b = Tensor(Shape{cfg.d_model}, 0.0);
    lp.ln1_gamma = Tensor(Shape{cfg.d_model}, 1.0);
    lp.ln1_beta = Tensor(Shape{cfg.d_model}, 0.0);
    lp.ln2_gamma = Tensor(Shape{cfg.d_model}, 1.0);
    lp.ln2_beta = Tensor(Shape{cfg.d_model}, 0.0);
  }
  p.w_out = glorot(cfg.d_model, cfg.input_dim);
  p.b_out = Tensor(Shape{cfg.input_dim}, 0.0);
  p.pos_table = sinusoidal_table(cfg.window_len, cfg.d_model);
  return p;
}

namespace detail {

inline double attention_temperature(const ModelConfig& cfg, bool rotary_branch) {
  if (!cfg.paper_scaling) return 1.0 / std::sqrt(static_cast<double>(cfg.d_head()));
  if (rotary_branch) return 1.0 / static_cast<double>(cfg.d_model);  // sqrt(d_q * d_k)
  return 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
}

}  // namespace detail

// Pre-softmax rotary correlation Q~ K~^T per head: [B,h,N,N]. Depends on
// positions only through their differences.
inline Tensor automask_scores(const Tensor& q_heads, const Tensor& k_heads, const Tensor& omega,
                              const std::vector<double>& positions, double rope_base) {
  Tensor qr = rotary_mask_embed(q_heads, omega, positions, rope_base);
  Tensor kr = rotary_mask_embed(k_heads, omega, positions, rope_base);
  return matmul(qr, transpose(kr));
}

// Rotary-masked attention distributions from full-width Q,K: [B,N,d_model]
// -> [B,h,N,N].
inline Tensor automask_attention(const Tensor& q, const Tensor& k, const Tensor& omega,
                                 const std::vector<double>& positions, const ModelConfig& cfg) {
  Tensor qh = split_heads(q, cfg.n_heads);
  Tensor kh = split_heads(k, cfg.n_heads);
  Tensor scores = automask_scores(qh, kh, omega, positions, cfg.rope_base);
  return softmax_last_axis(scale(scores, detail::attention_temperature(cfg, true)));
}

// Plain per-head attention distributions, no positional rotation.
inline Tensor self_attention(const Tensor& q, const Tensor& k, const ModelConfig& cfg) {
  Tensor qh = split_heads(q, cfg.n_heads);
  Tensor kh = split_heads(k, cfg.n_heads);
  Tensor scores = matmul(qh, transpose(kh));
  return softmax_last_axis(scale(scores, detail::attention_temperature(cfg, false)));
}

// alpha*A + (1-alpha)*S. Rows stay distributions (convex combination).
inline Tensor attn_mixup(const Tensor& a, const Tensor& s, double alpha) {
  if (alpha < 0.0 || alpha > 1.0) {
    throw ConfigError("attn_mixup: alpha " + std::to_string(alpha) + " outside [0,1]");
  }
  if (a.shape() != s.shape()) {
    throw ShapeError("attn_mixup: shapes " + shape_str(a.shape()) + " vs " + shape_str(s.shape()));
  }
  return lincomb(alpha, a, 1.0 - alpha, s);
}

struct BlockOutput {
  Tensor out;        // [B,N,d_model]
  Tensor automask;   // [B,h,N,N]; undefined when the rotary branch is off
  Tensor plain;      // [B,h,N,N]
};

inline BlockOutput amad_block_forward(const Tensor& x, const LayerParams& lp,
                                      const ModelConfig& cfg,
                                      const std::vector<double>& positions) {
  Tensor q = matmul(x, lp.w_q);
  Tensor k = matmul(x, lp.w_k);
  Tensor v = matmul(x, lp.w_v);
  Tensor v_heads = split_heads(v, cfg.n_heads);

  BlockOutput res;
  res.plain = self_attention(q, k, cfg);
  Tensor mixed;
  if (cfg.use_automask) {
    res.automask = automask_attention(q, k, lp.omega, positions, cfg);
    mixed = attn_mixup(res.automask, res.plain, cfg.mixup_alpha);
  } else {
    mixed = res.plain;
  }
  Tensor z = merge_heads(matmul(mixed, v_heads));
  Tensor h = layer_norm(add(x, z), lp.ln1_gamma, lp.ln1_beta);
  Tensor f = gelu(add(matmul(h, lp.ffn_w), lp.ffn_b));
  res.out = layer_norm(add(h, f), lp.ln2_gamma, lp.ln2_beta);
  return res;
}

// Embed, run the stacked blocks, project back to input width.
inline ForwardOutput model_forward(const Tensor& x, const AmadParams& params,
                                   const ModelConfig& cfg) {
  const Shape& s = x.shape();
  if (s.size() != 3 || s[1] != cfg.window_len || s[2] != cfg.input_dim) {
    throw ShapeError("model_forward: input " + shape_str(s) + " does not match window " +
                     std::to_string(cfg.window_len) + " x " + std::to_string(cfg.input_dim));
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x.data()[i])) throw NumericError("model_forward: non-finite input");
  }
  const std::vector<double> positions = default_positions(cfg.window_len);
  Tensor h = add(add(matmul(x, params.w_in), params.b_in), params.pos_table);
  ForwardOutput out;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    BlockOutput blk = amad_block_forward(h, params.layers[l], cfg, positions);
    h = blk.out;
    if (cfg.use_automask) out.attn.automask.push_back(blk.automask);
    out.attn.plain.push_back(blk.plain);
  }
  out.recon = add(matmul(h, params.w_out), params.b_out);
  return out;
}

}  // namespace amad
