#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "amad/training.hpp"
#include "testutil.hpp"

using namespace amad;
using testutil::max_rel_err;
using testutil::numeric_grad;
using testutil::random_tensor;
using testutil::to_vec;
using Catch::Approx;

namespace {

constexpr double kLn2 = 0.693147180559945309;

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.window_len = 6;
  cfg.input_dim = 3;
  cfg.mixup_alpha = 0.6;
  cfg.seed = 3;
  return cfg;
}

AttentionPack random_pack(Rng& rng, std::size_t layers, std::size_t B, std::size_t h,
                          std::size_t N) {
  AttentionPack pack;
  for (std::size_t l = 0; l < layers; ++l) {
    pack.automask.push_back(softmax_last_axis(testutil::random_tensor(rng, {B, h, N, N}, -2, 2)));
    pack.plain.push_back(softmax_last_axis(testutil::random_tensor(rng, {B, h, N, N}, -2, 2)));
  }
  return pack;
}

}  // namespace

TEST_CASE("js divergence values") {
  CHECK(js_divergence({0.5, 0.5}, {0.5, 0.5}) == Approx(0.0).margin(1e-15));
  CHECK(js_divergence({1, 0}, {0, 1}) == Approx(kLn2).margin(1e-12));
  CHECK(js_divergence({0.75, 0.25}, {0.25, 0.75}) == Approx(0.130812035941137).margin(1e-12));
}

TEST_CASE("js divergence contract checks") {
  CHECK_THROWS_AS(js_divergence({0.5, 0.5}, {0.5}), ContractError);
  CHECK_THROWS_AS(js_divergence({0.9, 0.3}, {0.5, 0.5}), ContractError);
  CHECK_THROWS_AS(js_divergence({-0.1, 1.1}, {0.5, 0.5}), ContractError);
}

TEST_CASE("js divergence symmetry and upper bound") {
  Rng rng(61);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.uniform_int(0, 8);
    std::vector<double> p(n), q(n);
    double sp = 0, sq = 0;
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = rng.uniform(0.0, 1.0);
      q[i] = rng.uniform(0.0, 1.0);
      sp += p[i];
      sq += q[i];
    }
    for (std::size_t i = 0; i < n; ++i) {
      p[i] /= sp;
      q[i] /= sq;
    }
    const double pq = js_divergence(p, q);
    const double qp = js_divergence(q, p);
    REQUIRE(std::fabs(pq - qp) < 1e-12);
    REQUIRE(pq >= 0.0);
    REQUIRE(pq <= kLn2 + 1e-12);
    REQUIRE(js_divergence(p, p) == Approx(0.0).margin(1e-15));
  }
}

TEST_CASE("js rows gradient matches finite differences") {
  Rng rng(62);
  Tensor a_logits = random_tensor(rng, {2, 3, 4}, -2, 2);
  Tensor b_logits = random_tensor(rng, {2, 3, 4}, -2, 2);
  auto eval = [&] {
    Tensor a = softmax_last_axis(a_logits);
    Tensor b = softmax_last_axis(b_logits);
    return sum_all(js_divergence_rows(a, b)).item();
  };
  GradTape tape;
  Tensor al = tape.leaf(a_logits);
  Tensor bl = tape.leaf(b_logits);
  tape.backward(sum_all(js_divergence_rows(softmax_last_axis(al), softmax_last_axis(bl))));
  CHECK(max_rel_err(to_vec(tape.grad_tensor(al)), numeric_grad(eval, a_logits)) < 1e-6);
  CHECK(max_rel_err(to_vec(tape.grad_tensor(bl)), numeric_grad(eval, b_logits)) < 1e-6);
}

TEST_CASE("cad of identical attention is zero and bounded") {
  Rng rng(63);
  AttentionPack pack = random_pack(rng, 2, 2, 2, 5);
  AttentionPack same;
  same.automask = pack.automask;
  same.plain = pack.automask;
  Tensor zero = cad(same);
  for (double v : to_vec(zero)) REQUIRE(v == 0.0);

  Tensor c = cad(pack);
  CHECK(c.shape() == Shape{2, 5});
  for (double v : to_vec(c)) {
    REQUIRE(v >= 0.0);
    REQUIRE(v <= kLn2 + 1e-12);
  }
}

TEST_CASE("cad disjoint-support row reaches ln 2") {
  Tensor a(Shape{1, 1, 2, 2}, {1, 0, 0.5, 0.5});
  Tensor s(Shape{1, 1, 2, 2}, {0, 1, 0.5, 0.5});
  Tensor c = cad_layers({a}, {s});
  CHECK(c.data()[0] == Approx(kLn2).margin(1e-9));
  CHECK(c.data()[1] == Approx(0.0).margin(1e-15));
}

TEST_CASE("cad averages over layers") {
  Rng rng(64);
  AttentionPack one = random_pack(rng, 1, 1, 1, 4);
  AttentionPack two = random_pack(rng, 1, 1, 1, 4);
  Tensor c1 = cad(one);
  Tensor c2 = cad(two);
  AttentionPack both;
  both.automask = {one.automask[0], two.automask[0]};
  both.plain = {one.plain[0], two.plain[0]};
  Tensor c = cad(both);
  for (std::size_t i = 0; i < c.size(); ++i) {
    REQUIRE(c.data()[i] == Approx(0.5 * (c1.data()[i] + c2.data()[i])).margin(1e-12));
  }
}

TEST_CASE("cad rejects mismatched layer counts") {
  Rng rng(65);
  AttentionPack pack = random_pack(rng, 2, 1, 1, 3);
  CHECK_THROWS_AS(cad_layers(pack.automask, {pack.plain[0]}), ContractError);
}

TEST_CASE("recon_loss arithmetic") {
  Tensor x(Shape{1, 2, 2}, {1, 2, 3, 4});
  Tensor same = x.clone();
  Tensor zero_cad(Shape{1, 2}, 0.0);
  CHECK(recon_loss(x, same, zero_cad, 3.0).item() == Approx(0.0));

  // All +-1 errors with lambda 0: N*d on a single-item batch.
  Tensor recon(Shape{1, 2, 2}, {0, 3, 2, 5});
  CHECK(recon_loss(x, recon, zero_cad, 0.0).item() == Approx(4.0));

  // recon term 5, lambda 3, cad l1 2 -> 5 - 6 = -1.
  Tensor x5(Shape{1, 1, 1}, {std::sqrt(5.0)});
  Tensor r0(Shape{1, 1, 1}, {0.0});
  Tensor cad2(Shape{1, 2}, {1.5, 0.5});
  CHECK(recon_loss(x5, r0, cad2, 3.0).item() == Approx(-1.0).margin(1e-12));
}

TEST_CASE("maxmin losses cancel to twice the reconstruction term") {
  ModelConfig cfg = tiny_config();
  AmadParams params = init_params(cfg);
  Rng rng(66);
  Tensor x = random_tensor(rng, {2, 6, 3});

  GradTape tape;
  AmadParams live = params.attached(tape);
  ForwardOutput fwd = model_forward(x, live, cfg);

  MaxMinLosses unhalved = maxmin_losses(x, fwd, 3.0, /*halve=*/false);
  CHECK(unhalved.loss_min.item() + unhalved.loss_max.item() ==
        Approx(2.0 * unhalved.recon_value).margin(1e-9));

  MaxMinLosses halved = maxmin_losses(x, fwd, 3.0, /*halve=*/true);
  CHECK(halved.loss_min.item() + halved.loss_max.item() ==
        Approx(halved.recon_value).margin(1e-9));
  CHECK_THROWS_AS(maxmin_losses(x, fwd, 0.0), ConfigError);
}

TEST_CASE("detach exactness per phase") {
  ModelConfig cfg = tiny_config();
  AmadParams params = init_params(cfg);
  Rng rng(67);
  Tensor x = random_tensor(rng, {2, 6, 3});
  const double lambda = 3.0;
  const double inv_b = 0.5;

  SECTION("max phase: rotary frequencies receive exactly zero") {
    GradTape tape;
    AmadParams live = params.attached(tape);
    ForwardOutput fwd = model_forward(x, live, cfg);
    std::vector<Tensor> a_det;
    for (const Tensor& t : fwd.attn.automask) a_det.push_back(t.detached());
    Tensor cad_max = cad_layers(a_det, fwd.attn.plain);
    tape.backward(scale(l1_norm(cad_max), -lambda * inv_b));
    CHECK(to_vec(tape.grad_tensor(live.layers[0].omega)) ==
          std::vector<double>(cfg.n_heads, 0.0));
    // The live automask distribution node is never reached.
    CHECK(to_vec(tape.grad_tensor(fwd.attn.automask[0])) ==
          std::vector<double>(fwd.attn.automask[0].size(), 0.0));
  }

  SECTION("min phase: plain branch and value path receive exactly zero") {
    GradTape tape;
    AmadParams live = params.attached(tape);
    ForwardOutput fwd = model_forward(x, live, cfg);
    std::vector<Tensor> s_det;
    for (const Tensor& t : fwd.attn.plain) s_det.push_back(t.detached());
    Tensor cad_min = cad_layers(fwd.attn.automask, s_det);
    tape.backward(scale(l1_norm(cad_min), lambda * inv_b));
    CHECK(to_vec(tape.grad_tensor(fwd.attn.plain[0])) ==
          std::vector<double>(fwd.attn.plain[0].size(), 0.0));
    CHECK(to_vec(tape.grad_tensor(live.layers[0].w_v)) ==
          std::vector<double>(params.layers[0].w_v.size(), 0.0));
    CHECK(to_vec(tape.grad_tensor(live.layers[0].ffn_w)) ==
          std::vector<double>(params.layers[0].ffn_w.size(), 0.0));
    // omega is live through the automask branch.
    bool any_nonzero = false;
    for (double v : to_vec(tape.grad_tensor(live.layers[0].omega))) any_nonzero |= v != 0.0;
    CHECK(any_nonzero);
  }
}

TEST_CASE("contrastive loss closed form and errors") {
  // Attention constant across the batch: every pairwise logit is equal, so
  // per-layer mean cross-entropy is ln B and the loss is L*ln(B)/B.
  auto constant_pack = [](std::size_t layers, std::size_t B, std::size_t h, std::size_t N) {
    AttentionPack pack;
    for (std::size_t l = 0; l < layers; ++l) {
      pack.automask.push_back(Tensor(Shape{B, h, N, N}, 1.0 / static_cast<double>(N)));
      pack.plain.push_back(Tensor(Shape{B, h, N, N}, 1.0 / static_cast<double>(N)));
    }
    return pack;
  };
  CHECK(contrastive_loss(constant_pack(1, 2, 2, 4), 0.07).item() ==
        Approx(kLn2 / 2.0).margin(1e-9));
  CHECK(contrastive_loss(constant_pack(3, 4, 2, 4), 0.35).item() ==
        Approx(3.0 * std::log(4.0) / 4.0).margin(1e-9));

  CHECK_THROWS_AS(contrastive_loss(constant_pack(1, 1, 2, 4), 0.07), ConfigError);
}

TEST_CASE("cross entropy against identity labels") {
  Tensor logits(Shape{2, 2}, {5, 0, 0, 5});
  const double expect = std::log(1.0 + std::exp(-5.0));
  CHECK(cross_entropy_identity(logits).item() == Approx(expect).margin(1e-12));
  // Divided by B as the contrastive reduction does: 0.0033576742445590343.
  CHECK(cross_entropy_identity(logits).item() / 2.0 ==
        Approx(0.0033576742445590343).margin(1e-15));

  Rng rng(68);
  Tensor raw = random_tensor(rng, {3, 3}, -2, 2);
  auto eval = [&] { return cross_entropy_identity(raw).item(); };
  GradTape tape;
  Tensor rl = tape.leaf(raw);
  tape.backward(cross_entropy_identity(rl));
  CHECK(max_rel_err(to_vec(tape.grad_tensor(rl)), numeric_grad(eval, raw)) < 1e-6);
}

TEST_CASE("contrastive gradient flows into both branches") {
  ModelConfig cfg = tiny_config();
  AmadParams params = init_params(cfg);
  Rng rng(69);
  Tensor x = random_tensor(rng, {3, 6, 3});
  GradTape tape;
  AmadParams live = params.attached(tape);
  ForwardOutput fwd = model_forward(x, live, cfg);
  tape.backward(contrastive_loss(fwd.attn, 0.21));
  bool omega_live = false;
  for (double v : to_vec(tape.grad_tensor(live.layers[0].omega))) omega_live |= v != 0.0;
  CHECK(omega_live);
  bool wq_live = false;
  for (double v : to_vec(tape.grad_tensor(live.layers[0].w_q))) wq_live |= v != 0.0;
  CHECK(wq_live);
}

TEST_CASE("adam zero gradient leaves parameters unchanged") {
  Tensor p(Shape{3}, {1.0, -2.0, 0.5});
  const std::vector<double> before = to_vec(p);
  GradTape tape;
  std::vector<std::pair<std::string, Tensor>> live{{"p", tape.leaf(p)}};
  AdamOptimizer adam(0.9, 0.999, 1e-8);
  adam.step(live, tape, 0.02);  // no backward ran; gradients are zero
  CHECK(to_vec(p) == before);
}

TEST_CASE("adam first step moves by about -lr*sign(g)") {
  Tensor p(Shape{2}, {1.0, 1.0});
  GradTape tape;
  Tensor pl = tape.leaf(p);
  // loss = 0.5*p0 - 2*p1 -> grads {0.5, -2}
  Tensor w(Shape{2}, {0.5, -2.0});
  tape.backward(sum_all(hadamard(pl, w)));
  std::vector<std::pair<std::string, Tensor>> live{{"p", pl}};
  AdamOptimizer adam(0.9, 0.999, 1e-8);
  adam.step(live, tape, 0.02);
  CHECK(p.data()[0] == Approx(1.0 - 0.02).margin(1e-6));
  CHECK(p.data()[1] == Approx(1.0 + 0.02).margin(1e-6));
}

TEST_CASE("adam rejects NaN gradients naming the parameter") {
  Tensor p(Shape{1}, {1.0});
  GradTape tape;
  Tensor pl = tape.leaf(p);
  tape.grad(pl.node())[0] = std::nan("");
  std::vector<std::pair<std::string, Tensor>> live{{"layers.0.w_q", pl}};
  AdamOptimizer adam(0.9, 0.999, 1e-8);
  try {
    adam.step(live, tape, 0.02);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("layers.0.w_q") != std::string::npos);
  }
}

TEST_CASE("early stopper counter semantics") {
  EarlyStopper s(3);
  CHECK_FALSE(s.observe(1.0));   // epoch 1: improvement
  CHECK_FALSE(s.observe(1.1));   // worse x1
  CHECK_FALSE(s.observe(1.2));   // worse x2
  CHECK(s.observe(1.3));         // worse x3 -> stop at epoch 4
  CHECK(s.best() == 1.0);
}

TEST_CASE("fit runs, logs, decays lr, and is deterministic") {
  ModelConfig cfg = tiny_config();
  TrainConfig tcfg;
  tcfg.batch = 4;
  tcfg.max_epochs = 3;
  tcfg.train_stride = 2;

  SynthResult synth = synth_generate(9, 220, 64, 3);
  const NormStats stats = fit_norm_stats(synth.train);
  const TimeSeries train = zscore(synth.train, stats);

  FitResult run1 = fit(train, cfg, tcfg);
  CHECK(run1.log.size() == run1.epochs_run);
  CHECK(run1.log.size() >= 1);
  for (std::size_t e = 0; e < run1.log.size(); ++e) {
    CHECK(run1.log[e].epoch == e + 1);
    CHECK(run1.log[e].lr == Approx(0.02 * std::pow(0.5, static_cast<double>(e))).margin(1e-15));
    CHECK(std::isfinite(run1.log[e].val_recon));
  }

  FitResult run2 = fit(train, cfg, tcfg);
  bool identical = true;
  run1.params.for_each([&](const std::string& name, Tensor& t) {
    run2.params.for_each([&](const std::string& name2, Tensor& t2) {
      if (name != name2) return;
      identical &= to_vec(t) == to_vec(t2);
    });
  });
  CHECK(identical);  // bitwise reproducible trajectories
}

TEST_CASE("fit input validation") {
  ModelConfig cfg = tiny_config();
  TrainConfig tcfg;
  TimeSeries tiny;
  tiny.length = 3;
  tiny.dims = 3;
  tiny.values.assign(9, 0.0);
  CHECK_THROWS_AS(fit(tiny, cfg, tcfg), DataError);

  TrainConfig bad = tcfg;
  bad.batch = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tcfg;
  bad.enable_automask = false;  // min/max/contrastive still on
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tcfg;
  bad.lambda = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("full pipeline gradient passes finite differences") {
  ModelConfig cfg = tiny_config();
  TrainConfig tcfg;
  tcfg.batch = 2;
  AmadParams params = init_params(cfg);
  Rng rng(70);
  Tensor x = random_tensor(rng, {2, 6, 3});

  // The detached branches are constants of the objective, so the oracle
  // freezes them at the base point; perturbing a parameter then probes
  // exactly the partial derivative the stop-gradient keeps alive.
  std::vector<Tensor> a_frozen, s_frozen;
  {
    ForwardOutput base = model_forward(x, params, cfg);
    for (const Tensor& t : base.attn.automask) a_frozen.push_back(t.detached().clone());
    for (const Tensor& t : base.attn.plain) s_frozen.push_back(t.detached().clone());
  }
  const double inv_b = 0.5;
  auto total_loss_value = [&] {
    ForwardOutput fwd = model_forward(x, params, cfg);
    const double recon = frobenius_sq(subtract(x, fwd.recon)).item() * inv_b;
    const double cad_min = l1_norm(cad_layers(fwd.attn.automask, s_frozen)).item() * inv_b;
    const double cad_max = l1_norm(cad_layers(a_frozen, fwd.attn.plain)).item() * inv_b;
    const double con = contrastive_loss(fwd.attn, tcfg.tau).item();
    // halved shared recon in each phase: 0.5r + lam*cmin + 0.5r - lam*cmax
    return recon + tcfg.lambda * (cad_min - cad_max) + con;
  };

  GradTape tape;
  AmadParams live = params.attached(tape);
  ForwardOutput fwd = model_forward(x, live, cfg);
  MaxMinLosses mm = maxmin_losses(x, fwd, tcfg.lambda, true);
  Tensor con = contrastive_loss(fwd.attn, tcfg.tau);
  tape.backward(mm.loss_min);
  tape.backward(mm.loss_max);
  tape.backward(con);

  // Spot-check a representative subset; the acceptance suite sweeps all.
  auto check_param = [&](Tensor& stored, const Tensor& live_t) {
    Tensor stored_copy = stored;  // shares buffer; numeric_grad perturbs in place
    const std::vector<double> analytic = to_vec(tape.grad_tensor(live_t));
    const std::vector<double> numeric = numeric_grad(total_loss_value, stored_copy);
    REQUIRE(max_rel_err(analytic, numeric) < 1e-4);
  };
  check_param(params.layers[0].omega, live.layers[0].omega);
  check_param(params.layers[0].w_q, live.layers[0].w_q);
  check_param(params.layers[0].ffn_b, live.layers[0].ffn_b);
  check_param(params.w_out, live.w_out);
}

TEST_CASE("omega gradient is live in the full objective") {
  ModelConfig cfg = tiny_config();
  AmadParams params = init_params(cfg);
  Rng rng(71);
  Tensor x = random_tensor(rng, {2, 6, 3});
  GradTape tape;
  AmadParams live = params.attached(tape);
  ForwardOutput fwd = model_forward(x, live, cfg);
  MaxMinLosses mm = maxmin_losses(x, fwd, 3.0, true);
  tape.backward(mm.loss_min);
  tape.backward(mm.loss_max);
  tape.backward(contrastive_loss(fwd.attn, 0.35));
  bool nonzero = false;
  for (double v : to_vec(tape.grad_tensor(live.layers[0].omega))) nonzero |= v != 0.0;
  CHECK(nonzero);
}
