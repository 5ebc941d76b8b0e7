#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "amad/harness.hpp"
#include "amad/scoring.hpp"
#include "testutil.hpp"

using namespace amad;
using testutil::random_tensor;
using Catch::Approx;

namespace {

constexpr double kLn2 = 0.693147180559945309;

std::vector<std::uint8_t> random_flags(Rng& rng, std::size_t n, double p) {
  std::vector<std::uint8_t> f(n);
  for (auto& v : f) v = rng.uniform01() < p ? 1 : 0;
  return f;
}

}  // namespace

TEST_CASE("anomaly score uniform divergence reduces to scaled error") {
  Tensor x(Shape{4, 2}, {1, 1, 2, 2, 3, 3, 4, 4});
  Tensor recon(Shape{4, 2}, {1, 1, 2, 2, 3, 3, 4, 4});
  std::vector<double> flat_cad(4, 0.25);
  std::vector<double> zero = anomaly_score(x, recon, flat_cad);
  for (double v : zero) CHECK(v == 0.0);  // recon == x

  Tensor off(Shape{4, 2}, {0, 1, 2, 2, 3, 3, 4, 0});
  std::vector<double> s = anomaly_score(x, off, flat_cad);
  // uniform softmax weight 1/4 times squared error per position
  CHECK(s[0] == Approx(0.25 * 1.0));
  CHECK(s[1] == Approx(0.0));
  CHECK(s[3] == Approx(0.25 * 16.0));
}

TEST_CASE("anomaly score worked two-position example") {
  Tensor x(Shape{2, 1}, {1, 1});
  Tensor recon(Shape{2, 1}, {0, 0});  // errors [1, 1]
  std::vector<double> cad_vals = {0.0, kLn2};
  std::vector<double> s = anomaly_score(x, recon, cad_vals);
  CHECK(s[0] == Approx(2.0 / 3.0).margin(1e-12));
  CHECK(s[1] == Approx(1.0 / 3.0).margin(1e-12));
}

TEST_CASE("anomaly score validates shapes and finiteness") {
  Tensor x(Shape{2, 1});
  Tensor bad(Shape{3, 1});
  CHECK_THROWS_AS(anomaly_score(x, bad, {0, 0}), ShapeError);
  CHECK_THROWS_AS(anomaly_score(x, x, {0.0}), ShapeError);
  CHECK_THROWS_AS(anomaly_score(x, x, {0.0, std::nan("")}), NumericError);
}

TEST_CASE("threshold percentile golden cases") {
  std::vector<double> scores;
  for (int i = 1; i <= 100; ++i) scores.push_back(i);
  const double thr = threshold_from_percentile(scores, 1.0);
  std::size_t flags = 0;
  for (double s : scores) flags += s > thr ? 1 : 0;
  CHECK(flags == 1);  // top 1% of 100 distinct scores

  std::vector<double> equal(50, 3.25);
  const double thr_eq = threshold_from_percentile(equal, 1.0);
  std::size_t eq_flags = 0;
  for (double s : equal) eq_flags += s > thr_eq ? 1 : 0;
  CHECK(eq_flags == 0);  // strict inequality raises nothing

  CHECK_THROWS_AS(threshold_from_percentile({}, 1.0), DataError);
  CHECK_THROWS_AS(threshold_from_percentile({1.0}, 0.0), ConfigError);
  CHECK_THROWS_AS(threshold_from_percentile({1.0}, 100.0), ConfigError);
}

TEST_CASE("threshold flag count tracks floor(n*ar/100)") {
  Rng rng(91);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 50 + rng.uniform_int(0, 3000);
    const double ar = rng.uniform(0.5, 10.0);
    std::vector<double> scores(n);
    for (std::size_t i = 0; i < n; ++i) scores[i] = rng.uniform01() * 100.0;
    const double thr = threshold_from_percentile(scores, ar);
    std::size_t flags = 0;
    for (double s : scores) flags += s > thr ? 1 : 0;
    const auto expect = static_cast<long>(static_cast<double>(n) * ar / 100.0);
    REQUIRE(std::llabs(static_cast<long>(flags) - expect) <= 1);
  }
}

TEST_CASE("point adjust protocol") {
  using Flags = std::vector<std::uint8_t>;
  CHECK(point_adjust({0, 1, 0, 0}, {1, 1, 0, 0}) == Flags{1, 1, 0, 0});
  CHECK(point_adjust({0, 0, 0}, {1, 1, 1}) == Flags{0, 0, 0});
  CHECK(point_adjust({1, 0}, {0, 0}) == Flags{1, 0});
  CHECK_THROWS_AS(point_adjust({1, 0}, {0, 0, 0}), ShapeError);
}

TEST_CASE("point adjust dominance and idempotency") {
  Rng rng(92);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 5 + rng.uniform_int(0, 60);
    const auto flags = random_flags(rng, n, 0.2);
    const auto gt = random_flags(rng, n, 0.3);
    const auto adj = point_adjust(flags, gt);
    for (std::size_t i = 0; i < n; ++i) REQUIRE(adj[i] >= flags[i]);
    REQUIRE(point_adjust(adj, gt) == adj);
  }
}

TEST_CASE("precision recall f1") {
  EvalReport perfect = precision_recall_f1({0, 1, 1, 0}, {0, 1, 1, 0});
  CHECK(perfect.precision == 1.0);
  CHECK(perfect.recall == 1.0);
  CHECK(perfect.f1 == 1.0);

  EvalReport nothing = precision_recall_f1({0, 0, 0}, {1, 1, 0});
  CHECK(nothing.precision == 0.0);
  CHECK(nothing.recall == 0.0);
  CHECK(nothing.f1 == 0.0);

  // TP=3, FP=1, FN=1
  EvalReport mixed = precision_recall_f1({1, 1, 1, 1, 0, 0}, {1, 1, 1, 0, 1, 0});
  CHECK(mixed.tp == 3);
  CHECK(mixed.fp == 1);
  CHECK(mixed.fn == 1);
  CHECK(mixed.precision == Approx(0.75));
  CHECK(mixed.recall == Approx(0.75));
  CHECK(mixed.f1 == Approx(0.75));
}

TEST_CASE("adjusted f1 dominates raw f1") {
  Rng rng(93);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 10 + rng.uniform_int(0, 100);
    const auto flags = random_flags(rng, n, 0.15);
    const auto gt = random_flags(rng, n, 0.25);
    const double raw = precision_recall_f1(flags, gt).f1;
    const double adj = precision_recall_f1(point_adjust(flags, gt), gt).f1;
    REQUIRE(adj >= raw - 1e-15);
  }
}

TEST_CASE("score report flags follow the threshold strictly") {
  std::vector<double> test_scores = {0.1, 0.9, 0.5, 0.9, 0.2};
  std::vector<double> train_scores = {0.1, 0.2, 0.15, 0.1};
  std::vector<std::uint8_t> labels = {0, 1, 1, 1, 0};
  ScoreOptions opt;
  opt.ar = 25.0;
  ScoreReport rep = make_score_report(test_scores, train_scores, labels, opt);
  for (std::size_t i = 0; i < test_scores.size(); ++i) {
    REQUIRE(rep.flags_raw[i] == (test_scores[i] > rep.threshold ? 1 : 0));
    REQUIRE(rep.flags_adjusted[i] >= rep.flags_raw[i]);
  }

  ScoreOptions test_only = opt;
  test_only.population_test_only = true;
  ScoreReport rep2 = make_score_report(test_scores, train_scores, labels, test_only);
  CHECK(rep2.threshold >= rep.threshold);  // dropping small train scores raises the cut
}

TEST_CASE("score_series covers every timestamp including a partial window") {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.window_len = 10;
  cfg.input_dim = 2;
  cfg.seed = 5;
  AmadParams params = init_params(cfg);

  TimeSeries s;
  s.length = 37;  // 3 full windows plus a remainder of 7
  s.dims = 2;
  Rng rng(94);
  for (std::size_t i = 0; i < s.length * s.dims; ++i) s.values.push_back(rng.normal());

  const std::vector<double> scores = score_series(params, cfg, s);
  CHECK(scores.size() == s.length);
  for (double v : scores) {
    REQUIRE(v >= 0.0);
    REQUIRE(std::isfinite(v));
  }

  // Full windows are independent of the padded tail: rescore the prefix.
  TimeSeries prefix = s;
  prefix.length = 30;
  prefix.values.assign(s.values.begin(), s.values.begin() + 30 * 2);
  const std::vector<double> prefix_scores = score_series(params, cfg, prefix);
  for (std::size_t i = 0; i < 30; ++i) REQUIRE(scores[i] == prefix_scores[i]);

  // Without the automask branch the score is plain squared error.
  ModelConfig plain_cfg = cfg;
  plain_cfg.use_automask = false;
  AmadParams plain_params = init_params(plain_cfg);
  const std::vector<double> plain = score_series(plain_params, plain_cfg, s);
  CHECK(plain.size() == s.length);
}

TEST_CASE("grid search structure and marginals") {
  SynthResult synth = synth_generate(17, 160, 80, 2, {0.05});
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.window_len = 8;
  cfg.input_dim = 2;
  cfg.seed = 17;
  TrainConfig tcfg;
  tcfg.batch = 8;
  tcfg.max_epochs = 1;
  tcfg.train_stride = 4;
  ScoreOptions opt;
  opt.ar = 5.0;

  CHECK(default_alpha_grid() == std::vector<double>{0.3, 0.6, 0.9});
  CHECK(default_tau_grid() == std::vector<double>{0.07, 0.21, 0.35});

  GridResult grid = grid_search(synth.train, synth.test, cfg, tcfg, opt, {0.3, 0.9}, {0.07, 0.35});
  REQUIRE(grid.cells.size() == 4);
  REQUIRE(grid.marginals.size() == 4);
  for (const GridCell& c : grid.cells) REQUIRE_FALSE(c.failed);

  // alpha marginal is the mean over its tau cells
  for (const GridMarginal& m : grid.marginals) {
    if (m.axis != "alpha") continue;
    double sum = 0.0;
    std::size_t n = 0;
    for (const GridCell& c : grid.cells) {
      if (c.alpha == m.value) {
        sum += c.eval.f1;
        ++n;
      }
    }
    REQUIRE(n == 2);
    REQUIRE(m.f1 == Approx(sum / 2.0).margin(1e-12));
  }
}

TEST_CASE("ablation rows execute and the all-off row never touches cad or contrastive") {
  SynthResult synth = synth_generate(23, 160, 80, 2, {0.05});
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.window_len = 8;
  cfg.input_dim = 2;
  cfg.seed = 23;
  TrainConfig tcfg;
  tcfg.batch = 8;
  tcfg.max_epochs = 1;
  tcfg.train_stride = 4;
  ScoreOptions opt;
  opt.ar = 5.0;

  const std::vector<AblationFlags> rows = default_ablation_rows();
  REQUIRE(rows.size() == 6);
  CHECK_FALSE(rows.front().automask_on);  // plain transformer row first
  CHECK(rows.back().min_on);              // full model row last

  counters().reset();
  AblationResult all_off = ablation_run(synth.train, synth.test, cfg, tcfg, opt, {rows.front()});
  REQUIRE_FALSE(all_off.rows[0].failed);
  CHECK(counters().cad_evals.load() == 0);
  CHECK(counters().contrastive_evals.load() == 0);

  counters().reset();
  AblationResult full = ablation_run(synth.train, synth.test, cfg, tcfg, opt, {rows.back()});
  REQUIRE_FALSE(full.rows[0].failed);
  CHECK(counters().cad_evals.load() > 0);
  CHECK(counters().contrastive_evals.load() > 0);
}
