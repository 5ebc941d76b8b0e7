// amad: train/score/evaluate the AMAD anomaly detector from the shell.
//
// Subcommands: synth | train | score | eval | grid | ablate. Every run
// resolves its options (flags override a key=value config file), executes,
// and writes a manifest with the full resolved configuration plus FNV-1a
// hashes of the artifacts it produced. Re-running a subcommand with
// --config <manifest> reproduces the outputs bit for bit.
//
// Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
// failure.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "amad/amad.hpp"

namespace fs = std::filesystem;
using namespace amad;

namespace {

std::uint64_t fnv1a_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot hash " + path);
  std::uint64_t h = 14695981039346656037ULL;
  char c;
  while (in.get(c)) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_manifest(const CLI::App& app, const std::string& sub_name, const fs::path& out_dir,
                    const std::vector<std::string>& artifacts) {
  const fs::path path = out_dir / ("manifest_" + sub_name + ".cfg");
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "# amad " << sub_name << " manifest; replay with: amad --config " << path.string() << " "
      << sub_name << "\n";
  std::istringstream all(app.config_to_str(true, false));
  std::string line;
  while (std::getline(all, line)) {
    if (line.rfind(sub_name + ".", 0) == 0) out << line << "\n";
  }
  for (const std::string& a : artifacts) {
    out << "# artifact " << fs::path(a).filename().string() << " fnv1a=" << hex64(fnv1a_file(a))
        << "\n";
  }
}

struct Options {
  // model
  std::size_t layers = 3;
  std::size_t d_model = 512;
  std::size_t heads = 8;
  std::size_t window = 100;
  double alpha = 0.9;
  double rope_base = 10000.0;
  bool paper_scaling = false;
  // training
  double lambda = 3.0;
  double tau = 0.35;
  double lr = 0.02;
  double lr_decay = 0.5;
  std::size_t batch = 256;
  std::size_t max_epochs = 10;
  std::size_t patience = 3;
  std::size_t stride = 1;
  double val_fraction = 0.2;
  bool no_min = false, no_max = false, no_contrastive = false, no_automask = false;
  bool no_halve_recon = false;
  // io / scoring
  std::string train_path, test_path, scores_path;
  std::string checkpoint = "model.ckpt";
  std::string out_dir = ".";
  std::string format = "csv";
  double ar = 1.0;
  std::string population = "combined";
  std::uint64_t seed = 1;
  // synth
  std::size_t train_len = 4000, test_len = 2000, dims = 3;
  double fraction = 0.01;
  // grid
  std::vector<double> alphas = default_alpha_grid();
  std::vector<double> taus = default_tau_grid();
};

void add_model_options(CLI::App* sub, Options& o) {
  sub->add_option("--layers", o.layers, "Stacked block count")->capture_default_str();
  sub->add_option("--d-model", o.d_model, "Model width")->capture_default_str();
  sub->add_option("--heads", o.heads, "Attention heads")->capture_default_str();
  sub->add_option("--window", o.window, "Window length")->capture_default_str();
  sub->add_option("--alpha", o.alpha, "Attention mixup coefficient")->capture_default_str();
  sub->add_option("--rope-base", o.rope_base, "Rotary angle base")->capture_default_str();
  sub->add_flag("--paper-scaling", o.paper_scaling,
                "Literal sqrt(d_model)/d_model attention temperatures");
}

void add_train_options(CLI::App* sub, Options& o) {
  sub->add_option("--lambda", o.lambda, "CAD loss weight")->capture_default_str();
  sub->add_option("--tau", o.tau, "Contrastive temperature")->capture_default_str();
  sub->add_option("--lr", o.lr, "Initial learning rate")->capture_default_str();
  sub->add_option("--lr-decay", o.lr_decay, "Per-epoch lr factor")->capture_default_str();
  sub->add_option("--batch", o.batch, "Batch size")->capture_default_str();
  sub->add_option("--max-epochs", o.max_epochs, "Epoch cap")->capture_default_str();
  sub->add_option("--patience", o.patience, "Early-stopping patience")->capture_default_str();
  sub->add_option("--stride", o.stride, "Training window stride")->capture_default_str();
  sub->add_option("--val-fraction", o.val_fraction, "Validation tail share")
      ->capture_default_str();
  sub->add_flag("--no-min", o.no_min, "Disable the minimisation phase");
  sub->add_flag("--no-max", o.no_max, "Disable the maximisation phase");
  sub->add_flag("--no-contrastive", o.no_contrastive, "Disable the contrastive objective");
  sub->add_flag("--no-automask", o.no_automask, "Disable the automask branch");
  sub->add_flag("--no-halve-recon", o.no_halve_recon,
                "Keep the shared reconstruction term at full weight in both phases");
}

void add_score_options(CLI::App* sub, Options& o) {
  sub->add_option("--ar", o.ar, "Prior anomaly ratio in percent")->capture_default_str();
  sub->add_option("--population", o.population, "Percentile population: combined|test")
      ->check(CLI::IsMember({"combined", "test"}))
      ->capture_default_str();
}

ModelConfig model_config(const Options& o, std::size_t input_dim) {
  ModelConfig cfg;
  cfg.n_layers = o.layers;
  cfg.d_model = o.d_model;
  cfg.n_heads = o.heads;
  cfg.window_len = o.window;
  cfg.input_dim = input_dim;
  cfg.mixup_alpha = o.alpha;
  cfg.rope_base = o.rope_base;
  cfg.seed = o.seed;
  cfg.paper_scaling = o.paper_scaling;
  return cfg;
}

TrainConfig train_config(const Options& o) {
  TrainConfig t;
  t.lambda = o.lambda;
  t.tau = o.tau;
  t.lr = o.lr;
  t.lr_decay = o.lr_decay;
  t.batch = o.batch;
  t.max_epochs = o.max_epochs;
  t.patience = o.patience;
  t.train_stride = o.stride;
  t.val_fraction = o.val_fraction;
  t.enable_min = !o.no_min;
  t.enable_max = !o.no_max;
  t.enable_contrastive = !o.no_contrastive;
  t.enable_automask = !o.no_automask;
  t.halve_shared_recon = !o.no_halve_recon;
  return t;
}

ScoreOptions score_options(const Options& o) {
  ScoreOptions s;
  s.ar = o.ar;
  s.population_test_only = o.population == "test";
  return s;
}

void save_series_any(const TimeSeries& s, const std::string& path, const std::string& format) {
  if (format == "binary") {
    save_series_binary(s, path);
  } else {
    save_series_csv(s, path);
  }
}

std::string fmt(double v) { return detail::format_double(v); }

// ---------------------------------------------------------------------------
// subcommand bodies
// ---------------------------------------------------------------------------

std::vector<std::string> run_synth(const Options& o, const fs::path& out) {
  SynthResult r = synth_generate(o.seed, o.train_len, o.test_len, o.dims, {o.fraction});
  const std::string ext = o.format == "binary" ? ".bin" : ".csv";
  const std::string train_file = (out / ("train" + ext)).string();
  const std::string test_file = (out / ("test" + ext)).string();
  save_series_any(r.train, train_file, o.format);
  save_series_any(r.test, test_file, o.format);
  std::cout << "synth: wrote " << train_file << " (" << r.train.length << " rows), " << test_file
            << " (" << r.test.length << " rows)\n";
  return {train_file, test_file};
}

std::vector<std::string> run_train(const Options& o, const fs::path& out) {
  const TimeSeries train_raw = load_series(o.train_path, o.format);
  const NormStats stats = fit_norm_stats(train_raw);
  const TimeSeries train = zscore(train_raw, stats);
  const ModelConfig cfg = model_config(o, train_raw.dims);
  const TrainConfig tcfg = train_config(o);

  const FitResult res = fit(train, cfg, tcfg);
  const std::string ckpt = (out / "model.ckpt").string();
  save_checkpoint(ckpt, res.cfg, res.params);

  const std::string log_path = (out / "train_log.csv").string();
  std::ofstream log(log_path);
  if (!log) throw DataError("cannot write " + log_path);
  log << "epoch,recon,cad_l1,contrastive,val_recon,lr\n";
  for (const EpochStats& e : res.log) {
    log << e.epoch << ',' << fmt(e.losses.recon) << ',' << fmt(e.losses.cad_l1) << ','
        << fmt(e.losses.contrastive) << ',' << fmt(e.val_recon) << ',' << fmt(e.lr) << '\n';
  }
  log.close();
  std::cout << "train: " << res.epochs_run << " epochs, final validation recon "
            << fmt(res.log.empty() ? 0.0 : res.log.back().val_recon) << ", wrote " << ckpt
            << "\n";
  return {ckpt, log_path};
}

std::vector<std::string> run_score(const Options& o, const fs::path& out) {
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const TimeSeries train_raw = load_series(o.train_path, o.format);
  const TimeSeries test_raw = load_series(o.test_path, o.format);
  if (train_raw.dims != ck.cfg.input_dim || test_raw.dims != ck.cfg.input_dim) {
    throw DataError("score: series channel count does not match the checkpoint");
  }
  const NormStats stats = fit_norm_stats(train_raw);
  const std::vector<double> train_scores =
      score_series(ck.params, ck.cfg, zscore(train_raw, stats));
  const std::vector<double> test_scores = score_series(ck.params, ck.cfg, zscore(test_raw, stats));
  const ScoreReport rep =
      make_score_report(test_scores, train_scores, test_raw.labels, score_options(o));

  const std::string scores_path = (out / "scores.csv").string();
  std::ofstream sc(scores_path);
  if (!sc) throw DataError("cannot write " + scores_path);
  sc << "timestamp,score,flag_raw,flag_adjusted,gt\n";
  for (std::size_t t = 0; t < rep.scores.size(); ++t) {
    sc << t << ',' << fmt(rep.scores[t]) << ',' << static_cast<int>(rep.flags_raw[t]) << ','
       << static_cast<int>(rep.flags_adjusted[t]) << ',';
    if (!test_raw.labels.empty()) sc << static_cast<int>(test_raw.labels[t]);
    sc << '\n';
  }
  sc.close();
  std::cout << "score: threshold " << fmt(rep.threshold) << " (ar=" << o.ar << "), wrote "
            << scores_path << "\n";
  return {scores_path};
}

std::vector<std::string> run_eval(const Options& o, const fs::path& out) {
  std::ifstream in(o.scores_path);
  if (!in) throw DataError("cannot open " + o.scores_path);
  std::string line;
  if (!std::getline(in, line)) throw DataError(o.scores_path + ": empty file");
  std::vector<std::uint8_t> flags, gt;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::vector<std::string> cells = detail::split_csv_line(line);
    if (cells.size() != 5) {
      throw DataError(o.scores_path + ":" + std::to_string(line_no) + ": expected 5 cells");
    }
    if (cells[4].empty()) {
      throw DataError(o.scores_path + ":" + std::to_string(line_no) +
                      ": no ground-truth column; score against a labeled test set");
    }
    flags.push_back(cells[2] == "1" ? 1 : 0);
    gt.push_back(cells[4] == "1" ? 1 : 0);
  }
  const EvalReport raw = precision_recall_f1(flags, gt);
  const EvalReport adjusted = precision_recall_f1(point_adjust(flags, gt), gt);

  const std::string eval_path = (out / "eval.csv").string();
  std::ofstream ev(eval_path);
  if (!ev) throw DataError("cannot write " + eval_path);
  ev << "mode,precision,recall,f1,tp,fp,fn\n";
  ev << "raw," << fmt(raw.precision) << ',' << fmt(raw.recall) << ',' << fmt(raw.f1) << ','
     << raw.tp << ',' << raw.fp << ',' << raw.fn << '\n';
  ev << "adjusted," << fmt(adjusted.precision) << ',' << fmt(adjusted.recall) << ','
     << fmt(adjusted.f1) << ',' << adjusted.tp << ',' << adjusted.fp << ',' << adjusted.fn
     << '\n';
  ev.close();
  std::cout << "eval: raw F1 " << fmt(raw.f1) << ", adjusted F1 " << fmt(adjusted.f1)
            << ", wrote " << eval_path << "\n";
  return {eval_path};
}

std::vector<std::string> run_grid(const Options& o, const fs::path& out) {
  const TimeSeries train_raw = load_series(o.train_path, o.format);
  const TimeSeries test_raw = load_series(o.test_path, o.format);
  const ModelConfig cfg = model_config(o, train_raw.dims);
  const TrainConfig tcfg = train_config(o);
  const GridResult grid =
      grid_search(train_raw, test_raw, cfg, tcfg, score_options(o), o.alphas, o.taus);

  const std::string grid_path = (out / "grid.csv").string();
  std::ofstream gc(grid_path);
  if (!gc) throw DataError("cannot write " + grid_path);
  gc << "row_type,alpha,tau,precision,recall,f1,error\n";
  for (const GridCell& c : grid.cells) {
    gc << "cell," << fmt(c.alpha) << ',' << fmt(c.tau) << ',';
    if (c.failed) {
      gc << ",,," << c.error << '\n';
    } else {
      gc << fmt(c.eval.precision) << ',' << fmt(c.eval.recall) << ',' << fmt(c.eval.f1) << ",\n";
    }
  }
  for (const GridMarginal& m : grid.marginals) {
    gc << m.axis << "_marginal,";
    gc << (m.axis == "alpha" ? fmt(m.value) : "") << ',';
    gc << (m.axis == "tau" ? fmt(m.value) : "") << ',';
    gc << fmt(m.precision) << ',' << fmt(m.recall) << ',' << fmt(m.f1) << ",\n";
  }
  gc.close();
  std::cout << "grid: " << grid.cells.size() << " cells + " << grid.marginals.size()
            << " marginals, wrote " << grid_path << "\n";
  return {grid_path};
}

std::vector<std::string> run_ablate(const Options& o, const fs::path& out) {
  const TimeSeries train_raw = load_series(o.train_path, o.format);
  const TimeSeries test_raw = load_series(o.test_path, o.format);
  const ModelConfig cfg = model_config(o, train_raw.dims);
  const TrainConfig tcfg = train_config(o);
  const AblationResult res = ablation_run(train_raw, test_raw, cfg, tcfg, score_options(o));

  const std::string path = (out / "ablation.csv").string();
  std::ofstream ac(path);
  if (!ac) throw DataError("cannot write " + path);
  ac << "row_type,min_strategy,max_strategy,contrastive_strategy,automask_module,"
        "precision,recall,f1\n";
  for (const AblationRow& r : res.rows) {
    ac << "row," << r.flags.min_on << ',' << r.flags.max_on << ',' << r.flags.contrastive_on
       << ',' << r.flags.automask_on << ',';
    if (r.failed) {
      ac << ",,\n";
    } else {
      ac << fmt(r.eval.precision) << ',' << fmt(r.eval.recall) << ',' << fmt(r.eval.f1) << '\n';
    }
  }
  ac << "average,,,,,,," << fmt(res.avg_f1) << '\n';
  ac.close();
  std::cout << "ablate: " << res.rows.size() << " rows, average F1 " << fmt(res.avg_f1)
            << ", wrote " << path << "\n";
  return {path};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"AMAD: automasked-attention anomaly detection for multivariate time series"};
  app.require_subcommand(1);
  app.set_config("--config", "", "Key=value config file; command-line flags override it");
  Options o;

  CLI::App* synth = app.add_subcommand("synth", "Generate a labeled synthetic dataset");
  synth->add_option("--seed", o.seed, "Generator seed")->required();
  synth->add_option("--train-len", o.train_len, "Training rows")->capture_default_str();
  synth->add_option("--test-len", o.test_len, "Test rows")->capture_default_str();
  synth->add_option("--dims", o.dims, "Channels")->capture_default_str();
  synth->add_option("--fraction", o.fraction, "Anomalous share of the test rows")
      ->capture_default_str();
  synth->add_option("--format", o.format, "Output format: csv|binary")
      ->check(CLI::IsMember({"csv", "binary"}))
      ->capture_default_str();
  synth->add_option("--out", o.out_dir, "Output directory")->capture_default_str();

  CLI::App* train = app.add_subcommand("train", "Fit a model and write a checkpoint");
  train->add_option("--seed", o.seed, "Run seed")->required();
  train->add_option("--train", o.train_path, "Training series")->required();
  train->add_option("--format", o.format, "Input format: csv|binary")
      ->check(CLI::IsMember({"csv", "binary"}))
      ->capture_default_str();
  train->add_option("--out", o.out_dir, "Output directory")->capture_default_str();
  add_model_options(train, o);
  add_train_options(train, o);

  CLI::App* score = app.add_subcommand("score", "Score a series against a checkpoint");
  score->add_option("--checkpoint", o.checkpoint, "Model checkpoint")->required();
  score->add_option("--train", o.train_path, "Training series (normalisation + population)")
      ->required();
  score->add_option("--test", o.test_path, "Series to score")->required();
  score->add_option("--format", o.format, "Input format: csv|binary")
      ->check(CLI::IsMember({"csv", "binary"}))
      ->capture_default_str();
  score->add_option("--out", o.out_dir, "Output directory")->capture_default_str();
  add_score_options(score, o);

  CLI::App* eval = app.add_subcommand("eval", "Evaluate a score report against its labels");
  eval->add_option("--scores", o.scores_path, "scores.csv from the score subcommand")->required();
  eval->add_option("--out", o.out_dir, "Output directory")->capture_default_str();

  CLI::App* grid = app.add_subcommand("grid", "Alpha/tau grid search");
  grid->add_option("--seed", o.seed, "Shared run seed")->required();
  grid->add_option("--train", o.train_path, "Training series")->required();
  grid->add_option("--test", o.test_path, "Labeled test series")->required();
  grid->add_option("--alphas", o.alphas, "Mixup grid")->delimiter(',')->capture_default_str();
  grid->add_option("--taus", o.taus, "Temperature grid")->delimiter(',')->capture_default_str();
  grid->add_option("--format", o.format, "Input format: csv|binary")
      ->check(CLI::IsMember({"csv", "binary"}))
      ->capture_default_str();
  grid->add_option("--out", o.out_dir, "Output directory")->capture_default_str();
  add_model_options(grid, o);
  add_train_options(grid, o);
  add_score_options(grid, o);

  CLI::App* ablate = app.add_subcommand("ablate", "Component resection matrix");
  ablate->add_option("--seed", o.seed, "Shared run seed")->required();
  ablate->add_option("--train", o.train_path, "Training series")->required();
  ablate->add_option("--test", o.test_path, "Labeled test series")->required();
  ablate->add_option("--format", o.format, "Input format: csv|binary")
      ->check(CLI::IsMember({"csv", "binary"}))
      ->capture_default_str();
  ablate->add_option("--out", o.out_dir, "Output directory")->capture_default_str();
  add_model_options(ablate, o);
  add_train_options(ablate, o);
  add_score_options(ablate, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    std::cerr << "usage: amad [synth|train|score|eval|grid|ablate] --help\n";
    return 1;
  }

  try {
    const fs::path out(o.out_dir);
    fs::create_directories(out);
    std::vector<std::string> artifacts;
    const CLI::App* sub = nullptr;
    if (synth->parsed()) {
      artifacts = run_synth(o, out);
      sub = synth;
    } else if (train->parsed()) {
      artifacts = run_train(o, out);
      sub = train;
    } else if (score->parsed()) {
      artifacts = run_score(o, out);
      sub = score;
    } else if (eval->parsed()) {
      artifacts = run_eval(o, out);
      sub = eval;
    } else if (grid->parsed()) {
      artifacts = run_grid(o, out);
      sub = grid;
    } else if (ablate->parsed()) {
      artifacts = run_ablate(o, out);
      sub = ablate;
    }
    if (sub) write_manifest(app, sub->get_name(), out, artifacts);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const ContractError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
