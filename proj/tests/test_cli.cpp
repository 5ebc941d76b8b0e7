#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

std::string cli_binary() {
  const char* env = std::getenv("AMAD_CLI_BIN");
  REQUIRE(env != nullptr);
  return env;
}

int run(const std::string& args, const std::string& redirect = "> /dev/null 2>&1") {
  const std::string cmd = cli_binary() + " " + args + " " + redirect;
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& f) const { return (path / f).string(); }
};

}  // namespace

TEST_CASE("usage errors exit with code 1") {
  CHECK(run("") == 1);
  CHECK(run("frobnicate") == 1);
  CHECK(run("synth --seed 1 --bogus-flag") == 1);
  CHECK(run("--help", "> /dev/null 2>&1") == 0);
}

TEST_CASE("missing input files exit with code 2") {
  TempDir dir("amad_cli_missing");
  CHECK(run("train --seed 1 --train /nonexistent.csv --out " + (dir / "o")) == 2);
  CHECK(run("eval --scores /nonexistent.csv --out " + (dir / "o")) == 2);
  CHECK(run("score --checkpoint /nonexistent.ckpt --train x.csv --test y.csv --out " +
            (dir / "o")) == 2);
}

TEST_CASE("synth is deterministic per seed and writes a manifest") {
  TempDir a("amad_cli_synth_a"), b("amad_cli_synth_b");
  REQUIRE(run("synth --seed 7 --train-len 300 --test-len 120 --dims 2 --out " + a.path.string()) ==
          0);
  REQUIRE(run("synth --seed 7 --train-len 300 --test-len 120 --dims 2 --out " + b.path.string()) ==
          0);
  CHECK(slurp(a.path / "train.csv") == slurp(b.path / "train.csv"));
  CHECK(slurp(a.path / "test.csv") == slurp(b.path / "test.csv"));
  CHECK(fs::exists(a.path / "manifest_synth.cfg"));

  const std::string manifest = slurp(a.path / "manifest_synth.cfg");
  CHECK(manifest.find("seed=7") != std::string::npos);
  CHECK(manifest.find("fnv1a=") != std::string::npos);

  // A different seed changes the data.
  TempDir c("amad_cli_synth_c");
  REQUIRE(run("synth --seed 8 --train-len 300 --test-len 120 --dims 2 --out " + c.path.string()) ==
          0);
  CHECK(slurp(a.path / "train.csv") != slurp(c.path / "train.csv"));
}

TEST_CASE("synth binary format round-trips through score inputs") {
  TempDir dir("amad_cli_synth_bin");
  REQUIRE(run("synth --seed 3 --train-len 200 --test-len 80 --dims 2 --format binary --out " +
              dir.path.string()) == 0);
  CHECK(fs::exists(dir.path / "train.bin"));
  CHECK(fs::exists(dir.path / "test.bin"));
}

TEST_CASE("train with stock defaults records the stock hyperparameters in the manifest") {
  TempDir dir("amad_cli_train_defaults");
  REQUIRE(run("synth --seed 5 --train-len 12 --test-len 8 --dims 2 --out " + dir.path.string()) ==
          0);
  // Tiny window/epoch budget so the stock 3x512x8 model fits a unit test;
  // layers, d-model, heads, lambda stay at their defaults.
  REQUIRE(run("train --seed 5 --train " + (dir / "train.csv") + " --out " + dir.path.string() +
              " --window 4 --max-epochs 1 --batch 4 --stride 2") == 0);
  const std::string manifest = slurp(dir.path / "manifest_train.cfg");
  CHECK(manifest.find("lambda=3") != std::string::npos);
  CHECK(manifest.find("layers=3") != std::string::npos);
  CHECK(manifest.find("heads=8") != std::string::npos);
  CHECK(manifest.find("d-model=512") != std::string::npos);
  CHECK(manifest.find("seed=5") != std::string::npos);
}

TEST_CASE("train/score/eval pipeline with manifest replay") {
  TempDir dir("amad_cli_pipeline");
  REQUIRE(run("synth --seed 11 --train-len 400 --test-len 160 --dims 2 --fraction 0.05 --out " +
              dir.path.string()) == 0);

  const std::string train_args = "train --seed 11 --train " + (dir / "train.csv") +
                                 " --layers 1 --d-model 8 --heads 2 --window 10 --batch 8 "
                                 "--stride 4 --max-epochs 2";
  REQUIRE(run(train_args + " --out " + (dir / "run1")) == 0);
  REQUIRE(fs::exists(dir.path / "run1" / "model.ckpt"));
  REQUIRE(fs::exists(dir.path / "run1" / "train_log.csv"));

  // Replaying the manifest reproduces the checkpoint bit for bit.
  REQUIRE(run("--config " + (dir / "run1/manifest_train.cfg") + " train --out " +
              (dir / "run2")) == 0);
  CHECK(slurp(dir.path / "run1" / "model.ckpt") == slurp(dir.path / "run2" / "model.ckpt"));
  CHECK(slurp(dir.path / "run1" / "train_log.csv") == slurp(dir.path / "run2" / "train_log.csv"));

  REQUIRE(run("score --checkpoint " + (dir / "run1/model.ckpt") + " --train " +
              (dir / "train.csv") + " --test " + (dir / "test.csv") + " --ar 5 --out " +
              (dir / "run1")) == 0);
  const std::string scores = slurp(dir.path / "run1" / "scores.csv");
  CHECK(scores.rfind("timestamp,score,flag_raw,flag_adjusted,gt", 0) == 0);

  REQUIRE(run("eval --scores " + (dir / "run1/scores.csv") + " --out " + (dir / "run1")) == 0);
  const std::string eval_csv = slurp(dir.path / "run1" / "eval.csv");
  CHECK(eval_csv.rfind("mode,precision,recall,f1,tp,fp,fn", 0) == 0);
  CHECK(eval_csv.find("raw,") != std::string::npos);
  CHECK(eval_csv.find("adjusted,") != std::string::npos);
}

TEST_CASE("eval reports perfect detection as F1 1.0") {
  TempDir dir("amad_cli_eval_perfect");
  const std::string scores_path = dir / "scores.csv";
  {
    std::ofstream sc(scores_path);
    sc << "timestamp,score,flag_raw,flag_adjusted,gt\n";
    for (int t = 0; t < 20; ++t) {
      const int anomalous = (t >= 5 && t < 8) ? 1 : 0;
      sc << t << ',' << (anomalous ? 9.0 : 0.1) << ',' << anomalous << ',' << anomalous << ','
         << anomalous << '\n';
    }
  }
  REQUIRE(run("eval --scores " + scores_path + " --out " + dir.path.string()) == 0);
  const std::string eval_csv = slurp(dir.path / "eval.csv");
  CHECK(eval_csv.find("raw,1,1,1,") != std::string::npos);
  CHECK(eval_csv.find("adjusted,1,1,1,") != std::string::npos);
}

TEST_CASE("grid and ablate emit their tables") {
  TempDir dir("amad_cli_grid");
  REQUIRE(run("synth --seed 13 --train-len 160 --test-len 80 --dims 2 --fraction 0.05 --out " +
              dir.path.string()) == 0);
  const std::string shared = " --train " + (dir / "train.csv") + " --test " + (dir / "test.csv") +
                             " --layers 1 --d-model 8 --heads 2 --window 8 --batch 8 --stride 4 "
                             "--max-epochs 1 --ar 5 --out " +
                             dir.path.string();
  REQUIRE(run("grid --seed 13 --alphas 0.3,0.9 --taus 0.07" + shared) == 0);
  const std::string grid_csv = slurp(dir.path / "grid.csv");
  CHECK(grid_csv.rfind("row_type,alpha,tau,precision,recall,f1,error", 0) == 0);
  CHECK(std::count(grid_csv.begin(), grid_csv.end(), '\n') == 1 + 2 + 3);  // cells + marginals

  REQUIRE(run("ablate --seed 13" + shared) == 0);
  const std::string ab_csv = slurp(dir.path / "ablation.csv");
  CHECK(ab_csv.rfind("row_type,min_strategy,max_strategy,contrastive_strategy,automask_module",
                     0) == 0);
  CHECK(std::count(ab_csv.begin(), ab_csv.end(), '\n') == 1 + 6 + 1);  // header + rows + average
}
