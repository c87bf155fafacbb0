// Copyright 2026 The astcaps Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// End-to-end checks of the astcaps binary: exit-code taxonomy, artifact
// layout, determinism across reruns and worker counts, and the fault
// injection path for the gradient audit.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "astcaps/config.hpp"

using namespace astcaps;
using nlohmann::json;
namespace fs = std::filesystem;

#ifndef ASTCAPS_BIN
#error "ASTCAPS_BIN must point at the CLI binary"
#endif

namespace {

struct RunResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return {};
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

// Scratch directory removed on scope exit so reruns start clean.
struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() /
           ("astcaps_cli_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const {
    return (path / name).string();
  }

  RunResult run(const std::string& args, const std::string& env = "") const {
    std::string out_log = file("stdout.log");
    std::string err_log = file("stderr.log");
    std::string cmd = env + (env.empty() ? "" : " ") + ASTCAPS_BIN + " " +
                      args + " > " + out_log + " 2> " + err_log;
    int status = std::system(cmd.c_str());
    RunResult r;
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out_log);
    r.err = slurp(err_log);
    return r;
  }
};

// Desk-scale run: three synthetic classes on 6x6 windows, two epochs.
RunConfig tiny_config() {
  RunConfig c;
  c.dataset.kind = "synthetic";
  c.dataset.layout = {6, 6};
  c.dataset.n_classes = 3;
  c.dataset.windows_per_class = 6;
  c.dataset.noise_sigma = 0.05;
  c.model.hidden = 5;
  c.model.conv_filters = 3;
  c.model.conv_kernel = {3, 3};
  c.model.caps_filters = 2;
  c.model.caps_kernel = {2, 2};
  c.model.routing_iterations = 2;
  c.model.fc_width = 8;
  c.train.epochs = 2;
  c.train.batch_size = 5;
  c.train.train_fraction = 0.8;
  return c;
}

std::string write_config(const TempDir& dir, const RunConfig& config,
                         const std::string& name = "config.json") {
  std::ofstream out(dir.file(name));
  out << serialize_config(config);
  return dir.file(name);
}

std::size_t count_lines(const std::string& text) {
  return static_cast<std::size_t>(
      std::count(text.begin(), text.end(), '\n'));
}

}  // namespace

TEST_CASE("config problems exit with code 1") {
  TempDir dir("cfgerr");
  CHECK(dir.run("train").exit_code == 1);  // --config missing

  std::ofstream(dir.file("broken.json")) << "{ not json";
  RunResult broken = dir.run("train --config " + dir.file("broken.json"));
  CHECK(broken.exit_code == 1);
  CHECK(broken.err.find("config error") != std::string::npos);

  std::string echo = serialize_config(tiny_config());
  std::size_t pos = echo.find("\"hidden\"");
  echo.replace(pos, 8, "\"hidde\"");
  std::ofstream(dir.file("typo.json")) << echo;
  RunResult typo = dir.run("train --config " + dir.file("typo.json"));
  CHECK(typo.exit_code == 1);
  CHECK(typo.err.find("hidde") != std::string::npos);

  CHECK(dir.run("eval").exit_code == 1);  // --checkpoint missing

  std::string cfg = write_config(dir, tiny_config());
  RunResult tag = dir.run("train --config " + cfg +
                          " --export-features bogus");
  CHECK(tag.exit_code == 1);
  CHECK(tag.err.find("bogus") != std::string::npos);

  RunResult inj = dir.run("gradcheck --inject nonsense");
  CHECK(inj.exit_code == 1);
}

TEST_CASE("data problems exit with code 2") {
  TempDir dir("dataerr");
  RunResult gone = dir.run("eval --checkpoint " + dir.file("missing.astc"));
  CHECK(gone.exit_code == 2);
  CHECK(gone.err.find("data error") != std::string::npos);

  // A dataset written with 6 channels cannot feed a 5-channel layout.
  RunConfig synth = tiny_config();
  synth.out_dir = dir.file("ds");
  RunResult wrote = dir.run("synth --config " + write_config(dir, synth));
  REQUIRE(wrote.exit_code == 0);

  RunConfig narrow = tiny_config();
  narrow.dataset.kind = "timeseries";
  narrow.dataset.layout = {5, 6};
  narrow.manifest = dir.file("ds/manifest.csv");
  narrow.data_root = dir.file("ds");
  narrow.out_dir = dir.file("out");
  RunResult shape = dir.run("train --config " +
                            write_config(dir, narrow, "narrow.json"));
  CHECK(shape.exit_code == 2);
  CHECK(shape.err.find("columns") != std::string::npos);

  // Class-count disagreement between manifest and config.
  RunConfig misdeclared = tiny_config();
  misdeclared.dataset.kind = "timeseries";
  misdeclared.dataset.n_classes = 4;
  misdeclared.manifest = dir.file("ds/manifest.csv");
  misdeclared.data_root = dir.file("ds");
  misdeclared.out_dir = dir.file("out");
  RunResult classes = dir.run("train --config " +
                              write_config(dir, misdeclared, "mis.json"));
  CHECK(classes.exit_code == 2);
  CHECK(classes.err.find("declares 4") != std::string::npos);
}

TEST_CASE("gradcheck passes by default and fails loudly when sabotaged") {
  TempDir dir("gradcheck");
  RunResult ok = dir.run("gradcheck");
  CHECK(ok.exit_code == 0);
  CHECK(ok.out.find("all layers within") != std::string::npos);
  for (const char* layer : {"conv", "memory_cell", "fusion", "capsule_path",
                            "heads_losses", "squash", "routing"}) {
    CHECK(ok.out.find(layer) != std::string::npos);
  }
  CHECK(ok.out.find("FAIL") == std::string::npos);

  RunResult injected = dir.run("gradcheck --inject squash");
  CHECK(injected.exit_code == 3);
  CHECK(injected.err.find("squash") != std::string::npos);
  CHECK(injected.out.find("FAIL") != std::string::npos);

  RunResult strict = dir.run("gradcheck --tolerance 1e-15");
  CHECK(strict.exit_code == 3);
  CHECK(strict.err.find("numeric error") != std::string::npos);
}

TEST_CASE("synth writes the dataset and is idempotent") {
  TempDir dir("synth");
  RunConfig c = tiny_config();
  c.out_dir = dir.file("ds");
  std::string cfg = write_config(dir, c);

  RunResult first = dir.run("synth --config " + cfg);
  REQUIRE(first.exit_code == 0);
  CHECK(first.out.find("wrote 18 windows") != std::string::npos);

  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir.file("ds"))) {
    (void)e;
    ++files;
  }
  CHECK(files == 19);  // 18 windows + manifest.csv

  std::string manifest_before = slurp(dir.file("ds/manifest.csv"));
  CHECK(count_lines(manifest_before) == 19);  // header + 18 rows
  std::string window_before = slurp(dir.file("ds/w00.txt"));

  RunResult second = dir.run("synth --config " + cfg);
  REQUIRE(second.exit_code == 0);
  CHECK(slurp(dir.file("ds/manifest.csv")) == manifest_before);
  CHECK(slurp(dir.file("ds/w00.txt")) == window_before);
}

TEST_CASE("train writes every artifact and eval reproduces the metrics") {
  TempDir dir("trainrun");
  RunConfig c = tiny_config();
  c.out_dir = dir.file("run");
  std::string cfg = write_config(dir, c);

  RunResult train = dir.run("train --config " + cfg +
                            " --export-features digit");
  REQUIRE(train.exit_code == 0);
  CHECK(train.out.find("dataset: 18 windows (15 train / 3 test), 3 classes") !=
        std::string::npos);
  CHECK(train.out.find("epoch 2/2") != std::string::npos);
  CHECK(train.out.find("accuracy:") != std::string::npos);

  for (const char* name :
       {"config.json", "train_curve.csv", "metrics.json", "confusion.csv",
        "checkpoint.astc", "features_digit.csv", "roc_0.csv", "roc_1.csv",
        "roc_2.csv"}) {
    CHECK(fs::exists(dir.file(std::string("run/") + name)));
  }

  // The config echo reflects the applied configuration.
  RunConfig echoed = parse_config(slurp(dir.file("run/config.json")));
  CHECK(serialize_config(echoed) == serialize_config(c));

  std::string curve = slurp(dir.file("run/train_curve.csv"));
  CHECK(count_lines(curve) == 3);  // header + one row per epoch
  CHECK(curve.rfind("epoch,l_tp,l_st,l_pc,l_dc,total,acc\n", 0) == 0);

  json metrics = json::parse(slurp(dir.file("run/metrics.json")));
  CHECK(metrics["n_classes"] == 3);
  CHECK(metrics["test_size"] == 3);
  CHECK(metrics["loss_curve"].size() == 2);
  CHECK(metrics["accuracy"].contains("fused"));
  CHECK(metrics["auc"]["per_class"].size() == 3);

  std::string features = slurp(dir.file("run/features_digit.csv"));
  CHECK(count_lines(features) == 3);  // one row per test window
  std::size_t commas = static_cast<std::size_t>(std::count(
      features.begin(), features.begin() + static_cast<std::ptrdiff_t>(
                                                features.find('\n')),
      ','));
  CHECK(commas == 3 * 16);  // label plus one field per digit-capsule entry

  // Evaluating the checkpoint alone reproduces the test metrics exactly.
  RunResult eval = dir.run("eval --checkpoint " +
                           dir.file("run/checkpoint.astc") + " --out " +
                           dir.file("eval"));
  REQUIRE(eval.exit_code == 0);
  json again = json::parse(slurp(dir.file("eval/metrics.json")));
  CHECK(again["accuracy"] == metrics["accuracy"]);
  CHECK(again["auc"] == metrics["auc"]);
  CHECK(again["confusion"] == metrics["confusion"]);
  CHECK(again["loss_curve"].empty());  // eval has no training history
  CHECK(slurp(dir.file("eval/roc_0.csv")) == slurp(dir.file("run/roc_0.csv")));

  std::string acc_line_train = train.out.substr(train.out.find("accuracy:"));
  std::string acc_line_eval = eval.out.substr(eval.out.find("accuracy:"));
  CHECK(acc_line_train == acc_line_eval);
}

TEST_CASE("identical seeds reproduce artifacts byte for byte") {
  TempDir dir("determinism");
  RunConfig c = tiny_config();
  std::string cfg = write_config(dir, c);

  RunResult a = dir.run("train --config " + cfg + " --out " + dir.file("a"));
  REQUIRE(a.exit_code == 0);
  std::string checkpoint = slurp(dir.file("a/checkpoint.astc"));
  std::string curve = slurp(dir.file("a/train_curve.csv"));
  std::string metrics = slurp(dir.file("a/metrics.json"));

  // Rerunning into the same directory overwrites every artifact with the
  // same bytes: the command is idempotent.
  RunResult again = dir.run("train --config " + cfg + " --out " +
                            dir.file("a"));
  REQUIRE(again.exit_code == 0);
  CHECK(slurp(dir.file("a/checkpoint.astc")) == checkpoint);
  CHECK(slurp(dir.file("a/train_curve.csv")) == curve);
  CHECK(slurp(dir.file("a/metrics.json")) == metrics);
  CHECK(again.out == a.out);

  // A different out dir changes only the config echo inside the
  // checkpoint; the numbers are untouched.
  RunResult b = dir.run("train --config " + cfg + " --out " + dir.file("b"));
  REQUIRE(b.exit_code == 0);
  CHECK(slurp(dir.file("b/train_curve.csv")) == curve);
  CHECK(slurp(dir.file("b/metrics.json")) == metrics);

  // The worker count must not change any byte of the results.
  RunResult threaded = dir.run(
      "train --config " + cfg + " --out " + dir.file("a"),
      "ASTCAPS_THREADS=4");
  REQUIRE(threaded.exit_code == 0);
  CHECK(slurp(dir.file("a/checkpoint.astc")) == checkpoint);
  CHECK(slurp(dir.file("a/train_curve.csv")) == curve);

  // Different seeds must actually change the run.
  RunResult other = dir.run("train --config " + cfg + " --out " +
                            dir.file("a") + " --seed-init 99");
  REQUIRE(other.exit_code == 0);
  CHECK(slurp(dir.file("a/checkpoint.astc")) != checkpoint);
}

TEST_CASE("race emits one curve file per seed and the median summary") {
  TempDir dir("race");
  RunConfig c = tiny_config();
  c.dataset.layout = {5, 4};
  c.dataset.n_classes = 2;
  c.dataset.windows_per_class = 5;
  c.model.hidden = 3;
  c.model.conv_filters = 2;
  c.model.conv_kernel = {2, 2};
  c.model.caps_filters = 2;
  c.model.caps_kernel = {2, 2};
  c.model.fc_width = 6;
  c.train.batch_size = 10;
  c.race.seeds = {11, 12};
  c.race.loss_threshold = 1e-9;  // unreachable: both legs run to the cap
  c.race.max_epochs = 2;
  c.out_dir = dir.file("race_out");
  std::string cfg = write_config(dir, c);

  RunResult r = dir.run("race --config " + cfg);
  REQUIRE(r.exit_code == 0);
  CHECK(r.out.find("seed 11:") != std::string::npos);
  CHECK(r.out.find("seed 12:") != std::string::npos);
  CHECK(r.out.find("median epochs-to-loss-0.000: memory 3.0, gru 3.0") !=
        std::string::npos);

  for (const char* name : {"race_11.csv", "race_12.csv"}) {
    std::string csv = slurp(dir.file(std::string("race_out/") + name));
    CHECK(csv.rfind("epoch,cell_kind,train_loss,train_acc\n", 0) == 0);
    CHECK(count_lines(csv) == 5);  // header + 2 epochs x 2 cells
    CHECK(csv.find(",memory,") != std::string::npos);
    CHECK(csv.find(",gru,") != std::string::npos);
  }
}

TEST_CASE("file-backed training round-trips a written dataset") {
  TempDir dir("filetrain");
  RunConfig synth = tiny_config();
  synth.out_dir = dir.file("ds");
  REQUIRE(dir.run("synth --config " + write_config(dir, synth)).exit_code ==
          0);

  RunConfig files = tiny_config();
  files.dataset.kind = "timeseries";
  files.manifest = dir.file("ds/manifest.csv");
  files.data_root = dir.file("ds");
  files.out_dir = dir.file("run");
  RunResult train = dir.run("train --config " +
                            write_config(dir, files, "files.json"));
  REQUIRE(train.exit_code == 0);
  CHECK(train.out.find("dataset: 18 windows") != std::string::npos);
  CHECK(fs::exists(dir.file("run/checkpoint.astc")));
}
