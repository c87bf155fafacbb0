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

// Training and evaluation: Adam against a scalar reference, bit-exact
// reproducibility, ROC/AUC against a pairwise-counting oracle, checkpoint
// round-trips, feature export, the convergence race, and the gradient
// audit battery.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "astcaps/checkpoint.hpp"
#include "astcaps/config.hpp"
#include "astcaps/data.hpp"
#include "astcaps/errors.hpp"
#include "astcaps/graph.hpp"
#include "astcaps/metrics.hpp"
#include "astcaps/model.hpp"
#include "astcaps/rng.hpp"
#include "astcaps/train.hpp"

using namespace astcaps;

namespace {

// Scratch directory removed on scope exit so reruns start clean.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("astcaps_train_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const {
    return (path / name).string();
  }
};

// Small end-to-end fixture: 6x6 windows, three classes, every stage active
// (hidden != conv_filters keeps the fusion projection in play).
DatasetConfig tiny_dataset() {
  DatasetConfig d;
  d.kind = "synthetic";
  d.layout = {6, 6};
  d.n_classes = 3;
  return d;
}

ModelConfig tiny_model() {
  ModelConfig m;
  m.hidden = 5;
  m.conv_filters = 3;
  m.conv_kernel = {3, 3};
  m.caps_filters = 2;
  m.caps_kernel = {2, 2};
  m.routing_iterations = 2;
  m.fc_width = 8;
  m.cell = CellKind::Memory;
  return m;
}

std::vector<SampleWindow> tiny_windows(std::int64_t per_class,
                                       std::uint64_t seed) {
  Rng rng(seed);
  return synth_generate(3, per_class, WindowLayout{6, 6}, 0.05, rng);
}

bool params_identical(const std::map<std::string, Tensor>& a,
                      const std::map<std::string, Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [name, ta] : a) {
    auto it = b.find(name);
    if (it == b.end() || !ta.same_shape(it->second)) return false;
    for (std::size_t i = 0; i < ta.data().size(); ++i) {
      if (ta.data()[i] != it->second.data()[i]) return false;
    }
  }
  return true;
}

// Pairwise-comparison AUC: ties between a positive and a negative score
// count half. O(n^2), independent of the sweep in the library.
double auc_pairwise(const std::vector<double>& scores,
                    const std::vector<bool>& positive) {
  double wins = 0.0;
  std::int64_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!positive[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (positive[j]) continue;
      ++pairs;
      if (scores[i] > scores[j]) wins += 1.0;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

std::size_t csv_field_count(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::string line;
  REQUIRE(std::getline(in, line));
  return static_cast<std::size_t>(
             std::count(line.begin(), line.end(), ',')) + 1;
}

}  // namespace

TEST_CASE("one Adam step from rest matches the closed form") {
  std::map<std::string, Tensor> params;
  params["w"] = Tensor::zeros({1});
  params["w"][0] = 0.25;
  Adam adam({"w"}, params, AdamSettings{});

  std::map<std::string, Tensor> grads;
  grads["w"] = Tensor::zeros({1});
  grads["w"][0] = 1.0;
  adam.step(params, grads);

  // With zero moments both bias corrections cancel the decay factors, so
  // the first update is lr * g / (|g| + eps).
  double want = 0.25 - 1e-3 * 1.0 / (1.0 + 1e-8);
  CHECK(params["w"][0] == want);
  CHECK(adam.steps_taken() == 1);
}

TEST_CASE("Adam trajectory matches a scalar reference over many steps") {
  Rng rng(31);
  std::map<std::string, Tensor> params;
  params["a"] = Tensor::zeros({3});
  params["b"] = Tensor::zeros({2, 2});
  for (auto& [name, t] : params) {
    (void)name;
    for (auto& v : t.data()) v = rng.uniform(-1.0, 1.0);
  }
  std::map<std::string, Tensor> ref = params;

  AdamSettings settings;
  settings.lr = 0.07;
  settings.beta1 = 0.85;
  settings.beta2 = 0.99;
  settings.eps = 1e-9;
  Adam adam({"a", "b"}, params, settings);

  std::map<std::string, std::vector<double>> m, v;
  for (auto& [name, t] : ref) {
    m[name].assign(t.data().size(), 0.0);
    v[name].assign(t.data().size(), 0.0);
  }
  for (int step = 1; step <= 25; ++step) {
    std::map<std::string, Tensor> grads;
    for (auto& [name, t] : ref) {
      grads[name] = Tensor::zeros(t.shape());
      for (auto& g : grads[name].data()) g = rng.uniform(-2.0, 2.0);
    }
    adam.step(params, grads);

    double bc1 = 1.0 - std::pow(settings.beta1, step);
    double bc2 = 1.0 - std::pow(settings.beta2, step);
    for (auto& [name, t] : ref) {
      for (std::size_t i = 0; i < t.data().size(); ++i) {
        double g = grads[name].data()[i];
        m[name][i] = settings.beta1 * m[name][i] + (1.0 - settings.beta1) * g;
        v[name][i] =
            settings.beta2 * v[name][i] + (1.0 - settings.beta2) * g * g;
        t.data()[i] -= settings.lr * (m[name][i] / bc1) /
                       (std::sqrt(v[name][i] / bc2) + settings.eps);
      }
    }
  }
  CHECK(params_identical(params, ref));
  CHECK(adam.steps_taken() == 25);
}

TEST_CASE("a zero gradient leaves the parameter bits unchanged") {
  std::map<std::string, Tensor> params;
  params["frozen"] = Tensor::zeros({2});
  params["live"] = Tensor::zeros({2});
  params["frozen"][0] = 0.625;
  params["frozen"][1] = -3.0;
  params["live"][0] = 1.0;
  Adam adam({"frozen", "live"}, params, AdamSettings{});

  std::map<std::string, Tensor> grads;
  grads["frozen"] = Tensor::zeros({2});
  grads["live"] = Tensor::zeros({2});
  grads["live"][0] = 0.5;
  for (int step = 0; step < 5; ++step) adam.step(params, grads);
  CHECK(params["frozen"][0] == 0.625);
  CHECK(params["frozen"][1] == -3.0);
  CHECK(params["live"][0] != 1.0);

  grads.erase("frozen");
  CHECK_THROWS_WITH_AS(adam.step(params, grads),
                       doctest::Contains("frozen"), ConfigError);
  grads["frozen"] = Tensor::zeros({3});
  CHECK_THROWS_AS(adam.step(params, grads), ShapeError);
  CHECK_THROWS_WITH_AS(Adam({"ghost"}, params, AdamSettings{}),
                       doctest::Contains("ghost"), ConfigError);
}

TEST_CASE("zero epochs trains nothing but still fits the fusion") {
  Model model(tiny_dataset(), tiny_model(), 11);
  std::map<std::string, Tensor> before = model.parameters();
  std::vector<SampleWindow> windows = tiny_windows(4, 21);

  Rng shuffle(5);
  TrainOptions options;
  options.epochs = 0;
  options.batch_size = 4;
  std::vector<EpochStats> curve = train_model(model, windows, shuffle, options);
  CHECK(curve.empty());
  CHECK(params_identical(before, model.parameters()));
  CHECK(model.bayes().fitted());

  MetricsReport report = evaluate_model(model, windows, MarginParams{});
  CHECK(report.test_size == 12);
  CHECK(report.n_classes == 3);
}

TEST_CASE("training reduces the joint loss on synthetic windows") {
  Model model(tiny_dataset(), tiny_model(), 3);
  std::vector<SampleWindow> windows = tiny_windows(8, 77);
  Rng shuffle(9);
  TrainOptions options;
  options.epochs = 6;
  options.batch_size = 8;
  std::int64_t callbacks = 0;
  options.on_epoch = [&](std::int64_t epoch, const EpochStats& stats) {
    CHECK(epoch == callbacks + 1);
    CHECK(stats.total > 0.0);
    ++callbacks;
  };
  std::vector<EpochStats> curve = train_model(model, windows, shuffle, options);
  REQUIRE(curve.size() == 6);
  CHECK(callbacks == 6);
  CHECK(curve.back().total < curve.front().total);
  for (const EpochStats& e : curve) {
    CHECK(e.total ==
          doctest::Approx(e.l_tp + e.l_st + e.l_pc + e.l_dc).epsilon(1e-12));
    CHECK(e.train_acc >= 0.0);
    CHECK(e.train_acc <= 1.0);
  }

  TrainOptions bad = options;
  bad.batch_size = 99;
  Rng r2(1);
  CHECK_THROWS_AS(train_model(model, windows, r2, bad), ConfigError);
  std::vector<SampleWindow> empty;
  CHECK_THROWS_AS(train_model(model, empty, r2, options), DataError);
}

TEST_CASE("identical seeds give bit-identical training runs") {
  std::vector<SampleWindow> windows = tiny_windows(5, 123);
  TrainOptions options;
  options.epochs = 3;
  options.batch_size = 5;
  options.dropout = 0.4;

  auto run_once = [&]() {
    Model model(tiny_dataset(), tiny_model(), 17);
    Rng shuffle(29);
    train_model(model, windows, shuffle, options);
    return model.parameters();
  };
  std::map<std::string, Tensor> first = run_once();
  std::map<std::string, Tensor> second = run_once();
  CHECK(params_identical(first, second));

  // The worker count must not leak into results: masks and batch order are
  // drawn up front and gradients reduce in fixed sample order.
  ::setenv("ASTCAPS_THREADS", "3", 1);
  std::map<std::string, Tensor> threaded = run_once();
  ::unsetenv("ASTCAPS_THREADS");
  CHECK(params_identical(first, threaded));
}

TEST_CASE("roc_curve sweeps from (0,0) to (1,1) and scores ties half") {
  // Hand set: pos scores {0.9, 0.8, 0.3}, neg {0.8, 0.7, 0.5}. Nine pairs:
  // 0.9 beats all three, 0.8 beats two and ties one, 0.3 loses all three,
  // so AUC = (3 + 2.5)/9.
  std::vector<double> scores = {0.9, 0.8, 0.8, 0.7, 0.5, 0.3};
  std::vector<bool> pos = {true, false, true, false, false, true};
  std::vector<RocPoint> curve = roc_curve(scores, pos);
  REQUIRE(curve.size() >= 2);
  CHECK(curve.front().fpr == 0.0);
  CHECK(curve.front().tpr == 0.0);
  CHECK(curve.back().fpr == 1.0);
  CHECK(curve.back().tpr == 1.0);
  for (std::size_t i = 1; i < curve.size(); ++i) {
    CHECK(curve[i].fpr >= curve[i - 1].fpr);
    CHECK(curve[i].tpr >= curve[i - 1].tpr);
  }
  CHECK(auc_trapezoid(curve) == doctest::Approx(5.5 / 9.0).epsilon(1e-14));
  CHECK(auc_of(scores, pos) == doctest::Approx(5.5 / 9.0).epsilon(1e-14));

  std::vector<double> perfect = {0.9, 0.8, 0.2, 0.1};
  std::vector<bool> perfect_pos = {true, true, false, false};
  CHECK(auc_of(perfect, perfect_pos) == 1.0);
  std::vector<bool> inverted = {false, false, true, true};
  CHECK(auc_of(perfect, inverted) == 0.0);

  std::vector<bool> all_pos = {true, true, true, true};
  CHECK_THROWS_AS(roc_curve(perfect, all_pos), DataError);
}

TEST_CASE("trapezoid AUC equals the pairwise oracle on 150 random sets") {
  Rng rng(2024);
  for (int trial = 0; trial < 150; ++trial) {
    auto n = static_cast<std::size_t>(4 + rng.below(40));
    std::vector<double> scores(n);
    std::vector<bool> pos(n);
    bool saw_pos = false, saw_neg = false;
    for (std::size_t i = 0; i < n; ++i) {
      // A coarse score grid forces plenty of exact ties.
      scores[i] = static_cast<double>(rng.below(8)) / 8.0;
      pos[i] = rng.uniform01() < 0.5;
      (pos[i] ? saw_pos : saw_neg) = true;
    }
    if (!saw_pos || !saw_neg) {
      pos[0] = true;
      pos[1] = false;
    }
    CHECK(auc_of(scores, pos) ==
          doctest::Approx(auc_pairwise(scores, pos)).epsilon(1e-12));
  }
}

TEST_CASE("micro AUC pools every one-vs-rest pair") {
  Rng rng(88);
  std::vector<std::vector<double>> scores;
  std::vector<std::int64_t> truth;
  for (int i = 0; i < 40; ++i) {
    std::vector<double> row(3);
    double sum = 0.0;
    for (double& v : row) {
      v = rng.uniform01();
      sum += v;
    }
    for (double& v : row) v /= sum;
    scores.push_back(row);
    truth.push_back(static_cast<std::int64_t>(rng.below(3)));
  }
  AucReport report = auc_report(scores, truth, 3);
  REQUIRE(report.class_auc.size() == 3);
  REQUIRE(report.class_curves.size() == 3);

  std::vector<double> pooled;
  std::vector<bool> pooled_pos;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    for (std::int64_t c = 0; c < 3; ++c) {
      pooled.push_back(scores[i][static_cast<std::size_t>(c)]);
      pooled_pos.push_back(truth[i] == c);
    }
  }
  CHECK(report.micro_auc ==
        doctest::Approx(auc_pairwise(pooled, pooled_pos)).epsilon(1e-12));
  for (std::int64_t c = 0; c < 3; ++c) {
    std::vector<double> s;
    std::vector<bool> p;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      s.push_back(scores[i][static_cast<std::size_t>(c)]);
      p.push_back(truth[i] == c);
    }
    CHECK(report.class_auc[static_cast<std::size_t>(c)] ==
          doctest::Approx(auc_pairwise(s, p)).epsilon(1e-12));
  }
}

TEST_CASE("accuracy and confusion counts") {
  std::vector<std::int64_t> pred = {0, 1, 2, 2, 1, 0};
  std::vector<std::int64_t> truth = {0, 1, 1, 2, 1, 2};
  CHECK(accuracy(pred, truth) == doctest::Approx(4.0 / 6.0));
  std::vector<std::vector<std::int64_t>> cm = confusion_matrix(pred, truth, 3);
  REQUIRE(cm.size() == 3);
  CHECK(cm[0][0] == 1);
  CHECK(cm[1][1] == 2);
  CHECK(cm[1][2] == 1);
  CHECK(cm[2][2] == 1);
  CHECK(cm[2][0] == 1);
  std::int64_t total = 0, diag = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) total += cm[i][j];
    diag += cm[i][i];
  }
  CHECK(total == 6);
  CHECK(diag == 4);

  std::vector<std::int64_t> shorter = {0, 1};
  CHECK_THROWS_AS(accuracy(pred, shorter), DataError);
  CHECK_THROWS_AS(confusion_matrix(pred, truth, 2), DataError);
}

TEST_CASE("checkpoints round-trip byte-identically") {
  TempDir dir("ckpt");
  RunConfig config;
  config.dataset = tiny_dataset();
  config.model = tiny_model();
  config.train.epochs = 1;

  Model model(config.dataset, config.model, 7);
  std::vector<SampleWindow> windows = tiny_windows(4, 50);
  Rng shuffle(2);
  TrainOptions options;
  options.epochs = 1;
  options.batch_size = 4;
  train_model(model, windows, shuffle, options);

  Checkpoint cp = checkpoint_of(model, config);
  CHECK(cp.has_bayes);
  CHECK(cp.bayes_classes == 3);
  CHECK(cp.bayes_prior.size() == 3);
  CHECK(cp.bayes_conditional.size() == 4 * 3 * 3);
  save_checkpoint(dir.file("a.bin"), cp);

  Checkpoint back = load_checkpoint(dir.file("a.bin"));
  CHECK(back.config_json == cp.config_json);
  CHECK(params_identical(back.params, cp.params));
  CHECK(back.bayes_prior == cp.bayes_prior);
  CHECK(back.bayes_conditional == cp.bayes_conditional);

  save_checkpoint(dir.file("b.bin"), back);
  std::ifstream fa(dir.file("a.bin"), std::ios::binary);
  std::ifstream fb(dir.file("b.bin"), std::ios::binary);
  std::string bytes_a((std::istreambuf_iterator<char>(fa)),
                      std::istreambuf_iterator<char>());
  std::string bytes_b((std::istreambuf_iterator<char>(fb)),
                      std::istreambuf_iterator<char>());
  CHECK(bytes_a == bytes_b);
  CHECK(bytes_a.substr(0, 8) == "ASTCAPSC");
  CHECK(bytes_a.substr(bytes_a.size() - 8) == "ASTCAPSE");
}

TEST_CASE("corrupted checkpoints are rejected with the reason") {
  TempDir dir("ckptbad");
  RunConfig config;
  config.dataset = tiny_dataset();
  config.model = tiny_model();
  Model model(config.dataset, config.model, 8);
  Checkpoint cp = checkpoint_of(model, config);
  save_checkpoint(dir.file("ok.bin"), cp);

  std::ifstream in(dir.file("ok.bin"), std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());

  auto write_bytes = [&](const std::string& name, const std::string& body) {
    std::ofstream out(dir.file(name), std::ios::binary);
    out << body;
    return dir.file(name);
  };

  std::string magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_WITH_AS(load_checkpoint(write_bytes("magic.bin", magic)),
                       doctest::Contains("magic"), DataError);

  std::string version = bytes;
  version[8] = 9;  // format version lives right after the magic
  CHECK_THROWS_WITH_AS(load_checkpoint(write_bytes("ver.bin", version)),
                       doctest::Contains("version"), DataError);

  std::string trunc = bytes.substr(0, bytes.size() / 2);
  CHECK_THROWS_AS(load_checkpoint(write_bytes("trunc.bin", trunc)), DataError);

  std::string clipped = bytes.substr(0, bytes.size() - 4);
  CHECK_THROWS_AS(load_checkpoint(write_bytes("clip.bin", clipped)),
                  DataError);

  CHECK_THROWS_AS(load_checkpoint(dir.file("missing.bin")), DataError);
}

TEST_CASE("a reloaded model reproduces evaluation bit for bit") {
  TempDir dir("ckpteval");
  RunConfig config;
  config.dataset = tiny_dataset();
  config.model = tiny_model();

  Model model(config.dataset, config.model, 13);
  std::vector<SampleWindow> windows = tiny_windows(5, 61);
  Rng shuffle(3);
  TrainOptions options;
  options.epochs = 2;
  options.batch_size = 5;
  train_model(model, windows, shuffle, options);
  save_checkpoint(dir.file("m.bin"), checkpoint_of(model, config));

  RunConfig embedded;
  Model restored =
      model_from_checkpoint(load_checkpoint(dir.file("m.bin")), &embedded);
  CHECK(serialize_config(embedded) == serialize_config(config));
  CHECK(params_identical(model.parameters(), restored.parameters()));

  MetricsReport a = evaluate_model(model, windows, MarginParams{});
  MetricsReport b = evaluate_model(restored, windows, MarginParams{});
  CHECK(a.fused_accuracy == b.fused_accuracy);
  CHECK(a.head_accuracy == b.head_accuracy);
  CHECK(a.confusion == b.confusion);
  CHECK(a.class_auc == b.class_auc);
  CHECK(a.micro_auc == b.micro_auc);
}

TEST_CASE("checkpoints with mismatched parameters name the offender") {
  RunConfig config;
  config.dataset = tiny_dataset();
  config.model = tiny_model();
  Model model(config.dataset, config.model, 21);
  Checkpoint cp = checkpoint_of(model, config);

  Checkpoint missing = cp;
  std::string victim = missing.params.begin()->first;
  missing.params.erase(missing.params.begin());
  CHECK_THROWS_WITH_AS(model_from_checkpoint(missing),
                       doctest::Contains(victim.c_str()), DataError);

  Checkpoint extra = cp;
  extra.params["stowaway"] = Tensor::zeros({1});
  CHECK_THROWS_WITH_AS(model_from_checkpoint(extra),
                       doctest::Contains("stowaway"), DataError);

  Checkpoint bent = cp;
  bent.params[victim] = Tensor::zeros({1, 1, 1});
  CHECK_THROWS_WITH_AS(model_from_checkpoint(bent), doctest::Contains(victim.c_str()),
                       DataError);
}

TEST_CASE("exported feature rows have the documented widths") {
  TempDir dir("export");
  DatasetConfig dataset = tiny_dataset();
  ModelConfig mc = tiny_model();
  Model model(dataset, mc, 4);
  std::vector<SampleWindow> windows = tiny_windows(2, 15);

  DerivedShapes s = derive_shapes(dataset, mc);
  CHECK(s.conv_h == 4);  // 6 - 3 + 1
  CHECK(s.conv_w == 4);
  CHECK(s.caps_h == 3);  // 4 - 2 + 1
  CHECK(s.caps_w == 3);
  CHECK(s.p == 18);      // 2 filters over a 3x3 capsule grid
  CHECK(s.fused_dim == 48);
  CHECK(s.rel_used == 18);
  CHECK(s.rel_dim == 17 * 64);

  std::map<std::string, std::size_t> want = {
      {"low_level", static_cast<std::size_t>(s.fused_dim)},
      {"high_level", static_cast<std::size_t>(s.p * kPrimaryCapsDim)},
      {"relationship", static_cast<std::size_t>(s.rel_dim)},
      {"digit", static_cast<std::size_t>(3 * kClassCapsDim)},
  };
  for (const auto& [tag, dim] : want) {
    std::string path = dir.file(tag + ".csv");
    export_features(model, windows, tag, path, MarginParams{});
    CHECK(csv_field_count(path) == dim + 1);  // label column first
    std::ifstream in(path);
    std::size_t rows = 0;
    std::string line;
    while (std::getline(in, line)) ++rows;
    CHECK(rows == windows.size());
  }

  CHECK_THROWS_AS(
      export_features(model, windows, "nonsense", dir.file("x.csv"),
                      MarginParams{}),
      ConfigError);
}

TEST_CASE("derive_shapes rejects kernels that do not fit") {
  DatasetConfig d = tiny_dataset();
  ModelConfig m = tiny_model();
  m.conv_kernel = {7, 7};
  CHECK_THROWS_AS(derive_shapes(d, m), ConfigError);
  m = tiny_model();
  m.caps_kernel = {4, 5};
  CHECK_THROWS_AS(derive_shapes(d, m), ConfigError);
}

TEST_CASE("convergence race runs both cells on identical data") {
  RunConfig config;
  config.dataset.kind = "synthetic";
  config.dataset.layout = {5, 4};
  config.dataset.n_classes = 2;
  config.dataset.windows_per_class = 5;
  config.dataset.noise_sigma = 0.05;
  config.model.hidden = 3;
  config.model.conv_filters = 2;
  config.model.conv_kernel = {2, 2};
  config.model.caps_filters = 2;
  config.model.caps_kernel = {2, 2};
  config.model.routing_iterations = 2;
  config.model.fc_width = 6;
  config.train.batch_size = 10;
  config.race.seeds = {11, 12};
  config.race.loss_threshold = 1e-9;  // unreachable: legs run to max_epochs
  config.race.max_epochs = 3;

  std::vector<std::uint64_t> seen;
  std::vector<RaceOutcome> outcomes = convergence_race(
      config, [&](const RaceOutcome& o) { seen.push_back(o.seed); });
  REQUIRE(outcomes.size() == 2);
  CHECK(seen == std::vector<std::uint64_t>{11, 12});
  for (const RaceOutcome& o : outcomes) {
    CHECK(o.memory.cell == CellKind::Memory);
    CHECK(o.gru.cell == CellKind::Gru);
    CHECK(o.memory.curve.size() == 3);
    CHECK(o.gru.curve.size() == 3);
    CHECK(o.memory.epochs_to_threshold == 4);  // max_epochs + 1: never hit
    CHECK(o.gru.epochs_to_threshold == 4);
    // Both legs see the same windows and shuffle stream, so shared-name
    // parameters start identical and epoch-1 losses sit close together.
    CHECK(std::abs(o.memory.curve[0].total - o.gru.curve[0].total) < 1.0);
  }
  CHECK(race_median_epochs(outcomes, CellKind::Memory) == 4.0);
  CHECK(race_median_epochs(outcomes, CellKind::Gru) == 4.0);

  // Rerunning the race reproduces the curves bit for bit.
  std::vector<RaceOutcome> again = convergence_race(config);
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    for (std::size_t e = 0; e < outcomes[i].memory.curve.size(); ++e) {
      CHECK(outcomes[i].memory.curve[e].total ==
            again[i].memory.curve[e].total);
      CHECK(outcomes[i].gru.curve[e].total == again[i].gru.curve[e].total);
    }
  }
}

TEST_CASE("race medians follow the textbook definition") {
  auto outcome_with = [](std::int64_t mem, std::int64_t gru) {
    RaceOutcome o;
    o.memory.epochs_to_threshold = mem;
    o.gru.epochs_to_threshold = gru;
    return o;
  };
  std::vector<RaceOutcome> odd = {outcome_with(7, 3), outcome_with(3, 9),
                                  outcome_with(5, 1)};
  CHECK(race_median_epochs(odd, CellKind::Memory) == 5.0);
  CHECK(race_median_epochs(odd, CellKind::Gru) == 3.0);
  std::vector<RaceOutcome> even = {outcome_with(3, 2), outcome_with(7, 4)};
  CHECK(race_median_epochs(even, CellKind::Memory) == 5.0);
  CHECK(race_median_epochs(even, CellKind::Gru) == 3.0);
  CHECK_THROWS_AS(race_median_epochs({}, CellKind::Memory), DataError);
}

TEST_CASE("gradient audit battery passes and catches a broken backward") {
  std::vector<LayerCheck> checks = gradient_check_battery(1e-4);
  std::set<std::string> names;
  for (const LayerCheck& c : checks) {
    names.insert(c.layer);
    CHECK(c.pass);
    CHECK(c.max_rel_err < 1e-4);
    CHECK_FALSE(c.worst_param.empty());
  }
  CHECK(names == std::set<std::string>{"conv", "memory_cell", "fusion",
                                       "capsule_path", "heads_losses",
                                       "squash", "routing"});

  // Sabotaging the squash backward must trip exactly the stages that
  // differentiate through it.
  detail::flip_squash_backward = true;
  std::vector<LayerCheck> broken = gradient_check_battery(1e-4);
  detail::flip_squash_backward = false;
  std::map<std::string, bool> pass_of;
  for (const LayerCheck& c : broken) pass_of[c.layer] = c.pass;
  CHECK_FALSE(pass_of.at("squash"));
  CHECK_FALSE(pass_of.at("routing"));
  CHECK_FALSE(pass_of.at("capsule_path"));
  CHECK(pass_of.at("conv"));
  CHECK(pass_of.at("memory_cell"));

  CHECK_THROWS_AS(gradient_check_battery(0.0), ConfigError);
}

TEST_CASE("config parsing round-trips and rejects unknown keys") {
  RunConfig config;
  config.dataset.kind = "synthetic";
  config.dataset.layout = {12, 10};
  config.dataset.n_classes = 4;
  std::string echo = serialize_config(config);
  RunConfig back = parse_config(echo);
  CHECK(serialize_config(back) == echo);

  std::string with_typo = echo;
  std::size_t pos = with_typo.find("\"hidden\"");
  REQUIRE(pos != std::string::npos);
  with_typo.replace(pos, 8, "\"hiddne\"");
  CHECK_THROWS_WITH_AS(parse_config(with_typo), doctest::Contains("hiddne"),
                       ConfigError);

  CHECK_THROWS_AS(parse_config("not json"), ConfigError);
  CHECK_THROWS_AS(parse_config("[]"), ConfigError);

  RunConfig bad = config;
  bad.model.hidden = 0;
  CHECK_THROWS_AS(validate_config(bad), ConfigError);
  bad = config;
  bad.train.train_fraction = 1.0;
  CHECK_THROWS_AS(validate_config(bad), ConfigError);
  bad = config;
  bad.model.routing_iterations = 0;
  CHECK_THROWS_AS(validate_config(bad), ConfigError);
  bad = config;
  bad.model.conv_kernel = {13, 5};
  CHECK_THROWS_AS(validate_config(bad), ConfigError);
  bad = config;
  bad.dataset.kind = "telepathy";
  CHECK_THROWS_AS(validate_config(bad), ConfigError);

  TempDir dir("cfg");
  std::ofstream out(dir.file("c.json"));
  out << echo;
  out.close();
  RunConfig from_file = load_config(dir.file("c.json"));
  CHECK(serialize_config(from_file) == echo);
  CHECK_THROWS_AS(load_config(dir.file("missing.json")), ConfigError);
}
