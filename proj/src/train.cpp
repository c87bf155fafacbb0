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

#include "astcaps/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <thread>

#include "astcaps/errors.hpp"

namespace astcaps {
namespace {

// ASTCAPS_THREADS caps batch workers; unset, 0, or 1 means serial.
std::size_t worker_count() {
  const char* env = std::getenv("ASTCAPS_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  long v = std::strtol(env, nullptr, 10);
  if (v <= 1) return 1;
  return std::min<std::size_t>(static_cast<std::size_t>(v), 64);
}

struct SampleResult {
  double l_tp = 0, l_st = 0, l_pc = 0, l_dc = 0, total = 0;
  bool digit_correct = false;
  std::map<std::string, Tensor> grads;
};

SampleResult run_sample(const Model& model, const SampleWindow& w,
                        const TrainOptions& options,
                        const std::vector<Tensor>* masks) {
  Forward f = model.run(w.features, w.label, options.margin, masks);
  SampleResult r;
  r.l_tp = f.graph.value(f.loss.l_tp)[0];
  r.l_st = f.graph.value(f.loss.l_st)[0];
  r.l_pc = f.graph.value(f.loss.l_pc)[0];
  r.l_dc = f.graph.value(f.loss.l_dc)[0];
  r.total = f.graph.value(f.loss.total)[0];
  r.digit_correct = f.votes[3] == w.label;
  r.grads = f.graph.backward(f.loss.total);
  return r;
}

}  // namespace

Adam::Adam(const std::vector<std::string>& order,
           const std::map<std::string, Tensor>& params, AdamSettings settings)
    : settings_(settings), order_(order) {
  for (const std::string& name : order_) {
    auto it = params.find(name);
    if (it == params.end()) {
      throw ConfigError("optimizer order names unknown parameter \"" + name +
                        "\"");
    }
    m_[name] = Tensor::zeros(it->second.shape());
    v_[name] = Tensor::zeros(it->second.shape());
  }
}

void Adam::step(std::map<std::string, Tensor>& params,
                const std::map<std::string, Tensor>& grads) {
  ++t_;
  double bc1 = 1.0 - std::pow(settings_.beta1, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(settings_.beta2, static_cast<double>(t_));
  for (const std::string& name : order_) {
    auto git = grads.find(name);
    if (git == grads.end()) {
      throw ConfigError("gradient for parameter \"" + name + "\" is missing");
    }
    Tensor& p = params.at(name);
    const Tensor& g = git->second;
    if (!p.same_shape(g)) {
      throw ShapeError("gradient shape mismatch for \"" + name + "\"");
    }
    Tensor& m = m_.at(name);
    Tensor& v = v_.at(name);
    for (std::int64_t i = 0; i < p.numel(); ++i) {
      m[i] = settings_.beta1 * m[i] + (1.0 - settings_.beta1) * g[i];
      v[i] = settings_.beta2 * v[i] + (1.0 - settings_.beta2) * g[i] * g[i];
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      double delta = settings_.lr * mhat / (std::sqrt(vhat) + settings_.eps);
      if (delta != 0.0) p[i] -= delta;
    }
  }
}

std::vector<EpochStats> train_model(Model& model,
                                    const std::vector<SampleWindow>& train_set,
                                    Rng& shuffle_rng,
                                    const TrainOptions& options) {
  if (train_set.empty()) throw DataError("training set is empty");
  if (options.batch_size < 1) throw ConfigError("batch_size must be positive");
  if (options.batch_size > static_cast<std::int64_t>(train_set.size())) {
    throw ConfigError("batch_size " + std::to_string(options.batch_size) +
                      " exceeds the training set of " +
                      std::to_string(train_set.size()));
  }
  const std::int64_t t_len = model.dataset_config().layout.t;
  const std::int64_t hidden = model.model_config().hidden;
  Adam adam(model.parameter_order(), model.parameters(), options.adam);
  std::vector<EpochStats> curve;

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::int64_t epoch = 1; epoch <= options.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    EpochStats stats;
    std::size_t correct = 0;

    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(options.batch_size)) {
      std::size_t end = std::min(
          order.size(), start + static_cast<std::size_t>(options.batch_size));
      std::size_t count = end - start;

      // Masks are drawn serially in sample order before any worker runs,
      // so the shuffle stream is independent of the worker count.
      std::vector<std::vector<Tensor>> masks(count);
      if (options.dropout > 0.0 && t_len > 1) {
        for (std::size_t s = 0; s < count; ++s) {
          masks[s].reserve(static_cast<std::size_t>(t_len - 1));
          for (std::int64_t t = 0; t + 1 < t_len; ++t) {
            masks[s].push_back(dropout_mask(hidden, options.dropout,
                                            shuffle_rng));
          }
        }
      }

      std::vector<SampleResult> results(count);
      auto run_range = [&](std::size_t lo, std::size_t hi) {
        for (std::size_t s = lo; s < hi; ++s) {
          const SampleWindow& w = train_set[order[start + s]];
          results[s] = run_sample(model, w, options,
                                  masks[s].empty() ? nullptr : &masks[s]);
        }
      };
      std::size_t workers = std::min(worker_count(), count);
      if (workers <= 1) {
        run_range(0, count);
      } else {
        std::vector<std::thread> pool;
        std::size_t chunk = (count + workers - 1) / workers;
        for (std::size_t wi = 0; wi < workers; ++wi) {
          std::size_t lo = wi * chunk;
          std::size_t hi = std::min(count, lo + chunk);
          if (lo >= hi) break;
          pool.emplace_back(run_range, lo, hi);
        }
        for (std::thread& th : pool) th.join();
      }

      // Fixed-order accumulation keeps training bit-reproducible.
      std::map<std::string, Tensor> grad_sum;
      for (const std::string& name : model.parameter_order()) {
        grad_sum[name] = Tensor::zeros(model.parameters().at(name).shape());
      }
      for (std::size_t s = 0; s < count; ++s) {
        const SampleResult& r = results[s];
        stats.l_tp += r.l_tp;
        stats.l_st += r.l_st;
        stats.l_pc += r.l_pc;
        stats.l_dc += r.l_dc;
        stats.total += r.total;
        if (r.digit_correct) ++correct;
        for (auto& [name, g] : r.grads) {
          Tensor& acc = grad_sum.at(name);
          for (std::int64_t i = 0; i < acc.numel(); ++i) acc[i] += g[i];
        }
      }
      double inv = 1.0 / static_cast<double>(count);
      for (auto& [name, g] : grad_sum) {
        (void)name;
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] *= inv;
      }
      adam.step(model.mutable_parameters(), grad_sum);
    }

    double inv_n = 1.0 / static_cast<double>(train_set.size());
    stats.l_tp *= inv_n;
    stats.l_st *= inv_n;
    stats.l_pc *= inv_n;
    stats.l_dc *= inv_n;
    stats.total *= inv_n;
    stats.train_acc = static_cast<double>(correct) * inv_n;
    if (!std::isfinite(stats.total)) {
      throw NumericError("training loss diverged at epoch " +
                         std::to_string(epoch));
    }
    curve.push_back(stats);
    if (options.on_epoch) options.on_epoch(epoch, stats);
    if (options.stop_loss > 0.0 && stats.total <= options.stop_loss) break;
  }

  // Fusion tables come from evaluation-mode votes over the training set.
  std::vector<BayesModel::Votes> votes;
  std::vector<std::int64_t> labels;
  votes.reserve(train_set.size());
  labels.reserve(train_set.size());
  for (const SampleWindow& w : train_set) {
    Forward f = model.run(w.features, w.label, options.margin, nullptr);
    votes.push_back(f.votes);
    labels.push_back(w.label);
  }
  model.bayes() = BayesModel::fit(votes, labels,
                                  model.dataset_config().n_classes);
  return curve;
}

MetricsReport evaluate_model(const Model& model,
                             const std::vector<SampleWindow>& test_set,
                             const MarginParams& margin,
                             std::vector<std::vector<RocPoint>>* roc_out) {
  if (test_set.empty()) throw DataError("test set is empty");
  if (!model.bayes().fitted()) {
    throw DataError("evaluation needs a fitted vote-fusion model");
  }
  std::int64_t n = model.dataset_config().n_classes;
  std::array<std::vector<std::int64_t>, kHeadCount> head_preds;
  std::vector<std::int64_t> fused_preds;
  std::vector<std::int64_t> truth;
  std::vector<std::vector<double>> scores;
  for (const SampleWindow& w : test_set) {
    Forward f = model.run(w.features, w.label, margin, nullptr);
    for (int h = 0; h < kHeadCount; ++h) {
      head_preds[static_cast<std::size_t>(h)].push_back(
          f.votes[static_cast<std::size_t>(h)]);
    }
    fused_preds.push_back(model.bayes().predict(f.votes));
    scores.push_back(model.bayes().posterior(f.votes));
    truth.push_back(w.label);
  }
  MetricsReport report;
  report.n_classes = n;
  report.test_size = static_cast<std::int64_t>(test_set.size());
  for (int h = 0; h < kHeadCount; ++h) {
    report.head_accuracy[static_cast<std::size_t>(h)] =
        accuracy(head_preds[static_cast<std::size_t>(h)], truth);
  }
  report.fused_accuracy = accuracy(fused_preds, truth);
  report.confusion = confusion_matrix(fused_preds, truth, n);
  AucReport auc = auc_report(scores, truth, n);
  report.class_auc = std::move(auc.class_auc);
  report.micro_auc = auc.micro_auc;
  if (roc_out != nullptr) *roc_out = std::move(auc.class_curves);
  return report;
}

void export_features(const Model& model,
                     const std::vector<SampleWindow>& windows,
                     const std::string& tag, const std::string& csv_path,
                     const MarginParams& margin) {
  if (windows.empty()) throw DataError("no windows to export");
  std::ofstream out(csv_path);
  if (!out) throw DataError("cannot write " + csv_path);
  char cell[32];
  for (const SampleWindow& w : windows) {
    Forward f = model.run(w.features, w.label, margin, nullptr);
    Tensor v = model.feature_vector(f, tag);
    out << w.label;
    for (std::int64_t i = 0; i < v.numel(); ++i) {
      std::snprintf(cell, sizeof(cell), "%.17g", v[i]);
      out << ',' << cell;
    }
    out << "\n";
  }
}

namespace {

// Seed-stream tags for the race: data and shuffle streams derive from the
// race seed independently, and both cells consume identical copies.
constexpr std::uint64_t kRaceDataTag = 101;
constexpr std::uint64_t kRaceShuffleTag = 202;

RaceLeg race_leg(const RunConfig& config, CellKind cell, std::uint64_t seed,
                 const std::vector<SampleWindow>& windows) {
  ModelConfig mc = config.model;
  mc.cell = cell;
  Model model(config.dataset, mc, seed);
  Rng shuffle = Rng(seed).derive(kRaceShuffleTag);
  TrainOptions options;
  options.epochs = config.race.max_epochs;
  options.batch_size = std::min<std::int64_t>(
      config.train.batch_size, static_cast<std::int64_t>(windows.size()));
  options.adam = {config.train.lr, config.train.beta1, config.train.beta2,
                  config.train.eps};
  options.dropout = config.train.dropout;
  options.margin = config.train.margin;
  options.stop_loss = config.race.loss_threshold;
  RaceLeg leg;
  leg.cell = cell;
  leg.curve = train_model(model, windows, shuffle, options);
  leg.epochs_to_threshold = config.race.max_epochs + 1;
  for (std::size_t e = 0; e < leg.curve.size(); ++e) {
    if (leg.curve[e].total <= config.race.loss_threshold) {
      leg.epochs_to_threshold = static_cast<std::int64_t>(e) + 1;
      break;
    }
  }
  return leg;
}

}  // namespace

std::vector<RaceOutcome> convergence_race(
    const RunConfig& config,
    const std::function<void(const RaceOutcome&)>& on_seed) {
  std::vector<RaceOutcome> outcomes;
  for (std::uint64_t seed : config.race.seeds) {
    std::vector<SampleWindow> windows;
    if (config.dataset.kind == "synthetic") {
      Rng data_rng = Rng(seed).derive(kRaceDataTag);
      windows = synth_generate(config.dataset.n_classes,
                               config.dataset.windows_per_class,
                               config.dataset.layout,
                               config.dataset.noise_sigma, data_rng);
    } else {
      LoadedDataset ds = load_dataset(
          config.manifest, config.data_root,
          DatasetOptions{config.dataset.kind, config.dataset.layout,
                         config.dataset.stride,
                         config.dataset.drop_first_column});
      windows = std::move(ds.windows);
    }
    RaceOutcome outcome;
    outcome.seed = seed;
    outcome.memory = race_leg(config, CellKind::Memory, seed, windows);
    outcome.gru = race_leg(config, CellKind::Gru, seed, windows);
    if (on_seed) on_seed(outcome);
    outcomes.push_back(std::move(outcome));
  }
  return outcomes;
}

double race_median_epochs(const std::vector<RaceOutcome>& outcomes,
                          CellKind cell) {
  if (outcomes.empty()) throw DataError("race produced no outcomes");
  std::vector<double> v;
  for (const RaceOutcome& o : outcomes) {
    const RaceLeg& leg = cell == CellKind::Memory ? o.memory : o.gru;
    v.push_back(static_cast<double>(leg.epochs_to_threshold));
  }
  std::sort(v.begin(), v.end());
  std::size_t mid = v.size() / 2;
  return v.size() % 2 == 1 ? v[mid] : 0.5 * (v[mid - 1] + v[mid]);
}

std::vector<LayerCheck> gradient_check_battery(double tolerance,
                                               double step) {
  if (!(tolerance > 0.0)) throw ConfigError("tolerance must be positive");

  DatasetConfig dataset;
  dataset.kind = "synthetic";
  dataset.layout = {6, 5};
  dataset.n_classes = 3;
  ModelConfig mc;
  mc.hidden = 4;  // differs from conv_filters so the fusion projection exists
  mc.conv_filters = 3;
  mc.conv_kernel = {3, 3};
  mc.caps_filters = 2;
  mc.caps_kernel = {2, 2};
  mc.routing_iterations = 3;
  mc.fc_width = 8;
  mc.cell = CellKind::Memory;

  Rng data_rng(99);
  std::vector<SampleWindow> windows =
      synth_generate(dataset.n_classes, 2, dataset.layout, 0.05, data_rng);
  Model model(dataset, mc, 424242);
  Forward f = model.run(windows[2].features, windows[2].label,
                        MarginParams{}, nullptr);

  auto layer_of = [](const std::string& name) -> const char* {
    if (name.rfind("mem.", 0) == 0) return "memory_cell";
    if (name.rfind("conv.", 0) == 0) return "conv";
    if (name.rfind("fuse.", 0) == 0) return "fusion";
    if (name.rfind("caps.", 0) == 0) return "capsule_path";
    return "heads_losses";
  };
  std::vector<LayerCheck> checks;
  for (const char* layer :
       {"conv", "memory_cell", "fusion", "capsule_path", "heads_losses"}) {
    LayerCheck c;
    c.layer = layer;
    checks.push_back(c);
  }
  auto slot = [&](const std::string& layer) -> LayerCheck& {
    for (LayerCheck& c : checks) {
      if (c.layer == layer) return c;
    }
    throw ConfigError("unknown layer " + layer);
  };
  for (const auto& [name, id] : f.graph.parameters()) {
    (void)id;
    double err = grad_check(f.graph, f.loss.total, name, step);
    LayerCheck& c = slot(layer_of(name));
    if (err >= c.max_rel_err) {
      c.max_rel_err = err;
      c.worst_param = name;
    }
  }

  // Standalone audits of the two hand-written backward rules.
  {
    Graph g;
    Rng rng(7);
    NodeId u = g.parameter("u", Tensor::uniform({3, 4}, -0.8, 0.8, rng));
    NodeId loss = g.reduce_sum(g.squash(u));
    LayerCheck c;
    c.layer = "squash";
    c.worst_param = "u";
    c.max_rel_err = grad_check(g, loss, "u", step);
    checks.push_back(c);
  }
  {
    Graph g;
    Rng rng(8);
    NodeId pred =
        g.parameter("pred", Tensor::uniform({4, 3, 4}, -0.05, 0.05, rng));
    NodeId loss = g.reduce_sum(g.route(pred, 3));
    LayerCheck c;
    c.layer = "routing";
    c.worst_param = "pred";
    c.max_rel_err = grad_check(g, loss, "pred", step);
    checks.push_back(c);
  }

  for (LayerCheck& c : checks) c.pass = c.max_rel_err <= tolerance;
  return checks;
}

}  // namespace astcaps
