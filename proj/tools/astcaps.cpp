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

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "astcaps/checkpoint.hpp"
#include "astcaps/config.hpp"
#include "astcaps/data.hpp"
#include "astcaps/errors.hpp"
#include "astcaps/metrics.hpp"
#include "astcaps/model.hpp"
#include "astcaps/train.hpp"

namespace {

using namespace astcaps;
using nlohmann::json;
namespace fs = std::filesystem;

// Seed-stream tags: synthetic data, the train/test split, and batch
// shuffling draw from independent streams derived from the shuffle seed, so
// changing one stage's consumption never disturbs the others.
constexpr std::uint64_t kSynthDataTag = 11;
constexpr std::uint64_t kSplitTag = 12;
constexpr std::uint64_t kTrainTag = 13;

const std::set<std::string>& feature_tags() {
  static const std::set<std::string> tags{"low_level", "high_level",
                                          "relationship", "digit"};
  return tags;
}

struct CommonFlags {
  std::string config_path;
  std::string checkpoint_path;
  std::string data_root;
  std::string manifest;
  std::string out_dir;
  std::uint64_t seed_init = 0;
  std::uint64_t seed_shuffle = 0;
  bool seed_init_set = false;
  bool seed_shuffle_set = false;
  double tolerance = 1e-4;
  std::string export_tag;
  std::string inject;
};

void add_common_flags(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "Run configuration JSON");
  cmd->add_option("--checkpoint", f.checkpoint_path, "Model checkpoint file");
  cmd->add_option("--data", f.data_root, "Data root directory");
  cmd->add_option("--manifest", f.manifest, "Dataset manifest CSV");
  cmd->add_option("--out", f.out_dir, "Output directory");
  cmd->add_option("--seed-init", f.seed_init, "Parameter init seed")
      ->each([&f](const std::string&) { f.seed_init_set = true; });
  cmd->add_option("--seed-shuffle", f.seed_shuffle, "Data-order seed")
      ->each([&f](const std::string&) { f.seed_shuffle_set = true; });
  cmd->add_option("--tolerance", f.tolerance,
                  "Max relative error for gradient checks");
  cmd->add_option("--export-features", f.export_tag,
                  "Also write features_<tag>.csv "
                  "(low_level|high_level|relationship|digit)");
  cmd->add_option("--inject", f.inject, "Fault injection (testing)")
      ->group("");
}

RunConfig effective_config(const CommonFlags& f) {
  if (f.config_path.empty()) throw ConfigError("--config is required");
  RunConfig c = load_config(f.config_path);
  if (!f.out_dir.empty()) c.out_dir = f.out_dir;
  if (!f.data_root.empty()) c.data_root = f.data_root;
  if (!f.manifest.empty()) c.manifest = f.manifest;
  if (f.seed_init_set) c.seeds.init = f.seed_init;
  if (f.seed_shuffle_set) c.seeds.shuffle = f.seed_shuffle;
  return c;
}

void apply_injection(const CommonFlags& f) {
  if (f.inject.empty()) return;
  if (f.inject == "squash") {
    detail::flip_squash_backward = true;
  } else {
    throw ConfigError("unknown injection \"" + f.inject + "\"");
  }
}

void check_export_tag(const std::string& tag) {
  if (!tag.empty() && !feature_tags().count(tag)) {
    throw ConfigError("unknown feature tag \"" + tag +
                      "\" (use low_level, high_level, relationship, digit)");
  }
}

std::vector<SampleWindow> build_windows(const RunConfig& c) {
  if (c.dataset.kind == "synthetic") {
    Rng data_rng = Rng(c.seeds.shuffle).derive(kSynthDataTag);
    return synth_generate(c.dataset.n_classes, c.dataset.windows_per_class,
                          c.dataset.layout, c.dataset.noise_sigma, data_rng);
  }
  if (c.manifest.empty()) {
    throw ConfigError("dataset kind \"" + c.dataset.kind +
                      "\" needs a manifest (config key or --manifest)");
  }
  LoadedDataset ds = load_dataset(
      c.manifest, c.data_root,
      DatasetOptions{c.dataset.kind, c.dataset.layout, c.dataset.stride,
                     c.dataset.drop_first_column});
  if (static_cast<std::int64_t>(ds.class_names.size()) !=
      c.dataset.n_classes) {
    throw DataError("manifest lists " +
                    std::to_string(ds.class_names.size()) +
                    " classes but the config declares " +
                    std::to_string(c.dataset.n_classes));
  }
  return std::move(ds.windows);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_train_curve(const fs::path& path,
                       const std::vector<EpochStats>& curve) {
  std::string text = "epoch,l_tp,l_st,l_pc,l_dc,total,acc\n";
  for (std::size_t e = 0; e < curve.size(); ++e) {
    const EpochStats& s = curve[e];
    text += std::to_string(e + 1) + ',' + fmt(s.l_tp) + ',' + fmt(s.l_st) +
            ',' + fmt(s.l_pc) + ',' + fmt(s.l_dc) + ',' + fmt(s.total) + ',' +
            fmt(s.train_acc) + "\n";
  }
  write_text(path, text);
}

void write_metrics_files(const fs::path& out_dir, const MetricsReport& report,
                         const std::vector<std::vector<RocPoint>>& curves,
                         const std::vector<EpochStats>& curve) {
  json doc;
  doc["accuracy"] = {{"temporal", report.head_accuracy[0]},
                     {"spatiotemporal", report.head_accuracy[1]},
                     {"relationship", report.head_accuracy[2]},
                     {"digit", report.head_accuracy[3]},
                     {"fused", report.fused_accuracy}};
  doc["auc"] = {{"per_class", report.class_auc}, {"micro", report.micro_auc}};
  doc["confusion"] = report.confusion;
  doc["n_classes"] = report.n_classes;
  doc["test_size"] = report.test_size;
  doc["loss_curve"] = json::array();
  for (std::size_t e = 0; e < curve.size(); ++e) {
    const EpochStats& s = curve[e];
    doc["loss_curve"].push_back({{"epoch", e + 1},
                                 {"l_tp", s.l_tp},
                                 {"l_st", s.l_st},
                                 {"l_pc", s.l_pc},
                                 {"l_dc", s.l_dc},
                                 {"total", s.total},
                                 {"acc", s.train_acc}});
  }
  write_text(out_dir / "metrics.json", doc.dump(2) + "\n");

  std::string confusion;
  for (const auto& row : report.confusion) {
    for (std::size_t j = 0; j < row.size(); ++j) {
      confusion += (j ? "," : "") + std::to_string(row[j]);
    }
    confusion += "\n";
  }
  write_text(out_dir / "confusion.csv", confusion);

  for (std::size_t c = 0; c < curves.size(); ++c) {
    std::string roc = "fpr,tpr\n";
    for (const RocPoint& p : curves[c]) {
      roc += fmt(p.fpr) + ',' + fmt(p.tpr) + "\n";
    }
    write_text(out_dir / ("roc_" + std::to_string(c) + ".csv"), roc);
  }
}

void print_report(const MetricsReport& r) {
  std::printf(
      "accuracy: temporal %.4f  spatiotemporal %.4f  relationship %.4f  "
      "digit %.4f  fused %.4f\n",
      r.head_accuracy[0], r.head_accuracy[1], r.head_accuracy[2],
      r.head_accuracy[3], r.fused_accuracy);
  std::printf("micro-average AUC: %.4f\n", r.micro_auc);
}

int cmd_train(const CommonFlags& flags) {
  apply_injection(flags);
  check_export_tag(flags.export_tag);
  RunConfig c = effective_config(flags);

  std::vector<SampleWindow> windows = build_windows(c);
  Rng split_rng = Rng(c.seeds.shuffle).derive(kSplitTag);
  Split split = stratified_split(windows, c.train.train_fraction, split_rng);
  std::printf("dataset: %zu windows (%zu train / %zu test), %lld classes\n",
              windows.size(), split.train.size(), split.test.size(),
              static_cast<long long>(c.dataset.n_classes));

  Model model(c.dataset, c.model, c.seeds.init);
  TrainOptions options;
  options.epochs = c.train.epochs;
  options.batch_size = c.train.batch_size;
  options.adam = {c.train.lr, c.train.beta1, c.train.beta2, c.train.eps};
  options.dropout = c.train.dropout;
  options.margin = c.train.margin;
  options.on_epoch = [&](std::int64_t epoch, const EpochStats& s) {
    std::printf("epoch %lld/%lld  loss %.6f  (tp %.4f st %.4f pc %.4f dc "
                "%.4f)  acc %.4f\n",
                static_cast<long long>(epoch),
                static_cast<long long>(c.train.epochs), s.total, s.l_tp,
                s.l_st, s.l_pc, s.l_dc, s.train_acc);
    std::fflush(stdout);
  };
  Rng train_rng = Rng(c.seeds.shuffle).derive(kTrainTag);
  std::vector<EpochStats> curve = train_model(model, split.train, train_rng,
                                              options);

  std::vector<std::vector<RocPoint>> roc;
  MetricsReport report = evaluate_model(model, split.test, c.train.margin,
                                        &roc);

  fs::create_directories(c.out_dir);
  write_text(fs::path(c.out_dir) / "config.json", serialize_config(c));
  write_train_curve(fs::path(c.out_dir) / "train_curve.csv", curve);
  write_metrics_files(c.out_dir, report, roc, curve);
  save_checkpoint((fs::path(c.out_dir) / "checkpoint.astc").string(),
                  checkpoint_of(model, c));
  if (!flags.export_tag.empty()) {
    export_features(model, split.test, flags.export_tag,
                    (fs::path(c.out_dir) /
                     ("features_" + flags.export_tag + ".csv"))
                        .string(),
                    c.train.margin);
  }
  print_report(report);
  return 0;
}

int cmd_eval(const CommonFlags& flags) {
  apply_injection(flags);
  check_export_tag(flags.export_tag);
  if (flags.checkpoint_path.empty()) {
    throw ConfigError("--checkpoint is required");
  }
  Checkpoint checkpoint = load_checkpoint(flags.checkpoint_path);
  RunConfig c;
  Model model = model_from_checkpoint(checkpoint, &c);
  if (!flags.out_dir.empty()) c.out_dir = flags.out_dir;
  if (!flags.data_root.empty()) c.data_root = flags.data_root;
  if (!flags.manifest.empty()) c.manifest = flags.manifest;

  std::vector<SampleWindow> windows = build_windows(c);
  Rng split_rng = Rng(c.seeds.shuffle).derive(kSplitTag);
  Split split = stratified_split(windows, c.train.train_fraction, split_rng);

  std::vector<std::vector<RocPoint>> roc;
  MetricsReport report = evaluate_model(model, split.test, c.train.margin,
                                        &roc);
  fs::create_directories(c.out_dir);
  write_metrics_files(c.out_dir, report, roc, {});
  if (!flags.export_tag.empty()) {
    export_features(model, split.test, flags.export_tag,
                    (fs::path(c.out_dir) /
                     ("features_" + flags.export_tag + ".csv"))
                        .string(),
                    c.train.margin);
  }
  print_report(report);
  return 0;
}

int cmd_gradcheck(const CommonFlags& flags) {
  apply_injection(flags);
  std::vector<LayerCheck> checks = gradient_check_battery(flags.tolerance);
  std::vector<std::string> failing;
  for (const LayerCheck& c : checks) {
    std::printf("layer %-12s  max rel err %.3e  (param %s)  %s\n",
                c.layer.c_str(), c.max_rel_err, c.worst_param.c_str(),
                c.pass ? "PASS" : "FAIL");
    if (!c.pass) failing.push_back(c.layer);
  }
  if (!failing.empty()) {
    std::string joined;
    for (const std::string& l : failing) {
      joined += (joined.empty() ? "" : ", ") + l;
    }
    throw NumericError("gradient check failed for layer(s): " + joined);
  }
  std::printf("all layers within %.3e\n", flags.tolerance);
  return 0;
}

int cmd_race(const CommonFlags& flags) {
  apply_injection(flags);
  RunConfig c = effective_config(flags);
  fs::create_directories(c.out_dir);
  auto on_seed = [&](const RaceOutcome& o) {
    std::string text = "epoch,cell_kind,train_loss,train_acc\n";
    for (const RaceLeg* leg : {&o.memory, &o.gru}) {
      for (std::size_t e = 0; e < leg->curve.size(); ++e) {
        text += std::to_string(e + 1) + ',' + cell_kind_name(leg->cell) +
                ',' + fmt(leg->curve[e].total) + ',' +
                fmt(leg->curve[e].train_acc) + "\n";
      }
    }
    write_text(fs::path(c.out_dir) /
                   ("race_" + std::to_string(o.seed) + ".csv"),
               text);
    std::printf("seed %llu: memory %lld epochs, gru %lld epochs "
                "(threshold %.3f, cap %lld)\n",
                static_cast<unsigned long long>(o.seed),
                static_cast<long long>(o.memory.epochs_to_threshold),
                static_cast<long long>(o.gru.epochs_to_threshold),
                c.race.loss_threshold,
                static_cast<long long>(c.race.max_epochs));
    std::fflush(stdout);
  };
  std::vector<RaceOutcome> outcomes = convergence_race(c, on_seed);
  std::printf("median epochs-to-loss-%.3f: memory %.1f, gru %.1f\n",
              c.race.loss_threshold,
              race_median_epochs(outcomes, CellKind::Memory),
              race_median_epochs(outcomes, CellKind::Gru));
  return 0;
}

int cmd_synth(const CommonFlags& flags) {
  apply_injection(flags);
  RunConfig c = effective_config(flags);
  if (c.dataset.kind != "synthetic") {
    throw ConfigError("synth needs dataset.kind == \"synthetic\"");
  }
  Rng data_rng = Rng(c.seeds.shuffle).derive(kSynthDataTag);
  std::vector<SampleWindow> windows =
      synth_generate(c.dataset.n_classes, c.dataset.windows_per_class,
                     c.dataset.layout, c.dataset.noise_sigma, data_rng);
  std::vector<std::string> class_names;
  int digits = 1;
  for (std::int64_t n = c.dataset.n_classes; n >= 10; n /= 10) ++digits;
  for (std::int64_t i = 0; i < c.dataset.n_classes; ++i) {
    std::string n = std::to_string(i);
    class_names.push_back("class_" +
                          std::string(static_cast<std::size_t>(digits) -
                                          n.size(),
                                      '0') +
                          n);
  }
  std::string manifest =
      write_dataset(windows, c.dataset.layout, class_names, c.out_dir);
  std::printf("wrote %zu windows and %s\n", windows.size(), manifest.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gait-recognition capsule network trainer"};
  app.require_subcommand(1);

  CommonFlags flags;
  CLI::App* train = app.add_subcommand("train", "Train a model end to end");
  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  CLI::App* gradcheck =
      app.add_subcommand("gradcheck", "Audit gradients by finite differences");
  CLI::App* race = app.add_subcommand(
      "race", "Compare convergence of the two recurrent cells");
  CLI::App* synth =
      app.add_subcommand("synth", "Write a synthetic dataset to disk");
  for (CLI::App* cmd : {train, eval, gradcheck, race, synth}) {
    add_common_flags(cmd, flags);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (train->parsed()) return cmd_train(flags);
    if (eval->parsed()) return cmd_eval(flags);
    if (gradcheck->parsed()) return cmd_gradcheck(flags);
    if (race->parsed()) return cmd_race(flags);
    if (synth->parsed()) return cmd_synth(flags);
    std::fprintf(stderr, "error: no command\n");
    return 1;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 2;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
