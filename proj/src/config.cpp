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

#include "astcaps/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "astcaps/errors.hpp"

namespace astcaps {
namespace {

using nlohmann::json;

[[noreturn]] void bad(const std::string& msg) { throw ConfigError(msg); }

void reject_unknown_keys(const json& obj, const std::string& where,
                         const std::set<std::string>& known) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!known.count(it.key())) {
      bad("unknown key \"" + it.key() + "\" in " + where);
    }
  }
}

const json* find(const json& obj, const std::string& key) {
  auto it = obj.find(key);
  return it == obj.end() ? nullptr : &*it;
}

std::int64_t get_int(const json& obj, const std::string& where,
                     const std::string& key, std::int64_t fallback) {
  const json* v = find(obj, key);
  if (!v) return fallback;
  if (!v->is_number_integer()) bad(where + "." + key + " must be an integer");
  return v->get<std::int64_t>();
}

std::uint64_t get_u64(const json& obj, const std::string& where,
                      const std::string& key, std::uint64_t fallback) {
  const json* v = find(obj, key);
  if (!v) return fallback;
  if (!v->is_number_integer() ||
      (v->is_number_integer() && !v->is_number_unsigned() &&
       v->get<std::int64_t>() < 0)) {
    bad(where + "." + key + " must be a non-negative integer");
  }
  return v->get<std::uint64_t>();
}

double get_double(const json& obj, const std::string& where,
                  const std::string& key, double fallback) {
  const json* v = find(obj, key);
  if (!v) return fallback;
  if (!v->is_number()) bad(where + "." + key + " must be a number");
  return v->get<double>();
}

bool get_bool(const json& obj, const std::string& where,
              const std::string& key, bool fallback) {
  const json* v = find(obj, key);
  if (!v) return fallback;
  if (!v->is_boolean()) bad(where + "." + key + " must be a boolean");
  return v->get<bool>();
}

std::string get_string(const json& obj, const std::string& where,
                       const std::string& key, const std::string& fallback) {
  const json* v = find(obj, key);
  if (!v) return fallback;
  if (!v->is_string()) bad(where + "." + key + " must be a string");
  return v->get<std::string>();
}

std::array<std::int64_t, 2> get_pair(const json& obj, const std::string& where,
                                     const std::string& key,
                                     std::array<std::int64_t, 2> fallback) {
  const json* v = find(obj, key);
  if (!v) return fallback;
  if (!v->is_array() || v->size() != 2 || !(*v)[0].is_number_integer() ||
      !(*v)[1].is_number_integer()) {
    bad(where + "." + key + " must be a two-integer array");
  }
  return {(*v)[0].get<std::int64_t>(), (*v)[1].get<std::int64_t>()};
}

DatasetConfig parse_dataset(const json& obj) {
  reject_unknown_keys(obj, "dataset",
                      {"kind", "layout", "n_classes", "stride",
                       "drop_first_column", "windows_per_class",
                       "noise_sigma"});
  DatasetConfig d;
  d.kind = get_string(obj, "dataset", "kind", "");
  const json* layout = find(obj, "layout");
  if (!layout) bad("dataset.layout is required");
  if (!layout->is_object()) bad("dataset.layout must be an object");
  reject_unknown_keys(*layout, "dataset.layout", {"k", "t"});
  d.layout.k = get_int(*layout, "dataset.layout", "k", 0);
  d.layout.t = get_int(*layout, "dataset.layout", "t", 0);
  d.n_classes = get_int(obj, "dataset", "n_classes", 0);
  d.stride = get_int(obj, "dataset", "stride", 0);
  d.drop_first_column = get_bool(obj, "dataset", "drop_first_column", false);
  d.windows_per_class = get_int(obj, "dataset", "windows_per_class", 100);
  d.noise_sigma = get_double(obj, "dataset", "noise_sigma", 0.05);
  return d;
}

ModelConfig parse_model(const json& obj) {
  reject_unknown_keys(obj, "model",
                      {"hidden", "conv_filters", "conv_kernel", "caps_filters",
                       "caps_kernel", "routing_iterations", "fc_width", "cell",
                       "relationship"});
  ModelConfig m;
  m.hidden = get_int(obj, "model", "hidden", m.hidden);
  m.conv_filters = get_int(obj, "model", "conv_filters", m.conv_filters);
  m.conv_kernel = get_pair(obj, "model", "conv_kernel", m.conv_kernel);
  m.caps_filters = get_int(obj, "model", "caps_filters", m.caps_filters);
  m.caps_kernel = get_pair(obj, "model", "caps_kernel", m.caps_kernel);
  m.routing_iterations =
      get_int(obj, "model", "routing_iterations", m.routing_iterations);
  m.fc_width = get_int(obj, "model", "fc_width", m.fc_width);
  std::string cell = get_string(obj, "model", "cell", "memory");
  if (cell == "memory") {
    m.cell = CellKind::Memory;
  } else if (cell == "gru") {
    m.cell = CellKind::Gru;
  } else {
    bad("model.cell must be \"memory\" or \"gru\", got \"" + cell + "\"");
  }
  if (const json* rel = find(obj, "relationship")) {
    if (!rel->is_object()) bad("model.relationship must be an object");
    reject_unknown_keys(*rel, "model.relationship",
                        {"max_capsules", "lift_eps", "ridge_lambda"});
    m.relationship.max_capsules = get_int(*rel, "model.relationship",
                                          "max_capsules",
                                          m.relationship.max_capsules);
    m.relationship.lift_eps = get_double(*rel, "model.relationship",
                                         "lift_eps", m.relationship.lift_eps);
    m.relationship.ridge_lambda =
        get_double(*rel, "model.relationship", "ridge_lambda",
                   m.relationship.ridge_lambda);
  }
  return m;
}

TrainConfig parse_train(const json& obj) {
  reject_unknown_keys(obj, "train",
                      {"epochs", "batch_size", "lr", "beta1", "beta2", "eps",
                       "dropout", "train_fraction", "margin"});
  TrainConfig t;
  t.epochs = get_int(obj, "train", "epochs", t.epochs);
  t.batch_size = get_int(obj, "train", "batch_size", t.batch_size);
  t.lr = get_double(obj, "train", "lr", t.lr);
  t.beta1 = get_double(obj, "train", "beta1", t.beta1);
  t.beta2 = get_double(obj, "train", "beta2", t.beta2);
  t.eps = get_double(obj, "train", "eps", t.eps);
  t.dropout = get_double(obj, "train", "dropout", t.dropout);
  t.train_fraction = get_double(obj, "train", "train_fraction",
                                t.train_fraction);
  if (const json* margin = find(obj, "margin")) {
    if (!margin->is_object()) bad("train.margin must be an object");
    reject_unknown_keys(*margin, "train.margin",
                        {"m_plus", "m_minus", "lambda"});
    t.margin.m_plus = get_double(*margin, "train.margin", "m_plus",
                                 t.margin.m_plus);
    t.margin.m_minus = get_double(*margin, "train.margin", "m_minus",
                                  t.margin.m_minus);
    t.margin.lambda = get_double(*margin, "train.margin", "lambda",
                                 t.margin.lambda);
  }
  return t;
}

RaceConfig parse_race(const json& obj) {
  reject_unknown_keys(obj, "race", {"seeds", "loss_threshold", "max_epochs"});
  RaceConfig r;
  if (const json* seeds = find(obj, "seeds")) {
    if (!seeds->is_array() || seeds->empty()) {
      bad("race.seeds must be a non-empty array");
    }
    r.seeds.clear();
    for (const json& s : *seeds) {
      if (!s.is_number_integer() ||
          (!s.is_number_unsigned() && s.get<std::int64_t>() < 0)) {
        bad("race.seeds entries must be non-negative integers");
      }
      r.seeds.push_back(s.get<std::uint64_t>());
    }
  }
  r.loss_threshold = get_double(obj, "race", "loss_threshold",
                                r.loss_threshold);
  r.max_epochs = get_int(obj, "race", "max_epochs", r.max_epochs);
  return r;
}

}  // namespace

RunConfig parse_config(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    bad(std::string("config is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) bad("config root must be a JSON object");
  reject_unknown_keys(doc, "config",
                      {"dataset", "model", "train", "race", "seeds", "out_dir",
                       "data_root", "manifest"});
  RunConfig c;
  const json* dataset = find(doc, "dataset");
  if (!dataset || !dataset->is_object()) {
    bad("config.dataset object is required");
  }
  c.dataset = parse_dataset(*dataset);
  if (const json* model = find(doc, "model")) {
    if (!model->is_object()) bad("config.model must be an object");
    c.model = parse_model(*model);
  }
  if (const json* train = find(doc, "train")) {
    if (!train->is_object()) bad("config.train must be an object");
    c.train = parse_train(*train);
  }
  if (const json* race = find(doc, "race")) {
    if (!race->is_object()) bad("config.race must be an object");
    c.race = parse_race(*race);
  }
  if (const json* seeds = find(doc, "seeds")) {
    if (!seeds->is_object()) bad("config.seeds must be an object");
    reject_unknown_keys(*seeds, "seeds", {"init", "shuffle"});
    c.seeds.init = get_u64(*seeds, "seeds", "init", c.seeds.init);
    c.seeds.shuffle = get_u64(*seeds, "seeds", "shuffle", c.seeds.shuffle);
  }
  c.out_dir = get_string(doc, "config", "out_dir", c.out_dir);
  c.data_root = get_string(doc, "config", "data_root", c.data_root);
  c.manifest = get_string(doc, "config", "manifest", c.manifest);
  validate_config(c);
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) bad("cannot open config " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

void validate_config(const RunConfig& c) {
  const DatasetConfig& d = c.dataset;
  if (d.kind != "synthetic" && d.kind != "timeseries" &&
      d.kind != "skeleton" && d.kind != "image") {
    bad("dataset.kind must be one of synthetic, timeseries, skeleton, image");
  }
  if (d.layout.k < 1 || d.layout.t < 1) {
    bad("dataset.layout sides must be positive");
  }
  if (d.n_classes < 2) bad("dataset.n_classes must be at least 2");
  if (d.stride < 0) bad("dataset.stride must be non-negative");
  if (d.kind == "synthetic") {
    if (d.windows_per_class < 2) {
      bad("dataset.windows_per_class must be at least 2 so a split exists");
    }
    if (d.noise_sigma < 0.0) bad("dataset.noise_sigma must be non-negative");
  }
  if (d.kind == "skeleton" && d.layout.k != 9) {
    bad("skeleton datasets use the 9-channel layout; dataset.layout.k must "
        "be 9");
  }

  const ModelConfig& m = c.model;
  if (m.hidden < 1) bad("model.hidden must be positive");
  if (m.conv_filters < 1) bad("model.conv_filters must be positive");
  if (m.caps_filters < 1) bad("model.caps_filters must be positive");
  if (m.fc_width < 1) bad("model.fc_width must be positive");
  if (m.routing_iterations < 1) {
    bad("model.routing_iterations must be positive");
  }
  if (m.conv_kernel[0] < 1 || m.conv_kernel[1] < 1 || m.caps_kernel[0] < 1 ||
      m.caps_kernel[1] < 1) {
    bad("kernel sides must be positive");
  }
  std::int64_t conv_h = d.layout.k - m.conv_kernel[0] + 1;
  std::int64_t conv_w = d.layout.t - m.conv_kernel[1] + 1;
  if (conv_h < 1 || conv_w < 1) {
    bad("model.conv_kernel " + std::to_string(m.conv_kernel[0]) + "x" +
        std::to_string(m.conv_kernel[1]) + " does not fit the " +
        std::to_string(d.layout.k) + "x" + std::to_string(d.layout.t) +
        " window");
  }
  std::int64_t caps_h = conv_h - m.caps_kernel[0] + 1;
  std::int64_t caps_w = conv_w - m.caps_kernel[1] + 1;
  if (caps_h < 1 || caps_w < 1) {
    bad("model.caps_kernel " + std::to_string(m.caps_kernel[0]) + "x" +
        std::to_string(m.caps_kernel[1]) + " does not fit the " +
        std::to_string(conv_h) + "x" + std::to_string(conv_w) +
        " feature map");
  }
  if (m.caps_filters * caps_h * caps_w < 2) {
    bad("the capsule stage must produce at least 2 primary capsules");
  }
  if (m.relationship.max_capsules < 2) {
    bad("model.relationship.max_capsules must be at least 2");
  }
  if (m.relationship.lift_eps <= 0.0) {
    bad("model.relationship.lift_eps must be positive");
  }
  if (m.relationship.ridge_lambda < 0.0) {
    bad("model.relationship.ridge_lambda must be non-negative");
  }

  const TrainConfig& t = c.train;
  if (t.epochs < 0) bad("train.epochs must be non-negative");
  if (t.batch_size < 1) bad("train.batch_size must be positive");
  if (!(t.lr > 0.0)) bad("train.lr must be positive");
  if (!(t.beta1 >= 0.0 && t.beta1 < 1.0)) bad("train.beta1 must be in [0,1)");
  if (!(t.beta2 >= 0.0 && t.beta2 < 1.0)) bad("train.beta2 must be in [0,1)");
  if (!(t.eps > 0.0)) bad("train.eps must be positive");
  if (!(t.dropout >= 0.0 && t.dropout < 1.0)) {
    bad("train.dropout must be in [0,1)");
  }
  if (!(t.train_fraction > 0.0 && t.train_fraction < 1.0)) {
    bad("train.train_fraction must lie strictly between 0 and 1");
  }
  validate_margin(t.margin);

  if (c.race.seeds.empty()) bad("race.seeds must be non-empty");
  if (!(c.race.loss_threshold > 0.0)) {
    bad("race.loss_threshold must be positive");
  }
  if (c.race.max_epochs < 1) bad("race.max_epochs must be positive");

  if (c.out_dir.empty()) bad("out_dir must be non-empty");
}

std::string serialize_config(const RunConfig& c) {
  json doc;
  doc["dataset"] = {
      {"kind", c.dataset.kind},
      {"layout", {{"k", c.dataset.layout.k}, {"t", c.dataset.layout.t}}},
      {"n_classes", c.dataset.n_classes},
      {"stride", c.dataset.stride},
      {"drop_first_column", c.dataset.drop_first_column},
      {"windows_per_class", c.dataset.windows_per_class},
      {"noise_sigma", c.dataset.noise_sigma},
  };
  doc["model"] = {
      {"hidden", c.model.hidden},
      {"conv_filters", c.model.conv_filters},
      {"conv_kernel", {c.model.conv_kernel[0], c.model.conv_kernel[1]}},
      {"caps_filters", c.model.caps_filters},
      {"caps_kernel", {c.model.caps_kernel[0], c.model.caps_kernel[1]}},
      {"routing_iterations", c.model.routing_iterations},
      {"fc_width", c.model.fc_width},
      {"cell", cell_kind_name(c.model.cell)},
      {"relationship",
       {{"max_capsules", c.model.relationship.max_capsules},
        {"lift_eps", c.model.relationship.lift_eps},
        {"ridge_lambda", c.model.relationship.ridge_lambda}}},
  };
  doc["train"] = {
      {"epochs", c.train.epochs},
      {"batch_size", c.train.batch_size},
      {"lr", c.train.lr},
      {"beta1", c.train.beta1},
      {"beta2", c.train.beta2},
      {"eps", c.train.eps},
      {"dropout", c.train.dropout},
      {"train_fraction", c.train.train_fraction},
      {"margin",
       {{"m_plus", c.train.margin.m_plus},
        {"m_minus", c.train.margin.m_minus},
        {"lambda", c.train.margin.lambda}}},
  };
  doc["race"] = {
      {"seeds", c.race.seeds},
      {"loss_threshold", c.race.loss_threshold},
      {"max_epochs", c.race.max_epochs},
  };
  doc["seeds"] = {{"init", c.seeds.init}, {"shuffle", c.seeds.shuffle}};
  doc["out_dir"] = c.out_dir;
  doc["data_root"] = c.data_root;
  doc["manifest"] = c.manifest;
  return doc.dump(2) + "\n";
}

}  // namespace astcaps
