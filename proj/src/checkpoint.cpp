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

#include "astcaps/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "astcaps/errors.hpp"

namespace astcaps {
namespace {

constexpr char kMagic[8] = {'A', 'S', 'T', 'C', 'A', 'P', 'S', 'C'};
constexpr char kEndMark[8] = {'A', 'S', 'T', 'C', 'A', 'P', 'S', 'E'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  explicit Writer(std::string& out) : out_(out) {}

  void bytes(const char* p, std::size_t n) { out_.append(p, n); }
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
      out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }

 private:
  std::string& out_;
};

class Reader {
 public:
  Reader(const std::string& in, const std::string& path)
      : in_(in), path_(path) {}

  void bytes(char* p, std::size_t n) {
    if (pos_ + n > in_.size()) {
      throw DataError(path_ + ": truncated checkpoint");
    }
    std::memcpy(p, in_.data() + pos_, n);
    pos_ += n;
  }
  std::uint8_t u8() {
    char c;
    bytes(&c, 1);
    return static_cast<std::uint8_t>(c);
  }
  std::uint32_t u32() {
    char b[4];
    bytes(b, 4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) {
      v = (v << 8) | static_cast<std::uint8_t>(b[i]);
    }
    return v;
  }
  std::uint64_t u64() {
    char b[8];
    bytes(b, 8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) {
      v = (v << 8) | static_cast<std::uint8_t>(b[i]);
    }
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    std::uint32_t n = u32();
    if (pos_ + n > in_.size()) {
      throw DataError(path_ + ": truncated checkpoint");
    }
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool exhausted() const { return pos_ == in_.size(); }

 private:
  const std::string& in_;
  const std::string& path_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint) {
  std::string blob;
  Writer w(blob);
  w.bytes(kMagic, sizeof(kMagic));
  w.u32(kVersion);
  w.str(checkpoint.config_json);
  w.u32(static_cast<std::uint32_t>(checkpoint.params.size()));
  for (const auto& [name, value] : checkpoint.params) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(value.shape().size()));
    for (std::int64_t d : value.shape()) {
      w.u64(static_cast<std::uint64_t>(d));
    }
    for (std::int64_t i = 0; i < value.numel(); ++i) w.f64(value[i]);
  }
  w.u8(checkpoint.has_bayes ? 1 : 0);
  if (checkpoint.has_bayes) {
    w.u64(static_cast<std::uint64_t>(checkpoint.bayes_classes));
    for (double v : checkpoint.bayes_prior) w.f64(v);
    for (double v : checkpoint.bayes_conditional) w.f64(v);
  }
  w.bytes(kEndMark, sizeof(kEndMark));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint " + path);
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw DataError("failed writing checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  std::string blob((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  Reader r(blob, path);

  char magic[8];
  r.bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw DataError(path + ": not a checkpoint (bad magic)");
  }
  std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw DataError(path + ": checkpoint format version " +
                    std::to_string(version) + " unsupported (expected " +
                    std::to_string(kVersion) + ")");
  }
  Checkpoint c;
  c.config_json = r.str();
  std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    std::uint32_t rank = r.u32();
    if (rank > 8) throw DataError(path + ": implausible tensor rank");
    Shape shape;
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      std::uint64_t side = r.u64();
      if (side == 0 || side > (1u << 30)) {
        throw DataError(path + ": implausible tensor dimension");
      }
      shape.push_back(static_cast<std::int64_t>(side));
      numel *= side;
    }
    Tensor t = Tensor::zeros(shape);
    for (std::size_t k = 0; k < numel; ++k) t[static_cast<std::int64_t>(k)] = r.f64();
    if (c.params.count(name)) {
      throw DataError(path + ": duplicate parameter \"" + name + "\"");
    }
    c.params[name] = std::move(t);
  }
  c.has_bayes = r.u8() != 0;
  if (c.has_bayes) {
    c.bayes_classes = static_cast<std::int64_t>(r.u64());
    if (c.bayes_classes < 2 || c.bayes_classes > (1 << 20)) {
      throw DataError(path + ": implausible fusion class count");
    }
    std::size_t n = static_cast<std::size_t>(c.bayes_classes);
    c.bayes_prior.resize(n);
    for (double& v : c.bayes_prior) v = r.f64();
    c.bayes_conditional.resize(static_cast<std::size_t>(kHeadCount) * n * n);
    for (double& v : c.bayes_conditional) v = r.f64();
  }
  char tail[8];
  r.bytes(tail, sizeof(tail));
  if (std::memcmp(tail, kEndMark, sizeof(kEndMark)) != 0) {
    throw DataError(path + ": corrupt checkpoint (bad end marker)");
  }
  if (!r.exhausted()) {
    throw DataError(path + ": trailing bytes after checkpoint end");
  }
  return c;
}

Checkpoint checkpoint_of(const Model& model, const RunConfig& config) {
  Checkpoint c;
  c.config_json = serialize_config(config);
  c.params = model.parameters();
  if (model.bayes().fitted()) {
    c.has_bayes = true;
    c.bayes_classes = model.bayes().n_classes();
    c.bayes_prior = model.bayes().prior();
    c.bayes_conditional = model.bayes().conditional();
  }
  return c;
}

Model model_from_checkpoint(const Checkpoint& checkpoint,
                            RunConfig* config_out) {
  RunConfig config;
  try {
    config = parse_config(checkpoint.config_json);
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint carries an unusable config: ") +
                    e.what());
  }
  Model model(config.dataset, config.model, checkpoint.params);
  if (checkpoint.has_bayes) {
    model.bayes() = BayesModel::from_tables(checkpoint.bayes_classes,
                                            checkpoint.bayes_prior,
                                            checkpoint.bayes_conditional);
  }
  if (config_out != nullptr) *config_out = config;
  return model;
}

}  // namespace astcaps
