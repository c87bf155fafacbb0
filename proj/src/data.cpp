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

#include "astcaps/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "astcaps/errors.hpp"

namespace astcaps {
namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::string trimmed(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double parse_cell(const std::string& tok, const std::string& path,
                  std::size_t line_no, std::size_t col_no) {
  double v = 0.0;
  const char* first = tok.data();
  const char* last = tok.data() + tok.size();
  auto res = std::from_chars(first, last, v);
  if (res.ec != std::errc{} || res.ptr != last) {
    throw DataError(path + ": non-numeric cell \"" + tok + "\" at row " +
                    std::to_string(line_no) + " column " +
                    std::to_string(col_no));
  }
  return v;
}

// Rows of numbers. Commas are hard separators (an empty field between them
// is a missing value and rejected); runs of whitespace are soft separators.
// Blank lines are skipped. Row/column positions in errors are 1-based and
// refer to the physical line and the field index within it.
std::vector<std::vector<double>> parse_numeric_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trimmed(line).empty()) continue;
    std::vector<double> row;
    std::size_t col_no = 0;
    std::size_t start = 0;
    bool saw_comma_field = false;
    while (start <= line.size()) {
      std::size_t comma = line.find(',', start);
      std::string field = line.substr(
          start, comma == std::string::npos ? std::string::npos
                                            : comma - start);
      bool is_comma_field = comma != std::string::npos || saw_comma_field;
      std::string body = trimmed(field);
      if (body.empty()) {
        if (is_comma_field) {
          throw DataError(path + ": missing value at row " +
                          std::to_string(line_no) + " column " +
                          std::to_string(col_no + 1));
        }
      } else {
        std::istringstream toks(body);
        std::string tok;
        while (toks >> tok) {
          ++col_no;
          row.push_back(parse_cell(tok, path, line_no, col_no));
        }
      }
      if (comma == std::string::npos) break;
      saw_comma_field = true;
      start = comma + 1;
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw DataError(path + ": row " + std::to_string(line_no) + " has " +
                      std::to_string(row.size()) + " columns, expected " +
                      std::to_string(rows.front().size()));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

Tensor window_from_grid(const std::vector<std::vector<double>>& rows,
                        std::size_t first_row, const WindowLayout& layout,
                        std::size_t col_offset, bool normalize) {
  Tensor w = Tensor::zeros({layout.k, layout.t});
  for (std::int64_t t = 0; t < layout.t; ++t) {
    const std::vector<double>& r = rows[first_row + static_cast<std::size_t>(t)];
    for (std::int64_t k = 0; k < layout.k; ++k) {
      w.at(k, t) = r[col_offset + static_cast<std::size_t>(k)];
    }
  }
  Tensor flat = w.reshaped({layout.numel()});
  return normalize ? l2_normalized(flat) : flat;
}

}  // namespace

std::vector<ManifestEntry> load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path);
  std::string line;
  if (!std::getline(in, line) || trimmed(line) != "path,class_name") {
    throw DataError("manifest " + path +
                    ": first line must be the header \"path,class_name\"");
  }
  std::vector<ManifestEntry> entries;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    std::string body = trimmed(line);
    if (body.empty()) continue;
    std::size_t comma = body.find(',');
    if (comma == std::string::npos) {
      throw DataError("manifest " + path + ": line " +
                      std::to_string(line_no) + " has no comma");
    }
    ManifestEntry e;
    e.path = trimmed(body.substr(0, comma));
    e.class_name = trimmed(body.substr(comma + 1));
    if (e.path.empty() || e.class_name.empty()) {
      throw DataError("manifest " + path + ": line " +
                      std::to_string(line_no) + " has an empty field");
    }
    entries.push_back(std::move(e));
  }
  std::sort(entries.begin(), entries.end(),
            [](const ManifestEntry& a, const ManifestEntry& b) {
              return a.path < b.path;
            });
  return entries;
}

std::vector<std::string> class_names_of(const std::vector<ManifestEntry>& m) {
  std::set<std::string> names;
  for (const ManifestEntry& e : m) names.insert(e.class_name);
  return std::vector<std::string>(names.begin(), names.end());
}

std::vector<SampleWindow> load_timeseries(const std::string& path,
                                          const WindowLayout& layout,
                                          std::int64_t stride,
                                          bool drop_first_column,
                                          std::int64_t label) {
  if (stride <= 0) stride = layout.t;
  std::vector<std::vector<double>> rows = parse_numeric_table(path);
  std::size_t offset = drop_first_column ? 1 : 0;
  std::size_t want = static_cast<std::size_t>(layout.k) + offset;
  if (!rows.empty() && rows.front().size() != want) {
    throw DataError(path + ": rows have " +
                    std::to_string(rows.front().size()) +
                    " columns but the layout needs " + std::to_string(want));
  }
  std::vector<SampleWindow> out;
  if (rows.size() < static_cast<std::size_t>(layout.t)) {
    std::fprintf(stderr,
                 "warning: %s: %zu rows, shorter than the %lld-step window; "
                 "skipped\n",
                 path.c_str(), rows.size(),
                 static_cast<long long>(layout.t));
    return out;
  }
  for (std::size_t start = 0;
       start + static_cast<std::size_t>(layout.t) <= rows.size();
       start += static_cast<std::size_t>(stride)) {
    SampleWindow s;
    s.features = window_from_grid(rows, start, layout, offset, true);
    s.label = label;
    s.subject = path;
    s.modality = "timeseries";
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<SampleWindow> load_skeleton(const std::string& path,
                                        const WindowLayout& layout,
                                        std::int64_t label) {
  constexpr std::size_t kJoints = 21;
  constexpr std::size_t kAxes = 3;
  constexpr std::size_t kCols = kJoints * kAxes;
  constexpr std::int64_t kGroups = 3;
  constexpr std::size_t kGroupSize = kJoints / kGroups;
  if (layout.k != kGroups * static_cast<std::int64_t>(kAxes)) {
    throw ConfigError("skeleton datasets require a 9-channel layout, got " +
                      std::to_string(layout.k));
  }
  std::vector<std::vector<double>> rows = parse_numeric_table(path);
  if (!rows.empty() && rows.front().size() != kCols) {
    throw DataError(path + ": skeleton rows must have 63 columns, got " +
                    std::to_string(rows.front().size()));
  }
  // Frame value (group, axis) = mean of coordinate `axis` over the group's
  // seven joints; channel index = 3*group + axis.
  std::vector<std::vector<double>> reduced;
  reduced.reserve(rows.size());
  for (const std::vector<double>& frame : rows) {
    std::vector<double> r(static_cast<std::size_t>(layout.k), 0.0);
    for (std::int64_t g = 0; g < kGroups; ++g) {
      for (std::size_t a = 0; a < kAxes; ++a) {
        double sum = 0.0;
        for (std::size_t j = 0; j < kGroupSize; ++j) {
          std::size_t joint = static_cast<std::size_t>(g) * kGroupSize + j;
          sum += frame[joint * kAxes + a];
        }
        r[static_cast<std::size_t>(g) * kAxes + a] =
            sum / static_cast<double>(kGroupSize);
      }
    }
    reduced.push_back(std::move(r));
  }
  std::vector<SampleWindow> out;
  if (reduced.size() < static_cast<std::size_t>(layout.t)) {
    std::fprintf(stderr,
                 "warning: %s: %zu frames, shorter than the %lld-step "
                 "window; skipped\n",
                 path.c_str(), reduced.size(),
                 static_cast<long long>(layout.t));
    return out;
  }
  for (std::size_t start = 0;
       start + static_cast<std::size_t>(layout.t) <= reduced.size();
       start += static_cast<std::size_t>(layout.t)) {
    SampleWindow s;
    s.features = window_from_grid(reduced, start, layout, 0, true);
    s.label = label;
    s.subject = path;
    s.modality = "skeleton";
    out.push_back(std::move(s));
  }
  return out;
}

namespace {

struct GrayImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;  // row-major, already scaled to [0, 1]
};

GrayImage parse_pgm(const std::string& path, const std::string& bytes) {
  std::size_t pos = 2;  // past the magic
  auto next_token = [&]() -> std::string {
    while (pos < bytes.size()) {
      char c = bytes[pos];
      if (c == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
        ++pos;
      } else {
        break;
      }
    }
    std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(
               static_cast<unsigned char>(bytes[pos]))) {
      ++pos;
    }
    if (start == pos) throw DataError(path + ": truncated PGM header");
    return bytes.substr(start, pos - start);
  };
  auto header_int = [&](const char* what, long long min_value) -> long long {
    std::string tok = next_token();
    long long v = 0;
    auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (res.ec != std::errc{} || res.ptr != tok.data() + tok.size() ||
        v < min_value) {
      throw DataError(path + ": bad PGM " + what + " \"" + tok + "\"");
    }
    return v;
  };

  bool ascii = bytes[1] == '2';
  GrayImage img;
  img.width = static_cast<std::size_t>(header_int("width", 1));
  img.height = static_cast<std::size_t>(header_int("height", 1));
  long long maxval = header_int("maxval", 1);
  if (maxval > 65535) throw DataError(path + ": PGM maxval out of range");
  std::size_t count = img.width * img.height;
  img.pixels.resize(count);

  if (ascii) {
    for (std::size_t i = 0; i < count; ++i) {
      long long v = header_int("pixel", 0);
      if (v > maxval) {
        throw DataError(path + ": PGM pixel " + std::to_string(v) +
                        " exceeds maxval " + std::to_string(maxval));
      }
      img.pixels[i] = static_cast<double>(v) / static_cast<double>(maxval);
    }
  } else {
    ++pos;  // single whitespace byte after maxval
    std::size_t bytes_per = maxval > 255 ? 2 : 1;
    if (pos + count * bytes_per > bytes.size()) {
      throw DataError(path + ": truncated PGM raster");
    }
    for (std::size_t i = 0; i < count; ++i) {
      unsigned long v;
      if (bytes_per == 1) {
        v = static_cast<unsigned char>(bytes[pos + i]);
      } else {
        v = (static_cast<unsigned long>(
                 static_cast<unsigned char>(bytes[pos + 2 * i]))
             << 8) |
            static_cast<unsigned char>(bytes[pos + 2 * i + 1]);
      }
      img.pixels[i] = static_cast<double>(v) / static_cast<double>(maxval);
    }
  }
  return img;
}

GrayImage parse_image_csv(const std::string& path) {
  std::vector<std::vector<double>> rows = parse_numeric_table(path);
  if (rows.empty()) throw DataError(path + ": empty image");
  GrayImage img;
  img.height = rows.size();
  img.width = rows.front().size();
  double maxv = 0.0;
  for (const std::vector<double>& r : rows) {
    for (double v : r) maxv = std::max(maxv, v);
  }
  if (maxv <= 0.0) maxv = 1.0;
  img.pixels.reserve(img.height * img.width);
  for (const std::vector<double>& r : rows) {
    for (double v : r) img.pixels.push_back(v / maxv);
  }
  return img;
}

// Bilinear sample with half-pixel centers: output pixel (dy, dx) maps to
// source coordinate ((dy+0.5)*H/h - 0.5, (dx+0.5)*W/w - 0.5), clamped.
double bilinear_at(const GrayImage& img, double sy, double sx) {
  double H = static_cast<double>(img.height);
  double W = static_cast<double>(img.width);
  sy = std::min(std::max(sy, 0.0), H - 1.0);
  sx = std::min(std::max(sx, 0.0), W - 1.0);
  std::size_t y0 = static_cast<std::size_t>(std::floor(sy));
  std::size_t x0 = static_cast<std::size_t>(std::floor(sx));
  std::size_t y1 = std::min(y0 + 1, img.height - 1);
  std::size_t x1 = std::min(x0 + 1, img.width - 1);
  double fy = sy - static_cast<double>(y0);
  double fx = sx - static_cast<double>(x0);
  double top = img.pixels[y0 * img.width + x0] * (1.0 - fx) +
               img.pixels[y0 * img.width + x1] * fx;
  double bot = img.pixels[y1 * img.width + x0] * (1.0 - fx) +
               img.pixels[y1 * img.width + x1] * fx;
  return top * (1.0 - fy) + bot * fy;
}

}  // namespace

SampleWindow load_image_grid(const std::string& path,
                             const WindowLayout& layout, std::int64_t label) {
  std::string bytes = read_file(path);
  GrayImage img;
  if (bytes.size() >= 2 && bytes[0] == 'P' &&
      (bytes[1] == '2' || bytes[1] == '5')) {
    img = parse_pgm(path, bytes);
  } else if (bytes.size() >= 2 && bytes[0] == 'P' &&
             std::isdigit(static_cast<unsigned char>(bytes[1]))) {
    throw DataError(path + ": unsupported image format magic P" +
                    std::string(1, bytes[1]) + " (plain or raw PGM only)");
  } else {
    img = parse_image_csv(path);
  }
  SampleWindow s;
  s.features = Tensor::zeros({layout.numel()});
  for (std::int64_t dy = 0; dy < layout.k; ++dy) {
    double sy = (static_cast<double>(dy) + 0.5) *
                    static_cast<double>(img.height) /
                    static_cast<double>(layout.k) -
                0.5;
    for (std::int64_t dx = 0; dx < layout.t; ++dx) {
      double sx = (static_cast<double>(dx) + 0.5) *
                      static_cast<double>(img.width) /
                      static_cast<double>(layout.t) -
                  0.5;
      s.features[static_cast<std::size_t>(dy * layout.t + dx)] =
          bilinear_at(img, sy, sx);
    }
  }
  s.label = label;
  s.subject = path;
  s.modality = "image";
  return s;
}

LoadedDataset load_dataset(const std::string& manifest_path,
                           const std::string& data_root,
                           const DatasetOptions& options) {
  std::vector<ManifestEntry> manifest = load_manifest(manifest_path);
  if (manifest.empty()) throw DataError("manifest " + manifest_path +
                                        " lists no files");
  LoadedDataset ds;
  ds.class_names = class_names_of(manifest);
  std::map<std::string, std::int64_t> label_of;
  for (std::size_t i = 0; i < ds.class_names.size(); ++i) {
    label_of[ds.class_names[i]] = static_cast<std::int64_t>(i);
  }
  for (const ManifestEntry& e : manifest) {
    std::filesystem::path p(e.path);
    if (p.is_relative() && !data_root.empty()) {
      p = std::filesystem::path(data_root) / p;
    }
    std::int64_t label = label_of[e.class_name];
    std::vector<SampleWindow> windows;
    if (options.kind == "timeseries") {
      windows = load_timeseries(p.string(), options.layout, options.stride,
                                options.drop_first_column, label);
    } else if (options.kind == "skeleton") {
      windows = load_skeleton(p.string(), options.layout, label);
    } else if (options.kind == "image") {
      windows.push_back(load_image_grid(p.string(), options.layout, label));
    } else {
      throw ConfigError("unknown dataset kind \"" + options.kind + "\"");
    }
    for (SampleWindow& w : windows) ds.windows.push_back(std::move(w));
  }
  if (ds.windows.empty()) {
    throw DataError("no usable windows found via manifest " + manifest_path);
  }
  return ds;
}

Split stratified_split(const std::vector<SampleWindow>& windows,
                       double train_fraction, Rng& rng) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ConfigError("train fraction must lie strictly between 0 and 1");
  }
  std::map<std::int64_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    by_class[windows[i].label].push_back(i);
  }
  Split split;
  for (auto& [label, idx] : by_class) {
    if (idx.size() < 2) {
      throw DataError("class " + std::to_string(label) + " has " +
                      std::to_string(idx.size()) +
                      " windows; need at least 2 to split");
    }
    rng.shuffle(idx);
    auto n = static_cast<std::int64_t>(idx.size());
    std::int64_t n_train = std::llround(train_fraction *
                                        static_cast<double>(n));
    n_train = std::min(std::max(n_train, std::int64_t{1}), n - 1);
    for (std::int64_t i = 0; i < n; ++i) {
      (i < n_train ? split.train : split.test).push_back(windows[idx[i]]);
    }
  }
  return split;
}

std::vector<SampleWindow> synth_generate(std::int64_t n_classes,
                                         std::int64_t windows_per_class,
                                         const WindowLayout& layout,
                                         double noise_sigma, Rng& rng) {
  if (n_classes < 2) throw ConfigError("synthetic data needs >= 2 classes");
  if (windows_per_class < 1) {
    throw ConfigError("windows_per_class must be positive");
  }
  constexpr double kTwoPi = 2.0 * 3.14159265358979323846;
  constexpr double kGolden = 0.6180339887498949;
  std::vector<SampleWindow> out;
  out.reserve(static_cast<std::size_t>(n_classes * windows_per_class));
  for (std::int64_t c = 0; c < n_classes; ++c) {
    for (std::int64_t w = 0; w < windows_per_class; ++w) {
      double spin = static_cast<double>(w) * kGolden;
      double phase = 0.25 * std::sin(kTwoPi * (spin - std::floor(spin)));
      Tensor grid = Tensor::zeros({layout.k, layout.t});
      for (std::int64_t k = 0; k < layout.k; ++k) {
        for (std::int64_t t = 0; t < layout.t; ++t) {
          double arg = kTwoPi * (static_cast<double>((1 + c) * t) /
                                     static_cast<double>(layout.t) +
                                 static_cast<double>(k) /
                                     static_cast<double>(layout.k)) +
                       phase;
          grid.at(k, t) = std::sin(arg) + noise_sigma * rng.normal();
        }
      }
      SampleWindow s;
      s.features = l2_normalized(grid.reshaped({layout.numel()}));
      s.label = c;
      s.subject = "synthetic";
      s.modality = "timeseries";
      out.push_back(std::move(s));
    }
  }
  return out;
}

std::string write_dataset(const std::vector<SampleWindow>& windows,
                          const WindowLayout& layout,
                          const std::vector<std::string>& class_names,
                          const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::string manifest_path = (fs::path(dir) / "manifest.csv").string();
  std::ofstream manifest(manifest_path);
  if (!manifest) throw DataError("cannot write " + manifest_path);
  manifest << "path,class_name\n";
  int digits = 1;
  for (std::size_t n = windows.size(); n >= 10; n /= 10) ++digits;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    const SampleWindow& w = windows[i];
    if (w.label < 0 ||
        w.label >= static_cast<std::int64_t>(class_names.size())) {
      throw DataError("window " + std::to_string(i) +
                      " has label outside the class-name table");
    }
    char name[64];
    std::snprintf(name, sizeof(name), "w%0*zu.txt", digits, i);
    fs::path file = fs::path(dir) / name;
    std::ofstream out(file);
    if (!out) throw DataError("cannot write " + file.string());
    char cell[32];
    for (std::int64_t t = 0; t < layout.t; ++t) {
      for (std::int64_t k = 0; k < layout.k; ++k) {
        std::snprintf(cell, sizeof(cell), "%.17g",
                      w.features[static_cast<std::size_t>(k * layout.t + t)]);
        out << (k ? " " : "") << cell;
      }
      out << "\n";
    }
    manifest << name << ',' << class_names[static_cast<std::size_t>(w.label)]
             << "\n";
  }
  return manifest_path;
}

}  // namespace astcaps
