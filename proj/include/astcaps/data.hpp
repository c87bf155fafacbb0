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

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "astcaps/lowlevel.hpp"
#include "astcaps/rng.hpp"
#include "astcaps/tensor.hpp"

namespace astcaps {

/// One flattened K*T gait window with its class label.
struct SampleWindow {
  Tensor features;      // [K*T], row-major over the K x T grid
  std::int64_t label = 0;
  std::string subject;  // source path (or "synthetic")
  std::string modality; // timeseries | skeleton | image
};

/// Manifest rows: data file path and class name. Header "path,class_name"
/// is required. Entries are returned sorted by path for determinism.
struct ManifestEntry {
  std::string path;
  std::string class_name;
};
std::vector<ManifestEntry> load_manifest(const std::string& path);

/// Sorted unique class names -> indices 0..n-1.
std::vector<std::string> class_names_of(const std::vector<ManifestEntry>& m);

/// Sliding windows over a delimited numeric text file with one time step per
/// row and layout.k signal columns (after the optional timestamp column is
/// dropped). A window spans layout.t consecutive rows; window column t is
/// row t0+t, so the flattened grid is channel-major. Each window is
/// l2-normalized. Files with fewer than layout.t rows yield no windows and a
/// warning on stderr.
std::vector<SampleWindow> load_timeseries(const std::string& path,
                                          const WindowLayout& layout,
                                          std::int64_t stride,
                                          bool drop_first_column,
                                          std::int64_t label);

/// Skeleton CSV with 63 numeric columns per frame (21 joints, x,y,z each).
/// Frames group into non-overlapping windows of layout.t consecutive frames;
/// each frame reduces to layout.k values. For the 9-row layout a frame's
/// value (group, axis) is the mean of coordinate `axis` over joint group
/// `group` (three contiguous groups of 7 joints), row index = 3*group+axis.
/// Windows are l2-normalized.
std::vector<SampleWindow> load_skeleton(const std::string& path,
                                        const WindowLayout& layout,
                                        std::int64_t label);

/// Grayscale image from plain PGM (P2/P5) or a numeric CSV grid, bilinearly
/// resized to layout (half-pixel-center convention) and scaled to [0,1] by
/// the format maximum (PGM maxval; for CSV the largest value in the file).
/// Not l2-normalized: the model input stage scales it.
SampleWindow load_image_grid(const std::string& path,
                             const WindowLayout& layout, std::int64_t label);

/// Manifest-driven loading for one of the three file modalities.
struct DatasetOptions {
  std::string kind;  // timeseries | skeleton | image
  WindowLayout layout;
  std::int64_t stride = 0;  // timeseries; 0 means layout.t
  bool drop_first_column = false;
};
struct LoadedDataset {
  std::vector<SampleWindow> windows;  // sorted by (path, window index)
  std::vector<std::string> class_names;
};
LoadedDataset load_dataset(const std::string& manifest_path,
                           const std::string& data_root,
                           const DatasetOptions& options);

/// Stratified split: per class, windows are shuffled (classes visited in
/// ascending label order) and round(fraction*count) go to the training side,
/// clamped to leave at least one window on each side. A class with fewer
/// than two windows is rejected.
struct Split {
  std::vector<SampleWindow> train;
  std::vector<SampleWindow> test;
};
Split stratified_split(const std::vector<SampleWindow>& windows,
                       double train_fraction, Rng& rng);

/// Synthetic gait-like windows. Closed form, so any run regenerates the same
/// data from the seed: for class c, window w, channel k, time t,
///
///   raw[k, t] = sin(2*pi*((1+c)*t/T + k/K) + phase(w)) + sigma*normal()
///   phase(w)  = 0.25 * sin(2*pi * frac(w * 0.6180339887498949))
///
/// with normals drawn row-major per window, windows emitted in (class,
/// window) order, and each window l2-normalized. The per-window phase
/// wobble is small so classes stay centroid-separable at small sigma.
std::vector<SampleWindow> synth_generate(std::int64_t n_classes,
                                         std::int64_t windows_per_class,
                                         const WindowLayout& layout,
                                         double noise_sigma, Rng& rng);

/// Writes windows as one delimited text file each (layout.t rows of layout.k
/// columns) plus manifest.csv, into `dir`. Returns the manifest path.
std::string write_dataset(const std::vector<SampleWindow>& windows,
                          const WindowLayout& layout,
                          const std::vector<std::string>& class_names,
                          const std::string& dir);

}  // namespace astcaps
