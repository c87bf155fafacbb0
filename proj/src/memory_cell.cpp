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

#include "astcaps/memory_cell.hpp"

#include <cmath>

#include "astcaps/errors.hpp"

namespace astcaps {

const char* cell_kind_name(CellKind kind) {
  return kind == CellKind::Memory ? "memory" : "gru";
}

RecurrentCell register_recurrent_cell(Graph& g, const std::string& prefix,
                                      CellKind kind, std::int64_t hidden,
                                      std::int64_t input, ParamStore& store) {
  if (hidden <= 0 || input <= 0) {
    throw ShapeError("recurrent cell dimensions must be positive");
  }
  RecurrentCell cell;
  cell.kind = kind;
  cell.hidden = hidden;
  cell.input = input;
  const Shape wshape{hidden, hidden + input};
  const Shape bshape{hidden};
  const double s = 1.0 / std::sqrt(static_cast<double>(hidden + input));
  auto weight = [&](const std::string& name) {
    return g.parameter(name, store.uniform(name, wshape, s));
  };
  auto bias = [&](const std::string& name) {
    return g.parameter(name, store.zeros(name, bshape));
  };
  cell.W_z = weight(prefix + ".W_z");
  cell.W_r = weight(prefix + ".W_r");
  cell.W = weight(prefix + ".W");
  if (kind == CellKind::Memory) cell.W_ctemp = weight(prefix + ".W_ctemp");
  cell.b_z = bias(prefix + ".b_z");
  cell.b_r = bias(prefix + ".b_r");
  cell.b_h = bias(prefix + ".b_h");
  if (kind == CellKind::Memory) cell.b_ctemp = bias(prefix + ".b_ctemp");
  return cell;
}

std::vector<std::string> recurrent_cell_param_names(const std::string& prefix,
                                                    CellKind kind) {
  std::vector<std::string> names{prefix + ".W_z", prefix + ".W_r",
                                 prefix + ".W"};
  if (kind == CellKind::Memory) names.push_back(prefix + ".W_ctemp");
  names.push_back(prefix + ".b_z");
  names.push_back(prefix + ".b_r");
  names.push_back(prefix + ".b_h");
  if (kind == CellKind::Memory) names.push_back(prefix + ".b_ctemp");
  return names;
}

CellStep recurrent_step(Graph& g, const RecurrentCell& cell, NodeId o_prev,
                        NodeId x) {
  if (g.value(o_prev).numel() != cell.hidden ||
      g.value(x).numel() != cell.input) {
    throw ShapeError("recurrent step: state/input sizes do not match cell");
  }
  CellStep step;
  const NodeId hx = g.concat({o_prev, x});
  step.z = g.sigmoid(g.add(g.matmul(cell.W_z, hx), cell.b_z));
  step.r = g.sigmoid(g.add(g.matmul(cell.W_r, hx), cell.b_r));
  const NodeId gated = g.concat({g.mul(step.r, o_prev), x});
  step.h_tilde = g.tanh(g.add(g.matmul(cell.W, gated), cell.b_h));
  const NodeId one_minus_z = g.affine(step.z, -1.0, 1.0);
  step.c = g.add(g.mul(one_minus_z, step.h_tilde), g.mul(step.z, o_prev));
  if (cell.kind == CellKind::Memory) {
    step.ctemp =
        g.tanh(g.add(g.matmul(cell.W_ctemp, hx), cell.b_ctemp));
    step.o = g.mul(step.c, g.sigmoid(step.ctemp));
  } else {
    step.o = step.c;
  }
  return step;
}

Unroll unroll_recurrent(Graph& g, const RecurrentCell& cell, NodeId seq,
                        const std::vector<NodeId>& between_step_masks) {
  const Tensor& sv = g.value(seq);
  if (sv.rank() != 2 || sv.dim(0) != cell.input) {
    throw ShapeError("unroll: sequence must be [input x T], got " +
                     shape_to_string(sv.shape()));
  }
  const std::int64_t t_steps = sv.dim(1);
  if (!between_step_masks.empty() &&
      static_cast<std::int64_t>(between_step_masks.size()) != t_steps - 1) {
    throw ShapeError("unroll: expected " + std::to_string(t_steps - 1) +
                     " between-step masks, got " +
                     std::to_string(between_step_masks.size()));
  }
  Unroll out;
  NodeId state = g.input(Tensor::zeros({cell.hidden}));
  for (std::int64_t t = 0; t < t_steps; ++t) {
    const NodeId x_t = g.col(seq, t);
    CellStep step = recurrent_step(g, cell, state, x_t);
    state = step.o;
    if (!between_step_masks.empty() && t + 1 < t_steps) {
      state = g.mul(state, between_step_masks[static_cast<std::size_t>(t)]);
    }
    out.steps.push_back(step);
  }
  out.final_state = state;
  return out;
}

Tensor dropout_mask(std::int64_t size, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) {
    throw ConfigError("dropout rate must lie in [0, 1), got " +
                      std::to_string(rate));
  }
  Tensor mask = Tensor::zeros({size});
  const double keep = 1.0 / (1.0 - rate);
  for (std::int64_t i = 0; i < size; ++i) {
    mask[i] = rng.uniform01() < rate ? 0.0 : keep;
  }
  return mask;
}

}  // namespace astcaps
