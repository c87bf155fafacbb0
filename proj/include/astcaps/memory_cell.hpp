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

#include "astcaps/graph.hpp"
#include "astcaps/params.hpp"
#include "astcaps/rng.hpp"

namespace astcaps {

/// Which recurrent cell a model uses. Memory is the gated cell with the
/// extra temporary-state path; Gru is the plain baseline it is raced against.
enum class CellKind { Memory, Gru };

const char* cell_kind_name(CellKind kind);

/// Graph handles for one recurrent cell's parameters. For the Gru kind the
/// ctemp members stay -1 and are never touched.
///
/// Weight matrices are [hidden x (hidden+input)] and multiply the
/// concatenation [O_prev, x]; biases are [hidden]. Weights initialize from
/// uniform(-s, s) with s = 1/sqrt(hidden+input); biases start at zero.
/// Initial values are drawn per parameter name, so a Memory cell and a Gru
/// cell seeded identically share their common weights exactly.
struct RecurrentCell {
  CellKind kind = CellKind::Memory;
  std::int64_t hidden = 0;
  std::int64_t input = 0;
  NodeId W_z = -1, W_r = -1, W = -1;
  NodeId b_z = -1, b_r = -1, b_h = -1;
  NodeId W_ctemp = -1, b_ctemp = -1;
};

/// Registers cell parameters on a graph under `prefix` + ".W_z" etc.
RecurrentCell register_recurrent_cell(Graph& g, const std::string& prefix,
                                      CellKind kind, std::int64_t hidden,
                                      std::int64_t input, ParamStore& store);

/// Parameter names (in registration order) for a cell of the given kind,
/// used by model assembly and checkpoint validation.
std::vector<std::string> recurrent_cell_param_names(const std::string& prefix,
                                                    CellKind kind);

/// One step's intermediate graph nodes, exposed for gate-range inspection.
struct CellStep {
  NodeId z = -1;        // update gate, sigmoid range
  NodeId r = -1;        // reset gate, sigmoid range
  NodeId h_tilde = -1;  // candidate state, tanh range
  NodeId ctemp = -1;    // temporary state (Memory kind only), tanh range
  NodeId c = -1;        // blended state (1-z)*h_tilde + z*O_prev
  NodeId o = -1;        // emitted activation
};

/// One recurrence step.
///
/// Shared gates:  z = sigmoid(W_z [O_prev,x] + b_z)
///                r = sigmoid(W_r [O_prev,x] + b_r)
///                h~ = tanh(W [r*O_prev, x] + b_h)
///                c = (1-z)*h~ + z*O_prev
/// Memory kind:   ctemp = tanh(W_ctemp [O_prev,x] + b_ctemp)
///                O = c * sigmoid(ctemp)
/// Gru kind:      O = c
CellStep recurrent_step(Graph& g, const RecurrentCell& cell, NodeId o_prev,
                        NodeId x);

/// Unrolls the cell over the columns of a [input x T] sequence node starting
/// from a zero state. `between_step_masks` is either empty or T-1 node ids of
/// [hidden] masks multiplied into O_t after every step except the last
/// (inverted dropout: entries are 0 or 1/(1-rate)).
struct Unroll {
  std::vector<CellStep> steps;
  NodeId final_state = -1;
};
Unroll unroll_recurrent(Graph& g, const RecurrentCell& cell, NodeId seq,
                        const std::vector<NodeId>& between_step_masks);

/// Draws one inverted-dropout mask: each entry is 0 with probability `rate`,
/// else 1/(1-rate). rate must lie in [0, 1).
Tensor dropout_mask(std::int64_t size, double rate, Rng& rng);

}  // namespace astcaps
