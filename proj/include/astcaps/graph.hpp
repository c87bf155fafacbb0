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
#include <map>
#include <string>
#include <vector>

#include "astcaps/tensor.hpp"

namespace astcaps {

using NodeId = std::int32_t;

enum class Activation { Sigmoid, Tanh };

/// A computation graph over tensors with reverse-mode differentiation.
///
/// Nodes are appended in execution order, which is therefore a topological
/// order: every node's inputs precede it. Values are computed eagerly on
/// construction and every public operation checks its output for NaN/Inf.
/// The graph can be re-executed after a parameter change (refresh()), which
/// is what the finite-difference gradient checker uses. Re-execution keeps
/// routing couplings at their recorded schedule, so the re-evaluated loss is
/// exactly the function backward() differentiates.
///
/// Gradient accumulation in backward() walks nodes in reverse creation order
/// and touches each node exactly once, so results are bit-reproducible.
class Graph {
 public:
  // ---- leaves -------------------------------------------------------------

  /// Constant leaf. No gradient flows into it.
  NodeId input(Tensor t);
  /// Trainable leaf; `name` keys the gradient map and checkpoint blobs.
  NodeId parameter(const std::string& name, Tensor t);

  // ---- operations ---------------------------------------------------------

  /// a[m,k] * b[k,n] -> [m,n], or a[m,k] * b[k] -> [m].
  NodeId matmul(NodeId a, NodeId b);
  /// Valid-padding stride-1 cross-correlation.
  /// input [C,H,W], kernels [F,C,kh,kw], bias [F] -> [F,H-kh+1,W-kw+1].
  NodeId conv2d(NodeId input, NodeId kernels, NodeId bias);
  NodeId sigmoid(NodeId x);
  NodeId tanh(NodeId x);
  NodeId activation(NodeId x, Activation kind);
  /// 1-D softmax with max-subtraction.
  NodeId softmax(NodeId x);
  /// Elementwise; shapes must match exactly.
  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  /// Elementwise scale*x + shift.
  NodeId affine(NodeId x, double scale, double shift);
  /// x / max(||x||, 1e-12); the zero vector maps to itself.
  NodeId l2_normalize(NodeId x);
  /// Concatenation of 1-D vectors.
  NodeId concat(const std::vector<NodeId>& xs);
  NodeId reshape(NodeId x, Shape shape);
  /// Column t of a [K,T] matrix -> [K].
  NodeId col(NodeId x, std::int64_t t);
  /// v[F] -> [F,h,w] where channel f is the constant plane v[f].
  NodeId tile_channels(NodeId v, std::int64_t h, std::int64_t w);
  /// k same-shaped tensors -> [numel, k]; row p collects element p of each.
  NodeId stack_last(const std::vector<NodeId>& xs);
  /// Vector-length squashing, v = s * ||s|| / (1 + ||s||^2).
  /// Accepts [d] or [P,d] (applied per row).
  NodeId squash(NodeId x);
  /// Per-capsule linear predictions.
  /// caps [P,din], weights [P,J,dout,din] -> [P,J,dout].
  NodeId caps_predict(NodeId caps, NodeId weights);
  /// Routing by agreement over prediction vectors [P,J,d] -> [J,d].
  /// Logits start at zero; couplings are a row softmax of the logits; the
  /// final iteration omits the logit update. Gradients flow through the last
  /// weighted sum and squash only; couplings are constants of the schedule.
  /// refresh() reuses the recorded couplings instead of rerunning the
  /// schedule, so finite differences probe the same function as backward().
  NodeId route(NodeId predictions, int iterations);
  /// Sum of all elements -> [1].
  NodeId reduce_sum(NodeId x);
  /// -log(max(p[label], 1e-12)) for a probability vector p[n] -> [1].
  NodeId cross_entropy(NodeId probs, std::int64_t label);
  /// Two-sided hinge on capsule lengths, summed over capsules -> [1].
  NodeId margin_loss(NodeId v, std::int64_t label, double m_plus,
                     double m_minus, double lambda);

  // ---- inspection ---------------------------------------------------------

  const Tensor& value(NodeId id) const;
  /// Final coupling coefficients c [P,J] of a route node.
  const Tensor& route_couplings(NodeId route_node) const;
  /// Final routing logits b [P,J] of a route node.
  const Tensor& route_logits(NodeId route_node) const;
  std::size_t size() const { return nodes_.size(); }
  const std::vector<std::pair<std::string, NodeId>>& parameters() const {
    return params_;
  }

  // ---- differentiation and re-execution -----------------------------------

  /// Reverse-mode gradients of a scalar loss for every registered parameter.
  /// Parameters the loss does not depend on get zero gradients.
  std::map<std::string, Tensor> backward(NodeId loss) const;

  Tensor parameter_value(const std::string& name) const;
  /// Replaces a parameter's value (same shape required). Call refresh()
  /// afterwards to propagate.
  void set_parameter(const std::string& name, const Tensor& value);

  /// What a re-execution does with a routing node's iterative schedule.
  enum class RefreshMode {
    /// Couplings stay at their recorded values; the re-evaluated loss is
    /// exactly the stop-gradient function backward() differentiates.
    kReuseRoutingSchedule,
    /// The schedule reruns from zero logits, as a fresh forward would.
    kRerunRoutingSchedule,
  };
  /// Recomputes every non-leaf node in creation order.
  void refresh(RefreshMode mode = RefreshMode::kReuseRoutingSchedule);

 private:
  enum class Op {
    Input,
    Parameter,
    MatMul,
    Conv2d,
    Sigmoid,
    Tanh,
    Softmax,
    Add,
    Mul,
    Affine,
    L2Normalize,
    Concat,
    Reshape,
    Col,
    TileChannels,
    StackLast,
    Squash,
    CapsPredict,
    Route,
    ReduceSum,
    CrossEntropy,
    MarginLoss,
  };

  struct Node {
    Op op;
    std::vector<NodeId> inputs;
    std::vector<std::int64_t> iattr;
    std::vector<double> dattr;
    Tensor value;
    std::vector<Tensor> aux;  // op-specific forward state kept for backward
    bool requires_grad = false;
  };

  NodeId push(Node n, const char* what);
  void compute(Node& n, RefreshMode mode) const;
  void backward_node(const Node& n, const Tensor& grad,
                     std::vector<Tensor>& grads,
                     std::vector<char>& has_grad) const;
  Tensor& grad_slot(NodeId id, std::vector<Tensor>& grads,
                    std::vector<char>& has_grad) const;
  const Node& node_checked(NodeId id) const;

  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, NodeId>> params_;
  std::map<std::string, NodeId> param_index_;
};

/// Max over coordinates of the relative disagreement between the analytic
/// gradient of `param` and a central finite difference with step `h`.
/// Relative error uses denominator max(|analytic|, |numeric|, 1e-8).
/// The graph is restored to its original state before returning.
/// With kRerunRoutingSchedule the finite differences probe the full forward
/// including coupling recomputation, exposing the (small) bias of the
/// stop-gradient routing treatment.
double grad_check(
    Graph& g, NodeId loss, const std::string& param, double h,
    Graph::RefreshMode mode = Graph::RefreshMode::kReuseRoutingSchedule);

/// L2 scaling of a plain tensor (same rule as the graph op).
Tensor l2_normalized(const Tensor& t);

namespace detail {
/// Test hook for the gradient-check harness: flips the sign of the squash
/// backward rule so the harness's ability to detect a broken rule can be
/// exercised end to end.
extern bool flip_squash_backward;
}  // namespace detail

}  // namespace astcaps
