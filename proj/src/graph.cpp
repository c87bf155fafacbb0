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

#include "astcaps/graph.hpp"

#include <algorithm>
#include <cmath>

#include "astcaps/errors.hpp"

namespace astcaps {

namespace detail {
bool flip_squash_backward = false;
}  // namespace detail

namespace {

constexpr double kNormalizeEps = 1e-12;
constexpr double kLogClamp = 1e-12;

void check_rank(const Tensor& t, std::int64_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " +
                     std::to_string(rank) + " operand, got shape " +
                     shape_to_string(t.shape()));
  }
}

// v = s * ||s|| / (1 + ||s||^2) for one row; the zero row maps to itself.
void squash_row(const double* s, double* v, std::int64_t d) {
  double nsq = 0.0;
  for (std::int64_t i = 0; i < d; ++i) nsq += s[i] * s[i];
  const double n = std::sqrt(nsq);
  const double f = n / (1.0 + nsq);
  for (std::int64_t i = 0; i < d; ++i) v[i] = s[i] * f;
}

// Accumulates the squash vector-Jacobian product for one row into gs.
void squash_backward_row(const double* s, const double* g, double* gs,
                         std::int64_t d) {
  double nsq = 0.0;
  double dot = 0.0;
  for (std::int64_t i = 0; i < d; ++i) {
    nsq += s[i] * s[i];
    dot += g[i] * s[i];
  }
  const double n = std::sqrt(nsq);
  if (n == 0.0) return;
  const double f = n / (1.0 + nsq);
  const double fp = (1.0 - nsq) / ((1.0 + nsq) * (1.0 + nsq));
  const double sign = detail::flip_squash_backward ? -1.0 : 1.0;
  for (std::int64_t i = 0; i < d; ++i) {
    gs[i] += sign * (f * g[i] + (fp / n) * dot * s[i]);
  }
}

// Row softmax of logits [P,J] into couplings [P,J], max-subtracted.
void row_softmax(const Tensor& logits, Tensor& couplings) {
  const std::int64_t p_count = logits.dim(0);
  const std::int64_t j_count = logits.dim(1);
  for (std::int64_t i = 0; i < p_count; ++i) {
    double m = logits.at(i, 0);
    for (std::int64_t j = 1; j < j_count; ++j) m = std::max(m, logits.at(i, j));
    double total = 0.0;
    for (std::int64_t j = 0; j < j_count; ++j) {
      const double e = std::exp(logits.at(i, j) - m);
      couplings.at(i, j) = e;
      total += e;
    }
    for (std::int64_t j = 0; j < j_count; ++j) couplings.at(i, j) /= total;
  }
}

}  // namespace

// ---- construction -----------------------------------------------------------

NodeId Graph::push(Node n, const char* what) {
  for (NodeId in : n.inputs) {
    const Node& src = node_checked(in);
    n.requires_grad = n.requires_grad || src.requires_grad;
  }
  if (n.op != Op::Input && n.op != Op::Parameter) {
    compute(n, RefreshMode::kRerunRoutingSchedule);
  }
  require_finite(n.value, what);
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

const Graph::Node& Graph::node_checked(NodeId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
    throw ShapeError("node id " + std::to_string(id) + " out of range");
  }
  return nodes_[static_cast<std::size_t>(id)];
}

NodeId Graph::input(Tensor t) {
  Node n;
  n.op = Op::Input;
  n.value = std::move(t);
  return push(std::move(n), "input");
}

NodeId Graph::parameter(const std::string& name, Tensor t) {
  if (param_index_.count(name)) {
    throw ShapeError("duplicate parameter name: " + name);
  }
  Node n;
  n.op = Op::Parameter;
  n.value = std::move(t);
  n.requires_grad = true;
  NodeId id = push(std::move(n), "parameter");
  params_.emplace_back(name, id);
  param_index_[name] = id;
  return id;
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  const Tensor& ta = node_checked(a).value;
  const Tensor& tb = node_checked(b).value;
  check_rank(ta, 2, "matmul");
  if (tb.rank() != 2 && tb.rank() != 1) {
    throw ShapeError("matmul: right operand must have rank 1 or 2, got " +
                     shape_to_string(tb.shape()));
  }
  if (ta.dim(1) != tb.dim(0)) {
    throw ShapeError("matmul: inner dimensions disagree, " +
                     shape_to_string(ta.shape()) + " vs " +
                     shape_to_string(tb.shape()));
  }
  Node n;
  n.op = Op::MatMul;
  n.inputs = {a, b};
  return push(std::move(n), "matmul");
}

NodeId Graph::conv2d(NodeId input, NodeId kernels, NodeId bias) {
  const Tensor& ti = node_checked(input).value;
  const Tensor& tk = node_checked(kernels).value;
  const Tensor& tb = node_checked(bias).value;
  check_rank(ti, 3, "conv2d input");
  check_rank(tk, 4, "conv2d kernels");
  check_rank(tb, 1, "conv2d bias");
  if (tk.dim(1) != ti.dim(0)) {
    throw ShapeError("conv2d: kernel channels " + std::to_string(tk.dim(1)) +
                     " do not match input channels " +
                     std::to_string(ti.dim(0)));
  }
  if (tb.dim(0) != tk.dim(0)) {
    throw ShapeError("conv2d: bias length " + std::to_string(tb.dim(0)) +
                     " does not match filter count " +
                     std::to_string(tk.dim(0)));
  }
  if (tk.dim(2) > ti.dim(1) || tk.dim(3) > ti.dim(2)) {
    throw ShapeError("conv2d: kernel " + shape_to_string(tk.shape()) +
                     " larger than input " + shape_to_string(ti.shape()));
  }
  Node n;
  n.op = Op::Conv2d;
  n.inputs = {input, kernels, bias};
  return push(std::move(n), "conv2d");
}

NodeId Graph::sigmoid(NodeId x) {
  Node n;
  n.op = Op::Sigmoid;
  n.inputs = {x};
  node_checked(x);
  return push(std::move(n), "sigmoid");
}

NodeId Graph::tanh(NodeId x) {
  Node n;
  n.op = Op::Tanh;
  n.inputs = {x};
  node_checked(x);
  return push(std::move(n), "tanh");
}

NodeId Graph::activation(NodeId x, Activation kind) {
  return kind == Activation::Sigmoid ? sigmoid(x) : tanh(x);
}

NodeId Graph::softmax(NodeId x) {
  check_rank(node_checked(x).value, 1, "softmax");
  Node n;
  n.op = Op::Softmax;
  n.inputs = {x};
  return push(std::move(n), "softmax");
}

NodeId Graph::add(NodeId a, NodeId b) {
  if (!node_checked(a).value.same_shape(node_checked(b).value)) {
    throw ShapeError("add: shape mismatch, " +
                     shape_to_string(node_checked(a).value.shape()) + " vs " +
                     shape_to_string(node_checked(b).value.shape()));
  }
  Node n;
  n.op = Op::Add;
  n.inputs = {a, b};
  return push(std::move(n), "add");
}

NodeId Graph::mul(NodeId a, NodeId b) {
  if (!node_checked(a).value.same_shape(node_checked(b).value)) {
    throw ShapeError("mul: shape mismatch, " +
                     shape_to_string(node_checked(a).value.shape()) + " vs " +
                     shape_to_string(node_checked(b).value.shape()));
  }
  Node n;
  n.op = Op::Mul;
  n.inputs = {a, b};
  return push(std::move(n), "mul");
}

NodeId Graph::affine(NodeId x, double scale, double shift) {
  node_checked(x);
  Node n;
  n.op = Op::Affine;
  n.inputs = {x};
  n.dattr = {scale, shift};
  return push(std::move(n), "affine");
}

NodeId Graph::l2_normalize(NodeId x) {
  node_checked(x);
  Node n;
  n.op = Op::L2Normalize;
  n.inputs = {x};
  return push(std::move(n), "l2_normalize");
}

NodeId Graph::concat(const std::vector<NodeId>& xs) {
  if (xs.empty()) throw ShapeError("concat: no operands");
  for (NodeId x : xs) check_rank(node_checked(x).value, 1, "concat");
  Node n;
  n.op = Op::Concat;
  n.inputs = xs;
  return push(std::move(n), "concat");
}

NodeId Graph::reshape(NodeId x, Shape shape) {
  const Tensor& t = node_checked(x).value;
  if (shape_numel(shape) != t.numel()) {
    throw ShapeError("reshape: cannot view " + shape_to_string(t.shape()) +
                     " as " + shape_to_string(shape));
  }
  Node n;
  n.op = Op::Reshape;
  n.inputs = {x};
  n.iattr.assign(shape.begin(), shape.end());
  return push(std::move(n), "reshape");
}

NodeId Graph::col(NodeId x, std::int64_t t) {
  const Tensor& tx = node_checked(x).value;
  check_rank(tx, 2, "col");
  if (t < 0 || t >= tx.dim(1)) {
    throw ShapeError("col: column " + std::to_string(t) +
                     " out of range for shape " + shape_to_string(tx.shape()));
  }
  Node n;
  n.op = Op::Col;
  n.inputs = {x};
  n.iattr = {t};
  return push(std::move(n), "col");
}

NodeId Graph::tile_channels(NodeId v, std::int64_t h, std::int64_t w) {
  check_rank(node_checked(v).value, 1, "tile_channels");
  if (h <= 0 || w <= 0) {
    throw ShapeError("tile_channels: plane dimensions must be positive");
  }
  Node n;
  n.op = Op::TileChannels;
  n.inputs = {v};
  n.iattr = {h, w};
  return push(std::move(n), "tile_channels");
}

NodeId Graph::stack_last(const std::vector<NodeId>& xs) {
  if (xs.empty()) throw ShapeError("stack_last: no operands");
  const Tensor& first = node_checked(xs[0]).value;
  for (NodeId x : xs) {
    if (!node_checked(x).value.same_shape(first)) {
      throw ShapeError("stack_last: operand shapes differ, " +
                       shape_to_string(first.shape()) + " vs " +
                       shape_to_string(node_checked(x).value.shape()));
    }
  }
  Node n;
  n.op = Op::StackLast;
  n.inputs = xs;
  return push(std::move(n), "stack_last");
}

NodeId Graph::squash(NodeId x) {
  const Tensor& t = node_checked(x).value;
  if (t.rank() != 1 && t.rank() != 2) {
    throw ShapeError("squash: expected rank 1 or 2, got " +
                     shape_to_string(t.shape()));
  }
  Node n;
  n.op = Op::Squash;
  n.inputs = {x};
  return push(std::move(n), "squash");
}

NodeId Graph::caps_predict(NodeId caps, NodeId weights) {
  const Tensor& tc = node_checked(caps).value;
  const Tensor& tw = node_checked(weights).value;
  check_rank(tc, 2, "caps_predict capsules");
  check_rank(tw, 4, "caps_predict weights");
  if (tw.dim(0) != tc.dim(0) || tw.dim(3) != tc.dim(1)) {
    throw ShapeError("caps_predict: weights " + shape_to_string(tw.shape()) +
                     " do not match capsules " + shape_to_string(tc.shape()));
  }
  Node n;
  n.op = Op::CapsPredict;
  n.inputs = {caps, weights};
  return push(std::move(n), "caps_predict");
}

NodeId Graph::route(NodeId predictions, int iterations) {
  check_rank(node_checked(predictions).value, 3, "route");
  if (iterations < 1) {
    throw ShapeError("route: iterations must be at least 1");
  }
  Node n;
  n.op = Op::Route;
  n.inputs = {predictions};
  n.iattr = {iterations};
  return push(std::move(n), "route");
}

NodeId Graph::reduce_sum(NodeId x) {
  node_checked(x);
  Node n;
  n.op = Op::ReduceSum;
  n.inputs = {x};
  return push(std::move(n), "reduce_sum");
}

NodeId Graph::cross_entropy(NodeId probs, std::int64_t label) {
  const Tensor& t = node_checked(probs).value;
  check_rank(t, 1, "cross_entropy");
  if (label < 0 || label >= t.dim(0)) {
    throw ShapeError("cross_entropy: label " + std::to_string(label) +
                     " out of range for " + shape_to_string(t.shape()));
  }
  Node n;
  n.op = Op::CrossEntropy;
  n.inputs = {probs};
  n.iattr = {label};
  return push(std::move(n), "cross_entropy");
}

NodeId Graph::margin_loss(NodeId v, std::int64_t label, double m_plus,
                          double m_minus, double lambda) {
  const Tensor& t = node_checked(v).value;
  check_rank(t, 2, "margin_loss");
  if (label < 0 || label >= t.dim(0)) {
    throw ShapeError("margin_loss: label " + std::to_string(label) +
                     " out of range for " + shape_to_string(t.shape()));
  }
  Node n;
  n.op = Op::MarginLoss;
  n.inputs = {v};
  n.iattr = {label};
  n.dattr = {m_plus, m_minus, lambda};
  return push(std::move(n), "margin_loss");
}

// ---- forward ----------------------------------------------------------------

void Graph::compute(Node& n, RefreshMode mode) const {
  auto in = [&](std::size_t i) -> const Tensor& {
    return nodes_[static_cast<std::size_t>(n.inputs[i])].value;
  };
  switch (n.op) {
    case Op::Input:
    case Op::Parameter:
      break;
    case Op::MatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const std::int64_t m = a.dim(0), k = a.dim(1);
      if (b.rank() == 2) {
        const std::int64_t c = b.dim(1);
        Tensor out = Tensor::zeros({m, c});
        for (std::int64_t i = 0; i < m; ++i) {
          for (std::int64_t l = 0; l < k; ++l) {
            const double av = a.at(i, l);
            for (std::int64_t j = 0; j < c; ++j) {
              out.at(i, j) += av * b.at(l, j);
            }
          }
        }
        n.value = std::move(out);
      } else {
        Tensor out = Tensor::zeros({m});
        for (std::int64_t i = 0; i < m; ++i) {
          double acc = 0.0;
          for (std::int64_t l = 0; l < k; ++l) acc += a.at(i, l) * b[l];
          out[i] = acc;
        }
        n.value = std::move(out);
      }
      break;
    }
    case Op::Conv2d: {
      const Tensor& x = in(0);
      const Tensor& k = in(1);
      const Tensor& b = in(2);
      const std::int64_t channels = x.dim(0), height = x.dim(1),
                         width = x.dim(2);
      const std::int64_t filters = k.dim(0), kh = k.dim(2), kw = k.dim(3);
      const std::int64_t oh = height - kh + 1, ow = width - kw + 1;
      Tensor out = Tensor::zeros({filters, oh, ow});
      for (std::int64_t f = 0; f < filters; ++f) {
        for (std::int64_t oy = 0; oy < oh; ++oy) {
          for (std::int64_t ox = 0; ox < ow; ++ox) {
            double acc = b[f];
            for (std::int64_t c = 0; c < channels; ++c) {
              for (std::int64_t p = 0; p < kh; ++p) {
                const double* xrow = x.data().data() +
                                     ((c * height + oy + p) * width + ox);
                const double* krow =
                    k.data().data() + (((f * channels + c) * kh + p) * kw);
                for (std::int64_t q = 0; q < kw; ++q) acc += xrow[q] * krow[q];
              }
            }
            out.at(f, oy, ox) = acc;
          }
        }
      }
      n.value = std::move(out);
      break;
    }
    case Op::Sigmoid: {
      Tensor out = in(0);
      for (auto& v : out.data()) v = 1.0 / (1.0 + std::exp(-v));
      n.value = std::move(out);
      break;
    }
    case Op::Tanh: {
      Tensor out = in(0);
      for (auto& v : out.data()) v = std::tanh(v);
      n.value = std::move(out);
      break;
    }
    case Op::Softmax: {
      const Tensor& x = in(0);
      Tensor out = x;
      double m = x[0];
      for (std::int64_t i = 1; i < x.numel(); ++i) m = std::max(m, x[i]);
      double total = 0.0;
      for (std::int64_t i = 0; i < x.numel(); ++i) {
        out[i] = std::exp(x[i] - m);
        total += out[i];
      }
      for (auto& v : out.data()) v /= total;
      n.value = std::move(out);
      break;
    }
    case Op::Add: {
      Tensor out = in(0);
      const Tensor& b = in(1);
      for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += b[i];
      n.value = std::move(out);
      break;
    }
    case Op::Mul: {
      Tensor out = in(0);
      const Tensor& b = in(1);
      for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= b[i];
      n.value = std::move(out);
      break;
    }
    case Op::Affine: {
      Tensor out = in(0);
      for (auto& v : out.data()) v = n.dattr[0] * v + n.dattr[1];
      n.value = std::move(out);
      break;
    }
    case Op::L2Normalize: {
      Tensor out = in(0);
      const double denom = std::max(out.l2_norm(), kNormalizeEps);
      for (auto& v : out.data()) v /= denom;
      n.value = std::move(out);
      break;
    }
    case Op::Concat: {
      std::int64_t total = 0;
      for (NodeId id : n.inputs) {
        total += nodes_[static_cast<std::size_t>(id)].value.numel();
      }
      Tensor out = Tensor::zeros({total});
      std::int64_t off = 0;
      for (NodeId id : n.inputs) {
        const Tensor& part = nodes_[static_cast<std::size_t>(id)].value;
        for (std::int64_t i = 0; i < part.numel(); ++i) out[off + i] = part[i];
        off += part.numel();
      }
      n.value = std::move(out);
      break;
    }
    case Op::Reshape: {
      n.value = in(0).reshaped(Shape(n.iattr.begin(), n.iattr.end()));
      break;
    }
    case Op::Col: {
      const Tensor& x = in(0);
      const std::int64_t t = n.iattr[0];
      Tensor out = Tensor::zeros({x.dim(0)});
      for (std::int64_t i = 0; i < x.dim(0); ++i) out[i] = x.at(i, t);
      n.value = std::move(out);
      break;
    }
    case Op::TileChannels: {
      const Tensor& v = in(0);
      const std::int64_t h = n.iattr[0], w = n.iattr[1];
      Tensor out = Tensor::zeros({v.dim(0), h, w});
      for (std::int64_t f = 0; f < v.dim(0); ++f) {
        double* plane = out.data().data() + f * h * w;
        for (std::int64_t i = 0; i < h * w; ++i) plane[i] = v[f];
      }
      n.value = std::move(out);
      break;
    }
    case Op::StackLast: {
      const std::int64_t rows =
          nodes_[static_cast<std::size_t>(n.inputs[0])].value.numel();
      const std::int64_t cols = static_cast<std::int64_t>(n.inputs.size());
      Tensor out = Tensor::zeros({rows, cols});
      for (std::int64_t s = 0; s < cols; ++s) {
        const Tensor& part = nodes_[static_cast<std::size_t>(n.inputs[s])].value;
        for (std::int64_t p = 0; p < rows; ++p) out.at(p, s) = part[p];
      }
      n.value = std::move(out);
      break;
    }
    case Op::Squash: {
      const Tensor& x = in(0);
      Tensor out = Tensor::zeros(x.shape());
      const std::int64_t d = x.dim(x.rank() - 1);
      const std::int64_t rows = x.numel() / d;
      for (std::int64_t r = 0; r < rows; ++r) {
        squash_row(x.data().data() + r * d, out.data().data() + r * d, d);
      }
      n.value = std::move(out);
      break;
    }
    case Op::CapsPredict: {
      const Tensor& caps = in(0);
      const Tensor& w = in(1);
      const std::int64_t p_count = w.dim(0), j_count = w.dim(1),
                         dout = w.dim(2), din = w.dim(3);
      Tensor out = Tensor::zeros({p_count, j_count, dout});
      for (std::int64_t i = 0; i < p_count; ++i) {
        const double* u = caps.data().data() + i * din;
        for (std::int64_t j = 0; j < j_count; ++j) {
          const double* wm = w.data().data() + ((i * j_count + j) * dout) * din;
          double* o = out.data().data() + (i * j_count + j) * dout;
          for (std::int64_t a = 0; a < dout; ++a) {
            double acc = 0.0;
            for (std::int64_t bidx = 0; bidx < din; ++bidx) {
              acc += wm[a * din + bidx] * u[bidx];
            }
            o[a] = acc;
          }
        }
      }
      n.value = std::move(out);
      break;
    }
    case Op::Route: {
      const Tensor& pred = in(0);
      const std::int64_t p_count = pred.dim(0), j_count = pred.dim(1),
                         d = pred.dim(2);
      const int iters = static_cast<int>(n.iattr[0]);
      if (mode == RefreshMode::kReuseRoutingSchedule && n.aux.size() == 3) {
        // Re-evaluation after a parameter change. Couplings are constants
        // of the recorded schedule, so only the final weighted sum and
        // squash are redone; this keeps refresh() consistent with the
        // stop-gradient treatment in backward().
        const Tensor& fixed = n.aux[1];
        Tensor sum = Tensor::zeros({j_count, d});
        for (std::int64_t i = 0; i < p_count; ++i) {
          for (std::int64_t j = 0; j < j_count; ++j) {
            const double c = fixed.at(i, j);
            const double* u = pred.data().data() + (i * j_count + j) * d;
            double* sj = sum.data().data() + j * d;
            for (std::int64_t a = 0; a < d; ++a) sj[a] += c * u[a];
          }
        }
        Tensor out = Tensor::zeros({j_count, d});
        for (std::int64_t j = 0; j < j_count; ++j) {
          squash_row(sum.data().data() + j * d, out.data().data() + j * d, d);
        }
        n.value = std::move(out);
        n.aux[2] = std::move(sum);
        break;
      }
      Tensor logits = Tensor::zeros({p_count, j_count});
      Tensor couplings = Tensor::zeros({p_count, j_count});
      Tensor s = Tensor::zeros({j_count, d});
      Tensor v = Tensor::zeros({j_count, d});
      for (int it = 0; it < iters; ++it) {
        row_softmax(logits, couplings);
        std::fill(s.data().begin(), s.data().end(), 0.0);
        for (std::int64_t i = 0; i < p_count; ++i) {
          for (std::int64_t j = 0; j < j_count; ++j) {
            const double c = couplings.at(i, j);
            const double* u = pred.data().data() + (i * j_count + j) * d;
            double* sj = s.data().data() + j * d;
            for (std::int64_t a = 0; a < d; ++a) sj[a] += c * u[a];
          }
        }
        for (std::int64_t j = 0; j < j_count; ++j) {
          squash_row(s.data().data() + j * d, v.data().data() + j * d, d);
        }
        if (it + 1 < iters) {
          for (std::int64_t i = 0; i < p_count; ++i) {
            for (std::int64_t j = 0; j < j_count; ++j) {
              const double* u = pred.data().data() + (i * j_count + j) * d;
              const double* vj = v.data().data() + j * d;
              double agree = 0.0;
              for (std::int64_t a = 0; a < d; ++a) agree += u[a] * vj[a];
              logits.at(i, j) += agree;
            }
          }
        }
      }
      n.value = std::move(v);
      n.aux.clear();
      n.aux.push_back(std::move(logits));
      n.aux.push_back(std::move(couplings));
      n.aux.push_back(std::move(s));
      break;
    }
    case Op::ReduceSum: {
      double acc = 0.0;
      for (double v : in(0).data()) acc += v;
      n.value = Tensor::scalar(acc);
      break;
    }
    case Op::CrossEntropy: {
      const double p = in(0)[n.iattr[0]];
      n.value = Tensor::scalar(-std::log(std::max(p, kLogClamp)));
      break;
    }
    case Op::MarginLoss: {
      const Tensor& v = in(0);
      const std::int64_t j_count = v.dim(0), d = v.dim(1);
      const std::int64_t label = n.iattr[0];
      const double m_plus = n.dattr[0], m_minus = n.dattr[1],
                   lambda = n.dattr[2];
      double total = 0.0;
      for (std::int64_t j = 0; j < j_count; ++j) {
        double nsq = 0.0;
        for (std::int64_t a = 0; a < d; ++a) {
          nsq += v.at(j, a) * v.at(j, a);
        }
        const double len = std::sqrt(nsq);
        if (j == label) {
          const double gap = std::max(0.0, m_plus - len);
          total += gap * gap;
        } else {
          const double gap = std::max(0.0, len - m_minus);
          total += lambda * gap * gap;
        }
      }
      n.value = Tensor::scalar(total);
      break;
    }
  }
}

// ---- backward ---------------------------------------------------------------

Tensor& Graph::grad_slot(NodeId id, std::vector<Tensor>& grads,
                         std::vector<char>& has_grad) const {
  auto idx = static_cast<std::size_t>(id);
  if (!has_grad[idx]) {
    grads[idx] = Tensor::zeros(nodes_[idx].value.shape());
    has_grad[idx] = 1;
  }
  return grads[idx];
}

void Graph::backward_node(const Node& n, const Tensor& grad,
                          std::vector<Tensor>& grads,
                          std::vector<char>& has_grad) const {
  auto wants = [&](std::size_t i) {
    return nodes_[static_cast<std::size_t>(n.inputs[i])].requires_grad;
  };
  auto in = [&](std::size_t i) -> const Tensor& {
    return nodes_[static_cast<std::size_t>(n.inputs[i])].value;
  };
  auto slot = [&](std::size_t i) -> Tensor& {
    return grad_slot(n.inputs[i], grads, has_grad);
  };
  switch (n.op) {
    case Op::Input:
    case Op::Parameter:
      break;
    case Op::MatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const std::int64_t m = a.dim(0), k = a.dim(1);
      if (b.rank() == 2) {
        const std::int64_t c = b.dim(1);
        if (wants(0)) {
          Tensor& ga = slot(0);
          for (std::int64_t i = 0; i < m; ++i) {
            for (std::int64_t l = 0; l < k; ++l) {
              double acc = 0.0;
              for (std::int64_t j = 0; j < c; ++j) {
                acc += grad.at(i, j) * b.at(l, j);
              }
              ga.at(i, l) += acc;
            }
          }
        }
        if (wants(1)) {
          Tensor& gb = slot(1);
          for (std::int64_t l = 0; l < k; ++l) {
            for (std::int64_t j = 0; j < c; ++j) {
              double acc = 0.0;
              for (std::int64_t i = 0; i < m; ++i) {
                acc += a.at(i, l) * grad.at(i, j);
              }
              gb.at(l, j) += acc;
            }
          }
        }
      } else {
        if (wants(0)) {
          Tensor& ga = slot(0);
          for (std::int64_t i = 0; i < m; ++i) {
            for (std::int64_t l = 0; l < k; ++l) ga.at(i, l) += grad[i] * b[l];
          }
        }
        if (wants(1)) {
          Tensor& gb = slot(1);
          for (std::int64_t l = 0; l < k; ++l) {
            double acc = 0.0;
            for (std::int64_t i = 0; i < m; ++i) acc += a.at(i, l) * grad[i];
            gb[l] += acc;
          }
        }
      }
      break;
    }
    case Op::Conv2d: {
      const Tensor& x = in(0);
      const Tensor& k = in(1);
      const std::int64_t channels = x.dim(0), height = x.dim(1),
                         width = x.dim(2);
      const std::int64_t filters = k.dim(0), kh = k.dim(2), kw = k.dim(3);
      const std::int64_t oh = n.value.dim(1), ow = n.value.dim(2);
      const bool wx = wants(0), wk = wants(1), wb = wants(2);
      Tensor* gx = wx ? &slot(0) : nullptr;
      Tensor* gk = wk ? &slot(1) : nullptr;
      Tensor* gb = wb ? &slot(2) : nullptr;
      for (std::int64_t f = 0; f < filters; ++f) {
        for (std::int64_t oy = 0; oy < oh; ++oy) {
          for (std::int64_t ox = 0; ox < ow; ++ox) {
            const double g = grad.at(f, oy, ox);
            if (wb) (*gb)[f] += g;
            for (std::int64_t c = 0; c < channels; ++c) {
              for (std::int64_t p = 0; p < kh; ++p) {
                const std::int64_t xoff =
                    (c * height + oy + p) * width + ox;
                const std::int64_t koff = ((f * channels + c) * kh + p) * kw;
                for (std::int64_t q = 0; q < kw; ++q) {
                  if (wx) {
                    gx->data()[static_cast<std::size_t>(xoff + q)] +=
                        g * k.data()[static_cast<std::size_t>(koff + q)];
                  }
                  if (wk) {
                    gk->data()[static_cast<std::size_t>(koff + q)] +=
                        g * x.data()[static_cast<std::size_t>(xoff + q)];
                  }
                }
              }
            }
          }
        }
      }
      break;
    }
    case Op::Sigmoid: {
      if (!wants(0)) break;
      Tensor& gx = slot(0);
      for (std::int64_t i = 0; i < grad.numel(); ++i) {
        const double y = n.value[i];
        gx[i] += grad[i] * y * (1.0 - y);
      }
      break;
    }
    case Op::Tanh: {
      if (!wants(0)) break;
      Tensor& gx = slot(0);
      for (std::int64_t i = 0; i < grad.numel(); ++i) {
        const double y = n.value[i];
        gx[i] += grad[i] * (1.0 - y * y);
      }
      break;
    }
    case Op::Softmax: {
      if (!wants(0)) break;
      Tensor& gx = slot(0);
      double dot = 0.0;
      for (std::int64_t i = 0; i < grad.numel(); ++i) dot += grad[i] * n.value[i];
      for (std::int64_t i = 0; i < grad.numel(); ++i) {
        gx[i] += n.value[i] * (grad[i] - dot);
      }
      break;
    }
    case Op::Add: {
      for (std::size_t s = 0; s < 2; ++s) {
        if (!wants(s)) continue;
        Tensor& g = slot(s);
        for (std::int64_t i = 0; i < grad.numel(); ++i) g[i] += grad[i];
      }
      break;
    }
    case Op::Mul: {
      if (wants(0)) {
        Tensor& ga = slot(0);
        const Tensor& b = in(1);
        for (std::int64_t i = 0; i < grad.numel(); ++i) ga[i] += grad[i] * b[i];
      }
      if (wants(1)) {
        Tensor& gb = slot(1);
        const Tensor& a = in(0);
        for (std::int64_t i = 0; i < grad.numel(); ++i) gb[i] += grad[i] * a[i];
      }
      break;
    }
    case Op::Affine: {
      if (!wants(0)) break;
      Tensor& gx = slot(0);
      for (std::int64_t i = 0; i < grad.numel(); ++i) {
        gx[i] += grad[i] * n.dattr[0];
      }
      break;
    }
    case Op::L2Normalize: {
      if (!wants(0)) break;
      Tensor& gx = slot(0);
      const double norm = in(0).l2_norm();
      if (norm > kNormalizeEps) {
        double dot = 0.0;
        for (std::int64_t i = 0; i < grad.numel(); ++i) {
          dot += grad[i] * n.value[i];
        }
        for (std::int64_t i = 0; i < grad.numel(); ++i) {
          gx[i] += (grad[i] - dot * n.value[i]) / norm;
        }
      } else {
        for (std::int64_t i = 0; i < grad.numel(); ++i) {
          gx[i] += grad[i] / kNormalizeEps;
        }
      }
      break;
    }
    case Op::Concat: {
      std::int64_t off = 0;
      for (std::size_t s = 0; s < n.inputs.size(); ++s) {
        const std::int64_t len = in(s).numel();
        if (wants(s)) {
          Tensor& g = slot(s);
          for (std::int64_t i = 0; i < len; ++i) g[i] += grad[off + i];
        }
        off += len;
      }
      break;
    }
    case Op::Reshape: {
      if (!wants(0)) break;
      Tensor& gx = slot(0);
      for (std::int64_t i = 0; i < grad.numel(); ++i) gx[i] += grad[i];
      break;
    }
    case Op::Col: {
      if (!wants(0)) break;
      Tensor& gx = slot(0);
      const std::int64_t t = n.iattr[0];
      for (std::int64_t i = 0; i < grad.numel(); ++i) gx.at(i, t) += grad[i];
      break;
    }
    case Op::TileChannels: {
      if (!wants(0)) break;
      Tensor& gv = slot(0);
      const std::int64_t h = n.iattr[0], w = n.iattr[1];
      for (std::int64_t f = 0; f < gv.numel(); ++f) {
        const double* plane = grad.data().data() + f * h * w;
        double acc = 0.0;
        for (std::int64_t i = 0; i < h * w; ++i) acc += plane[i];
        gv[f] += acc;
      }
      break;
    }
    case Op::StackLast: {
      const std::int64_t cols = static_cast<std::int64_t>(n.inputs.size());
      for (std::int64_t s = 0; s < cols; ++s) {
        if (!wants(static_cast<std::size_t>(s))) continue;
        Tensor& g = slot(static_cast<std::size_t>(s));
        for (std::int64_t p = 0; p < g.numel(); ++p) g[p] += grad.at(p, s);
      }
      break;
    }
    case Op::Squash: {
      if (!wants(0)) break;
      Tensor& gx = slot(0);
      const Tensor& x = in(0);
      const std::int64_t d = x.dim(x.rank() - 1);
      const std::int64_t rows = x.numel() / d;
      for (std::int64_t r = 0; r < rows; ++r) {
        squash_backward_row(x.data().data() + r * d,
                            grad.data().data() + r * d,
                            gx.data().data() + r * d, d);
      }
      break;
    }
    case Op::CapsPredict: {
      const Tensor& caps = in(0);
      const Tensor& w = in(1);
      const std::int64_t p_count = w.dim(0), j_count = w.dim(1),
                         dout = w.dim(2), din = w.dim(3);
      const bool wc = wants(0), ww = wants(1);
      Tensor* gc = wc ? &slot(0) : nullptr;
      Tensor* gw = ww ? &slot(1) : nullptr;
      for (std::int64_t i = 0; i < p_count; ++i) {
        const double* u = caps.data().data() + i * din;
        for (std::int64_t j = 0; j < j_count; ++j) {
          const double* wm = w.data().data() + ((i * j_count + j) * dout) * din;
          const double* g = grad.data().data() + (i * j_count + j) * dout;
          for (std::int64_t a = 0; a < dout; ++a) {
            for (std::int64_t bidx = 0; bidx < din; ++bidx) {
              if (wc) {
                gc->data()[static_cast<std::size_t>(i * din + bidx)] +=
                    g[a] * wm[a * din + bidx];
              }
              if (ww) {
                gw->data()[static_cast<std::size_t>(
                    ((i * j_count + j) * dout + a) * din + bidx)] +=
                    g[a] * u[bidx];
              }
            }
          }
        }
      }
      break;
    }
    case Op::Route: {
      if (!wants(0)) break;
      Tensor& gpred = slot(0);
      const Tensor& pred = in(0);
      const Tensor& couplings = n.aux[1];
      const Tensor& s = n.aux[2];
      const std::int64_t p_count = pred.dim(0), j_count = pred.dim(1),
                         d = pred.dim(2);
      Tensor gs = Tensor::zeros({j_count, d});
      for (std::int64_t j = 0; j < j_count; ++j) {
        squash_backward_row(s.data().data() + j * d,
                            grad.data().data() + j * d,
                            gs.data().data() + j * d, d);
      }
      for (std::int64_t i = 0; i < p_count; ++i) {
        for (std::int64_t j = 0; j < j_count; ++j) {
          const double c = couplings.at(i, j);
          const double* gsj = gs.data().data() + j * d;
          double* gp = gpred.data().data() + (i * j_count + j) * d;
          for (std::int64_t a = 0; a < d; ++a) gp[a] += c * gsj[a];
        }
      }
      break;
    }
    case Op::ReduceSum: {
      if (!wants(0)) break;
      Tensor& gx = slot(0);
      for (std::int64_t i = 0; i < gx.numel(); ++i) gx[i] += grad[0];
      break;
    }
    case Op::CrossEntropy: {
      if (!wants(0)) break;
      Tensor& gp = slot(0);
      const double p = in(0)[n.iattr[0]];
      if (p > kLogClamp) gp[n.iattr[0]] += -grad[0] / p;
      break;
    }
    case Op::MarginLoss: {
      if (!wants(0)) break;
      Tensor& gv = slot(0);
      const Tensor& v = in(0);
      const std::int64_t j_count = v.dim(0), d = v.dim(1);
      const std::int64_t label = n.iattr[0];
      const double m_plus = n.dattr[0], m_minus = n.dattr[1],
                   lambda = n.dattr[2];
      for (std::int64_t j = 0; j < j_count; ++j) {
        double nsq = 0.0;
        for (std::int64_t a = 0; a < d; ++a) nsq += v.at(j, a) * v.at(j, a);
        const double len = std::sqrt(nsq);
        if (len == 0.0) continue;
        double dloss_dlen = 0.0;
        if (j == label) {
          const double gap = m_plus - len;
          if (gap > 0.0) dloss_dlen = -2.0 * gap;
        } else {
          const double gap = len - m_minus;
          if (gap > 0.0) dloss_dlen = 2.0 * lambda * gap;
        }
        if (dloss_dlen == 0.0) continue;
        const double scale = grad[0] * dloss_dlen / len;
        for (std::int64_t a = 0; a < d; ++a) gv.at(j, a) += scale * v.at(j, a);
      }
      break;
    }
  }
}

std::map<std::string, Tensor> Graph::backward(NodeId loss) const {
  const Node& ln = node_checked(loss);
  if (ln.value.numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " +
                     shape_to_string(ln.value.shape()));
  }
  std::vector<Tensor> grads(nodes_.size());
  std::vector<char> has_grad(nodes_.size(), 0);
  grad_slot(loss, grads, has_grad)[0] = 1.0;
  for (NodeId id = loss; id >= 0; --id) {
    const auto idx = static_cast<std::size_t>(id);
    if (!has_grad[idx]) continue;
    const Node& n = nodes_[idx];
    if (!n.requires_grad) continue;
    backward_node(n, grads[idx], grads, has_grad);
  }
  std::map<std::string, Tensor> result;
  for (const auto& [name, id] : params_) {
    const auto idx = static_cast<std::size_t>(id);
    result.emplace(name, has_grad[idx]
                             ? grads[idx]
                             : Tensor::zeros(nodes_[idx].value.shape()));
  }
  return result;
}

// ---- inspection and re-execution ----------------------------------------------

const Tensor& Graph::value(NodeId id) const { return node_checked(id).value; }

const Tensor& Graph::route_couplings(NodeId route_node) const {
  const Node& n = node_checked(route_node);
  if (n.op != Op::Route) throw ShapeError("node is not a routing node");
  return n.aux[1];
}

const Tensor& Graph::route_logits(NodeId route_node) const {
  const Node& n = node_checked(route_node);
  if (n.op != Op::Route) throw ShapeError("node is not a routing node");
  return n.aux[0];
}

Tensor Graph::parameter_value(const std::string& name) const {
  auto it = param_index_.find(name);
  if (it == param_index_.end()) {
    throw ShapeError("unknown parameter: " + name);
  }
  return nodes_[static_cast<std::size_t>(it->second)].value;
}

void Graph::set_parameter(const std::string& name, const Tensor& value) {
  auto it = param_index_.find(name);
  if (it == param_index_.end()) {
    throw ShapeError("unknown parameter: " + name);
  }
  Node& n = nodes_[static_cast<std::size_t>(it->second)];
  if (!n.value.same_shape(value)) {
    throw ShapeError("parameter " + name + " has shape " +
                     shape_to_string(n.value.shape()) +
                     ", cannot assign shape " + shape_to_string(value.shape()));
  }
  require_finite(value, "parameter " + name);
  n.value = value;
}

void Graph::refresh(RefreshMode mode) {
  for (auto& n : nodes_) {
    if (n.op == Op::Input || n.op == Op::Parameter) continue;
    compute(n, mode);
    require_finite(n.value, "refresh");
  }
}

// ---- gradient checking ---------------------------------------------------------

double grad_check(Graph& g, NodeId loss, const std::string& param, double h,
                  Graph::RefreshMode mode) {
  if (h <= 0.0) throw ShapeError("grad_check: step must be positive");
  const auto grads = g.backward(loss);
  const Tensor analytic = grads.at(param);
  const Tensor original = g.parameter_value(param);
  Tensor work = original;
  double max_rel = 0.0;
  for (std::int64_t i = 0; i < original.numel(); ++i) {
    work[i] = original[i] + h;
    g.set_parameter(param, work);
    g.refresh(mode);
    const double up = g.value(loss)[0];
    work[i] = original[i] - h;
    g.set_parameter(param, work);
    g.refresh(mode);
    const double down = g.value(loss)[0];
    work[i] = original[i];
    const double numeric = (up - down) / (2.0 * h);
    const double denom =
        std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    max_rel = std::max(max_rel, std::abs(analytic[i] - numeric) / denom);
  }
  g.set_parameter(param, original);
  g.refresh(mode);
  return max_rel;
}

Tensor l2_normalized(const Tensor& t) {
  Tensor out = t;
  const double denom = std::max(t.l2_norm(), kNormalizeEps);
  for (auto& v : out.data()) v /= denom;
  return out;
}

}  // namespace astcaps
