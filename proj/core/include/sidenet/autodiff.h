// Copyright (c) the sidenet Authors
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
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sidenet/tensor.h"

namespace sidenet::ad {

template <typename T>
class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  std::uint32_t id = 0;

  const Tensor<T>& value() const { return graph->value(*this); }
  const Shape& shape() const { return value().shape(); }
  const Tensor<T>& grad() const { return graph->grad(*this); }
};

// Append-only tape. Nodes are stored in creation order, which is a valid
// topological order because an operation can only consume existing nodes.
//
// A graph is single-owner: build it, call Backward once, read gradients.
template <typename T>
class Graph {
 public:
  // Receives the node's own value and its accumulated gradient and adds
  // into the parents' gradient buffers.
  using BackwardFn = std::function<void(Graph&, const Tensor<T>& out_value,
                                        const Tensor<T>& out_grad)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Leaf that receives a gradient.
  Var<T> Parameter(Tensor<T> value);
  // Leaf without gradient; the graph owns a copy.
  Var<T> Constant(Tensor<T> value);
  // Leaf without gradient that references `value` without copying. The
  // referenced tensor must outlive the graph.
  Var<T> Borrow(const Tensor<T>& value);
  // Frozen float data (encoder taps). Borrowed for float graphs, converted
  // for double graphs.
  Var<T> Input(const TensorF& value);

  // Appends an operation node. `backward` is dropped when no parent needs a
  // gradient. Throws NumericalError if `value` holds a NaN or infinity.
  Var<T> Record(std::string_view op, Tensor<T> value,
                std::span<const Var<T>> parents, BackwardFn backward);
  Var<T> Record(std::string_view op, Tensor<T> value,
                std::initializer_list<Var<T>> parents, BackwardFn backward) {
    return Record(op, std::move(value),
                  std::span<const Var<T>>(parents.begin(), parents.size()),
                  std::move(backward));
  }

  const Tensor<T>& value(Var<T> v) const;
  bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }
  // Gradient after Backward. Throws if the node does not require one.
  const Tensor<T>& grad(Var<T> v) const;

  // Zero-initialized on first access. For use inside backward functions.
  Tensor<T>& GradBuffer(Var<T> v);

  // Reverse-mode sweep from a scalar loss; d(loss)/d(loss) = 1.
  void Backward(Var<T> loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* borrowed = nullptr;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
    std::string_view op;
  };

  Var<T> Push(Node node);

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

extern template class Graph<float>;
extern template class Graph<double>;

// Elementwise binary operations broadcast with numpy rules.
template <typename T> Var<T> Add(Var<T> a, Var<T> b);
template <typename T> Var<T> Sub(Var<T> a, Var<T> b);
template <typename T> Var<T> Mul(Var<T> a, Var<T> b);
template <typename T> Var<T> Div(Var<T> a, Var<T> b);

template <typename T> Var<T> Neg(Var<T> x);
template <typename T> Var<T> Scale(Var<T> x, double factor);
template <typename T> Var<T> AddScalar(Var<T> x, double offset);
template <typename T> Var<T> Exp(Var<T> x);
template <typename T> Var<T> Log(Var<T> x);
template <typename T> Var<T> Square(Var<T> x);
template <typename T> Var<T> PowScalar(Var<T> x, double exponent);
template <typename T> Var<T> Sigmoid(Var<T> x);
// log(sigmoid(x)) without overflow for large |x|.
template <typename T> Var<T> LogSigmoid(Var<T> x);
// Exact (erf) GELU.
template <typename T> Var<T> Gelu(Var<T> x);

template <typename T> Var<T> Sum(Var<T> x);
template <typename T> Var<T> Mean(Var<T> x);
// Reductions over `axes` (negative axes count from the end).
template <typename T>
Var<T> Sum(Var<T> x, std::vector<int> axes, bool keepdim = false);
template <typename T>
Var<T> Mean(Var<T> x, std::vector<int> axes, bool keepdim = false);

// [..., M, K] x [..., K, N] -> [..., M, N]; batch axes broadcast.
template <typename T> Var<T> MatMul(Var<T> a, Var<T> b);
// y = x W^T + b with W: [out, in], b: [out].
template <typename T> Var<T> Linear(Var<T> x, Var<T> weight, Var<T> bias);

template <typename T> Var<T> Reshape(Var<T> x, Shape shape);
template <typename T> Var<T> Permute(Var<T> x, std::vector<std::size_t> perm);
template <typename T> Var<T> Transpose(Var<T> x, int axis_a, int axis_b);
template <typename T> Var<T> Concat(std::span<const Var<T>> parts, int axis);
template <typename T>
Var<T> Slice(Var<T> x, int axis, std::size_t begin, std::size_t end);

// Subtracts the per-slice maximum before exponentiation.
template <typename T> Var<T> Softmax(Var<T> x, int axis);
template <typename T> Var<T> LogSoftmax(Var<T> x, int axis);

// Normalizes over the last axis with population variance.
template <typename T>
Var<T> LayerNorm(Var<T> x, Var<T> gain, Var<T> bias, double eps = 1e-5);

// Unit L2 norm along the last axis. Throws NumericalError when a slice has
// norm below 1e-12.
template <typename T> Var<T> L2Normalize(Var<T> x);
// Rank-1 inputs of equal length; result has shape [].
template <typename T> Var<T> CosineSimilarity(Var<T> a, Var<T> b);

// Cross-correlation (no kernel flip) with zero padding.
// x: [Cin, H, W] or [B, Cin, H, W]; kernel: [Cout, Cin, k, k] with k odd;
// bias: [Cout].
template <typename T>
Var<T> Conv2d(Var<T> x, Var<T> kernel, Var<T> bias, std::size_t padding,
              std::size_t stride);

// softmax(q k^T / sqrt(D)) v over the trailing two axes.
template <typename T>
Var<T> ScaledDotAttention(Var<T> q, Var<T> k, Var<T> v);

template <typename T> Var<T> operator+(Var<T> a, Var<T> b) { return Add(a, b); }
template <typename T> Var<T> operator-(Var<T> a, Var<T> b) { return Sub(a, b); }
template <typename T> Var<T> operator*(Var<T> a, Var<T> b) { return Mul(a, b); }
template <typename T> Var<T> operator-(Var<T> a) { return Neg(a); }

// Output extent of a strided convolution; throws ConfigError when the
// configuration does not tile the input exactly.
std::size_t ConvOutputExtent(std::size_t in, std::size_t kernel,
                             std::size_t padding, std::size_t stride);

}  // namespace sidenet::ad
