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

#include <fmt/format.h>

#include "sidenet/autodiff.h"
#include "sidenet/error.h"

namespace sidenet::ad {

template <typename T>
Var<T> Graph<T>::Push(Node node) {
  if (nodes_.size() >= UINT32_MAX) throw ConfigError("graph too large");
  nodes_.push_back(std::move(node));
  return Var<T>{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var<T> Graph<T>::Parameter(Tensor<T> value) {
  Node node;
  node.owned = std::move(value);
  node.requires_grad = true;
  node.op = "parameter";
  return Push(std::move(node));
}

template <typename T>
Var<T> Graph<T>::Constant(Tensor<T> value) {
  Node node;
  node.owned = std::move(value);
  node.op = "constant";
  return Push(std::move(node));
}

template <typename T>
Var<T> Graph<T>::Borrow(const Tensor<T>& value) {
  Node node;
  node.borrowed = &value;
  node.op = "borrowed";
  return Push(std::move(node));
}

template <typename T>
Var<T> Graph<T>::Input(const TensorF& value) {
  if constexpr (std::is_same_v<T, float>) {
    return Borrow(value);
  } else {
    return Constant(value.template Cast<T>());
  }
}

template <typename T>
Var<T> Graph<T>::Record(std::string_view op, Tensor<T> value,
                        std::span<const Var<T>> parents, BackwardFn backward) {
  if (!value.AllFinite()) {
    throw NumericalError(
        fmt::format("non-finite value produced by {} (shape {})", op,
                    ShapeString(value.shape())));
  }
  Node node;
  node.owned = std::move(value);
  node.op = op;
  for (const Var<T>& p : parents) {
    if (p.graph != this) throw ConfigError(fmt::format("{}: foreign node", op));
    if (nodes_[p.id].requires_grad) node.requires_grad = true;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  return Push(std::move(node));
}

template <typename T>
const Tensor<T>& Graph<T>::value(Var<T> v) const {
  const Node& node = nodes_.at(v.id);
  return node.borrowed ? *node.borrowed : node.owned;
}

template <typename T>
const Tensor<T>& Graph<T>::grad(Var<T> v) const {
  const Node& node = nodes_.at(v.id);
  if (!node.requires_grad) {
    throw ConfigError(
        fmt::format("node {} ({}) does not require a gradient", v.id, node.op));
  }
  if (!backward_done_) throw ConfigError("gradient read before Backward()");
  return node.grad;
}

template <typename T>
Tensor<T>& Graph<T>::GradBuffer(Var<T> v) {
  Node& node = nodes_.at(v.id);
  if (node.grad.empty()) node.grad = Tensor<T>(value(v).shape());
  return node.grad;
}

template <typename T>
void Graph<T>::Backward(Var<T> loss) {
  if (value(loss).size() != 1) {
    throw ConfigError(fmt::format("Backward() needs a scalar loss, got shape {}",
                                  ShapeString(value(loss).shape())));
  }
  if (backward_done_) throw ConfigError("Backward() called twice");
  if (nodes_[loss.id].requires_grad) {
    GradBuffer(loss)[0] = T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.backward || node.grad.empty()) continue;
      node.backward(*this, value(Var<T>{this, static_cast<std::uint32_t>(i)}),
                    node.grad);
      if (!node.grad.AllFinite()) {
        throw NumericalError(
            fmt::format("non-finite gradient flowing out of {}", node.op));
      }
    }
  }
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].requires_grad) {
      GradBuffer(Var<T>{this, static_cast<std::uint32_t>(i)});
    }
  }
  backward_done_ = true;
}

template class Graph<float>;
template class Graph<double>;

}  // namespace sidenet::ad
