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

#include "sidenet/tensor.h"

#include <cmath>
#include <numeric>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "sidenet/error.h"

namespace sidenet {

std::size_t NumElements(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string ShapeString(const Shape& shape) {
  return fmt::format("[{}]", fmt::join(shape, ", "));
}

std::vector<std::size_t> Strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i > 1; --i) {
    strides[i - 2] = strides[i - 1] * shape[i - 1];
  }
  return strides;
}

template <typename T>
Tensor<T>::Tensor(Shape shape)
    : shape_(std::move(shape)), data_(NumElements(shape_), T{0}) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (NumElements(shape_) != data_.size()) {
    throw DimensionError(fmt::format("shape {} holds {} elements, got {}",
                                     ShapeString(shape_),
                                     NumElements(shape_), data_.size()));
  }
}

template <typename T>
Tensor<T> Tensor<T>::Full(Shape shape, T value) {
  Tensor t(std::move(shape));
  t.Fill(value);
  return t;
}

template <typename T>
std::size_t Tensor<T>::Offset(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) {
    throw DimensionError(fmt::format("index of rank {} into tensor {}",
                                     index.size(), ShapeString(shape_)));
  }
  std::size_t offset = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= shape_[axis]) {
      throw DimensionError(fmt::format("index {} out of range on axis {} of {}",
                                       i, axis, ShapeString(shape_)));
    }
    offset = offset * shape_[axis] + i;
    ++axis;
  }
  return offset;
}

template <typename T>
T& Tensor<T>::at(std::initializer_list<std::size_t> index) {
  return data_[Offset(index)];
}

template <typename T>
const T& Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  return data_[Offset(index)];
}

template <typename T>
Tensor<T> Tensor<T>::Reshaped(Shape shape) const& {
  return Tensor(std::move(shape), data_);
}

template <typename T>
Tensor<T> Tensor<T>::Reshaped(Shape shape) && {
  return Tensor(std::move(shape), std::move(data_));
}

template <typename T>
void Tensor<T>::Fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
bool Tensor<T>::AllFinite() const {
  for (T v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template <typename T>
Tensor<T> Permute(const Tensor<T>& x, std::span<const std::size_t> perm) {
  const Shape& in_shape = x.shape();
  if (perm.size() != in_shape.size()) {
    throw DimensionError(fmt::format("permutation of length {} for tensor {}",
                                     perm.size(), ShapeString(in_shape)));
  }
  std::vector<bool> seen(perm.size(), false);
  Shape out_shape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= perm.size() || seen[perm[i]]) {
      throw DimensionError("invalid axis permutation");
    }
    seen[perm[i]] = true;
    out_shape[i] = in_shape[perm[i]];
  }
  const auto in_strides = Strides(in_shape);
  // Stride in the input for each output axis.
  std::vector<std::size_t> gather(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) gather[i] = in_strides[perm[i]];

  Tensor<T> out(out_shape);
  const std::size_t n = out.size();
  if (n == 0) return out;
  std::vector<std::size_t> index(perm.size(), 0);
  std::size_t src = 0;
  auto src_data = x.data();
  auto dst_data = out.data();
  for (std::size_t dst = 0; dst < n; ++dst) {
    dst_data[dst] = src_data[src];
    for (std::size_t axis = perm.size(); axis-- > 0;) {
      if (++index[axis] < out_shape[axis]) {
        src += gather[axis];
        break;
      }
      src -= gather[axis] * (out_shape[axis] - 1);
      index[axis] = 0;
    }
  }
  return out;
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> Permute(const Tensor<float>&, std::span<const std::size_t>);
template Tensor<double> Permute(const Tensor<double>&, std::span<const std::size_t>);

}  // namespace sidenet
