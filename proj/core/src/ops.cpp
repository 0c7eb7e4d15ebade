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

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include <fmt/format.h>

#include "sidenet/autodiff.h"
#include "sidenet/error.h"

namespace sidenet::ad {
namespace {

std::size_t NormalizeAxis(int axis, std::size_t rank, std::string_view op) {
  const int r = static_cast<int>(rank);
  if (axis < -r || axis >= r) {
    throw DimensionError(
        fmt::format("{}: axis {} out of range for rank {}", op, axis, rank));
  }
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
};

BroadcastPlan PlanBroadcast(const Shape& a, const Shape& b,
                            std::string_view op) {
  const std::size_t rank = std::max(a.size(), b.size());
  BroadcastPlan plan;
  plan.out.resize(rank);
  plan.stride_a.assign(rank, 0);
  plan.stride_b.assign(rank, 0);
  const auto sa = Strides(a);
  const auto sb = Strides(b);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ra = rank - a.size();
    const std::size_t rb = rank - b.size();
    const std::size_t da = i >= ra ? a[i - ra] : 1;
    const std::size_t db = i >= rb ? b[i - rb] : 1;
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(fmt::format("{}: shapes {} and {} do not broadcast",
                                       op, ShapeString(a), ShapeString(b)));
    }
    plan.out[i] = std::max(da, db);
    if (da == 0 || db == 0) plan.out[i] = 0;
    if (i >= ra && da != 1) plan.stride_a[i] = sa[i - ra];
    if (i >= rb && db != 1) plan.stride_b[i] = sb[i - rb];
  }
  return plan;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <typename F>
void ForEachBroadcast(const BroadcastPlan& plan, F&& f) {
  const std::size_t n = NumElements(plan.out);
  const std::size_t rank = plan.out.size();
  std::vector<std::size_t> index(rank, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  for (std::size_t o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (std::size_t axis = rank; axis-- > 0;) {
      if (++index[axis] < plan.out[axis]) {
        ia += plan.stride_a[axis];
        ib += plan.stride_b[axis];
        break;
      }
      ia -= plan.stride_a[axis] * (plan.out[axis] - 1);
      ib -= plan.stride_b[axis] * (plan.out[axis] - 1);
      index[axis] = 0;
    }
  }
}

// Elementwise binary op. `fwd(x, y)` computes the value; `grad(x, y, out, g)`
// returns the pair of partial contributions.
template <typename T, typename Fwd, typename GradA, typename GradB>
Var<T> Binary(std::string_view name, Var<T> a, Var<T> b, Fwd fwd, GradA grad_a,
              GradB grad_b) {
  Graph<T>& g = *a.graph;
  const Tensor<T>& va = a.value();
  const Tensor<T>& vb = b.value();
  if (va.shape() == vb.shape()) {
    Tensor<T> out(va.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(va[i], vb[i]);
    return g.Record(
        name, std::move(out), {a, b},
        [a, b, grad_a, grad_b](Graph<T>& g, const Tensor<T>& y,
                               const Tensor<T>& gy) {
          const Tensor<T>& xa = a.value();
          const Tensor<T>& xb = b.value();
          if (g.requires_grad(a)) {
            auto& ga = g.GradBuffer(a);
            for (std::size_t i = 0; i < y.size(); ++i)
              ga[i] += grad_a(xa[i], xb[i], y[i], gy[i]);
          }
          if (g.requires_grad(b)) {
            auto& gb = g.GradBuffer(b);
            for (std::size_t i = 0; i < y.size(); ++i)
              gb[i] += grad_b(xa[i], xb[i], y[i], gy[i]);
          }
        });
  }
  BroadcastPlan plan = PlanBroadcast(va.shape(), vb.shape(), name);
  Tensor<T> out(plan.out);
  ForEachBroadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    out[o] = fwd(va[ia], vb[ib]);
  });
  return g.Record(
      name, std::move(out), {a, b},
      [a, b, plan, grad_a, grad_b](Graph<T>& g, const Tensor<T>& y,
                                   const Tensor<T>& gy) {
        const Tensor<T>& xa = a.value();
        const Tensor<T>& xb = b.value();
        const bool need_a = g.requires_grad(a);
        const bool need_b = g.requires_grad(b);
        Tensor<T>* ga = need_a ? &g.GradBuffer(a) : nullptr;
        Tensor<T>* gb = need_b ? &g.GradBuffer(b) : nullptr;
        ForEachBroadcast(plan, [&](std::size_t o, std::size_t ia,
                                   std::size_t ib) {
          if (ga) (*ga)[ia] += grad_a(xa[ia], xb[ib], y[o], gy[o]);
          if (gb) (*gb)[ib] += grad_b(xa[ia], xb[ib], y[o], gy[o]);
        });
      });
}

// Elementwise unary op; `grad(x, y, g)` returns dL/dx.
template <typename T, typename Fwd, typename Grad>
Var<T> Unary(std::string_view name, Var<T> x, Fwd fwd, Grad grad) {
  const Tensor<T>& vx = x.value();
  Tensor<T> out(vx.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(vx[i]);
  return x.graph->Record(
      name, std::move(out), {x},
      [x, grad](Graph<T>& g, const Tensor<T>& y, const Tensor<T>& gy) {
        const Tensor<T>& vx = x.value();
        auto& gx = g.GradBuffer(x);
        for (std::size_t i = 0; i < y.size(); ++i)
          gx[i] += grad(vx[i], y[i], gy[i]);
      });
}

template <typename T>
T StableSigmoid(T x) {
  if (x >= 0) {
    return T{1} / (T{1} + std::exp(-x));
  }
  const T e = std::exp(x);
  return e / (T{1} + e);
}

// Splits `shape` around `axis` into (outer, extent, inner).
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit SplitAt(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// C[M,N] += A[M,K] B[K,N] (all row-major, contiguous).
template <typename T>
void GemmAccumulate(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      if (aip == T{0}) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

// C[M,N] += A[M,K] B[N,K]^T
template <typename T>
void GemmAccumulateBt(const T* a, const T* b, T* c, std::size_t m,
                      std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc{0};
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// C[K,N] += A[M,K]^T B[M,N]
template <typename T>
void GemmAccumulateAt(const T* a, const T* b, T* c, std::size_t m,
                      std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      if (aip == T{0}) continue;
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

}  // namespace

std::size_t ConvOutputExtent(std::size_t in, std::size_t kernel,
                             std::size_t padding, std::size_t stride) {
  if (stride == 0) throw ConfigError("convolution stride must be positive");
  const std::size_t padded = in + 2 * padding;
  if (padded < kernel || (padded - kernel) % stride != 0) {
    throw ConfigError(fmt::format(
        "convolution does not tile: extent {} + 2*{} padding, kernel {}, "
        "stride {}",
        in, padding, kernel, stride));
  }
  return (padded - kernel) / stride + 1;
}

template <typename T>
Var<T> Add(Var<T> a, Var<T> b) {
  return Binary<T>(
      "add", a, b, [](T x, T y) { return x + y; },
      [](T, T, T, T g) { return g; }, [](T, T, T, T g) { return g; });
}

template <typename T>
Var<T> Sub(Var<T> a, Var<T> b) {
  return Binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; },
      [](T, T, T, T g) { return g; }, [](T, T, T, T g) { return -g; });
}

template <typename T>
Var<T> Mul(Var<T> a, Var<T> b) {
  return Binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; },
      [](T, T y, T, T g) { return g * y; }, [](T x, T, T, T g) { return g * x; });
}

template <typename T>
Var<T> Div(Var<T> a, Var<T> b) {
  return Binary<T>(
      "div", a, b, [](T x, T y) { return x / y; },
      [](T, T y, T, T g) { return g / y; },
      [](T, T y, T out, T g) { return -g * out / y; });
}

template <typename T>
Var<T> Neg(Var<T> x) {
  return Unary<T>(
      "neg", x, [](T v) { return -v; }, [](T, T, T g) { return -g; });
}

template <typename T>
Var<T> Scale(Var<T> x, double factor) {
  const T f = static_cast<T>(factor);
  return Unary<T>(
      "scale", x, [f](T v) { return v * f; }, [f](T, T, T g) { return g * f; });
}

template <typename T>
Var<T> AddScalar(Var<T> x, double offset) {
  const T c = static_cast<T>(offset);
  return Unary<T>(
      "add_scalar", x, [c](T v) { return v + c; }, [](T, T, T g) { return g; });
}

template <typename T>
Var<T> Exp(Var<T> x) {
  return Unary<T>(
      "exp", x, [](T v) { return std::exp(v); },
      [](T, T y, T g) { return g * y; });
}

template <typename T>
Var<T> Log(Var<T> x) {
  return Unary<T>(
      "log", x, [](T v) { return std::log(v); },
      [](T v, T, T g) { return g / v; });
}

template <typename T>
Var<T> Square(Var<T> x) {
  return Unary<T>(
      "square", x, [](T v) { return v * v; },
      [](T v, T, T g) { return T{2} * v * g; });
}

template <typename T>
Var<T> PowScalar(Var<T> x, double exponent) {
  const T p = static_cast<T>(exponent);
  return Unary<T>(
      "pow", x, [p](T v) { return std::pow(v, p); },
      [p](T v, T, T g) {
        if (p == T{0}) return T{0};
        if (p == T{1}) return g;
        return g * p * std::pow(v, p - T{1});
      });
}

template <typename T>
Var<T> Sigmoid(Var<T> x) {
  return Unary<T>(
      "sigmoid", x, [](T v) { return StableSigmoid(v); },
      [](T, T y, T g) { return g * y * (T{1} - y); });
}

template <typename T>
Var<T> LogSigmoid(Var<T> x) {
  return Unary<T>(
      "log_sigmoid", x,
      [](T v) {
        // -softplus(-v)
        return -(std::max(-v, T{0}) + std::log1p(std::exp(-std::abs(v))));
      },
      [](T v, T, T g) { return g * StableSigmoid(-v); });
}

template <typename T>
Var<T> Gelu(Var<T> x) {
  return Unary<T>(
      "gelu", x,
      [](T v) {
        return T{0.5} * v * (T{1} + std::erf(v / std::numbers::sqrt2_v<T>));
      },
      [](T v, T, T g) {
        const T cdf = T{0.5} * (T{1} + std::erf(v / std::numbers::sqrt2_v<T>));
        const T pdf = std::exp(T{-0.5} * v * v) *
                      (std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>);
        return g * (cdf + v * pdf);
      });
}

template <typename T>
Var<T> Sum(Var<T> x) {
  const Tensor<T>& vx = x.value();
  double acc = 0.0;
  for (T v : vx.data()) acc += v;
  return x.graph->Record(
      "sum", Tensor<T>::Scalar(static_cast<T>(acc)), {x},
      [x](Graph<T>& g, const Tensor<T>&, const Tensor<T>& gy) {
        auto& gx = g.GradBuffer(x);
        for (auto& v : gx.data()) v += gy[0];
      });
}

template <typename T>
Var<T> Mean(Var<T> x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw DimensionError("mean of an empty tensor");
  return Scale(Sum(x), 1.0 / static_cast<double>(n));
}

template <typename T>
Var<T> Sum(Var<T> x, std::vector<int> axes, bool keepdim) {
  const Shape& in = x.shape();
  const std::size_t rank = in.size();
  std::vector<bool> reduce(rank, false);
  for (int a : axes) reduce[NormalizeAxis(a, rank, "sum")] = true;

  Shape kept(rank);
  Shape out_shape;
  for (std::size_t i = 0; i < rank; ++i) {
    kept[i] = reduce[i] ? 1 : in[i];
    if (!reduce[i] || keepdim) out_shape.push_back(kept[i]);
  }
  // Output offset contributed by each input axis.
  const auto kept_strides = Strides(kept);
  std::vector<std::size_t> map(rank);
  for (std::size_t i = 0; i < rank; ++i) map[i] = reduce[i] ? 0 : kept_strides[i];

  auto for_each = [in, map, rank](auto&& f) {
    const std::size_t n = NumElements(in);
    std::vector<std::size_t> index(rank, 0);
    std::size_t o = 0;
    for (std::size_t i = 0; i < n; ++i) {
      f(i, o);
      for (std::size_t axis = rank; axis-- > 0;) {
        if (++index[axis] < in[axis]) {
          o += map[axis];
          break;
        }
        o -= map[axis] * (in[axis] - 1);
        index[axis] = 0;
      }
    }
  };

  const Tensor<T>& vx = x.value();
  std::vector<double> acc(NumElements(out_shape), 0.0);
  for_each([&](std::size_t i, std::size_t o) { acc[o] += vx[i]; });
  Tensor<T> out(out_shape, std::vector<T>(acc.begin(), acc.end()));
  return x.graph->Record(
      "sum_axes", std::move(out), {x},
      [x, for_each](Graph<T>& g, const Tensor<T>&, const Tensor<T>& gy) {
        auto& gx = g.GradBuffer(x);
        for_each([&](std::size_t i, std::size_t o) { gx[i] += gy[o]; });
      });
}

template <typename T>
Var<T> Mean(Var<T> x, std::vector<int> axes, bool keepdim) {
  std::size_t count = 1;
  std::vector<bool> seen(x.shape().size(), false);
  for (int a : axes) {
    const std::size_t axis = NormalizeAxis(a, x.shape().size(), "mean");
    if (!seen[axis]) count *= x.shape()[axis];
    seen[axis] = true;
  }
  if (count == 0) throw DimensionError("mean over an empty axis");
  return Scale(Sum(x, std::move(axes), keepdim), 1.0 / static_cast<double>(count));
}

template <typename T>
Var<T> MatMul(Var<T> a, Var<T> b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2 || sa[sa.size() - 1] != sb[sb.size() - 2]) {
    throw DimensionError(fmt::format("matmul: shapes {} and {} do not contract",
                                     ShapeString(sa), ShapeString(sb)));
  }
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa[sa.size() - 1];
  const std::size_t n = sb[sb.size() - 1];
  const Shape batch_a(sa.begin(), sa.end() - 2);
  const Shape batch_b(sb.begin(), sb.end() - 2);
  BroadcastPlan plan = PlanBroadcast(batch_a, batch_b, "matmul");
  std::vector<std::size_t> off_a;
  std::vector<std::size_t> off_b;
  ForEachBroadcast(plan, [&](std::size_t, std::size_t ia, std::size_t ib) {
    off_a.push_back(ia * m * k);
    off_b.push_back(ib * k * n);
  });
  Shape out_shape = plan.out;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<T> out(out_shape);
  const T* pa = a.value().data().data();
  const T* pb = b.value().data().data();
  T* pc = out.data().data();
  for (std::size_t bi = 0; bi < off_a.size(); ++bi) {
    GemmAccumulate(pa + off_a[bi], pb + off_b[bi], pc + bi * m * n, m, k, n);
  }
  return a.graph->Record(
      "matmul", std::move(out), {a, b},
      [a, b, off_a, off_b, m, k, n](Graph<T>& g, const Tensor<T>&,
                                    const Tensor<T>& gy) {
        const T* pa = a.value().data().data();
        const T* pb = b.value().data().data();
        const T* pg = gy.data().data();
        if (g.requires_grad(a)) {
          T* ga = g.GradBuffer(a).data().data();
          for (std::size_t bi = 0; bi < off_a.size(); ++bi)
            GemmAccumulateBt(pg + bi * m * n, pb + off_b[bi], ga + off_a[bi], m,
                             n, k);
        }
        if (g.requires_grad(b)) {
          T* gb = g.GradBuffer(b).data().data();
          for (std::size_t bi = 0; bi < off_a.size(); ++bi)
            GemmAccumulateAt(pa + off_a[bi], pg + bi * m * n, gb + off_b[bi], m,
                             k, n);
        }
      });
}

template <typename T>
Var<T> Linear(Var<T> x, Var<T> weight, Var<T> bias) {
  if (weight.shape().size() != 2 || bias.shape().size() != 1 ||
      bias.shape()[0] != weight.shape()[0]) {
    throw DimensionError(fmt::format("linear: weight {} with bias {}",
                                     ShapeString(weight.shape()),
                                     ShapeString(bias.shape())));
  }
  if (x.shape().size() == 1) {
    Var<T> row = Reshape(x, Shape{1, x.shape()[0]});
    Var<T> y = Add(MatMul(row, Transpose(weight, 0, 1)), bias);
    return Reshape(y, Shape{weight.shape()[0]});
  }
  return Add(MatMul(x, Transpose(weight, 0, 1)), bias);
}

template <typename T>
Var<T> Reshape(Var<T> x, Shape shape) {
  if (NumElements(shape) != x.value().size()) {
    throw DimensionError(fmt::format("reshape: {} to {}",
                                     ShapeString(x.shape()), ShapeString(shape)));
  }
  return x.graph->Record(
      "reshape", x.value().Reshaped(std::move(shape)), {x},
      [x](Graph<T>& g, const Tensor<T>&, const Tensor<T>& gy) {
        auto& gx = g.GradBuffer(x);
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
      });
}

template <typename T>
Var<T> Permute(Var<T> x, std::vector<std::size_t> perm) {
  Tensor<T> out = sidenet::Permute(x.value(), perm);
  std::vector<std::size_t> inverse(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inverse[perm[i]] = i;
  return x.graph->Record(
      "permute", std::move(out), {x},
      [x, inverse](Graph<T>& g, const Tensor<T>&, const Tensor<T>& gy) {
        Tensor<T> back = sidenet::Permute(gy, inverse);
        auto& gx = g.GradBuffer(x);
        for (std::size_t i = 0; i < back.size(); ++i) gx[i] += back[i];
      });
}

template <typename T>
Var<T> Transpose(Var<T> x, int axis_a, int axis_b) {
  const std::size_t rank = x.shape().size();
  std::vector<std::size_t> perm(rank);
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[NormalizeAxis(axis_a, rank, "transpose")],
            perm[NormalizeAxis(axis_b, rank, "transpose")]);
  return Permute(x, std::move(perm));
}

template <typename T>
Var<T> Concat(std::span<const Var<T>> parts, int axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  const std::size_t ax = NormalizeAxis(axis, first.size(), "concat");
  Shape out_shape = first;
  out_shape[ax] = 0;
  for (const Var<T>& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) {
      if (i != ax && s[i] != first[i]) ok = false;
    }
    if (!ok) {
      throw DimensionError(fmt::format("concat: {} does not match {} off axis {}",
                                       ShapeString(s), ShapeString(first), ax));
    }
    out_shape[ax] += s[ax];
  }
  const AxisSplit split = SplitAt(out_shape, ax);
  Tensor<T> out(out_shape);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Var<T>& p : parts) {
    offsets.push_back(offset);
    const std::size_t width = p.shape()[ax] * split.inner;
    const Tensor<T>& v = p.value();
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(v.data().data() + o * width, width,
                  out.data().data() + o * split.extent * split.inner + offset);
    }
    offset += width;
  }
  std::vector<Var<T>> inputs(parts.begin(), parts.end());
  return parts[0].graph->Record(
      "concat", std::move(out), parts,
      [inputs, offsets, split, ax](Graph<T>& g, const Tensor<T>&,
                                   const Tensor<T>& gy) {
        for (std::size_t k = 0; k < inputs.size(); ++k) {
          if (!g.requires_grad(inputs[k])) continue;
          const std::size_t width = inputs[k].shape()[ax] * split.inner;
          auto& gx = g.GradBuffer(inputs[k]);
          for (std::size_t o = 0; o < split.outer; ++o) {
            const T* src =
                gy.data().data() + o * split.extent * split.inner + offsets[k];
            T* dst = gx.data().data() + o * width;
            for (std::size_t i = 0; i < width; ++i) dst[i] += src[i];
          }
        }
      });
}

template <typename T>
Var<T> Slice(Var<T> x, int axis, std::size_t begin, std::size_t end) {
  const Shape& in = x.shape();
  const std::size_t ax = NormalizeAxis(axis, in.size(), "slice");
  if (begin > end || end > in[ax]) {
    throw DimensionError(fmt::format("slice [{}, {}) of axis {} in {}", begin,
                                     end, ax, ShapeString(in)));
  }
  const AxisSplit split = SplitAt(in, ax);
  Shape out_shape = in;
  out_shape[ax] = end - begin;
  const std::size_t width = (end - begin) * split.inner;
  Tensor<T> out(out_shape);
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::copy_n(x.value().data().data() + (o * split.extent + begin) * split.inner,
                width, out.data().data() + o * width);
  }
  return x.graph->Record(
      "slice", std::move(out), {x},
      [x, split, begin, width](Graph<T>& g, const Tensor<T>&,
                               const Tensor<T>& gy) {
        auto& gx = g.GradBuffer(x);
        for (std::size_t o = 0; o < split.outer; ++o) {
          T* dst = gx.data().data() + (o * split.extent + begin) * split.inner;
          const T* src = gy.data().data() + o * width;
          for (std::size_t i = 0; i < width; ++i) dst[i] += src[i];
        }
      });
}

template <typename T>
Var<T> Softmax(Var<T> x, int axis) {
  const std::size_t ax = NormalizeAxis(axis, x.shape().size(), "softmax");
  const AxisSplit s = SplitAt(x.shape(), ax);
  const Tensor<T>& vx = x.value();
  Tensor<T> out(vx.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      T mx = vx[base];
      for (std::size_t j = 1; j < s.extent; ++j)
        mx = std::max(mx, vx[base + j * s.inner]);
      double denom = 0.0;
      for (std::size_t j = 0; j < s.extent; ++j) {
        const T e = std::exp(vx[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        denom += e;
      }
      const T inv = static_cast<T>(1.0 / denom);
      for (std::size_t j = 0; j < s.extent; ++j) out[base + j * s.inner] *= inv;
    }
  }
  return x.graph->Record(
      "softmax", std::move(out), {x},
      [x, s](Graph<T>& g, const Tensor<T>& y, const Tensor<T>& gy) {
        auto& gx = g.GradBuffer(x);
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.extent * s.inner + in;
            double dot = 0.0;
            for (std::size_t j = 0; j < s.extent; ++j) {
              const std::size_t i = base + j * s.inner;
              dot += y[i] * gy[i];
            }
            for (std::size_t j = 0; j < s.extent; ++j) {
              const std::size_t i = base + j * s.inner;
              gx[i] += y[i] * (gy[i] - static_cast<T>(dot));
            }
          }
        }
      });
}

template <typename T>
Var<T> LogSoftmax(Var<T> x, int axis) {
  const std::size_t ax = NormalizeAxis(axis, x.shape().size(), "log_softmax");
  const AxisSplit s = SplitAt(x.shape(), ax);
  const Tensor<T>& vx = x.value();
  Tensor<T> out(vx.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      T mx = vx[base];
      for (std::size_t j = 1; j < s.extent; ++j)
        mx = std::max(mx, vx[base + j * s.inner]);
      double denom = 0.0;
      for (std::size_t j = 0; j < s.extent; ++j)
        denom += std::exp(static_cast<double>(vx[base + j * s.inner] - mx));
      const T log_denom = static_cast<T>(std::log(denom));
      for (std::size_t j = 0; j < s.extent; ++j) {
        const std::size_t i = base + j * s.inner;
        out[i] = vx[i] - mx - log_denom;
      }
    }
  }
  return x.graph->Record(
      "log_softmax", std::move(out), {x},
      [x, s](Graph<T>& g, const Tensor<T>& y, const Tensor<T>& gy) {
        auto& gx = g.GradBuffer(x);
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.extent * s.inner + in;
            double total = 0.0;
            for (std::size_t j = 0; j < s.extent; ++j)
              total += gy[base + j * s.inner];
            for (std::size_t j = 0; j < s.extent; ++j) {
              const std::size_t i = base + j * s.inner;
              gx[i] += gy[i] - std::exp(y[i]) * static_cast<T>(total);
            }
          }
        }
      });
}

template <typename T>
Var<T> LayerNorm(Var<T> x, Var<T> gain, Var<T> bias, double eps) {
  const Shape& sx = x.shape();
  if (sx.empty() || sx.back() == 0) {
    throw DimensionError(
        fmt::format("layer_norm: empty normalization axis in {}", ShapeString(sx)));
  }
  const std::size_t n = sx.back();
  if (gain.shape() != Shape{n} || bias.shape() != Shape{n}) {
    throw DimensionError(fmt::format(
        "layer_norm: gain {} / bias {} against normalized extent {}",
        ShapeString(gain.shape()), ShapeString(bias.shape()), n));
  }
  const std::size_t rows = x.value().size() / n;
  const Tensor<T>& vx = x.value();
  const Tensor<T>& vg = gain.value();
  const Tensor<T>& vb = bias.value();
  Tensor<T> xhat(sx);
  std::vector<T> rstd(rows);
  Tensor<T> out(sx);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = vx.data().data() + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    rstd[r] = static_cast<T>(1.0 / std::sqrt(var + eps));
    for (std::size_t j = 0; j < n; ++j) {
      const T h = static_cast<T>((row[j] - mean) * rstd[r]);
      xhat[r * n + j] = h;
      out[r * n + j] = h * vg[j] + vb[j];
    }
  }
  return x.graph->Record(
      "layer_norm", std::move(out), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), rstd = std::move(rstd), rows, n](
          Graph<T>& g, const Tensor<T>&, const Tensor<T>& gy) {
        const Tensor<T>& vg = gain.value();
        if (g.requires_grad(gain)) {
          auto& gg = g.GradBuffer(gain);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j)
              gg[j] += gy[r * n + j] * xhat[r * n + j];
        }
        if (g.requires_grad(bias)) {
          auto& gb = g.GradBuffer(bias);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) gb[j] += gy[r * n + j];
        }
        if (g.requires_grad(x)) {
          auto& gx = g.GradBuffer(x);
          std::vector<T> dxhat(n);
          for (std::size_t r = 0; r < rows; ++r) {
            double sum_d = 0.0;
            double sum_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              dxhat[j] = gy[r * n + j] * vg[j];
              sum_d += dxhat[j];
              sum_dx += dxhat[j] * xhat[r * n + j];
            }
            const double inv_n = 1.0 / static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) {
              gx[r * n + j] += static_cast<T>(
                  rstd[r] * (dxhat[j] - sum_d * inv_n -
                             xhat[r * n + j] * sum_dx * inv_n));
            }
          }
        }
      });
}

template <typename T>
Var<T> L2Normalize(Var<T> x) {
  const Shape& sx = x.shape();
  if (sx.empty() || sx.back() == 0) {
    throw DimensionError("l2_normalize: empty vector axis");
  }
  const std::size_t n = sx.back();
  const std::size_t rows = x.value().size() / n;
  const Tensor<T>& vx = x.value();
  Tensor<T> out(sx);
  std::vector<T> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) ss += double(vx[r * n + j]) * vx[r * n + j];
    const double norm = std::sqrt(ss);
    if (norm < 1e-12) {
      throw NumericalError(fmt::format(
          "degenerate vector: row {} has L2 norm {} below 1e-12", r, norm));
    }
    norms[r] = static_cast<T>(norm);
    for (std::size_t j = 0; j < n; ++j)
      out[r * n + j] = static_cast<T>(vx[r * n + j] / norm);
  }
  return x.graph->Record(
      "l2_normalize", std::move(out), {x},
      [x, norms = std::move(norms), rows, n](Graph<T>& g, const Tensor<T>& y,
                                             const Tensor<T>& gy) {
        auto& gx = g.GradBuffer(x);
        for (std::size_t r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += y[r * n + j] * gy[r * n + j];
          for (std::size_t j = 0; j < n; ++j) {
            gx[r * n + j] +=
                (gy[r * n + j] - y[r * n + j] * static_cast<T>(dot)) / norms[r];
          }
        }
      });
}

template <typename T>
Var<T> CosineSimilarity(Var<T> a, Var<T> b) {
  if (a.shape().size() != 1 || a.shape() != b.shape()) {
    throw DimensionError(fmt::format("cosine_similarity: {} vs {}",
                                     ShapeString(a.shape()),
                                     ShapeString(b.shape())));
  }
  return Sum(Mul(L2Normalize(a), L2Normalize(b)));
}

template <typename T>
Var<T> Conv2d(Var<T> x, Var<T> kernel, Var<T> bias, std::size_t padding,
              std::size_t stride) {
  const Shape& sx = x.shape();
  const Shape& sk = kernel.shape();
  if (sx.size() != 3 && sx.size() != 4) {
    throw DimensionError(
        fmt::format("conv2d: input {} is not [C,H,W] or [B,C,H,W]", ShapeString(sx)));
  }
  const bool batched = sx.size() == 4;
  const std::size_t batch = batched ? sx[0] : 1;
  const std::size_t cin = sx[sx.size() - 3];
  const std::size_t h = sx[sx.size() - 2];
  const std::size_t w = sx[sx.size() - 1];
  if (sk.size() != 4 || sk[1] != cin || sk[2] != sk[3]) {
    throw DimensionError(fmt::format("conv2d: kernel {} against input {}",
                                     ShapeString(sk), ShapeString(sx)));
  }
  const std::size_t cout = sk[0];
  const std::size_t k = sk[2];
  if (k % 2 == 0) throw ConfigError(fmt::format("conv2d: kernel size {} is even", k));
  if (bias.shape() != Shape{cout}) {
    throw DimensionError(fmt::format("conv2d: bias {} for {} output channels",
                                     ShapeString(bias.shape()), cout));
  }
  const std::size_t oh = ConvOutputExtent(h, k, padding, stride);
  const std::size_t ow = ConvOutputExtent(w, k, padding, stride);
  Shape out_shape = batched ? Shape{batch, cout, oh, ow} : Shape{cout, oh, ow};

  struct Geometry {
    std::size_t batch, cin, h, w, cout, k, oh, ow, padding, stride;
  };
  const Geometry geo{batch, cin, h, w, cout, k, oh, ow, padding, stride};

  // Visits every (output pixel, input pixel, weight) triple that contributes,
  // as flat offsets within one (batch, cout, cin) plane combination.
  auto sweep = [geo](auto&& f) {
    for (std::size_t ky = 0; ky < geo.k; ++ky) {
      for (std::size_t kx = 0; kx < geo.k; ++kx) {
        for (std::size_t oy = 0; oy < geo.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * geo.stride + ky) -
                                    static_cast<std::ptrdiff_t>(geo.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(geo.h)) continue;
          // Valid ox satisfies 0 <= ox*stride + kx - padding < w.
          for (std::size_t ox = 0; ox < geo.ow; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * geo.stride + kx) -
                static_cast<std::ptrdiff_t>(geo.padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(geo.w)) continue;
            f(ky * geo.k + kx, oy * geo.ow + ox,
              static_cast<std::size_t>(iy) * geo.w + static_cast<std::size_t>(ix));
          }
        }
      }
    }
  };

  const T* px = x.value().data().data();
  const T* pk = kernel.value().data().data();
  const T* pb = bias.value().data().data();
  Tensor<T> out(out_shape);
  T* po = out.data().data();
  const std::size_t in_plane = h * w;
  const std::size_t out_plane = oh * ow;
  const std::size_t kk = k * k;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t co = 0; co < cout; ++co) {
      T* dst = po + (b * cout + co) * out_plane;
      std::fill_n(dst, out_plane, pb[co]);
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const T* src = px + (b * cin + ci) * in_plane;
        const T* wk = pk + (co * cin + ci) * kk;
        sweep([&](std::size_t wi, std::size_t oi, std::size_t ii) {
          dst[oi] += wk[wi] * src[ii];
        });
      }
    }
  }
  return x.graph->Record(
      "conv2d", std::move(out), {x, kernel, bias},
      [x, kernel, bias, geo, sweep](Graph<T>& g, const Tensor<T>&,
                                    const Tensor<T>& gy) {
        const T* px = x.value().data().data();
        const T* pk = kernel.value().data().data();
        const T* pg = gy.data().data();
        T* gx = g.requires_grad(x) ? g.GradBuffer(x).data().data() : nullptr;
        T* gk = g.requires_grad(kernel) ? g.GradBuffer(kernel).data().data()
                                        : nullptr;
        T* gb =
            g.requires_grad(bias) ? g.GradBuffer(bias).data().data() : nullptr;
        const std::size_t in_plane = geo.h * geo.w;
        const std::size_t out_plane = geo.oh * geo.ow;
        const std::size_t kk = geo.k * geo.k;
        for (std::size_t b = 0; b < geo.batch; ++b) {
          for (std::size_t co = 0; co < geo.cout; ++co) {
            const T* go = pg + (b * geo.cout + co) * out_plane;
            if (gb) {
              T acc{0};
              for (std::size_t i = 0; i < out_plane; ++i) acc += go[i];
              gb[co] += acc;
            }
            for (std::size_t ci = 0; ci < geo.cin; ++ci) {
              const std::size_t in_off = (b * geo.cin + ci) * in_plane;
              const std::size_t k_off = (co * geo.cin + ci) * kk;
              sweep([&](std::size_t wi, std::size_t oi, std::size_t ii) {
                if (gx) gx[in_off + ii] += pk[k_off + wi] * go[oi];
                if (gk) gk[k_off + wi] += px[in_off + ii] * go[oi];
              });
            }
          }
        }
      });
}

template <typename T>
Var<T> ScaledDotAttention(Var<T> q, Var<T> k, Var<T> v) {
  const Shape& sq = q.shape();
  const Shape& sk = k.shape();
  const Shape& sv = v.shape();
  if (sq.size() < 2 || sk.size() < 2 || sv.size() < 2 ||
      sq.back() != sk.back() || sk[sk.size() - 2] != sv[sv.size() - 2]) {
    throw DimensionError(fmt::format("attention: q {}, k {}, v {}",
                                     ShapeString(sq), ShapeString(sk),
                                     ShapeString(sv)));
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(sq.back()));
  Var<T> scores = Scale(MatMul(q, Transpose(k, -1, -2)), scale);
  return MatMul(Softmax(scores, -1), v);
}

#define SIDENET_INSTANTIATE(T)                                              \
  template Var<T> Add(Var<T>, Var<T>);                                      \
  template Var<T> Sub(Var<T>, Var<T>);                                      \
  template Var<T> Mul(Var<T>, Var<T>);                                      \
  template Var<T> Div(Var<T>, Var<T>);                                      \
  template Var<T> Neg(Var<T>);                                              \
  template Var<T> Scale(Var<T>, double);                                    \
  template Var<T> AddScalar(Var<T>, double);                                \
  template Var<T> Exp(Var<T>);                                              \
  template Var<T> Log(Var<T>);                                              \
  template Var<T> Square(Var<T>);                                           \
  template Var<T> PowScalar(Var<T>, double);                                \
  template Var<T> Sigmoid(Var<T>);                                          \
  template Var<T> LogSigmoid(Var<T>);                                       \
  template Var<T> Gelu(Var<T>);                                             \
  template Var<T> Sum(Var<T>);                                              \
  template Var<T> Mean(Var<T>);                                             \
  template Var<T> Sum(Var<T>, std::vector<int>, bool);                      \
  template Var<T> Mean(Var<T>, std::vector<int>, bool);                     \
  template Var<T> MatMul(Var<T>, Var<T>);                                   \
  template Var<T> Linear(Var<T>, Var<T>, Var<T>);                           \
  template Var<T> Reshape(Var<T>, Shape);                                   \
  template Var<T> Permute(Var<T>, std::vector<std::size_t>);                \
  template Var<T> Transpose(Var<T>, int, int);                              \
  template Var<T> Concat(std::span<const Var<T>>, int);                     \
  template Var<T> Slice(Var<T>, int, std::size_t, std::size_t);             \
  template Var<T> Softmax(Var<T>, int);                                     \
  template Var<T> LogSoftmax(Var<T>, int);                                  \
  template Var<T> LayerNorm(Var<T>, Var<T>, Var<T>, double);                \
  template Var<T> L2Normalize(Var<T>);                                      \
  template Var<T> CosineSimilarity(Var<T>, Var<T>);                         \
  template Var<T> Conv2d(Var<T>, Var<T>, Var<T>, std::size_t, std::size_t); \
  template Var<T> ScaledDotAttention(Var<T>, Var<T>, Var<T>);

SIDENET_INSTANTIATE(float)
SIDENET_INSTANTIATE(double)

#undef SIDENET_INSTANTIATE

}  // namespace sidenet::ad
