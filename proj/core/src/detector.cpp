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

#include "sidenet/detector.h"

#include <cmath>

#include <fmt/format.h>

#include "parse_util.h"
#include "sidenet/error.h"
#include "sidenet/rng.h"

namespace sidenet {
namespace {

using detail::ParseAttributeList;
using detail::ParseBool;
using detail::ParseCount;
using detail::ParseReal;

std::string QueryName(std::size_t l) { return fmt::format("spatial/layer{}/queries", l); }

std::string TemporalPrefix(const DetectorConfig& c, std::size_t l) {
  return c.share_temporal_weights ? std::string("temporal/shared/")
                                  : fmt::format("temporal/layer{}/", l);
}

constexpr const char* kTemporalLeaves[] = {"C1", "C1_bias", "W", "W_bias", "C2", "C2_bias"};

std::string HumanCount(std::size_t n) {
  return fmt::format("{:.1f}K", static_cast<double>(n) / 1000.0);
}

std::string Grouped(std::size_t n) {
  std::string digits = std::to_string(n);
  for (int i = static_cast<int>(digits.size()) - 3; i > 0; i -= 3) digits.insert(i, ",");
  return digits;
}

}  // namespace

const char* AggregationName(Aggregation a) { return a == Aggregation::kSum ? "sum" : "mean"; }

TemporalGeometry DetectorConfig::temporal_geometry() const {
  TemporalGeometry geo;
  geo.channels = gamma_t.size() * heads;
  geo.frames = frames;
  geo.patches = patches;
  geo.kernel = conv_kernel;
  geo.padding = conv_padding;
  geo.stride = conv_stride;
  return geo;
}

void DetectorConfig::Validate() const {
  if (layers == 0 || heads == 0 || head_dim == 0 || patches == 0 || frames == 0) {
    throw ConfigError("detector config has a zero extent");
  }
  if (!spatial && !temporal) throw ConfigError("both spatial and temporal modules are disabled");
  if (spatial) {
    if (queries == 0) throw ConfigError("spatial module needs at least one query");
    if (fcg && queries > kFacialPartCount) {
      throw ConfigError(fmt::format("facial guidance binds at most 4 queries, got {}", queries));
    }
    if (!(tau > 0.0)) throw ConfigError(fmt::format("tau must be positive, got {}", tau));
  }
  if (!(w_fcg >= 0.0)) throw ConfigError(fmt::format("w_fcg must be >= 0, got {}", w_fcg));
  if (!(focal_gamma >= 0.0)) throw ConfigError("focal_gamma must be >= 0");
  if (temporal) temporal_geometry().Validate();
}

DetectorConfig DetectorConfig::ForEncoder(const EncoderConfig& encoder, std::size_t frames) {
  DetectorConfig c;
  c.layers = encoder.layers;
  c.heads = encoder.heads;
  c.head_dim = encoder.head_dim;
  c.patches = encoder.patches();
  c.frames = frames;
  return c;
}

DetectorConfig DetectorConfig::VitL14() {
  DetectorConfig c;
  c.layers = 24;
  c.heads = 16;
  c.head_dim = 64;
  c.patches = 256;
  c.frames = 10;
  return c;
}

std::map<std::string, std::string> DetectorConfig::ToMap() const {
  const std::string gt = detail::AttributeListString(gamma_t);
  return {
      {"layers", std::to_string(layers)},
      {"heads", std::to_string(heads)},
      {"head_dim", std::to_string(head_dim)},
      {"patches", std::to_string(patches)},
      {"frames", std::to_string(frames)},
      {"queries", std::to_string(queries)},
      {"spatial", spatial ? "true" : "false"},
      {"temporal", temporal ? "true" : "false"},
      {"fcg", fcg ? "true" : "false"},
      {"tau", fmt::format("{}", tau)},
      {"fcg_sign", fcg_sign == FcgSign::kNegativeLog ? "negative_log" : "as_printed"},
      {"gamma_s", AttributeName(gamma_s)},
      {"gamma_t", gt},
      {"share_temporal_weights", share_temporal_weights ? "true" : "false"},
      {"aggregation", AggregationName(aggregation)},
      {"conv_kernel", std::to_string(conv_kernel)},
      {"conv_padding", std::to_string(conv_padding)},
      {"conv_stride", std::to_string(conv_stride)},
      {"focal_gamma", fmt::format("{}", focal_gamma)},
      {"w_fcg", fmt::format("{}", w_fcg)},
  };
}

DetectorConfig DetectorConfig::FromMap(const std::map<std::string, std::string>& values) {
  DetectorConfig c;
  for (const auto& [key, v] : values) {
    if (key == "layers") c.layers = ParseCount(key, v);
    else if (key == "heads") c.heads = ParseCount(key, v);
    else if (key == "head_dim") c.head_dim = ParseCount(key, v);
    else if (key == "patches") c.patches = ParseCount(key, v);
    else if (key == "frames") c.frames = ParseCount(key, v);
    else if (key == "queries") c.queries = ParseCount(key, v);
    else if (key == "spatial") c.spatial = ParseBool(key, v);
    else if (key == "temporal") c.temporal = ParseBool(key, v);
    else if (key == "fcg") c.fcg = ParseBool(key, v);
    else if (key == "tau") c.tau = ParseReal(key, v);
    else if (key == "fcg_sign") {
      if (v == "negative_log") c.fcg_sign = FcgSign::kNegativeLog;
      else if (v == "as_printed") c.fcg_sign = FcgSign::kAsPrinted;
      else throw ConfigError(fmt::format("fcg_sign: unknown value '{}'", v));
    } else if (key == "gamma_s") c.gamma_s = ParseAttribute(v);
    else if (key == "gamma_t") c.gamma_t = ParseAttributeList(v);
    else if (key == "share_temporal_weights") c.share_temporal_weights = ParseBool(key, v);
    else if (key == "aggregation") {
      if (v == "mean") c.aggregation = Aggregation::kMean;
      else if (v == "sum") c.aggregation = Aggregation::kSum;
      else throw ConfigError(fmt::format("aggregation: unknown value '{}'", v));
    } else if (key == "conv_kernel") c.conv_kernel = ParseCount(key, v);
    else if (key == "conv_padding") c.conv_padding = ParseCount(key, v);
    else if (key == "conv_stride") c.conv_stride = ParseCount(key, v);
    else if (key == "focal_gamma") c.focal_gamma = ParseReal(key, v);
    else if (key == "w_fcg") c.w_fcg = ParseReal(key, v);
    else throw ConfigError(fmt::format("unknown detector setting '{}'", key));
  }
  return c;
}

std::uint64_t DetectorConfig::Hash() const {
  std::string text;
  for (const auto& [k, v] : ToMap()) text += k + "=" + v + "\n";
  return Fnv1a64(text);
}

std::vector<std::pair<std::string, Shape>> DetectorParameterShapes(const DetectorConfig& config) {
  config.Validate();
  std::vector<std::pair<std::string, Shape>> out;
  const std::size_t width = config.width();
  const std::size_t p = config.patches;
  if (config.spatial) {
    for (std::size_t l = 0; l < config.layers; ++l) {
      out.emplace_back(QueryName(l), Shape{config.queries, width});
    }
  }
  if (config.temporal) {
    const auto shapes = TemporalParameterShapes(config.temporal_geometry());
    const std::size_t groups = config.share_temporal_weights ? 1 : config.layers;
    for (std::size_t l = 0; l < groups; ++l) {
      for (std::size_t i = 0; i < shapes.size(); ++i) {
        out.emplace_back(TemporalPrefix(config, l) + kTemporalLeaves[i], shapes[i]);
      }
    }
    out.emplace_back("head/ln_t/gain", Shape{p});
    out.emplace_back("head/ln_t/bias", Shape{p});
    out.emplace_back("head/fc_t/weight", Shape{1, p});
    out.emplace_back("head/fc_t/bias", Shape{1});
  }
  if (config.spatial) {
    out.emplace_back("head/ln_s/gain", Shape{width});
    out.emplace_back("head/ln_s/bias", Shape{width});
    out.emplace_back("head/fc_s/weight", Shape{1, width});
    out.emplace_back("head/fc_s/bias", Shape{1});
  }
  if (config.spatial && config.temporal) {
    out.emplace_back("head/fc_st/weight", Shape{1, p + width});
    out.emplace_back("head/fc_st/bias", Shape{1});
  }
  return out;
}

std::size_t AnalyticParameterCount(const DetectorConfig& c) {
  c.Validate();
  const std::size_t width = c.width(), p = c.patches, k2 = c.conv_kernel * c.conv_kernel;
  std::size_t n = 0;
  if (c.spatial) n += c.layers * c.queries * width + 2 * width + width + 1;
  if (c.temporal) {
    const std::size_t tp = c.temporal_geometry().reduced_frames();
    const std::size_t tt = tp * tp;
    const std::size_t per_group = (c.gamma_t.size() * c.heads * k2 + 1) + (tt * tt + tt) +
                                  (tt * k2 + 1);
    n += (c.share_temporal_weights ? 1 : c.layers) * per_group + 2 * p + p + 1;
  }
  if (c.spatial && c.temporal) n += p + width + 1;
  return n;
}

ParamSet InitDetectorParams(const DetectorConfig& config, const FacialPartAttributes* phi,
                            std::uint64_t seed) {
  const auto shapes = DetectorParameterShapes(config);
  Rng rng(seed);
  std::vector<TensorF> queries;
  if (config.spatial) {
    Rng qrng = rng.Fork(1);
    queries = InitSpatialQueries(config.fcg ? phi : nullptr, config.layers, config.queries,
                                 config.width(), qrng);
  }
  Rng wrng = rng.Fork(2);
  ParamSet params;
  std::size_t next_query = 0;
  for (const auto& [name, shape] : shapes) {
    const std::string leaf = name.substr(name.rfind('/') + 1);
    if (leaf == "queries") {
      params.Add(name, queries.at(next_query++));
    } else if (leaf == "gain") {
      params.Add(name, TensorF::Full(shape, 1.f));
    } else if (leaf == "bias" || leaf.ends_with("_bias")) {
      params.Add(name, TensorF(shape));
    } else {
      // Centered uniform with fan-in scaling.
      std::size_t fan_in = 1;
      for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      TensorF t(shape);
      for (float& v : t.data()) v = static_cast<float>(wrng.Uniform(-bound, bound));
      params.Add(name, std::move(t));
    }
  }
  return params;
}

template <typename T>
BoundParams<T> BindParams(ad::Graph<T>& g, const ParamSet& params, bool trainable) {
  BoundParams<T> b;
  b.names = &params;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (trainable) {
      b.vars.push_back(g.Parameter(params.value(i).Cast<T>()));
    } else {
      b.vars.push_back(g.Input(params.value(i)));
    }
  }
  return b;
}

template <typename T>
ad::Var<T> Aggregate(std::span<const ad::Var<T>> embeddings, Aggregation mode) {
  if (embeddings.empty()) throw DimensionError("aggregate: no layer embeddings");
  ad::Var<T> acc = embeddings[0];
  for (std::size_t l = 1; l < embeddings.size(); ++l) {
    if (embeddings[l].shape() != embeddings[0].shape()) {
      throw DimensionError(fmt::format("aggregate: layer {} has shape {}, layer 0 has {}", l,
                                       ShapeString(embeddings[l].shape()),
                                       ShapeString(embeddings[0].shape())));
    }
    acc = ad::Add(acc, embeddings[l]);
  }
  if (mode == Aggregation::kSum) return acc;
  return ad::Scale(acc, 1.0 / static_cast<double>(embeddings.size()));
}

template <typename T>
DetectorOutput<T> DetectorForward(ad::Graph<T>& g, const DetectorConfig& config,
                                  const BoundParams<T>& params,
                                  const std::vector<LayerAttributes>& taps) {
  if (taps.size() != config.layers) {
    throw DimensionError(fmt::format("detector expects {} layers of taps, got {}",
                                     config.layers, taps.size()));
  }
  const TemporalGeometry geo = config.temporal_geometry();
  DetectorOutput<T> out;
  std::vector<ad::Var<T>> e_s, e_t;
  for (std::size_t l = 0; l < config.layers; ++l) {
    const Shape expect{config.frames, config.patches, config.heads, config.head_dim};
    if (taps[l].query.shape() != expect) {
      throw DimensionError(fmt::format("layer {} taps have shape {}, detector expects {}", l,
                                       ShapeString(taps[l].query.shape()),
                                       ShapeString(expect)));
    }
    if (config.spatial) {
      auto r = SpatialForward(g, params[QueryName(l)], taps[l], config.gamma_s);
      out.spatial_m1.push_back(r.m1);
      e_s.push_back(r.embedding);
    }
    if (config.temporal) {
      const std::string pre = TemporalPrefix(config, l);
      TemporalWeights<T> w{params[pre + "C1"], params[pre + "C1_bias"], params[pre + "W"],
                           params[pre + "W_bias"], params[pre + "C2"], params[pre + "C2_bias"]};
      auto r = TemporalForward(g, taps[l], config.gamma_t, w, geo);
      out.temporal_m1.push_back(r.m1);
      e_t.push_back(r.embedding);
    }
  }

  auto head = [&](ad::Var<T> x, const char* fc) {
    const std::size_t n = x.shape().at(0);
    auto y = ad::Linear(ad::Reshape(x, {1, n}), params[fmt::format("head/{}/weight", fc)],
                        params[fmt::format("head/{}/bias", fc)]);
    return ad::Reshape(y, {});
  };
  std::optional<ad::Var<T>> ln_t, ln_s;
  if (config.temporal) {
    out.e_t = Aggregate(std::span<const ad::Var<T>>(e_t), config.aggregation);
    ln_t = ad::LayerNorm(*out.e_t, params["head/ln_t/gain"], params["head/ln_t/bias"]);
    out.logit_t = head(*ln_t, "fc_t");
  }
  if (config.spatial) {
    out.e_s = Aggregate(std::span<const ad::Var<T>>(e_s), config.aggregation);
    ln_s = ad::LayerNorm(*out.e_s, params["head/ln_s/gain"], params["head/ln_s/bias"]);
    out.logit_s = head(*ln_s, "fc_s");
  }
  if (ln_t && ln_s) {
    std::vector<ad::Var<T>> parts{*ln_t, *ln_s};
    out.logit_st = head(ad::Concat(std::span<const ad::Var<T>>(parts), 0), "fc_st");
  }

  std::vector<ad::Var<T>> probs;
  for (const auto& logit : {out.logit_t, out.logit_s, out.logit_st}) {
    if (logit) probs.push_back(ad::Reshape(ad::Sigmoid(*logit), {1}));
  }
  out.score = ad::Mean(ad::Concat(std::span<const ad::Var<T>>(probs), 0));
  return out;
}

template <typename T>
ad::Var<T> FocalLoss(ad::Var<T> logit, int label, double gamma) {
  if (label != 0 && label != 1) throw DataError(fmt::format("label must be 0 or 1, got {}", label));
  auto z = ad::Scale(logit, label == 1 ? 1.0 : -1.0);
  auto log_pt = ad::LogSigmoid(z);
  if (gamma == 0.0) return ad::Neg(log_pt);
  auto modulator = ad::PowScalar(ad::Sigmoid(ad::Neg(z)), gamma);
  return ad::Neg(ad::Mul(modulator, log_pt));
}

template <typename T>
ad::Var<T> DetectorFcgLoss(ad::Graph<T>& g, const DetectorConfig& config,
                           const BoundParams<T>& params, const FacialPartAttributes& phi) {
  if (phi.phi.size() != config.layers) {
    throw DimensionError(fmt::format("phi covers {} layers, detector has {}", phi.phi.size(),
                                     config.layers));
  }
  std::vector<ad::Var<T>> qs, ps;
  for (std::size_t l = 0; l < config.layers; ++l) {
    qs.push_back(params[QueryName(l)]);
    ps.push_back(g.Input(phi.phi[l]));
  }
  return FcgLoss(std::span<const ad::Var<T>>(qs), std::span<const ad::Var<T>>(ps), config.tau,
                 config.fcg_sign);
}

template <typename T>
LossTerms<T> TotalLoss(const DetectorOutput<T>& out, int label, double focal_gamma,
                       std::optional<ad::Var<T>> fcg, double w) {
  LossTerms<T> terms;
  std::optional<ad::Var<T>> total;
  auto add = [&](ad::Var<T> v) { total = total ? ad::Add(*total, v) : v; };
  if (out.logit_t) add(*(terms.focal_t = FocalLoss(*out.logit_t, label, focal_gamma)));
  if (out.logit_s) add(*(terms.focal_s = FocalLoss(*out.logit_s, label, focal_gamma)));
  if (out.logit_st) add(*(terms.focal_st = FocalLoss(*out.logit_st, label, focal_gamma)));
  if (fcg) add(ad::Scale(*fcg, w));
  terms.total = *total;
  return terms;
}

ClipScore ScoreClip(const DetectorConfig& config, const ParamSet& params,
                    const std::vector<LayerAttributes>& taps) {
  ad::Graph<float> g;
  auto bound = BindParams(g, params, false);
  auto out = DetectorForward(g, config, bound, taps);
  ClipScore s;
  s.score = out.score.value()[0];
  if (out.logit_t) s.logit_t = out.logit_t->value()[0];
  if (out.logit_s) s.logit_s = out.logit_s->value()[0];
  if (out.logit_st) s.logit_st = out.logit_st->value()[0];
  return s;
}

std::string ParameterReport(const DetectorConfig& config) {
  DetectorConfig per_layer = config;
  per_layer.share_temporal_weights = false;
  DetectorConfig shared = config;
  shared.share_temporal_weights = true;

  const std::size_t runtime = InitDetectorParams(config, nullptr, 0).ElementCount();
  const std::size_t closed = AnalyticParameterCount(config);

  std::string gt;
  for (Attribute a : config.gamma_t) gt += AttributeName(a);
  std::string out;
  out += "trainable parameters (frozen encoder weights excluded)\n";
  out += fmt::format("settings: L={} H={} D={} P={} T={} N={} gamma_t={} spatial={} temporal={}\n",
                     config.layers, config.heads, config.head_dim, config.patches, config.frames,
                     config.queries, gt, config.spatial ? "on" : "off",
                     config.temporal ? "on" : "off");
  for (const auto& [label, c] : {std::pair{"per-layer temporal weights", per_layer},
                                 std::pair{"shared temporal weights", shared}}) {
    const std::size_t n = AnalyticParameterCount(c);
    out += fmt::format("  {:<28} {:>12} ({})\n", label, Grouped(n), HumanCount(n));
  }
  out += "  reference figure: 250.0K\n";
  out += fmt::format("active mode: {}; enumerated {} parameters, closed form {}\n",
                     config.share_temporal_weights ? "shared" : "per-layer", Grouped(runtime),
                     Grouped(closed));
  return out;
}

void WriteDetector(TensorArchive& archive, const DetectorConfig& config, const ParamSet& params) {
  for (const auto& [k, v] : config.ToMap()) archive.metadata()["config/" + k] = v;
  archive.metadata()["config/hash"] = fmt::format("{:016x}", config.Hash());
  for (std::size_t i = 0; i < params.size(); ++i) {
    archive.Put("param/" + params.name(i), params.value(i));
  }
}

DetectorConfig ReadDetectorConfig(const TensorArchive& archive) {
  std::map<std::string, std::string> values;
  for (const auto& [k, v] : archive.metadata()) {
    if (k.starts_with("config/") && k != "config/hash") values[k.substr(7)] = v;
  }
  if (values.empty()) throw DataError("archive holds no detector configuration");
  DetectorConfig c = DetectorConfig::FromMap(values);
  c.Validate();
  return c;
}

ParamSet ReadDetectorParams(const TensorArchive& archive, const DetectorConfig& config) {
  ParamSet params;
  for (const auto& [name, shape] : DetectorParameterShapes(config)) {
    params.Add(name, archive.Get("param/" + name, shape));
  }
  return params;
}

#define SIDENET_INSTANTIATE(T)                                                                \
  template BoundParams<T> BindParams(ad::Graph<T>&, const ParamSet&, bool);                   \
  template ad::Var<T> Aggregate(std::span<const ad::Var<T>>, Aggregation);                    \
  template DetectorOutput<T> DetectorForward(ad::Graph<T>&, const DetectorConfig&,            \
                                             const BoundParams<T>&,                           \
                                             const std::vector<LayerAttributes>&);            \
  template ad::Var<T> FocalLoss(ad::Var<T>, int, double);                                     \
  template ad::Var<T> DetectorFcgLoss(ad::Graph<T>&, const DetectorConfig&,                  \
                                      const BoundParams<T>&, const FacialPartAttributes&);    \
  template LossTerms<T> TotalLoss(const DetectorOutput<T>&, int, double,                      \
                                  std::optional<ad::Var<T>>, double);

SIDENET_INSTANTIATE(float)
SIDENET_INSTANTIATE(double)

#undef SIDENET_INSTANTIATE

}  // namespace sidenet
