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

#include "sidenet/trainer.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>

#include "parse_util.h"
#include "sidenet/error.h"
#include "sidenet/metrics.h"
#include "sidenet/rng.h"

namespace sidenet {

using detail::ExactReal;
using detail::ParseAttributeList;
using detail::ParseBool;
using detail::ParseCount;
using detail::ParseReal;

void TrainConfig::Apply(const std::string& key, const std::string& v) {
  if (key == "seed") seed = ParseCount(key, v);
  else if (key == "lr") lr = ParseReal(key, v);
  else if (key == "beta1") beta1 = ParseReal(key, v);
  else if (key == "beta2") beta2 = ParseReal(key, v);
  else if (key == "weight_decay") weight_decay = ParseReal(key, v);
  else if (key == "w_fcg") w_fcg = ParseReal(key, v);
  else if (key == "focal_gamma") focal_gamma = ParseReal(key, v);
  else if (key == "epochs") epochs = ParseCount(key, v);
  else if (key == "patience") patience = ParseCount(key, v);
  else if (key == "batch_size") batch_size = ParseCount(key, v);
  else if (key == "max_steps") max_steps = ParseCount(key, v);
  else if (key == "tau") tau = ParseReal(key, v);
  else if (key == "fcg_sign") {
    if (v == "negative_log") fcg_sign = FcgSign::kNegativeLog;
    else if (v == "as_printed") fcg_sign = FcgSign::kAsPrinted;
    else throw ConfigError(fmt::format("fcg_sign: unknown value '{}'", v));
  } else if (key == "gamma_s") gamma_s = ParseAttribute(v);
  else if (key == "gamma_set") gamma_set = ParseAttributeList(v);
  else if (key == "queries") queries = ParseCount(key, v);
  else if (key == "spatial") spatial = ParseBool(key, v);
  else if (key == "temporal") temporal = ParseBool(key, v);
  else if (key == "fcg") fcg = ParseBool(key, v);
  else if (key == "share_temporal_weights") share_temporal_weights = ParseBool(key, v);
  else if (key == "aggregation") {
    if (v == "mean") aggregation = Aggregation::kMean;
    else if (v == "sum") aggregation = Aggregation::kSum;
    else throw ConfigError(fmt::format("aggregation: unknown value '{}'", v));
  } else if (key == "dataset_fraction") dataset_fraction = ParseReal(key, v);
  else if (key == "loo_exclusion") loo_exclusion = v;
  else if (key == "frames") frames = ParseCount(key, v);
  else if (key == "fps") fps = ParseReal(key, v);
  else if (key == "clips_per_video") clips_per_video = ParseCount(key, v);
  else if (key == "augment") augment = ParseBool(key, v);
  else if (key == "cache_taps") cache_taps = ParseBool(key, v);
  else if (key == "mining_rounds") mining_rounds = ParseCount(key, v);
  else if (key == "mining_augment") mining_augment = ParseBool(key, v);
  else throw ConfigError(fmt::format("unknown setting '{}'", key));
}

std::map<std::string, std::string> TrainConfig::ToMap() const {
  auto b = [](bool x) { return std::string(x ? "true" : "false"); };
  return {
      {"seed", std::to_string(seed)},
      {"lr", ExactReal(lr)},
      {"beta1", ExactReal(beta1)},
      {"beta2", ExactReal(beta2)},
      {"weight_decay", ExactReal(weight_decay)},
      {"w_fcg", ExactReal(w_fcg)},
      {"focal_gamma", ExactReal(focal_gamma)},
      {"epochs", std::to_string(epochs)},
      {"patience", std::to_string(patience)},
      {"batch_size", std::to_string(batch_size)},
      {"max_steps", std::to_string(max_steps)},
      {"tau", ExactReal(tau)},
      {"fcg_sign", fcg_sign == FcgSign::kNegativeLog ? "negative_log" : "as_printed"},
      {"gamma_s", AttributeName(gamma_s)},
      {"gamma_set", detail::AttributeListString(gamma_set)},
      {"queries", std::to_string(queries)},
      {"spatial", b(spatial)},
      {"temporal", b(temporal)},
      {"fcg", b(fcg)},
      {"share_temporal_weights", b(share_temporal_weights)},
      {"aggregation", AggregationName(aggregation)},
      {"dataset_fraction", ExactReal(dataset_fraction)},
      {"loo_exclusion", loo_exclusion},
      {"frames", std::to_string(frames)},
      {"fps", ExactReal(fps)},
      {"clips_per_video", std::to_string(clips_per_video)},
      {"augment", b(augment)},
      {"cache_taps", b(cache_taps)},
      {"mining_rounds", std::to_string(mining_rounds)},
      {"mining_augment", b(mining_augment)},
  };
}

DetectorConfig TrainConfig::Detector(const EncoderConfig& encoder) const {
  DetectorConfig c = DetectorConfig::ForEncoder(encoder, frames);
  c.queries = queries;
  c.spatial = spatial;
  c.temporal = temporal;
  c.fcg = fcg;
  c.tau = tau;
  c.fcg_sign = fcg_sign;
  c.gamma_s = gamma_s;
  c.gamma_t = gamma_set;
  c.share_temporal_weights = share_temporal_weights;
  c.aggregation = aggregation;
  c.focal_gamma = focal_gamma;
  c.w_fcg = w_fcg;
  return c;
}

AdamWOptions TrainConfig::Optimizer() const {
  AdamWOptions o;
  o.lr = lr;
  o.beta1 = beta1;
  o.beta2 = beta2;
  o.weight_decay = weight_decay;
  return o;
}

TrainConfig ParseTrainConfig(std::string_view text, const std::string& source, TrainConfig base) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  auto trim = [](std::string s) {
    s.erase(0, s.find_first_not_of(" \t\r"));
    s.erase(s.find_last_not_of(" \t\r") + 1);
    return s;
  };
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(fmt::format("{}:{}: expected 'key = value'", source, line_no));
    }
    try {
      base.Apply(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(fmt::format("{}:{}: {}", source, line_no, e.what()));
    }
  }
  return base;
}

TrainConfig LoadTrainConfig(const std::filesystem::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open config file {}", path.string()));
  std::stringstream text;
  text << in.rdbuf();
  return ParseTrainConfig(text.str(), path.string(), std::move(base));
}

bool EarlyStopping::Update(double metric) {
  ++epochs_;
  improved_ = metric > best_;
  if (improved_) {
    best_ = metric;
    best_epoch_ = epochs_;
    bad_epochs_ = 0;
  } else {
    ++bad_epochs_;
  }
  return bad_epochs_ >= patience_;
}

void EarlyStopping::Restore(double best, std::size_t best_epoch, std::size_t epochs,
                            std::size_t bad_epochs) {
  best_ = best;
  best_epoch_ = best_epoch;
  epochs_ = epochs;
  bad_epochs_ = bad_epochs;
  improved_ = false;
}

std::string TrainHistory::ToJson() const {
  nlohmann::json j;
  j["stopped_early"] = stopped_early;
  j["epochs"] = nlohmann::json::array();
  for (const auto& e : epochs) {
    j["epochs"].push_back({{"epoch", e.epoch},
                           {"steps", e.steps},
                           {"loss", e.loss},
                           {"focal_t", e.focal_t},
                           {"focal_s", e.focal_s},
                           {"focal_st", e.focal_st},
                           {"fcg", e.fcg},
                           {"train_auroc", e.train_auroc},
                           {"val_auroc", e.val_auroc},
                           {"val_ap", e.val_ap}});
  }
  return j.dump(1);
}

TrainHistory TrainHistory::FromJson(const std::string& text) {
  TrainHistory h;
  try {
    const auto j = nlohmann::json::parse(text);
    h.stopped_early = j.at("stopped_early").get<bool>();
    for (const auto& e : j.at("epochs")) {
      EpochRecord r;
      r.epoch = e.at("epoch").get<std::size_t>();
      r.steps = e.at("steps").get<std::size_t>();
      r.loss = e.at("loss").get<double>();
      r.focal_t = e.at("focal_t").get<double>();
      r.focal_s = e.at("focal_s").get<double>();
      r.focal_st = e.at("focal_st").get<double>();
      r.fcg = e.at("fcg").get<double>();
      r.train_auroc = e.at("train_auroc").get<double>();
      r.val_auroc = e.at("val_auroc").get<double>();
      r.val_ap = e.at("val_ap").get<double>();
      h.epochs.push_back(r);
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(fmt::format("malformed training history: {}", e.what()));
  }
  return h;
}

std::uint64_t TrainHistory::Hash() const { return Fnv1a64(ToJson()); }

namespace {

// Hex-float text keeps doubles exact through metadata strings.
std::string HexReal(double v) { return fmt::format("{:a}", v); }
double ReadHexReal(const std::string& s) { return std::strtod(s.c_str(), nullptr); }

}  // namespace

void TrainState::WriteTo(TensorArchive& archive) const {
  WriteDetector(archive, detector, params);
  for (std::size_t i = 0; i < best_params.size(); ++i) {
    archive.Put("best/" + best_params.name(i), best_params.value(i));
  }
  for (std::size_t i = 0; i < adam_m.size(); ++i) {
    archive.Put("adam/m/" + params.name(i), adam_m[i]);
    archive.Put("adam/v/" + params.name(i), adam_v[i]);
  }
  auto& m = archive.metadata();
  m["train/adam_step"] = std::to_string(adam_step);
  m["train/epoch"] = std::to_string(epoch);
  m["train/best_val_auroc"] = HexReal(best_val_auroc);
  m["train/best_epoch"] = std::to_string(best_epoch);
  m["train/bad_epochs"] = std::to_string(bad_epochs);
  m["train/seed"] = std::to_string(seed);
  m["train/history"] = history.ToJson();
}

TrainState TrainState::ReadFrom(const TensorArchive& archive) {
  TrainState s;
  s.detector = ReadDetectorConfig(archive);
  s.params = ReadDetectorParams(archive, s.detector);
  for (std::size_t i = 0; i < s.params.size(); ++i) {
    const std::string& name = s.params.name(i);
    const Shape& shape = s.params.value(i).shape();
    s.best_params.Add(name, archive.Contains("best/" + name) ? archive.Get("best/" + name, shape)
                                                              : s.params.value(i));
    if (archive.Contains("adam/m/" + name)) {
      s.adam_m.push_back(archive.Get("adam/m/" + name, shape));
      s.adam_v.push_back(archive.Get("adam/v/" + name, shape));
    }
  }
  if (!s.adam_m.empty() && s.adam_m.size() != s.params.size()) {
    throw DataError("checkpoint has optimizer moments for only some parameters");
  }
  const auto count = [&](const char* key) { return ParseCount(key, archive.Meta(key)); };
  s.adam_step = count("train/adam_step");
  s.epoch = count("train/epoch");
  s.best_val_auroc = ReadHexReal(archive.Meta("train/best_val_auroc"));
  s.best_epoch = count("train/best_epoch");
  s.bad_epochs = count("train/bad_epochs");
  s.seed = count("train/seed");
  s.history = TrainHistory::FromJson(archive.Meta("train/history"));
  return s;
}

Clip PrepareFrames(const Clip& clip, const EncoderConfig& encoder) {
  const std::size_t s = encoder.image_size;
  Clip out;
  out.reserve(clip.size());
  for (const Frame& f : clip) {
    out.push_back(f.height == s && f.width == s ? f : ToFrame(Resize(ToPlanar(f), s, s)));
  }
  return out;
}

std::vector<LayerAttributes> EncodeVideo(const VitEncoder& encoder, const Clip& frames) {
  const Clip prepared = PrepareFrames(frames, encoder.config());
  return encoder.EncodeClip(encoder.Normalize(prepared));
}

std::vector<LayerAttributes> SliceFrames(const std::vector<LayerAttributes>& taps,
                                         const std::vector<std::size_t>& indices) {
  auto slice = [&](const TensorF& t) {
    Shape shape = t.shape();
    const std::size_t row = t.size() / shape[0];
    shape[0] = indices.size();
    TensorF out(shape);
    for (std::size_t i = 0; i < indices.size(); ++i) {
      if (indices[i] >= t.dim(0)) {
        throw DimensionError(fmt::format("frame {} out of {} encoded frames", indices[i], t.dim(0)));
      }
      std::memcpy(out.data().data() + i * row, t.data().data() + indices[i] * row,
                  row * sizeof(float));
    }
    return out;
  };
  std::vector<LayerAttributes> out(taps.size());
  for (std::size_t l = 0; l < taps.size(); ++l) {
    out[l].query = slice(taps[l].query);
    out[l].key = slice(taps[l].key);
    out[l].value = slice(taps[l].value);
    out[l].patches = slice(taps[l].patches);
  }
  return out;
}

namespace {

// Whole-video taps, computed on first use and kept when caching is on.
class TapCache {
 public:
  TapCache(const VitEncoder& encoder, std::span<const Video> videos, bool keep)
      : encoder_(encoder), videos_(videos), keep_(keep), cache_(videos.size()) {}

  std::vector<LayerAttributes> Clip(std::size_t video, const std::vector<std::size_t>& idx) {
    if (!keep_) return EncodeVideo(encoder_, GatherFrames(videos_[video].frames, idx));
    if (cache_[video].empty()) cache_[video] = EncodeVideo(encoder_, videos_[video].frames);
    return SliceFrames(cache_[video], idx);
  }

 private:
  const VitEncoder& encoder_;
  std::span<const Video> videos_;
  bool keep_;
  std::vector<std::vector<LayerAttributes>> cache_;
};

EvalResult EvaluateWith(const DetectorConfig& detector, const ParamSet& params,
                        std::span<const Video> videos, std::size_t clips_per_video,
                        TapCache& taps) {
  EvalResult r;
  for (std::size_t v = 0; v < videos.size(); ++v) {
    for (const auto& w : EvalWindows(videos[v].frames.size(), videos[v].fps, detector.frames,
                                     clips_per_video)) {
      const auto s = ScoreClip(detector, params, taps.Clip(v, WindowIndices(w, detector.frames)));
      r.clip_video_ids.push_back(videos[v].id);
      r.clip_scores.push_back(s.score);
      r.clip_labels.push_back(videos[v].label);
    }
  }
  const auto pooled = PoolByVideo(r.clip_scores, r.clip_video_ids, r.clip_labels);
  r.auroc = Auroc(pooled.scores, pooled.labels);
  r.ap = AveragePrecision(pooled.scores, pooled.labels);
  return r;
}

void SaveText(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError(fmt::format("cannot write {}", path.string()));
  out << text;
}

struct BatchItem {
  std::size_t video = 0;
  std::vector<std::size_t> indices;
  std::optional<AugmentParams> augment;
};

}  // namespace

EvalResult Evaluate(const DetectorConfig& detector, const ParamSet& params,
                    const VitEncoder& encoder, std::span<const Video> videos,
                    std::size_t clips_per_video) {
  TapCache taps(encoder, videos, false);
  return EvaluateWith(detector, params, videos, clips_per_video, taps);
}

TrainResult Train(const TrainConfig& config, const VitEncoder& encoder,
                  std::span<const Video> train, std::span<const Video> val,
                  const FacialPartAttributes* phi, const TrainOptions& options) {
  const DetectorConfig detector = config.Detector(encoder.config());
  detector.Validate();
  if (train.empty()) throw ConfigError("training split is empty");
  if (val.empty()) throw ConfigError("validation split is empty");
  if (config.batch_size == 0) throw ConfigError("batch_size must be positive");
  const bool guided = detector.spatial && detector.fcg;
  if (guided) {
    if (!phi) throw ConfigError("facial guidance is on but no mined attributes were given");
    if (phi->phi.size() != detector.layers || phi->phi[0].shape() != Shape{4, detector.width()}) {
      throw DimensionError(fmt::format("mined attributes cover {} layers of {}, detector needs {} of [4, {}]",
                                       phi->phi.size(),
                                       phi->phi.empty() ? "?" : ShapeString(phi->phi[0].shape()),
                                       detector.layers, detector.width()));
    }
  }

  TrainState st;
  AdamW opt(config.Optimizer());
  EarlyStopping stopper(config.patience);
  if (options.resume) {
    st = *options.resume;
    if (st.detector.Hash() != detector.Hash()) {
      throw ConfigError("checkpoint was written with a different detector configuration");
    }
    if (st.seed != config.seed) {
      throw ConfigError(fmt::format("checkpoint seed {} differs from configured seed {}", st.seed,
                                    config.seed));
    }
    opt.Restore(st.adam_step, st.adam_m, st.adam_v);
    stopper.Restore(st.best_val_auroc, st.best_epoch, st.epoch, st.bad_epochs);
  } else {
    st.detector = detector;
    st.params = InitDetectorParams(detector, guided ? phi : nullptr, DeriveSeed(config.seed, 1));
    st.best_params = st.params;
    st.seed = config.seed;
  }
  if (!options.out_dir.empty()) std::filesystem::create_directories(options.out_dir);

  TapCache train_taps(encoder, train, config.cache_taps);
  TapCache val_taps(encoder, val, config.cache_taps);
  const AugmentOptions augment_options;

  auto steps_left = [&] { return config.max_steps == 0 || opt.step() < config.max_steps; };
  for (std::size_t epoch = st.epoch + 1; epoch <= config.epochs && steps_left(); ++epoch) {
    const Rng epoch_rng(DeriveSeed(config.seed, epoch));
    std::vector<BatchItem> items;
    for (std::size_t v = 0; v < train.size(); ++v) {
      Rng rng = epoch_rng.Fork(v + 1);
      for (const auto& w : DrawWindows(train[v].frames.size(), train[v].fps, detector.frames,
                                       config.clips_per_video, rng)) {
        BatchItem item{v, WindowIndices(w, detector.frames), std::nullopt};
        if (config.augment) item.augment = DrawAugmentation(rng, augment_options);
        items.push_back(std::move(item));
      }
    }
    Rng order = epoch_rng.Fork(0);
    order.Shuffle(items);

    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t epoch_steps = 0;
    for (std::size_t start = 0; start < items.size() && steps_left(); start += config.batch_size) {
      const std::size_t end = std::min(items.size(), start + config.batch_size);
      ad::Graph<float> g;
      const auto bound = BindParams(g, st.params, true);
      std::optional<ad::Var<float>> sum;
      double ft = 0, fs = 0, fst = 0;
      // The graph borrows tap tensors, so they must outlive Backward.
      std::vector<std::vector<LayerAttributes>> batch_taps;
      batch_taps.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) {
        const auto& item = items[i];
        auto& taps = batch_taps.emplace_back();
        if (item.augment) {
          const Clip clip = ApplyAugmentation(GatherFrames(train[item.video].frames, item.indices),
                                              *item.augment);
          taps = EncodeVideo(encoder, clip);
        } else {
          taps = train_taps.Clip(item.video, item.indices);
        }
        const auto out = DetectorForward(g, detector, bound, taps);
        const auto terms =
            TotalLoss<float>(out, train[item.video].label, detector.focal_gamma, std::nullopt, 0.0);
        if (terms.focal_t) ft += terms.focal_t->value()[0];
        if (terms.focal_s) fs += terms.focal_s->value()[0];
        if (terms.focal_st) fst += terms.focal_st->value()[0];
        sum = sum ? ad::Add(*sum, terms.total) : terms.total;
      }
      const double n = static_cast<double>(end - start);
      auto loss = ad::Scale(*sum, 1.0 / n);
      double fcg_value = 0.0;
      if (guided) {
        const auto fcg = DetectorFcgLoss(g, detector, bound, *phi);
        fcg_value = fcg.value()[0];
        loss = ad::Add(loss, ad::Scale(fcg, detector.w_fcg));
      }
      g.Backward(loss);
      std::vector<TensorF> grads;
      grads.reserve(bound.vars.size());
      for (const auto& v : bound.vars) grads.push_back(v.grad());
      opt.Step(st.params, grads);

      rec.loss += loss.value()[0];
      rec.focal_t += ft / n;
      rec.focal_s += fs / n;
      rec.focal_st += fst / n;
      rec.fcg += fcg_value;
      ++epoch_steps;
    }
    if (epoch_steps > 0) {
      const double k = static_cast<double>(epoch_steps);
      rec.loss /= k;
      rec.focal_t /= k;
      rec.focal_s /= k;
      rec.focal_st /= k;
      rec.fcg /= k;
    }
    rec.steps = opt.step();
    rec.train_auroc =
        EvaluateWith(detector, st.params, train, config.clips_per_video, train_taps).auroc;
    const auto val_result = EvaluateWith(detector, st.params, val, config.clips_per_video, val_taps);
    rec.val_auroc = val_result.auroc;
    rec.val_ap = val_result.ap;

    const bool stop = stopper.Update(rec.val_auroc);
    if (stopper.improved()) st.best_params = st.params;
    st.epoch = epoch;
    st.adam_step = opt.step();
    st.adam_m = opt.first_moment();
    st.adam_v = opt.second_moment();
    st.best_val_auroc = stopper.best();
    st.best_epoch = stopper.best_epoch();
    st.bad_epochs = stopper.bad_epochs();
    st.history.epochs.push_back(rec);
    st.history.stopped_early = stop;

    if (!options.out_dir.empty()) {
      TensorArchive last;
      st.WriteTo(last);
      last.Save(options.out_dir / "last.ckpt");
      if (stopper.improved()) {
        TensorArchive best;
        WriteDetector(best, detector, st.best_params);
        best.metadata()["train/epoch"] = std::to_string(epoch);
        best.metadata()["train/seed"] = std::to_string(config.seed);
        best.metadata()["train/best_val_auroc"] = HexReal(stopper.best());
        best.Save(options.out_dir / "best.ckpt");
      }
      SaveText(options.out_dir / "history.json", st.history.ToJson());
    }
    if (options.on_epoch) options.on_epoch(rec);
    if (stop) break;
  }
  return {std::move(st)};
}

}  // namespace sidenet
