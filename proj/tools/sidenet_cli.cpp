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

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "sidenet/affinity.h"
#include "sidenet/archive.h"
#include "sidenet/dataset.h"
#include "sidenet/detector.h"
#include "sidenet/error.h"
#include "sidenet/metrics.h"
#include "sidenet/perturb.h"
#include "sidenet/sampling.h"
#include "sidenet/toyset.h"
#include "sidenet/trainer.h"
#include "sidenet/vit_encoder.h"

namespace fs = std::filesystem;
using namespace sidenet;

namespace {

struct Globals {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string weights;
  std::string checkpoint;
};

TrainConfig ResolveConfig(const Globals& g) {
  TrainConfig c = g.config_path.empty() ? TrainConfig{} : LoadTrainConfig(g.config_path);
  for (const std::string& kv : g.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError(fmt::format("--set expects key=value, got '{}'", kv));
    c.Apply(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (g.seed) c.seed = *g.seed;
  return c;
}

VitEncoder RequireEncoder(const Globals& g) {
  if (g.weights.empty()) throw ConfigError("this command needs --weights <encoder archive>");
  return VitEncoder::Load(g.weights);
}

struct LoadedDetector {
  DetectorConfig config;
  ParamSet params;
};

LoadedDetector RequireCheckpoint(const Globals& g) {
  if (g.checkpoint.empty()) throw ConfigError("this command needs --checkpoint <file>");
  const TensorArchive a = TensorArchive::Load(g.checkpoint);
  LoadedDetector d{ReadDetectorConfig(a), {}};
  d.params = ReadDetectorParams(a, d.config);
  return d;
}

void CheckEncoderMatches(const DetectorConfig& d, const EncoderConfig& e) {
  if (d.layers != e.layers || d.heads != e.heads || d.head_dim != e.head_dim ||
      d.patches != e.patches()) {
    throw ConfigError(fmt::format(
        "checkpoint expects L={} H={} D={} P={}, encoder has L={} H={} D={} P={}", d.layers,
        d.heads, d.head_dim, d.patches, e.layers, e.heads, e.head_dim, e.patches()));
  }
}

// Manifest -> subsample -> leave-one-out exclusion, with an audit line.
std::vector<ManifestRecord> PrepareRecords(const std::string& manifest, const TrainConfig& c) {
  auto records = LoadManifest(manifest);
  if (c.dataset_fraction < 1.0) {
    const std::size_t before = records.size();
    records = SubsampleVideos(records, c.dataset_fraction, c.seed);
    fmt::print("dataset_fraction {}: kept {} of {} records\n", c.dataset_fraction, records.size(),
               before);
  }
  if (!c.loo_exclusion.empty()) {
    std::set<std::string> dropped;
    const auto kept = ExcludeManipulation(records, c.loo_exclusion);
    std::set<std::string> remaining;
    for (const auto& r : kept) remaining.insert(r.video_id);
    for (const auto& r : records) {
      if (!remaining.count(r.video_id)) dropped.insert(r.video_id);
    }
    fmt::print("loo_exclusion '{}': removed {} fake videos from train/val\n", c.loo_exclusion,
               dropped.size());
    records = kept;
  }
  return records;
}

std::vector<Video> SplitVideos(std::span<const ManifestRecord> records, Split split, double fps) {
  return LoadVideos(FilterSplit(records, split), fps);
}

// First eval window of a clip file, sampled to `frames`.
std::vector<Clip> WindowClips(const Clip& video, double fps, std::size_t frames,
                              std::size_t count) {
  std::vector<Clip> out;
  for (const auto& w : EvalWindows(video.size(), fps, frames, count)) {
    out.push_back(GatherFrames(video, WindowIndices(w, frames)));
  }
  return out;
}

EncoderConfig VitLarge14() {
  EncoderConfig e;
  e.layers = 24;
  e.heads = 16;
  e.head_dim = 64;
  e.patch_size = 14;
  e.image_size = 224;
  e.mlp_width = 4096;
  return e;
}

int RunParams(const Globals& g, bool vit_l14) {
  const TrainConfig c = ResolveConfig(g);
  const EncoderConfig enc =
      g.weights.empty() || vit_l14 ? VitLarge14() : VitEncoder::Load(g.weights).config();
  fmt::print("{}", ParameterReport(c.Detector(enc)));
  return 0;
}

int RunToyset(const Globals& g, const std::string& kind, const std::string& out,
              std::optional<std::size_t> train, std::optional<std::size_t> val, std::size_t test,
              std::optional<std::size_t> frames) {
  ToysetOptions o;
  if (ParseToysetKind(kind) == ToysetKind::kTemporalOnly) o = ToysetOptions::TemporalOnly();
  o.seed = g.seed.value_or(0);
  if (train) o.train = *train;
  if (val) o.val = *val;
  if (frames) o.frames = *frames;
  o.test = test;
  const auto manifest = WriteToyset(out, GenerateToyset(o));
  fmt::print("wrote {} ({} train / {} val / {} test videos, {} frames at {} fps)\n",
             manifest.string(), o.train, o.val, o.test, o.frames, o.fps);
  return 0;
}

int RunTinyEncoder(const Globals& g, const std::string& out) {
  const VitEncoder enc = VitEncoder::Synthesize(EncoderConfig::Tiny(), g.seed.value_or(0));
  enc.ToArchive().Save(out);
  fmt::print("wrote {} ({} parameters)\n", out, enc.ParameterCount());
  return 0;
}

int RunMine(const Globals& g, const std::string& manifest, const std::string& out,
            std::size_t per_video) {
  const TrainConfig c = ResolveConfig(g);
  const VitEncoder enc = RequireEncoder(g);
  const auto records = PrepareRecords(manifest, c);
  const auto videos = SplitVideos(records, Split::kTrain, c.fps);
  const auto samples = MiningSamples(videos, per_video);
  if (samples.empty()) throw DataError("no training video carries landmarks");
  MiningOptions mo;
  mo.gamma_s = c.gamma_s;
  mo.rounds = c.mining_rounds;
  mo.augment = c.mining_augment;
  mo.seed = c.seed;
  const auto phi = MineFacialAttributes(enc, samples, mo);
  TensorArchive a;
  phi.WriteTo(a);
  a.Save(out);
  fmt::print("mined {} frames x {} rounds over {} layers -> {}\n", samples.size(),
             mo.augment ? mo.rounds : 1, phi.phi.size(), out);
  return 0;
}

int RunTrain(const Globals& g, const std::string& manifest, const std::string& out,
             const std::string& phi_path) {
  const TrainConfig c = ResolveConfig(g);
  const VitEncoder enc = RequireEncoder(g);
  const auto records = PrepareRecords(manifest, c);
  const auto train = SplitVideos(records, Split::kTrain, c.fps);
  const auto val = SplitVideos(records, Split::kVal, c.fps);
  if (val.empty()) throw ConfigError("validation split is empty");

  std::optional<FacialPartAttributes> phi;
  if (!phi_path.empty()) phi = FacialPartAttributes::ReadFrom(TensorArchive::Load(phi_path));
  std::optional<TrainState> resume;
  TrainOptions opt;
  opt.out_dir = out;
  if (!g.checkpoint.empty()) {
    resume = TrainState::ReadFrom(TensorArchive::Load(g.checkpoint));
    opt.resume = &*resume;
    fmt::print("resuming after epoch {} (step {})\n", resume->epoch, resume->adam_step);
  }
  opt.on_epoch = [](const EpochRecord& r) {
    fmt::print(
        "epoch {:2} step {:5} loss {:.5f} focal t/s/st {:.5f}/{:.5f}/{:.5f} fcg {:.5f} "
        "train_auroc {:.4f} val_auroc {:.4f} val_ap {:.4f}\n",
        r.epoch, r.steps, r.loss, r.focal_t, r.focal_s, r.focal_st, r.fcg, r.train_auroc,
        r.val_auroc, r.val_ap);
    std::fflush(stdout);
  };
  const auto result = Train(c, enc, train, val, phi ? &*phi : nullptr, opt);
  const auto& st = result.state;
  fmt::print("best val_auroc {:.4f} at epoch {}{}; history hash {:016x}\n", st.best_val_auroc,
             st.best_epoch, st.history.stopped_early ? " (stopped early)" : "",
             st.history.Hash());
  return 0;
}

int RunEval(const Globals& g, const std::string& manifest, const std::string& split_name,
            const std::string& perturb_kind, int severity, const std::string& scores_out) {
  const TrainConfig c = ResolveConfig(g);
  const VitEncoder enc = RequireEncoder(g);
  const LoadedDetector det = RequireCheckpoint(g);
  CheckEncoderMatches(det.config, enc.config());
  Split split = Split::kTest;
  if (split_name == "train") split = Split::kTrain;
  else if (split_name == "val") split = Split::kVal;
  else if (split_name != "test") throw ConfigError(fmt::format("unknown split '{}'", split_name));
  auto videos = SplitVideos(LoadManifest(manifest), split, c.fps);
  if (videos.empty()) throw DataError(fmt::format("manifest has no {} videos", split_name));
  if (!perturb_kind.empty()) {
    const PerturbSpec spec{ParsePerturbKind(perturb_kind), severity};
    for (std::size_t v = 0; v < videos.size(); ++v) {
      videos[v].frames = Perturb(videos[v].frames, spec, DeriveSeed(c.seed, v));
    }
  }
  const auto r = Evaluate(det.config, det.params, enc, videos, c.clips_per_video);
  if (!scores_out.empty()) {
    std::FILE* f = std::fopen(scores_out.c_str(), "w");
    if (!f) throw DataError(fmt::format("cannot write {}", scores_out));
    fmt::print(f, "video_id\tlabel\tscore\n");
    for (std::size_t i = 0; i < r.clip_scores.size(); ++i) {
      fmt::print(f, "{}\t{}\t{:.9g}\n", r.clip_video_ids[i], r.clip_labels[i], r.clip_scores[i]);
    }
    std::fclose(f);
  }
  fmt::print("{} videos, {} clips: video AUROC {:.4f}  AP {:.4f}\n", videos.size(),
             r.clip_scores.size(), r.auroc, r.ap);
  return 0;
}

int RunScore(const Globals& g, const std::string& clip_path) {
  const TrainConfig c = ResolveConfig(g);
  const VitEncoder enc = RequireEncoder(g);
  const LoadedDetector det = RequireCheckpoint(g);
  CheckEncoderMatches(det.config, enc.config());
  const auto clips = WindowClips(ReadClip(clip_path), c.fps, det.config.frames, 1);
  const auto t0 = std::chrono::steady_clock::now();
  const auto taps = EncodeVideo(enc, clips.at(0));
  const auto t1 = std::chrono::steady_clock::now();
  const ClipScore s = ScoreClip(det.config, det.params, taps);
  const auto t2 = std::chrono::steady_clock::now();
  auto opt = [](const std::optional<double>& v) {
    return v ? fmt::format("{:.6f}", *v) : std::string("-");
  };
  using ms = std::chrono::duration<double, std::milli>;
  fmt::print("score {:.6f}\nlogit_t {}\nlogit_s {}\nlogit_st {}\n", s.score, opt(s.logit_t),
             opt(s.logit_s), opt(s.logit_st));
  fmt::print("wall_ms encoder {:.2f} detector {:.2f} total {:.2f}\n", ms(t1 - t0).count(),
             ms(t2 - t1).count(), ms(t2 - t0).count());
  return 0;
}

int RunPerturb(const Globals& g, const std::string& clip_path, const std::string& kind_name,
               std::optional<int> severity, const std::string& out) {
  const Clip clip = ReadClip(clip_path);
  std::vector<PerturbKind> kinds;
  if (kind_name == "all") kinds.assign(kAllPerturbKinds.begin(), kAllPerturbKinds.end());
  else kinds.push_back(ParsePerturbKind(kind_name));
  fs::create_directories(out);
  const std::uint64_t seed = g.seed.value_or(0);
  for (PerturbKind k : kinds) {
    for (int s = severity.value_or(1); s <= severity.value_or(5); ++s) {
      const Clip p = Perturb(clip, {k, s}, seed);
      const fs::path path = fs::path(out) / fmt::format("{}_{}.clip", PerturbKindName(k), s);
      WritePackedClip(path, p);
      const double psnr = Psnr(clip, p);
      fmt::print("{:<10} severity {}  psnr {:7.2f} dB  -> {}\n", PerturbKindName(k), s, psnr,
                 path.string());
    }
  }
  return 0;
}

int RunDumpAffinity(const Globals& g, const std::string& clip_path, const std::string& out,
                    std::size_t clips, std::size_t upscale) {
  const TrainConfig c = ResolveConfig(g);
  const VitEncoder enc = RequireEncoder(g);
  const LoadedDetector det = RequireCheckpoint(g);
  CheckEncoderMatches(det.config, enc.config());
  const auto windows = WindowClips(ReadClip(clip_path), c.fps, det.config.frames, clips);
  const TensorF maps = AverageAffinity(det.config, det.params, enc, windows);
  const auto files = WriteAffinityMaps(maps, out, upscale);
  fmt::print("averaged {} clip(s); wrote {} maps ({} queries x {} frames) to {}\n", windows.size(),
             files.size(), maps.dim(0), maps.dim(1), out);
  return 0;
}

int RunParity(const Globals& g, const std::string& golden, double tolerance) {
  const VitEncoder enc = RequireEncoder(g);
  const auto dev = ReplayGoldenTaps(enc, TensorArchive::Load(golden));
  double worst = 0.0;
  for (std::size_t l = 0; l < dev.size(); ++l) {
    fmt::print("layer {:2}  max abs error {:.3e}\n", l, dev[l]);
    worst = std::max(worst, dev[l]);
  }
  const bool ok = worst <= tolerance;
  fmt::print("{} max {:.3e} (tolerance {:.1e})\n", ok ? "PASS" : "FAIL", worst, tolerance);
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Side-network deepfake detector over a frozen ViT encoder"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "key = value settings file")->check(CLI::ExistingFile);
  app.add_option("--set", g.overrides, "Setting override key=value (repeatable)");
  app.add_option("--seed", g.seed, "Global seed (overrides the config)");
  app.add_option("--weights", g.weights, "Encoder tensor archive");
  app.add_option("--checkpoint", g.checkpoint, "Detector checkpoint (train: resume state)");

  std::function<int()> run;

  auto* params = app.add_subcommand("params", "Trainable-parameter report");
  bool vit_l14 = false;
  params->add_flag("--vit-l14", vit_l14, "Use ViT-L/14 extents even with --weights");
  params->callback([&] { run = [&] { return RunParams(g, vit_l14); }; });

  auto* toy = app.add_subcommand("toyset", "Write a synthetic video set with a manifest");
  std::string toy_kind = "separable", toy_out;
  std::optional<std::size_t> toy_train, toy_val, toy_frames;
  std::size_t toy_test = 0;
  toy->add_option("--kind", toy_kind, "separable | temporal_only");
  toy->add_option("--out", toy_out, "Output directory")->required();
  toy->add_option("--train", toy_train, "Training videos");
  toy->add_option("--val", toy_val, "Validation videos");
  toy->add_option("--test", toy_test, "Test videos");
  toy->add_option("--frames", toy_frames, "Frames per video");
  toy->callback([&] {
    run = [&] { return RunToyset(g, toy_kind, toy_out, toy_train, toy_val, toy_test, toy_frames); };
  });

  auto* tiny = app.add_subcommand("tiny-encoder", "Write a seeded Tiny-profile encoder archive");
  std::string tiny_out;
  tiny->add_option("--out", tiny_out, "Output archive")->required();
  tiny->callback([&] { run = [&] { return RunTinyEncoder(g, tiny_out); }; });

  auto* mine = app.add_subcommand("mine", "Mine facial-part attributes from landmarked frames");
  std::string mine_manifest, mine_out;
  std::size_t per_video = 4;
  mine->add_option("--manifest", mine_manifest, "Clip manifest (TSV)")->required()->check(CLI::ExistingFile);
  mine->add_option("--out", mine_out, "Output archive")->required();
  mine->add_option("--frames-per-video", per_video, "Landmarked frames used per video");
  mine->callback([&] { run = [&] { return RunMine(g, mine_manifest, mine_out, per_video); }; });

  auto* train = app.add_subcommand("train", "Train the detector");
  std::string train_manifest, train_out, train_phi;
  train->add_option("--manifest", train_manifest, "Clip manifest (TSV)")->required()->check(CLI::ExistingFile);
  train->add_option("--out", train_out, "Directory for checkpoints and history")->required();
  train->add_option("--phi", train_phi, "Mined attribute archive")->check(CLI::ExistingFile);
  train->callback([&] { run = [&] { return RunTrain(g, train_manifest, train_out, train_phi); }; });

  auto* eval = app.add_subcommand("eval", "Video-level AUROC and AP on a manifest split");
  std::string eval_manifest, eval_split = "test", eval_kind, eval_scores;
  int eval_severity = 0;
  eval->add_option("--manifest", eval_manifest, "Clip manifest (TSV)")->required()->check(CLI::ExistingFile);
  eval->add_option("--split", eval_split, "train | val | test");
  eval->add_option("--perturb", eval_kind, "Perturbation applied before scoring");
  eval->add_option("--severity", eval_severity, "Perturbation severity 0..5");
  eval->add_option("--scores", eval_scores, "Write per-clip scores (TSV)");
  eval->callback([&] {
    run = [&] {
      return RunEval(g, eval_manifest, eval_split, eval_kind, eval_severity, eval_scores);
    };
  });

  auto* score = app.add_subcommand("score", "Score one clip");
  std::string score_clip;
  score->add_option("--clip", score_clip, "Packed clip or frame directory")->required();
  score->callback([&] { run = [&] { return RunScore(g, score_clip); }; });

  auto* perturb = app.add_subcommand("perturb", "Write perturbed copies of a clip");
  std::string pert_clip, pert_kind = "all", pert_out;
  std::optional<int> pert_severity;
  perturb->add_option("--clip", pert_clip, "Packed clip or frame directory")->required();
  perturb->add_option("--kind", pert_kind, "Perturbation kind or 'all'");
  perturb->add_option("--severity", pert_severity, "Single severity (default 1..5)");
  perturb->add_option("--out", pert_out, "Output directory")->required();
  perturb->callback([&] {
    run = [&] { return RunPerturb(g, pert_clip, pert_kind, pert_severity, pert_out); };
  });

  auto* dump = app.add_subcommand("dump-affinity", "Write per-query affinity heatmaps (PGM)");
  std::string dump_clip, dump_out;
  std::size_t dump_clips = 1, upscale = 8;
  dump->add_option("--clip", dump_clip, "Packed clip or frame directory")->required();
  dump->add_option("--out", dump_out, "Output directory")->required();
  dump->add_option("--clips", dump_clips, "Clips from the video to average over");
  dump->add_option("--upscale", upscale, "Pixels per grid cell");
  dump->callback([&] {
    run = [&] { return RunDumpAffinity(g, dump_clip, dump_out, dump_clips, upscale); };
  });

  auto* parity = app.add_subcommand("parity", "Compare the encoder against golden taps");
  std::string golden;
  double tolerance = 1e-4;
  parity->add_option("--golden", golden, "Golden-tap archive")->required()->check(CLI::ExistingFile);
  parity->add_option("--tolerance", tolerance, "Largest allowed absolute deviation");
  parity->callback([&] { run = [&] { return RunParity(g, golden, tolerance); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ErrorKind::kConfig);
  }
  try {
    return run();
  } catch (const Error& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return e.exit_code();
  } catch (const fs::filesystem_error& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return static_cast<int>(ErrorKind::kData);
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }
}
