// Copyright 2026 The Tempo4D Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// tempo4d: check | eval | track | demo-train | generate | normalize
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "tempo4d/checks.hpp"
#include "tempo4d/flowmatch.hpp"
#include "tempo4d/imageio.hpp"
#include "tempo4d/meshio.hpp"
#include "tempo4d/metrics.hpp"
#include "tempo4d/trajectory.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tempo4d;
using Tensor = tk::Tensor<double>;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Binds each option to a variable holding its default. After parsing, a
// value from the --config file replaces the default unless the flag itself
// was given.
class Settings {
 public:
  explicit Settings(CLI::App* app) : app_(app) {}

  template <class T>
  CLI::Option* add(const std::string& key, T& var, const std::string& help) {
    auto* opt = app_->add_option("--" + key, var, help)->capture_default_str();
    bind(key, var, opt);
    return opt;
  }

  CLI::Option* flag(const std::string& key, bool& var, const std::string& help) {
    auto* opt = app_->add_flag("--" + key, var, help);
    bind(key, var, opt);
    return opt;
  }

  json resolve(const json& config) const {
    json out = json::object();
    for (const auto& [key, fn] : resolvers_) out[key] = fn(config);
    return out;
  }

 private:
  template <class T>
  void bind(const std::string& key, T& var, CLI::Option* opt) {
    resolvers_[key] = [key, &var, opt](const json& config) {
      if (opt->count() == 0 && config.contains(key)) {
        try {
          var = config.at(key).get<T>();
        } catch (const json::exception& e) {
          throw UsageError("config key '" + key + "': " + e.what());
        }
      }
      return json(var);
    };
  }

  CLI::App* app_;
  std::map<std::string, std::function<json(const json&)>> resolvers_;
};

struct Common {
  std::uint64_t seed = 0;
  std::string out;
  std::string config;
};

json load_config(const std::string& path, const std::string& section) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError("config file " + path + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw UsageError("config file must hold a JSON object");
  // Subcommand sections override top-level keys.
  json flat = json::object();
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!it.value().is_object()) flat[it.key()] = it.value();
  if (j.contains(section) && j[section].is_object()) flat.update(j[section]);
  return flat;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

fs::path prepare_out(const std::string& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create output directory " + out + ": " + ec.message());
  return fs::path(out);
}

void require_dir(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string("missing --") + what);
  if (!fs::is_directory(path)) throw UsageError(std::string(what) + " directory not found: " + path);
}

// Mesh files of a sequence directory, in load order.
std::vector<fs::path> obj_files(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".obj") files.push_back(e.path());
  std::sort(files.begin(), files.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });
  return files;
}

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// ---------------------------------------------------------------------------

struct CheckArgs {
  std::string inject_fault = "none";
  std::size_t trials = 10;
};

int run_check(const Common& c, const CheckArgs& a, const json& resolved) {
  checks::CheckOptions opt;
  opt.seed = c.seed;
  opt.trials = a.trials;
  if (a.inject_fault == "rotate-values") {
    opt.fault = checks::Fault::kRotateValues;
  } else if (a.inject_fault != "none") {
    throw UsageError("unknown fault '" + a.inject_fault + "' (none, rotate-values)");
  }
  const auto results = checks::run_suite(opt);
  std::ostringstream log;
  std::size_t failed = 0;
  for (const auto& r : results) {
    log << checks::format_result(r) << '\n';
    if (!r.passed) ++failed;
  }
  log << (failed == 0 ? "all " + std::to_string(results.size()) + " properties passed"
                      : std::to_string(failed) + " of " + std::to_string(results.size()) + " properties failed")
      << '\n';
  std::cout << log.str();
  if (!c.out.empty()) {
    const auto dir = prepare_out(c.out);
    write_json(dir / "config.json", resolved);
    std::ofstream(dir / "check.log") << log.str();
  }
  if (failed) {
    std::cerr << "failed properties:\n";
    for (const auto& r : results)
      if (!r.passed) std::cerr << "  " << r.module << ": " << r.name << '\n';
  }
  return failed == 0 ? kExitOk : kExitFailure;
}

struct EvalArgs {
  std::string pred, gt;
  metrics::EvalParams params;
};

int run_eval(const Common& c, EvalArgs a, const json& resolved) {
  require_dir(a.pred, "pred");
  require_dir(a.gt, "gt");
  a.params.seed = c.seed;
  const auto pred = load_sequence(a.pred);
  const auto gt = load_sequence(a.gt);
  const auto report = metrics::evaluate_sequences(pred, gt, a.params);
  const auto dir = prepare_out(c.out);
  write_json(dir / "config.json", resolved);
  write_json(dir / "report.json", json(report));
  const std::vector<std::pair<const char*, double>> cols{
      {"CD", report.cd},           {"F-score", report.f_score},         {"Precision", report.precision},
      {"Recall", report.recall},   {"dCD", report.delta_cd},            {"FE Cos", report.feature_cosine},
      {"Feat. DTW", report.feature_dtw}, {"Occ. KL", report.occupancy_kl}};
  std::string head, row;
  for (const auto& [name, v] : cols) {
    char h[32], r[32];
    std::snprintf(h, sizeof h, "%-11s", name);
    std::snprintf(r, sizeof r, "%-11s", fixed(v).c_str());
    head += h;
    row += r;
  }
  std::cout << head << '\n' << row << '\n';
  std::cout << "tau=" << report.params.tau << " K=" << report.params.grid << " eps=" << report.params.eps
            << " points=" << report.params.points << " frames=" << report.frames << '\n';
  for (const auto& w : report.warnings) std::cerr << "warning: " << w << '\n';
  return kExitOk;
}

struct TrackArgs {
  std::string meshes, masks;
  double focal = 200.0;
  double cx = -1.0, cy = -1.0;  // default: image center
  std::size_t steps = 500;
  double lr = 0.02;
  std::size_t samples = 2048;
  bool fixed_focal = false;
};

int run_track(const Common& c, const TrackArgs& a, const json& resolved) {
  require_dir(a.meshes, "meshes");
  require_dir(a.masks, "masks");
  const auto files = obj_files(a.meshes);
  if (files.empty()) throw InputError("no .obj files in " + a.meshes);
  MeshSequence meshes;
  std::vector<MaskImage> masks;
  std::vector<std::size_t> missing;
  for (std::size_t i = 0; i < files.size(); ++i) {
    meshes.frames.push_back(load_obj(files[i]));
    const auto stem = files[i].stem().string();
    fs::path found;
    for (const char* ext : {".png", ".pgm"})
      if (fs::exists(fs::path(a.masks) / (stem + ext))) {
        found = fs::path(a.masks) / (stem + ext);
        break;
      }
    if (found.empty()) {
      missing.push_back(i);
    } else if (missing.empty()) {
      masks.push_back(read_mask(found));
    }
  }
  if (!missing.empty()) {
    std::string list;
    for (auto i : missing) list += (list.empty() ? "" : ", ") + std::to_string(i);
    throw InputError("no mask for frame(s) " + list + " in " + a.masks);
  }
  trajectory::CameraParams cam;
  cam.width = masks.front().width;
  cam.height = masks.front().height;
  cam.focal = a.focal;
  cam.cx = a.cx >= 0.0 ? a.cx : 0.5 * static_cast<double>(cam.width);
  cam.cy = a.cy >= 0.0 ? a.cy : 0.5 * static_cast<double>(cam.height);
  trajectory::TrajectoryOptions opt;
  opt.steps = a.steps;
  opt.lr = a.lr;
  opt.refine_focal = !a.fixed_focal;
  opt.raster.samples = a.samples;
  opt.raster.seed = c.seed;
  const auto traj = trajectory::optimize_trajectory(meshes, masks, cam, opt);
  const auto dir = prepare_out(c.out);
  write_json(dir / "config.json", resolved);
  write_json(dir / "trajectory.json", trajectory::to_json(traj));
  std::cout << "frames " << traj.frames.size() << "  mean dice " << fixed(traj.mean_dice()) << "  focal "
            << fixed(traj.camera.focal, 2) << '\n';
  for (const auto& w : traj.warnings) std::cerr << "warning: " << w << '\n';
  return kExitOk;
}

struct DemoArgs {
  std::size_t steps = 2000;
  double lr = flowmatch::TrainConfig{}.lr;
  std::size_t sequences = 4;
  std::size_t frames = 96;
  std::size_t clip = 48;
  std::size_t hop = 24;
  std::size_t w_self = 2;
  std::size_t w_cross = 2;
  std::size_t stride = 2;
  std::size_t sample_frames = 48;
  std::size_t sample_steps = 32;
  bool all_frames = true;
};

flowmatch::ToyDiTConfig model_config(std::size_t w_self, std::size_t w_cross, std::size_t stride) {
  flowmatch::ToyDiTConfig mc;
  mc.window.self_half_width = w_self;
  mc.window.cross_half_width = w_cross;
  mc.window.self_layer_stride = stride;
  mc.window.cross_layer_stride = stride;
  return mc;
}

// Euler sampling through the streaming path, recording the cache peak.
Tensor sample_streaming(const flowmatch::ToyDiT& model, const Tensor& cond, std::size_t steps, std::size_t w,
                        std::uint64_t seed, flowmatch::StreamStats& stats) {
  flowmatch::ForwardOptions fo;
  fo.self_half_width = w;
  fo.cross_half_width = w;
  const flowmatch::VelocityFn u = [&](const Tensor& x, const Tensor& cn, double s) {
    return model.forward_streaming(x, cn, s, fo, &stats);
  };
  const auto& mc = model.config();
  return flowmatch::euler_sample(u, cond, mc.latent_tokens, mc.width, steps, seed);
}

int run_demo(const Common& c, const DemoArgs& a, const json& resolved) {
  if (a.sequences == 0) throw UsageError("--sequences must be positive");
  const auto mc = model_config(a.w_self, a.w_cross, a.stride);
  const flowmatch::LatentCodec codec(mc.latent_tokens, mc.width);
  const flowmatch::ConditionEncoder enc(mc.cond_tokens, mc.width);
  flowmatch::DatasetConfig dc;
  dc.seeds.clear();
  for (std::size_t i = 0; i < a.sequences; ++i) dc.seeds.push_back(flowmatch::mix_seed(c.seed, 1000 + i));
  dc.frames = a.frames;
  const auto data = flowmatch::make_dataset(dc, codec, enc);
  flowmatch::TrainConfig tc;
  tc.steps = a.steps;
  tc.lr = a.lr;
  tc.clip = a.clip;
  tc.hop = a.hop;
  tc.seed = c.seed;
  tc.target = a.all_frames ? flowmatch::LossTarget::kAllFrames : flowmatch::LossTarget::kCenterFrame;
  flowmatch::ToyDiT model(mc, flowmatch::mix_seed(c.seed, 1));
  const auto dir = prepare_out(c.out);
  write_json(dir / "config.json", resolved);
  const auto result = flowmatch::train_demo(model, data, tc, [&](std::size_t step, double loss) {
    if (step % 100 == 0 || step + 1 == tc.steps) std::cout << "step " << step << "  loss " << fixed(loss) << '\n';
  });
  flowmatch::save_checkpoint(dir / "model.ckpt", model);
  flowmatch::write_loss_csv(dir / "loss.csv", result.losses);

  json summary{{"steps", result.losses.size()}, {"parameters", model.parameter_count()}};
  if (!result.losses.empty()) {
    const std::size_t win = std::min<std::size_t>(100, result.losses.size());
    const auto sm = flowmatch::smoothed(result.losses, win);
    summary["smoothed_initial_loss"] = sm[win - 1];
    summary["smoothed_final_loss"] = sm.back();
    summary["reduction"] = sm[win - 1] / sm.back();
  }
  const auto probe = flowmatch::synth_sequence(flowmatch::mix_seed(c.seed, 2000), a.sample_frames, dc.motion, codec, enc);
  flowmatch::StreamStats stats;
  const auto lat = sample_streaming(model, probe.conditions, a.sample_steps, a.w_self, c.seed, stats);
  save_sequence(codec.decode_sequence(lat), dir / "generated");
  summary["sample_frames"] = a.sample_frames;
  summary["peak_cached_frames"] = stats.peak_cached_frames;
  write_json(dir / "summary.json", summary);
  if (summary.contains("reduction")) {
    std::cout << "smoothed loss " << fixed(summary["smoothed_initial_loss"]) << " -> "
              << fixed(summary["smoothed_final_loss"]) << "  (" << fixed(summary["reduction"], 1) << "x)\n";
  }
  return kExitOk;
}

struct GenerateArgs {
  std::string checkpoint;
  std::size_t frames = 500;
  long long window = -1;  // default: the checkpoint's self-attention half-width
  std::size_t steps = 32;
  std::uint64_t condition_seed = 0;
};

int run_generate(const Common& c, const GenerateArgs& a, const json& resolved) {
  if (a.checkpoint.empty()) throw UsageError("missing --checkpoint");
  if (!fs::exists(a.checkpoint)) throw UsageError("checkpoint not found: " + a.checkpoint);
  if (a.frames == 0) throw UsageError("--frames must be positive");
  const auto model = flowmatch::load_checkpoint(a.checkpoint);
  const auto& mc = model.config();
  const std::size_t w = a.window >= 0 ? static_cast<std::size_t>(a.window) : mc.window.self_half_width;
  const flowmatch::LatentCodec codec(mc.latent_tokens, mc.width);
  const flowmatch::ConditionEncoder enc(mc.cond_tokens, mc.width);
  const auto cond = flowmatch::synth_sequence(a.condition_seed, a.frames, {}, codec, enc).conditions;
  flowmatch::StreamStats stats;
  const auto lat = sample_streaming(model, cond, a.steps, w, c.seed, stats);
  const auto dir = prepare_out(c.out);
  json res = resolved;
  res["window"] = w;
  write_json(dir / "config.json", res);
  save_sequence(codec.decode_sequence(lat), dir / "sequence");
  write_json(dir / "generate.json", {{"frames", a.frames},
                                     {"window", w},
                                     {"peak_cached_frames", stats.peak_cached_frames},
                                     {"cache_bound", 2 * w + 1}});
  std::cout << "generated " << a.frames << " frames, peak cache " << stats.peak_cached_frames << " frames (bound "
            << 2 * w + 1 << ")\n";
  return kExitOk;
}

struct NormalizeArgs {
  std::string input;
  std::size_t rest_frame = 0;
  std::string centering = "bbox";
  bool invert = false;
};

int run_normalize(const Common& c, const NormalizeArgs& a, const json& resolved) {
  require_dir(a.input, "input");
  if (a.centering != "bbox" && a.centering != "centroid") throw UsageError("--centering must be bbox or centroid");
  const auto seq = load_sequence(a.input);
  const auto dir = prepare_out(c.out);
  if (a.invert) {
    if (!seq.normalization) throw InputError("no normalization.json in " + a.input);
    save_sequence(denormalize_sequence(seq, *seq.normalization), dir);
  } else {
    const auto mode = a.centering == "bbox" ? Centering::kBoundingBox : Centering::kCentroid;
    const auto n = normalize_sequence(seq, a.rest_frame, mode);
    save_sequence(n.sequence, dir);
    std::cout << "frames " << seq.size() << "  rest scale " << n.record.rest_scale << "  sequence scale "
              << n.record.sequence_scale << '\n';
  }
  write_json(dir / "config.json", resolved);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Windowed temporal attention toolkit: property checks, toy flow training, tracking and evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "tempo4d 0.1.0");

  Common common;
  struct Sub {
    CLI::App* app;
    std::unique_ptr<Settings> settings;
    std::function<int(const json&)> run;
  };
  std::vector<Sub> subs;

  auto add_sub = [&](const std::string& name, const std::string& help) {
    auto* sub = app.add_subcommand(name, help);
    auto settings = std::make_unique<Settings>(sub);
    sub->add_option("--config", common.config, "JSON config file (flags override it)");
    subs.push_back({sub, std::move(settings), {}});
    return subs.back().settings.get();
  };

  // Each subcommand keeps its own argument struct; defaults live there.
  CheckArgs check;
  EvalArgs eval;
  TrackArgs track;
  DemoArgs demo;
  GenerateArgs gen;
  NormalizeArgs norm;
  std::map<std::string, std::string> default_out{{"check", ""},          {"eval", "eval_out"},
                                                 {"track", "track_out"}, {"demo-train", "demo_out"},
                                                 {"generate", "generate_out"}, {"normalize", "normalized"}};

  auto common_opts = [&](Settings* s) {
    s->add("seed", common.seed, "random seed");
    s->add("out", common.out, "output directory");
  };

  {
    auto* s = add_sub("check", "run the invariant suite of every module");
    common_opts(s);
    s->add("inject-fault", check.inject_fault, "deliberate fault: none | rotate-values");
    s->add("trials", check.trials, "random instances per property");
    subs.back().run = [&](const json& r) { return run_check(common, check, r); };
  }
  {
    auto* s = add_sub("eval", "compare a predicted mesh sequence against ground truth");
    common_opts(s);
    s->add("pred", eval.pred, "predicted sequence directory");
    s->add("gt", eval.gt, "ground-truth sequence directory");
    s->add("points", eval.params.points, "surface samples per frame");
    s->add("tau", eval.params.tau, "F-score distance threshold");
    s->add("grid", eval.params.grid, "occupancy grid resolution K");
    s->add("eps", eval.params.eps, "occupancy smoothing epsilon");
    subs.back().run = [&](const json& r) { return run_eval(common, eval, r); };
  }
  {
    auto* s = add_sub("track", "recover per-frame translations from silhouettes");
    common_opts(s);
    s->add("meshes", track.meshes, "mesh sequence directory (*.obj)");
    s->add("masks", track.masks, "mask directory (<mesh stem>.png or .pgm)");
    s->add("focal", track.focal, "initial focal length in pixels");
    s->add("cx", track.cx, "principal point x (default: image center)");
    s->add("cy", track.cy, "principal point y (default: image center)");
    s->add("steps", track.steps, "optimization steps");
    s->add("lr", track.lr, "translation learning rate");
    s->add("samples", track.samples, "surface samples per frame for splatting");
    s->flag("fixed-focal", track.fixed_focal, "do not refine the focal length");
    subs.back().run = [&](const json& r) { return run_track(common, track, r); };
  }
  {
    auto* s = add_sub("demo-train", "train the toy model on synthetic data and sample from it");
    common_opts(s);
    s->add("steps", demo.steps, "training steps");
    s->add("lr", demo.lr, "Adam learning rate");
    s->add("sequences", demo.sequences, "synthetic training sequences");
    s->add("frames", demo.frames, "frames per training sequence");
    s->add("clip", demo.clip, "training clip length");
    s->add("hop", demo.hop, "training clip hop");
    s->add("w-self", demo.w_self, "self-attention window half-width");
    s->add("w-cross", demo.w_cross, "cross-attention window half-width");
    s->add("stride", demo.stride, "windowed layer stride");
    s->add("sample-frames", demo.sample_frames, "frames in the generated sample");
    s->add("sample-steps", demo.sample_steps, "Euler steps for the sample");
    s->add("all-frames", demo.all_frames, "average the loss over all clip frames (false: center frame)");
    subs.back().run = [&](const json& r) { return run_demo(common, demo, r); };
  }
  {
    auto* s = add_sub("generate", "sample a long sequence from a checkpoint with the streaming window");
    common_opts(s);
    s->add("checkpoint", gen.checkpoint, "model checkpoint");
    s->add("frames", gen.frames, "frames to generate");
    s->add("window", gen.window, "window half-width (-1: from checkpoint)");
    s->add("steps", gen.steps, "Euler steps");
    s->add("condition-seed", gen.condition_seed, "seed of the synthetic conditioning motion");
    subs.back().run = [&](const json& r) { return run_generate(common, gen, r); };
  }
  {
    auto* s = add_sub("normalize", "normalize a mesh sequence into [-1,1]^3 (or invert)");
    common_opts(s);
    s->add("input", norm.input, "input sequence directory");
    s->add("rest-frame", norm.rest_frame, "rest pose frame index");
    s->add("centering", norm.centering, "per-frame center: bbox | centroid");
    s->flag("invert", norm.invert, "apply the inverse of the input's normalization.json");
    subs.back().run = [&](const json& r) { return run_normalize(common, norm, r); };
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  for (auto& sub : subs) {
    if (!sub.app->parsed()) continue;
    const std::string name = sub.app->get_name();
    try {
      const auto config = load_config(common.config, name);
      json resolved = sub.settings->resolve(config);
      if (common.out.empty()) common.out = default_out[name];
      resolved["out"] = common.out;
      resolved["subcommand"] = name;
      return sub.run(resolved);
    } catch (const UsageError& e) {
      std::cerr << "usage error: " << e.what() << "\n" << sub.app->help();
      return kExitUsage;
    } catch (const flowmatch::CheckpointVersionError& e) {
      std::cerr << "error: " << e.what() << '\n';
      return kExitFailure;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << '\n';
      return kExitFailure;
    }
  }
  return kExitUsage;
}
