#pragma once

// Config-driven pipeline: train, cam, refine, eval, sweep and synth commands
// over one JSON config, with atomic writes and a manifest of produced files.

#include <cstdlib>
#include <fstream>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "wsss/bench.hpp"
#include "wsss/checkpoint.hpp"
#include "wsss/crf.hpp"
#include "wsss/postproc.hpp"
#include "wsss/random_walk.hpp"

namespace wsss {

inline constexpr const char* kOutputRootEnv = "WSSS_OUTPUT_ROOT";

enum class TrainMode { teacher_student, co_training, single };

inline TrainMode parse_train_mode(const std::string& s) {
  if (s == "teacher_student") return TrainMode::teacher_student;
  if (s == "co_training") return TrainMode::co_training;
  if (s == "single") return TrainMode::single;
  fail<ValidationError>("unknown train mode '", s, "' (teacher_student, co_training, single)");
}

inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::teacher_student: return "teacher_student";
    case TrainMode::co_training: return "co_training";
    case TrainMode::single: return "single";
  }
  return "?";
}

struct DataPaths {
  fs::path train_manifest;
  fs::path test_manifest;
  fs::path teacher_checkpoint;
  fs::path objects_dir;  // label images for the component proposal provider
};

struct CamSettings {
  std::vector<double> scales{1.0};
  std::vector<int> layers;  // non-empty selects layer fusion
  double bg_threshold = 0.3;
};

struct ThresholdStage {
  std::optional<double> bg_threshold;  // falls back to cam.bg_threshold
};

struct SamStage {
  double iou_thresh = 0.3;
  FusionStrategy strategy = FusionStrategy::COPY;
  int points_per_side = 32;
  std::string provider = "components";  // components | directory | command
  fs::path proposals_dir;
  std::string command;
  double jitter = 0.0;
  std::uint64_t seed = 0;
};

using StageParams = std::variant<CrfParams, SamStage, RandomWalkParams, ThresholdStage>;

struct RecipeStage {
  std::string name;
  StageParams params;
};

inline const std::vector<std::string> kRecipeStages{"crf", "sam", "random_walk", "threshold"};

struct SynthSettings {
  SplitSpec train{500, 1.0, 1, 64, 64};
  SplitSpec test{100, 0.0, 2, 64, 64};
};

struct PipelineConfig {
  DataPaths data;
  ModelConfig model;
  ModelConfig teacher_model;
  TrainConfig train;
  TrainMode mode = TrainMode::teacher_student;
  CamSettings cam;
  std::vector<RecipeStage> recipe;
  bool dump_stages = false;
  std::vector<double> eval_grid = default_threshold_grid();
  std::string method_name = "masks";
  fs::path output_dir = "runs";
  SynthSettings synth;
};

// ---------------------------------------------------------------------------
// Config parsing. Every problem is collected before anything is rejected.

namespace detail {

inline fs::path resolve_against(const fs::path& base, const fs::path& p) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

template <typename T>
void read_field(const nlohmann::json& j, const std::string& key, T& target, const std::string& where,
                std::vector<std::string>& problems) {
  if (!j.contains(key)) return;
  try {
    target = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    problems.push_back(where + key + ": " + e.what());
  } catch (const Error& e) {
    problems.push_back(where + key + ": " + e.what());
  }
}

inline void unknown_keys(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where,
                         std::vector<std::string>& problems) {
  if (!j.is_object()) return;
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) problems.push_back(where + "unknown key '" + k + "'");
}

inline std::optional<RecipeStage> parse_stage(const nlohmann::json& j, std::size_t index, const fs::path& base,
                                              std::vector<std::string>& problems) {
  const std::string where = "recipe[" + std::to_string(index) + "]: ";
  std::string name;
  if (j.is_string()) {
    name = j.get<std::string>();
  } else if (j.is_object() && j.contains("stage") && j.at("stage").is_string()) {
    name = j.at("stage").get<std::string>();
  } else {
    problems.push_back(where + "expected a stage name or an object with a \"stage\" field");
    return std::nullopt;
  }
  const nlohmann::json params = j.is_object() ? j.value("params", nlohmann::json::object()) : nlohmann::json::object();
  const std::size_t before = problems.size();
  RecipeStage stage{name, ThresholdStage{}};
  if (name == "crf") {
    CrfParams p;
    unknown_keys(params, {"scaling", "iterations", "gaussian_sxy", "bilateral_sxy", "bilateral_srgb", "w_gaussian",
                          "w_bilateral"},
                 where, problems);
    try {
      p = params.get<CrfParams>();
    } catch (const nlohmann::json::exception& e) {
      problems.push_back(where + e.what());
    }
    for (auto& s : p.problems()) problems.push_back(where + s);
    stage.params = p;
  } else if (name == "random_walk") {
    RandomWalkParams p;
    unknown_keys(params, {"sigma_color", "sigma_pos", "radius", "beta", "steps"}, where, problems);
    try {
      p = params.get<RandomWalkParams>();
    } catch (const nlohmann::json::exception& e) {
      problems.push_back(where + e.what());
    }
    for (auto& s : p.problems()) problems.push_back(where + s);
    stage.params = p;
  } else if (name == "threshold") {
    ThresholdStage t;
    unknown_keys(params, {"bg_threshold"}, where, problems);
    if (params.contains("bg_threshold")) {
      double v = 0;
      read_field(params, "bg_threshold", v, where, problems);
      if (v < 0 || v > 1) problems.push_back(where + "bg_threshold must lie in [0,1]");
      t.bg_threshold = v;
    }
    stage.params = t;
  } else if (name == "sam") {
    SamStage s;
    unknown_keys(params, {"iou_thresh", "strategy", "points_per_side", "provider", "proposals_dir", "command", "jitter", "seed"},
                 where, problems);
    read_field(params, "iou_thresh", s.iou_thresh, where, problems);
    std::string strategy = to_string(s.strategy);
    read_field(params, "strategy", strategy, where, problems);
    try {
      s.strategy = parse_fusion_strategy(strategy);
    } catch (const Error& e) {
      problems.push_back(where + e.what());
    }
    read_field(params, "points_per_side", s.points_per_side, where, problems);
    read_field(params, "provider", s.provider, where, problems);
    std::string dir;
    read_field(params, "proposals_dir", dir, where, problems);
    s.proposals_dir = resolve_against(base, dir);
    read_field(params, "command", s.command, where, problems);
    read_field(params, "jitter", s.jitter, where, problems);
    read_field(params, "seed", s.seed, where, problems);
    if (s.iou_thresh < 0 || s.iou_thresh > 1) problems.push_back(where + "iou_thresh must lie in [0,1]");
    if (s.points_per_side < 1) problems.push_back(where + "points_per_side must be >= 1");
    if (s.jitter < 0 || s.jitter > 1) problems.push_back(where + "jitter must lie in [0,1]");
    if (s.provider == "directory" && s.proposals_dir.empty())
      problems.push_back(where + "provider 'directory' needs proposals_dir");
    else if (s.provider == "command" && s.command.empty())
      problems.push_back(where + "provider 'command' needs command");
    else if (s.provider != "components" && s.provider != "directory" && s.provider != "command")
      problems.push_back(where + "provider must be components, directory or command");
    stage.params = s;
  } else {
    problems.push_back(where + "unknown stage '" + name + "' (crf, sam, random_walk, threshold)");
  }
  if (problems.size() != before) return std::nullopt;
  return stage;
}

}  // namespace detail

// Relative paths resolve against `base` (the config file's directory).
inline PipelineConfig parse_pipeline_config(const nlohmann::json& j, const fs::path& base = {}) {
  std::vector<std::string> problems;
  PipelineConfig c;
  if (!j.is_object()) throw ValidationError("config must be a JSON object");
  detail::unknown_keys(j, {"data", "model", "teacher_model", "train", "mode", "cam", "recipe", "dump_stages", "eval",
                           "output_dir", "synth"},
                       "", problems);

  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::unknown_keys(d, {"train_manifest", "test_manifest", "teacher_checkpoint", "objects_dir"}, "data: ", problems);
    auto path_field = [&](const char* key, fs::path& target) {
      std::string s;
      detail::read_field(d, key, s, "data: ", problems);
      if (!s.empty()) target = detail::resolve_against(base, s);
    };
    path_field("train_manifest", c.data.train_manifest);
    path_field("test_manifest", c.data.test_manifest);
    path_field("teacher_checkpoint", c.data.teacher_checkpoint);
    path_field("objects_dir", c.data.objects_dir);
  }
  detail::read_field(j, "model", c.model, "", problems);
  detail::read_field(j, "teacher_model", c.teacher_model, "", problems);
  detail::read_field(j, "train", c.train, "", problems);
  for (auto& p : c.train.problems()) problems.push_back(p);
  if (j.contains("mode")) {
    std::string m;
    detail::read_field(j, "mode", m, "", problems);
    try {
      c.mode = parse_train_mode(m);
    } catch (const Error& e) {
      problems.push_back(std::string("mode: ") + e.what());
    }
  }
  if (c.mode == TrainMode::teacher_student) c.train.kt.paradigm = Paradigm::teacher_student;
  if (c.mode == TrainMode::co_training) c.train.kt.paradigm = Paradigm::co_training;

  if (j.contains("cam")) {
    const auto& cj = j.at("cam");
    detail::unknown_keys(cj, {"scales", "layers", "bg_threshold"}, "cam: ", problems);
    detail::read_field(cj, "scales", c.cam.scales, "cam: ", problems);
    detail::read_field(cj, "layers", c.cam.layers, "cam: ", problems);
    detail::read_field(cj, "bg_threshold", c.cam.bg_threshold, "cam: ", problems);
  }
  if (c.cam.scales.empty()) problems.push_back("cam: scales must not be empty");
  for (double s : c.cam.scales)
    if (!(s > 0)) problems.push_back("cam: scales must be positive");
  if (c.cam.bg_threshold < 0 || c.cam.bg_threshold > 1) problems.push_back("cam: bg_threshold must lie in [0,1]");

  if (j.contains("recipe")) {
    if (!j.at("recipe").is_array()) {
      problems.push_back("recipe: expected a list of stages");
    } else {
      std::size_t i = 0;
      for (const auto& s : j.at("recipe"))
        if (auto stage = detail::parse_stage(s, i++, base, problems)) c.recipe.push_back(std::move(*stage));
    }
  }
  detail::read_field(j, "dump_stages", c.dump_stages, "", problems);

  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    detail::unknown_keys(e, {"grid", "method"}, "eval: ", problems);
    detail::read_field(e, "grid", c.eval_grid, "eval: ", problems);
    detail::read_field(e, "method", c.method_name, "eval: ", problems);
  }
  if (c.eval_grid.empty()) problems.push_back("eval: grid must not be empty");
  if (!std::is_sorted(c.eval_grid.begin(), c.eval_grid.end())) problems.push_back("eval: grid must be sorted");

  if (j.contains("output_dir")) {
    std::string o;
    detail::read_field(j, "output_dir", o, "", problems);
    if (!o.empty()) c.output_dir = detail::resolve_against(base, o);
  }
  if (j.contains("synth")) {
    const auto& s = j.at("synth");
    detail::unknown_keys(s, {"train", "test"}, "synth: ", problems);
    detail::read_field(s, "train", c.synth.train, "synth: ", problems);
    detail::read_field(s, "test", c.synth.test, "synth: ", problems);
  }
  for (const SplitSpec* s : {&c.synth.train, &c.synth.test}) {
    if (s->count < 1) problems.push_back("synth: count must be >= 1");
    if (s->coupling < 0 || s->coupling > 1) problems.push_back("synth: coupling must lie in [0,1]");
    if (s->height < 16 || s->width < 16) problems.push_back("synth: height and width must be >= 16");
  }
  if (!problems.empty()) throw ValidationError(std::move(problems));
  return c;
}

inline PipelineConfig load_pipeline_config(const fs::path& path) {
  std::ifstream in(path);
  require<IoError>(static_cast<bool>(in), "config not found: ", path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail<ValidationError>(path.string(), ": ", e.what());
  }
  return parse_pipeline_config(j, path.has_parent_path() ? path.parent_path() : fs::path("."));
}

// Output root precedence: explicit flag, then the environment, then config.
inline fs::path resolve_output_root(const PipelineConfig& cfg, const std::optional<fs::path>& flag = std::nullopt) {
  if (flag && !flag->empty()) return *flag;
  if (const char* env = std::getenv(kOutputRootEnv); env && *env) return fs::path(env);
  return cfg.output_dir;
}

// ---------------------------------------------------------------------------
// Command results

struct ImageError {
  std::string image;
  std::string error;
};

struct CommandResult {
  CommandResult(std::string cmd, fs::path root) : command(std::move(cmd)), output_root(std::move(root)) {}

  std::string command;
  fs::path output_root;
  std::vector<fs::path> produced;  // relative to output_root
  std::vector<ImageError> errors;
  nlohmann::json summary = nlohmann::json::object();

  bool ok() const { return errors.empty(); }
};

namespace detail {

inline void write_text(const fs::path& path, const std::string& text) {
  write_atomically(path, [&](std::ofstream& out) { out << text; });
}

inline void record(CommandResult& r, const fs::path& absolute) {
  r.produced.push_back(absolute.lexically_relative(r.output_root));
}

// <root>/<command>.manifest.json: produced files with sizes, per-image errors
// and the command summary. Contains nothing time-dependent.
inline void write_command_manifest(CommandResult& r) {
  std::sort(r.produced.begin(), r.produced.end());
  nlohmann::json files = nlohmann::json::array();
  for (const auto& p : r.produced)
    files.push_back({{"path", p.generic_string()}, {"bytes", fs::file_size(r.output_root / p)}});
  nlohmann::json errors = nlohmann::json::array();
  for (const auto& e : r.errors) errors.push_back({{"image", e.image}, {"error", e.error}});
  const nlohmann::json m{{"command", r.command}, {"files", files}, {"errors", errors}, {"summary", r.summary}};
  write_text(r.output_root / (r.command + ".manifest.json"), m.dump(2) + "\n");
}

inline std::vector<SampleRecord> readable_records(const fs::path& manifest, Split split, CommandResult& r) {
  require<ValidationError>(!manifest.empty(), (split == Split::train ? "data.train_manifest" : "data.test_manifest"),
                           " is not set");
  std::vector<SampleRecord> out;
  for (auto& rec : load_manifest(manifest, split)) {
    if (rec.readable)
      out.push_back(std::move(rec));
    else
      r.errors.push_back({rec.image_path.string(), rec.issue});
  }
  return out;
}

inline Tensor<float> training_input(const fs::path& image, int size, const Normalization& norm) {
  Tensor<float> t = model_input(read_rgb(image), norm);
  if (t.dim(1) != size || t.dim(2) != size) t = resize_bilinear(t, size, size);
  return t;
}

inline nlohmann::json step_json(const StepRecord& s) {
  return {{"step", s.step}, {"epoch", s.epoch}, {"cls_loss", s.cls_loss}, {"kt_loss", s.kt_loss}, {"total", s.total}};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// train

// Writes checkpoints/epoch_NNN.wsck after every epoch, checkpoints/final.wsck,
// metrics.jsonl and the resolved config. co_training also writes
// checkpoints/peer_final.wsck.
inline CommandResult cmd_train(const PipelineConfig& cfg, const fs::path& root) {
  CommandResult r("train", root);
  const Normalization norm{};
  std::vector<std::string> problems;
  if (cfg.data.train_manifest.empty()) problems.push_back("data.train_manifest is not set");
  if (cfg.mode == TrainMode::teacher_student) {
    if (cfg.data.teacher_checkpoint.empty())
      problems.push_back("teacher_student mode needs data.teacher_checkpoint");
    else if (!fs::exists(cfg.data.teacher_checkpoint))
      problems.push_back("teacher checkpoint not found: " + cfg.data.teacher_checkpoint.string());
  }
  if (!problems.empty()) throw ValidationError(std::move(problems));

  const auto records = detail::readable_records(cfg.data.train_manifest, Split::train, r);
  std::vector<LabeledImage<float>> data;
  for (const auto& rec : records) data.push_back({detail::training_input(rec.image_path, cfg.model.input_size, norm), rec.label});
  require<ValidationError>(!data.empty(), "no readable training images in ", cfg.data.train_manifest.string());

  fs::create_directories(root / "checkpoints");
  auto model = make_model<float>(cfg.model, cfg.train.seed);
  std::string log;
  TrainHooks hooks;
  hooks.on_step = [&](const StepRecord& s) { log += detail::step_json(s).dump() + "\n"; };
  const nlohmann::json meta{{"mode", to_string(cfg.mode)}, {"train", cfg.train}};
  auto save = [&](const ClassifierModel<float>& m, const std::string& name) {
    const fs::path p = root / "checkpoints" / name;
    write_checkpoint(p, make_checkpoint(m, norm, meta));
    detail::record(r, p);
  };
  auto epoch_name = [](int e) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "epoch_%03d.wsck", e + 1);
    return std::string(buf);
  };

  std::vector<StepRecord> trace;
  switch (cfg.mode) {
    case TrainMode::single: {
      hooks.on_epoch_end = [&](int e) { save(*model, epoch_name(e)); };
      trace = train_classifier(*model, data, cfg.train, hooks);
      break;
    }
    case TrainMode::teacher_student: {
      const auto ck = read_checkpoint(cfg.data.teacher_checkpoint);
      auto teacher = model_from_checkpoint<float>(ck);
      teacher->set_trainable(false);
      hooks.on_epoch_end = [&](int e) { save(*model, epoch_name(e)); };
      TrainConfig tc = cfg.train;
      tc.kt.paradigm = Paradigm::teacher_student;
      trace = train_teacher_student(*teacher, *model, data, tc, hooks).trace;
      break;
    }
    case TrainMode::co_training: {
      ModelConfig peer_cfg = cfg.teacher_model;
      peer_cfg.input_size = cfg.model.input_size;
      auto peer = make_model<float>(peer_cfg, cfg.train.seed + 1);
      hooks.on_epoch_end = [&](int e) { save(*model, epoch_name(e)); };
      TrainConfig tc = cfg.train;
      tc.kt.paradigm = Paradigm::co_training;
      trace = train_cotraining(*model, *peer, data, tc, hooks).trace;
      save(*peer, "peer_final.wsck");
      break;
    }
  }
  save(*model, "final.wsck");
  detail::write_text(root / "metrics.jsonl", log);
  detail::record(r, root / "metrics.jsonl");
  r.summary = {{"mode", to_string(cfg.mode)}, {"images", data.size()}, {"steps", trace.size()},
               {"final_loss", trace.empty() ? 0.0 : trace.back().total}};
  detail::write_command_manifest(r);
  return r;
}

// lr_range.csv over a geometric learning-rate span on the training split.
inline CommandResult cmd_lr_range(const PipelineConfig& cfg, const fs::path& root, double lr_min = 1e-6,
                                  double lr_max = 1e-1, int steps = 50) {
  CommandResult r("lr_range", root);
  const Normalization norm{};
  std::vector<LabeledImage<float>> data;
  for (const auto& rec : detail::readable_records(cfg.data.train_manifest, Split::train, r))
    data.push_back({detail::training_input(rec.image_path, cfg.model.input_size, norm), rec.label});
  require<ValidationError>(!data.empty(), "no readable training images in ", cfg.data.train_manifest.string());
  const auto model = make_model<float>(cfg.model, cfg.train.seed);
  const auto curve = lr_range_test(*model, data, lr_min, lr_max, steps, cfg.train.batch_size, cfg.train.seed);
  write_lr_curve(root / "lr_range.csv", curve);
  detail::record(r, root / "lr_range.csv");
  r.summary = {{"points", curve.size()}, {"suggested_lr", suggest_learning_rate(curve)}};
  detail::write_command_manifest(r);
  return r;
}

// ---------------------------------------------------------------------------
// cam

inline ActivationMap<float> compute_image_cam(const ClassifierModel<float>& model, const Tensor<float>& input,
                                              const CamSettings& s) {
  if (!s.layers.empty()) return layer_fusion_cam(model, input, s.layers);
  if (s.scales.size() == 1 && s.scales.front() == 1.0) return single_scale_cam(model, input);
  return multiscale_cam(model, input, s.scales);
}

// One cams/<id>.cam per test image; failures become per-image error entries.
inline CommandResult cmd_cam(const PipelineConfig& cfg, const fs::path& checkpoint, const fs::path& root) {
  CommandResult r("cam", root);
  const auto ck = read_checkpoint(checkpoint);
  const auto model = model_from_checkpoint<float>(ck);
  const Normalization norm = normalization_from_checkpoint(ck);
  for (const auto& rec : detail::readable_records(cfg.data.test_manifest, Split::test, r)) {
    try {
      const auto cam = compute_image_cam(*model, model_input(read_rgb(rec.image_path), norm), cfg.cam);
      const fs::path out = root / "cams" / (rec.id() + ".cam");
      write_cam_file(out, cam);
      detail::record(r, out);
    } catch (const Error& e) {
      r.errors.push_back({rec.image_path.string(), e.what()});
    }
  }
  r.summary = {{"cams", r.produced.size()}, {"failed", r.errors.size()}};
  detail::write_command_manifest(r);
  return r;
}

// ---------------------------------------------------------------------------
// refine

inline std::unique_ptr<ProposalProvider> make_proposal_provider(const SamStage& s, const PipelineConfig& cfg,
                                                                 const fs::path& root) {
  if (s.provider == "directory") return std::make_unique<DirectoryProposalProvider>(s.proposals_dir);
  if (s.provider == "command") return std::make_unique<SubprocessProposalProvider>(s.command, root / "proposals");
  fs::path objects = cfg.data.objects_dir;
  if (objects.empty()) objects = cfg.data.test_manifest.parent_path() / "objects";
  return std::make_unique<ComponentProposalProvider>(
      [objects](const fs::path& image) { return read_object_labels(objects / (image.stem().string() + ".pgm")); },
      s.jitter, s.seed);
}

// State threaded through a recipe: a normalised score map and, once a stage
// has produced one, a mask.
struct RefineState {
  ActivationMap<float> cam;
  std::optional<PseudoMask> mask;
};

inline PseudoMask current_mask(const RefineState& s, double bg_threshold) {
  return s.mask ? *s.mask : cam_to_mask(s.cam, bg_threshold);
}

// An empty recipe reduces to thresholding the CAM.
inline PseudoMask run_recipe(const std::vector<RecipeStage>& recipe, const Image& image, const fs::path& image_path,
                             const ActivationMap<float>& cam, double bg_threshold,
                             const std::vector<ProposalProvider*>& providers,
                             const std::function<void(std::size_t, const PseudoMask&)>& dump = {}) {
  require<ValidationError>(cam.normalized, "refine needs a normalized CAM");
  RefineState state{cam, std::nullopt};
  for (std::size_t i = 0; i < recipe.size(); ++i) {
    const auto& stage = recipe[i];
    if (const auto* p = std::get_if<CrfParams>(&stage.params)) {
      const auto res = crf_refine(image, state.cam, *p);
      const std::size_t n = static_cast<std::size_t>(image.height) * image.width;
      ActivationMap<float> fg;
      fg.data = Tensor<float>({1, image.height, image.width});
      for (std::size_t k = 0; k < n; ++k) fg.data[k] = static_cast<float>(res.probabilities[n + k]);
      fg.normalized = true;
      fg.class_ids = {0};
      state.cam = std::move(fg);
      state.mask = res.mask;
    } else if (const auto* p = std::get_if<RandomWalkParams>(&stage.params)) {
      state.cam = affinity_random_walk(image, state.cam, *p);
      state.mask.reset();
    } else if (const auto* p = std::get_if<ThresholdStage>(&stage.params)) {
      state.mask = cam_to_mask(state.cam, p->bg_threshold.value_or(bg_threshold));
    } else if (const auto* p = std::get_if<SamStage>(&stage.params)) {
      require<ValidationError>(i < providers.size() && providers[i] != nullptr, "sam stage has no proposal provider");
      const auto proposals = providers[i]->generate(image, image_path, p->points_per_side);
      state.mask = sam_enhance(current_mask(state, bg_threshold), proposals, p->iou_thresh, p->strategy);
    }
    if (dump) dump(i, current_mask(state, bg_threshold));
  }
  return current_mask(state, bg_threshold);
}

// masks/<id>.pgm for every test image with a CAM in cam_dir; with
// dump_stages, stages/<k>_<name>/<id>.pgm after each stage.
inline CommandResult cmd_refine(const PipelineConfig& cfg, const fs::path& cam_dir, const fs::path& root) {
  CommandResult r("refine", root);
  std::vector<std::unique_ptr<ProposalProvider>> owned;
  std::vector<ProposalProvider*> providers;
  for (const auto& stage : cfg.recipe) {
    if (const auto* s = std::get_if<SamStage>(&stage.params)) {
      owned.push_back(make_proposal_provider(*s, cfg, root));
      providers.push_back(owned.back().get());
    } else {
      providers.push_back(nullptr);
    }
  }
  for (const auto& rec : detail::readable_records(cfg.data.test_manifest, Split::test, r)) {
    try {
      const Image image = read_rgb(rec.image_path);
      const auto cam = read_cam_file(cam_dir / (rec.id() + ".cam"));
      auto dump = [&](std::size_t k, const PseudoMask& m) {
        if (!cfg.dump_stages) return;
        const fs::path p = root / "stages" / (std::to_string(k + 1) + "_" + cfg.recipe[k].name) / (rec.id() + ".pgm");
        write_mask(p, m.labels);
        detail::record(r, p);
      };
      const auto mask = run_recipe(cfg.recipe, image, rec.image_path, cam, cfg.cam.bg_threshold, providers, dump);
      const fs::path out = root / "masks" / (rec.id() + ".pgm");
      write_mask(out, mask.labels);
      detail::record(r, out);
    } catch (const Error& e) {
      r.errors.push_back({rec.image_path.string(), e.what()});
    }
  }
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : cfg.recipe) stages.push_back(s.name);
  r.summary = {{"recipe", stages}, {"failed", r.errors.size()}};
  detail::write_command_manifest(r);
  return r;
}

// ---------------------------------------------------------------------------
// eval / sweep

// report.csv and report.txt comparing mask_dir/<id>.pgm against ground truth.
inline CommandResult cmd_eval(const PipelineConfig& cfg, const fs::path& mask_dir, const fs::path& root) {
  CommandResult r("eval", root);
  const auto records = detail::readable_records(cfg.data.test_manifest, Split::test, r);
  std::vector<std::string> missing;
  for (const auto& rec : records)
    if (!fs::exists(mask_dir / (rec.id() + ".pgm"))) missing.push_back("no predicted mask for " + rec.id());
  if (!missing.empty()) throw ValidationError(std::move(missing));
  ReportRow row{cfg.method_name, {}, 0};
  for (const auto& rec : records) {
    try {
      row.counts = accumulate_confusion(read_mask(mask_dir / (rec.id() + ".pgm")), read_mask(*rec.mask_path), row.counts);
      ++row.images;
    } catch (const Error& e) {
      r.errors.push_back({rec.image_path.string(), e.what()});
    }
  }
  detail::write_text(root / "report.csv", report_csv({row}));
  detail::write_text(root / "report.txt", report_text({row}));
  detail::record(r, root / "report.csv");
  detail::record(r, root / "report.txt");
  const auto iou = smoke_iou(row.counts);
  r.summary = {{"images", row.images}, {"smoke_iou", iou ? nlohmann::json(*iou) : nlohmann::json(nullptr)}};
  detail::write_command_manifest(r);
  return r;
}

// sweep.csv and sweep.txt over the configured threshold grid.
inline CommandResult cmd_sweep(const PipelineConfig& cfg, const fs::path& cam_dir, const fs::path& root) {
  CommandResult r("sweep", root);
  std::vector<ActivationMap<float>> cams;
  std::vector<Tensor<int>> gts;
  for (const auto& rec : detail::readable_records(cfg.data.test_manifest, Split::test, r)) {
    try {
      auto cam = read_cam_file(cam_dir / (rec.id() + ".cam"));
      auto gt = read_mask(*rec.mask_path);
      require<ShapeError>(cam.height() == gt.dim(0) && cam.width() == gt.dim(1), "cam and mask sizes differ");
      cams.push_back(std::move(cam));
      gts.push_back(std::move(gt));
    } catch (const Error& e) {
      r.errors.push_back({rec.image_path.string(), e.what()});
    }
  }
  const auto s = threshold_sweep(cams, gts, cfg.eval_grid);
  detail::write_text(root / "sweep.csv", sweep_csv(s));
  detail::write_text(root / "sweep.txt", sweep_text(s));
  detail::record(r, root / "sweep.csv");
  detail::record(r, root / "sweep.txt");
  r.summary = {{"images", cams.size()},
               {"best_threshold", s.best_threshold},
               {"best_iou", s.best_iou ? nlohmann::json(*s.best_iou) : nlohmann::json(nullptr)}};
  detail::write_command_manifest(r);
  return r;
}

// ---------------------------------------------------------------------------
// synth

// synth/train.tsv and synth/test.tsv with their images, masks and sidecars.
inline CommandResult cmd_synth(const PipelineConfig& cfg, const fs::path& root) {
  CommandResult r("synth", root);
  const fs::path dir = root / "synth";
  const fs::path train = generate_split(dir, cfg.synth.train, "train");
  const fs::path test = generate_split(dir, cfg.synth.test, "test");
  for (const auto& entry : fs::recursive_directory_iterator(dir))
    if (entry.is_regular_file()) detail::record(r, entry.path());
  r.summary = {{"train_manifest", train.lexically_relative(root).generic_string()},
               {"test_manifest", test.lexically_relative(root).generic_string()},
               {"train", cfg.synth.train},
               {"test", cfg.synth.test}};
  detail::write_command_manifest(r);
  return r;
}

}  // namespace wsss
