// wsss: command-line front end for the pipeline.

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "wsss/wsss.hpp"

namespace {

using namespace wsss;
using nlohmann::json;

struct Common {
  std::string config;
  std::string output;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("-c,--config", c.config, "pipeline config (JSON)");
  sub->add_option("-o,--output", c.output, "output root (overrides WSSS_OUTPUT_ROOT and the config)");
}

PipelineConfig load(const Common& c) { return c.config.empty() ? PipelineConfig{} : load_pipeline_config(c.config); }

fs::path root_of(const PipelineConfig& cfg, const Common& c) {
  return resolve_output_root(cfg, c.output.empty() ? std::nullopt : std::optional<fs::path>(c.output));
}

int report(const CommandResult& r) {
  std::cout << json{{"command", r.command}, {"output_root", r.output_root.string()}, {"summary", r.summary}}.dump(2)
            << "\n";
  if (r.ok()) return 0;
  json errors = json::array();
  for (const auto& e : r.errors) errors.push_back({{"image", e.image}, {"error", e.error}});
  std::cerr << json{{"status", "error"}, {"kind", "per_image"}, {"command", r.command}, {"errors", errors}}.dump(2)
            << "\n";
  return 3;
}

int error_summary(const std::string& kind, const std::string& message, const std::vector<std::string>& problems = {}) {
  std::cerr << json{{"status", "error"}, {"kind", kind}, {"message", message}, {"problems", problems}}.dump(2) << "\n";
  return kind == "validation" ? 2 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weakly supervised smoke segmentation toolkit"};
  app.require_subcommand(1);

  Common train_c, cam_c, refine_c, eval_c, sweep_c, synth_c;

  auto* train = app.add_subcommand("train", "train a classifier (teacher_student, co_training or single)");
  add_common(train, train_c);
  std::string mode, teacher;
  std::optional<double> lambda, lr;
  std::optional<int> epochs;
  std::optional<std::uint64_t> seed;
  train->add_option("--mode", mode, "teacher_student | co_training | single");
  train->add_option("--teacher", teacher, "teacher checkpoint");
  train->add_option("--lambda", lambda, "knowledge transfer weight");
  train->add_option("--epochs", epochs);
  train->add_option("--lr", lr, "learning rate");
  train->add_option("--seed", seed);

  auto* cam = app.add_subcommand("cam", "write one CAM file per test image");
  add_common(cam, cam_c);
  std::string checkpoint;
  std::vector<double> scales;
  std::vector<int> layers;
  bool multiscale = false;
  cam->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  cam->add_option("--scales", scales, "CAM scales");
  cam->add_flag("--multiscale", multiscale, "use scales 0.5 1.0 1.5 2.0");
  cam->add_option("--layers", layers, "tap indices to fuse");

  auto* refine = app.add_subcommand("refine", "turn CAMs into pseudo-masks with the configured recipe");
  add_common(refine, refine_c);
  std::string refine_cams, recipe;
  std::optional<int> pps;
  bool dump = false;
  refine->add_option("--cams", refine_cams, "CAM directory")->required();
  refine->add_option("--recipe", recipe, "comma-separated stages with default parameters, e.g. crf,sam");
  refine->add_option("--points-per-side", pps, "prompt grid for proposal stages (default 32)");
  refine->add_flag("--dump-stages", dump, "write the mask after every stage");

  auto* eval = app.add_subcommand("eval", "score masks against ground truth");
  add_common(eval, eval_c);
  std::string masks, method;
  eval->add_option("--masks", masks, "mask directory")->required();
  eval->add_option("--method", method, "row label in the report");

  auto* sweep = app.add_subcommand("sweep", "sweep the CAM threshold");
  add_common(sweep, sweep_c);
  std::string sweep_cams;
  sweep->add_option("--cams", sweep_cams, "CAM directory")->required();

  auto* synth = app.add_subcommand("synth", "generate synthetic train/test splits");
  add_common(synth, synth_c);
  std::optional<int> train_count, test_count, size;
  std::optional<double> train_coupling, test_coupling;
  std::optional<std::uint64_t> synth_seed;
  synth->add_option("--train-count", train_count);
  synth->add_option("--test-count", test_count);
  synth->add_option("--size", size, "scene height and width");
  synth->add_option("--train-coupling", train_coupling);
  synth->add_option("--test-coupling", test_coupling);
  synth->add_option("--seed", synth_seed, "base seed (train uses seed, test seed+1)");

  auto* propose = app.add_subcommand("propose", "write mask proposals from an object label image");
  std::string p_image, p_labels, p_out;
  int p_points = 32;
  double p_jitter = 0.0;
  std::uint64_t p_seed = 0;
  propose->add_option("--image", p_image)->required();
  propose->add_option("--labels", p_labels, "object label image")->required();
  propose->add_option("--out", p_out, "proposal directory")->required();
  propose->add_option("--points-per-side", p_points, "prompt grid (default 32)");
  propose->add_option("--jitter", p_jitter, "boundary perturbation probability");
  propose->add_option("--seed", p_seed);

  Common lr_c;
  auto* lr_range = app.add_subcommand("lr-range", "learning-rate range test on the training split");
  add_common(lr_range, lr_c);
  double lr_min = 1e-6, lr_max = 1e-1;
  int lr_steps = 50;
  lr_range->add_option("--min", lr_min, "smallest learning rate");
  lr_range->add_option("--max", lr_max, "largest learning rate");
  lr_range->add_option("--steps", lr_steps, "points on the geometric span");

  auto* bench = app.add_subcommand("bench", "run the co-occurrence benchmark");
  std::string bench_config;
  int bench_seeds = 5;
  bench->add_option("-c,--config", bench_config, "benchmark config (JSON)");
  bench->add_option("--seeds", bench_seeds, "number of seeds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return error_summary("usage", e.what());
  }

  try {
    if (train->parsed()) {
      auto cfg = load(train_c);
      if (!mode.empty()) {
        cfg.mode = parse_train_mode(mode);
        if (cfg.mode == TrainMode::teacher_student) cfg.train.kt.paradigm = Paradigm::teacher_student;
        if (cfg.mode == TrainMode::co_training) cfg.train.kt.paradigm = Paradigm::co_training;
      }
      if (!teacher.empty()) cfg.data.teacher_checkpoint = teacher;
      if (lambda) cfg.train.kt.lambda = *lambda;
      if (epochs) cfg.train.epochs = *epochs;
      if (lr) cfg.train.learning_rate = *lr;
      if (seed) cfg.train.seed = *seed;
      cfg.train.validate();
      return report(cmd_train(cfg, root_of(cfg, train_c)));
    }
    if (cam->parsed()) {
      auto cfg = load(cam_c);
      if (multiscale) cfg.cam.scales = {0.5, 1.0, 1.5, 2.0};
      if (!scales.empty()) cfg.cam.scales = scales;
      if (!layers.empty()) cfg.cam.layers = layers;
      return report(cmd_cam(cfg, checkpoint, root_of(cfg, cam_c)));
    }
    if (refine->parsed()) {
      auto cfg = load(refine_c);
      if (!recipe.empty()) {
        json stages = json::array();
        std::stringstream ss(recipe);
        for (std::string s; std::getline(ss, s, ',');)
          if (!s.empty()) stages.push_back(s);
        cfg.recipe = parse_pipeline_config(json{{"recipe", stages}}).recipe;
      }
      if (pps)
        for (auto& stage : cfg.recipe)
          if (auto* s = std::get_if<SamStage>(&stage.params)) s->points_per_side = *pps;
      if (dump) cfg.dump_stages = true;
      return report(cmd_refine(cfg, refine_cams, root_of(cfg, refine_c)));
    }
    if (eval->parsed()) {
      auto cfg = load(eval_c);
      if (!method.empty()) cfg.method_name = method;
      const auto r = cmd_eval(cfg, masks, root_of(cfg, eval_c));
      std::ifstream text(r.output_root / "report.txt");
      std::cout << text.rdbuf();
      return report(r);
    }
    if (sweep->parsed()) {
      auto cfg = load(sweep_c);
      const auto r = cmd_sweep(cfg, sweep_cams, root_of(cfg, sweep_c));
      std::ifstream text(r.output_root / "sweep.txt");
      std::cout << text.rdbuf();
      return report(r);
    }
    if (synth->parsed()) {
      auto cfg = load(synth_c);
      if (train_count) cfg.synth.train.count = *train_count;
      if (test_count) cfg.synth.test.count = *test_count;
      if (size) cfg.synth.train.height = cfg.synth.train.width = cfg.synth.test.height = cfg.synth.test.width = *size;
      if (train_coupling) cfg.synth.train.coupling = *train_coupling;
      if (test_coupling) cfg.synth.test.coupling = *test_coupling;
      if (synth_seed) {
        cfg.synth.train.seed = *synth_seed;
        cfg.synth.test.seed = *synth_seed + 1;
      }
      return report(cmd_synth(cfg, root_of(cfg, synth_c)));
    }
    if (propose->parsed()) {
      const Image image = read_rgb(p_image);
      const Tensor<int> labels = read_object_labels(p_labels);
      require<ShapeError>(labels.dim(0) == image.height && labels.dim(1) == image.width,
                          "label image does not match the image size");
      const auto proposals = ComponentProposalProvider::from_labels(labels, p_points, p_jitter, p_seed);
      write_proposals(p_out, fs::path(p_image).filename().string(), p_points, proposals);
      std::cout << json{{"proposals", proposals.size()}, {"out", p_out}}.dump() << "\n";
      return 0;
    }
    if (lr_range->parsed()) {
      const auto cfg = load(lr_c);
      return report(cmd_lr_range(cfg, root_of(cfg, lr_c), lr_min, lr_max, lr_steps));
    }
    if (bench->parsed()) {
      BenchConfig cfg;
      if (!bench_config.empty()) {
        std::ifstream in(bench_config);
        require<IoError>(static_cast<bool>(in), "config not found: ", bench_config);
        cfg = json::parse(in).get<BenchConfig>();
      }
      json seeds = json::array();
      for (int s = 0; s < bench_seeds; ++s) {
        const auto r = run_bench_seed(cfg, static_cast<std::uint64_t>(s),
                                      [&](const std::string& m) { std::cerr << "[seed " << s << "] " << m << "\n"; });
        json students = json::object();
        for (const auto& [l, m] : r.students)
          students[std::to_string(l)] = {{"iou", m.iou.value_or(0.0)}, {"chimney_ratio", m.chimney_ratio}};
        seeds.push_back({{"seed", s},
                         {"teacher", {{"iou", r.teacher.iou.value_or(0.0)}, {"chimney_ratio", r.teacher.chimney_ratio}}},
                         {"baseline", {{"iou", r.baseline.iou.value_or(0.0)}, {"chimney_ratio", r.baseline.chimney_ratio}}},
                         {"students", students}});
      }
      std::cout << json{{"config", cfg}, {"seeds", seeds}}.dump(2) << "\n";
      return 0;
    }
  } catch (const ValidationError& e) {
    return error_summary("validation", e.what(), e.problems());
  } catch (const ShapeError& e) {
    return error_summary("shape", e.what());
  } catch (const IoError& e) {
    return error_summary("io", e.what());
  } catch (const std::exception& e) {
    return error_summary("internal", e.what());
  }
  return 0;
}
