#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "wsss/pipeline.hpp"

using namespace wsss;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json tiny_model() {
  return {{"channels", {4, 6}}, {"strides", {1, 2}}, {"input_size", 32}, {"pcm", false}};
}

nlohmann::json base_config() {
  return {{"model", tiny_model()},
          {"teacher_model", tiny_model()},
          {"train", {{"epochs", 1}, {"batch_size", 4}, {"learning_rate", 1e-3}, {"seed", 3}}},
          {"synth", {{"train", {{"count", 8}, {"coupling", 1.0}, {"seed", 1}, {"height", 32}, {"width", 32}}},
                     {"test", {{"count", 4}, {"coupling", 0.0}, {"seed", 2}, {"height", 32}, {"width", 32}}}}}};
}

void expect_same_outputs(const CommandResult& a, const CommandResult& b) {
  ASSERT_EQ(a.produced, b.produced);
  for (const auto& p : a.produced) EXPECT_EQ(slurp(a.output_root / p), slurp(b.output_root / p)) << p;
  const std::string manifest = a.command + ".manifest.json";
  EXPECT_EQ(slurp(a.output_root / manifest), slurp(b.output_root / manifest));
}

// Runs synth, teacher training, student training and cam once for the suite.
class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "wsss_pipeline_test";
    fs::remove_all(dir_);
    cfg_ = parse_pipeline_config(base_config());
    cmd_synth(cfg_, dir_ / "a");
    cfg_.data.train_manifest = dir_ / "a" / "synth" / "train.tsv";
    cfg_.data.test_manifest = dir_ / "a" / "synth" / "test.tsv";

    PipelineConfig teacher = cfg_;
    teacher.mode = TrainMode::single;
    cmd_train(teacher, dir_ / "teacher");
    cfg_.data.teacher_checkpoint = dir_ / "teacher" / "checkpoints" / "final.wsck";
    cmd_train(cfg_, dir_ / "student");
    cmd_cam(cfg_, dir_ / "student" / "checkpoints" / "final.wsck", dir_ / "cam");
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }

  static std::vector<SampleRecord> test_records() { return load_manifest(cfg_.data.test_manifest, Split::test); }

  static inline fs::path dir_;
  static inline PipelineConfig cfg_;
};

}  // namespace

TEST(PipelineConfig, DefaultsParseFromEmptyObject) {
  const auto c = parse_pipeline_config(nlohmann::json::object());
  EXPECT_EQ(c.mode, TrainMode::teacher_student);
  EXPECT_EQ(c.cam.scales, std::vector<double>{1.0});
  EXPECT_DOUBLE_EQ(c.cam.bg_threshold, 0.3);
  EXPECT_TRUE(c.recipe.empty());
  EXPECT_EQ(c.eval_grid, default_threshold_grid());
  EXPECT_EQ(c.output_dir, fs::path("runs"));
  EXPECT_EQ(c.train.kt.paradigm, Paradigm::teacher_student);
}

TEST(PipelineConfig, EveryProblemIsReportedAtOnce) {
  nlohmann::json j{{"bogus", 1},
                   {"mode", "distill"},
                   {"cam", {{"bg_threshold", 2.0}, {"scales", nlohmann::json::array()}}},
                   {"recipe", {"crf", "blur", {{"stage", "sam"}, {"params", {{"iou_thresh", 3.0}}}}}},
                   {"eval", {{"grid", {0.5, 0.1}}}},
                   {"synth", {{"train", {{"count", 0}}}}}};
  try {
    parse_pipeline_config(j);
    FAIL() << "expected a ValidationError";
  } catch (const ValidationError& e) {
    const auto& p = e.problems();
    auto mentions = [&](const std::string& needle) {
      return std::any_of(p.begin(), p.end(), [&](const std::string& s) { return s.find(needle) != std::string::npos; });
    };
    EXPECT_TRUE(mentions("bogus"));
    EXPECT_TRUE(mentions("distill"));
    EXPECT_TRUE(mentions("bg_threshold"));
    EXPECT_TRUE(mentions("scales must not be empty"));
    EXPECT_TRUE(mentions("blur"));
    EXPECT_TRUE(mentions("iou_thresh"));
    EXPECT_TRUE(mentions("grid must be sorted"));
    EXPECT_TRUE(mentions("count"));
    EXPECT_GE(p.size(), 8u);
  }
}

TEST(PipelineConfig, RecipeStagesAcceptNamesAndObjects) {
  nlohmann::json j{{"recipe",
                    {"crf",
                     {{"stage", "random_walk"}, {"params", {{"steps", 2}}}},
                     {{"stage", "threshold"}, {"params", {{"bg_threshold", 0.6}}}},
                     {{"stage", "sam"}, {"params", {{"strategy", "COPY"}, {"points_per_side", 4}}}}}}};
  const auto c = parse_pipeline_config(j);
  ASSERT_EQ(c.recipe.size(), 4u);
  EXPECT_TRUE(std::holds_alternative<CrfParams>(c.recipe[0].params));
  EXPECT_EQ(std::get<RandomWalkParams>(c.recipe[1].params).steps, 2);
  EXPECT_DOUBLE_EQ(*std::get<ThresholdStage>(c.recipe[2].params).bg_threshold, 0.6);
  EXPECT_EQ(std::get<SamStage>(c.recipe[3].params).points_per_side, 4);
  EXPECT_EQ(std::get<SamStage>(c.recipe[3].params).provider, "components");
}

TEST(PipelineConfig, SamProviderNeedsItsSource) {
  EXPECT_THROW(parse_pipeline_config({{"recipe", {{{"stage", "sam"}, {"params", {{"provider", "directory"}}}}}}}),
               ValidationError);
  EXPECT_THROW(parse_pipeline_config({{"recipe", {{{"stage", "sam"}, {"params", {{"provider", "command"}}}}}}}),
               ValidationError);
  EXPECT_THROW(parse_pipeline_config({{"recipe", {{{"stage", "sam"}, {"params", {{"provider", "oracle"}}}}}}}),
               ValidationError);
}

TEST(PipelineConfig, ModeSetsTheTransferParadigm) {
  EXPECT_EQ(parse_pipeline_config({{"mode", "co_training"}}).train.kt.paradigm, Paradigm::co_training);
  EXPECT_EQ(parse_pipeline_config({{"mode", "teacher_student"}, {"train", {{"kt", {{"paradigm", "co_training"}}}}}})
                .train.kt.paradigm,
            Paradigm::teacher_student);
}

TEST(PipelineConfig, RelativePathsResolveAgainstTheConfigDirectory) {
  const fs::path dir = fs::temp_directory_path() / "wsss_cfg_dir" / "nested";
  fs::create_directories(dir);
  nlohmann::json j{{"data", {{"train_manifest", "d/train.tsv"}, {"test_manifest", "/abs/test.tsv"}}},
                   {"output_dir", "out"},
                   {"recipe", {{{"stage", "sam"}, {"params", {{"provider", "directory"}, {"proposals_dir", "props"}}}}}}};
  std::ofstream(dir / "c.json") << j.dump();
  const auto c = load_pipeline_config(dir / "c.json");
  EXPECT_EQ(c.data.train_manifest, dir / "d/train.tsv");
  EXPECT_EQ(c.data.test_manifest, fs::path("/abs/test.tsv"));
  EXPECT_EQ(c.output_dir, dir / "out");
  EXPECT_EQ(std::get<SamStage>(c.recipe[0].params).proposals_dir, dir / "props");
  fs::remove_all(dir.parent_path());
}

TEST(PipelineConfig, LoadErrors) {
  EXPECT_THROW(load_pipeline_config("/nonexistent/wsss.json"), IoError);
  const fs::path p = fs::temp_directory_path() / "wsss_bad_cfg.json";
  std::ofstream(p) << "{ not json";
  EXPECT_THROW(load_pipeline_config(p), ValidationError);
  fs::remove(p);
}

TEST(OutputRoot, FlagBeatsEnvironmentBeatsConfig) {
  PipelineConfig c;
  c.output_dir = "from_config";
  unsetenv(kOutputRootEnv);
  EXPECT_EQ(resolve_output_root(c), fs::path("from_config"));
  setenv(kOutputRootEnv, "from_env", 1);
  EXPECT_EQ(resolve_output_root(c), fs::path("from_env"));
  EXPECT_EQ(resolve_output_root(c, fs::path("from_flag")), fs::path("from_flag"));
  setenv(kOutputRootEnv, "", 1);
  EXPECT_EQ(resolve_output_root(c), fs::path("from_config"));
  unsetenv(kOutputRootEnv);
}

TEST(Recipe, EmptyRecipeIsPlainThresholding) {
  SceneSpec spec;
  spec.height = spec.width = 32;
  const auto scene = generate_scene(spec);
  ActivationMap<float> cam;
  cam.data = Tensor<float>({1, 32, 32});
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) cam.data(0, y, x) = static_cast<float>((x + y) / 62.0);
  cam.normalized = true;
  cam.class_ids = {0};
  const Image& img = scene.image;
  for (double t : {0.1, 0.3, 0.7}) {
    EXPECT_EQ(run_recipe({}, img, "x.png", cam, t, {}).labels.storage(), cam_to_mask(cam, t).labels.storage());
    const std::vector<RecipeStage> explicit_threshold{{"threshold", ThresholdStage{}}};
    EXPECT_EQ(run_recipe(explicit_threshold, img, "x.png", cam, t, {nullptr}).labels.storage(),
              cam_to_mask(cam, t).labels.storage());
  }
  const std::vector<RecipeStage> override_threshold{{"threshold", ThresholdStage{0.8}}};
  EXPECT_EQ(run_recipe(override_threshold, img, "x.png", cam, 0.1, {nullptr}).labels.storage(),
            cam_to_mask(cam, 0.8).labels.storage());
  ActivationMap<float> raw = cam;
  raw.normalized = false;
  EXPECT_THROW(run_recipe({}, img, "x.png", raw, 0.3, {}), ValidationError);
}

TEST_F(Pipeline, SynthWritesManifestsAndIsByteIdenticalOnRerun) {
  const auto again = cmd_synth(cfg_, dir_ / "b");
  const auto first = nlohmann::json::parse(slurp(dir_ / "a" / "synth.manifest.json"));
  EXPECT_EQ(first.at("summary").at("train_manifest"), "synth/train.tsv");
  EXPECT_EQ(load_manifest(cfg_.data.train_manifest, Split::train).size(), 8u);
  EXPECT_EQ(test_records().size(), 4u);
  CommandResult original("synth", dir_ / "a");
  for (const auto& f : first.at("files")) original.produced.push_back(f.at("path").get<std::string>());
  expect_same_outputs(original, again);
}

TEST_F(Pipeline, TrainingWritesCheckpointsAndIsDeterministic) {
  for (const auto& name : {"epoch_001.wsck", "final.wsck"})
    EXPECT_TRUE(fs::exists(dir_ / "student" / "checkpoints" / name));
  const auto rerun = cmd_train(cfg_, dir_ / "student2");
  CommandResult first("train", dir_ / "student");
  first.produced = rerun.produced;
  expect_same_outputs(first, rerun);
  std::istringstream log(slurp(dir_ / "student" / "metrics.jsonl"));
  std::string line;
  int steps = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("step"), ++steps);
    EXPECT_TRUE(j.contains("kt_loss"));
  }
  EXPECT_EQ(steps, 2);
}

TEST_F(Pipeline, MissingTeacherIsFatal) {
  PipelineConfig c = cfg_;
  c.data.teacher_checkpoint.clear();
  EXPECT_THROW(cmd_train(c, dir_ / "no_teacher"), ValidationError);
  c.data.teacher_checkpoint = dir_ / "nowhere.wsck";
  EXPECT_THROW(cmd_train(c, dir_ / "no_teacher"), ValidationError);
  EXPECT_FALSE(fs::exists(dir_ / "no_teacher" / "checkpoints" / "final.wsck"));
}

TEST_F(Pipeline, ZeroLambdaRunLogsNoTransferLoss) {
  PipelineConfig c = cfg_;
  c.train.kt.lambda = 0.0;
  const auto r = cmd_train(c, dir_ / "lambda0");
  EXPECT_TRUE(r.ok());
  std::istringstream log(slurp(dir_ / "lambda0" / "metrics.jsonl"));
  std::string line;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_DOUBLE_EQ(j.at("total").get<double>(), j.at("cls_loss").get<double>());
  }
}

TEST_F(Pipeline, CoTrainingWritesBothPeers) {
  PipelineConfig c = cfg_;
  c.mode = TrainMode::co_training;
  c.train.kt.paradigm = Paradigm::co_training;
  const auto r = cmd_train(c, dir_ / "cot");
  EXPECT_TRUE(fs::exists(dir_ / "cot" / "checkpoints" / "peer_final.wsck"));
  EXPECT_TRUE(fs::exists(dir_ / "cot" / "checkpoints" / "final.wsck"));
}

TEST_F(Pipeline, CamWritesOneNormalizedMapPerTestImage) {
  const auto recs = test_records();
  for (const auto& rec : recs) {
    const auto cam = read_cam_file(dir_ / "cam" / "cams" / (rec.id() + ".cam"));
    EXPECT_TRUE(cam.normalized);
    EXPECT_EQ(cam.height(), 32);
    EXPECT_EQ(cam.width(), 32);
  }
  const auto rerun = cmd_cam(cfg_, dir_ / "student" / "checkpoints" / "final.wsck", dir_ / "cam2");
  EXPECT_EQ(rerun.produced.size(), recs.size());
  CommandResult first("cam", dir_ / "cam");
  first.produced = rerun.produced;
  expect_same_outputs(first, rerun);
}

TEST_F(Pipeline, RefineWithEmptyRecipeMatchesThresholdAndIsIdempotent) {
  const auto r = cmd_refine(cfg_, dir_ / "cam" / "cams", dir_ / "refine");
  EXPECT_TRUE(r.ok());
  for (const auto& rec : test_records()) {
    const auto cam = read_cam_file(dir_ / "cam" / "cams" / (rec.id() + ".cam"));
    EXPECT_EQ(read_mask(dir_ / "refine" / "masks" / (rec.id() + ".pgm")).storage(),
              cam_to_mask(cam, cfg_.cam.bg_threshold).labels.storage());
  }
  expect_same_outputs(r, cmd_refine(cfg_, dir_ / "cam" / "cams", dir_ / "refine2"));
}

TEST_F(Pipeline, RefineDumpsEveryStage) {
  PipelineConfig c = cfg_;
  c.recipe = parse_pipeline_config({{"recipe", {"crf", {{"stage", "random_walk"}, {"params", {{"steps", 1}}}}, "sam"}}})
                 .recipe;
  c.dump_stages = true;
  const auto r = cmd_refine(c, dir_ / "cam" / "cams", dir_ / "refine_dump");
  EXPECT_TRUE(r.ok());
  for (const auto& rec : test_records()) {
    for (const auto& stage : {"1_crf", "2_random_walk", "3_sam"})
      EXPECT_TRUE(fs::exists(dir_ / "refine_dump" / "stages" / stage / (rec.id() + ".pgm")));
    EXPECT_EQ(slurp(dir_ / "refine_dump" / "stages" / "3_sam" / (rec.id() + ".pgm")),
              slurp(dir_ / "refine_dump" / "masks" / (rec.id() + ".pgm")));
  }
  const auto manifest = nlohmann::json::parse(slurp(dir_ / "refine_dump" / "refine.manifest.json"));
  EXPECT_EQ(manifest.at("files").size(), 4u * 4u);
  EXPECT_EQ(manifest.at("summary").at("recipe"), nlohmann::json({"crf", "random_walk", "sam"}));
}

TEST_F(Pipeline, MissingCamBecomesAPerImageError) {
  const fs::path cams = dir_ / "partial_cams";
  fs::create_directories(cams);
  const auto recs = test_records();
  fs::copy_file(dir_ / "cam" / "cams" / (recs[0].id() + ".cam"), cams / (recs[0].id() + ".cam"));
  const auto r = cmd_refine(cfg_, cams, dir_ / "partial");
  EXPECT_EQ(r.produced.size(), 1u);
  EXPECT_EQ(r.errors.size(), recs.size() - 1);
  EXPECT_FALSE(r.ok());
}

TEST_F(Pipeline, EvalOfGroundTruthIsPerfectAndEmptyMasksScoreZero) {
  const fs::path perfect = dir_ / "perfect", empty = dir_ / "empty";
  bool any_smoke = false;
  for (const auto& rec : test_records()) {
    const auto gt = read_mask(*rec.mask_path);
    write_mask(perfect / (rec.id() + ".pgm"), gt);
    write_mask(empty / (rec.id() + ".pgm"), Tensor<int>({gt.dim(0), gt.dim(1)}, 0));
    any_smoke = any_smoke || std::count(gt.storage().begin(), gt.storage().end(), 1) > 0;
  }
  ASSERT_TRUE(any_smoke);
  EXPECT_DOUBLE_EQ(cmd_eval(cfg_, perfect, dir_ / "eval_perfect").summary.at("smoke_iou").get<double>(), 1.0);
  EXPECT_DOUBLE_EQ(cmd_eval(cfg_, empty, dir_ / "eval_empty").summary.at("smoke_iou").get<double>(), 0.0);
  EXPECT_TRUE(fs::exists(dir_ / "eval_perfect" / "report.csv"));
  EXPECT_TRUE(fs::exists(dir_ / "eval_perfect" / "report.txt"));
}

TEST_F(Pipeline, EvalRejectsMissingPredictions) {
  const fs::path partial = dir_ / "eval_missing_masks";
  const auto recs = test_records();
  write_mask(partial / (recs[0].id() + ".pgm"), read_mask(*recs[0].mask_path));
  try {
    cmd_eval(cfg_, partial, dir_ / "eval_missing");
    FAIL() << "expected a ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.problems().size(), recs.size() - 1);
  }
}

TEST_F(Pipeline, EvalMatchesPooledConfusionOracle) {
  const fs::path masks = dir_ / "refine" / "masks";
  if (!fs::exists(masks)) cmd_refine(cfg_, dir_ / "cam" / "cams", dir_ / "refine");
  long long tp = 0, fp = 0, fn = 0;
  for (const auto& rec : test_records()) {
    const auto pred = read_mask(masks / (rec.id() + ".pgm"));
    const auto gt = read_mask(*rec.mask_path);
    for (std::size_t i = 0; i < gt.size(); ++i) {
      tp += pred[i] == 1 && gt[i] == 1;
      fp += pred[i] == 1 && gt[i] != 1;
      fn += pred[i] != 1 && gt[i] == 1;
    }
  }
  const auto r = cmd_eval(cfg_, masks, dir_ / "eval_refine");
  ASSERT_GT(tp + fp + fn, 0);
  EXPECT_NEAR(r.summary.at("smoke_iou").get<double>(), static_cast<double>(tp) / (tp + fp + fn), 1e-12);
  expect_same_outputs(r, cmd_eval(cfg_, masks, dir_ / "eval_refine2"));
}

TEST_F(Pipeline, SweepPicksTheBestGridThreshold) {
  PipelineConfig c = cfg_;
  c.eval_grid = {0.1, 0.5, 0.9};
  const auto r = cmd_sweep(c, dir_ / "cam" / "cams", dir_ / "sweep");
  EXPECT_EQ(r.summary.at("images"), 4);
  const double best = r.summary.at("best_threshold").get<double>();
  EXPECT_TRUE(best == 0.1 || best == 0.5 || best == 0.9);
  EXPECT_TRUE(fs::exists(dir_ / "sweep" / "sweep.csv"));
}

TEST_F(Pipeline, LrRangeWritesTheCurveAndASuggestion) {
  const auto r = cmd_lr_range(cfg_, dir_ / "lr", 1e-5, 1e-1, 5);
  std::istringstream csv(slurp(dir_ / "lr" / "lr_range.csv"));
  std::string line;
  int rows = 0;
  std::getline(csv, line);
  EXPECT_EQ(line, "lr,loss,smoothed");
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 5);
  const double lr = r.summary.at("suggested_lr").get<double>();
  EXPECT_GT(lr, 0.0);
  EXPECT_LE(lr, 1e-1);
  expect_same_outputs(r, cmd_lr_range(cfg_, dir_ / "lr2", 1e-5, 1e-1, 5));
}
