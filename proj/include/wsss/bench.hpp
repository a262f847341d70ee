#pragma once

// Co-occurrence bias benchmark on synthetic scenes: a plain attention
// classifier against students trained with knowledge transfer from a
// convolutional teacher, scored by smoke IoU and chimney activation share.

#include <map>
#include <optional>
#include <vector>

#include "json.hpp"
#include "wsss/metrics.hpp"
#include "wsss/synthetic.hpp"
#include "wsss/trainer.hpp"

namespace wsss {

struct BenchConfig {
  int train_count = 500;
  int test_count = 100;
  int size = 64;
  double train_coupling = 1.0;
  double test_coupling = 0.0;
  // "biased" trains the teacher on the training split itself; "decoupled"
  // pre-trains it on an auxiliary split without the shortcut.
  std::string teacher_data = "biased";
  int teacher_aux_count = 500;
  double bg_threshold = 0.3;
  ModelConfig teacher_model{};
  ModelConfig student_model = [] {
    ModelConfig m;
    m.arch = Arch::attention;
    return m;
  }();
  TrainConfig teacher_train{};
  TrainConfig student_train{};
  std::vector<double> lambdas{1.0};
};

inline void to_json(nlohmann::json& j, const BenchConfig& c) {
  j = nlohmann::json{{"train_count", c.train_count},
                     {"test_count", c.test_count},
                     {"size", c.size},
                     {"train_coupling", c.train_coupling},
                     {"test_coupling", c.test_coupling},
                     {"teacher_data", c.teacher_data},
                     {"teacher_aux_count", c.teacher_aux_count},
                     {"bg_threshold", c.bg_threshold},
                     {"teacher_model", c.teacher_model},
                     {"student_model", c.student_model},
                     {"teacher_train", c.teacher_train},
                     {"student_train", c.student_train},
                     {"lambdas", c.lambdas}};
}

inline void from_json(const nlohmann::json& j, BenchConfig& c) {
  c.train_count = j.value("train_count", c.train_count);
  c.test_count = j.value("test_count", c.test_count);
  c.size = j.value("size", c.size);
  c.train_coupling = j.value("train_coupling", c.train_coupling);
  c.test_coupling = j.value("test_coupling", c.test_coupling);
  c.teacher_data = j.value("teacher_data", c.teacher_data);
  c.teacher_aux_count = j.value("teacher_aux_count", c.teacher_aux_count);
  c.bg_threshold = j.value("bg_threshold", c.bg_threshold);
  if (j.contains("teacher_model")) c.teacher_model = j.at("teacher_model").get<ModelConfig>();
  if (j.contains("student_model")) c.student_model = j.at("student_model").get<ModelConfig>();
  if (j.contains("teacher_train")) c.teacher_train = j.at("teacher_train").get<TrainConfig>();
  if (j.contains("student_train")) c.student_train = j.at("student_train").get<TrainConfig>();
  c.lambdas = j.value("lambdas", c.lambdas);
}

struct MethodScore {
  ConfusionCounts counts;
  std::optional<double> iou;
  double chimney_ratio = 0;
  double accuracy = 0;  // image-level, over all test scenes
};

inline std::vector<LabeledImage<float>> to_training_set(const std::vector<Scene>& scenes) {
  std::vector<LabeledImage<float>> out;
  out.reserve(scenes.size());
  for (const auto& s : scenes) out.push_back({model_input(s.image), s.label});
  return out;
}

// IoU over smoke-bearing scenes; chimney share over scenes that have a chimney.
inline MethodScore score_model(const ClassifierModel<float>& model, const std::vector<Scene>& test, double bg_threshold) {
  MethodScore m;
  ChimneyRatio ratio;
  int correct = 0;
  for (const auto& s : test) {
    const float logit = model.forward(model_input(s.image), {}).logits.value()[0];
    correct += (logit > 0) == (s.label == 1);
    const bool has_chimney = std::find(s.chimney.storage().begin(), s.chimney.storage().end(), 1) != s.chimney.storage().end();
    if (!s.label && !has_chimney) continue;
    const auto cam = single_scale_cam(model, model_input(s.image));
    if (s.label) m.counts = accumulate_confusion(cam_to_mask(cam, bg_threshold), s.gt, m.counts);
    if (has_chimney) ratio.add(cam.data, s.chimney);
  }
  m.iou = smoke_iou(m.counts);
  m.chimney_ratio = ratio.ratio();
  m.accuracy = test.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(test.size());
  return m;
}

struct BenchSeedResult {
  std::uint64_t seed = 0;
  MethodScore teacher;
  MethodScore baseline;
  std::map<double, MethodScore> students;  // keyed by λ
};

inline BenchSeedResult run_bench_seed(const BenchConfig& cfg, std::uint64_t seed,
                                      const std::function<void(const std::string&)>& log = {}) {
  auto note = [&](const std::string& what, const MethodScore& m) {
    if (log)
      log(what + " iou=" + format_iou(m.iou) + " chimney=" + std::to_string(m.chimney_ratio) +
          " acc=" + std::to_string(m.accuracy));
  };
  BenchSeedResult res;
  res.seed = seed;
  const auto train_scenes = generate_scenes({cfg.train_count, cfg.train_coupling, seed * 3 + 1, cfg.size, cfg.size});
  const auto test_scenes = generate_scenes({cfg.test_count, cfg.test_coupling, seed * 3 + 2, cfg.size, cfg.size});
  const auto train = to_training_set(train_scenes);

  ModelConfig tm = cfg.teacher_model;
  tm.input_size = cfg.size;
  ModelConfig sm = cfg.student_model;
  sm.input_size = cfg.size;

  auto teacher = make_model<float>(tm, seed * 7 + 11);
  TrainConfig ttc = cfg.teacher_train;
  ttc.seed = seed;
  if (cfg.teacher_data == "decoupled") {
    const auto aux = to_training_set(generate_scenes({cfg.teacher_aux_count, 0.0, seed * 3 + 3, cfg.size, cfg.size}));
    train_classifier(*teacher, aux, ttc);
  } else {
    require<ValidationError>(cfg.teacher_data == "biased", "teacher_data must be biased or decoupled");
    train_classifier(*teacher, train, ttc);
  }
  teacher->set_trainable(false);
  res.teacher = score_model(*teacher, test_scenes, cfg.bg_threshold);
  note("teacher", res.teacher);

  TrainConfig stc = cfg.student_train;
  stc.seed = seed;
  const std::uint64_t student_init = seed * 7 + 13;
  {
    auto baseline = make_model<float>(sm, student_init);
    train_classifier(*baseline, train, stc);
    res.baseline = score_model(*baseline, test_scenes, cfg.bg_threshold);
    note("baseline", res.baseline);
  }
  for (double lambda : cfg.lambdas) {
    auto student = make_model<float>(sm, student_init);
    TrainConfig c = stc;
    c.kt.paradigm = Paradigm::teacher_student;
    c.kt.lambda = lambda;
    train_teacher_student(*teacher, *student, train, c);
    res.students[lambda] = score_model(*student, test_scenes, cfg.bg_threshold);
    note("student lambda=" + std::to_string(lambda), res.students[lambda]);
  }
  return res;
}

}  // namespace wsss
