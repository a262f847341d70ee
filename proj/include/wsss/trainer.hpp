#pragma once

// Classification and knowledge-transfer training loops.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "wsss/image.hpp"
#include "wsss/knowledge_transfer.hpp"
#include "wsss/optim.hpp"

namespace wsss {

template <typename T>
struct LabeledImage {
  Tensor<T> image;  // normalised 3×H×W
  int label = 0;
};

struct TrainConfig {
  int epochs = 3;
  int batch_size = 8;
  double learning_rate = 1e-4;
  std::string optimizer = "adamw";
  std::uint64_t seed = 0;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  KTConfig kt;

  std::vector<std::string> problems() const {
    std::vector<std::string> p;
    if (epochs < 1) p.push_back("train.epochs must be >= 1");
    if (batch_size < 1) p.push_back("train.batch_size must be >= 1");
    if (!(learning_rate > 0)) p.push_back("train.learning_rate must be > 0");
    if (optimizer != "adamw") p.push_back("train.optimizer must be adamw");
    if (weight_decay < 0) p.push_back("train.weight_decay must be >= 0");
    for (auto& k : kt.problems()) p.push_back(k);
    return p;
  }
  void validate() const {
    auto p = problems();
    if (!p.empty()) throw ValidationError(std::move(p));
  }
  nn::AdamWOptions adamw() const { return {learning_rate, beta1, beta2, 1e-8, weight_decay}; }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},           {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate},
                     {"optimizer", c.optimizer},     {"seed", c.seed},             {"weight_decay", c.weight_decay},
                     {"beta1", c.beta1},             {"beta2", c.beta2},           {"kt", c.kt}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.optimizer = j.value("optimizer", c.optimizer);
  c.seed = j.value("seed", c.seed);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  if (j.contains("kt")) c.kt = j.at("kt").get<KTConfig>();
}

struct StepRecord {
  long step = 0;
  int epoch = 0;
  double cls_loss = 0;
  double kt_loss = 0;
  double total = 0;
};

struct TrainHooks {
  std::function<void(const StepRecord&)> on_step;
  std::function<void(int epoch)> on_epoch_end;
};

template <typename T>
ag::Var<T> classification_loss(const ag::Var<T>& logits, const std::vector<int>& labels) {
  std::vector<T> y;
  y.reserve(labels.size());
  for (int l : labels) {
    require<ValidationError>(l == 0 || l == 1, "labels must be 0 or 1, got ", l);
    y.push_back(static_cast<T>(l));
  }
  return ag::bce_with_logits(logits, y);
}

namespace detail {

inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch))
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + static_cast<std::size_t>(batch))));
  return out;
}

template <typename T>
std::vector<ag::Var<T>> variables(const nn::ParameterList<T>& ps) {
  std::vector<ag::Var<T>> out;
  for (const auto& p : ps) out.push_back(p.var);
  return out;
}

template <typename T>
ag::Var<T> stack_logits(const std::vector<ag::Var<T>>& per_sample) {
  std::vector<ag::Var<T>> rows;
  for (const auto& l : per_sample) rows.push_back(ag::reshape(l, {1, l.dim(0)}));
  return ag::concat_rows(rows);
}

template <typename T>
ag::Var<T> mean_of(const std::vector<ag::Var<T>>& terms) {
  ag::Var<T> acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = ag::add(acc, terms[i]);
  return ag::scale(acc, T{1} / static_cast<T>(terms.size()));
}

template <typename T>
ag::Var<T> flat(const ag::Var<T>& v) {
  return ag::reshape(v, {static_cast<int>(v.size())});
}

}  // namespace detail

// Plain classification training (baselines and teacher pre-training).
template <typename T>
std::vector<StepRecord> train_classifier(ClassifierModel<T>& model, const std::vector<LabeledImage<T>>& data,
                                         const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  cfg.validate();
  require<ValidationError>(!data.empty(), "training set is empty");
  model.set_trainable(true);
  nn::AdamW<T> opt(detail::variables(model.parameters()), cfg.adamw());
  std::mt19937_64 order_rng(cfg.seed);
  std::vector<StepRecord> trace;
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& batch : detail::epoch_batches(data.size(), cfg.batch_size, order_rng)) {
      opt.zero_grad();
      std::vector<ag::Var<T>> logits;
      std::vector<int> labels;
      for (auto i : batch) {
        logits.push_back(model.forward(data[i].image, {}).logits);
        labels.push_back(data[i].label);
      }
      auto loss = classification_loss(detail::flat(detail::stack_logits(logits)), labels);
      ag::backward(loss);
      opt.step();
      StepRecord r{++step, epoch, static_cast<double>(loss.item()), 0.0, static_cast<double>(loss.item())};
      trace.push_back(r);
      if (hooks.on_step) hooks.on_step(r);
    }
    if (hooks.on_epoch_end) hooks.on_epoch_end(epoch);
  }
  return trace;
}

template <typename T>
struct TeacherStudentResult {
  std::vector<StepRecord> trace;
  ProjectorPair<T> projectors;
};

// Only the student and its projector are updated; the teacher is frozen and
// run without building a graph.
template <typename T>
TeacherStudentResult<T> train_teacher_student(const ClassifierModel<T>& teacher, ClassifierModel<T>& student,
                                              const std::vector<LabeledImage<T>>& data, const TrainConfig& cfg,
                                              const TrainHooks& hooks = {}) {
  cfg.validate();
  require<ValidationError>(!data.empty(), "training set is empty");
  const KTConfig& kt = cfg.kt;
  require<ValidationError>(kt.paradigm == Paradigm::teacher_student, "train_teacher_student needs paradigm=teacher_student");
  const int s_tap = student.resolve_tap(kt.student_tap);
  const int t_tap = teacher.resolve_tap(kt.teacher_tap);
  const bool logits_level = kt.level == AlignLevel::logits;

  TeacherStudentResult<T> result;
  result.projectors = make_projectors<T>(kt, student.tap_channels(s_tap), teacher.tap_channels(t_tap), cfg.seed);
  student.set_trainable(true);
  auto params = detail::variables(student.parameters());
  if (result.projectors.student) {
    params.push_back(result.projectors.student->weight);
    params.push_back(result.projectors.student->bias);
  }
  nn::AdamW<T> opt(params, cfg.adamw());
  std::mt19937_64 order_rng(cfg.seed);
  const std::vector<int> s_taps = logits_level ? std::vector<int>{} : std::vector<int>{kt.student_tap};
  const std::vector<int> t_taps = logits_level ? std::vector<int>{} : std::vector<int>{kt.teacher_tap};
  const T lambda = static_cast<T>(kt.lambda);

  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& batch : detail::epoch_batches(data.size(), cfg.batch_size, order_rng)) {
      opt.zero_grad();
      std::vector<ag::Var<T>> s_logits, t_logits, kt_terms;
      std::vector<int> labels;
      for (auto i : batch) {
        auto s = student.forward(data[i].image, s_taps);
        auto t = teacher.forward(data[i].image, t_taps);
        s_logits.push_back(s.logits);
        t_logits.push_back(ag::detach(t.logits));
        if (!logits_level) kt_terms.push_back(kt_loss(s.taps.at(kt.student_tap), t.taps.at(kt.teacher_tap), kt, result.projectors));
        labels.push_back(data[i].label);
      }
      auto logits = detail::stack_logits(s_logits);
      auto cls = classification_loss(detail::flat(logits), labels);
      ag::Var<T> transfer;
      if (logits_level) {
        transfer = kl_logits_loss(logits, detail::stack_logits(t_logits), static_cast<T>(kt.temperature));
      } else {
        transfer = detail::mean_of(kt_terms);
      }
      auto total = total_loss(cls, transfer, lambda);
      ag::backward(total);
      opt.step();
      StepRecord r{++step, epoch, static_cast<double>(cls.item()), static_cast<double>(transfer.item()),
                   static_cast<double>(total.item())};
      result.trace.push_back(r);
      if (hooks.on_step) hooks.on_step(r);
    }
    if (hooks.on_epoch_end) hooks.on_epoch_end(epoch);
  }
  return result;
}

template <typename T>
struct CoTrainingResult {
  std::vector<StepRecord> trace;  // cls_loss is the sum of both peers' losses
  ProjectorPair<T> projectors;    // student = model_a, teacher = model_b
};

// Both peers learn from their own classification loss plus the shared,
// symmetric consistency term.
template <typename T>
CoTrainingResult<T> train_cotraining(ClassifierModel<T>& model_a, ClassifierModel<T>& model_b,
                                     const std::vector<LabeledImage<T>>& data, const TrainConfig& cfg,
                                     const TrainHooks& hooks = {}) {
  cfg.validate();
  require<ValidationError>(!data.empty(), "training set is empty");
  KTConfig kt = cfg.kt;
  kt.paradigm = Paradigm::co_training;
  const int a_tap = model_a.resolve_tap(kt.student_tap);
  const int b_tap = model_b.resolve_tap(kt.teacher_tap);
  const bool logits_level = kt.level == AlignLevel::logits;

  CoTrainingResult<T> result;
  result.projectors = make_projectors<T>(kt, model_a.tap_channels(a_tap), model_b.tap_channels(b_tap), cfg.seed);
  model_a.set_trainable(true);
  model_b.set_trainable(true);
  auto params = detail::variables(model_a.parameters());
  for (auto& v : detail::variables(model_b.parameters())) params.push_back(v);
  for (auto* p : {&result.projectors.student, &result.projectors.teacher})
    if (*p) {
      params.push_back((*p)->weight);
      params.push_back((*p)->bias);
    }
  nn::AdamW<T> opt(params, cfg.adamw());
  std::mt19937_64 order_rng(cfg.seed);
  const std::vector<int> a_taps = logits_level ? std::vector<int>{} : std::vector<int>{kt.student_tap};
  const std::vector<int> b_taps = logits_level ? std::vector<int>{} : std::vector<int>{kt.teacher_tap};
  const T lambda = static_cast<T>(kt.lambda);

  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& batch : detail::epoch_batches(data.size(), cfg.batch_size, order_rng)) {
      opt.zero_grad();
      std::vector<ag::Var<T>> a_logits, b_logits, kt_terms;
      std::vector<int> labels;
      for (auto i : batch) {
        auto a = model_a.forward(data[i].image, a_taps);
        auto b = model_b.forward(data[i].image, b_taps);
        a_logits.push_back(a.logits);
        b_logits.push_back(b.logits);
        if (!logits_level) kt_terms.push_back(kt_loss(a.taps.at(kt.student_tap), b.taps.at(kt.teacher_tap), kt, result.projectors));
        labels.push_back(data[i].label);
      }
      auto la = detail::stack_logits(a_logits);
      auto lb = detail::stack_logits(b_logits);
      auto cls = ag::add(classification_loss(detail::flat(la), labels), classification_loss(detail::flat(lb), labels));
      ag::Var<T> transfer;
      if (logits_level) {
        const T temp = static_cast<T>(kt.temperature);
        transfer = ag::scale(ag::add(kl_logits_loss(la, lb, temp), kl_logits_loss(lb, la, temp)), T{0.5});
      } else {
        transfer = detail::mean_of(kt_terms);
      }
      auto total = total_loss(cls, transfer, lambda);
      ag::backward(total);
      opt.step();
      StepRecord r{++step, epoch, static_cast<double>(cls.item()), static_cast<double>(transfer.item()),
                   static_cast<double>(total.item())};
      result.trace.push_back(r);
      if (hooks.on_step) hooks.on_step(r);
    }
    if (hooks.on_epoch_end) hooks.on_epoch_end(epoch);
  }
  return result;
}

struct LrPoint {
  double lr = 0;
  double loss = 0;
  double smoothed = 0;
};

// Exponential learning-rate sweep over `steps` batches on a copy of the model.
template <typename T>
std::vector<LrPoint> lr_range_test(const ClassifierModel<T>& model, const std::vector<LabeledImage<T>>& data,
                                   double lr_min, double lr_max, int steps, int batch_size = 8,
                                   std::uint64_t seed = 0, double smoothing = 0.98) {
  require<ValidationError>(lr_min > 0 && lr_max >= lr_min, "lr span must satisfy 0 < min <= max");
  require<ValidationError>(!data.empty(), "lr_range_test needs data");
  if (lr_max == lr_min) steps = 1;
  require<ValidationError>(steps >= 1, "lr_range_test needs at least one step");
  auto copy = clone_model(model);
  copy->set_trainable(true);
  TrainConfig tc;
  tc.learning_rate = lr_min;
  tc.batch_size = batch_size;
  nn::AdamW<T> opt(detail::variables(copy->parameters()), tc.adamw());
  std::mt19937_64 rng(seed);
  auto batches = detail::epoch_batches(data.size(), batch_size, rng);
  std::vector<LrPoint> curve;
  double avg = 0;
  for (int s = 0; s < steps; ++s) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(s) / (steps - 1);
    const double lr = lr_min * std::pow(lr_max / lr_min, frac);
    opt.set_lr(lr);
    opt.zero_grad();
    const auto& batch = batches[static_cast<std::size_t>(s) % batches.size()];
    std::vector<ag::Var<T>> logits;
    std::vector<int> labels;
    for (auto i : batch) {
      logits.push_back(copy->forward(data[i].image, {}).logits);
      labels.push_back(data[i].label);
    }
    auto loss = classification_loss(detail::flat(detail::stack_logits(logits)), labels);
    ag::backward(loss);
    opt.step();
    const double l = static_cast<double>(loss.item());
    avg = smoothing * avg + (1 - smoothing) * l;
    curve.push_back({lr, l, avg / (1 - std::pow(smoothing, s + 1))});
  }
  return curve;
}

// CSV with columns lr,loss,smoothed.
inline void write_lr_curve(const fs::path& path, const std::vector<LrPoint>& curve) {
  write_atomically(path, [&](std::ostream& out) {
    out << "lr,loss,smoothed\n";
    out.precision(9);
    for (const auto& p : curve) out << p.lr << ',' << p.loss << ',' << p.smoothed << '\n';
  });
}

// Smallest-loss point of a range-test curve, divided by `backoff`.
inline double suggest_learning_rate(const std::vector<LrPoint>& curve, double backoff = 10.0) {
  require<ValidationError>(!curve.empty(), "empty learning-rate curve");
  const auto best = std::min_element(curve.begin(), curve.end(),
                                     [](const LrPoint& a, const LrPoint& b) { return a.smoothed < b.smoothed; });
  return best->lr / backoff;
}

}  // namespace wsss
