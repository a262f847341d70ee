#pragma once

// Cross-architecture feature consistency: per-location projection of teacher
// and student features into a shared space, an alignment level that reduces
// each map to comparable rows, and a similarity metric over those rows.

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "wsss/autograd.hpp"
#include "wsss/backbone.hpp"

namespace wsss {

enum class Paradigm { teacher_student, co_training };
enum class AlignLevel { global, spatial, channel, spatial_map, gram, logits };
enum class Metric { cosine, l1, l2, kl };
enum class SpatialMode { avg, max };

// clang-format off
NLOHMANN_JSON_SERIALIZE_ENUM(Paradigm, {{Paradigm::teacher_student, "teacher_student"},
                                        {Paradigm::co_training, "co_training"}})
NLOHMANN_JSON_SERIALIZE_ENUM(AlignLevel, {{AlignLevel::global, "global"}, {AlignLevel::spatial, "spatial"},
                                          {AlignLevel::channel, "channel"}, {AlignLevel::spatial_map, "spatial_map"},
                                          {AlignLevel::gram, "gram"}, {AlignLevel::logits, "logits"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Metric, {{Metric::cosine, "cosine"}, {Metric::l1, "l1"}, {Metric::l2, "l2"},
                                      {Metric::kl, "kl"}})
NLOHMANN_JSON_SERIALIZE_ENUM(SpatialMode, {{SpatialMode::avg, "avg"}, {SpatialMode::max, "max"}})
// clang-format on

struct KTConfig {
  Paradigm paradigm = Paradigm::teacher_student;
  AlignLevel level = AlignLevel::global;
  Metric metric = Metric::cosine;
  double lambda = 1.0;
  bool use_projector = true;
  int projector_dim = 2;
  bool normalize_features = false;
  double temperature = 1.0;
  SpatialMode spatial_mode = SpatialMode::avg;
  int student_tap = -1;
  int teacher_tap = -1;

  std::vector<std::string> problems() const {
    std::vector<std::string> p;
    if (!std::isfinite(lambda) || lambda < 0) p.push_back("kt.lambda must be finite and >= 0");
    if (projector_dim < 1) p.push_back("kt.projector_dim must be >= 1");
    if (!(temperature > 0)) p.push_back("kt.temperature must be > 0");
    if (level == AlignLevel::logits && metric != Metric::kl) p.push_back("kt.level=logits requires kt.metric=kl");
    if (level != AlignLevel::logits && metric == Metric::kl) p.push_back("kt.metric=kl is only defined for kt.level=logits");
    return p;
  }
  void validate() const {
    auto p = problems();
    if (!p.empty()) throw ValidationError(std::move(p));
  }
};

// The enum tables map unknown strings to the first enumerator; reject them here.
template <typename E>
E parse_enum_token(const nlohmann::json& j, const char* field) {
  const auto tok = j.get<std::string>();
  const E v = j.get<E>();
  if (nlohmann::json(v).get<std::string>() != tok)
    fail<ValidationError>("unknown value '", tok, "' for ", field);
  return v;
}

inline void to_json(nlohmann::json& j, const KTConfig& c) {
  j = nlohmann::json{{"paradigm", c.paradigm},
                     {"level", c.level},
                     {"metric", c.metric},
                     {"lambda", c.lambda},
                     {"use_projector", c.use_projector},
                     {"projector_dim", c.projector_dim},
                     {"normalize_features", c.normalize_features},
                     {"temperature", c.temperature},
                     {"spatial_mode", c.spatial_mode},
                     {"student_tap", c.student_tap},
                     {"teacher_tap", c.teacher_tap}};
}

inline void from_json(const nlohmann::json& j, KTConfig& c) {
  if (j.contains("paradigm")) c.paradigm = parse_enum_token<Paradigm>(j.at("paradigm"), "kt.paradigm");
  if (j.contains("level")) c.level = parse_enum_token<AlignLevel>(j.at("level"), "kt.level");
  if (j.contains("metric")) c.metric = parse_enum_token<Metric>(j.at("metric"), "kt.metric");
  if (j.contains("spatial_mode")) c.spatial_mode = parse_enum_token<SpatialMode>(j.at("spatial_mode"), "kt.spatial_mode");
  c.lambda = j.value("lambda", c.lambda);
  c.use_projector = j.value("use_projector", c.use_projector);
  c.projector_dim = j.value("projector_dim", c.projector_dim);
  c.normalize_features = j.value("normalize_features", c.normalize_features);
  c.temperature = j.value("temperature", c.temperature);
  c.student_tap = j.value("student_tap", c.student_tap);
  c.teacher_tap = j.value("teacher_tap", c.teacher_tap);
}

// 1×1 convolution: out(x,y) = W f(x,y) + b.
template <typename T>
struct Projector {
  ag::Var<T> weight;  // D_out × D_in
  ag::Var<T> bias;    // D_out
  bool trainable = true;

  Projector() = default;
  Projector(int in, int out, std::uint64_t seed, bool train = true) : trainable(train) {
    std::mt19937_64 rng(seed);
    weight = nn::parameter<T>({out, in}, rng, static_cast<T>(std::sqrt(1.0 / in)));
    bias = nn::constant_parameter<T>({out}, T{});
    weight.set_requires_grad(train);
    bias.set_requires_grad(train);
  }

  int in_dim() const { return weight.dim(1); }
  int out_dim() const { return weight.dim(0); }

  void set_trainable(bool on) {
    trainable = on;
    weight.set_requires_grad(on);
    bias.set_requires_grad(on);
  }

  // C×H×W -> D×H×W
  ag::Var<T> operator()(const ag::Var<T>& f) const {
    require<ShapeError>(f.value().rank() == 3, "projector expects C×H×W, got ", shape_str(f.shape()));
    require<ShapeError>(f.dim(0) == in_dim(), "projector expects ", in_dim(), " channels, got ", f.dim(0));
    const int h = f.dim(1), w = f.dim(2);
    auto flat = ag::reshape(f, {f.dim(0), h * w});
    return ag::reshape(ag::add_col_bias(ag::matmul(weight, flat), bias), {out_dim(), h, w});
  }

  void collect(const std::string& prefix, nn::ParameterList<T>& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

template <typename T>
Tensor<T> project_features(const Tensor<T>& f, const Projector<T>& p) {
  return p(ag::Var<T>(f)).value();
}

// Spatial mean per channel: C×H×W -> C.
template <typename T>
ag::Var<T> global_align(const ag::Var<T>& f) {
  require<ShapeError>(f.size() > 0, "global_align of an empty feature map");
  return ag::mean_cols(ag::reshape(f, {f.dim(0), f.dim(1) * f.dim(2)}));
}

template <typename T>
Tensor<T> global_align(const Tensor<T>& f) {
  return global_align(ag::Var<T>(f)).value();
}

// Channel mean or max per pixel: C×H×W -> H×W.
template <typename T>
ag::Var<T> spatial_map(const ag::Var<T>& f, SpatialMode mode) {
  const int h = f.dim(1), w = f.dim(2);
  auto flat = ag::reshape(f, {f.dim(0), h * w});
  auto r = mode == SpatialMode::avg ? ag::mean_rows(flat) : ag::max_rows(flat);
  return ag::reshape(r, {h, w});
}

template <typename T>
Tensor<T> spatial_map(const Tensor<T>& f, SpatialMode mode) {
  return spatial_map(ag::Var<T>(f), mode).value();
}

// G = F Fᵀ / (H·W) over the C×(H·W) flattening.
template <typename T>
ag::Var<T> gram(const ag::Var<T>& f) {
  const int hw = f.dim(1) * f.dim(2);
  auto flat = ag::reshape(f, {f.dim(0), hw});
  return ag::scale(ag::matmul_nt(flat, flat), T{1} / static_cast<T>(hw));
}

template <typename T>
Tensor<T> gram(const Tensor<T>& f) {
  return gram(ag::Var<T>(f)).value();
}

struct SimilarityResult {
  double value = 0;
  bool degenerate = false;  // cosine with a zero-norm operand, reported as 0
};

// cosine = a·b/(|a||b|), l1 = mean|a-b|, l2 = mean (a-b)^2.
template <typename T>
SimilarityResult similarity(const Tensor<T>& a, const Tensor<T>& b, Metric metric) {
  require<ShapeError>(a.size() == b.size() && a.size() > 0, "similarity: operands differ in size (", a.size(), " vs ",
                      b.size(), ")");
  SimilarityResult r;
  const std::size_t n = a.size();
  switch (metric) {
    case Metric::cosine: {
      double d = 0, na = 0, nb = 0;
      for (std::size_t i = 0; i < n; ++i) {
        d += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
      }
      if (na > 0 && nb > 0) r.value = d / (std::sqrt(na) * std::sqrt(nb));
      else r.degenerate = true;
      break;
    }
    case Metric::l1:
      for (std::size_t i = 0; i < n; ++i) r.value += std::abs(static_cast<double>(a[i]) - b[i]);
      r.value /= static_cast<double>(n);
      break;
    case Metric::l2:
      for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        r.value += d * d;
      }
      r.value /= static_cast<double>(n);
      break;
    case Metric::kl:
      fail<ValidationError>("similarity: kl is defined on logits only (use kl_logits_loss)");
  }
  return r;
}

// Branch-local projectors; absent when the config disables projection.
template <typename T>
struct ProjectorPair {
  std::optional<Projector<T>> student;
  std::optional<Projector<T>> teacher;
};

template <typename T>
ProjectorPair<T> make_projectors(const KTConfig& cfg, int student_channels, int teacher_channels, std::uint64_t seed) {
  ProjectorPair<T> p;
  if (!cfg.use_projector || cfg.level == AlignLevel::logits) return p;
  // Seeds depend only on the branch width so identical peers get identical projectors.
  p.student.emplace(student_channels, cfg.projector_dim, seed * 1000003ULL + static_cast<std::uint64_t>(student_channels));
  p.teacher.emplace(teacher_channels, cfg.projector_dim, seed * 1000003ULL + static_cast<std::uint64_t>(teacher_channels));
  if (cfg.paradigm == Paradigm::teacher_student) p.teacher->set_trainable(false);
  return p;
}

struct KtDiagnostics {
  int degenerate_rows = 0;  // zero-norm cosine rows, scored as similarity 0
};

namespace detail {

template <typename T>
ag::Var<T> align_rows(const ag::Var<T>& f, const KTConfig& cfg) {
  const int c = f.dim(0), hw = f.dim(1) * f.dim(2);
  auto flat = ag::reshape(f, {c, hw});
  switch (cfg.level) {
    case AlignLevel::global: return ag::reshape(ag::mean_cols(flat), {1, c});
    case AlignLevel::spatial: return ag::transpose(flat);
    case AlignLevel::channel: return flat;
    case AlignLevel::spatial_map: return ag::reshape(spatial_map(f, cfg.spatial_mode), {1, hw});
    case AlignLevel::gram: return ag::reshape(gram(f), {1, c * c});
    case AlignLevel::logits: break;
  }
  fail<ValidationError>("logits alignment has no feature reduction");
}

}  // namespace detail

// Consistency loss between one student and one teacher feature map (C×H×W each).
// Under teacher_student the teacher branch is detached. The teacher map is
// bilinearly resized to the student grid when the two differ.
template <typename T>
ag::Var<T> kt_loss(const ag::Var<T>& student, const ag::Var<T>& teacher, const KTConfig& cfg,
                   const ProjectorPair<T>& projectors, KtDiagnostics* diag = nullptr) {
  require<ValidationError>(cfg.level != AlignLevel::logits, "kt_loss works on features; use kl_logits_loss for logits");
  require<ShapeError>(student.value().rank() == 3 && teacher.value().rank() == 3, "kt_loss expects C×H×W features");
  require<ShapeError>(student.size() > 0 && teacher.size() > 0, "kt_loss: zero-size feature map");
  const bool frozen_teacher = cfg.paradigm == Paradigm::teacher_student;

  ag::Var<T> s = student;
  ag::Var<T> t = frozen_teacher ? ag::detach(teacher) : teacher;
  if (projectors.student) s = (*projectors.student)(s);
  if (projectors.teacher) t = (*projectors.teacher)(t);
  if (frozen_teacher) t = ag::detach(t);
  if (t.dim(1) != s.dim(1) || t.dim(2) != s.dim(2)) t = ag::resize(t, s.dim(1), s.dim(2));

  auto rs = detail::align_rows(s, cfg);
  auto rt = detail::align_rows(t, cfg);
  require<ShapeError>(rs.value().same_shape(rt.value()), "kt_loss: aligned student ", shape_str(rs.shape()),
                      " and teacher ", shape_str(rt.shape()), " are not comparable (enable the projector?)");
  if (cfg.normalize_features) {
    rs = ag::normalize_rows(rs);
    rt = ag::normalize_rows(rt);
  }
  switch (cfg.metric) {
    case Metric::cosine: {
      int bad = 0;
      auto cs = ag::cosine_rows(rs, rt, &bad);
      if (diag) diag->degenerate_rows += bad;
      return ag::add_scalar(ag::scale(ag::mean(cs), T{-1}), T{1});
    }
    case Metric::l1: return ag::mean(ag::abs(ag::sub(rs, rt)));
    case Metric::l2: return ag::mean(ag::square(ag::sub(rs, rt)));
    case Metric::kl: break;
  }
  fail<ValidationError>("kt_loss: metric kl requires level=logits");
}

template <typename T>
T kt_loss(const FeatureMap<T>& student, const FeatureMap<T>& teacher, const KTConfig& cfg,
          const ProjectorPair<T>& projectors, KtDiagnostics* diag = nullptr) {
  return kt_loss(ag::Var<T>(student.data), ag::Var<T>(teacher.data), cfg, projectors, diag).item();
}

// Single-logit heads are expanded to the two-class form [0, z].
template <typename T>
ag::Var<T> as_two_class(const ag::Var<T>& logits) {
  require<ShapeError>(logits.value().rank() == 2, "logits must be B×K");
  if (logits.dim(1) != 1) return logits;
  return ag::concat_cols<T>({ag::Var<T>(Tensor<T>({logits.dim(0), 1})), logits});
}

// Batch mean of KL(softmax(s/T) || softmax(t/T)).
template <typename T>
ag::Var<T> kl_logits_loss(const ag::Var<T>& student_logits, const ag::Var<T>& teacher_logits, T temperature) {
  return ag::kl_div_rows(as_two_class(student_logits), as_two_class(teacher_logits), temperature);
}

template <typename T>
ag::Var<T> total_loss(const ag::Var<T>& cls_loss, const ag::Var<T>& kt, T lambda) {
  require<ValidationError>(std::isfinite(cls_loss.item()) && std::isfinite(kt.item()), "total_loss: non-finite input");
  return ag::add(cls_loss, ag::scale(kt, lambda));
}

inline const std::vector<double> kLambdaAblationGrid{0.3, 0.5, 0.8, 1.0, 1.3, 1.5};

}  // namespace wsss
