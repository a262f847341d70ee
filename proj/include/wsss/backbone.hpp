#pragma once

// Convolutional (teacher) and attention/patch-token (student) classifiers
// behind one interface that returns logits plus tapped feature maps.

#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "wsss/layers.hpp"

namespace wsss {

enum class Arch { conv, attention };

inline std::string to_string(Arch a) { return a == Arch::conv ? "conv" : "attention"; }

inline Arch parse_arch(const std::string& s) {
  if (s == "conv") return Arch::conv;
  if (s == "attention") return Arch::attention;
  fail<ValidationError>("unknown architecture '", s, "' (expected conv or attention)");
}

struct ModelConfig {
  Arch arch = Arch::conv;
  int num_classes = 1;
  int input_size = 64;  // training resolution; sets the stored positional grid
  std::vector<int> taps{-1};

  // conv
  std::vector<int> channels{8, 16, 32, 32};
  std::vector<int> strides{1, 2, 2, 2};
  bool pcm = true;  // refine CAMs with feature affinity at inference
  int pcm_tap = -1;

  // attention
  int patch = 8;
  int dim = 32;
  int depth = 4;
  int heads = 2;
  int mlp_ratio = 2;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"arch", to_string(c.arch)}, {"num_classes", c.num_classes}, {"input_size", c.input_size},
                     {"taps", c.taps},           {"channels", c.channels},        {"strides", c.strides},
                     {"pcm", c.pcm},             {"pcm_tap", c.pcm_tap},          {"patch", c.patch},
                     {"dim", c.dim},             {"depth", c.depth},              {"heads", c.heads},
                     {"mlp_ratio", c.mlp_ratio}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (j.contains("arch")) c.arch = parse_arch(j.at("arch").get<std::string>());
  c.num_classes = j.value("num_classes", c.num_classes);
  c.input_size = j.value("input_size", c.input_size);
  c.taps = j.value("taps", c.taps);
  c.channels = j.value("channels", c.channels);
  c.strides = j.value("strides", c.strides);
  c.pcm = j.value("pcm", c.pcm);
  c.pcm_tap = j.value("pcm_tap", c.pcm_tap);
  c.patch = j.value("patch", c.patch);
  c.dim = j.value("dim", c.dim);
  c.depth = j.value("depth", c.depth);
  c.heads = j.value("heads", c.heads);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
}

template <typename T>
struct FeatureMap {
  Tensor<T> data;  // C×H×W
  Arch arch = Arch::conv;
  int tap = -1;
};

template <typename T>
struct ModelOutput {
  ag::Var<T> logits;                 // [num_classes]
  std::map<int, ag::Var<T>> taps;    // keyed by the requested tap index; C×h×w each
};

// ---------------------------------------------------------------------------
// Token/grid helpers

// N×C tokens (row-major over the grid) -> C×h×w.
template <typename T>
Tensor<T> tokens_to_grid(const Tensor<T>& tokens, int h, int w) {
  require<ShapeError>(tokens.rank() == 2, "tokens must be N×C");
  require<ShapeError>(tokens.dim(0) == h * w, "token count ", tokens.dim(0), " does not match grid ", h, "x", w);
  const int c = tokens.dim(1);
  Tensor<T> out({c, h, w});
  for (int n = 0; n < h * w; ++n)
    for (int k = 0; k < c; ++k) out(k, n / w, n % w) = tokens(n, k);
  return out;
}

template <typename T>
Tensor<T> grid_to_tokens(const Tensor<T>& grid) {
  require<ShapeError>(grid.rank() == 3, "grid must be C×h×w");
  const int c = grid.dim(0), h = grid.dim(1), w = grid.dim(2);
  Tensor<T> out({h * w, c});
  for (int n = 0; n < h * w; ++n)
    for (int k = 0; k < c; ++k) out(n, k) = grid(k, n / w, n % w);
  return out;
}

template <typename T>
ag::Var<T> tokens_to_grid(const ag::Var<T>& tokens, int h, int w) {
  require<ShapeError>(tokens.dim(0) == h * w, "token count ", tokens.dim(0), " does not match grid ", h, "x", w);
  return ag::reshape(ag::transpose(tokens), {tokens.dim(1), h, w});
}

// Bilinear resize of an h0×w0×C positional grid (class token excluded).
template <typename T>
Tensor<T> resize_pos_embedding(const Tensor<T>& grid, int h, int w) {
  require<ShapeError>(grid.rank() == 3, "positional grid must be h×w×C");
  require<ValidationError>(h >= 1 && w >= 1, "positional grid target must be at least 1×1");
  if (grid.dim(0) == h && grid.dim(1) == w) return grid;
  // h0×w0×C -> C×h0×w0 -> resize -> h×w×C
  const int h0 = grid.dim(0), w0 = grid.dim(1), c = grid.dim(2);
  Tensor<T> chw({c, h0, w0});
  for (int y = 0; y < h0; ++y)
    for (int x = 0; x < w0; ++x)
      for (int k = 0; k < c; ++k) chw(k, y, x) = grid(y, x, k);
  const Tensor<T> r = resize_bilinear(chw, h, w);
  Tensor<T> out({h, w, c});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < c; ++k) out(y, x, k) = r(k, y, x);
  return out;
}

// Feature-affinity CAM smoothing: refined = rownorm(relu(cos(f_i, f_j))) · cam.
template <typename T>
Tensor<T> pcm_refine(const Tensor<T>& cam, const Tensor<T>& feature) {
  require<ShapeError>(cam.rank() == 3 && feature.rank() == 3, "pcm_refine expects K×h×w and C×h×w");
  require<ShapeError>(cam.dim(1) == feature.dim(1) && cam.dim(2) == feature.dim(2), "pcm_refine: cam ",
                      shape_str(cam.shape()), " and feature ", shape_str(feature.shape()), " are not aligned");
  const int k = cam.dim(0), c = feature.dim(0);
  const int n = cam.dim(1) * cam.dim(2);
  // unit-normalised per-pixel features, pixel-major
  std::vector<double> f(static_cast<std::size_t>(n) * c);
  std::vector<bool> zero(static_cast<std::size_t>(n), false);
  for (int p = 0; p < n; ++p) {
    double s = 0;
    for (int q = 0; q < c; ++q) {
      const double v = feature.data()[static_cast<std::size_t>(q) * n + p];
      f[static_cast<std::size_t>(p) * c + q] = v;
      s += v * v;
    }
    const double nrm = std::sqrt(s);
    zero[static_cast<std::size_t>(p)] = !(nrm > 0);
    if (nrm > 0)
      for (int q = 0; q < c; ++q) f[static_cast<std::size_t>(p) * c + q] /= nrm;
  }
  Tensor<T> out({k, cam.dim(1), cam.dim(2)});
  std::vector<double> row(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double total = 0;
    const double* fi = &f[static_cast<std::size_t>(i) * c];
    for (int j = 0; j < n; ++j) {
      double a = 0;
      if (!zero[static_cast<std::size_t>(i)] && !zero[static_cast<std::size_t>(j)]) {
        const double* fj = &f[static_cast<std::size_t>(j) * c];
        for (int q = 0; q < c; ++q) a += fi[q] * fj[q];
        a = std::max(a, 0.0);
      }
      row[static_cast<std::size_t>(j)] = a;
      total += a;
    }
    if (!(total > 0)) {  // isolated pixel keeps its own value
      std::fill(row.begin(), row.end(), 0.0);
      row[static_cast<std::size_t>(i)] = 1.0;
      total = 1.0;
    }
    for (int cls = 0; cls < k; ++cls) {
      const T* src = cam.data() + static_cast<std::size_t>(cls) * n;
      double acc = 0;
      for (int j = 0; j < n; ++j) acc += row[static_cast<std::size_t>(j)] * src[j];
      out.data()[static_cast<std::size_t>(cls) * n + i] = static_cast<T>(acc / total);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Models

template <typename T>
class ClassifierModel {
 public:
  virtual ~ClassifierModel() = default;

  const ModelConfig& config() const { return cfg_; }
  Arch arch() const { return cfg_.arch; }
  int num_classes() const { return cfg_.num_classes; }

  // Number of tap points; valid indices are [-n, n-1].
  virtual int num_tap_points() const = 0;
  // Input height/width must be multiples of this.
  virtual int size_multiple() const = 0;
  // Channel count at each tap point.
  virtual int tap_channels(int resolved) const = 0;

  int resolve_tap(int tap) const {
    const int n = num_tap_points();
    require<ValidationError>(tap >= -n && tap < n, "tap index ", tap, " out of range for ", to_string(arch()),
                             " model with ", n, " tap points");
    return tap < 0 ? tap + n : tap;
  }

  // image: normalised 3×H×W.
  virtual ModelOutput<T> forward(const Tensor<T>& image, const std::vector<int>& taps) const = 0;

  const nn::Linear<T>& head() const { return head_; }
  // K×C classifier weights over the final feature channels.
  const Tensor<T>& head_weights() const { return head_.weight.value(); }

  virtual nn::ParameterList<T> parameters() const = 0;

  void set_trainable(bool on) {
    for (auto& p : parameters()) p.var.set_requires_grad(on);
  }

 protected:
  explicit ClassifierModel(ModelConfig cfg) : cfg_(std::move(cfg)) {}

  ModelConfig cfg_;
  nn::Linear<T> head_;
};

template <typename T>
class ConvClassifier final : public ClassifierModel<T> {
 public:
  ConvClassifier(ModelConfig cfg, std::uint64_t seed) : ClassifierModel<T>(std::move(cfg)) {
    const auto& c = this->cfg_;
    require<ValidationError>(!c.channels.empty() && c.channels.size() == c.strides.size(),
                             "conv model needs matching channels/strides lists");
    std::mt19937_64 rng(seed);
    int in = 3;
    for (std::size_t s = 0; s < c.channels.size(); ++s) {
      stages_.emplace_back(in, c.channels[s], 3, c.strides[s], rng);
      in = c.channels[s];
    }
    this->head_ = nn::Linear<T>(in, c.num_classes, rng);
  }

  int num_tap_points() const override { return static_cast<int>(stages_.size()); }
  int size_multiple() const override { return 1; }
  int tap_channels(int resolved) const override { return this->cfg_.channels[static_cast<std::size_t>(resolved)]; }

  ModelOutput<T> forward(const Tensor<T>& image, const std::vector<int>& taps) const override {
    std::vector<int> resolved;
    for (int t : taps) resolved.push_back(this->resolve_tap(t));
    require<ShapeError>(image.rank() == 3 && image.dim(0) == 3, "model input must be 3×H×W, got ",
                        shape_str(image.shape()));
    ModelOutput<T> out;
    ag::Var<T> x(image);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      x = ag::relu(stages_[s](x));
      for (std::size_t k = 0; k < taps.size(); ++k)
        if (resolved[k] == static_cast<int>(s)) out.taps[taps[k]] = x;
    }
    const int c = x.dim(0);
    auto pooled = ag::mean_cols(ag::reshape(x, {c, x.dim(1) * x.dim(2)}));
    out.logits = ag::reshape(this->head_(ag::reshape(pooled, {1, c})), {this->cfg_.num_classes});
    return out;
  }

  nn::ParameterList<T> parameters() const override {
    nn::ParameterList<T> out;
    for (std::size_t s = 0; s < stages_.size(); ++s) stages_[s].collect("stage" + std::to_string(s), out);
    this->head_.collect("head", out);
    return out;
  }

 private:
  std::vector<nn::Conv2d<T>> stages_;
};

template <typename T>
class AttentionClassifier final : public ClassifierModel<T> {
 public:
  AttentionClassifier(ModelConfig cfg, std::uint64_t seed) : ClassifierModel<T>(std::move(cfg)) {
    const auto& c = this->cfg_;
    require<ValidationError>(c.patch >= 1 && c.dim >= 1 && c.depth >= 1 && c.heads >= 1 && c.dim % c.heads == 0,
                             "invalid attention model geometry");
    require<ValidationError>(c.input_size % c.patch == 0, "input_size must be a multiple of the patch size");
    std::mt19937_64 rng(seed);
    const int g = c.input_size / c.patch;
    embed_ = nn::Linear<T>(3 * c.patch * c.patch, c.dim, rng);
    pos_ = nn::parameter<T>({g, g, c.dim}, rng, T(0.02));
    cls_ = nn::parameter<T>({1, c.dim}, rng, T(0.02));
    cls_pos_ = nn::parameter<T>({1, c.dim}, rng, T(0.02));
    for (int b = 0; b < c.depth; ++b) {
      Block blk;
      blk.norm1 = nn::LayerNorm<T>(c.dim);
      blk.qkv = nn::Linear<T>(c.dim, 3 * c.dim, rng);
      blk.proj = nn::Linear<T>(c.dim, c.dim, rng);
      blk.norm2 = nn::LayerNorm<T>(c.dim);
      blk.fc1 = nn::Linear<T>(c.dim, c.mlp_ratio * c.dim, rng);
      blk.fc2 = nn::Linear<T>(c.mlp_ratio * c.dim, c.dim, rng);
      blocks_.push_back(std::move(blk));
    }
    final_norm_ = nn::LayerNorm<T>(c.dim);
    this->head_ = nn::Linear<T>(c.dim, c.num_classes, rng);
  }

  // Tap 0 is the embedded patch grid, tap b the output of block b; the last
  // tap is taken after the final norm and feeds the head.
  int num_tap_points() const override { return this->cfg_.depth + 1; }
  int size_multiple() const override { return this->cfg_.patch; }
  int tap_channels(int) const override { return this->cfg_.dim; }

  ModelOutput<T> forward(const Tensor<T>& image, const std::vector<int>& taps) const override {
    std::vector<int> resolved;
    for (int t : taps) resolved.push_back(this->resolve_tap(t));
    const auto& c = this->cfg_;
    require<ShapeError>(image.rank() == 3 && image.dim(0) == 3, "model input must be 3×H×W, got ",
                        shape_str(image.shape()));
    require<ShapeError>(image.dim(1) % c.patch == 0 && image.dim(2) % c.patch == 0, "input ", image.dim(1), "x",
                        image.dim(2), " is not divisible by patch size ", c.patch);
    const int gh = image.dim(1) / c.patch, gw = image.dim(2) / c.patch;
    const int n = gh * gw;

    Tensor<T> patches({n, 3 * c.patch * c.patch});
    for (int py = 0; py < gh; ++py)
      for (int px = 0; px < gw; ++px) {
        const int row = py * gw + px;
        int col = 0;
        for (int ch = 0; ch < 3; ++ch)
          for (int y = 0; y < c.patch; ++y)
            for (int x = 0; x < c.patch; ++x) patches(row, col++) = image(ch, py * c.patch + y, px * c.patch + x);
      }

    ModelOutput<T> out;
    auto record = [&](int point, const ag::Var<T>& tokens) {
      for (std::size_t k = 0; k < taps.size(); ++k)
        if (resolved[k] == point) out.taps[taps[k]] = tokens_to_grid(tokens, gh, gw);
    };

    auto x = ag::add(embed_(ag::Var<T>(std::move(patches))), positional(gh, gw));
    const int last = c.depth;
    record(0, x);
    auto seq = ag::concat_rows<T>({ag::add(cls_, cls_pos_), x});
    for (int b = 0; b < c.depth; ++b) {
      seq = block(blocks_[static_cast<std::size_t>(b)], seq);
      if (b + 1 < last) record(b + 1, ag::slice_rows(seq, 1, n + 1));
    }
    auto tokens = ag::slice_rows(final_norm_(seq), 1, n + 1);
    record(last, tokens);
    auto pooled = ag::reshape(ag::mean_rows(tokens), {1, c.dim});
    out.logits = ag::reshape(this->head_(pooled), {c.num_classes});
    return out;
  }

  nn::ParameterList<T> parameters() const override {
    nn::ParameterList<T> out;
    embed_.collect("embed", out);
    out.push_back({"pos", pos_});
    out.push_back({"cls", cls_});
    out.push_back({"cls_pos", cls_pos_});
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const std::string p = "block" + std::to_string(b);
      const auto& blk = blocks_[b];
      blk.norm1.collect(p + ".norm1", out);
      blk.qkv.collect(p + ".qkv", out);
      blk.proj.collect(p + ".proj", out);
      blk.norm2.collect(p + ".norm2", out);
      blk.fc1.collect(p + ".fc1", out);
      blk.fc2.collect(p + ".fc2", out);
    }
    final_norm_.collect("final_norm", out);
    this->head_.collect("head", out);
    return out;
  }

 private:
  struct Block {
    nn::LayerNorm<T> norm1, norm2;
    nn::Linear<T> qkv, proj, fc1, fc2;
  };

  // Positional grid resized to gh×gw, flattened to N×D.
  ag::Var<T> positional(int gh, int gw) const {
    const int g0 = pos_.dim(0), d = this->cfg_.dim;
    auto flat = ag::reshape(pos_, {g0 * pos_.dim(1), d});
    if (gh == g0 && gw == pos_.dim(1)) return flat;
    auto chw = ag::reshape(ag::transpose(flat), {d, g0, pos_.dim(1)});
    auto resized = ag::resize(chw, gh, gw);
    return ag::transpose(ag::reshape(resized, {d, gh * gw}));
  }

  ag::Var<T> block(const Block& blk, const ag::Var<T>& seq) const {
    const auto& c = this->cfg_;
    const int dh = c.dim / c.heads;
    const T inv = T{1} / std::sqrt(static_cast<T>(dh));
    auto qkv = blk.qkv(blk.norm1(seq));
    std::vector<ag::Var<T>> heads;
    for (int h = 0; h < c.heads; ++h) {
      auto q = ag::slice_cols(qkv, h * dh, (h + 1) * dh);
      auto k = ag::slice_cols(qkv, c.dim + h * dh, c.dim + (h + 1) * dh);
      auto v = ag::slice_cols(qkv, 2 * c.dim + h * dh, 2 * c.dim + (h + 1) * dh);
      auto attn = ag::softmax_rows(ag::scale(ag::matmul_nt(q, k), inv));
      heads.push_back(ag::matmul(attn, v));
    }
    auto x = ag::add(seq, blk.proj(heads.size() == 1 ? heads.front() : ag::concat_cols(heads)));
    auto mlp = blk.fc2(ag::gelu(blk.fc1(blk.norm2(x))));
    return ag::add(x, mlp);
  }

  nn::Linear<T> embed_;
  ag::Var<T> pos_, cls_, cls_pos_;
  std::vector<Block> blocks_;
  nn::LayerNorm<T> final_norm_;
};

template <typename T = float>
std::unique_ptr<ClassifierModel<T>> make_model(const ModelConfig& cfg, std::uint64_t seed) {
  require<ValidationError>(cfg.num_classes >= 1, "num_classes must be at least 1");
  std::unique_ptr<ClassifierModel<T>> m;
  if (cfg.arch == Arch::conv)
    m = std::make_unique<ConvClassifier<T>>(cfg, seed);
  else
    m = std::make_unique<AttentionClassifier<T>>(cfg, seed);
  for (int t : cfg.taps) m->resolve_tap(t);
  return m;
}

// Copies parameter values between two models built from the same config.
template <typename T>
void copy_parameters(const ClassifierModel<T>& from, ClassifierModel<T>& to) {
  auto src = from.parameters();
  auto dst = to.parameters();
  require<ShapeError>(src.size() == dst.size(), "copy_parameters: models differ in parameter count");
  for (std::size_t i = 0; i < src.size(); ++i) {
    require<ShapeError>(src[i].name == dst[i].name && src[i].var.value().same_shape(dst[i].var.value()),
                        "copy_parameters: mismatch at ", src[i].name);
    dst[i].var.mutable_value() = src[i].var.value();
  }
}

template <typename T>
std::unique_ptr<ClassifierModel<T>> clone_model(const ClassifierModel<T>& m) {
  auto out = make_model<T>(m.config(), 0);
  copy_parameters(m, *out);
  return out;
}

template <typename T>
struct BatchForward {
  Tensor<T> logits;                                        // B×K
  std::map<int, std::vector<FeatureMap<T>>> features;      // tap -> one map per batch item
};

// Single pass per batch item over a B×3×H×W batch; taps are validated first.
template <typename T>
BatchForward<T> forward_with_features(const ClassifierModel<T>& model, const Tensor<T>& batch,
                                      const std::vector<int>& taps) {
  for (int t : taps) model.resolve_tap(t);
  require<ShapeError>(batch.rank() == 4 && batch.dim(1) == 3, "batch must be B×3×H×W, got ", shape_str(batch.shape()));
  const int b = batch.dim(0), h = batch.dim(2), w = batch.dim(3);
  const std::size_t per = static_cast<std::size_t>(3) * h * w;
  BatchForward<T> out;
  out.logits = Tensor<T>({b, model.num_classes()});
  for (int i = 0; i < b; ++i) {
    Tensor<T> img({3, h, w});
    std::copy_n(batch.data() + per * i, per, img.data());
    auto r = model.forward(img, taps);
    for (int k = 0; k < model.num_classes(); ++k) out.logits(i, k) = r.logits.value()[static_cast<std::size_t>(k)];
    for (auto& [tap, var] : r.taps) out.features[tap].push_back({var.value(), model.arch(), tap});
  }
  return out;
}

}  // namespace wsss
