#pragma once

// Class activation maps: computation from features and head weights,
// normalisation, multi-scale and multi-layer fusion, thresholding, and the
// on-disk CAM container.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "wsss/backbone.hpp"
#include "wsss/checkpoint.hpp"

namespace wsss {

template <typename T = float>
struct ActivationMap {
  Tensor<T> data;  // K×H×W
  bool normalized = false;
  std::vector<int> class_ids;

  int classes() const { return data.dim(0); }
  int height() const { return data.dim(1); }
  int width() const { return data.dim(2); }
};

// H×W labels, 0 = background, 1 = smoke.
struct PseudoMask {
  Tensor<int> labels;

  int height() const { return labels.dim(0); }
  int width() const { return labels.dim(1); }
  std::size_t foreground() const {
    return static_cast<std::size_t>(std::count(labels.storage().begin(), labels.storage().end(), 1));
  }
};

inline std::vector<int> iota_ids(int k) {
  std::vector<int> ids(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) ids[static_cast<std::size_t>(i)] = i;
  return ids;
}

// M_c(x,y) = sum_i w_{c,i} f_i(x,y)
template <typename T>
ActivationMap<T> compute_cam(const Tensor<T>& feature, const Tensor<T>& head_weights) {
  require<ShapeError>(feature.rank() == 3 && head_weights.rank() == 2, "compute_cam expects C×h×w and K×C");
  const int c = feature.dim(0), k = head_weights.dim(0);
  require<ShapeError>(head_weights.dim(1) == c, "compute_cam: head has ", head_weights.dim(1),
                      " channels, feature has ", c);
  const int n = feature.dim(1) * feature.dim(2);
  ActivationMap<T> cam;
  cam.data = Tensor<T>({k, feature.dim(1), feature.dim(2)});
  cam.class_ids = iota_ids(k);
  for (int cls = 0; cls < k; ++cls) {
    T* out = cam.data.data() + static_cast<std::size_t>(cls) * n;
    for (int ch = 0; ch < c; ++ch) {
      const T w = head_weights(cls, ch);
      const T* f = feature.data() + static_cast<std::size_t>(ch) * n;
      for (int p = 0; p < n; ++p) out[p] += w * f[p];
    }
  }
  return cam;
}

// Per-class ReLU then division by the class maximum; all-zero classes stay zero.
template <typename T>
ActivationMap<T> normalize_cam(const ActivationMap<T>& cam) {
  ActivationMap<T> out = cam;
  const int k = cam.classes();
  const std::size_t n = cam.data.size() / static_cast<std::size_t>(k);
  for (int cls = 0; cls < k; ++cls) {
    T* d = out.data.data() + static_cast<std::size_t>(cls) * n;
    T mx{};
    for (std::size_t i = 0; i < n; ++i) {
      d[i] = std::max(d[i], T{});
      mx = std::max(mx, d[i]);
    }
    if (mx > T{})
      for (std::size_t i = 0; i < n; ++i) d[i] = std::min(d[i] / mx, T{1});
  }
  out.normalized = true;
  return out;
}

// Foreground wherever the strongest class activation reaches bg_threshold.
template <typename T>
PseudoMask cam_to_mask(const ActivationMap<T>& cam, double bg_threshold = 0.3) {
  require<ValidationError>(cam.normalized, "cam_to_mask needs a normalized CAM");
  const int h = cam.height(), w = cam.width();
  PseudoMask m{Tensor<int>({h, w})};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      T best = cam.data(0, y, x);
      for (int cls = 1; cls < cam.classes(); ++cls) best = std::max(best, cam.data(cls, y, x));
      m.labels(y, x) = static_cast<double>(best) >= bg_threshold ? 1 : 0;
    }
  return m;
}

template <typename T>
ActivationMap<T> resize_cam(const ActivationMap<T>& cam, int h, int w) {
  ActivationMap<T> out = cam;
  out.data = resize_bilinear(cam.data, h, w);
  return out;
}

// Pixelwise mean of same-sized maps.
template <typename T>
ActivationMap<T> mean_cams(const std::vector<ActivationMap<T>>& cams) {
  require<ValidationError>(!cams.empty(), "mean_cams of nothing");
  ActivationMap<T> out = cams.front();
  for (std::size_t i = 1; i < cams.size(); ++i) {
    require<ShapeError>(cams[i].data.same_shape(out.data), "mean_cams: shape mismatch");
    for (std::size_t p = 0; p < out.data.size(); ++p) out.data[p] += cams[i].data[p];
  }
  for (auto& v : out.data.storage()) v /= static_cast<T>(cams.size());
  return out;
}

// Input of `image` rescaled by `s`, rounded to the model's size multiple.
template <typename T>
Tensor<T> rescale_input(const Tensor<T>& image, double s, int multiple) {
  auto fit = [&](int d) {
    const int scaled = static_cast<int>(std::lround(d * s));
    return std::max(multiple, static_cast<int>(std::lround(static_cast<double>(scaled) / multiple)) * multiple);
  };
  return resize_bilinear(image, fit(image.dim(1)), fit(image.dim(2)));
}

namespace detail {

// Unnormalised CAM at one tap of a finished forward pass. Taps whose width
// matches the head use the shared head, others fall back to a channel-mean map.
template <typename T>
ActivationMap<T> tap_cam(const ClassifierModel<T>& model, const ModelOutput<T>& out, int tap) {
  const Tensor<T>& f = out.taps.at(tap).value();
  const Tensor<T>& w = model.head_weights();
  ActivationMap<T> cam;
  if (f.dim(0) == w.dim(1)) {
    cam = compute_cam(f, w);
  } else {
    const int k = model.num_classes(), c = f.dim(0), n = f.dim(1) * f.dim(2);
    cam.data = Tensor<T>({k, f.dim(1), f.dim(2)});
    cam.class_ids = iota_ids(k);
    for (int p = 0; p < n; ++p) {
      T s{};
      for (int ch = 0; ch < c; ++ch) s += f.data()[static_cast<std::size_t>(ch) * n + p];
      for (int cls = 0; cls < k; ++cls) cam.data.data()[static_cast<std::size_t>(cls) * n + p] = s / static_cast<T>(c);
    }
  }
  const auto& cfg = model.config();
  if (model.arch() == Arch::conv && cfg.pcm) {
    Tensor<T> pf = out.taps.at(cfg.pcm_tap).value();
    if (pf.dim(1) != cam.height() || pf.dim(2) != cam.width()) pf = resize_bilinear(pf, cam.height(), cam.width());
    cam.data = pcm_refine(cam.data, pf);
  }
  return cam;
}

template <typename T>
std::vector<int> with_pcm_tap(const ClassifierModel<T>& model, std::vector<int> taps) {
  if (model.arch() == Arch::conv && model.config().pcm) taps.push_back(model.config().pcm_tap);
  return taps;
}

}  // namespace detail

// Normalised CAM of the final tap, upsampled to the input resolution.
template <typename T>
ActivationMap<T> single_scale_cam(const ClassifierModel<T>& model, const Tensor<T>& image) {
  const auto out = model.forward(image, detail::with_pcm_tap(model, {-1}));
  return normalize_cam(resize_cam(detail::tap_cam(model, out, -1), image.dim(1), image.dim(2)));
}

// Per-scale CAMs resized to the original resolution, each normalised, averaged,
// then renormalised.
template <typename T>
ActivationMap<T> multiscale_cam(const ClassifierModel<T>& model, const Tensor<T>& image, const std::vector<double>& scales) {
  require<ValidationError>(!scales.empty(), "multiscale_cam needs at least one scale");
  for (double s : scales) require<ValidationError>(s > 0, "scales must be positive, got ", s);
  const int h = image.dim(1), w = image.dim(2);
  std::vector<ActivationMap<T>> per_scale;
  for (double s : scales) {
    const Tensor<T> scaled = s == 1.0 ? image : rescale_input(image, s, model.size_multiple());
    const auto out = model.forward(scaled, detail::with_pcm_tap(model, {-1}));
    per_scale.push_back(normalize_cam(resize_cam(detail::tap_cam(model, out, -1), h, w)));
  }
  return normalize_cam(mean_cams(per_scale));
}

template <typename T>
ActivationMap<T> layer_fusion_cam(const ClassifierModel<T>& model, const Tensor<T>& image, const std::vector<int>& layers) {
  require<ValidationError>(!layers.empty(), "layer_fusion_cam needs at least one layer");
  for (int l : layers) model.resolve_tap(l);
  const auto out = model.forward(image, detail::with_pcm_tap(model, layers));
  std::vector<ActivationMap<T>> cams;
  for (int l : layers) cams.push_back(normalize_cam(resize_cam(detail::tap_cam(model, out, l), image.dim(1), image.dim(2))));
  return normalize_cam(mean_cams(cams));
}

// Layers fused by default when the seed is weak.
inline const std::vector<int> kWeakSeedFusionLayers{-5, -4, -2};

// ---------------------------------------------------------------------------
// CAM container: "CAM1", u32 K, u32 H, u32 W, u8 normalized, K·H·W float32,
// all little-endian.

inline void write_cam_file(const fs::path& path, const ActivationMap<float>& cam) {
  write_atomically(path, [&](std::ofstream& out) {
    out.write("CAM1", 4);
    detail::put_u32(out, static_cast<std::uint32_t>(cam.classes()));
    detail::put_u32(out, static_cast<std::uint32_t>(cam.height()));
    detail::put_u32(out, static_cast<std::uint32_t>(cam.width()));
    const char flag = cam.normalized ? 1 : 0;
    out.write(&flag, 1);
    for (float v : cam.data.storage()) detail::put_f32(out, v);
  });
}

inline ActivationMap<float> read_cam_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require<IoError>(static_cast<bool>(in), "cannot open CAM file ", path.string());
  char magic[4] = {};
  in.read(magic, 4);
  require<IoError>(in.gcount() == 4 && std::memcmp(magic, "CAM1", 4) == 0, path.string(), ": not a CAM1 file");
  const auto k = static_cast<int>(detail::get_u32(in, "CAM header"));
  const auto h = static_cast<int>(detail::get_u32(in, "CAM header"));
  const auto w = static_cast<int>(detail::get_u32(in, "CAM header"));
  char flag = 0;
  in.read(&flag, 1);
  require<IoError>(in.gcount() == 1, path.string(), ": truncated CAM header");
  ActivationMap<float> cam;
  cam.data = Tensor<float>({k, h, w});
  cam.normalized = flag != 0;
  cam.class_ids = iota_ids(k);
  for (auto& v : cam.data.storage()) v = detail::get_f32(in, "CAM values");
  return cam;
}

}  // namespace wsss
