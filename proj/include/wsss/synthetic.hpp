#pragma once

// Seeded synthetic scenes where smoke plumes co-occur with chimneys at a
// controllable rate.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "wsss/dataset.hpp"

namespace wsss {

struct SceneSpec {
  int height = 64;
  int width = 64;
  bool smoke_present = true;
  bool chimney_present = true;
  double coupling = 1.0;  // recorded for provenance; presence flags decide the scene
  std::uint64_t seed = 0;
};

// Object ids in the label image handed to the proposal provider.
enum SceneObject : int { kSky = 1, kGround = 2, kChimney = 3, kSmoke = 4 };

struct Scene {
  Image image;              // RGB
  Tensor<int> gt;           // smoke mask
  int label = 0;
  Tensor<int> objects;      // SceneObject per pixel
  Tensor<int> chimney;      // chimney footprint
  Tensor<float> alpha;      // smoke opacity
};

inline constexpr double kSmokeMaskAlpha = 0.12;

namespace detail {

inline std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Bilinearly interpolated value noise on a cells×cells lattice, values in [0,1).
inline Tensor<float> value_noise(int h, int w, int cells, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.f, 1.f);
  Tensor<float> lattice({1, cells + 1, cells + 1});
  for (auto& v : lattice.storage()) v = u(rng);
  Tensor<float> out({h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const float fy = static_cast<float>(y) * cells / h, fx = static_cast<float>(x) * cells / w;
      const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
      const float ty = fy - y0, tx = fx - x0;
      out(y, x) = (1 - ty) * ((1 - tx) * lattice(0, y0, x0) + tx * lattice(0, y0, x0 + 1)) +
                  ty * ((1 - tx) * lattice(0, y0 + 1, x0) + tx * lattice(0, y0 + 1, x0 + 1));
    }
  return out;
}

inline std::uint8_t to_u8(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

}  // namespace detail

inline Scene generate_scene(const SceneSpec& spec) {
  require<ValidationError>(spec.height >= 16 && spec.width >= 16, "scene canvas must be at least 16x16");
  require<ValidationError>(spec.coupling >= 0 && spec.coupling <= 1, "coupling must lie in [0,1]");
  const int h = spec.height, w = spec.width;
  std::mt19937_64 rng(detail::splitmix(spec.seed));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * u(rng); };
  auto uni_int = [&](int a, int b) { return std::uniform_int_distribution<int>(a, b)(rng); };

  Scene s;
  s.label = spec.smoke_present ? 1 : 0;
  s.image = Image(h, w, 3);
  s.gt = Tensor<int>({h, w}, 0);
  s.objects = Tensor<int>({h, w}, 0);
  s.chimney = Tensor<int>({h, w}, 0);
  s.alpha = Tensor<float>({h, w}, 0.f);

  // sky over ground
  const int horizon = static_cast<int>(h * uni(0.68, 0.80));
  const std::array<double, 3> sky_top{uni(70, 100), uni(110, 140), uni(175, 210)};
  const std::array<double, 3> sky_low{uni(120, 150), uni(150, 175), uni(195, 220)};
  const std::array<double, 3> ground{uni(70, 100), uni(90, 115), uni(55, 75)};
  const Tensor<float> texture = detail::value_noise(h, w, 8, rng);
  std::vector<double> rgb(static_cast<std::size_t>(h) * w * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double t = static_cast<double>(y) / std::max(1, horizon);
      const double tex = (texture(y, x) - 0.5) * 14;
      for (int c = 0; c < 3; ++c)
        rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c] =
            y < horizon ? sky_top[c] + (sky_low[c] - sky_top[c]) * t + tex * 0.5 : ground[c] + tex;
      s.objects(y, x) = y < horizon ? kSky : kGround;
    }

  // chimney: a dark, high-contrast column standing on the horizon
  int stack_x = 0, stack_top = 0, stack_w = 0;
  if (spec.chimney_present) {
    stack_w = uni_int(4, 7);
    const int stack_h = uni_int(h / 4, h * 2 / 5);
    stack_x = uni_int(4, w - 4 - stack_w);
    stack_top = std::max(4, horizon - stack_h);
    const std::array<double, 3> brick{uni(85, 115), uni(30, 50), uni(25, 40)};
    for (int y = stack_top; y < std::min(h, horizon + 2); ++y)
      for (int x = stack_x; x < stack_x + stack_w; ++x) {
        const bool band = (y - stack_top) < 2;  // light rim at the top
        for (int c = 0; c < 3; ++c)
          rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c] = band ? 225.0 - 20 * c : brick[c];
        s.chimney(y, x) = 1;
        s.objects(y, x) = kChimney;
      }
  }

  // smoke: translucent plume drifting up from the chimney top, or from a
  // random point in the sky when no chimney anchors it
  if (spec.smoke_present) {
    double oy = 0, ox = 0;
    if (spec.chimney_present) {
      oy = stack_top - 1;
      ox = stack_x + stack_w / 2.0;
    } else {
      oy = uni(h * 0.35, horizon - 2);
      ox = uni(w * 0.2, w * 0.8);
    }
    const double drift = uni(-0.9, 0.9);
    const double length = uni(h * 0.3, h * 0.5);
    const double r0 = uni(2.0, 3.0), r1 = uni(6.0, 9.0);
    const double peak = uni(0.65, 0.85);
    const std::array<double, 3> smoke{uni(228, 248), uni(228, 248), uni(230, 250)};
    const Tensor<float> density = detail::value_noise(h, w, 6, rng);
    const int samples = 48;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double best = 0;
        for (int k = 0; k <= samples; ++k) {
          const double t = static_cast<double>(k) / samples;
          const double cy = oy - t * length;
          const double cx = ox + drift * t * length;
          const double r = r0 + (r1 - r0) * t;
          const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
          best = std::max(best, std::exp(-d2 / (2 * r * r)) * (1.0 - 0.35 * t));
        }
        const double a = peak * best * (0.55 + 0.45 * density(y, x));
        s.alpha(y, x) = static_cast<float>(a);
        if (a > kSmokeMaskAlpha) {
          s.gt(y, x) = 1;
          s.objects(y, x) = kSmoke;
        }
        for (int c = 0; c < 3; ++c) {
          double& v = rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c];
          v = (1 - a) * v + a * smoke[c];
        }
      }
  }

  // the chimney footprint counts only pixels not already labelled smoke
  for (std::size_t i = 0; i < s.chimney.size(); ++i)
    if (s.gt[i]) s.chimney[i] = 0;

  std::normal_distribution<double> grain(0.0, 2.0);
  for (std::size_t i = 0; i < rgb.size(); ++i) s.image.pixels[i] = detail::to_u8(rgb[i] + grain(rng));
  return s;
}

struct SplitSpec {
  int count = 100;
  double coupling = 1.0;
  std::uint64_t seed = 0;
  int height = 64;
  int width = 64;
};

inline void to_json(nlohmann::json& j, const SplitSpec& s) {
  j = nlohmann::json{{"count", s.count}, {"coupling", s.coupling}, {"seed", s.seed}, {"height", s.height}, {"width", s.width}};
}

inline void from_json(const nlohmann::json& j, SplitSpec& s) {
  s.count = j.value("count", s.count);
  s.coupling = j.value("coupling", s.coupling);
  s.seed = j.value("seed", s.seed);
  s.height = j.value("height", s.height);
  s.width = j.value("width", s.width);
}

// Scene specs for a balanced split: even indices carry smoke. A chimney is
// drawn with probability coupling·[smoke] + (1 - coupling)/2.
inline std::vector<SceneSpec> split_specs(const SplitSpec& split) {
  require<ValidationError>(split.count >= 1, "split size must be >= 1");
  require<ValidationError>(split.coupling >= 0 && split.coupling <= 1, "coupling must lie in [0,1]");
  std::mt19937_64 rng(detail::splitmix(split.seed ^ 0x5eedULL));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<SceneSpec> out;
  for (int i = 0; i < split.count; ++i) {
    SceneSpec s;
    s.height = split.height;
    s.width = split.width;
    s.smoke_present = i % 2 == 0;
    const double p = split.coupling * (s.smoke_present ? 1.0 : 0.0) + (1 - split.coupling) * 0.5;
    s.chimney_present = u(rng) < p;
    s.coupling = split.coupling;
    s.seed = detail::splitmix(split.seed * 1000003ULL + static_cast<std::uint64_t>(i));
    out.push_back(s);
  }
  return out;
}

inline std::vector<Scene> generate_scenes(const SplitSpec& split) {
  std::vector<Scene> out;
  for (const auto& s : split_specs(split)) out.push_back(generate_scene(s));
  return out;
}

// Writes images/, masks/, objects/ (label image ×50), chimney/ and a manifest
// plus a JSON sidecar of the generation parameters. Returns the manifest path.
inline fs::path generate_split(const fs::path& dir, const SplitSpec& split, const std::string& name = "split") {
  const auto specs = split_specs(split);
  std::vector<SampleRecord> records;
  nlohmann::json scenes = nlohmann::json::array();
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const Scene s = generate_scene(specs[i]);
    char id[32];
    std::snprintf(id, sizeof id, "%s_%05zu", name.c_str(), i);
    SampleRecord r;
    r.image_path = dir / "images" / (std::string(id) + ".ppm");
    r.mask_path = dir / "masks" / (std::string(id) + ".pgm");
    r.label = s.label;
    write_image(r.image_path, s.image);
    write_mask(*r.mask_path, s.gt);
    Image objects(s.objects.dim(0), s.objects.dim(1), 1);
    for (std::size_t p = 0; p < s.objects.size(); ++p) objects.pixels[p] = static_cast<std::uint8_t>(s.objects[p] * 50);
    write_image(dir / "objects" / (std::string(id) + ".pgm"), objects);
    write_mask(dir / "chimney" / (std::string(id) + ".pgm"), s.chimney);
    records.push_back(r);
    scenes.push_back({{"id", id}, {"smoke", specs[i].smoke_present}, {"chimney", specs[i].chimney_present},
                      {"seed", specs[i].seed}});
  }
  const fs::path manifest = dir / (name + ".tsv");
  write_manifest(manifest, records);
  nlohmann::json sidecar{{"split", split}, {"mask_alpha_threshold", kSmokeMaskAlpha}, {"scenes", scenes}};
  write_atomically(dir / (name + ".json"), [&](std::ofstream& out) { out << sidecar.dump(2) << "\n"; });
  return manifest;
}

// Object label image written by generate_split.
inline Tensor<int> read_object_labels(const fs::path& path) {
  const Image img = read_image(path);
  require<ShapeError>(img.channels == 1, path.string(), ": object label image must be single-channel");
  Tensor<int> out({img.height, img.width});
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (img.pixels[i] + 25) / 50;
  return out;
}

// Share of (ReLU'd) activation mass that falls inside the chimney footprint,
// pooled over a set of images.
struct ChimneyRatio {
  double inside = 0;
  double total = 0;
  double ratio() const { return total > 0 ? inside / total : 0.0; }
  void add(const Tensor<float>& activation, const Tensor<int>& chimney) {
    require<ShapeError>(activation.size() == chimney.size(), "activation and chimney mask differ in size");
    for (std::size_t i = 0; i < chimney.size(); ++i) {
      const double a = std::max(0.f, activation[i]);
      total += a;
      if (chimney[i]) inside += a;
    }
  }
};

}  // namespace wsss
