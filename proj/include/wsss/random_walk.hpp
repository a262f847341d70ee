#pragma once

// Label propagation by a random walk over colour/position pixel affinities.

#include <cmath>
#include <vector>

#include "json.hpp"
#include "wsss/cam.hpp"
#include "wsss/image.hpp"

namespace wsss {

struct RandomWalkParams {
  double sigma_color = 10;
  double sigma_pos = 3;
  int radius = 5;
  int beta = 8;
  int steps = 16;

  std::vector<std::string> problems() const {
    std::vector<std::string> p;
    if (radius < 1) p.push_back("random_walk.radius must be >= 1");
    if (beta < 1) p.push_back("random_walk.beta must be >= 1");
    if (steps < 0) p.push_back("random_walk.steps must be >= 0");
    if (!(sigma_color > 0) || !(sigma_pos > 0)) p.push_back("random_walk sigmas must be > 0");
    return p;
  }
};

inline void to_json(nlohmann::json& j, const RandomWalkParams& c) {
  j = nlohmann::json{{"sigma_color", c.sigma_color}, {"sigma_pos", c.sigma_pos}, {"radius", c.radius},
                     {"beta", c.beta},               {"steps", c.steps}};
}

inline void from_json(const nlohmann::json& j, RandomWalkParams& c) {
  c.sigma_color = j.value("sigma_color", c.sigma_color);
  c.sigma_pos = j.value("sigma_pos", c.sigma_pos);
  c.radius = j.value("radius", c.radius);
  c.beta = j.value("beta", c.beta);
  c.steps = j.value("steps", c.steps);
}

// Row-stochastic transition matrix in compressed sparse rows. Neighbours are
// pixels within Euclidean distance `radius`, the pixel itself included.
struct Transition {
  std::vector<std::size_t> row_start;
  std::vector<std::size_t> cols;
  std::vector<double> weights;
};

inline double pixel_affinity(const Image& image, int y0, int x0, int y1, int x1, double sigma_color, double sigma_pos) {
  double dc = 0;
  for (int c = 0; c < 3; ++c) {
    const double d = static_cast<double>(image.at(y0, x0, c)) - image.at(y1, x1, c);
    dc += d * d;
  }
  const double dp = static_cast<double>((y0 - y1) * (y0 - y1) + (x0 - x1) * (x0 - x1));
  return std::exp(-dc / (2 * sigma_color * sigma_color) - dp / (2 * sigma_pos * sigma_pos));
}

inline Transition build_transition(const Image& image, const RandomWalkParams& p) {
  if (auto probs = p.problems(); !probs.empty()) throw ValidationError(std::move(probs));
  require<ShapeError>(image.channels == 3, "random walk needs an RGB image");
  const int h = image.height, w = image.width, r = p.radius;
  Transition t;
  t.row_start.push_back(0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t begin = t.weights.size();
      double total = 0;
      for (int yy = std::max(0, y - r); yy <= std::min(h - 1, y + r); ++yy)
        for (int xx = std::max(0, x - r); xx <= std::min(w - 1, x + r); ++xx) {
          if ((yy - y) * (yy - y) + (xx - x) * (xx - x) > r * r) continue;
          const double a = std::pow(pixel_affinity(image, y, x, yy, xx, p.sigma_color, p.sigma_pos), p.beta);
          t.cols.push_back(static_cast<std::size_t>(yy) * w + xx);
          t.weights.push_back(a);
          total += a;
        }
      // the self-affinity is 1, so total > 0
      for (std::size_t k = begin; k < t.weights.size(); ++k) t.weights[k] /= total;
      t.row_start.push_back(t.weights.size());
    }
  return t;
}

// cam ← T^steps · cam for every class plane.
inline ActivationMap<float> affinity_random_walk(const Image& image, const ActivationMap<float>& cam,
                                                 const RandomWalkParams& p = {}) {
  require<ShapeError>(cam.height() == image.height && cam.width() == image.width, "random walk: cam ",
                      cam.height(), "x", cam.width(), " vs image ", image.height, "x", image.width);
  const Transition t = build_transition(image, p);
  const std::size_t n = static_cast<std::size_t>(image.height) * image.width;
  ActivationMap<float> out = cam;
  std::vector<double> cur(n), next(n);
  for (int k = 0; k < cam.classes(); ++k) {
    float* plane = out.data.data() + static_cast<std::size_t>(k) * n;
    for (std::size_t i = 0; i < n; ++i) cur[i] = plane[i];
    for (int s = 0; s < p.steps; ++s) {
      for (std::size_t i = 0; i < n; ++i) {
        double acc = 0;
        for (std::size_t e = t.row_start[i]; e < t.row_start[i + 1]; ++e) acc += t.weights[e] * cur[t.cols[e]];
        next[i] = acc;
      }
      cur.swap(next);
    }
    for (std::size_t i = 0; i < n; ++i) plane[i] = static_cast<float>(cur[i]);
  }
  return out;
}

}  // namespace wsss
