#pragma once

// Two-label fully connected CRF refinement by mean-field inference.

#include <algorithm>
#include <cmath>
#include <vector>

#include "json.hpp"
#include "wsss/cam.hpp"
#include "wsss/image.hpp"

namespace wsss {

struct CrfParams {
  double scaling = 16;  // background prob = (1 - cam)^scaling
  int iterations = 10;
  double gaussian_sxy = 3;
  double bilateral_sxy = 20;
  double bilateral_srgb = 13;
  double w_gaussian = 3;
  double w_bilateral = 4;

  std::vector<std::string> problems() const {
    std::vector<std::string> p;
    if (iterations < 1) p.push_back("crf.iterations must be >= 1");
    if (!(scaling > 0)) p.push_back("crf.scaling must be > 0");
    if (!(gaussian_sxy > 0) || !(bilateral_sxy > 0) || !(bilateral_srgb > 0))
      p.push_back("crf kernel widths must be > 0");
    if (w_gaussian < 0 || w_bilateral < 0) p.push_back("crf kernel weights must be >= 0");
    return p;
  }
};

inline void to_json(nlohmann::json& j, const CrfParams& c) {
  j = nlohmann::json{{"scaling", c.scaling},           {"iterations", c.iterations},
                     {"gaussian_sxy", c.gaussian_sxy}, {"bilateral_sxy", c.bilateral_sxy},
                     {"bilateral_srgb", c.bilateral_srgb}, {"w_gaussian", c.w_gaussian},
                     {"w_bilateral", c.w_bilateral}};
}

inline void from_json(const nlohmann::json& j, CrfParams& c) {
  c.scaling = j.value("scaling", c.scaling);
  c.iterations = j.value("iterations", c.iterations);
  c.gaussian_sxy = j.value("gaussian_sxy", c.gaussian_sxy);
  c.bilateral_sxy = j.value("bilateral_sxy", c.bilateral_sxy);
  c.bilateral_srgb = j.value("bilateral_srgb", c.bilateral_srgb);
  c.w_gaussian = j.value("w_gaussian", c.w_gaussian);
  c.w_bilateral = j.value("w_bilateral", c.w_bilateral);
}

struct CrfResult {
  Tensor<double> probabilities;             // 2×H×W, [0] background, [1] smoke
  PseudoMask mask;
  std::vector<double> changes;              // L∞ change of Q per iteration
  std::vector<double> normalization_error;  // max |Q_bg + Q_fg - 1|, initial state first
};

// Foreground probability from a normalised activation, clipped away from 0 and 1.
inline double crf_foreground_prob(double cam, double scaling) {
  constexpr double eps = 1e-6;
  return std::clamp(1.0 - std::pow(std::max(0.0, 1.0 - cam), scaling), eps, 1.0 - eps);
}

// Kernels are truncated at three standard deviations.
inline CrfResult crf_refine(const Image& image, const ActivationMap<float>& cam, const CrfParams& params = {}) {
  require<ValidationError>(cam.normalized, "crf_refine needs a normalized CAM");
  if (auto p = params.problems(); !p.empty()) throw ValidationError(std::move(p));
  require<ShapeError>(image.channels == 3, "crf_refine needs an RGB image");
  require<ShapeError>(cam.height() == image.height && cam.width() == image.width, "crf_refine: cam ",
                      cam.height(), "x", cam.width(), " vs image ", image.height, "x", image.width);
  const int h = image.height, w = image.width;
  const std::size_t n = static_cast<std::size_t>(h) * w;

  std::vector<double> unary_fg(n), unary_bg(n);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double a = cam.data(0, y, x);
      for (int k = 1; k < cam.classes(); ++k) a = std::max(a, static_cast<double>(cam.data(k, y, x)));
      const double fg = crf_foreground_prob(a, params.scaling);
      unary_fg[static_cast<std::size_t>(y) * w + x] = -std::log(fg);
      unary_bg[static_cast<std::size_t>(y) * w + x] = -std::log(1.0 - fg);
    }

  const int rg = params.w_gaussian > 0 ? static_cast<int>(std::ceil(3 * params.gaussian_sxy)) : 0;
  const int rb = params.w_bilateral > 0 ? static_cast<int>(std::ceil(3 * params.bilateral_sxy)) : 0;
  const int r = std::min(std::max(rg, rb), std::max(h, w));
  const int span = 2 * r + 1;
  std::vector<double> spatial_g(static_cast<std::size_t>(span) * span, 0.0), spatial_b(spatial_g.size(), 0.0);
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx) {
      const double d2 = dy * dy + dx * dx;
      const std::size_t o = static_cast<std::size_t>(dy + r) * span + (dx + r);
      if (std::abs(dy) <= rg && std::abs(dx) <= rg)
        spatial_g[o] = params.w_gaussian * std::exp(-d2 / (2 * params.gaussian_sxy * params.gaussian_sxy));
      if (std::abs(dy) <= rb && std::abs(dx) <= rb)
        spatial_b[o] = params.w_bilateral * std::exp(-d2 / (2 * params.bilateral_sxy * params.bilateral_sxy));
    }
  // colour term indexed by squared RGB distance
  std::vector<double> colour(3 * 255 * 255 + 1);
  for (std::size_t d2 = 0; d2 < colour.size(); ++d2)
    colour[d2] = std::exp(-static_cast<double>(d2) / (2 * params.bilateral_srgb * params.bilateral_srgb));

  auto for_neighbours = [&](int y, int x, auto&& fn) {
    const std::uint8_t* pi = &image.pixels[(static_cast<std::size_t>(y) * w + x) * 3];
    for (int yy = std::max(0, y - r); yy <= std::min(h - 1, y + r); ++yy)
      for (int xx = std::max(0, x - r); xx <= std::min(w - 1, x + r); ++xx) {
        if (yy == y && xx == x) continue;
        const std::size_t o = static_cast<std::size_t>(yy - y + r) * span + (xx - x + r);
        double k = spatial_g[o];
        if (spatial_b[o] > 0) {
          const std::uint8_t* pj = &image.pixels[(static_cast<std::size_t>(yy) * w + xx) * 3];
          int d2 = 0;
          for (int c = 0; c < 3; ++c) d2 += (pi[c] - pj[c]) * (pi[c] - pj[c]);
          k += spatial_b[o] * colour[static_cast<std::size_t>(d2)];
        }
        if (k > 0) fn(static_cast<std::size_t>(yy) * w + xx, k);
      }
  };

  // Total kernel mass per pixel: the background message is degree - fg message.
  std::vector<double> degree(n, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for_neighbours(y, x, [&](std::size_t, double k) { degree[static_cast<std::size_t>(y) * w + x] += k; });

  CrfResult res;
  std::vector<double> q_fg(n), q_bg(n);
  auto update = [&](const std::vector<double>& msg_fg, bool pairwise) {
    double change = 0, norm_err = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double msg_bg = pairwise ? degree[i] - msg_fg[i] : 0.0;
      // Potts: each label pays for the mass on the other label
      const double e_fg = -unary_fg[i] - msg_bg;
      const double e_bg = -unary_bg[i] - msg_fg[i];
      const double m = std::max(e_fg, e_bg);
      const double a = std::exp(e_fg - m), b = std::exp(e_bg - m);
      const double fg = a / (a + b), bg = b / (a + b);
      change = std::max(change, std::abs(fg - q_fg[i]));
      q_fg[i] = fg;
      q_bg[i] = bg;
      norm_err = std::max(norm_err, std::abs(fg + bg - 1.0));
    }
    return std::pair{change, norm_err};
  };

  std::vector<double> msg(n, 0.0);
  res.normalization_error.push_back(update(msg, false).second);  // unary softmax

  for (int it = 0; it < params.iterations; ++it) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double s = 0;
        for_neighbours(y, x, [&](std::size_t j, double k) { s += k * q_fg[j]; });
        msg[static_cast<std::size_t>(y) * w + x] = s;
      }
    auto [change, err] = update(msg, true);
    res.changes.push_back(change);
    res.normalization_error.push_back(err);
  }

  res.probabilities = Tensor<double>({2, h, w});
  res.mask.labels = Tensor<int>({h, w});
  for (std::size_t i = 0; i < n; ++i) {
    res.probabilities[i] = q_bg[i];
    res.probabilities[n + i] = q_fg[i];
    res.mask.labels[i] = q_fg[i] > q_bg[i] ? 1 : 0;
  }
  return res;
}

}  // namespace wsss
