#pragma once

// Manifest loading, sliding-window cropping, smoke-patch filtering and
// per-channel normalisation.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "wsss/image.hpp"

namespace wsss {

enum class Split { train, test };

struct SampleRecord {
  fs::path image_path;
  int label = 0;  // 0 = non-smoke, 1 = smoke
  std::optional<fs::path> mask_path;
  Split split = Split::train;
  std::size_t line = 0;
  bool readable = true;
  std::string issue;  // why the image could not be decoded, when !readable

  std::string id() const { return image_path.stem().string(); }
};

// Manifest: one record per line, tab separated `image_path<TAB>label<TAB>[mask_path]`.
// Blank lines and lines starting with '#' are ignored; relative paths resolve
// against the manifest's directory. All malformed lines are reported together.
inline std::vector<SampleRecord> load_manifest(const fs::path& path, Split split = Split::train) {
  std::ifstream in(path);
  require<IoError>(static_cast<bool>(in), "manifest not found: ", path.string());
  const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");
  std::vector<SampleRecord> records;
  std::vector<std::string> problems;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '\t')) fields.push_back(f);
    auto where = [&] { return path.string() + ":" + std::to_string(lineno) + ": "; };
    if (fields.size() < 2 || fields.size() > 3 || fields[0].empty()) {
      problems.push_back(where() + "expected image_path<TAB>label<TAB>[mask_path]");
      continue;
    }
    SampleRecord r;
    r.line = lineno;
    r.split = split;
    r.image_path = fs::path(fields[0]).is_absolute() ? fs::path(fields[0]) : base / fields[0];
    if (fields[1] != "0" && fields[1] != "1") {
      problems.push_back(where() + "label must be 0 or 1, got '" + fields[1] + "'");
      continue;
    }
    r.label = fields[1] == "1" ? 1 : 0;
    if (fields.size() == 3 && !fields[2].empty())
      r.mask_path = fs::path(fields[2]).is_absolute() ? fs::path(fields[2]) : base / fields[2];
    if (split == Split::test && !r.mask_path) {
      problems.push_back(where() + "test records need a mask path");
      continue;
    }
    try {
      probe_image(r.image_path);
    } catch (const Error& e) {
      r.readable = false;
      r.issue = e.what();
    }
    records.push_back(std::move(r));
  }
  if (!problems.empty()) throw ValidationError(std::move(problems));
  return records;
}

inline void write_manifest(const fs::path& path, const std::vector<SampleRecord>& records) {
  const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");
  auto rel = [&](const fs::path& p) { return p.is_absolute() ? p.lexically_relative(fs::absolute(base)) : p.lexically_relative(base); };
  write_atomically(path, [&](std::ofstream& out) {
    for (const auto& r : records) {
      out << rel(r.image_path).generic_string() << '\t' << r.label;
      if (r.mask_path) out << '\t' << rel(*r.mask_path).generic_string();
      out << '\n';
    }
  });
}

template <typename T>
struct Patch {
  Tensor<T> pixels;  // window × window × C
  int row = 0;       // origin in the source image
  int col = 0;
  std::size_t source_id = 0;
};

// Window origins along one axis; the last window is clamped to the border.
inline std::vector<int> window_origins(int size, int window, int stride) {
  std::vector<int> out;
  for (int o = 0;; o += stride) {
    if (o + window >= size) {
      const int last = size - window;
      if (out.empty() || out.back() != last) out.push_back(last);
      break;
    }
    out.push_back(o);
  }
  return out;
}

template <typename T>
std::vector<Patch<T>> slide_crop(const Tensor<T>& image, int window, int stride, std::size_t source_id = 0) {
  require<ShapeError>(image.rank() == 3, "slide_crop expects H×W×C, got ", shape_str(image.shape()));
  require<ValidationError>(stride >= 1, "stride must be at least 1");
  require<ValidationError>(stride <= window, "stride ", stride, " exceeds window ", window, " and would leave gaps");
  const int h = image.dim(0), w = image.dim(1), c = image.dim(2);
  require<ShapeError>(window >= 1 && window <= h && window <= w, "window ", window,
                      " does not fit image ", h, "x", w);
  std::vector<Patch<T>> patches;
  for (int r : window_origins(h, window, stride))
    for (int q : window_origins(w, window, stride)) {
      Patch<T> p;
      p.row = r;
      p.col = q;
      p.source_id = source_id;
      p.pixels = Tensor<T>({window, window, c});
      for (int y = 0; y < window; ++y)
        for (int x = 0; x < window; ++x)
          for (int k = 0; k < c; ++k) p.pixels(y, x, k) = image(r + y, q + x, k);
      patches.push_back(std::move(p));
    }
  return patches;
}

// Keeps the patches whose aligned mask crop holds at least one smoke pixel.
template <typename T, typename M>
std::vector<Patch<T>> filter_smoke_patches(const std::vector<Patch<T>>& patches, const std::vector<Patch<M>>& masks) {
  require<ShapeError>(patches.size() == masks.size(), "filter_smoke_patches: ", patches.size(), " patches vs ",
                      masks.size(), " masks");
  std::vector<Patch<T>> kept;
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const auto& p = patches[i];
    const auto& m = masks[i];
    require<ShapeError>(p.pixels.dim(0) == m.pixels.dim(0) && p.pixels.dim(1) == m.pixels.dim(1) &&
                            p.row == m.row && p.col == m.col,
                        "filter_smoke_patches: mask ", i, " is not aligned with its patch");
    bool smoke = false;
    for (std::size_t k = 0; k < m.pixels.size() && !smoke; ++k) smoke = m.pixels[k] != M{};
    if (smoke) kept.push_back(p);
  }
  return kept;
}

struct Normalization {
  std::array<float, 3> mean{0.485f, 0.456f, 0.406f};
  std::array<float, 3> std{0.229f, 0.224f, 0.225f};
};

// (x/255 - mean) / std per channel; returns H×W×3.
inline Tensor<float> normalize(const Image& img, const Normalization& n = {}) {
  require<ShapeError>(img.channels == 3, "normalize expects an RGB image");
  Tensor<float> out({img.height, img.width, 3});
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const auto c = i % 3;
    out[i] = (static_cast<float>(img.pixels[i]) / 255.0f - n.mean[c]) / n.std[c];
  }
  return out;
}

// Inverse of normalize, in [0,1] units (x/255).
inline Tensor<float> denormalize(const Tensor<float>& hwc, const Normalization& n = {}) {
  require<ShapeError>(hwc.rank() == 3 && hwc.dim(2) == 3, "denormalize expects H×W×3");
  Tensor<float> out = hwc;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] * n.std[i % 3] + n.mean[i % 3];
  return out;
}

// Model input: normalised 3×H×W tensor.
inline Tensor<float> model_input(const Image& img, const Normalization& n = {}) { return hwc_to_chw(normalize(img, n)); }

}  // namespace wsss
