#pragma once

// 8-bit raster images and binary Netpbm (PGM/PPM) I/O.

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "wsss/tensor.hpp"

namespace wsss {

namespace fs = std::filesystem;

struct Image {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<std::uint8_t> pixels;  // row-major, interleaved channels

  Image() = default;
  Image(int h, int w, int c, std::uint8_t fill = 0)
      : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h) * w * c, fill) {}

  std::uint8_t& at(int y, int x, int c = 0) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t at(int y, int x, int c = 0) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  bool same_size(const Image& o) const { return height == o.height && width == o.width; }
};

// Writes to a sibling temporary file and renames it into place.
template <typename Fn>
void write_atomically(const fs::path& path, Fn&& writer) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require<IoError>(static_cast<bool>(out), "cannot open ", tmp.string(), " for writing");
    writer(out);
    out.flush();
    require<IoError>(static_cast<bool>(out), "write failed for ", tmp.string());
  }
  fs::rename(tmp, path);
}

namespace detail {

inline std::string pnm_token(std::istream& in) {
  std::string tok;
  char ch = 0;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(ch);
  }
  return tok;
}

}  // namespace detail

struct ImageHeader {
  int height = 0;
  int width = 0;
  int channels = 0;
};

inline ImageHeader read_image_header(std::istream& in, const std::string& name) {
  const std::string magic = detail::pnm_token(in);
  require<IoError>(magic == "P5" || magic == "P6", name, ": not a binary PGM/PPM file (magic '", magic, "')");
  ImageHeader h;
  try {
    h.width = std::stoi(detail::pnm_token(in));
    h.height = std::stoi(detail::pnm_token(in));
    const int maxval = std::stoi(detail::pnm_token(in));
    require<IoError>(maxval == 255, name, ": only 8-bit images are supported (maxval ", maxval, ")");
  } catch (const std::logic_error&) {
    fail<IoError>(name, ": malformed image header");
  }
  require<IoError>(h.width >= 1 && h.height >= 1, name, ": empty image");
  h.channels = magic == "P6" ? 3 : 1;
  return h;
}

inline ImageHeader probe_image(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require<IoError>(static_cast<bool>(in), "cannot open image ", path.string());
  return read_image_header(in, path.string());
}

inline Image read_image(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require<IoError>(static_cast<bool>(in), "cannot open image ", path.string());
  const auto h = read_image_header(in, path.string());
  Image img(h.height, h.width, h.channels);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  require<IoError>(in.gcount() == static_cast<std::streamsize>(img.pixels.size()), path.string(),
                   ": truncated pixel data");
  return img;
}

// Expands single-channel images to RGB by replication.
inline Image read_rgb(const fs::path& path) {
  Image img = read_image(path);
  if (img.channels == 3) return img;
  Image rgb(img.height, img.width, 3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) rgb.at(y, x, c) = img.at(y, x);
  return rgb;
}

inline void write_image(const fs::path& path, const Image& img) {
  require<IoError>(img.channels == 1 || img.channels == 3, "only 1- or 3-channel images can be written");
  write_atomically(path, [&](std::ofstream& out) {
    out << (img.channels == 3 ? "P6" : "P5") << "\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  });
}

// Binary masks are stored as single-channel images: 0 = background, 255 = smoke.
inline Image mask_to_image(const Tensor<int>& mask) {
  require<ShapeError>(mask.rank() == 2, "mask must be H×W");
  Image img(mask.dim(0), mask.dim(1), 1);
  for (std::size_t i = 0; i < mask.size(); ++i) img.pixels[i] = mask[i] ? 255 : 0;
  return img;
}

inline Tensor<int> image_to_mask(const Image& img) {
  require<ShapeError>(img.channels == 1, "mask image must be single-channel");
  Tensor<int> m({img.height, img.width});
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = img.pixels[i] >= 128 ? 1 : 0;
  return m;
}

inline Tensor<int> read_mask(const fs::path& path) { return image_to_mask(read_image(path)); }

inline void write_mask(const fs::path& path, const Tensor<int>& mask) { write_image(path, mask_to_image(mask)); }

// RGB image as a float H×W×3 tensor of raw 0..255 values.
inline Tensor<float> image_to_hwc(const Image& img) {
  require<ShapeError>(img.channels == 3, "expected an RGB image");
  Tensor<float> t({img.height, img.width, 3});
  for (std::size_t i = 0; i < img.pixels.size(); ++i) t[i] = img.pixels[i];
  return t;
}

template <typename T>
Tensor<T> hwc_to_chw(const Tensor<T>& hwc) {
  require<ShapeError>(hwc.rank() == 3, "hwc_to_chw expects H×W×C");
  const int h = hwc.dim(0), w = hwc.dim(1), c = hwc.dim(2);
  Tensor<T> out({c, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < c; ++k) out(k, y, x) = hwc(y, x, k);
  return out;
}

// Nearest-neighbour resize for label maps.
inline Tensor<int> resize_nearest(const Tensor<int>& m, int out_h, int out_w) {
  const int h = m.dim(0), w = m.dim(1);
  Tensor<int> out({out_h, out_w});
  for (int y = 0; y < out_h; ++y) {
    const int sy = std::min(h - 1, static_cast<int>((y + 0.5) * h / out_h));
    for (int x = 0; x < out_w; ++x) {
      const int sx = std::min(w - 1, static_cast<int>((x + 0.5) * w / out_w));
      out(y, x) = m(sy, sx);
    }
  }
  return out;
}

}  // namespace wsss
