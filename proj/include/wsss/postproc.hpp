#pragma once

// Proposal-based mask fusion and the proposal providers behind it.

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "wsss/cam.hpp"
#include "wsss/image.hpp"

namespace wsss {

struct MaskProposal {
  Tensor<int> mask;  // H×W, 0/1
  double score = 1.0;
};

enum class FusionStrategy { AND, OR, COPY };

inline FusionStrategy parse_fusion_strategy(const std::string& s) {
  if (s == "and" || s == "AND") return FusionStrategy::AND;
  if (s == "or" || s == "OR") return FusionStrategy::OR;
  if (s == "copy" || s == "COPY") return FusionStrategy::COPY;
  fail<ValidationError>("unknown fusion strategy '", s, "' (expected and, or, copy)");
}

inline std::string to_string(FusionStrategy s) {
  switch (s) {
    case FusionStrategy::AND: return "and";
    case FusionStrategy::OR: return "or";
    case FusionStrategy::COPY: return "copy";
  }
  return "?";
}

inline double mask_iou(const Tensor<int>& a, const Tensor<int>& b) {
  require<ShapeError>(a.same_shape(b), "mask_iou: shapes ", shape_str(a.shape()), " and ", shape_str(b.shape()));
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] != 0, y = b[i] != 0;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// Union of the proposals overlapping the seed by at least iou_thresh, combined
// with the seed by the chosen strategy.
inline PseudoMask sam_enhance(const PseudoMask& seed, const std::vector<MaskProposal>& proposals, double iou_thresh = 0.3,
                              FusionStrategy strategy = FusionStrategy::COPY) {
  Tensor<int> selected(seed.labels.shape(), 0);
  for (const auto& p : proposals) {
    if (mask_iou(p.mask, seed.labels) < iou_thresh) continue;
    for (std::size_t i = 0; i < selected.size(); ++i)
      if (p.mask[i]) selected[i] = 1;
  }
  PseudoMask out{Tensor<int>(seed.labels.shape(), 0)};
  for (std::size_t i = 0; i < selected.size(); ++i) {
    const bool s = seed.labels[i] != 0, u = selected[i] != 0;
    switch (strategy) {
      case FusionStrategy::COPY: out.labels[i] = u; break;
      case FusionStrategy::OR: out.labels[i] = s || u; break;
      case FusionStrategy::AND: out.labels[i] = s && u; break;
    }
  }
  return out;
}

class ProposalProvider {
 public:
  virtual ~ProposalProvider() = default;
  // image_path identifies the image for providers that work from files.
  virtual std::vector<MaskProposal> generate(const Image& image, const fs::path& image_path, int points_per_side) = 0;
  virtual bool concurrent_safe() const { return false; }
};

// 4-connected components of a label image, one mask per component.
inline std::vector<Tensor<int>> connected_components(const Tensor<int>& labels) {
  const int h = labels.dim(0), w = labels.dim(1);
  Tensor<int> seen({h, w}, 0);
  std::vector<Tensor<int>> out;
  std::vector<std::pair<int, int>> stack;
  for (int y0 = 0; y0 < h; ++y0)
    for (int x0 = 0; x0 < w; ++x0) {
      if (seen(y0, x0)) continue;
      const int lab = labels(y0, x0);
      Tensor<int> comp({h, w}, 0);
      stack.assign(1, {y0, x0});
      seen(y0, x0) = 1;
      while (!stack.empty()) {
        auto [y, x] = stack.back();
        stack.pop_back();
        comp(y, x) = 1;
        const int ny[4] = {y - 1, y + 1, y, y}, nx[4] = {x, x, x - 1, x + 1};
        for (int k = 0; k < 4; ++k) {
          if (ny[k] < 0 || ny[k] >= h || nx[k] < 0 || nx[k] >= w) continue;
          if (seen(ny[k], nx[k]) || labels(ny[k], nx[k]) != lab) continue;
          seen(ny[k], nx[k]) = 1;
          stack.emplace_back(ny[k], nx[k]);
        }
      }
      out.push_back(std::move(comp));
    }
  return out;
}

// Offline stand-in for a promptable segmenter: each connected region of an
// object label image becomes a proposal if one of the points_per_side²
// prompt points lands in it. Optional boundary jitter is seeded per image.
class ComponentProposalProvider final : public ProposalProvider {
 public:
  using LabelLookup = std::function<Tensor<int>(const fs::path&)>;

  explicit ComponentProposalProvider(LabelLookup lookup, double jitter = 0.0, std::uint64_t seed = 0)
      : lookup_(std::move(lookup)), jitter_(jitter), seed_(seed) {}

  std::vector<MaskProposal> generate(const Image& image, const fs::path& image_path, int points_per_side) override {
    require<ValidationError>(points_per_side >= 1, "points_per_side must be >= 1");
    const Tensor<int> labels = lookup_(image_path);
    require<ShapeError>(labels.dim(0) == image.height && labels.dim(1) == image.width, "label image for ",
                        image_path.string(), " does not match the image size");
    return from_labels(labels, points_per_side, jitter_, seed_ ^ std::hash<std::string>{}(image_path.filename().string()));
  }

  bool concurrent_safe() const override { return true; }

  static std::vector<MaskProposal> from_labels(const Tensor<int>& labels, int points_per_side, double jitter = 0.0,
                                               std::uint64_t seed = 0) {
    const int h = labels.dim(0), w = labels.dim(1);
    std::vector<std::pair<int, int>> points;
    for (int i = 0; i < points_per_side; ++i)
      for (int j = 0; j < points_per_side; ++j)
        points.emplace_back(std::min(h - 1, static_cast<int>((i + 0.5) * h / points_per_side)),
                            std::min(w - 1, static_cast<int>((j + 0.5) * w / points_per_side)));
    std::mt19937_64 rng(seed);
    std::vector<MaskProposal> out;
    for (auto& comp : connected_components(labels)) {
      int hits = 0;
      for (auto [y, x] : points) hits += comp(y, x);
      if (hits == 0) continue;
      if (jitter > 0) comp = perturb(comp, jitter, rng);
      if (std::find(comp.storage().begin(), comp.storage().end(), 1) == comp.storage().end()) continue;
      out.push_back({std::move(comp), static_cast<double>(hits) / static_cast<double>(points.size())});
    }
    return out;
  }

 private:
  // Boundary pixels flip with probability `p`.
  static Tensor<int> perturb(const Tensor<int>& m, double p, std::mt19937_64& rng) {
    const int h = m.dim(0), w = m.dim(1);
    std::bernoulli_distribution flip(p);
    Tensor<int> out = m;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        bool boundary = false;
        if (y > 0) boundary |= m(y - 1, x) != m(y, x);
        if (y + 1 < h) boundary |= m(y + 1, x) != m(y, x);
        if (x > 0) boundary |= m(y, x - 1) != m(y, x);
        if (x + 1 < w) boundary |= m(y, x + 1) != m(y, x);
        if (boundary && flip(rng)) out(y, x) = 1 - m(y, x);
      }
    return out;
  }

  LabelLookup lookup_;
  double jitter_;
  std::uint64_t seed_;
};

// ---------------------------------------------------------------------------
// Proposal container: a directory holding index.json and one PGM mask per
// proposal, {"image": "...", "points_per_side": 32,
//  "proposals": [{"mask": "0.pgm", "score": 0.9}, ...]}.

inline void write_proposals(const fs::path& dir, const std::string& image_name, int points_per_side,
                            const std::vector<MaskProposal>& proposals) {
  fs::create_directories(dir);
  nlohmann::json index{{"image", image_name}, {"points_per_side", points_per_side}, {"proposals", nlohmann::json::array()}};
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    const std::string name = std::to_string(i) + ".pgm";
    write_mask(dir / name, proposals[i].mask);
    index["proposals"].push_back({{"mask", name}, {"score", proposals[i].score}});
  }
  write_atomically(dir / "index.json", [&](std::ofstream& out) { out << index.dump(2) << "\n"; });
}

inline std::vector<MaskProposal> read_proposals(const fs::path& dir) {
  const fs::path index_path = dir / "index.json";
  std::ifstream in(index_path);
  require<IoError>(static_cast<bool>(in), "missing proposal index ", index_path.string());
  nlohmann::json index;
  try {
    in >> index;
  } catch (const nlohmann::json::exception& e) {
    fail<IoError>(index_path.string(), ": ", e.what());
  }
  std::vector<MaskProposal> out;
  for (const auto& p : index.at("proposals")) {
    MaskProposal mp{read_mask(dir / p.at("mask").get<std::string>()), p.value("score", 1.0)};
    if (std::find(mp.mask.storage().begin(), mp.mask.storage().end(), 1) != mp.mask.storage().end())
      out.push_back(std::move(mp));
  }
  return out;
}

// Reads proposals produced ahead of time into <root>/<image stem>/.
class DirectoryProposalProvider final : public ProposalProvider {
 public:
  explicit DirectoryProposalProvider(fs::path root) : root_(std::move(root)) {}

  std::vector<MaskProposal> generate(const Image& image, const fs::path& image_path, int) override {
    auto out = read_proposals(root_ / image_path.stem());
    for (const auto& p : out)
      require<ShapeError>(p.mask.dim(0) == image.height && p.mask.dim(1) == image.width, "proposal for ",
                          image_path.string(), " does not match the image size");
    return out;
  }
  bool concurrent_safe() const override { return true; }

 private:
  fs::path root_;
};

// Runs an external generator per image. The command template may use
// {image}, {points} and {out}; the generator must fill {out} with a proposal
// container.
class SubprocessProposalProvider final : public ProposalProvider {
 public:
  SubprocessProposalProvider(std::string command_template, fs::path scratch)
      : template_(std::move(command_template)), scratch_(std::move(scratch)) {}

  std::vector<MaskProposal> generate(const Image& image, const fs::path& image_path, int points_per_side) override {
    const fs::path out_dir = scratch_ / image_path.stem();
    fs::remove_all(out_dir);
    fs::create_directories(out_dir);
    std::string cmd = template_;
    substitute(cmd, "{image}", quote(image_path.string()));
    substitute(cmd, "{points}", std::to_string(points_per_side));
    substitute(cmd, "{out}", quote(out_dir.string()));
    const int rc = std::system(cmd.c_str());
    require<IoError>(rc == 0, "proposal command failed (status ", rc, "): ", cmd);
    return DirectoryProposalProvider(scratch_).generate(image, image_path, points_per_side);
  }

 private:
  static void substitute(std::string& s, const std::string& key, const std::string& value) {
    for (auto pos = s.find(key); pos != std::string::npos; pos = s.find(key, pos + value.size()))
      s.replace(pos, key.size(), value);
  }
  static std::string quote(const std::string& s) {
    std::string out = "'";
    for (char c : s) out += c == '\'' ? std::string("'\\''") : std::string(1, c);
    return out + "'";
  }

  std::string template_;
  fs::path scratch_;
};

}  // namespace wsss
