#pragma once

// Smoke-class IoU from accumulated confusion counts, threshold sweeps and
// report writers.

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "wsss/cam.hpp"
#include "wsss/image.hpp"

namespace wsss {

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  friend ConfusionCounts operator+(ConfusionCounts a, const ConfusionCounts& b) { return a += b; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

inline ConfusionCounts accumulate_confusion(const Tensor<int>& pred, const Tensor<int>& gt, ConfusionCounts acc = {}) {
  require<ShapeError>(pred.same_shape(gt), "prediction ", shape_str(pred.shape()), " and ground truth ",
                      shape_str(gt.shape()), " differ in shape");
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    if (p && g) ++acc.tp;
    else if (p) ++acc.fp;
    else if (g) ++acc.fn;
    else ++acc.tn;
  }
  return acc;
}

inline ConfusionCounts accumulate_confusion(const PseudoMask& pred, const Tensor<int>& gt, ConfusionCounts acc = {}) {
  return accumulate_confusion(pred.labels, gt, acc);
}

// tp / (tp + fp + fn); empty when the denominator is zero.
inline std::optional<double> smoke_iou(const ConfusionCounts& c) {
  const auto denom = c.tp + c.fp + c.fn;
  if (denom == 0) return std::nullopt;
  return static_cast<double>(c.tp) / static_cast<double>(denom);
}

inline std::string format_iou(const std::optional<double>& iou) {
  if (!iou) return "n/a";
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << *iou;
  return os.str();
}

inline std::vector<double> default_threshold_grid() {
  std::vector<double> g;
  for (int i = 1; i <= 19; ++i) g.push_back(i * 0.05);
  return g;
}

struct SweepResult {
  std::vector<double> grid;
  std::vector<ConfusionCounts> counts;            // dataset confusion per grid value
  std::vector<std::optional<double>> iou;          // dataset IoU per grid value
  double best_threshold = 0;
  std::optional<double> best_iou;
  std::vector<double> per_image_optimum;           // argmax of each image's curve
  std::map<double, int> histogram;                 // grid value -> number of images
};

inline SweepResult threshold_sweep(const std::vector<ActivationMap<float>>& cams, const std::vector<Tensor<int>>& gts,
                                   const std::vector<double>& grid = default_threshold_grid()) {
  require<ValidationError>(!grid.empty(), "threshold grid is empty");
  require<ValidationError>(std::is_sorted(grid.begin(), grid.end()), "threshold grid must be sorted");
  require<ValidationError>(cams.size() == gts.size(), "threshold_sweep: ", cams.size(), " cams vs ", gts.size(),
                           " ground-truth masks");
  SweepResult r;
  r.grid = grid;
  r.counts.assign(grid.size(), {});
  for (double g : grid) r.histogram[g] = 0;
  for (std::size_t i = 0; i < cams.size(); ++i) {
    std::optional<double> best;
    double best_t = grid.front();
    for (std::size_t k = 0; k < grid.size(); ++k) {
      const auto c = accumulate_confusion(cam_to_mask(cams[i], grid[k]), gts[i]);
      r.counts[k] += c;
      const auto iou = smoke_iou(c);
      if (iou && (!best || *iou > *best)) {
        best = iou;
        best_t = grid[k];
      }
    }
    r.per_image_optimum.push_back(best_t);
    ++r.histogram[best_t];
  }
  for (std::size_t k = 0; k < grid.size(); ++k) {
    r.iou.push_back(smoke_iou(r.counts[k]));
    if (r.iou.back() && (!r.best_iou || *r.iou.back() > *r.best_iou)) {
      r.best_iou = r.iou.back();
      r.best_threshold = grid[k];
    }
  }
  if (!r.best_iou) r.best_threshold = grid.front();
  return r;
}

// ---------------------------------------------------------------------------
// Reports

struct ReportRow {
  std::string method;
  ConfusionCounts counts;
  std::size_t images = 0;
};

inline std::string report_csv(const std::vector<ReportRow>& rows) {
  std::ostringstream os;
  os << "method,images,tp,fp,fn,tn,smoke_iou\n";
  for (const auto& r : rows)
    os << r.method << ',' << r.images << ',' << r.counts.tp << ',' << r.counts.fp << ',' << r.counts.fn << ','
       << r.counts.tn << ',' << format_iou(smoke_iou(r.counts)) << '\n';
  return os.str();
}

inline std::string report_text(const std::vector<ReportRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(28) << "Method" << "mIoU (smoke)\n";
  for (const auto& r : rows) {
    const auto iou = smoke_iou(r.counts);
    os << std::left << std::setw(28) << r.method;
    if (iou)
      os << std::fixed << std::setprecision(2) << *iou * 100 << '\n';
    else
      os << "n/a\n";
  }
  os << "IoU accumulates one confusion matrix over all evaluated pixels.\n";
  return os.str();
}

inline std::string sweep_csv(const SweepResult& s) {
  std::ostringstream os;
  os << "threshold,tp,fp,fn,tn,smoke_iou,images_with_optimum_here\n";
  for (std::size_t k = 0; k < s.grid.size(); ++k)
    os << std::setprecision(4) << s.grid[k] << ',' << s.counts[k].tp << ',' << s.counts[k].fp << ',' << s.counts[k].fn
       << ',' << s.counts[k].tn << ',' << format_iou(s.iou[k]) << ',' << s.histogram.at(s.grid[k]) << '\n';
  return os.str();
}

inline std::string sweep_text(const SweepResult& s) {
  std::ostringstream os;
  os << "best global threshold " << std::setprecision(4) << s.best_threshold << " -> smoke IoU "
     << format_iou(s.best_iou) << "\nper-image optimal thresholds:\n";
  for (const auto& [t, count] : s.histogram)
    os << "  " << std::fixed << std::setprecision(2) << t << "  " << std::string(static_cast<std::size_t>(count), '#')
       << ' ' << count << '\n';
  return os.str();
}

}  // namespace wsss
