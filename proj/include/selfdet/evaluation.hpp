#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "selfdet/geometry.hpp"

namespace selfdet {

/// Detections (scored) and ground truth of one image. Missing class ids
/// count as class 0.
struct ImageResult {
  std::vector<Box> detections;
  std::vector<Box> gt;
};

struct PrCurve {
  std::vector<double> recall;
  std::vector<double> precision;
  double ap = 0.0;
};

/// Greedy matching in descending score order (ties in input order) to the
/// highest-IoU unmatched gt of the same class; all-point interpolation.
PrCurve pr_curve(std::span<const ImageResult> images, int class_id, double iou_thresh = 0.5);

/// Mean of per-class AP over classes that have gt; 0 when there is no gt.
double average_precision(std::span<const ImageResult> images, double iou_thresh = 0.5);

/// Fraction of gt boxes covered by some proposal at IoU >= iou_thresh.
double proposal_recall(std::span<const Box> proposals, std::span<const Box> gt, double iou_thresh = 0.5);
/// Pooled over images (covered gt / all gt).
double proposal_recall(std::span<const std::vector<Box>> proposals, std::span<const std::vector<Box>> gt,
                       double iou_thresh = 0.5);

enum class ErrorType { kCls, kLoc, kDupe, kBkg };

struct ErrorReport {
  double base_map = 0.0;
  double cls = 0.0, loc = 0.0, dupe = 0.0, bkg = 0.0, miss = 0.0;
  double false_pos = 0.0, false_neg = 0.0;
  std::size_t n_cls = 0, n_loc = 0, n_dupe = 0, n_bkg = 0, n_miss = 0;

  /// Aligned two-row table with all seven category columns.
  std::string table() const;
  /// key=value lines.
  std::string key_values() const;
};

struct StratifyConfig {
  double fg_thresh = 0.5;
  double bg_thresh = 0.1;
};

/// Error type of every false positive, indexed like images[i].detections
/// (entries for true positives are absent from the map).
struct FalsePositive {
  std::size_t image;
  std::size_t detection;
  ErrorType type;
};
std::vector<FalsePositive> classify_false_positives(std::span<const ImageResult> images,
                                                    const StratifyConfig& cfg = {});

ErrorReport stratify_errors(std::span<const ImageResult> images, const StratifyConfig& cfg = {});

/// Detections file lines: `image_id x1 y1 x2 y2 score [class_id]`.
void write_detections(std::ostream& os, const std::vector<std::string>& image_ids,
                      std::span<const std::vector<Box>> detections);
/// Detections keyed by position in image_ids; unknown ids throw.
std::vector<std::vector<Box>> read_detections(std::istream& is, const std::vector<std::string>& image_ids);

/// Static SVG of one or more labelled PR curves.
void write_pr_svg(const std::string& path, const std::vector<std::pair<std::string, PrCurve>>& curves);

}  // namespace selfdet
