#pragma once

#include <vector>

#include "selfdet/geometry.hpp"
#include "selfdet/image.hpp"

namespace selfdet {

struct SegmentationParams {
  /// Merge-predicate constant k; edge weights are colour distances on the
  /// 0..255 intensity scale.
  double scale = 500.0;
  /// Gaussian pre-smoothing standard deviation.
  double sigma = 0.9;
  /// Minimum segment size in pixels.
  int min_size = 10;

  void validate() const;
};

inline constexpr int kColourBins = 25;
inline constexpr int kTextureBins = 8;

struct Region {
  std::size_t pixel_count = 0;
  Box box;
  std::vector<double> mean_colour;     // per channel
  std::vector<double> colour_hist;     // channels * kColourBins, sums to 1
  std::vector<double> texture_hist;    // channels * kTextureBins, sums to 1
};

struct Segmentation {
  int height = 0;
  int width = 0;
  std::vector<int> labels;  // row-major, contiguous 0..R-1
  std::vector<Region> regions;

  int label(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }
};

/// Graph-based segmentation on a 4-connected grid with Euclidean colour edge
/// weights, followed by a pass that merges segments smaller than min_size
/// into their cheapest neighbour. Region statistics use the unsmoothed image.
Segmentation felzenszwalb_segment(const Image& image, const SegmentationParams& params);

/// Fills the region table of an already-labelled image.
std::vector<Region> describe_regions(const Image& image, const std::vector<int>& labels,
                                     int region_count);

/// Colour + texture histogram intersection, in [0, 2].
double region_similarity(const Region& a, const Region& b);
/// Size-weighted union of two regions' statistics.
Region merge_two(const Region& a, const Region& b);

/// Bounding boxes of every region created by greedy most-similar-neighbour
/// merging until one region remains: 2R-1 boxes, creation order, with duplicates.
std::vector<Box> merge_hierarchy(const Segmentation& seg);
/// merge_hierarchy with exact-duplicate boxes removed (first occurrence kept).
std::vector<Box> merge_regions(const Segmentation& seg);

/// Segment, merge and filter: the pseudo ground-truth boxes for one image.
std::vector<Box> propose(const Image& image, const SegmentationParams& params = {});

}  // namespace selfdet
