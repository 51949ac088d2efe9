#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "selfdet/geometry.hpp"
#include "selfdet/image.hpp"

namespace selfdet {

struct PhotometricConfig {
  double apply_probability = 0.5;
  double brightness_lo = 0.6, brightness_hi = 1.4;
  double contrast_lo = 0.6, contrast_hi = 1.4;
  double saturation_lo = 0.6, saturation_hi = 1.4;
  double blur_sigma_lo = 0.1, blur_sigma_hi = 2.0;
};

/// The random choices photometric() makes for one seed. Factors are absent
/// when their branch is not taken.
struct PhotometricPlan {
  std::optional<double> brightness;
  std::optional<double> contrast;
  std::optional<double> saturation;
  std::optional<double> blur_sigma;

  bool is_identity() const { return !brightness && !contrast && !saturation && !blur_sigma; }
};

PhotometricPlan plan_photometric(std::uint64_t seed, const PhotometricConfig& cfg = {});
Image apply_photometric(const Image& img, const PhotometricPlan& plan);
/// Colour jitter then blur, each branch taken with cfg.apply_probability;
/// output clamped to [0, 1].
Image photometric(const Image& img, std::uint64_t seed, const PhotometricConfig& cfg = {});

struct ViewConfig {
  int size = 224;               // V1 and V2 side
  double min_area_fraction = 0.5;
  double max_area_fraction = 1.0;
  /// Fraction of a box's V1 area that must remain inside the V2 crop.
  double min_visible_fraction = 0.5;
  PhotometricConfig photometric;
  bool apply_photometric = true;
};

/// Square crop of V1 in V1 pixel coordinates.
struct CropRect {
  double x1, y1, x2, y2;
  double side() const { return x2 - x1; }
};

struct ViewTriple {
  Image v1;  // size x size
  Image v2;  // size x size
  Image v3;  // size/2 x size/2
  std::vector<Box> boxes_v1;
  std::vector<Box> boxes_v2;
  std::vector<Box> boxes_v3;
  /// valid[i] is false when proposal i does not survive the V2 crop; its V2
  /// and V3 entries then hold the unclipped transform and must not be used.
  std::vector<bool> valid;
  CropRect crop{};
  std::uint64_t seed = 0;

  std::size_t valid_count() const;
};

/// Box in image coordinates -> V1 coordinates.
Box to_view1(const Box& b, int image_w, int image_h, int size);
/// V1 -> V2 coordinates for the given crop (no clipping).
Box crop_transform(const Box& b, const CropRect& crop, int size);
/// V2 -> V3 (halving).
Box halve(const Box& b);

/// Draws a crop (area fraction uniform in [min, max], square, uniform
/// position) from the seed.
CropRect draw_crop(std::uint64_t seed, const ViewConfig& cfg = {});

ViewTriple make_views(const Image& image, const std::vector<Box>& proposals, std::uint64_t seed,
                      const ViewConfig& cfg = {});
/// make_views with an explicit crop of V1; photometric seeds still derive from `seed`.
ViewTriple make_views_with_crop(const Image& image, const std::vector<Box>& proposals,
                                const CropRect& crop, std::uint64_t seed,
                                const ViewConfig& cfg = {});

}  // namespace selfdet
