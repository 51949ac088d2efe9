#include "selfdet/views.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "selfdet/random.hpp"

namespace selfdet {

PhotometricPlan plan_photometric(std::uint64_t seed, const PhotometricConfig& cfg) {
  Rng rng(seed);
  PhotometricPlan plan;
  // Every branch consumes two draws whether or not it is taken.
  auto branch = [&](double lo, double hi) -> std::optional<double> {
    const bool take = rng.bernoulli(cfg.apply_probability);
    const double value = rng.uniform(lo, hi);
    return take ? std::optional<double>(value) : std::nullopt;
  };
  plan.brightness = branch(cfg.brightness_lo, cfg.brightness_hi);
  plan.contrast = branch(cfg.contrast_lo, cfg.contrast_hi);
  plan.saturation = branch(cfg.saturation_lo, cfg.saturation_hi);
  plan.blur_sigma = branch(cfg.blur_sigma_lo, cfg.blur_sigma_hi);
  return plan;
}

namespace {

double luma(const Image& img, int y, int x) {
  if (img.channels != 3) return img.at(0, y, x);
  return 0.299 * img.at(0, y, x) + 0.587 * img.at(1, y, x) + 0.114 * img.at(2, y, x);
}

void clamp_unit(Image& img) {
  for (double& v : img.data) v = std::clamp(v, 0.0, 1.0);
}

}  // namespace

Image apply_photometric(const Image& img, const PhotometricPlan& plan) {
  if (plan.is_identity()) return img;
  Image out = img;
  if (plan.brightness) {
    for (double& v : out.data) v *= *plan.brightness;
    clamp_unit(out);
  }
  if (plan.contrast) {
    double mean = 0.0;
    for (int y = 0; y < out.height; ++y)
      for (int x = 0; x < out.width; ++x) mean += luma(out, y, x);
    mean /= static_cast<double>(out.plane());
    for (double& v : out.data) v = (v - mean) * *plan.contrast + mean;
    clamp_unit(out);
  }
  if (plan.saturation && out.channels == 3) {
    for (int y = 0; y < out.height; ++y)
      for (int x = 0; x < out.width; ++x) {
        const double g = luma(out, y, x);
        for (int c = 0; c < 3; ++c) out.at(c, y, x) = (out.at(c, y, x) - g) * *plan.saturation + g;
      }
    clamp_unit(out);
  }
  if (plan.blur_sigma) {
    out = gaussian_blur(out, *plan.blur_sigma);
    clamp_unit(out);
  }
  return out;
}

Image photometric(const Image& img, std::uint64_t seed, const PhotometricConfig& cfg) {
  return apply_photometric(img, plan_photometric(seed, cfg));
}

std::size_t ViewTriple::valid_count() const {
  return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), true));
}

Box to_view1(const Box& b, int image_w, int image_h, int size) {
  const double sx = static_cast<double>(size) / image_w;
  const double sy = static_cast<double>(size) / image_h;
  const double x1 = std::clamp(b.x1() * sx, 0.0, static_cast<double>(size));
  const double y1 = std::clamp(b.y1() * sy, 0.0, static_cast<double>(size));
  const double x2 = std::clamp(b.x2() * sx, 0.0, static_cast<double>(size));
  const double y2 = std::clamp(b.y2() * sy, 0.0, static_cast<double>(size));
  Box out(x1, y1, x2, y2);
  out.score = b.score;
  out.class_id = b.class_id;
  return out;
}

Box crop_transform(const Box& b, const CropRect& crop, int size) {
  const double side = crop.side();
  Box out((b.x1() - crop.x1) * size / side, (b.y1() - crop.y1) * size / side,
          (b.x2() - crop.x1) * size / side, (b.y2() - crop.y1) * size / side);
  out.score = b.score;
  out.class_id = b.class_id;
  return out;
}

Box halve(const Box& b) {
  Box out(b.x1() / 2, b.y1() / 2, b.x2() / 2, b.y2() / 2);
  out.score = b.score;
  out.class_id = b.class_id;
  return out;
}

CropRect draw_crop(std::uint64_t seed, const ViewConfig& cfg) {
  Rng rng(seed);
  const double area = rng.uniform(cfg.min_area_fraction, cfg.max_area_fraction);
  const double side = cfg.size * std::sqrt(area);
  const double x = rng.uniform(0.0, cfg.size - side);
  const double y = rng.uniform(0.0, cfg.size - side);
  return {x, y, x + side, y + side};
}

ViewTriple make_views_with_crop(const Image& image, const std::vector<Box>& proposals,
                                const CropRect& crop, std::uint64_t seed,
                                const ViewConfig& cfg) {
  if (cfg.size % 2 != 0) throw std::invalid_argument("make_views: view size must be even");
  if (!(crop.x2 > crop.x1) || !(crop.y2 > crop.y1)) {
    throw std::invalid_argument("make_views: empty crop");
  }
  Rng rng(seed);
  rng.derive_seed();  // crop stream, consumed by make_views
  const std::uint64_t seeds[3] = {rng.derive_seed(), rng.derive_seed(), rng.derive_seed()};

  ViewTriple t;
  t.seed = seed;
  t.crop = crop;
  const int half = cfg.size / 2;
  Image v1 = resize_bilinear(image, cfg.size, cfg.size);
  Image v2 = resample_bilinear(v1, crop.x1, crop.y1, crop.side(), crop.y2 - crop.y1, cfg.size,
                               cfg.size);
  Image v3 = resample_bilinear(v2, 0.0, 0.0, cfg.size, cfg.size, half, half);
  if (cfg.apply_photometric) {
    t.v1 = photometric(v1, seeds[0], cfg.photometric);
    t.v2 = photometric(v2, seeds[1], cfg.photometric);
    t.v3 = photometric(v3, seeds[2], cfg.photometric);
  } else {
    t.v1 = std::move(v1);
    t.v2 = std::move(v2);
    t.v3 = std::move(v3);
  }

  for (const Box& p : proposals) {
    const Box b1 = to_view1(p, image.width, image.height, cfg.size);
    const auto clipped = Box::try_make(std::max(b1.x1(), crop.x1), std::max(b1.y1(), crop.y1),
                                       std::min(b1.x2(), crop.x2), std::min(b1.y2(), crop.y2));
    bool ok = clipped && clipped->area() >= cfg.min_visible_fraction * b1.area();
    Box b2 = crop_transform(ok ? *clipped : b1, crop, cfg.size);
    b2.score = b1.score;
    b2.class_id = b1.class_id;
    t.boxes_v1.push_back(b1);
    t.boxes_v2.push_back(b2);
    t.boxes_v3.push_back(halve(b2));
    t.valid.push_back(ok);
  }
  return t;
}

ViewTriple make_views(const Image& image, const std::vector<Box>& proposals, std::uint64_t seed,
                      const ViewConfig& cfg) {
  Rng rng(seed);
  const CropRect crop = draw_crop(rng.derive_seed(), cfg);
  return make_views_with_crop(image, proposals, crop, seed, cfg);
}

}  // namespace selfdet
