#pragma once

#include <array>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace selfdet {

/// Axis-aligned box in corner form (pixel coordinates, x2 > x1, y2 > y1).
/// Width and height are derived; score and class id are optional roles used
/// by proposals, detections and annotations.
class Box {
 public:
  Box() = default;
  /// Throws std::invalid_argument unless x1 < x2 and y1 < y2.
  Box(double x1, double y1, double x2, double y2);

  static Box from_center(double cx, double cy, double w, double h);
  /// Returns nullopt instead of throwing for degenerate extents.
  static std::optional<Box> try_make(double x1, double y1, double x2, double y2);

  double x1() const { return x1_; }
  double y1() const { return y1_; }
  double x2() const { return x2_; }
  double y2() const { return y2_; }
  double width() const { return x2_ - x1_; }
  double height() const { return y2_ - y1_; }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x1_ + x2_); }
  double center_y() const { return 0.5 * (y1_ + y2_); }

  std::optional<double> score;
  std::optional<int> class_id;

  Box with_score(double s) const;
  Box with_class(int c) const;

  /// Same coordinates (scores and labels ignored).
  bool same_extent(const Box& other) const;
  friend bool operator==(const Box& a, const Box& b);

 private:
  double x1_ = 0.0, y1_ = 0.0, x2_ = 1.0, y2_ = 1.0;
};

using Deltas = std::array<double, 4>;

double iou(const Box& a, const Box& b);

Deltas encode_deltas(const Box& anchor, const Box& target);

struct ClipExtent {
  double width;
  double height;
};

/// Inverse of encode_deltas. With a clip extent the result is clipped to
/// [0,W]x[0,H]; a box narrower or shorter than one pixel after clipping is
/// rejected (nullopt).
std::optional<Box> decode_deltas(const Box& anchor, const Deltas& t,
                                 std::optional<ClipExtent> clip = std::nullopt);

/// Greedy suppression in descending score order. Ties keep input order.
/// Boxes without a score are treated as score 0.
std::vector<Box> nms(std::span<const Box> boxes, double iou_threshold);
/// Same selection, returned as input indices in output order.
std::vector<std::size_t> nms_indices(std::span<const Box> boxes, double iou_threshold);

struct ProposalFilter {
  double min_aspect = 1.0 / 3.0;
  double max_aspect = 3.0;
  double min_relative_size = 0.3;
  double max_relative_size = 0.8;

  bool accepts(const Box& b, double image_w, double image_h) const;
};

std::vector<Box> filter_proposals(std::span<const Box> boxes, double image_w, double image_h,
                                  const ProposalFilter& filter = {});

inline constexpr int kMinFpnLevel = 2;
inline constexpr int kMaxFpnLevel = 5;

/// Scale-aware level: clamp(floor(4 + log2(sqrt(wh)/224)), lo, hi).
int assign_fpn_level(const Box& b, int lo = kMinFpnLevel, int hi = kMaxFpnLevel);

inline constexpr std::array<int, 4> kAnchorStrides = {4, 8, 16, 32};
inline constexpr std::array<double, 4> kAnchorSizes = {24.0, 48.0, 96.0, 192.0};
inline constexpr std::array<double, 3> kAnchorRatios = {0.5, 1.0, 2.0};

/// Anchor of area size^2 and height/width ratio r, centred at (cx, cy).
Box make_anchor(double cx, double cy, double size, double ratio);

/// Per-level anchors over an image. Within a level the order is
/// (ratio, y, x), matching the channel-major layout of the RPN head outputs.
struct AnchorSet {
  struct Level {
    int level;  // FPN level (2..5)
    int stride;
    int grid_h;
    int grid_w;
    double size;
    std::vector<Box> anchors;
  };
  std::vector<Level> levels;

  std::size_t size() const;
  /// Number of anchor centres (positions) summed over levels.
  std::size_t positions() const;
  /// All anchors concatenated in level order.
  std::vector<Box> flatten() const;
};

/// Anchors for an image_h x image_w input over the first num_levels levels (p2 upward).
AnchorSet make_anchor_set(int image_h, int image_w, int num_levels = 4);

/// `x1 y1 x2 y2 [score] [class_id]`
std::string format_box(const Box& b);
/// Parses one box line. Throws std::invalid_argument on malformed input.
Box parse_box(const std::string& line);

void write_boxes(std::ostream& os, std::span<const Box> boxes);
std::vector<Box> read_boxes(std::istream& is);
void save_boxes(const std::string& path, std::span<const Box> boxes);
std::vector<Box> load_boxes(const std::string& path);

}  // namespace selfdet
