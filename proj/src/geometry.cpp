#include "selfdet/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace selfdet {

Box::Box(double x1, double y1, double x2, double y2) : x1_(x1), y1_(y1), x2_(x2), y2_(y2) {
  if (!(x1 < x2) || !(y1 < y2) || !std::isfinite(x1) || !std::isfinite(y1) ||
      !std::isfinite(x2) || !std::isfinite(y2)) {
    std::ostringstream msg;
    msg << "invalid box [" << x1 << ", " << y1 << ", " << x2 << ", " << y2 << "]";
    throw std::invalid_argument(msg.str());
  }
}

Box Box::from_center(double cx, double cy, double w, double h) {
  return Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h);
}

std::optional<Box> Box::try_make(double x1, double y1, double x2, double y2) {
  if (!(x1 < x2) || !(y1 < y2) || !std::isfinite(x1) || !std::isfinite(y1) ||
      !std::isfinite(x2) || !std::isfinite(y2)) {
    return std::nullopt;
  }
  return Box(x1, y1, x2, y2);
}

Box Box::with_score(double s) const {
  Box b = *this;
  b.score = s;
  return b;
}

Box Box::with_class(int c) const {
  Box b = *this;
  b.class_id = c;
  return b;
}

bool Box::same_extent(const Box& other) const {
  return x1_ == other.x1_ && y1_ == other.y1_ && x2_ == other.x2_ && y2_ == other.y2_;
}

bool operator==(const Box& a, const Box& b) {
  return a.same_extent(b) && a.score == b.score && a.class_id == b.class_id;
}

double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1());
  const double ih = std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1());
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

Deltas encode_deltas(const Box& anchor, const Box& target) {
  const double wa = anchor.width(), ha = anchor.height();
  return {(target.center_x() - anchor.center_x()) / wa,
          (target.center_y() - anchor.center_y()) / ha, std::log(target.width() / wa),
          std::log(target.height() / ha)};
}

std::optional<Box> decode_deltas(const Box& anchor, const Deltas& t,
                                 std::optional<ClipExtent> clip) {
  for (double v : t) {
    if (!std::isfinite(v)) return std::nullopt;
  }
  const double wa = anchor.width(), ha = anchor.height();
  const double cx = anchor.center_x() + t[0] * wa;
  const double cy = anchor.center_y() + t[1] * ha;
  const double w = wa * std::exp(t[2]);
  const double h = ha * std::exp(t[3]);
  double x1 = cx - 0.5 * w, y1 = cy - 0.5 * h, x2 = cx + 0.5 * w, y2 = cy + 0.5 * h;
  if (!clip) return Box::try_make(x1, y1, x2, y2);

  x1 = std::clamp(x1, 0.0, clip->width);
  x2 = std::clamp(x2, 0.0, clip->width);
  y1 = std::clamp(y1, 0.0, clip->height);
  y2 = std::clamp(y2, 0.0, clip->height);
  if (x2 - x1 < 1.0 || y2 - y1 < 1.0) return std::nullopt;
  return Box(x1, y1, x2, y2);
}

std::vector<std::size_t> nms_indices(std::span<const Box> boxes, double iou_threshold) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return boxes[a].score.value_or(0.0) > boxes[b].score.value_or(0.0);
  });

  std::vector<std::size_t> keep;
  std::vector<bool> suppressed(boxes.size(), false);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::size_t cur = order[i];
    if (suppressed[cur]) continue;
    keep.push_back(cur);
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      const std::size_t other = order[j];
      if (!suppressed[other] && iou(boxes[cur], boxes[other]) > iou_threshold) {
        suppressed[other] = true;
      }
    }
  }
  return keep;
}

std::vector<Box> nms(std::span<const Box> boxes, double iou_threshold) {
  std::vector<Box> out;
  for (std::size_t idx : nms_indices(boxes, iou_threshold)) out.push_back(boxes[idx]);
  return out;
}

bool ProposalFilter::accepts(const Box& b, double image_w, double image_h) const {
  const double aspect = b.width() / b.height();
  const double rel = std::sqrt(b.area()) / std::sqrt(image_w * image_h);
  return aspect >= min_aspect && aspect <= max_aspect && rel >= min_relative_size &&
         rel <= max_relative_size;
}

std::vector<Box> filter_proposals(std::span<const Box> boxes, double image_w, double image_h,
                                  const ProposalFilter& filter) {
  if (!(image_w > 0.0) || !(image_h > 0.0)) {
    throw std::invalid_argument("filter_proposals: image extents must be positive");
  }
  std::vector<Box> out;
  std::copy_if(boxes.begin(), boxes.end(), std::back_inserter(out),
               [&](const Box& b) { return filter.accepts(b, image_w, image_h); });
  return out;
}

int assign_fpn_level(const Box& b, int lo, int hi) {
  const double scale = std::sqrt(b.area());
  const int level = static_cast<int>(std::floor(4.0 + std::log2(scale / 224.0)));
  return std::clamp(level, lo, hi);
}

Box make_anchor(double cx, double cy, double size, double ratio) {
  const double w = size / std::sqrt(ratio);
  const double h = size * std::sqrt(ratio);
  return Box::from_center(cx, cy, w, h);
}

std::size_t AnchorSet::size() const {
  std::size_t n = 0;
  for (const auto& l : levels) n += l.anchors.size();
  return n;
}

std::size_t AnchorSet::positions() const {
  std::size_t n = 0;
  for (const auto& l : levels) n += static_cast<std::size_t>(l.grid_h) * l.grid_w;
  return n;
}

std::vector<Box> AnchorSet::flatten() const {
  std::vector<Box> out;
  out.reserve(size());
  for (const auto& l : levels) out.insert(out.end(), l.anchors.begin(), l.anchors.end());
  return out;
}

AnchorSet make_anchor_set(int image_h, int image_w, int num_levels) {
  if (num_levels < 1 || num_levels > static_cast<int>(kAnchorStrides.size())) {
    throw std::invalid_argument("make_anchor_set: num_levels must be in [1, 4]");
  }
  AnchorSet set;
  for (int i = 0; i < num_levels; ++i) {
    const int stride = kAnchorStrides[i];
    if (image_h % stride != 0 || image_w % stride != 0) {
      throw std::invalid_argument("make_anchor_set: image extent " + std::to_string(image_h) +
                                  "x" + std::to_string(image_w) +
                                  " not divisible by stride " + std::to_string(stride));
    }
    AnchorSet::Level level{i + kMinFpnLevel, stride, image_h / stride, image_w / stride,
                           kAnchorSizes[i], {}};
    level.anchors.reserve(static_cast<std::size_t>(level.grid_h) * level.grid_w *
                          kAnchorRatios.size());
    for (double ratio : kAnchorRatios) {
      for (int y = 0; y < level.grid_h; ++y) {
        for (int x = 0; x < level.grid_w; ++x) {
          level.anchors.push_back(
              make_anchor((x + 0.5) * stride, (y + 0.5) * stride, level.size, ratio));
        }
      }
    }
    set.levels.push_back(std::move(level));
  }
  return set;
}

namespace {

std::string format_real(double v, bool force_point) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  std::string s(buf);
  if (force_point && s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

bool looks_integral(const std::string& tok) {
  if (tok.empty()) return false;
  std::size_t i = (tok[0] == '-' || tok[0] == '+') ? 1 : 0;
  if (i == tok.size()) return false;
  return std::all_of(tok.begin() + static_cast<std::ptrdiff_t>(i), tok.end(),
                     [](char c) { return c >= '0' && c <= '9'; });
}

double parse_real(const std::string& tok, const std::string& line) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(tok, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != tok.size()) throw std::invalid_argument("malformed box line: '" + line + "'");
  return v;
}

}  // namespace

// Scores always carry a decimal point so a 5-token line is unambiguous:
// an integral fifth token is a class id, anything else a score.
std::string format_box(const Box& b) {
  std::string s = format_real(b.x1(), false) + " " + format_real(b.y1(), false) + " " +
                  format_real(b.x2(), false) + " " + format_real(b.y2(), false);
  if (b.score) s += " " + format_real(*b.score, true);
  if (b.class_id) s += " " + std::to_string(*b.class_id);
  return s;
}

Box parse_box(const std::string& line) {
  std::istringstream is(line);
  std::vector<std::string> toks;
  for (std::string t; is >> t;) toks.push_back(t);
  if (toks.size() < 4 || toks.size() > 6) {
    throw std::invalid_argument("malformed box line: '" + line + "'");
  }
  Box b(parse_real(toks[0], line), parse_real(toks[1], line), parse_real(toks[2], line),
        parse_real(toks[3], line));
  if (toks.size() == 5) {
    if (looks_integral(toks[4])) {
      b.class_id = std::stoi(toks[4]);
    } else {
      b.score = parse_real(toks[4], line);
    }
  } else if (toks.size() == 6) {
    if (!looks_integral(toks[5])) throw std::invalid_argument("malformed class id: '" + line + "'");
    b.score = parse_real(toks[4], line);
    b.class_id = std::stoi(toks[5]);
  }
  return b;
}

void write_boxes(std::ostream& os, std::span<const Box> boxes) {
  for (const Box& b : boxes) os << format_box(b) << '\n';
}

std::vector<Box> read_boxes(std::istream& is) {
  std::vector<Box> out;
  for (std::string line; std::getline(is, line);) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(parse_box(line));
  }
  return out;
}

void save_boxes(const std::string& path, std::span<const Box> boxes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path);
  write_boxes(os, boxes);
}

std::vector<Box> load_boxes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path);
  return read_boxes(is);
}

}  // namespace selfdet
