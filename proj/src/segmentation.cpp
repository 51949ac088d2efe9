#include "selfdet/segmentation.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>

namespace selfdet {

void SegmentationParams::validate() const {
  if (!(scale > 0.0)) throw std::invalid_argument("segmentation scale must be > 0");
  if (!(sigma >= 0.0)) throw std::invalid_argument("segmentation sigma must be >= 0");
  if (min_size < 1) throw std::invalid_argument("segmentation min_size must be >= 1");
}

namespace {

class DisjointSet {
 public:
  explicit DisjointSet(std::size_t n) : parent_(n), size_(n, 1) {
    std::iota(parent_.begin(), parent_.end(), std::size_t{0});
  }

  std::size_t find(std::size_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }

  std::size_t join(std::size_t a, std::size_t b) {
    if (size_[a] < size_[b]) std::swap(a, b);
    parent_[b] = a;
    size_[a] += size_[b];
    return a;
  }

  std::size_t size(std::size_t root) const { return size_[root]; }

 private:
  std::vector<std::size_t> parent_;
  std::vector<std::size_t> size_;
};

struct Edge {
  std::size_t a;
  std::size_t b;
  double w;
};

}  // namespace

Segmentation felzenszwalb_segment(const Image& image, const SegmentationParams& params) {
  params.validate();
  if (image.height < 2 || image.width < 2) {
    throw std::invalid_argument("felzenszwalb_segment: image must be at least 2x2");
  }
  const Image smooth = gaussian_blur(image, params.sigma);
  const int h = image.height, w = image.width;
  const std::size_t n = static_cast<std::size_t>(h) * w;

  auto distance = [&](int y0, int x0, int y1, int x1) {
    double acc = 0.0;
    for (int c = 0; c < image.channels; ++c) {
      const double d = 255.0 * (smooth.at(c, y0, x0) - smooth.at(c, y1, x1));
      acc += d * d;
    }
    return std::sqrt(acc);
  };

  std::vector<Edge> edges;
  edges.reserve(2 * n);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * w + x;
      if (x + 1 < w) edges.push_back({p, p + 1, distance(y, x, y, x + 1)});
      if (y + 1 < h) edges.push_back({p, p + static_cast<std::size_t>(w), distance(y, x, y + 1, x)});
    }
  }
  std::stable_sort(edges.begin(), edges.end(),
                   [](const Edge& l, const Edge& r) { return l.w < r.w; });

  DisjointSet sets(n);
  std::vector<double> threshold(n, params.scale);
  for (const Edge& e : edges) {
    std::size_t ra = sets.find(e.a), rb = sets.find(e.b);
    if (ra == rb) continue;
    if (e.w <= threshold[ra] && e.w <= threshold[rb]) {
      const std::size_t root = sets.join(ra, rb);
      threshold[root] = e.w + params.scale / static_cast<double>(sets.size(root));
    }
  }
  const auto min_size = static_cast<std::size_t>(params.min_size);
  for (const Edge& e : edges) {
    std::size_t ra = sets.find(e.a), rb = sets.find(e.b);
    if (ra != rb && (sets.size(ra) < min_size || sets.size(rb) < min_size)) sets.join(ra, rb);
  }

  Segmentation seg;
  seg.height = h;
  seg.width = w;
  seg.labels.assign(n, -1);
  std::vector<int> root_label(n, -1);
  int next = 0;
  for (std::size_t p = 0; p < n; ++p) {
    const std::size_t r = sets.find(p);
    if (root_label[r] < 0) root_label[r] = next++;
    seg.labels[p] = root_label[r];
  }
  seg.regions = describe_regions(image, seg.labels, next);
  return seg;
}

std::vector<Region> describe_regions(const Image& image, const std::vector<int>& labels,
                                     int region_count) {
  const int h = image.height, w = image.width, ch = image.channels;
  struct Acc {
    std::size_t count = 0;
    int x0 = INT32_MAX, y0 = INT32_MAX, x1 = -1, y1 = -1;
    std::vector<double> sum, colour, texture;
  };
  std::vector<Acc> acc(static_cast<std::size_t>(region_count));
  for (auto& a : acc) {
    a.sum.assign(static_cast<std::size_t>(ch), 0.0);
    a.colour.assign(static_cast<std::size_t>(ch) * kColourBins, 0.0);
    a.texture.assign(static_cast<std::size_t>(ch) * kTextureBins, 0.0);
  }

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      Acc& a = acc[static_cast<std::size_t>(labels[static_cast<std::size_t>(y) * w + x])];
      ++a.count;
      a.x0 = std::min(a.x0, x);
      a.y0 = std::min(a.y0, y);
      a.x1 = std::max(a.x1, x);
      a.y1 = std::max(a.y1, y);
      for (int c = 0; c < ch; ++c) {
        const double v = std::clamp(image.at(c, y, x), 0.0, 1.0);
        a.sum[static_cast<std::size_t>(c)] += image.at(c, y, x);
        const int bin = std::min(static_cast<int>(v * kColourBins), kColourBins - 1);
        a.colour[static_cast<std::size_t>(c * kColourBins + bin)] += 1.0;

        const double gx = image.at(c, y, std::min(x + 1, w - 1)) - image.at(c, y, std::max(x - 1, 0));
        const double gy = image.at(c, std::min(y + 1, h - 1), x) - image.at(c, std::max(y - 1, 0), x);
        const double theta = std::atan2(gy, gx);  // [-pi, pi]
        int tbin = static_cast<int>(std::floor((theta + M_PI) / (2.0 * M_PI) * kTextureBins));
        tbin = std::clamp(tbin, 0, kTextureBins - 1);
        a.texture[static_cast<std::size_t>(c * kTextureBins + tbin)] += 1.0;
      }
    }
  }

  std::vector<Region> regions;
  regions.reserve(acc.size());
  for (auto& a : acc) {
    if (a.count == 0) throw std::logic_error("describe_regions: empty region label");
    Region r;
    r.pixel_count = a.count;
    r.box = Box(a.x0, a.y0, a.x1 + 1, a.y1 + 1);
    r.mean_colour = a.sum;
    for (double& v : r.mean_colour) v /= static_cast<double>(a.count);
    const double norm = static_cast<double>(a.count) * ch;
    for (double& v : a.colour) v /= norm;
    for (double& v : a.texture) v /= norm;
    r.colour_hist = std::move(a.colour);
    r.texture_hist = std::move(a.texture);
    regions.push_back(std::move(r));
  }
  return regions;
}

double region_similarity(const Region& a, const Region& b) {
  double colour = 0.0, texture = 0.0;
  for (std::size_t i = 0; i < a.colour_hist.size(); ++i)
    colour += std::min(a.colour_hist[i], b.colour_hist[i]);
  for (std::size_t i = 0; i < a.texture_hist.size(); ++i)
    texture += std::min(a.texture_hist[i], b.texture_hist[i]);
  return colour + texture;
}

Region merge_two(const Region& a, const Region& b) {
  Region r;
  r.pixel_count = a.pixel_count + b.pixel_count;
  r.box = Box(std::min(a.box.x1(), b.box.x1()), std::min(a.box.y1(), b.box.y1()),
              std::max(a.box.x2(), b.box.x2()), std::max(a.box.y2(), b.box.y2()));
  const double wa = static_cast<double>(a.pixel_count) / static_cast<double>(r.pixel_count);
  const double wb = static_cast<double>(b.pixel_count) / static_cast<double>(r.pixel_count);
  auto blend = [&](const std::vector<double>& x, const std::vector<double>& y) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = wa * x[i] + wb * y[i];
    return out;
  };
  r.mean_colour = blend(a.mean_colour, b.mean_colour);
  r.colour_hist = blend(a.colour_hist, b.colour_hist);
  r.texture_hist = blend(a.texture_hist, b.texture_hist);
  return r;
}

std::vector<Box> merge_hierarchy(const Segmentation& seg) {
  std::vector<Region> regions = seg.regions;
  std::vector<Box> boxes;
  boxes.reserve(regions.size() * 2);
  for (const Region& r : regions) boxes.push_back(r.box);
  if (regions.size() <= 1) return boxes;

  std::vector<std::set<int>> neighbours(regions.size());
  auto link = [&](int a, int b) {
    if (a == b) return;
    neighbours[static_cast<std::size_t>(a)].insert(b);
    neighbours[static_cast<std::size_t>(b)].insert(a);
  };
  for (int y = 0; y < seg.height; ++y) {
    for (int x = 0; x < seg.width; ++x) {
      const int l = seg.label(y, x);
      if (x + 1 < seg.width) link(l, seg.label(y, x + 1));
      if (y + 1 < seg.height) link(l, seg.label(y + 1, x));
    }
  }

  std::map<std::pair<int, int>, double> similarity;
  for (std::size_t a = 0; a < neighbours.size(); ++a) {
    for (int b : neighbours[a]) {
      if (static_cast<int>(a) < b) {
        similarity[{static_cast<int>(a), b}] =
            region_similarity(regions[a], regions[static_cast<std::size_t>(b)]);
      }
    }
  }

  while (!similarity.empty()) {
    // First maximum in key order: deterministic tie-break.
    auto best = similarity.begin();
    for (auto it = similarity.begin(); it != similarity.end(); ++it) {
      if (it->second > best->second) best = it;
    }
    const auto [a, b] = best->first;
    const int t = static_cast<int>(regions.size());
    regions.push_back(merge_two(regions[static_cast<std::size_t>(a)],
                                regions[static_cast<std::size_t>(b)]));
    boxes.push_back(regions.back().box);

    std::set<int> merged;
    for (int n : neighbours[static_cast<std::size_t>(a)]) merged.insert(n);
    for (int n : neighbours[static_cast<std::size_t>(b)]) merged.insert(n);
    merged.erase(a);
    merged.erase(b);
    for (int n : merged) {
      auto& nn = neighbours[static_cast<std::size_t>(n)];
      nn.erase(a);
      nn.erase(b);
      similarity.erase({std::min(n, a), std::max(n, a)});
      similarity.erase({std::min(n, b), std::max(n, b)});
    }
    similarity.erase({a, b});
    neighbours[static_cast<std::size_t>(a)].clear();
    neighbours[static_cast<std::size_t>(b)].clear();
    neighbours.emplace_back();
    for (int n : merged) {
      neighbours[static_cast<std::size_t>(n)].insert(t);
      neighbours.back().insert(n);
      similarity[{n, t}] =
          region_similarity(regions[static_cast<std::size_t>(n)], regions.back());
    }
  }
  return boxes;
}

std::vector<Box> merge_regions(const Segmentation& seg) {
  std::vector<Box> out;
  std::set<std::array<double, 4>> seen;
  for (const Box& b : merge_hierarchy(seg)) {
    if (seen.insert({b.x1(), b.y1(), b.x2(), b.y2()}).second) out.push_back(b);
  }
  return out;
}

std::vector<Box> propose(const Image& image, const SegmentationParams& params) {
  const Segmentation seg = felzenszwalb_segment(image, params);
  const std::vector<Box> boxes = merge_regions(seg);
  return filter_proposals(boxes, image.width, image.height);
}

}  // namespace selfdet
