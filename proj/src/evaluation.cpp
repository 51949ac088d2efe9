#include "selfdet/evaluation.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace selfdet {

namespace {

int class_of(const Box& b) { return b.class_id.value_or(0); }
double score_of(const Box& b) { return b.score.value_or(0.0); }

std::vector<std::size_t> score_order(const std::vector<Box>& dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return score_of(dets[a]) > score_of(dets[b]); });
  return order;
}

constexpr long kUnmatched = -1;

// matched[d] = gt index or kUnmatched, per detection of one image.
std::vector<long> match_image(const ImageResult& img, double iou_thresh) {
  std::vector<long> matched(img.detections.size(), kUnmatched);
  std::vector<bool> taken(img.gt.size(), false);
  for (std::size_t d : score_order(img.detections)) {
    const Box& det = img.detections[d];
    long best = kUnmatched;
    double best_iou = iou_thresh;
    for (std::size_t g = 0; g < img.gt.size(); ++g) {
      if (taken[g] || class_of(img.gt[g]) != class_of(det)) continue;
      const double v = iou(det, img.gt[g]);
      if (v >= best_iou && (best == kUnmatched || v > best_iou)) {
        best = static_cast<long>(g);
        best_iou = v;
      }
    }
    if (best != kUnmatched) {
      matched[d] = best;
      taken[static_cast<std::size_t>(best)] = true;
    }
  }
  return matched;
}

std::set<int> gt_classes(std::span<const ImageResult> images) {
  std::set<int> classes;
  for (const ImageResult& img : images)
    for (const Box& g : img.gt) classes.insert(class_of(g));
  return classes;
}

}  // namespace

PrCurve pr_curve(std::span<const ImageResult> images, int class_id, double iou_thresh) {
  struct Entry {
    double score;
    bool tp;
  };
  std::vector<Entry> entries;
  std::size_t n_gt = 0;
  for (const ImageResult& img : images) {
    const std::vector<long> matched = match_image(img, iou_thresh);
    for (std::size_t d : score_order(img.detections)) {
      if (class_of(img.detections[d]) == class_id) entries.push_back({score_of(img.detections[d]), matched[d] != kUnmatched});
    }
    for (const Box& g : img.gt) n_gt += class_of(g) == class_id ? 1 : 0;
  }
  std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.score > b.score; });

  PrCurve curve;
  if (n_gt == 0) return curve;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    tp += entries[i].tp ? 1 : 0;
    curve.recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
    curve.precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
  }
  std::vector<double> envelope = curve.precision;
  for (std::size_t i = envelope.size(); i-- > 1;) envelope[i - 1] = std::max(envelope[i - 1], envelope[i]);
  double previous = 0.0;
  for (std::size_t i = 0; i < envelope.size(); ++i) {
    curve.ap += (curve.recall[i] - previous) * envelope[i];
    previous = curve.recall[i];
  }
  return curve;
}

double average_precision(std::span<const ImageResult> images, double iou_thresh) {
  const std::set<int> classes = gt_classes(images);
  if (classes.empty()) return 0.0;
  double total = 0.0;
  for (int c : classes) total += pr_curve(images, c, iou_thresh).ap;
  return total / static_cast<double>(classes.size());
}

double proposal_recall(std::span<const Box> proposals, std::span<const Box> gt, double iou_thresh) {
  if (gt.empty()) throw std::invalid_argument("proposal_recall: gt must be nonempty");
  std::size_t covered = 0;
  for (const Box& g : gt) {
    covered += std::any_of(proposals.begin(), proposals.end(), [&](const Box& p) { return iou(p, g) >= iou_thresh; }) ? 1 : 0;
  }
  return static_cast<double>(covered) / static_cast<double>(gt.size());
}

double proposal_recall(std::span<const std::vector<Box>> proposals, std::span<const std::vector<Box>> gt,
                       double iou_thresh) {
  if (proposals.size() != gt.size()) throw std::invalid_argument("proposal_recall: image counts differ");
  double covered = 0.0;
  std::size_t total = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i].empty()) continue;
    covered += proposal_recall(proposals[i], gt[i], iou_thresh) * static_cast<double>(gt[i].size());
    total += gt[i].size();
  }
  if (total == 0) throw std::invalid_argument("proposal_recall: gt must be nonempty");
  return covered / static_cast<double>(total);
}

namespace {

struct Classified {
  FalsePositive fp;
  long target_gt;      // highest-IoU gt, or kUnmatched
  bool remove_on_fix;  // the fix deletes the detection instead of correcting it
};

struct Analysis {
  std::vector<std::vector<long>> matched;
  std::vector<Classified> errors;
};

Analysis analyse(std::span<const ImageResult> images, const StratifyConfig& cfg) {
  Analysis a;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const ImageResult& img = images[i];
    a.matched.push_back(match_image(img, cfg.fg_thresh));
    std::vector<bool> gt_used(img.gt.size(), false);
    for (long m : a.matched.back())
      if (m != kUnmatched) gt_used[static_cast<std::size_t>(m)] = true;

    for (std::size_t d = 0; d < img.detections.size(); ++d) {
      if (a.matched.back()[d] != kUnmatched) continue;
      const Box& det = img.detections[d];
      long best = kUnmatched;
      double best_iou = 0.0;
      for (std::size_t g = 0; g < img.gt.size(); ++g) {
        const double v = iou(det, img.gt[g]);
        if (v > best_iou) {
          best_iou = v;
          best = static_cast<long>(g);
        }
      }
      Classified c{{i, d, ErrorType::kBkg}, best, true};
      if (best != kUnmatched && best_iou >= cfg.bg_thresh) {
        const Box& g = img.gt[static_cast<std::size_t>(best)];
        const bool same_class = class_of(g) == class_of(det);
        const bool taken = gt_used[static_cast<std::size_t>(best)];
        if (best_iou >= cfg.fg_thresh) {
          c.fp.type = same_class ? ErrorType::kDupe : ErrorType::kCls;
          c.remove_on_fix = same_class || taken;
        } else if (same_class) {
          c.fp.type = ErrorType::kLoc;
          c.remove_on_fix = taken;
        } else {
          // Wrong class and poorly localised: counted as Cls, fixed by removal.
          c.fp.type = ErrorType::kCls;
          c.remove_on_fix = true;
        }
      }
      a.errors.push_back(c);
    }
  }
  return a;
}

std::vector<ImageResult> fix_type(std::span<const ImageResult> images, const Analysis& a, ErrorType type) {
  std::vector<ImageResult> fixed(images.begin(), images.end());
  std::vector<std::set<std::size_t>> removed(images.size());
  for (const Classified& c : a.errors) {
    if (c.fp.type != type) continue;
    const ImageResult& img = images[c.fp.image];
    if (c.remove_on_fix) {
      removed[c.fp.image].insert(c.fp.detection);
      continue;
    }
    const Box& g = img.gt[static_cast<std::size_t>(c.target_gt)];
    Box& det = fixed[c.fp.image].detections[c.fp.detection];
    if (type == ErrorType::kLoc) {
      Box moved(g.x1(), g.y1(), g.x2(), g.y2());
      moved.score = det.score;
      moved.class_id = det.class_id;
      det = moved;
    } else {
      det.class_id = class_of(g);
    }
  }
  for (std::size_t i = 0; i < fixed.size(); ++i) {
    if (removed[i].empty()) continue;
    std::vector<Box> kept;
    for (std::size_t d = 0; d < images[i].detections.size(); ++d)
      if (!removed[i].count(d)) kept.push_back(fixed[i].detections[d]);
    fixed[i].detections = std::move(kept);
  }
  return fixed;
}

}  // namespace

std::vector<FalsePositive> classify_false_positives(std::span<const ImageResult> images, const StratifyConfig& cfg) {
  std::vector<FalsePositive> out;
  for (const Classified& c : analyse(images, cfg).errors) out.push_back(c.fp);
  return out;
}

ErrorReport stratify_errors(std::span<const ImageResult> images, const StratifyConfig& cfg) {
  const Analysis a = analyse(images, cfg);
  ErrorReport r;
  r.base_map = average_precision(images, cfg.fg_thresh);
  auto delta = [&](const std::vector<ImageResult>& fixed) {
    return average_precision(fixed, cfg.fg_thresh) - r.base_map;
  };

  for (const Classified& c : a.errors) {
    switch (c.fp.type) {
      case ErrorType::kCls: ++r.n_cls; break;
      case ErrorType::kLoc: ++r.n_loc; break;
      case ErrorType::kDupe: ++r.n_dupe; break;
      case ErrorType::kBkg: ++r.n_bkg; break;
    }
  }
  r.cls = delta(fix_type(images, a, ErrorType::kCls));
  r.loc = delta(fix_type(images, a, ErrorType::kLoc));
  r.dupe = delta(fix_type(images, a, ErrorType::kDupe));
  r.bkg = delta(fix_type(images, a, ErrorType::kBkg));

  // Missed gt: unmatched and not the target of a Cls or Loc error.
  std::vector<std::set<std::size_t>> explained(images.size());
  for (const Classified& c : a.errors) {
    if ((c.fp.type == ErrorType::kCls || c.fp.type == ErrorType::kLoc) && c.target_gt != kUnmatched) {
      explained[c.fp.image].insert(static_cast<std::size_t>(c.target_gt));
    }
  }
  std::vector<ImageResult> without_missed(images.begin(), images.end());
  std::vector<ImageResult> with_found(images.begin(), images.end());
  double top = 0.0;
  for (const ImageResult& img : images)
    for (const Box& d : img.detections) top = std::max(top, score_of(d));
  for (std::size_t i = 0; i < images.size(); ++i) {
    std::vector<bool> used(images[i].gt.size(), false);
    for (long m : a.matched[i])
      if (m != kUnmatched) used[static_cast<std::size_t>(m)] = true;
    std::vector<Box> kept;
    for (std::size_t g = 0; g < images[i].gt.size(); ++g) {
      const Box& gt = images[i].gt[g];
      if (!used[g]) with_found[i].detections.push_back(gt.with_score(top + 1.0));
      if (!used[g] && !explained[i].count(g)) {
        ++r.n_miss;
      } else {
        kept.push_back(gt);
      }
    }
    without_missed[i].gt = std::move(kept);
  }
  r.miss = delta(without_missed);
  r.false_neg = delta(with_found);

  std::vector<ImageResult> no_fp(images.begin(), images.end());
  for (std::size_t i = 0; i < images.size(); ++i) {
    std::vector<Box> kept;
    for (std::size_t d = 0; d < images[i].detections.size(); ++d)
      if (a.matched[i][d] != kUnmatched) kept.push_back(images[i].detections[d]);
    no_fp[i].detections = std::move(kept);
  }
  r.false_pos = delta(no_fp);
  return r;
}

std::string ErrorReport::table() const {
  const char* names[] = {"mAP", "Cls", "Loc", "Dupe", "Bkg", "Miss", "FalsePos", "FalseNeg"};
  const double values[] = {base_map, cls, loc, dupe, bkg, miss, false_pos, false_neg};
  std::ostringstream os;
  char buf[32];
  for (const char* n : names) {
    std::snprintf(buf, sizeof(buf), "%10s", n);
    os << buf;
  }
  os << '\n';
  for (double v : values) {
    std::snprintf(buf, sizeof(buf), "%10.4f", 100.0 * v);
    os << buf;
  }
  os << '\n';
  return os.str();
}

std::string ErrorReport::key_values() const {
  std::ostringstream os;
  char buf[64];
  auto line = [&](const char* key, double v) {
    std::snprintf(buf, sizeof(buf), "%s=%.17g\n", key, v);
    os << buf;
  };
  line("base_map", base_map);
  line("cls", cls);
  line("loc", loc);
  line("dupe", dupe);
  line("bkg", bkg);
  line("miss", miss);
  line("false_pos", false_pos);
  line("false_neg", false_neg);
  os << "count_cls=" << n_cls << "\ncount_loc=" << n_loc << "\ncount_dupe=" << n_dupe
     << "\ncount_bkg=" << n_bkg << "\ncount_miss=" << n_miss << '\n';
  return os.str();
}

void write_detections(std::ostream& os, const std::vector<std::string>& image_ids,
                      std::span<const std::vector<Box>> detections) {
  if (image_ids.size() != detections.size()) throw std::invalid_argument("write_detections: image counts differ");
  for (std::size_t i = 0; i < detections.size(); ++i) {
    for (const Box& b : detections[i]) {
      Box scored = b.score ? b : b.with_score(0.0);
      os << image_ids[i] << ' ' << format_box(scored) << '\n';
    }
  }
}

std::vector<std::vector<Box>> read_detections(std::istream& is, const std::vector<std::string>& image_ids) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < image_ids.size(); ++i) index[image_ids[i]] = i;
  std::vector<std::vector<Box>> out(image_ids.size());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto start = line.find_first_not_of(" \t\r");
    if (start == std::string::npos || line[start] == '#') continue;
    const auto space = line.find_first_of(" \t", start);
    if (space == std::string::npos) throw std::invalid_argument("detections line " + std::to_string(lineno) + ": missing box");
    const std::string id = line.substr(start, space - start);
    const auto it = index.find(id);
    if (it == index.end()) throw std::invalid_argument("detections line " + std::to_string(lineno) + ": unknown image id '" + id + "'");
    Box b = parse_box(line.substr(space + 1));
    if (!b.score) throw std::invalid_argument("detections line " + std::to_string(lineno) + ": missing score");
    out[it->second].push_back(b);
  }
  return out;
}

void write_pr_svg(const std::string& path, const std::vector<std::pair<std::string, PrCurve>>& curves) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  const double w = 400, h = 400, m = 40;
  const char* colours[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w + 2 * m << "\" height=\"" << h + 2 * m << "\">\n";
  os << "<rect x=\"" << m << "\" y=\"" << m << "\" width=\"" << w << "\" height=\"" << h
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  os << "<text x=\"" << m + w / 2 << "\" y=\"" << h + 2 * m - 8 << "\" text-anchor=\"middle\">recall</text>\n";
  os << "<text x=\"12\" y=\"" << m + h / 2 << "\" transform=\"rotate(-90 12 " << m + h / 2
     << ")\" text-anchor=\"middle\">precision</text>\n";
  for (std::size_t k = 0; k < curves.size(); ++k) {
    const auto& [label, c] = curves[k];
    const char* colour = colours[k % 5];
    os << "<polyline fill=\"none\" stroke=\"" << colour << "\" points=\"";
    double prev_r = 0.0, prev_p = c.precision.empty() ? 0.0 : c.precision.front();
    os << m + prev_r * w << ',' << m + (1 - prev_p) * h;
    for (std::size_t i = 0; i < c.recall.size(); ++i) {
      os << ' ' << m + c.recall[i] * w << ',' << m + (1 - c.precision[i]) * h;
    }
    os << "\"/>\n";
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%s (AP %.3f)", label.c_str(), c.ap);
    os << "<text x=\"" << m + 8 << "\" y=\"" << m + 18 + 16 * k << "\" fill=\"" << colour << "\">" << buf << "</text>\n";
  }
  os << "</svg>\n";
}

}  // namespace selfdet
