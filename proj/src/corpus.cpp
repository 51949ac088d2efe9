#include "selfdet/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <stdexcept>

#include "selfdet/log.hpp"
#include "selfdet/random.hpp"

namespace selfdet {

namespace fs = std::filesystem;

namespace {

std::array<double, 3> random_colour(Rng& rng) {
  return {rng.uniform(), rng.uniform(), rng.uniform()};
}

double colour_distance(const std::array<double, 3>& a, const std::array<double, 3>& b) {
  double s = 0.0;
  for (std::size_t c = 0; c < 3; ++c) s += (a[c] - b[c]) * (a[c] - b[c]);
  return std::sqrt(s);
}

bool disjoint(const Box& b, const std::vector<Box>& placed, double gap) {
  for (const Box& p : placed) {
    if (b.x1() < p.x2() + gap && p.x1() < b.x2() + gap && b.y1() < p.y2() + gap && p.y1() < b.y2() + gap) {
      return false;
    }
  }
  return true;
}

}  // namespace

SynthImage synth_image(std::uint64_t seed, const SynthConfig& cfg) {
  if (cfg.size < 16) throw std::invalid_argument("synth_image: size must be at least 16");
  Rng rng(seed);
  const int n = cfg.size;
  SynthImage out;
  out.image = Image(3, n, n);

  const auto background = random_colour(rng);
  const double angle = rng.uniform(0.0, std::numbers::pi);
  const double period = rng.uniform(6.0, 20.0);
  const double stripe = 0.04;
  const double noise = 0.02;
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double phase = (x * std::cos(angle) + y * std::sin(angle)) * 2.0 * std::numbers::pi / period;
      const double t = stripe * std::sin(phase);
      for (int c = 0; c < 3; ++c) {
        out.image.at(c, y, x) = std::clamp(background[static_cast<std::size_t>(c)] + t + rng.normal(0.0, noise), 0.0, 1.0);
      }
    }
  }

  const int target = cfg.min_objects + static_cast<int>(rng.index(static_cast<std::size_t>(cfg.max_objects - cfg.min_objects + 1)));
  for (int attempt = 0; attempt < 200 && static_cast<int>(out.boxes.size()) < target; ++attempt) {
    const double extent = rng.uniform(cfg.min_extent, cfg.max_extent);
    const double aspect = std::exp(rng.uniform(-std::log(cfg.max_aspect), std::log(cfg.max_aspect)));
    const int w = std::max(4, static_cast<int>(std::lround(extent / std::sqrt(aspect))));
    const int h = std::max(4, static_cast<int>(std::lround(extent * std::sqrt(aspect))));
    if (w > n || h > n) continue;
    const int x0 = static_cast<int>(rng.index(static_cast<std::size_t>(n - w + 1)));
    const int y0 = static_cast<int>(rng.index(static_cast<std::size_t>(n - h + 1)));
    const Box box(x0, y0, x0 + w, y0 + h);
    if (!disjoint(box, out.boxes, 2.0)) continue;

    std::array<double, 3> colour = random_colour(rng);
    for (int k = 0; k < 20 && colour_distance(colour, background) < 0.4; ++k) colour = random_colour(rng);
    const bool ellipse = rng.bernoulli(0.5);

    int xmin = n, ymin = n, xmax = -1, ymax = -1;
    const double cx = x0 + 0.5 * w, cy = y0 + 0.5 * h;
    for (int y = y0; y < y0 + h; ++y) {
      for (int x = x0; x < x0 + w; ++x) {
        if (ellipse) {
          const double dx = (x + 0.5 - cx) / (0.5 * w), dy = (y + 0.5 - cy) / (0.5 * h);
          if (dx * dx + dy * dy > 1.0) continue;
        }
        for (int c = 0; c < 3; ++c) out.image.at(c, y, x) = colour[static_cast<std::size_t>(c)];
        xmin = std::min(xmin, x);
        ymin = std::min(ymin, y);
        xmax = std::max(xmax, x);
        ymax = std::max(ymax, y);
      }
    }
    out.boxes.push_back(Box(xmin, ymin, xmax + 1, ymax + 1).with_class(0));
  }
  return out;
}

void write_synth_corpus(const std::string& dir, std::size_t n, std::uint64_t seed, const SynthConfig& cfg,
                        std::size_t first_index) {
  if (n == 0) throw std::invalid_argument("synth: n must be at least 1");
  fs::create_directories(dir);
  Rng master(seed);
  std::vector<std::uint64_t> seeds(first_index + n);
  for (auto& s : seeds) s = master.derive_seed();
  for (std::size_t i = first_index; i < first_index + n; ++i) {
    const SynthImage s = synth_image(seeds[i], cfg);
    char stem[32];
    std::snprintf(stem, sizeof(stem), "synth_%04zu", i);
    write_ppm((fs::path(dir) / (std::string(stem) + ".ppm")).string(), s.image);
    save_boxes((fs::path(dir) / (std::string(stem) + ".txt")).string(), s.boxes);
  }
}

std::vector<CorpusEntry> list_corpus(const std::string& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("corpus directory not found: " + dir);
  std::vector<CorpusEntry> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file() || e.path().extension() != ".ppm") continue;
    CorpusEntry entry;
    entry.stem = e.path().stem().string();
    entry.image_path = e.path().string();
    fs::path ann = e.path();
    ann.replace_extension(".txt");
    if (fs::exists(ann)) entry.annotation_path = ann.string();
    out.push_back(std::move(entry));
  }
  std::sort(out.begin(), out.end(), [](const CorpusEntry& a, const CorpusEntry& b) { return a.stem < b.stem; });
  return out;
}

std::string proposal_path(const std::string& cache_dir, const std::string& stem) {
  return (fs::path(cache_dir) / (stem + ".props")).string();
}

double ProposeSummary::mean_per_image() const {
  const std::size_t ok = images - failed;
  return ok == 0 ? 0.0 : static_cast<double>(proposals) / static_cast<double>(ok);
}

ProposeSummary build_proposal_cache(const std::vector<CorpusEntry>& corpus, const std::string& cache_dir,
                                    const SegmentationParams& params) {
  params.validate();
  fs::create_directories(cache_dir);
  ProposeSummary summary;
  for (const CorpusEntry& e : corpus) {
    ++summary.images;
    Image img;
    try {
      img = read_ppm(e.image_path);
    } catch (const std::exception& ex) {
      warn("skipping " + e.image_path + ": " + ex.what());
      ++summary.failed;
      continue;
    }
    const std::vector<Box> boxes = propose(img, params);
    summary.proposals += boxes.size();
    save_boxes(proposal_path(cache_dir, e.stem), boxes);
  }
  return summary;
}

std::vector<std::vector<Box>> load_proposal_cache(const std::vector<CorpusEntry>& corpus,
                                                  const std::string& cache_dir) {
  std::vector<std::vector<Box>> out;
  for (const CorpusEntry& e : corpus) {
    const std::string path = proposal_path(cache_dir, e.stem);
    out.push_back(fs::exists(path) ? load_boxes(path) : std::vector<Box>{});
  }
  return out;
}

std::vector<std::vector<Box>> load_annotations(const std::vector<CorpusEntry>& corpus) {
  std::vector<std::vector<Box>> out;
  for (const CorpusEntry& e : corpus) {
    if (!e.annotation_path) throw std::runtime_error("missing annotation for " + e.image_path);
    out.push_back(load_boxes(*e.annotation_path));
  }
  return out;
}

}  // namespace selfdet
