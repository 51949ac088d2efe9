#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "selfdet/geometry.hpp"
#include "selfdet/image.hpp"
#include "selfdet/segmentation.hpp"

namespace selfdet {

struct SynthConfig {
  int size = 224;
  int min_objects = 1;
  int max_objects = 5;
  /// sqrt(area) range of an object in pixels.
  double min_extent = 70.0;
  double max_extent = 130.0;
  double max_aspect = 2.0;
};

struct SynthImage {
  Image image;
  std::vector<Box> boxes;  // class 0, pixel-exclusive extents
};

/// Uniform-colour rectangles and ellipses, pairwise disjoint, on a
/// low-amplitude striped and noisy background.
SynthImage synth_image(std::uint64_t seed, const SynthConfig& cfg = {});

/// Writes synth_NNNN.ppm and synth_NNNN.txt for i in [0, n). Image i uses
/// a seed derived from (seed, i).
void write_synth_corpus(const std::string& dir, std::size_t n, std::uint64_t seed,
                        const SynthConfig& cfg = {}, std::size_t first_index = 0);

struct CorpusEntry {
  std::string stem;
  std::string image_path;
  std::optional<std::string> annotation_path;  // <stem>.txt when present
};

/// All .ppm files of a directory, sorted by name. Throws when the directory
/// is missing.
std::vector<CorpusEntry> list_corpus(const std::string& dir);

std::string proposal_path(const std::string& cache_dir, const std::string& stem);

struct ProposeSummary {
  std::size_t images = 0;
  std::size_t failed = 0;
  std::size_t proposals = 0;
  double mean_per_image() const;
};

/// Runs selective search on every image and writes <stem>.props files.
ProposeSummary build_proposal_cache(const std::vector<CorpusEntry>& corpus, const std::string& cache_dir,
                                    const SegmentationParams& params);

/// Cached proposals per entry (empty when the file is missing).
std::vector<std::vector<Box>> load_proposal_cache(const std::vector<CorpusEntry>& corpus,
                                                  const std::string& cache_dir);

/// Annotations for every entry; throws naming the first entry without one.
std::vector<std::vector<Box>> load_annotations(const std::vector<CorpusEntry>& corpus);

}  // namespace selfdet
