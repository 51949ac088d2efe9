#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "selfdet/detector.hpp"
#include "selfdet/evaluation.hpp"
#include "selfdet/gradcheck.hpp"
#include "selfdet/image.hpp"
#include "selfdet/segmentation.hpp"
#include "selfdet/training.hpp"

namespace selfdet {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Worker count from SELFDET_THREADS (default 1).
std::size_t thread_count();

struct EvalConfig {
  std::size_t k = 4;
  int view_size = 224;
  bool use_target = false;  // score with the EMA extractor instead of the online one
  double iou_thresh = 0.5;
  StratifyConfig stratify;
};

/// Top-k RPN proposals per image in image coordinates, class 0, scored by
/// objectness.
std::vector<std::vector<Box>> model_detections(const ModelPair& model, std::span<const Image> images,
                                               const EvalConfig& cfg = {});

struct EvalResult {
  double recall = 0.0;
  ErrorReport errors;
  PrCurve curve;
};

/// Class-agnostic scoring of detections against gt.
EvalResult evaluate_detections(std::span<const std::vector<Box>> detections,
                               std::span<const std::vector<Box>> gt, const EvalConfig& cfg = {});
EvalResult evaluate_model(const ModelPair& model, std::span<const Image> images,
                          std::span<const std::vector<Box>> gt, const EvalConfig& cfg = {});

struct GradcheckSuiteOptions {
  std::uint64_t seed = 0;
  std::string fault_op;  // injected wrong backward rule, empty for none
  nn::GradCheckOptions check;
};

/// Every loss and layer family; one report per check.
std::vector<nn::GradCheckReport> run_gradcheck_suite(const GradcheckSuiteOptions& options);

struct ProposeOptions {
  std::string corpus;
  std::string cache;
  SegmentationParams params;
};

struct PretrainOptions {
  std::string config;
  std::vector<std::string> overrides;
  std::string ablation_dir;  // non-empty: run the four joint configurations
};

struct EvaluateOptions {
  std::string corpus;
  std::string checkpoint;
  std::string detections;  // detections file instead of a checkpoint
  std::string svg;
  std::string report;  // key=value output file
  EvalConfig eval;
};

struct SynthOptions {
  std::size_t n = 0;
  std::string out_dir;
  std::uint64_t seed = 0;
  std::size_t first_index = 0;
};

int cmd_propose(const ProposeOptions& o, std::ostream& out, std::ostream& err);
int cmd_pretrain(const PretrainOptions& o, std::ostream& out, std::ostream& err);
int cmd_evaluate(const EvaluateOptions& o, std::ostream& out, std::ostream& err);
int cmd_gradcheck(const GradcheckSuiteOptions& o, std::ostream& out, std::ostream& err);
int cmd_synth(const SynthOptions& o, std::ostream& out, std::ostream& err);

/// Loads corpus images and cached proposals into training samples.
std::vector<TrainSample> load_training_data(const std::string& corpus, const std::string& cache);

/// Runs the configured strategy end to end: data, training, checkpoint,
/// snapshots and run log.
TrainResult run_pretrain(const TrainConfig& cfg, std::ostream& out);

}  // namespace selfdet
