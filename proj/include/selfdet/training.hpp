#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "selfdet/detector.hpp"
#include "selfdet/geometry.hpp"
#include "selfdet/image.hpp"
#include "selfdet/losses.hpp"

namespace selfdet {

enum class Strategy { kSeparate, kJoint };
enum class BackboneLoss { kDetOnly, kDetPlusRpn };
enum class DetectorProposals { kSs, kSsPlusRpn };

struct TrainConfig {
  Strategy strategy = Strategy::kJoint;
  BackboneLoss backbone_loss = BackboneLoss::kDetOnly;
  DetectorProposals detector_proposals = DetectorProposals::kSs;
  std::size_t epochs = 1;
  std::size_t steps = 0;  // overrides epochs when nonzero
  std::size_t batch_size = 8;
  double base_lr = 0.1;
  double ema_momentum = 0.99;
  double sgd_momentum = 0.9;
  double weight_decay = 0.0;
  double rpn_lambda = 1.0;
  std::size_t k = 4;
  std::uint64_t seed = 0;
  bool use_v3 = true;
  bool reset_rpn = true;  // separate strategy: start the RPN from fresh weights
  std::size_t snapshot_every = 0;
  std::string corpus;
  std::string proposal_cache;
  std::string checkpoint;
  std::string base_checkpoint;
  std::string init_checkpoint;
  std::string log;
  ModelConfig model;
  ViewConfig views;
};

/// Thrown for unknown keys or unparsable values; lists every offending key.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& what, std::vector<std::string> keys)
      : std::runtime_error(what), keys_(std::move(keys)) {}
  const std::vector<std::string>& keys() const { return keys_; }

 private:
  std::vector<std::string> keys_;
};

/// Applies `key=value` pairs on top of `base`. Blank lines and `#` comments
/// are skipped.
TrainConfig parse_train_config(std::istream& is, TrainConfig base = {});
TrainConfig load_train_config(const std::string& path);
void apply_overrides(TrainConfig& cfg, const std::vector<std::string>& assignments);
/// Canonical key=value text (round-trips through parse_train_config).
std::string format_train_config(const TrainConfig& cfg);

const char* to_string(Strategy s);
const char* to_string(BackboneLoss b);
const char* to_string(DetectorProposals d);

/// base_lr * 0.5 * (1 + cos(pi * step / total_steps)).
double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr);

/// v <- momentum * v + g + weight_decay * theta; theta <- theta - lr * v.
void sgd_step(std::span<double> params, std::span<const double> grads, std::span<double> velocity,
              double lr, double momentum = 0.9, double weight_decay = 0.0);

class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}
  /// Updates every tensor with an accumulated gradient, then clears grads.
  void step(const NamedTensors& params, double lr);

 private:
  double momentum_;
  double weight_decay_;
  std::map<std::string, std::vector<double>> velocity_;
};

struct TrainSample {
  Image image;
  std::vector<Box> proposals;  // image coordinates
};

struct StepRecord {
  std::size_t step = 0;
  double loss_rpn = 0.0;
  double loss_det = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  ModelPair model;
  std::vector<StepRecord> log;
  std::size_t skipped_images = 0;  // samples without cached proposals
  std::size_t total_steps = 0;
};

using StepCallback = std::function<void(const StepRecord&, const ModelPair&)>;

/// Number of optimizer steps the config asks for on `n` usable samples.
std::size_t planned_steps(const TrainConfig& cfg, std::size_t n);

TrainResult train_joint(const TrainConfig& cfg, std::span<const TrainSample> data, ModelPair model,
                        const StepCallback& on_step = {});
/// Only RPN parameters move; `base` supplies the frozen extractor and head.
TrainResult train_separate(const TrainConfig& cfg, std::span<const TrainSample> data, ModelPair base,
                           const StepCallback& on_step = {});

/// Initial model for a config: init_checkpoint when set, else fresh weights.
ModelPair initial_model(const TrainConfig& cfg);

/// `step loss_rpn loss_det lr` lines with a header comment.
void write_run_log(std::ostream& os, const TrainResult& result);

}  // namespace selfdet
