#pragma once

#include <cstddef>
#include <vector>

#include "selfdet/detector.hpp"
#include "selfdet/geometry.hpp"
#include "selfdet/random.hpp"
#include "selfdet/tensor.hpp"
#include "selfdet/views.hpp"

namespace selfdet {

struct AnchorMatchConfig {
  double positive_iou = 0.7;
  double negative_iou = 0.3;
  std::size_t sample_size = 256;
  std::size_t max_positives = 128;
};

struct AnchorMatch {
  static constexpr int kIgnore = -1;

  std::vector<int> labels;       // 1, 0 or kIgnore per anchor
  std::vector<Deltas> targets;   // meaningful where labels[i] == 1
  std::vector<std::size_t> sampled;  // ascending anchor indices entering N_cls
  std::size_t num_positions = 0;     // N_reg

  std::size_t count(int label) const;
  std::size_t sampled_positives() const;
};

/// Threshold and argmax labelling without sampling; every labelled anchor
/// is marked as sampled.
AnchorMatch label_anchors(std::span<const Box> anchors, std::span<const Box> gt,
                          std::size_t num_positions, const AnchorMatchConfig& cfg = {});
/// Labelling followed by uniform sampling of cfg.sample_size anchors with
/// at most cfg.max_positives positives. Throws on empty gt.
AnchorMatch match_anchors(const AnchorSet& anchors, std::span<const Box> gt, Rng& rng,
                          const AnchorMatchConfig& cfg = {});

double smooth_l1(double x);

inline constexpr double kProbabilityClamp = 1e-7;

/// Log-loss over the sampled anchors plus lambda-weighted smooth-L1 over
/// positives. `probs` is (N), `deltas` (N * 4).
nn::Tensor rpn_loss(const nn::Tensor& probs, const nn::Tensor& deltas, const AnchorMatch& match,
                    double lambda = 1.0);

/// -2 cos(v, t1) - 2 cos(v, t2) averaged over rows; t1 and t2 are
/// gradient-stopped. Rows with valid[i] == false are dropped (empty mask
/// means all rows); no valid rows gives 0 and a warning.
nn::Tensor sim_loss(const nn::Tensor& v, const nn::Tensor& t1, const nn::Tensor& t2,
                    const std::vector<bool>& valid = {});

struct ViewEmbeddings {
  nn::Tensor v1, v2, v3;  // (K, E) each
};

struct DetLoss {
  nn::Tensor sim;      // online V1 against target V2, V3
  nn::Tensor sim_bar;  // target V1 against online V2, V3
  nn::Tensor total;
};

DetLoss det_loss(const ViewEmbeddings& online, const ViewEmbeddings& target);

struct ViewPyramids {
  FeaturePyramid v1, v2, v3;
};

/// V1 and V2 up to p5, V3 up to p4 (its extent is half). With use_v3 off,
/// v3 aliases v2.
ViewPyramids extract_views(const Extractor& f, const ViewTriple& views, bool use_v3 = true);

/// Embeds the valid proposals of every view; the predictor is applied
/// when given (online side).
ViewEmbeddings embed_views(const ViewPyramids& fp, const ViewTriple& views, const Network& net,
                           const Mlp* predictor, const ModelConfig& config, bool use_v3 = true);

/// Full L_det for one view triple; zero when no proposal is valid.
DetLoss det_loss(const ViewTriple& views, const ModelPair& pair, bool use_v3 = true);

nn::Tensor total_loss(const nn::Tensor& rpn_term, const nn::Tensor& det_term);

}  // namespace selfdet
