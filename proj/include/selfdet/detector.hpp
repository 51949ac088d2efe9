#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "selfdet/geometry.hpp"
#include "selfdet/image.hpp"
#include "selfdet/tensor.hpp"

namespace selfdet {

struct ModelConfig {
  int in_channels = 3;
  int stem_width = 16;
  std::array<int, 4> stage_widths = {16, 32, 64, 128};
  int fpn_dim = 32;       // D
  int head_hidden = 128;  // g
  int proj_hidden = 128;  // p and q hidden width
  int embed_dim = 64;     // E
  int pool_size = 7;
  int sampling = 2;
  double rpn_init_std = 0.01;
};

struct Conv {
  nn::Tensor weight;  // (out, in, k, k)
  nn::Tensor bias;    // (out)
};

struct Linear {
  nn::Tensor weight;  // (in, out)
  nn::Tensor bias;    // (out)
};

/// Backbone + FPN (f): stride-2 stem conv, four [conv, relu, conv, relu,
/// max-pool] stages, 1x1 laterals and nearest-neighbour top-down sums.
struct Extractor {
  Conv stem;
  std::array<std::array<Conv, 2>, 4> stages;
  std::array<Conv, 4> laterals;
};

/// Two fully-connected layers with relu (g).
struct DetectorHead {
  Linear fc1, fc2;
};

/// Two-layer MLP (p and q).
struct Mlp {
  Linear hidden, out;
};

/// Shared 3x3 conv (c), objectness 1x1 (o, 3 anchors) and delta 1x1 (d, 12).
struct RpnHead {
  Conv shared, objectness, deltas;
};

struct Network {
  Extractor f;
  DetectorHead g;
  Mlp p;
};

/// Online parameters (f, g, p, q, rpn) and their gradient-free EMA shadow
/// (f, g, p). Target tensors never require gradients.
struct ModelPair {
  ModelConfig config;
  Network online;
  Mlp predictor;
  RpnHead rpn;
  Network target;
  double momentum = 0.99;
};

using NamedTensors = std::vector<std::pair<std::string, nn::Tensor>>;

ModelPair init_model(const ModelConfig& config, std::uint64_t seed, double momentum = 0.99);

NamedTensors extractor_parameters(const Extractor& f, const std::string& prefix);
NamedTensors head_parameters(const DetectorHead& g, const std::string& prefix);
NamedTensors mlp_parameters(const Mlp& m, const std::string& prefix);
NamedTensors rpn_parameters(const RpnHead& r, const std::string& prefix);
/// Every online tensor that receives optimizer updates, prefixes
/// `online.f`, `online.g`, `online.p`, `online.q`, `online.rpn`.
NamedTensors online_parameters(const ModelPair& m);
/// `target.f`, `target.g`, `target.p`.
NamedTensors target_parameters(const ModelPair& m);
NamedTensors all_parameters(const ModelPair& m);

/// Checkpoint with the model configuration stored alongside the tensors.
void save_model(const std::string& path, const ModelPair& m);
ModelPair load_model(const std::string& path);

/// Deep copy (fresh leaves, same values).
ModelPair clone_model(const ModelPair& m);

/// ξ <- m ξ + (1 - m) θ over f, g, p.
void ema_update(ModelPair& pair, double momentum);

struct FeaturePyramid {
  std::vector<nn::Tensor> levels;  // levels[i] is p(2+i)
  int image_h = 0;
  int image_w = 0;

  int max_level() const { return kMinFpnLevel + static_cast<int>(levels.size()) - 1; }
  const nn::Tensor& level(int l) const { return levels.at(static_cast<std::size_t>(l - kMinFpnLevel)); }
  int stride(int l) const { return 1 << l; }
};

nn::Tensor image_tensor(const Image& img);

/// Pyramid p2..p(max_level); the input extent must be divisible by 2^max_level.
FeaturePyramid extract(const Extractor& f, const Image& img, int max_level = kMaxFpnLevel);
FeaturePyramid extract(const Extractor& f, const nn::Tensor& img, int max_level = kMaxFpnLevel);
/// Same pyramid with every level cut from the graph.
FeaturePyramid detach(const FeaturePyramid& fp);

struct RpnOutput {
  std::vector<nn::Tensor> level_logits;  // (3, H, W) per level
  std::vector<nn::Tensor> level_deltas;  // (12, H, W) per level
  nn::Tensor logits;  // (N): all anchors in AnchorSet order
  nn::Tensor deltas;  // (N * 4): anchor-major (tx, ty, tw, th)
};

RpnOutput rpn_forward(const RpnHead& rpn, const FeaturePyramid& fp);

struct ProposalConfig {
  std::size_t pre_nms_top = 64;
  double nms_threshold = 0.7;
  std::size_t k = 4;
};

/// Decode all anchors, clip to the image, drop degenerate boxes, keep the
/// top pre_nms_top by objectness (ties in scan order), NMS, keep the top k.
/// Boxes carry sigmoid objectness as score.
std::vector<Box> rpn_propose(const RpnOutput& out, const AnchorSet& anchors, int image_h,
                             int image_w, const ProposalConfig& cfg = {});
std::vector<Box> rpn_propose(const RpnHead& rpn, const FeaturePyramid& fp,
                             const ProposalConfig& cfg = {});

/// Pools each box from its scale-assigned level (clamped to the pyramid)
/// into (K, D, pool, pool).
nn::Tensor roi_align(const FeaturePyramid& fp, std::span<const Box> boxes, int pool_size = 7,
                     int sampling = 2);
/// Single box, (D, pool, pool).
nn::Tensor roi_align(const FeaturePyramid& fp, const Box& box, int pool_size = 7, int sampling = 2);

/// (K, D, pool, pool) or (D, pool, pool) -> (K, E) through g, p and,
/// when given, the predictor q.
nn::Tensor head_embed(const nn::Tensor& pooled, const Network& net, const Mlp* predictor);

}  // namespace selfdet
