#include "selfdet/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "selfdet/log.hpp"

namespace selfdet {

using nn::Tensor;

std::size_t AnchorMatch::count(int label) const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), label));
}

std::size_t AnchorMatch::sampled_positives() const {
  return static_cast<std::size_t>(
      std::count_if(sampled.begin(), sampled.end(), [&](std::size_t i) { return labels[i] == 1; }));
}

AnchorMatch label_anchors(std::span<const Box> anchors, std::span<const Box> gt,
                          std::size_t num_positions, const AnchorMatchConfig& cfg) {
  if (gt.empty()) throw std::invalid_argument("match_anchors: at least one ground-truth box is required");
  const std::size_t n = anchors.size();
  AnchorMatch m;
  m.labels.assign(n, AnchorMatch::kIgnore);
  m.targets.assign(n, Deltas{0.0, 0.0, 0.0, 0.0});
  m.num_positions = num_positions;

  std::vector<double> best_iou(n, 0.0);
  std::vector<std::size_t> best_gt(n, 0);
  std::vector<double> gt_best(gt.size(), 0.0);
  std::vector<double> overlaps(n * gt.size());
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double v = iou(anchors[a], gt[g]);
      overlaps[a * gt.size() + g] = v;
      if (v > best_iou[a]) {
        best_iou[a] = v;
        best_gt[a] = g;
      }
      gt_best[g] = std::max(gt_best[g], v);
    }
  }
  for (std::size_t a = 0; a < n; ++a) {
    if (best_iou[a] < cfg.negative_iou) m.labels[a] = 0;
    if (best_iou[a] > cfg.positive_iou) m.labels[a] = 1;
  }
  // Anchors attaining a gt box's highest overlap are positive, ties included.
  for (std::size_t g = 0; g < gt.size(); ++g) {
    if (gt_best[g] <= 0.0) continue;
    for (std::size_t a = 0; a < n; ++a) {
      if (overlaps[a * gt.size() + g] == gt_best[g]) m.labels[a] = 1;
    }
  }
  for (std::size_t a = 0; a < n; ++a) {
    if (m.labels[a] == 1) m.targets[a] = encode_deltas(anchors[a], gt[best_gt[a]]);
    if (m.labels[a] != AnchorMatch::kIgnore) m.sampled.push_back(a);
  }
  return m;
}

AnchorMatch match_anchors(const AnchorSet& anchors, std::span<const Box> gt, Rng& rng,
                          const AnchorMatchConfig& cfg) {
  const std::vector<Box> flat = anchors.flatten();
  AnchorMatch m = label_anchors(flat, gt, anchors.positions(), cfg);

  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < m.labels.size(); ++i) {
    if (m.labels[i] == 1) pos.push_back(i);
    if (m.labels[i] == 0) neg.push_back(i);
  }
  const std::size_t n_pos = std::min(pos.size(), cfg.max_positives);
  const std::size_t n_neg = std::min(neg.size(), cfg.sample_size - std::min(cfg.sample_size, n_pos));
  m.sampled.clear();
  for (std::size_t k : rng.sample_without_replacement(pos.size(), n_pos)) m.sampled.push_back(pos[k]);
  for (std::size_t k : rng.sample_without_replacement(neg.size(), n_neg)) m.sampled.push_back(neg[k]);
  std::sort(m.sampled.begin(), m.sampled.end());
  return m;
}

double smooth_l1(double x) {
  const double a = std::abs(x);
  return a < 1.0 ? 0.5 * x * x : a - 0.5;
}

Tensor rpn_loss(const Tensor& probs, const Tensor& deltas, const AnchorMatch& match, double lambda) {
  const std::size_t n = match.labels.size();
  if (probs.size() != n || deltas.size() != 4 * n) {
    throw std::invalid_argument("rpn_loss: predictions (" + nn::shape_str(probs.shape()) + ", " +
                                nn::shape_str(deltas.shape()) + ") do not match " +
                                std::to_string(n) + " anchors");
  }
  if (match.sampled.empty()) throw std::invalid_argument("rpn_loss: no sampled anchors");

  const int n_cls = static_cast<int>(match.sampled.size());
  std::vector<double> y(match.sampled.size());
  std::vector<double> not_y(match.sampled.size());
  std::vector<std::size_t> reg_index;
  std::vector<double> reg_target;
  for (std::size_t k = 0; k < match.sampled.size(); ++k) {
    const std::size_t a = match.sampled[k];
    y[k] = match.labels[a] == 1 ? 1.0 : 0.0;
    not_y[k] = 1.0 - y[k];
    if (match.labels[a] == 1) {
      for (std::size_t c = 0; c < 4; ++c) {
        reg_index.push_back(4 * a + c);
        reg_target.push_back(match.targets[a][c]);
      }
    }
  }

  const Tensor p = nn::clamp(nn::gather(probs, match.sampled), kProbabilityClamp, 1.0 - kProbabilityClamp);
  const Tensor log_p = nn::log(p);
  const Tensor log_q = nn::log(nn::add_scalar(nn::scale(p, -1.0), 1.0));
  const Tensor ll = nn::add(nn::sum(nn::mul(log_p, Tensor::from_data({n_cls}, std::move(y)))),
                            nn::sum(nn::mul(log_q, Tensor::from_data({n_cls}, std::move(not_y)))));
  Tensor loss = nn::scale(ll, -1.0 / n_cls);

  if (!reg_index.empty()) {
    const int m = static_cast<int>(reg_index.size());
    const Tensor diff = nn::sub(nn::gather(deltas, reg_index), Tensor::from_data({m}, std::move(reg_target)));
    const double n_reg = static_cast<double>(std::max<std::size_t>(match.num_positions, 1));
    loss = nn::add(loss, nn::scale(nn::sum(nn::smooth_l1(diff)), lambda / n_reg));
  }
  return loss;
}

namespace {

// Sum over rows of cos(a_i, b_i), (K, E) inputs.
Tensor cosine_sum(const Tensor& a, const Tensor& b) {
  return nn::sum(nn::mul(nn::l2_normalize(a, 1), nn::l2_normalize(b, 1)));
}

void require_rows(const Tensor& t, const char* what) {
  if (t.ndim() != 2) throw std::invalid_argument(std::string("sim_loss: ") + what + " must be (K, E), got " + nn::shape_str(t.shape()));
}

}  // namespace

Tensor sim_loss(const Tensor& v, const Tensor& t1, const Tensor& t2, const std::vector<bool>& valid) {
  require_rows(v, "online embedding");
  require_rows(t1, "first target");
  require_rows(t2, "second target");
  if (t1.shape() != v.shape() || t2.shape() != v.shape()) {
    throw std::invalid_argument("sim_loss: embedding shapes differ");
  }
  const int rows = v.dim(0), cols = v.dim(1);
  if (!valid.empty() && valid.size() != static_cast<std::size_t>(rows)) {
    throw std::invalid_argument("sim_loss: valid mask length does not match K");
  }
  std::vector<std::size_t> keep;
  for (int r = 0; r < rows; ++r) {
    if (valid.empty() || valid[static_cast<std::size_t>(r)]) {
      for (int c = 0; c < cols; ++c) keep.push_back(static_cast<std::size_t>(r) * cols + c);
    }
  }
  const int k_eff = static_cast<int>(keep.size()) / std::max(cols, 1);
  if (k_eff == 0) {
    warn("sim_loss: no valid proposals, contribution set to 0");
    return Tensor::scalar(0.0);
  }
  auto select = [&](const Tensor& t) {
    return k_eff == rows ? t : nn::reshape(nn::gather(t, keep), {k_eff, cols});
  };
  const Tensor a = select(v);
  const Tensor b1 = nn::detach(select(t1));
  const Tensor b2 = nn::detach(select(t2));
  return nn::scale(nn::add(cosine_sum(a, b1), cosine_sum(a, b2)), -2.0 / k_eff);
}

DetLoss det_loss(const ViewEmbeddings& online, const ViewEmbeddings& target) {
  DetLoss out;
  out.sim = sim_loss(online.v1, target.v2, target.v3);
  // Symmetric term: target V1 is the fixed side, online V2 and V3 move.
  const int k = online.v1.dim(0);
  const Tensor t1 = nn::detach(target.v1);
  const Tensor bar = nn::add(cosine_sum(online.v2, t1), cosine_sum(online.v3, t1));
  out.sim_bar = nn::scale(bar, -2.0 / k);
  out.total = nn::add(out.sim, out.sim_bar);
  return out;
}

namespace {

int deepest_level(int extent) {
  int level = kMaxFpnLevel;
  while (level > kMinFpnLevel && extent % (1 << level) != 0) --level;
  if (extent % (1 << level) != 0) {
    throw std::invalid_argument("view extent " + std::to_string(extent) + " is not divisible by 4");
  }
  return level;
}

std::vector<Box> pick(const std::vector<Box>& boxes, const std::vector<bool>& valid) {
  std::vector<Box> out;
  for (std::size_t i = 0; i < boxes.size(); ++i)
    if (valid[i]) out.push_back(boxes[i]);
  return out;
}

}  // namespace

ViewPyramids extract_views(const Extractor& f, const ViewTriple& views, bool use_v3) {
  ViewPyramids fp;
  fp.v1 = extract(f, views.v1, deepest_level(views.v1.height));
  fp.v2 = extract(f, views.v2, deepest_level(views.v2.height));
  fp.v3 = use_v3 ? extract(f, views.v3, deepest_level(views.v3.height)) : fp.v2;
  return fp;
}

ViewEmbeddings embed_views(const ViewPyramids& fp, const ViewTriple& views, const Network& net,
                           const Mlp* predictor, const ModelConfig& config, bool use_v3) {
  auto embed = [&](const FeaturePyramid& p, const std::vector<Box>& boxes) {
    const std::vector<Box> chosen = pick(boxes, views.valid);
    return head_embed(roi_align(p, chosen, config.pool_size, config.sampling), net, predictor);
  };
  ViewEmbeddings e;
  e.v1 = embed(fp.v1, views.boxes_v1);
  e.v2 = embed(fp.v2, views.boxes_v2);
  e.v3 = use_v3 ? embed(fp.v3, views.boxes_v3) : e.v2;
  return e;
}

DetLoss det_loss(const ViewTriple& views, const ModelPair& pair, bool use_v3) {
  if (views.valid_count() == 0) {
    warn("det_loss: no valid proposals, contribution set to 0");
    const Tensor zero = Tensor::scalar(0.0);
    return {zero, zero, zero};
  }
  const ViewPyramids online_fp = extract_views(pair.online.f, views, use_v3);
  const ViewEmbeddings online = embed_views(online_fp, views, pair.online, &pair.predictor, pair.config, use_v3);
  ViewEmbeddings target;
  {
    nn::NoGradGuard no_grad;
    const ViewPyramids target_fp = extract_views(pair.target.f, views, use_v3);
    target = embed_views(target_fp, views, pair.target, nullptr, pair.config, use_v3);
  }
  return det_loss(online, target);
}

Tensor total_loss(const Tensor& rpn_term, const Tensor& det_term) { return nn::add(rpn_term, det_term); }

}  // namespace selfdet
