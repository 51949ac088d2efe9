#include "selfdet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "selfdet/checkpoint.hpp"
#include "selfdet/random.hpp"

namespace selfdet {

using nn::Tensor;

namespace {

Conv make_conv(int out, int in, int k, double stddev, Rng& rng, bool requires_grad) {
  std::vector<double> w(static_cast<std::size_t>(out) * in * k * k);
  for (double& v : w) v = rng.normal(0.0, stddev);
  return {Tensor::from_data({out, in, k, k}, std::move(w), requires_grad),
          Tensor::zeros({out}, requires_grad)};
}

Conv make_conv_he(int out, int in, int k, Rng& rng) {
  return make_conv(out, in, k, std::sqrt(2.0 / (in * k * k)), rng, true);
}

Linear make_linear(int in, int out, Rng& rng) {
  std::vector<double> w(static_cast<std::size_t>(in) * out);
  const double stddev = std::sqrt(2.0 / in);
  for (double& v : w) v = rng.normal(0.0, stddev);
  return {Tensor::from_data({in, out}, std::move(w), true), Tensor::zeros({out}, true)};
}

void add_conv(NamedTensors& out, const Conv& c, const std::string& name) {
  out.emplace_back(name + ".weight", c.weight);
  out.emplace_back(name + ".bias", c.bias);
}

void add_linear(NamedTensors& out, const Linear& l, const std::string& name) {
  out.emplace_back(name + ".weight", l.weight);
  out.emplace_back(name + ".bias", l.bias);
}

Tensor copy_leaf(const Tensor& t, bool requires_grad) {
  return Tensor::from_data(t.shape(), {t.data().begin(), t.data().end()}, requires_grad);
}

Conv copy_conv(const Conv& c, bool rg) { return {copy_leaf(c.weight, rg), copy_leaf(c.bias, rg)}; }
Linear copy_linear(const Linear& l, bool rg) { return {copy_leaf(l.weight, rg), copy_leaf(l.bias, rg)}; }
Mlp copy_mlp(const Mlp& m, bool rg) { return {copy_linear(m.hidden, rg), copy_linear(m.out, rg)}; }

Network copy_network(const Network& n, bool rg) {
  Network out;
  out.f.stem = copy_conv(n.f.stem, rg);
  for (std::size_t s = 0; s < 4; ++s) {
    out.f.stages[s][0] = copy_conv(n.f.stages[s][0], rg);
    out.f.stages[s][1] = copy_conv(n.f.stages[s][1], rg);
    out.f.laterals[s] = copy_conv(n.f.laterals[s], rg);
  }
  out.g = {copy_linear(n.g.fc1, rg), copy_linear(n.g.fc2, rg)};
  out.p = copy_mlp(n.p, rg);
  return out;
}

NamedTensors network_parameters(const Network& n, const std::string& prefix) {
  NamedTensors out = extractor_parameters(n.f, prefix + ".f");
  for (auto& e : head_parameters(n.g, prefix + ".g")) out.push_back(std::move(e));
  for (auto& e : mlp_parameters(n.p, prefix + ".p")) out.push_back(std::move(e));
  return out;
}

std::vector<double> config_record(const ModelConfig& c, double momentum) {
  return {static_cast<double>(c.in_channels), static_cast<double>(c.stem_width),
          static_cast<double>(c.stage_widths[0]), static_cast<double>(c.stage_widths[1]),
          static_cast<double>(c.stage_widths[2]), static_cast<double>(c.stage_widths[3]),
          static_cast<double>(c.fpn_dim), static_cast<double>(c.head_hidden),
          static_cast<double>(c.proj_hidden), static_cast<double>(c.embed_dim),
          static_cast<double>(c.pool_size), static_cast<double>(c.sampling), c.rpn_init_std,
          momentum};
}

}  // namespace

ModelPair init_model(const ModelConfig& c, std::uint64_t seed, double momentum) {
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("EMA momentum must be in [0, 1)");
  Rng rng(seed);
  ModelPair m;
  m.config = c;
  m.momentum = momentum;
  Extractor& f = m.online.f;
  f.stem = make_conv_he(c.stem_width, c.in_channels, 3, rng);
  int in = c.stem_width;
  for (std::size_t s = 0; s < 4; ++s) {
    const int w = c.stage_widths[s];
    f.stages[s][0] = make_conv_he(w, in, 3, rng);
    f.stages[s][1] = make_conv_he(w, w, 3, rng);
    in = w;
  }
  for (std::size_t s = 0; s < 4; ++s) f.laterals[s] = make_conv_he(c.fpn_dim, c.stage_widths[s], 1, rng);

  const int pooled = c.fpn_dim * c.pool_size * c.pool_size;
  m.online.g = {make_linear(pooled, c.head_hidden, rng), make_linear(c.head_hidden, c.head_hidden, rng)};
  m.online.p = {make_linear(c.head_hidden, c.proj_hidden, rng), make_linear(c.proj_hidden, c.embed_dim, rng)};
  m.predictor = {make_linear(c.embed_dim, c.proj_hidden, rng), make_linear(c.proj_hidden, c.embed_dim, rng)};

  m.rpn.shared = make_conv_he(c.fpn_dim, c.fpn_dim, 3, rng);
  m.rpn.objectness = make_conv(static_cast<int>(kAnchorRatios.size()), c.fpn_dim, 1, c.rpn_init_std, rng, true);
  m.rpn.deltas = make_conv(4 * static_cast<int>(kAnchorRatios.size()), c.fpn_dim, 1, c.rpn_init_std, rng, true);

  m.target = copy_network(m.online, false);
  return m;
}

NamedTensors extractor_parameters(const Extractor& f, const std::string& prefix) {
  NamedTensors out;
  add_conv(out, f.stem, prefix + ".stem");
  for (std::size_t s = 0; s < 4; ++s) {
    add_conv(out, f.stages[s][0], prefix + ".stage" + std::to_string(s + 1) + ".conv1");
    add_conv(out, f.stages[s][1], prefix + ".stage" + std::to_string(s + 1) + ".conv2");
  }
  for (std::size_t s = 0; s < 4; ++s) add_conv(out, f.laterals[s], prefix + ".lateral" + std::to_string(s + 2));
  return out;
}

NamedTensors head_parameters(const DetectorHead& g, const std::string& prefix) {
  NamedTensors out;
  add_linear(out, g.fc1, prefix + ".fc1");
  add_linear(out, g.fc2, prefix + ".fc2");
  return out;
}

NamedTensors mlp_parameters(const Mlp& m, const std::string& prefix) {
  NamedTensors out;
  add_linear(out, m.hidden, prefix + ".hidden");
  add_linear(out, m.out, prefix + ".out");
  return out;
}

NamedTensors rpn_parameters(const RpnHead& r, const std::string& prefix) {
  NamedTensors out;
  add_conv(out, r.shared, prefix + ".conv");
  add_conv(out, r.objectness, prefix + ".objectness");
  add_conv(out, r.deltas, prefix + ".deltas");
  return out;
}

NamedTensors online_parameters(const ModelPair& m) {
  NamedTensors out = network_parameters(m.online, "online");
  for (auto& e : mlp_parameters(m.predictor, "online.q")) out.push_back(std::move(e));
  for (auto& e : rpn_parameters(m.rpn, "online.rpn")) out.push_back(std::move(e));
  return out;
}

NamedTensors target_parameters(const ModelPair& m) { return network_parameters(m.target, "target"); }

NamedTensors all_parameters(const ModelPair& m) {
  NamedTensors out = online_parameters(m);
  for (auto& e : target_parameters(m)) out.push_back(std::move(e));
  return out;
}

void save_model(const std::string& path, const ModelPair& m) {
  std::vector<nn::NamedArray> arrays;
  const auto record = config_record(m.config, m.momentum);
  arrays.push_back({"meta.config", {static_cast<int>(record.size())}, record});
  for (const auto& [name, t] : all_parameters(m)) {
    arrays.push_back({name, t.shape(), {t.data().begin(), t.data().end()}});
  }
  nn::save_arrays(path, arrays);
}

ModelPair load_model(const std::string& path) {
  const auto arrays = nn::load_arrays(path);
  if (arrays.empty() || arrays[0].name != "meta.config" || arrays[0].data.size() != 14) {
    throw std::runtime_error(path + ": checkpoint lacks a model configuration record");
  }
  const auto& r = arrays[0].data;
  ModelConfig c;
  c.in_channels = static_cast<int>(r[0]);
  c.stem_width = static_cast<int>(r[1]);
  for (std::size_t i = 0; i < 4; ++i) c.stage_widths[i] = static_cast<int>(r[2 + i]);
  c.fpn_dim = static_cast<int>(r[6]);
  c.head_hidden = static_cast<int>(r[7]);
  c.proj_hidden = static_cast<int>(r[8]);
  c.embed_dim = static_cast<int>(r[9]);
  c.pool_size = static_cast<int>(r[10]);
  c.sampling = static_cast<int>(r[11]);
  c.rpn_init_std = r[12];
  ModelPair m = init_model(c, 0, r[13]);

  NamedTensors params = all_parameters(m);
  if (params.size() + 1 != arrays.size()) {
    throw std::runtime_error(path + ": checkpoint tensor count does not match the model");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& a = arrays[i + 1];
    auto& [name, t] = params[i];
    if (a.name != name || a.shape != t.shape()) {
      throw std::runtime_error(path + ": expected tensor '" + name + "' " + nn::shape_str(t.shape()) +
                               ", found '" + a.name + "' " + nn::shape_str(a.shape));
    }
    std::copy(a.data.begin(), a.data.end(), t.mutable_data().begin());
  }
  return m;
}

ModelPair clone_model(const ModelPair& m) {
  ModelPair out;
  out.config = m.config;
  out.momentum = m.momentum;
  out.online = copy_network(m.online, true);
  out.predictor = copy_mlp(m.predictor, true);
  out.rpn = {copy_conv(m.rpn.shared, true), copy_conv(m.rpn.objectness, true), copy_conv(m.rpn.deltas, true)};
  out.target = copy_network(m.target, false);
  return out;
}

void ema_update(ModelPair& pair, double momentum) {
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("EMA momentum must be in [0, 1)");
  NamedTensors online = network_parameters(pair.online, "");
  NamedTensors target = network_parameters(pair.target, "");
  for (std::size_t i = 0; i < online.size(); ++i) {
    auto theta = online[i].second.data();
    auto xi = target[i].second.mutable_data();
    for (std::size_t k = 0; k < xi.size(); ++k) xi[k] = momentum * xi[k] + (1.0 - momentum) * theta[k];
  }
}

Tensor image_tensor(const Image& img) {
  return Tensor::from_data({img.channels, img.height, img.width}, img.data);
}

FeaturePyramid extract(const Extractor& f, const Image& img, int max_level) {
  return extract(f, image_tensor(img), max_level);
}

FeaturePyramid extract(const Extractor& f, const Tensor& img, int max_level) {
  if (img.ndim() != 3) throw std::invalid_argument("extract: expected a (C, H, W) image");
  if (max_level < kMinFpnLevel || max_level > kMaxFpnLevel) {
    throw std::invalid_argument("extract: max_level must be in [2, 5]");
  }
  const int h = img.dim(1), w = img.dim(2);
  const int divisor = 1 << max_level;
  if (h % divisor != 0 || w % divisor != 0) {
    throw std::invalid_argument("extract: input " + std::to_string(h) + "x" + std::to_string(w) +
                                " is not divisible by " + std::to_string(divisor) + " (level p" +
                                std::to_string(max_level) + ")");
  }
  const std::size_t stages = static_cast<std::size_t>(max_level - 1);
  Tensor x = nn::relu(nn::conv2d(img, f.stem.weight, f.stem.bias, 2, 1));
  std::vector<Tensor> c;
  for (std::size_t s = 0; s < stages; ++s) {
    x = nn::relu(nn::conv2d(x, f.stages[s][0].weight, f.stages[s][0].bias, 1, 1));
    x = nn::relu(nn::conv2d(x, f.stages[s][1].weight, f.stages[s][1].bias, 1, 1));
    x = nn::max_pool2d(x, 2, 2);
    c.push_back(x);
  }
  FeaturePyramid fp;
  fp.image_h = h;
  fp.image_w = w;
  fp.levels.resize(stages);
  for (std::size_t i = stages; i-- > 0;) {
    Tensor lateral = nn::conv2d(c[i], f.laterals[i].weight, f.laterals[i].bias, 1, 0);
    fp.levels[i] = (i + 1 == stages) ? lateral : nn::add(lateral, nn::upsample_nearest2x(fp.levels[i + 1]));
  }
  return fp;
}

FeaturePyramid detach(const FeaturePyramid& fp) {
  FeaturePyramid out = fp;
  for (Tensor& l : out.levels) l = nn::detach(l);
  return out;
}

RpnOutput rpn_forward(const RpnHead& rpn, const FeaturePyramid& fp) {
  RpnOutput out;
  std::vector<std::size_t> delta_index;
  std::size_t delta_offset = 0;
  const std::size_t ratios = kAnchorRatios.size();
  for (const Tensor& level : fp.levels) {
    Tensor hidden = nn::relu(nn::conv2d(level, rpn.shared.weight, rpn.shared.bias, 1, 1));
    out.level_logits.push_back(nn::conv2d(hidden, rpn.objectness.weight, rpn.objectness.bias, 1, 0));
    out.level_deltas.push_back(nn::conv2d(hidden, rpn.deltas.weight, rpn.deltas.bias, 1, 0));
    const std::size_t hw = static_cast<std::size_t>(level.dim(1)) * level.dim(2);
    // Anchor (a, pos), coordinate k lives at channel 4a + k.
    for (std::size_t a = 0; a < ratios; ++a)
      for (std::size_t pos = 0; pos < hw; ++pos)
        for (std::size_t k = 0; k < 4; ++k) delta_index.push_back(delta_offset + (4 * a + k) * hw + pos);
    delta_offset += 4 * ratios * hw;
  }
  out.logits = nn::concat(out.level_logits);
  out.deltas = nn::gather(nn::concat(out.level_deltas), delta_index);
  return out;
}

std::vector<Box> rpn_propose(const RpnOutput& out, const AnchorSet& anchors, int image_h,
                             int image_w, const ProposalConfig& cfg) {
  const std::vector<Box> flat = anchors.flatten();
  auto logits = out.logits.data();
  auto deltas = out.deltas.data();
  if (logits.size() != flat.size() || deltas.size() != 4 * flat.size()) {
    throw std::invalid_argument("rpn_propose: RPN output does not match the anchor set");
  }
  struct Candidate {
    std::size_t index;
    double logit;
    Box box;
  };
  std::vector<Candidate> candidates;
  const ClipExtent clip{static_cast<double>(image_w), static_cast<double>(image_h)};
  for (std::size_t i = 0; i < flat.size(); ++i) {
    const Deltas t{deltas[4 * i], deltas[4 * i + 1], deltas[4 * i + 2], deltas[4 * i + 3]};
    if (auto b = decode_deltas(flat[i], t, clip)) candidates.push_back({i, logits[i], *b});
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Candidate& a, const Candidate& b) { return a.logit > b.logit; });
  if (candidates.size() > cfg.pre_nms_top) candidates.resize(cfg.pre_nms_top);

  std::vector<Box> boxes;
  for (const Candidate& c : candidates) {
    boxes.push_back(c.box.with_score(1.0 / (1.0 + std::exp(-c.logit))));
  }
  std::vector<Box> kept = nms(boxes, cfg.nms_threshold);
  if (kept.size() > cfg.k) kept.resize(cfg.k);
  return kept;
}

std::vector<Box> rpn_propose(const RpnHead& rpn, const FeaturePyramid& fp, const ProposalConfig& cfg) {
  nn::NoGradGuard no_grad;
  const RpnOutput out = rpn_forward(rpn, fp);
  const AnchorSet anchors = make_anchor_set(fp.image_h, fp.image_w, static_cast<int>(fp.levels.size()));
  return rpn_propose(out, anchors, fp.image_h, fp.image_w, cfg);
}

Tensor roi_align(const FeaturePyramid& fp, std::span<const Box> boxes, int pool_size, int sampling) {
  std::vector<nn::RoiRequest> rois;
  for (const Box& b : boxes) {
    const int level = assign_fpn_level(b, kMinFpnLevel, fp.max_level());
    const double s = 1.0 / fp.stride(level);
    rois.push_back({static_cast<std::size_t>(level - kMinFpnLevel), b.x1() * s, b.y1() * s, b.x2() * s, b.y2() * s});
  }
  return nn::roi_align(fp.levels, rois, pool_size, sampling);
}

Tensor roi_align(const FeaturePyramid& fp, const Box& box, int pool_size, int sampling) {
  const Box one[1] = {box};
  Tensor pooled = roi_align(fp, std::span<const Box>(one), pool_size, sampling);
  return nn::reshape(pooled, {pooled.dim(1), pooled.dim(2), pooled.dim(3)});
}

namespace {
Tensor linear(const Tensor& x, const Linear& l) { return nn::add_row_bias(nn::matmul(x, l.weight), l.bias); }
}  // namespace

Tensor head_embed(const Tensor& pooled, const Network& net, const Mlp* predictor) {
  Tensor x;
  if (pooled.ndim() == 4) {
    x = nn::reshape(pooled, {pooled.dim(0), pooled.dim(1) * pooled.dim(2) * pooled.dim(3)});
  } else if (pooled.ndim() == 3) {
    x = nn::reshape(pooled, {1, static_cast<int>(pooled.size())});
  } else {
    throw std::invalid_argument("head_embed: expected pooled features, got " + nn::shape_str(pooled.shape()));
  }
  x = nn::relu(linear(x, net.g.fc1));
  x = nn::relu(linear(x, net.g.fc2));
  x = linear(nn::relu(linear(x, net.p.hidden)), net.p.out);
  if (predictor) x = linear(nn::relu(linear(x, predictor->hidden)), predictor->out);
  return x;
}

}  // namespace selfdet
