#include "selfdet/training.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "selfdet/log.hpp"
#include "selfdet/random.hpp"
#include "selfdet/views.hpp"

namespace selfdet {

using nn::Tensor;

const char* to_string(Strategy s) { return s == Strategy::kJoint ? "joint" : "separate"; }
const char* to_string(BackboneLoss b) { return b == BackboneLoss::kDetOnly ? "det_only" : "det_plus_rpn"; }
const char* to_string(DetectorProposals d) { return d == DetectorProposals::kSs ? "ss" : "ss_plus_rpn"; }

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
bool parse_number(const std::string& v, T& out) {
  if constexpr (std::is_floating_point_v<T>) {
    try {
      std::size_t used = 0;
      out = std::stod(v, &used);
      return used == v.size() && std::isfinite(out);
    } catch (const std::exception&) {
      return false;
    }
  } else {
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    return ec == std::errc() && ptr == v.data() + v.size();
  }
}

bool parse_bool(const std::string& v, bool& out) {
  if (v == "true" || v == "1") return out = true, true;
  if (v == "false" || v == "0") return out = false, true;
  return false;
}

// Returns false when the key is unknown or the value does not parse.
bool assign(TrainConfig& c, const std::string& key, const std::string& v) {
  if (key == "strategy") {
    if (v == "joint") return c.strategy = Strategy::kJoint, true;
    if (v == "separate") return c.strategy = Strategy::kSeparate, true;
    return false;
  }
  if (key == "backbone_loss") {
    if (v == "det_only") return c.backbone_loss = BackboneLoss::kDetOnly, true;
    if (v == "det_plus_rpn") return c.backbone_loss = BackboneLoss::kDetPlusRpn, true;
    return false;
  }
  if (key == "detector_proposals") {
    if (v == "ss") return c.detector_proposals = DetectorProposals::kSs, true;
    if (v == "ss_plus_rpn") return c.detector_proposals = DetectorProposals::kSsPlusRpn, true;
    return false;
  }
  if (key == "epochs") return parse_number(v, c.epochs);
  if (key == "steps") return parse_number(v, c.steps);
  if (key == "batch_size") return parse_number(v, c.batch_size) && c.batch_size > 0;
  if (key == "base_lr") return parse_number(v, c.base_lr) && c.base_lr >= 0.0;
  if (key == "ema_momentum" || key == "momentum") {
    return parse_number(v, c.ema_momentum) && c.ema_momentum >= 0.0 && c.ema_momentum < 1.0;
  }
  if (key == "sgd_momentum") return parse_number(v, c.sgd_momentum) && c.sgd_momentum >= 0.0;
  if (key == "weight_decay") return parse_number(v, c.weight_decay) && c.weight_decay >= 0.0;
  if (key == "rpn_lambda") return parse_number(v, c.rpn_lambda) && c.rpn_lambda >= 0.0;
  if (key == "k") return parse_number(v, c.k) && c.k > 0;
  if (key == "seed") return parse_number(v, c.seed);
  if (key == "use_v3") return parse_bool(v, c.use_v3);
  if (key == "reset_rpn") return parse_bool(v, c.reset_rpn);
  if (key == "snapshot_every") return parse_number(v, c.snapshot_every);
  if (key == "corpus") return c.corpus = v, true;
  if (key == "proposal_cache") return c.proposal_cache = v, true;
  if (key == "checkpoint") return c.checkpoint = v, true;
  if (key == "base_checkpoint") return c.base_checkpoint = v, true;
  if (key == "init_checkpoint") return c.init_checkpoint = v, true;
  if (key == "log") return c.log = v, true;
  if (key == "stem_width") return parse_number(v, c.model.stem_width) && c.model.stem_width > 0;
  if (key == "fpn_dim") return parse_number(v, c.model.fpn_dim) && c.model.fpn_dim > 0;
  if (key == "head_hidden") return parse_number(v, c.model.head_hidden) && c.model.head_hidden > 0;
  if (key == "proj_hidden") return parse_number(v, c.model.proj_hidden) && c.model.proj_hidden > 0;
  if (key == "embed_dim") return parse_number(v, c.model.embed_dim) && c.model.embed_dim > 0;
  if (key == "view_size") return parse_number(v, c.views.size) && c.views.size > 0 && c.views.size % 32 == 0;
  if (key == "photometric") return parse_bool(v, c.views.apply_photometric);
  return false;
}

void apply_lines(TrainConfig& cfg, const std::vector<std::string>& lines) {
  TrainConfig next = cfg;
  std::vector<std::string> bad;
  for (const std::string& raw : lines) {
    const std::string line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      bad.push_back(line);
      continue;
    }
    const std::string key = trim(line.substr(0, eq));
    if (!assign(next, key, trim(line.substr(eq + 1)))) bad.push_back(key);
  }
  if (!bad.empty()) {
    std::string msg = "invalid config keys:";
    for (const auto& k : bad) msg += " " + k;
    throw ConfigError(msg, bad);
  }
  cfg = std::move(next);
}

}  // namespace

TrainConfig parse_train_config(std::istream& is, TrainConfig base) {
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) lines.push_back(line);
  apply_lines(base, lines);
  return base;
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read config " + path);
  return parse_train_config(is);
}

void apply_overrides(TrainConfig& cfg, const std::vector<std::string>& assignments) { apply_lines(cfg, assignments); }

std::string format_train_config(const TrainConfig& c) {
  std::ostringstream os;
  char buf[64];
  auto real = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  os << "strategy=" << to_string(c.strategy) << '\n'
     << "backbone_loss=" << to_string(c.backbone_loss) << '\n'
     << "detector_proposals=" << to_string(c.detector_proposals) << '\n'
     << "epochs=" << c.epochs << '\n'
     << "steps=" << c.steps << '\n'
     << "batch_size=" << c.batch_size << '\n'
     << "base_lr=" << real(c.base_lr) << '\n'
     << "ema_momentum=" << real(c.ema_momentum) << '\n'
     << "sgd_momentum=" << real(c.sgd_momentum) << '\n'
     << "weight_decay=" << real(c.weight_decay) << '\n'
     << "rpn_lambda=" << real(c.rpn_lambda) << '\n'
     << "k=" << c.k << '\n'
     << "seed=" << c.seed << '\n'
     << "use_v3=" << (c.use_v3 ? "true" : "false") << '\n'
     << "reset_rpn=" << (c.reset_rpn ? "true" : "false") << '\n'
     << "snapshot_every=" << c.snapshot_every << '\n'
     << "corpus=" << c.corpus << '\n'
     << "proposal_cache=" << c.proposal_cache << '\n'
     << "checkpoint=" << c.checkpoint << '\n'
     << "base_checkpoint=" << c.base_checkpoint << '\n'
     << "init_checkpoint=" << c.init_checkpoint << '\n'
     << "log=" << c.log << '\n'
     << "stem_width=" << c.model.stem_width << '\n'
     << "fpn_dim=" << c.model.fpn_dim << '\n'
     << "head_hidden=" << c.model.head_hidden << '\n'
     << "proj_hidden=" << c.model.proj_hidden << '\n'
     << "embed_dim=" << c.model.embed_dim << '\n'
     << "view_size=" << c.views.size << '\n'
     << "photometric=" << (c.views.apply_photometric ? "true" : "false") << '\n';
  return os.str();
}

double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr) {
  if (total_steps == 0 || step > total_steps) {
    throw std::invalid_argument("cosine_lr: step must lie in [0, total_steps]");
  }
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

void sgd_step(std::span<double> params, std::span<const double> grads, std::span<double> velocity, double lr,
              double momentum, double weight_decay) {
  if (grads.size() != params.size() || velocity.size() != params.size()) {
    throw std::invalid_argument("sgd_step: parameter, gradient and velocity sizes differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grads[i] + weight_decay * params[i];
    params[i] -= lr * velocity[i];
  }
}

void Sgd::step(const NamedTensors& params, double lr) {
  for (const auto& [name, t] : params) {
    Tensor p = t;
    if (!p.has_grad()) continue;
    auto& v = velocity_[name];
    if (v.empty()) v.assign(p.size(), 0.0);
    const std::vector<double> g(p.grad().begin(), p.grad().end());
    sgd_step(p.mutable_data(), g, v, lr, momentum_, weight_decay_);
    p.zero_grad();
  }
}

std::size_t planned_steps(const TrainConfig& cfg, std::size_t n) {
  if (cfg.steps > 0) return cfg.steps;
  const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  return std::max<std::size_t>(1, cfg.epochs * per_epoch);
}

ModelPair initial_model(const TrainConfig& cfg) {
  if (!cfg.init_checkpoint.empty()) {
    ModelPair m = load_model(cfg.init_checkpoint);
    m.momentum = cfg.ema_momentum;
    return m;
  }
  Rng rng(cfg.seed);
  return init_model(cfg.model, rng.derive_seed(), cfg.ema_momentum);
}

namespace {

// Cycles through shuffled epochs of the samples that have proposals.
class BatchStream {
 public:
  BatchStream(std::vector<std::size_t> usable, Rng& rng) : usable_(std::move(usable)), rng_(rng) {}

  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    while (out.size() < batch) {
      if (pos_ == order_.size()) {
        order_.clear();
        for (std::size_t k : rng_.sample_without_replacement(usable_.size(), usable_.size())) order_.push_back(usable_[k]);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::vector<std::size_t> usable_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  Rng& rng_;
};

std::vector<Box> sample_proposals(const std::vector<Box>& props, std::size_t k, Rng& rng) {
  std::vector<Box> out;
  if (props.size() >= k) {
    for (std::size_t i : rng.sample_without_replacement(props.size(), k)) out.push_back(props[i]);
  } else {
    for (std::size_t i = 0; i < k; ++i) out.push_back(props[rng.index(props.size())]);
  }
  return out;
}

std::vector<Box> to_view1_all(const std::vector<Box>& boxes, const Image& img, int size) {
  std::vector<Box> out;
  for (const Box& b : boxes) out.push_back(to_view1(b, img.width, img.height, size));
  return out;
}

struct Setup {
  std::vector<std::size_t> usable;
  std::size_t skipped = 0;
};

Setup prepare(const TrainConfig& cfg, std::span<const TrainSample> data) {
  if (cfg.k == 0) throw std::invalid_argument("train: k must be positive");
  Setup s;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].proposals.empty()) {
      ++s.skipped;
    } else {
      s.usable.push_back(i);
    }
  }
  if (s.usable.empty()) throw std::runtime_error("train: the proposal cache is empty for the whole corpus");
  return s;
}

Tensor rpn_term(const RpnHead& rpn, const FeaturePyramid& fp, const std::vector<Box>& gt_v1, Rng& rng,
                double lambda) {
  const RpnOutput out = rpn_forward(rpn, fp);
  const AnchorSet anchors = make_anchor_set(fp.image_h, fp.image_w, static_cast<int>(fp.levels.size()));
  const AnchorMatch match = match_anchors(anchors, gt_v1, rng);
  return rpn_loss(nn::sigmoid(out.logits), out.deltas, match, lambda);
}

}  // namespace

TrainResult train_joint(const TrainConfig& cfg, std::span<const TrainSample> data, ModelPair model,
                        const StepCallback& on_step) {
  const Setup setup = prepare(cfg, data);
  TrainResult result;
  result.skipped_images = setup.skipped;
  result.total_steps = planned_steps(cfg, setup.usable.size());
  model.momentum = cfg.ema_momentum;

  Rng rng(cfg.seed);
  rng.derive_seed();  // model initialisation stream
  BatchStream stream(setup.usable, rng);
  Sgd sgd(cfg.sgd_momentum, cfg.weight_decay);
  const NamedTensors params = online_parameters(model);
  for (const auto& [name, t] : params) Tensor(t).zero_grad();
  const double inv_batch = 1.0 / static_cast<double>(cfg.batch_size);
  const int size = cfg.views.size;

  for (std::size_t step = 0; step < result.total_steps; ++step) {
    const double lr = cosine_lr(step, result.total_steps, cfg.base_lr);
    StepRecord rec{step, 0.0, 0.0, lr};
    for (std::size_t idx : stream.next(cfg.batch_size)) {
      const TrainSample& sample = data[idx];
      const std::vector<Box> ss = sample_proposals(sample.proposals, cfg.k, rng);
      const std::uint64_t view_seed = rng.derive_seed();

      std::vector<Box> detector_boxes = ss;
      if (cfg.detector_proposals == DetectorProposals::kSsPlusRpn) {
        const std::size_t n_rpn = cfg.k / 2;
        detector_boxes.assign(ss.begin(), ss.begin() + static_cast<long>(cfg.k - n_rpn));
        std::vector<Box> from_rpn;
        {
          nn::NoGradGuard no_grad;
          const Image v1 = resize_bilinear(sample.image, size, size);
          from_rpn = rpn_propose(model.rpn, extract(model.online.f, v1), ProposalConfig{64, 0.7, n_rpn});
        }
        const double sx = static_cast<double>(sample.image.width) / size;
        const double sy = static_cast<double>(sample.image.height) / size;
        for (const Box& b : from_rpn) detector_boxes.push_back(Box(b.x1() * sx, b.y1() * sy, b.x2() * sx, b.y2() * sy));
        for (std::size_t i = detector_boxes.size(), j = 0; i < cfg.k; ++i, ++j) detector_boxes.push_back(ss[(cfg.k - n_rpn + j) % ss.size()]);
      }

      const ViewTriple views = make_views(sample.image, detector_boxes, view_seed, cfg.views);
      const ViewPyramids online_fp = extract_views(model.online.f, views, cfg.use_v3);

      Tensor det = Tensor::scalar(0.0);
      if (views.valid_count() > 0) {
        const ViewEmbeddings online = embed_views(online_fp, views, model.online, &model.predictor, model.config, cfg.use_v3);
        ViewEmbeddings target;
        {
          nn::NoGradGuard no_grad;
          const ViewPyramids target_fp = extract_views(model.target.f, views, cfg.use_v3);
          target = embed_views(target_fp, views, model.target, nullptr, model.config, cfg.use_v3);
        }
        det = det_loss(online, target).total;
      } else {
        warn("train_joint: no valid proposals in view triple, L_det set to 0");
      }

      const FeaturePyramid rpn_features =
          cfg.backbone_loss == BackboneLoss::kDetOnly ? detach(online_fp.v1) : online_fp.v1;
      const Tensor rpn = rpn_term(model.rpn, rpn_features, to_view1_all(sample.proposals, sample.image, size), rng, cfg.rpn_lambda);

      rec.loss_rpn += rpn.item() * inv_batch;
      rec.loss_det += det.item() * inv_batch;
      nn::scale(total_loss(rpn, det), inv_batch).backward();
    }
    sgd.step(params, lr);
    ema_update(model, cfg.ema_momentum);
    result.log.push_back(rec);
    if (on_step) on_step(rec, model);
  }
  result.model = std::move(model);
  return result;
}

TrainResult train_separate(const TrainConfig& cfg, std::span<const TrainSample> data, ModelPair model,
                           const StepCallback& on_step) {
  const Setup setup = prepare(cfg, data);
  TrainResult result;
  result.skipped_images = setup.skipped;
  result.total_steps = planned_steps(cfg, setup.usable.size());

  Rng rng(cfg.seed);
  const std::uint64_t rpn_seed = rng.derive_seed();
  if (cfg.reset_rpn) model.rpn = init_model(model.config, rpn_seed, model.momentum).rpn;
  BatchStream stream(setup.usable, rng);
  Sgd sgd(cfg.sgd_momentum, cfg.weight_decay);
  const NamedTensors params = rpn_parameters(model.rpn, "online.rpn");
  for (const auto& [name, t] : params) Tensor(t).zero_grad();
  const double inv_batch = 1.0 / static_cast<double>(cfg.batch_size);
  const int size = cfg.views.size;

  for (std::size_t step = 0; step < result.total_steps; ++step) {
    const double lr = cosine_lr(step, result.total_steps, cfg.base_lr);
    StepRecord rec{step, 0.0, 0.0, lr};
    for (std::size_t idx : stream.next(cfg.batch_size)) {
      const TrainSample& sample = data[idx];
      const std::vector<Box> ss = sample_proposals(sample.proposals, cfg.k, rng);
      const std::uint64_t view_seed = rng.derive_seed();
      Image v1 = resize_bilinear(sample.image, size, size);
      if (cfg.views.apply_photometric) v1 = photometric(v1, view_seed, cfg.views.photometric);
      FeaturePyramid fp;
      {
        nn::NoGradGuard no_grad;
        fp = extract(model.online.f, v1);
      }
      const Tensor rpn = rpn_term(model.rpn, fp, to_view1_all(sample.proposals, sample.image, size), rng, cfg.rpn_lambda);
      rec.loss_rpn += rpn.item() * inv_batch;
      nn::scale(rpn, inv_batch).backward();
    }
    sgd.step(params, lr);
    result.log.push_back(rec);
    if (on_step) on_step(rec, model);
  }
  result.model = std::move(model);
  return result;
}

void write_run_log(std::ostream& os, const TrainResult& result) {
  os << "# step loss_rpn loss_det lr\n";
  char buf[128];
  for (const StepRecord& r : result.log) {
    std::snprintf(buf, sizeof(buf), "%zu %.17g %.17g %.17g\n", r.step, r.loss_rpn, r.loss_det, r.lr);
    os << buf;
  }
  os << "# skipped_images=" << result.skipped_images << '\n';
}

}  // namespace selfdet
