#include "selfdet/commands.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <thread>

#include "selfdet/corpus.hpp"
#include "selfdet/log.hpp"
#include "selfdet/losses.hpp"
#include "selfdet/random.hpp"
#include "selfdet/views.hpp"

namespace selfdet {

namespace fs = std::filesystem;
using nn::Tensor;

std::size_t thread_count() {
  const char* env = std::getenv("SELFDET_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) {
    warn(std::string("ignoring invalid SELFDET_THREADS=") + env);
    return 1;
  }
  return static_cast<std::size_t>(v);
}

namespace {

// Calls fn(i) for i in [0, n) on `workers` threads; fn must only touch slot i.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

std::vector<Box> agnostic(const std::vector<Box>& boxes) {
  std::vector<Box> out;
  for (const Box& b : boxes) out.push_back(b.with_class(0));
  return out;
}

}  // namespace

std::vector<std::vector<Box>> model_detections(const ModelPair& model, std::span<const Image> images,
                                               const EvalConfig& cfg) {
  std::vector<std::vector<Box>> out(images.size());
  const Extractor& f = cfg.use_target ? model.target.f : model.online.f;
  const int size = cfg.view_size;
  for (std::size_t i = 0; i < images.size(); ++i) {
    nn::NoGradGuard no_grad;
    const Image& img = images[i];
    const FeaturePyramid fp = extract(f, resize_bilinear(img, size, size));
    const double sx = static_cast<double>(img.width) / size;
    const double sy = static_cast<double>(img.height) / size;
    for (const Box& b : rpn_propose(model.rpn, fp, ProposalConfig{64, 0.7, cfg.k})) {
      Box mapped(b.x1() * sx, b.y1() * sy, b.x2() * sx, b.y2() * sy);
      out[i].push_back(mapped.with_score(b.score.value_or(0.0)).with_class(0));
    }
  }
  return out;
}

EvalResult evaluate_detections(std::span<const std::vector<Box>> detections, std::span<const std::vector<Box>> gt,
                               const EvalConfig& cfg) {
  if (detections.size() != gt.size()) throw std::invalid_argument("evaluate: image counts differ");
  std::vector<ImageResult> results;
  for (std::size_t i = 0; i < gt.size(); ++i) results.push_back({agnostic(detections[i]), agnostic(gt[i])});
  EvalResult r;
  r.recall = proposal_recall(detections, gt, cfg.iou_thresh);
  StratifyConfig s = cfg.stratify;
  s.fg_thresh = cfg.iou_thresh;
  r.errors = stratify_errors(results, s);
  r.curve = pr_curve(results, 0, cfg.iou_thresh);
  return r;
}

EvalResult evaluate_model(const ModelPair& model, std::span<const Image> images, std::span<const std::vector<Box>> gt,
                          const EvalConfig& cfg) {
  const auto dets = model_detections(model, images, cfg);
  return evaluate_detections(dets, gt, cfg);
}

// ---- gradient suite ------------------------------------------------------

namespace {

Tensor random_tensor(nn::Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(nn::numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_data(std::move(shape), std::move(v), true);
}

// Scalar <w, x> with fixed random weights, so every output element matters.
Tensor project(const Tensor& x, const Tensor& w) {
  return nn::sum(nn::mul(nn::reshape(x, {static_cast<int>(x.size())}), w));
}

Tensor weights_for(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor::from_data({static_cast<int>(n)}, std::move(v));
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.stem_width = 4;
  c.stage_widths = {4, 4, 6, 6};
  c.fpn_dim = 4;
  c.head_hidden = 8;
  c.proj_hidden = 8;
  c.embed_dim = 4;
  c.pool_size = 3;
  return c;
}

}  // namespace

std::vector<nn::GradCheckReport> run_gradcheck_suite(const GradcheckSuiteOptions& options) {
  nn::set_backward_fault(options.fault_op);
  struct FaultReset {
    ~FaultReset() { nn::set_backward_fault(""); }
  } reset;
  const bool silenced = warnings_silenced();
  warnings_silenced() = true;

  Rng rng(options.seed);
  const nn::GradCheckOptions& opt = options.check;
  nn::GradCheckOptions sampled = opt;
  if (sampled.max_coordinates_per_input == 0) sampled.max_coordinates_per_input = 48;
  std::vector<nn::GradCheckReport> reports;

  {
    Tensor x = random_tensor({40}, rng, -3.0, 3.0);
    Tensor w = weights_for(40, rng);
    reports.push_back(nn::gradient_check("smooth_l1", [=] { return project(nn::smooth_l1(x), w); }, {x}, opt));
  }
  {
    Tensor z = random_tensor({24}, rng, -4.0, 4.0);
    std::vector<double> y(24);
    for (double& v : y) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
    std::vector<double> not_y(24);
    for (std::size_t i = 0; i < 24; ++i) not_y[i] = 1.0 - y[i];
    const Tensor yt = Tensor::from_data({24}, y), nt = Tensor::from_data({24}, not_y);
    reports.push_back(nn::gradient_check("log_loss", [=] {
      const Tensor p = nn::sigmoid(z);
      const Tensor ll = nn::add(nn::sum(nn::mul(nn::log(p), yt)),
                                nn::sum(nn::mul(nn::log(nn::add_scalar(nn::scale(p, -1.0), 1.0)), nt)));
      return nn::scale(ll, -1.0 / 24.0);
    }, {z}, opt));
  }
  {
    const AnchorSet anchors = make_anchor_set(64, 64, 2);
    const std::vector<Box> gt = {Box(4, 6, 30, 28), Box(30, 20, 60, 58)};
    Rng match_rng(rng.derive_seed());
    const AnchorMatch match = match_anchors(anchors, gt, match_rng, {0.7, 0.3, 64, 32});
    const int n = static_cast<int>(anchors.size());
    Tensor logits = random_tensor({n}, rng, -2.0, 2.0);
    Tensor deltas = random_tensor({4 * n}, rng, -0.5, 0.5);
    // Push the positives' deltas near their targets so both smooth-L1 branches appear.
    auto dv = deltas.mutable_data();
    for (std::size_t a : match.sampled)
      if (match.labels[a] == 1)
        for (std::size_t k = 0; k < 4; ++k) dv[4 * a + k] += match.targets[a][k] + (k % 2 ? 0.0 : 1.5);
    reports.push_back(nn::gradient_check("rpn_loss", [=] {
      return rpn_loss(nn::sigmoid(logits), deltas, match, 1.0);
    }, {logits, deltas}, sampled));
  }
  {
    Tensor v = random_tensor({3, 8}, rng), t1 = random_tensor({3, 8}, rng), t2 = random_tensor({3, 8}, rng);
    const std::vector<bool> valid = {true, false, true};
    reports.push_back(nn::gradient_check("sim_loss", [=] { return sim_loss(v, t1, t2, valid); }, {v}, opt));
  }
  {
    Tensor o1 = random_tensor({3, 6}, rng), o2 = random_tensor({3, 6}, rng), o3 = random_tensor({3, 6}, rng);
    const ViewEmbeddings target{nn::detach(random_tensor({3, 6}, rng)), nn::detach(random_tensor({3, 6}, rng)),
                                nn::detach(random_tensor({3, 6}, rng))};
    reports.push_back(nn::gradient_check("det_loss_embeddings", [=] {
      return det_loss(ViewEmbeddings{o1, o2, o3}, target).total;
    }, {o1, o2, o3}, opt));
  }

  // Network-level L_det and the total loss on a tiny model and 64 px views.
  {
    const ModelPair pair = init_model(tiny_model(), rng.derive_seed(), 0.9);
    SynthConfig sc;
    sc.size = 64;
    sc.min_extent = 20;
    sc.max_extent = 36;
    sc.max_objects = 3;
    const SynthImage s = synth_image(rng.derive_seed(), sc);
    ViewConfig vc;
    vc.size = 64;
    vc.apply_photometric = false;
    const ViewTriple views = make_views_with_crop(s.image, s.boxes, CropRect{4, 4, 60, 60}, rng.derive_seed(), vc);
    std::vector<Box> gt_v1;
    for (const Box& b : s.boxes) gt_v1.push_back(to_view1(b, 64, 64, 64));
    const AnchorSet anchors = make_anchor_set(64, 64, 4);
    Rng match_rng(rng.derive_seed());
    const AnchorMatch match = match_anchors(anchors, gt_v1, match_rng, {0.7, 0.3, 64, 32});

    const std::vector<Tensor> det_inputs = {pair.online.g.fc1.weight, pair.online.f.stages[1][0].weight,
                                            pair.predictor.out.weight};
    reports.push_back(nn::gradient_check("det_loss", [=] { return det_loss(views, pair).total; }, det_inputs, sampled));

    const std::vector<Tensor> total_inputs = {pair.rpn.shared.weight, pair.rpn.deltas.weight, pair.online.f.stem.weight,
                                              pair.online.p.hidden.weight};
    reports.push_back(nn::gradient_check("total_loss", [=] {
      const ViewPyramids fp = extract_views(pair.online.f, views);
      const RpnOutput out = rpn_forward(pair.rpn, fp.v1);
      const Tensor rpn = rpn_loss(nn::sigmoid(out.logits), out.deltas, match, 1.0);
      return total_loss(rpn, det_loss(views, pair).total);
    }, total_inputs, sampled));
  }

  // Layer families.
  {
    Tensor x = random_tensor({3, 7, 7}, rng), w = random_tensor({4, 3, 3, 3}, rng), b = random_tensor({4}, rng);
    Tensor p = weights_for(4 * 7 * 7, rng), q = weights_for(4 * 4 * 4, rng);
    reports.push_back(nn::gradient_check("conv2d", [=] { return project(nn::conv2d(x, w, b, 1, 1), p); }, {x, w, b}, opt));
    reports.push_back(nn::gradient_check("conv2d_stride2", [=] { return project(nn::conv2d(x, w, b, 2, 1), q); }, {x, w, b}, opt));
    Tensor w1 = random_tensor({2, 3, 1, 1}, rng);
    Tensor r = weights_for(2 * 7 * 7, rng);
    reports.push_back(nn::gradient_check("conv2d_1x1", [=] { return project(nn::conv2d(x, w1, Tensor(), 1, 0), r); }, {x, w1}, opt));
  }
  {
    Tensor x = random_tensor({2, 6, 6}, rng);
    Tensor p = weights_for(2 * 3 * 3, rng);
    reports.push_back(nn::gradient_check("max_pool2d", [=] { return project(nn::max_pool2d(x), p); }, {x}, opt));
    Tensor u = weights_for(2 * 12 * 12, rng);
    reports.push_back(nn::gradient_check("upsample_nearest2x", [=] { return project(nn::upsample_nearest2x(x), u); }, {x}, opt));
  }
  {
    Tensor l0 = random_tensor({3, 8, 8}, rng), l1 = random_tensor({3, 4, 4}, rng);
    const std::vector<nn::RoiRequest> rois = {{0, 0.7, 1.3, 5.9, 6.2}, {1, 0.2, 0.4, 3.1, 2.7}, {0, -0.8, 3.0, 7.9, 8.6}};
    Tensor p = weights_for(3 * 3 * 3 * 3, rng);
    reports.push_back(nn::gradient_check("roi_align", [=] {
      const Tensor levels[2] = {l0, l1};
      return project(nn::roi_align(levels, rois, 3, 2), p);
    }, {l0, l1}, opt));
    const std::vector<std::array<double, 2>> pts = {{0.3, 0.9}, {5.5, 2.25}, {7.2, 7.4}, {-0.4, 3.3}};
    Tensor s = weights_for(3 * 4, rng);
    reports.push_back(nn::gradient_check("bilinear_sample", [=] { return project(nn::bilinear_sample(l0, pts), s); }, {l0}, opt));
  }
  {
    Tensor x = random_tensor({4, 5}, rng);
    Tensor p = weights_for(20, rng);
    reports.push_back(nn::gradient_check("l2_normalize", [=] { return project(nn::l2_normalize(x, 1), p); }, {x}, opt));
    reports.push_back(nn::gradient_check("l2_normalize_axis0", [=] { return project(nn::l2_normalize(x, 0), p); }, {x}, opt));
  }
  {
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 5}, rng), bias = random_tensor({5}, rng);
    Tensor p = weights_for(15, rng);
    reports.push_back(nn::gradient_check("linear", [=] {
      return project(nn::relu(nn::add_row_bias(nn::matmul(a, b), bias)), p);
    }, {a, b, bias}, opt));
    Tensor z = random_tensor({3, 5}, rng, -2.0, 2.0);
    reports.push_back(nn::gradient_check("softmax", [=] { return project(nn::softmax(z), p); }, {z}, opt));
  }

  warnings_silenced() = silenced;
  return reports;
}

int cmd_gradcheck(const GradcheckSuiteOptions& o, std::ostream& out, std::ostream& err) {
  if (!o.fault_op.empty()) out << "injected backward fault: " << o.fault_op << '\n';
  const auto reports = run_gradcheck_suite(o);
  std::size_t failed = 0, excluded = 0;
  double worst = 0.0;
  for (const auto& r : reports) {
    out << r.summary() << '\n';
    failed += r.passed ? 0 : 1;
    excluded += r.kink_excluded;
    worst = std::max(worst, r.max_relative_error);
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf), "gradcheck: %zu checks, %zu failed, max_rel=%.3e, kink_excluded=%zu, tolerance=%.1e",
                reports.size(), failed, worst, excluded, o.check.tolerance);
  out << buf << '\n';
  for (const auto& r : reports) {
    if (!r.passed) err << "gradient mismatch in " << r.name << '\n';
  }
  return failed == 0 ? kExitOk : kExitFailure;
}

// ---- propose, synth ------------------------------------------------------

int cmd_propose(const ProposeOptions& o, std::ostream& out, std::ostream& err) {
  o.params.validate();
  const std::vector<CorpusEntry> corpus = list_corpus(o.corpus);
  fs::create_directories(o.cache);
  std::vector<std::size_t> counts(corpus.size(), 0);
  std::vector<char> failed(corpus.size(), 0);
  parallel_for(corpus.size(), thread_count(), [&](std::size_t i) {
    Image img;
    try {
      img = read_ppm(corpus[i].image_path);
    } catch (const std::exception& ex) {
      failed[i] = 1;
      return;
    }
    const std::vector<Box> boxes = propose(img, o.params);
    counts[i] = boxes.size();
    save_boxes(proposal_path(o.cache, corpus[i].stem), boxes);
  });
  ProposeSummary summary;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    ++summary.images;
    if (failed[i]) {
      ++summary.failed;
      err << "warning: skipping unreadable image " << corpus[i].image_path << '\n';
    }
    summary.proposals += counts[i];
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf), "propose: images=%zu failed=%zu proposals=%zu mean_per_image=%.3f",
                summary.images, summary.failed, summary.proposals, summary.mean_per_image());
  out << buf << '\n';
  if (summary.images > 0 && summary.failed == summary.images) {
    err << "error: no image in " << o.corpus << " could be read\n";
    return kExitFailure;
  }
  return kExitOk;
}

int cmd_synth(const SynthOptions& o, std::ostream& out, std::ostream&) {
  write_synth_corpus(o.out_dir, o.n, o.seed, {}, o.first_index);
  out << "synth: wrote " << o.n << " images to " << o.out_dir << '\n';
  return kExitOk;
}

// ---- pretrain ------------------------------------------------------------

std::vector<TrainSample> load_training_data(const std::string& corpus_dir, const std::string& cache) {
  const std::vector<CorpusEntry> corpus = list_corpus(corpus_dir);
  if (corpus.empty()) throw std::runtime_error("corpus " + corpus_dir + " contains no .ppm images");
  if (!fs::is_directory(cache)) throw std::runtime_error("proposal cache not found: " + cache);
  const auto proposals = load_proposal_cache(corpus, cache);
  std::vector<TrainSample> data;
  for (std::size_t i = 0; i < corpus.size(); ++i) data.push_back({read_ppm(corpus[i].image_path), proposals[i]});
  return data;
}

namespace {

void validate_paths(const TrainConfig& cfg) {
  if (cfg.corpus.empty()) throw ConfigError("config: corpus is required", {"corpus"});
  if (cfg.proposal_cache.empty()) throw ConfigError("config: proposal_cache is required", {"proposal_cache"});
  if (cfg.checkpoint.empty()) throw ConfigError("config: checkpoint is required", {"checkpoint"});
  if (cfg.strategy == Strategy::kSeparate) {
    if (cfg.base_checkpoint.empty()) {
      throw std::runtime_error("separate training needs base_checkpoint (a frozen extractor and head)");
    }
    if (!fs::exists(cfg.base_checkpoint)) throw std::runtime_error("base checkpoint not found: " + cfg.base_checkpoint);
  }
}

bool finite_log(const TrainResult& r) {
  for (const StepRecord& s : r.log)
    if (!std::isfinite(s.loss_rpn) || !std::isfinite(s.loss_det)) return false;
  return true;
}

double mean_det(const TrainResult& r, std::size_t from, std::size_t to) {
  double s = 0.0;
  for (std::size_t i = from; i < to; ++i) s += r.log[i].loss_det;
  return to > from ? s / static_cast<double>(to - from) : 0.0;
}

}  // namespace

TrainResult run_pretrain(const TrainConfig& cfg, std::ostream& out) {
  validate_paths(cfg);
  const std::vector<TrainSample> data = load_training_data(cfg.corpus, cfg.proposal_cache);
  const StepCallback snapshot = [&](const StepRecord& rec, const ModelPair& model) {
    if (cfg.snapshot_every > 0 && (rec.step + 1) % cfg.snapshot_every == 0) {
      save_model(cfg.checkpoint + ".step" + std::to_string(rec.step + 1), model);
    }
  };
  TrainResult result = cfg.strategy == Strategy::kJoint
                           ? train_joint(cfg, data, initial_model(cfg), snapshot)
                           : train_separate(cfg, data, load_model(cfg.base_checkpoint), snapshot);
  const fs::path parent = fs::path(cfg.checkpoint).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  save_model(cfg.checkpoint, result.model);
  const std::string log_path = cfg.log.empty() ? cfg.checkpoint + ".log" : cfg.log;
  std::ofstream log(log_path);
  if (!log) throw std::runtime_error("cannot write run log " + log_path);
  write_run_log(log, result);

  char buf[200];
  const StepRecord last = result.log.empty() ? StepRecord{} : result.log.back();
  std::snprintf(buf, sizeof(buf), "pretrain: strategy=%s steps=%zu skipped_images=%zu final loss_rpn=%.6f loss_det=%.6f",
                to_string(cfg.strategy), result.total_steps, result.skipped_images, last.loss_rpn, last.loss_det);
  out << buf << '\n' << "checkpoint: " << cfg.checkpoint << "\nlog: " << log_path << '\n';
  return result;
}

int cmd_pretrain(const PretrainOptions& o, std::ostream& out, std::ostream& err) {
  TrainConfig cfg = o.config.empty() ? TrainConfig{} : load_train_config(o.config);
  apply_overrides(cfg, o.overrides);
  if (o.ablation_dir.empty()) {
    const TrainResult r = run_pretrain(cfg, out);
    if (!finite_log(r)) {
      err << "error: non-finite loss encountered\n";
      return kExitFailure;
    }
    return kExitOk;
  }

  fs::create_directories(o.ablation_dir);
  bool all_finite = true;
  out << "ablation: strategy=joint steps=" << cfg.steps << '\n';
  std::vector<std::string> rows;
  for (BackboneLoss loss : {BackboneLoss::kDetOnly, BackboneLoss::kDetPlusRpn}) {
    for (DetectorProposals props : {DetectorProposals::kSs, DetectorProposals::kSsPlusRpn}) {
      TrainConfig run = cfg;
      run.strategy = Strategy::kJoint;
      run.backbone_loss = loss;
      run.detector_proposals = props;
      const std::string name = std::string(to_string(loss)) + "_" + to_string(props);
      run.checkpoint = (fs::path(o.ablation_dir) / (name + ".ckpt")).string();
      run.log = (fs::path(o.ablation_dir) / (name + ".log")).string();
      const TrainResult r = run_pretrain(run, out);
      const bool finite = finite_log(r);
      all_finite = all_finite && finite;
      const std::size_t n = r.log.size(), w = std::max<std::size_t>(1, std::min<std::size_t>(10, n / 2));
      char buf[200];
      std::snprintf(buf, sizeof(buf), "%-26s finite=%s det_first=%.4f det_last=%.4f", name.c_str(),
                    finite ? "yes" : "no", mean_det(r, 0, w), mean_det(r, n - w, n));
      rows.push_back(buf);
    }
  }
  for (const auto& row : rows) out << row << '\n';
  return all_finite ? kExitOk : kExitFailure;
}

// ---- evaluate ------------------------------------------------------------

int cmd_evaluate(const EvaluateOptions& o, std::ostream& out, std::ostream& err) {
  const std::vector<CorpusEntry> corpus = list_corpus(o.corpus);
  if (corpus.empty()) {
    err << "error: corpus " << o.corpus << " contains no .ppm images\n";
    return kExitFailure;
  }
  const auto gt = load_annotations(corpus);
  std::vector<std::vector<Box>> dets;
  if (!o.detections.empty()) {
    std::ifstream is(o.detections);
    if (!is) throw std::runtime_error("cannot read detections " + o.detections);
    std::vector<std::string> ids;
    for (const CorpusEntry& e : corpus) ids.push_back(e.stem);
    dets = read_detections(is, ids);
  } else {
    const ModelPair model = load_model(o.checkpoint);
    std::vector<Image> images;
    for (const CorpusEntry& e : corpus) images.push_back(read_ppm(e.image_path));
    dets = model_detections(model, images, o.eval);
  }
  const EvalResult r = evaluate_detections(dets, gt, o.eval);
  char buf[128];
  std::snprintf(buf, sizeof(buf), "images=%zu proposal_recall@%.2f=%.6f", corpus.size(), o.eval.iou_thresh, r.recall);
  out << buf << '\n' << r.errors.table();
  std::snprintf(buf, sizeof(buf), "recall=%.17g\n", r.recall);
  const std::string kv = std::string(buf) + r.errors.key_values();
  out << kv;
  if (!o.report.empty()) {
    std::ofstream rep(o.report);
    if (!rep) throw std::runtime_error("cannot write report " + o.report);
    rep << kv;
  }
  if (!o.svg.empty()) write_pr_svg(o.svg, {{"class-agnostic", r.curve}});
  return kExitOk;
}

}  // namespace selfdet
