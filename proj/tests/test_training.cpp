#include <cmath>
#include <numeric>
#include <sstream>

#include "doctest.h"
#include "selfdet/corpus.hpp"
#include "selfdet/training.hpp"

using namespace selfdet;

namespace {

std::vector<double> values(const nn::Tensor& t) { return {t.data().begin(), t.data().end()}; }

std::vector<std::vector<double>> snapshot(const NamedTensors& ts) {
  std::vector<std::vector<double>> out;
  for (const auto& [name, t] : ts) out.push_back(values(t));
  return out;
}

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.model.stem_width = 4;
  cfg.model.stage_widths = {4, 8, 8, 8};
  cfg.model.fpn_dim = 8;
  cfg.model.head_hidden = 16;
  cfg.model.proj_hidden = 16;
  cfg.model.embed_dim = 8;
  cfg.views.size = 64;
  cfg.batch_size = 2;
  cfg.steps = 3;
  cfg.base_lr = 0.05;
  cfg.seed = 5;
  return cfg;
}

// Synthetic images with their annotations standing in for cached proposals.
std::vector<TrainSample> small_data(std::size_t n, std::uint64_t seed = 1) {
  std::vector<TrainSample> data;
  for (std::size_t i = 0; i < n; ++i) {
    SynthImage s = synth_image(seed * 1000 + i);
    data.push_back({std::move(s.image), std::move(s.boxes)});
  }
  return data;
}

}  // namespace

TEST_CASE("cosine_lr examples") {
  CHECK(cosine_lr(0, 100, 0.1) == doctest::Approx(0.1));
  CHECK(cosine_lr(100, 100, 0.1) == doctest::Approx(0.0));
  CHECK(cosine_lr(50, 100, 0.1) == doctest::Approx(0.05));
  double prev = 1.0;
  for (std::size_t s = 0; s <= 40; ++s) {
    CHECK(cosine_lr(s, 40, 0.1) <= prev);
    prev = cosine_lr(s, 40, 0.1);
  }
  CHECK_THROWS_AS(cosine_lr(5, 4, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(cosine_lr(0, 0, 0.1), std::invalid_argument);
}

TEST_CASE("sgd_step examples") {
  std::vector<double> p{1.0, -2.0}, g{0.0, 0.0}, v{0.0, 0.0};
  sgd_step(p, g, v, 0.1);
  CHECK(p == std::vector<double>{1.0, -2.0});

  std::vector<double> s{3.0}, gs{1.0}, vs{0.0};
  sgd_step(s, gs, vs, 0.1, 0.0);
  CHECK(s[0] == doctest::Approx(2.9));

  // Momentum accumulates: v1 = g, v2 = mu g + g.
  std::vector<double> m{0.0}, gm{1.0}, vm{0.0};
  sgd_step(m, gm, vm, 0.1, 0.9);
  sgd_step(m, gm, vm, 0.1, 0.9);
  CHECK(m[0] == doctest::Approx(-0.1 - 0.19));

  std::vector<double> w{2.0}, gw{0.0}, vw{0.0};
  sgd_step(w, gw, vw, 0.5, 0.0, 0.1);
  CHECK(w[0] == doctest::Approx(1.9));

  std::vector<double> bad(3);
  CHECK_THROWS_AS(sgd_step(p, bad, v, 0.1), std::invalid_argument);
}

TEST_CASE("config parsing") {
  std::istringstream good("# comment\nstrategy = separate\nsteps=12\nbase_lr=0.02\nphotometric=false\n\n");
  const TrainConfig c = parse_train_config(good);
  CHECK(c.strategy == Strategy::kSeparate);
  CHECK(c.steps == 12);
  CHECK(c.base_lr == 0.02);
  CHECK_FALSE(c.views.apply_photometric);

  std::istringstream bad("stratgy=joint\nsteps=abc\nbatch_size=4\nnot a pair\n");
  try {
    parse_train_config(bad);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.keys() == std::vector<std::string>{"stratgy", "steps", "not a pair"});
    CHECK(std::string(e.what()).find("stratgy") != std::string::npos);
  }

  TrainConfig o;
  apply_overrides(o, {"seed=9", "backbone_loss=det_plus_rpn"});
  CHECK(o.seed == 9);
  CHECK(o.backbone_loss == BackboneLoss::kDetPlusRpn);
  CHECK_THROWS_AS(apply_overrides(o, {"view_size=100"}), ConfigError);

  std::istringstream again(format_train_config(o));
  const TrainConfig round = parse_train_config(again);
  CHECK(format_train_config(round) == format_train_config(o));
}

TEST_CASE("planned steps") {
  TrainConfig c;
  c.batch_size = 8;
  c.epochs = 2;
  CHECK(planned_steps(c, 20) == 6);
  c.steps = 11;
  CHECK(planned_steps(c, 20) == 11);
}

TEST_CASE("joint training: ema exactness and finite losses") {
  const auto data = small_data(4);
  TrainConfig cfg = small_config();
  ModelPair start = initial_model(cfg);
  std::vector<std::vector<double>> prev_target = snapshot(target_parameters(start));
  double worst = 0.0;
  std::size_t calls = 0;
  const TrainResult r = train_joint(cfg, data, clone_model(start), [&](const StepRecord& rec, const ModelPair& m) {
    CHECK(std::isfinite(rec.loss_det));
    CHECK(std::isfinite(rec.loss_rpn));
    CHECK(rec.lr == doctest::Approx(cosine_lr(rec.step, cfg.steps, cfg.base_lr)));
    const auto online = online_parameters(m);
    const auto target = target_parameters(m);
    for (std::size_t i = 0; i < target.size(); ++i) {
      REQUIRE(online[i].first.substr(6) == target[i].first.substr(6));
      for (std::size_t j = 0; j < target[i].second.size(); ++j) {
        const double expect = cfg.ema_momentum * prev_target[i][j] + (1.0 - cfg.ema_momentum) * online[i].second.data()[j];
        worst = std::max(worst, std::abs(target[i].second.data()[j] - expect));
      }
    }
    prev_target = snapshot(target);
    ++calls;
  });
  CHECK(calls == 3);
  CHECK(r.log.size() == 3);
  CHECK(worst <= 1e-15);
}

TEST_CASE("det_only stops the RPN loss at the features") {
  const auto data = small_data(2);
  TrainConfig cfg = small_config();
  cfg.steps = 1;
  const ModelPair a = initial_model(cfg);
  ModelPair b = clone_model(a);
  // A different RPN changes L_RPN but not L_det.
  b.rpn = init_model(cfg.model, 999).rpn;

  auto extractor_after = [&](BackboneLoss loss, const ModelPair& m) {
    TrainConfig c = cfg;
    c.backbone_loss = loss;
    const TrainResult r = train_joint(c, data, clone_model(m));
    return std::pair{snapshot(extractor_parameters(r.model.online.f, "f")), r.log[0]};
  };
  const auto [fa, la] = extractor_after(BackboneLoss::kDetOnly, a);
  const auto [fb, lb] = extractor_after(BackboneLoss::kDetOnly, b);
  CHECK(la.loss_rpn != lb.loss_rpn);
  CHECK(la.loss_det == lb.loss_det);
  CHECK(fa == fb);

  const auto [ga, ma] = extractor_after(BackboneLoss::kDetPlusRpn, a);
  const auto [gb, mb] = extractor_after(BackboneLoss::kDetPlusRpn, b);
  CHECK(ga != gb);
}

TEST_CASE("separate training only moves the RPN") {
  const auto data = small_data(3);
  TrainConfig cfg = small_config();
  cfg.strategy = Strategy::kSeparate;
  const ModelPair base = initial_model(cfg);
  const TrainResult r = train_separate(cfg, data, clone_model(base));
  CHECK(snapshot(extractor_parameters(r.model.online.f, "f")) == snapshot(extractor_parameters(base.online.f, "f")));
  CHECK(snapshot(head_parameters(r.model.online.g, "g")) == snapshot(head_parameters(base.online.g, "g")));
  CHECK(snapshot(mlp_parameters(r.model.predictor, "q")) == snapshot(mlp_parameters(base.predictor, "q")));
  CHECK(snapshot(target_parameters(r.model)) == snapshot(target_parameters(base)));
  CHECK(snapshot(rpn_parameters(r.model.rpn, "rpn")) != snapshot(rpn_parameters(base.rpn, "rpn")));
  for (const StepRecord& rec : r.log) {
    CHECK(std::isfinite(rec.loss_rpn));
    CHECK(rec.loss_det == 0.0);
  }
}

TEST_CASE("images without proposals are skipped; an empty cache is an error") {
  auto data = small_data(3);
  data[1].proposals.clear();
  TrainConfig cfg = small_config();
  cfg.steps = 1;
  const TrainResult r = train_joint(cfg, data, initial_model(cfg));
  CHECK(r.skipped_images == 1);
  for (auto& s : data) s.proposals.clear();
  CHECK_THROWS_AS(train_joint(cfg, data, initial_model(cfg)), std::runtime_error);
}

TEST_CASE("training is bit-reproducible") {
  const auto data = small_data(3);
  TrainConfig cfg = small_config();
  cfg.detector_proposals = DetectorProposals::kSsPlusRpn;
  auto run = [&] {
    const TrainResult r = train_joint(cfg, data, initial_model(cfg));
    std::ostringstream log;
    write_run_log(log, r);
    return std::pair{log.str(), snapshot(all_parameters(r.model))};
  };
  const auto first = run();
  const auto second = run();
  CHECK(first.first == second.first);
  CHECK(first.second == second.second);
  CHECK(first.first.rfind("# step loss_rpn loss_det lr\n", 0) == 0);
}

TEST_CASE("all four loss/proposal configurations run") {
  const auto data = small_data(3);
  for (BackboneLoss loss : {BackboneLoss::kDetOnly, BackboneLoss::kDetPlusRpn}) {
    for (DetectorProposals props : {DetectorProposals::kSs, DetectorProposals::kSsPlusRpn}) {
      TrainConfig cfg = small_config();
      cfg.backbone_loss = loss;
      cfg.detector_proposals = props;
      const TrainResult r = train_joint(cfg, data, initial_model(cfg));
      for (const StepRecord& rec : r.log) {
        CHECK(std::isfinite(rec.loss_rpn));
        CHECK(std::isfinite(rec.loss_det));
      }
    }
  }
}

TEST_CASE("detector loss falls over 200 steps") {
  const auto data = small_data(64, 3);
  TrainConfig cfg = small_config();
  cfg.batch_size = 1;
  cfg.steps = 200;
  const TrainResult r = train_joint(cfg, data, initial_model(cfg));
  auto mean_det = [&](std::size_t from) {
    double s = 0.0;
    for (std::size_t i = from; i < from + 20; ++i) s += r.log[i].loss_det;
    return s / 20.0;
  };
  MESSAGE("leading L_det " << mean_det(0) << ", trailing L_det " << mean_det(180));
  CHECK(mean_det(180) < mean_det(0));
}
