#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "selfdet/evaluation.hpp"
#include "selfdet/random.hpp"

using namespace selfdet;

namespace {

Box det(double x1, double y1, double x2, double y2, double score, int cls = 0) {
  return Box(x1, y1, x2, y2).with_score(score).with_class(cls);
}

Box gt_box(double x1, double y1, double x2, double y2, int cls = 0) { return Box(x1, y1, x2, y2).with_class(cls); }

ImageResult image(std::vector<Box> dets, std::vector<Box> gt) { return {std::move(dets), std::move(gt)}; }

std::vector<ImageResult> random_scene(Rng& rng) {
  std::vector<ImageResult> images;
  for (int i = 0; i < 4; ++i) {
    ImageResult r;
    const int n_gt = 1 + static_cast<int>(rng.index(3));
    for (int g = 0; g < n_gt; ++g) {
      const double x = 60.0 * g + rng.uniform(0, 10), y = rng.uniform(0, 50);
      r.gt.push_back(gt_box(x, y, x + 40, y + 40, static_cast<int>(rng.index(2))));
    }
    const int n_det = static_cast<int>(rng.index(6));
    for (int d = 0; d < n_det; ++d) {
      const Box& near = r.gt[rng.index(r.gt.size())];
      const double jitter = rng.uniform(0, 30);
      r.detections.push_back(det(near.x1() + jitter, near.y1(), near.x2() + jitter, near.y2() + rng.uniform(0, 20),
                                 rng.uniform(), static_cast<int>(rng.index(2))));
    }
    if (rng.bernoulli(0.5)) r.detections.push_back(det(180, 180, 220, 220, rng.uniform()));
    images.push_back(std::move(r));
  }
  return images;
}

}  // namespace

TEST_CASE("AP fixtures") {
  const std::vector<ImageResult> perfect{image({det(0, 0, 10, 10, 1.0)}, {gt_box(0, 0, 10, 10)})};
  CHECK(average_precision(perfect) == 1.0);

  const std::vector<ImageResult> none{image({}, {gt_box(0, 0, 10, 10)})};
  CHECK(average_precision(none) == 0.0);

  const std::vector<ImageResult> extra{image({det(0, 0, 10, 10, 0.9), det(50, 50, 60, 60, 0.8)}, {gt_box(0, 0, 10, 10)})};
  CHECK(average_precision(extra) == 1.0);
  const PrCurve c = pr_curve(extra, 0);
  CHECK(c.precision == std::vector<double>{1.0, 0.5});
  CHECK(c.recall == std::vector<double>{1.0, 1.0});
}

TEST_CASE("AP matches a hand-computed curve") {
  // TP 0.9, FP 0.8, TP 0.7 against two gt: precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1.
  const std::vector<ImageResult> images{
      image({det(0, 0, 10, 10, 0.9), det(30, 30, 40, 40, 0.8), det(100, 0, 110, 10, 0.7)},
            {gt_box(0, 0, 10, 10), gt_box(100, 0, 110, 10)})};
  CHECK(average_precision(images) == doctest::Approx(0.5 * 1.0 + 0.5 * (2.0 / 3.0)).epsilon(1e-15));
  // Duplicates of a matched gt count as false positives.
  const std::vector<ImageResult> dup{image({det(0, 0, 10, 10, 0.9), det(0, 0, 10, 10, 0.95)}, {gt_box(0, 0, 10, 10)})};
  CHECK(pr_curve(dup, 0).precision == std::vector<double>{1.0, 0.5});
}

TEST_CASE("AP is invariant to monotone score rescaling") {
  Rng rng(1);
  for (int trial = 0; trial < 30; ++trial) {
    auto images = random_scene(rng);
    const double base = average_precision(images);
    for (auto& r : images)
      for (Box& d : r.detections) d.score = std::exp(3.0 * *d.score) - 0.5;
    CHECK(average_precision(images) == doctest::Approx(base).epsilon(1e-15));
  }
}

TEST_CASE("proposal recall examples") {
  const std::vector<Box> gt{Box(0, 0, 10, 10), Box(20, 20, 30, 30)};
  CHECK(proposal_recall(gt, gt) == 1.0);
  CHECK(proposal_recall(std::vector<Box>{Box(50, 50, 60, 60)}, gt) == 0.0);
  CHECK(proposal_recall(std::vector<Box>{Box(0, 0, 10, 11)}, gt) == 0.5);
  const std::vector<std::vector<Box>> props{{Box(0, 0, 10, 10)}, {}};
  const std::vector<std::vector<Box>> gts{{Box(0, 0, 10, 10)}, {Box(0, 0, 5, 5), Box(6, 6, 9, 9)}};
  CHECK(proposal_recall(props, gts) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("Loc example") {
  // IoU 0.4 with the only gt.
  const std::vector<ImageResult> images{image({det(0, 0, 10, 4, 0.9)}, {gt_box(0, 0, 10, 10)})};
  REQUIRE(iou(Box(0, 0, 10, 4), Box(0, 0, 10, 10)) == doctest::Approx(0.4));
  const auto fps = classify_false_positives(images);
  REQUIRE(fps.size() == 1);
  CHECK(fps[0].type == ErrorType::kLoc);
  const ErrorReport r = stratify_errors(images);
  CHECK(r.base_map == 0.0);
  CHECK(r.loc == doctest::Approx(1.0));
  CHECK(r.n_loc == 1);
}

TEST_CASE("Bkg example") {
  SUBCASE("background detection ranked first costs half the AP") {
    const std::vector<ImageResult> images{image({det(0, 0, 10, 10, 0.5), det(80, 80, 90, 90, 0.9)}, {gt_box(0, 0, 10, 10)})};
    const ErrorReport r = stratify_errors(images);
    CHECK(r.n_bkg == 1);
    CHECK(r.base_map == doctest::Approx(0.5));
    CHECK(r.bkg == doctest::Approx(0.5));
    CHECK(r.bkg == doctest::Approx(1.0 - r.base_map));
  }
  SUBCASE("ranked last it costs nothing") {
    const std::vector<ImageResult> images{image({det(0, 0, 10, 10, 0.9), det(80, 80, 90, 90, 0.5)}, {gt_box(0, 0, 10, 10)})};
    const ErrorReport r = stratify_errors(images);
    CHECK(r.n_bkg == 1);
    CHECK(r.bkg == 0.0);
  }
}

TEST_CASE("Cls, Dupe and Miss") {
  const std::vector<ImageResult> images{image(
      {det(0, 0, 10, 10, 0.9, 0), det(0, 0, 10, 10, 0.8, 0), det(40, 40, 50, 50, 0.7, 1)},
      {gt_box(0, 0, 10, 10, 0), gt_box(40, 40, 50, 50, 0), gt_box(100, 100, 120, 120, 1)})};
  const auto fps = classify_false_positives(images);
  REQUIRE(fps.size() == 2);
  CHECK(fps[0].type == ErrorType::kDupe);
  CHECK(fps[1].type == ErrorType::kCls);
  const ErrorReport r = stratify_errors(images);
  CHECK(r.n_dupe == 1);
  CHECK(r.n_cls == 1);
  CHECK(r.n_miss == 1);  // the class-1 gt nobody aimed at
  CHECK(r.false_neg > 0.0);
}

TEST_CASE("perfect detections give the zero report") {
  const std::vector<ImageResult> images{
      image({det(0, 0, 10, 10, 0.9), det(20, 20, 40, 40, 0.8, 1)}, {gt_box(0, 0, 10, 10), gt_box(20, 20, 40, 40, 1)}),
      image({det(5, 5, 50, 50, 0.7)}, {gt_box(5, 5, 50, 50)})};
  const ErrorReport r = stratify_errors(images);
  CHECK(r.base_map == 1.0);
  for (double v : {r.cls, r.loc, r.dupe, r.bkg, r.miss, r.false_pos, r.false_neg}) CHECK(v == 0.0);
  CHECK(r.n_cls + r.n_loc + r.n_dupe + r.n_bkg + r.n_miss == 0);
}

TEST_CASE("taxonomy is a partition and fixes never hurt") {
  Rng rng(7);
  for (int trial = 0; trial < 40; ++trial) {
    const auto images = random_scene(rng);
    const auto fps = classify_false_positives(images);
    std::size_t total_dets = 0;
    for (const auto& r : images) total_dets += r.detections.size();
    // Every detection is either a true positive or exactly one false positive.
    std::set<std::pair<std::size_t, std::size_t>> seen;
    for (const auto& fp : fps) CHECK(seen.insert({fp.image, fp.detection}).second);
    CHECK(fps.size() <= total_dets);

    const ErrorReport r = stratify_errors(images);
    CHECK(r.n_cls + r.n_loc + r.n_dupe + r.n_bkg == fps.size());
    for (double v : {r.cls, r.loc, r.dupe, r.bkg, r.miss, r.false_pos, r.false_neg}) CHECK(v >= -1e-12);
  }
}

TEST_CASE("report lists every category") {
  const ErrorReport r;
  const std::string t = r.table();
  for (const char* name : {"Cls", "Loc", "Dupe", "Bkg", "Miss", "FalsePos", "FalseNeg"})
    CHECK(t.find(name) != std::string::npos);
  CHECK(r.key_values().find("loc=") != std::string::npos);
}

TEST_CASE("detections file roundtrip") {
  const std::vector<std::string> ids{"a", "b"};
  const std::vector<std::vector<Box>> dets{{det(1, 2, 30, 40, 0.25)}, {det(0, 0, 5, 5, 0.5, 2), det(3, 3, 9, 9, 0.125)}};
  std::stringstream ss;
  write_detections(ss, ids, dets);
  const auto back = read_detections(ss, ids);
  REQUIRE(back.size() == 2);
  CHECK(back[0] == dets[0]);
  CHECK(back[1] == dets[1]);
  std::istringstream unknown("zz 0 0 1 1 0.5\n");
  CHECK_THROWS(read_detections(unknown, ids));
}

TEST_CASE("PR plot is written") {
  const auto path = std::filesystem::temp_directory_path() / "selfdet_pr.svg";
  const std::vector<ImageResult> images{image({det(0, 0, 10, 10, 0.9), det(30, 30, 40, 40, 0.8)}, {gt_box(0, 0, 10, 10)})};
  write_pr_svg(path.string(), {{"model", pr_curve(images, 0)}});
  std::ifstream is(path);
  const std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  CHECK(text.find("<svg") != std::string::npos);
  std::filesystem::remove(path);
}
