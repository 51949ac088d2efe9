#include <cmath>
#include <sstream>

#include "doctest.h"
#include "selfdet/geometry.hpp"
#include "selfdet/random.hpp"

using namespace selfdet;

namespace {

Box random_box(Rng& rng, double extent = 100.0) {
  const double x1 = rng.uniform(0.0, extent);
  const double y1 = rng.uniform(0.0, extent);
  return Box(x1, y1, x1 + rng.uniform(1.0, extent), y1 + rng.uniform(1.0, extent));
}

// Independent greedy oracle: repeatedly take the highest-scoring remaining box
// (earliest on ties) and strike everything overlapping it.
std::vector<std::size_t> brute_force_nms(const std::vector<Box>& boxes, double thresh) {
  std::vector<bool> alive(boxes.size(), true);
  std::vector<std::size_t> keep;
  for (;;) {
    std::size_t best = boxes.size();
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      if (!alive[i]) continue;
      if (best == boxes.size() || *boxes[i].score > *boxes[best].score) best = i;
    }
    if (best == boxes.size()) break;
    keep.push_back(best);
    alive[best] = false;
    for (std::size_t j = 0; j < boxes.size(); ++j) {
      if (!alive[j]) continue;
      const double ix = std::max(0.0, std::min(boxes[best].x2(), boxes[j].x2()) -
                                          std::max(boxes[best].x1(), boxes[j].x1()));
      const double iy = std::max(0.0, std::min(boxes[best].y2(), boxes[j].y2()) -
                                          std::max(boxes[best].y1(), boxes[j].y1()));
      const double inter = ix * iy;
      if (inter / (boxes[best].area() + boxes[j].area() - inter) > thresh) alive[j] = false;
    }
  }
  return keep;
}

}  // namespace

TEST_CASE("iou examples") {
  const Box a(0, 0, 10, 10);
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(a, Box(20, 20, 30, 30)) == 0.0);
  CHECK(iou(a, Box(0, 0, 10, 5)) == doctest::Approx(0.5));
}

TEST_CASE("iou is symmetric and bounded") {
  Rng rng(3);
  for (int i = 0; i < 500; ++i) {
    const Box a = random_box(rng), b = random_box(rng);
    CHECK(iou(a, b) == iou(b, a));
    CHECK(iou(a, b) >= 0.0);
    CHECK(iou(a, b) <= 1.0);
  }
}

TEST_CASE("box construction rejects degenerate extents") {
  CHECK_THROWS_AS(Box(5, 0, 5, 10), std::invalid_argument);
  CHECK_FALSE(Box::try_make(0, 3, 10, 2).has_value());
  CHECK(Box::try_make(0, 0, 1, 1).has_value());
}

TEST_CASE("encode examples") {
  const Box anchor = Box::from_center(10, 10, 4, 4);
  const Deltas same = encode_deltas(anchor, anchor);
  for (double v : same) CHECK(v == 0.0);

  const Deltas grown = encode_deltas(anchor, Box::from_center(10, 10, 8, 8));
  CHECK(grown[0] == doctest::Approx(0.0));
  CHECK(grown[1] == doctest::Approx(0.0));
  CHECK(grown[2] == doctest::Approx(std::log(2.0)));
  CHECK(grown[3] == doctest::Approx(std::log(2.0)));

  const Deltas shifted = encode_deltas(anchor, Box::from_center(12, 10, 4, 4));
  CHECK(shifted[0] == doctest::Approx(0.5));
  CHECK(shifted[1] == doctest::Approx(0.0));
  CHECK(shifted[2] == doctest::Approx(0.0));
  CHECK(shifted[3] == doctest::Approx(0.0));
}

TEST_CASE("decode examples") {
  const Box anchor = Box::from_center(10, 10, 4, 4);
  CHECK(decode_deltas(anchor, {0, 0, 0, 0})->same_extent(anchor));
  const Box out = *decode_deltas(anchor, {0, 0, std::log(2.0), std::log(2.0)});
  CHECK(out.center_x() == doctest::Approx(10.0));
  CHECK(out.center_y() == doctest::Approx(10.0));
  CHECK(out.width() == doctest::Approx(8.0));
  CHECK(out.height() == doctest::Approx(8.0));
}

TEST_CASE("decode clips and rejects slivers") {
  const Box anchor(-20, -20, 20, 20);
  const Box clipped = *decode_deltas(anchor, {0, 0, 0, 0}, ClipExtent{100, 100});
  CHECK(clipped.x1() == 0.0);
  CHECK(clipped.y1() == 0.0);
  CHECK(clipped.x2() == 20.0);
  // Entirely left of the image: nothing survives clipping.
  CHECK_FALSE(decode_deltas(Box(-50, 10, -10, 30), {0, 0, 0, 0}, ClipExtent{100, 100}).has_value());
}

TEST_CASE("codec roundtrip on random pairs") {
  Rng rng(11);
  double worst = 0.0;
  for (int i = 0; i < 2000; ++i) {
    const Box a = random_box(rng, 300), g = random_box(rng, 300);
    const Box back = *decode_deltas(a, encode_deltas(a, g));
    for (auto [u, v] : {std::pair{back.x1(), g.x1()}, {back.y1(), g.y1()}, {back.x2(), g.x2()},
                        {back.y2(), g.y2()}}) {
      worst = std::max(worst, std::abs(u - v) / std::max(1.0, std::abs(v)));
    }
  }
  CHECK(worst <= 1e-9);
}

TEST_CASE("nms examples") {
  const Box a = Box(0, 0, 10, 10).with_score(0.9);
  const Box b = Box(0, 0, 10, 8).with_score(0.8);  // iou 0.8 with a
  const Box c = Box(50, 50, 60, 60).with_score(0.7);
  REQUIRE(iou(a, b) == doctest::Approx(0.8));
  const std::vector<Box> in{a, b, c};
  const auto out = nms(in, 0.5);
  REQUIRE(out.size() == 2);
  CHECK(out[0] == a);
  CHECK(out[1] == c);
  CHECK(nms(std::vector<Box>{a}, 0.5).size() == 1);
  CHECK(nms(std::vector<Box>{}, 0.5).empty());
}

TEST_CASE("nms ties keep input order") {
  const std::vector<Box> in{Box(0, 0, 10, 10).with_score(0.5), Box(1, 0, 11, 10).with_score(0.5)};
  const auto idx = nms_indices(in, 0.5);
  REQUIRE(idx.size() == 1);
  CHECK(idx[0] == 0);
}

TEST_CASE("nms matches brute-force oracle") {
  Rng rng(5);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + rng.index(25);
    std::vector<Box> boxes;
    for (std::size_t i = 0; i < n; ++i) {
      // Coarse scores create ties.
      boxes.push_back(random_box(rng, 60).with_score(std::floor(rng.uniform() * 8) / 8));
    }
    const double thresh = rng.uniform(0.1, 0.9);
    CHECK(nms_indices(boxes, thresh) == brute_force_nms(boxes, thresh));
    const auto kept = nms(boxes, thresh);
    for (std::size_t i = 0; i < kept.size(); ++i) {
      for (std::size_t j = i + 1; j < kept.size(); ++j) CHECK(iou(kept[i], kept[j]) <= thresh);
      if (i > 0) CHECK(*kept[i - 1].score >= *kept[i].score);
    }
  }
}

TEST_CASE("filter_proposals examples") {
  const ProposalFilter f;
  CHECK_FALSE(f.accepts(Box(0, 0, 224, 224), 224, 224));
  CHECK(f.accepts(Box(0, 0, 100, 50), 224, 224));
  CHECK_FALSE(f.accepts(Box(0, 0, 10, 40), 224, 224));
}

TEST_CASE("filter_proposals keeps order and is idempotent") {
  Rng rng(8);
  std::vector<Box> boxes;
  for (int i = 0; i < 300; ++i) boxes.push_back(random_box(rng, 200));
  const auto once = filter_proposals(boxes, 224, 224);
  const auto twice = filter_proposals(once, 224, 224);
  CHECK(once == twice);
  std::size_t cursor = 0;
  for (const Box& b : once) {
    while (cursor < boxes.size() && !(boxes[cursor] == b)) ++cursor;
    CHECK(cursor < boxes.size());
  }
}

TEST_CASE("assign_fpn_level examples and monotonicity") {
  CHECK(assign_fpn_level(Box(0, 0, 224, 224)) == 4);
  CHECK(assign_fpn_level(Box(0, 0, 56, 56)) == 2);
  CHECK(assign_fpn_level(Box(0, 0, 448, 448)) == 5);
  CHECK(assign_fpn_level(Box(0, 0, 2, 2)) == 2);
  int prev = 2;
  for (double side = 1.0; side < 800.0; side *= 1.07) {
    const int level = assign_fpn_level(Box(0, 0, side, side));
    CHECK(level >= prev);
    prev = level;
  }
}

TEST_CASE("anchor set bookkeeping") {
  const AnchorSet set = make_anchor_set(224, 224);
  CHECK(set.size() == 12495);
  CHECK(set.size() == 3 * (56 * 56 + 28 * 28 + 14 * 14 + 7 * 7));
  CHECK(set.positions() == 56 * 56 + 28 * 28 + 14 * 14 + 7 * 7);
  REQUIRE(set.levels.size() == 4);
  CHECK(set.levels[0].anchors.size() == 9408);
  for (std::size_t l = 0; l < 4; ++l) {
    CHECK(set.levels[l].stride == kAnchorStrides[l]);
    CHECK(set.levels[l].size == kAnchorSizes[l]);
  }
  // (ratio, y, x) order: the second anchor is one stride to the right.
  const auto& p2 = set.levels[0].anchors;
  CHECK(p2[1].center_x() - p2[0].center_x() == doctest::Approx(4.0));
  CHECK(p2[56].center_y() - p2[0].center_y() == doctest::Approx(4.0));
  // Area is size^2 and height/width is the ratio.
  const Box tall = p2[2 * 56 * 56];
  CHECK(tall.area() == doctest::Approx(24.0 * 24.0));
  CHECK(tall.height() / tall.width() == doctest::Approx(2.0));
}

TEST_CASE("box text roundtrip") {
  std::vector<Box> boxes{Box(1.5, 2, 30, 40), Box(0, 0, 10, 10).with_score(0.25).with_class(3)};
  std::stringstream ss;
  write_boxes(ss, boxes);
  const auto back = read_boxes(ss);
  CHECK(back == boxes);
  CHECK_THROWS_AS(parse_box("1 2 x 4"), std::invalid_argument);
}
