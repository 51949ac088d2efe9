#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "selfdet/corpus.hpp"
#include "selfdet/evaluation.hpp"
#include "selfdet/geometry.hpp"
#include "selfdet/image.hpp"
#include "selfdet/segmentation.hpp"

namespace fs = std::filesystem;
using namespace selfdet;

namespace {

struct Run {
  int code;
  std::string output;  // stdout and stderr
};

Run run(const std::string& args) {
  const std::string cmd = std::string(SELFDET_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::string out;
  char buf[4096];
  while (std::size_t n = fread(buf, 1, sizeof(buf), pipe)) out.append(buf, n);
  const int status = pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("selfdet_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

// Small model and view size so that CLI training runs take seconds.
const char* kSmallModel =
    " --set stem_width=4 --set fpn_dim=8 --set head_hidden=16 --set proj_hidden=16 --set embed_dim=8"
    " --set view_size=64 --set batch_size=2";

}  // namespace

TEST_CASE("usage errors exit with 2") {
  CHECK(run("").code == 2);
  CHECK(run("frobnicate").code == 2);
  CHECK(run("synth --n 0 --out /tmp/x").code == 2);
  CHECK(run("gradcheck --no-such-flag").code == 2);
  CHECK(run("--help").code == 0);
}

TEST_CASE("synth is deterministic and annotated in bounds") {
  const fs::path a = fresh_dir("synth_a"), b = fresh_dir("synth_b");
  REQUIRE(run("synth --n 3 --seed 4 --out " + q(a)).code == 0);
  REQUIRE(run("synth --n 3 --seed 4 --out " + q(b)).code == 0);
  for (const char* f : {"synth_0000.ppm", "synth_0000.txt", "synth_0002.ppm", "synth_0002.txt"}) {
    REQUIRE(fs::exists(a / f));
    CHECK(slurp(a / f) == slurp(b / f));
  }
  for (int i = 0; i < 3; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "synth_%04d", i);
    const Image img = read_ppm((a / (std::string(name) + ".ppm")).string());
    const auto boxes = load_boxes((a / (std::string(name) + ".txt")).string());
    CHECK_FALSE(boxes.empty());
    for (const Box& bx : boxes) {
      CHECK(bx.x1() >= 0.0);
      CHECK(bx.y1() >= 0.0);
      CHECK(bx.x2() <= img.width);
      CHECK(bx.y2() <= img.height);
    }
  }
}

TEST_CASE("propose: uniform and half/half corpora") {
  const fs::path corpus = fresh_dir("propose_corpus"), cache = fresh_dir("propose_cache");
  write_ppm((corpus / "flat_a.ppm").string(), Image(3, 224, 224, 0.3));
  write_ppm((corpus / "flat_b.ppm").string(), Image(3, 224, 224, 0.8));
  const Run r = run("propose --corpus " + q(corpus) + " --cache " + q(cache));
  CHECK(r.code == 0);
  CHECK(r.output.find("mean_per_image=0") != std::string::npos);
  CHECK(fs::file_size(cache / "flat_a.props") == 0);
  CHECK(fs::file_size(cache / "flat_b.props") == 0);

  const fs::path halves = fresh_dir("propose_halves"), hcache = fresh_dir("propose_hcache");
  Image img(3, 224, 224, 0.0);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 224; ++y)
      for (int x = 112; x < 224; ++x) img.at(c, y, x) = 1.0;
  write_ppm((halves / "half.ppm").string(), img);
  // Unsmoothed, as in the segmentation example; blur turns the seam into thin extra segments.
  const std::string args = "propose --sigma 0 --corpus " + q(halves) + " --cache " + q(hcache);
  REQUIRE(run(args).code == 0);
  CHECK(load_boxes((hcache / "half.props").string()).size() == 2);

  // Rerun gives a bit-identical cache and leaves the corpus alone.
  const std::string first = slurp(hcache / "half.props");
  const std::string image_before = slurp(halves / "half.ppm");
  REQUIRE(run(args).code == 0);
  CHECK(slurp(hcache / "half.props") == first);
  CHECK(slurp(halves / "half.ppm") == image_before);
}

TEST_CASE("pretrain: config errors and separate without a base") {
  const fs::path dir = fresh_dir("pretrain_err");
  const Run bad = run("pretrain --set stratgy=joint --set steps=-1");
  CHECK(bad.code == 2);
  CHECK(bad.output.find("stratgy") != std::string::npos);
  CHECK(bad.output.find("steps") != std::string::npos);

  REQUIRE(run("synth --n 2 --seed 1 --out " + q(dir / "corpus")).code == 0);
  REQUIRE(run("propose --corpus " + q(dir / "corpus") + " --cache " + q(dir / "cache")).code == 0);
  const std::string common = " --set corpus=" + (dir / "corpus").string() + " --set proposal_cache=" +
                             (dir / "cache").string() + " --set checkpoint=" + (dir / "sep.ckpt").string();
  const Run sep = run("pretrain --set strategy=separate" + common);
  CHECK(sep.code != 0);
  CHECK(sep.output.find("base_checkpoint") != std::string::npos);
  const Run missing = run("pretrain --set strategy=separate --set base_checkpoint=/nonexistent/base.ckpt" + common);
  CHECK(missing.code != 0);
  CHECK(missing.output.find("/nonexistent/base.ckpt") != std::string::npos);
}

TEST_CASE("pretrain: joint runs reproduce, separate builds on them, ablation emits four reports") {
  const fs::path dir = fresh_dir("pretrain");
  REQUIRE(run("synth --n 4 --seed 2 --out " + q(dir / "corpus")).code == 0);
  REQUIRE(run("propose --corpus " + q(dir / "corpus") + " --cache " + q(dir / "cache")).code == 0);
  const std::string data = " --set corpus=" + (dir / "corpus").string() + " --set proposal_cache=" +
                           (dir / "cache").string() + " --set steps=3 --set seed=11" + kSmallModel;
  for (const char* name : {"a", "b"}) {
    const Run r = run("pretrain" + data + " --set checkpoint=" + (dir / (std::string(name) + ".ckpt")).string());
    REQUIRE(r.code == 0);
  }
  CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));
  CHECK(slurp(dir / "a.ckpt.log") == slurp(dir / "b.ckpt.log"));

  const Run sep = run("pretrain --set strategy=separate --set base_checkpoint=" + (dir / "a.ckpt").string() + data +
                      " --set checkpoint=" + (dir / "sep.ckpt").string());
  CHECK(sep.code == 0);
  CHECK(fs::exists(dir / "sep.ckpt"));

  const Run ab = run("pretrain --ablation " + q(dir / "ablation") + data);
  CHECK(ab.code == 0);
  for (const char* n : {"det_only_ss", "det_only_ss_plus_rpn", "det_plus_rpn_ss", "det_plus_rpn_ss_plus_rpn"}) {
    CHECK(fs::exists(dir / "ablation" / (std::string(n) + ".ckpt")));
    CHECK(fs::exists(dir / "ablation" / (std::string(n) + ".log")));
    CHECK(ab.output.find(std::string(n) + " ") != std::string::npos);
  }
}

TEST_CASE("evaluate: annotations required, perfect detections give a zero report") {
  const fs::path dir = fresh_dir("evaluate");
  REQUIRE(run("synth --n 2 --seed 3 --out " + q(dir / "corpus")).code == 0);

  std::ofstream dets(dir / "perfect.txt");
  for (const char* stem : {"synth_0000", "synth_0001"}) {
    for (const Box& b : load_boxes((dir / "corpus" / (std::string(stem) + ".txt")).string()))
      dets << stem << ' ' << b.x1() << ' ' << b.y1() << ' ' << b.x2() << ' ' << b.y2() << " 0.9\n";
  }
  dets.close();
  const Run r = run("evaluate --corpus " + q(dir / "corpus") + " --detections " + q(dir / "perfect.txt") +
                    " --report " + q(dir / "report.txt") + " --svg " + q(dir / "pr.svg"));
  CHECK(r.code == 0);
  for (const char* key : {"base_map=1\n", "cls=0\n", "loc=0\n", "dupe=0\n", "bkg=0\n", "miss=0\n", "false_pos=0\n",
                          "false_neg=0\n", "recall=1\n"})
    CHECK(r.output.find(key) != std::string::npos);
  for (const char* col : {"Cls", "Loc", "Dupe", "Bkg", "Miss", "FalsePos", "FalseNeg"})
    CHECK(r.output.find(col) != std::string::npos);
  CHECK(fs::exists(dir / "report.txt"));
  CHECK(fs::exists(dir / "pr.svg"));

  fs::remove(dir / "corpus" / "synth_0001.txt");
  const Run missing = run("evaluate --corpus " + q(dir / "corpus") + " --detections " + q(dir / "perfect.txt"));
  CHECK(missing.code != 0);
  CHECK(missing.output.find("annotation") != std::string::npos);
  CHECK(run("evaluate --corpus " + q(dir / "corpus")).code == 2);
}

TEST_CASE("gradcheck: clean run passes reproducibly, injected fault fails naming the op") {
  const Run a = run("gradcheck --seed 3");
  CHECK(a.code == 0);
  CHECK(a.output.find(" 0 failed") != std::string::npos);
  const Run b = run("gradcheck --seed 3");
  CHECK(a.output == b.output);

  const Run bad = run("gradcheck --fault conv2d");
  CHECK(bad.code == 1);
  CHECK(bad.output.find("gradient mismatch in conv2d") != std::string::npos);
}

TEST_CASE("selective search finds the synthetic objects") {
  std::vector<std::vector<Box>> props, gts;
  for (std::uint64_t i = 0; i < 16; ++i) {
    const SynthImage s = synth_image(500 + i);
    props.push_back(propose(s.image));
    gts.push_back(s.boxes);
  }
  const double recall = proposal_recall(props, gts);
  MESSAGE("selective-search recall@0.5 on 16 synthetic images: " << recall);
  CHECK(recall >= 0.8);
}
