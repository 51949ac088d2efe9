#include <iostream>

#include "CLI11.hpp"
#include "selfdet/commands.hpp"

using namespace selfdet;

int main(int argc, char** argv) {
  CLI::App app{"selfdet: proposal-driven self-supervised detector pre-training"};
  app.require_subcommand(1);

  ProposeOptions propose;
  auto* p = app.add_subcommand("propose", "Selective-search proposal cache for a corpus");
  p->add_option("--corpus", propose.corpus, "Directory of .ppm images")->required();
  p->add_option("--cache", propose.cache, "Output directory for <stem>.props files")->required();
  p->add_option("--scale", propose.params.scale, "Felzenszwalb scale");
  p->add_option("--sigma", propose.params.sigma, "Pre-smoothing sigma");
  p->add_option("--min_size", propose.params.min_size, "Minimum region size");

  PretrainOptions pretrain;
  auto* t = app.add_subcommand("pretrain", "Separate or joint pre-training from a key=value config");
  t->add_option("--config", pretrain.config, "Config file")->check(CLI::ExistingFile);
  t->add_option("--set", pretrain.overrides, "Config override key=value (repeatable)");
  t->add_option("--ablation", pretrain.ablation_dir, "Run the four joint loss/proposal configurations into DIR");

  EvaluateOptions evaluate;
  auto* e = app.add_subcommand("evaluate", "Proposal recall, mAP and stratified errors on an annotated corpus");
  e->add_option("--corpus", evaluate.corpus, "Annotated corpus directory")->required();
  auto* ck = e->add_option("--checkpoint", evaluate.checkpoint, "Model checkpoint");
  auto* dt = e->add_option("--detections", evaluate.detections, "Detections file (image_id x1 y1 x2 y2 score)");
  ck->excludes(dt);
  e->add_option("--k", evaluate.eval.k, "RPN proposals per image");
  e->add_flag("--use-target", evaluate.eval.use_target, "Score with the EMA extractor");
  e->add_option("--iou", evaluate.eval.iou_thresh, "IoU threshold");
  e->add_option("--bg", evaluate.eval.stratify.bg_thresh, "Background IoU threshold for error analysis");
  e->add_option("--svg", evaluate.svg, "Write a PR-curve plot");
  e->add_option("--report", evaluate.report, "Write key=value metrics");

  GradcheckSuiteOptions gradcheck;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference check of every loss and layer");
  g->add_option("--seed", gradcheck.seed, "Input seed");
  g->add_option("--fault", gradcheck.fault_op, "Inject a wrong backward rule into this op");
  g->add_option("--tolerance", gradcheck.check.tolerance, "Max relative error");

  SynthOptions synth;
  auto* s = app.add_subcommand("synth", "Synthetic annotated corpus");
  s->add_option("--n", synth.n, "Number of images")->required()->check(CLI::PositiveNumber);
  s->add_option("--out", synth.out_dir, "Output directory")->required();
  s->add_option("--seed", synth.seed, "Seed");
  s->add_option("--first-index", synth.first_index, "Index of the first image");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*p) return cmd_propose(propose, std::cout, std::cerr);
    if (*t) return cmd_pretrain(pretrain, std::cout, std::cerr);
    if (*e) {
      if (evaluate.checkpoint.empty() && evaluate.detections.empty()) {
        std::cerr << "error: evaluate needs --checkpoint or --detections\n";
        return kExitUsage;
      }
      return cmd_evaluate(evaluate, std::cout, std::cerr);
    }
    if (*g) return cmd_gradcheck(gradcheck, std::cout, std::cerr);
    if (*s) return cmd_synth(synth, std::cout, std::cerr);
  } catch (const ConfigError& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}
