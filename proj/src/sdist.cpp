// Command-line driver: train-teacher, distill, eval, report, gradcheck.
//
// Options come from an optional JSON config file (--config) and are then
// overridden by flags. Failures print one line, `error: <kind>: <message>`,
// and exit with status 2.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "sdist/gradcheck_suite.hpp"
#include "sdist/trainer.hpp"

namespace {

using namespace sdist;

struct Overrides {
  std::string config;
  std::optional<double> density, alpha, beta, temperature, lr;
  std::optional<std::string> prune_mode, variant, dataset, data_dir, out_dir, teacher, resume;
  std::optional<std::size_t> heads, extent, epochs, batch_size, stop_after;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "JSON config file; flags override its values");
  cmd->add_option("--density", o.density, "target density of prunable weights");
  cmd->add_option("--prune-mode", o.prune_mode, "irregular or column")->check(CLI::IsMember({"irregular", "column"}));
  cmd->add_option("--alpha", o.alpha, "cross-entropy weight");
  cmd->add_option("--beta", o.beta, "attention-transfer weight");
  cmd->add_option("--temperature", o.temperature, "distillation temperature");
  cmd->add_option("--heads", o.heads, "attention heads in the student");
  cmd->add_option("--extent", o.extent, "attention spatial extent");
  cmd->add_option("--variant", o.variant, "hybrid or homogeneous student")
      ->check(CLI::IsMember({"hybrid", "homogeneous"}));
  cmd->add_option("--seed", o.seed, "random seed");
  cmd->add_flag("--deterministic", o.deterministic, "reproducible outputs (wall time recorded as 0)");
  cmd->add_option("--data-dir", o.data_dir, "directory with CIFAR binary files");
  cmd->add_option("--dataset", o.dataset, "synthetic, cifar10 or cifar100")
      ->check(CLI::IsMember({"synthetic", "cifar10", "cifar100"}));
  cmd->add_option("--out-dir", o.out_dir, "output directory");
  cmd->add_option("--epochs", o.epochs, "training epochs");
  cmd->add_option("--batch-size", o.batch_size, "mini-batch size");
  cmd->add_option("--lr", o.lr, "initial learning rate");
}

TrainConfig resolve(const Overrides& o) {
  TrainConfig cfg = o.config.empty() ? TrainConfig{} : load_config_file(o.config);
  if (o.density) cfg.sparse.density = *o.density;
  if (o.prune_mode) cfg.sparse.mode = *o.prune_mode == "column" ? PruneMode::column : PruneMode::irregular;
  if (o.alpha) cfg.distill.alpha = *o.alpha;
  if (o.beta) cfg.distill.beta = *o.beta;
  if (o.temperature) cfg.distill.temperature = *o.temperature;
  if (o.heads) cfg.student.heads = *o.heads;
  if (o.extent) cfg.student.extent = *o.extent;
  if (o.variant) cfg.student.variant = *o.variant == "homogeneous" ? Variant::homogeneous : Variant::hybrid;
  if (o.seed) cfg.seed = *o.seed;
  if (o.deterministic) cfg.deterministic = true;
  if (o.data_dir) cfg.data_dir = *o.data_dir;
  if (o.dataset) cfg.dataset = *o.dataset;
  if (o.out_dir) cfg.out_dir = *o.out_dir;
  if (o.epochs) cfg.epochs = *o.epochs;
  if (o.batch_size) cfg.batch_size = *o.batch_size;
  if (o.lr) cfg.lr = *o.lr;
  if (o.teacher) cfg.teacher_checkpoint = *o.teacher;
  if (o.resume) cfg.resume = *o.resume;
  if (o.stop_after) cfg.stop_after = *o.stop_after;
  cfg.normalize();
  cfg.validate();
  return cfg;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

int fail(const std::string& kind, const std::string& message) {
  std::fprintf(stderr, "error: %s: %s\n", kind.c_str(), one_line(message).c_str());
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse distillation of convolutional teachers into self-attention students"};
  app.require_subcommand(1);
  app.fallthrough();

  Overrides o;
  bool quiet = false;
  app.add_flag("--quiet", quiet, "do not echo the run log to stderr");

  auto* teacher_cmd = app.add_subcommand("train-teacher", "train the convolutional teacher");
  add_common(teacher_cmd, o);

  auto* distill_cmd = app.add_subcommand("distill", "single-pass sparse distillation of the student");
  add_common(distill_cmd, o);
  distill_cmd->add_option("--teacher", o.teacher, "teacher checkpoint");
  distill_cmd->add_option("--resume", o.resume, "student checkpoint to continue from");
  distill_cmd->add_option("--stop-after", o.stop_after, "stop once this many epochs are complete");

  std::string checkpoint;
  std::string split = "test";
  auto* eval_cmd = app.add_subcommand("eval", "top-1 accuracy of a checkpoint");
  add_common(eval_cmd, o);
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint to evaluate")->required();
  eval_cmd->add_option("--split", split, "train or test")->check(CLI::IsMember({"train", "test"}));

  std::string report_teacher, report_student;
  bool full_scale = false;
  auto* report_cmd = app.add_subcommand("report", "parameter and FLOP accounting");
  add_common(report_cmd, o);
  report_cmd->add_option("--teacher", report_teacher, "teacher checkpoint");
  report_cmd->add_option("--student", report_student, "student checkpoint");
  report_cmd->add_flag("--full-scale", full_scale, "full-size ResNet-50 teacher vs ResNet-26 student, no training");

  std::size_t gc_seeds = 5, gc_coords = 20;
  double gc_tolerance = 1e-4;
  auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference check of every primitive (64-bit)");
  gc_cmd->add_option("--seeds", gc_seeds, "seeds per primitive");
  gc_cmd->add_option("--coordinates", gc_coords, "sampled coordinates per input");
  gc_cmd->add_option("--tolerance", gc_tolerance, "maximum relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what());
  }

  try {
    if (*teacher_cmd || *distill_cmd) {
      const auto cfg = resolve(o);
      const auto result = *teacher_cmd ? train_teacher(cfg, !quiet) : sparse_distill(cfg, !quiet);
      nlohmann::json out = {{"checkpoint", result.checkpoint.string()},
                            {"epochs", result.metrics.rows.size()},
                            {"test_accuracy", result.test_accuracy}};
      std::cout << out.dump() << "\n";
    } else if (*eval_cmd) {
      const auto cfg = resolve(o);
      auto data = load_data(cfg);
      const double acc = evaluate(checkpoint, split == "train" ? data.train : data.test, cfg.batch_size);
      std::cout << nlohmann::json{{"checkpoint", checkpoint}, {"split", split}, {"accuracy", acc}}.dump() << "\n";
    } else if (*report_cmd) {
      AccountingReport rep;
      if (full_scale) {
        const auto cfg = resolve(o);
        rep = full_scale_report(cfg.sparse.density, cfg.sparse.mode, cfg.student.extent, cfg.student.heads, 10,
                                 cfg.seed, DepthClass::student26, cfg.student.variant);
      } else {
        if (report_teacher.empty() || report_student.empty())
          throw ConfigError("report needs --teacher and --student checkpoints, or --full-scale");
        rep = report(report_teacher, report_student);
      }
      std::cout << rep.to_json().dump(2) << "\n";
    } else if (*gc_cmd) {
      bool ok = true;
      for (const auto& [name, err] : run_gradient_suite<double>(gc_seeds, {1e-6, gc_coords, 0})) {
        const bool pass = err <= gc_tolerance;
        ok = ok && pass;
        std::printf("%-34s %.3e %s\n", name.c_str(), err, pass ? "ok" : "FAIL");
      }
      if (!ok) return fail("numeric", "gradient check exceeded tolerance");
    }
  } catch (const Error& e) {
    return fail(e.kind(), e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
  return 0;
}
