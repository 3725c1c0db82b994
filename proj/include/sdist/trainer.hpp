#pragma once

// Teacher pretraining, single-pass sparse distillation, evaluation and
// accounting reports. Runs write into cfg.out_dir:
//   teacher.ckpt  teacher_metrics.csv           (train-teacher)
//   student.ckpt  metrics.csv  manifest.json    (distill)
//   run.log                                     (both)

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#if defined(__SSE__)
#include <xmmintrin.h>
#endif

#include "sdist/accounting.hpp"
#include "sdist/checkpoint.hpp"
#include "sdist/data.hpp"
#include "sdist/distill.hpp"
#include "sdist/model.hpp"
#include "sdist/optim.hpp"
#include "sdist/sparse.hpp"

namespace sdist {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 100;
  double lr = 0.1;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  std::vector<std::size_t> lr_drops{18, 24, 27};
  double lr_factor = 0.1;
  DistillConfig distill;
  SparseConfig sparse;
  ModelSpec teacher = ModelSpec::preset(Role::teacher, Variant::conv, DepthClass::toy, 2);
  ModelSpec student = ModelSpec::preset(Role::student, Variant::hybrid, DepthClass::toy, 2);
  std::string dataset = "synthetic";  // synthetic | cifar10 | cifar100
  std::string data_dir;
  std::size_t synthetic_train = 1000;
  std::size_t synthetic_test = 500;
  std::size_t synthetic_classes = 2;
  Normalization normalization = Normalization::cifar10();
  std::uint64_t seed = 0;
  bool deterministic = false;
  std::string out_dir = "run";
  std::string teacher_checkpoint;
  std::string resume;
  std::size_t stop_after = 0;  // stop once this many epochs are complete (0 = run to the end)

  std::size_t classes() const {
    if (dataset == "cifar10") return 10;
    if (dataset == "cifar100") return 100;
    return synthetic_classes;
  }

  /// Learning rate for 0-based epoch e: lr * factor^(number of drops <= e).
  double lr_at(std::size_t epoch) const {
    double rate = lr;
    for (auto d : lr_drops)
      if (epoch >= d) rate *= lr_factor;
    return rate;
  }

  /// Copies the dataset's class count into both model specs.
  void normalize() {
    teacher.classes = classes();
    student.classes = classes();
  }

  void validate() const {
    if (epochs == 0) throw ConfigError("epochs must be >= 1");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(lr_factor > 0.0 && lr_factor <= 1.0)) throw ConfigError("lr_factor must lie in (0, 1]");
    for (std::size_t i = 1; i < lr_drops.size(); ++i)
      if (lr_drops[i] <= lr_drops[i - 1]) throw ConfigError("lr_drops must be strictly increasing");
    if (dataset != "synthetic" && dataset != "cifar10" && dataset != "cifar100")
      throw ConfigError("dataset must be one of synthetic, cifar10, cifar100");
    if (dataset == "synthetic") {
      if (synthetic_classes < 2) throw ConfigError("synthetic_classes must be >= 2");
      if (synthetic_train < synthetic_classes || synthetic_test < synthetic_classes)
        throw ConfigError("synthetic splits need at least one image per class");
    } else if (data_dir.empty()) {
      throw ConfigError("data_dir is required for " + dataset);
    }
    for (double s : normalization.stddev)
      if (!(s > 0.0)) throw ConfigError("normalization stddev must be positive");
    distill.validate();
    sparse.validate();
    if (teacher.role != Role::teacher) throw ConfigError("teacher spec must have role 'teacher'");
    if (student.role != Role::student) throw ConfigError("student spec must have role 'student'");
    if (student.variant == Variant::conv) throw ConfigError("student variant must be hybrid or homogeneous");
    teacher.validate();
    student.validate();
    if (teacher.classes != classes() || student.classes != classes())
      throw ConfigError("model class count does not match the dataset (" + std::to_string(classes()) + ")");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"lr", c.lr},
       {"weight_decay", c.weight_decay},
       {"momentum", c.momentum},
       {"lr_drops", c.lr_drops},
       {"lr_factor", c.lr_factor},
       {"distill", c.distill},
       {"sparse", c.sparse},
       {"teacher", c.teacher},
       {"student", c.student},
       {"dataset", c.dataset},
       {"data_dir", c.data_dir},
       {"synthetic_train", c.synthetic_train},
       {"synthetic_test", c.synthetic_test},
       {"synthetic_classes", c.synthetic_classes},
       {"normalization", c.normalization},
       {"seed", c.seed},
       {"deterministic", c.deterministic},
       {"out_dir", c.out_dir},
       {"teacher_checkpoint", c.teacher_checkpoint},
       {"resume", c.resume},
       {"stop_after", c.stop_after}};
}

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& reference, const nlohmann::json& given, const std::string& path) {
  if (!given.is_object()) throw ConfigError("config " + (path.empty() ? "root" : "'" + path + "'") + " must be an object");
  for (const auto& [key, value] : given.items()) {
    const std::string full = path.empty() ? key : path + "." + key;
    if (!reference.contains(key)) throw ConfigError("unknown config key '" + full + "'");
    if (reference[key].is_object()) reject_unknown_keys(reference[key], value, full);
  }
}

}  // namespace detail

/// Partial configs are merged over the defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  nlohmann::json merged = TrainConfig{};
  detail::reject_unknown_keys(merged, j, "");
  merged.merge_patch(j);
  try {
    merged.at("epochs").get_to(c.epochs);
    merged.at("batch_size").get_to(c.batch_size);
    merged.at("lr").get_to(c.lr);
    merged.at("weight_decay").get_to(c.weight_decay);
    merged.at("momentum").get_to(c.momentum);
    merged.at("lr_drops").get_to(c.lr_drops);
    merged.at("lr_factor").get_to(c.lr_factor);
    merged.at("distill").get_to(c.distill);
    merged.at("sparse").get_to(c.sparse);
    merged.at("teacher").get_to(c.teacher);
    merged.at("student").get_to(c.student);
    merged.at("dataset").get_to(c.dataset);
    merged.at("data_dir").get_to(c.data_dir);
    merged.at("synthetic_train").get_to(c.synthetic_train);
    merged.at("synthetic_test").get_to(c.synthetic_test);
    merged.at("synthetic_classes").get_to(c.synthetic_classes);
    merged.at("normalization").get_to(c.normalization);
    merged.at("seed").get_to(c.seed);
    merged.at("deterministic").get_to(c.deterministic);
    merged.at("out_dir").get_to(c.out_dir);
    merged.at("teacher_checkpoint").get_to(c.teacher_checkpoint);
    merged.at("resume").get_to(c.resume);
    merged.at("stop_after").get_to(c.stop_after);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid config value: ") + e.what());
  }
}

inline TrainConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return j.get<TrainConfig>();
}

// ------------------------------------------------------------------ metrics

struct EpochRow {
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;
  double loss_total = 0.0;
  double loss_ce = 0.0;
  double loss_kd = 0.0;
  double loss_at = 0.0;
  double test_accuracy = 0.0;
  double density = 1.0;
  std::vector<double> layer_density;
  double wall_time = 0.0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(EpochRow, epoch, lr, loss_total, loss_ce, loss_kd, loss_at, test_accuracy, density,
                                   layer_density, wall_time)

struct RunMetrics {
  std::vector<std::string> layers;
  std::vector<EpochRow> rows;

  std::string csv() const {
    std::string out = "epoch,lr,loss_total,loss_ce,loss_kd,loss_at,test_accuracy,density";
    for (const auto& l : layers) out += ",density:" + l;
    out += ",wall_time\n";
    char buf[64];
    auto num = [&](double v) {
      std::snprintf(buf, sizeof buf, "%.9g", v);
      out += ',';
      out += buf;
    };
    for (const auto& r : rows) {
      out += std::to_string(r.epoch);
      for (double v : {r.lr, r.loss_total, r.loss_ce, r.loss_kd, r.loss_at, r.test_accuracy, r.density}) num(v);
      for (double v : r.layer_density) num(v);
      num(r.wall_time);
      out += '\n';
    }
    return out;
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(RunMetrics, layers, rows)

class RunLog {
 public:
  RunLog() = default;
  RunLog(const std::filesystem::path& path, bool append, bool echo)
      : out_(path, append ? std::ios::app : std::ios::trunc), echo_(echo) {
    if (!out_) throw IoError("cannot write " + path.string());
  }
  void line(const std::string& text) {
    if (out_.is_open()) out_ << text << '\n' << std::flush;
    if (echo_) std::fprintf(stderr, "%s\n", text.c_str());
  }

 private:
  std::ofstream out_;
  bool echo_ = false;
};

// ------------------------------------------------------------------ helpers

struct DataSplits {
  Dataset train;
  Dataset test;
};

inline DataSplits load_data(const TrainConfig& cfg) {
  if (cfg.dataset == "synthetic")
    return {synthetic_dataset(cfg.synthetic_train, cfg.synthetic_classes, derive_seed(cfg.seed, {0xDA7A, 0}),
                              cfg.normalization),
            synthetic_dataset(cfg.synthetic_test, cfg.synthetic_classes, derive_seed(cfg.seed, {0xDA7A, 1}),
                              cfg.normalization)};
  if (!std::filesystem::is_directory(cfg.data_dir)) throw IoError("data directory not found: " + cfg.data_dir);
  return {load_cifar_dir(cfg.data_dir, cfg.classes(), true, cfg.normalization),
          load_cifar_dir(cfg.data_dir, cfg.classes(), false, cfg.normalization)};
}

/// Top-1 accuracy in eval mode.
template <typename T>
double evaluate_model(Model<T>& model, const Dataset& data, std::size_t batch_size = 100) {
  NoGradGuard no_grad;
  BatchIterator<T> it(data, batch_size, 0, 0, false);
  std::size_t correct = 0;
  while (auto batch = it.next()) {
    auto logits = model.forward(batch->images, Mode::eval).logits;
    const std::size_t classes = logits.size(1);
    for (std::size_t b = 0; b < batch->labels.size(); ++b) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < classes; ++c)
        if (logits.at(b * classes + c) > logits.at(b * classes + best)) best = c;
      correct += static_cast<int>(best) == batch->labels[b];
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

/// Eval-mode logits for the whole dataset, row-major [N x classes].
template <typename T>
std::vector<T> predict_logits(Model<T>& model, const Dataset& data, std::size_t batch_size = 100) {
  NoGradGuard no_grad;
  BatchIterator<T> it(data, batch_size, 0, 0, false);
  std::vector<T> out;
  while (auto batch = it.next()) {
    auto logits = model.forward(batch->images, Mode::eval).logits;
    out.insert(out.end(), logits.data().begin(), logits.data().end());
  }
  return out;
}

inline constexpr const char* kMomentumPrefix = "momentum/";

inline Model<float> model_from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.manifest.contains("model")) throw FormatError("checkpoint manifest has no model spec");
  ModelSpec spec;
  try {
    spec = ckpt.manifest.at("model").get<ModelSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint model spec is invalid: ") + e.what());
  }
  Rng rng(0);
  Model<float> model(spec, rng);
  model.load_state(ckpt.arrays);
  return model;
}

/// Rebuilds the sparse state stored alongside a student checkpoint.
inline std::optional<SparseState> sparse_state_from_checkpoint(const Checkpoint& ckpt, const Model<float>& model) {
  if (!ckpt.manifest.contains("sparse")) return std::nullopt;
  const auto& s = ckpt.manifest.at("sparse");
  SparseState state;
  try {
    s.at("config").get_to(state.config);
    s.at("budget").get_to(state.budget);
    s.at("prune_rate").get_to(state.prune_rate);
    for (const auto& l : s.at("layers")) {
      LayerMask layer;
      l.at("name").get_to(layer.name);
      l.at("param").get_to(layer.param);
      l.at("contribution").get_to(layer.contribution);
      const auto* bits = ckpt.find_mask(layer.name);
      if (!bits) throw FormatError("checkpoint is missing mask '" + layer.name + "'");
      layer.bits = bits->bits;
      if (layer.param >= model.params().size()) throw FormatError("mask '" + layer.name + "' has no parameter");
      layer.columns = model.params()[layer.param].columns;
      state.layers.push_back(std::move(layer));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint sparse state is invalid: ") + e.what());
  }
  try {
    check_mask_coverage(model, state);
  } catch (const ContractError& e) {
    throw FormatError(e.what());
  }
  return state;
}

// ----------------------------------------------------------------- training

enum class Stage { teacher, student };

struct TrainResult {
  std::filesystem::path checkpoint;
  RunMetrics metrics;
  double test_accuracy = 0.0;
};

namespace detail {

/// Flushes denormal floats to zero for the guard's lifetime (x86 only).
class DenormalGuard {
 public:
#if defined(__SSE__)
  DenormalGuard() : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | 0x8040); }
  ~DenormalGuard() { _mm_setcsr(saved_); }

 private:
  unsigned int saved_;
#endif
};

inline Checkpoint make_checkpoint(const TrainConfig& cfg, Stage stage, const Model<float>& model,
                                  const SgdMomentum<float>& opt, const SparseState* sparse, std::size_t epoch,
                                  const RunMetrics& metrics) {
  Checkpoint ckpt;
  ckpt.manifest = {{"format", "sdist-checkpoint"},
                   {"kind", stage == Stage::teacher ? "teacher" : "student"},
                   {"config", cfg},
                   {"model", model.spec()},
                   {"epoch", epoch},
                   {"test_accuracy", metrics.rows.empty() ? 0.0 : metrics.rows.back().test_accuracy},
                   {"metrics", metrics}};
  if (sparse) ckpt.manifest["sparse"] = sparse_state_summary(*sparse);
  ckpt.arrays = model.state();
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    const auto& p = model.params()[i];
    const auto m = opt.momentum(i);
    ckpt.arrays.push_back({kMomentumPrefix + p.name, p.value.shape(), {m.begin(), m.end()}});
  }
  if (sparse)
    for (const auto& l : sparse->layers) ckpt.masks.push_back({l.name, l.bits});
  return ckpt;
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_bytes_atomic(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

/// Config fields that may differ between an interrupted run and its resumption.
inline nlohmann::json resumable_view(const TrainConfig& cfg) {
  nlohmann::json j = cfg;
  j.erase("resume");
  j.erase("stop_after");
  return j;
}

}  // namespace detail

/// Shared epoch loop. The teacher stage minimises cross-entropy on a dense
/// convolutional network; the student stage minimises the distillation
/// objective while the mask engine prunes and regrows between epochs.
inline TrainResult run_training(TrainConfig cfg, Stage stage, bool echo = false) {
  cfg.normalize();
  cfg.validate();
  detail::DenormalGuard denormals;
  const bool is_student = stage == Stage::student;
  const std::string phase = is_student ? "distill" : "train-teacher";
  const std::filesystem::path out_dir(cfg.out_dir);
  std::filesystem::create_directories(out_dir);
  const auto ckpt_path = out_dir / (is_student ? "student.ckpt" : "teacher.ckpt");
  const auto metrics_path = out_dir / (is_student ? "metrics.csv" : "teacher_metrics.csv");

  RunLog log(out_dir / "run.log", !cfg.resume.empty(), echo);
  auto data = load_data(cfg);

  std::optional<Model<float>> teacher;
  if (is_student) {
    if (cfg.teacher_checkpoint.empty()) throw ConfigError("distill needs a teacher checkpoint");
    auto tck = load_checkpoint(cfg.teacher_checkpoint);
    if (tck.manifest.value("kind", "") != "teacher")
      throw ConfigError(cfg.teacher_checkpoint + " is not a teacher checkpoint");
    teacher.emplace(model_from_checkpoint(tck));
    if (teacher->spec().classes != cfg.classes()) throw ConfigError("teacher class count does not match the dataset");
  }

  const ModelSpec& spec = is_student ? cfg.student : cfg.teacher;
  Rng init_rng(derive_seed(cfg.seed, {is_student ? 0x57u : 0x7Eu, 0}));
  Model<float> model(spec, init_rng);

  if (teacher) {
    // Probe one image to check tap compatibility before training.
    NoGradGuard no_grad;
    std::vector<std::size_t> one{0};
    auto probe = make_batch<float>(data.train, one);
    auto ts = teacher->forward(probe.images, Mode::eval).taps;
    auto ss = model.forward(probe.images, Mode::eval).taps;
    try {
      (void)pair_taps(ss, ts);
    } catch (const Error& e) {
      throw ConfigError(std::string("teacher and student taps are incompatible: ") + e.what());
    }
  }

  std::vector<Tensor<float>> tensors;
  for (auto& p : model.params()) tensors.push_back(p.value);
  SgdMomentum<float> opt(tensors, cfg.momentum, cfg.weight_decay);

  std::optional<SparseState> sparse;
  if (is_student) {
    Rng mask_rng(derive_seed(cfg.seed, {0x3A5Cu, 0}));
    sparse = init_mask(model, cfg.sparse, mask_rng);
    apply_mask(*sparse, model);
  }

  RunMetrics metrics;
  if (sparse)
    for (const auto& l : sparse->layers) metrics.layers.push_back(l.name);
  std::size_t start_epoch = 0;

  if (!cfg.resume.empty()) {
    auto ck = load_checkpoint(cfg.resume);
    if (!ck.manifest.contains("config")) throw FormatError(cfg.resume + ": manifest has no config");
    if (detail::resumable_view(ck.manifest.at("config").get<TrainConfig>()) != detail::resumable_view(cfg))
      throw ConfigError("resume checkpoint was written with a different configuration");
    model.load_state(ck.arrays);
    for (std::size_t i = 0; i < model.params().size(); ++i) {
      const auto* m = ck.find_array(kMomentumPrefix + model.params()[i].name);
      if (!m || m->values.size() != opt.momentum(i).size())
        throw FormatError(cfg.resume + ": missing momentum for '" + model.params()[i].name + "'");
      std::copy(m->values.begin(), m->values.end(), opt.momentum(i).begin());
    }
    if (sparse) sparse = sparse_state_from_checkpoint(ck, model);
    metrics = ck.manifest.at("metrics").get<RunMetrics>();
    start_epoch = ck.manifest.at("epoch").get<std::size_t>();
    log.line("resume from=" + cfg.resume + " epoch=" + std::to_string(start_epoch));
  }

  const std::size_t end_epoch =
      cfg.stop_after ? std::min(cfg.epochs, std::max(cfg.stop_after, start_epoch)) : cfg.epochs;
  const bool dense_student = sparse && cfg.sparse.density >= 1.0;
  log.line("phase=" + phase + (start_epoch ? " continue" : " start") + " epoch=" + std::to_string(start_epoch) + " epochs=" + std::to_string(cfg.epochs) +
           " params=" + std::to_string(model.total_params()) +
           (sparse ? " density=" + std::to_string(sparse->density()) : std::string()));

  for (std::size_t e = start_epoch; e < end_epoch; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = cfg.lr_at(e);
    BatchIterator<float> batches(data.train, cfg.batch_size, cfg.seed, e, true);
    double sum_total = 0, sum_ce = 0, sum_kd = 0, sum_at = 0;
    std::size_t seen = 0, batch_index = 0;
    std::vector<const std::uint8_t*> masks;
    if (sparse) masks = mask_table(*sparse, model);

    while (auto batch = batches.next()) {
      const auto n = static_cast<double>(batch->labels.size());
      auto fs = model.forward(batch->images, Mode::train);
      LossBreakdown<float> loss;
      if (teacher) {
        ForwardResult<float> ft;
        {
          NoGradGuard no_grad;
          ft = teacher->forward(batch->images, Mode::eval);
        }
        loss = total_loss(batch->labels, fs.logits, ft.logits, fs.taps, ft.taps, cfg.distill);
      } else {
        loss.ce = cross_entropy(fs.logits, batch->labels);
        loss.total = loss.ce;
      }
      const double total = loss.total.item();
      if (!std::isfinite(total))
        throw NumericError("non-finite loss at epoch " + std::to_string(e + 1) + " batch " +
                           std::to_string(batch_index + 1));
      model.zero_grad();
      backward(loss.total);
      opt.step(lr, masks);
      if (sparse) {
        auto views = prunable_view(model, *sparse, &opt);
        apply_mask<float>(*sparse, views);
        accumulate_momentum<float>(*sparse, views);
      }
      sum_total += total * n;
      sum_ce += loss.ce.item() * n;
      if (loss.kd.defined()) sum_kd += loss.kd.item() * n;
      if (loss.at.defined()) sum_at += loss.at.item() * n;
      seen += batch->labels.size();
      ++batch_index;
    }

    const double accuracy = evaluate_model(model, data.test, cfg.batch_size);

    // Mask update between epochs; the last epoch ends on a trained mask.
    if (sparse && !dense_student && e + 1 < cfg.epochs) {
      auto views = prunable_view(model, *sparse, &opt);
      const auto update = sparse_epoch_end<float>(*sparse, views, e, cfg.epochs);
      std::size_t pruned = 0, regrown = 0;
      for (const auto& l : update.layers) {
        pruned += l.pruned.size();
        regrown += l.regrown.size();
      }
      log.line("mask-update epoch=" + std::to_string(e + 1) + " prune_rate=" + std::to_string(sparse->prune_rate) +
               " pruned=" + std::to_string(pruned) + " regrown=" + std::to_string(regrown) +
               " nonzero=" + std::to_string(sparse->nonzero()));
    }

    EpochRow row;
    row.epoch = e + 1;
    row.lr = lr;
    row.loss_total = sum_total / static_cast<double>(seen);
    row.loss_ce = sum_ce / static_cast<double>(seen);
    row.loss_kd = sum_kd / static_cast<double>(seen);
    row.loss_at = sum_at / static_cast<double>(seen);
    row.test_accuracy = accuracy;
    if (sparse) {
      const auto counts = count_params(model, &*sparse);
      const auto prunable = sparse->total();
      row.density = static_cast<double>(prunable - (counts.total - counts.nonzero)) / static_cast<double>(prunable);
      for (const auto& l : sparse->layers)
        row.layer_density.push_back(static_cast<double>(l.active()) / static_cast<double>(l.size()));
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    row.wall_time = cfg.deterministic ? 0.0 : seconds;
    metrics.rows.push_back(row);

    char buf[256];
    std::snprintf(buf, sizeof buf, "epoch=%zu lr=%.6g loss=%.6g ce=%.6g kd=%.6g at=%.6g acc=%.4f density=%.4f time=%.2fs",
                  row.epoch, row.lr, row.loss_total, row.loss_ce, row.loss_kd, row.loss_at, row.test_accuracy,
                  row.density, seconds);
    log.line(buf);

    save_checkpoint(ckpt_path, detail::make_checkpoint(cfg, stage, model, opt, sparse ? &*sparse : nullptr, e + 1, metrics));
    detail::write_text_atomic(metrics_path, metrics.csv());
  }

  log.line("phase=" + phase + " end epoch=" + std::to_string(end_epoch));
  if (is_student) {
    nlohmann::json manifest = {{"config", cfg},
                               {"student", cfg.student},
                               {"teacher_checkpoint", cfg.teacher_checkpoint},
                               {"epochs_completed", end_epoch},
                               {"metrics_file", metrics_path.filename().string()},
                               {"checkpoint_file", ckpt_path.filename().string()}};
    detail::write_text_atomic(out_dir / "manifest.json", manifest.dump(2) + "\n");
  }
  TrainResult result;
  result.checkpoint = ckpt_path;
  result.metrics = std::move(metrics);
  result.test_accuracy = result.metrics.rows.empty() ? 0.0 : result.metrics.rows.back().test_accuracy;
  return result;
}

inline TrainResult train_teacher(const TrainConfig& cfg, bool echo = false) {
  return run_training(cfg, Stage::teacher, echo);
}

inline TrainResult sparse_distill(const TrainConfig& cfg, bool echo = false) {
  return run_training(cfg, Stage::student, echo);
}

/// Loads a checkpoint (masks applied) and returns top-1 accuracy on `data`.
inline double evaluate(const std::filesystem::path& checkpoint, const Dataset& data, std::size_t batch_size = 100) {
  auto ck = load_checkpoint(checkpoint);
  auto model = model_from_checkpoint(ck);
  if (auto state = sparse_state_from_checkpoint(ck, model)) apply_mask(*state, model);
  if (model.spec().classes != data.classes) throw ConfigError("checkpoint class count does not match the dataset");
  return evaluate_model(model, data, batch_size);
}

// ---------------------------------------------------------------- reporting

struct AccountingReport {
  ParamCount teacher_params;
  ParamCount student_params;
  std::uint64_t teacher_flops = 0;
  std::uint64_t student_flops = 0;

  double param_ratio() const {
    return static_cast<double>(teacher_params.nonzero) / static_cast<double>(student_params.nonzero);
  }
  double flops_ratio() const { return static_cast<double>(teacher_flops) / static_cast<double>(student_flops); }

  nlohmann::json to_json() const {
    return {{"teacher", {{"params_total", teacher_params.total},
                         {"params_nonzero", teacher_params.nonzero},
                         {"flops", teacher_flops}}},
            {"student", {{"params_total", student_params.total},
                         {"params_nonzero", student_params.nonzero},
                         {"flops", student_flops}}},
            {"param_reduction", param_ratio()},
            {"flops_reduction", flops_ratio()}};
  }
};

inline AccountingReport account(const Model<float>& teacher, const Model<float>& student, const SparseState* masks) {
  return {count_params(teacher), count_params(student, masks), count_flops(teacher), count_flops(student)};
}

inline AccountingReport report(const std::filesystem::path& teacher_ckpt, const std::filesystem::path& student_ckpt) {
  auto tc = load_checkpoint(teacher_ckpt);
  auto sc = load_checkpoint(student_ckpt);
  auto teacher = model_from_checkpoint(tc);
  auto student = model_from_checkpoint(sc);
  auto masks = sparse_state_from_checkpoint(sc, student);
  return account(teacher, student, masks ? &*masks : nullptr);
}

/// Accounting for the full-size ResNet-50 teacher against a hybrid
/// ResNet-26 student at the given density and pruning mode (no training).
inline AccountingReport full_scale_report(double density, PruneMode mode, std::size_t extent = 3,
                                           std::size_t heads = 8, std::size_t classes = 10, std::uint64_t seed = 0,
                                           DepthClass student_depth = DepthClass::student26,
                                           Variant variant = Variant::hybrid) {
  auto tspec = ModelSpec::preset(Role::teacher, Variant::conv, DepthClass::teacher50, classes);
  auto sspec = ModelSpec::preset(Role::student, variant, student_depth, classes);
  sspec.extent = extent;
  sspec.heads = heads;
  Rng rng(seed);
  Model<float> teacher(tspec, rng);
  Model<float> student(sspec, rng);
  SparseConfig sc;
  sc.density = density;
  sc.mode = mode;
  auto masks = init_mask(student, sc, rng);
  return account(teacher, student, &masks);
}

}  // namespace sdist
