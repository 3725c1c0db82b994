#include <gtest/gtest.h>

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "sdist/trainer.hpp"

using namespace sdist;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("sdist_test_trainer_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TrainConfig tiny_config(const fs::path& out) {
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 20;
  cfg.lr_drops = {2};
  cfg.synthetic_train = 40;
  cfg.synthetic_test = 20;
  cfg.deterministic = true;
  cfg.sparse.density = 0.5;
  cfg.out_dir = out.string();
  return cfg;
}

class TrainerTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = scratch("suite");
    auto cfg = tiny_config(root_ / "teacher");
    cfg.epochs = 2;
    teacher_ = train_teacher(cfg).checkpoint;
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static TrainConfig student_config(const std::string& name) {
    auto cfg = tiny_config(root_ / name);
    cfg.teacher_checkpoint = teacher_.string();
    return cfg;
  }

  static inline fs::path root_;
  static inline fs::path teacher_;
};

}  // namespace

TEST(TrainConfig, LearningRateTable) {
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.lr_drops = {120, 160, 180};
  EXPECT_DOUBLE_EQ(cfg.lr_at(0), 0.1);
  EXPECT_DOUBLE_EQ(cfg.lr_at(119), 0.1);
  EXPECT_NEAR(cfg.lr_at(120), 0.01, 1e-15);
  EXPECT_NEAR(cfg.lr_at(159), 0.01, 1e-15);
  EXPECT_NEAR(cfg.lr_at(160), 0.001, 1e-15);
  EXPECT_NEAR(cfg.lr_at(180), 0.0001, 1e-15);
  EXPECT_NEAR(cfg.lr_at(199), 0.0001, 1e-15);
}

TEST(TrainConfig, PartialJsonMergesOverDefaults) {
  auto cfg = nlohmann::json::parse(R"({"epochs": 5, "distill": {"alpha": 0.5}, "sparse": {"mode": "column"}})")
                 .get<TrainConfig>();
  EXPECT_EQ(cfg.epochs, 5u);
  EXPECT_DOUBLE_EQ(cfg.distill.alpha, 0.5);
  EXPECT_DOUBLE_EQ(cfg.distill.beta, 1000.0);
  EXPECT_EQ(cfg.sparse.mode, PruneMode::column);
  EXPECT_EQ(cfg.batch_size, 100u);
  nlohmann::json round = cfg;
  EXPECT_EQ(round.get<TrainConfig>().epochs, 5u);
}

TEST(TrainConfig, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(nlohmann::json::parse(R"({"epoch": 5})").get<TrainConfig>(), ConfigError);
  EXPECT_THROW(nlohmann::json::parse(R"({"distill": {"gamma": 1}})").get<TrainConfig>(), ConfigError);
  EXPECT_THROW(nlohmann::json::parse(R"({"epochs": "many"})").get<TrainConfig>(), ConfigError);
  EXPECT_THROW(nlohmann::json::parse(R"([1, 2])").get<TrainConfig>(), ConfigError);
}

TEST(TrainConfig, ConfigFileWithComments) {
  auto dir = scratch("config");
  {
    std::ofstream out(dir / "run.json");
    out << "// smoke run\n{\n  \"epochs\": 4, /* short */\n  \"seed\": 9\n}\n";
  }
  auto cfg = load_config_file(dir / "run.json");
  EXPECT_EQ(cfg.epochs, 4u);
  EXPECT_EQ(cfg.seed, 9u);
  EXPECT_THROW(load_config_file(dir / "missing.json"), IoError);
  {
    std::ofstream out(dir / "bad.json");
    out << "{ epochs: 4 }";
  }
  EXPECT_THROW(load_config_file(dir / "bad.json"), ConfigError);
  fs::remove_all(dir);
}

TEST(TrainConfig, Validation) {
  TrainConfig cfg;
  cfg.normalize();
  EXPECT_NO_THROW(cfg.validate());
  auto bad = cfg;
  bad.epochs = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = cfg;
  bad.lr_drops = {5, 3};
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = cfg;
  bad.dataset = "cifar10";
  bad.normalize();
  EXPECT_THROW(bad.validate(), ConfigError);  // no data_dir
  bad = cfg;
  bad.student.heads = 3;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = cfg;
  bad.dataset = "imagenet";
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Metrics, CsvLayout) {
  RunMetrics m;
  m.layers = {"a", "b"};
  EpochRow r;
  r.epoch = 1;
  r.lr = 0.1;
  r.layer_density = {0.5, 0.25};
  m.rows.push_back(r);
  const auto csv = m.csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "epoch,lr,loss_total,loss_ce,loss_kd,loss_at,test_accuracy,density,density:a,density:b,wall_time");
  EXPECT_NE(csv.find("\n1,0.1,0,0,0,0,0,1,0.5,0.25,0\n"), std::string::npos) << csv;
}

TEST(CheckpointFile, RoundTrip) {
  Checkpoint ck;
  ck.manifest = {{"kind", "student"}, {"epoch", 3}};
  ck.arrays.push_back({"w", Shape{2, 3}, {1, 2, 3, 4, 5, 6}});
  ck.arrays.push_back({"b", Shape{1}, {-0.5f}});
  ck.masks.push_back({"w", {1, 0, 1, 0, 1, 1}});
  auto bytes = encode_checkpoint(ck);
  auto back = decode_checkpoint(bytes);
  EXPECT_EQ(back.manifest, ck.manifest);
  ASSERT_EQ(back.arrays.size(), 2u);
  EXPECT_EQ(back.arrays[0].shape, (Shape{2, 3}));
  EXPECT_EQ(back.arrays[0].values, ck.arrays[0].values);
  ASSERT_NE(back.find_mask("w"), nullptr);
  EXPECT_EQ(back.find_mask("w")->bits, ck.masks[0].bits);
  EXPECT_EQ(encode_checkpoint(back), bytes);
}

TEST(CheckpointFile, CorruptionIsFormatError) {
  Checkpoint ck;
  ck.manifest = {{"kind", "teacher"}};
  ck.arrays.push_back({"w", Shape{4}, {1, 2, 3, 4}});
  auto bytes = encode_checkpoint(ck);
  auto flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x10;
  EXPECT_THROW(decode_checkpoint(flipped), FormatError);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 7);
  EXPECT_THROW(decode_checkpoint(truncated), FormatError);
  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(magic), FormatError);
  EXPECT_THROW(decode_checkpoint({}), FormatError);

  auto dir = scratch("ckpt");
  save_checkpoint(dir / "a.ckpt", ck);
  EXPECT_EQ(load_checkpoint(dir / "a.ckpt").arrays[0].values, ck.arrays[0].values);
  EXPECT_FALSE(fs::exists(dir / "a.ckpt.tmp"));
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), IoError);
  fs::remove_all(dir);
}

TEST_F(TrainerTest, TeacherRunWritesArtifacts) {
  EXPECT_TRUE(fs::exists(teacher_));
  const auto dir = teacher_.parent_path();
  EXPECT_TRUE(fs::exists(dir / "teacher_metrics.csv"));
  const auto log = slurp(dir / "run.log");
  EXPECT_NE(log.find("phase=train-teacher start"), std::string::npos);
  EXPECT_NE(log.find("phase=train-teacher end"), std::string::npos);
  auto ck = load_checkpoint(teacher_);
  EXPECT_EQ(ck.manifest.at("kind"), "teacher");
  EXPECT_TRUE(ck.masks.empty());
}

TEST_F(TrainerTest, DistillRecordsLossComponents) {
  auto cfg = student_config("components");
  auto result = sparse_distill(cfg);
  ASSERT_EQ(result.metrics.rows.size(), 3u);
  for (const auto& r : result.metrics.rows) {
    const double parts = cfg.distill.alpha * r.loss_ce + (1 - cfg.distill.alpha) * r.loss_kd +
                         cfg.distill.beta / 2 * r.loss_at;
    EXPECT_NEAR(r.loss_total, parts, 1e-5 * std::max(1.0, std::abs(r.loss_total)));
    EXPECT_NEAR(r.density, 0.5, 1e-3);
    EXPECT_EQ(r.wall_time, 0.0);
  }
  EXPECT_TRUE(fs::exists(fs::path(cfg.out_dir) / "manifest.json"));
  const auto log = slurp(fs::path(cfg.out_dir) / "run.log");
  std::size_t starts = 0;
  for (auto p = log.find("phase="); p != std::string::npos; p = log.find("phase=", p + 1))
    starts += log.compare(p, 20, "phase=distill start ") == 0;
  EXPECT_EQ(starts, 1u);
  EXPECT_EQ(log.find("fine"), std::string::npos);
}

TEST_F(TrainerTest, ResumeMatchesUninterruptedRun) {
  auto full = student_config("full");
  sparse_distill(full);

  auto part = student_config("part");
  part.stop_after = 1;
  sparse_distill(part);
  auto rest = student_config("part");
  rest.resume = (fs::path(rest.out_dir) / "student.ckpt").string();
  sparse_distill(rest);

  EXPECT_EQ(slurp(fs::path(full.out_dir) / "metrics.csv"), slurp(fs::path(part.out_dir) / "metrics.csv"));
  auto a = load_checkpoint(fs::path(full.out_dir) / "student.ckpt");
  auto b = load_checkpoint(fs::path(part.out_dir) / "student.ckpt");
  ASSERT_EQ(a.arrays.size(), b.arrays.size());
  for (std::size_t i = 0; i < a.arrays.size(); ++i) EXPECT_EQ(a.arrays[i].values, b.arrays[i].values) << a.arrays[i].name;
  ASSERT_EQ(a.masks.size(), b.masks.size());
  for (std::size_t i = 0; i < a.masks.size(); ++i) EXPECT_EQ(a.masks[i].bits, b.masks[i].bits);
}

TEST_F(TrainerTest, ResumeWithDifferentConfigIsRejected) {
  auto part = student_config("mismatch");
  part.stop_after = 1;
  sparse_distill(part);
  auto rest = student_config("mismatch");
  rest.resume = (fs::path(rest.out_dir) / "student.ckpt").string();
  rest.distill.alpha = 0.7;
  EXPECT_THROW(sparse_distill(rest), ConfigError);
}

TEST_F(TrainerTest, DeterministicRunsAreByteIdentical) {
  auto cfg = student_config("det");
  sparse_distill(cfg);
  const auto ckpt = slurp(fs::path(cfg.out_dir) / "student.ckpt");
  const auto csv = slurp(fs::path(cfg.out_dir) / "metrics.csv");
  sparse_distill(cfg);
  EXPECT_EQ(slurp(fs::path(cfg.out_dir) / "student.ckpt"), ckpt);
  EXPECT_EQ(slurp(fs::path(cfg.out_dir) / "metrics.csv"), csv);
}

TEST_F(TrainerTest, DenseCrossEntropyStudentKeepsAllWeights) {
  auto cfg = student_config("dense");
  cfg.sparse.density = 1.0;
  cfg.distill.alpha = 1.0;
  cfg.distill.beta = 0.0;
  auto result = sparse_distill(cfg);
  auto ck = load_checkpoint(result.checkpoint);
  for (const auto& m : ck.masks)
    for (auto b : m.bits) ASSERT_EQ(b, 1);
  for (const auto& r : result.metrics.rows) {
    EXPECT_EQ(r.loss_kd, 0.0);
    EXPECT_EQ(r.loss_at, 0.0);
    EXPECT_DOUBLE_EQ(r.loss_total, r.loss_ce);
  }
  auto rep = report(teacher_, result.checkpoint);
  EXPECT_EQ(rep.student_params.nonzero, rep.student_params.total);
  EXPECT_EQ(rep.teacher_params.nonzero, rep.teacher_params.total);
}

TEST_F(TrainerTest, MaskedModelEqualsDenseCopyWithZeros) {
  auto cfg = student_config("masked");
  cfg.epochs = 2;
  auto result = sparse_distill(cfg);
  auto ck = load_checkpoint(result.checkpoint);
  auto data = load_data(cfg);

  auto masked = model_from_checkpoint(ck);
  auto state = sparse_state_from_checkpoint(ck, masked);
  ASSERT_TRUE(state);
  apply_mask(*state, masked);

  // Dense copy: zeros written explicitly, no mask metadata.
  Checkpoint dense = ck;
  dense.masks.clear();
  dense.manifest.erase("sparse");
  for (const auto& l : state->layers)
    for (auto& a : dense.arrays)
      if (a.name == l.name)
        for (std::size_t i = 0; i < l.bits.size(); ++i)
          if (!l.bits[i]) a.values[i] = 0.0f;
  auto copy = model_from_checkpoint(dense);

  const auto la = predict_logits(masked, data.test), lb = predict_logits(copy, data.test);
  ASSERT_EQ(la.size(), lb.size());
  for (std::size_t i = 0; i < la.size(); ++i) EXPECT_NEAR(la[i], lb[i], 1e-6);
  auto path = fs::path(cfg.out_dir) / "dense.ckpt";
  save_checkpoint(path, dense);
  EXPECT_EQ(evaluate(result.checkpoint, data.test), evaluate(path, data.test));
}

TEST_F(TrainerTest, Errors) {
  auto cfg = student_config("errors");
  cfg.teacher_checkpoint.clear();
  EXPECT_THROW(sparse_distill(cfg), ConfigError);
  cfg.teacher_checkpoint = "/nonexistent/teacher.ckpt";
  EXPECT_THROW(sparse_distill(cfg), IoError);

  auto student = student_config("errors_student");
  student.epochs = 1;
  auto s = sparse_distill(student);
  cfg.teacher_checkpoint = s.checkpoint.string();
  EXPECT_THROW(sparse_distill(cfg), ConfigError);  // not a teacher

  auto other = student_config("errors_classes");
  other.synthetic_classes = 3;
  EXPECT_THROW(sparse_distill(other), ConfigError);
}

TEST(Evaluation, UntrainedModelIsNearChance) {
  Rng rng(3);
  auto model = build_model<float>(ModelSpec::preset(Role::student, Variant::hybrid, DepthClass::toy, 2), rng);
  auto data = synthetic_dataset(200, 2, 4);
  const double acc = evaluate_model(model, data);
  EXPECT_GE(acc, 0.2);
  EXPECT_LE(acc, 0.8);
}

TEST(Reporting, FullScaleRatios) {
  auto irregular = full_scale_report(0.1, PruneMode::irregular);
  EXPECT_NEAR(irregular.param_ratio(), 30.26, 0.2 * 30.26);
  auto column = full_scale_report(0.5, PruneMode::column);
  EXPECT_NEAR(column.flops_ratio(), 2.02, 0.2 * 2.02);
  auto json = irregular.to_json();
  EXPECT_EQ(json.at("param_reduction").get<double>(), irregular.param_ratio());
}
