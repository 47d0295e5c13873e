#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "gdnsq/errors.hpp"
#include "gdnsq/pipeline.hpp"

namespace gdnsq {
namespace {

struct Fixture {
  DataSplits data;
  TeacherResult teacher;
};

const Fixture& gaussians() {
  static const Fixture f = [] {
    DataSource src;
    src.n_train = 400;
    src.n_val = 200;
    auto data = load_data(src);
    TeacherOptions opt;
    opt.epochs = 15;
    auto teacher = train_teacher(opt, data.train, data.val);
    return Fixture{std::move(data), std::move(teacher)};
  }();
  return f;
}

RunConfig small_config() {
  RunConfig c;
  c.epochs = 3;
  c.batch_size = 64;
  return c;
}

QatRunner make_runner(const RunConfig& config) {
  const auto& f = gaussians();
  Model student = Model::student_from(f.teacher.model, config.noise_mode);
  ptq_minmax(student, f.data.train);
  return QatRunner(config, f.teacher.model.clone(), std::move(student), f.data.train, f.data.val);
}

TEST(RunConfig, JsonRoundTripAndUnknownKeys) {
  RunConfig c;
  c.targets = {2.0, 3.0};
  c.noise_mode = NoiseMode::bernoulli_variance_matched;
  c.distill = DistillLoss::hard_label_ce;
  c.initial_t_q = 100.0;
  c.data = DataSource::parse("concentric_rings");
  auto back = RunConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.hash(), c.hash());
  RunConfig other = c;
  other.seed = 1;
  EXPECT_NE(other.hash(), c.hash());
  EXPECT_THROW(RunConfig::from_json(R"({"wbitz": 4})"), DomainError);
  EXPECT_THROW(RunConfig::from_json("[1, 2]"), DomainError);
  EXPECT_THROW(RunConfig::from_json("{"), DomainError);
  auto partial = RunConfig::from_json(R"({"wbits": 3, "data": "concentric_rings"})", c);
  EXPECT_EQ(partial.targets.weights, 3.0);
  EXPECT_EQ(partial.targets.activations, 3.0);
  EXPECT_EQ(partial.data.kind, "concentric_rings");
}

TEST(RunConfig, Validation) {
  RunConfig c;
  c.targets.weights = 0.5;
  EXPECT_THROW(c.validate(), DomainError);
  c = RunConfig{};
  c.batch_size = 1;
  EXPECT_THROW(c.validate(), DomainError);
  EXPECT_NO_THROW(RunConfig{}.validate());
}

TEST(DataSourceParsing, Forms) {
  auto idx = DataSource::parse("idx:a.idx:b.idx");
  EXPECT_EQ(idx.kind, "idx");
  EXPECT_EQ(idx.images, "a.idx");
  EXPECT_EQ(idx.labels, "b.idx");
  EXPECT_EQ(idx.describe(), "idx:a.idx:b.idx");
  EXPECT_THROW(DataSource::parse("idx:only"), DomainError);
  EXPECT_THROW(DataSource::parse("spirals"), DomainError);
}

TEST(Teacher, DeterministicAndAccurate) {
  const auto& f = gaussians();
  EXPECT_GE(f.teacher.val_accuracy, 0.95);
  TeacherOptions opt;
  opt.epochs = 15;
  auto again = train_teacher(opt, f.data.train, f.data.val);
  EXPECT_EQ(again.epoch_losses, f.teacher.epoch_losses);
  Checkpoint a, b;
  f.teacher.model.save(a);
  again.model.save(b);
  EXPECT_EQ(a.serialize(), b.serialize());
}

TEST(Ptq, TenBitsEverywhereAndWeightsUntouched) {
  const auto& f = gaussians();
  Model student = Model::student_from(f.teacher.model);
  Checkpoint before;
  student.save(before);
  ptq_minmax(student, f.data.train);
  for (const auto* q : std::as_const(student).weight_quantizers()) EXPECT_NEAR(q->bitwidth_value(), 10.0, 1e-9);
  for (const auto* q : std::as_const(student).activation_quantizers()) EXPECT_NEAR(q->bitwidth_value(), 10.0, 1e-9);
  for (std::size_t i = 0; i < student.layers().size(); ++i) {
    auto w = student.layers()[i].weight.data();
    EXPECT_EQ(std::vector<double>(w.begin(), w.end()), before.f64("model/L" + std::to_string(i) + "/weight"));
  }
  const auto& wq = *student.layers()[1].weight_quantizer;
  auto w = student.layers()[1].weight.data();
  EXPECT_EQ(wq.lower_value(), *std::min_element(w.begin(), w.end()));
  EXPECT_NEAR(wq.upper_value(), *std::max_element(w.begin(), w.end()), 1e-12);
  EXPECT_TRUE(student.quantizers_initialized());
}

TEST(Ptq, DegenerateSiteIsNamed) {
  const auto& f = gaussians();
  Model student = Model::student_from(f.teacher.model);
  auto w = student.layers()[1].weight.mutable_data();
  std::fill(w.begin(), w.end(), 0.25);
  try {
    ptq_minmax(student, f.data.train);
    FAIL() << "expected DomainError";
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("L1.w"), std::string::npos);
  }
}

TEST(Audit, CollapsedSiteReportsZeroBitsWithWarning) {
  const auto& f = gaussians();
  Model student = Model::student_from(f.teacher.model);
  ptq_minmax(student, f.data.train);
  auto& wq = *student.layers()[1].weight_quantizer;
  // a scale far larger than the range puts every weight on level zero
  wq.set_scale(1e6);
  auto report = audit_bitwidth(student, f.data.val);
  EXPECT_EQ(report.weights[0].levels, 1u);
  EXPECT_EQ(report.weights[0].actual, 0.0);
  ASSERT_FALSE(report.warnings.empty());
  EXPECT_NE(report.warnings[0].find("L1.w"), std::string::npos);
}

TEST(Audit, LevelCountsBoundedByEstimate) {
  const auto& f = gaussians();
  Model student = Model::student_from(f.teacher.model);
  ptq_minmax(student, f.data.train);
  for (auto* q : student.weight_quantizers()) q->set_range(q->lower_value(), q->upper_value(), 3.0);
  auto report = audit_bitwidth(student, f.data.val);
  for (const auto& s : report.weights) {
    EXPECT_LE(s.levels, 8u);
    EXPECT_EQ(s.actual, std::ceil(std::log2(static_cast<double>(s.levels))));
  }
  std::ostringstream out;
  report.print(out);
  EXPECT_NE(out.str().find("max actual"), std::string::npos);
}

TEST(Qat, UninitializedStudentIsRefused) {
  const auto& f = gaussians();
  EXPECT_THROW(QatRunner(small_config(), f.teacher.model.clone(), Model::student_from(f.teacher.model), f.data.train,
                         f.data.val),
               ContractError);
}

TEST(Qat, MetricsHaveOneRowPerBatchAndAudit) {
  auto runner = make_runner(small_config());
  auto summary = runner.run();
  EXPECT_EQ(summary.audits, 3u);
  EXPECT_EQ(runner.metrics().size(), summary.batches + summary.audits);
  // 400 training samples at 64 per batch: six full batches and one of 16
  EXPECT_EQ(summary.batches, 3u * 7u);
  std::stringstream csv;
  write_metrics_csv(csv, runner.metrics());
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, kMetricsHeader);
  csv.seekg(0);
  auto rows = read_metrics_csv(csv);
  ASSERT_EQ(rows.size(), runner.metrics().size());
  std::stringstream again;
  write_metrics_csv(again, rows);
  std::stringstream first;
  write_metrics_csv(first, runner.metrics());
  EXPECT_EQ(again.str(), first.str());
  std::size_t audit_rows = 0;
  for (const auto& r : rows) {
    EXPECT_NE(r.loss.has_value(), r.val_acc.has_value());
    audit_rows += r.val_acc.has_value();
  }
  EXPECT_EQ(audit_rows, 3u);
}

TEST(Qat, ResumeContinuesBitIdentically) {
  auto config = small_config();
  config.epochs = 4;
  auto a = make_runner(config);
  for (int i = 0; i < 7; ++i) a.step();
  auto bytes = a.checkpoint().serialize();
  std::vector<double> expected;
  for (int i = 0; i < 10; ++i) expected.push_back(a.step().loss);

  const auto& f = gaussians();
  auto b = QatRunner::resume(Checkpoint::parse(bytes), f.teacher.model.clone(), f.data.train, f.data.val);
  EXPECT_EQ(b.batches_done(), 7u);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(b.step().loss, expected[i]) << "step " << i;
  EXPECT_EQ(a.checkpoint().serialize(), b.checkpoint().serialize());
}

TEST(Qat, ScheduleFollowsBatchCount) {
  auto runner = make_runner(small_config());
  for (int i = 0; i < 4; ++i) runner.step();
  EXPECT_EQ(runner.loss_state().step, 4u);
  EXPECT_NEAR(runner.loss_state().t_q, runner.config().lr0 * 4, 1e-15);
  EXPECT_EQ(runner.lr_policy().phase, LrPhase::constant);
}

TEST(Qat, GenerousTargetsKeepTeacherPredictions) {
  auto config = small_config();
  config.targets = {32.0, 32.0};
  auto runner = make_runner(config);
  runner.run();
  const auto& f = gaussians();
  const Tensor x = f.data.val.all_inputs();
  Model teacher = f.teacher.model.clone();
  auto t = argmax_rows(predict_logits(teacher, x), 2);
  auto s = argmax_rows(predict_logits(runner.student(), x), 2);
  std::size_t agree = 0;
  for (std::size_t i = 0; i < t.size(); ++i) agree += t[i] == s[i];
  EXPECT_GE(static_cast<double>(agree) / static_cast<double>(t.size()), 0.99);
}

TEST(Qat, RunWritesArtifacts) {
  auto dir = std::filesystem::temp_directory_path() / "gdnsq_qat_run";
  std::filesystem::remove_all(dir);
  auto runner = make_runner(small_config());
  runner.run(dir);
  EXPECT_TRUE(std::filesystem::exists(dir / "metrics.csv"));
  auto last = Checkpoint::load(dir / "last.ckpt");
  EXPECT_EQ(last.text("meta/kind"), "qat");
  EXPECT_EQ(RunConfig::from_json(last.text("meta/config")).hash(), runner.config().hash());
  std::filesystem::remove_all(dir);
}

TEST(Qat, FallingPenaltyWeightIsReportedOnce) {
  auto config = small_config();
  config.targets = {32.0, 32.0};
  config.anneal_alpha = 0.5;
  auto runner = make_runner(config);
  const auto summary = runner.run();
  EXPECT_EQ(runner.lr_policy().phase, LrPhase::annealing);
  std::size_t hits = 0;
  for (const auto& w : summary.warnings) hits += w.rfind("t_q started decreasing", 0) == 0;
  EXPECT_EQ(hits, 1u);
}

struct InputCapture : ActivationObserver {
  std::vector<double> pre;
  void observe(std::size_t site, std::span<const double> x, std::span<const double>) override {
    if (site == 0) pre.insert(pre.end(), x.begin(), x.end());
  }
};

TEST(Fuse, IntegerModelMatchesFakeQuantizedLayers) {
  auto runner = make_runner(small_config());
  runner.run();
  Model& student = runner.student();
  auto fused = fuse_model(student);
  ASSERT_EQ(fused.size(), 1u);

  InputCapture capture;
  ForwardOptions opt;
  opt.observer = &capture;
  const auto& val = gaussians().data.val;
  student.forward(val.all_inputs(), opt);
  const Layer& l = student.layers()[1];
  const std::size_t rows = capture.pre.size() / l.spec.in;
  QuantizedLayer q{l.weight, l.bias, *l.weight_quantizer, *l.activation_quantizer, l.spec.activation};
  auto fake = quantized_layer_forward(q, Tensor::from(capture.pre, {rows, l.spec.in}), nullptr);
  auto integer = fused_forward(fused[0], capture.pre, rows);
  ASSERT_EQ(integer.size(), fake.numel());
  for (std::size_t i = 0; i < integer.size(); ++i) ASSERT_NEAR(integer[i], fake[i], 1e-10);
  EXPECT_NE(fused_to_json(student, fused).find("\"weights\""), std::string::npos);
}

}  // namespace
}  // namespace gdnsq
