#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>

#include "gdnsq/checkpoint.hpp"
#include "gdnsq/errors.hpp"
#include "gdnsq/model.hpp"
#include "gdnsq/oracles.hpp"
#include "gdnsq/pipeline.hpp"

namespace gdnsq::cli {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

// Bad flag values or combinations discovered after parsing.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataFlags {
  std::string data;
  std::uint64_t data_seed = 1;
  std::size_t n_train = 1000;
  std::size_t n_val = 500;
  CLI::Option* data_opt = nullptr;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* n_train_opt = nullptr;
  CLI::Option* n_val_opt = nullptr;

  void add(CLI::App* cmd, bool required) {
    data_opt = cmd->add_option("--data", data,
                               "Dataset: two_gaussians, concentric_rings or idx:<images>:<labels>" +
                                   std::string(required ? "" : " (default: the source recorded in the checkpoint)"));
    if (required) data_opt->default_str("two_gaussians");
    seed_opt = cmd->add_option("--data-seed", data_seed, "Seed of the synthetic dataset generator")->default_val(1);
    n_train_opt = cmd->add_option("--n-train", n_train, "Synthetic training samples")->default_val(1000);
    n_val_opt = cmd->add_option("--n-val", n_val, "Synthetic validation samples")->default_val(500);
  }

  bool given() const { return data_opt->count() > 0; }

  // Flags override `base`; the kind comes from --data when given.
  DataSource resolve(DataSource base) const {
    if (given()) {
      const auto parsed = DataSource::parse(data);
      base.kind = parsed.kind;
      base.images = parsed.images;
      base.labels = parsed.labels;
    }
    if (seed_opt->count()) base.seed = data_seed;
    if (n_train_opt->count()) base.n_train = n_train;
    if (n_val_opt->count()) base.n_val = n_val;
    return base;
  }
};

std::uint64_t seed_fallback(std::uint64_t fallback) {
  if (const char* env = std::getenv("GDNSQ_SEED")) {
    try {
      std::size_t pos = 0;
      const auto v = std::stoull(env, &pos);
      if (pos == std::string(env).size()) return v;
    } catch (const std::exception&) {
    }
    throw UsageError(std::string("GDNSQ_SEED is not an unsigned integer: '") + env + "'");
  }
  return fallback;
}

void write_text(const fs::path& path, const std::string& text) {
  write_file_atomic(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string read_text(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

DataSource data_source_of(const Checkpoint& ckpt) {
  if (ckpt.contains("meta/data")) return DataSource::from_json(ckpt.text("meta/data"));
  if (ckpt.contains("meta/config")) return RunConfig::from_json(ckpt.text("meta/config")).data;
  return {};
}

std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * v);
  return buf;
}

// ---- train-fp -------------------------------------------------------------------

struct TrainFpArgs {
  std::string model = "mlp";
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
  std::size_t epochs = 50;
  double lr = 0.01;
  std::size_t batch_size = 64;
  std::string out;
  DataFlags data;
};

int run_train_fp(TrainFpArgs& a, std::ostream& out) {
  TeacherOptions opt;
  opt.model = a.model;
  opt.epochs = a.epochs;
  opt.lr = a.lr;
  opt.batch_size = a.batch_size;
  opt.seed = a.seed_opt->count() ? a.seed : seed_fallback(0);
  DataSource source;
  try {
    source = a.data.resolve(DataSource{});
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  const auto splits = load_data(source);
  auto result = train_teacher(opt, splits.train, splits.val);

  json resolved = {{"command", "train-fp"},   {"model", opt.model},
                   {"seed", opt.seed},        {"epochs", opt.epochs},
                   {"lr", opt.lr},            {"batch_size", opt.batch_size},
                   {"data", json::parse(source.to_json())}};
  Checkpoint ckpt;
  ckpt.put_text("meta/kind", "fp");
  ckpt.put_text("meta/options", resolved.dump());
  ckpt.put_text("meta/data", source.to_json());
  ckpt.put_scalar("meta/val_accuracy", result.val_accuracy);
  result.model.save(ckpt, "model/");
  const fs::path dir(a.out);
  fs::create_directories(dir);
  ckpt.save(dir / "fp.ckpt");
  write_text(dir / "run.json", resolved.dump(2) + "\n");
  out << "teacher " << opt.model << " on " << source.describe() << ": val accuracy " << percent(result.val_accuracy)
      << " after " << opt.epochs << " epochs\n";
  out << "wrote " << (dir / "fp.ckpt").string() << "\n";
  return kSuccess;
}

// ---- ptq ----------------------------------------------------------------------

struct PtqArgs {
  std::string ckpt;
  std::string out;
  DataFlags data;
};

int run_ptq(PtqArgs& a, std::ostream& out) {
  const Checkpoint fp = Checkpoint::load(a.ckpt);
  Model teacher = Model::load(fp, "model/");
  if (teacher.quantized()) throw UsageError("--ckpt must be a full-precision teacher checkpoint");
  DataSource source;
  try {
    source = a.data.resolve(data_source_of(fp));
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  const auto splits = load_data(source);
  Model student = Model::student_from(teacher);
  ptq_minmax(student, splits.train);
  const Tensor val_x = splits.val.all_inputs();
  const double fp_acc = accuracy(teacher, val_x, splits.val.labels);
  const double q_acc = accuracy(student, val_x, splits.val.labels);
  const auto report = audit_bitwidth(student, splits.val);

  Checkpoint ckpt;
  ckpt.put_text("meta/kind", "ptq");
  ckpt.put_text("meta/data", source.to_json());
  ckpt.put_scalar("meta/teacher_accuracy", fp_acc);
  ckpt.put_scalar("meta/val_accuracy", q_acc);
  student.save(ckpt, "model/");
  const fs::path dir(a.out);
  fs::create_directories(dir);
  ckpt.save(dir / "ptq.ckpt");
  json resolved = {{"command", "ptq"}, {"ckpt", a.ckpt}, {"data", json::parse(source.to_json())}, {"bits", kPtqBits}};
  write_text(dir / "run.json", resolved.dump(2) + "\n");
  out << "teacher val accuracy " << percent(fp_acc) << ", 10-bit PTQ val accuracy " << percent(q_acc) << "\n";
  report.print(out);
  out << "wrote " << (dir / "ptq.ckpt").string() << "\n";
  return kSuccess;
}

// ---- qat ------------------------------------------------------------------------

struct QatArgs {
  std::string ckpt, teacher, config, out, resume;
  double wbits = 4, abits = 4, lr0 = 0.01, alpha = 0.9985, initial_tq = 0.0;
  std::size_t epochs = 200, batch_size = 64;
  std::string noise_mode = "bernoulli", distill = "jeffreys";
  bool no_ptq = false, freeze_bn = false;
  std::uint64_t seed = 0;
  std::map<std::string, CLI::Option*> opts;
  DataFlags data;
};

RunConfig resolve_qat_config(QatArgs& a, const Checkpoint& teacher_ckpt, const Model& teacher) {
  RunConfig c;
  c.model = teacher.spec().name;
  c.data = data_source_of(teacher_ckpt);
  bool seed_from_config = false;
  if (!a.config.empty()) {
    const auto text = read_text(a.config);
    c = RunConfig::from_json(text, c);
    seed_from_config = json::parse(text).contains("seed");
  }
  auto given = [&](const char* name) { return a.opts.at(name)->count() > 0; };
  if (given("--wbits")) c.targets.weights = a.wbits;
  if (given("--abits")) c.targets.activations = a.abits;
  if (given("--lr0")) c.lr0 = a.lr0;
  if (given("--alpha")) c.anneal_alpha = a.alpha;
  if (given("--epochs")) c.epochs = a.epochs;
  if (given("--batch-size")) c.batch_size = a.batch_size;
  if (given("--noise-mode")) c.noise_mode = parse_noise_mode(a.noise_mode);
  if (given("--distill")) c.distill = parse_distill_loss(a.distill);
  if (given("--initial-tq")) c.initial_t_q = a.initial_tq;
  if (a.no_ptq) c.ptq_enabled = false;
  if (a.freeze_bn) c.batchnorm_frozen = true;
  if (given("--seed")) {
    c.seed = a.seed;
  } else if (!seed_from_config) {
    c.seed = seed_fallback(c.seed);
  }
  c.data = a.data.resolve(c.data);
  if (c.model != teacher.spec().name) {
    throw UsageError("config model '" + c.model + "' does not match the teacher ('" + teacher.spec().name + "')");
  }
  c.validate();
  return c;
}

void print_summary(const QatSummary& s, const RunConfig& c, std::ostream& out) {
  out << "targets W" << c.targets.weights << "A" << c.targets.activations << ", " << s.batches << " batches, "
      << s.audits << " audits\n";
  out << "teacher val accuracy " << percent(s.teacher_accuracy) << ", final student " << percent(s.final_accuracy)
      << "\n";
  if (s.first_reached_step) {
    out << "target first reached at step " << *s.first_reached_step << " with accuracy "
        << percent(*s.first_reached_accuracy) << "; best at target " << percent(*s.best_accuracy) << "\n";
  } else {
    out << "target not reached\n";
  }
  s.final_report.print(out);
  for (const auto& w : s.warnings) out << "warning: " << w << "\n";
}

int run_qat(QatArgs& a, std::ostream& out) {
  if (a.teacher.empty()) throw UsageError("qat needs --teacher");
  if (!a.resume.empty() && (!a.ckpt.empty() || a.no_ptq || !a.config.empty())) {
    throw UsageError("--resume continues a run as recorded; drop --ckpt, --no-ptq and --config");
  }
  if (a.resume.empty() && a.no_ptq && !a.ckpt.empty()) {
    throw UsageError("--no-ptq builds the student from --teacher; drop --ckpt");
  }
  if (a.resume.empty() && !a.no_ptq && a.ckpt.empty()) {
    throw UsageError("qat needs --ckpt (a PTQ checkpoint) unless --no-ptq is given");
  }
  const Checkpoint teacher_ckpt = Checkpoint::load(a.teacher);
  Model teacher = Model::load(teacher_ckpt, "model/");
  if (teacher.quantized()) throw UsageError("--teacher must be a full-precision checkpoint");
  const fs::path dir(a.out);

  if (!a.resume.empty()) {
    Checkpoint ckpt = Checkpoint::load(a.resume);
    RunConfig c = RunConfig::from_json(ckpt.text("meta/config"));
    // the epoch budget is the one setting a resumed run may change
    if (a.opts.at("--epochs")->count() > 0) {
      c.epochs = a.epochs;
      ckpt.put_text("meta/config", c.to_json());
    }
    auto splits = load_data(c.data);
    QatRunner runner = QatRunner::resume(ckpt, std::move(teacher), std::move(splits.train), std::move(splits.val));
    const auto summary = runner.run(dir);
    write_text(dir / "run.json", c.to_json() + "\n");
    print_summary(summary, c, out);
    return kSuccess;
  }

  RunConfig c;
  try {
    c = resolve_qat_config(a, teacher_ckpt, teacher);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  auto splits = load_data(c.data);
  Model student = [&] {
    if (!c.ptq_enabled) {
      Model s = Model::student_from(teacher, c.noise_mode);
      init_quantizers_default(s);
      return s;
    }
    const Checkpoint ptq = Checkpoint::load(a.ckpt);
    Model s = Model::load(ptq, "model/");
    if (!s.quantized()) throw UsageError("--ckpt must be a quantized (PTQ) checkpoint");
    return s;
  }();
  fs::create_directories(dir);
  write_text(dir / "run.json", c.to_json() + "\n");
  QatRunner runner(c, std::move(teacher), std::move(student), std::move(splits.train), std::move(splits.val));
  const auto summary = runner.run(dir);
  print_summary(summary, c, out);
  return kSuccess;
}

// ---- audit / verify / export / fuse ---------------------------------------------

int run_audit(const std::string& path, DataFlags& data, std::ostream& out) {
  const Checkpoint ckpt = Checkpoint::load(path);
  Model model = Model::load(ckpt, "model/");
  if (!model.quantized()) throw UsageError("audit needs a quantized checkpoint (ptq or qat)");
  DataSource source;
  try {
    source = data.resolve(data_source_of(ckpt));
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  const auto splits = load_data(source);
  const auto report = audit_bitwidth(model, splits.val);
  out << "val accuracy " << percent(accuracy(model, splits.val.all_inputs(), splits.val.labels)) << " on "
      << source.describe() << "\n";
  report.print(out);
  return kSuccess;
}

int run_verify(const std::string& filter, std::uint64_t seed, std::ostream& out) {
  const auto reports = run_oracle_suite(filter, seed);
  if (reports.empty()) throw UsageError("no oracle matches filter '" + filter + "'");
  std::size_t failed = 0, inconclusive = 0;
  for (const auto& r : reports) {
    out << r.line() << "\n";
    failed += r.failed() ? 1 : 0;
    inconclusive += r.inconclusive ? 1 : 0;
  }
  out << reports.size() << " checks, " << failed << " failed, " << inconclusive << " inconclusive\n";
  return failed == 0 ? kSuccess : kCheckFailure;
}

int run_export(const std::string& run_dir, const std::string& format, const std::string& dest, std::ostream& out) {
  std::ifstream in(fs::path(run_dir) / "metrics.csv");
  if (!in) throw Error("no metrics.csv in '" + run_dir + "'");
  const auto rows = read_metrics_csv(in);
  std::string text;
  if (format == "json") {
    text = metrics_to_json(rows) + "\n";
  } else {
    std::ostringstream csv;
    write_metrics_csv(csv, rows);
    text = csv.str();
  }
  if (dest.empty()) {
    out << text;
  } else {
    write_text(dest, text);
  }
  return kSuccess;
}

int run_fuse(const std::string& path, const std::string& out_dir, std::ostream& out) {
  const Checkpoint ckpt = Checkpoint::load(path);
  const Model model = Model::load(ckpt, "model/");
  if (!model.quantized()) throw UsageError("fuse needs a quantized checkpoint");
  const auto layers = fuse_model(model);
  const fs::path dir(out_dir);
  fs::create_directories(dir);
  write_text(dir / "fused.json", fused_to_json(model, layers) + "\n");
  const auto indices = model.quantized_layer_indices();
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto& f = layers[k];
    const auto [lo, hi] = std::minmax_element(f.weights.begin(), f.weights.end());
    out << "L" << indices[k] << ": " << f.in << "x" << f.out << " integer weights in [" << *lo << ", " << *hi
        << "], s_w=" << f.weight_scale << " s_a=" << f.activation_scale << "\n";
  }
  out << "wrote " << (dir / "fused.json").string() << "\n";
  return kSuccess;
}

}  // namespace

int parse_and_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Quantization-aware training with gradual bit-width scaling and a noise-based STE.", "gdnsq"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  TrainFpArgs fp;
  auto* fp_cmd = app.add_subcommand("train-fp", "Train a full-precision teacher (cross-entropy, RAdam)");
  fp_cmd->add_option("--model", fp.model, "Architecture: mlp, mlp1, mlp4 or cnn")
      ->default_val("mlp")
      ->check(CLI::IsMember({"mlp", "mlp1", "mlp4", "cnn"}));
  fp.seed_opt = fp_cmd->add_option("--seed", fp.seed, "Seed for initialization and shuffling (fallback: GDNSQ_SEED)");
  fp_cmd->add_option("--epochs", fp.epochs, "Training epochs")->default_val(50)->check(CLI::PositiveNumber);
  fp_cmd->add_option("--lr", fp.lr, "Learning rate")->default_val(0.01)->check(CLI::PositiveNumber);
  fp_cmd->add_option("--batch-size", fp.batch_size, "Mini-batch size")->default_val(64)->check(CLI::Range(2, 1 << 20));
  fp_cmd->add_option("--out", fp.out, "Output directory (fp.ckpt, run.json)")->required();
  fp.data.add(fp_cmd, true);

  PtqArgs ptq;
  auto* ptq_cmd = app.add_subcommand(
      "ptq", "Build the quantized student and set every site to the min/max range at 10 bits");
  ptq_cmd->add_option("--ckpt", ptq.ckpt, "Teacher checkpoint from train-fp")->required()->check(CLI::ExistingFile);
  ptq_cmd->add_option("--out", ptq.out, "Output directory (ptq.ckpt, run.json)")->required();
  ptq.data.add(ptq_cmd, false);

  QatArgs qat;
  auto* qat_cmd = app.add_subcommand(
      "qat", "Gradual bit-width convergence toward (wbits, abits), then learning-rate annealing");
  qat_cmd->add_option("--ckpt", qat.ckpt, "Student checkpoint from ptq")->check(CLI::ExistingFile);
  qat_cmd->add_option("--teacher", qat.teacher, "Teacher checkpoint from train-fp (distillation target)")
      ->check(CLI::ExistingFile);
  qat_cmd->add_option("--config", qat.config, "JSON run config; flags override it, it overrides defaults")
      ->check(CLI::ExistingFile);
  qat_cmd->add_option("--resume", qat.resume, "Continue a run from its last.ckpt (--epochs may extend the budget)")->check(CLI::ExistingFile);
  qat.opts["--wbits"] = qat_cmd->add_option(
      "--wbits", qat.wbits, "Target weight bit-width omega_w*: the penalty pushes every weight site's omega below it");
  qat.opts["--abits"] = qat_cmd->add_option(
      "--abits", qat.abits, "Target activation bit-width omega_a*: same for activation sites");
  qat.opts["--lr0"] =
      qat_cmd->add_option("--lr0", qat.lr0, "Initial learning rate lambda_0; also scales t_q = lambda * n (default 0.01)");
  qat.opts["--alpha"] =
      qat_cmd->add_option("--alpha", qat.alpha, "Per-batch decay lambda <- alpha * lambda once the target is reached");
  qat.opts["--epochs"] = qat_cmd->add_option("--epochs", qat.epochs, "Epoch budget (default 200)");
  qat.opts["--batch-size"] = qat_cmd->add_option("--batch-size", qat.batch_size, "Mini-batch size (default 64)");
  qat.opts["--noise-mode"] =
      qat_cmd
          ->add_option("--noise-mode", qat.noise_mode,
                       "Gradient of the rounding noise with respect to s: bernoulli (+-1/2, default), "
                       "bernoulli_variance_matched (+-1/(2 sqrt 3)) or rounding_residual (the true residual)")
          ->check(CLI::IsMember({"bernoulli", "bernoulli_variance_matched", "rounding_residual"}));
  qat.opts["--distill"] =
      qat_cmd
          ->add_option("--distill", qat.distill,
                       "Distance d in the loss: jeffreys (symmetric KL to the teacher, default), cross_entropy "
                       "(to the teacher) or hard_label_ce (labels only, no distillation)")
          ->check(CLI::IsMember({"jeffreys", "cross_entropy", "hard_label_ce"}));
  qat.opts["--initial-tq"] = qat_cmd->add_option(
      "--initial-tq", qat.initial_tq, "Starting penalty weight t_q; a large value disables gradual scaling");
  qat_cmd->add_flag("--no-ptq", qat.no_ptq, "Skip PTQ: start from the teacher with fixed unit ranges at 10 bits");
  qat_cmd->add_flag("--freeze-bn", qat.freeze_bn, "Freeze batch-norm running statistics during QAT");
  qat.opts["--seed"] = qat_cmd->add_option("--seed", qat.seed, "Seed for shuffling and noise (fallback: GDNSQ_SEED)");
  qat_cmd->add_option("--out", qat.out, "Output directory (last.ckpt, best.ckpt, metrics.csv, run.json)")->required();
  qat.data.add(qat_cmd, false);

  std::string audit_ckpt;
  DataFlags audit_data;
  auto* audit_cmd = app.add_subcommand("audit", "Count distinct quantized levels per site on the validation set");
  audit_cmd->add_option("--ckpt", audit_ckpt, "Quantized checkpoint (ptq or qat)")->required()->check(CLI::ExistingFile);
  audit_data.add(audit_cmd, false);

  std::string filter;
  std::uint64_t verify_seed = 20240601;
  auto* verify_cmd = app.add_subcommand("verify", "Run the statistical and gradient oracles");
  verify_cmd->add_option("--filter", filter, "Only run checks whose name contains this text");
  verify_cmd->add_option("--seed", verify_seed, "Oracle seed")->default_val(20240601);

  std::string run_dir, format = "csv", export_out;
  auto* export_cmd = app.add_subcommand("export-metrics", "Print a run's metrics as CSV or JSON");
  export_cmd->add_option("--run-dir", run_dir, "Directory written by qat")->required()->check(CLI::ExistingDirectory);
  export_cmd->add_option("--format", format, "csv or json")->default_val("csv")->check(CLI::IsMember({"csv", "json"}));
  export_cmd->add_option("--out", export_out, "Write to this file instead of stdout");

  std::string fuse_ckpt, fuse_out;
  auto* fuse_cmd = app.add_subcommand("fuse", "Emit integer weights and scales of every quantized layer");
  fuse_cmd->add_option("--ckpt", fuse_ckpt, "Quantized checkpoint")->required()->check(CLI::ExistingFile);
  fuse_cmd->add_option("--out", fuse_out, "Output directory (fused.json)")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kSuccess : kUsageError;
  }

  try {
    if (*fp_cmd) return run_train_fp(fp, out);
    if (*ptq_cmd) return run_ptq(ptq, out);
    if (*qat_cmd) return run_qat(qat, out);
    if (*audit_cmd) return run_audit(audit_ckpt, audit_data, out);
    if (*verify_cmd) return run_verify(filter, verify_seed, out);
    if (*export_cmd) return run_export(run_dir, format, export_out, out);
    if (*fuse_cmd) return run_fuse(fuse_ckpt, fuse_out, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntimeFailure;
  }
  return kUsageError;
}

int parse_and_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return parse_and_dispatch(args, out, err);
}

}  // namespace gdnsq::cli
