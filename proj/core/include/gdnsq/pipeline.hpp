#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "gdnsq/checkpoint.hpp"
#include "gdnsq/data.hpp"
#include "gdnsq/losses.hpp"
#include "gdnsq/model.hpp"
#include "gdnsq/optimizer.hpp"
#include "gdnsq/rng.hpp"

namespace gdnsq {

// Where training data comes from: a synthetic generator or a pair of IDX
// files split into train/val.
struct DataSource {
  std::string kind = "two_gaussians";  // two_gaussians | concentric_rings | idx
  std::uint64_t seed = 1;
  std::size_t n_train = 1000;
  std::size_t n_val = 500;
  std::string images;  // idx only
  std::string labels;  // idx only
  double val_fraction = 0.2;

  // "two_gaussians", "concentric_rings" or "idx:<images>:<labels>".
  static DataSource parse(const std::string& text);
  std::string describe() const;

  std::string to_json() const;
  static DataSource from_json(const std::string& text);
};

struct DataSplits {
  Dataset train;
  Dataset val;
};

DataSplits load_data(const DataSource& source);

struct RunConfig {
  std::string model = "mlp";
  DataSource data;
  BitTargets targets{4.0, 4.0};
  double lr0 = 0.01;
  double anneal_alpha = 0.9985;
  std::size_t batch_size = 64;
  std::size_t epochs = 200;
  NoiseMode noise_mode = NoiseMode::bernoulli;
  bool batchnorm_frozen = false;
  DistillLoss distill = DistillLoss::jeffreys;
  bool ptq_enabled = true;
  std::uint64_t seed = 0;
  // Starting value of t_q. Zero gives gradual scaling; a large value applies
  // the full bit-width penalty from the first batch.
  double initial_t_q = 0.0;

  // Throws DomainError on out-of-range fields.
  void validate() const;

  std::string to_json() const;
  // Unknown keys are rejected; missing keys keep `base` values.
  static RunConfig from_json(const std::string& text);
  static RunConfig from_json(const std::string& text, const RunConfig& base);
  std::uint64_t hash() const;
};

// ---- teacher ------------------------------------------------------------------

struct TeacherOptions {
  std::string model = "mlp";
  std::size_t epochs = 50;
  double lr = 0.01;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
};

struct TeacherResult {
  Model model;
  double val_accuracy = 0.0;
  std::vector<double> epoch_losses;
};

// Cross-entropy training with RAdam at a constant rate. Throws NumericError
// if the loss diverges.
TeacherResult train_teacher(const TeacherOptions& options, const Dataset& train, const Dataset& val);

// ---- quantizer initialization -------------------------------------------------

inline constexpr double kPtqBits = 10.0;

// Min/max post-training quantization at 10 bits: weight sites from the
// weights, activation sites from one eval pass over `data` with quantizers
// bypassed. Weights are not modified. Throws DomainError naming the site when
// a range is degenerate.
void ptq_minmax(Model& student, const Dataset& data, std::size_t batch_size = 256);

// Data-free initialization for runs without PTQ: weights on [-1, 1],
// activations on [0, 1] (or [-1, 1] when the lower bound is free), 10 bits.
void init_quantizers_default(Model& student);

// ---- audit ----------------------------------------------------------------------

struct SiteBits {
  std::string name;
  SiteKind kind = SiteKind::weight;
  double estimated = 0.0;  // omega from the quantizer parameters
  std::size_t levels = 0;  // distinct integer levels observed
  double actual = 0.0;     // ceil(log2(levels)); 0 for a single level
};

struct BitWidthReport {
  std::vector<SiteBits> weights;
  std::vector<SiteBits> activations;
  double mean_w_est = 0.0, mean_w_act = 0.0, max_w_act = 0.0;
  double mean_a_est = 0.0, mean_a_act = 0.0, max_a_act = 0.0;
  std::vector<std::string> warnings;

  bool reached(const BitTargets& targets) const {
    return max_w_act <= targets.weights && max_a_act <= targets.activations;
  }
  void print(std::ostream& out) const;
};

// Counts distinct quantized levels per site: the weights themselves and each
// activation site's inputs over `data` (eval mode, deterministic rounding).
BitWidthReport audit_bitwidth(Model& model, const Dataset& data, std::size_t batch_size = 256);

// ---- QAT --------------------------------------------------------------------------

// One line of the metrics CSV. Audit rows leave the batch fields empty and
// batch rows leave the audit fields empty.
struct MetricsRow {
  std::uint64_t step = 0;
  LrPhase phase = LrPhase::constant;
  double lambda = 0.0;
  double t_q = 0.0;
  double c_r = 0.0;
  std::optional<double> loss, distill_d, potential_p;
  std::optional<double> val_acc, mean_w_est, mean_w_act, max_w_act, mean_a_est, mean_a_act, max_a_act;
};

inline constexpr const char* kMetricsHeader =
    "step,phase,lambda,t_q,c_r,loss,distill_d,potential_P,val_acc,mean_w_est,mean_w_act,max_w_act,mean_a_est,"
    "mean_a_act,max_a_act";

void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> read_metrics_csv(std::istream& in);
std::string metrics_to_json(const std::vector<MetricsRow>& rows);

struct StepResult {
  double loss = 0.0;
  double distance = 0.0;
  double potential = 0.0;
  double lambda = 0.0;
  bool audited = false;
};

struct AuditResult {
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  double val_accuracy = 0.0;
  BitWidthReport report;
  bool reached = false;
};

struct QatSummary {
  double teacher_accuracy = 0.0;
  double final_accuracy = 0.0;
  std::optional<double> best_accuracy;          // among audits at target
  std::optional<std::uint64_t> first_reached_step;
  std::optional<double> first_reached_accuracy;
  BitWidthReport final_report;
  std::uint64_t batches = 0;
  std::size_t audits = 0;
  std::vector<std::string> warnings;
};

// Gradual bit-width convergence followed by LR annealing. Each step() runs one
// batch; the last batch of an epoch is followed by an audit on the validation
// set.
class QatRunner {
 public:
  QatRunner(RunConfig config, Model teacher, Model student, Dataset train, Dataset val);

  // Continues a run from a checkpoint written by checkpoint().
  static QatRunner resume(const Checkpoint& ckpt, Model teacher, Dataset train, Dataset val);

  StepResult step();
  AuditResult audit();
  bool finished() const { return epoch_ >= config_.epochs; }

  // Runs to the end of the epoch budget. With an output directory, writes
  // last.ckpt after every audit, best.ckpt when the best at-target accuracy
  // improves, and metrics.csv at the end.
  QatSummary run(const std::optional<std::filesystem::path>& out_dir = std::nullopt);

  Checkpoint checkpoint() const;

  const RunConfig& config() const { return config_; }
  Model& student() { return student_; }
  Model& teacher() { return teacher_; }
  const LossState& loss_state() const { return loss_state_; }
  const LrPolicy& lr_policy() const { return lr_policy_; }
  const std::vector<MetricsRow>& metrics() const { return metrics_; }
  const QatSummary& summary() const { return summary_; }
  std::uint64_t batches_done() const { return batches_done_; }
  std::size_t epoch() const { return epoch_; }
  const std::optional<Checkpoint>& best_checkpoint() const { return best_; }

 private:
  void prepare_epoch();

  RunConfig config_;
  Model teacher_;
  Model student_;
  Dataset train_;
  Dataset val_;
  Tensor val_inputs_;
  RAdam optimizer_;
  LossState loss_state_;
  LrPolicy lr_policy_;
  Rng rng_;
  std::size_t epoch_ = 0;
  std::size_t batch_in_epoch_ = 0;
  std::uint64_t batches_done_ = 0;
  bool trigger_annealing_ = false;
  std::optional<double> last_max_w_, last_max_a_;
  std::vector<std::vector<std::size_t>> batches_;
  std::size_t batches_epoch_ = static_cast<std::size_t>(-1);
  std::vector<MetricsRow> metrics_;
  QatSummary summary_;
  std::optional<Checkpoint> best_;
  std::optional<std::filesystem::path> out_dir_;
};

// Integer-fused forms of every quantized layer of a student.
std::vector<FusedLayer> fuse_model(const Model& student);
std::string fused_to_json(const Model& student, const std::vector<FusedLayer>& layers);

}  // namespace gdnsq
